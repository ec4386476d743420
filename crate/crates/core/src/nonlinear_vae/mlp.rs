use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Network;
use crate::datasets::sigmoid;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Logistic,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Logistic => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative written in terms of the output `y`.
    #[inline]
    fn slope_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Logistic => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(Activation::Logistic),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Affine map `y = W x + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Layer {
    fn init<R: rand::Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let scale = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: rng::normal_matrix(rng, fan_out, fan_in) * scale,
            b: DVector::zeros(fan_out),
        }
    }

    fn n_weights(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Stack of layers with the activation after every layer but the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    fn forward(&self, act: Activation, x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut next = &h * layer.w.transpose();
            for (j, mut col) in next.column_iter_mut().enumerate() {
                col.add_scalar_mut(layer.b[j]);
            }
            if k < last {
                next.apply(|v| *v = act.apply(*v));
            }
            acts.push(h);
            h = next;
        }
        acts.push(h.clone());
        (h, acts)
    }

    /// `acts[k]` is the input of layer `k`; `acts[last + 1]` the output.
    fn backward(&self, act: Activation, acts: &[DMatrix<f64>], d_out: &DMatrix<f64>, grad: &mut [f64]) -> DMatrix<f64> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut o = 0;
        for layer in &self.layers {
            offsets.push(o);
            o += layer.n_weights();
        }
        let last = self.layers.len() - 1;
        let mut delta = d_out.clone();
        for k in (0..self.layers.len()).rev() {
            if k < last {
                let y = &acts[k + 1];
                delta.zip_apply(y, |g, y| *g *= act.slope_at_output(y));
            }
            let layer = &self.layers[k];
            let gw = delta.transpose() * &acts[k];
            let base = offsets[k];
            for (dst, src) in grad[base..base + gw.len()].iter_mut().zip(gw.iter()) {
                *dst += src;
            }
            let bb = base + gw.len();
            for j in 0..layer.b.len() {
                grad[bb + j] += delta.column(j).sum();
            }
            delta = &delta * &layer.w;
        }
        delta
    }

    fn n_weights(&self) -> usize {
        self.layers.iter().map(Layer::n_weights).sum()
    }

    fn write(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
    }

    fn read(&mut self, w: &[f64]) {
        let mut o = 0;
        for l in &mut self.layers {
            let n = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&w[o..o + n]);
            o += n;
            let m = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&w[o..o + m]);
            o += m;
        }
    }
}

/// Encoder `d → h → h → h → r` and decoder `r → h → h → h → d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpNet {
    pub encoder: Stack,
    pub decoder: Stack,
    pub activation: Activation,
}

impl MlpNet {
    /// Three hidden layers of width `hidden`, Gaussian weights with variance
    /// `1 / fan_in`, zero biases.
    pub fn init(d: usize, r: usize, hidden: usize, activation: Activation, seed: u64) -> Self {
        let mut g = rng::seeded(seed);
        let enc_w = [d, hidden, hidden, hidden, r];
        let dec_w = [r, hidden, hidden, hidden, d];
        let encoder = Stack {
            layers: enc_w.windows(2).map(|w| Layer::init(&mut g, w[0], w[1])).collect(),
        };
        let decoder = Stack {
            layers: dec_w.windows(2).map(|w| Layer::init(&mut g, w[0], w[1])).collect(),
        };
        Self {
            encoder,
            decoder,
            activation,
        }
    }

    /// Build from explicit layers; checks that widths chain.
    pub fn from_layers(encoder: Vec<Layer>, decoder: Vec<Layer>, activation: Activation) -> Result<Self> {
        for stack in [&encoder, &decoder] {
            if stack.is_empty() {
                return Err(Error::Dimension("a network needs at least one layer".into()));
            }
            for l in stack {
                if l.b.len() != l.w.nrows() {
                    return Err(Error::Dimension("bias length must match layer output".into()));
                }
            }
            for w in stack.windows(2) {
                if w[0].w.nrows() != w[1].w.ncols() {
                    return Err(Error::Dimension("consecutive layer widths do not chain".into()));
                }
            }
        }
        let d = encoder[0].w.ncols();
        let r = encoder[encoder.len() - 1].w.nrows();
        if decoder[0].w.ncols() != r || decoder[decoder.len() - 1].w.nrows() != d {
            return Err(Error::Dimension("encoder and decoder dimensions disagree".into()));
        }
        Ok(Self {
            encoder: Stack { layers: encoder },
            decoder: Stack { layers: decoder },
            activation,
        })
    }
}

impl Network for MlpNet {
    type EncTape = Vec<DMatrix<f64>>;
    type DecTape = Vec<DMatrix<f64>>;

    fn data_dim(&self) -> usize {
        self.encoder.layers[0].w.ncols()
    }

    fn latent_dim(&self) -> usize {
        self.decoder.layers[0].w.ncols()
    }

    fn n_weights(&self) -> usize {
        self.encoder.n_weights() + self.decoder.n_weights()
    }

    fn weights(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.n_weights());
        self.encoder.write(&mut w);
        self.decoder.write(&mut w);
        w
    }

    fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.n_weights() {
            return Err(Error::Dimension(format!("expected {} weights, got {}", self.n_weights(), w.len())));
        }
        let ne = self.encoder.n_weights();
        self.encoder.read(&w[..ne]);
        self.decoder.read(&w[ne..]);
        Ok(())
    }

    fn encode_batch(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        self.encoder.forward(self.activation, x)
    }

    fn decode_batch(&self, z: &DMatrix<f64>) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        self.decoder.forward(self.activation, z)
    }

    fn decoder_backward(&self, tape: &Vec<DMatrix<f64>>, d_out: &DMatrix<f64>, grad: &mut [f64]) -> DMatrix<f64> {
        let ne = self.encoder.n_weights();
        self.decoder.backward(self.activation, tape, d_out, &mut grad[ne..])
    }

    fn encoder_backward(&self, tape: &Vec<DMatrix<f64>>, d_mean: &DMatrix<f64>, grad: &mut [f64]) {
        let ne = self.encoder.n_weights();
        self.encoder.backward(self.activation, tape, d_mean, &mut grad[..ne]);
    }
}
