use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Network;
use crate::datasets::sigmoid;
use crate::error::{Error, Result};
use crate::rng;

/// Decoder `f(z) = Ã₁ z + σ(Ã₂ z) + b`, encoder `g(x) = B̃ x`.
///
/// The bias `b` starts at zero, which gives the bare architecture. Since
/// `σ(0) = ½` on every coordinate, a model with `Ã₂ = 0` can only reconstruct
/// zero padding if `b = −½`; [`SigmoidNet::from_linear`] sets that, and the
/// bias is trainable unless `learn_bias` is off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmoidNet {
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub b_tilde: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub learn_bias: bool,
}

pub struct SigmoidDecTape {
    z: DMatrix<f64>,
    s: DMatrix<f64>,
}

impl SigmoidNet {
    /// Gaussian initialization with variance `1 / fan_in`.
    pub fn init(d: usize, r: usize, seed: u64) -> Self {
        let mut g = rng::seeded(seed);
        let sr = 1.0 / (r as f64).sqrt();
        let sd = 1.0 / (d as f64).sqrt();
        Self {
            a1: rng::normal_matrix(&mut g, d, r) * sr,
            a2: rng::normal_matrix(&mut g, d, r) * sr,
            b_tilde: rng::normal_matrix(&mut g, r, d) * sd,
            bias: DVector::zeros(d),
            learn_bias: true,
        }
    }

    /// Embed a linear model: `Ã₂ = 0` and, with `subtract_offset`, bias `−½`
    /// so that `f(z) = Ã z` exactly.
    pub fn from_linear(a_tilde: DMatrix<f64>, b_tilde: DMatrix<f64>, subtract_offset: bool) -> Result<Self> {
        let (d, r) = a_tilde.shape();
        if b_tilde.shape() != (r, d) {
            return Err(Error::Dimension(format!("encoder must be {r}×{d}, got {:?}", b_tilde.shape())));
        }
        let offset = if subtract_offset { -0.5 } else { 0.0 };
        Ok(Self {
            a1: a_tilde,
            a2: DMatrix::zeros(d, r),
            b_tilde,
            bias: DVector::from_element(d, offset),
            learn_bias: true,
        })
    }

    /// The data map `z ↦ (z, σ(⟨a*, z⟩), 0, …)` written in this architecture,
    /// with `r = r*` latents and the offset removed off the link coordinate.
    pub fn ground_truth(a_star: &DVector<f64>, d: usize) -> Result<Self> {
        let r = a_star.len();
        if d <= r {
            return Err(Error::Dimension(format!("need d > r* (got d = {d}, r* = {r})")));
        }
        let mut a1 = DMatrix::zeros(d, r);
        a1.view_mut((0, 0), (r, r)).fill_with_identity();
        let mut a2 = DMatrix::zeros(d, r);
        a2.row_mut(r).copy_from(&a_star.transpose());
        let mut bias = DVector::from_element(d, -0.5);
        bias[r] = 0.0;
        Ok(Self {
            a1,
            a2,
            b_tilde: DMatrix::zeros(r, d),
            bias,
            learn_bias: false,
        })
    }

    fn sizes(&self) -> [usize; 4] {
        [self.a1.len(), self.a2.len(), self.b_tilde.len(), self.bias.len()]
    }
}

impl Network for SigmoidNet {
    type EncTape = DMatrix<f64>;
    type DecTape = SigmoidDecTape;

    fn data_dim(&self) -> usize {
        self.a1.nrows()
    }

    fn latent_dim(&self) -> usize {
        self.a1.ncols()
    }

    fn n_weights(&self) -> usize {
        self.sizes().iter().sum()
    }

    fn weights(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.n_weights());
        w.extend_from_slice(self.a1.as_slice());
        w.extend_from_slice(self.a2.as_slice());
        w.extend_from_slice(self.b_tilde.as_slice());
        w.extend_from_slice(self.bias.as_slice());
        w
    }

    fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.n_weights() {
            return Err(Error::Dimension(format!("expected {} weights, got {}", self.n_weights(), w.len())));
        }
        let [n1, n2, n3, _] = self.sizes();
        self.a1.as_mut_slice().copy_from_slice(&w[..n1]);
        self.a2.as_mut_slice().copy_from_slice(&w[n1..n1 + n2]);
        self.b_tilde.as_mut_slice().copy_from_slice(&w[n1 + n2..n1 + n2 + n3]);
        self.bias.as_mut_slice().copy_from_slice(&w[n1 + n2 + n3..]);
        Ok(())
    }

    fn encode_batch(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (x * self.b_tilde.transpose(), x.clone())
    }

    fn decode_batch(&self, z: &DMatrix<f64>) -> (DMatrix<f64>, SigmoidDecTape) {
        let s = (z * self.a2.transpose()).map(sigmoid);
        let mut f = z * self.a1.transpose() + &s;
        for (j, mut col) in f.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.bias[j]);
        }
        (f, SigmoidDecTape { z: z.clone(), s })
    }

    fn decoder_backward(&self, tape: &SigmoidDecTape, d_out: &DMatrix<f64>, grad: &mut [f64]) -> DMatrix<f64> {
        let [n1, n2, n3, _] = self.sizes();
        let d_pre = d_out.zip_map(&tape.s, |g, s| g * s * (1.0 - s));
        let ga1 = d_out.transpose() * &tape.z;
        let ga2 = d_pre.transpose() * &tape.z;
        for (dst, src) in grad[..n1].iter_mut().zip(ga1.iter()) {
            *dst += src;
        }
        for (dst, src) in grad[n1..n1 + n2].iter_mut().zip(ga2.iter()) {
            *dst += src;
        }
        if self.learn_bias {
            for (j, dst) in grad[n1 + n2 + n3..].iter_mut().enumerate() {
                *dst += d_out.column(j).sum();
            }
        }
        d_out * &self.a1 + d_pre * &self.a2
    }

    fn encoder_backward(&self, x: &DMatrix<f64>, d_mean: &DMatrix<f64>, grad: &mut [f64]) {
        let [n1, n2, n3, _] = self.sizes();
        let gb = d_mean.transpose() * x;
        for (dst, src) in grad[n1 + n2..n1 + n2 + n3].iter_mut().zip(gb.iter()) {
            *dst += src;
        }
    }

    fn linear_decoder(&self) -> Option<&DMatrix<f64>> {
        Some(&self.a1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{sample_sigmoid, SigmoidGroundTruth};
    use crate::nonlinear_vae::Vae;

    #[test]
    fn zero_a2_adds_half() {
        let mut a1 = DMatrix::zeros(5, 2);
        a1[(0, 0)] = 1.0;
        a1[(1, 1)] = 1.0;
        let net = SigmoidNet::from_linear(a1, DMatrix::zeros(2, 5), false).unwrap();
        let vae = Vae::new(net, DVector::from_element(2, 1.0), 1.0).unwrap();
        let z = DVector::from_vec(vec![0.3, -1.2]);
        let f = vae.decode(&z).unwrap();
        assert_eq!(f.as_slice(), &[0.3 + 0.5, -1.2 + 0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn ground_truth_map_matches_generator() {
        let gt = SigmoidGroundTruth::new(3, 7, 4).unwrap();
        let net = SigmoidNet::ground_truth(&gt.a_star, 7).unwrap();
        let x = sample_sigmoid(&gt, 1000, 5).unwrap();
        let (f, _) = net.decode_batch(&x.columns(0, 3).into_owned());
        assert!((f - x).amax() < 1e-15);
    }

    #[test]
    fn weights_roundtrip() {
        let mut net = SigmoidNet::init(4, 3, 1);
        let w: Vec<f64> = (0..net.n_weights()).map(|i| i as f64).collect();
        net.set_weights(&w).unwrap();
        assert_eq!(net.weights(), w);
        assert!(net.set_weights(&w[1..]).is_err());
    }
}
