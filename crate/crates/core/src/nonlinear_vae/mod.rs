//! Nonlinear VAEs: networks, the Monte-Carlo loss with pathwise gradients,
//! and the over-dimensioned sigmoid construction.
//!
//! The per-sample objective is
//! `‖x − f(z̃)‖² / 2ε² + d log ε + ½‖g(x)‖² + ½ Σ (D_i − log D_i)`
//! with `z̃ = g(x) + D^{1/2} z′`. Its expectation over data and `z′` is the
//! negative ELBO up to an additive constant, and for linear maps it equals the
//! closed-form loss in [`crate::linear_vae`].

mod bad;
mod mlp;
mod sigmoid;

pub use bad::{construct_bad_solution, eval_bad_solution_loss, BadSolution, BadSolutionLoss};
pub use mlp::{Activation, Layer, MlpNet};
pub use sigmoid::SigmoidNet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Encoder mean `g` and decoder mean `f` with reverse-mode derivatives over
/// row batches. Weight gradients accumulate into a slice laid out like
/// [`Network::weights`].
pub trait Network: Clone {
    type EncTape;
    type DecTape;

    fn data_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn n_weights(&self) -> usize;
    fn weights(&self) -> Vec<f64>;
    fn set_weights(&mut self, w: &[f64]) -> Result<()>;

    /// `x` is `n × d`; returns `n × r` means.
    fn encode_batch(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Self::EncTape);
    /// `z` is `n × r`; returns `n × d` means.
    fn decode_batch(&self, z: &DMatrix<f64>) -> (DMatrix<f64>, Self::DecTape);
    /// Accumulates decoder weight gradients and returns `∂/∂z`.
    fn decoder_backward(&self, tape: &Self::DecTape, d_out: &DMatrix<f64>, grad: &mut [f64]) -> DMatrix<f64>;
    fn encoder_backward(&self, tape: &Self::EncTape, d_mean: &DMatrix<f64>, grad: &mut [f64]);

    /// The linear part of the decoder, when it has one.
    fn linear_decoder(&self) -> Option<&DMatrix<f64>> {
        None
    }
}

/// A network together with the encoder variance `D` and decoder std `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vae<N> {
    pub net: N,
    pub d_tilde: DVector<f64>,
    pub eps: f64,
}

/// Gradient of the Monte-Carlo loss. `d_tilde` and `eps` are raw
/// derivatives; see [`VaeGrad::to_log`].
#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrad {
    pub weights: Vec<f64>,
    pub d_tilde: DVector<f64>,
    pub eps: f64,
}

impl VaeGrad {
    pub fn to_log<N>(&self, vae: &Vae<N>) -> VaeGrad {
        VaeGrad {
            weights: self.weights.clone(),
            d_tilde: self.d_tilde.component_mul(&vae.d_tilde),
            eps: self.eps * vae.eps,
        }
    }

    /// Flat vector in the [`Vae::theta`] layout (log variances).
    pub fn flat_log<N>(&self, vae: &Vae<N>) -> Vec<f64> {
        let g = self.to_log(vae);
        let mut out = g.weights;
        out.extend(g.d_tilde.iter());
        out.push(g.eps);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

impl<N: Network> Vae<N> {
    pub fn new(net: N, d_tilde: DVector<f64>, eps: f64) -> Result<Self> {
        if d_tilde.len() != net.latent_dim() {
            return Err(Error::Dimension(format!(
                "encoder variance has length {} but latent dimension is {}",
                d_tilde.len(),
                net.latent_dim()
            )));
        }
        let v = Self { net, d_tilde, eps };
        v.check_domain()?;
        Ok(v)
    }

    fn check_domain(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Domain(format!("decoder std must be positive, got {}", self.eps)));
        }
        if let Some(v) = self.d_tilde.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("encoder variances must be positive, got {v}")));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.net.data_dim()
    }

    pub fn r(&self) -> usize {
        self.net.latent_dim()
    }

    pub fn encode(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.d() {
            return Err(Error::Dimension(format!("expected input of length {}, got {}", self.d(), x.len())));
        }
        let (g, _) = self.net.encode_batch(&DMatrix::from_row_slice(1, x.len(), x.as_slice()));
        Ok(DVector::from_iterator(g.ncols(), g.iter().copied()))
    }

    pub fn decode(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.r() {
            return Err(Error::Dimension(format!("expected code of length {}, got {}", self.r(), z.len())));
        }
        let (f, _) = self.net.decode_batch(&DMatrix::from_row_slice(1, z.len(), z.as_slice()));
        Ok(DVector::from_iterator(f.ncols(), f.iter().copied()))
    }

    /// Flat parameters: network weights, then `log D`, then `log ε`.
    pub fn theta(&self) -> Vec<f64> {
        let mut t = self.net.weights();
        t.extend(self.d_tilde.iter().map(|v| v.ln()));
        t.push(self.eps.ln());
        t
    }

    pub fn n_theta(&self) -> usize {
        self.net.n_weights() + self.r() + 1
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        let nw = self.net.n_weights();
        let r = self.r();
        if theta.len() != nw + r + 1 {
            return Err(Error::Dimension(format!("expected {} parameters, got {}", nw + r + 1, theta.len())));
        }
        self.net.set_weights(&theta[..nw])?;
        for i in 0..r {
            self.d_tilde[i] = theta[nw + i].exp();
        }
        self.eps = theta[nw + r].exp();
        Ok(())
    }

    /// Decoder means at `n` draws of `z ~ N(0, I_r)`.
    pub fn generate(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let z = rng::normal_matrix(&mut rng::seeded(seed), n, self.r());
        let mut out = DMatrix::zeros(n, self.d());
        for start in (0..n).step_by(CHUNK) {
            let len = CHUNK.min(n - start);
            let (f, _) = self.net.decode_batch(&z.rows(start, len).into_owned());
            out.rows_mut(start, len).copy_from(&f);
        }
        out
    }

    /// The objective with the encoder noise removed: `z̃ = g(x)`.
    pub fn deterministic_loss(&self, data: &DMatrix<f64>) -> Result<f64> {
        self.check_domain()?;
        check_data(self, data)?;
        let (g, _) = self.net.encode_batch(data);
        let (f, _) = self.net.decode_batch(&g);
        let n = data.nrows() as f64;
        let rec = (data - f).norm_squared() / n;
        Ok(rec / (2.0 * self.eps * self.eps) + self.const_terms() + 0.5 * g.norm_squared() / n)
    }

    /// `d log ε + ½ Σ (D_i − log D_i)`.
    fn const_terms(&self) -> f64 {
        self.d() as f64 * self.eps.ln() + 0.5 * self.d_tilde.iter().map(|v| v - v.ln()).sum::<f64>()
    }
}

/// Rows per internal batch; bounds memory for wide networks.
const CHUNK: usize = 1024;

fn check_data<N: Network>(vae: &Vae<N>, data: &DMatrix<f64>) -> Result<()> {
    if data.nrows() == 0 {
        return Err(Error::Dimension("data must have at least one row".into()));
    }
    if data.ncols() != vae.d() {
        return Err(Error::Dimension(format!(
            "data has {} columns but the model has d = {}",
            data.ncols(),
            vae.d()
        )));
    }
    Ok(())
}

/// Noise for row `i`: `n_noise × r`, from its own substream so that results do
/// not depend on chunking.
fn row_noise(seed: u64, i: usize, n_noise: usize, r: usize) -> DMatrix<f64> {
    rng::normal_matrix(&mut rng::substream(seed, i as u64), n_noise, r)
}

/// Sample mean and standard error. With two or more data rows the per-row
/// averages are the iid units; with a single row the noise draws are.
fn summarize(row_means: &[f64], single_row_terms: &[f64]) -> McEstimate {
    let units = if row_means.len() >= 2 { row_means } else { single_row_terms };
    let n = units.len();
    let mean = units.iter().sum::<f64>() / n as f64;
    let var = units.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    McEstimate {
        mean,
        std_error: (var / n as f64).sqrt(),
        n_samples: n,
    }
}

fn mc_eval<N: Network>(
    vae: &Vae<N>,
    data: &DMatrix<f64>,
    n_noise: usize,
    seed: u64,
    want_grad: bool,
    min_noise: usize,
) -> Result<(McEstimate, f64, Option<VaeGrad>)> {
    vae.check_domain()?;
    check_data(vae, data)?;
    if n_noise < min_noise || (data.nrows() == 1 && n_noise < 2) {
        return Err(Error::Domain(format!("need at least {} noise draws per row, got {n_noise}", min_noise.max(2))));
    }
    let (n, d) = data.shape();
    let r = vae.r();
    let e2 = vae.eps * vae.eps;
    let sqrt_d = vae.d_tilde.map(f64::sqrt);
    let consts = vae.const_terms();
    let total = (n * n_noise) as f64;

    let mut row_means = Vec::with_capacity(n);
    let mut terms = Vec::new();
    let mut gw = vec![0.0; if want_grad { vae.net.n_weights() } else { 0 }];
    let mut gd = DVector::zeros(r);
    let mut rec_sum = 0.0;

    let rows_per_chunk = (CHUNK / n_noise).max(1);
    for start in (0..n).step_by(rows_per_chunk) {
        let len = rows_per_chunk.min(n - start);
        let x = data.rows(start, len).into_owned();
        let (g, enc_tape) = vae.net.encode_batch(&x);
        let m = len * n_noise;
        let mut z = DMatrix::zeros(m, r);
        let mut eps_noise = DMatrix::zeros(m, r);
        let mut x_rep = DMatrix::zeros(m, d);
        for i in 0..len {
            let noise = row_noise(seed, start + i, n_noise, r);
            for k in 0..n_noise {
                let row = i * n_noise + k;
                for j in 0..r {
                    eps_noise[(row, j)] = noise[(k, j)];
                    z[(row, j)] = g[(i, j)] + sqrt_d[j] * noise[(k, j)];
                }
                x_rep.row_mut(row).copy_from(&x.row(i));
            }
        }
        let (f, dec_tape) = vae.net.decode_batch(&z);
        let diff = &x_rep - &f;
        for i in 0..len {
            let gi = 0.5 * g.row(i).norm_squared();
            let mut acc = 0.0;
            for k in 0..n_noise {
                let sq = diff.row(i * n_noise + k).norm_squared();
                rec_sum += sq;
                let t = sq / (2.0 * e2) + consts + gi;
                acc += t;
                if n == 1 {
                    terms.push(t);
                }
            }
            row_means.push(acc / n_noise as f64);
        }
        if want_grad {
            let d_out = &diff * (-1.0 / (e2 * total));
            let dz = vae.net.decoder_backward(&dec_tape, &d_out, &mut gw);
            let mut dg = &g * (1.0 / n as f64);
            for i in 0..len {
                for k in 0..n_noise {
                    let row = i * n_noise + k;
                    for j in 0..r {
                        dg[(i, j)] += dz[(row, j)];
                        gd[j] += dz[(row, j)] * eps_noise[(row, j)] / (2.0 * sqrt_d[j]);
                    }
                }
            }
            vae.net.encoder_backward(&enc_tape, &dg, &mut gw);
        }
    }
    let est = summarize(&row_means, &terms);
    if !est.mean.is_finite() {
        return Err(Error::Numerical(format!("Monte-Carlo loss is {}", est.mean)));
    }
    let grad = want_grad.then(|| {
        for j in 0..r {
            gd[j] += 0.5 * (1.0 - 1.0 / vae.d_tilde[j]);
        }
        let geps = -rec_sum / (total * e2 * vae.eps) + d as f64 / vae.eps;
        VaeGrad {
            weights: gw,
            d_tilde: gd,
            eps: geps,
        }
    });
    Ok((est, rec_sum / total, grad))
}

/// Monte-Carlo estimate of the objective over the rows of `data` with
/// `n_noise` encoder draws per row.
pub fn mc_loss<N: Network>(vae: &Vae<N>, data: &DMatrix<f64>, n_noise: usize, seed: u64) -> Result<McEstimate> {
    Ok(mc_eval(vae, data, n_noise, seed, false, 2)?.0)
}

/// Exact gradient of the same-seed estimate returned by [`mc_loss`].
pub fn grad_mc_loss<N: Network>(vae: &Vae<N>, data: &DMatrix<f64>, n_noise: usize, seed: u64) -> Result<VaeGrad> {
    Ok(mc_eval(vae, data, n_noise, seed, true, 2)?.2.expect("gradient requested"))
}

/// Estimate and gradient in one pass.
pub fn mc_loss_and_grad<N: Network>(
    vae: &Vae<N>,
    data: &DMatrix<f64>,
    n_noise: usize,
    seed: u64,
) -> Result<(McEstimate, VaeGrad)> {
    let (e, _, g) = mc_eval(vae, data, n_noise, seed, true, 2)?;
    Ok((e, g.expect("gradient requested")))
}

/// Training variant of [`mc_loss_and_grad`] that also accepts a single
/// noise draw per row when the batch has several rows.
pub fn train_loss_and_grad<N: Network>(
    vae: &Vae<N>,
    data: &DMatrix<f64>,
    n_noise: usize,
    seed: u64,
) -> Result<(McEstimate, VaeGrad)> {
    let (e, _, g) = mc_eval(vae, data, n_noise, seed, true, 1)?;
    Ok((e, g.expect("gradient requested")))
}

/// Mean squared reconstruction `‖x − f(z̃)‖²` under the same noise as
/// [`mc_loss`].
pub fn mc_reconstruction<N: Network>(vae: &Vae<N>, data: &DMatrix<f64>, n_noise: usize, seed: u64) -> Result<f64> {
    Ok(mc_eval(vae, data, n_noise, seed, false, 2)?.1)
}
