use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{Diagnostics, LinearState, LossKind, Objective};
use crate::datasets::GroundTruth;
use crate::error::{Error, Result};
use crate::linalg;
use crate::linear_vae::{self, LinearVaeParams};
use crate::nonlinear_vae::{self, Network, Vae};
use crate::rng;

/// Where each block of a linear model sits in the flat vector: `Ã` then
/// `B̃` (both column-major), then `D` for the full loss, then `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearStateLayout {
    pub d: usize,
    pub r: usize,
    pub has_d: bool,
    /// Variances stored as logarithms.
    pub log: bool,
}

impl LinearStateLayout {
    pub fn dim(&self) -> usize {
        2 * self.d * self.r + if self.has_d { self.r } else { 0 } + 1
    }

    fn eps_index(&self) -> usize {
        self.dim() - 1
    }
}

/// Population loss `L` or `L1` of a linear VAE for a fixed data map `A`.
#[derive(Debug, Clone)]
pub struct LinearObjective {
    pub a: DMatrix<f64>,
    pub kind: LossKind,
    pub layout: LinearStateLayout,
}

impl LinearObjective {
    pub fn new(a: DMatrix<f64>, r: usize, kind: LossKind, log: bool) -> Result<Self> {
        if kind == LossKind::Mc {
            return Err(Error::Config("the linear objective is closed-form; use L or L1".into()));
        }
        if r == 0 {
            return Err(Error::Dimension("latent dimension must be at least 1".into()));
        }
        let layout = LinearStateLayout {
            d: a.nrows(),
            r,
            has_d: kind == LossKind::L,
            log,
        };
        Ok(Self { a, kind, layout })
    }

    pub fn pack(&self, p: &LinearVaeParams) -> Result<Vec<f64>> {
        let LinearStateLayout { d, r, has_d, log } = self.layout;
        if p.a_tilde.shape() != (d, r) || p.b_tilde.shape() != (r, d) || p.d_tilde.len() != r {
            return Err(Error::Dimension("parameters do not match the objective's shapes".into()));
        }
        let mut t = Vec::with_capacity(self.layout.dim());
        t.extend_from_slice(p.a_tilde.as_slice());
        t.extend_from_slice(p.b_tilde.as_slice());
        let tr = |v: f64| if log { v.ln() } else { v };
        if has_d {
            t.extend(p.d_tilde.iter().map(|&v| tr(v)));
        }
        t.push(tr(p.eps));
        Ok(t)
    }

    /// Parameters at `theta`. Under `L1` the encoder variance is its optimum.
    pub fn unpack(&self, theta: &[f64]) -> LinearVaeParams {
        let LinearStateLayout { d, r, has_d, log } = self.layout;
        let n = d * r;
        let a_tilde = DMatrix::from_column_slice(d, r, &theta[..n]);
        let b_tilde = DMatrix::from_column_slice(r, d, &theta[n..2 * n]);
        let tr = |v: f64| if log { v.exp() } else { v };
        let eps = tr(theta[self.layout.eps_index()]);
        let d_tilde = if has_d {
            DVector::from_iterator(r, theta[2 * n..2 * n + r].iter().map(|&v| tr(v)))
        } else {
            let e2 = eps * eps;
            linalg::column_sq_norms(&a_tilde).map(|c| e2 / (c + e2))
        };
        LinearVaeParams {
            a_tilde,
            b_tilde,
            d_tilde,
            eps,
        }
    }

    pub fn state(&self, theta: &[f64]) -> LinearState {
        let p = self.unpack(theta);
        LinearState {
            a_tilde: p.a_tilde,
            b_tilde: p.b_tilde,
        }
    }
}

impl Objective for LinearObjective {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn loss_grad(&mut self, theta: &[f64], _step: u64, grad: &mut [f64]) -> Result<f64> {
        let p = self.unpack(theta);
        let n = self.layout.d * self.layout.r;
        let log = self.layout.log;
        match self.kind {
            LossKind::L => {
                let loss = linear_vae::loss_l(&self.a, &p)?;
                let g = linear_vae::grad_l(&self.a, &p)?;
                let g = if log { g.to_log(&p) } else { g };
                grad[..n].copy_from_slice(g.a_tilde.as_slice());
                grad[n..2 * n].copy_from_slice(g.b_tilde.as_slice());
                grad[2 * n..2 * n + self.layout.r].copy_from_slice(g.d_tilde.as_slice());
                grad[self.layout.eps_index()] = g.eps;
                Ok(loss)
            }
            LossKind::L1 => {
                let loss = linear_vae::loss_l1(&self.a, &p.a_tilde, &p.b_tilde, p.eps)?;
                let g = linear_vae::grad_l1(&self.a, &p.a_tilde, &p.b_tilde, p.eps)?;
                let g = if log { g.to_log(p.eps) } else { g };
                grad[..n].copy_from_slice(g.a_tilde.as_slice());
                grad[n..2 * n].copy_from_slice(g.b_tilde.as_slice());
                grad[self.layout.eps_index()] = g.eps;
                Ok(loss)
            }
            LossKind::Mc => unreachable!("rejected in LinearObjective::new"),
        }
    }

    fn eps_coord(&self) -> Option<(usize, bool)> {
        Some((self.layout.eps_index(), self.layout.log))
    }

    fn k_value(&self, theta: &[f64]) -> f64 {
        let (d, r) = (self.layout.d, self.layout.r);
        let eps = self.eps(theta);
        let max_c = theta[..d * r]
            .chunks(d)
            .map(|col| col.iter().map(|v| v * v).sum::<f64>())
            .fold(0.0, f64::max);
        max_c + eps * eps
    }

    fn diagnostics(&mut self, theta: &[f64]) -> Result<Diagnostics> {
        let p = self.unpack(theta);
        Ok(Diagnostics {
            recon_mse: linear_vae::reconstruction_residual(&self.a, &p.a_tilde, &p.b_tilde),
            singular_values: linalg::singular_values(&p.a_tilde),
            d_tilde: p.d_tilde.iter().copied().collect(),
            linear: Some(LinearState {
                a_tilde: p.a_tilde,
                b_tilde: p.b_tilde,
            }),
        })
    }
}

/// Monte-Carlo loss of a nonlinear VAE, trained on minibatches.
///
/// With a training set, each step draws `batch` rows with replacement;
/// without one, each step draws `batch` fresh samples from the ground truth.
/// Encoder noise is fresh every step. Snapshot diagnostics use a fixed
/// evaluation set and fixed noise so that they are comparable across steps.
pub struct NonlinearObjective<N: Network> {
    pub vae: Vae<N>,
    pub gt: GroundTruth,
    pub train: Option<DMatrix<f64>>,
    pub batch: usize,
    pub n_noise: usize,
    pub seed: u64,
    eval: DMatrix<f64>,
}

const EVAL_ROWS: usize = 512;

impl<N: Network> NonlinearObjective<N> {
    pub fn new(vae: Vae<N>, gt: GroundTruth, train: Option<DMatrix<f64>>, batch: usize, n_noise: usize, seed: u64) -> Result<Self> {
        if gt.d() != vae.d() {
            return Err(Error::Dimension(format!("model has d = {} but data has d = {}", vae.d(), gt.d())));
        }
        if batch < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if n_noise == 0 {
            return Err(Error::Config("need at least one noise draw per row".into()));
        }
        if let Some(t) = &train {
            if t.nrows() == 0 || t.ncols() != vae.d() {
                return Err(Error::Dimension("training set is empty or has the wrong width".into()));
            }
        }
        let eval = gt.sample(EVAL_ROWS, rng::derive_seed(seed, 0xE7A1))?;
        Ok(Self {
            vae,
            gt,
            train,
            batch,
            n_noise,
            seed,
            eval,
        })
    }

    fn batch_at(&self, step: u64) -> Result<DMatrix<f64>> {
        let s = rng::derive_seed(self.seed, 2 * step);
        match &self.train {
            Some(t) => {
                let mut g = rng::seeded(s);
                let mut out = DMatrix::zeros(self.batch, t.ncols());
                for i in 0..self.batch {
                    let k = g.random_range(0..t.nrows());
                    out.row_mut(i).copy_from(&t.row(k));
                }
                Ok(out)
            }
            None => self.gt.sample(self.batch, s),
        }
    }

    /// Model at `theta`.
    pub fn model(&self, theta: &[f64]) -> Result<Vae<N>> {
        let mut v = self.vae.clone();
        v.set_theta(theta)?;
        Ok(v)
    }
}

impl<N: Network> Objective for NonlinearObjective<N> {
    fn dim(&self) -> usize {
        self.vae.n_theta()
    }

    fn loss_grad(&mut self, theta: &[f64], step: u64, grad: &mut [f64]) -> Result<f64> {
        self.vae.set_theta(theta)?;
        let x = self.batch_at(step)?;
        let noise_seed = rng::derive_seed(self.seed, 2 * step + 1);
        let (est, g) = nonlinear_vae::train_loss_and_grad(&self.vae, &x, self.n_noise, noise_seed)?;
        let flat = g.flat_log(&self.vae);
        grad.copy_from_slice(&flat);
        Ok(est.mean)
    }

    fn eps_coord(&self) -> Option<(usize, bool)> {
        Some((self.vae.n_theta() - 1, true))
    }

    fn k_value(&self, theta: &[f64]) -> f64 {
        let eps = self.eps(theta);
        if self.vae.net.linear_decoder().is_none() {
            return eps * eps;
        }
        let mut v = self.vae.clone();
        if v.set_theta(theta).is_err() {
            return f64::NAN;
        }
        let c = v
            .net
            .linear_decoder()
            .map_or(0.0, |a| linalg::column_sq_norms(a).iter().copied().fold(0.0, f64::max));
        c + eps * eps
    }

    fn diagnostics(&mut self, theta: &[f64]) -> Result<Diagnostics> {
        self.vae.set_theta(theta)?;
        let recon = nonlinear_vae::mc_reconstruction(&self.vae, &self.eval, 2, rng::derive_seed(self.seed, 0xE7A2))?;
        let singular_values = self.vae.net.linear_decoder().map(linalg::singular_values).unwrap_or_default();
        Ok(Diagnostics {
            recon_mse: recon,
            singular_values,
            d_tilde: self.vae.d_tilde.iter().copied().collect(),
            linear: None,
        })
    }
}
