use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{SigmoidNet, Vae};
use crate::datasets::sigmoid;
use crate::error::{Error, Result};
use crate::rng;

/// Sigmoid-architecture model whose decoder pushforward is `N(0, I_{r*+s})`
/// padded with zeros: it covers the data manifold plus `s` spurious
/// directions, yet reconstructs perfectly as `ε → 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BadSolution {
    pub net: SigmoidNet,
    pub r_star: usize,
    pub s: usize,
}

impl BadSolution {
    /// Number of latent coordinates used by the decoder.
    pub fn active(&self) -> usize {
        self.r_star + self.s
    }

    /// `D_i = ε² / (1 + ε²)` on the active latents, 1 elsewhere.
    pub fn d_schedule(&self, eps: f64) -> DVector<f64> {
        let r = self.net.a1.ncols();
        let e2 = eps * eps;
        DVector::from_iterator(r, (0..r).map(|i| if i < self.active() { e2 / (1.0 + e2) } else { 1.0 }))
    }

    pub fn vae_at(&self, eps: f64) -> Result<Vae<SigmoidNet>> {
        Vae::new(self.net.clone(), self.d_schedule(eps), eps)
    }
}

/// Block identities: `Ã₁ = I_{r*+s}`, `Ã₂ = 0`, `B̃ = I_{r*+1}`, all
/// zero-padded, with decoder bias `−½` so that `σ(0)` cancels.
pub fn construct_bad_solution(r_star: usize, s: usize, r: usize, d: usize) -> Result<BadSolution> {
    if r_star == 0 || s == 0 {
        return Err(Error::Construction("need r* >= 1 and s >= 1".into()));
    }
    if d <= r_star + s {
        return Err(Error::Construction(format!("need d > r* + s (got d = {d}, r* + s = {})", r_star + s)));
    }
    if r <= r_star + 1 || r < r_star + s {
        return Err(Error::Construction(format!(
            "latent dimension {r} must exceed r* + 1 and cover r* + s = {}",
            r_star + s
        )));
    }
    let mut a1 = DMatrix::zeros(d, r);
    a1.view_mut((0, 0), (r_star + s, r_star + s)).fill_with_identity();
    let mut b = DMatrix::zeros(r, d);
    b.view_mut((0, 0), (r_star + 1, r_star + 1)).fill_with_identity();
    let mut net = SigmoidNet::from_linear(a1, b, true)?;
    net.learn_bias = false;
    Ok(BadSolution { net, r_star, s })
}

/// Closed-form loss of the construction at a given `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BadSolutionLoss {
    /// Reconstruction error summed over all `r* + s` noisy latents.
    pub consistent: f64,
    /// Reconstruction error summed over the first `r* + 1` latents only.
    pub as_printed: f64,
    /// Estimate of `E‖x_{1..r*+1}‖²` and its standard error.
    pub data_term: f64,
    pub data_term_se: f64,
}

/// Loss of [`construct_bad_solution`] on data with `a* = 1`, where
/// `E‖x_{1..r*+1}‖² = r* + E[σ(Σ z_i)²]` is estimated from `n_mc` draws.
pub fn eval_bad_solution_loss(
    r_star: usize,
    s: usize,
    d: usize,
    r: usize,
    eps: f64,
    n_mc: usize,
    seed: u64,
) -> Result<BadSolutionLoss> {
    construct_bad_solution(r_star, s, r, d)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Domain(format!("decoder std must be positive, got {eps}")));
    }
    if n_mc < 2 {
        return Err(Error::Domain("need at least 2 Monte-Carlo draws".into()));
    }
    let mut g = rng::seeded(seed);
    let sd = (r_star as f64).sqrt();
    let draws: Vec<f64> = (0..n_mc).map(|_| sigmoid(sd * rng::normal(&mut g)).powi(2)).collect();
    let mean = draws.iter().sum::<f64>() / n_mc as f64;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_mc as f64 - 1.0);
    let data_term = r_star as f64 + mean;

    let e2 = eps * eps;
    let act = (r_star + s) as f64;
    let base = 0.5 * data_term
        + (d as f64 - act) * eps.ln()
        + 0.5 * act * (e2.ln_1p())
        + 0.5 * act * e2 / (1.0 + e2)
        + 0.5 * (r as f64 - act);
    // the reconstruction term: each noisy active latent contributes D_i / 2ε²
    let rec_consistent = 0.5 * act / (1.0 + e2);
    let rec_printed = 0.5 * (r_star + 1) as f64 / (1.0 + e2);
    Ok(BadSolutionLoss {
        consistent: base + rec_consistent,
        as_printed: base + rec_printed,
        data_term,
        data_term_se: 0.5 * (var / n_mc as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlinear_vae::Network;

    #[test]
    fn construction_shapes() {
        let b = construct_bad_solution(7, 1, 24, 28).unwrap();
        assert_eq!(b.net.a1.shape(), (28, 24));
        assert_eq!(b.net.b_tilde.shape(), (24, 28));
        assert_eq!(b.net.a2.iter().filter(|v| **v != 0.0).count(), 0);
        let d = b.d_schedule(1e-6);
        assert_eq!(d.iter().filter(|v| **v < 1e-6).count(), 8);
    }

    #[test]
    fn pushforward_is_block_identity() {
        let b = construct_bad_solution(3, 2, 7, 9).unwrap();
        let z = rng::normal_matrix(&mut rng::seeded(1), 20000, 7);
        let (f, _) = b.net.decode_batch(&z);
        let cov = f.transpose() * &f / 20000.0;
        for i in 0..9 {
            for j in 0..9 {
                let want = if i == j && i < 5 { 1.0 } else { 0.0 };
                assert!((cov[(i, j)] - want).abs() < 0.05, "({i},{j}) = {}", cov[(i, j)]);
            }
        }
        assert!(f.columns(5, 4).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_infeasible() {
        assert!(construct_bad_solution(3, 0, 6, 7).is_err());
        assert!(construct_bad_solution(3, 1, 4, 7).is_err());
        assert!(construct_bad_solution(3, 4, 6, 7).is_err());
        assert!(construct_bad_solution(3, 3, 5, 9).is_err());
    }

    #[test]
    fn variants_agree_for_one_extra_dim() {
        let l = eval_bad_solution_loss(7, 1, 28, 24, 1e-3, 1000, 0).unwrap();
        assert_eq!(l.consistent, l.as_printed);
        let l = eval_bad_solution_loss(3, 2, 9, 7, 1e-3, 1000, 0).unwrap();
        assert!(l.consistent > l.as_printed);
    }
}
