//! Metrics on trained models and generated samples, and numerical checks of
//! the spectral decay bound, rotation invariance, and the zero-row gradient
//! inequality.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datasets::sigmoid;
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::linalg;
use crate::linear_vae::{self, LinearVaeParams};

/// Sum of `σ_i²` for `i > k`, singular values in descending order.
pub fn singular_tail(a_tilde: &DMatrix<f64>, k: usize) -> Result<f64> {
    let sv = linalg::singular_values(a_tilde);
    if k > sv.len() {
        return Err(Error::Dimension(format!("k = {k} exceeds min(d, r) = {}", sv.len())));
    }
    Ok(sv[k..].iter().map(|s| s * s).sum())
}

/// Per-snapshot comparison of the decoder's excess spectrum with the
/// exponential bound `C e^{-t/K(t)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayBoundReport {
    pub times: Vec<f64>,
    /// `‖P_{W⊥} Ã(t)‖_F²`.
    pub lhs: Vec<f64>,
    /// `Σ_{k > dim W} σ_k²(Ã(t))`.
    pub tail: Vec<f64>,
    pub bound: Vec<f64>,
    pub running_k: Vec<f64>,
    /// `lhs ≤ bound · (1 + tol)`.
    pub satisfied: Vec<bool>,
    /// `tail ≤ lhs`, up to rounding.
    pub tail_below_lhs: Vec<bool>,
    pub w_dim: usize,
    pub c: f64,
    pub tol: f64,
}

impl DecayBoundReport {
    pub fn all_satisfied(&self) -> bool {
        self.satisfied.iter().all(|&s| s) && self.tail_below_lhs.iter().all(|&s| s)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        use crate::dynamics::fmt_f64 as f;
        writeln!(w, "time,tail,lhs,bound,running_K,satisfied")?;
        for i in 0..self.times.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                f(self.times[i]),
                f(self.tail[i]),
                f(self.lhs[i]),
                f(self.bound[i]),
                f(self.running_k[i]),
                (self.satisfied[i] && self.tail_below_lhs[i]) as u8
            )?;
        }
        Ok(())
    }

    /// Least-squares slope of `log tail` against time over the final half of
    /// the snapshots with a positive tail.
    pub fn final_half_log_slope(&self) -> Option<f64> {
        let start = self.times.len() / 2;
        let pts: Vec<(f64, f64)> = (start..self.times.len())
            .filter(|&i| self.tail[i] > 0.0)
            .map(|i| (self.times[i], self.tail[i].ln()))
            .collect();
        least_squares_slope(&pts)
    }
}

pub(crate) fn least_squares_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn linear_states(traj: &Trajectory) -> Result<Vec<&DMatrix<f64>>> {
    if traj.is_empty() {
        return Err(Error::Precondition("trajectory is empty".into()));
    }
    traj.snapshots
        .iter()
        .map(|s| {
            s.linear
                .as_ref()
                .map(|l| &l.a_tilde)
                .ok_or_else(|| Error::Precondition("snapshots carry no decoder matrices".into()))
        })
        .collect()
}

/// Check both inequalities of the decay bound along a flow trajectory. `W`
/// is the column space of `A` in `R^d`, so `P_{W⊥}` acts on decoder columns.
pub fn decay_bound_check(traj: &Trajectory, a: &DMatrix<f64>, tol: f64) -> Result<DecayBoundReport> {
    let states = linear_states(traj)?;
    let w_dim = linalg::numerical_rank(a);
    let p = linalg::complement_projector(a);
    let lhs: Vec<f64> = states.iter().map(|at| (&p * *at).norm_squared()).collect();
    let tail: Vec<f64> = states
        .iter()
        .map(|at| singular_tail(at, w_dim.min(at.nrows().min(at.ncols()))))
        .collect::<Result<_>>()?;
    let c = lhs[0];
    let t0 = traj.times[0];
    let bound: Vec<f64> = traj
        .times
        .iter()
        .zip(&traj.running_k)
        .map(|(&t, &k)| c * (-(t - t0) / k).exp())
        .collect();
    let satisfied = lhs.iter().zip(&bound).map(|(l, b)| *l <= b * (1.0 + tol)).collect();
    let tail_below_lhs = tail
        .iter()
        .zip(&lhs)
        .map(|(t, l)| *t <= l * (1.0 + 1e-9) + 1e-15)
        .collect();
    Ok(DecayBoundReport {
        times: traj.times.clone(),
        lhs,
        tail,
        bound,
        running_k: traj.running_k.clone(),
        satisfied,
        tail_below_lhs,
        w_dim,
        c,
        tol,
    })
}

/// `‖Ã^{(i)}(t)‖² ≤ (1 + tol) e^{-t/K(t)} ‖Ã^{(i)}(0)‖²` for decoder row `i`,
/// per snapshot. Meaningful when row `i` of `A` is zero.
pub fn row_decay_check(traj: &Trajectory, row: usize, tol: f64) -> Result<Vec<bool>> {
    let states = linear_states(traj)?;
    if row >= states[0].nrows() {
        return Err(Error::Dimension(format!("row {row} out of range")));
    }
    let r0 = states[0].row(row).norm_squared();
    let t0 = traj.times[0];
    Ok(states
        .iter()
        .zip(traj.times.iter().zip(&traj.running_k))
        .map(|(at, (&t, &k))| at.row(row).norm_squared() <= (1.0 + tol) * (-(t - t0) / k).exp() * r0)
        .collect())
}

/// Number of encoder variances below `threshold`.
pub fn count_zero_encoder_vars(d_tilde: &[f64], threshold: f64) -> Result<usize> {
    if !(threshold > 0.0) {
        return Err(Error::Domain(format!("threshold must be positive, got {threshold}")));
    }
    Ok(d_tilde.iter().filter(|&&v| v < threshold).count())
}

/// Default cutoff for calling an encoder variance zero.
pub const ZERO_VARIANCE_THRESHOLD: f64 = 0.1;

/// Rows whose norm is at least `rel_threshold` times the largest row norm.
pub fn count_nonzero_decoder_rows(a_tilde: &DMatrix<f64>, rel_threshold: f64) -> Result<usize> {
    if !(rel_threshold > 0.0 && rel_threshold < 1.0) {
        return Err(Error::Domain(format!("relative threshold must lie in (0, 1), got {rel_threshold}")));
    }
    let norms = linalg::row_norms(a_tilde);
    let max = norms.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(0);
    }
    Ok(norms.iter().filter(|&&n| n >= rel_threshold * max).count())
}

/// Default relative cutoff for nonzero decoder rows.
pub const NONZERO_ROW_THRESHOLD: f64 = 1e-2;

/// `‖λ̂ − λ‖ / ‖λ‖` after sorting both descending and zero-padding to a
/// common length.
pub fn spectrum_error(lambda: &[f64], lambda_hat: &[f64]) -> f64 {
    let sorted = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    };
    let (mut l, mut h) = (sorted(lambda), sorted(lambda_hat));
    let n = l.len().max(h.len());
    l.resize(n, 0.0);
    h.resize(n, 0.0);
    let num: f64 = l.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = l.iter().map(|a| a * a).sum::<f64>().sqrt();
    num / den
}

/// Spectrum error between `AAᵀ` and the second moment `X̂ᵀX̂ / n` of the
/// generated rows.
pub fn eigenvalue_error(a: &DMatrix<f64>, generated: &DMatrix<f64>) -> Result<f64> {
    let d = a.nrows();
    if generated.ncols() != d {
        return Err(Error::Dimension(format!("samples have {} columns, expected {d}", generated.ncols())));
    }
    if generated.nrows() < d {
        return Err(Error::Precondition(format!("need at least d = {d} samples, got {}", generated.nrows())));
    }
    let lambda = linalg::symmetric_eigenvalues(&(a * a.transpose()));
    let cov = generated.transpose() * generated / generated.nrows() as f64;
    let lambda_hat = linalg::symmetric_eigenvalues(&cov);
    Ok(spectrum_error(&lambda, &lambda_hat))
}

fn check_width(generated: &DMatrix<f64>, need: usize) -> Result<()> {
    if generated.ncols() < need {
        return Err(Error::Dimension(format!("samples need at least {need} columns, got {}", generated.ncols())));
    }
    if generated.nrows() == 0 {
        return Err(Error::Dimension("no samples".into()));
    }
    Ok(())
}

/// Mean of `(‖x̃_{1..r*+1}‖ − 1)²`.
pub fn manifold_error_sphere(generated: &DMatrix<f64>, r_star: usize) -> Result<f64> {
    check_width(generated, r_star + 1)?;
    let n = generated.nrows() as f64;
    Ok(generated
        .row_iter()
        .map(|row| (row.columns(0, r_star + 1).norm() - 1.0).powi(2))
        .sum::<f64>()
        / n)
}

/// Mean of `(σ(⟨a*, x̃_{1..r*}⟩) − x̃_{r*+1})²`.
pub fn manifold_error_sigmoid(generated: &DMatrix<f64>, a_star: &DVector<f64>, r_star: usize) -> Result<f64> {
    check_width(generated, r_star + 1)?;
    if a_star.len() != r_star {
        return Err(Error::Dimension(format!("direction has length {}, expected {r_star}", a_star.len())));
    }
    let n = generated.nrows() as f64;
    Ok(generated
        .row_iter()
        .map(|row| {
            let s: f64 = (0..r_star).map(|j| row[j] * a_star[j]).sum();
            (sigmoid(s) - row[r_star]).powi(2)
        })
        .sum::<f64>()
        / n)
}

/// Mean squared norm of coordinates `r* + 2 ..= d` (1-based). Both nonlinear
/// datasets are padded from that index on.
pub fn padding_error(generated: &DMatrix<f64>, r_star: usize) -> Result<f64> {
    check_width(generated, r_star + 1)?;
    let start = r_star + 1;
    let width = generated.ncols() - start;
    if width == 0 {
        return Ok(0.0);
    }
    Ok(generated.columns(start, width).norm_squared() / generated.nrows() as f64)
}

/// Residuals of the rotation identities for one orthogonal `U`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationResiduals {
    pub loss_l: f64,
    pub loss_l1: f64,
    /// Largest componentwise mismatch of `U ∇_Ã`, `∇_B̃ Uᵀ`, and the
    /// variance gradients.
    pub grad_l: f64,
    pub grad_l1: f64,
    /// One gradient step on `L` then rotating, against rotating then stepping.
    pub gd_step: f64,
}

impl RotationResiduals {
    pub fn max_grad(&self) -> f64 {
        self.grad_l.max(self.grad_l1)
    }
}

fn rotate(u: &DMatrix<f64>, p: &LinearVaeParams) -> LinearVaeParams {
    LinearVaeParams {
        a_tilde: u * &p.a_tilde,
        b_tilde: &p.b_tilde * u.transpose(),
        d_tilde: p.d_tilde.clone(),
        eps: p.eps,
    }
}

/// Step size of the one-step equivariance check.
pub const ROTATION_CHECK_STEP: f64 = 1e-3;

/// Rotation identities with a Haar-random `U` drawn from `seed`.
pub fn rotation_invariance_check(a: &DMatrix<f64>, p: &LinearVaeParams, seed: u64) -> Result<RotationResiduals> {
    let u = linalg::haar_orthogonal(a.nrows(), seed);
    rotation_invariance_with(a, p, &u)
}

pub fn rotation_invariance_with(a: &DMatrix<f64>, p: &LinearVaeParams, u: &DMatrix<f64>) -> Result<RotationResiduals> {
    let d = a.nrows();
    if u.shape() != (d, d) {
        return Err(Error::Dimension(format!("rotation must be {d}×{d}")));
    }
    let ua = u * a;
    let q = rotate(u, p);

    let loss_l = (linear_vae::loss_l(a, p)? - linear_vae::loss_l(&ua, &q)?).abs();
    let loss_l1 = (linear_vae::loss_l1(a, &p.a_tilde, &p.b_tilde, p.eps)?
        - linear_vae::loss_l1(&ua, &q.a_tilde, &q.b_tilde, q.eps)?)
    .abs();

    let g = linear_vae::grad_l(a, p)?;
    let gu = linear_vae::grad_l(&ua, &q)?;
    let grad_l = [
        (u * &g.a_tilde - &gu.a_tilde).amax(),
        (&g.b_tilde * u.transpose() - &gu.b_tilde).amax(),
        (&g.d_tilde - &gu.d_tilde).amax(),
        (g.eps - gu.eps).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);

    let h = linear_vae::grad_l1(a, &p.a_tilde, &p.b_tilde, p.eps)?;
    let hu = linear_vae::grad_l1(&ua, &q.a_tilde, &q.b_tilde, q.eps)?;
    let grad_l1 = [
        (u * &h.a_tilde - &hu.a_tilde).amax(),
        (&h.b_tilde * u.transpose() - &hu.b_tilde).amax(),
        (h.eps - hu.eps).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);

    let eta = ROTATION_CHECK_STEP;
    let step = |p: &LinearVaeParams, g: &linear_vae::LinearGrad| {
        let lg = g.to_log(p);
        LinearVaeParams {
            a_tilde: &p.a_tilde - &g.a_tilde * eta,
            b_tilde: &p.b_tilde - &g.b_tilde * eta,
            d_tilde: p.d_tilde.zip_map(&lg.d_tilde, |d, gd| (d.ln() - eta * gd).exp()),
            eps: (p.eps.ln() - eta * lg.eps).exp(),
        }
    };
    let stepped = rotate(u, &step(p, &g));
    let stepped_u = step(&q, &gu);
    let gd_step = [
        (&stepped.a_tilde - &stepped_u.a_tilde).amax(),
        (&stepped.b_tilde - &stepped_u.b_tilde).amax(),
        (&stepped.d_tilde - &stepped_u.d_tilde).amax(),
        (stepped.eps - stepped_u.eps).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);

    Ok(RotationResiduals {
        loss_l,
        loss_l1,
        grad_l,
        grad_l1,
        gd_step,
    })
}

/// `⟨Ã^{(i)}, ∇_{Ã^{(i)}}⟩` and its lower bound, for `L` and `L1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCheck {
    pub l_lhs: f64,
    pub l_rhs: f64,
    pub l1_lhs: f64,
    pub l1_rhs: f64,
}

impl CorrelationCheck {
    /// Smallest of `lhs − rhs` over both losses.
    pub fn slack(&self) -> f64 {
        (self.l_lhs - self.l_rhs).min(self.l1_lhs - self.l1_rhs)
    }
}

/// Requires row `row` of `A` to be exactly zero.
pub fn gradient_correlation_check(a: &DMatrix<f64>, p: &LinearVaeParams, row: usize) -> Result<CorrelationCheck> {
    if row >= a.nrows() {
        return Err(Error::Dimension(format!("row {row} out of range")));
    }
    if a.row(row).iter().any(|&v| v != 0.0) {
        return Err(Error::Precondition(format!("row {row} of A is not zero")));
    }
    let e2 = p.eps * p.eps;
    let c = linalg::column_sq_norms(&p.a_tilde);
    let ai = p.a_tilde.row(row);

    let g = linear_vae::grad_l(a, p)?;
    let l_lhs = ai.dot(&g.a_tilde.row(row));
    let l_rhs: f64 = (0..p.r()).map(|j| p.d_tilde[j] * ai[j] * ai[j] / e2).sum();

    let h = linear_vae::grad_l1(a, &p.a_tilde, &p.b_tilde, p.eps)?;
    let l1_lhs = ai.dot(&h.a_tilde.row(row));
    let l1_rhs: f64 = (0..p.r()).map(|j| ai[j] * ai[j] / (c[j] + e2)).sum();

    Ok(CorrelationCheck {
        l_lhs,
        l_rhs,
        l1_lhs,
        l1_rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn tail_examples() {
        assert_eq!(singular_tail(&DMatrix::identity(4, 4), 4).unwrap(), 0.0);
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        assert!((singular_tail(&m, 1).unwrap() - 5.0).abs() < 1e-12);
        assert!(singular_tail(&m, 4).is_err());
    }

    #[test]
    fn tail_matches_frobenius_identity() {
        let mut g = rng::seeded(1);
        for _ in 0..20 {
            let m = rng::normal_matrix(&mut g, 6, 4);
            let sv = linalg::singular_values(&m);
            for k in 0..=4 {
                let head: f64 = sv[..k].iter().map(|s| s * s).sum();
                assert!((singular_tail(&m, k).unwrap() - (m.norm_squared() - head)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_counts() {
        assert_eq!(count_zero_encoder_vars(&[0.01, 0.5, 0.09], 0.1).unwrap(), 2);
        assert_eq!(count_zero_encoder_vars(&[0.5, 0.7], 0.1).unwrap(), 0);
        assert!(count_zero_encoder_vars(&[0.5], 0.0).is_err());
    }

    #[test]
    fn nonzero_rows() {
        let m = DMatrix::<f64>::identity(7, 3);
        assert_eq!(count_nonzero_decoder_rows(&m, 1e-2).unwrap(), 3);
        assert_eq!(count_nonzero_decoder_rows(&DMatrix::zeros(4, 2), 1e-2).unwrap(), 0);
        assert!(count_nonzero_decoder_rows(&m, 1.0).is_err());
    }

    #[test]
    fn worked_spectrum_pair() {
        let l = [0.001, 0.156, 1.54, 5.06, 9.55, 16.4];
        let h = [0.035, 0.166, 1.49, 4.24, 5.97, 7.85];
        // computed independently in closed form: sqrt(Σ(h-l)²) / sqrt(Σl²)
        let num: f64 = [0.034f64, 0.010, -0.05, -0.82, -3.58, -8.55].iter().map(|v| v * v).sum::<f64>().sqrt();
        let den: f64 = l.iter().map(|v| v * v).sum::<f64>().sqrt();
        let e = spectrum_error(&l, &h);
        assert!((e - num / den).abs() < 1e-12);
        assert!((e - 0.4723).abs() < 1e-4);
        // padding with zero eigenvalues changes nothing
        assert!((spectrum_error(&[l.as_slice(), &[0.0; 6]].concat(), &h) - e).abs() < 1e-15);
    }

    #[test]
    fn zero_generator_has_unit_error() {
        let a = rng::normal_matrix(&mut rng::seeded(2), 5, 3);
        assert!((eigenvalue_error(&a, &DMatrix::zeros(10, 5)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn manifold_errors_of_exact_and_zero_rows() {
        let mut x = DMatrix::zeros(3, 5);
        x[(0, 0)] = 1.0;
        x[(1, 1)] = -1.0;
        x[(2, 0)] = 0.6;
        x[(2, 2)] = 0.8;
        assert!(manifold_error_sphere(&x, 2).unwrap() < 1e-15);
        assert_eq!(manifold_error_sphere(&DMatrix::zeros(4, 5), 2).unwrap(), 1.0);
        let mut y = DMatrix::zeros(4, 6);
        y.column_mut(3).fill(0.5);
        assert_eq!(manifold_error_sigmoid(&y, &DVector::zeros(3), 3).unwrap(), 0.0);
        assert_eq!(padding_error(&y, 3).unwrap(), 0.0);
    }

    #[test]
    fn correlation_precondition() {
        let a = DMatrix::from_element(3, 2, 1.0);
        let p = LinearVaeParams::new(DMatrix::zeros(3, 2), DMatrix::zeros(2, 3), DVector::from_element(2, 1.0), 1.0).unwrap();
        assert!(matches!(gradient_correlation_check(&a, &p, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn identity_rotation_has_zero_residuals() {
        let mut g = rng::seeded(3);
        let a = rng::normal_matrix(&mut g, 4, 2);
        let p = LinearVaeParams::new(
            rng::normal_matrix(&mut g, 4, 3),
            rng::normal_matrix(&mut g, 3, 4),
            DVector::from_element(3, 0.5),
            0.8,
        )
        .unwrap();
        let r = rotation_invariance_with(&a, &p, &DMatrix::identity(4, 4)).unwrap();
        assert_eq!(r.loss_l, 0.0);
        assert_eq!(r.loss_l1, 0.0);
        assert_eq!(r.max_grad(), 0.0);
        assert_eq!(r.gd_step, 0.0);
    }
}
