//! Closed-form population loss of the linear VAE.
//!
//! Data `x = A z` with `z ~ N(0, I)`, decoder `N(Ã z, ε² I_d)`, encoder
//! `N(B̃ x, diag(D))`. Two losses are exposed: the full loss `L` over
//! `(Ã, B̃, D, ε)` and `L1`, which has `D` eliminated at its optimum. Both come
//! with analytic gradients, in raw coordinates and in log coordinates for the
//! variances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Trainable parameters. `a_tilde` is `d × r`, `b_tilde` is `r × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearVaeParams {
    pub a_tilde: DMatrix<f64>,
    pub b_tilde: DMatrix<f64>,
    pub d_tilde: DVector<f64>,
    pub eps: f64,
}

impl LinearVaeParams {
    pub fn new(
        a_tilde: DMatrix<f64>,
        b_tilde: DMatrix<f64>,
        d_tilde: DVector<f64>,
        eps: f64,
    ) -> Result<Self> {
        let p = Self {
            a_tilde,
            b_tilde,
            d_tilde,
            eps,
        };
        p.check_shapes()?;
        check_eps(p.eps)?;
        check_d(&p.d_tilde)?;
        Ok(p)
    }

    pub fn d(&self) -> usize {
        self.a_tilde.nrows()
    }

    pub fn r(&self) -> usize {
        self.a_tilde.ncols()
    }

    fn check_shapes(&self) -> Result<()> {
        let (d, r) = self.a_tilde.shape();
        if self.b_tilde.shape() != (r, d) {
            return Err(Error::Dimension(format!(
                "encoder must be {r}×{d}, got {:?}",
                self.b_tilde.shape()
            )));
        }
        if self.d_tilde.len() != r {
            return Err(Error::Dimension(format!(
                "encoder variance must have length {r}, got {}",
                self.d_tilde.len()
            )));
        }
        Ok(())
    }
}

/// Gradient of `L`. In log coordinates `d_tilde` and `eps` hold the
/// derivatives with respect to `log D` and `log ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub a_tilde: DMatrix<f64>,
    pub b_tilde: DMatrix<f64>,
    pub d_tilde: DVector<f64>,
    pub eps: f64,
}

impl LinearGrad {
    /// Chain rule into log coordinates.
    pub fn to_log(&self, p: &LinearVaeParams) -> LinearGrad {
        LinearGrad {
            a_tilde: self.a_tilde.clone(),
            b_tilde: self.b_tilde.clone(),
            d_tilde: self.d_tilde.component_mul(&p.d_tilde),
            eps: self.eps * p.eps,
        }
    }
}

/// Gradient of `L1`.
#[derive(Debug, Clone, PartialEq)]
pub struct L1Grad {
    pub a_tilde: DMatrix<f64>,
    pub b_tilde: DMatrix<f64>,
    pub eps: f64,
}

impl L1Grad {
    pub fn to_log(&self, eps: f64) -> L1Grad {
        L1Grad {
            a_tilde: self.a_tilde.clone(),
            b_tilde: self.b_tilde.clone(),
            eps: self.eps * eps,
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Domain(format!("decoder std must be positive, got {eps}")));
    }
    Ok(())
}

fn check_d(d: &DVector<f64>) -> Result<()> {
    if let Some(v) = d.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("encoder variances must be positive, got {v}")));
    }
    Ok(())
}

fn check_pair(a: &DMatrix<f64>, a_tilde: &DMatrix<f64>, b_tilde: &DMatrix<f64>) -> Result<()> {
    let (d, r) = a_tilde.shape();
    if a.nrows() != d {
        return Err(Error::Dimension(format!(
            "data map has {} rows but decoder has {d}",
            a.nrows()
        )));
    }
    if b_tilde.shape() != (r, d) {
        return Err(Error::Dimension(format!(
            "encoder must be {r}×{d}, got {:?}",
            b_tilde.shape()
        )));
    }
    Ok(())
}

/// `M = B̃A` and `R = A − ÃM`.
fn code_and_residual(
    a: &DMatrix<f64>,
    a_tilde: &DMatrix<f64>,
    b_tilde: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = b_tilde * a;
    let r = a - a_tilde * &m;
    (m, r)
}

/// `‖A − ÃB̃A‖_F²`.
pub fn reconstruction_residual(a: &DMatrix<f64>, a_tilde: &DMatrix<f64>, b_tilde: &DMatrix<f64>) -> f64 {
    let (_, r) = code_and_residual(a, a_tilde, b_tilde);
    r.norm_squared()
}

pub fn loss_l(a: &DMatrix<f64>, p: &LinearVaeParams) -> Result<f64> {
    p.check_shapes()?;
    check_pair(a, &p.a_tilde, &p.b_tilde)?;
    check_eps(p.eps)?;
    check_d(&p.d_tilde)?;
    let d = p.d() as f64;
    let e2 = p.eps * p.eps;
    let (m, r) = code_and_residual(a, &p.a_tilde, &p.b_tilde);
    let c = linalg::column_sq_norms(&p.a_tilde);
    let kl: f64 = p
        .d_tilde
        .iter()
        .zip(c.iter())
        .map(|(&di, &ci)| di * ci / e2 + di - di.ln())
        .sum();
    Ok(r.norm_squared() / (2.0 * e2) + 0.5 * m.norm_squared() + d * p.eps.ln() + 0.5 * kl)
}

pub fn loss_l1(a: &DMatrix<f64>, a_tilde: &DMatrix<f64>, b_tilde: &DMatrix<f64>, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    loss_l1_log(a, a_tilde, b_tilde, eps.ln())
}

/// `ln(c + ε²)` without forming `ε²`, which underflows along long schedules.
fn ln_c_plus_eps2(c: f64, log_eps: f64) -> f64 {
    let le2 = 2.0 * log_eps;
    if c > 0.0 {
        let lc = c.ln();
        let (hi, lo) = if lc >= le2 { (lc, le2) } else { (le2, lc) };
        hi + (lo - hi).exp().ln_1p()
    } else {
        le2
    }
}

/// `L1` as a function of `log ε`. Valid for any finite `log ε`; an exactly
/// zero residual contributes nothing at any scale.
pub fn loss_l1_log(
    a: &DMatrix<f64>,
    a_tilde: &DMatrix<f64>,
    b_tilde: &DMatrix<f64>,
    log_eps: f64,
) -> Result<f64> {
    check_pair(a, a_tilde, b_tilde)?;
    if !log_eps.is_finite() {
        return Err(Error::Domain(format!("log decoder std must be finite, got {log_eps}")));
    }
    let (d, r) = a_tilde.shape();
    let (m, res) = code_and_residual(a, a_tilde, b_tilde);
    let rec = res.norm_squared();
    let rec_term = if rec == 0.0 { 0.0 } else { 0.5 * (rec.ln() - 2.0 * log_eps).exp() };
    let c = linalg::column_sq_norms(a_tilde);
    let logs: f64 = c.iter().map(|&ci| 0.5 * (1.0 + ln_c_plus_eps2(ci, log_eps))).sum();
    Ok(rec_term + 0.5 * m.norm_squared() + (d as f64 - r as f64) * log_eps + logs)
}

/// `L` in log coordinates for `D` and `ε`, robust to extreme scales.
pub fn loss_l_log(
    a: &DMatrix<f64>,
    a_tilde: &DMatrix<f64>,
    b_tilde: &DMatrix<f64>,
    log_d: &DVector<f64>,
    log_eps: f64,
) -> Result<f64> {
    check_pair(a, a_tilde, b_tilde)?;
    if log_d.len() != a_tilde.ncols() {
        return Err(Error::Dimension("encoder variance length mismatch".into()));
    }
    if !log_eps.is_finite() || log_d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("log variances must be finite".into()));
    }
    let d = a_tilde.nrows() as f64;
    let (m, res) = code_and_residual(a, a_tilde, b_tilde);
    let rec = res.norm_squared();
    let rec_term = if rec == 0.0 { 0.0 } else { 0.5 * (rec.ln() - 2.0 * log_eps).exp() };
    let c = linalg::column_sq_norms(a_tilde);
    let kl: f64 = log_d
        .iter()
        .zip(c.iter())
        .map(|(&ld, &ci)| {
            let dc = if ci > 0.0 { (ld + ci.ln() - 2.0 * log_eps).exp() } else { 0.0 };
            dc + ld.exp() - ld
        })
        .sum();
    Ok(rec_term + 0.5 * m.norm_squared() + d * log_eps + 0.5 * kl)
}

/// Minimizer of `L` over `D` for fixed decoder and `ε`.
pub fn optimal_d(a_tilde: &DMatrix<f64>, eps: f64) -> Result<DVector<f64>> {
    check_eps(eps)?;
    let e2 = eps * eps;
    Ok(linalg::column_sq_norms(a_tilde).map(|c| e2 / (c + e2)))
}

/// `log` of [`optimal_d`], computed without underflow.
pub fn optimal_log_d(a_tilde: &DMatrix<f64>, log_eps: f64) -> DVector<f64> {
    linalg::column_sq_norms(a_tilde).map(|c| 2.0 * log_eps - ln_c_plus_eps2(c, log_eps))
}

/// Minimizer of `L` over `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalEps {
    pub value: f64,
    /// True when the expected reconstruction error is exactly zero; the
    /// infimum then sits at `ε = 0` and `value` is 0.
    pub degenerate: bool,
}

pub fn optimal_eps(a: &DMatrix<f64>, p: &LinearVaeParams) -> Result<OptimalEps> {
    p.check_shapes()?;
    check_pair(a, &p.a_tilde, &p.b_tilde)?;
    let (_, r) = code_and_residual(a, &p.a_tilde, &p.b_tilde);
    let c = linalg::column_sq_norms(&p.a_tilde);
    let num = r.norm_squared() + p.d_tilde.dot(&c);
    if num == 0.0 {
        return Ok(OptimalEps {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(OptimalEps {
        value: (num / p.d() as f64).sqrt(),
        degenerate: false,
    })
}

pub fn grad_l(a: &DMatrix<f64>, p: &LinearVaeParams) -> Result<LinearGrad> {
    p.check_shapes()?;
    check_pair(a, &p.a_tilde, &p.b_tilde)?;
    check_eps(p.eps)?;
    check_d(&p.d_tilde)?;
    let e2 = p.eps * p.eps;
    let (m, r) = code_and_residual(a, &p.a_tilde, &p.b_tilde);
    let c = linalg::column_sq_norms(&p.a_tilde);

    let mut ga = -(&r * m.transpose()) / e2;
    for (j, mut col) in ga.column_iter_mut().enumerate() {
        col.axpy(p.d_tilde[j] / e2, &p.a_tilde.column(j), 1.0);
    }
    let gb = -(p.a_tilde.transpose() * &r * a.transpose()) / e2 + &m * a.transpose();
    let gd = DVector::from_iterator(
        p.r(),
        p.d_tilde
            .iter()
            .zip(c.iter())
            .map(|(&di, &ci)| 0.5 * ci / e2 + 0.5 - 0.5 / di),
    );
    let num = r.norm_squared() + p.d_tilde.dot(&c);
    let geps = -num / (e2 * p.eps) + p.d() as f64 / p.eps;
    Ok(LinearGrad {
        a_tilde: ga,
        b_tilde: gb,
        d_tilde: gd,
        eps: geps,
    })
}

pub fn grad_l1(a: &DMatrix<f64>, a_tilde: &DMatrix<f64>, b_tilde: &DMatrix<f64>, eps: f64) -> Result<L1Grad> {
    check_pair(a, a_tilde, b_tilde)?;
    check_eps(eps)?;
    let (d, rr) = a_tilde.shape();
    let e2 = eps * eps;
    let (m, r) = code_and_residual(a, a_tilde, b_tilde);
    let c = linalg::column_sq_norms(a_tilde);

    let mut ga = -(&r * m.transpose()) / e2;
    for (j, mut col) in ga.column_iter_mut().enumerate() {
        col.axpy(1.0 / (c[j] + e2), &a_tilde.column(j), 1.0);
    }
    let gb = -(a_tilde.transpose() * &r * a.transpose()) / e2 + &m * a.transpose();
    let geps = -r.norm_squared() / (e2 * eps)
        + (d as f64 - rr as f64) / eps
        + c.iter().map(|&ci| eps / (ci + e2)).sum::<f64>();
    Ok(L1Grad {
        a_tilde: ga,
        b_tilde: gb,
        eps: geps,
    })
}

/// A fixed decoder/encoder pair that reconstructs `A` exactly, with a
/// sequence of shrinking `ε` and matching optimal `D`. Scales are stored as
/// logarithms so schedules can run far below `f64` underflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimaSchedule {
    pub a_tilde: DMatrix<f64>,
    pub b_tilde: DMatrix<f64>,
    pub log_eps: Vec<f64>,
    pub log_d: Vec<DVector<f64>>,
    pub zero_columns: usize,
}

impl MinimaSchedule {
    pub fn len(&self) -> usize {
        self.log_eps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_eps.is_empty()
    }

    /// `ε` values; entries below the smallest positive `f64` read as 0.
    pub fn eps_sequence(&self) -> Vec<f64> {
        self.log_eps.iter().map(|l| l.exp()).collect()
    }

    pub fn d_sequences(&self) -> Vec<DVector<f64>> {
        self.log_d.iter().map(|l| l.map(f64::exp)).collect()
    }

    /// `L` along the schedule.
    pub fn losses(&self, a: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.log_eps
            .iter()
            .zip(&self.log_d)
            .map(|(&le, ld)| loss_l_log(a, &self.a_tilde, &self.b_tilde, ld, le))
            .collect()
    }

    /// Raw parameters at step `k`, if `ε` is representable there.
    pub fn params_at(&self, k: usize) -> Option<LinearVaeParams> {
        let eps = self.log_eps.get(k)?.exp();
        let d = self.log_d[k].map(f64::exp);
        LinearVaeParams::new(self.a_tilde.clone(), self.b_tilde.clone(), d, eps).ok()
    }
}

/// Default schedule exponents: `ε = 10^{-k}` for `k = 1..20`, then every 20th
/// decade down to `10^{-1000}`.
pub fn default_decades() -> Vec<f64> {
    (1..=20).chain((2..=50).map(|j| 20 * j)).map(|k| k as f64).collect()
}

/// Asymptotic global minimum with `rank(A) + extra_dims` active decoder
/// columns, using [`default_decades`].
pub fn construct_asymptotic_minimum(a: &DMatrix<f64>, r: usize, extra_dims: usize) -> Result<MinimaSchedule> {
    construct_asymptotic_minimum_with(a, r, extra_dims, &default_decades())
}

/// As [`construct_asymptotic_minimum`] with `ε = 10^{-k}` for each `k` given.
pub fn construct_asymptotic_minimum_with(
    a: &DMatrix<f64>,
    r: usize,
    extra_dims: usize,
    decades: &[f64],
) -> Result<MinimaSchedule> {
    let d = a.nrows();
    let rank = linalg::numerical_rank(a);
    let active = rank + extra_dims;
    if r < active {
        return Err(Error::Construction(format!(
            "latent dimension {r} below rank {rank} + extra {extra_dims}"
        )));
    }
    // zero columns r - active must exceed r - d
    if active >= d {
        return Err(Error::Construction(format!(
            "{active} active columns leaves too few zero columns for d = {d}, r = {r}"
        )));
    }
    if decades.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Construction("schedule exponents must increase".into()));
    }
    let q = active_basis(a, rank, active);
    let mut a_tilde = DMatrix::zeros(d, r);
    a_tilde.view_mut((0, 0), (d, active)).copy_from(&q);
    let b_tilde = a_tilde.transpose();

    let log_eps: Vec<f64> = decades.iter().map(|k| -k * std::f64::consts::LN_10).collect();
    let log_d = log_eps.iter().map(|&le| optimal_log_d(&a_tilde, le)).collect();
    Ok(MinimaSchedule {
        a_tilde,
        b_tilde,
        log_eps,
        log_d,
        zero_columns: r - active,
    })
}

/// Orthonormal `d × active` basis whose first `rank` columns span `col(A)`.
/// When `A` is supported on exactly `rank` coordinates the basis is made of
/// standard vectors, so the reconstruction is exact in floating point.
fn active_basis(a: &DMatrix<f64>, rank: usize, active: usize) -> DMatrix<f64> {
    let d = a.nrows();
    let support: Vec<usize> = (0..d).filter(|&i| a.row(i).iter().any(|&v| v != 0.0)).collect();
    let mut q = DMatrix::zeros(d, active);
    if support.len() == rank {
        let rest = (0..d).filter(|i| !support.contains(i));
        for (j, i) in support.iter().copied().chain(rest).take(active).enumerate() {
            q[(i, j)] = 1.0;
        }
        return q;
    }
    let u = linalg::column_space_basis(a);
    q.view_mut((0, 0), (d, rank)).copy_from(&u.columns(0, rank));
    let mut filled = rank;
    for i in 0..d {
        if filled == active {
            break;
        }
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        for _ in 0..2 {
            for j in 0..filled {
                let proj = q.column(j).dot(&v);
                v.axpy(-proj, &q.column(j), 1.0);
            }
        }
        let n = v.norm();
        if n > 1e-8 {
            q.set_column(filled, &(v / n));
            filled += 1;
        }
    }
    q
}

/// Outcome of checking whether a run looks like it approaches an asymptotic
/// global minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    /// Loss non-increasing over the window with `ε` shrinking. When false
    /// the remaining flags are not meaningful.
    pub loss_diverging: bool,
    pub eps_final: f64,
    pub residual_final: f64,
    pub max_d_c_final: f64,
    pub small_columns: usize,
    /// `r − d`, which may be negative.
    pub zero_column_bound: i64,
    pub eps_vanishing: bool,
    pub residual_vanishing: bool,
    pub d_c_vanishing: bool,
    pub zero_columns_exceed_bound: bool,
}

impl ConditionReport {
    pub fn all_satisfied(&self) -> bool {
        self.loss_diverging
            && self.eps_vanishing
            && self.residual_vanishing
            && self.d_c_vanishing
            && self.zero_columns_exceed_bound
    }
}

const VANISH_TOL: f64 = 1e-10;

/// Check the necessary conditions on the final third of a trajectory. Needs
/// decoder parameters recorded in the snapshots (linear objectives do this).
pub fn check_necessary_conditions(
    traj: &crate::dynamics::Trajectory,
    a: &DMatrix<f64>,
    delta: f64,
) -> Result<ConditionReport> {
    let n = traj.len();
    if n < 2 {
        return Err(Error::Precondition("need at least two snapshots".into()));
    }
    let start = (n - n.div_ceil(3)).min(n - 2);
    let window = start..n;
    let mut residual = Vec::with_capacity(n - start);
    let mut dc = Vec::with_capacity(n - start);
    let mut last_small = 0;
    let mut r = 0;
    for k in window.clone() {
        let lin = traj.snapshots[k]
            .linear
            .as_ref()
            .ok_or_else(|| Error::Precondition("snapshots carry no linear parameters".into()))?;
        r = lin.a_tilde.ncols();
        residual.push(reconstruction_residual(a, &lin.a_tilde, &lin.b_tilde));
        let c = linalg::column_sq_norms(&lin.a_tilde);
        let d_vec = &traj.snapshots[k].d_tilde;
        dc.push(c.iter().zip(d_vec).map(|(ci, di)| ci * di).fold(0.0, f64::max));
        last_small = c.iter().filter(|&&ci| ci < delta).count();
    }
    let losses = &traj.loss[window.clone()];
    let eps = &traj.eps[window];
    let non_increasing = losses.windows(2).all(|w| w[1] <= w[0]);
    let loss_diverging = non_increasing && losses[losses.len() - 1] < losses[0] && eps[eps.len() - 1] < eps[0];
    let shrinking = |s: &[f64]| s[s.len() - 1] < VANISH_TOL || s[s.len() - 1] < s[0];
    let bound = r as i64 - a.nrows() as i64;
    Ok(ConditionReport {
        loss_diverging,
        eps_final: eps[eps.len() - 1],
        residual_final: residual[residual.len() - 1],
        max_d_c_final: dc[dc.len() - 1],
        small_columns: last_small,
        zero_column_bound: bound,
        eps_vanishing: eps[eps.len() - 1] < eps[0],
        residual_vanishing: shrinking(&residual),
        d_c_vanishing: shrinking(&dc),
        zero_columns_exceed_bound: last_small as i64 > bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_instance(seed: u64, d: usize, r: usize, rs: usize) -> (DMatrix<f64>, LinearVaeParams) {
        let mut g = rng::seeded(seed);
        let a = rng::normal_matrix(&mut g, d, rs);
        let at = rng::normal_matrix(&mut g, d, r) * 0.7;
        let bt = rng::normal_matrix(&mut g, r, d) * 0.7;
        let dd = rng::normal_vector(&mut g, r).map(|v| (0.5 * v).exp());
        let eps = (0.3 * rng::normal(&mut g)).exp();
        (a, LinearVaeParams::new(at, bt, dd, eps).unwrap())
    }

    #[test]
    fn all_zero_gives_half_r() {
        for r in 1..5 {
            let p = LinearVaeParams::new(
                DMatrix::zeros(3, r),
                DMatrix::zeros(r, 3),
                DVector::from_element(r, 1.0),
                1.0,
            )
            .unwrap();
            let l = loss_l(&DMatrix::zeros(3, 2), &p).unwrap();
            assert!((l - r as f64 / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_case() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = LinearVaeParams::new(one.clone(), one.clone(), DVector::from_element(1, 1.0), 1.0).unwrap();
        assert!((loss_l(&one, &p).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonpositive_variances() {
        let (a, mut p) = random_instance(1, 3, 2, 2);
        p.eps = 0.0;
        assert!(matches!(loss_l(&a, &p), Err(Error::Domain(_))));
        p.eps = 1.0;
        p.d_tilde[0] = -1.0;
        assert!(matches!(loss_l(&a, &p), Err(Error::Domain(_))));
        assert!(matches!(loss_l1(&a, &p.a_tilde, &p.b_tilde, -1.0), Err(Error::Domain(_))));
        assert!(matches!(optimal_d(&p.a_tilde, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn optimal_d_examples() {
        let mut at = DMatrix::zeros(3, 2);
        at[(0, 1)] = 3f64.sqrt();
        let d0 = optimal_d(&at, 0.5).unwrap();
        assert_eq!(d0[0], 1.0);
        let d1 = optimal_d(&at, 1.0).unwrap();
        assert!((d1[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn l1_is_l_at_optimal_d() {
        for seed in 0..100 {
            let (a, p) = random_instance(seed, 5, 4, 3);
            let d = optimal_d(&p.a_tilde, p.eps).unwrap();
            let q = LinearVaeParams { d_tilde: d, ..p.clone() };
            let l = loss_l(&a, &q).unwrap();
            let l1 = loss_l1(&a, &p.a_tilde, &p.b_tilde, p.eps).unwrap();
            assert!((l - l1).abs() <= 1e-12 * l.abs().max(1.0), "seed {seed}: {l} vs {l1}");
        }
    }

    #[test]
    fn log_forms_agree_with_raw() {
        let (a, p) = random_instance(4, 4, 3, 2);
        let l = loss_l(&a, &p).unwrap();
        let ll = loss_l_log(&a, &p.a_tilde, &p.b_tilde, &p.d_tilde.map(f64::ln), p.eps.ln()).unwrap();
        assert!((l - ll).abs() < 1e-12 * l.abs().max(1.0));
        let od = optimal_log_d(&p.a_tilde, p.eps.ln()).map(f64::exp);
        let od2 = optimal_d(&p.a_tilde, p.eps).unwrap();
        assert!((od - od2).amax() < 1e-15);
    }

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn grad_l_matches_central_differences() {
        let h = 1e-6;
        for seed in 0..10 {
            let (a, p) = random_instance(100 + seed, 4, 3, 2);
            let g = grad_l(&a, &p).unwrap();
            for idx in 0..p.a_tilde.len() {
                let n = fd(
                    |x| {
                        let mut q = p.clone();
                        q.a_tilde[idx] = x;
                        loss_l(&a, &q).unwrap()
                    },
                    p.a_tilde[idx],
                    h,
                );
                assert!(rel(n, g.a_tilde[idx]) < 1e-5);
            }
            for idx in 0..p.b_tilde.len() {
                let n = fd(
                    |x| {
                        let mut q = p.clone();
                        q.b_tilde[idx] = x;
                        loss_l(&a, &q).unwrap()
                    },
                    p.b_tilde[idx],
                    h,
                );
                assert!(rel(n, g.b_tilde[idx]) < 1e-5);
            }
            for idx in 0..p.d_tilde.len() {
                let n = fd(
                    |x| {
                        let mut q = p.clone();
                        q.d_tilde[idx] = x;
                        loss_l(&a, &q).unwrap()
                    },
                    p.d_tilde[idx],
                    h,
                );
                assert!(rel(n, g.d_tilde[idx]) < 1e-5);
            }
            let n = fd(
                |x| {
                    let mut q = p.clone();
                    q.eps = x;
                    loss_l(&a, &q).unwrap()
                },
                p.eps,
                h,
            );
            assert!(rel(n, g.eps) < 1e-5);
        }
    }

    #[test]
    fn grad_l1_matches_central_differences() {
        let h = 1e-6;
        for seed in 0..10 {
            let (a, p) = random_instance(200 + seed, 5, 3, 2);
            let g = grad_l1(&a, &p.a_tilde, &p.b_tilde, p.eps).unwrap();
            for idx in 0..p.a_tilde.len() {
                let n = fd(
                    |x| {
                        let mut at = p.a_tilde.clone();
                        at[idx] = x;
                        loss_l1(&a, &at, &p.b_tilde, p.eps).unwrap()
                    },
                    p.a_tilde[idx],
                    h,
                );
                assert!(rel(n, g.a_tilde[idx]) < 1e-5);
            }
            for idx in 0..p.b_tilde.len() {
                let n = fd(
                    |x| {
                        let mut bt = p.b_tilde.clone();
                        bt[idx] = x;
                        loss_l1(&a, &p.a_tilde, &bt, p.eps).unwrap()
                    },
                    p.b_tilde[idx],
                    h,
                );
                assert!(rel(n, g.b_tilde[idx]) < 1e-5);
            }
            let n = fd(|x| loss_l1(&a, &p.a_tilde, &p.b_tilde, x).unwrap(), p.eps, h);
            assert!(rel(n, g.eps) < 1e-5);
        }
    }

    #[test]
    fn log_gradient_scales_by_eps() {
        let (a, p) = random_instance(7, 4, 3, 2);
        let g = grad_l1(&a, &p.a_tilde, &p.b_tilde, p.eps).unwrap();
        assert_eq!(g.to_log(p.eps).eps, g.eps * p.eps);
        let gl = grad_l(&a, &p).unwrap();
        let lg = gl.to_log(&p);
        assert_eq!(lg.eps, gl.eps * p.eps);
        assert_eq!(lg.d_tilde[1], gl.d_tilde[1] * p.d_tilde[1]);
    }

    #[test]
    fn optimal_eps_is_stationary() {
        for seed in 0..20 {
            let (a, p) = random_instance(300 + seed, 4, 3, 2);
            let e = optimal_eps(&a, &p).unwrap();
            assert!(!e.degenerate);
            let q = LinearVaeParams { eps: e.value, ..p.clone() };
            let h = 1e-6 * e.value;
            let slope = fd(
                |x| {
                    let mut s = q.clone();
                    s.eps = x;
                    loss_l(&a, &s).unwrap()
                },
                e.value,
                h,
            );
            assert!(slope.abs() < 1e-8 * (1.0 / e.value).max(1.0) * 10.0);
            assert!(grad_l(&a, &q).unwrap().eps.abs() < 1e-8);
        }
    }

    #[test]
    fn optimal_eps_of_zero_model_is_data_norm() {
        let (a, mut p) = random_instance(5, 4, 3, 2);
        p.a_tilde.fill(0.0);
        p.b_tilde.fill(0.0);
        let e = optimal_eps(&a, &p).unwrap();
        assert!((e.value - a.norm() / 2.0).abs() < 1e-14);
    }

    #[test]
    fn optimal_eps_degenerate_flag() {
        // perfect reconstruction: the optimum shrinks with D
        let a = DMatrix::<f64>::identity(3, 2);
        let at = DMatrix::<f64>::identity(3, 2);
        let bt = DMatrix::<f64>::identity(2, 3);
        let mut prev = f64::INFINITY;
        for k in 1..8 {
            let d = DVector::from_element(2, 10f64.powi(-2 * k));
            let p = LinearVaeParams::new(at.clone(), bt.clone(), d, 1.0).unwrap();
            let e = optimal_eps(&a, &p).unwrap();
            assert!(e.value < prev);
            prev = e.value;
        }
        assert!(prev < 1e-7);
        let zero = LinearVaeParams::new(DMatrix::zeros(3, 2), bt, DVector::from_element(2, 1.0), 1.0).unwrap();
        let exact = optimal_eps(&DMatrix::zeros(3, 2), &zero).unwrap();
        assert!(exact.degenerate);
        assert_eq!(exact.value, 0.0);
    }

    #[test]
    fn stationary_point_has_zero_variance_gradients() {
        // A = 0 so the residual vanishes; with r > d the alternation of the
        // two closed forms has a fixed point at positive ε.
        let mut g = rng::seeded(11);
        let a = DMatrix::zeros(2, 2);
        let at = rng::normal_matrix(&mut g, 2, 3);
        let bt = rng::normal_matrix(&mut g, 3, 2);
        let mut p = LinearVaeParams::new(at, bt, DVector::from_element(3, 1.0), 1.0).unwrap();
        // alternate the two closed forms to a joint fixed point
        for _ in 0..2000 {
            p.d_tilde = optimal_d(&p.a_tilde, p.eps).unwrap();
            p.eps = optimal_eps(&a, &p).unwrap().value;
        }
        let gr = grad_l(&a, &p).unwrap();
        assert!(p.eps > 1e-3);
        assert!(gr.d_tilde.amax() < 1e-10);
        assert!(gr.eps.abs() < 1e-9);
    }

    #[test]
    fn schedule_for_identity_block() {
        let mut a = DMatrix::zeros(6, 2);
        a[(0, 0)] = 1.0;
        a[(1, 1)] = 1.0;
        let s = construct_asymptotic_minimum(&a, 5, 1).unwrap();
        let mut expect = DMatrix::zeros(6, 5);
        for i in 0..3 {
            expect[(i, i)] = 1.0;
        }
        assert_eq!(s.a_tilde, expect);
        assert_eq!(s.b_tilde, expect.transpose());
        assert_eq!(s.zero_columns, 2);
        assert_eq!(reconstruction_residual(&a, &s.a_tilde, &s.b_tilde), 0.0);
    }

    #[test]
    fn infeasible_schedules_rejected() {
        let a = DMatrix::<f64>::identity(3, 3);
        assert!(matches!(construct_asymptotic_minimum(&a, 4, 0), Err(Error::Construction(_))));
        let a = DMatrix::<f64>::identity(5, 2);
        assert!(matches!(construct_asymptotic_minimum(&a, 2, 1), Err(Error::Construction(_))));
    }

    #[test]
    fn generic_basis_reconstructs() {
        let mut g = rng::seeded(2);
        let a = rng::normal_matrix(&mut g, 7, 3);
        let s = construct_asymptotic_minimum(&a, 6, 2).unwrap();
        assert!(reconstruction_residual(&a, &s.a_tilde, &s.b_tilde).sqrt() < 1e-10);
        assert_eq!(linalg::numerical_rank(&s.a_tilde), 5);
        let c = linalg::column_sq_norms(&s.a_tilde);
        assert_eq!(c.iter().filter(|&&v| v == 0.0).count(), 1);
    }
}
