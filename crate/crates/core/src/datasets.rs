//! Ground-truth data distributions: a linear map of a Gaussian, a zero-padded
//! unit sphere, and a zero-padded sigmoid graph.
//!
//! All generators are pure functions of their inputs and seed. Sample matrices
//! are `n × d` with one sample per row.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

/// Logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Linear,
    Sphere,
    Sigmoid,
}

impl DatasetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::Linear => "linear",
            DatasetKind::Sphere => "sphere",
            DatasetKind::Sigmoid => "sigmoid",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(DatasetKind::Linear),
            "sphere" => Ok(DatasetKind::Sphere),
            "sigmoid" => Ok(DatasetKind::Sigmoid),
            other => Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

/// `x = A z` with `z ~ N(0, I_{r*})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGroundTruth {
    pub a: DMatrix<f64>,
    pub r_star: usize,
    pub d: usize,
}

impl LinearGroundTruth {
    /// Wrap an arbitrary `d × r*` matrix. No rank requirement.
    pub fn from_matrix(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(Error::Dimension("ground-truth matrix must be non-empty".into()));
        }
        Ok(Self {
            r_star: a.ncols(),
            d: a.nrows(),
            a,
        })
    }
}

/// Uniform samples on `S^{r*}` placed in the first `r* + 1` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SphereGroundTruth {
    pub r_star: usize,
    pub d: usize,
}

impl SphereGroundTruth {
    pub fn new(r_star: usize, d: usize) -> Result<Self> {
        if r_star == 0 || d <= r_star + 1 {
            return Err(Error::Dimension(format!(
                "sphere needs 1 <= r* and d > r* + 1 (got r* = {r_star}, d = {d})"
            )));
        }
        Ok(Self { r_star, d })
    }
}

/// `x = (z, σ(⟨a*, z⟩), 0, …, 0)` with `z ~ N(0, I_{r*})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmoidGroundTruth {
    pub a_star: DVector<f64>,
    pub r_star: usize,
    pub d: usize,
}

impl SigmoidGroundTruth {
    /// Draw `a* ~ N(0, I_{r*})`.
    pub fn new(r_star: usize, d: usize, seed: u64) -> Result<Self> {
        Self::check(r_star, d)?;
        let a_star = rng::normal_vector(&mut rng::seeded(seed), r_star);
        Ok(Self { a_star, r_star, d })
    }

    /// Use a caller-supplied direction, e.g. all ones.
    pub fn with_direction(a_star: DVector<f64>, d: usize) -> Result<Self> {
        let r_star = a_star.len();
        Self::check(r_star, d)?;
        Ok(Self { a_star, r_star, d })
    }

    fn check(r_star: usize, d: usize) -> Result<()> {
        if r_star == 0 || d <= r_star + 1 {
            return Err(Error::Dimension(format!(
                "sigmoid data needs 1 <= r* and d > r* + 1 (got r* = {r_star}, d = {d})"
            )));
        }
        Ok(())
    }

    /// Value the data puts in coordinate `r* + 1` for a given first block.
    pub fn link(&self, head: &[f64]) -> f64 {
        let s: f64 = head.iter().zip(self.a_star.iter()).map(|(x, a)| x * a).sum();
        sigmoid(s)
    }
}

/// Padded Gaussian construction: top `r* × r*` block iid N(0, 1), the rest zero.
/// Redraws until the block has full numerical rank.
pub fn make_linear_ground_truth(r_star: usize, d: usize, seed: u64) -> Result<LinearGroundTruth> {
    if r_star == 0 || r_star > d {
        return Err(Error::Dimension(format!(
            "linear ground truth needs 1 <= r* <= d (got r* = {r_star}, d = {d})"
        )));
    }
    let mut rng = rng::seeded(seed);
    loop {
        let block = rng::normal_matrix(&mut rng, r_star, r_star);
        if linalg::numerical_rank(&block) < r_star {
            continue;
        }
        let mut a = DMatrix::zeros(d, r_star);
        a.view_mut((0, 0), (r_star, r_star)).copy_from(&block);
        return Ok(LinearGroundTruth { a, r_star, d });
    }
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Dimension("sample count must be at least 1".into()));
    }
    Ok(())
}

pub fn sample_linear(gt: &LinearGroundTruth, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    check_n(n)?;
    let z = rng::normal_matrix(&mut rng::seeded(seed), n, gt.r_star);
    Ok(z * gt.a.transpose())
}

pub fn sample_sphere(gt: &SphereGroundTruth, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    check_n(n)?;
    let k = gt.r_star + 1;
    let mut rng = rng::seeded(seed);
    let mut x = DMatrix::zeros(n, gt.d);
    let mut buf = vec![0.0; k];
    for i in 0..n {
        let norm = loop {
            for v in buf.iter_mut() {
                *v = rng::normal(&mut rng);
            }
            let norm = buf.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                break norm;
            }
        };
        for (j, v) in buf.iter().enumerate() {
            x[(i, j)] = v / norm;
        }
    }
    Ok(x)
}

pub fn sample_sigmoid(gt: &SigmoidGroundTruth, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    check_n(n)?;
    let r = gt.r_star;
    let z = rng::normal_matrix(&mut rng::seeded(seed), n, r);
    let mut x = DMatrix::zeros(n, gt.d);
    x.view_mut((0, 0), (n, r)).copy_from(&z);
    let link = &z * &gt.a_star;
    for i in 0..n {
        x[(i, r)] = sigmoid(link[i]);
    }
    Ok(x)
}

/// Any of the three generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GroundTruth {
    Linear(LinearGroundTruth),
    Sphere(SphereGroundTruth),
    Sigmoid(SigmoidGroundTruth),
}

impl GroundTruth {
    /// Build the generator a config names. `seed` only matters for the linear
    /// matrix and the sigmoid direction.
    pub fn build(kind: DatasetKind, r_star: usize, d: usize, seed: u64) -> Result<Self> {
        Ok(match kind {
            DatasetKind::Linear => GroundTruth::Linear(make_linear_ground_truth(r_star, d, seed)?),
            DatasetKind::Sphere => GroundTruth::Sphere(SphereGroundTruth::new(r_star, d)?),
            DatasetKind::Sigmoid => GroundTruth::Sigmoid(SigmoidGroundTruth::new(r_star, d, seed)?),
        })
    }

    pub fn kind(&self) -> DatasetKind {
        match self {
            GroundTruth::Linear(_) => DatasetKind::Linear,
            GroundTruth::Sphere(_) => DatasetKind::Sphere,
            GroundTruth::Sigmoid(_) => DatasetKind::Sigmoid,
        }
    }

    pub fn r_star(&self) -> usize {
        match self {
            GroundTruth::Linear(g) => g.r_star,
            GroundTruth::Sphere(g) => g.r_star,
            GroundTruth::Sigmoid(g) => g.r_star,
        }
    }

    pub fn d(&self) -> usize {
        match self {
            GroundTruth::Linear(g) => g.d,
            GroundTruth::Sphere(g) => g.d,
            GroundTruth::Sigmoid(g) => g.d,
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<DMatrix<f64>> {
        match self {
            GroundTruth::Linear(g) => sample_linear(g, n, seed),
            GroundTruth::Sphere(g) => sample_sphere(g, n, seed),
            GroundTruth::Sigmoid(g) => sample_sigmoid(g, n, seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_one_by_one() {
        let gt = make_linear_ground_truth(1, 1, 5).unwrap();
        assert_eq!(gt.a.shape(), (1, 1));
        assert_ne!(gt.a[(0, 0)], 0.0);
    }

    #[test]
    fn linear_padding_rows_zero() {
        let gt = make_linear_ground_truth(3, 12, 1).unwrap();
        assert_eq!(gt.a.shape(), (12, 3));
        for i in 3..12 {
            assert!(gt.a.row(i).iter().all(|&v| v == 0.0));
        }
        assert_eq!(linalg::numerical_rank(&gt.a), 3);
    }

    #[test]
    fn linear_is_deterministic() {
        let a = make_linear_ground_truth(4, 9, 77).unwrap();
        let b = make_linear_ground_truth(4, 9, 77).unwrap();
        assert_eq!(a, b);
        let xa = sample_linear(&a, 50, 3).unwrap();
        let xb = sample_linear(&b, 50, 3).unwrap();
        assert_eq!(xa, xb);
    }

    #[test]
    fn linear_rejects_bad_dims() {
        assert!(matches!(make_linear_ground_truth(0, 3, 0), Err(Error::Dimension(_))));
        assert!(matches!(make_linear_ground_truth(4, 3, 0), Err(Error::Dimension(_))));
        let gt = make_linear_ground_truth(1, 2, 0).unwrap();
        assert!(sample_linear(&gt, 0, 0).is_err());
    }

    #[test]
    fn zero_map_gives_zero_samples() {
        let gt = LinearGroundTruth::from_matrix(DMatrix::zeros(4, 2)).unwrap();
        let x = sample_linear(&gt, 20, 1).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_samples_live_in_padded_block() {
        let gt = make_linear_ground_truth(2, 6, 8).unwrap();
        let x = sample_linear(&gt, 100, 9).unwrap();
        for j in 2..6 {
            assert!(x.column(j).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn sphere_rows_have_unit_head() {
        let gt = SphereGroundTruth::new(2, 16).unwrap();
        let x = sample_sphere(&gt, 500, 4).unwrap();
        for row in x.row_iter() {
            let head: f64 = row.iter().take(3).map(|v| v * v).sum::<f64>().sqrt();
            assert!((head - 1.0).abs() < 1e-12);
            assert_eq!(row.iter().skip(3).filter(|&&v| v == 0.0).count(), 13);
        }
    }

    #[test]
    fn sphere_rejects_small_ambient() {
        assert!(SphereGroundTruth::new(2, 3).is_err());
        assert!(SphereGroundTruth::new(2, 4).is_ok());
    }

    #[test]
    fn sigmoid_zero_direction_is_half() {
        let gt = SigmoidGroundTruth::with_direction(DVector::zeros(3), 6).unwrap();
        let x = sample_sigmoid(&gt, 40, 2).unwrap();
        assert!(x.column(3).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn sigmoid_padding_count() {
        let gt = SigmoidGroundTruth::new(7, 28, 3).unwrap();
        let x = sample_sigmoid(&gt, 10, 2).unwrap();
        for row in x.row_iter() {
            assert!(row.iter().skip(8).all(|&v| v == 0.0));
            assert_eq!(row.len() - 8, 20);
            let head: Vec<f64> = row.iter().take(7).copied().collect();
            assert!((row[7] - gt.link(&head)).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_is_stable_in_tails() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-300);
    }
}
