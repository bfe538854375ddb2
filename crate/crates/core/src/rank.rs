//! Numerical rank of convolution weights and rank-guided block allocation.
//!
//! A convolution weight `(C_out, C_in / groups, K, K)` is viewed as a
//! `C_out x (K^2 * C_in / groups)` matrix. Its numerical rank is the number of
//! singular values strictly above `ratio * sigma_max` (`ratio = 0.5` by
//! default). Stages are then visited from the lowest normalized rank
//! (`rank / C_out`) upward, replacing their block with a compact one until the
//! evaluator score drops below the baseline.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::tensor::{Tensor, TensorArchive};

/// Default singular-value threshold relative to the largest one.
pub const DEFAULT_THRESHOLD_RATIO: f64 = 0.5;

/// Absolute tolerance on `sigma / sigma_max` when comparing against the ratio.
const SIGMA_TOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 80;

#[derive(Debug, Clone, PartialEq)]
pub enum RankError {
    ZeroMatrix,
    NonFinite,
    InvalidThreshold(f64),
    MissingWeight(String),
    DuplicateStage(u32),
    ShapeMismatch(String),
}

impl fmt::Display for RankError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankError::ZeroMatrix => f.write_str("numerical rank of an all-zero matrix is undefined"),
            RankError::NonFinite => f.write_str("matrix contains NaN or infinite entries"),
            RankError::InvalidThreshold(r) => write!(f, "threshold ratio {r} is outside (0, 1)"),
            RankError::MissingWeight(name) => write!(f, "weight `{name}` not found in archive"),
            RankError::DuplicateStage(id) => write!(f, "stage {id} listed more than once"),
            RankError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
        }
    }
}

impl core::error::Error for RankError {}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, RankError> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(RankError::ShapeMismatch(alloc::format!(
                "{rows}x{cols} matrix from {} values",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Reshape a weight tensor: 2-D as is, 4-D conv weights to
    /// `(C_out, C_in / groups * K * K)`.
    pub fn from_weight(t: &Tensor) -> Result<Self, RankError> {
        match *t.shape() {
            [r, c] => Self::new(r, c, t.data().to_vec()),
            [co, ci, kh, kw] => Self::new(co, ci * kh * kw, t.data().to_vec()),
            ref s => Err(RankError::ShapeMismatch(alloc::format!(
                "expected a 2-D matrix or 4-D conv weight, got {s:?}"
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, RankError> {
        if self.cols != rhs.rows {
            return Err(RankError::ShapeMismatch(alloc::format!(
                "{}x{} * {}x{}",
                self.rows,
                self.cols,
                rhs.rows,
                rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs.data[k * rhs.cols + j];
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Matrix with orthonormal columns (`rows >= cols`), obtained by
    /// modified Gram-Schmidt on entries drawn from `sample`. Pass a standard
    /// normal sampler for Haar-distributed results.
    pub fn random_orthonormal(
        rows: usize,
        cols: usize,
        sample: &mut dyn FnMut() -> f64,
    ) -> Result<Matrix, RankError> {
        if cols > rows || cols == 0 {
            return Err(RankError::ShapeMismatch(alloc::format!(
                "cannot build {cols} orthonormal columns of length {rows}"
            )));
        }
        // columns stored contiguously while orthogonalizing
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
        while q.len() < cols {
            let mut v: Vec<f64> = (0..rows).map(|_| sample()).collect();
            for _ in 0..2 {
                for u in &q {
                    let d = dot(u, &v);
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
                }
            }
            let n = libm::sqrt(dot(&v, &v));
            if n > 1e-8 {
                v.iter_mut().for_each(|a| *a /= n);
                q.push(v);
            }
        }
        let mut m = Matrix::zeros(rows, cols);
        for (c, col) in q.iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                m.data[r * cols + c] = *v;
            }
        }
        Ok(m)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Singular values in descending order, via one-sided Jacobi rotations.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>, RankError> {
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(RankError::NonFinite);
    }
    // Orthogonalize the columns of the taller orientation.
    let a = if m.rows >= m.cols { m.clone() } else { m.transpose() };
    let (rows, cols) = (a.rows, a.cols);
    let mut colv: Vec<Vec<f64>> = (0..cols)
        .map(|c| (0..rows).map(|r| a.data[r * cols + c]).collect())
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = dot(&colv[p], &colv[p]);
                let beta = dot(&colv[q], &colv[q]);
                let gamma = dot(&colv[p], &colv[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                let (left, right) = colv.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = colv.iter().map(|c| libm::sqrt(dot(c, c))).collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    Ok(sigma)
}

/// Count of singular values strictly greater than `threshold_ratio * sigma_max`.
pub fn numerical_rank(m: &Matrix, threshold_ratio: f64) -> Result<usize, RankError> {
    if !(threshold_ratio > 0.0 && threshold_ratio < 1.0) {
        return Err(RankError::InvalidThreshold(threshold_ratio));
    }
    let sigma = singular_values(m)?;
    let max = sigma[0];
    if max == 0.0 {
        return Err(RankError::ZeroMatrix);
    }
    Ok(sigma
        .iter()
        .filter(|&&s| s / max - threshold_ratio > SIGMA_TOL)
        .count())
}

/// One stage to analyse: where its representative weight lives.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StageEntry {
    pub stage_id: u32,
    /// Archive name of the stage's last convolution weight.
    pub weight: String,
    pub c_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StageRank {
    pub stage_id: u32,
    pub c_out: usize,
    pub numerical_rank: usize,
    pub normalized_rank: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RankReport {
    pub threshold_ratio: f64,
    /// Sorted by `stage_id`.
    pub stages: Vec<StageRank>,
}

/// Numerical rank of every stage listed in `manifest`.
pub fn stage_ranks(
    archive: &TensorArchive,
    manifest: &[StageEntry],
    threshold_ratio: f64,
) -> Result<RankReport, RankError> {
    let mut stages = Vec::with_capacity(manifest.len());
    for entry in manifest {
        if manifest.iter().filter(|e| e.stage_id == entry.stage_id).count() > 1 {
            return Err(RankError::DuplicateStage(entry.stage_id));
        }
        let t = archive
            .get(&entry.weight)
            .ok_or_else(|| RankError::MissingWeight(entry.weight.clone()))?;
        let m = Matrix::from_weight(t)?;
        if m.rows() != entry.c_out {
            return Err(RankError::ShapeMismatch(alloc::format!(
                "stage {} declares c_out={} but `{}` has {} output channels",
                entry.stage_id,
                entry.c_out,
                entry.weight,
                m.rows()
            )));
        }
        let r = numerical_rank(&m, threshold_ratio)?;
        stages.push(StageRank {
            stage_id: entry.stage_id,
            c_out: entry.c_out,
            numerical_rank: r,
            normalized_rank: r as f64 / entry.c_out as f64,
        });
    }
    stages.sort_by_key(|s| s.stage_id);
    Ok(RankReport {
        threshold_ratio,
        stages,
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AllocationStep {
    pub stage_id: u32,
    pub normalized_rank: f64,
    pub score: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AllocationTrace {
    pub baseline_score: f64,
    /// All stages in ascending normalized rank (lower id first on ties).
    pub visit_order: Vec<u32>,
    pub steps: Vec<AllocationStep>,
    /// Stages that end up with the compact block, in visit order.
    pub final_stages: Vec<u32>,
}

impl AllocationTrace {
    pub fn evaluator_calls(&self) -> usize {
        self.steps.len()
    }
}

/// Stage ids in ascending normalized rank, ties by lower id.
pub fn visit_order(ranks: &RankReport) -> Vec<u32> {
    let mut s: Vec<&StageRank> = ranks.stages.iter().collect();
    s.sort_by(|a, b| {
        a.normalized_rank
            .total_cmp(&b.normalized_rank)
            .then(a.stage_id.cmp(&b.stage_id))
    });
    s.into_iter().map(|r| r.stage_id).collect()
}

/// Greedy rank-guided allocation.
///
/// Stages are replaced cumulatively in [`visit_order`]. After each
/// replacement `evaluator` scores the current set of replaced stages; the
/// step is accepted when the score is at least `baseline_score`. The first
/// rejected step ends the search and the last accepted set is returned.
pub fn rank_guided_allocate<E>(
    ranks: &RankReport,
    baseline_score: f64,
    mut evaluator: impl FnMut(&[u32]) -> Result<f64, E>,
) -> Result<AllocationTrace, E> {
    let order = visit_order(ranks);
    let mut current: Vec<u32> = Vec::with_capacity(order.len());
    let mut steps = Vec::new();
    for &stage in &order {
        current.push(stage);
        let score = evaluator(&current)?;
        let accepted = score >= baseline_score;
        let normalized_rank = ranks
            .stages
            .iter()
            .find(|s| s.stage_id == stage)
            .map_or(f64::NAN, |s| s.normalized_rank);
        steps.push(AllocationStep {
            stage_id: stage,
            normalized_rank,
            score,
            accepted,
        });
        if !accepted {
            current.pop();
            break;
        }
    }
    Ok(AllocationTrace {
        baseline_score,
        visit_order: order,
        steps,
        final_stages: current,
    })
}
