//! Dual label assignment with a shared task-aligned matching metric.
//!
//! Both heads rank prediction/instance pairs with `m = s * p^alpha * IoU^beta`.
//! The one-to-many head keeps the top-k ranked pairs per instance as
//! positives, the one-to-one head keeps only the best. Classification
//! targets follow task-aligned learning: `t = u* * m / m*`, where `u*` is the
//! best IoU any prediction reaches for the instance and `m*` the best metric.
//!
//! When the one-to-one parameters are a common multiple `r` of the
//! one-to-many parameters, `m_o2o = m_o2m^r`, so both heads agree on the
//! ranking and the supervision gap between them is minimal.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use crate::geometry::{iou, spatial_prior, AnchorPoint, BoundingBox};

/// Default one-to-many top-k.
pub const DEFAULT_TOPK: usize = 10;

/// Relative tolerance when comparing the two exponent ratios.
const RATIO_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum AssignError {
    EmptyPredictions,
    InvalidParams { alpha: f64, beta: f64 },
    InvalidTopK,
    InvalidScore { prediction: usize },
    ClassOutOfRange { gt: usize, class_id: usize, num_classes: usize },
    GtOutOfRange { gt: usize, num_gts: usize },
    /// The one-to-one head assigned nothing to this instance.
    MissingMatch { gt: usize },
    LengthMismatch { left: usize, right: usize },
    /// Two results were not computed on the same predictions and instances.
    MismatchedResults,
}

impl fmt::Display for AssignError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AssignError::EmptyPredictions => f.write_str("no predictions to assign"),
            AssignError::InvalidParams { alpha, beta } => write!(
                f,
                "metric parameters must be positive and finite (alpha={alpha}, beta={beta})"
            ),
            AssignError::InvalidTopK => f.write_str("top-k must be at least 1"),
            AssignError::InvalidScore { prediction } => write!(
                f,
                "prediction {prediction} has an empty score vector or a score outside [0, 1]"
            ),
            AssignError::ClassOutOfRange {
                gt,
                class_id,
                num_classes,
            } => write!(
                f,
                "ground truth {gt} has class {class_id} but predictions carry {num_classes} scores"
            ),
            AssignError::GtOutOfRange { gt, num_gts } => {
                write!(f, "ground truth index {gt} out of range ({num_gts} instances)")
            }
            AssignError::MissingMatch { gt } => {
                write!(f, "one-to-one head assigned no prediction to ground truth {gt}")
            }
            AssignError::LengthMismatch { left, right } => {
                write!(f, "target vectors differ in length ({left} vs {right})")
            }
            AssignError::MismatchedResults => {
                f.write_str("assignment results describe different inputs")
            }
        }
    }
}

impl core::error::Error for AssignError {}

/// Exponents `(alpha, beta)` of the matching metric.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricParams {
    pub alpha: f64,
    pub beta: f64,
}

impl MetricParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, AssignError> {
        let p = MetricParams { alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), AssignError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.alpha) && ok(self.beta) {
            Ok(())
        } else {
            Err(AssignError::InvalidParams {
                alpha: self.alpha,
                beta: self.beta,
            })
        }
    }

    /// `(r * alpha, r * beta)`: the consistent partner of these parameters.
    pub fn scaled(&self, r: f64) -> Result<Self, AssignError> {
        Self::new(self.alpha * r, self.beta * r)
    }
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            alpha: 0.5,
            beta: 6.0,
        }
    }
}

/// One dense prediction: anchor, decoded box and per-class scores.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Prediction {
    pub anchor: AnchorPoint,
    pub bbox: BoundingBox,
    pub scores: Vec<f64>,
}

impl Prediction {
    pub fn new(anchor: AnchorPoint, bbox: BoundingBox, scores: Vec<f64>) -> Option<Self> {
        let p = Prediction {
            anchor,
            bbox,
            scores,
        };
        p.scores_valid().then_some(p)
    }

    pub fn scores_valid(&self) -> bool {
        !self.scores.is_empty() && self.scores.iter().all(|s| (0.0..=1.0).contains(s))
    }

    /// Highest class score and its class (lowest class on ties).
    pub fn best_class(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (c, &s) in self.scores.iter().enumerate() {
            if s > best.1 {
                best = (c, s);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub class_id: usize,
}

/// `s * p^alpha * iou^beta`, with `s` given as the spatial-prior flag.
pub fn matching_metric(p_class: f64, iou_val: f64, inside: bool, params: &MetricParams) -> f64 {
    if !inside {
        return 0.0;
    }
    libm::pow(p_class, params.alpha) * libm::pow(iou_val, params.beta)
}

/// A positive sample of one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Positive {
    pub pred: usize,
    pub metric: f64,
    pub target: f64,
}

/// Assignment outcome for one instance.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GtAssignment {
    /// Positives ranked by metric (descending, lower index first on ties).
    pub positives: Vec<Positive>,
    /// Largest IoU between the instance and any prediction.
    pub u_star: f64,
    /// Largest metric between the instance and any prediction.
    pub m_star: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AssignmentResult {
    pub num_predictions: usize,
    pub per_gt: Vec<GtAssignment>,
}

impl AssignmentResult {
    /// Best-ranked positive of instance `gt`, if any.
    pub fn pick(&self, gt: usize) -> Option<usize> {
        self.per_gt
            .get(gt)
            .and_then(|a| a.positives.first())
            .map(|p| p.pred)
    }

    /// Per-prediction classification targets for instance `gt` (0 outside the
    /// positive set).
    pub fn dense_targets(&self, gt: usize) -> Result<Vec<f64>, AssignError> {
        let a = self.per_gt.get(gt).ok_or(AssignError::GtOutOfRange {
            gt,
            num_gts: self.per_gt.len(),
        })?;
        let mut out = vec![0.0; self.num_predictions];
        for p in &a.positives {
            out[p.pred] = p.target;
        }
        Ok(out)
    }

    fn same_shape(&self, other: &AssignmentResult) -> bool {
        self.num_predictions == other.num_predictions && self.per_gt.len() == other.per_gt.len()
    }
}

struct PairStats {
    metrics: Vec<f64>,
    inside: Vec<bool>,
    u_star: f64,
    m_star: f64,
}

fn validate_inputs(preds: &[Prediction], gts: &[GroundTruth]) -> Result<(), AssignError> {
    if preds.is_empty() {
        return Err(AssignError::EmptyPredictions);
    }
    if let Some(i) = preds.iter().position(|p| !p.scores_valid()) {
        return Err(AssignError::InvalidScore { prediction: i });
    }
    for (g, gt) in gts.iter().enumerate() {
        if let Some(i) = preds.iter().position(|p| gt.class_id >= p.scores.len()) {
            return Err(AssignError::ClassOutOfRange {
                gt: g,
                class_id: gt.class_id,
                num_classes: preds[i].scores.len(),
            });
        }
    }
    Ok(())
}

fn pair_stats(preds: &[Prediction], gt: &GroundTruth, params: &MetricParams) -> PairStats {
    let mut stats = PairStats {
        metrics: Vec::with_capacity(preds.len()),
        inside: Vec::with_capacity(preds.len()),
        u_star: 0.0,
        m_star: 0.0,
    };
    for pred in preds {
        let overlap = iou(&pred.bbox, &gt.bbox);
        let inside = spatial_prior(&pred.anchor, &gt.bbox);
        let m = matching_metric(pred.scores[gt.class_id], overlap, inside, params);
        stats.u_star = stats.u_star.max(overlap);
        stats.m_star = stats.m_star.max(m);
        stats.metrics.push(m);
        stats.inside.push(inside);
    }
    stats
}

fn by_metric_then_index(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// One-to-many assignment: per instance, the `topk` highest-metric
/// predictions whose anchor lies inside it and whose metric is positive.
pub fn assign_one_to_many(
    preds: &[Prediction],
    gts: &[GroundTruth],
    params: &MetricParams,
    topk: usize,
) -> Result<AssignmentResult, AssignError> {
    params.validate()?;
    if topk == 0 {
        return Err(AssignError::InvalidTopK);
    }
    validate_inputs(preds, gts)?;

    let per_gt = gts
        .iter()
        .map(|gt| {
            let stats = pair_stats(preds, gt, params);
            let mut candidates: Vec<(usize, f64)> = stats
                .metrics
                .iter()
                .enumerate()
                .filter(|&(j, &m)| stats.inside[j] && m > 0.0)
                .map(|(j, &m)| (j, m))
                .collect();
            candidates.sort_by(by_metric_then_index);
            candidates.truncate(topk);
            let positives = candidates
                .into_iter()
                .map(|(pred, metric)| Positive {
                    pred,
                    metric,
                    target: stats.u_star * (metric / stats.m_star),
                })
                .collect();
            GtAssignment {
                positives,
                u_star: stats.u_star,
                m_star: stats.m_star,
            }
        })
        .collect();

    Ok(AssignmentResult {
        num_predictions: preds.len(),
        per_gt,
    })
}

/// One-to-one assignment: per instance, the single best-metric prediction.
///
/// Instances are visited in input order and a prediction already taken by an
/// earlier instance is skipped, so the mapping is injective. Ties go to the
/// lower prediction index. The chosen prediction's target is `u*`.
pub fn assign_one_to_one(
    preds: &[Prediction],
    gts: &[GroundTruth],
    params: &MetricParams,
) -> Result<AssignmentResult, AssignError> {
    params.validate()?;
    validate_inputs(preds, gts)?;

    let mut claimed = vec![false; preds.len()];
    let mut per_gt = Vec::with_capacity(gts.len());
    for gt in gts {
        let stats = pair_stats(preds, gt, params);
        let best = stats
            .metrics
            .iter()
            .enumerate()
            .filter(|&(j, &m)| stats.inside[j] && m > 0.0 && !claimed[j])
            .map(|(j, &m)| (j, m))
            .min_by(by_metric_then_index);
        let positives = match best {
            Some((pred, metric)) => {
                claimed[pred] = true;
                vec![Positive {
                    pred,
                    metric,
                    target: stats.u_star,
                }]
            }
            None => Vec::new(),
        };
        per_gt.push(GtAssignment {
            positives,
            u_star: stats.u_star,
            m_star: stats.m_star,
        });
    }

    Ok(AssignmentResult {
        num_predictions: preds.len(),
        per_gt,
    })
}

/// Supervision gap for one instance, with its decomposition
/// `value = t_o2o - [pick in positives] * t_o2m_pick + others_sum`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GapReport {
    pub gt: usize,
    pub pick: usize,
    pub value: f64,
    pub t_o2o: f64,
    pub pick_in_positives: bool,
    pub t_o2m_pick: f64,
    /// Sum of one-to-many targets of the positives other than the pick.
    pub others_sum: f64,
}

/// Gap between the one-to-many targets of `gt` and a one-to-one head that
/// picks prediction `pick` with target `t_o2o`.
pub fn gap_for_pick(
    o2m: &AssignmentResult,
    gt: usize,
    pick: usize,
    t_o2o: f64,
) -> Result<GapReport, AssignError> {
    let a = o2m.per_gt.get(gt).ok_or(AssignError::GtOutOfRange {
        gt,
        num_gts: o2m.per_gt.len(),
    })?;
    let mut t_pick = None;
    let mut others_sum = 0.0;
    for p in &a.positives {
        if p.pred == pick {
            t_pick = Some(p.target);
        } else {
            others_sum += p.target;
        }
    }
    let t_o2m_pick = t_pick.unwrap_or(0.0);
    Ok(GapReport {
        gt,
        pick,
        value: t_o2o - t_o2m_pick + others_sum,
        t_o2o,
        pick_in_positives: t_pick.is_some(),
        t_o2m_pick,
        others_sum,
    })
}

/// Supervision gap between the two heads for instance `gt`.
pub fn supervision_gap(
    o2m: &AssignmentResult,
    o2o: &AssignmentResult,
    gt: usize,
) -> Result<GapReport, AssignError> {
    if !o2m.same_shape(o2o) {
        return Err(AssignError::MismatchedResults);
    }
    let a = o2o.per_gt.get(gt).ok_or(AssignError::GtOutOfRange {
        gt,
        num_gts: o2o.per_gt.len(),
    })?;
    let chosen = a.positives.first().ok_or(AssignError::MissingMatch { gt })?;
    gap_for_pick(o2m, gt, chosen.pred, chosen.target)
}

/// Sum over predictions of `|t_o2o - t_o2m|`: the gap computed straight from
/// dense target vectors.
pub fn gap_oracle(o2m_targets: &[f64], o2o_targets: &[f64]) -> Result<f64, AssignError> {
    if o2m_targets.len() != o2o_targets.len() {
        return Err(AssignError::LengthMismatch {
            left: o2m_targets.len(),
            right: o2o_targets.len(),
        });
    }
    Ok(o2m_targets
        .iter()
        .zip(o2o_targets)
        .map(|(a, b)| (b - a).abs())
        .sum())
}

/// `Some(r)` when `o2o = r * o2m` in both exponents, `None` otherwise.
pub fn consistency_ratio(o2m: &MetricParams, o2o: &MetricParams) -> Option<f64> {
    let r_alpha = o2o.alpha / o2m.alpha;
    let r_beta = o2o.beta / o2m.beta;
    if !(r_alpha.is_finite() && r_beta.is_finite()) || r_alpha <= 0.0 || r_beta <= 0.0 {
        return None;
    }
    let scale = r_alpha.abs().max(r_beta.abs());
    ((r_alpha - r_beta).abs() <= RATIO_RTOL * scale).then_some(r_alpha)
}

/// How many instances had their one-to-one pick among the top-`k`
/// one-to-many positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlignmentCount {
    pub k: usize,
    pub hits: usize,
    pub total: usize,
}

impl AlignmentCount {
    /// `hits / total`, or `None` when no instance was counted.
    pub fn frequency(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }

    pub fn merge(&mut self, other: &AlignmentCount) {
        debug_assert_eq!(self.k, other.k);
        self.hits += other.hits;
        self.total += other.total;
    }
}

/// Alignment counts for each `k`. Instances without a one-to-one match count
/// as misses.
pub fn alignment_frequency(
    o2m: &AssignmentResult,
    o2o: &AssignmentResult,
    ks: &[usize],
) -> Result<Vec<AlignmentCount>, AssignError> {
    if !o2m.same_shape(o2o) {
        return Err(AssignError::MismatchedResults);
    }
    if ks.contains(&0) {
        return Err(AssignError::InvalidTopK);
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = (0..o2o.per_gt.len())
                .filter(|&g| match o2o.pick(g) {
                    Some(pick) => o2m.per_gt[g]
                        .positives
                        .iter()
                        .take(k)
                        .any(|p| p.pred == pick),
                    None => false,
                })
                .count();
            AlignmentCount {
                k,
                hits,
                total: o2o.per_gt.len(),
            }
        })
        .collect())
}
