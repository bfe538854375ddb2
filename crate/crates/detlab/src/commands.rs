//! The operations behind each CLI subcommand.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;

use detlab_core::assignment::gap_for_pick;
use detlab_core::rank::{stage_ranks, StageEntry};
use detlab_core::tensor::{bn_fold, reparam_fuse_lk, BatchNorm};
use detlab_core::{
    alignment_frequency, assign_one_to_many, assign_one_to_one, consistency_ratio, rank_guided_allocate,
    AlignmentCount, AllocationTrace, AssignError, AssignmentResult, GapReport, GtAssignment, MetricParams,
    Prediction, RankReport, Tensor, TensorArchive,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{bench_postprocess, BenchReport};
use crate::config::RunConfig;
use crate::dataset::{DatasetFile, ImageRecord};
use crate::error::{Error, Result};
use crate::json;

/// Top-k cut-offs reported for alignment frequencies.
pub const ALIGNMENT_KS: [usize; 3] = [1, 5, 10];

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))
}

/// Run `f` on every item in a pool of `workers` threads, keeping input order.
fn par_map<T: Sync, U: Send>(workers: usize, items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    pool(workers)?.install(|| items.par_iter().map(&f).collect())
}

fn assign_err(id: u64, e: AssignError) -> Error {
    Error::invariant(format!("image {id}: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsSummary {
    pub o2m: MetricParams,
    pub topk: usize,
    /// `r = 1` consistent one-to-one exponents.
    pub consistent_o2o: MetricParams,
    pub configured_o2o: MetricParams,
    /// Common ratio of the configured exponents to the one-to-many ones, if
    /// they are consistent.
    pub configured_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub k: usize,
    pub hits: usize,
    pub total: usize,
    pub frequency: Option<f64>,
}

impl From<AlignmentCount> for FrequencyRow {
    fn from(c: AlignmentCount) -> Self {
        FrequencyRow {
            k: c.k,
            hits: c.hits,
            total: c.total,
            frequency: c.frequency(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub consistent: Vec<FrequencyRow>,
    pub configured: Vec<FrequencyRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    /// Instances with at least one one-to-many positive.
    pub instances_with_positives: usize,
    /// Mean of the smallest achievable gap per instance.
    pub minimum_mean: Option<f64>,
    pub consistent_matched: usize,
    pub consistent_mean: Option<f64>,
    pub configured_matched: usize,
    pub configured_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAssignment {
    pub id: u64,
    pub o2m: AssignmentResult,
    /// One-to-one result under the configured exponents.
    pub o2o: AssignmentResult,
    pub gaps: Vec<GapReport>,
    /// Instances the configured one-to-one head left unmatched.
    pub unmatched: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignReport {
    pub params: ParamsSummary,
    pub images: Vec<ImageAssignment>,
    pub alignment: AlignmentSummary,
    pub gap: GapSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGaps {
    pub id: u64,
    pub gaps: Vec<GapReport>,
    pub unmatched: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapFileReport {
    pub params: ParamsSummary,
    pub images: Vec<ImageGaps>,
    pub gap: GapSummary,
}

struct ImageWork {
    out: ImageAssignment,
    consistent: Vec<AlignmentCount>,
    configured: Vec<AlignmentCount>,
    consistent_gaps: Vec<f64>,
    minimum_gaps: Vec<f64>,
}

fn empty_result(num_gts: usize) -> AssignmentResult {
    AssignmentResult {
        num_predictions: 0,
        per_gt: vec![
            GtAssignment {
                positives: Vec::new(),
                u_star: 0.0,
                m_star: 0.0,
            };
            num_gts
        ],
    }
}

fn gaps_for(o2m: &AssignmentResult, o2o: &AssignmentResult, id: u64) -> Result<(Vec<GapReport>, Vec<usize>)> {
    let mut gaps = Vec::new();
    let mut unmatched = Vec::new();
    for g in 0..o2o.per_gt.len() {
        match detlab_core::supervision_gap(o2m, o2o, g) {
            Ok(r) => gaps.push(r),
            Err(AssignError::MissingMatch { .. }) => unmatched.push(g),
            Err(e) => return Err(assign_err(id, e)),
        }
    }
    Ok((gaps, unmatched))
}

fn process_image(
    img: &ImageRecord,
    o2m_p: &MetricParams,
    topk: usize,
    o2o_p: &MetricParams,
) -> Result<ImageWork> {
    let (preds, gts): (Vec<Prediction>, _) = img.to_core()?;
    let id = img.id;
    let (o2m, o2o, consistent_o2o) = if preds.is_empty() {
        (empty_result(gts.len()), empty_result(gts.len()), empty_result(gts.len()))
    } else {
        (
            assign_one_to_many(&preds, &gts, o2m_p, topk).map_err(|e| assign_err(id, e))?,
            assign_one_to_one(&preds, &gts, o2o_p).map_err(|e| assign_err(id, e))?,
            assign_one_to_one(&preds, &gts, o2m_p).map_err(|e| assign_err(id, e))?,
        )
    };
    let consistent = alignment_frequency(&o2m, &consistent_o2o, &ALIGNMENT_KS).map_err(|e| assign_err(id, e))?;
    let configured = alignment_frequency(&o2m, &o2o, &ALIGNMENT_KS).map_err(|e| assign_err(id, e))?;
    let (gaps, unmatched) = gaps_for(&o2m, &o2o, id)?;
    let consistent_gaps = gaps_for(&o2m, &consistent_o2o, id)?.0.iter().map(|r| r.value).collect();
    let minimum_gaps = o2m
        .per_gt
        .iter()
        .enumerate()
        .filter_map(|(g, a)| a.positives.first().map(|best| (g, best.pred, a.u_star)))
        .map(|(g, pick, u)| gap_for_pick(&o2m, g, pick, u).map(|r| r.value).map_err(|e| assign_err(id, e)))
        .collect::<Result<_>>()?;
    Ok(ImageWork {
        out: ImageAssignment {
            id,
            o2m,
            o2o,
            gaps,
            unmatched,
        },
        consistent,
        configured,
        consistent_gaps,
        minimum_gaps,
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn merge_counts(acc: &mut [AlignmentCount], counts: &[AlignmentCount]) {
    acc.iter_mut().zip(counts).for_each(|(a, c)| a.merge(c));
}

fn params_summary(cfg: &RunConfig) -> Result<ParamsSummary> {
    let o2m = cfg.o2m_params().map_err(|e| Error::config(e.to_string()))?;
    let o2o = cfg.o2o_params().map_err(|e| Error::config(e.to_string()))?;
    Ok(ParamsSummary {
        o2m,
        topk: cfg.o2m.topk,
        consistent_o2o: o2m,
        configured_o2o: o2o,
        configured_ratio: consistency_ratio(&o2m, &o2o),
    })
}

/// Assignments, alignment frequencies and supervision gaps for every image.
/// Results are ordered by image id whatever the worker count.
pub fn run_assign(ds: &DatasetFile, cfg: &RunConfig) -> Result<AssignReport> {
    let params = params_summary(cfg)?;
    let mut work = par_map(cfg.worker_count(), &ds.images, |img| {
        process_image(img, &params.o2m, params.topk, &params.configured_o2o)
    })?;
    work.sort_by_key(|w| w.out.id);

    let zero: Vec<AlignmentCount> = ALIGNMENT_KS.iter().map(|&k| AlignmentCount { k, hits: 0, total: 0 }).collect();
    let (mut consistent, mut configured) = (zero.clone(), zero);
    let (mut cons_gaps, mut conf_gaps, mut min_gaps) = (Vec::new(), Vec::new(), Vec::new());
    for w in &work {
        merge_counts(&mut consistent, &w.consistent);
        merge_counts(&mut configured, &w.configured);
        cons_gaps.extend_from_slice(&w.consistent_gaps);
        conf_gaps.extend(w.out.gaps.iter().map(|r| r.value));
        min_gaps.extend_from_slice(&w.minimum_gaps);
    }
    let gap = GapSummary {
        instances_with_positives: min_gaps.len(),
        minimum_mean: mean(&min_gaps),
        consistent_matched: cons_gaps.len(),
        consistent_mean: mean(&cons_gaps),
        configured_matched: conf_gaps.len(),
        configured_mean: mean(&conf_gaps),
    };
    Ok(AssignReport {
        params,
        images: work.into_iter().map(|w| w.out).collect(),
        alignment: AlignmentSummary {
            consistent: consistent.into_iter().map(FrequencyRow::from).collect(),
            configured: configured.into_iter().map(FrequencyRow::from).collect(),
        },
        gap,
    })
}

/// Supervision gaps under the configured one-to-one exponents.
pub fn run_gap(ds: &DatasetFile, cfg: &RunConfig) -> Result<GapFileReport> {
    let full = run_assign(ds, cfg)?;
    Ok(GapFileReport {
        params: full.params,
        images: full
            .images
            .into_iter()
            .map(|i| ImageGaps {
                id: i.id,
                gaps: i.gaps,
                unmatched: i.unmatched,
            })
            .collect(),
        gap: full.gap,
    })
}

/// Benchmark both post-processing paths on the one-to-one predictions of
/// every image.
pub fn run_bench(images: &[Vec<Prediction>], cfg: &RunConfig, repeats: usize) -> Result<BenchReport> {
    bench_postprocess(images, &cfg.nms_config(), &cfg.select_config(), repeats)
}

pub fn dataset_predictions(ds: &DatasetFile) -> Result<Vec<Vec<Prediction>>> {
    ds.images.iter().map(|i| i.to_core().map(|(p, _)| p)).collect()
}

/// Branch names used by [`run_fuse`].
const LARGE: &str = "dw7";
const SMALL: &str = "dw3";
const BN_FIELDS: [&str; 4] = ["gamma", "beta", "mean", "var"];

fn branch(archive: &TensorArchive, prefix: &str, which: &str, eps: f64) -> Result<(Tensor, Option<Vec<f64>>, Vec<String>)> {
    let name = |s: &str| format!("{prefix}.{which}.{s}");
    let fail = |m: String| Error::config(format!("fuse {prefix}.{which}: {m}"));
    let weight = archive.get(&name("weight")).ok_or_else(|| fail("missing weight".into()))?.clone();
    let mut used = vec![name("weight")];
    let c = weight.shape().first().copied().unwrap_or(0);
    let bias = archive.get(&name("bias")).map(|b| b.data().to_vec());
    if bias.is_some() {
        used.push(name("bias"));
    }
    let bn_names: Vec<String> = BN_FIELDS.iter().map(|f| name(&format!("bn.{f}"))).collect();
    let present = bn_names.iter().filter(|n| archive.get(n).is_some()).count();
    let (w, b) = match present {
        0 => (weight, bias),
        4 => {
            let v = |i: usize| archive.get(&bn_names[i]).map(|t| t.data().to_vec()).unwrap_or_default();
            let bn = BatchNorm {
                gamma: v(0),
                beta: v(1),
                mean: v(2),
                var: v(3),
                eps,
            };
            used.extend(bn_names);
            let (w, b) = bn_fold(&weight, &bias.unwrap_or_else(|| vec![0.0; c]), &bn).map_err(|e| fail(e.to_string()))?;
            (w, Some(b))
        }
        _ => return Err(fail("batch-norm needs all of gamma, beta, mean and var".into())),
    };
    Ok((w, b, used))
}

/// Merge every `<p>.dw7` / `<p>.dw3` depthwise pair into one 7x7 kernel
/// `<p>.weight`, folding per-branch batch-norm (`<p>.<branch>.bn.*`) and
/// biases first. A `<p>.bias` is written when either branch has a bias or
/// batch-norm. Unrelated tensors pass through.
pub fn run_fuse(input: &TensorArchive, bn_eps: f64) -> Result<TensorArchive> {
    let suffix = format!(".{LARGE}.weight");
    let prefixes: Vec<String> = input
        .iter()
        .filter_map(|(n, _)| n.strip_suffix(&suffix).map(str::to_string))
        .collect();
    let mut out = input.clone();
    for p in &prefixes {
        let (w7, b7, used7) = branch(input, p, LARGE, bn_eps)?;
        let (w3, b3, used3) = branch(input, p, SMALL, bn_eps)?;
        let fused = reparam_fuse_lk(&w7, &w3).map_err(|e| Error::config(format!("fuse {p}: {e}")))?;
        for n in used7.iter().chain(&used3) {
            out.remove(n);
        }
        let c = fused.shape()[0];
        let bias = match (b7, b3) {
            (None, None) => None,
            (a, b) => {
                let (a, b) = (a.unwrap_or_else(|| vec![0.0; c]), b.unwrap_or_else(|| vec![0.0; c]));
                Some(a.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<f64>>())
            }
        };
        let mut outputs = vec![(format!("{p}.weight"), fused)];
        if let Some(b) = bias {
            outputs.push((format!("{p}.bias"), Tensor::new(vec![c], b).map_err(Error::invariant)?));
        }
        for (name, t) in outputs {
            if out.insert(name.clone(), t).is_some() {
                return Err(Error::config(format!("fuse {p}: output {name:?} already exists in the archive")));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageManifest {
    pub stages: Vec<StageEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankCsvRow {
    pub stage_id: u32,
    pub rank: usize,
    pub normalized_rank: f64,
}

/// Stage ranks, computed concurrently per stage.
pub fn run_rank(archive: &TensorArchive, stages: &[StageEntry], ratio: f64, workers: usize) -> Result<RankReport> {
    let mut seen = BTreeSet::new();
    if let Some(dup) = stages.iter().find(|s| !seen.insert(s.stage_id)) {
        return Err(Error::config(format!("stage {} listed twice", dup.stage_id)));
    }
    let per_stage = par_map(workers, stages, |s| {
        stage_ranks(archive, std::slice::from_ref(s), ratio).map_err(|e| Error::config(format!("stage {}: {e}", s.stage_id)))
    })?;
    let mut all: Vec<_> = per_stage.into_iter().flat_map(|r| r.stages).collect();
    all.sort_by_key(|s| s.stage_id);
    Ok(RankReport {
        threshold_ratio: ratio,
        stages: all,
    })
}

pub fn rank_csv_rows(report: &RankReport) -> Vec<RankCsvRow> {
    report
        .stages
        .iter()
        .map(|s| RankCsvRow {
            stage_id: s.stage_id,
            rank: s.numerical_rank,
            normalized_rank: s.normalized_rank,
        })
        .collect()
}

pub fn write_rank_csv<W: std::io::Write>(report: &RankReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rank_csv_rows(report) {
        w.serialize(r).map_err(|e| Error::invariant(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableEntry {
    pub stages: Vec<u32>,
    pub score: f64,
}

/// Scores looked up by stage set (order-insensitive).
#[derive(Debug, Clone, PartialEq)]
pub struct TableEvaluator {
    entries: Vec<(BTreeSet<u32>, f64)>,
}

impl TableEvaluator {
    pub fn new(entries: &[TableEntry]) -> Result<Self> {
        let mut out: Vec<(BTreeSet<u32>, f64)> = Vec::with_capacity(entries.len());
        for e in entries {
            let set: BTreeSet<u32> = e.stages.iter().copied().collect();
            if out.iter().any(|(s, _)| *s == set) {
                return Err(Error::config(format!("evaluator table lists {:?} twice", e.stages)));
            }
            out.push((set, e.score));
        }
        Ok(TableEvaluator { entries: out })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(&json::read_json::<Vec<TableEntry>>(path)?)
    }

    pub fn score(&self, stages: &[u32]) -> Result<f64> {
        let set: BTreeSet<u32> = stages.iter().copied().collect();
        self.entries
            .iter()
            .find(|(s, _)| *s == set)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Evaluator(format!("no score for stage set {stages:?}")))
    }
}

/// Runs a shell command per stage set; `{stages}` expands to the ids joined
/// by commas and the last non-empty stdout line must parse as a number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandEvaluator {
    pub template: String,
}

impl CommandEvaluator {
    pub fn score(&self, stages: &[u32]) -> Result<f64> {
        let ids: Vec<String> = stages.iter().map(u32::to_string).collect();
        let cmd = self.template.replace("{stages}", &ids.join(","));
        let out = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .output()
            .map_err(|e| Error::Evaluator(format!("cannot run {cmd:?}: {e}")))?;
        if !out.status.success() {
            return Err(Error::Evaluator(format!("{cmd:?} exited with {}", out.status)));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        let last = stdout.lines().rev().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
        last.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Evaluator(format!("{cmd:?} printed {last:?}, expected a number")))
    }
}

pub enum Evaluator {
    Table(TableEvaluator),
    Command(CommandEvaluator),
}

impl Evaluator {
    pub fn score(&self, stages: &[u32]) -> Result<f64> {
        match self {
            Evaluator::Table(t) => t.score(stages),
            Evaluator::Command(c) => c.score(stages),
        }
    }
}

/// Rank-guided allocation. Without an explicit baseline the evaluator
/// scores the empty stage set first; that call is not part of the trace.
pub fn run_allocate(ranks: &RankReport, baseline: Option<f64>, evaluator: &Evaluator) -> Result<AllocationTrace> {
    if ranks.stages.is_empty() {
        return Err(Error::config("rank report has no stages"));
    }
    let baseline = match baseline {
        Some(b) => b,
        None => evaluator.score(&[])?,
    };
    rank_guided_allocate(ranks, baseline, |stages| evaluator.score(stages))
}
