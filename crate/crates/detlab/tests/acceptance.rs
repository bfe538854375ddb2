use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use detlab::archive::{read_archive, write_archive, Layout};
use detlab::bench::{duplicate_scene, NMS_PATH, SELECT_PATH};
use detlab::commands::{run_allocate, run_assign, run_bench, AssignReport, Evaluator, GapFileReport, TableEntry, TableEvaluator};
use detlab::config::RunConfig;
use detlab::cost_table::CostRow;
use detlab::dataset::DatasetFile;
use detlab::json::{parse_str, to_json};
use detlab::synth::{generate_synthetic, planted_archive, planted_in_order, NoiseProfile, SynthParams};
use detlab_core::assignment::gap_for_pick;
use detlab_core::tensor::{
    conv2d_ref, count_cost, forward_block, forward_block_counted, reparam_fuse_lk, Activation, BlockBody, BlockSpec,
    BlockWeights, ConvSpec, MacCounter,
};
use detlab_core::{
    assign_one_to_many, assign_one_to_one, nms, nms_free_select, numerical_rank, rank_guided_allocate, stage_ranks,
    AllocationTrace, AnchorPoint, BoundingBox, Detection, GroundTruth, Matrix, MetricParams, NmsConfig, Prediction,
    RankReport, SelectConfig, StageEntry, Tensor, TensorArchive,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

const GAP_TOL: f64 = 1e-12;
const REPARAM_TOL: f64 = 1e-9;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        match $cond {
            true => {}
            false => return Err(format!($($msg)*)),
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

// ---------------------------------------------------------------- oracles

fn oracle_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

fn oracle_inside(anchor: (f64, f64), g: [f64; 4]) -> bool {
    g[0] <= anchor.0 && anchor.0 < g[2] && g[1] <= anchor.1 && anchor.1 < g[3]
}

/// Dense one-to-many targets and `u*` for one instance, built from scratch.
fn oracle_o2m_targets(preds: &[Prediction], gt: &GroundTruth, alpha: f64, beta: f64, topk: usize) -> (Vec<f64>, f64) {
    let g = gt.bbox.to_array();
    let mut u_star: f64 = 0.0;
    let mut m_star: f64 = 0.0;
    let mut metrics = Vec::new();
    for p in preds {
        let overlap = oracle_iou(p.bbox.to_array(), g);
        u_star = u_star.max(overlap);
        let m = if oracle_inside((p.anchor.x, p.anchor.y), g) {
            p.scores[gt.class_id].powf(alpha) * overlap.powf(beta)
        } else {
            0.0
        };
        m_star = m_star.max(m);
        metrics.push(m);
    }
    let mut dense = vec![0.0; preds.len()];
    let mut taken = vec![false; preds.len()];
    for _ in 0..topk {
        let mut best: Option<usize> = None;
        for j in 0..preds.len() {
            if taken[j] || metrics[j] <= 0.0 {
                continue;
            }
            if best.is_none_or(|b| metrics[j] > metrics[b]) {
                best = Some(j);
            }
        }
        let Some(b) = best else { break };
        taken[b] = true;
        dense[b] = u_star * metrics[b] / m_star;
    }
    (dense, u_star)
}

fn abs_diff_sum(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Greedy-free NMS definition: walk candidates by (score desc, index asc),
/// picked by repeated linear scans, and keep one when no kept detection of
/// the same class overlaps it above the threshold.
fn oracle_nms(dets: &[Detection], cfg: &NmsConfig) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= cfg.score_thresh).collect();
    let mut keep: Vec<usize> = Vec::new();
    while !remaining.is_empty() && keep.len() < cfg.max_det {
        let mut pos = 0;
        for (k, &i) in remaining.iter().enumerate() {
            let b = remaining[pos];
            if dets[i].score > dets[b].score || (dets[i].score == dets[b].score && i < b) {
                pos = k;
            }
        }
        let i = remaining.remove(pos);
        let suppressed = keep.iter().any(|&k| {
            (cfg.class_agnostic || dets[k].class_id == dets[i].class_id)
                && oracle_iou(dets[k].bbox.to_array(), dets[i].bbox.to_array()) > cfg.iou_thresh
        });
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

/// Best class per prediction (first maximum), threshold, full sort, truncate.
fn oracle_select(preds: &[Prediction], cfg: &SelectConfig) -> Vec<(usize, usize, f64)> {
    let mut rows: Vec<(usize, usize, f64)> = preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut c = 0;
            for k in 1..p.scores.len() {
                if p.scores[k] > p.scores[c] {
                    c = k;
                }
            }
            (i, c, p.scores[c])
        })
        .filter(|r| r.2 >= cfg.score_thresh)
        .collect();
    rows.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    rows.truncate(cfg.max_det);
    rows
}

/// Depthwise "same" convolution, stride 1, written directly over NCHW.
#[allow(clippy::too_many_arguments)]
fn oracle_depthwise(x: &[f64], n: usize, c: usize, h: usize, w: usize, kernel: &[f64], k: usize, bias: &[f64]) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[ch];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - pad;
                            let ix = xx as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += kernel[ch * k * k + ky * k + kx]
                                * x[((b * c + ch) * h + iy as usize) * w + ix as usize];
                        }
                    }
                    out[((b * c + ch) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

/// Row-major `n x n` orthogonal matrix as a product of `n` Householder
/// reflections with Gaussian directions.
fn householder_orthogonal(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    for _ in 0..n {
        let v: Vec<f64> = (0..n).map(|_| normal(r)).collect();
        let vv: f64 = v.iter().map(|a| a * a).sum();
        if vv < 1e-12 {
            continue;
        }
        // q <- (I - 2 v v^T / v^T v) q
        for col in 0..n {
            let dot: f64 = (0..n).map(|row| v[row] * q[row * n + col]).sum();
            let f = 2.0 * dot / vv;
            for row in 0..n {
                q[row * n + col] -= f * v[row];
            }
        }
    }
    q
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    out
}

// ------------------------------------------------------------ generators

/// One instance with a random box and `n` predictions around it: most
/// anchored inside, some outside, some disjoint, some exact duplicates.
fn random_instance(r: &mut ChaCha8Rng, num_classes: usize) -> (Vec<Prediction>, GroundTruth) {
    let (x0, y0) = (r.random_range(0.0..100.0), r.random_range(0.0..100.0));
    let (gw, gh) = (r.random_range(4.0..60.0), r.random_range(4.0..60.0));
    let g = [x0, y0, x0 + gw, y0 + gh];
    let gt = GroundTruth {
        bbox: BoundingBox::from_array(g).unwrap(),
        class_id: r.random_range(0..num_classes),
    };
    let n = r.random_range(1..=30);
    let mut preds: Vec<Prediction> = Vec::with_capacity(n);
    for _ in 0..n {
        if !preds.is_empty() && r.random_bool(0.05) {
            let dup = preds[r.random_range(0..preds.len())].clone();
            preds.push(dup);
            continue;
        }
        let anchor = if r.random_bool(0.75) {
            (x0 + r.random_range(0.0..gw), y0 + r.random_range(0.0..gh))
        } else {
            (x0 - r.random_range(1.0..20.0), y0 + r.random_range(0.0..gh))
        };
        let b = if r.random_bool(0.1) {
            [g[2] + 5.0, g[3] + 5.0, g[2] + 15.0, g[3] + 15.0]
        } else {
            let j = |r: &mut ChaCha8Rng, s: f64| r.random_range(-0.4..0.4) * s;
            let (a, bb, c, d) = (g[0] + j(r, gw), g[1] + j(r, gh), g[2] + j(r, gw), g[3] + j(r, gh));
            [a.min(c - 0.5), bb.min(d - 0.5), c, d]
        };
        let scores: Vec<f64> = (0..num_classes)
            .map(|_| if r.random_bool(0.05) { 0.0 } else { r.random::<f64>() })
            .collect();
        preds.push(
            Prediction::new(
                AnchorPoint::new(anchor.0, anchor.1, 8.0).unwrap(),
                BoundingBox::from_array(b).unwrap(),
                scores,
            )
            .unwrap(),
        );
    }
    (preds, gt)
}

fn random_params(r: &mut ChaCha8Rng) -> MetricParams {
    MetricParams::new(r.random_range(0.1..2.0), r.random_range(0.5..8.0)).unwrap()
}

// ------------------------------------------------------------ criteria

fn consistency_theorem() -> Outcome {
    let mut r = rng(1);
    let (mut compared, mut matched) = (0usize, 0usize);
    for inst in 0..10_000 {
        let (preds, gt) = random_instance(&mut r, 3);
        let base = if inst % 10 == 0 { MetricParams::default() } else { random_params(&mut r) };
        let o2m = assign_one_to_many(&preds, std::slice::from_ref(&gt), &base, 10).map_err(|e| e.to_string())?;
        let want = o2m.per_gt[0].positives.first().map(|p| p.pred);
        let (dense, _) = oracle_o2m_targets(&preds, &gt, base.alpha, base.beta, 1);
        let oracle = dense.iter().position(|&t| t > 0.0);
        ensure!(want == oracle, "instance {inst}: o2m argmax {want:?} but oracle argmax {oracle:?}");
        for ratio in [0.5, 1.0, 2.0, 3.0] {
            let scaled = base.scaled(ratio).map_err(|e| e.to_string())?;
            let o2o = assign_one_to_one(&preds, std::slice::from_ref(&gt), &scaled).map_err(|e| e.to_string())?;
            let got = o2o.pick(0);
            ensure!(got == want, "instance {inst}, r={ratio}: o2o {got:?} vs o2m {want:?}");
            compared += 1;
            matched += usize::from(got.is_some());
        }
    }
    Ok(format!("{compared} comparisons over 10000 instances x 4 ratios, {matched} with a match, 0 mismatches"))
}

fn supervision_gap_oracle() -> Outcome {
    let mut r = rng(2);
    let (mut checked, mut attempts, mut picks) = (0usize, 0usize, 0usize);
    let mut worst: f64 = 0.0;
    while checked < 10_000 {
        attempts += 1;
        let (preds, gt) = random_instance(&mut r, 3);
        let gts = std::slice::from_ref(&gt);
        let o2m_p = random_params(&mut r);
        let o2o_p = if r.random_bool(0.5) {
            o2m_p.scaled(r.random_range(0.3..3.0)).unwrap()
        } else {
            random_params(&mut r)
        };
        let topk = r.random_range(1..=10);
        let o2m = assign_one_to_many(&preds, gts, &o2m_p, topk).map_err(|e| e.to_string())?;
        let o2o = assign_one_to_one(&preds, gts, &o2o_p).map_err(|e| e.to_string())?;
        let (t_o2m, u_star) = oracle_o2m_targets(&preds, &gt, o2m_p.alpha, o2m_p.beta, topk);
        let Some(pick) = o2o.pick(0) else { continue };
        checked += 1;

        let mut t_o2o = vec![0.0; preds.len()];
        t_o2o[pick] = u_star;
        let want = abs_diff_sum(&t_o2m, &t_o2o);
        let got = detlab_core::supervision_gap(&o2m, &o2o, 0).map_err(|e| e.to_string())?.value;
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= GAP_TOL, "instance {checked}: gap {got} vs oracle {want}");

        // Every possible pick, scored by the oracle and by the library.
        let omega = &o2m.per_gt[0].positives;
        if omega.is_empty() {
            continue;
        }
        let mut gaps = Vec::with_capacity(preds.len());
        for i in 0..preds.len() {
            let mut t = vec![0.0; preds.len()];
            t[i] = u_star;
            let g = abs_diff_sum(&t_o2m, &t);
            let lib = gap_for_pick(&o2m, 0, i, u_star).map_err(|e| e.to_string())?.value;
            ensure!((g - lib).abs() <= GAP_TOL, "pick {i}: gap_for_pick {lib} vs oracle {g}");
            gaps.push(g);
        }
        picks += gaps.len();
        let min = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
        let t_max = t_o2m.iter().cloned().fold(0.0, f64::max);
        let top = omega[0].pred;
        ensure!(gaps[top] <= min + GAP_TOL, "highest-target pick {top} has gap {} > min {min}", gaps[top]);
        for (i, &g) in gaps.iter().enumerate() {
            if g <= min + GAP_TOL {
                ensure!(t_o2m[i] >= t_max - GAP_TOL, "pick {i} reaches the minimum with target {} < {t_max}", t_o2m[i]);
            }
        }
    }
    Ok(format!(
        "{checked} matched instances ({attempts} drawn), max |gap - oracle| = {worst:.1e}, {picks} exhaustive picks"
    ))
}

fn alignment_frequencies() -> Outcome {
    let synth = |profile| {
        generate_synthetic(&SynthParams {
            seed: 3,
            num_images: 40,
            gts_per_image: 8,
            preds_per_gt: 8,
            num_classes: 4,
            profile,
        })
        .map_err(|e| e.to_string())
    };
    let freqs = |rows: &[detlab::commands::FrequencyRow]| rows.iter().map(|f| f.frequency).collect::<Vec<_>>();
    let mut detail = Vec::new();
    for (name, profile) in [("perfect", NoiseProfile::Perfect), ("jitter", NoiseProfile::Jitter)] {
        let ds = synth(profile)?;
        // The one-to-many favourites of different instances must be distinct,
        // otherwise the injective head would have to skip one.
        for img in &ds.images {
            let (preds, gts) = img.to_core().map_err(|e| e.to_string())?;
            let o2m = assign_one_to_many(&preds, &gts, &MetricParams::default(), 10).map_err(|e| e.to_string())?;
            let mut firsts: Vec<usize> = o2m.per_gt.iter().filter_map(|a| a.positives.first().map(|p| p.pred)).collect();
            ensure!(firsts.len() == gts.len(), "{name}: image {} has an instance without positives", img.id);
            firsts.sort_unstable();
            firsts.dedup();
            ensure!(firsts.len() == gts.len(), "{name}: image {} has an injectivity exclusion", img.id);
        }
        let report = run_assign(&ds, &RunConfig::default()).map_err(|e| e.to_string())?;
        let f = freqs(&report.alignment.configured);
        ensure!(f == vec![Some(1.0); 3], "{name}: consistent frequencies {f:?}");
        detail.push(format!("{name} top-1/5/10 = 1"));
    }
    let ds = synth(NoiseProfile::AdversarialOrdering)?;
    let mut cfg = RunConfig::default();
    cfg.o2o.alpha = Some(0.5);
    cfg.o2o.beta = Some(2.0);
    let report = run_assign(&ds, &cfg).map_err(|e| e.to_string())?;
    let f = freqs(&report.alignment.configured);
    let top1 = f[0].ok_or("no instances counted")?;
    ensure!(top1 < 1.0, "adversarial inconsistent top-1 = {top1}");
    let c = freqs(&report.alignment.consistent);
    ensure!(c == vec![Some(1.0); 3], "adversarial consistent frequencies {c:?}");
    detail.push(format!(
        "adversarial (0.5,2) vs (0.5,6): top-1 {top1:.3}, top-5 {:.3}, top-10 {:.3}",
        f[1].unwrap_or(f64::NAN),
        f[2].unwrap_or(f64::NAN)
    ));
    Ok(detail.join("; "))
}

fn half_ceil(v: u64) -> u64 {
    v.div_ceil(2)
}

fn cost_formulas() -> Outcome {
    let mut exact = 0usize;
    let mut odd = 0usize;
    for c in 8..=64u64 {
        let (std_spec, scd_spec) = (
            BlockSpec::StdDownsample { channels: c as usize },
            BlockSpec::ScdDownsample { channels: c as usize },
        );
        for h in 8..=128u64 {
            for w in 8..=128u64 {
                let s = count_cost(&std_spec, h as usize, w as usize).map_err(|e| e.to_string())?;
                let d = count_cost(&scd_spec, h as usize, w as usize).map_err(|e| e.to_string())?;
                let (std_params, scd_params) = (18 * c * c, 2 * c * c + 18 * c);
                ensure!(s.params == std_params && d.params == scd_params, "params at C={c}");
                if h % 2 == 0 && w % 2 == 0 {
                    // 9/2 HWC^2 and 2 HWC^2 + 9/2 HWC, exact because HW is even.
                    let std_macs = 9 * h * w * c * c / 2;
                    let scd_macs = 2 * h * w * c * c + 9 * h * w * c / 2;
                    ensure!(s.macs == std_macs, "std MACs {} != {std_macs} at ({h},{w},{c})", s.macs);
                    ensure!(d.macs == scd_macs, "scd MACs {} != {scd_macs} at ({h},{w},{c})", d.macs);
                    ensure!(s.formula_macs == Some(std_macs) && d.formula_macs == Some(scd_macs), "formula fields at ({h},{w},{c})");
                    ensure!(s.formula_params == Some(std_params) && d.formula_params == Some(scd_params), "formula params at C={c}");
                    exact += 2;
                } else {
                    let out = half_ceil(h) * half_ceil(w);
                    ensure!(s.macs == out * 18 * c * c, "odd std MACs at ({h},{w},{c})");
                    ensure!(d.macs == 2 * h * w * c * c + out * 18 * c, "odd scd MACs at ({h},{w},{c})");
                    ensure!(s.formula_macs.is_none() && d.formula_macs.is_none(), "odd dims carry a formula at ({h},{w})");
                    odd += 2;
                }
            }
        }
    }

    let mut points: Vec<(usize, usize, usize)> = Vec::new();
    for h in [8, 16, 32, 64, 128] {
        for w in [8, 16, 32, 64, 128] {
            for c in [8, 16, 32, 64] {
                points.push((h, w, c));
            }
        }
    }
    let mut r = rng(4);
    for _ in 0..40 {
        points.push((r.random_range(8..=128), r.random_range(8..=128), r.random_range(8..=24)));
    }
    let mut forwards = 0usize;
    let mut total_macs = 0u64;
    for &(h, w, c) in &points {
        for spec in [BlockSpec::StdDownsample { channels: c }, BlockSpec::ScdDownsample { channels: c }] {
            let weights = BlockWeights::init(spec, Activation::Silu, &mut || r.random_range(-0.1..0.1)).map_err(|e| e.to_string())?;
            let x = Tensor::from_fn(&[1, c, h, w], || r.random_range(-1.0..1.0)).map_err(|e| e.to_string())?;
            let mut counter = MacCounter::new();
            let y = forward_block_counted(&x, &spec, &weights, &mut counter).map_err(|e| e.to_string())?;
            ensure!(y.shape() == [1, 2 * c, h.div_ceil(2), w.div_ceil(2)], "output shape {:?}", y.shape());
            let cost = count_cost(&spec, h, w).map_err(|e| e.to_string())?;
            ensure!(counter.macs == cost.macs, "{} at ({h},{w},{c}): forward {} vs count {}", spec.kind_name(), counter.macs, cost.macs);
            let BlockBody::Chain { layers, .. } = &weights.body else {
                return Err("downsample weights are not a plain chain".into());
            };
            let stored: usize = layers.iter().map(|l| l.weight.len()).sum();
            ensure!(stored as u64 == cost.params, "{} params: stored {stored} vs count {}", spec.kind_name(), cost.params);
            forwards += 1;
            total_macs += counter.macs;
        }
    }
    Ok(format!(
        "{exact} even-grid closed-form checks, {odd} odd-grid checks, {forwards} instrumented forwards ({:.2e} MACs)",
        total_macs as f64
    ))
}

fn reparameterization() -> Outcome {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let c = r.random_range(1..=16);
        let (h, w) = (r.random_range(1..=16), r.random_range(1..=16));
        let n = r.random_range(1..=2);
        let k7: Vec<f64> = (0..c * 49).map(|_| normal(&mut r)).collect();
        let k3: Vec<f64> = (0..c * 9).map(|_| normal(&mut r)).collect();
        let b7: Vec<f64> = (0..c).map(|_| normal(&mut r)).collect();
        let b3: Vec<f64> = (0..c).map(|_| normal(&mut r)).collect();
        let x: Vec<f64> = (0..n * c * h * w).map(|_| normal(&mut r)).collect();

        let dual: Vec<f64> = oracle_depthwise(&x, n, c, h, w, &k7, 7, &b7)
            .into_iter()
            .zip(oracle_depthwise(&x, n, c, h, w, &k3, 3, &b3))
            .map(|(a, b)| a + b)
            .collect();
        let t7 = Tensor::new(vec![c, 1, 7, 7], k7).map_err(|e| e.to_string())?;
        let t3 = Tensor::new(vec![c, 1, 3, 3], k3).map_err(|e| e.to_string())?;
        let fused = reparam_fuse_lk(&t7, &t3).map_err(|e| e.to_string())?;
        let bias: Vec<f64> = b7.iter().zip(&b3).map(|(a, b)| a + b).collect();
        let xt = Tensor::new(vec![n, c, h, w], x).map_err(|e| e.to_string())?;
        let y = conv2d_ref(&xt, &fused, Some(&bias), &ConvSpec::depthwise(c, 7, 1)).map_err(|e| e.to_string())?;
        let d = y.data().iter().zip(&dual).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
        ensure!(d <= REPARAM_TOL, "kernel case {case} (C={c}, {h}x{w}): max-abs {d:e}");

        // The same fusion inside a full large-kernel block.
        let spec = BlockSpec::LkCib { channels: c };
        let dual_w = BlockWeights::init(spec, Activation::Silu, &mut || r.random_range(-0.5..0.5)).map_err(|e| e.to_string())?;
        let fused_w = dual_w.reparameterize().map_err(|e| e.to_string())?;
        ensure!(fused_w != dual_w, "reparameterize left the block unchanged");
        let a = forward_block(&xt, &spec, &dual_w).map_err(|e| e.to_string())?;
        let b = forward_block(&xt, &spec, &fused_w).map_err(|e| e.to_string())?;
        let d = a.max_abs_diff(&b).map_err(|e| e.to_string())?;
        worst = worst.max(d);
        ensure!(d <= REPARAM_TOL, "block case {case} (C={c}, {h}x{w}): max-abs {d:e}");
    }
    Ok(format!("1000 kernel cases + 1000 block cases, worst max-abs {worst:.1e}"))
}

fn nms_oracle() -> Outcome {
    let mut r = rng(6);
    let (mut kept_total, mut selected_total) = (0usize, 0usize);
    for scene in 0..1000 {
        let n = r.random_range(0..=200);
        let nc = r.random_range(1..=4);
        let centres: Vec<(f64, f64)> = (0..r.random_range(1..=6)).map(|_| (r.random_range(0.0..200.0), r.random_range(0.0..200.0))).collect();
        let preds: Vec<Prediction> = (0..n)
            .map(|_| {
                let (cx, cy) = centres[r.random_range(0..centres.len())];
                let (x, y) = (cx + r.random_range(-10.0..10.0), cy + r.random_range(-10.0..10.0));
                let (w, h) = (r.random_range(5.0..40.0), r.random_range(5.0..40.0));
                let quantized = r.random_bool(0.3);
                let scores = (0..nc)
                    .map(|_| {
                        let s: f64 = r.random();
                        if quantized { (s * 20.0).floor() / 20.0 } else { s }
                    })
                    .collect();
                Prediction::new(
                    AnchorPoint::new(x, y, 8.0).unwrap(),
                    BoundingBox::new(x - w / 2.0, y - h / 2.0, x + w / 2.0, y + h / 2.0).unwrap(),
                    scores,
                )
                .unwrap()
            })
            .collect();
        let cfg = NmsConfig {
            iou_thresh: r.random_range(0.2..0.9),
            score_thresh: if r.random_bool(0.3) { 0.0 } else { r.random_range(0.0..0.6) },
            max_det: r.random_range(1..=300),
            class_agnostic: r.random_bool(0.3),
        };
        let dets = Detection::from_predictions(&preds);
        let got = nms(&dets, &cfg);
        let want = oracle_nms(&dets, &cfg);
        ensure!(got == want, "scene {scene}: nms {got:?} vs oracle {want:?}");
        kept_total += got.len();

        let sel = SelectConfig {
            score_thresh: cfg.score_thresh,
            max_det: cfg.max_det,
        };
        let got: Vec<(usize, usize, f64)> = nms_free_select(&preds, &sel).iter().map(|d| (d.source_index, d.class_id, d.score)).collect();
        let want = oracle_select(&preds, &sel);
        ensure!(got == want, "scene {scene}: selection differs from the full-sort oracle");
        selected_total += got.len();
    }
    Ok(format!("1000 scenes, {kept_total} kept by NMS, {selected_total} selected, all equal to the oracles"))
}

fn table_score(stages: &[u32]) -> Option<f64> {
    let mut s = stages.to_vec();
    s.sort_unstable();
    match s.as_slice() {
        [] => Some(44.4),
        [8] => Some(44.5),
        [4, 8] => Some(44.5),
        [4, 7, 8] => Some(44.3),
        _ => None,
    }
}

fn algorithm_replay() -> Outcome {
    let order = [8, 4, 7, 3, 5, 1, 6, 2];
    let (archive, manifest) = planted_archive(7, &planted_in_order(&order, 16, 8, 3)).map_err(|e| e.to_string())?;
    let ranks = stage_ranks(&archive, &manifest, 0.5).map_err(|e| e.to_string())?;
    let mut calls = 0usize;
    let baseline = table_score(&[]).unwrap();
    let trace = rank_guided_allocate(&ranks, baseline, |s: &[u32]| {
        calls += 1;
        table_score(s).ok_or_else(|| format!("no score for {s:?}"))
    })?;
    ensure!(trace.visit_order == order, "visit order {:?}", trace.visit_order);
    let mut fin = trace.final_stages.clone();
    fin.sort_unstable();
    ensure!(fin == [4, 8], "final set {:?}", trace.final_stages);
    ensure!(calls == 3 && trace.evaluator_calls() == 3, "{calls} evaluator calls");
    let accepted: Vec<bool> = trace.steps.iter().map(|s| s.accepted).collect();
    ensure!(accepted == [true, true, false], "steps {accepted:?}");

    // The same replay through the file-level evaluator with the baseline
    // read from the empty set.
    let table: Vec<TableEntry> = [(vec![], 44.4), (vec![8], 44.5), (vec![8, 4], 44.5), (vec![8, 4, 7], 44.3)]
        .into_iter()
        .map(|(stages, score)| TableEntry { stages, score })
        .collect();
    let ev = Evaluator::Table(TableEvaluator::new(&table).map_err(|e| e.to_string())?);
    let t2 = run_allocate(&ranks, None, &ev).map_err(|e| e.to_string())?;
    ensure!(t2 == trace, "table evaluator trace differs");
    Ok(format!("visit order {:?}, final {{8, 4}}, {calls} evaluator calls", trace.visit_order))
}

fn rank_properties() -> Outcome {
    let mut r = rng(8);
    let mut rank_hist = BTreeMap::new();
    for case in 0..1000 {
        let (m, n) = (r.random_range(1..=64), r.random_range(1..=64));
        let data: Vec<f64> = if r.random_bool(0.5) {
            (0..m * n).map(|_| normal(&mut r)).collect()
        } else {
            // low-rank plus small noise
            let k = r.random_range(1..=m.min(n));
            let a: Vec<f64> = (0..m * k).map(|_| normal(&mut r)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| normal(&mut r)).collect();
            matmul(&a, &b, m, k, n).into_iter().map(|v| v + 1e-3 * normal(&mut r)).collect()
        };
        let base = numerical_rank(&Matrix::new(m, n, data.clone()).unwrap(), 0.5).map_err(|e| e.to_string())?;
        let mag = 10f64.powf(r.random_range(-3.0..3.0));
        let c = if r.random_bool(0.5) { mag } else { -mag };
        let scaled = numerical_rank(&Matrix::new(m, n, data.iter().map(|v| v * c).collect()).unwrap(), 0.5).map_err(|e| e.to_string())?;
        ensure!(scaled == base, "case {case}: rank({c:e} W) = {scaled} vs {base}");
        let ql = householder_orthogonal(m, &mut r);
        let left = numerical_rank(&Matrix::new(m, n, matmul(&ql, &data, m, m, n)).unwrap(), 0.5).map_err(|e| e.to_string())?;
        ensure!(left == base, "case {case}: rank(QW) = {left} vs {base}");
        let qr = householder_orthogonal(n, &mut r);
        let right = numerical_rank(&Matrix::new(m, n, matmul(&data, &qr, m, n, n)).unwrap(), 0.5).map_err(|e| e.to_string())?;
        ensure!(right == base, "case {case}: rank(WQ) = {right} vs {base}");
        *rank_hist.entry(base.min(9)).or_insert(0usize) += 1;
    }

    // Planted spectra built here: W = U diag(sigma) V^T with `rank` values
    // above half the largest and the rest below it.
    let mut planted = 0usize;
    let mut archive = TensorArchive::new();
    let mut manifest = Vec::new();
    let mut want = BTreeMap::new();
    for id in 0..200u32 {
        let c_out = r.random_range(1..=32);
        let c_in = r.random_range(1..=12);
        let k = if r.random_bool(0.5) { 1 } else { 3 };
        let cols = c_in * k * k;
        let full = c_out.min(cols);
        let rank = r.random_range(1..=full);
        let sigma: Vec<f64> = (0..full)
            .map(|i| match i {
                0 => 1.0,
                i if i < rank => r.random_range(0.55..1.0),
                _ => r.random_range(0.0..0.45),
            })
            .collect();
        let u = householder_orthogonal(c_out, &mut r);
        let v = householder_orthogonal(cols, &mut r);
        let mut w = vec![0.0; c_out * cols];
        for (i, s) in sigma.iter().enumerate() {
            for a in 0..c_out {
                for b in 0..cols {
                    w[a * cols + b] += s * u[a * c_out + i] * v[b * cols + i];
                }
            }
        }
        let name = format!("s{id}.w");
        archive.insert(name.clone(), Tensor::new(vec![c_out, c_in, k, k], w).unwrap());
        manifest.push(StageEntry { stage_id: id, weight: name, c_out });
        want.insert(id, rank);
        planted += 1;
    }
    let report = stage_ranks(&archive, &manifest, 0.5).map_err(|e| e.to_string())?;
    for s in &report.stages {
        ensure!(want[&s.stage_id] == s.numerical_rank, "stage {}: rank {} vs planted {}", s.stage_id, s.numerical_rank, want[&s.stage_id]);
    }

    // The generator used by the CLI.
    for seed in 0..20 {
        let stages = planted_in_order(&[5, 2, 9, 1, 7, 3], 24, 6, 3);
        let (archive, manifest) = planted_archive(seed, &stages).map_err(|e| e.to_string())?;
        let report = stage_ranks(&archive, &manifest, 0.5).map_err(|e| e.to_string())?;
        for st in &stages {
            let got = report.stages.iter().find(|s| s.stage_id == st.stage_id).map(|s| s.numerical_rank);
            ensure!(got == Some(st.rank), "generated stage {}: {got:?} vs {}", st.stage_id, st.rank);
        }
        planted += stages.len();
    }
    Ok(format!("1000 matrices (rank histogram {rank_hist:?}), {planted} planted stages reproduced"))
}

fn benchmark_ordering() -> Outcome {
    let preds = duplicate_scene(9, 10_000, 80);
    let report = run_bench(std::slice::from_ref(&preds), &RunConfig::default(), 5).map_err(|e| e.to_string())?;
    let median = |path: &str| report.rows.iter().find(|row| row.path == path).map(|row| row.median_us);
    let (nms_us, sel_us) = (median(NMS_PATH).ok_or("no nms row")?, median(SELECT_PATH).ok_or("no selection row")?);
    ensure!(nms_us > sel_us, "NMS median {nms_us} us does not exceed selection median {sel_us} us");

    let cfg = RunConfig::default();
    let first_nms = nms(&Detection::from_predictions(&preds), &cfg.nms_config());
    let first_sel: Vec<usize> = nms_free_select(&preds, &cfg.select_config()).iter().map(|d| d.source_index).collect();
    for _ in 0..5 {
        ensure!(nms(&Detection::from_predictions(&preds), &cfg.nms_config()) == first_nms, "NMS output changed between repeats");
        let s: Vec<usize> = nms_free_select(&preds, &cfg.select_config()).iter().map(|d| d.source_index).collect();
        ensure!(s == first_sel, "selection output changed between repeats");
    }
    ensure!(report.nms_outputs == vec![first_nms.clone()], "benchmark NMS output differs");
    ensure!(report.select_outputs == vec![first_sel.clone()], "benchmark selection output differs");
    Ok(format!(
        "NMS median {nms_us:.0} us > selection median {sel_us:.0} us; kept {} / selected {} identical over 5 repeats",
        first_nms.len(),
        first_sel.len()
    ))
}

// ------------------------------------------------------- determinism

const BIN: &str = env!("CARGO_BIN_EXE_detlab");

fn cli(dir: &Path, workers: &str, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("DETLAB_WORKERS", workers)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "detlab {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    Ok(out.stdout)
}

fn write_fixtures(dir: &Path) -> Result<(), String> {
    let io = |e: std::io::Error| e.to_string();
    fs::write(
        dir.join("specs.json"),
        r#"[{"kind": "std_downsample", "channels": 32, "h": 64, "w": 64},
            {"kind": "scd_downsample", "channels": 32, "h": 63, "w": 64},
            {"kind": "conv", "c_in": 8, "c_out": 16, "kernel": 3, "stride": 1, "padding": 1, "groups": 1, "h": 20, "w": 20},
            {"kind": "cls_head_standard", "channels": 64, "num_classes": 80, "h": 20, "w": 20},
            {"kind": "cls_head_light", "channels": 64, "num_classes": 80, "h": 20, "w": 20},
            {"kind": "irb", "channels": 16, "h": 16, "w": 16},
            {"kind": "irb_dw", "channels": 16, "h": 16, "w": 16},
            {"kind": "cib", "channels": 16, "h": 16, "w": 16},
            {"kind": "lk_cib", "channels": 16, "h": 16, "w": 16},
            {"kind": "psa", "channels": 128, "n_psa": 1, "h": 20, "w": 20}]"#,
    )
    .map_err(io)?;
    fs::write(
        dir.join("table.json"),
        r#"[{"stages": [], "score": 44.4}, {"stages": [8], "score": 44.5},
            {"stages": [8, 4], "score": 44.5}, {"stages": [8, 4, 7], "score": 44.3}]"#,
    )
    .map_err(io)?;
    let mut r = rng(10);
    let mut lk = TensorArchive::new();
    let mut t = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| normal(&mut r)).collect()).unwrap()
    };
    lk.insert("blk.dw7.weight", t(vec![4, 1, 7, 7]));
    lk.insert("blk.dw3.weight", t(vec![4, 1, 3, 3]));
    lk.insert("blk.dw3.bias", t(vec![4]));
    lk.insert("head.conv.weight", t(vec![2, 4, 1, 1]));
    write_archive(&lk, &dir.join("lk.json"), Layout::Raw).map_err(|e| e.to_string())
}

fn session(dir: &Path, workers: &str) -> Result<BTreeMap<String, Vec<u8>>, String> {
    write_fixtures(dir)?;
    let run = |args: &[&str]| cli(dir, workers, args);
    run(&["--seed", "11", "gen", "dataset", "--images", "12", "--profile", "jitter", "--out", "jitter.json"])?;
    run(&["--seed", "12", "gen", "dataset", "--images", "12", "--profile", "adversarial-ordering", "--out", "adv.json"])?;
    run(&["assign", "--dataset", "jitter.json", "--out", "assign.json"])?;
    run(&["assign", "--dataset", "adv.json", "--o2o-beta", "2", "--out", "assign_adv.json"])?;
    run(&["gap", "--dataset", "adv.json", "--out", "gap.json"])?;
    run(&["cost", "--specs", "specs.json", "--out", "cost.csv"])?;
    run(&["--seed", "3", "gen", "planted", "--order", "8,4,7,3,5,1,6,2", "--out-archive", "w.json", "--out-stages", "stages.json"])?;
    run(&["rank", "--archive", "w.json", "--stages", "stages.json", "--out", "ranks.json", "--csv", "ranks.csv"])?;
    run(&["allocate", "--ranks", "ranks.json", "--table", "table.json", "--out", "trace.json"])?;
    run(&["fuse", "--archive", "lk.json", "--out", "fused.json"])?;
    run(&["fuse", "--archive", "lk.json", "--out", "fused_inline.json", "--inline"])?;
    run(&["nms-bench", "--dataset", "jitter.json", "--out", "bench.csv", "--outputs", "kept.json"])?;
    let stdout = run(&["assign", "--dataset", "adv.json"])?;
    ensure!(!stdout.is_empty(), "assign wrote nothing to stdout");

    let mut files = BTreeMap::new();
    files.insert("<stdout assign>".to_string(), stdout);
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let name = entry.file_name().to_string_lossy().into_owned();
        // timing columns are wall-clock measurements
        if name == "bench.csv" {
            continue;
        }
        files.insert(name, fs::read(entry.path()).map_err(|e| e.to_string())?);
    }
    Ok(files)
}

fn reparse<T>(dir: &Path, name: &str) -> Result<(), String>
where
    T: serde::Serialize + serde::de::DeserializeOwned + PartialEq,
{
    let path = dir.join(name);
    let text = fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let value: T = parse_str(&text, &path).map_err(|e| e.to_string())?;
    let again = to_json(&value).map_err(|e| e.to_string())?;
    ensure!(again == text, "{name} does not re-serialize byte-identically");
    let back: T = parse_str(&again, &path).map_err(|e| e.to_string())?;
    ensure!(back == value, "{name} does not parse back to the same value");
    Ok(())
}

fn determinism_and_round_trip() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut sessions = Vec::new();
    for (i, workers) in ["1", "1", "3", "3"].iter().enumerate() {
        let dir = tmp.path().join(format!("run{i}"));
        fs::create_dir(&dir).map_err(|e| e.to_string())?;
        sessions.push((workers, session(&dir, workers)?));
    }
    let (_, first) = &sessions[0];
    for (workers, files) in &sessions[1..] {
        ensure!(files.keys().eq(first.keys()), "file sets differ with {workers} workers");
        for (name, bytes) in files {
            ensure!(bytes == &first[name], "{name} differs between runs ({workers} workers)");
        }
    }

    let dir = tmp.path().join("run0");
    for name in ["jitter.json", "adv.json"] {
        let text = fs::read_to_string(dir.join(name)).map_err(|e| e.to_string())?;
        let ds = DatasetFile::parse(&text, Path::new(name)).map_err(|e| e.to_string())?;
        ensure!(ds.to_json().map_err(|e| e.to_string())? == text, "{name} round-trip");
    }
    reparse::<AssignReport>(&dir, "assign.json")?;
    reparse::<AssignReport>(&dir, "assign_adv.json")?;
    reparse::<GapFileReport>(&dir, "gap.json")?;
    reparse::<RankReport>(&dir, "ranks.json")?;
    reparse::<AllocationTrace>(&dir, "trace.json")?;
    reparse::<detlab::commands::StageManifest>(&dir, "stages.json")?;

    let mut rows = Vec::new();
    let mut rdr = csv::Reader::from_path(dir.join("cost.csv")).map_err(|e| e.to_string())?;
    for row in rdr.deserialize::<CostRow>() {
        rows.push(row.map_err(|e| e.to_string())?);
    }
    let mut buf = Vec::new();
    detlab::cost_table::write_csv(&rows, &mut buf).map_err(|e| e.to_string())?;
    ensure!(buf == first["cost.csv"], "cost CSV round-trip");

    let mut cfg = RunConfig::default();
    cfg.o2o.beta = Some(2.0);
    cfg.workers = Some(3);
    cfg.allocate.evaluator_command = Some("echo 1".into());
    let text = to_json(&cfg).map_err(|e| e.to_string())?;
    ensure!(parse_str::<RunConfig>(&text, Path::new("c.json")).map_err(|e| e.to_string())? == cfg, "config round-trip");

    for name in ["w.json", "fused.json", "fused_inline.json", "lk.json"] {
        let a = read_archive(&dir.join(name)).map_err(|e| e.to_string())?;
        for layout in [Layout::Raw, Layout::Inline] {
            let p = tmp.path().join("copy.json");
            write_archive(&a, &p, layout).map_err(|e| e.to_string())?;
            ensure!(read_archive(&p).map_err(|e| e.to_string())? == a, "{name} archive round-trip ({layout:?})");
        }
    }
    let n = first.len();
    Ok(format!("{n} outputs byte-identical over 4 runs (workers 1 and 3); datasets, reports, traces, CSV, config and archives round-trip"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("consistent-metric argmax", consistency_theorem, Some(Duration::from_secs(10))),
        ("supervision gap vs oracle", supervision_gap_oracle, None),
        ("alignment frequencies", alignment_frequencies, None),
        ("downsampling cost formulas", cost_formulas, Some(Duration::from_secs(60))),
        ("large-kernel reparameterization", reparameterization, None),
        ("NMS and selection oracles", nms_oracle, None),
        ("rank-guided allocation replay", algorithm_replay, None),
        ("numerical rank properties", rank_properties, None),
        ("post-processing benchmark", benchmark_ordering, None),
        ("determinism and round-trip", determinism_and_round_trip, None),
    ];
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(l)) if took >= *l => Err(format!("took {took:.2?}, limit {l:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{:.2} s]", i + 1, took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{:.2} s]", i + 1, took.as_secs_f64());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
