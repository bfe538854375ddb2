//! Wall-clock comparison of greedy NMS against NMS-free selection.
//!
//! Only the post-processing call is timed. Images run sequentially inside
//! the timed region.

use std::hint::black_box;
use std::time::Instant;

use detlab_core::{nms, nms_free_select, AnchorPoint, BoundingBox, Detection, NmsConfig, Prediction, SelectConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_REPEATS: usize = 3;
pub const NMS_PATH: &str = "nms";
pub const SELECT_PATH: &str = "nms_free";

/// One CSV row; times are per image, in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub path: String,
    pub images: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p99_us: f64,
}

/// Source indices kept per image, in output order.
pub type PathOutputs = Vec<Vec<usize>>;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<TimingRow>,
    pub nms_outputs: PathOutputs,
    pub select_outputs: PathOutputs,
}

impl TimingRow {
    fn from_samples(path: &str, images: usize, mut samples: Vec<f64>) -> Self {
        samples.sort_by(f64::total_cmp);
        let n = samples.len();
        let (mean_us, median_us, p99_us) = if n == 0 {
            (0.0, 0.0, 0.0)
        } else {
            let median = if n % 2 == 1 {
                samples[n / 2]
            } else {
                (samples[n / 2 - 1] + samples[n / 2]) / 2.0
            };
            // nearest-rank percentile
            let rank = ((0.99 * n as f64).ceil() as usize).clamp(1, n);
            (samples.iter().sum::<f64>() / n as f64, median, samples[rank - 1])
        };
        TimingRow {
            path: path.to_string(),
            images,
            mean_us,
            median_us,
            p99_us,
        }
    }
}

fn nms_path(preds: &[Prediction], cfg: &NmsConfig) -> Vec<usize> {
    let dets = Detection::from_predictions(preds);
    nms(&dets, cfg).into_iter().map(|i| dets[i].source_index).collect()
}

fn select_path(preds: &[Prediction], cfg: &SelectConfig) -> Vec<usize> {
    nms_free_select(preds, cfg).into_iter().map(|d| d.source_index).collect()
}

fn time_path<F: Fn(&[Prediction]) -> Vec<usize>>(
    images: &[Vec<Prediction>],
    repeats: usize,
    run: F,
) -> Result<(Vec<f64>, PathOutputs)> {
    let mut samples = Vec::with_capacity(images.len() * repeats);
    let mut first: Option<PathOutputs> = None;
    for rep in 0..repeats {
        let mut outputs = Vec::with_capacity(images.len());
        for preds in images {
            let start = Instant::now();
            let kept = black_box(run(black_box(preds)));
            samples.push(start.elapsed().as_secs_f64() * 1e6);
            outputs.push(kept);
        }
        match &first {
            None => first = Some(outputs),
            Some(f) if *f != outputs => {
                return Err(Error::invariant(format!("repeat {rep} produced different detections")))
            }
            Some(_) => {}
        }
    }
    Ok((samples, first.unwrap_or_default()))
}

pub fn bench_postprocess(
    images: &[Vec<Prediction>],
    nms_cfg: &NmsConfig,
    select_cfg: &SelectConfig,
    repeats: usize,
) -> Result<BenchReport> {
    if repeats < MIN_REPEATS {
        return Err(Error::config(format!("repeats must be at least {MIN_REPEATS}")));
    }
    let (nms_samples, nms_outputs) = time_path(images, repeats, |p| nms_path(p, nms_cfg))?;
    let (sel_samples, select_outputs) = time_path(images, repeats, |p| select_path(p, select_cfg))?;
    Ok(BenchReport {
        rows: vec![
            TimingRow::from_samples(NMS_PATH, images.len(), nms_samples),
            TimingRow::from_samples(SELECT_PATH, images.len(), sel_samples),
        ],
        nms_outputs,
        select_outputs,
    })
}

/// `n` near-identical boxes spread round-robin over `num_classes` classes,
/// so class-aware NMS keeps one box per class and scans the whole list for
/// each of them.
pub fn duplicate_scene(seed: u64, n: usize, num_classes: usize) -> Vec<Prediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let d = rng.random_range(-0.5..0.5);
            let bbox = BoundingBox::new(100.0 + d, 100.0 + d, 200.0 + d, 200.0 + d).expect("ordered box");
            let mut scores = vec![0.0; num_classes.max(1)];
            scores[i % num_classes.max(1)] = rng.random_range(0.05..1.0);
            Prediction::new(AnchorPoint::new(150.0, 150.0, 8.0).expect("positive stride"), bbox, scores)
                .expect("scores in range")
        })
        .collect()
}

pub fn write_csv<W: std::io::Write>(rows: &[TimingRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::invariant(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(std::path::Path::new("<csv>"), e))
}
