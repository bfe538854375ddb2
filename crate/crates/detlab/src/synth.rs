//! Seeded synthetic datasets and planted-spectrum weight archives.

use detlab_core::rank::{Matrix, StageEntry};
use detlab_core::{iou, BoundingBox, Tensor, TensorArchive};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetFile, GtRecord, ImageRecord, PredRecord};
use crate::error::{Error, Result};

/// Side of the square cell each ground truth is drawn in.
const CELL: f64 = 80.0;
const STRIDE: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseProfile {
    /// One exact prediction with score 1 per instance, plus jittered ones.
    Perfect,
    /// Jittered boxes whose class score loosely tracks their IoU.
    Jitter,
    /// Every instance gets a high-score/low-IoU and a low-score/high-IoU
    /// prediction whose order flips between `beta = 6` and `beta = 2`.
    AdversarialOrdering,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub seed: u64,
    pub num_images: usize,
    pub gts_per_image: usize,
    pub preds_per_gt: usize,
    pub num_classes: usize,
    pub profile: NoiseProfile,
}

/// Shrinking the width of `gt` by `u` gives a contained box with IoU `u`.
const FLIP_PAIR: [(f64, f64); 2] = [(0.9, 0.7), (0.1, 0.95)];

pub fn generate_synthetic(p: &SynthParams) -> Result<DatasetFile> {
    if p.num_images == 0 || p.gts_per_image == 0 || p.preds_per_gt == 0 || p.num_classes == 0 {
        return Err(Error::config("image, instance, prediction and class counts must be positive"));
    }
    if p.profile == NoiseProfile::AdversarialOrdering && p.preds_per_gt < FLIP_PAIR.len() {
        return Err(Error::config("adversarial-ordering needs at least 2 predictions per instance"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let cols = (p.gts_per_image as f64).sqrt().ceil() as usize;
    let images = (0..p.num_images)
        .map(|id| {
            let mut img = ImageRecord {
                id: id as u64,
                gts: Vec::with_capacity(p.gts_per_image),
                preds: Vec::with_capacity(p.gts_per_image * p.preds_per_gt),
            };
            for g in 0..p.gts_per_image {
                let (cx, cy) = ((g % cols) as f64 * CELL, (g / cols) as f64 * CELL);
                let w = rng.random_range(24.0..64.0);
                let h = rng.random_range(24.0..64.0);
                let x0 = cx + rng.random_range(8.0..(CELL - 8.0 - w).max(8.5));
                let y0 = cy + rng.random_range(8.0..(CELL - 8.0 - h).max(8.5));
                let gt = BoundingBox::new(x0, y0, x0 + w, y0 + h).map_err(Error::invariant)?;
                let class = rng.random_range(0..p.num_classes);
                img.gts.push(GtRecord {
                    bbox: gt.to_array(),
                    class,
                });
                let mut preds = match p.profile {
                    NoiseProfile::Perfect => perfect_preds(&mut rng, &gt, class, p),
                    NoiseProfile::Jitter => (0..p.preds_per_gt).map(|_| jittered(&mut rng, &gt, class, p.num_classes)).collect(),
                    NoiseProfile::AdversarialOrdering => adversarial_preds(&mut rng, &gt, class, p),
                };
                preds.shuffle(&mut rng);
                img.preds.extend(preds);
            }
            Ok(img)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = DatasetFile::empty(p.num_classes);
    ds.images = images;
    Ok(ds)
}

fn scores(rng: &mut ChaCha8Rng, num_classes: usize, class: usize, p: f64, others_max: f64) -> Vec<f64> {
    (0..num_classes)
        .map(|c| if c == class { p } else { rng.random_range(0.0..others_max) })
        .collect()
}

fn centered(gt: &BoundingBox) -> [f64; 2] {
    [(gt.x_min + gt.x_max) / 2.0, (gt.y_min + gt.y_max) / 2.0]
}

fn jittered(rng: &mut ChaCha8Rng, gt: &BoundingBox, class: usize, num_classes: usize) -> PredRecord {
    let n = Normal::new(0.0, 0.12).expect("valid sigma");
    let (w, h) = (gt.width(), gt.height());
    let x0 = gt.x_min + n.sample(rng) * w;
    let y0 = gt.y_min + n.sample(rng) * h;
    let x1 = (gt.x_max + n.sample(rng) * w).max(x0 + 1.0);
    let y1 = (gt.y_max + n.sample(rng) * h).max(y0 + 1.0);
    let bbox = BoundingBox::new(x0, y0, x1, y1).expect("finite and ordered");
    let u = iou(&bbox, gt);
    let p = (0.1 + 0.8 * u + n.sample(rng)).clamp(0.0, 0.99);
    PredRecord {
        anchor: centered(&bbox),
        stride: STRIDE,
        bbox: bbox.to_array(),
        scores: scores(rng, num_classes, class, p, 0.2),
    }
}

fn shrunk(gt: &BoundingBox, u: f64) -> [f64; 4] {
    [gt.x_min, gt.y_min, gt.x_min + u * gt.width(), gt.y_max]
}

fn perfect_preds(rng: &mut ChaCha8Rng, gt: &BoundingBox, class: usize, p: &SynthParams) -> Vec<PredRecord> {
    let mut out = vec![PredRecord {
        anchor: centered(gt),
        stride: STRIDE,
        bbox: gt.to_array(),
        scores: scores(rng, p.num_classes, class, 1.0, 0.0001),
    }];
    out.extend((1..p.preds_per_gt).map(|_| jittered(rng, gt, class, p.num_classes)));
    out
}

fn adversarial_preds(rng: &mut ChaCha8Rng, gt: &BoundingBox, class: usize, p: &SynthParams) -> Vec<PredRecord> {
    let mut out: Vec<PredRecord> = FLIP_PAIR
        .iter()
        .map(|&(score, u)| PredRecord {
            anchor: centered(gt),
            stride: STRIDE,
            bbox: shrunk(gt, u),
            scores: scores(rng, p.num_classes, class, score, 0.05),
        })
        .collect();
    // weak fillers can never outrank the pair under either exponent set
    out.extend((FLIP_PAIR.len()..p.preds_per_gt).map(|_| {
        let u = rng.random_range(0.3..0.6);
        let score = rng.random_range(0.05..0.3);
        PredRecord {
            anchor: centered(gt),
            stride: STRIDE,
            bbox: shrunk(gt, u),
            scores: scores(rng, p.num_classes, class, score, 0.05),
        }
    }));
    out
}

/// One stage whose last convolution gets exactly `rank` singular values
/// above half the largest one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedStage {
    pub stage_id: u32,
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub rank: usize,
}

/// Stages whose planted ranks increase strictly along `order`, so that the
/// rank-guided visit order reproduces it.
pub fn planted_in_order(order: &[u32], c_out: usize, c_in: usize, kernel: usize) -> Vec<PlantedStage> {
    let n = order.len();
    order
        .iter()
        .enumerate()
        .map(|(i, &stage_id)| PlantedStage {
            stage_id,
            c_out,
            c_in,
            kernel,
            rank: ((i + 1) * c_out / n).max(1),
        })
        .collect()
}

pub fn planted_weight_name(stage_id: u32) -> String {
    format!("stage{stage_id}.last_conv.weight")
}

pub fn planted_archive(seed: u64, stages: &[PlantedStage]) -> Result<(TensorArchive, Vec<StageEntry>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut archive = TensorArchive::new();
    let mut manifest = Vec::with_capacity(stages.len());
    for s in stages {
        let cols = s.c_in * s.kernel * s.kernel;
        let m = s.c_out.min(cols);
        if s.rank == 0 || s.rank > m {
            return Err(Error::config(format!(
                "stage {}: planted rank {} outside 1..={m}",
                s.stage_id, s.rank
            )));
        }
        let sigma: Vec<f64> = (0..m)
            .map(|i| match i {
                0 => 1.0,
                i if i < s.rank => rng.random_range(0.6..1.0),
                _ => rng.random_range(0.05..0.4),
            })
            .collect();
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        let u = Matrix::random_orthonormal(s.c_out, m, &mut normal).map_err(Error::invariant)?;
        let v = Matrix::random_orthonormal(cols, m, &mut normal).map_err(Error::invariant)?;
        let w = u
            .matmul(&Matrix::diag(&sigma))
            .and_then(|us| us.matmul(&v.transpose()))
            .map_err(Error::invariant)?;
        let name = planted_weight_name(s.stage_id);
        let t = Tensor::new(vec![s.c_out, s.c_in, s.kernel, s.kernel], w.data().to_vec()).map_err(Error::invariant)?;
        archive.insert(name.clone(), t);
        manifest.push(StageEntry {
            stage_id: s.stage_id,
            weight: name,
            c_out: s.c_out,
        });
    }
    Ok((archive, manifest))
}
