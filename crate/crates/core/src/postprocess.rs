//! Greedy NMS and NMS-free top-k selection.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::assignment::Prediction;
use crate::geometry::{iou, BoundingBox};

/// Output record shared by both post-processing paths.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
    pub class_id: usize,
    /// Index of the prediction this detection came from.
    pub source_index: usize,
}

impl Detection {
    /// One detection per prediction, scored by its best class.
    pub fn from_predictions(preds: &[Prediction]) -> Vec<Detection> {
        preds
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (class_id, score) = p.best_class();
                Detection {
                    bbox: p.bbox,
                    score,
                    class_id,
                    source_index: i,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NmsConfig {
    pub iou_thresh: f64,
    pub score_thresh: f64,
    pub max_det: usize,
    pub class_agnostic: bool,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            iou_thresh: 0.7,
            score_thresh: 0.001,
            max_det: 300,
            class_agnostic: false,
        }
    }
}

impl NmsConfig {
    pub fn is_valid(&self) -> bool {
        self.iou_thresh > 0.0
            && self.iou_thresh < 1.0
            && (0.0..=1.0).contains(&self.score_thresh)
            && self.max_det > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SelectConfig {
    pub score_thresh: f64,
    pub max_det: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            score_thresh: 0.001,
            max_det: 300,
        }
    }
}

fn score_desc(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Greedy non-maximum suppression.
///
/// Returns indices into `dets` of the kept detections, highest score first.
/// Ties in score go to the lower index.
pub fn nms(dets: &[Detection], config: &NmsConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].score >= config.score_thresh)
        .collect();
    order.sort_by(|&a, &b| score_desc((a, dets[a].score), (b, dets[b].score)));

    let mut keep = Vec::new();
    let mut suppressed = vec![false; order.len()];
    for i in 0..order.len() {
        if keep.len() >= config.max_det {
            break;
        }
        if suppressed[i] {
            continue;
        }
        let top = &dets[order[i]];
        keep.push(order[i]);
        for j in (i + 1)..order.len() {
            if suppressed[j] {
                continue;
            }
            let other = &dets[order[j]];
            if !config.class_agnostic && other.class_id != top.class_id {
                continue;
            }
            if iou(&top.bbox, &other.bbox) > config.iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// NMS-free selection: every prediction scored by its best class, thresholded
/// and truncated to the top `max_det`. No suppression is applied.
pub fn nms_free_select(preds: &[Prediction], config: &SelectConfig) -> Vec<Detection> {
    let mut dets: Vec<Detection> = Detection::from_predictions(preds)
        .into_iter()
        .filter(|d| d.score >= config.score_thresh)
        .collect();
    dets.sort_by(|a, b| score_desc((a.source_index, a.score), (b.source_index, b.score)));
    dets.truncate(config.max_det);
    dets
}
