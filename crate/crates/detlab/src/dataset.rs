//! Dataset JSON: ground truths and dense predictions per image.

use std::collections::BTreeSet;
use std::path::Path;

use detlab_core::{AnchorPoint, BoundingBox, GroundTruth, Prediction};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;

/// The only supported frame: corner boxes `[x_min, y_min, x_max, y_max]` and
/// anchor points in the same pixel coordinates.
pub const COORDINATE_FRAME: &str = "xyxy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub metadata: Metadata,
    pub images: Vec<ImageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub num_classes: usize,
    #[serde(default = "default_frame")]
    pub coordinate_frame: String,
}

fn default_frame() -> String {
    COORDINATE_FRAME.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: u64,
    #[serde(default)]
    pub gts: Vec<GtRecord>,
    #[serde(default)]
    pub preds: Vec<PredRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredRecord {
    pub anchor: [f64; 2],
    pub stride: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub scores: Vec<f64>,
}

impl DatasetFile {
    pub fn empty(num_classes: usize) -> Self {
        DatasetFile {
            metadata: Metadata {
                num_classes,
                coordinate_frame: default_frame(),
            },
            images: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&json::read_text(path)?, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let ds: DatasetFile = json::parse_str(text, path)?;
        ds.validate().map_err(|(field, message)| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            column: 0,
            field,
            message,
        })?;
        Ok(ds)
    }

    /// Semantic checks; the error carries the JSON path of the bad field.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let nc = self.metadata.num_classes;
        if nc == 0 {
            return Err(("metadata.num_classes".into(), "must be at least 1".into()));
        }
        if self.metadata.coordinate_frame != COORDINATE_FRAME {
            return Err((
                "metadata.coordinate_frame".into(),
                format!("unsupported frame {:?}, expected {COORDINATE_FRAME:?}", self.metadata.coordinate_frame),
            ));
        }
        let mut ids = BTreeSet::new();
        for (i, img) in self.images.iter().enumerate() {
            if !ids.insert(img.id) {
                return Err((format!("images[{i}].id"), format!("duplicate image id {}", img.id)));
            }
            for (j, gt) in img.gts.iter().enumerate() {
                let at = |f: &str| format!("images[{i}].gts[{j}].{f}");
                BoundingBox::from_array(gt.bbox).map_err(|e| (at("box"), e.to_string()))?;
                if gt.class >= nc {
                    return Err((at("class"), format!("class {} >= num_classes {nc}", gt.class)));
                }
            }
            for (j, p) in img.preds.iter().enumerate() {
                let at = |f: &str| format!("images[{i}].preds[{j}].{f}");
                BoundingBox::from_array(p.bbox).map_err(|e| (at("box"), e.to_string()))?;
                AnchorPoint::new(p.anchor[0], p.anchor[1], p.stride).map_err(|e| (at("anchor"), e.to_string()))?;
                if p.scores.len() != nc {
                    return Err((at("scores"), format!("expected {nc} scores, got {}", p.scores.len())));
                }
                if let Some(k) = p.scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
                    return Err((format!("images[{i}].preds[{j}].scores[{k}]"), "score outside [0, 1]".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        json::to_json(self)
    }
}

impl ImageRecord {
    /// Core-typed predictions and instances. Fails only on records that did
    /// not pass [`DatasetFile::validate`].
    pub fn to_core(&self) -> Result<(Vec<Prediction>, Vec<GroundTruth>)> {
        let preds = self
            .preds
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let anchor = AnchorPoint::new(p.anchor[0], p.anchor[1], p.stride);
                let bbox = BoundingBox::from_array(p.bbox);
                match (anchor, bbox) {
                    (Ok(a), Ok(b)) => Prediction::new(a, b, p.scores.clone()),
                    _ => None,
                }
                .ok_or_else(|| Error::invariant(format!("image {}: invalid prediction {j}", self.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let gts = self
            .gts
            .iter()
            .enumerate()
            .map(|(j, g)| {
                BoundingBox::from_array(g.bbox)
                    .map(|bbox| GroundTruth {
                        bbox,
                        class_id: g.class,
                    })
                    .map_err(|e| Error::invariant(format!("image {}: gt {j}: {e}", self.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((preds, gts))
    }
}
