use std::path::Path;

use clap::Args;
use detlab_core::assignment::DEFAULT_TOPK;
use detlab_core::rank::DEFAULT_THRESHOLD_RATIO;
use detlab_core::{MetricParams, NmsConfig, SelectConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;

pub const WORKERS_ENV: &str = "DETLAB_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub o2m: O2mConfig,
    pub o2o: O2oConfig,
    pub nms: NmsSection,
    pub seed: u64,
    /// `None` means one worker per available core.
    pub workers: Option<usize>,
    pub rank: RankSection,
    pub allocate: AllocateSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct O2mConfig {
    pub alpha: f64,
    pub beta: f64,
    pub topk: usize,
}

/// Unset exponents follow the one-to-many head, i.e. `r = 1`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct O2oConfig {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsSection {
    pub iou_thresh: f64,
    pub score_thresh: f64,
    pub max_det: usize,
    pub class_agnostic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankSection {
    pub threshold_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocateSection {
    pub baseline_score: Option<f64>,
    /// Shell command run through `sh -c`; `{stages}` expands to the
    /// comma-separated stage ids and stdout must hold one number.
    pub evaluator_command: Option<String>,
}

impl Default for O2mConfig {
    fn default() -> Self {
        let p = MetricParams::default();
        O2mConfig {
            alpha: p.alpha,
            beta: p.beta,
            topk: DEFAULT_TOPK,
        }
    }
}

impl Default for NmsSection {
    fn default() -> Self {
        let c = NmsConfig::default();
        NmsSection {
            iou_thresh: c.iou_thresh,
            score_thresh: c.score_thresh,
            max_det: c.max_det,
            class_agnostic: c.class_agnostic,
        }
    }
}

impl Default for RankSection {
    fn default() -> Self {
        RankSection {
            threshold_ratio: DEFAULT_THRESHOLD_RATIO,
        }
    }
}


/// Command-line overrides; every flag beats the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigOverrides {
    /// JSON config file; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub o2m_alpha: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub o2m_beta: Option<f64>,
    #[arg(long, global = true)]
    pub topk: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub o2o_alpha: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub o2o_beta: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub iou_thresh: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub score_thresh: Option<f64>,
    #[arg(long, global = true)]
    pub max_det: Option<usize>,
    #[arg(long, global = true)]
    pub class_agnostic: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; also read from DETLAB_WORKERS.
    #[arg(long, global = true, env = WORKERS_ENV)]
    pub workers: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub threshold_ratio: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub baseline: Option<f64>,
    #[arg(long, global = true)]
    pub evaluator_command: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        json::read_json(path)
    }

    /// Defaults, then the config file named in `ov`, then the flags.
    pub fn resolve(ov: &ConfigOverrides) -> Result<Self> {
        let mut cfg = match &ov.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &ConfigOverrides) {
        fn set<T: Copy>(dst: &mut T, v: Option<T>) {
            if let Some(v) = v {
                *dst = v;
            }
        }
        set(&mut self.o2m.alpha, ov.o2m_alpha);
        set(&mut self.o2m.beta, ov.o2m_beta);
        set(&mut self.o2m.topk, ov.topk);
        if ov.o2o_alpha.is_some() {
            self.o2o.alpha = ov.o2o_alpha;
        }
        if ov.o2o_beta.is_some() {
            self.o2o.beta = ov.o2o_beta;
        }
        set(&mut self.nms.iou_thresh, ov.iou_thresh);
        set(&mut self.nms.score_thresh, ov.score_thresh);
        set(&mut self.nms.max_det, ov.max_det);
        self.nms.class_agnostic |= ov.class_agnostic;
        set(&mut self.seed, ov.seed);
        if ov.workers.is_some() {
            self.workers = ov.workers;
        }
        set(&mut self.rank.threshold_ratio, ov.threshold_ratio);
        if ov.baseline.is_some() {
            self.allocate.baseline_score = ov.baseline;
        }
        if ov.evaluator_command.is_some() {
            self.allocate.evaluator_command = ov.evaluator_command.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if let Err(e) = self.o2m_params() {
            return bad(format!("o2m: {e}"));
        }
        if let Err(e) = self.o2o_params() {
            return bad(format!("o2o: {e}"));
        }
        if self.o2m.topk == 0 {
            return bad("o2m.topk must be at least 1".into());
        }
        if !self.nms_config().is_valid() {
            return bad(format!(
                "nms: need 0 < iou_thresh < 1, 0 <= score_thresh <= 1, max_det >= 1 (got {:?})",
                self.nms
            ));
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        let t = self.rank.threshold_ratio;
        if !(t > 0.0 && t < 1.0) {
            return bad(format!("rank.threshold_ratio must lie in (0, 1), got {t}"));
        }
        Ok(())
    }

    pub fn o2m_params(&self) -> Result<MetricParams, detlab_core::AssignError> {
        MetricParams::new(self.o2m.alpha, self.o2m.beta)
    }

    pub fn o2o_params(&self) -> Result<MetricParams, detlab_core::AssignError> {
        MetricParams::new(
            self.o2o.alpha.unwrap_or(self.o2m.alpha),
            self.o2o.beta.unwrap_or(self.o2m.beta),
        )
    }

    pub fn nms_config(&self) -> NmsConfig {
        NmsConfig {
            iou_thresh: self.nms.iou_thresh,
            score_thresh: self.nms.score_thresh,
            max_det: self.nms.max_det,
            class_agnostic: self.nms.class_agnostic,
        }
    }

    pub fn select_config(&self) -> SelectConfig {
        SelectConfig {
            score_thresh: self.nms.score_thresh,
            max_det: self.nms.max_det,
        }
    }

    pub fn worker_count(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}
