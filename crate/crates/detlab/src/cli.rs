use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::archive::{read_archive, write_archive, Layout};
use crate::bench::{duplicate_scene, write_csv as write_bench_csv};
use crate::commands::{
    dataset_predictions, run_allocate, run_assign, run_bench, run_fuse, run_gap, run_rank, write_rank_csv,
    CommandEvaluator, Evaluator, StageManifest, TableEvaluator,
};
use crate::config::{ConfigOverrides, RunConfig};
use crate::cost_table::{cost_rows, parse_specs, write_csv as write_cost_csv};
use crate::dataset::DatasetFile;
use crate::error::{Error, Result};
use crate::json::{read_json, read_text, to_json, write_output};
use crate::synth::{generate_synthetic, planted_archive, planted_in_order, NoiseProfile, PlantedStage, SynthParams};

/// Label assignment, post-processing and block design analysis for
/// NMS-free detectors.
#[derive(Debug, Parser)]
#[command(name = "detlab", version)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// One-to-many and one-to-one assignment report with alignment
    /// frequencies and supervision gaps.
    Assign {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervision gap per matched instance.
    Gap {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time greedy NMS against NMS-free selection; writes a CSV.
    NmsBench {
        /// Use the predictions of this dataset.
        #[arg(long, conflicts_with = "duplicates")]
        dataset: Option<PathBuf>,
        /// Use one crafted image with this many overlapping detections.
        #[arg(long)]
        duplicates: Option<usize>,
        #[arg(long, default_value_t = 80)]
        classes: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the kept source indices of both paths as JSON.
        #[arg(long)]
        outputs: Option<PathBuf>,
    },
    /// MACs and parameters for a JSON list of block specs; writes a CSV.
    Cost {
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold batch-norm and merge large-kernel depthwise branch pairs.
    Fuse {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        bn_eps: f64,
        /// Inline tensor data in the output manifest.
        #[arg(long)]
        inline: bool,
    },
    /// Numerical rank of each stage's last convolution.
    Rank {
        #[arg(long)]
        archive: PathBuf,
        /// JSON `{"stages": [{"stage_id", "weight", "c_out"}]}`.
        #[arg(long)]
        stages: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Rank-guided compact block allocation.
    Allocate {
        /// Rank report written by `rank`.
        #[arg(long, required_unless_present_all = ["archive", "stages"])]
        ranks: Option<PathBuf>,
        #[arg(long, requires = "stages", conflicts_with = "ranks")]
        archive: Option<PathBuf>,
        #[arg(long, requires = "archive")]
        stages: Option<PathBuf>,
        /// JSON list of `{"stages": [...], "score": x}`; otherwise the
        /// configured evaluator command is used.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic inputs.
    #[command(subcommand)]
    Gen(GenCmd),
}

#[derive(Debug, Subcommand)]
pub enum GenCmd {
    /// Synthetic detection dataset.
    Dataset {
        #[arg(long, default_value_t = 10)]
        images: usize,
        #[arg(long, default_value_t = 8)]
        gts: usize,
        #[arg(long, default_value_t = 8)]
        preds_per_gt: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, value_enum, default_value_t = NoiseProfile::Jitter)]
        profile: NoiseProfile,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weight archive whose stage ranks follow a given order.
    Planted {
        /// Stage ids from lowest to highest planted rank.
        #[arg(long, value_delimiter = ',', required = true)]
        order: Vec<u32>,
        /// Explicit planted ranks, aligned with `--order`.
        #[arg(long, value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
        #[arg(long, default_value_t = 16)]
        c_out: usize,
        #[arg(long, default_value_t = 8)]
        c_in: usize,
        #[arg(long, default_value_t = 3)]
        kernel: usize,
        #[arg(long)]
        out_archive: PathBuf,
        #[arg(long)]
        out_stages: PathBuf,
        #[arg(long)]
        inline: bool,
    },
}

fn layout(inline: bool) -> Layout {
    if inline {
        Layout::Inline
    } else {
        Layout::Raw
    }
}

fn emit_json<T: serde::Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    write_output(out, to_json(value)?.as_bytes())
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::resolve(&cli.overrides)?;
    match cli.command {
        Cmd::Assign { dataset, out } => emit_json(out.as_deref(), &run_assign(&DatasetFile::load(&dataset)?, &cfg)?),
        Cmd::Gap { dataset, out } => emit_json(out.as_deref(), &run_gap(&DatasetFile::load(&dataset)?, &cfg)?),
        Cmd::NmsBench {
            dataset,
            duplicates,
            classes,
            repeats,
            out,
            outputs,
        } => {
            let images = match (dataset, duplicates) {
                (Some(p), _) => dataset_predictions(&DatasetFile::load(&p)?)?,
                (None, Some(n)) => vec![duplicate_scene(cfg.seed, n, classes)],
                (None, None) => return Err(Error::config("nms-bench needs --dataset or --duplicates")),
            };
            let report = run_bench(&images, &cfg, repeats)?;
            let mut csv = Vec::new();
            write_bench_csv(&report.rows, &mut csv)?;
            write_output(out.as_deref(), &csv)?;
            if let Some(p) = outputs {
                #[derive(serde::Serialize)]
                struct Kept<'a> {
                    nms: &'a [Vec<usize>],
                    nms_free: &'a [Vec<usize>],
                }
                emit_json(
                    Some(&p),
                    &Kept {
                        nms: &report.nms_outputs,
                        nms_free: &report.select_outputs,
                    },
                )?;
            }
            Ok(())
        }
        Cmd::Cost { specs, out } => {
            let rows = cost_rows(&parse_specs(&read_text(&specs)?, &specs)?)?;
            let mut csv = Vec::new();
            write_cost_csv(&rows, &mut csv)?;
            write_output(out.as_deref(), &csv)
        }
        Cmd::Fuse {
            archive,
            out,
            bn_eps,
            inline,
        } => write_archive(&run_fuse(&read_archive(&archive)?, bn_eps)?, &out, layout(inline)),
        Cmd::Rank {
            archive,
            stages,
            out,
            csv,
        } => {
            let manifest: StageManifest = read_json(&stages)?;
            let report = run_rank(&read_archive(&archive)?, &manifest.stages, cfg.rank.threshold_ratio, cfg.worker_count())?;
            if let Some(p) = csv {
                let mut buf = Vec::new();
                write_rank_csv(&report, &mut buf)?;
                write_output(Some(&p), &buf)?;
            }
            emit_json(out.as_deref(), &report)
        }
        Cmd::Allocate {
            ranks,
            archive,
            stages,
            table,
            out,
        } => {
            let report = match (ranks, archive, stages) {
                (Some(r), _, _) => read_json(&r)?,
                (None, Some(a), Some(s)) => {
                    let manifest: StageManifest = read_json(&s)?;
                    run_rank(&read_archive(&a)?, &manifest.stages, cfg.rank.threshold_ratio, cfg.worker_count())?
                }
                _ => return Err(Error::config("allocate needs --ranks or --archive with --stages")),
            };
            let evaluator = match (table, &cfg.allocate.evaluator_command) {
                (Some(t), _) => Evaluator::Table(TableEvaluator::load(&t)?),
                (None, Some(cmd)) => Evaluator::Command(CommandEvaluator { template: cmd.clone() }),
                (None, None) => return Err(Error::config("allocate needs --table or an evaluator command")),
            };
            emit_json(out.as_deref(), &run_allocate(&report, cfg.allocate.baseline_score, &evaluator)?)
        }
        Cmd::Gen(GenCmd::Dataset {
            images,
            gts,
            preds_per_gt,
            classes,
            profile,
            out,
        }) => {
            let ds = generate_synthetic(&SynthParams {
                seed: cfg.seed,
                num_images: images,
                gts_per_image: gts,
                preds_per_gt,
                num_classes: classes,
                profile,
            })?;
            write_output(out.as_deref(), ds.to_json()?.as_bytes())
        }
        Cmd::Gen(GenCmd::Planted {
            order,
            ranks,
            c_out,
            c_in,
            kernel,
            out_archive,
            out_stages,
            inline,
        }) => {
            let stages: Vec<PlantedStage> = match ranks {
                None => planted_in_order(&order, c_out, c_in, kernel),
                Some(r) if r.len() == order.len() => order
                    .iter()
                    .zip(r)
                    .map(|(&stage_id, rank)| PlantedStage {
                        stage_id,
                        c_out,
                        c_in,
                        kernel,
                        rank,
                    })
                    .collect(),
                Some(_) => return Err(Error::config("--ranks must have one entry per stage in --order")),
            };
            let (archive, manifest) = planted_archive(cfg.seed, &stages)?;
            write_archive(&archive, &out_archive, layout(inline))?;
            emit_json(Some(&out_stages), &StageManifest { stages: manifest })
        }
    }
}

/// Parse `args`, run, and return the process exit code. Failures print a
/// single `detlab: error[<kind>]: ...` line on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("detlab: error[usage]: {}", first.trim_start_matches("error: "));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            e.exit_code()
        }
    }
}
