//! Argument parsing and subcommand dispatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fsod_core::detcore::ResultRecord;
use fsod_core::eval::{challenge_score, coco_map, ScoreCard};
use fsod_core::matching::diffuse;
use fsod_core::pipeline::proposals_to_records;
use fsod_core::synth::{synth_task, SynthTaskConfig};
use serde_json::json;

use crate::config::{require, PipelineConfig};
use crate::error::{CliError, CliResult};
use crate::io::{load_records, load_split, load_store, save_store, write_atomic, write_json, write_records};
use crate::pipelines::{apply_chain, build_prototype_store, run_match, run_pseudo_rounds, score_submission, sorted_for_output, ChainContext};

#[derive(Debug, Parser)]
#[command(name = "fsod", version, about = "Training-free few-shot object detection over precomputed embeddings")]
pub struct Cli {
    /// TOML task configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `paths.output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prototype construction.
    #[command(subcommand)]
    Proto(ProtoCmd),
    /// Proposal matching.
    #[command(subcommand)]
    Match(MatchCmd),
    /// Score diffusion over an existing detection file.
    Diffuse(DiffuseArgs),
    /// Post-processing chains.
    #[command(subcommand)]
    Post(PostCmd),
    /// Pseudo-labeling.
    #[command(subcommand)]
    Pseudo(PseudoCmd),
    /// Evaluation and scoring.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Synthetic data.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Embedding stores.
    #[command(subcommand)]
    Embed(EmbedCmd),
}

#[derive(Debug, Subcommand)]
pub enum ProtoCmd {
    /// Build class and background prototypes into `prototypes.cdfe`.
    Build {
        #[arg(long)]
        support_embeddings: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum MatchCmd {
    /// Match, diffuse, post-process, evaluate; writes `results.json` and `report.json`.
    Run {
        #[arg(long)]
        support_embeddings: Option<PathBuf>,
        #[arg(long)]
        proposals: Option<PathBuf>,
        #[arg(long)]
        proposal_embeddings: Option<PathBuf>,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        min_confidence: Option<f64>,
        #[arg(long)]
        no_diffusion: bool,
    },
}

#[derive(Debug, Args)]
pub struct DiffuseArgs {
    /// Detections in COCO results format.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub edge_iou_min: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum PostCmd {
    /// Run the configured chain over one or more detection files; writes `post.json`.
    Apply {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum PseudoCmd {
    /// Detect, select and merge for `rounds` rounds.
    Round {
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        /// Comma-separated F-beta per round.
        #[arg(long, value_delimiter = ',')]
        beta_schedule: Option<Vec<f64>>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// COCO mAP of a results file; writes `report.json`.
    Map {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Weighted score from the configured submission, or from nine mAP
    /// percentages given dataset-major; writes `score.json`.
    Score {
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        cells: Option<Vec<f64>>,
    },
}

#[derive(Debug, Subcommand)]
pub enum SynthCmd {
    /// Write a clustered synthetic task with known labels.
    Gen {
        #[arg(long, default_value_t = 3)]
        n_classes: usize,
        #[arg(long, default_value_t = 5)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0.0)]
        spread: f64,
        #[arg(long, default_value_t = 4)]
        objects_per_image: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum EmbedCmd {
    /// Summarize a store: kind, dimension, count, metadata.
    Inspect { path: PathBuf },
}

struct Ctx {
    cfg: PipelineConfig,
    out: Option<PathBuf>,
}

impl Ctx {
    fn out_dir(&self) -> CliResult<&Path> {
        self.out
            .as_deref()
            .or(self.cfg.paths.output_dir.as_deref())
            .ok_or_else(|| CliError::Config("no output directory: pass --out or set paths.output_dir".into()))
    }
}

fn set(slot: &mut Option<PathBuf>, v: &Option<PathBuf>) {
    if v.is_some() {
        slot.clone_from(v);
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let mut ctx = Ctx { cfg, out: cli.out };
    match cli.command {
        Command::Proto(ProtoCmd::Build { support_embeddings }) => {
            set(&mut ctx.cfg.paths.support_embeddings, &support_embeddings);
            let support = load_store(require(&ctx.cfg.paths.support_embeddings, "paths.support_embeddings")?)?;
            let store = build_prototype_store(&ctx.cfg, &support)?;
            save_store(&ctx.out_dir()?.join("prototypes.cdfe"), &store)
        }
        Command::Match(MatchCmd::Run { support_embeddings, proposals, proposal_embeddings, ground_truth, min_confidence, no_diffusion }) => {
            let p = &mut ctx.cfg.paths;
            set(&mut p.support_embeddings, &support_embeddings);
            set(&mut p.proposals, &proposals);
            set(&mut p.proposal_embeddings, &proposal_embeddings);
            set(&mut p.ground_truth, &ground_truth);
            if let Some(m) = min_confidence {
                ctx.cfg.matcher.min_confidence = m;
            }
            if no_diffusion {
                ctx.cfg.diffusion.enabled = false;
            }
            let out = run_match(&ctx.cfg, ctx.out_dir()?)?;
            if let Some(r) = out.report {
                println!("mAP {:.4} over {} detections", r.map, out.detections.len());
            } else {
                println!("{} detections", out.detections.len());
            }
            Ok(())
        }
        Command::Diffuse(a) => {
            let d = &mut ctx.cfg.diffusion;
            if let Some(v) = a.steps {
                d.steps = v;
            }
            if let Some(v) = a.alpha {
                d.alpha = v;
            }
            if let Some(v) = a.edge_iou_min {
                d.edge_iou_min = v;
            }
            let dcfg = ctx.cfg.diffusion.to_core()?;
            let records = load_records(&a.input)?;
            let dets: Vec<_> = records.iter().map(|r| r.detection).collect();
            let out: Vec<ResultRecord<f64>> = diffuse(&dets, &dcfg)
                .into_iter()
                .zip(&records)
                .map(|(detection, r)| ResultRecord { id: r.id, detection, phrase: r.phrase.clone() })
                .collect();
            write_records(&ctx.out_dir()?.join("diffused.json"), &out)
        }
        Command::Post(PostCmd::Apply { inputs }) => {
            let sets = inputs.iter().map(|p| load_records(p)).collect::<CliResult<Vec<_>>>()?;
            let chain = ChainContext::for_config(&ctx.cfg, None)?;
            let dets = sorted_for_output(apply_chain(sets, &ctx.cfg.postproc, &chain)?);
            crate::io::write_detections(&ctx.out_dir()?.join("post.json"), &dets)
        }
        Command::Pseudo(PseudoCmd::Round { rounds, tau, beta_schedule }) => {
            let ps = &mut ctx.cfg.pseudo;
            if let Some(t) = tau {
                ps.policy.tau = t;
            }
            if let Some(b) = beta_schedule {
                ps.beta_schedule = b;
            }
            let rounds = rounds.unwrap_or(ps.rounds);
            let outs = run_pseudo_rounds(&ctx.cfg, rounds, ctx.out_dir()?)?;
            for r in &outs {
                println!("round {}: +{} pseudo-labels, {} annotations", r.round, r.added, r.merged.annotations.len());
            }
            Ok(())
        }
        Command::Eval(EvalCmd::Map { results, ground_truth }) => {
            set(&mut ctx.cfg.paths.ground_truth, &ground_truth);
            let gt = load_split(require(&ctx.cfg.paths.ground_truth, "paths.ground_truth")?)?;
            let dets: Vec<_> = load_records(&results)?.into_iter().map(|r| r.detection).collect();
            let report = coco_map(&dets, &gt, &ctx.cfg.eval.to_core()?).map_err(|e| CliError::from_core(&results, e))?;
            write_json(&ctx.out_dir()?.join("report.json"), &report.to_json())?;
            println!("mAP {:.4}", report.map);
            Ok(())
        }
        Command::Eval(EvalCmd::Score { cells }) => {
            let (card, tasks) = match cells {
                Some(c) => {
                    let cells: [f64; 9] = c
                        .try_into()
                        .map_err(|v: Vec<f64>| CliError::Config(format!("--cells takes 9 values, got {}", v.len())))?;
                    let grid = [[cells[0], cells[1], cells[2]], [cells[3], cells[4], cells[5]], [cells[6], cells[7], cells[8]]];
                    (ScoreCard { cells: grid, score: challenge_score(&grid) }, Vec::new())
                }
                None => {
                    if ctx.cfg.submission.is_empty() {
                        return Err(CliError::Config("eval score needs --cells or [[submission]] entries".into()));
                    }
                    score_submission(&ctx.cfg)?
                }
            };
            card.validate().map_err(CliError::from)?;
            let mut report = card.to_json();
            report["tasks"] = json!(tasks);
            write_json(&ctx.out_dir()?.join("score.json"), &report)?;
            println!("score {}", report["score"]);
            Ok(())
        }
        Command::Synth(SynthCmd::Gen { n_classes, per_class, dim, spread, objects_per_image }) => {
            if n_classes == 0 || per_class == 0 || dim == 0 || !(spread >= 0.0) {
                return Err(CliError::Config("synth gen needs positive counts and a non-negative spread".into()));
            }
            let scfg = SynthTaskConfig { n_classes, per_class, dim, spread, objects_per_image, seed: ctx.cfg.seed };
            let task = synth_task::<f64>(&scfg)?;
            let out = ctx.out_dir()?;
            write_atomic(&out.join("support.json"), &fsod_core::detcore::emit_split(&task.support)?)?;
            write_atomic(&out.join("query_gt.json"), &fsod_core::detcore::emit_split(&task.query_gt)?)?;
            save_store(&out.join("support.cdfe"), &task.support_store)?;
            save_store(&out.join("proposals.cdfe"), &task.proposal_store)?;
            write_records(&out.join("proposals.json"), &proposals_to_records(&task.proposals))
        }
        Command::Embed(EmbedCmd::Inspect { path }) => {
            let store = load_store(&path)?;
            let labeled = store.entries().iter().filter(|e| e.category_id.is_some()).count();
            let summary = json!({
                "kind": store.kind(),
                "dim": store.dim(),
                "count": store.len(),
                "labeled": labeled,
                "metadata": store.metadata,
            });
            match &ctx.out {
                Some(o) => write_json(&o.join("inspect.json"), &summary),
                None => {
                    println!("{}", serde_json::to_string_pretty(&summary).map_err(|e| CliError::Internal(e.to_string()))?);
                    Ok(())
                }
            }
        }
    }
}
