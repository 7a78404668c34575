//! Command-line surface over [`Run`](crate::run::Run).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::run::Run;
use crate::trainer::LogLine;

#[derive(Debug, Parser)]
#[command(name = "savekit", version, about = "Motion inversion for one-shot video editing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Overrides,
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Flat TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Step count of the stage being run (pretraining, stage 1 or stage 2).
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub lambda_attn: Option<f64>,
    #[arg(long, global = true)]
    pub guidance: Option<f64>,
    #[arg(long, global = true)]
    pub ddim_steps: Option<usize>,
    /// One JSON object per line on stdout instead of text on stderr.
    #[arg(long, global = true)]
    pub json_logs: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain (or fetch) the toy text-to-image model.
    Pretrain,
    /// Register the protagonist word on frames as images.
    TrainStage1 {
        /// Continue from the existing stage1.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Learn the motion word on the inflated video model.
    TrainStage2 {
        #[arg(long)]
        resume: bool,
    },
    /// Compute (or load cached) motion masks and export them as PNGs.
    ExtractMasks,
    /// Sample the training prompt from the inverted source.
    Reconstruct,
    /// Edit the source with each configured (or given) prompt.
    Edit {
        #[arg(long = "prompt")]
        prompts: Vec<String>,
    },
    /// Score source/edited pairs.
    Eval {
        /// Directory of pair subdirectories holding `source/` and `edited/`.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Token attention shares and motion-word heatmaps on the source.
    InspectAttn,
    /// Print the effective configuration.
    ShowConfig,
}

/// Load the configuration and apply command-line overrides.
pub fn effective_config(command: &Command, opts: &Overrides) -> Result<RunConfig> {
    let mut c = match &opts.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = opts.seed {
        c.seed = s;
    }
    if let Some(n) = opts.steps {
        match command {
            Command::Pretrain => c.pretrain_steps = n,
            Command::TrainStage1 { .. } => c.stage1_steps = n,
            Command::TrainStage2 { .. } => c.stage2_steps = n,
            _ => {
                return Err(Error::Usage(
                    "--steps applies to pretrain, train-stage1 and train-stage2".into(),
                ))
            }
        }
    }
    if let Some(l) = opts.lambda_attn {
        c.lambda_attn = l;
    }
    if let Some(g) = opts.guidance {
        c.guidance_scale = g;
    }
    if let Some(d) = opts.ddim_steps {
        c.ddim_steps = d;
    }
    Ok(c)
}

struct Reporter {
    json: bool,
}

impl Reporter {
    fn event(&self, text: &str, value: serde_json::Value) {
        if self.json {
            println!("{value}");
        } else {
            eprintln!("{text}");
        }
    }

    fn step(&self, l: &LogLine, every: usize) {
        if self.json {
            println!("{}", serde_json::to_string(l).unwrap_or_default());
        } else if l.step % every == 0 {
            eprintln!(
                "stage {} step {:>4}  ldm {:.5}  attn {:.5}  total {:.5}",
                l.stage, l.step, l.report.ldm, l.report.attn, l.report.total
            );
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let config = effective_config(&cli.command, &cli.opts)?;
    let out = Reporter { json: cli.opts.json_logs };
    if let Command::ShowConfig = cli.command {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let run = Run::new(config)?;
    match &cli.command {
        Command::Pretrain => {
            run.image_model(|s, l| {
                if s % 100 == 0 {
                    out.event(&format!("pretrain step {s:>5}  loss {l:.5}"), json!({"pretrain_step": s, "loss": l}));
                }
            })?;
            out.event("pretrained model ready", json!({"event": "pretrained"}));
        }
        Command::TrainStage1 { resume } => {
            let r = run.train_stage1(*resume, |l| out.step(l, 25))?;
            out.event(
                &format!("stage 1 done: probe loss {:.5} -> {:.5}", r.probe_initial, r.probe_final),
                json!({"event": "stage1", "probe_initial": r.probe_initial, "probe_final": r.probe_final}),
            );
        }
        Command::TrainStage2 { resume } => {
            let r = run.train_stage2(*resume, |l| out.step(l, 25))?;
            out.event(
                &format!(
                    "stage 2 done: probe total {:.5} -> {:.5}, attn {:.5} -> {:.5}",
                    r.probe_initial.total, r.probe_final.total, r.probe_initial.attn, r.probe_final.attn
                ),
                json!({"event": "stage2", "probe_initial": r.probe_initial, "probe_final": r.probe_final,
                       "mask_cache_writes": r.mask_cache_writes}),
            );
        }
        Command::ExtractMasks => {
            let (m, status) = run.extract_masks()?;
            out.event(
                &format!("masks: {status:?}, density {:?}", m.density()),
                json!({"event": "masks", "cache": format!("{status:?}"), "density": m.density()}),
            );
        }
        Command::Reconstruct => {
            run.reconstruct()?;
            let dir = run.path("reconstruct");
            out.event(&format!("wrote {}", dir.display()), json!({"event": "reconstruct", "dir": dir}));
        }
        Command::Edit { prompts } => {
            for (dir, _) in run.edit(prompts)? {
                out.event(&format!("wrote {}", dir.display()), json!({"event": "edit", "dir": dir}));
            }
        }
        Command::Eval { pairs } => {
            for (name, r) in run.eval(pairs.as_deref())? {
                out.event(
                    &format!(
                        "{name}: flow similarity {:.4}, frame consistency {:.4}",
                        r.flow_similarity, r.frame_consistency
                    ),
                    json!({"event": "eval", "pair": name, "report": r}),
                );
            }
        }
        Command::InspectAttn => {
            for (token, share) in run.inspect_attn()? {
                out.event(&format!("{token:>10}  {share:.4}"), json!({"token": token, "share": share}));
            }
        }
        Command::ShowConfig => unreachable!(),
    }
    Ok(())
}

/// Entry point for the binary: parse, run, map errors to exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
