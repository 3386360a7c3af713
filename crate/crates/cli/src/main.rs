use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmdg_autodiff::suite;
use mmdg_core::checkpoint::Checkpoint;
use mmdg_core::composite::composite_check;
use mmdg_core::config::{DataSource, TrainConfig};
use mmdg_core::experiment::{run_ablation, run_protocol};
use mmdg_core::metrics::{report, roc_csv};
use mmdg_core::protocol::check_missing;
use mmdg_core::synth::{export_dataset, generate_domain, preset, PRESET_NAMES};
use mmdg_core::trainer::{load_splits, resolve_protocol, run_pretrain, RunLog, Start, Trainer};
use mmdg_core::{MmdgError, Modality};

#[derive(Parser, Debug)]
#[command(
    name = "mmdg",
    version,
    about = "Multi-modal face anti-spoofing: data, training, evaluation"
)]
struct Cli {
    /// TOML training configuration (desk preset when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured protocol, e.g. `cps_w` or `ps_cw`.
    #[arg(long, global = true)]
    protocol: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic domains as image files plus manifests.
    GenData,
    /// Warm up the backbone without adapters, then freeze it.
    Pretrain,
    /// Train adapters and head on a protocol.
    Train {
        /// Start from the parameters of a warm-up checkpoint.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue a run from its checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a protocol's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Modalities absent at test time: `d`, `i` or `di`.
        #[arg(long)]
        missing: Option<String>,
    },
    /// Gate on/off crossed with every modulation mode, averaged over seeds.
    Ablate {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Finite-difference check of every operation and of the full model.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Print a configuration file.
    DefaultConfig {
        /// Full-size settings instead of the desk preset.
        #[arg(long, conflicts_with = "mini")]
        paper: bool,
        /// Reduced geometry for fast repeated runs.
        #[arg(long)]
        mini: bool,
    },
}

fn parse_missing(s: &str) -> Result<Vec<Modality>, MmdgError> {
    let mut out = Vec::new();
    for c in s.chars().filter(|c| *c != ',') {
        let m = Modality::parse(&c.to_string())
            .ok_or_else(|| MmdgError::Protocol(format!("unknown modality {c:?} in --missing")))?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    check_missing(&out)?;
    Ok(out)
}

fn load_config(cli: &Cli) -> Result<TrainConfig, MmdgError> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.protocol {
        cfg.protocol = p.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(v: &impl serde::Serialize) -> Result<(), MmdgError> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

const PAPER_NOTE: &str = "\
# Full-size reference values: ViT-B/16 at 224x224 (12 blocks, 12 heads,
# width 768, MLP ratio 4), Adam with lr 5e-5 and weight decay 1e-3,
# 70 epochs, batch 32. lambda defaults to 0.3 and r_e to 1.0 at every size.
";

fn run(cli: &Cli) -> Result<(), MmdgError> {
    match &cli.command {
        Command::DefaultConfig { paper, mini } => {
            let cfg = match (paper, mini) {
                (true, _) => TrainConfig::paper_fidelity(),
                (_, true) => TrainConfig::mini(),
                _ => TrainConfig::desk(),
            };
            print!("{PAPER_NOTE}{}", cfg.to_toml()?);
        }
        Command::GenData => {
            let cfg = load_config(cli)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            let (n_live, n_spoof, seed, corruption) = match &cfg.data {
                DataSource::Synthetic {
                    n_live,
                    n_spoof,
                    seed,
                    corruption,
                } => (*n_live, *n_spoof, *seed, *corruption),
                DataSource::Manifest { .. } => {
                    return Err(MmdgError::Config(
                        "gen-data needs a synthetic data source".into(),
                    ))
                }
            };
            for name in PRESET_NAMES {
                let mut spec = preset(name, cfg.model.backbone.image_size)?;
                if let Some(p) = corruption {
                    spec = spec.with_corruption_probability(p);
                }
                let ds = generate_domain(&spec, n_live, n_spoof, seed)?;
                let manifest = export_dataset(&ds, &out, &format!("{name}.tsv"))?;
                print_json(
                    &serde_json::json!({"domain": name, "samples": ds.len(), "manifest": manifest}),
                )?;
            }
        }
        Command::Pretrain => {
            let cfg = load_config(cli)?;
            let spec = resolve_protocol(&cfg, &cfg.protocol)?;
            let splits = load_splits(&cfg, &spec)?;
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs/pretrain"));
            let log = RunLog::new(Some(&out))?;
            let t = run_pretrain(&cfg, &splits, &log)?;
            let path = out.join("pretrained.ckpt");
            t.to_checkpoint()?.save(&path)?;
            print_json(&serde_json::json!({"checkpoint": path}))?;
        }
        Command::Train { init, resume } => {
            let cfg = load_config(cli)?;
            let start = match (init, resume) {
                (Some(p), _) => Start::Init(Checkpoint::load(p)?),
                (_, Some(p)) => Start::Resume(Checkpoint::load(p)?),
                _ => Start::Fresh,
            };
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs/train"));
            let r = run_protocol(&cfg, Some(&out), start)?;
            print_json(&r.report)?;
        }
        Command::Eval {
            checkpoint,
            missing,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let mut cfg = TrainConfig::from_toml(&ck.config_toml)?;
            if let Some(p) = &cli.protocol {
                cfg.protocol = p.clone();
            }
            let mut spec = resolve_protocol(&cfg, &cfg.protocol)?;
            if let Some(m) = missing {
                spec = spec.with_missing(parse_missing(m)?)?;
            }
            let splits = load_splits(&cfg, &spec)?;
            let trainer = Trainer::from_checkpoint(&ck, splits.sources.clone())?;
            let scores = trainer.scores(&splits.test, &spec.missing, cfg.imputation)?;
            let rep = report(&spec.name, &scores)?;
            let log = RunLog::new(cli.out.as_deref())?;
            log.append_json("metrics.ndjson", &rep)?;
            log.write(&format!("roc_{}.csv", spec.name), &roc_csv(&scores)?)?;
            print_json(&rep)?;
        }
        Command::Ablate { seeds } => {
            let cfg = load_config(cli)?;
            let seeds: Vec<u64> = (0..*seeds).map(|k| cfg.seed + k).collect();
            let out = cli.out.clone();
            let rows = run_ablation(&cfg, &seeds, out.as_deref())?;
            let log = RunLog::new(out.as_deref())?;
            for row in &rows {
                log.append_json("ablation.ndjson", row)?;
                print_json(row)?;
            }
        }
        Command::GradCheck { seeds } => {
            let mut failed = Vec::new();
            for seed in 0..*seeds {
                for c in suite::check_all_ops(seed)? {
                    if !c.passed() {
                        failed.push(format!("{} (seed {seed}): {:e}", c.op, c.max_rel_error));
                    }
                }
                let c = composite_check(seed)?;
                print_json(
                    &serde_json::json!({"seed": seed, "composite_max_rel_error": c.max_rel_error()}),
                )?;
                if !c.passed() {
                    failed.push(format!("composite (seed {seed}): {:e}", c.max_rel_error()));
                }
            }
            if !failed.is_empty() {
                return Err(MmdgError::Autodiff(mmdg_autodiff::AutodiffError::Numeric {
                    op: "grad-check",
                    detail: failed.join("; "),
                }));
            }
            println!("all gradient checks passed");
        }
    }
    Ok(())
}

fn is_numeric(e: &MmdgError) -> bool {
    matches!(
        e,
        MmdgError::NonFiniteLoss { .. }
            | MmdgError::NonFiniteGradient(_)
            | MmdgError::Autodiff(mmdg_autodiff::AutodiffError::Numeric { .. })
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if is_numeric(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
