//! Pipeline CLI: deterministic, seeded experiment runs with per-command
//! artifacts and a hash manifest.
//!
//! Exit codes: 0 success, 2 input/configuration error, 3 missing
//! prerequisite artifact, 4 numerical failure.

mod commands;
mod config;
mod rundir;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use recedit_core::decoding::GateMode;
use recedit_core::evalkit::IidNorm;
use recedit_core::CoreError;

use commands::{AblateArm, Ctx, EvaluateOpts};
use config::RunConfig;
use rundir::{sha256_hex_str, RunDir};

#[derive(Parser)]
#[command(
    name = "recedit",
    about = "Semantic-ID recommender workbench: train, diagnose cold-start collapse, and repair it with gated closed-form edits",
    version
)]
struct Cli {
    /// Config file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; rewrites every per-stage seed deterministically.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Run directory holding all artifacts.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic interaction log into the run directory.
    GenData,
    /// Ingest the dataset and assign semantic IDs (codebooks fit on warm items).
    Tokenize,
    /// Train the base model on the training split.
    Train,
    /// Pre-edit diagnostics: per-split metrics, prefix-NDCG, IID ratios.
    Diagnose,
    /// Synthesize pseudo histories for cold items and emit edit requests.
    PrepareKnowledge {
        /// Use true cold-item histories instead of pseudo ones (quality-gap control).
        #[arg(long)]
        upper_bound: bool,
    },
    /// Probe every (position, layer) cell and select edit layers.
    Locate,
    /// Optimize value shifts, solve the closed-form updates, write the bundle.
    Edit {
        /// Preservation-injection trade-off override.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Evaluate the model (with the edit bundle unless --base-only).
    Evaluate {
        /// Ignore any edit bundle and evaluate the base checkpoint.
        #[arg(long)]
        base_only: bool,
        /// Apply all edits at every decoding step instead of gating.
        #[arg(long)]
        all_on: bool,
        /// Beam width override.
        #[arg(long)]
        beam: Option<usize>,
        /// Top-K override for the report.
        #[arg(long)]
        top_k: Option<usize>,
        /// Restrict beam expansion to the catalog SID trie.
        #[arg(long)]
        constrain_trie: bool,
        /// IID-ratio normalization shown in the summary table.
        #[arg(long, value_parser = parse_iid_norm)]
        iid_norm: Option<IidNorm>,
        /// Write per-case ranked lists to recommendations.jsonl.
        #[arg(long)]
        dump_recs: bool,
    },
    /// Time and score the retrain / finetune / edit update arms.
    Compare,
    /// Ablation arms: position-wise-off, classifier-random, classifier-worst, one-one-off.
    Ablate {
        #[arg(long)]
        arm: String,
    },
}

fn parse_iid_norm(s: &str) -> Result<IidNorm, String> {
    match s {
        "paper" => Ok(IidNorm::Paper),
        "share" => Ok(IidNorm::Share),
        other => Err(format!("unknown IID norm {other:?} (use paper or share)")),
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::Numerical(_) => 4,
                _ => 2,
            };
        }
        if cause.to_string().contains("missing prerequisite artifact") {
            return 3;
        }
    }
    2
}

fn build_ctx(cli: &Cli) -> Result<Ctx> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_master_seed(seed);
        cfg.dataset.seed = seed;
    }
    if cli.threads > 0 {
        cfg.threads = cli.threads;
    }
    cfg.validate()?;
    recedit_core::init_thread_pool(cfg.threads);
    let run = match cli.command {
        Command::GenData | Command::Tokenize => RunDir::create(&cli.out)?,
        _ => RunDir::open(&cli.out)?,
    };
    let cfg_hash = sha256_hex_str(&cfg.to_toml()?);
    Ok(Ctx { cfg, run, cfg_hash })
}

fn dispatch(cli: &Cli, ctx: &mut Ctx) -> Result<()> {
    match &cli.command {
        Command::GenData => commands::gen_data(ctx),
        Command::Tokenize => commands::tokenize(ctx),
        Command::Train => commands::train_cmd(ctx),
        Command::Diagnose => commands::diagnose(ctx),
        Command::PrepareKnowledge { upper_bound } => {
            commands::prepare_knowledge_cmd(ctx, *upper_bound)
        }
        Command::Locate => commands::locate(ctx),
        Command::Edit { lambda } => commands::edit(ctx, *lambda),
        Command::Evaluate {
            base_only,
            all_on,
            beam,
            top_k,
            constrain_trie,
            iid_norm,
            dump_recs,
        } => {
            if let Some(beam) = beam {
                ctx.cfg.pipeline.eval.beam_width = *beam;
            }
            if let Some(top_k) = top_k {
                ctx.cfg.pipeline.eval.top_k = *top_k;
            }
            if *constrain_trie {
                ctx.cfg.pipeline.eval.constrain_trie = true;
            }
            let opts = EvaluateOpts {
                base_only: *base_only,
                gate_mode: if *all_on { GateMode::AllOn } else { GateMode::OneOne },
                dump_recommendations: *dump_recs,
                iid_norm: *iid_norm,
            };
            commands::evaluate(ctx, &opts)
        }
        Command::Compare => commands::compare(ctx),
        Command::Ablate { arm } => commands::ablate(ctx, AblateArm::parse(arm)?),
    }
}

fn main() {
    let cli = Cli::parse();
    let result = build_ctx(&cli).and_then(|mut ctx| dispatch(&cli, &mut ctx));
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}
