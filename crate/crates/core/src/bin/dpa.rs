use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dpa_core::data::{synth_generate, Dataset, SynthSpec};
use dpa_core::harness::{
    backbone_for, chance_map, evaluate_model, run_ablation, run_eval, run_suite, run_train, RunConfig, SplitLabels,
    CHECKPOINT_FILE,
};
use dpa_core::model::Model;
use dpa_core::pooling::corrupt_gem_backward;
use dpa_core::DpaError;

#[derive(Parser)]
#[command(name = "dpa", version, about = "Dual-pooling attention re-identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic vehicle dataset.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and loss log.
    Train(RunArgs),
    /// Evaluate a checkpoint on the query/gallery splits.
    Eval(EvalArgs),
    /// Run the gradient-check suite.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate baseline, CpA, SpA and DpA variants.
    Ablate(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "data/synth")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ids: Option<usize>,
    #[arg(long)]
    per_id: Option<usize>,
    #[arg(long)]
    held_out: Option<usize>,
    #[arg(long)]
    cameras: Option<usize>,
    /// Square image side in pixels.
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Dataset directory (overrides `data.dir`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Extra `section.key=value` assignment, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint to evaluate (default: `<out>/model.ckpt`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate an untrained model built from the run seed instead.
    #[arg(long, conflicts_with = "checkpoint")]
    random_weights: bool,
    /// Also report the mean mAP of 50 random embedding draws.
    #[arg(long)]
    chance: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, hide = true)]
    corrupt_gem_backward: bool,
}

fn load_config(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for item in &args.overrides {
        let Some((key, value)) = item.split_once('=') else {
            bail!(DpaError::ConfigInvalid(format!("--set expects KEY=VALUE, got `{item}`")));
        };
        cfg.set(key.trim(), value.trim())
            .map_err(|m| DpaError::ConfigInvalid(format!("--set {item}: {m}")))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(data) = &args.data {
        cfg.data_dir = data.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        num_identities: args.ids.unwrap_or(d.num_identities),
        images_per_identity: args.per_id.unwrap_or(d.images_per_identity),
        held_out: args.held_out.unwrap_or(d.held_out),
        cameras: args.cameras.unwrap_or(d.cameras),
        image_size: args.image_size.map_or(d.image_size, |s| (s, s)),
        seed: args.seed.unwrap_or(d.seed),
        ..d
    };
    let manifest = synth_generate(&spec, &args.out)?;
    println!(
        "wrote {} images of {} identities to {}",
        manifest.entries.len(),
        manifest.num_identities,
        args.out.display()
    );
    Ok(())
}

fn train(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    let outcome = run_train(&cfg, &args.out)
        .with_context(|| format!("training on {}", cfg.data_dir.display()))?;
    let log = &outcome.log;
    if let (Some(first), Some(last)) = (log.records.first(), log.records.last()) {
        println!(
            "trained {} epochs in {:.1}s: total loss {:.4} -> {:.4}",
            log.records.len(),
            log.total_seconds(),
            first.total,
            last.total
        );
    }
    println!("checkpoint: {}", args.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn print_report(label: &str, r: &dpa_core::eval::EvalReport) {
    println!(
        "{label}: mAP {:.4}  rank1 {:.4}  rank5 {:.4}  rank10 {:.4}  mINP {:.4}",
        r.map, r.rank1, r.rank5, r.rank10, r.minp
    );
}

fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.run)?;
    let out = &args.run.out;
    if args.random_weights {
        let dataset = Dataset::open(&cfg.data_dir.join("manifest.json"))?;
        let mut model = Model::build(&backbone_for(&cfg, &dataset), cfg.seed)?;
        let outcome = evaluate_model(&mut model, &dataset, &cfg.eval)?;
        outcome.write(out)?;
        print_report("random weights", &outcome.report);
    } else {
        let checkpoint = args.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
        let outcome = run_eval(&cfg, &checkpoint, out)
            .with_context(|| format!("evaluating {}", checkpoint.display()))?;
        print_report("eval", &outcome.report);
    }
    if args.chance {
        let dataset = Dataset::open(&cfg.data_dir.join("manifest.json"))?;
        let dim = cfg.backbone.embed_dim();
        let chance = chance_map(&SplitLabels::of(&dataset), dim, 50, cfg.seed, &cfg.eval)?;
        println!("chance mAP (50 random embeddings): {chance:.4}");
    }
    println!("metrics: {}", out.join("metrics.csv").display());
    Ok(())
}

/// Returns whether every item passed.
fn gradcheck(args: &GradcheckArgs) -> bool {
    corrupt_gem_backward(args.corrupt_gem_backward);
    println!("{:<20} {:>12} {:>10}  result", "item", "max_rel_err", "tolerance");
    let results = run_suite(|r| {
        let err = r.error.map_or_else(|| "error".to_string(), |e| format!("{e:.3e}"));
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!("{:<20} {:>12} {:>10.0e}  {verdict}", r.name, err, r.tolerance);
        if let Some(m) = &r.message {
            println!("    {m}");
        }
    });
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        true
    } else {
        println!("{} of {} checks failed: {}", failed.len(), results.len(), failed.join(", "));
        false
    }
}

fn ablate(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    let rows = run_ablation(&cfg, &args.out)
        .with_context(|| format!("ablation on {}", cfg.data_dir.display()))?;
    println!("{:<10} {:>8} {:>8} {:>8} {:>8}", "method", "mAP", "rank1", "rank5", "mINP");
    for r in rows {
        println!("{:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", r.method, r.map, r.rank1, r.rank5, r.minp);
    }
    println!("table: {}", Path::new(&args.out).join("ablation.csv").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => {
            return if gradcheck(a) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
