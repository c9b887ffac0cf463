//! `polyformer` command-line driver: synthetic data, the three training
//! phases, evaluation and the ablation table.
//!
//! Exit codes: 0 success, 1 other failure, 2 config error, 3 numeric
//! failure, 4 freeze-ledger violation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use polyformer::ablation::{ablation_suite, check_poly_checkpoint};
use polyformer::checkpoint::Checkpoint;
use polyformer::config::hex;
use polyformer::data::{few_shot_split, write_dataset, Benchmark, DomainSpec, Manifest, Sample};
use polyformer::metrics::evaluate;
use polyformer::train::{PhaseData, StepRecord, Trainer};
use polyformer::{AdvMode, BnAdapt, Domain, Error, KScope, LayerStage, Phase, PhaseConfig, Result};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "polyformer",
    version,
    about = "Few-shot domain adaptation with a polyformer layer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic source and target datasets as PPM/PGM files.
    Synth(SynthArgs),
    /// Phase A: train the U-Net backbone on source images.
    TrainSource(TrainArgs),
    /// Phase B: insert a polyformer layer and train it with the backbone frozen.
    TrainPoly(PolyArgs),
    /// Phase C: adapt to a few labelled target images.
    Adapt(AdaptArgs),
    /// Dice of a checkpoint on the source or target images.
    Eval(EvalArgs),
    /// Run every adaptation setting from one phase B checkpoint.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives the images and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// JSON DomainSpec for the source domain.
    #[arg(long)]
    source: Option<PathBuf>,
    /// JSON DomainSpec for the target domain.
    #[arg(long)]
    target: Option<PathBuf>,
}

#[derive(Args)]
struct Common {
    /// JSON PhaseConfig; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `synth`; the default benchmark is
    /// generated in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-step JSONL log; defaults to the checkpoint path with a .jsonl
    /// extension.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct PolyArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Phase A checkpoint.
    #[arg(long)]
    backbone: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdvArg {
    Off,
    Features,
    Masks,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    K,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum BnArg {
    Full,
    StatsOnly,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Phase B checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    shots: Option<usize>,
    /// Use the supervised loss on the labelled shots.
    #[arg(long, overrides_with = "no_sup")]
    sup: bool,
    #[arg(long)]
    no_sup: bool,
    #[arg(long, value_enum)]
    adv: Option<AdvArg>,
    #[arg(long, value_enum)]
    scope: Option<ScopeArg>,
    #[arg(long, value_enum)]
    bn: Option<BnArg>,
    /// Gradient reversal scale.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Source,
    Target,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out source images, or the target images.
    #[arg(long, value_enum, default_value = "target")]
    dataset: DatasetArg,
    /// Evaluate only the target images left after drawing this many shots.
    #[arg(long)]
    shots: Option<usize>,
    /// Seed of the shot draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Phase B checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    shots: Option<usize>,
    /// Comma-separated seeds; each row runs once per seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Directory for table.txt, table.csv and table.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::TrainSource(a) => train_source(a),
        Command::TrainPoly(a) => train_poly(a),
        Command::Adapt(a) => adapt(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Ledger { .. } => 4,
        e if e.is_numeric() => 3,
        _ => 1,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

fn load_config(common: &Common, phase: Phase) -> Result<PhaseConfig> {
    let mut cfg = match &common.config {
        Some(p) => PhaseConfig::load(p)?,
        None => PhaseConfig::default(),
    };
    cfg.phase = phase;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.steps.is_some() {
        cfg.steps = common.steps;
    }
    Ok(cfg)
}

fn benchmark(dir: Option<&Path>) -> Result<Benchmark> {
    let Some(dir) = dir else {
        return Ok(Benchmark::default_pair());
    };
    let manifest = Manifest::load(&dir.join("manifest.json"))?;
    Ok(Benchmark {
        source_train: manifest.samples(dir, "source_train")?,
        source_eval: manifest.samples(dir, "source_eval")?,
        target: manifest.samples(dir, "target")?,
    })
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let source = a
        .source
        .as_deref()
        .map(read_json)
        .transpose()?
        .unwrap_or_else(DomainSpec::source);
    let target = a
        .target
        .as_deref()
        .map(read_json)
        .transpose()?
        .unwrap_or_else(DomainSpec::target);
    let b = Benchmark::new(&source, &target)?;
    let manifest = write_dataset(
        &a.out,
        &[
            ("source_train", &b.source_train),
            ("source_eval", &b.source_eval),
            ("target", &b.target),
        ],
    )?;
    println!(
        "{}",
        json!({ "out": a.out, "samples": manifest.entries.len(), "source": source, "target": target })
    );
    Ok(ExitCode::SUCCESS)
}

/// Runs `trainer` to completion, logging each step as one JSON line, and
/// saves the final checkpoint.
fn run(
    mut trainer: Trainer,
    cfg: &PhaseConfig,
    data: PhaseData<'_>,
    args: &TrainArgs,
) -> Result<ExitCode> {
    let digest = cfg.digest_hex();
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("jsonl"));
    let file = File::create(&log_path).map_err(|source| Error::Io {
        path: log_path.clone(),
        source,
    })?;
    let mut log = BufWriter::new(file);
    let mut last: Option<StepRecord> = None;
    let mut io_err = None;
    let outcome = trainer.run(data, |r| {
        let mut v = serde_json::to_value(r).expect("step records serialise");
        v["config_digest"] = Value::from(digest.as_str());
        if let Err(e) = writeln!(log, "{v}") {
            io_err.get_or_insert(e);
        }
        last = Some(r.clone());
    });
    log.flush().ok();
    outcome?;
    if let Some(source) = io_err {
        return Err(Error::Io {
            path: log_path,
            source,
        });
    }
    trainer.checkpoint().save(&args.out)?;
    println!(
        "{}",
        json!({
            "phase": cfg.phase.to_string(),
            "steps": trainer.step_count(),
            "final": last,
            "checkpoint": args.out,
            "log": log_path,
            "config_digest": digest,
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn train_source(a: TrainArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.common, Phase::A)?;
    cfg.validate()?;
    let data = benchmark(a.common.data.as_deref())?;
    let trainer = Trainer::phase_a(cfg.clone())?;
    run(
        trainer,
        &cfg,
        PhaseData {
            source: &data.source_train,
            target: &[],
        },
        &a,
    )
}

fn train_poly(a: PolyArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.train.common, Phase::B)?;
    cfg.validate()?;
    let backbone = Checkpoint::load(&a.backbone)?;
    let data = benchmark(a.train.common.data.as_deref())?;
    let trainer = Trainer::phase_b(&backbone, cfg.clone())?;
    run(
        trainer,
        &cfg,
        PhaseData {
            source: &data.source_train,
            target: &[],
        },
        &a.train,
    )
}

fn adapt(a: AdaptArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&a.train.common, Phase::C)?;
    if let Some(k) = a.shots {
        cfg.shots = k;
    }
    let f = &mut cfg.flags;
    if a.sup {
        f.use_sup = true;
    }
    if a.no_sup {
        f.use_sup = false;
    }
    match a.adv {
        Some(AdvArg::Off) => f.use_adv = false,
        Some(AdvArg::Features) => (f.use_adv, f.adv_mode) = (true, AdvMode::Features),
        Some(AdvArg::Masks) => (f.use_adv, f.adv_mode) = (true, AdvMode::Masks),
        None => {}
    }
    match a.scope {
        Some(ScopeArg::K) => f.k_scope = KScope::KOnly,
        Some(ScopeArg::All) => f.k_scope = KScope::AllWeights,
        None => {}
    }
    match a.bn {
        Some(BnArg::Full) => f.bn_mode = BnAdapt::Full,
        Some(BnArg::StatsOnly) => f.bn_mode = BnAdapt::StatsOnly,
        None => {}
    }
    if let Some(l) = a.lambda {
        f.lambda = l;
    }
    cfg.validate()?;
    let poly = Checkpoint::load(&a.checkpoint)?;
    let data = benchmark(a.train.common.data.as_deref())?;
    let (shots, _) = few_shot_split(&data.target, cfg.shots, cfg.seed)?;
    let trainer = Trainer::phase_c(&poly, cfg.clone())?;
    eprintln!(
        "adapting with {} ({} shots)",
        cfg.flags.row()?.label(),
        shots.len()
    );
    run(
        trainer,
        &cfg,
        PhaseData {
            source: &data.source_train,
            target: &shots,
        },
        &a.train,
    )
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.build_model()?;
    let data = benchmark(a.data.as_deref())?;
    let samples: Vec<Sample> = match (a.dataset, a.shots) {
        (DatasetArg::Source, _) => data.source_eval,
        (DatasetArg::Target, Some(k)) => few_shot_split(&data.target, k, a.seed)?.1,
        (DatasetArg::Target, None) => data.target,
    };
    // Adapted layers read target images through their target keys.
    let route = match ckpt.meta.polyformer {
        Some((_, LayerStage::TargetReady)) if matches!(a.dataset, DatasetArg::Target) => {
            Domain::Target
        }
        _ => Domain::Source,
    };
    let report = evaluate(&model, &samples, route, &hex(&ckpt.meta.config_digest))?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        write_text(out, &format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn ablate(a: AblateArgs) -> Result<ExitCode> {
    let common = Common {
        config: a.config.clone(),
        data: a.data.clone(),
        seed: None,
        steps: a.steps,
    };
    let mut base = load_config(&common, Phase::C)?;
    if let Some(k) = a.shots {
        base.shots = k;
    }
    base.validate()?;
    if a.seeds.is_empty() {
        return Err(Error::Config("at least one seed is needed".into()));
    }
    let poly = Checkpoint::load(&a.checkpoint)?;
    check_poly_checkpoint(&poly)?;
    let data = benchmark(a.data.as_deref())?;
    let table = ablation_suite(
        &poly,
        &data.target,
        &data.source_train,
        &base,
        &a.seeds,
        |name| {
            eprintln!("done: {name}");
        },
    )?;
    let text = format!("config digest {}\n{}", base.digest_hex(), table.to_text());
    print!("{text}");
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.clone(),
            source,
        })?;
        write_text(&dir.join("table.txt"), &text)?;
        write_text(&dir.join("table.csv"), &table.to_csv())?;
        let v = json!({ "config_digest": base.digest_hex(), "table": table });
        write_text(
            &dir.join("table.json"),
            &format!("{}\n", serde_json::to_string_pretty(&v)?),
        )?;
    }
    let violated: Vec<String> = table
        .rows
        .iter()
        .filter(|r| !r.ledger_ok)
        .map(|r| r.name.clone())
        .collect();
    if !violated.is_empty() {
        let e = Error::Ledger {
            phase: "C".into(),
            names: violated,
        };
        eprintln!("error: {e}");
        return Ok(ExitCode::from(exit_code(&e)));
    }
    Ok(ExitCode::SUCCESS)
}
