use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdn_core::checkpoint;
use cdn_core::evaluation::{run_protocol, Protocol, ProtocolOutputs};
use cdn_core::experiment::{load_manifest, run_experiment, RunConfig};
use cdn_core::losses::LossWeights;
use cdn_core::synthdata::{build_dataset, DatasetConfig, MANIFEST_FILE};
use cdn_core::theory_check::{run_checks, CheckName};
use cdn_core::training::{train_from, Ablation, ClassifierInput, TargetEncoder, TrainConfig, TrainPool, TrainState, CHECKPOINT_FILE};
use cdn_core::{CdnError, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Contrastive desensitization for face forgery detection on synthetic data.
#[derive(Parser, Debug)]
#[command(name = "cdn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multi-domain dataset.
    GenData(GenDataArgs),
    /// Train a detector on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint under one protocol.
    Eval(EvalArgs),
    /// Run the numerical theory checks.
    Theory(TheoryArgs),
    /// Generate, train and evaluate from a run configuration.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 200)]
    identities: u32,
    #[arg(long, default_value_t = 3)]
    domains: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    fakes_per_real: u32,
    #[arg(long, env = "CDN_OUT_ROOT")]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum TargetArg {
    Momentum,
    Online,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ClassifierInputArg {
    Mixed,
    Clean,
    MixedAll,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AblationArg {
    Dt,
    Dl,
    Dbc,
    Layer1,
    Layer2,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ProtocolArg {
    Intra,
    Cross,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory containing the manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, env = "CDN_OUT_ROOT")]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.999)]
    momentum_m: f64,
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2])]
    layer_taps: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    lambda_d: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_i: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_s: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda_b: f64,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, value_enum, default_value_t = TargetArg::Momentum)]
    target_encoder: TargetArg,
    #[arg(long, value_enum, default_value_t = ClassifierInputArg::Clean)]
    classifier_input: ClassifierInputArg,
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 32])]
    stage_channels: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    head_hidden: usize,
    /// Switch off a component; repeatable.
    #[arg(long, value_enum)]
    ablate: Vec<AblationArg>,
    /// Continue from the checkpoint in the output directory up to `--steps`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    protocol: ProtocolArg,
    #[arg(long, env = "CDN_OUT_ROOT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TheoryArgs {
    /// Comma-separated subset of kl, theorem1, theorem2, nll, delta.
    #[arg(long, value_delimiter = ',', default_value = "kl,theorem1,theorem2,nll,delta")]
    checks: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the records as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, env = "CDN_OUT_ROOT")]
    out: PathBuf,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        let mut cfg = TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            momentum_m: self.momentum_m,
            alpha: self.alpha,
            layer_taps: self.layer_taps.clone(),
            weights: LossWeights { lambda_d: self.lambda_d, lambda_i: self.lambda_i, lambda_s: self.lambda_s, lambda_b: self.lambda_b },
            steps: self.steps,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            eps: self.eps,
            target_encoder: match self.target_encoder {
                TargetArg::Momentum => TargetEncoder::Momentum,
                TargetArg::Online => TargetEncoder::Online,
            },
            classifier_input: match self.classifier_input {
                ClassifierInputArg::Mixed => ClassifierInput::Mixed,
                ClassifierInputArg::Clean => ClassifierInput::Clean,
                ClassifierInputArg::MixedAll => ClassifierInput::MixedAll,
            },
            ..TrainConfig::default()
        };
        cfg.model.stage_channels = self.stage_channels.clone();
        cfg.model.head_hidden = self.head_hidden;
        for a in &self.ablate {
            let a = match a {
                AblationArg::Dt => Ablation::Dt,
                AblationArg::Dl => Ablation::Dl,
                AblationArg::Dbc => Ablation::Dbc,
                AblationArg::Layer1 => Ablation::Layer1,
                AblationArg::Layer2 => Ablation::Layer2,
            };
            a.apply(&mut cfg);
        }
        cfg
    }
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg = DatasetConfig::standard(args.identities, args.domains, args.seed);
    cfg.fakes_per_real = args.fakes_per_real;
    build_dataset(&cfg, &args.out)?;
    println!("{}", args.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let manifest = load_manifest(&args.data)?;
    let pool = TrainPool::from_manifest(&manifest)?;
    let state = if args.resume {
        let mut s = checkpoint::load(&args.out.join(CHECKPOINT_FILE))?;
        s.config.steps = args.steps;
        s
    } else {
        let cfg = args.config();
        cfg.validate()?;
        TrainState::new(cfg)?
    };
    let state = train_from(state, &pool, &args.out)?;
    if let Some(last) = state.history.last() {
        println!("step {} total {:.6} cls {:.6}", state.step, last.total, last.cls);
    }
    println!("{}", args.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let manifest = load_manifest(&args.data)?;
    let state = checkpoint::load(&args.checkpoint)?;
    let protocol = match args.protocol {
        ProtocolArg::Intra => Protocol::Intra,
        ProtocolArg::Cross => Protocol::Cross,
    };
    let report = run_protocol(&state.bundle, &manifest, protocol, &args.out)?;
    print_report(protocol, &report);
    println!("{}", ProtocolOutputs::in_dir(&args.out, protocol).report.display());
    Ok(())
}

fn print_report(p: Protocol, r: &cdn_core::evaluation::EvalReport) {
    let fpr85 = r.fpr_at(0.85).unwrap_or(f64::NAN);
    println!("{p}: acc {:.4} auc {:.4} eer {:.4} fpr@tpr85 {:.4} fnr {:.4} fpr {:.4}", r.acc, r.auc, r.eer, fpr85, r.fnr, r.fpr);
}

fn theory_cmd(args: &TheoryArgs) -> Result<bool> {
    let checks = args.checks.iter().map(|s| s.trim().parse::<CheckName>()).collect::<Result<Vec<_>>>()?;
    let records = run_checks(&checks, args.seed)?;
    for r in &records {
        println!("{} statistic={:e} threshold={:e} {}", r.name, r.statistic, r.threshold, if r.pass { "PASS" } else { "FAIL" });
    }
    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&records).map_err(|e| CdnError::Serialization(e.to_string()))?;
        write_file(path, json.as_bytes())?;
    }
    Ok(records.iter().all(|r| r.pass))
}

fn run_cmd(args: &RunArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let outcome = run_experiment(&cfg, &args.out)?;
    for (p, r) in &outcome.reports {
        print_report(*p, r);
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CdnError::Io { path: dir.to_path_buf(), source: e })?;
    }
    std::fs::write(path, bytes).map_err(|e| CdnError::Io { path: path.to_path_buf(), source: e })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::Theory(a) => theory_cmd(a),
        Command::Run(a) => run_cmd(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
