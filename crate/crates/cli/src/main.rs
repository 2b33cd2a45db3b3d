//! `pairuni`: build UG pair datasets, inspect them, train the toy policy and
//! run the gradient-agreement study.
//!
//! Exit codes: 0 success, 1 internal error, 2 schema, 3 config, 4 I/O,
//! 5 dataset verification failure.

use std::fs;
use std::io::{BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use pairuni::analysis::{
    agreement_csv, run_agreement_study, smoothed_csv, summarize_rewards, Regime,
};
use pairuni::clustering::ClusterModel;
use pairuni::config::{ConfigError, RunConfig};
use pairuni::features::{load_features, write_features, FeatureError};
use pairuni::pairing::{
    build_pair_dataset, compute_stats, load_quadruples, verify_pairs, write_pairs,
    AugmentationClient, GreedyOrder, PairDataset, PairingError, StubAugmenter,
};
use pairuni::synth::generate;
use pairuni::training::{log_csv, run_training, Objective, TrainError};

const EXIT_INTERNAL: u8 = 1;
const EXIT_SCHEMA: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_VERIFY: u8 = 5;

#[derive(Parser)]
#[command(
    name = "pairuni",
    version,
    about = "UG data pairing and similarity-weighted GRPO"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pair dataset construction and inspection.
    #[command(subcommand)]
    Pair(PairCommand),
    /// Train the toy policy on a pair dataset.
    Train(TrainArgs),
    /// Gradient agreement between understanding and generation across regimes.
    Agreement(AgreementArgs),
    /// Write a synthetic feature corpus with quadruples.
    Synth(SynthArgs),
}

#[derive(Subcommand)]
enum PairCommand {
    /// Build aligned and retrieved pairs from feature files.
    Build(BuildArgs),
    /// Summarize (and optionally verify) a pairs file.
    Stats(StatsArgs),
}

#[derive(Args)]
struct Common {
    /// Dotted-key config file; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed, overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BuildArgs {
    /// Understanding-split feature file (JSONL).
    #[arg(long)]
    und: PathBuf,
    /// Generation-split feature file (JSONL).
    #[arg(long)]
    gen: PathBuf,
    /// Quadruple records for both splits (JSONL).
    #[arg(long)]
    quadruples: PathBuf,
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Reuse a stored cluster model instead of fitting one.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Retrieval visit order: `id` or `max-sim-desc`.
    #[arg(long, value_parser = parse_greedy_order)]
    greedy_order: Option<GreedyOrder>,
    /// Complete incomplete medoid quadruples with the canned stub client.
    #[arg(long)]
    augment_stub: bool,
}

#[derive(Args)]
struct StatsArgs {
    /// Pairs file to summarize.
    pairs: PathBuf,
    /// Check threshold, weight law and single-use invariants; exit 5 on failure.
    #[arg(long)]
    verify: bool,
    /// Threshold used by `--verify`.
    #[arg(long, default_value_t = 0.6)]
    delta: f64,
    /// Print the stats as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Pair dataset written by `pair build`.
    #[arg(long)]
    pairs: PathBuf,
    #[command(flatten)]
    common: Common,
    /// `vanilla`, `pairwise` or `pair-grpo`.
    #[arg(long, value_parser = parse_objective)]
    objective: Option<Objective>,
    /// Force every pair weight to 1.
    #[arg(long)]
    no_sim_weight: bool,
    /// Overrides `steps` in the config.
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AgreementArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides `agreement.steps` in the config.
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_greedy_order(s: &str) -> Result<GreedyOrder, String> {
    s.parse::<GreedyOrder>().map_err(|e| e.to_string())
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    s.parse()
}

/// An error paired with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn config_failure(e: ConfigError) -> Failure {
    let code = match e {
        ConfigError::Io { .. } => EXIT_IO,
        _ => EXIT_CONFIG,
    };
    Failure::new(code, e)
}

fn feature_failure(path: &Path, e: FeatureError) -> Failure {
    let code = match e {
        FeatureError::Io(_) => EXIT_IO,
        _ => EXIT_SCHEMA,
    };
    Failure::new(
        code,
        anyhow::Error::new(e).context(path.display().to_string()),
    )
}

fn pairing_failure(e: PairingError) -> Failure {
    let code = match e {
        PairingError::Io(_) => EXIT_IO,
        PairingError::InvalidConfig(_) | PairingError::Cluster(_) => EXIT_CONFIG,
        _ => EXIT_SCHEMA,
    };
    Failure::new(code, e)
}

fn io_failure(e: impl Into<anyhow::Error>) -> Failure {
    Failure::new(EXIT_IO, e)
}

fn load_config(common: &Common) -> CmdResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(config_failure)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Files of one command, written only once every one of them is ready.
struct Outputs {
    dir: PathBuf,
    files: Vec<(&'static str, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: &'static str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name, bytes.into()));
    }

    /// Writes each file to a temporary sibling and renames it into place.
    fn commit(self) -> CmdResult {
        fs::create_dir_all(&self.dir)
            .with_context(|| format!("creating {}", self.dir.display()))
            .map_err(io_failure)?;
        for (name, bytes) in &self.files {
            let target = self.dir.join(name);
            let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(io_failure)?;
            tmp.write_all(bytes).map_err(io_failure)?;
            tmp.persist(&target)
                .with_context(|| format!("writing {}", target.display()))
                .map_err(io_failure)?;
        }
        Ok(())
    }
}

fn to_json(value: &impl serde::Serialize) -> CmdResult<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| Failure::new(EXIT_INTERNAL, e))?;
    out.push(b'\n');
    Ok(out)
}

fn cmd_pair_build(args: BuildArgs) -> CmdResult {
    let mut cfg = load_config(&args.common)?;
    if let Some(order) = args.greedy_order {
        cfg.pairing.greedy_order = order;
    }
    cfg.validate().map_err(config_failure)?;

    let und = load_features(&args.und).map_err(|e| feature_failure(&args.und, e))?;
    let gen = load_features(&args.gen).map_err(|e| feature_failure(&args.gen, e))?;
    let quads = load_quadruples(&args.quadruples).map_err(|e| {
        let code = pairing_failure_code(&e);
        Failure::new(
            code,
            anyhow::Error::new(e).context(args.quadruples.display().to_string()),
        )
    })?;
    let resume = match &args.resume {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(io_failure)?;
            let model: ClusterModel = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(|e| Failure::new(EXIT_SCHEMA, e))?;
            Some(model)
        }
        None => None,
    };
    let stub = StubAugmenter;
    let augmenter: Option<&dyn AugmentationClient> = args.augment_stub.then_some(&stub as _);
    let mut dataset = build_pair_dataset(
        &und,
        &gen,
        &quads,
        &cfg.pairing,
        &cfg.clustering_config(),
        resume,
        augmenter,
    )
    .map_err(pairing_failure)?;
    if dataset.stats.counts.retrieved == 0 {
        tracing::warn!(
            delta = cfg.pairing.delta,
            "no retrieved pairs were produced"
        );
    }
    dataset.stats.config =
        Some(serde_json::to_value(&cfg.pairing).map_err(|e| Failure::new(EXIT_INTERNAL, e))?);

    let mut pairs = Vec::new();
    write_pairs(&mut pairs, &dataset.records).map_err(io_failure)?;
    let mut out = Outputs::new(&args.out);
    out.add("pairs.jsonl", pairs);
    out.add("pairs.stats.json", to_json(&dataset.stats)?);
    out.add("cluster_model.json", to_json(&dataset.model)?);
    out.add("config.toml", cfg.echo());
    out.commit()?;
    println!(
        "{} aligned, {} retrieved pairs -> {}",
        dataset.stats.counts.aligned,
        dataset.stats.counts.retrieved,
        args.out.display()
    );
    Ok(())
}

fn pairing_failure_code(e: &PairingError) -> u8 {
    match e {
        PairingError::Io(_) => EXIT_IO,
        _ => EXIT_SCHEMA,
    }
}

fn load_pairs(path: &Path) -> CmdResult<Vec<pairuni::PairRecord>> {
    PairDataset::load(path).map_err(|e| {
        let code = pairing_failure_code(&e);
        Failure::new(
            code,
            anyhow::Error::new(e).context(path.display().to_string()),
        )
    })
}

fn cmd_pair_stats(args: StatsArgs) -> CmdResult {
    let records = load_pairs(&args.pairs)?;
    let stats = compute_stats(&records);
    let stdout = std::io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    if args.json {
        w.write_all(&to_json(&stats)?).map_err(io_failure)?;
    } else {
        let c = &stats.counts;
        writeln!(w, "aligned    {}", c.aligned).map_err(io_failure)?;
        writeln!(w, "retrieved  {}", c.retrieved).map_err(io_failure)?;
        for (label, ws) in [
            ("aligned", &stats.weight_aligned),
            ("retrieved", &stats.weight_retrieved),
        ] {
            if let Some(ws) = ws {
                writeln!(
                    w,
                    "weight {label:<9} min {:.4} mean {:.4} max {:.4}",
                    ws.min, ws.mean, ws.max
                )
                .map_err(io_failure)?;
            }
        }
        writeln!(w, "similarity histogram").map_err(io_failure)?;
        for b in stats
            .similarity_histogram
            .iter()
            .filter(|b| b.aligned + b.retrieved > 0)
        {
            writeln!(
                w,
                "  [{:.2}, {:.2})  aligned {:>6}  retrieved {:>6}",
                b.lo, b.hi, b.aligned, b.retrieved
            )
            .map_err(io_failure)?;
        }
    }
    w.flush().map_err(io_failure)?;
    drop(w);
    if args.verify {
        let violations = verify_pairs(&records, args.delta);
        if !violations.is_empty() {
            for v in &violations {
                eprintln!("{}: {v}", args.pairs.display());
            }
            return Err(Failure::new(
                EXIT_VERIFY,
                anyhow::anyhow!("{} violation(s)", violations.len()),
            ));
        }
        eprintln!("verified {} pairs", records.len());
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let mut cfg = load_config(&args.common)?;
    if let Some(o) = args.objective {
        cfg.train.objective = o;
    }
    if args.no_sim_weight {
        cfg.train.sim_weight = false;
    }
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    cfg.validate().map_err(config_failure)?;
    let records = load_pairs(&args.pairs)?;
    let outcome = run_training(&records, &cfg).map_err(|e| match e {
        TrainError::EmptyDataset => Failure::new(EXIT_SCHEMA, e),
        _ => Failure::new(EXIT_INTERNAL, e),
    })?;
    let log = log_csv(&outcome.log);
    let smoothed = summarize_rewards(&log).map_err(|e| Failure::new(EXIT_INTERNAL, e))?;
    let checkpoint = outcome
        .policy
        .to_json()
        .map_err(|e| Failure::new(EXIT_INTERNAL, e))?;
    let mut out = Outputs::new(&args.out);
    out.add("train_log.csv", log);
    out.add("rewards_smoothed.csv", smoothed_csv(&smoothed));
    out.add("checkpoint.json", checkpoint);
    out.add("config.toml", cfg.echo());
    out.commit()?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!(
            "{} steps of {}: combined reward {:.3} -> {:.3}",
            outcome.log.len(),
            cfg.train.objective,
            first.combined_reward(),
            last.combined_reward()
        );
    }
    Ok(())
}

fn cmd_agreement(args: AgreementArgs) -> CmdResult {
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = args.steps {
        cfg.agreement.steps = s;
    }
    cfg.validate().map_err(config_failure)?;
    let study = run_agreement_study(&Regime::ALL, cfg.seed, &cfg.agreement, &cfg.grpo)
        .map_err(|e| Failure::new(EXIT_INTERNAL, e))?;
    let summary = serde_json::json!({
        "seed": study.seed,
        "median_scope": study.median_scope,
        "regimes": study.summary,
    });
    let mut out = Outputs::new(&args.out);
    out.add("agreement.csv", agreement_csv(&study));
    out.add("agreement_summary.json", to_json(&summary)?);
    out.add("config.toml", cfg.echo());
    out.commit()?;
    for (regime, s) in &study.summary {
        println!("{regime:<20} median grad_cos {:+.4}", s.median);
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let cfg = load_config(&args.common)?;
    cfg.validate().map_err(config_failure)?;
    let corpus = generate(&cfg.synth, cfg.subsystem_seed("synth"))
        .map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    let mut und = Vec::new();
    write_features(&mut und, corpus.und.vectors()).map_err(io_failure)?;
    let mut gen = Vec::new();
    write_features(&mut gen, corpus.gen.vectors()).map_err(io_failure)?;
    let mut quads = Vec::new();
    for q in &corpus.quadruples {
        serde_json::to_writer(&mut quads, q).map_err(|e| Failure::new(EXIT_INTERNAL, e))?;
        quads.push(b'\n');
    }
    let mut out = Outputs::new(&args.out);
    out.add("und.jsonl", und);
    out.add("gen.jsonl", gen);
    out.add("quadruples.jsonl", quads);
    out.add("config.toml", cfg.echo());
    out.commit()?;
    println!(
        "{} understanding, {} generation items -> {}",
        corpus.und.len(),
        corpus.gen.len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_ansi(std::io::stderr().is_terminal())
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pair(PairCommand::Build(a)) => cmd_pair_build(a),
        Command::Pair(PairCommand::Stats(a)) => cmd_pair_stats(a),
        Command::Train(a) => cmd_train(a),
        Command::Agreement(a) => cmd_agreement(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
