use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use socov::ablation::{default_grid, render_table, run_ablation};
use socov::config::ExperimentConfig;
use socov::corpus::{generate_range, load_corpus, write_corpus, MANIFEST_FILE};
use socov::diagnostics::{constraint_trajectory, gradient_suite, pooling_property_suite, SuiteRow};
use socov::embednet::checkpoint::Checkpoint;
use socov::evalkit::{labeled_scores, render_det, render_scores, score_trials, EmbeddingTable, MetricReport, TrialList};
use socov::trainer::{render_metrics, train_run};
use socov::{ablation::embed_corpus, Error};

#[derive(Parser)]
#[command(name = "socov", version, about = "Covariance pooling speaker embeddings on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DcfArgs {
    #[arg(long = "dcf-ptarget")]
    p_target: Option<f64>,
    #[arg(long = "dcf-cmiss")]
    c_miss: Option<f64>,
    #[arg(long = "dcf-cfa")]
    c_fa: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes `<out>/train`, `<out>/eval` and `<out>/trials.tsv`.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains on a corpus directory; writes the checkpoint and `<out>.metrics.tsv`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus directory, or a gen-data directory (its `train/` is used).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes one embedding row per manifest segment.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory, or a gen-data directory (its `eval/` is used).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// When given, its pooling and model sections must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Scores a trial list; writes scores.tsv, metrics.tsv and det.tsv into `--out`.
    ScoreEval {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        dcf: DcfArgs,
    },
    /// Trains and evaluates every pooling configuration of the default grid.
    Ablation {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// A gen-data directory with `train/` and `eval/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        dcf: DcfArgs,
    },
    /// Runs a self-check suite.
    Check {
        what: CheckKind,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckKind {
    Grad,
    Constraint,
    PoolingProps,
}

enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Input(_) | Error::Lookup(_) | Error::Dimension { .. } => 2,
        Error::Io { .. } | Error::Format(_) | Error::Truncated { .. } => 3,
        Error::Numeric(_) | Error::Training { .. } | Error::Metric(_) => 4,
    }
}

fn load_config(args: &ConfigArgs) -> socov::Result<ExperimentConfig> {
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::read(path)?,
        None => ExperimentConfig::default(),
    };
    let cfg = match args.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn apply_dcf(cfg: &mut ExperimentConfig, dcf: &DcfArgs) -> socov::Result<()> {
    if let Some(v) = dcf.p_target {
        cfg.eval.p_target = v;
    }
    if let Some(v) = dcf.c_miss {
        cfg.eval.c_miss = v;
    }
    if let Some(v) = dcf.c_fa {
        cfg.eval.c_fa = v;
    }
    cfg.eval.validate()
}

/// `dir` itself when it holds a manifest, otherwise `dir/sub`.
fn corpus_dir(dir: &Path, sub: &str) -> PathBuf {
    if dir.join(MANIFEST_FILE).is_file() || !dir.join(sub).join(MANIFEST_FILE).is_file() {
        dir.to_path_buf()
    } else {
        dir.join(sub)
    }
}

fn write(path: &Path, text: &str) -> socov::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn gen_data(cfg: &ConfigArgs, out: &Path) -> CliResult {
    let cfg = load_config(cfg)?;
    let train = generate_range::<f64>(&cfg.corpus, 0)?;
    let eval = generate_range::<f64>(&cfg.eval_corpus_spec(), cfg.corpus.num_speakers)?;
    write_corpus(&train.corpus, out.join("train"))?;
    write_corpus(&eval.corpus, out.join("eval"))?;
    let ids: Vec<(String, String)> = eval
        .corpus
        .segments
        .iter()
        .map(|s| (s.segment_id.clone(), s.speaker_id.clone()))
        .collect();
    TrialList::all_pairs(&ids).write(out.join("trials.tsv"))?;
    println!(
        "wrote {} training and {} evaluation segments to {}",
        train.corpus.len(),
        eval.corpus.len(),
        out.display()
    );
    Ok(())
}

fn train(cfg: &ConfigArgs, data: &Path, out: &Path) -> CliResult {
    let cfg = load_config(cfg)?;
    let corpus = load_corpus::<f64>(corpus_dir(data, "train"))?;
    let outcome = train_run(&corpus, &cfg.train, &cfg.model, &cfg.pooling)?;
    outcome.checkpoint().write(out)?;
    let mut metrics = out.as_os_str().to_owned();
    metrics.push(".metrics.tsv");
    write(Path::new(&metrics), &render_metrics(&outcome.log))?;
    for m in &outcome.log {
        println!("{}", m.render());
    }
    match outcome.log.last() {
        Some(m) => println!("final epoch {} loss {:.6} accuracy {:.4}", m.epoch, m.mean_loss, m.accuracy),
        None => println!("no epochs run; checkpoint holds the initialization"),
    }
    Ok(())
}

fn extract(checkpoint: &Path, data: &Path, out: &Path, config: Option<&Path>) -> CliResult {
    let ck = Checkpoint::<f64>::read(checkpoint)?;
    if let Some(path) = config {
        let cfg = ExperimentConfig::read(path)?;
        if cfg.pooling != ck.model.pooling || cfg.model != ck.model.dims {
            let show = |pooling, model| {
                let c = ExperimentConfig {
                    pooling,
                    model,
                    ..ExperimentConfig::default()
                };
                let text = c.render().unwrap_or_default();
                text.split("\n[")
                    .filter(|s| s.starts_with("pooling]") || s.starts_with("model]"))
                    .map(|s| format!("[{s}\n"))
                    .collect::<String>()
            };
            eprintln!("config:\n{}", show(cfg.pooling, cfg.model.clone()));
            eprintln!("checkpoint:\n{}", show(ck.model.pooling, ck.model.dims.clone()));
            return Err(Error::Config("pooling/model configuration differs from the checkpoint".into()).into());
        }
    }
    let corpus = load_corpus::<f64>(corpus_dir(data, "eval"))?;
    let table = embed_corpus(&ck.model, &corpus)?;
    write(out, &table.render())?;
    println!("wrote {} embeddings to {}", table.len(), out.display());
    Ok(())
}

fn score_eval(embeddings: &Path, trials: &Path, out: &Path, cfg: &ConfigArgs, dcf: &DcfArgs) -> CliResult {
    let mut cfg = load_config(cfg)?;
    apply_dcf(&mut cfg, dcf)?;
    let table = EmbeddingTable::read(embeddings)?;
    let trials = TrialList::read(trials)?;
    let scores = score_trials(&trials, &table, cfg.eval.length_normalize)?;
    let report = MetricReport::compute(&labeled_scores(&scores), &cfg.eval.dcf())?;
    write(&out.join("scores.tsv"), &render_scores(&scores))?;
    write(&out.join("metrics.tsv"), &report.render())?;
    write(&out.join("det.tsv"), &render_det(&report.det_points))?;
    print!("{}", report.render());
    Ok(())
}

fn ablation(cfg: &ConfigArgs, data: &Path, out: &Path, dcf: &DcfArgs) -> CliResult {
    let mut cfg = load_config(cfg)?;
    apply_dcf(&mut cfg, dcf)?;
    let train = load_corpus::<f64>(data.join("train"))?;
    let eval = load_corpus::<f64>(data.join("eval"))?;
    let grid = default_grid(cfg.pooling.constraint_interval);
    let rows = run_ablation(&train, &eval, &cfg.train, &cfg.model, &grid, &cfg.eval)?;
    let table = render_table(&rows);
    write(out, &table)?;
    print!("{table}");
    Ok(())
}

fn print_suite(rows: &[SuiteRow]) -> CliResult {
    println!("suite\tinstances\tworst\ttolerance\tstatus");
    for r in rows {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{}\t{}\t{:.3e}\t{:.0e}\t{status}", r.name, r.instances, r.worst, r.tolerance);
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} suite(s) over tolerance")));
    }
    Ok(())
}

fn check_constraint(seed: u64) -> CliResult {
    let traj = constraint_trajectory(0.5, 16, 6, seed)?;
    println!("k\tnorm\trecurrence\terror\tratio");
    let mut ok = true;
    for it in &traj {
        let ratio = it.ratio.map_or_else(|| "-".to_string(), |r| format!("{r:.6}"));
        println!("{}\t{:.17}\t{:.17}\t{:.3e}\t{ratio}", it.iteration, it.norm, it.scalar_norm, it.error);
        ok &= (it.norm - it.scalar_norm).abs() <= 1e-14;
        ok &= it.ratio.is_none_or(|r| r <= 2.0 || it.error < 1e-15);
    }
    ok &= traj.last().is_some_and(|it| it.error < 1e-9);
    if !ok {
        return Err(Failure::Check("constraint trajectory outside bounds".into()));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData { cfg, out } => gen_data(&cfg, &out),
        Command::Train { cfg, data, out } => train(&cfg, &data, &out),
        Command::Extract {
            checkpoint,
            data,
            out,
            config,
        } => extract(&checkpoint, &data, &out, config.as_deref()),
        Command::ScoreEval {
            embeddings,
            trials,
            out,
            cfg,
            dcf,
        } => score_eval(&embeddings, &trials, &out, &cfg, &dcf),
        Command::Ablation { cfg, data, out, dcf } => ablation(&cfg, &data, &out, &dcf),
        Command::Check { what, seed } => match what {
            CheckKind::Grad => print_suite(&gradient_suite(100, seed)?),
            CheckKind::Constraint => check_constraint(seed),
            CheckKind::PoolingProps => print_suite(&pooling_property_suite(1000, seed)?),
        },
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(4)
        }
    }
}
