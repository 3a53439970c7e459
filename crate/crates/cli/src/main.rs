mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use livekt::baselines::{LogisticRegression, LrParams, Majority, Predictor};
use livekt::bench::{run_bench, write_bench_csv, BenchParams};
use livekt::container::write_atomic;
use livekt::data::{dataset_stats, parse_interactions, parse_interactions_lenient, remap_ids, split_students, Dataset, DATASET_MAGIC};
use livekt::encoding::build_tables;
use livekt::eval::{format_table, render_svg, run_live_eval, speedup_lines, to_json, write_csv, LiveSchedule};
use livekt::gbdt::{Gbdt, GbdtParams};
use livekt::minipfn::{explain, predict_in_context, MiniPfn, MiniPfnConfig, MiniPfnWeights};
use livekt::pretrain::{initial_checkpoint, resume, write_loss_curve, Checkpoint, PretrainHooks, TrainParams};
use livekt::prior::{PriorConfig, Range};
use livekt::synth::{synth_dataset, write_interactions_csv, SynthParams};

use crate::config::ExperimentConfig;

const MODEL_NAMES: [&str; 4] = ["majority", "lr", "gbdt", "minipfn"];

static STOP: AtomicBool = AtomicBool::new(false);

#[derive(Parser)]
#[command(name = "livekt", version, about = "Live knowledge tracing with in-context and trained predictors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate an interaction CSV and store it as a binary dataset.
    Ingest(IngestArgs),
    /// Run the live evaluation protocol for one or more models.
    Eval(EvalArgs),
    /// Pretrain MiniPFN on simulated students.
    Pretrain(PretrainArgs),
    /// List the train students a MiniPFN prediction attends to most.
    Explain(ExplainArgs),
    /// Time in-context prediction across student counts and horizons.
    Bench(BenchArgs),
    /// Write a simulated interaction CSV.
    Synth(SynthArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Drop malformed rows instead of failing.
    #[arg(long)]
    lenient: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// TOML experiment manifest; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated subset of majority, lr, gbdt, minipfn.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    #[arg(long = "T", value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    split_ratio: Option<f64>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subset of json, csv, svg.
    #[arg(long, value_delimiter = ',')]
    emit: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue logistic regression from the previous horizon's weights.
    #[arg(long)]
    warm_start: bool,
}

#[derive(Args)]
struct PretrainArgs {
    /// Output weights file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    episodes: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1_000)]
    checkpoint_every: usize,
    /// Checkpoint file; defaults to `<out>.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Loss curve CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Share of episodes drawn from the structural prior.
    #[arg(long, default_value_t = 0.0)]
    scm_weight: f64,
    #[arg(long)]
    min_students: Option<usize>,
    #[arg(long)]
    max_students: Option<usize>,
    #[arg(long)]
    max_horizon: Option<usize>,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 3)]
    blocks: usize,
    #[arg(long, default_value_t = 128)]
    d_ff: usize,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// External ID of a test-side student.
    #[arg(long)]
    student: String,
    #[arg(long = "T")]
    horizon: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 0.8)]
    split_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
    sizes: Vec<usize>,
    #[arg(long = "T", value_delimiter = ',', default_value = "5,10,15,20")]
    horizons: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    students: usize,
    #[arg(long, default_value_t = 100)]
    questions: usize,
    #[arg(long, default_value_t = 10)]
    skills: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure with the exit code it maps to.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let usage = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<livekt::Error>(),
                Some(livekt::Error::MissingHeader { .. } | livekt::Error::Parse { .. } | livekt::Error::InvalidArgument(_) | livekt::Error::WidthOverflow { .. })
            )
        });
        if usage {
            Failure::Usage(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<livekt::Error> for Failure {
    fn from(e: livekt::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg.into()))
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("LIVEKT_THREADS") {
        let n: usize = v.parse().with_context(|| format!("LIVEKT_THREADS must be a positive integer, got `{v}`"))?;
        anyhow::ensure!(n > 0, "LIVEKT_THREADS must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn is_dataset_container(path: &Path) -> anyhow::Result<bool> {
    let mut head = [0u8; 4];
    let mut f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let n = f.read(&mut head)?;
    Ok(n == 4 && head == DATASET_MAGIC)
}

fn read_csv(path: &Path, lenient: bool) -> Result<(Dataset, usize), Failure> {
    if is_dataset_container(path)? {
        return Err(usage(format!("{} is a binary dataset container, not an interaction CSV", path.display())));
    }
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let reader = BufReader::new(file);
    let log = if lenient { parse_interactions_lenient(reader) } else { parse_interactions(reader) }.with_context(|| format!("parsing {}", path.display()))?;
    let dataset = remap_ids(&log)?;
    Ok((dataset, log.skipped_rows))
}

/// Binary container or CSV, chosen by the leading magic bytes.
fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    if is_dataset_container(path)? {
        Ok(Dataset::load(path)?)
    } else {
        Ok(read_csv(path, false)?.0)
    }
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned())
}

fn cmd_ingest(a: IngestArgs) -> CmdResult {
    let (dataset, skipped) = read_csv(&a.data, a.lenient)?;
    dataset.save(&a.out)?;
    println!("{}", dataset_stats(&dataset));
    if skipped > 0 {
        println!("skipped_rows={skipped}");
    }
    Ok(())
}

fn build_model(name: &str, cfg: &ExperimentConfig, seed: u64, warm_start: bool, weights: Option<&Arc<MiniPfnWeights>>) -> Result<Box<dyn Predictor>, Failure> {
    Ok(match name {
        "majority" => Box::new(Majority::new()),
        "lr" => {
            let params = cfg.lr.apply(LrParams { seed, ..LrParams::default() });
            let mut m = LogisticRegression::new(params);
            m.warm_start = warm_start;
            Box::new(m)
        }
        "gbdt" => Box::new(Gbdt::new(cfg.gbdt.apply(GbdtParams { seed, ..GbdtParams::default() }))),
        "minipfn" => {
            let w = weights.ok_or_else(|| usage("model `minipfn` needs --weights"))?;
            Box::new(MiniPfn::new(Arc::clone(w)))
        }
        other => return Err(usage(format!("unknown model `{other}`; valid models: {}", MODEL_NAMES.join(", ")))),
    })
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p).map_err(Failure::Usage)?,
        None => ExperimentConfig::default(),
    };
    let data = a.data.or(cfg.data.clone()).ok_or_else(|| usage("--data is required"))?;
    let models = a.models.or(cfg.models.clone()).unwrap_or_else(|| vec!["majority".into(), "lr".into(), "gbdt".into()]);
    let horizons = a.horizons.or(cfg.horizons.clone()).unwrap_or_else(|| LiveSchedule::default().horizons().to_vec());
    let schedule = LiveSchedule::new(horizons)?;
    let split_seed = a.split_seed.or(cfg.split_seed).unwrap_or(0);
    let split_ratio = a.split_ratio.or(cfg.split_ratio).unwrap_or(0.8);
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let emit = a.emit.or(cfg.emit.clone()).unwrap_or_else(|| vec!["json".into(), "csv".into()]);
    let out = a.out.or(cfg.out.clone());
    let warm_start = a.warm_start || cfg.warm_start.unwrap_or(false);
    for e in &emit {
        if !["json", "csv", "svg"].contains(&e.as_str()) {
            return Err(usage(format!("unknown emit format `{e}`; valid formats: json, csv, svg")));
        }
    }
    for m in &models {
        if !MODEL_NAMES.contains(&m.as_str()) {
            return Err(usage(format!("unknown model `{m}`; valid models: {}", MODEL_NAMES.join(", "))));
        }
    }
    let weights = match a.weights.or(cfg.weights.clone()) {
        Some(p) if models.iter().any(|m| m == "minipfn") => Some(Arc::new(MiniPfnWeights::load(&p).with_context(|| format!("loading weights {}", p.display()))?)),
        _ => None,
    };

    let dataset = load_dataset(&data)?;
    let name = dataset_name(&data);
    println!("{}", dataset_stats(&dataset));
    let split = split_students(&dataset, split_ratio, split_seed)?;
    let mut reports = Vec::new();
    for m in &models {
        let mut predictor = build_model(m, &cfg, seed, warm_start, weights.as_ref())?;
        let (report, _) = run_live_eval(predictor.as_mut(), &dataset, &name, &split, &schedule).with_context(|| format!("evaluating {m}"))?;
        reports.push(report);
    }
    print!("{}", format_table(&reports, &schedule));
    for line in speedup_lines(&reports) {
        println!("{line}");
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for e in &emit {
            let (file, bytes) = match e.as_str() {
                "json" => ("results.json", to_json(&reports).into_bytes()),
                "csv" => {
                    let mut buf = Vec::new();
                    write_csv(&reports, &mut buf).context("formatting CSV")?;
                    ("results.csv", buf)
                }
                _ => ("results.svg", render_svg(&reports, &schedule).into_bytes()),
            };
            write_atomic(&dir.join(file), &bytes)?;
        }
    }
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> CmdResult {
    let ckpt_path = a.checkpoint.clone().unwrap_or_else(|| with_suffix(&a.out, ".ckpt"));
    let loss_path = a.loss_csv.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    let mut state = match &a.resume {
        Some(p) => {
            let mut s = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            s.train.n_episodes = a.episodes;
            s
        }
        None => {
            let mut prior = PriorConfig {
                scm_weight: a.scm_weight,
                ..PriorConfig::default()
            };
            if let Some(v) = a.min_students {
                prior.kt.n_students.lo = v;
                prior.scm.n_rows.lo = v;
            }
            if let Some(v) = a.max_students {
                prior.kt.n_students.hi = v;
                prior.scm.n_rows.hi = v;
            }
            if let Some(v) = a.max_horizon {
                prior.kt.horizon = Range::new(prior.kt.horizon.lo.min(v), v);
                prior.scm.horizon = Range::new(prior.scm.horizon.lo.min(v), v);
            }
            let train = TrainParams {
                n_episodes: a.episodes,
                batch_episodes: a.batch,
                lr: a.lr,
                seed: a.seed,
                checkpoint_every: a.checkpoint_every,
                ..TrainParams::default()
            };
            let config = MiniPfnConfig {
                d_model: a.d_model,
                n_heads: a.heads,
                n_blocks: a.blocks,
                d_ff: a.d_ff,
                ..MiniPfnConfig::default()
            };
            initial_checkpoint(prior, train, config)?
        }
    };
    state.train.checkpoint_every = a.checkpoint_every;
    ctrlc::set_handler(|| STOP.store(true, Ordering::SeqCst)).context("installing Ctrl-C handler")?;
    let hooks = PretrainHooks {
        checkpoint_path: Some(ckpt_path.clone()),
        stop: Some(&STOP),
    };
    let outcome = resume(state, &hooks)?;
    let mut csv = Vec::new();
    write_loss_curve(&outcome.curve, &mut csv).context("formatting loss curve")?;
    write_atomic(&loss_path, &csv)?;
    if outcome.stopped_early {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "interrupted after {} episodes; checkpoint written to {}",
            outcome.episodes_done,
            ckpt_path.display()
        )));
    }
    outcome.weights.save(&a.out)?;
    println!(
        "episodes={} final_smoothed_loss={} weights={}",
        outcome.episodes_done,
        outcome.curve.last().map_or_else(|| "NA".to_string(), |p| format!("{:.4}", p.smoothed_loss)),
        a.out.display()
    );
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_explain(a: ExplainArgs) -> CmdResult {
    if a.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let weights = MiniPfnWeights::load(&a.weights).with_context(|| format!("loading weights {}", a.weights.display()))?;
    let dataset = load_dataset(&a.data)?;
    let idx = dataset.students.index_of(&a.student).ok_or_else(|| usage(format!("unknown student `{}`", a.student)))?;
    let split = split_students(&dataset, a.split_ratio, a.split_seed)?;
    if !split.is_test(idx) {
        return Err(usage(format!("student `{}` is on the train side of this split", a.student)));
    }
    let tables = build_tables(&dataset, &split, a.horizon, a.horizon, a.horizon - 1)?;
    let row = tables
        .test
        .rows
        .iter()
        .position(|r| r.student_idx == idx)
        .ok_or_else(|| usage(format!("student `{}` has fewer than two interactions at T={}", a.student, a.horizon)))?;
    let (probs, record) = predict_in_context(&weights, &tables.train, &tables.test)?;
    println!("# p(correct)={:.3} truth={}", probs[row], tables.test_labels[row]);
    for (rank, (ctx, w)) in explain(&record, row, a.k).into_iter().enumerate() {
        let sid = tables.train.rows[ctx].features.student_idx;
        let name = dataset.students.id_of(sid).unwrap_or("?");
        println!("{}, {}, {:.3}", rank + 1, name, w);
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let weights = match &a.weights {
        Some(p) => MiniPfnWeights::load(p).with_context(|| format!("loading weights {}", p.display()))?,
        None => MiniPfnWeights::init(MiniPfnConfig::default(), a.seed)?,
    };
    let params = BenchParams {
        sizes: a.sizes,
        horizons: a.horizons,
        repeats: a.repeats,
        seed: a.seed,
        ..BenchParams::default()
    };
    let report = run_bench(weights, &params)?;
    let mut csv = Vec::new();
    write_bench_csv(&report, &mut csv).context("formatting bench CSV")?;
    print!("{}", String::from_utf8_lossy(&csv));
    let fmt = |s: Option<f64>| s.map_or_else(|| "NA".to_string(), |v| format!("{v:.3}"));
    println!("slope_N={} slope_T={}", fmt(report.slope_students), fmt(report.slope_horizon));
    if let Some(dir) = a.out {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_atomic(&dir.join("bench.csv"), &csv)?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let ds = synth_dataset(&SynthParams {
        n_students: a.students,
        n_questions: a.questions,
        n_skills: a.skills,
        seed: a.seed,
        ..SynthParams::default()
    });
    let mut out = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    write_interactions_csv(&ds, &mut out).context("writing CSV")?;
    println!("{}", dataset_stats(&ds));
    Ok(())
}
