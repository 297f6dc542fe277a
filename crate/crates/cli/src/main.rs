use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use cotica::config::{parse_sweep_arg, RunConfig};
use cotica::experiment::{run_experiment, train_source, Inputs};
use cotica::manifest::{read_stream, write_stream};
use cotica::model::HeadParams;
use cotica::records::{read_run_dir, run_stem, write_run};
use cotica::scenes::{build_stream, class_name};

#[derive(Parser, Debug)]
#[command(name = "cotica", version, about = "Continual test-time adaptation on synthetic domain-shift streams")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Methods to run (repeatable or comma separated).
    #[arg(long, global = true, value_name = "NAME", value_delimiter = ',')]
    method: Vec<String>,
    /// Sweep a config key, e.g. `icat.alpha=0.1,0.2` (repeatable).
    #[arg(long, global = true, value_name = "KEY=V1,V2,...")]
    sweep: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the domain stream to a manifest and CGRD frames.
    GenStream,
    /// Train the source model on clean frames.
    TrainSource,
    /// Run every configured method and seed over the stream.
    Adapt {
        /// Use a stream written by gen-stream for every seed.
        #[arg(long, value_name = "PATH")]
        stream: Option<PathBuf>,
        /// Use source weights written by train-source.
        #[arg(long, value_name = "PATH")]
        source: Option<PathBuf>,
    },
    /// Aggregate run CSVs into tables and charts.
    Report {
        /// Directory of run CSVs; defaults to `<out>/runs`.
        #[arg(long, value_name = "DIR")]
        runs: Option<PathBuf>,
    },
    /// Run the built-in oracle checks.
    Verify {
        /// Smaller instance counts.
        #[arg(long)]
        quick: bool,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<cotica::error::Error> for Failure {
    fn from(e: cotica::error::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn config_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn init_threads() -> Outcome {
    let Ok(raw) = std::env::var("COTICA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_error(anyhow!("COTICA_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.into()))
}

fn load_config(g: &Global) -> Outcome<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p).map_err(config_error)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seeds = vec![s];
    }
    if !g.method.is_empty() {
        cfg.methods = g.method.clone();
    }
    for arg in &g.sweep {
        let (key, values) = parse_sweep_arg(arg).map_err(config_error)?;
        cfg.sweep.insert(key, values);
    }
    cfg.validate().map_err(config_error)?;
    cfg.variants().map_err(config_error)?;
    Ok(cfg)
}

fn gen_stream(cfg: &RunConfig, out: &Path) -> Outcome {
    let seed = cfg.seeds[0];
    let stream = build_stream(&cfg.scene, &cfg.stream_for_seed(seed))?;
    let dir = out.join("stream");
    let manifest = write_stream(&dir, &cfg.scene, &stream)?;
    println!("{} frames, seed {seed} -> {}", stream.len(), manifest.display());
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> Outcome {
    fs::create_dir_all(out)?;
    let model = train_source(&cfg.scene, &cfg.source)?;
    let path = out.join("source.cprm");
    model.params.write_cprm(BufWriter::new(File::create(&path)?))?;
    let mut csv = String::from("class,class_name,iou\n");
    for (c, iou) in model.clean.iou_per_class().iter().enumerate() {
        let v = iou.map_or(String::new(), |v| v.to_string());
        csv += &format!("{c},{},{v}\n", class_name(c));
    }
    fs::write(out.join("source_eval.csv"), csv)?;
    println!(
        "held-out clean mIoU {:.4} -> {}",
        model.clean.miou().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn adapt(cfg: &RunConfig, out: &Path, stream: Option<&Path>, source: Option<&Path>) -> Outcome {
    let stream = stream
        .map(|p| read_stream(p).map(|(_, s)| s))
        .transpose()
        .map_err(|e| Failure::Runtime(anyhow!(e).context("reading stream")))?;
    let source = source
        .map(|p| -> anyhow::Result<HeadParams> {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Ok(HeadParams::read_cprm(std::io::BufReader::new(f))?)
        })
        .transpose()?;
    if let (Some(s), Some(p)) = (&stream, &source) {
        let classes = s.frames.iter().map(|f| f.labels.data().iter().copied().max().unwrap_or(0) as usize + 1).max();
        if classes.is_some_and(|c| c > p.classes()) {
            return Err(config_error(anyhow!("stream labels exceed the source model's {} classes", p.classes())));
        }
    }

    let start = Instant::now();
    let exp = run_experiment(
        cfg,
        Inputs {
            stream: stream.as_ref(),
            source: source.as_ref(),
        },
    )?;
    let runs_dir = out.join("runs");
    let states_dir = out.join("states");
    fs::create_dir_all(&runs_dir)?;
    fs::create_dir_all(&states_dir)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;

    let mut timing = String::from("method,variant,seed,frames,total_ms,ms_per_frame\n");
    for run in &exp.runs {
        let r = &run.record;
        write_run(&runs_dir, r)?;
        let stem = run_stem(&r.method, &r.variant, r.seed);
        run.state.write_state(BufWriter::new(File::create(states_dir.join(format!("{stem}.csta")))?))?;
        let maps: Vec<_> = r.frames.iter().filter_map(|f| f.loss_map.as_ref().map(|m| (f.index, m))).collect();
        if !maps.is_empty() {
            let dir = out.join("lossmaps").join(&stem);
            fs::create_dir_all(&dir)?;
            for (index, map) in maps {
                map.write_cgrd(BufWriter::new(File::create(dir.join(format!("frame_{index:04}.cgrd")))?))?;
            }
        }
        let total: f64 = r.frames.iter().map(|f| f.wall_ms).sum();
        timing += &format!(
            "{},{},{},{},{total:.3},{:.3}\n",
            r.method,
            r.variant,
            r.seed,
            r.frames.len(),
            total / r.frames.len().max(1) as f64
        );
    }
    fs::write(out.join("timing.csv"), timing)?;
    println!(
        "{} runs in {:.1}s -> {}",
        exp.runs.len(),
        start.elapsed().as_secs_f64(),
        runs_dir.display()
    );
    Ok(())
}

fn report(out: &Path, runs: Option<&Path>) -> Outcome {
    let dir = runs.map_or_else(|| out.join("runs"), Path::to_path_buf);
    let records = read_run_dir(&dir)?;
    if records.is_empty() {
        return Err(Failure::Runtime(anyhow!("no run CSVs in {}", dir.display())));
    }
    let target = out.join("report");
    let files = cotica::report::write_report(&target, &records)?;
    println!("{} runs -> {} files in {}", records.len(), files.len(), target.display());
    if let Ok(md) = fs::read_to_string(target.join("report.md")) {
        print!("{md}");
    }
    Ok(())
}

fn verify(quick: bool) -> Outcome {
    let checks = cotica::verify::run_all(quick);
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} check(s) failed")));
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    init_threads()?;
    if let Command::Verify { quick } = cli.command {
        return verify(quick);
    }
    if let Command::Report { runs } = &cli.command {
        return report(&cli.global.out, runs.as_deref());
    }
    let cfg = load_config(&cli.global)?;
    let out = &cli.global.out;
    match &cli.command {
        Command::GenStream => gen_stream(&cfg, out),
        Command::TrainSource => train(&cfg, out),
        Command::Adapt { stream, source } => adapt(&cfg, out, stream.as_deref(), source.as_deref()),
        Command::Report { .. } | Command::Verify { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
