use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use larstream::bench::{self, BenchOptions, HashingSink, RunMetrics};
use larstream::parser::ParseError;
use larstream::plan::PredicateKind;
use larstream::stream_io::{self, open_sink, open_source, Emission, Sink, SinkConfig, SourceConfig, Workload};
use larstream::{explain, parse_program, start, EngineConfig, OperatorPlan, Program, SinkMode, Target};

#[derive(Parser)]
#[command(name = "larstream", version, about = "Stream reasoning over positive LARS programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a program and print its diagnostics.
    Validate { program: PathBuf },
    /// Print the compiled operator plan.
    Explain {
        program: PathBuf,
        #[arg(long, default_value = "bsp")]
        engine: Target,
    },
    /// Execute a program over a stream.
    Run(RunArgs),
    /// Run a benchmark suite.
    Bench(BenchArgs),
    /// Write a synthetic workload as TSV.
    Generate {
        /// e.g. `sensor,n=1000`, `graph,n=50,p=0.1`, `chain,depth=5,chains=10`
        spec: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file; stdout when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    program: PathBuf,
    #[arg(long, default_value = "bsp")]
    engine: Target,
    /// `file:PATH[,rate=N][,ts=column|ingestion]`, `tcp:ADDR` or `gen:KIND,...`
    #[arg(long)]
    source: String,
    /// `stdout`, `file:PATH` or `mem`
    #[arg(long, default_value = "stdout")]
    sink: SinkConfig,
    #[arg(long, default_value_t = 500)]
    batch_interval_ms: u64,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    #[arg(long, default_value_t = 1024)]
    channel_capacity: usize,
    /// `pane` or `eager` (record-at-a-time engine only)
    #[arg(long, default_value = "pane")]
    sink_mode: SinkMode,
    /// Keep firing triggers up to this stream time.
    #[arg(long)]
    end_time_ms: Option<u64>,
    /// Seed for generator sources.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    suite: PathBuf,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    batch_interval_ms: Option<u64>,
    /// Write metrics.jsonl, report.csv and report.txt here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Print one JSON object per run instead of the table.
    #[arg(long)]
    json: bool,
}

/// Exit status of a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Failure {
    User = 1,
    Io = 2,
}

fn classify(err: &anyhow::Error) -> Failure {
    if err.chain().any(|c| c.downcast_ref::<io::Error>().is_some()) {
        Failure::Io
    } else {
        Failure::User
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("LARSTREAM_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { program } => validate(&program),
        Command::Explain { program, engine } => explain_cmd(&program, engine),
        Command::Run(args) => run(args),
        Command::Bench(args) => bench_cmd(args),
        Command::Generate { spec, seed, out } => generate(&spec, seed, out.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err) as u8)
        }
    }
}

fn read_program(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn report_parse_error(path: &Path, err: &ParseError) {
    for line in err.to_string().lines() {
        eprintln!("{}:{line}", path.display());
    }
}

fn load(path: &Path) -> Result<Result<Program, ExitCode>> {
    let text = read_program(path)?;
    Ok(parse_program(&text).map_err(|e| {
        report_parse_error(path, &e);
        ExitCode::from(Failure::User as u8)
    }))
}

fn validate(path: &Path) -> Result<ExitCode> {
    match load(path)? {
        Ok(p) => {
            println!("{}: ok, {} rules", path.display(), p.rules.len());
            Ok(ExitCode::SUCCESS)
        }
        Err(code) => Ok(code),
    }
}

fn explain_cmd(path: &Path, engine: Target) -> Result<ExitCode> {
    let program = match load(path)? {
        Ok(p) => p,
        Err(code) => return Ok(code),
    };
    let plan = OperatorPlan::build(&program, engine).with_context(|| format!("cannot compile for {engine}"))?;
    print!("{}", explain(&plan));
    Ok(ExitCode::SUCCESS)
}

/// Forwards to the configured sink while hashing the output.
struct Tee {
    inner: Box<dyn Sink>,
    hash: HashingSink,
}

impl Sink for Tee {
    fn emit(&mut self, e: &Emission) -> io::Result<()> {
        self.hash.emit(e)?;
        self.inner.emit(e)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let program = match load(&args.program)? {
        Ok(p) => p,
        Err(code) => return Ok(code),
    };
    let plan =
        OperatorPlan::build(&program, args.engine).with_context(|| format!("cannot compile for {}", args.engine))?;
    let mut source_cfg: SourceConfig = args.source.parse()?;
    if let Some(seed) = args.seed {
        source_cfg = source_cfg.with_seed(seed);
    }
    let group = if plan.kinds.values().any(|k| *k == PredicateKind::Relation) {
        1
    } else {
        2
    };
    let source = open_source(&source_cfg)?;
    let sink = open_sink(&args.sink)?;
    let hash = HashingSink::new();
    let tee = Tee {
        inner: sink,
        hash: hash.clone(),
    };
    let config = EngineConfig {
        engine: args.engine,
        batch_interval_ms: args.batch_interval_ms,
        parallelism: args.parallelism,
        channel_capacity: args.channel_capacity,
        sink_mode: args.sink_mode,
        end_time_ms: args.end_time_ms,
        ..EngineConfig::default()
    };
    let report = start(plan, source, Box::new(tee), &config)?.join()?;
    if report.skipped > 0 {
        log::warn!("skipped {} malformed input lines", report.skipped);
    }
    let name = args
        .program
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let metrics = RunMetrics::from_report(&name, group, 0, &report, hash.hash());
    let line = serde_json::to_string(&metrics)?;
    if args.sink == SinkConfig::Stdout {
        eprintln!("{line}");
    } else {
        println!("{line}");
    }
    Ok(ExitCode::SUCCESS)
}

fn bench_cmd(args: BenchArgs) -> Result<ExitCode> {
    let suite = bench::load_suite(&args.suite)?;
    let options = BenchOptions {
        repetitions: args.repetitions,
        seed: args.seed,
        parallelism: args.parallelism,
        batch_interval_ms: args.batch_interval_ms,
    };
    let json = args.json;
    let runs = suite.run(&options, |m| {
        if json {
            if let Ok(line) = serde_json::to_string(m) {
                println!("{line}");
            }
        } else {
            log::info!(
                "{} on {} rep {}: {:.0} records/s",
                m.query,
                m.engine,
                m.repetition,
                m.throughput_tps
            );
        }
    })?;
    let rows = bench::summarize(&runs);
    let table = bench::render_table(&rows);
    if !json {
        print!("{table}");
    }
    if let Some(dir) = args.out_dir {
        std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let create = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            Ok(BufWriter::new(
                File::create(&p).with_context(|| format!("cannot create {}", p.display()))?,
            ))
        };
        bench::write_jsonl(create("metrics.jsonl")?, &runs)?;
        bench::write_csv(create("report.csv")?, &rows)?;
        let mut txt = create("report.txt")?;
        txt.write_all(table.as_bytes())?;
        txt.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

fn generate(spec: &str, seed: Option<u64>, out: Option<&Path>) -> Result<ExitCode> {
    let mut workload: Workload = spec.parse().map_err(anyhow::Error::msg)?;
    if let Some(seed) = seed {
        workload = workload.with_seed(seed);
    }
    let records = stream_io::generate(&workload);
    match out {
        Some(path) => {
            let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
            stream_io::write_tsv(BufWriter::new(f), &records)?;
        }
        None => {
            let stdout = io::stdout();
            stream_io::write_tsv(BufWriter::new(stdout.lock()), &records)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
