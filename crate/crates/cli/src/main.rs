use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use cawal_core::capture::Tracker;
use cawal_core::clock::{Clock, SystemClock};
use cawal_core::extract::{run_nightly, JobLog, NightlyContext};
use cawal_core::logstore::{write_staged_day, LogStore};
use cawal_core::session_store::{SessionPolicy, SessionStore};
use cawal_core::sessionize::{read_combined_log, read_ndjson_events, reconstruct_sessions, SessionizerConfig};
use cawal_core::warehouse::{GroupBy, Warehouse};
use cawal_farm::{build_table3_day, mode_configs, run_benchmark, run_simulation, Mode, SimConfig};
use cawal_monitor::{AppState, CawalConfig, WarehouseSource};
use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cawal", version, about = "Server-side web analytics engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Deploy {
    /// TOML deployment config; CAWAL_* variables override it.
    #[arg(long, env = "CAWAL_CONFIG")]
    config: Option<PathBuf>,
}

impl Deploy {
    fn load(&self) -> Result<CawalConfig> {
        CawalConfig::load(self.config.as_deref()).context("loading config")
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the nightly job for one day: rotate, extract, load, maintain.
    Extract {
        #[command(flatten)]
        deploy: Deploy,
        /// Day to process; defaults to yesterday in the configured zone.
        #[arg(long)]
        date: Option<NaiveDate>,
        /// Replace an existing analytics record for the day.
        #[arg(long)]
        rerun: bool,
    },
    /// Warehouse loads and queries.
    Etl {
        #[command(subcommand)]
        command: EtlCommand,
    },
    /// Simulate a server farm and print its report.
    Simulate(SimulateArgs),
    /// Compare throughput of the capture modes on identical workloads.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "none,server_side,client_emulation")]
        modes: Vec<Mode>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        sessions: u64,
        /// Runs per mode; the fastest counts.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Write the reference one-day fixture as staged log files.
    MakeTable3Day {
        /// Log-store root to stage the day under.
        #[arg(long)]
        out: PathBuf,
        /// Also write the fixture's user profiles as CSV.
        #[arg(long)]
        profiles: Option<PathBuf>,
    },
    /// Rebuild sessions from a raw request log.
    Sessionize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = LogFormat::Ndjson)]
        format: LogFormat,
        /// Idle gap that ends a session, in minutes.
        #[arg(long, default_value_t = 30)]
        timeout_min: i64,
    },
    /// Serve the monitor and report API.
    Serve {
        #[command(flatten)]
        deploy: Deploy,
    },
}

#[derive(Subcommand)]
enum EtlCommand {
    /// Load one analytics file into its monthly mart.
    Load {
        #[command(flatten)]
        deploy: Deploy,
        #[arg(long)]
        file: PathBuf,
        /// Allow writing into a sealed month.
        #[arg(long)]
        force: bool,
    },
    /// Query a metric over a date range.
    Query {
        #[command(flatten)]
        deploy: Deploy,
        #[arg(long)]
        metric: String,
        #[arg(long)]
        from: NaiveDate,
        #[arg(long)]
        to: NaiveDate,
        #[arg(long)]
        group_by: Option<GroupBy>,
        #[arg(long, value_enum, default_value_t = OutFormat::Json)]
        out: OutFormat,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogFormat {
    Ndjson,
    Combined,
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// Farm config as JSON; without it a seven-server homogeneous farm is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "config", default_value_t = 5000)]
    sessions: u64,
    #[arg(long, conflicts_with = "config", default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    mode: Option<Mode>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// In server_side mode, stage the captured days under this log-store
    /// root and write sessions.ndjson next to it.
    #[arg(long)]
    logs: Option<PathBuf>,
    /// Print the effective farm config as TOML and exit.
    #[arg(long)]
    dump_config: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Extract { deploy, date, rerun } => extract(&deploy.load()?, date, rerun),
        Command::Etl { command } => etl(command),
        Command::Simulate(args) => simulate(args),
        Command::Bench {
            modes,
            seed,
            sessions,
            repeats,
        } => {
            let base = SimConfig::homogeneous(sessions, seed);
            let report = run_benchmark(&mode_configs(&base, &modes), repeats)?;
            print_bytes(&report.to_json())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::MakeTable3Day { out, profiles } => {
            let fixture = build_table3_day();
            write_staged_day(&out, fixture.date, &fixture.day).context("writing staged day")?;
            if let Some(p) = profiles {
                fixture.profiles.write_csv(&p).with_context(|| format!("writing {}", p.display()))?;
            }
            eprintln!(
                "{}: {} sessions, {} pageviews staged under {}",
                fixture.date,
                fixture.day.sessions.len(),
                fixture.day.pageviews.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Sessionize {
            input,
            format,
            timeout_min,
        } => sessionize(&input, format, timeout_min),
        Command::Serve { deploy } => serve(deploy.load()?),
    }
}

fn print_bytes(bytes: &[u8]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(bytes)?;
    if !bytes.ends_with(b"\n") {
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn extract(cfg: &CawalConfig, date: Option<NaiveDate>, rerun: bool) -> Result<ExitCode> {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let log_store = LogStore::open(&cfg.logs_dir(), cfg.tz()).context("opening log store")?;
    let warehouse = Warehouse::open(cfg.warehouse_dir()).context("opening warehouse")?;
    let profiles = cfg.load_profiles()?;
    let job_log = JobLog::to_file(cfg.job_log_path(), clock.clone());
    let analytics_dir = cfg.analytics_dir();
    let extract_config = cfg.extract_config();
    let ctx = NightlyContext {
        tracker: None,
        log_store: &log_store,
        profiles: &profiles,
        config: &extract_config,
        analytics_dir: &analytics_dir,
        warehouse: &warehouse,
        job_log: &job_log,
        clock: clock.as_ref(),
    };
    let report = run_nightly(&ctx, date, rerun)?;
    print_bytes(&serde_json::to_vec_pretty(&report)?)?;
    Ok(if report.succeeded() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn etl(command: EtlCommand) -> Result<ExitCode> {
    let open = |deploy: &Deploy| -> Result<Warehouse> {
        Warehouse::open(deploy.load()?.warehouse_dir()).context("opening warehouse")
    };
    match command {
        EtlCommand::Load { deploy, file, force } => {
            let warehouse = open(&deploy)?;
            let handle = warehouse.load_file(&file, force)?;
            print_bytes(&serde_json::to_vec(&handle)?)?;
        }
        EtlCommand::Query {
            deploy,
            metric,
            from,
            to,
            group_by,
            out,
        } => {
            let warehouse = open(&deploy)?;
            let series = warehouse.query_range(&metric, from, to, group_by)?;
            match out {
                OutFormat::Json => print_bytes(&series.to_canonical_json())?,
                OutFormat::Csv => print_bytes(series.to_csv().as_bytes())?,
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn simulate(args: SimulateArgs) -> Result<ExitCode> {
    let mut sim = match &args.config {
        Some(p) => {
            let text = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice::<SimConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SimConfig::homogeneous(args.sessions, args.seed),
    };
    if let Some(m) = args.mode {
        sim.mode = m;
    }
    if args.dump_config {
        print_bytes(&serde_json::to_vec_pretty(&sim)?)?;
        return Ok(ExitCode::SUCCESS);
    }
    let out = run_simulation(&sim)?;
    if let Some(root) = &args.logs {
        if sim.mode != Mode::ServerSide {
            bail!("--logs needs --mode server_side; only that mode captures");
        }
        std::fs::create_dir_all(root)?;
        for (date, day) in &out.staged {
            write_staged_day(root, *date, day)?;
        }
        let mut w = std::io::BufWriter::new(File::create(root.join("sessions.ndjson"))?);
        for s in out.session_records() {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let report = out.report.to_json();
    match &args.out {
        Some(p) => std::fs::write(p, &report).with_context(|| format!("writing {}", p.display()))?,
        None => print_bytes(&report)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn sessionize(input: &Path, format: LogFormat, timeout_min: i64) -> Result<ExitCode> {
    if timeout_min <= 0 {
        bail!("--timeout-min must be positive");
    }
    let reader = BufReader::new(File::open(input).with_context(|| format!("opening {}", input.display()))?);
    let events = match format {
        LogFormat::Ndjson => read_ndjson_events(reader)?,
        LogFormat::Combined => {
            let (events, skipped) = read_combined_log(reader)?;
            if skipped > 0 {
                eprintln!("skipped {skipped} unparseable lines");
            }
            events
        }
    };
    let cfg = SessionizerConfig {
        timeout: chrono::Duration::minutes(timeout_min),
    };
    let sessions = reconstruct_sessions(&events, &cfg);
    let mut out = std::io::BufWriter::new(std::io::stdout().lock());
    for s in &sessions {
        let row = serde_json::json!({
            "visitor_key": s.visitor_key,
            "start": s.start,
            "end": s.end,
            "pageviews": s.event_count(),
        });
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    eprintln!("{} events, {} sessions", events.len(), sessions.len());
    Ok(ExitCode::SUCCESS)
}

fn serve(cfg: CawalConfig) -> Result<ExitCode> {
    if cfg.monitor.token.is_empty() {
        bail!("monitor.token (or CAWAL_TOKEN) must be set before serving");
    }
    let sessions_dir = cfg.sessions_dir();
    let store = if sessions_dir.join("id_state.json").exists() {
        SessionStore::load_snapshot(&sessions_dir, SessionPolicy::default()).context("restoring sessions")?
    } else {
        SessionStore::new(SessionPolicy::default())
    };
    let log = LogStore::open(&cfg.logs_dir(), cfg.tz()).context("opening log store")?;
    let tracker = Arc::new(Tracker::new(
        Arc::new(store),
        Arc::new(log),
        cfg.capture_config(),
        Arc::new(SystemClock),
    ));
    let state = AppState::new(
        tracker,
        cfg.analytics_dir(),
        WarehouseSource::Dir(cfg.warehouse_dir()),
        &cfg.monitor,
    );
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&cfg.monitor.listen)
            .await
            .with_context(|| format!("binding {}", cfg.monitor.listen))?;
        eprintln!("listening on {}", listener.local_addr()?);
        cawal_monitor::serve(
            listener,
            state,
            std::time::Duration::from_secs(cfg.monitor.sweep_interval_s),
            Some(sessions_dir),
            async {
                tokio::signal::ctrl_c().await.ok();
            },
        )
        .await?;
        Ok(ExitCode::SUCCESS)
    })
}
