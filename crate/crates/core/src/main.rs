use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{error, info};

use stagespace::bench::devbench::{run_grid, DevbenchConfig, DevbenchGrid, DevbenchTarget};
use stagespace::bench::report::{self, AccessPattern, RwMix, ScalingMode};
use stagespace::bench::scaling::{self, ClientJob, Launch, ScalingConfig, FULL_STRONG_BYTES, FULL_WEAK_BYTES};
use stagespace::protocol::{parse_size, Server, ServerConfig};
use stagespace::tier::TierSpec;

#[derive(Parser)]
#[command(name = "stagespace", version, about = "In-situ data staging servers and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn size_arg(s: &str) -> Result<u64, String> {
    parse_size(s)
}

#[derive(Subcommand)]
enum Command {
    /// Run one staging server until SIGTERM or SIGINT.
    Server {
        #[arg(long)]
        config: PathBuf,
    },
    /// Device/tier micro-benchmark. List-valued options run every combination.
    Devbench {
        /// File path, or a tier spec: heap, mmap:<path>, delayed:<op_us>:<mib_us>[:<inner>], delayed:fast|slow[:<inner>].
        #[arg(long)]
        target: DevbenchTarget,
        #[arg(long, value_delimiter = ',', default_value = "seq")]
        pattern: Vec<AccessPattern>,
        #[arg(long, value_delimiter = ',', default_value = "read")]
        rw: Vec<RwMix>,
        /// Transfer sizes, e.g. 4K,64K,1M.
        #[arg(long, value_delimiter = ',', value_parser = size_arg, default_value = "4K")]
        bs: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        jobs: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        qd: Vec<u32>,
        /// Seconds per cell; 0 for no time cap.
        #[arg(long, default_value_t = 5.0)]
        runtime: f64,
        /// Byte cap per cell; 0 for none.
        #[arg(long, value_parser = size_arg, default_value = "0")]
        total_bytes: u64,
        /// Accessed extent of the target.
        #[arg(long, value_parser = size_arg, default_value = "256M")]
        size: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use buffered I/O on file targets instead of attempting O_DIRECT.
        #[arg(long)]
        buffered: bool,
        /// CSV output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Strong/weak scaling over a live cluster. List-valued counts run every combination.
    Scaling {
        #[arg(long)]
        mode: ScalingMode,
        #[arg(long, value_delimiter = ',', default_value = "64")]
        writers: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "64")]
        readers: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "4")]
        servers: Vec<u32>,
        #[arg(long, default_value_t = 10)]
        timesteps: u32,
        /// Total bytes per timestep (strong) or bytes per client (weak).
        /// Defaults to 64M / 512K, or 4G / 8M with --full-scale.
        #[arg(long, value_parser = size_arg)]
        bytes: Option<u64>,
        #[arg(long)]
        full_scale: bool,
        /// heap, mmap:<path> (one file per server, suffixed .<id>; existing files are replaced) or delayed:<spec>.
        #[arg(long, default_value = "heap")]
        tier: TierSpec,
        /// Concurrent request executions per server.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value_t = 120_000)]
        timeout_ms: u32,
        /// Run servers and clients as threads of this process.
        #[arg(long)]
        threads: bool,
        /// Directory for server configs and logs.
        #[arg(long)]
        work_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(hide = true)]
    ScalingClient {
        #[arg(long)]
        job: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Server { config } => serve(config),
        Command::Devbench {
            target,
            pattern,
            rw,
            bs,
            jobs,
            qd,
            runtime,
            total_bytes,
            size,
            seed,
            buffered,
            out,
        } => {
            let mut base = DevbenchConfig::new(target);
            base.runtime = Duration::from_secs_f64(runtime);
            base.total_bytes = total_bytes;
            base.size = size;
            base.seed = seed;
            base.direct = !buffered;
            let grid = DevbenchGrid {
                patterns: pattern,
                rws: rw,
                bss: bs,
                jobs,
                qds: qd,
            };
            let rows = run_grid(&base, &grid, |r| {
                info!(
                    "{:?} {:?} bs={} jobs={} qd={}: {:.1} MiB/s, {:.0} IOPS, p99 {:.0} us",
                    r.pattern, r.rw, r.bs, r.jobs, r.qd, r.mib_per_s, r.iops, r.p99_lat_us
                )
            })?;
            match out {
                Some(p) => report::emit_devbench(&p, &rows).with_context(|| format!("writing {}", p.display()))?,
                None => report::write_devbench(std::io::stdout().lock(), &rows)?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Scaling {
            mode,
            writers,
            readers,
            servers,
            timesteps,
            bytes,
            full_scale,
            tier,
            workers,
            timeout_ms,
            threads,
            work_dir,
            out,
        } => {
            let launch = if threads {
                Launch::Threads
            } else {
                Launch::Processes {
                    exe: std::env::current_exe().context("locating own executable")?,
                }
            };
            let mut rows = Vec::new();
            let mut failed = false;
            for &s in &servers {
                for &w in &writers {
                    for &r in &readers {
                        let mut cfg = ScalingConfig::new(mode, w, r, s);
                        cfg.timesteps = timesteps;
                        if full_scale {
                            cfg.bytes = match mode {
                                ScalingMode::Strong => FULL_STRONG_BYTES,
                                ScalingMode::Weak => FULL_WEAK_BYTES,
                            };
                        }
                        if let Some(b) = bytes {
                            cfg.bytes = b;
                        }
                        cfg.tier = tier.clone();
                        if let Some(n) = workers {
                            cfg.workers = n;
                        }
                        cfg.timeout_ms = timeout_ms;
                        cfg.launch = launch.clone();
                        cfg.work_dir = work_dir.clone();
                        let rep = scaling::run_scaling(&cfg)
                            .with_context(|| format!("{mode:?} run with {w} writers, {r} readers, {s} servers"))?;
                        for f in &rep.failures {
                            error!("{f}");
                        }
                        for role in [report::Role::Writer, report::Role::Reader] {
                            if let Some(m) = rep.mean(role) {
                                info!(
                                    "{mode:?} W={w} R={r} S={s} {role:?}: mean {:.4}s {:?}",
                                    m.response_time_s, m.status
                                );
                            }
                        }
                        failed |= !rep.passed();
                        rows.extend(rep.rows);
                    }
                }
            }
            match out {
                Some(p) => report::emit_scaling(&p, &rows).with_context(|| format!("writing {}", p.display()))?,
                None => report::write_scaling(std::io::stdout().lock(), &rows)?,
            }
            Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::ScalingClient { job } => {
            let job: ClientJob = serde_json::from_str(&job).context("parsing client job")?;
            scaling::run_client(&job)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn serve(config: PathBuf) -> Result<ExitCode> {
    let cfg = ServerConfig::from_file(&config).with_context(|| format!("loading {}", config.display()))?;
    let stop = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(sig, stop.clone())?;
    }
    let server = Server::start(cfg)?;
    if stop.load(Ordering::SeqCst) {
        bail!("interrupted during startup");
    }
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(50));
    }
    info!("draining");
    server.shutdown();
    Ok(ExitCode::SUCCESS)
}
