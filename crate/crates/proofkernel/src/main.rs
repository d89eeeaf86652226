use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use proofkernel::check::{self, run_check};
use proofkernel::kernel::KernelConfig;
use proofkernel::replay::{parse_trace, replay_virtual, replay_wall};
use proofkernel::runtime::WorkerMode;
use proofkernel::serve::{ServeOptions, TcpListenerSpec, Transport, serve};
use proofkernel::worker;
use proofkernel_core::script::{DEFAULT_MAX_DELAY_MS, ParseOptions};
use proofkernel_core::snapshot::DEFAULT_INLINE_THRESHOLD;

#[derive(Parser)]
#[command(name = "proofkernel", version, about = "Asynchronous, incremental checker for proof scripts")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Engine {
    /// Number of workers [default: available parallelism]
    #[arg(long, env = "PROOFKERNEL_WORKERS", value_parser = clap::value_parser!(u32).range(1..))]
    workers: Option<u32>,
    /// Run workers as child processes instead of threads
    #[arg(long)]
    processes: bool,
    /// Largest delay a proof step may request, in ms
    #[arg(long, default_value_t = DEFAULT_MAX_DELAY_MS)]
    max_delay: u64,
    /// Def bindings larger than this many bytes travel as blobs
    #[arg(long, default_value_t = DEFAULT_INLINE_THRESHOLD)]
    inline_threshold: usize,
}

impl Engine {
    fn workers(&self) -> usize {
        self.workers
            .map(|w| w as usize)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    fn mode(&self) -> std::io::Result<WorkerMode> {
        Ok(if self.processes { WorkerMode::Process { exe: std::env::current_exe()? } } else { WorkerMode::Thread })
    }

    fn kernel(&self, lazy: bool) -> KernelConfig {
        KernelConfig {
            lazy,
            inline_threshold: self.inline_threshold,
            parse: ParseOptions { max_delay_ms: self.max_delay },
            ..KernelConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a file; exit 0 if sound, 1 if unsound, 2 if it does not parse
    Check {
        file: PathBuf,
        #[command(flatten)]
        engine: Engine,
    },
    /// Serve the JSON-lines protocol
    Serve {
        /// Talk to one client over stdin/stdout
        #[arg(long, conflicts_with = "tcp", required_unless_present = "tcp")]
        stdio: bool,
        /// Listen for clients on 127.0.0.1:PORT (0 picks a free port)
        #[arg(long, value_name = "PORT")]
        tcp: Option<u16>,
        /// Also serve a websocket bridge and static assets on this port
        #[arg(long, value_name = "PORT")]
        ws: Option<u16>,
        /// Directory of static files for the websocket port
        #[arg(long, requires = "ws")]
        assets: Option<PathBuf>,
        /// Only check proofs of observed spans
        #[arg(long)]
        lazy: bool,
        #[command(flatten)]
        engine: Engine,
    },
    /// Replay a timestamped request trace and write metrics
    Replay {
        trace: PathBuf,
        #[arg(long, value_name = "OUT.json")]
        report: PathBuf,
        /// Run on a virtual clock instead of in real time
        #[arg(long)]
        virtual_clock: bool,
        #[arg(long)]
        lazy: bool,
        #[command(flatten)]
        engine: Engine,
    },
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        id: u32,
        #[arg(long, default_value_t = DEFAULT_MAX_DELAY_MS)]
        max_delay: u64,
    },
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("proofkernel: {msg}");
    ExitCode::from(check::EXIT_PARSE as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Check { file, engine } => {
            let text = match std::fs::read_to_string(&file) {
                Ok(t) => t,
                Err(e) => return fail(format_args!("{}: {e}", file.display())),
            };
            let mode = match engine.mode() {
                Ok(m) => m,
                Err(e) => return fail(e),
            };
            match run_check(&text, engine.workers(), mode, engine.kernel(false)) {
                Ok(report) => {
                    print!("{}", report.render());
                    ExitCode::from(report.exit_code() as u8)
                }
                Err(e) => {
                    eprintln!("{}: {e}", file.display());
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Cmd::Serve { stdio, tcp, ws, assets, lazy, engine } => {
            let transport = match (stdio, tcp) {
                (_, Some(port)) => Transport::Tcp(TcpListenerSpec { port }),
                _ => Transport::Stdio,
            };
            let mode = match engine.mode() {
                Ok(m) => m,
                Err(e) => return fail(e),
            };
            let opts = ServeOptions {
                transport,
                ws_port: ws,
                assets,
                workers: engine.workers(),
                mode,
                kernel: engine.kernel(lazy),
            };
            match serve(opts) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
        Cmd::Replay { trace, report, virtual_clock, lazy, engine } => {
            let text = match std::fs::read_to_string(&trace) {
                Ok(t) => t,
                Err(e) => return fail(format_args!("{}: {e}", trace.display())),
            };
            let entries = match parse_trace(&text) {
                Ok(e) => e,
                Err(e) => return fail(format_args!("{}: {e}", trace.display())),
            };
            let cfg = engine.kernel(lazy);
            let metrics = if virtual_clock {
                replay_virtual(&entries, engine.workers(), cfg).1
            } else {
                let mode = match engine.mode() {
                    Ok(m) => m,
                    Err(e) => return fail(e),
                };
                match replay_wall(&entries, engine.workers(), mode, cfg) {
                    Ok((_, m)) => m,
                    Err(e) => return fail(e),
                }
            };
            let body = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
            if let Err(e) = std::fs::write(&report, body + "\n") {
                return fail(format_args!("{}: {e}", report.display()));
            }
            ExitCode::SUCCESS
        }
        Cmd::Worker { id, max_delay } => {
            let opts = ParseOptions { max_delay_ms: max_delay };
            match worker::serve_process(id, opts, std::io::stdin().lock(), std::io::stdout().lock()) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
    }
}
