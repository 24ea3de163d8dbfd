use std::io;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use sled_cli::*;
use sled_core::experiments::config::Config;
use sled_core::experiments::Scenario;

#[derive(Parser)]
#[command(
    name = "sled",
    version,
    about = "Edge speculative decoding: server, devices and experiments"
)]
struct Cli {
    /// TOML configuration file. Omitted sections take their defaults.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `[seeds] root`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Sled,
    Centralized,
    EdgeOnly,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Sled => Scenario::Sled,
            ScenarioArg::Centralized => Scenario::Centralized,
            ScenarioArg::EdgeOnly => Scenario::EdgeOnly,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the verification server on a TCP socket until interrupted.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        /// Per-batch metrics CSV.
        #[arg(long, default_value = "sled-server-metrics.csv")]
        metrics: PathBuf,
        /// Sleep for each batch's modelled service time.
        #[arg(long)]
        realtime: bool,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Run one device session against a server.
    Device {
        #[arg(long, default_value = "127.0.0.1:7070")]
        connect: String,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value = "sled-transcript.jsonl")]
        transcript: PathBuf,
        #[arg(long)]
        session: Option<u64>,
        #[arg(long)]
        max_tokens: Option<usize>,
        #[arg(long)]
        no_fallback: bool,
        #[arg(long, default_value_t = 2000)]
        connect_timeout_ms: u64,
    },
    /// Run a deterministic simulation and write a report.
    Simulate {
        #[arg(long, value_enum)]
        scenario: Option<ScenarioArg>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Total device count, cycling through the configured groups.
        #[arg(long)]
        devices: Option<usize>,
        #[arg(long)]
        horizon_s: Option<f64>,
        #[arg(long)]
        loss: Option<f64>,
        /// Also search for the supported fleet size.
        #[arg(long)]
        capacity: bool,
    },
    /// Run one simulation per value of a parameter.
    Sweep {
        /// loss, gamma, batch, devices or quant.
        #[arg(long)]
        param: String,
        /// Comma-separated values; defaults to the `[experiment]` list.
        #[arg(long)]
        values: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        horizon_s: Option<f64>,
    },
    /// Cost of one thousand tokens on a device.
    Cost {
        /// Tokens per second.
        #[arg(long)]
        rate: f64,
        /// Hardware price in USD.
        #[arg(long, default_value_t = 80.0)]
        price: f64,
        /// Average power draw in watts.
        #[arg(long, default_value_t = 8.0)]
        watts: f64,
    },
}

fn scale_devices(cfg: &mut Config, n: usize) {
    let mut units = cfg.devices.iter().cycle();
    let mut groups: Vec<_> = Vec::new();
    for _ in 0..n {
        let mut g = units.next().expect("validated config has devices").clone();
        g.count = 1;
        groups.push(g);
    }
    cfg.devices = groups;
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Cmd::Cost { rate, price, watts } = cli.cmd {
        println!("{}", format_cost(cmd_cost(rate, price, watts)?));
        return Ok(());
    }
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seeds.root = s;
    }
    match cli.cmd {
        Cmd::Cost { .. } => unreachable!(),
        Cmd::Serve {
            listen,
            metrics,
            realtime,
            batch_size,
        } => {
            if let Some(b) = batch_size {
                cfg.server.batch_size = b;
            }
            validate(&cfg)?;
            let stop = interrupt_flag()?;
            let summary = cmd_serve(
                &cfg,
                ServeArgs {
                    listen: &listen,
                    metrics,
                    realtime,
                },
                stop,
                &mut |banner| println!("{banner}"),
            )?;
            println!("{summary}");
        }
        Cmd::Device {
            connect,
            prompt,
            transcript,
            session,
            max_tokens,
            no_fallback,
            connect_timeout_ms,
        } => {
            for g in &mut cfg.devices {
                if let Some(m) = max_tokens {
                    g.max_tokens = m;
                }
                if no_fallback {
                    g.reliability.fallback_enabled = Some(false);
                }
            }
            validate(&cfg)?;
            let s = cmd_device(
                &cfg,
                DeviceArgs {
                    connect: &connect,
                    prompt: &prompt,
                    transcript: transcript.clone(),
                    session_id: session,
                    connect_timeout: Duration::from_millis(connect_timeout_ms),
                },
                &mut io::stdout().lock(),
            )?;
            eprintln!(
                "{} verified, {} fallback tokens{}; transcript {}",
                s.verified,
                s.fallback,
                if s.connected {
                    ""
                } else {
                    " (server unreachable)"
                },
                transcript.display()
            );
        }
        Cmd::Simulate {
            scenario,
            out,
            devices,
            horizon_s,
            loss,
            capacity,
        } => {
            if let Some(n) = devices {
                if n == 0 {
                    return Err(CliError::Config("--devices must be >= 1".into()));
                }
                scale_devices(&mut cfg, n);
            }
            if let Some(h) = horizon_s {
                cfg.workload.horizon_s = h;
            }
            if let Some(l) = loss {
                cfg.network.loss_rate = l;
            }
            if capacity {
                cfg.experiment.capacity = true;
            }
            let scenario = scenario
                .map(Scenario::from)
                .unwrap_or(cfg.experiment.scenario);
            println!("{}", cmd_simulate(&cfg, scenario, &out)?);
        }
        Cmd::Sweep {
            param,
            values,
            out,
            horizon_s,
        } => {
            if let Some(h) = horizon_s {
                cfg.workload.horizon_s = h;
            }
            println!("{}", cmd_sweep(&cfg, &param, values.as_deref(), &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
