//! Command implementations behind the `sled` binary.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use sled_core::device::{
    run_session, DeviceAgent, DeviceConfig, DeviceError, EmittedToken, Provenance, SessionLimits,
};
use sled_core::experiments::config::{draft_model_name, Config};
use sled_core::experiments::cost::{cost_per_1k_tokens, CostParams};
use sled_core::experiments::runner::{run_sweep, write_simulation, SweepParam};
use sled_core::experiments::{ExperimentError, Scenario};
use sled_core::models::LanguageModel;
use sled_core::netsim::{BlackHoleTransport, TcpTransport, Transport};
use sled_core::rng::derive_seed;
use sled_core::server::{serve, MetricsRow, ServeOptions, VerifyServer};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CONNECT: i32 = 3;
pub const EXIT_DOMAIN: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("cannot reach {addr}: {reason}")]
    Connect { addr: String, reason: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Experiment(ExperimentError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Connect { .. } => EXIT_CONNECT,
            CliError::Domain(_) => EXIT_DOMAIN,
            CliError::Bind { .. } | CliError::Io(_) => EXIT_FAILURE,
            CliError::Experiment(e) => match e {
                ExperimentError::Config(_) | ExperimentError::Model(_) => EXIT_CONFIG,
                ExperimentError::Domain(_)
                | ExperimentError::Unsupportable { .. }
                | ExperimentError::EmptyTrace => EXIT_DOMAIN,
                ExperimentError::Device(DeviceError::InvalidPolicy(_)) => EXIT_CONFIG,
                ExperimentError::Device(DeviceError::TransportFatal) => EXIT_CONNECT,
                _ => EXIT_FAILURE,
            },
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError::Experiment(e)
    }
}

/// Parses a TOML document into a validated [`Config`].
pub fn parse_config(text: &str) -> Result<Config, CliError> {
    let cfg: Config = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    validate(&cfg)?;
    Ok(cfg)
}

/// Validation failures of any kind are configuration errors.
pub fn validate(cfg: &Config) -> Result<(), CliError> {
    cfg.validate().map_err(|e| match e {
        ExperimentError::Config(m) => CliError::Config(m),
        other => CliError::Config(other.to_string()),
    })
}

/// Loads `path`, or the defaults when no path is given.
pub fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            parse_config(&text).map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                other => other,
            })
        }
    }
}

pub fn parse_values(list: &str) -> Result<Vec<f64>, CliError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Config(format!("bad sweep value {s:?}")))
        })
        .collect()
}

pub fn cmd_cost(rate: f64, price: f64, watts: f64) -> Result<f64, CliError> {
    Ok(cost_per_1k_tokens(&CostParams::new(rate, price, watts))?)
}

pub fn format_cost(usd: f64) -> String {
    format!("{usd:.5e}")
}

pub fn cmd_simulate(cfg: &Config, scenario: Scenario, out: &Path) -> Result<String, CliError> {
    let r = write_simulation(cfg, scenario, out)?;
    let mut s = format!(
        "scenario {} devices {} wstgr {:.3} tokens/s per-device {:.3} tokens/s",
        scenario.as_str(),
        r.num_devices,
        r.wstgr,
        r.per_device_rate
    );
    if let Some(c) = r.cost_per_1k_usd {
        s.push_str(&format!(" cost {} usd/1k", format_cost(c)));
    }
    if let Some(c) = r.capacity {
        s.push_str(&format!(" capacity {c:.2}"));
    }
    s.push_str(&format!("\nreport {}", out.join("report.json").display()));
    Ok(s)
}

pub fn cmd_sweep(
    cfg: &Config,
    param: &str,
    values: Option<&str>,
    out: &Path,
) -> Result<String, CliError> {
    let param: SweepParam = param.parse().map_err(CliError::Config)?;
    let values = match values {
        Some(v) => parse_values(v)?,
        None => param.default_values(cfg),
    };
    let result = run_sweep(cfg, param, &values, out)?;
    let paths: Vec<String> = result
        .csv_paths
        .iter()
        .map(|p| out.join(p).display().to_string())
        .collect();
    Ok(format!(
        "sweep {} over {} values\n{}",
        param.as_str(),
        values.len(),
        paths.join("\n")
    ))
}

pub struct ServeArgs<'a> {
    pub listen: &'a str,
    pub metrics: PathBuf,
    pub realtime: bool,
}

/// Serves until `shutdown` is set. `on_ready` gets the banner once bound.
pub fn cmd_serve(
    cfg: &Config,
    args: ServeArgs<'_>,
    shutdown: Arc<AtomicBool>,
    on_ready: &mut dyn FnMut(&str),
) -> Result<String, CliError> {
    let models = cfg.build_models()?;
    let mut server_cfg = cfg.server_config();
    server_cfg.seed = derive_seed(cfg.seeds.root, "server", 0);
    let mut server =
        VerifyServer::new(server_cfg, models.target.clone()).map_err(ExperimentError::from)?;
    for d in models.drafts.values() {
        server
            .register_draft(d.clone())
            .map_err(ExperimentError::from)?;
    }
    let listener = TcpListener::bind(args.listen).map_err(|source| CliError::Bind {
        addr: args.listen.to_owned(),
        source,
    })?;
    let addr = listener.local_addr()?;
    let mut metrics = csv::Writer::from_writer(BufWriter::new(fs::File::create(&args.metrics)?));
    on_ready(&format!(
        "serving on {addr} batch_size {} batch_timeout_ms {} target {} vocab {} drafts {}\nmetrics {}",
        server_cfg.batch_size,
        server_cfg.batch_timeout_ms,
        models.target.name(),
        models.target.vocab_size(),
        models
            .drafts
            .keys()
            .map(|q| draft_model_name(*q))
            .collect::<Vec<_>>()
            .join(","),
        args.metrics.display()
    ));
    let opts = ServeOptions {
        inject_service_delay: args.realtime,
        ..ServeOptions::default()
    };
    let mut write_err = None;
    let mut on_batch = |row: &MetricsRow| {
        if write_err.is_none() {
            if let Err(e) = metrics.serialize(row).and_then(|_| Ok(metrics.flush()?)) {
                write_err = Some(e);
            }
        }
    };
    let stats = serve(server, listener, shutdown, opts, &mut on_batch)?;
    if let Some(e) = write_err {
        return Err(CliError::Io(io::Error::other(e)));
    }
    Ok(format!(
        "batches {} requests {} tokens_verified {} metrics {}",
        stats.batches,
        stats.requests,
        stats.tokens_committed,
        args.metrics.display()
    ))
}

pub struct DeviceArgs<'a> {
    pub connect: &'a str,
    pub prompt: &'a str,
    pub transcript: PathBuf,
    pub session_id: Option<u64>,
    pub connect_timeout: Duration,
}

pub struct DeviceSummary {
    pub verified: usize,
    pub fallback: usize,
    pub connected: bool,
    pub text: String,
}

pub fn marker(t: &EmittedToken) -> &'static str {
    match t.provenance {
        Provenance::Verified => "verified",
        Provenance::Fallback => "fallback",
    }
}

/// Runs one session against `connect`, streaming each emitted token to
/// `out` as `<provenance> <token text>`.
pub fn cmd_device(
    cfg: &Config,
    args: DeviceArgs<'_>,
    out: &mut dyn Write,
) -> Result<DeviceSummary, CliError> {
    let models = cfg.build_models()?;
    let group = cfg
        .devices
        .first()
        .ok_or_else(|| CliError::Config("no [[devices]] group".into()))?;
    let unit = cfg
        .units_n(1)
        .into_iter()
        .next()
        .ok_or_else(|| CliError::Config("no devices configured".into()))?;
    let reliability = group.reliability.resolve(cfg.network.rtt_mean_ms);
    let prompt = models
        .tokenizer
        .encode(args.prompt)
        .map_err(|e| CliError::Config(format!("prompt: {e}")))?;
    if prompt.is_empty() {
        return Err(CliError::Config("prompt encodes to no tokens".into()));
    }
    let session_id = args
        .session_id
        .unwrap_or_else(|| derive_seed(cfg.seeds.root, "cli-session", 0));
    let device_cfg = DeviceConfig {
        session_id,
        drafting: group.drafting,
        reliability,
        limits: SessionLimits {
            max_tokens: group.max_tokens,
            eos: models.eos,
        },
        draft_interval_ms: 1000.0 / unit.tokens_per_second(),
        max_outstanding: group.max_outstanding,
        seed: derive_seed(cfg.seeds.root, "device", 0),
    };
    let draft = models.draft(group.quant);
    let agent = DeviceAgent::new(device_cfg, draft as Arc<dyn LanguageModel>, prompt)
        .map_err(|e| CliError::Config(e.to_string()))?;

    let mut connected = true;
    let mut transport: Box<dyn Transport> =
        match TcpTransport::connect(args.connect, args.connect_timeout) {
            Ok(t) => Box::new(t),
            Err(e) if reliability.fallback_enabled => {
                eprintln!(
                    "cannot reach {}: {e}; continuing with unverified drafts",
                    args.connect
                );
                connected = false;
                Box::new(BlackHoleTransport::default())
            }
            Err(e) => {
                return Err(CliError::Connect {
                    addr: args.connect.to_owned(),
                    reason: e.to_string(),
                })
            }
        };
    let tokenizer = &models.tokenizer;
    let mut write_err = None;
    let mut on_emit = |t: &EmittedToken| {
        let text = tokenizer.decode(&[t.token]);
        if let Err(e) = writeln!(out, "{} {}", marker(t), text).and_then(|_| out.flush()) {
            write_err.get_or_insert(e);
        }
    };
    let transcript = match run_session(agent, transport.as_mut(), &mut on_emit) {
        Ok(t) => t,
        Err(DeviceError::TransportFatal) => {
            return Err(CliError::Connect {
                addr: args.connect.to_owned(),
                reason: "verification unavailable and fallback disabled".into(),
            })
        }
        Err(e) => return Err(ExperimentError::from(e).into()),
    };
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let mut w = BufWriter::new(fs::File::create(&args.transcript)?);
    transcript.write_jsonl(&mut w)?;
    w.flush()?;
    // Close politely; the server also cleans up on disconnect.
    let _ = transport.send(&sled_core::protocol::Message::SessionClose { session_id });
    Ok(DeviceSummary {
        verified: transcript.count(Provenance::Verified),
        fallback: transcript.count(Provenance::Fallback),
        connected,
        text: tokenizer.decode(&transcript.generated()),
    })
}

/// Installs a Ctrl-C handler that sets the returned flag.
pub fn interrupt_flag() -> Result<Arc<AtomicBool>, CliError> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    ctrlc::set_handler(move || f.store(true, Ordering::SeqCst))
        .map_err(|e| CliError::Io(io::Error::other(e)))?;
    Ok(flag)
}
