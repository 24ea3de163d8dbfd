//! Lossy TCP proxy for exercising devices against a real server.

use std::process::ExitCode;
use std::sync::atomic::Ordering;
use std::thread;
use std::time::Duration;

use clap::Parser;
use sled_core::netsim::{run_proxy, NetworkConditions, ProxyConfig};

#[derive(Parser)]
#[command(
    name = "sled-proxy",
    version,
    about = "Forward sled frames with loss and delay"
)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7071")]
    listen: String,
    #[arg(long, default_value = "127.0.0.1:7070")]
    forward: String,
    /// Per-frame drop probability in each direction.
    #[arg(long, default_value_t = 0.0)]
    loss: f64,
    #[arg(long, default_value_t = 0.0)]
    rtt_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    jitter_ms: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn main() -> ExitCode {
    let a = Args::parse();
    let conditions = NetworkConditions {
        rtt_mean_ms: a.rtt_ms,
        rtt_jitter_ms: a.jitter_ms,
        loss_rate: a.loss,
        bandwidth_bytes_per_s: None,
    };
    if let Err(e) = conditions.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let handle = match run_proxy(ProxyConfig {
        listen: a.listen.clone(),
        forward: a.forward.clone(),
        conditions,
        seed: a.seed,
    }) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("error: cannot listen on {}: {e}", a.listen);
            return ExitCode::from(1);
        }
    };
    println!(
        "proxy {} -> {} loss {} rtt_ms {} jitter_ms {}",
        handle.local_addr(),
        a.forward,
        a.loss,
        a.rtt_ms,
        a.jitter_ms
    );
    let stop = handle.stop_flag();
    let flag = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    while !stop.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(50));
    }
    handle.stop();
    ExitCode::SUCCESS
}
