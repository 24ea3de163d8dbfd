use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::NetworkConditions;
use crate::protocol::{self, DecodeError};
use crate::rng::RngStream;

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    pub listen: String,
    pub forward: String,
    pub conditions: NetworkConditions,
    pub seed: u64,
}

/// A running lossy proxy; dropping the handle does not stop it.
pub struct ProxyHandle {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl ProxyHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(j) = self.acceptor.take() {
            let _ = j.join();
        }
    }

    /// Blocks until the acceptor exits.
    pub fn join(mut self) {
        if let Some(j) = self.acceptor.take() {
            let _ = j.join();
        }
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }
}

/// Forwards whole frames between each client and `forward`, dropping each
/// frame with probability `loss_rate` and delaying the rest by a one-way
/// latency drawn like the simulator's.
pub fn run_proxy(cfg: ProxyConfig) -> io::Result<ProxyHandle> {
    cfg.conditions
        .validate()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    let listener = TcpListener::bind(&cfg.listen)?;
    listener.set_nonblocking(true)?;
    let local_addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop2 = stop.clone();
    let acceptor = thread::spawn(move || {
        let mut conn = 0u64;
        while !stop2.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((client, _)) => {
                    let _ = client.set_nonblocking(false);
                    if let Ok(server) = TcpStream::connect(&cfg.forward) {
                        spawn_pumps(client, server, &cfg, conn, stop2.clone());
                    }
                    conn += 1;
                }
                Err(_) => thread::sleep(Duration::from_millis(5)),
            }
        }
    });
    Ok(ProxyHandle {
        local_addr,
        stop,
        acceptor: Some(acceptor),
    })
}

fn spawn_pumps(
    client: TcpStream,
    server: TcpStream,
    cfg: &ProxyConfig,
    conn: u64,
    stop: Arc<AtomicBool>,
) {
    let _ = client.set_nodelay(true);
    let _ = server.set_nodelay(true);
    let (Ok(c2), Ok(s2)) = (client.try_clone(), server.try_clone()) else {
        return;
    };
    let up = RngStream::new(cfg.seed, conn, "proxy-up");
    let down = RngStream::new(cfg.seed, conn, "proxy-down");
    let cond = cfg.conditions;
    let stop_up = stop.clone();
    thread::spawn(move || pump(client, server, cond, up, stop_up));
    thread::spawn(move || pump(s2, c2, cond, down, stop));
}

fn pump(
    mut from: TcpStream,
    mut to: TcpStream,
    cond: NetworkConditions,
    mut rng: RngStream,
    stop: Arc<AtomicBool>,
) {
    let start = Instant::now();
    let mut last_delivery = 0.0f64;
    let mut buf = Vec::new();
    let mut chunk = [0u8; 8192];
    let _ = from.set_read_timeout(Some(Duration::from_millis(50)));
    'outer: while !stop.load(Ordering::SeqCst) {
        let n = match from.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) =>
            {
                continue
            }
            Err(_) => break,
        };
        buf.extend_from_slice(&chunk[..n]);
        loop {
            let used = match protocol::decode(&buf) {
                Ok((_, used)) => used,
                Err(DecodeError::Truncated) => break,
                Err(DecodeError::Malformed(_)) => break 'outer,
            };
            let frame: Vec<u8> = buf.drain(..used).collect();
            let lost = rng.uniform() < cond.loss_rate;
            let latency = cond.one_way_latency_ms(rng.uniform());
            if lost {
                continue;
            }
            let now = start.elapsed().as_secs_f64() * 1000.0;
            let at = (now + latency).max(last_delivery);
            last_delivery = at;
            if at > now {
                thread::sleep(Duration::from_secs_f64((at - now) / 1000.0));
            }
            if to.write_all(&frame).is_err() {
                break 'outer;
            }
        }
    }
    let _ = from.shutdown(Shutdown::Both);
    let _ = to.shutdown(Shutdown::Both);
}
