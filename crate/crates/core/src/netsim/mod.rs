//! Transports and the discrete-event engine.
//!
//! [`Transport`] is what a device agent talks through. It has a socket
//! backend ([`TcpTransport`]) and a simulated one ([`SimulatedTransport`])
//! that runs a verification server on a virtual clock behind lossy links.

mod proxy;
mod sim;
mod socket;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{DecodeError, Message};
use crate::rng::RngStream;

pub use proxy::{run_proxy, ProxyConfig, ProxyHandle};
pub use sim::SimulatedTransport;
pub use socket::{BlackHoleTransport, TcpTransport};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("link closed")]
    LinkClosed,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("invalid network conditions: {0}")]
    InvalidConditions(String),
}

/// Message-level link model: latency, jitter, loss and bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConditions {
    pub rtt_mean_ms: f64,
    /// Uniform jitter on the RTT, `±rtt_jitter_ms`.
    pub rtt_jitter_ms: f64,
    /// Independent per-message drop probability, each direction.
    pub loss_rate: f64,
    /// `None` means unlimited.
    pub bandwidth_bytes_per_s: Option<f64>,
}

impl Default for NetworkConditions {
    fn default() -> Self {
        Self {
            rtt_mean_ms: 40.0,
            rtt_jitter_ms: 0.0,
            loss_rate: 0.0,
            bandwidth_bytes_per_s: None,
        }
    }
}

impl NetworkConditions {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidConditions(m.into()));
        if !(self.rtt_mean_ms >= 0.0 && self.rtt_mean_ms.is_finite()) {
            return bad("rtt_mean_ms must be >= 0");
        }
        if !(self.rtt_jitter_ms >= 0.0 && self.rtt_jitter_ms.is_finite()) {
            return bad("rtt_jitter_ms must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return bad("loss_rate must be in [0, 1]");
        }
        if let Some(bw) = self.bandwidth_bytes_per_s {
            if !(bw > 0.0 && bw.is_finite()) {
                return bad("bandwidth_bytes_per_s must be > 0");
            }
        }
        Ok(())
    }

    /// One-way latency for a uniform draw `u`: `rtt/2 ± jitter/2`, clamped at 0.
    pub fn one_way_latency_ms(&self, u: f64) -> f64 {
        (self.rtt_mean_ms / 2.0 + (2.0 * u - 1.0) * self.rtt_jitter_ms / 2.0).max(0.0)
    }
}

/// One direction of a simulated connection.
#[derive(Debug, Clone)]
pub struct Link {
    cond: NetworkConditions,
    rng: RngStream,
    last_delivery: f64,
    tx_free_at: f64,
    sent: u64,
    dropped: u64,
}

impl Link {
    pub fn new(cond: NetworkConditions, rng: RngStream) -> Self {
        Self {
            cond,
            rng,
            last_delivery: 0.0,
            tx_free_at: 0.0,
            sent: 0,
            dropped: 0,
        }
    }

    /// Delivery time of a message of `bytes` sent at `now`, or `None` if it
    /// is dropped. Deliveries never overtake earlier ones on the same link.
    pub fn transmit(&mut self, now: f64, bytes: usize) -> Option<f64> {
        self.sent += 1;
        let lost = self.rng.uniform() < self.cond.loss_rate;
        let latency = self.cond.one_way_latency_ms(self.rng.uniform());
        let mut departs = now;
        if let Some(bw) = self.cond.bandwidth_bytes_per_s {
            departs = now.max(self.tx_free_at) + bytes as f64 * 1000.0 / bw;
            self.tx_free_at = departs;
        }
        if lost {
            self.dropped += 1;
            return None;
        }
        let at = (departs + latency).max(self.last_delivery);
        self.last_delivery = at;
        Some(at)
    }

    pub fn conditions(&self) -> &NetworkConditions {
        &self.cond
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

/// What a device agent needs from its connection to the server.
pub trait Transport {
    /// Milliseconds since the transport was created.
    fn now_ms(&mut self) -> f64;

    fn send(&mut self, msg: &Message) -> Result<(), NetError>;

    /// Waits until a message arrives or the clock reaches `deadline_ms`.
    fn recv_until(&mut self, deadline_ms: f64) -> Result<Option<Message>, NetError>;
}

struct Entry<E> {
    at: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .at
            .total_cmp(&self.at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Simulation clock and pending events, ordered by `(time, insertion)`.
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    seq: u64,
    now: f64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunOutcome {
    /// No events left; carries the time of the last one.
    Idle(f64),
    /// Stopped at the horizon with events still pending.
    HorizonExceeded(f64),
}

impl RunOutcome {
    pub fn time(self) -> f64 {
        match self {
            RunOutcome::Idle(t) | RunOutcome::HorizonExceeded(t) => t,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Schedules `event` at `at`; times in the past are clamped to now.
    pub fn push(&mut self, at: f64, event: E) {
        let at = if at < self.now { self.now } else { at };
        self.heap.push(Entry {
            at,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.at)
    }

    pub fn pop(&mut self) -> Option<(f64, E)> {
        let e = self.heap.pop()?;
        self.now = e.at;
        Some((e.at, e.event))
    }

    /// Moves the clock forward without firing anything.
    pub fn advance_to(&mut self, t: f64) {
        if t > self.now {
            self.now = t;
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Fires events in order until none remain or the next one is past
    /// `horizon_ms`.
    pub fn run_until_idle<F>(&mut self, horizon_ms: Option<f64>, mut handle: F) -> RunOutcome
    where
        F: FnMut(&mut Self, f64, E),
    {
        loop {
            match self.peek_time() {
                None => return RunOutcome::Idle(self.now),
                Some(t) if horizon_ms.is_some_and(|h| t > h) => {
                    self.advance_to(horizon_ms.unwrap_or(t));
                    return RunOutcome::HorizonExceeded(self.now);
                }
                Some(_) => {
                    let (t, e) = self.pop().expect("peeked");
                    handle(self, t, e);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(loss: f64, jitter: f64) -> Link {
        Link::new(
            NetworkConditions {
                rtt_mean_ms: 20.0,
                rtt_jitter_ms: jitter,
                loss_rate: loss,
                bandwidth_bytes_per_s: None,
            },
            RngStream::new(1, 0, "link"),
        )
    }

    #[test]
    fn empty_queue_is_idle_at_zero() {
        let mut q: EventQueue<()> = EventQueue::new();
        assert_eq!(q.run_until_idle(None, |_, _, _| {}), RunOutcome::Idle(0.0));
    }

    #[test]
    fn equal_times_fire_in_insertion_order() {
        let mut q = EventQueue::new();
        for i in 0..5 {
            q.push(3.0, i);
        }
        q.push(1.0, 99);
        let mut seen = Vec::new();
        q.run_until_idle(None, |_, _, e| seen.push(e));
        assert_eq!(seen, vec![99, 0, 1, 2, 3, 4]);
    }

    #[test]
    fn horizon_stops_run() {
        let mut q = EventQueue::new();
        q.push(1.0, 1);
        q.push(10.0, 2);
        let mut seen = Vec::new();
        let out = q.run_until_idle(Some(5.0), |_, _, e| seen.push(e));
        assert_eq!(out, RunOutcome::HorizonExceeded(5.0));
        assert_eq!(seen, vec![1]);
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn lossless_link_is_fifo() {
        let mut l = link(0.0, 19.0);
        let mut last = 0.0;
        for i in 0..1000 {
            let at = l.transmit(i as f64 * 0.1, 10).expect("no loss");
            assert!(at >= last);
            assert!(at >= i as f64 * 0.1);
            last = at;
        }
        assert_eq!(l.dropped(), 0);
    }

    #[test]
    fn total_loss_delivers_nothing() {
        let mut l = link(1.0, 0.0);
        assert!((0..1000).all(|i| l.transmit(i as f64, 10).is_none()));
    }

    #[test]
    fn loss_rate_binomial() {
        let mut l = link(0.1, 0.0);
        let n = 100_000u64;
        let delivered = (0..n)
            .filter(|i| l.transmit(*i as f64, 1).is_some())
            .count() as f64;
        let sigma = (n as f64 * 0.1 * 0.9).sqrt();
        assert!((delivered - 90_000.0).abs() <= 3.0 * sigma, "{delivered}");
    }

    #[test]
    fn bandwidth_serializes() {
        let mut l = Link::new(
            NetworkConditions {
                rtt_mean_ms: 0.0,
                rtt_jitter_ms: 0.0,
                loss_rate: 0.0,
                bandwidth_bytes_per_s: Some(1000.0),
            },
            RngStream::new(1, 0, "link"),
        );
        assert_eq!(l.transmit(0.0, 100), Some(100.0));
        assert_eq!(l.transmit(0.0, 100), Some(200.0));
    }

    #[test]
    fn latency_clamped() {
        let c = NetworkConditions {
            rtt_mean_ms: 2.0,
            rtt_jitter_ms: 10.0,
            ..Default::default()
        };
        assert_eq!(c.one_way_latency_ms(0.0), 0.0);
        assert_eq!(c.one_way_latency_ms(1.0), 6.0);
        assert!(NetworkConditions {
            loss_rate: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
