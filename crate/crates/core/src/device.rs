//! Edge device agent.
//!
//! [`DeviceAgent`] is a sans-I/O state machine. It is fed [`DeviceEvent`]s
//! with the current time and answers with [`Action`]s for its driver to
//! carry out: send a message, arm a timer, schedule the next draft. The same
//! agent runs inside the simulator and over real sockets ([`run_session`]).

use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{sample_token, LanguageModel};
use crate::netsim::Transport;
use crate::protocol::{Message, VerifyRequest, VerifyResponse};
use crate::rng::PositionalUniforms;
use crate::specdec::{check_tokens, SpecError, TokenId};

pub const DEFAULT_GAMMA_MAX: usize = 8;
pub const DEFAULT_MAX_RETRIES: u32 = 2;
pub const DEFAULT_FAILURE_THRESHOLD: u32 = 3;
pub const DEFAULT_MAX_OUTSTANDING: usize = 64;
/// Timeout used when the configured RTT is zero.
pub const MIN_DEFAULT_TIMEOUT_MS: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DraftingPolicy {
    FixedLength {
        gamma: usize,
    },
    ConfidenceThreshold {
        c_th: f64,
        #[serde(default = "default_gamma_max")]
        gamma_max: usize,
    },
}

fn default_gamma_max() -> usize {
    DEFAULT_GAMMA_MAX
}

impl Default for DraftingPolicy {
    fn default() -> Self {
        DraftingPolicy::FixedLength { gamma: 4 }
    }
}

impl DraftingPolicy {
    pub fn validate(&self) -> Result<(), DeviceError> {
        match *self {
            DraftingPolicy::FixedLength { gamma: 0 } => {
                Err(DeviceError::InvalidPolicy("gamma must be >= 1".into()))
            }
            DraftingPolicy::ConfidenceThreshold { c_th, gamma_max } => {
                if gamma_max == 0 {
                    return Err(DeviceError::InvalidPolicy("gamma_max must be >= 1".into()));
                }
                if !(0.0..=1.0).contains(&c_th) {
                    return Err(DeviceError::InvalidPolicy("c_th must be in [0, 1]".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Longest block the policy cuts on its own.
    pub fn max_block(&self) -> usize {
        match *self {
            DraftingPolicy::FixedLength { gamma } => gamma,
            DraftingPolicy::ConfidenceThreshold { gamma_max, .. } => gamma_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DraftDecision {
    Continue,
    RequestVerification,
}

/// Whether to stop drafting and request verification after the
/// `drafted_so_far`-th token of a block, drafted with `confidence`.
pub fn drafting_decision(
    confidence: f64,
    drafted_so_far: usize,
    policy: &DraftingPolicy,
) -> DraftDecision {
    let stop = match *policy {
        DraftingPolicy::FixedLength { gamma } => drafted_so_far >= gamma,
        DraftingPolicy::ConfidenceThreshold { c_th, gamma_max } => {
            confidence < c_th || drafted_so_far >= gamma_max
        }
    };
    if stop {
        DraftDecision::RequestVerification
    } else {
        DraftDecision::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReliabilityPolicy {
    pub timeout_ms: f64,
    pub max_retries: u32,
    /// Consecutive failures before pending drafts are released unverified.
    pub failure_threshold: u32,
    pub fallback_enabled: bool,
}

impl ReliabilityPolicy {
    /// Defaults for a network with the given mean RTT.
    pub fn for_rtt(rtt_mean_ms: f64) -> Self {
        let timeout_ms = if rtt_mean_ms > 0.0 {
            4.0 * rtt_mean_ms
        } else {
            MIN_DEFAULT_TIMEOUT_MS
        };
        Self {
            timeout_ms,
            max_retries: DEFAULT_MAX_RETRIES,
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
            fallback_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        if !(self.timeout_ms > 0.0 && self.timeout_ms.is_finite()) {
            return Err(DeviceError::InvalidPolicy("timeout must be > 0".into()));
        }
        if self.failure_threshold == 0 {
            return Err(DeviceError::InvalidPolicy(
                "failure threshold must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionLimits {
    pub max_tokens: usize,
    pub eos: Option<TokenId>,
}

#[derive(Debug, Clone)]
pub struct DeviceConfig {
    pub session_id: u64,
    pub drafting: DraftingPolicy,
    pub reliability: ReliabilityPolicy,
    pub limits: SessionLimits,
    /// Time the draft model needs per token.
    pub draft_interval_ms: f64,
    pub max_outstanding: usize,
    /// Seed of the positional draws used for drafting.
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("verification unavailable and fallback disabled")]
    TransportFatal,
    #[error(transparent)]
    Spec(#[from] SpecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Verified,
    Fallback,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Verified => "verified",
            Provenance::Fallback => "fallback",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmittedToken {
    pub index: usize,
    pub token: TokenId,
    pub provenance: Provenance,
    pub time_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CutReason {
    /// The drafting policy asked for verification.
    Policy,
    /// The block ends in the end-of-sequence token.
    Eos,
    /// Drafting is capped by the token budget or the outstanding limit.
    Budget,
    /// Resend of an unacknowledged block after a failure.
    Retry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Request {
        time_ms: f64,
        request_id: u64,
        base_position: u64,
        len: usize,
        retry: u32,
        reason: CutReason,
        last_confidence: f64,
        resync: bool,
    },
    Response {
        time_ms: f64,
        request_id: u64,
        accepted: u16,
        corrective: Option<TokenId>,
    },
    Stale {
        time_ms: f64,
        request_id: u64,
    },
    Timeout {
        time_ms: f64,
        request_id: u64,
    },
    Invalid {
        time_ms: f64,
        request_id: u64,
    },
    Fallback {
        time_ms: f64,
        released: usize,
        consecutive_failures: u32,
    },
}

/// Server verdict on one drafted token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DraftVerdict {
    pub confidence: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionTranscript {
    pub session_id: u64,
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<EmittedToken>,
    pub log: Vec<LogEvent>,
    pub verdicts: Vec<DraftVerdict>,
}

impl SessionTranscript {
    pub fn generated(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|t| t.token).collect()
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.tokens
            .iter()
            .filter(|t| t.provenance == provenance)
            .count()
    }

    /// One JSON object per line: emitted tokens first, then the event log.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for t in &self.tokens {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        for e in &self.log {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeviceEvent {
    TokenDrafted { epoch: u64 },
    ResponseArrived(VerifyResponse),
    TimeoutFired { request_id: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send(Message),
    ArmTimer {
        request_id: u64,
        at_ms: f64,
    },
    /// Deliver `TokenDrafted { epoch }` at `at_ms`. Drafts of older epochs
    /// are ignored, which is how an in-progress draft is cancelled.
    ScheduleDraft {
        epoch: u64,
        at_ms: f64,
    },
    Emit {
        tokens: Vec<TokenId>,
        provenance: Provenance,
    },
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Drafted {
    token: TokenId,
    confidence: f64,
}

#[derive(Debug, Clone)]
struct InFlight {
    request_id: u64,
    base_position: u64,
    block: Vec<Drafted>,
    retries: u32,
}

pub struct DeviceAgent {
    cfg: DeviceConfig,
    draft: Arc<dyn LanguageModel>,
    draws: PositionalUniforms,
    prompt_len: usize,
    committed: Vec<TokenId>,
    building: Vec<Drafted>,
    ahead: Vec<Drafted>,
    in_flight: Option<InFlight>,
    consecutive_failures: u32,
    next_request_id: u64,
    needs_resync: bool,
    epoch: u64,
    draft_pending: bool,
    finished: bool,
    transcript: SessionTranscript,
}

impl DeviceAgent {
    pub fn new(
        cfg: DeviceConfig,
        draft: Arc<dyn LanguageModel>,
        prompt: Vec<TokenId>,
    ) -> Result<Self, DeviceError> {
        cfg.drafting.validate()?;
        cfg.reliability.validate()?;
        if !(cfg.draft_interval_ms >= 0.0 && cfg.draft_interval_ms.is_finite()) {
            return Err(DeviceError::InvalidPolicy(
                "draft interval must be >= 0".into(),
            ));
        }
        if cfg.max_outstanding == 0 {
            return Err(DeviceError::InvalidPolicy(
                "max_outstanding must be >= 1".into(),
            ));
        }
        check_tokens(&prompt, draft.vocab_size())?;
        if prompt.len() > u16::MAX as usize {
            return Err(DeviceError::InvalidPolicy(
                "prompt longer than 65535 tokens".into(),
            ));
        }
        let draws = PositionalUniforms::new(cfg.seed, cfg.session_id, "draft");
        let transcript = SessionTranscript {
            session_id: cfg.session_id,
            prompt: prompt.clone(),
            ..Default::default()
        };
        Ok(Self {
            draws,
            prompt_len: prompt.len(),
            committed: prompt,
            building: Vec::new(),
            ahead: Vec::new(),
            in_flight: None,
            consecutive_failures: 0,
            next_request_id: 1,
            needs_resync: true,
            epoch: 0,
            draft_pending: false,
            finished: false,
            transcript,
            cfg,
            draft,
        })
    }

    pub fn session_id(&self) -> u64 {
        self.cfg.session_id
    }

    pub fn committed(&self) -> &[TokenId] {
        &self.committed
    }

    pub fn generated_len(&self) -> usize {
        self.committed.len() - self.prompt_len
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn consecutive_failures(&self) -> u32 {
        self.consecutive_failures
    }

    pub fn in_flight_request(&self) -> Option<u64> {
        self.in_flight.as_ref().map(|f| f.request_id)
    }

    pub fn draft_ahead_len(&self) -> usize {
        self.ahead.len()
    }

    pub fn transcript(&self) -> &SessionTranscript {
        &self.transcript
    }

    pub fn into_transcript(self) -> SessionTranscript {
        self.transcript
    }

    pub fn start(&mut self, now: f64) -> Vec<Action> {
        let mut actions = Vec::new();
        if self.cfg.limits.max_tokens == 0 {
            self.finished = true;
            actions.push(Action::Finished);
            return actions;
        }
        self.maybe_schedule_draft(now, &mut actions);
        actions
    }

    pub fn step(&mut self, event: DeviceEvent, now: f64) -> Result<Vec<Action>, DeviceError> {
        let mut actions = Vec::new();
        if self.finished {
            return Ok(actions);
        }
        match event {
            DeviceEvent::TokenDrafted { epoch } => self.on_drafted(epoch, now, &mut actions)?,
            DeviceEvent::ResponseArrived(resp) => self.on_response(resp, now, &mut actions)?,
            DeviceEvent::TimeoutFired { request_id } => {
                if self.in_flight_request() == Some(request_id) {
                    self.transcript.log.push(LogEvent::Timeout {
                        time_ms: now,
                        request_id,
                    });
                    self.on_failure(now, &mut actions)?;
                }
            }
        }
        Ok(actions)
    }

    fn outstanding(&self) -> usize {
        self.building.len()
            + self.ahead.len()
            + self.in_flight.as_ref().map_or(0, |f| f.block.len())
    }

    fn last_pending(&self) -> Option<TokenId> {
        self.ahead
            .last()
            .or(self.building.last())
            .or(self.in_flight.as_ref().and_then(|f| f.block.last()))
            .map(|d| d.token)
    }

    fn budget_exhausted(&self) -> bool {
        self.generated_len() + self.outstanding() >= self.cfg.limits.max_tokens
    }

    fn draft_blocked(&self) -> bool {
        self.finished
            || self.budget_exhausted()
            || self.outstanding() >= self.cfg.max_outstanding
            || (self.cfg.limits.eos.is_some() && self.last_pending() == self.cfg.limits.eos)
    }

    fn maybe_schedule_draft(&mut self, now: f64, actions: &mut Vec<Action>) {
        if !self.draft_pending && !self.draft_blocked() {
            self.draft_pending = true;
            actions.push(Action::ScheduleDraft {
                epoch: self.epoch,
                at_ms: now + self.cfg.draft_interval_ms,
            });
        }
    }

    fn cancel_drafting(&mut self) {
        self.epoch += 1;
        self.draft_pending = false;
    }

    fn on_drafted(
        &mut self,
        epoch: u64,
        now: f64,
        actions: &mut Vec<Action>,
    ) -> Result<(), DeviceError> {
        if epoch != self.epoch || !self.draft_pending {
            return Ok(());
        }
        self.draft_pending = false;
        if self.draft_blocked() {
            return Ok(());
        }
        let mut ctx = self.committed.clone();
        match &self.in_flight {
            Some(f) => {
                ctx.extend(f.block.iter().map(|d| d.token));
                ctx.extend(self.ahead.iter().map(|d| d.token));
            }
            None => ctx.extend(self.building.iter().map(|d| d.token)),
        }
        self.draws.set_base(ctx.len() as u64);
        let (token, confidence) = sample_token(self.draft.as_ref(), &ctx, &mut self.draws)?;
        let d = Drafted { token, confidence };
        if self.in_flight.is_some() {
            self.ahead.push(d);
        } else {
            self.building.push(d);
            if let Some(reason) = self.cut_reason(d, self.building.len()) {
                self.send_building(reason, now, actions);
            } else if self.draft_blocked() {
                self.send_building(CutReason::Budget, now, actions);
            }
        }
        self.maybe_schedule_draft(now, actions);
        Ok(())
    }

    fn cut_reason(&self, d: Drafted, block_len: usize) -> Option<CutReason> {
        if self.cfg.limits.eos == Some(d.token) {
            return Some(CutReason::Eos);
        }
        match drafting_decision(d.confidence, block_len, &self.cfg.drafting) {
            DraftDecision::RequestVerification => Some(CutReason::Policy),
            DraftDecision::Continue => None,
        }
    }

    /// Moves `pending` into the next block, cutting where the policy would
    /// have cut; tokens past the cut stay as draft-ahead of the new request.
    fn promote(&mut self, pending: Vec<Drafted>, now: f64, actions: &mut Vec<Action>) {
        debug_assert!(self.in_flight.is_none() && self.building.is_empty());
        let mut rest = pending.into_iter();
        for d in rest.by_ref() {
            self.building.push(d);
            if let Some(reason) = self.cut_reason(d, self.building.len()) {
                self.ahead = rest.collect();
                self.send_building(reason, now, actions);
                return;
            }
        }
        if !self.building.is_empty() && self.draft_blocked() {
            self.send_building(CutReason::Budget, now, actions);
        }
    }

    fn send_building(&mut self, reason: CutReason, now: f64, actions: &mut Vec<Action>) {
        let block = std::mem::take(&mut self.building);
        let flight = InFlight {
            request_id: self.next_request_id,
            base_position: self.committed.len() as u64,
            block,
            retries: 0,
        };
        self.next_request_id += 1;
        self.transmit(flight, reason, now, actions);
    }

    fn transmit(
        &mut self,
        flight: InFlight,
        reason: CutReason,
        now: f64,
        actions: &mut Vec<Action>,
    ) {
        let resync = self.needs_resync;
        if resync {
            actions.push(Action::Send(Message::SessionInit {
                session_id: self.cfg.session_id,
                prompt_tokens: self.committed.clone(),
                draft_model_name: self.draft.name().to_owned(),
            }));
        }
        actions.push(Action::Send(Message::VerifyRequest(VerifyRequest {
            session_id: self.cfg.session_id,
            request_id: flight.request_id,
            base_position: flight.base_position,
            tokens: flight.block.iter().map(|d| d.token).collect(),
            draft_probs: flight.block.iter().map(|d| d.confidence).collect(),
        })));
        actions.push(Action::ArmTimer {
            request_id: flight.request_id,
            at_ms: now + self.cfg.reliability.timeout_ms,
        });
        self.transcript.log.push(LogEvent::Request {
            time_ms: now,
            request_id: flight.request_id,
            base_position: flight.base_position,
            len: flight.block.len(),
            retry: flight.retries,
            reason,
            last_confidence: flight.block.last().map_or(0.0, |d| d.confidence),
            resync,
        });
        self.in_flight = Some(flight);
    }

    fn commit(
        &mut self,
        tokens: Vec<TokenId>,
        provenance: Provenance,
        now: f64,
        actions: &mut Vec<Action>,
    ) {
        if tokens.is_empty() {
            return;
        }
        for &token in &tokens {
            self.transcript.tokens.push(EmittedToken {
                index: self.generated_len(),
                token,
                provenance,
                time_ms: now,
            });
            self.committed.push(token);
        }
        actions.push(Action::Emit { tokens, provenance });
    }

    fn check_finished(&mut self, actions: &mut Vec<Action>) -> bool {
        let hit_eos = self.generated_len() > 0
            && self.cfg.limits.eos.is_some()
            && self.committed.last().copied() == self.cfg.limits.eos;
        if hit_eos || self.generated_len() >= self.cfg.limits.max_tokens {
            self.finished = true;
            self.cancel_drafting();
            self.in_flight = None;
            self.ahead.clear();
            self.building.clear();
            actions.push(Action::Send(Message::SessionClose {
                session_id: self.cfg.session_id,
            }));
            actions.push(Action::Finished);
            return true;
        }
        false
    }

    fn response_is_valid(&self, resp: &VerifyResponse, len: usize) -> bool {
        let k = resp.accepted_count as usize;
        match resp.corrective_token {
            Some(c) => k < len && c.index() < self.draft.vocab_size(),
            None => k <= len,
        }
    }

    fn on_response(
        &mut self,
        resp: VerifyResponse,
        now: f64,
        actions: &mut Vec<Action>,
    ) -> Result<(), DeviceError> {
        if resp.session_id != self.cfg.session_id {
            return Err(DeviceError::ProtocolViolation(format!(
                "response for session {} on session {}",
                resp.session_id, self.cfg.session_id
            )));
        }
        if self.in_flight_request() != Some(resp.request_id) {
            self.transcript.log.push(LogEvent::Stale {
                time_ms: now,
                request_id: resp.request_id,
            });
            return Ok(());
        }
        let len = self.in_flight.as_ref().map_or(0, |f| f.block.len());
        if !self.response_is_valid(&resp, len) {
            self.transcript.log.push(LogEvent::Invalid {
                time_ms: now,
                request_id: resp.request_id,
            });
            return self.on_failure(now, actions);
        }
        let flight = self.in_flight.take().expect("checked above");
        self.transcript.log.push(LogEvent::Response {
            time_ms: now,
            request_id: resp.request_id,
            accepted: resp.accepted_count,
            corrective: resp.corrective_token,
        });
        self.consecutive_failures = 0;
        self.needs_resync = false;

        let k = resp.accepted_count as usize;
        let mut block = flight.block;
        for d in &block[..k] {
            self.transcript.verdicts.push(DraftVerdict {
                confidence: d.confidence,
                accepted: true,
            });
        }
        let mut tokens: Vec<TokenId> = block[..k].iter().map(|d| d.token).collect();
        if let Some(c) = resp.corrective_token {
            self.transcript.verdicts.push(DraftVerdict {
                confidence: block[k].confidence,
                accepted: false,
            });
            tokens.push(c);
            self.commit(tokens, Provenance::Verified, now, actions);
            // The speculative continuation was drafted on a rejected token.
            self.ahead.clear();
            self.cancel_drafting();
            if !self.check_finished(actions) {
                self.maybe_schedule_draft(now, actions);
            }
            return Ok(());
        }
        self.commit(tokens, Provenance::Verified, now, actions);
        if self.check_finished(actions) {
            return Ok(());
        }
        // A replayed response can cover a shorter block than the one in
        // flight; the unexamined tail is still a valid draft.
        let mut pending = block.split_off(k);
        pending.append(&mut self.ahead);
        self.promote(pending, now, actions);
        self.maybe_schedule_draft(now, actions);
        Ok(())
    }

    fn on_failure(&mut self, now: f64, actions: &mut Vec<Action>) -> Result<(), DeviceError> {
        let Some(mut flight) = self.in_flight.take() else {
            return Ok(());
        };
        let rel = self.cfg.reliability;
        let in_fallback = self.consecutive_failures >= rel.failure_threshold;
        self.consecutive_failures += 1;
        flight.block.append(&mut self.ahead);
        flight.request_id = self.next_request_id;
        self.next_request_id += 1;
        if !in_fallback && flight.retries < rel.max_retries {
            flight.retries += 1;
            self.transmit(flight, CutReason::Retry, now, actions);
            return Ok(());
        }
        if self.consecutive_failures >= rel.failure_threshold {
            if !rel.fallback_enabled {
                return Err(DeviceError::TransportFatal);
            }
            let released: Vec<TokenId> = flight.block.iter().map(|d| d.token).collect();
            self.transcript.log.push(LogEvent::Fallback {
                time_ms: now,
                released: released.len(),
                consecutive_failures: self.consecutive_failures,
            });
            self.commit(released, Provenance::Fallback, now, actions);
            self.needs_resync = true;
            if !self.check_finished(actions) {
                self.maybe_schedule_draft(now, actions);
            }
            return Ok(());
        }
        flight.retries = 0;
        self.transmit(flight, CutReason::Retry, now, actions);
        Ok(())
    }
}

/// Timer bookkeeping for drivers of a [`DeviceAgent`].
#[derive(Debug, Default)]
struct Timers {
    entries: Vec<(f64, u64, DeviceEvent)>,
    seq: u64,
}

impl Timers {
    fn push(&mut self, at: f64, event: DeviceEvent) {
        self.entries.push((at, self.seq, event));
        self.seq += 1;
    }

    fn next_time(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.0).min_by(f64::total_cmp)
    }

    fn pop_due(&mut self, now: f64) -> Option<DeviceEvent> {
        let idx = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.0 <= now)
            .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.1 .1.cmp(&b.1 .1)))
            .map(|(i, _)| i)?;
        Some(self.entries.swap_remove(idx).2)
    }
}

/// Drives `agent` over `transport` until the session finishes.
///
/// `on_emit` sees every emitted token as it is committed.
pub fn run_session(
    mut agent: DeviceAgent,
    transport: &mut dyn Transport,
    on_emit: &mut dyn FnMut(&EmittedToken),
) -> Result<SessionTranscript, DeviceError> {
    let mut timers = Timers::default();
    let mut reported = 0;
    let now = transport.now_ms();
    let mut actions = agent.start(now);
    loop {
        for action in actions.drain(..) {
            match action {
                // A failed send is a lost message; the timer handles it.
                Action::Send(msg) => drop(transport.send(&msg)),
                Action::ArmTimer { request_id, at_ms } => {
                    timers.push(at_ms, DeviceEvent::TimeoutFired { request_id })
                }
                Action::ScheduleDraft { epoch, at_ms } => {
                    timers.push(at_ms, DeviceEvent::TokenDrafted { epoch })
                }
                Action::Emit { .. } | Action::Finished => {}
            }
        }
        for t in &agent.transcript().tokens[reported..] {
            on_emit(t);
        }
        reported = agent.transcript().tokens.len();
        if agent.is_finished() {
            return Ok(agent.into_transcript());
        }
        let Some(deadline) = timers.next_time() else {
            return Err(DeviceError::ProtocolViolation(
                "agent stalled with no timers".into(),
            ));
        };
        let received = transport.recv_until(deadline).unwrap_or(None);
        let now = transport.now_ms();
        match received {
            Some(Message::VerifyResponse(resp)) => {
                actions = agent.step(DeviceEvent::ResponseArrived(resp), now)?;
            }
            Some(_) => {}
            None => {
                if let Some(ev) = timers.pop_due(now.max(deadline)) {
                    actions = agent.step(ev, now.max(deadline))?;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::StaticModel;
    use crate::specdec::ProbVector;

    fn agent(model: StaticModel, gamma: usize, max_tokens: usize) -> DeviceAgent {
        let cfg = DeviceConfig {
            session_id: 7,
            drafting: DraftingPolicy::FixedLength { gamma },
            reliability: ReliabilityPolicy::for_rtt(10.0),
            limits: SessionLimits {
                max_tokens,
                eos: None,
            },
            draft_interval_ms: 10.0,
            max_outstanding: 64,
            seed: 1,
        };
        DeviceAgent::new(cfg, Arc::new(model), vec![TokenId(0)]).unwrap()
    }

    fn certain(tok: u32) -> StaticModel {
        StaticModel::new("d", ProbVector::one_hot(4, TokenId(tok)).unwrap())
    }

    fn sent_request(actions: &[Action]) -> Option<VerifyRequest> {
        actions.iter().find_map(|a| match a {
            Action::Send(Message::VerifyRequest(r)) => Some(r.clone()),
            _ => None,
        })
    }

    /// Fires drafts until a request goes out.
    fn draft_until_request(a: &mut DeviceAgent, t: &mut f64) -> VerifyRequest {
        loop {
            *t += 10.0;
            let epoch = a.epoch;
            let acts = a.step(DeviceEvent::TokenDrafted { epoch }, *t).unwrap();
            if let Some(r) = sent_request(&acts) {
                return r;
            }
        }
    }

    fn respond(req: &VerifyRequest, k: u16, c: Option<u32>) -> DeviceEvent {
        DeviceEvent::ResponseArrived(VerifyResponse {
            session_id: req.session_id,
            request_id: req.request_id,
            accepted_count: k,
            corrective_token: c.map(TokenId),
        })
    }

    #[test]
    fn decision_rule() {
        let p = DraftingPolicy::ConfidenceThreshold {
            c_th: 0.5,
            gamma_max: 8,
        };
        assert_eq!(
            drafting_decision(0.3, 2, &p),
            DraftDecision::RequestVerification
        );
        assert_eq!(drafting_decision(0.5, 2, &p), DraftDecision::Continue);
        assert_eq!(
            drafting_decision(0.99, 8, &p),
            DraftDecision::RequestVerification
        );
        let f = DraftingPolicy::FixedLength { gamma: 3 };
        assert_eq!(drafting_decision(0.0, 2, &f), DraftDecision::Continue);
        assert_eq!(
            drafting_decision(1.0, 3, &f),
            DraftDecision::RequestVerification
        );
    }

    #[test]
    fn full_acceptance_promotes_draft_ahead() {
        let mut a = agent(certain(2), 2, 100);
        a.start(0.0);
        let mut t = 0.0;
        let req = draft_until_request(&mut a, &mut t);
        assert_eq!(req.tokens.len(), 2);
        t += 10.0;
        a.step(DeviceEvent::TokenDrafted { epoch: a.epoch }, t)
            .unwrap();
        assert_eq!(a.draft_ahead_len(), 1);
        a.step(respond(&req, 2, None), t + 1.0).unwrap();
        assert_eq!(a.generated_len(), 2);
        assert_eq!(a.building.len(), 1);
        assert!(a.in_flight.is_none());
    }

    #[test]
    fn rejection_discards_draft_ahead() {
        let mut a = agent(certain(2), 2, 100);
        a.start(0.0);
        let mut t = 0.0;
        let req = draft_until_request(&mut a, &mut t);
        t += 10.0;
        a.step(DeviceEvent::TokenDrafted { epoch: a.epoch }, t)
            .unwrap();
        let old_epoch = a.epoch;
        let acts = a.step(respond(&req, 1, Some(3)), t + 1.0).unwrap();
        assert_eq!(&a.committed()[1..], &[TokenId(2), TokenId(3)]);
        assert_eq!(a.draft_ahead_len(), 0);
        assert!(a.building.is_empty());
        assert!(acts
            .iter()
            .any(|x| matches!(x, Action::ScheduleDraft { epoch, .. } if *epoch > old_epoch)));
    }

    #[test]
    fn stale_and_foreign_responses() {
        let mut a = agent(certain(2), 1, 100);
        a.start(0.0);
        let mut t = 0.0;
        let req = draft_until_request(&mut a, &mut t);
        let mut stale = req.clone();
        stale.request_id = 99;
        assert!(a.step(respond(&stale, 1, None), t).unwrap().is_empty());
        let mut foreign = req.clone();
        foreign.session_id = 8;
        assert!(matches!(
            a.step(respond(&foreign, 1, None), t),
            Err(DeviceError::ProtocolViolation(_))
        ));
    }

    #[test]
    fn retry_then_fallback() {
        let mut a = agent(certain(1), 2, 100);
        a.cfg.reliability.failure_threshold = 1;
        a.cfg.reliability.max_retries = 1;
        a.start(0.0);
        let mut t = 0.0;
        let req = draft_until_request(&mut a, &mut t);
        t += 10.0;
        a.step(DeviceEvent::TokenDrafted { epoch: a.epoch }, t)
            .unwrap();
        let acts = a
            .step(
                DeviceEvent::TimeoutFired {
                    request_id: req.request_id,
                },
                t,
            )
            .unwrap();
        let retry = sent_request(&acts).expect("retry");
        assert_eq!(retry.tokens.len(), 3);
        assert_ne!(retry.request_id, req.request_id);
        assert_eq!(retry.base_position, req.base_position);
        let acts = a
            .step(
                DeviceEvent::TimeoutFired {
                    request_id: retry.request_id,
                },
                t + 50.0,
            )
            .unwrap();
        assert!(acts.iter().any(|x| matches!(
            x,
            Action::Emit {
                provenance: Provenance::Fallback,
                ..
            }
        )));
        assert_eq!(a.generated_len(), 3);
        assert_eq!(a.transcript().count(Provenance::Fallback), 3);
    }

    #[test]
    fn replay_of_shorter_block_keeps_tail() {
        let mut a = agent(certain(2), 2, 100);
        a.start(0.0);
        let mut t = 0.0;
        let req = draft_until_request(&mut a, &mut t);
        t += 10.0;
        a.step(DeviceEvent::TokenDrafted { epoch: a.epoch }, t)
            .unwrap();
        let acts = a
            .step(
                DeviceEvent::TimeoutFired {
                    request_id: req.request_id,
                },
                t,
            )
            .unwrap();
        let retry = sent_request(&acts).unwrap();
        assert_eq!(retry.tokens.len(), 3);
        a.step(respond(&retry, 2, None), t + 5.0).unwrap();
        assert_eq!(a.generated_len(), 2);
        assert_eq!(a.building.len(), 1);
    }

    #[test]
    fn zero_budget_finishes_immediately() {
        let mut a = agent(certain(2), 2, 0);
        assert_eq!(a.start(0.0), vec![Action::Finished]);
        assert!(a.transcript().tokens.is_empty());
    }

    #[test]
    fn budget_caps_drafting() {
        let mut a = agent(certain(2), 4, 3);
        a.start(0.0);
        let mut t = 0.0;
        let req = draft_until_request(&mut a, &mut t);
        assert_eq!(req.tokens.len(), 3);
        let acts = a.step(respond(&req, 3, None), t).unwrap();
        assert!(acts.contains(&Action::Finished));
        assert!(acts.contains(&Action::Send(Message::SessionClose { session_id: 7 })));
    }

    #[test]
    fn first_request_carries_session_init() {
        let mut a = agent(certain(2), 1, 10);
        a.start(0.0);
        let acts = a
            .step(DeviceEvent::TokenDrafted { epoch: 0 }, 10.0)
            .unwrap();
        assert!(matches!(acts[0], Action::Send(Message::SessionInit { .. })));
        let req = sent_request(&acts).unwrap();
        a.step(respond(&req, 1, None), 11.0).unwrap();
        let acts = a
            .step(DeviceEvent::TokenDrafted { epoch: 0 }, 21.0)
            .unwrap();
        assert!(!acts
            .iter()
            .any(|x| matches!(x, Action::Send(Message::SessionInit { .. }))));
    }

    #[test]
    fn transcript_jsonl() {
        let mut a = agent(certain(2), 1, 1);
        a.start(0.0);
        let acts = a
            .step(DeviceEvent::TokenDrafted { epoch: 0 }, 10.0)
            .unwrap();
        let req = sent_request(&acts).unwrap();
        a.step(respond(&req, 1, None), 12.0).unwrap();
        let mut out = Vec::new();
        a.transcript().write_jsonl(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(
            first,
            r#"{"index":0,"token":2,"provenance":"verified","time_ms":12.0}"#
        );
        assert!(text.lines().any(|l| l.contains(r#""event":"request""#)));
    }
}
