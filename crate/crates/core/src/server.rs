//! Shared verification server.
//!
//! [`VerifyServer`] owns the session contexts, the FIFO queue, the static
//! batch planner and the executor. It does no I/O: callers hand it messages
//! with a timestamp and execute the batches it plans. [`ServerNode`] wraps
//! it with the busy/flush bookkeeping a single-executor simulation needs,
//! and [`serve`] runs it over TCP.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{ensure_same_tokenizer, sample_token, LanguageModel, ModelError};
use crate::protocol::{self, FrameDecoder, Message, VerifyRequest, VerifyResponse};
use crate::rng::PositionalUniforms;
use crate::specdec::{verify_block, DraftBlock, SpecError, TokenId};

pub const DEFAULT_BATCH_TIMEOUT_MS: f64 = 50.0;

/// Simulated latency of one batched forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceTimeModel {
    pub base_ms: f64,
    pub per_sequence_ms: f64,
    pub per_token_ms: f64,
}

impl Default for ServiceTimeModel {
    fn default() -> Self {
        Self {
            base_ms: 20.0,
            per_sequence_ms: 1.5,
            per_token_ms: 0.2,
        }
    }
}

impl ServiceTimeModel {
    pub fn validate(&self) -> Result<(), ServerError> {
        for (name, v) in [
            ("base_ms", self.base_ms),
            ("per_sequence_ms", self.per_sequence_ms),
            ("per_token_ms", self.per_token_ms),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ServerError::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }

    /// `base + per_sequence * n + per_token * padded_len * n`.
    pub fn batch_latency_ms(&self, sequences: usize, padded_len: usize) -> f64 {
        let n = sequences as f64;
        self.base_ms + self.per_sequence_ms * n + self.per_token_ms * padded_len as f64 * n
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            base_ms: self.base_ms * factor,
            per_sequence_ms: self.per_sequence_ms * factor,
            per_token_ms: self.per_token_ms * factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerConfig {
    pub batch_size: usize,
    /// Flush a partial batch once its oldest request waited this long.
    /// Zero means a partial batch is never flushed.
    pub batch_timeout_ms: f64,
    pub service: ServiceTimeModel,
    /// Seed of the positional verification draws.
    pub seed: u64,
    pub record_metrics: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            batch_timeout_ms: DEFAULT_BATCH_TIMEOUT_MS,
            service: ServiceTimeModel::default(),
            seed: 0,
            record_metrics: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("unknown session {0}")]
    UnknownSession(u64),
    #[error("stale request for session {session}: base {base} vs committed {committed}")]
    StaleRequest {
        session: u64,
        base: u64,
        committed: u64,
    },
    #[error("unknown draft model {0:?}")]
    UnknownDraftModel(String),
    #[error("invalid server config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

/// A one-token generation step, used by the centralized baseline in
/// simulation. Not part of the wire format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateRequest {
    pub session_id: u64,
    pub request_id: u64,
    pub base_position: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateResponse {
    pub session_id: u64,
    pub request_id: u64,
    pub base_position: u64,
    pub token: TokenId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inbound {
    Wire(Message),
    Generate(GenerateRequest),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reply {
    Verify(VerifyResponse),
    Generated(GenerateResponse),
}

impl Reply {
    pub fn session_id(&self) -> u64 {
        match self {
            Reply::Verify(r) => r.session_id,
            Reply::Generated(r) => r.session_id,
        }
    }

    fn with_request_id(mut self, id: u64) -> Self {
        match &mut self {
            Reply::Verify(r) => r.request_id = id,
            Reply::Generated(r) => r.request_id = id,
        }
        self
    }

    fn committed_tokens(&self) -> usize {
        match self {
            Reply::Verify(r) => {
                r.accepted_count as usize + usize::from(r.corrective_token.is_some())
            }
            Reply::Generated(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkKind {
    Verify {
        tokens: Vec<TokenId>,
        draft_probs: Vec<f64>,
    },
    Generate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkItem {
    pub session_id: u64,
    pub request_id: u64,
    pub base_position: u64,
    pub arrival_ms: f64,
    pub kind: WorkKind,
}

impl WorkItem {
    fn block_len(&self) -> usize {
        match &self.kind {
            WorkKind::Verify { tokens, .. } => tokens.len(),
            WorkKind::Generate => 1,
        }
    }

    fn order_key(&self) -> (f64, u64, u64) {
        (self.arrival_ms, self.session_id, self.request_id)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStats {
    pub requests: u64,
    pub accepted: u64,
    pub corrective: u64,
    pub rejected: u64,
    pub generated: u64,
}

#[derive(Debug, Clone)]
struct CachedReply {
    base_position: u64,
    reply: Reply,
    ready_ms: f64,
}

pub struct SessionRecord {
    pub session_id: u64,
    pub context: Vec<TokenId>,
    pub draft_model: Option<String>,
    pub stats: SessionStats,
    draft: Option<Arc<dyn LanguageModel>>,
    last_reply: Option<CachedReply>,
    closing: bool,
    queued: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    pub sessions_opened: u64,
    pub requests: u64,
    pub replays: u64,
    pub superseded: u64,
    pub dropped_stale: u64,
    pub dropped_invalid: u64,
    pub dropped_unknown: u64,
    pub batches: u64,
    pub sequences: u64,
    pub tokens_committed: u64,
    pub tokens_rejected: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub time_ms: f64,
    pub queue_depth: usize,
    pub batch_size: usize,
    pub tokens_verified: usize,
    pub tokens_rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Enqueued {
    Queued {
        position: usize,
    },
    /// Replaced a queued request of the same session and base position.
    Superseded {
        position: usize,
    },
    /// Already applied: the cached reply, ready no earlier than `ready_ms`.
    Replay {
        reply: Reply,
        ready_ms: f64,
    },
}

/// Outcome of one executed batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutedBatch {
    pub replies: Vec<Reply>,
    pub start_ms: f64,
    pub finish_ms: f64,
    pub sequences: usize,
    pub padded_len: usize,
    /// Accepted plus corrective (or generated) tokens.
    pub tokens_committed: usize,
    pub tokens_rejected: usize,
}

/// Pads every block to the longest with `pad`; returns rows and true lengths.
pub fn pad_blocks(blocks: &[&[TokenId]], pad: TokenId) -> (Vec<Vec<TokenId>>, Vec<usize>) {
    let width = blocks.iter().map(|b| b.len()).max().unwrap_or(0);
    let rows = blocks
        .iter()
        .map(|b| {
            let mut row = b.to_vec();
            row.resize(width, pad);
            row
        })
        .collect();
    (rows, blocks.iter().map(|b| b.len()).collect())
}

pub struct VerifyServer {
    cfg: ServerConfig,
    target: Arc<dyn LanguageModel>,
    drafts: BTreeMap<String, Arc<dyn LanguageModel>>,
    sessions: HashMap<u64, SessionRecord>,
    queue: Vec<WorkItem>,
    stats: ServerStats,
    metrics: Vec<MetricsRow>,
}

impl VerifyServer {
    pub fn new(cfg: ServerConfig, target: Arc<dyn LanguageModel>) -> Result<Self, ServerError> {
        if cfg.batch_size == 0 {
            return Err(ServerError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(cfg.batch_timeout_ms >= 0.0 && cfg.batch_timeout_ms.is_finite()) {
            return Err(ServerError::InvalidConfig(
                "batch_timeout must be >= 0".into(),
            ));
        }
        cfg.service.validate()?;
        Ok(Self {
            cfg,
            target,
            drafts: BTreeMap::new(),
            sessions: HashMap::new(),
            queue: Vec::new(),
            stats: ServerStats::default(),
            metrics: Vec::new(),
        })
    }

    /// Makes a draft model available to sessions that name it. Its
    /// vocabulary must be byte-identical to the target's.
    pub fn register_draft(&mut self, model: Arc<dyn LanguageModel>) -> Result<(), ServerError> {
        ensure_same_tokenizer(self.target.as_ref(), model.as_ref())?;
        self.drafts.insert(model.name().to_owned(), model);
        Ok(())
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn target(&self) -> &Arc<dyn LanguageModel> {
        &self.target
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn queue(&self) -> &[WorkItem] {
        &self.queue
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn session(&self, id: u64) -> Option<&SessionRecord> {
        self.sessions.get(&id)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    /// The pad id: one past the vocabulary, never verifiable.
    pub fn pad_token(&self) -> TokenId {
        TokenId(self.target.vocab_size() as u32)
    }

    /// Opens or resets a session with `context` as its committed prefix.
    /// An empty model name opens a generation-only session.
    pub fn open_session(
        &mut self,
        session_id: u64,
        context: Vec<TokenId>,
        draft_model_name: &str,
    ) -> Result<(), ServerError> {
        crate::specdec::check_tokens(&context, self.target.vocab_size())?;
        let draft = if draft_model_name.is_empty() {
            None
        } else {
            Some(
                self.drafts
                    .get(draft_model_name)
                    .cloned()
                    .ok_or_else(|| ServerError::UnknownDraftModel(draft_model_name.to_owned()))?,
            )
        };
        match self.sessions.get_mut(&session_id) {
            Some(s) => {
                s.context = context;
                s.draft = draft;
                s.draft_model = Some(draft_model_name.to_owned()).filter(|n| !n.is_empty());
                s.last_reply = None;
                s.closing = false;
            }
            None => {
                self.stats.sessions_opened += 1;
                self.sessions.insert(
                    session_id,
                    SessionRecord {
                        session_id,
                        context,
                        draft_model: Some(draft_model_name.to_owned()).filter(|n| !n.is_empty()),
                        stats: SessionStats::default(),
                        draft,
                        last_reply: None,
                        closing: false,
                        queued: 0,
                    },
                );
            }
        }
        Ok(())
    }

    /// Marks a session for removal once its queued work is done.
    pub fn close_session(&mut self, session_id: u64) {
        if let Some(s) = self.sessions.get_mut(&session_id) {
            s.closing = true;
            if s.queued == 0 {
                self.sessions.remove(&session_id);
            }
        }
    }

    /// Handles one inbound message. Replays of already-applied requests are
    /// returned with their ready time; everything else is queued or dropped.
    pub fn handle(&mut self, msg: Inbound, now: f64) -> Vec<(f64, Reply)> {
        let item = match msg {
            Inbound::Wire(Message::SessionInit {
                session_id,
                prompt_tokens,
                draft_model_name,
            }) => {
                if self
                    .open_session(session_id, prompt_tokens, &draft_model_name)
                    .is_err()
                {
                    self.stats.dropped_invalid += 1;
                }
                return Vec::new();
            }
            Inbound::Wire(Message::SessionClose { session_id }) => {
                self.close_session(session_id);
                return Vec::new();
            }
            Inbound::Wire(Message::VerifyResponse(_)) => {
                self.stats.dropped_invalid += 1;
                return Vec::new();
            }
            Inbound::Wire(Message::VerifyRequest(r)) => WorkItem {
                session_id: r.session_id,
                request_id: r.request_id,
                base_position: r.base_position,
                arrival_ms: now,
                kind: WorkKind::Verify {
                    tokens: r.tokens,
                    draft_probs: r.draft_probs,
                },
            },
            Inbound::Generate(g) => WorkItem {
                session_id: g.session_id,
                request_id: g.request_id,
                base_position: g.base_position,
                arrival_ms: now,
                kind: WorkKind::Generate,
            },
        };
        match self.enqueue(item) {
            Ok(Enqueued::Replay { reply, ready_ms }) => vec![(ready_ms.max(now), reply)],
            Ok(_) => Vec::new(),
            Err(ServerError::UnknownSession(_)) => {
                self.stats.dropped_unknown += 1;
                Vec::new()
            }
            Err(_) => {
                self.stats.dropped_stale += 1;
                Vec::new()
            }
        }
    }

    /// Queues a request in FIFO order, ties broken by session then request id.
    pub fn enqueue(&mut self, item: WorkItem) -> Result<Enqueued, ServerError> {
        let s = self
            .sessions
            .get_mut(&item.session_id)
            .ok_or(ServerError::UnknownSession(item.session_id))?;
        let committed = s.context.len() as u64;
        if item.base_position < committed {
            if let Some(c) = s
                .last_reply
                .as_ref()
                .filter(|c| c.base_position == item.base_position)
            {
                self.stats.replays += 1;
                return Ok(Enqueued::Replay {
                    reply: c.reply.with_request_id(item.request_id),
                    ready_ms: c.ready_ms,
                });
            }
        }
        if item.base_position != committed {
            return Err(ServerError::StaleRequest {
                session: item.session_id,
                base: item.base_position,
                committed,
            });
        }
        self.stats.requests += 1;
        s.stats.requests += 1;
        if let Some(pos) = self
            .queue
            .iter()
            .position(|q| q.session_id == item.session_id && q.base_position == item.base_position)
        {
            // Keep the original place in line.
            let arrival = self.queue[pos].arrival_ms;
            self.queue[pos] = WorkItem {
                arrival_ms: arrival,
                ..item
            };
            self.stats.superseded += 1;
            return Ok(Enqueued::Superseded { position: pos });
        }
        s.queued += 1;
        let key = item.order_key();
        let pos = self
            .queue
            .partition_point(|q| cmp_key(q.order_key(), key) != std::cmp::Ordering::Greater);
        self.queue.insert(pos, item);
        Ok(Enqueued::Queued { position: pos })
    }

    fn batch_ready(&self, now: f64) -> bool {
        match self.queue.first() {
            None => false,
            Some(_) if self.queue.len() >= self.cfg.batch_size => true,
            Some(oldest) => {
                self.cfg.batch_timeout_ms > 0.0
                    && now - oldest.arrival_ms >= self.cfg.batch_timeout_ms
            }
        }
    }

    /// The requests the next batch would contain at `now`; empty if the
    /// planner would keep waiting.
    pub fn plan_batch(&self, now: f64) -> &[WorkItem] {
        if self.batch_ready(now) {
            &self.queue[..self.queue.len().min(self.cfg.batch_size)]
        } else {
            &[]
        }
    }

    /// When a waiting partial batch will become due, if ever.
    pub fn next_flush_deadline(&self) -> Option<f64> {
        if self.cfg.batch_timeout_ms <= 0.0 || self.queue.len() >= self.cfg.batch_size {
            return None;
        }
        self.queue
            .first()
            .map(|q| q.arrival_ms + self.cfg.batch_timeout_ms)
    }

    /// Removes and returns the planned batch.
    pub fn take_batch(&mut self, now: f64) -> Option<Vec<WorkItem>> {
        if !self.batch_ready(now) {
            return None;
        }
        Some(self.take_front())
    }

    fn take_front(&mut self) -> Vec<WorkItem> {
        let n = self.queue.len().min(self.cfg.batch_size);
        self.queue.drain(..n).collect()
    }

    /// Drains the queue regardless of batch timing, e.g. at shutdown.
    pub fn take_any_batch(&mut self) -> Option<Vec<WorkItem>> {
        if self.queue.is_empty() {
            None
        } else {
            Some(self.take_front())
        }
    }

    /// Verifies a batch starting at `start_ms`. Session contexts advance
    /// immediately; replies are due at `finish_ms`.
    pub fn execute_batch(&mut self, batch: Vec<WorkItem>, start_ms: f64) -> ExecutedBatch {
        let pad = self.pad_token();
        let block_refs: Vec<&[TokenId]> = batch
            .iter()
            .map(|w| match &w.kind {
                WorkKind::Verify { tokens, .. } => tokens.as_slice(),
                WorkKind::Generate => &[],
            })
            .collect();
        let (rows, lens) = pad_blocks(&block_refs, pad);
        let padded_len = batch.iter().map(WorkItem::block_len).max().unwrap_or(0);
        let finish_ms = start_ms + self.cfg.service.batch_latency_ms(batch.len(), padded_len);

        let mut replies = Vec::with_capacity(batch.len());
        let mut committed = 0;
        let mut rejected = 0;
        for ((item, row), len) in batch.iter().zip(&rows).zip(&lens) {
            let Some(s) = self.sessions.get_mut(&item.session_id) else {
                self.stats.dropped_unknown += 1;
                continue;
            };
            s.queued = s.queued.saturating_sub(1);
            let base = s.context.len() as u64;
            if item.base_position != base {
                match s
                    .last_reply
                    .as_ref()
                    .filter(|c| c.base_position == item.base_position)
                {
                    Some(c) => {
                        self.stats.replays += 1;
                        replies.push(c.reply.with_request_id(item.request_id));
                    }
                    None => self.stats.dropped_stale += 1,
                }
                continue;
            }
            let result = match &item.kind {
                WorkKind::Verify { draft_probs, .. } => {
                    // Only the unpadded prefix of the row is verified.
                    verify_one(
                        self.cfg.seed,
                        self.target.as_ref(),
                        s,
                        item,
                        &row[..*len],
                        draft_probs,
                    )
                }
                WorkKind::Generate => generate_one(self.cfg.seed, self.target.as_ref(), s, item),
            };
            match result {
                Ok((reply, rej)) => {
                    committed += reply.committed_tokens();
                    rejected += rej;
                    s.last_reply = Some(CachedReply {
                        base_position: item.base_position,
                        reply,
                        ready_ms: finish_ms,
                    });
                    replies.push(reply);
                }
                Err(_) => self.stats.dropped_invalid += 1,
            }
        }
        for item in &batch {
            if let Some(s) = self.sessions.get(&item.session_id) {
                if s.closing && s.queued == 0 {
                    self.sessions.remove(&item.session_id);
                }
            }
        }
        self.stats.batches += 1;
        self.stats.sequences += batch.len() as u64;
        self.stats.tokens_committed += committed as u64;
        self.stats.tokens_rejected += rejected as u64;
        if self.cfg.record_metrics {
            self.metrics.push(MetricsRow {
                time_ms: finish_ms,
                queue_depth: self.queue.len(),
                batch_size: batch.len(),
                tokens_verified: committed,
                tokens_rejected: rejected,
            });
        }
        ExecutedBatch {
            replies,
            start_ms,
            finish_ms,
            sequences: batch.len(),
            padded_len,
            tokens_committed: committed,
            tokens_rejected: rejected,
        }
    }
}

fn cmp_key(a: (f64, u64, u64), b: (f64, u64, u64)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Verifies one block against the session context and commits the result.
/// Returns the reply and the number of drafted tokens not committed.
fn verify_one(
    seed: u64,
    target: &dyn LanguageModel,
    s: &mut SessionRecord,
    item: &WorkItem,
    tokens: &[TokenId],
    draft_probs: &[f64],
) -> Result<(Reply, usize), ServerError> {
    let draft = s
        .draft
        .clone()
        .ok_or_else(|| ServerError::UnknownDraftModel(String::new()))?;
    let block = DraftBlock::new(tokens.to_vec(), draft_probs.to_vec())?;
    if block.len() > u16::MAX as usize {
        return Err(SpecError::InvalidBlock("block too long".into()).into());
    }
    let mut draws = PositionalUniforms::new(seed, item.session_id, "verify");
    draws.set_base(item.base_position);
    let outcome = verify_block(&block, target, draft.as_ref(), &s.context, &mut draws)?;
    let k = outcome.accepted_count;
    s.context.extend(outcome.committed(&block));
    s.stats.accepted += k as u64;
    s.stats.corrective += u64::from(outcome.corrective_token.is_some());
    let rejected = block.len() - k;
    s.stats.rejected += rejected as u64;
    let reply = Reply::Verify(VerifyResponse {
        session_id: item.session_id,
        request_id: item.request_id,
        accepted_count: k as u16,
        corrective_token: outcome.corrective_token,
    });
    Ok((reply, rejected))
}

fn generate_one(
    seed: u64,
    target: &dyn LanguageModel,
    s: &mut SessionRecord,
    item: &WorkItem,
) -> Result<(Reply, usize), ServerError> {
    let mut draws = PositionalUniforms::new(seed, item.session_id, "generate");
    draws.set_base(item.base_position);
    let (token, _) = sample_token(target, &s.context, &mut draws)?;
    s.context.push(token);
    s.stats.generated += 1;
    let reply = Reply::Generated(GenerateResponse {
        session_id: item.session_id,
        request_id: item.request_id,
        base_position: item.base_position,
        token,
    });
    Ok((reply, 0))
}

/// Something a [`ServerNode`] wants scheduled.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeOutput {
    /// Send `reply` at `at_ms`.
    Reply { at_ms: f64, reply: Reply },
    /// Call [`ServerNode::batch_done`] at `at_ms`, then send `replies`.
    BatchDone { at_ms: f64, batch: ExecutedBatch },
    /// Call [`ServerNode::poll`] at `at_ms`.
    Wake { at_ms: f64 },
}

/// A verification server with one executor, driven by simulated events.
pub struct ServerNode {
    pub server: VerifyServer,
    busy: bool,
    wake_at: Option<f64>,
}

impl ServerNode {
    pub fn new(server: VerifyServer) -> Self {
        Self {
            server,
            busy: false,
            wake_at: None,
        }
    }

    pub fn on_inbound(&mut self, msg: Inbound, now: f64) -> Vec<NodeOutput> {
        let mut out: Vec<NodeOutput> = self
            .server
            .handle(msg, now)
            .into_iter()
            .map(|(at_ms, reply)| NodeOutput::Reply { at_ms, reply })
            .collect();
        self.poll_into(now, &mut out);
        out
    }

    pub fn batch_done(&mut self, now: f64) -> Vec<NodeOutput> {
        self.busy = false;
        let mut out = Vec::new();
        self.poll_into(now, &mut out);
        out
    }

    pub fn poll(&mut self, now: f64) -> Vec<NodeOutput> {
        let mut out = Vec::new();
        self.poll_into(now, &mut out);
        out
    }

    fn poll_into(&mut self, now: f64, out: &mut Vec<NodeOutput>) {
        if self.busy {
            return;
        }
        if let Some(batch) = self.server.take_batch(now) {
            let done = self.server.execute_batch(batch, now);
            self.busy = true;
            out.push(NodeOutput::BatchDone {
                at_ms: done.finish_ms,
                batch: done,
            });
            return;
        }
        if let Some(deadline) = self.server.next_flush_deadline() {
            if self.wake_at != Some(deadline) {
                self.wake_at = Some(deadline);
                out.push(NodeOutput::Wake {
                    at_ms: deadline.max(now),
                });
            }
        }
    }
}

/// Options for [`serve`].
#[derive(Debug, Clone, Copy)]
pub struct ServeOptions {
    /// Sleep for the simulated service time of each batch.
    pub inject_service_delay: bool,
    /// How often the loop checks for shutdown when idle.
    pub poll_interval: Duration,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            inject_service_delay: false,
            poll_interval: Duration::from_millis(5),
        }
    }
}

enum ConnEvent {
    Opened(u64, TcpStream),
    Message(u64, Message),
    Closed(u64),
}

/// Serves the socket protocol on `listener` until `shutdown` is set, then
/// answers everything still queued and returns.
///
/// Every executed batch is reported to `on_batch` with the elapsed time.
pub fn serve(
    mut server: VerifyServer,
    listener: TcpListener,
    shutdown: Arc<AtomicBool>,
    opts: ServeOptions,
    on_batch: &mut dyn FnMut(&MetricsRow),
) -> io::Result<ServerStats> {
    listener.set_nonblocking(true)?;
    let (tx, rx) = mpsc::channel::<ConnEvent>();
    let accept_tx = tx.clone();
    let accept_stop = shutdown.clone();
    let acceptor = thread::spawn(move || accept_loop(listener, accept_tx, accept_stop));
    drop(tx);

    let start = Instant::now();
    let now_ms = || start.elapsed().as_secs_f64() * 1000.0;
    let mut writers: HashMap<u64, TcpStream> = HashMap::new();
    let mut session_conn: HashMap<u64, u64> = HashMap::new();

    loop {
        let stopping = shutdown.load(Ordering::SeqCst);
        let now = now_ms();
        if let Some(batch) = server.take_batch(now) {
            run_batch(
                &mut server,
                &mut writers,
                &session_conn,
                batch,
                now,
                opts,
                on_batch,
            );
            continue;
        }
        if stopping {
            while let Some(batch) = server.take_any_batch() {
                let now = now_ms();
                run_batch(
                    &mut server,
                    &mut writers,
                    &session_conn,
                    batch,
                    now,
                    opts,
                    on_batch,
                );
            }
            break;
        }
        let wait = server
            .next_flush_deadline()
            .map(|d| Duration::from_secs_f64(((d - now) / 1000.0).max(0.0)))
            .unwrap_or(opts.poll_interval)
            .min(opts.poll_interval);
        match rx.recv_timeout(wait) {
            Ok(ConnEvent::Opened(id, stream)) => {
                writers.insert(id, stream);
            }
            Ok(ConnEvent::Message(conn, msg)) => {
                let now = now_ms();
                match &msg {
                    Message::SessionInit { session_id, .. } => {
                        session_conn.insert(*session_id, conn);
                    }
                    Message::VerifyRequest(r) => {
                        session_conn.insert(r.session_id, conn);
                    }
                    _ => {}
                }
                for (_, reply) in server.handle(Inbound::Wire(msg), now) {
                    send_reply(&mut writers, &session_conn, reply);
                }
            }
            Ok(ConnEvent::Closed(id)) => {
                writers.remove(&id);
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                shutdown.store(true, Ordering::SeqCst);
            }
        }
    }
    shutdown.store(true, Ordering::SeqCst);
    for w in writers.values() {
        let _ = w.shutdown(std::net::Shutdown::Both);
    }
    let _ = acceptor.join();
    Ok(*server.stats())
}

fn send_reply(
    writers: &mut HashMap<u64, TcpStream>,
    session_conn: &HashMap<u64, u64>,
    reply: Reply,
) {
    let Reply::Verify(resp) = reply else { return };
    let Some(conn) = session_conn.get(&resp.session_id) else {
        return;
    };
    if let Some(w) = writers.get_mut(conn) {
        let frame = protocol::encode(&Message::VerifyResponse(resp)).expect("fixed size");
        if w.write_all(&frame).is_err() {
            writers.remove(conn);
        }
    }
}

fn run_batch(
    server: &mut VerifyServer,
    writers: &mut HashMap<u64, TcpStream>,
    session_conn: &HashMap<u64, u64>,
    batch: Vec<WorkItem>,
    now: f64,
    opts: ServeOptions,
    on_batch: &mut dyn FnMut(&MetricsRow),
) {
    let depth = server.queue_len();
    let done = server.execute_batch(batch, now);
    if opts.inject_service_delay {
        thread::sleep(Duration::from_secs_f64(
            (done.finish_ms - done.start_ms) / 1000.0,
        ));
    }
    on_batch(&MetricsRow {
        time_ms: now,
        queue_depth: depth,
        batch_size: done.sequences,
        tokens_verified: done.tokens_committed,
        tokens_rejected: done.tokens_rejected,
    });
    for reply in done.replies {
        send_reply(writers, session_conn, reply);
    }
}

fn accept_loop(listener: TcpListener, tx: mpsc::Sender<ConnEvent>, stop: Arc<AtomicBool>) {
    let mut next_id = 0u64;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let id = next_id;
                next_id += 1;
                let Ok(writer) = stream.try_clone() else {
                    continue;
                };
                if tx.send(ConnEvent::Opened(id, writer)).is_err() {
                    return;
                }
                let tx = tx.clone();
                thread::spawn(move || read_loop(id, stream, tx));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(5));
            }
            Err(_) => thread::sleep(Duration::from_millis(5)),
        }
    }
}

fn read_loop(id: u64, stream: TcpStream, tx: mpsc::Sender<ConnEvent>) {
    let mut reader = BufReader::new(stream);
    let mut dec = FrameDecoder::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = match reader.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        dec.push(&buf[..n]);
        loop {
            match dec.next_message() {
                Ok(Some(msg)) => {
                    if tx.send(ConnEvent::Message(id, msg)).is_err() {
                        return;
                    }
                }
                Ok(None) => break,
                // A malformed frame closes this connection only.
                Err(_) => {
                    let _ = reader.get_ref().shutdown(std::net::Shutdown::Both);
                    let _ = tx.send(ConnEvent::Closed(id));
                    return;
                }
            }
        }
    }
    let _ = tx.send(ConnEvent::Closed(id));
}

/// Builds a verify request; a convenience for tests and tools.
pub fn verify_request(
    session_id: u64,
    request_id: u64,
    base_position: u64,
    tokens: Vec<TokenId>,
    draft_probs: Vec<f64>,
) -> Message {
    Message::VerifyRequest(VerifyRequest {
        session_id,
        request_id,
        base_position,
        tokens,
        draft_probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::StaticModel;
    use crate::specdec::ProbVector;

    fn server(b: usize, timeout: f64) -> VerifyServer {
        let target = Arc::new(StaticModel::new(
            "target",
            ProbVector::one_hot(8, TokenId(7)).unwrap(),
        ));
        let mut s = VerifyServer::new(
            ServerConfig {
                batch_size: b,
                batch_timeout_ms: timeout,
                ..Default::default()
            },
            target,
        )
        .unwrap();
        s.register_draft(Arc::new(StaticModel::new(
            "draft",
            ProbVector::uniform(8).unwrap(),
        )))
        .unwrap();
        s
    }

    fn item(session: u64, request: u64, base: u64, t: f64, tokens: Vec<u32>) -> WorkItem {
        let n = tokens.len();
        WorkItem {
            session_id: session,
            request_id: request,
            base_position: base,
            arrival_ms: t,
            kind: WorkKind::Verify {
                tokens: tokens.into_iter().map(TokenId).collect(),
                draft_probs: vec![0.125; n],
            },
        }
    }

    #[test]
    fn latency_example() {
        let m = ServiceTimeModel {
            base_ms: 10.0,
            per_sequence_ms: 1.0,
            per_token_ms: 0.1,
        };
        assert!((m.batch_latency_ms(4, 5) - 16.0).abs() < 1e-12);
    }

    #[test]
    fn fifo_and_tie_break() {
        let mut s = server(4, 50.0);
        for id in [1, 2, 3] {
            s.open_session(id, vec![TokenId(0)], "draft").unwrap();
        }
        assert_eq!(
            s.enqueue(item(3, 1, 1, 1.0, vec![7])).unwrap(),
            Enqueued::Queued { position: 0 }
        );
        assert_eq!(
            s.enqueue(item(1, 1, 1, 2.0, vec![7])).unwrap(),
            Enqueued::Queued { position: 1 }
        );
        assert_eq!(
            s.enqueue(item(2, 1, 1, 1.0, vec![7])).unwrap(),
            Enqueued::Queued { position: 0 }
        );
        let order: Vec<u64> = s.queue().iter().map(|q| q.session_id).collect();
        assert_eq!(order, vec![2, 3, 1]);
    }

    #[test]
    fn unknown_and_stale() {
        let mut s = server(4, 50.0);
        assert!(matches!(
            s.enqueue(item(9, 1, 0, 0.0, vec![7])),
            Err(ServerError::UnknownSession(9))
        ));
        s.open_session(1, vec![TokenId(0)], "draft").unwrap();
        assert!(matches!(
            s.enqueue(item(1, 1, 5, 0.0, vec![7])),
            Err(ServerError::StaleRequest { .. })
        ));
        assert!(matches!(
            s.open_session(2, vec![], "nope"),
            Err(ServerError::UnknownDraftModel(_))
        ));
    }

    #[test]
    fn static_batching_plan() {
        let mut s = server(4, 50.0);
        for id in 0..5 {
            s.open_session(id, vec![TokenId(0)], "draft").unwrap();
            s.enqueue(item(id, 1, 1, id as f64, vec![7])).unwrap();
        }
        assert_eq!(s.plan_batch(5.0).len(), 4);
        let mut s = server(4, 50.0);
        for id in 0..2 {
            s.open_session(id, vec![TokenId(0)], "draft").unwrap();
            s.enqueue(item(id, 1, 1, 0.0, vec![7])).unwrap();
        }
        assert!(s.plan_batch(10.0).is_empty());
        assert_eq!(s.plan_batch(50.0).len(), 2);
        assert_eq!(s.next_flush_deadline(), Some(50.0));
        let strict = server(4, 0.0);
        assert_eq!(strict.next_flush_deadline(), None);
    }

    #[test]
    fn execute_and_replay() {
        let mut s = server(1, 50.0);
        s.open_session(1, vec![TokenId(0)], "draft").unwrap();
        s.enqueue(item(1, 1, 1, 0.0, vec![7, 7])).unwrap();
        let batch = s.take_batch(0.0).unwrap();
        let done = s.execute_batch(batch, 0.0);
        assert_eq!(
            done.replies,
            vec![Reply::Verify(VerifyResponse {
                session_id: 1,
                request_id: 1,
                accepted_count: 2,
                corrective_token: None
            })]
        );
        assert_eq!(s.session(1).unwrap().context.len(), 3);
        // A retry of the same block comes back as the cached reply.
        match s.enqueue(item(1, 2, 1, 5.0, vec![7, 7, 7])).unwrap() {
            Enqueued::Replay {
                reply: Reply::Verify(r),
                ready_ms,
            } => {
                assert_eq!(r.request_id, 2);
                assert_eq!(r.accepted_count, 2);
                assert_eq!(ready_ms, done.finish_ms);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejection_returns_corrective() {
        let mut s = server(1, 50.0);
        s.open_session(1, vec![], "draft").unwrap();
        s.enqueue(item(1, 1, 0, 0.0, vec![3, 7])).unwrap();
        let batch = s.take_batch(0.0).unwrap();
        let done = s.execute_batch(batch, 0.0);
        assert_eq!(
            done.replies[0],
            Reply::Verify(VerifyResponse {
                session_id: 1,
                request_id: 1,
                accepted_count: 0,
                corrective_token: Some(TokenId(7)),
            })
        );
        assert_eq!(done.tokens_rejected, 2);
    }

    #[test]
    fn supersede_keeps_position() {
        let mut s = server(8, 50.0);
        s.open_session(1, vec![], "draft").unwrap();
        s.open_session(2, vec![], "draft").unwrap();
        s.enqueue(item(1, 1, 0, 0.0, vec![7])).unwrap();
        s.enqueue(item(2, 1, 0, 1.0, vec![7])).unwrap();
        assert_eq!(
            s.enqueue(item(1, 2, 0, 2.0, vec![7, 7])).unwrap(),
            Enqueued::Superseded { position: 0 }
        );
        assert_eq!(s.queue()[0].request_id, 2);
        assert_eq!(s.queue()[0].arrival_ms, 0.0);
    }

    #[test]
    fn padding() {
        let (rows, lens) = pad_blocks(&[&[TokenId(1), TokenId(2)], &[TokenId(3)]], TokenId(9));
        assert_eq!(rows[1], vec![TokenId(3), TokenId(9)]);
        assert_eq!(lens, vec![2, 1]);
    }

    #[test]
    fn close_after_drain() {
        let mut s = server(1, 50.0);
        s.open_session(1, vec![], "draft").unwrap();
        s.enqueue(item(1, 1, 0, 0.0, vec![7])).unwrap();
        s.close_session(1);
        assert_eq!(s.session_count(), 1);
        let b = s.take_batch(0.0).unwrap();
        assert_eq!(s.execute_batch(b, 0.0).replies.len(), 1);
        assert_eq!(s.session_count(), 0);
    }
}
