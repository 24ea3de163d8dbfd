//! Discrete-event simulation of a fleet of devices sharing one server.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::metrics::{CommitTrace, ContextCounts, TokenKind};
use super::workload::{exponential, ArrivalMode};
use super::ExperimentError;
use crate::device::{
    drafting_decision, Action, DeviceAgent, DeviceConfig, DeviceError, DeviceEvent, DraftDecision,
    DraftVerdict, DraftingPolicy, Provenance, ReliabilityPolicy, SessionLimits,
};
use crate::models::{sample_token, LanguageModel};
use crate::netsim::{EventQueue, Link, NetworkConditions};
use crate::protocol::{
    Message, VerifyRequest, FRAME_HEADER_LEN, VERIFY_REQUEST_FIXED_LEN, VERIFY_RESPONSE_BODY_LEN,
};
use crate::rng::{derive_seed, PositionalUniforms, RngStream};
use crate::server::{
    GenerateRequest, Inbound, MetricsRow, NodeOutput, Reply, ServerConfig, ServerNode, ServerStats,
    VerifyServer,
};
use crate::specdec::TokenId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Devices draft, the server verifies.
    #[default]
    Sled,
    /// Devices ask the server for every token.
    Centralized,
    /// Devices generate with their own model only.
    EdgeOnly,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Sled => "sled",
            Scenario::Centralized => "centralized",
            Scenario::EdgeOnly => "edge-only",
        }
    }

    /// Token kinds that count toward whole-system throughput.
    pub fn counted_kinds(self) -> &'static [TokenKind] {
        match self {
            Scenario::Sled => &[TokenKind::Verified],
            Scenario::Centralized => &[TokenKind::Generated],
            Scenario::EdgeOnly => &[TokenKind::Draft],
        }
    }

    pub fn uses_server(self) -> bool {
        self != Scenario::EdgeOnly
    }

    pub fn uses_devices(self) -> bool {
        self != Scenario::Centralized
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sled" => Ok(Scenario::Sled),
            "centralized" => Ok(Scenario::Centralized),
            "edge-only" => Ok(Scenario::EdgeOnly),
            other => Err(format!("unknown scenario {other:?}")),
        }
    }
}

/// One simulated device.
#[derive(Clone)]
pub struct DeviceSpec {
    pub draft: Arc<dyn LanguageModel>,
    /// Standalone draft rate on this device.
    pub tokens_per_second: f64,
    pub drafting: DraftingPolicy,
    pub reliability: ReliabilityPolicy,
    pub max_tokens: usize,
    pub max_outstanding: usize,
}

#[derive(Clone)]
pub struct WorldSpec {
    pub scenario: Scenario,
    pub arrival: ArrivalMode,
    pub devices: Vec<DeviceSpec>,
    pub target: Arc<dyn LanguageModel>,
    pub server: ServerConfig,
    pub network: NetworkConditions,
    pub horizon_ms: f64,
    pub prompt_len: usize,
    pub eos: Option<TokenId>,
    pub seed: u64,
    /// Keep per-token verdicts for the confidence histogram.
    pub collect_verdicts: bool,
    /// Keep next-token counts for the quality proxy.
    pub collect_counts: bool,
    /// Preceding tokens the quality proxy conditions on. Should match the
    /// models' context window.
    pub quality_window: usize,
}

pub struct WorldOutcome {
    pub trace: CommitTrace,
    pub verdicts: Vec<DraftVerdict>,
    pub counts: ContextCounts,
    pub server: ServerStats,
    pub metrics: Vec<MetricsRow>,
    pub sessions_completed: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    /// Devices stopped because verification failed with fallback disabled.
    pub devices_failed: usize,
}

/// Mean block length a policy produces with `draft`, for Poisson rates.
pub fn mean_block_len(
    draft: &dyn LanguageModel,
    policy: &DraftingPolicy,
    eos: Option<TokenId>,
    samples: usize,
    seed: u64,
) -> Result<f64, ExperimentError> {
    if let DraftingPolicy::FixedLength { gamma } = *policy {
        return Ok(gamma as f64);
    }
    let mut rng = RngStream::new(seed, 0, "block-estimate");
    let mut total = 0usize;
    for i in 0..samples.max(1) {
        let ctx = vec![TokenId(rng.below(draft.vocab_size() as u64) as u32)];
        let mut draws = PositionalUniforms::new(seed, i as u64, "block-estimate");
        total += draft_block(draft, policy, eos, ctx, &mut draws)?.len();
    }
    Ok(total as f64 / samples.max(1) as f64)
}

/// Drafts one block after `ctx`, cut by the policy or at `eos`.
fn draft_block(
    draft: &dyn LanguageModel,
    policy: &DraftingPolicy,
    eos: Option<TokenId>,
    mut ctx: Vec<TokenId>,
    draws: &mut PositionalUniforms,
) -> Result<Vec<(TokenId, f64)>, ExperimentError> {
    let mut block = Vec::new();
    loop {
        draws.set_base(ctx.len() as u64);
        let (tok, conf) = sample_token(draft, &ctx, draws)?;
        block.push((tok, conf));
        ctx.push(tok);
        if eos == Some(tok)
            || drafting_decision(conf, block.len(), policy) == DraftDecision::RequestVerification
        {
            return Ok(block);
        }
    }
}

fn session_id(dev: usize, seq: u64) -> u64 {
    ((dev as u64 + 1) << 32) | seq
}

fn device_of(session: u64) -> Option<usize> {
    (session >> 32).checked_sub(1).map(|d| d as usize)
}

const GENERATE_REQUEST_BYTES: usize = FRAME_HEADER_LEN + VERIFY_REQUEST_FIXED_LEN;
const REPLY_BYTES: usize = FRAME_HEADER_LEN + VERIFY_RESPONSE_BODY_LEN;

enum Ev {
    Agent {
        dev: usize,
        gen: u64,
        ev: DeviceEvent,
    },
    ClientTimeout {
        dev: usize,
        gen: u64,
        request_id: u64,
    },
    ToServer(Inbound),
    ToDevice {
        dev: usize,
        reply: Reply,
    },
    BatchDone(Vec<Reply>),
    Wake,
    Arrival {
        dev: usize,
    },
    EdgeTick {
        dev: usize,
    },
}

/// Closed-loop client of the centralized baseline.
struct Client {
    session_id: u64,
    prompt_len: usize,
    context: Vec<TokenId>,
    in_flight: Option<u64>,
    next_request: u64,
    needs_init: bool,
}

struct Edge {
    prompt_len: usize,
    context: Vec<TokenId>,
    draws: PositionalUniforms,
}

enum Node {
    Idle,
    Agent(Box<DeviceAgent>),
    Client(Client),
    Edge(Edge),
    /// Open-loop source; confidences of requests awaiting a reply.
    Source(BTreeMap<u64, Vec<f64>>),
    Failed,
}

struct Dev {
    spec: DeviceSpec,
    up: Link,
    down: Link,
    node: Node,
    gen: u64,
    sessions: u64,
    prompt_rng: RngStream,
    arrival_rng: RngStream,
    lambda: f64,
}

struct World<'a> {
    spec: &'a WorldSpec,
    queue: EventQueue<Ev>,
    server: ServerNode,
    devs: Vec<Dev>,
    trace: CommitTrace,
    verdicts: Vec<DraftVerdict>,
    counts: ContextCounts,
    device_seed: u64,
    sessions_completed: u64,
}

pub fn simulate(spec: &WorldSpec) -> Result<WorldOutcome, ExperimentError> {
    if !(spec.horizon_ms > 0.0 && spec.horizon_ms.is_finite()) {
        return Err(ExperimentError::Domain("horizon must be > 0".into()));
    }
    spec.network.validate()?;
    let mut server_cfg = spec.server;
    server_cfg.seed = derive_seed(spec.seed, "server", 0);
    let mut server = VerifyServer::new(server_cfg, spec.target.clone())?;
    let mut registered = std::collections::BTreeSet::new();
    let mut devs = Vec::with_capacity(spec.devices.len());
    for (i, d) in spec.devices.iter().enumerate() {
        if !(d.tokens_per_second > 0.0 && d.tokens_per_second.is_finite()) {
            return Err(ExperimentError::Domain(
                "device tokens_per_second must be > 0".into(),
            ));
        }
        d.drafting.validate()?;
        d.reliability.validate()?;
        if spec.scenario == Scenario::Sled && registered.insert(d.draft.name().to_owned()) {
            server.register_draft(d.draft.clone())?;
        }
        let lambda = match spec.scenario {
            Scenario::Sled => {
                d.tokens_per_second
                    / mean_block_len(
                        d.draft.as_ref(),
                        &d.drafting,
                        spec.eos,
                        2000,
                        derive_seed(spec.seed, "block-estimate", i as u64),
                    )?
            }
            _ => d.tokens_per_second,
        };
        let i = i as u64;
        devs.push(Dev {
            spec: d.clone(),
            up: Link::new(
                spec.network,
                RngStream::new(derive_seed(spec.seed, "link-up", i), i, "link-up"),
            ),
            down: Link::new(
                spec.network,
                RngStream::new(derive_seed(spec.seed, "link-down", i), i, "link-down"),
            ),
            node: Node::Idle,
            gen: 0,
            sessions: 0,
            prompt_rng: RngStream::new(derive_seed(spec.seed, "prompt", i), i, "prompt"),
            arrival_rng: RngStream::new(derive_seed(spec.seed, "arrivals", i), i, "arrivals"),
            lambda,
        });
    }
    let mut world = World {
        spec,
        queue: EventQueue::new(),
        server: ServerNode::new(server),
        devs,
        trace: CommitTrace::new(spec.horizon_ms),
        verdicts: Vec::new(),
        counts: ContextCounts::new(spec.quality_window),
        device_seed: derive_seed(spec.seed, "device", 0),
        sessions_completed: 0,
    };
    for dev in 0..world.devs.len() {
        world.start_device(dev)?;
    }
    while let Some(t) = world.queue.peek_time() {
        if t > spec.horizon_ms {
            break;
        }
        let (now, ev) = world.queue.pop().expect("peeked");
        world.fire(now, ev)?;
    }
    world.harvest_all();
    let (sent, dropped) = world.devs.iter().fold((0, 0), |(s, d), dev| {
        (
            s + dev.up.sent() + dev.down.sent(),
            d + dev.up.dropped() + dev.down.dropped(),
        )
    });
    let devices_failed = world
        .devs
        .iter()
        .filter(|d| matches!(d.node, Node::Failed))
        .count();
    Ok(WorldOutcome {
        server: *world.server.server.stats(),
        metrics: world.server.server.metrics().to_vec(),
        trace: world.trace,
        verdicts: world.verdicts,
        counts: world.counts,
        sessions_completed: world.sessions_completed,
        messages_sent: sent,
        messages_dropped: dropped,
        devices_failed,
    })
}

impl World<'_> {
    fn start_device(&mut self, dev: usize) -> Result<(), ExperimentError> {
        match (self.spec.scenario, self.spec.arrival) {
            (Scenario::EdgeOnly, _) => {
                self.new_edge_session(dev);
                let at = self.interval(dev);
                self.queue.push(at, Ev::EdgeTick { dev });
            }
            (_, ArrivalMode::OpenLoop) => {
                self.devs[dev].node = Node::Source(BTreeMap::new());
                self.schedule_arrival(dev, 0.0);
            }
            (Scenario::Sled, ArrivalMode::ClosedLoop) => self.new_agent(dev, 0.0)?,
            (Scenario::Centralized, ArrivalMode::ClosedLoop) => self.new_client(dev, 0.0),
        }
        Ok(())
    }

    fn interval(&self, dev: usize) -> f64 {
        1000.0 / self.devs[dev].spec.tokens_per_second
    }

    fn next_session(&mut self, dev: usize) -> (u64, Vec<TokenId>) {
        let d = &mut self.devs[dev];
        let sid = session_id(dev, d.sessions);
        d.sessions += 1;
        let vocab = self.spec.target.vocab_size() as u64;
        let prompt = (0..self.spec.prompt_len.max(1))
            .map(|_| TokenId(d.prompt_rng.below(vocab) as u32))
            .collect();
        (sid, prompt)
    }

    fn record_sequence(&mut self, full: &[TokenId], prompt_len: usize) {
        if self.spec.collect_counts {
            self.counts
                .add_sequence(full, prompt_len, self.spec.target.vocab_size());
        }
    }

    fn harvest_all(&mut self) {
        for dev in 0..self.devs.len() {
            let node = std::mem::replace(&mut self.devs[dev].node, Node::Idle);
            match node {
                Node::Agent(a) => {
                    let t = a.transcript();
                    let (full, plen) = (a.committed().to_vec(), t.prompt.len());
                    if self.spec.collect_verdicts {
                        self.verdicts.extend_from_slice(&t.verdicts);
                    }
                    self.record_sequence(&full, plen);
                }
                Node::Client(c) => self.record_sequence(&c.context, c.prompt_len),
                Node::Edge(e) => self.record_sequence(&e.context, e.prompt_len),
                other => self.devs[dev].node = other,
            }
        }
    }

    fn send_up(&mut self, dev: usize, now: f64, msg: Inbound) {
        let bytes = match &msg {
            Inbound::Wire(m) => m.encoded_len(),
            Inbound::Generate(_) => GENERATE_REQUEST_BYTES,
        };
        if let Some(at) = self.devs[dev].up.transmit(now, bytes) {
            self.queue.push(at, Ev::ToServer(msg));
        }
    }

    fn send_down(&mut self, at_ms: f64, reply: Reply) {
        let Some(dev) = device_of(reply.session_id()).filter(|&d| d < self.devs.len()) else {
            return;
        };
        if let Some(at) = self.devs[dev].down.transmit(at_ms, REPLY_BYTES) {
            self.queue.push(at, Ev::ToDevice { dev, reply });
        }
    }

    fn schedule_server(&mut self, outputs: Vec<NodeOutput>) {
        for o in outputs {
            match o {
                NodeOutput::Reply { at_ms, reply } => self.send_down(at_ms, reply),
                NodeOutput::BatchDone { at_ms, batch } => {
                    self.queue.push(at_ms, Ev::BatchDone(batch.replies))
                }
                NodeOutput::Wake { at_ms } => self.queue.push(at_ms, Ev::Wake),
            }
        }
    }

    fn fire(&mut self, now: f64, ev: Ev) -> Result<(), ExperimentError> {
        match ev {
            Ev::ToServer(msg) => {
                let out = self.server.on_inbound(msg, now);
                self.schedule_server(out);
            }
            Ev::BatchDone(replies) => {
                for r in replies {
                    self.send_down(now, r);
                }
                let out = self.server.batch_done(now);
                self.schedule_server(out);
            }
            Ev::Wake => {
                let out = self.server.poll(now);
                self.schedule_server(out);
            }
            Ev::Agent { dev, gen, ev } => {
                if gen == self.devs[dev].gen {
                    self.step_agent(dev, ev, now)?;
                }
            }
            Ev::ToDevice { dev, reply } => self.deliver(dev, reply, now)?,
            Ev::ClientTimeout {
                dev,
                gen,
                request_id,
            } => {
                let fire = self.devs[dev].gen == gen
                    && matches!(&self.devs[dev].node, Node::Client(c) if c.in_flight == Some(request_id));
                if fire {
                    self.client_request(dev, now);
                }
            }
            Ev::Arrival { dev } => {
                self.open_loop_arrival(dev, now)?;
                self.schedule_arrival(dev, now);
            }
            Ev::EdgeTick { dev } => {
                self.edge_tick(dev, now)?;
                let at = now + self.interval(dev);
                self.queue.push(at, Ev::EdgeTick { dev });
            }
        }
        Ok(())
    }

    fn deliver(&mut self, dev: usize, reply: Reply, now: f64) -> Result<(), ExperimentError> {
        match (&mut self.devs[dev].node, reply) {
            (Node::Agent(a), Reply::Verify(r)) if r.session_id == a.session_id() => {
                self.step_agent(dev, DeviceEvent::ResponseArrived(r), now)?;
            }
            (Node::Client(c), Reply::Generated(g))
                if g.session_id == c.session_id && c.in_flight == Some(g.request_id) =>
            {
                c.in_flight = None;
                c.needs_init = false;
                c.context.push(g.token);
                self.trace.push(now, dev, 1, TokenKind::Generated);
                let c = match &self.devs[dev].node {
                    Node::Client(c) => c,
                    _ => unreachable!(),
                };
                let generated = c.context.len() - c.prompt_len;
                let done = generated >= self.devs[dev].spec.max_tokens
                    || (self.spec.eos.is_some() && Some(g.token) == self.spec.eos);
                if done {
                    let (sid, full, plen) = (c.session_id, c.context.clone(), c.prompt_len);
                    self.send_up(
                        dev,
                        now,
                        Inbound::Wire(Message::SessionClose { session_id: sid }),
                    );
                    self.record_sequence(&full, plen);
                    self.sessions_completed += 1;
                    self.new_client(dev, now);
                } else {
                    self.client_request(dev, now);
                }
            }
            (Node::Source(pending), Reply::Verify(r)) => {
                if let Some(confs) = pending.remove(&r.session_id) {
                    let k = r.accepted_count as usize;
                    let n = k + usize::from(r.corrective_token.is_some());
                    self.trace.push(now, dev, n, TokenKind::Verified);
                    if self.spec.collect_verdicts {
                        for (i, &c) in confs.iter().enumerate().take(n) {
                            self.verdicts.push(DraftVerdict {
                                confidence: c,
                                accepted: i < k,
                            });
                        }
                    }
                }
            }
            (Node::Source(pending), Reply::Generated(g)) => {
                if pending.remove(&g.session_id).is_some() {
                    self.trace.push(now, dev, 1, TokenKind::Generated);
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn new_agent(&mut self, dev: usize, now: f64) -> Result<(), ExperimentError> {
        let (sid, prompt) = self.next_session(dev);
        let d = &self.devs[dev];
        let cfg = DeviceConfig {
            session_id: sid,
            drafting: d.spec.drafting,
            reliability: d.spec.reliability,
            limits: SessionLimits {
                max_tokens: d.spec.max_tokens,
                eos: self.spec.eos,
            },
            draft_interval_ms: 1000.0 / d.spec.tokens_per_second,
            max_outstanding: d.spec.max_outstanding,
            seed: self.device_seed,
        };
        let mut agent = DeviceAgent::new(cfg, d.spec.draft.clone(), prompt)?;
        let actions = agent.start(now);
        self.devs[dev].gen += 1;
        self.devs[dev].node = Node::Agent(Box::new(agent));
        self.apply(dev, actions, now)
    }

    fn step_agent(&mut self, dev: usize, ev: DeviceEvent, now: f64) -> Result<(), ExperimentError> {
        let Node::Agent(agent) = &mut self.devs[dev].node else {
            return Ok(());
        };
        match agent.step(ev, now) {
            Ok(actions) => self.apply(dev, actions, now),
            Err(DeviceError::TransportFatal) => {
                self.devs[dev].node = Node::Failed;
                self.devs[dev].gen += 1;
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    fn apply(&mut self, dev: usize, actions: Vec<Action>, now: f64) -> Result<(), ExperimentError> {
        let gen = self.devs[dev].gen;
        let mut finished = false;
        for a in actions {
            match a {
                Action::Send(msg) => self.send_up(dev, now, Inbound::Wire(msg)),
                Action::ArmTimer { request_id, at_ms } => self.queue.push(
                    at_ms,
                    Ev::Agent {
                        dev,
                        gen,
                        ev: DeviceEvent::TimeoutFired { request_id },
                    },
                ),
                Action::ScheduleDraft { epoch, at_ms } => self.queue.push(
                    at_ms,
                    Ev::Agent {
                        dev,
                        gen,
                        ev: DeviceEvent::TokenDrafted { epoch },
                    },
                ),
                Action::Emit { tokens, provenance } => {
                    let kind = match provenance {
                        Provenance::Verified => TokenKind::Verified,
                        Provenance::Fallback => TokenKind::Fallback,
                    };
                    self.trace.push(now, dev, tokens.len(), kind);
                }
                Action::Finished => finished = true,
            }
        }
        if finished {
            let Node::Agent(agent) = std::mem::replace(&mut self.devs[dev].node, Node::Idle) else {
                unreachable!("only agents finish");
            };
            let plen = agent.transcript().prompt.len();
            let full = agent.committed().to_vec();
            if self.spec.collect_verdicts {
                self.verdicts
                    .extend_from_slice(&agent.transcript().verdicts);
            }
            self.record_sequence(&full, plen);
            self.sessions_completed += 1;
            self.new_agent(dev, now)?;
        }
        Ok(())
    }

    fn new_client(&mut self, dev: usize, now: f64) {
        let (sid, prompt) = self.next_session(dev);
        self.devs[dev].gen += 1;
        self.devs[dev].node = Node::Client(Client {
            session_id: sid,
            prompt_len: prompt.len(),
            context: prompt,
            in_flight: None,
            next_request: 1,
            needs_init: true,
        });
        self.client_request(dev, now);
    }

    /// Sends (or resends) the next generation request of a client.
    fn client_request(&mut self, dev: usize, now: f64) {
        let gen = self.devs[dev].gen;
        let timeout = self.devs[dev].spec.reliability.timeout_ms;
        let Node::Client(c) = &mut self.devs[dev].node else {
            return;
        };
        let request_id = c.next_request;
        c.next_request += 1;
        c.in_flight = Some(request_id);
        let init = c.needs_init.then(|| Message::SessionInit {
            session_id: c.session_id,
            prompt_tokens: c.context.clone(),
            draft_model_name: String::new(),
        });
        let req = GenerateRequest {
            session_id: c.session_id,
            request_id,
            base_position: c.context.len() as u64,
        };
        if let Some(init) = init {
            self.send_up(dev, now, Inbound::Wire(init));
        }
        self.send_up(dev, now, Inbound::Generate(req));
        self.queue.push(
            now + timeout,
            Ev::ClientTimeout {
                dev,
                gen,
                request_id,
            },
        );
    }

    fn schedule_arrival(&mut self, dev: usize, now: f64) {
        let d = &mut self.devs[dev];
        let at = now + 1000.0 * exponential(d.lambda, &mut d.arrival_rng);
        self.queue.push(at, Ev::Arrival { dev });
    }

    fn open_loop_arrival(&mut self, dev: usize, now: f64) -> Result<(), ExperimentError> {
        let (sid, prompt) = self.next_session(dev);
        let base = prompt.len() as u64;
        let spec = self.devs[dev].spec.clone();
        let (init, request, confs) = if self.spec.scenario == Scenario::Sled {
            let mut draws = PositionalUniforms::new(self.device_seed, sid, "draft");
            let block = draft_block(
                spec.draft.as_ref(),
                &spec.drafting,
                self.spec.eos,
                prompt.clone(),
                &mut draws,
            )?;
            let init = Message::SessionInit {
                session_id: sid,
                prompt_tokens: prompt,
                draft_model_name: spec.draft.name().to_owned(),
            };
            let req = Inbound::Wire(Message::VerifyRequest(VerifyRequest {
                session_id: sid,
                request_id: 1,
                base_position: base,
                tokens: block.iter().map(|b| b.0).collect(),
                draft_probs: block.iter().map(|b| b.1).collect(),
            }));
            (init, req, block.iter().map(|b| b.1).collect())
        } else {
            let init = Message::SessionInit {
                session_id: sid,
                prompt_tokens: prompt,
                draft_model_name: String::new(),
            };
            let req = Inbound::Generate(GenerateRequest {
                session_id: sid,
                request_id: 1,
                base_position: base,
            });
            (init, req, Vec::new())
        };
        if let Node::Source(pending) = &mut self.devs[dev].node {
            pending.insert(sid, confs);
        }
        self.send_up(dev, now, Inbound::Wire(init));
        self.send_up(dev, now, request);
        self.send_up(
            dev,
            now,
            Inbound::Wire(Message::SessionClose { session_id: sid }),
        );
        Ok(())
    }

    fn new_edge_session(&mut self, dev: usize) {
        let (sid, prompt) = self.next_session(dev);
        self.devs[dev].node = Node::Edge(Edge {
            prompt_len: prompt.len(),
            context: prompt,
            draws: PositionalUniforms::new(self.device_seed, sid, "draft"),
        });
    }

    fn edge_tick(&mut self, dev: usize, now: f64) -> Result<(), ExperimentError> {
        let max_tokens = self.devs[dev].spec.max_tokens;
        let draft = self.devs[dev].spec.draft.clone();
        let Node::Edge(e) = &mut self.devs[dev].node else {
            return Ok(());
        };
        e.draws.set_base(e.context.len() as u64);
        let (tok, _) = sample_token(draft.as_ref(), &e.context, &mut e.draws)?;
        e.context.push(tok);
        let done = e.context.len() - e.prompt_len >= max_tokens || self.spec.eos == Some(tok);
        self.trace.push(now, dev, 1, TokenKind::Draft);
        if done {
            if let Node::Edge(e) = std::mem::replace(&mut self.devs[dev].node, Node::Idle) {
                self.record_sequence(&e.context, e.prompt_len);
            }
            self.sessions_completed += 1;
            self.new_edge_session(dev);
        }
        Ok(())
    }
}
