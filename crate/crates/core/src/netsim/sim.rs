use std::collections::VecDeque;

use super::{EventQueue, Link, NetError, NetworkConditions, Transport};
use crate::protocol::Message;
use crate::rng::RngStream;
use crate::server::{Inbound, NodeOutput, Reply, ServerNode, VerifyServer};

enum Ev {
    ToServer(Message),
    ToDevice(Message),
    BatchDone(Vec<Reply>),
    Wake,
}

/// One device's view of a simulated server behind two lossy links.
///
/// Time is virtual: `recv_until` advances the clock by firing server and
/// link events until a message reaches the device or the deadline passes.
pub struct SimulatedTransport {
    queue: EventQueue<Ev>,
    node: ServerNode,
    up: Link,
    down: Link,
    inbox: VecDeque<Message>,
}

impl SimulatedTransport {
    pub fn new(server: VerifyServer, net: NetworkConditions, seed: u64) -> Result<Self, NetError> {
        net.validate()?;
        Ok(Self {
            queue: EventQueue::new(),
            node: ServerNode::new(server),
            up: Link::new(net, RngStream::new(seed, 0, "link-up")),
            down: Link::new(net, RngStream::new(seed, 0, "link-down")),
            inbox: VecDeque::new(),
        })
    }

    pub fn server(&self) -> &VerifyServer {
        &self.node.server
    }

    pub fn uplink(&self) -> &Link {
        &self.up
    }

    pub fn downlink(&self) -> &Link {
        &self.down
    }

    fn schedule(&mut self, outputs: Vec<NodeOutput>) {
        for o in outputs {
            match o {
                NodeOutput::Reply { at_ms, reply } => self.reply_at(at_ms, reply),
                NodeOutput::BatchDone { at_ms, batch } => {
                    self.queue.push(at_ms, Ev::BatchDone(batch.replies))
                }
                NodeOutput::Wake { at_ms } => self.queue.push(at_ms, Ev::Wake),
            }
        }
    }

    fn reply_at(&mut self, at_ms: f64, reply: Reply) {
        if let Reply::Verify(r) = reply {
            let msg = Message::VerifyResponse(r);
            if let Some(at) = self.down.transmit(at_ms, msg.encoded_len()) {
                self.queue.push(at, Ev::ToDevice(msg));
            }
        }
    }

    fn fire(&mut self, now: f64, ev: Ev) {
        match ev {
            Ev::ToServer(m) => {
                let out = self.node.on_inbound(Inbound::Wire(m), now);
                self.schedule(out);
            }
            Ev::ToDevice(m) => self.inbox.push_back(m),
            Ev::BatchDone(replies) => {
                for r in replies {
                    self.reply_at(now, r);
                }
                let out = self.node.batch_done(now);
                self.schedule(out);
            }
            Ev::Wake => {
                let out = self.node.poll(now);
                self.schedule(out);
            }
        }
    }
}

impl Transport for SimulatedTransport {
    fn now_ms(&mut self) -> f64 {
        self.queue.now()
    }

    fn send(&mut self, msg: &Message) -> Result<(), NetError> {
        let now = self.queue.now();
        if let Some(at) = self.up.transmit(now, msg.encoded_len()) {
            self.queue.push(at, Ev::ToServer(msg.clone()));
        }
        Ok(())
    }

    fn recv_until(&mut self, deadline_ms: f64) -> Result<Option<Message>, NetError> {
        loop {
            if let Some(m) = self.inbox.pop_front() {
                return Ok(Some(m));
            }
            match self.queue.peek_time() {
                Some(t) if t <= deadline_ms => {
                    let (t, ev) = self.queue.pop().expect("peeked");
                    self.fire(t, ev);
                }
                _ => {
                    self.queue.advance_to(deadline_ms);
                    return Ok(None);
                }
            }
        }
    }
}
