//! Deterministic in-memory network with per-endpoint FIFO inboxes.
//!
//! Broadcasts are counted once on the sender side however many endpoints receive
//! them. Delivery order across inboxes is drawn from a seeded RNG; order within
//! one inbox is FIFO, so sends between one pair of endpoints keep their order.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::client::{ClientState, Outcome};
use crate::group_controller::{Destination, GcError, GroupController, Outgoing};
use crate::messages::CodecError;
use crate::MemberId;

pub type EndpointId = u32;

pub const DEFAULT_STEP_LIMIT: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(EndpointId),
    #[error("no quiescence after {0} deliveries")]
    NonTermination(usize),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Gc(#[from] GcError),
}

/// What a handler asks the network to send on its behalf.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Send {
    Unicast(EndpointId, Vec<u8>),
    Broadcast(Vec<u8>),
}

pub trait Endpoint {
    fn handle(&mut self, from: EndpointId, bytes: &[u8]) -> Vec<Send>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub messages_sent: u64,
    pub bytes_sent: u64,
    pub broadcasts: u64,
    pub unicasts: u64,
    pub messages_received: u64,
    pub bytes_received: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct NetStats {
    pub global: Counters,
    pub per_endpoint: BTreeMap<EndpointId, Counters>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StepRecord {
    pub step: String,
    pub stats: NetStats,
}

type LossHook = Box<dyn FnMut(EndpointId, EndpointId, &[u8]) -> bool>;

pub struct Network<E: Endpoint> {
    endpoints: BTreeMap<EndpointId, E>,
    inboxes: BTreeMap<EndpointId, VecDeque<(EndpointId, Arc<[u8]>)>>,
    stats: NetStats,
    rng: ChaCha20Rng,
    step_limit: usize,
    loss: Option<LossHook>,
    log: Vec<StepRecord>,
}

impl<E: Endpoint> Network<E> {
    pub fn new(seed: u64) -> Self {
        Network {
            endpoints: BTreeMap::new(),
            inboxes: BTreeMap::new(),
            stats: NetStats::default(),
            rng: ChaCha20Rng::seed_from_u64(seed),
            step_limit: DEFAULT_STEP_LIMIT,
            loss: None,
            log: Vec::new(),
        }
    }

    pub fn set_step_limit(&mut self, limit: usize) {
        self.step_limit = limit;
    }

    /// Drops a delivery when the hook returns true. Off unless set.
    pub fn set_loss_hook(&mut self, hook: LossHook) {
        self.loss = Some(hook);
    }

    pub fn add_endpoint(&mut self, id: EndpointId, e: E) {
        self.endpoints.insert(id, e);
        self.inboxes.entry(id).or_default();
        self.stats.per_endpoint.entry(id).or_default();
    }

    pub fn endpoint(&self, id: EndpointId) -> Option<&E> {
        self.endpoints.get(&id)
    }

    pub fn endpoint_mut(&mut self, id: EndpointId) -> Option<&mut E> {
        self.endpoints.get_mut(&id)
    }

    pub fn endpoints(&self) -> impl Iterator<Item = (&EndpointId, &E)> {
        self.endpoints.iter()
    }

    pub fn stats(&self) -> &NetStats {
        &self.stats
    }

    pub fn pending(&self) -> usize {
        self.inboxes.values().map(VecDeque::len).sum()
    }

    pub fn unicast(&mut self, from: EndpointId, to: EndpointId, bytes: Vec<u8>) -> Result<(), SimError> {
        for id in [from, to] {
            if !self.endpoints.contains_key(&id) {
                return Err(SimError::UnknownEndpoint(id));
            }
        }
        let len = bytes.len() as u64;
        for c in [&mut self.stats.global, self.stats.per_endpoint.entry(from).or_default()] {
            c.messages_sent += 1;
            c.bytes_sent += len;
            c.unicasts += 1;
        }
        self.enqueue(from, to, Arc::from(bytes));
        Ok(())
    }

    pub fn broadcast(&mut self, from: EndpointId, bytes: Vec<u8>) -> Result<(), SimError> {
        if !self.endpoints.contains_key(&from) {
            return Err(SimError::UnknownEndpoint(from));
        }
        let len = bytes.len() as u64;
        for c in [&mut self.stats.global, self.stats.per_endpoint.entry(from).or_default()] {
            c.messages_sent += 1;
            c.bytes_sent += len;
            c.broadcasts += 1;
        }
        let shared: Arc<[u8]> = Arc::from(bytes);
        let targets: Vec<EndpointId> = self.endpoints.keys().copied().filter(|t| *t != from).collect();
        for t in targets {
            self.enqueue(from, t, shared.clone());
        }
        Ok(())
    }

    fn enqueue(&mut self, from: EndpointId, to: EndpointId, bytes: Arc<[u8]>) {
        if let Some(hook) = self.loss.as_mut() {
            if hook(from, to, &bytes) {
                return;
            }
        }
        self.inboxes.entry(to).or_default().push_back((from, bytes));
    }

    /// Delivers queued messages, picking a random non-empty inbox each step, until
    /// every inbox is empty.
    pub fn run_until_quiescent(&mut self) -> Result<NetStats, SimError> {
        let mut steps = 0usize;
        loop {
            let ready: Vec<EndpointId> = self
                .inboxes
                .iter()
                .filter(|(_, q)| !q.is_empty())
                .map(|(id, _)| *id)
                .collect();
            if ready.is_empty() {
                return Ok(self.stats.clone());
            }
            if steps >= self.step_limit {
                return Err(SimError::NonTermination(steps));
            }
            steps += 1;
            let to = ready[self.rng.gen_range(0..ready.len())];
            let (from, bytes) = self
                .inboxes
                .get_mut(&to)
                .and_then(VecDeque::pop_front)
                .expect("inbox is non-empty");
            for c in [&mut self.stats.global, self.stats.per_endpoint.entry(to).or_default()] {
                c.messages_received += 1;
                c.bytes_received += bytes.len() as u64;
            }
            let sends = self
                .endpoints
                .get_mut(&to)
                .expect("inbox belongs to an endpoint")
                .handle(from, &bytes);
            for s in sends {
                match s {
                    Send::Unicast(target, b) => self.unicast(to, target, b)?,
                    Send::Broadcast(b) => self.broadcast(to, b)?,
                }
            }
        }
    }

    pub fn record(&mut self, step: impl Into<String>) {
        self.log.push(StepRecord {
            step: step.into(),
            stats: self.stats.clone(),
        });
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.log
    }

    /// One JSON object per recorded step.
    pub fn json_lines(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("stats serialize") + "\n")
            .collect()
    }
}

pub const GC_ENDPOINT: EndpointId = 0;

pub enum CakeNode {
    Controller(Box<GroupController>),
    Member {
        state: Box<ClientState>,
        log: Vec<Result<Outcome, String>>,
    },
}

impl Endpoint for CakeNode {
    fn handle(&mut self, from: EndpointId, bytes: &[u8]) -> Vec<Send> {
        match self {
            // Registration failures get no reply.
            CakeNode::Controller(gc) => match gc.handle_registration(bytes) {
                Ok(resp) => vec![Send::Unicast(from, resp)],
                Err(_) => Vec::new(),
            },
            CakeNode::Member { state, log } => {
                log.push(state.process(bytes).map_err(|e| e.to_string()));
                Vec::new()
            }
        }
    }
}

/// A controller at endpoint 0 and one client per member, endpoint id = member id.
pub struct CakeWorld {
    pub net: Network<CakeNode>,
    seed: u64,
}

impl CakeWorld {
    pub fn new(seed: u64) -> Self {
        let mut net = Network::new(seed);
        net.add_endpoint(GC_ENDPOINT, CakeNode::Controller(Box::new(GroupController::new(seed))));
        CakeWorld { net, seed }
    }

    pub fn credential(m: MemberId) -> Vec<u8> {
        format!("credential-{}", m.0).into_bytes()
    }

    /// Adds clients and runs their registration exchange with the controller.
    pub fn enroll(&mut self, members: &[MemberId]) -> Result<(), SimError> {
        for m in members {
            let cred = Self::credential(*m);
            self.gc_mut().provision(*m, cred.clone());
            let client = ClientState::new(*m, cred, self.seed ^ (u64::from(m.0) << 32 | 0x5eed));
            let req = client.registration_request().map_err(|_| CodecError::BadField("request"))?;
            self.net.add_endpoint(
                m.0,
                CakeNode::Member {
                    state: Box::new(client),
                    log: Vec::new(),
                },
            );
            self.net.unicast(m.0, GC_ENDPOINT, req)?;
        }
        self.net.run_until_quiescent()?;
        Ok(())
    }

    pub fn gc(&self) -> &GroupController {
        match self.net.endpoint(GC_ENDPOINT) {
            Some(CakeNode::Controller(gc)) => gc,
            _ => unreachable!("endpoint 0 is the controller"),
        }
    }

    pub fn gc_mut(&mut self) -> &mut GroupController {
        match self.net.endpoint_mut(GC_ENDPOINT) {
            Some(CakeNode::Controller(gc)) => gc,
            _ => unreachable!("endpoint 0 is the controller"),
        }
    }

    pub fn client(&self, m: MemberId) -> Option<&ClientState> {
        match self.net.endpoint(m.0) {
            Some(CakeNode::Member { state, .. }) => Some(state),
            _ => None,
        }
    }

    pub fn client_log(&self, m: MemberId) -> &[Result<Outcome, String>] {
        match self.net.endpoint(m.0) {
            Some(CakeNode::Member { log, .. }) => log,
            _ => &[],
        }
    }

    pub fn members(&self) -> Vec<MemberId> {
        self.net
            .endpoints()
            .filter(|(id, _)| **id != GC_ENDPOINT)
            .map(|(id, _)| MemberId(*id))
            .collect()
    }

    /// Queues a controller message; call `run` to deliver.
    pub fn send(&mut self, out: &Outgoing) -> Result<(), SimError> {
        let bytes = out.encode()?;
        match out.dest {
            Destination::Broadcast => self.net.broadcast(GC_ENDPOINT, bytes),
            Destination::Unicast(m) => self.net.unicast(GC_ENDPOINT, m.0, bytes),
        }
    }

    pub fn send_all(&mut self, outs: &[Outgoing]) -> Result<(), SimError> {
        outs.iter().try_for_each(|o| self.send(o))
    }

    pub fn run(&mut self) -> Result<NetStats, SimError> {
        self.net.run_until_quiescent()
    }
}
