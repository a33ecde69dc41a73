//! Group member state: registration, lock solving and the per-group key store.
//!
//! A message either creates a view of a group (it carries a lock, welcome, merge
//! or split payload) or updates an existing one. Updates are applied only when the
//! message epoch is newer than the view's, which makes replays harmless. Every
//! message is decoded in full and applied to a copy that is committed at the end.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::crt_lock::{open_slot, solve_lock, Modulus};
use crate::crypto_prims::{derive_next, wrap_in_context, CryptoError, DhKeyPair, KeyPair, SymKey, KEY_BYTES};
use crate::key_tree::TreeAddress;
use crate::messages::{
    context, decode_message, encode, purpose, CakePayload, CodecError, GsaPolicy, KdBody,
    KeysSubstructure, RegistrationRequest,
};
use crate::{GroupId, MemberId};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("decode failed: {0}")]
    Decode(#[from] CodecError),
    #[error("a residue addressed to this client failed its tag")]
    AuthTagMismatch,
    #[error("no registration in progress")]
    NotRegistering,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ignored,
    Applied,
    Evicted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewStatus {
    Active,
    Evicted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ClientCounters {
    pub lock_solves: u64,
    pub unwraps: u64,
    pub derivations: u64,
}

#[derive(Clone, Debug)]
pub struct GroupView {
    pub gkek: SymKey,
    pub gtek: SymKey,
    pub epoch: u32,
    pub leaf: TreeAddress,
    /// Leaf and non-root ancestors this client holds, keyed by address.
    pub path_keys: BTreeMap<TreeAddress, KeyPair>,
    pub status: ViewStatus,
    pub policy: Option<GsaPolicy>,
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub member_id: MemberId,
    credential: Vec<u8>,
    dh: DhKeyPair,
    pub personal: Option<KeyPair>,
    pub temp_id: Option<TreeAddress>,
    pub session: Option<SymKey>,
    pub groups: BTreeMap<GroupId, GroupView>,
    pub counters: ClientCounters,
}

impl ClientState {
    pub fn new(member_id: MemberId, credential: Vec<u8>, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ClientState {
            member_id,
            credential,
            dh: DhKeyPair::generate(&mut rng),
            personal: None,
            temp_id: None,
            session: None,
            groups: BTreeMap::new(),
            counters: ClientCounters::default(),
        }
    }

    pub fn registration_request(&self) -> Result<Vec<u8>, ClientError> {
        Ok(encode(&CakePayload::RegistrationRequest(RegistrationRequest {
            member: self.member_id,
            credential: self.credential.clone(),
            public: self.dh.public_bytes(),
        }))?)
    }

    pub fn view(&self, g: GroupId) -> Option<&GroupView> {
        self.groups.get(&g)
    }

    pub fn active_view(&self, g: GroupId) -> Option<&GroupView> {
        self.groups.get(&g).filter(|v| v.status == ViewStatus::Active)
    }

    /// Every key pair this client currently holds, personal pair included.
    pub fn held_pairs(&self) -> Vec<KeyPair> {
        let mut out: Vec<KeyPair> = self.personal.iter().cloned().collect();
        for v in self.groups.values() {
            out.extend(v.path_keys.values().cloned());
        }
        out
    }

    pub fn process(&mut self, bytes: &[u8]) -> Result<Outcome, ClientError> {
        let payloads = decode_message(bytes)?;
        let mut next = self.clone();
        let outcome = next.apply(&payloads)?;
        if outcome != Outcome::Ignored {
            *self = next;
        }
        Ok(outcome)
    }

    fn apply(&mut self, payloads: &[CakePayload]) -> Result<Outcome, ClientError> {
        if let Some(CakePayload::RegistrationResponse(resp)) = payloads.first() {
            if self.personal.is_some() {
                return Ok(Outcome::Ignored);
            }
            let session = self.dh.agree(&resp.server_public)?;
            let bytes = wrap_in_context(
                &session,
                &context(GroupId(0), 0, resp.temp_id, purpose::REGISTRATION),
                &resp.wrapped_pair,
            )?;
            self.counters.unwraps += 1;
            let pair = KeyPair::from_bytes(&bytes).ok_or(ClientError::AuthTagMismatch)?;
            self.personal = Some(pair);
            self.temp_id = Some(resp.temp_id);
            self.session = Some(session);
            return Ok(Outcome::Applied);
        }
        let Some((gid, epoch)) = payloads.iter().find_map(|p| match p {
            CakePayload::Kd(kd) => Some((kd.group, kd.epoch)),
            _ => None,
        }) else {
            return Ok(Outcome::Ignored);
        };
        let Some(personal) = self.personal.clone() else {
            return Ok(Outcome::Ignored);
        };
        let creation = payloads.iter().any(|p| {
            matches!(
                p,
                CakePayload::Kd(kd) if matches!(
                    kd.body,
                    KdBody::Lock(_) | KdBody::Welcome(_) | KdBody::MergeKeys { .. } | KdBody::SplitLock { .. }
                )
            )
        });
        if creation {
            if self.active_view(gid).is_some() {
                return Ok(Outcome::Ignored);
            }
            return self.create_view(gid, epoch, &personal, payloads);
        }
        let Some(mut view) = self.active_view(gid).cloned() else {
            return Ok(Outcome::Ignored);
        };
        if view.epoch >= epoch {
            return Ok(Outcome::Ignored);
        }
        for p in payloads {
            match p {
                CakePayload::Policy(pol) => view.policy = Some(*pol),
                CakePayload::Kd(kd)
                    if self.apply_body(&mut view, gid, epoch, &kd.body)? == Outcome::Evicted => {
                        view.status = ViewStatus::Evicted;
                        view.epoch = epoch;
                        self.groups.insert(gid, view);
                        return Ok(Outcome::Evicted);
                    }
                _ => {}
            }
        }
        view.epoch = epoch;
        self.groups.insert(gid, view);
        Ok(Outcome::Applied)
    }

    fn create_view(
        &mut self,
        gid: GroupId,
        epoch: u32,
        personal: &KeyPair,
        payloads: &[CakePayload],
    ) -> Result<Outcome, ClientError> {
        let mut policy = None;
        let mut moves = Vec::new();
        for p in payloads {
            match p {
                CakePayload::Policy(pol) => policy = Some(*pol),
                CakePayload::Kd(kd) => {
                    if let KdBody::Readdress(r) = &kd.body {
                        moves.extend(r.moves.iter().copied());
                    }
                }
                _ => {}
            }
        }
        let mut keys: Option<(SymKey, Option<SymKey>)> = None;
        let mut leaf = None;
        let mut source = None;
        let mut downloads = Vec::new();
        for p in payloads {
            let CakePayload::Kd(kd) = p else { continue };
            match &kd.body {
                KdBody::Lock(sub) => {
                    leaf = self.temp_id.and_then(|t| moved_to(&moves, t));
                    let ctx = context(gid, epoch, sub.key_id, purpose::LOCK);
                    match self.try_open(sub, &ctx, std::slice::from_ref(personal)) {
                        Some(k) => keys = Some((k, None)),
                        None if leaf.is_some() => return Err(ClientError::AuthTagMismatch),
                        None => return Ok(Outcome::Ignored),
                    }
                }
                KdBody::Welcome(w) => {
                    let Some(l) = self.temp_id.and_then(|t| moved_to(&moves, t)) else {
                        return Ok(Outcome::Ignored);
                    };
                    leaf = Some(l);
                    let b = self.unwrap(&personal.key, &context(gid, epoch, l, purpose::WELCOME), w)?;
                    keys = Some(split_keys(&b)?);
                }
                KdBody::MergeKeys { source: src, wrapped } => {
                    let Some(v) = self.active_view(*src).cloned() else {
                        return Ok(Outcome::Ignored);
                    };
                    let Some(l) = moved_to(&moves, v.leaf) else {
                        return Ok(Outcome::Ignored);
                    };
                    leaf = Some(l);
                    source = Some(*src);
                    let b = self.unwrap(&v.gkek, &context(gid, epoch, TreeAddress::ROOT, purpose::MERGE), wrapped)?;
                    keys = Some(split_keys(&b)?);
                }
                KdBody::SplitLock {
                    source: src,
                    wrapped_tek,
                    lock,
                } => {
                    let Some(v) = self.active_view(*src).cloned() else {
                        return Ok(Outcome::Ignored);
                    };
                    let listed = moved_to(&moves, v.leaf);
                    let mut held: Vec<(TreeAddress, KeyPair)> =
                        v.path_keys.iter().map(|(a, p)| (*a, p.clone())).collect();
                    held.sort_by_key(|(a, _)| (a.depth(), *a));
                    let candidates: Vec<KeyPair> = held.into_iter().map(|(_, p)| p).collect();
                    let ctx = context(gid, epoch, lock.key_id, purpose::LOCK);
                    let Some(gkek) = self.try_open(lock, &ctx, &candidates) else {
                        return match listed {
                            Some(_) => Err(ClientError::AuthTagMismatch),
                            None => Ok(Outcome::Ignored),
                        };
                    };
                    let tek = self.unwrap(&gkek, &context(gid, epoch, TreeAddress::ROOT, purpose::TEK), wrapped_tek)?;
                    keys = Some((gkek, Some(key_from(&tek)?)));
                    leaf = listed;
                    source = Some(*src);
                }
                KdBody::Tek(w) => {
                    if let Some((gkek, None)) = &keys {
                        let tek = self.unwrap(gkek, &context(gid, epoch, TreeAddress::ROOT, purpose::TEK), w)?;
                        keys = Some((*gkek, Some(key_from(&tek)?)));
                    }
                }
                KdBody::Download(arr) => downloads.extend(arr.keys.iter().cloned()),
                _ => {}
            }
        }
        let (Some((gkek, Some(gtek))), Some(leaf)) = (keys, leaf) else {
            return Ok(Outcome::Ignored);
        };
        let mut view = GroupView {
            gkek,
            gtek,
            epoch,
            leaf,
            path_keys: BTreeMap::from([(leaf, personal.clone())]),
            status: ViewStatus::Active,
            policy,
        };
        for sub in &downloads {
            self.install(&mut view, gid, epoch, sub);
        }
        if let Some(src) = source {
            self.groups.remove(&src);
        }
        self.groups.insert(gid, view);
        Ok(Outcome::Applied)
    }

    fn apply_body(
        &mut self,
        view: &mut GroupView,
        gid: GroupId,
        epoch: u32,
        body: &KdBody,
    ) -> Result<Outcome, ClientError> {
        match body {
            KdBody::GroupKeys(w) => {
                let b = self.unwrap(&view.gkek, &context(gid, epoch, TreeAddress::ROOT, purpose::GROUP_KEYS), w)?;
                let (k, t) = split_keys(&b)?;
                view.gkek = k;
                view.gtek = t.expect("split_keys returns both keys");
            }
            KdBody::Tek(w) => {
                let b = self.unwrap(&view.gkek, &context(gid, epoch, TreeAddress::ROOT, purpose::TEK), w)?;
                view.gtek = key_from(&b)?;
            }
            KdBody::Notice { derive, addresses } => {
                let affected: BTreeSet<TreeAddress> = view
                    .path_keys
                    .keys()
                    .copied()
                    .filter(|a| *a != view.leaf && addresses.iter().any(|l| a.is_ancestor_of(*l)))
                    .collect();
                if *derive {
                    view.gkek = derive_next(&view.gkek);
                    view.gtek = derive_next(&view.gtek);
                    self.counters.derivations += 2;
                    for a in affected {
                        let p = view.path_keys.get_mut(&a).expect("held");
                        p.key = derive_next(&p.key);
                        self.counters.derivations += 1;
                    }
                } else {
                    for a in affected {
                        view.path_keys.remove(&a);
                    }
                }
            }
            KdBody::Readdress(r) => {
                let rewritten: BTreeMap<TreeAddress, KeyPair> = view
                    .path_keys
                    .iter()
                    .map(|(a, p)| (rebase_first(&r.moves, *a), p.clone()))
                    .collect();
                view.leaf = rebase_first(&r.moves, view.leaf);
                view.path_keys = rewritten;
            }
            KdBody::Download(arr) | KdBody::Update(arr) => {
                for sub in &arr.keys {
                    self.install(view, gid, epoch, sub);
                }
            }
            KdBody::Leave(arr) => {
                if arr.leaves.contains(&view.leaf) {
                    return Ok(Outcome::Evicted);
                }
                view.path_keys.retain(|a, _| !arr.leaves.contains(a));
                let mut got_root = false;
                for sub in &arr.keys {
                    if self.install(view, gid, epoch, sub) && sub.key_id == TreeAddress::ROOT {
                        got_root = true;
                    }
                }
                if !got_root {
                    return Ok(Outcome::Evicted);
                }
            }
            KdBody::Lock(_) | KdBody::Welcome(_) | KdBody::MergeKeys { .. } | KdBody::SplitLock { .. } => {}
        }
        Ok(Outcome::Applied)
    }

    /// Opens a substructure for a node on this client's path using the held keys below
    /// it, shallowest first, and stores the result. Returns whether it opened.
    fn install(&mut self, view: &mut GroupView, gid: GroupId, epoch: u32, sub: &KeysSubstructure) -> bool {
        let node = sub.key_id;
        if !node.is_ancestor_of(view.leaf) {
            return false;
        }
        let mut held: Vec<(TreeAddress, KeyPair)> = view
            .path_keys
            .iter()
            .filter(|(a, _)| node.is_ancestor_of(**a))
            .map(|(a, p)| (*a, p.clone()))
            .collect();
        held.sort_by_key(|(a, _)| (a.depth(), *a));
        let candidates: Vec<KeyPair> = held.into_iter().map(|(_, p)| p).collect();
        let ctx = context(gid, epoch, node, purpose::LOCK);
        let Some(key) = self.try_open(sub, &ctx, &candidates) else {
            return false;
        };
        if node == TreeAddress::ROOT {
            view.gkek = key;
            return true;
        }
        let Ok(m) = self.unwrap(&key, &context(gid, epoch, node, purpose::MODULUS), &sub.m_blob) else {
            return false;
        };
        view.path_keys.insert(node, KeyPair::new(Modulus::from_bytes(&m), key));
        true
    }

    fn try_open(&mut self, sub: &KeysSubstructure, ctx: &[u8], candidates: &[KeyPair]) -> Option<SymKey> {
        if candidates.is_empty() {
            return None;
        }
        let lock = sub.lock();
        for c in candidates {
            self.counters.lock_solves += 1;
            let residue = solve_lock(&lock, &c.m);
            if let Some(slot) = open_slot(&c.key, ctx, &residue) {
                return SymKey::from_slice(&slot[..KEY_BYTES]);
            }
        }
        None
    }

    fn unwrap(&mut self, key: &SymKey, ctx: &[u8], data: &[u8]) -> Result<Vec<u8>, ClientError> {
        self.counters.unwraps += 1;
        Ok(wrap_in_context(key, ctx, data)?)
    }
}

fn moved_to(moves: &[(TreeAddress, TreeAddress)], from: TreeAddress) -> Option<TreeAddress> {
    moves.iter().find(|(o, _)| *o == from).map(|(_, n)| *n)
}

/// Applies the first move whose source is `a` or one of its ancestors.
fn rebase_first(moves: &[(TreeAddress, TreeAddress)], a: TreeAddress) -> TreeAddress {
    moves
        .iter()
        .find_map(|(o, n)| a.rebase(*o, *n).and_then(Result::ok))
        .unwrap_or(a)
}

fn key_from(b: &[u8]) -> Result<SymKey, ClientError> {
    SymKey::from_slice(b).ok_or(ClientError::Decode(CodecError::BadField("key length")))
}

fn split_keys(b: &[u8]) -> Result<(SymKey, Option<SymKey>), ClientError> {
    if b.len() != 2 * KEY_BYTES {
        return Err(ClientError::Decode(CodecError::BadField("group keys length")));
    }
    Ok((key_from(&b[..KEY_BYTES])?, Some(key_from(&b[KEY_BYTES..])?)))
}
