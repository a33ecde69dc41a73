//! Comparison schemes: pairwise GKMP and binary-tree LKH.
//!
//! Both run with real keys so that members can be checked for forward and backward
//! secrecy, and both produce encoded messages whose sizes feed the comparison table.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::crypto_prims::{wrap_in_context, SymKey, KEY_BYTES};
use crate::messages::{encode, CakePayload, KdBody, KD_HEADER_BYTES};
use crate::{GroupId, MemberId};

pub const GKMP_UNICAST_BYTES: usize = KD_HEADER_BYTES + 2 * KEY_BYTES;
/// KD header, member index, algorithm, reserved, lifetime, wrapped key.
pub const GKMP_ENTRY_BYTES: usize = KD_HEADER_BYTES + 12 + KEY_BYTES;
pub const LKH_ARRAY_HEADER_BYTES: usize = 8;
pub const LKH_KEY_HEADER_BYTES: usize = 8;
pub const LKH_ENTRY_BYTES: usize = LKH_KEY_HEADER_BYTES + KEY_BYTES;
pub const LKH_MAX_LEVELS: u32 = 12;
pub const LKH_DOWNLOAD_HEADER_BYTES: usize = 4;
pub const LKH_DOWNLOAD_ENTRY_HEADER_BYTES: usize = 12;

const GKMP_ENTRY_KIND: u8 = 0x40;
const LKH_UPDATE_KIND: u8 = 0x41;
const LKH_DOWNLOAD_KIND: u8 = 0x42;
const TEK_INDEX: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BaselineError {
    #[error("unknown member {0:?}")]
    UnknownMember(MemberId),
    #[error("member {0:?} already present")]
    AlreadyMember(MemberId),
    #[error("tree with {0} levels is full")]
    TreeFull(u32),
    #[error("levels must be within 1..={LKH_MAX_LEVELS}")]
    BadLevels(u32),
}

fn ctx(tag: &[u8], epoch: u32, a: u32, b: u32) -> Vec<u8> {
    let mut c = tag.to_vec();
    c.extend_from_slice(&epoch.to_be_bytes());
    c.extend_from_slice(&a.to_be_bytes());
    c.extend_from_slice(&b.to_be_bytes());
    c
}

fn xor16(key: &SymKey, context: &[u8], data: &[u8]) -> Vec<u8> {
    wrap_in_context(key, context, data).expect("short payload")
}

fn key16(b: &[u8]) -> SymKey {
    SymKey::from_slice(b).expect("16-byte key")
}

/// Pairwise scheme: every member shares a KEK with the controller and receives the
/// group keys individually.
pub struct GkmpController {
    rng: ChaCha20Rng,
    group: GroupId,
    keks: BTreeMap<MemberId, SymKey>,
    pub gkek: SymKey,
    pub gtek: SymKey,
    pub epoch: u32,
    lifetime_secs: u32,
}

#[derive(Clone, Debug)]
pub struct GkmpMember {
    pub id: MemberId,
    kek: SymKey,
    pub gkek: Option<SymKey>,
    pub gtek: Option<SymKey>,
}

impl GkmpController {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        GkmpController {
            gkek: SymKey::random(&mut rng),
            gtek: SymKey::random(&mut rng),
            rng,
            group: GroupId(1),
            keks: BTreeMap::new(),
            epoch: 0,
            lifetime_secs: 28_800,
        }
    }

    pub fn member_count(&self) -> usize {
        self.keks.len()
    }

    /// Registers a member; the returned state holds the pairwise KEK.
    pub fn register(&mut self, id: MemberId) -> Result<GkmpMember, BaselineError> {
        if self.keks.contains_key(&id) {
            return Err(BaselineError::AlreadyMember(id));
        }
        let kek = SymKey::random(&mut self.rng);
        self.keks.insert(id, kek);
        Ok(GkmpMember {
            id,
            kek,
            gkek: None,
            gtek: None,
        })
    }

    fn new_keys(&mut self) {
        self.gkek = SymKey::random(&mut self.rng);
        self.gtek = SymKey::random(&mut self.rng);
        self.epoch += 1;
    }

    /// New keys sent to each member in its own 44-byte message.
    pub fn rekey_unicast(&mut self) -> Vec<(MemberId, Vec<u8>)> {
        self.new_keys();
        let mut keys = self.gkek.as_bytes().to_vec();
        keys.extend_from_slice(self.gtek.as_bytes());
        self.keks
            .iter()
            .map(|(m, kek)| {
                let w = xor16(kek, &ctx(b"gkmp", self.epoch, m.0, 0), &keys);
                let p = CakePayload::kd(self.group, self.epoch, KdBody::GroupKeys(w));
                (*m, encode(&p).expect("fixed-size payload"))
            })
            .collect()
    }

    /// New keys in one message: a 40-byte entry per member carrying the GKEK under its
    /// KEK, and one more carrying the GTEK under the new GKEK.
    pub fn rekey_broadcast(&mut self) -> Vec<u8> {
        self.new_keys();
        let mut out = Vec::with_capacity(GKMP_ENTRY_BYTES * (self.keks.len() + 1));
        let entries: Vec<(u32, Vec<u8>)> = self
            .keks
            .iter()
            .map(|(m, kek)| {
                (m.0, xor16(kek, &ctx(b"gkmp-b", self.epoch, m.0, 0), self.gkek.as_bytes()))
            })
            .chain(std::iter::once((
                TEK_INDEX,
                xor16(&self.gkek, &ctx(b"gkmp-b", self.epoch, TEK_INDEX, 0), self.gtek.as_bytes()),
            )))
            .collect();
        for (idx, w) in entries {
            out.push(GKMP_ENTRY_KIND);
            out.extend_from_slice(&((GKMP_ENTRY_BYTES - KD_HEADER_BYTES) as u32).to_be_bytes()[1..]);
            out.extend_from_slice(&self.group.0.to_be_bytes());
            out.extend_from_slice(&self.epoch.to_be_bytes());
            out.extend_from_slice(&idx.to_be_bytes());
            out.extend_from_slice(&1u16.to_be_bytes());
            out.extend_from_slice(&[0, 0]);
            out.extend_from_slice(&self.lifetime_secs.to_be_bytes());
            out.extend_from_slice(&w);
        }
        out
    }

    /// Adds a member and rekeys everyone, the newcomer included.
    pub fn join(&mut self, id: MemberId) -> Result<(GkmpMember, Vec<(MemberId, Vec<u8>)>), BaselineError> {
        let m = self.register(id)?;
        Ok((m, self.rekey_unicast()))
    }

    /// Removes a member and rekeys the remaining ones: n - 1 messages.
    pub fn leave(&mut self, id: MemberId) -> Result<Vec<(MemberId, Vec<u8>)>, BaselineError> {
        self.keks.remove(&id).ok_or(BaselineError::UnknownMember(id))?;
        Ok(self.rekey_unicast())
    }
}

impl GkmpMember {
    pub fn process_unicast(&mut self, bytes: &[u8]) {
        let Ok(CakePayload::Kd(kd)) = crate::messages::decode(bytes) else { return };
        if let KdBody::GroupKeys(w) = kd.body {
            let k = xor16(&self.kek, &ctx(b"gkmp", kd.epoch, self.id.0, 0), &w);
            self.gkek = Some(key16(&k[..KEY_BYTES]));
            self.gtek = Some(key16(&k[KEY_BYTES..]));
        }
    }

    pub fn process_broadcast(&mut self, bytes: &[u8]) {
        let mut gkek = None;
        for e in bytes.chunks(GKMP_ENTRY_BYTES) {
            if e.len() != GKMP_ENTRY_BYTES {
                return;
            }
            let epoch = u32::from_be_bytes(e[8..12].try_into().expect("4 bytes"));
            let idx = u32::from_be_bytes(e[12..16].try_into().expect("4 bytes"));
            let w = &e[24..];
            if idx == self.id.0 {
                gkek = Some(key16(&xor16(&self.kek, &ctx(b"gkmp-b", epoch, idx, 0), w)));
            } else if idx == TEK_INDEX {
                if let Some(k) = &gkek {
                    self.gtek = Some(key16(&xor16(k, &ctx(b"gkmp-b", epoch, idx, 0), w)));
                }
            }
        }
        if gkek.is_some() {
            self.gkek = gkek;
        }
    }
}

/// Heap-indexed node: 1 is the root, children of `i` are `2i` and `2i + 1`.
pub type NodeIndex = u32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LkhEntry {
    pub target: NodeIndex,
    pub encrypted_by: NodeIndex,
    pub wrapped: Vec<u8>,
}

/// One LKH update array: `kind | reserved | count (2) | epoch (4)` then 24-byte entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LkhArray {
    pub epoch: u32,
    pub entries: Vec<LkhEntry>,
}

impl LkhArray {
    pub fn measure(&self) -> usize {
        LKH_ARRAY_HEADER_BYTES + LKH_ENTRY_BYTES * self.entries.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.measure());
        out.push(LKH_UPDATE_KIND);
        out.push(0);
        out.extend_from_slice(&(self.entries.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.epoch.to_be_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.target as u16).to_be_bytes());
            out.extend_from_slice(&(e.encrypted_by as u16).to_be_bytes());
            out.extend_from_slice(&[0; 4]);
            out.extend_from_slice(&e.wrapped);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < LKH_ARRAY_HEADER_BYTES || bytes[0] != LKH_UPDATE_KIND {
            return None;
        }
        let count = u16::from_be_bytes([bytes[2], bytes[3]]) as usize;
        let epoch = u32::from_be_bytes(bytes[4..8].try_into().ok()?);
        let body = &bytes[LKH_ARRAY_HEADER_BYTES..];
        if body.len() != count * LKH_ENTRY_BYTES {
            return None;
        }
        let entries = body
            .chunks(LKH_ENTRY_BYTES)
            .map(|c| LkhEntry {
                target: u16::from_be_bytes([c[0], c[1]]) as u32,
                encrypted_by: u16::from_be_bytes([c[2], c[3]]) as u32,
                wrapped: c[8..].to_vec(),
            })
            .collect();
        Some(LkhArray { epoch, entries })
    }
}

/// Binary key tree with `levels` levels; leaves live on the last level.
pub struct LkhTree {
    levels: u32,
    rng: ChaCha20Rng,
    keys: BTreeMap<NodeIndex, SymKey>,
    members: BTreeMap<MemberId, NodeIndex>,
    leaves: BTreeMap<NodeIndex, MemberId>,
    pub epoch: u32,
}

#[derive(Clone, Debug)]
pub struct LkhMember {
    pub id: MemberId,
    pub leaf: NodeIndex,
    pub keys: BTreeMap<NodeIndex, SymKey>,
    pub decrypts: u64,
}

impl LkhMember {
    pub fn group_key(&self) -> Option<&SymKey> {
        self.keys.get(&1)
    }

    /// Applies the entries whose target is on this member's path and whose
    /// encrypting key it holds, in array order.
    pub fn process(&mut self, bytes: &[u8]) {
        let Some(a) = LkhArray::decode(bytes) else { return };
        for e in &a.entries {
            if !is_ancestor(e.target, self.leaf) {
                continue;
            }
            if let Some(k) = self.keys.get(&e.encrypted_by) {
                let nk = key16(&xor16(k, &ctx(b"lkh", a.epoch, e.target, e.encrypted_by), &e.wrapped));
                self.keys.insert(e.target, nk);
                self.decrypts += 1;
            }
        }
    }
}

fn is_ancestor(a: NodeIndex, mut n: NodeIndex) -> bool {
    while n > a {
        n /= 2;
    }
    n == a
}

fn sibling(n: NodeIndex) -> NodeIndex {
    n ^ 1
}

impl LkhTree {
    pub fn new(levels: u32, seed: u64) -> Result<Self, BaselineError> {
        if !(1..=LKH_MAX_LEVELS).contains(&levels) {
            return Err(BaselineError::BadLevels(levels));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut keys = BTreeMap::new();
        keys.insert(1, SymKey::random(&mut rng));
        Ok(LkhTree {
            levels,
            rng,
            keys,
            members: BTreeMap::new(),
            leaves: BTreeMap::new(),
            epoch: 0,
        })
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn capacity(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    pub fn group_key(&self) -> &SymKey {
        &self.keys[&1]
    }

    pub fn key(&self, n: NodeIndex) -> Option<&SymKey> {
        self.keys.get(&n)
    }

    fn first_leaf(&self) -> NodeIndex {
        1 << (self.levels - 1)
    }

    fn path(&self, leaf: NodeIndex) -> Vec<NodeIndex> {
        let mut p = vec![leaf];
        let mut n = leaf;
        while n > 1 {
            n /= 2;
            p.push(n);
        }
        p
    }

    fn member_state(&self, id: MemberId, leaf: NodeIndex) -> LkhMember {
        LkhMember {
            id,
            leaf,
            keys: self
                .path(leaf)
                .into_iter()
                .filter_map(|n| self.keys.get(&n).map(|k| (n, *k)))
                .collect(),
            decrypts: 0,
        }
    }

    fn free_leaf(&self) -> Result<NodeIndex, BaselineError> {
        (self.first_leaf()..2 * self.first_leaf())
            .find(|l| !self.leaves.contains_key(l))
            .ok_or(BaselineError::TreeFull(self.levels))
    }

    /// Places members leftmost and hands each its path keys out of band.
    pub fn populate(&mut self, ids: &[MemberId]) -> Result<Vec<LkhMember>, BaselineError> {
        let mut placed = Vec::new();
        for id in ids {
            if self.members.contains_key(id) {
                return Err(BaselineError::AlreadyMember(*id));
            }
            let leaf = self.free_leaf()?;
            for n in self.path(leaf) {
                if !self.keys.contains_key(&n) {
                    let k = SymKey::random(&mut self.rng);
                    self.keys.insert(n, k);
                }
            }
            self.members.insert(*id, leaf);
            self.leaves.insert(leaf, *id);
            placed.push((*id, leaf));
        }
        Ok(placed
            .into_iter()
            .map(|(id, leaf)| self.member_state(id, leaf))
            .collect())
    }

    fn subtree_has_members(&self, n: NodeIndex) -> bool {
        self.leaves.keys().any(|l| is_ancestor(n, *l))
    }

    fn entry(&self, target: NodeIndex, by: NodeIndex, key: &SymKey) -> LkhEntry {
        LkhEntry {
            target,
            encrypted_by: by,
            wrapped: xor16(&self.keys[&by], &ctx(b"lkh", self.epoch, target, by), key.as_bytes()),
        }
    }

    /// Removes a member. Unoptimized: one array per sibling subtree on the path,
    /// each carrying every new key that subtree needs, shortest array first.
    /// Optimized: a single array with each new key wrapped under its children.
    pub fn leave(&mut self, id: MemberId, optimized: bool) -> Result<Vec<LkhArray>, BaselineError> {
        let leaf = self.members.remove(&id).ok_or(BaselineError::UnknownMember(id))?;
        self.leaves.remove(&leaf);
        self.keys.remove(&leaf);
        self.epoch += 1;
        let ancestors: Vec<NodeIndex> = self.path(leaf).into_iter().skip(1).collect();
        let fresh: Vec<SymKey> = ancestors.iter().map(|_| SymKey::random(&mut self.rng)).collect();

        let mut arrays = Vec::new();
        if optimized {
            let mut entries = Vec::new();
            let mut below = leaf;
            for (j, (a, k)) in ancestors.iter().zip(&fresh).enumerate() {
                let s = sibling(below);
                if self.subtree_has_members(s) {
                    entries.push(self.entry(*a, s, k));
                }
                if j > 0 {
                    // The child on the path already carries its new key.
                    entries.push(LkhEntry {
                        target: *a,
                        encrypted_by: below,
                        wrapped: xor16(
                            &fresh[j - 1],
                            &ctx(b"lkh", self.epoch, *a, below),
                            k.as_bytes(),
                        ),
                    });
                }
                below = *a;
            }
            arrays.push(LkhArray {
                epoch: self.epoch,
                entries,
            });
        } else {
            let mut below = leaf;
            for j in 0..ancestors.len() {
                let s = sibling(below);
                if self.subtree_has_members(s) {
                    let entries = (j..ancestors.len())
                        .map(|i| self.entry(ancestors[i], s, &fresh[i]))
                        .collect();
                    arrays.push(LkhArray {
                        epoch: self.epoch,
                        entries,
                    });
                }
                below = ancestors[j];
            }
            arrays.reverse();
        }
        for (a, k) in ancestors.iter().zip(fresh) {
            self.keys.insert(*a, k);
        }
        Ok(arrays)
    }

    /// Adds a member: every key on its path is replaced. Old members get each new key
    /// wrapped under its predecessor; the joiner gets its path under its leaf key.
    pub fn join(&mut self, id: MemberId) -> Result<(LkhMember, LkhArray, LkhArray), BaselineError> {
        if self.members.contains_key(&id) {
            return Err(BaselineError::AlreadyMember(id));
        }
        let leaf = self.free_leaf()?;
        self.epoch += 1;
        let leaf_key = SymKey::random(&mut self.rng);
        self.keys.insert(leaf, leaf_key);
        let ancestors: Vec<NodeIndex> = self.path(leaf).into_iter().skip(1).collect();
        let mut broadcast = Vec::new();
        let mut unicast = Vec::new();
        for a in &ancestors {
            let k = SymKey::random(&mut self.rng);
            if let Some(old) = self.keys.get(a) {
                broadcast.push(LkhEntry {
                    target: *a,
                    encrypted_by: *a,
                    wrapped: xor16(old, &ctx(b"lkh", self.epoch, *a, *a), k.as_bytes()),
                });
            }
            unicast.push(LkhEntry {
                target: *a,
                encrypted_by: leaf,
                wrapped: xor16(&leaf_key, &ctx(b"lkh", self.epoch, *a, leaf), k.as_bytes()),
            });
            self.keys.insert(*a, k);
        }
        self.members.insert(id, leaf);
        self.leaves.insert(leaf, id);
        let joiner = LkhMember {
            id,
            leaf,
            keys: BTreeMap::from([(leaf, leaf_key)]),
            decrypts: 0,
        };
        Ok((
            joiner,
            LkhArray {
                epoch: self.epoch,
                entries: unicast,
            },
            LkhArray {
                epoch: self.epoch,
                entries: broadcast,
            },
        ))
    }

    /// Whole-tree key download: one entry per internal node, each 12 header bytes plus
    /// the node key wrapped under its first child's key.
    pub fn key_download(&self) -> Vec<u8> {
        let internal: Vec<NodeIndex> = self
            .keys
            .keys()
            .copied()
            .filter(|n| *n < self.first_leaf() && self.subtree_has_members(*n))
            .collect();
        let mut out = Vec::new();
        out.push(LKH_DOWNLOAD_KIND);
        out.push(0);
        out.extend_from_slice(&(internal.len() as u16).to_be_bytes());
        for n in internal {
            let child = if self.keys.contains_key(&(2 * n)) { 2 * n } else { 2 * n + 1 };
            out.extend_from_slice(&(n as u16).to_be_bytes());
            out.extend_from_slice(&(child as u16).to_be_bytes());
            out.extend_from_slice(&1u16.to_be_bytes());
            out.extend_from_slice(&[0; 2]);
            out.extend_from_slice(&self.epoch.to_be_bytes());
            out.extend_from_slice(&xor16(
                &self.keys[&child],
                &ctx(b"lkh-dl", self.epoch, n, child),
                self.keys[&n].as_bytes(),
            ));
        }
        out
    }
}

/// Unoptimized leave total for a full tree: arrays carry 1, 2, ..., levels - 1 keys.
pub fn lkh_leave_closed_form(levels: u32) -> usize {
    (1..levels as usize)
        .map(|i| LKH_ENTRY_BYTES * i + LKH_ARRAY_HEADER_BYTES)
        .sum()
}

/// Optimized single-array leave: 2 (levels - 1) - 1 entries.
pub fn lkh_leave_optimized_closed_form(levels: u32) -> usize {
    LKH_ARRAY_HEADER_BYTES + LKH_ENTRY_BYTES * (2 * (levels as usize - 1)).saturating_sub(1)
}

pub fn lkh_key_download_closed_form(n: usize) -> usize {
    LKH_DOWNLOAD_HEADER_BYTES + n.saturating_sub(1) * (LKH_DOWNLOAD_ENTRY_HEADER_BYTES + KEY_BYTES)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_tree(levels: u32) -> (LkhTree, Vec<LkhMember>) {
        let mut t = LkhTree::new(levels, levels as u64).unwrap();
        let n = 1u32 << (levels - 1);
        let ms = t.populate(&(0..n).map(MemberId).collect::<Vec<_>>()).unwrap();
        (t, ms)
    }

    #[test]
    fn lkh_leave_sizes() {
        let (mut t, _) = full_tree(11);
        let arrays = t.leave(MemberId(5), false).unwrap();
        assert_eq!(arrays.len(), 10);
        let sizes: Vec<usize> = arrays.iter().map(|a| a.encode().len()).collect();
        assert_eq!(sizes, (1..=10).map(|i| 16 * i + 8 * i + 8).collect::<Vec<_>>());
        assert_eq!(sizes.iter().sum::<usize>(), 1400);

        let (mut t, _) = full_tree(11);
        let opt = t.leave(MemberId(5), true).unwrap();
        assert_eq!(opt.len(), 1);
        assert_eq!(opt[0].encode().len(), 464);

        let (mut t, _) = full_tree(2);
        let a = t.leave(MemberId(0), false).unwrap();
        assert_eq!(a.iter().map(|a| a.encode().len()).sum::<usize>(), 32);
    }

    #[test]
    fn lkh_closed_forms_match_accounting() {
        for levels in 2..=11 {
            let (mut t, _) = full_tree(levels);
            let total: usize = t.leave(MemberId(0), false).unwrap().iter().map(LkhArray::measure).sum();
            let sum: usize = (1..levels as usize).map(|i| 24 * i).sum::<usize>() + 8 * (levels as usize - 1);
            assert_eq!(total, sum);
            assert_eq!(total, lkh_leave_closed_form(levels));
        }
        assert_eq!(lkh_leave_optimized_closed_form(11), 464);
    }

    #[test]
    fn lkh_key_download_sizes() {
        for (levels, n) in [(2, 2usize), (12, 2048)] {
            let (t, _) = full_tree(levels);
            assert_eq!(t.key_download().len(), lkh_key_download_closed_form(n));
        }
        assert_eq!(lkh_key_download_closed_form(2), 32);
        assert_eq!(lkh_key_download_closed_form(2048), 57_320);
        let mut t = LkhTree::new(1, 0).unwrap();
        t.populate(&[MemberId(0)]).unwrap();
        assert_eq!(t.key_download().len(), 4);
    }

    #[test]
    fn lkh_forward_secrecy_and_worst_case_decrypts() {
        for optimized in [false, true] {
            for leaver in 0..8u32 {
                let (mut t, mut ms) = full_tree(4);
                let arrays = t.leave(MemberId(leaver), optimized).unwrap();
                for m in ms.iter_mut() {
                    for a in &arrays {
                        m.process(&a.encode());
                    }
                }
                for m in &ms {
                    if m.id.0 == leaver {
                        assert_ne!(m.group_key(), Some(t.group_key()));
                    } else {
                        assert_eq!(m.group_key(), Some(t.group_key()), "member {:?}", m.id);
                    }
                }
                let sib = ms.iter().find(|m| m.leaf == sibling(t.first_leaf() + leaver)).unwrap();
                assert_eq!(sib.decrypts, 3);
            }
        }
    }

    #[test]
    fn lkh_backward_secrecy() {
        let mut t = LkhTree::new(4, 1).unwrap();
        let mut ms = t.populate(&(0..5).map(MemberId).collect::<Vec<_>>()).unwrap();
        let old = *t.group_key();
        let (mut j, uni, bc) = t.join(MemberId(9)).unwrap();
        j.process(&uni.encode());
        for m in ms.iter_mut() {
            m.process(&bc.encode());
            assert_eq!(m.group_key(), Some(t.group_key()));
        }
        assert_eq!(j.group_key(), Some(t.group_key()));
        assert!(!j.keys.values().any(|k| *k == old));
    }

    #[test]
    fn gkmp_sizes_and_secrecy() {
        let mut gc = GkmpController::new(1);
        let mut ms: Vec<GkmpMember> = (1..=2187).map(|i| gc.register(MemberId(i)).unwrap()).collect();
        let uni = gc.rekey_unicast();
        assert_eq!(uni.len(), 2187);
        assert!(uni.iter().all(|(_, b)| b.len() == GKMP_UNICAST_BYTES));
        let bc = gc.rekey_broadcast();
        assert_eq!(bc.len(), 87_520);
        for m in ms.iter_mut().take(5) {
            m.process_broadcast(&bc);
            assert_eq!(m.gtek.as_ref(), Some(&gc.gtek));
        }

        let mut gc = GkmpController::new(2);
        let mut ms: Vec<GkmpMember> = (1..=4).map(|i| gc.register(MemberId(i)).unwrap()).collect();
        let out = gc.leave(MemberId(2)).unwrap();
        assert_eq!(out.len(), 3);
        for m in ms.iter_mut() {
            for (to, b) in &out {
                if *to == m.id {
                    m.process_unicast(b);
                }
            }
        }
        assert_ne!(ms[1].gtek.as_ref(), Some(&gc.gtek));
        assert_eq!(ms[0].gtek.as_ref(), Some(&gc.gtek));

        let old = gc.gtek;
        let (mut j, out) = gc.join(MemberId(7)).unwrap();
        for (to, b) in &out {
            if *to == j.id {
                j.process_unicast(b);
            }
        }
        assert_eq!(j.gtek.as_ref(), Some(&gc.gtek));
        assert_ne!(j.gtek.as_ref(), Some(&old));
    }
}
