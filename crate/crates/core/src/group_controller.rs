//! The group controller: registration, group creation, rekeying, joins, leaves,
//! tree distribution, merge and split.
//!
//! Every operation works on a copy of the group state and commits it only when the
//! outgoing messages were built, so a failed operation leaves the controller as it
//! was (apart from consumed randomness).

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::crt_lock::{
    build_lock, seal_slot, CrtError, LockMx, Modulus, ModulusGenerator, MODULUS_BITS,
    MODULUS_BYTES,
};
use crate::crypto_prims::{
    derive_next, initial_key_agreement, wrap_in_context, CryptoError, DhKeyPair, KeyPair, SymKey,
};
use crate::key_tree::{KeyTree, Placement, TreeAddress, TreeError, MAX_MEMBERS};
use crate::messages::{
    context, decode, encode, encode_message, measure_message, purpose, CakePayload, CodecError,
    GsaPolicy, KdBody, KeyArray, KeysSubstructure, LeaveArray, ReaddressArray,
    RegistrationRequest, RegistrationResponse, ALG_CAKE,
};
use crate::{GroupId, MemberId};

pub const DEFAULT_LIFETIME_SECS: u32 = 28_800;
/// Largest lock whose serialization fits the 16-bit size field of a substructure.
pub const MAX_LOCK_ELEMENTS: usize = u16::MAX as usize / MODULUS_BYTES;

#[derive(Debug, Error)]
pub enum GcError {
    #[error("credential check failed")]
    AuthFailed,
    #[error("member {0:?} is already registered")]
    AlreadyRegistered(MemberId),
    #[error("unknown member {0:?}")]
    UnknownMember(MemberId),
    #[error("unknown group {0:?}")]
    UnknownGroup(GroupId),
    #[error("member {0:?} is already in the group")]
    AlreadyMember(MemberId),
    #[error("member {0:?} listed twice")]
    DuplicateMember(MemberId),
    #[error("a group needs at least one member")]
    EmptyGroup,
    #[error("subgroup {0} is empty")]
    EmptySubgroup(usize),
    #[error("partition does not cover the group exactly")]
    PartitionMismatch,
    #[error("groups share member {0:?}")]
    NotDisjoint(MemberId),
    #[error("{0} members exceed the tree capacity")]
    OverCapacity(usize),
    #[error("lock over {0} elements does not fit one substructure")]
    LockTooLarge(usize),
    #[error("temporary identifiers exhausted")]
    TempIdsExhausted,
    #[error("unexpected payload")]
    UnexpectedPayload,
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Crt(#[from] CrtError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RekeyMode {
    /// New random keys wrapped under the current GKEK.
    Fresh,
    /// Members hash their keys forward; only a notice is sent.
    Derive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MassJoinMode {
    /// One broadcast lock over all joiners.
    Lock,
    /// One unicast per joiner.
    Unicast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeaveMode {
    /// Only the root key pair travels now; replaced path keys wait for an update array.
    Fast,
    /// Replaced path keys travel in the same leave array.
    Immediate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Destination {
    Broadcast,
    Unicast(MemberId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outgoing {
    pub dest: Destination,
    pub payloads: Vec<CakePayload>,
}

impl Outgoing {
    fn broadcast(payloads: Vec<CakePayload>) -> Self {
        Outgoing {
            dest: Destination::Broadcast,
            payloads,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        encode_message(&self.payloads)
    }

    pub fn measure(&self) -> usize {
        measure_message(&self.payloads)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct GcCounters {
    pub lock_builds: u64,
    pub lock_elements: u64,
    pub wraps: u64,
    pub derivations: u64,
}

#[derive(Clone, Debug)]
pub struct MemberRecord {
    pub member_id: MemberId,
    pub personal: KeyPair,
    pub session: SymKey,
    pub temp_id: TreeAddress,
    pub groups: BTreeSet<GroupId>,
}

#[derive(Clone, Debug)]
pub struct GroupState {
    pub group_id: GroupId,
    pub gtek: SymKey,
    pub tree: KeyTree,
    pub policy: GsaPolicy,
    pub epoch: u32,
    pub compromised: bool,
}

impl GroupState {
    /// The GKEK is the root key.
    pub fn gkek(&self) -> &SymKey {
        &self.tree.root().pair.key
    }
}

#[derive(Clone)]
struct KeySource {
    rng: ChaCha20Rng,
    moduli: ModulusGenerator,
    spare: Vec<KeyPair>,
}

impl KeySource {
    fn pair(&mut self) -> Result<KeyPair, CrtError> {
        if let Some(p) = self.spare.pop() {
            return Ok(p);
        }
        let m = self.moduli.generate(&mut self.rng)?;
        Ok(KeyPair::new(m, SymKey::random(&mut self.rng)))
    }

    fn key(&mut self) -> SymKey {
        SymKey::random(&mut self.rng)
    }
}

#[derive(Clone)]
pub struct GroupController {
    keys: KeySource,
    credentials: BTreeMap<MemberId, Vec<u8>>,
    members: BTreeMap<MemberId, MemberRecord>,
    groups: BTreeMap<GroupId, GroupState>,
    next_group: u32,
    next_temp: u16,
    lifetime_secs: u32,
    counters: GcCounters,
}

impl GroupController {
    pub fn new(seed: u64) -> Self {
        GroupController {
            keys: KeySource {
                rng: ChaCha20Rng::seed_from_u64(seed),
                moduli: ModulusGenerator::new(MODULUS_BITS).expect("default class is valid"),
                spare: Vec::new(),
            },
            credentials: BTreeMap::new(),
            members: BTreeMap::new(),
            groups: BTreeMap::new(),
            next_group: 1,
            next_temp: 0,
            lifetime_secs: DEFAULT_LIFETIME_SECS,
            counters: GcCounters::default(),
        }
    }

    /// Stores the pre-shared credential a member must present when registering.
    pub fn provision(&mut self, member: MemberId, credential: Vec<u8>) {
        self.credentials.insert(member, credential);
    }

    pub fn counters(&self) -> GcCounters {
        self.counters
    }

    pub fn member(&self, m: MemberId) -> Option<&MemberRecord> {
        self.members.get(&m)
    }

    pub fn group(&self, g: GroupId) -> Option<&GroupState> {
        self.groups.get(&g)
    }

    pub fn group_ids(&self) -> Vec<GroupId> {
        self.groups.keys().copied().collect()
    }

    pub fn mark_compromised(&mut self, g: GroupId) -> Result<(), GcError> {
        self.groups
            .get_mut(&g)
            .ok_or(GcError::UnknownGroup(g))?
            .compromised = true;
        Ok(())
    }

    pub fn register(&mut self, req: &RegistrationRequest) -> Result<RegistrationResponse, GcError> {
        match self.credentials.get(&req.member) {
            Some(c) if *c == req.credential => {}
            _ => return Err(GcError::AuthFailed),
        }
        if self.members.contains_key(&req.member) {
            return Err(GcError::AlreadyRegistered(req.member));
        }
        if self.next_temp > 0x3FFF {
            return Err(GcError::TempIdsExhausted);
        }
        let dh = DhKeyPair::generate(&mut self.keys.rng);
        let session = initial_key_agreement(&req.public, &dh)?;
        let personal = self.keys.pair()?;
        let temp_id = TreeAddress::temporary(self.next_temp);
        let wrapped_pair = wrap_in_context(
            &session,
            &context(GroupId(0), 0, temp_id, purpose::REGISTRATION),
            &personal.to_bytes(),
        )?;
        self.next_temp += 1;
        self.counters.wraps += 1;
        self.members.insert(
            req.member,
            MemberRecord {
                member_id: req.member,
                personal,
                session,
                temp_id,
                groups: BTreeSet::new(),
            },
        );
        Ok(RegistrationResponse {
            server_public: dh.public_bytes(),
            temp_id,
            wrapped_pair,
        })
    }

    /// Byte-level registration: decodes a request payload and encodes the response.
    pub fn handle_registration(&mut self, bytes: &[u8]) -> Result<Vec<u8>, GcError> {
        match decode(bytes)? {
            CakePayload::RegistrationRequest(req) => {
                let resp = self.register(&req)?;
                Ok(encode(&CakePayload::RegistrationResponse(resp))?)
            }
            _ => Err(GcError::UnexpectedPayload),
        }
    }

    pub fn create_group(&mut self, members: &[MemberId]) -> Result<(GroupId, Outgoing), GcError> {
        self.check_new_members(members, None)?;
        if members.len() > MAX_LOCK_ELEMENTS {
            return Err(GcError::LockTooLarge(members.len()));
        }
        if members.len() > MAX_MEMBERS {
            return Err(GcError::OverCapacity(members.len()));
        }
        let gid = GroupId(self.next_group);
        let root = self.keys.pair()?;
        let gtek = self.keys.key();
        let mut tree = KeyTree::new(root);
        for m in members {
            self.insert(&mut tree, *m)?;
        }
        let epoch = 1;
        let policy = self.policy(gid);
        let gkek = tree.root().pair.key;
        let recipients: Vec<KeyPair> = members
            .iter()
            .map(|m| self.members[m].personal.clone())
            .collect();
        let lock = self.substructure(gid, epoch, TreeAddress::ROOT, &gkek, None, &recipients)?;
        let moves = members
            .iter()
            .map(|m| (self.members[m].temp_id, tree.member_leaf(*m).expect("inserted")))
            .collect();
        let payloads = vec![
            CakePayload::Policy(policy),
            CakePayload::kd(gid, epoch, KdBody::Lock(lock)),
            CakePayload::kd(gid, epoch, KdBody::Tek(self.wrap_tek(gid, epoch, &gkek, &gtek)?)),
            CakePayload::kd(gid, epoch, KdBody::Readdress(ReaddressArray { moves })),
        ];
        let out = Outgoing::broadcast(payloads);
        out.encode()?;
        self.next_group += 1;
        self.commit_new(GroupState {
            group_id: gid,
            gtek,
            tree,
            policy,
            epoch,
            compromised: false,
        });
        Ok((gid, out))
    }

    pub fn rekey(&mut self, gid: GroupId, mode: RekeyMode) -> Result<Outgoing, GcError> {
        let mut g = self.group_copy(gid)?;
        g.epoch += 1;
        let e = g.epoch;
        let old = *g.gkek();
        let body = match mode {
            RekeyMode::Derive => {
                self.derive_group_keys(&mut g)?;
                KdBody::Notice {
                    derive: true,
                    addresses: Vec::new(),
                }
            }
            RekeyMode::Fresh => {
                let wrapped = self.fresh_group_keys(&mut g, &old)?;
                KdBody::GroupKeys(wrapped)
            }
        };
        let out = Outgoing::broadcast(vec![CakePayload::kd(gid, e, body)]);
        self.groups.insert(gid, g);
        Ok(out)
    }

    /// Adds one registered member. Returns the unicast to the joiner and the broadcast
    /// to the existing members, in that order.
    pub fn join(&mut self, gid: GroupId, member: MemberId) -> Result<(Outgoing, Outgoing), GcError> {
        let mut g = self.group_copy(gid)?;
        self.check_new_members(&[member], Some(&g))?;
        let placement = self.insert(&mut g.tree, member)?;
        g.epoch += 1;
        let e = g.epoch;
        let leaf = placement.address;
        let affected = preexisting_ancestors(&[leaf], std::slice::from_ref(&placement));
        let old = *g.gkek();

        let mut broadcast = Vec::new();
        if !placement.moves.is_empty() {
            broadcast.push(CakePayload::kd(
                gid,
                e,
                KdBody::Readdress(ReaddressArray {
                    moves: placement.moves.clone(),
                }),
            ));
        }
        let derive = !g.compromised;
        if derive {
            self.derive_group_keys(&mut g)?;
            self.derive_nodes(&mut g.tree, &affected)?;
        } else {
            let wrapped = self.fresh_group_keys(&mut g, &old)?;
            broadcast.push(CakePayload::kd(gid, e, KdBody::GroupKeys(wrapped)));
            self.refresh_nodes(&mut g.tree, &affected)?;
            g.compromised = false;
        }
        broadcast.push(CakePayload::kd(
            gid,
            e,
            KdBody::Notice {
                derive,
                addresses: vec![leaf],
            },
        ));
        let unicast = self.welcome(&g, member, leaf)?;
        let broadcast = Outgoing::broadcast(broadcast);
        broadcast.encode()?;
        self.commit(g, &[member], &[]);
        Ok((unicast, broadcast))
    }

    /// Adds several members at once. In lock mode the result is two broadcasts, the
    /// first for the joiners and the second for the existing members; in unicast mode
    /// one unicast per joiner followed by the broadcast.
    pub fn mass_join(
        &mut self,
        gid: GroupId,
        joiners: &[MemberId],
        mode: MassJoinMode,
    ) -> Result<Vec<Outgoing>, GcError> {
        let mut g = self.group_copy(gid)?;
        self.check_new_members(joiners, Some(&g))?;
        if mode == MassJoinMode::Lock && joiners.len() > MAX_LOCK_ELEMENTS {
            return Err(GcError::LockTooLarge(joiners.len()));
        }
        let before: BTreeMap<MemberId, TreeAddress> =
            g.tree.members().map(|(m, a)| (*m, *a)).collect();
        let mut placements = Vec::new();
        for j in joiners {
            placements.push(self.insert(&mut g.tree, *j)?);
        }
        g.epoch += 1;
        let e = g.epoch;
        let leaves: Vec<TreeAddress> = joiners
            .iter()
            .map(|j| g.tree.member_leaf(*j).expect("inserted"))
            .collect();
        let old_moves: Vec<(TreeAddress, TreeAddress)> = before
            .iter()
            .filter_map(|(m, a)| {
                let now = g.tree.member_leaf(*m).expect("still a member");
                (now != *a).then_some((*a, now))
            })
            .collect();
        let affected = preexisting_ancestors(&leaves, &placements);
        let old = *g.gkek();

        let mut second = Vec::new();
        if !old_moves.is_empty() {
            second.push(CakePayload::kd(
                gid,
                e,
                KdBody::Readdress(ReaddressArray { moves: old_moves }),
            ));
        }
        let derive = !g.compromised;
        if derive {
            self.derive_group_keys(&mut g)?;
            self.derive_nodes(&mut g.tree, &affected)?;
        } else {
            let wrapped = self.fresh_group_keys(&mut g, &old)?;
            second.push(CakePayload::kd(gid, e, KdBody::GroupKeys(wrapped)));
            self.refresh_nodes(&mut g.tree, &affected)?;
            g.compromised = false;
        }
        second.push(CakePayload::kd(
            gid,
            e,
            KdBody::Notice {
                derive,
                addresses: leaves.clone(),
            },
        ));

        let mut out = Vec::new();
        match mode {
            MassJoinMode::Lock => {
                // Joiners learn no path keys here, so their ancestors are no longer
                // held by everyone below them.
                for a in &affected {
                    g.tree.set_distributed(*a, false)?;
                }
                let gkek = *g.gkek();
                let recipients: Vec<KeyPair> = joiners
                    .iter()
                    .map(|j| self.members[j].personal.clone())
                    .collect();
                let lock = self.substructure(gid, e, TreeAddress::ROOT, &gkek, None, &recipients)?;
                let moves = joiners
                    .iter()
                    .zip(&leaves)
                    .map(|(j, l)| (self.members[j].temp_id, *l))
                    .collect();
                out.push(Outgoing::broadcast(vec![
                    CakePayload::Policy(g.policy),
                    CakePayload::kd(gid, e, KdBody::Lock(lock)),
                    CakePayload::kd(gid, e, KdBody::Tek(self.wrap_tek(gid, e, &gkek, &g.gtek)?)),
                    CakePayload::kd(gid, e, KdBody::Readdress(ReaddressArray { moves })),
                ]));
            }
            MassJoinMode::Unicast => {
                for (j, l) in joiners.iter().zip(&leaves) {
                    out.push(self.welcome(&g, *j, *l)?);
                }
            }
        }
        out.push(Outgoing::broadcast(second));
        for o in &out {
            o.encode()?;
        }
        self.commit(g, joiners, &[]);
        Ok(out)
    }

    /// Removes members with a single leave array broadcast. `None` when nobody is left
    /// and the group is dissolved.
    pub fn leave(
        &mut self,
        gid: GroupId,
        leavers: &[MemberId],
        mode: LeaveMode,
    ) -> Result<Option<Outgoing>, GcError> {
        let mut g = self.group_copy(gid)?;
        let mut seen = BTreeSet::new();
        for m in leavers {
            if !seen.insert(*m) {
                return Err(GcError::DuplicateMember(*m));
            }
            if g.tree.member_leaf(*m).is_none() {
                return Err(GcError::UnknownMember(*m));
            }
        }
        if leavers.is_empty() {
            return Err(GcError::EmptyGroup);
        }
        if leavers.len() == g.tree.member_count() {
            self.groups.remove(&gid);
            for m in leavers {
                if let Some(r) = self.members.get_mut(m) {
                    r.groups.remove(&gid);
                }
            }
            return Ok(None);
        }

        let mut marked = BTreeSet::new();
        for m in leavers {
            marked.extend(g.tree.remove_member(*m)?.marked);
        }
        g.epoch += 1;
        let e = g.epoch;
        let mut replaced: Vec<TreeAddress> = marked
            .iter()
            .copied()
            .filter(|a| *a != TreeAddress::ROOT && g.tree.contains(*a))
            .collect();
        replaced.sort_by_key(|a| (std::cmp::Reverse(a.depth()), *a));
        for a in &replaced {
            let p = self.keys.pair()?;
            g.tree.set_pair(*a, p, false)?;
        }
        let root = self.keys.pair()?;
        g.tree.set_pair(TreeAddress::ROOT, root, true)?;
        g.gtek = self.keys.key();
        g.compromised = false;

        let mut keys = Vec::new();
        let immediate = mode == LeaveMode::Immediate;
        if immediate {
            for a in &replaced {
                let r = leave_recipients(&g.tree, *a, &marked, true);
                let pair = g.tree.get(*a).expect("present").pair.clone();
                let recipients = pairs_at(&g.tree, &r);
                keys.push(self.substructure(gid, e, *a, &pair.key, Some(&pair.m), &recipients)?);
                g.tree.set_distributed(*a, true)?;
            }
        }
        let r = leave_recipients(&g.tree, TreeAddress::ROOT, &marked, immediate);
        let recipients = pairs_at(&g.tree, &r);
        let gkek = *g.gkek();
        keys.push(self.substructure(gid, e, TreeAddress::ROOT, &gkek, None, &recipients)?);

        let out = Outgoing::broadcast(vec![
            CakePayload::kd(
                gid,
                e,
                KdBody::Leave(LeaveArray {
                    leaves: marked.into_iter().collect(),
                    keys,
                }),
            ),
            CakePayload::kd(gid, e, KdBody::Tek(self.wrap_tek(gid, e, &gkek, &g.gtek)?)),
        ]);
        out.encode()?;
        self.commit(g, &[], leavers);
        Ok(Some(out))
    }

    /// Sends every pending (replaced but undelivered) path key in one update array.
    pub fn distribute_updates(&mut self, gid: GroupId) -> Result<Option<Outgoing>, GcError> {
        let mut g = self.group_copy(gid)?;
        let mut pending: Vec<TreeAddress> = g
            .tree
            .internal_nodes()
            .into_iter()
            .filter(|a| *a != TreeAddress::ROOT && !g.tree.get(*a).expect("present").distributed)
            .collect();
        if pending.is_empty() {
            return Ok(None);
        }
        pending.sort_by_key(|a| (std::cmp::Reverse(a.depth()), *a));
        g.epoch += 1;
        let keys = self.bottom_up(&mut g, &pending, true)?;
        let out = Outgoing::broadcast(vec![CakePayload::kd(
            gid,
            g.epoch,
            KdBody::Update(KeyArray { keys }),
        )]);
        out.encode()?;
        self.groups.insert(gid, g);
        Ok(Some(out))
    }

    /// Broadcasts the whole tree: one substructure per internal node, each a lock over
    /// the node's children, deepest nodes first.
    pub fn distribute_tree(&mut self, gid: GroupId) -> Result<Outgoing, GcError> {
        let mut g = self.group_copy(gid)?;
        let mut nodes = g.tree.internal_nodes();
        nodes.sort_by_key(|a| (std::cmp::Reverse(a.depth()), *a));
        g.epoch += 1;
        let keys = self.bottom_up(&mut g, &nodes, false)?;
        let out = Outgoing::broadcast(vec![CakePayload::kd(
            gid,
            g.epoch,
            KdBody::Download(KeyArray { keys }),
        )]);
        out.encode()?;
        self.groups.insert(gid, g);
        Ok(out)
    }

    /// Merges groups into a new one; one broadcast per source group.
    pub fn merge(&mut self, gids: &[GroupId]) -> Result<(GroupId, Vec<Outgoing>), GcError> {
        let mut sources = Vec::new();
        let mut seen_groups = BTreeSet::new();
        let mut seen = BTreeSet::new();
        for gid in gids {
            if !seen_groups.insert(*gid) {
                return Err(GcError::UnknownGroup(*gid));
            }
            let g = self.group_copy(*gid)?;
            for (m, _) in g.tree.members() {
                if !seen.insert(*m) {
                    return Err(GcError::NotDisjoint(*m));
                }
            }
            sources.push(g);
        }
        if sources.is_empty() {
            return Err(GcError::EmptyGroup);
        }
        if seen.len() > MAX_MEMBERS {
            return Err(GcError::OverCapacity(seen.len()));
        }
        let new_gid = GroupId(self.next_group);
        let root = self.keys.pair()?;
        let gtek = self.keys.key();
        let mut tree = KeyTree::new(root);
        let mut per_source = Vec::new();
        for src in &sources {
            let members: Vec<(MemberId, TreeAddress)> =
                src.tree.members().map(|(m, a)| (*m, *a)).collect();
            for (m, _) in &members {
                self.insert(&mut tree, *m)?;
            }
            per_source.push(members);
        }
        let epoch = 1;
        let policy = self.policy(new_gid);
        let gkek = tree.root().pair.key;
        let mut keys_bytes = gkek.as_bytes().to_vec();
        keys_bytes.extend_from_slice(gtek.as_bytes());

        let mut out = Vec::new();
        for (src, members) in sources.iter().zip(&per_source) {
            let wrapped = wrap_in_context(
                src.gkek(),
                &context(new_gid, epoch, TreeAddress::ROOT, purpose::MERGE),
                &keys_bytes,
            )?;
            self.counters.wraps += 1;
            // Leaves may have moved since insertion pushed some down.
            let moves = members
                .iter()
                .map(|(m, a)| (*a, tree.member_leaf(*m).expect("inserted")))
                .collect();
            out.push(Outgoing::broadcast(vec![
                CakePayload::Policy(policy),
                CakePayload::kd(
                    new_gid,
                    epoch,
                    KdBody::MergeKeys {
                        source: src.group_id,
                        wrapped,
                    },
                ),
                CakePayload::kd(new_gid, epoch, KdBody::Readdress(ReaddressArray { moves })),
            ]));
        }
        for o in &out {
            o.encode()?;
        }
        self.next_group += 1;
        for src in &sources {
            self.groups.remove(&src.group_id);
            for (m, _) in src.tree.members() {
                if let Some(r) = self.members.get_mut(m) {
                    r.groups.remove(&src.group_id);
                }
            }
        }
        self.commit_new(GroupState {
            group_id: new_gid,
            gtek,
            tree,
            policy,
            epoch,
            compromised: false,
        });
        Ok((new_gid, out))
    }

    /// Splits a group along `partition`; one new group and one broadcast per subgroup.
    /// Each subgroup's lock uses the largest distributed subtrees it owns exclusively,
    /// down to personal key pairs.
    pub fn split(
        &mut self,
        gid: GroupId,
        partition: &[Vec<MemberId>],
    ) -> Result<Vec<(GroupId, Outgoing)>, GcError> {
        let g = self.group_copy(gid)?;
        let mut seen = BTreeSet::new();
        for (i, part) in partition.iter().enumerate() {
            if part.is_empty() {
                return Err(GcError::EmptySubgroup(i));
            }
            for m in part {
                if g.tree.member_leaf(*m).is_none() || !seen.insert(*m) {
                    return Err(GcError::PartitionMismatch);
                }
            }
        }
        if seen.len() != g.tree.member_count() {
            return Err(GcError::PartitionMismatch);
        }

        let mut results = Vec::new();
        let mut new_groups = Vec::new();
        let mut next = self.next_group;
        for part in partition {
            let new_gid = GroupId(next);
            next += 1;
            let subset: BTreeSet<MemberId> = part.iter().copied().collect();
            let mut cover = Vec::new();
            for c in g.tree.children(TreeAddress::ROOT) {
                exclusive_cover(&g.tree, c, &subset, &mut cover);
            }
            if cover.len() > MAX_LOCK_ELEMENTS {
                return Err(GcError::LockTooLarge(cover.len()));
            }
            let recipients = pairs_at(&g.tree, &cover);
            let root = self.keys.pair()?;
            let gtek = self.keys.key();
            let mut tree = KeyTree::new(root);
            for m in part {
                self.insert(&mut tree, *m)?;
            }
            let epoch = 1;
            let policy = self.policy(new_gid);
            let gkek = tree.root().pair.key;
            let lock = self.substructure(new_gid, epoch, TreeAddress::ROOT, &gkek, None, &recipients)?;
            let moves = part
                .iter()
                .map(|m| {
                    (
                        g.tree.member_leaf(*m).expect("checked"),
                        tree.member_leaf(*m).expect("inserted"),
                    )
                })
                .collect();
            let out = Outgoing::broadcast(vec![
                CakePayload::Policy(policy),
                CakePayload::kd(
                    new_gid,
                    epoch,
                    KdBody::SplitLock {
                        source: gid,
                        wrapped_tek: self.wrap_tek(new_gid, epoch, &gkek, &gtek)?,
                        lock,
                    },
                ),
                CakePayload::kd(new_gid, epoch, KdBody::Readdress(ReaddressArray { moves })),
            ]);
            out.encode()?;
            results.push((new_gid, out));
            new_groups.push(GroupState {
                group_id: new_gid,
                gtek,
                tree,
                policy,
                epoch,
                compromised: false,
            });
        }
        self.next_group = next;
        self.groups.remove(&gid);
        for m in &seen {
            if let Some(r) = self.members.get_mut(m) {
                r.groups.remove(&gid);
            }
        }
        for ng in new_groups {
            self.commit_new(ng);
        }
        Ok(results)
    }

    fn policy(&self, gid: GroupId) -> GsaPolicy {
        GsaPolicy {
            group: gid,
            algorithm: ALG_CAKE,
            lifetime_secs: self.lifetime_secs,
        }
    }

    fn group_copy(&self, gid: GroupId) -> Result<GroupState, GcError> {
        self.groups.get(&gid).cloned().ok_or(GcError::UnknownGroup(gid))
    }

    fn check_new_members(&self, ms: &[MemberId], g: Option<&GroupState>) -> Result<(), GcError> {
        if ms.is_empty() {
            return Err(GcError::EmptyGroup);
        }
        let mut seen = BTreeSet::new();
        for m in ms {
            if !self.members.contains_key(m) {
                return Err(GcError::UnknownMember(*m));
            }
            if !seen.insert(*m) {
                return Err(GcError::DuplicateMember(*m));
            }
            if g.is_some_and(|g| g.tree.member_leaf(*m).is_some()) {
                return Err(GcError::AlreadyMember(*m));
            }
        }
        if let Some(g) = g {
            let total = g.tree.member_count() + ms.len();
            if total > MAX_MEMBERS {
                return Err(GcError::OverCapacity(total));
            }
        }
        Ok(())
    }

    fn insert(&mut self, tree: &mut KeyTree, m: MemberId) -> Result<Placement, GcError> {
        let personal = self.members[&m].personal.clone();
        let mut spare = Some(self.keys.pair()?);
        let placement = tree.insert_member(m, personal, &mut || {
            spare.take().expect("at most one split per insertion")
        })?;
        if let Some(p) = spare {
            self.keys.spare.push(p);
        }
        Ok(placement)
    }

    fn commit(&mut self, g: GroupState, joined: &[MemberId], left: &[MemberId]) {
        let gid = g.group_id;
        for m in joined {
            if let Some(r) = self.members.get_mut(m) {
                r.groups.insert(gid);
            }
        }
        for m in left {
            if let Some(r) = self.members.get_mut(m) {
                r.groups.remove(&gid);
            }
        }
        self.groups.insert(gid, g);
    }

    fn commit_new(&mut self, g: GroupState) {
        let members: Vec<MemberId> = g.tree.members().map(|(m, _)| *m).collect();
        self.commit(g, &members, &[]);
    }

    fn derive_group_keys(&mut self, g: &mut GroupState) -> Result<(), GcError> {
        let root = g.tree.root().pair.clone();
        g.tree.set_pair(
            TreeAddress::ROOT,
            KeyPair::new(root.m, derive_next(&root.key)),
            true,
        )?;
        g.gtek = derive_next(&g.gtek);
        self.counters.derivations += 2;
        Ok(())
    }

    /// Replaces GKEK and GTEK with random keys and returns them wrapped under `old`.
    fn fresh_group_keys(&mut self, g: &mut GroupState, old: &SymKey) -> Result<Vec<u8>, GcError> {
        let root_m = g.tree.root().pair.m.clone();
        let gkek = self.keys.key();
        g.tree
            .set_pair(TreeAddress::ROOT, KeyPair::new(root_m, gkek), true)?;
        g.gtek = self.keys.key();
        let mut payload = gkek.as_bytes().to_vec();
        payload.extend_from_slice(g.gtek.as_bytes());
        self.counters.wraps += 1;
        Ok(wrap_in_context(
            old,
            &context(g.group_id, g.epoch, TreeAddress::ROOT, purpose::GROUP_KEYS),
            &payload,
        )?)
    }

    fn derive_nodes(&mut self, tree: &mut KeyTree, nodes: &BTreeSet<TreeAddress>) -> Result<(), GcError> {
        for a in nodes {
            let n = tree.get(*a).ok_or(TreeError::UnknownAddress(*a))?.clone();
            tree.set_pair(*a, KeyPair::new(n.pair.m, derive_next(&n.pair.key)), n.distributed)?;
            self.counters.derivations += 1;
        }
        Ok(())
    }

    fn refresh_nodes(&mut self, tree: &mut KeyTree, nodes: &BTreeSet<TreeAddress>) -> Result<(), GcError> {
        for a in nodes {
            let p = self.keys.pair()?;
            tree.set_pair(*a, p, false)?;
        }
        Ok(())
    }

    fn wrap_tek(&mut self, gid: GroupId, epoch: u32, gkek: &SymKey, gtek: &SymKey) -> Result<Vec<u8>, GcError> {
        self.counters.wraps += 1;
        Ok(wrap_in_context(
            gkek,
            &context(gid, epoch, TreeAddress::ROOT, purpose::TEK),
            gtek.as_bytes(),
        )?)
    }

    /// Lock delivering `key` (and, when given, the wrapped modulus) of node `node` to
    /// every holder of one of `recipients`.
    fn substructure(
        &mut self,
        gid: GroupId,
        epoch: u32,
        node: TreeAddress,
        key: &SymKey,
        modulus: Option<&Modulus>,
        recipients: &[KeyPair],
    ) -> Result<KeysSubstructure, GcError> {
        if recipients.len() > MAX_LOCK_ELEMENTS {
            return Err(GcError::LockTooLarge(recipients.len()));
        }
        let ctx = context(gid, epoch, node, purpose::LOCK);
        let residues = recipients
            .iter()
            .map(|r| seal_slot(&r.key, &ctx, key.as_bytes()))
            .collect::<Result<Vec<BigUint>, _>>()?;
        let entries: Vec<(&Modulus, BigUint)> = recipients
            .iter()
            .map(|r| &r.m)
            .zip(residues)
            .collect();
        let lock: LockMx = build_lock(&entries)?;
        self.counters.lock_builds += 1;
        self.counters.lock_elements += recipients.len() as u64;
        let m_blob = match modulus {
            Some(m) => {
                self.counters.wraps += 1;
                wrap_in_context(key, &context(gid, epoch, node, purpose::MODULUS), &m.to_bytes())?
            }
            None => Vec::new(),
        };
        Ok(KeysSubstructure::new(node, &lock, m_blob))
    }

    /// Substructures for `nodes` (deepest first), each locked to the node's children.
    /// With `cover_stale` children that are neither listed nor distributed are
    /// replaced by their own distributed cover.
    fn bottom_up(
        &mut self,
        g: &mut GroupState,
        nodes: &[TreeAddress],
        cover_stale: bool,
    ) -> Result<Vec<KeysSubstructure>, GcError> {
        let listed: BTreeSet<TreeAddress> = nodes.iter().copied().collect();
        let mut keys = Vec::new();
        for a in nodes {
            let mut r = Vec::new();
            for c in g.tree.children(*a) {
                if listed.contains(&c) || !cover_stale {
                    r.push(c);
                } else {
                    cover(&g.tree, c, &mut r);
                }
            }
            let pair = g.tree.get(*a).expect("present").pair.clone();
            let recipients = pairs_at(&g.tree, &r);
            let modulus = (*a != TreeAddress::ROOT).then_some(&pair.m);
            keys.push(self.substructure(g.group_id, g.epoch, *a, &pair.key, modulus, &recipients)?);
            g.tree.set_distributed(*a, true)?;
        }
        Ok(keys)
    }

    /// Unicast giving a joiner the group keys, its leaf address and the current keys
    /// of its distributed ancestors.
    fn welcome(&mut self, g: &GroupState, member: MemberId, leaf: TreeAddress) -> Result<Outgoing, GcError> {
        let record = self.members[&member].clone();
        let gid = g.group_id;
        let e = g.epoch;
        let mut keys_bytes = g.gkek().as_bytes().to_vec();
        keys_bytes.extend_from_slice(g.gtek.as_bytes());
        let welcome = wrap_in_context(
            &record.personal.key,
            &context(gid, e, leaf, purpose::WELCOME),
            &keys_bytes,
        )?;
        self.counters.wraps += 1;
        let mut path = Vec::new();
        for a in leaf.path_to_root()?.into_iter().skip(1) {
            if a == TreeAddress::ROOT {
                break;
            }
            let node = g.tree.get(a).ok_or(TreeError::UnknownAddress(a))?;
            if node.distributed {
                let pair = node.pair.clone();
                path.push(self.substructure(
                    gid,
                    e,
                    a,
                    &pair.key,
                    Some(&pair.m),
                    std::slice::from_ref(&record.personal),
                )?);
            }
        }
        let mut payloads = vec![
            CakePayload::Policy(g.policy),
            CakePayload::kd(gid, e, KdBody::Welcome(welcome)),
            CakePayload::kd(
                gid,
                e,
                KdBody::Readdress(ReaddressArray {
                    moves: vec![(record.temp_id, leaf)],
                }),
            ),
        ];
        if !path.is_empty() {
            payloads.push(CakePayload::kd(gid, e, KdBody::Download(KeyArray { keys: path })));
        }
        let out = Outgoing {
            dest: Destination::Unicast(member),
            payloads,
        };
        out.encode()?;
        Ok(out)
    }
}

/// Non-root ancestors of `leaves` that existed before the placements.
fn preexisting_ancestors(leaves: &[TreeAddress], placements: &[Placement]) -> BTreeSet<TreeAddress> {
    let created: BTreeSet<TreeAddress> = placements
        .iter()
        .flat_map(|p| p.created.iter().copied())
        .collect();
    leaves
        .iter()
        .flat_map(|l| l.path_to_root().expect("in-tree leaf").into_iter().skip(1))
        .filter(|a| *a != TreeAddress::ROOT && !created.contains(a))
        .collect()
}

/// Smallest set of nodes below and including `a` whose current key pairs are held by
/// every member beneath them.
pub fn cover(tree: &KeyTree, a: TreeAddress, out: &mut Vec<TreeAddress>) {
    match tree.get(a) {
        None => {}
        Some(n) if n.distributed || tree.is_member_leaf(a) => out.push(a),
        Some(_) => {
            for c in tree.children(a) {
                cover(tree, c, out);
            }
        }
    }
}

/// Recipients of the substructure for `node` after a leave: unmarked children
/// contribute their cover; marked children count as recipients themselves only when
/// their new key travels in the same array.
fn leave_recipients(
    tree: &KeyTree,
    node: TreeAddress,
    marked: &BTreeSet<TreeAddress>,
    marked_delivered: bool,
) -> Vec<TreeAddress> {
    let mut out = Vec::new();
    for c in tree.children(node) {
        if !marked.contains(&c) {
            cover(tree, c, &mut out);
        } else if marked_delivered {
            out.push(c);
        } else {
            out.extend(leave_recipients(tree, c, marked, false));
        }
    }
    out
}

/// Maximal distributed nodes under `a` whose members all belong to `subset`.
fn exclusive_cover(tree: &KeyTree, a: TreeAddress, subset: &BTreeSet<MemberId>, out: &mut Vec<TreeAddress>) {
    if let Some(m) = tree.leaf_member(a) {
        if subset.contains(&m) {
            out.push(a);
        }
        return;
    }
    let Some(node) = tree.get(a) else { return };
    let members = tree.members_under(a);
    if node.distributed && !members.is_empty() && members.iter().all(|m| subset.contains(m)) {
        out.push(a);
        return;
    }
    for c in tree.children(a) {
        exclusive_cover(tree, c, subset, out);
    }
}

fn pairs_at(tree: &KeyTree, addrs: &[TreeAddress]) -> Vec<KeyPair> {
    addrs
        .iter()
        .map(|a| tree.get(*a).expect("cover nodes are present").pair.clone())
        .collect()
}
