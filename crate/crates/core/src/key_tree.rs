//! Ternary key hierarchy with 8x2-bit node addresses.
//!
//! Field 0 of an address is `00` for every in-tree node and `11` for temporary
//! keys kept outside the tree. Fields 1..=7 hold the path labels `01`, `10`,
//! `11`; `00` marks padding, so the depth of an address is the number of
//! labels before the first `00` field.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::crypto_prims::KeyPair;
use crate::MemberId;

/// Maximum depth of a node below the root; eight 2-bit fields including the root prefix.
pub const MAX_DEPTH: u8 = 7;
pub const MAX_MEMBERS: usize = 2187;
pub const MAX_KEY_PAIRS: usize = 3280;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("address would exceed depth {MAX_DEPTH}")]
    DepthExceeded,
    #[error("child slot {0} is not one of 1, 2, 3")]
    InvalidSlot(u8),
    #[error("{0} is not an in-tree address")]
    NotInTree(TreeAddress),
    #[error("tree is full")]
    TreeFull,
    #[error("member {0:?} is not in the tree")]
    UnknownMember(MemberId),
    #[error("member {0:?} is already in the tree")]
    DuplicateMember(MemberId),
    #[error("address {0} is already occupied")]
    AddressCollision(TreeAddress),
    #[error("no node at {0}")]
    UnknownAddress(TreeAddress),
}

/// A 16-bit key pair identifier: eight fields of two bits.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TreeAddress(u16);

impl TreeAddress {
    pub const ROOT: TreeAddress = TreeAddress(0);

    pub const fn from_code(code: u16) -> Self {
        TreeAddress(code)
    }

    pub const fn code(self) -> u16 {
        self.0
    }

    /// Builds an in-tree address from path labels (each 1..=3).
    pub fn from_labels(labels: &[u8]) -> Result<Self, TreeError> {
        labels
            .iter()
            .try_fold(TreeAddress::ROOT, |a, &l| a.child(l))
    }

    /// Temporary (out-of-tree) identifier; only the low 14 bits of `index` are used.
    pub const fn temporary(index: u16) -> Self {
        TreeAddress(0xC000 | (index & 0x3FFF))
    }

    pub fn field(self, i: usize) -> u8 {
        debug_assert!(i < 8);
        ((self.0 >> (14 - 2 * i)) & 0b11) as u8
    }

    fn with_field(self, i: usize, v: u8) -> Self {
        let shift = 14 - 2 * i;
        TreeAddress((self.0 & !(0b11 << shift)) | ((v as u16 & 0b11) << shift))
    }

    pub fn depth(self) -> u8 {
        (1..8)
            .find(|&i| self.field(i) == 0)
            .map(|i| i as u8 - 1)
            .unwrap_or(MAX_DEPTH)
    }

    pub fn is_temporary(self) -> bool {
        self.field(0) == 0b11
    }

    /// Padding after the last label is all zero.
    pub fn is_well_formed(self) -> bool {
        let d = self.depth() as usize;
        ((d + 2)..8).all(|i| self.field(i) == 0)
    }

    pub fn is_in_tree(self) -> bool {
        self.field(0) == 0 && self.is_well_formed()
    }

    pub fn labels(self) -> Vec<u8> {
        (1..=self.depth() as usize).map(|i| self.field(i)).collect()
    }

    pub fn parent(self) -> Option<Self> {
        match self.depth() {
            0 => None,
            d => Some(self.with_field(d as usize, 0)),
        }
    }

    /// Address of child `slot` (1, 2, 3 for labels 01, 10, 11).
    pub fn child(self, slot: u8) -> Result<Self, TreeError> {
        if !(1..=3).contains(&slot) {
            return Err(TreeError::InvalidSlot(slot));
        }
        let d = self.depth();
        if d >= MAX_DEPTH {
            return Err(TreeError::DepthExceeded);
        }
        Ok(self.with_field(d as usize + 1, slot))
    }

    /// Strict ancestor test by prefix comparison.
    pub fn is_ancestor_of(self, other: TreeAddress) -> bool {
        let d = self.depth();
        self.field(0) == other.field(0)
            && d < other.depth()
            && (1..=d as usize).all(|i| self.field(i) == other.field(i))
    }

    pub fn is_ancestor_or_self(self, other: TreeAddress) -> bool {
        self == other || self.is_ancestor_of(other)
    }

    /// `[self, parent, ..., root]`.
    pub fn path_to_root(self) -> Result<Vec<TreeAddress>, TreeError> {
        if !self.is_in_tree() {
            return Err(TreeError::NotInTree(self));
        }
        let mut path = vec![self];
        let mut cur = self;
        while let Some(p) = cur.parent() {
            path.push(p);
            cur = p;
        }
        Ok(path)
    }

    /// The child of `self` on the path towards descendant `leaf`.
    pub fn child_towards(self, leaf: TreeAddress) -> Option<TreeAddress> {
        if !self.is_ancestor_of(leaf) {
            return None;
        }
        let d = self.depth() as usize + 1;
        Some(self.with_field(d, leaf.field(d)))
    }

    /// Prefix substitution: if `old` is `self` or an ancestor, returns the address with
    /// `old`'s labels replaced by `new`'s.
    pub fn rebase(self, old: TreeAddress, new: TreeAddress) -> Option<Result<TreeAddress, TreeError>> {
        if !old.is_ancestor_or_self(self) {
            return None;
        }
        let suffix: Vec<u8> = (old.depth() as usize + 1..=self.depth() as usize)
            .map(|i| self.field(i))
            .collect();
        if new.depth() as usize + suffix.len() > MAX_DEPTH as usize {
            return Some(Err(TreeError::DepthExceeded));
        }
        Some(Ok(suffix
            .iter()
            .enumerate()
            .fold(new, |a, (k, &l)| a.with_field(new.depth() as usize + 1 + k, l))))
    }

    pub fn to_be_bytes(self) -> [u8; 2] {
        self.0.to_be_bytes()
    }

    pub fn from_be_bytes(b: [u8; 2]) -> Self {
        TreeAddress(u16::from_be_bytes(b))
    }
}

impl fmt::Display for TreeAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let last = if self.is_well_formed() {
            self.depth() as usize
        } else {
            7
        };
        for i in 0..=last {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{:02b}", self.field(i))?;
        }
        Ok(())
    }
}

impl fmt::Debug for TreeAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TreeAddress({self})")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    pub pair: KeyPair,
    /// Every member below the node holds its current key pair.
    pub distributed: bool,
}

/// Where an inserted member ended up and what moved to make room.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placement {
    pub address: TreeAddress,
    /// Leaves pushed one level down, as `(old, new)`.
    pub moves: Vec<(TreeAddress, TreeAddress)>,
    /// Internal nodes created for this insertion.
    pub created: Vec<TreeAddress>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Removal {
    /// The leaver's former path, leaf first, root last.
    pub marked: Vec<TreeAddress>,
    pub siblings: Vec<TreeAddress>,
}

#[derive(Clone, Debug)]
pub struct KeyTree {
    nodes: BTreeMap<TreeAddress, TreeNode>,
    member_leaves: BTreeMap<MemberId, TreeAddress>,
    leaf_members: BTreeMap<TreeAddress, MemberId>,
}

impl KeyTree {
    pub fn new(root: KeyPair) -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(
            TreeAddress::ROOT,
            TreeNode {
                pair: root,
                distributed: true,
            },
        );
        KeyTree {
            nodes,
            member_leaves: BTreeMap::new(),
            leaf_members: BTreeMap::new(),
        }
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[&TreeAddress::ROOT]
    }

    pub fn get(&self, a: TreeAddress) -> Option<&TreeNode> {
        self.nodes.get(&a)
    }

    pub fn contains(&self, a: TreeAddress) -> bool {
        self.nodes.contains_key(&a)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn member_count(&self) -> usize {
        self.member_leaves.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&TreeAddress, &TreeNode)> {
        self.nodes.iter()
    }

    pub fn members(&self) -> impl Iterator<Item = (&MemberId, &TreeAddress)> {
        self.member_leaves.iter()
    }

    pub fn member_leaf(&self, m: MemberId) -> Option<TreeAddress> {
        self.member_leaves.get(&m).copied()
    }

    pub fn leaf_member(&self, a: TreeAddress) -> Option<MemberId> {
        self.leaf_members.get(&a).copied()
    }

    pub fn is_member_leaf(&self, a: TreeAddress) -> bool {
        self.leaf_members.contains_key(&a)
    }

    pub fn children(&self, a: TreeAddress) -> Vec<TreeAddress> {
        (1..=3)
            .filter_map(|s| a.child(s).ok())
            .filter(|c| self.nodes.contains_key(c))
            .collect()
    }

    /// Non-leaf in-tree nodes, root included.
    pub fn internal_nodes(&self) -> Vec<TreeAddress> {
        self.nodes
            .keys()
            .copied()
            .filter(|a| a.is_in_tree() && !self.leaf_members.contains_key(a))
            .collect()
    }

    pub fn members_under(&self, a: TreeAddress) -> Vec<MemberId> {
        self.leaf_members
            .iter()
            .filter(|(l, _)| a.is_ancestor_or_self(**l))
            .map(|(_, m)| *m)
            .collect()
    }

    pub fn set_pair(&mut self, a: TreeAddress, pair: KeyPair, distributed: bool) -> Result<(), TreeError> {
        let node = self.nodes.get_mut(&a).ok_or(TreeError::UnknownAddress(a))?;
        node.pair = pair;
        node.distributed = distributed;
        Ok(())
    }

    pub fn set_distributed(&mut self, a: TreeAddress, distributed: bool) -> Result<(), TreeError> {
        let node = self.nodes.get_mut(&a).ok_or(TreeError::UnknownAddress(a))?;
        node.distributed = distributed;
        Ok(())
    }

    /// Places `member` in the shallowest, leftmost free position. When no slot is free
    /// at least as shallow as a split would give, the shallowest leaf is pushed down to
    /// its first child slot and the newcomer takes the second one.
    pub fn insert_member(
        &mut self,
        member: MemberId,
        pair: KeyPair,
        fresh: &mut dyn FnMut() -> KeyPair,
    ) -> Result<Placement, TreeError> {
        if self.member_leaves.contains_key(&member) {
            return Err(TreeError::DuplicateMember(member));
        }
        let free = self
            .nodes
            .keys()
            .filter(|a| a.is_in_tree() && !self.leaf_members.contains_key(a))
            .filter(|a| a.depth() < MAX_DEPTH)
            .flat_map(|a| (1..=3).filter_map(move |s| a.child(s).ok()))
            .filter(|c| !self.nodes.contains_key(c))
            .min_by_key(|c| (c.depth(), *c));
        let split = self
            .leaf_members
            .keys()
            .filter(|a| a.depth() < MAX_DEPTH)
            .min_by_key(|a| (a.depth(), **a))
            .copied();

        let use_free = match (free, split) {
            (Some(f), Some(s)) => f.depth() <= s.depth() + 1,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => return Err(TreeError::TreeFull),
        };

        if use_free {
            let address = free.expect("checked above");
            self.place(member, address, pair);
            return Ok(Placement {
                address,
                moves: Vec::new(),
                created: Vec::new(),
            });
        }

        let leaf = split.expect("checked above");
        let moved_to = leaf.child(1)?;
        let address = leaf.child(2)?;
        let displaced = self.leaf_members.remove(&leaf).expect("leaf has a member");
        let node = self.nodes.remove(&leaf).expect("leaf exists");
        self.nodes.insert(moved_to, node);
        self.leaf_members.insert(moved_to, displaced);
        self.member_leaves.insert(displaced, moved_to);
        self.nodes.insert(
            leaf,
            TreeNode {
                pair: fresh(),
                distributed: false,
            },
        );
        self.place(member, address, pair);
        Ok(Placement {
            address,
            moves: vec![(leaf, moved_to)],
            created: vec![leaf],
        })
    }

    fn place(&mut self, member: MemberId, address: TreeAddress, pair: KeyPair) {
        self.nodes.insert(
            address,
            TreeNode {
                pair,
                distributed: true,
            },
        );
        self.member_leaves.insert(member, address);
        self.leaf_members.insert(address, member);
    }

    /// For each non-root node on the leaver's path, its present siblings; deepest level first.
    pub fn siblings_along_path(&self, leaving: TreeAddress) -> Result<Vec<TreeAddress>, TreeError> {
        if !self.leaf_members.contains_key(&leaving) {
            return Err(TreeError::NotInTree(leaving));
        }
        let mut out = Vec::new();
        for node in leaving.path_to_root()? {
            if let Some(parent) = node.parent() {
                out.extend(self.children(parent).into_iter().filter(|c| *c != node));
            }
        }
        Ok(out)
    }

    /// Deletes the member leaf and any internal node left without children.
    pub fn remove_member(&mut self, member: MemberId) -> Result<Removal, TreeError> {
        let leaf = self
            .member_leaves
            .get(&member)
            .copied()
            .ok_or(TreeError::UnknownMember(member))?;
        let siblings = self.siblings_along_path(leaf)?;
        let marked = leaf.path_to_root()?;
        self.member_leaves.remove(&member);
        self.leaf_members.remove(&leaf);
        self.nodes.remove(&leaf);
        let mut cur = leaf.parent();
        while let Some(a) = cur {
            if a == TreeAddress::ROOT || !self.children(a).is_empty() {
                break;
            }
            self.nodes.remove(&a);
            cur = a.parent();
        }
        Ok(Removal { marked, siblings })
    }

    /// Relocates the subtree at each `old` under `new`, rewriting descendant addresses
    /// by prefix substitution. All moves are validated first and applied together.
    pub fn readdress(&mut self, moves: &[(TreeAddress, TreeAddress)]) -> Result<(), TreeError> {
        for (old, _) in moves {
            if !self.nodes.contains_key(old) {
                return Err(TreeError::UnknownAddress(*old));
            }
        }
        let mut relocated: BTreeMap<TreeAddress, TreeAddress> = BTreeMap::new();
        for (old, new) in moves {
            if !new.is_well_formed() {
                return Err(TreeError::NotInTree(*new));
            }
            for a in self.nodes.keys().filter(|a| old.is_ancestor_or_self(**a)) {
                let target = a.rebase(*old, *new).expect("prefix matched")?;
                if relocated.insert(*a, target).is_some() {
                    // Overlapping moves would relocate one node twice.
                    return Err(TreeError::AddressCollision(*a));
                }
            }
        }
        let mut targets = BTreeSet::new();
        for t in relocated.values() {
            if !targets.insert(*t) {
                return Err(TreeError::AddressCollision(*t));
            }
            if self.nodes.contains_key(t) && !relocated.contains_key(t) {
                return Err(TreeError::AddressCollision(*t));
            }
        }
        for (_, new) in moves {
            if let Some(p) = new.parent() {
                let parent_present = (self.nodes.contains_key(&p) && !relocated.contains_key(&p))
                    || targets.contains(&p);
                if !parent_present && !new.is_temporary() {
                    return Err(TreeError::UnknownAddress(p));
                }
            }
        }

        let mut moved_nodes = Vec::new();
        for (old, new) in &relocated {
            let node = self.nodes.remove(old).expect("validated");
            let member = self.leaf_members.remove(old);
            moved_nodes.push((*new, node, member));
        }
        for (new, node, member) in moved_nodes {
            self.nodes.insert(new, node);
            if let Some(m) = member {
                self.leaf_members.insert(new, m);
                self.member_leaves.insert(m, new);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crt_lock::Modulus;
    use crate::crypto_prims::SymKey;
    use num_bigint::BigUint;
    use proptest::prelude::*;

    fn addr(labels: &[u8]) -> TreeAddress {
        TreeAddress::from_labels(labels).unwrap()
    }

    fn dummy_pair(i: u64) -> KeyPair {
        KeyPair::new(
            Modulus::from_biguint(BigUint::from(i)),
            SymKey::from_bytes([(i % 251) as u8; 16]),
        )
    }

    fn tree_with(n: u32) -> KeyTree {
        let mut t = KeyTree::new(dummy_pair(0));
        let mut c = 10_000u64;
        for i in 0..n {
            let mut fresh = || {
                c += 1;
                dummy_pair(c)
            };
            t.insert_member(MemberId(i), dummy_pair(i as u64 + 1), &mut fresh)
                .unwrap();
        }
        t
    }

    #[test]
    fn child_address_bit_placement() {
        assert_eq!(TreeAddress::ROOT.child(1).unwrap().code(), 0x1000);
        assert_eq!(addr(&[1]).child(3).unwrap().code(), 0x1C00);
        assert_eq!(addr(&[1, 3, 2]).code(), 0x1E00);
        assert_eq!(addr(&[1, 3, 2]).to_string(), "00-01-11-10");
        assert_eq!(TreeAddress::ROOT.child(0), Err(TreeError::InvalidSlot(0)));
        let deepest = addr(&[1; 7]);
        assert_eq!(deepest.depth(), 7);
        assert_eq!(deepest.child(1), Err(TreeError::DepthExceeded));
    }

    #[test]
    fn path_to_root_examples() {
        assert_eq!(TreeAddress::ROOT.path_to_root().unwrap(), vec![TreeAddress::ROOT]);
        assert_eq!(
            addr(&[1, 3, 2]).path_to_root().unwrap(),
            vec![addr(&[1, 3, 2]), addr(&[1, 3]), addr(&[1]), TreeAddress::ROOT]
        );
        assert_eq!(addr(&[2; 7]).path_to_root().unwrap().len(), 8);
        let temp = TreeAddress::temporary(5);
        assert_eq!(temp.path_to_root(), Err(TreeError::NotInTree(temp)));
    }

    #[test]
    fn fill_policy() {
        let t = tree_with(1);
        assert_eq!(t.member_leaf(MemberId(0)), Some(addr(&[1])));
        let t = tree_with(3);
        assert_eq!(t.member_leaf(MemberId(2)), Some(addr(&[3])));
        // The fourth member splits the first depth-1 leaf.
        let t = tree_with(4);
        assert_eq!(t.member_leaf(MemberId(0)), Some(addr(&[1, 1])));
        assert_eq!(t.member_leaf(MemberId(3)), Some(addr(&[1, 2])));
        assert!(!t.get(addr(&[1])).unwrap().distributed);
        let t = tree_with(9);
        assert!(t.members().all(|(_, a)| a.depth() == 2));
        assert_eq!(t.node_count(), 13);
    }

    #[test]
    fn siblings_in_nine_leaf_tree() {
        let t = tree_with(9);
        let leaver = addr(&[1, 1]);
        let sib: BTreeSet<_> = t.siblings_along_path(leaver).unwrap().into_iter().collect();
        // Oracle: enumerate every present node whose parent is on the path but which is not.
        let path = leaver.path_to_root().unwrap();
        let oracle: BTreeSet<_> = t
            .nodes()
            .map(|(a, _)| *a)
            .filter(|a| !path.contains(a))
            .filter(|a| a.parent().is_some_and(|p| path.contains(&p)))
            .collect();
        assert_eq!(sib, oracle);
        assert_eq!(
            sib,
            [addr(&[1, 2]), addr(&[1, 3]), addr(&[2]), addr(&[3])].into_iter().collect()
        );
        assert!(tree_with(1).siblings_along_path(addr(&[1])).unwrap().is_empty());
    }

    #[test]
    fn remove_member_reports_path() {
        let mut t = tree_with(27);
        let leaf = addr(&[1, 3, 2]);
        let m = t.leaf_member(leaf).unwrap();
        let r = t.remove_member(m).unwrap();
        assert_eq!(r.marked, leaf.path_to_root().unwrap());
        assert_eq!(r.siblings.len(), 6);
        assert!(!t.contains(leaf));

        let mut solo = tree_with(1);
        let r = solo.remove_member(MemberId(0)).unwrap();
        assert_eq!(r.marked, vec![addr(&[1]), TreeAddress::ROOT]);
        assert!(r.siblings.is_empty());
        assert_eq!(solo.remove_member(MemberId(0)), Err(TreeError::UnknownMember(MemberId(0))));
    }

    #[test]
    fn remove_prunes_empty_internal_nodes() {
        let mut t = tree_with(4);
        t.remove_member(MemberId(0)).unwrap();
        t.remove_member(MemberId(3)).unwrap();
        assert!(!t.contains(addr(&[1])));
        assert_eq!(t.node_count(), 3);
    }

    #[test]
    fn capacity_limits() {
        let mut t = tree_with(MAX_MEMBERS as u32);
        assert_eq!(t.node_count(), MAX_KEY_PAIRS);
        assert!(t.members().all(|(_, a)| a.depth() == MAX_DEPTH));
        let any = t.members().next().map(|(_, a)| *a).unwrap();
        assert_eq!(t.siblings_along_path(any).unwrap().len(), 14);
        let mut fresh = || dummy_pair(1);
        assert_eq!(
            t.insert_member(MemberId(99_999), dummy_pair(5), &mut fresh),
            Err(TreeError::TreeFull)
        );
    }

    #[test]
    fn readdress_leaf_and_subtree() {
        let mut t = tree_with(9);
        let m = t.leaf_member(addr(&[1, 1])).unwrap();
        t.remove_member(t.leaf_member(addr(&[2, 1])).unwrap()).unwrap();
        t.readdress(&[(addr(&[1, 1]), addr(&[2, 1]))]).unwrap();
        assert_eq!(t.member_leaf(m), Some(addr(&[2, 1])));
        assert!(!t.contains(addr(&[1, 1])));

        // Move a whole internal subtree and compare with a naive relabelling.
        let mut t = tree_with(9);
        let before: BTreeMap<MemberId, TreeAddress> = t.members().map(|(m, a)| (*m, *a)).collect();
        for m in t.members_under(addr(&[3])) {
            t.remove_member(m).unwrap();
        }
        t.readdress(&[(addr(&[1]), addr(&[3]))]).unwrap();
        for (m, old) in before {
            if old.field(1) == 1 {
                let expected = TreeAddress::from_labels(&[3, old.field(2)]).unwrap();
                assert_eq!(t.member_leaf(m), Some(expected));
            }
        }
    }

    #[test]
    fn readdress_swap_needs_temporary_slot() {
        let mut t = tree_with(3);
        let (a, b) = (addr(&[1]), addr(&[2]));
        assert_eq!(t.readdress(&[(a, b)]), Err(TreeError::AddressCollision(b)));
        let tmp = TreeAddress::temporary(0).child(1).unwrap();
        let ma = t.leaf_member(a).unwrap();
        let mb = t.leaf_member(b).unwrap();
        t.readdress(&[(a, tmp)]).unwrap();
        t.readdress(&[(b, a)]).unwrap();
        t.readdress(&[(tmp, b)]).unwrap();
        assert_eq!(t.member_leaf(ma), Some(b));
        assert_eq!(t.member_leaf(mb), Some(a));
        assert_eq!(
            t.readdress(&[(addr(&[1, 1]), a)]),
            Err(TreeError::UnknownAddress(addr(&[1, 1])))
        );
    }

    fn in_tree_address() -> impl Strategy<Value = TreeAddress> {
        proptest::collection::vec(1u8..=3, 0..=7).prop_map(|l| TreeAddress::from_labels(&l).unwrap())
    }

    proptest! {
        #[test]
        fn parent_of_child_is_identity(a in in_tree_address(), slot in 1u8..=3) {
            if a.depth() < MAX_DEPTH {
                prop_assert_eq!(a.child(slot).unwrap().parent(), Some(a));
            }
        }

        #[test]
        fn prefix_law(a in in_tree_address(), b in in_tree_address()) {
            let by_prefix = b.is_ancestor_of(a);
            let by_path = a.path_to_root().unwrap()[1..].contains(&b);
            prop_assert_eq!(by_prefix, by_path);
            prop_assert_eq!(b.labels().len() < a.labels().len() && a.labels().starts_with(&b.labels()), by_path);
        }

        #[test]
        fn member_path_knowledge(n in 1u32..200) {
            let t = tree_with(n);
            prop_assert!(t.node_count() <= MAX_KEY_PAIRS);
            for (_, leaf) in t.members() {
                let path = leaf.path_to_root().unwrap();
                prop_assert_eq!(path.len(), leaf.depth() as usize + 1);
                for p in &path {
                    prop_assert!(t.contains(*p));
                }
            }
        }
    }
}
