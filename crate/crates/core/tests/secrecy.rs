mod common;

use cake_core::crt_lock::{open_slot, solve_lock};
use cake_core::crypto_prims::KeyPair;
use cake_core::group_controller::{LeaveMode, Outgoing};
use cake_core::key_tree::TreeAddress;
use cake_core::messages::{context, purpose, CakePayload, KdBody, KeysSubstructure};
use cake_core::{GroupId, MemberId};
use common::*;

fn substructures(out: &Outgoing) -> Vec<(GroupId, u32, KeysSubstructure)> {
    let mut v = Vec::new();
    for p in &out.payloads {
        if let CakePayload::Kd(kd) = p {
            let subs: Vec<KeysSubstructure> = match &kd.body {
                KdBody::Lock(s) => vec![s.clone()],
                KdBody::SplitLock { lock, .. } => vec![lock.clone()],
                KdBody::Leave(a) => a.keys.clone(),
                KdBody::Download(a) | KdBody::Update(a) => a.keys.clone(),
                _ => vec![],
            };
            v.extend(subs.into_iter().map(|s| (kd.group, kd.epoch, s)));
        }
    }
    v
}

/// Number of (key pair, slot) combinations that open: brute force over every
/// key the adversary holds, independent of the client's own decoding logic.
fn openings(out: &Outgoing, held: &[KeyPair]) -> usize {
    let mut n = 0;
    for (g, e, s) in substructures(out) {
        let lock = s.lock();
        let ctx = context(g, e, s.key_id, purpose::LOCK);
        for p in held {
            if open_slot(&p.key, &ctx, &solve_lock(&lock, &p.m)).is_some() {
                n += 1;
            }
        }
    }
    n
}

fn full_group(seed: u64, n: u32) -> (cake_core::transport_sim::CakeWorld, GroupId) {
    let mut w = world(seed, n);
    let (gid, out) = w.gc_mut().create_group(&ids(1..=n)).unwrap();
    deliver(&mut w, &[out]);
    let dl = w.gc_mut().distribute_tree(gid).unwrap();
    deliver(&mut w, &[dl]);
    (w, gid)
}

fn check_leave(seed: u64, n: u32, leavers: &[MemberId], mode: LeaveMode) {
    let (mut w, gid) = full_group(seed, n);
    let old_tek = w.gc().group(gid).unwrap().gtek;
    let held: Vec<KeyPair> = leavers
        .iter()
        .flat_map(|m| w.client(*m).unwrap().held_pairs())
        .collect();
    let out = w.gc_mut().leave(gid, leavers, mode).unwrap().expect("group survives");
    assert_eq!(openings(&out, &held), 0, "n={n} leavers={leavers:?}");
    // Every remaining member opens at least one slot with its own keys.
    let remaining: Vec<MemberId> = w.gc().group(gid).unwrap().tree.members().map(|(m, _)| *m).collect();
    for m in remaining {
        let own = w.client(m).unwrap().held_pairs();
        assert!(openings(&out, &own) >= 1, "{m:?} locked out");
    }
    deliver(&mut w, &[out]);
    let g = w.gc().group(gid).unwrap();
    assert_ne!(g.gtek, old_tek);
    for m in leavers {
        let v = w.client(*m).unwrap().view(gid).unwrap();
        assert_ne!(v.gtek, g.gtek);
        assert_ne!(&v.gkek, g.gkek());
    }
    assert_consistent(&w, gid);
}

#[test]
fn forward_secrecy_every_single_leaver_up_to_13() {
    for n in 2..=13u32 {
        for k in 1..=n {
            check_leave(100 + n as u64, n, &[MemberId(k)], LeaveMode::Fast);
        }
    }
}

#[test]
fn forward_secrecy_immediate_mode() {
    for n in [4u32, 9, 13] {
        check_leave(200 + n as u64, n, &[MemberId(n)], LeaveMode::Immediate);
    }
}

#[test]
fn colluding_leavers() {
    let sets: &[&[u32]] = &[&[1, 2], &[1, 5, 9], &[2, 3, 4], &[10, 12, 13], &[4, 7]];
    for (i, s) in sets.iter().enumerate() {
        let leavers: Vec<MemberId> = s.iter().copied().map(MemberId).collect();
        check_leave(300 + i as u64, 13, &leavers, LeaveMode::Fast);
        check_leave(400 + i as u64, 13, &leavers, LeaveMode::Immediate);
    }
}

fn lock_elements(s: &KeysSubstructure) -> usize {
    s.lock().element_count().unwrap_or_else(|| s.crt.len().div_ceil(41))
}

#[test]
fn split_along_subtrees_uses_single_element_locks() {
    let (mut w, gid) = full_group(500, 9);
    let parts: Vec<Vec<MemberId>> = {
        let t = &w.gc().group(gid).unwrap().tree;
        t.children(TreeAddress::ROOT)
            .into_iter()
            .map(|c| t.members_under(c))
            .collect()
    };
    assert_eq!(parts.len(), 3);
    let res = w.gc_mut().split(gid, &parts).unwrap();
    for (_, out) in &res {
        let subs = substructures(out);
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].2.crt.len(), 41);
    }
    // Nobody outside a subgroup opens its lock.
    for ((_, out), part) in res.iter().zip(&parts) {
        let outsiders: Vec<KeyPair> = ids(1..=9)
            .into_iter()
            .filter(|m| !part.contains(m))
            .flat_map(|m| w.client(m).unwrap().held_pairs())
            .collect();
        assert_eq!(openings(out, &outsiders), 0);
    }
    let outs: Vec<_> = res.iter().map(|(_, o)| o.clone()).collect();
    deliver(&mut w, &outs);
    for (g, _) in &res {
        assert_consistent(&w, *g);
    }
}

#[test]
fn split_across_subtrees_falls_back_to_personal_keys() {
    let (mut w, gid) = full_group(501, 9);
    let subtrees: Vec<Vec<MemberId>> = {
        let t = &w.gc().group(gid).unwrap().tree;
        t.children(TreeAddress::ROOT)
            .into_iter()
            .map(|c| t.members_under(c))
            .collect()
    };
    // Subgroup i takes the i-th member of every subtree, so no internal node is exclusive.
    let parts: Vec<Vec<MemberId>> = (0..3)
        .map(|i| subtrees.iter().map(|s| s[i]).collect())
        .collect();
    let res = w.gc_mut().split(gid, &parts).unwrap();
    for (_, out) in &res {
        let subs = substructures(out);
        assert_eq!(subs.len(), 1);
        assert_eq!(lock_elements(&subs[0].2), 3);
    }
    for ((_, out), part) in res.iter().zip(&parts) {
        let outsiders: Vec<KeyPair> = ids(1..=9)
            .into_iter()
            .filter(|m| !part.contains(m))
            .flat_map(|m| w.client(m).unwrap().held_pairs())
            .collect();
        assert_eq!(openings(out, &outsiders), 0);
    }
    let outs: Vec<_> = res.iter().map(|(_, o)| o.clone()).collect();
    deliver(&mut w, &outs);
    for (g, _) in &res {
        assert_consistent(&w, *g);
    }
}
