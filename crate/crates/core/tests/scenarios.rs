mod common;

use cake_core::client::{Outcome, ViewStatus};
use cake_core::crypto_prims::wrap_in_context;
use cake_core::group_controller::{Destination, GcError, LeaveMode, MassJoinMode, RekeyMode};
use cake_core::key_tree::TreeAddress;
use cake_core::messages::{decode_message, CakePayload, KdBody, KD_HEADER_BYTES};
use cake_core::transport_sim::GC_ENDPOINT;
use cake_core::MemberId;
use common::*;

fn lock_elements(out: &cake_core::group_controller::Outgoing) -> Vec<usize> {
    out.payloads
        .iter()
        .filter_map(|p| match p {
            CakePayload::Kd(kd) => match &kd.body {
                KdBody::Lock(s) => Some(vec![s.crt.len()]),
                KdBody::Leave(a) => Some(a.keys.iter().map(|k| k.crt.len()).collect()),
                _ => None,
            },
            _ => None,
        })
        .flatten()
        .collect()
}

#[test]
fn registration_and_create() {
    let mut w = world(1, 4);
    for m in ids(1..=4) {
        let rec = w.gc().member(m).unwrap();
        assert_eq!(rec.personal.m.bits(), 328);
        assert_eq!(w.client(m).unwrap().personal.as_ref(), Some(&rec.personal));
    }
    let (gid, out) = w.gc_mut().create_group(&ids(1..=3)).unwrap();
    assert_eq!(out.dest, Destination::Broadcast);
    assert_eq!(w.gc().counters().lock_elements, 3);
    deliver(&mut w, &[out]);
    assert_eq!(w.net.stats().per_endpoint[&GC_ENDPOINT].broadcasts, 1);
    assert_consistent(&w, gid);
    assert_eq!(w.client_log(MemberId(4)).last(), Some(&Ok(Outcome::Ignored)));
}

#[test]
fn bad_credential_is_rejected() {
    let mut w = world(2, 0);
    w.gc_mut().provision(MemberId(9), b"right".to_vec());
    let c = cake_core::client::ClientState::new(MemberId(9), b"wrong".to_vec(), 3);
    let req = c.registration_request().unwrap();
    assert!(matches!(w.gc_mut().handle_registration(&req), Err(GcError::AuthFailed)));
    assert!(w.gc().member(MemberId(9)).is_none());
}

#[test]
fn single_member_group_uses_one_congruence() {
    let mut w = world(3, 1);
    let (gid, out) = w.gc_mut().create_group(&ids(1..=1)).unwrap();
    assert_eq!(lock_elements(&out), vec![41]);
    deliver(&mut w, &[out]);
    assert_consistent(&w, gid);
}

#[test]
fn join_fast_path_is_two_messages() {
    let mut w = world(4, 5);
    let (gid, out) = w.gc_mut().create_group(&ids(1..=3)).unwrap();
    deliver(&mut w, &[out]);
    let before = w.net.stats().global.messages_sent;
    let (uni, bc) = w.gc_mut().join(gid, MemberId(4)).unwrap();
    assert_eq!(uni.dest, Destination::Unicast(MemberId(4)));
    // The notice carries no key bytes: header, flag and one address.
    let notice = bc.payloads.iter().find_map(|p| match p {
        CakePayload::Kd(kd) if matches!(kd.body, KdBody::Notice { .. }) => Some(kd.body.measure()),
        _ => None,
    });
    assert_eq!(notice, Some(3));
    assert!(!bc.payloads.iter().any(|p| matches!(p, CakePayload::Kd(kd) if matches!(kd.body, KdBody::GroupKeys(_)))));
    deliver(&mut w, &[uni, bc]);
    assert_eq!(w.net.stats().global.messages_sent - before, 2);
    assert_consistent(&w, gid);
    // The fourth member pushed the first one down.
    assert_eq!(w.client(MemberId(1)).unwrap().view(gid).unwrap().leaf, TreeAddress::from_labels(&[1, 1]).unwrap());
}

#[test]
fn joiner_cannot_read_earlier_traffic() {
    let mut w = world(5, 4);
    let (gid, out) = w.gc_mut().create_group(&ids(1..=3)).unwrap();
    deliver(&mut w, &[out]);
    let old_gtek = w.gc().group(gid).unwrap().gtek;
    let probe = wrap_in_context(&old_gtek, b"probe", b"secret traffic").unwrap();
    let (uni, bc) = w.gc_mut().join(gid, MemberId(4)).unwrap();
    deliver(&mut w, &[uni, bc]);
    assert_consistent(&w, gid);
    let v = w.client(MemberId(4)).unwrap().view(gid).unwrap();
    assert_ne!(wrap_in_context(&v.gtek, b"probe", &probe).unwrap(), b"secret traffic");
    assert_ne!(v.gkek, old_gtek);
}

#[test]
fn compromised_join_sends_wrapped_keys() {
    let mut w = world(6, 5);
    let (gid, out) = w.gc_mut().create_group(&ids(1..=4)).unwrap();
    deliver(&mut w, &[out]);
    let dl = w.gc_mut().distribute_tree(gid).unwrap();
    deliver(&mut w, &[dl]);
    w.gc_mut().mark_compromised(gid).unwrap();
    let (uni, bc) = w.gc_mut().join(gid, MemberId(5)).unwrap();
    assert!(bc.payloads.iter().any(|p| matches!(p, CakePayload::Kd(kd) if matches!(kd.body, KdBody::GroupKeys(_)))));
    deliver(&mut w, &[uni, bc]);
    assert_consistent(&w, gid);
    assert!(!w.gc().group(gid).unwrap().compromised);
}

#[test]
fn mass_join_lock_path() {
    for p in [2u32, 5, 14] {
        let mut w = world(7 + u64::from(p), 3 + p);
        let (gid, out) = w.gc_mut().create_group(&ids(1..=3)).unwrap();
        deliver(&mut w, &[out]);
        let outs = w
            .gc_mut()
            .mass_join(gid, &ids(4..=3 + p), MassJoinMode::Lock)
            .unwrap();
        assert_eq!(outs.len(), 2);
        assert!(outs.iter().all(|o| o.dest == Destination::Broadcast));
        let first = lock_elements(&outs[0]);
        assert_eq!(first.len(), 1);
        assert!(first[0].abs_diff(41 * p as usize) <= 3);
        deliver(&mut w, &outs);
        assert_consistent(&w, gid);
    }
}

#[test]
fn mass_join_unicast_path() {
    let mut w = world(20, 8);
    let (gid, out) = w.gc_mut().create_group(&ids(1..=3)).unwrap();
    deliver(&mut w, &[out]);
    let dl = w.gc_mut().distribute_tree(gid).unwrap();
    deliver(&mut w, &[dl]);
    let outs = w.gc_mut().mass_join(gid, &ids(4..=8), MassJoinMode::Unicast).unwrap();
    assert_eq!(outs.len(), 6);
    deliver(&mut w, &outs);
    assert_consistent(&w, gid);
}

#[test]
fn key_download_solves_depth_many_locks() {
    let mut w = world(21, 9);
    let (gid, out) = w.gc_mut().create_group(&ids(1..=9)).unwrap();
    deliver(&mut w, &[out]);
    let dl = w.gc_mut().distribute_tree(gid).unwrap();
    let keys = match &dl.payloads[0] {
        CakePayload::Kd(kd) => match &kd.body {
            KdBody::Download(a) => a.keys.len(),
            _ => panic!("expected download"),
        },
        _ => panic!("expected KD payload"),
    };
    assert_eq!(keys, 4);
    let solves_before: Vec<u64> = ids(1..=9).iter().map(|m| w.client(*m).unwrap().counters.lock_solves).collect();
    deliver(&mut w, std::slice::from_ref(&dl));
    for (m, s) in ids(1..=9).iter().zip(solves_before) {
        assert_eq!(w.client(*m).unwrap().counters.lock_solves - s, 2, "{m:?}");
        assert!(holds_full_path(&w, gid, *m));
    }
    assert_consistent(&w, gid);
    // A replay of the same array changes nothing.
    deliver(&mut w, &[dl]);
    assert!(ids(1..=9).iter().all(|m| w.client_log(*m).last() == Some(&Ok(Outcome::Ignored))));
}

#[test]
fn leave_costs_one_solve_and_one_unwrap() {
    let mut w = world(22, 9);
    let (gid, out) = w.gc_mut().create_group(&ids(1..=9)).unwrap();
    deliver(&mut w, &[out]);
    let dl = w.gc_mut().distribute_tree(gid).unwrap();
    deliver(&mut w, &[dl]);
    let before: Vec<_> = ids(1..=9).iter().map(|m| w.client(*m).unwrap().counters).collect();
    let out = w.gc_mut().leave(gid, &[MemberId(5)], LeaveMode::Fast).unwrap().unwrap();
    deliver(&mut w, &[out]);
    assert_consistent(&w, gid);
    assert_eq!(w.client_log(MemberId(5)).last(), Some(&Ok(Outcome::Evicted)));
    assert_eq!(w.client(MemberId(5)).unwrap().view(gid).unwrap().status, ViewStatus::Evicted);
    for (m, b) in ids(1..=9).iter().zip(before) {
        if *m == MemberId(5) {
            continue;
        }
        let c = w.client(*m).unwrap().counters;
        assert_eq!(c.lock_solves - b.lock_solves, 1, "{m:?}");
        assert_eq!(c.unwraps - b.unwraps, 1, "{m:?}");
    }
}

#[test]
fn deferred_update_matches_immediate_leave() {
    let run = |mode: LeaveMode| {
        let mut w = world(23, 13);
        let (gid, out) = w.gc_mut().create_group(&ids(1..=13)).unwrap();
        deliver(&mut w, &[out]);
        let dl = w.gc_mut().distribute_tree(gid).unwrap();
        deliver(&mut w, &[dl]);
        let out = w.gc_mut().leave(gid, &[MemberId(2), MemberId(7)], mode).unwrap().unwrap();
        assert_eq!(out.payloads.len(), 2);
        deliver(&mut w, &[out]);
        if let Some(up) = w.gc_mut().distribute_updates(gid).unwrap() {
            deliver(&mut w, &[up]);
        }
        assert!(w.gc_mut().distribute_updates(gid).unwrap().is_none());
        assert_consistent(&w, gid);
        for (m, _) in w.gc().group(gid).unwrap().tree.members() {
            assert!(holds_full_path(&w, gid, *m), "{mode:?} {m:?}");
        }
    };
    run(LeaveMode::Fast);
    run(LeaveMode::Immediate);
}

#[test]
fn sole_member_leave_dissolves() {
    let mut w = world(24, 1);
    let (gid, out) = w.gc_mut().create_group(&ids(1..=1)).unwrap();
    deliver(&mut w, &[out]);
    assert!(w.gc_mut().leave(gid, &ids(1..=1), LeaveMode::Fast).unwrap().is_none());
    assert!(w.gc().group(gid).is_none());
    assert!(matches!(
        w.gc_mut().leave(gid, &ids(1..=1), LeaveMode::Fast),
        Err(GcError::UnknownGroup(_))
    ));
}

#[test]
fn rekey_modes() {
    let mut w = world(25, 3);
    let (gid, out) = w.gc_mut().create_group(&ids(1..=3)).unwrap();
    deliver(&mut w, &[out]);
    let fresh = w.gc_mut().rekey(gid, RekeyMode::Fresh).unwrap();
    assert_eq!(fresh.measure(), KD_HEADER_BYTES + 32);
    deliver(&mut w, &[fresh]);
    assert_consistent(&w, gid);
    for _ in 0..3 {
        let d = w.gc_mut().rekey(gid, RekeyMode::Derive).unwrap();
        assert_eq!(d.measure(), KD_HEADER_BYTES + 1);
        deliver(&mut w, &[d]);
    }
    assert_consistent(&w, gid);
    assert_eq!(w.gc().group(gid).unwrap().epoch, 5);
}

#[test]
fn merge_and_split() {
    let mut w = world(26, 10);
    let (a, out) = w.gc_mut().create_group(&ids(1..=4)).unwrap();
    deliver(&mut w, &[out]);
    let (b, out) = w.gc_mut().create_group(&ids(5..=9)).unwrap();
    deliver(&mut w, &[out]);
    let (m, outs) = w.gc_mut().merge(&[a, b]).unwrap();
    assert_eq!(outs.len(), 2);
    deliver(&mut w, &outs);
    assert_consistent(&w, m);
    assert!(w.client(MemberId(10)).unwrap().view(m).is_none());

    let dl = w.gc_mut().distribute_tree(m).unwrap();
    deliver(&mut w, &[dl]);
    let parts = vec![vec![MemberId(1), MemberId(5), MemberId(9)], ids(2..=4), ids(6..=8)];
    let res = w.gc_mut().split(m, &parts).unwrap();
    assert_eq!(res.len(), 3);
    let outs: Vec<_> = res.iter().map(|(_, o)| o.clone()).collect();
    deliver(&mut w, &outs);
    for (gid, _) in &res {
        assert_consistent(&w, *gid);
    }
    assert!(w.gc().group(m).is_none());
}

#[test]
fn split_errors() {
    let mut w = world(27, 3);
    let (gid, out) = w.gc_mut().create_group(&ids(1..=3)).unwrap();
    deliver(&mut w, &[out]);
    assert!(matches!(
        w.gc_mut().split(gid, &[ids(1..=3), vec![]]),
        Err(GcError::EmptySubgroup(1))
    ));
    assert!(matches!(
        w.gc_mut().split(gid, &[ids(1..=2)]),
        Err(GcError::PartitionMismatch)
    ));
}

#[test]
fn corrupted_message_leaves_state_unchanged() {
    let mut w = world(28, 3);
    let (gid, out) = w.gc_mut().create_group(&ids(1..=3)).unwrap();
    let mut bytes = out.encode().unwrap();
    bytes.truncate(bytes.len() - 1);
    w.net.broadcast(GC_ENDPOINT, bytes).unwrap();
    w.run().unwrap();
    assert!(matches!(w.client_log(MemberId(1)).last(), Some(Err(_))));
    assert!(w.client(MemberId(1)).unwrap().view(gid).is_none());
    let payloads = decode_message(&out.encode().unwrap()).unwrap();
    assert_eq!(payloads, out.payloads);
}
