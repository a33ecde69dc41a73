#![allow(dead_code)]

use cake_core::client::ViewStatus;
use cake_core::group_controller::Outgoing;
use cake_core::transport_sim::CakeWorld;
use cake_core::{GroupId, MemberId};

pub fn ids(range: std::ops::RangeInclusive<u32>) -> Vec<MemberId> {
    range.map(MemberId).collect()
}

pub fn world(seed: u64, n: u32) -> CakeWorld {
    let mut w = CakeWorld::new(seed);
    w.enroll(&ids(1..=n)).unwrap();
    w
}

pub fn deliver(w: &mut CakeWorld, outs: &[Outgoing]) {
    w.send_all(outs).unwrap();
    w.run().unwrap();
}

/// Every group member's view matches the controller; everyone else has no matching keys.
pub fn assert_consistent(w: &CakeWorld, gid: GroupId) {
    let g = w.gc().group(gid).expect("group exists");
    for m in w.members() {
        let c = w.client(m).unwrap();
        match g.tree.member_leaf(m) {
            Some(leaf) => {
                let v = c.view(gid).unwrap_or_else(|| panic!("{m:?} has no view"));
                assert_eq!(v.status, ViewStatus::Active, "{m:?}");
                assert_eq!(v.epoch, g.epoch, "{m:?} epoch");
                assert_eq!(&v.gkek, g.gkek(), "{m:?} gkek");
                assert_eq!(v.gtek, g.gtek, "{m:?} gtek");
                assert_eq!(v.leaf, leaf, "{m:?} leaf");
                for (a, pair) in &v.path_keys {
                    let node = g.tree.get(*a).unwrap_or_else(|| panic!("{m:?} holds stale {a}"));
                    if node.distributed {
                        assert_eq!(pair, &node.pair, "{m:?} key at {a}");
                    }
                }
            }
            None => {
                if let Some(v) = c.active_view(gid) {
                    assert_ne!(v.gtek, g.gtek, "outsider {m:?} holds the GTEK");
                }
            }
        }
    }
}

/// Whether a member holds every distributed key pair on its path.
pub fn holds_full_path(w: &CakeWorld, gid: GroupId, m: MemberId) -> bool {
    let g = w.gc().group(gid).unwrap();
    let v = w.client(m).unwrap().view(gid).unwrap();
    let leaf = g.tree.member_leaf(m).unwrap();
    leaf.path_to_root()
        .unwrap()
        .into_iter()
        .filter(|a| *a != cake_core::key_tree::TreeAddress::ROOT)
        .all(|a| v.path_keys.get(&a) == Some(&g.tree.get(a).unwrap().pair))
}
