use std::collections::BTreeMap;

use cake_core::baselines::{GkmpController, GkmpMember, LkhMember, LkhTree, LKH_MAX_LEVELS};
use cake_core::client::ViewStatus;
use cake_core::crt_lock::{open_slot, solve_lock};
use cake_core::crypto_prims::{wrap_in_context, KeyPair};
use cake_core::group_controller::{
    GcCounters, LeaveMode, MassJoinMode, Outgoing, RekeyMode, MAX_LOCK_ELEMENTS,
};
use cake_core::key_tree::MAX_MEMBERS;
use cake_core::messages::{context, measure, purpose, CakePayload, KdBody, KeysSubstructure};
use cake_core::transport_sim::{CakeWorld, Counters};
use cake_core::{GroupId, MemberId};

use crate::closed_form as cf;
use crate::report::{Cell, Report};
use crate::{BenchError, Scenario, ScenarioSpec, Scheme};

pub const SECRECY_CHECK: &str = "secrecy";

/// Largest lock used while building big groups.
const BUILD_BATCH: usize = 1000;

pub fn run_scenario(spec: &ScenarioSpec) -> Result<Report, BenchError> {
    if spec.n == 0 {
        return Err(BenchError::InvalidSpec("members must be at least 1".into()));
    }
    if spec.p == 0 {
        return Err(BenchError::InvalidSpec("batch must be at least 1".into()));
    }
    let mut r = Report {
        scheme: Some(spec.scheme),
        scenario: Some(spec.scenario),
        n: spec.n,
        p: spec.p,
        seed: spec.seed,
        ..Report::default()
    };
    match spec.scheme {
        Scheme::Cake => cake(spec, &mut r)?,
        Scheme::Gkmp => gkmp(spec, &mut r)?,
        Scheme::Lkh => lkh(spec, &mut r)?,
    }
    Ok(r)
}

fn ids(from: usize, count: usize) -> Vec<MemberId> {
    (from..from + count).map(|i| MemberId(i as u32)).collect()
}

/// Deterministic pick of `p` distinct members out of `1..=n`.
fn pick(seed: u64, n: usize, p: usize) -> Vec<MemberId> {
    let start = (seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 32) as usize % n;
    (0..p).map(|i| MemberId(((start + i) % n + 1) as u32)).collect()
}

// ---- CAKE ----

fn payload_name(p: &CakePayload) -> &'static str {
    match p {
        CakePayload::Policy(_) => "policy",
        CakePayload::RegistrationRequest(_) => "registration_request",
        CakePayload::RegistrationResponse(_) => "registration_response",
        CakePayload::Kd(kd) => match kd.body {
            KdBody::GroupKeys(_) => "group_keys",
            KdBody::Tek(_) => "tek",
            KdBody::Notice { .. } => "notice",
            KdBody::Lock(_) => "lock",
            KdBody::Download(_) => "download",
            KdBody::Update(_) => "update",
            KdBody::Readdress(_) => "readdress",
            KdBody::Leave(_) => "leave",
            KdBody::Welcome(_) => "welcome",
            KdBody::MergeKeys { .. } => "merge_keys",
            KdBody::SplitLock { .. } => "split_lock",
        },
    }
}

fn substructures(out: &Outgoing) -> Vec<(GroupId, u32, &KeysSubstructure)> {
    let mut v = Vec::new();
    for p in &out.payloads {
        if let CakePayload::Kd(kd) = p {
            match &kd.body {
                KdBody::Lock(s) | KdBody::SplitLock { lock: s, .. } => v.push((kd.group, kd.epoch, s)),
                KdBody::Leave(a) => v.extend(a.keys.iter().map(|s| (kd.group, kd.epoch, s))),
                KdBody::Download(a) | KdBody::Update(a) => {
                    v.extend(a.keys.iter().map(|s| (kd.group, kd.epoch, s)))
                }
                _ => {}
            }
        }
    }
    v
}

/// Slots opened by trying every held key pair on every lock in `out`.
fn openings(out: &Outgoing, held: &[KeyPair]) -> usize {
    let mut n = 0;
    for (g, e, s) in substructures(out) {
        let lock = s.lock();
        let ctx = context(g, e, s.key_id, purpose::LOCK);
        n += held
            .iter()
            .filter(|p| open_slot(&p.key, &ctx, &solve_lock(&lock, &p.m)).is_some())
            .count();
    }
    n
}

struct Snapshot {
    net: Counters,
    gc: GcCounters,
    clients: BTreeMap<MemberId, (u64, u64)>,
}

fn snapshot(w: &CakeWorld) -> Snapshot {
    Snapshot {
        net: w.net.stats().global,
        gc: w.gc().counters(),
        clients: w
            .members()
            .into_iter()
            .map(|m| {
                let c = w.client(m).expect("enrolled").counters;
                (m, (c.lock_solves, c.unwraps))
            })
            .collect(),
    }
}

fn client_delta(w: &CakeWorld, before: &Snapshot, m: MemberId) -> (u64, u64) {
    let c = w.client(m).expect("enrolled").counters;
    let (s, u) = before.clients.get(&m).copied().unwrap_or_default();
    (c.lock_solves - s, c.unwraps - u)
}

/// Sends `outs`, runs the network, and records traffic and work into `r`.
fn measure_cake(w: &mut CakeWorld, r: &mut Report, outs: &[Outgoing]) -> Result<Snapshot, BenchError> {
    let before = snapshot(w);
    w.send_all(outs)?;
    w.run()?;
    let after = w.net.stats().global;
    r.messages += after.messages_sent - before.net.messages_sent;
    r.broadcasts += after.broadcasts - before.net.broadcasts;
    r.unicasts += after.unicasts - before.net.unicasts;
    r.total_bytes += after.bytes_sent - before.net.bytes_sent;
    for o in outs {
        for p in &o.payloads {
            *r.payload_bytes.entry(payload_name(p).to_string()).or_default() += measure(p) as u64;
        }
        r.lock_sizes.extend(substructures(o).iter().map(|(_, _, s)| s.crt.len()));
    }
    let gc = w.gc().counters();
    r.gc_lock_builds += gc.lock_builds - before.gc.lock_builds;
    r.gc_wraps += gc.wraps - before.gc.wraps;
    for m in w.members() {
        let (s, u) = client_delta(w, &before, m);
        r.client_solves += s;
        r.client_unwraps += u;
    }
    Ok(before)
}

fn deliver(w: &mut CakeWorld, outs: &[Outgoing]) -> Result<(), BenchError> {
    w.send_all(outs)?;
    w.run()?;
    Ok(())
}

/// Members and non-members agree with the controller on who holds the group keys.
fn in_sync(w: &CakeWorld, gid: GroupId) -> bool {
    let Some(g) = w.gc().group(gid) else { return false };
    w.members().into_iter().all(|m| {
        let view = w.client(m).and_then(|c| c.view(gid));
        match (g.tree.member_leaf(m), view) {
            (Some(leaf), Some(v)) => {
                v.status == ViewStatus::Active
                    && v.epoch == g.epoch
                    && &v.gkek == g.gkek()
                    && v.gtek == g.gtek
                    && v.leaf == leaf
            }
            (Some(_), None) => false,
            (None, Some(v)) => v.gtek != g.gtek,
            (None, None) => true,
        }
    })
}

/// Enrolls `n + extra` members and builds a group of the first `n`, in batches
/// when the group is too big for a single lock.
fn cake_group(seed: u64, n: usize, extra: usize, distribute: bool) -> Result<(CakeWorld, GroupId), BenchError> {
    if n + extra > MAX_MEMBERS {
        return Err(BenchError::CapacityExceeded(n + extra, Scheme::Cake));
    }
    let mut w = CakeWorld::new(seed);
    w.enroll(&ids(1, n + extra))?;
    let first = n.min(BUILD_BATCH);
    let (gid, out) = w.gc_mut().create_group(&ids(1, first))?;
    deliver(&mut w, &[out])?;
    let mut next = first + 1;
    while next <= n {
        let batch = (n + 1 - next).min(BUILD_BATCH);
        let outs = w.gc_mut().mass_join(gid, &ids(next, batch), MassJoinMode::Lock)?;
        deliver(&mut w, &outs)?;
        next += batch;
    }
    if distribute {
        let out = w.gc_mut().distribute_tree(gid)?;
        deliver(&mut w, &[out])?;
    }
    Ok((w, gid))
}

fn held(w: &CakeWorld, ms: &[MemberId]) -> Vec<KeyPair> {
    ms.iter()
        .flat_map(|m| w.client(*m).map(|c| c.held_pairs()).unwrap_or_default())
        .collect()
}

/// Every symmetric key a client holds for `gid`, used for backward-secrecy probes.
fn held_keys(w: &CakeWorld, m: MemberId, gid: GroupId) -> Vec<cake_core::crypto_prims::SymKey> {
    let c = w.client(m).expect("enrolled");
    let mut keys: Vec<_> = c.held_pairs().into_iter().map(|p| p.key).collect();
    if let Some(v) = c.view(gid) {
        keys.push(v.gkek);
        keys.push(v.gtek);
    }
    keys
}

const PROBE: &[u8] = b"traffic before the join";

fn probe(gtek: &cake_core::crypto_prims::SymKey) -> Vec<u8> {
    wrap_in_context(gtek, b"probe", PROBE).expect("short probe")
}

fn reads_probe(keys: &[cake_core::crypto_prims::SymKey], probe: &[u8]) -> bool {
    keys.iter()
        .any(|k| wrap_in_context(k, b"probe", probe).expect("short probe") == PROBE)
}

fn cake(spec: &ScenarioSpec, r: &mut Report) -> Result<(), BenchError> {
    let (n, p, seed) = (spec.n, spec.p, spec.seed);
    match spec.scenario {
        Scenario::Create => {
            if n > MAX_LOCK_ELEMENTS {
                return Err(BenchError::CapacityExceeded(n, Scheme::Cake));
            }
            let mut w = CakeWorld::new(seed);
            w.enroll(&ids(1, n))?;
            let (gid, out) = w.gc_mut().create_group(&ids(1, n))?;
            measure_cake(&mut w, r, &[out])?;
            r.cells.push(Cell::versus("messages", r.messages as f64, 1.0));
            r.cells.push(Cell::versus("lock_bytes", r.lock_sizes[0] as f64, cf::crt_size(n)));
            r.cells.push(Cell::measured("total_bytes", r.total_bytes as f64));
            r.check("members_in_sync", in_sync(&w, gid));
        }
        Scenario::Join => {
            let (mut w, gid) = cake_group(seed, n, p, true)?;
            let mut probes = Vec::new();
            for (i, joiner) in ids(n + 1, p).into_iter().enumerate() {
                probes.push(probe(&w.gc().group(gid).expect("group").gtek));
                let (uni, bc) = w.gc_mut().join(gid, joiner)?;
                if i == 0 {
                    let welcome: usize = uni
                        .payloads
                        .iter()
                        .filter_map(|p| match p {
                            CakePayload::Kd(kd) => match &kd.body {
                                KdBody::Welcome(b) => Some(b.len()),
                                _ => None,
                            },
                            _ => None,
                        })
                        .sum();
                    // Registration delivered the personal prime and key.
                    let personal = cake_core::messages::WRAPPED_PAIR_BYTES;
                    r.cells.push(Cell::versus("join_key_bytes", (welcome + personal) as f64, cf::cake_join_keys()));
                    r.cells.push(Cell::measured("unicast_bytes", uni.measure() as f64));
                    r.cells.push(Cell::measured("broadcast_bytes", bc.measure() as f64));
                }
                measure_cake(&mut w, r, &[uni, bc])?;
                let keys = held_keys(&w, joiner, gid);
                r.check(SECRECY_CHECK, !probes.iter().any(|pr| reads_probe(&keys, pr)));
            }
            r.cells.insert(0, Cell::versus("messages", r.messages as f64, 2.0 * p as f64));
            r.check("members_in_sync", in_sync(&w, gid));
        }
        Scenario::MassJoin => {
            if p > MAX_LOCK_ELEMENTS {
                return Err(BenchError::CapacityExceeded(p, Scheme::Cake));
            }
            let (mut w, gid) = cake_group(seed, n, p, true)?;
            let pr = probe(&w.gc().group(gid).expect("group").gtek);
            let joiners = ids(n + 1, p);
            let outs = w.gc_mut().mass_join(gid, &joiners, MassJoinMode::Lock)?;
            let first = outs.first().map(Outgoing::measure).unwrap_or_default();
            measure_cake(&mut w, r, &outs)?;
            r.cells.push(Cell::versus("messages", r.messages as f64, 2.0));
            r.cells.push(Cell::versus("joiner_message_bytes", first as f64, cf::cake_mass_join(p)));
            r.cells.push(Cell::versus("lock_bytes", r.lock_sizes[0] as f64, cf::crt_size(p)));
            r.cells.push(Cell::measured("total_bytes", r.total_bytes as f64));
            r.notes.push("the joiner lock and the notice to existing members travel as two broadcasts".into());
            let ok = joiners.iter().all(|j| !reads_probe(&held_keys(&w, *j, gid), &pr));
            r.check(SECRECY_CHECK, ok);
            r.check("members_in_sync", in_sync(&w, gid));
        }
        Scenario::KeyDownload => {
            let (mut w, gid) = cake_group(seed, n, 0, false)?;
            let out = w.gc_mut().distribute_tree(gid)?;
            let subs = substructures(&out).len();
            let lock_total: usize = substructures(&out).iter().map(|(_, _, s)| s.crt.len() + s.m_blob.len()).sum();
            let before = measure_cake(&mut w, r, std::slice::from_ref(&out))?;
            let header = r.total_bytes as usize - lock_total;
            r.cells.push(Cell::versus("messages", r.messages as f64, 1.0));
            r.cells.push(Cell::measured("substructures", subs as f64));
            r.cells.push(Cell::versus("header_bytes", header as f64, cf::cake_key_download_header(n)));
            r.cells.push(Cell::versus("total_bytes", r.total_bytes as f64, cf::cake_key_download_total(n)));
            let g = w.gc().group(gid).expect("group");
            let mut max_solves = 0;
            let mut ok = true;
            for (m, leaf) in g.tree.members() {
                let (s, _) = client_delta(&w, &before, *m);
                max_solves = max_solves.max(s);
                ok &= s <= u64::from(leaf.depth());
                let v = w.client(*m).and_then(|c| c.view(gid));
                ok &= v.is_some_and(|v| {
                    leaf.path_to_root()
                        .unwrap_or_default()
                        .into_iter()
                        .filter(|a| *a != cake_core::key_tree::TreeAddress::ROOT)
                        .all(|a| v.path_keys.get(&a) == g.tree.get(a).map(|node| &node.pair))
                });
            }
            r.cells.push(Cell::measured("max_client_solves", max_solves as f64));
            r.check("clients_hold_full_path", ok);
            r.check("members_in_sync", in_sync(&w, gid));
        }
        Scenario::Leave => {
            if p >= n {
                return Err(BenchError::InvalidSpec("leave needs p < n".into()));
            }
            let (mut w, gid) = cake_group(seed, n, 0, true)?;
            let leavers = pick(seed, n, p);
            let old_tek = w.gc().group(gid).expect("group").gtek;
            let stolen = held(&w, &leavers);
            let gc_before = w.gc().counters();
            let out = w
                .gc_mut()
                .leave(gid, &leavers, LeaveMode::Fast)?
                .ok_or_else(|| BenchError::InvalidSpec("group dissolved".into()))?;
            let siblings = (w.gc().counters().lock_elements - gc_before.lock_elements) as usize;
            r.check(SECRECY_CHECK, openings(&out, &stolen) == 0);
            let lock_bytes: usize = substructures(&out).iter().map(|(_, _, s)| s.crt.len()).sum();
            let before = measure_cake(&mut w, r, std::slice::from_ref(&out))?;
            let tek = r.payload_bytes.get("tek").copied().unwrap_or_default() as usize;
            let wrapped_tek = tek.saturating_sub(cake_core::messages::KD_HEADER_BYTES);
            let header = r.total_bytes as usize - lock_bytes - wrapped_tek;
            r.cells.push(Cell::versus("messages", r.messages as f64, 1.0));
            if p == 1 {
                let k = cf::cake_leave_siblings(n);
                r.cells.push(Cell::versus("siblings", siblings as f64, k as f64));
                r.cells.push(Cell::versus("lock_bytes", lock_bytes as f64, cf::crt_size(k)));
                r.cells.push(Cell::versus("header_bytes", header as f64, cf::cake_leave_header(n)));
                r.cells.push(Cell::versus("wrapped_tek_bytes", wrapped_tek as f64, cf::KEY));
                r.cells.push(Cell::versus("total_bytes", r.total_bytes as f64, cf::cake_leave_total(n)));
            } else {
                r.cells.push(Cell::measured("siblings", siblings as f64));
                r.cells.push(Cell::measured("lock_bytes", lock_bytes as f64));
                r.cells.push(Cell::measured("total_bytes", r.total_bytes as f64));
            }
            let survivors: Vec<MemberId> = w
                .gc()
                .group(gid)
                .expect("group")
                .tree
                .members()
                .map(|(m, _)| *m)
                .collect();
            let cost_ok = survivors.iter().all(|m| client_delta(&w, &before, *m) == (1, 1));
            r.check("client_one_solve_one_unwrap", cost_ok);
            let g = w.gc().group(gid).expect("group");
            let leavers_out = leavers.iter().all(|m| {
                w.client(*m)
                    .and_then(|c| c.view(gid))
                    .is_none_or(|v| v.gtek != g.gtek && &v.gkek != g.gkek())
            });
            r.check("leavers_excluded", leavers_out && g.gtek != old_tek);
            r.check("members_in_sync", in_sync(&w, gid));
            if let Some(upd) = w.gc_mut().distribute_updates(gid)? {
                let nodes = substructures(&upd).len();
                r.cells.push(Cell::versus(
                    "tree_operation_bytes",
                    upd.measure() as f64,
                    cf::KD_HEADER + nodes as f64 * (cf::crt_size(3) + 3.0 * cf::PRIME),
                ));
                deliver(&mut w, &[upd])?;
                r.check("members_in_sync_after_update", in_sync(&w, gid));
            }
            r.notes.push(
                "header = KD 12 + array 4 + 2 per marked address + 8 per substructure + TEK KD 12".into(),
            );
        }
        Scenario::Merge => {
            let g = p.max(2);
            if n < g {
                return Err(BenchError::InvalidSpec("merge needs at least one member per group".into()));
            }
            if n > MAX_MEMBERS {
                return Err(BenchError::CapacityExceeded(n, Scheme::Cake));
            }
            let mut w = CakeWorld::new(seed);
            w.enroll(&ids(1, n))?;
            let mut gids = Vec::new();
            let mut next = 1;
            for i in 0..g {
                let size = n / g + usize::from(i < n % g);
                if size > MAX_LOCK_ELEMENTS {
                    return Err(BenchError::CapacityExceeded(size, Scheme::Cake));
                }
                let (gid, out) = w.gc_mut().create_group(&ids(next, size))?;
                deliver(&mut w, &[out])?;
                gids.push(gid);
                next += size;
            }
            let (merged, outs) = w.gc_mut().merge(&gids)?;
            measure_cake(&mut w, r, &outs)?;
            r.p = g;
            r.cells.push(Cell::versus("messages", r.messages as f64, g as f64));
            r.cells.push(Cell::measured("total_bytes", r.total_bytes as f64));
            r.check("members_in_sync", in_sync(&w, merged));
        }
        Scenario::Split => {
            let parts_n = p.max(2);
            if n < parts_n {
                return Err(BenchError::InvalidSpec("split needs at least one member per part".into()));
            }
            let (mut w, gid) = cake_group(seed, n, 0, true)?;
            // Contiguous runs of leaves in tree order.
            let order: Vec<MemberId> = {
                let mut v: Vec<_> = w
                    .gc()
                    .group(gid)
                    .expect("group")
                    .tree
                    .members()
                    .map(|(m, a)| (a.code(), *m))
                    .collect();
                v.sort();
                v.into_iter().map(|(_, m)| m).collect()
            };
            let mut parts = Vec::new();
            let mut at = 0;
            for i in 0..parts_n {
                let size = n / parts_n + usize::from(i < n % parts_n);
                parts.push(order[at..at + size].to_vec());
                at += size;
            }
            let res = w.gc_mut().split(gid, &parts)?;
            let mut sealed = true;
            for ((_, out), part) in res.iter().zip(&parts) {
                let outsiders: Vec<MemberId> = order.iter().copied().filter(|m| !part.contains(m)).collect();
                sealed &= openings(out, &held(&w, &outsiders)) == 0;
            }
            r.check(SECRECY_CHECK, sealed);
            let outs: Vec<Outgoing> = res.iter().map(|(_, o)| o.clone()).collect();
            measure_cake(&mut w, r, &outs)?;
            r.p = parts_n;
            r.cells.push(Cell::versus("messages", r.messages as f64, parts_n as f64));
            r.cells.push(Cell::measured("total_bytes", r.total_bytes as f64));
            r.check("members_in_sync", res.iter().all(|(g, _)| in_sync(&w, *g)));
        }
        Scenario::Rekey => {
            let (mut w, gid) = cake_group(seed, n, 0, true)?;
            let out = w.gc_mut().rekey(gid, RekeyMode::Fresh)?;
            let fresh = out.measure();
            measure_cake(&mut w, r, &[out])?;
            r.check("members_in_sync", in_sync(&w, gid));
            let out = w.gc_mut().rekey(gid, RekeyMode::Derive)?;
            let derive = out.measure();
            measure_cake(&mut w, r, &[out])?;
            r.cells.push(Cell::versus("messages", r.messages as f64, 2.0));
            r.cells.push(Cell::versus("fresh_rekey_bytes", fresh as f64, cf::KD_HEADER + 2.0 * cf::KEY));
            r.cells.push(Cell::measured("derive_notice_bytes", derive as f64));
            r.check("members_in_sync_after_derive", in_sync(&w, gid));
        }
    }
    Ok(())
}

// ---- GKMP ----

fn gkmp(spec: &ScenarioSpec, r: &mut Report) -> Result<(), BenchError> {
    let (n, p) = (spec.n, spec.p);
    let mut gc = GkmpController::new(spec.seed);
    let mut members: Vec<GkmpMember> = ids(1, n).into_iter().map(|m| gc.register(m)).collect::<Result<_, _>>()?;
    let unicasts = |gc_msgs: Vec<(MemberId, Vec<u8>)>, members: &mut [GkmpMember], r: &mut Report| {
        for (to, bytes) in &gc_msgs {
            r.messages += 1;
            r.unicasts += 1;
            r.total_bytes += bytes.len() as u64;
            *r.payload_bytes.entry("group_keys".into()).or_default() += bytes.len() as u64;
            if let Some(m) = members.iter_mut().find(|m| m.id == *to) {
                m.process_unicast(bytes);
            }
        }
        gc_msgs.len()
    };
    let synced = |gc: &GkmpController, members: &[GkmpMember]| {
        members
            .iter()
            .all(|m| m.gkek.as_ref() == Some(&gc.gkek) && m.gtek.as_ref() == Some(&gc.gtek))
    };
    match spec.scenario {
        Scenario::Create | Scenario::KeyDownload => {
            let msgs = gc.rekey_unicast();
            unicasts(msgs, &mut members, r);
            r.cells.push(Cell::versus("messages", r.messages as f64, n as f64));
            r.cells.push(Cell::versus("total_bytes", r.total_bytes as f64, cf::gkmp_unicast(n)));
            r.check("members_in_sync", synced(&gc, &members));
        }
        Scenario::Join | Scenario::MassJoin => {
            let init = gc.rekey_unicast();
            unicasts(init, &mut members, r);
            r.messages = 0;
            r.unicasts = 0;
            r.total_bytes = 0;
            r.payload_bytes.clear();
            let old = gc.gtek;
            let count = if spec.scenario == Scenario::Join { 1 } else { p };
            for id in ids(n + 1, count) {
                members.push(gc.register(id)?);
            }
            let msgs = gc.rekey_unicast();
            unicasts(msgs, &mut members, r);
            r.cells.push(Cell::versus("messages", r.messages as f64, count as f64));
            r.cells.push(Cell::versus("total_bytes", r.total_bytes as f64, cf::gkmp_unicast(count)));
            r.cells.push(Cell::versus("join_key_bytes", 3.0 * cf::KEY, 3.0 * cf::KEY));
            r.notes.push("existing members are rekeyed as well, so joiners cannot read earlier traffic".into());
            r.check(SECRECY_CHECK, members.iter().all(|m| m.gtek.as_ref() != Some(&old)));
            r.check("members_in_sync", synced(&gc, &members));
        }
        Scenario::Leave => {
            if p >= n {
                return Err(BenchError::InvalidSpec("leave needs p < n".into()));
            }
            let init = gc.rekey_unicast();
            unicasts(init, &mut members, r);
            r.messages = 0;
            r.unicasts = 0;
            r.total_bytes = 0;
            r.payload_bytes.clear();
            let leavers = pick(spec.seed, n, p);
            let mut gone = Vec::new();
            for l in &leavers {
                let msgs = gc.leave(*l)?;
                let pos = members.iter().position(|m| m.id == *l).expect("member");
                gone.push(members.remove(pos));
                unicasts(msgs, &mut members, r);
            }
            let expect: usize = (0..p).map(|i| n - 1 - i).sum();
            r.cells.push(Cell::versus("messages", r.messages as f64, expect as f64));
            r.cells.push(Cell::versus("total_bytes", r.total_bytes as f64, cf::gkmp_unicast(expect)));
            r.check(SECRECY_CHECK, gone.iter().all(|m| m.gtek.as_ref() != Some(&gc.gtek)));
            r.check("members_in_sync", synced(&gc, &members));
        }
        Scenario::Rekey => {
            let msgs = gc.rekey_unicast();
            let per = msgs.iter().all(|(_, b)| b.len() == cake_core::baselines::GKMP_UNICAST_BYTES);
            unicasts(msgs, &mut members, r);
            r.cells.push(Cell::versus("unicast_messages", r.messages as f64, n as f64));
            r.cells.push(Cell::versus("unicast_bytes", r.total_bytes as f64, cf::gkmp_unicast(n)));
            r.check("unicast_44_bytes_each", per);
            r.check("members_in_sync", synced(&gc, &members));
            let b = gc.rekey_broadcast();
            for m in &mut members {
                m.process_broadcast(&b);
            }
            r.messages += 1;
            r.broadcasts += 1;
            r.total_bytes += b.len() as u64;
            *r.payload_bytes.entry("broadcast_rekey".into()).or_default() += b.len() as u64;
            r.cells.push(Cell::versus("broadcast_messages", 1.0, 1.0));
            r.cells.push(Cell::versus("broadcast_bytes", b.len() as f64, cf::gkmp_broadcast(n)));
            r.check("members_in_sync_after_broadcast", synced(&gc, &members));
        }
        Scenario::Merge | Scenario::Split => return Err(BenchError::Unsupported(Scheme::Gkmp, spec.scenario)),
    }
    Ok(())
}

// ---- LKH ----

fn lkh_levels(n: usize) -> Result<u32, BenchError> {
    let levels = (cf::log2_ceil(n) + 1).max(2) as u32;
    if levels > LKH_MAX_LEVELS {
        return Err(BenchError::CapacityExceeded(n, Scheme::Lkh));
    }
    Ok(levels)
}

fn lkh_send(r: &mut Report, kind: &str, bytes: &[u8], members: &mut [LkhMember]) {
    r.messages += 1;
    r.broadcasts += 1;
    r.total_bytes += bytes.len() as u64;
    *r.payload_bytes.entry(kind.into()).or_default() += bytes.len() as u64;
    for m in members {
        m.process(bytes);
    }
}

fn lkh(spec: &ScenarioSpec, r: &mut Report) -> Result<(), BenchError> {
    let (n, p) = (spec.n, spec.p);
    let extra = match spec.scenario {
        Scenario::Join => 1,
        Scenario::MassJoin => p,
        _ => 0,
    };
    let levels = lkh_levels(n + extra)?;
    let mut tree = LkhTree::new(levels, spec.seed)?;
    let mut members = tree.populate(&ids(1, n))?;
    let synced = |tree: &LkhTree, members: &[LkhMember]| members.iter().all(|m| m.group_key() == Some(tree.group_key()));
    r.notes.push(format!("binary tree with {levels} levels, capacity {}", tree.capacity()));
    match spec.scenario {
        Scenario::Create | Scenario::KeyDownload => {
            let b = tree.key_download();
            r.messages = 1;
            r.broadcasts = 1;
            r.total_bytes = b.len() as u64;
            r.payload_bytes.insert("key_download".into(), b.len() as u64);
            r.cells.push(Cell::versus("messages", 1.0, 1.0));
            r.cells.push(Cell::versus("total_bytes", b.len() as f64, cf::lkh_key_download(n)));
        }
        Scenario::Join | Scenario::MassJoin => {
            let old = *tree.group_key();
            let count = extra;
            for id in ids(n + 1, count) {
                let (mut joiner, uni, bc) = tree.join(id)?;
                let ub = uni.encode();
                r.messages += 1;
                r.unicasts += 1;
                r.total_bytes += ub.len() as u64;
                *r.payload_bytes.entry("join_unicast".into()).or_default() += ub.len() as u64;
                joiner.process(&ub);
                lkh_send(r, "join_broadcast", &bc.encode(), &mut members);
                r.check(SECRECY_CHECK, !joiner.keys.values().any(|k| *k == old));
                members.push(joiner);
            }
            r.cells.push(Cell::versus("messages", r.messages as f64, count as f64));
            r.cells.push(Cell::measured("total_bytes", r.total_bytes as f64));
            r.notes.push("each join sends the joiner its path and a broadcast to the old members".into());
            r.check("members_in_sync", synced(&tree, &members));
        }
        Scenario::Leave => {
            if p >= n {
                return Err(BenchError::InvalidSpec("leave needs p < n".into()));
            }
            let leavers = pick(spec.seed, n, p);
            let mut gone = Vec::new();
            let mut arrays_n = 0;
            let mut optimized = 0;
            for l in &leavers {
                let pos = members.iter().position(|m| m.id == *l).expect("member");
                gone.push(members.remove(pos));
                // The optimized figure is measured on a copy of the tree state.
                optimized = {
                    let mut t = LkhTree::new(levels, spec.seed)?;
                    let ids_left: Vec<MemberId> = members.iter().map(|m| m.id).chain(std::iter::once(*l)).collect();
                    let _ = t.populate(&ids_left)?;
                    t.leave(*l, true)?.iter().map(|a| a.measure()).sum::<usize>()
                };
                let arrays = tree.leave(*l, false)?;
                arrays_n += arrays.len();
                for a in &arrays {
                    let b = a.encode();
                    lkh_send(r, "update_array", &b, &mut members);
                    for g in &mut gone {
                        g.process(&b);
                    }
                }
            }
            let max_dec = members.iter().map(|m| m.decrypts).max().unwrap_or(0);
            r.cells.push(Cell::versus("arrays", arrays_n as f64, cf::log2_ceil(n).saturating_sub(1) as f64));
            r.cells.push(Cell::versus("total_bytes", r.total_bytes as f64, cf::lkh_leave(n)));
            r.cells.push(Cell::versus("total_bytes_column_formula", r.total_bytes as f64, cf::lkh_leave_table(n)));
            if p == 1 {
                r.cells.push(Cell::versus("optimized_bytes", optimized as f64, cf::lkh_leave_optimized(n)));
            }
            r.cells.push(Cell::measured("max_client_decrypts", max_dec as f64));
            r.notes.push("arrays go out shortest first; the leaver's sibling decrypts the most keys".into());
            r.check(SECRECY_CHECK, gone.iter().all(|g| g.group_key() != Some(tree.group_key())));
            r.check("members_in_sync", synced(&tree, &members));
        }
        Scenario::Rekey | Scenario::Merge | Scenario::Split => {
            return Err(BenchError::Unsupported(Scheme::Lkh, spec.scenario))
        }
    }
    Ok(())
}
