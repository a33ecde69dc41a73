//! Published closed-form byte counts that the measured runs are compared against.

/// Reference serialized lock sizes for 1..=14 elements.
pub const LOCK_SIZES: [usize; 14] = [41, 84, 124, 165, 206, 247, 288, 328, 369, 410, 451, 492, 533, 573];

pub const KD_HEADER: f64 = 12.0;
pub const KEY: f64 = 16.0;
/// Per-prime size used by the reference formulas.
pub const PRIME: f64 = 17.0;

/// Reference lock size; beyond the table the 41-byte step is extrapolated.
pub fn crt_size(elements: usize) -> f64 {
    match elements {
        0 => 0.0,
        1..=14 => LOCK_SIZES[elements - 1] as f64,
        _ => 41.0 * elements as f64,
    }
}

pub fn log3_ceil(n: usize) -> usize {
    let mut d = 0;
    let mut cap = 1usize;
    while cap < n {
        cap *= 3;
        d += 1;
    }
    d
}

pub fn log2_ceil(n: usize) -> usize {
    n.max(1).next_power_of_two().trailing_zeros() as usize
}

/// Sibling count for a leave from a full ternary tree of `n` leaves, `log3(n^2)`.
pub fn cake_leave_siblings(n: usize) -> usize {
    2 * log3_ceil(n)
}

pub fn cake_leave_header(n: usize) -> f64 {
    KD_HEADER + 8.0 * cake_leave_siblings(n) as f64
}

pub fn cake_leave_total(n: usize) -> f64 {
    cake_leave_header(n) + KEY + crt_size(cake_leave_siblings(n))
}

pub fn cake_join_keys() -> f64 {
    2.0 * KEY + PRIME + KEY
}

pub fn cake_mass_join(p: usize) -> f64 {
    16.0 + KEY + crt_size(p)
}

pub fn cake_key_download_header(n: usize) -> f64 {
    4.0 + 12.0 * n as f64
}

pub fn cake_key_download_total(n: usize) -> f64 {
    let levels = (n.max(1) as f64).log(3.0) - 1.0;
    cake_key_download_header(n) + levels * crt_size(3) + levels * 3.0 * PRIME
}

/// One restructured node: header, a 3-element lock and three primes.
pub fn cake_tree_operation() -> f64 {
    4.0 + 8.0 + crt_size(3) + 3.0 * PRIME
}

pub fn gkmp_unicast(n: usize) -> f64 {
    (KD_HEADER + 2.0 * KEY) * n as f64
}

pub fn gkmp_broadcast(n: usize) -> f64 {
    40.0 * n as f64 + 40.0
}

/// Unoptimized LKH leave with `log2(n) - 1` changed keys: sum of `16i + 8i + 8`.
pub fn lkh_leave(n: usize) -> f64 {
    let k = log2_ceil(n).saturating_sub(1);
    (1..=k).map(|i| 24.0 * i as f64 + 8.0).sum()
}

/// Single-array LKH leave: every changed key once plus its second wrapping.
pub fn lkh_leave_optimized(n: usize) -> f64 {
    let k = log2_ceil(n).saturating_sub(1);
    8.0 + 24.0 * (2 * k).saturating_sub(1) as f64
}

/// The per-column variant: `4 + log2(n)*8 + sum(i*8)` header plus `sum(i*16)` keys.
pub fn lkh_leave_table(n: usize) -> f64 {
    let l = log2_ceil(n);
    let s: f64 = (1..l).map(|i| i as f64).sum();
    4.0 + 8.0 * l as f64 + 8.0 * s + 16.0 * s
}

pub fn lkh_key_download(n: usize) -> f64 {
    4.0 + 28.0 * n.saturating_sub(1) as f64
}
