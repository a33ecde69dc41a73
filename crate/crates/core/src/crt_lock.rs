//! Chinese Remainder Theorem lock construction.
//!
//! A lock is a single integer `X` with `X mod m_i = r_i` for every recipient
//! modulus `m_i`. Each residue `r_i` is the recipient's sealed payload slot, so a
//! recipient recovers its share with one modulo reduction and one unwrap.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;
use thiserror::Error;

use crate::crypto_prims::{self, SymKey};

/// Bit length of every modulus issued by the group controller.
pub const MODULUS_BITS: u64 = 328;
/// Serialized width of one modulus.
pub const MODULUS_BYTES: usize = 41;
/// Payload bytes carried in one lock slot.
pub const SLOT_PAYLOAD_BYTES: usize = 32;
/// Truncated-hash tag appended to every slot payload.
pub const SLOT_TAG_BYTES: usize = 8;
/// Payload plus tag; the sealed residue is read as a big-endian integer of this width.
pub const SLOT_BYTES: usize = SLOT_PAYLOAD_BYTES + SLOT_TAG_BYTES;
/// Moduli need one spare byte above the slot so every residue is below its modulus.
pub const MIN_MODULUS_BITS: u64 = (SLOT_BYTES as u64) * 8 + 8;
/// Miller-Rabin rounds; 4^-40 = 2^-80 error bound.
pub const PRIMALITY_ROUNDS: usize = 40;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CrtError {
    #[error("value is not coprime to the modulus")]
    NotCoprime,
    #[error("moduli {0} and {1} are not coprime")]
    NotPairwiseCoprime(usize, usize),
    #[error("residue {0} is not below its modulus")]
    ResidueOutOfRange(usize),
    #[error("a lock needs at least one entry")]
    EmptyEntries,
    #[error("modulus of {bits} bits is below the {min}-bit minimum")]
    ModulusTooSmall { bits: u64, min: u64 },
    #[error("entropy source failed")]
    EntropyFailure,
    #[error("slot payload of {0} bytes exceeds the slot")]
    SlotOverflow(usize),
}

/// A prime modulus `m_i` of a CRT congruence.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Modulus(BigUint);

impl Modulus {
    /// Wraps a value without checking primality. Used for decoded wire values and tests.
    pub fn from_biguint(value: BigUint) -> Self {
        Modulus(value)
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn bits(&self) -> u64 {
        self.0.bits()
    }

    /// Big-endian bytes, left padded to [`MODULUS_BYTES`] when the value fits.
    pub fn to_bytes(&self) -> Vec<u8> {
        to_fixed_width(&self.0, MODULUS_BYTES.max(byte_len(&self.0)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Modulus(BigUint::from_bytes_be(bytes))
    }
}

/// A Lock MX: one integer holding a residue per recipient.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LockMx {
    value: BigUint,
    /// Number of congruences; unknown for locks decoded from the wire.
    element_count: Option<usize>,
    /// Serialized width, `ceil(bitlen(product of moduli) / 8)`.
    width: usize,
}

impl LockMx {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn element_count(&self) -> Option<usize> {
        self.element_count
    }

    /// Serialized size in bytes.
    pub fn byte_len(&self) -> usize {
        self.width
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        to_fixed_width(&self.value, self.width)
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        LockMx {
            value: BigUint::from_bytes_be(bytes),
            element_count: None,
            width: bytes.len(),
        }
    }
}

fn byte_len(v: &BigUint) -> usize {
    (v.bits() as usize).div_ceil(8)
}

fn to_fixed_width(v: &BigUint, width: usize) -> Vec<u8> {
    let raw = if v.is_zero() { Vec::new() } else { v.to_bytes_be() };
    debug_assert!(raw.len() <= width);
    let mut out = vec![0u8; width - raw.len()];
    out.extend_from_slice(&raw);
    out
}

/// Multiplicative inverse of `a` modulo `m`, in `1..m`.
pub fn mod_inverse(a: &BigUint, m: &BigUint) -> Result<BigUint, CrtError> {
    if m.is_zero() {
        return Err(CrtError::NotCoprime);
    }
    let a = BigInt::from_biguint(Sign::Plus, a % m);
    let m_int = BigInt::from_biguint(Sign::Plus, m.clone());
    let ext = a.extended_gcd(&m_int);
    if !ext.gcd.is_one() {
        return Err(CrtError::NotCoprime);
    }
    let y = ext.x.mod_floor(&m_int);
    // m = 1 makes every value congruent; report 1 rather than 0.
    if y.is_zero() {
        return Ok(BigUint::one());
    }
    Ok(y.to_biguint().expect("mod_floor of a positive modulus is non-negative"))
}

/// Builds the unique `X < prod(m_i)` with `X mod m_i = r_i` for every entry.
pub fn build_lock(entries: &[(&Modulus, BigUint)]) -> Result<LockMx, CrtError> {
    if entries.is_empty() {
        return Err(CrtError::EmptyEntries);
    }
    for (i, (m, r)) in entries.iter().enumerate() {
        if r >= &m.0 {
            return Err(CrtError::ResidueOutOfRange(i));
        }
    }
    for i in 0..entries.len() {
        for j in (i + 1)..entries.len() {
            if !entries[i].0 .0.gcd(&entries[j].0 .0).is_one() {
                return Err(CrtError::NotPairwiseCoprime(i, j));
            }
        }
    }

    let product: BigUint = entries.iter().map(|(m, _)| &m.0).product();
    let mut acc = BigUint::zero();
    for (m, r) in entries {
        let cofactor = &product / &m.0;
        let inv = mod_inverse(&(&cofactor % &m.0), &m.0)?;
        // r * inv is reduced first so the large multiply happens once per entry.
        let coeff = (r * inv) % &m.0;
        acc += cofactor * coeff;
    }
    let value = acc % &product;
    Ok(LockMx {
        value,
        element_count: Some(entries.len()),
        width: byte_len(&product),
    })
}

/// Recovers the residue of one recipient: a single reduction `X mod m`.
pub fn solve_lock(lock: &LockMx, m: &Modulus) -> BigUint {
    &lock.value % &m.0
}

/// Context bytes that bind a slot's keystream to one message position.
pub fn slot_context(group: u32, epoch: u32, key_id: u16, purpose: u8) -> [u8; 11] {
    let mut ctx = [0u8; 11];
    ctx[..4].copy_from_slice(&group.to_be_bytes());
    ctx[4..8].copy_from_slice(&epoch.to_be_bytes());
    ctx[8..10].copy_from_slice(&key_id.to_be_bytes());
    ctx[10] = purpose;
    ctx
}

/// Seals `payload` for one recipient key: zero-padded payload, tag, then a
/// context-bound XOR wrap. The result, read as an integer, is below `2^(8*SLOT_BYTES)`.
pub fn seal_slot(key: &SymKey, context: &[u8], payload: &[u8]) -> Result<BigUint, CrtError> {
    if payload.len() > SLOT_PAYLOAD_BYTES {
        return Err(CrtError::SlotOverflow(payload.len()));
    }
    let mut slot = [0u8; SLOT_BYTES];
    slot[..payload.len()].copy_from_slice(payload);
    let tag = crypto_prims::slot_tag(&slot[..SLOT_PAYLOAD_BYTES]);
    slot[SLOT_PAYLOAD_BYTES..].copy_from_slice(&tag);
    let sealed = crypto_prims::keystream_xor(key, context, &slot);
    Ok(BigUint::from_bytes_be(&sealed))
}

/// Inverse of [`seal_slot`]; `None` when the residue does not carry a valid tag,
/// which is what a non-recipient modulus or wrong key produces.
pub fn open_slot(
    key: &SymKey,
    context: &[u8],
    residue: &BigUint,
) -> Option<[u8; SLOT_PAYLOAD_BYTES]> {
    if residue.bits() > (SLOT_BYTES as u64) * 8 {
        return None;
    }
    let sealed = to_fixed_width(residue, SLOT_BYTES);
    let slot = crypto_prims::keystream_xor(key, context, &sealed);
    let tag = crypto_prims::slot_tag(&slot[..SLOT_PAYLOAD_BYTES]);
    if tag[..] != slot[SLOT_PAYLOAD_BYTES..] {
        return None;
    }
    let mut out = [0u8; SLOT_PAYLOAD_BYTES];
    out.copy_from_slice(&slot[..SLOT_PAYLOAD_BYTES]);
    Some(out)
}

fn small_primes() -> &'static [u32] {
    static PRIMES: OnceLock<Vec<u32>> = OnceLock::new();
    PRIMES.get_or_init(|| {
        let limit = 2000usize;
        let mut sieve = vec![true; limit];
        sieve[0] = false;
        sieve[1] = false;
        for i in 2..limit {
            if sieve[i] {
                let mut j = i * i;
                while j < limit {
                    sieve[j] = false;
                    j += i;
                }
            }
        }
        (0..limit).filter(|&i| sieve[i]).map(|i| i as u32).collect()
    })
}

fn random_below<R: RngCore + ?Sized>(rng: &mut R, bound: &BigUint) -> BigUint {
    let bytes = byte_len(bound) + 8;
    let mut buf = vec![0u8; bytes];
    rng.fill_bytes(&mut buf);
    BigUint::from_bytes_be(&buf) % bound
}

/// Probabilistic primality with `rounds` random-base Miller-Rabin rounds after
/// trial division by small primes.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for &p in small_primes() {
        let p = BigUint::from(p);
        if n == &p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let one = BigUint::one();
    let n_minus_1 = n - &one;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    let span = n - BigUint::from(3u32);
    'witness: for _ in 0..rounds {
        let a = random_below(rng, &span) + &two;
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Issues distinct primes of a fixed bit length.
#[derive(Debug, Clone)]
pub struct ModulusGenerator {
    bits: u64,
    issued: BTreeSet<BigUint>,
}

impl ModulusGenerator {
    pub fn new(bits: u64) -> Result<Self, CrtError> {
        if bits < MIN_MODULUS_BITS {
            return Err(CrtError::ModulusTooSmall {
                bits,
                min: MIN_MODULUS_BITS,
            });
        }
        Ok(ModulusGenerator {
            bits,
            issued: BTreeSet::new(),
        })
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn issued_count(&self) -> usize {
        self.issued.len()
    }

    pub fn generate<R: RngCore + ?Sized>(&mut self, rng: &mut R) -> Result<Modulus, CrtError> {
        loop {
            let p = random_prime(self.bits, rng)?;
            if self.issued.insert(p.clone()) {
                return Ok(Modulus(p));
            }
        }
    }
}

/// One-shot form of [`ModulusGenerator::generate`] with a fresh issued-set.
pub fn generate_modulus<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> Result<Modulus, CrtError> {
    ModulusGenerator::new(bits)?.generate(rng)
}

fn random_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> Result<BigUint, CrtError> {
    let nbytes = (bits as usize).div_ceil(8);
    let excess = nbytes as u64 * 8 - bits;
    let mut buf = vec![0u8; nbytes];
    loop {
        rng.try_fill_bytes(&mut buf)
            .map_err(|_| CrtError::EntropyFailure)?;
        buf[0] &= 0xffu8 >> excess;
        buf[0] |= 0x80u8 >> excess;
        buf[nbytes - 1] |= 1;
        let mut candidate = BigUint::from_bytes_be(&buf);
        // Walk odd numbers from the random start; restart if the top bit is lost.
        for _ in 0..(bits as usize * 4) {
            if candidate.bits() != bits {
                break;
            }
            if is_probable_prime(&candidate, PRIMALITY_ROUNDS, rng) {
                return Ok(candidate);
            }
            candidate += 2u32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn m(v: u64) -> Modulus {
        Modulus::from_biguint(BigUint::from(v))
    }

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    #[test]
    fn mod_inverse_examples() {
        assert_eq!(mod_inverse(&big(1), &big(7)).unwrap(), big(1));
        assert_eq!(mod_inverse(&big(3), &big(7)).unwrap(), big(5));
        assert_eq!(mod_inverse(&big(4), &big(6)), Err(CrtError::NotCoprime));
    }

    #[test]
    fn mod_inverse_matches_scan() {
        for modulus in 2u64..60 {
            for a in 1..modulus {
                let scan = (1..modulus).find(|y| (a * y) % modulus == 1);
                match (scan, mod_inverse(&big(a), &big(modulus))) {
                    (Some(y), Ok(got)) => assert_eq!(got, big(y)),
                    (None, Err(CrtError::NotCoprime)) => {}
                    (s, g) => panic!("a={a} m={modulus}: scan {s:?} vs {g:?}"),
                }
            }
        }
    }

    #[test]
    fn single_congruence_lock() {
        let five = m(5);
        let lock = build_lock(&[(&five, big(3))]).unwrap();
        assert_eq!(lock.value(), &big(3));
        assert_eq!(lock.element_count(), Some(1));
    }

    #[test]
    fn three_congruence_lock_matches_brute_force() {
        let (a, b, c) = (m(3), m(5), m(7));
        let lock = build_lock(&[(&a, big(2)), (&b, big(3)), (&c, big(2))]).unwrap();
        let brute = (0u64..105)
            .find(|x| x % 3 == 2 && x % 5 == 3 && x % 7 == 2)
            .unwrap();
        assert_eq!(brute, 23);
        assert_eq!(lock.value(), &big(brute));
        assert_eq!(solve_lock(&lock, &b), big(3));
        assert_eq!(solve_lock(&lock, &m(11)), big(1));
        assert_eq!(solve_lock(&LockMx::from_bytes(&[]), &m(13)), big(0));
    }

    #[test]
    fn lock_uniqueness_brute_force() {
        let mods = [m(11), m(13), m(17), m(19)];
        let residues = [4u64, 0, 16, 7];
        let entries: Vec<_> = mods.iter().zip(residues).map(|(m, r)| (m, big(r))).collect();
        let lock = build_lock(&entries).unwrap();
        let product = 11 * 13 * 17 * 19;
        let hits: Vec<u64> = (0..product)
            .filter(|x| [11, 13, 17, 19].iter().zip(residues).all(|(mm, r)| x % mm == r))
            .collect();
        assert_eq!(hits.len(), 1);
        assert_eq!(lock.value(), &big(hits[0]));
    }

    #[test]
    fn build_lock_rejects_bad_input() {
        assert_eq!(build_lock(&[]), Err(CrtError::EmptyEntries));
        let (a, b) = (m(6), m(9));
        assert_eq!(
            build_lock(&[(&a, big(1)), (&b, big(2))]),
            Err(CrtError::NotPairwiseCoprime(0, 1))
        );
        let c = m(7);
        assert_eq!(
            build_lock(&[(&c, big(7))]),
            Err(CrtError::ResidueOutOfRange(0))
        );
    }

    #[test]
    fn generated_modulus_is_prime_of_exact_size() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut gen = ModulusGenerator::new(MODULUS_BITS).unwrap();
        let a = gen.generate(&mut rng).unwrap();
        let b = gen.generate(&mut rng).unwrap();
        assert_eq!(a.bits(), MODULUS_BITS);
        assert_eq!(b.bits(), MODULUS_BITS);
        assert_ne!(a, b);
        assert_eq!(a.to_bytes().len(), MODULUS_BYTES);
        // Fermat check with fixed bases, independent of the random-base path.
        for base in [2u32, 3, 5, 7, 11, 13, 17, 19, 23, 29] {
            let n = a.value();
            assert!(BigUint::from(base).modpow(&(n - 1u32), n).is_one());
        }
    }

    #[test]
    fn undersized_modulus_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert_eq!(
            generate_modulus(8, &mut rng),
            Err(CrtError::ModulusTooSmall {
                bits: 8,
                min: MIN_MODULUS_BITS
            })
        );
    }

    #[test]
    fn primality_on_known_values() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        // 2^127 - 1 is prime; 561 is a Carmichael number.
        let mersenne = (BigUint::one() << 127u32) - 1u32;
        assert!(is_probable_prime(&mersenne, 20, &mut rng));
        assert!(!is_probable_prime(&big(561), 20, &mut rng));
        assert!(!is_probable_prime(&(&mersenne * &mersenne), 20, &mut rng));
        assert!(is_probable_prime(&big(1999), 20, &mut rng));
    }

    #[test]
    fn slot_seal_open_round_trip() {
        let key = SymKey::from_bytes([9u8; 16]);
        let ctx = slot_context(1, 2, 0, 0);
        let sealed = seal_slot(&key, &ctx, b"hello").unwrap();
        assert!(sealed.bits() <= (SLOT_BYTES as u64) * 8);
        let opened = open_slot(&key, &ctx, &sealed).unwrap();
        assert_eq!(&opened[..5], b"hello");
        assert!(opened[5..].iter().all(|&b| b == 0));
        let other = SymKey::from_bytes([8u8; 16]);
        assert!(open_slot(&other, &ctx, &sealed).is_none());
        assert!(open_slot(&key, &slot_context(1, 3, 0, 0), &sealed).is_none());
        assert_eq!(
            seal_slot(&key, &ctx, &[0u8; 33]),
            Err(CrtError::SlotOverflow(33))
        );
    }
}
