//! Symmetric primitives: XOR key wrapping, hash-chained key derivation and the
//! Diffie-Hellman agreement used during registration.

use std::fmt;
use std::sync::OnceLock;

use num_bigint::BigUint;
use num_traits::One;
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crt_lock::Modulus;

pub const KEY_BYTES: usize = 16;
/// Longest byte string [`wrap`] accepts; fits a serialized key pair.
pub const MAX_WRAP_LEN: usize = 64;
/// Size of a serialized Diffie-Hellman public value.
pub const DH_PUBLIC_BYTES: usize = 256;
const DH_SECRET_BYTES: usize = 32;

// 2048-bit MODP group (RFC 3526 group 14), generator 2.
const MODP_2048_HEX: &str = concat!(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD1",
    "29024E088A67CC74020BBEA63B139B22514A08798E3404DD",
    "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245",
    "E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED",
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3D",
    "C2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F",
    "83655D23DCA3AD961C62F356208552BB9ED529077096966D",
    "670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B",
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9",
    "DE2BCBF6955817183995497CEA956AE515D2261898FA0510",
    "15728E5A8AACAA68FFFFFFFFFFFFFFFF",
);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("payload of {0} bytes exceeds the wrap limit")]
    PayloadTooLong(usize),
    #[error("malformed Diffie-Hellman public value")]
    MalformedPublicValue,
    #[error("unknown key wrap algorithm {0}")]
    UnknownAlgorithm(u16),
}

/// A 16-byte symmetric key (GTEK, GKEK, node or personal key).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SymKey([u8; KEY_BYTES]);

impl SymKey {
    pub fn from_bytes(bytes: [u8; KEY_BYTES]) -> Self {
        SymKey(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(SymKey)
    }

    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut k = [0u8; KEY_BYTES];
        rng.fill_bytes(&mut k);
        SymKey(k)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_BYTES] {
        &self.0
    }
}

impl fmt::Debug for SymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Only a short fingerprint; never the key itself.
        let d = Sha256::digest(self.0);
        write!(f, "SymKey({:02x}{:02x}{:02x}{:02x})", d[0], d[1], d[2], d[3])
    }
}

/// A node or member secret: a CRT modulus and its symmetric key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPair {
    pub m: Modulus,
    pub key: SymKey,
}

impl KeyPair {
    pub fn new(m: Modulus, key: SymKey) -> Self {
        KeyPair { m, key }
    }

    /// Modulus bytes followed by the key.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.m.to_bytes();
        out.extend_from_slice(self.key.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() <= KEY_BYTES {
            return None;
        }
        let (m, k) = bytes.split_at(bytes.len() - KEY_BYTES);
        Some(KeyPair {
            m: Modulus::from_bytes(m),
            key: SymKey::from_slice(k)?,
        })
    }
}

/// XORs `data` with the keystream `H(key || context || ctr)` for ctr = 0, 1, ...
pub fn keystream_xor(key: &SymKey, context: &[u8], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len());
    for (ctr, chunk) in data.chunks(32).enumerate() {
        let mut h = Sha256::new();
        h.update(key.0);
        h.update(context);
        h.update((ctr as u32).to_be_bytes());
        let block = h.finalize();
        out.extend(chunk.iter().zip(block.iter()).map(|(a, b)| a ^ b));
    }
    out
}

/// XOR-wraps `payload` under `key`. Applying it twice restores the payload.
pub fn wrap(key: &SymKey, payload: &[u8]) -> Result<Vec<u8>, CryptoError> {
    wrap_in_context(key, &[], payload)
}

/// [`wrap`] with a context string mixed into the keystream so one key can seal
/// many messages without keystream reuse.
pub fn wrap_in_context(key: &SymKey, context: &[u8], payload: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if payload.len() > MAX_WRAP_LEN {
        return Err(CryptoError::PayloadTooLong(payload.len()));
    }
    Ok(keystream_xor(key, context, payload))
}

/// Next key in the hash chain: the first 16 bytes of `H(key)`.
pub fn derive_next(key: &SymKey) -> SymKey {
    let d = Sha256::digest(key.0);
    let mut k = [0u8; KEY_BYTES];
    k.copy_from_slice(&d[..KEY_BYTES]);
    SymKey(k)
}

pub(crate) fn slot_tag(content: &[u8]) -> [u8; 8] {
    let mut h = Sha256::new();
    h.update(b"cake-slot-tag");
    h.update(content);
    let d = h.finalize();
    let mut t = [0u8; 8];
    t.copy_from_slice(&d[..8]);
    t
}

/// Pluggable key wrapping. Only the XOR wrap is built in.
pub trait KeyWrapAlgorithm {
    fn id(&self) -> u16;
    fn wrap(&self, key: &SymKey, context: &[u8], payload: &[u8]) -> Result<Vec<u8>, CryptoError>;
    fn unwrap(&self, key: &SymKey, context: &[u8], wrapped: &[u8]) -> Result<Vec<u8>, CryptoError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct XorWrap;

impl XorWrap {
    pub const ID: u16 = 1;
}

impl KeyWrapAlgorithm for XorWrap {
    fn id(&self) -> u16 {
        Self::ID
    }

    fn wrap(&self, key: &SymKey, context: &[u8], payload: &[u8]) -> Result<Vec<u8>, CryptoError> {
        wrap_in_context(key, context, payload)
    }

    fn unwrap(&self, key: &SymKey, context: &[u8], wrapped: &[u8]) -> Result<Vec<u8>, CryptoError> {
        wrap_in_context(key, context, wrapped)
    }
}

/// Looks up a wrapping algorithm by its policy id.
pub fn wrap_algorithm(id: u16) -> Result<&'static dyn KeyWrapAlgorithm, CryptoError> {
    static XOR: XorWrap = XorWrap;
    match id {
        XorWrap::ID => Ok(&XOR),
        other => Err(CryptoError::UnknownAlgorithm(other)),
    }
}

fn modp_prime() -> &'static BigUint {
    static P: OnceLock<BigUint> = OnceLock::new();
    P.get_or_init(|| BigUint::parse_bytes(MODP_2048_HEX.as_bytes(), 16).expect("valid hex"))
}

/// The fixed Diffie-Hellman modulus.
pub fn dh_prime() -> &'static BigUint {
    modp_prime()
}

/// An ephemeral Diffie-Hellman key in the fixed 2048-bit group.
#[derive(Clone)]
pub struct DhKeyPair {
    secret: BigUint,
    public: BigUint,
}

impl fmt::Debug for DhKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DhKeyPair").finish_non_exhaustive()
    }
}

impl DhKeyPair {
    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut buf = [0u8; DH_SECRET_BYTES];
        rng.fill_bytes(&mut buf);
        buf[0] |= 0x80;
        let secret = BigUint::from_bytes_be(&buf);
        let public = BigUint::from(2u32).modpow(&secret, modp_prime());
        DhKeyPair { secret, public }
    }

    pub fn public_bytes(&self) -> Vec<u8> {
        let raw = self.public.to_bytes_be();
        let mut out = vec![0u8; DH_PUBLIC_BYTES - raw.len()];
        out.extend_from_slice(&raw);
        out
    }

    /// Shared session key from the peer's public value.
    pub fn agree(&self, peer_public: &[u8]) -> Result<SymKey, CryptoError> {
        let p = modp_prime();
        if peer_public.len() != DH_PUBLIC_BYTES {
            return Err(CryptoError::MalformedPublicValue);
        }
        let y = BigUint::from_bytes_be(peer_public);
        let p_minus_1 = p - BigUint::one();
        // Rejects 0, the identity 1, the order-2 element p-1 and out-of-range values.
        if y <= BigUint::one() || y >= p_minus_1 {
            return Err(CryptoError::MalformedPublicValue);
        }
        let shared = y.modpow(&self.secret, p);
        let raw = shared.to_bytes_be();
        let mut h = Sha256::new();
        h.update(b"cake-session");
        h.update(vec![0u8; DH_PUBLIC_BYTES - raw.len()]);
        h.update(&raw);
        let d = h.finalize();
        let mut k = [0u8; KEY_BYTES];
        k.copy_from_slice(&d[..KEY_BYTES]);
        Ok(SymKey(k))
    }
}

/// Server side of the registration agreement.
pub fn initial_key_agreement(client_public: &[u8], server: &DhKeyPair) -> Result<SymKey, CryptoError> {
    server.agree(client_public)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crt_lock::is_probable_prime;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn modp_prime_is_a_safe_prime() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let p = dh_prime();
        assert_eq!(p.bits(), 2048);
        assert!(is_probable_prime(p, 8, &mut rng));
        let q = (p - 1u32) >> 1u32;
        assert!(is_probable_prime(&q, 8, &mut rng));
    }

    #[test]
    fn wrap_of_zero_payload_is_the_keystream() {
        let key = SymKey::from_bytes([7u8; 16]);
        let ks = wrap(&key, &[0u8; 40]).unwrap();
        let mut h = Sha256::new();
        h.update(key.as_bytes());
        h.update(0u32.to_be_bytes());
        assert_eq!(&ks[..32], &h.finalize()[..]);
        let mut h = Sha256::new();
        h.update(key.as_bytes());
        h.update(1u32.to_be_bytes());
        assert_eq!(&ks[32..], &h.finalize()[..8]);
    }

    #[test]
    fn wrap_rejects_long_payloads() {
        let key = SymKey::from_bytes([1u8; 16]);
        assert_eq!(
            wrap(&key, &[0u8; MAX_WRAP_LEN + 1]),
            Err(CryptoError::PayloadTooLong(MAX_WRAP_LEN + 1))
        );
    }

    #[test]
    fn derive_chains_agree() {
        let start = SymKey::from_bytes([3u8; 16]);
        let gc = derive_next(&derive_next(&derive_next(&start)));
        let client = (0..3).fold(start, |k, _| derive_next(&k));
        assert_eq!(gc, client);
        assert_eq!(derive_next(&start), derive_next(&start));
    }

    #[test]
    fn dh_rejects_degenerate_publics() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let server = DhKeyPair::generate(&mut rng);
        let mut one = vec![0u8; DH_PUBLIC_BYTES];
        one[DH_PUBLIC_BYTES - 1] = 1;
        assert_eq!(
            initial_key_agreement(&one, &server),
            Err(CryptoError::MalformedPublicValue)
        );
        let zero = vec![0u8; DH_PUBLIC_BYTES];
        assert_eq!(server.agree(&zero), Err(CryptoError::MalformedPublicValue));
        let p_minus_1 = (dh_prime() - 1u32).to_bytes_be();
        assert_eq!(server.agree(&p_minus_1), Err(CryptoError::MalformedPublicValue));
        assert_eq!(server.agree(&[2u8; 10]), Err(CryptoError::MalformedPublicValue));
    }

    #[test]
    fn dh_sessions_agree_and_differ() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..100 {
            let client = DhKeyPair::generate(&mut rng);
            let server = DhKeyPair::generate(&mut rng);
            let k_server = initial_key_agreement(&client.public_bytes(), &server).unwrap();
            let k_client = client.agree(&server.public_bytes()).unwrap();
            assert_eq!(k_server, k_client);
            assert!(seen.insert(k_client));
        }
    }

    #[test]
    fn registry_has_xor_only() {
        let alg = wrap_algorithm(XorWrap::ID).unwrap();
        let key = SymKey::from_bytes([2u8; 16]);
        let w = alg.wrap(&key, b"ctx", b"abc").unwrap();
        assert_eq!(alg.unwrap(&key, b"ctx", &w).unwrap(), b"abc");
        assert!(wrap_algorithm(99).is_err());
    }

    #[test]
    fn key_pair_bytes_round_trip() {
        let m = Modulus::from_biguint(BigUint::from(0xdead_beefu64));
        let kp = KeyPair::new(m, SymKey::from_bytes([4u8; 16]));
        assert_eq!(KeyPair::from_bytes(&kp.to_bytes()).unwrap(), kp);
    }

    proptest! {
        #[test]
        fn wrap_is_an_involution(key in any::<[u8; 16]>(), payload in proptest::collection::vec(any::<u8>(), 0..=MAX_WRAP_LEN)) {
            let key = SymKey::from_bytes(key);
            let once = wrap(&key, &payload).unwrap();
            prop_assert_eq!(once.len(), payload.len());
            prop_assert_eq!(wrap(&key, &once).unwrap(), payload);
        }

        #[test]
        fn distinct_keys_wrap_differently(k1 in any::<[u8; 16]>(), k2 in any::<[u8; 16]>(), payload in proptest::collection::vec(any::<u8>(), 8..=MAX_WRAP_LEN)) {
            prop_assume!(k1 != k2);
            let a = wrap(&SymKey::from_bytes(k1), &payload).unwrap();
            let b = wrap(&SymKey::from_bytes(k2), &payload).unwrap();
            prop_assert_ne!(a, b);
        }

        #[test]
        fn derive_next_moves(key in any::<[u8; 16]>()) {
            let k = SymKey::from_bytes(key);
            prop_assert_ne!(derive_next(&k), k);
        }
    }
}
