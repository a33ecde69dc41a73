//! Wire payloads: KD payloads with their CAKE array bodies, the GSA policy stub and
//! the registration exchange. All integers are big-endian.
//!
//! A message is a plain concatenation of payloads; each payload starts with a kind
//! byte and carries its own length, so `measure` of a message is the sum over its
//! payloads.
//!
//! KD header (12 bytes): `kind | body length (3) | group id (4) | epoch (4)`.

use thiserror::Error;

use crate::crt_lock::LockMx;
use crate::crypto_prims::{DH_PUBLIC_BYTES, KEY_BYTES};
use crate::crt_lock::MODULUS_BYTES;
use crate::key_tree::TreeAddress;
use crate::{GroupId, MemberId};

pub const KD_HEADER_BYTES: usize = 12;
pub const ARRAY_HEADER_BYTES: usize = 4;
pub const KEY_HEADER_BYTES: usize = 8;
pub const POLICY_BYTES: usize = 11;
pub const WRAPPED_PAIR_BYTES: usize = MODULUS_BYTES + KEY_BYTES;
const MAX_BODY: usize = (1 << 24) - 1;

pub const ALG_LKH: u16 = 1;
pub const ALG_CAKE: u16 = 2;

pub mod kind {
    pub const GROUP_KEYS: u8 = 0x01;
    pub const TEK: u8 = 0x02;
    pub const NOTICE: u8 = 0x03;
    pub const LOCK: u8 = 0x04;
    pub const DOWNLOAD: u8 = 0x05;
    pub const UPDATE: u8 = 0x06;
    pub const READDRESS: u8 = 0x07;
    pub const LEAVE: u8 = 0x08;
    pub const WELCOME: u8 = 0x09;
    pub const MERGE_KEYS: u8 = 0x0A;
    pub const SPLIT_LOCK: u8 = 0x0B;
    pub const POLICY: u8 = 0x20;
    pub const REGISTRATION_REQUEST: u8 = 0x30;
    pub const REGISTRATION_RESPONSE: u8 = 0x31;
}

/// Purpose byte mixed into every keystream context so a key never seals two
/// different fields with the same stream.
pub mod purpose {
    pub const LOCK: u8 = 1;
    pub const MODULUS: u8 = 2;
    pub const GROUP_KEYS: u8 = 3;
    pub const TEK: u8 = 4;
    pub const WELCOME: u8 = 5;
    pub const MERGE: u8 = 6;
    pub const REGISTRATION: u8 = 7;
}

/// Keystream context for a field of a message of `group` at `epoch` concerning node `key_id`.
pub fn context(group: GroupId, epoch: u32, key_id: TreeAddress, purpose: u8) -> [u8; 11] {
    crate::crt_lock::slot_context(group.0, epoch, key_id.code(), purpose)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("input ends before the declared length")]
    Truncated,
    #[error("reserved field is not zero")]
    BadReserved,
    #[error("unknown payload kind {0:#04x}")]
    BadKind(u8),
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("count or length {0} does not fit its field")]
    Oversize(usize),
    #[error("invalid {0} field")]
    BadField(&'static str),
}

/// One key pair update: a lock opening the node key for its recipients plus the
/// node modulus wrapped under that key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeysSubstructure {
    pub key_id: TreeAddress,
    pub crt: Vec<u8>,
    pub m_blob: Vec<u8>,
}

impl KeysSubstructure {
    pub fn new(key_id: TreeAddress, lock: &LockMx, m_blob: Vec<u8>) -> Self {
        KeysSubstructure {
            key_id,
            crt: lock.to_bytes(),
            m_blob,
        }
    }

    pub fn lock(&self) -> LockMx {
        LockMx::from_bytes(&self.crt)
    }

    pub fn measure(&self) -> usize {
        KEY_HEADER_BYTES + self.crt.len() + self.m_blob.len()
    }

    fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), CodecError> {
        out.extend_from_slice(&self.key_id.to_be_bytes());
        out.extend_from_slice(&[0, 0]);
        put_u16(out, self.crt.len())?;
        put_u16(out, self.m_blob.len())?;
        out.extend_from_slice(&self.crt);
        out.extend_from_slice(&self.m_blob);
        Ok(())
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let key_id = r.address()?;
        if r.u16()? != 0 {
            return Err(CodecError::BadReserved);
        }
        let size_crt = r.u16()? as usize;
        let size_m = r.u16()? as usize;
        let crt = r.take(size_crt)?.to_vec();
        let m_blob = r.take(size_m)?.to_vec();
        Ok(KeysSubstructure { key_id, crt, m_blob })
    }

    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        let mut out = Vec::with_capacity(self.measure());
        self.encode_into(&mut out)?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let s = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(s)
    }
}

/// Body of the Download and Update arrays.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyArray {
    pub keys: Vec<KeysSubstructure>,
}

impl KeyArray {
    pub fn measure(&self) -> usize {
        ARRAY_HEADER_BYTES + self.keys.iter().map(KeysSubstructure::measure).sum::<usize>()
    }

    fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), CodecError> {
        put_u16(out, self.keys.len())?;
        out.extend_from_slice(&[0, 0]);
        for k in &self.keys {
            k.encode_into(out)?;
        }
        Ok(())
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let n = r.u16()? as usize;
        if r.u16()? != 0 {
            return Err(CodecError::BadReserved);
        }
        let keys = (0..n)
            .map(|_| KeysSubstructure::decode_from(r))
            .collect::<Result<_, _>>()?;
        Ok(KeyArray { keys })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReaddressArray {
    pub moves: Vec<(TreeAddress, TreeAddress)>,
}

impl ReaddressArray {
    pub fn measure(&self) -> usize {
        ARRAY_HEADER_BYTES + 4 * self.moves.len()
    }

    fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), CodecError> {
        put_u16(out, self.moves.len())?;
        out.extend_from_slice(&[0, 0]);
        for (old, new) in &self.moves {
            out.extend_from_slice(&old.to_be_bytes());
            out.extend_from_slice(&new.to_be_bytes());
        }
        Ok(())
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let n = r.u16()? as usize;
        if r.u16()? != 0 {
            return Err(CodecError::BadReserved);
        }
        let moves = (0..n)
            .map(|_| Ok((r.address()?, r.address()?)))
            .collect::<Result<_, CodecError>>()?;
        Ok(ReaddressArray { moves })
    }

    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        let mut out = Vec::with_capacity(self.measure());
        self.encode_into(&mut out)?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let a = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(a)
    }
}

/// `# keys | # leaves | leaves | keys`; the leaves are the marked addresses.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LeaveArray {
    pub leaves: Vec<TreeAddress>,
    pub keys: Vec<KeysSubstructure>,
}

impl LeaveArray {
    pub fn measure(&self) -> usize {
        ARRAY_HEADER_BYTES
            + 2 * self.leaves.len()
            + self.keys.iter().map(KeysSubstructure::measure).sum::<usize>()
    }

    fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), CodecError> {
        put_u16(out, self.keys.len())?;
        put_u16(out, self.leaves.len())?;
        for a in &self.leaves {
            out.extend_from_slice(&a.to_be_bytes());
        }
        for k in &self.keys {
            k.encode_into(out)?;
        }
        Ok(())
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let n_keys = r.u16()? as usize;
        let n_leaves = r.u16()? as usize;
        let leaves = (0..n_leaves)
            .map(|_| r.address())
            .collect::<Result<_, _>>()?;
        let keys = (0..n_keys)
            .map(|_| KeysSubstructure::decode_from(r))
            .collect::<Result<_, _>>()?;
        Ok(LeaveArray { leaves, keys })
    }

    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        let mut out = Vec::with_capacity(self.measure());
        self.encode_into(&mut out)?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let a = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KdBody {
    /// New GKEK and GTEK wrapped under the current GKEK.
    GroupKeys(Vec<u8>),
    /// GTEK wrapped under the GKEK of the same message's epoch.
    Tek(Vec<u8>),
    /// Keys at `addresses` changed; with `derive` set, GKEK and GTEK advance by hashing.
    Notice {
        derive: bool,
        addresses: Vec<TreeAddress>,
    },
    Lock(KeysSubstructure),
    Download(KeyArray),
    Update(KeyArray),
    Readdress(ReaddressArray),
    Leave(LeaveArray),
    /// GKEK and GTEK wrapped under a joiner's personal key.
    Welcome(Vec<u8>),
    MergeKeys {
        source: GroupId,
        wrapped: Vec<u8>,
    },
    SplitLock {
        source: GroupId,
        wrapped_tek: Vec<u8>,
        lock: KeysSubstructure,
    },
}

impl KdBody {
    pub fn kind(&self) -> u8 {
        match self {
            KdBody::GroupKeys(_) => kind::GROUP_KEYS,
            KdBody::Tek(_) => kind::TEK,
            KdBody::Notice { .. } => kind::NOTICE,
            KdBody::Lock(_) => kind::LOCK,
            KdBody::Download(_) => kind::DOWNLOAD,
            KdBody::Update(_) => kind::UPDATE,
            KdBody::Readdress(_) => kind::READDRESS,
            KdBody::Leave(_) => kind::LEAVE,
            KdBody::Welcome(_) => kind::WELCOME,
            KdBody::MergeKeys { .. } => kind::MERGE_KEYS,
            KdBody::SplitLock { .. } => kind::SPLIT_LOCK,
        }
    }

    pub fn measure(&self) -> usize {
        match self {
            KdBody::GroupKeys(w) | KdBody::Tek(w) | KdBody::Welcome(w) => w.len(),
            KdBody::Notice { addresses, .. } => 1 + 2 * addresses.len(),
            KdBody::Lock(s) => s.measure(),
            KdBody::Download(a) | KdBody::Update(a) => a.measure(),
            KdBody::Readdress(a) => a.measure(),
            KdBody::Leave(a) => a.measure(),
            KdBody::MergeKeys { wrapped, .. } => 4 + wrapped.len(),
            KdBody::SplitLock { lock, .. } => 4 + KEY_BYTES + lock.measure(),
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), CodecError> {
        match self {
            KdBody::GroupKeys(w) | KdBody::Tek(w) | KdBody::Welcome(w) => out.extend_from_slice(w),
            KdBody::Notice { derive, addresses } => {
                out.push(u8::from(*derive));
                for a in addresses {
                    out.extend_from_slice(&a.to_be_bytes());
                }
            }
            KdBody::Lock(s) => s.encode_into(out)?,
            KdBody::Download(a) | KdBody::Update(a) => a.encode_into(out)?,
            KdBody::Readdress(a) => a.encode_into(out)?,
            KdBody::Leave(a) => a.encode_into(out)?,
            KdBody::MergeKeys { source, wrapped } => {
                out.extend_from_slice(&source.0.to_be_bytes());
                out.extend_from_slice(wrapped);
            }
            KdBody::SplitLock {
                source,
                wrapped_tek,
                lock,
            } => {
                if wrapped_tek.len() != KEY_BYTES {
                    return Err(CodecError::BadField("wrapped tek"));
                }
                out.extend_from_slice(&source.0.to_be_bytes());
                out.extend_from_slice(wrapped_tek);
                lock.encode_into(out)?;
            }
        }
        Ok(())
    }

    fn decode_body(kind_byte: u8, body: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(body);
        let b = match kind_byte {
            kind::GROUP_KEYS => KdBody::GroupKeys(r.rest().to_vec()),
            kind::TEK => KdBody::Tek(r.rest().to_vec()),
            kind::WELCOME => KdBody::Welcome(r.rest().to_vec()),
            kind::NOTICE => {
                let derive = match r.u8()? {
                    0 => false,
                    1 => true,
                    _ => return Err(CodecError::BadField("notice flag")),
                };
                if !r.remaining().is_multiple_of(2) {
                    return Err(CodecError::Truncated);
                }
                let addresses = (0..r.remaining() / 2)
                    .map(|_| r.address())
                    .collect::<Result<_, _>>()?;
                KdBody::Notice { derive, addresses }
            }
            kind::LOCK => KdBody::Lock(KeysSubstructure::decode_from(&mut r)?),
            kind::DOWNLOAD => KdBody::Download(KeyArray::decode_from(&mut r)?),
            kind::UPDATE => KdBody::Update(KeyArray::decode_from(&mut r)?),
            kind::READDRESS => KdBody::Readdress(ReaddressArray::decode_from(&mut r)?),
            kind::LEAVE => KdBody::Leave(LeaveArray::decode_from(&mut r)?),
            kind::MERGE_KEYS => KdBody::MergeKeys {
                source: GroupId(r.u32()?),
                wrapped: r.rest().to_vec(),
            },
            kind::SPLIT_LOCK => KdBody::SplitLock {
                source: GroupId(r.u32()?),
                wrapped_tek: r.take(KEY_BYTES)?.to_vec(),
                lock: KeysSubstructure::decode_from(&mut r)?,
            },
            other => return Err(CodecError::BadKind(other)),
        };
        r.finish()?;
        Ok(b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KdPayload {
    pub group: GroupId,
    pub epoch: u32,
    pub body: KdBody,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GsaPolicy {
    pub group: GroupId,
    pub algorithm: u16,
    pub lifetime_secs: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegistrationRequest {
    pub member: MemberId,
    pub credential: Vec<u8>,
    pub public: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegistrationResponse {
    pub server_public: Vec<u8>,
    pub temp_id: TreeAddress,
    /// Personal modulus and key, wrapped under the session key.
    pub wrapped_pair: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CakePayload {
    Kd(KdPayload),
    Policy(GsaPolicy),
    RegistrationRequest(RegistrationRequest),
    RegistrationResponse(RegistrationResponse),
}

impl CakePayload {
    pub fn kd(group: GroupId, epoch: u32, body: KdBody) -> Self {
        CakePayload::Kd(KdPayload { group, epoch, body })
    }
}

pub fn measure(p: &CakePayload) -> usize {
    match p {
        CakePayload::Kd(kd) => KD_HEADER_BYTES + kd.body.measure(),
        CakePayload::Policy(_) => POLICY_BYTES,
        CakePayload::RegistrationRequest(r) => 1 + 4 + 1 + r.credential.len() + DH_PUBLIC_BYTES,
        CakePayload::RegistrationResponse(_) => 1 + DH_PUBLIC_BYTES + 2 + WRAPPED_PAIR_BYTES,
    }
}

pub fn encode(p: &CakePayload) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(measure(p));
    encode_into(p, &mut out)?;
    Ok(out)
}

fn encode_into(p: &CakePayload, out: &mut Vec<u8>) -> Result<(), CodecError> {
    match p {
        CakePayload::Kd(kd) => {
            let len = kd.body.measure();
            if len > MAX_BODY {
                return Err(CodecError::Oversize(len));
            }
            out.push(kd.body.kind());
            out.extend_from_slice(&(len as u32).to_be_bytes()[1..]);
            out.extend_from_slice(&kd.group.0.to_be_bytes());
            out.extend_from_slice(&kd.epoch.to_be_bytes());
            kd.body.encode_into(out)?;
        }
        CakePayload::Policy(pol) => {
            out.push(kind::POLICY);
            out.extend_from_slice(&pol.group.0.to_be_bytes());
            out.extend_from_slice(&pol.algorithm.to_be_bytes());
            out.extend_from_slice(&pol.lifetime_secs.to_be_bytes());
        }
        CakePayload::RegistrationRequest(r) => {
            if r.credential.len() > u8::MAX as usize {
                return Err(CodecError::Oversize(r.credential.len()));
            }
            if r.public.len() != DH_PUBLIC_BYTES {
                return Err(CodecError::BadField("public value"));
            }
            out.push(kind::REGISTRATION_REQUEST);
            out.extend_from_slice(&r.member.0.to_be_bytes());
            out.push(r.credential.len() as u8);
            out.extend_from_slice(&r.credential);
            out.extend_from_slice(&r.public);
        }
        CakePayload::RegistrationResponse(r) => {
            if r.server_public.len() != DH_PUBLIC_BYTES {
                return Err(CodecError::BadField("public value"));
            }
            if r.wrapped_pair.len() != WRAPPED_PAIR_BYTES {
                return Err(CodecError::BadField("wrapped pair"));
            }
            out.push(kind::REGISTRATION_RESPONSE);
            out.extend_from_slice(&r.server_public);
            out.extend_from_slice(&r.temp_id.to_be_bytes());
            out.extend_from_slice(&r.wrapped_pair);
        }
    }
    Ok(())
}

/// Decodes exactly one payload; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<CakePayload, CodecError> {
    let mut r = Reader::new(bytes);
    let p = decode_from(&mut r)?;
    r.finish()?;
    Ok(p)
}

fn decode_from(r: &mut Reader<'_>) -> Result<CakePayload, CodecError> {
    let k = r.u8()?;
    match k {
        kind::POLICY => Ok(CakePayload::Policy(GsaPolicy {
            group: GroupId(r.u32()?),
            algorithm: r.u16()?,
            lifetime_secs: r.u32()?,
        })),
        kind::REGISTRATION_REQUEST => {
            let member = MemberId(r.u32()?);
            let n = r.u8()? as usize;
            let credential = r.take(n)?.to_vec();
            let public = r.take(DH_PUBLIC_BYTES)?.to_vec();
            Ok(CakePayload::RegistrationRequest(RegistrationRequest {
                member,
                credential,
                public,
            }))
        }
        kind::REGISTRATION_RESPONSE => Ok(CakePayload::RegistrationResponse(RegistrationResponse {
            server_public: r.take(DH_PUBLIC_BYTES)?.to_vec(),
            temp_id: r.address()?,
            wrapped_pair: r.take(WRAPPED_PAIR_BYTES)?.to_vec(),
        })),
        kind::GROUP_KEYS..=kind::SPLIT_LOCK => {
            let len = r.take(3)?;
            let len = u32::from_be_bytes([0, len[0], len[1], len[2]]) as usize;
            let group = GroupId(r.u32()?);
            let epoch = r.u32()?;
            let body = KdBody::decode_body(k, r.take(len)?)?;
            Ok(CakePayload::Kd(KdPayload { group, epoch, body }))
        }
        other => Err(CodecError::BadKind(other)),
    }
}

pub fn measure_message(payloads: &[CakePayload]) -> usize {
    payloads.iter().map(measure).sum()
}

pub fn encode_message(payloads: &[CakePayload]) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(measure_message(payloads));
    for p in payloads {
        encode_into(p, &mut out)?;
    }
    Ok(out)
}

pub fn decode_message(bytes: &[u8]) -> Result<Vec<CakePayload>, CodecError> {
    let mut r = Reader::new(bytes);
    let mut out = Vec::new();
    while r.remaining() > 0 {
        out.push(decode_from(&mut r)?);
    }
    Ok(out)
}

fn put_u16(out: &mut Vec<u8>, v: usize) -> Result<(), CodecError> {
    let v16 = u16::try_from(v).map_err(|_| CodecError::Oversize(v))?;
    out.extend_from_slice(&v16.to_be_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn address(&mut self) -> Result<TreeAddress, CodecError> {
        let b = self.take(2)?;
        Ok(TreeAddress::from_be_bytes([b[0], b[1]]))
    }

    fn finish(&self) -> Result<(), CodecError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(CodecError::TrailingBytes(n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(code: u16) -> TreeAddress {
        TreeAddress::from_code(code)
    }

    fn sub(crt: usize, m: usize) -> KeysSubstructure {
        KeysSubstructure {
            key_id: addr(0x1C00),
            crt: vec![0xAB; crt],
            m_blob: vec![0xCD; m],
        }
    }

    #[test]
    fn header_constants() {
        let kd = CakePayload::kd(GroupId(7), 1, KdBody::Tek(vec![0; 16]));
        assert_eq!(measure(&kd), 28);
        assert_eq!(encode(&kd).unwrap().len(), 28);
        assert_eq!(sub(41, 41).measure(), 90);
        assert_eq!(ReaddressArray::default().encode().unwrap(), vec![0, 0, 0, 0]);
        let pol = CakePayload::Policy(GsaPolicy {
            group: GroupId(1),
            algorithm: ALG_CAKE,
            lifetime_secs: 3600,
        });
        assert_eq!(encode(&pol).unwrap().len(), POLICY_BYTES);
    }

    #[test]
    fn substructure_layout() {
        let bytes = sub(3, 2).encode().unwrap();
        assert_eq!(
            bytes,
            vec![0x1C, 0x00, 0, 0, 0, 3, 0, 2, 0xAB, 0xAB, 0xAB, 0xCD, 0xCD]
        );
    }

    #[test]
    fn decode_errors() {
        let bytes = sub(3, 2).encode().unwrap();
        assert_eq!(KeysSubstructure::decode(&bytes[..10]), Err(CodecError::Truncated));
        let mut bad = bytes.clone();
        bad[3] = 1;
        assert_eq!(KeysSubstructure::decode(&bad), Err(CodecError::BadReserved));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(KeysSubstructure::decode(&long), Err(CodecError::TrailingBytes(1)));
        assert_eq!(decode(&[0x7F]), Err(CodecError::BadKind(0x7F)));
        assert_eq!(decode(&[]), Err(CodecError::Truncated));
    }

    #[test]
    fn oversize_counts_are_rejected() {
        let big = ReaddressArray {
            moves: vec![(addr(0x4000), addr(0x8000)); 65_536],
        };
        assert_eq!(big.encode(), Err(CodecError::Oversize(65_536)));
        assert_eq!(sub(70_000, 0).encode(), Err(CodecError::Oversize(70_000)));
    }

    #[test]
    fn message_is_concatenation() {
        let msg = vec![
            CakePayload::kd(GroupId(1), 2, KdBody::Notice {
                derive: true,
                addresses: vec![addr(0x4000)],
            }),
            CakePayload::kd(GroupId(1), 2, KdBody::Readdress(ReaddressArray::default())),
        ];
        let bytes = encode_message(&msg).unwrap();
        assert_eq!(bytes.len(), measure_message(&msg));
        assert_eq!(decode_message(&bytes).unwrap(), msg);
    }
}
