//! Transaction vocabulary: typed bodies, signed envelopes, canonical bytes
//! and validation (including previous-transaction chaining).

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};
use crate::hash::Hash;
use crate::identity::{self, ca_verify, Certificate, KeyPair, PublicKey, Signature};
use crate::ledger::ChainAnchor;
use crate::mobility::OdMatrix;
use crate::trip_extraction::{presence_digest, TripClaim, VerdictRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum TxKind {
    Esdp = 1,
    Eps = 2,
    SourcePresence = 3,
    DestinationPresence = 4,
    TripRecord = 5,
    OdMatrix = 6,
    Anchor = 7,
    TripClaim = 8,
    Verdict = 9,
}

impl TxKind {
    pub fn from_u8(tag: u8) -> Option<TxKind> {
        Some(match tag {
            1 => TxKind::Esdp,
            2 => TxKind::Eps,
            3 => TxKind::SourcePresence,
            4 => TxKind::DestinationPresence,
            5 => TxKind::TripRecord,
            6 => TxKind::OdMatrix,
            7 => TxKind::Anchor,
            8 => TxKind::TripClaim,
            9 => TxKind::Verdict,
            _ => return None,
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            TxKind::Esdp => "ESDP",
            TxKind::Eps => "EPS",
            TxKind::SourcePresence => "SRC_PRESENCE",
            TxKind::DestinationPresence => "DST_PRESENCE",
            TxKind::TripRecord => "TRIP",
            TxKind::OdMatrix => "OD",
            TxKind::Anchor => "ANCHOR",
            TxKind::TripClaim => "CLAIM",
            TxKind::Verdict => "VERDICT",
        }
    }
}

/// Energy supply/demand prediction for one region.
#[derive(Debug, Clone, PartialEq)]
pub struct EsdpBody {
    pub region_id: String,
    /// kWh
    pub predicted_supply: f64,
    /// kWh
    pub predicted_demand: f64,
    /// Number of ticks after `timestamp` the prediction covers.
    pub horizon: u64,
    pub timestamp: u64,
    /// Only set when the issuer chains its predictions.
    pub p_t_id: Option<Hash>,
}

impl EsdpBody {
    /// True when the prediction applies to `tick`: it covers the ticks
    /// `timestamp + 1 ..= timestamp + horizon`.
    pub fn covers(&self, tick: u64) -> bool {
        tick > self.timestamp && tick - self.timestamp <= self.horizon
    }
}

/// Regional energy price signal.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsBody {
    pub p_t_id: Hash,
    pub region_id: String,
    /// currency per kWh
    pub energy_price: f64,
    pub issued_at: u64,
    /// Last tick at which the price is valid.
    pub expiry: u64,
}

/// Station attestation that `presented_pk` was docked at the station at `tick`.
#[derive(Debug, Clone, PartialEq)]
pub struct PresenceBody {
    pub presented_pk: PublicKey,
    pub tick: u64,
    pub station_signature_over_hash: Signature,
    pub station_signature_over_pk: Signature,
    pub station_cert: Certificate,
}

/// Anonymous trip. Carries no key material by construction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TripRecordBody {
    pub origin_station_id: String,
    pub destination_station_id: String,
    pub t_start: u64,
    pub t_end: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TxBody {
    Esdp(EsdpBody),
    Eps(EpsBody),
    SourcePresence(PresenceBody),
    DestinationPresence(PresenceBody),
    TripRecord(TripRecordBody),
    OdMatrix(OdMatrix),
    Anchor(ChainAnchor),
    TripClaim(Box<TripClaim>),
    Verdict(VerdictRecord),
}

fn non_negative(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}

impl TxBody {
    pub fn kind(&self) -> TxKind {
        match self {
            TxBody::Esdp(_) => TxKind::Esdp,
            TxBody::Eps(_) => TxKind::Eps,
            TxBody::SourcePresence(_) => TxKind::SourcePresence,
            TxBody::DestinationPresence(_) => TxKind::DestinationPresence,
            TxBody::TripRecord(_) => TxKind::TripRecord,
            TxBody::OdMatrix(_) => TxKind::OdMatrix,
            TxBody::Anchor(_) => TxKind::Anchor,
            TxBody::TripClaim(_) => TxKind::TripClaim,
            TxBody::Verdict(_) => TxKind::Verdict,
        }
    }

    /// Structural invariants that need no chain context.
    pub fn check_invariants(&self) -> Result<(), &'static str> {
        match self {
            TxBody::Esdp(b) => {
                if !non_negative(b.predicted_supply) || !non_negative(b.predicted_demand) {
                    return Err("esdp supply and demand must be finite and >= 0");
                }
                if b.horizon < 1 {
                    return Err("esdp horizon must be >= 1");
                }
                if b.region_id.is_empty() {
                    return Err("empty region id");
                }
            }
            TxBody::Eps(b) => {
                if !non_negative(b.energy_price) {
                    return Err("eps price must be finite and >= 0");
                }
                if b.expiry <= b.issued_at {
                    return Err("eps expiry must be after issuing tick");
                }
                if b.region_id.is_empty() {
                    return Err("empty region id");
                }
            }
            TxBody::SourcePresence(_) | TxBody::DestinationPresence(_) => {}
            TxBody::TripRecord(b) => {
                if b.t_end <= b.t_start {
                    return Err("trip must end after it starts");
                }
                if b.origin_station_id == b.destination_station_id {
                    return Err("trip origin equals destination");
                }
            }
            TxBody::OdMatrix(m) => {
                if m.window.from >= m.window.to {
                    return Err("od window must be non-empty");
                }
            }
            TxBody::Anchor(a) => {
                if a.child_chain_id.is_empty() {
                    return Err("anchor without child chain id");
                }
            }
            TxBody::TripClaim(c) => {
                if c.source_tx.kind() != TxKind::SourcePresence
                    || c.dest_tx.kind() != TxKind::DestinationPresence
                {
                    return Err("claim must pair a source and a destination presence");
                }
            }
            TxBody::Verdict(_) => {}
        }
        Ok(())
    }
}

impl Encode for EsdpBody {
    fn encode(&self, w: &mut Writer) {
        w.str(&self.region_id)
            .f64(self.predicted_supply)
            .f64(self.predicted_demand)
            .u64(self.horizon)
            .u64(self.timestamp);
        match &self.p_t_id {
            None => w.u8(0),
            Some(h) => w.u8(1).put(h),
        };
    }
}

impl Decode for EsdpBody {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(EsdpBody {
            region_id: r.string()?,
            predicted_supply: r.f64()?,
            predicted_demand: r.f64()?,
            horizon: r.u64()?,
            timestamp: r.u64()?,
            p_t_id: match r.u8()? {
                0 => None,
                1 => Some(r.get()?),
                tag => return Err(DecodeError::InvalidTag { what: "option", tag }),
            },
        })
    }
}

impl Encode for EpsBody {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.p_t_id)
            .str(&self.region_id)
            .f64(self.energy_price)
            .u64(self.issued_at)
            .u64(self.expiry);
    }
}

impl Decode for EpsBody {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(EpsBody {
            p_t_id: r.get()?,
            region_id: r.string()?,
            energy_price: r.f64()?,
            issued_at: r.u64()?,
            expiry: r.u64()?,
        })
    }
}

impl Encode for PresenceBody {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.presented_pk)
            .u64(self.tick)
            .put(&self.station_signature_over_hash)
            .put(&self.station_signature_over_pk)
            .put(&self.station_cert);
    }
}

impl Decode for PresenceBody {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(PresenceBody {
            presented_pk: r.get()?,
            tick: r.u64()?,
            station_signature_over_hash: r.get()?,
            station_signature_over_pk: r.get()?,
            station_cert: r.get()?,
        })
    }
}

impl Encode for TripRecordBody {
    fn encode(&self, w: &mut Writer) {
        w.str(&self.origin_station_id)
            .str(&self.destination_station_id)
            .u64(self.t_start)
            .u64(self.t_end);
    }
}

impl Decode for TripRecordBody {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(TripRecordBody {
            origin_station_id: r.string()?,
            destination_station_id: r.string()?,
            t_start: r.u64()?,
            t_end: r.u64()?,
        })
    }
}

impl Encode for TxBody {
    fn encode(&self, w: &mut Writer) {
        w.u8(self.kind() as u8);
        match self {
            TxBody::Esdp(b) => b.encode(w),
            TxBody::Eps(b) => b.encode(w),
            TxBody::SourcePresence(b) | TxBody::DestinationPresence(b) => b.encode(w),
            TxBody::TripRecord(b) => b.encode(w),
            TxBody::OdMatrix(b) => b.encode(w),
            TxBody::Anchor(b) => b.encode(w),
            TxBody::TripClaim(b) => b.encode(w),
            TxBody::Verdict(b) => b.encode(w),
        }
    }
}

impl Decode for TxBody {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let tag = r.u8()?;
        let kind = TxKind::from_u8(tag).ok_or(DecodeError::InvalidTag { what: "tx kind", tag })?;
        Ok(match kind {
            TxKind::Esdp => TxBody::Esdp(r.get()?),
            TxKind::Eps => TxBody::Eps(r.get()?),
            TxKind::SourcePresence => TxBody::SourcePresence(r.get()?),
            TxKind::DestinationPresence => TxBody::DestinationPresence(r.get()?),
            TxKind::TripRecord => TxBody::TripRecord(r.get()?),
            TxKind::OdMatrix => TxBody::OdMatrix(r.get()?),
            TxKind::Anchor => TxBody::Anchor(r.get()?),
            TxKind::TripClaim => TxBody::TripClaim(Box::new(r.get()?)),
            TxKind::Verdict => TxBody::Verdict(r.get()?),
        })
    }
}

/// Signed transaction. `t_id` is the hash of the canonical body and the
/// signature covers the same bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct TxEnvelope {
    pub t_id: Hash,
    pub body: TxBody,
    pub signer_pk: PublicKey,
    pub signature: Signature,
}

impl TxEnvelope {
    pub fn kind(&self) -> TxKind {
        self.body.kind()
    }

    pub fn body_bytes(&self) -> Vec<u8> {
        self.body.to_canonical_bytes()
    }

    pub fn t_id_valid(&self) -> bool {
        Hash::digest(&self.body_bytes()) == self.t_id
    }

    pub fn signature_valid(&self) -> bool {
        identity::verify(&self.signer_pk, &self.body_bytes(), &self.signature)
    }

    /// `p_t_id` carried by the body, if its kind has one.
    pub fn prev_tx(&self) -> Option<Hash> {
        match &self.body {
            TxBody::Eps(b) => Some(b.p_t_id),
            TxBody::Esdp(b) => b.p_t_id,
            _ => None,
        }
    }
}

impl Encode for TxEnvelope {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.t_id)
            .u8(self.kind() as u8)
            .bytes(&self.body_bytes())
            .put(&self.signer_pk)
            .put(&self.signature);
    }
}

impl Decode for TxEnvelope {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let t_id = r.get()?;
        let tag = r.u8()?;
        let body = TxBody::from_canonical_bytes(r.bytes()?)?;
        if body.kind() as u8 != tag {
            return Err(DecodeError::Invalid("envelope kind does not match body"));
        }
        Ok(TxEnvelope {
            t_id,
            body,
            signer_pk: r.get()?,
            signature: r.get()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TxError {
    #[error("invalid body: {0}")]
    InvalidBody(&'static str),
    #[error("malformed transaction bytes: {0}")]
    MalformedBytes(#[from] DecodeError),
}

/// Why a transaction failed validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Error)]
pub enum TxRejection {
    #[error("signature does not verify under signer key")]
    BadSignature,
    #[error("t_id does not match body hash")]
    TidMismatch,
    #[error("body invariant violated: {0}")]
    InvalidBody(&'static str),
    #[error("p_t_id does not point at the signer's latest transaction")]
    PrevTxMismatch,
    #[error("presence transaction not signed by the certified station")]
    StationMismatch,
    #[error("station signature does not verify")]
    StationSignature,
    #[error("station certificate not issued by the CA")]
    Certificate,
}

impl TxRejection {
    pub fn code(&self) -> &'static str {
        match self {
            TxRejection::BadSignature => "bad_signature",
            TxRejection::TidMismatch => "tid_mismatch",
            TxRejection::InvalidBody(_) => "invalid_body",
            TxRejection::PrevTxMismatch => "prev_tx_mismatch",
            TxRejection::StationMismatch => "station_mismatch",
            TxRejection::StationSignature => "station_signature",
            TxRejection::Certificate => "certificate",
        }
    }
}

/// Builds and signs an envelope after checking body invariants.
pub fn build_tx(body: TxBody, signer: &KeyPair) -> Result<TxEnvelope, TxError> {
    body.check_invariants().map_err(TxError::InvalidBody)?;
    let bytes = body.to_canonical_bytes();
    Ok(TxEnvelope {
        t_id: Hash::digest(&bytes),
        signature: signer.sign(&bytes),
        signer_pk: signer.pk(),
        body,
    })
}

pub fn serialize_tx(tx: &TxEnvelope) -> Vec<u8> {
    tx.to_canonical_bytes()
}

pub fn deserialize_tx(bytes: &[u8]) -> Result<TxEnvelope, TxError> {
    Ok(TxEnvelope::from_canonical_bytes(bytes)?)
}

/// Read access to a chain needed for validation.
pub trait ChainView {
    /// Most recent transaction signed by `pk`; later blocks and later
    /// positions within a block win.
    fn latest_tx_by_pk(&self, pk: &PublicKey) -> Option<&TxEnvelope>;
}

/// Linear scan; the last matching transaction wins.
impl ChainView for [TxEnvelope] {
    fn latest_tx_by_pk(&self, pk: &PublicKey) -> Option<&TxEnvelope> {
        self.iter().rev().find(|tx| tx.signer_pk == *pk)
    }
}

impl ChainView for Vec<TxEnvelope> {
    fn latest_tx_by_pk(&self, pk: &PublicKey) -> Option<&TxEnvelope> {
        self.as_slice().latest_tx_by_pk(pk)
    }
}

/// A chain plus transactions accepted for the next block but not yet sealed.
pub struct Overlay<'a, V: ChainView + ?Sized> {
    pub base: &'a V,
    pub pending: &'a [TxEnvelope],
}

impl<'a, V: ChainView + ?Sized> Overlay<'a, V> {
    pub fn new(base: &'a V, pending: &'a [TxEnvelope]) -> Self {
        Self { base, pending }
    }
}

impl<V: ChainView + ?Sized> ChainView for Overlay<'_, V> {
    fn latest_tx_by_pk(&self, pk: &PublicKey) -> Option<&TxEnvelope> {
        self.pending
            .latest_tx_by_pk(pk)
            .or_else(|| self.base.latest_tx_by_pk(pk))
    }
}

/// Validation knobs that depend on deployment, not on the transaction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TxPolicy {
    /// When set, station certificates inside presence transactions must
    /// verify under this key.
    pub ca_pk: Option<PublicKey>,
    /// Require ESDP transactions to chain to the signer's previous one.
    pub chain_esdp: bool,
}

impl Encode for TxPolicy {
    fn encode(&self, w: &mut Writer) {
        match &self.ca_pk {
            None => w.u8(0),
            Some(pk) => w.u8(1).put(pk),
        };
        w.bool(self.chain_esdp);
    }
}

impl Decode for TxPolicy {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let ca_pk = match r.u8()? {
            0 => None,
            1 => Some(r.get()?),
            tag => return Err(DecodeError::InvalidTag { what: "option", tag }),
        };
        Ok(TxPolicy {
            ca_pk,
            chain_esdp: r.bool()?,
        })
    }
}

/// Checks the station signatures and certificate of a presence body.
pub fn check_presence(
    body: &PresenceBody,
    signer: Option<&PublicKey>,
    ca_pk: Option<&PublicKey>,
) -> Result<(), TxRejection> {
    let station = &body.station_cert.subject_pk;
    if let Some(ca) = ca_pk {
        if !ca_verify(ca, &body.station_cert) {
            return Err(TxRejection::Certificate);
        }
    }
    if signer.is_some_and(|s| s != station) {
        return Err(TxRejection::StationMismatch);
    }
    let digest = presence_digest(&body.presented_pk, body.tick);
    if !identity::verify(station, digest.as_bytes(), &body.station_signature_over_hash)
        || !identity::verify(station, body.presented_pk.as_bytes(), &body.station_signature_over_pk)
    {
        return Err(TxRejection::StationSignature);
    }
    Ok(())
}

/// Full validation with a reason on failure.
pub fn check_tx<V: ChainView + ?Sized>(
    view: &V,
    tx: &TxEnvelope,
    policy: &TxPolicy,
) -> Result<(), TxRejection> {
    let bytes = tx.body_bytes();
    if !identity::verify(&tx.signer_pk, &bytes, &tx.signature) {
        return Err(TxRejection::BadSignature);
    }
    if Hash::digest(&bytes) != tx.t_id {
        return Err(TxRejection::TidMismatch);
    }
    tx.body.check_invariants().map_err(TxRejection::InvalidBody)?;

    let expected_prev = || {
        view.latest_tx_by_pk(&tx.signer_pk)
            .map(|prev| prev.t_id)
            .unwrap_or(Hash::ZERO)
    };
    match &tx.body {
        TxBody::Eps(b) => {
            if b.p_t_id != expected_prev() {
                return Err(TxRejection::PrevTxMismatch);
            }
        }
        TxBody::Esdp(b) => match b.p_t_id {
            Some(p) if p != expected_prev() => return Err(TxRejection::PrevTxMismatch),
            None if policy.chain_esdp => return Err(TxRejection::PrevTxMismatch),
            _ => {}
        },
        TxBody::SourcePresence(p) | TxBody::DestinationPresence(p) => {
            check_presence(p, Some(&tx.signer_pk), policy.ca_pk.as_ref())?;
        }
        _ => {}
    }
    Ok(())
}

pub fn validate_tx<V: ChainView + ?Sized>(view: &V, tx: &TxEnvelope, policy: &TxPolicy) -> bool {
    check_tx(view, tx, policy).is_ok()
}

/// The `p_t_id` a new transaction by `signer` must carry.
pub fn next_prev_tx<V: ChainView + ?Sized>(view: &V, signer: &PublicKey) -> Hash {
    view.latest_tx_by_pk(signer)
        .map(|t| t.t_id)
        .unwrap_or(Hash::ZERO)
}

/// One-line debug rendering: kind, t_id prefix, signer prefix, key fields.
impl fmt::Display for TxEnvelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} t_id={} signer={}",
            self.kind().label(),
            self.t_id.short(),
            self.signer_pk.short()
        )?;
        match &self.body {
            TxBody::Esdp(b) => write!(
                f,
                " region={} supply={:.3} demand={:.3} horizon={} ts={}",
                b.region_id, b.predicted_supply, b.predicted_demand, b.horizon, b.timestamp
            ),
            TxBody::Eps(b) => write!(
                f,
                " region={} price={:.6} issued={} expiry={} p_t_id={}",
                b.region_id,
                b.energy_price,
                b.issued_at,
                b.expiry,
                b.p_t_id.short()
            ),
            TxBody::SourcePresence(b) | TxBody::DestinationPresence(b) => write!(
                f,
                " station={} pk={} t={}",
                b.station_cert.station_id,
                b.presented_pk.short(),
                b.tick
            ),
            TxBody::TripRecord(b) => write!(
                f,
                " {}->{} t=[{},{}]",
                b.origin_station_id, b.destination_station_id, b.t_start, b.t_end
            ),
            TxBody::OdMatrix(m) => write!(
                f,
                " window=[{},{}) trips={} pairs={}",
                m.window.from,
                m.window.to,
                m.total(),
                m.entries.len()
            ),
            TxBody::Anchor(a) => write!(
                f,
                " child={} height={} hash={} tick={}",
                a.child_chain_id,
                a.anchored_height,
                a.anchored_hash.short(),
                a.tick
            ),
            TxBody::TripClaim(c) => write!(
                f,
                " claim={} src={} dst={}",
                c.claim_hash().short(),
                c.source_tx.t_id.short(),
                c.dest_tx.t_id.short()
            ),
            TxBody::Verdict(v) => write!(
                f,
                " claim={} verifier={} verdict={} tick={}",
                v.claim_hash.short(),
                v.verifier_pk.short(),
                v.verdict,
                v.tick
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::string::ToString;
    use alloc::vec;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    use crate::identity::generate_keypair;

    fn keys(n: usize) -> Vec<KeyPair> {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        (0..n).map(|_| generate_keypair(&mut rng)).collect()
    }

    fn esdp(supply: f64, demand: f64) -> TxBody {
        TxBody::Esdp(EsdpBody {
            region_id: "R".into(),
            predicted_supply: supply,
            predicted_demand: demand,
            horizon: 1,
            timestamp: 7,
            p_t_id: None,
        })
    }

    fn eps(p_t_id: Hash, price: f64) -> TxBody {
        TxBody::Eps(EpsBody {
            p_t_id,
            region_id: "R".into(),
            energy_price: price,
            issued_at: 3,
            expiry: 13,
        })
    }

    #[test]
    fn esdp_t_id_recomputes_from_bytes() {
        let k = keys(1);
        let tx = build_tx(esdp(50.0, 80.0), &k[0]).unwrap();
        assert_eq!(tx.t_id, Hash::digest(&tx.body_bytes()));
        assert!(tx.signature_valid());
        let rebuilt = deserialize_tx(&serialize_tx(&tx)).unwrap();
        assert_eq!(rebuilt, tx);
        assert_eq!(rebuilt.t_id, Hash::digest(&rebuilt.body_bytes()));
    }

    #[test]
    fn negative_supply_is_invalid_body() {
        let k = keys(1);
        assert!(matches!(
            build_tx(esdp(-1.0, 80.0), &k[0]),
            Err(TxError::InvalidBody(_))
        ));
        assert!(matches!(
            build_tx(esdp(f64::NAN, 80.0), &k[0]),
            Err(TxError::InvalidBody(_))
        ));
    }

    #[test]
    fn eps_expiry_must_follow_issue() {
        let k = keys(1);
        let body = TxBody::Eps(EpsBody {
            p_t_id: Hash::ZERO,
            region_id: "R".into(),
            energy_price: 0.3,
            issued_at: 5,
            expiry: 5,
        });
        assert!(build_tx(body, &k[0]).is_err());
    }

    #[test]
    fn truncated_bytes_are_malformed() {
        let k = keys(1);
        let bytes = serialize_tx(&build_tx(esdp(1.0, 2.0), &k[0]).unwrap());
        for cut in [0, 1, 10, bytes.len() - 1] {
            assert!(matches!(
                deserialize_tx(&bytes[..cut]),
                Err(TxError::MalformedBytes(_))
            ));
        }
    }

    #[test]
    fn independent_builds_identical_bytes() {
        let a = build_tx(esdp(50.0, 80.0), &keys(1)[0]).unwrap();
        let b = build_tx(esdp(50.0, 80.0), &keys(1)[0]).unwrap();
        assert_eq!(serialize_tx(&a), serialize_tx(&b));
    }

    #[test]
    fn eps_chain_accepts_correct_links() {
        let k = keys(1);
        let mut chain: Vec<TxEnvelope> = Vec::new();
        let first = build_tx(eps(Hash::ZERO, 0.3), &k[0]).unwrap();
        assert!(validate_tx(&chain, &first, &TxPolicy::default()));
        chain.push(first.clone());
        let second = build_tx(eps(first.t_id, 0.4), &k[0]).unwrap();
        assert!(validate_tx(&chain, &second, &TxPolicy::default()));
    }

    #[test]
    fn eps_pointing_at_victim_rejected() {
        let k = keys(2);
        let (victim, attacker) = (&k[0], &k[1]);
        let v = build_tx(eps(Hash::ZERO, 0.3), victim).unwrap();
        let chain = vec![v.clone()];
        let forged = build_tx(eps(v.t_id, 0.01), attacker).unwrap();
        assert_eq!(
            check_tx(&chain, &forged, &TxPolicy::default()),
            Err(TxRejection::PrevTxMismatch)
        );
    }

    #[test]
    fn eps_skipping_latest_rejected() {
        let k = keys(1);
        let t0 = build_tx(eps(Hash::ZERO, 0.3), &k[0]).unwrap();
        let t1 = build_tx(eps(t0.t_id, 0.31), &k[0]).unwrap();
        let chain = vec![t0.clone(), t1];
        let skip = build_tx(eps(t0.t_id, 0.32), &k[0]).unwrap();
        assert_eq!(
            check_tx(&chain, &skip, &TxPolicy::default()),
            Err(TxRejection::PrevTxMismatch)
        );
    }

    #[test]
    fn impersonated_signer_rejected() {
        let k = keys(2);
        let mut tx = build_tx(eps(Hash::ZERO, 0.3), &k[1]).unwrap();
        tx.signer_pk = k[0].pk();
        assert_eq!(
            check_tx(&Vec::new(), &tx, &TxPolicy::default()),
            Err(TxRejection::BadSignature)
        );
    }

    #[test]
    fn flipped_signature_byte_rejected() {
        let k = keys(1);
        let mut tx = build_tx(esdp(1.0, 1.0), &k[0]).unwrap();
        tx.signature.0[10] ^= 1;
        assert!(!validate_tx(&Vec::new(), &tx, &TxPolicy::default()));
    }

    #[test]
    fn tampered_t_id_rejected() {
        let k = keys(1);
        let mut tx = build_tx(esdp(1.0, 1.0), &k[0]).unwrap();
        tx.t_id.0[0] ^= 1;
        assert_eq!(
            check_tx(&Vec::new(), &tx, &TxPolicy::default()),
            Err(TxRejection::TidMismatch)
        );
    }

    #[test]
    fn esdp_chaining_only_when_required() {
        let k = keys(1);
        let strict = TxPolicy {
            chain_esdp: true,
            ..TxPolicy::default()
        };
        let unchained = build_tx(esdp(1.0, 1.0), &k[0]).unwrap();
        assert!(validate_tx(&Vec::new(), &unchained, &TxPolicy::default()));
        assert_eq!(
            check_tx(&Vec::new(), &unchained, &strict),
            Err(TxRejection::PrevTxMismatch)
        );
        let mut body = match esdp(1.0, 1.0) {
            TxBody::Esdp(b) => b,
            _ => unreachable!(),
        };
        body.p_t_id = Some(Hash::ZERO);
        let chained = build_tx(TxBody::Esdp(body), &k[0]).unwrap();
        assert!(validate_tx(&Vec::new(), &chained, &strict));
    }

    #[test]
    fn overlay_prefers_pending() {
        let k = keys(1);
        let a = build_tx(eps(Hash::ZERO, 0.3), &k[0]).unwrap();
        let b = build_tx(eps(a.t_id, 0.4), &k[0]).unwrap();
        let chain = vec![a.clone()];
        let pending = vec![b.clone()];
        let view = Overlay::new(&chain, &pending);
        assert_eq!(view.latest_tx_by_pk(&k[0].pk()).unwrap().t_id, b.t_id);
        assert_eq!(next_prev_tx(&view, &k[0].pk()), b.t_id);
    }

    #[test]
    fn display_is_one_line_with_prefixes() {
        let k = keys(1);
        let tx = build_tx(eps(Hash::ZERO, 0.45), &k[0]).unwrap();
        let line = tx.to_string();
        assert!(line.starts_with(&format!("EPS t_id={} signer={}", tx.t_id.short(), k[0].pk().short())));
        assert!(line.contains("price=0.450000"));
        assert!(!line.contains('\n'));
    }

    #[test]
    fn kind_tag_mismatch_is_malformed() {
        let k = keys(1);
        let mut bytes = serialize_tx(&build_tx(esdp(1.0, 1.0), &k[0]).unwrap());
        // kind byte follows the 4-byte length prefix and 32-byte t_id
        bytes[36] = TxKind::Eps as u8;
        assert!(deserialize_tx(&bytes).is_err());
    }
}
