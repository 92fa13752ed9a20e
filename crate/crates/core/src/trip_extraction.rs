//! Anonymous verifiable trip extraction.
//!
//! An EV presents one-time key PK1 at its source station and PK2 at its
//! destination. Each station signs `hash(pk, t)` and `pk` and wraps both in a
//! presence transaction. The EV proves it owns both keys by signing the pair
//! of presence transaction ids with each secret key, and hands the claim to
//! the verifier set. Verifiers check the station certificates, the station
//! signatures, the ownership signatures, the timing and the station pair.
//! With a quorum of acceptances the lead verifier emits a key-free
//! `TripRecord` for the public chain; claim and verdicts always go to the
//! verifiers' consortium chain.

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};
use crate::hash::Hash;
use crate::identity::{self, ca_verify, Certificate, KeyPair, OneTimeTripKeys, PublicKey, Signature};
use crate::ledger::{Chain, LedgerError};
use crate::txvocab::{build_tx, PresenceBody, TripRecordBody, TxBody, TxEnvelope, TxKind, TxPolicy};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("presented key is not docked at station {0}")]
    NotPresent(String),
    #[error("quorum not reached: {have} of {need} verdicts")]
    QuorumNotReached { have: usize, need: usize },
    #[error("quorum must be between 1 and the number of verifiers")]
    InvalidQuorum,
    #[error("need at least two verifiers so the consortium chain has a backup manager")]
    TooFewVerifiers,
    #[error("claim already finalized")]
    AlreadyFinalized,
    #[error("verdict from a key outside the verifier set")]
    UnknownVerifier,
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// The digest a station signs: hash of the canonical `(pk, tick)` pair.
pub fn presence_digest(pk: &PublicKey, tick: u64) -> Hash {
    let mut w = Writer::new();
    w.put(pk).u64(tick);
    Hash::digest(w.as_slice())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresenceRole {
    Source,
    Destination,
}

/// A certified charging station. It only attests keys presented by vehicles
/// physically docked at it.
#[derive(Debug, Clone)]
pub struct ChargingStation {
    keypair: KeyPair,
    certificate: Certificate,
    docked: BTreeSet<PublicKey>,
}

impl ChargingStation {
    pub fn new(keypair: KeyPair, certificate: Certificate) -> Self {
        Self {
            keypair,
            certificate,
            docked: BTreeSet::new(),
        }
    }

    pub fn station_id(&self) -> &str {
        &self.certificate.station_id
    }

    pub fn pk(&self) -> PublicKey {
        self.keypair.pk()
    }

    pub fn certificate(&self) -> &Certificate {
        &self.certificate
    }

    /// A vehicle presenting `pk` has physically docked.
    pub fn dock(&mut self, pk: PublicKey) {
        self.docked.insert(pk);
    }

    pub fn undock(&mut self, pk: &PublicKey) {
        self.docked.remove(pk);
    }

    pub fn is_docked(&self, pk: &PublicKey) -> bool {
        self.docked.contains(pk)
    }

    pub fn attest(
        &self,
        role: PresenceRole,
        presented_pk: PublicKey,
        tick: u64,
    ) -> Result<TxEnvelope, ProtocolError> {
        if !self.is_docked(&presented_pk) {
            return Err(ProtocolError::NotPresent(self.station_id().into()));
        }
        let digest = presence_digest(&presented_pk, tick);
        let body = PresenceBody {
            presented_pk,
            tick,
            station_signature_over_hash: self.keypair.sign(digest.as_bytes()),
            station_signature_over_pk: self.keypair.sign(presented_pk.as_bytes()),
            station_cert: self.certificate.clone(),
        };
        let body = match role {
            PresenceRole::Source => TxBody::SourcePresence(body),
            PresenceRole::Destination => TxBody::DestinationPresence(body),
        };
        Ok(build_tx(body, &self.keypair).expect("presence bodies have no invariants to violate"))
    }
}

pub fn station_attest(
    station: &ChargingStation,
    role: PresenceRole,
    presented_pk: PublicKey,
    tick: u64,
) -> Result<TxEnvelope, ProtocolError> {
    station.attest(role, presented_pk, tick)
}

/// Source and destination presence plus proof of ownership of both keys.
#[derive(Debug, Clone, PartialEq)]
pub struct TripClaim {
    pub source_tx: TxEnvelope,
    pub dest_tx: TxEnvelope,
    pub ownership_sig_1: Signature,
    pub ownership_sig_2: Signature,
}

impl TripClaim {
    /// Bytes both one-time keys sign: the canonical pair of presence t_ids.
    pub fn ownership_message(source_t_id: &Hash, dest_t_id: &Hash) -> Vec<u8> {
        let mut w = Writer::new();
        w.put(source_t_id).put(dest_t_id);
        w.finish()
    }

    pub fn sign(source_tx: TxEnvelope, dest_tx: TxEnvelope, keys: &OneTimeTripKeys) -> Self {
        let msg = Self::ownership_message(&source_tx.t_id, &dest_tx.t_id);
        TripClaim {
            ownership_sig_1: keys.pk1.sign(&msg),
            ownership_sig_2: keys.pk2.sign(&msg),
            source_tx,
            dest_tx,
        }
    }

    pub fn claim_hash(&self) -> Hash {
        Hash::of(self)
    }

    pub fn source(&self) -> Option<&PresenceBody> {
        match &self.source_tx.body {
            TxBody::SourcePresence(p) => Some(p),
            _ => None,
        }
    }

    pub fn destination(&self) -> Option<&PresenceBody> {
        match &self.dest_tx.body {
            TxBody::DestinationPresence(p) => Some(p),
            _ => None,
        }
    }
}

impl Encode for TripClaim {
    fn encode(&self, w: &mut Writer) {
        w.bytes(&self.source_tx.to_canonical_bytes())
            .bytes(&self.dest_tx.to_canonical_bytes())
            .put(&self.ownership_sig_1)
            .put(&self.ownership_sig_2);
    }
}

impl Decode for TripClaim {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(TripClaim {
            source_tx: TxEnvelope::from_canonical_bytes(r.bytes()?)?,
            dest_tx: TxEnvelope::from_canonical_bytes(r.bytes()?)?,
            ownership_sig_1: r.get()?,
            ownership_sig_2: r.get()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum RejectReason {
    /// Presence transactions of the wrong kind.
    Malformed = 1,
    Certificate = 2,
    StationSignature = 3,
    Ownership = 4,
    Timing = 5,
    SameStation = 6,
    Replay = 7,
}

impl RejectReason {
    pub const ALL: [RejectReason; 7] = [
        RejectReason::Malformed,
        RejectReason::Certificate,
        RejectReason::StationSignature,
        RejectReason::Ownership,
        RejectReason::Timing,
        RejectReason::SameStation,
        RejectReason::Replay,
    ];

    pub fn code(self) -> &'static str {
        match self {
            RejectReason::Malformed => "malformed",
            RejectReason::Certificate => "certificate",
            RejectReason::StationSignature => "station_signature",
            RejectReason::Ownership => "ownership",
            RejectReason::Timing => "timing",
            RejectReason::SameStation => "same_station",
            RejectReason::Replay => "replay",
        }
    }

    fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|r| *r as u8 == v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verdict {
    Accepted,
    Rejected(RejectReason),
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Accepted => f.write_str("accepted"),
            Verdict::Rejected(r) => write!(f, "rejected:{}", r.code()),
        }
    }
}

impl Encode for Verdict {
    fn encode(&self, w: &mut Writer) {
        w.u8(match self {
            Verdict::Accepted => 0,
            Verdict::Rejected(r) => *r as u8,
        });
    }
}

impl Decode for Verdict {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(Verdict::Accepted),
            tag => RejectReason::from_u8(tag)
                .map(Verdict::Rejected)
                .ok_or(DecodeError::InvalidTag { what: "verdict", tag }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerdictRecord {
    pub claim_hash: Hash,
    pub verdict: Verdict,
    pub verifier_pk: PublicKey,
    pub tick: u64,
}

impl Encode for VerdictRecord {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.claim_hash)
            .put(&self.verdict)
            .put(&self.verifier_pk)
            .u64(self.tick);
    }
}

impl Decode for VerdictRecord {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(VerdictRecord {
            claim_hash: r.get()?,
            verdict: r.get()?,
            verifier_pk: r.get()?,
            tick: r.u64()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClaimTicket {
    pub claim_hash: Hash,
}

#[derive(Debug, Clone)]
pub struct Verifier {
    keypair: KeyPair,
    queue: Vec<TripClaim>,
    /// claims this verifier has queued or judged
    seen: BTreeSet<Hash>,
    /// one-time keys already used by a finalized accepted claim
    consumed: BTreeSet<PublicKey>,
}

impl Verifier {
    pub fn new(keypair: KeyPair) -> Self {
        Self {
            keypair,
            queue: Vec::new(),
            seen: BTreeSet::new(),
            consumed: BTreeSet::new(),
        }
    }

    pub fn pk(&self) -> PublicKey {
        self.keypair.pk()
    }

    pub fn has_consumed(&self, pk: &PublicKey) -> bool {
        self.consumed.contains(pk)
    }

    pub fn consumed_keys(&self) -> &BTreeSet<PublicKey> {
        &self.consumed
    }

    /// Queues a claim unless it has been seen before.
    pub fn enqueue(&mut self, claim: TripClaim) -> bool {
        if self.seen.insert(claim.claim_hash()) {
            self.queue.push(claim);
            true
        } else {
            false
        }
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }
}

fn judge(verifier: &Verifier, claim: &TripClaim, ca_pk: &PublicKey) -> Verdict {
    use RejectReason::*;
    let (Some(src), Some(dst)) = (claim.source(), claim.destination()) else {
        return Verdict::Rejected(Malformed);
    };
    if !ca_verify(ca_pk, &src.station_cert) || !ca_verify(ca_pk, &dst.station_cert) {
        return Verdict::Rejected(Certificate);
    }
    for (tx, p) in [(&claim.source_tx, src), (&claim.dest_tx, dst)] {
        let station_ok = tx.signer_pk == p.station_cert.subject_pk
            && tx.t_id_valid()
            && tx.signature_valid()
            && crate::txvocab::check_presence(p, Some(&tx.signer_pk), None).is_ok();
        if !station_ok {
            return Verdict::Rejected(StationSignature);
        }
    }
    let msg = TripClaim::ownership_message(&claim.source_tx.t_id, &claim.dest_tx.t_id);
    if !identity::verify(&src.presented_pk, &msg, &claim.ownership_sig_1)
        || !identity::verify(&dst.presented_pk, &msg, &claim.ownership_sig_2)
    {
        return Verdict::Rejected(Ownership);
    }
    if dst.tick <= src.tick {
        return Verdict::Rejected(Timing);
    }
    if src.station_cert.station_id == dst.station_cert.station_id {
        return Verdict::Rejected(SameStation);
    }
    if src.presented_pk == dst.presented_pk
        || verifier.has_consumed(&src.presented_pk)
        || verifier.has_consumed(&dst.presented_pk)
    {
        return Verdict::Rejected(Replay);
    }
    Verdict::Accepted
}

/// One verifier's verdict on a claim. The reason is the first failing
/// check in the order: kinds, certificates, station signatures, ownership,
/// timing, distinct stations, key replay.
pub fn verify_claim(verifier: &Verifier, claim: &TripClaim, ca_pk: &PublicKey, tick: u64) -> VerdictRecord {
    VerdictRecord {
        claim_hash: claim.claim_hash(),
        verdict: judge(verifier, claim, ca_pk),
        verifier_pk: verifier.pk(),
        tick,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finalization {
    pub claim_hash: Hash,
    pub accepted_count: usize,
    /// Key-free record for the public chain, present iff quorum accepted.
    pub trip_record: Option<TxEnvelope>,
    /// Verdict reported for the claim as a whole: accepted, or the most
    /// common rejection reason among the verdicts.
    pub outcome: Verdict,
}

impl Finalization {
    pub fn accepted(&self) -> bool {
        self.trip_record.is_some()
    }
}

/// `ceil((n + 1) / 2)`
pub fn default_quorum(n: usize) -> usize {
    n / 2 + 1
}

/// The verifier nodes, their quorum rule and their consortium chain.
#[derive(Debug, Clone)]
pub struct VerifierSet {
    verifiers: Vec<Verifier>,
    quorum: usize,
    ca_pk: PublicKey,
    consortium: Chain,
    pending_archive: Vec<TxEnvelope>,
    finalized: BTreeSet<Hash>,
}

impl VerifierSet {
    /// The first key manages the consortium chain; the rest are its backups.
    pub fn new(
        keys: Vec<KeyPair>,
        quorum: Option<usize>,
        ca_pk: PublicKey,
        consortium_id: &str,
        anchor_period: u64,
    ) -> Result<Self, ProtocolError> {
        if keys.len() < 2 {
            return Err(ProtocolError::TooFewVerifiers);
        }
        let quorum = quorum.unwrap_or_else(|| default_quorum(keys.len()));
        if quorum == 0 || quorum > keys.len() {
            return Err(ProtocolError::InvalidQuorum);
        }
        let consortium = Chain::child(
            consortium_id,
            keys[0].pk(),
            keys[1..].iter().map(KeyPair::pk).collect(),
            anchor_period,
            TxPolicy {
                ca_pk: Some(ca_pk),
                chain_esdp: false,
            },
        )?;
        Ok(Self {
            verifiers: keys.into_iter().map(Verifier::new).collect(),
            quorum,
            ca_pk,
            consortium,
            pending_archive: Vec::new(),
            finalized: BTreeSet::new(),
        })
    }

    pub fn quorum(&self) -> usize {
        self.quorum
    }

    pub fn verifiers(&self) -> &[Verifier] {
        &self.verifiers
    }

    pub fn ca_pk(&self) -> &PublicKey {
        &self.ca_pk
    }

    pub fn consortium(&self) -> &Chain {
        &self.consortium
    }

    pub fn pending_archive(&self) -> &[TxEnvelope] {
        &self.pending_archive
    }

    fn lead_index(&self) -> usize {
        let manager = self.consortium.manager_pk();
        self.verifiers
            .iter()
            .position(|v| Some(v.pk()) == manager)
            .expect("consortium manager is always a verifier")
    }

    /// The verifier currently managing the consortium chain; it signs trip
    /// records and seals consortium blocks.
    pub fn lead(&self) -> &Verifier {
        &self.verifiers[self.lead_index()]
    }

    pub fn lead_keypair(&self) -> &KeyPair {
        &self.verifiers[self.lead_index()].keypair
    }

    pub fn is_finalized(&self, claim_hash: &Hash) -> bool {
        self.finalized.contains(claim_hash)
    }

    /// Queues the claim at every verifier; resubmissions are ignored.
    pub fn submit_claim(&mut self, claim: TripClaim) -> ClaimTicket {
        let claim_hash = claim.claim_hash();
        for v in &mut self.verifiers {
            v.enqueue(claim.clone());
        }
        ClaimTicket { claim_hash }
    }

    /// Every verifier judges its queue. Returns one entry per distinct
    /// claim in submission order with all verdicts issued for it.
    pub fn collect_verdicts(&mut self, tick: u64) -> Vec<(TripClaim, Vec<VerdictRecord>)> {
        let mut out: Vec<(TripClaim, Vec<VerdictRecord>)> = Vec::new();
        for i in 0..self.verifiers.len() {
            let queue = core::mem::take(&mut self.verifiers[i].queue);
            for claim in queue {
                let record = verify_claim(&self.verifiers[i], &claim, &self.ca_pk, tick);
                match out.iter_mut().find(|(_, recs)| recs[0].claim_hash == record.claim_hash) {
                    Some((_, recs)) => recs.push(record),
                    None => out.push((claim, alloc::vec![record])),
                }
            }
        }
        out
    }

    /// Applies the quorum rule. Always archives the claim and its verdicts
    /// for the consortium chain; returns a trip record iff accepted.
    pub fn finalize_claim(
        &mut self,
        claim: &TripClaim,
        verdicts: &[VerdictRecord],
    ) -> Result<Finalization, ProtocolError> {
        let claim_hash = claim.claim_hash();
        if self.finalized.contains(&claim_hash) {
            return Err(ProtocolError::AlreadyFinalized);
        }
        let mut voters = BTreeSet::new();
        let mut relevant = Vec::new();
        for v in verdicts {
            if v.claim_hash != claim_hash {
                continue;
            }
            if !self.verifiers.iter().any(|x| x.pk() == v.verifier_pk) {
                return Err(ProtocolError::UnknownVerifier);
            }
            if voters.insert(v.verifier_pk) {
                relevant.push(v);
            }
        }
        if relevant.len() < self.quorum {
            return Err(ProtocolError::QuorumNotReached {
                have: relevant.len(),
                need: self.quorum,
            });
        }
        let accepted_count = relevant.iter().filter(|v| v.verdict.is_accepted()).count();
        let lead = self.lead_index();

        let trip_record = if accepted_count >= self.quorum {
            let (src, dst) = (
                claim.source().expect("accepted claims are well formed"),
                claim.destination().expect("accepted claims are well formed"),
            );
            let body = TripRecordBody {
                origin_station_id: src.station_cert.station_id.clone(),
                destination_station_id: dst.station_cert.station_id.clone(),
                t_start: src.tick,
                t_end: dst.tick,
            };
            let tx = build_tx(TxBody::TripRecord(body), &self.verifiers[lead].keypair)
                .expect("accepted claims satisfy trip record invariants");
            for v in &mut self.verifiers {
                v.consumed.insert(src.presented_pk);
                v.consumed.insert(dst.presented_pk);
            }
            Some(tx)
        } else {
            None
        };

        let archive_claim = build_tx(TxBody::TripClaim(Box::new(claim.clone())), &self.verifiers[lead].keypair);
        match archive_claim {
            Ok(tx) => self.pending_archive.push(tx),
            // Claims whose presence transactions have the wrong kinds cannot
            // be wrapped as a claim body; archive what was received instead.
            Err(_) => {
                for tx in [&claim.source_tx, &claim.dest_tx] {
                    if matches!(tx.kind(), TxKind::SourcePresence | TxKind::DestinationPresence)
                        && tx.signature_valid()
                    {
                        self.pending_archive.push(tx.clone());
                    }
                }
            }
        }
        for v in &relevant {
            let signer = self
                .verifiers
                .iter()
                .find(|x| x.pk() == v.verifier_pk)
                .expect("checked above");
            let tx = build_tx(TxBody::Verdict((*v).clone()), &signer.keypair)
                .expect("verdict bodies have no invariants to violate");
            self.pending_archive.push(tx);
        }
        self.finalized.insert(claim_hash);

        let outcome = if trip_record.is_some() {
            Verdict::Accepted
        } else {
            majority_rejection(&relevant)
        };
        Ok(Finalization {
            claim_hash,
            accepted_count,
            trip_record,
            outcome,
        })
    }

    /// Seals pending archive transactions into a consortium block.
    /// Returns false when there was nothing to seal.
    pub fn seal_block(&mut self, tick: u64) -> Result<bool, ProtocolError> {
        if self.pending_archive.is_empty() {
            return Ok(false);
        }
        let txs = core::mem::take(&mut self.pending_archive);
        let lead = self.lead_index();
        let producer = self.verifiers[lead].keypair.clone();
        match self.consortium.append_block(txs.clone(), &producer, tick) {
            Ok(_) => Ok(true),
            Err(e) => {
                self.pending_archive = txs;
                Err(e.into())
            }
        }
    }

    /// Hands consortium management to the next backup verifier.
    pub fn failover(&mut self) -> Result<PublicKey, ProtocolError> {
        Ok(self.consortium.failover()?)
    }
}

fn majority_rejection(verdicts: &[&VerdictRecord]) -> Verdict {
    let mut best: Option<(RejectReason, usize)> = None;
    for reason in RejectReason::ALL {
        let n = verdicts
            .iter()
            .filter(|v| v.verdict == Verdict::Rejected(reason))
            .count();
        if n > 0 && best.is_none_or(|(_, m)| n > m) {
            best = Some((reason, n));
        }
    }
    best.map(|(r, _)| Verdict::Rejected(r))
        .unwrap_or(Verdict::Rejected(RejectReason::Malformed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{ca_issue, generate_keypair, KeyRegistry};
    use crate::ledger::validate_chain;
    use crate::txvocab::TxKind;
    use alloc::vec;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct World {
        rng: ChaCha20Rng,
        ca: KeyPair,
        a: ChargingStation,
        b: ChargingStation,
        registry: KeyRegistry,
    }

    impl World {
        fn new() -> Self {
            let mut rng = ChaCha20Rng::seed_from_u64(21);
            let ca = generate_keypair(&mut rng);
            let ka = generate_keypair(&mut rng);
            let kb = generate_keypair(&mut rng);
            let a = ChargingStation::new(ka.clone(), ca_issue(&ca, ka.pk(), "A"));
            let b = ChargingStation::new(kb.clone(), ca_issue(&ca, kb.pk(), "B"));
            World {
                rng,
                ca,
                a,
                b,
                registry: KeyRegistry::new(),
            }
        }

        fn verifiers(&mut self, n: usize, quorum: Option<usize>) -> VerifierSet {
            let keys = (0..n).map(|_| generate_keypair(&mut self.rng)).collect();
            VerifierSet::new(keys, quorum, self.ca.pk(), "verifiers", 10).unwrap()
        }

        fn trip(&mut self, t1: u64, t2: u64) -> (TripClaim, OneTimeTripKeys) {
            let keys = self.registry.derive_trip_keys(&mut self.rng);
            self.a.dock(keys.pk1.pk());
            let src = self.a.attest(PresenceRole::Source, keys.pk1.pk(), t1).unwrap();
            self.b.dock(keys.pk2.pk());
            let dst = self.b.attest(PresenceRole::Destination, keys.pk2.pk(), t2).unwrap();
            (TripClaim::sign(src, dst, &keys), keys)
        }
    }

    #[test]
    fn attested_presence_verifies() {
        let mut w = World::new();
        let kp = generate_keypair(&mut w.rng);
        w.a.dock(kp.pk());
        let tx = w.a.attest(PresenceRole::Source, kp.pk(), 12).unwrap();
        assert_eq!(tx.kind(), TxKind::SourcePresence);
        let TxBody::SourcePresence(p) = &tx.body else { panic!() };
        assert_eq!(p.tick, 12);
        // independent recomputation of hash(PK1, 12)
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&32u32.to_be_bytes());
        bytes.extend_from_slice(kp.pk().as_bytes());
        bytes.extend_from_slice(&12u64.to_be_bytes());
        let digest = Hash::digest(&bytes);
        assert_eq!(digest, presence_digest(&kp.pk(), 12));
        assert!(identity::verify(&w.a.pk(), digest.as_bytes(), &p.station_signature_over_hash));
        assert!(identity::verify(&w.a.pk(), kp.pk().as_bytes(), &p.station_signature_over_pk));
    }

    #[test]
    fn undocked_key_not_attested() {
        let mut w = World::new();
        let kp = generate_keypair(&mut w.rng);
        assert_eq!(
            w.a.attest(PresenceRole::Source, kp.pk(), 1).unwrap_err(),
            ProtocolError::NotPresent("A".into())
        );
        w.a.dock(kp.pk());
        w.a.undock(&kp.pk());
        assert!(w.a.attest(PresenceRole::Source, kp.pk(), 1).is_err());
    }

    #[test]
    fn valid_claim_accepted() {
        let mut w = World::new();
        let set = w.verifiers(3, None);
        let (claim, _) = w.trip(10, 20);
        let v = verify_claim(&set.verifiers()[0], &claim, &w.ca.pk(), 21);
        assert_eq!(v.verdict, Verdict::Accepted);
        assert_eq!(v.claim_hash, Hash::of(&claim));
    }

    #[test]
    fn wrong_ownership_key_rejected() {
        let mut w = World::new();
        let set = w.verifiers(3, None);
        let (mut claim, _) = w.trip(10, 20);
        let third = generate_keypair(&mut w.rng);
        let msg = TripClaim::ownership_message(&claim.source_tx.t_id, &claim.dest_tx.t_id);
        claim.ownership_sig_1 = third.sign(&msg);
        let v = verify_claim(&set.verifiers()[0], &claim, &w.ca.pk(), 21);
        assert_eq!(v.verdict, Verdict::Rejected(RejectReason::Ownership));
    }

    #[test]
    fn self_signed_station_rejected() {
        let mut w = World::new();
        let set = w.verifiers(3, None);
        let rogue = generate_keypair(&mut w.rng);
        let mut fake = ChargingStation::new(rogue.clone(), ca_issue(&rogue, rogue.pk(), "A"));
        let keys = w.registry.derive_trip_keys(&mut w.rng);
        fake.dock(keys.pk1.pk());
        let src = fake.attest(PresenceRole::Source, keys.pk1.pk(), 1).unwrap();
        w.b.dock(keys.pk2.pk());
        let dst = w.b.attest(PresenceRole::Destination, keys.pk2.pk(), 5).unwrap();
        let claim = TripClaim::sign(src, dst, &keys);
        let v = verify_claim(&set.verifiers()[0], &claim, &w.ca.pk(), 6);
        assert_eq!(v.verdict, Verdict::Rejected(RejectReason::Certificate));
    }

    #[test]
    fn inverted_times_and_same_station_rejected() {
        let mut w = World::new();
        let set = w.verifiers(3, None);
        let (claim, _) = w.trip(20, 20);
        assert_eq!(
            verify_claim(&set.verifiers()[0], &claim, &w.ca.pk(), 21).verdict,
            Verdict::Rejected(RejectReason::Timing)
        );
        let keys = w.registry.derive_trip_keys(&mut w.rng);
        w.a.dock(keys.pk1.pk());
        w.a.dock(keys.pk2.pk());
        let src = w.a.attest(PresenceRole::Source, keys.pk1.pk(), 1).unwrap();
        let dst = w.a.attest(PresenceRole::Destination, keys.pk2.pk(), 4).unwrap();
        let claim = TripClaim::sign(src, dst, &keys);
        assert_eq!(
            verify_claim(&set.verifiers()[0], &claim, &w.ca.pk(), 5).verdict,
            Verdict::Rejected(RejectReason::SameStation)
        );
    }

    #[test]
    fn swapped_presence_kinds_malformed() {
        let mut w = World::new();
        let set = w.verifiers(2, None);
        let (mut claim, _) = w.trip(1, 2);
        core::mem::swap(&mut claim.source_tx, &mut claim.dest_tx);
        assert_eq!(
            verify_claim(&set.verifiers()[0], &claim, &w.ca.pk(), 3).verdict,
            Verdict::Rejected(RejectReason::Malformed)
        );
    }

    #[test]
    fn submit_dedups_and_ticket_is_claim_hash() {
        let mut w = World::new();
        let mut set = w.verifiers(3, None);
        let (claim, _) = w.trip(1, 5);
        let t1 = set.submit_claim(claim.clone());
        let t2 = set.submit_claim(claim.clone());
        assert_eq!(t1, t2);
        assert_eq!(t1.claim_hash, Hash::of(&claim));
        let verdicts = set.collect_verdicts(6);
        assert_eq!(verdicts.len(), 1);
        assert_eq!(verdicts[0].1.len(), 3);
        // resubmitting after judging yields nothing new
        set.submit_claim(claim);
        assert!(set.collect_verdicts(7).is_empty());
    }

    fn verdicts(set: &VerifierSet, claim: &TripClaim, pattern: &[bool]) -> Vec<VerdictRecord> {
        pattern
            .iter()
            .zip(set.verifiers())
            .map(|(ok, v)| VerdictRecord {
                claim_hash: claim.claim_hash(),
                verdict: if *ok {
                    Verdict::Accepted
                } else {
                    Verdict::Rejected(RejectReason::Ownership)
                },
                verifier_pk: v.pk(),
                tick: 9,
            })
            .collect()
    }

    #[test]
    fn quorum_two_of_three_accepts() {
        let mut w = World::new();
        let mut set = w.verifiers(3, Some(2));
        let (claim, _) = w.trip(1, 5);
        let vs = verdicts(&set, &claim, &[true, true, false]);
        let fin = set.finalize_claim(&claim, &vs).unwrap();
        let tx = fin.trip_record.expect("accepted");
        assert_eq!(
            tx.body,
            TxBody::TripRecord(TripRecordBody {
                origin_station_id: "A".into(),
                destination_station_id: "B".into(),
                t_start: 1,
                t_end: 5
            })
        );
        // claim + 3 verdicts archived
        assert_eq!(set.pending_archive().len(), 4);
        assert!(set.seal_block(9).unwrap());
        assert_eq!(set.consortium().tx_count(), 4);
        assert!(validate_chain(set.consortium()));
    }

    #[test]
    fn quorum_one_of_three_only_archives() {
        let mut w = World::new();
        let mut set = w.verifiers(3, Some(2));
        let (claim, _) = w.trip(1, 5);
        let vs = verdicts(&set, &claim, &[false, false, true]);
        let fin = set.finalize_claim(&claim, &vs).unwrap();
        assert!(fin.trip_record.is_none());
        assert_eq!(fin.outcome, Verdict::Rejected(RejectReason::Ownership));
        assert_eq!(set.pending_archive().len(), 4);
    }

    #[test]
    fn too_few_verdicts() {
        let mut w = World::new();
        let mut set = w.verifiers(3, Some(2));
        let (claim, _) = w.trip(1, 5);
        let vs = verdicts(&set, &claim, &[true]);
        assert_eq!(
            set.finalize_claim(&claim, &vs).unwrap_err(),
            ProtocolError::QuorumNotReached { have: 1, need: 2 }
        );
        // duplicates from one verifier do not count twice
        let dup = vec![vs[0].clone(), vs[0].clone()];
        assert!(set.finalize_claim(&claim, &dup).is_err());
    }

    #[test]
    fn trip_record_has_no_trip_keys() {
        let mut w = World::new();
        let mut set = w.verifiers(3, None);
        let (claim, keys) = w.trip(3, 8);
        set.submit_claim(claim);
        let (claim, vs) = set.collect_verdicts(8).remove(0);
        let tx = set.finalize_claim(&claim, &vs).unwrap().trip_record.unwrap();
        let bytes = tx.to_canonical_bytes();
        for pk in [keys.pk1.pk(), keys.pk2.pk()] {
            assert!(!bytes.windows(32).any(|win| win == pk.as_bytes()));
        }
    }

    #[test]
    fn reused_source_key_is_replay() {
        let mut w = World::new();
        let mut set = w.verifiers(3, None);
        let (claim, keys) = w.trip(3, 8);
        set.submit_claim(claim);
        let (claim, vs) = set.collect_verdicts(8).remove(0);
        assert!(set.finalize_claim(&claim, &vs).unwrap().accepted());

        // same PK1 presented again on a later trip
        let fresh = w.registry.derive_trip_keys(&mut w.rng);
        let replayed = OneTimeTripKeys {
            pk1: keys.pk1.clone(),
            pk2: fresh.pk2.clone(),
            trip_nonce: 99,
        };
        let src = w.a.attest(PresenceRole::Source, keys.pk1.pk(), 20).unwrap();
        w.b.dock(fresh.pk2.pk());
        let dst = w.b.attest(PresenceRole::Destination, fresh.pk2.pk(), 30).unwrap();
        let again = TripClaim::sign(src, dst, &replayed);
        let v = verify_claim(&set.verifiers()[1], &again, &w.ca.pk(), 31);
        assert_eq!(v.verdict, Verdict::Rejected(RejectReason::Replay));
    }

    #[test]
    fn mixed_claims_fail_ownership() {
        let mut w = World::new();
        let set = w.verifiers(3, None);
        let (c1, _) = w.trip(1, 5);
        let (c2, _) = w.trip(6, 9);
        let mixed = TripClaim {
            source_tx: c1.source_tx.clone(),
            dest_tx: c2.dest_tx.clone(),
            ownership_sig_1: c1.ownership_sig_1,
            ownership_sig_2: c2.ownership_sig_2,
        };
        assert_eq!(
            verify_claim(&set.verifiers()[0], &mixed, &w.ca.pk(), 10).verdict,
            Verdict::Rejected(RejectReason::Ownership)
        );
    }

    #[test]
    fn finalize_twice_rejected() {
        let mut w = World::new();
        let mut set = w.verifiers(2, None);
        let (claim, _) = w.trip(1, 5);
        let vs = verdicts(&set, &claim, &[true, true]);
        set.finalize_claim(&claim, &vs).unwrap();
        assert_eq!(set.finalize_claim(&claim, &vs).unwrap_err(), ProtocolError::AlreadyFinalized);
    }

    #[test]
    fn quorum_bounds() {
        let mut w = World::new();
        let keys: Vec<_> = (0..3).map(|_| generate_keypair(&mut w.rng)).collect();
        assert_eq!(
            VerifierSet::new(keys.clone(), Some(0), w.ca.pk(), "v", 10).unwrap_err(),
            ProtocolError::InvalidQuorum
        );
        assert_eq!(
            VerifierSet::new(keys.clone(), Some(4), w.ca.pk(), "v", 10).unwrap_err(),
            ProtocolError::InvalidQuorum
        );
        assert_eq!(default_quorum(1), 1);
        assert_eq!(default_quorum(3), 2);
        assert_eq!(default_quorum(4), 3);
        assert_eq!(default_quorum(5), 3);
    }

    #[test]
    fn claim_codec_round_trip() {
        let mut w = World::new();
        let (claim, _) = w.trip(1, 5);
        let bytes = claim.to_canonical_bytes();
        assert_eq!(TripClaim::from_canonical_bytes(&bytes).unwrap(), claim);
    }

    #[test]
    fn lead_changes_after_failover() {
        let mut w = World::new();
        let mut set = w.verifiers(3, None);
        let first = set.lead().pk();
        let (claim, _) = w.trip(1, 5);
        set.submit_claim(claim);
        let (claim, vs) = set.collect_verdicts(5).remove(0);
        set.finalize_claim(&claim, &vs).unwrap();
        set.seal_block(5).unwrap();
        let next = set.failover().unwrap();
        assert_ne!(first, next);
        assert_eq!(set.lead().pk(), next);
        let (claim, _) = w.trip(6, 9);
        set.submit_claim(claim);
        let (claim, vs) = set.collect_verdicts(9).remove(0);
        let fin = set.finalize_claim(&claim, &vs).unwrap();
        assert_eq!(fin.trip_record.unwrap().signer_pk, next);
        set.seal_block(9).unwrap();
        assert!(validate_chain(set.consortium()));
    }
}
