//! Keys, signatures, station certificates and per-trip one-time keys.

use alloc::collections::BTreeSet;
use alloc::string::String;
use core::fmt;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand_core::{CryptoRng, RngCore};

use crate::codec::{self, Decode, DecodeError, Encode, Reader, Writer};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub [u8; 32]);

impl PublicKey {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn short(&self) -> String {
        let mut s = codec::hex(&self.0);
        s.truncate(8);
        s
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.short())
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&codec::hex(&self.0))
    }
}

impl Encode for PublicKey {
    fn encode(&self, w: &mut Writer) {
        w.bytes(&self.0);
    }
}

impl Decode for PublicKey {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(PublicKey(r.array()?))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = codec::hex(&self.0);
        s.truncate(8);
        write!(f, "Signature({s})")
    }
}

impl Encode for Signature {
    fn encode(&self, w: &mut Writer) {
        w.bytes(&self.0);
    }
}

impl Decode for Signature {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Signature(r.array()?))
    }
}

/// Ed25519 key pair. The secret half has no canonical encoding and never
/// reaches a chain.
#[derive(Clone)]
pub struct KeyPair {
    pk: PublicKey,
    sk: SigningKey,
}

impl KeyPair {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        let sk = SigningKey::from_bytes(&seed);
        let pk = PublicKey(sk.verifying_key().to_bytes());
        Self { pk, sk }
    }

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    pub fn pk(&self) -> PublicKey {
        self.pk
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.sk.sign(msg).to_bytes())
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("pk", &self.pk).finish_non_exhaustive()
    }
}

/// Draws a fresh key pair from a seeded stream. A fixed seed yields a
/// reproducible sequence of keys.
pub fn generate_keypair<R: RngCore + CryptoRng>(rng: &mut R) -> KeyPair {
    KeyPair::generate(rng)
}

/// Strict Ed25519 verification. Malformed keys or non-canonical signatures
/// simply fail.
pub fn verify(pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(&pk.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    vk.verify_strict(msg, &sig).is_ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Role {
    ChargingStation = 1,
}

impl Encode for Role {
    fn encode(&self, w: &mut Writer) {
        w.u8(*self as u8);
    }
}

impl Decode for Role {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            1 => Ok(Role::ChargingStation),
            tag => Err(DecodeError::InvalidTag { what: "role", tag }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub subject_pk: PublicKey,
    pub subject_role: Role,
    pub station_id: String,
    pub ca_signature: Signature,
}

impl Certificate {
    /// The bytes the CA signs.
    pub fn signed_bytes(subject_pk: &PublicKey, role: Role, station_id: &str) -> alloc::vec::Vec<u8> {
        let mut w = Writer::new();
        w.put(subject_pk).put(&role).str(station_id);
        w.finish()
    }
}

impl Encode for Certificate {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.subject_pk)
            .put(&self.subject_role)
            .str(&self.station_id)
            .put(&self.ca_signature);
    }
}

impl Decode for Certificate {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Certificate {
            subject_pk: r.get()?,
            subject_role: r.get()?,
            station_id: r.string()?,
            ca_signature: r.get()?,
        })
    }
}

pub fn ca_issue(ca: &KeyPair, station_pk: PublicKey, station_id: &str) -> Certificate {
    let role = Role::ChargingStation;
    let msg = Certificate::signed_bytes(&station_pk, role, station_id);
    Certificate {
        subject_pk: station_pk,
        subject_role: role,
        station_id: station_id.into(),
        ca_signature: ca.sign(&msg),
    }
}

pub fn ca_verify(ca_pk: &PublicKey, cert: &Certificate) -> bool {
    let msg = Certificate::signed_bytes(&cert.subject_pk, cert.subject_role, &cert.station_id);
    verify(ca_pk, &msg, &cert.ca_signature)
}

/// The two keys an EV uses at the source and destination stations of one trip.
#[derive(Debug, Clone)]
pub struct OneTimeTripKeys {
    pub pk1: KeyPair,
    pub pk2: KeyPair,
    pub trip_nonce: u64,
}

/// Per-EV record of every key it has used. Lives only in the EV.
#[derive(Debug, Clone, Default)]
pub struct KeyRegistry {
    used: BTreeSet<PublicKey>,
    private_context: BTreeSet<PublicKey>,
    next_nonce: u64,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a key the EV uses outside public charging (home, office,
    /// fleet chain). Trip keys are never drawn from this set.
    pub fn add_private_key(&mut self, pk: PublicKey) {
        self.private_context.insert(pk);
    }

    pub fn is_used(&self, pk: &PublicKey) -> bool {
        self.used.contains(pk)
    }

    pub fn used_keys(&self) -> &BTreeSet<PublicKey> {
        &self.used
    }

    pub fn private_keys(&self) -> &BTreeSet<PublicKey> {
        &self.private_context
    }

    fn fresh<R: RngCore + CryptoRng>(&mut self, rng: &mut R) -> KeyPair {
        loop {
            let kp = KeyPair::generate(rng);
            let pk = kp.pk();
            if !self.used.contains(&pk) && !self.private_context.contains(&pk) {
                self.used.insert(pk);
                return kp;
            }
        }
    }

    pub fn derive_trip_keys<R: RngCore + CryptoRng>(&mut self, rng: &mut R) -> OneTimeTripKeys {
        let pk1 = self.fresh(rng);
        let pk2 = self.fresh(rng);
        let trip_nonce = self.next_nonce;
        self.next_nonce += 1;
        OneTimeTripKeys { pk1, pk2, trip_nonce }
    }
}

pub fn derive_trip_keys<R: RngCore + CryptoRng>(
    registry: &mut KeyRegistry,
    rng: &mut R,
) -> OneTimeTripKeys {
    registry.derive_trip_keys(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn same_seed_same_keys() {
        let a = generate_keypair(&mut rng(5));
        let b = generate_keypair(&mut rng(5));
        assert_eq!(a.pk(), b.pk());
    }

    #[test]
    fn successive_keys_differ() {
        let mut r = rng(5);
        assert_ne!(generate_keypair(&mut r).pk(), generate_keypair(&mut r).pk());
    }

    #[test]
    fn sign_verify_round_trip() {
        let kp = generate_keypair(&mut rng(1));
        let sig = kp.sign(b"abc");
        assert!(verify(&kp.pk(), b"abc", &sig));
        assert!(!verify(&kp.pk(), b"abd", &sig));
    }

    #[test]
    fn signing_is_deterministic() {
        let kp = generate_keypair(&mut rng(1));
        assert_eq!(kp.sign(b"abc"), kp.sign(b"abc"));
    }

    #[test]
    fn garbage_public_key_fails_cleanly() {
        let kp = generate_keypair(&mut rng(1));
        let sig = kp.sign(b"abc");
        assert!(!verify(&PublicKey([0xff; 32]), b"abc", &sig));
    }

    #[test]
    fn debug_does_not_leak_secret() {
        let kp = KeyPair::from_seed([7u8; 32]);
        let s = alloc::format!("{kp:?}");
        assert!(!s.contains("0707070707"));
    }

    #[test]
    fn ca_issue_then_verify() {
        let mut r = rng(2);
        let ca = generate_keypair(&mut r);
        let station = generate_keypair(&mut r);
        let cert = ca_issue(&ca, station.pk(), "A");
        assert!(ca_verify(&ca.pk(), &cert));
    }

    #[test]
    fn mutated_station_id_fails() {
        let mut r = rng(2);
        let ca = generate_keypair(&mut r);
        let station = generate_keypair(&mut r);
        let mut cert = ca_issue(&ca, station.pk(), "A");
        cert.station_id = String::from("B");
        assert!(!ca_verify(&ca.pk(), &cert));
    }

    #[test]
    fn certificate_bound_to_subject_key() {
        let mut r = rng(2);
        let ca = generate_keypair(&mut r);
        let p = generate_keypair(&mut r);
        let q = generate_keypair(&mut r);
        let mut cert = ca_issue(&ca, p.pk(), "A");
        cert.subject_pk = q.pk();
        assert!(!ca_verify(&ca.pk(), &cert));
    }

    #[test]
    fn self_signed_certificate_fails() {
        let mut r = rng(2);
        let ca = generate_keypair(&mut r);
        let rogue = generate_keypair(&mut r);
        let cert = ca_issue(&rogue, rogue.pk(), "A");
        assert!(!ca_verify(&ca.pk(), &cert));
    }

    #[test]
    fn hundred_trips_two_hundred_distinct_keys() {
        let mut reg = KeyRegistry::new();
        let mut r = rng(9);
        let mut all = BTreeSet::new();
        for i in 0..100 {
            let t = reg.derive_trip_keys(&mut r);
            assert_eq!(t.trip_nonce, i);
            assert_ne!(t.pk1.pk(), t.pk2.pk());
            all.insert(t.pk1.pk());
            all.insert(t.pk2.pk());
        }
        assert_eq!(all.len(), 200);
        assert_eq!(reg.used_keys(), &all);
    }

    #[test]
    fn trip_keys_disjoint_from_private_keys() {
        let mut r = rng(9);
        let mut reg = KeyRegistry::new();
        for _ in 0..3 {
            reg.add_private_key(generate_keypair(&mut r).pk());
        }
        for _ in 0..50 {
            reg.derive_trip_keys(&mut r);
        }
        assert!(reg.used_keys().is_disjoint(reg.private_keys()));
    }

    #[test]
    fn trip_keys_deterministic_per_seed() {
        let run = || {
            let mut reg = KeyRegistry::new();
            let mut r = rng(11);
            (0..5)
                .map(|_| {
                    let t = reg.derive_trip_keys(&mut r);
                    (t.pk1.pk(), t.pk2.pk())
                })
                .collect::<alloc::vec::Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn certificate_round_trip() {
        let mut r = rng(3);
        let ca = generate_keypair(&mut r);
        let cert = ca_issue(&ca, generate_keypair(&mut r).pk(), "S-01");
        let bytes = cert.to_canonical_bytes();
        assert_eq!(Certificate::from_canonical_bytes(&bytes).unwrap(), cert);
    }
}
