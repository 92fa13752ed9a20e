//! Adversarial artifacts and the standalone attack arena.
//!
//! Every generator returns the artifact together with the reason code an
//! honest validator must reject it with. The arena feeds artifacts through
//! the real validation paths (`check_tx` for price signals, the verifier
//! set for trip claims) and tallies the outcomes.

use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Result};
use iome_core::identity::{ca_issue, generate_keypair, KeyPair, KeyRegistry, OneTimeTripKeys};
use iome_core::ledger::Chain;
use iome_core::market::{issue_eps, PriceSignal};
use iome_core::trip_extraction::{ChargingStation, PresenceRole, RejectReason, TripClaim, VerifierSet};
use iome_core::txvocab::{
    build_tx, check_tx, next_prev_tx, ChainView, EpsBody, Overlay, TxBody, TxEnvelope, TxPolicy, TxRejection,
};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::config::ScenarioConfig;
use crate::rng::derive_rng;
use crate::truth::AttackRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttackSuite {
    /// Forged or replayed price signals.
    Sybil,
    ForgedCert,
    /// Presenting an already consumed one-time key.
    Replay,
    MixAndMatch,
    InvertedTime,
    SameStation,
}

impl AttackSuite {
    pub const ALL: [AttackSuite; 6] = [
        AttackSuite::Sybil,
        AttackSuite::ForgedCert,
        AttackSuite::Replay,
        AttackSuite::MixAndMatch,
        AttackSuite::InvertedTime,
        AttackSuite::SameStation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackSuite::Sybil => "sybil",
            AttackSuite::ForgedCert => "forged_cert",
            AttackSuite::Replay => "replay",
            AttackSuite::MixAndMatch => "mix_and_match",
            AttackSuite::InvertedTime => "inverted_time",
            AttackSuite::SameStation => "same_station",
        }
    }

    pub fn count_in(self, cfg: &crate::config::AttackConfig) -> u32 {
        match self {
            AttackSuite::Sybil => cfg.sybil,
            AttackSuite::ForgedCert => cfg.forged_cert,
            AttackSuite::Replay => cfg.replay,
            AttackSuite::MixAndMatch => cfg.mix_and_match,
            AttackSuite::InvertedTime => cfg.inverted_time,
            AttackSuite::SameStation => cfg.same_station,
        }
    }
}

impl fmt::Display for AttackSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackSuite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown attack suite {s}"))
    }
}

pub enum Artifact {
    Eps { tx: TxEnvelope, expected: TxRejection },
    Claim { claim: TripClaim, expected: RejectReason },
}

impl Artifact {
    pub fn expected_code(&self) -> &'static str {
        match self {
            Artifact::Eps { expected, .. } => expected.code(),
            Artifact::Claim { expected, .. } => expected.code(),
        }
    }
}

/// What an attacker can touch: the physical stations (it can dock its own
/// keys there) and its own key material.
pub struct AttackKit<'a> {
    pub rng: &'a mut ChaCha20Rng,
    pub stations: &'a mut [ChargingStation],
    pub keys: &'a mut KeyRegistry,
}

impl AttackKit<'_> {
    fn two_stations(&mut self) -> (usize, usize) {
        let n = self.stations.len();
        let a = self.rng.gen_range(0..n);
        let b = (a + self.rng.gen_range(1..n)) % n;
        (a, b)
    }

    fn present(&mut self, station: usize, role: PresenceRole, kp: &KeyPair, tick: u64) -> TxEnvelope {
        let st = &mut self.stations[station];
        st.dock(kp.pk());
        let tx = st.attest(role, kp.pk(), tick).expect("key was just docked");
        st.undock(&kp.pk());
        tx
    }

    /// A well-formed claim for a trip the attacker actually drove.
    pub fn genuine_claim(&mut self, from: usize, to: usize, t1: u64, t2: u64) -> (TripClaim, OneTimeTripKeys) {
        let keys = self.keys.derive_trip_keys(self.rng);
        let src = self.present(from, PresenceRole::Source, &keys.pk1, t1);
        let dst = self.present(to, PresenceRole::Destination, &keys.pk2, t2);
        (TripClaim::sign(src, dst, &keys), keys)
    }

    pub fn forged_cert(&mut self, tick: u64) -> Artifact {
        let (a, b) = self.two_stations();
        let rogue = generate_keypair(self.rng);
        let victim = self.stations[b].certificate().clone();
        let cert = if self.rng.gen_bool(0.5) {
            // self-signed under the rogue key
            ca_issue(&rogue, rogue.pk(), &victim.station_id)
        } else {
            // genuine certificate with the subject key swapped
            let mut c = victim;
            c.subject_pk = rogue.pk();
            c
        };
        let mut fake = ChargingStation::new(rogue, cert);
        let keys = self.keys.derive_trip_keys(self.rng);
        let (t1, t2) = (tick.saturating_sub(2), tick);
        let forged_source = self.rng.gen_bool(0.5);
        let (src, dst) = if forged_source {
            fake.dock(keys.pk1.pk());
            let src = fake.attest(PresenceRole::Source, keys.pk1.pk(), t1).unwrap();
            (src, self.present(a, PresenceRole::Destination, &keys.pk2, t2))
        } else {
            fake.dock(keys.pk2.pk());
            let src = self.present(a, PresenceRole::Source, &keys.pk1, t1);
            (src, fake.attest(PresenceRole::Destination, keys.pk2.pk(), t2).unwrap())
        };
        Artifact::Claim {
            claim: TripClaim::sign(src, dst, &keys),
            expected: RejectReason::Certificate,
        }
    }

    /// Presents a key that an accepted claim already consumed.
    pub fn replay(&mut self, consumed: &OneTimeTripKeys, tick: u64) -> Artifact {
        let (a, b) = self.two_stations();
        let fresh = self.keys.derive_trip_keys(self.rng);
        let (t1, t2) = (tick.saturating_sub(3), tick);
        let keys = if self.rng.gen_bool(0.5) {
            OneTimeTripKeys {
                pk1: consumed.pk1.clone(),
                pk2: fresh.pk2,
                trip_nonce: fresh.trip_nonce,
            }
        } else {
            OneTimeTripKeys {
                pk1: fresh.pk1,
                pk2: consumed.pk2.clone(),
                trip_nonce: fresh.trip_nonce,
            }
        };
        let src = self.present(a, PresenceRole::Source, &keys.pk1, t1);
        let dst = self.present(b, PresenceRole::Destination, &keys.pk2, t2);
        Artifact::Claim {
            claim: TripClaim::sign(src, dst, &keys),
            expected: RejectReason::Replay,
        }
    }

    /// Source of one trip, destination of another.
    pub fn mix_and_match(&mut self, tick: u64) -> Artifact {
        let (a, b) = self.two_stations();
        let (c, d) = self.two_stations();
        let (first, _) = self.genuine_claim(a, b, tick.saturating_sub(4), tick.saturating_sub(2));
        let (second, k2) = self.genuine_claim(c, d, tick.saturating_sub(3), tick);
        let mut mixed = TripClaim {
            source_tx: first.source_tx.clone(),
            dest_tx: second.dest_tx.clone(),
            ownership_sig_1: first.ownership_sig_1,
            ownership_sig_2: second.ownership_sig_2,
        };
        if self.rng.gen_bool(0.5) {
            // the attacker re-signs the new pair, but only holds the second key
            let msg = TripClaim::ownership_message(&mixed.source_tx.t_id, &mixed.dest_tx.t_id);
            mixed.ownership_sig_1 = k2.pk1.sign(&msg);
            mixed.ownership_sig_2 = k2.pk2.sign(&msg);
        }
        Artifact::Claim {
            claim: mixed,
            expected: RejectReason::Ownership,
        }
    }

    pub fn inverted_time(&mut self, tick: u64) -> Artifact {
        let (a, b) = self.two_stations();
        let t2 = if self.rng.gen_bool(0.5) { tick } else { tick.saturating_sub(1) };
        let (claim, _) = self.genuine_claim(a, b, tick, t2);
        Artifact::Claim {
            claim,
            expected: RejectReason::Timing,
        }
    }

    pub fn same_station(&mut self, tick: u64) -> Artifact {
        let (a, _) = self.two_stations();
        let (claim, _) = self.genuine_claim(a, a, tick.saturating_sub(2), tick);
        Artifact::Claim {
            claim,
            expected: RejectReason::SameStation,
        }
    }
}

/// A forged price signal against the grid manager's EPS chain in `view`.
pub fn forge_eps(
    rng: &mut ChaCha20Rng,
    view: &(impl ChainView + ?Sized),
    grid_manager: &iome_core::identity::PublicKey,
    region: &str,
    tick: u64,
) -> Artifact {
    let attacker = generate_keypair(rng);
    let latest = view.latest_tx_by_pk(grid_manager).cloned();
    let body = |p_t_id| EpsBody {
        p_t_id,
        region_id: region.into(),
        energy_price: rng_price(tick),
        issued_at: tick,
        expiry: tick + 5,
    };
    match (rng.gen_range(0..3), latest) {
        // replay the manager's latest EPS verbatim; its pointer is now stale
        (0, Some(tx)) if matches!(tx.body, TxBody::Eps(_)) => Artifact::Eps {
            tx,
            expected: TxRejection::PrevTxMismatch,
        },
        // impersonate the manager: right pointer, wrong signing key
        (1, _) => {
            let b = body(next_prev_tx(view, grid_manager));
            let mut tx = build_tx(TxBody::Eps(b), &attacker).unwrap();
            tx.signer_pk = *grid_manager;
            Artifact::Eps {
                tx,
                expected: TxRejection::BadSignature,
            }
        }
        // a new identity claiming the manager's history
        (_, latest) => {
            let p = latest.map(|t| t.t_id).unwrap_or(iome_core::Hash::digest(b"genesis"));
            Artifact::Eps {
                tx: build_tx(TxBody::Eps(body(p)), &attacker).unwrap(),
                expected: TxRejection::PrevTxMismatch,
            }
        }
    }
}

fn rng_price(tick: u64) -> f64 {
    // an implausible but valid price
    0.01 + (tick % 7) as f64
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub suite: Option<AttackSuite>,
    pub records: Vec<AttackRecord>,
}

impl SuiteReport {
    pub fn injected(&self) -> usize {
        self.records.len()
    }

    pub fn false_accepts(&self) -> usize {
        self.records.iter().filter(|r| r.accepted).count()
    }

    pub fn correctly_rejected(&self) -> usize {
        self.records.iter().filter(|r| r.correctly_rejected()).count()
    }

    pub fn all_correct(&self) -> bool {
        self.injected() > 0 && self.correctly_rejected() == self.injected()
    }

    pub fn line(&self) -> String {
        format!(
            "{}: injected={} rejected_with_expected_reason={} false_accepts={}",
            self.suite.map(|s| s.name()).unwrap_or("all"),
            self.injected(),
            self.correctly_rejected(),
            self.false_accepts()
        )
    }
}

/// Runs `count` artifacts of one suite against a fresh deployment built from
/// the scenario's stations and verifier settings.
pub fn run_suite(cfg: &ScenarioConfig, suite: AttackSuite, count: u32) -> Result<SuiteReport> {
    if cfg.stations.len() < 2 {
        bail!("attack arena needs at least two stations");
    }
    let mut rng = derive_rng(cfg.seed, "arena", suite as u64);
    let ca = generate_keypair(&mut rng);
    let mut stations: Vec<ChargingStation> = cfg
        .stations
        .iter()
        .map(|s| {
            let kp = generate_keypair(&mut rng);
            let cert = ca_issue(&ca, kp.pk(), &s.id);
            ChargingStation::new(kp, cert)
        })
        .collect();
    let verifier_keys = (0..cfg.verifiers.count).map(|_| generate_keypair(&mut rng)).collect();
    let mut verifiers = VerifierSet::new(
        verifier_keys,
        cfg.verifiers.quorum,
        ca.pk(),
        "consortium",
        cfg.verifiers.anchor_period,
    )?;
    let producers: Vec<KeyPair> = (0..cfg.public_chain.producers).map(|_| generate_keypair(&mut rng)).collect();
    let policy = TxPolicy {
        ca_pk: Some(ca.pk()),
        chain_esdp: true,
    };
    let mut public = Chain::public("public", producers.iter().map(KeyPair::pk).collect(), policy)?;
    let gm = generate_keypair(&mut rng);
    let region = cfg.regions[0].id.clone();
    let mut keys = KeyRegistry::new();
    let mut attack_rng = derive_rng(cfg.seed, "arena-attacker", suite as u64);

    let mut report = SuiteReport {
        suite: Some(suite),
        records: Vec::new(),
    };
    for i in 0..count as u64 {
        let tick = 10 + 10 * i;
        let mut kit = AttackKit {
            rng: &mut attack_rng,
            stations: &mut stations,
            keys: &mut keys,
        };
        let artifact = match suite {
            AttackSuite::Sybil => {
                // the manager keeps issuing genuine signals between forgeries
                let signal = PriceSignal {
                    region_id: region.clone(),
                    energy_price: 0.3,
                    issued_at: tick,
                    expiry: tick + 5,
                };
                let tx = issue_eps(&gm, &signal, &public, &policy)?;
                public.append_block(vec![tx], &producers[(tick % producers.len() as u64) as usize], tick)?;
                forge_eps(kit.rng, &public, &gm.pk(), &region, tick + 1)
            }
            AttackSuite::ForgedCert => kit.forged_cert(tick),
            AttackSuite::Replay => {
                let (a, b) = kit.two_stations();
                let (claim, k) = kit.genuine_claim(a, b, tick - 5, tick - 3);
                verifiers.submit_claim(claim);
                for (c, v) in verifiers.collect_verdicts(tick - 3) {
                    verifiers.finalize_claim(&c, &v)?;
                }
                kit.replay(&k, tick)
            }
            AttackSuite::MixAndMatch => kit.mix_and_match(tick),
            AttackSuite::InvertedTime => kit.inverted_time(tick),
            AttackSuite::SameStation => kit.same_station(tick),
        };
        let record = match artifact {
            Artifact::Eps { tx, expected } => {
                let observed = check_tx(&Overlay::new(&public, &[]), &tx, &policy);
                let producer = &producers[((tick + 1) % producers.len() as u64) as usize];
                let mut probe = public.clone();
                let appended = probe.append_block(vec![tx], producer, tick + 1).is_ok();
                AttackRecord {
                    tick,
                    suite: suite.name().into(),
                    expected: expected.code().into(),
                    observed: vec![observed.err().map(|r| r.code()).unwrap_or("accepted").into()],
                    accepted: appended,
                }
            }
            Artifact::Claim { claim, expected } => {
                verifiers.submit_claim(claim);
                let mut rec = AttackRecord {
                    tick,
                    suite: suite.name().into(),
                    expected: expected.code().into(),
                    observed: vec![],
                    accepted: false,
                };
                for (c, v) in verifiers.collect_verdicts(tick) {
                    rec.observed.extend(v.iter().map(|r| verdict_code(&r.verdict)));
                    let fin = verifiers.finalize_claim(&c, &v)?;
                    rec.accepted |= fin.accepted();
                }
                rec
            }
        };
        verifiers.seal_block(tick)?;
        report.records.push(record);
    }
    Ok(report)
}

pub fn verdict_code(v: &iome_core::trip_extraction::Verdict) -> String {
    match v {
        iome_core::trip_extraction::Verdict::Accepted => "accepted".into(),
        iome_core::trip_extraction::Verdict::Rejected(r) => r.code().into(),
    }
}

/// Runs every suite with `per_suite` artifacts each.
pub fn run_all(cfg: &ScenarioConfig, per_suite: u32) -> Result<Vec<SuiteReport>> {
    AttackSuite::ALL.iter().map(|s| run_suite(cfg, *s, per_suite)).collect()
}
