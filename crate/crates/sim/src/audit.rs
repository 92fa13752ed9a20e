//! Offline re-verification of a finished run from its chains alone.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use iome_core::hash::Hash;
use iome_core::identity::PublicKey;
use iome_core::ledger::{verify_anchor, Chain};
use iome_core::mobility::from_transactions;
use iome_core::trip_extraction::Verdict;
use iome_core::txvocab::{check_tx, ChainView, TripRecordBody, TxBody, TxEnvelope};

use crate::sim::Manifest;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub chain: String,
    pub height: Option<u64>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.height {
            Some(h) => write!(f, "{}@{}: {}", self.chain, h, self.detail),
            None => write!(f, "{}: {}", self.chain, self.detail),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub violations: Vec<Violation>,
    pub chains_checked: usize,
    pub txs_checked: usize,
    pub anchors_checked: usize,
    pub od_matrices_checked: usize,
    pub claims_checked: usize,
    pub keys_scanned: usize,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn flag(&mut self, chain: &str, height: Option<u64>, detail: impl Into<String>) {
        self.violations.push(Violation {
            chain: chain.into(),
            height,
            detail: detail.into(),
        });
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "chains={} txs={} anchors={} od_matrices={} claims={} keys_scanned={}\n",
            self.chains_checked,
            self.txs_checked,
            self.anchors_checked,
            self.od_matrices_checked,
            self.claims_checked,
            self.keys_scanned
        );
        if self.is_clean() {
            s.push_str("audit: clean\n");
        } else {
            for v in &self.violations {
                s.push_str(&format!("violation: {v}\n"));
            }
            s.push_str(&format!("audit: {} violation(s)\n", self.violations.len()));
        }
        s
    }
}

/// Latest transaction per signer, built up while replaying a chain.
#[derive(Default)]
struct Replayed(BTreeMap<PublicKey, TxEnvelope>);

impl ChainView for Replayed {
    fn latest_tx_by_pk(&self, pk: &PublicKey) -> Option<&TxEnvelope> {
        self.0.get(pk)
    }
}

pub fn audit(manifest: &Manifest, public: &Chain, consortium: &Chain, children: &[Chain]) -> AuditReport {
    let mut report = AuditReport::default();
    for chain in std::iter::once(public).chain(std::iter::once(consortium)).chain(children) {
        check_chain(&mut report, chain);
    }
    // the consortium's manager and backups are exactly the verifier set
    let verifiers: BTreeSet<PublicKey> = consortium
        .all_managers()
        .chain(consortium.backup_manager_pks())
        .copied()
        .collect();
    check_public_signers(&mut report, manifest, public, &verifiers);
    check_anchors(&mut report, public, consortium, children);
    check_od(&mut report, public);
    check_claims(&mut report, manifest, public, consortium, &verifiers);
    check_unlinkability(&mut report, public, consortium);
    report
}

/// Hash links, producers, signatures, then every transaction replayed in order.
fn check_chain(report: &mut AuditReport, chain: &Chain) {
    report.chains_checked += 1;
    if let Err(fault) = chain.verify_structure() {
        report.flag(chain.id(), Some(fault.height), format!("structure: {:?}", fault.kind));
    }
    let mut seen = Replayed::default();
    for block in chain.blocks() {
        for tx in &block.txs {
            report.txs_checked += 1;
            if let Err(r) = check_tx(&seen, tx, chain.policy()) {
                report.flag(chain.id(), Some(block.height), format!("{}: {}", tx.kind().label(), r.code()));
            }
            seen.0.insert(tx.signer_pk, tx.clone());
        }
    }
}

fn check_public_signers(report: &mut AuditReport, manifest: &Manifest, public: &Chain, verifiers: &BTreeSet<PublicKey>) {
    for block in public.blocks() {
        for tx in &block.txs {
            let ok = match &tx.body {
                TxBody::Eps(_) => tx.signer_pk == manifest.grid_manager_pk,
                TxBody::OdMatrix(_) => tx.signer_pk == manifest.predictor_pk,
                TxBody::TripRecord(_) => verifiers.contains(&tx.signer_pk),
                TxBody::SourcePresence(_) | TxBody::DestinationPresence(_) => {
                    report.flag(public.id(), Some(block.height), "presence transaction on the public chain");
                    true
                }
                TxBody::TripClaim(_) | TxBody::Verdict(_) => {
                    report.flag(public.id(), Some(block.height), "consortium transaction on the public chain");
                    true
                }
                TxBody::Esdp(_) | TxBody::Anchor(_) => true,
            };
            if !ok {
                report.flag(
                    public.id(),
                    Some(block.height),
                    format!("{} signed by unauthorized key {}", tx.kind().label(), tx.signer_pk.short()),
                );
            }
        }
    }
}

fn check_anchors(report: &mut AuditReport, public: &Chain, consortium: &Chain, children: &[Chain]) {
    let by_id: BTreeMap<&str, &Chain> = std::iter::once(consortium)
        .chain(children)
        .map(|c| (c.id(), c))
        .collect();
    for block in public.blocks() {
        for tx in &block.txs {
            let TxBody::Anchor(anchor) = &tx.body else { continue };
            report.anchors_checked += 1;
            let Some(child) = by_id.get(anchor.child_chain_id.as_str()) else {
                report.flag(public.id(), Some(block.height), format!("anchor for unknown chain {}", anchor.child_chain_id));
                continue;
            };
            if !verify_anchor(anchor, child) {
                report.flag(child.id(), Some(anchor.anchored_height), "anchored hash does not match");
            }
            if !child.all_managers().any(|m| *m == tx.signer_pk) {
                report.flag(child.id(), None, "anchor signed by a non-manager");
            }
            if child.anchor_period().is_some_and(|p| anchor.tick % p != 0) || anchor.tick > block.timestamp {
                report.flag(child.id(), None, format!("anchor at off-period tick {}", anchor.tick));
            }
        }
    }
}

/// Every published matrix must equal a recount over the chain up to and
/// including the block that carries it.
fn check_od(report: &mut AuditReport, public: &Chain) {
    let blocks = public.blocks();
    for (bi, block) in blocks.iter().enumerate() {
        for (ti, tx) in block.txs.iter().enumerate() {
            let TxBody::OdMatrix(published) = &tx.body else { continue };
            report.od_matrices_checked += 1;
            let prefix = blocks[..bi]
                .iter()
                .flat_map(|b| b.txs.iter())
                .chain(block.txs[..ti].iter());
            let recount = from_transactions(prefix, published.window);
            if recount != *published {
                report.flag(
                    public.id(),
                    Some(block.height),
                    format!(
                        "od matrix for [{}, {}) disagrees with trip records ({} vs {})",
                        published.window.from,
                        published.window.to,
                        published.total(),
                        recount.total()
                    ),
                );
            }
        }
    }
}

/// Verdict quorum per archived claim, and a one-to-one match between
/// accepted claims and public trip records.
fn check_claims(
    report: &mut AuditReport,
    manifest: &Manifest,
    public: &Chain,
    consortium: &Chain,
    verifiers: &BTreeSet<PublicKey>,
) {
    let mut votes: BTreeMap<Hash, BTreeMap<PublicKey, Verdict>> = BTreeMap::new();
    let mut claims = Vec::new();
    for block in consortium.blocks() {
        for tx in &block.txs {
            match &tx.body {
                TxBody::Verdict(v) => {
                    if v.verifier_pk != tx.signer_pk || !verifiers.contains(&tx.signer_pk) {
                        report.flag(consortium.id(), Some(block.height), "verdict from an unknown verifier");
                    }
                    votes.entry(v.claim_hash).or_default().insert(v.verifier_pk, v.verdict);
                }
                TxBody::TripClaim(c) => claims.push((block.height, c.clone())),
                _ => {}
            }
        }
    }

    let mut expected: BTreeMap<TripRecordBody, i64> = BTreeMap::new();
    for (height, claim) in &claims {
        report.claims_checked += 1;
        let v = votes.get(&claim.claim_hash()).cloned().unwrap_or_default();
        if v.len() < manifest.quorum {
            report.flag(consortium.id(), Some(*height), format!("claim has {} verdicts, quorum {}", v.len(), manifest.quorum));
        }
        let accepted = v.values().filter(|x| x.is_accepted()).count();
        if accepted >= manifest.quorum {
            let (Some(s), Some(d)) = (claim.source(), claim.destination()) else {
                report.flag(consortium.id(), Some(*height), "accepted claim without presence bodies");
                continue;
            };
            *expected
                .entry(TripRecordBody {
                    origin_station_id: s.station_cert.station_id.clone(),
                    destination_station_id: d.station_cert.station_id.clone(),
                    t_start: s.tick,
                    t_end: d.tick,
                })
                .or_default() += 1;
        }
    }
    for block in public.blocks() {
        for tx in &block.txs {
            if let TxBody::TripRecord(r) = &tx.body {
                *expected.entry(r.clone()).or_default() -= 1;
            }
        }
    }
    for (record, n) in expected {
        if n != 0 {
            report.flag(
                public.id(),
                None,
                format!(
                    "trip {}->{} [{}, {}] off by {n} against accepted claims",
                    record.origin_station_id, record.destination_station_id, record.t_start, record.t_end
                ),
            );
        }
    }
}

/// No key an EV presented at a station may appear anywhere in the public
/// chain's bytes.
fn check_unlinkability(report: &mut AuditReport, public: &Chain, consortium: &Chain) {
    let mut keys: HashSet<[u8; 32]> = HashSet::new();
    for block in consortium.blocks() {
        for tx in &block.txs {
            match &tx.body {
                TxBody::TripClaim(c) => {
                    keys.extend(c.source().map(|p| p.presented_pk.0));
                    keys.extend(c.destination().map(|p| p.presented_pk.0));
                }
                TxBody::SourcePresence(p) | TxBody::DestinationPresence(p) => {
                    keys.insert(p.presented_pk.0);
                }
                _ => {}
            }
        }
    }
    report.keys_scanned = keys.len();
    let hits = leaked_keys(&public.block_log_bytes(), &keys);
    if hits > 0 {
        report.flag(public.id(), None, format!("{hits} presented key(s) found in public chain bytes"));
    }
}

/// Number of distinct keys from `keys` occurring anywhere in `bytes`.
pub fn leaked_keys(bytes: &[u8], keys: &HashSet<[u8; 32]>) -> usize {
    if keys.is_empty() {
        return 0;
    }
    let mut found = HashSet::new();
    for w in bytes.windows(32) {
        let k: &[u8; 32] = w.try_into().expect("window is 32 bytes");
        if keys.contains(k) {
            found.insert(*k);
        }
    }
    found.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leak_scan_finds_embedded_key() {
        let key = [7u8; 32];
        let mut bytes = vec![1, 2, 3];
        bytes.extend_from_slice(&key);
        bytes.push(9);
        let keys: HashSet<[u8; 32]> = [key, [8u8; 32]].into_iter().collect();
        assert_eq!(leaked_keys(&bytes, &keys), 1);
        assert_eq!(leaked_keys(&bytes[..20], &keys), 0);
    }
}
