//! Origin-destination matrices built from anonymous trip records, and the
//! flow prediction that feeds them back into energy prediction.

use alloc::collections::BTreeMap;
use alloc::string::String;

use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};
use crate::identity::KeyPair;
use crate::txvocab::{build_tx, check_tx, ChainView, TxBody, TxEnvelope, TxError, TxPolicy, TxRejection};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MobilityError {
    #[error("station {0} has no region mapping")]
    UnknownStation(String),
    #[error("window start {from} is not before end {to}")]
    BadWindow { from: u64, to: u64 },
    #[error(transparent)]
    Tx(#[from] TxError),
    #[error("rejected: {0:?}")]
    Rejected(TxRejection),
}

/// Half-open tick interval `[from, to)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OdWindow {
    pub from: u64,
    pub to: u64,
}

impl OdWindow {
    pub fn new(from: u64, to: u64) -> Result<Self, MobilityError> {
        if from < to {
            Ok(Self { from, to })
        } else {
            Err(MobilityError::BadWindow { from, to })
        }
    }

    pub fn contains(&self, tick: u64) -> bool {
        self.from <= tick && tick < self.to
    }

    /// Window `k` of a fixed-length tiling starting at tick 0.
    pub fn nth(k: u64, len: u64) -> Self {
        Self {
            from: k * len,
            to: (k + 1) * len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OdMatrix {
    pub window: OdWindow,
    pub entries: BTreeMap<(String, String), u64>,
}

impl OdMatrix {
    pub fn empty(window: OdWindow) -> Self {
        Self {
            window,
            entries: BTreeMap::new(),
        }
    }

    pub fn total(&self) -> u64 {
        self.entries.values().sum()
    }

    pub fn get(&self, origin: &str, destination: &str) -> u64 {
        self.entries
            .get(&(origin.into(), destination.into()))
            .copied()
            .unwrap_or(0)
    }

    pub fn record(&mut self, origin: &str, destination: &str) {
        *self.entries.entry((origin.into(), destination.into())).or_insert(0) += 1;
    }
}

impl Encode for OdMatrix {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.window.from).u64(self.window.to).len(self.entries.len());
        for ((o, d), n) in &self.entries {
            w.str(o).str(d).u64(*n);
        }
    }
}

impl Decode for OdMatrix {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let window = OdWindow {
            from: r.u64()?,
            to: r.u64()?,
        };
        let n = r.len(16)?;
        let mut entries = BTreeMap::new();
        let mut last: Option<(String, String)> = None;
        for _ in 0..n {
            let key = (r.string()?, r.string()?);
            // canonical form: strictly ascending keys
            if last.as_ref().is_some_and(|l| *l >= key) {
                return Err(DecodeError::Invalid("od entries out of order"));
            }
            last = Some(key.clone());
            entries.insert(key, r.u64()?);
        }
        Ok(OdMatrix { window, entries })
    }
}

/// Counts trip records whose `t_end` falls inside the window.
pub fn from_transactions<'a, I>(txs: I, window: OdWindow) -> OdMatrix
where
    I: IntoIterator<Item = &'a TxEnvelope>,
{
    let mut m = OdMatrix::empty(window);
    for tx in txs {
        if let TxBody::TripRecord(t) = &tx.body {
            if window.contains(t.t_end) {
                m.record(&t.origin_station_id, &t.destination_station_id);
            }
        }
    }
    m
}

pub fn build_od_matrix(public_chain: &crate::ledger::Chain, window: OdWindow) -> OdMatrix {
    from_transactions(public_chain.transactions().map(|(_, tx)| tx), window)
}

/// Wraps the matrix in a signed transaction and checks it against `view`.
pub fn publish_od(
    matrix: &OdMatrix,
    predictor: &KeyPair,
    view: &impl ChainView,
    policy: &TxPolicy,
) -> Result<TxEnvelope, MobilityError> {
    let tx = build_tx(TxBody::OdMatrix(matrix.clone()), predictor)?;
    check_tx(view, &tx, policy).map_err(MobilityError::Rejected)?;
    Ok(tx)
}

/// Expected EV arrivals and departures per region over the next window.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MobilityPrediction {
    pub arrivals: BTreeMap<String, u64>,
    pub departures: BTreeMap<String, u64>,
}

impl MobilityPrediction {
    pub fn arrivals_in(&self, region: &str) -> u64 {
        self.arrivals.get(region).copied().unwrap_or(0)
    }

    pub fn departures_from(&self, region: &str) -> u64 {
        self.departures.get(region).copied().unwrap_or(0)
    }
}

pub trait MobilityPredictor {
    fn predict(
        &self,
        matrix: &OdMatrix,
        station_regions: &BTreeMap<String, String>,
    ) -> Result<MobilityPrediction, MobilityError>;
}

/// Next window's flows equal the current window's flows.
#[derive(Debug, Clone, Copy, Default)]
pub struct Persistence;

impl MobilityPredictor for Persistence {
    fn predict(
        &self,
        matrix: &OdMatrix,
        station_regions: &BTreeMap<String, String>,
    ) -> Result<MobilityPrediction, MobilityError> {
        predict_flows(matrix, station_regions)
    }
}

/// Every region in `station_regions` gets an entry, zero if no flow.
pub fn predict_flows(
    matrix: &OdMatrix,
    station_regions: &BTreeMap<String, String>,
) -> Result<MobilityPrediction, MobilityError> {
    let mut p = MobilityPrediction::default();
    for region in station_regions.values() {
        p.arrivals.insert(region.clone(), 0);
        p.departures.insert(region.clone(), 0);
    }
    let region_of = |s: &String| {
        station_regions
            .get(s)
            .ok_or_else(|| MobilityError::UnknownStation(s.clone()))
    };
    for ((o, d), n) in &matrix.entries {
        *p.departures.get_mut(region_of(o)?).expect("seeded above") += n;
        *p.arrivals.get_mut(region_of(d)?).expect("seeded above") += n;
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::generate_keypair;
    use crate::txvocab::TripRecordBody;
    use alloc::vec::Vec;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn trip(kp: &KeyPair, o: &str, d: &str, t0: u64, t1: u64) -> TxEnvelope {
        build_tx(
            TxBody::TripRecord(TripRecordBody {
                origin_station_id: o.into(),
                destination_station_id: d.into(),
                t_start: t0,
                t_end: t1,
            }),
            kp,
        )
        .unwrap()
    }

    fn regions() -> BTreeMap<String, String> {
        [("A", "R1"), ("B", "R2"), ("C", "R2"), ("D", "R3")]
            .into_iter()
            .map(|(s, r)| (s.into(), r.into()))
            .collect()
    }

    #[test]
    fn empty_window() {
        let m = from_transactions(&[], OdWindow::new(0, 10).unwrap());
        assert!(m.entries.is_empty());
        assert_eq!(m.total(), 0);
    }

    #[test]
    fn counts_by_pair() {
        let kp = generate_keypair(&mut ChaCha20Rng::seed_from_u64(1));
        let txs: Vec<_> = (0..3)
            .map(|i| trip(&kp, "A", "B", i, i + 2))
            .chain([trip(&kp, "B", "C", 1, 4)])
            .collect();
        let m = from_transactions(&txs, OdWindow::new(0, 10).unwrap());
        assert_eq!(m.get("A", "B"), 3);
        assert_eq!(m.get("B", "C"), 1);
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.total(), 4);
    }

    #[test]
    fn window_is_half_open_on_t_end() {
        let kp = generate_keypair(&mut ChaCha20Rng::seed_from_u64(1));
        let txs = [
            trip(&kp, "A", "B", 0, 9),
            trip(&kp, "A", "B", 5, 10),
            trip(&kp, "A", "B", 8, 20),
        ];
        let w = OdWindow::new(9, 20).unwrap();
        let m = from_transactions(&txs, w);
        let oracle = txs
            .iter()
            .filter(|t| matches!(&t.body, TxBody::TripRecord(r) if r.t_end >= 9 && r.t_end < 20))
            .count() as u64;
        assert_eq!(m.total(), oracle);
        assert_eq!(m.total(), 2);
    }

    #[test]
    fn bad_window() {
        assert_eq!(OdWindow::new(5, 5).unwrap_err(), MobilityError::BadWindow { from: 5, to: 5 });
    }

    #[test]
    fn single_pair_flows() {
        let mut m = OdMatrix::empty(OdWindow::nth(0, 10));
        for _ in 0..3 {
            m.record("A", "B");
        }
        let p = predict_flows(&m, &regions()).unwrap();
        assert_eq!(p.arrivals_in("R2"), 3);
        assert_eq!(p.departures_from("R1"), 3);
        assert_eq!(p.arrivals_in("R1"), 0);
        assert_eq!(p.arrivals.len(), 3);
    }

    #[test]
    fn empty_matrix_all_zero() {
        let p = predict_flows(&OdMatrix::empty(OdWindow::nth(0, 10)), &regions()).unwrap();
        assert!(p.arrivals.values().chain(p.departures.values()).all(|v| *v == 0));
    }

    #[test]
    fn multi_entry_hand_sums() {
        let mut m = OdMatrix::empty(OdWindow::nth(1, 10));
        m.entries.insert(("A".into(), "B".into()), 2);
        m.entries.insert(("B".into(), "D".into()), 5);
        m.entries.insert(("C".into(), "B".into()), 1);
        m.entries.insert(("D".into(), "A".into()), 4);
        let p = predict_flows(&m, &regions()).unwrap();
        assert_eq!(p.departures_from("R1"), 2);
        assert_eq!(p.departures_from("R2"), 6);
        assert_eq!(p.departures_from("R3"), 4);
        assert_eq!(p.arrivals_in("R1"), 4);
        assert_eq!(p.arrivals_in("R2"), 3);
        assert_eq!(p.arrivals_in("R3"), 5);
    }

    #[test]
    fn unmapped_station() {
        let mut m = OdMatrix::empty(OdWindow::nth(0, 10));
        m.record("A", "Z");
        assert_eq!(
            predict_flows(&m, &regions()).unwrap_err(),
            MobilityError::UnknownStation("Z".into())
        );
    }

    #[test]
    fn published_matrix_round_trips() {
        let kp = generate_keypair(&mut ChaCha20Rng::seed_from_u64(3));
        let mut m = OdMatrix::empty(OdWindow::nth(2, 10));
        m.record("A", "B");
        m.record("C", "D");
        let tx = publish_od(&m, &kp, &Vec::<TxEnvelope>::new(), &TxPolicy::default()).unwrap();
        let TxBody::OdMatrix(body) = &tx.body else { panic!() };
        assert_eq!(body, &m);
        let bytes = tx.to_canonical_bytes();
        assert_eq!(crate::txvocab::deserialize_tx(&bytes).unwrap(), tx);
    }

    #[test]
    fn unordered_entries_rejected_on_decode() {
        let mut w = Writer::new();
        w.u64(0).u64(10).len(2);
        w.str("B").str("A").u64(1);
        w.str("A").str("B").u64(1);
        assert!(OdMatrix::from_canonical_bytes(w.as_slice()).is_err());
    }
}
