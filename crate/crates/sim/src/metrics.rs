//! Run metrics and their delimited-text renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use iome_core::mobility::OdMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionTick {
    pub tick: u64,
    pub region: String,
    pub supply_kwh: f64,
    pub demand_kwh: f64,
    /// Price of the signal EVs saw this tick, if any.
    pub price: Option<f64>,
}

/// A prediction consumed by the price rule, and the EPS it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub tick: u64,
    pub region: String,
    pub predicted_supply: f64,
    pub predicted_demand: f64,
    pub includes_mobility: bool,
    pub price: f64,
    pub expiry: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionRecord {
    pub tick: u64,
    pub ev_id: u32,
    pub decision: String,
    pub soc_wh: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChainSize {
    pub blocks: usize,
    pub txs: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Meter {
    /// Energy the station delivered to EVs.
    pub dispensed_wh: u64,
    /// Energy the station took in from EVs.
    pub received_wh: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub region_ticks: Vec<RegionTick>,
    pub predictions: Vec<PredictionRecord>,
    pub decisions: Vec<DecisionRecord>,
    pub od_published: Vec<OdMatrix>,
    /// Net currency per EV: feed-in income minus charging cost.
    pub ev_earnings: BTreeMap<u32, f64>,
    pub station_meters: BTreeMap<String, Meter>,
    pub claims_accepted: u64,
    pub claims_rejected: BTreeMap<String, u64>,
    pub eps_rejected: BTreeMap<String, u64>,
    pub relocations: u64,
    pub trips_started: u64,
    pub trips_cancelled: u64,
    pub chain_sizes: BTreeMap<String, ChainSize>,
}

impl Metrics {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "claims_accepted={}", self.claims_accepted);
        for (reason, n) in &self.claims_rejected {
            let _ = writeln!(s, "claims_rejected.{reason}={n}");
        }
        for (reason, n) in &self.eps_rejected {
            let _ = writeln!(s, "eps_rejected.{reason}={n}");
        }
        let _ = writeln!(s, "trips_started={}", self.trips_started);
        let _ = writeln!(s, "trips_cancelled={}", self.trips_cancelled);
        let _ = writeln!(s, "relocations={}", self.relocations);
        let _ = writeln!(s, "od_published={}", self.od_published.len());
        for (id, c) in &self.chain_sizes {
            let _ = writeln!(s, "chain.{id}=blocks:{} txs:{} bytes:{}", c.blocks, c.txs, c.bytes);
        }
        for (ev, e) in &self.ev_earnings {
            let _ = writeln!(s, "ev_earnings.{ev}={e:.6}");
        }
        for (st, m) in &self.station_meters {
            let _ = writeln!(s, "meter.{st}=dispensed:{} received:{}", m.dispensed_wh, m.received_wh);
        }
        s
    }

    pub fn region_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["tick", "region", "supply_kwh", "demand_kwh", "price"]).unwrap();
        for r in &self.region_ticks {
            w.write_record([
                r.tick.to_string(),
                r.region.clone(),
                format!("{:.6}", r.supply_kwh),
                format!("{:.6}", r.demand_kwh),
                r.price.map(|p| format!("{p:.6}")).unwrap_or_default(),
            ])
            .unwrap();
        }
        into_string(w)
    }

    pub fn eps_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "tick",
            "region",
            "price",
            "expiry",
            "predicted_supply",
            "predicted_demand",
            "includes_mobility",
        ])
        .unwrap();
        for p in &self.predictions {
            w.write_record([
                p.tick.to_string(),
                p.region.clone(),
                format!("{:.6}", p.price),
                p.expiry.to_string(),
                format!("{:.6}", p.predicted_supply),
                format!("{:.6}", p.predicted_demand),
                p.includes_mobility.to_string(),
            ])
            .unwrap();
        }
        into_string(w)
    }

    pub fn decisions_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["tick", "ev_id", "decision", "soc_wh"]).unwrap();
        for d in &self.decisions {
            w.write_record([d.tick.to_string(), d.ev_id.to_string(), d.decision.clone(), d.soc_wh.to_string()])
                .unwrap();
        }
        into_string(w)
    }

    pub fn od_csv(&self) -> String {
        od_csv(&self.od_published)
    }
}

pub fn od_csv(matrices: &[OdMatrix]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["window_from", "window_to", "origin", "destination", "count"])
        .unwrap();
    for m in matrices {
        for ((o, d), n) in &m.entries {
            w.write_record([
                m.window.from.to_string(),
                m.window.to.to_string(),
                o.clone(),
                d.clone(),
                n.to_string(),
            ])
            .unwrap();
        }
    }
    into_string(w)
}

fn into_string(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv output is utf-8")
}
