//! What physically happened during a run. Kept only in memory for test
//! oracles; nothing here is written to a chain.

use iome_core::ev_agent::{EvParams, EvState, StationInfo};
use iome_core::identity::PublicKey;
use iome_core::market::PriceSignal;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TrueTrip {
    pub origin: String,
    pub destination: String,
    pub t_start: u64,
    pub t_end: u64,
    pub ev_id: u32,
    pub pk1: PublicKey,
    pub pk2: PublicKey,
    pub relocation: bool,
}

impl TrueTrip {
    pub fn key(&self) -> (String, String, u64, u64) {
        (self.origin.clone(), self.destination.clone(), self.t_start, self.t_end)
    }
}

/// One metered transfer between an EV and a station.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnergyEvent {
    pub tick: u64,
    pub ev_id: u32,
    pub station: String,
    pub region: String,
    pub charged_wh: u64,
    pub discharged_wh: u64,
}

/// Per-EV energy balance over the run, all in Wh.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvEnergy {
    pub initial_wh: u64,
    pub charged_wh: u64,
    pub discharged_wh: u64,
    pub travel_wh: u64,
    pub capacity_loss_wh: u64,
    pub final_wh: u64,
}

impl EvEnergy {
    pub fn balances(&self) -> bool {
        self.initial_wh + self.charged_wh == self.final_wh + self.discharged_wh + self.travel_wh + self.capacity_loss_wh
    }
}

/// Everything the engine saw when it chose to relocate.
#[derive(Debug, Clone, PartialEq)]
pub struct RelocationSnapshot {
    pub tick: u64,
    pub ev: EvState,
    pub params: EvParams,
    pub signals: Vec<PriceSignal>,
    pub stations: Vec<StationInfo>,
    pub chosen: String,
    pub discharge_wh: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackRecord {
    pub tick: u64,
    pub suite: String,
    pub expected: String,
    /// Reason codes observed, one per verdict or validation.
    pub observed: Vec<String>,
    pub accepted: bool,
}

impl AttackRecord {
    pub fn correctly_rejected(&self) -> bool {
        !self.accepted && !self.observed.is_empty() && self.observed.iter().all(|o| *o == self.expected)
    }
}

#[derive(Debug, Clone, Default)]
pub struct GroundTruthLog {
    /// Honest trips whose claims the EVs submitted.
    pub honest_trips: Vec<TrueTrip>,
    /// Trips dropped because the destination presence came after the TTL.
    pub abandoned_trips: Vec<TrueTrip>,
    pub energy_events: Vec<EnergyEvent>,
    pub ev_energy: Vec<EvEnergy>,
    pub relocations: Vec<RelocationSnapshot>,
    pub attacks: Vec<AttackRecord>,
    /// (tick, ev_id) where SOC left `[0, capacity * soh]`.
    pub soc_violations: Vec<(u64, u32)>,
    pub soc_checks: u64,
    /// Every one-time key an honest EV presented at a station.
    pub presented_keys: Vec<PublicKey>,
}
