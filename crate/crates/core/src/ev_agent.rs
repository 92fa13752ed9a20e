//! EV decisions and battery evolution.
//!
//! Battery energy is tracked in whole watt-hours so that bounds and
//! station metering balance exactly. Prices are per kWh.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::identity::Certificate;
use crate::market::PriceSignal;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvError {
    #[error("target station is out of range")]
    Unreachable,
    #[error("not enough energy for the requested discharge")]
    InsufficientEnergy,
    #[error("no unexpired price signal")]
    NoValidSignal,
    #[error("infeasible action: {0}")]
    InfeasibleAction(&'static str),
    #[error("unknown station {0}")]
    UnknownStation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Euclidean distance in km.
    pub fn distance(&self, other: &Position) -> f64 {
        libm::sqrt((self.x - other.x) * (self.x - other.x) + (self.y - other.y) * (self.y - other.y))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedTrip {
    pub origin: String,
    pub destination: String,
    pub depart: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationInfo {
    pub station_id: String,
    pub position: Position,
    pub region_id: String,
    pub feed_in_tariff: f64,
    pub retail_price: f64,
    pub certificate: Certificate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelocationCosts {
    pub transport_per_km: f64,
    pub mileage_depreciation_per_km: f64,
    /// Cost of one full-equivalent recharge cycle.
    pub cycle_depreciation_cost: f64,
}

/// Per-EV decision thresholds and battery ageing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvParams {
    /// Charge when the local retail price is at or below this.
    pub charge_threshold: f64,
    /// Discharge when the local feed-in tariff is at or above this.
    pub discharge_threshold: f64,
    pub reserve_soc_kwh: f64,
    pub target_soc_kwh: f64,
    /// Fraction of SOC usable for reaching a station.
    pub safety_margin: f64,
    pub soh_loss_per_cycle: f64,
    pub min_soh: f64,
    pub costs: RelocationCosts,
}

impl Default for EvParams {
    fn default() -> Self {
        Self {
            charge_threshold: 0.25,
            discharge_threshold: 0.30,
            reserve_soc_kwh: 10.0,
            target_soc_kwh: 48.0,
            safety_margin: 0.9,
            soh_loss_per_cycle: 0.0002,
            min_soh: 0.5,
            costs: RelocationCosts {
                transport_per_km: 0.10,
                mileage_depreciation_per_km: 0.05,
                cycle_depreciation_cost: 4.0,
            },
        }
    }
}

pub fn kwh_to_wh(kwh: f64) -> u64 {
    if kwh <= 0.0 {
        0
    } else {
        libm::round(kwh * 1000.0) as u64
    }
}

pub fn wh_to_kwh(wh: u64) -> f64 {
    wh as f64 / 1000.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvState {
    /// Simulation-internal; never written to any chain.
    pub ev_id: u32,
    pub station_id: String,
    pub position: Position,
    pub soc_wh: u64,
    pub capacity_nominal_wh: u64,
    pub soh: f64,
    pub schedule: Vec<PlannedTrip>,
    pub odometer_km: f64,
    pub remaining_cycles: u64,
    /// Energy drawn since the last full-equivalent cycle was counted.
    pub cycle_throughput_wh: u64,
    pub consumption_kwh_per_km: f64,
    pub charge_rate_kwh_per_tick: f64,
    pub discharge_rate_kwh_per_tick: f64,
}

impl EvState {
    pub fn usable_capacity_wh(&self) -> u64 {
        libm::floor(self.capacity_nominal_wh as f64 * self.soh) as u64
    }

    pub fn soc_kwh(&self) -> f64 {
        wh_to_kwh(self.soc_wh)
    }

    /// Energy for driving `km`, rounded up to whole Wh.
    pub fn travel_wh(&self, km: f64) -> u64 {
        libm::ceil(km * self.consumption_kwh_per_km * 1000.0 - 1e-9).max(0.0) as u64
    }

    pub fn can_reach(&self, target: &Position, safety_margin: f64) -> bool {
        self.travel_wh(self.position.distance(target)) as f64 <= self.soc_wh as f64 * safety_margin
    }

    /// The next trip departing at or after `tick`, if any.
    pub fn next_trip(&self, tick: u64) -> Option<&PlannedTrip> {
        self.schedule
            .iter()
            .filter(|t| t.depart >= tick)
            .min_by_key(|t| t.depart)
    }
}

/// Stations whose driving energy fits within `soc * safety_margin`.
pub fn reachable_stations<'a>(ev: &EvState, stations: &'a [StationInfo], safety_margin: f64) -> Vec<&'a StationInfo> {
    stations
        .iter()
        .filter(|s| ev.can_reach(&s.position, safety_margin))
        .collect()
}

/// Full-equivalent cycles consumed by moving `kwh` through the battery.
pub fn cycles_consumed(ev: &EvState, kwh: f64) -> f64 {
    kwh / (wh_to_kwh(ev.capacity_nominal_wh) * ev.soh)
}

/// Tariff differential on the discharged energy minus transport, mileage
/// and cycle depreciation.
pub fn net_gain(
    ev: &EvState,
    current: &StationInfo,
    target: &StationInfo,
    discharge_kwh: f64,
    params: &EvParams,
) -> Result<f64, EvError> {
    if !ev.can_reach(&target.position, params.safety_margin) {
        return Err(EvError::Unreachable);
    }
    let distance = ev.position.distance(&target.position);
    let travel_kwh = wh_to_kwh(ev.travel_wh(distance));
    if discharge_kwh < 0.0 || discharge_kwh > ev.soc_kwh() - travel_kwh {
        return Err(EvError::InsufficientEnergy);
    }
    let c = &params.costs;
    let cost = distance * c.transport_per_km
        + distance * c.mileage_depreciation_per_km
        + cycles_consumed(ev, discharge_kwh) * c.cycle_depreciation_cost;
    Ok((target.feed_in_tariff - current.feed_in_tariff) * discharge_kwh - cost)
}

/// Energy available for discharge at `target` after driving there and
/// keeping the reserve, in Wh. Zero when nothing is left.
pub fn relocation_discharge_wh(ev: &EvState, target: &StationInfo, params: &EvParams) -> u64 {
    let travel = ev.travel_wh(ev.position.distance(&target.position));
    ev.soc_wh
        .saturating_sub(travel)
        .saturating_sub(kwh_to_wh(params.reserve_soc_kwh))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Idle,
    Charge { station: String, energy_wh: u64 },
    Discharge { station: String, energy_wh: u64 },
    Relocate { from: String, to: String, discharge_wh: u64 },
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Idle => f.write_str("idle"),
            Decision::Charge { station, energy_wh } => write!(f, "charge {station} {energy_wh}"),
            Decision::Discharge { station, energy_wh } => write!(f, "discharge {station} {energy_wh}"),
            Decision::Relocate { from, to, discharge_wh } => write!(f, "relocate {from}->{to} {discharge_wh}"),
        }
    }
}

/// Best relocation target: maximal positive net gain over reachable
/// stations other than the current one, ties to the lowest station id.
/// Returns the target, its discharge energy and the gain.
pub fn best_relocation<'a>(
    ev: &EvState,
    current: &StationInfo,
    stations: &'a [StationInfo],
    params: &EvParams,
) -> Option<(&'a StationInfo, u64, f64)> {
    let mut candidates: Vec<&StationInfo> = reachable_stations(ev, stations, params.safety_margin)
        .into_iter()
        .filter(|s| s.station_id != current.station_id)
        .collect();
    candidates.sort_by(|a, b| a.station_id.cmp(&b.station_id));
    let mut best: Option<(&StationInfo, u64, f64)> = None;
    for s in candidates {
        let wh = relocation_discharge_wh(ev, s, params);
        if wh == 0 {
            continue;
        }
        let Ok(gain) = net_gain(ev, current, s, wh_to_kwh(wh), params) else {
            continue;
        };
        if gain > 0.0 && best.is_none_or(|(_, _, g)| gain > g) {
            best = Some((s, wh, gain));
        }
    }
    best
}

/// Chooses this tick's action.
///
/// With a trip departing inside the signal window the EV stays put and
/// prepares: it charges what the trip needs, tops up when the destination
/// pays more for energy than the origin charges, and otherwise follows its
/// thresholds without dipping below the trip's needs. Without such a trip
/// it relocates when some target has positive net gain, else it applies
/// the charge/discharge thresholds.
pub fn decide(
    ev: &EvState,
    params: &EvParams,
    signals: &[PriceSignal],
    stations: &[StationInfo],
    tick: u64,
) -> Result<Decision, EvError> {
    let horizon = signals
        .iter()
        .filter(|s| s.is_valid_at(tick))
        .map(|s| s.expiry)
        .max()
        .ok_or(EvError::NoValidSignal)?;
    let find = |id: &str| {
        stations
            .iter()
            .find(|s| s.station_id == id)
            .ok_or_else(|| EvError::UnknownStation(id.into()))
    };
    let current = find(&ev.station_id)?;
    let usable = ev.usable_capacity_wh();
    let target = kwh_to_wh(params.target_soc_kwh).min(usable);
    let reserve = kwh_to_wh(params.reserve_soc_kwh);

    if let Some(trip) = ev.next_trip(tick).filter(|t| t.depart <= horizon) {
        let dest = find(&trip.destination)?;
        let needed = (ev.travel_wh(ev.position.distance(&dest.position)) + reserve).min(usable);
        if ev.soc_wh < needed {
            return Ok(Decision::Charge {
                station: current.station_id.clone(),
                energy_wh: needed - ev.soc_wh,
            });
        }
        if dest.feed_in_tariff > current.retail_price && ev.soc_wh < target {
            return Ok(Decision::Charge {
                station: current.station_id.clone(),
                energy_wh: target - ev.soc_wh,
            });
        }
        return Ok(thresholds(ev, params, current, target, needed));
    }

    if let Some((to, wh, _)) = best_relocation(ev, current, stations, params) {
        return Ok(Decision::Relocate {
            from: current.station_id.clone(),
            to: to.station_id.clone(),
            discharge_wh: wh,
        });
    }
    Ok(thresholds(ev, params, current, target, reserve))
}

fn thresholds(ev: &EvState, params: &EvParams, at: &StationInfo, target: u64, keep: u64) -> Decision {
    if at.retail_price <= params.charge_threshold && ev.soc_wh < target {
        Decision::Charge {
            station: at.station_id.clone(),
            energy_wh: target - ev.soc_wh,
        }
    } else if at.feed_in_tariff >= params.discharge_threshold && ev.soc_wh > keep {
        Decision::Discharge {
            station: at.station_id.clone(),
            energy_wh: ev.soc_wh - keep,
        }
    } else {
        Decision::Idle
    }
}

/// Metered effect of one applied action.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatteryStep {
    /// Drawn from the station at the EV's location.
    pub charged_wh: u64,
    /// Fed into the station at the EV's (final) location.
    pub discharged_wh: u64,
    pub travel_wh: u64,
    pub distance_km: f64,
    /// Stored energy lost because ageing shrank usable capacity below SOC.
    pub capacity_loss_wh: u64,
}

/// Applies `action` and reports the metered energy.
pub fn step_battery_metered(
    ev: &EvState,
    action: &Decision,
    stations: &[StationInfo],
    params: &EvParams,
) -> Result<(EvState, BatteryStep), EvError> {
    let mut next = ev.clone();
    let mut step = BatteryStep::default();
    match action {
        Decision::Idle => {}
        Decision::Charge { station, energy_wh } => {
            if *station != ev.station_id {
                return Err(EvError::InfeasibleAction("charge away from current station"));
            }
            let headroom = ev.usable_capacity_wh().saturating_sub(ev.soc_wh);
            step.charged_wh = (*energy_wh).min(headroom);
            next.soc_wh += step.charged_wh;
        }
        Decision::Discharge { station, energy_wh } => {
            if *station != ev.station_id {
                return Err(EvError::InfeasibleAction("discharge away from current station"));
            }
            step.discharged_wh = (*energy_wh).min(ev.soc_wh);
            next.soc_wh -= step.discharged_wh;
        }
        Decision::Relocate { from, to, discharge_wh } => {
            if *from != ev.station_id {
                return Err(EvError::InfeasibleAction("relocation must start at current station"));
            }
            let dest = stations
                .iter()
                .find(|s| s.station_id == *to)
                .ok_or_else(|| EvError::UnknownStation(to.clone()))?;
            step.distance_km = ev.position.distance(&dest.position);
            step.travel_wh = ev.travel_wh(step.distance_km);
            if step.travel_wh > ev.soc_wh {
                return Err(EvError::InfeasibleAction("not enough energy to reach target"));
            }
            next.soc_wh -= step.travel_wh;
            next.odometer_km += step.distance_km;
            next.position = dest.position;
            next.station_id = dest.station_id.clone();
            step.discharged_wh = (*discharge_wh).min(next.soc_wh);
            next.soc_wh -= step.discharged_wh;
        }
    }
    step.capacity_loss_wh = age(&mut next, step.travel_wh + step.discharged_wh, params);
    Ok((next, step))
}

pub fn step_battery(
    ev: &EvState,
    action: &Decision,
    stations: &[StationInfo],
    params: &EvParams,
) -> Result<EvState, EvError> {
    step_battery_metered(ev, action, stations, params).map(|(s, _)| s)
}

/// Counts full-equivalent cycles of drawn energy and degrades SOH. Returns
/// the energy clipped off SOC by the capacity loss.
fn age(ev: &mut EvState, drawn_wh: u64, params: &EvParams) -> u64 {
    ev.cycle_throughput_wh += drawn_wh;
    loop {
        let usable = ev.usable_capacity_wh();
        if usable == 0 || ev.cycle_throughput_wh < usable {
            break;
        }
        ev.cycle_throughput_wh -= usable;
        ev.remaining_cycles = ev.remaining_cycles.saturating_sub(1);
        ev.soh = (ev.soh - params.soh_loss_per_cycle).max(params.min_soh);
    }
    let clipped = ev.soc_wh.saturating_sub(ev.usable_capacity_wh());
    ev.soc_wh -= clipped;
    clipped
}

/// Whole ticks needed to drive `km` at `speed` km per tick, at least one.
pub fn travel_ticks(km: f64, speed_km_per_tick: f64) -> u64 {
    (libm::ceil(km / speed_km_per_tick) as u64).max(1)
}

/// Whole ticks a charge or discharge of `wh` occupies at `rate` kWh/tick.
pub fn energy_ticks(wh: u64, rate_kwh_per_tick: f64) -> u64 {
    (libm::ceil(wh_to_kwh(wh) / rate_kwh_per_tick) as u64).max(1)
}
