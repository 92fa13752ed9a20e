//! The tick loop.
//!
//! Each tick runs, in order: manager failovers, home ESDPs, grid manager
//! aggregation and pricing, EV arrivals/departures/decisions, claim
//! verification, O-D publication, child chain sealing and anchoring, and
//! finally the public block. Agents are processed in id order and every
//! random draw comes from a purpose-specific seeded stream, so a config and
//! seed fully determine every byte of output.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use anyhow::{anyhow, Context, Result};
use iome_core::ev_agent::{
    decide, energy_ticks, kwh_to_wh, step_battery_metered, travel_ticks, wh_to_kwh, BatteryStep, Decision, EvError,
    EvParams, EvState, PlannedTrip, Position, StationInfo,
};
use iome_core::hash::Hash;
use iome_core::identity::{ca_issue, generate_keypair, KeyPair, KeyRegistry, OneTimeTripKeys, PublicKey};
use iome_core::ledger::{anchor_tx, Chain};
use iome_core::market::{compute_price, issue_eps, EnergyPredictor, MovingAverage, PriceSignal};
use iome_core::mobility::{from_transactions, predict_flows, publish_od, OdMatrix, OdWindow};
use iome_core::trip_extraction::{ChargingStation, PresenceRole, TripClaim, VerifierSet};
use iome_core::txvocab::{check_tx, next_prev_tx, EsdpBody, Overlay, TxBody, TxEnvelope, TxPolicy};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::attacks::{forge_eps, verdict_code, Artifact, AttackKit, AttackSuite};
use crate::config::{BemConfig, ChildChainConfig, FleetConfig, ScenarioConfig};
use crate::metrics::{ChainSize, DecisionRecord, Metrics, PredictionRecord, RegionTick};
use crate::rng::derive_rng;
use crate::truth::{AttackRecord, EnergyEvent, EvEnergy, GroundTruthLog, RelocationSnapshot, TrueTrip};

/// Every ESDP in the simulator predicts the next tick only.
const ESDP_HORIZON: u64 = 1;

pub const PUBLIC_CHAIN_ID: &str = "public";
pub const CONSORTIUM_CHAIN_ID: &str = "consortium";

/// Public identities needed to audit a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub seed: u64,
    pub ca_pk: PublicKey,
    pub grid_manager_pk: PublicKey,
    pub predictor_pk: PublicKey,
    pub quorum: usize,
    pub od_window: u64,
    pub children: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub config: ScenarioConfig,
    pub manifest: Manifest,
    pub public: Chain,
    pub consortium: Chain,
    pub children: Vec<Chain>,
    pub metrics: Metrics,
    pub truth: GroundTruthLog,
}

struct StationRt {
    position: Position,
    station: ChargingStation,
}

struct BemGroup {
    cfg: BemConfig,
    homes: Vec<KeyPair>,
    rng: ChaCha20Rng,
    child: Option<usize>,
}

struct ChildRt {
    cfg: ChildChainConfig,
    chain: Chain,
    keys: Vec<KeyPair>,
    pending: Vec<TxEnvelope>,
}

impl ChildRt {
    fn manager(&self) -> &KeyPair {
        let pk = self.chain.manager_pk().expect("child chains have a manager");
        self.keys.iter().find(|k| k.pk() == pk).expect("manager key is held")
    }
}

struct Transit {
    from: usize,
    to: usize,
    depart: u64,
    arrive: u64,
    keys: OneTimeTripKeys,
    source_tx: TxEnvelope,
    relocation: bool,
    discharge_wh: u64,
}

struct EvRt {
    state: EvState,
    params: EvParams,
    fleet: FleetConfig,
    registry: KeyRegistry,
    rng: ChaCha20Rng,
    busy_until: u64,
    transit: Option<Transit>,
    fleet_key: Option<KeyPair>,
    child: Option<usize>,
    energy: EvEnergy,
    earnings: f64,
}

enum ClaimOrigin {
    Honest(OneTimeTripKeys),
    Attack(AttackRecord),
}

pub struct Simulation {
    cfg: ScenarioConfig,
    ca: KeyPair,
    policy: TxPolicy,
    stations: Vec<StationRt>,
    station_index: BTreeMap<String, usize>,
    station_regions: BTreeMap<String, String>,
    evs: Vec<EvRt>,
    bems: Vec<BemGroup>,
    children: Vec<ChildRt>,
    verifiers: VerifierSet,
    public: Chain,
    public_pending: Vec<TxEnvelope>,
    producers: Vec<KeyPair>,
    grid_manager: KeyPair,
    od_predictor: KeyPair,
    predictor: MovingAverage,
    history: BTreeMap<String, Vec<(f64, f64)>>,
    visible: BTreeMap<String, PriceSignal>,
    latest_od: Option<OdMatrix>,
    attack_plan: BTreeMap<u64, Vec<AttackSuite>>,
    attacker_rng: ChaCha20Rng,
    attacker_keys: KeyRegistry,
    consumed: Vec<OneTimeTripKeys>,
    claims: BTreeMap<Hash, ClaimOrigin>,
    metrics: Metrics,
    truth: GroundTruthLog,
}

pub fn run(cfg: &ScenarioConfig) -> Result<SimOutput> {
    let mut sim = Simulation::new(cfg)?;
    for t in 0..cfg.ticks {
        sim.step(t).with_context(|| format!("tick {t}"))?;
    }
    Ok(sim.finish())
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let mut setup = derive_rng(cfg.seed, "setup", 0);
        let ca = generate_keypair(&mut setup);
        let policy = TxPolicy {
            ca_pk: Some(ca.pk()),
            chain_esdp: true,
        };

        let mut stations = Vec::new();
        let mut station_index = BTreeMap::new();
        let mut station_regions = BTreeMap::new();
        for (i, s) in cfg.stations.iter().enumerate() {
            let kp = generate_keypair(&mut setup);
            let cert = ca_issue(&ca, kp.pk(), &s.id);
            stations.push(StationRt {
                position: Position::new(s.x, s.y),
                station: ChargingStation::new(kp, cert),
            });
            station_index.insert(s.id.clone(), i);
            station_regions.insert(s.id.clone(), s.region.clone());
        }

        let verifier_keys = (0..cfg.verifiers.count).map(|_| generate_keypair(&mut setup)).collect();
        let verifiers = VerifierSet::new(
            verifier_keys,
            cfg.verifiers.quorum,
            ca.pk(),
            CONSORTIUM_CHAIN_ID,
            cfg.verifiers.anchor_period,
        )?;
        let producers: Vec<KeyPair> = (0..cfg.public_chain.producers).map(|_| generate_keypair(&mut setup)).collect();
        let public = Chain::public(PUBLIC_CHAIN_ID, producers.iter().map(KeyPair::pk).collect(), policy)?;
        let grid_manager = generate_keypair(&mut setup);
        let od_predictor = generate_keypair(&mut setup);

        let mut children = Vec::new();
        for c in &cfg.child_chains {
            let keys: Vec<KeyPair> = (0..=c.backups).map(|_| generate_keypair(&mut setup)).collect();
            let chain = Chain::child(
                c.id.clone(),
                keys[0].pk(),
                keys[1..].iter().map(KeyPair::pk).collect(),
                c.anchor_period,
                TxPolicy {
                    ca_pk: None,
                    chain_esdp: true,
                },
            )?;
            children.push(ChildRt {
                cfg: c.clone(),
                chain,
                keys,
                pending: Vec::new(),
            });
        }
        let child_index = |id: &Option<String>| id.as_ref().and_then(|id| cfg.child_chains.iter().position(|c| c.id == *id));

        let bems = cfg
            .bems
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mut rng = derive_rng(cfg.seed, "bem", i as u64);
                BemGroup {
                    cfg: b.clone(),
                    homes: (0..b.homes).map(|_| generate_keypair(&mut rng)).collect(),
                    rng,
                    child: child_index(&b.child_chain),
                }
            })
            .collect();

        let mut sim = Simulation {
            cfg: cfg.clone(),
            ca,
            policy,
            stations,
            station_index,
            station_regions,
            evs: Vec::new(),
            bems,
            children,
            verifiers,
            public,
            public_pending: Vec::new(),
            producers,
            grid_manager,
            od_predictor,
            predictor: MovingAverage {
                window: cfg.market.predictor_window,
                horizon: cfg.eps_interval(),
                mean_charge_kwh: cfg.market.mean_charge_kwh,
                mean_discharge_kwh: cfg.market.mean_discharge_kwh,
            },
            history: cfg.regions.iter().map(|r| (r.id.clone(), Vec::new())).collect(),
            visible: BTreeMap::new(),
            latest_od: None,
            attack_plan: BTreeMap::new(),
            attacker_rng: derive_rng(cfg.seed, "attacker", 0),
            attacker_keys: KeyRegistry::new(),
            consumed: Vec::new(),
            claims: BTreeMap::new(),
            metrics: Metrics::default(),
            truth: GroundTruthLog::default(),
        };

        let mut ev_id = 0u32;
        for fleet in &cfg.fleets {
            for _ in 0..fleet.count {
                let ev = sim.spawn_ev(ev_id, fleet, child_index(&fleet.child_chain));
                sim.evs.push(ev);
                ev_id += 1;
            }
        }
        for i in 0..sim.evs.len() {
            sim.plan_trip(i, 0);
        }
        sim.truth.ev_energy = sim
            .evs
            .iter()
            .map(|e| EvEnergy {
                initial_wh: e.state.soc_wh,
                ..EvEnergy::default()
            })
            .collect();

        let mut plan_rng = derive_rng(cfg.seed, "attack-plan", 0);
        for suite in AttackSuite::ALL {
            for _ in 0..suite.count_in(&cfg.attacks) {
                let t = plan_rng.gen_range(cfg.ticks.min(5)..cfg.ticks.max(1));
                sim.attack_plan.entry(t).or_default().push(suite);
            }
        }
        Ok(sim)
    }

    fn spawn_ev(&mut self, ev_id: u32, fleet: &FleetConfig, child: Option<usize>) -> EvRt {
        let mut rng = derive_rng(self.cfg.seed, "ev", ev_id as u64);
        let home = rng.gen_range(0..self.stations.len());
        let capacity_wh = kwh_to_wh(fleet.capacity_kwh);
        let [lo, hi] = fleet.initial_soc;
        let frac = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let mut registry = KeyRegistry::new();
        let fleet_key = child.map(|_| {
            let k = generate_keypair(&mut rng);
            registry.add_private_key(k.pk());
            k
        });
        let station_id = self.cfg.stations[home].id.clone();
        EvRt {
            state: EvState {
                ev_id,
                station_id,
                position: self.stations[home].position,
                soc_wh: kwh_to_wh(fleet.capacity_kwh * frac),
                capacity_nominal_wh: capacity_wh,
                soh: 1.0,
                schedule: Vec::new(),
                odometer_km: 0.0,
                remaining_cycles: fleet.rated_cycles,
                cycle_throughput_wh: 0,
                consumption_kwh_per_km: fleet.consumption_kwh_per_km,
                charge_rate_kwh_per_tick: fleet.charge_rate_kwh_per_tick,
                discharge_rate_kwh_per_tick: fleet.discharge_rate_kwh_per_tick,
            },
            params: fleet.policy.params(),
            fleet: fleet.clone(),
            registry,
            rng,
            busy_until: 0,
            transit: None,
            fleet_key,
            child,
            energy: EvEnergy::default(),
            earnings: 0.0,
        }
    }

    /// Plans the EV's next trip from its current station.
    fn plan_trip(&mut self, i: usize, after: u64) {
        let ev = &mut self.evs[i];
        let here = ev.state.position;
        let current = &ev.state.station_id;
        let mut candidates: Vec<usize> = (0..self.stations.len())
            .filter(|&s| self.cfg.stations[s].id != *current)
            .filter(|&s| here.distance(&self.stations[s].position) <= ev.fleet.max_trip_km)
            .collect();
        if candidates.is_empty() {
            // nothing close enough: fall back to the nearest other station
            let nearest = (0..self.stations.len())
                .filter(|&s| self.cfg.stations[s].id != *current)
                .min_by(|&a, &b| {
                    here.distance(&self.stations[a].position)
                        .total_cmp(&here.distance(&self.stations[b].position))
                });
            candidates.extend(nearest);
        }
        let Some(&dest) = candidates.get(ev.rng.gen_range(0..candidates.len().max(1))) else {
            return;
        };
        let [lo, hi] = ev.fleet.trip_gap;
        let depart = after + ev.rng.gen_range(lo..=hi);
        ev.state.schedule = vec![PlannedTrip {
            origin: current.clone(),
            destination: self.cfg.stations[dest].id.clone(),
            depart,
        }];
    }

    pub fn step(&mut self, t: u64) -> Result<()> {
        self.failovers(t)?;
        self.emit_home_esdps(t)?;
        self.grid_manager_step(t)?;
        self.sybil_attacks(t);
        self.ev_step(t)?;
        self.claims_step(t)?;
        self.publish_od_step(t)?;
        self.child_step(t)?;
        self.seal_public(t)?;
        self.check_bounds(t);
        Ok(())
    }

    fn failovers(&mut self, t: u64) -> Result<()> {
        for c in &mut self.children {
            if c.cfg.fail_manager_at == Some(t) {
                c.chain.failover()?;
            }
        }
        if self.cfg.verifiers.fail_lead_at == Some(t) {
            self.verifiers.failover()?;
        }
        Ok(())
    }

    fn submit_public(&mut self, tx: TxEnvelope) -> Result<()> {
        check_tx(&Overlay::new(&self.public, &self.public_pending), &tx, &self.policy)
            .map_err(|r| anyhow!("public chain rejected {}: {}", tx.kind().label(), r.code()))?;
        self.public_pending.push(tx);
        Ok(())
    }

    fn submit_child(&mut self, child: usize, tx: TxEnvelope) -> Result<()> {
        let c = &mut self.children[child];
        check_tx(&Overlay::new(&c.chain, &c.pending), &tx, c.chain.policy())
            .map_err(|r| anyhow!("chain {} rejected {}: {}", c.cfg.id, tx.kind().label(), r.code()))?;
        c.pending.push(tx);
        Ok(())
    }

    fn esdp(
        &self,
        signer: &KeyPair,
        target: Option<usize>,
        region: &str,
        supply: f64,
        demand: f64,
        t: u64,
    ) -> Result<TxEnvelope> {
        let p_t_id = match target {
            Some(c) => {
                let c = &self.children[c];
                next_prev_tx(&Overlay::new(&c.chain, &c.pending), &signer.pk())
            }
            None => next_prev_tx(&Overlay::new(&self.public, &self.public_pending), &signer.pk()),
        };
        let body = EsdpBody {
            region_id: region.into(),
            predicted_supply: supply,
            predicted_demand: demand,
            horizon: ESDP_HORIZON,
            timestamp: t,
            p_t_id: Some(p_t_id),
        };
        Ok(iome_core::txvocab::build_tx(TxBody::Esdp(body), signer)?)
    }

    fn emit_home_esdps(&mut self, t: u64) -> Result<()> {
        let mut out = Vec::new();
        for g in &mut self.bems {
            let b = &g.cfg;
            for (h, key) in g.homes.iter().enumerate() {
                let phase = TAU * (t as f64 + h as f64 * 3.0) / b.period as f64;
                let mut noise = || 1.0 + b.noise * (g.rng.gen::<f64>() * 2.0 - 1.0);
                let supply = (b.base_supply_kwh * (1.0 + b.amplitude * phase.sin()) * noise()).max(0.0);
                let demand = (b.base_demand_kwh * (1.0 + b.amplitude * phase.cos()) * noise()).max(0.0);
                out.push((key.clone(), g.child, b.region.clone(), supply, demand));
            }
        }
        for (key, child, region, s, d) in out {
            let tx = self.esdp(&key, child, &region, s, d, t)?;
            match child {
                Some(c) => self.submit_child(c, tx)?,
                None => self.submit_public(tx)?,
            }
        }
        Ok(())
    }

    fn aggregate_public(&self, region: &str, t: u64) -> (f64, f64) {
        let recent = self
            .public
            .blocks()
            .iter()
            .rev()
            .take_while(|b| b.timestamp + ESDP_HORIZON >= t)
            .flat_map(|b| b.txs.iter());
        iome_core::market::aggregate_txs(recent, region, t)
    }

    fn grid_manager_step(&mut self, t: u64) -> Result<()> {
        let regions = self.cfg.regions.clone();
        for r in &regions {
            let (s, d) = self.aggregate_public(&r.id, t);
            let history = self.history.get_mut(&r.id).expect("every region has a history");
            history.push((s, d));
            self.metrics.region_ticks.push(RegionTick {
                tick: t,
                region: r.id.clone(),
                supply_kwh: s,
                demand_kwh: d,
                price: self
                    .visible
                    .get(&r.id)
                    .filter(|sig| sig.is_valid_at(t))
                    .map(|sig| sig.energy_price),
            });
            if t % self.cfg.eps_interval() != 0 {
                continue;
            }
            let mobility = match (&self.latest_od, self.cfg.mobility_feedback) {
                (Some(m), true) => Some(predict_flows(m, &self.station_regions)?),
                _ => None,
            };
            let pred = self.predictor.predict(&r.id, &self.history[&r.id], mobility.as_ref(), t);
            let signal = compute_price(&pred, &self.cfg.price_params(r), t);
            let tx = issue_eps(
                &self.grid_manager,
                &signal,
                &Overlay::new(&self.public, &self.public_pending),
                &self.policy,
            )?;
            self.public_pending.push(tx);
            self.metrics.predictions.push(PredictionRecord {
                tick: t,
                region: r.id.clone(),
                predicted_supply: pred.predicted_supply,
                predicted_demand: pred.predicted_demand,
                includes_mobility: pred.includes_mobility,
                price: signal.energy_price,
                expiry: signal.expiry,
            });
        }
        Ok(())
    }

    fn sybil_attacks(&mut self, t: u64) {
        let n = self
            .attack_plan
            .get(&t)
            .map(|v| v.iter().filter(|s| **s == AttackSuite::Sybil).count())
            .unwrap_or(0);
        for _ in 0..n {
            let region = self.cfg.regions[0].id.clone();
            let view = Overlay::new(&self.public, &self.public_pending);
            let Artifact::Eps { tx, expected } = forge_eps(&mut self.attacker_rng, &view, &self.grid_manager.pk(), &region, t)
            else {
                unreachable!("forge_eps only builds price signals")
            };
            let outcome = check_tx(&view, &tx, &self.policy);
            let code = outcome.err().map(|r| r.code()).unwrap_or("accepted");
            *self.metrics.eps_rejected.entry(code.into()).or_default() += u64::from(outcome.is_err());
            let accepted = outcome.is_ok();
            if accepted {
                self.public_pending.push(tx);
            }
            self.truth.attacks.push(AttackRecord {
                tick: t,
                suite: AttackSuite::Sybil.name().into(),
                expected: expected.code().into(),
                observed: vec![code.into()],
                accepted,
            });
        }
    }

    fn station_infos(&self, t: u64) -> Vec<StationInfo> {
        self.cfg
            .stations
            .iter()
            .zip(&self.stations)
            .map(|(s, rt)| {
                let region = self.cfg.region(&s.region).expect("validated");
                let price = self
                    .visible
                    .get(&s.region)
                    .filter(|sig| sig.is_valid_at(t))
                    .map(|sig| sig.energy_price)
                    .unwrap_or(region.base_price);
                StationInfo {
                    station_id: s.id.clone(),
                    position: rt.position,
                    region_id: s.region.clone(),
                    feed_in_tariff: price * region.feed_in_ratio,
                    retail_price: price,
                    certificate: rt.station.certificate().clone(),
                }
            })
            .collect()
    }

    fn ev_step(&mut self, t: u64) -> Result<()> {
        let infos = self.station_infos(t);
        let signals: Vec<PriceSignal> = self.visible.values().cloned().collect();
        for i in 0..self.evs.len() {
            if self.evs[i].transit.as_ref().is_some_and(|tr| tr.arrive == t) {
                self.arrive(i, t, &infos)?;
            }
            let ev = &self.evs[i];
            if ev.transit.is_some() || ev.busy_until > t {
                continue;
            }
            if let Some(trip) = ev.state.schedule.first().filter(|p| p.depart <= t).cloned() {
                let to = self.station_index[&trip.destination];
                // a trip to where the EV already is, or one it cannot make,
                // is dropped and replaced
                let stays = trip.destination == ev.state.station_id;
                if stays || !self.depart(i, to, t, false, 0, &infos)? {
                    self.metrics.trips_cancelled += 1;
                    self.plan_trip(i, t);
                }
                continue;
            }
            let decision = match decide(&ev.state, &ev.params, &signals, &infos, t) {
                Ok(d) => d,
                Err(EvError::NoValidSignal) => Decision::Idle,
                Err(e) => return Err(e.into()),
            };
            self.metrics.decisions.push(DecisionRecord {
                tick: t,
                ev_id: ev.state.ev_id,
                decision: decision.to_string(),
                soc_wh: ev.state.soc_wh,
            });
            match &decision {
                Decision::Idle => {}
                Decision::Charge { .. } | Decision::Discharge { .. } => {
                    self.apply_energy(i, &decision, t, &infos)?;
                }
                Decision::Relocate { to, discharge_wh, .. } => {
                    self.truth.relocations.push(RelocationSnapshot {
                        tick: t,
                        ev: ev.state.clone(),
                        params: ev.params,
                        signals: signals.clone(),
                        stations: infos.clone(),
                        chosen: to.clone(),
                        discharge_wh: *discharge_wh,
                    });
                    self.metrics.relocations += 1;
                    let to = self.station_index[to];
                    let wh = *discharge_wh;
                    if !self.depart(i, to, t, true, wh, &infos)? {
                        return Err(anyhow!("relocation chosen by the engine was infeasible"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Applies a charge or discharge at the EV's current station.
    fn apply_energy(&mut self, i: usize, decision: &Decision, t: u64, infos: &[StationInfo]) -> Result<()> {
        let ev = &mut self.evs[i];
        let (next, step) = step_battery_metered(&ev.state, decision, infos, &ev.params)?;
        ev.state = next;
        let station = ev.state.station_id.clone();
        let info = &infos[self.station_index[&station]];
        let wh = step.charged_wh.max(step.discharged_wh);
        let rate = if step.charged_wh > 0 {
            ev.state.charge_rate_kwh_per_tick
        } else {
            ev.state.discharge_rate_kwh_per_tick
        };
        if wh > 0 {
            ev.busy_until = t + energy_ticks(wh, rate);
        }
        ev.earnings += wh_to_kwh(step.discharged_wh) * info.feed_in_tariff - wh_to_kwh(step.charged_wh) * info.retail_price;
        self.record_energy(i, t, &station, &step)?;
        Ok(())
    }

    fn record_energy(&mut self, i: usize, t: u64, station: &str, step: &BatteryStep) -> Result<()> {
        let ev = &mut self.evs[i];
        ev.energy.charged_wh += step.charged_wh;
        ev.energy.discharged_wh += step.discharged_wh;
        ev.energy.travel_wh += step.travel_wh;
        ev.energy.capacity_loss_wh += step.capacity_loss_wh;
        if step.charged_wh == 0 && step.discharged_wh == 0 {
            return Ok(());
        }
        let region = self.station_regions[station].clone();
        let meter = self.metrics.station_meters.entry(station.into()).or_default();
        meter.dispensed_wh += step.charged_wh;
        meter.received_wh += step.discharged_wh;
        self.truth.energy_events.push(EnergyEvent {
            tick: t,
            ev_id: ev.state.ev_id,
            station: station.into(),
            region: region.clone(),
            charged_wh: step.charged_wh,
            discharged_wh: step.discharged_wh,
        });
        if let (Some(key), Some(child)) = (ev.fleet_key.clone(), ev.child) {
            let tx = self.esdp(
                &key,
                Some(child),
                &region,
                wh_to_kwh(step.discharged_wh),
                wh_to_kwh(step.charged_wh),
                t,
            )?;
            self.submit_child(child, tx)?;
        }
        Ok(())
    }

    /// Starts a trip: source presence under a fresh one-time key, then the
    /// drive. Returns false if the EV cannot reach the destination.
    fn depart(
        &mut self,
        i: usize,
        to: usize,
        t: u64,
        relocation: bool,
        discharge_wh: u64,
        infos: &[StationInfo],
    ) -> Result<bool> {
        let from = self.station_index[&self.evs[i].state.station_id];
        let ev = &mut self.evs[i];
        let leg = Decision::Relocate {
            from: ev.state.station_id.clone(),
            to: infos[to].station_id.clone(),
            discharge_wh: 0,
        };
        let Ok((next, step)) = step_battery_metered(&ev.state, &leg, infos, &ev.params) else {
            return Ok(false);
        };
        let keys = ev.registry.derive_trip_keys(&mut ev.rng);
        let station = &mut self.stations[from].station;
        station.dock(keys.pk1.pk());
        let source_tx = station.attest(PresenceRole::Source, keys.pk1.pk(), t)?;
        station.undock(&keys.pk1.pk());
        self.truth.presented_keys.push(keys.pk1.pk());

        let arrive = t + travel_ticks(step.distance_km, ev.fleet.speed_km_per_tick);
        ev.state = next;
        ev.state.schedule.clear();
        ev.transit = Some(Transit {
            from,
            to,
            depart: t,
            arrive,
            keys,
            source_tx,
            relocation,
            discharge_wh,
        });
        self.metrics.trips_started += 1;
        let station_id = infos[from].station_id.clone();
        self.record_energy(i, t, &station_id, &step)?;
        Ok(true)
    }

    /// Destination presence, claim submission and any planned discharge.
    fn arrive(&mut self, i: usize, t: u64, infos: &[StationInfo]) -> Result<()> {
        let tr = self.evs[i].transit.take().expect("caller checked transit");
        let station = &mut self.stations[tr.to].station;
        station.dock(tr.keys.pk2.pk());
        let dest_tx = station.attest(PresenceRole::Destination, tr.keys.pk2.pk(), t)?;
        station.undock(&tr.keys.pk2.pk());
        self.truth.presented_keys.push(tr.keys.pk2.pk());

        let trip = TrueTrip {
            origin: self.cfg.stations[tr.from].id.clone(),
            destination: self.cfg.stations[tr.to].id.clone(),
            t_start: tr.depart,
            t_end: t,
            ev_id: self.evs[i].state.ev_id,
            pk1: tr.keys.pk1.pk(),
            pk2: tr.keys.pk2.pk(),
            relocation: tr.relocation,
        };
        if t - tr.depart > self.cfg.protocol.source_presence_ttl {
            self.truth.abandoned_trips.push(trip);
        } else {
            let claim = TripClaim::sign(tr.source_tx, dest_tx, &tr.keys);
            let ticket = self.verifiers.submit_claim(claim);
            self.truth.honest_trips.push(trip);
            self.claims.insert(ticket.claim_hash, ClaimOrigin::Honest(tr.keys));
        }

        if tr.relocation && tr.discharge_wh > 0 {
            let d = Decision::Discharge {
                station: self.evs[i].state.station_id.clone(),
                energy_wh: tr.discharge_wh,
            };
            self.apply_energy(i, &d, t, infos)?;
        }
        if self.evs[i].state.schedule.is_empty() {
            let after = self.evs[i].busy_until.max(t);
            self.plan_trip(i, after);
        }
        Ok(())
    }

    fn claims_step(&mut self, t: u64) -> Result<()> {
        let planned: Vec<AttackSuite> = self
            .attack_plan
            .get(&t)
            .map(|v| v.iter().copied().filter(|s| *s != AttackSuite::Sybil).collect())
            .unwrap_or_default();
        for suite in planned {
            if suite == AttackSuite::Replay && self.consumed.is_empty() {
                // nothing to replay yet; try again next tick
                self.attack_plan.entry(t + 1).or_default().push(suite);
                continue;
            }
            let mut stations: Vec<ChargingStation> = self.stations.iter().map(|s| s.station.clone()).collect();
            let mut kit = AttackKit {
                rng: &mut self.attacker_rng,
                stations: &mut stations,
                keys: &mut self.attacker_keys,
            };
            let artifact = match suite {
                AttackSuite::ForgedCert => kit.forged_cert(t),
                AttackSuite::Replay => {
                    let k = kit.rng.gen_range(0..self.consumed.len());
                    kit.replay(&self.consumed[k].clone(), t)
                }
                AttackSuite::MixAndMatch => kit.mix_and_match(t),
                AttackSuite::InvertedTime => kit.inverted_time(t),
                AttackSuite::SameStation => kit.same_station(t),
                AttackSuite::Sybil => unreachable!("filtered above"),
            };
            let Artifact::Claim { claim, expected } = artifact else {
                unreachable!("claim suites build claims")
            };
            let ticket = self.verifiers.submit_claim(claim);
            self.claims.insert(
                ticket.claim_hash,
                ClaimOrigin::Attack(AttackRecord {
                    tick: t,
                    suite: suite.name().into(),
                    expected: expected.code().into(),
                    observed: Vec::new(),
                    accepted: false,
                }),
            );
        }

        for (claim, verdicts) in self.verifiers.collect_verdicts(t) {
            let fin = self.verifiers.finalize_claim(&claim, &verdicts)?;
            match self.claims.remove(&fin.claim_hash) {
                Some(ClaimOrigin::Honest(keys)) => {
                    if fin.accepted() {
                        self.consumed.push(keys);
                    }
                }
                Some(ClaimOrigin::Attack(mut rec)) => {
                    rec.observed = verdicts.iter().map(|v| verdict_code(&v.verdict)).collect();
                    rec.accepted = fin.accepted();
                    self.truth.attacks.push(rec);
                }
                None => return Err(anyhow!("verdict for an unknown claim")),
            }
            match &fin.trip_record {
                Some(tx) => {
                    self.metrics.claims_accepted += 1;
                    self.submit_public(tx.clone())?;
                }
                None => *self.metrics.claims_rejected.entry(verdict_code(&fin.outcome)).or_default() += 1,
            }
        }
        self.verifiers.seal_block(t)?;
        Ok(())
    }

    fn publish_od_step(&mut self, t: u64) -> Result<()> {
        let w = self.cfg.od_window;
        if (t + 1) % w != 0 {
            return Ok(());
        }
        let window = OdWindow::new(t + 1 - w, t + 1)?;
        let txs = self
            .public
            .blocks()
            .iter()
            .filter(|b| b.timestamp >= window.from)
            .flat_map(|b| b.txs.iter())
            .chain(self.public_pending.iter());
        let matrix = from_transactions(txs, window);
        let tx = publish_od(
            &matrix,
            &self.od_predictor,
            &Overlay::new(&self.public, &self.public_pending),
            &self.policy,
        )?;
        self.public_pending.push(tx);
        self.metrics.od_published.push(matrix);
        Ok(())
    }

    fn child_step(&mut self, t: u64) -> Result<()> {
        for c in 0..self.children.len() {
            // the manager forwards per-region totals of its members' ESDPs
            let mut totals: BTreeMap<String, (f64, f64)> = BTreeMap::new();
            for tx in &self.children[c].pending {
                if let TxBody::Esdp(e) = &tx.body {
                    let entry = totals.entry(e.region_id.clone()).or_default();
                    entry.0 += e.predicted_supply;
                    entry.1 += e.predicted_demand;
                }
            }
            let manager = self.children[c].manager().clone();
            for (region, (s, d)) in totals {
                let tx = self.esdp(&manager, None, &region, s, d, t)?;
                self.submit_public(tx)?;
            }
            let child = &mut self.children[c];
            if !child.pending.is_empty() {
                let txs = std::mem::take(&mut child.pending);
                child.chain.append_block(txs, &manager, t)?;
            }
            if t % child.cfg.anchor_period == 0 && !child.chain.is_empty() {
                let (_, tx) = anchor_tx(&child.chain, &manager, t)?;
                self.submit_public(tx)?;
            }
        }
        let consortium = self.verifiers.consortium();
        if t % self.cfg.verifiers.anchor_period == 0 && !consortium.is_empty() {
            let (_, tx) = anchor_tx(consortium, self.verifiers.lead_keypair(), t)?;
            self.submit_public(tx)?;
        }
        Ok(())
    }

    fn seal_public(&mut self, t: u64) -> Result<()> {
        if self.public_pending.is_empty() {
            return Ok(());
        }
        let producer = &self.producers[(t % self.producers.len() as u64) as usize];
        let txs = std::mem::take(&mut self.public_pending);
        let block = self.public.append_block(txs, producer, t)?;
        for tx in &block.txs {
            match &tx.body {
                TxBody::Eps(e) if tx.signer_pk == self.grid_manager.pk() => {
                    self.visible.insert(e.region_id.clone(), PriceSignal::from_eps(e));
                }
                TxBody::OdMatrix(m) if tx.signer_pk == self.od_predictor.pk() => {
                    self.latest_od = Some(m.clone());
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn check_bounds(&mut self, t: u64) {
        for ev in &self.evs {
            self.truth.soc_checks += 1;
            if ev.state.soc_wh > ev.state.usable_capacity_wh() || !(ev.state.soh > 0.0 && ev.state.soh <= 1.0) {
                self.truth.soc_violations.push((t, ev.state.ev_id));
            }
        }
    }

    pub fn finish(mut self) -> SimOutput {
        for (i, ev) in self.evs.iter().enumerate() {
            let e = &mut self.truth.ev_energy[i];
            let initial = e.initial_wh;
            *e = EvEnergy {
                initial_wh: initial,
                final_wh: ev.state.soc_wh,
                ..ev.energy.clone()
            };
            self.metrics.ev_earnings.insert(ev.state.ev_id, ev.earnings);
        }
        let mut sizes = BTreeMap::new();
        let consortium = self.verifiers.consortium().clone();
        for chain in std::iter::once(&self.public)
            .chain(std::iter::once(&consortium))
            .chain(self.children.iter().map(|c| &c.chain))
        {
            sizes.insert(
                chain.id().to_string(),
                ChainSize {
                    blocks: chain.len(),
                    txs: chain.tx_count(),
                    bytes: chain.block_log_bytes().len(),
                },
            );
        }
        self.metrics.chain_sizes = sizes;
        let manifest = Manifest {
            seed: self.cfg.seed,
            ca_pk: self.ca.pk(),
            grid_manager_pk: self.grid_manager.pk(),
            predictor_pk: self.od_predictor.pk(),
            quorum: self.verifiers.quorum(),
            od_window: self.cfg.od_window,
            children: self.children.iter().map(|c| c.cfg.id.clone()).collect(),
        };
        SimOutput {
            config: self.cfg,
            manifest,
            public: self.public,
            consortium,
            children: self.children.into_iter().map(|c| c.chain).collect(),
            metrics: self.metrics,
            truth: self.truth,
        }
    }
}
