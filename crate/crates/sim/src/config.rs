//! Scenario files (TOML). See `scenarios/` for annotated examples.

use std::collections::BTreeSet;
use std::path::Path;

use iome_core::ev_agent::{EvParams, RelocationCosts};
use iome_core::market::PriceParams;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    pub seed: u64,
    pub ticks: u64,
    /// Length of an O-D window in ticks.
    #[serde(default = "defaults::od_window")]
    pub od_window: u64,
    /// Fold published O-D matrices into energy prediction.
    #[serde(default = "defaults::yes")]
    pub mobility_feedback: bool,
    #[serde(default)]
    pub market: MarketConfig,
    pub regions: Vec<RegionConfig>,
    pub stations: Vec<StationConfig>,
    #[serde(default)]
    pub fleets: Vec<FleetConfig>,
    #[serde(default)]
    pub bems: Vec<BemConfig>,
    #[serde(default)]
    pub child_chains: Vec<ChildChainConfig>,
    #[serde(default)]
    pub verifiers: VerifierConfig,
    #[serde(default)]
    pub public_chain: PublicChainConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub attacks: AttackConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    /// Ticks of aggregate history averaged by the predictor.
    #[serde(default = "defaults::predictor_window")]
    pub predictor_window: usize,
    /// Demand added per predicted EV arrival (kWh).
    #[serde(default = "defaults::mean_charge")]
    pub mean_charge_kwh: f64,
    /// Supply added per predicted EV arrival (kWh).
    #[serde(default)]
    pub mean_discharge_kwh: f64,
    /// Ticks between EPS issues; defaults to the O-D window.
    #[serde(default)]
    pub eps_interval: Option<u64>,
    /// EPS lifetime; defaults to the issue interval.
    #[serde(default)]
    pub expiry_ticks: Option<u64>,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            predictor_window: defaults::predictor_window(),
            mean_charge_kwh: defaults::mean_charge(),
            mean_discharge_kwh: 0.0,
            eps_interval: None,
            expiry_ticks: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub id: String,
    pub base_price: f64,
    #[serde(default = "defaults::slope")]
    pub slope: f64,
    #[serde(default = "defaults::floor")]
    pub price_floor: f64,
    #[serde(default = "defaults::cap")]
    pub price_cap: f64,
    /// Feed-in tariff as a fraction of the regional price.
    #[serde(default = "defaults::feed_in_ratio")]
    pub feed_in_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationConfig {
    pub id: String,
    pub region: String,
    /// km
    pub x: f64,
    /// km
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    pub name: String,
    pub count: u32,
    #[serde(default = "defaults::capacity")]
    pub capacity_kwh: f64,
    /// Initial SOC drawn uniformly from this fraction range.
    #[serde(default = "defaults::initial_soc")]
    pub initial_soc: [f64; 2],
    #[serde(default = "defaults::consumption")]
    pub consumption_kwh_per_km: f64,
    #[serde(default = "defaults::speed")]
    pub speed_km_per_tick: f64,
    #[serde(default = "defaults::rate")]
    pub charge_rate_kwh_per_tick: f64,
    #[serde(default = "defaults::rate")]
    pub discharge_rate_kwh_per_tick: f64,
    /// Ticks between the end of one planned trip and the next departure.
    #[serde(default = "defaults::trip_gap")]
    pub trip_gap: [u64; 2],
    /// Planned trips only go to stations within this distance.
    #[serde(default = "defaults::max_trip_km")]
    pub max_trip_km: f64,
    #[serde(default = "defaults::cycles")]
    pub rated_cycles: u64,
    /// Members post their planned load on this fleet child chain.
    #[serde(default)]
    pub child_chain: Option<String>,
    #[serde(default)]
    pub policy: PolicyConfig,
}

/// Optional overrides of the EV decision defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub charge_threshold: Option<f64>,
    pub discharge_threshold: Option<f64>,
    pub reserve_soc_kwh: Option<f64>,
    pub target_soc_kwh: Option<f64>,
    pub safety_margin: Option<f64>,
    pub soh_loss_per_cycle: Option<f64>,
    pub transport_per_km: Option<f64>,
    pub mileage_depreciation_per_km: Option<f64>,
    pub cycle_depreciation_cost: Option<f64>,
}

impl PolicyConfig {
    pub fn params(&self) -> EvParams {
        let d = EvParams::default();
        EvParams {
            charge_threshold: self.charge_threshold.unwrap_or(d.charge_threshold),
            discharge_threshold: self.discharge_threshold.unwrap_or(d.discharge_threshold),
            reserve_soc_kwh: self.reserve_soc_kwh.unwrap_or(d.reserve_soc_kwh),
            target_soc_kwh: self.target_soc_kwh.unwrap_or(d.target_soc_kwh),
            safety_margin: self.safety_margin.unwrap_or(d.safety_margin),
            soh_loss_per_cycle: self.soh_loss_per_cycle.unwrap_or(d.soh_loss_per_cycle),
            min_soh: d.min_soh,
            costs: RelocationCosts {
                transport_per_km: self.transport_per_km.unwrap_or(d.costs.transport_per_km),
                mileage_depreciation_per_km: self
                    .mileage_depreciation_per_km
                    .unwrap_or(d.costs.mileage_depreciation_per_km),
                cycle_depreciation_cost: self
                    .cycle_depreciation_cost
                    .unwrap_or(d.costs.cycle_depreciation_cost),
            },
        }
    }
}

/// A group of homes whose building energy managers emit ESDPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BemConfig {
    pub region: String,
    #[serde(default = "defaults::homes")]
    pub homes: u32,
    /// Mean per-home supply per tick (kWh).
    #[serde(default = "defaults::home_supply")]
    pub base_supply_kwh: f64,
    /// Mean per-home demand per tick (kWh).
    #[serde(default = "defaults::home_demand")]
    pub base_demand_kwh: f64,
    /// Relative daily swing.
    #[serde(default = "defaults::amplitude")]
    pub amplitude: f64,
    #[serde(default = "defaults::period")]
    pub period: u64,
    /// Relative uniform noise.
    #[serde(default = "defaults::noise")]
    pub noise: f64,
    /// Homes report to this VPP or microgrid chain instead of the public chain.
    #[serde(default)]
    pub child_chain: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChildKind {
    Vpp,
    Microgrid,
    Fleet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChildChainConfig {
    pub id: String,
    pub kind: ChildKind,
    #[serde(default = "defaults::anchor_period")]
    pub anchor_period: u64,
    #[serde(default = "defaults::backups")]
    pub backups: u32,
    /// Tick at which the manager goes offline and the first backup takes over.
    #[serde(default)]
    pub fail_manager_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierConfig {
    #[serde(default = "defaults::verifiers")]
    pub count: usize,
    #[serde(default)]
    pub quorum: Option<usize>,
    #[serde(default = "defaults::anchor_period")]
    pub anchor_period: u64,
    #[serde(default)]
    pub fail_lead_at: Option<u64>,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            count: defaults::verifiers(),
            quorum: None,
            anchor_period: defaults::anchor_period(),
            fail_lead_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublicChainConfig {
    #[serde(default = "defaults::producers")]
    pub producers: usize,
}

impl Default for PublicChainConfig {
    fn default() -> Self {
        Self {
            producers: defaults::producers(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    /// An EV drops a source presence it could not pair within this many ticks.
    #[serde(default = "defaults::ttl")]
    pub source_presence_ttl: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            source_presence_ttl: defaults::ttl(),
        }
    }
}

/// Adversarial artifacts injected into a run, per suite.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default)]
    pub sybil: u32,
    #[serde(default)]
    pub forged_cert: u32,
    #[serde(default)]
    pub replay: u32,
    #[serde(default)]
    pub mix_and_match: u32,
    #[serde(default)]
    pub inverted_time: u32,
    #[serde(default)]
    pub same_station: u32,
}

mod defaults {
    pub fn yes() -> bool {
        true
    }
    pub fn od_window() -> u64 {
        20
    }
    pub fn predictor_window() -> usize {
        5
    }
    pub fn mean_charge() -> f64 {
        15.0
    }
    pub fn slope() -> f64 {
        0.5
    }
    pub fn floor() -> f64 {
        0.05
    }
    pub fn cap() -> f64 {
        2.0
    }
    pub fn feed_in_ratio() -> f64 {
        0.8
    }
    pub fn capacity() -> f64 {
        60.0
    }
    pub fn initial_soc() -> [f64; 2] {
        [0.4, 0.9]
    }
    pub fn consumption() -> f64 {
        0.18
    }
    pub fn speed() -> f64 {
        30.0
    }
    pub fn rate() -> f64 {
        11.0
    }
    pub fn trip_gap() -> [u64; 2] {
        [8, 30]
    }
    pub fn max_trip_km() -> f64 {
        60.0
    }
    pub fn cycles() -> u64 {
        3000
    }
    pub fn homes() -> u32 {
        10
    }
    pub fn home_supply() -> f64 {
        1.0
    }
    pub fn home_demand() -> f64 {
        1.2
    }
    pub fn amplitude() -> f64 {
        0.3
    }
    pub fn period() -> u64 {
        48
    }
    pub fn noise() -> f64 {
        0.1
    }
    pub fn anchor_period() -> u64 {
        10
    }
    pub fn backups() -> u32 {
        1
    }
    pub fn verifiers() -> usize {
        3
    }
    pub fn producers() -> usize {
        3
    }
    pub fn ttl() -> u64 {
        50
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn eps_interval(&self) -> u64 {
        self.market.eps_interval.unwrap_or(self.od_window)
    }

    pub fn expiry_ticks(&self) -> u64 {
        self.market.expiry_ticks.unwrap_or_else(|| self.eps_interval())
    }

    pub fn region(&self, id: &str) -> Option<&RegionConfig> {
        self.regions.iter().find(|r| r.id == id)
    }

    pub fn price_params(&self, region: &RegionConfig) -> PriceParams {
        PriceParams {
            base_price: region.base_price,
            slope: region.slope,
            price_floor: region.price_floor,
            price_cap: region.price_cap,
            expiry_ticks: self.expiry_ticks(),
        }
    }

    pub fn child(&self, id: &str) -> Option<&ChildChainConfig> {
        self.child_chains.iter().find(|c| c.id == id)
    }

    pub fn total_evs(&self) -> u32 {
        self.fleets.iter().map(|f| f.count).sum()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return invalid(format!("unsupported version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.ticks == 0 || self.od_window == 0 {
            return invalid("ticks and od_window must be positive");
        }
        if self.eps_interval() == 0 || self.expiry_ticks() == 0 {
            return invalid("eps_interval and expiry_ticks must be positive");
        }
        if self.market.predictor_window == 0 {
            return invalid("predictor_window must be positive");
        }
        let m = &self.market;
        if !(m.mean_charge_kwh >= 0.0 && m.mean_discharge_kwh >= 0.0) {
            return invalid("mean charge/discharge must be non-negative");
        }
        if self.regions.is_empty() {
            return invalid("at least one region is required");
        }
        unique(self.regions.iter().map(|r| &r.id), "region")?;
        for r in &self.regions {
            self.price_params(r)
                .check()
                .map_err(|e| ConfigError::Invalid(format!("region {}: {e}", r.id)))?;
            if !(0.0..=1.0).contains(&r.feed_in_ratio) {
                return invalid(format!("region {}: feed_in_ratio must be within [0, 1]", r.id));
            }
        }
        unique(self.stations.iter().map(|s| &s.id), "station")?;
        for s in &self.stations {
            if s.id.is_empty() {
                return invalid("station ids must be non-empty");
            }
            if self.region(&s.region).is_none() {
                return invalid(format!("station {} references unknown region {}", s.id, s.region));
            }
            if !(s.x.is_finite() && s.y.is_finite()) {
                return invalid(format!("station {} has non-finite coordinates", s.id));
            }
        }
        unique(self.child_chains.iter().map(|c| &c.id), "child chain")?;
        for c in &self.child_chains {
            if c.anchor_period == 0 || c.backups == 0 {
                return invalid(format!("child chain {}: anchor_period and backups must be positive", c.id));
            }
            if c.id == "public" || c.id == "consortium" {
                return invalid(format!("child chain id {} is reserved", c.id));
            }
        }
        unique(self.fleets.iter().map(|f| &f.name), "fleet")?;
        for f in &self.fleets {
            self.validate_fleet(f)?;
        }
        for b in &self.bems {
            if self.region(&b.region).is_none() {
                return invalid(format!("bem group references unknown region {}", b.region));
            }
            let vals = [b.base_supply_kwh, b.base_demand_kwh, b.amplitude, b.noise];
            if !vals.iter().all(|v| v.is_finite() && *v >= 0.0) || b.amplitude > 1.0 || b.noise > 1.0 || b.period == 0 {
                return invalid(format!("bem group in {}: bad profile", b.region));
            }
            if let Some(id) = &b.child_chain {
                match self.child(id) {
                    Some(c) if c.kind != ChildKind::Fleet => {}
                    _ => return invalid(format!("bem group references {id}, which is not a vpp or microgrid chain")),
                }
            }
        }
        let v = &self.verifiers;
        if v.count < 2 {
            return invalid("at least two verifiers are required");
        }
        if v.quorum.is_some_and(|q| q == 0 || q > v.count) {
            return invalid("verifier quorum must be between 1 and the verifier count");
        }
        if v.anchor_period == 0 {
            return invalid("verifier anchor_period must be positive");
        }
        if self.public_chain.producers == 0 {
            return invalid("at least one public producer is required");
        }
        let claim_attacks = self.attacks.forged_cert
            + self.attacks.replay
            + self.attacks.mix_and_match
            + self.attacks.inverted_time
            + self.attacks.same_station;
        if claim_attacks > 0 && self.stations.len() < 2 {
            return invalid("claim attacks need at least two stations");
        }
        Ok(())
    }

    fn validate_fleet(&self, f: &FleetConfig) -> Result<(), ConfigError> {
        let bad = |what: &str| invalid(format!("fleet {}: {what}", f.name));
        if f.count > 0 && self.stations.len() < 2 {
            return bad("needs at least two stations");
        }
        if !(f.capacity_kwh > 0.0 && f.capacity_kwh.is_finite()) {
            return bad("capacity must be positive");
        }
        let [lo, hi] = f.initial_soc;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("initial_soc must be an ordered range within [0, 1]");
        }
        for (v, name) in [
            (f.consumption_kwh_per_km, "consumption"),
            (f.speed_km_per_tick, "speed"),
            (f.charge_rate_kwh_per_tick, "charge rate"),
            (f.discharge_rate_kwh_per_tick, "discharge rate"),
            (f.max_trip_km, "max_trip_km"),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if f.trip_gap[0] == 0 || f.trip_gap[0] > f.trip_gap[1] {
            return bad("trip_gap must be an ordered range of positive ticks");
        }
        let p = f.policy.params();
        if !(p.safety_margin > 0.0 && p.safety_margin <= 1.0) {
            return bad("safety_margin must be within (0, 1]");
        }
        if p.reserve_soc_kwh < 0.0 || p.target_soc_kwh < p.reserve_soc_kwh {
            return bad("need 0 <= reserve_soc_kwh <= target_soc_kwh");
        }
        if !(0.0..1.0).contains(&p.soh_loss_per_cycle) {
            return bad("soh_loss_per_cycle must be within [0, 1)");
        }
        let c = p.costs;
        if [c.transport_per_km, c.mileage_depreciation_per_km, c.cycle_depreciation_cost]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return bad("relocation costs must be non-negative");
        }
        if let Some(id) = &f.child_chain {
            match self.child(id) {
                Some(c) if c.kind == ChildKind::Fleet => {}
                _ => return bad(&format!("child_chain {id} is not a fleet chain")),
            }
        }
        Ok(())
    }
}

fn unique<'a>(ids: impl Iterator<Item = &'a String>, what: &str) -> Result<(), ConfigError> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return invalid(format!("duplicate {what} id {id}"));
        }
    }
    Ok(())
}
