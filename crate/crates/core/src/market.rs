//! Regional supply/demand aggregation, prediction and price signals.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::identity::KeyPair;
use crate::ledger::Chain;
use crate::mobility::MobilityPrediction;
use crate::txvocab::{
    build_tx, check_tx, next_prev_tx, ChainView, EpsBody, TxBody, TxEnvelope, TxError, TxPolicy, TxRejection,
};

/// Guards the imbalance ratio against division by zero supply (kWh).
pub const SUPPLY_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MarketError {
    #[error("invalid price parameters: {0}")]
    InvalidParams(&'static str),
    #[error("invalid region state: {0}")]
    InvalidRegion(&'static str),
    #[error(transparent)]
    Tx(#[from] TxError),
    #[error("rejected: {0:?}")]
    Rejected(TxRejection),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionState {
    pub region_id: String,
    pub supply: f64,
    pub demand: f64,
    pub feed_in_tariff: f64,
    pub retail_price: f64,
}

impl RegionState {
    pub fn check(&self) -> Result<(), MarketError> {
        if !(self.supply >= 0.0 && self.demand >= 0.0) {
            return Err(MarketError::InvalidRegion("supply and demand must be non-negative"));
        }
        if !(self.feed_in_tariff <= self.retail_price) {
            return Err(MarketError::InvalidRegion("feed-in tariff exceeds retail price"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub region_id: String,
    pub horizon: u64,
    pub predicted_supply: f64,
    pub predicted_demand: f64,
    /// Whether an O-D derived flow prediction was folded in.
    pub includes_mobility: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriceSignal {
    pub region_id: String,
    pub energy_price: f64,
    pub issued_at: u64,
    /// Last tick at which the price applies.
    pub expiry: u64,
}

impl PriceSignal {
    pub fn is_valid_at(&self, tick: u64) -> bool {
        self.issued_at <= tick && tick <= self.expiry
    }

    pub fn from_eps(eps: &EpsBody) -> Self {
        Self {
            region_id: eps.region_id.clone(),
            energy_price: eps.energy_price,
            issued_at: eps.issued_at,
            expiry: eps.expiry,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceParams {
    pub base_price: f64,
    /// Price sensitivity to relative imbalance, `k >= 0`.
    pub slope: f64,
    pub price_floor: f64,
    pub price_cap: f64,
    pub expiry_ticks: u64,
}

impl PriceParams {
    pub fn check(&self) -> Result<(), MarketError> {
        let finite = [self.base_price, self.slope, self.price_floor, self.price_cap]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(MarketError::InvalidParams("non-finite value"));
        }
        if self.base_price < 0.0 || self.slope < 0.0 || self.price_floor < 0.0 {
            return Err(MarketError::InvalidParams("negative base price, slope or floor"));
        }
        if self.price_floor > self.price_cap {
            return Err(MarketError::InvalidParams("floor above cap"));
        }
        if self.expiry_ticks == 0 {
            return Err(MarketError::InvalidParams("expiry_ticks must be at least 1"));
        }
        Ok(())
    }
}

/// Sums supply and demand over ESDP transactions for `region_id` whose
/// horizon covers `tick`.
pub fn aggregate_txs<'a, I>(txs: I, region_id: &str, tick: u64) -> (f64, f64)
where
    I: IntoIterator<Item = &'a TxEnvelope>,
{
    let mut supply = 0.0;
    let mut demand = 0.0;
    for tx in txs {
        if let TxBody::Esdp(e) = &tx.body {
            if e.region_id == region_id && e.covers(tick) {
                supply += e.predicted_supply;
                demand += e.predicted_demand;
            }
        }
    }
    (supply, demand)
}

pub fn aggregate(public_chain: &Chain, region_id: &str, tick: u64) -> (f64, f64) {
    aggregate_txs(public_chain.transactions().map(|(_, tx)| tx), region_id, tick)
}

/// A swappable energy predictor over a region's aggregate history.
pub trait EnergyPredictor {
    /// `history` holds `(supply, demand)` per tick, oldest first.
    fn predict(
        &self,
        region_id: &str,
        history: &[(f64, f64)],
        mobility: Option<&MobilityPrediction>,
        tick: u64,
    ) -> Prediction;
}

/// Mean of the last `window` aggregates, plus expected EV load from
/// predicted flows: each arriving EV adds `mean_charge_kwh` of demand and
/// `mean_discharge_kwh` of supply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MovingAverage {
    pub window: usize,
    pub horizon: u64,
    pub mean_charge_kwh: f64,
    pub mean_discharge_kwh: f64,
}

impl EnergyPredictor for MovingAverage {
    fn predict(
        &self,
        region_id: &str,
        history: &[(f64, f64)],
        mobility: Option<&MobilityPrediction>,
        _tick: u64,
    ) -> Prediction {
        let take = self.window.max(1).min(history.len());
        let recent = &history[history.len() - take..];
        let (mut supply, mut demand) = if take == 0 {
            (0.0, 0.0)
        } else {
            let (s, d) = recent
                .iter()
                .fold((0.0, 0.0), |(s, d), (ps, pd)| (s + ps, d + pd));
            (s / take as f64, d / take as f64)
        };
        if let Some(m) = mobility {
            let arrivals = m.arrivals_in(region_id) as f64;
            demand += arrivals * self.mean_charge_kwh;
            supply += arrivals * self.mean_discharge_kwh;
        }
        Prediction {
            region_id: region_id.into(),
            horizon: self.horizon,
            predicted_supply: supply,
            predicted_demand: demand,
            includes_mobility: mobility.is_some(),
        }
    }
}

/// `clamp(base * (1 + k * (demand - supply) / max(supply, eps)), floor, cap)`.
///
/// The ratio is evaluated as `demand/m - supply/m` so that rounding keeps it
/// monotone in both arguments.
pub fn compute_price(pred: &Prediction, params: &PriceParams, tick: u64) -> PriceSignal {
    let m = pred.predicted_supply.max(SUPPLY_EPSILON);
    let imbalance = pred.predicted_demand / m - pred.predicted_supply / m;
    let raw = params.base_price * (1.0 + params.slope * imbalance);
    let price = if raw.is_nan() {
        params.price_floor
    } else {
        raw.clamp(params.price_floor, params.price_cap)
    };
    PriceSignal {
        region_id: pred.region_id.clone(),
        energy_price: price,
        issued_at: tick,
        expiry: tick + params.expiry_ticks,
    }
}

/// Builds the grid manager's EPS, chained to its latest transaction in
/// `view`, and checks it.
pub fn issue_eps(
    grid_manager: &KeyPair,
    signal: &PriceSignal,
    view: &(impl ChainView + ?Sized),
    policy: &TxPolicy,
) -> Result<TxEnvelope, MarketError> {
    let body = EpsBody {
        p_t_id: next_prev_tx(view, &grid_manager.pk()),
        region_id: signal.region_id.clone(),
        energy_price: signal.energy_price,
        issued_at: signal.issued_at,
        expiry: signal.expiry,
    };
    let tx = build_tx(TxBody::Eps(body), grid_manager)?;
    check_tx(view, &tx, policy).map_err(MarketError::Rejected)?;
    Ok(tx)
}

/// Latest EPS per region in chain order, as price signals.
pub fn latest_signals<'a, I>(txs: I) -> Vec<PriceSignal>
where
    I: IntoIterator<Item = &'a TxEnvelope>,
{
    let mut out: alloc::collections::BTreeMap<String, PriceSignal> = Default::default();
    for tx in txs {
        if let TxBody::Eps(e) = &tx.body {
            out.insert(e.region_id.clone(), PriceSignal::from_eps(e));
        }
    }
    out.into_values().collect()
}
