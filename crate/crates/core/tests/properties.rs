use std::collections::{BTreeMap, BTreeSet};

use iome_core::codec::{Decode, Encode};
use iome_core::ev_agent::{
    best_relocation, kwh_to_wh, net_gain, reachable_stations, relocation_discharge_wh, step_battery, wh_to_kwh, Decision,
    EvParams, EvState, Position, StationInfo,
};
use iome_core::identity::{ca_issue, generate_keypair, verify, KeyPair, KeyRegistry, Signature};
use iome_core::ledger::{validate_chain, Chain};
use iome_core::market::{aggregate_txs, compute_price, issue_eps, PriceParams, Prediction, PriceSignal};
use iome_core::mobility::{predict_flows, OdMatrix, OdWindow};
use iome_core::txvocab::{
    build_tx, deserialize_tx, EpsBody, EsdpBody, TripRecordBody, TxBody, TxEnvelope, TxPolicy,
};
use proptest::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn keypair(seed: u8) -> KeyPair {
    KeyPair::from_seed([seed; 32])
}

fn body_strategy() -> impl Strategy<Value = TxBody> {
    let region = "[A-Z][0-9]{0,2}";
    prop_oneof![
        (region, 0.0..1e6f64, 0.0..1e6f64, 1u64..100, 0u64..1000, any::<Option<[u8; 32]>>()).prop_map(
            |(r, s, d, h, ts, p)| TxBody::Esdp(EsdpBody {
                region_id: r,
                predicted_supply: s,
                predicted_demand: d,
                horizon: h,
                timestamp: ts,
                p_t_id: p.map(iome_core::Hash),
            })
        ),
        (region, 0.0..10f64, 0u64..1000, 1u64..50, any::<[u8; 32]>()).prop_map(|(r, price, at, ttl, p)| {
            TxBody::Eps(EpsBody {
                p_t_id: iome_core::Hash(p),
                region_id: r,
                energy_price: price,
                issued_at: at,
                expiry: at + ttl,
            })
        }),
        ("S[0-9]", "T[0-9]", 0u64..1000, 1u64..100).prop_map(|(o, d, t, dt)| TxBody::TripRecord(TripRecordBody {
            origin_station_id: o,
            destination_station_id: d,
            t_start: t,
            t_end: t + dt,
        })),
        (0u64..1000, 1u64..100, proptest::collection::btree_map(("S[0-9]", "S[0-9]"), 0u64..50, 0..6)).prop_map(
            |(from, len, entries)| TxBody::OdMatrix(OdMatrix {
                window: OdWindow { from, to: from + len },
                entries,
            })
        ),
    ]
}

proptest! {
    #[test]
    fn tx_codec_round_trip(body in body_strategy(), seed in any::<u8>()) {
        let tx = build_tx(body, &keypair(seed)).unwrap();
        let bytes = tx.to_canonical_bytes();
        let back = deserialize_tx(&bytes).unwrap();
        prop_assert_eq!(&back, &tx);
        prop_assert_eq!(back.to_canonical_bytes(), bytes);
        prop_assert!(back.t_id_valid() && back.signature_valid());
    }

    #[test]
    fn truncated_tx_never_decodes(body in body_strategy(), cut in 1usize..64) {
        let bytes = build_tx(body, &keypair(3)).unwrap().to_canonical_bytes();
        let cut = cut.min(bytes.len());
        prop_assert!(deserialize_tx(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn forged_signatures_fail(msg in proptest::collection::vec(any::<u8>(), 0..64), flip in any::<usize>(), seed in any::<u8>()) {
        let kp = keypair(seed);
        let sig = kp.sign(&msg);
        prop_assert!(verify(&kp.pk(), &msg, &sig));
        let mut bad = sig.0;
        bad[flip % 64] ^= 1 << (flip % 8);
        prop_assert!(!verify(&kp.pk(), &msg, &Signature(bad)));
        let other = keypair(seed.wrapping_add(1));
        prop_assert!(!verify(&other.pk(), &msg, &sig));
        let mut msg2 = msg.clone();
        msg2.push(0);
        prop_assert!(!verify(&kp.pk(), &msg2, &sig));
    }

    #[test]
    fn trip_keys_fresh(seed in any::<u64>(), trips in 1usize..40) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut reg = KeyRegistry::new();
        let private = generate_keypair(&mut rng).pk();
        reg.add_private_key(private);
        let mut seen = BTreeSet::new();
        for _ in 0..trips {
            let k = reg.derive_trip_keys(&mut rng);
            prop_assert!(seen.insert(k.pk1.pk()));
            prop_assert!(seen.insert(k.pk2.pk()));
        }
        prop_assert!(!seen.contains(&private));
    }

    #[test]
    fn price_monotone_in_demand(s in 0.0..1e4f64, d1 in 0.0..1e4f64, d2 in 0.0..1e4f64, k in 0.0..5.0f64) {
        let p = PriceParams { base_price: 0.3, slope: k, price_floor: 0.05, price_cap: 3.0, expiry_ticks: 5 };
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let price = |d: f64| compute_price(&Prediction {
            region_id: "R".into(), horizon: 1, predicted_supply: s, predicted_demand: d, includes_mobility: false,
        }, &p, 0).energy_price;
        prop_assert!(price(lo) <= price(hi));
        prop_assert!(price(lo) >= p.price_floor && price(hi) <= p.price_cap);
    }

    #[test]
    fn price_antitone_in_supply(d in 0.0..1e4f64, s1 in 0.0..1e4f64, s2 in 0.0..1e4f64, k in 0.0..5.0f64) {
        let p = PriceParams { base_price: 0.3, slope: k, price_floor: 0.0, price_cap: 3.0, expiry_ticks: 5 };
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let price = |s: f64| compute_price(&Prediction {
            region_id: "R".into(), horizon: 1, predicted_supply: s, predicted_demand: d, includes_mobility: false,
        }, &p, 0).energy_price;
        prop_assert!(price(lo) >= price(hi));
    }

    #[test]
    fn aggregate_matches_filter(
        items in proptest::collection::vec((0usize..3, 0.0..100f64, 0.0..100f64, 0u64..30, 1u64..10), 0..20),
        tick in 0u64..40,
    ) {
        let kp = keypair(9);
        let regions = ["R1", "R2", "R3"];
        let txs: Vec<TxEnvelope> = items.iter().map(|(r, s, d, ts, h)| build_tx(TxBody::Esdp(EsdpBody {
            region_id: regions[*r].into(), predicted_supply: *s, predicted_demand: *d, horizon: *h, timestamp: *ts, p_t_id: None,
        }), &kp).unwrap()).collect();
        for (ri, region) in regions.iter().enumerate() {
            let mut s = 0.0;
            let mut d = 0.0;
            for (r, ps, pd, ts, h) in &items {
                if *r == ri && tick > *ts && tick <= ts + h {
                    s += ps;
                    d += pd;
                }
            }
            prop_assert_eq!(aggregate_txs(&txs, region, tick), (s, d));
        }
    }

    #[test]
    fn od_flows_conserve(entries in proptest::collection::btree_map((0usize..5, 0usize..5), 0u64..20, 0..10)) {
        let stations = ["A", "B", "C", "D", "E"];
        let regions: BTreeMap<String, String> = stations.iter().enumerate()
            .map(|(i, s)| (s.to_string(), format!("R{}", i % 3))).collect();
        let mut m = OdMatrix::empty(OdWindow { from: 0, to: 10 });
        for ((o, d), n) in &entries {
            m.entries.insert((stations[*o].into(), stations[*d].into()), *n);
        }
        let p = predict_flows(&m, &regions).unwrap();
        let a: u64 = p.arrivals.values().sum();
        let dsum: u64 = p.departures.values().sum();
        prop_assert_eq!(a, dsum);
        prop_assert_eq!(a, m.total());
    }

    #[test]
    fn block_log_is_append_only(counts in proptest::collection::vec(0usize..4, 1..6)) {
        let producers: Vec<KeyPair> = (0..3).map(keypair).collect();
        let mut chain = Chain::public("pub", producers.iter().map(KeyPair::pk).collect(), TxPolicy::default()).unwrap();
        let gm = keypair(50);
        let mut tick = 0;
        for n in counts {
            let before = chain.block_log_bytes();
            let mut txs: Vec<TxEnvelope> = Vec::new();
            for _ in 0..n {
                let signal = PriceSignal { region_id: "R1".into(), energy_price: 0.3, issued_at: tick, expiry: tick + 3 };
                let view = iome_core::txvocab::Overlay::new(&chain, &txs);
                let tx = issue_eps(&gm, &signal, &view, &TxPolicy::default()).unwrap();
                txs.push(tx);
            }
            let producer = &producers[(tick % 3) as usize];
            chain.append_block(txs, producer, tick).unwrap();
            prop_assert!(chain.block_log_bytes().starts_with(&before));
            prop_assert!(validate_chain(&chain));
            tick += 1;
        }
    }

    #[test]
    fn soc_stays_in_bounds(actions in proptest::collection::vec((0u8..4, 0u64..80_000, 0usize..3), 1..60)) {
        let ca = keypair(1);
        let stations: Vec<StationInfo> = (0..3).map(|i| StationInfo {
            station_id: format!("S{i}"),
            position: Position::new(i as f64 * 15.0, 0.0),
            region_id: "R1".into(),
            feed_in_tariff: 0.1,
            retail_price: 0.3,
            certificate: ca_issue(&ca, keypair(2).pk(), &format!("S{i}")),
        }).collect();
        let params = EvParams { soh_loss_per_cycle: 0.01, ..EvParams::default() };
        let mut ev = EvState {
            ev_id: 1, station_id: "S0".into(), position: stations[0].position, soc_wh: 30_000,
            capacity_nominal_wh: 60_000, soh: 1.0, schedule: vec![], odometer_km: 0.0, remaining_cycles: 100,
            cycle_throughput_wh: 0, consumption_kwh_per_km: 0.2, charge_rate_kwh_per_tick: 10.0, discharge_rate_kwh_per_tick: 10.0,
        };
        for (kind, wh, target) in actions {
            let d = match kind {
                0 => Decision::Idle,
                1 => Decision::Charge { station: ev.station_id.clone(), energy_wh: wh },
                2 => Decision::Discharge { station: ev.station_id.clone(), energy_wh: wh },
                _ => Decision::Relocate { from: ev.station_id.clone(), to: format!("S{target}"), discharge_wh: wh },
            };
            let prev = ev.clone();
            if let Ok(next) = step_battery(&ev, &d, &stations, &params) {
                ev = next;
            }
            prop_assert!(ev.soc_wh <= ev.usable_capacity_wh());
            prop_assert!(ev.soh <= prev.soh && ev.soh > 0.0);
            prop_assert!(ev.remaining_cycles <= prev.remaining_cycles);
        }
    }

    #[test]
    fn relocation_is_argmax(
        soc in 0.0..60.0f64,
        tariffs in proptest::collection::vec((0.0..0.6f64, -30.0..30.0f64, -30.0..30.0f64), 2..8),
    ) {
        let ca = keypair(1);
        let stations: Vec<StationInfo> = tariffs.iter().enumerate().map(|(i, (f, x, y))| StationInfo {
            station_id: format!("S{i}"),
            position: if i == 0 { Position::default() } else { Position::new(*x, *y) },
            region_id: "R1".into(),
            feed_in_tariff: *f,
            retail_price: f + 0.1,
            certificate: ca_issue(&ca, keypair(2).pk(), &format!("S{i}")),
        }).collect();
        let params = EvParams::default();
        let ev = EvState {
            ev_id: 1, station_id: "S0".into(), position: Position::default(), soc_wh: kwh_to_wh(soc),
            capacity_nominal_wh: 60_000, soh: 1.0, schedule: vec![], odometer_km: 0.0, remaining_cycles: 100,
            cycle_throughput_wh: 0, consumption_kwh_per_km: 0.2, charge_rate_kwh_per_tick: 10.0, discharge_rate_kwh_per_tick: 10.0,
        };
        let signals = [PriceSignal { region_id: "R1".into(), energy_price: 0.3, issued_at: 0, expiry: 5 }];
        let decision = iome_core::ev_agent::decide(&ev, &params, &signals, &stations, 0).unwrap();
        // brute-force oracle
        let mut best: Option<(String, f64)> = None;
        for s in reachable_stations(&ev, &stations, params.safety_margin) {
            if s.station_id == "S0" { continue; }
            let wh = relocation_discharge_wh(&ev, s, &params);
            if wh == 0 { continue; }
            let g = net_gain(&ev, &stations[0], s, wh_to_kwh(wh), &params).unwrap();
            let better = match &best {
                None => true,
                Some((id, bg)) => g > *bg || (g == *bg && s.station_id < *id),
            };
            if better { best = Some((s.station_id.clone(), g)); }
        }
        match (&decision, best.filter(|(_, g)| *g > 0.0)) {
            (Decision::Relocate { to, .. }, Some((id, _))) => prop_assert_eq!(to, &id),
            (Decision::Relocate { .. }, None) => prop_assert!(false, "relocated without positive gain"),
            (_, Some(_)) => prop_assert!(false, "missed a positive relocation"),
            _ => {}
        }
        prop_assert_eq!(
            best_relocation(&ev, &stations[0], &stations, &params).map(|(s, _, _)| s.station_id.clone()),
            match &decision { Decision::Relocate { to, .. } => Some(to.clone()), _ => None }
        );
    }
}

#[test]
fn od_matrix_decode_rejects_trailing() {
    let m = OdMatrix::empty(OdWindow { from: 0, to: 1 });
    let mut bytes = m.to_canonical_bytes();
    assert_eq!(OdMatrix::from_canonical_bytes(&bytes).unwrap(), m);
    bytes.push(0);
    assert!(OdMatrix::from_canonical_bytes(&bytes).is_err());
}
