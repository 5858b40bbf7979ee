use std::collections::BTreeMap;
use std::sync::Arc;

use colosla_core::rulesdb::{example_rules, RuleSet, ViolationLevel};
use colosla_core::stream::{
    to_compliance, to_finance, to_ops, verify_chain, verify_lines, AuditChain, AuditRecord, ChainStatus, Contract,
    Playbook, PredictionEvent, RiskLevel, RiskThresholds, RulePersistencePredictor, StreamConfig, StreamEngine,
    GENESIS,
};
use colosla_core::telemetry::{simulate, Episode, SimConfig, TelemetryPoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORDER: [&str; 3] = ["CUST_A_PWR_01", "CUST_A_TEMP_01", "CUST_A_HUM_01"];

fn engine(rules: &RuleSet) -> StreamEngine {
    let order: Vec<String> = ORDER.iter().map(|s| s.to_string()).collect();
    let cfg = StreamConfig::default();
    let stub = RulePersistencePredictor::new(rules, &order, cfg.lookback, cfg.cadence_s).unwrap();
    StreamEngine::new("Customer_A", Arc::new(stub), rules, cfg).unwrap()
}

fn run(points: &[TelemetryPoint]) -> (Vec<PredictionEvent>, Vec<AuditRecord>) {
    let mut e = engine(&example_rules());
    let mut out = e.step(points).unwrap();
    let tail = e.flush().unwrap();
    out.events.extend(tail.events);
    out.audit.extend(tail.audit);
    (out.events, out.audit)
}

/// One rack, 10 hours, an L1 power episode from 2h to 8h.
fn l1_power() -> (SimConfig, Vec<TelemetryPoint>) {
    let cfg = SimConfig {
        duration_s: 10 * 3600,
        episodes: vec![Episode {
            channel: colosla_core::rulesdb::Metric::PowerKw,
            rack: 0,
            start_s: 2 * 3600,
            length_s: 6 * 3600,
            band: ViolationLevel::L1,
            side: Default::default(),
        }],
        ..SimConfig::default()
    };
    let pts = simulate(&cfg, &example_rules()).unwrap();
    (cfg, pts)
}

#[test]
fn stub_sees_injected_l1_power_episode() {
    let (cfg, pts) = l1_power();
    let (events, _) = run(&pts);
    let start = cfg.start_ts;
    // lookback window fully inside the plateau, ramps excluded
    let plateau = (start + 2 * 3600 + cfg.ramp_s)..=(start + 8 * 3600 - cfg.ramp_s);
    let inside: Vec<&PredictionEvent> = events
        .iter()
        .filter(|e| e.rule_id == "CUST_A_PWR_01" && plateau.contains(&e.window_start) && plateau.contains(&e.window_end))
        .collect();
    assert!(!inside.is_empty());
    for e in &inside {
        assert_eq!(e.level, ViolationLevel::L1, "{}", e.event_id);
        assert_eq!(e.probs, [0.0, 1.0, 0.0]);
    }
    let contracts = BTreeMap::from([(
        "Customer_A".to_string(),
        Contract { customer: "Customer_A".into(), mrc_usd: 100_000.0, billing_period: "2025-01".into() },
    )]);
    let f = to_finance(inside[0], &contracts, &example_rules()).unwrap();
    assert_eq!(f.credit_pct, 5.0);
    assert_eq!(f.expected_credit_usd, 5_000.0);
    let ops = to_ops(inside[0], &Playbook::defaults_for(&example_rules()), &RiskThresholds::default());
    assert_eq!(ops.risk_level, RiskLevel::High);
    assert!(ops.recommended_actions.contains(&"Check Rack R1 PDUs".to_string()));
    assert_eq!(ops.lead_time_s, 90 * 30);

    // before the episode everything is compliant
    let early = events.iter().filter(|e| e.window_end <= start + 2 * 3600);
    for e in early {
        assert_eq!(e.level, ViolationLevel::None, "{}", e.event_id);
        let f = to_finance(e, &contracts, &example_rules()).unwrap();
        assert_eq!(f.expected_credit_usd, 0.0);
        assert_eq!(to_ops(e, &Playbook::default(), &RiskThresholds::default()).recommended_actions, Vec::<String>::new());
    }
}

#[test]
fn every_event_is_well_formed() {
    let (_, pts) = l1_power();
    let (events, audit) = run(&pts);
    assert_eq!(events.len(), audit.len());
    for e in &events {
        let sum: f64 = e.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        let max = e.probs.iter().cloned().fold(f64::MIN, f64::max);
        let top = (0..3).rev().find(|&i| e.probs[i] == max).unwrap();
        assert_eq!(e.level.index(), top);
        assert_eq!(e.window_end - e.window_start, 60 * 30);
        assert_eq!(e.rules_version, 1);
    }
    // one event per rule per evaluated window, every stride rows
    let ends: Vec<i64> = events.iter().filter(|e| e.rule_id == ORDER[0]).map(|e| e.window_end).collect();
    assert!(ends.windows(2).all(|w| w[1] - w[0] == 10 * 30));
    assert_eq!(events.len(), 3 * ends.len());
}

#[test]
fn short_buffer_emits_nothing() {
    let (_, pts) = l1_power();
    let cutoff = pts[0].timestamp + 59 * 30;
    let short: Vec<TelemetryPoint> = pts.into_iter().filter(|p| p.timestamp < cutoff).collect();
    let (events, _) = run(&short);
    assert!(events.is_empty());
}

#[test]
fn duplicates_and_late_points_are_rejected() {
    let (_, pts) = l1_power();
    let (clean, clean_audit) = run(&pts);
    let mut noisy = Vec::with_capacity(pts.len() * 2);
    let mut dups = 0;
    for (i, p) in pts.iter().enumerate() {
        noisy.push(p.clone());
        if i % 7 == 0 {
            let mut d = p.clone();
            d.value += 100.0;
            noisy.push(d);
            dups += 1;
        }
    }
    let mut e = engine(&example_rules());
    let mut out = e.step(&noisy).unwrap();
    let tail = e.flush().unwrap();
    out.events.extend(tail.events);
    out.audit.extend(tail.audit);
    assert_eq!(e.stats().rejected_duplicate, dups);
    assert_eq!(out.events, clean);
    assert_eq!(out.audit, clean_audit);

    // a late point for an already closed bin
    let mut e = engine(&example_rules());
    e.step(&pts[..pts.len() / 2]).unwrap();
    let before = e.stats();
    let mut late = pts[10].clone();
    late.sensor_id = "late-sensor".into();
    assert!(e.step(&[late]).unwrap().events.is_empty());
    assert_eq!(e.stats().rejected_out_of_order, before.rejected_out_of_order + 1);
}

#[test]
fn gap_skips_windows() {
    let (_, pts) = l1_power();
    let t0 = pts[0].timestamp;
    let holed: Vec<TelemetryPoint> =
        pts.into_iter().filter(|p| !(t0 + 3 * 3600..t0 + 3 * 3600 + 600).contains(&p.timestamp)).collect();
    let mut e = engine(&example_rules());
    let out = e.step(&holed).unwrap();
    assert!(e.stats().windows_skipped_gap > 0);
    for ev in &out.events {
        assert!(ev.window_end <= t0 + 3 * 3600 || ev.window_start >= t0 + 3 * 3600 + 600, "{}", ev.event_id);
    }
}

#[test]
fn replay_is_idempotent_and_chain_resumes() {
    let (_, pts) = l1_power();
    let (a, audit_a) = run(&pts);
    let (b, audit_b) = run(&pts);
    assert_eq!(a, b);
    assert_eq!(audit_a, audit_b);
    assert_eq!(audit_a[0].prev_digest, GENESIS);
    assert!(verify_chain(&audit_a).is_ok());

    // split the stream across two engines sharing the chain head
    let mid = pts.len() / 2;
    let mut first = engine(&example_rules());
    let part1 = first.step(&pts[..mid]).unwrap();
    let mut second = engine(&example_rules()).with_chain(first.chain().clone());
    // the second engine starts with an empty buffer, so compare only the chain
    let part2 = second.step(&pts[mid..]).unwrap();
    let mut joined = part1.audit.clone();
    joined.extend(part2.audit);
    assert!(verify_chain(&joined).is_ok());
}

#[test]
fn same_event_twice_differs_only_in_chain() {
    let (_, pts) = l1_power();
    let (events, _) = run(&pts);
    let lookback = vec![vec![25.0, 22.0, 50.0]; 60];
    let mut chain = AuditChain::default();
    let r1 = to_compliance(&events[0], &lookback, &mut chain);
    let r2 = to_compliance(&events[0], &lookback, &mut chain);
    assert_eq!(r1.prev_digest, GENESIS);
    assert_eq!(r1.telemetry_digest, r2.telemetry_digest);
    assert_ne!(r1.chain_digest, r2.chain_digest);
    assert_eq!(r2.prev_digest, r1.chain_digest);
}

#[test]
fn finance_and_ops_tables() {
    let (_, pts) = l1_power();
    let (events, _) = run(&pts);
    let contracts = BTreeMap::from([(
        "Customer_A".to_string(),
        Contract { customer: "Customer_A".into(), mrc_usd: 100_000.0, billing_period: "2025-01".into() },
    )]);
    let mut hum = events.iter().find(|e| e.rule_id == "CUST_A_HUM_01").unwrap().clone();
    hum.level = ViolationLevel::L2;
    hum.probs = [0.2, 0.3, 0.5];
    let f = to_finance(&hum, &contracts, &example_rules()).unwrap();
    assert_eq!(f.credit_pct, 8.0);
    assert!((f.expected_credit_usd - 4_000.0).abs() < 1e-9);
    let ops = to_ops(&hum, &Playbook::defaults_for(&example_rules()), &RiskThresholds::default());
    assert_eq!(ops.risk_level, RiskLevel::Critical);

    let mut p = events.iter().find(|e| e.rule_id == "CUST_A_PWR_01").unwrap().clone();
    p.level = ViolationLevel::L1;
    p.probs = [0.05, 0.9, 0.05];
    let ops = to_ops(&p, &Playbook::defaults_for(&example_rules()), &RiskThresholds::default());
    assert_eq!(ops.risk_level, RiskLevel::High);
    p.probs = [0.35, 0.6, 0.05];
    assert_eq!(to_ops(&p, &Playbook::default(), &RiskThresholds::default()).risk_level, RiskLevel::Elevated);
    let fallback = to_ops(&p, &Playbook::default(), &RiskThresholds::default());
    assert!(fallback.playbook_fallback);
    assert_eq!(fallback.recommended_actions.len(), 1);

    let mut unknown = p.clone();
    unknown.customer = "Customer_Z".into();
    assert!(to_finance(&unknown, &contracts, &example_rules()).is_err());
    let mut stale = p;
    stale.rules_version = 9;
    assert!(to_finance(&stale, &contracts, &example_rules()).is_err());
}

/// Three racks, ten hours: a bit over 1,000 audit records.
pub fn thousand_records() -> Vec<AuditRecord> {
    let cfg = SimConfig { racks: 3, duration_s: 10 * 3600, ..SimConfig::scheduled(7, 3, 10 * 3600, 4 * 3600) };
    let pts = simulate(&cfg, &example_rules()).unwrap();
    let (_, audit) = run(&pts);
    audit
}

#[test]
fn tampering_is_located() {
    let records = thousand_records();
    assert!(records.len() >= 1000, "{}", records.len());
    let records = &records[..1000];
    assert_eq!(verify_chain(records), ChainStatus::Ok { records: 1000 });
    let lines: Vec<String> = records.iter().map(AuditRecord::to_line).collect();
    let file = lines.join("\n") + "\n";
    assert!(verify_lines(file.as_bytes()).is_ok());

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let starts: Vec<usize> = lines.iter().scan(0, |at, l| {
        let s = *at;
        *at += l.len() + 1;
        Some(s)
    }).collect();
    for _ in 0..150 {
        let k = rng.gen_range(0..1000);
        let mut bytes = file.clone().into_bytes();
        let pos = starts[k] + rng.gen_range(0..=lines[k].len());
        bytes[pos] ^= 1 << rng.gen_range(0..8);
        match verify_lines(&bytes) {
            ChainStatus::Broken { index, .. } => assert_eq!(index, k, "flip at byte {pos}"),
            ok => panic!("flip at byte {pos} of record {k} not detected: {ok:?}"),
        }
    }
    for _ in 0..50 {
        let i = rng.gen_range(0..999);
        let j = rng.gen_range(i + 1..1000);
        let mut swapped = records.to_vec();
        swapped.swap(i, j);
        assert_eq!(verify_chain(&swapped), ChainStatus::Broken { index: i, reason: "prev_digest does not match the preceding record".into() });
    }
}

#[test]
fn struct_level_mutation_at_500() {
    let mut records = thousand_records();
    records.truncate(1000);
    records[500].event.forecast = f64::from_bits(records[500].event.forecast.to_bits() ^ 1);
    assert!(matches!(verify_chain(&records), ChainStatus::Broken { index: 500, .. }));
}
