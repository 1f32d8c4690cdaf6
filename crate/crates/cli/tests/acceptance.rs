//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the binary exits non-zero if any of them fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use uwb_core::clock::{ClockKfParams, ClockModel};
use uwb_core::layout::PlacedNode;
use uwb_core::solver::{
    cost, grid_search, residuals_and_jacobian, solve_tdoa, solve_twr, Measurements, Method, SolveRequest,
};
use uwb_core::tdoa::{epochs_from_trace, SyncMode, TdoaMeasurement, TdoaProcessor};
use uwb_core::twr::{calibrate, message_budget, tdoa_update_rate, RangeMeasurement, DEFAULT_REPLY_FLOOR_S};
use uwb_core::{
    distance, Bounds, ExperimentConfig, NodeId, Position, Protocol, SystemLayout, SPEED_OF_LIGHT,
};
use uwb_harness::drift::run_driftplot;
use uwb_harness::pipeline::{localize, twr_ranges, PositionRow};
use uwb_harness::{run_experiment, simulate};

/// Timestamp noise for the sync-interval comparison, tuned once so that raw
/// TDoA at 100 ms puts 90 to 93 % of fixes within 20 cm.
const TREND_NOISE_SIGMA_S: f64 = 0.185e-9;
/// Skew wander of the anchor oscillators in that comparison.
const TREND_SKEW_WALK: f64 = 1e-9;
/// Filter process densities matched to that wander.
const TREND_PROCESS_T: f64 = 1e-16;
const TREND_PROCESS_M: f64 = 1e-16;
const TREND_EPOCHS: u64 = 3000;
const TREND_SEED: u64 = 1;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn within_budget(started: Instant, budget: Duration, mut o: Outcome) -> Outcome {
    let took = started.elapsed();
    o.detail = format!("{} [{:.2} s of {} s]", o.detail, took.as_secs_f64(), budget.as_secs());
    o.pass &= took < budget;
    o
}

fn noiseless_config(protocol: Protocol, epochs: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(SystemLayout::reference_room(), protocol, epochs);
    c.tick_period_s = 1e-15;
    c
}

fn noiseless_exactness() -> Outcome {
    let started = Instant::now();
    let mut notes = Vec::new();
    let mut pass = true;
    for protocol in [Protocol::TwrSds, Protocol::TdoaRaw] {
        // One extra epoch so TDoA still has 1000 fixes after its first SYNC.
        let exp = match run_experiment(&noiseless_config(protocol, 1001)) {
            Ok(e) => e,
            Err(e) => return Outcome::new(false, format!("{}: {e}", protocol.name())),
        };
        let r = &exp.report;
        pass &= r.fixes >= 1000 && r.max_error_m < 1e-4;
        notes.push(format!("{} {} fixes, max {:.2e} m", protocol.name(), r.fixes, r.max_error_m));
    }
    within_budget(started, Duration::from_secs(10), Outcome::new(pass, notes.join("; ")))
}

fn two_anchor_config(skew: f64) -> ExperimentConfig {
    let mut layout = SystemLayout::reference_room();
    layout.anchors = vec![PlacedNode::new(1, 0.0, 0.0), PlacedNode::new(2, 0.0, 4.3)];
    let mut c = ExperimentConfig::new(layout, Protocol::TwrSds, 1);
    c.clocks.set(NodeId(1), ClockModel::with_skew(skew));
    c
}

fn drift_reproduction() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for (planted, f_sync) in [(26.0, 1.0), (13.6, 20.0)] {
        match run_driftplot(&two_anchor_config(1.0 + planted * 1e-9), f_sync, 60.0) {
            Ok(r) => {
                pass &= (r.slope_ns_per_s - planted).abs() <= 0.5;
                notes.push(format!("{planted} ns/s at {f_sync} Hz -> {:.3}", r.slope_ns_per_s));
                if planted == 26.0 {
                    let per_second = r.range_error_per_second_m();
                    let nominal = SPEED_OF_LIGHT * 26e-9;
                    pass &= (per_second - 8.0).abs() <= 0.5 && (nominal - 7.79).abs() < 0.005;
                    notes.push(format!("c*26 ns = {nominal:.2} m, measured {per_second:.2} m/s"));
                }
            }
            Err(e) => return Outcome::new(false, e.to_string()),
        }
    }
    Outcome::new(pass, notes.join("; "))
}

fn trend_config(protocol: Protocol, sync_interval_s: f64) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(SystemLayout::reference_room(), protocol, TREND_EPOCHS);
    c.sync_interval_s = sync_interval_s;
    c.range_interval_s = Some(0.1);
    c.seed = TREND_SEED;
    c.channel.timestamp_noise_sigma_s = TREND_NOISE_SIGMA_S;
    c.kalman.process_t_s2_per_s = TREND_PROCESS_T;
    c.kalman.process_m_per_s = TREND_PROCESS_M;
    for (id, offset, ppm) in [(1, 0.31, 7.2), (2, 0.74, -12.5), (3, 0.12, 4.1)] {
        c.clocks.set(
            NodeId(id),
            ClockModel {
                start_offset: offset,
                skew: 1.0 + ppm * 1e-6,
                random_walk_sigma: TREND_SKEW_WALK,
            },
        );
    }
    c
}

fn interval_trend() -> Outcome {
    let started = Instant::now();
    let intervals = [0.1, 0.3, 0.5];
    let mut pct = BTreeMap::new();
    for protocol in [Protocol::TdoaRaw, Protocol::TdoaKalman] {
        for (i, &t) in intervals.iter().enumerate() {
            match run_experiment(&trend_config(protocol, t)) {
                Ok(e) => {
                    pct.insert((protocol == Protocol::TdoaKalman, i), e.report.pct_at(0.2).unwrap_or(f64::NAN));
                }
                Err(e) => return Outcome::new(false, e.to_string()),
            }
        }
    }
    let raw = |i| pct[&(false, i)];
    let kf = |i| pct[&(true, i)];
    let pass = (90.0..=93.0).contains(&raw(0))
        && raw(0) > raw(1)
        && raw(1) > raw(2)
        && kf(1) >= raw(1) + 3.0
        && (kf(0) - raw(0)).abs() < 2.0;
    let detail = format!(
        "within 20 cm, raw {:.1}/{:.1}/{:.1} %, filtered {:.1}/{:.1}/{:.1} % at 100/300/500 ms",
        raw(0),
        raw(1),
        raw(2),
        kf(0),
        kf(1),
        kf(2)
    );
    within_budget(started, Duration::from_secs(60), Outcome::new(pass, detail))
}

fn message_budget_arithmetic() -> Outcome {
    let b = match message_budget(2, true, DEFAULT_REPLY_FLOOR_S) {
        Ok(b) => b,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let tdoa = tdoa_update_rate(3, DEFAULT_REPLY_FLOOR_S);
    let twr_ok = b.n_anchors == 3 && b.messages_per_localization == 12;
    let twr_rate_ok = (b.max_update_rate_hz - 12.0).abs() <= 0.2 * 12.0;
    let tdoa_ok = tdoa == 1.0 / (3.0 * 500e-6) && (tdoa - 600.0).abs() <= 0.2 * 600.0;
    Outcome::new(
        twr_ok && twr_rate_ok && tdoa_ok,
        format!(
            "TWR {} anchors, {} messages, {:.1} Hz (target 12 Hz +-20%); TDoA {:.1} Hz",
            b.n_anchors, b.messages_per_localization, b.max_update_rate_hz, tdoa
        ),
    )
}

fn calibration() -> Outcome {
    let (slope, offset) = (0.96, 0.847);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let truth: Vec<f64> = (0..100).map(|_| rng.gen_range(0.5..10.0)).collect();
    let clean: Vec<(f64, f64)> = truth.iter().map(|&t| (t, slope * t + offset)).collect();
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let noisy: Vec<(f64, f64)> = clean.iter().map(|&(t, m)| (t, m + noise.sample(&mut rng))).collect();
    match (calibrate(&clean), calibrate(&noisy)) {
        (Ok(a), Ok(b)) => {
            let exact = (a.slope - slope).abs() < 1e-12 && (a.offset - offset).abs() < 1e-12;
            let close = (b.slope - slope).abs() <= 0.01 && (b.offset - offset).abs() <= 0.05;
            Outcome::new(
                exact && close,
                format!(
                    "noiseless {:.6}/{:.6} m, 5 cm noise {:.4}/{:.4} m",
                    a.slope, a.offset, b.slope, b.offset
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, e.to_string()),
    }
}

fn range_errors(protocol: Protocol) -> Result<Vec<f64>, String> {
    let mut c = noiseless_config(protocol, 3);
    c.reply_delay_s = 500e-6;
    c.clocks.set(c.layout.tag_id, ClockModel::from_ppm(0.0, 20.0));
    c.validate().map_err(|e| e.to_string())?;
    let trace = simulate(&c).map_err(|e| e.to_string())?;
    let tag = c.layout.tag_start;
    let mut errs = Vec::new();
    for epoch in twr_ranges(&c, &trace) {
        for r in epoch.ranges {
            let anchor = c.layout.anchor_position(r.anchor).expect("known anchor");
            errs.push((r.range - distance(anchor, tag)).abs());
        }
    }
    if errs.is_empty() {
        return Err("no ranges".into());
    }
    Ok(errs)
}

fn sds_versus_single() -> Outcome {
    match (range_errors(Protocol::TwrSingle), range_errors(Protocol::TwrSds)) {
        (Ok(single), Ok(sds)) => {
            let single_min = single.iter().cloned().fold(f64::INFINITY, f64::min);
            let sds_max = sds.iter().cloned().fold(0.0, f64::max);
            Outcome::new(
                single_min >= 1.0 && sds_max < 1e-3,
                format!("single-sided min error {single_min:.3} m, SDS max error {sds_max:.2e} m"),
            )
        }
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, e),
    }
}

fn random_layout(rng: &mut ChaCha8Rng) -> (SystemLayout, Position) {
    loop {
        let n = rng.gen_range(3..=5);
        let anchors: Vec<PlacedNode> = (0..n)
            .map(|i| PlacedNode::new(i + 1, rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0)))
            .collect();
        let spread_ok = anchors.windows(3).all(|w| {
            let (a, b, c) = (w[0].position, w[1].position, w[2].position);
            ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)).abs() > 2.0
        });
        let tag = Position::new(rng.gen_range(1.0..5.0), rng.gen_range(1.0..5.0));
        let clear = anchors.iter().all(|a| distance(a.position, tag) > 1.5);
        if !spread_ok || !clear {
            continue;
        }
        let lo = Position::new(tag.x - rng.gen_range(0.2..0.8), tag.y - rng.gen_range(0.2..0.8));
        let mut layout = SystemLayout::reference_room();
        layout.anchors = anchors;
        layout.bounds = Bounds::new(lo, Position::new(lo.x + 1.0, lo.y + 1.0));
        return (layout, tag);
    }
}

fn jacobian_gap(req: &SolveRequest, p: Position) -> Result<f64, String> {
    let (_, j) = residuals_and_jacobian(req, p).map_err(|e| e.to_string())?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for axis in 0..2 {
        let shift = |s: f64| {
            if axis == 0 {
                Position::new(p.x + s, p.y)
            } else {
                Position::new(p.x, p.y + s)
            }
        };
        let (rp, _) = residuals_and_jacobian(req, shift(h)).map_err(|e| e.to_string())?;
        let (rm, _) = residuals_and_jacobian(req, shift(-h)).map_err(|e| e.to_string())?;
        for i in 0..rp.len() {
            let fd = (rp[i] - rm[i]) / (2.0 * h);
            worst = worst.max((fd - j[(i, axis)]).abs());
        }
    }
    Ok(worst)
}

fn solver_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let range_noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let time_noise = Normal::new(0.0, 0.2e-9).expect("valid sigma");
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_jac: f64 = 0.0;
    for _ in 0..50 {
        let (layout, tag) = random_layout(&mut rng);
        let ranges: Vec<RangeMeasurement> = layout
            .anchors
            .iter()
            .map(|a| RangeMeasurement::new(a.id, distance(a.position, tag) + range_noise.sample(&mut rng), 0))
            .collect();
        let arrival: BTreeMap<NodeId, f64> = layout
            .anchors
            .iter()
            .map(|a| (a.id, distance(a.position, tag) / SPEED_OF_LIGHT + time_noise.sample(&mut rng)))
            .collect();
        let tdoa = uwb_core::tdoa::pairwise_tdoa(&arrival, 0);
        let requests = [
            SolveRequest::new(&layout, Measurements::Ranges(ranges)),
            SolveRequest::new(&layout, Measurements::Tdoa(tdoa)),
        ];
        for (i, req) in requests.iter().enumerate() {
            let solved = if i == 0 {
                solve_twr(req, Method::LeastSquares)
            } else {
                solve_tdoa(req)
            };
            let found = match solved.and_then(|r| cost(req, r.position)) {
                Ok(c) => c,
                Err(e) => return Outcome::new(false, format!("solver: {e}")),
            };
            let oracle = match grid_search(req, 1e-3) {
                Ok((_, c)) => c,
                Err(e) => return Outcome::new(false, format!("grid: {e}")),
            };
            worst_gap = worst_gap.max(found - oracle);
            let probe = Position::new(
                rng.gen_range(req.bounds.min_x_m..req.bounds.max_x_m),
                rng.gen_range(req.bounds.min_y_m..req.bounds.max_y_m),
            );
            match jacobian_gap(req, probe) {
                Ok(g) => worst_jac = worst_jac.max(g),
                Err(e) => return Outcome::new(false, e),
            }
        }
    }
    let pass = worst_gap <= 1e-9 && worst_jac <= 1e-5;
    within_budget(
        started,
        Duration::from_secs(120),
        Outcome::new(
            pass,
            format!("worst cost minus oracle {worst_gap:.3e}, worst Jacobian gap {worst_jac:.2e}"),
        ),
    )
}

fn random_clocks(c: &mut ExperimentConfig, rng: &mut ChaCha8Rng, walk: f64) {
    for id in c.layout.anchor_ids() {
        c.clocks.set(
            id,
            ClockModel {
                start_offset: rng.gen_range(0.0..1.0),
                skew: 1.0 + rng.gen_range(-20e-6..20e-6),
                random_walk_sigma: walk,
            },
        );
    }
}

fn cycle_and_antisymmetry(measurements: &[TdoaMeasurement]) -> Result<usize, String> {
    let mut by_epoch: BTreeMap<u64, BTreeMap<(NodeId, NodeId), f64>> = BTreeMap::new();
    for m in measurements {
        let back = m.reversed();
        if back.dt != -m.dt || back.reversed() != *m {
            return Err(format!("antisymmetry broken at epoch {}", m.epoch));
        }
        let e = by_epoch.entry(m.epoch).or_default();
        e.insert((m.anchor_k, m.anchor_l), m.dt);
        e.insert((m.anchor_l, m.anchor_k), back.dt);
    }
    let mut cycles = 0;
    for (epoch, dts) in &by_epoch {
        let ids: Vec<NodeId> = dts.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        for a in 0..ids.len() {
            for b in a + 1..ids.len() {
                for c in b + 1..ids.len() {
                    let (i, j, k) = (ids[a], ids[b], ids[c]);
                    let sum = dts[&(i, j)] + dts[&(j, k)] + dts[&(k, i)];
                    if sum != 0.0 {
                        return Err(format!("cycle {i}-{j}-{k} at epoch {epoch} sums to {sum:e}"));
                    }
                    cycles += 1;
                }
            }
        }
    }
    Ok(cycles)
}

fn fixes(rows: &[PositionRow]) -> BTreeMap<u64, Position> {
    rows.iter()
        .filter_map(|r| Some((r.epoch, Position::new(r.x?, r.y?))))
        .collect()
}

fn invariant_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut notes = Vec::new();

    // Cycle consistency and antisymmetry across randomized noisy runs.
    let mut cycles = 0;
    for i in 0..6 {
        let protocol = if i % 2 == 0 { Protocol::TdoaRaw } else { Protocol::TdoaKalman };
        let mut c = ExperimentConfig::new(SystemLayout::reference_room(), protocol, 200);
        c.layout.anchors.push(PlacedNode::new(4, rng.gen_range(3.0..6.0), rng.gen_range(0.0..2.0)));
        c.sync_interval_s = [0.1, 0.3, 0.5][i % 3];
        c.range_interval_s = Some(0.1);
        c.seed = rng.gen();
        c.channel.timestamp_noise_sigma_s = rng.gen_range(0.0..0.3e-9);
        random_clocks(&mut c, &mut rng, 1e-9);
        let loc = match simulate(&c).and_then(|t| localize(&c, &t)) {
            Ok(l) => l,
            Err(e) => return Outcome::new(false, e.to_string()),
        };
        match cycle_and_antisymmetry(&loc.tdoa) {
            Ok(n) => cycles += n,
            Err(e) => return Outcome::new(false, e),
        }
    }
    notes.push(format!("{cycles} anchor triangles close exactly"));

    // Moving the sync node must not move the fixes.
    let mut worst_shift: f64 = 0.0;
    for _ in 0..4 {
        let mut base = noiseless_config(Protocol::TdoaRaw, 100);
        base.seed = rng.gen();
        random_clocks(&mut base, &mut rng, 0.0);
        let mut moved = base.clone();
        moved.layout.sync.position = Position::new(rng.gen_range(1.0..5.0), rng.gen_range(1.0..6.0));
        let run = |c: &ExperimentConfig| simulate(c).and_then(|t| localize(c, &t)).map(|l| fixes(&l.rows));
        let (a, b) = match (run(&base), run(&moved)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return Outcome::new(false, e.to_string()),
        };
        if a.len() < 99 || a.keys().ne(b.keys()) {
            return Outcome::new(false, "relocated sync node changed which epochs solve");
        }
        for (epoch, p) in &a {
            worst_shift = worst_shift.max(distance(*p, b[epoch]));
        }
    }
    notes.push(format!("sync relocation moves fixes by at most {worst_shift:.2e} m"));
    let relocation_ok = worst_shift < 1e-4;

    // Filter covariance stays symmetric PSD over 10^4 SYNC updates.
    let mut c = ExperimentConfig::new(SystemLayout::reference_room(), Protocol::TdoaKalman, 10_000);
    c.sync_interval_s = 0.01;
    c.seed = rng.gen();
    c.channel.timestamp_noise_sigma_s = 0.2e-9;
    random_clocks(&mut c, &mut rng, 1e-9);
    let trace = match simulate(&c) {
        Ok(t) => t,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let mut proc = TdoaProcessor::new(&c.layout, SyncMode::Kalman, ClockKfParams::default());
    let mut min_eig = f64::INFINITY;
    let mut checked = 0usize;
    for ep in epochs_from_trace(&trace, &c.layout, c.epochs) {
        let _ = proc.process_epoch(ep.epoch, ep.sync.as_ref(), ep.range.as_ref());
        for id in c.layout.anchor_ids() {
            if let Some(s) = proc.filter_state(id) {
                let p = s.p;
                if p[(0, 1)] != p[(1, 0)] || !p.iter().all(|v| v.is_finite()) {
                    return Outcome::new(false, format!("covariance not symmetric at epoch {}", ep.epoch));
                }
                let eig = p.symmetric_eigenvalues();
                // Eigenvalues relative to the largest, so rounding noise is scale free.
                let scale = eig.amax().max(f64::MIN_POSITIVE);
                min_eig = min_eig.min(eig.min() / scale);
                checked += 1;
            }
        }
    }
    let psd_ok = checked >= 3 * 9_999 && min_eig >= -1e-12;
    notes.push(format!("{checked} covariances PSD, min relative eigenvalue {min_eig:.2e}"));

    Outcome::new(relocation_ok && psd_ok, notes.join("; "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("noiseless exactness", noiseless_exactness),
        ("drift reproduction", drift_reproduction),
        ("sync interval trend", interval_trend),
        ("message budget", message_budget_arithmetic),
        ("range calibration", calibration),
        ("SDS versus single-sided", sds_versus_single),
        ("solver oracle", solver_oracle),
        ("TDoA invariants", invariant_suite),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {} {} {}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            name,
            o.detail
        );
    }
    println!("acceptance: {} of {} passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
