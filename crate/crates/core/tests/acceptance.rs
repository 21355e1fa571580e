//! Acceptance suite. Runs every criterion in sequence and prints one
//! PASS/FAIL line each; exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stigmetrics::cdr::{
    parse_fgmd_chunked, AntennaSpec, CallRecord, DistrictSpec, IngestMode, Registry, Site, TrafficRecord, UserClass,
    UserKey, UserTable,
};
use stigmetrics::geo::{DistanceMatrix, GeoPoint, GridSpec};
use stigmetrics::metrics::{
    calling_regularity, district_attractiveness, interaction_level, mobility_similarity, residential_inclusion,
    CallingPattern, CrMissingMode, Residence, ResidenceTable, HOURS,
};
use stigmetrics::pipeline::{
    emit_report, run_all, run_cr_il, run_district_analysis, run_event_impact, run_ms_il, Dataset, EventMeasure,
    EventSpec, Prepared, Report, RunConfig,
};
use stigmetrics::stats::{
    build_weight_matrix, dtw, morans_i, pearson_r, spatial_lag_regress, WeightConstruction, WeightMatrix,
};
use stigmetrics::stigmergy::{
    build_trail, step, trail_similarity, CellDeposit, EvaporationMode, EvaporationPolicy, MarkSpec, SampleEvent,
    StepWindow, Trail, TrailEngine,
};
use stigmetrics::synth::{self, EventConfig, SynthConfig};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty(), "median of nothing");
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn origin() -> GeoPoint {
    GeoPoint::new(41.0, 29.0).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Trail builder against a per-cell brute-force simulator.

fn cone(mark: &MarkSpec, d: f64) -> f64 {
    let (b, t, p) = (mark.base_radius, mark.top_radius, mark.peak);
    if d <= t {
        p
    } else if d <= b {
        p * (b - d) / (b - t)
    } else {
        0.0
    }
}

/// Simulates step by step on every cell: evaporate, then add each mark by
/// measuring the distance from every cell centre to the sample's cell centre.
fn brute_force_trail(
    spec: &GridSpec,
    mark: &MarkSpec,
    policy: &EvaporationPolicy,
    samples: &[SampleEvent],
    window: StepWindow,
) -> Vec<f64> {
    let (rows, cols, cs) = (spec.n_rows, spec.n_cols, spec.cell_size);
    let mut v = vec![0.0f64; rows * cols];
    for t in window.first..=window.last {
        if t > window.first {
            for x in &mut v {
                *x = match policy.mode {
                    EvaporationMode::Multiplicative => *x * (1.0 - policy.delta),
                    EvaporationMode::Subtractive => (*x - policy.delta).max(0.0),
                };
            }
        }
        for s in samples.iter().filter(|s| s.step == t) {
            let (x, y) = spec.plane(s.point);
            if x < 0.0 || y < 0.0 {
                continue;
            }
            let (sr, sc) = ((y / cs).floor() as usize, (x / cs).floor() as usize);
            if sr >= rows || sc >= cols {
                continue;
            }
            for r in 0..rows {
                for c in 0..cols {
                    let dy = (r as f64 - sr as f64) * cs;
                    let dx = (c as f64 - sc as f64) * cs;
                    v[r * cols + c] += cone(mark, (dx * dx + dy * dy).sqrt());
                }
            }
        }
    }
    v
}

fn random_case(rng: &mut ChaCha8Rng) -> (GridSpec, MarkSpec, EvaporationPolicy, Vec<SampleEvent>, StepWindow) {
    let rows = rng.random_range(1..=50);
    let cols = rng.random_range(1..=50);
    let cs = rng.random_range(40.0..250.0);
    let spec = GridSpec::new(origin(), cs, rows, cols).unwrap();
    let top = rng.random_range(50.0..400.0);
    let mark = MarkSpec {
        top_radius: top,
        base_radius: top + rng.random_range(20.0..400.0),
        peak: rng.random_range(0.5..2.0),
    };
    let mode = if rng.random_bool(0.5) {
        EvaporationMode::Multiplicative
    } else {
        EvaporationMode::Subtractive
    };
    let delta = match mode {
        EvaporationMode::Multiplicative => rng.random_range(0.0..0.9),
        EvaporationMode::Subtractive => rng.random_range(0.0..0.5),
    };
    let policy = EvaporationPolicy { delta, mode };
    let first = rng.random_range(0..5u64);
    let window = StepWindow::new(first, first + rng.random_range(0..10u64)).unwrap();
    let n = rng.random_range(0..=20);
    let (w, h) = (cols as f64 * cs, rows as f64 * cs);
    let samples = (0..n)
        .map(|_| SampleEvent {
            // Some samples fall off the raster or outside the window.
            point: origin().offset_m(rng.random_range(-0.1 * w..1.1 * w), rng.random_range(-0.1 * h..1.1 * h)),
            step: rng.random_range(window.first.saturating_sub(1)..=window.last + 1),
        })
        .collect();
    (spec, mark, policy, samples, window)
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (spec, mark, policy, samples, window) = random_case(&mut rng);
        let got = build_trail(&samples, window, &policy, &mark, &spec).map_err(|e| e.to_string())?;
        let want = brute_force_trail(&spec, &mark, &policy, &samples, window);
        check!(got.clock() == window.last, "case {case}: clock {} != {}", got.clock(), window.last);
        for (a, b) in got.values().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        check!(worst <= 1e-12, "case {case}: max cell difference {worst:e}");
    }
    let el = t0.elapsed();
    check!(el < Duration::from_secs(10), "took {el:?}");
    Ok(format!("200 cases, max |diff| {worst:e}, {el:.2?}"))
}

// ---------------------------------------------------------------------------
// 2. Similarity invariants.

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut checks = 0usize;
    for case in 0..100 {
        let (spec, mark, policy, samples, window) = random_case(&mut rng);
        let engine = TrailEngine::new(spec, mark, policy).unwrap();
        let a = engine.build(&samples, window);
        let (_, _, _, other, _) = random_case(&mut rng);
        let b = engine.build(&other, window);
        if a.is_zero() {
            continue;
        }
        let s_aa = trail_similarity(&a, &a).unwrap();
        check!(s_aa == 1.0, "case {case}: sim(a,a) = {s_aa}");
        if let (Ok(ab), Ok(ba)) = (trail_similarity(&a, &b), trail_similarity(&b, &a)) {
            check!((0.0..=1.0).contains(&ab), "case {case}: sim out of bounds {ab}");
            check!(ab == ba, "case {case}: asymmetric {ab} vs {ba}");
        }
        for k in [0.25, 0.5, 2.0, 4.0] {
            let s = trail_similarity(&a.clone().scaled(k), &a).unwrap();
            let want = k.min(1.0) / k.max(1.0);
            check!((s - want).abs() <= 1e-12, "case {case}: sim(k·a, a) = {s} for k = {k}");
        }
        checks += 1;
    }

    // Disjoint footprints.
    let spec = GridSpec::new(origin(), 100.0, 40, 40).unwrap();
    let engine = TrailEngine::new(spec, MarkSpec::default(), EvaporationPolicy::default()).unwrap();
    let w = StepWindow::new(0, 3).unwrap();
    let left = engine.build(&[SampleEvent { point: origin().offset_m(550.0, 2000.0), step: 1 }], w);
    let right = engine.build(&[SampleEvent { point: origin().offset_m(3450.0, 2000.0), step: 2 }], w);
    check!(trail_similarity(&left, &right).unwrap() == 0.0, "disjoint trails not 0");

    // Evaporation over 100 empty steps never increases any cell.
    for (mode, delta) in [(EvaporationMode::Multiplicative, 0.1), (EvaporationMode::Subtractive, 0.01)] {
        let policy = EvaporationPolicy { delta, mode };
        let engine = TrailEngine::new(spec, MarkSpec::default(), policy).unwrap();
        let mut t = engine.build(&[SampleEvent { point: origin().offset_m(2000.0, 2000.0), step: 0 }], StepWindow::new(0, 0).unwrap());
        let mut vol = t.volume();
        for i in 0..100 {
            let next: Trail = step(t.clone(), &[], &policy, &MarkSpec::default()).unwrap();
            check!(next.values().iter().zip(t.values()).all(|(n, o)| n <= o), "{mode:?} step {i}: a cell grew");
            let v = next.volume();
            check!(v < vol || (v == 0.0 && vol == 0.0), "{mode:?} step {i}: volume {v} not below {vol}");
            vol = v;
            t = next;
        }
    }

    // Without evaporation, the time and order of deposits do not matter.
    for case in 0..100 {
        let (spec, mark, _, samples, window) = random_case(&mut rng);
        let policy = EvaporationPolicy { delta: 0.0, mode: EvaporationMode::Multiplicative };
        let in_window: Vec<SampleEvent> = samples.into_iter().filter(|s| window.contains(s.step)).collect();
        let mut moved = in_window.clone();
        moved.reverse();
        for s in &mut moved {
            s.step = rng.random_range(window.first..=window.last);
        }
        let a = build_trail(&in_window, window, &policy, &mark, &spec).unwrap();
        let b = build_trail(&moved, window, &policy, &mark, &spec).unwrap();
        let diff = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        check!(diff <= 1e-12, "case {case}: reordering changed a cell by {diff:e}");
        let sub = EvaporationPolicy { delta: 0.0, mode: EvaporationMode::Subtractive };
        let c = build_trail(&moved, window, &sub, &mark, &spec).unwrap();
        let diff = a.values().iter().zip(c.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        check!(diff <= 1e-12, "case {case}: modes disagree at delta 0 by {diff:e}");
    }
    Ok(format!("{checks} random trail pairs, scale law, 100-step evaporation, delta=0 order independence"))
}

// ---------------------------------------------------------------------------
// 3. Metric bounds and hand cases.

struct Fixture {
    registry: Registry,
    users: Vec<UserKey>,
}

fn fixture() -> Fixture {
    let antennas = (0..6)
        .map(|i| AntennaSpec {
            id: format!("A{i}"),
            location: origin().offset_m(1500.0 * i as f64, 0.0),
            district: format!("D{}", i / 2),
        })
        .collect();
    let districts = (0..3).map(|i| DistrictSpec::new(&format!("D{i}"), &format!("d{i}"), Some(10.0 + i as f64))).collect();
    let registry = Registry::new(antennas, districts).unwrap();
    let mut table = UserTable::new();
    let users = (0..40).map(|i| table.intern(&format!("1{i:05}")).unwrap()).collect();
    Fixture { registry, users }
}

fn call(f: &Fixture, user: usize, hour: u32, callee: UserClass, antenna: usize) -> CallRecord {
    CallRecord {
        caller: f.users[user],
        caller_class: UserClass::Refugee,
        timestamp: NaiveDate::from_ymd_opt(2017, 3, 1).unwrap().and_hms_opt(hour, 0, 0).unwrap(),
        callee: Some(callee),
        site: Site::Antenna(f.registry.antenna_key(&format!("A{antenna}")).unwrap()),
    }
}

fn traffic(f: &Fixture, antenna: usize, hour: u32, refugee: u64, total: u64) -> TrafficRecord {
    let a = f.registry.antenna_key(&format!("A{antenna}")).unwrap();
    TrafficRecord {
        timestamp: NaiveDate::from_ymd_opt(2017, 3, 1).unwrap().and_hms_opt(hour, 0, 0).unwrap(),
        out_antenna: a,
        in_antenna: a,
        total_calls: total,
        refugee_calls: refugee,
        total_duration: total * 60,
        refugee_duration: refugee * 60,
    }
}

fn criterion_3() -> Outcome {
    let f = fixture();
    let reg = &f.registry;
    let d0 = reg.district_key("D0").unwrap();

    // Hand arithmetic.
    let il_case: Vec<_> = [UserClass::Local, UserClass::Local, UserClass::Local, UserClass::Refugee]
        .iter()
        .map(|c| call(&f, 0, 10, *c, 0))
        .collect();
    check!(interaction_level::<f64>(&il_case).unwrap() == 0.75, "IL 3:1 != 0.75");
    check!(interaction_level::<f64>(&il_case[3..]).unwrap() == 0.0, "IL with no local calls != 0");
    check!(interaction_level::<f64>(&il_case[..3]).unwrap() == 1.0, "IL with only local calls != 1");
    let ri = residential_inclusion::<f64>(&[traffic(&f, 0, 22, 20, 100)], reg, d0, 3).unwrap();
    check!(ri == 0.2, "RI 20/100 = {ri}");
    check!(residential_inclusion::<f64>(&[traffic(&f, 0, 22, 0, 50)], reg, d0, 3).unwrap() == 0.0, "RI zero case");
    check!(residential_inclusion::<f64>(&[traffic(&f, 1, 3, 50, 50)], reg, d0, 3).unwrap() == 1.0, "RI all-refugee case");
    let d1 = reg.district_key("D1").unwrap();
    let res = |u: usize, m: u32, d| Residence { user: f.users[u], month: m, district: d };
    let t = ResidenceTable::from_residences([res(0, 4, d0), res(1, 4, d0), res(2, 4, d0), res(0, 5, d0), res(1, 5, d0), res(2, 5, d1)]);
    let da = district_attractiveness::<f64>(&t, reg, d0, 4).unwrap();
    check!(da == 2.0 / 3.0, "DA 2 of 3 = {da}");
    let all = ResidenceTable::from_residences([res(0, 4, d0), res(0, 5, d0)]);
    check!(district_attractiveness::<f64>(&all, reg, d0, 4).unwrap() == 1.0, "DA all stay");
    let none = ResidenceTable::from_residences([res(0, 4, d0), res(0, 5, d1)]);
    check!(district_attractiveness::<f64>(&none, reg, d0, 4).unwrap() == 0.0, "DA none stay");

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let classes = [UserClass::Local, UserClass::Refugee, UserClass::Unknown];
    let spec = GridSpec::covering(&reg.antennas().iter().map(|a| a.location).collect::<Vec<_>>(), 100.0, 6).unwrap();
    let engine = TrailEngine::new(spec, MarkSpec::default(), EvaporationPolicy::default()).unwrap();
    let cells: Vec<_> = reg.antennas().iter().map(|a| spec.project(a.location).unwrap()).collect();
    for i in 0..1000 {
        // IL
        let n = rng.random_range(1..30);
        let mut recs: Vec<_> = (0..n).map(|_| call(&f, 0, rng.random_range(0..24), classes[rng.random_range(0..3)], 0)).collect();
        recs.push(call(&f, 0, 1, classes[rng.random_range(0..2)], 0));
        let il: f64 = interaction_level(&recs).unwrap();
        check!((0.0..=1.0).contains(&il), "input {i}: IL {il}");

        // CR, both modes, and scale invariance of the argument.
        let mut counts = [0u64; HOURS];
        let mut lcounts = [0u64; HOURS];
        for _ in 0..rng.random_range(1..60) {
            counts[rng.random_range(0..HOURS)] += 1;
        }
        for _ in 0..rng.random_range(1..200) {
            lcounts[rng.random_range(0..HOURS)] += 1;
        }
        let cp = CallingPattern::<f64>::from_counts(&counts).unwrap();
        let lcp = CallingPattern::<f64>::from_counts(&lcounts).unwrap();
        let k = rng.random_range(0.01..100.0);
        let scaled = CallingPattern { values: cp.values.map(|v| v * k), observed: cp.observed };
        for mode in [CrMissingMode::Zeros, CrMissingMode::PairwiseComplete] {
            match calling_regularity(&cp, &lcp, mode) {
                Ok(cr) => {
                    check!((0.0..=1.0).contains(&cr), "input {i}: CR {cr}");
                    let cr2 = calling_regularity(&scaled, &lcp, mode).unwrap();
                    check!((cr - cr2).abs() <= 1e-12, "input {i}: CR not scale invariant ({cr} vs {cr2})");
                }
                Err(_) => check!(mode == CrMissingMode::PairwiseComplete, "input {i}: CR failed in zeros mode"),
            }
        }

        // RI
        let rows: Vec<_> = (0..rng.random_range(1..10))
            .map(|_| {
                let total = rng.random_range(1..100);
                traffic(&f, rng.random_range(0..2), [21, 23, 2, 6][rng.random_range(0..4)], rng.random_range(0..=total), total)
            })
            .collect();
        let ri: f64 = residential_inclusion(&rows, reg, d0, 3).unwrap();
        check!((0.0..=1.0).contains(&ri), "input {i}: RI {ri}");

        // DA
        let ds: Vec<_> = reg.district_keys().collect();
        let mut resid = vec![res(0, 6, d0)];
        for u in 1..rng.random_range(2..40) {
            for m in 6..=7 {
                if rng.random_bool(0.8) {
                    resid.push(res(u, m, ds[rng.random_range(0..ds.len())]));
                }
            }
        }
        let da: f64 = district_attractiveness(&ResidenceTable::from_residences(resid), reg, d0, 6).unwrap();
        check!((0.0..=1.0).contains(&da), "input {i}: DA {da}");

        // MS
        let size = rng.random_range(1..8);
        let mut deposits: BTreeMap<UserKey, Vec<CellDeposit>> = BTreeMap::new();
        for u in 0..2 * size {
            let v = (0..rng.random_range(1..6))
                .map(|_| CellDeposit { step: rng.random_range(0..24), cell: cells[rng.random_range(0..cells.len())] })
                .collect();
            deposits.insert(f.users[u], v);
        }
        let ms: f64 = mobility_similarity(&f.users[..size], &f.users[size..2 * size], &deposits, &engine, StepWindow::new(0, 23).unwrap())
            .map_err(|e| e.to_string())?;
        check!((0.0..=1.0).contains(&ms), "input {i}: MS {ms}");
    }
    Ok("1,000 random inputs per metric in [0,1]; CR scale invariance; IL/RI/DA hand cases exact".into())
}

// ---------------------------------------------------------------------------
// 4. DTW against path enumeration.

fn dtw_by_paths(a: &[i64], b: &[i64]) -> i64 {
    fn walk(a: &[i64], b: &[i64], i: usize, j: usize, acc: i64, best: &mut i64) {
        let acc = acc + (a[i] - b[j]).abs();
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = (*best).min(acc);
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
    }
    let mut best = i64::MAX;
    walk(a, b, 0, 0, 0, &mut best);
    best
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for pair in 0..500 {
        let a: Vec<i64> = (0..rng.random_range(1..=5)).map(|_| rng.random_range(-20..=20)).collect();
        let b: Vec<i64> = (0..rng.random_range(1..=5)).map(|_| rng.random_range(-20..=20)).collect();
        let (got, want) = (dtw(&a, &b).unwrap(), dtw_by_paths(&a, &b));
        check!(got == want, "pair {pair}: {a:?} vs {b:?}: DP {got}, enumeration {want}");
    }
    let el = t0.elapsed();
    check!(el < Duration::from_secs(5), "took {el:?}");
    Ok(format!("500 pairs exact, {el:.2?}"))
}

// ---------------------------------------------------------------------------
// 5. Pearson and Moran's I.

fn criterion_5() -> Outcome {
    let r = pearson_r::<f64>(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
    check!((r - 0.5).abs() <= 1e-12, "r = {r}");
    // Ring of four with alternating values.
    let mut w = vec![0.0; 16];
    for i in 0..4 {
        w[i * 4 + (i + 1) % 4] = 1.0;
        w[i * 4 + (i + 3) % 4] = 1.0;
    }
    let w = WeightMatrix::from_dense(4, w).unwrap();
    let m = morans_i(&[1.0f64, -1.0, 1.0, -1.0], &w, 0, 1).unwrap();
    check!((m.i + 1.0).abs() <= 1e-12, "ring Moran's I = {}", m.i);

    let n = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
        }
    }
    let dm = DistanceMatrix::from_rows(n, d).unwrap();
    let w = build_weight_matrix(&dm, WeightConstruction::InverseDistance { epsilon: 0.1 }, true).unwrap();
    let m = morans_i(&values, &w, 10_000, 7).unwrap();
    let se = m.perm_sd / (10_000f64).sqrt();
    let gap = (m.perm_mean - m.expected).abs();
    check!(gap <= 3.0 * se, "permutation mean {} vs {} (3 SE = {})", m.perm_mean, m.expected, 3.0 * se);
    Ok(format!("r = {r}, ring I = {}, permutation mean off by {:.2} SE", -1.0, gap / se))
}

// ---------------------------------------------------------------------------
// 6. Spatial lag regression recovery.

/// Gaussian elimination with partial pivoting.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

/// Least squares via the normal equations, intercept first.
fn ols(y: &[f64], x: &[Vec<f64>]) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = x.iter().map(|r| std::iter::once(1.0).chain(r.iter().copied()).collect()).collect();
    let k = rows[0].len();
    let mut xtx = vec![vec![0.0; k]; k];
    let mut xty = vec![0.0; k];
    for (r, yi) in rows.iter().zip(y) {
        for i in 0..k {
            xty[i] += r[i] * yi;
            for j in 0..k {
                xtx[i][j] += r[i] * r[j];
            }
        }
    }
    gauss_solve(xtx, xty)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let n = 38;
    let beta = [1.0, 0.5, -0.3, 0.8];
    let mut lines = Vec::new();
    for rho in [0.0, 0.3, 0.5] {
        let mut est: Vec<Vec<f64>> = vec![Vec::new(); 5];
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
            let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    d[i * n + j] = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                }
            }
            let dm = DistanceMatrix::from_rows(n, d).unwrap();
            let w = build_weight_matrix(&dm, WeightConstruction::InverseDistance { epsilon: 0.1 }, true).unwrap();
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random()).collect()).collect();
            let rhs: Vec<f64> = x
                .iter()
                .map(|r| beta[0] + beta[1] * r[0] + beta[2] * r[1] + beta[3] * r[2] + 0.01 * standard_normal(&mut rng))
                .collect();
            let a: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| f64::from(u8::from(i == j)) - rho * w.get(i, j)).collect())
                .collect();
            let y = gauss_solve(a, rhs);
            let m = spatial_lag_regress(&y, &x, &w).map_err(|e| e.to_string())?;
            est[0].push(m.rho);
            for k in 0..4 {
                est[k + 1].push(m.beta[k]);
            }
            if rho == 0.0 && seed < 5 {
                // Zero weights reduce the model to least squares.
                let zero = spatial_lag_regress(&y, &x, &WeightMatrix::zeros(n)).map_err(|e| e.to_string())?;
                let reference = ols(&y, &x);
                check!(zero.rho == 0.0, "rho {} with zero weights", zero.rho);
                for (b, r) in zero.beta.iter().zip(&reference) {
                    check!((b - r).abs() <= 1e-6, "zero-weight beta {b} vs OLS {r}");
                }
            }
        }
        let rho_hat = median(est[0].clone());
        check!((rho_hat - rho).abs() <= 0.1, "rho {rho}: median estimate {rho_hat}");
        for k in 0..4 {
            let b = median(est[k + 1].clone());
            check!((b - beta[k]).abs() <= 0.05, "rho {rho}: beta[{k}] median {b} vs {}", beta[k]);
        }
        lines.push(format!("rho {rho} -> {rho_hat:.4}"));
    }
    let el = t0.elapsed();
    check!(el < Duration::from_secs(30), "took {el:?}");
    Ok(format!("{}; zero weights match OLS; {el:.2?}", lines.join(", ")))
}

// ---------------------------------------------------------------------------
// 7. Directional end-to-end checks on synthetic data.

const EVENT_DAY: (i32, u32, u32) = (2017, 7, 1);

struct RunSummary {
    cr_il_median: f64,
    cr_il_abs: Vec<f64>,
    district: BTreeMap<String, f64>,
    ms_il_median: f64,
    event_ms: BTreeMap<usize, f64>,
}

fn e2e_run(kappa_routine: f64, severity: f64, seed: u64, with_district: bool) -> Result<RunSummary, String> {
    let date = NaiveDate::from_ymd_opt(EVENT_DAY.0, EVENT_DAY.1, EVENT_DAY.2).unwrap();
    let mut sc = SynthConfig::default();
    sc.seed = seed;
    sc.population.n_locals = 1000;
    sc.population.n_refugees = 1000;
    sc.population.kappa_routine = kappa_routine;
    sc.population.kappa_cost = 0.9;
    sc.population.kappa_mobility = 0.9;
    sc.events = vec![EventConfig { date, severity, low_il_multiplier: 1.0 }];
    let out = synth::generate(&sc).map_err(|e| e.to_string())?;
    let data = Dataset::from_synth(out, format!("seed {seed}"));
    let mut cfg = RunConfig::default();
    cfg.stats.n_perm = 999;
    cfg.stats.seed = seed;
    cfg.events = vec![EventSpec { date, label: "planted".into() }];
    let prep = Prepared::new(&cfg, &data).map_err(|e| e.to_string())?;
    let cr = run_cr_il(&prep).map_err(|e| e.to_string())?;
    let zeros: Vec<f64> = cr.rows.iter().filter(|r| r.mode == CrMissingMode::Zeros).map(|r| r.r).collect();
    let mut district = BTreeMap::new();
    if with_district {
        let d = run_district_analysis(&prep).map_err(|e| e.to_string())?;
        for c in d.correlations {
            district.insert(c.analysis, c.r);
        }
    }
    let ms = run_ms_il(&prep).map_err(|e| e.to_string())?;
    let ev = run_event_impact(&prep, &ms).map_err(|e| e.to_string())?;
    Ok(RunSummary {
        cr_il_median: median(zeros.clone()),
        cr_il_abs: zeros.iter().map(|r| r.abs()).collect(),
        district,
        ms_il_median: median(ms.corr.iter().map(|c| c.r).collect()),
        event_ms: ev.rows.iter().filter(|r| r.measure == EventMeasure::Ms).map(|r| (r.group, r.ratio)).collect(),
    })
}

fn criterion_7() -> Outcome {
    let t0 = Instant::now();
    let seeds: Vec<u64> = (1..=10).collect();
    let mut planted = Vec::new();
    let mut null = Vec::new();
    for &s in &seeds {
        planted.push(e2e_run(0.9, 0.5, s, true)?);
        null.push(e2e_run(0.0, 0.0, 1000 + s, false)?);
    }
    let mut notes = Vec::new();

    // (a)
    let a_med = median(planted.iter().map(|r| r.cr_il_median).collect());
    check!(a_med > 0.5, "(a) median CR-IL r {a_med} with routine plant");
    let a_null = median(null.iter().flat_map(|r| r.cr_il_abs.iter().copied()).collect());
    check!(a_null < 0.2, "(a) median |CR-IL r| {a_null} without routine plant");
    notes.push(format!("(a) r {a_med:.3}, null |r| {a_null:.3}"));

    // (b)
    let get = |k: &str| median(planted.iter().map(|r| r.district[k]).collect());
    let (cr_cost, da_cost) = (get("cr_cost"), get("da_cost"));
    check!(cr_cost > 0.0, "(b) CR-cost r {cr_cost}");
    check!(da_cost < 0.0, "(b) DA-cost r {da_cost}");
    for m in ["euclidean", "cosine", "dtw"] {
        let v = get(&format!("{m}_distance_cost"));
        check!(v < 0.0, "(b) {m} distance-cost r {v}");
    }
    notes.push(format!("(b) CR-cost {cr_cost:.3}, DA-cost {da_cost:.3}"));

    // (c)
    let c_med = median(planted.iter().map(|r| r.ms_il_median).collect());
    check!(c_med > 0.6, "(c) median MS-IL r {c_med}");
    notes.push(format!("(c) MS-IL r {c_med:.3}"));

    // (d)
    let ratio = |runs: &[RunSummary], g: usize| median(runs.iter().map(|r| r.event_ms[&g]).collect());
    let groups: BTreeSet<usize> = planted[0].event_ms.keys().copied().collect();
    check!(groups.len() == 5, "(d) {} IL groups with ratios", groups.len());
    for &g in &groups {
        let r = ratio(&planted, g);
        check!(r > 1.0, "(d) group {g} ratio {r}");
        let dev = median(null.iter().map(|x| (x.event_ms[&g] - 1.0).abs()).collect());
        check!(dev < 0.15, "(d) null event group {g}: median |ratio - 1| {dev}");
    }
    let (r1, r5) = (ratio(&planted, 1), ratio(&planted, 5));
    check!(r1 > r5, "(d) group 1 ratio {r1} not above group 5 ratio {r5}");
    notes.push(format!("(d) ratio il1 {r1:.2} > il5 {r5:.2}"));

    let el = t0.elapsed();
    check!(el < Duration::from_secs(600), "took {el:?}");
    Ok(format!("{} seeds x 2 scenarios: {}; {el:.1?}", seeds.len(), notes.join(", ")))
}

// ---------------------------------------------------------------------------
// 8. Throughput.

fn fgmd_text(registry: &Registry, n_records: usize, n_users: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<&str> = registry.antennas().iter().map(|a| a.id.as_str()).collect();
    let jan1 = NaiveDate::from_ymd_opt(2017, 1, 1).unwrap();
    let mut s = String::with_capacity(n_records * 40);
    s.push_str(stigmetrics::cdr::FGMD_HEADER);
    s.push('\n');
    for _ in 0..n_records {
        let u = rng.random_range(0..n_users);
        let prefix = if u % 2 == 0 { 1 } else { 2 };
        let day = jan1 + chrono::Days::new(rng.random_range(0..365));
        let callee = ["1", "2", "3"][rng.random_range(0..3)];
        let a = ids[rng.random_range(0..ids.len())];
        use std::fmt::Write;
        writeln!(
            s,
            "{prefix}{u:06},{}T{:02}:{:02}:{:02},{callee},{a}",
            day,
            rng.random_range(0..24),
            rng.random_range(0..60),
            rng.random_range(0..60)
        )
        .unwrap();
    }
    s
}

/// Ingests the text, then builds every group's trail for every day.
fn ingest_and_build(text: &str, registry: &Registry) -> (usize, usize) {
    let mut users = UserTable::new();
    let chunks = rayon::current_num_threads() * 4;
    let ing = parse_fgmd_chunked(text, registry, &mut users, IngestMode::Strict, chunks).unwrap();
    let points: Vec<GeoPoint> = registry.antennas().iter().map(|a| a.location).collect();
    let spec = GridSpec::covering(&points, 100.0, 6).unwrap();
    let engine = TrailEngine::new(spec, MarkSpec::default(), EvaporationPolicy::default()).unwrap();
    let cells: Vec<_> = points.iter().map(|p| spec.project(*p).unwrap()).collect();
    // Deposits per group, in step order; group = user key mod 5.
    let mut groups: Vec<Vec<CellDeposit>> = vec![Vec::new(); 5];
    for r in &ing.rows {
        let Site::Antenna(a) = r.site else { continue };
        let t = r.timestamp;
        let step = u64::from(chrono::Datelike::ordinal0(&t)) * 24 + u64::from(chrono::Timelike::hour(&t));
        groups[r.caller.index() % 5].push(CellDeposit { step, cell: cells[a.index()] });
    }
    use rayon::prelude::*;
    groups.par_iter_mut().for_each(|g| g.sort_unstable());
    let trails: usize = (0..365u64)
        .into_par_iter()
        .map(|day| {
            let w = StepWindow::new(day * 24, day * 24 + 23).unwrap();
            let built: Vec<Trail> = groups
                .iter()
                .map(|g| {
                    let lo = g.partition_point(|d| d.step < w.first);
                    let hi = g.partition_point(|d| d.step <= w.last);
                    engine.build_cells(&g[lo..hi], w)
                })
                .collect();
            // Touch the result so the build cannot be skipped.
            assert!(trail_similarity(&built[0], &built[1]).unwrap() > 0.0);
            built.len()
        })
        .sum();
    (ing.rows.len(), trails)
}

fn criterion_8() -> Outcome {
    let city = synth::generate(&SynthConfig {
        days: Some(1),
        population: synth::PopulationConfig { n_locals: 1, n_refugees: 1, ..Default::default() },
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let registry = city.registry;
    let text = fgmd_text(&registry, 10_000_000, 20_000, 808);
    let mut timings = Vec::new();
    for (workers, limit) in [(1usize, 300u64), (4, 120)] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| e.to_string())?;
        let t0 = Instant::now();
        let (records, trails) = pool.install(|| ingest_and_build(&text, &registry));
        let el = t0.elapsed();
        check!(records == 10_000_000, "ingested {records} records");
        check!(trails == 5 * 365, "built {trails} trails");
        check!(el < Duration::from_secs(limit), "{workers} worker(s): {el:?} over {limit} s");
        timings.push(format!("{workers} worker(s) {el:.1?}"));
    }
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    Ok(format!("10M records + 1,825 daily trails: {} ({cores} core(s) available)", timings.join(", ")))
}

// ---------------------------------------------------------------------------
// 9. Determinism.

fn run_to_dir(cfg: &RunConfig, data_dir: &Path, out: &Path, workers: usize) -> Result<(), String> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let mut cfg = cfg.clone();
        cfg.inputs.antennas = Some(data_dir.join(synth::ANTENNAS_FILE));
        cfg.inputs.districts = Some(data_dir.join(synth::DISTRICTS_FILE));
        cfg.inputs.fgmd = Some(data_dir.join(synth::FGMD_FILE));
        cfg.inputs.cgmd = Some(data_dir.join(synth::CGMD_FILE));
        cfg.inputs.atd = Some(data_dir.join(synth::ATD_FILE));
        let data = Dataset::load(&cfg).map_err(|e| e.to_string())?;
        let prep = Prepared::new(&cfg, &data).map_err(|e| e.to_string())?;
        let mut report = Report::new(&prep);
        report.add_all(&run_all(&prep).map_err(|e| e.to_string())?);
        emit_report(&report, &prep, out).map_err(|e| e.to_string())?;
        Ok(())
    })
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sc = SynthConfig {
        days: Some(120),
        seed: 99,
        population: synth::PopulationConfig { n_locals: 200, n_refugees: 200, ..Default::default() },
        events: vec![EventConfig { date: NaiveDate::from_ymd_opt(2017, 3, 1).unwrap(), severity: 0.5, low_il_multiplier: 1.0 }],
        ..Default::default()
    };
    let (d1, d2) = (tmp.path().join("data1"), tmp.path().join("data2"));
    synth::generate(&sc).unwrap().write_to(&d1).map_err(|e| e.to_string())?;
    synth::generate(&sc).unwrap().write_to(&d2).map_err(|e| e.to_string())?;
    check!(dir_contents(&d1) == dir_contents(&d2), "generator output differs between runs");

    let mut cfg = RunConfig::default();
    cfg.stats.n_perm = 199;
    cfg.stats.n_trials = 2;
    cfg.stats.seed = 4;
    cfg.events = vec![EventSpec { date: NaiveDate::from_ymd_opt(2017, 3, 1).unwrap(), label: "e".into() }];
    cfg.output.trail_dump_dates = vec![NaiveDate::from_ymd_opt(2017, 2, 2).unwrap()];
    let (o1, o2, o3) = (tmp.path().join("out1"), tmp.path().join("out2"), tmp.path().join("out3"));
    run_to_dir(&cfg, &d1, &o1, 1)?;
    run_to_dir(&cfg, &d1, &o2, 4)?;
    let (a, b) = (dir_contents(&o1), dir_contents(&o2));
    check!(a.len() > 20, "only {} files written", a.len());
    for (name, bytes) in &a {
        check!(b.get(name) == Some(bytes), "{name} differs between runs");
    }
    check!(a.len() == b.len(), "file sets differ");

    // The manifest alone reproduces the run.
    let manifest = String::from_utf8(a["manifest.toml"].clone()).unwrap();
    let again = RunConfig::from_toml(&manifest).map_err(|e| e.to_string())?;
    run_to_dir(&again, &d1, &o3, 1)?;
    check!(dir_contents(&o3) == a, "rerun from the manifest differs");
    Ok(format!("{} files byte-identical across 1 and 4 workers and a rerun from the manifest", a.len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("stigmergy oracle equivalence", criterion_1),
        ("trail-similarity invariants", criterion_2),
        ("metric bounds and identities", criterion_3),
        ("DTW exhaustive oracle", criterion_4),
        ("Pearson and Moran's I oracles", criterion_5),
        ("spatial regression recovery", criterion_6),
        ("end-to-end directional reproduction", criterion_7),
        ("throughput", criterion_8),
        ("determinism", criterion_9),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match res {
            Ok(detail) => println!("criterion {n} {name}: PASS ({detail})"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({why})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
