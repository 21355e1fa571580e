//! Seeded synthetic city with planted couplings between a refugee's
//! interaction level and their mobility, calling routine and housing.
//!
//! Layout: districts sit on a square lattice. Each district has a ring of
//! "local" antennas around its centre and a few "enclave" antennas further
//! out, far enough that marks deposited on the two kinds never overlap.
//! Locals call from home at night and mostly from work by day. A refugee
//! calls from local antennas ("overlap") with a probability that grows with
//! their planted IL, otherwise from enclave antennas.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdr::{
    format_atd, format_cgmd, format_fgmd, AntennaKey, AntennaSpec, CallRecord, DistrictKey, DistrictSpec, Registry,
    Site, TrafficRecord, UserClass, UserKey, UserTable, ATD_HEADER, CGMD_HEADER, FGMD_HEADER,
};
use crate::geo::GeoPoint;
use crate::metrics::is_night_hour;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("antenna {antenna} hour {hour}: FGMD has {fgmd_calls} calls ({fgmd_refugee} by refugees), ATD has {atd_calls} ({atd_refugee})")]
    Inconsistent {
        antenna: String,
        hour: String,
        fgmd_calls: u64,
        fgmd_refugee: u64,
        atd_calls: u64,
        atd_refugee: u64,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CityConfig {
    pub n_districts: usize,
    pub local_antennas_per_district: usize,
    pub enclave_antennas_per_district: usize,
    /// Distance between neighbouring district centres.
    pub district_spacing_m: f64,
    /// Radius of the ring of local antennas.
    pub local_radius_m: f64,
    /// Distance of enclave antennas from the district centre.
    pub enclave_radius_m: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// Rent of district `i` is `base_rent + i·rent_step`.
    pub base_rent: f64,
    pub rent_step: f64,
}

impl Default for CityConfig {
    fn default() -> Self {
        Self {
            n_districts: 16,
            local_antennas_per_district: 6,
            enclave_antennas_per_district: 2,
            district_spacing_m: 6000.0,
            local_radius_m: 1000.0,
            enclave_radius_m: 2600.0,
            origin_lat: 41.0,
            origin_lon: 28.8,
            base_rent: 10.0,
            rent_step: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub n_locals: usize,
    pub n_refugees: usize,
    /// IL → probability of calling from where locals are.
    pub kappa_mobility: f64,
    /// IL → closeness of the hourly profile to the locals' profile.
    pub kappa_routine: f64,
    /// IL → rent level of the home district, and rent → relocation rate.
    pub kappa_cost: f64,
    /// Overlap probability of a refugee with IL 0.
    pub base_overlap: f64,
    pub unknown_callee_rate: f64,
    /// Share of users whose daily call rate clears the activity filter.
    pub active_share: f64,
    pub active_rate: (f64, f64),
    pub inactive_rate: (f64, f64),
    /// Daytime share of a local's calls made from work.
    pub work_share: f64,
    pub move_base: f64,
    pub move_cost_scale: f64,
    /// Every refugee emits the same call times and antennas (a local's
    /// routine); only callee classes differ. Control where mobility cannot
    /// depend on IL.
    pub identical_traces: bool,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            n_locals: 1000,
            n_refugees: 1000,
            kappa_mobility: 0.9,
            kappa_routine: 0.9,
            kappa_cost: 0.9,
            base_overlap: 0.2,
            unknown_callee_rate: 0.0093,
            active_share: 0.9,
            active_rate: (3.0, 6.0),
            inactive_rate: (0.5, 1.5),
            work_share: 0.7,
            move_base: 0.05,
            move_cost_scale: 0.3,
            identical_traces: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventConfig {
    pub date: NaiveDate,
    pub severity: f64,
    pub low_il_multiplier: f64,
}

impl EventConfig {
    /// Overlap factor for calls after the event.
    pub fn factor(&self, il: f64) -> f64 {
        (1.0 - self.severity * (1.0 + self.low_il_multiplier * (1.0 - il))).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub city: CityConfig,
    pub population: PopulationConfig,
    pub events: Vec<EventConfig>,
    pub year: i32,
    pub seed: u64,
    /// Only simulate the first `days` days of the year.
    pub days: Option<u32>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            city: CityConfig::default(),
            population: PopulationConfig::default(),
            events: Vec::new(),
            year: 2017,
            seed: 1,
            days: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::ConfigInvalid(m));
        let c = &self.city;
        let p = &self.population;
        if c.n_districts < 3 {
            return bad(format!("need at least 3 districts for 3 rent tiers, got {}", c.n_districts));
        }
        if c.local_antennas_per_district == 0 || c.enclave_antennas_per_district == 0 {
            return bad("every district needs local and enclave antennas".into());
        }
        if !(c.rent_step > 0.0 && c.base_rent > 0.0) {
            return bad("rent must be positive and strictly increasing".into());
        }
        if !(c.local_radius_m > 0.0
            && c.enclave_radius_m > c.local_radius_m + 1000.0
            && c.district_spacing_m > 2.0 * c.enclave_radius_m)
        {
            return bad("antenna rings overlap: need local < enclave - 1 km and spacing > 2·enclave".into());
        }
        for (name, k) in [
            ("kappa_mobility", p.kappa_mobility),
            ("kappa_routine", p.kappa_routine),
            ("kappa_cost", p.kappa_cost),
            ("base_overlap", p.base_overlap),
            ("unknown_callee_rate", p.unknown_callee_rate),
            ("active_share", p.active_share),
            ("work_share", p.work_share),
        ] {
            if !(0.0..=1.0).contains(&k) {
                return bad(format!("{name} must be in [0, 1], got {k}"));
            }
        }
        if !(p.move_base >= 0.0 && p.move_base + p.move_cost_scale <= 1.0 && p.move_cost_scale >= 0.0) {
            return bad("relocation probabilities must stay in [0, 1]".into());
        }
        for (lo, hi) in [p.active_rate, p.inactive_rate] {
            if !(lo > 0.0 && hi >= lo) {
                return bad(format!("invalid call rate range ({lo}, {hi})"));
            }
        }
        if p.n_locals == 0 || p.n_refugees == 0 {
            return bad("need at least one local and one refugee".into());
        }
        if p.n_refugees > 999_999 || p.n_locals > 999_999 {
            return bad("at most 999999 users per class".into());
        }
        if NaiveDate::from_ymd_opt(self.year, 1, 1).is_none() {
            return bad(format!("invalid year {}", self.year));
        }
        for e in &self.events {
            if e.date.year() != self.year {
                return bad(format!("event {} outside year {}", e.date, self.year));
            }
            if !(0.0..=1.0).contains(&e.severity) || e.low_il_multiplier < 0.0 {
                return bad(format!("invalid event at {}", e.date));
            }
        }
        Ok(())
    }

    fn n_days(&self) -> u32 {
        let jan1 = NaiveDate::from_ymd_opt(self.year, 1, 1).expect("validated");
        let full = (NaiveDate::from_ymd_opt(self.year + 1, 1, 1).expect("valid") - jan1).num_days() as u32;
        self.days.map_or(full, |d| d.min(full))
    }
}

/// Planted per-refugee values.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthRow {
    pub user_id: String,
    pub il_target: f64,
    /// Home district at the start of the year.
    pub home_district: String,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub registry: Registry,
    pub users: UserTable,
    pub fgmd: Vec<CallRecord>,
    pub cgmd: Vec<CallRecord>,
    pub atd: Vec<TrafficRecord>,
    pub ground_truth: Vec<GroundTruthRow>,
    pub enclave_antennas: Vec<AntennaKey>,
}

pub const GROUND_TRUTH_HEADER: &str = "user_id,il_target,home_district";

struct City {
    registry: Registry,
    /// Local antennas per district, by district index (= rent rank).
    locals: Vec<Vec<AntennaKey>>,
    enclaves: Vec<Vec<AntennaKey>>,
    district_keys: Vec<DistrictKey>,
}

fn district_id(i: usize) -> String {
    format!("D{i:03}")
}

fn build_city(c: &CityConfig) -> Result<City, SynthError> {
    let origin = GeoPoint::new(c.origin_lat, c.origin_lon).map_err(|e| SynthError::ConfigInvalid(e.to_string()))?;
    let side = (c.n_districts as f64).sqrt().ceil() as usize;
    let mut antennas = Vec::new();
    let mut districts = Vec::new();
    for i in 0..c.n_districts {
        let (row, col) = (i / side, i % side);
        let center = origin.offset_m(col as f64 * c.district_spacing_m, row as f64 * c.district_spacing_m);
        districts.push(DistrictSpec::new(
            &district_id(i),
            &format!("District {i}"),
            Some(c.base_rent + i as f64 * c.rent_step),
        ));
        let ring = |n: usize, radius: f64, phase: f64| -> Vec<GeoPoint> {
            (0..n)
                .map(|j| {
                    let a = phase + std::f64::consts::TAU * j as f64 / n as f64;
                    center.offset_m(radius * a.cos(), radius * a.sin())
                })
                .collect()
        };
        for (j, p) in ring(c.local_antennas_per_district, c.local_radius_m, 0.0).into_iter().enumerate() {
            antennas.push(AntennaSpec {
                id: format!("L{i:03}{j:02}"),
                location: p,
                district: district_id(i),
            });
        }
        for (j, p) in ring(c.enclave_antennas_per_district, c.enclave_radius_m, std::f64::consts::FRAC_PI_4)
            .into_iter()
            .enumerate()
        {
            antennas.push(AntennaSpec {
                id: format!("E{i:03}{j:02}"),
                location: p,
                district: district_id(i),
            });
        }
    }
    let registry = Registry::new(antennas, districts).map_err(|e| SynthError::ConfigInvalid(e.to_string()))?;
    let key = |id: String| registry.antenna_key(&id).expect("antenna registered");
    let locals = (0..c.n_districts)
        .map(|i| (0..c.local_antennas_per_district).map(|j| key(format!("L{i:03}{j:02}"))).collect())
        .collect();
    let enclaves = (0..c.n_districts)
        .map(|i| (0..c.enclave_antennas_per_district).map(|j| key(format!("E{i:03}{j:02}"))).collect())
        .collect();
    let district_keys = (0..c.n_districts)
        .map(|i| registry.district_key(&district_id(i)).expect("district registered"))
        .collect();
    Ok(City {
        registry,
        locals,
        enclaves,
        district_keys,
    })
}

/// Hourly weights of locals: quiet nights, busy working hours and evenings.
pub const LOCAL_PROFILE: [f64; 24] = [
    0.3, 0.2, 0.15, 0.1, 0.1, 0.15, 0.3, 0.8, 1.6, 2.0, 2.1, 2.1, 2.0, 2.0, 2.1, 2.1, 2.0, 1.9, 1.8, 1.6, 1.3, 1.0, 0.7,
    0.5,
];

/// Hourly weights of unintegrated refugees: shifted towards late evening
/// and night.
pub const REFUGEE_PROFILE: [f64; 24] = [
    2.4, 2.2, 1.8, 1.2, 0.8, 0.5, 0.4, 0.4, 0.4, 0.4, 0.4, 0.5, 0.6, 0.6, 0.5, 0.5, 0.6, 0.8, 1.0, 1.4, 2.0, 2.4, 2.6,
    2.6,
];

fn normalized(p: &[f64; 24]) -> [f64; 24] {
    let s: f64 = p.iter().sum();
    p.map(|v| v / s)
}

/// Per-user plan drawn from the user's own stream.
struct Local {
    home: Vec<AntennaKey>,
    work: AntennaKey,
    rate: f64,
}

fn draw_rate(rng: &mut ChaCha8Rng, p: &PopulationConfig) -> f64 {
    let (lo, hi) = if rng.random::<f64>() < p.active_share {
        p.active_rate
    } else {
        p.inactive_rate
    };
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn user_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One generated call before merging.
#[derive(Clone, Copy)]
struct Call {
    rec: CallRecord,
    in_antenna: AntennaKey,
    duration: u64,
}

struct Ctx<'a> {
    cfg: &'a SynthConfig,
    city: &'a City,
    jan1: NaiveDate,
    n_days: u32,
    local_hours: WeightedIndex<f64>,
    all_antennas: usize,
}

impl Ctx<'_> {
    fn month_of(&self, day: u32) -> usize {
        (self.jan1 + chrono::Days::new(day as u64)).month0() as usize
    }

    fn timestamp(&self, rng: &mut ChaCha8Rng, day: u32, hour: usize) -> NaiveDateTime {
        let date = self.jan1 + chrono::Days::new(day as u64);
        date.and_hms_opt(hour as u32, rng.random_range(0..60), rng.random_range(0..60))
            .expect("valid time")
    }

    fn callee(&self, rng: &mut ChaCha8Rng, p_local: f64) -> UserClass {
        if rng.random::<f64>() < self.cfg.population.unknown_callee_rate {
            UserClass::Unknown
        } else if rng.random::<f64>() < p_local {
            UserClass::Local
        } else {
            UserClass::Refugee
        }
    }

    fn finish(&self, rng: &mut ChaCha8Rng, rec: CallRecord) -> Call {
        let in_antenna = AntennaKey(rng.random_range(0..self.all_antennas) as u32);
        let duration = Exp::new(1.0f64 / 120.0).expect("positive rate").sample(rng).ceil().max(1.0) as u64;
        Call {
            rec,
            in_antenna,
            duration,
        }
    }
}

fn local_plan(ctx: &Ctx<'_>, rng: &mut ChaCha8Rng) -> Local {
    let c = ctx.city;
    let n = c.locals.len();
    let home_d = rng.random_range(0..n);
    let home_a = c.locals[home_d][rng.random_range(0..c.locals[home_d].len())];
    let work_d = rng.random_range(0..n);
    let work = c.locals[work_d][rng.random_range(0..c.locals[work_d].len())];
    Local {
        home: vec![home_a; 12],
        work,
        rate: draw_rate(rng, &ctx.cfg.population),
    }
}

fn simulate_local(ctx: &Ctx<'_>, key: UserKey, plan: &Local, rng: &mut ChaCha8Rng, class: UserClass, p_local: f64) -> Vec<Call> {
    let pop = &ctx.cfg.population;
    let poisson = Poisson::new(plan.rate).expect("positive rate");
    let mut out = Vec::new();
    for day in 0..ctx.n_days {
        let n = poisson.sample(rng) as usize;
        let month = ctx.month_of(day);
        for _ in 0..n {
            let hour = ctx.local_hours.sample(rng);
            let antenna = if is_night_hour(hour as u32) {
                plan.home[month]
            } else if rng.random::<f64>() < pop.work_share {
                plan.work
            } else {
                let d = rng.random_range(0..ctx.city.locals.len());
                ctx.city.locals[d][rng.random_range(0..ctx.city.locals[d].len())]
            };
            let rec = CallRecord {
                caller: key,
                caller_class: class,
                timestamp: ctx.timestamp(rng, day, hour),
                callee: Some(ctx.callee(rng, p_local)),
                site: Site::Antenna(antenna),
            };
            out.push(ctx.finish(rng, rec));
        }
    }
    out
}

/// District index picked by affordability: higher IL reaches pricier
/// districts when `kappa_cost` is high.
fn afford(rng: &mut ChaCha8Rng, il: f64, kappa_cost: f64, n: usize) -> usize {
    let q = kappa_cost * il + (1.0 - kappa_cost) * rng.random::<f64>();
    ((q * n as f64) as usize).min(n - 1)
}

struct RefugeePlan {
    il: f64,
    homes: Vec<usize>,
    integrated_home: Vec<AntennaKey>,
    enclave_home: Vec<AntennaKey>,
    integrated_work: AntennaKey,
    enclave_work: AntennaKey,
    rate: f64,
    hours: WeightedIndex<f64>,
}

fn refugee_plan(ctx: &Ctx<'_>, rng: &mut ChaCha8Rng, locals: &[Local]) -> RefugeePlan {
    let pop = &ctx.cfg.population;
    let c = ctx.city;
    let n = c.locals.len();
    let il: f64 = rng.random();
    let mut homes = Vec::with_capacity(12);
    let mut home = afford(rng, il, pop.kappa_cost, n);
    for m in 0..12 {
        if m > 0 {
            let rank = home as f64 / (n - 1) as f64;
            let p_move = pop.move_base + pop.kappa_cost * pop.move_cost_scale * rank;
            if rng.random::<f64>() < p_move {
                let mut next = afford(rng, il, pop.kappa_cost, n);
                if next == home {
                    next = (home + 1 + rng.random_range(0..n - 1)) % n;
                }
                home = next;
            }
        }
        homes.push(home);
    }
    let pick = |rng: &mut ChaCha8Rng, v: &[AntennaKey]| v[rng.random_range(0..v.len())];
    let integrated_home = homes.iter().map(|&d| pick(rng, &c.locals[d])).collect();
    let enclave_home = homes.iter().map(|&d| pick(rng, &c.enclaves[d])).collect();
    let integrated_work = locals[rng.random_range(0..locals.len())].work;
    let ed = rng.random_range(0..n);
    let enclave_work = pick(rng, &c.enclaves[ed]);
    let a = pop.kappa_routine * il;
    let (pl, pr) = (normalized(&LOCAL_PROFILE), normalized(&REFUGEE_PROFILE));
    let weights: Vec<f64> = (0..24).map(|h| (1.0 - a) * pr[h] + a * pl[h]).collect();
    RefugeePlan {
        il,
        homes,
        integrated_home,
        enclave_home,
        integrated_work,
        enclave_work,
        rate: draw_rate(rng, pop),
        hours: WeightedIndex::new(weights).expect("positive weights"),
    }
}

fn simulate_refugee(ctx: &Ctx<'_>, key: UserKey, plan: &RefugeePlan, rng: &mut ChaCha8Rng) -> Vec<Call> {
    let pop = &ctx.cfg.population;
    let poisson = Poisson::new(plan.rate).expect("positive rate");
    let base = pop.base_overlap + (1.0 - pop.base_overlap) * pop.kappa_mobility * plan.il;
    let mut out = Vec::new();
    for day in 0..ctx.n_days {
        let date = ctx.jan1 + chrono::Days::new(day as u64);
        let factor: f64 = ctx
            .cfg
            .events
            .iter()
            .filter(|e| date > e.date)
            .map(|e| e.factor(plan.il))
            .product();
        let p_overlap = base * factor;
        let month = date.month0() as usize;
        let n = poisson.sample(rng) as usize;
        for _ in 0..n {
            let hour = plan.hours.sample(rng);
            let overlap = rng.random::<f64>() < p_overlap;
            let antenna = match (is_night_hour(hour as u32), overlap) {
                (true, true) => plan.integrated_home[month],
                (true, false) => plan.enclave_home[month],
                (false, true) => plan.integrated_work,
                (false, false) => plan.enclave_work,
            };
            let rec = CallRecord {
                caller: key,
                caller_class: UserClass::Refugee,
                timestamp: ctx.timestamp(rng, day, hour),
                callee: Some(ctx.callee(rng, plan.il)),
                site: Site::Antenna(antenna),
            };
            out.push(ctx.finish(rng, rec));
        }
    }
    out
}

/// Generates the full synthetic dataset. Output depends only on `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    let city = build_city(&cfg.city)?;
    let pop = &cfg.population;
    let ctx = Ctx {
        cfg,
        city: &city,
        jan1: NaiveDate::from_ymd_opt(cfg.year, 1, 1).expect("validated"),
        n_days: cfg.n_days(),
        local_hours: WeightedIndex::new(LOCAL_PROFILE).expect("positive weights"),
        all_antennas: city.registry.antennas().len(),
    };

    let mut users = UserTable::new();
    let refugee_keys: Vec<UserKey> = (0..pop.n_refugees)
        .map(|i| users.intern(&format!("1{i:06}")).expect("valid id"))
        .collect();
    let local_keys: Vec<UserKey> = (0..pop.n_locals)
        .map(|i| users.intern(&format!("2{i:06}")).expect("valid id"))
        .collect();

    // Streams: locals use 1..=n_locals, refugees follow.
    let locals: Vec<Local> = (0..pop.n_locals)
        .map(|i| local_plan(&ctx, &mut user_rng(cfg.seed, 1 + i as u64)))
        .collect();
    let mut local_calls: Vec<Vec<Call>> = (0..pop.n_locals)
        .into_par_iter()
        .map(|i| {
            let mut rng = user_rng(cfg.seed, (1u64 << 32) + i as u64);
            simulate_local(&ctx, local_keys[i], &locals[i], &mut rng, UserClass::Local, 0.9)
        })
        .collect();

    let mut ground_truth = Vec::with_capacity(pop.n_refugees);
    let refugee_calls: Vec<Vec<Call>> = if pop.identical_traces {
        // One template trace shared by every refugee; only callee classes
        // follow each refugee's own IL.
        let template = simulate_local(
            &ctx,
            refugee_keys[0],
            &locals[0],
            &mut user_rng(cfg.seed, 4u64 << 32),
            UserClass::Refugee,
            0.0,
        );
        let home = city.registry.district(city.registry.antenna(locals[0].home[0]).district).id.clone();
        (0..pop.n_refugees)
            .map(|i| {
                let mut rng = user_rng(cfg.seed, (2u64 << 32) + i as u64);
                let il: f64 = rng.random();
                ground_truth.push(GroundTruthRow {
                    user_id: format!("1{i:06}"),
                    il_target: il,
                    home_district: home.clone(),
                });
                template
                    .iter()
                    .map(|c| {
                        let mut c = *c;
                        c.rec.caller = refugee_keys[i];
                        c.rec.callee = Some(ctx.callee(&mut rng, il));
                        c
                    })
                    .collect()
            })
            .collect()
    } else {
        let plans: Vec<RefugeePlan> = (0..pop.n_refugees)
            .map(|i| refugee_plan(&ctx, &mut user_rng(cfg.seed, (2u64 << 32) + i as u64), &locals))
            .collect();
        for (i, p) in plans.iter().enumerate() {
            ground_truth.push(GroundTruthRow {
                user_id: format!("1{i:06}"),
                il_target: p.il,
                home_district: city.registry.district(city.district_keys[p.homes[0]]).id.clone(),
            });
        }
        plans
            .par_iter()
            .enumerate()
            .map(|(i, plan)| {
                let mut rng = user_rng(cfg.seed, (3u64 << 32) + i as u64);
                simulate_refugee(&ctx, refugee_keys[i], plan, &mut rng)
            })
            .collect()
    };

    let mut calls: Vec<Call> = Vec::with_capacity(
        local_calls.iter().map(Vec::len).sum::<usize>() + refugee_calls.iter().map(Vec::len).sum::<usize>(),
    );
    for v in refugee_calls.into_iter().chain(local_calls.drain(..)) {
        calls.extend(v);
    }
    calls.par_sort_by_key(|c| (c.rec.timestamp, c.rec.caller));

    let atd = aggregate_atd(&calls);
    let fgmd: Vec<CallRecord> = calls.iter().map(|c| c.rec).collect();
    drop(calls);
    let cgmd: Vec<CallRecord> = fgmd
        .iter()
        .map(|r| CallRecord {
            callee: None,
            site: Site::District(r.site.district(&city.registry)),
            ..*r
        })
        .collect();
    let enclave_antennas = city.enclaves.iter().flatten().copied().collect();
    Ok(SynthOutput {
        registry: city.registry,
        users,
        fgmd,
        cgmd,
        atd,
        ground_truth,
        enclave_antennas,
    })
}

fn hour_of(t: NaiveDateTime) -> NaiveDateTime {
    t.date().and_hms_opt(t.hour(), 0, 0).expect("valid hour")
}

fn aggregate_atd(calls: &[Call]) -> Vec<TrafficRecord> {
    let mut agg: HashMap<(NaiveDateTime, AntennaKey, AntennaKey), [u64; 4]> = HashMap::new();
    for c in calls {
        let out = c.rec.site.antenna().expect("FGMD carries antennas");
        let e = agg.entry((hour_of(c.rec.timestamp), out, c.in_antenna)).or_default();
        let refugee = u64::from(c.rec.caller_class == UserClass::Refugee);
        e[0] += 1;
        e[1] += refugee;
        e[2] += c.duration;
        e[3] += refugee * c.duration;
    }
    let mut rows: Vec<TrafficRecord> = agg
        .into_iter()
        .map(|((timestamp, out_antenna, in_antenna), v)| TrafficRecord {
            timestamp,
            out_antenna,
            in_antenna,
            total_calls: v[0],
            refugee_calls: v[1],
            total_duration: v[2],
            refugee_duration: v[3],
        })
        .collect();
    rows.sort_by_key(|r| (r.timestamp, r.out_antenna, r.in_antenna));
    rows
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConsistencyReport {
    pub antenna_hours: usize,
    pub calls: u64,
}

/// Checks that ATD call totals per (antenna, hour) equal the FGMD counts,
/// both for all callers and for refugees.
pub fn consistency_check(
    fgmd: &[CallRecord],
    atd: &[TrafficRecord],
    registry: &Registry,
) -> Result<ConsistencyReport, SynthError> {
    let mut from_fgmd: BTreeMap<(NaiveDateTime, AntennaKey), (u64, u64)> = BTreeMap::new();
    for r in fgmd {
        let Some(a) = r.site.antenna() else { continue };
        let e = from_fgmd.entry((hour_of(r.timestamp), a)).or_default();
        e.0 += 1;
        e.1 += u64::from(r.caller_class == UserClass::Refugee);
    }
    let mut from_atd: BTreeMap<(NaiveDateTime, AntennaKey), (u64, u64)> = BTreeMap::new();
    for t in atd {
        let e = from_atd.entry((t.timestamp, t.out_antenna)).or_default();
        e.0 += t.total_calls;
        e.1 += t.refugee_calls;
    }
    let keys: std::collections::BTreeSet<_> = from_fgmd.keys().chain(from_atd.keys()).copied().collect();
    for k in &keys {
        let f = from_fgmd.get(k).copied().unwrap_or_default();
        let a = from_atd.get(k).copied().unwrap_or_default();
        if f != a {
            return Err(SynthError::Inconsistent {
                antenna: registry.antenna(k.1).id.clone(),
                hour: crate::cdr::format_timestamp(k.0),
                fgmd_calls: f.0,
                fgmd_refugee: f.1,
                atd_calls: a.0,
                atd_refugee: a.1,
            });
        }
    }
    Ok(ConsistencyReport {
        antenna_hours: keys.len(),
        calls: from_fgmd.values().map(|v| v.0).sum(),
    })
}

pub const ANTENNAS_FILE: &str = "antennas.csv";
pub const DISTRICTS_FILE: &str = "districts.csv";
pub const FGMD_FILE: &str = "fgmd.csv";
pub const CGMD_FILE: &str = "cgmd.csv";
pub const ATD_FILE: &str = "atd.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";

impl SynthOutput {
    /// Writes every dataset in its file schema under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), SynthError> {
        let io = |path: &Path, e: std::io::Error| SynthError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let write = |name: &str, header: &str, body: &mut dyn FnMut(&mut dyn Write) -> std::io::Result<()>| {
            let path = dir.join(name);
            let f = fs::File::create(&path).map_err(|e| io(&path, e))?;
            let mut w = BufWriter::with_capacity(1 << 20, f);
            let res = (|| {
                if !header.is_empty() {
                    writeln!(w, "{header}")?;
                }
                body(&mut w)?;
                w.flush()
            })();
            res.map_err(|e| io(&path, e))
        };
        write(ANTENNAS_FILE, "", &mut |w| w.write_all(self.registry.to_antenna_csv().as_bytes()))?;
        write(DISTRICTS_FILE, "", &mut |w| w.write_all(self.registry.to_district_csv().as_bytes()))?;
        write(FGMD_FILE, FGMD_HEADER, &mut |w| {
            for r in &self.fgmd {
                writeln!(w, "{}", format_fgmd(r, &self.users, &self.registry))?;
            }
            Ok(())
        })?;
        write(CGMD_FILE, CGMD_HEADER, &mut |w| {
            for r in &self.cgmd {
                writeln!(w, "{}", format_cgmd(r, &self.users, &self.registry))?;
            }
            Ok(())
        })?;
        write(ATD_FILE, ATD_HEADER, &mut |w| {
            for r in &self.atd {
                writeln!(w, "{}", format_atd(r, &self.registry))?;
            }
            Ok(())
        })?;
        write(GROUND_TRUTH_FILE, GROUND_TRUTH_HEADER, &mut |w| {
            for g in &self.ground_truth {
                writeln!(w, "{},{},{}", g.user_id, g.il_target, g.home_district)?;
            }
            Ok(())
        })?;
        Ok(())
    }
}
