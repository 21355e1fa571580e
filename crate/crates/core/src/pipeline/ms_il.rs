use std::collections::{BTreeMap, BTreeSet};

use chrono::{Datelike, NaiveDate, Timelike};
use rayon::prelude::*;

use super::{derive_seed, metrics_reason, stats_reason, MsAxis, PipelineError, Prepared, SeedLog, Skip};
use crate::cdr::{Site, UserKey};
use crate::geo::{GeoPoint, GridSpec};
use crate::metrics::{group_deposits, il_group_midpoint, mobility_similarity, subsample_equal_groups};
use crate::stats::{mean, pearson, quartiles};
use crate::stigmergy::{CellDeposit, StepWindow, TrailEngine};

/// IL group or the local comparison group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupKey {
    Il(usize),
    Local,
}

impl GroupKey {
    pub fn label(self) -> String {
        match self {
            GroupKey::Il(k) => format!("il{k}"),
            GroupKey::Local => "local".into(),
        }
    }
}

/// MS of one IL group on one day and trial.
#[derive(Debug, Clone, PartialEq)]
pub struct MsDailyRow {
    pub date: NaiveDate,
    pub trial: usize,
    pub group: usize,
    pub size: usize,
    pub mean_il: f64,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsIlCorrRow {
    pub date: NaiveDate,
    pub trial: usize,
    pub n: usize,
    pub r: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSizeRow {
    pub period: u32,
    pub group: String,
    pub members: usize,
    pub sampled: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrailDump {
    pub date: NaiveDate,
    pub group: String,
    pub metadata: String,
    pub csv: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MsIlResult {
    pub daily: Vec<MsDailyRow>,
    pub corr: Vec<MsIlCorrRow>,
    /// `(n, q1, median, q3)` of the coefficients.
    pub summary: Option<(usize, f64, f64, f64)>,
    /// Mean over trials and days of each group's MS, per period.
    pub period_ms: Vec<(u32, usize, f64)>,
    pub group_sizes: Vec<GroupSizeRow>,
    pub dumps: Vec<TrailDump>,
    pub skips: Vec<Skip>,
    pub seeds: SeedLog,
}

impl MsIlResult {
    /// Mean MS over trials per (date, group).
    pub fn daily_means(&self) -> BTreeMap<(NaiveDate, usize), f64> {
        let mut acc: BTreeMap<(NaiveDate, usize), (f64, usize)> = BTreeMap::new();
        for r in &self.daily {
            let e = acc.entry((r.date, r.group)).or_default();
            e.0 += r.ms;
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

/// Raster covering the study area's antennas with room for a full mark.
pub fn area_grid(prep: &Prepared) -> Result<GridSpec, PipelineError> {
    let reg = &prep.data.registry;
    let e = &prep.cfg.engine;
    let points: Vec<GeoPoint> = reg
        .antennas()
        .iter()
        .filter(|a| prep.area.contains(&a.district))
        .map(|a| a.location)
        .collect();
    let pad = (e.base_radius_m / e.cell_size_m).ceil() as usize + 1;
    GridSpec::covering(&points, e.cell_size_m, pad).map_err(|x| PipelineError::Input(format!("study area grid: {x}")))
}

/// Projected FGMD samples per user, in step order. The step of a call is
/// its day of year times steps per day plus its time-of-day step.
pub fn user_deposits(prep: &Prepared, engine: &TrailEngine) -> BTreeMap<UserKey, Vec<CellDeposit>> {
    let reg = &prep.data.registry;
    let e = &prep.cfg.engine;
    let spd = u64::from(e.steps_per_day());
    let cells: Vec<_> = reg.antennas().iter().map(|a| engine.spec().project(a.location).ok()).collect();
    let mut out: BTreeMap<UserKey, Vec<CellDeposit>> = BTreeMap::new();
    for r in prep.fgmd_area.iter() {
        let Site::Antenna(a) = r.site else { continue };
        let Some(cell) = cells[a.index()] else { continue };
        let t = r.timestamp;
        let minute = t.hour() * 60 + t.minute();
        let step = u64::from(t.ordinal0()) * spd + u64::from(minute / e.step_minutes);
        out.entry(r.caller).or_default().push(CellDeposit { step, cell });
    }
    for v in out.values_mut() {
        v.sort_unstable();
    }
    out
}

pub fn day_window(date: NaiveDate, steps_per_day: u32) -> StepWindow {
    let spd = u64::from(steps_per_day);
    let first = u64::from(date.ordinal0()) * spd;
    StepWindow::new(first, first + spd - 1).expect("non-empty day")
}

fn day_slice(deposits: &[CellDeposit], w: StepWindow) -> &[CellDeposit] {
    let lo = deposits.partition_point(|d| d.step < w.first);
    let hi = deposits.partition_point(|d| d.step <= w.last);
    &deposits[lo..hi]
}

struct DayOutcome {
    daily: Vec<MsDailyRow>,
    corr: Vec<MsIlCorrRow>,
    dumps: Vec<TrailDump>,
    skips: Vec<Skip>,
    seeds: SeedLog,
}

/// Daily MS of each IL group against an equally sized local group, and its
/// correlation with the groups' IL, over `n_trials` resamplings.
pub fn run_ms_il(prep: &Prepared) -> Result<MsIlResult, PipelineError> {
    let cfg = prep.cfg;
    let engine = TrailEngine::new(area_grid(prep)?, cfg.engine.mark(), cfg.engine.policy())
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let deposits = user_deposits(prep, &engine);
    let n_groups = cfg.stats.n_groups;
    let dump_dates: BTreeSet<NaiveDate> = cfg.output.trail_dump_dates.iter().copied().collect();

    let mut out = MsIlResult::default();
    let mut days: Vec<(usize, NaiveDate)> = Vec::new();
    for (pi, pd) in prep.periods.iter().enumerate() {
        let mut groups: BTreeMap<GroupKey, Vec<UserKey>> = (1..=n_groups).map(|k| (GroupKey::Il(k), Vec::new())).collect();
        for (u, m) in &pd.refugees {
            groups.get_mut(&GroupKey::Il(m.group)).expect("group in range").push(*u);
        }
        groups.insert(GroupKey::Local, pd.active_locals.clone());
        let min = groups.values().map(Vec::len).min().unwrap_or(0);
        for (k, g) in &groups {
            out.group_sizes.push(GroupSizeRow {
                period: pd.period.index,
                group: k.label(),
                members: g.len(),
                sampled: min,
            });
        }
        let mut d = pd.period.start;
        while d < pd.period.end() {
            days.push((pi, d));
            d = d.succ_opt().expect("date in range");
        }
    }

    let outcomes: Vec<DayOutcome> = days
        .par_iter()
        .map(|&(pi, date)| ms_day(prep, &engine, &deposits, pi, date, dump_dates.contains(&date)))
        .collect();
    for o in outcomes {
        out.daily.extend(o.daily);
        out.corr.extend(o.corr);
        out.dumps.extend(o.dumps);
        out.skips.extend(o.skips);
        out.seeds.extend(o.seeds);
    }
    let rs: Vec<f64> = out.corr.iter().map(|c| c.r).collect();
    out.summary = quartiles(&rs).ok().map(|(a, b, c)| (rs.len(), a, b, c));

    let means = out.daily_means();
    let mut per_period: BTreeMap<(u32, usize), Vec<f64>> = BTreeMap::new();
    for ((date, g), v) in means {
        if let Some(pd) = prep.period_data(date) {
            per_period.entry((pd.period.index, g)).or_default().push(v);
        }
    }
    out.period_ms = per_period
        .into_iter()
        .map(|((p, g), v)| (p, g, mean(&v).expect("non-empty")))
        .collect();
    Ok(out)
}

fn ms_day(
    prep: &Prepared,
    engine: &TrailEngine,
    deposits: &BTreeMap<UserKey, Vec<CellDeposit>>,
    pi: usize,
    date: NaiveDate,
    dump: bool,
) -> DayOutcome {
    let cfg = prep.cfg;
    let pd = &prep.periods[pi];
    let n_groups = cfg.stats.n_groups;
    let window = day_window(date, cfg.engine.steps_per_day());
    let mut o = DayOutcome {
        daily: Vec::new(),
        corr: Vec::new(),
        dumps: Vec::new(),
        skips: Vec::new(),
        seeds: SeedLog::default(),
    };
    let mut groups: BTreeMap<GroupKey, Vec<UserKey>> = (1..=n_groups).map(|k| (GroupKey::Il(k), Vec::new())).collect();
    for (u, m) in &pd.refugees {
        groups.get_mut(&GroupKey::Il(m.group)).expect("group in range").push(*u);
    }
    groups.insert(GroupKey::Local, pd.active_locals.clone());

    for trial in 0..cfg.stats.n_trials {
        let item = format!("{date} trial {trial}");
        let seed = derive_seed(cfg.stats.seed, "ms_il", &[u64::from(date.ordinal0()), trial as u64]);
        let sampled = match subsample_equal_groups(&groups, seed) {
            Ok(s) => s,
            Err(e) => {
                o.skips.push(Skip::new("ms_il", item, metrics_reason(&e), e.to_string()));
                continue;
            }
        };
        o.seeds.record("ms_il", &item, seed);
        let day_map: BTreeMap<UserKey, Vec<CellDeposit>> = sampled
            .values()
            .flatten()
            .filter_map(|u| deposits.get(u).map(|d| (*u, day_slice(d, window).to_vec())))
            .collect();
        let locals = &sampled[&GroupKey::Local];
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for k in 1..=n_groups {
            let members = &sampled[&GroupKey::Il(k)];
            match mobility_similarity(members, locals, &day_map, engine, window) {
                Ok(ms) => {
                    let mean_il = mean(&members.iter().map(|u| pd.refugees[u].il).collect::<Vec<_>>()).expect("non-empty");
                    o.daily.push(MsDailyRow {
                        date,
                        trial,
                        group: k,
                        size: members.len(),
                        mean_il,
                        ms,
                    });
                    xs.push(match cfg.stats.ms_x {
                        MsAxis::GroupMeanIl => mean_il,
                        MsAxis::BinMidpoint => il_group_midpoint(k, n_groups),
                    });
                    ys.push(ms);
                }
                Err(e) => o.skips.push(Skip::new("ms_il", format!("{item} il{k}"), metrics_reason(&e), e.to_string())),
            }
        }
        let pseed = derive_seed(cfg.stats.seed, "ms_il_pearson", &[u64::from(date.ordinal0()), trial as u64]);
        match pearson(&xs, &ys, cfg.stats.n_perm, pseed) {
            Ok(c) => {
                o.seeds.record("ms_il_pearson", &item, pseed);
                o.corr.push(MsIlCorrRow {
                    date,
                    trial,
                    n: c.n,
                    r: c.r,
                    p: c.p,
                });
            }
            Err(e) => o.skips.push(Skip::new("ms_il", item, stats_reason(&e), e.to_string())),
        }
        if dump && trial == 0 {
            for (k, members) in &sampled {
                let trail = engine.build_cells(&group_deposits(members, &day_map), window);
                o.dumps.push(TrailDump {
                    date,
                    group: k.label(),
                    metadata: trail.metadata(),
                    csv: trail.to_csv(),
                });
            }
        }
    }
    o
}
