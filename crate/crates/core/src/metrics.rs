//! Per-user and per-district integration metrics: interaction level (IL),
//! calling regularity (CR), residential inclusion (RI), district
//! attractiveness (DA) and mobility similarity (MS).

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Datelike, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdr::{CallRecord, DistrictKey, Registry, TrafficRecord, UserClass, UserKey};
use crate::scalar::Scalar;
use crate::stigmergy::{trail_similarity, CellDeposit, StepWindow, StigmergyError, TrailEngine};

pub const HOURS: usize = 24;
pub const IL_BINS: usize = 5;
pub const NIGHT_START_HOUR: u32 = 20;
pub const NIGHT_END_HOUR: u32 = 8;
pub const DEFAULT_MIN_RESIDENT_MONTHS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no calls")]
    NoCalls,
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("no active locals")]
    NoLocals,
    #[error("zero calling pattern")]
    ZeroVector,
    #[error("no night traffic in district {district} month {month}")]
    NoNightTraffic { district: String, month: u32 },
    #[error("no residents in district {district} month {month}")]
    NoResidents { district: String, month: u32 },
    #[error("month {0} has no following month in the study year")]
    LastMonth(u32),
    #[error("groups differ in size ({refugees} vs {locals}) or are empty")]
    UnequalGroups { refugees: usize, locals: usize },
    #[error("group {0} is empty")]
    EmptyGroup(String),
    #[error(transparent)]
    Stigmergy(#[from] StigmergyError),
}

/// Share of a refugee's calls that go to locals. Records with an unknown or
/// missing callee class are ignored.
pub fn interaction_level<T: Scalar>(records: &[CallRecord]) -> Result<T, MetricsError> {
    let (mut to_local, mut to_refugee) = (0usize, 0usize);
    for r in records {
        match r.callee {
            Some(UserClass::Local) => to_local += 1,
            Some(UserClass::Refugee) => to_refugee += 1,
            _ => {}
        }
    }
    if to_local + to_refugee == 0 {
        return Err(MetricsError::NoCalls);
    }
    Ok(T::from_count(to_local) / T::from_count(to_local + to_refugee))
}

/// Bin index 1..=5 of width 0.2, left-closed, top bin closed.
pub fn il_bin<T: Scalar>(il: T) -> Result<usize, MetricsError> {
    il_group(il, IL_BINS)
}

/// Index 1..=n of the equal-width group holding `il`, left-closed with the
/// top group closed.
pub fn il_group<T: Scalar>(il: T, n: usize) -> Result<usize, MetricsError> {
    assert!(n > 0, "need at least one group");
    if !(il >= T::zero() && il <= T::one()) {
        return Err(MetricsError::OutOfRange(il.as_f64()));
    }
    // Edges are k/n, a correctly rounded quotient, so 0.2, 0.4, ... are the
    // same doubles as the literals and land in the upper bin.
    Ok(1 + (1..n).filter(|&k| il >= T::from_count(k) / T::from_count(n)).count())
}

/// Centre of group `k` of `n`.
pub fn il_group_midpoint(k: usize, n: usize) -> f64 {
    (k as f64 - 0.5) / n as f64
}

/// Half-open `[lo, hi)` bounds of a bin; bin 5 is reported as `[0.8, 1.0]`.
pub fn il_bin_bounds(bin: usize) -> (f64, f64) {
    assert!((1..=IL_BINS).contains(&bin), "bin out of range");
    let lo = [0.0, 0.2, 0.4, 0.6, 0.8][bin - 1];
    let hi = [0.2, 0.4, 0.6, 0.8, 1.0][bin - 1];
    (lo, hi)
}

/// Hourly call profile normalized to mean 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CallingPattern<T = f64> {
    pub values: [T; HOURS],
    /// Hours with at least one call.
    pub observed: [bool; HOURS],
}

impl<T: Scalar> CallingPattern<T> {
    pub fn from_counts(counts: &[u64; HOURS]) -> Result<Self, MetricsError> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(MetricsError::NoCalls);
        }
        let per_hour = T::lit(total as f64) / T::lit(HOURS as f64);
        let mut values = [T::zero(); HOURS];
        let mut observed = [false; HOURS];
        for h in 0..HOURS {
            values[h] = T::lit(counts[h] as f64) / per_hour;
            observed[h] = counts[h] > 0;
        }
        Ok(Self { values, observed })
    }

    pub fn mean(&self) -> T {
        self.values.iter().copied().sum::<T>() / T::lit(HOURS as f64)
    }
}

pub fn hour_counts(records: &[CallRecord]) -> [u64; HOURS] {
    let mut counts = [0u64; HOURS];
    for r in records {
        counts[r.timestamp.hour() as usize] += 1;
    }
    counts
}

pub fn calling_pattern<T: Scalar>(records: &[CallRecord]) -> Result<CallingPattern<T>, MetricsError> {
    CallingPattern::from_counts(&hour_counts(records))
}

/// Unweighted mean of several patterns; a slot counts as observed when any
/// input observed it.
pub fn mean_pattern<T: Scalar>(patterns: &[CallingPattern<T>]) -> Result<CallingPattern<T>, MetricsError> {
    if patterns.is_empty() {
        return Err(MetricsError::NoLocals);
    }
    let n = T::from_count(patterns.len());
    let mut values = [T::zero(); HOURS];
    let mut observed = [false; HOURS];
    for p in patterns {
        for h in 0..HOURS {
            values[h] += p.values[h];
            observed[h] |= p.observed[h];
        }
    }
    for v in &mut values {
        *v /= n;
    }
    Ok(CallingPattern { values, observed })
}

/// Local calling pattern (LCP): mean of the per-user patterns of the given
/// locals. Users without records are skipped.
pub fn local_average_pattern<'a, T: Scalar>(
    locals: impl IntoIterator<Item = &'a [CallRecord]>,
) -> Result<CallingPattern<T>, MetricsError> {
    let patterns: Vec<CallingPattern<T>> = locals
        .into_iter()
        .filter(|r| !r.is_empty())
        .map(calling_pattern)
        .collect::<Result<_, _>>()?;
    mean_pattern(&patterns)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrMissingMode {
    /// Hours without calls enter the cosine as zeros.
    #[default]
    Zeros,
    /// Hours the user never called in are left out of both vectors.
    PairwiseComplete,
}

/// Cosine similarity between a user's pattern and the local pattern.
pub fn calling_regularity<T: Scalar>(
    cp: &CallingPattern<T>,
    lcp: &CallingPattern<T>,
    mode: CrMissingMode,
) -> Result<T, MetricsError> {
    let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
    for h in 0..HOURS {
        if mode == CrMissingMode::PairwiseComplete && !cp.observed[h] {
            continue;
        }
        let (a, b) = (cp.values[h], lcp.values[h]);
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    if na == T::zero() || nb == T::zero() {
        return Err(MetricsError::ZeroVector);
    }
    // Rounding can push identical vectors a hair above 1.
    Ok((dot / (na * nb).sqrt()).min(T::one()).max(T::zero()))
}

pub fn is_night_hour(hour: u32) -> bool {
    hour >= NIGHT_START_HOUR || hour < NIGHT_END_HOUR
}

/// District of a user-month: modal district of the night calls, ties to the
/// lowest district id. `None` without night calls.
pub fn infer_residence(records: &[CallRecord], registry: &Registry) -> Option<DistrictKey> {
    let mut counts: BTreeMap<DistrictKey, usize> = BTreeMap::new();
    for r in records.iter().filter(|r| is_night_hour(r.timestamp.hour())) {
        *counts.entry(r.site.district(registry)).or_default() += 1;
    }
    // max_by_key returns the last maximum; iterate in reverse so the lowest key wins.
    counts.into_iter().rev().max_by_key(|&(_, c)| c).map(|(d, _)| d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Residence {
    pub user: UserKey,
    /// Calendar month 1..=12.
    pub month: u32,
    pub district: DistrictKey,
}

/// Residences indexed by month.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResidenceTable {
    pub by_month: BTreeMap<u32, BTreeMap<UserKey, DistrictKey>>,
}

impl ResidenceTable {
    pub fn from_residences(residences: impl IntoIterator<Item = Residence>) -> Self {
        let mut t = Self::default();
        for r in residences {
            t.by_month.entry(r.month).or_default().insert(r.user, r.district);
        }
        t
    }

    /// Infers a residence for every user-month of `records`.
    pub fn infer(records: &[CallRecord], registry: &Registry) -> Self {
        let mut night: BTreeMap<(u32, UserKey), BTreeMap<DistrictKey, usize>> = BTreeMap::new();
        for r in records.iter().filter(|r| is_night_hour(r.timestamp.hour())) {
            *night
                .entry((r.timestamp.month(), r.caller))
                .or_default()
                .entry(r.site.district(registry))
                .or_default() += 1;
        }
        let mut t = Self::default();
        for ((month, user), counts) in night {
            let (district, _) = counts.into_iter().rev().max_by_key(|&(_, c)| c).expect("non-empty");
            t.by_month.entry(month).or_default().insert(user, district);
        }
        t
    }

    pub fn get(&self, user: UserKey, month: u32) -> Option<DistrictKey> {
        self.by_month.get(&month).and_then(|m| m.get(&user)).copied()
    }

    pub fn residents(&self, district: DistrictKey, month: u32) -> BTreeSet<UserKey> {
        self.by_month
            .get(&month)
            .map(|m| m.iter().filter(|(_, d)| **d == district).map(|(u, _)| *u).collect())
            .unwrap_or_default()
    }

    /// Keeps only the given users.
    pub fn restricted(&self, users: &BTreeSet<UserKey>) -> Self {
        Self {
            by_month: self
                .by_month
                .iter()
                .map(|(m, r)| (*m, r.iter().filter(|(u, _)| users.contains(u)).map(|(u, d)| (*u, *d)).collect()))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Residence> + '_ {
        self.by_month.iter().flat_map(|(&month, m)| {
            m.iter().map(move |(&user, &district)| Residence { user, month, district })
        })
    }
}

/// Users with at least `min_months` resolved residences.
pub fn long_term_residents(residences: &ResidenceTable, min_months: usize) -> BTreeSet<UserKey> {
    let mut months: BTreeMap<UserKey, usize> = BTreeMap::new();
    for r in residences.iter() {
        *months.entry(r.user).or_default() += 1;
    }
    months.into_iter().filter(|&(_, n)| n >= min_months).map(|(u, _)| u).collect()
}

/// Night-time refugee and total call counts summed over a district's
/// antennas, keyed by (district, month).
pub fn night_traffic(traffic: &[TrafficRecord], registry: &Registry) -> BTreeMap<(DistrictKey, u32), (u64, u64)> {
    let mut out: BTreeMap<(DistrictKey, u32), (u64, u64)> = BTreeMap::new();
    for t in traffic.iter().filter(|t| is_night_hour(t.timestamp.hour())) {
        let d = registry.antenna(t.out_antenna).district;
        let e = out.entry((d, t.timestamp.month())).or_default();
        e.0 += t.refugee_calls;
        e.1 += t.total_calls;
    }
    out
}

/// Share of a district's night calls made by refugees in a month.
pub fn residential_inclusion<T: Scalar>(
    traffic: &[TrafficRecord],
    registry: &Registry,
    district: DistrictKey,
    month: u32,
) -> Result<T, MetricsError> {
    let agg = night_traffic(traffic, registry);
    ri_from_night_traffic(&agg, registry, district, month)
}

pub fn ri_from_night_traffic<T: Scalar>(
    agg: &BTreeMap<(DistrictKey, u32), (u64, u64)>,
    registry: &Registry,
    district: DistrictKey,
    month: u32,
) -> Result<T, MetricsError> {
    match agg.get(&(district, month)) {
        Some(&(refugee, total)) if total > 0 => Ok(T::lit(refugee as f64) / T::lit(total as f64)),
        _ => Err(MetricsError::NoNightTraffic {
            district: registry.district(district).id.clone(),
            month,
        }),
    }
}

/// Share of a district's residents in `month` who still reside there the
/// next month. A user with no residence next month counts as departed.
pub fn district_attractiveness<T: Scalar>(
    residences: &ResidenceTable,
    registry: &Registry,
    district: DistrictKey,
    month: u32,
) -> Result<T, MetricsError> {
    if month >= 12 {
        return Err(MetricsError::LastMonth(month));
    }
    let now = residences.residents(district, month);
    if now.is_empty() {
        return Err(MetricsError::NoResidents {
            district: registry.district(district).id.clone(),
            month,
        });
    }
    let stay = now
        .iter()
        .filter(|u| residences.get(**u, month + 1) == Some(district))
        .count();
    Ok(T::from_count(stay) / T::from_count(now.len()))
}

/// Draws every group down to the smallest group's size, without
/// replacement. Each group gets its own random stream derived from `seed`
/// and its position, so results do not depend on the other groups' sizes.
pub fn subsample_equal_groups<K: Ord + Clone + std::fmt::Debug>(
    groups: &BTreeMap<K, Vec<UserKey>>,
    seed: u64,
) -> Result<BTreeMap<K, Vec<UserKey>>, MetricsError> {
    if let Some((k, _)) = groups.iter().find(|(_, g)| g.is_empty()) {
        return Err(MetricsError::EmptyGroup(format!("{k:?}")));
    }
    let Some(min) = groups.values().map(Vec::len).min() else {
        return Ok(BTreeMap::new());
    };
    let mut out = BTreeMap::new();
    for (i, (k, members)) in groups.iter().enumerate() {
        let mut members = members.clone();
        members.sort();
        members.dedup();
        let picked = if members.len() <= min {
            members
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut idx = rand::seq::index::sample(&mut rng, members.len(), min).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|j| members[j]).collect()
        };
        out.insert(k.clone(), picked);
    }
    Ok(out)
}

/// Similarity of the trails left by two equally sized groups over `window`.
/// `deposits` holds every user's projected samples.
pub fn mobility_similarity<T: Scalar>(
    refugees: &[UserKey],
    locals: &[UserKey],
    deposits: &BTreeMap<UserKey, Vec<CellDeposit>>,
    engine: &TrailEngine<T>,
    window: StepWindow,
) -> Result<T, MetricsError> {
    if refugees.len() != locals.len() || refugees.is_empty() {
        return Err(MetricsError::UnequalGroups {
            refugees: refugees.len(),
            locals: locals.len(),
        });
    }
    let a = engine.build_cells(&group_deposits(refugees, deposits), window);
    let b = engine.build_cells(&group_deposits(locals, deposits), window);
    Ok(trail_similarity(&a, &b)?)
}

pub fn group_deposits(users: &[UserKey], deposits: &BTreeMap<UserKey, Vec<CellDeposit>>) -> Vec<CellDeposit> {
    users
        .iter()
        .filter_map(|u| deposits.get(u))
        .flatten()
        .copied()
        .collect()
}
