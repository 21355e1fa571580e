use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::dataset::{by_caller, sorted_by_caller};
use super::{derive_seed, metrics_reason, stats_reason, PipelineError, Prepared, SeedLog, Skip, WeightKind};
use super::dataset::FunnelRow;
use crate::cdr::{filter_active_users, CallRecord, DistrictKey, PeriodScheme, UserClass, UserKey};
use crate::geo::district_distance_matrix;
use crate::metrics::{
    calling_pattern, calling_regularity, district_attractiveness, local_average_pattern, long_term_residents,
    mean_pattern, night_traffic, ri_from_night_traffic, CallingPattern, ResidenceTable,
};
use crate::stats::{
    build_weight_matrix, mean, min_max_normalize, pearson, quartiles, series_distance, spatial_lag_regress,
    SeriesMeasure, WeightConstruction, WeightMatrix,
};

pub const RI_HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct DistrictMonthRow {
    pub district: String,
    pub month: u32,
    pub ri: Option<f64>,
    pub da: Option<f64>,
    pub mean_cr: Option<f64>,
    pub rent_cost: Option<f64>,
    pub n_residents: usize,
}

/// Monthly RI against monthly mean CR within one district.
#[derive(Debug, Clone, PartialEq)]
pub struct RiCrRow {
    pub district: String,
    pub n: usize,
    pub r: f64,
    pub p: f64,
}

/// A correlation across districts.
#[derive(Debug, Clone, PartialEq)]
pub struct DistrictCorrelationRow {
    pub analysis: String,
    pub n: usize,
    pub r: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table2Row {
    pub term: String,
    pub value: f64,
    pub p: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistrictResult {
    pub months: Vec<DistrictMonthRow>,
    pub ri_cr: Vec<RiCrRow>,
    /// Quartiles of the per-district RI–CR coefficients.
    pub ri_cr_quartiles: Option<(f64, f64, f64)>,
    /// DA–cost, CR–cost and the three pattern-distance–cost correlations.
    pub correlations: Vec<DistrictCorrelationRow>,
    pub table2: Vec<Table2Row>,
    /// `(lo, hi, count)` over all district-month RI values.
    pub ri_histogram: Vec<(f64, f64, usize)>,
    pub funnel: Vec<FunnelRow>,
    pub skips: Vec<Skip>,
    pub seeds: SeedLog,
}

/// Monthly per-refugee calling patterns and CR.
struct MonthData {
    cr: BTreeMap<UserKey, f64>,
    patterns: BTreeMap<UserKey, CallingPattern>,
    lcp: Option<CallingPattern>,
}

fn month_data(prep: &Prepared, month: u32, recs: &[CallRecord], residents: &BTreeSet<UserKey>) -> (MonthData, Vec<Skip>) {
    let period = crate::cdr::Period {
        index: month,
        start: chrono::NaiveDate::from_ymd_opt(prep.cfg.study.year, month, 1).expect("valid month"),
        scheme: PeriodScheme::CalendarMonth,
    };
    let mut skips = Vec::new();
    let active = filter_active_users(recs, &period, prep.cfg.study.min_avg_calls);
    let sorted = sorted_by_caller(recs);
    let per_user = by_caller(&sorted);
    let locals = per_user
        .iter()
        .filter(|(u, r)| active.contains(u) && r[0].caller_class == UserClass::Local)
        .map(|(_, r)| *r);
    let lcp = match local_average_pattern::<f64>(locals) {
        Ok(p) => Some(p),
        Err(e) => {
            skips.push(Skip::new("district", format!("month {month}"), metrics_reason(&e), e.to_string()));
            None
        }
    };
    let mut cr = BTreeMap::new();
    let mut patterns = BTreeMap::new();
    for (u, r) in &per_user {
        if !(active.contains(u) && residents.contains(u) && r[0].caller_class == UserClass::Refugee) {
            continue;
        }
        let cp = calling_pattern::<f64>(r).expect("records present");
        if let Some(lcp) = &lcp {
            if let Ok(c) = calling_regularity(&cp, lcp, prep.cfg.stats.cr_missing_mode) {
                cr.insert(*u, c);
            }
        }
        patterns.insert(*u, cp);
    }
    (MonthData { cr, patterns, lcp }, skips)
}

/// District-level analyses over long-term refugee residents.
pub fn run_district_analysis(prep: &Prepared) -> Result<DistrictResult, PipelineError> {
    let data = prep.data;
    let reg = &data.registry;
    let (Some(cgmd), Some(atd)) = (&data.cgmd, &data.atd) else {
        return Err(PipelineError::Config("district analysis needs CGMD and ATD inputs".into()));
    };
    let stats = &prep.cfg.stats;
    let mut out = DistrictResult::default();

    let refugee_cgmd: Vec<CallRecord> = cgmd
        .iter()
        .filter(|r| r.caller_class == UserClass::Refugee && prep.area.contains(&r.site.district(reg)))
        .copied()
        .collect();
    let table = ResidenceTable::infer(&refugee_cgmd, reg);
    let with_residence: BTreeSet<UserKey> = table.iter().map(|r| r.user).collect();
    let long = long_term_residents(&table, prep.cfg.study.min_resident_months);
    let table = table.restricted(&long);
    out.funnel.push(FunnelRow::new("refugees_with_residence", "residents", with_residence.len()));
    out.funnel.push(FunnelRow::new("long_term_residents", "residents", long.len()));

    // Monthly CR and patterns from FGMD.
    let mut by_month: BTreeMap<u32, Vec<CallRecord>> = BTreeMap::new();
    for r in &prep.known {
        by_month.entry(chrono::Datelike::month(&r.timestamp)).or_default().push(*r);
    }
    let monthly: Vec<(u32, MonthData, Vec<Skip>)> = by_month
        .par_iter()
        .map(|(&m, recs)| {
            let (d, s) = month_data(prep, m, recs, &long);
            (m, d, s)
        })
        .collect();
    let mut months: BTreeMap<u32, MonthData> = BTreeMap::new();
    for (m, d, s) in monthly {
        out.skips.extend(s);
        months.insert(m, d);
    }

    let area_traffic: Vec<_> = atd
        .iter()
        .filter(|t| prep.area.contains(&reg.antenna(t.out_antenna).district))
        .copied()
        .collect();
    let night = night_traffic(&area_traffic, reg);

    // District-month table.
    let districts: Vec<DistrictKey> = prep.area.iter().copied().collect();
    let mut pooled_cr: BTreeMap<DistrictKey, Vec<f64>> = BTreeMap::new();
    let mut pooled_patterns: BTreeMap<DistrictKey, Vec<CallingPattern>> = BTreeMap::new();
    let mut series: BTreeMap<DistrictKey, Vec<(u32, Option<f64>, Option<f64>, Option<f64>)>> = BTreeMap::new();
    for &d in &districts {
        let did = reg.district(d).id.clone();
        for month in 1..=12u32 {
            let residents = table.residents(d, month);
            let ri = match ri_from_night_traffic::<f64>(&night, reg, d, month) {
                Ok(v) => Some(v),
                Err(e) => {
                    out.skips.push(Skip::new("ri", format!("{did} month {month}"), metrics_reason(&e), e.to_string()));
                    None
                }
            };
            let da = if month < 12 {
                match district_attractiveness::<f64>(&table, reg, d, month) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        out.skips.push(Skip::new("da", format!("{did} month {month}"), metrics_reason(&e), e.to_string()));
                        None
                    }
                }
            } else {
                None
            };
            let md = months.get(&month);
            let crs: Vec<f64> = residents
                .iter()
                .filter_map(|u| md.and_then(|m| m.cr.get(u)).copied())
                .collect();
            if let Some(md) = md {
                pooled_patterns
                    .entry(d)
                    .or_default()
                    .extend(residents.iter().filter_map(|u| md.patterns.get(u)).copied());
            }
            pooled_cr.entry(d).or_default().extend(&crs);
            let mean_cr = mean(&crs);
            series.entry(d).or_default().push((month, ri, da, mean_cr));
            out.months.push(DistrictMonthRow {
                district: did.clone(),
                month,
                ri,
                da,
                mean_cr,
                rent_cost: reg.district(d).rent_cost,
                n_residents: residents.len(),
            });
        }
    }

    // RI histogram.
    let mut hist = vec![0usize; RI_HISTOGRAM_BINS];
    for row in &out.months {
        if let Some(ri) = row.ri {
            hist[((ri * RI_HISTOGRAM_BINS as f64) as usize).min(RI_HISTOGRAM_BINS - 1)] += 1;
        }
    }
    let w = 1.0 / RI_HISTOGRAM_BINS as f64;
    out.ri_histogram = hist.iter().enumerate().map(|(i, &c)| (i as f64 * w, (i + 1) as f64 * w, c)).collect();

    // (a) RI against mean CR per district.
    for (i, &d) in districts.iter().enumerate() {
        let did = reg.district(d).id.clone();
        let (ri, cr): (Vec<f64>, Vec<f64>) = series[&d]
            .iter()
            .filter_map(|&(_, ri, _, cr)| Some((ri?, cr?)))
            .unzip();
        let seed = derive_seed(stats.seed, "district_ri_cr", &[i as u64]);
        match pearson(&ri, &cr, stats.n_perm, seed) {
            Ok(c) => {
                out.seeds.record("district_ri_cr", &did, seed);
                out.ri_cr.push(RiCrRow {
                    district: did,
                    n: c.n,
                    r: c.r,
                    p: c.p,
                });
            }
            Err(e) => out.skips.push(Skip::new("ri_cr", did, stats_reason(&e), e.to_string())),
        }
    }
    out.ri_cr_quartiles = quartiles(&out.ri_cr.iter().map(|r| r.r).collect::<Vec<_>>()).ok();

    // Per-district yearly summaries.
    let yearly = |k: usize| -> BTreeMap<DistrictKey, f64> {
        series
            .iter()
            .filter_map(|(d, s)| {
                let v: Vec<f64> = s.iter().filter_map(|t| if k == 0 { t.1 } else { t.2 }).collect();
                mean(&v).map(|m| (*d, m))
            })
            .collect()
    };
    let yearly_ri = yearly(0);
    let yearly_da = yearly(1);
    let mean_cr: BTreeMap<DistrictKey, f64> =
        pooled_cr.iter().filter_map(|(d, v)| mean(v).map(|m| (*d, m))).collect();
    let rent: BTreeMap<DistrictKey, f64> = districts
        .iter()
        .filter_map(|d| reg.district(*d).rent_cost.map(|r| (*d, r)))
        .collect();
    for d in districts.iter().filter(|d| !rent.contains_key(d)) {
        out.skips.push(Skip::new("district", reg.district(*d).id.clone(), "no_rent_cost", "district has no rent attribute"));
    }

    let correlate = |out: &mut DistrictResult, name: &str, values: &BTreeMap<DistrictKey, f64>, idx: u64| {
        let (x, y): (Vec<f64>, Vec<f64>) = values
            .iter()
            .filter_map(|(d, v)| rent.get(d).map(|r| (*v, *r)))
            .unzip();
        let seed = derive_seed(stats.seed, "district_cost", &[idx]);
        match pearson(&x, &y, stats.n_perm, seed) {
            Ok(c) => {
                out.seeds.record("district_cost", name, seed);
                out.correlations.push(DistrictCorrelationRow {
                    analysis: name.to_owned(),
                    n: c.n,
                    r: c.r,
                    p: c.p,
                });
            }
            Err(e) => out.skips.push(Skip::new("district_cost", name, stats_reason(&e), e.to_string())),
        }
    };
    correlate(&mut out, "da_cost", &yearly_da, 0);
    correlate(&mut out, "cr_cost", &mean_cr, 1);

    // Pattern distances to the yearly local pattern.
    let lcps: Vec<CallingPattern> = months.values().filter_map(|m| m.lcp).collect();
    match mean_pattern(&lcps) {
        Ok(lcp) => {
            for (k, measure) in SeriesMeasure::ALL.into_iter().enumerate() {
                let mut dist = BTreeMap::new();
                for (d, pats) in &pooled_patterns {
                    let Ok(p) = mean_pattern(pats) else { continue };
                    match series_distance(&p.values, &lcp.values, measure) {
                        Ok(v) => {
                            dist.insert(*d, v);
                        }
                        Err(e) => out.skips.push(Skip::new(
                            "pattern_distance",
                            format!("{} {}", reg.district(*d).id, measure.name()),
                            stats_reason(&e),
                            e.to_string(),
                        )),
                    }
                }
                correlate(&mut out, &format!("{}_distance_cost", measure.name()), &dist, 2 + k as u64);
            }
        }
        Err(e) => out.skips.push(Skip::new("pattern_distance", "year", metrics_reason(&e), e.to_string())),
    }

    // Spatial lag model of mean CR.
    let model_districts: Vec<DistrictKey> = districts
        .iter()
        .copied()
        .filter(|d| {
            mean_cr.contains_key(d)
                && rent.contains_key(d)
                && yearly_da.contains_key(d)
                && yearly_ri.contains_key(d)
                && reg.district_centroid(*d).is_some()
        })
        .collect();
    match table2(prep, &model_districts, &mean_cr, &rent, &yearly_da, &yearly_ri, &mut out.seeds) {
        Ok(rows) => out.table2 = rows,
        Err(s) => out.skips.push(s),
    }
    Ok(out)
}

fn table2(
    prep: &Prepared,
    districts: &[DistrictKey],
    mean_cr: &BTreeMap<DistrictKey, f64>,
    rent: &BTreeMap<DistrictKey, f64>,
    da: &BTreeMap<DistrictKey, f64>,
    ri: &BTreeMap<DistrictKey, f64>,
    seeds: &mut SeedLog,
) -> Result<Vec<Table2Row>, Skip> {
    let reg = &prep.data.registry;
    let stats = &prep.cfg.stats;
    let fail = |reason: &str, detail: String| Skip::new("table2", "spatial_lag", reason, detail);
    let col = |m: &BTreeMap<DistrictKey, f64>| min_max_normalize(&districts.iter().map(|d| m[d]).collect::<Vec<_>>()).0;
    let (xr, xd, xi) = (col(rent), col(da), col(ri));
    let y: Vec<f64> = districts.iter().map(|d| mean_cr[d]).collect();
    let x: Vec<Vec<f64>> = (0..districts.len()).map(|i| vec![xr[i], xd[i], xi[i]]).collect();
    let w = match stats.weight_matrix {
        WeightKind::Zero => WeightMatrix::zeros(districts.len()),
        kind => {
            let centroids: Vec<_> = districts.iter().map(|d| reg.district_centroid(*d).expect("filtered")).collect();
            let dm = district_distance_matrix(&centroids, false).map_err(|e| fail("geometry", e.to_string()))?;
            let construction = match kind {
                WeightKind::InverseDistance => WeightConstruction::InverseDistance {
                    epsilon: stats.inverse_epsilon,
                },
                _ => WeightConstruction::MinMaxDistance,
            };
            build_weight_matrix(&dm, construction, stats.row_standardize).map_err(|e| fail(stats_reason(&e), e.to_string()))?
        }
    };
    let seed = derive_seed(stats.seed, "table2_moran", &[]);
    let model = spatial_lag_regress(&y, &x, &w)
        .map_err(|e| fail(stats_reason(&e), e.to_string()))?
        .with_moran(stats.n_perm, seed);
    seeds.record("table2_moran", "fitted", seed);
    seeds.record("table2_moran", "residuals", seed.wrapping_add(1));
    let mut rows = vec![Table2Row {
        term: "rho".into(),
        value: model.rho,
        p: None,
    }];
    for (name, b) in ["intercept", "rent_cost", "da", "ri"].iter().zip(&model.beta) {
        rows.push(Table2Row {
            term: (*name).into(),
            value: *b,
            p: None,
        });
    }
    rows.push(Table2Row {
        term: "mse".into(),
        value: model.mse,
        p: None,
    });
    rows.push(Table2Row {
        term: "log_likelihood".into(),
        value: model.log_likelihood,
        p: None,
    });
    rows.push(Table2Row {
        term: "n_districts".into(),
        value: districts.len() as f64,
        p: None,
    });
    for (name, m) in [("moran_i_fitted", model.moran_pred), ("moran_i_residuals", model.moran_resid)] {
        if let Some(m) = m {
            rows.push(Table2Row {
                term: name.into(),
                value: m.i,
                p: Some(m.p),
            });
        }
    }
    Ok(rows)
}
