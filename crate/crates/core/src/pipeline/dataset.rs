use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use tracing::info;

use super::{metrics_reason, PipelineError, RunConfig, Skip};
use crate::cdr::{
    drop_unknown_callee, filter_active_users, parse_fgmd_chunked, partition_periods, read_atd, read_cgmd, CallRecord,
    DistrictKey, Period, Registry, TrafficRecord, UserClass, UserKey, UserTable,
};
use crate::metrics::{calling_pattern, calling_regularity, il_group, interaction_level, local_average_pattern};
use crate::metrics::{CallingPattern, CrMissingMode};
use crate::synth::SynthOutput;

/// Loaded inputs. Records keep file order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub registry: Registry,
    pub users: UserTable,
    pub fgmd: Vec<CallRecord>,
    pub cgmd: Option<Vec<CallRecord>>,
    pub atd: Option<Vec<TrafficRecord>>,
    /// Input name to SHA-256 hex digest of its bytes.
    pub digests: BTreeMap<String, String>,
    /// Rows dropped in lenient mode, per input.
    pub skipped_unknown_site: BTreeMap<String, usize>,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>, PipelineError> {
    std::fs::read(path).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
}

impl Dataset {
    /// Reads every configured input. All paths are checked before any is
    /// parsed.
    pub fn load(cfg: &RunConfig) -> Result<Self, PipelineError> {
        let inputs = &cfg.inputs;
        let antennas = inputs
            .antennas
            .as_ref()
            .ok_or_else(|| PipelineError::Config("inputs.antennas is required".into()))?;
        let fgmd = inputs
            .fgmd
            .as_ref()
            .ok_or_else(|| PipelineError::Config("inputs.fgmd is required".into()))?;
        let named = [
            ("antennas", Some(antennas)),
            ("districts", inputs.districts.as_ref()),
            ("fgmd", Some(fgmd)),
            ("cgmd", inputs.cgmd.as_ref()),
            ("atd", inputs.atd.as_ref()),
        ];
        for (name, p) in named {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(PipelineError::Input(format!("{name} file {} does not exist", p.display())));
                }
            }
        }

        let mut digests = BTreeMap::new();
        let mut skipped = BTreeMap::new();
        let mode = cfg.ingest_mode;

        let ant_bytes = read_file(antennas)?;
        digests.insert("antennas".to_owned(), sha256_hex(&ant_bytes));
        let dist_bytes = match &inputs.districts {
            Some(p) => {
                let b = read_file(p)?;
                digests.insert("districts".to_owned(), sha256_hex(&b));
                Some(b)
            }
            None => None,
        };
        let registry = Registry::from_readers(ant_bytes.as_slice(), dist_bytes.as_deref())?;

        let mut users = UserTable::new();
        let fgmd_bytes = read_file(fgmd)?;
        digests.insert("fgmd".to_owned(), sha256_hex(&fgmd_bytes));
        let text = std::str::from_utf8(&fgmd_bytes).map_err(|e| PipelineError::Input(format!("FGMD: {e}")))?;
        let chunks = rayon::current_num_threads() * 4;
        let f = parse_fgmd_chunked(text, &registry, &mut users, mode, chunks)?;
        skipped.insert("fgmd".to_owned(), f.skipped_unknown_site);
        drop(fgmd_bytes);

        let cgmd = match &inputs.cgmd {
            Some(p) => {
                let b = read_file(p)?;
                digests.insert("cgmd".to_owned(), sha256_hex(&b));
                let c = read_cgmd(b.as_slice(), &registry, &mut users, mode)?;
                skipped.insert("cgmd".to_owned(), c.skipped_unknown_site);
                Some(c.rows)
            }
            None => None,
        };
        let atd = match &inputs.atd {
            Some(p) => {
                let b = read_file(p)?;
                digests.insert("atd".to_owned(), sha256_hex(&b));
                let a = read_atd(b.as_slice(), &registry, mode)?;
                skipped.insert("atd".to_owned(), a.skipped_unknown_site);
                Some(a.rows)
            }
            None => None,
        };
        info!(fgmd = f.rows.len(), users = users.len(), "inputs loaded");
        Ok(Self {
            registry,
            users,
            fgmd: f.rows,
            cgmd,
            atd,
            digests,
            skipped_unknown_site: skipped,
        })
    }

    /// Wraps generated data. `source_digest` identifies the generator
    /// configuration in the manifest.
    pub fn from_synth(out: SynthOutput, source_digest: String) -> Self {
        let mut digests = BTreeMap::new();
        digests.insert("synth_config".to_owned(), source_digest);
        Self {
            registry: out.registry,
            users: out.users,
            fgmd: out.fgmd,
            cgmd: Some(out.cgmd),
            atd: Some(out.atd),
            digests,
            skipped_unknown_site: BTreeMap::new(),
        }
    }
}

/// One stage of the selection funnel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunnelRow {
    pub stage: String,
    pub unit: String,
    pub count: usize,
}

/// Per-refugee values in one period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserPeriodMetrics {
    pub il: f64,
    /// IL group 1..=n_groups.
    pub group: usize,
    /// CR with unobserved hours as zeros; `None` without a local pattern.
    pub cr: Option<f64>,
    pub cr_pairwise: Option<f64>,
    pub calls_known: u64,
    pub calls_to_local: u64,
}

#[derive(Debug, Clone)]
pub struct PeriodData {
    pub period: Period,
    /// Active refugees.
    pub refugees: BTreeMap<UserKey, UserPeriodMetrics>,
    pub active_locals: Vec<UserKey>,
    pub lcp: Option<CallingPattern>,
}

/// Dataset restricted to the study area with per-period metrics computed.
#[derive(Debug, Clone)]
pub struct Prepared<'a> {
    pub cfg: &'a RunConfig,
    pub data: &'a Dataset,
    pub area: BTreeSet<DistrictKey>,
    /// FGMD records inside the study area, any callee class.
    pub fgmd_area: Cow<'a, [CallRecord]>,
    /// `fgmd_area` without unknown-callee records.
    pub known: Vec<CallRecord>,
    pub periods: Vec<PeriodData>,
    pub funnel: Vec<FunnelRow>,
    pub skips: Vec<Skip>,
}

/// Splits records (sorted by caller) into per-caller slices.
pub(crate) fn by_caller(records: &[CallRecord]) -> BTreeMap<UserKey, &[CallRecord]> {
    let mut out = BTreeMap::new();
    let mut start = 0;
    while start < records.len() {
        let u = records[start].caller;
        let end = start + records[start..].partition_point(|r| r.caller == u);
        out.insert(u, &records[start..end]);
        start = end;
    }
    out
}

pub(crate) fn sorted_by_caller(records: &[CallRecord]) -> Vec<CallRecord> {
    let mut v = records.to_vec();
    // Stable: each caller keeps time order.
    v.sort_by_key(|r| r.caller);
    v
}

impl<'a> Prepared<'a> {
    pub fn new(cfg: &'a RunConfig, data: &'a Dataset) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let reg = &data.registry;
        let area: BTreeSet<DistrictKey> = if cfg.study.area.is_empty() {
            reg.district_keys().collect()
        } else {
            cfg.study
                .area
                .iter()
                .map(|id| {
                    reg.district_key(id)
                        .ok_or_else(|| PipelineError::Config(format!("study area names unknown district {id:?}")))
                })
                .collect::<Result<_, _>>()?
        };
        let all_area = area.len() == reg.districts().len();
        let fgmd_area: Cow<[CallRecord]> = if all_area {
            Cow::Borrowed(&data.fgmd)
        } else {
            Cow::Owned(data.fgmd.iter().filter(|r| area.contains(&r.site.district(reg))).copied().collect())
        };
        let (known, _) = drop_unknown_callee(fgmd_area.to_vec());
        let partition = partition_periods(&known, cfg.study.period_scheme, cfg.study.year)?;

        let mut funnel = vec![
            FunnelRow::new("fgmd_records", "records", data.fgmd.len()),
            FunnelRow::new("in_study_area", "records", fgmd_area.len()),
            FunnelRow::new("known_callee", "records", known.len()),
            FunnelRow::new("inside_periods", "records", known.len() - partition.discarded),
        ];

        let n_groups = cfg.stats.n_groups;
        let min_avg = cfg.study.min_avg_calls;
        let results: Vec<(PeriodData, Vec<Skip>)> = partition
            .periods
            .into_par_iter()
            .map(|(period, recs)| prepare_period(period, &recs, min_avg, n_groups))
            .collect();
        let mut skips = Vec::new();
        let mut periods = Vec::new();
        for (p, s) in results {
            periods.push(p);
            skips.extend(s);
        }

        let refugees_with_calls: BTreeSet<UserKey> = known
            .iter()
            .filter(|r| r.caller_class == UserClass::Refugee)
            .map(|r| r.caller)
            .collect();
        let active: BTreeSet<UserKey> = periods.iter().flat_map(|p| p.refugees.keys().copied()).collect();
        funnel.push(FunnelRow::new("refugees_with_known_calls", "users", refugees_with_calls.len()));
        funnel.push(FunnelRow::new("refugees_active_in_any_period", "users", active.len()));
        let active_periods = periods.iter().filter(|p| !p.refugees.is_empty()).count();
        funnel.push(FunnelRow::new("periods", "periods", cfg.study.period_scheme.periods(cfg.study.year).len()));
        funnel.push(FunnelRow::new("periods_with_active_refugees", "periods", active_periods));

        Ok(Self {
            cfg,
            data,
            area,
            fgmd_area,
            known,
            periods,
            funnel,
            skips,
        })
    }

    /// IL group of a refugee on `date`, from the period holding the date.
    pub fn group_on(&self, user: UserKey, date: chrono::NaiveDate) -> Option<usize> {
        self.period_data(date)?.refugees.get(&user).map(|m| m.group)
    }

    pub fn period_data(&self, date: chrono::NaiveDate) -> Option<&PeriodData> {
        let i = self.periods.partition_point(|p| p.period.end() <= date);
        self.periods.get(i).filter(|p| p.period.contains(date))
    }
}

impl FunnelRow {
    pub fn new(stage: &str, unit: &str, count: usize) -> Self {
        Self {
            stage: stage.to_owned(),
            unit: unit.to_owned(),
            count,
        }
    }
}

fn prepare_period(period: Period, recs: &[CallRecord], min_avg: f64, n_groups: usize) -> (PeriodData, Vec<Skip>) {
    let item = format!("period {}", period.index);
    let mut skips = Vec::new();
    let active = filter_active_users(recs, &period, min_avg);
    let sorted = sorted_by_caller(recs);
    let per_user = by_caller(&sorted);
    let active_locals: Vec<UserKey> = per_user
        .iter()
        .filter(|(u, r)| active.contains(u) && r[0].caller_class == UserClass::Local)
        .map(|(u, _)| *u)
        .collect();
    let lcp = match local_average_pattern::<f64>(active_locals.iter().map(|u| per_user[u])) {
        Ok(p) => Some(p),
        Err(e) => {
            skips.push(Skip::new("cr", item.clone(), metrics_reason(&e), e.to_string()));
            None
        }
    };
    let mut refugees = BTreeMap::new();
    for (&u, r) in &per_user {
        if !active.contains(&u) || r[0].caller_class != UserClass::Refugee {
            continue;
        }
        let il: f64 = interaction_level(r).expect("known-callee records present");
        let calls_to_local = r.iter().filter(|c| c.callee == Some(UserClass::Local)).count() as u64;
        let (cr, cr_pairwise) = match &lcp {
            Some(lcp) => {
                let cp = calling_pattern::<f64>(r).expect("records present");
                (
                    calling_regularity(&cp, lcp, CrMissingMode::Zeros).ok(),
                    calling_regularity(&cp, lcp, CrMissingMode::PairwiseComplete).ok(),
                )
            }
            None => (None, None),
        };
        refugees.insert(
            u,
            UserPeriodMetrics {
                il,
                group: il_group(il, n_groups).expect("IL lies in [0, 1]"),
                cr,
                cr_pairwise,
                calls_known: r.len() as u64,
                calls_to_local,
            },
        );
    }
    (
        PeriodData {
            period,
            refugees,
            active_locals,
            lcp,
        },
        skips,
    )
}
