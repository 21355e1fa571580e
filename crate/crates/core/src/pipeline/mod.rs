//! End-to-end analyses over a loaded dataset, and report emission.

mod config;
mod cr_il;
mod dataset;
mod district;
mod event;
mod ms_il;
mod report;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

pub use config::{
    EngineConfig, EventImpactConfig, EventSpec, InputPaths, MsAxis, OutputConfig, PctMode, RunConfig, StatsConfig,
    StudyConfig, WeightKind,
};
pub use cr_il::{run_cr_il, CrIlPeriodRow, CrIlResult, CrIlSummaryRow};
pub use dataset::{Dataset, FunnelRow, PeriodData, Prepared, UserPeriodMetrics};
pub use district::{
    run_district_analysis, DistrictCorrelationRow, DistrictMonthRow, DistrictResult, RiCrRow, Table2Row,
};
pub use event::{run_event_impact, EventImpactRow, EventMeasure, EventResult, EventSummaryRow};
pub use ms_il::{run_ms_il, GroupSizeRow, MsDailyRow, MsIlCorrRow, MsIlResult, TrailDump};
pub use report::{emit_report, Report};

use crate::cdr::CdrError;
use crate::metrics::MetricsError;
use crate::stats::StatsError;
use crate::stigmergy::StigmergyError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("event {0} needs a full comparison window on both sides inside the study year")]
    EventTooCloseToYearEdge(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl PipelineError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Input(_) | PipelineError::Io { .. } => 1,
            PipelineError::Config(_) | PipelineError::EventTooCloseToYearEdge(_) => 2,
            PipelineError::Invariant(_) => 3,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

impl From<CdrError> for PipelineError {
    fn from(e: CdrError) -> Self {
        PipelineError::Input(e.to_string())
    }
}

/// An item left out of an analysis, with a machine-readable reason.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Skip {
    pub analysis: String,
    pub item: String,
    pub reason: String,
    pub detail: String,
}

impl Skip {
    pub fn new(analysis: &str, item: impl Into<String>, reason: &str, detail: impl Into<String>) -> Self {
        Self {
            analysis: analysis.to_owned(),
            item: item.into(),
            reason: reason.to_owned(),
            detail: detail.into(),
        }
    }
}

pub fn metrics_reason(e: &MetricsError) -> &'static str {
    match e {
        MetricsError::NoCalls => "no_calls",
        MetricsError::OutOfRange(_) => "out_of_range",
        MetricsError::NoLocals => "no_locals",
        MetricsError::ZeroVector => "zero_vector",
        MetricsError::NoNightTraffic { .. } => "no_night_traffic",
        MetricsError::NoResidents { .. } => "no_residents",
        MetricsError::LastMonth(_) => "last_month",
        MetricsError::UnequalGroups { .. } => "unequal_groups",
        MetricsError::EmptyGroup(_) => "empty_group",
        MetricsError::Stigmergy(s) => stigmergy_reason(s),
    }
}

pub fn stigmergy_reason(e: &StigmergyError) -> &'static str {
    match e {
        StigmergyError::BothTrailsEmpty => "both_trails_empty",
        StigmergyError::GridMismatch => "grid_mismatch",
        _ => "stigmergy",
    }
}

pub fn stats_reason(e: &StatsError) -> &'static str {
    match e {
        StatsError::LengthMismatch(..) => "length_mismatch",
        StatsError::ZeroVariance => "zero_variance",
        StatsError::TooFewSamples { .. } => "too_few_samples",
        StatsError::Empty => "empty",
        StatsError::NonFinite => "non_finite",
        StatsError::ZeroVector => "zero_vector",
        StatsError::ZeroWeights => "zero_weights",
        StatsError::SingularDesign => "singular_design",
        StatsError::NonInvertible => "non_invertible",
        StatsError::Geo(_) => "geometry",
    }
}

/// Seed for one work item, mixed from the run seed, a purpose tag and the
/// item's indices (SplitMix64 finalizer over an FNV-1a fold).
pub fn derive_seed(base: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut x = base ^ h;
    for &i in indices {
        x = splitmix(x ^ splitmix(i.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    splitmix(x)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Every seed a run used, by purpose and item.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SeedLog {
    pub seeds: BTreeMap<String, u64>,
}

impl SeedLog {
    pub fn record(&mut self, purpose: &str, item: &str, seed: u64) {
        self.seeds.insert(format!("{purpose}:{item}"), seed);
    }

    pub fn extend(&mut self, other: SeedLog) {
        self.seeds.extend(other.seeds);
    }
}

/// Results of every analysis over one prepared dataset.
#[derive(Debug, Clone)]
pub struct AllResults {
    pub cr_il: CrIlResult,
    pub district: Option<DistrictResult>,
    pub ms_il: MsIlResult,
    pub events: EventResult,
}

/// Runs the four analyses. The district analysis needs CGMD and ATD and is
/// skipped without them.
pub fn run_all(prep: &Prepared) -> Result<AllResults, PipelineError> {
    let cr_il = run_cr_il(prep)?;
    let district = if prep.data.cgmd.is_some() && prep.data.atd.is_some() {
        Some(run_district_analysis(prep)?)
    } else {
        None
    };
    let ms_il = run_ms_il(prep)?;
    let events = run_event_impact(prep, &ms_il)?;
    Ok(AllResults {
        cr_il,
        district,
        ms_il,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_tag_and_index() {
        let a = derive_seed(1, "ms_il", &[3, 0]);
        assert_eq!(a, derive_seed(1, "ms_il", &[3, 0]));
        assert_ne!(a, derive_seed(1, "ms_il", &[0, 3]));
        assert_ne!(a, derive_seed(1, "cr_il", &[3, 0]));
        assert_ne!(a, derive_seed(2, "ms_il", &[3, 0]));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Input("x".into()).exit_code(), 1);
        assert_eq!(PipelineError::Config("x".into()).exit_code(), 2);
        assert_eq!(PipelineError::Invariant("x".into()).exit_code(), 3);
    }
}
