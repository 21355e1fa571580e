use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::cdr::{IngestMode, PeriodScheme};
use crate::metrics::CrMissingMode;
use crate::stigmergy::{EvaporationMode, EvaporationPolicy, MarkSpec};

/// Input file locations. Relative paths resolve against the directory of
/// the configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub antennas: Option<PathBuf>,
    pub districts: Option<PathBuf>,
    pub fgmd: Option<PathBuf>,
    pub cgmd: Option<PathBuf>,
    pub atd: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub year: i32,
    /// District ids to analyse; empty means every district.
    pub area: Vec<String>,
    pub period_scheme: PeriodScheme,
    /// Minimum average calls per day for a user to count as active.
    pub min_avg_calls: f64,
    /// Minimum months with a resolved residence for a long-term resident.
    pub min_resident_months: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            year: 2017,
            area: Vec::new(),
            period_scheme: PeriodScheme::TwoWeeks,
            min_avg_calls: 2.0,
            min_resident_months: crate::metrics::DEFAULT_MIN_RESIDENT_MONTHS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub cell_size_m: f64,
    pub delta: f64,
    pub mode: EvaporationMode,
    pub base_radius_m: f64,
    pub top_radius_m: f64,
    pub peak: f64,
    /// Length of one trail time step; must divide a day.
    pub step_minutes: u32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let mark = MarkSpec::<f64>::default();
        Self {
            cell_size_m: 100.0,
            delta: 0.1,
            mode: EvaporationMode::Multiplicative,
            base_radius_m: mark.base_radius,
            top_radius_m: mark.top_radius,
            peak: mark.peak,
            step_minutes: 60,
        }
    }
}

impl EngineConfig {
    pub fn mark(&self) -> MarkSpec {
        MarkSpec {
            base_radius: self.base_radius_m,
            top_radius: self.top_radius_m,
            peak: self.peak,
        }
    }

    pub fn policy(&self) -> EvaporationPolicy {
        EvaporationPolicy {
            delta: self.delta,
            mode: self.mode,
        }
    }

    pub fn steps_per_day(&self) -> u32 {
        24 * 60 / self.step_minutes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    #[default]
    MinMaxDistance,
    InverseDistance,
    /// No spatial structure; the lag model reduces to least squares.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsAxis {
    /// Mean IL of the sampled group members.
    #[default]
    GroupMeanIl,
    BinMidpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PctMode {
    /// Calls to locals over all known calls of the group.
    #[default]
    Pooled,
    /// Mean of the members' own shares.
    PerUserMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub n_perm: usize,
    pub seed: u64,
    pub n_trials: usize,
    /// Number of equal-width IL groups.
    pub n_groups: usize,
    pub weight_matrix: WeightKind,
    pub inverse_epsilon: f64,
    pub row_standardize: bool,
    pub cr_missing_mode: CrMissingMode,
    pub ms_x: MsAxis,
    pub pct_mode: PctMode,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            n_perm: crate::stats::DEFAULT_PERMUTATIONS,
            seed: 1,
            n_trials: 5,
            n_groups: crate::metrics::IL_BINS,
            weight_matrix: WeightKind::MinMaxDistance,
            inverse_epsilon: 0.1,
            row_standardize: true,
            cr_missing_mode: CrMissingMode::Zeros,
            ms_x: MsAxis::GroupMeanIl,
            pct_mode: PctMode::Pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub date: NaiveDate,
    #[serde(default)]
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventImpactConfig {
    /// Days compared on each side of an event.
    pub window_days: u32,
}

impl Default for EventImpactConfig {
    fn default() -> Self {
        Self { window_days: 14 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Days whose group trails are dumped as grids.
    pub trail_dump_dates: Vec<NaiveDate>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            trail_dump_dates: Vec::new(),
        }
    }
}

/// Full run configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub inputs: InputPaths,
    pub study: StudyConfig,
    pub engine: EngineConfig,
    pub stats: StatsConfig,
    pub events: Vec<EventSpec>,
    pub event_impact: EventImpactConfig,
    pub output: OutputConfig,
    pub ingest_mode: IngestMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            inputs: InputPaths::default(),
            study: StudyConfig::default(),
            engine: EngineConfig::default(),
            stats: StatsConfig::default(),
            events: Vec::new(),
            event_impact: EventImpactConfig::default(),
            output: OutputConfig::default(),
            ingest_mode: IngestMode::Strict,
        }
    }
}

impl RunConfig {
    /// Parses a config file, or the `config` table of a run manifest.
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        let table = match table.get("config") {
            Some(toml::Value::Table(inner)) if table.contains_key("seeds") => inner.clone(),
            _ => table,
        };
        table.try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))
    }

    /// Reads a config file and resolves relative input paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().filter(|b| !b.as_os_str().is_empty()).unwrap_or(Path::new("."));
        cfg.resolve_relative(&std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf()));
        Ok(cfg)
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        let i = &mut self.inputs;
        for p in [&mut i.antennas, &mut i.districts, &mut i.fgmd, &mut i.cgmd, &mut i.atd] {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if NaiveDate::from_ymd_opt(self.study.year, 1, 1).is_none() {
            return bad(format!("invalid study year {}", self.study.year));
        }
        if !(self.study.min_avg_calls > 0.0) {
            return bad("study.min_avg_calls must be positive".into());
        }
        let e = &self.engine;
        if !(e.cell_size_m > 0.0) {
            return bad("engine.cell_size_m must be positive".into());
        }
        if e.step_minutes == 0 || (24 * 60) % e.step_minutes != 0 {
            return bad(format!("engine.step_minutes must divide a day, got {}", e.step_minutes));
        }
        e.mark().validate().map_err(|x| PipelineError::Config(x.to_string()))?;
        e.policy().validate().map_err(|x| PipelineError::Config(x.to_string()))?;
        let s = &self.stats;
        if s.n_trials == 0 {
            return bad("stats.n_trials must be at least 1".into());
        }
        if i64::try_from(s.seed).is_err() {
            return bad(format!("stats.seed must fit in a signed 64-bit integer, got {}", s.seed));
        }
        if s.n_groups < 3 {
            return bad("stats.n_groups must be at least 3".into());
        }
        if !(s.inverse_epsilon > 0.0 && s.inverse_epsilon < 1.0) {
            return bad("stats.inverse_epsilon must be in (0, 1)".into());
        }
        if self.event_impact.window_days == 0 {
            return bad("event_impact.window_days must be positive".into());
        }
        for ev in &self.events {
            if ev.date.format("%Y").to_string() != self.study.year.to_string() {
                return bad(format!("event {} is outside the study year", ev.date));
            }
        }
        Ok(())
    }
}
