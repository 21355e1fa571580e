use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::cr_il::mode_name;
use super::{
    AllResults, CrIlResult, DistrictResult, EventResult, MsIlResult, PipelineError, Prepared, RunConfig, SeedLog, Skip,
};

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Rendered tables plus everything the manifest records.
#[derive(Debug, Clone, Default)]
pub struct Report {
    /// File name to contents.
    pub tables: BTreeMap<String, String>,
    /// Trail grids, relative path to contents.
    pub dumps: BTreeMap<String, String>,
    pub funnel: Vec<(String, String, usize)>,
    pub skips: Vec<Skip>,
    pub seeds: SeedLog,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn table(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

#[derive(Serialize)]
struct FunnelEntry<'a> {
    stage: &'a str,
    unit: &'a str,
    count: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    generator: String,
    tables: Vec<&'a str>,
    inputs: &'a BTreeMap<String, String>,
    funnel: Vec<FunnelEntry<'a>>,
    /// Hex strings; TOML integers stop at i64.
    seeds: BTreeMap<&'a str, String>,
    skipped: &'a [Skip],
    config: &'a RunConfig,
}

impl Report {
    /// Starts a report with the selection funnel and per-user metrics.
    pub fn new(prep: &Prepared) -> Self {
        let mut r = Report::default();
        r.seeds.record("run", "base", prep.cfg.stats.seed);
        for f in &prep.funnel {
            r.funnel.push((f.stage.clone(), f.unit.clone(), f.count));
        }
        r.skips.extend(prep.skips.iter().cloned());
        let users = &prep.data.users;
        let rows = prep.periods.iter().flat_map(|pd| {
            pd.refugees.iter().map(move |(u, m)| {
                format!(
                    "{},{},{},{},{},{},{}",
                    users.get(*u).raw_id,
                    pd.period.index,
                    m.il,
                    m.group,
                    opt(m.cr),
                    opt(m.cr_pairwise),
                    m.calls_known
                )
            })
        });
        r.tables.insert(
            "user_metrics.csv".into(),
            table("user_id,period,il,il_group,cr,cr_pairwise,calls_known", rows),
        );
        r
    }

    pub fn add_all(&mut self, res: &AllResults) {
        self.add_cr_il(&res.cr_il);
        self.add_district(res.district.as_ref());
        self.add_ms_il(&res.ms_il);
        self.add_events(&res.events);
    }

    pub fn add_cr_il(&mut self, r: &CrIlResult) {
        self.tables.insert(
            "cr_il_periods.csv".into(),
            table(
                "period,cr_mode,n,r,p",
                r.rows.iter().map(|x| format!("{},{},{},{},{}", x.period, mode_name(x.mode), x.n, x.r, x.p)),
            ),
        );
        self.tables.insert(
            "cr_il_summary.csv".into(),
            table(
                "cr_mode,n_periods,r_q1,r_median,r_q3,p_2.5,p_97.5",
                r.summary.iter().map(|x| {
                    format!(
                        "{},{},{},{},{},{},{}",
                        mode_name(x.mode),
                        x.n_periods,
                        x.r_q1,
                        x.r_median,
                        x.r_q3,
                        x.p_lo,
                        x.p_hi
                    )
                }),
            ),
        );
        self.skips.extend(r.skips.iter().cloned());
        self.seeds.extend(r.seeds.clone());
    }

    /// `None` still writes the tables, header only.
    pub fn add_district(&mut self, r: Option<&DistrictResult>) {
        let empty = DistrictResult::default();
        let r = r.unwrap_or(&empty);
        self.tables.insert(
            "district_months.csv".into(),
            table(
                "district_id,month,ri,da,mean_cr,rent_cost,n_residents",
                r.months.iter().map(|x| {
                    format!(
                        "{},{},{},{},{},{},{}",
                        x.district,
                        x.month,
                        opt(x.ri),
                        opt(x.da),
                        opt(x.mean_cr),
                        opt(x.rent_cost),
                        x.n_residents
                    )
                }),
            ),
        );
        self.tables.insert(
            "ri_cr_by_district.csv".into(),
            table(
                "district_id,n,r,p",
                r.ri_cr.iter().map(|x| format!("{},{},{},{}", x.district, x.n, x.r, x.p)),
            ),
        );
        self.tables.insert(
            "ri_cr_summary.csv".into(),
            table(
                "n_districts,r_q1,r_median,r_q3",
                r.ri_cr_quartiles.map(|(a, b, c)| format!("{},{a},{b},{c}", r.ri_cr.len())),
            ),
        );
        self.tables.insert(
            "district_correlations.csv".into(),
            table(
                "analysis,n,r,p",
                r.correlations.iter().map(|x| format!("{},{},{},{}", x.analysis, x.n, x.r, x.p)),
            ),
        );
        self.tables.insert(
            "table2.csv".into(),
            table(
                "term,value,p",
                r.table2.iter().map(|x| format!("{},{},{}", x.term, x.value, opt(x.p))),
            ),
        );
        self.tables.insert(
            "ri_histogram.csv".into(),
            table(
                "lo,hi,count",
                r.ri_histogram.iter().map(|(lo, hi, c)| format!("{lo},{hi},{c}")),
            ),
        );
        for f in &r.funnel {
            self.funnel.push((f.stage.clone(), f.unit.clone(), f.count));
        }
        self.skips.extend(r.skips.iter().cloned());
        self.seeds.extend(r.seeds.clone());
    }

    pub fn add_ms_il(&mut self, r: &MsIlResult) {
        self.tables.insert(
            "ms_daily.csv".into(),
            table(
                "date,trial,il_group,size,mean_il,ms",
                r.daily
                    .iter()
                    .map(|x| format!("{},{},{},{},{},{}", x.date, x.trial, x.group, x.size, x.mean_il, x.ms)),
            ),
        );
        self.tables.insert(
            "ms_il_corr.csv".into(),
            table(
                "date,trial,n,r,p",
                r.corr.iter().map(|x| format!("{},{},{},{},{}", x.date, x.trial, x.n, x.r, x.p)),
            ),
        );
        self.tables.insert(
            "ms_il_summary.csv".into(),
            table("n,r_q1,r_median,r_q3", r.summary.map(|(n, a, b, c)| format!("{n},{a},{b},{c}"))),
        );
        self.tables.insert(
            "ms_period.csv".into(),
            table("period,il_group,ms", r.period_ms.iter().map(|(p, g, v)| format!("{p},{g},{v}"))),
        );
        self.tables.insert(
            "group_sizes.csv".into(),
            table(
                "period,group,members,sampled",
                r.group_sizes
                    .iter()
                    .map(|x| format!("{},{},{},{}", x.period, x.group, x.members, x.sampled)),
            ),
        );
        for d in &r.dumps {
            let stem = format!("trails/{}_{}", d.date, d.group);
            self.dumps.insert(format!("{stem}.csv"), d.csv.clone());
            self.dumps.insert(format!("{stem}.meta"), d.metadata.clone());
        }
        self.skips.extend(r.skips.iter().cloned());
        self.seeds.extend(r.seeds.clone());
    }

    pub fn add_events(&mut self, r: &EventResult) {
        self.tables.insert(
            "event_impact.csv".into(),
            table(
                "date,label,il_group,measure,before,after,ratio",
                r.rows.iter().map(|x| {
                    format!(
                        "{},{},{},{},{},{},{}",
                        x.date,
                        x.label,
                        x.group,
                        x.measure.name(),
                        x.before,
                        x.after,
                        x.ratio
                    )
                }),
            ),
        );
        self.tables.insert(
            "event_summary.csv".into(),
            table(
                "il_group,measure,n_events,q1,median,q3",
                r.summary.iter().map(|x| {
                    format!("{},{},{},{},{},{}", x.group, x.measure.name(), x.n_events, x.q1, x.median, x.q3)
                }),
            ),
        );
        self.skips.extend(r.skips.iter().cloned());
    }

    /// Funnel and skip tables, after checking the funnel never grows within
    /// a unit.
    fn finish_tables(&self) -> Result<BTreeMap<String, String>, PipelineError> {
        let mut last: BTreeMap<&str, (&str, usize)> = BTreeMap::new();
        for (stage, unit, count) in &self.funnel {
            if let Some((prev, c)) = last.get(unit.as_str()) {
                if count > c {
                    return Err(PipelineError::Invariant(format!(
                        "selection funnel grows from {prev} ({c}) to {stage} ({count})"
                    )));
                }
            }
            last.insert(unit, (stage, *count));
        }
        let mut tables = self.tables.clone();
        tables.insert(
            "funnel.csv".into(),
            table("stage,unit,count", self.funnel.iter().map(|(s, u, c)| format!("{s},{u},{c}"))),
        );
        let mut skips = self.skips.clone();
        skips.sort();
        tables.insert(
            "skipped.csv".into(),
            table(
                "analysis,item,reason",
                skips.iter().map(|s| format!("{},{},{}", s.analysis, s.item, s.reason)),
            ),
        );
        Ok(tables)
    }

    pub fn manifest(&self, prep: &Prepared) -> Result<String, PipelineError> {
        let tables = self.finish_tables()?;
        let mut skips = self.skips.clone();
        skips.sort();
        let m = Manifest {
            generator: format!("stigmetrics {}", env!("CARGO_PKG_VERSION")),
            tables: tables.keys().map(String::as_str).collect(),
            inputs: &prep.data.digests,
            funnel: self
                .funnel
                .iter()
                .map(|(s, u, c)| FunnelEntry {
                    stage: s,
                    unit: u,
                    count: *c,
                })
                .collect(),
            seeds: self.seeds.seeds.iter().map(|(k, v)| (k.as_str(), format!("{v:#018x}"))).collect(),
            skipped: &skips,
            config: prep.cfg,
        };
        toml::to_string(&m).map_err(|e| PipelineError::Invariant(format!("manifest serialization: {e}")))
    }
}

/// Writes every table, the trail dumps and the manifest under `dir`.
/// Returns the written paths.
pub fn emit_report(report: &Report, prep: &Prepared, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let tables = report.finish_tables()?;
    let manifest = report.manifest(prep)?;
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut written = Vec::new();
    let files = tables
        .iter()
        .chain(report.dumps.iter())
        .map(|(k, v)| (k.as_str(), v.as_str()))
        .chain(std::iter::once((MANIFEST_FILE, manifest.as_str())));
    for (name, body) in files {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
        }
        std::fs::write(&path, body).map_err(|e| PipelineError::io(&path, e))?;
        written.push(path);
    }
    tracing::info!(dir = %dir.display(), files = written.len(), "report written");
    Ok(written)
}
