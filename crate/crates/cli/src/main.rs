use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stigmetrics::cdr::IngestMode;
use stigmetrics::geo::{activity_grid, antenna_density_grid, DurationVariant, GeoPoint, GridSpec};
use stigmetrics::pipeline::{
    emit_report, run_all, run_cr_il, run_district_analysis, run_event_impact, run_ms_il, Dataset, PipelineError,
    Prepared, Report, RunConfig,
};
use stigmetrics::synth::{self, SynthConfig, SynthError};
use tracing::info;

#[derive(Parser)]
#[command(name = "stigmetrics", version, about = "Refugee integration metrics from call records")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). A run manifest is accepted too.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding antennas.csv, districts.csv, fgmd.csv, cgmd.csv and
    /// atd.csv; fills inputs the config leaves unset.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Base seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Abort on rows naming unknown antennas or districts (default).
    #[arg(long, global = true, conflicts_with = "lenient")]
    strict: bool,
    /// Skip and count rows naming unknown antennas or districts.
    #[arg(long, global = true)]
    lenient: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Load the inputs and print the selection funnel.
    IngestCheck,
    /// Activity and antenna-density rasters from ATD.
    GridActivity,
    /// Per-user and per-district metric tables.
    Metrics,
    /// Correlation of calling regularity with interaction level.
    CrIl,
    /// District-level analyses.
    District,
    /// Mobility similarity against interaction level.
    MsIl,
    /// Before/after comparison around configured events.
    EventImpact,
    /// Generate a synthetic dataset.
    Synth {
        /// Generator configuration (TOML); defaults otherwise.
        #[arg(long)]
        synth_config: Option<PathBuf>,
    },
    /// Every analysis and every table.
    ReportAll,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Self {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        let code = match e {
            SynthError::ConfigInvalid(_) => 2,
            SynthError::Io { .. } => 1,
            SynthError::Inconsistent { .. } => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &c.data {
        let i = &mut cfg.inputs;
        let fill = |slot: &mut Option<PathBuf>, name: &str| {
            let p = dir.join(name);
            if slot.is_none() && p.is_file() {
                // Absolute, so the manifest still points here when reloaded.
                *slot = Some(std::path::absolute(&p).unwrap_or(p));
            }
        };
        fill(&mut i.antennas, synth::ANTENNAS_FILE);
        fill(&mut i.districts, synth::DISTRICTS_FILE);
        fill(&mut i.fgmd, synth::FGMD_FILE);
        fill(&mut i.cgmd, synth::CGMD_FILE);
        fill(&mut i.atd, synth::ATD_FILE);
    }
    if let Some(s) = c.seed {
        cfg.stats.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output.dir = o.clone();
    }
    if c.lenient {
        cfg.ingest_mode = IngestMode::Lenient;
    } else if c.strict {
        cfg.ingest_mode = IngestMode::Strict;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Synth { synth_config } = &cli.command {
        return run_synth(&cli.common, synth_config.as_deref());
    }
    let cfg = load_config(&cli.common)?;
    let data = Dataset::load(&cfg)?;
    let prep = Prepared::new(&cfg, &data)?;
    let out = cfg.output.dir.as_path();
    let mut report = Report::new(&prep);
    match cli.command {
        Command::IngestCheck => {
            for f in &prep.funnel {
                println!("{:<32} {:>10} {}", f.stage, f.count, f.unit);
            }
            for (name, n) in &data.skipped_unknown_site {
                println!("{name}: {n} rows skipped (unknown site)");
            }
            if let Some(atd) = &data.atd {
                match synth::consistency_check(&data.fgmd, atd, &data.registry) {
                    Ok(r) => println!("FGMD and ATD agree on {} antenna-hours", r.antenna_hours),
                    Err(e) => println!("FGMD and ATD disagree: {e}"),
                }
            }
            return Ok(());
        }
        Command::GridActivity => return run_grid_activity(&prep, out),
        Command::Metrics => {
            let d = district_if_available(&prep)?;
            report.add_district(d.as_ref());
        }
        Command::CrIl => report.add_cr_il(&run_cr_il(&prep)?),
        Command::District => report.add_district(Some(&run_district_analysis(&prep)?)),
        Command::MsIl => report.add_ms_il(&run_ms_il(&prep)?),
        Command::EventImpact => {
            let ms = run_ms_il(&prep)?;
            report.add_events(&run_event_impact(&prep, &ms)?);
            report.add_ms_il(&ms);
        }
        Command::ReportAll => report.add_all(&run_all(&prep)?),
        Command::Synth { .. } => unreachable!("handled above"),
    }
    let written = emit_report(&report, &prep, out)?;
    info!(files = written.len(), "done");
    println!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}

fn district_if_available(prep: &Prepared) -> Result<Option<stigmetrics::pipeline::DistrictResult>, PipelineError> {
    if prep.data.cgmd.is_some() && prep.data.atd.is_some() {
        run_district_analysis(prep).map(Some)
    } else {
        Ok(None)
    }
}

fn run_grid_activity(prep: &Prepared, out: &Path) -> Result<(), Failure> {
    let atd = prep
        .data
        .atd
        .as_ref()
        .ok_or_else(|| PipelineError::Config("grid-activity needs an ATD input".into()))?;
    let reg = &prep.data.registry;
    let points: Vec<GeoPoint> = reg
        .antennas()
        .iter()
        .filter(|a| prep.area.contains(&a.district))
        .map(|a| a.location)
        .collect();
    let spec = GridSpec::covering(&points, prep.cfg.engine.cell_size_m, 1)
        .map_err(|e| PipelineError::Input(format!("grid: {e}")))?;
    let strict = prep.cfg.ingest_mode == IngestMode::Strict;
    let io = |p: &Path, e: std::io::Error| PipelineError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    };
    std::fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let in_area: Vec<_> = atd
        .iter()
        .filter(|t| prep.area.contains(&reg.antenna(t.out_antenna).district))
        .copied()
        .collect();
    let grid_err = |e: stigmetrics::geo::GeoError| PipelineError::Input(e.to_string());
    let rasters = [
        ("activity_refugee.csv", activity_grid(&in_area, reg, &spec, DurationVariant::Refugee, strict).map_err(grid_err)?),
        ("activity_total.csv", activity_grid(&in_area, reg, &spec, DurationVariant::Total, strict).map_err(grid_err)?),
        ("antenna_density.csv", antenna_density_grid(reg, &spec, strict).map_err(grid_err)?),
    ];
    for (name, r) in &rasters {
        let p = out.join(name);
        std::fs::write(&p, r.grid.to_csv()).map_err(|e| io(&p, e))?;
    }
    let p = out.join("grid.meta");
    std::fs::write(&p, spec.metadata()).map_err(|e| io(&p, e))?;
    println!("wrote {} rasters to {}", rasters.len(), out.display());
    Ok(())
}

fn run_synth(c: &Common, path: Option<&Path>) -> Result<(), Failure> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| PipelineError::Config(e.to_string()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("synth"));
    let data = synth::generate(&cfg)?;
    data.write_to(&out)?;
    let echo = toml::to_string(&cfg).map_err(|e| PipelineError::Invariant(e.to_string()))?;
    let p = out.join("synth_config.toml");
    std::fs::write(&p, echo).map_err(|e| PipelineError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    })?;
    println!("wrote {} calls for {} users to {}", data.fgmd.len(), data.users.len(), out.display());
    Ok(())
}
