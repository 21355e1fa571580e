use rayon::prelude::*;

use super::{derive_seed, stats_reason, PipelineError, Prepared, SeedLog, Skip};
use crate::metrics::CrMissingMode;
use crate::stats::{pearson, quantile_sorted, quartiles, sorted_finite};

#[derive(Debug, Clone, PartialEq)]
pub struct CrIlPeriodRow {
    pub period: u32,
    pub mode: CrMissingMode,
    pub n: usize,
    pub r: f64,
    pub p: f64,
}

/// Distribution of the per-period coefficients for one CR mode.
#[derive(Debug, Clone, PartialEq)]
pub struct CrIlSummaryRow {
    pub mode: CrMissingMode,
    pub n_periods: usize,
    pub r_q1: f64,
    pub r_median: f64,
    pub r_q3: f64,
    /// 2.5% and 97.5% quantiles of the p-values.
    pub p_lo: f64,
    pub p_hi: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CrIlResult {
    pub rows: Vec<CrIlPeriodRow>,
    pub summary: Vec<CrIlSummaryRow>,
    pub skips: Vec<Skip>,
    pub seeds: SeedLog,
}

pub fn mode_name(mode: CrMissingMode) -> &'static str {
    match mode {
        CrMissingMode::Zeros => "zeros",
        CrMissingMode::PairwiseComplete => "pairwise_complete",
    }
}

/// Per-period correlation between refugees' CR and IL, in both CR modes.
pub fn run_cr_il(prep: &Prepared) -> Result<CrIlResult, PipelineError> {
    let stats = &prep.cfg.stats;
    let modes = [CrMissingMode::Zeros, CrMissingMode::PairwiseComplete];
    let items: Vec<(usize, CrMissingMode)> = (0..prep.periods.len())
        .flat_map(|i| modes.map(|m| (i, m)))
        .collect();
    let outcomes: Vec<_> = items
        .par_iter()
        .map(|&(i, mode)| {
            let pd = &prep.periods[i];
            let (cr, il): (Vec<f64>, Vec<f64>) = pd
                .refugees
                .values()
                .filter_map(|m| {
                    let cr = match mode {
                        CrMissingMode::Zeros => m.cr,
                        CrMissingMode::PairwiseComplete => m.cr_pairwise,
                    };
                    cr.map(|c| (c, m.il))
                })
                .unzip();
            let seed = derive_seed(stats.seed, "cr_il", &[u64::from(pd.period.index), mode as u64]);
            (pd.period.index, mode, seed, pearson(&cr, &il, stats.n_perm, seed))
        })
        .collect();

    let mut out = CrIlResult::default();
    for (period, mode, seed, res) in outcomes {
        let item = format!("period {period} mode {}", mode_name(mode));
        match res {
            Ok(c) => {
                out.seeds.record("cr_il", &item, seed);
                out.rows.push(CrIlPeriodRow {
                    period,
                    mode,
                    n: c.n,
                    r: c.r,
                    p: c.p,
                });
            }
            Err(e) => out.skips.push(Skip::new("cr_il", item, stats_reason(&e), e.to_string())),
        }
    }
    for mode in modes {
        let rs: Vec<f64> = out.rows.iter().filter(|r| r.mode == mode).map(|r| r.r).collect();
        let ps: Vec<f64> = out.rows.iter().filter(|r| r.mode == mode).map(|r| r.p).collect();
        let Ok((q1, q2, q3)) = quartiles(&rs) else {
            continue;
        };
        let ps = sorted_finite(&ps).expect("p-values present with r");
        out.summary.push(CrIlSummaryRow {
            mode,
            n_periods: rs.len(),
            r_q1: q1,
            r_median: q2,
            r_q3: q3,
            p_lo: quantile_sorted(&ps, 0.025),
            p_hi: quantile_sorted(&ps, 0.975),
        });
    }
    Ok(out)
}
