use std::collections::BTreeMap;

use chrono::{Datelike, Days, NaiveDate};

use super::{MsIlResult, PctMode, PipelineError, Prepared, Skip};
use crate::cdr::{UserClass, UserKey};
use crate::stats::{mean, quartiles};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventMeasure {
    Ms,
    PctCallsToLocals,
}

impl EventMeasure {
    pub fn name(self) -> &'static str {
        match self {
            EventMeasure::Ms => "ms",
            EventMeasure::PctCallsToLocals => "pct_calls_to_locals",
        }
    }
}

/// Before and after values, each divided by the measure's mean over all
/// periods. A ratio above 1 means the measure fell after the event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventImpactRow {
    pub date: NaiveDate,
    pub label: String,
    pub group: usize,
    pub measure: EventMeasure,
    pub before: f64,
    pub after: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventSummaryRow {
    pub group: usize,
    pub measure: EventMeasure,
    pub n_events: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventResult {
    pub rows: Vec<EventImpactRow>,
    pub summary: Vec<EventSummaryRow>,
    pub skips: Vec<Skip>,
}

/// The `window` days before and after `date`, both excluding it. Errors when
/// either side leaves the study year.
pub fn event_windows(date: NaiveDate, window: u32, year: i32) -> Result<[(NaiveDate, NaiveDate); 2], PipelineError> {
    let w = Days::new(u64::from(window));
    let first = date.checked_sub_days(w);
    let last = date.checked_add_days(w);
    match (first, last) {
        (Some(f), Some(l)) if f.year() == year && l.year() == year && date.year() == year => {
            Ok([(f, date.pred_opt().expect("after first")), (date.succ_opt().expect("before last"), l)])
        }
        _ => Err(PipelineError::EventTooCloseToYearEdge(date.to_string())),
    }
}

fn in_range(d: NaiveDate, (a, b): (NaiveDate, NaiveDate)) -> bool {
    d >= a && d <= b
}

fn ratio(before: f64, after: f64) -> f64 {
    before / after
}

/// Before/after comparison of each IL group's MS and share of calls to
/// locals around every configured event.
pub fn run_event_impact(prep: &Prepared, ms: &MsIlResult) -> Result<EventResult, PipelineError> {
    let cfg = prep.cfg;
    let n_groups = cfg.stats.n_groups;
    let window = cfg.event_impact.window_days;
    let mut out = EventResult::default();
    let windows: Vec<_> = cfg
        .events
        .iter()
        .map(|e| event_windows(e.date, window, cfg.study.year))
        .collect::<Result<_, _>>()?;

    // Per-period normalizers.
    let mut ms_norm: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(_, g, v) in &ms.period_ms {
        ms_norm.entry(g).or_default().push(v);
    }
    let mut pct_norm: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for pd in &prep.periods {
        for g in 1..=n_groups {
            let members: Vec<_> = pd.refugees.values().filter(|m| m.group == g).collect();
            if members.is_empty() {
                continue;
            }
            let v = match cfg.stats.pct_mode {
                PctMode::Pooled => {
                    let l: u64 = members.iter().map(|m| m.calls_to_local).sum();
                    let t: u64 = members.iter().map(|m| m.calls_known).sum();
                    l as f64 / t as f64
                }
                PctMode::PerUserMean => mean(&members.iter().map(|m| m.il).collect::<Vec<_>>()).expect("non-empty"),
            };
            pct_norm.entry(g).or_default().push(v);
        }
    }
    let daily = ms.daily_means();

    for (ev, [before_w, after_w]) in cfg.events.iter().zip(windows) {
        // Calls by group member inside each window: per user (to_local, known).
        let mut counts: [BTreeMap<(usize, UserKey), (u64, u64)>; 2] = [BTreeMap::new(), BTreeMap::new()];
        for r in &prep.known {
            if r.caller_class != UserClass::Refugee {
                continue;
            }
            let d = r.date();
            let side = if in_range(d, before_w) {
                0
            } else if in_range(d, after_w) {
                1
            } else {
                continue;
            };
            let Some(g) = prep.group_on(r.caller, d) else { continue };
            let e = counts[side].entry((g, r.caller)).or_default();
            e.0 += u64::from(r.callee == Some(UserClass::Local));
            e.1 += 1;
        }
        for g in 1..=n_groups {
            let item = format!("{} il{g}", ev.date);
            let ms_side = |w: (NaiveDate, NaiveDate)| {
                mean(&daily.iter().filter(|((d, k), _)| *k == g && in_range(*d, w)).map(|(_, v)| *v).collect::<Vec<_>>())
            };
            let pct_side = |side: usize| {
                let users: Vec<(u64, u64)> = counts[side].iter().filter(|((k, _), _)| *k == g).map(|(_, v)| *v).collect();
                match cfg.stats.pct_mode {
                    PctMode::Pooled => {
                        let t: u64 = users.iter().map(|u| u.1).sum();
                        (t > 0).then(|| users.iter().map(|u| u.0).sum::<u64>() as f64 / t as f64)
                    }
                    PctMode::PerUserMean => mean(&users.iter().map(|u| u.0 as f64 / u.1 as f64).collect::<Vec<_>>()),
                }
            };
            let measures = [
                (EventMeasure::Ms, ms_side(before_w), ms_side(after_w), ms_norm.get(&g)),
                (EventMeasure::PctCallsToLocals, pct_side(0), pct_side(1), pct_norm.get(&g)),
            ];
            for (measure, before, after, norm) in measures {
                let norm = norm.and_then(|v| mean(v));
                match (before, after, norm) {
                    (Some(b), Some(a), Some(n)) if n > 0.0 => out.rows.push(EventImpactRow {
                        date: ev.date,
                        label: ev.label.clone(),
                        group: g,
                        measure,
                        before: b / n,
                        after: a / n,
                        ratio: ratio(b / n, a / n),
                    }),
                    _ => out.skips.push(Skip::new(
                        "event_impact",
                        format!("{item} {}", measure.name()),
                        "no_data",
                        "measure undefined in a window or over the periods",
                    )),
                }
            }
        }
    }

    for g in 1..=n_groups {
        for measure in [EventMeasure::Ms, EventMeasure::PctCallsToLocals] {
            let rs: Vec<f64> = out
                .rows
                .iter()
                .filter(|r| r.group == g && r.measure == measure && r.ratio.is_finite())
                .map(|r| r.ratio)
                .collect();
            if let Ok((q1, median, q3)) = quartiles(&rs) {
                out.summary.push(EventSummaryRow {
                    group: g,
                    measure,
                    n_events: rs.len(),
                    q1,
                    median,
                    q3,
                });
            }
        }
    }
    Ok(out)
}
