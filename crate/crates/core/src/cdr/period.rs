use std::collections::BTreeMap;

use chrono::{Datelike, Months, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{CallRecord, CdrError};

pub const TWO_WEEK_DAYS: u32 = 14;
pub const TWO_WEEK_PERIODS: u32 = 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeriodScheme {
    /// 26 consecutive 14-day periods from January 1; trailing days are discarded.
    TwoWeeks,
    CalendarMonth,
}

/// One analysis period of a study year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Period {
    /// 1-based position within the year.
    pub index: u32,
    pub start: NaiveDate,
    pub scheme: PeriodScheme,
}

impl Period {
    /// First day after the period.
    pub fn end(&self) -> NaiveDate {
        match self.scheme {
            PeriodScheme::TwoWeeks => self.start + chrono::Days::new(TWO_WEEK_DAYS as u64),
            PeriodScheme::CalendarMonth => self.start + Months::new(1),
        }
    }

    pub fn days(&self) -> u32 {
        (self.end() - self.start).num_days() as u32
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        date >= self.start && date < self.end()
    }
}

impl PeriodScheme {
    /// Every period of the study year, in order.
    pub fn periods(self, year: i32) -> Vec<Period> {
        let jan1 = NaiveDate::from_ymd_opt(year, 1, 1).expect("valid study year");
        match self {
            PeriodScheme::TwoWeeks => (0..TWO_WEEK_PERIODS)
                .map(|i| Period {
                    index: i + 1,
                    start: jan1 + chrono::Days::new((i * TWO_WEEK_DAYS) as u64),
                    scheme: self,
                })
                .collect(),
            PeriodScheme::CalendarMonth => (0..12)
                .map(|i| Period {
                    index: i + 1,
                    start: jan1 + Months::new(i),
                    scheme: self,
                })
                .collect(),
        }
    }

    /// Period holding `date`: `Ok(None)` for the two-week remainder days,
    /// an error when the date is outside the study year.
    pub fn period_of(self, date: NaiveDate, year: i32) -> Result<Option<Period>, CdrError> {
        if date.year() != year {
            return Err(CdrError::TimestampOutOfStudyYear {
                date: date.to_string(),
                year,
            });
        }
        let jan1 = NaiveDate::from_ymd_opt(year, 1, 1).expect("valid study year");
        Ok(match self {
            PeriodScheme::TwoWeeks => {
                let idx = date.ordinal0() / TWO_WEEK_DAYS;
                (idx < TWO_WEEK_PERIODS).then(|| Period {
                    index: idx + 1,
                    start: jan1 + chrono::Days::new((idx * TWO_WEEK_DAYS) as u64),
                    scheme: self,
                })
            }
            PeriodScheme::CalendarMonth => Some(Period {
                index: date.month(),
                start: NaiveDate::from_ymd_opt(year, date.month(), 1).expect("valid month"),
                scheme: self,
            }),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PeriodPartition {
    pub periods: BTreeMap<Period, Vec<CallRecord>>,
    /// Records on days not covered by any period.
    pub discarded: usize,
}

/// Assigns every record to its period. Input order is preserved within each
/// period.
pub fn partition_periods(records: &[CallRecord], scheme: PeriodScheme, year: i32) -> Result<PeriodPartition, CdrError> {
    let mut out = PeriodPartition::default();
    for rec in records {
        match scheme.period_of(rec.timestamp.date(), year)? {
            Some(p) => out.periods.entry(p).or_default().push(*rec),
            None => out.discarded += 1,
        }
    }
    Ok(out)
}
