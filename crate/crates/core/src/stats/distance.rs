use num_traits::Num;
use serde::{Deserialize, Serialize};

use super::StatsError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesMeasure {
    Euclidean,
    /// One minus cosine similarity.
    Cosine,
    Dtw,
}

impl SeriesMeasure {
    pub const ALL: [SeriesMeasure; 3] = [SeriesMeasure::Euclidean, SeriesMeasure::Cosine, SeriesMeasure::Dtw];

    pub fn name(self) -> &'static str {
        match self {
            SeriesMeasure::Euclidean => "euclidean",
            SeriesMeasure::Cosine => "cosine",
            SeriesMeasure::Dtw => "dtw",
        }
    }
}

#[inline]
fn abs_diff<T: Num + PartialOrd + Copy>(a: T, b: T) -> T {
    if a > b {
        a - b
    } else {
        b - a
    }
}

/// Dynamic time warping with absolute-difference cost, no window and no
/// length normalization. Works on integers too, which keeps exact
/// comparisons possible. Returns `None` if either series is empty.
pub fn dtw<T: Num + PartialOrd + Copy>(a: &[T], b: &[T]) -> Option<T> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let m = b.len();
    // Two rows of the cumulative cost table.
    let mut prev: Vec<T> = Vec::with_capacity(m);
    let mut cur: Vec<T> = vec![T::zero(); m];
    let mut acc = T::zero();
    for &bj in b {
        acc = acc + abs_diff(a[0], bj);
        prev.push(acc);
    }
    for &ai in &a[1..] {
        cur[0] = prev[0] + abs_diff(ai, b[0]);
        for j in 1..m {
            let mut best = prev[j - 1];
            if prev[j] < best {
                best = prev[j];
            }
            if cur[j - 1] < best {
                best = cur[j - 1];
            }
            cur[j] = best + abs_diff(ai, b[j]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Some(prev[m - 1])
}

pub fn series_distance<T: Scalar>(a: &[T], b: &[T], measure: SeriesMeasure) -> Result<T, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    match measure {
        SeriesMeasure::Dtw => Ok(dtw(a, b).expect("non-empty")),
        SeriesMeasure::Euclidean | SeriesMeasure::Cosine if a.len() != b.len() => {
            Err(StatsError::LengthMismatch(a.len(), b.len()))
        }
        SeriesMeasure::Euclidean => Ok(a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum::<T>().sqrt()),
        SeriesMeasure::Cosine => {
            let dot: T = a.iter().zip(b).map(|(x, y)| *x * *y).sum();
            let na: T = a.iter().map(|x| *x * *x).sum();
            let nb: T = b.iter().map(|x| *x * *x).sum();
            if na == T::zero() || nb == T::zero() {
                return Err(StatsError::ZeroVector);
            }
            let cos = (dot / (na * nb).sqrt()).min(T::one()).max(-T::one());
            Ok(T::one() - cos)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let a = [1.0, 2.0, 3.0];
        for m in SeriesMeasure::ALL {
            assert_eq!(series_distance(&a, &a, m).unwrap(), 0.0);
        }
        assert_eq!(dtw(&[1, 2, 3], &[1, 3]), Some(1));
        assert_eq!(dtw(&[0, 0, 0], &[1, 1, 1]), Some(3));
        assert_eq!(dtw::<i64>(&[], &[1]), None);
        assert_eq!(series_distance(&[3.0, 4.0], &[0.0, 0.0], SeriesMeasure::Euclidean).unwrap(), 5.0);
        assert_eq!(series_distance(&[1.0, 0.0], &[0.0, 1.0], SeriesMeasure::Cosine).unwrap(), 1.0);
        assert_eq!(
            series_distance(&[0.0, 0.0], &[0.0, 1.0], SeriesMeasure::Cosine),
            Err(StatsError::ZeroVector)
        );
        assert_eq!(
            series_distance(&[1.0], &[1.0, 2.0], SeriesMeasure::Euclidean),
            Err(StatsError::LengthMismatch(1, 2))
        );
    }

    proptest! {
        #[test]
        fn dtw_properties(a in prop::collection::vec(-50i64..50, 1..12), b in prop::collection::vec(-50i64..50, 1..12)) {
            let d = dtw(&a, &b).unwrap();
            prop_assert!(d >= 0);
            prop_assert_eq!(d, dtw(&b, &a).unwrap());
            if a.len() == b.len() {
                let diag: i64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
                prop_assert!(d <= diag);
            }
            prop_assert_eq!(dtw(&a, &a).unwrap(), 0);
        }
    }
}
