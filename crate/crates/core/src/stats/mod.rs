//! Correlation, quartiles, series distances, spatial weights, spatial lag
//! regression and Moran's I.

pub mod distance;
pub mod linalg;
pub mod spatial;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoError;
use crate::scalar::Scalar;

pub use distance::{dtw, series_distance, SeriesMeasure};
pub use spatial::{
    build_weight_matrix, morans_i, spatial_lag_regress, MoranResult, SpatialModel, WeightConstruction, WeightMatrix,
};

pub const DEFAULT_PERMUTATIONS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("input has zero variance")]
    ZeroVariance,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("empty input")]
    Empty,
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("zero vector")]
    ZeroVector,
    #[error("weight matrix has no non-zero weights")]
    ZeroWeights,
    #[error("design matrix is singular")]
    SingularDesign,
    #[error("I - rho W is singular at every probe")]
    NonInvertible,
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Random stream for permutation `k`. Each permutation gets its own stream
/// so results do not depend on evaluation order or thread count.
pub fn permutation_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CorrelationMethod {
    PermutationP,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult<T = f64> {
    pub r: T,
    pub p: T,
    pub n: usize,
    pub n_perm: usize,
    pub method: CorrelationMethod,
}

fn check_finite<T: Scalar>(xs: &[T]) -> Result<(), StatsError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

fn is_constant<T: Scalar>(xs: &[T]) -> bool {
    xs.iter().all(|x| *x == xs[0])
}

pub fn mean<T: Scalar>(xs: &[T]) -> Option<T> {
    (!xs.is_empty()).then(|| xs.iter().copied().sum::<T>() / T::from_count(xs.len()))
}

fn centered<T: Scalar>(xs: &[T]) -> Vec<T> {
    let m = mean(xs).expect("non-empty");
    xs.iter().map(|x| *x - m).collect()
}

/// Product-moment correlation coefficient without a p-value.
pub fn pearson_r<T: Scalar>(x: &[T], y: &[T]) -> Result<T, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFewSamples { needed: 3, got: x.len() });
    }
    check_finite(x)?;
    check_finite(y)?;
    if is_constant(x) || is_constant(y) {
        return Err(StatsError::ZeroVariance);
    }
    let (xc, yc) = (centered(x), centered(y));
    let sxy: T = xc.iter().zip(&yc).map(|(a, b)| *a * *b).sum();
    let sxx: T = xc.iter().map(|a| *a * *a).sum();
    let syy: T = yc.iter().map(|a| *a * *a).sum();
    Ok((sxy / (sxx * syy).sqrt()).max(-T::one()).min(T::one()))
}

/// Pearson correlation with a two-sided permutation p-value:
/// `p = (1 + #{|r_perm| ≥ |r|}) / (n_perm + 1)`, permuting `y`.
pub fn pearson<T: Scalar>(x: &[T], y: &[T], n_perm: usize, seed: u64) -> Result<CorrelationResult<T>, StatsError> {
    let r = pearson_r(x, y)?;
    let (xc, yc) = (centered(x), centered(y));
    let sxx: T = xc.iter().map(|a| *a * *a).sum();
    let syy: T = yc.iter().map(|a| *a * *a).sum();
    let denom = (sxx * syy).sqrt();
    // Permutations that tie with the observed statistic count as extreme.
    let threshold = r.abs() * (T::one() - T::lit(1e-12));
    let hits: usize = (0..n_perm)
        .into_par_iter()
        .map_init(
            || yc.clone(),
            |buf, k| {
                buf.copy_from_slice(&yc);
                buf.shuffle(&mut permutation_rng(seed, k));
                let s: T = xc.iter().zip(buf.iter()).map(|(a, b)| *a * *b).sum();
                usize::from((s / denom).abs() >= threshold)
            },
        )
        .sum();
    Ok(CorrelationResult {
        r,
        p: T::from_count(1 + hits) / T::from_count(n_perm + 1),
        n: x.len(),
        n_perm,
        method: CorrelationMethod::PermutationP,
    })
}

/// Value at fraction `p` of the sorted sample, interpolating linearly
/// between order statistics at rank `p·(n−1)`.
pub fn quantile_sorted<T: Scalar>(sorted: &[T], p: T) -> T {
    let pos = p * T::from_count(sorted.len() - 1);
    let lo = pos.floor().to_usize().unwrap_or(0).min(sorted.len() - 1);
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - T::from_count(lo);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn sorted_finite<T: Scalar>(xs: &[T]) -> Result<Vec<T>, StatsError> {
    if xs.is_empty() {
        return Err(StatsError::Empty);
    }
    check_finite(xs)?;
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok(v)
}

/// First, second and third quartiles.
pub fn quartiles<T: Scalar>(xs: &[T]) -> Result<(T, T, T), StatsError> {
    let v = sorted_finite(xs)?;
    Ok((
        quantile_sorted(&v, T::lit(0.25)),
        quantile_sorted(&v, T::lit(0.5)),
        quantile_sorted(&v, T::lit(0.75)),
    ))
}

/// `(x − min)/(max − min)`. A constant input maps to zeros and the flag is
/// set.
pub fn min_max_normalize<T: Scalar>(xs: &[T]) -> (Vec<T>, bool) {
    let Some(&first) = xs.first() else {
        return (Vec::new(), false);
    };
    let (lo, hi) = xs.iter().fold((first, first), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if hi == lo {
        return (vec![T::zero(); xs.len()], true);
    }
    (xs.iter().map(|&x| (x - lo) / (hi - lo)).collect(), false)
}
