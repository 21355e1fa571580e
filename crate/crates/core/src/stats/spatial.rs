//! Spatial weights, maximum-likelihood spatial lag regression and Moran's I.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::linalg::{least_squares, Lu, Matrix};
use super::{check_finite, is_constant, permutation_rng, StatsError};
use crate::geo::DistanceMatrix;
use crate::scalar::Scalar;

/// Search interval for the spatial coefficient.
pub const RHO_BOUND: f64 = 0.999;
pub const RHO_TOLERANCE: f64 = 1e-6;
const RHO_GRID_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WeightConstruction<T = f64> {
    /// Min-max scaled distances used directly as weights, so far-apart
    /// districts weigh more than near ones.
    MinMaxDistance,
    /// `1/d'` where `d'` is the distance min-max scaled onto `[epsilon, 1]`.
    InverseDistance { epsilon: T },
}

impl<T: Scalar> WeightConstruction<T> {
    pub fn name(&self) -> &'static str {
        match self {
            WeightConstruction::MinMaxDistance => "min_max_distance",
            WeightConstruction::InverseDistance { .. } => "inverse_distance",
        }
    }
}

/// Dense non-negative spatial weights with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix<T = f64> {
    pub n: usize,
    pub values: Vec<T>,
    pub row_standardized: bool,
    /// Rows whose weights were all zero and so could not be standardized.
    pub zero_rows: Vec<usize>,
}

impl<T: Scalar> WeightMatrix<T> {
    pub fn from_dense(n: usize, values: Vec<T>) -> Result<Self, StatsError> {
        if values.len() != n * n {
            return Err(StatsError::LengthMismatch(values.len(), n * n));
        }
        check_finite(&values)?;
        if values.iter().any(|v| *v < T::zero()) || (0..n).any(|i| values[i * n + i] != T::zero()) {
            return Err(StatsError::Geo(crate::geo::GeoError::DegenerateGeometry(
                "weights must be non-negative with a zero diagonal".into(),
            )));
        }
        Ok(Self {
            n,
            values,
            row_standardized: false,
            zero_rows: Vec::new(),
        })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            values: vec![T::zero(); n * n],
            row_standardized: false,
            zero_rows: Vec::new(),
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.n + j]
    }

    /// Sum of all weights.
    pub fn s0(&self) -> T {
        self.values.iter().copied().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == T::zero())
    }

    /// Scales every row to sum to one. All-zero rows stay zero and are
    /// recorded in `zero_rows`.
    pub fn row_standardize(mut self) -> Self {
        let n = self.n;
        self.zero_rows.clear();
        for i in 0..n {
            let row = &mut self.values[i * n..(i + 1) * n];
            let s: T = row.iter().copied().sum();
            if s > T::zero() {
                row.iter_mut().for_each(|v| *v /= s);
            } else {
                self.zero_rows.push(i);
            }
        }
        self.row_standardized = true;
        self
    }

    pub fn lag(&self, v: &[T]) -> Vec<T> {
        let n = self.n;
        (0..n)
            .map(|i| self.values[i * n..(i + 1) * n].iter().zip(v).map(|(w, x)| *w * *x).sum())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| self.get(i, j).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn build_weight_matrix<T: Scalar>(
    dm: &DistanceMatrix<T>,
    construction: WeightConstruction<T>,
    row_standardize: bool,
) -> Result<WeightMatrix<T>, StatsError> {
    let n = dm.n;
    if n < 2 {
        return Err(StatsError::TooFewSamples { needed: 2, got: n });
    }
    let scaled = dm.min_max_normalized()?;
    let mut values = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = scaled.get(i, j);
            values[i * n + j] = match construction {
                WeightConstruction::MinMaxDistance => d,
                WeightConstruction::InverseDistance { epsilon } => T::one() / (epsilon + (T::one() - epsilon) * d),
            };
        }
    }
    let w = WeightMatrix::from_dense(n, values)?;
    Ok(if row_standardize { w.row_standardize() } else { w })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoranResult<T = f64> {
    pub i: T,
    /// Two-sided permutation p-value around the null expectation.
    pub p: T,
    /// `−1/(n−1)`.
    pub expected: T,
    /// Mean of the statistic over the permutations.
    pub perm_mean: T,
    /// Standard deviation of the statistic over the permutations.
    pub perm_sd: T,
    pub n_perm: usize,
}

fn moran_stat<T: Scalar>(z: &[T], w: &WeightMatrix<T>, s0: T, zz: T) -> T {
    let lag = w.lag(z);
    let num: T = z.iter().zip(&lag).map(|(a, b)| *a * *b).sum();
    T::from_count(z.len()) / s0 * num / zz
}

/// Moran's I with a two-sided permutation p-value centered at `−1/(n−1)`.
pub fn morans_i<T: Scalar>(
    values: &[T],
    w: &WeightMatrix<T>,
    n_perm: usize,
    seed: u64,
) -> Result<MoranResult<T>, StatsError> {
    let n = values.len();
    if n != w.n {
        return Err(StatsError::LengthMismatch(n, w.n));
    }
    if n < 4 {
        return Err(StatsError::TooFewSamples { needed: 4, got: n });
    }
    check_finite(values)?;
    if is_constant(values) {
        return Err(StatsError::ZeroVariance);
    }
    let s0 = w.s0();
    if s0 == T::zero() {
        return Err(StatsError::ZeroWeights);
    }
    let z = super::centered(values);
    let zz: T = z.iter().map(|a| *a * *a).sum();
    let i = moran_stat(&z, w, s0, zz);
    let expected = -T::one() / T::from_count(n - 1);
    let threshold = (i - expected).abs() * (T::one() - T::lit(1e-12));
    let stats: Vec<T> = (0..n_perm)
        .into_par_iter()
        .map_init(
            || z.clone(),
            |buf, k| {
                buf.copy_from_slice(&z);
                buf.shuffle(&mut permutation_rng(seed, k));
                moran_stat(buf, w, s0, zz)
            },
        )
        .collect();
    let hits = stats.iter().filter(|s| (**s - expected).abs() >= threshold).count();
    let (perm_mean, perm_sd) = if stats.is_empty() {
        (T::nan(), T::nan())
    } else {
        let m = stats.iter().copied().sum::<T>() / T::from_count(stats.len());
        let var = stats.iter().map(|s| (*s - m) * (*s - m)).sum::<T>() / T::from_count(stats.len());
        (m, var.sqrt())
    };
    Ok(MoranResult {
        i,
        p: T::from_count(1 + hits) / T::from_count(n_perm + 1),
        expected,
        perm_mean,
        perm_sd,
        n_perm,
    })
}

/// Fitted spatial lag model `y = ρWy + Xβ + ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialModel<T = f64> {
    pub rho: T,
    /// Intercept first, then one coefficient per predictor column.
    pub beta: Vec<T>,
    pub mse: T,
    pub log_likelihood: T,
    /// `(I − ρW)⁻¹ X β`.
    pub fitted: Vec<T>,
    pub residuals: Vec<T>,
    pub w: WeightMatrix<T>,
    pub moran_pred: Option<MoranResult<T>>,
    pub moran_resid: Option<MoranResult<T>>,
}

impl<T: Scalar> SpatialModel<T> {
    /// Fills the Moran's I fields for the fitted values and the residuals.
    /// Each stays `None` when the statistic is undefined (no weights, or a
    /// constant series).
    pub fn with_moran(mut self, n_perm: usize, seed: u64) -> Self {
        self.moran_pred = morans_i(&self.fitted, &self.w, n_perm, seed).ok();
        self.moran_resid = morans_i(&self.residuals, &self.w, n_perm, seed.wrapping_add(1)).ok();
        self
    }
}

struct LagProblem<'a, T> {
    y: &'a [T],
    wy: Vec<T>,
    design: Matrix<T>,
    w: &'a WeightMatrix<T>,
}

impl<T: Scalar> LagProblem<'_, T> {
    fn i_minus_rho_w(&self, rho: T) -> Matrix<T> {
        let n = self.w.n;
        let mut a = Matrix::identity(n);
        for (k, v) in self.w.values.iter().enumerate() {
            a.data[k] -= rho * *v;
        }
        a
    }

    /// Concentrated log-likelihood (constants dropped) and β at `rho`.
    fn evaluate(&self, rho: T) -> Result<Option<(T, Vec<T>)>, StatsError> {
        let Some(lu) = Lu::new(self.i_minus_rho_w(rho)) else {
            return Ok(None);
        };
        let ay: Vec<T> = self.y.iter().zip(&self.wy).map(|(y, wy)| *y - rho * *wy).collect();
        let beta = least_squares(&self.design, &ay).ok_or(StatsError::SingularDesign)?;
        let fit = self.design.mul_vec(&beta);
        let n = T::from_count(self.y.len());
        let sse: T = ay.iter().zip(&fit).map(|(a, f)| (*a - *f) * (*a - *f)).sum();
        let sigma2 = sse / n;
        // A perfect fit has unbounded likelihood; floor sigma² so the search
        // still prefers it without producing infinities.
        let sigma2 = sigma2.max(T::min_positive_value());
        let ll = -n / T::lit(2.0) * sigma2.ln() + lu.ln_abs_det();
        Ok(ll.is_finite().then_some((ll, beta)))
    }
}

/// Maximum-likelihood spatial lag regression. `x` holds one row per
/// observation; an intercept column is added. ρ is found by a coarse grid
/// scan over `(−0.999, 0.999)` followed by golden-section refinement to
/// 1e−6. Probes where `I − ρW` is singular are skipped.
pub fn spatial_lag_regress<T: Scalar>(
    y: &[T],
    x: &[Vec<T>],
    w: &WeightMatrix<T>,
) -> Result<SpatialModel<T>, StatsError> {
    let n = y.len();
    if x.len() != n {
        return Err(StatsError::LengthMismatch(n, x.len()));
    }
    if w.n != n {
        return Err(StatsError::LengthMismatch(n, w.n));
    }
    let k = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != k) {
        return Err(StatsError::SingularDesign);
    }
    if n <= k + 2 {
        return Err(StatsError::TooFewSamples { needed: k + 3, got: n });
    }
    check_finite(y)?;
    for r in x {
        check_finite(r)?;
    }
    let mut design = Matrix::zeros(n, k + 1);
    for (i, row) in x.iter().enumerate() {
        design[(i, 0)] = T::one();
        for (j, v) in row.iter().enumerate() {
            design[(i, j + 1)] = *v;
        }
    }
    let problem = LagProblem {
        y,
        wy: w.lag(y),
        design,
        w,
    };

    let (rho, (ll, beta)) = if w.is_zero() {
        (T::zero(), problem.evaluate(T::zero())?.ok_or(StatsError::NonInvertible)?)
    } else {
        maximize_rho(&problem)?
    };

    let lu = Lu::new(problem.i_minus_rho_w(rho)).ok_or(StatsError::NonInvertible)?;
    let fitted = lu.solve(&problem.design.mul_vec(&beta));
    let residuals: Vec<T> = y.iter().zip(&fitted).map(|(a, f)| *a - *f).collect();
    let mse = residuals.iter().map(|r| *r * *r).sum::<T>() / T::from_count(n);
    Ok(SpatialModel {
        rho,
        beta,
        mse,
        log_likelihood: ll,
        fitted,
        residuals,
        w: w.clone(),
        moran_pred: None,
        moran_resid: None,
    })
}

fn maximize_rho<T: Scalar>(p: &LagProblem<'_, T>) -> Result<(T, (T, Vec<T>)), StatsError> {
    let bound = RHO_BOUND;
    let steps = (2.0 * bound / RHO_GRID_STEP).round() as usize;
    let mut best: Option<(f64, T)> = None;
    for s in 0..=steps {
        let rho = -bound + s as f64 * (2.0 * bound / steps as f64);
        if let Some((ll, _)) = p.evaluate(T::lit(rho))? {
            if best.is_none_or(|(_, b)| ll > b) {
                best = Some((rho, ll));
            }
        }
    }
    let (center, _) = best.ok_or(StatsError::NonInvertible)?;
    let h = 2.0 * bound / steps as f64;
    let (mut lo, mut hi) = ((center - h).max(-bound), (center + h).min(bound));

    let f = |rho: f64| -> Result<f64, StatsError> {
        Ok(p.evaluate(T::lit(rho))?.map_or(f64::NEG_INFINITY, |(ll, _)| ll.as_f64()))
    };
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a)?, f(b)?);
    while hi - lo > RHO_TOLERANCE {
        if fa >= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a)?;
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b)?;
        }
    }
    // Keep the better of the refined point and the grid point.
    let mut candidates = vec![0.5 * (lo + hi), center];
    candidates.dedup();
    let mut out: Option<(T, (T, Vec<T>))> = None;
    for c in candidates {
        if let Some(ev) = p.evaluate(T::lit(c))? {
            if out.as_ref().is_none_or(|(_, (ll, _))| ev.0 > *ll) {
                out = Some((T::lit(c), ev));
            }
        }
    }
    out.ok_or(StatsError::NonInvertible)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::DistanceMatrix;

    fn ring4() -> WeightMatrix<f64> {
        let mut v = vec![0.0; 16];
        for i in 0..4 {
            v[i * 4 + (i + 1) % 4] = 1.0;
            v[i * 4 + (i + 3) % 4] = 1.0;
        }
        WeightMatrix::from_dense(4, v).unwrap().row_standardize()
    }

    #[test]
    fn weight_matrix_examples() {
        let dm = DistanceMatrix::from_rows(3, vec![0.0, 5.0, 10.0, 5.0, 0.0, 15.0, 10.0, 15.0, 0.0]).unwrap();
        for c in [WeightConstruction::MinMaxDistance, WeightConstruction::InverseDistance { epsilon: 0.1 }] {
            let w = build_weight_matrix(&dm, c, true).unwrap();
            for i in 0..3 {
                assert_eq!(w.get(i, i), 0.0);
                let s: f64 = (0..3).map(|j| w.get(i, j)).sum();
                assert!(w.zero_rows.contains(&i) || (s - 1.0).abs() < 1e-12);
            }
        }
        let raw = build_weight_matrix(&dm, WeightConstruction::MinMaxDistance, false).unwrap();
        assert_eq!(raw.get(0, 1), 0.0);
        assert_eq!(raw.get(0, 2), 0.5);
        assert_eq!(raw.get(1, 2), 1.0);
        let inv = build_weight_matrix(&dm, WeightConstruction::InverseDistance { epsilon: 0.1 }, false).unwrap();
        assert!((inv.get(0, 1) - 10.0).abs() < 1e-12);
        assert!((inv.get(1, 2) - 1.0).abs() < 1e-12);

        let two = DistanceMatrix::from_rows(2, vec![0.0, 3.0, 3.0, 0.0]).unwrap();
        let w = build_weight_matrix(&two, WeightConstruction::MinMaxDistance, true).unwrap();
        assert_eq!(w.values, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn moran_ring_alternating() {
        let res = morans_i(&[1.0, -1.0, 1.0, -1.0], &ring4(), 999, 3).unwrap();
        assert!((res.i + 1.0).abs() < 1e-15);
        assert!(res.p > 0.0 && res.p <= 1.0);
        assert_eq!(morans_i(&[2.0; 4], &ring4(), 10, 3), Err(StatsError::ZeroVariance));
        assert_eq!(morans_i(&[1.0, 2.0, 3.0, 4.0], &WeightMatrix::zeros(4), 10, 3), Err(StatsError::ZeroWeights));
    }

    #[test]
    fn zero_weights_reduce_to_ols() {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, ((i * 7) % 5) as f64]).collect();
        let y: Vec<f64> = x.iter().enumerate().map(|(i, r)| 1.0 + 2.0 * r[0] - 0.5 * r[1] + 0.01 * ((i % 3) as f64)).collect();
        let m = spatial_lag_regress(&y, &x, &WeightMatrix::zeros(12)).unwrap();
        assert_eq!(m.rho, 0.0);
        let design = Matrix::from_rows(12, 3, x.iter().flat_map(|r| [1.0, r[0], r[1]]).collect());
        let ols = least_squares(&design, &y).unwrap();
        for (a, b) in m.beta.iter().zip(&ols) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_fit() {
        let n = 10;
        let x: Vec<Vec<f64>> = (0..n).map(|i| vec![(i as f64 * 0.37).sin()]).collect();
        let y: Vec<f64> = x.iter().map(|r| 0.3 + 1.5 * r[0]).collect();
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + (i + 1) % n] = 1.0;
            v[i * n + (i + n - 1) % n] = 1.0;
        }
        let w = WeightMatrix::from_dense(n, v).unwrap().row_standardize();
        let m = spatial_lag_regress(&y, &x, &w).unwrap().with_moran(99, 1);
        assert!(m.mse <= 1e-12, "mse {}", m.mse);
        assert!(m.rho.abs() < 1e-3);
        assert!(m.moran_pred.is_some());
    }

    #[test]
    fn too_few_samples() {
        let x = vec![vec![1.0, 2.0]; 4];
        assert!(matches!(
            spatial_lag_regress(&[1.0, 2.0, 3.0, 4.0], &x, &WeightMatrix::zeros(4)),
            Err(StatsError::TooFewSamples { .. })
        ));
    }
}
