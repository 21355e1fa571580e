//! Computational stigmergy over a raster.
//!
//! Each sample deposits a truncated-cone mark centred on the cell holding
//! the sample. At every time step the trail first evaporates, then the
//! step's marks are summed in. Two trails are compared with the extended
//! Jaccard ratio `Σ min(a, b) / Σ max(a, b)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{Cell, GeoError, GeoPoint, GridSpec};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StigmergyError {
    #[error("invalid mark: {0}")]
    InvalidMark(String),
    #[error("invalid evaporation policy: {0}")]
    InvalidPolicy(String),
    #[error("deposit at step {found} applied to a trail expecting step {expected}")]
    StepMismatch { expected: u64, found: u64 },
    #[error("trails live on different grids")]
    GridMismatch,
    #[error("both trails are empty")]
    BothTrailsEmpty,
    #[error("invalid step window {first}..={last}")]
    InvalidWindow { first: u64, last: u64 },
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Truncated cone: flat plateau of height `peak` up to `top_radius`, then a
/// linear slope reaching zero at `base_radius`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkSpec<T = f64> {
    pub base_radius: T,
    pub top_radius: T,
    pub peak: T,
}

impl<T: Scalar> Default for MarkSpec<T> {
    fn default() -> Self {
        Self {
            base_radius: T::lit(500.0),
            top_radius: T::lit(250.0),
            peak: T::one(),
        }
    }
}

impl<T: Scalar> MarkSpec<T> {
    pub fn validate(&self) -> Result<(), StigmergyError> {
        if !(self.top_radius > T::zero() && self.top_radius < self.base_radius && self.base_radius.is_finite()) {
            return Err(StigmergyError::InvalidMark(format!(
                "need 0 < top_radius ({}) < base_radius ({})",
                self.top_radius, self.base_radius
            )));
        }
        if !(self.peak > T::zero() && self.peak.is_finite()) {
            return Err(StigmergyError::InvalidMark(format!("peak must be > 0, got {}", self.peak)));
        }
        Ok(())
    }

    /// Mark height at distance `d` from its centre; `None` beyond the base.
    #[inline]
    pub fn intensity_at(&self, d: T) -> Option<T> {
        if d <= self.top_radius {
            Some(self.peak)
        } else if d <= self.base_radius {
            Some(self.peak * (self.base_radius - d) / (self.base_radius - self.top_radius))
        } else {
            None
        }
    }

    /// Volume of the continuous solid, `π·peak·(b² + b·t + t²)/3`.
    pub fn solid_volume(&self) -> T {
        let (b, t) = (self.base_radius, self.top_radius);
        T::PI() * self.peak * (b * b + b * t + t * t) / T::lit(3.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaporationMode {
    /// `T ← (1 − δ)·T`
    Multiplicative,
    /// `T ← max(0, T − δ)`
    Subtractive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaporationPolicy<T = f64> {
    pub delta: T,
    pub mode: EvaporationMode,
}

impl<T: Scalar> Default for EvaporationPolicy<T> {
    fn default() -> Self {
        Self {
            delta: T::lit(0.1),
            mode: EvaporationMode::Multiplicative,
        }
    }
}

impl<T: Scalar> EvaporationPolicy<T> {
    pub fn validate(&self) -> Result<(), StigmergyError> {
        if !(self.delta >= T::zero() && self.delta < T::one()) {
            return Err(StigmergyError::InvalidPolicy(format!("delta must be in [0, 1), got {}", self.delta)));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, v: T) -> T {
        match self.mode {
            EvaporationMode::Multiplicative => v * (T::one() - self.delta),
            EvaporationMode::Subtractive => (v - self.delta).max(T::zero()),
        }
    }
}

/// A sample to be marked: location plus time-step index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleEvent<T = f64> {
    pub point: GeoPoint<T>,
    pub step: u64,
}

/// A sample already projected onto the raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellDeposit {
    pub step: u64,
    pub cell: Cell,
}

/// Inclusive range of time steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepWindow {
    pub first: u64,
    pub last: u64,
}

impl StepWindow {
    pub fn new(first: u64, last: u64) -> Result<Self, StigmergyError> {
        if first > last {
            return Err(StigmergyError::InvalidWindow { first, last });
        }
        Ok(Self { first, last })
    }

    pub fn contains(&self, step: u64) -> bool {
        step >= self.first && step <= self.last
    }
}

/// Precomputed mark footprint as offsets from the centre cell. Marks are
/// centred on cell centres, so the footprint is the same everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkStencil<T> {
    entries: Vec<(isize, isize, T)>,
}

impl<T: Scalar> MarkStencil<T> {
    pub fn new(mark: &MarkSpec<T>, cell_size: T) -> Self {
        let reach = (mark.base_radius / cell_size).floor().to_isize().unwrap_or(0);
        let mut entries = Vec::new();
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (fr, fc) = (T::lit(dr as f64) * cell_size, T::lit(dc as f64) * cell_size);
                let d = (fr * fr + fc * fc).sqrt();
                if let Some(v) = mark.intensity_at(d) {
                    entries.push((dr, dc, v));
                }
            }
        }
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Footprint cells around `center` that fall on the raster.
    pub fn cells(&self, center: Cell, n_rows: usize, n_cols: usize) -> impl Iterator<Item = (Cell, T)> + '_ {
        self.entries.iter().filter_map(move |&(dr, dc, v)| {
            let r = center.row as isize + dr;
            let c = center.col as isize + dc;
            (r >= 0 && c >= 0 && (r as usize) < n_rows && (c as usize) < n_cols).then(|| (Cell::new(r as usize, c as usize), v))
        })
    }
}

/// Set of (cell, intensity) pairs deposited by one mark centred on `center`.
/// Cells beyond the raster edge are dropped.
pub fn mark_footprint<T: Scalar>(center: Cell, mark: &MarkSpec<T>, spec: &GridSpec<T>) -> Vec<(Cell, T)> {
    MarkStencil::new(mark, spec.cell_size)
        .cells(center, spec.n_rows, spec.n_cols)
        .collect()
}

/// A raster scalar field at a given time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trail<T = f64> {
    spec: GridSpec<T>,
    values: Vec<T>,
    clock: u64,
}

impl<T: Scalar> Trail<T> {
    pub fn new(spec: GridSpec<T>, clock: u64) -> Self {
        Self {
            values: vec![T::zero(); spec.n_cells()],
            spec,
            clock,
        }
    }

    pub fn spec(&self) -> &GridSpec<T> {
        &self.spec
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, cell: Cell) -> T {
        self.values[self.spec.index(cell)]
    }

    /// Multiplies every cell by `k`.
    pub fn scaled(mut self, k: T) -> Self {
        for v in &mut self.values {
            *v *= k;
        }
        self
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == T::zero())
    }

    /// Sum of all cells.
    pub fn volume(&self) -> T {
        self.values.iter().copied().sum()
    }

    pub fn evaporate(&mut self, policy: &EvaporationPolicy<T>) {
        for v in &mut self.values {
            *v = policy.apply(*v);
        }
    }

    /// Adds the stencil centred on `center` at the current clock.
    pub fn deposit(&mut self, center: Cell, stencil: &MarkStencil<T>) {
        self.deposit_scaled(center, stencil, T::one());
    }

    fn deposit_scaled(&mut self, center: Cell, stencil: &MarkStencil<T>, k: T) {
        let (n_rows, n_cols) = (self.spec.n_rows, self.spec.n_cols);
        for &(dr, dc, v) in &stencil.entries {
            let r = center.row as isize + dr;
            let c = center.col as isize + dc;
            if r >= 0 && c >= 0 && (r as usize) < n_rows && (c as usize) < n_cols {
                self.values[r as usize * n_cols + c as usize] += v * k;
            }
        }
    }

    pub fn metadata(&self) -> String {
        format!("{}clock={}\n", self.spec.metadata(), self.clock)
    }

    /// Grid dump, one line per raster row starting at the southern edge.
    pub fn to_csv(&self) -> String {
        crate::geo::Grid {
            n_rows: self.spec.n_rows,
            n_cols: self.spec.n_cols,
            values: self.values.clone(),
        }
        .to_csv()
    }
}

/// Advances `trail` by one time step: evaporation everywhere, then the
/// marks of `deposits`, all of which must carry step `trail.clock() + 1`.
/// Samples outside the raster are ignored.
pub fn step<T: Scalar>(
    mut trail: Trail<T>,
    deposits: &[SampleEvent<T>],
    policy: &EvaporationPolicy<T>,
    mark: &MarkSpec<T>,
) -> Result<Trail<T>, StigmergyError> {
    let expected = trail.clock + 1;
    if let Some(bad) = deposits.iter().find(|d| d.step != expected) {
        return Err(StigmergyError::StepMismatch {
            expected,
            found: bad.step,
        });
    }
    let stencil = MarkStencil::new(mark, trail.spec.cell_size);
    trail.evaporate(policy);
    trail.clock = expected;
    for d in deposits {
        if let Ok(cell) = trail.spec.project(d.point) {
            trail.deposit(cell, &stencil);
        }
    }
    Ok(trail)
}

/// Trail builder with a fixed raster, mark and evaporation policy.
#[derive(Debug, Clone)]
pub struct TrailEngine<T = f64> {
    spec: GridSpec<T>,
    mark: MarkSpec<T>,
    policy: EvaporationPolicy<T>,
    stencil: MarkStencil<T>,
}

impl<T: Scalar> TrailEngine<T> {
    pub fn new(spec: GridSpec<T>, mark: MarkSpec<T>, policy: EvaporationPolicy<T>) -> Result<Self, StigmergyError> {
        mark.validate()?;
        policy.validate()?;
        let stencil = MarkStencil::new(&mark, spec.cell_size);
        Ok(Self {
            spec,
            mark,
            policy,
            stencil,
        })
    }

    pub fn spec(&self) -> &GridSpec<T> {
        &self.spec
    }

    pub fn mark(&self) -> &MarkSpec<T> {
        &self.mark
    }

    pub fn policy(&self) -> &EvaporationPolicy<T> {
        &self.policy
    }

    pub fn stencil(&self) -> &MarkStencil<T> {
        &self.stencil
    }

    /// Projects samples, dropping those outside the raster.
    pub fn project_samples(&self, samples: &[SampleEvent<T>]) -> Vec<CellDeposit> {
        samples
            .iter()
            .filter_map(|s| self.spec.project(s.point).ok().map(|cell| CellDeposit { step: s.step, cell }))
            .collect()
    }

    pub fn build(&self, samples: &[SampleEvent<T>], window: StepWindow) -> Trail<T> {
        self.build_cells(&self.project_samples(samples), window)
    }

    /// Trail at `window.last` after marking every deposit inside the window.
    /// Deposits outside the window are ignored.
    pub fn build_cells(&self, deposits: &[CellDeposit], window: StepWindow) -> Trail<T> {
        let mut trail = Trail::new(self.spec, window.last);
        match self.policy.mode {
            EvaporationMode::Multiplicative => {
                // Linear decay: each deposit contributes footprint·(1−δ)^age.
                let keep = T::one() - self.policy.delta;
                for d in deposits.iter().filter(|d| window.contains(d.step)) {
                    let age = (window.last - d.step) as i32;
                    let k = if age == 0 { T::one() } else { keep.powi(age) };
                    if k > T::zero() {
                        trail.deposit_scaled(d.cell, &self.stencil, k);
                    }
                }
            }
            EvaporationMode::Subtractive => self.fold_subtractive(&mut trail, deposits, window),
        }
        trail
    }

    fn fold_subtractive(&self, trail: &mut Trail<T>, deposits: &[CellDeposit], window: StepWindow) {
        let mut sorted: Vec<CellDeposit> = deposits.iter().copied().filter(|d| window.contains(d.step)).collect();
        sorted.sort_by_key(|d| d.step);
        let n_cols = self.spec.n_cols;
        // Bounding box of cells touched so far; everything outside is zero.
        let mut active: Option<(usize, usize, usize, usize)> = None;
        let reach = (self.mark.base_radius / self.spec.cell_size).floor().to_usize().unwrap_or(0);
        let mut i = 0;
        for step in window.first..=window.last {
            if step > window.first {
                if let Some((r0, r1, c0, c1)) = active {
                    for r in r0..=r1 {
                        for v in &mut trail.values[r * n_cols + c0..=r * n_cols + c1] {
                            *v = self.policy.apply(*v);
                        }
                    }
                }
            }
            while i < sorted.len() && sorted[i].step == step {
                let c = sorted[i].cell;
                trail.deposit(c, &self.stencil);
                let bb = (
                    c.row.saturating_sub(reach),
                    (c.row + reach).min(self.spec.n_rows - 1),
                    c.col.saturating_sub(reach),
                    (c.col + reach).min(n_cols - 1),
                );
                active = Some(match active {
                    None => bb,
                    Some(a) => (a.0.min(bb.0), a.1.max(bb.1), a.2.min(bb.2), a.3.max(bb.3)),
                });
                i += 1;
            }
        }
    }
}

/// Folds [`step`] over every step of `window`, starting from an empty
/// raster, and returns the trail at the window's last step.
pub fn build_trail<T: Scalar>(
    samples: &[SampleEvent<T>],
    window: StepWindow,
    policy: &EvaporationPolicy<T>,
    mark: &MarkSpec<T>,
    spec: &GridSpec<T>,
) -> Result<Trail<T>, StigmergyError> {
    Ok(TrailEngine::new(*spec, *mark, *policy)?.build(samples, window))
}

/// Extended Jaccard similarity: minimum common volume over maximum volume.
pub fn trail_similarity<T: Scalar>(a: &Trail<T>, b: &Trail<T>) -> Result<T, StigmergyError> {
    if a.spec != b.spec {
        return Err(StigmergyError::GridMismatch);
    }
    let (mut lo, mut hi) = (T::zero(), T::zero());
    for (&x, &y) in a.values.iter().zip(&b.values) {
        if x < y {
            lo += x;
            hi += y;
        } else {
            lo += y;
            hi += x;
        }
    }
    if hi == T::zero() {
        return Err(StigmergyError::BothTrailsEmpty);
    }
    Ok(lo / hi)
}

/// Sum of all cells.
pub fn trail_volume<T: Scalar>(t: &Trail<T>) -> T {
    t.volume()
}
