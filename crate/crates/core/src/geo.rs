//! Geodesy, raster grids and district distance matrices.
//!
//! Rasters use a local equirectangular projection anchored at the grid's
//! south-west corner: `x = R·Δlon·cos(lat₀)`, `y = R·Δlat`, then both are
//! floor-divided by the cell size. Row 0 is the southernmost row.

use std::fmt::Write as _;
use std::ops::AddAssign;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdr::{Registry, TrafficRecord};
use crate::scalar::Scalar;

/// Mean Earth radius used by every distance in the crate.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("point ({lat}, {lon}) falls outside the grid")]
    OutOfBounds { lat: f64, lon: f64 },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("antenna {0:?} has no known location")]
    UnresolvedAntenna(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint<T = f64> {
    pub lat: T,
    pub lon: T,
}

impl<T: Scalar> GeoPoint<T> {
    pub fn new(lat: T, lon: T) -> Result<Self, GeoError> {
        let ok = lat.is_finite()
            && lon.is_finite()
            && lat.abs() <= T::lit(90.0)
            && lon.abs() <= T::lit(180.0);
        if ok {
            Ok(Self { lat, lon })
        } else {
            Err(GeoError::InvalidCoordinate {
                lat: lat.as_f64(),
                lon: lon.as_f64(),
            })
        }
    }

    /// Point displaced by `east_m`/`north_m` meters under the local
    /// equirectangular approximation around `self`.
    pub fn offset_m(&self, east_m: T, north_m: T) -> Self {
        let r = T::lit(EARTH_RADIUS_M);
        let dlat = (north_m / r).to_degrees();
        let dlon = (east_m / (r * self.lat.to_radians().cos())).to_degrees();
        Self {
            lat: self.lat + dlat,
            lon: self.lon + dlon,
        }
    }

    pub fn cast<U: Scalar>(&self) -> GeoPoint<U> {
        GeoPoint {
            lat: U::lit(self.lat.as_f64()),
            lon: U::lit(self.lon.as_f64()),
        }
    }
}

/// Great-circle distance in meters.
pub fn haversine<T: Scalar>(a: GeoPoint<T>, b: GeoPoint<T>) -> T {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let half = T::lit(0.5);
    let h = (dlat * half).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon * half).sin().powi(2);
    let h = h.min(T::one()).max(T::zero());
    T::lit(2.0 * EARTH_RADIUS_M) * h.sqrt().asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// A regular raster laid over the projected plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec<T = f64> {
    /// South-west corner.
    pub origin: GeoPoint<T>,
    /// Cell edge in meters.
    pub cell_size: T,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl<T: Scalar> GridSpec<T> {
    pub fn new(origin: GeoPoint<T>, cell_size: T, n_rows: usize, n_cols: usize) -> Result<Self, GeoError> {
        GeoPoint::new(origin.lat, origin.lon)?;
        if !(cell_size > T::zero()) || !cell_size.is_finite() {
            return Err(GeoError::InvalidGrid(format!("cell size must be > 0, got {cell_size}")));
        }
        if n_rows == 0 || n_cols == 0 {
            return Err(GeoError::InvalidGrid(format!("empty grid {n_rows}x{n_cols}")));
        }
        if origin.lat.abs() >= T::lit(89.0) {
            return Err(GeoError::InvalidGrid("origin too close to a pole".into()));
        }
        Ok(Self {
            origin,
            cell_size,
            n_rows,
            n_cols,
        })
    }

    /// Smallest grid covering every point, padded by `pad_cells` on each side.
    pub fn covering(points: &[GeoPoint<T>], cell_size: T, pad_cells: usize) -> Result<Self, GeoError> {
        let first = points
            .first()
            .ok_or_else(|| GeoError::DegenerateGeometry("no points to cover".into()))?;
        let (mut lat_min, mut lat_max, mut lon_min, mut lon_max) = (first.lat, first.lat, first.lon, first.lon);
        for p in points {
            lat_min = lat_min.min(p.lat);
            lat_max = lat_max.max(p.lat);
            lon_min = lon_min.min(p.lon);
            lon_max = lon_max.max(p.lon);
        }
        let south_west = GeoPoint::new(lat_min, lon_min)?;
        // The extra half cell keeps the extreme points off cell edges.
        let pad = (T::from_count(pad_cells) + T::lit(0.5)) * cell_size;
        let origin = south_west.offset_m(-pad, -pad);
        let probe = Self::new(origin, cell_size, 1, 1)?;
        let (x, y) = probe.plane(GeoPoint { lat: lat_max, lon: lon_max });
        let n_cols = (x / cell_size).floor().to_usize().unwrap_or(0) + 1 + pad_cells;
        let n_rows = (y / cell_size).floor().to_usize().unwrap_or(0) + 1 + pad_cells;
        Self::new(origin, cell_size, n_rows, n_cols)
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    #[inline]
    pub fn index(&self, cell: Cell) -> usize {
        cell.row * self.n_cols + cell.col
    }

    /// Planar coordinates (east, north) in meters relative to the origin.
    #[inline]
    pub fn plane(&self, p: GeoPoint<T>) -> (T, T) {
        let r = T::lit(EARTH_RADIUS_M);
        let x = r * (p.lon - self.origin.lon).to_radians() * self.origin.lat.to_radians().cos();
        let y = r * (p.lat - self.origin.lat).to_radians();
        (x, y)
    }

    /// Cell containing `p`; points on a cell's east or north edge belong to
    /// the next cell.
    pub fn project(&self, p: GeoPoint<T>) -> Result<Cell, GeoError> {
        let (x, y) = self.plane(p);
        let out = || GeoError::OutOfBounds {
            lat: p.lat.as_f64(),
            lon: p.lon.as_f64(),
        };
        if !(x >= T::zero() && y >= T::zero()) {
            return Err(out());
        }
        let col = (x / self.cell_size).floor().to_usize().ok_or_else(out)?;
        let row = (y / self.cell_size).floor().to_usize().ok_or_else(out)?;
        if row >= self.n_rows || col >= self.n_cols {
            return Err(out());
        }
        Ok(Cell { row, col })
    }

    pub fn cell_center(&self, cell: Cell) -> GeoPoint<T> {
        let half = T::lit(0.5);
        let x = (T::from_count(cell.col) + half) * self.cell_size;
        let y = (T::from_count(cell.row) + half) * self.cell_size;
        let r = T::lit(EARTH_RADIUS_M);
        GeoPoint {
            lat: self.origin.lat + (y / r).to_degrees(),
            lon: self.origin.lon + (x / (r * self.origin.lat.to_radians().cos())).to_degrees(),
        }
    }

    /// Key=value sidecar lines describing this grid.
    pub fn metadata(&self) -> String {
        format!(
            "origin_lat={}\norigin_lon={}\ncell_size_m={}\nn_rows={}\nn_cols={}\nrow_order=south_to_north\n",
            self.origin.lat, self.origin.lon, self.cell_size, self.n_rows, self.n_cols
        )
    }
}

/// Dense row-major raster of values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<V> {
    pub n_rows: usize,
    pub n_cols: usize,
    pub values: Vec<V>,
}

impl<V: Copy + Default> Grid<V> {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            values: vec![V::default(); n_rows * n_cols],
        }
    }

    pub fn get(&self, cell: Cell) -> V {
        self.values[cell.row * self.n_cols + cell.col]
    }
}

impl<V: Copy + Default + AddAssign> Grid<V> {
    pub fn add(&mut self, cell: Cell, v: V) {
        self.values[cell.row * self.n_cols + cell.col] += v;
    }

    /// Cell-wise sum of two equally sized grids.
    pub fn merge(mut self, other: &Self) -> Self {
        assert_eq!((self.n_rows, self.n_cols), (other.n_rows, other.n_cols));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
        self
    }
}

impl<V: Copy + std::iter::Sum<V>> Grid<V> {
    pub fn total(&self) -> V {
        self.values.iter().copied().sum()
    }
}

impl<V: std::fmt::Display> Grid<V> {
    /// Comma-separated dump, one line per grid row starting at row 0.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 4);
        for row in self.values.chunks(self.n_cols) {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Which duration column feeds an activity grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationVariant {
    Refugee,
    Total,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster<V> {
    pub grid: Grid<V>,
    /// Items that projected outside the grid (always 0 in strict mode).
    pub out_of_bounds: usize,
}

const ACCUMULATE_CHUNK: usize = 1 << 16;

/// Cumulative call duration (seconds) per cell, keyed by the outgoing antenna.
pub fn activity_grid(
    traffic: &[TrafficRecord],
    registry: &Registry,
    spec: &GridSpec<f64>,
    variant: DurationVariant,
    strict: bool,
) -> Result<Raster<u64>, GeoError> {
    // Antennas project once; traffic rows only look up the cell.
    let cells: Vec<Option<Cell>> = registry.antennas().iter().map(|a| spec.project(a.location).ok()).collect();
    let partial = traffic
        .par_chunks(ACCUMULATE_CHUNK)
        .map(|chunk| {
            let mut grid = Grid::<u64>::zeros(spec.n_rows, spec.n_cols);
            let mut oob = 0usize;
            for rec in chunk {
                let secs = match variant {
                    DurationVariant::Refugee => rec.refugee_duration,
                    DurationVariant::Total => rec.total_duration,
                };
                match cells[rec.out_antenna.index()] {
                    Some(cell) => grid.add(cell, secs),
                    None if strict => {
                        let a = registry.antenna(rec.out_antenna);
                        return Err(GeoError::OutOfBounds {
                            lat: a.location.lat,
                            lon: a.location.lon,
                        });
                    }
                    None => oob += 1,
                }
            }
            Ok(Raster { grid, out_of_bounds: oob })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(merge_rasters(spec, partial))
}

/// Number of registry antennas per cell.
pub fn antenna_density_grid(registry: &Registry, spec: &GridSpec<f64>, strict: bool) -> Result<Raster<u64>, GeoError> {
    let mut grid = Grid::<u64>::zeros(spec.n_rows, spec.n_cols);
    let mut oob = 0;
    for a in registry.antennas() {
        match spec.project(a.location) {
            Ok(cell) => grid.add(cell, 1),
            Err(e) if strict => return Err(e),
            Err(_) => oob += 1,
        }
    }
    Ok(Raster { grid, out_of_bounds: oob })
}

fn merge_rasters(spec: &GridSpec<f64>, parts: Vec<Raster<u64>>) -> Raster<u64> {
    parts.into_iter().fold(
        Raster {
            grid: Grid::zeros(spec.n_rows, spec.n_cols),
            out_of_bounds: 0,
        },
        |acc, part| Raster {
            grid: acc.grid.merge(&part.grid),
            out_of_bounds: acc.out_of_bounds + part.out_of_bounds,
        },
    )
}

/// Symmetric matrix of pairwise distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix<T = f64> {
    pub n: usize,
    values: Vec<T>,
    /// True once min-max scaled onto [0, 1].
    pub normalized: bool,
}

impl<T: Scalar> DistanceMatrix<T> {
    /// Builds from a full row-major matrix. The matrix must be square,
    /// symmetric, non-negative and have a zero diagonal.
    pub fn from_rows(n: usize, values: Vec<T>) -> Result<Self, GeoError> {
        if values.len() != n * n || n == 0 {
            return Err(GeoError::InvalidGrid(format!("{} entries for a {n}x{n} matrix", values.len())));
        }
        for i in 0..n {
            if values[i * n + i] != T::zero() {
                return Err(GeoError::DegenerateGeometry("non-zero diagonal".into()));
            }
            for j in 0..n {
                let v = values[i * n + j];
                if !(v >= T::zero()) || v != values[j * n + i] {
                    return Err(GeoError::DegenerateGeometry(format!("entry ({i},{j}) is negative or asymmetric")));
                }
            }
        }
        Ok(Self {
            n,
            values,
            normalized: false,
        })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.n + j]
    }

    pub fn off_diagonal(&self) -> impl Iterator<Item = T> + '_ {
        (0..self.n).flat_map(move |i| (0..self.n).filter(move |&j| j != i).map(move |j| self.get(i, j)))
    }

    /// Min-max scaling over off-diagonal entries. When every off-diagonal
    /// distance is equal (and non-zero) all of them map to 1.
    pub fn min_max_normalized(&self) -> Result<Self, GeoError> {
        let (lo, hi) = self
            .off_diagonal()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if self.n < 2 || !(hi > T::zero()) {
            return Err(GeoError::DegenerateGeometry("all locations coincide".into()));
        }
        let span = hi - lo;
        let n = self.n;
        let mut values = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    values[i * n + j] = if span > T::zero() {
                        (self.get(i, j) - lo) / span
                    } else {
                        T::one()
                    };
                }
            }
        }
        Ok(Self {
            n,
            values,
            normalized: true,
        })
    }
}

/// Pairwise haversine distances between district centroids, optionally
/// min-max normalized.
pub fn district_distance_matrix<T: Scalar>(
    centroids: &[GeoPoint<T>],
    normalize: bool,
) -> Result<DistanceMatrix<T>, GeoError> {
    let n = centroids.len();
    if n < 2 {
        return Err(GeoError::DegenerateGeometry(format!("need at least 2 districts, got {n}")));
    }
    let mut values = vec![T::zero(); n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = haversine(centroids[i], centroids[j]);
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    if values.iter().all(|v| *v == T::zero()) {
        return Err(GeoError::DegenerateGeometry("all centroids coincide".into()));
    }
    let raw = DistanceMatrix {
        n,
        values,
        normalized: false,
    };
    if normalize {
        raw.min_max_normalized()
    } else {
        Ok(raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cdr::{AntennaSpec, DistrictSpec};

    fn origin() -> GeoPoint {
        GeoPoint::new(41.0, 28.9).unwrap()
    }

    #[test]
    fn haversine_identity_and_one_degree() {
        let a = GeoPoint::new(0.0, 0.0).unwrap();
        let b = GeoPoint::new(1.0, 0.0).unwrap();
        assert_eq!(haversine(a, a), 0.0);
        let expected = std::f64::consts::PI * EARTH_RADIUS_M / 180.0;
        assert!((haversine(a, b) - expected).abs() < 1e-6);
        assert!((haversine(a, b) - 111_195.0).abs() < 1.0);
        assert_eq!(haversine(a, b), haversine(b, a));
    }

    #[test]
    fn haversine_f32() {
        let a = GeoPoint::<f32>::new(0.0, 0.0).unwrap();
        let b = GeoPoint::<f32>::new(1.0, 0.0).unwrap();
        assert!((haversine(a, b) - 111_195.0).abs() < 5.0);
    }

    #[test]
    fn invalid_coordinates_rejected() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -181.0).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn project_examples() {
        let spec = GridSpec::new(origin(), 100.0, 10, 10).unwrap();
        assert_eq!(spec.project(origin()).unwrap(), Cell::new(0, 0));
        let east = origin().offset_m(250.0, 0.0);
        assert_eq!(spec.project(east).unwrap(), Cell::new(0, 2));
        let west = origin().offset_m(-10.0, 0.0);
        assert!(matches!(spec.project(west), Err(GeoError::OutOfBounds { .. })));
        let far = origin().offset_m(0.0, 1_000.5);
        assert!(spec.project(far).is_err());
    }

    #[test]
    fn cell_center_round_trip() {
        let spec = GridSpec::new(origin(), 137.0, 23, 31).unwrap();
        for row in 0..23 {
            for col in 0..31 {
                let c = Cell::new(row, col);
                assert_eq!(spec.project(spec.cell_center(c)).unwrap(), c);
            }
        }
    }

    #[test]
    fn covering_contains_all_points() {
        let pts: Vec<_> = [(41.0, 28.9), (41.1, 29.2), (40.95, 29.0)]
            .iter()
            .map(|&(a, b)| GeoPoint::new(a, b).unwrap())
            .collect();
        let spec = GridSpec::covering(&pts, 10_000.0, 1).unwrap();
        for p in &pts {
            let c = spec.project(*p).unwrap();
            assert!(c.row >= 1 && c.col >= 1);
            assert!(c.row < spec.n_rows - 1 && c.col < spec.n_cols - 1);
        }
    }

    fn registry(points: &[(&str, f64, f64)]) -> Registry {
        let antennas = points
            .iter()
            .map(|&(id, lat, lon)| AntennaSpec {
                id: id.into(),
                location: GeoPoint::new(lat, lon).unwrap(),
                district: "D1".into(),
            })
            .collect();
        Registry::new(antennas, vec![DistrictSpec::new("D1", "one", Some(10.0))]).unwrap()
    }

    fn traffic(reg: &Registry, antenna: &str, refugee_duration: u64) -> TrafficRecord {
        TrafficRecord {
            timestamp: chrono::NaiveDate::from_ymd_opt(2017, 1, 1).unwrap().and_hms_opt(3, 0, 0).unwrap(),
            out_antenna: reg.antenna_key(antenna).unwrap(),
            in_antenna: reg.antenna_key(antenna).unwrap(),
            total_calls: 2,
            refugee_calls: 1,
            total_duration: refugee_duration * 2,
            refugee_duration,
        }
    }

    #[test]
    fn activity_grid_deposits_and_additivity() {
        let o = origin();
        let a = o.offset_m(15_000.0, 15_000.0);
        let b = o.offset_m(16_000.0, 14_000.0);
        let reg = registry(&[("A", a.lat, a.lon), ("B", b.lat, b.lon)]);
        let spec = GridSpec::new(o, 10_000.0, 4, 4).unwrap();

        let single = activity_grid(&[traffic(&reg, "A", 100)], &reg, &spec, DurationVariant::Refugee, true).unwrap();
        assert_eq!(single.grid.get(Cell::new(1, 1)), 100);
        assert_eq!(single.grid.total(), 100);

        let both = [traffic(&reg, "A", 40), traffic(&reg, "B", 60)];
        let g = activity_grid(&both, &reg, &spec, DurationVariant::Refugee, true).unwrap();
        assert_eq!(g.grid.get(Cell::new(1, 1)), 100);
        let total = activity_grid(&both, &reg, &spec, DurationVariant::Total, true).unwrap();
        assert_eq!(total.grid.get(Cell::new(1, 1)), 200);

        let empty = activity_grid(&[], &reg, &spec, DurationVariant::Refugee, true).unwrap();
        assert_eq!(empty.grid.total(), 0);
    }

    #[test]
    fn activity_grid_out_of_bounds_modes() {
        let o = origin();
        let far = o.offset_m(90_000.0, 5_000.0);
        let reg = registry(&[("F", far.lat, far.lon)]);
        let spec = GridSpec::new(o, 10_000.0, 2, 2).unwrap();
        let rows = [traffic(&reg, "F", 5)];
        assert!(activity_grid(&rows, &reg, &spec, DurationVariant::Refugee, true).is_err());
        let lenient = activity_grid(&rows, &reg, &spec, DurationVariant::Refugee, false).unwrap();
        assert_eq!(lenient.out_of_bounds, 1);
        assert_eq!(lenient.grid.total(), 0);
    }

    #[test]
    fn antenna_density_conservation() {
        let o = origin();
        let pts: Vec<_> = (0..3).map(|i| o.offset_m(1_000.0 + 100.0 * i as f64, 2_000.0)).collect();
        let reg = registry(&[
            ("A", pts[0].lat, pts[0].lon),
            ("B", pts[1].lat, pts[1].lon),
            ("C", pts[2].lat, pts[2].lon),
        ]);
        let spec = GridSpec::new(o, 10_000.0, 3, 3).unwrap();
        let g = antenna_density_grid(&reg, &spec, true).unwrap();
        assert_eq!(g.grid.get(Cell::new(0, 0)), 3);
        assert_eq!(g.grid.total(), reg.antennas().len() as u64);

        let empty = Registry::new(vec![], vec![]).unwrap();
        assert_eq!(antenna_density_grid(&empty, &spec, true).unwrap().grid.total(), 0);
    }

    #[test]
    fn distance_matrix_properties() {
        let o = origin();
        let pts = [o, o.offset_m(5_000.0, 0.0), o.offset_m(0.0, 7_000.0)];
        let dm = district_distance_matrix(&pts, false).unwrap();
        for i in 0..3 {
            assert_eq!(dm.get(i, i), 0.0);
            for j in 0..3 {
                assert_eq!(dm.get(i, j), dm.get(j, i));
            }
        }
        let norm = district_distance_matrix(&pts, true).unwrap();
        let max = norm.off_diagonal().fold(0.0f64, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        assert!(matches!(
            district_distance_matrix(&[o, o], false),
            Err(GeoError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn min_max_of_known_distances() {
        // Off-diagonal {5 km, 10 km, 15 km} -> {0, 0.5, 1}.
        let v = vec![
            0.0, 5_000.0, 10_000.0, //
            5_000.0, 0.0, 15_000.0, //
            10_000.0, 15_000.0, 0.0,
        ];
        let dm = DistanceMatrix::from_rows(3, v).unwrap().min_max_normalized().unwrap();
        assert_eq!(dm.get(0, 1), 0.0);
        assert_eq!(dm.get(0, 2), 0.5);
        assert_eq!(dm.get(1, 2), 1.0);
        assert_eq!(dm.get(2, 2), 0.0);
    }

    #[test]
    fn grid_dump_layout() {
        let mut g = Grid::<u64>::zeros(2, 3);
        g.add(Cell::new(1, 2), 7);
        assert_eq!(g.to_csv(), "0,0,0\n0,0,7\n");
        let spec = GridSpec::new(origin(), 100.0, 2, 3).unwrap();
        let meta = spec.metadata();
        assert!(meta.contains("n_rows=2\n") && meta.contains("n_cols=3\n") && meta.contains("cell_size_m=100\n"));
    }
}
