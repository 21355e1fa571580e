//! Refugee integration metrics from mobile phone call records.

pub mod cdr;
pub mod geo;
pub mod metrics;
pub mod pipeline;
pub mod scalar;
pub mod stats;
pub mod synth;
pub mod stigmergy;

pub use scalar::Scalar;

/// Double-precision aliases of the generic numeric types.
pub type GeoPoint64 = geo::GeoPoint<f64>;
pub type GridSpec64 = geo::GridSpec<f64>;
pub type Trail64 = stigmergy::Trail<f64>;
pub type TrailEngine64 = stigmergy::TrailEngine<f64>;
pub type CallingPattern64 = metrics::CallingPattern<f64>;
pub type SpatialModel64 = stats::SpatialModel<f64>;

/// Single-precision aliases, for memory-bound trail work.
pub type GeoPoint32 = geo::GeoPoint<f32>;
pub type GridSpec32 = geo::GridSpec<f32>;
pub type Trail32 = stigmergy::Trail<f32>;
pub type TrailEngine32 = stigmergy::TrailEngine<f32>;
pub type CallingPattern32 = metrics::CallingPattern<f32>;
pub type SpatialModel32 = stats::SpatialModel<f32>;
