//! Localization of mobile users from call detail records.
//!
//! The crate covers the whole batch pipeline: ingesting records, filtering
//! atypical users by spatial entropy, profiling users into segments,
//! detecting load-shared records with calibrated speed thresholds,
//! inferring home and work anchors with weighted stay clusters, and
//! evaluating anchors through origin-destination matrices. A synthetic
//! world generator provides the ground truth needed to calibrate and test
//! every stage.

pub mod entropy;
pub mod error;
pub mod geo;
pub mod ingest;
pub mod loadshare;
pub mod localize;
pub mod model;
pub mod odmatrix;
pub mod pipeline;
pub mod profiling;
pub mod region;
pub mod stats;
pub mod synthgen;
pub mod timewin;

pub use error::{Error, Result};
pub use geo::{haversine_km, DistanceMode, LatLon};
pub use model::{
    CdrRecord, CellIdx, CellTower, GpsFix, Network, TowerRegistry, UserSegment, UserStream,
};
pub use region::{Rect, Region, RegionGrid};
pub use timewin::{window_of, Calendar, TimeWindow, WINDOWS};
