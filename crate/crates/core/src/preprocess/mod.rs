//! Raw GPS logs → filtered trajectories → grid sequences and profile features.
//!
//! The pipeline: [`ingest_csv`] drops out-of-area and malformed rows and
//! sorts each driver's log; [`segment_by_status`] splits it into maximal
//! constant-status runs; [`filter_trajectories`] applies the length and
//! per-driver-day rules; [`compute_velocity`] and [`to_grid`] produce the
//! model input; [`extract_profile_features`] summarises a driver's period.

mod corpus;
pub mod geo;
mod ingest;
mod profile;
mod segment;

pub use corpus::{Corpus, DayData, DriverData, ProfileRecord, TrajectoryRecord};
pub use geo::{haversine_m, BoundingBox, Grid};
pub use ingest::{ingest_csv, ingest_reader, Ingested, CSV_COLUMNS};
pub use profile::{extract_profile_features, ProfileFeatures, ProfileNormalizer, PROFILE_DIM};
pub use segment::{compute_velocity, filter_trajectories, segment_by_status, FilterStats};

use std::io::Read;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error at line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("missing CSV column {0}")]
    MissingColumn(&'static str),
    #[error("no usable GPS points after filtering ({malformed} malformed rows, {out_of_area} out of area)")]
    Empty { malformed: usize, out_of_area: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corpus inconsistency: {0}")]
    Corpus(String),
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawGpsPoint {
    pub driver_id: String,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    /// Passenger on board.
    pub status: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripKind {
    Seeking,
    Serving,
}

impl TripKind {
    pub fn from_status(status: bool) -> Self {
        if status {
            TripKind::Serving
        } else {
            TripKind::Seeking
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TripKind::Seeking => "seeking",
            TripKind::Serving => "serving",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajPoint {
    pub lat: f64,
    pub lon: f64,
    pub timestamp: i64,
    /// m/s, filled by [`compute_velocity`].
    pub velocity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub driver_id: String,
    pub day: NaiveDate,
    pub kind: TripKind,
    pub points: Vec<TrajPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridCell {
    pub g_lat: usize,
    pub g_lon: usize,
    /// Five-minute slot of the day, `1..=288`.
    pub interval: u16,
    pub velocity: f64,
}

impl GridCell {
    pub const PAD: GridCell = GridCell {
        g_lat: 0,
        g_lon: 0,
        interval: 1,
        velocity: 0.0,
    };
}

/// Discretised trajectory plus its padding mask. The first
/// `original_length` positions are real; the rest are [`GridCell::PAD`].
#[derive(Clone, Debug, PartialEq)]
pub struct GridSequence {
    pub cells: Vec<GridCell>,
    pub mask: Vec<bool>,
    pub original_length: usize,
}

impl GridSequence {
    pub fn from_cells(cells: Vec<GridCell>) -> Self {
        let n = cells.len();
        Self {
            cells,
            mask: vec![true; n],
            original_length: n,
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Pad with [`GridCell::PAD`] up to `len` (no-op if already longer).
    pub fn padded_to(&self, len: usize) -> Self {
        let mut out = self.clone();
        while out.cells.len() < len {
            out.cells.push(GridCell::PAD);
            out.mask.push(false);
        }
        out
    }

    /// Drop padding.
    pub fn unpadded(&self) -> Self {
        Self::from_cells(self.cells[..self.original_length].to_vec())
    }
}

/// Discretise a trajectory onto the grid and the five-minute day slots.
pub fn to_grid(traj: &Trajectory, grid: &Grid, tz_offset_s: i64) -> GridSequence {
    let cells = traj
        .points
        .iter()
        .map(|p| {
            let (g_lat, g_lon) = grid.cell(p.lat, p.lon);
            GridCell {
                g_lat,
                g_lon,
                interval: geo::interval_of_day(p.timestamp, tz_offset_s),
                velocity: p.velocity,
            }
        })
        .collect();
    GridSequence::from_cells(cells)
}

/// Pad every sequence to the longest length in the batch.
pub fn pad_and_mask(batch: &[GridSequence]) -> Vec<GridSequence> {
    let len_max = batch.iter().map(GridSequence::len).max().unwrap_or(0);
    batch.iter().map(|s| s.padded_to(len_max)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub bbox: BoundingBox,
    pub grid_side_deg: f64,
    pub tz_offset_s: i64,
    pub min_points: usize,
    pub max_points: usize,
    pub min_trips_per_kind: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            bbox: BoundingBox {
                lat_min: 22.44,
                lat_max: 22.87,
                lon_min: 113.75,
                lon_max: 114.65,
            },
            grid_side_deg: 0.01,
            tz_offset_s: 0,
            min_points: 10,
            max_points: 300,
            min_trips_per_kind: 5,
        }
    }
}

impl PreprocessConfig {
    pub fn grid(&self) -> Grid {
        Grid::new(self.bbox, self.grid_side_deg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.bbox.is_valid() {
            return Err(PreprocessError::Config(format!("invalid bounding box {:?}", self.bbox)));
        }
        if !(self.grid_side_deg > 0.0) {
            return Err(PreprocessError::Config("grid side must be positive".into()));
        }
        if self.min_points > self.max_points {
            return Err(PreprocessError::Config("min_points exceeds max_points".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RetentionStats {
    pub rows_read: usize,
    pub malformed_rows: usize,
    pub out_of_area_rows: usize,
    pub duplicate_rows: usize,
    pub drivers_ingested: usize,
    pub trajectories_segmented: usize,
    pub dropped_by_length: usize,
    pub dropped_by_driver_day: usize,
    pub trajectories_retained: usize,
    pub driver_days_retained: usize,
    pub drivers_retained: usize,
}

/// Full pipeline from CSV bytes to an in-memory corpus.
pub fn run_pipeline<R: Read>(reader: R, cfg: &PreprocessConfig) -> Result<(Corpus, RetentionStats)> {
    cfg.validate()?;
    let ingested = ingest_reader(reader, cfg)?;
    let mut stats = RetentionStats {
        rows_read: ingested.rows_read,
        malformed_rows: ingested.malformed_rows,
        out_of_area_rows: ingested.out_of_area_rows,
        duplicate_rows: ingested.duplicate_rows,
        drivers_ingested: ingested.drivers.len(),
        ..Default::default()
    };

    let mut trajectories = Vec::new();
    for (driver, points) in &ingested.drivers {
        trajectories.extend(segment_by_status(driver, points, cfg.tz_offset_s));
    }
    stats.trajectories_segmented = trajectories.len();

    let (mut kept, filter_stats) = filter_trajectories(trajectories, cfg);
    stats.dropped_by_length = filter_stats.dropped_by_length;
    stats.dropped_by_driver_day = filter_stats.dropped_by_driver_day;
    for t in &mut kept {
        compute_velocity(t);
    }

    let corpus = Corpus::from_trajectories(&kept, cfg)?;
    stats.trajectories_retained = kept.len();
    stats.drivers_retained = corpus.drivers.len();
    stats.driver_days_retained = corpus.drivers.iter().map(|d| d.days.len()).sum();
    Ok((corpus, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(len: usize, v: f64) -> GridSequence {
        GridSequence::from_cells(
            (0..len)
                .map(|i| GridCell {
                    g_lat: i,
                    g_lon: 1,
                    interval: 5,
                    velocity: v + i as f64,
                })
                .collect(),
        )
    }

    #[test]
    fn pad_batch_to_longest() {
        let padded = pad_and_mask(&[seq(10, 1.0), seq(17, 2.0)]);
        assert!(padded.iter().all(|s| s.len() == 17));
        assert_eq!(padded[0].mask.iter().filter(|m| !**m).count(), 7);
        assert_eq!(padded[0].cells[12], GridCell::PAD);
        assert_eq!(padded[0].original_length, 10);
        assert_eq!(padded[1], seq(17, 2.0));
    }

    #[test]
    fn single_sequence_unchanged() {
        let s = seq(12, 0.5);
        let padded = pad_and_mask(std::slice::from_ref(&s));
        assert_eq!(padded[0], s);
        assert!(padded[0].mask.iter().all(|&m| m));
    }

    #[test]
    fn masked_mean_matches_unpadded() {
        let s = seq(10, 3.0);
        let p = s.padded_to(25);
        let masked: f64 = p
            .cells
            .iter()
            .zip(&p.mask)
            .filter(|(_, m)| **m)
            .map(|(c, _)| c.velocity)
            .sum::<f64>()
            / p.original_length as f64;
        let direct: f64 = s.cells.iter().map(|c| c.velocity).sum::<f64>() / s.len() as f64;
        assert_eq!(masked, direct);
        assert_eq!(p.unpadded(), s);
    }
}
