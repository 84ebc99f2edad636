//! Synthetic taxi fleets with tunable, separable driving styles.
//!
//! Each driver random-walks around a home cell at a fixed 40 s cadence.
//! The `separability` knob scales how far apart drivers' homes, speeds,
//! active hours, trip lengths and turning habits are; at 0 every driver
//! shares one style and only the random walk differs.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::geo::{local_midnight, EARTH_RADIUS_M, SECONDS_PER_DAY};
use crate::preprocess::{BoundingBox, Grid, PreprocessConfig, RawGpsPoint, TripKind};

pub const SAMPLE_INTERVAL_S: i64 = 40;
const MIN_TRIP_POINTS: usize = 10;
const MAX_TRIP_POINTS: usize = 300;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic corpus spec: {0}")]
    Spec(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverStyle {
    /// `(g_lat, g_lon)` on the spec's grid.
    pub home_cell: (usize, usize),
    /// In cells.
    pub roaming_radius: f64,
    /// m/s.
    pub speed_mean: f64,
    pub speed_std: f64,
    /// Local hours `[start, end)`.
    pub active_hours: (f64, f64),
    /// Points.
    pub trip_length_mean: f64,
    /// Mean heading change per step, radians.
    pub turn_bias: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_drivers: usize,
    pub days: usize,
    /// Trips of each kind per driver-day.
    pub trips_per_day: usize,
    /// 0 = identical styles, 1 = well separated.
    pub separability: f64,
    pub bbox: BoundingBox,
    pub cell_deg: f64,
    pub seed: u64,
    /// Epoch seconds of local midnight on the first day.
    pub start_midnight: i64,
    pub tz_offset_s: i64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let pre = PreprocessConfig::default();
        Self {
            n_drivers: 20,
            days: 5,
            trips_per_day: 5,
            separability: 1.0,
            bbox: pre.bbox,
            cell_deg: pre.grid_side_deg,
            seed: 0,
            start_midnight: 1_467_331_200, // 2016-07-01
            tz_offset_s: 0,
        }
    }
}

impl SynthSpec {
    pub fn grid(&self) -> Grid {
        Grid::new(self.bbox, self.cell_deg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::Spec(m.into()));
        if self.n_drivers < 2 {
            return bad("need at least 2 drivers");
        }
        if self.days < 1 {
            return bad("need at least 1 day");
        }
        if self.trips_per_day < 5 {
            return bad("trips_per_day must be at least 5 so every driver-day survives filtering");
        }
        if !(0.0..=1.0).contains(&self.separability) {
            return bad("separability must lie in [0, 1]");
        }
        if !self.bbox.is_valid() || !(self.cell_deg > 0.0) {
            return bad("invalid bounding box or cell size");
        }
        let g = self.grid();
        if g.lat_cells() < 2 * BASE_RADIUS as usize + 3 || g.lon_cells() < 2 * BASE_RADIUS as usize + 3 {
            return bad("bounding box too small for the roaming radius");
        }
        Ok(())
    }
}

const BASE_RADIUS: f64 = 3.0;
const BASE_SPEED: f64 = 12.0;
const SPEED_STD: f64 = 0.25;
const SPEED_STEP: f64 = 1.0;
const BASE_HOURS: (f64, f64) = (6.0, 20.0);
const HOUR_SHIFT: f64 = 4.0;
const BASE_TRIP_LEN: f64 = 16.0;
const TRIP_LEN_SPREAD: f64 = 5.0;
const TURN_SPREAD: f64 = 0.4;

/// Home lattice offsets in cells, one per driver, fitted into the grid.
fn lattice(n: usize, lat_cells: usize, lon_cells: usize) -> Vec<(f64, f64)> {
    let aspect = lon_cells as f64 / lat_cells as f64;
    let cols = ((n as f64 * aspect).sqrt().ceil() as usize).clamp(1, n);
    let rows = n.div_ceil(cols);
    let margin = 2.0 * BASE_RADIUS + 2.0;
    let fit = |cells: usize, k: usize| {
        if k <= 1 {
            f64::INFINITY
        } else {
            ((cells as f64 - margin) / (k - 1) as f64).floor()
        }
    };
    let spacing = (2.0 * BASE_RADIUS + 2.0).min(fit(lat_cells, rows)).min(fit(lon_cells, cols));
    if spacing < 2.0 * BASE_RADIUS + 2.0 {
        log::warn!("{n} drivers do not fit the grid at full separation; homes will overlap");
    }
    (0..n)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            (
                (r as f64 - (rows - 1) as f64 / 2.0) * spacing,
                (c as f64 - (cols - 1) as f64 / 2.0) * spacing,
            )
        })
        .collect()
}

/// One style per driver. Deterministic in `spec.seed`; identical for all
/// drivers when `separability` is 0.
pub fn sample_styles(spec: &SynthSpec) -> Vec<DriverStyle> {
    let grid = spec.grid();
    let (lat_cells, lon_cells) = (grid.lat_cells(), grid.lon_cells());
    let centre = ((lat_cells / 2) as f64, (lon_cells / 2) as f64);
    let n = spec.n_drivers;
    let s = spec.separability;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5354_594c_4553);
    let mut homes = lattice(n, lat_cells, lon_cells);
    homes.shuffle(&mut rng);
    let mut speed_rank: Vec<usize> = (0..n).collect();
    speed_rank.shuffle(&mut rng);

    (0..n)
        .map(|i| {
            let (hour_u, len_u, turn_u): (f64, f64, f64) = (
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
            );
            let clamp_cell = |v: f64, cells: usize| {
                v.round().clamp(BASE_RADIUS + 1.0, cells as f64 - BASE_RADIUS - 2.0) as usize
            };
            let shift = s * hour_u * HOUR_SHIFT;
            DriverStyle {
                home_cell: (
                    clamp_cell(centre.0 + s * homes[i].0, lat_cells),
                    clamp_cell(centre.1 + s * homes[i].1, lon_cells),
                ),
                roaming_radius: BASE_RADIUS,
                speed_mean: BASE_SPEED + s * SPEED_STEP * speed_rank[i] as f64,
                speed_std: SPEED_STD,
                active_hours: (BASE_HOURS.0 + shift, BASE_HOURS.1 + shift),
                trip_length_mean: BASE_TRIP_LEN + s * len_u * TRIP_LEN_SPREAD,
                turn_bias: s * turn_u * TURN_SPREAD,
                seed: spec.seed,
            }
        })
        .collect()
}

/// Point `distance_m` away along `bearing` (radians from north).
fn destination(lat: f64, lon: f64, bearing: f64, distance_m: f64) -> (f64, f64) {
    let delta = distance_m / EARTH_RADIUS_M;
    let (p1, l1) = (lat.to_radians(), lon.to_radians());
    let p2 = (p1.sin() * delta.cos() + p1.cos() * delta.sin() * bearing.cos()).asin();
    let l2 = l1 + (bearing.sin() * delta.sin() * p1.cos()).atan2(delta.cos() - p1.sin() * p2.sin());
    (p2.to_degrees(), l2.to_degrees())
}

fn bearing_to(lat: f64, lon: f64, to_lat: f64, to_lon: f64) -> f64 {
    let (p1, p2) = (lat.to_radians(), to_lat.to_radians());
    let dl = (to_lon - lon).to_radians();
    (dl.sin() * p2.cos()).atan2(p1.cos() * p2.sin() - p1.sin() * p2.cos() * dl.cos())
}

/// Trip length: `10 + Geometric`, mean `trip_length_mean`, capped at `cap`.
fn trip_length<R: Rng + ?Sized>(rng: &mut R, mean: f64, cap: usize) -> usize {
    let extra_mean = (mean - MIN_TRIP_POINTS as f64).max(0.0);
    let extra = if extra_mean <= 0.0 {
        0
    } else {
        Geometric::new(1.0 / (extra_mean + 1.0)).expect("valid p").sample(rng) as usize
    };
    (MIN_TRIP_POINTS + extra).min(cap.min(MAX_TRIP_POINTS))
}

/// One trip starting at `start_time`, `len` points 40 s apart, all with the
/// status of `kind`.
#[allow(clippy::too_many_arguments)]
pub fn gen_trajectory<R: Rng + ?Sized>(
    rng: &mut R,
    style: &DriverStyle,
    grid: &Grid,
    driver_id: &str,
    kind: TripKind,
    start_time: i64,
    len: usize,
) -> Vec<RawGpsPoint> {
    let (home_lat, home_lon) = grid.cell_origin(style.home_cell.0, style.home_cell.1);
    let (home_lat, home_lon) = (home_lat + grid.cell_deg / 2.0, home_lon + grid.cell_deg / 2.0);
    let radius_deg = style.roaming_radius * grid.cell_deg;
    let bbox = grid.bbox;
    let inner = |lat: f64, lon: f64| {
        lat > bbox.lat_min + grid.cell_deg
            && lat < bbox.lat_max - grid.cell_deg
            && lon > bbox.lon_min + grid.cell_deg
            && lon < bbox.lon_max - grid.cell_deg
    };

    let r = radius_deg * rng.random_range(0.0f64..1.0).sqrt();
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (mut lat, mut lon) = (home_lat + r * angle.cos(), home_lon + r * angle.sin());
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = Normal::new(style.speed_mean, style.speed_std.max(0.0)).expect("finite speed");
    let wobble = Normal::new(0.0, 0.3).expect("finite");

    let status = kind == TripKind::Serving;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        out.push(RawGpsPoint {
            driver_id: driver_id.to_string(),
            timestamp: start_time + i as i64 * SAMPLE_INTERVAL_S,
            lat,
            lon,
            status,
        });
        let v = speed.sample(rng).max(0.0);
        heading += style.turn_bias + wobble.sample(rng);
        let dist_home = ((lat - home_lat).powi(2) + (lon - home_lon).powi(2)).sqrt();
        if dist_home > radius_deg {
            heading = bearing_to(lat, lon, home_lat, home_lon);
        }
        let mut next = destination(lat, lon, heading, v * SAMPLE_INTERVAL_S as f64);
        if !inner(next.0, next.1) {
            heading = bearing_to(lat, lon, home_lat, home_lon);
            next = destination(lat, lon, heading, v * SAMPLE_INTERVAL_S as f64);
        }
        (lat, lon) = next;
    }
    out
}

/// All points of one driver, time-ordered. Trips alternate seeking and
/// serving, start at the active-hours start each day and never cross
/// midnight.
pub fn gen_driver(spec: &SynthSpec, style: &DriverStyle, index: usize) -> Vec<RawGpsPoint> {
    let grid = spec.grid();
    let id = driver_id(index);
    let per_day = 2 * spec.trips_per_day;
    let mut points = Vec::new();
    for day in 0..spec.days {
        let midnight = spec.start_midnight + day as i64 * SECONDS_PER_DAY;
        let end_of_day = midnight + SECONDS_PER_DAY;
        let mut t = midnight + (style.active_hours.0.rem_euclid(24.0) * 3600.0) as i64;
        for trip in 0..per_day {
            let key = style
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(((index as u64) << 32) | ((day as u64) << 16) | trip as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let remaining = per_day - trip - 1;
            let reserve = remaining as i64 * (MIN_TRIP_POINTS as i64 + 2) * SAMPLE_INTERVAL_S;
            let budget = ((end_of_day - t - reserve) / SAMPLE_INTERVAL_S).max(MIN_TRIP_POINTS as i64) as usize;
            let len = trip_length(&mut rng, style.trip_length_mean, budget);
            let kind = if trip % 2 == 0 { TripKind::Seeking } else { TripKind::Serving };
            points.extend(gen_trajectory(&mut rng, style, &grid, &id, kind, t, len));
            t += len as i64 * SAMPLE_INTERVAL_S + SAMPLE_INTERVAL_S;
        }
        debug_assert!(t <= end_of_day);
    }
    points
}

pub fn driver_id(index: usize) -> String {
    format!("driver_{index:03}")
}

/// Write the full corpus as preprocessing CSV, drivers in index order.
pub fn gen_corpus<W: Write>(spec: &SynthSpec, out: W) -> Result<Vec<DriverStyle>> {
    spec.validate()?;
    let styles = sample_styles(spec);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(crate::preprocess::CSV_COLUMNS)?;
    for (i, style) in styles.iter().enumerate() {
        for p in gen_driver(spec, style, i) {
            w.write_record(&[
                p.driver_id,
                p.timestamp.to_string(),
                format!("{:.7}", p.lat),
                format!("{:.7}", p.lon),
                u8::from(p.status).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(styles)
}

/// Epoch seconds of local midnight for `date` (`YYYY-MM-DD`).
pub fn midnight_of(date: &str, tz_offset_s: i64) -> Option<i64> {
    let d = chrono::NaiveDate::parse_from_str(date, "%Y-%m-%d").ok()?;
    Some(local_midnight(d, tz_offset_s))
}
