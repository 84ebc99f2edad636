use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::geo::{haversine_m, seconds_of_day};
use super::{Grid, PreprocessError, Result, Trajectory, TripKind};

pub const PROFILE_DIM: usize = 12;

/// Per-driver summary over a period:
/// seeking trips/day, serving trips/day, mean and std of point velocity,
/// mean trip duration (s), mean point count, mean trip length (m),
/// distinct cells visited, and the share of points in each six-hour
/// block of the local day.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileFeatures(pub [f64; PROFILE_DIM]);

impl ProfileFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn extract_profile_features(trajs: &[&Trajectory], grid: &Grid, tz_offset_s: i64) -> Result<ProfileFeatures> {
    if trajs.is_empty() {
        return Err(PreprocessError::EmptyInput("profile needs at least one trajectory"));
    }
    let days: BTreeSet<_> = trajs.iter().map(|t| t.day).collect();
    let n_days = days.len() as f64;
    let n_trips = trajs.len() as f64;

    let mut f = [0.0; PROFILE_DIM];
    f[0] = trajs.iter().filter(|t| t.kind == TripKind::Seeking).count() as f64 / n_days;
    f[1] = trajs.iter().filter(|t| t.kind == TripKind::Serving).count() as f64 / n_days;

    let velocities: Vec<f64> = trajs.iter().flat_map(|t| t.points.iter().map(|p| p.velocity)).collect();
    let n_points = velocities.len().max(1) as f64;
    let mean_v = velocities.iter().sum::<f64>() / n_points;
    let var_v = velocities.iter().map(|v| (v - mean_v).powi(2)).sum::<f64>() / n_points;
    f[2] = mean_v;
    f[3] = var_v.sqrt();

    let mut duration = 0.0;
    let mut length = 0.0;
    let mut cells = BTreeSet::new();
    let mut blocks = [0usize; 4];
    for t in trajs {
        if let (Some(first), Some(last)) = (t.points.first(), t.points.last()) {
            duration += (last.timestamp - first.timestamp) as f64;
        }
        length += t
            .points
            .windows(2)
            .map(|w| haversine_m(w[0].lat, w[0].lon, w[1].lat, w[1].lon))
            .sum::<f64>();
        for p in &t.points {
            cells.insert(grid.cell(p.lat, p.lon));
            blocks[(seconds_of_day(p.timestamp, tz_offset_s) / (6 * 3600)) as usize] += 1;
        }
    }
    f[4] = duration / n_trips;
    f[5] = velocities.len() as f64 / n_trips;
    f[6] = length / n_trips;
    f[7] = cells.len() as f64;
    for (slot, count) in f[8..].iter_mut().zip(blocks) {
        *slot = count as f64 / n_points;
    }
    Ok(ProfileFeatures(f))
}

/// Per-feature standardisation fitted on training drivers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileNormalizer {
    pub mean: [f64; PROFILE_DIM],
    pub std: [f64; PROFILE_DIM],
}

impl Default for ProfileNormalizer {
    fn default() -> Self {
        Self {
            mean: [0.0; PROFILE_DIM],
            std: [1.0; PROFILE_DIM],
        }
    }
}

impl ProfileNormalizer {
    pub fn fit(samples: &[ProfileFeatures]) -> Result<Self> {
        if samples.is_empty() {
            return Err(PreprocessError::EmptyInput("cannot fit a normalizer on no profiles"));
        }
        let n = samples.len() as f64;
        let mut out = Self::default();
        for j in 0..PROFILE_DIM {
            let mean = samples.iter().map(|s| s.0[j]).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s.0[j] - mean).powi(2)).sum::<f64>() / n;
            out.mean[j] = mean;
            out.std[j] = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
        }
        Ok(out)
    }

    pub fn apply(&self, f: &ProfileFeatures) -> [f64; PROFILE_DIM] {
        std::array::from_fn(|j| (f.0[j] - self.mean[j]) / self.std[j])
    }
}
