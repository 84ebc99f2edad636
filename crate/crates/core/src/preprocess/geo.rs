use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const SECONDS_PER_DAY: i64 = 86_400;
pub const INTERVAL_SECONDS: i64 = 300;
pub const INTERVALS_PER_DAY: usize = 288;

// Absorbs representation error in (coord - origin) / side so that e.g.
// (22.53 - 22.44) / 0.01 lands in cell 9 rather than 8.999… → 8.
const GRID_EPS: f64 = 1e-9;

/// Great-circle distance in metres.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().asin()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.lat_min..=self.lat_max).contains(&lat) && (self.lon_min..=self.lon_max).contains(&lon)
    }

    pub fn is_valid(&self) -> bool {
        self.lat_min < self.lat_max
            && self.lon_min < self.lon_max
            && self.lat_min >= -90.0
            && self.lat_max <= 90.0
            && self.lon_min >= -180.0
            && self.lon_max <= 180.0
    }
}

/// Square grid of side `cell_deg` anchored at the south-west bbox corner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub bbox: BoundingBox,
    pub cell_deg: f64,
}

impl Grid {
    pub fn new(bbox: BoundingBox, cell_deg: f64) -> Self {
        Self { bbox, cell_deg }
    }

    fn cells_along(&self, span: f64) -> usize {
        ((span / self.cell_deg - GRID_EPS).ceil() as usize).max(1)
    }

    pub fn lat_cells(&self) -> usize {
        self.cells_along(self.bbox.lat_max - self.bbox.lat_min)
    }

    pub fn lon_cells(&self) -> usize {
        self.cells_along(self.bbox.lon_max - self.bbox.lon_min)
    }

    fn index(&self, value: f64, origin: f64, cells: usize) -> usize {
        let raw = ((value - origin) / self.cell_deg + GRID_EPS).floor();
        (raw.max(0.0) as usize).min(cells - 1)
    }

    /// `(g_lat, g_lon)` of a point inside the bbox. Points on the far edge
    /// fall into the last cell.
    pub fn cell(&self, lat: f64, lon: f64) -> (usize, usize) {
        (
            self.index(lat, self.bbox.lat_min, self.lat_cells()),
            self.index(lon, self.bbox.lon_min, self.lon_cells()),
        )
    }

    /// South-west corner of a cell.
    pub fn cell_origin(&self, g_lat: usize, g_lon: usize) -> (f64, f64) {
        (
            self.bbox.lat_min + g_lat as f64 * self.cell_deg,
            self.bbox.lon_min + g_lon as f64 * self.cell_deg,
        )
    }
}

/// Seconds since local midnight.
pub fn seconds_of_day(timestamp: i64, tz_offset_s: i64) -> i64 {
    (timestamp + tz_offset_s).rem_euclid(SECONDS_PER_DAY)
}

/// 1-based five-minute slot of the local day, in `1..=288`.
pub fn interval_of_day(timestamp: i64, tz_offset_s: i64) -> u16 {
    (seconds_of_day(timestamp, tz_offset_s) / INTERVAL_SECONDS + 1) as u16
}

/// Local calendar date.
pub fn local_date(timestamp: i64, tz_offset_s: i64) -> NaiveDate {
    let days = (timestamp + tz_offset_s).div_euclid(SECONDS_PER_DAY);
    NaiveDate::from_num_days_from_ce_opt(719_163 + days as i32).expect("date in range")
}

/// Epoch seconds of local midnight at the start of `date`.
pub fn local_midnight(date: NaiveDate, tz_offset_s: i64) -> i64 {
    let days = i64::from(date.num_days_from_ce() - 719_163);
    days * SECONDS_PER_DAY - tz_offset_s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shenzhen() -> Grid {
        Grid::new(
            BoundingBox {
                lat_min: 22.44,
                lat_max: 22.87,
                lon_min: 113.75,
                lon_max: 114.65,
            },
            0.01,
        )
    }

    #[test]
    fn grid_floor_arithmetic() {
        let g = shenzhen();
        assert_eq!(g.cell(22.53, 113.75).0, 9);
        assert_eq!(g.cell(22.44, 113.75), (0, 0));
        assert_eq!(g.cell(22.4499, 113.7599), (0, 0));
        assert_eq!(g.lat_cells(), 43);
        assert_eq!(g.lon_cells(), 90);
        assert_eq!(g.cell(22.87, 114.65), (42, 89));
    }

    #[test]
    fn intervals() {
        assert_eq!(interval_of_day(0, 0), 1);
        assert_eq!(interval_of_day(450, 0), 2);
        assert_eq!(interval_of_day(86_399, 0), 288);
        assert_eq!(interval_of_day(86_400, 0), 1);
        // 16:00 UTC is midnight at UTC+8
        assert_eq!(interval_of_day(16 * 3600, 8 * 3600), 1);
    }

    #[test]
    fn dates() {
        let d = local_date(1_467_331_200, 0); // 2016-07-01T00:00:00Z
        assert_eq!(d.to_string(), "2016-07-01");
        assert_eq!(local_midnight(d, 0), 1_467_331_200);
        assert_eq!(local_date(1_467_331_200 - 1, 0).to_string(), "2016-06-30");
        assert_eq!(local_midnight(d, 8 * 3600), 1_467_331_200 - 8 * 3600);
    }

    #[test]
    fn haversine_reference() {
        assert_eq!(haversine_m(22.5, 114.0, 22.5, 114.0), 0.0);
        // 0.01° of latitude on a 6371 km sphere: 6371000 · π/18000
        let d = haversine_m(22.50, 114.0, 22.51, 114.0);
        assert!((d - 1111.949_266_4).abs() < 1e-3, "{d}");
    }
}
