use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use super::{PreprocessConfig, PreprocessError, RawGpsPoint, Result};

pub const CSV_COLUMNS: [&str; 5] = ["driver_id", "timestamp", "lat", "lon", "status"];

/// Per-driver point lists, each sorted by timestamp with duplicate
/// timestamps removed (first occurrence wins).
#[derive(Clone, Debug, Default)]
pub struct Ingested {
    pub drivers: BTreeMap<String, Vec<RawGpsPoint>>,
    pub rows_read: usize,
    pub malformed_rows: usize,
    pub out_of_area_rows: usize,
    pub duplicate_rows: usize,
}

impl Ingested {
    pub fn point_count(&self) -> usize {
        self.drivers.values().map(Vec::len).sum()
    }
}

pub fn ingest_csv(path: &Path, cfg: &PreprocessConfig) -> Result<Ingested> {
    ingest_reader(File::open(path)?, cfg)
}

fn parse_row(record: &csv::StringRecord, cols: &[usize; 5]) -> Option<RawGpsPoint> {
    let field = |i: usize| record.get(cols[i]).map(str::trim);
    let driver_id = field(0).filter(|s| !s.is_empty())?.to_string();
    let timestamp = field(1)?.parse::<i64>().ok()?;
    let lat = field(2)?.parse::<f64>().ok()?;
    let lon = field(3)?.parse::<f64>().ok()?;
    let status = match field(4)? {
        "0" => false,
        "1" => true,
        _ => return None,
    };
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return None;
    }
    Some(RawGpsPoint {
        driver_id,
        timestamp,
        lat,
        lon,
        status,
    })
}

pub fn ingest_reader<R: Read>(reader: R, cfg: &PreprocessConfig) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or(PreprocessError::MissingColumn(name))?;
    }

    let mut out = Ingested::default();
    for record in rdr.records() {
        out.rows_read += 1;
        let Some(point) = record.ok().and_then(|r| parse_row(&r, &cols)) else {
            out.malformed_rows += 1;
            continue;
        };
        if !cfg.bbox.contains(point.lat, point.lon) {
            out.out_of_area_rows += 1;
            continue;
        }
        out.drivers.entry(point.driver_id.clone()).or_default().push(point);
    }
    if out.malformed_rows > 0 {
        log::warn!("skipped {} malformed CSV rows", out.malformed_rows);
    }

    for points in out.drivers.values_mut() {
        // stable: equal timestamps keep file order, so dedup keeps the first
        points.sort_by_key(|p| p.timestamp);
        let before = points.len();
        points.dedup_by_key(|p| p.timestamp);
        out.duplicate_rows += before - points.len();
    }

    if out.drivers.is_empty() {
        return Err(PreprocessError::Empty {
            malformed: out.malformed_rows,
            out_of_area: out.out_of_area_rows,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PreprocessConfig {
        PreprocessConfig::default()
    }

    #[test]
    fn one_point() {
        let csv = "driver_id,timestamp,lat,lon,status\nd1,100,22.5,114.0,0\n";
        let got = ingest_reader(csv.as_bytes(), &cfg()).unwrap();
        assert_eq!(got.drivers.len(), 1);
        assert_eq!(got.point_count(), 1);
    }

    #[test]
    fn out_of_area_dropped() {
        let csv = "driver_id,timestamp,lat,lon,status\nd1,100,22.5,114.0,0\nd1,140,23.5,114.0,0\n";
        let got = ingest_reader(csv.as_bytes(), &cfg()).unwrap();
        assert_eq!(got.point_count(), 1);
        assert_eq!(got.out_of_area_rows, 1);
    }

    #[test]
    fn malformed_rows_counted_and_dupes_removed() {
        let csv = "driver_id,timestamp,lat,lon,status\n\
                   d1,200,22.5,114.0,1\n\
                   d1,100,22.5,114.0,0\n\
                   d1,100,22.6,114.1,1\n\
                   d1,abc,22.5,114.0,0\n\
                   d1,300,22.5,114.0,2\n\
                   d1,400,22.5\n";
        let got = ingest_reader(csv.as_bytes(), &cfg()).unwrap();
        let pts = &got.drivers["d1"];
        assert_eq!(pts.iter().map(|p| p.timestamp).collect::<Vec<_>>(), vec![100, 200]);
        assert_eq!(pts[0].lat, 22.5, "first duplicate kept");
        assert_eq!(got.malformed_rows, 3);
        assert_eq!(got.duplicate_rows, 1);
    }

    #[test]
    fn empty_result_is_error() {
        let csv = "driver_id,timestamp,lat,lon,status\n";
        assert!(matches!(
            ingest_reader(csv.as_bytes(), &cfg()),
            Err(PreprocessError::Empty { .. })
        ));
        let csv = "driver,timestamp,lat,lon,status\nd1,1,22.5,114.0,0\n";
        assert!(matches!(
            ingest_reader(csv.as_bytes(), &cfg()),
            Err(PreprocessError::MissingColumn("driver_id"))
        ));
    }

    #[test]
    fn hundred_row_fixture_keeps_ninety_three() {
        // 7 rows are placed outside the bbox at hand-picked positions
        let outside = [3usize, 17, 29, 44, 58, 71, 96];
        let mut csv = String::from("driver_id,timestamp,lat,lon,status\n");
        for i in 0..100 {
            let (lat, lon) = match outside.iter().position(|&o| o == i) {
                Some(k) if k % 2 == 0 => (22.30, 114.0),
                Some(_) => (22.6, 114.80),
                None => (22.5 + i as f64 * 1e-3, 114.0),
            };
            csv.push_str(&format!("d{},{},{lat},{lon},0\n", i % 3, 1000 + 40 * i));
        }
        let got = ingest_reader(csv.as_bytes(), &cfg()).unwrap();
        assert_eq!(got.point_count(), 93);
        assert_eq!(got.out_of_area_rows, 7);
        assert_eq!(got.rows_read, 100);
    }
}
