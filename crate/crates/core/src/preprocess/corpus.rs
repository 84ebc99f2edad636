use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{
    extract_profile_features, to_grid, GridCell, GridSequence, PreprocessConfig, PreprocessError, ProfileFeatures,
    Result, Trajectory, TripKind,
};

pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const PROFILES_FILE: &str = "profiles.jsonl";

/// One line of `trajectories.jsonl`. Cells are `(g_lat, g_lon, interval, velocity)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub driver: String,
    pub day: String,
    pub kind: TripKind,
    pub cells: Vec<(usize, usize, u16, f64)>,
}

/// One line of `profiles.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub driver: String,
    pub period: String,
    pub features: ProfileFeatures,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DayData {
    pub day: NaiveDate,
    pub seeking: Vec<GridSequence>,
    pub serving: Vec<GridSequence>,
    pub profile: ProfileFeatures,
}

impl DayData {
    pub fn trips(&self, kind: TripKind) -> &[GridSequence] {
        match kind {
            TripKind::Seeking => &self.seeking,
            TripKind::Serving => &self.serving,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriverData {
    pub id: String,
    /// Sorted by date.
    pub days: Vec<DayData>,
}

/// Model-ready data, drivers sorted by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub drivers: Vec<DriverData>,
}

fn parse_day(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| PreprocessError::Corpus(format!("bad date {s:?}: {e}")))
}

impl Corpus {
    /// Grid every trajectory and compute one profile per driver-day.
    pub fn from_trajectories(trajs: &[Trajectory], cfg: &PreprocessConfig) -> Result<Self> {
        let grid = cfg.grid();
        let mut grouped: BTreeMap<&str, BTreeMap<NaiveDate, Vec<&Trajectory>>> = BTreeMap::new();
        for t in trajs {
            grouped.entry(&t.driver_id).or_default().entry(t.day).or_default().push(t);
        }
        let mut drivers = Vec::with_capacity(grouped.len());
        for (id, days) in grouped {
            let mut out_days = Vec::with_capacity(days.len());
            for (day, list) in days {
                let profile = extract_profile_features(&list, &grid, cfg.tz_offset_s)?;
                let of_kind = |k| {
                    list.iter()
                        .filter(|t| t.kind == k)
                        .map(|t| to_grid(t, &grid, cfg.tz_offset_s))
                        .collect()
                };
                out_days.push(DayData {
                    day,
                    seeking: of_kind(TripKind::Seeking),
                    serving: of_kind(TripKind::Serving),
                    profile,
                });
            }
            drivers.push(DriverData {
                id: id.to_string(),
                days: out_days,
            });
        }
        Ok(Self { drivers })
    }

    pub fn driver(&self, id: &str) -> Option<&DriverData> {
        self.drivers.iter().find(|d| d.id == id)
    }

    pub fn trajectory_count(&self) -> usize {
        self.drivers
            .iter()
            .flat_map(|d| &d.days)
            .map(|d| d.seeking.len() + d.serving.len())
            .sum()
    }

    /// Keep only the listed drivers (in corpus order).
    pub fn subset(&self, ids: &[String]) -> Self {
        Self {
            drivers: self.drivers.iter().filter(|d| ids.contains(&d.id)).cloned().collect(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut trajs = BufWriter::new(File::create(dir.join(TRAJECTORIES_FILE))?);
        let mut profiles = BufWriter::new(File::create(dir.join(PROFILES_FILE))?);
        let json_err = |source| PreprocessError::Json { line: 0, source };
        for d in &self.drivers {
            for day in &d.days {
                for kind in [TripKind::Seeking, TripKind::Serving] {
                    for seq in day.trips(kind) {
                        let rec = TrajectoryRecord {
                            driver: d.id.clone(),
                            day: day.day.to_string(),
                            kind,
                            cells: seq.cells[..seq.original_length]
                                .iter()
                                .map(|c| (c.g_lat, c.g_lon, c.interval, c.velocity))
                                .collect(),
                        };
                        serde_json::to_writer(&mut trajs, &rec).map_err(json_err)?;
                        trajs.write_all(b"\n")?;
                    }
                }
                let rec = ProfileRecord {
                    driver: d.id.clone(),
                    period: day.day.to_string(),
                    features: day.profile,
                };
                serde_json::to_writer(&mut profiles, &rec).map_err(json_err)?;
                profiles.write_all(b"\n")?;
            }
        }
        trajs.flush()?;
        profiles.flush()?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mut profiles: BTreeMap<(String, NaiveDate), ProfileFeatures> = BTreeMap::new();
        for (rec, _) in read_jsonl::<ProfileRecord>(&dir.join(PROFILES_FILE))? {
            let day = parse_day(&rec.period)?;
            profiles.insert((rec.driver, day), rec.features);
        }
        type Trips = (Vec<GridSequence>, Vec<GridSequence>);
        let mut trips: BTreeMap<(String, NaiveDate), Trips> = BTreeMap::new();
        for (rec, line) in read_jsonl::<TrajectoryRecord>(&dir.join(TRAJECTORIES_FILE))? {
            if rec.cells.is_empty() {
                return Err(PreprocessError::Corpus(format!("empty trajectory at line {line}")));
            }
            let day = parse_day(&rec.day)?;
            let seq = GridSequence::from_cells(
                rec.cells
                    .into_iter()
                    .map(|(g_lat, g_lon, interval, velocity)| GridCell {
                        g_lat,
                        g_lon,
                        interval,
                        velocity,
                    })
                    .collect(),
            );
            let slot = trips.entry((rec.driver, day)).or_default();
            match rec.kind {
                TripKind::Seeking => slot.0.push(seq),
                TripKind::Serving => slot.1.push(seq),
            }
        }

        let mut drivers: Vec<DriverData> = Vec::new();
        for ((driver, day), (seeking, serving)) in trips {
            let profile = *profiles
                .get(&(driver.clone(), day))
                .ok_or_else(|| PreprocessError::Corpus(format!("no profile for {driver} on {day}")))?;
            let entry = DayData {
                day,
                seeking,
                serving,
                profile,
            };
            match drivers.last_mut() {
                Some(d) if d.id == driver => d.days.push(entry),
                _ => drivers.push(DriverData {
                    id: driver,
                    days: vec![entry],
                }),
            }
        }
        Ok(Self { drivers })
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(T, usize)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| PreprocessError::Json { line: i + 1, source })?;
        out.push((rec, i + 1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::TrajPoint;

    fn trajs() -> Vec<Trajectory> {
        let mut v = Vec::new();
        for (driver, day) in [("b", 2), ("a", 1), ("a", 3)] {
            for (k, kind) in [TripKind::Seeking, TripKind::Serving, TripKind::Seeking].into_iter().enumerate() {
                v.push(Trajectory {
                    driver_id: driver.into(),
                    day: NaiveDate::from_ymd_opt(2016, 7, day).unwrap(),
                    kind,
                    points: (0..3)
                        .map(|i| TrajPoint {
                            lat: 22.5 + 0.013 * i as f64,
                            lon: 114.0 + 0.001 * k as f64,
                            timestamp: 1_467_331_200 + 86_400 * (day as i64 - 1) + 3600 * k as i64 + 40 * i as i64,
                            velocity: 0.1 * (i + k) as f64 + 1.0 / 3.0,
                        })
                        .collect(),
                });
            }
        }
        v
    }

    #[test]
    fn grouping_and_order() {
        let c = Corpus::from_trajectories(&trajs(), &PreprocessConfig::default()).unwrap();
        assert_eq!(c.drivers.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(c.drivers[0].days.len(), 2);
        assert_eq!(c.drivers[0].days[0].seeking.len(), 2);
        assert_eq!(c.drivers[0].days[0].serving.len(), 1);
        assert_eq!(c.trajectory_count(), 9);
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = Corpus::from_trajectories(&trajs(), &PreprocessConfig::default()).unwrap();
        c.write(dir.path()).unwrap();
        let back = Corpus::read(dir.path()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(PROFILES_FILE), "").unwrap();
        std::fs::write(dir.path().join(TRAJECTORIES_FILE), "\n{oops\n").unwrap();
        match Corpus::read(dir.path()) {
            Err(PreprocessError::Json { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
