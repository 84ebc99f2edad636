use std::collections::HashMap;

use super::geo::{haversine_m, local_date};
use super::{PreprocessConfig, RawGpsPoint, TrajPoint, Trajectory, TripKind};

/// Split a time-sorted log into maximal runs of constant status.
pub fn segment_by_status(driver_id: &str, points: &[RawGpsPoint], tz_offset_s: i64) -> Vec<Trajectory> {
    points
        .chunk_by(|a, b| a.status == b.status)
        .map(|run| Trajectory {
            driver_id: driver_id.to_string(),
            day: local_date(run[0].timestamp, tz_offset_s),
            kind: TripKind::from_status(run[0].status),
            points: run
                .iter()
                .map(|p| TrajPoint {
                    lat: p.lat,
                    lon: p.lon,
                    timestamp: p.timestamp,
                    velocity: 0.0,
                })
                .collect(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FilterStats {
    pub dropped_by_length: usize,
    pub dropped_by_driver_day: usize,
}

/// Keep trajectories with `min_points..=max_points` points, then drop every
/// driver-day left with fewer than `min_trips_per_kind` trajectories of
/// either kind. Input order is preserved.
pub fn filter_trajectories(trajs: Vec<Trajectory>, cfg: &PreprocessConfig) -> (Vec<Trajectory>, FilterStats) {
    let mut stats = FilterStats::default();
    let by_length: Vec<Trajectory> = trajs
        .into_iter()
        .filter(|t| {
            let ok = (cfg.min_points..=cfg.max_points).contains(&t.points.len());
            if !ok {
                stats.dropped_by_length += 1;
            }
            ok
        })
        .collect();

    let mut counts: HashMap<(&str, chrono::NaiveDate), [usize; 2]> = HashMap::new();
    for t in &by_length {
        let slot = counts.entry((t.driver_id.as_str(), t.day)).or_default();
        slot[t.kind as usize] += 1;
    }
    let keep: Vec<bool> = by_length
        .iter()
        .map(|t| {
            let c = counts[&(t.driver_id.as_str(), t.day)];
            c.iter().all(|&n| n >= cfg.min_trips_per_kind)
        })
        .collect();

    let kept = by_length
        .into_iter()
        .zip(keep)
        .filter_map(|(t, k)| {
            if !k {
                stats.dropped_by_driver_day += 1;
            }
            k.then_some(t)
        })
        .collect();
    (kept, stats)
}

/// Average speed to the next point, in m/s. The final point repeats the
/// previous value; a zero time gap yields zero.
pub fn compute_velocity(traj: &mut Trajectory) {
    let n = traj.points.len();
    for i in 0..n.saturating_sub(1) {
        let (a, b) = (traj.points[i], traj.points[i + 1]);
        let dt = (b.timestamp - a.timestamp) as f64;
        traj.points[i].velocity = if dt > 0.0 {
            haversine_m(a.lat, a.lon, b.lat, b.lon) / dt
        } else {
            0.0
        };
    }
    if n >= 2 {
        traj.points[n - 1].velocity = traj.points[n - 2].velocity;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(statuses: &[u8]) -> Vec<RawGpsPoint> {
        statuses
            .iter()
            .enumerate()
            .map(|(i, &s)| RawGpsPoint {
                driver_id: "d".into(),
                timestamp: 40 * i as i64,
                lat: 22.5,
                lon: 114.0,
                status: s == 1,
            })
            .collect()
    }

    fn traj(driver: &str, day: u32, kind: TripKind, len: usize) -> Trajectory {
        Trajectory {
            driver_id: driver.into(),
            day: chrono::NaiveDate::from_ymd_opt(2016, 7, day).unwrap(),
            kind,
            points: (0..len)
                .map(|i| TrajPoint {
                    lat: 22.5,
                    lon: 114.0,
                    timestamp: i as i64 * 40,
                    velocity: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn segmentation_examples() {
        let lens = |s: &[u8]| {
            segment_by_status("d", &raw(s), 0)
                .iter()
                .map(|t| t.points.len())
                .collect::<Vec<_>>()
        };
        assert_eq!(lens(&[0, 0, 1, 1, 0]), vec![2, 2, 1]);
        assert_eq!(lens(&[1, 1, 1, 1]), vec![4]);
        assert_eq!(lens(&[0, 1, 0, 1, 0, 1]), vec![1; 6]);
        let t = segment_by_status("d", &raw(&[0, 1]), 0);
        assert_eq!(t[0].kind, TripKind::Seeking);
        assert_eq!(t[1].kind, TripKind::Serving);
    }

    fn day_set(driver: &str, day: u32, seeking: usize, serving: usize, len: usize) -> Vec<Trajectory> {
        let mut v: Vec<_> = (0..seeking).map(|_| traj(driver, day, TripKind::Seeking, len)).collect();
        v.extend((0..serving).map(|_| traj(driver, day, TripKind::Serving, len)));
        v
    }

    #[test]
    fn length_bounds_inclusive() {
        let cfg = PreprocessConfig::default();
        let mut input = day_set("a", 1, 5, 5, 20);
        input.push(traj("a", 1, TripKind::Seeking, 9));
        input.push(traj("a", 1, TripKind::Seeking, 10));
        input.push(traj("a", 1, TripKind::Serving, 300));
        input.push(traj("a", 1, TripKind::Serving, 301));
        let (kept, stats) = filter_trajectories(input, &cfg);
        assert_eq!(stats.dropped_by_length, 2);
        assert_eq!(kept.len(), 12);
        assert!(kept.iter().any(|t| t.points.len() == 300));
        assert!(kept.iter().all(|t| t.points.len() != 9));
    }

    #[test]
    fn driver_day_rule() {
        let cfg = PreprocessConfig::default();
        let mut input = day_set("a", 1, 5, 4, 20);
        input.extend(day_set("a", 2, 5, 5, 20));
        input.extend(day_set("b", 1, 6, 5, 20));
        let (kept, stats) = filter_trajectories(input, &cfg);
        assert_eq!(stats.dropped_by_driver_day, 9);
        assert_eq!(kept.len(), 21);
        assert!(!kept.iter().any(|t| t.driver_id == "a" && t.day.to_string() == "2016-07-01"));
    }

    #[test]
    fn length_filter_runs_before_day_rule() {
        // 5 serving trips but one is too short: the day no longer qualifies
        let cfg = PreprocessConfig::default();
        let mut input = day_set("a", 1, 5, 4, 20);
        input.push(traj("a", 1, TripKind::Serving, 5));
        let (kept, _) = filter_trajectories(input, &cfg);
        assert!(kept.is_empty());
    }

    #[test]
    fn velocities() {
        let mut t = traj("a", 1, TripKind::Seeking, 3);
        t.points[1].lat = 22.51;
        t.points[2].lat = 22.51;
        compute_velocity(&mut t);
        // 0.01° latitude in 40 s
        assert!((t.points[0].velocity - 27.798_731_66).abs() < 1e-6, "{}", t.points[0].velocity);
        assert_eq!(t.points[1].velocity, 0.0);
        assert_eq!(t.points[2].velocity, t.points[1].velocity);

        let mut same = traj("a", 1, TripKind::Seeking, 2);
        same.points[1].timestamp = 0;
        compute_velocity(&mut same);
        assert_eq!(same.points[0].velocity, 0.0);
    }
}
