use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{DriverInput, PairExample};
use crate::preprocess::{Corpus, ProfileNormalizer};

#[derive(Debug, Error)]
pub enum PairError {
    #[error("need at least two drivers to form pairs, found {0}")]
    TooFewDrivers(usize),
    #[error("no driver has enough trajectories for a same-driver pair")]
    NoSameDriverCandidates,
    #[error("pair references a trajectory outside the corpus")]
    BadReference,
    #[error("manifest write failed: {0}")]
    Csv(#[from] csv::Error),
}

/// One side of a pair: indices into `corpus.drivers[driver].days[day]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TripRef {
    pub driver: usize,
    pub day: usize,
    pub seeking: usize,
    pub serving: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairSpec {
    pub a: TripRef,
    pub b: TripRef,
    /// 0 same driver, 1 different drivers.
    pub label: u8,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairStream {
    pub pairs: Vec<PairSpec>,
    /// Drivers that cannot appear in same-driver pairs.
    pub skipped_drivers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairSampler {
    pub n_pairs: usize,
    pub same_ratio: f64,
    /// Exactly `round(n_pairs · same_ratio)` same-driver pairs instead of
    /// an independent draw per pair.
    pub balanced: bool,
    pub seed: u64,
}

impl Default for PairSampler {
    fn default() -> Self {
        Self {
            n_pairs: 256,
            same_ratio: 0.5,
            balanced: false,
            seed: 0,
        }
    }
}

/// Whether two disjoint (seeking, serving) draws exist for this driver.
fn can_pair_with_itself(corpus: &Corpus, driver: usize) -> bool {
    let days = &corpus.drivers[driver].days;
    days.len() >= 2 || days.iter().any(|d| d.seeking.len() >= 2 && d.serving.len() >= 2)
}

fn pick_side<R: Rng>(rng: &mut R, corpus: &Corpus, driver: usize, day: usize) -> TripRef {
    let d = &corpus.drivers[driver].days[day];
    TripRef {
        driver,
        day,
        seeking: rng.random_range(0..d.seeking.len()),
        serving: rng.random_range(0..d.serving.len()),
    }
}

fn same_driver_pair<R: Rng>(rng: &mut R, corpus: &Corpus, driver: usize) -> (TripRef, TripRef) {
    let days = &corpus.drivers[driver].days;
    if days.len() >= 2 {
        let picked = rand::seq::index::sample(rng, days.len(), 2);
        let a = pick_side(rng, corpus, driver, picked.index(0));
        let b = pick_side(rng, corpus, driver, picked.index(1));
        return (a, b);
    }
    let d = &days[0];
    let seeking = rand::seq::index::sample(rng, d.seeking.len(), 2);
    let serving = rand::seq::index::sample(rng, d.serving.len(), 2);
    let side = |k| TripRef {
        driver,
        day: 0,
        seeking: seeking.index(k),
        serving: serving.index(k),
    };
    (side(0), side(1))
}

/// Seeded pair stream over `corpus`. Same-driver pairs use different days
/// when the driver has several, otherwise disjoint trips from one day.
pub fn make_pairs(corpus: &Corpus, sampler: &PairSampler) -> Result<PairStream, PairError> {
    let usable: Vec<usize> = (0..corpus.drivers.len())
        .filter(|&i| {
            corpus.drivers[i]
                .days
                .iter()
                .any(|d| !d.seeking.is_empty() && !d.serving.is_empty())
        })
        .collect();
    if usable.len() < 2 {
        return Err(PairError::TooFewDrivers(usable.len()));
    }
    let self_pairable: Vec<usize> = usable
        .iter()
        .copied()
        .filter(|&i| can_pair_with_itself(corpus, i))
        .collect();
    let skipped_drivers = corpus.drivers.len() - self_pairable.len();
    if skipped_drivers > 0 {
        log::info!("{skipped_drivers} drivers cannot form same-driver pairs");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut same_flags: Vec<bool> = if sampler.balanced {
        let n_same = (sampler.n_pairs as f64 * sampler.same_ratio).round() as usize;
        let mut v: Vec<bool> = (0..sampler.n_pairs).map(|i| i < n_same).collect();
        v.shuffle(&mut rng);
        v
    } else {
        (0..sampler.n_pairs)
            .map(|_| rng.random_bool(sampler.same_ratio.clamp(0.0, 1.0)))
            .collect()
    };
    if same_flags.iter().any(|&s| s) && self_pairable.is_empty() {
        return Err(PairError::NoSameDriverCandidates);
    }

    let mut pairs = Vec::with_capacity(sampler.n_pairs);
    for same in same_flags.drain(..) {
        let day_of = |rng: &mut ChaCha8Rng, driver: usize| {
            let days: Vec<usize> = corpus.drivers[driver]
                .days
                .iter()
                .enumerate()
                .filter(|(_, d)| !d.seeking.is_empty() && !d.serving.is_empty())
                .map(|(i, _)| i)
                .collect();
            days[rng.random_range(0..days.len())]
        };
        let spec = if same {
            let driver = self_pairable[rng.random_range(0..self_pairable.len())];
            let (a, b) = same_driver_pair(&mut rng, corpus, driver);
            PairSpec { a, b, label: 0 }
        } else {
            let picked = rand::seq::index::sample(&mut rng, usable.len(), 2);
            let (da, db) = (usable[picked.index(0)], usable[picked.index(1)]);
            let day_a = day_of(&mut rng, da);
            let a = pick_side(&mut rng, corpus, da, day_a);
            let day_b = day_of(&mut rng, db);
            let b = pick_side(&mut rng, corpus, db, day_b);
            PairSpec { a, b, label: 1 }
        };
        pairs.push(spec);
    }
    Ok(PairStream {
        pairs,
        skipped_drivers,
    })
}

fn driver_input(corpus: &Corpus, normalizer: &ProfileNormalizer, r: TripRef) -> Result<DriverInput, PairError> {
    let day = corpus
        .drivers
        .get(r.driver)
        .and_then(|d| d.days.get(r.day))
        .ok_or(PairError::BadReference)?;
    Ok(DriverInput {
        seeking: day.seeking.get(r.seeking).ok_or(PairError::BadReference)?.clone(),
        serving: day.serving.get(r.serving).ok_or(PairError::BadReference)?.clone(),
        profile: normalizer.apply(&day.profile),
    })
}

impl PairSpec {
    pub fn materialize(&self, corpus: &Corpus, normalizer: &ProfileNormalizer) -> Result<PairExample, PairError> {
        Ok(PairExample {
            a: driver_input(corpus, normalizer, self.a)?,
            b: driver_input(corpus, normalizer, self.b)?,
            label: self.label,
        })
    }
}

/// One CSV line per pair: driver ids, dates, trip indices and label.
pub fn write_manifest<W: Write>(out: W, corpus: &Corpus, pairs: &[PairSpec]) -> Result<(), PairError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "pair", "driver_a", "day_a", "seeking_a", "serving_a", "driver_b", "day_b", "seeking_b", "serving_b", "label",
    ])?;
    for (i, p) in pairs.iter().enumerate() {
        let mut row = vec![i.to_string()];
        for r in [p.a, p.b] {
            let driver = corpus.drivers.get(r.driver).ok_or(PairError::BadReference)?;
            let day = driver.days.get(r.day).ok_or(PairError::BadReference)?;
            row.extend([
                driver.id.clone(),
                day.day.to_string(),
                r.seeking.to_string(),
                r.serving.to_string(),
            ]);
        }
        row.push(p.label.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{DayData, DriverData, GridCell, GridSequence, ProfileFeatures, PROFILE_DIM};
    use chrono::NaiveDate;

    fn corpus(days_per_driver: &[usize], trips: usize) -> Corpus {
        let seq = GridSequence::from_cells(vec![GridCell::PAD; 10]);
        Corpus {
            drivers: days_per_driver
                .iter()
                .enumerate()
                .map(|(i, &n)| DriverData {
                    id: format!("d{i}"),
                    days: (0..n)
                        .map(|k| DayData {
                            day: NaiveDate::from_ymd_opt(2016, 7, 1 + k as u32).unwrap(),
                            seeking: vec![seq.clone(); trips],
                            serving: vec![seq.clone(); trips],
                            profile: ProfileFeatures([i as f64; PROFILE_DIM]),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn deterministic_and_labels_match_ids() {
        let c = corpus(&[2, 3, 1], 5);
        let s = PairSampler {
            n_pairs: 100,
            seed: 7,
            ..Default::default()
        };
        let a = make_pairs(&c, &s).unwrap();
        assert_eq!(a, make_pairs(&c, &s).unwrap());
        for p in &a.pairs {
            assert_eq!(p.label == 0, p.a.driver == p.b.driver);
            if p.label == 0 {
                assert!(p.a != p.b);
                if c.drivers[p.a.driver].days.len() > 1 {
                    assert_ne!(p.a.day, p.b.day);
                }
            }
        }
    }

    #[test]
    fn bernoulli_ratio_near_half() {
        let c = corpus(&[2, 2], 5);
        let s = PairSampler {
            n_pairs: 100,
            seed: 1,
            ..Default::default()
        };
        let same = make_pairs(&c, &s).unwrap().pairs.iter().filter(|p| p.label == 0).count();
        // 4 standard deviations of Binomial(100, 0.5)
        assert!((30..=70).contains(&same), "{same}");
    }

    #[test]
    fn balanced_is_exact() {
        let c = corpus(&[2, 2, 2], 5);
        let s = PairSampler {
            n_pairs: 40,
            balanced: true,
            seed: 3,
            ..Default::default()
        };
        let same = make_pairs(&c, &s).unwrap().pairs.iter().filter(|p| p.label == 0).count();
        assert_eq!(same, 20);
    }

    #[test]
    fn single_trip_drivers_are_skipped() {
        let c = corpus(&[1, 1, 2], 1);
        let s = PairSampler {
            n_pairs: 50,
            seed: 2,
            ..Default::default()
        };
        let st = make_pairs(&c, &s).unwrap();
        assert_eq!(st.skipped_drivers, 2);
        assert!(st.pairs.iter().filter(|p| p.label == 0).all(|p| p.a.driver == 2));
        assert!(matches!(
            make_pairs(&corpus(&[1], 3), &s),
            Err(PairError::TooFewDrivers(1))
        ));
    }

    #[test]
    fn materialize_and_manifest() {
        let c = corpus(&[2, 2], 3);
        let st = make_pairs(
            &c,
            &PairSampler {
                n_pairs: 5,
                seed: 9,
                ..Default::default()
            },
        )
        .unwrap();
        let ex = st.pairs[0].materialize(&c, &ProfileNormalizer::default()).unwrap();
        assert_eq!(ex.a.profile[0], st.pairs[0].a.driver as f64);
        let mut buf = Vec::new();
        write_manifest(&mut buf, &c, &st.pairs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("pair,driver_a,day_a"));
    }
}
