use std::collections::BTreeSet;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use super::{HarnessError, Result};
use crate::model::MaTcnConfig;
use crate::preprocess::PreprocessConfig;

/// Everything a run depends on. Serialised as flat `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: MaTcnConfig,
    pub preprocess: PreprocessConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub threshold: f64,
    /// Training pairs drawn per epoch.
    pub train_pairs: usize,
    /// Balanced pairs used for validation and evaluation.
    pub eval_pairs: usize,
    pub same_ratio: f64,
    /// Trailing days of each training driver kept for validation.
    pub val_days: usize,
    /// Share of drivers held out entirely for testing.
    pub test_fraction: f64,
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: MaTcnConfig::default(),
            preprocess: PreprocessConfig::default(),
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            threshold: 0.5,
            train_pairs: 512,
            eval_pairs: 400,
            same_ratio: 0.5,
            val_days: 1,
            test_fraction: 0.3,
            corpus_dir: PathBuf::from("corpus"),
            out_dir: PathBuf::from("run"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Set one field by key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let p = &mut self.preprocess;
        match key.trim() {
            "d" => m.d = parse(key, v)?,
            "n_heads" => m.n_heads = parse(key, v)?,
            "n_blocks" => m.n_blocks = parse(key, v)?,
            "kernel_size" => m.kernel_size = parse(key, v)?,
            "dilation_base" => m.dilation_base = parse(key, v)?,
            "lat_cells" => m.lat_cells = parse(key, v)?,
            "lon_cells" => m.lon_cells = parse(key, v)?,
            "lat_dim" => m.lat_dim = parse(key, v)?,
            "lon_dim" => m.lon_dim = parse(key, v)?,
            "interval_dim" => m.interval_dim = parse(key, v)?,
            "velocity_dim" => m.velocity_dim = parse(key, v)?,
            "reduction" => m.reduction = parse(key, v)?,
            "disable_mhsa" => m.disable_mhsa = parse(key, v)?,
            "disable_aggregation" => m.disable_aggregation = parse(key, v)?,
            "lat_min" => p.bbox.lat_min = parse(key, v)?,
            "lat_max" => p.bbox.lat_max = parse(key, v)?,
            "lon_min" => p.bbox.lon_min = parse(key, v)?,
            "lon_max" => p.bbox.lon_max = parse(key, v)?,
            "grid_side_deg" => p.grid_side_deg = parse(key, v)?,
            "tz_offset_s" => p.tz_offset_s = parse(key, v)?,
            "min_points" => p.min_points = parse(key, v)?,
            "max_points" => p.max_points = parse(key, v)?,
            "min_trips_per_kind" => p.min_trips_per_kind = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "train_pairs" => self.train_pairs = parse(key, v)?,
            "eval_pairs" => self.eval_pairs = parse(key, v)?,
            "same_ratio" => self.same_ratio = parse(key, v)?,
            "val_days" => self.val_days = parse(key, v)?,
            "test_fraction" => self.test_fraction = parse(key, v)?,
            "corpus_dir" => self.corpus_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(HarnessError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored. Grid vocabulary sizes follow the bounding box
    /// unless set explicitly.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
            seen.insert(k.trim().to_string());
        }
        self.sync_grid(!seen.contains("lat_cells"), !seen.contains("lon_cells"));
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    fn sync_grid(&mut self, lat: bool, lon: bool) {
        let g = self.preprocess.grid();
        if lat {
            self.model.lat_cells = g.lat_cells();
        }
        if lon {
            self.model.lon_cells = g.lon_cells();
        }
    }

    /// Canonical text: every key, fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let p = &self.preprocess;
        let pairs: Vec<(&str, String)> = vec![
            ("d", m.d.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("n_blocks", m.n_blocks.to_string()),
            ("kernel_size", m.kernel_size.to_string()),
            ("dilation_base", m.dilation_base.to_string()),
            ("lat_cells", m.lat_cells.to_string()),
            ("lon_cells", m.lon_cells.to_string()),
            ("lat_dim", m.lat_dim.to_string()),
            ("lon_dim", m.lon_dim.to_string()),
            ("interval_dim", m.interval_dim.to_string()),
            ("velocity_dim", m.velocity_dim.to_string()),
            ("reduction", m.reduction.to_string()),
            ("disable_mhsa", m.disable_mhsa.to_string()),
            ("disable_aggregation", m.disable_aggregation.to_string()),
            ("lat_min", p.bbox.lat_min.to_string()),
            ("lat_max", p.bbox.lat_max.to_string()),
            ("lon_min", p.bbox.lon_min.to_string()),
            ("lon_max", p.bbox.lon_max.to_string()),
            ("grid_side_deg", p.grid_side_deg.to_string()),
            ("tz_offset_s", p.tz_offset_s.to_string()),
            ("min_points", p.min_points.to_string()),
            ("max_points", p.max_points.to_string()),
            ("min_trips_per_kind", p.min_trips_per_kind.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("threshold", self.threshold.to_string()),
            ("train_pairs", self.train_pairs.to_string()),
            ("eval_pairs", self.eval_pairs.to_string()),
            ("same_ratio", self.same_ratio.to_string()),
            ("val_days", self.val_days.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
            ("corpus_dir", self.corpus_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.preprocess
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let g = self.preprocess.grid();
        if self.model.lat_cells < g.lat_cells() || self.model.lon_cells < g.lon_cells() {
            return Err(HarnessError::Config(format!(
                "grid vocabulary {}×{} is smaller than the {}×{} grid",
                self.model.lat_cells,
                self.model.lon_cells,
                g.lat_cells(),
                g.lon_cells()
            )));
        }
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.same_ratio) {
            return bad("same_ratio must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.learning_rate = 6e-5;
        c.model.disable_mhsa = true;
        c.corpus_dir = "data/x".into();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn errors_and_comments() {
        assert!(RunConfig::from_text("nope = 1").is_err());
        assert!(RunConfig::from_text("d = x").is_err());
        assert!(RunConfig::from_text("learning_rate = 0").is_err());
        assert!(RunConfig::from_text("just text").is_err());
        let c = RunConfig::from_text("# hi\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn vocabulary_follows_bbox() {
        let c = RunConfig::from_text("lat_min = 22.0\nlat_max = 22.5").unwrap();
        assert_eq!(c.model.lat_cells, 50);
        assert!(RunConfig::from_text("lat_min = 22.0\nlat_max = 22.5\nlat_cells = 10").is_err());
    }
}
