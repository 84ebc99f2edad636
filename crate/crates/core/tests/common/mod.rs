#![allow(dead_code)]

use matcn::model::MaTcnConfig;
use matcn::preprocess::{run_pipeline, GridCell, GridSequence, PreprocessConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 2016-07-01 00:00:00 UTC.
pub const DAY0: i64 = 1_467_331_200;

/// Small model used by the structural tests.
pub fn small_config(d: usize, heads: usize, blocks: usize, kernel: usize, base: usize) -> MaTcnConfig {
    MaTcnConfig {
        d,
        n_heads: heads,
        n_blocks: blocks,
        kernel_size: kernel,
        dilation_base: base,
        lat_cells: 12,
        lon_cells: 12,
        lat_dim: 3,
        lon_dim: 3,
        interval_dim: 3,
        velocity_dim: 2,
        reduction: 2,
        disable_mhsa: false,
        disable_aggregation: false,
    }
}

pub fn random_sequence(rng: &mut ChaCha8Rng, cfg: &MaTcnConfig, len: usize) -> GridSequence {
    GridSequence::from_cells(
        (0..len)
            .map(|_| GridCell {
                g_lat: rng.random_range(0..cfg.lat_cells),
                g_lon: rng.random_range(0..cfg.lon_cells),
                interval: rng.random_range(1..=288),
                velocity: rng.random_range(0.0..25.0),
            })
            .collect(),
    )
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Raw CSV rows `(driver, timestamp, lat, lon, status)` exercising the
/// filtering rules:
///
/// driver A, one day: seeking 12 (starts 00:00:00), serving 300, seeking 9,
/// then four (serving 12, seeking 12) pairs, and a final serving 12 that
/// ends at 23:59:59. One extra row lies outside the area.
///
/// driver B, same day: 5 seeking and 4 serving trips of 12 points.
pub fn conformance_csv() -> String {
    let mut rows = vec!["driver_id,timestamp,lat,lon,status".to_string()];
    let mut push = |d: &str, t: i64, lat: f64, lon: f64, s: u8| rows.push(format!("{d},{t},{lat},{lon},{s}"));

    let mut t = DAY0;
    let trip = |push: &mut dyn FnMut(&str, i64, f64, f64, u8), d: &str, t: &mut i64, n: usize, s: u8| {
        for i in 0..n {
            push(d, *t, 22.5, 114.0 + 0.001 * i as f64, s);
            *t += 40;
        }
    };

    // first seeking trip: hand-placed grid points
    push("A", t, 22.45, 113.75, 0);
    push("A", t + 40, 22.4599, 113.7699, 0);
    push("A", t + 80, 22.44, 114.65, 0);
    t += 120;
    for i in 3..12 {
        push("A", t, 22.5, 114.0 + 0.001 * i as f64, 0);
        t += 40;
    }
    push("A", t - 20, 30.0, 114.0, 1); // outside the area
    trip(&mut push, "A", &mut t, 300, 1);
    trip(&mut push, "A", &mut t, 9, 0);
    for _ in 0..4 {
        trip(&mut push, "A", &mut t, 12, 1);
        trip(&mut push, "A", &mut t, 12, 0);
    }
    let mut t_end = DAY0 + 86_399 - 11 * 40;
    trip(&mut push, "A", &mut t_end, 12, 1);

    let mut t = DAY0 + 3600;
    for k in 0..9 {
        trip(&mut push, "B", &mut t, 12, if k % 2 == 0 { 0 } else { 1 });
    }
    rows.join("\n") + "\n"
}

/// Hand-computed expectations for [`conformance_csv`]. Returns the first
/// mismatch.
pub fn check_conformance() -> Result<(), String> {
    let csv = conformance_csv();
    let (corpus, stats) = run_pipeline(csv.as_bytes(), &PreprocessConfig::default()).map_err(|e| e.to_string())?;
    let expect = |what: &str, got: usize, want: usize| {
        if got == want {
            Ok(())
        } else {
            Err(format!("{what}: got {got}, expected {want}"))
        }
    };
    expect("out-of-area rows", stats.out_of_area_rows, 1)?;
    expect("segmented", stats.trajectories_segmented, 21)?;
    expect("dropped by length", stats.dropped_by_length, 1)?;
    expect("dropped by driver-day", stats.dropped_by_driver_day, 9)?;
    expect("retained", stats.trajectories_retained, 11)?;
    expect("drivers", corpus.drivers.len(), 1)?;
    let a = &corpus.drivers[0];
    if a.id != "A" || a.days.len() != 1 || a.days[0].day.to_string() != "2016-07-01" {
        return Err(format!("unexpected driver-days for {}", a.id));
    }
    let day = &a.days[0];
    let lens = |v: &[GridSequence]| v.iter().map(|s| s.original_length).collect::<Vec<_>>();
    if lens(&day.seeking) != vec![12; 5] {
        return Err(format!("seeking lengths {:?}", lens(&day.seeking)));
    }
    if lens(&day.serving) != vec![300, 12, 12, 12, 12, 12] {
        return Err(format!("serving lengths {:?}", lens(&day.serving)));
    }

    let first = &day.seeking[0].cells;
    let cells: Vec<(usize, usize)> = first[..3].iter().map(|c| (c.g_lat, c.g_lon)).collect();
    if cells != vec![(1, 0), (1, 1), (0, 89)] {
        return Err(format!("grid cells {cells:?}"));
    }
    if first[0].interval != 1 {
        return Err(format!("00:00:00 mapped to interval {}", first[0].interval));
    }
    let last = day.serving[5].cells.last().unwrap();
    if last.interval != 288 {
        return Err(format!("23:59:59 mapped to interval {}", last.interval));
    }
    // reference haversine speeds, R = 6371 km
    let close = |got: f64, want: f64| (got - want).abs() <= 1e-9 * want;
    if !close(first[0].velocity, 58.061807149247784) {
        return Err(format!("first velocity {}", first[0].velocity));
    }
    let steady = &day.seeking[1].cells;
    if !close(steady[0].velocity, 2.568267921157533) || steady[11].velocity != steady[10].velocity {
        return Err(format!("steady velocities {} {}", steady[0].velocity, steady[11].velocity));
    }
    Ok(())
}

use matcn::model::{AttentionProbe, EncoderParams};
use matcn::tensor::{init, ParamStore, Tape, Tensor, Var};

pub struct Encoder {
    pub store: ParamStore,
    pub enc: EncoderParams,
}

impl Encoder {
    pub fn new(cfg: &MaTcnConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let enc = EncoderParams::register(&mut store, "enc", cfg, &mut rng(seed)).unwrap();
        Self { store, enc }
    }

    /// Trip representation for `seq` with a fixed profile embedding.
    pub fn trip(&self, seq: &GridSequence, profile: &Tensor, probe: Option<&mut AttentionProbe>) -> (Tape, Var) {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let emb = tape.constant(profile.clone());
        let out = self.enc.forward_trip(&mut tape, &vars, seq, emb, probe).unwrap();
        (tape, out)
    }

    /// Output of every conv sub-block in order, MHSA skipped.
    pub fn conv_path(&self, x: &Tensor) -> Vec<Tensor> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let mut h = tape.constant(x.clone());
        let mut outs = Vec::new();
        for block in &self.enc.blocks {
            let dilation = self.enc.config.dilation(block.level);
            for conv in &block.convs {
                h = self.enc.conv_residual_block(&mut tape, &vars, conv, h, dilation).unwrap();
                outs.push(tape.value(h).clone());
            }
        }
        outs
    }
}

fn column_bits(t: &Tensor, col: usize) -> Vec<u64> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    (0..rows).map(|r| t.data()[r * cols + col].to_bits()).collect()
}

/// Random configuration and input; perturb one step and require every conv
/// sub-block output to be bit-identical before it and changed at it.
pub fn check_causality(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let cfg = small_config(
        [4, 8][r.random_range(0..2)],
        2,
        r.random_range(1..=3),
        r.random_range(2..=5),
        r.random_range(1..=3),
    );
    let enc = Encoder::new(&cfg, seed);
    let len = r.random_range(6..=40);
    let x = init::uniform(&mut r, &[cfg.d, len], 1.0);
    let t = r.random_range(0..len);
    let mut y = x.clone();
    for row in 0..cfg.d {
        y.data_mut()[row * len + t] += r.random_range(0.5..2.0);
    }
    let base = enc.conv_path(&x);
    let perturbed = enc.conv_path(&y);
    for (k, (a, b)) in base.iter().zip(&perturbed).enumerate() {
        for col in 0..t {
            if column_bits(a, col) != column_bits(b, col) {
                return Err(format!("seed {seed}: sub-block {k} step {col} changed by input step {t} ({cfg:?})"));
            }
        }
        if column_bits(a, t) == column_bits(b, t) {
            return Err(format!("seed {seed}: sub-block {k} ignores its own step {t}"));
        }
    }
    Ok(())
}

/// Random trajectory encoded at three padded lengths; all outputs must
/// agree bit for bit.
pub fn check_mask_transparency(seed: u64) -> Result<(), String> {
    let mut r = rng(seed ^ 0x4d41_534b);
    let cfg = small_config(8, [1, 2, 4][r.random_range(0..3)], r.random_range(1..=3), r.random_range(2..=4), 2);
    let enc = Encoder::new(&cfg, seed);
    let len = r.random_range(1..=40);
    let seq = random_sequence(&mut r, &cfg, len);
    let profile = init::uniform(&mut r, &[cfg.d, 1], 1.0);
    let bits = |s: &GridSequence| {
        let (tape, out) = enc.trip(s, &profile, None);
        tape.value(out).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    let reference = bits(&seq);
    for extra in [r.random_range(1..=5), r.random_range(6..=60)] {
        if bits(&seq.padded_to(len + extra)) != reference {
            return Err(format!("seed {seed}: length {len} padded by {extra} changed the representation"));
        }
    }
    Ok(())
}

fn check_weights(what: &str, w: &Tensor, mask: &[bool], tol: f64) -> Result<(), String> {
    let cols = mask.len();
    for (r, row) in w.data().chunks(cols).enumerate() {
        let mut sum = 0.0;
        for (c, (&v, &real)) in row.iter().zip(mask).enumerate() {
            if !real && v != 0.0 {
                return Err(format!("{what} row {r}: masked position {c} has weight {v}"));
            }
            if v < 0.0 {
                return Err(format!("{what} row {r}: negative weight {v}"));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > tol {
            return Err(format!("{what} row {r} sums to {sum}"));
        }
    }
    Ok(())
}

/// Head, time and scale attention weights on a padded trajectory.
pub fn check_attention_normalization(seed: u64, tol: f64) -> Result<(), String> {
    let mut r = rng(seed ^ 0x4e4f_524d);
    let cfg = small_config(8, 2, r.random_range(1..=3), 3, 2);
    let enc = Encoder::new(&cfg, seed);
    let len = r.random_range(1..=30);
    let seq = random_sequence(&mut r, &cfg, len).padded_to(len + r.random_range(0..=10));
    let profile = init::uniform(&mut r, &[cfg.d, 1], 1.0);
    let mut probe = AttentionProbe::default();
    let (tape, _) = enc.trip(&seq, &profile, Some(&mut probe));
    if probe.head_weights.len() != cfg.n_heads * cfg.n_blocks || probe.time_weights.len() != 2 * cfg.n_blocks {
        return Err("probe did not capture every attention map".into());
    }
    for &w in &probe.head_weights {
        check_weights("head", tape.value(w), &seq.mask, tol)?;
    }
    for &w in &probe.time_weights {
        check_weights("time", tape.value(w), &seq.mask, tol)?;
    }
    let scale = probe.scale_weights.ok_or("no scale weights")?;
    check_weights("scale", tape.value(scale), &vec![true; 2 * cfg.n_blocks], tol)
}
