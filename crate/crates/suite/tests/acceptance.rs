//! Every acceptance criterion, run in sequence so that wall-clock limits are
//! measured without other tests competing for the CPU. Prints one
//! `PASS`/`FAIL` line per criterion and fails if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::time::{Duration, Instant};

use matcn::harness::{
    evaluate, load_checkpoint, overfit, run_gradcheck, save_checkpoint, split_corpus, synthetic_run, RunConfig,
    SuiteOptions,
};
use matcn::model::{receptive_field, MaTcnConfig};
use matcn::preprocess::{run_pipeline, PreprocessConfig, ProfileNormalizer};
use matcn::siamese::{make_pairs, PairSampler, SiameseModel};
use matcn::synth::{gen_corpus, SynthSpec};
use rand::Rng;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn record(out: &mut Vec<Outcome>, name: &'static str, pass: bool, detail: String) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { name, pass, detail });
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

const SEEDS: [u64; 3] = [0, 1, 2];

/// Training settings for the synthetic benchmarks.
fn bench_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("d", "32"),
        ("n_heads", "4"),
        ("learning_rate", "0.001"),
        ("max_epochs", "30"),
        ("patience", "6"),
        ("train_pairs", "256"),
        ("eval_pairs", "200"),
        ("batch_size", "16"),
    ] {
        c.set(k, v).unwrap();
    }
    c.seed = seed;
    c
}

fn bench_spec(separability: f64, seed: u64) -> SynthSpec {
    SynthSpec {
        n_drivers: 20,
        days: 5,
        trips_per_day: 5,
        separability,
        seed,
        ..SynthSpec::default()
    }
}

fn gradient_integrity(out: &mut Vec<Outcome>) {
    let started = Instant::now();
    let suite = run_gradcheck(&SuiteOptions::default()).expect("gradcheck runs");
    let secs = started.elapsed().as_secs_f64();
    print!("{}", suite.render());
    let pass = suite.passed() && suite.max_rel_error() < 1e-3 && secs < 300.0;
    record(
        out,
        "gradient integrity",
        pass,
        format!(
            "{} groups, max rel error {:.2e} (< 1e-3), {secs:.1}s (< 300s)",
            suite.groups.len(),
            suite.max_rel_error()
        ),
    );
}

fn rfs_arithmetic(out: &mut Vec<Outcome>) {
    let exact = receptive_field(4, 10, 2);
    let mut r = common::rng(271);
    let mut violations = 0;
    for _ in 0..100 {
        let (n, k, b) = (r.random_range(1..=8u64), r.random_range(1..=16u64), r.random_range(1..=5u64));
        let base = receptive_field(n, k, b);
        if receptive_field(n + 1, k, b) < base || receptive_field(n, k + 1, b) < base || receptive_field(n, k, b + 1) < base
        {
            violations += 1;
        }
    }
    record(
        out,
        "RFS arithmetic",
        exact == 271 && violations == 0,
        format!("receptive_field(4,10,2) = {exact}, {violations} monotonicity violations over 100 triples"),
    );
}

fn seeded_property(out: &mut Vec<Outcome>, name: &'static str, count: u64, check: impl Fn(u64) -> Result<(), String>) {
    let failures: Vec<String> = (0..count).filter_map(|s| check(s).err()).collect();
    let detail = match failures.first() {
        None => format!("{count}/{count} cases"),
        Some(first) => format!("{} of {count} cases failed; first: {first}", failures.len()),
    };
    record(out, name, failures.is_empty(), detail);
}

fn overfit_smoke(out: &mut Vec<Outcome>) {
    let spec = SynthSpec {
        n_drivers: 4,
        days: 2,
        seed: 8,
        ..SynthSpec::default()
    };
    let mut raw = Vec::new();
    gen_corpus(&spec, &mut raw).unwrap();
    let (corpus, _) = run_pipeline(raw.as_slice(), &PreprocessConfig::default()).unwrap();
    let sampler = PairSampler {
        n_pairs: 8,
        same_ratio: 0.5,
        balanced: true,
        seed: 8,
    };
    let profiles: Vec<_> = corpus.drivers.iter().flat_map(|d| &d.days).map(|d| d.profile).collect();
    let normalizer = ProfileNormalizer::fit(&profiles).unwrap();
    let pairs: Vec<_> = make_pairs(&corpus, &sampler)
        .unwrap()
        .pairs
        .iter()
        .map(|p| p.materialize(&corpus, &normalizer).unwrap())
        .collect();
    let mut model = SiameseModel::new(&MaTcnConfig::default(), 8).unwrap();
    let started = Instant::now();
    let report = overfit(&mut model, &pairs, 1e-3, 500, 0.05).unwrap();
    let secs = started.elapsed().as_secs_f64();
    record(
        out,
        "overfit smoke test",
        report.reached && secs < 120.0,
        format!(
            "loss {:.4} -> {:.4} after {} steps (< 0.05 within 500), {secs:.1}s (< 120s)",
            report.losses[0],
            report.losses.last().unwrap(),
            report.steps
        ),
    );
}

fn separability_and_checkpoint(out: &mut Vec<Outcome>) {
    let started = Instant::now();
    let mut separated = Vec::new();
    let mut control = Vec::new();
    let mut checkpoint_detail = None;
    for seed in SEEDS {
        for (sigma, accs) in [(1.0, &mut separated), (0.0, &mut control)] {
            let config = bench_config(seed);
            let run = synthetic_run(&bench_spec(sigma, seed), &config).unwrap();
            println!(
                "  sigma {sigma} seed {seed}: test accuracy {:.3} (best epoch {}, {:.0}s)",
                run.test.accuracy, run.outcome.best_epoch, run.seconds
            );
            accs.push(run.test.accuracy);
            if checkpoint_detail.is_none() {
                checkpoint_detail = Some(checkpoint_round_trip(&run, &config));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let (s1, s0) = (mean(&separated), mean(&control));
    let pass = s1 >= 0.90 && s1 - s0 >= 0.55 && (0.4..=0.6).contains(&s0) && secs < 1800.0;
    record(
        out,
        "synthetic separability",
        pass,
        format!(
            "sigma=1 mean {s1:.3} (>= 0.90), control mean {s0:.3} (in [0.4, 0.6]), gap {:.3} (>= 0.55), {secs:.0}s (< 1800s); per seed {separated:?} vs {control:?}",
            s1 - s0
        ),
    );
    let (pass, detail) = checkpoint_detail.unwrap();
    record(out, "checkpoint round-trip", pass, detail);
}

fn checkpoint_round_trip(run: &matcn::harness::SyntheticRun, config: &RunConfig) -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, config, &run.outcome.model, &run.outcome.normalizer).unwrap();
    let (loaded_config, model, normalizer) = load_checkpoint(&path).unwrap();
    let split = split_corpus(&run.corpus, config.test_fraction, config.val_days, config.seed);
    let (before, s_before, _) = evaluate(&run.outcome.model, &run.outcome.normalizer, &split.test, config, 77).unwrap();
    let (after, s_after, _) = evaluate(&model, &normalizer, &split.test, &loaded_config, 77).unwrap();
    let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same = before == after && bits(&s_before) == bits(&s_after) && before.to_json() == after.to_json();
    (
        same,
        format!(
            "{} pair scores and metrics (accuracy {}) {} after save/load",
            s_before.len(),
            before.accuracy,
            if same { "bit-identical" } else { "differ" }
        ),
    )
}

fn ablation_direction(out: &mut Vec<Outcome>) {
    let mut acc = [Vec::new(), Vec::new(), Vec::new()];
    for seed in SEEDS {
        for (i, (mhsa, agg)) in [(false, false), (true, false), (false, true)].into_iter().enumerate() {
            let mut config = bench_config(seed);
            config.model.disable_mhsa = mhsa;
            config.model.disable_aggregation = agg;
            let run = synthetic_run(&bench_spec(0.5, seed), &config).unwrap();
            println!(
                "  sigma 0.5 seed {seed} disable_mhsa={mhsa} disable_aggregation={agg}: test accuracy {:.3}",
                run.test.accuracy
            );
            acc[i].push(run.test.accuracy);
        }
    }
    let [full, no_mhsa, no_agg] = acc.map(|v| mean(&v));
    record(
        out,
        "ablation direction",
        no_mhsa < full && no_agg < full,
        format!("mean accuracy full {full:.3}, without MHSA {no_mhsa:.3}, without aggregation {no_agg:.3} (both must be lower than full)"),
    );
}

#[test]
fn acceptance() {
    let started = Instant::now();
    let mut out = Vec::new();
    gradient_integrity(&mut out);
    rfs_arithmetic(&mut out);
    seeded_property(&mut out, "causality", 20, common::check_causality);
    seeded_property(&mut out, "mask transparency", 50, common::check_mask_transparency);
    seeded_property(&mut out, "attention normalization", 50, |s| {
        common::check_attention_normalization(s, 1e-9)
    });
    overfit_smoke(&mut out);
    separability_and_checkpoint(&mut out);
    ablation_direction(&mut out);
    let conformance = common::check_conformance();
    record(
        &mut out,
        "preprocessing conformance",
        conformance.is_ok(),
        conformance.err().unwrap_or_else(|| "fixture matches hand-computed expectations".into()),
    );

    let failed: Vec<&str> = out.iter().filter(|o| !o.pass).map(|o| o.name).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0?}",
        out.len() - failed.len(),
        out.len(),
        Duration::from_secs(started.elapsed().as_secs())
    );
    for o in out.iter().filter(|o| !o.pass) {
        println!("  failed {}: {}", o.name, o.detail);
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
