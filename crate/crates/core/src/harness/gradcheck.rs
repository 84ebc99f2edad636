use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Result;
use crate::model::{EncoderParams, MaTcnConfig, ModelError};
use crate::preprocess::{GridCell, GridSequence};
use crate::siamese::{DriverInput, PairExample, SiameseModel};
use crate::tensor::{
    grad_check, init, GradCheckOptions, GradCheckReport, OpKind, ParamStore, Tape, Tensor, TensorError, Var,
};

type TResult<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub tol: f64,
    pub seed: u64,
    /// Corrupt this op's backward rule (mutation testing).
    pub fault: Option<OpKind>,
    /// Configuration for the sampled full-width checks.
    pub model: MaTcnConfig,
    /// Entries checked per tensor in the full-width checks.
    pub samples_per_param: usize,
    /// Skip the full-width checks.
    pub quick: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            seed: 0,
            fault: None,
            model: MaTcnConfig::default(),
            samples_per_param: 6,
            quick: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupResult {
    pub name: String,
    pub report: GradCheckReport,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckSuite {
    pub groups: Vec<GroupResult>,
}

impl GradCheckSuite {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.report.passed())
    }

    pub fn failures(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !g.report.passed())
            .map(|g| g.name.as_str())
            .collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.report.max_rel_error()).fold(0.0, f64::max)
    }

    /// One line per parameter group plus a verdict line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let entries: usize = g.report.params.iter().map(|p| p.entries_checked).sum();
            let _ = writeln!(
                out,
                "{:<32} {:>7} entries  max rel {:.3e}  {:>6.2}s  {}",
                g.name,
                entries,
                g.report.max_rel_error(),
                g.seconds,
                if g.report.passed() { "ok" } else { "FAIL" }
            );
            for p in g.report.params.iter().filter(|p| !p.passed) {
                let _ = writeln!(out, "    {} max rel {:.3e}", p.name, p.max_rel_error);
            }
        }
        let _ = writeln!(
            out,
            "{}: {} groups, max rel error {:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.groups.len(),
            self.max_rel_error()
        );
        out
    }
}

fn opts(suite: &SuiteOptions, sample: Option<usize>) -> GradCheckOptions {
    GradCheckOptions {
        tol: suite.tol,
        seed: suite.seed,
        fault: suite.fault,
        max_entries_per_param: sample,
        ..GradCheckOptions::default()
    }
}

fn store(inputs: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in inputs {
        s.add(name, t).expect("distinct names");
    }
    s
}

/// Check `f` through a fixed random weighting `sum(f(x) ⊙ R)`, so every
/// output entry contributes with a different weight.
fn weighted_check<F>(name: &str, params: ParamStore, f: F, suite: &SuiteOptions, sample: Option<usize>) -> Result<GroupResult>
where
    F: Fn(&mut Tape, &[Var]) -> TResult<Var>,
{
    let started = Instant::now();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let probe = f(&mut tape, &vars)?;
    let shape = tape.shape(probe).to_vec();
    let weights = init::uniform(&mut ChaCha8Rng::seed_from_u64(suite.seed ^ 0x5745_4947), &shape, 1.0);
    let loss = |tape: &mut Tape, vars: &[Var]| -> TResult<Var> {
        let y = f(tape, vars)?;
        let w = tape.constant(weights.clone());
        let p = tape.mul(y, w)?;
        Ok(tape.sum(p))
    };
    let report = grad_check(loss, &params, &opts(suite, sample))?;
    Ok(GroupResult {
        name: name.to_string(),
        report,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        ModelError::Config(s) => TensorError::Invalid(s),
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    init::uniform(rng, shape, 1.0)
}

/// Uniform values bounded away from zero, for kinked activations.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v += 0.2f64.copysign(*v));
    t
}

fn primitive_checks(suite: &SuiteOptions) -> Result<Vec<GroupResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(suite.seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<(&str, Tensor)>, f: &dyn Fn(&mut Tape, &[Var]) -> TResult<Var>| {
        weighted_check(&format!("primitive:{name}"), store(inputs), f, suite, None).map(|g| out.push(g))
    };

    run("matmul", vec![("a", random(r, &[3, 4])), ("b", random(r, &[4, 2]))], &|t, v| t.matmul(v[0], v[1]))?;
    run("transpose", vec![("x", random(r, &[3, 4]))], &|t, v| t.transpose(v[0]))?;
    run("add", vec![("a", random(r, &[3, 4])), ("b", random(r, &[3, 4]))], &|t, v| t.add(v[0], v[1]))?;
    run("sub", vec![("a", random(r, &[3, 4])), ("b", random(r, &[3, 4]))], &|t, v| t.sub(v[0], v[1]))?;
    run("mul", vec![("a", random(r, &[3, 4])), ("b", random(r, &[3, 4]))], &|t, v| t.mul(v[0], v[1]))?;
    run("scale", vec![("x", random(r, &[3, 4]))], &|t, v| Ok(t.scale(v[0], -0.7)))?;
    run("add_col_bias", vec![("x", random(r, &[3, 4])), ("b", random(r, &[3]))], &|t, v| {
        t.add_col_bias(v[0], v[1])
    })?;
    run("mul_rows", vec![("x", random(r, &[3, 4])), ("g", random(r, &[3]))], &|t, v| {
        t.mul_rows(v[0], v[1])
    })?;
    run("tanh", vec![("x", random(r, &[3, 4]))], &|t, v| Ok(t.tanh(v[0])))?;
    run("sigmoid", vec![("x", random(r, &[3, 4]))], &|t, v| Ok(t.sigmoid(v[0])))?;
    run("gelu", vec![("x", random(r, &[3, 4]))], &|t, v| Ok(t.gelu(v[0])))?;
    run("relu", vec![("x", off_zero(r, &[3, 4]))], &|t, v| Ok(t.relu(v[0])))?;
    run("masked_softmax", vec![("x", random(r, &[2, 5]))], &|t, v| {
        t.masked_softmax(v[0], &[true, true, false, true, false])
    })?;
    run(
        "depthwise_causal_conv1d",
        vec![("x", random(r, &[3, 9])), ("k", random(r, &[3, 3]))],
        &|t, v| t.depthwise_causal_conv1d(v[0], v[1], 2),
    )?;
    run(
        "pointwise_conv",
        vec![("x", random(r, &[3, 6])), ("w", random(r, &[4, 3])), ("b", random(r, &[4]))],
        &|t, v| t.pointwise_conv(v[0], v[1], v[2]),
    )?;
    run("gather_rows", vec![("table", random(r, &[5, 3]))], &|t, v| {
        t.gather_rows(v[0], &[0, 2, 2, 4])
    })?;
    run("concat_rows", vec![("a", random(r, &[2, 3])), ("b", random(r, &[1, 3]))], &|t, v| {
        t.concat_rows(&[v[0], v[1]])
    })?;
    run("concat_cols", vec![("a", random(r, &[2, 3])), ("b", random(r, &[2, 2]))], &|t, v| {
        t.concat_cols(&[v[0], v[1]])
    })?;
    run("slice_cols", vec![("x", random(r, &[3, 6]))], &|t, v| t.slice_cols(v[0], 2, 3))?;
    run("reshape", vec![("x", random(r, &[3, 4]))], &|t, v| t.reshape(v[0], &[2, 6]))?;
    run("sum", vec![("x", random(r, &[3, 4]))], &|t, v| Ok(t.sum(v[0])))?;
    run("bce_with_logits", vec![("pos", random(r, &[1])), ("neg", random(r, &[1]))], &|t, v| {
        let a = t.bce_with_logits(v[0], 1.0)?;
        let b = t.bce_with_logits(v[1], 0.0)?;
        t.add(a, b)
    })?;
    Ok(out)
}

/// Trajectory of `len` real steps padded to `padded`.
pub(crate) fn sample_sequence(rng: &mut ChaCha8Rng, cfg: &MaTcnConfig, len: usize, padded: usize) -> GridSequence {
    GridSequence::from_cells(
        (0..len)
            .map(|_| GridCell {
                g_lat: rng.random_range(0..cfg.lat_cells),
                g_lon: rng.random_range(0..cfg.lon_cells),
                interval: rng.random_range(1..=288),
                velocity: rng.random_range(0.0..30.0),
            })
            .collect(),
    )
    .padded_to(padded)
}

fn sample_pair(rng: &mut ChaCha8Rng, cfg: &MaTcnConfig, lens: [usize; 4], label: u8) -> PairExample {
    let mut side = |a: usize, b: usize| DriverInput {
        seeking: sample_sequence(rng, cfg, a, a + 2),
        serving: sample_sequence(rng, cfg, b, b + 1),
        profile: std::array::from_fn(|_| rng.random_range(-1.5..1.5)),
    };
    let a = side(lens[0], lens[1]);
    let b = side(lens[2], lens[3]);
    PairExample { a, b, label }
}

fn double_block_check(suite: &SuiteOptions, cfg: &MaTcnConfig, sample: Option<usize>, name: &str) -> Result<GroupResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(suite.seed ^ 0xB10C);
    let mut params = ParamStore::new();
    let enc = EncoderParams::register(&mut params, "enc", cfg, &mut rng)?;
    let len = 12;
    params.add("input", random(&mut rng, &[cfg.d, len]))?;
    let input = params.id("input").expect("just added");
    let mask: Vec<bool> = (0..len).map(|i| i < len - 3).collect();
    let block = enc.blocks.last().expect("at least one block").clone();
    weighted_check(
        name,
        params,
        |t, v| {
            let (out, _, _) = enc
                .double_block(t, v, &block, v[input.index()], &mask, None)
                .map_err(model_err)?;
            Ok(out)
        },
        suite,
        sample,
    )
}

fn siamese_check(suite: &SuiteOptions, cfg: &MaTcnConfig, sample: Option<usize>, name: &str) -> Result<GroupResult> {
    let started = Instant::now();
    let model = SiameseModel::new(cfg, suite.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(suite.seed ^ 0x5041_4952);
    let pair = sample_pair(&mut rng, cfg, [5, 4, 6, 3], 1);
    let loss = |t: &mut Tape, v: &[Var]| -> TResult<Var> {
        let logit = model.pair_logit(t, v, &pair.a, &pair.b).map_err(model_err)?;
        t.bce_with_logits(logit, f64::from(pair.label))
    };
    let report = grad_check(loss, &model.params, &opts(suite, sample))?;
    Ok(GroupResult {
        name: name.to_string(),
        report,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Width-8 configuration small enough to check every entry.
pub fn tiny_config() -> MaTcnConfig {
    MaTcnConfig {
        d: 8,
        n_heads: 2,
        n_blocks: 2,
        kernel_size: 3,
        dilation_base: 2,
        lat_cells: 6,
        lon_cells: 6,
        lat_dim: 2,
        lon_dim: 2,
        interval_dim: 2,
        velocity_dim: 2,
        reduction: 2,
        disable_mhsa: false,
        disable_aggregation: false,
    }
}

/// Every primitive, one double block and the end-to-end pair loss. All
/// entries are checked at a small width; the full-width model is checked on
/// a random subset of entries per tensor.
pub fn run_gradcheck(suite: &SuiteOptions) -> Result<GradCheckSuite> {
    let mut groups = primitive_checks(suite)?;
    let tiny = tiny_config();
    groups.push(double_block_check(suite, &tiny, None, "double_block:tiny")?);
    groups.push(siamese_check(suite, &tiny, None, "siamese_loss:tiny")?);
    if !suite.quick {
        let sample = Some(suite.samples_per_param);
        groups.push(double_block_check(suite, &suite.model, sample, "double_block:full")?);
        groups.push(siamese_check(suite, &suite.model, sample, "siamese_loss:full")?);
    }
    Ok(GradCheckSuite { groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let s = run_gradcheck(&SuiteOptions {
            quick: true,
            ..Default::default()
        })
        .unwrap();
        assert!(s.passed(), "{}", s.render());
    }

    #[test]
    fn sigmoid_fault_is_named() {
        let s = run_gradcheck(&SuiteOptions {
            quick: true,
            fault: Some(OpKind::Sigmoid),
            ..Default::default()
        })
        .unwrap();
        assert!(!s.passed());
        let failures = s.failures();
        assert!(failures.contains(&"primitive:sigmoid"), "{failures:?}");
        assert!(!failures.contains(&"primitive:tanh"));
        assert!(s.render().contains("FAIL"));
    }
}
