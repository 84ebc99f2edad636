use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{OpKind, ParamStore, Result, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the per-parameter max relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so that gradients that are
    /// numerically zero are compared in absolute terms.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen entries per tensor.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
    /// Corrupt one backward rule while computing the analytic gradients.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-3,
            abs_floor: 1e-6,
            max_entries_per_param: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn evaluate<F>(f: &F, params: &ParamStore, fault: Option<OpKind>) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.inject_fault(fault);
    let vars = params.bind(&mut tape);
    let loss = f(&mut tape, &vars)?;
    Ok((tape, vars, loss))
}

fn scalar(tape: &Tape, loss: Var) -> Result<f64> {
    tape.value(loss)
        .item()
        .ok_or_else(|| super::TensorError::NonScalarLoss(tape.shape(loss).to_vec()))
}

/// Compare tape gradients of `f` against central finite differences.
///
/// `f` receives a fresh tape with every parameter of `params` bound as a
/// leaf (in store order) and must return a scalar loss.
pub fn grad_check<F>(f: F, params: &ParamStore, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, loss) = evaluate(&f, params, opts.fault)?;
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut report = Vec::with_capacity(params.len());

    for (id, &var) in params.ids().zip(&vars) {
        let analytic = grads.get(var).expect("every bound parameter has a gradient");
        let n = params.get(id).len();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &e in &entries {
            let original = params.get(id).data()[e];
            probe.get_mut(id).data_mut()[e] = original + opts.step;
            let (t, _, l) = evaluate(&f, &probe, None)?;
            let plus = scalar(&t, l)?;
            probe.get_mut(id).data_mut()[e] = original - opts.step;
            let (t, _, l) = evaluate(&f, &probe, None)?;
            let minus = scalar(&t, l)?;
            probe.get_mut(id).data_mut()[e] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.abs_floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        report.push(ParamCheck {
            name: params.name(id).to_string(),
            entries_checked: entries.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel < opts.tol,
        });
    }
    Ok(GradCheckReport {
        params: report,
        tol: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{init, Tensor};

    fn random_store(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in shapes {
            store.add(*name, init::uniform(&mut rng, shape, 1.0)).unwrap();
        }
        store
    }

    #[test]
    fn linear_function_is_exact() {
        let store = random_store(&[("w", &[3, 4]), ("x", &[4, 2])], 1);
        let report = grad_check(
            |tape, v| {
                let c = tape.constant(Tensor::full(&[3, 4], 0.5));
                let y = tape.mul(v[0], c)?;
                Ok(tape.sum(y))
            },
            &store,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error() < 1e-9, "{}", report.max_rel_error());
    }

    #[test]
    fn matmul_gradients_match_central_differences() {
        let store = random_store(&[("a", &[3, 4]), ("b", &[4, 2])], 2);
        let report = grad_check(
            |tape, v| {
                let c = tape.matmul(v[0], v[1])?;
                let t = tape.tanh(c);
                Ok(tape.sum(t))
            },
            &store,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn gelu_gradient_matches() {
        let store = random_store(&[("x", &[10])], 3);
        let report = grad_check(
            |tape, v| {
                let g = tape.gelu(v[0]);
                Ok(tape.sum(g))
            },
            &store,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-5, "{report:?}");
    }

    #[test]
    fn corrupted_tanh_backward_fails() {
        let store = random_store(&[("x", &[5])], 4);
        let opts = GradCheckOptions {
            fault: Some(OpKind::Tanh),
            ..Default::default()
        };
        let report = grad_check(
            |tape, v| {
                let t = tape.tanh(v[0]);
                Ok(tape.sum(t))
            },
            &store,
            &opts,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn sampling_limits_entries() {
        let store = random_store(&[("x", &[50])], 5);
        let opts = GradCheckOptions {
            max_entries_per_param: Some(7),
            ..Default::default()
        };
        let report = grad_check(
            |tape, v| {
                let s = tape.sigmoid(v[0]);
                Ok(tape.sum(s))
            },
            &store,
            &opts,
        )
        .unwrap();
        assert_eq!(report.params[0].entries_checked, 7);
        assert!(report.passed());
    }
}
