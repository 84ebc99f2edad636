//! Twin encoders, profile embedding and the dissimilarity head.

mod pairs;

pub use pairs::{make_pairs, write_manifest, PairError, PairSampler, PairSpec, PairStream, TripRef};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{AttentionProbe, EncoderParams, MaTcnConfig, ModelError, Result};
use crate::preprocess::{GridSequence, PROFILE_DIM};
use crate::tensor::{init, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

pub const PROFILE_HIDDEN: usize = 64;
pub const HEAD_HIDDEN: [usize; 2] = [128, 32];

/// One side of a pair: a trip of each kind and that driver's normalised
/// profile.
#[derive(Clone, Debug, PartialEq)]
pub struct DriverInput {
    pub seeking: GridSequence,
    pub serving: GridSequence,
    pub profile: [f64; PROFILE_DIM],
}

/// `label` is 0 for the same driver and 1 for different drivers.
#[derive(Clone, Debug, PartialEq)]
pub struct PairExample {
    pub a: DriverInput,
    pub b: DriverInput,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Same,
    Different,
}

/// Scores at or above `threshold` mean different drivers.
pub fn classify(score: f64, threshold: f64) -> Verdict {
    if score < threshold {
        Verdict::Same
    } else {
        Verdict::Different
    }
}

/// Cross entropy of a probability against `y ∈ {0, 1}`.
pub fn bce_loss(score: f64, y: u8) -> f64 {
    if y == 1 {
        -score.ln()
    } else {
        -(1.0 - score).ln()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
pub struct ProfileParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub layers: Vec<(ParamId, ParamId)>,
}

/// All learnable state: two encoders, the profile network and the head,
/// in one store so both sides of a pair read the same tensors.
#[derive(Clone, Debug)]
pub struct SiameseModel {
    pub config: MaTcnConfig,
    pub params: ParamStore,
    pub seeking: EncoderParams,
    pub serving: EncoderParams,
    pub profile: ProfileParams,
    pub head: HeadParams,
}

impl SiameseModel {
    pub fn new(config: &MaTcnConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let seeking = EncoderParams::register(&mut params, "seeking", config, &mut rng)?;
        let serving = EncoderParams::register(&mut params, "serving", config, &mut rng)?;
        let d = config.d;

        let mut linear = |name: &str, rows: usize, cols: usize| -> Result<(ParamId, ParamId)> {
            let w = params.add(format!("{name}.w"), init::glorot(&mut rng, &[rows, cols], cols, rows))?;
            let b = params.add(format!("{name}.b"), Tensor::zeros(&[rows]))?;
            Ok((w, b))
        };
        let (w1, b1) = linear("profile.fc1", PROFILE_HIDDEN, PROFILE_DIM)?;
        let (w2, b2) = linear("profile.fc2", d, PROFILE_HIDDEN)?;
        let widths = [6 * d, HEAD_HIDDEN[0], HEAD_HIDDEN[1], 1];
        let layers = (0..3)
            .map(|i| linear(&format!("head.fc{}", i + 1), widths[i + 1], widths[i]))
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            config: config.clone(),
            params,
            seeking,
            serving,
            profile: ProfileParams { w1, b1, w2, b2 },
            head: HeadParams { layers },
        })
    }

    /// Replace every parameter with a same-named, same-shaped tensor.
    pub fn load_tensors(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                named.len()
            )));
        }
        for (name, tensor) in named {
            let id = self
                .params
                .id(&name)
                .ok_or_else(|| ModelError::Config(format!("unknown parameter {name}")))?;
            if self.params.get(id).shape() != tensor.shape() {
                return Err(ModelError::Config(format!(
                    "shape of {name}: expected {:?}, found {:?}",
                    self.params.get(id).shape(),
                    tensor.shape()
                )));
            }
            *self.params.get_mut(id) = tensor;
        }
        Ok(())
    }

    /// Profile features `[12]` to an embedding `[d×1]`.
    pub fn profile_embed(&self, tape: &mut Tape, vars: &[Var], profile: &[f64; PROFILE_DIM]) -> Result<Var> {
        if profile.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("profile features".into()).into());
        }
        let v = |id: ParamId| vars[id.index()];
        let p = &self.profile;
        let x = tape.constant(Tensor::new(vec![PROFILE_DIM, 1], profile.to_vec())?);
        let h = tape.matmul(v(p.w1), x)?;
        let h = tape.add_col_bias(h, v(p.b1))?;
        let h = tape.gelu(h);
        let out = tape.matmul(v(p.w2), h)?;
        Ok(tape.add_col_bias(out, v(p.b2))?)
    }

    /// `[Tr_seeking, Tr_serving, d_emb]` for one driver, stacked to `[3d×1]`.
    pub fn encode_driver(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        input: &DriverInput,
        mut probe: Option<&mut AttentionProbe>,
    ) -> Result<Var> {
        let emb = self.profile_embed(tape, vars, &input.profile)?;
        let seeking = self
            .seeking
            .forward_trip(tape, vars, &input.seeking, emb, probe.as_deref_mut())?;
        let serving = self.serving.forward_trip(tape, vars, &input.serving, emb, probe)?;
        Ok(tape.concat_rows(&[seeking, serving, emb])?)
    }

    /// Pre-sigmoid dissimilarity for a pair, shape `[1×1]`.
    pub fn pair_logit(&self, tape: &mut Tape, vars: &[Var], a: &DriverInput, b: &DriverInput) -> Result<Var> {
        let ea = self.encode_driver(tape, vars, a, None)?;
        let eb = self.encode_driver(tape, vars, b, None)?;
        let mut x = tape.concat_rows(&[ea, eb])?;
        let last = self.head.layers.len() - 1;
        for (i, &(w, bias)) in self.head.layers.iter().enumerate() {
            x = tape.matmul(vars[w.index()], x)?;
            x = tape.add_col_bias(x, vars[bias.index()])?;
            if i < last {
                x = tape.gelu(x);
            }
        }
        Ok(x)
    }

    /// Dissimilarity probability in `(0, 1)`.
    pub fn score(&self, a: &DriverInput, b: &DriverInput) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let logit = self.pair_logit(&mut tape, &vars, a, b)?;
        Ok(sigmoid(tape.value(logit).data()[0]))
    }

    /// Loss and per-parameter gradients for one pair.
    pub fn loss_and_grads(&self, pair: &PairExample) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let logit = self.pair_logit(&mut tape, &vars, &pair.a, &pair.b)?;
        let loss = tape.bce_with_logits(logit, f64::from(pair.label))?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(TensorError::NonFinite("loss".into()).into());
        }
        let mut grads = tape.backward(loss)?;
        let out = vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, out))
    }
}
