use rand::Rng;

use super::{MaTcnConfig, Result};
use crate::preprocess::GridSequence;
use crate::tensor::{init, ParamId, ParamStore, Tape, Tensor, Var};

const EMBED_STD: f64 = 0.1;
/// Velocities arrive in m/s; this keeps the projected input near unit scale.
pub const VELOCITY_SCALE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct MhsaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Debug)]
pub struct ConvParams {
    pub depthwise: ParamId,
    pub expand_w: ParamId,
    pub expand_b: ParamId,
    pub project_w: ParamId,
    pub project_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub level: usize,
    pub mhsa: Option<MhsaParams>,
    pub convs: [ConvParams; 2],
    /// Bilinear time-attention matrices, one per conv sub-block.
    pub time_attn: Option<[ParamId; 2]>,
}

#[derive(Clone, Debug)]
pub struct TargetParams {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

/// Parameter handles of one encoder inside a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: MaTcnConfig,
    pub lat_table: ParamId,
    pub lon_table: ParamId,
    pub interval_table: ParamId,
    pub velocity_w: ParamId,
    pub velocity_b: ParamId,
    pub stem_w: ParamId,
    pub stem_b: ParamId,
    pub squeeze_w: ParamId,
    pub squeeze_b: ParamId,
    pub excite_w: ParamId,
    pub excite_b: ParamId,
    pub blocks: Vec<BlockParams>,
    pub target: Option<TargetParams>,
}

/// Attention weights captured during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct AttentionProbe {
    /// One `[L×L]` map per head per block.
    pub head_weights: Vec<Var>,
    /// One `[1×L]` row per conv sub-block.
    pub time_weights: Vec<Var>,
    /// `[1×2N]` weights over sub-block summaries.
    pub scale_weights: Option<Var>,
}

fn glorot<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    init::glorot(rng, &[rows, cols], cols, rows)
}

impl EncoderParams {
    /// Create and initialise every parameter under `prefix.*`.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: &MaTcnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.d;
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t);

        let lat_table = add("embed.lat", init::normal(rng, &[c.lat_cells, c.lat_dim], EMBED_STD))?;
        let lon_table = add("embed.lon", init::normal(rng, &[c.lon_cells, c.lon_dim], EMBED_STD))?;
        let interval_table = add(
            "embed.interval",
            init::normal(rng, &[c.interval_vocab(), c.interval_dim], EMBED_STD),
        )?;
        let velocity_w = add("embed.velocity_w", glorot(rng, c.velocity_dim, 1))?;
        let velocity_b = add("embed.velocity_b", Tensor::zeros(&[c.velocity_dim]))?;
        let stem_w = add("stem.w", glorot(rng, d, c.input_dim()))?;
        let stem_b = add("stem.b", Tensor::zeros(&[d]))?;

        let hidden = d / c.reduction;
        let squeeze_w = add("channel_attn.squeeze_w", glorot(rng, hidden, d))?;
        let squeeze_b = add("channel_attn.squeeze_b", Tensor::zeros(&[hidden]))?;
        let excite_w = add("channel_attn.excite_w", glorot(rng, d, hidden))?;
        let excite_b = add("channel_attn.excite_b", Tensor::zeros(&[d]))?;

        let inner = c.n_heads * c.head_dim();
        let mut blocks = Vec::with_capacity(c.n_blocks);
        for level in 1..=c.n_blocks {
            let p = format!("block{level}");
            let mhsa = if c.disable_mhsa {
                None
            } else {
                Some(MhsaParams {
                    wq: add(&format!("{p}.mhsa.wq"), glorot(rng, d, inner))?,
                    wk: add(&format!("{p}.mhsa.wk"), glorot(rng, d, inner))?,
                    wv: add(&format!("{p}.mhsa.wv"), glorot(rng, d, inner))?,
                    wo: add(&format!("{p}.mhsa.wo"), glorot(rng, inner, d))?,
                })
            };
            let mut conv = |s: usize| -> Result<ConvParams> {
                let q = format!("{p}.conv{s}");
                Ok(ConvParams {
                    depthwise: add(
                        &format!("{q}.depthwise"),
                        init::uniform(rng, &[d, c.kernel_size], (1.0 / c.kernel_size as f64).sqrt()),
                    )?,
                    expand_w: add(&format!("{q}.expand_w"), glorot(rng, 2 * d, d))?,
                    expand_b: add(&format!("{q}.expand_b"), Tensor::zeros(&[2 * d]))?,
                    project_w: add(&format!("{q}.project_w"), glorot(rng, d, 2 * d))?,
                    project_b: add(&format!("{q}.project_b"), Tensor::zeros(&[d]))?,
                })
            };
            let convs = [conv(1)?, conv(2)?];
            let time_attn = if c.disable_aggregation {
                None
            } else {
                Some([
                    add(&format!("{p}.time_attn1"), glorot(rng, d, d))?,
                    add(&format!("{p}.time_attn2"), glorot(rng, d, d))?,
                ])
            };
            blocks.push(BlockParams {
                level,
                mhsa,
                convs,
                time_attn,
            });
        }

        let target = if c.disable_aggregation {
            None
        } else {
            Some(TargetParams {
                proj_w: add("target_attn.w", glorot(rng, d, d))?,
                proj_b: add("target_attn.b", Tensor::zeros(&[d]))?,
            })
        };

        Ok(Self {
            config: config.clone(),
            lat_table,
            lon_table,
            interval_table,
            velocity_w,
            velocity_b,
            stem_w,
            stem_b,
            squeeze_w,
            squeeze_b,
            excite_w,
            excite_b,
            blocks,
            target,
        })
    }

    /// Field embeddings concatenated and expanded to `[d×L]`.
    pub fn embed_inputs(&self, tape: &mut Tape, vars: &[Var], seq: &GridSequence) -> Result<Var> {
        let v = |id: ParamId| vars[id.index()];
        let len = seq.len();
        let lat_idx: Vec<usize> = seq.cells.iter().map(|c| c.g_lat).collect();
        let lon_idx: Vec<usize> = seq.cells.iter().map(|c| c.g_lon).collect();
        let int_idx: Vec<usize> = seq.cells.iter().map(|c| (c.interval as usize).saturating_sub(1)).collect();

        let lat = tape.gather_rows(v(self.lat_table), &lat_idx)?;
        let lat = tape.transpose(lat)?;
        let lon = tape.gather_rows(v(self.lon_table), &lon_idx)?;
        let lon = tape.transpose(lon)?;
        let interval = tape.gather_rows(v(self.interval_table), &int_idx)?;
        let interval = tape.transpose(interval)?;

        let speeds = seq.cells.iter().map(|c| c.velocity * VELOCITY_SCALE).collect();
        let speeds = tape.constant(Tensor::new(vec![1, len], speeds)?);
        let vel = tape.matmul(v(self.velocity_w), speeds)?;
        let vel = tape.add_col_bias(vel, v(self.velocity_b))?;

        let stacked = tape.concat_rows(&[lat, lon, interval, vel])?;
        Ok(tape.pointwise_conv(stacked, v(self.stem_w), v(self.stem_b))?)
    }

    /// Per-channel gating from a masked time average.
    pub fn channel_attention(&self, tape: &mut Tape, vars: &[Var], x: Var, mask: &[bool]) -> Result<Var> {
        let gate = self.channel_gate(tape, vars, x, mask)?;
        Ok(tape.mul_rows(x, gate)?)
    }

    /// The `[d]` gate used by [`channel_attention`](Self::channel_attention).
    pub fn channel_gate(&self, tape: &mut Tape, vars: &[Var], x: Var, mask: &[bool]) -> Result<Var> {
        let v = |id: ParamId| vars[id.index()];
        let weights = mean_weights(mask)?;
        let weights = tape.constant(weights);
        let squeezed = tape.matmul(x, weights)?;
        let hidden = tape.matmul(v(self.squeeze_w), squeezed)?;
        let hidden = tape.add_col_bias(hidden, v(self.squeeze_b))?;
        let hidden = tape.relu(hidden);
        let gate = tape.matmul(v(self.excite_w), hidden)?;
        let gate = tape.add_col_bias(gate, v(self.excite_b))?;
        let gate = tape.sigmoid(gate);
        Ok(tape.reshape(gate, &[self.config.d])?)
    }

    /// Multi-head self-attention with residual, on `x [d×L]`. Padded keys are
    /// excluded from every softmax row.
    pub fn mhsa_layer(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        params: &MhsaParams,
        x: Var,
        mask: &[bool],
        mut probe: Option<&mut AttentionProbe>,
    ) -> Result<Var> {
        let v = |id: ParamId| vars[id.index()];
        let dk = self.config.head_dim();
        let rows = tape.transpose(x)?;
        let q = tape.matmul(rows, v(params.wq))?;
        let k = tape.matmul(rows, v(params.wk))?;
        let val = tape.matmul(rows, v(params.wv))?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let vh = tape.slice_cols(val, h * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, scale);
            let weights = tape.masked_softmax(logits, mask)?;
            if let Some(p) = probe.as_deref_mut() {
                p.head_weights.push(weights);
            }
            heads.push(tape.matmul(weights, vh)?);
        }
        let joined = tape.concat_cols(&heads)?;
        let out = tape.matmul(joined, v(params.wo))?;
        let out = tape.add(out, rows)?;
        Ok(tape.transpose(out)?)
    }

    /// `x + PW₂(gelu(PW₁(gelu(DW(x)))))` with a causal dilated depthwise conv.
    pub fn conv_residual_block(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        params: &ConvParams,
        x: Var,
        dilation: usize,
    ) -> Result<Var> {
        let v = |id: ParamId| vars[id.index()];
        let y = tape.depthwise_causal_conv1d(x, v(params.depthwise), dilation)?;
        let y = tape.gelu(y);
        let y = tape.pointwise_conv(y, v(params.expand_w), v(params.expand_b))?;
        let y = tape.gelu(y);
        let y = tape.pointwise_conv(y, v(params.project_w), v(params.project_b))?;
        Ok(tape.add(x, y)?)
    }

    /// Attention layer followed by two equal-dilation conv sub-blocks.
    /// Returns `(output, first sub-block output, second sub-block output)`;
    /// the output is the second sub-block's.
    pub fn double_block(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        block: &BlockParams,
        x: Var,
        mask: &[bool],
        probe: Option<&mut AttentionProbe>,
    ) -> Result<(Var, Var, Var)> {
        let attended = match &block.mhsa {
            Some(p) => self.mhsa_layer(tape, vars, p, x, mask, probe)?,
            None => x,
        };
        let dilation = self.config.dilation(block.level);
        let h1 = self.conv_residual_block(tape, vars, &block.convs[0], attended, dilation)?;
        let h2 = self.conv_residual_block(tape, vars, &block.convs[1], h1, dilation)?;
        Ok((h2, h1, h2))
    }

    /// Attention-pool `h_seq [d×L]` over real steps against its last real
    /// step. Returns `(summary [d×1], weights [1×L])`.
    pub fn time_aggregate(
        &self,
        tape: &mut Tape,
        h_seq: Var,
        mask: &[bool],
        last: usize,
        bilinear: Var,
    ) -> Result<(Var, Var)> {
        let query = tape.slice_cols(h_seq, last, 1)?;
        let query = tape.matmul(bilinear, query)?;
        let steps = tape.transpose(h_seq)?;
        let logits = tape.matmul(steps, query)?;
        let len = mask.len();
        let logits = tape.reshape(logits, &[1, len])?;
        let weights = tape.masked_softmax(logits, mask)?;
        let column = tape.reshape(weights, &[len, 1])?;
        Ok((tape.matmul(h_seq, column)?, weights))
    }

    /// Profile-targeted attention over the `2N` summaries. Returns
    /// `(trip representation [d×1], weights [1×2N])`.
    pub fn target_attention(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        params: &TargetParams,
        summaries: &[Var],
        profile_emb: Var,
    ) -> Result<(Var, Var)> {
        let v = |id: ParamId| vars[id.index()];
        let stacked = tape.concat_cols(summaries)?;
        let keys = tape.matmul(v(params.proj_w), stacked)?;
        let keys = tape.add_col_bias(keys, v(params.proj_b))?;
        let keys = tape.tanh(keys);
        let target = tape.reshape(profile_emb, &[1, self.config.d])?;
        let logits = tape.matmul(target, keys)?;
        let weights = tape.masked_softmax(logits, &vec![true; summaries.len()])?;
        let column = tape.reshape(weights, &[summaries.len(), 1])?;
        Ok((tape.matmul(stacked, column)?, weights))
    }

    /// Full encoder. `profile_emb` must hold `d` values. Returns `[d×1]`.
    pub fn forward_trip(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        seq: &GridSequence,
        profile_emb: Var,
        mut probe: Option<&mut AttentionProbe>,
    ) -> Result<Var> {
        if seq.original_length == 0 {
            return Err(crate::tensor::TensorError::AllMasked { op: "forward_trip" }.into());
        }
        let mask = &seq.mask;
        let last = seq.original_length - 1;
        let x = self.embed_inputs(tape, vars, seq)?;
        let mut h = self.channel_attention(tape, vars, x, mask)?;

        let mut summaries = Vec::with_capacity(2 * self.blocks.len());
        for block in &self.blocks {
            let (out, h1, h2) = self.double_block(tape, vars, block, h, mask, probe.as_deref_mut())?;
            if let Some(ws) = block.time_attn {
                for (seq_out, w) in [(h1, ws[0]), (h2, ws[1])] {
                    let (summary, weights) = self.time_aggregate(tape, seq_out, mask, last, vars[w.index()])?;
                    if let Some(p) = probe.as_deref_mut() {
                        p.time_weights.push(weights);
                    }
                    summaries.push(summary);
                }
            }
            h = out;
        }

        match &self.target {
            Some(t) => {
                let (rep, weights) = self.target_attention(tape, vars, t, &summaries, profile_emb)?;
                if let Some(p) = probe {
                    p.scale_weights = Some(weights);
                }
                Ok(rep)
            }
            None => Ok(tape.slice_cols(h, last, 1)?),
        }
    }
}

/// `[L×1]` column of `1/m` on real steps and exact zeros on padding.
fn mean_weights(mask: &[bool]) -> Result<Tensor> {
    let m = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return Err(crate::tensor::TensorError::AllMasked { op: "channel_attention" }.into());
    }
    let w = mask.iter().map(|&b| if b { 1.0 / m as f64 } else { 0.0 }).collect();
    Ok(Tensor::new(vec![mask.len(), 1], w)?)
}
