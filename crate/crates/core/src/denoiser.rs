//! The x₀-predicting denoiser: prompt and timestep embedders, the
//! dilated-mask-attention (DMA) keyframe encoder, and a transformer decoder
//! with self-attention, cross-attention to the keyframe memory, and
//! feed-forward blocks.
//!
//! Matrices are token-major: one row per token, `d` columns.

use serde::{Deserialize, Serialize};

use crate::autograd::{masked_softmax_rows, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::motion_data::KeyframeMask;
use crate::nn::{position_table, sinusoidal, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::rng;
use crate::scalar::Scalar;

/// Dilation steps of the first seven DMA blocks; the eighth block always
/// uses the sequence length.
pub const DEFAULT_DILATION_PREFIX: [usize; 7] = [2, 2, 4, 4, 6, 6, 8];

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub ff_width: usize,
    pub vocab_size: usize,
    pub max_frames: usize,
    /// Per-block dilation step sizes before the final full-reach block.
    pub dilation_prefix: Vec<usize>,
    pub init_seed: u64,
}

impl DenoiserConfig {
    /// Desk-scale profile: `d = 64`, 4 decoder layers, 4 heads, FFN 128.
    pub fn desk(feature_dim: usize, vocab_size: usize, max_frames: usize) -> Self {
        Self {
            feature_dim,
            latent_dim: 64,
            heads: 4,
            decoder_layers: 4,
            ff_width: 128,
            vocab_size,
            max_frames,
            dilation_prefix: DEFAULT_DILATION_PREFIX.to_vec(),
            init_seed: 0,
        }
    }

    /// Full-size profile: `d = 512`, 8 decoder layers, 8 heads, FFN 1024.
    pub fn paper_scale(feature_dim: usize, vocab_size: usize, max_frames: usize) -> Self {
        Self {
            latent_dim: 512,
            heads: 8,
            decoder_layers: 8,
            ff_width: 1024,
            ..Self::desk(feature_dim, vocab_size, max_frames)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("latent_dim", self.latent_dim),
            ("heads", self.heads),
            ("ff_width", self.ff_width),
            ("vocab_size", self.vocab_size),
            ("max_frames", self.max_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.latent_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "latent_dim {} is not divisible by {} heads",
                self.latent_dim, self.heads
            )));
        }
        if self.latent_dim % 2 != 0 {
            return Err(Error::Config("latent_dim must be even for sinusoidal embeddings".into()));
        }
        if self.dilation_prefix.iter().any(|&k| k == 0) {
            return Err(Error::Config("dilation steps must be positive".into()));
        }
        Ok(())
    }

    /// Step sizes for an `n`-frame sequence: the prefix followed by `n`.
    pub fn dilation_schedule(&self, n: usize) -> Vec<usize> {
        dilation_schedule(&self.dilation_prefix, n)
    }
}

pub fn dilation_schedule(prefix: &[usize], n: usize) -> Vec<usize> {
    let mut s = prefix.to_vec();
    s.push(n.max(1));
    s
}

/// Validity and padding flags of a token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenValidity {
    pub valid: Vec<bool>,
    pub padding: Vec<bool>,
}

impl TokenValidity {
    /// Padding entries are forced invalid.
    pub fn new(mut valid: Vec<bool>, padding: Vec<bool>) -> Result<Self> {
        if valid.len() != padding.len() {
            return Err(Error::Shape("validity and padding lengths differ".into()));
        }
        for (v, &p) in valid.iter_mut().zip(&padding) {
            *v &= !p;
        }
        Ok(Self { valid, padding })
    }

    pub fn unpadded(valid: Vec<bool>) -> Self {
        let n = valid.len();
        Self {
            valid,
            padding: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn count_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Whether every non-padding token is valid.
    pub fn is_complete(&self) -> bool {
        self.valid.iter().zip(&self.padding).all(|(&v, &p)| v || p)
    }
}

/// Activates every non-padding token within temporal distance `k` of a valid
/// token. Valid tokens stay valid; padding never activates.
pub fn dilate_validity(v: &TokenValidity, k: usize) -> TokenValidity {
    let n = v.len();
    let mut out = v.valid.clone();
    // Distance to the nearest valid token, swept from both sides.
    let mut last: Option<usize> = None;
    let mut left = vec![usize::MAX; n];
    for i in 0..n {
        if v.valid[i] {
            last = Some(i);
        }
        if let Some(j) = last {
            left[i] = i - j;
        }
    }
    last = None;
    for i in (0..n).rev() {
        if v.valid[i] {
            last = Some(i);
        }
        let right = last.map_or(usize::MAX, |j| j - i);
        if !v.padding[i] && left[i].min(right) <= k {
            out[i] = true;
        }
    }
    TokenValidity {
        valid: out,
        padding: v.padding.clone(),
    }
}

/// Result of [`masked_attention`].
#[derive(Clone, Debug)]
pub struct AttentionOutput<T> {
    /// `L_q × d_v`
    pub output: Matrix<T>,
    /// `L_q × L_k` softmax weights; rows outside the query scope are zero.
    pub weights: Matrix<T>,
}

/// Scaled dot-product attention restricted to valid keys.
///
/// Invalid keys get an additive `-1e9` before the softmax. Queries outside
/// `query_scope` produce zero output.
pub fn masked_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    key_valid: &[bool],
    query_scope: Option<&[bool]>,
) -> Result<AttentionOutput<T>> {
    if q.cols() != k.cols() || k.rows() != v.rows() || key_valid.len() != k.rows() {
        return Err(Error::Shape("attention operand shapes are inconsistent".into()));
    }
    if !key_valid.iter().any(|&x| x) {
        return Err(Error::Precondition("masked attention needs at least one valid token".into()));
    }
    let scale = T::one() / T::lit(q.cols() as f64).sqrt();
    let logits = q.matmul_t(k).scale(scale);
    let mut weights = masked_softmax_rows(&logits, Some(key_valid));
    if let Some(scope) = query_scope {
        for (i, &in_scope) in scope.iter().enumerate() {
            if !in_scope {
                weights.row_mut(i).iter_mut().for_each(|w| *w = T::zero());
            }
        }
    }
    let output = weights.matmul(v);
    Ok(AttentionOutput { output, weights })
}

/// Self-attention of a token matrix with identity projections.
pub fn masked_self_attention<T: Scalar>(
    z: &Matrix<T>,
    validity: &TokenValidity,
) -> Result<AttentionOutput<T>> {
    masked_attention(z, z, z, &validity.valid, None)
}

/// How the keyframe branch is conditioned for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum KeyframeCondition<'a, T> {
    /// Null condition: the encoder is bypassed and the learned null
    /// embedding is broadcast over all frames.
    Dropped,
    /// `values` is the `N × D` keyframe matrix `X ⊙ M`.
    Keyframes {
        values: &'a Matrix<T>,
        mask: &'a KeyframeMask,
    },
}

impl<T> KeyframeCondition<'_, T> {
    pub fn is_dropped(&self) -> bool {
        matches!(self, KeyframeCondition::Dropped)
    }
}

#[derive(Clone, Debug)]
struct DmaBlock {
    attention: MultiHeadAttention,
    fuse: Linear,
    mlp: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attention: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attention: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct Layers {
    token_table: ParamId,
    prompt_proj: Linear,
    time_in: Linear,
    time_out: Linear,
    null_keyframe: ParamId,
    placeholder: ParamId,
    keyframe_in: Linear,
    dma: Vec<DmaBlock>,
    frame_in: Linear,
    decoder: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    frame_out: Linear,
}

/// Keyframe encoder output.
#[derive(Clone, Debug)]
pub struct KeyframeEncoding<T> {
    /// `N × d` memory, one token per frame.
    pub memory: Matrix<T>,
    /// Frame validity after each DMA block (empty when dropped).
    pub validity_trace: Vec<TokenValidity>,
}

/// Parameters and structure of the denoising network.
#[derive(Clone, Debug)]
pub struct DenoiserModel<T> {
    config: DenoiserConfig,
    params: ParamStore<T>,
    layers: Layers,
}

/// Name prefix of every denoiser parameter in checkpoints.
pub const PARAM_PREFIX: &str = "denoiser/";

impl<T: Scalar> DenoiserModel<T> {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(config.init_seed, 0x64656e6f);
        let d = config.latent_dim;
        let ff = config.ff_width;
        let p = |s: &str| format!("{PARAM_PREFIX}{s}");
        let embed_bound = 1.0;
        let token_table = store.add(
            p("prompt/token_table"),
            rng::uniform(&mut r, config.vocab_size, d, embed_bound),
        );
        let prompt_proj = Linear::new(&mut store, &p("prompt/proj"), d, d, true, &mut r);
        let time_in = Linear::new(&mut store, &p("time/in"), d, d, true, &mut r);
        let time_out = Linear::new(&mut store, &p("time/out"), d, d, true, &mut r);
        let null_keyframe = store.add(p("keyframe/null"), rng::uniform(&mut r, 1, d, 0.1));
        let placeholder = store.add(p("keyframe/placeholder"), rng::uniform(&mut r, 1, d, 0.1));
        let keyframe_in = Linear::new(&mut store, &p("keyframe/in"), config.feature_dim, d, true, &mut r);
        let blocks = config.dilation_prefix.len() + 1;
        let dma = (0..blocks)
            .map(|b| {
                let name = p(&format!("encoder/block{b}"));
                DmaBlock {
                    attention: MultiHeadAttention::new(&mut store, &format!("{name}/attn"), d, 1, false, &mut r),
                    fuse: Linear::new(&mut store, &format!("{name}/fuse"), 2 * d, d, true, &mut r),
                    mlp: FeedForward::new(&mut store, &format!("{name}/mlp"), d, ff, &mut r),
                }
            })
            .collect();
        let frame_in = Linear::new(&mut store, &p("decoder/frame_in"), config.feature_dim, d, true, &mut r);
        let decoder = (0..config.decoder_layers)
            .map(|l| {
                let name = p(&format!("decoder/layer{l}"));
                DecoderLayer {
                    norm_self: LayerNorm::new(&mut store, &format!("{name}/norm_self"), d),
                    self_attention: MultiHeadAttention::new(
                        &mut store,
                        &format!("{name}/self_attn"),
                        d,
                        config.heads,
                        true,
                        &mut r,
                    ),
                    norm_cross: LayerNorm::new(&mut store, &format!("{name}/norm_cross"), d),
                    cross_attention: MultiHeadAttention::new(
                        &mut store,
                        &format!("{name}/cross_attn"),
                        d,
                        config.heads,
                        true,
                        &mut r,
                    ),
                    norm_ff: LayerNorm::new(&mut store, &format!("{name}/norm_ff"), d),
                    ff: FeedForward::new(&mut store, &format!("{name}/ff"), d, ff, &mut r),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(&mut store, &p("decoder/final_norm"), d);
        let frame_out = Linear::new(&mut store, &p("decoder/frame_out"), d, config.feature_dim, true, &mut r);
        Ok(Self {
            config,
            params: store,
            layers: Layers {
                token_table,
                prompt_proj,
                time_in,
                time_out,
                null_keyframe,
                placeholder,
                keyframe_in,
                dma,
                frame_in,
                decoder,
                final_norm,
                frame_out,
            },
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Whether parameter `id` belongs to the keyframe encoder branch.
    pub fn is_encoder_param(&self, id: ParamId) -> bool {
        let name = self.params.name(id);
        name.starts_with(&format!("{PARAM_PREFIX}encoder/"))
            || name.starts_with(&format!("{PARAM_PREFIX}keyframe/in"))
            || name == format!("{PARAM_PREFIX}keyframe/placeholder")
    }

    pub fn null_keyframe_param(&self) -> ParamId {
        self.layers.null_keyframe
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("prompt has no tokens".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "prompt token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// `1 × d` prompt embedding: mean-pooled token table rows, projected.
    pub fn prompt_embedding(&self, tape: &mut Tape<'_, T>, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let table = tape.param(self.layers.token_table);
        let rows = tape.gather_rows(table, tokens);
        let pooled = tape.mean_rows(rows);
        Ok(self.layers.prompt_proj.forward(tape, pooled))
    }

    /// `1 × d` timestep embedding.
    pub fn timestep_embedding(&self, tape: &mut Tape<'_, T>, t: usize) -> Var {
        let s = Matrix::from_vec(1, self.config.latent_dim, sinusoidal(t as f64, self.config.latent_dim))
            .expect("embedding width");
        let x = tape.constant(s);
        let h = self.layers.time_in.forward(tape, x);
        let h = tape.gelu(h);
        self.layers.time_out.forward(tape, h)
    }

    fn padding_flags(n: usize, padding: Option<&[bool]>) -> Result<Vec<bool>> {
        match padding {
            Some(p) if p.len() != n => Err(Error::Shape(format!(
                "padding covers {} frames, sequence has {n}",
                p.len()
            ))),
            Some(p) => Ok(p.to_vec()),
            None => Ok(vec![false; n]),
        }
    }

    /// Keyframe encoder on the tape. Returns the `N × d` memory node and the
    /// per-block validity trace.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<'_, T>,
        n: usize,
        condition: KeyframeCondition<'_, T>,
        prompt: Var,
        padding: Option<&[bool]>,
    ) -> Result<(Var, Vec<TokenValidity>)> {
        let d = self.config.latent_dim;
        let padding = Self::padding_flags(n, padding)?;
        let (values, mask) = match condition {
            KeyframeCondition::Dropped => {
                let null = tape.param(self.layers.null_keyframe);
                return Ok((tape.broadcast_rows(null, n), Vec::new()));
            }
            KeyframeCondition::Keyframes { values, mask } => (values, mask),
        };
        if values.shape() != (n, self.config.feature_dim) || mask.frames() != n {
            return Err(Error::Shape(format!(
                "keyframes {:?} / mask over {} frames do not match {n}×{}",
                values.shape(),
                mask.frames(),
                self.config.feature_dim
            )));
        }
        let flags = mask.row_flags();
        if flags.iter().zip(&padding).any(|(&k, &p)| k && p) {
            return Err(Error::Input("a keyframe lies in the padding region".into()));
        }
        let mut validity = TokenValidity::new(flags.clone(), padding.clone())?;

        let x = tape.constant(values.clone());
        let proj = self.layers.keyframe_in.forward(tape, x);
        let keep = Matrix::from_fn(n, d, |i, _| if flags[i] { T::one() } else { T::zero() });
        let fill = keep.map(|k| T::one() - k);
        let proj = tape.mul_const(proj, keep);
        let ph = tape.param(self.layers.placeholder);
        let ph = tape.broadcast_rows(ph, n);
        let ph = tape.mul_const(ph, fill);
        let frames = tape.add(proj, ph);
        let pe = tape.constant(position_table(n, d));
        let frames = tape.add(frames, pe);
        // The prompt joins as one extra, always-valid token.
        let z0 = tape.concat_rows(&[frames, prompt]);

        let mut z = z0;
        let mut trace = Vec::with_capacity(self.layers.dma.len());
        for (block, step) in self
            .layers
            .dma
            .iter()
            .zip(self.config.dilation_schedule(n))
        {
            let mut key_valid = validity.valid.clone();
            key_valid.push(true);
            let next = dilate_validity(&validity, step);
            let scope = Matrix::from_fn(n + 1, d, |i, _| {
                if i == n || next.valid[i] {
                    T::one()
                } else {
                    T::zero()
                }
            });
            let att = block.attention.forward(tape, z, z, Some(&key_valid));
            let att = tape.mul_const(att, scope);
            let cat = tape.concat_cols(&[att, z]);
            let fused = block.fuse.forward(tape, cat);
            z = block.mlp.forward(tape, fused);
            validity = next;
            trace.push(validity.clone());
        }
        let out = tape.add(z, z0);
        Ok((tape.slice_rows(out, 0, n), trace))
    }

    /// Decoder on the tape. `memory` is the `N × d` encoder output.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape<'_, T>,
        x_t: Var,
        t: usize,
        prompt: Var,
        memory: Var,
        padding: Option<&[bool]>,
    ) -> Result<Var> {
        let (n, dim) = tape.shape(x_t);
        if dim != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "frames have {dim} features, model expects {}",
                self.config.feature_dim
            )));
        }
        if tape.shape(memory).0 != n {
            return Err(Error::Shape("encoder memory length differs from frame count".into()));
        }
        let padding = Self::padding_flags(n, padding)?;
        let d = self.config.latent_dim;
        let y_t = self.timestep_embedding(tape, t);
        let frames = self.layers.frame_in.forward(tape, x_t);
        let pe = tape.constant(position_table(n, d));
        let frames = tape.add(frames, pe);
        let mut h = tape.concat_rows(&[y_t, prompt, frames]);

        let mut self_valid = vec![true, true];
        self_valid.extend(padding.iter().map(|p| !p));
        let cross_valid: Vec<bool> = padding.iter().map(|p| !p).collect();
        for layer in &self.layers.decoder {
            let a = layer.norm_self.forward(tape, h);
            let a = layer.self_attention.forward(tape, a, a, Some(&self_valid));
            h = tape.add(h, a);
            let c = layer.norm_cross.forward(tape, h);
            let c = layer.cross_attention.forward(tape, c, memory, Some(&cross_valid));
            h = tape.add(h, c);
            let f = layer.norm_ff.forward(tape, h);
            let f = layer.ff.forward(tape, f);
            h = tape.add(h, f);
        }
        let h = self.layers.final_norm.forward(tape, h);
        let frames = tape.slice_rows(h, 2, n);
        Ok(self.layers.frame_out.forward(tape, frames))
    }

    /// Full forward pass on the tape, returning the `N × D` prediction of x₀.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<'_, T>,
        x_t: Var,
        t: usize,
        tokens: &[usize],
        condition: KeyframeCondition<'_, T>,
        padding: Option<&[bool]>,
    ) -> Result<Var> {
        let n = tape.shape(x_t).0;
        let prompt = self.prompt_embedding(tape, tokens)?;
        let (memory, _) = self.encode_on_tape(tape, n, condition, prompt, padding)?;
        self.decode_on_tape(tape, x_t, t, prompt, memory, padding)
    }

    /// Encodes keyframes once; the result is reused across sampling steps.
    pub fn keyframe_encode(
        &self,
        n: usize,
        tokens: &[usize],
        condition: KeyframeCondition<'_, T>,
        padding: Option<&[bool]>,
    ) -> Result<KeyframeEncoding<T>> {
        let mut tape = Tape::new(&self.params);
        let prompt = self.prompt_embedding(&mut tape, tokens)?;
        let (memory, trace) = self.encode_on_tape(&mut tape, n, condition, prompt, padding)?;
        Ok(KeyframeEncoding {
            memory: tape.value(memory).clone(),
            validity_trace: trace,
        })
    }

    /// Decoder pass against a precomputed keyframe memory.
    pub fn denoise_with_memory(
        &self,
        x_t: &Matrix<T>,
        t: usize,
        tokens: &[usize],
        memory: &Matrix<T>,
        padding: Option<&[bool]>,
    ) -> Result<Matrix<T>> {
        let mut tape = Tape::new(&self.params);
        let prompt = self.prompt_embedding(&mut tape, tokens)?;
        let x = tape.input(x_t.clone());
        let mem = tape.constant(memory.clone());
        let out = self.decode_on_tape(&mut tape, x, t, prompt, mem, padding)?;
        Ok(tape.value(out).clone())
    }

    /// Predicts x₀ from `x_t`.
    pub fn denoise(
        &self,
        x_t: &Matrix<T>,
        t: usize,
        tokens: &[usize],
        condition: KeyframeCondition<'_, T>,
    ) -> Result<Matrix<T>> {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(x_t.clone());
        let out = self.forward_on_tape(&mut tape, x, t, tokens, condition, None)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion_data::sample_keyframe_mask;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            feature_dim: 5,
            latent_dim: 8,
            heads: 2,
            decoder_layers: 1,
            ff_width: 16,
            vocab_size: 10,
            max_frames: 12,
            dilation_prefix: vec![1, 2],
            init_seed: 3,
        }
    }

    #[test]
    fn dilation_examples() {
        let mut v = vec![false; 10];
        v[4] = true;
        let d = dilate_validity(&TokenValidity::unpadded(v), 2);
        let got: Vec<usize> = (0..10).filter(|&i| d.valid[i]).collect();
        assert_eq!(got, vec![2, 3, 4, 5, 6]);

        let mut v = vec![false; 10];
        v[7] = true;
        assert!(dilate_validity(&TokenValidity::unpadded(v), 10).is_complete());

        let all = TokenValidity::new(vec![true; 6], vec![false, false, false, false, true, true]).unwrap();
        assert_eq!(dilate_validity(&all, 3), all);
    }

    #[test]
    fn padding_never_activates() {
        let mut valid = vec![false; 8];
        valid[5] = true;
        let padding = vec![false, false, false, false, false, false, true, true];
        let v = TokenValidity::new(valid, padding).unwrap();
        let d = dilate_validity(&v, 8);
        assert!(!d.valid[6] && !d.valid[7]);
        assert!(d.is_complete());
    }

    #[test]
    fn single_valid_token_returns_its_value() {
        let mut r = rng::stream(5, 1);
        let q = rng::standard_normal::<f64>(&mut r, 6, 3);
        let k = rng::standard_normal::<f64>(&mut r, 6, 3);
        let v = rng::standard_normal::<f64>(&mut r, 6, 4);
        let mut valid = vec![false; 6];
        valid[2] = true;
        let out = masked_attention(&q, &k, &v, &valid, None).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                assert!((out.output[(i, j)] - v[(2, j)]).abs() < 1e-12);
            }
        }
        assert!(matches!(
            masked_attention(&q, &k, &v, &[false; 6], None),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn two_token_hand_case() {
        // d = 2, q = (1, 0); keys (1, 0) and (0, 1); values (1, 2) and (3, 4).
        let q = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![5.0, 5.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![9.0, 9.0]]).unwrap();
        let out = masked_attention(&q, &k, &v, &[true, true, false], None).unwrap();
        let a = (1.0f64 / 2f64.sqrt()).exp();
        let w0 = a / (a + 1.0);
        let expected = [w0 * 1.0 + (1.0 - w0) * 3.0, w0 * 2.0 + (1.0 - w0) * 4.0];
        assert!((out.output[(0, 0)] - expected[0]).abs() < 1e-12);
        assert!((out.output[(0, 1)] - expected[1]).abs() < 1e-12);
        assert!(out.weights[(0, 2)] < 1e-8);
    }

    #[test]
    fn all_valid_matches_plain_softmax_attention() {
        let mut r = rng::stream(6, 1);
        let z = rng::standard_normal::<f64>(&mut r, 5, 4);
        let out = masked_self_attention(&z, &TokenValidity::unpadded(vec![true; 5])).unwrap();
        let logits = z.matmul_t(&z).scale(0.5);
        let plain = Matrix::from_fn(5, 5, |i, j| {
            let z: f64 = (0..5).map(|k| logits[(i, k)].exp()).sum();
            logits[(i, j)].exp() / z
        });
        assert!(out.output.sub(&plain.matmul(&z)).max_abs() < 1e-12);
    }

    #[test]
    fn validity_trace_covers_sequence() {
        let model = DenoiserModel::<f64>::new(tiny_config()).unwrap();
        let mut r = rng::stream(1, 2);
        let x = rng::standard_normal::<f64>(&mut r, 12, 5);
        let mask = KeyframeMask::new(12, vec![0]).unwrap();
        let kf = mask.keyframe_part(&x);
        let enc = model
            .keyframe_encode(12, &[1, 2], KeyframeCondition::Keyframes { values: &kf, mask: &mask }, None)
            .unwrap();
        let counts: Vec<usize> = enc.validity_trace.iter().map(|v| v.count_valid()).collect();
        assert_eq!(counts, vec![2, 4, 12]);
        assert_eq!(enc.memory.shape(), (12, 8));
    }

    #[test]
    fn dropped_condition_ignores_keyframes() {
        let model = DenoiserModel::<f64>::new(tiny_config()).unwrap();
        let mut r = rng::stream(2, 2);
        let x_t = rng::standard_normal::<f64>(&mut r, 9, 5);
        let a = model.denoise(&x_t, 3, &[4, 5], KeyframeCondition::Dropped).unwrap();
        let b = model.denoise(&x_t, 3, &[4, 5], KeyframeCondition::Dropped).unwrap();
        assert_eq!(a, b);
        let mask = sample_keyframe_mask(9, 0.2, 1).unwrap();
        let kf = mask.keyframe_part(&rng::standard_normal::<f64>(&mut r, 9, 5));
        let c = model
            .denoise(&x_t, 3, &[4, 5], KeyframeCondition::Keyframes { values: &kf, mask: &mask })
            .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn padded_sequence_matches_unpadded_frames() {
        let model = DenoiserModel::<f64>::new(tiny_config()).unwrap();
        let mut r = rng::stream(9, 2);
        let n = 7;
        let x_t = rng::standard_normal::<f64>(&mut r, n, 5);
        let x0 = rng::standard_normal::<f64>(&mut r, n, 5);
        let mask = KeyframeMask::new(n, vec![2, 5]).unwrap();
        let kf = mask.keyframe_part(&x0);
        let plain = model
            .denoise(&x_t, 4, &[3], KeyframeCondition::Keyframes { values: &kf, mask: &mask })
            .unwrap();

        let total = 11;
        let pad = |m: &Matrix<f64>| Matrix::from_fn(total, 5, |i, j| if i < n { m[(i, j)] } else { 7.5 });
        let padding: Vec<bool> = (0..total).map(|i| i >= n).collect();
        let pmask = KeyframeMask::new(total, vec![2, 5]).unwrap();
        let pkf = pad(&kf);
        let mut tape = Tape::new(model.params());
        let x = tape.input(pad(&x_t));
        let prompt = model.prompt_embedding(&mut tape, &[3]).unwrap();
        let (mem, trace) = model
            .encode_on_tape(
                &mut tape,
                total,
                KeyframeCondition::Keyframes { values: &pkf, mask: &pmask },
                prompt,
                Some(&padding),
            )
            .unwrap();
        let last = trace.last().unwrap();
        assert!(last.is_complete());
        assert!(last.valid[n..].iter().all(|v| !v));
        let out = model.decode_on_tape(&mut tape, x, 4, prompt, mem, Some(&padding)).unwrap();
        let out = tape.value(out).slice_rows(0, n);
        assert!(out.sub(&plain).max_abs() < 1e-10);
    }

    #[test]
    fn out_of_vocabulary_prompt_is_rejected() {
        let model = DenoiserModel::<f32>::new(tiny_config()).unwrap();
        let x = Matrix::zeros(4, 5);
        let err = model.denoise(&x, 1, &[10], KeyframeCondition::Dropped).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }
}
