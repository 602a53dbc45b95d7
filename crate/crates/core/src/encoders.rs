//! Toy dual encoders.
//!
//! The acoustic side maps a `T_a × F` feature sequence to a `T_a × D`
//! frame-level embedding sequence and pools it with single-head attentive
//! statistics pooling. The text side embeds phoneme IDs, averages them over
//! time and projects to `D`. Both return unit-norm utterance embeddings.

use crate::error::{MateError, Result};
use crate::rng;
use crate::tensor::{Gradients, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Floor applied to the pooled variance before the square root.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Norm floor for utterance-level normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderDims {
    /// Acoustic feature width `F`.
    pub features: usize,
    /// Hidden width `H`.
    pub hidden: usize,
    /// Embedding width `D`.
    pub embed: usize,
    /// Phoneme inventory size `P`.
    pub phonemes: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            features: 20,
            hidden: 32,
            embed: 64,
            phonemes: 40,
        }
    }
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("features", self.features),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("phonemes", self.phonemes),
        ] {
            if v == 0 {
                return Err(MateError::param(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// `T_a × F` acoustic features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence(Tensor);

impl FeatureSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        frames.dims2("feature sequence")?;
        if !frames.is_finite() {
            return Err(MateError::param("feature sequence has non-finite values"));
        }
        Ok(Self(frames))
    }

    pub fn frames(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Phoneme IDs of one keyword.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(MateError::param("token sequence must not be empty"));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// All trainable weights of both encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    /// `F × H`
    pub frame_proj: Tensor,
    /// `H × H`, applied to the running mean of hidden frames.
    pub context_mix: Tensor,
    /// `H × D`
    pub out_proj: Tensor,
    /// `D × 1` attention scorer.
    pub attention: Tensor,
    /// `2D × D`, maps `[mean; std]` back to `D`.
    pub pool_proj: Tensor,
    /// `P × H`
    pub token_embed: Tensor,
    /// `H × D`
    pub text_proj: Tensor,
}

pub const BLOCK_NAMES: [&str; 7] = [
    "audio.frame_proj",
    "audio.context_mix",
    "audio.out_proj",
    "audio.attention",
    "audio.pool_proj",
    "text.token_embed",
    "text.text_proj",
];

impl EncoderParams {
    pub fn block_shapes(dims: &EncoderDims) -> [[usize; 2]; 7] {
        let EncoderDims {
            features: f,
            hidden: h,
            embed: d,
            phonemes: p,
        } = *dims;
        [[f, h], [h, h], [h, d], [d, 1], [2 * d, d], [p, h], [h, d]]
    }

    /// Uniform `±1/sqrt(fan_in)` initialization from the `init` stream.
    pub fn init(dims: EncoderDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut r = rng::stream(seed, "init", 0);
        let blocks = Self::block_shapes(&dims).map(|[rows, cols]| {
            let bound = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| r.gen_range(-bound..=bound))
                .collect();
            Tensor::matrix(rows, cols, data).expect("block shape")
        });
        Self::from_blocks(dims, blocks.into())
    }

    pub fn zeros(dims: EncoderDims) -> Result<Self> {
        dims.validate()?;
        let blocks = Self::block_shapes(&dims).map(|s| Tensor::zeros(&s));
        Self::from_blocks(dims, blocks.into())
    }

    /// Builds from blocks in [`BLOCK_NAMES`] order, checking shapes.
    pub fn from_blocks(dims: EncoderDims, blocks: Vec<Tensor>) -> Result<Self> {
        let shapes = Self::block_shapes(&dims);
        if blocks.len() != shapes.len() {
            return Err(MateError::param(format!(
                "expected {} parameter blocks, got {}",
                shapes.len(),
                blocks.len()
            )));
        }
        for ((b, s), name) in blocks.iter().zip(&shapes).zip(BLOCK_NAMES) {
            if b.shape() != s {
                return Err(MateError::param(format!(
                    "block {name} has shape {:?}, expected {s:?}",
                    b.shape()
                )));
            }
            if !b.is_finite() {
                return Err(MateError::param(format!("block {name} is not finite")));
            }
        }
        let mut it = blocks.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(Self {
            dims,
            frame_proj: next(),
            context_mix: next(),
            out_proj: next(),
            attention: next(),
            pool_proj: next(),
            token_embed: next(),
            text_proj: next(),
        })
    }

    pub fn blocks(&self) -> [(&'static str, &Tensor); 7] {
        [
            (BLOCK_NAMES[0], &self.frame_proj),
            (BLOCK_NAMES[1], &self.context_mix),
            (BLOCK_NAMES[2], &self.out_proj),
            (BLOCK_NAMES[3], &self.attention),
            (BLOCK_NAMES[4], &self.pool_proj),
            (BLOCK_NAMES[5], &self.token_embed),
            (BLOCK_NAMES[6], &self.text_proj),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Tensor); 7] {
        [
            (BLOCK_NAMES[0], &mut self.frame_proj),
            (BLOCK_NAMES[1], &mut self.context_mix),
            (BLOCK_NAMES[2], &mut self.out_proj),
            (BLOCK_NAMES[3], &mut self.attention),
            (BLOCK_NAMES[4], &mut self.pool_proj),
            (BLOCK_NAMES[5], &mut self.token_embed),
            (BLOCK_NAMES[6], &mut self.text_proj),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, t)| t.is_finite())
    }

    /// Places every block on `g`, tracked or not.
    pub fn register(&self, g: &mut Graph, tracked: bool) -> ParamVars {
        let mut put = |t: &Tensor| {
            if tracked {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        ParamVars {
            dims: self.dims,
            frame_proj: put(&self.frame_proj),
            context_mix: put(&self.context_mix),
            out_proj: put(&self.out_proj),
            attention: put(&self.attention),
            pool_proj: put(&self.pool_proj),
            token_embed: put(&self.token_embed),
            text_proj: put(&self.text_proj),
        }
    }
}

/// Graph handles for a registered [`EncoderParams`].
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub dims: EncoderDims,
    pub frame_proj: Var,
    pub context_mix: Var,
    pub out_proj: Var,
    pub attention: Var,
    pub pool_proj: Var,
    pub token_embed: Var,
    pub text_proj: Var,
}

impl ParamVars {
    fn vars(&self) -> [Var; 7] {
        [
            self.frame_proj,
            self.context_mix,
            self.out_proj,
            self.attention,
            self.pool_proj,
            self.token_embed,
            self.text_proj,
        ]
    }

    /// Collects per-block gradients; blocks the root ignores get zeros.
    pub fn gradients(&self, grads: &Gradients) -> EncoderParams {
        let shapes = EncoderParams::block_shapes(&self.dims);
        let blocks = self
            .vars()
            .iter()
            .zip(shapes)
            .map(|(v, s)| grads.get_or_zeros(*v, &s))
            .collect();
        EncoderParams::from_blocks(self.dims, blocks).expect("gradient blocks match params")
    }
}

/// Lower-triangular running-mean operator: row `t` averages rows `0..=t`.
fn running_mean_matrix(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        let w = 1.0 / (i + 1) as f64;
        for j in 0..=i {
            data[i * t + j] = w;
        }
    }
    Tensor::matrix(t, t, data).expect("square")
}

/// Frame-level acoustic embeddings, `T_a × D`.
///
/// `z = tanh(x·W_f)`, `h = tanh(z + runmean(z)·W_c)`, `e = h·W_o`.
pub fn encode_audio(g: &mut Graph, p: &ParamVars, x: &FeatureSequence) -> Result<Var> {
    if x.width() != p.dims.features {
        return Err(MateError::param(format!(
            "feature width {} does not match encoder width {}",
            x.width(),
            p.dims.features
        )));
    }
    let frames = g.constant(x.frames().clone());
    let z = g.matmul(frames, p.frame_proj)?;
    let z = g.tanh(z);
    let running = g.constant(running_mean_matrix(x.len()));
    let ctx = g.matmul(running, z)?;
    let ctx = g.matmul(ctx, p.context_mix)?;
    let h = g.add(z, ctx)?;
    let h = g.tanh(h);
    g.matmul(h, p.out_proj)
}

/// Attentive statistics pooling of a `T_a × D` sequence into a unit `D`-vector.
pub fn pool_audio(g: &mut Graph, p: &ParamVars, seq: Var) -> Result<Var> {
    let scores = g.matmul(seq, p.attention)?;
    let scores = g.transpose(scores)?;
    let weights = g.softmax_rows(scores, 1.0)?;
    let stats = g.stats_pool(seq, weights, VARIANCE_FLOOR)?;
    let proj = g.matmul(stats, p.pool_proj)?;
    let unit = g.l2_normalize_rows(proj, NORM_EPS)?;
    g.reshape(unit, &[p.dims.embed])
}

/// Utterance-level acoustic embedding `u_a`.
pub fn embed_audio(g: &mut Graph, p: &ParamVars, x: &FeatureSequence) -> Result<Var> {
    let seq = encode_audio(g, p, x)?;
    pool_audio(g, p, seq)
}

fn check_tokens(p: &ParamVars, t: &TokenSequence) -> Result<()> {
    if let Some(bad) = t.tokens().iter().find(|&&k| k as usize >= p.dims.phonemes) {
        return Err(MateError::param(format!(
            "token {bad} outside phoneme inventory of size {}",
            p.dims.phonemes
        )));
    }
    Ok(())
}

/// Phoneme-level text embeddings, `T_t × D`.
pub fn encode_text_sequence(g: &mut Graph, p: &ParamVars, t: &TokenSequence) -> Result<Var> {
    check_tokens(p, t)?;
    let np = p.dims.phonemes;
    let mut onehot = vec![0.0; t.len() * np];
    for (i, &k) in t.tokens().iter().enumerate() {
        onehot[i * np + k as usize] = 1.0;
    }
    let onehot = g.constant(Tensor::matrix(t.len(), np, onehot)?);
    let e = g.matmul(onehot, p.token_embed)?;
    g.matmul(e, p.text_proj)
}

/// Utterance-level text embedding `u_t`: global average pooling, linear
/// projection, unit norm.
///
/// The average is taken as a phoneme histogram times the embedding table,
/// so the result depends only on the multiset of tokens, bit for bit.
pub fn encode_text(g: &mut Graph, p: &ParamVars, t: &TokenSequence) -> Result<Var> {
    check_tokens(p, t)?;
    let np = p.dims.phonemes;
    let mut counts = vec![0u32; np];
    for &k in t.tokens() {
        counts[k as usize] += 1;
    }
    let n = t.len() as f64;
    let hist = counts.iter().map(|&c| f64::from(c) / n).collect();
    let hist = g.constant(Tensor::matrix(1, np, hist)?);
    let avg = g.matmul(hist, p.token_embed)?;
    let proj = g.matmul(avg, p.text_proj)?;
    let unit = g.l2_normalize_rows(proj, NORM_EPS)?;
    g.reshape(unit, &[p.dims.embed])
}

/// Forward pass over paired inputs; returns `N × D` stacks `(U_a, U_t)`.
pub fn embed_pairs(
    g: &mut Graph,
    p: &ParamVars,
    audio: &[&FeatureSequence],
    text: &[&TokenSequence],
) -> Result<(Var, Var)> {
    if audio.len() != text.len() || audio.is_empty() {
        return Err(MateError::param(format!(
            "need equal, nonzero numbers of audio and text inputs ({} vs {})",
            audio.len(),
            text.len()
        )));
    }
    let ua = audio
        .iter()
        .map(|x| embed_audio(g, p, x))
        .collect::<Result<Vec<_>>>()?;
    let ut = text
        .iter()
        .map(|t| encode_text(g, p, t))
        .collect::<Result<Vec<_>>>()?;
    Ok((g.stack_rows(&ua)?, g.stack_rows(&ut)?))
}

/// Inference-only acoustic embedding (nothing is tracked).
pub fn infer_audio(params: &EncoderParams, x: &FeatureSequence) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.register(&mut g, false);
    let u = embed_audio(&mut g, &p, x)?;
    Ok(g.value(u).clone())
}

/// Inference-only text embedding (nothing is tracked).
pub fn infer_text(params: &EncoderParams, t: &TokenSequence) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.register(&mut g, false);
    let u = encode_text(&mut g, &p, t)?;
    Ok(g.value(u).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> EncoderDims {
        EncoderDims {
            features: 3,
            hidden: 4,
            embed: 6,
            phonemes: 5,
        }
    }

    fn seq(rows: &[Vec<f64>]) -> FeatureSequence {
        FeatureSequence::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = EncoderParams::init(small_dims(), 5).unwrap();
        let b = EncoderParams::init(small_dims(), 5).unwrap();
        let c = EncoderParams::init(small_dims(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for ((_, t), [rows, _]) in a.blocks().iter().zip(EncoderParams::block_shapes(&a.dims)) {
            let bound = 1.0 / (rows as f64).sqrt();
            assert!(t.data().iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn zero_weights_give_zero_sequence() {
        let params = EncoderParams::zeros(small_dims()).unwrap();
        let mut g = Graph::new();
        let p = params.register(&mut g, false);
        let x = seq(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]);
        let e = encode_audio(&mut g, &p, &x).unwrap();
        assert_eq!(g.shape(e), &[2, 6]);
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_shape() {
        let params = EncoderParams::init(small_dims(), 1).unwrap();
        let mut g = Graph::new();
        let p = params.register(&mut g, false);
        let e = encode_audio(&mut g, &p, &seq(&[vec![0.1, 0.2, 0.3]])).unwrap();
        assert_eq!(g.shape(e), &[1, 6]);
    }

    #[test]
    fn feature_width_mismatch() {
        let params = EncoderParams::init(small_dims(), 1).unwrap();
        let x = seq(&[vec![0.1, 0.2]]);
        assert!(matches!(infer_audio(&params, &x), Err(MateError::Param(_))));
    }

    #[test]
    fn constant_sequence_pools_to_mean_and_floor_std() {
        let params = EncoderParams::init(small_dims(), 3).unwrap();
        let v = vec![0.3, -0.2, 0.7];
        let const_seq = seq(&[v.clone(), v.clone(), v.clone(), v.clone()]);
        let one = seq(&[v]);

        let mut g = Graph::new();
        let p = params.register(&mut g, false);
        let e = encode_audio(&mut g, &p, &const_seq).unwrap();
        // The causal context of a constant sequence is constant too.
        let frame0 = g.value(e).row(0).to_vec();
        for r in 1..4 {
            for (a, b) in g.value(e).row(r).iter().zip(&frame0) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let pooled = pool_audio(&mut g, &p, e).unwrap();

        // expected: normalize(proj([mean; sqrt(floor)]))
        let d = params.dims.embed;
        let mut stats = frame0.clone();
        stats.extend(std::iter::repeat_n(VARIANCE_FLOOR.sqrt(), d));
        let stats = Tensor::matrix(1, 2 * d, stats).unwrap();
        let proj = stats.matmul(&params.pool_proj).unwrap();
        let expected = crate::tensor::l2_normalize(&proj, 1e-12).unwrap();
        for (a, b) in g.value(pooled).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let single = infer_audio(&params, &one).unwrap();
        for (a, b) in single.data().iter().zip(g.value(pooled).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_attention_pooling_is_permutation_invariant() {
        let mut params = EncoderParams::init(small_dims(), 4).unwrap();
        params.attention = Tensor::zeros(&[6, 1]);
        let mut g = Graph::new();
        let p = params.register(&mut g, false);
        let seq_rows: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..6).map(|j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0).collect())
            .collect();
        let mut perm = seq_rows.clone();
        perm.reverse();
        perm.swap(0, 2);
        let a = g.constant(Tensor::from_rows(&seq_rows).unwrap());
        let b = g.constant(Tensor::from_rows(&perm).unwrap());
        let pa = pool_audio(&mut g, &p, a).unwrap();
        let pb = pool_audio(&mut g, &p, b).unwrap();

        // Oracle: plain mean and population std over frames.
        let t = seq_rows.len() as f64;
        for j in 0..6 {
            let mean = seq_rows.iter().map(|r| r[j]).sum::<f64>() / t;
            let var = seq_rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / t;
            assert!(var > VARIANCE_FLOOR);
        }
        for (x, y) in g.value(pa).data().iter().zip(g.value(pb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn text_embedding_properties() {
        let params = EncoderParams::init(small_dims(), 9).unwrap();
        let e1 = infer_text(&params, &TokenSequence::new(vec![2]).unwrap()).unwrap();
        let e3 = infer_text(&params, &TokenSequence::new(vec![2, 2, 2]).unwrap()).unwrap();
        assert_eq!(e1, e3);

        let a = infer_text(&params, &TokenSequence::new(vec![0, 1, 4, 1]).unwrap()).unwrap();
        let b = infer_text(&params, &TokenSequence::new(vec![1, 4, 1, 0]).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-12);

        let bad = TokenSequence::new(vec![5]).unwrap();
        assert!(matches!(infer_text(&params, &bad), Err(MateError::Param(_))));
    }

    #[test]
    fn text_sequence_average_matches_pooled_direction() {
        let params = EncoderParams::init(small_dims(), 2).unwrap();
        let t = TokenSequence::new(vec![3, 0, 3, 1]).unwrap();
        let mut g = Graph::new();
        let p = params.register(&mut g, false);
        let seq = encode_text_sequence(&mut g, &p, &t).unwrap();
        let avg = g.mean_rows(seq).unwrap();
        let unit = g.l2_normalize_rows(avg, 1e-12).unwrap();
        let pooled = encode_text(&mut g, &p, &t).unwrap();
        for (a, b) in g.value(unit).data().iter().zip(g.value(pooled).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
