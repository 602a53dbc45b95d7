//! Nested-prefix supervision.
//!
//! At the start of every epoch the current text encoder embeds the training
//! corpus once. The centered embeddings give a row-softmaxed dependency
//! matrix whose SVD yields one projection head per non-full prefix size.
//! During the epoch each batch's text embeddings are compressed through
//! those heads into teacher targets for the audio and text prefixes.

use crate::encoders::{embed_pairs, infer_text, EncoderParams, FeatureSequence, TokenSequence};
use crate::error::{MateError, Result};
use crate::linalg::{corpus_mean, row_softmax, svd, SvdFactors};
use crate::objectives::{
    lambda_schedule, prefix_alignment_graph, AlignmentConfig, LossBreakdown, MainLoss,
    PrefixAlignment,
};
use crate::tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// Nested prefix sizes `d_k = D · 2^-(K-k)`, `k = 1..K`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixSchedule {
    full_dim: usize,
    dims: Vec<usize>,
}

impl PrefixSchedule {
    pub fn new(full_dim: usize, k: usize) -> Result<Self> {
        if k < 1 {
            return Err(MateError::param("need at least one granularity"));
        }
        if k > 63 || full_dim == 0 || !full_dim.is_multiple_of(1usize << (k - 1)) {
            return Err(MateError::param(format!(
                "dimension {full_dim} is not divisible by 2^{}",
                k - 1
            )));
        }
        let dims = (1..=k).map(|i| full_dim >> (k - i)).collect();
        Ok(Self { full_dim, dims })
    }

    pub fn full_dim(&self) -> usize {
        self.full_dim
    }

    pub fn k(&self) -> usize {
        self.dims.len()
    }

    /// All sizes, ascending, ending with the full dimension.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Sizes that get an alignment head (everything but the full dimension).
    pub fn prefix_dims(&self) -> &[usize] {
        &self.dims[..self.dims.len() - 1]
    }

    pub fn contains(&self, d: usize) -> bool {
        self.dims.contains(&d)
    }
}

/// Corpus mean and row-softmaxed, `√D`-scaled average outer product of the
/// centered embeddings.
pub fn estimate_dependency(text_embeddings: &[Tensor]) -> Result<(Tensor, Tensor)> {
    if text_embeddings.len() < 2 {
        return Err(MateError::param(format!(
            "dependency estimate needs at least 2 embeddings, got {}",
            text_embeddings.len()
        )));
    }
    let mu = corpus_mean(text_embeddings)?;
    let d = mu.numel();
    let mut acc = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for u in text_embeddings {
        for ((c, x), m) in centered.iter_mut().zip(u.data()).zip(mu.data()) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = &mut acc[i * d..(i + 1) * d];
            for (a, cj) in row.iter_mut().zip(&centered) {
                *a += ci * cj;
            }
        }
    }
    let scale = 1.0 / (text_embeddings.len() as f64 * (d as f64).sqrt());
    acc.iter_mut().for_each(|a| *a *= scale);
    let a_bar = row_softmax(&Tensor::matrix(d, d, acc)?)?;
    Ok((mu, a_bar))
}

/// SVD of the dependency matrix and the heads `U[:, :d]·diag(S[:d])` for
/// every non-full prefix size.
pub fn build_heads(
    a_bar: &Tensor,
    schedule: &PrefixSchedule,
) -> Result<(SvdFactors, BTreeMap<usize, Tensor>)> {
    let (r, c) = a_bar.dims2("build_heads")?;
    if r != schedule.full_dim() || c != schedule.full_dim() {
        return Err(MateError::param(format!(
            "dependency matrix is {r}x{c}, schedule expects {}",
            schedule.full_dim()
        )));
    }
    let factors = svd(a_bar)?;
    let n = schedule.full_dim();
    let mut heads = BTreeMap::new();
    for &d in schedule.prefix_dims() {
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(factors.u.get2(i, j) * factors.s[j]);
            }
        }
        heads.insert(d, Tensor::matrix(n, d, data)?);
    }
    Ok((factors, heads))
}

/// Corpus statistics and projection heads, fixed for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochHeads {
    pub epoch: usize,
    pub corpus_size: usize,
    pub mu: Tensor,
    pub a_bar: Tensor,
    pub svd: SvdFactors,
    pub heads: BTreeMap<usize, Tensor>,
}

impl EpochHeads {
    pub fn from_embeddings(
        epoch: usize,
        text_embeddings: &[Tensor],
        schedule: &PrefixSchedule,
    ) -> Result<Self> {
        let (mu, a_bar) = estimate_dependency(text_embeddings)?;
        let (svd, heads) = build_heads(&a_bar, schedule)?;
        Ok(Self {
            epoch,
            corpus_size: text_embeddings.len(),
            mu,
            a_bar,
            svd,
            heads,
        })
    }

    pub fn head(&self, d: usize) -> Result<&Tensor> {
        self.heads
            .get(&d)
            .ok_or_else(|| MateError::usage(format!("no projection head for prefix size {d}")))
    }

    /// Compressed teacher `(A^d)ᵀ (u_t - μ)` for one embedding.
    pub fn compress(&self, u_t: &Tensor, d: usize) -> Result<Tensor> {
        let row = u_t.clone().reshape(&[1, u_t.numel()])?;
        let out = self.compress_rows(&row, d)?;
        out.reshape(&[d])
    }

    /// Row-wise compression of an `N × D` stack, giving `N × d`.
    pub fn compress_rows(&self, u_t: &Tensor, d: usize) -> Result<Tensor> {
        let head = self.head(d)?;
        let (_, cols) = u_t.dims2("compress")?;
        if cols != self.mu.numel() {
            return Err(MateError::Shape {
                op: "compress",
                lhs: u_t.shape().to_vec(),
                rhs: self.mu.shape().to_vec(),
            });
        }
        let mut centered = u_t.clone();
        let mu = self.mu.data();
        for (i, x) in centered.data_mut().iter_mut().enumerate() {
            *x -= mu[i % cols];
        }
        centered.matmul(head)
    }
}

/// Granularity of the corpus used for the dependency estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsGranularity {
    /// Each distinct keyword's text once.
    #[default]
    Keyword,
    /// One text embedding per training utterance.
    Utterance,
}

/// Re-estimates the heads with the current text encoder. Nothing is tracked.
///
/// `texts` is the statistics corpus in a fixed order.
pub fn epoch_refresh(
    params: &EncoderParams,
    texts: &[&TokenSequence],
    schedule: &PrefixSchedule,
    epoch: usize,
) -> Result<EpochHeads> {
    // Text embedding depends only on the token multiset, so identical
    // sequences are embedded once.
    let mut cache: BTreeMap<&TokenSequence, Tensor> = BTreeMap::new();
    let mut embeddings = Vec::with_capacity(texts.len());
    for t in texts {
        let e = match cache.get(*t) {
            Some(e) => e.clone(),
            None => {
                let e = infer_text(params, t)?;
                cache.insert(t, e.clone());
                e
            }
        };
        embeddings.push(e);
    }
    EpochHeads::from_embeddings(epoch, &embeddings, schedule)
}

/// Which prefixes receive which supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Main loss on the full pair only.
    FullOnly,
    /// Main loss on every prefix, full dimension included.
    PerPrefixMain,
    /// Per-prefix main loss plus alignment on the same prefixes.
    PerPrefixMainPlusAlign,
    /// Main loss on the full pair, alignment on the prefixes.
    Mate,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::FullOnly,
        Strategy::PerPrefixMain,
        Strategy::PerPrefixMainPlusAlign,
        Strategy::Mate,
    ];

    pub fn per_prefix_main(self) -> bool {
        matches!(self, Strategy::PerPrefixMain | Strategy::PerPrefixMainPlusAlign)
    }

    pub fn aligns(self) -> bool {
        matches!(self, Strategy::PerPrefixMainPlusAlign | Strategy::Mate)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FullOnly => "full_only",
            Strategy::PerPrefixMain => "per_prefix_main",
            Strategy::PerPrefixMainPlusAlign => "per_prefix_main_plus_align",
            Strategy::Mate => "mate",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = MateError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| MateError::param(format!("unknown strategy `{s}`")))
    }
}

/// One training batch: paired inputs and keyword labels.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub audio: Vec<&'a FeatureSequence>,
    pub text: Vec<&'a TokenSequence>,
    pub labels: Vec<usize>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Everything a training step needs besides the batch and parameters.
#[derive(Clone, Copy)]
pub struct StepContext<'a> {
    pub schedule: &'a PrefixSchedule,
    pub heads: Option<&'a EpochHeads>,
    pub main_loss: &'a dyn MainLoss,
    pub alignment: AlignmentConfig,
    pub strategy: Strategy,
    pub epoch: usize,
    pub warmup_epochs: usize,
    pub lambda_plateau: f64,
    /// `N × D` text embeddings to derive teachers from instead of the
    /// batch's live ones. Teachers are constants either way; pinning them
    /// lets finite differences see the same objective backprop does.
    pub teacher_text: Option<&'a Tensor>,
}

pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub grads: EncoderParams,
}

/// Loss graph for one batch; returns the scalar root and its breakdown.
pub fn build_step_graph(
    g: &mut Graph,
    params: &EncoderParams,
    tracked: bool,
    batch: &Batch<'_>,
    ctx: &StepContext<'_>,
) -> Result<(Var, LossBreakdown, crate::encoders::ParamVars)> {
    let full = ctx.schedule.full_dim();
    if params.dims.embed != full {
        return Err(MateError::param(format!(
            "encoder width {} does not match schedule dimension {full}",
            params.dims.embed
        )));
    }
    let pv = params.register(g, tracked);
    let (ua, ut) = embed_pairs(g, &pv, &batch.audio, &batch.text)?;
    let lambda = lambda_schedule(ctx.epoch, ctx.warmup_epochs, ctx.lambda_plateau)?;

    let main = if ctx.strategy.per_prefix_main() {
        let mut acc: Option<Var> = None;
        for &d in ctx.schedule.dims() {
            let term = if d == full {
                ctx.main_loss.forward(g, ua, ut, &batch.labels)?
            } else {
                let pa = g.narrow_last(ua, d)?;
                let pa = g.l2_normalize_rows(pa, crate::encoders::NORM_EPS)?;
                let pt = g.narrow_last(ut, d)?;
                let pt = g.l2_normalize_rows(pt, crate::encoders::NORM_EPS)?;
                ctx.main_loss.forward(g, pa, pt, &batch.labels)?
            };
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        acc.expect("schedule is never empty")
    } else {
        ctx.main_loss.forward(g, ua, ut, &batch.labels)?
    };

    let mut align_per_prefix = Vec::new();
    let mut align_root: Option<Var> = None;
    if ctx.strategy.aligns() && !ctx.schedule.prefix_dims().is_empty() {
        let heads = ctx
            .heads
            .ok_or_else(|| MateError::usage("alignment strategies need epoch heads"))?;
        let ut_value = match ctx.teacher_text {
            Some(t) => t.clone(),
            None => g.value(ut).clone(),
        };
        for &d in ctx.schedule.prefix_dims() {
            let teacher = g.constant(heads.compress_rows(&ut_value, d)?);
            let sa = g.narrow_last(ua, d)?;
            let st = g.narrow_last(ut, d)?;
            let la = prefix_alignment_graph(g, sa, teacher, &ctx.alignment)?;
            let lt = prefix_alignment_graph(g, st, teacher, &ctx.alignment)?;
            align_per_prefix.push(PrefixAlignment {
                dim: d,
                audio: g.value(la).item(),
                text: g.value(lt).item(),
            });
            let pair = g.add(la, lt)?;
            align_root = Some(match align_root {
                Some(a) => g.add(a, pair)?,
                None => pair,
            });
        }
    }

    let main_value = g.value(main).item();
    let align_total = align_root.map_or(0.0, |a| g.value(a).item());
    let root = match align_root {
        Some(a) if lambda != 0.0 => {
            let weighted = g.scale(a, lambda);
            g.add(main, weighted)?
        }
        _ => main,
    };
    let breakdown = LossBreakdown {
        main: main_value,
        align_per_prefix,
        align_total,
        lambda,
        total: g.value(root).item(),
    };
    Ok((root, breakdown, pv))
}

/// Forward and backward pass for one batch.
pub fn training_step(
    params: &EncoderParams,
    batch: &Batch<'_>,
    ctx: &StepContext<'_>,
) -> Result<StepOutput> {
    let mut g = Graph::new();
    let (root, breakdown, pv) = build_step_graph(&mut g, params, true, batch, ctx)?;
    let grads = g.backward(root)?;
    Ok(StepOutput {
        breakdown,
        grads: pv.gradients(&grads),
    })
}

/// Objective value only, without gradients.
pub fn step_loss(params: &EncoderParams, batch: &Batch<'_>, ctx: &StepContext<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let (_, breakdown, _) = build_step_graph(&mut g, params, false, batch, ctx)?;
    Ok(breakdown.total)
}
