//! Utterance-level main losses and prefix alignment losses.

use crate::error::{MateError, Result};
use crate::tensor::{softmax, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Full-dimension audio-text objective.
///
/// `audio` and `text` are `N × d` stacks of unit rows; row `i` of each
/// belongs to sample `i` with keyword `labels[i]`.
pub trait MainLoss: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, g: &mut Graph, audio: Var, text: Var, labels: &[usize]) -> Result<Var>;

    /// Loss value for plain embedding lists.
    fn evaluate(&self, audio: &[Tensor], text: &[Tensor], labels: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let a = stack(&mut g, audio)?;
        let t = stack(&mut g, text)?;
        let l = self.forward(&mut g, a, t, labels)?;
        Ok(g.value(l).item())
    }
}

fn stack(g: &mut Graph, xs: &[Tensor]) -> Result<Var> {
    let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
    g.stack_rows(&vars)
}

fn check_batch(g: &Graph, audio: Var, text: Var, labels: &[usize]) -> Result<usize> {
    let sa = g.shape(audio);
    let st = g.shape(text);
    if sa != st || sa.len() != 2 {
        return Err(MateError::Shape {
            op: "main_loss",
            lhs: sa.to_vec(),
            rhs: st.to_vec(),
        });
    }
    let n = sa[0];
    if labels.len() != n {
        return Err(MateError::param(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(MateError::param("empty batch"));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(MateError::param("batch holds a single keyword; no negative pairs"));
    }
    Ok(n)
}

/// Pair masks normalized to mean over positives and over negatives.
fn pair_masks(labels: &[usize]) -> (Tensor, Tensor) {
    let n = labels.len();
    let mut pos = vec![0.0; n * n];
    let mut neg = vec![0.0; n * n];
    let (mut np, mut nn) = (0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                pos[i * n + j] = 1.0;
                np += 1;
            } else {
                neg[i * n + j] = 1.0;
                nn += 1;
            }
        }
    }
    pos.iter_mut().for_each(|v| *v /= np as f64);
    neg.iter_mut().for_each(|v| *v /= nn as f64);
    (
        Tensor::matrix(n, n, pos).expect("square"),
        Tensor::matrix(n, n, neg).expect("square"),
    )
}

/// Proxy binomial deviance: every text embedding acts as the proxy of its
/// keyword.
///
/// With `s_ij = cos(u_a,i, u_t,j)` the loss is the mean over positive pairs
/// of `softplus(-α(s_ij - m))` plus the mean over negative pairs of
/// `softplus(β(s_ij - m))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyBinomialDeviance {
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
}

impl Default for ProxyBinomialDeviance {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 50.0,
            margin: 0.5,
        }
    }
}

impl MainLoss for ProxyBinomialDeviance {
    fn name(&self) -> &'static str {
        "proxy_bd"
    }

    fn forward(&self, g: &mut Graph, audio: Var, text: Var, labels: &[usize]) -> Result<Var> {
        check_batch(g, audio, text, labels)?;
        let (pos, neg) = pair_masks(labels);
        let tt = g.transpose(text)?;
        let sim = g.matmul(audio, tt)?;
        let shifted = g.add_scalar(sim, -self.margin);

        let pull = g.scale(shifted, -self.alpha);
        let pull = g.softplus(pull);
        let pos = g.constant(pos);
        let pull = g.mul(pull, pos)?;
        let pull = g.sum(pull);

        let push = g.scale(shifted, self.beta);
        let push = g.softplus(push);
        let neg = g.constant(neg);
        let push = g.mul(push, neg)?;
        let push = g.sum(push);

        g.add(pull, push)
    }
}

/// Symmetric InfoNCE over the batch, with positives defined by shared
/// keyword labels. Provided as an alternate main loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymmetricContrastive {
    pub temperature: f64,
}

impl Default for SymmetricContrastive {
    fn default() -> Self {
        Self { temperature: 0.1 }
    }
}

impl MainLoss for SymmetricContrastive {
    fn name(&self) -> &'static str {
        "symmetric_contrastive"
    }

    fn forward(&self, g: &mut Graph, audio: Var, text: Var, labels: &[usize]) -> Result<Var> {
        let n = check_batch(g, audio, text, labels)?;
        // target: uniform over same-label columns of each row
        let mut target = vec![0.0; n * n];
        for i in 0..n {
            let k = labels.iter().filter(|&&y| y == labels[i]).count() as f64;
            for j in 0..n {
                if labels[i] == labels[j] {
                    target[i * n + j] = -1.0 / (k * n as f64);
                }
            }
        }
        let target = g.constant(Tensor::matrix(n, n, target)?);
        let tt = g.transpose(text)?;
        let sim = g.matmul(audio, tt)?;
        let a2t = g.log_softmax_rows(sim, self.temperature)?;
        let simt = g.transpose(sim)?;
        let t2a = g.log_softmax_rows(simt, self.temperature)?;
        let a = g.mul(a2t, target)?;
        let a = g.sum(a);
        let b = g.mul(t2a, target)?;
        let b = g.sum(b);
        let s = g.add(a, b)?;
        Ok(g.scale(s, 0.5))
    }
}

/// Registered main losses, selectable from configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MainLossConfig {
    ProxyBd {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_margin")]
        margin: f64,
    },
    SymmetricContrastive {
        #[serde(default = "default_contrastive_temperature")]
        temperature: f64,
    },
}

fn default_alpha() -> f64 {
    2.0
}
fn default_beta() -> f64 {
    50.0
}
fn default_margin() -> f64 {
    0.5
}
fn default_contrastive_temperature() -> f64 {
    0.1
}

impl Default for MainLossConfig {
    fn default() -> Self {
        MainLossConfig::ProxyBd {
            alpha: default_alpha(),
            beta: default_beta(),
            margin: default_margin(),
        }
    }
}

impl MainLossConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MainLossConfig::ProxyBd {
                alpha,
                beta,
                margin,
            } => {
                if !(alpha > 0.0) || !(beta > 0.0) || !margin.is_finite() {
                    return Err(MateError::config(
                        "main_loss",
                        "alpha and beta must be positive, margin finite",
                    ));
                }
            }
            MainLossConfig::SymmetricContrastive { temperature } => {
                if !(temperature > 0.0) {
                    return Err(MateError::config(
                        "main_loss.temperature",
                        "must be positive",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Box<dyn MainLoss> {
        match *self {
            MainLossConfig::ProxyBd {
                alpha,
                beta,
                margin,
            } => Box::new(ProxyBinomialDeviance {
                alpha,
                beta,
                margin,
            }),
            MainLossConfig::SymmetricContrastive { temperature } => {
                Box::new(SymmetricContrastive { temperature })
            }
        }
    }
}

/// Temperature and term weights of the prefix alignment loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub temperature: f64,
    pub w_mse: f64,
    pub w_kl: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            w_mse: 1.0,
            w_kl: 1.0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(MateError::config("alignment.temperature", "must be positive"));
        }
        if !(self.w_mse >= 0.0) || !(self.w_kl >= 0.0) || !(self.w_mse + self.w_kl > 0.0) {
            return Err(MateError::config(
                "alignment",
                "weights must be nonnegative with a positive sum",
            ));
        }
        Ok(())
    }
}

/// Alignment of `N × d` students to fixed teachers, averaged over the batch:
/// `w_mse · MSE(s, t) + w_kl · KL(φ_τ(s) ‖ φ_τ(t))`.
///
/// The teacher is detached; no gradient reaches it.
pub fn prefix_alignment_graph(
    g: &mut Graph,
    student: Var,
    teacher: Var,
    cfg: &AlignmentConfig,
) -> Result<Var> {
    cfg.validate().map_err(|e| MateError::param(e.to_string()))?;
    if g.shape(student) != g.shape(teacher) {
        return Err(MateError::param(format!(
            "student {:?} and teacher {:?} differ in shape",
            g.shape(student),
            g.shape(teacher)
        )));
    }
    let rows = g.value(student).rows() as f64;
    let teacher = g.detach(teacher);
    let mut terms = Vec::with_capacity(2);

    if cfg.w_mse > 0.0 {
        let diff = g.sub(student, teacher)?;
        let sq = g.mul(diff, diff)?;
        let mse = g.mean(sq);
        terms.push(g.scale(mse, cfg.w_mse));
    }
    if cfg.w_kl > 0.0 {
        let log_q = {
            let t = g.value(teacher).clone();
            let mut tg = Graph::new();
            let tv = tg.constant(t);
            let lq = tg.log_softmax_rows(tv, cfg.temperature)?;
            tg.value(lq).clone()
        };
        let log_q = g.constant(log_q);
        let log_p = g.log_softmax_rows(student, cfg.temperature)?;
        let p = g.exp(log_p);
        let ratio = g.sub(log_p, log_q)?;
        let kl = g.mul(p, ratio)?;
        let kl = g.sum(kl);
        terms.push(g.scale(kl, cfg.w_kl / rows));
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    Ok(total)
}

/// Alignment loss for a single student/teacher pair (1-D or row-stacked).
pub fn prefix_alignment(student: &Tensor, teacher: &Tensor, cfg: &AlignmentConfig) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(MateError::param(format!(
            "student {:?} and teacher {:?} differ in shape",
            student.shape(),
            teacher.shape()
        )));
    }
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let t = g.constant(teacher.clone());
    let l = prefix_alignment_graph(&mut g, s, t, cfg)?;
    Ok(g.value(l).item())
}

/// `KL(softmax(p/τ) ‖ softmax(q/τ))` in nats, for plain vectors.
pub fn softened_kl(p: &Tensor, q: &Tensor, temperature: f64) -> Result<f64> {
    let ps = softmax(p, temperature)?;
    let qs = softmax(q, temperature)?;
    Ok(ps
        .data()
        .iter()
        .zip(qs.data())
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum())
}

/// One prefix's students and teacher: `(u_a^k, u_t^k, ũ_t^k)`.
#[derive(Clone, Debug)]
pub struct PrefixTriple {
    pub audio: Tensor,
    pub text: Tensor,
    pub teacher: Tensor,
}

/// Sum over prefixes of the audio and text alignment terms.
///
/// Prefixes must be strictly shorter than `full_dim`; the full embedding is
/// never aligned.
pub fn total_alignment(
    prefixes: &[PrefixTriple],
    full_dim: usize,
    cfg: &AlignmentConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for p in prefixes {
        if p.teacher.last_dim() >= full_dim {
            return Err(MateError::usage(format!(
                "alignment prefixes must be shorter than the full dimension {full_dim}"
            )));
        }
        total += prefix_alignment(&p.audio, &p.teacher, cfg)?;
        total += prefix_alignment(&p.text, &p.teacher, cfg)?;
    }
    Ok(total)
}

/// Delayed alignment weight: zero through `warmup` epochs, then `plateau`.
pub fn lambda_schedule(epoch: usize, warmup: usize, plateau: f64) -> Result<f64> {
    if epoch < 1 {
        return Err(MateError::param("epochs are numbered from 1"));
    }
    Ok(if epoch <= warmup { 0.0 } else { plateau })
}

/// Per-prefix alignment values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixAlignment {
    pub dim: usize,
    pub audio: f64,
    pub text: f64,
}

/// Scalar components of one step's objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main: f64,
    pub align_per_prefix: Vec<PrefixAlignment>,
    pub align_total: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.main.is_finite() && self.align_total.is_finite() && self.total.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn proxy_bd_margin_point() {
        // Two keywords; the only positive pair sits exactly at the margin and
        // the negatives are far below it.
        let loss = ProxyBinomialDeviance {
            alpha: 2.0,
            beta: 50.0,
            margin: 0.0,
        };
        let a = [v(&[1.0, 0.0]), v(&[-1.0, 0.0])];
        let t = [v(&[0.0, 1.0]), v(&[0.0, -1.0])];
        let l = loss.evaluate(&a, &t, &[0, 1]).unwrap();
        // positives: s = 0 for both (i,i) pairs -> ln 2 each, mean ln 2
        // negatives: s = 0 too -> softplus(0) = ln 2
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn proxy_bd_separated_limit() {
        let loss = ProxyBinomialDeviance {
            alpha: 200.0,
            beta: 200.0,
            margin: 0.0,
        };
        let a = [v(&[1.0, 0.0]), v(&[-1.0, 0.0])];
        let l = loss.evaluate(&a, &a, &[0, 1]).unwrap();
        assert!(l < 1e-80);
    }

    #[test]
    fn proxy_bd_errors() {
        let loss = ProxyBinomialDeviance::default();
        let a = [v(&[1.0, 0.0]), v(&[0.0, 1.0])];
        assert!(matches!(loss.evaluate(&a, &a, &[3, 3]), Err(MateError::Param(_))));
        assert!(loss.evaluate(&a, &a, &[0]).is_err());
        assert!(loss.evaluate(&[], &[], &[]).is_err());
    }

    #[test]
    fn alignment_examples() {
        let cfg = AlignmentConfig::default();
        let s = v(&[0.3, -0.1, 0.5]);
        assert_eq!(prefix_alignment(&s, &s, &cfg).unwrap(), 0.0);

        let mse_only = AlignmentConfig {
            temperature: 1.0,
            w_mse: 1.0,
            w_kl: 0.0,
        };
        let l = prefix_alignment(&v(&[1.0, -1.0]), &v(&[0.0, 0.0]), &mse_only).unwrap();
        assert!((l - 1.0).abs() < 1e-15);

        let kl_only = AlignmentConfig {
            temperature: 1.0,
            w_mse: 0.0,
            w_kl: 1.0,
        };
        let l = prefix_alignment(&v(&[3f64.ln(), 0.0]), &v(&[0.0, 0.0]), &kl_only).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.13082).abs() < 1e-5);

        assert!(matches!(
            prefix_alignment(&v(&[1.0]), &v(&[1.0, 2.0]), &cfg),
            Err(MateError::Param(_))
        ));
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let mut g = Graph::new();
        let s = g.param(Tensor::matrix(1, 3, vec![0.2, -0.4, 0.1]).unwrap());
        let t = g.param(Tensor::matrix(1, 3, vec![0.0, 0.3, -0.2]).unwrap());
        let l = prefix_alignment_graph(&mut g, s, t, &AlignmentConfig::default()).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(t).is_none());
        assert!(grads.get(s).unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn total_alignment_rules() {
        let cfg = AlignmentConfig::default();
        assert_eq!(total_alignment(&[], 8, &cfg).unwrap(), 0.0);
        let same = PrefixTriple {
            audio: v(&[0.1, 0.2]),
            text: v(&[0.1, 0.2]),
            teacher: v(&[0.1, 0.2]),
        };
        assert_eq!(total_alignment(std::slice::from_ref(&same), 4, &cfg).unwrap(), 0.0);
        assert!(matches!(
            total_alignment(&[same], 2, &cfg),
            Err(MateError::Usage(_))
        ));
    }

    #[test]
    fn lambda_schedule_examples() {
        assert_eq!(lambda_schedule(20, 20, 0.5).unwrap(), 0.0);
        assert_eq!(lambda_schedule(21, 20, 0.5).unwrap(), 0.5);
        assert_eq!(lambda_schedule(1, 0, 0.5).unwrap(), 0.5);
        assert!(lambda_schedule(0, 20, 0.5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AlignmentConfig {
            temperature: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AlignmentConfig {
            temperature: 1.0,
            w_mse: 0.0,
            w_kl: 0.0
        }
        .validate()
        .is_err());
    }
}
