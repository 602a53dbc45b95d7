//! Trials and retrieval metrics.
//!
//! Ranking convention shared by every metric: scores sorted descending, ties
//! kept in original index order. AP uses the interpolation-free rank-sum
//! form; EER interpolates linearly between the two ROC points that bracket
//! `FAR = FRR`; AUC is the Mann-Whitney statistic with ties counted half.

use crate::data::Corpus;
use crate::encoders::{infer_audio, infer_text, EncoderParams};
use crate::error::{MateError, Result};
use crate::matryoshka::PrefixSchedule;
use crate::rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

fn unit_prefix(x: &[f64], d: usize) -> Result<Vec<f64>> {
    let head = &x[..d];
    let n = head.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(MateError::numeric(format!("cannot normalize a prefix with norm {n}")));
    }
    Ok(head.iter().map(|v| v / n).collect())
}

/// Cosine between the leading `d` entries of two embeddings.
pub fn prefix_cosine(a: &Tensor, b: &Tensor, d: usize) -> Result<f64> {
    if a.shape() != b.shape() || a.ndim() != 1 {
        return Err(MateError::Shape {
            op: "score",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if d == 0 || d > a.numel() {
        return Err(MateError::param(format!("prefix {d} outside 1..={}", a.numel())));
    }
    let x = unit_prefix(a.data(), d)?;
    let y = unit_prefix(b.data(), d)?;
    Ok(x.iter().zip(&y).map(|(p, q)| p * q).sum())
}

pub fn score(u_a: &Tensor, u_t: &Tensor, d: usize, schedule: &PrefixSchedule) -> Result<f64> {
    if !schedule.contains(d) {
        return Err(MateError::param(format!(
            "dimension {d} is not in the prefix schedule {:?}",
            schedule.dims()
        )));
    }
    prefix_cosine(u_a, u_t, d)
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(MateError::Shape {
            op: "metric",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MateError::param(format!("non-finite score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

fn both_classes(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    let (p, n) = check_scores(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(MateError::param(format!(
            "need both classes, got {p} positives and {n} negatives"
        )));
    }
    Ok((p, n))
}

/// Indices sorted by descending score, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx
}

/// Whether some tied score group contains both a positive and a negative.
pub fn boundary_ties(scores: &[f64], labels: &[bool]) -> bool {
    let order = ranking(scores);
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let group = &order[start..end];
        if group.iter().any(|&i| labels[i]) && group.iter().any(|&i| !labels[i]) {
            return true;
        }
        start = end;
    }
    false
}

pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (n_pos, _) = check_scores(scores, labels)?;
    if n_pos == 0 {
        return Err(MateError::param("average precision needs at least one positive"));
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

/// `(FAR, FRR)` after accepting every trial scoring at least each distinct
/// score, starting from the reject-all point `(0, 1)`.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (p, n) = both_classes(scores, labels)?;
    let order = ranking(scores);
    let mut pts = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        pts.push((fp as f64 / n as f64, 1.0 - tp as f64 / p as f64));
    }
    Ok(pts)
}

/// Linear crossing of `FAR = FRR` along a monotone ROC polyline.
pub fn eer_from_roc(pts: &[(f64, f64)]) -> f64 {
    for w in pts.windows(2) {
        let (f0, r0) = w[0];
        let (f1, r1) = w[1];
        let d0 = f0 - r0;
        let d1 = f1 - r1;
        if d0 <= 0.0 && d1 >= 0.0 {
            if d1 == d0 {
                return f0;
            }
            let t = -d0 / (d1 - d0);
            return f0 + t * (f1 - f0);
        }
    }
    // the polyline always ends at (1, 0), so a crossing exists
    unreachable!("ROC polyline without a FAR = FRR crossing")
}

pub fn eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(eer_from_roc(&roc_points(scores, labels)?))
}

pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, n) = both_classes(scores, labels)?;
    // average ranks, ascending, ties share the mean rank
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < idx.len() {
        let mut end = k + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[k]] {
            end += 1;
        }
        let mean_rank = (k + 1 + end) as f64 / 2.0;
        rank_sum += mean_rank * idx[k..end].iter().filter(|&&i| labels[i]).count() as f64;
        k = end;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub utterance: usize,
    pub keyword: usize,
    pub positive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
    /// Negatives drawn per positive after clamping.
    pub negative_ratio: usize,
}

impl TrialSet {
    pub fn n_pos(&self) -> usize {
        self.trials.iter().filter(|t| t.positive).count()
    }

    pub fn n_neg(&self) -> usize {
        self.trials.len() - self.n_pos()
    }
}

/// Every utterance against its own keyword plus `negative_ratio` distinct
/// other keywords, about `hard_fraction` of them one-substitution partners.
pub fn build_trials(
    corpus: &Corpus,
    negative_ratio: usize,
    hard_fraction: f64,
    seed: u64,
) -> Result<TrialSet> {
    if !(0.0..=1.0).contains(&hard_fraction) {
        return Err(MateError::param("hard_fraction must lie in [0, 1]"));
    }
    let v = corpus.vocab.len();
    let mut ratio = negative_ratio;
    if ratio > v - 1 {
        log::warn!("negative ratio {ratio} exceeds the {} available keywords; clamping", v - 1);
        ratio = v - 1;
    }
    let mut trials = Vec::with_capacity(corpus.utterances.len() * (ratio + 1));
    for (ui, utt) in corpus.utterances.iter().enumerate() {
        let k = utt.keyword_id;
        let mut r = rng::stream(seed, "trials", ui as u64);
        trials.push(Trial {
            utterance: ui,
            keyword: k,
            positive: true,
        });
        let partners = corpus.vocab.partners(k);
        let want_hard = ((hard_fraction * ratio as f64).round() as usize).min(partners.len());
        let hard: Vec<usize> = partners.choose_multiple(&mut r, want_hard).copied().collect();
        let rest: Vec<usize> = (0..v).filter(|&j| j != k && !hard.contains(&j)).collect();
        let easy: Vec<usize> = rest
            .choose_multiple(&mut r, ratio - hard.len())
            .copied()
            .collect();
        for j in hard.into_iter().chain(easy) {
            trials.push(Trial {
                utterance: ui,
                keyword: j,
                positive: false,
            });
        }
    }
    Ok(TrialSet {
        trials,
        negative_ratio: ratio,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimMetrics {
    pub ap: f64,
    pub eer: f64,
    pub auc: f64,
    /// Some tied score group mixes positives and negatives.
    pub boundary_ties: bool,
}

pub fn dim_metrics(scores: &[f64], labels: &[bool]) -> Result<DimMetrics> {
    Ok(DimMetrics {
        ap: average_precision(scores, labels)?,
        eer: eer(scores, labels)?,
        auc: auc(scores, labels)?,
        boundary_ties: boundary_ties(scores, labels),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_dim: BTreeMap<usize, DimMetrics>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub full_dim: usize,
    pub fingerprint: String,
    pub epoch: usize,
}

/// One JSON-lines record.
#[derive(Serialize)]
pub struct MetricsLine {
    pub dim: usize,
    pub ap: f64,
    pub eer: f64,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub epoch: usize,
    /// Prefix scores (`dim < full_dim`) are diagnostics only.
    pub diagnostic: bool,
    pub boundary_ties: bool,
    pub ap_ties: &'static str,
    pub eer_interpolation: &'static str,
    pub fingerprint: String,
}

impl MetricsReport {
    pub fn full(&self) -> &DimMetrics {
        &self.per_dim[&self.full_dim]
    }

    pub fn lines(&self) -> Vec<MetricsLine> {
        self.per_dim
            .iter()
            .map(|(&dim, m)| MetricsLine {
                dim,
                ap: m.ap,
                eer: m.eer,
                auc: m.auc,
                n_pos: self.n_pos,
                n_neg: self.n_neg,
                epoch: self.epoch,
                diagnostic: dim != self.full_dim,
                boundary_ties: m.boundary_ties,
                ap_ties: "original_index",
                eer_interpolation: "linear",
                fingerprint: self.fingerprint.clone(),
            })
            .collect()
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        for line in self.lines() {
            let s = serde_json::to_string(&line)
                .map_err(|e| MateError::Format(e.to_string()))?;
            writeln!(w, "{s}")?;
        }
        Ok(())
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "dim", "ap", "eer", "auc", "n_pos", "n_neg", "diagnostic"])
            .map_err(csv_err)?;
        for l in self.lines() {
            out.write_record([
                l.epoch.to_string(),
                l.dim.to_string(),
                format!("{:.6}", l.ap),
                format!("{:.6}", l.eer),
                format!("{:.6}", l.auc),
                l.n_pos.to_string(),
                l.n_neg.to_string(),
                l.diagnostic.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> MateError {
    MateError::Format(e.to_string())
}

/// Scores every trial at every schedule dimension.
pub fn evaluate(
    params: &EncoderParams,
    corpus: &Corpus,
    trials: &TrialSet,
    schedule: &PrefixSchedule,
    fingerprint: &str,
    epoch: usize,
) -> Result<MetricsReport> {
    let audio = corpus
        .utterances
        .iter()
        .map(|u| infer_audio(params, &u.features))
        .collect::<Result<Vec<_>>>()?;
    let text = corpus
        .vocab
        .keywords
        .iter()
        .map(|t| infer_text(params, t))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<bool> = trials.trials.iter().map(|t| t.positive).collect();
    let mut per_dim = BTreeMap::new();
    for &d in schedule.dims() {
        let scores = trials
            .trials
            .iter()
            .map(|t| score(&audio[t.utterance], &text[t.keyword], d, schedule))
            .collect::<Result<Vec<_>>>()?;
        per_dim.insert(d, dim_metrics(&scores, &labels)?);
    }
    Ok(MetricsReport {
        per_dim,
        n_pos: trials.n_pos(),
        n_neg: trials.n_neg(),
        full_dim: schedule.full_dim(),
        fingerprint: fingerprint.to_string(),
        epoch,
    })
}
