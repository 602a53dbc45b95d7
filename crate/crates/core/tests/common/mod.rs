#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

use mate::data::{generate_vocab, Corpus, SpeakerBank, SynthConfig, VocabConfig};
use mate::encoders::{EncoderDims, EncoderParams};
use mate::{Graph, Result, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub const H: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// `max|a - n| / max(max|a|, max|n|, 1e-6)`: relative to the block's scale,
/// so a single near-zero entry cannot blow the ratio up.
pub fn rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .map(|x| x.abs())
        .fold(1e-6, f64::max);
    diff / scale
}

/// Central differences of `f` at `x`, one entry at a time.
pub fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += H;
        let mut minus = x.clone();
        minus.data_mut()[i] -= H;
        out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * H);
    }
    out
}

/// Worst relative error over all inputs of a graph-built scalar function.
pub fn check_graph_fn(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars).unwrap();
    let grads = g.backward(root).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let r = f(&mut g, &vs).unwrap();
        g.value(r).item()
    };
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], x.shape());
        let numeric = numeric_grad(x, |xk| {
            let mut xs = inputs.to_vec();
            xs[k] = xk.clone();
            eval(&xs)
        });
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Per-block worst relative error of `grads` against differences of `loss`.
pub fn check_param_grads(
    params: &EncoderParams,
    grads: &EncoderParams,
    loss: impl Fn(&EncoderParams) -> f64,
) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    for (bi, ((name, block), (_, g))) in params.blocks().into_iter().zip(grads.blocks()).enumerate() {
        let numeric = numeric_grad(block, |b| {
            let mut p = params.clone();
            *p.blocks_mut()[bi].1 = b.clone();
            loss(&p)
        });
        out.push((name, rel_err(g, &numeric)));
    }
    out
}

pub fn toy_dims() -> EncoderDims {
    EncoderDims {
        features: 3,
        hidden: 4,
        embed: 8,
        phonemes: 5,
    }
}

/// A small corpus over the toy dimensions.
pub fn toy_corpus(keywords: usize, per_keyword: usize, seed: u64) -> Corpus {
    let d = toy_dims();
    let vocab = generate_vocab(
        &VocabConfig {
            num_keywords: keywords,
            num_phonemes: d.phonemes,
            feature_dim: d.features,
            min_len: 2,
            max_len: 4,
            confusable_fraction: 0.2,
        },
        seed,
    )
    .unwrap();
    let speakers = SpeakerBank::generate(3, d.features, 0.1, seed, "speakers").unwrap();
    Corpus::synthesize(vocab, &speakers, per_keyword, &SynthConfig::default(), seed, "utts").unwrap()
}
pub mod suites;
