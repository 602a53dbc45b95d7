//! Whole-property checks shared by the integration tests and the acceptance
//! harness. Each returns a one-line summary or the first failure.

use super::*;
use mate::config::RunConfig;
use mate::data::sample_batch;
use mate::encoders::{embed_audio, encode_text, infer_text, ParamVars, TokenSequence};
use mate::eval::{auc, average_precision, eer};
use mate::linalg::svd;
use mate::matryoshka::{
    epoch_refresh, step_loss, training_step, PrefixSchedule, StepContext, Strategy,
};
use mate::objectives::{
    lambda_schedule, prefix_alignment_graph, AlignmentConfig, MainLoss, ProxyBinomialDeviance,
    SymmetricContrastive,
};
use mate::train::{build_datasets, train_with};

pub type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

pub const GRAD_TOL: f64 = 1e-4;

/// Toy parameters scaled up so every nonlinearity is exercised.
pub fn toy_params(seed: u64) -> EncoderParams {
    let mut p = EncoderParams::init(toy_dims(), seed).unwrap();
    for (_, b) in p.blocks_mut() {
        for x in b.data_mut() {
            *x *= 2.0;
        }
    }
    p
}

/// A config small enough to train in well under a second.
#[allow(clippy::field_reassign_with_default)]
pub fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.model = toy_dims();
    cfg.model.phonemes = 6;
    cfg.data.keywords = 12;
    cfg.data.test_keywords = 6;
    cfg.data.speakers = 4;
    cfg.data.utterances_per_keyword = 3;
    cfg.data.max_len = 5;
    cfg.batch.keywords_per_batch = 4;
    cfg.batch.steps_per_epoch = Some(3);
    cfg.schedule.total_epochs = 4;
    cfg.schedule.warmup_epochs = Some(2);
    cfg.schedule.eval_every = 2;
    cfg.eval.negative_ratio = 3;
    cfg.optimizer.lr = 1e-2;
    cfg
}

fn unit_rows(r: &mut impl Rng, n: usize, d: usize) -> Tensor {
    let x = uniform(r, &[n, d], -1.0, 1.0);
    mate::tensor::l2_normalize(&x, 1e-12).unwrap()
}

fn weighted(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Finite-difference agreement for the main losses, the alignment term,
/// every encoder block and the total objective under all four strategies.
pub fn gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut record = |what: String, err: f64| -> std::result::Result<(), String> {
        worst = worst.max(err);
        ensure!(err < GRAD_TOL, "{what}: relative error {err:e}");
        Ok(())
    };

    let labels = [0, 0, 1, 1, 2, 2];
    let losses: [Box<dyn MainLoss>; 2] = [
        Box::new(ProxyBinomialDeviance::default()),
        Box::new(SymmetricContrastive::default()),
    ];
    for loss in &losses {
        for seed in 0..5 {
            let mut r = rng(seed);
            let a = uniform(&mut r, &[6, 5], -1.0, 1.0);
            let t = uniform(&mut r, &[6, 5], -1.0, 1.0);
            let err = check_graph_fn(&[a, t], |g, v| {
                let a = g.l2_normalize_rows(v[0], 1e-12)?;
                let t = g.l2_normalize_rows(v[1], 1e-12)?;
                loss.forward(g, a, t, &labels)
            });
            record(format!("{} seed {seed}", loss.name()), err)?;
        }
    }

    let cfgs = [
        AlignmentConfig::default(),
        AlignmentConfig { temperature: 0.5, w_mse: 0.0, w_kl: 1.0 },
        AlignmentConfig { temperature: 2.0, w_mse: 1.0, w_kl: 0.0 },
    ];
    for cfg in cfgs {
        for seed in 0..5 {
            let mut r = rng(seed);
            let s = unit_rows(&mut r, 4, 4);
            let t = uniform(&mut r, &[4, 4], -0.5, 0.5);
            let err = check_graph_fn(&[s], |g, v| {
                let t = g.constant(t.clone());
                prefix_alignment_graph(g, v[0], t, &cfg)
            });
            record(format!("alignment {cfg:?} seed {seed}"), err)?;
        }
    }

    let corpus = toy_corpus(3, 2, 5);
    let d = toy_dims().embed;
    for seed in 0..5 {
        let params = toy_params(seed);
        let mut r = rng(seed);
        let utt = &corpus.utterances[r.gen_range(0..corpus.utterances.len())];
        let text = corpus.text(utt.keyword_id);
        let wa = uniform(&mut r, &[d], -1.0, 1.0);
        let wt = uniform(&mut r, &[d], -1.0, 1.0);
        let loss = |p: &EncoderParams, g: &mut Graph| -> (Var, ParamVars) {
            let pv = p.register(g, true);
            let ua = embed_audio(g, &pv, &utt.features).unwrap();
            let ut = encode_text(g, &pv, text).unwrap();
            let a = weighted(g, ua, &wa).unwrap();
            let t = weighted(g, ut, &wt).unwrap();
            (g.add(a, t).unwrap(), pv)
        };
        let mut g = Graph::new();
        let (root, pv) = loss(&params, &mut g);
        let grads = pv.gradients(&g.backward(root).unwrap());
        let value = |p: &EncoderParams| {
            let mut g = Graph::new();
            let (root, _) = loss(p, &mut g);
            g.value(root).item()
        };
        for (name, err) in check_param_grads(&params, &grads, value) {
            record(format!("encoders seed {seed} block {name}"), err)?;
        }
    }

    let schedule = PrefixSchedule::new(d, 3).unwrap();
    let main = ProxyBinomialDeviance::default();
    let corpus = toy_corpus(4, 3, 9);
    let texts: Vec<_> = corpus.vocab.keywords.iter().collect();
    for strategy in Strategy::ALL {
        for seed in 0..5 {
            let params = toy_params(seed);
            let heads = epoch_refresh(&params, &texts, &schedule, 3).unwrap();
            let batch = sample_batch(&corpus, 3, &mut rng(seed)).unwrap();
            // Teachers come from fixed text embeddings so that the
            // difference quotient sees the same detached targets.
            let rows: Vec<Vec<f64>> = batch
                .text
                .iter()
                .map(|t| infer_text(&params, t).unwrap().into_data())
                .collect();
            let live_text = Tensor::from_rows(&rows).unwrap();
            let ctx = StepContext {
                schedule: &schedule,
                heads: Some(&heads),
                main_loss: &main,
                alignment: AlignmentConfig::default(),
                strategy,
                epoch: 3,
                warmup_epochs: 2,
                lambda_plateau: 0.5,
                teacher_text: Some(&live_text),
            };
            let out = training_step(&params, &batch, &ctx).unwrap();
            ensure!(out.breakdown.lambda == 0.5, "lambda not active at epoch 3");
            for (name, err) in check_param_grads(&params, &out.grads, |p| step_loss(p, &batch, &ctx).unwrap()) {
                record(format!("{strategy} seed {seed} block {name}"), err)?;
            }
        }
    }
    Ok(format!("max relative error {worst:.2e}"))
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations,
/// sorted descending.
#[allow(clippy::needless_range_loop)]
pub fn symmetric_eigenvalues(a: &Tensor) -> Vec<f64> {
    let n = a.shape()[0];
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for _ in 0..200 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

pub fn gram(a: &Tensor) -> Tensor {
    a.transpose().unwrap().matmul(a).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn orthogonality_defect(u: &Tensor) -> f64 {
    max_abs_diff(&gram(u), &Tensor::eye(u.shape()[0]))
}

pub fn row_stochastic(r: &mut impl Rng, n: usize) -> Tensor {
    let x = uniform(r, &[n, n], 0.0, 1.0);
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::matrix(n, n, data).unwrap()
}

/// Worst (reconstruction, orthogonality, singular value) errors for one
/// matrix, after checking ordering, signs and bitwise repeatability.
pub fn check_factorization(a: &Tensor) -> std::result::Result<[f64; 3], String> {
    let f = svd(a).map_err(|e| e.to_string())?;
    let n = a.shape()[0];
    let recon = max_abs_diff(&f.reconstruct(), a);
    let ortho = orthogonality_defect(&f.u).max(orthogonality_defect(&f.v));
    ensure!(f.s.windows(2).all(|w| w[0] >= w[1]), "singular values not descending");
    ensure!(f.s.iter().all(|&s| s >= 0.0), "negative singular value");
    let ev = symmetric_eigenvalues(&gram(a));
    let sv = f
        .s
        .iter()
        .zip(&ev)
        .map(|(s, l)| (s - l.max(0.0).sqrt()).abs())
        .fold(0.0, f64::max);
    for j in 0..n {
        let big = (0..n)
            .map(|i| f.u.get2(i, j))
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        ensure!(big >= 0.0, "column {j} violates the sign convention");
    }
    let again = svd(a).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let sbits = |s: &[f64]| s.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure!(
        bits(&f.u) == bits(&again.u) && bits(&f.v) == bits(&again.v) && sbits(&f.s) == sbits(&again.s),
        "repeated factorization differs in some bit"
    );
    Ok([recon, ortho, sv])
}

/// 100 random row-stochastic matrices of sizes 8, 32 and 64.
pub fn svd_suite() -> Outcome {
    let mut r = rng(42);
    let mut worst = [0.0f64; 3];
    for i in 0..100 {
        let n = [8, 32, 64][i % 3];
        let errs = check_factorization(&row_stochastic(&mut r, n))?;
        for k in 0..3 {
            worst[k] = worst[k].max(errs[k]);
        }
    }
    let [recon, ortho, sv] = worst;
    ensure!(recon < 1e-10, "reconstruction error {recon:e}");
    ensure!(ortho < 1e-10, "orthogonality defect {ortho:e}");
    ensure!(sv < 1e-8, "singular values off the eigen oracle by {sv:e}");
    Ok(format!(
        "reconstruction {recon:.1e}, orthogonality {ortho:.1e}, oracle gap {sv:.1e}"
    ))
}

pub fn schedules() -> Outcome {
    let five = PrefixSchedule::new(256, 5).map_err(|e| e.to_string())?;
    let three = PrefixSchedule::new(256, 3).map_err(|e| e.to_string())?;
    ensure!(five.dims() == [16, 32, 64, 128, 256], "K=5 gave {:?}", five.dims());
    ensure!(three.dims() == [64, 128, 256], "K=3 gave {:?}", three.dims());
    let lambdas: Vec<f64> = [1, 20, 21, 100]
        .iter()
        .map(|&e| lambda_schedule(e, 20, 0.5).unwrap())
        .collect();
    ensure!(lambdas == [0.0, 0.0, 0.5, 0.5], "lambda gave {lambdas:?}");
    Ok("{16,32,64,128,256}, {64,128,256}, lambda 0/0/0.5/0.5".into())
}

/// MATE with one prefix equals FullOnly; warmup epochs follow FullOnly's
/// parameter trajectory bit for bit.
pub fn reductions() -> Outcome {
    let dims = toy_dims();
    let corpus = toy_corpus(5, 3, 13);
    let texts: Vec<_> = corpus.vocab.keywords.iter().collect();
    let main = ProxyBinomialDeviance::default();
    let k1 = PrefixSchedule::new(dims.embed, 1).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let params = EncoderParams::init(dims, seed).unwrap();
        let heads = epoch_refresh(&params, &texts, &k1, 4).unwrap();
        let batch = sample_batch(&corpus, 3, &mut rng(seed)).unwrap();
        let ctx = |strategy| StepContext {
            schedule: &k1,
            heads: Some(&heads),
            main_loss: &main,
            alignment: AlignmentConfig::default(),
            strategy,
            epoch: 4,
            warmup_epochs: 2,
            lambda_plateau: 0.5,
            teacher_text: None,
        };
        let full = step_loss(&params, &batch, &ctx(Strategy::FullOnly)).unwrap();
        let mate = step_loss(&params, &batch, &ctx(Strategy::Mate)).unwrap();
        worst = worst.max((full - mate).abs());
    }
    ensure!(worst <= 1e-12, "K=1 differs from FullOnly by {worst:e}");

    let mut mate_cfg = small_config(5);
    mate_cfg.schedule.total_epochs = 3;
    let mut full_cfg = mate_cfg.clone();
    full_cfg.matryoshka.strategy = Strategy::FullOnly;
    let data = build_datasets(&mate_cfg, 5).unwrap();
    let mut snap_mate = Vec::new();
    let mut snap_full = Vec::new();
    train_with(&mate_cfg, &data, |_, p| snap_mate.push(p.clone())).map_err(|e| e.to_string())?;
    train_with(&full_cfg, &data, |_, p| snap_full.push(p.clone())).map_err(|e| e.to_string())?;
    ensure!(
        snap_mate[..2] == snap_full[..2],
        "warmup trajectories differ"
    );
    ensure!(snap_mate[2] != snap_full[2], "alignment had no effect after warmup");
    Ok(format!("K=1 gap {worst:.1e}, 2 warmup epochs bitwise equal"))
}

pub fn brute_ap(s: &[f64], y: &[bool]) -> f64 {
    let n_pos = y.iter().filter(|&&l| l).count();
    let mut total = 0.0;
    for i in (0..s.len()).filter(|&i| y[i]) {
        let ahead = |j: usize| s[j] > s[i] || (s[j] == s[i] && j <= i);
        let rank = (0..s.len()).filter(|&j| ahead(j)).count();
        let hits = (0..s.len()).filter(|&j| y[j] && ahead(j)).count();
        total += hits as f64 / rank as f64;
    }
    total / n_pos as f64
}

pub fn brute_auc(s: &[f64], y: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| y[i]) {
        for j in (0..s.len()).filter(|&j| !y[j]) {
            pairs += 1.0;
            if s[i] > s[j] {
                wins += 1.0;
            } else if s[i] == s[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn brute_eer(s: &[f64], y: &[bool]) -> f64 {
    let p = y.iter().filter(|&&l| l).count() as f64;
    let n = y.len() as f64 - p;
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut pts = vec![(0.0, 1.0)];
    for &t in &thresholds {
        let fa = (0..s.len()).filter(|&i| !y[i] && s[i] >= t).count() as f64 / n;
        let fr = (0..s.len()).filter(|&i| y[i] && s[i] < t).count() as f64 / p;
        pts.push((fa, fr));
    }
    for w in pts.windows(2) {
        let (d0, d1) = (w[0].0 - w[0].1, w[1].0 - w[1].1);
        if d0 <= 0.0 && d1 >= 0.0 {
            if d0 == d1 {
                return w[0].0;
            }
            let t = -d0 / (d1 - d0);
            return w[0].0 + t * (w[1].0 - w[0].0);
        }
    }
    panic!("no crossing");
}

pub fn random_trials(r: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    let n = r.gen_range(2..=200);
    let quantize = r.gen_bool(0.5);
    let mut y: Vec<bool> = (0..n).map(|_| r.gen_bool(0.3)).collect();
    y[0] = true;
    y[1] = false;
    let s = (0..n)
        .map(|_| {
            let x: f64 = r.gen_range(-1.0..1.0);
            if quantize {
                (x * 5.0).round() / 5.0
            } else {
                x
            }
        })
        .collect();
    (s, y)
}

pub fn metric_oracles() -> Outcome {
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (s, y) = random_trials(&mut r);
        let gaps = [
            average_precision(&s, &y).unwrap() - brute_ap(&s, &y),
            auc(&s, &y).unwrap() - brute_auc(&s, &y),
            eer(&s, &y).unwrap() - brute_eer(&s, &y),
        ];
        worst = gaps.iter().fold(worst, |m, g| m.max(g.abs()));
    }
    ensure!(worst < 1e-12, "brute-force gap {worst:e}");

    let mut r = rng(5);
    for _ in 0..20 {
        let n = r.gen_range(2..50);
        let y: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let s: Vec<f64> = y
            .iter()
            .map(|&l| if l { r.gen_range(1.0..2.0) } else { r.gen_range(-1.0..0.5) })
            .collect();
        let m = (
            average_precision(&s, &y).unwrap(),
            eer(&s, &y).unwrap(),
            auc(&s, &y).unwrap(),
        );
        ensure!(m == (1.0, 0.0, 1.0), "separated scores gave {m:?}");
    }

    let mut r = rng(99);
    let n = 4000;
    let s: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
    let y: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
    let a = auc(&s, &y).unwrap();
    ensure!((a - 0.5).abs() < 3.0 / (n as f64).sqrt(), "shuffled AUC {a}");
    Ok(format!("brute-force gap {worst:.1e}, shuffled AUC {a:.4}"))
}

/// Statistics from a corpus of one repeated keyword.
pub fn degenerate_corpus() -> Outcome {
    let dims = toy_dims();
    let schedule = PrefixSchedule::new(dims.embed, 3).unwrap();
    let word = TokenSequence::new(vec![1, 2, 3]).unwrap();
    let texts = vec![&word; 10];
    let main = ProxyBinomialDeviance::default();
    let corpus = toy_corpus(4, 2, 2);
    let batch = sample_batch(&corpus, 3, &mut rng(1)).unwrap();
    let d = dims.embed as f64;
    for seed in 0..3 {
        let params = EncoderParams::init(dims, seed).unwrap();
        let heads = epoch_refresh(&params, &texts, &schedule, 1).map_err(|e| e.to_string())?;
        let off = heads
            .a_bar
            .data()
            .iter()
            .map(|&x| (x - 1.0 / d).abs())
            .fold(0.0, f64::max);
        ensure!(off <= 1e-12, "dependency entries off 1/D by {off:e}");
        let u = infer_text(&params, &word).unwrap();
        for &k in schedule.prefix_dims() {
            let t = heads.compress(&u, k).unwrap();
            ensure!(t.data().iter().all(|x| x.abs() < 1e-14), "teacher at {k} is {:?}", t.data());
        }
        for strategy in Strategy::ALL {
            let ctx = StepContext {
                schedule: &schedule,
                heads: Some(&heads),
                main_loss: &main,
                alignment: AlignmentConfig::default(),
                strategy,
                epoch: 3,
                warmup_epochs: 1,
                lambda_plateau: 0.5,
                teacher_text: None,
            };
            let out = training_step(&params, &batch, &ctx).map_err(|e| e.to_string())?;
            ensure!(
                out.breakdown.is_finite() && out.grads.is_finite(),
                "{strategy} produced non-finite values"
            );
        }
    }
    Ok("uniform dependency, zero teachers, finite steps".into())
}
