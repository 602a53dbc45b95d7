//! Training loop, optimizer and run records.
//!
//! Randomness comes from three named streams so that changing the strategy
//! never shifts what the other parts draw: the data generator, parameter
//! initialization, and the batch sampler (one stream per epoch).

use crate::config::{hex, OptimizerConfig, RunConfig};
use crate::data::{generate_heldout_vocab, generate_vocab, sample_batch, Corpus, SpeakerBank};
use crate::encoders::{EncoderDims, EncoderParams, TokenSequence};
use crate::error::{MateError, Result};
use crate::eval::{build_trials, evaluate, MetricsReport, TrialSet};
use crate::matryoshka::{epoch_refresh, EpochHeads, StatsGranularity, StepContext};
use crate::matryoshka::training_step;
use crate::objectives::{lambda_schedule, PrefixAlignment};
use crate::rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::time::Instant;

/// Adam with decoupled weight decay.
///
/// Each step first shrinks the parameters by `1 - lr * weight_decay`, then
/// applies the bias-corrected moment update.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: EncoderParams,
    v: EncoderParams,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, dims: EncoderDims) -> Result<Self> {
        Ok(Self {
            cfg,
            m: EncoderParams::zeros(dims)?,
            v: EncoderParams::zeros(dims)?,
            t: 0,
        })
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams) -> Result<()> {
        if params.dims != grads.dims || params.dims != self.m.dims {
            return Err(MateError::usage("optimizer, parameter and gradient shapes differ"));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let shrink = 1.0 - c.lr * c.weight_decay;
        let gb = grads.blocks();
        let mb = self.m.blocks_mut();
        let vb = self.v.blocks_mut();
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .blocks_mut()
            .into_iter()
            .zip(gb)
            .zip(mb.into_iter().zip(vb))
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] * shrink - c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Training corpus, held-out corpus and its trials.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Corpus,
    pub test: Corpus,
    pub trials: TrialSet,
}

pub fn build_datasets(cfg: &RunConfig, seed: u64) -> Result<Datasets> {
    let synth = cfg.synth_config();
    let f = cfg.model.features;
    let d = &cfg.data;
    let vocab = generate_vocab(&cfg.vocab_config(), seed)?;
    let test_vocab = generate_heldout_vocab(&vocab, &cfg.test_vocab_config(), seed)?;
    let speakers = SpeakerBank::generate(d.speakers, f, d.speaker_sd, seed, "speakers")?;
    let test_speakers = SpeakerBank::generate(d.speakers, f, d.speaker_sd, seed, "test_speakers")?;
    let train = Corpus::synthesize(vocab, &speakers, d.utterances_per_keyword, &synth, seed, "train_utts")?;
    let test = Corpus::synthesize(
        test_vocab,
        &test_speakers,
        d.test_utterances_per_keyword,
        &synth,
        seed,
        "test_utts",
    )?;
    let trials = build_trials(&test, cfg.eval.negative_ratio, cfg.eval.hard_fraction, seed)?;
    Ok(Datasets { train, test, trials })
}

/// Statistics corpus for the dependency estimate.
pub fn stats_texts(corpus: &Corpus, granularity: StatsGranularity) -> Vec<&TokenSequence> {
    match granularity {
        StatsGranularity::Keyword => corpus.vocab.keywords.iter().collect(),
        StatsGranularity::Utterance => corpus
            .utterances
            .iter()
            .map(|u| corpus.text(u.keyword_id))
            .collect(),
    }
}

/// Loss components averaged over an epoch's steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lambda: f64,
    pub main: f64,
    pub align_total: f64,
    pub align_per_prefix: Vec<PrefixAlignment>,
    pub total: f64,
    pub top_singular_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_fingerprint: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub evals: Vec<MetricsReport>,
    /// Excluded from [`RunRecord::fingerprint`].
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Content hash over everything except wall-clock time.
    pub fn fingerprint(&self) -> String {
        let content = serde_json::to_string(&(
            &self.config_fingerprint,
            self.seed,
            &self.epochs,
            &self.evals,
        ))
        .expect("record serializes");
        hex(&Sha256::digest(content.as_bytes()))
    }

    pub fn final_eval(&self) -> Option<&MetricsReport> {
        self.evals.last()
    }
}

pub struct TrainOutcome {
    pub params: EncoderParams,
    pub heads: EpochHeads,
    pub record: RunRecord,
}

/// Trains with the config's own seed.
pub fn train(cfg: &RunConfig, data: &Datasets) -> Result<TrainOutcome> {
    train_with(cfg, data, |_, _| {})
}

/// Trains, calling `on_epoch(epoch, params)` after every epoch's updates.
pub fn train_with(
    cfg: &RunConfig,
    data: &Datasets,
    mut on_epoch: impl FnMut(usize, &EncoderParams),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let seed = cfg.seed;
    let schedule = cfg.prefix_schedule()?;
    let main_loss = cfg.main_loss.build();
    let warmup = cfg.warmup();
    let steps = cfg.steps_per_epoch();
    let texts = stats_texts(&data.train, cfg.matryoshka.stats);
    let fingerprint = cfg.fingerprint();

    let mut params = EncoderParams::init(cfg.model, seed)?;
    let mut opt = AdamW::new(cfg.optimizer, cfg.model)?;
    let mut record = RunRecord {
        config_fingerprint: fingerprint.clone(),
        seed,
        epochs: Vec::new(),
        evals: Vec::new(),
        wall_clock_secs: 0.0,
    };
    let mut last_heads = None;

    for epoch in 1..=cfg.schedule.total_epochs {
        let heads = epoch_refresh(&params, &texts, &schedule, epoch)?;
        let ctx = StepContext {
            schedule: &schedule,
            heads: Some(&heads),
            main_loss: main_loss.as_ref(),
            alignment: cfg.alignment,
            strategy: cfg.matryoshka.strategy,
            epoch,
            warmup_epochs: warmup,
            lambda_plateau: cfg.schedule.lambda_plateau,
            teacher_text: None,
        };
        let mut sampler = rng::stream(seed, "sampler", epoch as u64);
        let mut acc = EpochRecord {
            epoch,
            steps,
            lambda: lambda_schedule(epoch, warmup, cfg.schedule.lambda_plateau)?,
            main: 0.0,
            align_total: 0.0,
            align_per_prefix: Vec::new(),
            total: 0.0,
            top_singular_value: heads.svd.s[0],
        };
        for step in 0..steps {
            let batch = sample_batch(&data.train, cfg.batch.keywords_per_batch, &mut sampler)?;
            let out = training_step(&params, &batch, &ctx)?;
            let b = &out.breakdown;
            if !b.is_finite() || !out.grads.is_finite() {
                return Err(MateError::numeric(format!(
                    "non-finite loss or gradient at epoch {epoch}, step {}: {}",
                    step + 1,
                    serde_json::to_string(b).unwrap_or_default()
                )));
            }
            acc.main += b.main;
            acc.align_total += b.align_total;
            acc.total += b.total;
            if acc.align_per_prefix.is_empty() {
                acc.align_per_prefix = b.align_per_prefix.clone();
            } else {
                for (a, x) in acc.align_per_prefix.iter_mut().zip(&b.align_per_prefix) {
                    a.audio += x.audio;
                    a.text += x.text;
                }
            }
            opt.step(&mut params, &out.grads)?;
        }
        let n = steps as f64;
        acc.main /= n;
        acc.align_total /= n;
        acc.total /= n;
        for a in &mut acc.align_per_prefix {
            a.audio /= n;
            a.text /= n;
        }
        log::info!(
            "epoch {epoch:>3}  lambda {:.2}  main {:.5}  align {:.5}  total {:.5}",
            acc.lambda,
            acc.main,
            acc.align_total,
            acc.total
        );
        record.epochs.push(acc);
        on_epoch(epoch, &params);

        if !params.is_finite() {
            return Err(MateError::numeric(format!(
                "parameters became non-finite after epoch {epoch}"
            )));
        }
        if epoch % cfg.schedule.eval_every == 0 || epoch == cfg.schedule.total_epochs {
            let report = evaluate(&params, &data.test, &data.trials, &schedule, &fingerprint, epoch)?;
            log::info!(
                "epoch {epoch:>3}  eval  AP {:.4}  EER {:.4}  AUC {:.4}",
                report.full().ap,
                report.full().eer,
                report.full().auc
            );
            record.evals.push(report);
        }
        last_heads = Some(heads);
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        params,
        heads: last_heads.expect("at least one epoch"),
        record,
    })
}
