//! Synthetic keyword corpus.
//!
//! Keywords are phoneme strings over a fixed inventory. Every phoneme has a
//! random prototype feature vector; an utterance repeats each prototype for
//! a random duration and adds a per-speaker offset plus white noise. Text
//! inputs carry no noise: a keyword always has the same token sequence.

use crate::binio::{get_f64s, get_u32, get_u64, put_f64s, put_u32, put_u64};
use crate::encoders::{FeatureSequence, TokenSequence};
use crate::error::{MateError, Result};
use crate::matryoshka::Batch;
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, Read, Write};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub num_keywords: usize,
    pub num_phonemes: usize,
    pub feature_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of keywords that belong to a one-substitution pair.
    pub confusable_fraction: f64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            num_keywords: 200,
            num_phonemes: 40,
            feature_dim: 20,
            min_len: 3,
            max_len: 10,
            confusable_fraction: 0.2,
        }
    }
}

impl VocabConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_keywords < 2 {
            return Err(MateError::param("need at least 2 keywords"));
        }
        if self.num_phonemes < 2 {
            return Err(MateError::param("need at least 2 phonemes"));
        }
        if self.feature_dim == 0 {
            return Err(MateError::param("feature_dim must be positive"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(MateError::param(format!(
                "invalid keyword length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.confusable_fraction) {
            return Err(MateError::param("confusable_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Number of distinct sequences the length range admits (saturating).
    pub fn capacity(&self) -> usize {
        (self.min_len..=self.max_len).fold(0usize, |acc, len| {
            let n = (0..len).fold(1usize, |p, _| p.saturating_mul(self.num_phonemes));
            acc.saturating_add(n)
        })
    }
}

/// Keyword phoneme strings plus the shared phoneme prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct KeywordVocab {
    pub keywords: Vec<TokenSequence>,
    /// `P × F`
    pub prototypes: Tensor,
    pub seed: u64,
    partners: Vec<Vec<usize>>,
}

impl KeywordVocab {
    pub fn new(keywords: Vec<TokenSequence>, prototypes: Tensor, seed: u64) -> Result<Self> {
        let (p, _) = prototypes.dims2("prototypes")?;
        let mut seen = HashSet::new();
        for k in &keywords {
            if !seen.insert(k) {
                return Err(MateError::param("duplicate keyword in vocabulary"));
            }
            if k.tokens().iter().any(|&t| t as usize >= p) {
                return Err(MateError::param("keyword uses a phoneme outside the inventory"));
            }
        }
        let partners = one_substitution_partners(&keywords);
        Ok(Self {
            keywords,
            prototypes,
            seed,
            partners,
        })
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    pub fn num_phonemes(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    /// Keywords that differ from keyword `i` in exactly one position.
    pub fn partners(&self, i: usize) -> &[usize] {
        &self.partners[i]
    }
}

fn hamming_one(a: &[u32], b: &[u32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).filter(|(x, y)| x != y).count() == 1
}

fn one_substitution_partners(keywords: &[TokenSequence]) -> Vec<Vec<usize>> {
    let mut partners = vec![Vec::new(); keywords.len()];
    for i in 0..keywords.len() {
        for j in i + 1..keywords.len() {
            if hamming_one(keywords[i].tokens(), keywords[j].tokens()) {
                partners[i].push(j);
                partners[j].push(i);
            }
        }
    }
    partners
}

fn random_word(cfg: &VocabConfig, r: &mut StreamRng) -> Vec<u32> {
    let len = r.gen_range(cfg.min_len..=cfg.max_len);
    (0..len)
        .map(|_| r.gen_range(0..cfg.num_phonemes as u32))
        .collect()
}

fn generate_keywords(
    cfg: &VocabConfig,
    r: &mut StreamRng,
    exclude: &HashSet<TokenSequence>,
) -> Result<Vec<TokenSequence>> {
    cfg.validate()?;
    let available = cfg.capacity().saturating_sub(exclude.len());
    if cfg.num_keywords > available {
        return Err(MateError::param(format!(
            "{} keywords requested but only {available} distinct sequences exist",
            cfg.num_keywords
        )));
    }
    let mut used: HashSet<Vec<u32>> = exclude.iter().map(|t| t.tokens().to_vec()).collect();
    let mut words: Vec<Vec<u32>> = Vec::with_capacity(cfg.num_keywords);
    let budget = 1000 * cfg.num_keywords + 10_000;
    let mut attempts = 0;
    let mut bump = || {
        attempts += 1;
        if attempts > budget {
            Err(MateError::param("could not draw enough distinct keywords"))
        } else {
            Ok(())
        }
    };

    let n_pairs = ((cfg.confusable_fraction * cfg.num_keywords as f64) / 2.0).ceil() as usize;
    let n_pairs = n_pairs.min(cfg.num_keywords / 2);
    while words.len() < 2 * n_pairs {
        bump()?;
        let base = random_word(cfg, r);
        if used.contains(&base) {
            continue;
        }
        let pos = r.gen_range(0..base.len());
        let shift = r.gen_range(1..cfg.num_phonemes as u32);
        let mut partner = base.clone();
        partner[pos] = (partner[pos] + shift) % cfg.num_phonemes as u32;
        if used.contains(&partner) {
            continue;
        }
        used.insert(base.clone());
        used.insert(partner.clone());
        words.push(base);
        words.push(partner);
    }
    while words.len() < cfg.num_keywords {
        bump()?;
        let w = random_word(cfg, r);
        if used.insert(w.clone()) {
            words.push(w);
        }
    }
    words.into_iter().map(TokenSequence::new).collect()
}

/// Prototypes and keywords from `seed`.
pub fn generate_vocab(cfg: &VocabConfig, seed: u64) -> Result<KeywordVocab> {
    cfg.validate()?;
    let mut pr = rng::stream(seed, "prototypes", 0);
    let protos = (0..cfg.num_phonemes * cfg.feature_dim)
        .map(|_| pr.sample::<f64, _>(StandardNormal))
        .collect();
    let prototypes = Tensor::matrix(cfg.num_phonemes, cfg.feature_dim, protos)?;
    let mut kr = rng::stream(seed, "keywords", 0);
    let keywords = generate_keywords(cfg, &mut kr, &HashSet::new())?;
    KeywordVocab::new(keywords, prototypes, seed)
}

/// Keywords disjoint from `train`, sharing its phoneme prototypes.
pub fn generate_heldout_vocab(
    train: &KeywordVocab,
    cfg: &VocabConfig,
    seed: u64,
) -> Result<KeywordVocab> {
    if cfg.num_phonemes != train.num_phonemes() || cfg.feature_dim != train.feature_dim() {
        return Err(MateError::param(
            "held-out vocabulary must share the phoneme inventory",
        ));
    }
    let exclude: HashSet<TokenSequence> = train.keywords.iter().cloned().collect();
    let mut kr = rng::stream(seed, "heldout_keywords", 0);
    let keywords = generate_keywords(cfg, &mut kr, &exclude)?;
    KeywordVocab::new(keywords, train.prototypes.clone(), seed)
}

/// Per-speaker additive feature offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerBank {
    pub offsets: Vec<Vec<f64>>,
}

impl SpeakerBank {
    pub fn generate(num: usize, feature_dim: usize, sd: f64, seed: u64, stream: &str) -> Result<Self> {
        if num == 0 {
            return Err(MateError::param("need at least one speaker"));
        }
        if !(sd >= 0.0) {
            return Err(MateError::param("speaker sd must be nonnegative"));
        }
        let mut r = rng::stream(seed, stream, 0);
        let offsets = (0..num)
            .map(|_| {
                (0..feature_dim)
                    .map(|_| sd * r.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Ok(Self { offsets })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub noise_sd: f64,
    pub speaker_sd: f64,
    pub min_dur: usize,
    pub max_dur: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            noise_sd: 0.3,
            speaker_sd: 0.1,
            min_dur: 2,
            max_dur: 6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sd >= 0.0) || !(self.speaker_sd >= 0.0) {
            return Err(MateError::param("noise and speaker sd must be nonnegative"));
        }
        if self.min_dur == 0 || self.min_dur > self.max_dur {
            return Err(MateError::param(format!(
                "invalid duration range [{}, {}]",
                self.min_dur, self.max_dur
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUtterance {
    pub features: FeatureSequence,
    pub keyword_id: usize,
    pub speaker: usize,
    pub speaker_offset: Vec<f64>,
    pub noise_seed: u64,
}

/// Features for one keyword: each phoneme prototype repeated for a random
/// duration, plus the speaker offset and `N(0, noise_sd²)` per entry.
pub fn synth_audio<R: Rng>(
    vocab: &KeywordVocab,
    keyword_id: usize,
    speaker_offset: &[f64],
    cfg: &SynthConfig,
    r: &mut R,
) -> Result<FeatureSequence> {
    cfg.validate()?;
    let word = vocab
        .keywords
        .get(keyword_id)
        .ok_or_else(|| MateError::param(format!("keyword {keyword_id} not in vocabulary")))?;
    let f = vocab.feature_dim();
    if speaker_offset.len() != f {
        return Err(MateError::param("speaker offset width differs from feature width"));
    }
    let mut frames = Vec::new();
    let mut n = 0;
    for &ph in word.tokens() {
        let dur = r.gen_range(cfg.min_dur..=cfg.max_dur);
        let proto = vocab.prototypes.row(ph as usize);
        for _ in 0..dur {
            for (p, o) in proto.iter().zip(speaker_offset) {
                let eps: f64 = r.sample(StandardNormal);
                frames.push(p + o + cfg.noise_sd * eps);
            }
            n += 1;
        }
    }
    FeatureSequence::new(Tensor::matrix(n, f, frames)?)
}

/// Utterance `index` of a corpus, drawn from its own counter-addressed stream.
pub fn synth_utterance(
    vocab: &KeywordVocab,
    speakers: &SpeakerBank,
    keyword_id: usize,
    cfg: &SynthConfig,
    seed: u64,
    stream: &str,
    index: u64,
) -> Result<SyntheticUtterance> {
    let noise_seed = rng::stream_key(seed, stream, index);
    let mut r = ChaCha8Rng::seed_from_u64(noise_seed);
    let speaker = r.gen_range(0..speakers.len());
    let offset = speakers.offsets[speaker].clone();
    let features = synth_audio(vocab, keyword_id, &offset, cfg, &mut r)?;
    Ok(SyntheticUtterance {
        features,
        keyword_id,
        speaker,
        speaker_offset: offset,
        noise_seed,
    })
}

/// A vocabulary with a pool of utterances per keyword.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: KeywordVocab,
    pub utterances: Vec<SyntheticUtterance>,
    by_keyword: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn new(vocab: KeywordVocab, utterances: Vec<SyntheticUtterance>) -> Result<Self> {
        let mut by_keyword = vec![Vec::new(); vocab.len()];
        for (i, u) in utterances.iter().enumerate() {
            by_keyword
                .get_mut(u.keyword_id)
                .ok_or_else(|| MateError::param("utterance keyword outside vocabulary"))?
                .push(i);
        }
        Ok(Self {
            vocab,
            utterances,
            by_keyword,
        })
    }

    /// `per_keyword` utterances for every keyword, in keyword order.
    pub fn synthesize(
        vocab: KeywordVocab,
        speakers: &SpeakerBank,
        per_keyword: usize,
        cfg: &SynthConfig,
        seed: u64,
        stream: &str,
    ) -> Result<Self> {
        let mut utts = Vec::with_capacity(vocab.len() * per_keyword);
        for k in 0..vocab.len() {
            for j in 0..per_keyword {
                let index = (k * per_keyword + j) as u64;
                utts.push(synth_utterance(&vocab, speakers, k, cfg, seed, stream, index)?);
            }
        }
        Self::new(vocab, utts)
    }

    pub fn utterances_of(&self, keyword: usize) -> &[usize] {
        &self.by_keyword[keyword]
    }

    pub fn text(&self, keyword: usize) -> &TokenSequence {
        &self.vocab.keywords[keyword]
    }
}

/// `keywords_per_batch` distinct keywords with exactly two utterances each.
pub fn sample_batch<'a, R: Rng>(
    corpus: &'a Corpus,
    keywords_per_batch: usize,
    r: &mut R,
) -> Result<Batch<'a>> {
    let v = corpus.vocab.len();
    if keywords_per_batch == 0 || keywords_per_batch > v {
        return Err(MateError::param(format!(
            "cannot draw {keywords_per_batch} keywords from a vocabulary of {v}"
        )));
    }
    let keys = sample(r, v, keywords_per_batch);
    let mut batch = Batch {
        audio: Vec::with_capacity(2 * keywords_per_batch),
        text: Vec::with_capacity(2 * keywords_per_batch),
        labels: Vec::with_capacity(2 * keywords_per_batch),
    };
    for k in keys.iter() {
        let pool = corpus.utterances_of(k);
        if pool.len() < 2 {
            return Err(MateError::param(format!(
                "keyword {k} has {} utterances; need 2",
                pool.len()
            )));
        }
        for j in sample(r, pool.len(), 2).iter() {
            let u = &corpus.utterances[pool[j]];
            batch.audio.push(&u.features);
            batch.text.push(corpus.text(k));
            batch.labels.push(k);
        }
    }
    Ok(batch)
}

const CORPUS_MAGIC: &[u8; 8] = b"MATECORP";
const CORPUS_VERSION: u32 = 1;

/// Writes a corpus as: header, vocabulary, prototypes, then one record per
/// utterance. All integers are little-endian `u32` (seeds `u64`), all
/// values little-endian `f64`. See the repository README for the layout.
pub fn write_corpus(corpus: &Corpus, w: &mut impl Write) -> Result<()> {
    let vocab = &corpus.vocab;
    w.write_all(CORPUS_MAGIC)?;
    put_u32(w, CORPUS_VERSION as usize)?;
    put_u32(w, vocab.num_phonemes())?;
    put_u32(w, vocab.feature_dim())?;
    put_u32(w, vocab.len())?;
    put_u32(w, corpus.utterances.len())?;
    put_u64(w, vocab.seed)?;
    for k in &vocab.keywords {
        put_u32(w, k.len())?;
        for &t in k.tokens() {
            w.write_all(&t.to_le_bytes())?;
        }
    }
    put_f64s(w, vocab.prototypes.data())?;
    for u in &corpus.utterances {
        put_u32(w, u.keyword_id)?;
        put_u32(w, u.speaker)?;
        put_u64(w, u.noise_seed)?;
        put_u32(w, u.features.len())?;
        put_f64s(w, &u.speaker_offset)?;
        put_f64s(w, u.features.frames().data())?;
    }
    Ok(())
}

pub fn read_corpus(r: &mut impl Read) -> Result<Corpus> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CORPUS_MAGIC {
        return Err(MateError::Format("not a corpus file".into()));
    }
    let version = get_u32(r)?;
    if version != CORPUS_VERSION as usize {
        return Err(MateError::Format(format!("unsupported corpus version {version}")));
    }
    let p = get_u32(r)?;
    let f = get_u32(r)?;
    let nk = get_u32(r)?;
    let nu = get_u32(r)?;
    let seed = get_u64(r)?;
    let mut keywords = Vec::with_capacity(nk);
    for _ in 0..nk {
        let len = get_u32(r)?;
        let toks = (0..len)
            .map(|_| get_u32(r).map(|t| t as u32))
            .collect::<Result<Vec<_>>>()?;
        keywords.push(TokenSequence::new(toks)?);
    }
    let prototypes = Tensor::matrix(p, f, get_f64s(r, p * f)?)?;
    let vocab = KeywordVocab::new(keywords, prototypes, seed)?;
    let mut utts = Vec::with_capacity(nu);
    for _ in 0..nu {
        let keyword_id = get_u32(r)?;
        let speaker = get_u32(r)?;
        let noise_seed = get_u64(r)?;
        let frames = get_u32(r)?;
        let speaker_offset = get_f64s(r, f)?;
        let features = FeatureSequence::new(Tensor::matrix(frames, f, get_f64s(r, frames * f)?)?)?;
        utts.push(SyntheticUtterance {
            features,
            keyword_id,
            speaker,
            speaker_offset,
            noise_seed,
        });
    }
    Corpus::new(vocab, utts)
}

/// One keyword per line, phoneme IDs separated by single spaces.
pub fn write_vocab_listing(vocab: &KeywordVocab, w: &mut impl Write) -> Result<()> {
    for k in &vocab.keywords {
        let line: Vec<String> = k.tokens().iter().map(u32::to_string).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_vocab_listing(r: impl BufRead) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks = line
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| MateError::Format(format!("line {}: bad phoneme id `{t}`", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(TokenSequence::new(toks)?);
    }
    Ok(out)
}
