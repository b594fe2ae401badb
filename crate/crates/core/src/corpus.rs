//! Data model, file formats, and the deterministic synthetic corpus
//! generator that stands in for a pretrained audio encoder.
//!
//! The toy encoder maps every transcript token to its frozen embedding,
//! repeats it 1..=3 times, adds Gaussian noise, and interleaves filler
//! frames. A term is "present" in an utterance exactly when its token
//! ids occur as a contiguous subsequence of the transcript, which keeps
//! every label checkable by a substring scan.

use crate::error::{EngineError, Result};
use crate::numerics::Tensor2;
use crate::seeds;
use crate::training::CurriculumStage;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Frame matrix h_s (T x d) with a validity mask (valid prefix).
#[derive(Debug, Clone)]
pub struct SpeechFeatures {
    pub utterance_id: String,
    pub frames: Tensor2,
    pub frame_mask: Vec<bool>,
}

impl SpeechFeatures {
    /// All frames valid.
    pub fn full(utterance_id: String, frames: Tensor2) -> Self {
        let frame_mask = vec![true; frames.rows];
        SpeechFeatures {
            utterance_id,
            frames,
            frame_mask,
        }
    }

    pub fn valid_frames(&self) -> usize {
        self.frame_mask.iter().filter(|m| **m).count()
    }
}

/// Token matrix h_t (L x d) with a validity mask, per candidate term.
#[derive(Debug, Clone)]
pub struct TermFeatures {
    pub term_id: u64,
    pub tokens: Tensor2,
    pub token_mask: Vec<bool>,
    pub surface: String,
}

impl TermFeatures {
    pub fn valid_tokens(&self) -> usize {
        self.token_mask.iter().filter(|m| **m).count()
    }
}

/// Annotated positive term occurrence: span is [start, end) in tokens.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TermSpan {
    pub term_id: u64,
    pub span: (usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Utterance {
    pub id: String,
    pub token_ids: Vec<u32>,
    pub positive_terms: Vec<TermSpan>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TermEntry {
    pub term_id: u64,
    pub src: String,
    pub tgt: String,
    pub token_ids: Vec<u32>,
}

/// Indexed collection of candidate terms.
#[derive(Debug, Clone, Default)]
pub struct TermBank {
    pub entries: Vec<TermEntry>,
}

impl TermBank {
    /// Validates uniqueness: term ids, token-id sequences, and surfaces
    /// must all be unique; token sequences must be non-empty.
    pub fn new(entries: Vec<TermEntry>) -> Result<Self> {
        let mut ids = std::collections::HashSet::new();
        let mut seqs = std::collections::HashSet::new();
        let mut surfaces = std::collections::HashSet::new();
        for e in &entries {
            if e.token_ids.is_empty() {
                return Err(EngineError::Config(format!(
                    "term {} has an empty token sequence",
                    e.term_id
                )));
            }
            if !ids.insert(e.term_id) {
                return Err(EngineError::Config(format!(
                    "duplicate term id {} in bank",
                    e.term_id
                )));
            }
            if !seqs.insert(e.token_ids.clone()) {
                return Err(EngineError::Config(format!(
                    "duplicate token sequence for term {} in bank",
                    e.term_id
                )));
            }
            if !surfaces.insert(e.src.clone()) {
                return Err(EngineError::Config(format!(
                    "duplicate surface {:?} with distinct ids in bank",
                    e.src
                )));
            }
        }
        Ok(TermBank { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Cache token features for every entry (frozen embedding lookup).
    pub fn to_features(&self, emb: &EmbeddingTable) -> Vec<TermFeatures> {
        self.entries
            .iter()
            .map(|e| emb.term_features(e.term_id, &e.token_ids, &e.src))
            .collect()
    }
}

/// Deterministic toy encoder configuration. Same seed + config gives a
/// byte-identical corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ToyEncoderConfig {
    pub vocab_size: u32,
    pub embed_dim: usize,
    pub frames_per_token: (usize, usize),
    pub noise_sigma: f32,
    pub filler_rate: f32,
    /// Strength of the shared direction added to term-region embeddings
    /// (as a fraction of the typical embedding norm). Real pretrained
    /// encoders give rare domain vocabulary a recognizably distinct
    /// representation statistics; this reproduces that property so term
    /// presence is learnable from pooled attention output.
    pub term_bias: f32,
    pub seed: u64,
    /// Base transcript length range (common-region tokens, before terms
    /// are planted).
    pub utt_len: (usize, usize),
    /// Planted bank terms per utterance.
    pub terms_per_utt: (usize, usize),
    /// Length mix for generated bank terms (weights for 1..=4 tokens).
    pub term_len_mix: [f64; 4],
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        ToyEncoderConfig {
            vocab_size: 500,
            embed_dim: 64,
            frames_per_token: (1, 3),
            noise_sigma: 0.5,
            filler_rate: 0.15,
            term_bias: 0.8,
            seed: 0,
            utt_len: (10, 18),
            terms_per_utt: (1, 3),
            term_len_mix: [0.25, 0.3, 0.25, 0.2],
        }
    }
}

impl ToyEncoderConfig {
    /// First token id of the term-vocabulary region (top fifth of the
    /// vocabulary). Transcript filler text draws from below this bound,
    /// terms from at or above it, so terms behave like rare domain
    /// vocabulary rather than everyday words.
    pub fn term_region_start(&self) -> u32 {
        self.vocab_size - self.vocab_size / 5
    }
}

/// Frozen embedding table shared by the toy encoder (speech side) and
/// the term lookup (text side). Never trained.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub table: Tensor2,
}

impl EmbeddingTable {
    pub fn from_config(cfg: &ToyEncoderConfig) -> Self {
        let d = cfg.embed_dim;
        let mut rng = seeds::stream(cfg.seed, "embeddings");
        let normal = Normal::new(0.0, 1.0).unwrap();
        let data: Vec<f32> = (0..cfg.vocab_size as usize * d)
            .map(|_| normal.sample(&mut rng) as f32)
            .collect();
        let mut table = Tensor2::from_vec(cfg.vocab_size as usize, d, data);
        // Shared component for the term-vocabulary region, scaled so its
        // norm is term_bias times the typical embedding norm (sqrt(d)).
        let mut dir_rng = seeds::stream(cfg.seed, "term-direction");
        let mut dir: Vec<f64> = (0..d).map(|_| normal.sample(&mut dir_rng)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let scale = cfg.term_bias as f64 * (d as f64).sqrt() / norm;
        for x in &mut dir {
            *x *= scale;
        }
        for t in cfg.term_region_start()..cfg.vocab_size {
            for (j, b) in dir.iter().enumerate() {
                let v = table.get(t as usize, j) + *b as f32;
                table.set(t as usize, j, v);
            }
        }
        EmbeddingTable { table }
    }

    pub fn from_tensor(table: Tensor2) -> Self {
        EmbeddingTable { table }
    }

    pub fn dim(&self) -> usize {
        self.table.cols
    }

    pub fn lookup(&self, token_ids: &[u32]) -> Tensor2 {
        let d = self.table.cols;
        let mut out = Tensor2::zeros(token_ids.len(), d);
        for (i, &t) in token_ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.table.row(t as usize));
        }
        out
    }

    pub fn term_features(&self, term_id: u64, token_ids: &[u32], surface: &str) -> TermFeatures {
        TermFeatures {
            term_id,
            tokens: self.lookup(token_ids),
            token_mask: vec![true; token_ids.len()],
            surface: surface.to_string(),
        }
    }
}

/// A corpus split held in memory: utterances plus their features.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub features: Vec<SpeechFeatures>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

fn surface_of(token_ids: &[u32]) -> String {
    let parts: Vec<String> = token_ids.iter().map(|t| format!("w{t}")).collect();
    parts.join("-")
}

fn target_surface_of(token_ids: &[u32]) -> String {
    let parts: Vec<String> = token_ids.iter().map(|t| format!("W{t}")).collect();
    parts.join("-")
}

/// Contiguous-subsequence scan; the label oracle for term presence.
pub fn contains_subsequence(haystack: &[u32], needle: &[u32]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

fn sample_term_len(mix: &[f64; 4], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = mix.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (i, w) in mix.iter().enumerate() {
        if x < *w {
            return i + 1;
        }
        x -= w;
    }
    4
}

/// Generate `bank_size` unique terms from the term-vocabulary region.
pub fn generate_bank(cfg: &ToyEncoderConfig, bank_size: usize, rng: &mut ChaCha8Rng) -> Result<TermBank> {
    generate_terms(cfg, bank_size, 0, rng, &mut std::collections::HashSet::new())
}

fn generate_terms(
    cfg: &ToyEncoderConfig,
    n: usize,
    id_offset: u64,
    rng: &mut ChaCha8Rng,
    taken: &mut std::collections::HashSet<Vec<u32>>,
) -> Result<TermBank> {
    let lo = cfg.term_region_start();
    let hi = cfg.vocab_size;
    let mut entries = Vec::with_capacity(n);
    let max_attempts = 200 * n + 1000;
    let mut attempts = 0;
    while entries.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(EngineError::Capacity(format!(
                "requested {n} terms but only constructed {} distinct sequences from \
                 token region [{lo}, {hi})",
                entries.len()
            )));
        }
        let len = sample_term_len(&cfg.term_len_mix, rng);
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
        if !taken.insert(ids.clone()) {
            continue;
        }
        let term_id = id_offset + entries.len() as u64;
        entries.push(TermEntry {
            term_id,
            src: surface_of(&ids),
            tgt: target_surface_of(&ids),
            token_ids: ids,
        });
    }
    TermBank::new(entries)
}

/// Generate utterances that each plant a few bank terms, plus their
/// toy-encoded features.
pub fn generate_utterances(
    cfg: &ToyEncoderConfig,
    bank: &TermBank,
    n: usize,
    split: &str,
    rng: &mut ChaCha8Rng,
) -> Corpus {
    let common_hi = cfg.term_region_start();
    let mut utterances = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    for u in 0..n {
        let id = format!("{split}-{u:05}");
        let base_len = rng.gen_range(cfg.utt_len.0..=cfg.utt_len.1);
        let base: Vec<u32> = (0..base_len).map(|_| rng.gen_range(0..common_hi)).collect();

        let n_terms = rng.gen_range(cfg.terms_per_utt.0..=cfg.terms_per_utt.1).min(bank.len());
        let mut picked: Vec<usize> = (0..bank.len()).collect();
        picked.shuffle(rng);
        picked.truncate(n_terms);
        // insertion points in the base sequence, assembled left to right
        let mut inserts: Vec<(usize, usize)> = picked
            .iter()
            .map(|&b| (rng.gen_range(0..=base_len), b))
            .collect();
        inserts.sort_by_key(|&(pos, _)| pos);

        let mut token_ids = Vec::new();
        let mut positive_terms = Vec::new();
        let mut next = inserts.into_iter().peekable();
        for (i, &tok) in base.iter().enumerate() {
            while let Some(&(pos, b)) = next.peek() {
                if pos != i {
                    break;
                }
                next.next();
                let entry = &bank.entries[b];
                let start = token_ids.len();
                token_ids.extend_from_slice(&entry.token_ids);
                positive_terms.push(TermSpan {
                    term_id: entry.term_id,
                    span: (start, token_ids.len()),
                });
            }
            token_ids.push(tok);
        }
        for (_, b) in next {
            let entry = &bank.entries[b];
            let start = token_ids.len();
            token_ids.extend_from_slice(&entry.token_ids);
            positive_terms.push(TermSpan {
                term_id: entry.term_id,
                span: (start, token_ids.len()),
            });
        }

        let utt = Utterance {
            id: id.clone(),
            token_ids,
            positive_terms,
        };
        let frames = encode_utterance(cfg, &utt, rng);
        features.push(SpeechFeatures::full(id, frames));
        utterances.push(utt);
    }
    Corpus {
        utterances,
        features,
    }
}

/// Toy encoder: per-token embeddings repeated 1..=k times plus Gaussian
/// noise and random filler frames.
fn encode_utterance(cfg: &ToyEncoderConfig, utt: &Utterance, rng: &mut ChaCha8Rng) -> Tensor2 {
    let d = cfg.embed_dim;
    let emb = EMBED_CACHE.with(|c| {
        let mut cache = c.borrow_mut();
        if cache.as_ref().map(|(k, _)| k != &embed_key(cfg)).unwrap_or(true) {
            *cache = Some((embed_key(cfg), EmbeddingTable::from_config(cfg)));
        }
        cache.as_ref().unwrap().1.clone()
    });
    let noise = Normal::new(0.0, cfg.noise_sigma as f64).unwrap();
    let filler = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
    let mut rows: Vec<f32> = Vec::new();
    let mut n_rows = 0;
    for &tok in &utt.token_ids {
        let reps = if cfg.frames_per_token.0 == cfg.frames_per_token.1 {
            cfg.frames_per_token.0
        } else {
            rng.gen_range(cfg.frames_per_token.0..=cfg.frames_per_token.1)
        };
        for _ in 0..reps {
            let base = emb.table.row(tok as usize);
            if cfg.noise_sigma == 0.0 {
                rows.extend_from_slice(base);
            } else {
                for &v in base {
                    rows.push(v + noise.sample(rng) as f32);
                }
            }
            n_rows += 1;
        }
        if cfg.filler_rate > 0.0 && rng.gen::<f32>() < cfg.filler_rate {
            for _ in 0..d {
                rows.push(filler.sample(rng) as f32);
            }
            n_rows += 1;
        }
    }
    Tensor2::from_vec(n_rows, d, rows)
}

fn embed_key(cfg: &ToyEncoderConfig) -> (u64, u32, usize) {
    (cfg.seed, cfg.vocab_size, cfg.embed_dim)
}

thread_local! {
    static EMBED_CACHE: std::cell::RefCell<Option<((u64, u32, usize), EmbeddingTable)>> =
        const { std::cell::RefCell::new(None) };
}

/// Spec entry point: one split plus its bank.
pub fn generate_corpus(
    cfg: &ToyEncoderConfig,
    n_utterances: usize,
    bank_size: usize,
) -> Result<(Corpus, TermBank)> {
    if cfg.vocab_size < 50 {
        return Err(EngineError::Config(format!(
            "vocab_size {} < 50",
            cfg.vocab_size
        )));
    }
    if bank_size < 10 {
        return Err(EngineError::Config(format!("bank_size {bank_size} < 10")));
    }
    let mut rng = seeds::stream(cfg.seed, "bank");
    let bank = generate_bank(cfg, bank_size, &mut rng)?;
    let mut urng = seeds::stream(cfg.seed, "utterances/train");
    let corpus = generate_utterances(cfg, &bank, n_utterances, "train", &mut urng);
    Ok((corpus, bank))
}

/// Distractor terms: disjoint from the bank and absent from every
/// transcript in the given corpora.
pub fn generate_distractors(
    cfg: &ToyEncoderConfig,
    bank: &TermBank,
    corpora: &[&Corpus],
    n: usize,
) -> Result<Vec<TermEntry>> {
    let mut taken: std::collections::HashSet<Vec<u32>> = bank
        .entries
        .iter()
        .map(|e| e.token_ids.clone())
        .collect();
    let mut rng = seeds::stream(cfg.seed, "distractors");
    let id_offset = 1_000_000u64;
    let lo = cfg.term_region_start();
    let hi = cfg.vocab_size;
    // candidate sequences use only term-region tokens, so it suffices to
    // index the transcript windows made entirely of such tokens
    let mut present: std::collections::HashSet<Vec<u32>> = std::collections::HashSet::new();
    for c in corpora {
        for u in &c.utterances {
            for len in 1..=4usize {
                for w in u.token_ids.windows(len) {
                    if w.iter().all(|&t| t >= lo) {
                        present.insert(w.to_vec());
                    }
                }
            }
        }
    }
    let mut entries = Vec::with_capacity(n);
    let max_attempts = 400 * n + 1000;
    let mut attempts = 0;
    while entries.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(EngineError::Capacity(format!(
                "could not construct {n} distractors disjoint from the corpus \
                 (got {})",
                entries.len()
            )));
        }
        let len = sample_term_len(&cfg.term_len_mix, &mut rng);
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
        if taken.contains(&ids) || present.contains(&ids) {
            continue;
        }
        taken.insert(ids.clone());
        let term_id = id_offset + entries.len() as u64;
        entries.push(TermEntry {
            term_id,
            src: surface_of(&ids),
            tgt: target_surface_of(&ids),
            token_ids: ids,
        });
    }
    Ok(entries)
}

/// A positive term sampled for a curriculum stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledTerm {
    /// Bank id for real terms; None for word/phrase spans.
    pub term_id: Option<u64>,
    pub token_ids: Vec<u32>,
}

/// Stage-dependent positive sampling. Returns None when a RealTerm-stage
/// utterance has no annotated terms (skip-utterance signal).
/// Pick a start position for a span of `span_len`, preferring (p=0.9)
/// starts that land the span inside or overlapping an annotated term.
fn sample_position(utt: &Utterance, span_len: usize, rng: &mut ChaCha8Rng) -> usize {
    let len = utt.token_ids.len();
    let max_start = len - span_len.min(len);
    if !utt.positive_terms.is_empty() && rng.gen::<f64>() < 0.9 {
        let t = &utt.positive_terms[rng.gen_range(0..utt.positive_terms.len())];
        let lo = t.span.0.saturating_sub(span_len - 1).min(max_start);
        let hi = (t.span.1.saturating_sub(1)).min(max_start);
        if lo <= hi {
            return rng.gen_range(lo..=hi);
        }
    }
    rng.gen_range(0..=max_start)
}

pub fn sample_stage_terms(
    utt: &Utterance,
    stage: CurriculumStage,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<SampledTerm>> {
    debug_assert!(utt.token_ids.len() >= 4, "utterance shorter than 4 tokens");
    let len = utt.token_ids.len();
    let mut out = Vec::new();
    match stage {
        CurriculumStage::Word => {
            // Uniformly random single words from the transcript.
            for _ in 0..3 {
                let p = rng.gen_range(0..len);
                push_unique(&mut out, None, utt.token_ids[p..p + 1].to_vec());
            }
        }
        CurriculumStage::Phrase => {
            // Consecutive-word spans, biased toward annotated term spans
            // so length sensitivity is learned on term-like material.
            for _ in 0..3 {
                let span_len = rng.gen_range(1..=4usize).min(len);
                let start = sample_position(utt, span_len, rng);
                push_unique(
                    &mut out,
                    None,
                    utt.token_ids[start..start + span_len].to_vec(),
                );
            }
        }
        CurriculumStage::RealTerm => {
            if utt.positive_terms.is_empty() {
                return None;
            }
            for t in &utt.positive_terms {
                push_unique(
                    &mut out,
                    Some(t.term_id),
                    utt.token_ids[t.span.0..t.span.1].to_vec(),
                );
            }
        }
    }
    Some(out)
}

fn push_unique(out: &mut Vec<SampledTerm>, term_id: Option<u64>, token_ids: Vec<u32>) {
    if !out.iter().any(|t| t.token_ids == token_ids) {
        out.push(SampledTerm { term_id, token_ids });
    }
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

const FEATURE_MAGIC: &[u8; 4] = b"A2PF";
const FEATURE_VERSION: u16 = 1;

/// Binary feature file: magic "A2PF" | version u16 | dtype u8 (0 = f32) |
/// rows u32 | cols u32 | row-major little-endian f32 payload.
pub fn write_features(path: &Path, m: &Tensor2) -> Result<()> {
    let mut buf = Vec::with_capacity(15 + m.data.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.push(0u8);
    buf.extend_from_slice(&(m.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor2> {
    let mut f = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    read_features_bytes(&buf)
}

fn format_err(msg: impl Into<String>, offset: u64) -> EngineError {
    EngineError::Format {
        msg: msg.into(),
        offset,
    }
}

pub fn read_features_bytes(buf: &[u8]) -> Result<Tensor2> {
    if buf.len() < 15 {
        return Err(format_err("truncated header", buf.len() as u64));
    }
    if &buf[0..4] != FEATURE_MAGIC {
        return Err(format_err("bad magic (expected A2PF)", 0));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != FEATURE_VERSION {
        return Err(format_err(format!("unsupported version {version}"), 4));
    }
    if buf[6] != 0 {
        return Err(format_err(format!("unsupported dtype {}", buf[6]), 6));
    }
    let rows = u32::from_le_bytes([buf[7], buf[8], buf[9], buf[10]]) as usize;
    let cols = u32::from_le_bytes([buf[11], buf[12], buf[13], buf[14]]) as usize;
    let need = 15 + rows * cols * 4;
    if buf.len() != need {
        return Err(format_err(
            format!(
                "payload length mismatch: expected {} bytes for {rows}x{cols}, file has {}",
                need,
                buf.len()
            ),
            buf.len().min(need) as u64,
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows * cols {
        let o = 15 + i * 4;
        data.push(f32::from_le_bytes([
            buf[o],
            buf[o + 1],
            buf[o + 2],
            buf[o + 3],
        ]));
    }
    Ok(Tensor2::from_vec(rows, cols, data))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    features: String,
    tokens: Vec<u32>,
    terms: Vec<TermSpan>,
}

/// Write a corpus split: JSON-lines manifest plus one feature file per
/// utterance under `<dir>/features/`.
pub fn write_corpus(dir: &Path, name: &str, corpus: &Corpus) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir)?;
    let manifest_path = dir.join(format!("{name}.jsonl"));
    let mut out = std::io::BufWriter::new(std::fs::File::create(&manifest_path)?);
    for (utt, feats) in corpus.utterances.iter().zip(&corpus.features) {
        let rel = format!("features/{}.a2pf", utt.id);
        write_features(&dir.join(&rel), &feats.frames)?;
        let line = ManifestLine {
            id: utt.id.clone(),
            features: rel,
            tokens: utt.token_ids.clone(),
            terms: utt.positive_terms.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(manifest_path)
}

pub fn read_corpus(manifest_path: &Path) -> Result<Corpus> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(manifest_path)?;
    let mut corpus = Corpus::default();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(line)?;
        let frames = read_features(&base.join(&m.features))?;
        corpus.features.push(SpeechFeatures::full(m.id.clone(), frames));
        corpus.utterances.push(Utterance {
            id: m.id,
            token_ids: m.tokens,
            positive_terms: m.terms,
        });
    }
    Ok(corpus)
}

pub fn write_bank(path: &Path, entries: &[TermEntry]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_bank(path: &Path) -> Result<TermBank> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str::<TermEntry>(line)?);
    }
    TermBank::new(entries)
}

/// SHA-256 over a list of files, in order; the corpus determinism hash.
pub fn hash_files(paths: &[PathBuf]) -> Result<String> {
    let mut hasher = Sha256::new();
    for p in paths {
        hasher.update(std::fs::read(p)?);
    }
    Ok(format!("{:x}", hasher.finalize()))
}
