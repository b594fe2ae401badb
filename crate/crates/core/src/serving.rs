//! Inference path: score a term bank against an utterance, select Top-k
//! by descending probability, instrument per-stage latency, and render
//! the terminology-augmented prompt.

use crate::corpus::{SpeechFeatures, TermEntry, TermFeatures};
use crate::error::Result;
use crate::retriever::{project_speech, score_bank_kv, PoolingMode, RetrieverParams};
use serde::{Deserialize, Serialize};
use std::sync::{Arc, RwLock};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrievedEntry {
    pub term_id: u64,
    pub src: String,
    pub tgt: String,
    /// Presence probability for the attention scorer; cosine similarity
    /// (in [-1, 1]) when `scorer` is "cosine".
    pub score: f32,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct Timing {
    pub feature_ms: f64,
    pub scoring_ms: f64,
    pub topk_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrievalResult {
    pub scorer: String,
    pub utterance_id: String,
    pub entries: Vec<RetrievedEntry>,
    pub timing: Timing,
}

/// Indices of the k largest values, descending, ties broken by lower
/// index. Heap-based partial selection, O(m log k).
pub fn top_k_select(probs: &[f32], k: usize) -> Vec<usize> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    // key orders "better" as greater: higher prob, then lower index
    #[derive(PartialEq)]
    struct Entry(f32, usize);
    impl Eq for Entry {}
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
        }
    }

    let k = k.max(1);
    let mut heap: BinaryHeap<Reverse<Entry>> = BinaryHeap::with_capacity(k + 1);
    for (i, &p) in probs.iter().enumerate() {
        if heap.len() < k {
            heap.push(Reverse(Entry(p, i)));
        } else if Entry(p, i) > heap.peek().unwrap().0 {
            heap.pop();
            heap.push(Reverse(Entry(p, i)));
        }
    }
    let mut out: Vec<Entry> = heap.into_iter().map(|r| r.0).collect();
    out.sort_by(|a, b| b.cmp(a));
    out.into_iter().map(|e| e.1).collect()
}

/// Score the bank and return the Top-k terms with per-stage timing.
/// k > m returns all m entries.
pub fn retrieve(
    params: &RetrieverParams,
    eps: f32,
    speech: &SpeechFeatures,
    entries: &[TermEntry],
    bank_feats: &[TermFeatures],
    k: usize,
    batch: usize,
) -> Result<RetrievalResult> {
    assert_eq!(entries.len(), bank_feats.len());
    let t0 = Instant::now();
    let (kk, vv) = project_speech(params, &speech.frames)?;
    let t1 = Instant::now();
    let probs = score_bank_kv(
        params,
        eps,
        &kk,
        &vv,
        &speech.frame_mask,
        bank_feats,
        batch,
        PoolingMode::TokenPooled,
    )?;
    let t2 = Instant::now();
    let top = top_k_select(&probs, k);
    let t3 = Instant::now();

    let mut picked: Vec<(usize, f32)> = top.into_iter().map(|i| (i, probs[i])).collect();
    // final order: probability descending, ties by lower term_id
    picked.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(entries[a.0].term_id.cmp(&entries[b.0].term_id))
    });
    let out: Vec<RetrievedEntry> = picked
        .into_iter()
        .enumerate()
        .map(|(rank, (i, p))| RetrievedEntry {
            term_id: entries[i].term_id,
            src: entries[i].src.clone(),
            tgt: entries[i].tgt.clone(),
            score: p,
            rank: rank + 1,
        })
        .collect();
    let ms = |a: Instant, b: Instant| b.duration_since(a).as_secs_f64() * 1e3;
    Ok(RetrievalResult {
        scorer: "a2p".into(),
        utterance_id: speech.utterance_id.clone(),
        entries: out,
        timing: Timing {
            feature_ms: ms(t0, t1),
            scoring_ms: ms(t1, t2),
            topk_ms: ms(t2, t3),
            total_ms: ms(t0, t3),
        },
    })
}

// ---------------------------------------------------------------------------
// Prompt assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptTask {
    Transcribe,
    Translate,
}

/// How retrieved terms are rendered for translation prompts; the source
/// paper does not pin this down, so both renderings are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TermStyle {
    SourceOnly,
    Pairs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub src_lang: String,
    pub tgt_lang: String,
    pub term_style: TermStyle,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            src_lang: "English".into(),
            tgt_lang: "Chinese".into(),
            term_style: TermStyle::SourceOnly,
        }
    }
}

/// Deterministic prompt string: task instruction, then (when the
/// retrieval is non-empty) the terminology sentence.
pub fn build_prompt(template: &PromptTemplate, task: PromptTask, retrieved: &RetrievalResult) -> String {
    let mut out = match task {
        PromptTask::Transcribe => format!(
            "Please transcribe the {} speech into text.",
            template.src_lang
        ),
        PromptTask::Translate => format!(
            "Please translate the {} speech into {} text.",
            template.src_lang, template.tgt_lang
        ),
    };
    if retrieved.entries.is_empty() {
        return out;
    }
    let render = |e: &RetrievedEntry| match (task, template.term_style) {
        (PromptTask::Translate, TermStyle::Pairs) => format!("{}\u{2192}{}", e.src, e.tgt),
        _ => e.src.clone(),
    };
    let terms: Vec<String> = retrieved.entries.iter().map(render).collect();
    out.push_str(" Potential technical terms include: ");
    out.push_str(&terms.join(", "));
    out.push('.');
    out
}

// ---------------------------------------------------------------------------
// Latency benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub bank_size: usize,
    pub mean_feature_ms: f64,
    pub mean_scoring_ms: f64,
    pub mean_topk_ms: f64,
    pub mean_total_ms: f64,
    pub p95_total_ms: f64,
    /// Fraction of total time spent in Top-k selection.
    pub topk_share: f64,
}

pub fn bench_rows_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "bank_size,mean_feature_ms,mean_scoring_ms,mean_topk_ms,mean_total_ms,p95_total_ms,topk_share\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            r.bank_size,
            r.mean_feature_ms,
            r.mean_scoring_ms,
            r.mean_topk_ms,
            r.mean_total_ms,
            r.p95_total_ms,
            r.topk_share
        ));
    }
    s
}

fn p95(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    let idx = ((samples.len() as f64) * 0.95).ceil() as usize;
    samples[idx.min(samples.len()) - 1]
}

/// Measure retrieval latency for one bank. Queries cycle over the given
/// utterances; the first `warmup` measurements are discarded.
#[allow(clippy::too_many_arguments)]
pub fn bench_bank(
    params: &RetrieverParams,
    eps: f32,
    speeches: &[SpeechFeatures],
    entries: &[TermEntry],
    bank_feats: &[TermFeatures],
    queries: usize,
    warmup: usize,
    k: usize,
    batch: usize,
) -> Result<BenchRow> {
    assert!(
        queries >= 30,
        "need at least 30 measured queries after warmup"
    );
    let mut timings = Vec::with_capacity(queries);
    for q in 0..warmup + queries {
        let speech = &speeches[q % speeches.len()];
        let r = retrieve(params, eps, speech, entries, bank_feats, k, batch)?;
        if q >= warmup {
            timings.push(r.timing);
        }
    }
    let n = timings.len() as f64;
    let mean = |f: fn(&Timing) -> f64| timings.iter().map(f).sum::<f64>() / n;
    let mut totals: Vec<f64> = timings.iter().map(|t| t.total_ms).collect();
    let mean_total = mean(|t| t.total_ms);
    let mean_topk = mean(|t| t.topk_ms);
    Ok(BenchRow {
        bank_size: entries.len(),
        mean_feature_ms: mean(|t| t.feature_ms),
        mean_scoring_ms: mean(|t| t.scoring_ms),
        mean_topk_ms: mean_topk,
        mean_total_ms: mean_total,
        p95_total_ms: p95(&mut totals),
        topk_share: if mean_total > 0.0 {
            mean_topk / mean_total
        } else {
            0.0
        },
    })
}

// ---------------------------------------------------------------------------
// Hot-swappable bank
// ---------------------------------------------------------------------------

/// Immutable bank snapshot; in-flight queries keep the Arc they loaded.
#[derive(Debug)]
pub struct VersionedBank {
    pub version: u64,
    pub entries: Vec<TermEntry>,
    pub features: Vec<TermFeatures>,
}

/// Copy-and-replace holder with a version counter.
#[derive(Debug)]
pub struct BankHolder {
    inner: RwLock<Arc<VersionedBank>>,
}

impl BankHolder {
    pub fn new(entries: Vec<TermEntry>, features: Vec<TermFeatures>) -> Self {
        BankHolder {
            inner: RwLock::new(Arc::new(VersionedBank {
                version: 1,
                entries,
                features,
            })),
        }
    }

    pub fn load(&self) -> Arc<VersionedBank> {
        self.inner.read().unwrap().clone()
    }

    /// Replaces the bank; returns the new version number.
    pub fn swap(&self, entries: Vec<TermEntry>, features: Vec<TermFeatures>) -> u64 {
        let mut guard = self.inner.write().unwrap();
        let version = guard.version + 1;
        *guard = Arc::new(VersionedBank {
            version,
            entries,
            features,
        });
        version
    }
}
