//! Cosine-similarity retrieval baseline: collapse the utterance and
//! every bank term into single mean-pooled vectors and rank terms by
//! exact exhaustive cosine scan. Stands in for a vector-database
//! retriever in the recall and latency comparisons.

use crate::corpus::{SpeechFeatures, TermEntry, TermFeatures};
use crate::error::{EngineError, Result};
use crate::numerics::Tensor2;
use crate::serving::{top_k_select, BenchRow, RetrievalResult, RetrievedEntry, Timing};
use std::time::Instant;

/// Masked mean over valid rows, then L2-normalize.
pub fn embed_for_index(features: &Tensor2, mask: &[bool]) -> Result<Vec<f32>> {
    assert_eq!(mask.len(), features.rows);
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(EngineError::DegenerateInput(
            "no valid rows to pool into an index vector".into(),
        ));
    }
    let d = features.cols;
    let mut mean = vec![0.0f64; d];
    for r in 0..features.rows {
        if mask[r] {
            for (m, &x) in mean.iter_mut().zip(features.row(r)) {
                *m += x as f64;
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EngineError::DegenerateInput(
            "pooled vector has zero norm".into(),
        ));
    }
    Ok(mean.iter().map(|x| (x / norm) as f32).collect())
}

/// m unit-normalized term vectors plus the id map.
#[derive(Debug, Clone)]
pub struct DenseIndex {
    pub dim: usize,
    pub vectors: Vec<Vec<f32>>,
    pub entries: Vec<TermEntry>,
}

impl DenseIndex {
    pub fn build(entries: &[TermEntry], feats: &[TermFeatures]) -> Result<Self> {
        assert_eq!(entries.len(), feats.len());
        if entries.is_empty() {
            return Err(EngineError::DegenerateInput("empty term bank".into()));
        }
        let dim = feats[0].tokens.cols;
        let mut vectors = Vec::with_capacity(feats.len());
        for f in feats {
            vectors.push(embed_for_index(&f.tokens, &f.token_mask)?);
        }
        Ok(DenseIndex {
            dim,
            vectors,
            entries: entries.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Exhaustive cosine Top-k; scores are similarities in [-1, 1], with
/// the same tie-break as the attention scorer's serving path.
pub fn cosine_retrieve(index: &DenseIndex, speech: &SpeechFeatures, k: usize) -> Result<RetrievalResult> {
    let t0 = Instant::now();
    let q = embed_for_index(&speech.frames, &speech.frame_mask)?;
    let t1 = Instant::now();
    let scores: Vec<f32> = index
        .vectors
        .iter()
        .map(|v| {
            let mut acc = 0.0f64;
            for (a, b) in q.iter().zip(v) {
                acc += *a as f64 * *b as f64;
            }
            acc as f32
        })
        .collect();
    let t2 = Instant::now();
    let top = top_k_select(&scores, k);
    let t3 = Instant::now();

    let mut picked: Vec<(usize, f32)> = top.into_iter().map(|i| (i, scores[i])).collect();
    picked.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(index.entries[a.0].term_id.cmp(&index.entries[b.0].term_id))
    });
    let entries: Vec<RetrievedEntry> = picked
        .into_iter()
        .enumerate()
        .map(|(rank, (i, s))| RetrievedEntry {
            term_id: index.entries[i].term_id,
            src: index.entries[i].src.clone(),
            tgt: index.entries[i].tgt.clone(),
            score: s,
            rank: rank + 1,
        })
        .collect();
    let ms = |a: Instant, b: Instant| b.duration_since(a).as_secs_f64() * 1e3;
    Ok(RetrievalResult {
        scorer: "cosine".into(),
        utterance_id: speech.utterance_id.clone(),
        entries,
        timing: Timing {
            feature_ms: ms(t0, t1),
            scoring_ms: ms(t1, t2),
            topk_ms: ms(t2, t3),
            total_ms: ms(t0, t3),
        },
    })
}

/// Latency benchmark for the cosine path, mirroring `serving::bench_bank`.
pub fn bench_cosine(
    index: &DenseIndex,
    speeches: &[SpeechFeatures],
    queries: usize,
    warmup: usize,
    k: usize,
) -> Result<BenchRow> {
    assert!(queries >= 30, "need at least 30 measured queries after warmup");
    let mut timings = Vec::with_capacity(queries);
    for q in 0..warmup + queries {
        let r = cosine_retrieve(index, &speeches[q % speeches.len()], k)?;
        if q >= warmup {
            timings.push(r.timing);
        }
    }
    let n = timings.len() as f64;
    let mean = |f: fn(&Timing) -> f64| timings.iter().map(f).sum::<f64>() / n;
    let mut totals: Vec<f64> = timings.iter().map(|t| t.total_ms).collect();
    totals.sort_by(|a, b| a.total_cmp(b));
    let mean_total = mean(|t| t.total_ms);
    let mean_topk = mean(|t| t.topk_ms);
    Ok(BenchRow {
        bank_size: index.len(),
        mean_feature_ms: mean(|t| t.feature_ms),
        mean_scoring_ms: mean(|t| t.scoring_ms),
        mean_topk_ms: mean_topk,
        mean_total_ms: mean_total,
        p95_total_ms: totals[(((totals.len() as f64) * 0.95).ceil() as usize).min(totals.len()) - 1],
        topk_share: if mean_total > 0.0 { mean_topk / mean_total } else { 0.0 },
    })
}
