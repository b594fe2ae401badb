//! Recall@k evaluation, recall-vs-bank-size sweeps, the ablation
//! harness, and report emission (CSV for machines, markdown tables for
//! eyeballs).

use crate::baseline::{cosine_retrieve, DenseIndex};
use crate::corpus::{Corpus, EmbeddingTable, TermBank, TermEntry, TermFeatures};
use crate::error::{EngineError, Result};
use crate::retriever::{score_bank_pooling, PoolingMode, RetrieverParams};
use crate::seeds;
use crate::serving::{top_k_select, RetrievalResult};
use crate::training::{run_curriculum, TrainingConfig};
use rand::seq::SliceRandom;
use serde::Serialize;
use std::collections::HashSet;

pub const DEFAULT_KS: [usize; 5] = [10, 20, 30, 40, 50];

/// How per-utterance recalls aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Averaging {
    /// Pooled hit count over pooled gold count (the default protocol).
    Micro,
    /// Mean of per-utterance recalls.
    Macro,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecallReport {
    pub label: String,
    pub ks: Vec<usize>,
    /// Recall percentage per k, aligned with `ks`.
    pub recalls: Vec<f64>,
    pub n_gold: usize,
    /// Hits per k, aligned with `ks`.
    pub n_hits: Vec<usize>,
}

/// Micro-averaged recall@k over retrieval results and gold term-id sets.
/// Gold terms count as unique types per utterance.
pub fn recall_at_k(
    results: &[RetrievalResult],
    gold: &[HashSet<u64>],
    k: usize,
    bank_ids: &HashSet<u64>,
) -> Result<f64> {
    recall_at_k_avg(results, gold, k, bank_ids, Averaging::Micro)
}

pub fn recall_at_k_avg(
    results: &[RetrievalResult],
    gold: &[HashSet<u64>],
    k: usize,
    bank_ids: &HashSet<u64>,
    avg: Averaging,
) -> Result<f64> {
    assert_eq!(results.len(), gold.len());
    assert!(k >= 1);
    for g in gold {
        for t in g {
            if !bank_ids.contains(t) {
                return Err(EngineError::Protocol(format!(
                    "gold term {t} is missing from the bank"
                )));
            }
        }
    }
    let mut hits_total = 0usize;
    let mut gold_total = 0usize;
    let mut per_utt = Vec::new();
    for (r, g) in results.iter().zip(gold) {
        if g.is_empty() {
            continue;
        }
        let hits = r
            .entries
            .iter()
            .filter(|e| e.rank <= k && g.contains(&e.term_id))
            .count();
        hits_total += hits;
        gold_total += g.len();
        per_utt.push(hits as f64 / g.len() as f64);
    }
    if gold_total == 0 {
        return Err(EngineError::Protocol(
            "no gold terms in the evaluation set".into(),
        ));
    }
    Ok(match avg {
        Averaging::Micro => hits_total as f64 / gold_total as f64 * 100.0,
        Averaging::Macro => per_utt.iter().sum::<f64>() / per_utt.len() as f64 * 100.0,
    })
}

/// Score every test utterance against the bank and compute recall at
/// each requested k.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &RetrieverParams,
    eps: f32,
    corpus: &Corpus,
    bank: &TermBank,
    bank_feats: &[TermFeatures],
    ks: &[usize],
    pooling: PoolingMode,
    label: &str,
) -> Result<RecallReport> {
    let bank_ids: HashSet<u64> = bank.entries.iter().map(|e| e.term_id).collect();
    let k_max = ks.iter().copied().max().unwrap_or(10);
    let mut n_gold = 0usize;
    let mut hits_per_k = vec![0usize; ks.len()];
    for (utt, speech) in corpus.utterances.iter().zip(&corpus.features) {
        if utt.positive_terms.is_empty() {
            continue;
        }
        let gold: HashSet<u64> = utt.positive_terms.iter().map(|t| t.term_id).collect();
        for t in &gold {
            if !bank_ids.contains(t) {
                return Err(EngineError::Protocol(format!(
                    "gold term {t} is missing from the bank"
                )));
            }
        }
        let probs = score_bank_pooling(params, eps, speech, bank_feats, 32, pooling)?;
        let top = top_k_select(&probs, k_max);
        n_gold += gold.len();
        for (ki, &k) in ks.iter().enumerate() {
            hits_per_k[ki] += top
                .iter()
                .take(k)
                .filter(|&&i| gold.contains(&bank.entries[i].term_id))
                .count();
        }
    }
    if n_gold == 0 {
        return Err(EngineError::Protocol(
            "no gold terms in the evaluation set".into(),
        ));
    }
    Ok(RecallReport {
        label: label.to_string(),
        ks: ks.to_vec(),
        recalls: hits_per_k
            .iter()
            .map(|&h| h as f64 / n_gold as f64 * 100.0)
            .collect(),
        n_gold,
        n_hits: hits_per_k,
    })
}

/// Recall@k of the cosine baseline over the same protocol.
pub fn evaluate_cosine(
    corpus: &Corpus,
    bank: &TermBank,
    bank_feats: &[TermFeatures],
    ks: &[usize],
    label: &str,
) -> Result<RecallReport> {
    let index = DenseIndex::build(&bank.entries, bank_feats)?;
    let k_max = ks.iter().copied().max().unwrap_or(10);
    let mut n_gold = 0usize;
    let mut hits_per_k = vec![0usize; ks.len()];
    for (utt, speech) in corpus.utterances.iter().zip(&corpus.features) {
        if utt.positive_terms.is_empty() {
            continue;
        }
        let gold: HashSet<u64> = utt.positive_terms.iter().map(|t| t.term_id).collect();
        let r = cosine_retrieve(&index, speech, k_max)?;
        n_gold += gold.len();
        for (ki, &k) in ks.iter().enumerate() {
            hits_per_k[ki] += r
                .entries
                .iter()
                .filter(|e| e.rank <= k && gold.contains(&e.term_id))
                .count();
        }
    }
    if n_gold == 0 {
        return Err(EngineError::Protocol(
            "no gold terms in the evaluation set".into(),
        ));
    }
    Ok(RecallReport {
        label: label.to_string(),
        ks: ks.to_vec(),
        recalls: hits_per_k
            .iter()
            .map(|&h| h as f64 / n_gold as f64 * 100.0)
            .collect(),
        n_gold,
        n_hits: hits_per_k,
    })
}

// ---------------------------------------------------------------------------
// Bank-size sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub bank_size: usize,
    /// Mean over distractor seeds.
    pub recall_a2p: f64,
    pub recall_cosine: f64,
}

/// Grow the bank with sampled distractors and re-measure recall@k for
/// both scorers, averaged over `n_seeds` distractor draws.
#[allow(clippy::too_many_arguments)]
pub fn sweep_bank_size(
    params: &RetrieverParams,
    eps: f32,
    corpus: &Corpus,
    base_bank: &TermBank,
    distractor_pool: &[TermEntry],
    emb: &EmbeddingTable,
    sizes: &[usize],
    k: usize,
    n_seeds: u64,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let base_seqs: HashSet<Vec<u32>> = base_bank
        .entries
        .iter()
        .map(|e| e.token_ids.clone())
        .collect();
    if distractor_pool
        .iter()
        .any(|d| base_seqs.contains(&d.token_ids))
    {
        return Err(EngineError::Protocol(
            "distractor pool overlaps the gold bank".into(),
        ));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size < base_bank.len() {
            return Err(EngineError::Config(format!(
                "sweep size {size} smaller than the gold bank ({})",
                base_bank.len()
            )));
        }
        let extra = size - base_bank.len();
        if extra > distractor_pool.len() {
            return Err(EngineError::Capacity(format!(
                "sweep size {size} needs {extra} distractors, pool has {}",
                distractor_pool.len()
            )));
        }
        let mut a2p_sum = 0.0;
        let mut cos_sum = 0.0;
        let reps = if extra == 0 { 1 } else { n_seeds.max(1) };
        for s in 0..reps {
            let mut rng = seeds::stream_indexed(seed, "sweep", &[size as u64, s]);
            let mut pool: Vec<&TermEntry> = distractor_pool.iter().collect();
            pool.shuffle(&mut rng);
            let mut entries = base_bank.entries.clone();
            entries.extend(pool.into_iter().take(extra).cloned());
            let bank = TermBank::new(entries)?;
            let feats = bank.to_features(emb);
            a2p_sum += evaluate(
                params,
                eps,
                corpus,
                &bank,
                &feats,
                &[k],
                PoolingMode::TokenPooled,
                "a2p",
            )?
            .recalls[0];
            cos_sum += evaluate_cosine(corpus, &bank, &feats, &[k], "cosine")?.recalls[0];
        }
        rows.push(SweepRow {
            bank_size: size,
            recall_a2p: a2p_sum / reps as f64,
            recall_cosine: cos_sum / reps as f64,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AblationArm {
    FullA2P,
    NoPooling,
    RealTermOnly,
    PhraseOnly,
    WordOnly,
}

impl AblationArm {
    pub const ALL: [AblationArm; 5] = [
        AblationArm::FullA2P,
        AblationArm::NoPooling,
        AblationArm::RealTermOnly,
        AblationArm::PhraseOnly,
        AblationArm::WordOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::FullA2P => "full",
            AblationArm::NoPooling => "nopool",
            AblationArm::RealTermOnly => "realonly",
            AblationArm::PhraseOnly => "phrase",
            AblationArm::WordOnly => "word",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| EngineError::Config(format!("unknown ablation arm {s:?}")))
    }

    fn pooling(self) -> PoolingMode {
        match self {
            AblationArm::NoPooling => PoolingMode::Bypassed,
            _ => PoolingMode::TokenPooled,
        }
    }

    /// Stage-removal arms zero out the removed stages of the shared base
    /// schedule; the surviving stage keeps its own allotment, so every
    /// arm draws from the same budget without reallocating the removed
    /// stages' steps. Each arm is a complete training run (its own
    /// warmup + cosine schedule over its remaining steps).
    fn stage_steps(self, base: [usize; 3]) -> [usize; 3] {
        match self {
            AblationArm::FullA2P | AblationArm::NoPooling => base,
            AblationArm::RealTermOnly => [0, 0, base[2]],
            AblationArm::PhraseOnly => [0, base[1], 0],
            AblationArm::WordOnly => [base[0], 0, 0],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub arm: &'static str,
    pub ks: Vec<usize>,
    pub recalls: Vec<f64>,
    pub failed: bool,
}

/// Train each arm at an identical seed and total step budget, then
/// evaluate recall@k on the test corpus. A diverged arm is recorded as
/// failed; the remaining arms still run.
#[allow(clippy::too_many_arguments)]
pub fn run_ablations(
    train: &Corpus,
    val: &Corpus,
    test: &Corpus,
    bank: &TermBank,
    emb: &EmbeddingTable,
    cfg: &TrainingConfig,
    arms: &[AblationArm],
    ks: &[usize],
) -> Result<Vec<AblationRow>> {
    let bank_feats = bank.to_features(emb);
    let mut rows = Vec::with_capacity(arms.len());
    for &arm in arms {
        let arm_cfg = TrainingConfig {
            stage_steps: arm.stage_steps(cfg.stage_steps),
            ..cfg.clone()
        };
        let outcome = match run_curriculum(train, val, bank, emb, &arm_cfg, arm.pooling()) {
            Ok(o) => o,
            Err(e) => {
                eprintln!("ablation arm {} failed: {e}", arm.name());
                rows.push(AblationRow {
                    arm: arm.name(),
                    ks: ks.to_vec(),
                    recalls: vec![],
                    failed: true,
                });
                continue;
            }
        };
        let report = evaluate(
            &outcome.params,
            cfg.pooling_eps,
            test,
            bank,
            &bank_feats,
            ks,
            arm.pooling(),
            arm.name(),
        )?;
        rows.push(AblationRow {
            arm: arm.name(),
            ks: ks.to_vec(),
            recalls: report.recalls,
            failed: false,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

pub fn recall_reports_csv(reports: &[RecallReport]) -> String {
    let mut s = String::from("label,k,recall,n_gold,n_hits\n");
    for r in reports {
        for (i, &k) in r.ks.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{:.2},{},{}\n",
                r.label, k, r.recalls[i], r.n_gold, r.n_hits[i]
            ));
        }
    }
    s
}

pub fn recall_reports_markdown(reports: &[RecallReport]) -> String {
    let ks = reports
        .first()
        .map(|r| r.ks.clone())
        .unwrap_or_else(|| DEFAULT_KS.to_vec());
    let mut s = String::from("| scorer |");
    for k in &ks {
        s.push_str(&format!(" R@{k} |"));
    }
    s.push('\n');
    s.push_str("|---|");
    s.push_str(&"---|".repeat(ks.len()));
    s.push('\n');
    for r in reports {
        s.push_str(&format!("| {} |", r.label));
        for v in &r.recalls {
            s.push_str(&format!(" {v:.2} |"));
        }
        s.push('\n');
    }
    s
}

pub fn ablation_rows_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("arm,k,recall,failed\n");
    for r in rows {
        if r.failed {
            s.push_str(&format!("{},,,true\n", r.arm));
            continue;
        }
        for (i, &k) in r.ks.iter().enumerate() {
            s.push_str(&format!("{},{},{:.2},false\n", r.arm, k, r.recalls[i]));
        }
    }
    s
}

pub fn ablation_rows_markdown(rows: &[AblationRow]) -> String {
    let ks = rows
        .first()
        .map(|r| r.ks.clone())
        .unwrap_or_else(|| DEFAULT_KS.to_vec());
    let mut s = String::from("| arm |");
    for k in &ks {
        s.push_str(&format!(" R@{k} |"));
    }
    s.push('\n');
    s.push_str("|---|");
    s.push_str(&"---|".repeat(ks.len()));
    s.push('\n');
    for r in rows {
        s.push_str(&format!("| {} |", r.arm));
        if r.failed {
            s.push_str(&" failed |".repeat(ks.len()));
        } else {
            for v in &r.recalls {
                s.push_str(&format!(" {v:.2} |"));
            }
        }
        s.push('\n');
    }
    s
}

pub fn sweep_rows_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("bank_size,recall_a2p,recall_cosine\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.2},{:.2}\n",
            r.bank_size, r.recall_a2p, r.recall_cosine
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, generate_distractors, ToyEncoderConfig};
    use crate::serving::{RetrievedEntry, Timing};

    fn result(ids: &[u64]) -> RetrievalResult {
        RetrievalResult {
            scorer: "a2p".into(),
            utterance_id: "u".into(),
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, &id)| RetrievedEntry {
                    term_id: id,
                    src: format!("t{id}"),
                    tgt: format!("T{id}"),
                    score: 1.0 - i as f32 * 0.01,
                    rank: i + 1,
                })
                .collect(),
            timing: Timing::default(),
        }
    }

    fn gold(ids: &[u64]) -> HashSet<u64> {
        ids.iter().copied().collect()
    }

    #[test]
    fn recall_extremes() {
        let bank_ids: HashSet<u64> = (0..100).collect();
        // every gold term ranked 1 -> 100
        let r = recall_at_k(&[result(&[7])], &[gold(&[7])], 1, &bank_ids).unwrap();
        assert_eq!(r, 100.0);
        // none retrieved -> 0
        let r = recall_at_k(&[result(&[1, 2, 3])], &[gold(&[9])], 3, &bank_ids).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn recall_hand_count_is_fifty_percent() {
        // gold sizes {1,2,1}, hits {1,1,0} -> 2/4 = 50.0
        let bank_ids: HashSet<u64> = (0..100).collect();
        let results = vec![
            result(&[1, 50, 51]),
            result(&[2, 52, 53]), // gold {2,3}: hits 1
            result(&[54, 55, 56]),
        ];
        let golds = vec![gold(&[1]), gold(&[2, 3]), gold(&[4])];
        let r = recall_at_k(&results, &golds, 3, &bank_ids).unwrap();
        assert!((r - 50.0).abs() < 1e-12);
        // macro: mean of {1, 0.5, 0} = 50.0 here too
        let m = recall_at_k_avg(&results, &golds, 3, &bank_ids, Averaging::Macro).unwrap();
        assert!((m - 50.0).abs() < 1e-12);
    }

    #[test]
    fn missing_gold_term_names_it() {
        let bank_ids: HashSet<u64> = (0..10).collect();
        let err = recall_at_k(&[result(&[1])], &[gold(&[777])], 1, &bank_ids)
            .unwrap_err()
            .to_string();
        assert!(err.contains("777"), "{err}");
    }

    #[test]
    fn recall_monotone_in_k() {
        let bank_ids: HashSet<u64> = (0..100).collect();
        let results = vec![result(&[5, 9, 1, 4, 8]), result(&[2, 7, 9, 3, 6])];
        let golds = vec![gold(&[1, 8]), gold(&[9, 6])];
        let mut prev = 0.0;
        for k in 1..=5 {
            let r = recall_at_k(&results, &golds, k, &bank_ids).unwrap();
            assert!(r >= prev, "k={k}: {r} < {prev}");
            prev = r;
        }
        assert_eq!(prev, 100.0, "k = result length recalls everything here");
    }

    fn tiny_setup() -> (
        ToyEncoderConfig,
        Corpus,
        Corpus,
        TermBank,
        EmbeddingTable,
        RetrieverParams,
    ) {
        let gen = ToyEncoderConfig {
            vocab_size: 120,
            embed_dim: 16,
            seed: 61,
            ..Default::default()
        };
        let (train, bank) = generate_corpus(&gen, 16, 15).unwrap();
        let mut trng = seeds::stream(gen.seed, "utterances/test");
        let test = crate::corpus::generate_utterances(&gen, &bank, 8, "test", &mut trng);
        let emb = EmbeddingTable::from_config(&gen);
        let mut rng = seeds::stream(1, "params");
        let mut params = RetrieverParams::init(16, 2, 0.0, &mut rng).unwrap();
        use rand::Rng;
        for w in params.head_w.iter_mut() {
            *w = rng.gen_range(-0.5..0.5);
        }
        (gen, train, test, bank, emb, params)
    }

    #[test]
    fn evaluate_full_bank_k_recalls_everything() {
        let (_, _, test, bank, emb, params) = tiny_setup();
        let feats = bank.to_features(&emb);
        let m = bank.len();
        let report = evaluate(
            &params,
            1e-6,
            &test,
            &bank,
            &feats,
            &[m],
            PoolingMode::TokenPooled,
            "a2p",
        )
        .unwrap();
        assert_eq!(report.recalls[0], 100.0);
    }

    #[test]
    fn sweep_base_size_equals_direct_report() {
        let (gen, train, test, bank, emb, params) = tiny_setup();
        let distractors = generate_distractors(&gen, &bank, &[&train, &test], 20).unwrap();
        let feats = bank.to_features(&emb);
        let base = evaluate(
            &params,
            1e-6,
            &test,
            &bank,
            &feats,
            &[5],
            PoolingMode::TokenPooled,
            "a2p",
        )
        .unwrap();
        let rows = sweep_bank_size(
            &params,
            1e-6,
            &test,
            &bank,
            &distractors,
            &emb,
            &[bank.len(), bank.len() + 10],
            5,
            3,
            9,
        )
        .unwrap();
        assert_eq!(rows[0].bank_size, bank.len());
        assert!((rows[0].recall_a2p - base.recalls[0]).abs() < 1e-9);
        assert_eq!(rows[1].bank_size, bank.len() + 10);
    }

    #[test]
    fn sweep_rejects_oversized_request_and_overlap() {
        let (gen, train, test, bank, emb, params) = tiny_setup();
        let distractors = generate_distractors(&gen, &bank, &[&train, &test], 5).unwrap();
        let err = sweep_bank_size(
            &params,
            1e-6,
            &test,
            &bank,
            &distractors,
            &emb,
            &[bank.len() + 100],
            5,
            1,
            9,
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::Capacity(_)), "{err}");
        // overlapping pool is a protocol error
        let overlap = vec![bank.entries[0].clone()];
        let err = sweep_bank_size(
            &params, 1e-6, &test, &bank, &overlap, &emb, &[bank.len() + 1], 5, 1, 9,
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::Protocol(_)), "{err}");
    }

    #[test]
    fn ablation_harness_runs_all_arms() {
        let (gen, train, test, bank, emb, _) = tiny_setup();
        let mut vrng = seeds::stream(gen.seed, "utterances/val");
        let val = crate::corpus::generate_utterances(&gen, &bank, 6, "val", &mut vrng);
        let cfg = TrainingConfig {
            batch_size: 4,
            max_bank_per_batch: 10,
            warmup_steps: 2,
            stage_steps: [2, 2, 2],
            embed_dim: 16,
            heads: 2,
            val_utterances: 6,
            seed: 3,
            ..Default::default()
        };
        let rows = run_ablations(
            &train,
            &val,
            &test,
            &bank,
            &emb,
            &cfg,
            &AblationArm::ALL,
            &[5, 10],
        )
        .unwrap();
        assert_eq!(rows.len(), 5);
        for r in &rows {
            assert!(!r.failed, "arm {} failed", r.arm);
            assert_eq!(r.recalls.len(), 2);
            assert!(r.recalls[0] <= r.recalls[1] + 1e-9, "monotone in k");
        }
        let csv = ablation_rows_csv(&rows);
        assert!(csv.lines().count() == 1 + 5 * 2);
        let md = ablation_rows_markdown(&rows);
        assert!(md.contains("| full |") && md.contains("| nopool |"));
    }

    #[test]
    fn arm_parsing_roundtrips() {
        for a in AblationArm::ALL {
            assert_eq!(AblationArm::parse(a.name()).unwrap(), a);
        }
        assert!(AblationArm::parse("bogus").is_err());
    }
}
