//! Dual-objective BCE loss, AdamW with warmup + cosine annealing, batch
//! construction under a per-batch candidate cap, and the three-stage
//! curriculum driver.

use crate::corpus::{
    contains_subsequence, sample_stage_terms, Corpus, EmbeddingTable, TermBank, TermFeatures,
};
use crate::error::{EngineError, Result};
use crate::numerics::Tensor2;
use crate::retriever::{
    accumulate_speech_grads, backward, forward, project_speech, PoolingMode, RetrieverParams,
    RetrieverParamsG, TENSOR_NAMES,
};
use crate::seeds;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The three curriculum stages, applied strictly in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CurriculumStage {
    Word,
    Phrase,
    RealTerm,
}

impl CurriculumStage {
    pub const ALL: [CurriculumStage; 3] = [
        CurriculumStage::Word,
        CurriculumStage::Phrase,
        CurriculumStage::RealTerm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CurriculumStage::Word => "word",
            CurriculumStage::Phrase => "phrase",
            CurriculumStage::RealTerm => "real_term",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub max_bank_per_batch: usize,
    pub peak_lr: f64,
    pub init_lr: f64,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Step budget per stage, Word / Phrase / RealTerm order. A zero
    /// budget skips the stage (the curriculum-ablation arms).
    pub stage_steps: [usize; 3],
    /// Stage-removal mask (ablation arms). A skipped stage runs no
    /// training steps but still advances the global step counter by its
    /// budget, so the surviving stages see the same LR-schedule segment
    /// they would in the full curriculum.
    #[serde(default)]
    pub skip_stages: [bool; 3],
    pub grad_clip: f64,
    /// Stop a stage early after this many epochs without validation
    /// recall improvement.
    pub early_stop_patience: usize,
    /// Cap on validation utterances scored per epoch (speed knob).
    pub val_utterances: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub dropout_p: f32,
    pub pooling_eps: f32,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 32,
            max_bank_per_batch: 100,
            peak_lr: 1e-4,
            init_lr: 1e-7,
            warmup_steps: 500,
            max_epochs: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            stage_steps: Self::split_steps(900),
            skip_stages: [false; 3],
            grad_clip: 1.0,
            early_stop_patience: 5,
            val_utterances: 64,
            embed_dim: 64,
            heads: 8,
            dropout_p: 0.1,
            pooling_eps: 1e-6,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// Default 30% / 30% / 40% budget split across Word/Phrase/RealTerm.
    pub fn split_steps(total: usize) -> [usize; 3] {
        let word = total * 3 / 10;
        let phrase = total * 3 / 10;
        [word, phrase, total - word - phrase]
    }

    pub fn total_steps(&self) -> usize {
        self.stage_steps.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.init_lr > self.peak_lr {
            return Err(EngineError::Config(format!(
                "init_lr {} > peak_lr {}",
                self.init_lr, self.peak_lr
            )));
        }
        if self.warmup_steps < 1 {
            return Err(EngineError::Config("warmup_steps must be >= 1".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(EngineError::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.pooling_eps <= 0.0 {
            return Err(EngineError::Config("pooling_eps must be > 0".into()));
        }
        if self.batch_size == 0 || self.max_bank_per_batch == 0 {
            return Err(EngineError::Config(
                "batch_size and max_bank_per_batch must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Dual-objective BCE: mean over positives of -log p plus mean over
/// negatives of -log(1-p). Returns the loss and d(loss)/d(logit) per
/// pair, which is (p - y) / group_count.
pub fn dual_bce_loss(probs: &[f32], labels: &[bool]) -> Result<(f64, Vec<f32>)> {
    assert_eq!(probs.len(), labels.len());
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EngineError::BatchComposition(format!(
            "batch needs both groups: {n_pos} positives, {n_neg} negatives"
        )));
    }
    let mut loss = 0.0f64;
    let mut dlogit = Vec::with_capacity(probs.len());
    for (&p, &y) in probs.iter().zip(labels) {
        let pc = (p as f64).clamp(1e-7, 1.0 - 1e-7);
        if y {
            loss += -pc.ln() / n_pos as f64;
            dlogit.push(((p as f64 - 1.0) / n_pos as f64) as f32);
        } else {
            loss += -(1.0 - pc).ln() / n_neg as f64;
            dlogit.push((p as f64 / n_neg as f64) as f32);
        }
    }
    Ok((loss, dlogit))
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

/// Linear warmup from init_lr (step 1) to peak_lr (step = warmup_steps),
/// then cosine annealing to ~0 at total_steps.
pub fn lr_at(step: usize, cfg: &TrainingConfig, total_steps: usize) -> f64 {
    debug_assert!(step >= 1);
    let w = cfg.warmup_steps;
    if step <= w {
        if w == 1 {
            return cfg.peak_lr;
        }
        let t = (step - 1) as f64 / (w - 1) as f64;
        return cfg.init_lr + (cfg.peak_lr - cfg.init_lr) * t;
    }
    if total_steps <= w {
        return cfg.peak_lr;
    }
    let progress = (step - w) as f64 / (total_steps - w) as f64;
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// First and second moments, one pair per named parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &RetrieverParams) -> Self {
        let m = (0..TENSOR_NAMES.len())
            .map(|i| vec![0.0; params.tensor(i).len()])
            .collect();
        let v = (0..TENSOR_NAMES.len())
            .map(|i| vec![0.0; params.tensor(i).len()])
            .collect();
        AdamState { m, v }
    }
}

/// Bias-corrected AdamW update with decoupled weight decay:
/// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
pub fn adamw_step(
    params: &mut RetrieverParams,
    grads: &RetrieverParams,
    state: &mut AdamState,
    step_t: usize,
    lr_t: f64,
    cfg: &TrainingConfig,
) -> Result<()> {
    debug_assert!(step_t >= 1);
    for (i, name) in TENSOR_NAMES.iter().enumerate() {
        if grads.tensor(i).iter().any(|g| !g.is_finite()) {
            return Err(EngineError::Numeric(format!(
                "non-finite gradient in tensor {name:?}; step aborted"
            )));
        }
    }
    let bc1 = 1.0 - cfg.adam_beta1.powi(step_t as i32);
    let bc2 = 1.0 - cfg.adam_beta2.powi(step_t as i32);
    for i in 0..TENSOR_NAMES.len() {
        let g = grads.tensor(i).to_vec();
        let p = params.tensor_mut(i);
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..p.len() {
            let gj = g[j] as f64;
            m[j] = cfg.adam_beta1 * m[j] + (1.0 - cfg.adam_beta1) * gj;
            v[j] = cfg.adam_beta2 * v[j] + (1.0 - cfg.adam_beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let pj = p[j] as f64;
            p[j] = (pj - lr_t * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + cfg.weight_decay * pj))
                as f32;
        }
    }
    Ok(())
}

/// Clips the global L2 norm of all gradients to `max_norm`. Returns true
/// when clipping fired.
pub fn clip_grad_norm(grads: &mut RetrieverParams, max_norm: f64) -> bool {
    let mut sq = 0.0f64;
    for i in 0..TENSOR_NAMES.len() {
        for &g in grads.tensor(i) {
            sq += (g as f64) * (g as f64);
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return false;
    }
    let scale = (max_norm / norm) as f32;
    for i in 0..TENSOR_NAMES.len() {
        for g in grads.tensor_mut(i) {
            *g *= scale;
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Batch construction
// ---------------------------------------------------------------------------

/// One candidate term in a batch's shared candidate set.
#[derive(Debug, Clone)]
pub struct Candidate {
    /// Bank id when the candidate came from the bank or an annotated
    /// term; None for word/phrase spans invented by the curriculum.
    pub term_id: Option<u64>,
    pub token_ids: Vec<u32>,
}

/// A training batch: utterances crossed with a shared candidate set.
/// Labels are decided by the contiguous-subsequence scan per pair.
#[derive(Debug, Clone)]
pub struct Batch {
    pub utt_indices: Vec<usize>,
    pub candidates: Vec<Candidate>,
    /// labels[u][c] for utterance u, candidate c.
    pub labels: Vec<Vec<bool>>,
    /// True when positives alone exceeded the cap and were subsampled.
    pub truncated_positives: bool,
}

/// Batch from explicitly chosen utterances (the epoch loop drives this
/// with shuffled passes).
pub fn build_batch_from(
    corpus: &Corpus,
    utt_indices: &[usize],
    bank: &TermBank,
    stage: CurriculumStage,
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if utt_indices.is_empty() {
        return Err(EngineError::BatchComposition(
            "no utterances available for this stage".into(),
        ));
    }
    let cap = cfg.max_bank_per_batch;
    let mut candidates: Vec<Candidate> = Vec::new();
    let mut seen: std::collections::HashSet<Vec<u32>> = std::collections::HashSet::new();
    for &u in utt_indices {
        let sampled = sample_stage_terms(&corpus.utterances[u], stage, rng)
            .expect("stage-eligible utterance");
        for t in sampled {
            if seen.insert(t.token_ids.clone()) {
                candidates.push(Candidate {
                    term_id: t.term_id,
                    token_ids: t.token_ids,
                });
            }
        }
    }
    let mut truncated_positives = false;
    if candidates.len() > cap {
        // uniform positive subsample down to the cap
        candidates.shuffle(rng);
        candidates.truncate(cap);
        truncated_positives = true;
    } else {
        // fill the remaining capacity with bank negatives
        let mut order: Vec<usize> = (0..bank.len()).collect();
        order.shuffle(rng);
        for b in order {
            if candidates.len() >= cap {
                break;
            }
            let e = &bank.entries[b];
            if seen.insert(e.token_ids.clone()) {
                candidates.push(Candidate {
                    term_id: Some(e.term_id),
                    token_ids: e.token_ids.clone(),
                });
            }
        }
    }
    let labels: Vec<Vec<bool>> = utt_indices
        .iter()
        .map(|&u| {
            let toks = &corpus.utterances[u].token_ids;
            candidates
                .iter()
                .map(|c| contains_subsequence(toks, &c.token_ids))
                .collect()
        })
        .collect();
    Ok(Batch {
        utt_indices: utt_indices.to_vec(),
        candidates,
        labels,
        truncated_positives,
    })
}

/// Spec entry point: samples `cfg.batch_size` stage-eligible utterances
/// and delegates.
pub fn build_batch(
    corpus: &Corpus,
    bank: &TermBank,
    stage: CurriculumStage,
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let eligible = stage_eligible(corpus, stage);
    if eligible.is_empty() {
        return Err(EngineError::BatchComposition(format!(
            "no utterances eligible for stage {}",
            stage.name()
        )));
    }
    let mut idx = eligible;
    idx.shuffle(rng);
    idx.truncate(cfg.batch_size);
    build_batch_from(corpus, &idx, bank, stage, cfg, rng)
}

fn stage_eligible(corpus: &Corpus, stage: CurriculumStage) -> Vec<usize> {
    (0..corpus.len())
        .filter(|&u| {
            let utt = &corpus.utterances[u];
            utt.token_ids.len() >= 4
                && (stage != CurriculumStage::RealTerm || !utt.positive_terms.is_empty())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Step and curriculum driver
// ---------------------------------------------------------------------------

/// One forward/backward/update over a batch. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut RetrieverParams,
    opt: &mut AdamState,
    batch: &Batch,
    corpus: &Corpus,
    emb: &EmbeddingTable,
    cfg: &TrainingConfig,
    pooling: PoolingMode,
    step: usize,
    lr: f64,
) -> Result<f64> {
    let n_pos: usize = batch.labels.iter().flatten().filter(|l| **l).count();
    let n_neg = batch.labels.len() * batch.candidates.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EngineError::BatchComposition(format!(
            "batch needs both groups: {n_pos} positives, {n_neg} negatives"
        )));
    }
    let cand_feats: Vec<Tensor2> = batch
        .candidates
        .iter()
        .map(|c| emb.lookup(&c.token_ids))
        .collect();
    let mut grads = RetrieverParamsG::zeros(params.d, params.heads);
    let eps = cfg.pooling_eps as f64;
    let mut loss = 0.0f64;
    for (ui, &u) in batch.utt_indices.iter().enumerate() {
        let speech = &corpus.features[u];
        let (k, v) = project_speech(params, &speech.frames)?;
        let mut d_k = k.zeros_like();
        let mut d_v = v.zeros_like();
        for (ci, h_t) in cand_feats.iter().enumerate() {
            let mask = vec![true; h_t.rows];
            let mut drop_rng =
                seeds::stream_indexed(cfg.seed, "dropout", &[step as u64, ui as u64, ci as u64]);
            let cache = forward(
                params,
                eps,
                pooling,
                &k,
                &v,
                &speech.frame_mask,
                h_t,
                &mask,
                Some(&mut drop_rng),
            )?;
            let y = batch.labels[ui][ci];
            let p = (cache.prob as f64).clamp(1e-7, 1.0 - 1e-7);
            let (pair_loss, d_logit) = if y {
                (-p.ln() / n_pos as f64, (cache.prob as f64 - 1.0) / n_pos as f64)
            } else {
                (-(1.0 - p).ln() / n_neg as f64, cache.prob as f64 / n_neg as f64)
            };
            loss += pair_loss;
            backward(
                params,
                eps,
                pooling,
                &cache,
                &k,
                &v,
                &speech.frame_mask,
                h_t,
                &mask,
                d_logit as f32,
                &mut grads,
                &mut d_k,
                &mut d_v,
            )?;
        }
        accumulate_speech_grads(&speech.frames, &d_k, &d_v, &mut grads)?;
    }
    clip_grad_norm(&mut grads, cfg.grad_clip);
    adamw_step(params, &grads, opt, step, lr, cfg)?;
    Ok(loss)
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub stage: &'static str,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub stage: &'static str,
    pub recall_at_10: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRow>,
    pub epochs: Vec<EpochRow>,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,stage,lr,loss\n");
        for r in &self.steps {
            s.push_str(&format!("{},{},{:.3e},{:.6}\n", r.step, r.stage, r.lr, r.loss));
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,stage,recall_at_10\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{},{:.2}\n", r.epoch, r.stage, r.recall_at_10));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: RetrieverParams,
    pub log: TrainLog,
    /// Parameter snapshot at the end of each executed stage.
    pub stage_checkpoints: Vec<(CurriculumStage, RetrieverParams)>,
}

/// Micro-averaged recall@k of the current params over (a slice of) a
/// corpus against the bank.
#[allow(clippy::too_many_arguments)]
pub fn validation_recall(
    params: &RetrieverParams,
    eps: f32,
    corpus: &Corpus,
    bank: &TermBank,
    bank_feats: &[TermFeatures],
    k: usize,
    max_utts: usize,
    pooling: PoolingMode,
) -> Result<f64> {
    let mut gold_total = 0usize;
    let mut hits = 0usize;
    for (utt, speech) in corpus
        .utterances
        .iter()
        .zip(&corpus.features)
        .take(max_utts)
    {
        if utt.positive_terms.is_empty() {
            continue;
        }
        let gold: std::collections::HashSet<u64> =
            utt.positive_terms.iter().map(|t| t.term_id).collect();
        let probs =
            crate::retriever::score_bank_pooling(params, eps, speech, bank_feats, 32, pooling)?;
        let top = crate::serving::top_k_select(&probs, k);
        gold_total += gold.len();
        hits += top
            .iter()
            .filter(|&&i| gold.contains(&bank.entries[i].term_id))
            .count();
    }
    if gold_total == 0 {
        return Err(EngineError::Protocol(
            "validation corpus has no annotated terms".into(),
        ));
    }
    Ok(hits as f64 / gold_total as f64 * 100.0)
}

/// Sequential Word -> Phrase -> RealTerm training on one parameter set.
/// Stages with a zero step budget are skipped (the curriculum-ablation
/// arms). Divergence aborts with a numeric error; the caller still has
/// the last stage checkpoints via files it wrote, and tests get the
/// error directly.
pub fn run_curriculum(
    train: &Corpus,
    val: &Corpus,
    bank: &TermBank,
    emb: &EmbeddingTable,
    cfg: &TrainingConfig,
    pooling: PoolingMode,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut init_rng = seeds::stream(cfg.seed, "init");
    let mut params =
        RetrieverParams::init(cfg.embed_dim, cfg.heads, cfg.dropout_p, &mut init_rng)?;
    let mut opt = AdamState::new(&params);
    let bank_feats = bank.to_features(emb);
    let total_steps = cfg.total_steps().max(1);
    let mut log = TrainLog::default();
    let mut stage_checkpoints = Vec::new();
    let mut step = 0usize;
    let mut epoch = 0usize;

    for (si, stage) in CurriculumStage::ALL.into_iter().enumerate() {
        let budget = cfg.stage_steps[si];
        if cfg.skip_stages[si] {
            // Removed stage: no training, but the LR schedule still
            // advances through its slot of the shared base schedule.
            step += budget;
            continue;
        }
        if budget == 0 {
            continue;
        }
        let eligible = stage_eligible(train, stage);
        if eligible.is_empty() {
            return Err(EngineError::BatchComposition(format!(
                "no utterances eligible for stage {}",
                stage.name()
            )));
        }
        let mut rng = seeds::stream_indexed(cfg.seed, "stage", &[si as u64]);
        let stage_end = step + budget;
        let mut best_recall = f64::NEG_INFINITY;
        let mut stagnant = 0usize;
        let mut stage_epochs = 0usize;
        'stage: while step < stage_end {
            // one epoch: a shuffled pass over the eligible utterances
            let mut order = eligible.clone();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                if step >= stage_end {
                    break;
                }
                step += 1;
                let batch = build_batch_from(train, chunk, bank, stage, cfg, &mut rng)?;
                let lr = lr_at(step, cfg, total_steps);
                let loss = train_step(
                    &mut params, &mut opt, &batch, train, emb, cfg, pooling, step, lr,
                )?;
                if !loss.is_finite() || !params.is_finite() {
                    return Err(EngineError::Numeric(format!(
                        "training diverged at step {step} (stage {}); last stage checkpoint \
                         is the most recent good state",
                        stage.name()
                    )));
                }
                log.steps.push(StepRow {
                    step,
                    stage: stage.name(),
                    lr,
                    loss,
                });
            }
            epoch += 1;
            stage_epochs += 1;
            let recall = validation_recall(
                &params,
                cfg.pooling_eps,
                val,
                bank,
                &bank_feats,
                10,
                cfg.val_utterances,
                pooling,
            )?;
            log.epochs.push(EpochRow {
                epoch,
                stage: stage.name(),
                recall_at_10: recall,
            });
            if recall > best_recall {
                best_recall = recall;
                stagnant = 0;
            } else {
                stagnant += 1;
                if stagnant >= cfg.early_stop_patience {
                    break 'stage;
                }
            }
            if stage_epochs >= cfg.max_epochs {
                break 'stage;
            }
        }
        stage_checkpoints.push((stage, params.clone()));
    }
    Ok(TrainOutcome {
        params,
        log,
        stage_checkpoints,
    })
}
