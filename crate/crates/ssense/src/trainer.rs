//! Contrastive training: InfoNCE over sEEG/text pairs, Adam updates, early
//! stopping on validation Recall@10, and the multi-seed experiment protocol.
//!
//! The text side is frozen: gradients flow only to the signal encoder.

use std::collections::HashMap;
use std::time::Instant;

use ndarray::Array5;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_masks, MaskConfig};
use crate::config::{EvalSection, TrainSection};
use crate::encoder::{
    backward_sample, encode_sample, encode_sample_cached, init_params, param_count, EncoderSpec,
    Parameters, EMBED_DIM,
};
use crate::error::{Error, Result};
use crate::eval::{rank_queries, recall_at_k, report_from_ranks, RetrievalReport};
use crate::signal_io::SplitAssignment;
use crate::superlet::SpectroBatch;

/// Everything the loop needs: standardized spectrograms plus the frozen text
/// embedding for every pair, index-aligned.
pub struct TrainData {
    pub spectra: SpectroBatch,
    pub sentences: Vec<String>,
    pub text_embeddings: Vec<Vec<f64>>,
    pub source_tag: String,
}

impl TrainData {
    pub fn n_pairs(&self) -> usize {
        self.sentences.len()
    }
}

/// InfoNCE loss and its gradient with respect to the signal-side rows.
///
/// `L_i = -log softmax_j(sim(z_i, t_j)/tau)` at `j = i`, averaged over the
/// batch. The cosine is computed with explicit norms, so rows need not be
/// pre-normalized. With `symmetric`, the text-to-signal direction is averaged
/// in; the gradient still flows only to `z_seeg`.
pub fn info_nce(
    z_seeg: &[Vec<f64>],
    z_text: &[Vec<f64>],
    tau: f64,
    symmetric: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = z_seeg.len();
    assert_eq!(n, z_text.len());
    let dim = z_seeg[0].len();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let z_norms: Vec<f64> = z_seeg.iter().map(|v| norm(v)).collect();
    let t_norms: Vec<f64> = z_text.iter().map(|v| norm(v)).collect();
    let u: Vec<Vec<f64>> = z_seeg
        .iter()
        .zip(&z_norms)
        .map(|(v, &nm)| v.iter().map(|x| x / nm).collect())
        .collect();
    let v: Vec<Vec<f64>> = z_text
        .iter()
        .zip(&t_norms)
        .map(|(w, &nm)| w.iter().map(|x| x / nm).collect())
        .collect();

    // cosine similarity matrix
    let mut sim = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            let s: f64 = u[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
            if !s.is_finite() {
                return Err(Error::NonFiniteSimilarity { row: i, col: j });
            }
            sim[i][j] = s;
        }
    }

    // row softmax over sim/tau, max-shifted
    let mut p = vec![vec![0.0f64; n]; n];
    let mut loss = 0.0;
    for i in 0..n {
        let row_max = sim[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..n {
            let e = ((sim[i][j] - row_max) / tau).exp();
            p[i][j] = e;
            denom += e;
        }
        for j in 0..n {
            p[i][j] /= denom;
        }
        loss -= (sim[i][i] - row_max) / tau - denom.ln();
    }
    loss /= n as f64;

    // dL/dsim
    let scale = 1.0 / (n as f64 * tau);
    let mut g_sim = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            g_sim[i][j] = (p[i][j] - if i == j { 1.0 } else { 0.0 }) * scale;
        }
    }
    if symmetric {
        // column softmax direction, same diagonal positives
        let mut q = vec![vec![0.0f64; n]; n];
        let mut loss_ts = 0.0;
        for j in 0..n {
            let col_max = (0..n).map(|i| sim[i][j]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for i in 0..n {
                let e = ((sim[i][j] - col_max) / tau).exp();
                q[i][j] = e;
                denom += e;
            }
            for i in 0..n {
                q[i][j] /= denom;
            }
            loss_ts -= (sim[j][j] - col_max) / tau - denom.ln();
        }
        loss_ts /= n as f64;
        loss = 0.5 * (loss + loss_ts);
        for i in 0..n {
            for j in 0..n {
                let g_ts = (q[i][j] - if i == j { 1.0 } else { 0.0 }) * scale;
                g_sim[i][j] = 0.5 * (g_sim[i][j] + g_ts);
            }
        }
    }

    // chain through the cosine: dsim_ij/dz_i = (v_j - sim_ij * u_i) / ||z_i||
    let mut grads = vec![vec![0.0f64; dim]; n];
    for i in 0..n {
        for j in 0..n {
            let g = g_sim[i][j];
            if g == 0.0 {
                continue;
            }
            for d in 0..dim {
                grads[i][d] += g * (v[j][d] - sim[i][j] * u[i][d]) / z_norms[i];
            }
        }
    }
    Ok((loss, grads))
}

/// Adam moment state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Standard bias-corrected Adam update, in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut Parameters,
    grads: &[f64],
    lr: f64,
) -> Result<()> {
    if grads.len() != params.values.len() || state.m.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            expected: params.values.len(),
            actual: grads.len(),
        });
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for k in 0..grads.len() {
        let g = grads[k];
        state.m[k] = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g;
        state.v[k] = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        params.values[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Early stopping on a maximized metric; "improvement" is strictly greater,
/// so plateaus count toward patience.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<f64>,
    epochs_since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            epochs_since_improvement: 0,
        }
    }

    /// Record one epoch's metric; returns true if it improved on the best.
    pub fn update(&mut self, metric: f64) -> bool {
        match self.best {
            Some(b) if metric <= b => {
                self.epochs_since_improvement += 1;
                false
            }
            _ => {
                self.best = Some(metric);
                self.epochs_since_improvement = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_since_improvement >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recall10: f64,
    pub elapsed_s: f64,
}

pub struct TrainOutcome {
    pub params: Parameters,
    pub best_val_recall10: f64,
    pub epochs_run: usize,
    pub log: Vec<EpochLog>,
}

/// Candidate pool: unique sentences in first-occurrence order over a set of
/// pair indices, with a text -> pool-index map.
pub struct CandidatePool {
    pub sentences: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
    index_of: HashMap<String, usize>,
}

impl CandidatePool {
    pub fn build(data: &TrainData, pair_indices: &[usize]) -> Self {
        let mut sentences = Vec::new();
        let mut embeddings = Vec::new();
        let mut index_of = HashMap::new();
        for &i in pair_indices {
            let s = &data.sentences[i];
            if !index_of.contains_key(s) {
                index_of.insert(s.clone(), sentences.len());
                sentences.push(s.clone());
                embeddings.push(data.text_embeddings[i].clone());
            }
        }
        CandidatePool {
            sentences,
            embeddings,
            index_of,
        }
    }

    pub fn truth_index(&self, sentence: &str) -> Result<usize> {
        self.index_of
            .get(sentence)
            .copied()
            .ok_or_else(|| Error::MissingEmbedding(sentence.to_string()))
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Resolve the eval pool per config: the evaluated split's own sentences or
/// every sentence in the archive.
pub fn pool_for(data: &TrainData, eval: &EvalSection, split_indices: &[usize]) -> CandidatePool {
    if eval.pool == "all" {
        let all: Vec<usize> = (0..data.n_pairs()).collect();
        CandidatePool::build(data, &all)
    } else {
        CandidatePool::build(data, split_indices)
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Clean (unmasked) embeddings for the given pair indices.
pub fn encode_indices(
    data: &TrainData,
    spec: &EncoderSpec,
    params: &Parameters,
    indices: &[usize],
) -> Result<Vec<Vec<f64>>> {
    indices
        .iter()
        .map(|&i| {
            let view = data.spectra.values.slice(ndarray::s![i, .., 0, .., ..]);
            encode_sample(spec, params, view).map(|e| e.0)
        })
        .collect()
}

fn eval_recall10(
    data: &TrainData,
    spec: &EncoderSpec,
    params: &Parameters,
    indices: &[usize],
    pool: &CandidatePool,
) -> Result<f64> {
    let queries = encode_indices(data, spec, params, indices)?;
    let truth: Vec<usize> = indices
        .iter()
        .map(|&i| pool.truth_index(&data.sentences[i]))
        .collect::<Result<_>>()?;
    let ranks = rank_queries(&queries, &pool.embeddings, &truth)?;
    recall_at_k(&ranks, 10)
}

/// One contrastive training run: seeded shuffling, masking augmentation,
/// batched forward/backward, Adam, early stopping on validation Recall@10.
/// Returns the parameters from the best validation epoch.
pub fn train(
    data: &TrainData,
    split: &SplitAssignment,
    spec: &EncoderSpec,
    cfg: &TrainSection,
    mask: &MaskConfig,
    eval_cfg: &EvalSection,
) -> Result<TrainOutcome> {
    if split.train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if split.val.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    for &i in split.train.iter().chain(&split.val) {
        if data.text_embeddings[i].len() != EMBED_DIM {
            return Err(Error::EmbeddingDim(data.text_embeddings[i].len() as u32));
        }
    }

    let start = Instant::now();
    let mut params = init_params(spec)?;
    let mut adam = AdamState::new(param_count(spec));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = params.clone();
    let val_pool = pool_for(data, eval_cfg, &split.val);
    let (_, e_dim, _, f_dim, t_dim) = data.spectra.values.dim();
    let mut log = Vec::new();
    let mut epochs_run = 0;

    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let mut order = split.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            // assemble the batch tensor and apply training-time masks
            let mut values =
                Array5::<f64>::zeros((batch.len(), e_dim, 1, f_dim, t_dim));
            for (bi, &pair) in batch.iter().enumerate() {
                values
                    .slice_mut(ndarray::s![bi, .., .., .., ..])
                    .assign(&data.spectra.values.slice(ndarray::s![pair, .., .., .., ..]));
            }
            let mut masked = SpectroBatch {
                values,
                freqs_hz: data.spectra.freqs_hz.clone(),
                hop: data.spectra.hop,
                config_digest: data.spectra.config_digest.clone(),
            };
            if !mask.is_noop() {
                let mut batch_mask = *mask;
                batch_mask.seed = splitmix64(
                    mask.seed ^ splitmix64((epoch as u64) << 24 | batch_idx as u64),
                );
                apply_masks(&mut masked, &batch_mask);
            }

            let mut z_seeg = Vec::with_capacity(batch.len());
            let mut caches = Vec::with_capacity(batch.len());
            for bi in 0..batch.len() {
                let view = masked.values.slice(ndarray::s![bi, .., 0, .., ..]);
                let (emb, cache) = encode_sample_cached(spec, &params, view)?;
                z_seeg.push(emb.0);
                caches.push(cache);
            }
            let z_text: Vec<Vec<f64>> = batch
                .iter()
                .map(|&i| data.text_embeddings[i].clone())
                .collect();
            let (loss, grads_z) = info_nce(&z_seeg, &z_text, cfg.temperature, cfg.symmetric)?;
            loss_sum += loss * batch.len() as f64;

            let mut grad = vec![0.0f64; param_count(spec)];
            for (cache, g) in caches.iter().zip(&grads_z) {
                backward_sample(spec, &params, cache, g, &mut grad);
            }
            adam_step(&mut adam, &mut params, &grad, cfg.learning_rate)?;
        }

        let val_recall10 = eval_recall10(data, spec, &params, &split.val, &val_pool)?;
        if stopper.update(val_recall10) {
            best_params = params.clone();
        }
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_recall10,
            elapsed_s: start.elapsed().as_secs_f64(),
        });
        if stopper.should_stop() {
            break;
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        best_val_recall10: stopper.best().unwrap_or(0.0),
        epochs_run,
        log,
    })
}

/// Score a trained encoder on a pair-index set.
pub fn evaluate(
    data: &TrainData,
    spec: &EncoderSpec,
    params: &Parameters,
    indices: &[usize],
    eval_cfg: &EvalSection,
    seed: u64,
    config_digest: &str,
) -> Result<RetrievalReport> {
    if indices.is_empty() {
        return Err(Error::EmptySplit("eval"));
    }
    let pool = pool_for(data, eval_cfg, indices);
    let queries = encode_indices(data, spec, params, indices)?;
    let truth: Vec<usize> = indices
        .iter()
        .map(|&i| pool.truth_index(&data.sentences[i]))
        .collect::<Result<_>>()?;
    let ranks = rank_queries(&queries, &pool.embeddings, &truth)?;
    report_from_ranks(
        ranks,
        pool.len(),
        &eval_cfg.ks,
        seed,
        config_digest,
        &data.source_tag,
    )
}

/// The multi-seed protocol: per seed a fresh split, fresh init, full training
/// run, and evaluation on that seed's untouched test set.
pub fn run_protocol(
    data: &TrainData,
    spec: &EncoderSpec,
    cfg: &TrainSection,
    mask: &MaskConfig,
    eval_cfg: &EvalSection,
    seeds: &[u64],
    config_digest: &str,
) -> Result<Vec<(RetrievalReport, TrainOutcome)>> {
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let split = crate::signal_io::make_split(data.n_pairs(), seed)?;
        debug_assert!(split.test.iter().all(|i| !split.train.contains(i)
            && !split.val.contains(i)));
        let mut seed_spec = spec.clone();
        seed_spec.init_seed = spec.init_seed ^ splitmix64(seed);
        let mut seed_cfg = cfg.clone();
        seed_cfg.seed = seed;
        let outcome = train(data, &split, &seed_spec, &seed_cfg, mask, eval_cfg)?;
        let report = evaluate(
            data,
            &seed_spec,
            &outcome.params,
            &split.test,
            eval_cfg,
            seed,
            config_digest,
        )?;
        out.push((report, outcome));
    }
    Ok(out)
}
