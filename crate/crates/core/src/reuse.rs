//! Token-wise activation reuse: cached key/value projections (KV mode) or
//! cached attention outputs (O mode), selected per layer and step by query
//! drift, plus staleness bookkeeping and the layer/step gating knobs.
//!
//! Reused rows are spliced into freshly computed matrices, and a refreshed row
//! is always computed with the same row kernel the full path uses, so an
//! empty reuse set reproduces the full model bit for bit.

use serde::{Deserialize, Serialize};

use crate::drift::{self, DriftProfile, HeadScoring, Threshold};
use crate::error::{DareError, Result};
use crate::linalg::Matrix;
use crate::model::{self, AttentionParts, ForwardOutput, LayerWeights, ModelWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReuseMode {
    #[default]
    Full,
    Kv,
    O,
}

impl std::str::FromStr for ReuseMode {
    type Err = DareError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(ReuseMode::Full),
            "kv" => Ok(ReuseMode::Kv),
            "o" => Ok(ReuseMode::O),
            other => Err(DareError::InvalidConfig(format!("unknown reuse mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ReuseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReuseMode::Full => "full",
            ReuseMode::Kv => "kv",
            ReuseMode::O => "o",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ReuseConfig {
    pub mode: ReuseMode,
    /// Layers below this index always recompute.
    #[serde(default)]
    pub skip_first_layers: usize,
    /// Steps with `t mod r == 0` recompute everything. `None`: only the first
    /// step of a block does.
    #[serde(default)]
    pub refresh_interval: Option<u32>,
    #[serde(default)]
    pub scoring: HeadScoring,
}

/// Whether reuse is permitted at `(layer, step)`.
pub fn gate(layer: usize, step: usize, skip_first_layers: usize, refresh_interval: Option<u32>) -> bool {
    if layer < skip_first_layers || step == 0 {
        return false;
    }
    match refresh_interval {
        Some(r) => !step.is_multiple_of(r.max(1) as usize),
        None => true,
    }
}

/// Consecutive-reuse counter: reused tokens age by one, refreshed tokens
/// reset to zero.
pub fn update_staleness(delta: &[u32], reused: &[usize]) -> Vec<u32> {
    let mut out = vec![0; delta.len()];
    for &i in reused {
        out[i] = delta[i] + 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReuseDecision {
    pub layer: usize,
    pub step: usize,
    pub reused: Vec<usize>,
    pub refreshed: Vec<usize>,
    /// False when the slot was forced to a full recompute (gating, first step
    /// of a block, or full mode); such slots are excluded from reuse rates.
    pub eligible: bool,
    pub staleness_l2: f64,
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    q: Option<Matrix>,
    k: Option<Matrix>,
    v: Option<Matrix>,
    attn: Option<Matrix>,
}

/// Mutable reuse state for one generation.
#[derive(Debug, Clone)]
pub struct ReuseState {
    pub config: ReuseConfig,
    pub tau_layer: Vec<Threshold>,
    heads: usize,
    block_len: usize,
    caches: Vec<LayerCache>,
    staleness: Vec<Vec<u32>>,
    forced: Vec<Option<Vec<usize>>>,
}

impl ReuseState {
    pub fn new(weights: &ModelWeights, config: ReuseConfig, profile: &DriftProfile) -> Result<Self> {
        let cfg = &weights.config;
        if config.mode != ReuseMode::Full && profile.layers() != cfg.layers {
            return Err(DareError::InvalidConfig(format!(
                "drift profile has {} layers, model has {}",
                profile.layers(),
                cfg.layers
            )));
        }
        let mut tau_layer = profile.tau_layer.clone();
        tau_layer.resize(cfg.layers, None);
        Ok(Self {
            config,
            tau_layer,
            heads: cfg.heads,
            block_len: cfg.block_len,
            caches: vec![LayerCache::default(); cfg.layers],
            staleness: vec![vec![0; cfg.block_len]; cfg.layers],
            forced: vec![None; cfg.layers],
        })
    }

    pub fn mode(&self) -> ReuseMode {
        self.config.mode
    }

    /// Drops all cached activations and staleness (start of a new block).
    pub fn reset(&mut self) {
        for c in &mut self.caches {
            *c = LayerCache::default();
        }
        for row in &mut self.staleness {
            row.iter_mut().for_each(|d| *d = 0);
        }
    }

    /// Staleness matrix `Δ`, one row of `B` counters per layer.
    pub fn staleness(&self) -> &[Vec<u32>] {
        &self.staleness
    }

    /// Replaces the drift-selected reuse set of `layer` with `set` on every
    /// eligible step until cleared with `None`.
    pub fn force_reuse_set(&mut self, layer: usize, set: Option<Vec<usize>>) {
        self.forced[layer] = set;
    }

    fn select(&self, layer: usize, step: usize, q: &Matrix, have_cache: bool) -> Result<(Vec<usize>, bool)> {
        if !gate(layer, step, self.config.skip_first_layers, self.config.refresh_interval) {
            return Ok((Vec::new(), false));
        }
        let prev_q = self.caches[layer].q.as_ref();
        let (Some(prev_q), true) = (prev_q, have_cache) else {
            return Err(DareError::Contract(format!(
                "layer {layer} step {step}: no cached state from the previous step"
            )));
        };
        if let Some(forced) = &self.forced[layer] {
            return Ok((forced.clone(), true));
        }
        let Some(tau) = self.tau_layer[layer] else {
            return Ok((Vec::new(), true));
        };
        let scores = drift::token_scores(q, prev_q, self.heads, self.config.scoring)?;
        Ok((drift::select_reused(&scores, tau), true))
    }

    fn finish(&mut self, layer: usize, step: usize, reused: Vec<usize>, eligible: bool) -> ReuseDecision {
        let delta = update_staleness(&self.staleness[layer], &reused);
        let staleness_l2 = delta.iter().map(|d| f64::from(*d).powi(2)).sum::<f64>().sqrt();
        self.staleness[layer] = delta;
        let refreshed = complement(&reused, self.block_len);
        ReuseDecision { layer, step, reused, refreshed, eligible, staleness_l2 }
    }
}

fn complement(set: &[usize], n: usize) -> Vec<usize> {
    let mut mark = vec![false; n];
    for &i in set {
        mark[i] = true;
    }
    (0..n).filter(|i| !mark[*i]).collect()
}

fn splice_rows(base: Option<&Matrix>, fresh: &Matrix, fresh_rows: &[usize], shape: (usize, usize)) -> Matrix {
    let mut out = base.cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
    for (k, &i) in fresh_rows.iter().enumerate() {
        out.copy_row_from(i, fresh.row(k));
    }
    out
}

/// KV reuse for one layer: queries are always recomputed; keys and values of
/// reused tokens come from the cache, the rest are projected afresh.
/// Returns the attention parts (pre-`W_O` output in `attn`).
pub fn dare_kv_layer_step(
    lw: &LayerWeights,
    x_norm: &Matrix,
    state: &mut ReuseState,
    layer: usize,
    step: usize,
) -> Result<(AttentionParts, ReuseDecision)> {
    if state.mode() != ReuseMode::Kv {
        return Err(DareError::Contract("dare_kv_layer_step needs a kv-mode state".into()));
    }
    let q = x_norm.matmul(&lw.w_q)?;
    let cache = &state.caches[layer];
    let have = cache.k.is_some() && cache.v.is_some();
    let (reused, eligible) = state.select(layer, step, &q, have)?;
    let refreshed = complement(&reused, x_norm.rows());
    let shape = (x_norm.rows(), lw.w_k.cols());
    let cache = &state.caches[layer];
    let k = splice_rows(cache.k.as_ref(), &x_norm.matmul_rows(&refreshed, &lw.w_k)?, &refreshed, shape);
    let v = splice_rows(cache.v.as_ref(), &x_norm.matmul_rows(&refreshed, &lw.w_v)?, &refreshed, shape);
    let attn = model::attention(&q, &k, &v, state.heads)?;
    let cache = &mut state.caches[layer];
    cache.q = Some(q.clone());
    cache.k = Some(k.clone());
    cache.v = Some(v.clone());
    let decision = state.finish(layer, step, reused, eligible);
    Ok((AttentionParts { q, k, v, attn }, decision))
}

/// Output reuse for one layer: queries, keys and values are recomputed; only
/// refreshed tokens run attention, reused tokens take their cached pre-`W_O`
/// output row.
pub fn dare_o_layer_step(
    lw: &LayerWeights,
    x_norm: &Matrix,
    state: &mut ReuseState,
    layer: usize,
    step: usize,
) -> Result<(AttentionParts, ReuseDecision)> {
    if state.mode() != ReuseMode::O {
        return Err(DareError::Contract("dare_o_layer_step needs an o-mode state".into()));
    }
    let q = x_norm.matmul(&lw.w_q)?;
    let k = x_norm.matmul(&lw.w_k)?;
    let v = x_norm.matmul(&lw.w_v)?;
    let have = state.caches[layer].attn.is_some();
    let (reused, eligible) = state.select(layer, step, &q, have)?;
    let refreshed = complement(&reused, x_norm.rows());
    let fresh = model::attention_rows(&q, &k, &v, state.heads, &refreshed)?;
    let attn = splice_rows(state.caches[layer].attn.as_ref(), &fresh, &refreshed, (q.rows(), v.cols()));
    let cache = &mut state.caches[layer];
    cache.q = Some(q.clone());
    cache.attn = Some(attn.clone());
    let decision = state.finish(layer, step, reused, eligible);
    Ok((AttentionParts { q, k, v, attn }, decision))
}

/// Runs the whole layer stack for one denoising step under the state's mode.
pub fn step_forward(
    weights: &ModelWeights,
    x: &Matrix,
    state: &mut ReuseState,
    step: usize,
) -> Result<(ForwardOutput, Vec<ReuseDecision>)> {
    let heads = weights.config.heads;
    let mut decisions = Vec::with_capacity(weights.config.layers);
    let out = model::forward_with(weights, x, |layer, lw, xn| {
        let (parts, decision) = match state.mode() {
            ReuseMode::Full => {
                let parts = model::full_attention(lw, xn, heads)?;
                state.caches[layer].q = Some(parts.q.clone());
                (parts, state.finish(layer, step, Vec::new(), false))
            }
            ReuseMode::Kv => dare_kv_layer_step(lw, xn, state, layer, step)?,
            ReuseMode::O => dare_o_layer_step(lw, xn, state, layer, step)?,
        };
        decisions.push(decision);
        Ok(parts)
    })?;
    Ok((out, decisions))
}
