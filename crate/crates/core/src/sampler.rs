//! Block-wise masked-diffusion generation and the maximally coupled paired
//! sampler used to compare a reuse run against the full model.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::drift::DriftProfile;
use crate::error::{DareError, Result};
use crate::linalg::{self, Matrix};
use crate::model::{self, LayerActivations, ModelWeights};
use crate::reuse::{self, ReuseConfig, ReuseDecision, ReuseMode, ReuseState};

const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub gen_length: usize,
    pub block_size: usize,
    pub steps_per_block: usize,
    pub tokens_unmasked_per_step: usize,
    /// 0 means greedy.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            gen_length: 32,
            block_size: 8,
            steps_per_block: 8,
            tokens_unmasked_per_step: 1,
            temperature: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, block_len: usize) -> Result<()> {
        let bad = |m: String| Err(DareError::InvalidConfig(m));
        if self.block_size != block_len {
            return bad(format!("block_size {} differs from model block length {block_len}", self.block_size));
        }
        if self.block_size == 0 || self.gen_length == 0 || !self.gen_length.is_multiple_of(self.block_size) {
            return bad(format!(
                "gen_length {} must be a positive multiple of block_size {}",
                self.gen_length, self.block_size
            ));
        }
        if self.tokens_unmasked_per_step * self.steps_per_block < self.block_size {
            return bad(format!(
                "{} tokens/step over {} steps cannot resolve a block of {}",
                self.tokens_unmasked_per_step, self.steps_per_block, self.block_size
            ));
        }
        if !(self.temperature >= 0.0) {
            return bad(format!("temperature must be >= 0, got {}", self.temperature));
        }
        Ok(())
    }
}

/// Activations captured at one step, for offline analysis and calibration.
#[derive(Debug, Clone)]
pub struct StepActivations {
    pub tokens: Vec<usize>,
    pub layers: Vec<LayerActivations>,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub block: usize,
    pub step: usize,
    pub decisions: Vec<ReuseDecision>,
    /// Positions unmasked at this step.
    pub unmasked: Vec<usize>,
    pub activations: Option<StepActivations>,
}

#[derive(Debug, Clone)]
pub struct GenerationTrace {
    pub mode: ReuseMode,
    pub layers: usize,
    pub block_len: usize,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Serialize)]
struct TraceLine {
    block: usize,
    step: usize,
    layer: usize,
    reused_count: usize,
    refreshed_count: usize,
    staleness_l2: f64,
}

impl GenerationTrace {
    pub fn decisions(&self) -> impl Iterator<Item = &ReuseDecision> {
        self.steps.iter().flat_map(|s| s.decisions.iter())
    }

    /// Reused token slots over reuse-eligible token slots.
    pub fn reuse_fraction(&self) -> f64 {
        let (mut reused, mut slots) = (0usize, 0usize);
        for d in self.decisions().filter(|d| d.eligible) {
            reused += d.reused.len();
            slots += d.reused.len() + d.refreshed.len();
        }
        if slots == 0 {
            0.0
        } else {
            reused as f64 / slots as f64
        }
    }

    /// Token slots forced to a full recompute by gating in a reuse mode.
    pub fn gated_slots(&self) -> usize {
        self.decisions().filter(|d| !d.eligible).map(|d| d.refreshed.len()).sum()
    }

    /// One JSON object per (step, layer).
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            for d in &s.decisions {
                let line = TraceLine {
                    block: s.block,
                    step: s.step,
                    layer: d.layer,
                    reused_count: d.reused.len(),
                    refreshed_count: d.refreshed.len(),
                    staleness_l2: d.staleness_l2,
                };
                serde_json::to_writer(&mut w, &line)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    /// `steps[t][layer]` head-0 query slices per block, for calibration.
    pub fn calibration_traces(&self, d_head: usize) -> Vec<crate::drift::CalibrationTrace> {
        let mut out: Vec<crate::drift::CalibrationTrace> = Vec::new();
        for s in &self.steps {
            let Some(acts) = &s.activations else { continue };
            if s.step == 0 {
                out.push(Default::default());
            }
            let q0 = acts.layers.iter().map(|a| LayerActivations::head_slice(&a.q, 0, d_head)).collect();
            if let Some(t) = out.last_mut() {
                t.steps.push(q0);
            }
        }
        out
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from non-negative weights summing to `total`.
fn categorical(weights: &[f64], total: f64, u: f64) -> usize {
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            last_positive = i;
            acc += w;
            if target < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Sampling distribution over real tokens: mask excluded, temperature applied.
fn sampling_distribution(p: &[f64], mask: usize, temperature: f64) -> Vec<f64> {
    let mut w: Vec<f64> = p.to_vec();
    w[mask] = 0.0;
    if temperature > 0.0 && temperature != 1.0 {
        let logs: Vec<f64> = w
            .iter()
            .map(|x| if *x > 0.0 { x.ln() / temperature } else { f64::NEG_INFINITY })
            .collect();
        w = linalg::softmax(&logs);
    }
    let s: f64 = w.iter().sum();
    if s > 0.0 && s.is_finite() {
        w.iter_mut().for_each(|x| *x /= s);
    } else {
        let n = (w.len() - 1) as f64;
        w.iter_mut().enumerate().for_each(|(i, x)| *x = if i == mask { 0.0 } else { 1.0 / n });
    }
    w
}

/// Masked-diffusion generation, one block of `B` positions at a time.
///
/// Each step runs the layer stack under `reuse_cfg`, proposes a token for
/// every still-masked position, and commits the `tokens_unmasked_per_step`
/// most confident proposals. Committed tokens stay fixed. Blocks are
/// denoised independently and concatenated.
pub fn diffusion_generate(
    weights: &ModelWeights,
    config: &SamplerConfig,
    profile: &DriftProfile,
    reuse_cfg: ReuseConfig,
    record_activations: bool,
) -> Result<(Vec<usize>, GenerationTrace)> {
    let mcfg = &weights.config;
    config.validate(mcfg.block_len)?;
    let b = mcfg.block_len;
    let mask = weights.mask_token;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = ReuseState::new(weights, reuse_cfg, profile)?;
    let mut tokens = Vec::with_capacity(config.gen_length);
    let mut trace = GenerationTrace { mode: reuse_cfg.mode, layers: mcfg.layers, block_len: b, steps: Vec::new() };

    for block in 0..config.gen_length / b {
        state.reset();
        let mut cur = vec![mask; b];
        for step in 0..config.steps_per_block {
            let masked: Vec<usize> = (0..b).filter(|&i| cur[i] == mask).collect();
            if masked.is_empty() {
                break;
            }
            let x = model::embed_tokens(weights, &cur)?;
            let (out, decisions) = reuse::step_forward(weights, &x, &mut state, step)?;
            let mut proposals: Vec<(usize, usize, f64)> = masked
                .iter()
                .map(|&i| {
                    let dist = sampling_distribution(out.probs.row(i), mask, config.temperature);
                    let tok = if config.temperature == 0.0 {
                        argmax(&dist)
                    } else {
                        categorical(&dist, 1.0, rng.random::<f64>())
                    };
                    (i, tok, dist[tok])
                })
                .collect();
            proposals.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            let mut unmasked = Vec::new();
            for &(i, tok, _) in proposals.iter().take(config.tokens_unmasked_per_step) {
                cur[i] = tok;
                unmasked.push(i);
            }
            unmasked.sort_unstable();
            let activations = record_activations.then(|| StepActivations { tokens: x_tokens(&cur, &unmasked, mask), layers: out.layers });
            trace.steps.push(StepRecord { block, step, decisions, unmasked, activations });
        }
        if cur.contains(&mask) {
            return Err(DareError::Contract(format!("block {block} finished with masked positions")));
        }
        tokens.extend_from_slice(&cur);
    }
    Ok((tokens, trace))
}

/// Tokens the step consumed (i.e. before this step's commits).
fn x_tokens(after: &[usize], unmasked: &[usize], mask: usize) -> Vec<usize> {
    let mut before = after.to_vec();
    for &i in unmasked {
        before[i] = mask;
    }
    before
}

/// Draws `(j, ĵ)` from the maximal coupling of `p` and `q`: `j ~ p`, `ĵ ~ q`,
/// and `P(j = ĵ) = Σ min(p, q) = 1 − TV(p, q)`.
///
/// Always consumes three uniforms so paired runs stay aligned on the stream.
pub fn maximal_coupling_sample<R: Rng + ?Sized>(p: &[f64], q: &[f64], rng: &mut R) -> Result<(usize, usize)> {
    if p.len() != q.len() || p.is_empty() {
        return Err(DareError::DimensionMismatch {
            op: "maximal_coupling_sample",
            detail: format!("{} vs {}", p.len(), q.len()),
        });
    }
    for dist in [p, q] {
        let s: f64 = dist.iter().sum();
        if (s - 1.0).abs() > NORMALIZATION_TOL || dist.iter().any(|x| !(*x >= 0.0)) {
            return Err(DareError::NotNormalized(s));
        }
    }
    let (u_branch, u_a, u_b) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
    let overlap: Vec<f64> = p.iter().zip(q).map(|(a, b)| a.min(*b)).collect();
    let rest_p: Vec<f64> = p.iter().zip(&overlap).map(|(a, m)| a - m).collect();
    let rest_q: Vec<f64> = q.iter().zip(&overlap).map(|(b, m)| b - m).collect();
    let mass: f64 = overlap.iter().sum();
    let tv_p: f64 = rest_p.iter().sum();
    let tv_q: f64 = rest_q.iter().sum();
    if tv_p <= 0.0 || tv_q <= 0.0 || u_branch * (mass + tv_p) < mass {
        let j = categorical(&overlap, mass, u_a);
        return Ok((j, j));
    }
    Ok((categorical(&rest_p, tv_p, u_a), categorical(&rest_q, tv_q, u_b)))
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// A full-model run and a reuse run advanced in lockstep under maximal
/// coupling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoupledPair {
    /// Token sequence of each branch entering every step, `T + 1` entries.
    pub full_tokens: Vec<Vec<usize>>,
    pub reuse_tokens: Vec<Vec<usize>>,
    /// `Σ_i ‖x_i − x̂_i‖₂` entering step `t`, for `t = 0..=T`.
    pub per_step_embed_error: Vec<f64>,
    /// `Σ_i ‖p_i(·|X̂) − p̂_i(·|X̂)‖₁` at step `t`, for `t = 0..T`.
    pub per_step_l1_gap: Vec<f64>,
    /// Layer-0 staleness after the reuse decision of step `t`.
    pub staleness: Vec<Vec<u32>>,
    pub reused_counts: Vec<usize>,
}

impl CoupledPair {
    pub fn staleness_l2(&self, t: usize) -> f64 {
        self.staleness[t].iter().map(|d| f64::from(*d).powi(2)).sum::<f64>().sqrt()
    }
}

/// Runs the full model and a reuse model side by side on their own evolving
/// sequences. At each step every position draws a coupled token pair from the
/// two branches' distributions and both sequences move to the drawn tokens'
/// embeddings. Both branches start from an all-mask sequence and share one
/// random stream.
pub fn coupled_generate(
    weights: &ModelWeights,
    steps: usize,
    seed: u64,
    profile: &DriftProfile,
    reuse_cfg: ReuseConfig,
) -> Result<CoupledPair> {
    if reuse_cfg.mode == ReuseMode::Full {
        return Err(DareError::Contract("coupled generation needs a reuse mode".into()));
    }
    let b = weights.config.block_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ReuseState::new(weights, reuse_cfg, profile)?;
    let mut full = vec![weights.mask_token; b];
    let mut approx = full.clone();
    let mut pair = CoupledPair {
        full_tokens: vec![full.clone()],
        reuse_tokens: vec![approx.clone()],
        per_step_embed_error: vec![0.0],
        per_step_l1_gap: Vec::with_capacity(steps),
        staleness: Vec::with_capacity(steps),
        reused_counts: Vec::with_capacity(steps),
    };
    for t in 0..steps {
        let x_full = model::embed_tokens(weights, &full)?;
        let x_hat = model::embed_tokens(weights, &approx)?;
        let p_full = model::forward_full(weights, &x_full)?.probs;
        let (out_hat, decisions) = reuse::step_forward(weights, &x_hat, &mut state, t)?;
        let p_hat = out_hat.probs;
        let p_at_hat = if full == approx { p_full.clone() } else { model::forward_full(weights, &x_hat)?.probs };
        let gap: f64 = (0..b)
            .map(|i| p_at_hat.row(i).iter().zip(p_hat.row(i)).map(|(a, c)| (a - c).abs()).sum::<f64>())
            .sum();
        pair.per_step_l1_gap.push(gap);
        pair.staleness.push(state.staleness()[0].clone());
        pair.reused_counts.push(decisions.iter().map(|d| d.reused.len()).sum());
        for i in 0..b {
            let (j, jh) = maximal_coupling_sample(p_full.row(i), p_hat.row(i), &mut rng)?;
            full[i] = j;
            approx[i] = jh;
        }
        pair.per_step_embed_error.push(embed_distance(weights, &full, &approx));
        pair.full_tokens.push(full.clone());
        pair.reuse_tokens.push(approx.clone());
    }
    Ok(pair)
}

fn embed_distance(weights: &ModelWeights, a: &[usize], b: &[usize]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (ex, ey) = (weights.token_embedding(x), weights.token_embedding(y));
            ex.iter().zip(ey).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
        })
        .sum()
}

/// Helper for tests and tools: the probability matrix of a full forward pass
/// on `tokens`.
pub fn full_probs(weights: &ModelWeights, tokens: &[usize]) -> Result<Matrix> {
    Ok(model::forward_full(weights, &model::embed_tokens(weights, tokens)?)?.probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, Activation, ModelConfig};

    fn weights(layers: usize, d: usize, b: usize, seed: u64) -> ModelWeights {
        init_weights(&ModelConfig {
            layers,
            heads: 1,
            d_model: d,
            d_int: 2 * d,
            n_vocab: 12,
            block_len: b,
            activation: Activation::Relu,
            seed,
        })
        .unwrap()
    }

    fn scfg(b: usize, t: usize, k: usize, temp: f64) -> SamplerConfig {
        SamplerConfig {
            gen_length: 2 * b,
            block_size: b,
            steps_per_block: t,
            tokens_unmasked_per_step: k,
            temperature: temp,
            seed: 17,
        }
    }

    fn kv(tau: Option<f64>, layers: usize) -> (DriftProfile, ReuseConfig) {
        (DriftProfile::uniform(layers, tau), ReuseConfig { mode: ReuseMode::Kv, ..Default::default() })
    }

    #[test]
    fn sampler_config_contract() {
        assert!(scfg(4, 2, 1, 0.0).validate(4).is_err());
        assert!(scfg(4, 4, 1, 0.0).validate(8).is_err());
        assert!(scfg(4, 4, 1, 0.0).validate(4).is_ok());
    }

    #[test]
    fn greedy_generation_is_repeatable() {
        let w = weights(2, 8, 4, 1);
        let cfg = scfg(4, 4, 1, 0.0);
        let p = DriftProfile::disabled(2);
        let (a, _) = diffusion_generate(&w, &cfg, &p, ReuseConfig::default(), false).unwrap();
        let (b, _) = diffusion_generate(&w, &cfg, &p, ReuseConfig::default(), false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        assert!(!a.contains(&w.mask_token));
    }

    #[test]
    fn every_position_unmasked_once() {
        let w = weights(1, 8, 6, 2);
        let cfg = SamplerConfig { gen_length: 12, ..scfg(6, 3, 2, 0.7) };
        let (_, trace) = diffusion_generate(&w, &cfg, &DriftProfile::disabled(1), ReuseConfig::default(), false).unwrap();
        for block in 0..2 {
            let mut seen: Vec<usize> =
                trace.steps.iter().filter(|s| s.block == block).flat_map(|s| s.unmasked.clone()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn one_shot_schedule_takes_one_step() {
        let w = weights(1, 8, 4, 3);
        let cfg = scfg(4, 4, 4, 0.0);
        let (_, trace) = diffusion_generate(&w, &cfg, &DriftProfile::disabled(1), ReuseConfig::default(), false).unwrap();
        assert_eq!(trace.steps.len(), 2);
        assert!(trace.steps.iter().all(|s| s.step == 0));
    }

    #[test]
    fn disabled_reuse_reproduces_full_tokens() {
        let w = weights(2, 8, 4, 4);
        let cfg = scfg(4, 4, 1, 0.9);
        let (full, _) = diffusion_generate(&w, &cfg, &DriftProfile::disabled(2), ReuseConfig::default(), false).unwrap();
        for mode in [ReuseMode::Kv, ReuseMode::O] {
            let rc = ReuseConfig { mode, ..Default::default() };
            let (t, _) = diffusion_generate(&w, &cfg, &DriftProfile::disabled(2), rc, false).unwrap();
            assert_eq!(t, full);
            let rc = ReuseConfig { mode, refresh_interval: Some(1), ..Default::default() };
            let (t, _) = diffusion_generate(&w, &cfg, &DriftProfile::uniform(2, Some(2.0)), rc, false).unwrap();
            assert_eq!(t, full);
        }
    }

    #[test]
    fn coupling_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = [0.2, 0.5, 0.3];
        for _ in 0..200 {
            let (j, jh) = maximal_coupling_sample(&p, &p, &mut rng).unwrap();
            assert_eq!(j, jh);
            assert_eq!(maximal_coupling_sample(&[1.0, 0.0], &[0.0, 1.0], &mut rng).unwrap(), (0, 1));
        }
        assert!(matches!(
            maximal_coupling_sample(&[0.5, 0.6], &[0.5, 0.5], &mut rng),
            Err(DareError::NotNormalized(_))
        ));
    }

    #[test]
    fn coupling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, q) = ([0.5, 0.5], [0.75, 0.25]);
        let n = 100_000;
        let (mut eq, mut pj, mut qj) = (0usize, [0usize; 2], [0usize; 2]);
        for _ in 0..n {
            let (j, jh) = maximal_coupling_sample(&p, &q, &mut rng).unwrap();
            eq += usize::from(j == jh);
            pj[j] += 1;
            qj[jh] += 1;
        }
        let f = |c: usize| c as f64 / n as f64;
        assert!((f(eq) - 0.75).abs() < 0.01);
        assert!((f(pj[0]) - 0.5).abs() < 0.01);
        assert!((f(qj[0]) - 0.75).abs() < 0.01);
    }

    #[test]
    fn coupled_without_reuse_stays_identical() {
        let w = weights(1, 8, 4, 5);
        let (p, rc) = kv(None, 1);
        let pair = coupled_generate(&w, 6, 3, &p, rc).unwrap();
        assert!(pair.per_step_embed_error.iter().all(|e| *e == 0.0));
        assert!(pair.per_step_l1_gap.iter().all(|e| *e == 0.0));
        assert_eq!(pair.full_tokens, pair.reuse_tokens);
    }

    #[test]
    fn huge_tau_makes_staleness_linear() {
        let w = weights(1, 8, 4, 6);
        let (p, rc) = kv(Some(2.0), 1);
        let pair = coupled_generate(&w, 6, 3, &p, rc).unwrap();
        for (t, delta) in pair.staleness.iter().enumerate() {
            assert!(delta.iter().all(|d| *d as usize == t), "step {t}: {delta:?}");
        }
    }

    #[test]
    fn coupled_requires_reuse_mode() {
        let w = weights(1, 8, 4, 6);
        let rc = ReuseConfig::default();
        assert!(coupled_generate(&w, 2, 0, &DriftProfile::disabled(1), rc).is_err());
    }

    #[test]
    fn trace_jsonl_has_one_line_per_step_layer() {
        let w = weights(2, 8, 4, 7);
        let cfg = scfg(4, 4, 1, 0.0);
        let (p, rc) = kv(Some(0.3), 2);
        let (_, trace) = diffusion_generate(&w, &cfg, &p, rc, false).unwrap();
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), trace.steps.len() * 2);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for k in ["step", "layer", "reused_count", "refreshed_count", "staleness_l2"] {
            assert!(first.get(k).is_some());
        }
    }
}
