//! Run configuration and the calibrate / generate / verify / bench
//! workflows.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, CostModel, FlopSummary};
use crate::drift::{self, DriftProfile, HeadScoring, LayerwiseDrift};
use crate::error::{DareError, Result};
use crate::model::{self, ModelConfig, ModelWeights};
use crate::reuse::{self, ReuseConfig, ReuseMode, ReuseState};
use crate::sampler::{self, GenerationTrace, SamplerConfig, StepRecord};
use crate::theory::{self, TheoryReport, VerifyOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftSettings {
    pub phi_bar: f64,
    pub epsilon: f64,
    /// Same threshold at every layer instead of a calibrated profile.
    pub tau_override: Option<f64>,
    /// Score a token by its largest drift over heads rather than head 0.
    pub per_head: bool,
    pub calibration_prompts: usize,
}

impl Default for DriftSettings {
    fn default() -> Self {
        Self {
            phi_bar: drift::DEFAULT_PHI_BAR,
            epsilon: drift::DEFAULT_EPSILON,
            tau_override: None,
            per_head: false,
            calibration_prompts: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ReuseSettings {
    pub mode: ReuseMode,
    pub skip_first_layers: usize,
    pub refresh_interval: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub weights: PathBuf,
    pub profile: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { weights: "model.dare".into(), profile: None, output_dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub drift: DriftSettings,
    pub reuse: ReuseSettings,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn reuse_config(&self) -> ReuseConfig {
        ReuseConfig {
            mode: self.reuse.mode,
            skip_first_layers: self.reuse.skip_first_layers,
            refresh_interval: self.reuse.refresh_interval,
            scoring: if self.drift.per_head { HeadScoring::MaxOverHeads } else { HeadScoring::Head0 },
        }
    }

    /// Sampler settings adjusted to the model's block length.
    pub fn sampler_for(&self, weights: &ModelWeights) -> SamplerConfig {
        SamplerConfig { block_size: weights.config.block_len, ..self.sampler }
    }
}

/// Calibration prompts are sampled generations in full mode: each prompt
/// index seeds its own stochastic trajectory (temperature at least 1), so the
/// drift statistics cover more than one greedy path.
pub fn calibration_traces(weights: &ModelWeights, cfg: &RunConfig) -> Result<Vec<GenerationTrace>> {
    let base = cfg.sampler_for(weights);
    let seeds = theory::trial_seeds(base.seed ^ 0xca11_b8a7, cfg.drift.calibration_prompts.max(1));
    seeds
        .into_iter()
        .map(|seed| {
            let sc = SamplerConfig { seed, temperature: base.temperature.max(1.0), ..base };
            let disabled = DriftProfile::disabled(weights.config.layers);
            Ok(sampler::diffusion_generate(weights, &sc, &disabled, ReuseConfig::default(), true)?.1)
        })
        .collect()
}

pub fn layerwise_from_traces(weights: &ModelWeights, traces: &[GenerationTrace]) -> Result<LayerwiseDrift> {
    let cal: Vec<_> = traces.iter().flat_map(|t| t.calibration_traces(weights.config.d_head())).collect();
    drift::layerwise_drift(&cal)
}

pub fn calibrate(weights: &ModelWeights, cfg: &RunConfig) -> Result<(DriftProfile, LayerwiseDrift)> {
    let traces = calibration_traces(weights, cfg)?;
    let lw = layerwise_from_traces(weights, &traces)?;
    Ok((DriftProfile::from_drift(&lw, cfg.drift.phi_bar, cfg.drift.epsilon)?, lw))
}

/// The profile a run uses: the override threshold if given, otherwise the
/// supplied calibrated profile. Full mode needs neither.
pub fn resolve_profile(weights: &ModelWeights, cfg: &RunConfig, profile: Option<DriftProfile>) -> Result<DriftProfile> {
    let layers = weights.config.layers;
    if let Some(tau) = cfg.drift.tau_override {
        return Ok(DriftProfile::uniform(layers, Some(tau)));
    }
    match (cfg.reuse.mode, profile) {
        (_, Some(p)) => Ok(p),
        (ReuseMode::Full, None) => Ok(DriftProfile::disabled(layers)),
        (mode, None) => Err(DareError::InvalidConfig(format!(
            "mode {mode} needs a drift profile or a tau override"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub mode: ReuseMode,
    pub tokens: Vec<usize>,
    pub steps: usize,
    pub reuse_fraction: f64,
    pub reused_slots: usize,
    pub eligible_slots: usize,
    pub gated_slots: usize,
    pub flops: FlopSummary,
}

pub fn summarize(trace: &GenerationTrace, tokens: Vec<usize>, cost: &CostModel) -> GenerateSummary {
    let eligible: Vec<_> = trace.decisions().filter(|d| d.eligible).collect();
    GenerateSummary {
        mode: trace.mode,
        tokens,
        steps: trace.steps.len(),
        reuse_fraction: trace.reuse_fraction(),
        reused_slots: eligible.iter().map(|d| d.reused.len()).sum(),
        eligible_slots: eligible.iter().map(|d| d.reused.len() + d.refreshed.len()).sum(),
        gated_slots: trace.gated_slots(),
        flops: analysis::flops_for_trace(trace, cost),
    }
}

pub fn generate(
    weights: &ModelWeights,
    cfg: &RunConfig,
    profile: &DriftProfile,
    record_activations: bool,
) -> Result<(GenerateSummary, GenerationTrace)> {
    let sc = cfg.sampler_for(weights);
    let (tokens, trace) = sampler::diffusion_generate(weights, &sc, profile, cfg.reuse_config(), record_activations)?;
    Ok((summarize(&trace, tokens, &CostModel::new(&weights.config)), trace))
}

/// Replays the per-step inputs of a recorded full-mode trace through the
/// reuse path, so reuse decisions are measured on one fixed trajectory.
pub fn replay(
    weights: &ModelWeights,
    reference: &GenerationTrace,
    profile: &DriftProfile,
    reuse_cfg: ReuseConfig,
) -> Result<GenerationTrace> {
    let mut state = ReuseState::new(weights, reuse_cfg, profile)?;
    let mut out = GenerationTrace { mode: reuse_cfg.mode, layers: reference.layers, block_len: reference.block_len, steps: Vec::new() };
    for rec in &reference.steps {
        let acts = rec
            .activations
            .as_ref()
            .ok_or_else(|| DareError::Contract("replay needs a trace recorded with activations".into()))?;
        if rec.step == 0 {
            state.reset();
        }
        let x = model::embed_tokens(weights, &acts.tokens)?;
        let (_, decisions) = reuse::step_forward(weights, &x, &mut state, rec.step)?;
        out.steps.push(StepRecord { block: rec.block, step: rec.step, decisions, unmasked: rec.unmasked.clone(), activations: None });
    }
    Ok(out)
}

pub fn verify(weights: &ModelWeights, cfg: &RunConfig, profile: &DriftProfile, opts: &VerifyOptions) -> Result<TheoryReport> {
    let mut rc = cfg.reuse_config();
    if rc.mode == ReuseMode::Full {
        rc.mode = ReuseMode::Kv;
    }
    theory::verify_run(weights, profile, rc, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub phi_bar: f64,
    /// Free-running generation, as `generate` reports it.
    pub reuse_fraction: f64,
    pub saved_flop_fraction: f64,
    /// Reuse on the fixed full-mode trajectory.
    pub replay_reuse_fraction: f64,
    pub replay_saved_flop_fraction: f64,
    /// Final `Σ_i ‖x_i − x̂_i‖₂` of coupled runs, averaged over trials.
    pub mean_coupled_error: f64,
}

pub const DEFAULT_PHI_GRID: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.5, 0.7];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub coupled_trials: usize,
    pub coupled_steps: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { coupled_trials: 4, coupled_steps: 8 }
    }
}

/// Profile for one grid point from shared calibration statistics.
pub fn bench_profile(lw: &LayerwiseDrift, cfg: &RunConfig, phi_bar: f64) -> Result<DriftProfile> {
    DriftProfile::from_drift(lw, phi_bar, cfg.drift.epsilon)
}

pub fn bench_point(
    weights: &ModelWeights,
    cfg: &RunConfig,
    lw: &LayerwiseDrift,
    reference: &GenerationTrace,
    phi_bar: f64,
    opts: &BenchOptions,
) -> Result<BenchRow> {
    let profile = bench_profile(lw, cfg, phi_bar)?;
    let mut point_cfg = cfg.clone();
    point_cfg.drift.phi_bar = phi_bar;
    point_cfg.drift.tau_override = None;
    let (summary, _) = generate(weights, &point_cfg, &profile, false)?;
    let cost = CostModel::new(&weights.config);
    let replayed = replay(weights, reference, &profile, cfg.reuse_config())?;
    let mut err = 0.0;
    for seed in theory::trial_seeds(cfg.sampler.seed ^ 0xbe4c, opts.coupled_trials) {
        let pair = sampler::coupled_generate(weights, opts.coupled_steps, seed, &profile, cfg.reuse_config())?;
        err += pair.per_step_embed_error.last().copied().unwrap_or(0.0);
    }
    Ok(BenchRow {
        phi_bar,
        reuse_fraction: summary.reuse_fraction,
        saved_flop_fraction: summary.flops.saved_fraction,
        replay_reuse_fraction: replayed.reuse_fraction(),
        replay_saved_flop_fraction: analysis::flops_for_trace(&replayed, &cost).saved_fraction,
        mean_coupled_error: if opts.coupled_trials == 0 { 0.0 } else { err / opts.coupled_trials as f64 },
    })
}

/// One row per `φ̄`. Calibration statistics and the reference trajectory are
/// shared across the grid.
pub fn bench(weights: &ModelWeights, cfg: &RunConfig, grid: &[f64], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if cfg.reuse.mode == ReuseMode::Full {
        return Err(DareError::InvalidConfig("bench needs mode kv or o".into()));
    }
    let traces = calibration_traces(weights, cfg)?;
    let lw = layerwise_from_traces(weights, &traces)?;
    let mut full_cfg = cfg.clone();
    full_cfg.reuse.mode = ReuseMode::Full;
    let (_, reference) = generate(weights, &full_cfg, &DriftProfile::disabled(weights.config.layers), true)?;
    grid.iter().map(|&phi| bench_point(weights, cfg, &lw, &reference, phi, opts)).collect()
}

pub fn bench_csv(rows: &[BenchRow], meta: serde_json::Value) -> Result<String> {
    let header: Vec<String> = [
        "phi_bar",
        "reuse_fraction",
        "saved_flop_fraction",
        "replay_reuse_fraction",
        "replay_saved_flop_fraction",
        "mean_coupled_error",
    ]
    .map(String::from)
    .to_vec();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.phi_bar.to_string(),
                r.reuse_fraction.to_string(),
                r.saved_flop_fraction.to_string(),
                r.replay_reuse_fraction.to_string(),
                r.replay_saved_flop_fraction.to_string(),
                r.mean_coupled_error.to_string(),
            ]
        })
        .collect();
    let mut buf = Vec::new();
    analysis::write_table(&mut buf, meta, &header, &body)?;
    Ok(String::from_utf8(buf).expect("utf8 csv"))
}
