//! Explicit error bounds for the single-layer, single-head model and a
//! harness that checks them against coupled runs.
//!
//! Constants:
//!
//! * `G`   Lipschitz constant of the full model in its input sequence,
//!   `‖E‖_{2→1}‖W_D‖G_σ‖W_U‖‖W_O‖‖W_V‖·B·(2R²‖W_Q‖‖W_K‖/√d + 1)`.
//! * `τ̃`   `2τdκ²/(2 + τ(κ² − 1))` with `κ = κ(W_Q)`; a reused token's input
//!   moves by at most `√(2τ̃)` per step.
//! * `C_W` `√2·B·‖E‖_{2→∞}‖W_D‖G_σ‖W_U‖‖W_O‖(‖W_V‖ + ‖W_V‖‖W_Q‖/√d)`; the
//!   KV per-step bound is `C_W·√τ̃·‖Δ‖₂`.
//!
//! `‖E‖_{2→1}` is replaced by the sum of row norms (an upper bound).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::drift::DriftProfile;
use crate::error::{DareError, Result};
use crate::linalg::{self, Matrix};
use crate::model::ModelWeights;
use crate::reuse::{ReuseConfig, ReuseMode};
use crate::sampler::{self, CoupledPair};

/// Matrix norms that enter the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightNorms {
    pub e_2_to_inf: f64,
    pub e_2_to_1_upper: f64,
    pub radius: f64,
    pub q: f64,
    pub k: f64,
    pub v: f64,
    pub o: f64,
    pub u: f64,
    pub d: f64,
    pub fro_q: f64,
    pub fro_k: f64,
    pub fro_v: f64,
    pub fro_o: f64,
    pub g_sigma: f64,
    pub block_len: usize,
    pub d_model: usize,
}

impl WeightNorms {
    pub fn of(weights: &ModelWeights) -> Result<Self> {
        weights.config.require_theory_regime()?;
        let lw = &weights.layers[0];
        Ok(Self {
            e_2_to_inf: linalg::norm_2_to_inf(&weights.embedding),
            e_2_to_1_upper: linalg::norm_2_to_1_upper(&weights.embedding),
            radius: weights.radius,
            q: linalg::spectral_norm(&lw.w_q),
            k: linalg::spectral_norm(&lw.w_k),
            v: linalg::spectral_norm(&lw.w_v),
            o: linalg::spectral_norm(&lw.w_o),
            u: linalg::spectral_norm(&lw.w_u),
            d: linalg::spectral_norm(&lw.w_d),
            fro_q: lw.w_q.frobenius(),
            fro_k: lw.w_k.frobenius(),
            fro_v: lw.w_v.frobenius(),
            fro_o: lw.w_o.frobenius(),
            g_sigma: weights.config.activation.lipschitz(),
            block_len: weights.config.block_len,
            d_model: weights.config.d_model,
        })
    }

    fn sqrt_d(&self) -> f64 {
        (self.d_model as f64).sqrt()
    }

    /// `‖E‖_{2→∞}‖W_D‖G_σ‖W_U‖`, the factor shared by both per-step bounds.
    fn head_factor(&self) -> f64 {
        self.e_2_to_inf * self.d * self.g_sigma * self.u
    }

    pub fn lipschitz_g(&self) -> f64 {
        let b = self.block_len as f64;
        let attn = 2.0 * self.radius * self.radius * self.q * self.k / self.sqrt_d() + 1.0;
        self.e_2_to_1_upper * self.d * self.g_sigma * self.u * self.o * self.v * b * attn
    }

    pub fn c_w(&self) -> f64 {
        let b = self.block_len as f64;
        std::f64::consts::SQRT_2 * b * self.head_factor() * self.o * (self.v + self.v * self.q / self.sqrt_d())
    }

    /// Per-token O-reuse terms I, II, III (before the shared head factor).
    ///
    /// `dx_token` bounds `‖x_i^t − x_i^{t−δ}‖₂`; `dx_block` bounds
    /// `√(Σ_j ‖x_j^t − x_j^{t−δ}‖₂²)`.
    pub fn o_terms(&self, dx_token: f64, dx_block: f64) -> OTerms {
        let b = self.block_len as f64;
        let prod4 = self.fro_o * self.fro_v * self.fro_k * self.fro_q;
        OTerms {
            query: b * self.sqrt_d() * prod4 * dx_token,
            key: (b * self.d_model as f64).sqrt() * prod4 * dx_block,
            value: self.fro_o * self.fro_v * dx_block,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OTerms {
    /// I: query drift.
    pub query: f64,
    /// II: key drift.
    pub key: f64,
    /// III: value drift.
    pub value: f64,
}

impl OTerms {
    pub fn sum(&self) -> f64 {
        self.query + self.key + self.value
    }
}

pub fn lipschitz_g(weights: &ModelWeights) -> Result<f64> {
    Ok(WeightNorms::of(weights)?.lipschitz_g())
}

pub fn tau_tilde(tau: f64, d: usize, kappa_q: f64) -> f64 {
    let k2 = kappa_q * kappa_q;
    2.0 * tau * d as f64 * k2 / (2.0 + tau * (k2 - 1.0))
}

/// `4dτκ²/(2 + τ(κ² − 1))`: the largest squared distance between two inputs
/// of norm `√d` whose queries have drift at most `τ`.
pub fn input_gap_sq_bound(tau: f64, d: usize, kappa_q: f64) -> f64 {
    2.0 * tau_tilde(tau, d, kappa_q)
}

/// `C_W·√τ̃·‖Δ‖₂`
pub fn kv_step_bound(weights: &ModelWeights, tau: f64, delta_l2: f64) -> Result<f64> {
    let norms = WeightNorms::of(weights)?;
    let kappa = linalg::condition_kappa(&weights.layers[0].w_q)?;
    Ok(kv_step_bound_with(&norms, kappa, tau, delta_l2))
}

pub fn kv_step_bound_with(norms: &WeightNorms, kappa_q: f64, tau: f64, delta_l2: f64) -> f64 {
    if delta_l2 == 0.0 || tau == 0.0 {
        return 0.0;
    }
    norms.c_w() * tau_tilde(tau, norms.d_model, kappa_q).sqrt() * delta_l2
}

/// Sum over reused tokens of terms I + II + III, with each input gap over
/// `δ` steps bounded by `δ·√(2τ̃)`.
pub fn o_step_bound(weights: &ModelWeights, tau: f64, delta: &[u32]) -> Result<f64> {
    let norms = WeightNorms::of(weights)?;
    let kappa = linalg::condition_kappa(&weights.layers[0].w_q)?;
    Ok(o_step_bound_with(&norms, kappa, tau, delta))
}

pub fn o_step_bound_with(norms: &WeightNorms, kappa_q: f64, tau: f64, delta: &[u32]) -> f64 {
    let step = (2.0 * tau_tilde(tau, norms.d_model, kappa_q)).sqrt();
    let b = norms.block_len as f64;
    let total: f64 = delta
        .iter()
        .filter(|d| **d > 0)
        .map(|&d| {
            let dx = f64::from(d) * step;
            norms.o_terms(dx, b.sqrt() * dx).sum()
        })
        .sum();
    norms.head_factor() * total
}

/// `e_0 = 0`, `e_{t+1} = G·e_t + b_t`; returns `e_0 ..= e_T`.
pub fn cumulative_series(g: f64, per_step: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(per_step.len() + 1);
    let mut e = 0.0;
    out.push(e);
    for b in per_step {
        e = g * e + b;
        out.push(e);
    }
    out
}

pub fn cumulative_bound(g: f64, per_step: &[f64]) -> f64 {
    *cumulative_series(g, per_step).last().expect("non-empty")
}

/// `‖z − z′‖∞ − ‖softmax(z) − softmax(z′)‖₁`; never negative in exact
/// arithmetic.
pub fn softmax_lipschitz_slack(z: &[f64], z2: &[f64]) -> f64 {
    let (a, b) = (linalg::softmax(z), linalg::softmax(z2));
    let l1: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    let linf = z.iter().zip(z2).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    linf - l1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub trials: usize,
    pub steps: usize,
    pub seed: u64,
    /// Random logit pairs for the softmax Lipschitz spot check.
    pub softmax_samples: usize,
    /// Replaces `G` by zero. Only meaningful as a sabotage control.
    #[serde(default)]
    pub force_g_zero: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { trials: 50, steps: 8, seed: 0, softmax_samples: 1000, force_g_zero: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub mode: ReuseMode,
    pub tau: Option<f64>,
    pub trials: usize,
    pub g: f64,
    pub kappa_q: f64,
    pub tau_tilde: f64,
    pub c_w: f64,
    /// Trial-averaged per-step bound and empirical gap, `t = 0..T`.
    pub per_step_bound: Vec<f64>,
    pub per_step_empirical: Vec<f64>,
    /// Largest `gap / bound` over steps with a positive bound.
    pub per_step_max_ratio: f64,
    pub cumulative_bound_series: Vec<f64>,
    pub cumulative_empirical_series: Vec<f64>,
    pub cumulative_bound: f64,
    pub cumulative_empirical: f64,
    pub mean_reuse_per_step: f64,
    pub per_step_violations: usize,
    pub cumulative_violations: usize,
    pub softmax_violations: usize,
    pub violations: usize,
}

impl TheoryReport {
    /// CSV with one row per step: `t, per_step_bound, per_step_empirical,
    /// cumulative_bound, cumulative_empirical`.
    pub fn series_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["t", "per_step_bound", "per_step_empirical", "cumulative_bound", "cumulative_empirical"])?;
        for t in 0..self.cumulative_bound_series.len() {
            let opt = |v: &Vec<f64>| v.get(t).map_or(String::new(), |x| format!("{x:e}"));
            w.write_record([
                t.to_string(),
                opt(&self.per_step_bound),
                opt(&self.per_step_empirical),
                format!("{:e}", self.cumulative_bound_series[t]),
                format!("{:e}", self.cumulative_empirical_series[t]),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| DareError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("ascii csv"))
    }
}

/// Per-trial seeds derived from the master seed.
pub fn trial_seeds(master: u64, trials: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..trials).map(|_| rng.random()).collect()
}

/// Runs `trials` coupled generations and checks every per-step bound, the
/// trial-averaged cumulative bound at every step, and the softmax Lipschitz
/// inequality on random logit pairs.
pub fn verify_run(
    weights: &ModelWeights,
    profile: &DriftProfile,
    reuse_cfg: ReuseConfig,
    opts: &VerifyOptions,
) -> Result<TheoryReport> {
    weights.config.require_theory_regime()?;
    if reuse_cfg.mode == ReuseMode::Full {
        return Err(DareError::InvalidConfig("verification needs mode kv or o".into()));
    }
    if opts.trials == 0 {
        return Err(DareError::InvalidConfig("need at least one trial".into()));
    }
    let norms = WeightNorms::of(weights)?;
    let kappa = linalg::condition_kappa(&weights.layers[0].w_q)?;
    let tau = profile.tau_layer.first().copied().flatten();
    let tau_val = tau.unwrap_or(0.0);
    let g = if opts.force_g_zero { 0.0 } else { norms.lipschitz_g() };

    let t_steps = opts.steps;
    let mut bound_sum = vec![0.0; t_steps];
    let mut gap_sum = vec![0.0; t_steps];
    let mut embed_sum = vec![0.0; t_steps + 1];
    let mut per_step_violations = 0;
    let mut max_ratio = 0.0f64;
    let mut reused_total = 0usize;

    for seed in trial_seeds(opts.seed, opts.trials) {
        let pair: CoupledPair = sampler::coupled_generate(weights, t_steps, seed, profile, reuse_cfg)?;
        for t in 0..t_steps {
            let bound = match reuse_cfg.mode {
                ReuseMode::Kv => kv_step_bound_with(&norms, kappa, tau_val, pair.staleness_l2(t)),
                _ => o_step_bound_with(&norms, kappa, tau_val, &pair.staleness[t]),
            };
            let gap = pair.per_step_l1_gap[t];
            if gap > bound {
                per_step_violations += 1;
            }
            if bound > 0.0 {
                max_ratio = max_ratio.max(gap / bound);
            }
            bound_sum[t] += bound;
            gap_sum[t] += gap;
        }
        for (acc, e) in embed_sum.iter_mut().zip(&pair.per_step_embed_error) {
            *acc += e;
        }
        reused_total += pair.reused_counts.iter().sum::<usize>();
    }

    let n = opts.trials as f64;
    let per_step_bound: Vec<f64> = bound_sum.iter().map(|x| x / n).collect();
    let per_step_empirical: Vec<f64> = gap_sum.iter().map(|x| x / n).collect();
    let cumulative_empirical_series: Vec<f64> = embed_sum.iter().map(|x| x / n).collect();
    let cumulative_bound_series = cumulative_series(g, &per_step_bound);
    let cumulative_violations = cumulative_empirical_series
        .iter()
        .zip(&cumulative_bound_series)
        .filter(|(e, b)| e > b)
        .count();

    let softmax_violations = softmax_spot_check(weights.config.n_vocab, opts.softmax_samples, opts.seed);

    Ok(TheoryReport {
        mode: reuse_cfg.mode,
        tau,
        trials: opts.trials,
        g,
        kappa_q: kappa,
        tau_tilde: tau_tilde(tau_val, norms.d_model, kappa),
        c_w: norms.c_w(),
        per_step_max_ratio: max_ratio,
        cumulative_bound: *cumulative_bound_series.last().unwrap(),
        cumulative_empirical: *cumulative_empirical_series.last().unwrap(),
        per_step_bound,
        per_step_empirical,
        cumulative_bound_series,
        cumulative_empirical_series,
        mean_reuse_per_step: reused_total as f64 / (n * t_steps.max(1) as f64),
        violations: per_step_violations + cumulative_violations + softmax_violations,
        per_step_violations,
        cumulative_violations,
        softmax_violations,
    })
}

/// Counts softmax Lipschitz failures (beyond `1e-9`) on random logit pairs.
pub fn softmax_spot_check(max_dim: usize, samples: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x50f7_3a4c);
    let mut fails = 0;
    for _ in 0..samples {
        let n = rng.random_range(1..=max_dim.max(1));
        let scale = 10f64.powf(rng.random_range(-2.0..1.5));
        let z: Vec<f64> = (0..n).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect();
        let z2: Vec<f64> = (0..n).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect();
        if softmax_lipschitz_slack(&z, &z2) < -1e-9 {
            fails += 1;
        }
    }
    fails
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricCheck {
    pub accepted: usize,
    pub violations: usize,
    /// Largest `‖x − y‖² / bound` among accepted pairs.
    pub max_ratio: f64,
}

/// Rejection-samples pairs `(x, y)` of norm `√d` whose images under `w_q`
/// have drift at most `tau`, and counts failures of
/// `‖x − y‖² ≤ 4dτκ²/(2 + τ(κ² − 1)) + 1e-9`.
///
/// `y` is drawn as a random perturbation of `x` with a random magnitude so
/// that acceptance stays high while still probing the boundary.
pub fn geometric_check(w_q: &Matrix, tau: f64, accept_target: usize, seed: u64) -> Result<GeometricCheck> {
    let d = w_q.rows();
    let kappa = linalg::condition_kappa(w_q)?;
    let bound = input_gap_sq_bound(tau, d, kappa);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d).map(|_| rand_distr::Distribution::<f64>::sample(&normal, rng)).collect()
    };
    let to_sphere = |v: &mut Vec<f64>| {
        let s = (d as f64).sqrt() / linalg::l2(v);
        v.iter_mut().for_each(|x| *x *= s);
    };
    let (mut accepted, mut violations, mut tries, mut max_ratio) = (0, 0, 0usize, 0.0f64);
    while accepted < accept_target {
        tries += 1;
        if tries > accept_target * 10_000 {
            return Err(DareError::Contract(format!(
                "rejection sampler accepted only {accepted} pairs for tau = {tau}"
            )));
        }
        let mut x = gauss(&mut rng);
        to_sphere(&mut x);
        let eps = 10f64.powf(rng.random_range(-3.0..0.5));
        let mut y: Vec<f64> = x.iter().zip(gauss(&mut rng)).map(|(a, g)| a + eps * g).collect();
        to_sphere(&mut y);
        let xm = Matrix::from_vec(1, d, x.clone())?;
        let ym = Matrix::from_vec(1, d, y.clone())?;
        let qx = xm.matmul(w_q)?;
        let qy = ym.matmul(w_q)?;
        let Ok(score) = crate::drift::drift_score(qx.row(0), qy.row(0)) else { continue };
        if score > tau {
            continue;
        }
        accepted += 1;
        let gap: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
        max_ratio = max_ratio.max(gap / bound);
        if gap > bound + 1e-9 {
            violations += 1;
        }
    }
    Ok(GeometricCheck { accepted, violations, max_ratio })
}
