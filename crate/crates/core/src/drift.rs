//! Drift scores, layerwise drift statistics, and per-layer reuse budgets.
//!
//! A token's drift at a layer is `1 − cos(q_t, q_{t−1})` on its (head-0)
//! query. Calibration averages drift per layer, spreads a global reuse budget
//! `φ̄` over layers with `φ_ℓ = L·φ̄·softmax(−s/ε)_ℓ`, and turns each `φ_ℓ`
//! into a threshold `τ_ℓ` at the lower `φ_ℓ`-quantile of observed scores.

use serde::{Deserialize, Serialize};

use crate::error::{DareError, Result};
use crate::linalg::{self, Matrix};

pub const DEFAULT_PHI_BAR: f64 = 0.3;
pub const DEFAULT_EPSILON: f64 = 1.0;

/// `None` is the disabled sentinel: no token is ever reused.
pub type Threshold = Option<f64>;

pub fn drift_score(x_t: &[f64], x_prev: &[f64]) -> Result<f64> {
    Ok(1.0 - linalg::cosine(x_t, x_prev)?)
}

/// Which query heads feed the per-token score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadScoring {
    /// Score on head 0 only.
    #[default]
    Head0,
    /// Worst (largest) drift over all heads.
    MaxOverHeads,
}

/// Per-token drift between two query matrices (`B × d`), or `None` for a token
/// whose query is zero at either step.
pub fn token_scores(q_t: &Matrix, q_prev: &Matrix, heads: usize, scoring: HeadScoring) -> Result<Vec<Option<f64>>> {
    if q_t.shape() != q_prev.shape() {
        return Err(DareError::DimensionMismatch {
            op: "token_scores",
            detail: format!("{:?} vs {:?}", q_t.shape(), q_prev.shape()),
        });
    }
    let dh = q_t.cols() / heads;
    let n_heads = match scoring {
        HeadScoring::Head0 => 1,
        HeadScoring::MaxOverHeads => heads,
    };
    Ok((0..q_t.rows())
        .map(|i| {
            let mut worst: Option<f64> = None;
            for h in 0..n_heads {
                let span = h * dh..(h + 1) * dh;
                let s = drift_score(&q_t.row(i)[span.clone()], &q_prev.row(i)[span]).ok()?;
                worst = Some(worst.map_or(s, |w: f64| w.max(s)));
            }
            worst
        })
        .collect())
}

/// Tokens whose drift between `q_prev` and `q_t` is at most `tau`.
///
/// Inputs are head-0 query slices (`B × d_head`). A missing previous step or
/// the disabled sentinel gives the empty set; tokens with an undefined score
/// (zero query) are never reused.
pub fn reuse_set(q_t: &Matrix, q_prev: Option<&Matrix>, tau: Threshold) -> Result<Vec<usize>> {
    let (Some(prev), Some(tau)) = (q_prev, tau) else {
        return Ok(Vec::new());
    };
    let scores = token_scores(q_t, prev, 1, HeadScoring::Head0)?;
    Ok(select_reused(&scores, tau))
}

pub(crate) fn select_reused(scores: &[Option<f64>], tau: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.filter(|s| *s <= tau).map(|_| i))
        .collect()
}

/// Per-step, per-layer head-0 queries from one calibration generation.
/// `steps[t][layer]` is a `B × d_head` matrix.
#[derive(Debug, Clone, Default)]
pub struct CalibrationTrace {
    pub steps: Vec<Vec<Matrix>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseDrift {
    pub s_layer: Vec<f64>,
    /// Every defined drift score seen at each layer.
    pub scores: Vec<Vec<f64>>,
    pub skipped_pairs: usize,
}

/// Mean drift per layer over all consecutive-step token pairs of all traces.
pub fn layerwise_drift(traces: &[CalibrationTrace]) -> Result<LayerwiseDrift> {
    let layers = traces
        .iter()
        .find_map(|t| t.steps.first().map(Vec::len))
        .ok_or_else(|| DareError::Contract("empty calibration set".into()))?;
    let mut scores = vec![Vec::new(); layers];
    let mut skipped = 0;
    for trace in traces {
        if trace.steps.len() < 2 {
            return Err(DareError::Contract("calibration trace needs at least two steps".into()));
        }
        for pair in trace.steps.windows(2) {
            let (prev, cur) = (&pair[0], &pair[1]);
            if prev.len() != layers || cur.len() != layers {
                return Err(DareError::Contract("inconsistent layer count in calibration".into()));
            }
            for l in 0..layers {
                for s in token_scores(&cur[l], &prev[l], 1, HeadScoring::Head0)? {
                    match s {
                        Some(s) => scores[l].push(s),
                        None => skipped += 1,
                    }
                }
            }
        }
    }
    let s_layer = scores
        .iter()
        .map(|v| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 })
        .collect();
    Ok(LayerwiseDrift { s_layer, scores, skipped_pairs: skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// `L·φ̄·softmax(−s/ε)` before clamping.
    pub raw: Vec<f64>,
    /// Clamped into `[0, 1]`.
    pub phi: Vec<f64>,
    /// Layers whose raw quantile exceeded 1.
    pub clamped: Vec<usize>,
}

pub fn allocate_quantiles(s_layer: &[f64], phi_bar: f64, epsilon: f64) -> Result<Allocation> {
    if !(epsilon > 0.0) {
        return Err(DareError::InvalidConfig(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !(0.0..=1.0).contains(&phi_bar) {
        return Err(DareError::InvalidConfig(format!("phi_bar must lie in [0, 1], got {phi_bar}")));
    }
    let logits: Vec<f64> = s_layer.iter().map(|s| -s / epsilon).collect();
    let weights = linalg::softmax(&logits);
    let budget = s_layer.len() as f64 * phi_bar;
    let raw: Vec<f64> = weights.iter().map(|w| budget * w).collect();
    let clamped = raw.iter().enumerate().filter(|(_, p)| **p > 1.0).map(|(i, _)| i).collect();
    let phi = raw.iter().map(|p| p.clamp(0.0, 1.0)).collect();
    Ok(Allocation { raw, phi, clamped })
}

/// Lower `φ`-quantile: the `⌊φ·n⌋`-th smallest score, or disabled when that
/// rank is zero.
///
/// A `1e-9` guard absorbs products like `0.7·10 = 7.000000000000001` and
/// `0.29·100 = 28.999999999999996` landing on the wrong side of an integer.
pub fn quantile_threshold(scores: &[f64], phi: f64) -> Threshold {
    let n = scores.len();
    let k = ((phi.clamp(0.0, 1.0) * n as f64) + 1e-9).floor() as usize;
    if k == 0 || n == 0 {
        return None;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Some(sorted[k.min(n) - 1])
}

/// Calibrated per-layer drift statistics and thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftProfile {
    pub s_layer: Vec<f64>,
    pub phi_layer: Vec<f64>,
    pub tau_layer: Vec<Threshold>,
    pub phi_bar: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub skipped_pairs: usize,
    #[serde(default)]
    pub clamped_layers: Vec<usize>,
}

impl DriftProfile {
    pub fn layers(&self) -> usize {
        self.tau_layer.len()
    }

    /// Builds thresholds from already computed layerwise drift.
    pub fn from_drift(drift: &LayerwiseDrift, phi_bar: f64, epsilon: f64) -> Result<Self> {
        let alloc = allocate_quantiles(&drift.s_layer, phi_bar, epsilon)?;
        let tau_layer = drift
            .scores
            .iter()
            .zip(&alloc.phi)
            .map(|(s, phi)| quantile_threshold(s, *phi))
            .collect();
        Ok(Self {
            s_layer: drift.s_layer.clone(),
            phi_layer: alloc.phi,
            tau_layer,
            phi_bar,
            epsilon,
            skipped_pairs: drift.skipped_pairs,
            clamped_layers: alloc.clamped,
        })
    }

    pub fn calibrate(traces: &[CalibrationTrace], phi_bar: f64, epsilon: f64) -> Result<Self> {
        Self::from_drift(&layerwise_drift(traces)?, phi_bar, epsilon)
    }

    /// Same threshold at every layer, with no calibration statistics.
    pub fn uniform(layers: usize, tau: Threshold) -> Self {
        Self {
            s_layer: vec![0.0; layers],
            phi_layer: vec![0.0; layers],
            tau_layer: vec![tau; layers],
            phi_bar: 0.0,
            epsilon: DEFAULT_EPSILON,
            skipped_pairs: 0,
            clamped_layers: Vec::new(),
        }
    }

    pub fn disabled(layers: usize) -> Self {
        Self::uniform(layers, None)
    }

    /// JSON report `{ s_layer, phi_layer, tau_layer, skipped_pairs, .. }`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn drift_score_examples() {
        assert_eq!(drift_score(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(drift_score(&[1.0, 2.0], &[-1.0, -2.0]).unwrap(), 2.0);
        let s = drift_score(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((s - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-9);
        assert!((s - 0.29289).abs() < 1e-5);
        assert!(drift_score(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    fn trace_of(steps: Vec<Vec<Vec<Vec<f64>>>>) -> CalibrationTrace {
        CalibrationTrace {
            steps: steps
                .into_iter()
                .map(|layers| layers.into_iter().map(|rows| Matrix::from_rows(&rows).unwrap()).collect())
                .collect(),
        }
    }

    #[test]
    fn constant_queries_have_no_drift() {
        let q = vec![vec![1.0, 2.0], vec![-3.0, 0.5]];
        let t = trace_of(vec![vec![q.clone(), q.clone()]; 4]);
        let d = layerwise_drift(&[t]).unwrap();
        assert_eq!(d.s_layer, vec![0.0, 0.0]);
    }

    #[test]
    fn mean_of_two_tokens() {
        let t = trace_of(vec![
            vec![vec![vec![1.0, 0.0], vec![1.0, 0.0]]],
            vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]],
        ]);
        let d = layerwise_drift(&[t]).unwrap();
        assert!((d.s_layer[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_queries_are_skipped() {
        let t = trace_of(vec![
            vec![vec![vec![0.0, 0.0], vec![1.0, 0.0]]],
            vec![vec![vec![1.0, 0.0], vec![1.0, 0.0]]],
        ]);
        let d = layerwise_drift(&[t]).unwrap();
        assert_eq!(d.skipped_pairs, 1);
        assert_eq!(d.scores[0], vec![0.0]);
    }

    #[test]
    fn empty_or_short_calibration_is_rejected() {
        assert!(layerwise_drift(&[]).is_err());
        let t = trace_of(vec![vec![vec![vec![1.0]]]]);
        assert!(layerwise_drift(&[t]).is_err());
    }

    #[test]
    fn layerwise_drift_matches_flat_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (steps, layers, b, d) = (5, 3, 4, 3);
        let raw: Vec<Vec<Vec<Vec<f64>>>> = (0..steps)
            .map(|_| {
                (0..layers)
                    .map(|_| (0..b).map(|_| (0..d).map(|_| rng.random::<f64>() - 0.5).collect()).collect())
                    .collect()
            })
            .collect();
        let got = layerwise_drift(&[trace_of(raw.clone())]).unwrap();
        for l in 0..layers {
            let mut sum = 0.0;
            let mut n = 0;
            for t in 1..steps {
                for i in 0..b {
                    let (u, v) = (&raw[t][l][i], &raw[t - 1][l][i]);
                    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    sum += 1.0 - dot / (nu * nv);
                    n += 1;
                }
            }
            assert!((got.s_layer[l] - sum / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn allocation_examples() {
        let a = allocate_quantiles(&[0.7, 0.7], 0.3, 1.0).unwrap();
        assert!(a.phi.iter().all(|p| (p - 0.3).abs() < 1e-15));

        let a = allocate_quantiles(&[0.0, 0.4, 1.9], 0.3, 1e9).unwrap();
        assert!(a.phi.iter().all(|p| (p - 0.3).abs() < 1e-6));

        // softmax(0, -ln 3) = (3/4, 1/4); times L·φ̄ = 0.6
        let a = allocate_quantiles(&[0.0, 3f64.ln()], 0.3, 1.0).unwrap();
        assert!((a.phi[0] - 0.45).abs() < 1e-9);
        assert!((a.phi[1] - 0.15).abs() < 1e-9);

        assert!(allocate_quantiles(&[0.0], 0.3, 0.0).is_err());
        assert!(allocate_quantiles(&[0.0], 1.5, 1.0).is_err());
    }

    #[test]
    fn allocation_clamps_and_reports() {
        let a = allocate_quantiles(&[0.0, 5.0, 5.0], 0.9, 0.1).unwrap();
        assert!(a.raw[0] > 1.0);
        assert_eq!(a.phi[0], 1.0);
        assert_eq!(a.clamped, vec![0]);
    }

    #[test]
    fn quantile_examples() {
        let s = [0.3, 0.1, 0.4, 0.2];
        assert_eq!(quantile_threshold(&s, 0.5), Some(0.2));
        assert_eq!(select_reused(&s.map(Some), 0.2).len(), 2);
        assert_eq!(quantile_threshold(&s, 0.0), None);
        assert_eq!(quantile_threshold(&s, 0.2), None);
        assert_eq!(quantile_threshold(&s, 1.0), Some(0.4));
        assert_eq!(quantile_threshold(&[0.0; 10], 0.7), Some(0.0));
        let hundred: Vec<f64> = (0..100).map(f64::from).collect();
        assert_eq!(quantile_threshold(&hundred, 0.29), Some(28.0));
    }

    #[test]
    fn reuse_set_examples() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.3, 0.7], vec![-1.0, 2.0]]).unwrap();
        assert_eq!(reuse_set(&q, Some(&q), Some(0.0)).unwrap(), vec![0, 1, 2]);
        assert!(reuse_set(&q, Some(&q), None).unwrap().is_empty());
        assert!(reuse_set(&q, None, Some(1.0)).unwrap().is_empty());

        // drifts 0, 0.05, 0.5 by construction
        let angle = |s: f64| (1.0 - s).acos();
        let prev = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let cur = Matrix::from_rows(&[
            vec![2.0, 0.0],
            vec![angle(0.05).cos(), angle(0.05).sin()],
            vec![angle(0.5).cos(), -angle(0.5).sin()],
        ])
        .unwrap();
        assert_eq!(reuse_set(&cur, Some(&prev), Some(0.1)).unwrap(), vec![0, 1]);
    }

    #[test]
    fn max_over_heads_is_conservative() {
        let prev = Matrix::from_rows(&[vec![1.0, 0.0, 1.0, 0.0]]).unwrap();
        let cur = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 1.0]]).unwrap();
        let h0 = token_scores(&cur, &prev, 2, HeadScoring::Head0).unwrap();
        let all = token_scores(&cur, &prev, 2, HeadScoring::MaxOverHeads).unwrap();
        assert_eq!(h0, vec![Some(0.0)]);
        assert_eq!(all, vec![Some(1.0)]);
    }

    #[test]
    fn profile_json_has_report_fields() {
        let p = DriftProfile::uniform(2, Some(0.1));
        let v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        for key in ["s_layer", "phi_layer", "tau_layer", "skipped_pairs"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(DriftProfile::disabled(1).to_json().unwrap().contains("null"));
    }

    proptest! {
        #[test]
        fn drift_ignores_positive_scale(
            u in proptest::collection::vec(-3.0f64..3.0, 5),
            v in proptest::collection::vec(-3.0f64..3.0, 5),
            a in 1e-2f64..1e2,
        ) {
            prop_assume!(linalg::l2(&u) > 1e-6 && linalg::l2(&v) > 1e-6);
            let su: Vec<f64> = u.iter().map(|x| x * a).collect();
            prop_assert!((drift_score(&u, &v).unwrap() - drift_score(&su, &v).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn reuse_set_grows_with_tau(
            scores in proptest::collection::vec(0.0f64..2.0, 1..20),
            t1 in 0.0f64..2.0,
            t2 in 0.0f64..2.0,
        ) {
            let opt: Vec<Option<f64>> = scores.iter().copied().map(Some).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(select_reused(&opt, lo).len() <= select_reused(&opt, hi).len());
        }

        #[test]
        fn allocation_preserves_budget_and_order(
            s in proptest::collection::vec(0.0f64..2.0, 1..8),
            phi_bar in 0.0f64..1.0,
            eps in 0.05f64..10.0,
        ) {
            let a = allocate_quantiles(&s, phi_bar, eps).unwrap();
            let total: f64 = a.raw.iter().sum();
            prop_assert!((total - s.len() as f64 * phi_bar).abs() < 1e-9);
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if s[i] < s[j] {
                        prop_assert!(a.raw[i] >= a.raw[j]);
                        prop_assert!(a.phi[i] >= a.phi[j]);
                    }
                }
            }
        }

        #[test]
        fn quantile_set_size_is_at_least_rank(
            scores in proptest::collection::vec(0.0f64..2.0, 1..30),
            phi in 0.0f64..=1.0,
        ) {
            let k = (phi * scores.len() as f64 + 1e-9).floor() as usize;
            match quantile_threshold(&scores, phi) {
                None => prop_assert_eq!(k, 0),
                Some(tau) => prop_assert!(scores.iter().filter(|s| **s <= tau).count() >= k),
            }
        }
    }
}
