//! Redundancy diagnostics over generation traces and a dense FLOP model.
//!
//! Tabular outputs are CSV preceded by one `# {json}` metadata line.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::drift::{token_scores, HeadScoring, Threshold};
use crate::error::{DareError, Result};
use crate::linalg::{self, Matrix};
use crate::model::ModelConfig;
use crate::reuse::ReuseMode;
use crate::sampler::GenerationTrace;

pub const HIST_BINS: usize = 50;
pub const HIST_MAX: f64 = 2.0;
pub const ZERO_MODE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Timestep,
    Layer,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    pub axis: Axis,
    pub entries: Matrix,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.entries.rows()
    }

    pub fn write_csv<W: Write>(&self, w: W, meta: serde_json::Value) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .entries
            .row_iter()
            .map(|r| r.iter().map(|v| format!("{v:.12}")).collect())
            .collect();
        let header: Vec<String> = (0..self.n()).map(|j| j.to_string()).collect();
        write_table(w, meta, &header, &rows)
    }
}

/// Cosine that treats a pair of zero rows as identical and a single zero
/// row as orthogonal.
fn row_cosine(u: &[f64], v: &[f64]) -> f64 {
    match (linalg::l2(u) == 0.0, linalg::l2(v) == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => linalg::cosine(u, v).unwrap_or(0.0),
    }
}

fn pairwise(series: &[Matrix], axis: Axis, token: Option<usize>) -> Result<SimilarityMatrix> {
    let n = series.len();
    if n < 2 {
        return Err(DareError::Contract(format!("similarity needs at least two matrices, got {n}")));
    }
    let shape = series[0].shape();
    if let Some(bad) = series.iter().find(|m| m.shape() != shape) {
        return Err(DareError::DimensionMismatch {
            op: "similarity",
            detail: format!("{:?} vs {:?}", shape, bad.shape()),
        });
    }
    if let Some(t) = token {
        if t >= shape.0 {
            return Err(DareError::Contract(format!("token {t} outside {} rows", shape.0)));
        }
    }
    let rows: Vec<usize> = match token {
        Some(t) => vec![t],
        None => (0..shape.0).collect(),
    };
    let mut out = Matrix::identity(n);
    for i in 0..n {
        for j in i + 1..n {
            let s = rows.iter().map(|&r| row_cosine(series[i].row(r), series[j].row(r))).sum::<f64>()
                / rows.len() as f64;
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    Ok(SimilarityMatrix { axis, entries: out })
}

/// Entry `(i, j)` is the cosine between rows at steps `i` and `j`, averaged
/// over tokens (`token = None`) or taken at a single token.
pub fn temporal_similarity(series: &[Matrix], token: Option<usize>) -> Result<SimilarityMatrix> {
    pairwise(series, Axis::Timestep, token)
}

/// Same as [`temporal_similarity`] across layers of one step.
pub fn cross_layer_similarity(caches: &[Matrix], token: Option<usize>) -> Result<SimilarityMatrix> {
    pairwise(caches, Axis::Layer, token)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftHistogram {
    pub layer: usize,
    /// Lower edges of the uniform bins over `[0, 2]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Scores below `1e-6`; these are not in `counts`.
    pub zero_mode: usize,
    pub total: usize,
    pub tau: Threshold,
}

impl DriftHistogram {
    pub fn from_scores(layer: usize, scores: &[f64], tau: Threshold) -> Self {
        let width = HIST_MAX / HIST_BINS as f64;
        let mut counts = vec![0; HIST_BINS];
        let mut zero_mode = 0;
        for &s in scores {
            if s < ZERO_MODE {
                zero_mode += 1;
            } else {
                counts[((s / width) as usize).min(HIST_BINS - 1)] += 1;
            }
        }
        Self {
            layer,
            edges: (0..HIST_BINS).map(|i| i as f64 * width).collect(),
            counts,
            zero_mode,
            total: scores.len(),
            tau,
        }
    }

    pub fn zero_mode_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.zero_mode as f64 / self.total as f64
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let meta = serde_json::json!({
            "layer": self.layer,
            "tau": self.tau,
            "total": self.total,
            "zero_mode": self.zero_mode,
            "zero_mode_fraction": self.zero_mode_fraction(),
        });
        let width = HIST_MAX / HIST_BINS as f64;
        let mut rows = vec![vec!["0".to_string(), format!("{ZERO_MODE:e}"), self.zero_mode.to_string(), "zero".into()]];
        for (e, c) in self.edges.iter().zip(&self.counts) {
            rows.push(vec![format!("{e}"), format!("{}", e + width), c.to_string(), "bin".into()]);
        }
        write_table(w, meta, &["lo".into(), "hi".into(), "count".into(), "kind".into()], &rows)
    }
}

/// Layer-`layer` head-0 drift scores of every consecutive step pair in a
/// trace recorded with activations. Blocks are not paired across.
pub fn trace_drift_scores(trace: &GenerationTrace, layer: usize, d_head: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for cal in trace.calibration_traces(d_head) {
        for pair in cal.steps.windows(2) {
            let (prev, cur) = (&pair[0][layer], &pair[1][layer]);
            out.extend(token_scores(cur, prev, 1, HeadScoring::Head0)?.into_iter().flatten());
        }
    }
    Ok(out)
}

pub fn drift_histogram(trace: &GenerationTrace, layer: usize, d_head: usize, tau: Threshold) -> Result<DriftHistogram> {
    if layer >= trace.layers {
        return Err(DareError::Contract(format!("layer {layer} outside {} layers", trace.layers)));
    }
    if trace.steps.iter().all(|s| s.activations.is_none()) {
        return Err(DareError::Contract("trace carries no activations".into()));
    }
    Ok(DriftHistogram::from_scores(layer, &trace_drift_scores(trace, layer, d_head)?, tau))
}

/// Dense FLOP counts per token per layer. A multiply-add counts 2, a softmax
/// element counts 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub d_model: u64,
    pub d_int: u64,
    pub block_len: u64,
}

impl CostModel {
    pub const SOFTMAX_PER_ELEM: u64 = 5;

    pub fn new(cfg: &ModelConfig) -> Self {
        Self { d_model: cfg.d_model as u64, d_int: cfg.d_int as u64, block_len: cfg.block_len as u64 }
    }

    /// One of the Q, K, V projections.
    pub fn projection(&self) -> u64 {
        2 * self.d_model * self.d_model
    }

    /// `QKᵀ` row, softmax, and the weighted sum over values for one query.
    pub fn attention_row(&self) -> u64 {
        4 * self.block_len * self.d_model + Self::SOFTMAX_PER_ELEM * self.block_len
    }

    pub fn output_projection(&self) -> u64 {
        2 * self.d_model * self.d_model
    }

    pub fn mlp(&self) -> u64 {
        4 * self.d_model * self.d_int
    }

    pub fn full_token_layer(&self) -> u64 {
        3 * self.projection() + self.attention_row() + self.output_projection() + self.mlp()
    }

    /// FLOPs skipped per reused token-layer.
    pub fn saving(&self, mode: ReuseMode) -> u64 {
        match mode {
            ReuseMode::Full => 0,
            ReuseMode::Kv => 2 * self.projection(),
            ReuseMode::O => self.attention_row(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopSummary {
    pub full: u64,
    pub actual: u64,
    pub saved_fraction: f64,
}

pub fn flops_for_trace(trace: &GenerationTrace, cost: &CostModel) -> FlopSummary {
    let per_layer_step = cost.block_len * cost.full_token_layer();
    let saving = cost.saving(trace.mode);
    let (mut full, mut saved) = (0u64, 0u64);
    for d in trace.decisions() {
        full += per_layer_step;
        saved += d.reused.len() as u64 * saving;
    }
    let actual = full - saved;
    let saved_fraction = if full == 0 { 0.0 } else { 1.0 - actual as f64 / full as f64 };
    FlopSummary { full, actual, saved_fraction }
}

pub fn write_table<W: Write>(mut w: W, meta: serde_json::Value, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    writeln!(w, "# {}", serde_json::to_string(&meta)?)?;
    let mut cw = csv::Writer::from_writer(w);
    cw.write_record(header)?;
    for r in rows {
        cw.write_record(r)?;
    }
    cw.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::DriftProfile;
    use crate::model::{init_weights, Activation};
    use crate::reuse::{ReuseConfig, ReuseDecision};
    use crate::sampler::{diffusion_generate, SamplerConfig, StepRecord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn assert_invariants(s: &SimilarityMatrix) {
        for i in 0..s.n() {
            assert!((s.entries.get(i, i) - 1.0).abs() <= 1e-9);
            for j in 0..s.n() {
                assert!((s.entries.get(i, j) - s.entries.get(j, i)).abs() <= 1e-9);
                assert!(s.entries.get(i, j).abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn constant_series_is_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 4, 3);
        let s = temporal_similarity(&vec![m; 5], None).unwrap();
        assert!(s.entries.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn orthogonal_steps_have_zero_similarity() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 3.0], vec![-1.0, 0.0]]).unwrap();
        let s = temporal_similarity(&[a, b], None).unwrap();
        assert_eq!(s.entries.get(0, 1), 0.0);
        assert_eq!(s.entries.get(0, 0), 1.0);
    }

    #[test]
    fn similarity_matches_pairwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let series: Vec<Matrix> = (0..6).map(|_| random_matrix(&mut rng, 5, 4)).collect();
        let s = temporal_similarity(&series, None).unwrap();
        let per_tok = temporal_similarity(&series, Some(3)).unwrap();
        let layers = cross_layer_similarity(&series, None).unwrap();
        assert_eq!(layers.axis, Axis::Layer);
        for i in 0..6 {
            for j in 0..6 {
                let mut acc = 0.0;
                for r in 0..5 {
                    let (u, v) = (series[i].row(r), series[j].row(r));
                    let mut dot = 0.0;
                    let (mut nu, mut nv) = (0.0, 0.0);
                    for k in 0..4 {
                        dot += u[k] * v[k];
                        nu += u[k] * u[k];
                        nv += v[k] * v[k];
                    }
                    let c = dot / (nu.sqrt() * nv.sqrt());
                    if r == 3 {
                        assert!((per_tok.entries.get(i, j) - c).abs() <= 1e-12);
                    }
                    acc += c;
                }
                assert!((s.entries.get(i, j) - acc / 5.0).abs() <= 1e-12);
                assert!((layers.entries.get(i, j) - acc / 5.0).abs() <= 1e-12);
            }
        }
        assert_invariants(&s);
        assert_invariants(&per_tok);
    }

    #[test]
    fn similarity_contracts() {
        let m = Matrix::zeros(2, 2);
        assert!(temporal_similarity(&[m.clone()], None).is_err());
        assert!(temporal_similarity(&[m.clone(), Matrix::zeros(3, 2)], None).is_err());
        assert!(temporal_similarity(&[m.clone(), m], Some(5)).is_err());
    }

    #[test]
    fn histogram_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut scores = Vec::new();
        for _ in 0..500 {
            scores.push(if rng.random::<bool>() { rng.random_range(0.0..5e-7) } else { rng.random_range(0.3..1.9) });
        }
        scores.push(2.0);
        let h = DriftHistogram::from_scores(0, &scores, Some(0.1));
        assert_eq!(h.zero_mode + h.counts.iter().sum::<usize>(), scores.len());
        assert_eq!(h.zero_mode, scores.iter().filter(|s| **s < 1e-6).count());
        for b in 0..HIST_BINS {
            let (lo, hi) = (b as f64 * 0.04, (b + 1) as f64 * 0.04);
            let want = scores
                .iter()
                .filter(|&&s| s >= 1e-6 && s >= lo && (s < hi || (b == HIST_BINS - 1 && s <= 2.0)))
                .count();
            assert_eq!(h.counts[b], want, "bin {b}");
        }
    }

    fn trace_with(mode: ReuseMode, reused: &[Vec<usize>], b: usize) -> GenerationTrace {
        let steps = reused
            .iter()
            .enumerate()
            .map(|(t, r)| StepRecord {
                block: 0,
                step: t,
                decisions: vec![ReuseDecision {
                    layer: 0,
                    step: t,
                    reused: r.clone(),
                    refreshed: (0..b).filter(|i| !r.contains(i)).collect(),
                    eligible: true,
                    staleness_l2: 0.0,
                }],
                unmasked: vec![],
                activations: None,
            })
            .collect();
        GenerationTrace { mode, layers: 1, block_len: b, steps }
    }

    #[test]
    fn flop_examples() {
        let cfg = ModelConfig { layers: 1, heads: 1, d_model: 8, d_int: 16, block_len: 4, ..ModelConfig::default() };
        let cost = CostModel::new(&cfg);
        let none = flops_for_trace(&trace_with(ReuseMode::Kv, &[vec![], vec![]], 4), &cost);
        assert_eq!(none.saved_fraction, 0.0);
        assert_eq!(none.full, none.actual);
        let all = flops_for_trace(&trace_with(ReuseMode::Kv, &[vec![], vec![0, 1, 2, 3]], 4), &cost);
        assert_eq!(all.full - all.actual, 4 * 4 * 64);
        let o = flops_for_trace(&trace_with(ReuseMode::O, &[vec![1]], 4), &cost);
        assert_eq!(o.full - o.actual, 4 * 4 * 8 + 5 * 4);
    }

    #[test]
    fn flops_match_event_sum_and_are_monotone() {
        let cfg = ModelConfig { d_model: 16, d_int: 32, block_len: 8, ..ModelConfig::default() };
        let cost = CostModel::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for mode in [ReuseMode::Kv, ReuseMode::O] {
            let reused: Vec<Vec<usize>> =
                (0..20).map(|_| (0..8).filter(|_| rng.random::<f64>() < 0.4).collect()).collect();
            let trace = trace_with(mode, &reused, 8);
            let got = flops_for_trace(&trace, &cost);
            let per_tok = 3 * 2 * 256 + (4 * 8 * 16 + 5 * 8) + 2 * 256 + 4 * 16 * 32;
            let mut full = 0u64;
            let mut actual = 0u64;
            for r in &reused {
                for tok in 0..8 {
                    full += per_tok;
                    actual += per_tok;
                    if r.contains(&tok) {
                        actual -= if mode == ReuseMode::Kv { 2 * 2 * 256 } else { 4 * 8 * 16 + 5 * 8 };
                    }
                }
            }
            assert_eq!((got.full, got.actual), (full, actual));

            let mut more = reused.clone();
            let i = more.iter().position(|r| r.len() < 8).unwrap();
            let add = (0..8).find(|t| !more[i].contains(t)).unwrap();
            more[i].push(add);
            assert!(flops_for_trace(&trace_with(mode, &more, 8), &cost).saved_fraction > got.saved_fraction);
        }
    }

    #[test]
    fn full_mode_flops_ignore_profile() {
        let w = init_weights(&ModelConfig { activation: Activation::Gelu, ..ModelConfig::default() }).unwrap();
        let cost = CostModel::new(&w.config);
        let sc = SamplerConfig { gen_length: 16, ..Default::default() };
        let rc = ReuseConfig::default();
        let (_, a) = diffusion_generate(&w, &sc, &DriftProfile::disabled(2), rc, false).unwrap();
        let (_, b) = diffusion_generate(&w, &sc, &DriftProfile::uniform(2, Some(1.5)), rc, false).unwrap();
        assert_eq!(flops_for_trace(&a, &cost), flops_for_trace(&b, &cost));
        assert_eq!(flops_for_trace(&a, &cost).saved_fraction, 0.0);
    }

    #[test]
    fn first_step_of_a_block_is_all_zero_mode() {
        let w = init_weights(&ModelConfig::default()).unwrap();
        let sc = SamplerConfig { gen_length: 8, steps_per_block: 8, ..Default::default() };
        let (_, trace) = diffusion_generate(&w, &sc, &DriftProfile::disabled(2), ReuseConfig::default(), true).unwrap();
        let scores = trace_drift_scores(&trace, 0, w.config.d_head()).unwrap();
        // seven step pairs of eight tokens, one token changes per pair
        assert_eq!(scores.len(), 7 * 8);
        assert!(scores.iter().filter(|s| **s < 1e-9).count() >= 7 * 7);
        let h = drift_histogram(&trace, 1, w.config.d_head(), None).unwrap();
        assert_eq!(h.total, 56);
        assert!(drift_histogram(&trace, 2, 8, None).is_err());
    }

    #[test]
    fn csv_has_metadata_line() {
        let s = temporal_similarity(&[Matrix::identity(2), Matrix::identity(2)], None).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf, serde_json::json!({"axis": "timestep"})).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# {"));
        assert_eq!(lines.next().unwrap(), "0,1");
        assert_eq!(text.lines().count(), 4);
    }
}
