//! Toy bi-directional diffusion transformer.
//!
//! Per layer: `Q = X̂W_Q, K = X̂W_K, V = X̂W_V`, `A = softmax(QKᵀ/√d_head)` per
//! head, `O = (AV)W_O`, `H = σ(OW_U)W_D`. Each layer reads a row-normalized
//! copy of the residual stream (rows rescaled to norm `√d`); the stream adds
//! each layer's `H`. Logits are `H_last Eᵀ`, so a one-layer model is exactly
//! the single-layer single-head network the error bounds are stated for.
//!
//! There is no positional encoding, which makes the stack permutation
//! equivariant over token rows.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DareError, Result};
use crate::linalg::{self, Matrix};

pub const WEIGHT_MAGIC: &[u8; 4] = b"DARE";
pub const WEIGHT_VERSION: u32 = 1;

/// Lipschitz constant used for the tanh-approximated GELU.
pub const GELU_LIPSCHITZ: f64 = 1.13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
            }
        }
    }

    /// `G_σ`
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Relu => 1.0,
            Activation::Gelu => GELU_LIPSCHITZ,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_int: usize,
    pub n_vocab: usize,
    /// Tokens per denoising window.
    pub block_len: usize,
    #[serde(default)]
    pub activation: Activation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 16,
            d_int: 32,
            n_vocab: 32,
            block_len: 8,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_int", self.d_int),
            ("block_len", self.block_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(DareError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.n_vocab < 2 {
            return Err(DareError::InvalidConfig("n_vocab must be >= 2".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(DareError::InvalidConfig(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn is_single_layer_single_head(&self) -> bool {
        self.layers == 1 && self.heads == 1
    }

    pub fn require_theory_regime(&self) -> Result<()> {
        if self.is_single_layer_single_head() {
            Ok(())
        } else {
            Err(DareError::Regime { layers: self.layers, heads: self.heads })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_u: Matrix,
    pub w_d: Matrix,
}

impl LayerWeights {
    fn named(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("w_u", &self.w_u),
            ("w_d", &self.w_d),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub layers: Vec<LayerWeights>,
    /// Shared embedding / unembedding, `n_vocab × d`.
    pub embedding: Matrix,
    pub mask_token: usize,
    /// Largest Euclidean row norm of `embedding`.
    pub radius: f64,
    normalized: Matrix,
}

impl ModelWeights {
    /// Assembles weights, checking shapes and deriving the radius and the
    /// normalized embedding table.
    pub fn new(
        config: ModelConfig,
        layers: Vec<LayerWeights>,
        embedding: Matrix,
        mask_token: usize,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let shape_err = |what: String| DareError::DimensionMismatch { op: "ModelWeights::new", detail: what };
        if layers.len() != config.layers {
            return Err(shape_err(format!("{} layers for L = {}", layers.len(), config.layers)));
        }
        for (l, lw) in layers.iter().enumerate() {
            for (name, m) in lw.named() {
                let want = match name {
                    "w_u" => (d, config.d_int),
                    "w_d" => (config.d_int, d),
                    _ => (d, d),
                };
                if m.shape() != want {
                    return Err(shape_err(format!("layer {l} {name} is {:?}, want {want:?}", m.shape())));
                }
                if !m.is_finite() {
                    return Err(DareError::NonFinite("ModelWeights::new"));
                }
            }
        }
        if embedding.shape() != (config.n_vocab, d) {
            return Err(shape_err(format!("embedding is {:?}", embedding.shape())));
        }
        if mask_token >= config.n_vocab {
            return Err(DareError::TokenOutOfRange { index: mask_token, vocab: config.n_vocab });
        }
        let normalized = linalg::row_normalize_sqrt_d(&embedding)?;
        let radius = linalg::norm_2_to_inf(&embedding);
        Ok(Self { config, layers, embedding, mask_token, radius, normalized })
    }

    /// Layer-normalized input embedding `f_E(j)`.
    pub fn token_embedding(&self, token: usize) -> &[f64] {
        self.normalized.row(token)
    }

    pub fn with_layer(&self, layer: usize, f: impl FnOnce(&mut LayerWeights)) -> Result<Self> {
        let mut layers = self.layers.clone();
        f(&mut layers[layer]);
        Self::new(self.config, layers, self.embedding.clone(), self.mask_token)
    }
}

/// Gaussian init with standard deviation `1/√d`, then `E` rescaled so its
/// largest row norm is 1. The last vocabulary entry is the mask token.
pub fn init_weights(config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let d = config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
    let mut draw = |rows: usize, cols: usize| -> Matrix {
        let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
        Matrix::from_vec(rows, cols, data).expect("finite gaussian draws")
    };
    let layers = (0..config.layers)
        .map(|_| LayerWeights {
            w_q: draw(d, d),
            w_k: draw(d, d),
            w_v: draw(d, d),
            w_o: draw(d, d),
            w_u: draw(d, config.d_int),
            w_d: draw(config.d_int, d),
        })
        .collect();
    let raw = draw(config.n_vocab, d);
    let embedding = raw.scale(1.0 / linalg::norm_2_to_inf(&raw));
    ModelWeights::new(*config, layers, embedding, config.n_vocab - 1)
}

/// Rows of `f_E` for each token.
pub fn embed_tokens(weights: &ModelWeights, tokens: &[usize]) -> Result<Matrix> {
    let d = weights.config.d_model;
    let mut x = Matrix::zeros(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        if t >= weights.config.n_vocab {
            return Err(DareError::TokenOutOfRange { index: t, vocab: weights.config.n_vocab });
        }
        x.copy_row_from(i, weights.token_embedding(t));
    }
    Ok(x)
}

/// Everything one layer computed for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    /// Normalized layer input `X̂`.
    pub input: Matrix,
    pub q: Matrix,
    /// Keys and values actually attended over (hybrid under KV reuse).
    pub k: Matrix,
    pub v: Matrix,
    /// Attention output before `W_O`.
    pub attn: Matrix,
    /// Attention output after `W_O`.
    pub o: Matrix,
    /// MLP output.
    pub h: Matrix,
}

impl LayerActivations {
    /// Columns of head `h` of `m`.
    pub fn head_slice(m: &Matrix, head: usize, d_head: usize) -> Matrix {
        m.col_slice(head * d_head, (head + 1) * d_head)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub probs: Matrix,
    pub layers: Vec<LayerActivations>,
}

/// The attention part of one layer as produced by a policy: the queries,
/// the keys/values used, and the pre-`W_O` output.
#[derive(Debug, Clone)]
pub struct AttentionParts {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub attn: Matrix,
}

/// Attention output rows (pre-`W_O`) for the listed query rows.
///
/// Output row `k` corresponds to query row `rows[k]`. Each row is computed
/// independently with a fixed summation order, so a partial evaluation is
/// bit-identical to the matching rows of a full one.
pub fn attention_rows(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, rows: &[usize]) -> Result<Matrix> {
    let (n, d) = k.shape();
    if q.cols() != d || v.shape() != (n, d) || d % heads != 0 {
        return Err(DareError::DimensionMismatch {
            op: "attention_rows",
            detail: format!("q {:?}, k {:?}, v {:?}, heads {heads}", q.shape(), k.shape(), v.shape()),
        });
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(rows.len(), d);
    let mut weights = vec![0.0; n];
    for (r, &i) in rows.iter().enumerate() {
        let qi = q.row(i);
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            for (j, w) in weights.iter_mut().enumerate() {
                *w = linalg::dot(&qi[span.clone()], &k.row(j)[span.clone()]) * scale;
            }
            linalg::softmax_in_place(&mut weights);
            let dst = &mut out.row_mut(r)[span.clone()];
            for (j, w) in weights.iter().enumerate() {
                for (o, vv) in dst.iter_mut().zip(&v.row(j)[span.clone()]) {
                    *o += w * vv;
                }
            }
        }
    }
    Ok(out)
}

pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<Matrix> {
    let all: Vec<usize> = (0..q.rows()).collect();
    attention_rows(q, k, v, heads, &all)
}

/// `σ(O W_U) W_D`
pub fn mlp(lw: &LayerWeights, o: &Matrix, act: Activation) -> Result<Matrix> {
    let up = o.matmul(&lw.w_u)?.map(|x| act.apply(x));
    up.matmul(&lw.w_d)
}

/// Runs the layer stack with a pluggable attention stage.
///
/// `attend(layer, weights, x_norm)` returns the attention parts for that
/// layer; everything around it (input normalization, `W_O`, MLP, residual,
/// unembedding) is shared, so two policies that agree on the attention
/// parts produce bit-identical distributions.
pub fn forward_with<F>(weights: &ModelWeights, x: &Matrix, mut attend: F) -> Result<ForwardOutput>
where
    F: FnMut(usize, &LayerWeights, &Matrix) -> Result<AttentionParts>,
{
    let cfg = &weights.config;
    if x.cols() != cfg.d_model {
        return Err(DareError::DimensionMismatch {
            op: "forward",
            detail: format!("input has {} columns, model width is {}", x.cols(), cfg.d_model),
        });
    }
    let mut stream = x.clone();
    let mut acts = Vec::with_capacity(cfg.layers);
    for (l, lw) in weights.layers.iter().enumerate() {
        let input = if l == 0 { x.clone() } else { linalg::row_normalize_sqrt_d(&stream)? };
        let parts = attend(l, lw, &input)?;
        let o = parts.attn.matmul(&lw.w_o)?;
        let h = mlp(lw, &o, cfg.activation)?;
        if l + 1 < cfg.layers {
            stream = stream.add(&h)?;
        }
        acts.push(LayerActivations { input, q: parts.q, k: parts.k, v: parts.v, attn: parts.attn, o, h });
    }
    let last = &acts.last().expect("at least one layer").h;
    let logits = last.matmul(&weights.embedding.transpose())?;
    let probs = linalg::row_softmax(&logits);
    Ok(ForwardOutput { logits, probs, layers: acts })
}

/// Full attention for one layer with no reuse.
pub fn full_attention(lw: &LayerWeights, x_norm: &Matrix, heads: usize) -> Result<AttentionParts> {
    let q = x_norm.matmul(&lw.w_q)?;
    let k = x_norm.matmul(&lw.w_k)?;
    let v = x_norm.matmul(&lw.w_v)?;
    let attn = attention(&q, &k, &v, heads)?;
    Ok(AttentionParts { q, k, v, attn })
}

fn check_input_normalized(x: &Matrix) -> Result<()> {
    let target = (x.cols() as f64).sqrt();
    for (i, row) in x.row_iter().enumerate() {
        let n = linalg::l2(row);
        if (n - target).abs() > 1e-9 * target.max(1.0) {
            return Err(DareError::Degenerate(format!(
                "input row {i} has norm {n}, expected {target}"
            )));
        }
    }
    Ok(())
}

/// Forward pass of the full model with no activation reuse.
pub fn forward_full(weights: &ModelWeights, x: &Matrix) -> Result<ForwardOutput> {
    check_input_normalized(x)?;
    let heads = weights.config.heads;
    forward_with(weights, x, |_, lw, xn| full_attention(lw, xn, heads))
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset from the start of the payload (first byte after the header).
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightHeader {
    config: ModelConfig,
    mask_token: usize,
    tensors: Vec<TensorEntry>,
}

fn tensor_list(weights: &ModelWeights) -> Vec<(String, &Matrix)> {
    let mut out = Vec::new();
    for (l, lw) in weights.layers.iter().enumerate() {
        for (name, m) in lw.named() {
            out.push((format!("layers.{l}.{name}"), m));
        }
    }
    out.push(("embedding".to_string(), &weights.embedding));
    out
}

/// Serializes weights: `"DARE"`, `u32` version, `u32` header length, JSON
/// header, then little-endian `f64` payload in manifest order.
pub fn write_weights<W: Write>(weights: &ModelWeights, mut w: W) -> Result<()> {
    let mut offset = 0u64;
    let tensors: Vec<(String, &Matrix)> = tensor_list(weights);
    let manifest = tensors
        .iter()
        .map(|(name, m)| {
            let e = TensorEntry { name: name.clone(), rows: m.rows(), cols: m.cols(), offset };
            offset += (m.data().len() * 8) as u64;
            e
        })
        .collect();
    let header = WeightHeader { config: weights.config, mask_token: weights.mask_token, tensors: manifest };
    let json = serde_json::to_vec(&header)?;
    w.write_all(WEIGHT_MAGIC)?;
    w.write_all(&WEIGHT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, m) in &tensors {
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_weights<R: Read>(mut r: R) -> Result<ModelWeights> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 12 || &buf[..4] != WEIGHT_MAGIC {
        return Err(DareError::Format("missing DARE magic".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != WEIGHT_VERSION {
        return Err(DareError::Format(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let payload_start = 12 + hlen;
    if buf.len() < payload_start {
        return Err(DareError::Format("truncated header".into()));
    }
    let header: WeightHeader = serde_json::from_slice(&buf[12..payload_start])?;
    let payload = &buf[payload_start..];
    let load = |name: &str| -> Result<Matrix> {
        let e = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| DareError::Format(format!("tensor {name} missing")))?;
        let start = e.offset as usize;
        let end = start + e.rows * e.cols * 8;
        if end > payload.len() {
            return Err(DareError::Format(format!("tensor {name} runs past end of file")));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(e.rows, e.cols, data)
    };
    let cfg = header.config;
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        layers.push(LayerWeights {
            w_q: load(&format!("layers.{l}.w_q"))?,
            w_k: load(&format!("layers.{l}.w_k"))?,
            w_v: load(&format!("layers.{l}.w_v"))?,
            w_o: load(&format!("layers.{l}.w_o"))?,
            w_u: load(&format!("layers.{l}.w_u"))?,
            w_d: load(&format!("layers.{l}.w_d"))?,
        });
    }
    ModelWeights::new(cfg, layers, load("embedding")?, header.mask_token)
}

pub fn save_weights(weights: &ModelWeights, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_weights(weights, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    read_weights(std::fs::File::open(path)?)
}
