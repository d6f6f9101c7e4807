//! `dare`: command-line front end for drift-aware activation reuse.
//!
//! Exit codes: 0 success, 1 bound violations found by `verify`, 2 usage or
//! configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dare_core::analysis::{self, CostModel};
use dare_core::drift::DriftProfile;
use dare_core::model::{self, LayerActivations, ModelWeights};
use dare_core::pipeline::{self, BenchOptions, RunConfig};
use dare_core::reuse::ReuseMode;
use dare_core::sampler::GenerationTrace;
use dare_core::theory::{self, VerifyOptions};
use dare_core::{linalg, Matrix};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "dare", version, about = "Drift-aware activation reuse for toy masked-diffusion models")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    over: Overrides,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    phi_bar: Option<f64>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// full, kv or o
    #[arg(long, global = true)]
    mode: Option<ReuseMode>,
    /// Same drift threshold at every layer, instead of a calibrated profile.
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    skip_layers: Option<usize>,
    #[arg(long, global = true)]
    refresh_interval: Option<u32>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    block_size: Option<usize>,
    /// Denoising steps per block.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    gen_length: Option<usize>,
    #[arg(long, global = true)]
    unmask_per_step: Option<usize>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Score tokens by the largest drift over heads instead of head 0.
    #[arg(long, global = true)]
    per_head: bool,
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    #[arg(long, global = true)]
    profile: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write seeded random weights.
    InitModel {
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        d_int: Option<usize>,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        model_seed: Option<u64>,
        /// relu or gelu
        #[arg(long)]
        activation: Option<String>,
    },
    /// Estimate per-layer drift and write a threshold profile.
    Calibrate {
        #[arg(long)]
        prompts: Option<usize>,
    },
    /// Generate tokens and a per-step reuse trace.
    Generate,
    /// Check the explicit error bounds on coupled runs (single layer, single head).
    Verify {
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 1000)]
        softmax_samples: usize,
        /// Sabotage control: evaluate the cumulative bound with G = 0.
        #[arg(long, hide = true)]
        debug_force_g_zero: bool,
    },
    /// Similarity matrices, drift histograms and FLOP counts for one run.
    Analyze,
    /// Sweep the reuse budget.
    Bench {
        /// Comma-separated budgets.
        #[arg(long, value_delimiter = ',')]
        phi_grid: Option<Vec<f64>>,
        #[arg(long, default_value_t = 4)]
        coupled_trials: usize,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Violations(usize),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Violations(n)) => {
            eprintln!("dare: {n} bound violations");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("dare: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::from_json(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let o = &cli.over;
    macro_rules! set {
        ($src:expr => $($dst:tt)+) => {
            if let Some(v) = $src.clone() {
                $($dst)+ = v;
            }
        };
    }
    set!(o.phi_bar => cfg.drift.phi_bar);
    set!(o.epsilon => cfg.drift.epsilon);
    set!(o.mode => cfg.reuse.mode);
    set!(o.skip_layers => cfg.reuse.skip_first_layers);
    set!(o.seed => cfg.sampler.seed);
    set!(o.steps => cfg.sampler.steps_per_block);
    set!(o.gen_length => cfg.sampler.gen_length);
    set!(o.unmask_per_step => cfg.sampler.tokens_unmasked_per_step);
    set!(o.temperature => cfg.sampler.temperature);
    set!(o.weights => cfg.paths.weights);
    set!(o.out => cfg.paths.output_dir);
    if let Some(b) = o.block_size {
        cfg.sampler.block_size = b;
        cfg.model.block_len = b;
    }
    if o.tau.is_some() {
        cfg.drift.tau_override = o.tau;
    }
    if o.refresh_interval.is_some() {
        cfg.reuse.refresh_interval = o.refresh_interval;
    }
    if o.profile.is_some() {
        cfg.paths.profile = o.profile.clone();
    }
    cfg.drift.per_head |= o.per_head;
    Ok(cfg)
}

fn load_model(cfg: &RunConfig, over: &Overrides) -> Result<ModelWeights> {
    let path = &cfg.paths.weights;
    let w = model::load_weights(path).with_context(|| format!("loading weights {}", path.display()))?;
    if over.block_size.is_some_and(|b| b != w.config.block_len) {
        bail!("--block-size {} differs from the model's block length {}", over.block_size.unwrap(), w.config.block_len);
    }
    Ok(w)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.paths.output_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

/// Timestamps live here so the primary outputs stay byte-identical across
/// reruns.
fn write_meta(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let secs = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    write_json(
        &dir.join(format!("{command}.meta.json")),
        &json!({ "command": command, "unix_time": secs, "version": env!("CARGO_PKG_VERSION"), "config": cfg }),
    )
}

/// Calibrated profile from `--profile`, or `<out>/profile.json` if present.
fn stored_profile(cfg: &RunConfig) -> Result<Option<DriftProfile>> {
    let default = cfg.paths.output_dir.join("profile.json");
    let path = match &cfg.paths.profile {
        Some(p) => p.clone(),
        None if default.exists() => default,
        None => return Ok(None),
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading profile {}", path.display()))?;
    Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing profile {}", path.display()))?))
}

fn profile_for(w: &ModelWeights, cfg: &RunConfig) -> Result<DriftProfile> {
    let stored = if cfg.reuse.mode == ReuseMode::Full && cfg.drift.tau_override.is_none() {
        None
    } else {
        stored_profile(cfg)?
    };
    Ok(pipeline::resolve_profile(w, cfg, stored)?)
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let mut cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::InitModel { layers, heads, d_model, d_int, vocab, model_seed, activation } => {
            let m = &mut cfg.model;
            m.layers = layers.unwrap_or(m.layers);
            m.heads = heads.unwrap_or(m.heads);
            m.d_model = d_model.unwrap_or(m.d_model);
            m.d_int = d_int.unwrap_or(m.d_int);
            m.n_vocab = vocab.unwrap_or(m.n_vocab);
            m.seed = model_seed.unwrap_or(m.seed);
            if let Some(a) = activation {
                m.activation = serde_json::from_value(json!(a)).map_err(|_| anyhow!("unknown activation {a:?}"))?;
            }
            init_model(&cfg)
        }
        Cmd::Calibrate { prompts } => {
            if let Some(p) = prompts {
                cfg.drift.calibration_prompts = *p;
            }
            calibrate(&cfg, &cli.over)
        }
        Cmd::Generate => generate(&cfg, &cli.over),
        Cmd::Verify { trials, softmax_samples, debug_force_g_zero } => {
            let opts = VerifyOptions {
                trials: *trials,
                steps: cfg.sampler.steps_per_block,
                seed: cfg.sampler.seed,
                softmax_samples: *softmax_samples,
                force_g_zero: *debug_force_g_zero,
            };
            verify(&cfg, &cli.over, &opts)
        }
        Cmd::Analyze => analyze(&cfg, &cli.over),
        Cmd::Bench { phi_grid, coupled_trials } => {
            let grid = phi_grid.clone().unwrap_or_else(|| pipeline::DEFAULT_PHI_GRID.to_vec());
            let opts = BenchOptions { coupled_trials: *coupled_trials, coupled_steps: cfg.sampler.steps_per_block };
            bench(&cfg, &cli.over, &grid, &opts)
        }
    }
}

fn init_model(cfg: &RunConfig) -> std::result::Result<(), Failure> {
    let w = model::init_weights(&cfg.model).context("building model")?;
    let path = &cfg.paths.weights;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    model::save_weights(&w, path).with_context(|| format!("writing {}", path.display()))?;
    let kappa = linalg::condition_kappa(&w.layers[0].w_q).ok();
    let g = theory::lipschitz_g(&w).ok();
    println!(
        "{}",
        json!({ "weights": path, "kappa_q": kappa, "radius": w.radius, "lipschitz_g": g })
    );
    Ok(())
}

fn calibrate(cfg: &RunConfig, over: &Overrides) -> std::result::Result<(), Failure> {
    let w = load_model(cfg, over)?;
    let (profile, lw) = pipeline::calibrate(&w, cfg).context("calibration")?;
    let dir = out_dir(cfg)?;
    let path = cfg.paths.profile.clone().unwrap_or_else(|| dir.join("profile.json"));
    write_json(&path, &profile)?;
    write_json(&dir.join("calibration_scores.json"), &lw)?;
    write_meta(&dir, "calibrate", cfg)?;
    println!("{}", json!({ "profile": path, "s_layer": profile.s_layer, "phi_layer": profile.phi_layer, "tau_layer": profile.tau_layer }));
    Ok(())
}

fn generate(cfg: &RunConfig, over: &Overrides) -> std::result::Result<(), Failure> {
    let w = load_model(cfg, over)?;
    let profile = profile_for(&w, cfg)?;
    let (summary, trace) = pipeline::generate(&w, cfg, &profile, false).context("generation")?;
    let dir = out_dir(cfg)?;
    write_json(&dir.join("tokens.json"), &summary.tokens)?;
    let mut lines = Vec::new();
    trace.write_jsonl(&mut lines).context("trace")?;
    write(&dir.join("trace.jsonl"), lines)?;
    write_json(&dir.join("summary.json"), &summary)?;
    write_meta(&dir, "generate", cfg)?;
    println!(
        "{}",
        json!({ "mode": summary.mode, "reuse_fraction": summary.reuse_fraction, "saved_flop_fraction": summary.flops.saved_fraction })
    );
    Ok(())
}

fn verify(cfg: &RunConfig, over: &Overrides, opts: &VerifyOptions) -> std::result::Result<(), Failure> {
    let w = load_model(cfg, over)?;
    let mut vcfg = cfg.clone();
    if vcfg.reuse.mode == ReuseMode::Full {
        vcfg.reuse.mode = ReuseMode::Kv;
    }
    let profile = profile_for(&w, &vcfg)?;
    let report = pipeline::verify(&w, &vcfg, &profile, opts).context("verification")?;
    let dir = out_dir(cfg)?;
    write_json(&dir.join("theory_report.json"), &report)?;
    write(&dir.join("theory_series.csv"), report.series_csv().context("series")?)?;
    write_meta(&dir, "verify", cfg)?;
    println!(
        "{}",
        json!({
            "mode": report.mode,
            "g": report.g,
            "tau_tilde": report.tau_tilde,
            "cumulative_bound": report.cumulative_bound,
            "cumulative_empirical": report.cumulative_empirical,
            "violations": report.violations,
        })
    );
    if report.violations > 0 {
        return Err(Failure::Violations(report.violations));
    }
    Ok(())
}

fn head0_series(trace: &GenerationTrace, block: usize, d_head: usize, pick: impl Fn(&LayerActivations) -> &Matrix, layer: usize) -> Vec<Matrix> {
    trace
        .steps
        .iter()
        .filter(|s| s.block == block)
        .filter_map(|s| s.activations.as_ref())
        .map(|a| LayerActivations::head_slice(pick(&a.layers[layer]), 0, d_head))
        .collect()
}

fn analyze(cfg: &RunConfig, over: &Overrides) -> std::result::Result<(), Failure> {
    let w = load_model(cfg, over)?;
    let profile = profile_for(&w, cfg)?;
    let (summary, trace) = pipeline::generate(&w, cfg, &profile, true).context("generation")?;
    let dir = out_dir(cfg)?;
    let (layers, d, dh) = (w.config.layers, w.config.d_model, w.config.d_head());
    let mut written = Vec::new();
    let mut emit = |name: String, bytes: Vec<u8>| -> Result<()> {
        write(&dir.join(&name), bytes)?;
        written.push(name);
        Ok(())
    };

    for layer in 0..layers {
        // layer inputs of the first block over its steps, token mean and per token
        let hidden = head0_series(&trace, 0, d, |a| &a.input, layer);
        if hidden.len() >= 2 {
            let sim = analysis::temporal_similarity(&hidden, None).context("similarity")?;
            let mut buf = Vec::new();
            sim.write_csv(&mut buf, json!({"axis": "timestep", "activation": "layer_input", "layer": layer, "token": "mean"}))
                .context("csv")?;
            emit(format!("temporal_input_l{layer}.csv"), buf)?;

            let mut rows = Vec::new();
            for tok in 0..w.config.block_len {
                let s = analysis::temporal_similarity(&hidden, Some(tok)).context("similarity")?;
                for i in 0..s.n() {
                    for j in 0..s.n() {
                        rows.push(vec![tok.to_string(), i.to_string(), j.to_string(), format!("{:.12}", s.entries.get(i, j))]);
                    }
                }
            }
            let mut buf = Vec::new();
            let header = ["token", "i", "j", "similarity"].map(String::from);
            analysis::write_table(&mut buf, json!({"axis": "timestep", "activation": "layer_input", "layer": layer}), &header, &rows)
                .context("csv")?;
            emit(format!("temporal_input_l{layer}_per_token.csv"), buf)?;

            let keys = head0_series(&trace, 0, dh, |a| &a.k, layer);
            let sim = analysis::temporal_similarity(&keys, None).context("similarity")?;
            let mut buf = Vec::new();
            sim.write_csv(&mut buf, json!({"axis": "timestep", "activation": "key_head0", "layer": layer, "token": "mean"}))
                .context("csv")?;
            emit(format!("temporal_key_l{layer}.csv"), buf)?;
        }

        let hist = analysis::drift_histogram(&trace, layer, dh, profile.tau_layer.get(layer).copied().flatten())
            .context("histogram")?;
        let mut buf = Vec::new();
        hist.write_csv(&mut buf).context("csv")?;
        emit(format!("drift_hist_l{layer}.csv"), buf)?;
    }

    if layers >= 2 {
        let last = trace.steps.iter().filter(|s| s.block == 0).filter_map(|s| s.activations.as_ref()).last();
        if let Some(acts) = last {
            let values: Vec<Matrix> = acts.layers.iter().map(|a| a.v.clone()).collect();
            let sim = analysis::cross_layer_similarity(&values, None).context("similarity")?;
            let mut buf = Vec::new();
            sim.write_csv(&mut buf, json!({"axis": "layer", "activation": "value", "block": 0, "step": "last"}))
                .context("csv")?;
            emit("cross_layer_value.csv".into(), buf)?;
        }
    }

    let cost = CostModel::new(&w.config);
    write_json(&dir.join("flops.json"), &json!({ "cost_model": cost, "flops": summary.flops, "reuse_fraction": summary.reuse_fraction }))?;
    write_meta(&dir, "analyze", cfg)?;
    println!("{}", json!({ "written": written, "flops": summary.flops }));
    Ok(())
}

fn bench(cfg: &RunConfig, over: &Overrides, grid: &[f64], opts: &BenchOptions) -> std::result::Result<(), Failure> {
    let w = load_model(cfg, over)?;
    let mut bcfg = cfg.clone();
    if bcfg.reuse.mode == ReuseMode::Full {
        bcfg.reuse.mode = ReuseMode::Kv;
    }
    let rows = pipeline::bench(&w, &bcfg, grid, opts).context("bench")?;
    let dir = out_dir(cfg)?;
    let meta = json!({ "mode": bcfg.reuse.mode, "epsilon": bcfg.drift.epsilon, "coupled_trials": opts.coupled_trials });
    let csv = pipeline::bench_csv(&rows, meta).context("csv")?;
    write(&dir.join("bench.csv"), &csv)?;
    write_meta(&dir, "bench", cfg)?;
    print!("{csv}");
    Ok(())
}
