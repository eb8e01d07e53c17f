//! Config-driven experiment pipeline: datagen → train → LASER → evaluate →
//! probes, with every artifact written under one output directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assocmem::{self, AssocConfig, AssocEmbed, TrajectoryRow};
use crate::datagen::{domain, estimate_bigrams, generate_batch, TaskKind, TaskSpec, Token};
use crate::laser::{apply_laser, kept_rank, LaserTarget};
use crate::metrics::{attention_map, diagonal_dominance, evaluate, EvalReport, Inspect, ProbeKind};
use crate::nets::{
    save_checkpoint, EmbedScheme, FfKind, NamedWeights, TransformerConfig, TransformerWeights,
};
use crate::train::{fit_from, Optimizer, OptimizerConfig, StepInfo, TrainConfig};

pub const METRICS_SCHEMA: &str = "# schema: icl-lab/metrics v1";
pub const ATTN_SCHEMA: &str = "# schema: icl-lab/attn v1";
pub const PROBE_SCHEMA: &str = "# schema: icl-lab/probe v1";
pub const RANK_SCHEMA: &str = "# schema: icl-lab/assocmem-ranks v1";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage {
        stage: String,
        message: String,
        numeric: bool,
    },
    #[error("io: {0}")]
    Io(String),
}

impl RunError {
    /// Divergence and SVD failures as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, RunError::Stage { numeric: true, .. })
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> RunError + '_ {
    move |e| RunError::Io(format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(flatten)]
    pub pipeline: Pipeline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pipeline", rename_all = "snake_case")]
pub enum Pipeline {
    Transformer(TransformerExperiment),
    Assocmem(AssocExperiment),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub n: usize,
    pub t: usize,
    pub alpha: f64,
    pub triggers: Vec<Token>,
    #[serde(default)]
    pub kind: TaskKind,
    /// Text file whose character bigrams replace the uniform draws.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: Vec<FfKind>,
    #[serde(default)]
    pub factorize_first_value: bool,
    #[serde(default)]
    pub embed: EmbedScheme,
    #[serde(default)]
    pub init_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSweep {
    pub lrs: Vec<f64>,
    /// Steps each candidate trains before the comparison.
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaserConfig {
    pub matrix: String,
    pub rhos: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnConfig {
    pub sequences: usize,
    #[serde(default)]
    pub layers: Vec<usize>,
    /// Extra global steps at which maps are captured, e.g. a phase boundary.
    #[serde(default)]
    pub at_steps: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerExperiment {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub lr_sweep: Option<LrSweep>,
    pub m_test: usize,
    #[serde(default)]
    pub laser: Option<LaserConfig>,
    #[serde(default)]
    pub attention: Option<AttnConfig>,
    #[serde(default)]
    pub probes: Vec<ProbeKind>,
    /// Alternative architectures run on the same data into `variants/<name>`.
    #[serde(default)]
    pub variants: Vec<Variant>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssocStudy {
    /// Many random-embedding seeds; compares pure-label loss across ranks.
    RankSweep,
    /// One orthonormal run against the gradient-flow ODE.
    Ode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssocExperiment {
    pub study: AssocStudy,
    pub n: usize,
    pub d: usize,
    pub alpha: f64,
    pub lr: f64,
    pub steps: u64,
    #[serde(default = "one")]
    pub seeds: u64,
    #[serde(default)]
    pub embed: Option<AssocEmbed>,
    #[serde(default)]
    pub batch: Option<usize>,
    #[serde(default)]
    pub grad_tol: Option<f64>,
    /// Seeds where the lower rank must win for the study to pass.
    #[serde(default)]
    pub required: Option<usize>,
}

fn one() -> u64 {
    1
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String), RunError> {
        let text = fs::read_to_string(path).map_err(io(path))?;
        Ok((Self::from_json(&text)?, text))
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("bad experiment name {:?}", self.name));
        }
        match &self.pipeline {
            Pipeline::Transformer(x) => {
                x.train
                    .validate()
                    .map_err(|e| RunError::Config(e.to_string()))?;
                if x.m_test == 0 {
                    return bad("m_test must be positive".into());
                }
                if let Some(s) = &x.lr_sweep {
                    if s.lrs.is_empty() || s.lrs.iter().any(|lr| *lr <= 0.0) {
                        return bad("lr_sweep.lrs must be positive and non-empty".into());
                    }
                    if s.steps > x.train.total_steps() {
                        return bad("lr_sweep.steps exceeds the schedule".into());
                    }
                }
                if let Some(l) = &x.laser {
                    for rho in &l.rhos {
                        LaserTarget::new(l.matrix.clone(), *rho)
                            .map_err(|e| RunError::Config(e.to_string()))?;
                    }
                }
                let mut names: Vec<&str> = x.variants.iter().map(|v| v.name.as_str()).collect();
                names.sort_unstable();
                names.dedup();
                if names.len() != x.variants.len() {
                    return bad("duplicate variant names".into());
                }
                for m in std::iter::once(&x.model).chain(x.variants.iter().map(|v| &v.model)) {
                    x.model_config(m, 0)
                        .validate()
                        .map_err(|e| RunError::Config(e.to_string()))?;
                }
            }
            Pipeline::Assocmem(a) => {
                if a.n < 2 || a.d == 0 || a.steps == 0 || a.seeds == 0 || a.lr <= 0.0 {
                    return bad("assocmem needs n ≥ 2 and positive d, steps, seeds, lr".into());
                }
                if !(0.0..1.0).contains(&a.alpha) {
                    return bad(format!("alpha {} outside [0, 1)", a.alpha));
                }
            }
        }
        Ok(())
    }
}

impl TransformerExperiment {
    fn model_config(&self, m: &ModelConfig, seed: u64) -> TransformerConfig {
        TransformerConfig {
            n: self.task.n,
            d: m.d,
            t: self.task.t,
            layers: m.layers.clone(),
            factorize_first_value: m.factorize_first_value,
            embed: m.embed,
            init_std: m.init_std,
            seed,
        }
    }

    fn spec(&self) -> Result<TaskSpec, String> {
        let t = &self.task;
        match &t.corpus {
            None => TaskSpec::uniform(t.n, t.triggers.clone(), t.alpha, t.t),
            Some(path) => {
                let text = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
                let bigrams = estimate_bigrams(&text).map_err(|e| e.to_string())?;
                if bigrams.charset.len() != t.n {
                    return Err(format!(
                        "corpus has {} symbols, task.n is {}",
                        bigrams.charset.len(),
                        t.n
                    ));
                }
                TaskSpec::from_bigrams(&bigrams, t.triggers.clone(), t.alpha, t.t)
            }
        }
        .map_err(|e| e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    pub git_describe: String,
    pub config_sha256: String,
    pub threads: usize,
    pub version: String,
    pub selected_lr: Option<f64>,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepEntry {
    pub lr: f64,
    pub steps: u64,
    /// Mean training loss over the last quarter of the candidate's steps;
    /// the lowest wins.
    pub train_loss: f64,
    pub pure_label_loss: f64,
    pub p_correct: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RhoEval {
    pub rho: f64,
    pub rank: usize,
    pub eval: EvalReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttnSummary {
    pub step: u64,
    pub layer: usize,
    pub sequences: usize,
    /// Sequences whose post-trigger mass on `ȳ` beats the mass on `τ`.
    pub correct_wins: usize,
    pub mean_correct_mass: f64,
    pub mean_noise_mass: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub kind: ProbeKind,
    /// Share of non-noise rows whose diagonal beats the rest of the row.
    pub diagonal_dominance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformerReport {
    pub steps: u64,
    pub selected_lr: f64,
    pub sweep: Vec<SweepEntry>,
    /// Final clean-stream metrics; `rho = 1` is the untouched model.
    pub final_eval: Vec<RhoEval>,
    /// First evaluated step with a positive last-layer margin for `q`.
    pub first_positive_margin_step: Option<u64>,
    pub attention: Vec<AttnSummary>,
    pub probes: Vec<ProbeSummary>,
    pub skipped_probes: Vec<String>,
}

impl TransformerReport {
    pub fn at_rho(&self, rho: f64) -> Option<&EvalReport> {
        self.final_eval
            .iter()
            .find(|r| (r.rho - rho).abs() < 1e-12)
            .map(|r| &r.eval)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "pipeline", rename_all = "snake_case")]
pub enum ReportBody {
    Transformer {
        #[serde(flatten)]
        main: TransformerReport,
        variants: BTreeMap<String, TransformerReport>,
    },
    Assocmem(AssocReport),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "study", rename_all = "snake_case")]
pub enum AssocReport {
    RankSweep(assocmem::RankSweepReport),
    Ode(assocmem::OdeSuiteReport),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub name: String,
    #[serde(flatten)]
    pub body: ReportBody,
}

impl Report {
    pub fn load(dir: &Path) -> Result<Report, RunError> {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        let r: Report = serde_json::from_str(&text)
            .map_err(|e| RunError::Config(format!("report.json: {e}")))?;
        if r.version != REPORT_VERSION {
            return Err(RunError::Config(format!(
                "report version {} (expected {REPORT_VERSION})",
                r.version
            )));
        }
        Ok(r)
    }

    pub fn transformer(&self) -> Option<&TransformerReport> {
        match &self.body {
            ReportBody::Transformer { main, .. } => Some(main),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

fn stage<T, E: std::fmt::Display>(name: &str, r: Result<T, E>) -> Result<T, RunError> {
    r.map_err(|e| {
        let message = e.to_string();
        let lower = message.to_lowercase();
        let numeric = ["non-finite", "nonfinite", "diverge", "converge", "nan"]
            .iter()
            .any(|k| lower.contains(k));
        RunError::Stage {
            stage: name.to_string(),
            message,
            numeric,
        }
    })
}

pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs `cfg` into `out`. On failure everything written so far moves to
/// `out/failed/` next to an `error.json` naming the stage.
pub fn run_experiment(cfg: &ExperimentConfig, raw: &str, out: &Path) -> Result<Report, RunError> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io(out))?;
    let result = run_inner(cfg, raw, out);
    if let Err(e) = &result {
        preserve_failure(out, e)?;
    }
    result
}

/// Reads and runs a config file.
pub fn run_config_file(path: &Path, out: &Path, seed: Option<u64>) -> Result<Report, RunError> {
    let (mut cfg, raw) = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    run_experiment(&cfg, &raw, out)
}

fn preserve_failure(out: &Path, e: &RunError) -> Result<(), RunError> {
    let failed = out.join("failed");
    fs::create_dir_all(&failed).map_err(io(&failed))?;
    for entry in fs::read_dir(out).map_err(io(out))?.flatten() {
        if entry.file_name() != "failed" {
            let dest = failed.join(entry.file_name());
            let _ = fs::remove_dir_all(&dest).or_else(|_| fs::remove_file(&dest));
            fs::rename(entry.path(), &dest).map_err(io(&dest))?;
        }
    }
    let stage = match e {
        RunError::Stage { stage, .. } => stage.as_str(),
        RunError::Config(_) => "config",
        RunError::Io(_) => "io",
    };
    let body =
        serde_json::json!({ "stage": stage, "error": e.to_string(), "numeric": e.is_numeric() });
    let path = failed.join("error.json");
    fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).map_err(io(&path))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| RunError::Io(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io(path))
}

fn run_inner(cfg: &ExperimentConfig, raw: &str, out: &Path) -> Result<Report, RunError> {
    let mut manifest = Manifest {
        name: cfg.name.clone(),
        seed: cfg.seed,
        git_describe: git_describe(),
        config_sha256: sha256_hex(raw.as_bytes()),
        threads: crate::par::threads(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        selected_lr: None,
        config: cfg.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    let body = match &cfg.pipeline {
        Pipeline::Transformer(x) => {
            let main = run_transformer(x, &x.model, cfg.seed, out)?;
            manifest.selected_lr = Some(main.selected_lr);
            let mut variants = BTreeMap::new();
            for v in &x.variants {
                let dir = out.join("variants").join(&v.name);
                fs::create_dir_all(&dir).map_err(io(&dir))?;
                variants.insert(
                    v.name.clone(),
                    run_transformer(x, &v.model, cfg.seed, &dir)?,
                );
            }
            ReportBody::Transformer { main, variants }
        }
        Pipeline::Assocmem(a) => ReportBody::Assocmem(run_assocmem(a, cfg.seed, out)?),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    let report = Report {
        version: REPORT_VERSION,
        name: cfg.name.clone(),
        body,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

struct Metrics {
    w: csv::Writer<fs::File>,
}

impl Metrics {
    fn create(path: &Path) -> Result<Self, RunError> {
        let mut f = fs::File::create(path).map_err(io(path))?;
        writeln!(f, "{METRICS_SCHEMA}").map_err(io(path))?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record([
            "lr",
            "step",
            "phase",
            "alpha",
            "train_loss",
            "rho",
            "rank",
            "pure_label_loss",
            "p_correct",
            "p_noise",
            "accuracy",
            "noise_argmax",
            "p_correct_recallable",
            "ff2_margin",
        ])
        .map_err(|e| RunError::Io(e.to_string()))?;
        Ok(Metrics { w })
    }

    fn row(
        &mut self,
        lr: f64,
        s: &StepInfo<TransformerWeights>,
        rho: f64,
        rank: usize,
        r: &EvalReport,
    ) -> Result<(), String> {
        let f = |x: f64| {
            if x.is_finite() {
                x.to_string()
            } else {
                String::new()
            }
        };
        self.w
            .write_record([
                lr.to_string(),
                s.step.to_string(),
                s.phase.to_string(),
                s.alpha.to_string(),
                f(s.loss),
                rho.to_string(),
                rank.to_string(),
                f(r.pure_label_loss),
                f(r.p_correct),
                f(r.p_noise),
                f(r.accuracy),
                f(r.noise_argmax),
                f(r.p_correct_recallable),
                r.ff2_margin.map(f).unwrap_or_default(),
            ])
            .map_err(|e| e.to_string())?;
        self.w.flush().map_err(|e| e.to_string())
    }
}

/// Every `(ρ, rank, model)` the metrics track; `ρ = 1` is the model itself.
fn laser_views(
    w: &TransformerWeights,
    laser: Option<&LaserConfig>,
) -> Result<Vec<(f64, usize, Option<TransformerWeights>)>, String> {
    let mut views = vec![];
    let Some(l) = laser else {
        return Ok(vec![(1.0, 0, None)]);
    };
    let shape = w
        .matrix(&l.matrix)
        .map(|m| m.shape())
        .ok_or_else(|| format!("no matrix {}", l.matrix))?;
    let full = shape.0.min(shape.1);
    if !l.rhos.contains(&1.0) {
        views.push((1.0, full, None));
    }
    for &rho in &l.rhos {
        if rho == 1.0 {
            views.push((1.0, full, None));
        } else {
            let t = LaserTarget::new(l.matrix.clone(), rho).map_err(|e| e.to_string())?;
            views.push((
                rho,
                kept_rank(rho, shape.0, shape.1),
                Some(apply_laser(w, &t).map_err(|e| e.to_string())?),
            ));
        }
    }
    Ok(views)
}

fn run_transformer(
    x: &TransformerExperiment,
    m: &ModelConfig,
    seed: u64,
    out: &Path,
) -> Result<TransformerReport, RunError> {
    let spec = stage("datagen", x.spec())?;
    let init = stage("init", TransformerWeights::init(x.model_config(m, seed)))?;
    let mut train = x.train.clone();
    train.seed = seed;
    let total = train.total_steps();
    let eval_seed = seed.wrapping_add(1);
    let kind = x.task.kind;

    let mut metrics = Metrics::create(&out.join("metrics.csv"))?;
    let mut snapshots: Vec<(u64, TransformerWeights)> = vec![];
    let capture: Vec<u64> = x
        .attention
        .as_ref()
        .map(|a| a.at_steps.clone())
        .unwrap_or_default();
    let mut sink = |lr: f64, s: &StepInfo<TransformerWeights>| -> Result<(), String> {
        if capture.contains(&s.step) && !snapshots.iter().any(|(k, _)| *k == s.step) {
            snapshots.push((s.step, s.model.clone()));
        }
        for (rho, rank, view) in laser_views(s.model, x.laser.as_ref())? {
            let r = evaluate(
                view.as_ref().unwrap_or(s.model),
                &spec,
                kind,
                x.m_test,
                eval_seed,
            )
            .map_err(|e| e.to_string())?;
            metrics.row(lr, s, rho, rank, &r)?;
        }
        log::info!("lr {lr} step {}/{total} loss {:.4}", s.step, s.loss);
        Ok(())
    };

    let with_lr = |lr: f64| {
        let mut t = train.clone();
        t.optimizer = match t.optimizer {
            OptimizerConfig::Sgd { .. } => OptimizerConfig::Sgd { lr },
            OptimizerConfig::Adam {
                beta1, beta2, eps, ..
            } => OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            },
        };
        t
    };
    // Candidates share the seed; the winner resumes from its own state, which
    // equals an uninterrupted run at that rate.
    let mut sweep = vec![];
    let (selected_lr, model, opt, start) = match &x.lr_sweep {
        None => (
            train.optimizer.lr(),
            init,
            Optimizer::new(train.optimizer, train.lr_overrides.clone()),
            0,
        ),
        Some(sw) => {
            let mut best: Option<(f64, f64, TransformerWeights, Optimizer)> = None;
            for &lr in &sw.lrs {
                let t = with_lr(lr);
                let opt = Optimizer::new(t.optimizer, t.lr_overrides.clone());
                let (w, opt, log) = stage(
                    "train",
                    fit_from(init.clone(), opt, 0, sw.steps, &spec, &t, |s| sink(lr, s)),
                )?;
                let r = stage("evaluate", evaluate(&w, &spec, kind, x.m_test, eval_seed))?;
                let tail = &log[log.len() - (log.len() / 4).max(1).min(log.len())..];
                let train_loss =
                    tail.iter().map(|l| l.loss).sum::<f64>() / tail.len().max(1) as f64;
                sweep.push(SweepEntry {
                    lr,
                    steps: sw.steps,
                    train_loss,
                    pure_label_loss: r.pure_label_loss,
                    p_correct: r.p_correct,
                });
                if best.as_ref().is_none_or(|b| train_loss < b.1) {
                    best = Some((lr, train_loss, w, opt));
                }
            }
            let (lr, _, w, opt) = best.expect("non-empty sweep");
            log::info!("selected lr {lr}");
            (lr, w, opt, sw.steps)
        }
    };
    let model = if start == 0 || start < total {
        let t = with_lr(selected_lr);
        let sink = |s: &StepInfo<TransformerWeights>| {
            if start > 0 && s.step == start {
                Ok(())
            } else {
                sink(selected_lr, s)
            }
        };
        stage("train", fit_from(model, opt, start, total, &spec, &t, sink))?.0
    } else {
        model
    };
    drop(metrics);
    let first_positive = first_positive_from_csv(&out.join("metrics.csv"), selected_lr)?;

    stage(
        "checkpoint",
        save_checkpoint(&out.join("checkpoint"), &model, total),
    )?;

    let mut final_eval = vec![];
    for (rho, rank, view) in stage("laser", laser_views(&model, x.laser.as_ref()))? {
        let eval = stage(
            "evaluate",
            evaluate(
                view.as_ref().unwrap_or(&model),
                &spec,
                kind,
                x.m_test,
                eval_seed,
            ),
        )?;
        final_eval.push(RhoEval { rho, rank, eval });
    }

    let mut attention = vec![];
    if let Some(a) = &x.attention {
        snapshots.retain(|(k, _)| *k != total);
        snapshots.push((total, model.clone()));
        for (step, w) in &snapshots {
            let name = if *step == total {
                "attn_final.csv".to_string()
            } else {
                format!("attn_step{step}.csv")
            };
            attention.extend(stage(
                "attention",
                write_attention(w, &spec, kind, a, seed, *step, &out.join(name)),
            )?);
        }
    }

    let mut probes = vec![];
    let mut skipped_probes = vec![];
    for kind in &x.probes {
        match model.probe(*kind) {
            Ok(grid) => {
                write_grid(&out.join(format!("probes_{}.csv", kind.name())), &grid)?;
                let tau = spec.tau();
                let rows = (0..grid.rows()).filter(|i| *i != tau);
                probes.push(ProbeSummary {
                    kind: *kind,
                    diagonal_dominance: diagonal_dominance(&grid, rows),
                });
            }
            Err(crate::metrics::MetricsError::Unsupported(m)) => {
                log::warn!("probe {} skipped: {m}", kind.name());
                skipped_probes.push(kind.name().to_string());
            }
            Err(e) => return Err(stage::<(), _>("probes", Err(e)).unwrap_err()),
        }
    }

    Ok(TransformerReport {
        steps: total,
        selected_lr,
        sweep,
        final_eval,
        first_positive_margin_step: first_positive,
        attention,
        probes,
        skipped_probes,
    })
}

fn first_positive_from_csv(path: &Path, lr: f64) -> Result<Option<u64>, RunError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let headers = r
        .headers()
        .map_err(|e| RunError::Io(e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .expect("metrics column")
    };
    let (c_lr, c_step, c_rho, c_m) = (col("lr"), col("step"), col("rho"), col("ff2_margin"));
    for rec in r.records() {
        let rec = rec.map_err(|e| RunError::Io(e.to_string()))?;
        let num = |c: usize| rec[c].parse::<f64>().ok();
        if num(c_lr) == Some(lr) && num(c_rho) == Some(1.0) && num(c_m).is_some_and(|m| m > 0.0) {
            return Ok(rec[c_step].parse().ok());
        }
    }
    Ok(None)
}

fn write_attention(
    w: &TransformerWeights,
    spec: &TaskSpec,
    kind: TaskKind,
    a: &AttnConfig,
    seed: u64,
    step: u64,
    path: &Path,
) -> Result<Vec<AttnSummary>, String> {
    // Noisy draws, so both post-trigger kinds can appear.
    let seqs = generate_batch(spec, kind, seed, domain::PROBE, 0, a.sequences)
        .map_err(|e| e.to_string())?;
    let layers = if a.layers.is_empty() {
        (1..=w.depth()).collect()
    } else {
        a.layers.clone()
    };
    let mut f = fs::File::create(path).map_err(|e| e.to_string())?;
    writeln!(f, "{ATTN_SCHEMA}").map_err(|e| e.to_string())?;
    let mut csvw = csv::Writer::from_writer(f);
    csvw.write_record([
        "seq",
        "layer",
        "position",
        "prev",
        "cur",
        "score",
        "prev_trigger",
        "ybar",
    ])
    .map_err(|e| e.to_string())?;
    let mut out = vec![];
    for &layer in &layers {
        let (mut wins, mut mc, mut mn) = (0, 0.0, 0.0);
        for (i, s) in seqs.iter().enumerate() {
            let map = attention_map(w, &s.z, layer).map_err(|e| e.to_string())?;
            for (t, score) in map.scores.iter().enumerate() {
                let prev = map.prev[t].map(|p| p.to_string()).unwrap_or_default();
                let pt = map.prev[t].is_some_and(|p| spec.is_trigger(p));
                csvw.write_record([
                    i.to_string(),
                    layer.to_string(),
                    t.to_string(),
                    prev,
                    map.cur[t].to_string(),
                    score.to_string(),
                    (pt as u8).to_string(),
                    s.ybar.to_string(),
                ])
                .map_err(|e| e.to_string())?;
            }
            let (c, n) = map.trigger_mass(spec, s.ybar);
            wins += (c > n) as usize;
            mc += c;
            mn += n;
        }
        let k = seqs.len().max(1) as f64;
        out.push(AttnSummary {
            step,
            layer,
            sequences: seqs.len(),
            correct_wins: wins,
            mean_correct_mass: mc / k,
            mean_noise_mass: mn / k,
        });
    }
    csvw.flush().map_err(|e| e.to_string())?;
    Ok(out)
}

pub fn write_grid(path: &Path, grid: &crate::linalg::Matrix) -> Result<(), RunError> {
    let mut f = fs::File::create(path).map_err(io(path))?;
    writeln!(f, "{PROBE_SCHEMA}").map_err(io(path))?;
    let mut w = csv::Writer::from_writer(f);
    let err = |e: csv::Error| RunError::Io(e.to_string());
    let mut header = vec!["i".to_string()];
    header.extend((0..grid.cols()).map(|j| format!("j{j}")));
    w.write_record(&header).map_err(err)?;
    for i in 0..grid.rows() {
        let mut rec = vec![i.to_string()];
        rec.extend(grid.row(i).iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(io(path))
}

fn run_assocmem(a: &AssocExperiment, seed: u64, out: &Path) -> Result<AssocReport, RunError> {
    match a.study {
        AssocStudy::Ode => {
            let r = stage(
                "train",
                assocmem::ode_suite(a.alpha, a.lr, a.steps, a.d, seed),
            )?;
            let cfg = AssocConfig {
                n: a.n,
                d: a.d,
                alpha: a.alpha,
                lr: a.lr,
                steps: a.steps,
                mode: a.embed.unwrap_or(AssocEmbed::Ortho),
                seed,
                batch: a.batch,
                grad_tol: a.grad_tol,
            };
            let (_, rows) = stage(
                "train",
                assocmem::run_trajectory(&cfg, &assocmem::log_grid(a.steps)),
            )?;
            stage(
                "write",
                assocmem::write_trajectory_csv(&out.join("metrics.csv"), &rows),
            )?;
            Ok(AssocReport::Ode(r))
        }
        AssocStudy::RankSweep => {
            let seeds: Vec<u64> = (seed..seed + a.seeds).collect();
            let required = a.required.unwrap_or(0);
            let r = stage(
                "train",
                assocmem::rank_sweep_suite(a.n, a.d, a.alpha, a.lr, a.steps, &seeds, required),
            )?;
            // Trajectories on a log grid for the quantile-band plots.
            let grid = assocmem::log_grid(a.steps);
            let trajs = crate::par::map_ordered(seeds.len(), |i| {
                let cfg = AssocConfig {
                    n: a.n,
                    d: a.d,
                    alpha: a.alpha,
                    lr: a.lr,
                    steps: r.seeds[i].steps,
                    mode: a.embed.unwrap_or(AssocEmbed::Random),
                    seed: seeds[i],
                    batch: a.batch,
                    grad_tol: None,
                };
                let upto: Vec<u64> = grid.iter().copied().filter(|s| *s <= cfg.steps).collect();
                assocmem::run_trajectory(&cfg, &upto).map(|(_, rows)| rows)
            });
            let mut all = vec![];
            for (s, t) in seeds.iter().zip(trajs) {
                all.push((*s, stage("train", t)?));
            }
            write_rank_csv(&out.join("metrics.csv"), &all)?;
            Ok(AssocReport::RankSweep(r))
        }
    }
}

fn write_rank_csv(path: &Path, runs: &[(u64, Vec<TrajectoryRow>)]) -> Result<(), RunError> {
    let mut f = fs::File::create(path).map_err(io(path))?;
    writeln!(f, "{RANK_SCHEMA}").map_err(io(path))?;
    let mut w = csv::Writer::from_writer(f);
    let err = |e: csv::Error| RunError::Io(e.to_string());
    w.write_record(["seed", "step", "rank", "loss_pure", "p_noise", "loss"])
        .map_err(err)?;
    for (seed, rows) in runs {
        for r in rows {
            for (k, (lp, pn)) in r.loss_pure.iter().zip(&r.p_noise).enumerate() {
                w.write_record([
                    seed.to_string(),
                    r.step.to_string(),
                    (k + 1).to_string(),
                    lp.to_string(),
                    pn.to_string(),
                    r.loss.to_string(),
                ])
                .map_err(err)?;
            }
        }
    }
    w.flush().map_err(io(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{DataMode, LabelMode, Phase};

    fn tiny(steps: u64) -> ExperimentConfig {
        ExperimentConfig {
            name: "tiny".into(),
            seed: 3,
            pipeline: Pipeline::Transformer(TransformerExperiment {
                task: TaskConfig {
                    n: 6,
                    t: 10,
                    alpha: 0.5,
                    triggers: vec![0],
                    kind: TaskKind::Recall,
                    corpus: None,
                },
                model: ModelConfig {
                    d: 12,
                    layers: vec![FfKind::Mlp { hidden: 16 }; 2],
                    factorize_first_value: false,
                    embed: EmbedScheme::default(),
                    init_std: None,
                },
                train: TrainConfig {
                    optimizer: OptimizerConfig::Sgd { lr: 0.1 },
                    batch_size: 4,
                    phases: vec![Phase { steps, alpha: 0.5 }],
                    lr_overrides: BTreeMap::new(),
                    eval_every: 2,
                    seed: 0,
                    data: DataMode::Online,
                    task: TaskKind::Recall,
                    labels: LabelMode::Sampled,
                },
                lr_sweep: None,
                m_test: 16,
                laser: Some(LaserConfig {
                    matrix: "layer2.ff.u_in".into(),
                    rhos: vec![0.0, 0.5],
                }),
                attention: Some(AttnConfig {
                    sequences: 3,
                    layers: vec![],
                    at_steps: vec![],
                }),
                probes: ProbeKind::ALL.to_vec(),
                variants: vec![],
            }),
        }
    }

    fn run(cfg: &ExperimentConfig, dir: &Path) -> Result<Report, RunError> {
        run_experiment(cfg, &serde_json::to_string(cfg).unwrap(), dir)
    }

    #[test]
    fn zero_steps_reports_the_fresh_model() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(0);
        let report = run(&cfg, dir.path()).unwrap();
        let Pipeline::Transformer(x) = &cfg.pipeline else {
            unreachable!()
        };
        let fresh = TransformerWeights::init(x.model_config(&x.model, cfg.seed)).unwrap();
        let spec = x.spec().unwrap();
        let want = evaluate(&fresh, &spec, TaskKind::Recall, 16, cfg.seed + 1).unwrap();
        assert_eq!(report.transformer().unwrap().at_rho(1.0).unwrap(), &want);
        for f in [
            "metrics.csv",
            "attn_final.csv",
            "probes_ff2_noise.csv",
            "report.json",
            "manifest.json",
            "checkpoint/weights.bin",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let m: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(m.config_sha256.len(), 64);
        assert_eq!(m.seed, 3);
    }

    #[test]
    fn rerun_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = tiny(4);
        run(&cfg, a.path()).unwrap();
        run(&cfg, b.path()).unwrap();
        for f in [
            "metrics.csv",
            "attn_final.csv",
            "report.json",
            "checkpoint/weights.bin",
        ] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let text = fs::read_to_string(a.path().join("metrics.csv")).unwrap();
        assert!(text.starts_with(METRICS_SCHEMA));
        // Steps 0, 2, 4 for three views.
        assert_eq!(text.lines().count(), 2 + 3 * 3);
    }

    #[test]
    fn sweep_keeps_the_lower_training_loss() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(4);
        if let Pipeline::Transformer(x) = &mut cfg.pipeline {
            x.lr_sweep = Some(LrSweep {
                lrs: vec![1e-6, 0.5],
                steps: 2,
            });
        }
        let r = run(&cfg, dir.path()).unwrap();
        let t = r.transformer().unwrap();
        assert_eq!(t.sweep.len(), 2);
        let best = t
            .sweep
            .iter()
            .min_by(|a, b| a.train_loss.total_cmp(&b.train_loss))
            .unwrap();
        assert_eq!(t.selected_lr, best.lr);
    }

    #[test]
    fn failure_moves_outputs_aside() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(2);
        if let Pipeline::Transformer(x) = &mut cfg.pipeline {
            x.train.optimizer = OptimizerConfig::Sgd { lr: 1e200 };
        }
        let err = run(&cfg, dir.path()).unwrap_err();
        assert!(
            matches!(&err, RunError::Stage { stage, .. } if stage == "train"),
            "{err}"
        );
        let e: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(dir.path().join("failed/error.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(e["stage"], "train");
        assert!(dir.path().join("failed/manifest.json").exists());
        assert!(!dir.path().join("manifest.json").exists());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_json("{}").is_err());
        let mut cfg = tiny(2);
        if let Pipeline::Transformer(x) = &mut cfg.pipeline {
            x.laser = Some(LaserConfig {
                matrix: "layer2.ff.u_in".into(),
                rhos: vec![1.5],
            });
        }
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))));
        let text = serde_json::to_string(&tiny(2))
            .unwrap()
            .replace("\"m_test\"", "\"m_tset\"");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut seen = 0;
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.extension().is_some_and(|x| x == "json") {
                ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
                seen += 1;
            }
        }
        assert!(seen >= 8);
    }

    #[test]
    fn assocmem_rank_sweep_writes_long_csv() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            name: "am".into(),
            seed: 0,
            pipeline: Pipeline::Assocmem(AssocExperiment {
                study: AssocStudy::RankSweep,
                n: 3,
                d: 8,
                alpha: 0.1,
                lr: 0.5,
                steps: 200,
                seeds: 2,
                embed: None,
                batch: None,
                grad_tol: None,
                required: Some(0),
            }),
        };
        let r = run(&cfg, dir.path()).unwrap();
        assert!(
            matches!(r.body, ReportBody::Assocmem(AssocReport::RankSweep(ref s)) if s.seeds.len() == 2)
        );
        let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(text.starts_with(RANK_SCHEMA));
        assert!(text.lines().nth(1).unwrap().starts_with("seed,step,rank"));
    }
}
