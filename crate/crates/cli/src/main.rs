//! `icl-lab`: data generation, training, truncation, evaluation, probes,
//! theory oracles and the associative-memory model from one binary.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use icl_lab::assocmem::{self, AssocConfig, AssocEmbed, OdeMetric};
use icl_lab::datagen::{
    domain, generate_batch, stream_rng, RecallSampler, TaskKind, TaskSpec, Token,
};
use icl_lab::laser::{apply_laser, LaserTarget};
use icl_lab::metrics::{diagonal_dominance, evaluate, Inspect, ProbeKind};
use icl_lab::montecarlo::{markov_suite, one_step_suite, wqk_suite, OneStepConfig, WqkConfig};
use icl_lab::nets::{load_checkpoint, save_checkpoint};
use icl_lab::runner::{self, ExperimentConfig, Pipeline, Report, ReportBody, RunError};

#[derive(Parser, Debug)]
#[command(
    name = "icl-lab",
    version,
    about = "Noisy in-context recall laboratory"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalOptions,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalOptions {
    /// Master seed; overrides the seed in configs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 = all cores. ICL_LAB_THREADS takes precedence.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory; relative paths in other options resolve against it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    /// Single-threaded run.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample task sequences as JSON lines.
    GenData(GenData),
    /// Train from a config; writes metrics.csv and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Truncate one matrix of a checkpoint.
    Laser {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        matrix: String,
        #[arg(long)]
        rho: f64,
    },
    /// Clean-stream metrics of a checkpoint.
    Eval(EvalArgs),
    /// Bilinear memory grid of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_probe)]
        kind: ProbeKind,
    },
    /// Monte-Carlo checks against the closed-form moments.
    Oracle {
        #[command(subcommand)]
        which: Oracle,
    },
    /// Linear associative memory with a shared noise output.
    Assocmem {
        #[command(subcommand)]
        which: Assoc,
    },
    /// Full pipeline from a config file.
    Run { config: PathBuf },
    /// Summary of a finished run directory.
    Report { dir: PathBuf },
}

#[derive(Args, Debug, Clone)]
struct TaskArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    t: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    triggers: Vec<Token>,
    #[arg(long, value_enum, default_value_t = Kind::Recall)]
    kind: Kind,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Recall,
    Ioi,
    Assoc,
}

#[derive(Args, Debug)]
struct GenData {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Written under `--out`; stdout when absent.
    #[arg(long)]
    file: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    triggers: Vec<Token>,
    #[arg(long, value_enum, default_value_t = Kind::Recall)]
    kind: Kind,
    #[arg(long, default_value_t = 1000)]
    m_test: usize,
}

#[derive(Subcommand, Debug)]
enum Oracle {
    /// One gradient step from zero init, feed-forward against value weights.
    OneStep {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        t: usize,
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
        #[arg(long, default_value_t = 100_000)]
        m: usize,
    },
    /// Token-count moments of the chain.
    Moments {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 512)]
        t: usize,
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
        #[arg(long, default_value_t = 100_000)]
        m: usize,
        #[arg(long, default_value_t = 0.1)]
        tolerance: f64,
    },
    /// Attention-logit gradient signs.
    Wqk {
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        t: usize,
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
        #[arg(long, default_value_t = 20_000)]
        m: usize,
    },
}

#[derive(Args, Debug, Clone)]
struct AssocArgs {
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 100_000)]
    steps: u64,
    #[arg(long, default_value = "ortho")]
    embed: AssocEmbed,
    /// Samples per step; exact population gradient when absent.
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Assoc {
    /// GD trajectory on a log grid as CSV.
    Trajectory(AssocArgs),
    /// Gradient-flow ODE for n = 2 as CSV, both metrics.
    Ode {
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
        #[arg(long, default_value_t = 5000.0)]
        t_end: f64,
    },
    /// Full ODE comparison suite as JSON.
    Suite(AssocArgs),
    /// Per-seed rank comparison as JSON.
    RankSweep {
        #[command(flatten)]
        a: AssocArgs,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 15)]
        required: usize,
    },
}

fn parse_probe(s: &str) -> std::result::Result<ProbeKind, String> {
    s.parse()
        .map_err(|e: icl_lab::metrics::MetricsError| e.to_string())
}

/// Bad input (1) or numerical failure (2).
#[derive(Debug)]
struct Numeric(String);

impl std::fmt::Display for Numeric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numeric {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Numeric>().is_some() {
        return 2;
    }
    if let Some(r) = e.downcast_ref::<RunError>() {
        return if r.is_numeric() { 2 } else { 1 };
    }
    let msg = format!("{e:#}").to_lowercase();
    if ["non-finite", "nonfinite", "diverged", "did not converge"]
        .iter()
        .any(|k| msg.contains(k))
    {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.global.log_level)
        .format_timestamp(None)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let body = serde_json::json!({
                "error": format!("{e:#}"),
                "kind": if code == 2 { "numeric" } else { "input" },
                "exit_code": code,
            });
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}

fn threads(g: &GlobalOptions) -> Result<usize> {
    if g.deterministic {
        return Ok(1);
    }
    match std::env::var("ICL_LAB_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("ICL_LAB_THREADS={v:?}")),
        Err(_) => Ok(g.threads),
    }
}

struct Ctx {
    g: GlobalOptions,
}

impl Ctx {
    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self
            .g
            .out
            .clone()
            .context("--out is required for this command")?;
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    /// Relative paths resolve against `--out` when one is given.
    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.g.out {
            Some(o) if p.is_relative() && !p.exists() => o.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn seed(&self) -> u64 {
        self.g.seed.unwrap_or(0)
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn task_kind(k: Kind) -> Result<TaskKind> {
    match k {
        Kind::Recall => Ok(TaskKind::Recall),
        Kind::Ioi => Ok(TaskKind::Ioi),
        Kind::Assoc => bail!("this command needs a sequence task (recall or ioi)"),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    icl_lab::par::set_threads(threads(&cli.global)?);
    let ctx = Ctx { g: cli.global };
    match cli.cmd {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::Train { config } => {
            let (mut cfg, raw) = ExperimentConfig::load(&ctx.resolve(&config))?;
            if let Some(s) = ctx.g.seed {
                cfg.seed = s;
            }
            match &mut cfg.pipeline {
                Pipeline::Transformer(x) => {
                    x.laser = None;
                    x.attention = None;
                    x.probes.clear();
                    x.variants.clear();
                }
                Pipeline::Assocmem(_) => {
                    bail!("train expects a transformer config; use `run` for assocmem")
                }
            }
            let out = ctx.out_dir()?;
            let report = runner::run_experiment(&cfg, &raw, &out)?;
            print_json(&report)
        }
        Command::Laser {
            checkpoint,
            matrix,
            rho,
        } => {
            let (w, manifest) = load_checkpoint(&ctx.resolve(&checkpoint))?;
            let t = apply_laser(&w, &LaserTarget::new(matrix, rho)?)?;
            let out = ctx.out_dir()?;
            save_checkpoint(&out, &t, manifest.step)?;
            print_json(&serde_json::json!({ "checkpoint": out, "step": manifest.step }))
        }
        Command::Eval(a) => {
            let (w, m) = load_checkpoint(&ctx.resolve(&a.checkpoint))?;
            let spec = TaskSpec::uniform(m.n, a.triggers, a.alpha, m.t)?;
            let r = evaluate(&w, &spec, task_kind(a.kind)?, a.m_test, ctx.seed())?;
            if ctx.g.out.is_some() {
                let path = ctx.out_dir()?.join("eval.json");
                std::fs::write(&path, serde_json::to_string_pretty(&r)? + "\n")?;
            }
            print_json(&r)
        }
        Command::Probe { checkpoint, kind } => {
            let (w, m) = load_checkpoint(&ctx.resolve(&checkpoint))?;
            let grid = w.probe(kind)?;
            if ctx.g.out.is_some() {
                runner::write_grid(
                    &ctx.out_dir()?.join(format!("probes_{}.csv", kind.name())),
                    &grid,
                )?;
            }
            let tau = m.n;
            let rows: Vec<Vec<f64>> = (0..grid.rows()).map(|i| grid.row(i).to_vec()).collect();
            print_json(&serde_json::json!({
                "kind": kind,
                "diagonal_dominance": diagonal_dominance(&grid, (0..grid.rows()).filter(|i| *i != tau)),
                "grid": rows,
            }))
        }
        Command::Oracle { which } => oracle(&ctx, which),
        Command::Assocmem { which } => assoc(&ctx, which),
        Command::Run { config } => {
            let out = ctx.out_dir()?;
            let report = runner::run_config_file(&config, &out, ctx.g.seed)?;
            print_json(&summary(&report))
        }
        Command::Report { dir } => {
            let r = Report::load(&ctx.resolve(&dir))?;
            print_json(&summary(&r))
        }
    }
}

/// The headline numbers of a report.
fn summary(r: &Report) -> serde_json::Value {
    match &r.body {
        ReportBody::Transformer { main, variants } => {
            let line = |t: &runner::TransformerReport| {
                serde_json::json!({
                    "steps": t.steps,
                    "selected_lr": t.selected_lr,
                    "rho": t.final_eval.iter().map(|e| serde_json::json!({
                        "rho": e.rho,
                        "rank": e.rank,
                        "p_correct": e.eval.p_correct,
                        "p_noise": e.eval.p_noise,
                        "accuracy": e.eval.accuracy,
                        "pure_label_loss": e.eval.pure_label_loss,
                    })).collect::<Vec<_>>(),
                    "first_positive_margin_step": t.first_positive_margin_step,
                    "attention": t.attention,
                    "probes": t.probes,
                })
            };
            let v: serde_json::Map<String, serde_json::Value> =
                variants.iter().map(|(k, t)| (k.clone(), line(t))).collect();
            serde_json::json!({ "name": r.name, "main": line(main), "variants": v })
        }
        ReportBody::Assocmem(a) => serde_json::json!({ "name": r.name, "assocmem": a }),
    }
}

fn gen_data(ctx: &Ctx, a: GenData) -> Result<()> {
    let seed = ctx.seed();
    let mut lines = Vec::with_capacity(a.count);
    match a.task.kind {
        Kind::Assoc => {
            for i in 0..a.count as u64 {
                let s = icl_lab::datagen::sample_assoc(
                    a.task.n,
                    a.task.alpha,
                    &mut stream_rng(seed, domain::TRAIN, i),
                );
                lines.push(serde_json::to_string(&s)?);
            }
        }
        Kind::Ioi => {
            let spec = TaskSpec::uniform(a.task.n, a.task.triggers, a.task.alpha, a.task.t)?;
            let sampler = RecallSampler::new(&spec)?;
            for i in 0..a.count as u64 {
                lines.push(serde_json::to_string(&sampler.ioi(&mut stream_rng(
                    seed,
                    domain::TRAIN,
                    i,
                ))?)?);
            }
        }
        Kind::Recall => {
            let spec = TaskSpec::uniform(a.task.n, a.task.triggers, a.task.alpha, a.task.t)?;
            for s in generate_batch(&spec, TaskKind::Recall, seed, domain::TRAIN, 0, a.count)? {
                lines.push(serde_json::to_string(&s)?);
            }
        }
    }
    let text = lines.join("\n") + "\n";
    match a.file {
        Some(f) => {
            let path = if f.is_relative() {
                ctx.out_dir()?.join(f)
            } else {
                f
            };
            std::fs::write(&path, text).with_context(|| path.display().to_string())?;
        }
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn oracle(ctx: &Ctx, which: Oracle) -> Result<()> {
    let seed = ctx.seed();
    match which {
        Oracle::OneStep { n, t, alpha, m } => {
            print_json(&one_step_suite(&OneStepConfig::new(n, t, alpha, m, seed))?)
        }
        Oracle::Moments {
            n,
            t,
            alpha,
            m,
            tolerance,
        } => print_json(&markov_suite(n, t, alpha, m, seed, tolerance)?),
        Oracle::Wqk { n, t, alpha, m } => {
            print_json(&wqk_suite(&WqkConfig::new(n, t, alpha, m, seed))?)
        }
    }
}

fn assoc_cfg(a: &AssocArgs, seed: u64) -> AssocConfig {
    AssocConfig {
        n: a.n,
        d: a.d,
        alpha: a.alpha,
        lr: a.lr,
        steps: a.steps,
        mode: a.embed,
        seed,
        batch: a.batch,
        grad_tol: None,
    }
}

fn assoc(ctx: &Ctx, which: Assoc) -> Result<()> {
    let seed = ctx.seed();
    match which {
        Assoc::Trajectory(a) => {
            let cfg = assoc_cfg(&a, seed);
            let (_, rows) =
                assocmem::run_trajectory(&cfg, &assocmem::log_grid(cfg.steps)).map_err(numeric)?;
            let path = ctx.out_dir()?.join("trajectory.csv");
            assocmem::write_trajectory_csv(&path, &rows)?;
            print_json(&serde_json::json!({ "rows": rows.len(), "file": path }))
        }
        Assoc::Ode { alpha, t_end } => {
            let dir = ctx.out_dir()?;
            let mut f = std::fs::File::create(dir.join("ode.csv"))?;
            writeln!(f, "# schema: icl-lab/assocmem-ode v1")?;
            writeln!(f, "metric,t,a,b")?;
            for (name, metric) in [
                ("coefficient", OdeMetric::Coefficient),
                ("frobenius", OdeMetric::Frobenius),
            ] {
                for p in assocmem::ode_integrate(alpha, t_end, 0.05, metric).map_err(numeric)? {
                    writeln!(f, "{name},{},{},{}", p.t, p.a, p.b)?;
                }
            }
            print_json(&serde_json::json!({
                "asymptote_coefficient": assocmem::ode_asymptote(alpha, OdeMetric::Coefficient),
                "asymptote_frobenius": assocmem::ode_asymptote(alpha, OdeMetric::Frobenius),
            }))
        }
        Assoc::Suite(a) => {
            print_json(&assocmem::ode_suite(a.alpha, a.lr, a.steps, a.d, seed).map_err(numeric)?)
        }
        Assoc::RankSweep { a, seeds, required } => {
            let list: Vec<u64> = (seed..seed + seeds).collect();
            print_json(
                &assocmem::rank_sweep_suite(a.n, a.d, a.alpha, a.lr, a.steps, &list, required)
                    .map_err(numeric)?,
            )
        }
    }
}

fn numeric(e: assocmem::AssocError) -> anyhow::Error {
    match e {
        assocmem::AssocError::Diverged(_)
        | assocmem::AssocError::StepUnderflow { .. }
        | assocmem::AssocError::Linalg(_) => Numeric(e.to_string()).into(),
        other => other.into(),
    }
}
