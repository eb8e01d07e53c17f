//! Noisy linear associative memory `f(i, j; W) = ⟨u_j, W e_i⟩` trained by
//! gradient descent, its rank-k truncations, and the two-token gradient-flow
//! reduction to the `(a, b)` system.
//!
//! Inputs are `0..n`, outputs `0..c` with `c = n + 1`; the common (noise)
//! output is `n`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{domain, sample_assoc, stream_rng};
use crate::linalg::{low_rank, softmax, LinalgError, Matrix};

#[derive(Debug, Error)]
pub enum AssocError {
    #[error("invalid associative memory setup: {0}")]
    Config(String),
    #[error("the two-coefficient decomposition needs n = 2 (got n = {0})")]
    Unsupported(usize),
    #[error("ODE step size fell below {h:e} at t = {t}")]
    StepUnderflow { h: f64, t: f64 },
    #[error("diverged at step {0}")]
    Diverged(u64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, AssocError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AssocEmbed {
    /// Orthonormal `e_i` and `u_j`, zero initial `W`.
    #[default]
    Ortho,
    /// Uniform on the unit sphere, `W` entries `N(0, 1/d)`.
    Random,
}

impl std::str::FromStr for AssocEmbed {
    type Err = AssocError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ortho" => Ok(AssocEmbed::Ortho),
            "random" => Ok(AssocEmbed::Random),
            _ => Err(AssocError::Config(format!(
                "unknown embedding mode '{s}' (ortho, random)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradMode {
    Population,
    /// Empirical gradient over `m` fresh samples from stream `index`.
    Sampled {
        m: usize,
        seed: u64,
        index: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssocMemState {
    pub w: Matrix,
    /// Input embeddings as rows, `n×d`.
    pub e: Matrix,
    /// Output embeddings as rows, `c×d`.
    pub u: Matrix,
    pub alpha: f64,
    pub lr: f64,
    pub step: u64,
}

fn unit_rows<R: Rng>(rng: &mut R, rows: usize, d: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let mut v: Vec<f64> = (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= nrm);
            v
        })
        .collect()
}

fn orthonormal_rows<R: Rng>(rng: &mut R, rows: usize, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut x: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        for _ in 0..2 {
            for b in &basis {
                let p = crate::linalg::dot(&x, b);
                crate::linalg::axpy(-p, b, &mut x);
            }
        }
        let nrm = crate::linalg::dot(&x, &x).sqrt();
        if nrm > 1e-6 {
            x.iter_mut().for_each(|e| *e /= nrm);
            basis.push(x);
        }
    }
    basis
}

impl AssocMemState {
    pub fn new(
        n: usize,
        d: usize,
        alpha: f64,
        lr: f64,
        mode: AssocEmbed,
        seed: u64,
    ) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(AssocError::Config("n and d must be positive".into()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(AssocError::Config(format!(
                "alpha = {alpha} outside [0, 1]"
            )));
        }
        if lr <= 0.0 {
            return Err(AssocError::Config("lr must be positive".into()));
        }
        let c = n + 1;
        let mut rng = stream_rng(seed, domain::EMBED, 0);
        let (e, u, w) = match mode {
            AssocEmbed::Ortho => {
                // Inputs and outputs live in separate orthonormal systems.
                if d < c {
                    return Err(AssocError::Config(format!(
                        "orthonormal embeddings need d >= {c}"
                    )));
                }
                let e = orthonormal_rows(&mut rng, n, d);
                let u = orthonormal_rows(&mut rng, c, d);
                (e, u, Matrix::zeros(d, d))
            }
            AssocEmbed::Random => {
                let e = unit_rows(&mut rng, n, d);
                let u = unit_rows(&mut rng, c, d);
                let mut init = stream_rng(seed, domain::INIT, 0);
                let s = 1.0 / (d as f64).sqrt();
                let w = Matrix::from_fn(d, d, |_, _| s * init.sample::<f64, _>(StandardNormal))?;
                (e, u, w)
            }
        };
        Ok(AssocMemState {
            w,
            e: Matrix::from_rows(&e)?,
            u: Matrix::from_rows(&u)?,
            alpha,
            lr,
            step: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.e.rows()
    }

    pub fn c(&self) -> usize {
        self.u.rows()
    }

    pub fn d(&self) -> usize {
        self.w.rows()
    }

    /// `p_α(j | i)`.
    pub fn target(&self, i: usize, j: usize, alpha: f64) -> f64 {
        let c = self.c();
        (1.0 - alpha) * (j == i) as u8 as f64 + alpha * (j == c - 1) as u8 as f64
    }

    /// Logit table `F[i][j] = u_jᵀ W e_i`.
    pub fn logits_of(&self, w: &Matrix) -> Result<Matrix> {
        Ok(self.e.matmul(&w.transpose())?.matmul(&self.u.transpose())?)
    }

    /// Predicted distribution for input `i`, optionally through `W^{(k)}`.
    pub fn predict(&self, i: usize, rank: Option<usize>) -> Result<Vec<f64>> {
        if i >= self.n() {
            return Err(AssocError::Config(format!(
                "input {i} outside 0..{}",
                self.n()
            )));
        }
        let w = self.truncated(rank)?;
        Ok(softmax(self.logits_of(&w)?.row(i)))
    }

    fn truncated(&self, rank: Option<usize>) -> Result<Matrix> {
        match rank {
            None => Ok(self.w.clone()),
            Some(k) if k == 0 || k > self.d() => Err(AssocError::Config(format!(
                "rank {k} outside 1..={}",
                self.d()
            ))),
            Some(k) => Ok(low_rank(&self.w, k)?),
        }
    }

    /// All predictions `P[i][j]` for a given weight matrix.
    pub fn probs_of(&self, w: &Matrix) -> Result<Vec<Vec<f64>>> {
        let f = self.logits_of(w)?;
        Ok((0..self.n()).map(|i| softmax(f.row(i))).collect())
    }

    /// Population cross-entropy against `p_α` with uniform inputs.
    pub fn loss_of(&self, w: &Matrix, alpha: f64) -> Result<f64> {
        let p = self.probs_of(w)?;
        let n = self.n();
        let mut l = 0.0;
        for (i, row) in p.iter().enumerate() {
            for (j, pj) in row.iter().enumerate() {
                let t = self.target(i, j, alpha);
                if t > 0.0 {
                    l -= t * pj.ln();
                }
            }
        }
        Ok(l / n as f64)
    }

    /// Cross-entropy on clean data, for the full matrix or its rank-k truncation.
    pub fn pure_label_loss(&self, rank: Option<usize>) -> Result<f64> {
        self.loss_of(&self.truncated(rank)?, 0.0)
    }

    /// `Σ_{ij} D_ij u_j e_iᵀ`.
    fn assemble(&self, dmat: &[Vec<f64>]) -> Result<Matrix> {
        let dm = Matrix::from_rows(dmat)?;
        Ok(self
            .u
            .transpose()
            .matmul(&dm.transpose())?
            .matmul(&self.e)?)
    }

    pub fn population_gradient(&self) -> Result<Matrix> {
        let p = self.probs_of(&self.w)?;
        let n = self.n() as f64;
        let dmat: Vec<Vec<f64>> = p
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, pj)| (pj - self.target(i, j, self.alpha)) / n)
                    .collect()
            })
            .collect();
        self.assemble(&dmat)
    }

    pub fn sampled_gradient(&self, m: usize, seed: u64, index: u64) -> Result<Matrix> {
        if m == 0 {
            return Err(AssocError::Config("m must be positive".into()));
        }
        let p = self.probs_of(&self.w)?;
        let (n, c) = (self.n(), self.c());
        let mut counts = vec![vec![0usize; c]; n];
        let mut rng = stream_rng(seed, domain::TRAIN, index);
        for _ in 0..m {
            let s = sample_assoc(n, self.alpha, &mut rng);
            counts[s.x][s.y] += 1;
        }
        let dmat: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let ni: usize = counts[i].iter().sum();
                (0..c)
                    .map(|j| (ni as f64 * p[i][j] - counts[i][j] as f64) / m as f64)
                    .collect()
            })
            .collect();
        self.assemble(&dmat)
    }

    pub fn gradient(&self, mode: GradMode) -> Result<Matrix> {
        match mode {
            GradMode::Population => self.population_gradient(),
            GradMode::Sampled { m, seed, index } => self.sampled_gradient(m, seed, index),
        }
    }

    /// `W ← W − lr·∇L`; returns the gradient's Frobenius norm.
    pub fn gd_step(&mut self, mode: GradMode) -> Result<f64> {
        let g = self.gradient(mode)?;
        self.w
            .add_scaled(-self.lr, &g)
            .map_err(|_| AssocError::Diverged(self.step))?;
        self.step += 1;
        Ok(g.frobenius_norm())
    }

    /// The two rank-one matrices spanning every gradient when `n = 2`:
    /// `(u₁−u₂)(e₁−e₂)ᵀ` and `(u₁+u₂−2u₃)(e₁+e₂)ᵀ`.
    pub fn basis(&self) -> Result<(Matrix, Matrix)> {
        if self.n() != 2 {
            return Err(AssocError::Unsupported(self.n()));
        }
        let (u, e) = (&self.u, &self.e);
        let d = self.d();
        let v1: Vec<f64> = (0..d).map(|k| u.get(0, k) - u.get(1, k)).collect();
        let w1: Vec<f64> = (0..d).map(|k| e.get(0, k) - e.get(1, k)).collect();
        let v2: Vec<f64> = (0..d)
            .map(|k| u.get(0, k) + u.get(1, k) - 2.0 * u.get(2, k))
            .collect();
        let w2: Vec<f64> = (0..d).map(|k| e.get(0, k) + e.get(1, k)).collect();
        Ok((Matrix::outer(&v1, &w1)?, Matrix::outer(&v2, &w2)?))
    }

    pub fn decompose(&self) -> Result<BasisCoeffs> {
        let (b1, b2) = self.basis()?;
        // The two basis matrices are Frobenius-orthogonal, so the least
        // squares fit is two independent projections.
        let beta1 = self.w.frobenius_dot(&b1) / b1.frobenius_dot(&b1);
        let beta2 = self.w.frobenius_dot(&b2) / b2.frobenius_dot(&b2);
        let mut r = self.w.clone();
        r.add_scaled(-beta1, &b1)?;
        r.add_scaled(-beta2, &b2)?;
        Ok(BasisCoeffs::new(beta1, beta2, r.frobenius_norm()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisCoeffs {
    pub beta1: f64,
    pub beta2: f64,
    pub a: f64,
    pub b: f64,
    pub residual: f64,
}

impl BasisCoeffs {
    pub fn new(beta1: f64, beta2: f64, residual: f64) -> Self {
        BasisCoeffs {
            beta1,
            beta2,
            a: -2.0 * beta1,
            b: -beta1 - 3.0 * beta2,
            residual,
        }
    }
}

// ---------------------------------------------------------------------------
// The (a, b) system
// ---------------------------------------------------------------------------

/// Which flow the `(a, b)` equations describe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMetric {
    /// Gradient flow on `(β₁, β₂)` directly, `β̇ = −∂L/∂β`.
    Coefficient,
    /// Gradient flow on `W` itself. The coefficients then move at
    /// `−∂L/∂β_k / ‖B_k‖²_F` with `‖B₁‖² = 4`, `‖B₂‖² = 12`.
    Frobenius,
}

/// `(ȧ, ḃ)`.
pub fn ode_rhs(alpha: f64, metric: OdeMetric, a: f64, b: f64) -> (f64, f64) {
    let (ea, eb) = (a.exp(), b.exp());
    let z = ea + eb + 1.0;
    // β̇ under the coefficient flow.
    let p1 = (ea - 1.0) / z + 1.0 - alpha;
    let p2 = 3.0 * eb / z - 3.0 * alpha;
    let (d1, d2) = match metric {
        OdeMetric::Coefficient => (p1, p2),
        OdeMetric::Frobenius => (p1 / 4.0, p2 / 12.0),
    };
    (-2.0 * d1, -d1 - 3.0 * d2)
}

/// Large-time limits `(a + log t, b)`.
///
/// `b` relaxes at an O(1) rate while `e^a` decays like `1/t`, so `b` tracks
/// the zero of its own right-hand side, which sits `O(e^a)` above
/// `log(α/(1−α))`. Feeding that back into `ȧ` gives `ȧ ≈ −k(1−α)e^a` with
/// `k = 3.6` (coefficient flow) or `k = 0.75` (Frobenius flow).
pub fn ode_asymptote(alpha: f64, metric: OdeMetric) -> (f64, f64) {
    let k = match metric {
        OdeMetric::Coefficient => 3.6,
        OdeMetric::Frobenius => 0.75,
    };
    (-(k * (1.0 - alpha)).ln(), (alpha / (1.0 - alpha)).ln())
}

/// `−log((1−α)(4−2α))`, the coefficient-flow constant obtained when the
/// drift of `b` is ignored.
pub fn frozen_b_a_constant(alpha: f64) -> f64 {
    -((1.0 - alpha) * (4.0 - 2.0 * alpha)).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdePoint {
    pub t: f64,
    pub a: f64,
    pub b: f64,
}

pub const ODE_TOL: f64 = 1e-8;

fn rk4(alpha: f64, metric: OdeMetric, a: f64, b: f64, h: f64) -> (f64, f64) {
    let f = |a, b| ode_rhs(alpha, metric, a, b);
    let k1 = f(a, b);
    let k2 = f(a + 0.5 * h * k1.0, b + 0.5 * h * k1.1);
    let k3 = f(a + 0.5 * h * k2.0, b + 0.5 * h * k2.1);
    let k4 = f(a + h * k3.0, b + h * k3.1);
    (
        a + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        b + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    )
}

/// RK4 with step doubling from `a = b = 0`, reporting the state at each of
/// the sorted `times`. Steps never exceed `dt`; a step whose doubling
/// estimate exceeds [`ODE_TOL`] is rejected and halved.
pub fn ode_integrate_at(
    alpha: f64,
    metric: OdeMetric,
    times: &[f64],
    dt: f64,
) -> Result<Vec<OdePoint>> {
    if !(dt > 0.0) {
        return Err(AssocError::Config("dt must be positive".into()));
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|t| *t < 0.0) {
        return Err(AssocError::Config(
            "times must be sorted and non-negative".into(),
        ));
    }
    let (mut t, mut a, mut b) = (0.0f64, 0.0f64, 0.0f64);
    let mut h = dt;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        while target - t > 1e-12 * target.max(1.0) {
            let step = h.min(target - t);
            let full = rk4(alpha, metric, a, b, step);
            let half = rk4(alpha, metric, a, b, 0.5 * step);
            let two = rk4(alpha, metric, half.0, half.1, 0.5 * step);
            let err = (two.0 - full.0).abs().max((two.1 - full.1).abs()) / 15.0;
            if err > ODE_TOL {
                h = 0.5 * step;
                if h < 1e-12 {
                    return Err(AssocError::StepUnderflow { h, t });
                }
                continue;
            }
            a = two.0 + (two.0 - full.0) / 15.0;
            b = two.1 + (two.1 - full.1) / 15.0;
            t += step;
            if err < ODE_TOL / 64.0 {
                h = (2.0 * h).min(dt);
            }
        }
        out.push(OdePoint { t: target, a, b });
    }
    Ok(out)
}

/// Trajectory on an even grid of at most ~10⁴ points up to `t_end`.
pub fn ode_integrate(alpha: f64, t_end: f64, dt: f64, metric: OdeMetric) -> Result<Vec<OdePoint>> {
    let every = dt.max(t_end / 10_000.0);
    let count = (t_end / every).ceil() as usize;
    let times: Vec<f64> = (0..=count).map(|k| (k as f64 * every).min(t_end)).collect();
    ode_integrate_at(alpha, metric, &times, dt)
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssocConfig {
    pub n: usize,
    pub d: usize,
    pub alpha: f64,
    pub lr: f64,
    pub steps: u64,
    #[serde(default)]
    pub mode: AssocEmbed,
    #[serde(default)]
    pub seed: u64,
    /// Samples per step; population gradient when absent.
    #[serde(default)]
    pub batch: Option<usize>,
    /// Stop early once the gradient norm drops below this.
    #[serde(default)]
    pub grad_tol: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: u64,
    pub loss: f64,
    /// Pure-label loss of `W^{(k)}` for `k = 1..=c`.
    pub loss_pure: Vec<f64>,
    /// Probability of the common output, averaged over inputs, per rank.
    pub p_noise: Vec<f64>,
    pub grad_norm: f64,
    /// Present when `n = 2`.
    pub coeffs: Option<BasisCoeffs>,
}

impl AssocMemState {
    pub fn snapshot(&self, grad_norm: f64) -> Result<TrajectoryRow> {
        let c = self.c();
        let ranks = c.min(self.d());
        let mut loss_pure = Vec::with_capacity(ranks);
        let mut p_noise = Vec::with_capacity(ranks);
        for k in 1..=ranks {
            let wk = low_rank(&self.w, k)?;
            loss_pure.push(self.loss_of(&wk, 0.0)?);
            let p = self.probs_of(&wk)?;
            p_noise.push(p.iter().map(|r| r[c - 1]).sum::<f64>() / self.n() as f64);
        }
        let coeffs = if self.n() == 2 {
            Some(self.decompose()?)
        } else {
            None
        };
        Ok(TrajectoryRow {
            step: self.step,
            loss: self.loss_of(&self.w, self.alpha)?,
            loss_pure,
            p_noise,
            grad_norm,
            coeffs,
        })
    }
}

/// Steps 0, 1, 2, …, 9, 10, 20, …: a 1-2-…-9 grid per decade.
pub fn log_grid(steps: u64) -> Vec<u64> {
    let mut out = vec![0];
    let mut decade = 1u64;
    while decade <= steps {
        for m in 1..10 {
            let s = m * decade;
            if s <= steps {
                out.push(s);
            }
        }
        decade = decade.saturating_mul(10);
    }
    if *out.last().unwrap() != steps {
        out.push(steps);
    }
    out
}

/// Trains the full model and records rows at the given steps.
pub fn run_trajectory(
    cfg: &AssocConfig,
    record: &[u64],
) -> Result<(AssocMemState, Vec<TrajectoryRow>)> {
    let mut s = AssocMemState::new(cfg.n, cfg.d, cfg.alpha, cfg.lr, cfg.mode, cfg.seed)?;
    let mut rows = Vec::new();
    let mut next = record.iter().peekable();
    let mut gnorm = s.population_gradient()?.frobenius_norm();
    loop {
        while next.peek().is_some_and(|r| **r < s.step) {
            next.next();
        }
        if next.peek().is_some_and(|r| **r == s.step) {
            rows.push(s.snapshot(gnorm)?);
            next.next();
        }
        let converged = cfg.grad_tol.is_some_and(|tol| gnorm <= tol);
        if s.step >= cfg.steps || converged {
            if rows.last().map(|r| r.step) != Some(s.step) {
                rows.push(s.snapshot(gnorm)?);
            }
            break;
        }
        let mode = match cfg.batch {
            None => GradMode::Population,
            Some(m) => GradMode::Sampled {
                m,
                seed: cfg.seed,
                index: s.step,
            },
        };
        gnorm = s.gd_step(mode)?;
        if !s.w.as_slice().iter().all(|x| x.is_finite()) {
            return Err(AssocError::Diverged(s.step));
        }
    }
    Ok((s, rows))
}

pub const TRAJECTORY_SCHEMA: &str = "# schema: icl-lab/assocmem-trajectory v1";

pub fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let io = |e: std::io::Error| AssocError::Io(format!("{}: {e}", path.display()));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "{TRAJECTORY_SCHEMA}").map_err(io)?;
    let ranks = rows.first().map_or(0, |r| r.loss_pure.len());
    let mut w = csv::Writer::from_writer(f);
    let mut header = vec!["step".to_string(), "loss".into()];
    header.extend((1..=ranks).map(|k| format!("loss_pure_k{k}")));
    header.extend((1..=ranks).map(|k| format!("p_noise_k{k}")));
    header.extend(["grad_norm", "beta1", "beta2", "a", "b", "residual"].map(String::from));
    let csv_err = |e: csv::Error| AssocError::Io(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.loss.to_string()];
        rec.extend(r.loss_pure.iter().map(|x| x.to_string()));
        rec.extend(r.p_noise.iter().map(|x| x.to_string()));
        rec.push(r.grad_norm.to_string());
        match r.coeffs {
            Some(c) => rec.extend([c.beta1, c.beta2, c.a, c.b, c.residual].map(|x| x.to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), 5)),
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| AssocError::Io(e.to_string()))?;
    Ok(())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OdeSuiteReport {
    pub alpha: f64,
    pub lr: f64,
    pub steps: u64,
    pub max_residual: f64,
    pub p_noise_full: f64,
    pub p_correct_full: f64,
    pub rank1_slope: f64,
    /// Largest `|GD − ODE| / |ODE|` over `a` and `b`, both flows.
    pub gd_vs_frobenius: f64,
    pub gd_vs_coefficient: f64,
    pub b_final: f64,
    pub b_limit: f64,
    /// `b` from the coefficient ODE at the same horizon.
    pub b_ode: f64,
    pub residual_pass: bool,
    pub full_pass: bool,
    pub slope_pass: bool,
    pub ode_pass: bool,
    pub asymptote_pass: bool,
    pub pass: bool,
}

/// Two inputs, orthonormal embeddings, zero init, population GD.
pub fn ode_suite(alpha: f64, lr: f64, steps: u64, d: usize, seed: u64) -> Result<OdeSuiteReport> {
    let cfg = AssocConfig {
        n: 2,
        d,
        alpha,
        lr,
        steps,
        mode: AssocEmbed::Ortho,
        seed,
        batch: None,
        grad_tol: None,
    };
    let mut s = AssocMemState::new(cfg.n, cfg.d, alpha, lr, cfg.mode, seed)?;
    let grid = log_grid(steps);
    let mut max_residual = 0.0f64;
    let mut gd: Vec<(u64, BasisCoeffs)> = Vec::new();
    let mut rank1: Vec<(f64, f64)> = Vec::new();
    let mut gi = 0;
    while s.step <= steps {
        let c = s.decompose()?;
        max_residual = max_residual.max(c.residual);
        if gi < grid.len() && grid[gi] == s.step {
            gd.push((s.step, c));
            if s.step * 10 >= steps && s.step > 0 {
                let p = s.probs_of(&low_rank(&s.w, 1)?)?;
                rank1.push((s.step as f64, 0.5 * (p[0][2] + p[1][2])));
            }
            gi += 1;
        }
        if s.step == steps {
            break;
        }
        s.gd_step(GradMode::Population)?;
    }
    let p = s.probs_of(&s.w)?;
    let p_noise_full = 0.5 * (p[0][2] + p[1][2]);
    let p_correct_full = 0.5 * (p[0][0] + p[1][1]);
    let times: Vec<f64> = gd.iter().map(|(k, _)| *k as f64 * lr).collect();
    let frob = ode_integrate_at(alpha, OdeMetric::Frobenius, &times, 1e-2)?;
    let coef = ode_integrate_at(alpha, OdeMetric::Coefficient, &times, 1e-2)?;
    let rel = |x: f64, y: f64| {
        if y == 0.0 {
            (x - y).abs()
        } else {
            (x - y).abs() / y.abs()
        }
    };
    let worst = |ode: &[OdePoint]| {
        gd.iter()
            .zip(ode)
            .skip(1)
            .map(|((_, c), o)| rel(c.a, o.a).max(rel(c.b, o.b)))
            .fold(0.0f64, f64::max)
    };
    let gd_vs_frobenius = worst(&frob);
    let gd_vs_coefficient = worst(&coef);
    let rank1_slope = loglog_slope(&rank1);
    let b_final = gd.last().map_or(f64::NAN, |(_, c)| c.b);
    let b_limit = ode_asymptote(alpha, OdeMetric::Frobenius).1;
    let b_ode = coef.last().map_or(f64::NAN, |o| o.b);
    let residual_pass = max_residual <= 1e-8;
    let full_pass =
        (p_noise_full - alpha).abs() <= 0.02 && (p_correct_full - (1.0 - alpha)).abs() <= 0.02;
    let slope_pass = (-0.6..=-0.4).contains(&rank1_slope);
    let ode_pass = gd_vs_frobenius <= 0.02;
    let asymptote_pass = (b_final - b_limit).abs() <= 0.05;
    Ok(OdeSuiteReport {
        alpha,
        lr,
        steps,
        max_residual,
        p_noise_full,
        p_correct_full,
        rank1_slope,
        gd_vs_frobenius,
        gd_vs_coefficient,
        b_final,
        b_limit,
        b_ode,
        residual_pass,
        full_pass,
        slope_pass,
        ode_pass,
        asymptote_pass,
        pass: residual_pass && full_pass && slope_pass && ode_pass && asymptote_pass,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankSeed {
    pub seed: u64,
    pub steps: u64,
    pub grad_norm: f64,
    /// Pure-label loss per rank `k = 1..=c`; the last entry is the full model.
    pub loss_pure: Vec<f64>,
    pub rank2_below_full: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankSweepReport {
    pub n: usize,
    pub d: usize,
    pub alpha: f64,
    pub lr: f64,
    pub seeds: Vec<RankSeed>,
    pub wins: usize,
    pub required: usize,
    pub pass: bool,
}

/// Trains the full model per seed to convergence and compares the clean
/// loss of its rank-`(c−2)`… truncations; `wins` counts seeds where rank
/// `n−1` beats the full model.
pub fn rank_sweep_suite(
    n: usize,
    d: usize,
    alpha: f64,
    lr: f64,
    max_steps: u64,
    seeds: &[u64],
    required: usize,
) -> Result<RankSweepReport> {
    let runs = crate::par::map_ordered(seeds.len(), |i| -> Result<RankSeed> {
        let cfg = AssocConfig {
            n,
            d,
            alpha,
            lr,
            steps: max_steps,
            mode: AssocEmbed::Random,
            seed: seeds[i],
            batch: None,
            grad_tol: Some(1e-6),
        };
        let (s, _) = run_trajectory(&cfg, &[])?;
        let row = s.snapshot(s.population_gradient()?.frobenius_norm())?;
        let full = s.pure_label_loss(None)?;
        let low = row.loss_pure[n - 2];
        Ok(RankSeed {
            seed: seeds[i],
            steps: s.step,
            grad_norm: row.grad_norm,
            loss_pure: row.loss_pure,
            rank2_below_full: low < full,
        })
    });
    let seeds = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let wins = seeds.iter().filter(|s| s.rank2_below_full).count();
    Ok(RankSweepReport {
        n,
        d,
        alpha,
        lr,
        wins,
        required,
        pass: wins >= required,
        seeds,
    })
}
