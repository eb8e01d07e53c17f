//! Empirical checks of the oracles: sampled gradients of the simplified
//! model and sampled token counts, each compared against its prediction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{
    domain, generate_batch, stream_rng, DataError, RecallSampler, TaskKind, TaskSpec, Token,
};
use crate::linalg::{LinalgError, Matrix};
use crate::nets::{EmbedScheme, NetError, SimplifiedWeights};
use crate::oracles::{
    count_moments, count_moments_exact, early_wqk_signs, one_step_attn_margin, one_step_ff_margin,
    one_step_ff_margin_exact, wf_moments, wf_moments_exact, wqk_gap_bound, wqk_projection,
    wv_case_moments, wv_moments_exact, CountCase, CountMoments, CountTable, EarlySigns,
    MarginReport, MomentEntry, WqkProjection, WvCase,
};
use crate::par;
use crate::train::{backward_with, Differentiable, LabelMode, TrainError};

#[derive(Debug, Error)]
pub enum CheckError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid check configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CheckError>;

/// Sequences per gradient block; bounds peak memory of the chunk reduction.
const BLOCK: usize = 4096;

/// Mean gradient over `m` training sequences drawn from the oracle stream.
pub fn mean_gradient<M: Differentiable>(
    model: &M,
    spec: &TaskSpec,
    m: usize,
    seed: u64,
    labels: LabelMode,
) -> Result<Vec<(String, Matrix)>> {
    if m == 0 {
        return Err(CheckError::Invalid("m must be positive".into()));
    }
    let mut total: Option<Vec<(String, Matrix)>> = None;
    let mut start = 0usize;
    while start < m {
        let count = BLOCK.min(m - start);
        let batch = generate_batch(
            spec,
            TaskKind::Recall,
            seed,
            domain::ORACLE,
            start as u64,
            count,
        )?;
        let (g, _) = backward_with(model, &batch, labels)?;
        let w = count as f64 / m as f64;
        match total.as_mut() {
            None => {
                total = Some(
                    g.entries
                        .into_iter()
                        .map(|(n, x)| (n, x.scale(w).expect("finite")))
                        .collect(),
                );
            }
            Some(t) => {
                for ((_, acc), (_, x)) in t.iter_mut().zip(&g.entries) {
                    acc.add_scaled(w, x)?;
                }
            }
        }
        start += count;
    }
    Ok(total.unwrap())
}

fn grad<'a>(g: &'a [(String, Matrix)], name: &str) -> &'a Matrix {
    &g.iter().find(|(n, _)| n == name).expect("known gradient").1
}

/// One compared cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellCheck {
    pub label: String,
    pub mu: f64,
    pub sigma2: f64,
    pub mu_exact: f64,
    pub empirical: f64,
    /// `(x̄ − μ)/√(σ²/m)` against the table.
    pub z: f64,
    /// The same against the exact mean and variance.
    pub z_exact: f64,
    pub pass: bool,
}

impl CellCheck {
    fn new(
        label: String,
        table: MomentEntry,
        exact: MomentEntry,
        empirical: f64,
        m: usize,
        width: f64,
    ) -> Self {
        let z = table.z(empirical, m);
        CellCheck {
            label,
            mu: table.mu,
            sigma2: table.sigma2,
            mu_exact: exact.mu,
            empirical,
            z,
            z_exact: exact.z(empirical, m),
            pass: z.abs() <= width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneStepConfig {
    pub n: usize,
    pub t: usize,
    pub alpha: f64,
    pub m: usize,
    pub seed: u64,
    /// Half-width of the acceptance band in standard errors.
    pub width: f64,
    pub wv_cells: usize,
    pub test_sequences: usize,
}

impl OneStepConfig {
    pub fn new(n: usize, t: usize, alpha: f64, m: usize, seed: u64) -> Self {
        OneStepConfig {
            n,
            t,
            alpha,
            m,
            seed,
            width: 5.0,
            wv_cells: 20,
            test_sequences: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneStepReport {
    pub config: OneStepConfig,
    pub wf: Vec<CellCheck>,
    pub wv: Vec<CellCheck>,
    pub wv_passed: usize,
    pub wv_required: usize,
    pub delta_ff: f64,
    pub delta_attn: f64,
    pub ratio: f64,
    pub predicted_delta_ff: f64,
    pub predicted_delta_ff_exact: f64,
    pub predicted_delta_attn: f64,
    pub wf_noise_pass: bool,
    pub wv_pass: bool,
    pub ratio_pass: bool,
    pub pass: bool,
}

/// `wv_cells` value-gradient cells spread over the ten table classes: every
/// single-cell class once, the rest round-robin over seeded distinct picks.
pub fn stratified_cells(
    q: Token,
    n: usize,
    count: usize,
    seed: u64,
) -> Vec<(WvCase, Token, Token)> {
    use rand::seq::SliceRandom;
    let tau = n;
    let others: Vec<Token> = (0..n).filter(|&k| k != q).collect();
    let mut rng = stream_rng(seed, domain::ORACLE, u64::MAX);
    let mut pools: Vec<(WvCase, Vec<(Token, Token)>)> = WvCase::ALL
        .iter()
        .map(|&c| {
            let mut cells: Vec<(Token, Token)> = match c {
                WvCase::NoiseNoise => vec![(tau, tau)],
                WvCase::NoiseTrigger => vec![(tau, q)],
                WvCase::TriggerNoise => vec![(q, tau)],
                WvCase::TriggerTrigger => vec![(q, q)],
                WvCase::NoiseOther => others.iter().map(|&k| (tau, k)).collect(),
                WvCase::TriggerOther => others.iter().map(|&k| (q, k)).collect(),
                WvCase::OtherNoise => others.iter().map(|&j| (j, tau)).collect(),
                WvCase::OtherTrigger => others.iter().map(|&j| (j, q)).collect(),
                WvCase::OtherSame => others.iter().map(|&j| (j, j)).collect(),
                WvCase::OtherOther => others
                    .iter()
                    .flat_map(|&j| {
                        others
                            .iter()
                            .filter(move |&&k| k != j)
                            .map(move |&k| (j, k))
                    })
                    .collect(),
            };
            cells.shuffle(&mut rng);
            (c, cells)
        })
        .collect();
    let mut out = Vec::with_capacity(count);
    while out.len() < count && pools.iter().any(|(_, p)| !p.is_empty()) {
        for (c, pool) in pools.iter_mut() {
            if out.len() < count {
                if let Some((j, k)) = pool.pop() {
                    out.push((*c, j, k));
                }
            }
        }
    }
    out.sort_by_key(|(c, j, k)| (*c, *j, *k));
    out
}

fn one_step_spec(n: usize, t: usize, alpha: f64) -> Result<TaskSpec> {
    if n < 4 {
        return Err(CheckError::Invalid("N must be at least 4".into()));
    }
    Ok(TaskSpec::uniform(n, vec![0], alpha, t)?)
}

/// Orthonormal simplified model at zero init; `d = 3(N+1)`.
pub fn orthonormal_model(n: usize, seed: u64) -> Result<SimplifiedWeights> {
    Ok(SimplifiedWeights::zero_init(
        n,
        3 * (n + 1),
        EmbedScheme::Orthonormal,
        seed,
    )?)
}

/// One gradient step from zero init: projections against the feed-forward
/// and value tables, then the two logit margins on fresh test sequences.
pub fn one_step_suite(cfg: &OneStepConfig) -> Result<OneStepReport> {
    let (n, t, alpha, m) = (cfg.n, cfg.t, cfg.alpha, cfg.m);
    let spec = one_step_spec(n, t, alpha)?;
    let q = spec.triggers[0];
    let tau = spec.tau();
    let model = orthonormal_model(n, cfg.seed)?;
    let g = mean_gradient(&model, &spec, m, cfg.seed, LabelMode::Sampled)?;
    let (gf, gv) = (grad(&g, "wf"), grad(&g, "wv"));

    let wf: Vec<CellCheck> = (0..=n)
        .map(|k| {
            let emp = gf.bilinear(model.w_u.row(k), model.w_e.row(q));
            let label = if k == tau {
                "wf(tau)".to_string()
            } else {
                format!("wf({k})")
            };
            CellCheck::new(
                label,
                wf_moments(k, n, alpha),
                wf_moments_exact(k, n, alpha),
                emp,
                m,
                cfg.width,
            )
        })
        .collect();

    let counts = CountTable::new(&spec, true)?;
    let wv: Vec<CellCheck> = stratified_cells(q, n, cfg.wv_cells, cfg.seed)
        .into_iter()
        .map(|(case, j, k)| {
            let emp = gv.bilinear(model.w_u.row(j), model.w_e.row(k));
            let label = format!("wv[{}]({j},{k})", case.row());
            CellCheck::new(
                label,
                wv_case_moments(case, n, t, alpha),
                wv_moments_exact(&counts, j, k),
                emp,
                m,
                cfg.width,
            )
        })
        .collect();
    let wv_passed = wv.iter().filter(|c| c.pass).count();
    let wv_required = (wv.len() * 9).div_ceil(10);

    // Equal rates: η_f = η_v = 1.
    let mut stepped = model.clone();
    stepped.wf = gf.scale(-1.0)?;
    stepped.wv = gv.scale(-1.0)?;
    let test = generate_batch(
        &spec,
        TaskKind::Recall,
        cfg.seed,
        domain::EVAL,
        0,
        cfg.test_sequences,
    )?;
    let chunks: Vec<_> = test.chunks(64).collect();
    let reports: Vec<Vec<MarginReport>> = par::map_ordered(chunks.len(), |i| {
        let refs: Vec<&[Token]> = chunks[i].iter().map(|s| s.z.as_slice()).collect();
        let tr = stepped.forward_chunk(&refs).expect("validated tokens");
        let v = n + 1;
        (0..tr.b)
            .map(|b| {
                MarginReport::new(
                    &tr.xi_ff[b * v..(b + 1) * v],
                    &tr.xi_attn[b * v..(b + 1) * v],
                    refs[b],
                    alpha,
                )
            })
            .collect()
    });
    let reports: Vec<MarginReport> = reports.into_iter().flatten().collect();
    let k = reports.len() as f64;
    let delta_ff = reports.iter().map(|r| r.delta_ff).sum::<f64>() / k;
    let delta_attn = reports.iter().map(|r| r.delta_attn).sum::<f64>() / k;
    let qhat = reports.iter().map(|r| r.qhat).sum::<f64>() / k;
    let ratio = delta_ff / delta_attn;

    let wf_noise_pass = wf[tau].pass;
    let wv_pass = wv_passed >= wv_required;
    let ratio_pass = delta_attn > 0.0 && ratio > n as f64 / 2.0;
    Ok(OneStepReport {
        config: cfg.clone(),
        wf,
        wv,
        wv_passed,
        wv_required,
        delta_ff,
        delta_attn,
        ratio,
        predicted_delta_ff: one_step_ff_margin(n, alpha),
        predicted_delta_ff_exact: one_step_ff_margin_exact(n, alpha),
        predicted_delta_attn: one_step_attn_margin(n, alpha, qhat, 1.0),
        wf_noise_pass,
        wv_pass,
        ratio_pass,
        pass: wf_noise_pass && wv_pass && ratio_pass,
    })
}

// ---------------------------------------------------------------------------
// Token-count moments
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountCheck {
    pub case: String,
    pub lemma: CountMoments,
    pub exact: (f64, f64),
    pub empirical: (f64, f64),
    pub rel_first: f64,
    pub rel_second: f64,
    /// Sample variance against `M₂ − M₁²` of the lemma pair.
    pub empirical_variance: f64,
    pub rel_variance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovReport {
    pub n: usize,
    pub t: usize,
    pub alpha: f64,
    pub m: usize,
    pub tolerance: f64,
    pub checks: Vec<CountCheck>,
    pub pass: bool,
}

/// Per-sequence counts of `ks` over `m` chains of length `t` with fixed `ybar`.
fn sample_counts(
    spec: &TaskSpec,
    ybar: Token,
    ks: &[Token],
    t: usize,
    m: usize,
    seed: u64,
    stream: u64,
) -> Vec<(f64, f64)> {
    const PART: usize = 2000;
    let parts = m.div_ceil(PART);
    let sampler = RecallSampler::new(spec).expect("validated spec");
    let sums = par::map_ordered(parts, |p| {
        let mut acc = vec![(0.0, 0.0); ks.len()];
        let lo = p * PART;
        for i in lo..(lo + PART).min(m) {
            let mut rng = stream_rng(seed, domain::ORACLE, (stream << 40) + i as u64);
            let z = sampler.chain(ybar, t, &mut rng);
            for (a, &k) in acc.iter_mut().zip(ks) {
                let c = z.iter().filter(|&&x| x == k).count() as f64;
                a.0 += c;
                a.1 += c * c;
            }
        }
        acc
    });
    let mut tot = vec![(0.0, 0.0); ks.len()];
    for part in sums {
        for (a, b) in tot.iter_mut().zip(part) {
            a.0 += b.0;
            a.1 += b.1;
        }
    }
    tot.into_iter()
        .map(|(s1, s2)| (s1 / m as f64, s2 / m as f64))
        .collect()
}

/// All seven conditioned count cases on `T`-token chains.
pub fn markov_suite(
    n: usize,
    t: usize,
    alpha: f64,
    m: usize,
    seed: u64,
    tolerance: f64,
) -> Result<MarkovReport> {
    if n < 3 || m == 0 {
        return Err(CheckError::Invalid("need N >= 3 and m > 0".into()));
    }
    let spec = TaskSpec::uniform(n, vec![0], alpha, t.max(2))?;
    let q = 0;
    let groups: [(Token, Vec<CountCase>); 2] = [
        (
            q,
            vec![
                CountCase::TargetTriggerCountTrigger,
                CountCase::TargetTriggerCountNoise,
                CountCase::TargetTriggerCountOther,
            ],
        ),
        (
            CountCase::TargetOtherCountTarget.representative(q, n).0,
            vec![
                CountCase::TargetOtherCountTrigger,
                CountCase::TargetOtherCountNoise,
                CountCase::TargetOtherCountTarget,
                CountCase::TargetOtherCountOther,
            ],
        ),
    ];
    let mut checks = Vec::new();
    for (g, (ybar, cases)) in groups.iter().enumerate() {
        let ks: Vec<Token> = cases.iter().map(|c| c.representative(q, n).1).collect();
        let emp = sample_counts(&spec, *ybar, &ks, t, m, seed, g as u64);
        for ((case, &k), e) in cases.iter().zip(&ks).zip(emp) {
            let lemma = count_moments(*case, n, t, alpha);
            let exact = count_moments_exact(&spec, *ybar, k, t, false)?;
            let rel_first = e.0 / lemma.first - 1.0;
            let rel_second = e.1 / lemma.second - 1.0;
            let var = e.1 - e.0 * e.0;
            checks.push(CountCheck {
                case: case.name().to_string(),
                lemma,
                exact,
                empirical: e,
                rel_first,
                rel_second,
                empirical_variance: var,
                rel_variance: var / lemma.variance() - 1.0,
                pass: rel_first.abs() <= tolerance && rel_second.abs() <= tolerance,
            });
        }
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(MarkovReport {
        n,
        t,
        alpha,
        m,
        tolerance,
        checks,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Attention-gradient structure
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WqkConfig {
    pub n: usize,
    pub t: usize,
    pub alpha: f64,
    pub m: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    /// Noise probability of the feed-forward block for the early-phase check.
    pub p_noise: f64,
}

impl WqkConfig {
    pub fn new(n: usize, t: usize, alpha: f64, m: usize, seed: u64) -> Self {
        WqkConfig {
            n,
            t,
            alpha,
            m,
            seed,
            beta1: 2e-3,
            beta2: 1e-3,
            p_noise: alpha / 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WqkRow {
    pub predicted: WqkProjection,
    pub empirical: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignRow {
    pub direction: Token,
    pub predicted_sign: i8,
    pub predicted_magnitude: f64,
    pub empirical: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WqkReport {
    pub config: WqkConfig,
    pub rows: Vec<WqkRow>,
    /// Mean over tokens of `value(b after q)` minus `value(τ after q)`.
    pub gap: f64,
    pub gap_bound: f64,
    /// Every token after `q` beats `τ` after `q`. Reported, not required: the
    /// centring term cancels the leading gap (see `gap`).
    pub ordering_holds: bool,
    pub early: EarlySigns,
    pub early_rows: Vec<SignRow>,
    pub structure_pass: bool,
    pub early_pass: bool,
    pub pass: bool,
}

fn outer_sum(rows: &[(&[f64], &[f64])], d: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(d, d);
    for (u, v) in rows {
        m.add_scaled(1.0, &Matrix::outer(u, v)?)?;
    }
    Ok(m)
}

/// Feed-forward weights whose noise logit alone gives `p(τ) = p`.
fn noise_ff(model: &SimplifiedWeights, q: Token, p: f64) -> Result<Matrix> {
    let n = model.n as f64;
    let logit = (p * n / (1.0 - p)).ln();
    Ok(Matrix::outer(model.w_u.row(model.n), model.w_e.row(q))?.scale(logit)?)
}

/// Population-gradient signs for the attention logits: the four key classes
/// after value learning, and the per-token signs right after the first step.
pub fn wqk_suite(cfg: &WqkConfig) -> Result<WqkReport> {
    let (n, t, alpha) = (cfg.n, cfg.t, cfg.alpha);
    let spec = one_step_spec(n, t, alpha)?;
    let q = spec.triggers[0];
    let tau = spec.tau();
    let base = orthonormal_model(n, cfg.seed)?;
    let d = base.d;
    let labels = LabelMode::Expected { alpha };

    // Later phase: value matrix copies both current and previous tokens.
    let mut model = base.clone();
    let cur: Vec<(&[f64], &[f64])> = (0..n).map(|j| (base.w_u.row(j), base.w_e.row(j))).collect();
    let prev: Vec<(&[f64], &[f64])> = (0..n)
        .map(|j| (base.w_u.row(j), base.w_e_prev.row(j)))
        .collect();
    model.wv = outer_sum(&cur, d)?.scale(cfg.beta1)?;
    model.wv.add_scaled(cfg.beta2, &outer_sum(&prev, d)?)?;
    model.wf = noise_ff(&base, q, alpha)?;
    let g = mean_gradient(&model, &spec, cfg.m, cfg.seed, labels)?;
    let gq = grad(&g, "wqk").scale(-1.0)?;
    let project = |b1: Token, b2: Token| -> f64 {
        let key: Vec<f64> = base
            .w_e
            .row(b1)
            .iter()
            .zip(base.w_e_prev.row(b2))
            .map(|(a, b)| a + b)
            .collect();
        gq.bilinear(base.w_e.row(q), &key)
    };
    let label_tokens: Vec<Token> = (0..n).filter(|&b| b != q).collect();
    let mut rows = Vec::new();
    let mut after_trigger = Vec::new();
    for &b1 in &label_tokens {
        let emp = project(b1, q);
        after_trigger.push(emp);
        rows.push(WqkRow {
            predicted: wqk_projection(b1, q, q, cfg.beta1, cfg.beta2, n, t, alpha),
            empirical: emp,
            pass: emp > 0.0,
        });
    }
    let noise_after = project(tau, q);
    rows.push(WqkRow {
        predicted: wqk_projection(tau, q, q, cfg.beta1, cfg.beta2, n, t, alpha),
        empirical: noise_after,
        pass: noise_after > 0.0,
    });
    let double = project(q, q);
    rows.push(WqkRow {
        predicted: wqk_projection(q, q, q, cfg.beta1, cfg.beta2, n, t, alpha),
        empirical: double,
        pass: double > 0.0,
    });
    let (a, b) = (label_tokens[0], label_tokens[1]);
    for (b1, b2) in [(a, a), (a, b), (tau, a), (q, a), (a, tau)] {
        let emp = project(b1, b2);
        let pred = wqk_projection(b1, b2, q, cfg.beta1, cfg.beta2, n, t, alpha);
        let pass = emp <= pred.value && emp < noise_after;
        rows.push(WqkRow {
            predicted: pred,
            empirical: emp,
            pass,
        });
    }
    let gap = after_trigger.iter().sum::<f64>() / after_trigger.len() as f64 - noise_after;
    let ordering_holds = after_trigger.iter().all(|&x| x > noise_after);
    let structure_pass = rows.iter().all(|r| r.pass);

    // Early phase: only the noise row of the value matrix has moved.
    let early = early_wqk_signs(n, t, alpha, cfg.p_noise);
    let mut model = base.clone();
    let noise_row: Vec<(&[f64], &[f64])> = (0..n)
        .map(|k| (base.w_u.row(tau), base.w_e.row(k)))
        .collect();
    let noise_noise = Matrix::outer(base.w_u.row(tau), base.w_e.row(tau))?.scale(alpha)?;
    model.wv = outer_sum(&noise_row, d)?;
    model.wv.add_scaled(1.0, &noise_noise)?;
    model.wv = model.wv.scale(early.c)?;
    model.wf = noise_ff(&base, q, cfg.p_noise)?;
    let g = mean_gradient(&model, &spec, cfg.m, cfg.seed ^ 0x5EED, labels)?;
    let gq = grad(&g, "wqk").scale(-1.0)?;
    let early_rows: Vec<SignRow> = early
        .entries
        .iter()
        .map(|e| {
            let emp = gq.bilinear(base.w_e.row(q), base.w_e.row(e.direction));
            SignRow {
                direction: e.direction,
                predicted_sign: e.sign,
                predicted_magnitude: e.magnitude,
                empirical: emp,
                pass: emp.signum() as i8 == e.sign,
            }
        })
        .collect();
    let early_pass = early_rows.iter().all(|r| r.pass);
    Ok(WqkReport {
        config: cfg.clone(),
        rows,
        gap,
        gap_bound: wqk_gap_bound(cfg.beta2, n, alpha),
        ordering_holds,
        early,
        early_rows,
        structure_pass,
        early_pass,
        pass: structure_pass && early_pass,
    })
}
