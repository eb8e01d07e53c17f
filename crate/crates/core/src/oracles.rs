//! Closed-form predictions for the one-step gradients, the token-count
//! moments of the recall chain, the attention-gradient projections and the
//! logit margins.
//!
//! Table values are the displayed leading-order terms. The `_exact`
//! variants keep every term for the finite `N`, `T` actually simulated.

use serde::{Deserialize, Serialize};

use crate::datagen::{DataError, TaskSpec, Token, TokenDist};

/// Mean, variance and deviation range of one gradient projection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub mu: f64,
    pub sigma2: f64,
    pub range: f64,
}

impl MomentEntry {
    pub fn new(mu: f64, sigma2: f64, range: f64) -> Self {
        MomentEntry {
            mu,
            sigma2: sigma2.max(0.0),
            range: range.abs(),
        }
    }

    /// Standard error of an `m`-sample mean.
    pub fn stderr(&self, m: usize) -> f64 {
        (self.sigma2 / m as f64).sqrt()
    }

    /// `(x̄ − μ) / √(σ²/m)`.
    pub fn z(&self, mean: f64, m: usize) -> f64 {
        (mean - self.mu) / self.stderr(m)
    }

    /// Bernstein half-width `√(4σ²·ln(2/δ)/m) + 4R·ln(2/δ)/m`.
    pub fn bernstein(&self, m: usize, delta: f64) -> f64 {
        let l = (2.0 / delta).ln();
        let m = m as f64;
        (4.0 * self.sigma2 * l / m).sqrt() + 4.0 * self.range * l / m
    }
}

fn noise(n: usize) -> Token {
    n
}

// ---------------------------------------------------------------------------
// Feed-forward gradient at zero init
// ---------------------------------------------------------------------------

/// `W_U(k)ᵀ ∇W_F W_E(q)` table row.
pub fn wf_moments(k: Token, n: usize, alpha: f64) -> MomentEntry {
    let nf = n as f64;
    if k == noise(n) {
        MomentEntry::new(-alpha, alpha * (1.0 - alpha), alpha.max(1.0 - alpha))
    } else {
        MomentEntry::new(
            1.0 / (nf + 1.0) - (1.0 - alpha) / nf,
            (1.0 - alpha) / nf,
            1.0,
        )
    }
}

/// Same projection with the uniform-prediction offset `1/(N+1)` kept in the
/// noise row and the exact Bernoulli variance.
pub fn wf_moments_exact(k: Token, n: usize, alpha: f64) -> MomentEntry {
    let nf = n as f64;
    let p = if k == noise(n) {
        alpha
    } else {
        (1.0 - alpha) / nf
    };
    let range = if k == noise(n) {
        alpha.max(1.0 - alpha)
    } else {
        1.0
    };
    MomentEntry::new(1.0 / (nf + 1.0) - p, p * (1.0 - p), range)
}

/// One sample of the feed-forward projection: `1/(N+1) − 1{y=k}`.
pub fn wf_sample(y: Token, k: Token, n: usize) -> f64 {
    1.0 / (n as f64 + 1.0) - if y == k { 1.0 } else { 0.0 }
}

// ---------------------------------------------------------------------------
// Value gradient at zero init
// ---------------------------------------------------------------------------

/// The ten `(j, k)` classes of the value-gradient table, for one trigger `q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WvCase {
    NoiseNoise,
    NoiseTrigger,
    NoiseOther,
    TriggerNoise,
    TriggerTrigger,
    TriggerOther,
    OtherNoise,
    OtherTrigger,
    OtherSame,
    OtherOther,
}

impl WvCase {
    pub const ALL: [WvCase; 10] = [
        WvCase::NoiseNoise,
        WvCase::NoiseTrigger,
        WvCase::NoiseOther,
        WvCase::TriggerNoise,
        WvCase::TriggerTrigger,
        WvCase::TriggerOther,
        WvCase::OtherNoise,
        WvCase::OtherTrigger,
        WvCase::OtherSame,
        WvCase::OtherOther,
    ];

    pub fn classify(j: Token, k: Token, q: Token, n: usize) -> WvCase {
        let tau = noise(n);
        match (j, k) {
            (j, k) if j == tau && k == tau => WvCase::NoiseNoise,
            (j, k) if j == tau && k == q => WvCase::NoiseTrigger,
            (j, _) if j == tau => WvCase::NoiseOther,
            (j, k) if j == q && k == tau => WvCase::TriggerNoise,
            (j, k) if j == q && k == q => WvCase::TriggerTrigger,
            (j, _) if j == q => WvCase::TriggerOther,
            (_, k) if k == tau => WvCase::OtherNoise,
            (_, k) if k == q => WvCase::OtherTrigger,
            (j, k) if j == k => WvCase::OtherSame,
            _ => WvCase::OtherOther,
        }
    }

    /// Table row, 1-based.
    pub fn row(&self) -> usize {
        WvCase::ALL.iter().position(|c| c == self).unwrap() + 1
    }

    /// A representative `(j, k)` for trigger `q`; `N ≥ 4` keeps them distinct.
    pub fn representative(&self, q: Token, n: usize) -> (Token, Token) {
        let tau = noise(n);
        let a = (q + 1) % n;
        let b = (q + 2) % n;
        match self {
            WvCase::NoiseNoise => (tau, tau),
            WvCase::NoiseTrigger => (tau, q),
            WvCase::NoiseOther => (tau, a),
            WvCase::TriggerNoise => (q, tau),
            WvCase::TriggerTrigger => (q, q),
            WvCase::TriggerOther => (q, a),
            WvCase::OtherNoise => (a, tau),
            WvCase::OtherTrigger => (a, q),
            WvCase::OtherSame => (a, a),
            WvCase::OtherOther => (a, b),
        }
    }
}

/// Value-gradient table row for a case.
pub fn wv_case_moments(case: WvCase, n: usize, t: usize, alpha: f64) -> MomentEntry {
    let (nf, tf, a) = (n as f64, t as f64, alpha);
    let (n2, n3) = (nf * nf, nf * nf * nf);
    match case {
        WvCase::NoiseNoise => MomentEntry::new(
            -a * a / nf,
            a * a / (tf * nf) + (a.powi(3) - a.powi(4)) / n2,
            0.5,
        ),
        WvCase::NoiseTrigger | WvCase::NoiseOther => {
            MomentEntry::new(-a / nf, a / (tf * nf) + (a - a * a) / n2, 1.0)
        }
        WvCase::TriggerNoise => MomentEntry::new(
            (2.0 * a - 1.0) / n2,
            1.0 / (tf * n2) + (a * a - a + 1.0) / n3,
            0.5,
        ),
        WvCase::TriggerTrigger => MomentEntry::new(
            (2.0 * a - 1.0) / (a * n2),
            (a.powi(3) - a * a - a + 2.0) / (a.powi(3) * tf * n2)
                + (a * a - a + 1.0) / (a * a * n3),
            1.0,
        ),
        WvCase::TriggerOther | WvCase::OtherOther => {
            MomentEntry::new(a / n2, (2.0 - a) * (1.0 / (tf * n2) + 1.0 / n3), 1.0)
        }
        WvCase::OtherNoise => MomentEntry::new(
            a * a / n2,
            (2.0 - a) * (a / (tf * n2) + a * a / n3),
            1.0 / 3.0,
        ),
        WvCase::OtherTrigger => {
            MomentEntry::new(a / n2, (2.0 - a) * (1.0 / (tf * n2) + 1.0 / n3), 0.5)
        }
        WvCase::OtherSame => MomentEntry::new(
            (-a * a + 3.0 * a - 1.0) / n2,
            (1.0 + (1.0 - a) * (2.0 - a)) / (tf * n2) + (1.0 + (1.0 - a) * (2.0 - a).powi(2)) / n3,
            1.0,
        ),
    }
}

/// `W_U(j)ᵀ ∇W_V W_E(k)` table row.
pub fn wv_moments(j: Token, k: Token, q: Token, n: usize, t: usize, alpha: f64) -> MomentEntry {
    wv_case_moments(WvCase::classify(j, k, q, n), n, t, alpha)
}

/// One sample of the value projection: `(1/(N+1) − 1{y=j})·#k/T`.
pub fn wv_sample(z: &[Token], y: Token, j: Token, k: Token, n: usize) -> f64 {
    let count = z.iter().filter(|&&x| x == k).count() as f64;
    wf_sample(y, j, n) * count / z.len() as f64
}

// ---------------------------------------------------------------------------
// Token counts along the recall chain
// ---------------------------------------------------------------------------

/// The seven `(ȳ, k)` conditionings of the count lemmas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountCase {
    /// `ȳ = q, k = q`
    TargetTriggerCountTrigger,
    /// `ȳ = q, k = τ`
    TargetTriggerCountNoise,
    /// `ȳ = q, k ∉ {q, τ}`
    TargetTriggerCountOther,
    /// `ȳ ≠ q, k = q`
    TargetOtherCountTrigger,
    /// `ȳ ≠ q, k = τ`
    TargetOtherCountNoise,
    /// `ȳ ≠ q, k = ȳ`
    TargetOtherCountTarget,
    /// `ȳ ≠ q, k ∉ {q, ȳ, τ}`
    TargetOtherCountOther,
}

impl CountCase {
    pub const ALL: [CountCase; 7] = [
        CountCase::TargetTriggerCountTrigger,
        CountCase::TargetTriggerCountNoise,
        CountCase::TargetTriggerCountOther,
        CountCase::TargetOtherCountTrigger,
        CountCase::TargetOtherCountNoise,
        CountCase::TargetOtherCountTarget,
        CountCase::TargetOtherCountOther,
    ];

    pub fn classify(ybar: Token, k: Token, q: Token, n: usize) -> CountCase {
        let tau = noise(n);
        if ybar == q {
            match k {
                k if k == q => CountCase::TargetTriggerCountTrigger,
                k if k == tau => CountCase::TargetTriggerCountNoise,
                _ => CountCase::TargetTriggerCountOther,
            }
        } else {
            match k {
                k if k == q => CountCase::TargetOtherCountTrigger,
                k if k == tau => CountCase::TargetOtherCountNoise,
                k if k == ybar => CountCase::TargetOtherCountTarget,
                _ => CountCase::TargetOtherCountOther,
            }
        }
    }

    /// A concrete `(ȳ, k)` realising the case; needs `N ≥ 3`.
    pub fn representative(&self, q: Token, n: usize) -> (Token, Token) {
        let tau = noise(n);
        let a = (q + 1) % n;
        let b = (q + 2) % n;
        match self {
            CountCase::TargetTriggerCountTrigger => (q, q),
            CountCase::TargetTriggerCountNoise => (q, tau),
            CountCase::TargetTriggerCountOther => (q, a),
            CountCase::TargetOtherCountTrigger => (a, q),
            CountCase::TargetOtherCountNoise => (a, tau),
            CountCase::TargetOtherCountTarget => (a, a),
            CountCase::TargetOtherCountOther => (a, b),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CountCase::TargetTriggerCountTrigger => "ybar=q,k=q",
            CountCase::TargetTriggerCountNoise => "ybar=q,k=tau",
            CountCase::TargetTriggerCountOther => "ybar=q,k=other",
            CountCase::TargetOtherCountTrigger => "ybar!=q,k=q",
            CountCase::TargetOtherCountNoise => "ybar!=q,k=tau",
            CountCase::TargetOtherCountTarget => "ybar!=q,k=ybar",
            CountCase::TargetOtherCountOther => "ybar!=q,k=other",
        }
    }
}

/// First and second moment of a token count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountMoments {
    pub first: f64,
    pub second: f64,
    /// False when `N < 16` or `T < 4N`, where the asymptotic forms are loose.
    pub asymptotic_regime: bool,
}

impl CountMoments {
    pub fn variance(&self) -> f64 {
        self.second - self.first * self.first
    }
}

/// The lemma pair for `#{t ≤ T : z_t = k}` over a `T`-token chain.
pub fn count_moments(case: CountCase, n: usize, t: usize, alpha: f64) -> CountMoments {
    let (nf, tf, a) = (n as f64, t as f64, alpha);
    let r = tf / nf;
    let (first, second) = match case {
        CountCase::TargetTriggerCountTrigger => {
            let m = r / a;
            (m, m * (-1.0 + 2.0 / (a * a)) + m * m)
        }
        CountCase::TargetTriggerCountNoise
        | CountCase::TargetTriggerCountOther
        | CountCase::TargetOtherCountTrigger
        | CountCase::TargetOtherCountOther => (r, r + r * r),
        CountCase::TargetOtherCountNoise => (a * r, a * r + a * a * r * r),
        CountCase::TargetOtherCountTarget => {
            ((2.0 - a) * r, (2.0 - a) * r + (2.0 - a).powi(2) * r * r)
        }
    };
    CountMoments {
        first,
        second,
        asymptotic_regime: n >= 16 && t >= 4 * n,
    }
}

/// Exact `(E[X], E[X²])` for `X = #{t ≤ len : z_t = k}` given `ȳ`, by a
/// forward recursion over the token chain of `spec`. With `forced_last` the
/// chain covers `len − 1` positions and position `len` holds a trigger, as in
/// training sequences.
pub fn count_moments_exact(
    spec: &TaskSpec,
    ybar: Token,
    k: Token,
    len: usize,
    forced_last: bool,
) -> Result<(f64, f64), DataError> {
    spec.validate()?;
    let v = spec.vocab();
    if ybar >= spec.n || k >= v {
        return Err(DataError::InvalidSpec(format!(
            "token out of range: ybar={ybar}, k={k}"
        )));
    }
    let (pi_u, pi_b): (Vec<f64>, Option<&Vec<Vec<f64>>>) = match &spec.dist {
        TokenDist::Uniform => (vec![1.0 / spec.n as f64; spec.n], None),
        TokenDist::Estimated { pi_u, pi_b } => (pi_u.clone(), Some(pi_b)),
    };
    let row = |c: Token| -> Vec<f64> {
        let mut r = vec![0.0; v];
        if spec.is_trigger(c) {
            r[spec.tau()] += spec.alpha;
            r[ybar] += 1.0 - spec.alpha;
        } else if c == spec.tau() || pi_b.is_none() {
            r[..spec.n].copy_from_slice(&pi_u);
        } else {
            r[..spec.n].copy_from_slice(&pi_b.unwrap()[c]);
        }
        r
    };
    let trans: Vec<Vec<f64>> = (0..v).map(row).collect();
    let chain_len = if forced_last {
        len.saturating_sub(1)
    } else {
        len
    };
    // p[c] = P(z_t = c), e1[c] = E[X_t 1{z_t=c}], e2[c] = E[X_t² 1{z_t=c}].
    let mut p = vec![0.0; v];
    p[..spec.n].copy_from_slice(&pi_u);
    let mut e1 = vec![0.0; v];
    let mut e2 = vec![0.0; v];
    if chain_len > 0 {
        e1[k] = p[k];
        e2[k] = p[k];
    }
    for _ in 1..chain_len {
        let mut np = vec![0.0; v];
        let mut n1 = vec![0.0; v];
        let mut n2 = vec![0.0; v];
        for c in 0..v {
            if p[c] == 0.0 && e1[c] == 0.0 {
                continue;
            }
            for (c2, &w) in trans[c].iter().enumerate() {
                if w != 0.0 {
                    np[c2] += p[c] * w;
                    n1[c2] += e1[c] * w;
                    n2[c2] += e2[c] * w;
                }
            }
        }
        // Landing on k adds one: (X+1)² = X² + 2X + 1.
        n2[k] += 2.0 * n1[k] + np[k];
        n1[k] += np[k];
        p = np;
        e1 = n1;
        e2 = n2;
    }
    let (mut m1, mut m2) = if chain_len > 0 {
        (e1.iter().sum::<f64>(), e2.iter().sum::<f64>())
    } else {
        (0.0, 0.0)
    };
    if forced_last && len > 0 {
        let hit = if spec.is_trigger(k) {
            1.0 / spec.triggers.len() as f64
        } else {
            0.0
        };
        m2 += 2.0 * m1 * hit + hit;
        m1 += hit;
    }
    Ok((m1, m2))
}

/// Exact count moments for every case under the uniform single-trigger
/// process, on training sequences (final trigger included).
#[derive(Clone, Debug)]
pub struct CountTable {
    pub n: usize,
    pub t: usize,
    pub alpha: f64,
    pub q: Token,
    entries: Vec<(CountCase, (f64, f64))>,
}

impl CountTable {
    pub fn new(spec: &TaskSpec, forced_last: bool) -> Result<Self, DataError> {
        if spec.triggers.len() != 1 || spec.dist != TokenDist::Uniform || spec.n < 3 {
            return Err(DataError::InvalidSpec(
                "count table needs one trigger, uniform tokens and N >= 3".into(),
            ));
        }
        let q = spec.triggers[0];
        let entries = CountCase::ALL
            .iter()
            .map(|&c| {
                let (ybar, k) = c.representative(q, spec.n);
                count_moments_exact(spec, ybar, k, spec.t, forced_last).map(|m| (c, m))
            })
            .collect::<Result<_, _>>()?;
        Ok(CountTable {
            n: spec.n,
            t: spec.t,
            alpha: spec.alpha,
            q,
            entries,
        })
    }

    pub fn get(&self, case: CountCase) -> (f64, f64) {
        self.entries.iter().find(|(c, _)| *c == case).unwrap().1
    }

    pub fn given(&self, ybar: Token, k: Token) -> (f64, f64) {
        self.get(CountCase::classify(ybar, k, self.q, self.n))
    }
}

/// Exact mean and variance of the value projection at zero init, averaging
/// over `ȳ` uniform on `[N]`. The range is the table's.
pub fn wv_moments_exact(counts: &CountTable, j: Token, k: Token) -> MomentEntry {
    let (n, t, alpha) = (counts.n, counts.t as f64, counts.alpha);
    let a = 1.0 / (n as f64 + 1.0);
    let (mut e1, mut e2) = (0.0, 0.0);
    for ybar in 0..n {
        let p = if j == noise(n) {
            alpha
        } else if j == ybar {
            1.0 - alpha
        } else {
            0.0
        };
        let (c1, c2) = counts.given(ybar, k);
        e1 += (a - p) * c1 / t;
        e2 += (a * a - 2.0 * a * p + p) * c2 / (t * t);
    }
    e1 /= n as f64;
    e2 /= n as f64;
    let table = wv_moments(j, k, counts.q, n, counts.t, alpha);
    MomentEntry::new(e1, e2 - e1 * e1, table.range)
}

// ---------------------------------------------------------------------------
// Margins
// ---------------------------------------------------------------------------

/// `ξ_τ − max_{j<N} ξ_j`, with the noise logit last.
pub fn margin(logits: &[f64]) -> f64 {
    let (last, rest) = logits.split_last().expect("non-empty logits");
    last - rest.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Feed-forward margin after one step at `η_f = 1`, composed from the table:
/// `ξ_τ = −μ(τ)`, `ξ_j = −μ(j)`.
pub fn one_step_ff_margin(n: usize, alpha: f64) -> f64 {
    -wf_moments(noise(n), n, alpha).mu + wf_moments(0, n, alpha).mu
}

/// The same composition from the exact means: `α − (1−α)/N`.
pub fn one_step_ff_margin_exact(n: usize, alpha: f64) -> f64 {
    -wf_moments_exact(noise(n), n, alpha).mu + wf_moments_exact(0, n, alpha).mu
}

/// `α̂ = α²q̂ + α(1−q̂)`.
pub fn alpha_hat(alpha: f64, qhat: f64) -> f64 {
    alpha * alpha * qhat + alpha * (1.0 - qhat)
}

/// Predicted attention margin `η_v·α̂/N` on a test sequence with noise
/// fraction `q̂`.
pub fn one_step_attn_margin(n: usize, alpha: f64, qhat: f64, eta_v: f64) -> f64 {
    eta_v * alpha_hat(alpha, qhat) / n as f64
}

/// Fraction of noise tokens in `z`.
pub fn noise_fraction(z: &[Token], n: usize) -> f64 {
    z.iter().filter(|&&x| x == noise(n)).count() as f64 / z.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub delta_ff: f64,
    pub delta_attn: f64,
    pub qhat: f64,
    pub alpha_hat: f64,
}

impl MarginReport {
    pub fn new(xi_ff: &[f64], xi_attn: &[f64], z: &[Token], alpha: f64) -> Self {
        let n = xi_ff.len() - 1;
        let qhat = noise_fraction(z, n);
        MarginReport {
            delta_ff: margin(xi_ff),
            delta_attn: margin(xi_attn),
            qhat,
            alpha_hat: alpha_hat(alpha, qhat),
        }
    }
}

// ---------------------------------------------------------------------------
// Attention-gradient projections
// ---------------------------------------------------------------------------

/// Largest noise level for which the value gradient keeps the sign needed by
/// the attention analysis: `1.5 − √5/2`.
pub fn wqk_alpha_max() -> f64 {
    1.5 - 5f64.sqrt() / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WqkCase {
    /// `b₂ = q`, `b₁ ≤ N`, `b₁ ≠ q`.
    TokenAfterTrigger,
    /// `b₁ = b₂ = q`.
    TriggerAfterTrigger,
    /// `b₁ = τ`, `b₂ = q`.
    NoiseAfterTrigger,
    /// `b₂ ≠ q`.
    NotAfterTrigger,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Equal,
    Lower,
    Upper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WqkProjection {
    pub b1: Token,
    pub b2: Token,
    pub case: WqkCase,
    /// `W_E(q)ᵀ(−∇W_QK L)(W_E(b₁) + W̃_E(b₂))`, or the bound on it.
    pub value: f64,
    pub bound: BoundKind,
    pub beta1: f64,
    pub beta2: f64,
    pub warning: Option<String>,
}

/// Predicted query-`q` projection of the negative attention gradient for a
/// key whose current token is `b1` and previous token is `b2`.
#[allow(clippy::too_many_arguments)]
pub fn wqk_projection(
    b1: Token,
    b2: Token,
    q: Token,
    beta1: f64,
    beta2: f64,
    n: usize,
    t: usize,
    alpha: f64,
) -> WqkProjection {
    let nf = n as f64;
    let s = (1.0 - alpha).powi(2);
    let (case, value, bound) = if b2 != q {
        (
            WqkCase::NotAfterTrigger,
            s * (beta1 + 2.0 * beta2) / (nf * nf),
            BoundKind::Upper,
        )
    } else if b1 == q {
        (
            WqkCase::TriggerAfterTrigger,
            s * (beta1 + beta2 / nf) / nf,
            BoundKind::Lower,
        )
    } else if b1 == noise(n) {
        (WqkCase::NoiseAfterTrigger, s * beta1 / nf, BoundKind::Equal)
    } else {
        (
            WqkCase::TokenAfterTrigger,
            s * beta1 * (1.0 + 1.0 / nf) / nf,
            BoundKind::Equal,
        )
    };
    let mut warnings = Vec::new();
    if alpha > wqk_alpha_max() {
        warnings.push(format!("alpha = {alpha} exceeds {:.4}", wqk_alpha_max()));
    }
    if beta2 >= beta1 {
        warnings.push("expects beta1 > beta2".to_string());
    }
    if n < 16 || t < 4 * n {
        warnings.push(format!("N = {n}, T = {t} outside the N, T >> 1 regime"));
    }
    WqkProjection {
        b1,
        b2,
        case,
        value,
        bound,
        beta1,
        beta2,
        warning: if warnings.is_empty() {
            None
        } else {
            Some(warnings.join("; "))
        },
    }
}

/// Lower bound on `value(ȳ after q) − value(τ after q)`.
pub fn wqk_gap_bound(beta2: f64, n: usize, alpha: f64) -> f64 {
    (1.0 - alpha).powi(2) * beta2 / (n * n) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignEntry {
    pub direction: Token,
    pub sign: i8,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlySigns {
    pub entries: Vec<SignEntry>,
    /// Value coefficient `c` assumed for the noise row of `W_V`.
    pub c: f64,
    pub warning: Option<String>,
}

/// Signs of `W_E(q)ᵀ(−∇W_QK L)W_E(k)` for each key token `k`, right after the
/// first value step, when the feed-forward block predicts noise with
/// probability `p_noise`. The value matrix is taken as
/// `c·Σ_{k≤N} W_U(τ)W_E(k)ᵀ + cα·W_U(τ)W_E(τ)ᵀ` with `c = (α − p)/N`.
pub fn early_wqk_signs(n: usize, t: usize, alpha: f64, p_noise: f64) -> EarlySigns {
    let nf = n as f64;
    let c = (alpha - p_noise) / nf;
    let lead = (alpha - p_noise) * (alpha / nf) * c * (alpha - 1.0);
    let mut entries: Vec<SignEntry> = (0..n)
        .map(|k| {
            let m = lead * (-1.0 / nf);
            SignEntry {
                direction: k,
                sign: m.signum() as i8,
                magnitude: m.abs(),
            }
        })
        .collect();
    let m = lead * (1.0 - alpha / nf);
    entries.push(SignEntry {
        direction: noise(n),
        sign: m.signum() as i8,
        magnitude: m.abs(),
    });
    let mut warnings = Vec::new();
    if p_noise >= alpha {
        warnings.push(format!("p_noise = {p_noise} is not below alpha = {alpha}"));
    }
    if n < 16 || t < 4 * n {
        warnings.push(format!("N = {n}, T = {t} outside the N, T >> 1 regime"));
    }
    EarlySigns {
        entries,
        c,
        warning: if warnings.is_empty() {
            None
        } else {
            Some(warnings.join("; "))
        },
    }
}
