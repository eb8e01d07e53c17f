//! Reverse-mode gradients for both architectures, SGD/Adam, the one-step
//! update from zero and the phased training loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{domain, generate_batch, DataError, TaskKind, TaskSpec, Token, TokenSequence};
use crate::linalg::{cross_entropy, cross_entropy_soft, gemm, LinalgError, Matrix};
use crate::nets::{
    FeedForward, FfTrace, FullLayerTrace, LayerWeights, Model, NamedWeights, NetError,
    QueryLayerTrace, SimplifiedWeights, TransformerWeights,
};
use crate::par;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: u64, loss: f64 },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("metric sink: {0}")]
    Sink(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Sequences per gradient chunk; chunks are reduced in index order.
pub const CHUNK: usize = 32;

/// One gradient matrix per learnable matrix, in the model's order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub entries: Vec<(String, Matrix)>,
}

impl GradientSet {
    pub fn zeros_like<M: NamedWeights>(m: &M) -> Self {
        GradientSet {
            entries: m
                .learnable()
                .into_iter()
                .map(|(n, w)| (n, Matrix::zeros(w.rows(), w.cols())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, m)| m.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn accumulate(&mut self, other: &GradientSet) {
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            crate::linalg::axpy(1.0, b.as_slice(), a.as_mut_slice());
        }
    }

    fn scale(&mut self, s: f64) {
        for (_, m) in self.entries.iter_mut() {
            m.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }

    fn validate(&self) -> Result<()> {
        for (_, m) in &self.entries {
            m.validate()?;
        }
        Ok(())
    }
}

/// Training target at the final position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelMode {
    /// The sampled label `y`.
    #[default]
    Sampled,
    /// The label distribution `p_{α,ȳ}` (its expectation over `y`).
    Expected { alpha: f64 },
}

fn logit_grad(logits: &[f64], s: &TokenSequence, labels: LabelMode) -> (f64, Vec<f64>) {
    match labels {
        LabelMode::Sampled => cross_entropy(logits, s.y),
        LabelMode::Expected { alpha } => {
            let tau = logits.len() - 1;
            let mut p = vec![0.0; logits.len()];
            p[tau] += alpha;
            p[s.ybar] += 1.0 - alpha;
            cross_entropy_soft(logits, &p)
        }
    }
}

/// Models with exact gradients of the mean final-position cross-entropy.
pub trait Differentiable: Model + Sync {
    /// Summed (not averaged) loss and gradients over one chunk.
    fn chunk_grad(&self, chunk: &[TokenSequence], labels: LabelMode) -> Result<(f64, GradientSet)>;
}

/// Mean loss and its gradient over `batch`.
pub fn backward_with<M: Differentiable>(
    model: &M,
    batch: &[TokenSequence],
    labels: LabelMode,
) -> Result<(GradientSet, f64)> {
    if batch.is_empty() {
        return Err(TrainError::Precondition("empty batch".into()));
    }
    let chunks: Vec<&[TokenSequence]> = batch.chunks(CHUNK).collect();
    let parts = par::map_ordered(chunks.len(), |i| model.chunk_grad(chunks[i], labels));
    let mut total = GradientSet::zeros_like(model);
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        total.accumulate(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    total.validate()?;
    Ok((total, loss * inv))
}

/// Mean loss and gradients against the sampled labels.
pub fn backward<M: Differentiable>(
    model: &M,
    batch: &[TokenSequence],
) -> Result<(GradientSet, f64)> {
    backward_with(model, batch, LabelMode::Sampled)
}

// ---------------------------------------------------------------------------
// Transformer backward
// ---------------------------------------------------------------------------

struct LayerGrad {
    wqk: Vec<f64>,
    wv: Vec<f64>,
    wo: Option<Vec<f64>>,
    ff: Vec<Vec<f64>>,
}

impl LayerGrad {
    fn zeros(lw: &LayerWeights, d: usize) -> Self {
        let ff = match &lw.ff {
            FeedForward::Mlp { u_in, u_out } => vec![
                vec![0.0; u_in.as_slice().len()],
                vec![0.0; u_out.as_slice().len()],
            ],
            FeedForward::Linear { .. } => vec![vec![0.0; d * d]],
            FeedForward::None => vec![],
        };
        LayerGrad {
            wqk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: lw.wo.as_ref().map(|_| vec![0.0; d * d]),
            ff,
        }
    }

    fn into_mats(self, lw: &LayerWeights, d: usize) -> Vec<Matrix> {
        let mut out = vec![
            Matrix::from_vec(d, d, self.wqk).unwrap(),
            Matrix::from_vec(d, d, self.wv).unwrap(),
        ];
        if let Some(wo) = self.wo {
            out.push(Matrix::from_vec(d, d, wo).unwrap());
        }
        match &lw.ff {
            FeedForward::Mlp { u_in, u_out } => {
                let mut it = self.ff.into_iter();
                out.push(Matrix::from_vec(u_in.rows(), u_in.cols(), it.next().unwrap()).unwrap());
                out.push(Matrix::from_vec(u_out.rows(), u_out.cols(), it.next().unwrap()).unwrap());
            }
            FeedForward::Linear { .. } => {
                out.push(Matrix::from_vec(d, d, self.ff.into_iter().next().unwrap()).unwrap())
            }
            FeedForward::None => {}
        }
        out
    }
}

/// Backprop through `out = r + F(r)`; `d_r` enters holding `d_out` and
/// leaves holding the gradient with respect to `r`.
fn ff_backward(
    ff: &FeedForward,
    tr: &FfTrace,
    r: &[f64],
    rows: usize,
    d: usize,
    g: &mut LayerGrad,
    d_r: &mut [f64],
) {
    let d_out = d_r.to_vec();
    match (ff, tr) {
        (FeedForward::Mlp { u_in, u_out }, FfTrace::Mlp { z, a, hidden }) => {
            let h = *hidden;
            let (gi, go) = g.ff.split_at_mut(1);
            gemm(d, rows, h, 1.0, &d_out, true, a, false, 1.0, &mut go[0]);
            let mut dz = vec![0.0; rows * h];
            gemm(
                rows,
                d,
                h,
                1.0,
                &d_out,
                false,
                u_out.as_slice(),
                false,
                0.0,
                &mut dz,
            );
            for (dzi, zi) in dz.iter_mut().zip(z) {
                if *zi <= 0.0 {
                    *dzi = 0.0;
                }
            }
            gemm(h, rows, d, 1.0, &dz, true, r, false, 1.0, &mut gi[0]);
            gemm(
                rows,
                h,
                d,
                1.0,
                &dz,
                false,
                u_in.as_slice(),
                false,
                1.0,
                d_r,
            );
        }
        (FeedForward::Linear { w }, FfTrace::Linear) => {
            gemm(d, rows, d, 1.0, &d_out, true, r, false, 1.0, &mut g.ff[0]);
            gemm(
                rows,
                d,
                d,
                1.0,
                &d_out,
                false,
                w.as_slice(),
                false,
                1.0,
                d_r,
            );
        }
        _ => {}
    }
}

/// Backprop through a value map applied to `rows` inputs `x`:
/// `V = x W_Vᵀ` or `V = (x W_Vᵀ) W_Oᵀ`. Returns `dV/dx`-propagated rows.
fn value_backward(
    lw: &LayerWeights,
    u: Option<&[f64]>,
    x: &[f64],
    d_v: &[f64],
    rows: usize,
    d: usize,
    g: &mut LayerGrad,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    match (&lw.wo, u) {
        (Some(wo), Some(u)) => {
            gemm(
                d,
                rows,
                d,
                1.0,
                d_v,
                true,
                u,
                false,
                1.0,
                g.wo.as_mut().unwrap(),
            );
            let mut du = vec![0.0; rows * d];
            gemm(
                rows,
                d,
                d,
                1.0,
                d_v,
                false,
                wo.as_slice(),
                false,
                0.0,
                &mut du,
            );
            gemm(d, rows, d, 1.0, &du, true, x, false, 1.0, &mut g.wv);
            gemm(
                rows,
                d,
                d,
                1.0,
                &du,
                false,
                lw.wv.as_slice(),
                false,
                0.0,
                &mut dx,
            );
        }
        _ => {
            gemm(d, rows, d, 1.0, d_v, true, x, false, 1.0, &mut g.wv);
            gemm(
                rows,
                d,
                d,
                1.0,
                d_v,
                false,
                lw.wv.as_slice(),
                false,
                0.0,
                &mut dx,
            );
        }
    }
    dx
}

/// Softmax backward in place: `da ← a ⊙ (da − ⟨a, da⟩)`.
fn softmax_backward(a: &[f64], da: &mut [f64]) {
    let s: f64 = a.iter().zip(da.iter()).map(|(p, g)| p * g).sum();
    for (g, p) in da.iter_mut().zip(a) {
        *g = p * (*g - s);
    }
}

#[allow(clippy::too_many_arguments)]
fn query_layer_backward(
    lw: &LayerWeights,
    tr: &QueryLayerTrace,
    x: &[f64],
    d_out: &[f64],
    b: usize,
    t: usize,
    d: usize,
    g: &mut LayerGrad,
    need_dx: bool,
) -> Option<Vec<f64>> {
    let mut d_r = d_out.to_vec();
    ff_backward(&lw.ff, &tr.ff, &tr.r, b, d, g, &mut d_r);
    let d_c = value_backward(lw, tr.u.as_deref(), &tr.c, &d_r, b, d, g);
    let mut dx = need_dx.then(|| vec![0.0; b * t * d]);
    let mut d_yq = vec![0.0; b * d];
    let mut da = vec![0.0; t];
    for i in 0..b {
        let xs = &x[i * t * d..(i + 1) * t * d];
        let a = &tr.attn[i * t..(i + 1) * t];
        let dci = &d_c[i * d..(i + 1) * d];
        gemm(t, d, 1, 1.0, xs, false, dci, false, 0.0, &mut da);
        softmax_backward(a, &mut da);
        gemm(
            1,
            t,
            d,
            1.0,
            &da,
            false,
            xs,
            false,
            0.0,
            &mut d_yq[i * d..(i + 1) * d],
        );
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * t * d..(i + 1) * t * d];
            gemm(t, 1, d, 1.0, a, false, dci, false, 1.0, dxi);
            gemm(
                t,
                1,
                d,
                1.0,
                &da,
                false,
                &tr.yq[i * d..(i + 1) * d],
                false,
                1.0,
                dxi,
            );
        }
    }
    gemm(d, b, d, 1.0, &tr.xq, true, &d_yq, false, 1.0, &mut g.wqk);
    if let Some(dx) = dx.as_mut() {
        gemm(
            b,
            d,
            d,
            1.0,
            &d_yq,
            false,
            lw.wqk.as_slice(),
            true,
            1.0,
            &mut d_r,
        );
        for i in 0..b {
            let row = (i * t + t - 1) * d;
            crate::linalg::axpy(1.0, &d_r[i * d..(i + 1) * d], &mut dx[row..row + d]);
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn full_layer_backward(
    lw: &LayerWeights,
    tr: &FullLayerTrace,
    x: &[f64],
    d_out: &[f64],
    b: usize,
    t: usize,
    d: usize,
    g: &mut LayerGrad,
    need_dx: bool,
) -> Option<Vec<f64>> {
    let bt = b * t;
    let mut d_r = d_out.to_vec();
    ff_backward(&lw.ff, &tr.ff, &tr.r, bt, d, g, &mut d_r);
    let d_h = &d_r;
    let mut d_v = vec![0.0; bt * d];
    let mut d_y = vec![0.0; bt * d];
    let mut dx = need_dx.then(|| d_r.clone());
    let mut ds = vec![0.0; t * t];
    for i in 0..b {
        let o = i * t * d;
        let a = &tr.attn[i * t * t..(i + 1) * t * t];
        let dhi = &d_h[o..o + t * d];
        gemm(
            t,
            d,
            t,
            1.0,
            dhi,
            false,
            &tr.v[o..o + t * d],
            true,
            0.0,
            &mut ds,
        );
        gemm(
            t,
            t,
            d,
            1.0,
            a,
            true,
            dhi,
            false,
            0.0,
            &mut d_v[o..o + t * d],
        );
        for row in 0..t {
            let r = row * t..row * t + row + 1;
            softmax_backward(&a[r.clone()], &mut ds[r]);
            ds[row * t + row + 1..(row + 1) * t].fill(0.0);
        }
        gemm(
            t,
            t,
            d,
            1.0,
            &ds,
            false,
            &x[o..o + t * d],
            false,
            0.0,
            &mut d_y[o..o + t * d],
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                t,
                t,
                d,
                1.0,
                &ds,
                true,
                &tr.y[o..o + t * d],
                false,
                1.0,
                &mut dx[o..o + t * d],
            );
        }
    }
    let dx_v = value_backward(lw, tr.u.as_deref(), x, &d_v, bt, d, g);
    gemm(d, bt, d, 1.0, x, true, &d_y, false, 1.0, &mut g.wqk);
    if let Some(dx) = dx.as_mut() {
        crate::linalg::axpy(1.0, &dx_v, dx);
        gemm(bt, d, d, 1.0, &d_y, false, lw.wqk.as_slice(), true, 1.0, dx);
    }
    dx
}

impl Differentiable for TransformerWeights {
    fn chunk_grad(&self, chunk: &[TokenSequence], labels: LabelMode) -> Result<(f64, GradientSet)> {
        let refs: Vec<&[Token]> = chunk.iter().map(|s| s.z.as_slice()).collect();
        let tr = self.forward_chunk(&refs)?;
        let (b, t, d, v) = (tr.b, tr.t, tr.d, self.vocab());
        let mut loss = 0.0;
        let mut g_logits = vec![0.0; b * v];
        for (i, s) in chunk.iter().enumerate() {
            let (l, g) = logit_grad(tr.logits_of(i), s, labels);
            loss += l;
            g_logits[i * v..(i + 1) * v].copy_from_slice(&g);
        }
        let mut d_out = vec![0.0; b * d];
        gemm(
            b,
            v,
            d,
            1.0,
            &g_logits,
            false,
            self.w_u.as_slice(),
            false,
            0.0,
            &mut d_out,
        );
        let depth = self.depth();
        let mut grads: Vec<LayerGrad> = self
            .layers
            .iter()
            .map(|lw| LayerGrad::zeros(lw, d))
            .collect();
        let last = depth - 1;
        let mut dx = query_layer_backward(
            &self.layers[last],
            &tr.last,
            tr.layer_input(last),
            &d_out,
            b,
            t,
            d,
            &mut grads[last],
            last > 0,
        );
        for l in (0..last).rev() {
            let upstream = dx.take().expect("upstream gradient");
            dx = full_layer_backward(
                &self.layers[l],
                &tr.full[l],
                tr.layer_input(l),
                &upstream,
                b,
                t,
                d,
                &mut grads[l],
                l > 0,
            );
        }
        let mats: Vec<Matrix> = grads
            .into_iter()
            .zip(&self.layers)
            .flat_map(|(g, lw)| g.into_mats(lw, d))
            .collect();
        let names = self.learnable().into_iter().map(|(n, _)| n);
        Ok((
            loss,
            GradientSet {
                entries: names.zip(mats).collect(),
            },
        ))
    }
}

impl Differentiable for SimplifiedWeights {
    fn chunk_grad(&self, chunk: &[TokenSequence], labels: LabelMode) -> Result<(f64, GradientSet)> {
        let refs: Vec<&[Token]> = chunk.iter().map(|s| s.z.as_slice()).collect();
        let tr = self.forward_chunk(&refs)?;
        let (b, t, d, v) = (tr.b, tr.t, tr.d, self.n + 1);
        let mut loss = 0.0;
        let mut g_logits = vec![0.0; b * v];
        for (i, s) in chunk.iter().enumerate() {
            let (l, g) = logit_grad(&tr.logits_of(i), s, labels);
            loss += l;
            g_logits[i * v..(i + 1) * v].copy_from_slice(&g);
        }
        let mut d_phi = vec![0.0; b * d];
        gemm(
            b,
            v,
            d,
            1.0,
            &g_logits,
            false,
            self.w_u.as_slice(),
            false,
            0.0,
            &mut d_phi,
        );
        let mut gwv = vec![0.0; d * d];
        let mut gwf = vec![0.0; d * d];
        gemm(d, b, d, 1.0, &d_phi, true, &tr.c, false, 0.0, &mut gwv);
        gemm(d, b, d, 1.0, &d_phi, true, &tr.xq, false, 0.0, &mut gwf);
        let mut d_c = vec![0.0; b * d];
        gemm(
            b,
            d,
            d,
            1.0,
            &d_phi,
            false,
            self.wv.as_slice(),
            false,
            0.0,
            &mut d_c,
        );
        let mut d_yq = vec![0.0; b * d];
        let mut da = vec![0.0; t];
        for i in 0..b {
            let xs = &tr.xs[i * t * d..(i + 1) * t * d];
            gemm(
                t,
                d,
                1,
                1.0,
                xs,
                false,
                &d_c[i * d..(i + 1) * d],
                false,
                0.0,
                &mut da,
            );
            softmax_backward(&tr.attn[i * t..(i + 1) * t], &mut da);
            gemm(
                1,
                t,
                d,
                1.0,
                &da,
                false,
                xs,
                false,
                0.0,
                &mut d_yq[i * d..(i + 1) * d],
            );
        }
        let mut gwqk = vec![0.0; d * d];
        gemm(d, b, d, 1.0, &tr.xq, true, &d_yq, false, 0.0, &mut gwqk);
        let m = |x: Vec<f64>| Matrix::from_vec(d, d, x);
        Ok((
            loss,
            GradientSet {
                entries: vec![
                    ("wqk".into(), m(gwqk)?),
                    ("wv".into(), m(gwv)?),
                    ("wf".into(), m(gwf)?),
                ],
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Optimisers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_b1")]
        beta1: f64,
        #[serde(default = "default_b2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_b1() -> f64 {
    0.9
}
fn default_b2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_b1(),
            beta2: default_b2(),
            eps: default_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => *lr,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    /// Learning rates replacing the base rate for named matrices.
    overrides: BTreeMap<String, f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, overrides: BTreeMap<String, f64>) -> Self {
        Optimizer {
            cfg,
            overrides,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    fn lr_for(&self, name: &str) -> f64 {
        self.overrides.get(name).copied().unwrap_or(self.cfg.lr())
    }

    pub fn step<M: NamedWeights>(&mut self, model: &mut M, grads: &GradientSet) -> Result<()> {
        self.t += 1;
        let lrs: Vec<f64> = grads.entries.iter().map(|(n, _)| self.lr_for(n)).collect();
        if self.m.is_empty() {
            self.m = grads
                .entries
                .iter()
                .map(|(_, g)| vec![0.0; g.as_slice().len()])
                .collect();
            self.v = self.m.clone();
        }
        let t = self.t as f64;
        let cfg = self.cfg;
        for (k, ((name, w), (gname, g))) in model
            .learnable_mut()
            .into_iter()
            .zip(&grads.entries)
            .enumerate()
        {
            debug_assert_eq!(&name, gname);
            let lr = lrs[k];
            let ws = w.as_mut_slice();
            let gs = g.as_slice();
            match cfg {
                OptimizerConfig::Sgd { .. } => crate::linalg::axpy(-lr, gs, ws),
                OptimizerConfig::Adam {
                    beta1, beta2, eps, ..
                } => {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    let c1 = 1.0 - beta1.powf(t);
                    let c2 = 1.0 - beta2.powf(t);
                    for i in 0..ws.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gs[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gs[i] * gs[i];
                        ws[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
            w.validate()?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// One step from zero
// ---------------------------------------------------------------------------

/// One gradient step from exact zero with separate rates for `W_F` and `W_V`.
pub fn one_step(
    weights: &SimplifiedWeights,
    batch: &[TokenSequence],
    eta_f: f64,
    eta_v: f64,
) -> Result<SimplifiedWeights> {
    one_step_with(weights, batch, eta_f, eta_v, LabelMode::Sampled)
}

pub fn one_step_with(
    weights: &SimplifiedWeights,
    batch: &[TokenSequence],
    eta_f: f64,
    eta_v: f64,
    labels: LabelMode,
) -> Result<SimplifiedWeights> {
    if !weights.is_zero() {
        return Err(TrainError::Precondition(
            "one_step requires all learnable matrices at zero".into(),
        ));
    }
    let (g, _) = backward_with(weights, batch, labels)?;
    let mut out = weights.clone();
    out.wf = g.get("wf").unwrap().scale(-eta_f)?;
    out.wv = g.get("wv").unwrap().scale(-eta_v)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub steps: u64,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataMode {
    /// Fresh sequences every step.
    #[default]
    Online,
    /// A fixed dataset of `m` sequences per phase, visited in cyclic minibatches.
    Fixed { m: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub lr_overrides: BTreeMap<String, f64>,
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataMode,
    #[serde(default)]
    pub task: TaskKind,
    #[serde(default)]
    pub labels: LabelMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.optimizer.lr() <= 0.0 || self.lr_overrides.values().any(|lr| *lr <= 0.0) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if self.phases.is_empty() {
            return Err(TrainError::Config("at least one phase".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if let DataMode::Fixed { m: 0 } = self.data {
            return Err(TrainError::Config(
                "fixed dataset size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.phases.iter().map(|p| p.steps).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub phase: usize,
    pub alpha: f64,
    pub loss: f64,
}

/// What the metric sink sees.
pub struct StepInfo<'a, M> {
    pub step: u64,
    pub phase: usize,
    pub alpha: f64,
    pub loss: f64,
    pub model: &'a M,
}

/// Runs the phases in order. `sink` is called at step 0, every
/// `eval_every` steps and after the final step.
pub fn fit<M, F>(model: M, spec: &TaskSpec, cfg: &TrainConfig, sink: F) -> Result<(M, Vec<StepLog>)>
where
    M: Differentiable,
    F: FnMut(&StepInfo<M>) -> std::result::Result<(), String>,
{
    let opt = Optimizer::new(cfg.optimizer, cfg.lr_overrides.clone());
    let (model, _, log) = fit_from(model, opt, 0, cfg.total_steps(), spec, cfg, sink)?;
    Ok((model, log))
}

/// Runs global steps `start..stop` of the schedule with the given optimiser
/// state. Batches depend only on the global step, so splitting a run at any
/// step reproduces the uninterrupted run.
pub fn fit_from<M, F>(
    mut model: M,
    mut opt: Optimizer,
    start: u64,
    stop: u64,
    spec: &TaskSpec,
    cfg: &TrainConfig,
    mut sink: F,
) -> Result<(M, Optimizer, Vec<StepLog>)>
where
    M: Differentiable,
    F: FnMut(&StepInfo<M>) -> std::result::Result<(), String>,
{
    cfg.validate()?;
    let total = cfg.total_steps();
    let stop = stop.min(total);
    let mut log = Vec::new();
    let (mut phase_start, mut first_phase) = (0u64, 0usize);
    for (pi, p) in cfg.phases.iter().enumerate() {
        if start < phase_start + p.steps || pi + 1 == cfg.phases.len() {
            first_phase = pi;
            break;
        }
        phase_start += p.steps;
    }
    if start == 0 {
        sink(&StepInfo {
            step: 0,
            phase: 0,
            alpha: cfg.phases[0].alpha,
            loss: f64::NAN,
            model: &model,
        })
        .map_err(TrainError::Sink)?;
    }
    let mut step = start;
    for (pi, phase) in cfg.phases.iter().enumerate().skip(first_phase) {
        if step >= stop {
            break;
        }
        let pspec = spec.with_alpha(phase.alpha);
        let phase_seed = cfg.seed.wrapping_add(pi as u64 * 0x1000_0000_0000);
        let fixed = match cfg.data {
            DataMode::Fixed { m } => Some(generate_batch(
                &pspec,
                cfg.task,
                phase_seed,
                domain::TRAIN,
                0,
                m,
            )?),
            DataMode::Online => None,
        };
        let local_start = step - phase_start;
        let local_stop = phase.steps.min(stop - phase_start);
        for local in local_start..local_stop {
            let batch = match &fixed {
                None => generate_batch(
                    &pspec,
                    cfg.task,
                    phase_seed,
                    domain::TRAIN,
                    local * cfg.batch_size as u64,
                    cfg.batch_size,
                )?,
                Some(data) => {
                    let m = data.len();
                    (0..cfg.batch_size.min(m))
                        .map(|i| data[(local as usize * cfg.batch_size + i) % m].clone())
                        .collect()
                }
            };
            let (g, loss) = backward_with(&model, &batch, cfg.labels)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step, loss });
            }
            opt.step(&mut model, &g)
                .map_err(|_| TrainError::Diverged { step, loss })?;
            step += 1;
            log.push(StepLog {
                step,
                phase: pi,
                alpha: phase.alpha,
                loss,
            });
            if (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == total {
                sink(&StepInfo {
                    step,
                    phase: pi,
                    alpha: phase.alpha,
                    loss,
                    model: &model,
                })
                .map_err(TrainError::Sink)?;
            }
        }
        phase_start += phase.steps;
    }
    Ok((model, opt, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_batch, stream_rng};
    use crate::nets::{EmbedScheme, FfKind, TransformerConfig};
    use rand::Rng;

    fn batch(n: usize, t: usize, count: usize, seed: u64) -> Vec<TokenSequence> {
        let spec = TaskSpec::uniform(n, vec![1], 0.3, t).unwrap();
        generate_batch(&spec, TaskKind::Recall, seed, domain::TRAIN, 0, count).unwrap()
    }

    fn mean_loss<M: Model>(m: &M, b: &[TokenSequence]) -> f64 {
        let refs: Vec<&[Token]> = b.iter().map(|s| s.z.as_slice()).collect();
        let logits = m.logits_batch(&refs).unwrap();
        logits
            .iter()
            .zip(b)
            .map(|(l, s)| cross_entropy(l, s.y).0)
            .sum::<f64>()
            / b.len() as f64
    }

    /// Central differences on a random subset of entries of every matrix.
    fn fd_check<M: Differentiable>(
        model: &M,
        b: &[TokenSequence],
        seed: u64,
        per_matrix: usize,
    ) -> f64 {
        let (g, _) = backward(model, b).unwrap();
        let mut rng = stream_rng(seed, 77, 0);
        let mut worst: f64 = 0.0;
        let names: Vec<String> = model.learnable().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let len = model.matrix(&name).unwrap().as_slice().len();
            for _ in 0..per_matrix {
                let idx = rng.random_range(0..len);
                let h = 1e-5;
                let mut p = model.clone();
                p.matrix_mut(&name).unwrap().as_mut_slice()[idx] += h;
                let mut m = model.clone();
                m.matrix_mut(&name).unwrap().as_mut_slice()[idx] -= h;
                let num = (mean_loss(&p, b) - mean_loss(&m, b)) / (2.0 * h);
                let ana = g.get(&name).unwrap().as_slice()[idx];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn transformer_gradients_match_finite_differences() {
        for (ff, layers, factor) in [
            (FfKind::Mlp { hidden: 24 }, 2, false),
            (FfKind::Linear, 2, false),
            (FfKind::None, 2, true),
            (FfKind::Mlp { hidden: 12 }, 3, true),
        ] {
            let mut cfg = TransformerConfig::two_layer(6, 40, 8, ff, 11);
            cfg.layers = vec![ff; layers];
            cfg.factorize_first_value = factor;
            cfg.init_std = Some(0.3);
            let w = TransformerWeights::init(cfg).unwrap();
            let worst = fd_check(&w, &batch(6, 8, 5, 2), 3, 12);
            assert!(worst < 1e-4, "{ff:?} x{layers}: {worst}");
        }
    }

    #[test]
    fn simplified_gradients_match_finite_differences() {
        let mut w = SimplifiedWeights::zero_init(6, 40, EmbedScheme::default(), 1).unwrap();
        let mut rng = stream_rng(2, 2, 2);
        for (_, m) in w.learnable_mut() {
            m.as_mut_slice()
                .iter_mut()
                .for_each(|x| *x = rng.random_range(-0.5..0.5));
        }
        let worst = fd_check(&w, &batch(6, 8, 5, 3), 4, 30);
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn zero_init_simplified_gradients() {
        let n = 7;
        let w = SimplifiedWeights::zero_init(n, 3 * (n + 1), EmbedScheme::Orthonormal, 5).unwrap();
        let b = batch(n, 10, 40, 1);
        let (g, _) = backward(&w, &b).unwrap();
        assert!(g.get("wqk").unwrap().is_zero());
        let s = &b[..1];
        let (g, _) = backward(&w, s).unwrap();
        let q = s[0].z[9];
        for k in 0..=n {
            let proj = g.get("wf").unwrap().bilinear(w.w_u.row(k), w.w_e.row(q));
            let want = 1.0 / (n + 1) as f64 - if k == s[0].y { 1.0 } else { 0.0 };
            assert!((proj - want).abs() < 1e-12);
        }
    }

    #[test]
    fn one_step_rules() {
        let n = 5;
        let w = SimplifiedWeights::zero_init(n, 3 * (n + 1), EmbedScheme::Orthonormal, 5).unwrap();
        let b = batch(n, 10, 20, 1);
        assert!(one_step(&w, &b, 0.0, 0.0).unwrap().is_zero());
        let stepped = one_step(&w, &b, 1.0, 2.0).unwrap();
        assert!(stepped.wqk.is_zero());
        let (g, _) = backward(&w, &b).unwrap();
        assert!(
            stepped
                .wv
                .sub(&g.get("wv").unwrap().scale(-2.0).unwrap())
                .unwrap()
                .frobenius_norm()
                < 1e-15
        );
        assert!(matches!(
            one_step(&stepped, &b, 1.0, 1.0),
            Err(TrainError::Precondition(_))
        ));
    }

    #[test]
    fn sgd_halves_compose_and_adam_ignores_zero_gradients() {
        let cfg = TransformerConfig::two_layer(6, 16, 8, FfKind::Linear, 2);
        let w = TransformerWeights::init(cfg).unwrap();
        let b = batch(6, 8, 4, 9);
        let (g, _) = backward(&w, &b).unwrap();
        let mut once = w.clone();
        Optimizer::new(OptimizerConfig::Sgd { lr: 0.1 }, BTreeMap::new())
            .step(&mut once, &g)
            .unwrap();
        let mut twice = w.clone();
        let mut half = Optimizer::new(OptimizerConfig::Sgd { lr: 0.05 }, BTreeMap::new());
        half.step(&mut twice, &g).unwrap();
        half.step(&mut twice, &g).unwrap();
        for ((_, a), (_, c)) in once.learnable().into_iter().zip(twice.learnable()) {
            assert!(a.sub(c).unwrap().frobenius_norm() < 1e-12);
        }
        let mut adam = w.clone();
        let zero = GradientSet::zeros_like(&w);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01), BTreeMap::new());
        for _ in 0..3 {
            opt.step(&mut adam, &zero).unwrap();
        }
        assert_eq!(adam, w);
    }

    #[test]
    fn parallel_backward_is_bitwise_serial() {
        let cfg = TransformerConfig::two_layer(6, 16, 8, FfKind::Mlp { hidden: 16 }, 2);
        let w = TransformerWeights::init(cfg).unwrap();
        let b = batch(6, 8, 100, 4);
        let serial = backward(&w, &b).unwrap();
        par::set_threads(3);
        let parallel = backward(&w, &b).unwrap();
        par::set_threads(1);
        assert_eq!(serial, parallel);
    }

    #[test]
    fn fit_with_zero_steps_is_identity_and_runs_phases() {
        let spec = TaskSpec::uniform(6, vec![1], 0.5, 8).unwrap();
        let w = TransformerWeights::init(TransformerConfig::two_layer(6, 16, 8, FfKind::Linear, 1))
            .unwrap();
        let mut cfg = TrainConfig {
            optimizer: OptimizerConfig::Sgd { lr: 0.05 },
            batch_size: 8,
            phases: vec![Phase {
                steps: 0,
                alpha: 0.5,
            }],
            lr_overrides: BTreeMap::new(),
            eval_every: 0,
            seed: 1,
            data: DataMode::Online,
            task: TaskKind::Recall,
            labels: LabelMode::Sampled,
        };
        let (same, log) = fit(w.clone(), &spec, &cfg, |_| Ok(())).unwrap();
        assert_eq!(same, w);
        assert!(log.is_empty());
        cfg.phases = vec![
            Phase {
                steps: 3,
                alpha: 0.0,
            },
            Phase {
                steps: 2,
                alpha: 0.5,
            },
        ];
        cfg.eval_every = 2;
        let mut seen = Vec::new();
        let (_, log) = fit(w.clone(), &spec, &cfg, |s| {
            seen.push(s.step);
            Ok(())
        })
        .unwrap();
        assert_eq!(log.len(), 5);
        assert_eq!(log[3].alpha, 0.5);
        assert_eq!(seen, vec![0, 2, 4, 5]);
        let (again, _) = fit(w, &spec, &cfg, |_| Ok(())).unwrap();
        let (first, _) = fit(
            TransformerWeights::init(TransformerConfig::two_layer(6, 16, 8, FfKind::Linear, 1))
                .unwrap(),
            &spec,
            &cfg,
            |_| Ok(()),
        )
        .unwrap();
        assert_eq!(again, first);
    }

    #[test]
    fn split_run_matches_uninterrupted() {
        let spec = TaskSpec::uniform(6, vec![1], 0.5, 8).unwrap();
        let w = TransformerWeights::init(TransformerConfig::two_layer(
            6,
            16,
            8,
            FfKind::Mlp { hidden: 8 },
            2,
        ))
        .unwrap();
        let cfg = TrainConfig {
            optimizer: OptimizerConfig::adam(0.01),
            batch_size: 4,
            phases: vec![
                Phase {
                    steps: 3,
                    alpha: 0.0,
                },
                Phase {
                    steps: 4,
                    alpha: 0.5,
                },
            ],
            lr_overrides: BTreeMap::new(),
            eval_every: 0,
            seed: 9,
            data: DataMode::Online,
            task: TaskKind::Recall,
            labels: LabelMode::Sampled,
        };
        let (whole, _) = fit(w.clone(), &spec, &cfg, |_| Ok(())).unwrap();
        let opt = Optimizer::new(cfg.optimizer, BTreeMap::new());
        let (half, opt, l1) = fit_from(w, opt, 0, 5, &spec, &cfg, |_| Ok(())).unwrap();
        let (rest, _, l2) = fit_from(half, opt, 5, 7, &spec, &cfg, |_| Ok(())).unwrap();
        assert_eq!((l1.len(), l2.len()), (5, 2));
        assert_eq!(l2[0].alpha, 0.5);
        assert_eq!(rest, whole);
    }
}
