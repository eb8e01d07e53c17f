//! Forward passes for the L-layer attention-only-plus-feed-forward
//! transformer and the one-layer simplified model.
//!
//! Attention logits use the query-left convention `s_{t,s} = x_tᵀ W_QK x_s`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{domain, stream_rng, Token, TokenSequence};
use crate::linalg::{self, axpy, dot, gemm, softmax_in_place, LinalgError, Matrix};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("token {token} out of range for vocabulary {vocab}")]
    TokenOutOfRange { token: Token, vocab: usize },
    #[error("sequence length {got} does not match context length {want}")]
    Length { got: usize, want: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("orthonormal embeddings need d >= {required} (got d = {d})")]
    OrthonormalInfeasible { required: usize, d: usize },
    #[error("unknown matrix '{name}'; available: {available}")]
    UnknownMatrix { name: String, available: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FfKind {
    Mlp { hidden: usize },
    Linear,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum EmbedScheme {
    /// Entries `N(0, sigma²)`; `sigma` defaults to `1/√d`.
    Gaussian {
        sigma: Option<f64>,
    },
    Orthonormal,
}

impl Default for EmbedScheme {
    fn default() -> Self {
        EmbedScheme::Gaussian { sigma: None }
    }
}

/// Frozen embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub w_e: Matrix,
    pub w_e_prev: Option<Matrix>,
    pub w_u: Matrix,
    pub pos: Option<Matrix>,
}

/// Draws `W_E`, `W_U` (both `(N+1)×d`) and optionally `W̃_E` and `P` (`T×d`).
/// Under the orthonormal scheme every drawn row is orthonormal to every other.
pub fn embed_init(
    d: usize,
    n: usize,
    t: usize,
    scheme: EmbedScheme,
    with_prev: bool,
    with_pos: bool,
    seed: u64,
) -> Result<Embeddings> {
    let v = n + 1;
    let total = 2 * v + if with_prev { v } else { 0 } + if with_pos { t } else { 0 };
    let mut rng = stream_rng(seed, domain::EMBED, 0);
    let mut rows: Vec<Vec<f64>> = match scheme {
        EmbedScheme::Gaussian { sigma } => {
            let s = sigma.unwrap_or(1.0 / (d as f64).sqrt());
            (0..total).map(|_| gaussian_vec(&mut rng, d, s)).collect()
        }
        EmbedScheme::Orthonormal => {
            if d < total {
                return Err(NetError::OrthonormalInfeasible { required: total, d });
            }
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(total);
            while basis.len() < total {
                let mut x = gaussian_vec(&mut rng, d, 1.0);
                for _ in 0..2 {
                    for b in &basis {
                        let p = dot(&x, b);
                        axpy(-p, b, &mut x);
                    }
                }
                let nrm = dot(&x, &x).sqrt();
                if nrm > 1e-6 {
                    x.iter_mut().for_each(|e| *e /= nrm);
                    basis.push(x);
                }
            }
            basis
        }
    };
    let mut take = |k: usize| -> Result<Matrix> {
        let block: Vec<Vec<f64>> = rows.drain(..k).collect();
        Ok(Matrix::from_rows(&block)?)
    };
    let w_e = take(v)?;
    let w_u = take(v)?;
    let w_e_prev = if with_prev { Some(take(v)?) } else { None };
    let pos = if with_pos { Some(take(t)?) } else { None };
    Ok(Embeddings {
        w_e,
        w_e_prev,
        w_u,
        pos,
    })
}

fn gaussian_vec<R: Rng>(rng: &mut R, d: usize, sigma: f64) -> Vec<f64> {
    (0..d)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, sigma: f64) -> Matrix {
    Matrix::from_vec(rows, cols, gaussian_vec(rng, rows * cols, sigma))
        .expect("finite gaussian draw")
}

/// Read/write access to named weight matrices.
pub trait NamedWeights: Clone {
    /// Learnable matrices in a fixed order.
    fn learnable(&self) -> Vec<(String, &Matrix)>;
    fn learnable_mut(&mut self) -> Vec<(String, &mut Matrix)>;
    fn frozen(&self) -> Vec<(String, &Matrix)>;

    fn matrix(&self, name: &str) -> Option<&Matrix> {
        self.learnable()
            .into_iter()
            .chain(self.frozen())
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    fn matrix_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        let available = self
            .learnable()
            .into_iter()
            .map(|(n, _)| n)
            .collect::<Vec<_>>()
            .join(", ");
        self.learnable_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| NetError::UnknownMatrix {
                name: name.to_string(),
                available,
            })
    }
}

/// Shared interface of the trainable architectures.
pub trait Model: NamedWeights {
    fn n(&self) -> usize;
    fn vocab(&self) -> usize {
        self.n() + 1
    }
    fn context(&self) -> Option<usize>;
    /// Logits at the final position for each sequence.
    fn logits_batch(&self, seqs: &[&[Token]]) -> Result<Vec<Vec<f64>>>;

    fn logits(&self, z: &[Token]) -> Result<Vec<f64>> {
        Ok(self.logits_batch(&[z])?.remove(0))
    }
}

fn check_tokens(z: &[Token], vocab: usize, t: Option<usize>) -> Result<()> {
    if let Some(t) = t {
        if z.len() != t {
            return Err(NetError::Length {
                got: z.len(),
                want: t,
            });
        }
    }
    if z.is_empty() {
        return Err(NetError::Length {
            got: 0,
            want: t.unwrap_or(1),
        });
    }
    if let Some(tok) = z.iter().find(|x| **x >= vocab) {
        return Err(NetError::TokenOutOfRange { token: *tok, vocab });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Transformer
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n: usize,
    pub d: usize,
    pub t: usize,
    /// One feed-forward kind per layer; the length is the depth L.
    pub layers: Vec<FfKind>,
    #[serde(default)]
    pub factorize_first_value: bool,
    #[serde(default)]
    pub embed: EmbedScheme,
    /// Standard deviation of learnable weights; defaults to `1/√d`.
    #[serde(default)]
    pub init_std: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl TransformerConfig {
    /// Two layers with the same feed-forward kind, hidden width `4d` for MLPs.
    pub fn two_layer(n: usize, d: usize, t: usize, ff: FfKind, seed: u64) -> Self {
        TransformerConfig {
            n,
            d,
            t,
            layers: vec![ff, ff],
            factorize_first_value: false,
            embed: EmbedScheme::default(),
            init_std: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.t == 0 {
            return Err(NetError::Config("n, d and t must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(NetError::Config("at least one layer".into()));
        }
        if self
            .layers
            .iter()
            .any(|f| matches!(f, FfKind::Mlp { hidden: 0 }))
        {
            return Err(NetError::Config("MLP hidden width must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeedForward {
    Mlp { u_in: Matrix, u_out: Matrix },
    Linear { w: Matrix },
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wqk: Matrix,
    pub wv: Matrix,
    /// Output factor of a factorised value `W_O·W_V`.
    pub wo: Option<Matrix>,
    pub ff: FeedForward,
}

/// Learnable and frozen matrices of the transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights {
    pub config: TransformerConfig,
    pub w_e: Matrix,
    pub w_u: Matrix,
    pub pos: Matrix,
    pub layers: Vec<LayerWeights>,
}

pub type TwoLayerWeights = TransformerWeights;

impl TransformerWeights {
    pub fn init(config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let (n, d, t) = (config.n, config.d, config.t);
        let emb = embed_init(d, n, t, config.embed, false, true, config.seed)?;
        let std = config.init_std.unwrap_or(1.0 / (d as f64).sqrt());
        let mut rng = stream_rng(config.seed, domain::INIT, 0);
        let layers = config
            .layers
            .iter()
            .enumerate()
            .map(|(l, ff)| {
                let wqk = gaussian_matrix(&mut rng, d, d, std);
                let wv = gaussian_matrix(&mut rng, d, d, std);
                let wo = (l == 0 && config.factorize_first_value)
                    .then(|| gaussian_matrix(&mut rng, d, d, std));
                let ff = match ff {
                    FfKind::Mlp { hidden } => FeedForward::Mlp {
                        u_in: gaussian_matrix(&mut rng, *hidden, d, std),
                        u_out: gaussian_matrix(&mut rng, d, *hidden, std),
                    },
                    FfKind::Linear => FeedForward::Linear {
                        w: gaussian_matrix(&mut rng, d, d, std),
                    },
                    FfKind::None => FeedForward::None,
                };
                LayerWeights { wqk, wv, wo, ff }
            })
            .collect();
        Ok(TransformerWeights {
            config,
            w_e: emb.w_e,
            w_u: emb.w_u,
            pos: emb.pos.expect("positional rows"),
            layers,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    /// Sets every learnable matrix to zero.
    pub fn zero_learnable(&mut self) {
        for (_, m) in self.learnable_mut() {
            m.as_mut_slice().fill(0.0);
        }
    }

    /// Applies layer `l`'s feed-forward map to a single vector.
    pub fn ff_apply(&self, l: usize, x: &[f64]) -> Result<Option<Vec<f64>>> {
        Ok(match &self.layers[l].ff {
            FeedForward::Mlp { u_in, u_out } => {
                let mut z = u_in.matvec(x)?;
                z.iter_mut().for_each(|v| *v = v.max(0.0));
                Some(u_out.matvec(&z)?)
            }
            FeedForward::Linear { w } => Some(w.matvec(x)?),
            FeedForward::None => None,
        })
    }

    /// Value map of layer `l` (`W_V`, or `W_O·W_V` when factorised).
    pub fn value_apply(&self, l: usize, x: &[f64]) -> Result<Vec<f64>> {
        let u = self.layers[l].wv.matvec(x)?;
        match &self.layers[l].wo {
            Some(wo) => Ok(wo.matvec(&u)?),
            None => Ok(u),
        }
    }

    fn embed_into(&self, z: &[Token], out: &mut [f64]) {
        let d = self.d();
        for (t, tok) in z.iter().enumerate() {
            let row = &mut out[t * d..(t + 1) * d];
            row.copy_from_slice(self.w_e.row(*tok));
            axpy(1.0, self.pos.row(t), row);
        }
    }

    /// Batched forward pass with everything backprop needs.
    pub fn forward_chunk(&self, seqs: &[&[Token]]) -> Result<ChunkTrace> {
        let (d, t) = (self.d(), self.config.t);
        for z in seqs {
            check_tokens(z, self.vocab(), Some(t))?;
        }
        let b = seqs.len();
        let mut x0 = vec![0.0; b * t * d];
        for (i, z) in seqs.iter().enumerate() {
            self.embed_into(z, &mut x0[i * t * d..(i + 1) * t * d]);
        }
        let depth = self.depth();
        let mut full: Vec<FullLayerTrace> = Vec::with_capacity(depth - 1);
        for l in 0..depth - 1 {
            let tr = {
                let input: &[f64] = if l == 0 { &x0 } else { &full[l - 1].out };
                full_layer_forward(&self.layers[l], input, b, t, d)
            };
            full.push(tr);
        }
        let last_in = if depth == 1 {
            &x0
        } else {
            &full[depth - 2].out
        };
        let last = query_layer_forward(&self.layers[depth - 1], last_in, b, t, d);
        let v = self.vocab();
        let mut logits = vec![0.0; b * v];
        gemm(
            b,
            d,
            v,
            1.0,
            &last.out,
            false,
            self.w_u.as_slice(),
            true,
            0.0,
            &mut logits,
        );
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite("transformer forward").into());
        }
        Ok(ChunkTrace {
            b,
            t,
            d,
            x0,
            full,
            last,
            logits,
        })
    }

    /// Logits at every position, computing the final layer densely. Used for
    /// causality checks and attention maps away from the query position.
    pub fn forward_all_positions(&self, z: &[Token]) -> Result<(Matrix, Vec<Matrix>)> {
        let (d, t) = (self.d(), self.config.t);
        check_tokens(z, self.vocab(), Some(t))?;
        let mut x = vec![0.0; t * d];
        self.embed_into(z, &mut x);
        let mut attn = Vec::new();
        for lw in &self.layers {
            let tr = full_layer_forward(lw, &x, 1, t, d);
            attn.push(Matrix::from_vec(t, t, tr.attn.clone())?);
            x = tr.out;
        }
        let v = self.vocab();
        let mut logits = vec![0.0; t * v];
        gemm(
            t,
            d,
            v,
            1.0,
            &x,
            false,
            self.w_u.as_slice(),
            true,
            0.0,
            &mut logits,
        );
        Ok((Matrix::from_vec(t, v, logits)?, attn))
    }
}

/// Feed-forward activations kept for backprop.
#[derive(Clone, Debug)]
pub enum FfTrace {
    Mlp {
        z: Vec<f64>,
        a: Vec<f64>,
        hidden: usize,
    },
    Linear,
    None,
}

/// Layer evaluated at every position of every sequence.
#[derive(Clone, Debug)]
pub struct FullLayerTrace {
    /// `X·W_QK`, row t is `x_tᵀ W_QK`.
    pub y: Vec<f64>,
    /// Causal attention, `b` blocks of `t×t` (zero above the diagonal).
    pub attn: Vec<f64>,
    /// `X·W_Vᵀ` when the value is factorised.
    pub u: Option<Vec<f64>>,
    /// Value rows `W x_s`.
    pub v: Vec<f64>,
    pub r: Vec<f64>,
    pub ff: FfTrace,
    pub out: Vec<f64>,
}

/// Layer evaluated only at the final (query) position.
#[derive(Clone, Debug)]
pub struct QueryLayerTrace {
    pub xq: Vec<f64>,
    pub yq: Vec<f64>,
    /// `b×t` attention rows of the query.
    pub attn: Vec<f64>,
    pub c: Vec<f64>,
    pub u: Option<Vec<f64>>,
    pub r: Vec<f64>,
    pub ff: FfTrace,
    pub out: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ChunkTrace {
    pub b: usize,
    pub t: usize,
    pub d: usize,
    pub x0: Vec<f64>,
    pub full: Vec<FullLayerTrace>,
    pub last: QueryLayerTrace,
    /// `b×(N+1)` final-position logits.
    pub logits: Vec<f64>,
}

/// Single-sequence trace.
pub type ActivationTrace = ChunkTrace;

impl ChunkTrace {
    /// Input of layer `l` (0-based), `b·t×d`.
    pub fn layer_input(&self, l: usize) -> &[f64] {
        if l == 0 {
            &self.x0
        } else {
            &self.full[l - 1].out
        }
    }

    /// Query-position attention row of layer `l` for sequence `i`.
    pub fn attention_row(&self, l: usize, i: usize) -> Vec<f64> {
        let t = self.t;
        if l == self.full.len() {
            self.last.attn[i * t..(i + 1) * t].to_vec()
        } else {
            let off = i * t * t + (t - 1) * t;
            self.full[l].attn[off..off + t].to_vec()
        }
    }

    pub fn logits_of(&self, i: usize) -> &[f64] {
        let v = self.logits.len() / self.b;
        &self.logits[i * v..(i + 1) * v]
    }
}

fn ff_forward(ff: &FeedForward, r: &[f64], rows: usize, d: usize, out: &mut [f64]) -> FfTrace {
    match ff {
        FeedForward::Mlp { u_in, u_out } => {
            let h = u_in.rows();
            let mut z = vec![0.0; rows * h];
            gemm(
                rows,
                d,
                h,
                1.0,
                r,
                false,
                u_in.as_slice(),
                true,
                0.0,
                &mut z,
            );
            let a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            gemm(rows, h, d, 1.0, &a, false, u_out.as_slice(), true, 1.0, out);
            FfTrace::Mlp { z, a, hidden: h }
        }
        FeedForward::Linear { w } => {
            gemm(rows, d, d, 1.0, r, false, w.as_slice(), true, 1.0, out);
            FfTrace::Linear
        }
        FeedForward::None => FfTrace::None,
    }
}

/// Value rows for `rows` inputs: `V = X W_Vᵀ` or `V = (X W_Vᵀ) W_Oᵀ`.
fn value_rows(lw: &LayerWeights, x: &[f64], rows: usize, d: usize) -> (Option<Vec<f64>>, Vec<f64>) {
    let mut first = vec![0.0; rows * d];
    gemm(
        rows,
        d,
        d,
        1.0,
        x,
        false,
        lw.wv.as_slice(),
        true,
        0.0,
        &mut first,
    );
    match &lw.wo {
        None => (None, first),
        Some(wo) => {
            let mut v = vec![0.0; rows * d];
            gemm(
                rows,
                d,
                d,
                1.0,
                &first,
                false,
                wo.as_slice(),
                true,
                0.0,
                &mut v,
            );
            (Some(first), v)
        }
    }
}

pub(crate) fn full_layer_forward(
    lw: &LayerWeights,
    x: &[f64],
    b: usize,
    t: usize,
    d: usize,
) -> FullLayerTrace {
    let bt = b * t;
    let mut y = vec![0.0; bt * d];
    gemm(
        bt,
        d,
        d,
        1.0,
        x,
        false,
        lw.wqk.as_slice(),
        false,
        0.0,
        &mut y,
    );
    let (u, v) = value_rows(lw, x, bt, d);
    let mut attn = vec![0.0; b * t * t];
    let mut r = x.to_vec();
    for i in 0..b {
        let xo = i * t * d;
        let ao = i * t * t;
        let a = &mut attn[ao..ao + t * t];
        gemm(
            t,
            d,
            t,
            1.0,
            &y[xo..xo + t * d],
            false,
            &x[xo..xo + t * d],
            true,
            0.0,
            a,
        );
        for row in 0..t {
            let ar = &mut a[row * t..(row + 1) * t];
            softmax_in_place(&mut ar[..=row]);
            ar[row + 1..].fill(0.0);
        }
        gemm(
            t,
            t,
            d,
            1.0,
            a,
            false,
            &v[xo..xo + t * d],
            false,
            1.0,
            &mut r[xo..xo + t * d],
        );
    }
    let mut out = r.clone();
    let ff = ff_forward(&lw.ff, &r, bt, d, &mut out);
    FullLayerTrace {
        y,
        attn,
        u,
        v,
        r,
        ff,
        out,
    }
}

pub(crate) fn query_layer_forward(
    lw: &LayerWeights,
    x: &[f64],
    b: usize,
    t: usize,
    d: usize,
) -> QueryLayerTrace {
    let mut xq = vec![0.0; b * d];
    for i in 0..b {
        let src = (i * t + t - 1) * d;
        xq[i * d..(i + 1) * d].copy_from_slice(&x[src..src + d]);
    }
    let mut yq = vec![0.0; b * d];
    gemm(
        b,
        d,
        d,
        1.0,
        &xq,
        false,
        lw.wqk.as_slice(),
        false,
        0.0,
        &mut yq,
    );
    let mut attn = vec![0.0; b * t];
    let mut c = vec![0.0; b * d];
    for i in 0..b {
        let xs = &x[i * t * d..(i + 1) * t * d];
        let a = &mut attn[i * t..(i + 1) * t];
        gemm(
            t,
            d,
            1,
            1.0,
            xs,
            false,
            &yq[i * d..(i + 1) * d],
            false,
            0.0,
            a,
        );
        softmax_in_place(a);
        gemm(
            1,
            t,
            d,
            1.0,
            a,
            false,
            xs,
            false,
            0.0,
            &mut c[i * d..(i + 1) * d],
        );
    }
    let (u, h) = value_rows(lw, &c, b, d);
    let mut r = xq.clone();
    axpy(1.0, &h, &mut r);
    let mut out = r.clone();
    let ff = ff_forward(&lw.ff, &r, b, d, &mut out);
    QueryLayerTrace {
        xq,
        yq,
        attn,
        c,
        u,
        r,
        ff,
        out,
    }
}

/// Logits and trace for one sequence.
pub fn forward_two_layer(
    w: &TransformerWeights,
    z: &[Token],
) -> Result<(Vec<f64>, ActivationTrace)> {
    let tr = w.forward_chunk(&[z])?;
    Ok((tr.logits.clone(), tr))
}

fn layer_names(l: usize, lw: &LayerWeights) -> Vec<String> {
    let p = format!("layer{}", l + 1);
    let mut names = vec![format!("{p}.wqk"), format!("{p}.wv")];
    if lw.wo.is_some() {
        names.push(format!("{p}.wo"));
    }
    match lw.ff {
        FeedForward::Mlp { .. } => {
            names.push(format!("{p}.ff.u_in"));
            names.push(format!("{p}.ff.u_out"));
        }
        FeedForward::Linear { .. } => names.push(format!("{p}.ff.w")),
        FeedForward::None => {}
    }
    names
}

impl LayerWeights {
    fn mats(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.wqk, &self.wv];
        if let Some(wo) = &self.wo {
            v.push(wo);
        }
        match &self.ff {
            FeedForward::Mlp { u_in, u_out } => {
                v.push(u_in);
                v.push(u_out);
            }
            FeedForward::Linear { w } => v.push(w),
            FeedForward::None => {}
        }
        v
    }

    fn mats_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.wqk, &mut self.wv];
        if let Some(wo) = &mut self.wo {
            v.push(wo);
        }
        match &mut self.ff {
            FeedForward::Mlp { u_in, u_out } => {
                v.push(u_in);
                v.push(u_out);
            }
            FeedForward::Linear { w } => v.push(w),
            FeedForward::None => {}
        }
        v
    }
}

impl NamedWeights for TransformerWeights {
    fn learnable(&self) -> Vec<(String, &Matrix)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, lw)| layer_names(l, lw).into_iter().zip(lw.mats()))
            .collect()
    }

    fn learnable_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let names: Vec<Vec<String>> = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, lw)| layer_names(l, lw))
            .collect();
        self.layers
            .iter_mut()
            .zip(names)
            .flat_map(|(lw, n)| n.into_iter().zip(lw.mats_mut()))
            .collect()
    }

    fn frozen(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("embed.w_e".into(), &self.w_e),
            ("embed.w_u".into(), &self.w_u),
            ("embed.pos".into(), &self.pos),
        ]
    }
}

impl Model for TransformerWeights {
    fn n(&self) -> usize {
        self.config.n
    }

    fn context(&self) -> Option<usize> {
        Some(self.config.t)
    }

    fn logits_batch(&self, seqs: &[&[Token]]) -> Result<Vec<Vec<f64>>> {
        let tr = self.forward_chunk(seqs)?;
        Ok((0..tr.b).map(|i| tr.logits_of(i).to_vec()).collect())
    }
}

// ---------------------------------------------------------------------------
// Simplified one-layer model
// ---------------------------------------------------------------------------

/// `x_t = W_E(z_t) + W̃_E(z_{t−1})`, `ξ = W_U·attn(x) + W_U·W_F·x_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplifiedWeights {
    pub n: usize,
    pub d: usize,
    pub w_e: Matrix,
    pub w_e_prev: Matrix,
    pub w_u: Matrix,
    pub wqk: Matrix,
    pub wv: Matrix,
    pub wf: Matrix,
    pub seed: u64,
}

impl SimplifiedWeights {
    /// Frozen embeddings drawn per `scheme`; learnable matrices at zero.
    pub fn zero_init(n: usize, d: usize, scheme: EmbedScheme, seed: u64) -> Result<Self> {
        let emb = embed_init(d, n, 0, scheme, true, false, seed)?;
        Ok(SimplifiedWeights {
            n,
            d,
            w_e: emb.w_e,
            w_e_prev: emb.w_e_prev.expect("previous-token rows"),
            w_u: emb.w_u,
            wqk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wf: Matrix::zeros(d, d),
            seed,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.wqk.is_zero() && self.wv.is_zero() && self.wf.is_zero()
    }

    /// Row `t` of the input, with position 0 taking a null previous token.
    pub fn input_row(&self, z: &[Token], t: usize, out: &mut [f64]) {
        out.copy_from_slice(self.w_e.row(z[t]));
        if t > 0 {
            axpy(1.0, self.w_e_prev.row(z[t - 1]), out);
        }
    }

    pub fn forward_chunk(&self, seqs: &[&[Token]]) -> Result<SimplifiedTrace> {
        let (d, v) = (self.d, self.n + 1);
        let b = seqs.len();
        let t = seqs.first().map_or(0, |z| z.len());
        for z in seqs {
            check_tokens(z, v, Some(t))?;
        }
        let mut xs = vec![0.0; b * t * d];
        for (i, z) in seqs.iter().enumerate() {
            for s in 0..t {
                let o = (i * t + s) * d;
                self.input_row(z, s, &mut xs[o..o + d]);
            }
        }
        let mut xq = vec![0.0; b * d];
        for i in 0..b {
            let o = (i * t + t - 1) * d;
            xq[i * d..(i + 1) * d].copy_from_slice(&xs[o..o + d]);
        }
        let mut yq = vec![0.0; b * d];
        gemm(
            b,
            d,
            d,
            1.0,
            &xq,
            false,
            self.wqk.as_slice(),
            false,
            0.0,
            &mut yq,
        );
        let mut attn = vec![0.0; b * t];
        let mut c = vec![0.0; b * d];
        for i in 0..b {
            let x = &xs[i * t * d..(i + 1) * t * d];
            let a = &mut attn[i * t..(i + 1) * t];
            gemm(
                t,
                d,
                1,
                1.0,
                x,
                false,
                &yq[i * d..(i + 1) * d],
                false,
                0.0,
                a,
            );
            softmax_in_place(a);
            gemm(
                1,
                t,
                d,
                1.0,
                a,
                false,
                x,
                false,
                0.0,
                &mut c[i * d..(i + 1) * d],
            );
        }
        let mut phi = vec![0.0; b * d];
        gemm(
            b,
            d,
            d,
            1.0,
            &c,
            false,
            self.wv.as_slice(),
            true,
            0.0,
            &mut phi,
        );
        let mut psi = vec![0.0; b * d];
        gemm(
            b,
            d,
            d,
            1.0,
            &xq,
            false,
            self.wf.as_slice(),
            true,
            0.0,
            &mut psi,
        );
        let mut xi_attn = vec![0.0; b * v];
        let mut xi_ff = vec![0.0; b * v];
        gemm(
            b,
            d,
            v,
            1.0,
            &phi,
            false,
            self.w_u.as_slice(),
            true,
            0.0,
            &mut xi_attn,
        );
        gemm(
            b,
            d,
            v,
            1.0,
            &psi,
            false,
            self.w_u.as_slice(),
            true,
            0.0,
            &mut xi_ff,
        );
        if xi_attn.iter().chain(&xi_ff).any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite("simplified forward").into());
        }
        Ok(SimplifiedTrace {
            b,
            t,
            d,
            xs,
            xq,
            attn,
            c,
            xi_attn,
            xi_ff,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SimplifiedTrace {
    pub b: usize,
    pub t: usize,
    pub d: usize,
    pub xs: Vec<f64>,
    pub xq: Vec<f64>,
    pub attn: Vec<f64>,
    pub c: Vec<f64>,
    pub xi_attn: Vec<f64>,
    pub xi_ff: Vec<f64>,
}

impl SimplifiedTrace {
    pub fn logits_of(&self, i: usize) -> Vec<f64> {
        let v = self.xi_attn.len() / self.b;
        (0..v)
            .map(|k| self.xi_attn[i * v + k] + self.xi_ff[i * v + k])
            .collect()
    }
}

/// `(ξ_attn, ξ_ff)` for one sequence.
pub fn forward_simplified(w: &SimplifiedWeights, z: &[Token]) -> Result<(Vec<f64>, Vec<f64>)> {
    let tr = w.forward_chunk(&[z])?;
    Ok((tr.xi_attn, tr.xi_ff))
}

impl NamedWeights for SimplifiedWeights {
    fn learnable(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("wqk".into(), &self.wqk),
            ("wv".into(), &self.wv),
            ("wf".into(), &self.wf),
        ]
    }

    fn learnable_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("wqk".into(), &mut self.wqk),
            ("wv".into(), &mut self.wv),
            ("wf".into(), &mut self.wf),
        ]
    }

    fn frozen(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("embed.w_e".into(), &self.w_e),
            ("embed.w_e_prev".into(), &self.w_e_prev),
            ("embed.w_u".into(), &self.w_u),
        ]
    }
}

impl Model for SimplifiedWeights {
    fn n(&self) -> usize {
        self.n
    }

    fn context(&self) -> Option<usize> {
        None
    }

    fn logits_batch(&self, seqs: &[&[Token]]) -> Result<Vec<Vec<f64>>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let tr = self.forward_chunk(seqs)?;
        Ok((0..tr.b).map(|i| tr.logits_of(i)).collect())
    }
}

pub fn seq_refs(batch: &[TokenSequence]) -> Vec<&[Token]> {
    batch.iter().map(|s| s.z.as_slice()).collect()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch: String,
    pub d: usize,
    pub n: usize,
    pub t: usize,
    pub ffkind: Vec<FfKind>,
    pub seed: u64,
    pub step: u64,
    pub config: TransformerConfig,
}

/// Writes `manifest.json` and `weights.bin` into `dir`.
pub fn save_checkpoint(dir: &Path, w: &TransformerWeights, step: u64) -> Result<()> {
    let err = |e: std::io::Error| NetError::Checkpoint(e.to_string());
    std::fs::create_dir_all(dir).map_err(err)?;
    let manifest = CheckpointManifest {
        arch: "transformer".into(),
        d: w.config.d,
        n: w.config.n,
        t: w.config.t,
        ffkind: w.config.layers.clone(),
        seed: w.config.seed,
        step,
        config: w.config.clone(),
    };
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json).map_err(err)?;
    let mut f = BufWriter::new(File::create(dir.join("weights.bin")).map_err(err)?);
    for (name, m) in w.frozen().into_iter().chain(w.learnable()) {
        linalg::write_matrix(&mut f, &name, m)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(TransformerWeights, CheckpointManifest)> {
    let err = |e: std::io::Error| NetError::Checkpoint(format!("{}: {e}", dir.display()));
    let text = std::fs::read_to_string(dir.join("manifest.json")).map_err(err)?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| NetError::Checkpoint(format!("manifest: {e}")))?;
    let mut w = TransformerWeights::init(manifest.config.clone())?;
    let mut r = BufReader::new(File::open(dir.join("weights.bin")).map_err(err)?);
    while let Some((name, m)) = linalg::read_matrix(&mut r)? {
        let slot: &mut Matrix = match name.as_str() {
            "embed.w_e" => &mut w.w_e,
            "embed.w_u" => &mut w.w_u,
            "embed.pos" => &mut w.pos,
            other => w.matrix_mut(other)?,
        };
        if slot.shape() != m.shape() {
            return Err(NetError::Checkpoint(format!("shape mismatch for {name}")));
        }
        *slot = m;
    }
    Ok((w, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_batch, TaskKind, TaskSpec};

    /// Straight-line evaluator written independently of the batched code:
    /// every layer at every position with explicit loops.
    fn naive_logits(w: &TransformerWeights, z: &[Token]) -> Vec<Vec<f64>> {
        let (d, t) = (w.d(), z.len());
        let mv = |m: &Matrix, x: &[f64]| -> Vec<f64> {
            (0..m.rows())
                .map(|i| (0..m.cols()).map(|j| m.get(i, j) * x[j]).sum())
                .collect()
        };
        let mut x: Vec<Vec<f64>> = (0..t)
            .map(|s| {
                (0..d)
                    .map(|k| w.w_e.get(z[s], k) + w.pos.get(s, k))
                    .collect()
            })
            .collect();
        for lw in &w.layers {
            let mut next = Vec::new();
            for ti in 0..t {
                let q = &x[ti];
                let scores: Vec<f64> = (0..=ti).map(|s| dot(q, &mv(&lw.wqk, &x[s]))).collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let zsum: f64 = e.iter().sum();
                let mut h = vec![0.0; d];
                for s in 0..=ti {
                    let mut vs = mv(&lw.wv, &x[s]);
                    if let Some(wo) = &lw.wo {
                        vs = mv(wo, &vs);
                    }
                    for k in 0..d {
                        h[k] += e[s] / zsum * vs[k];
                    }
                }
                let r: Vec<f64> = (0..d).map(|k| q[k] + h[k]).collect();
                let f = match &lw.ff {
                    FeedForward::Mlp { u_in, u_out } => {
                        let a: Vec<f64> = mv(u_in, &r).into_iter().map(|v| v.max(0.0)).collect();
                        mv(u_out, &a)
                    }
                    FeedForward::Linear { w } => mv(w, &r),
                    FeedForward::None => vec![0.0; d],
                };
                next.push((0..d).map(|k| r[k] + f[k]).collect());
            }
            x = next;
        }
        x.iter().map(|xt| mv(&w.w_u, xt)).collect()
    }

    fn seqs(n: usize, t: usize, count: usize) -> Vec<TokenSequence> {
        let spec = TaskSpec::uniform(n, vec![0], 0.3, t).unwrap();
        generate_batch(&spec, TaskKind::Recall, 3, 99, 0, count).unwrap()
    }

    fn model(ff: FfKind, layers: usize, factor: bool) -> TransformerWeights {
        let mut cfg = TransformerConfig::two_layer(8, 24, 12, ff, 5);
        cfg.layers = vec![ff; layers];
        cfg.factorize_first_value = factor;
        cfg.init_std = Some(0.4);
        TransformerWeights::init(cfg).unwrap()
    }

    #[test]
    fn matches_naive_evaluator() {
        for (ff, layers, factor) in [
            (FfKind::Mlp { hidden: 32 }, 2, false),
            (FfKind::Linear, 2, false),
            (FfKind::None, 2, true),
            (FfKind::Mlp { hidden: 16 }, 3, true),
            (FfKind::Linear, 1, false),
        ] {
            let w = model(ff, layers, factor);
            let batch = seqs(8, 12, 4);
            let refs = seq_refs(&batch);
            let tr = w.forward_chunk(&refs).unwrap();
            for (i, s) in batch.iter().enumerate() {
                let naive = naive_logits(&w, &s.z);
                for (a, b) in tr.logits_of(i).iter().zip(&naive[11]) {
                    assert!((a - b).abs() < 1e-10, "{ff:?}: {a} vs {b}");
                }
                let (all, _) = w.forward_all_positions(&s.z).unwrap();
                for t in 0..12 {
                    for (a, b) in all.row(t).iter().zip(&naive[t]) {
                        assert!((a - b).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform_attention() {
        let mut w = model(FfKind::Mlp { hidden: 16 }, 2, false);
        w.zero_learnable();
        let s = &seqs(8, 12, 1)[0];
        let (logits, tr) = forward_two_layer(&w, &s.z).unwrap();
        for l in 0..2 {
            for p in tr.attention_row(l, 0) {
                assert!((p - 1.0 / 12.0).abs() < 1e-15);
            }
        }
        let (_, attn) = w.forward_all_positions(&s.z).unwrap();
        for t in 0..12 {
            assert!((attn[0].get(t, 0) - 1.0 / (t + 1) as f64).abs() < 1e-15);
        }
        let x: Vec<f64> = (0..24)
            .map(|k| w.w_e.get(s.z[11], k) + w.pos.get(11, k))
            .collect();
        let want = w.w_u.matvec(&x).unwrap();
        for (a, b) in logits.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn none_equals_mlp_with_zero_output() {
        let mlp = model(FfKind::Mlp { hidden: 16 }, 2, false);
        let mut zeroed = mlp.clone();
        for lw in zeroed.layers.iter_mut() {
            if let FeedForward::Mlp { u_out, .. } = &mut lw.ff {
                u_out.as_mut_slice().fill(0.0);
            }
        }
        let mut none = mlp.clone();
        for lw in none.layers.iter_mut() {
            lw.ff = FeedForward::None;
        }
        let batch = seqs(8, 12, 3);
        let refs = seq_refs(&batch);
        assert_eq!(
            zeroed.forward_chunk(&refs).unwrap().logits,
            none.forward_chunk(&refs).unwrap().logits
        );
    }

    #[test]
    fn rejects_bad_tokens() {
        let w = model(FfKind::Linear, 2, false);
        let mut z = seqs(8, 12, 1)[0].z.clone();
        z[3] = 9;
        assert!(matches!(
            forward_two_layer(&w, &z),
            Err(NetError::TokenOutOfRange { .. })
        ));
        assert!(matches!(
            forward_two_layer(&w, &z[..5]),
            Err(NetError::Length { .. })
        ));
    }

    #[test]
    fn simplified_examples() {
        let n = 6;
        let mut w =
            SimplifiedWeights::zero_init(n, 3 * (n + 1), EmbedScheme::Orthonormal, 1).unwrap();
        let s = &seqs(n, 10, 1)[0];
        let (a, f) = forward_simplified(&w, &s.z).unwrap();
        assert!(a.iter().chain(&f).all(|x| *x == 0.0));
        // W_F = s·W_U(τ) W_E(q)ᵀ.
        let q = 0;
        w.wf = Matrix::outer(w.w_u.row(n), w.w_e.row(q))
            .unwrap()
            .scale(2.5)
            .unwrap();
        let (_, f) = forward_simplified(&w, &s.z).unwrap();
        let margin = f[n] - f[..n].iter().cloned().fold(f64::MIN, f64::max);
        assert!((margin - 2.5).abs() < 1e-10);
    }

    #[test]
    fn simplified_matches_naive() {
        let n = 5;
        let d = 20;
        let mut w = SimplifiedWeights::zero_init(n, d, EmbedScheme::default(), 4).unwrap();
        let mut rng = stream_rng(1, 2, 3);
        w.wqk = gaussian_matrix(&mut rng, d, d, 0.5);
        w.wv = gaussian_matrix(&mut rng, d, d, 0.5);
        w.wf = gaussian_matrix(&mut rng, d, d, 0.5);
        let batch = seqs(n, 9, 3);
        let tr = w.forward_chunk(&seq_refs(&batch)).unwrap();
        for (i, s) in batch.iter().enumerate() {
            let x: Vec<Vec<f64>> = (0..9)
                .map(|t| {
                    (0..d)
                        .map(|k| {
                            w.w_e.get(s.z[t], k)
                                + if t > 0 {
                                    w.w_e_prev.get(s.z[t - 1], k)
                                } else {
                                    0.0
                                }
                        })
                        .collect()
                })
                .collect();
            let xq = &x[8];
            let sc: Vec<f64> = x.iter().map(|xt| w.wqk.bilinear(xq, xt)).collect();
            let p = linalg::softmax(&sc);
            let mut phi = vec![0.0; d];
            for t in 0..9 {
                axpy(p[t], &w.wv.matvec(&x[t]).unwrap(), &mut phi);
            }
            let xa = w.w_u.matvec(&phi).unwrap();
            let xf = w.w_u.matvec(&w.wf.matvec(xq).unwrap()).unwrap();
            let got = tr.logits_of(i);
            for k in 0..=n {
                assert!((got[k] - xa[k] - xf[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn embeddings() {
        let e = embed_init(40, 5, 8, EmbedScheme::Orthonormal, true, true, 3).unwrap();
        let all: Vec<&[f64]> = (0..6)
            .map(|i| e.w_e.row(i))
            .chain((0..6).map(|i| e.w_u.row(i)))
            .chain((0..6).map(|i| e.w_e_prev.as_ref().unwrap().row(i)))
            .chain((0..8).map(|i| e.pos.as_ref().unwrap().row(i)))
            .collect();
        for (i, a) in all.iter().enumerate() {
            for (j, b) in all.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(a, b) - want).abs() < 1e-10);
            }
        }
        assert!(matches!(
            embed_init(20, 5, 8, EmbedScheme::Orthonormal, true, true, 3),
            Err(NetError::OrthonormalInfeasible {
                required: 26,
                d: 20
            })
        ));
        let g = embed_init(256, 99, 0, EmbedScheme::default(), false, false, 1).unwrap();
        for i in 0..100 {
            let nrm = dot(g.w_e.row(i), g.w_e.row(i)).sqrt();
            assert!((nrm - 1.0).abs() < 0.2);
        }
        let g = embed_init(4096, 99, 0, EmbedScheme::default(), false, false, 2).unwrap();
        for i in 0..100 {
            assert!(dot(g.w_e.row(i), g.w_u.row(i)).abs() < 0.1);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let w = model(FfKind::Mlp { hidden: 16 }, 2, true);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &w, 17).unwrap();
        let (r, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m.step, 17);
        assert_eq!(r, w);
    }
}
