//! Test-time measurements: clean-stream evaluation, attention maps and
//! bilinear memory probes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{domain, generate_batch, DataError, TaskKind, TaskSpec, Token, TokenSequence};
use crate::linalg::{cross_entropy, dot, softmax, LinalgError, Matrix};
use crate::nets::{FeedForward, Model, NetError, SimplifiedWeights, TransformerWeights};
use crate::par;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("unsupported probe: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

const EVAL_CHUNK: usize = 32;

/// Architectures that expose the internals the figures look at.
pub trait Inspect: Model + Sync {
    /// `W_U·F(W_E(token))` through the last feed-forward map, if any.
    fn ff_last_logits(&self, token: Token) -> Result<Option<Vec<f64>>>;
    /// Query-position attention row of every layer.
    fn query_attention(&self, z: &[Token]) -> Result<Vec<Vec<f64>>>;
    fn probe(&self, kind: ProbeKind) -> Result<Matrix>;
    fn depth(&self) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// `⟨F_L(W_E(i)), W_U(j)⟩`.
    Ff2Noise,
    /// `⟨W_V^L W_E(i), W_U(j)⟩`.
    Wv2Signal,
    /// `W_E(j)ᵀ W_QK^L W_V^1 W_E(i)`: query token `j` against a key whose
    /// previous token `i` was copied by the first layer.
    QkMatch,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 3] = [
        ProbeKind::Ff2Noise,
        ProbeKind::Wv2Signal,
        ProbeKind::QkMatch,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ProbeKind::Ff2Noise => "ff2_noise",
            ProbeKind::Wv2Signal => "wv2_signal",
            ProbeKind::QkMatch => "qk_match",
        }
    }
}

impl std::str::FromStr for ProbeKind {
    type Err = MetricsError;
    fn from_str(s: &str) -> Result<Self> {
        ProbeKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                MetricsError::Invalid(format!(
                    "unknown probe '{s}' (ff2_noise, wv2_signal, qk_match)"
                ))
            })
    }
}

fn grid(v: usize, mut f: impl FnMut(usize) -> Result<Vec<f64>>) -> Result<Matrix> {
    let rows = (0..v).map(&mut f).collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_rows(&rows)?)
}

impl Inspect for TransformerWeights {
    fn ff_last_logits(&self, token: Token) -> Result<Option<Vec<f64>>> {
        let l = self.depth() - 1;
        match self.ff_apply(l, self.w_e.row(token))? {
            Some(f) => Ok(Some(self.w_u.matvec(&f)?)),
            None => Ok(None),
        }
    }

    fn query_attention(&self, z: &[Token]) -> Result<Vec<Vec<f64>>> {
        let tr = self.forward_chunk(&[z])?;
        Ok((0..self.depth()).map(|l| tr.attention_row(l, 0)).collect())
    }

    fn probe(&self, kind: ProbeKind) -> Result<Matrix> {
        let v = self.config.n + 1;
        let last = self.depth() - 1;
        match kind {
            ProbeKind::Ff2Noise => {
                if matches!(self.layers[last].ff, FeedForward::None) {
                    return Err(MetricsError::Unsupported(
                        "ff2_noise on a model without a last feed-forward".into(),
                    ));
                }
                grid(v, |i| Ok(self.ff_last_logits(i)?.expect("checked above")))
            }
            ProbeKind::Wv2Signal => grid(v, |i| {
                Ok(self.w_u.matvec(&self.value_apply(last, self.w_e.row(i))?)?)
            }),
            ProbeKind::QkMatch => {
                if self.depth() < 2 {
                    return Err(MetricsError::Unsupported(
                        "qk_match needs at least two layers".into(),
                    ));
                }
                let wqk = &self.layers[last].wqk;
                grid(v, |i| {
                    let key = wqk.matvec(&self.value_apply(0, self.w_e.row(i))?)?;
                    Ok((0..v).map(|j| dot(self.w_e.row(j), &key)).collect())
                })
            }
        }
    }

    fn depth(&self) -> usize {
        self.layers.len()
    }
}

impl Inspect for SimplifiedWeights {
    fn ff_last_logits(&self, token: Token) -> Result<Option<Vec<f64>>> {
        Ok(Some(
            self.w_u.matvec(&self.wf.matvec(self.w_e.row(token))?)?,
        ))
    }

    fn query_attention(&self, z: &[Token]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![self.forward_chunk(&[z])?.attn])
    }

    fn probe(&self, kind: ProbeKind) -> Result<Matrix> {
        let v = self.n + 1;
        match kind {
            ProbeKind::Ff2Noise => {
                grid(v, |i| Ok(self.ff_last_logits(i)?.expect("always present")))
            }
            ProbeKind::Wv2Signal => grid(v, |i| {
                Ok(self.w_u.matvec(&self.wv.matvec(self.w_e.row(i))?)?)
            }),
            ProbeKind::QkMatch => grid(v, |i| {
                let key = self.wqk.matvec(self.w_e_prev.row(i))?;
                Ok((0..v).map(|j| dot(self.w_e.row(j), &key)).collect())
            }),
        }
    }

    fn depth(&self) -> usize {
        1
    }
}

/// Clean-stream test metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pure_label_loss: f64,
    pub p_correct: f64,
    pub p_noise: f64,
    /// Rate of `argmax = ȳ`.
    pub accuracy: f64,
    /// Rate of `argmax = τ`.
    pub noise_argmax: f64,
    /// `p_correct` restricted to sequences where an earlier trigger exposes `ȳ`.
    pub p_correct_recallable: f64,
    pub recallable: usize,
    pub ff2_margin: Option<f64>,
    pub samples: usize,
}

pub use crate::oracles::margin;

/// Whether some trigger before position `T−2` has its successor in context.
pub fn recallable(z: &[Token], spec: &TaskSpec) -> bool {
    z.len() >= 3 && z[..z.len() - 2].iter().any(|t| spec.is_trigger(*t))
}

#[derive(Default, Clone, Copy)]
struct Acc {
    loss: f64,
    pc: f64,
    pn: f64,
    acc: f64,
    noise: f64,
    pc_rec: f64,
    rec: usize,
}

/// Metrics on the given sequences; labels are scored against `ȳ`.
pub fn evaluate_on<M: Inspect>(
    model: &M,
    spec: &TaskSpec,
    seqs: &[TokenSequence],
) -> Result<EvalReport> {
    if seqs.is_empty() {
        return Err(MetricsError::Invalid("no test sequences".into()));
    }
    let tau = spec.tau();
    let chunks = seqs.len().div_ceil(EVAL_CHUNK);
    let parts = par::map_ordered(chunks, |c| -> Result<Acc> {
        let chunk = &seqs[c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(seqs.len())];
        let refs: Vec<&[Token]> = chunk.iter().map(|s| s.z.as_slice()).collect();
        let logits = model.logits_batch(&refs)?;
        let mut a = Acc::default();
        for (l, s) in logits.iter().zip(chunk) {
            let p = softmax(l);
            a.loss += cross_entropy(l, s.ybar).0;
            a.pc += p[s.ybar];
            a.pn += p[tau];
            let arg = argmax(&p);
            a.acc += (arg == s.ybar) as u8 as f64;
            a.noise += (arg == tau) as u8 as f64;
            if recallable(&s.z, spec) {
                a.rec += 1;
                a.pc_rec += p[s.ybar];
            }
        }
        Ok(a)
    });
    let mut t = Acc::default();
    for p in parts {
        let p = p?;
        t.loss += p.loss;
        t.pc += p.pc;
        t.pn += p.pn;
        t.acc += p.acc;
        t.noise += p.noise;
        t.pc_rec += p.pc_rec;
        t.rec += p.rec;
    }
    let m = seqs.len() as f64;
    let q = spec.triggers[0];
    let ff2_margin = model.ff_last_logits(q)?.map(|l| margin(&l));
    Ok(EvalReport {
        pure_label_loss: t.loss / m,
        p_correct: t.pc / m,
        p_noise: t.pn / m,
        accuracy: t.acc / m,
        noise_argmax: t.noise / m,
        p_correct_recallable: if t.rec > 0 {
            t.pc_rec / t.rec as f64
        } else {
            f64::NAN
        },
        recallable: t.rec,
        ff2_margin,
        samples: seqs.len(),
    })
}

/// Draws `m_test` fresh clean (`α = 0`) sequences and evaluates on them.
pub fn evaluate<M: Inspect>(
    model: &M,
    spec: &TaskSpec,
    kind: TaskKind,
    m_test: usize,
    seed: u64,
) -> Result<EvalReport> {
    if m_test == 0 {
        return Err(MetricsError::Invalid("m_test must be positive".into()));
    }
    let clean = spec.with_alpha(0.0);
    let seqs = generate_batch(&clean, kind, seed, domain::EVAL, 0, m_test)?;
    evaluate_on(model, &clean, &seqs)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// One query-position attention row with per-position token labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnMap {
    /// 1-based layer index.
    pub layer: usize,
    pub query: usize,
    pub scores: Vec<f64>,
    /// `z_{t−1}`, absent at the first position.
    pub prev: Vec<Option<Token>>,
    pub cur: Vec<Token>,
}

pub fn attention_map<M: Inspect>(model: &M, z: &[Token], layer: usize) -> Result<AttnMap> {
    if layer == 0 || layer > model.depth() {
        return Err(MetricsError::Invalid(format!(
            "layer {layer} outside 1..={}",
            model.depth()
        )));
    }
    let scores = model.query_attention(z)?.swap_remove(layer - 1);
    Ok(AttnMap {
        layer,
        query: z.len() - 1,
        scores,
        prev: (0..z.len())
            .map(|t| t.checked_sub(1).map(|s| z[s]))
            .collect(),
        cur: z.to_vec(),
    })
}

impl AttnMap {
    /// Attention mass on positions with a trigger before them, split into
    /// those holding `ybar` and those holding `tau`.
    pub fn trigger_mass(&self, spec: &TaskSpec, ybar: Token) -> (f64, f64) {
        let tau = spec.tau();
        let (mut correct, mut noise) = (0.0, 0.0);
        for (t, s) in self.scores.iter().enumerate() {
            if self.prev[t].is_some_and(|p| spec.is_trigger(p)) {
                if self.cur[t] == ybar {
                    correct += s;
                } else if self.cur[t] == tau {
                    noise += s;
                }
            }
        }
        (correct, noise)
    }
}

/// Fraction of non-noise rows `i` whose diagonal entry beats every other
/// entry of the row.
pub fn diagonal_dominance(grid: &Matrix, rows: impl IntoIterator<Item = usize>) -> f64 {
    let mut total = 0usize;
    let mut hit = 0usize;
    for i in rows {
        total += 1;
        let r = grid.row(i);
        if r.iter().enumerate().all(|(j, x)| j == i || *x < r[i]) {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{EmbedScheme, FfKind, TransformerConfig};

    fn zero_model() -> TransformerWeights {
        let mut w = TransformerWeights::init(TransformerConfig::two_layer(
            8,
            32,
            12,
            FfKind::Mlp { hidden: 16 },
            1,
        ))
        .unwrap();
        w.zero_learnable();
        w
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin(&[0.0; 5]), 0.0);
        assert_eq!(margin(&[0.0, 0.0, 0.0, 2.5]), 2.5);
        assert_eq!(margin(&[1.0, 3.0, 2.0]), -1.0);
    }

    #[test]
    fn zero_model_attention_and_probes() {
        let w = zero_model();
        let spec = TaskSpec::uniform(8, vec![0], 0.5, 12).unwrap();
        let s = generate_batch(&spec, TaskKind::Recall, 1, domain::EVAL, 0, 1)
            .unwrap()
            .remove(0);
        for layer in 1..=2 {
            let m = attention_map(&w, &s.z, layer).unwrap();
            assert!(m.scores.iter().all(|x| (x - 1.0 / 12.0).abs() < 1e-12));
            assert!((m.scores.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert_eq!(m.prev[0], None);
            assert_eq!(m.prev[5], Some(s.z[4]));
        }
        assert!(attention_map(&w, &s.z, 3).is_err());
        for p in ProbeKind::ALL {
            assert!(w.probe(p).unwrap().is_zero(), "{}", p.name());
        }
        let mut none = TransformerConfig::two_layer(8, 32, 12, FfKind::None, 1);
        none.layers = vec![FfKind::Mlp { hidden: 4 }, FfKind::None];
        let w2 = TransformerWeights::init(none).unwrap();
        assert!(matches!(
            w2.probe(ProbeKind::Ff2Noise),
            Err(MetricsError::Unsupported(_))
        ));
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let w = TransformerWeights::init(TransformerConfig::two_layer(
            16,
            64,
            16,
            FfKind::Mlp { hidden: 64 },
            5,
        ))
        .unwrap();
        let spec = TaskSpec::uniform(16, vec![0], 0.5, 16).unwrap();
        let m = 400;
        let r = evaluate(&w, &spec, TaskKind::Recall, m, 3).unwrap();
        assert!(
            (r.p_correct - 1.0 / 17.0).abs() < 3.0 / (m as f64).sqrt(),
            "{r:?}"
        );
        assert!(r.pure_label_loss > 0.0 && (0.0..=1.0).contains(&r.p_noise));
        assert_eq!(r.samples, m);
        assert_eq!(evaluate(&w, &spec, TaskKind::Recall, m, 3).unwrap(), r);
    }

    #[test]
    fn simplified_probes_read_constructed_weights() {
        let n = 6;
        let mut w =
            SimplifiedWeights::zero_init(n, 3 * (n + 1), EmbedScheme::Orthonormal, 2).unwrap();
        w.wv = Matrix::from_fn(w.d, w.d, |_, _| 0.0).unwrap();
        for k in 0..n {
            w.wv =
                w.wv.add(&Matrix::outer(w.w_u.row(k), w.w_e.row(k)).unwrap())
                    .unwrap();
        }
        let g = w.probe(ProbeKind::Wv2Signal).unwrap();
        assert_eq!(diagonal_dominance(&g, 0..n), 1.0);
        w.wqk = Matrix::outer(w.w_e.row(1), w.w_e_prev.row(1))
            .unwrap()
            .scale(2.0)
            .unwrap();
        let qk = w.probe(ProbeKind::QkMatch).unwrap();
        assert!((qk.get(1, 1) - 2.0).abs() < 1e-10);
        assert!(qk.as_slice().iter().filter(|x| x.abs() > 1e-10).count() == 1);
    }

    #[test]
    fn recallable_needs_an_earlier_trigger() {
        let spec = TaskSpec::uniform(8, vec![0], 0.5, 6).unwrap();
        assert!(recallable(&[3, 0, 5, 2, 1, 0], &spec));
        assert!(!recallable(&[3, 4, 5, 2, 0, 0], &spec));
    }
}
