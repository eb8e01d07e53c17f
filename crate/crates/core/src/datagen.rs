//! Samplers for noisy in-context recall, the synthetic IOI task and the
//! noisy associative memory, plus seeded per-index random streams.
//!
//! Tokens are 0-based: `0..n` is the ordinary vocabulary and the noise
//! token τ is `n`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Token = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("context length {t} too short for three non-overlapping trigger pairs (need T >= 12)")]
    IoiInfeasible { t: usize },
    #[error("could not place IOI trigger indices after {0} rejections")]
    IoiRejection(usize),
    #[error("empty corpus")]
    EmptyCorpus,
}

/// Domains for [`stream_rng`], keeping unrelated random draws independent.
pub mod domain {
    pub const TRAIN: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const INIT: u64 = 3;
    pub const EMBED: u64 = 4;
    pub const ORACLE: u64 = 5;
    pub const PROBE: u64 = 6;
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent ChaCha stream for `(seed, domain, index)`.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(domain)));
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenDist {
    Uniform,
    Estimated { pi_u: Vec<f64>, pi_b: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n: usize,
    pub triggers: Vec<Token>,
    pub alpha: f64,
    pub t: usize,
    pub dist: TokenDist,
}

impl TaskSpec {
    pub fn uniform(
        n: usize,
        triggers: Vec<Token>,
        alpha: f64,
        t: usize,
    ) -> Result<Self, DataError> {
        let s = TaskSpec {
            n,
            triggers,
            alpha,
            t,
            dist: TokenDist::Uniform,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn from_bigrams(
        model: &BigramModel,
        triggers: Vec<Token>,
        alpha: f64,
        t: usize,
    ) -> Result<Self, DataError> {
        let s = TaskSpec {
            n: model.charset.len(),
            triggers,
            alpha,
            t,
            dist: TokenDist::Estimated {
                pi_u: model.pi_u.clone(),
                pi_b: model.pi_b.clone(),
            },
        };
        s.validate()?;
        Ok(s)
    }

    pub fn tau(&self) -> Token {
        self.n
    }

    pub fn vocab(&self) -> usize {
        self.n + 1
    }

    pub fn is_trigger(&self, z: Token) -> bool {
        self.triggers.contains(&z)
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        TaskSpec {
            alpha,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.n == 0 {
            return bad("N must be positive".into());
        }
        if self.t < 2 {
            return bad(format!("T = {} < 2", self.t));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha = {} outside [0, 1]", self.alpha));
        }
        if self.triggers.is_empty() {
            return bad("trigger set is empty".into());
        }
        if let Some(q) = self.triggers.iter().find(|q| **q >= self.n) {
            return bad(format!("trigger {q} outside [0, {})", self.n));
        }
        let mut sorted = self.triggers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.triggers.len() {
            return bad("duplicate triggers".into());
        }
        if let TokenDist::Estimated { pi_u, pi_b } = &self.dist {
            let stochastic = |p: &[f64]| {
                p.len() == self.n
                    && p.iter().all(|x| *x >= 0.0)
                    && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-12
            };
            if !stochastic(pi_u) {
                return bad("pi_u is not a distribution over [N]".into());
            }
            if pi_b.len() != self.n || !pi_b.iter().all(|r| stochastic(r)) {
                return bad("pi_b is not row-stochastic over [N]x[N]".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub z: Vec<Token>,
    pub y: Token,
    pub ybar: Token,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoiSequence {
    pub z: Vec<Token>,
    pub y: Token,
    pub ybar: Token,
    pub ydist: Token,
    /// 0-based trigger positions.
    pub positions: [usize; 3],
}

impl IoiSequence {
    pub fn as_recall(&self) -> TokenSequence {
        TokenSequence {
            z: self.z.clone(),
            y: self.y,
            ybar: self.ybar,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssocSample {
    pub x: Token,
    pub y: Token,
}

/// Sampler with distribution tables prepared once per spec.
pub struct RecallSampler<'a> {
    spec: &'a TaskSpec,
    tables: Option<(WeightedIndex<f64>, Vec<WeightedIndex<f64>>)>,
}

impl<'a> RecallSampler<'a> {
    pub fn new(spec: &'a TaskSpec) -> Result<Self, DataError> {
        spec.validate()?;
        let tables = match &spec.dist {
            TokenDist::Uniform => None,
            TokenDist::Estimated { pi_u, pi_b } => {
                let wi = |p: &[f64]| {
                    WeightedIndex::new(p).map_err(|e| DataError::InvalidSpec(e.to_string()))
                };
                Some((
                    wi(pi_u)?,
                    pi_b.iter().map(|r| wi(r)).collect::<Result<_, _>>()?,
                ))
            }
        };
        Ok(RecallSampler { spec, tables })
    }

    fn unigram<R: Rng>(&self, rng: &mut R) -> Token {
        match &self.tables {
            None => rng.random_range(0..self.spec.n),
            Some((u, _)) => u.sample(rng),
        }
    }

    /// π_b(·|prev); the noise token has no bigram row and falls back to π_u.
    fn bigram<R: Rng>(&self, prev: Token, rng: &mut R) -> Token {
        if prev >= self.spec.n {
            return self.unigram(rng);
        }
        match &self.tables {
            None => rng.random_range(0..self.spec.n),
            Some((_, b)) => b[prev].sample(rng),
        }
    }

    fn noisy<R: Rng>(&self, ybar: Token, rng: &mut R) -> Token {
        if rng.random::<f64>() < self.spec.alpha {
            self.spec.tau()
        } else {
            ybar
        }
    }

    /// `len` tokens of the context chain for a fixed `ybar`, without the
    /// final forced trigger.
    pub fn chain<R: Rng>(&self, ybar: Token, len: usize, rng: &mut R) -> Vec<Token> {
        let mut z = Vec::with_capacity(len + 1);
        if len == 0 {
            return z;
        }
        z.push(self.unigram(rng));
        for pos in 1..len {
            let prev = z[pos - 1];
            let next = if self.spec.is_trigger(prev) {
                self.noisy(ybar, rng)
            } else {
                self.bigram(prev, rng)
            };
            z.push(next);
        }
        z
    }

    pub fn recall<R: Rng>(&self, rng: &mut R) -> TokenSequence {
        let spec = self.spec;
        let ybar = rng.random_range(0..spec.n);
        self.recall_given(ybar, rng)
    }

    /// A recall sequence conditioned on the correct token.
    pub fn recall_given<R: Rng>(&self, ybar: Token, rng: &mut R) -> TokenSequence {
        let spec = self.spec;
        let mut z = self.chain(ybar, spec.t - 1, rng);
        z.push(spec.triggers[rng.random_range(0..spec.triggers.len())]);
        let y = self.noisy(ybar, rng);
        TokenSequence { z, y, ybar }
    }

    pub fn ioi<R: Rng>(&self, rng: &mut R) -> Result<IoiSequence, DataError> {
        let spec = self.spec;
        let t = spec.t;
        if t < 12 {
            return Err(DataError::IoiInfeasible { t });
        }
        let q = spec.triggers[0];
        let non_trigger: Vec<Token> = (0..spec.n).filter(|k| !spec.is_trigger(*k)).collect();
        if non_trigger.len() < 2 {
            return Err(DataError::InvalidSpec(
                "IOI needs two non-trigger tokens".into(),
            ));
        }
        let ybar = non_trigger[rng.random_range(0..non_trigger.len())];
        let ydist = loop {
            let c = non_trigger[rng.random_range(0..non_trigger.len())];
            if c != ybar {
                break c;
            }
        };
        let mut positions = None;
        for _ in 0..10_000 {
            // 1-based indices in [T-2] become 0-based 0..T-2.
            let mut p = [0usize; 3];
            for slot in p.iter_mut() {
                *slot = rng.random_range(0..t - 2);
            }
            p.sort_unstable();
            if p[1] >= p[0] + 2 && p[2] >= p[1] + 2 {
                positions = Some(p);
                break;
            }
        }
        let positions = positions.ok_or(DataError::IoiRejection(10_000))?;
        let correct_slot = rng.random_range(0..3);
        let fill: Vec<Token> = (0..=spec.n).filter(|k| !spec.is_trigger(*k)).collect();
        let mut z = vec![usize::MAX; t];
        for (k, &i) in positions.iter().enumerate() {
            z[i] = q;
            z[i + 1] = if k == correct_slot { ybar } else { ydist };
        }
        z[t - 1] = q;
        for slot in z.iter_mut() {
            if *slot == usize::MAX {
                *slot = fill[rng.random_range(0..fill.len())];
            }
        }
        let y = self.noisy(ybar, rng);
        Ok(IoiSequence {
            z,
            y,
            ybar,
            ydist,
            positions,
        })
    }
}

pub fn sample_recall<R: Rng>(spec: &TaskSpec, rng: &mut R) -> Result<TokenSequence, DataError> {
    Ok(RecallSampler::new(spec)?.recall(rng))
}

pub fn sample_ioi<R: Rng>(spec: &TaskSpec, rng: &mut R) -> Result<IoiSequence, DataError> {
    RecallSampler::new(spec)?.ioi(rng)
}

/// Input uniform on `0..n`; output `x` or the common token `n`.
pub fn sample_assoc<R: Rng>(n: usize, alpha: f64, rng: &mut R) -> AssocSample {
    let x = rng.random_range(0..n);
    let y = if rng.random::<f64>() < alpha { n } else { x };
    AssocSample { x, y }
}

/// Which sequence family a batch draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Recall,
    Ioi,
}

/// Sequences `start..start+count`, each from its own index stream.
pub fn generate_batch(
    spec: &TaskSpec,
    kind: TaskKind,
    seed: u64,
    domain: u64,
    start: u64,
    count: usize,
) -> Result<Vec<TokenSequence>, DataError> {
    let sampler = RecallSampler::new(spec)?;
    (0..count as u64)
        .map(|i| {
            let mut rng = stream_rng(seed, domain, start + i);
            match kind {
                TaskKind::Recall => Ok(sampler.recall(&mut rng)),
                TaskKind::Ioi => sampler.ioi(&mut rng).map(|s| s.as_recall()),
            }
        })
        .collect()
}

/// Character-level unigram/bigram statistics with add-one smoothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BigramModel {
    pub charset: Vec<u8>,
    pub pi_u: Vec<f64>,
    pub pi_b: Vec<Vec<f64>>,
}

fn normalise(counts: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    let mut p: Vec<f64> = counts.iter().map(|c| c / total).collect();
    // Push the rounding residue onto the largest entry so rows sum to 1.
    let resid = 1.0 - p.iter().sum::<f64>();
    let imax = (0..p.len())
        .max_by(|a, b| p[*a].total_cmp(&p[*b]))
        .unwrap_or(0);
    p[imax] += resid;
    p
}

pub fn estimate_bigrams(text: &[u8]) -> Result<BigramModel, DataError> {
    if text.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let mut seen = [false; 256];
    for b in text {
        seen[*b as usize] = true;
    }
    let charset: Vec<u8> = (0..=255u8).filter(|b| seen[*b as usize]).collect();
    let mut id = [usize::MAX; 256];
    for (i, b) in charset.iter().enumerate() {
        id[*b as usize] = i;
    }
    let n = charset.len();
    let mut uni = vec![1.0; n];
    let mut bi = vec![vec![1.0; n]; n];
    for b in text {
        uni[id[*b as usize]] += 1.0;
    }
    for w in text.windows(2) {
        bi[id[w[0] as usize]][id[w[1] as usize]] += 1.0;
    }
    Ok(BigramModel {
        charset,
        pi_u: normalise(&uni),
        pi_b: bi.iter().map(|r| normalise(r)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(i: u64) -> ChaCha8Rng {
        stream_rng(42, domain::TRAIN, i)
    }

    #[test]
    fn alpha_extremes() {
        let clean = TaskSpec::uniform(10, vec![3], 0.0, 40).unwrap();
        let noisy = clean.with_alpha(1.0);
        for i in 0..200 {
            let s = sample_recall(&clean, &mut rng(i)).unwrap();
            assert_eq!(s.y, s.ybar);
            assert!(!s.z.contains(&10));
            assert_eq!(*s.z.last().unwrap(), 3);
            assert_eq!(sample_recall(&noisy, &mut rng(i)).unwrap().y, 10);
        }
    }

    #[test]
    fn successor_of_trigger_is_ybar_or_noise() {
        let spec = TaskSpec::uniform(8, vec![1, 2], 0.4, 60).unwrap();
        for i in 0..200 {
            let s = sample_recall(&spec, &mut rng(i)).unwrap();
            assert!(spec.is_trigger(s.z[59]));
            for t in 0..58 {
                if spec.is_trigger(s.z[t]) {
                    assert!(s.z[t + 1] == s.ybar || s.z[t + 1] == 8);
                }
            }
        }
    }

    #[test]
    fn ioi_structure() {
        let spec = TaskSpec::uniform(16, vec![0], 0.0, 32).unwrap();
        for i in 0..10_000 {
            let s = sample_ioi(&spec, &mut rng(i)).unwrap();
            assert_eq!(s.y, s.ybar);
            assert_eq!(s.z.iter().filter(|z| **z == 0).count(), 4);
            let after: Vec<Token> = (0..31)
                .filter(|t| s.z[*t] == 0)
                .map(|t| s.z[t + 1])
                .collect();
            assert_eq!(after.iter().filter(|x| **x == s.ybar).count(), 1);
            assert_eq!(after.iter().filter(|x| **x == s.ydist).count(), 2);
        }
        let short = TaskSpec::uniform(16, vec![0], 0.0, 11).unwrap();
        assert_eq!(
            sample_ioi(&short, &mut rng(0)),
            Err(DataError::IoiInfeasible { t: 11 })
        );
    }

    #[test]
    fn assoc_frequencies() {
        let mut r = rng(0);
        for _ in 0..100 {
            let s = sample_assoc(3, 0.0, &mut r);
            assert_eq!(s.y, s.x);
            assert_eq!(sample_assoc(3, 1.0, &mut r).y, 3);
        }
        let hits = (0..100_000)
            .filter(|_| sample_assoc(3, 0.3, &mut r).y == 3)
            .count();
        assert!((hits as f64 / 1e5 - 0.3).abs() < 0.01);
    }

    #[test]
    fn bigram_estimates() {
        let m = estimate_bigrams(b"ababab").unwrap();
        assert_eq!(m.charset, b"ab".to_vec());
        assert!(m.pi_b[0][1] > 0.7 && m.pi_b[1][0] > 0.6);
        let single = estimate_bigrams(b"zzzz").unwrap();
        assert_eq!(single.pi_u, vec![1.0]);
        let corpus = b"To be, or not to be, that is the question:\nWhether 'tis nobler in the mind to suffer";
        let m = estimate_bigrams(corpus).unwrap();
        for row in &m.pi_b {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        assert!(estimate_bigrams(b"").is_err());
        let spec = TaskSpec::from_bigrams(&m, vec![0], 0.2, 30).unwrap();
        let s = sample_recall(&spec, &mut rng(1)).unwrap();
        assert!(s.z.iter().all(|z| *z <= spec.n));
    }

    #[test]
    fn streams_are_deterministic_and_order_free() {
        let spec = TaskSpec::uniform(20, vec![5], 0.3, 30).unwrap();
        let a = generate_batch(&spec, TaskKind::Recall, 7, domain::TRAIN, 0, 50).unwrap();
        let b = generate_batch(&spec, TaskKind::Recall, 7, domain::TRAIN, 25, 25).unwrap();
        assert_eq!(&a[25..], &b[..]);
        let c = generate_batch(&spec, TaskKind::Recall, 8, domain::TRAIN, 0, 50).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(TaskSpec::uniform(5, vec![5], 0.1, 10).is_err());
        assert!(TaskSpec::uniform(5, vec![], 0.1, 10).is_err());
        assert!(TaskSpec::uniform(5, vec![1], 1.5, 10).is_err());
        assert!(TaskSpec::uniform(5, vec![1], 0.1, 1).is_err());
    }
}
