//! LASER: replace one weight matrix by its rank-⌊ρ·min(rows, cols)⌋ SVD
//! approximation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{low_rank, LinalgError};
use crate::nets::{NamedWeights, NetError};

#[derive(Debug, Error)]
pub enum LaserError {
    #[error("rho must lie in [0, 1], got {0}")]
    Rho(f64),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaserTarget {
    pub matrix: String,
    pub rho: f64,
}

impl LaserTarget {
    pub fn new(matrix: impl Into<String>, rho: f64) -> Result<Self, LaserError> {
        let t = LaserTarget {
            matrix: matrix.into(),
            rho,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), LaserError> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(LaserError::Rho(self.rho));
        }
        Ok(())
    }
}

/// `⌊ρ·min(rows, cols)⌋`, tolerant of products such as `0.29·100` that land
/// a hair below an integer in binary.
pub fn kept_rank(rho: f64, rows: usize, cols: usize) -> usize {
    let r = rows.min(cols);
    ((rho * r as f64 + 1e-9).floor() as usize).min(r)
}

/// Returns a copy of `weights` with the target matrix truncated.
pub fn apply_laser<M: NamedWeights>(weights: &M, target: &LaserTarget) -> Result<M, LaserError> {
    target.validate()?;
    let mut out = weights.clone();
    let m = out.matrix_mut(&target.matrix)?;
    let k = kept_rank(target.rho, m.rows(), m.cols());
    *m = low_rank(m, k)?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SweepRow<R> {
    pub rho: f64,
    pub rank: usize,
    pub result: Result<R, String>,
}

/// One independently truncated copy per `rho`.
pub fn rank_sweep<M, R, E, F>(
    weights: &M,
    matrix: &str,
    rhos: &[f64],
    mut evaluator: F,
) -> Result<Vec<SweepRow<R>>, LaserError>
where
    M: NamedWeights,
    E: std::fmt::Display,
    F: FnMut(&M) -> Result<R, E>,
{
    let shape =
        weights
            .matrix(matrix)
            .map(|m| m.shape())
            .ok_or_else(|| NetError::UnknownMatrix {
                name: matrix.to_string(),
                available: weights
                    .learnable()
                    .into_iter()
                    .map(|(n, _)| n)
                    .collect::<Vec<_>>()
                    .join(", "),
            })?;
    let mut rows = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let truncated = apply_laser(weights, &LaserTarget::new(matrix, rho)?)?;
        let result = evaluator(&truncated).map_err(|e| e.to_string());
        rows.push(SweepRow {
            rho,
            rank: kept_rank(rho, shape.0, shape.1),
            result,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{FfKind, TransformerConfig, TransformerWeights};

    fn model(ff: FfKind, factorize: bool) -> TransformerWeights {
        let mut cfg = TransformerConfig::two_layer(6, 16, 8, ff, 3);
        cfg.factorize_first_value = factorize;
        TransformerWeights::init(cfg).unwrap()
    }

    #[test]
    fn rho_one_is_identity_and_rho_zero_drops() {
        let w = model(FfKind::Mlp { hidden: 24 }, false);
        let full = apply_laser(&w, &LaserTarget::new("layer2.ff.u_in", 1.0).unwrap()).unwrap();
        let a = w.matrix("layer2.ff.u_in").unwrap();
        let b = full.matrix("layer2.ff.u_in").unwrap();
        assert!(a.sub(b).unwrap().frobenius_norm() <= 1e-10 * a.frobenius_norm());
        let dropped = apply_laser(&w, &LaserTarget::new("layer2.ff.u_in", 0.0).unwrap()).unwrap();
        assert!(dropped.matrix("layer2.ff.u_in").unwrap().is_zero());
        for (name, m) in w.learnable() {
            if name != "layer2.ff.u_in" {
                assert_eq!(
                    m.as_slice(),
                    dropped.matrix(&name).unwrap().as_slice(),
                    "{name} changed"
                );
            }
        }
        for ((_, a), (_, b)) in w.frozen().into_iter().zip(dropped.frozen()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn floor_rule() {
        assert_eq!(kept_rank(0.5, 16, 24), 8);
        assert_eq!(kept_rank(0.01, 16, 64), 0);
        assert_eq!(kept_rank(0.29, 100, 100), 29);
        assert_eq!(kept_rank(1.0, 7, 3), 3);
    }

    #[test]
    fn idempotent() {
        let w = model(FfKind::Linear, false);
        let t = LaserTarget::new("layer1.ff.w", 0.4).unwrap();
        let once = apply_laser(&w, &t).unwrap();
        let twice = apply_laser(&once, &t).unwrap();
        let a = once.matrix("layer1.ff.w").unwrap();
        let b = twice.matrix("layer1.ff.w").unwrap();
        assert!(a.sub(b).unwrap().frobenius_norm() <= 1e-10);
    }

    #[test]
    fn unknown_name_lists_available() {
        let w = model(FfKind::None, true);
        let err = apply_laser(&w, &LaserTarget::new("layer9.wv", 0.5).unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("layer1.wo") && msg.contains("layer2.wqk"),
            "{msg}"
        );
        assert!(LaserTarget::new("layer1.wo", 1.5).is_err());
        assert!(apply_laser(&w, &LaserTarget::new("layer1.wo", 0.0).unwrap()).is_ok());
    }

    #[test]
    fn sweep_rows_are_independent() {
        let w = model(FfKind::Mlp { hidden: 24 }, false);
        let rows = rank_sweep(
            &w,
            "layer2.ff.u_out",
            &[1.0, 0.0, 0.5],
            |m: &TransformerWeights| {
                Ok::<_, String>(m.matrix("layer2.ff.u_out").unwrap().frobenius_norm())
            },
        )
        .unwrap();
        let full = w.matrix("layer2.ff.u_out").unwrap().frobenius_norm();
        assert!((rows[0].result.as_ref().unwrap() - full).abs() < 1e-10);
        assert_eq!(*rows[1].result.as_ref().unwrap(), 0.0);
        assert_eq!(rows[2].rank, 8);
        assert!(rank_sweep(&w, "nope", &[1.0], |_| Ok::<_, String>(0.0)).is_err());
    }
}
