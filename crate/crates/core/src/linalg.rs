//! Dense row-major matrices, softmax and cross-entropy kernels, and a
//! one-sided Jacobi SVD.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("svd did not converge for a {rows}x{cols} matrix after {sweeps} sweeps")]
    SvdNoConvergence {
        rows: usize,
        cols: usize,
        sweeps: usize,
    },
    #[error("rank {k} out of range for a {rows}x{cols} matrix")]
    RankOutOfRange { k: usize, rows: usize, cols: usize },
    #[error("matrix io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix of finite `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite(op))
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        check_finite(values, "diag")?;
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        Ok(m)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        check_finite(&data, "from_vec")?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(LinalgError::Shape("ragged rows".into()));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::from_vec(rows, cols, data)
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Result<Self> {
        Matrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must keep entries finite;
    /// `validate` re-checks the invariant.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn validate(&self) -> Result<()> {
        check_finite(&self.data, "validate")
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LinalgError::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            1.0,
            &self.data,
            false,
            &other.data,
            false,
            0.0,
            &mut out.data,
        );
        check_finite(&out.data, "matmul")?;
        Ok(out)
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(LinalgError::Shape(format!(
                "matvec {}x{} by {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let out: Vec<f64> = (0..self.rows).map(|i| dot(self.row(i), v)).collect();
        check_finite(&out, "matvec")?;
        Ok(out)
    }

    /// `selfᵀ · v`.
    pub fn t_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(LinalgError::Shape(format!(
                "t_matvec {}x{} by {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            axpy(*vi, self.row(i), &mut out);
        }
        check_finite(&out, "t_matvec")?;
        Ok(out)
    }

    fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LinalgError::Shape(format!(
                "{op} {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        check_finite(&data, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Result<Matrix> {
        let data: Vec<f64> = self.data.iter().map(|a| a * s).collect();
        check_finite(&data, "scale")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// In-place `self += s · other`.
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::Shape("add_scaled".into()));
        }
        axpy(s, &other.data, &mut self.data);
        check_finite(&self.data, "add_scaled")
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn frobenius_dot(&self, other: &Matrix) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|x| *x == 0.0)
    }

    /// Bilinear form `uᵀ · self · v`.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> f64 {
        (0..self.rows).map(|i| u[i] * dot(self.row(i), v)).sum()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `C ← alpha·op(A)·op(B) + beta·C` on row-major slices, with op(A) of
/// shape m×k and op(B) of shape k×n. A transposed operand is stored as
/// its untransposed matrix (k×m for A, n×k for B).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
        "gemm buffer too small"
    );
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: strides and dimensions were checked against buffer lengths above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy of `logits` against `label`; returns the loss and the
/// logit gradient `softmax(logits) − onehot(label)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    assert!(
        label < logits.len(),
        "label {label} outside vocabulary of {}",
        logits.len()
    );
    let loss = log_sum_exp(logits) - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (loss, grad)
}

/// Cross-entropy against a target distribution; gradient `softmax − target`.
pub fn cross_entropy_soft(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), target.len());
    let lse = log_sum_exp(logits);
    let loss = target
        .iter()
        .zip(logits)
        .map(|(p, l)| if *p > 0.0 { p * (lse - l) } else { 0.0 })
        .sum();
    let mut grad = softmax(logits);
    for (g, p) in grad.iter_mut().zip(target) {
        *g -= p;
    }
    (loss, grad)
}

/// Thin singular value decomposition `A = U·diag(S)·Vᵀ`.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn reconstruct(&self, k: usize) -> Matrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        let mut out = Matrix::zeros(m, n);
        for r in 0..k.min(self.s.len()) {
            let s = self.s[r];
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let ui = self.u.get(i, r) * s;
                if ui == 0.0 {
                    continue;
                }
                let row = out.row_mut(i);
                for (j, o) in row.iter_mut().enumerate() {
                    *o += ui * self.v.get(j, r);
                }
            }
        }
        out
    }
}

pub const SVD_MAX_SWEEPS: usize = 100;
pub const SVD_TOL: f64 = 1e-12;

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(LinalgError::Shape("svd of an empty matrix".into()));
    }
    a.validate()?;
    if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose(), (a.rows(), a.cols()))?;
        return Ok(SvdFactors {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    svd_tall(a, (a.rows(), a.cols()))
}

fn svd_tall(a: &Matrix, shape: (usize, usize)) -> Result<SvdFactors> {
    let (m, n) = (a.rows(), a.cols());
    // Columns stored contiguously.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut converged = n == 1;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= SVD_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(LinalgError::SvdNoConvergence {
            rows: shape.0,
            cols: shape.1,
            sweeps: SVD_MAX_SWEEPS,
        });
    }
    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        norms[j]
            .partial_cmp(&norms[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let smax = norms[order[0]];
    let negligible = smax * f64::EPSILON * m as f64;

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut vmat = Matrix::zeros(n, n);
    let mut pending = Vec::new();
    for (r, &j) in order.iter().enumerate() {
        for i in 0..n {
            vmat.set(i, r, vcols[j][i]);
        }
        if norms[j] > negligible && norms[j] > 0.0 {
            s.push(norms[j]);
            ucols.push(cols[j].iter().map(|x| x / norms[j]).collect());
        } else {
            s.push(0.0);
            ucols.push(Vec::new());
            pending.push(r);
        }
    }
    for r in pending {
        let filled: Vec<Vec<f64>> = ucols.iter().filter(|c| !c.is_empty()).cloned().collect();
        ucols[r] = orthonormal_complement(&filled, m);
    }
    let mut umat = Matrix::zeros(m, n);
    for (r, c) in ucols.iter().enumerate() {
        for i in 0..m {
            umat.set(i, r, c[i]);
        }
    }
    Ok(SvdFactors {
        u: umat,
        s,
        v: vmat,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// A unit vector orthogonal to every vector in `basis`, chosen from the
/// standard basis by largest residual and orthogonalised twice.
fn orthonormal_complement(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best = vec![0.0; m];
    let mut best_norm = -1.0;
    for e in 0..m {
        let mut v = vec![0.0; m];
        v[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let p = dot(&v, b);
                axpy(-p, b, &mut v);
            }
        }
        let nrm = dot(&v, &v).sqrt();
        if nrm > best_norm + 1e-12 {
            best_norm = nrm;
            best = v;
        }
    }
    best.iter().map(|x| x / best_norm).collect()
}

/// Best rank-`k` approximation `Σ_{i<k} Sᵢ uᵢ vᵢᵀ`.
pub fn low_rank(a: &Matrix, k: usize) -> Result<Matrix> {
    let r = a.rows().min(a.cols());
    if k > r {
        return Err(LinalgError::RankOutOfRange {
            k,
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if k == 0 {
        return Ok(Matrix::zeros(a.rows(), a.cols()));
    }
    if k == r {
        return Ok(a.clone());
    }
    Ok(svd(a)?.reconstruct(k))
}

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    rows: usize,
    cols: usize,
    name: String,
}

/// Writes a JSON header line followed by little-endian `f64` data.
pub fn write_matrix<W: Write>(w: &mut W, name: &str, m: &Matrix) -> Result<()> {
    let header = serde_json::to_string(&MatrixHeader {
        rows: m.rows,
        cols: m.cols,
        name: name.to_string(),
    })
    .map_err(|e| LinalgError::Io(e.to_string()))?;
    let io = |e: std::io::Error| LinalgError::Io(e.to_string());
    w.write_all(header.as_bytes()).map_err(io)?;
    w.write_all(b"\n").map_err(io)?;
    let mut buf = Vec::with_capacity(m.data.len() * 8);
    for x in &m.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf).map_err(io)
}

/// Reads one matrix written by [`write_matrix`]; `None` at end of stream.
pub fn read_matrix<R: BufRead>(r: &mut R) -> Result<Option<(String, Matrix)>> {
    let io = |e: std::io::Error| LinalgError::Io(e.to_string());
    let mut line = String::new();
    if r.read_line(&mut line).map_err(io)? == 0 {
        return Ok(None);
    }
    let h: MatrixHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| LinalgError::Io(format!("bad header: {e}")))?;
    let mut bytes = vec![0u8; h.rows * h.cols * 8];
    r.read_exact(&mut bytes).map_err(io)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Some((h.name, Matrix::from_vec(h.rows, h.cols, data)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|l| a.get(i, l) * b.get(l, j)).sum()
        })
        .unwrap()
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let a = random(5, 7, 1);
        let b = random(7, 4, 2);
        let want = naive_matmul(&a, &b);
        let at = a.transpose();
        let bt = b.transpose();
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut c = vec![0.0; 20];
            gemm(
                5,
                7,
                4,
                1.0,
                aa.as_slice(),
                ta,
                bb.as_slice(),
                tb,
                0.0,
                &mut c,
            );
            let got = Matrix::from_vec(5, 4, c).unwrap();
            assert!(rel_err(&got, &want) < 1e-14, "{ta} {tb}");
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        let big = Matrix::from_vec(1, 1, vec![1e308]).unwrap();
        assert!(big.scale(10.0).is_err());
    }

    #[test]
    fn svd_identity() {
        let f = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(f.s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn svd_diagonal() {
        let f = svd(&Matrix::diag(&[3.0, 2.0, 1.0]).unwrap()).unwrap();
        assert_eq!(f.s, vec![3.0, 2.0, 1.0]);
        for r in 0..3 {
            assert!((f.u.get(r, r).abs() - 1.0).abs() < 1e-15);
            assert!((f.v.get(r, r).abs() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn svd_energy_matches_frobenius() {
        let a = random(8, 5, 7);
        let f = svd(&a).unwrap();
        let direct: f64 = a.as_slice().iter().map(|x| x * x).sum();
        let energy: f64 = f.s.iter().map(|s| s * s).sum();
        assert!((direct - energy).abs() < 1e-10);
    }

    #[test]
    fn svd_wide_and_rank_deficient() {
        let u = random(6, 2, 3);
        let v = random(2, 9, 4);
        let a = u.matmul(&v).unwrap();
        let f = svd(&a).unwrap();
        assert_eq!(f.s.len(), 6);
        assert!(rel_err(&f.reconstruct(6), &a) < 1e-10);
        assert!(f.s[2] < 1e-12);
        let utu = f.u.transpose().matmul(&f.u).unwrap();
        assert!(utu.sub(&Matrix::identity(6)).unwrap().frobenius_norm() < 1e-10);
    }

    #[test]
    fn svd_zero_matrix() {
        let f = svd(&Matrix::zeros(4, 3)).unwrap();
        assert_eq!(f.s, vec![0.0; 3]);
        let utu = f.u.transpose().matmul(&f.u).unwrap();
        assert!(utu.sub(&Matrix::identity(3)).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn low_rank_examples() {
        let a = random(6, 4, 11);
        assert!(rel_err(&low_rank(&a, 4).unwrap(), &a) < 1e-10);
        assert!(low_rank(&a, 0).unwrap().is_zero());
        assert!(low_rank(&a, 5).is_err());
        let d = Matrix::diag(&[3.0, 2.0, 1.0]).unwrap();
        let t = low_rank(&d, 2).unwrap();
        assert!(
            t.sub(&Matrix::diag(&[3.0, 2.0, 0.0]).unwrap())
                .unwrap()
                .frobenius_norm()
                < 1e-14
        );
    }

    #[test]
    fn softmax_examples() {
        assert!(softmax(&[0.7; 5]).iter().all(|p| (p - 0.2).abs() < 1e-15));
        let l = [1f64.ln() - 3f64.ln(), 2f64.ln() - 3f64.ln(), 0.0];
        let p = softmax(&l);
        for (i, pi) in p.iter().enumerate() {
            assert!((pi - (i + 1) as f64 / 6.0).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, b) in softmax(&x).iter().zip(&e) {
            assert!((a - b / z).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let n = 9;
        let (loss, g) = cross_entropy(&vec![0.0; n + 1], 3);
        assert!((loss - ((n + 1) as f64).ln()).abs() < 1e-14);
        for (k, gk) in g.iter().enumerate() {
            let want = 1.0 / (n + 1) as f64 - if k == 3 { 1.0 } else { 0.0 };
            assert!((gk - want).abs() < 1e-15);
        }
        let mut l = vec![0.0; 4];
        l[2] = 1e6;
        assert!(cross_entropy(&l, 2).0 < 1e-12);
    }

    #[test]
    fn soft_cross_entropy_reduces_to_hard() {
        let l = [0.3, -1.2, 2.0];
        let (a, ga) = cross_entropy(&l, 1);
        let (b, gb) = cross_entropy_soft(&l, &[0.0, 1.0, 0.0]);
        assert!((a - b).abs() < 1e-15);
        assert_eq!(ga, gb);
    }

    #[test]
    fn serialization_round_trip() {
        let a = random(3, 4, 9);
        let b = random(2, 2, 10);
        let mut buf = Vec::new();
        write_matrix(&mut buf, "a", &a).unwrap();
        write_matrix(&mut buf, "b", &b).unwrap();
        let mut r = std::io::BufReader::new(&buf[..]);
        let (na, ra) = read_matrix(&mut r).unwrap().unwrap();
        let (nb, rb) = read_matrix(&mut r).unwrap().unwrap();
        assert!(read_matrix(&mut r).unwrap().is_none());
        assert_eq!((na.as_str(), nb.as_str()), ("a", "b"));
        assert_eq!(ra, a);
        assert_eq!(rb, b);
    }
}
