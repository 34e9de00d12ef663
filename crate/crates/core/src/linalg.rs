//! Dense linear algebra used by covariance alignment and the theory checks.
//!
//! Everything here is double precision and row-major. The factorization is
//! the row-oriented Cholesky–Banachiewicz scheme with an optional diagonal
//! regularizer added before the first pivot is taken.

use std::fmt::{self, Write as _};
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Default diagonal regularizer for Cholesky factorizations of covariances.
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Relative tolerance used when checking symmetry of factorization inputs.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive definite (pivot {index} = {pivot:e}); raise epsilon")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("triangular matrix has a zero on the diagonal at {index}")]
    SingularDiagonal { index: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("need at least 2 rows for a covariance, got {0}")]
    TooFewRows(usize),
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LinalgError::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Matrix-vector product `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// Transposed matrix-vector product `selfᵀ · v`.
    pub fn matvec_transposed(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rows != v.len() {
            return Err(LinalgError::DimensionMismatch(format!(
                "({}x{})ᵀ times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn zip_with(&self, other: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|a_ij - a_ji|` over the matrix. Square matrices only.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `‖self − other‖_F / ‖other‖_F`, falling back to the absolute error when
    /// `other` is zero.
    pub fn relative_error(&self, reference: &DenseMatrix) -> Result<f64> {
        let diff = self.sub(reference)?.frobenius_norm();
        let scale = reference.frobenius_norm();
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }

    /// Serializes in the portable text layout: a `rows cols` header, then one
    /// line per row of whitespace separated values. Values use the shortest
    /// representation that parses back to the identical `f64`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write_text(&mut s);
        s
    }

    pub(crate) fn write_text(&self, out: &mut String) {
        let _ = writeln!(out, "{} {}", self.rows, self.cols);
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        Self::read_text(&mut lines)
    }

    /// Reads one matrix from a line iterator, consuming exactly its lines.
    pub(crate) fn read_text<'a, I>(lines: &mut I) -> Result<Self>
    where
        I: Iterator<Item = &'a str>,
    {
        let header = lines
            .next()
            .ok_or_else(|| LinalgError::Parse("missing matrix header".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| LinalgError::Parse(format!("bad header {header:?}: {e}")))?;
        let [rows, cols] = dims[..] else {
            return Err(LinalgError::Parse(format!("bad header {header:?}")));
        };
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| LinalgError::Parse(format!("missing row {r}")))?;
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(
                    tok.parse::<f64>()
                        .map_err(|e| LinalgError::Parse(format!("{tok:?}: {e}")))?,
                );
            }
            if data.len() - before != cols {
                return Err(LinalgError::Parse(format!(
                    "row {r} has {} values, expected {cols}",
                    data.len() - before
                )));
            }
        }
        Self::new(rows, cols, data)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Display for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// A feature (or parameter) vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatVec(Vec<f64>);

impl FeatVec {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self(data))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl From<Vec<f64>> for FeatVec {
    /// Unchecked conversion for values produced by internal arithmetic.
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Index<usize> for FeatVec {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either vector vanishes.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Lower-triangular `L` with `L·Lᵀ = sigma + epsilon·I`.
///
/// The input is symmetrized as `(Σ + Σᵀ)/2` after passing a relative symmetry
/// check, so accumulation-order asymmetry does not leak into the factor.
pub fn cholesky(sigma: &DenseMatrix, epsilon: f64) -> Result<DenseMatrix> {
    if !sigma.is_square() {
        return Err(LinalgError::NotSquare {
            rows: sigma.rows,
            cols: sigma.cols,
        });
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(LinalgError::Parse(format!("invalid epsilon {epsilon}")));
    }
    let n = sigma.rows;
    let asym = sigma.max_asymmetry();
    if asym > SYMMETRY_TOL * sigma.max_abs() {
        return Err(LinalgError::NotSymmetric { asymmetry: asym });
    }

    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let a = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
            let mut s = 0.0;
            for k in 0..j {
                s += l[(i, k)] * l[(j, k)];
            }
            if i == j {
                let pivot = a + epsilon - s;
                if !(pivot > 0.0) || !pivot.is_finite() {
                    return Err(LinalgError::NotPositiveDefinite { index: i, pivot });
                }
                l[(i, i)] = pivot.sqrt();
            } else {
                l[(i, j)] = (a - s) / l[(j, j)];
            }
        }
    }
    Ok(l)
}

fn check_triangular_system(l: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if !l.is_square() {
        return Err(LinalgError::NotSquare {
            rows: l.rows,
            cols: l.cols,
        });
    }
    if l.rows != b.rows {
        return Err(LinalgError::DimensionMismatch(format!(
            "triangular {}x{} against right-hand side with {} rows",
            l.rows, l.cols, b.rows
        )));
    }
    if let Some(index) = (0..l.rows).find(|&i| l[(i, i)] == 0.0) {
        return Err(LinalgError::SingularDiagonal { index });
    }
    Ok(())
}

/// Solves `l·X = b` by forward substitution. Only the lower triangle of `l`
/// is read.
pub fn solve_lower_triangular(l: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_triangular_system(l, b)?;
    let n = l.rows;
    let mut x = b.clone();
    for c in 0..b.cols {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    Ok(x)
}

/// Solves `lᵀ·X = b` by back substitution, with `l` lower triangular.
pub fn solve_lower_transposed(l: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_triangular_system(l, b)?;
    let n = l.rows;
    let mut x = b.clone();
    for c in 0..b.cols {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    Ok(x)
}

/// Two-pass sample mean and unbiased (`N − 1`) covariance.
pub fn sample_covariance(rows: &[FeatVec]) -> Result<(FeatVec, DenseMatrix)> {
    if rows.len() < 2 {
        return Err(LinalgError::TooFewRows(rows.len()));
    }
    let d = rows[0].dim();
    if let Some(bad) = rows.iter().find(|r| r.dim() != d) {
        return Err(LinalgError::DimensionMismatch(format!(
            "row of dim {} among rows of dim {d}",
            bad.dim()
        )));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.as_slice()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut cov = DenseMatrix::zeros(d, d);
    let mut dev = vec![0.0; d];
    for r in rows {
        for ((o, v), m) in dev.iter_mut().zip(r.as_slice()).zip(&mean) {
            *o = v - m;
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += dev[i] * dev[j];
            }
        }
    }
    let denom = n - 1.0;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    if cov.data.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    Ok((FeatVec(mean), cov))
}
