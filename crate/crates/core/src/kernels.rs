//! Gram matrices for the Gaussian-process prior over per-class task scores.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_JITTER: f64 = 1e-6;
pub const MAX_JITTER: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Kernel {
    /// Plain inner product on raw features.
    Dot,
    /// Squared-exponential on z-scored features.
    Rbf { lengthscale: f64 },
}

pub fn dot_product_kernel(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

pub fn rbf_kernel(a: &[f64], b: &[f64], lengthscale: f64) -> Result<f64> {
    if !(lengthscale > 0.0) {
        return Err(Error::NonPositiveLengthscale(lengthscale));
    }
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((-sq / (2.0 * lengthscale * lengthscale)).exp())
}

/// A symmetric Gram matrix with jitter on the diagonal and its cached
/// Cholesky factor.
#[derive(Clone, Debug)]
pub struct KernelMatrix {
    values: DMatrix<f64>,
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
}

impl KernelMatrix {
    /// Wraps a precomputed symmetric matrix (jitter already included).
    pub fn from_values(values: DMatrix<f64>, jitter: f64) -> Result<Self> {
        let chol = Cholesky::new(values.clone()).ok_or(Error::CholeskyFailure { jitter })?;
        Ok(KernelMatrix {
            values,
            jitter,
            chol,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }
}

fn standardize(features: &DMatrix<f64>) -> DMatrix<f64> {
    let n = features.nrows() as f64;
    let mut out = features.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        col.apply(|v| *v = (*v - mean) / sd);
    }
    out
}

fn raw_gram(features: &DMatrix<f64>, kernel: &Kernel) -> Result<DMatrix<f64>> {
    match *kernel {
        Kernel::Dot => Ok(features * features.transpose()),
        Kernel::Rbf { lengthscale } => {
            if !(lengthscale > 0.0) {
                return Err(Error::NonPositiveLengthscale(lengthscale));
            }
            let z = standardize(features);
            let n = z.nrows();
            let mut k = DMatrix::zeros(n, n);
            for i in 0..n {
                k[(i, i)] = 1.0;
                for j in 0..i {
                    let sq = (z.row(i) - z.row(j)).norm_squared();
                    let v = (-sq / (2.0 * lengthscale * lengthscale)).exp();
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            Ok(k)
        }
    }
}

/// Gram matrix plus `jitter * I`, failing if the Cholesky factorization does.
pub fn build_gram(features: &DMatrix<f64>, kernel: &Kernel, jitter: f64) -> Result<KernelMatrix> {
    if features.nrows() == 0 {
        return Err(Error::Validation("no tasks to build a Gram matrix over".into()));
    }
    let mut k = raw_gram(features, kernel)?;
    // symmetrize exactly: F F^T can differ in the last ulp across the diagonal
    let n = k.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (k[(i, j)] + k[(j, i)]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += jitter;
    }
    KernelMatrix::from_values(k, jitter)
}

/// Starts at `DEFAULT_JITTER` and doubles up to `MAX_JITTER` until the
/// factorization succeeds.
pub fn build_gram_escalating(features: &DMatrix<f64>, kernel: &Kernel) -> Result<KernelMatrix> {
    let mut jitter = DEFAULT_JITTER;
    loop {
        match build_gram(features, kernel, jitter) {
            Err(Error::CholeskyFailure { .. }) if jitter * 2.0 <= MAX_JITTER => jitter *= 2.0,
            other => return other,
        }
    }
}

/// Per-class prior covariances. One shared matrix unless configured otherwise.
#[derive(Clone, Debug)]
pub enum ClassGrams {
    Shared(KernelMatrix),
    PerClass(Vec<KernelMatrix>),
}

impl ClassGrams {
    pub fn for_class(&self, c: usize) -> &KernelMatrix {
        match self {
            ClassGrams::Shared(k) => k,
            ClassGrams::PerClass(ks) => &ks[c],
        }
    }

    pub fn size(&self) -> usize {
        self.for_class(0).size()
    }
}
