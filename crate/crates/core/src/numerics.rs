//! Diagonal-plus-low-rank covariance algebra.
//!
//! Σ = S K S′ + D with D diagonal. Every operation here costs O(n·m²) or less;
//! no n×n array is ever allocated. Σ⁻¹ is applied through the
//! Sherman–Morrison–Woodbury identity
//!
//! ```text
//! Σ⁻¹ = D⁻¹ − D⁻¹ S (K⁻¹ + S′D⁻¹S)⁻¹ S′ D⁻¹
//! ```
//!
//! and log|Σ| through Sylvester's determinant identity
//! `|Σ| = |D| · |K| · |K⁻¹ + S′D⁻¹S|`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::basis::BasisMatrix;
use crate::error::{Error, PdTarget, Result};

/// Σ = S K S′ + diag(dvec).
#[derive(Debug, Clone)]
pub struct LowRankCov {
    pub s: Arc<BasisMatrix>,
    pub k: DMatrix<f64>,
    pub dvec: DVector<f64>,
}

impl LowRankCov {
    pub fn new(s: Arc<BasisMatrix>, k: DMatrix<f64>, dvec: DVector<f64>) -> Result<Self> {
        let (n, m) = (s.nrows(), s.ncols());
        if k.nrows() != m || k.ncols() != m {
            return Err(Error::DimensionMismatch(format!(
                "K is {}x{}, S has {m} columns",
                k.nrows(),
                k.ncols()
            )));
        }
        if dvec.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "D has {} entries, S has {n} rows",
                dvec.len()
            )));
        }
        if let Some(i) = dvec.iter().position(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::invalid(format!(
                "diagonal entry {i} of D is {} (must be positive)",
                dvec[i]
            )));
        }
        Ok(LowRankCov { s, k, dvec })
    }

    pub fn n(&self) -> usize {
        self.dvec.len()
    }

    pub fn m(&self) -> usize {
        self.k.nrows()
    }
}

/// Lower Cholesky factor with the failing pivot reported.
pub fn cholesky(a: &DMatrix<f64>, target: PdTarget) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "cholesky of a non-square matrix");
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 16.0 * f64::EPSILON * a[(j, j)].abs()) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { target, pivot: j });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves (L L′) X = B given the lower factor L.
pub fn chol_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let y = l
        .solve_lower_triangular(b)
        .expect("Cholesky factor has a zero diagonal");
    l.transpose()
        .solve_upper_triangular(&y)
        .expect("Cholesky factor has a zero diagonal")
}

pub fn chol_solve_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let y = l
        .solve_lower_triangular(b)
        .expect("Cholesky factor has a zero diagonal");
    l.transpose()
        .solve_upper_triangular(&y)
        .expect("Cholesky factor has a zero diagonal")
}

fn log_diag_sum(l: &DMatrix<f64>) -> f64 {
    l.diagonal().iter().map(|d| d.ln()).sum()
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Internal allocations are restricted to n×(small) shapes.
fn skinny(rows: usize, cols: usize, allowed: usize) -> DMatrix<f64> {
    assert!(
        cols <= allowed,
        "refusing to allocate a {rows}x{cols} dense array (limit {allowed} columns)"
    );
    DMatrix::zeros(rows, cols)
}

/// Cholesky factors of K and of K⁻¹ + S′D⁻¹S, shared by inverse-apply and
/// log-determinant.
#[derive(Debug, Clone)]
pub struct CovFactorization {
    s: Arc<BasisMatrix>,
    dvec: DVector<f64>,
    /// chol(K)
    c: DMatrix<f64>,
    /// chol(K⁻¹ + S′D⁻¹S)
    c2: DMatrix<f64>,
    /// S′D⁻¹S
    gram: DMatrix<f64>,
    /// D⁻¹S, n×m
    dinv_s: DMatrix<f64>,
}

/// Factorizes Σ = S K S′ + D.
pub fn factorize(cov: &LowRankCov) -> Result<CovFactorization> {
    let m = cov.m();
    let n = cov.n();
    let c = cholesky(&cov.k, PdTarget::K)?;
    let k_inv = chol_solve(&c, &DMatrix::identity(m, m));
    let dinv = cov.dvec.map(|d| 1.0 / d);
    let gram = cov.s.weighted_gram(&dinv);
    let mut post = k_inv + &gram;
    symmetrize(&mut post);
    let c2 = cholesky(&post, PdTarget::Posterior)?;
    let mut dinv_s = skinny(n, m, m);
    for i in 0..n {
        let (cols, vals) = cov.s.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            dinv_s[(i, j)] = v * dinv[i];
        }
    }
    Ok(CovFactorization {
        s: cov.s.clone(),
        dvec: cov.dvec.clone(),
        c,
        c2,
        gram,
        dinv_s,
    })
}

impl CovFactorization {
    pub fn n(&self) -> usize {
        self.dvec.len()
    }

    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    pub fn chol_k(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn chol_posterior(&self) -> &DMatrix<f64> {
        &self.c2
    }

    pub fn basis(&self) -> &BasisMatrix {
        &self.s
    }

    pub fn dvec(&self) -> &DVector<f64> {
        &self.dvec
    }

    /// S′D⁻¹S.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// (K⁻¹ + S′D⁻¹S)⁻¹, the conditional covariance of the random effects.
    pub fn posterior_cov(&self) -> DMatrix<f64> {
        let m = self.m();
        let mut p = chol_solve(&self.c2, &DMatrix::identity(m, m));
        symmetrize(&mut p);
        p
    }

    /// Σ⁻¹ · rhs for an n×q right-hand side.
    pub fn inverse_apply(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.n();
        if rhs.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "right-hand side has {} rows, Σ is {n}x{n}",
                rhs.nrows()
            )));
        }
        let q = rhs.ncols();
        let mut t = skinny(n, q, q);
        for j in 0..q {
            for i in 0..n {
                t[(i, j)] = rhs[(i, j)] / self.dvec[i];
            }
        }
        let u = self.s.tr_mul_dense(&t);
        let w = chol_solve(&self.c2, &u);
        t -= &self.dinv_s * w;
        Ok(t)
    }

    pub fn inverse_apply_vec(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.n();
        if rhs.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "vector has {} entries, Σ is {n}x{n}",
                rhs.len()
            )));
        }
        let t = rhs.component_div(&self.dvec);
        let u = self.s.tr_mul_vec(&t);
        let w = chol_solve_vec(&self.c2, &u);
        Ok(t - &self.dinv_s * w)
    }

    /// log|Σ| = log|D| + 2 log|C| + 2 log|C₂|.
    pub fn logdet(&self) -> f64 {
        self.log_det_d() + 2.0 * log_diag_sum(&self.c) + 2.0 * log_diag_sum(&self.c2)
    }

    pub fn log_det_d(&self) -> f64 {
        self.dvec.iter().map(|d| d.ln()).sum()
    }

    /// log|C| for C = chol(K).
    pub fn log_det_chol_k(&self) -> f64 {
        log_diag_sum(&self.c)
    }

    /// log|C₂| for C₂ = chol(K⁻¹ + S′D⁻¹S).
    pub fn log_det_chol_posterior(&self) -> f64 {
        log_diag_sum(&self.c2)
    }

    /// diag(Σ⁻¹), O(n·nnz_row²).
    pub fn inverse_diag(&self) -> DVector<f64> {
        let p = self.posterior_cov();
        DVector::from_fn(self.n(), |i, _| {
            let (cols, vals) = self.s.row(i);
            let mut q = 0.0;
            for (&a, &va) in cols.iter().zip(vals) {
                for (&b, &vb) in cols.iter().zip(vals) {
                    q += va * vb * p[(a, b)];
                }
            }
            let di = self.dvec[i];
            1.0 / di - q / (di * di)
        })
    }

    /// Σ⁻¹S as a dense n×m matrix.
    pub fn inverse_s(&self) -> DMatrix<f64> {
        let w = chol_solve(&self.c2, &self.gram);
        &self.dinv_s - &self.dinv_s * w
    }

    /// S′Σ⁻¹S = G − G (K⁻¹ + G)⁻¹ G with G = S′D⁻¹S.
    pub fn st_inverse_s(&self) -> DMatrix<f64> {
        let mut a = &self.gram - &self.gram * chol_solve(&self.c2, &self.gram);
        symmetrize(&mut a);
        a
    }
}

/// GLS estimate of the fixed effects together with the products the
/// likelihood and predictor reuse.
#[derive(Debug, Clone)]
pub struct GlsFit {
    pub beta: DVector<f64>,
    /// chol(X′Σ⁻¹X)
    pub c3: DMatrix<f64>,
    /// Σ⁻¹X, n×p
    pub sigma_inv_x: DMatrix<f64>,
    /// y − Xβ̂
    pub resid: DVector<f64>,
    /// Σ⁻¹(y − Xβ̂)
    pub sigma_inv_resid: DVector<f64>,
}

/// β̂ = (X′Σ⁻¹X)⁻¹X′Σ⁻¹y.
pub fn gls_beta(x: &DMatrix<f64>, y: &DVector<f64>, f: &CovFactorization) -> Result<GlsFit> {
    let n = f.n();
    if x.nrows() != n || y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "X is {}x{}, y has {} entries, Σ is {n}x{n}",
            x.nrows(),
            x.ncols(),
            y.len()
        )));
    }
    let sigma_inv_x = f.inverse_apply(x)?;
    let mut info = x.transpose() * &sigma_inv_x;
    symmetrize(&mut info);
    let c3 = cholesky(&info, PdTarget::Gls)?;
    let beta = chol_solve_vec(&c3, &(sigma_inv_x.transpose() * y));
    let resid = y - x * &beta;
    let sigma_inv_resid = f.inverse_apply_vec(&resid)?;
    Ok(GlsFit {
        beta,
        c3,
        sigma_inv_x,
        resid,
        sigma_inv_resid,
    })
}

impl GlsFit {
    pub fn log_det_c3(&self) -> f64 {
        log_diag_sum(&self.c3)
    }
}
