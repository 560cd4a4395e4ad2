use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::geometry::{Location, Metric};
use crate::numerics::{factorize, LowRankCov};

fn check_pair(a: &DVector<f64>, b: &DVector<f64>) -> Result<()> {
    if a.is_empty() {
        return Err(Error::invalid("empty input"));
    }
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// Mean squared prediction error.
pub fn mspe(yhat: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    check_pair(yhat, truth)?;
    Ok((yhat - truth).norm_squared() / yhat.len() as f64)
}

/// Median of a sample; NaNs are rejected.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("median of an empty sample"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("median input".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[h]
    } else {
        0.5 * (v[h - 1] + v[h])
    })
}

/// Median absolute deviation of estimates from a true value.
pub fn mad(estimates: &[f64], truth: f64) -> Result<f64> {
    let dev: Vec<f64> = estimates.iter().map(|e| (e - truth).abs()).collect();
    median(&dev)
}

/// median(kse_est) / median(kse_true).
pub fn rkse(kse_est: &DVector<f64>, kse_true: &DVector<f64>) -> Result<f64> {
    if kse_est.is_empty() || kse_true.is_empty() {
        return Err(Error::invalid("empty input"));
    }
    let den = median(kse_true.as_slice())?;
    if den == 0.0 {
        return Err(Error::invalid("median true KSE is zero"));
    }
    Ok(median(kse_est.as_slice())? / den)
}

/// Fraction of intervals [lo, hi] that contain the truth.
pub fn pic(intervals: &[(f64, f64)], truth: &DVector<f64>) -> Result<f64> {
    if intervals.is_empty() {
        return Err(Error::invalid("empty input"));
    }
    if intervals.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} intervals for {} values",
            intervals.len(),
            truth.len()
        )));
    }
    let hit = intervals
        .iter()
        .zip(truth.iter())
        .filter(|((lo, hi), t)| lo <= t && *t <= hi)
        .count();
    Ok(hit as f64 / truth.len() as f64)
}

/// KL(P‖Q) between N(μP, ΣP) and N(μQ, ΣQ) with low-rank covariances:
/// ½[tr(ΣQ⁻¹ΣP) + (μQ−μP)′ΣQ⁻¹(μQ−μP) − n + log|ΣQ| − log|ΣP|].
pub fn kl_divergence(mu_p: &DVector<f64>, cov_p: &LowRankCov, mu_q: &DVector<f64>, cov_q: &LowRankCov) -> Result<f64> {
    let n = mu_p.len();
    if mu_q.len() != n || cov_p.n() != n || cov_q.n() != n {
        return Err(Error::DimensionMismatch(format!(
            "means {} and {}, covariances {} and {}",
            n,
            mu_q.len(),
            cov_p.n(),
            cov_q.n()
        )));
    }
    let fp = factorize(cov_p)?;
    let fq = factorize(cov_q)?;
    // tr(ΣQ⁻¹ S_P K_P S_P′) + Σᵢ D_P,i (ΣQ⁻¹)ᵢᵢ
    let q_inv_sp = fq.inverse_apply(&cov_p.s.to_dense())?;
    let sp_q_sp = cov_p.s.tr_mul_dense(&q_inv_sp);
    let tr_low: f64 = cov_p.k.component_mul(&sp_q_sp).sum();
    let tr_diag = cov_p.dvec.dot(&fq.inverse_diag());
    let diff = mu_q - mu_p;
    let quad = diff.dot(&fq.inverse_apply_vec(&diff)?);
    let kl = 0.5 * (tr_low + tr_diag + quad - n as f64 + fq.logdet() - fp.logdet());
    if !kl.is_finite() {
        return Err(Error::NonFinite("KL divergence".into()));
    }
    Ok(kl)
}

/// Spatial weights for Moran's I.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoranWeights {
    /// 1/d with zero diagonal, each row scaled to sum to one.
    #[default]
    RowStandardizedInverseDistance,
    /// 1/d with zero diagonal.
    InverseDistance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoranResult {
    pub i: f64,
    pub expected: f64,
    pub variance: f64,
    pub z: f64,
    /// Two-sided p-value.
    pub p_value: f64,
}

/// Moran's I with the normal approximation under randomization. For n = 3
/// the randomization variance is undefined and the normality-assumption
/// variance is used instead.
pub fn morans_i(residuals: &DVector<f64>, locations: &[Location], weights: MoranWeights) -> Result<MoranResult> {
    let n = residuals.len();
    if n < 3 {
        return Err(Error::invalid(format!("Moran's I needs n >= 3, got {n}")));
    }
    if locations.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} residuals at {} locations",
            locations.len()
        )));
    }
    let mean = residuals.mean();
    let z = residuals.map(|r| r - mean);
    let m2 = z.norm_squared();
    if !(m2 > 0.0) {
        return Err(Error::invalid("Moran's I is undefined for constant residuals"));
    }

    let mut w = nalgebra::DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = Metric::Euclidean.distance(&locations[i], &locations[j]);
                if d == 0.0 {
                    return Err(Error::invalid(format!("locations {i} and {j} coincide")));
                }
                w[(i, j)] = 1.0 / d;
            }
        }
        if weights == MoranWeights::RowStandardizedInverseDistance {
            let rs = w.row(i).sum();
            w.row_mut(i).scale_mut(1.0 / rs);
        }
    }

    let nf = n as f64;
    let s0 = w.sum();
    let cross = z.dot(&(&w * &z));
    let i_stat = nf / s0 * cross / m2;
    let expected = -1.0 / (nf - 1.0);

    let s1 = 0.5 * (&w + w.transpose()).map(|v| v * v).sum();
    let s2: f64 = (0..n).map(|k| (w.row(k).sum() + w.column(k).sum()).powi(2)).sum();
    let e_i2 = if n > 3 {
        let b2 = nf * z.map(|v| v.powi(4)).sum() / (m2 * m2);
        let a = nf * ((nf * nf - 3.0 * nf + 3.0) * s1 - nf * s2 + 3.0 * s0 * s0);
        let b = b2 * ((nf * nf - nf) * s1 - 2.0 * nf * s2 + 6.0 * s0 * s0);
        (a - b) / ((nf - 1.0) * (nf - 2.0) * (nf - 3.0) * s0 * s0)
    } else {
        (nf * nf * s1 - nf * s2 + 3.0 * s0 * s0) / ((nf * nf - 1.0) * s0 * s0)
    };
    let variance = e_i2 - expected * expected;
    if !(variance > 0.0) {
        return Err(Error::NonFinite("Moran's I variance".into()));
    }
    let zs = (i_stat - expected) / variance.sqrt();
    let p_value = 2.0 * Normal::standard().sf(zs.abs());
    Ok(MoranResult {
        i: i_stat,
        expected,
        variance,
        z: zs,
        p_value,
    })
}
