//! Fixed rank kriging predictions and kriging standard errors.
//!
//! After one O(n·m²) setup per fitted model, each target costs O(m² + p²):
//! the cross-covariance row C(s₀) = a′K S′ + σδ² v_δ(s₀) e_j′ is never
//! materialised, only its products with the cached Σ⁻¹ quantities.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::{build_basis_matrix, BasisMatrix};
use crate::error::{Error, Result};
use crate::geometry::Location;
use crate::model::{evaluate, Dataset, Evaluation, SmeModel, SmeParams};

pub const DEFAULT_BATCH: usize = 4096;

/// Targets with their covariates, fine-scale weights and overlap map.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRequest {
    pub targets: Vec<Location>,
    pub x0: DMatrix<f64>,
    pub vdelta0: DVector<f64>,
    /// For each target, the observed index sharing its coordinates.
    pub overlap: Vec<Option<usize>>,
}

impl PredictionRequest {
    /// Builds the request, matching targets to observations by exact
    /// coordinate equality.
    pub fn new(targets: Vec<Location>, x0: DMatrix<f64>, vdelta0: DVector<f64>, data: &Dataset) -> Result<Self> {
        let overlap = exact_overlap(&targets, &data.locations);
        let req = PredictionRequest {
            targets,
            x0,
            vdelta0,
            overlap,
        };
        req.validate(data)?;
        Ok(req)
    }

    /// Like [`PredictionRequest::new`] but a target within `radius`
    /// (Euclidean in coordinate space) of an observation is snapped onto it.
    pub fn with_snap(
        targets: Vec<Location>,
        x0: DMatrix<f64>,
        vdelta0: DVector<f64>,
        data: &Dataset,
        radius: f64,
    ) -> Result<Self> {
        let mut targets = targets;
        let mut overlap = Vec::with_capacity(targets.len());
        for t in targets.iter_mut() {
            let hit = data
                .locations
                .iter()
                .enumerate()
                .map(|(j, s)| (j, coord_dist(t, s)))
                .filter(|&(_, d)| d <= radius)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((j, _)) = hit {
                *t = data.locations[j];
            }
            overlap.push(hit.map(|h| h.0));
        }
        let req = PredictionRequest {
            targets,
            x0,
            vdelta0,
            overlap,
        };
        req.validate(data)?;
        Ok(req)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        let n0 = self.targets.len();
        if self.x0.nrows() != n0 || self.vdelta0.len() != n0 || self.overlap.len() != n0 {
            return Err(Error::DimensionMismatch(format!(
                "{n0} targets but X0 has {} rows, v_delta0 {}, overlap {}",
                self.x0.nrows(),
                self.vdelta0.len(),
                self.overlap.len()
            )));
        }
        if self.x0.ncols() != data.p() {
            return Err(Error::DimensionMismatch(format!(
                "X0 has {} columns, X has {}",
                self.x0.ncols(),
                data.p()
            )));
        }
        if let Some(i) = self.vdelta0.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("v_delta at target {i} must be positive")));
        }
        for (i, o) in self.overlap.iter().enumerate() {
            if let Some(j) = *o {
                let ok = data.locations.get(j).is_some_and(|s| s.same_point(&self.targets[i]));
                if !ok {
                    return Err(Error::invalid(format!(
                        "overlap entry for target {i} does not match observation {j}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn slice(&self, range: std::ops::Range<usize>) -> PredictionRequest {
        PredictionRequest {
            targets: self.targets[range.clone()].to_vec(),
            x0: self.x0.rows(range.start, range.len()).into_owned(),
            vdelta0: self.vdelta0.rows(range.start, range.len()).into_owned(),
            overlap: self.overlap[range].to_vec(),
        }
    }
}

fn coord_dist(a: &Location, b: &Location) -> f64 {
    a.coords()
        .iter()
        .zip(b.coords())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn exact_overlap(targets: &[Location], observed: &[Location]) -> Vec<Option<usize>> {
    let key = |l: &Location| (l.dim(), l.coords().iter().map(|c| c.to_bits()).collect::<Vec<_>>());
    let mut index = HashMap::with_capacity(observed.len());
    for (j, s) in observed.iter().enumerate() {
        index.entry(key(s)).or_insert(j);
    }
    targets.iter().map(|t| index.get(&key(t)).copied()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrigingOutput {
    pub yhat: DVector<f64>,
    pub kse: DVector<f64>,
    /// X(s₀)β̂
    pub trend: DVector<f64>,
    /// C(s₀)Σ⁻¹(y − Xβ̂)
    pub spatial: DVector<f64>,
    /// Targets whose squared KSE came out negative and was clamped to 0.
    pub clamped: usize,
}

/// Cross-covariance C(s₀) = A K S′ + σδ² V_δ(s₀) I_s between targets and
/// observations, held in factored form.
#[derive(Debug, Clone)]
pub struct CrossCov {
    pub a: BasisMatrix,
    pub k: DMatrix<f64>,
    pub s: Arc<BasisMatrix>,
    pub sigma_delta2: f64,
    pub vdelta0: DVector<f64>,
    pub overlap: Vec<Option<usize>>,
}

impl CrossCov {
    pub fn nrows(&self) -> usize {
        self.a.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.s.nrows()
    }

    /// C(s₀)·v for an n-vector v.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let w = &self.k * self.s.tr_mul_vec(v);
        let mut out = self.a.mul_vec(&w);
        for (i, o) in self.overlap.iter().enumerate() {
            if let Some(j) = *o {
                out[i] += self.sigma_delta2 * self.vdelta0[i] * v[j];
            }
        }
        out
    }

    /// One row as a dense n-vector.
    pub fn row(&self, i: usize) -> DVector<f64> {
        let (cols, vals) = self.a.row(i);
        let mut ka = DVector::zeros(self.k.nrows());
        for (&c, &v) in cols.iter().zip(vals) {
            ka += self.k.column(c) * v;
        }
        let mut r = self.s.mul_vec(&ka);
        if let Some(j) = self.overlap[i] {
            r[j] += self.sigma_delta2 * self.vdelta0[i];
        }
        r
    }
}

pub fn cross_cov(params: &SmeParams, model: &SmeModel, request: &PredictionRequest) -> Result<CrossCov> {
    request.validate(&model.data)?;
    let cfg = model.basis_config(params.b)?;
    let a = build_basis_matrix(&request.targets, &cfg)?;
    let s = Arc::new(model.basis(params.b)?);
    Ok(CrossCov {
        a,
        k: params.k.clone(),
        s,
        sigma_delta2: params.sigma_delta2,
        vdelta0: request.vdelta0.clone(),
        overlap: request.overlap.clone(),
    })
}

/// (trend, spatial part, variance, clamped) at one target.
type TargetValue = (f64, f64, f64, bool);

/// Cached Σ⁻¹ products for repeated prediction against one fitted model.
pub struct Predictor<'a> {
    params: &'a SmeParams,
    model: &'a SmeModel,
    eval: Evaluation,
    /// S′Σ⁻¹(y − Xβ̂)
    st_resid: DVector<f64>,
    /// Σ⁻¹S, n×m
    sigma_inv_s: DMatrix<f64>,
    /// S′Σ⁻¹S
    st_sigma_inv_s: DMatrix<f64>,
    /// X′Σ⁻¹S, p×m
    xt_sigma_inv_s: DMatrix<f64>,
    /// diag(Σ⁻¹)
    inv_diag: DVector<f64>,
    batch: usize,
}

impl<'a> Predictor<'a> {
    pub fn new(params: &'a SmeParams, model: &'a SmeModel) -> Result<Self> {
        let eval = evaluate(params, model)?;
        let f = &eval.factor;
        let st_resid = f.basis().tr_mul_vec(&eval.gls.sigma_inv_resid);
        let sigma_inv_s = f.inverse_s();
        let st_sigma_inv_s = f.st_inverse_s();
        let xt_sigma_inv_s = model.data.x.transpose() * &sigma_inv_s;
        let inv_diag = f.inverse_diag();
        Ok(Predictor {
            params,
            model,
            eval,
            st_resid,
            sigma_inv_s,
            st_sigma_inv_s,
            xt_sigma_inv_s,
            inv_diag,
            batch: DEFAULT_BATCH,
        })
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch.max(1);
        self
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.eval.gls.beta
    }

    pub fn evaluation(&self) -> &Evaluation {
        &self.eval
    }

    pub fn predict(&self, request: &PredictionRequest) -> Result<KrigingOutput> {
        request.validate(&self.model.data)?;
        let n0 = request.len();
        let cfg = self.model.basis_config(self.params.b)?;
        let chunks: Vec<std::ops::Range<usize>> = (0..n0)
            .step_by(self.batch)
            .map(|s| s..(s + self.batch).min(n0))
            .collect();
        let parts: Vec<Result<Vec<TargetValue>>> = chunks
            .par_iter()
            .map(|r| {
                let sub = request.slice(r.clone());
                let a = build_basis_matrix(&sub.targets, &cfg)?;
                Ok((0..sub.len()).map(|i| self.target(&a, &sub, i)).collect())
            })
            .collect();
        let mut yhat = DVector::zeros(n0);
        let mut kse = DVector::zeros(n0);
        let mut trend = DVector::zeros(n0);
        let mut spatial = DVector::zeros(n0);
        let mut clamped = 0;
        let mut i = 0;
        for part in parts {
            for (t, sp, var, c) in part? {
                trend[i] = t;
                spatial[i] = sp;
                yhat[i] = t + sp;
                kse[i] = var.sqrt();
                clamped += c as usize;
                i += 1;
            }
        }
        if clamped > 0 {
            log::warn!("{clamped} negative kriging variances clamped to zero");
        }
        Ok(KrigingOutput {
            yhat,
            kse,
            trend,
            spatial,
            clamped,
        })
    }

    /// (trend, spatial part, variance, clamped) for target i of a batch.
    fn target(&self, a: &BasisMatrix, req: &PredictionRequest, i: usize) -> TargetValue {
        let k = &self.params.k;
        let sd2 = self.params.sigma_delta2;
        let g = &self.eval.gls;
        let (cols, vals) = a.row(i);
        let mut ka = DVector::zeros(k.nrows());
        for (&c, &v) in cols.iter().zip(vals) {
            ka += k.column(c) * v;
        }
        let aka: f64 = cols.iter().zip(vals).map(|(&c, &v)| v * ka[c]).sum();
        let x0 = req.x0.row(i).transpose();
        let trend = x0.dot(&g.beta);
        let w = sd2 * req.vdelta0[i];

        let mut spatial = ka.dot(&self.st_resid);
        let mut c_sinv_c = ka.dot(&(&self.st_sigma_inv_s * &ka));
        let mut xt_sinv_c = &self.xt_sigma_inv_s * &ka;
        if let Some(j) = req.overlap[i] {
            spatial += w * g.sigma_inv_resid[j];
            c_sinv_c += 2.0 * w * self.sigma_inv_s.row(j).transpose().dot(&ka) + w * w * self.inv_diag[j];
            xt_sinv_c += g.sigma_inv_x.row(j).transpose() * w;
        }
        let gap = x0 - xt_sinv_c;
        let z =
            g.c3.solve_lower_triangular(&gap)
                .expect("GLS factor has a zero diagonal");
        let var = aka + w - c_sinv_c + z.norm_squared();
        if var < 0.0 {
            (trend, spatial, 0.0, true)
        } else {
            (trend, spatial, var, false)
        }
    }
}

/// Full prediction (mean, KSE and decomposition).
pub fn predict(params: &SmeParams, model: &SmeModel, request: &PredictionRequest) -> Result<KrigingOutput> {
    Predictor::new(params, model)?.predict(request)
}

/// ŷ(s₀) = X(s₀)β̂ + C(s₀)Σ⁻¹(y − Xβ̂).
pub fn krige(params: &SmeParams, model: &SmeModel, request: &PredictionRequest) -> Result<DVector<f64>> {
    Ok(predict(params, model, request)?.yhat)
}

/// Kriging standard errors, including the GLS uncertainty term.
pub fn kriging_se(params: &SmeParams, model: &SmeModel, request: &PredictionRequest) -> Result<DVector<f64>> {
    Ok(predict(params, model, request)?.kse)
}

/// ŷ ± z_{(1+level)/2}·KSE per target.
pub fn prediction_interval(output: &KrigingOutput, level: f64) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("interval level must be in (0, 1), got {level}")));
    }
    let z = Normal::standard().inverse_cdf(0.5 * (1.0 + level));
    Ok(output
        .yhat
        .iter()
        .zip(output.kse.iter())
        .map(|(&y, &s)| (y - z * s, y + z * s))
        .collect())
}
