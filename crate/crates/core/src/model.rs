//! Spatial mixed effects model: data, parameters and the restricted
//! log-likelihood.
//!
//! Likelihood values omit every parameter-independent constant (the
//! −(n − p)/2·log 2π term and friends). They are comparable across K, σδ²
//! and b for one dataset, not across datasets.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{build_basis_matrix, BasisConfig, BasisMatrix};
use crate::error::{Error, Result};
use crate::geometry::{check_locations, KnotLayout, Location, Metric};
use crate::numerics::{factorize, gls_beta, CovFactorization, GlsFit, LowRankCov};

/// Observations: locations, design matrix, response and the known variance
/// weight functions evaluated at each location.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub locations: Vec<Location>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub vdelta: DVector<f64>,
    pub veps: DVector<f64>,
}

impl Dataset {
    pub fn new(
        locations: Vec<Location>,
        x: DMatrix<f64>,
        y: DVector<f64>,
        vdelta: DVector<f64>,
        veps: DVector<f64>,
    ) -> Result<Self> {
        let n = locations.len();
        if n == 0 {
            return Err(Error::data(None, "dataset has no observations"));
        }
        if x.nrows() != n || y.len() != n || vdelta.len() != n || veps.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} locations but X has {} rows, y {}, v_delta {}, v_eps {}",
                x.nrows(),
                y.len(),
                vdelta.len(),
                veps.len()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::DimensionMismatch("design matrix has no columns".into()));
        }
        for (name, w) in [("v_delta", &vdelta), ("v_eps", &veps)] {
            if let Some(i) = w.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::data(
                    None,
                    format!("{name} at observation {i} is {} (must be positive)", w[i]),
                ));
            }
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::data(None, "non-finite value in X or y"));
        }
        Ok(Dataset {
            locations,
            x,
            y,
            vdelta,
            veps,
        })
    }

    /// Unit weight functions v_δ ≡ v_ε ≡ 1.
    pub fn with_unit_weights(locations: Vec<Location>, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let n = locations.len();
        Self::new(
            locations,
            x,
            y,
            DVector::from_element(n, 1.0),
            DVector::from_element(n, 1.0),
        )
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Rows in the order given (also serves as a permutation).
    pub fn subset(&self, idx: &[usize]) -> Self {
        Dataset {
            locations: idx.iter().map(|&i| self.locations[i]).collect(),
            x: self.x.select_rows(idx),
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            vdelta: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.vdelta[i])),
            veps: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.veps[i])),
        }
    }
}

/// Dataset plus the fixed parts of the basis (knots and metric).
#[derive(Debug, Clone)]
pub struct SmeModel {
    pub data: Dataset,
    pub layout: KnotLayout,
    pub metric: Metric,
}

impl SmeModel {
    pub fn new(data: Dataset, layout: KnotLayout, metric: Metric) -> Result<Self> {
        let dim = check_locations(&data.locations, &metric)?;
        if dim != layout.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{dim}-D data with {}-D knots",
                layout.dim()
            )));
        }
        for l in layout.resolutions() {
            layout.min_interknot_distance(l, &metric)?;
        }
        Ok(SmeModel { data, layout, metric })
    }

    pub fn m(&self) -> usize {
        self.layout.len()
    }

    pub fn basis_config(&self, b: f64) -> Result<BasisConfig> {
        BasisConfig::new(b, self.layout.clone(), self.metric)
    }

    /// S at the observed locations for bandwidth constant b.
    pub fn basis(&self, b: f64) -> Result<BasisMatrix> {
        build_basis_matrix(&self.data.locations, &self.basis_config(b)?)
    }
}

/// Full parameter state {K, σδ², σε², β, b}. σε² is fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SmeParams {
    pub k: DMatrix<f64>,
    pub sigma_delta2: f64,
    sigma_eps2: f64,
    pub beta: DVector<f64>,
    pub b: f64,
}

impl SmeParams {
    pub fn new(k: DMatrix<f64>, sigma_delta2: f64, sigma_eps2: f64, beta: DVector<f64>, b: f64) -> Result<Self> {
        if k.nrows() != k.ncols() {
            return Err(Error::DimensionMismatch("K must be square".into()));
        }
        if !(sigma_delta2 >= 0.0 && sigma_delta2.is_finite()) {
            return Err(Error::invalid(format!("sigma_delta2 must be >= 0, got {sigma_delta2}")));
        }
        if !(sigma_eps2 >= 0.0 && sigma_eps2.is_finite()) {
            return Err(Error::invalid(format!("sigma_eps2 must be >= 0, got {sigma_eps2}")));
        }
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::invalid(format!("b must be positive, got {b}")));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("K".into()));
        }
        Ok(SmeParams {
            k,
            sigma_delta2,
            sigma_eps2,
            beta,
            b,
        })
    }

    pub fn sigma_eps2(&self) -> f64 {
        self.sigma_eps2
    }

    pub fn m(&self) -> usize {
        self.k.nrows()
    }

    pub fn with_b(&self, b: f64) -> Self {
        SmeParams { b, ..self.clone() }
    }

    /// D = σδ² V_δ + σε² V_ε.
    pub fn dvec(&self, data: &Dataset) -> DVector<f64> {
        &data.vdelta * self.sigma_delta2 + &data.veps * self.sigma_eps2
    }
}

/// One accepted state in a fit trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub loglik: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchPhase {
    Golden,
    Quadratic,
}

/// One evaluated bandwidth candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub b: f64,
    /// None when the refit at this b failed to factorize.
    pub loglik: Option<f64>,
}

/// Instrumentation for one AECM cycle (steps 2 through 5).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub phase: SearchPhase,
    pub candidates: Vec<Candidate>,
    pub accepted_b: f64,
    pub accepted_loglik: f64,
}

/// Converged parameters plus the optimisation history.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: SmeParams,
    /// Restricted log-likelihood of each accepted state.
    pub loglik_trace: Vec<TracePoint>,
    /// Every b at which a candidate was evaluated, in evaluation order.
    pub b_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Number of ridge corrections applied to K after a failed factorization.
    pub ridge_events: usize,
    /// Per-cycle candidate sets; empty for plain EM.
    pub cycles: Vec<CycleRecord>,
}

impl FitResult {
    pub fn final_loglik(&self) -> f64 {
        self.loglik_trace.last().map_or(f64::NAN, |t| t.loglik)
    }
}

/// Σ = S K S′ + σδ²V_δ + σε²V_ε at the observed locations.
pub fn assemble_cov(params: &SmeParams, model: &SmeModel) -> Result<LowRankCov> {
    if params.m() != model.m() {
        return Err(Error::DimensionMismatch(format!(
            "K is {0}x{0} but there are {1} knots",
            params.m(),
            model.m()
        )));
    }
    let s = Arc::new(model.basis(params.b)?);
    LowRankCov::new(s, params.k.clone(), params.dvec(&model.data))
}

/// Factorization, GLS fit and restricted log-likelihood at one parameter
/// point. β̂ is always re-profiled at the current Σ.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub factor: CovFactorization,
    pub gls: GlsFit,
    pub loglik: f64,
}

pub fn evaluate(params: &SmeParams, model: &SmeModel) -> Result<Evaluation> {
    let cov = assemble_cov(params, model)?;
    evaluate_cov(&cov, &model.data)
}

pub fn evaluate_cov(cov: &LowRankCov, data: &Dataset) -> Result<Evaluation> {
    let factor = factorize(cov)?;
    let gls = gls_beta(&data.x, &data.y, &factor)?;
    let quad = gls.resid.dot(&gls.sigma_inv_resid);
    let loglik = -0.5 * quad
        - 0.5 * factor.log_det_d()
        - factor.log_det_chol_k()
        - factor.log_det_chol_posterior()
        - gls.log_det_c3();
    if !loglik.is_finite() {
        return Err(Error::NonFinite("restricted log-likelihood".into()));
    }
    Ok(Evaluation { factor, gls, loglik })
}

/// ℓ = −½ r′Σ⁻¹r − ½ log|D| − log|C| − log|C₂| − log|C₃|, r = y − Xβ̂.
pub fn restricted_loglik(params: &SmeParams, model: &SmeModel) -> Result<f64> {
    Ok(evaluate(params, model)?.loglik)
}
