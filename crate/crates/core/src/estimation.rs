//! EM estimation of {K, σδ²} at fixed b, and AECM estimation of b by a
//! golden-section burn-in followed by quadratic search.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    evaluate, Candidate, CycleRecord, Evaluation, FitResult, SearchPhase, SmeModel, SmeParams, TracePoint,
};
use crate::numerics::symmetrize;

/// 1/φ
pub const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Which conditional moments drive the variance update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// Conditional moments under the restricted likelihood: Σ⁻¹ in the
    /// variance-correction terms is replaced by the REML projection
    /// P = Σ⁻¹ − Σ⁻¹X(X′Σ⁻¹X)⁻¹X′Σ⁻¹. Ascends the restricted
    /// log-likelihood.
    #[default]
    Restricted,
    /// Conditional moments with β fixed at β̂ (Σ⁻¹ throughout). Ascends
    /// the profile likelihood, not necessarily the restricted one.
    Marginal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Relative log-likelihood change |Δℓ| / (1 + |ℓ|) declaring convergence.
    pub tol_loglik: f64,
    /// Looser threshold for burn-in and per-candidate refits.
    pub weak_tol: f64,
    /// Iteration cap for per-candidate refits inside AECM.
    pub inner_max_iter: usize,
    pub rule: UpdateRule,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 500,
            tol_loglik: 1e-6,
            weak_tol: 1e-3,
            inner_max_iter: 100,
            rule: UpdateRule::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_loglik > 0.0 && self.weak_tol > 0.0) {
            return Err(Error::invalid("EM tolerances must be positive"));
        }
        if self.weak_tol < self.tol_loglik {
            return Err(Error::invalid("weak_tol must be at least tol_loglik"));
        }
        if self.max_iter == 0 || self.inner_max_iter == 0 {
            return Err(Error::invalid("iteration caps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AecmConfig {
    pub em: EmConfig,
    /// Search interval for b. `b_lo == b_hi` fixes b and reduces to EM.
    pub b_bracket: (f64, f64),
    /// Golden-section cycles before switching to quadratic search.
    pub golden_iters: usize,
    /// Bracket width below which the search on b counts as resolved.
    pub quad_tol: f64,
    /// Bandwidths used for the EM burn-in.
    pub initial_b_set: Vec<f64>,
    /// Hard cap on search cycles (golden + quadratic).
    pub max_cycles: usize,
}

impl Default for AecmConfig {
    fn default() -> Self {
        AecmConfig {
            em: EmConfig::default(),
            b_bracket: (0.1, 4.0),
            golden_iters: 5,
            quad_tol: 0.01,
            initial_b_set: vec![0.5, 1.0, 1.5, 2.0],
            max_cycles: 60,
        }
    }
}

impl AecmConfig {
    pub fn validate(&self) -> Result<()> {
        self.em.validate()?;
        let (lo, hi) = self.b_bracket;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid(format!(
                "b bracket ({lo}, {hi}) must satisfy 0 < lo <= hi"
            )));
        }
        if lo == hi {
            return Ok(());
        }
        if !(self.quad_tol > 0.0) {
            return Err(Error::invalid("quad_tol must be positive"));
        }
        if self.initial_b_set.is_empty() || self.initial_b_set.iter().any(|&b| b < lo || b > hi) {
            return Err(Error::invalid("initial b values must lie inside the bracket"));
        }
        if !self.initial_b_set.iter().any(|&b| (b - 1.5).abs() < 1e-12) {
            return Err(Error::invalid("initial b values must include 1.5"));
        }
        Ok(())
    }
}

/// Starting values: K⁰ = 0.9·v·I and σδ²⁰ = 0.1·v / mean(v_δ), where v is
/// the variance of the OLS residuals; β⁰ is the OLS estimate.
pub fn initial_params(model: &SmeModel, sigma_eps2: f64, b: f64) -> Result<SmeParams> {
    let data = &model.data;
    let (n, p) = (data.n(), data.p());
    let xtx = data.x.transpose() * &data.x;
    let beta = xtx
        .cholesky()
        .ok_or(Error::NotPositiveDefinite {
            target: crate::error::PdTarget::Gls,
            pivot: 0,
        })?
        .solve(&(data.x.transpose() * &data.y));
    let resid = &data.y - &data.x * &beta;
    let dof = n.saturating_sub(p).max(1) as f64;
    let v = resid.norm_squared() / dof;
    let v = if v > 0.0 { v } else { 1.0 };
    let mean_vd = data.vdelta.mean();
    SmeParams::new(
        DMatrix::identity(model.m(), model.m()) * (0.9 * v),
        0.1 * v / mean_vd,
        sigma_eps2,
        beta,
        b,
    )
}

/// One EM update of K and σδ² at fixed b, from an evaluation at `params`.
///
/// K ← K − K S′Σ⁻¹S K + (K S′Σ⁻¹r)(K S′Σ⁻¹r)′
/// σδ² ← σδ² + σδ⁴/n · tr[Σ⁻¹(r r′Σ⁻¹ − I) V_δ]
///
/// with r = y − Xβ̂. K − K S′Σ⁻¹S K is formed as (K⁻¹ + S′D⁻¹S)⁻¹, which is
/// the same matrix and stays positive definite in floating point.
pub fn em_step(params: &SmeParams, eval: &Evaluation, model: &SmeModel, rule: UpdateRule) -> Result<SmeParams> {
    let f = &eval.factor;
    let g = &eval.gls;
    let data = &model.data;
    let n = data.n() as f64;

    let u = &params.k * f.basis().tr_mul_vec(&g.sigma_inv_resid);
    let mut k_new = f.posterior_cov() + &u * u.transpose();

    let mut inv_diag = f.inverse_diag();
    if rule == UpdateRule::Restricted {
        // K S′Σ⁻¹X (X′Σ⁻¹X)⁻¹ X′Σ⁻¹S K
        let b = &params.k * f.basis().tr_mul_dense(&g.sigma_inv_x);
        let w =
            g.c3.solve_lower_triangular(&b.transpose())
                .expect("GLS factor has a zero diagonal");
        k_new += w.transpose() * &w;
        // diag(P) = diag(Σ⁻¹) − row norms of Σ⁻¹X C₃⁻ᵀ
        let z =
            g.c3.solve_lower_triangular(&g.sigma_inv_x.transpose())
                .expect("GLS factor has a zero diagonal");
        for i in 0..inv_diag.len() {
            inv_diag[i] -= z.column(i).norm_squared();
        }
    }
    symmetrize(&mut k_new);

    let s2 = params.sigma_delta2;
    let trace: f64 = (0..data.n())
        .map(|i| data.vdelta[i] * (g.sigma_inv_resid[i].powi(2) - inv_diag[i]))
        .sum();
    let sd_new = (s2 + s2 * s2 / n * trace).max(0.0);

    if k_new.iter().any(|v| !v.is_finite()) || !sd_new.is_finite() {
        return Err(Error::NonFinite("EM update".into()));
    }
    let mut out = params.clone();
    out.k = k_new;
    out.sigma_delta2 = sd_new;
    out.beta = g.beta.clone();
    Ok(out)
}

/// Evaluates and applies one EM update; the returned parameters carry the
/// β̂ at the input state.
pub fn em_update(params: &SmeParams, model: &SmeModel) -> Result<SmeParams> {
    let eval = evaluate(params, model)?;
    em_step(params, &eval, model, UpdateRule::default())
}

/// Evaluates `params`, adding a ridge 1e-8·tr(K)/m·I to K once if the
/// factorization fails. Returns the (possibly ridged) parameters.
fn evaluate_with_ridge(mut params: SmeParams, model: &SmeModel, ridges: &mut usize) -> Result<(SmeParams, Evaluation)> {
    match evaluate(&params, model) {
        Ok(e) => Ok((params, e)),
        Err(e) if e.is_not_pd() => {
            let m = params.m();
            let ridge = 1e-8 * params.k.trace().abs().max(f64::MIN_POSITIVE) / m as f64;
            for i in 0..m {
                params.k[(i, i)] += ridge;
            }
            *ridges += 1;
            log::debug!("ridge {ridge:e} added to K after failed factorization");
            let e = evaluate(&params, model)?;
            Ok((params, e))
        }
        Err(e) => Err(e),
    }
}

struct EmRun {
    params: SmeParams,
    eval: Evaluation,
    trace: Vec<TracePoint>,
    converged: bool,
    iterations: usize,
    ridges: usize,
}

fn rel_change(new: f64, old: f64) -> f64 {
    (new - old).abs() / (1.0 + old.abs())
}

fn em_run(init: SmeParams, model: &SmeModel, tol: f64, max_iter: usize, rule: UpdateRule) -> Result<EmRun> {
    let mut ridges = 0;
    let (mut params, mut eval) = evaluate_with_ridge(init, model, &mut ridges).map_err(|e| Error::Estimation {
        iteration: 0,
        source: Box::new(e),
    })?;
    params.beta = eval.gls.beta.clone();
    let mut trace = vec![TracePoint {
        iteration: 0,
        loglik: eval.loglik,
    }];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let it = iterations + 1;
        let wrap = |e| Error::Estimation {
            iteration: it,
            source: Box::new(e),
        };
        let next = em_step(&params, &eval, model, rule).map_err(wrap)?;
        let (mut next, next_eval) = evaluate_with_ridge(next, model, &mut ridges).map_err(wrap)?;
        next.beta = next_eval.gls.beta.clone();
        let delta = rel_change(next_eval.loglik, eval.loglik);
        params = next;
        eval = next_eval;
        iterations = it;
        trace.push(TracePoint {
            iteration: it,
            loglik: eval.loglik,
        });
        if delta < tol {
            converged = true;
            break;
        }
    }
    Ok(EmRun {
        params,
        eval,
        trace,
        converged,
        iterations,
        ridges,
    })
}

/// Iterates the EM update at fixed b until the relative change in the
/// restricted log-likelihood drops below `cfg.tol_loglik`.
pub fn em_fit(init: &SmeParams, model: &SmeModel, cfg: &EmConfig) -> Result<FitResult> {
    cfg.validate()?;
    let run = em_run(init.clone(), model, cfg.tol_loglik, cfg.max_iter, cfg.rule)?;
    if !run.converged {
        log::warn!("EM stopped after {} iterations without converging", run.iterations);
    }
    Ok(FitResult {
        params: run.params,
        loglik_trace: run.trace,
        b_trace: vec![init.b],
        converged: run.converged,
        iterations: run.iterations,
        ridge_events: run.ridges,
        cycles: Vec::new(),
    })
}

/// The four golden-section points {lo, lo + (1−φ⁻¹)w, lo + φ⁻¹w, hi}, or
/// `None` once the bracket is narrower than `min_width`.
pub fn golden_candidates(bracket: (f64, f64), min_width: f64) -> Result<Option<[f64; 4]>> {
    let (lo, hi) = bracket;
    if !(hi > lo) {
        return Err(Error::invalid(format!("golden bracket ({lo}, {hi}) is empty")));
    }
    let w = hi - lo;
    if w < min_width {
        return Ok(None);
    }
    Ok(Some([lo, lo + (1.0 - INV_PHI) * w, lo + INV_PHI * w, hi]))
}

/// Shrinks a golden bracket around the best of its four points. Returns the
/// new bracket of width φ⁻¹·w.
pub fn golden_shrink(points: &[f64; 4], best: usize) -> (f64, f64) {
    if best <= 1 {
        (points[0], points[2])
    } else {
        (points[1], points[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuadraticStep {
    /// Vertex of the interpolating parabola, clamped to the bracket.
    Vertex(f64),
    /// Collinear log-likelihoods: midpoint of the outer points.
    Midpoint(f64),
    /// The middle point is not the largest; caller falls back to a golden step.
    NotConcave,
}

/// Next b from three (b, ℓ) evaluations by parabolic interpolation.
pub fn quadratic_candidates(points: [(f64, f64); 3], bracket: (f64, f64)) -> Result<QuadraticStep> {
    let mut p = points;
    p.sort_by(|a, b| a.0.total_cmp(&b.0));
    let [(x1, f1), (x2, f2), (x3, f3)] = p;
    if !(x1 < x2 && x2 < x3) {
        return Err(Error::invalid("quadratic search needs three distinct b values"));
    }
    if p.iter().any(|q| !q.1.is_finite()) {
        return Err(Error::NonFinite("log-likelihood in quadratic search".into()));
    }
    let num = (x2 - x1).powi(2) * (f2 - f3) - (x2 - x3).powi(2) * (f2 - f1);
    let den = (x2 - x1) * (f2 - f3) - (x2 - x3) * (f2 - f1);
    let scale = (f1.abs() + f2.abs() + f3.abs()).max(1.0) * (x3 - x1);
    if den.abs() <= 1e-14 * scale {
        return Ok(QuadraticStep::Midpoint(0.5 * (x1 + x3)));
    }
    if f2 < f1 || f2 < f3 {
        return Ok(QuadraticStep::NotConcave);
    }
    let v = x2 - 0.5 * num / den;
    Ok(QuadraticStep::Vertex(v.clamp(bracket.0, bracket.1)))
}

struct State {
    params: SmeParams,
    loglik: f64,
}

/// AECM: EM burn-in over `initial_b_set`, then alternating refits of
/// {K, σδ²} and a search over b (golden-section cycles, then quadratic
/// search). The incumbent state always competes with the candidates, so the
/// accepted log-likelihood never decreases.
pub fn aecm_fit(init: &SmeParams, model: &SmeModel, cfg: &AecmConfig) -> Result<FitResult> {
    cfg.validate()?;
    let (lo, hi) = cfg.b_bracket;
    if lo == hi {
        return em_fit(&init.with_b(lo), model, &cfg.em);
    }
    if init.b < lo || init.b > hi {
        return Err(Error::invalid(format!(
            "initial b {} outside bracket ({lo}, {hi})",
            init.b
        )));
    }
    let em = &cfg.em;
    let mut ridges = 0;
    let mut b_trace = Vec::new();
    let mut trace = Vec::new();
    let mut iterations = 0;

    // Step 1: burn-in at each starting bandwidth.
    let burn: Vec<Result<EmRun>> = cfg
        .initial_b_set
        .par_iter()
        .map(|&b| em_run(init.with_b(b), model, em.weak_tol, em.max_iter, em.rule))
        .collect();
    let mut best: Option<State> = None;
    for (r, &b) in burn.into_iter().zip(&cfg.initial_b_set) {
        b_trace.push(b);
        match r {
            Ok(run) => {
                ridges += run.ridges;
                iterations += run.iterations;
                if best.as_ref().is_none_or(|s| run.eval.loglik > s.loglik) {
                    best = Some(State {
                        params: run.params,
                        loglik: run.eval.loglik,
                    });
                }
            }
            Err(e) => log::debug!("burn-in at b = {b} failed: {e}"),
        }
    }
    let mut inc = best.ok_or(Error::AllCandidatesFailed { cycle: 0 })?;
    trace.push(TracePoint {
        iteration: 0,
        loglik: inc.loglik,
    });

    let mut cycles = Vec::new();
    let mut bracket = cfg.b_bracket;
    let mut phase = SearchPhase::Golden;
    let mut golden_done = 0;
    let mut center = inc.params.b;
    let mut half_width = 0.0;
    let mut converged = false;

    for cycle in 1..=cfg.max_cycles {
        // Step 2: candidate set.
        let cands: Vec<f64> = match phase {
            SearchPhase::Golden => match golden_candidates(bracket, cfg.quad_tol)? {
                Some(c) => c.to_vec(),
                None => {
                    phase = SearchPhase::Quadratic;
                    half_width = (0.25 * (bracket.1 - bracket.0)).max(cfg.quad_tol);
                    center = inc.params.b;
                    quadratic_triple(center, half_width, cfg.b_bracket)
                }
            },
            SearchPhase::Quadratic => quadratic_triple(center, half_width, cfg.b_bracket),
        };

        // Steps 3-4: refit {K, σδ²} at each candidate and evaluate ℓ.
        let results: Vec<Option<(SmeParams, f64, usize, usize)>> = cands
            .par_iter()
            .map(|&b| {
                em_run(inc.params.with_b(b), model, em.weak_tol, em.inner_max_iter, em.rule)
                    .map_err(|e| log::debug!("candidate b = {b} failed: {e}"))
                    .ok()
                    .map(|r| (r.params, r.eval.loglik, r.iterations, r.ridges))
            })
            .collect();
        b_trace.extend(&cands);
        if results.iter().all(Option::is_none) {
            return Err(Error::AllCandidatesFailed { cycle });
        }

        // Step 5: accept the best of candidates and incumbent. Ties keep
        // the candidate nearest the incumbent's b (the incumbent itself wins).
        let prev_ll = inc.loglik;
        let inc_b = inc.params.b;
        let mut choice: Option<usize> = None;
        let mut best_ll = inc.loglik;
        let mut best_dist = 0.0;
        for (i, r) in results.iter().enumerate() {
            let Some((_, ll, its, rdg)) = r else { continue };
            iterations += its;
            ridges += rdg;
            let dist = (cands[i] - inc_b).abs();
            if *ll > best_ll + 1e-12 || ((*ll - best_ll).abs() <= 1e-12 && dist < best_dist) {
                choice = Some(i);
                best_ll = *ll;
                best_dist = dist;
            }
        }
        let cand_best = results
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.as_ref().map(|r| (i, r.1)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i);
        if let Some(i) = choice {
            let (p, ll, _, _) = results[i].clone().unwrap();
            inc = State { params: p, loglik: ll };
        }
        trace.push(TracePoint {
            iteration: cycle,
            loglik: inc.loglik,
        });
        cycles.push(CycleRecord {
            phase,
            candidates: cands
                .iter()
                .zip(&results)
                .map(|(&b, r)| Candidate {
                    b,
                    loglik: r.as_ref().map(|r| r.1),
                })
                .collect(),
            accepted_b: inc.params.b,
            accepted_loglik: inc.loglik,
        });
        let delta = rel_change(inc.loglik, prev_ll);

        // Step 6-7: advance the search on b.
        match phase {
            SearchPhase::Golden => {
                let pts = [cands[0], cands[1], cands[2], cands[3]];
                let best_idx = cand_best.unwrap_or(1);
                bracket = golden_shrink(&pts, best_idx);
                golden_done += 1;
                if golden_done >= cfg.golden_iters || delta < em.weak_tol || bracket.1 - bracket.0 < cfg.quad_tol {
                    phase = SearchPhase::Quadratic;
                    half_width = (0.25 * (bracket.1 - bracket.0)).max(cfg.quad_tol);
                    center = inc.params.b;
                }
            }
            SearchPhase::Quadratic => {
                let pts: Vec<(f64, f64)> = cands
                    .iter()
                    .zip(&results)
                    .filter_map(|(&b, r)| r.as_ref().map(|r| (b, r.1)))
                    .collect();
                let step = if pts.len() == 3 {
                    quadratic_candidates([pts[0], pts[1], pts[2]], cfg.b_bracket)?
                } else {
                    QuadraticStep::NotConcave
                };
                match step {
                    QuadraticStep::Vertex(v) | QuadraticStep::Midpoint(v) => {
                        center = v;
                        half_width *= 0.5;
                    }
                    QuadraticStep::NotConcave => {
                        // golden-style move toward the best evaluated point
                        center = cand_best.map_or(inc.params.b, |i| cands[i]);
                        half_width *= INV_PHI;
                    }
                }
                if 2.0 * half_width < cfg.quad_tol && delta < em.tol_loglik {
                    converged = true;
                    break;
                }
                if half_width < 1e-6 {
                    converged = delta < em.weak_tol;
                    break;
                }
            }
        }
    }

    // Final θ₁ refinement at the accepted bandwidth.
    let polish = em_run(inc.params.clone(), model, em.tol_loglik, em.max_iter, em.rule)?;
    ridges += polish.ridges;
    iterations += polish.iterations;
    if polish.eval.loglik >= inc.loglik {
        inc = State {
            params: polish.params,
            loglik: polish.eval.loglik,
        };
    }
    converged &= polish.converged;
    trace.push(TracePoint {
        iteration: cycles.len() + 1,
        loglik: inc.loglik,
    });

    Ok(FitResult {
        params: inc.params,
        loglik_trace: trace,
        b_trace,
        converged,
        iterations,
        ridge_events: ridges,
        cycles,
    })
}

/// Three distinct points centred on `center`, kept inside the bracket.
fn quadratic_triple(center: f64, half_width: f64, bracket: (f64, f64)) -> Vec<f64> {
    let (lo, hi) = bracket;
    let h = half_width.min(0.5 * (hi - lo));
    let c = center.clamp(lo + h, hi - h);
    vec![c - h, c, c + h]
}

/// Dense posterior mean of the random effects, E[η | y] = K S′Σ⁻¹(y − Xβ̂).
pub fn posterior_mean(params: &SmeParams, eval: &Evaluation) -> DVector<f64> {
    &params.k * eval.factor.basis().tr_mul_vec(&eval.gls.sigma_inv_resid)
}
