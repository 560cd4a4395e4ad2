use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{kl_divergence, mad, median, morans_i, mspe, pic, rkse, MoranWeights};
use super::{sample_k, simulate_field, DesignKind, KType, SimDesign, SimRng};
use crate::error::{Error, Result};
use crate::estimation::{aecm_fit, em_fit, initial_params, AecmConfig, EmConfig, UpdateRule};
use crate::geometry::Metric;
use crate::model::{assemble_cov, SmeModel, SmeParams};
use crate::prediction::{prediction_interval, KrigingOutput, PredictionRequest, Predictor};

/// A reported row: K type, measurement-error variance and true b. The
/// fine-scale variance and sampling design are nuisance factors that the
/// row medians run over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub k_type: KType,
    pub sigma_eps2: f64,
    pub b: f64,
}

impl StudyCell {
    /// The full factorial grid {M, P, N} × {1, 10, 100} × {0.5, 1, 1.5, 2}.
    pub fn paper_grid() -> Vec<StudyCell> {
        let mut out = Vec::new();
        for k_type in KType::ALL {
            for sigma_eps2 in [1.0, 10.0, 100.0] {
                for b in [0.5, 1.0, 1.5, 2.0] {
                    out.push(StudyCell { k_type, sigma_eps2, b });
                }
            }
        }
        out
    }
}

/// Defaults follow the paper's study: the literal variance update
/// (`UpdateRule::Marginal`) and EM comparison fits at b = 1.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub replicates: usize,
    pub seed: u64,
    pub sigma_delta2: Vec<f64>,
    pub designs: Vec<DesignKind>,
    pub aecm: AecmConfig,
    /// Bandwidth constant held fixed by the EM comparison fit.
    pub em_b: f64,
    /// Nominal coverage of the prediction intervals.
    pub level: f64,
    pub moran_weights: MoranWeights,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            replicates: 200,
            seed: 20_100_601,
            sigma_delta2: vec![0.01, 0.1, 1.0],
            designs: vec![DesignKind::Random, DesignKind::Clustered],
            aecm: AecmConfig {
                em: EmConfig {
                    rule: UpdateRule::Marginal,
                    ..EmConfig::default()
                },
                ..AecmConfig::default()
            },
            em_b: 1.5,
            level: 0.95,
            moran_weights: MoranWeights::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::invalid("replicate count must be at least 1"));
        }
        if self.sigma_delta2.is_empty() || self.designs.is_empty() {
            return Err(Error::invalid(
                "study needs at least one fine-scale variance and one design",
            ));
        }
        if self.sigma_delta2.len() > 256 || self.designs.len() > 256 {
            return Err(Error::invalid("at most 256 nuisance levels per factor"));
        }
        if !(self.em_b > 0.0) {
            return Err(Error::invalid("em_b must be positive"));
        }
        self.aecm.validate()
    }
}

/// Stream id for one replicate: cell, σδ² level, design and replicate index
/// packed into one counter so the draw does not depend on execution order.
pub fn replicate_stream(cell: usize, sd2_idx: usize, design_idx: usize, rep: usize) -> u64 {
    ((cell as u64) << 48) | ((sd2_idx as u64) << 40) | ((design_idx as u64) << 32) | rep as u64
}

/// Per-method results of one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    /// Over unobserved locations.
    pub mspe: f64,
    /// Median KSE over unobserved locations.
    pub median_kse: f64,
    /// Over all domain locations.
    pub pic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub metrics: MethodMetrics,
    pub beta: [f64; 2],
    pub sigma_delta2: f64,
    /// Mean |K̂ᵢⱼ − Kᵢⱼ|.
    pub k_abs_err: f64,
    pub b: f64,
    /// KL(true ‖ fitted) over the observed locations.
    pub kl: f64,
    pub loglik: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub cell: usize,
    pub sigma_delta2: f64,
    pub design: DesignKind,
    pub rep: usize,
    pub truth: MethodMetrics,
    pub aecm: FitSummary,
    pub em: FitSummary,
    /// OLS-residual Moran's I p-value.
    pub moran_p: f64,
    /// The sampled K needed eigenvalue clipping.
    pub k_projected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub cell: usize,
    pub sigma_delta2: f64,
    pub design: DesignKind,
    pub rep: usize,
    pub error: String,
}

fn method_metrics(
    out: &KrigingOutput,
    truth: &DVector<f64>,
    unobserved: &[usize],
    level: f64,
) -> Result<MethodMetrics> {
    let pick = |v: &DVector<f64>| DVector::from_iterator(unobserved.len(), unobserved.iter().map(|&i| v[i]));
    let iv = prediction_interval(out, level)?;
    Ok(MethodMetrics {
        mspe: mspe(&pick(&out.yhat), &pick(truth))?,
        median_kse: median(pick(&out.kse).as_slice())?,
        pic: pic(&iv, truth)?,
    })
}

/// Runs one replicate of one design: simulate, fit by AECM and by EM at
/// fixed b, and predict over the whole domain with true and fitted
/// parameters.
pub fn run_replicate(
    design: &SimDesign,
    cfg: &StudyConfig,
    rng: &mut SimRng,
) -> Result<(ReplicateOutcome, DVector<f64>)> {
    let sampled = sample_k(design, rng)?;
    let field = simulate_field(design, &sampled.k, rng)?;
    let model = SmeModel::new(field.data.clone(), design.knots.clone(), Metric::Euclidean)?;
    let observed = &field.observed;
    let unobserved: Vec<usize> = {
        let mut mask = vec![true; field.domain_locations.len()];
        for &i in observed {
            mask[i] = false;
        }
        (0..mask.len()).filter(|&i| mask[i]).collect()
    };
    let x_full = design.design_matrix(&field.domain_locations);
    let request = PredictionRequest::new(
        field.domain_locations.clone(),
        x_full,
        DVector::from_element(field.domain_locations.len(), 1.0),
        &model.data,
    )?;
    let unobs = if unobserved.is_empty() {
        (0..field.domain_locations.len()).collect()
    } else {
        unobserved
    };

    let true_params = SmeParams::new(
        sampled.k.clone(),
        design.sigma_delta2,
        design.sigma_eps2,
        design.beta.clone(),
        design.b,
    )?;
    let true_out = Predictor::new(&true_params, &model)?.predict(&request)?;
    let truth_metrics = method_metrics(&true_out, &field.truth, &unobs, cfg.level)?;

    let true_cov = assemble_cov(&true_params, &model)?;
    let true_mean = &model.data.x * &design.beta;

    let summarize = |params: &SmeParams, loglik: f64, converged: bool| -> Result<FitSummary> {
        let out = Predictor::new(params, &model)?.predict(&request)?;
        let metrics = method_metrics(&out, &field.truth, &unobs, cfg.level)?;
        let cov = assemble_cov(params, &model)?;
        let kl = kl_divergence(&true_mean, &true_cov, &(&model.data.x * &params.beta), &cov)?;
        let k_abs_err = (&params.k - &sampled.k).abs().mean();
        Ok(FitSummary {
            metrics,
            beta: [params.beta[0], params.beta[1]],
            sigma_delta2: params.sigma_delta2,
            k_abs_err,
            b: params.b,
            kl,
            loglik,
            converged,
        })
    };

    let init = initial_params(&model, design.sigma_eps2, 1.5)?;
    let em = em_fit(&init.with_b(cfg.em_b), &model, &cfg.aecm.em)?;
    let aecm = aecm_fit(&init, &model, &cfg.aecm)?;
    let em_sum = summarize(&em.params, em.final_loglik(), em.converged)?;
    let aecm_sum = summarize(&aecm.params, aecm.final_loglik(), aecm.converged)?;

    let ols = ols_residuals(&model.data.x, &model.data.y)?;
    let moran = morans_i(&ols, &model.data.locations, cfg.moran_weights)?;

    Ok((
        ReplicateOutcome {
            cell: 0,
            sigma_delta2: design.sigma_delta2,
            design: design.design,
            rep: 0,
            truth: truth_metrics,
            aecm: aecm_sum,
            em: em_sum,
            moran_p: moran.p_value,
            k_projected: sampled.projected,
        },
        field.truth,
    ))
}

fn ols_residuals(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let beta = (x.transpose() * x)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite {
            target: crate::error::PdTarget::Gls,
            pivot: 0,
        })?
        .solve(&(x.transpose() * y));
    Ok(y - x * beta)
}

/// Every replicate of every cell, plus the failures that were excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOutput {
    pub cells: Vec<StudyCell>,
    pub outcomes: Vec<ReplicateOutcome>,
    pub failures: Vec<ReplicateFailure>,
}

/// Runs all replicates of all cells in parallel. Output is identical for a
/// fixed seed regardless of thread count.
pub fn run_study(cells: &[StudyCell], cfg: &StudyConfig) -> Result<StudyOutput> {
    cfg.validate()?;
    if cells.is_empty() {
        return Err(Error::invalid("study needs at least one cell"));
    }
    let mut tasks = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        for (s, &sd2) in cfg.sigma_delta2.iter().enumerate() {
            for (d, &design) in cfg.designs.iter().enumerate() {
                let sim = SimDesign::paper(cell.k_type, sd2, cell.sigma_eps2, cell.b, design);
                sim.validate()?;
                for rep in 0..cfg.replicates {
                    tasks.push((c, s, d, rep, sim.clone()));
                }
            }
        }
    }
    let results: Vec<std::result::Result<ReplicateOutcome, ReplicateFailure>> = tasks
        .par_iter()
        .map(|(c, s, d, rep, sim)| {
            let mut rng = SimRng::seed_from_u64(cfg.seed);
            rng.set_stream(replicate_stream(*c, *s, *d, *rep));
            run_replicate(sim, cfg, &mut rng)
                .map(|(mut o, _)| {
                    o.cell = *c;
                    o.rep = *rep;
                    o
                })
                .map_err(|e| ReplicateFailure {
                    cell: *c,
                    sigma_delta2: sim.sigma_delta2,
                    design: sim.design,
                    rep: *rep,
                    error: e.to_string(),
                })
        })
        .collect();
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(f) => {
                log::warn!("replicate {} of cell {} failed: {}", f.rep, f.cell, f.error);
                failures.push(f);
            }
        }
    }
    Ok(StudyOutput {
        cells: cells.to_vec(),
        outcomes,
        failures,
    })
}

/// Medians over the replicates (and nuisance levels) that were grouped
/// together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub k_type: KType,
    pub sigma_eps2: f64,
    pub b: f64,
    /// Set when the row is restricted to one fine-scale variance.
    pub sigma_delta2: Option<f64>,
    /// Set when the row is restricted to one sampling design.
    pub design: Option<DesignKind>,
    pub replicates: usize,
    pub failed: usize,
    pub mspe_true: f64,
    pub mspe_aecm: f64,
    pub mspe_em: f64,
    pub rkse_aecm: f64,
    pub rkse_em: f64,
    pub pic_true: f64,
    pub pic_aecm: f64,
    pub pic_em: f64,
    /// Fraction of replicates where AECM has the smaller KL divergence.
    pub kl_aecm_better: f64,
    pub median_b_aecm: f64,
    pub mad_b_aecm: f64,
    pub mad_beta0_aecm: f64,
    pub mad_beta0_em: f64,
    pub mad_beta1_aecm: f64,
    pub mad_beta1_em: f64,
    pub mad_sigma_delta2_aecm: f64,
    pub mad_sigma_delta2_em: f64,
    pub mad_k_aecm: f64,
    pub mad_k_em: f64,
    pub moran_p: f64,
    /// Fraction of replicates with Moran's I p-value below 0.05.
    pub moran_significant: f64,
}

/// How replicates are grouped into rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    /// One row per cell, medians over σδ² and design.
    Cell,
    /// One row per cell, σδ² level and design.
    CellNuisance,
}

impl StudyOutput {
    pub fn summarize(&self, grouping: Grouping) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        for (c, cell) in self.cells.iter().enumerate() {
            let mine: Vec<&ReplicateOutcome> = self.outcomes.iter().filter(|o| o.cell == c).collect();
            let fails: Vec<&ReplicateFailure> = self.failures.iter().filter(|f| f.cell == c).collect();
            match grouping {
                Grouping::Cell => rows.push(summarize_group(cell, None, None, &mine, fails.len())?),
                Grouping::CellNuisance => {
                    let mut keys: Vec<(f64, DesignKind)> = Vec::new();
                    for o in mine.iter() {
                        if !keys.iter().any(|k| k.0 == o.sigma_delta2 && k.1 == o.design) {
                            keys.push((o.sigma_delta2, o.design));
                        }
                    }
                    for (sd2, design) in keys {
                        let sub: Vec<&ReplicateOutcome> = mine
                            .iter()
                            .copied()
                            .filter(|o| o.sigma_delta2 == sd2 && o.design == design)
                            .collect();
                        let nf = fails
                            .iter()
                            .filter(|f| f.sigma_delta2 == sd2 && f.design == design)
                            .count();
                        rows.push(summarize_group(cell, Some(sd2), Some(design), &sub, nf)?);
                    }
                }
            }
        }
        Ok(rows)
    }
}

fn summarize_group(
    cell: &StudyCell,
    sigma_delta2: Option<f64>,
    design: Option<DesignKind>,
    group: &[&ReplicateOutcome],
    failed: usize,
) -> Result<MetricsRow> {
    if group.is_empty() {
        return Err(Error::invalid(format!("no successful replicates for cell {:?}", cell)));
    }
    let med = |f: &dyn Fn(&ReplicateOutcome) -> f64| median(&group.iter().map(|o| f(o)).collect::<Vec<_>>());
    let mad_of = |f: &dyn Fn(&ReplicateOutcome) -> (f64, f64)| -> Result<f64> {
        let dev: Vec<f64> = group
            .iter()
            .map(|o| f(o))
            .map(|(est, truth)| (est - truth).abs())
            .collect();
        median(&dev)
    };
    let frac =
        |f: &dyn Fn(&ReplicateOutcome) -> bool| group.iter().filter(|o| f(o)).count() as f64 / group.len() as f64;
    let rk = |f: &dyn Fn(&ReplicateOutcome) -> f64| -> Result<f64> {
        let est = DVector::from_iterator(group.len(), group.iter().map(|o| f(o)));
        let tru = DVector::from_iterator(group.len(), group.iter().map(|o| o.truth.median_kse));
        rkse(&est, &tru)
    };
    Ok(MetricsRow {
        k_type: cell.k_type,
        sigma_eps2: cell.sigma_eps2,
        b: cell.b,
        sigma_delta2,
        design,
        replicates: group.len(),
        failed,
        mspe_true: med(&|o| o.truth.mspe)?,
        mspe_aecm: med(&|o| o.aecm.metrics.mspe)?,
        mspe_em: med(&|o| o.em.metrics.mspe)?,
        rkse_aecm: rk(&|o| o.aecm.metrics.median_kse)?,
        rkse_em: rk(&|o| o.em.metrics.median_kse)?,
        pic_true: med(&|o| o.truth.pic)?,
        pic_aecm: med(&|o| o.aecm.metrics.pic)?,
        pic_em: med(&|o| o.em.metrics.pic)?,
        kl_aecm_better: frac(&|o| o.aecm.kl < o.em.kl),
        median_b_aecm: med(&|o| o.aecm.b)?,
        mad_b_aecm: mad(&group.iter().map(|o| o.aecm.b).collect::<Vec<_>>(), cell.b)?,
        mad_beta0_aecm: mad_of(&|o| (o.aecm.beta[0], 5.0))?,
        mad_beta0_em: mad_of(&|o| (o.em.beta[0], 5.0))?,
        mad_beta1_aecm: mad_of(&|o| (o.aecm.beta[1], 0.08))?,
        mad_beta1_em: mad_of(&|o| (o.em.beta[1], 0.08))?,
        mad_sigma_delta2_aecm: mad_of(&|o| (o.aecm.sigma_delta2, o.sigma_delta2))?,
        mad_sigma_delta2_em: mad_of(&|o| (o.em.sigma_delta2, o.sigma_delta2))?,
        mad_k_aecm: med(&|o| o.aecm.k_abs_err)?,
        mad_k_em: med(&|o| o.em.k_abs_err)?,
        moran_p: med(&|o| o.moran_p)?,
        moran_significant: frac(&|o| o.moran_p < 0.05),
    })
}
