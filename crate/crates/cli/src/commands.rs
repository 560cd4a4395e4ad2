use std::io::Write;
use std::path::Path;

use anyhow::Context;
use frk::estimation::{aecm_fit, em_fit, initial_params, UpdateRule};
use frk::geometry::{KnotLayout, Location};
use frk::io::{read_table, write_observations, write_predictions, FitFile, Table};
use frk::model::{Dataset, FitResult, SmeModel};
use frk::prediction::{prediction_interval, PredictionRequest, Predictor};
use frk::simulation::{mspe, run_study, sample_k, simulate_field, SimDesign, SimRng, StudyCell};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Method, RunConfig};
use crate::output::{write_atomic, StagedDir};
use crate::spec::{parse_target_grid, KnotGrid};
use crate::UsageError;

fn open(path: &Path) -> anyhow::Result<std::fs::File> {
    Ok(std::fs::File::open(path).map_err(|e| frk::Error::io(path, e))?)
}

fn read_csv_table(path: &Path, need_y: bool) -> anyhow::Result<Table> {
    read_table(open(path)?, need_y).with_context(|| format!("reading {}", path.display()))
}

fn dataset(t: &Table, intercept: bool) -> anyhow::Result<Dataset> {
    let n = t.locations.len();
    let x = t.design(intercept);
    if x.ncols() == 0 {
        return Err(frk::Error::data(None, "no covariates and no intercept").into());
    }
    Ok(Dataset::new(
        t.locations.clone(),
        x,
        t.y.clone()
            .ok_or_else(|| frk::Error::data(Some(1), "missing column 'y'"))?,
        t.vdelta.clone().unwrap_or_else(|| DVector::from_element(n, 1.0)),
        t.veps.clone().unwrap_or_else(|| DVector::from_element(n, 1.0)),
    )?)
}

fn knot_layout(cfg: &RunConfig, locations: &[Location]) -> anyhow::Result<KnotLayout> {
    match (&cfg.knots, &cfg.knot_grid) {
        (Some(_), Some(_)) => Err(UsageError("give either --knots or --knot-grid, not both".into()).into()),
        (Some(path), None) => {
            let layout = KnotLayout::read_csv(open(path)?).with_context(|| format!("reading {}", path.display()))?;
            match cfg.resolutions {
                None => Ok(layout),
                Some(l) if l == 0 || l > layout.resolutions().len() => Err(UsageError(format!(
                    "--resolutions {l} but {} has {} resolution(s)",
                    path.display(),
                    layout.resolutions().len()
                ))
                .into()),
                Some(l) => Ok(KnotLayout::new(
                    layout.knots().iter().filter(|k| k.resolution <= l).copied().collect(),
                )?),
            }
        }
        (None, Some(spec)) => spec.parse::<KnotGrid>()?.layout(locations, cfg.resolutions),
        (None, None) => Err(UsageError("one of --knots FILE or --knot-grid SPEC is required".into()).into()),
    }
}

/// Fits the model with the configured method.
fn fit_model(cfg: &RunConfig, model: &SmeModel) -> anyhow::Result<FitResult> {
    let se2 = cfg.require_sigma_eps2()?;
    let fit = match cfg.method {
        Method::Em => {
            let init = initial_params(model, se2, cfg.b.unwrap_or(cfg.b_init))?;
            em_fit(&init, model, &cfg.em_config(UpdateRule::Restricted))?
        }
        Method::Aecm => {
            let mut acfg = cfg.aecm_config(UpdateRule::Restricted);
            let b0 = match cfg.b {
                Some(b) => {
                    acfg.b_bracket = (b, b);
                    b
                }
                None => cfg.b_init,
            };
            let init = initial_params(model, se2, b0)?;
            aecm_fit(&init, model, &acfg)?
        }
    };
    if !fit.converged {
        log::warn!("fit stopped at the iteration cap without meeting the tolerance");
    }
    Ok(fit)
}

pub fn fit(cfg: &RunConfig, data_path: &Path, out: &Path) -> anyhow::Result<()> {
    let table = read_csv_table(data_path, true)?;
    let data = dataset(&table, cfg.intercept)?;
    let metric = cfg.metric()?;
    let layout = knot_layout(cfg, &data.locations)?;
    let model = SmeModel::new(data, layout.clone(), metric)?;
    log::info!(
        "fitting n = {}, m = {}, p = {}",
        model.data.n(),
        model.m(),
        model.data.p()
    );
    let fit = fit_model(cfg, &model)?;
    let file = FitFile::new(
        cfg.method.as_str(),
        metric,
        cfg.intercept,
        table.covariate_names.clone(),
        &layout,
        &fit,
    );
    let text = file.to_toml()?;
    write_atomic(out, |w| Ok(w.write_all(text.as_bytes())?))?;

    let p = &fit.params;
    println!("method        {}", cfg.method.as_str());
    println!("loglik        {:.6}", fit.final_loglik());
    println!("sigma_delta2  {:.6e}", p.sigma_delta2);
    println!(
        "K eigenvalues [{:.6e}, {:.6e}]",
        file.k_eigen_range.0, file.k_eigen_range.1
    );
    println!("beta          {}", join(p.beta.iter()));
    println!("iterations    {} (converged: {})", fit.iterations, fit.converged);
    if cfg.method == Method::Aecm {
        println!("b             {:.6}", p.b);
        println!("b trace       {}", join(fit.b_trace.iter()));
    }
    Ok(())
}

fn join<'a>(v: impl Iterator<Item = &'a f64>) -> String {
    v.map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ")
}

/// Loads a fitted model and the observations it was fitted to.
pub fn load_fit(model_path: &Path, data_path: &Path) -> anyhow::Result<(FitFile, SmeModel)> {
    let text = std::fs::read_to_string(model_path).map_err(|e| frk::Error::io(model_path, e))?;
    let file = FitFile::from_toml(&text).with_context(|| format!("reading {}", model_path.display()))?;
    let table = read_csv_table(data_path, true)?;
    if table.covariate_names != file.covariates {
        return Err(frk::Error::data(
            Some(1),
            format!(
                "covariates {:?} do not match the fitted model's {:?}",
                table.covariate_names, file.covariates
            ),
        )
        .into());
    }
    let data = dataset(&table, file.intercept)?;
    let model = SmeModel::new(data, file.layout()?, file.metric)?;
    Ok((file, model))
}

pub enum Targets<'a> {
    File(&'a Path),
    Grid(&'a str),
}

pub fn predict(
    cfg: &RunConfig,
    model_path: &Path,
    data_path: &Path,
    targets: Targets,
    out: &Path,
) -> anyhow::Result<()> {
    let (file, model) = load_fit(model_path, data_path)?;
    let params = file.params.to_params()?;
    let (locs, x0, v0) = match targets {
        Targets::File(path) => {
            let t = read_csv_table(path, false)?;
            if t.covariate_names != file.covariates {
                return Err(frk::Error::data(
                    Some(1),
                    format!(
                        "target covariates {:?} do not match the model's {:?}",
                        t.covariate_names, file.covariates
                    ),
                )
                .into());
            }
            let n = t.locations.len();
            let v0 = t.vdelta.clone().unwrap_or_else(|| DVector::from_element(n, 1.0));
            (t.locations.clone(), t.design(file.intercept), v0)
        }
        Targets::Grid(spec) => {
            if !file.covariates.is_empty() || !file.intercept {
                return Err(UsageError("grid targets carry no covariates; use --targets with a CSV".into()).into());
            }
            let locs = parse_target_grid(spec)?;
            let n = locs.len();
            (locs, DMatrix::from_element(n, 1, 1.0), DVector::from_element(n, 1.0))
        }
    };
    let req = match cfg.snap {
        Some(r) => PredictionRequest::with_snap(locs, x0, v0, &model.data, r)?,
        None => PredictionRequest::new(locs, x0, v0, &model.data)?,
    };
    let out_k = Predictor::new(&params, &model)?.predict(&req)?;
    if out_k.clamped > 0 {
        log::warn!(
            "{} kriging variances were slightly negative and clamped to zero",
            out_k.clamped
        );
    }
    let intervals = prediction_interval(&out_k, cfg.level)?;
    write_atomic(out, |w| {
        Ok(write_predictions(w, &req.targets, &out_k, &intervals, cfg.decompose)?)
    })?;
    log::info!("wrote {} predictions to {}", req.len(), out.display());
    Ok(())
}

/// Fold of each row: a seeded shuffle dealt round-robin into `k` folds.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> anyhow::Result<Vec<usize>> {
    if k < 2 || k > n {
        return Err(UsageError(format!("--folds must be in 2..={n}, got {k}")).into());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rand_chacha::ChaCha20Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (j, &i) in order.iter().enumerate() {
        fold[i] = j % k;
    }
    Ok(fold)
}

#[derive(Debug, Serialize)]
struct FoldRow {
    fold: String,
    n_test: usize,
    mspe: f64,
    b: Option<f64>,
    loglik: Option<f64>,
}

pub fn cv(cfg: &RunConfig, data_path: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let table = read_csv_table(data_path, true)?;
    let data = dataset(&table, cfg.intercept)?;
    let metric = cfg.metric()?;
    let layout = knot_layout(cfg, &data.locations)?;
    cfg.require_sigma_eps2()?;
    let folds = fold_assignment(data.n(), cfg.folds, cfg.seed)?;

    let results: Vec<anyhow::Result<(FoldRow, f64)>> = (0..cfg.folds)
        .into_par_iter()
        .map(|f| {
            let test: Vec<usize> = (0..data.n()).filter(|&i| folds[i] == f).collect();
            let train: Vec<usize> = (0..data.n()).filter(|&i| folds[i] != f).collect();
            let model = SmeModel::new(data.subset(&train), layout.clone(), metric)?;
            let fit = fit_model(cfg, &model).with_context(|| format!("fold {}", f + 1))?;
            let held = data.subset(&test);
            let req = PredictionRequest::new(held.locations.clone(), held.x.clone(), held.vdelta.clone(), &model.data)?;
            let pred = Predictor::new(&fit.params, &model)?.predict(&req)?;
            let sse = (&pred.yhat - &held.y).norm_squared();
            let row = FoldRow {
                fold: (f + 1).to_string(),
                n_test: test.len(),
                mspe: mspe(&pred.yhat, &held.y)?,
                b: Some(fit.params.b),
                loglik: Some(fit.final_loglik()),
            };
            Ok((row, sse))
        })
        .collect();
    let mut rows = Vec::new();
    let mut sse = 0.0;
    for r in results {
        let (row, s) = r?;
        sse += s;
        rows.push(row);
    }
    rows.push(FoldRow {
        fold: "all".into(),
        n_test: data.n(),
        mspe: sse / data.n() as f64,
        b: None,
        loglik: None,
    });
    emit_csv(&rows, out)?;
    eprintln!("{}-fold cross-validated MSPE {:.6}", cfg.folds, sse / data.n() as f64);
    Ok(())
}

fn emit_csv<T: Serialize>(rows: &[T], out: Option<&Path>) -> anyhow::Result<()> {
    let write = |w: &mut dyn Write| -> anyhow::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    };
    match out {
        Some(path) => write_atomic(path, write),
        None => write(&mut std::io::stdout().lock()),
    }
}

#[derive(Debug, Serialize)]
struct Manifest {
    seed: u64,
    k_type: frk::simulation::KType,
    design: frk::simulation::DesignKind,
    sigma_delta2: f64,
    sigma_eps2: f64,
    b: f64,
    n: usize,
    domain: (i64, i64),
    beta: Vec<f64>,
    replicates: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    index: usize,
    observations: String,
    truth: String,
    /// Rows of the true K.
    k: Vec<Vec<f64>>,
    /// The K draw needed eigenvalue clipping.
    k_projected: bool,
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let replicates = cfg.replicates.unwrap_or(1);
    if replicates == 0 {
        return Err(UsageError("--replicates must be at least 1".into()).into());
    }
    let design = SimDesign::paper(
        cfg.k_type,
        cfg.sigma_delta2,
        cfg.sigma_eps2.unwrap_or(1.0),
        cfg.b.unwrap_or(1.0),
        cfg.design,
    );
    design.validate().map_err(|e| UsageError(e.to_string()))?;
    let mut stage = StagedDir::new(out)?;
    let locs = design.domain_locations();
    let x = design.design_matrix(&locs);
    stage.write("targets.csv", |w| {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["coord1", "x1"])?;
        for (i, loc) in locs.iter().enumerate() {
            wr.write_record([format!("{:?}", loc.x()), format!("{:?}", x[(i, 1)])])?;
        }
        wr.flush()?;
        Ok(())
    })?;
    let mut entries = Vec::new();
    for r in 1..=replicates {
        let mut rng = SimRng::seed_from_u64(cfg.seed);
        rng.set_stream(r as u64);
        let sampled = sample_k(&design, &mut rng)?;
        let field = simulate_field(&design, &sampled.k, &mut rng)?;
        let obs = format!("observations_{r:03}.csv");
        let truth = format!("truth_{r:03}.csv");
        stage.write(&obs, |w| Ok(write_observations(w, &field.data, true)?))?;
        stage.write(&truth, |w| {
            let mut wr = csv::Writer::from_writer(w);
            wr.write_record(["coord1", "truth", "y", "observed"])?;
            for (i, loc) in field.domain_locations.iter().enumerate() {
                let seen = field.observed.binary_search(&i).is_ok();
                wr.write_record([
                    format!("{:?}", loc.x()),
                    format!("{:?}", field.truth[i]),
                    format!("{:?}", field.y_full[i]),
                    u8::from(seen).to_string(),
                ])?;
            }
            wr.flush()?;
            Ok(())
        })?;
        entries.push(ManifestEntry {
            index: r,
            observations: obs,
            truth,
            k: sampled.k.row_iter().map(|row| row.iter().copied().collect()).collect(),
            k_projected: sampled.projected,
        });
    }
    let manifest = Manifest {
        seed: cfg.seed,
        k_type: design.k_type,
        design: design.design,
        sigma_delta2: design.sigma_delta2,
        sigma_eps2: design.sigma_eps2,
        b: design.b,
        n: design.n,
        domain: design.domain,
        beta: design.beta.iter().copied().collect(),
        replicates: entries,
    };
    let text = toml::to_string(&manifest)?;
    stage.write("manifest.toml", |w| Ok(w.write_all(text.as_bytes())?))?;
    stage.commit()?;
    eprintln!("wrote {replicates} replicate(s) to {}", out.display());
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<()> {
    let study = cfg.study_config();
    let mut cells = Vec::new();
    for &k_type in &cfg.k_types {
        for &sigma_eps2 in &cfg.sigma_eps2_levels {
            for &b in &cfg.b_levels {
                cells.push(StudyCell { k_type, sigma_eps2, b });
            }
        }
    }
    if cells.is_empty() {
        return Err(UsageError("the study grid is empty".into()).into());
    }
    log::info!("running {} cells × {} replicates", cells.len(), study.replicates);
    let result = run_study(&cells, &study)?;
    if !result.failures.is_empty() {
        log::warn!("{} replicate(s) failed and were excluded", result.failures.len());
    }
    let rows = result.summarize(cfg.grouping.into())?;
    emit_csv(&rows, out)
}
