//! Flat run configuration. Values come from built-in defaults, then an
//! optional TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use frk::estimation::{AecmConfig, EmConfig, UpdateRule};
use frk::geometry::Metric;
use frk::simulation::{DesignKind, Grouping, KType, MoranWeights, StudyConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Em,
    Aecm,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Em => "em",
            Method::Aecm => "aecm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GroupingArg {
    /// One row per cell.
    Cell,
    /// One row per cell, σδ² level and design.
    Nuisance,
}

impl From<GroupingArg> for Grouping {
    fn from(g: GroupingArg) -> Self {
        match g {
            GroupingArg::Cell => Grouping::Cell,
            GroupingArg::Nuisance => Grouping::CellNuisance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    /// `euclidean` or `greatcircle[:radius]`.
    pub metric: String,
    /// Measurement-error variance. Required by `fit` and `cv`.
    pub sigma_eps2: Option<f64>,
    /// Fixed bandwidth constant (EM), or the true one for `simulate`.
    pub b: Option<f64>,
    pub b_bracket: (f64, f64),
    /// AECM starting bandwidth.
    pub b_init: f64,
    pub knots: Option<PathBuf>,
    pub knot_grid: Option<String>,
    pub resolutions: Option<usize>,
    pub intercept: bool,
    pub seed: u64,
    pub threads: Option<usize>,

    /// Variance update; `fit` and `cv` default to `restricted`, `evaluate`
    /// to `marginal`.
    pub rule: Option<UpdateRule>,
    pub max_iter: usize,
    pub tol_loglik: f64,
    pub weak_tol: f64,
    pub inner_max_iter: usize,
    pub golden_iters: usize,
    pub quad_tol: f64,
    pub max_cycles: usize,
    pub initial_b_set: Vec<f64>,

    pub level: f64,
    /// Snap prediction targets onto observations within this radius.
    pub snap: Option<f64>,
    pub decompose: bool,
    pub folds: usize,

    pub k_type: KType,
    pub design: DesignKind,
    pub sigma_delta2: f64,
    pub replicates: Option<usize>,

    pub k_types: Vec<KType>,
    pub sigma_eps2_levels: Vec<f64>,
    pub b_levels: Vec<f64>,
    pub sigma_delta2_levels: Vec<f64>,
    pub designs: Vec<DesignKind>,
    pub em_b: f64,
    pub grouping: GroupingArg,
    pub moran_weights: MoranWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        let em = EmConfig::default();
        let aecm = AecmConfig::default();
        let study = StudyConfig::default();
        RunConfig {
            method: Method::Aecm,
            metric: Metric::Euclidean.to_string(),
            sigma_eps2: None,
            b: None,
            b_bracket: aecm.b_bracket,
            b_init: 1.5,
            knots: None,
            knot_grid: None,
            resolutions: None,
            intercept: true,
            seed: study.seed,
            threads: None,
            rule: None,
            max_iter: em.max_iter,
            tol_loglik: em.tol_loglik,
            weak_tol: em.weak_tol,
            inner_max_iter: em.inner_max_iter,
            golden_iters: aecm.golden_iters,
            quad_tol: aecm.quad_tol,
            max_cycles: aecm.max_cycles,
            initial_b_set: aecm.initial_b_set,
            level: study.level,
            snap: None,
            decompose: false,
            folds: 5,
            k_type: KType::Matern,
            design: DesignKind::Random,
            sigma_delta2: 1.0,
            replicates: None,
            k_types: KType::ALL.to_vec(),
            sigma_eps2_levels: vec![1.0, 10.0, 100.0],
            b_levels: vec![0.5, 1.0, 1.5, 2.0],
            sigma_delta2_levels: study.sigma_delta2,
            designs: study.designs,
            em_b: study.em_b,
            grouping: GroupingArg::Cell,
            moran_weights: study.moran_weights,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| frk::Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn metric(&self) -> anyhow::Result<Metric> {
        self.metric
            .parse::<Metric>()
            .map_err(|e| UsageError(e.to_string()).into())
    }

    /// σε², which is an input and never estimated.
    pub fn require_sigma_eps2(&self) -> anyhow::Result<f64> {
        match self.sigma_eps2 {
            Some(v) if v > 0.0 && v.is_finite() => Ok(v),
            Some(v) => Err(UsageError(format!("--sigma-eps2 must be positive, got {v}")).into()),
            None => Err(UsageError(
                "--sigma-eps2 is required: the measurement-error variance is not estimated from the data. \
                 Supply it from instrument specifications or replicate measurements (see Kang, Cressie and \
                 Shi on separating measurement error from fine-scale variation)"
                    .into(),
            )
            .into()),
        }
    }

    pub fn em_config(&self, default_rule: UpdateRule) -> EmConfig {
        EmConfig {
            max_iter: self.max_iter,
            tol_loglik: self.tol_loglik,
            weak_tol: self.weak_tol,
            inner_max_iter: self.inner_max_iter,
            rule: self.rule.unwrap_or(default_rule),
        }
    }

    pub fn aecm_config(&self, default_rule: UpdateRule) -> AecmConfig {
        AecmConfig {
            em: self.em_config(default_rule),
            b_bracket: self.b_bracket,
            golden_iters: self.golden_iters,
            quad_tol: self.quad_tol,
            initial_b_set: self.initial_b_set.clone(),
            max_cycles: self.max_cycles,
        }
    }

    pub fn study_config(&self) -> StudyConfig {
        StudyConfig {
            replicates: self.replicates.unwrap_or(200),
            seed: self.seed,
            sigma_delta2: self.sigma_delta2_levels.clone(),
            designs: self.designs.clone(),
            aecm: self.aecm_config(UpdateRule::Marginal),
            em_b: self.em_b,
            level: self.level,
            moran_weights: self.moran_weights,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn study_defaults_match_library() {
        assert_eq!(RunConfig::default().study_config(), StudyConfig::default());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = toml::from_str("method = \"em\"\nsigma_eps2 = 2.0\n").unwrap();
        assert_eq!(c.method, Method::Em);
        assert_eq!(c.sigma_eps2, Some(2.0));
        assert_eq!(c.folds, 5);
        assert!(toml::from_str::<RunConfig>("no_such_key = 1").is_err());
    }

    #[test]
    fn sigma_eps2_is_required_and_positive() {
        let mut c = RunConfig::default();
        let e = c.require_sigma_eps2().unwrap_err().to_string();
        assert!(e.contains("not estimated"));
        c.sigma_eps2 = Some(0.0);
        assert!(c.require_sigma_eps2().is_err());
        c.sigma_eps2 = Some(0.5);
        assert_eq!(c.require_sigma_eps2().unwrap(), 0.5);
    }
}
