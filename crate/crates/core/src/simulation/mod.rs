//! Synthetic SME fields on the 1-D integer domain, and the evaluation study
//! built on them.

mod metrics;
mod study;

pub use metrics::{kl_divergence, mad, median, morans_i, mspe, pic, rkse, MoranResult, MoranWeights};
pub use study::{
    replicate_stream, run_replicate, run_study, FitSummary, Grouping, MethodMetrics, MetricsRow, ReplicateFailure,
    ReplicateOutcome, StudyCell, StudyConfig, StudyOutput,
};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{build_basis_matrix, BasisConfig};
use crate::error::{Error, PdTarget, Result};
use crate::geometry::{place_knots, Domain, KnotLayout, KnotScheme, Location, Metric};
use crate::model::Dataset;
use crate::numerics::{cholesky, symmetrize};
use crate::special::bessel_k;

/// Study RNG: ChaCha20 with one stream per replicate.
pub type SimRng = ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KType {
    Matern,
    WishartPositive,
    Wishart,
}

impl KType {
    pub const ALL: [KType; 3] = [KType::Matern, KType::WishartPositive, KType::Wishart];

    /// One-letter table code (M, P, N).
    pub fn code(&self) -> &'static str {
        match self {
            KType::Matern => "M",
            KType::WishartPositive => "P",
            KType::Wishart => "N",
        }
    }
}

impl std::str::FromStr for KType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m" | "matern" => Ok(KType::Matern),
            "p" | "wishart_positive" | "wp" => Ok(KType::WishartPositive),
            "n" | "wishart" | "wn" => Ok(KType::Wishart),
            _ => Err(Error::invalid(format!("unknown K type '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    Random,
    Clustered,
}

impl std::str::FromStr for DesignKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(DesignKind::Random),
            "clustered" => Ok(DesignKind::Clustered),
            _ => Err(Error::invalid(format!("unknown sampling design '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    pub rho: f64,
    pub theta: f64,
    pub nu: f64,
}

impl Default for MaternParams {
    fn default() -> Self {
        MaternParams {
            rho: 9.0,
            theta: 96.0,
            nu: 1.0,
        }
    }
}

/// W ~ W_m(scale·I, df), sandwiched as diag(1..m)·W·diag(1..m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WishartParams {
    pub scale: f64,
    pub df: usize,
}

impl Default for WishartParams {
    fn default() -> Self {
        WishartParams { scale: 2.0, df: 10 }
    }
}

/// One simulation cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDesign {
    /// Integer domain {first, ..., last}.
    pub domain: (i64, i64),
    pub n: usize,
    pub design: DesignKind,
    pub k_type: KType,
    pub sigma_delta2: f64,
    pub sigma_eps2: f64,
    /// True bandwidth constant.
    pub b: f64,
    /// Intercept and slope in the location coordinate.
    pub beta: DVector<f64>,
    pub knots: KnotLayout,
    pub matern: MaternParams,
    pub wishart: WishartParams,
}

impl SimDesign {
    /// Domain {1..256}, n = 64, five knots at {0.5, 64.5, ..., 256.5},
    /// β = (5, 0.08).
    pub fn paper(k_type: KType, sigma_delta2: f64, sigma_eps2: f64, b: f64, design: DesignKind) -> Self {
        let knots = place_knots(
            &Domain::IntegerGrid { first: 1, last: 256 },
            &[5],
            KnotScheme::Regular1d,
        )
        .expect("fixed knot layout is valid");
        SimDesign {
            domain: (1, 256),
            n: 64,
            design,
            k_type,
            sigma_delta2,
            sigma_eps2,
            b,
            beta: DVector::from_vec(vec![5.0, 0.08]),
            knots,
            matern: MaternParams::default(),
            wishart: WishartParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let size = self.domain_size();
        if self.domain.1 < self.domain.0 {
            return Err(Error::EmptyDomain);
        }
        if self.n == 0 || self.n > size {
            return Err(Error::invalid(format!("n = {} must be in 1..={size}", self.n)));
        }
        if !(self.sigma_delta2 >= 0.0 && self.sigma_eps2 >= 0.0) {
            return Err(Error::invalid("variances must be nonnegative"));
        }
        if !(self.b > 0.0) {
            return Err(Error::invalid("b must be positive"));
        }
        if self.beta.len() != 2 {
            return Err(Error::invalid("beta must hold intercept and slope"));
        }
        Ok(())
    }

    pub fn domain_size(&self) -> usize {
        (self.domain.1 - self.domain.0 + 1).max(0) as usize
    }

    pub fn domain_locations(&self) -> Vec<Location> {
        (self.domain.0..=self.domain.1)
            .map(|i| Location::d1(i as f64))
            .collect()
    }

    /// Design matrix [1, s] at the given locations.
    pub fn design_matrix(&self, locs: &[Location]) -> DMatrix<f64> {
        DMatrix::from_fn(locs.len(), 2, |i, j| if j == 0 { 1.0 } else { locs[i].x() })
    }

    pub fn basis_config(&self) -> Result<BasisConfig> {
        BasisConfig::new(self.b, self.knots.clone(), Metric::Euclidean)
    }
}

/// Matérn covariance ρ/(2^{ν−1}Γ(ν)) (d/θ)^ν K_ν(d/θ), equal to ρ at d = 0.
pub fn matern_cov(d: f64, rho: f64, theta: f64, nu: f64) -> Result<f64> {
    if !(theta > 0.0 && nu > 0.0 && rho >= 0.0 && d >= 0.0) {
        return Err(Error::invalid(format!(
            "invalid Matérn arguments d={d}, rho={rho}, theta={theta}, nu={nu}"
        )));
    }
    if d == 0.0 {
        return Ok(rho);
    }
    let t = d / theta;
    let log_pref = (1.0 - nu) * std::f64::consts::LN_2 - statrs::function::gamma::ln_gamma(nu) + nu * t.ln();
    Ok(rho * log_pref.exp() * bessel_k(nu, t)?)
}

/// Matérn covariance matrix between the knots of a layout.
pub fn matern_matrix(knots: &KnotLayout, p: &MaternParams) -> Result<DMatrix<f64>> {
    let locs = knots.locations();
    let m = locs.len();
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = matern_cov(Metric::Euclidean.distance(&locs[i], &locs[j]), p.rho, p.theta, p.nu)?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// W ~ Wishart_m(scale·I, df) by the Bartlett decomposition, E[W] = df·scale·I.
pub fn sample_wishart<R: Rng + ?Sized>(m: usize, scale: f64, df: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if df < m {
        return Err(Error::invalid(format!("Wishart needs df >= m ({df} < {m})")));
    }
    let mut a = DMatrix::zeros(m, m);
    for i in 0..m {
        let chi = ChiSquared::new((df - i) as f64).map_err(|e| Error::invalid(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut w = &a * a.transpose() * scale;
    symmetrize(&mut w);
    Ok(w)
}

/// Clips eigenvalues below `floor` and re-symmetrizes. Returns true when a
/// clip was needed.
pub fn project_spd(k: &mut DMatrix<f64>, floor: f64) -> bool {
    symmetrize(k);
    let eig = SymmetricEigen::new(k.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) && cholesky(k, PdTarget::K).is_ok() {
        return false;
    }
    let lam = eig.eigenvalues.map(|l| l.max(floor));
    *k = &eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose();
    symmetrize(k);
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledK {
    pub k: DMatrix<f64>,
    /// The draw needed eigenvalue clipping to be positive definite.
    pub projected: bool,
}

/// Draws the random-effects covariance for a design.
pub fn sample_k<R: Rng + ?Sized>(design: &SimDesign, rng: &mut R) -> Result<SampledK> {
    let m = design.knots.len();
    match design.k_type {
        KType::Matern => Ok(SampledK {
            k: matern_matrix(&design.knots, &design.matern)?,
            projected: false,
        }),
        KType::Wishart | KType::WishartPositive => {
            let w = sample_wishart(m, design.wishart.scale, design.wishart.df, rng)?;
            let mut k = DMatrix::from_fn(m, m, |i, j| (i + 1) as f64 * w[(i, j)] * (j + 1) as f64);
            let mut projected = false;
            if design.k_type == KType::WishartPositive {
                k.apply(|v| *v = v.abs());
                projected = project_spd(&mut k, 1e-10);
            }
            Ok(SampledK { k, projected })
        }
    }
}

/// Observed positions (0-based offsets into the domain), sorted ascending.
/// Random designs draw uniformly from the whole domain; clustered designs
/// draw from alternate blocks of 32 locations, starting with the first.
pub fn sample_design<R: Rng + ?Sized>(
    domain_size: usize,
    n: usize,
    kind: DesignKind,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let pool: Vec<usize> = match kind {
        DesignKind::Random => (0..domain_size).collect(),
        DesignKind::Clustered => (0..domain_size).filter(|i| (i / 32) % 2 == 0).collect(),
    };
    if n > pool.len() {
        return Err(Error::invalid(format!(
            "cannot draw {n} locations from a pool of {}",
            pool.len()
        )));
    }
    let mut idx: Vec<usize> = rand::seq::index::sample(rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    idx.sort_unstable();
    Ok(idx)
}

/// A simulated field: observations at the sampled design plus the noiseless
/// process y − ε over the whole domain.
#[derive(Debug, Clone)]
pub struct SimulatedField {
    pub data: Dataset,
    pub observed: Vec<usize>,
    pub domain_locations: Vec<Location>,
    /// y − ε at every domain location.
    pub truth: DVector<f64>,
    /// y at every domain location.
    pub y_full: DVector<f64>,
}

fn mvn<R: Rng + ?Sized>(k: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let m = k.nrows();
    if k.iter().all(|&v| v == 0.0) {
        return Ok(DVector::zeros(m));
    }
    let l = cholesky(k, PdTarget::K)?;
    let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(l * z)
}

/// y = Xβ + Sη + δ + ε over the full domain, with η ~ N(0, K),
/// δ ~ N(0, σδ²I), ε ~ N(0, σε²I). A zero K yields η = 0.
pub fn simulate_field<R: Rng + ?Sized>(design: &SimDesign, k: &DMatrix<f64>, rng: &mut R) -> Result<SimulatedField> {
    design.validate()?;
    let observed = sample_design(design.domain_size(), design.n, design.design, rng)?;
    let locs = design.domain_locations();
    let s = build_basis_matrix(&locs, &design.basis_config()?)?;
    let x = design.design_matrix(&locs);
    let eta = mvn(k, rng)?;
    let nn = locs.len();
    let (sd, se) = (design.sigma_delta2.sqrt(), design.sigma_eps2.sqrt());
    let delta = DVector::from_fn(nn, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
    let eps = DVector::from_fn(nn, |_, _| se * rng.sample::<f64, _>(StandardNormal));
    let truth = &x * &design.beta + s.mul_vec(&eta) + delta;
    let y_full = &truth + eps;
    let obs_locs: Vec<Location> = observed.iter().map(|&i| locs[i]).collect();
    let data = Dataset::with_unit_weights(
        obs_locs,
        x.select_rows(&observed),
        DVector::from_iterator(observed.len(), observed.iter().map(|&i| y_full[i])),
    )?;
    Ok(SimulatedField {
        data,
        observed,
        domain_locations: locs,
        truth,
        y_full,
    })
}

/// (signal-to-noise, fine-scale proportion) of a design over its full domain:
/// tr(SKS′ + σδ²I)/tr(σε²I) and tr(σδ²I)/tr(SKS′ + σδ²I).
pub fn variance_ratios(design: &SimDesign, k: &DMatrix<f64>) -> Result<(f64, f64)> {
    let locs = design.domain_locations();
    let s = build_basis_matrix(&locs, &design.basis_config()?)?;
    let sk = s.mul_dense(k);
    let tr_sks: f64 = (0..locs.len())
        .map(|i| {
            let (c, v) = s.row(i);
            c.iter().zip(v).map(|(&j, &x)| x * sk[(i, j)]).sum::<f64>()
        })
        .sum();
    let nn = locs.len() as f64;
    let signal = tr_sks + design.sigma_delta2 * nn;
    Ok((signal / (design.sigma_eps2 * nn), design.sigma_delta2 * nn / signal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> SimRng {
        SimRng::seed_from_u64(seed)
    }

    #[test]
    fn matern_values() {
        assert_eq!(matern_cov(0.0, 9.0, 96.0, 1.0).unwrap(), 9.0);
        // ν = 1, d = θ: ρ·K₁(1)
        assert_relative_eq!(
            matern_cov(96.0, 9.0, 96.0, 1.0).unwrap(),
            9.0 * 0.601_907_230_197_234_6,
            max_relative = 1e-12
        );
        assert_relative_eq!(matern_cov(96.0, 9.0, 96.0, 1.0).unwrap(), 5.4172, epsilon = 1e-4);
        for d in [0.5, 10.0, 100.0, 400.0] {
            assert_relative_eq!(
                matern_cov(d, 2.0, 30.0, 0.5).unwrap(),
                2.0 * (-d / 30.0f64).exp(),
                max_relative = 1e-12
            );
        }
        assert!(matern_cov(1.0, 1.0, 0.0, 1.0).is_err());
        assert!(matern_cov(-1.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn matern_k_on_paper_knots() {
        let d = SimDesign::paper(KType::Matern, 0.1, 1.0, 1.5, DesignKind::Random);
        let k = sample_k(&d, &mut rng(1)).unwrap().k;
        assert_eq!(k[(0, 0)], 9.0);
        assert_eq!(k[(0, 1)], matern_cov(64.0, 9.0, 96.0, 1.0).unwrap());
        assert!(cholesky(&k, PdTarget::K).is_ok());
    }

    #[test]
    fn wishart_positive_is_nonnegative_spd() {
        let d = SimDesign::paper(KType::WishartPositive, 0.1, 1.0, 1.5, DesignKind::Random);
        let mut r = rng(7);
        for _ in 0..200 {
            let k = sample_k(&d, &mut r).unwrap().k;
            assert!(k.iter().all(|&v| v >= -1e-9));
            assert!(cholesky(&k, PdTarget::K).is_ok());
        }
    }

    #[test]
    fn clustered_design_stays_in_retained_blocks() {
        let mut r = rng(3);
        for _ in 0..50 {
            let idx = sample_design(256, 64, DesignKind::Clustered, &mut r).unwrap();
            assert_eq!(idx.len(), 64);
            for &i in &idx {
                let loc = i + 1;
                assert!(
                    (1..=32).contains(&loc)
                        || (65..=96).contains(&loc)
                        || (129..=160).contains(&loc)
                        || (193..=224).contains(&loc),
                    "location {loc}"
                );
            }
        }
    }

    #[test]
    fn random_design_distinct_and_full_pool() {
        let mut r = rng(4);
        let idx = sample_design(256, 64, DesignKind::Random, &mut r).unwrap();
        let mut u = idx.clone();
        u.dedup();
        assert_eq!(u.len(), 64);
        assert_eq!(
            sample_design(256, 256, DesignKind::Random, &mut r).unwrap(),
            (0..256).collect::<Vec<_>>()
        );
        let pool: Vec<usize> = (0..256).filter(|i| (i / 32) % 2 == 0).collect();
        assert_eq!(sample_design(256, 128, DesignKind::Clustered, &mut r).unwrap(), pool);
        assert!(sample_design(256, 129, DesignKind::Clustered, &mut r).is_err());
    }

    #[test]
    fn noiseless_field_is_the_trend() {
        let mut d = SimDesign::paper(KType::Matern, 0.0, 0.0, 1.5, DesignKind::Random);
        d.n = 10;
        let f = simulate_field(&d, &DMatrix::zeros(5, 5), &mut rng(2)).unwrap();
        for (i, l) in f.domain_locations.iter().enumerate() {
            assert_eq!(f.y_full[i], 5.0 + 0.08 * l.x());
            assert_eq!(f.truth[i], f.y_full[i]);
        }
        assert_eq!(f.data.n(), 10);
    }

    #[test]
    fn matern_variance_ratios() {
        let d = SimDesign::paper(KType::Matern, 1.0, 1.0, 1.5, DesignKind::Random);
        let k = sample_k(&d, &mut rng(0)).unwrap().k;
        let (snr, fine) = variance_ratios(&d, &k).unwrap();
        assert!(snr > 1.0 && fine > 0.0 && fine < 1.0);
    }
}
