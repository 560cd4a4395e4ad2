//! Dense n×n reference computations for the low-rank code paths, and a
//! generator of small random SME instances.
#![allow(dead_code)]

use frk::geometry::{Knot, KnotLayout, Location, Metric};
use frk::model::{Dataset, SmeModel, SmeParams};
use frk::simulation::{sample_k, simulate_field, DesignKind, KType, SimDesign, SimRng};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};

pub struct Instance {
    pub model: SmeModel,
    pub params: SmeParams,
}

/// Random instance with n ≤ 200, m ≤ 10, p ≤ 4, 1-D or 2-D, one or two
/// resolutions, random positive weights.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = SimRng::seed_from_u64(seed);
    let dim = if rng.random_bool(0.5) { 1 } else { 2 };
    let n = rng.random_range(10..=200);
    let p = rng.random_range(1..=4);
    let two_res = rng.random_bool(0.4);
    let m1 = rng.random_range(2..=if two_res { 5 } else { 10 });
    let m2 = if two_res { rng.random_range(2..=10 - m1) } else { 0 };
    let point = |rng: &mut SimRng| {
        if dim == 1 {
            Location::d1(rng.random_range(0.0..100.0))
        } else {
            Location::d2(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))
        }
    };
    let locations: Vec<Location> = (0..n).map(|_| point(&mut rng)).collect();
    let mut knots: Vec<Knot> = (0..m1)
        .map(|_| Knot {
            location: point(&mut rng),
            resolution: 1,
        })
        .collect();
    knots.extend((0..m2).map(|_| Knot {
        location: point(&mut rng),
        resolution: 2,
    }));
    let layout = KnotLayout::new(knots).unwrap();
    let m = layout.len();

    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
    let y = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let vdelta = DVector::from_fn(n, |_, _| rng.random_range(0.5..2.0));
    let veps = DVector::from_fn(n, |_, _| rng.random_range(0.5..2.0));
    let data = Dataset::new(locations, x, y, vdelta, veps).unwrap();
    let model = SmeModel::new(data, layout, Metric::Euclidean).unwrap();

    let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
    let k = &a * a.transpose() + DMatrix::identity(m, m) * 0.1;
    let b = rng.random_range(0.7..3.0);
    let params = SmeParams::new(
        k,
        rng.random_range(0.05..1.0),
        rng.random_range(0.05..1.0),
        DVector::zeros(p),
        b,
    )
    .unwrap();
    Instance { model, params }
}

pub fn dense_s(inst: &Instance) -> DMatrix<f64> {
    inst.model.basis(inst.params.b).unwrap().to_dense()
}

/// Σ = S K S′ + diag(σδ² v_δ + σε² v_ε), assembled densely.
pub fn dense_sigma(inst: &Instance) -> DMatrix<f64> {
    let s = dense_s(inst);
    let d = inst.params.dvec(&inst.model.data);
    &s * &inst.params.k * s.transpose() + DMatrix::from_diagonal(&d)
}

pub fn dense_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().cholesky().expect("oracle matrix is SPD").inverse()
}

pub fn dense_logdet(a: &DMatrix<f64>) -> f64 {
    let l = a.clone().cholesky().expect("oracle matrix is SPD");
    2.0 * l.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

pub struct DenseGls {
    pub beta: DVector<f64>,
    pub resid: DVector<f64>,
    pub info: DMatrix<f64>,
}

pub fn dense_gls(x: &DMatrix<f64>, y: &DVector<f64>, sigma_inv: &DMatrix<f64>) -> DenseGls {
    let info = x.transpose() * sigma_inv * x;
    let beta = dense_inverse(&info) * x.transpose() * sigma_inv * y;
    let resid = y - x * &beta;
    DenseGls { beta, resid, info }
}

/// −½ r′Σ⁻¹r − ½ log|Σ| − ½ log|X′Σ⁻¹X|
pub fn dense_restricted_loglik(inst: &Instance) -> f64 {
    let sigma = dense_sigma(inst);
    let si = dense_inverse(&sigma);
    let g = dense_gls(&inst.model.data.x, &inst.model.data.y, &si);
    -0.5 * g.resid.dot(&(&si * &g.resid)) - 0.5 * dense_logdet(&sigma) - 0.5 * dense_logdet(&g.info)
}

/// Dense kriging mean and KSE at the targets.
pub fn dense_krige(
    inst: &Instance,
    targets: &[Location],
    x0: &DMatrix<f64>,
    vdelta0: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let p = &inst.params;
    let data = &inst.model.data;
    let cfg = inst.model.basis_config(p.b).unwrap();
    let a = frk::basis::build_basis_matrix(targets, &cfg).unwrap().to_dense();
    let s = dense_s(inst);
    let mut c = &a * &p.k * s.transpose();
    for (i, t) in targets.iter().enumerate() {
        for (j, l) in data.locations.iter().enumerate() {
            if t.same_point(l) {
                c[(i, j)] += p.sigma_delta2 * vdelta0[i];
            }
        }
    }
    let sigma = dense_sigma(inst);
    let si = dense_inverse(&sigma);
    let g = dense_gls(&data.x, &data.y, &si);
    let yhat = x0 * &g.beta + &c * &si * &g.resid;
    let gap = x0.transpose() - data.x.transpose() * &si * c.transpose();
    let info_inv = dense_inverse(&g.info);
    let cov = &a * &p.k * a.transpose() + DMatrix::from_diagonal(&(vdelta0 * p.sigma_delta2))
        - &c * &si * c.transpose()
        + gap.transpose() * info_inv * &gap;
    let kse = DVector::from_fn(targets.len(), |i, _| cov[(i, i)].max(0.0).sqrt());
    (yhat, kse)
}

/// KL(N(μP, ΣP) ‖ N(μQ, ΣQ)) with dense matrices.
pub fn dense_kl(mu_p: &DVector<f64>, sp: &DMatrix<f64>, mu_q: &DVector<f64>, sq: &DMatrix<f64>) -> f64 {
    let qi = dense_inverse(sq);
    let d = mu_q - mu_p;
    0.5 * ((&qi * sp).trace() + d.dot(&(&qi * &d)) - mu_p.len() as f64 + dense_logdet(sq) - dense_logdet(sp))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn max_rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.amax().max(1.0);
    (a - b).amax() / scale
}

pub fn max_rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = b.amax().max(1.0);
    (a - b).amax() / scale
}

/// One paper-design field (simulated data and its true K) per seed, cycling
/// over K types, variances, bandwidths and designs.
pub fn paper_field(seed: u64) -> (SmeModel, SimDesign, DMatrix<f64>) {
    let i = seed as usize;
    let k_type = KType::ALL[i % 3];
    let sd2 = [0.01, 0.1, 1.0][(i / 3) % 3];
    let se2 = [1.0, 10.0, 100.0][(i / 9) % 3];
    let b = [0.5, 1.0, 1.5, 2.0][i % 4];
    let design = if (i / 2).is_multiple_of(2) {
        DesignKind::Random
    } else {
        DesignKind::Clustered
    };
    let d = SimDesign::paper(k_type, sd2, se2, b, design);
    let mut rng = SimRng::seed_from_u64(1000 + seed);
    let k = sample_k(&d, &mut rng).unwrap().k;
    let f = simulate_field(&d, &k, &mut rng).unwrap();
    let model = SmeModel::new(f.data, d.knots.clone(), Metric::Euclidean).unwrap();
    (model, d, k)
}
