mod common;

use common::*;
use frk::model::{assemble_cov, evaluate};
use frk::numerics::{factorize, LowRankCov};
use frk::prediction::{PredictionRequest, Predictor};
use frk::simulation::kl_divergence;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use std::sync::Arc;

#[test]
fn inverse_apply_and_logdet_match_dense() {
    for seed in 0..20 {
        let inst = random_instance(seed);
        let cov = assemble_cov(&inst.params, &inst.model).unwrap();
        let f = factorize(&cov).unwrap();
        let sigma = dense_sigma(&inst);
        let n = sigma.nrows();
        let rhs = DMatrix::from_fn(n, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let got = f.inverse_apply(&rhs).unwrap();
        let want = dense_inverse(&sigma) * &rhs;
        assert!(max_rel_err_mat(&got, &want) < 1e-8, "seed {seed}");
        assert!(rel_err(f.logdet(), dense_logdet(&sigma)) < 1e-8, "seed {seed}");
        let diag = f.inverse_diag();
        let dinv = dense_inverse(&sigma);
        assert!(max_rel_err(&diag, &dinv.diagonal()) < 1e-8, "seed {seed}");
    }
}

#[test]
fn gls_and_loglik_match_dense() {
    for seed in 100..120 {
        let inst = random_instance(seed);
        let eval = evaluate(&inst.params, &inst.model).unwrap();
        let si = dense_inverse(&dense_sigma(&inst));
        let g = dense_gls(&inst.model.data.x, &inst.model.data.y, &si);
        assert!(max_rel_err(&eval.gls.beta, &g.beta) < 1e-8, "seed {seed}");
        assert!(
            rel_err(eval.loglik, dense_restricted_loglik(&inst)) < 1e-8,
            "seed {seed}"
        );
    }
}

fn request_for(inst: &Instance, seed: u64) -> PredictionRequest {
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let data = &inst.model.data;
    let dim = data.locations[0].dim();
    let mut targets: Vec<_> = (0..15)
        .map(|_| {
            if dim == 1 {
                frk::geometry::Location::d1(rng.random_range(-10.0..110.0))
            } else {
                frk::geometry::Location::d2(rng.random_range(-10.0..110.0), rng.random_range(-10.0..110.0))
            }
        })
        .collect();
    targets.extend(data.locations.iter().take(5).copied());
    let nt = targets.len();
    let x0 = DMatrix::from_fn(
        nt,
        data.p(),
        |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) },
    );
    let v0 = DVector::from_fn(nt, |_, _| rng.random_range(0.5..2.0));
    PredictionRequest::new(targets, x0, v0, data).unwrap()
}

#[test]
fn kriging_matches_dense() {
    for seed in 200..220 {
        let inst = random_instance(seed);
        let req = request_for(&inst, seed);
        let out = Predictor::new(&inst.params, &inst.model)
            .unwrap()
            .with_batch(7)
            .predict(&req)
            .unwrap();
        let (yhat, kse) = dense_krige(&inst, &req.targets, &req.x0, &req.vdelta0);
        assert!(max_rel_err(&out.yhat, &yhat) < 1e-8, "seed {seed}");
        assert!(max_rel_err(&out.kse, &kse) < 1e-8, "seed {seed}");
        assert_eq!(&out.trend + &out.spatial, out.yhat);
    }
}

#[test]
fn kl_matches_dense() {
    for seed in 300..310 {
        let inst = random_instance(seed);
        let mut other = random_instance(seed);
        other.params.k *= 1.7;
        other.params.sigma_delta2 *= 0.6;
        other.params.b *= 1.2;
        let cp = assemble_cov(&inst.params, &inst.model).unwrap();
        let cq = assemble_cov(&other.params, &other.model).unwrap();
        let n = cp.n();
        let mp = DVector::from_fn(n, |i, _| (i as f64 * 0.1).sin());
        let mq = DVector::zeros(n);
        let got = kl_divergence(&mp, &cp, &mq, &cq).unwrap();
        let want = dense_kl(&mp, &dense_sigma(&inst), &mq, &dense_sigma(&other));
        assert!(rel_err(got, want) < 1e-8, "seed {seed}: {got} vs {want}");
        assert!(kl_divergence(&mp, &cp, &mp, &cp).unwrap().abs() < 1e-10);
    }
}

#[test]
fn kl_scalar_closed_form() {
    // P = N(0, 1), Q = N(1, 1), with S = 0 and D = 1
    let s = Arc::new(frk::basis::BasisMatrix::zeros(1, 1));
    let c = LowRankCov::new(s, DMatrix::identity(1, 1), DVector::from_element(1, 1.0)).unwrap();
    let kl = kl_divergence(&DVector::zeros(1), &c, &DVector::from_element(1, 1.0), &c).unwrap();
    assert!((kl - 0.5).abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kl_is_nonnegative(seed in 0u64..10_000, scale in 0.2f64..5.0) {
        let inst = random_instance(seed);
        let mut q = random_instance(seed);
        q.params.k *= scale;
        let cp = assemble_cov(&inst.params, &inst.model).unwrap();
        let cq = assemble_cov(&q.params, &q.model).unwrap();
        let mu = DVector::zeros(cp.n());
        prop_assert!(kl_divergence(&mu, &cp, &mu, &cq).unwrap() >= -1e-10);
    }

    #[test]
    fn smw_inverse_roundtrip(seed in 0u64..10_000) {
        let inst = random_instance(seed);
        let cov = assemble_cov(&inst.params, &inst.model).unwrap();
        let f = factorize(&cov).unwrap();
        let v = DVector::from_fn(cov.n(), |i, _| (i as f64).cos());
        let back = dense_sigma(&inst) * f.inverse_apply_vec(&v).unwrap();
        prop_assert!(max_rel_err(&back, &v) < 1e-8);
    }
}
