mod common;

use common::instances::{central_diff, max_rel_err, random_instance, Spec};
use common::oracle;
use gptf_core::elbo::{compute_stats, solve_lambda, trunc_gauss_moments};
use gptf_core::model::Mode;
use gptf_core::{grad_binary, grad_continuous, optimal_qv, tight_elbo_binary, tight_elbo_continuous};
use nalgebra::DMatrix;

fn continuous_elbo(inst: &common::instances::Instance) -> f64 {
    let stats = compute_stats(&inst.batch, &inst.state).unwrap();
    tight_elbo_continuous(&stats, &inst.state).unwrap()
}

#[test]
fn continuous_bound_is_tight_with_inducing_points_at_data() {
    for seed in 0..10 {
        let n = 8 + seed as usize;
        let spec = Spec {
            dims: &[6, 7, 5],
            ranks: &[2, 2, 2],
            p: n,
            n,
            mode: Mode::Continuous,
            inducing_at_data: true,
            jitter: 1e-10,
        };
        let inst = random_instance(seed, &spec);
        let exact = oracle::dense_log_marginal(&inst.state, &inst.batch) + oracle::log_prior(&inst.state);
        let tight = continuous_elbo(&inst);
        assert!((tight - exact).abs() < 1e-6, "seed {seed}: {tight} vs {exact}");
    }
}

#[test]
fn continuous_bound_never_exceeds_evidence() {
    for seed in 0..30 {
        let spec = Spec {
            dims: &[8, 8],
            ranks: &[2, 2],
            p: 3 + seed as usize % 5,
            n: 12 + seed as usize % 10,
            mode: Mode::Continuous,
            inducing_at_data: false,
            jitter: 1e-6,
        };
        let inst = random_instance(seed + 100, &spec);
        let exact = oracle::dense_log_marginal(&inst.state, &inst.batch) + oracle::log_prior(&inst.state);
        assert!(continuous_elbo(&inst) <= exact + 1e-9);
    }
}

#[test]
fn optimal_posterior_closes_the_continuous_bound() {
    for seed in 0..10 {
        let spec = Spec {
            dims: &[7, 6],
            ranks: &[2, 1],
            p: 5,
            n: 20,
            mode: Mode::Continuous,
            inducing_at_data: false,
            jitter: 1e-6,
        };
        let inst = random_instance(seed + 200, &spec);
        let stats = compute_stats(&inst.batch, &inst.state).unwrap();
        let q = optimal_qv(&stats, &inst.state).unwrap();
        let naive = oracle::naive_elbo(&inst.state, &inst.batch, &q.mean, &q.cov);
        let tight = tight_elbo_continuous(&stats, &inst.state).unwrap();
        assert!((naive - tight).abs() < 1e-8, "seed {seed}: {naive} vs {tight}");

        let (m2, c2) = oracle::optimal_q_continuous(&inst.state, &inst.batch);
        assert!((m2 - &q.mean).amax() < 1e-8 && (c2 - &q.cov).amax() < 1e-8);

        // any other q(v) gives a smaller value
        let shifted = q.mean.add_scalar(0.1);
        let widened = &q.cov + DMatrix::identity(5, 5) * 0.05;
        assert!(oracle::naive_elbo(&inst.state, &inst.batch, &shifted, &q.cov) < tight);
        assert!(oracle::naive_elbo(&inst.state, &inst.batch, &q.mean, &widened) < tight);
    }
}

#[test]
fn binary_bound_matches_intermediate_bound_at_fixed_point() {
    for seed in 0..10 {
        let spec = Spec {
            dims: &[6, 6, 4],
            ranks: &[1, 2, 1],
            p: 6,
            n: 25,
            mode: Mode::Binary,
            inducing_at_data: false,
            jitter: 1e-6,
        };
        let inst = random_instance(seed + 300, &spec);
        let fp = solve_lambda(&inst.batch, &inst.state, 1e-13, 5000).unwrap();
        assert!(fp.converged);
        let state = inst.state.with_lambda(fp.lambda.clone()).unwrap();
        let stats = compute_stats(&inst.batch, &state).unwrap();
        let tight = tight_elbo_binary(&stats, &state).unwrap();

        let eta = oracle::etas(&state, &inst.batch, &fp.lambda);
        let tm = trunc_gauss_moments(&inst.batch, &state).unwrap();
        let z: Vec<f64> = eta.iter().zip(inst.batch.targets()).map(|(&e, &y)| oracle::trunc_moments(e, y).0).collect();
        for (a, b) in z.iter().zip(&tm.mean) {
            assert!((a - b).abs() < 1e-12);
        }
        let (mean, cv) = oracle::optimal_q_binary(&state, &inst.batch, &z);
        let dense = oracle::binary_intermediate(&state, &inst.batch, &eta, &mean, &cv);
        assert!((dense - tight).abs() < 1e-8, "seed {seed}: {dense} vs {tight}");
    }
}

#[test]
fn analytic_gradients_match_central_differences() {
    for (mode, seeds) in [(Mode::Continuous, 0..5u64), (Mode::Binary, 0..5u64)] {
        for seed in seeds {
            let spec = Spec {
                dims: &[5, 4, 3],
                ranks: &[2, 1, 2],
                p: 4,
                n: 18,
                mode,
                inducing_at_data: false,
                jitter: 1e-6,
            };
            let inst = random_instance(seed + 400, &spec);
            let x0 = inst.state.pack().values;
            let analytic = match mode {
                Mode::Continuous => grad_continuous(&inst.batch, &inst.state).unwrap(),
                Mode::Binary => grad_binary(&inst.batch, &inst.state).unwrap(),
            };
            let mut s = inst.state.clone();
            let fd = central_diff(&x0, 1e-5, |x| {
                s.set_flat(x).unwrap();
                let st = compute_stats(&inst.batch, &s).unwrap();
                match mode {
                    Mode::Continuous => tight_elbo_continuous(&st, &s).unwrap(),
                    Mode::Binary => tight_elbo_binary(&st, &s).unwrap(),
                }
            });
            let (err, at) = max_rel_err(&analytic, &fd, 1e-6);
            assert!(err < 1e-4, "{mode} seed {seed}: rel err {err} at {at}: {} vs {}", analytic[at], fd[at]);
        }
    }
}
