use super::*;
use crate::geometry::apply_transform;
use crate::samplers::Chain;
use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{FRAC_PI_2, PI, TAU};

fn pts(dim: usize, rows: &[&[f64]]) -> PointSet {
    let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
    PointSet::from_rows(dim, &rows).unwrap()
}

fn theta2(phi: f64, tx: f64, ty: f64) -> TransformParams {
    TransformParams::new(2, vec![phi], vec![tx, ty]).unwrap()
}

fn random_points(rng: &mut impl Rng, dim: usize, n: usize, scale: f64) -> PointSet {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-scale..scale)).collect())
        .collect();
    PointSet::from_rows(dim, &rows).unwrap()
}

fn random_theta(rng: &mut impl Rng, dim: usize) -> TransformParams {
    let na = angle_count(dim);
    TransformParams::new(
        dim,
        (0..na).map(|_| rng.random_range(-PI..PI)).collect(),
        (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn chain_of(samples: Vec<TransformParams>, energies: Vec<f64>) -> Chain {
    let n = samples.len();
    Chain {
        samples,
        energies,
        accepted: vec![true; n],
        accept_count: n,
        proposal_count: n,
        seed: 0,
        first_iteration: 0,
    }
}

#[test]
fn single_pair_at_zero_distance() {
    let x = pts(2, &[&[0.0, 0.0]]);
    let y = pts(2, &[&[0.0, 0.0]]);
    let spec = ModelSpec::uniform(1.0, 1, 1);
    let ll = log_likelihood(&TransformParams::identity(2), &x, &y, &spec).unwrap();
    assert_eq!(ll, 0.0);
}

#[test]
fn two_term_mixture() {
    let x = pts(2, &[&[0.0, 0.0], &[1.0, 0.0]]);
    let y = pts(2, &[&[0.0, 0.0]]);
    let spec = ModelSpec::uniform(0.5, 2, 1);
    let ll = log_likelihood(&TransformParams::identity(2), &x, &y, &spec).unwrap();
    let expected = (0.5 * (1.0 + (-2.0f64).exp())).ln();
    assert_abs_diff_eq!(ll, expected, epsilon = 1e-14);
}

#[test]
fn joint_shift_leaves_likelihood_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_points(&mut rng, 3, 6, 2.0);
    let y = random_points(&mut rng, 3, 4, 2.0);
    let v = [0.7, -1.3, 2.1];
    let shift = |p: &PointSet| {
        let mut q = p.clone();
        for mut col in q.points.column_iter_mut() {
            for k in 0..3 {
                col[k] += v[k];
            }
        }
        q
    };
    let spec = ModelSpec::uniform(0.8, 6, 4);
    let id = TransformParams::identity(3);
    let a = log_likelihood(&id, &x, &y, &spec).unwrap();
    let b = log_likelihood(&id, &shift(&x), &shift(&y), &spec).unwrap();
    assert_abs_diff_eq!(a, b, epsilon = 1e-10);
}

#[test]
fn zero_prior_entries_are_excluded() {
    let x = pts(2, &[&[0.0, 0.0], &[5.0, 0.0]]);
    let y = pts(2, &[&[5.0, 0.0]]);
    let mut spec = ModelSpec::uniform(1.0, 2, 1);
    spec.corr_prior = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    let ll = log_likelihood(&TransformParams::identity(2), &x, &y, &spec).unwrap();
    assert_abs_diff_eq!(ll, -12.5, epsilon = 1e-12);
}

#[test]
fn invalid_models_are_rejected() {
    let x = pts(2, &[&[0.0, 0.0], &[1.0, 0.0]]);
    let y = pts(2, &[&[0.0, 0.0]]);
    let id = TransformParams::identity(2);

    let mut spec = ModelSpec::uniform(1.0, 2, 1);
    spec.corr_prior = DMatrix::zeros(2, 1);
    assert!(matches!(
        log_likelihood(&id, &x, &y, &spec),
        Err(Error::InvalidModel(_))
    ));

    let spec = ModelSpec::uniform(1.0, 3, 1);
    assert!(matches!(
        log_likelihood(&id, &x, &y, &spec),
        Err(Error::InvalidArgument(_))
    ));

    let spec = ModelSpec::uniform(0.0, 2, 1);
    assert!(matches!(
        log_likelihood(&id, &x, &y, &spec),
        Err(Error::InvalidModel(_))
    ));

    let y3 = pts(3, &[&[0.0, 0.0, 0.0]]);
    let spec = ModelSpec::uniform(1.0, 2, 1);
    assert!(matches!(
        log_likelihood(&id, &x, &y3, &spec),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn log_prior_forms() {
    let t = theta2(0.3, 1.0, 2.0);
    let flat = ModelSpec::uniform(1.0, 1, 1);
    assert_eq!(log_prior(&t, &flat), 0.0);
    let reg = flat.clone().with_regularizer(Regularizer::SquaredTranslation, 1.0);
    assert_eq!(log_prior(&t, &reg), -5.0);
    let zero_lambda = flat.clone().with_regularizer(Regularizer::SquaredTranslation, 0.0);
    assert_eq!(log_prior(&t, &zero_lambda), 0.0);
    let t3 = TransformParams::identity(3);
    let reg3 = flat.with_regularizer(Regularizer::SquaredTranslation, 0.5);
    assert_eq!(log_prior(&t3, &reg3), 0.0);
}

#[test]
fn energy_is_negative_log_likelihood_without_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let x = random_points(&mut rng, 3, 5, 2.0);
        let y = random_points(&mut rng, 3, 3, 2.0);
        let th = random_theta(&mut rng, 3);
        let spec = ModelSpec::uniform(0.7, 5, 3);
        let e = potential_energy(&th, &x, &y, &spec).unwrap();
        let ll = log_likelihood(&th, &x, &y, &spec).unwrap();
        assert_eq!(e, -ll);
    }
}

#[test]
fn regulariser_adds_squared_translation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_points(&mut rng, 2, 4, 2.0);
    let y = random_points(&mut rng, 2, 3, 2.0);
    let th = theta2(1.0, 0.4, -1.5);
    let spec = ModelSpec::uniform(0.7, 4, 3);
    let e0 = potential_energy(&th, &x, &y, &spec).unwrap();
    let reg = spec.with_regularizer(Regularizer::SquaredTranslation, 1.0);
    let e1 = potential_energy(&th, &x, &y, &reg).unwrap();
    assert_abs_diff_eq!(e1 - e0, 0.4 * 0.4 + 1.5 * 1.5, epsilon = 1e-12);
}

/// Reference and noise-free observation for the exhaustive-grid checks.
/// The true transform lies on the grid nodes used below.
pub(crate) fn tiny_instance() -> (PointSet, PointSet, TransformParams) {
    let x = pts(2, &[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0]]);
    let truth = theta2(FRAC_PI_2, 0.5, -0.5);
    let y = apply_transform(&truth, &x.select(&[0, 2])).unwrap();
    (x, y, truth)
}

pub(crate) fn grid_minimum(target: &RegistrationTarget) -> (f64, Vec<f64>) {
    let mut best = (f64::INFINITY, vec![]);
    for a in 0..40 {
        for i in 0..17 {
            for j in 0..17 {
                let th = [
                    a as f64 * TAU / 40.0,
                    -2.0 + 0.25 * i as f64,
                    -2.0 + 0.25 * j as f64,
                ];
                let e = target.energy(&th);
                if e < best.0 {
                    best = (e, th.to_vec());
                }
            }
        }
    }
    best
}

#[test]
fn grid_minimum_is_the_generating_transform() {
    let (x, y, truth) = tiny_instance();
    let spec = ModelSpec::uniform(0.05, 3, 2);
    let target = RegistrationTarget::new(&x, &y, &spec).unwrap();
    let (e_min, _) = grid_minimum(&target);
    let e_true = target.potential_energy(&truth).unwrap();
    assert!(e_true <= e_min + 1e-12, "{e_true} vs {e_min}");
}

#[test]
fn single_pair_translation_gradient() {
    let x = pts(2, &[&[0.0, 0.0]]);
    let y = pts(2, &[&[1.0, 0.0]]);
    let spec = ModelSpec::uniform(1.0, 1, 1);
    let g = grad_potential_energy(&TransformParams::identity(2), &x, &y, &spec).unwrap();
    assert_abs_diff_eq!(g[1], -1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(g[2], 0.0, epsilon = 1e-15);
}

#[test]
fn gradient_vanishes_at_noise_free_optimum() {
    let x = pts(
        3,
        &[
            &[0.0, 0.0, 0.0],
            &[1.0, 0.0, 0.0],
            &[0.0, 2.0, 0.0],
            &[0.0, 0.0, 3.0],
        ],
    );
    let truth = TransformParams::new(3, vec![0.4, -0.3, 2.0], vec![1.0, 2.0, -0.5]).unwrap();
    let y = apply_transform(&truth, &x).unwrap();
    let spec = ModelSpec::uniform(0.1, 4, 4);
    let g = grad_potential_energy(&truth, &x, &y, &spec).unwrap();
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-8, "{norm}");
}

pub(crate) fn finite_difference_gradient(target: &RegistrationTarget, theta: &[f64], h: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|k| {
            let mut up = theta.to_vec();
            let mut dn = theta.to_vec();
            up[k] += h;
            dn[k] -= h;
            (target.energy(&up) - target.energy(&dn)) / (2.0 * h)
        })
        .collect()
}

/// Relative error of the analytic gradient against central differences over
/// `count` random configurations; returns the worst case.
pub(crate) fn worst_gradient_error(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for c in 0..count {
        let dim = if c % 2 == 0 { 3 } else { 2 };
        let n = rng.random_range(1..8);
        let m = rng.random_range(1..6);
        let x = random_points(&mut rng, dim, n, 2.0);
        let y = random_points(&mut rng, dim, m, 2.0);
        let gamma = rng.random_range(0.3..2.0);
        let mut spec = ModelSpec::uniform(gamma, n, m);
        if c % 3 == 0 {
            spec = spec.with_regularizer(Regularizer::SquaredTranslation, rng.random_range(0.0..1.0));
        }
        let th = random_theta(&mut rng, dim);
        let target = RegistrationTarget::new(&x, &y, &spec).unwrap();
        let g = target.grad_potential_energy(&th).unwrap();
        let fd = finite_difference_gradient(&target, &th.to_vector(), 1e-6);
        let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = fd.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(diff / scale);
    }
    worst
}

#[test]
fn gradient_matches_finite_differences() {
    let worst = worst_gradient_error(2024, 100);
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn likelihood_is_invariant_to_observation_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_points(&mut rng, 3, 6, 2.0);
    let y = random_points(&mut rng, 3, 5, 2.0);
    let th = random_theta(&mut rng, 3);
    let spec = ModelSpec::uniform(0.6, 6, 5);
    let a = log_likelihood(&th, &x, &y, &spec).unwrap();
    let yp = y.select(&[3, 0, 4, 2, 1]);
    let b = log_likelihood(&th, &x, &yp, &spec).unwrap();
    assert_abs_diff_eq!(a, b, epsilon = 1e-10);
}

#[test]
fn likelihood_is_invariant_to_joint_relabelling() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, m) = (5, 3);
    let x = random_points(&mut rng, 2, n, 2.0);
    let y = random_points(&mut rng, 2, m, 2.0);
    let th = random_theta(&mut rng, 2);
    let mut prior = DMatrix::from_fn(n, m, |_, _| rng.random_range(0.1..1.0));
    for mut col in prior.column_iter_mut() {
        let s = col.sum();
        col /= s;
    }
    let mut spec = ModelSpec::uniform(0.9, n, m);
    spec.corr_prior = prior.clone();
    let a = log_likelihood(&th, &x, &y, &spec).unwrap();
    let perm = [2, 4, 0, 1, 3];
    let xp = x.select(&perm);
    spec.corr_prior = DMatrix::from_fn(n, m, |i, j| prior[(perm[i], j)]);
    let b = log_likelihood(&th, &xp, &y, &spec).unwrap();
    assert_abs_diff_eq!(a, b, epsilon = 1e-10);
}

#[test]
fn square_symmetry_gives_equal_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = pts(2, &[&[1.0, 1.0], &[-1.0, 1.0], &[-1.0, -1.0], &[1.0, -1.0]]);
    let y = random_points(&mut rng, 2, 3, 2.0);
    let spec = ModelSpec::uniform(0.5, 4, 3);
    for _ in 0..20 {
        let th = random_theta(&mut rng, 2);
        let mut rotated = th.clone();
        rotated.angles[0] += FRAC_PI_2;
        let a = potential_energy(&th, &x, &y, &spec).unwrap();
        let b = potential_energy(&rotated, &x, &y, &spec).unwrap();
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn large_distances_do_not_underflow() {
    let x = pts(2, &[&[0.0, 0.0], &[1.0, 0.0]]);
    let y = pts(2, &[&[1000.0, 0.0]]);
    let spec = ModelSpec::uniform(1.0, 2, 1);
    let target = RegistrationTarget::new(&x, &y, &spec).unwrap();
    let th = TransformParams::identity(2);
    let e = target.potential_energy(&th).unwrap();
    assert!(e.is_finite());
    // dominated by the nearer point at distance 999
    assert_abs_diff_eq!(e, 0.5 * 999.0f64.powi(2) + 2.0f64.ln() - (1.0 + (-999.5f64).exp()).ln(), epsilon = 1e-6);
    let g = target.grad_potential_energy(&th).unwrap();
    assert!(g.iter().all(|v| v.is_finite()));
}

#[test]
fn closest_correspondence_recovers_truth_without_noise() {
    let x = pts(3, &[&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 3.0]]);
    let truth = TransformParams::new(3, vec![0.4, -0.3, 2.0], vec![1.0, 2.0, -0.5]).unwrap();
    let picked = [3, 1, 0];
    let y = apply_transform(&truth, &x.select(&picked)).unwrap();
    for mode in [CorrespondenceMode::Closest, CorrespondenceMode::Assignment] {
        let c = estimate_correspondence(&truth, &x, &y, mode).unwrap();
        assert_eq!(c.assignment, picked.to_vec());
        let e = c.entries();
        assert_eq!(e[(3, 0)], 1);
        assert_eq!(e.sum(), 3);
    }
}

#[test]
fn assignment_avoids_shared_reference() {
    // both observations are nearest to reference 0
    let x = pts(2, &[&[0.0, 0.0], &[3.0, 0.0]]);
    let y = pts(2, &[&[0.1, 0.0], &[-0.2, 0.0]]);
    let id = TransformParams::identity(2);
    let closest = estimate_correspondence(&id, &x, &y, CorrespondenceMode::Closest).unwrap();
    assert_eq!(closest.assignment, vec![0, 0]);
    assert_eq!(closest.row_sums(), vec![2, 0]);
    let assigned = estimate_correspondence(&id, &x, &y, CorrespondenceMode::Assignment).unwrap();
    assert!(assigned.is_injective());
    assert_eq!(assigned.assignment, vec![1, 0]);
    // the observation moved to reference 1 pays more than under closest-point
    let cost = |c: &CorrespondenceMatrix, j: usize| {
        let xi = x.point(c.assignment[j]);
        let yj = y.point(j);
        (xi[0] - yj[0]).powi(2) + (xi[1] - yj[1]).powi(2)
    };
    assert!(cost(&assigned, 0) > cost(&closest, 0));
}

#[test]
fn single_point_correspondence() {
    let x = pts(2, &[&[0.0, 0.0]]);
    let y = pts(2, &[&[4.0, 4.0]]);
    let id = TransformParams::identity(2);
    for mode in [CorrespondenceMode::Closest, CorrespondenceMode::Assignment] {
        let c = estimate_correspondence(&id, &x, &y, mode).unwrap();
        assert_eq!(c.entries(), DMatrix::from_element(1, 1, 1u8));
    }
}

#[test]
fn ties_go_to_the_smallest_reference_index() {
    let x = pts(2, &[&[1.0, 0.0], &[-1.0, 0.0]]);
    let y = pts(2, &[&[0.0, 0.0]]);
    let c = estimate_correspondence(&TransformParams::identity(2), &x, &y, CorrespondenceMode::Closest)
        .unwrap();
    assert_eq!(c.assignment, vec![0]);
}

#[test]
fn assignment_needs_enough_references() {
    let x = pts(2, &[&[0.0, 0.0]]);
    let y = pts(2, &[&[0.0, 0.0], &[1.0, 1.0]]);
    let r = estimate_correspondence(&TransformParams::identity(2), &x, &y, CorrespondenceMode::Assignment);
    assert!(matches!(r, Err(Error::InfeasibleAssignment { observations: 2, references: 1 })));
}

#[test]
fn map_of_single_sample_is_that_sample() {
    let (x, y, _) = tiny_instance();
    let spec = ModelSpec::uniform(0.05, 3, 2);
    let s = theta2(TAU + 1.0, 0.2, 0.3);
    let e = potential_energy(&s, &x, &y, &spec).unwrap();
    let chain = chain_of(vec![s.clone()], vec![e]);
    let map = map_from_chain(&chain, &x, &y, &spec, false).unwrap();
    assert_eq!(map, canonicalize_params(&s));
}

#[test]
fn map_selects_minimum_energy_sample() {
    let (x, y, truth) = tiny_instance();
    let spec = ModelSpec::uniform(0.05, 3, 2);
    let others = [theta2(0.1, 0.0, 0.0), theta2(2.0, 1.0, 1.0), truth.clone(), theta2(4.0, -1.0, 0.5)];
    let energies = others
        .iter()
        .map(|t| potential_energy(t, &x, &y, &spec).unwrap())
        .collect();
    let chain = chain_of(others.to_vec(), energies);
    let map = map_from_chain(&chain, &x, &y, &spec, false).unwrap();
    assert_eq!(map, truth);
    let polished = map_from_chain(&chain, &x, &y, &spec, true).unwrap();
    for (a, b) in polished.to_vector().iter().zip(truth.to_vector()) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
    }
}

#[test]
fn polish_never_raises_energy() {
    let (x, y, truth) = tiny_instance();
    let spec = ModelSpec::uniform(0.05, 3, 2);
    let target = RegistrationTarget::new(&x, &y, &spec).unwrap();
    let mut start = truth.to_vector();
    start[1] += 0.01;
    start[0] -= 0.005;
    let e0 = target.energy(&start);
    let (end, e1) = polish(&target, &start);
    assert!(e1 <= e0);
    let mut g = vec![0.0; 3];
    target.energy_and_gradient(&end, &mut g);
    assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6);
}

#[test]
fn empty_chain_is_rejected() {
    let (x, y, _) = tiny_instance();
    let spec = ModelSpec::uniform(0.05, 3, 2);
    let chain = chain_of(vec![], vec![]);
    assert!(matches!(
        map_from_chain(&chain, &x, &y, &spec, true),
        Err(Error::InvalidArgument(_))
    ));
    assert!(matches!(
        posterior_mean_from_chain(&chain),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn posterior_mean_of_identical_samples() {
    let s = TransformParams::new(3, vec![1.0, 0.5, 2.0], vec![1.0, -1.0, 0.25]).unwrap();
    let chain = chain_of(vec![s.clone(); 5], vec![0.0; 5]);
    let mean = posterior_mean_from_chain(&chain).unwrap();
    for (a, b) in mean.to_vector().iter().zip(s.to_vector()) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
    }
}

#[test]
fn circular_mean_wraps_around_zero() {
    let chain = chain_of(
        vec![theta2(0.1, 0.0, 0.0), theta2(TAU - 0.1, 2.0, 0.0)],
        vec![0.0; 2],
    );
    let mean = posterior_mean_from_chain(&chain).unwrap();
    assert_abs_diff_eq!(mean.angles[0], 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(mean.translation[0], 1.0, epsilon = 1e-12);
}

#[test]
fn posterior_mean_of_narrow_gaussian_samples() {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mu_phi, mu_t, sd) = (1.2, -0.7, 0.05);
    let noise = Normal::new(0.0, sd).unwrap();
    let n = 2000;
    let samples: Vec<_> = (0..n)
        .map(|_| {
            theta2(
                mu_phi + noise.sample(&mut rng),
                mu_t + noise.sample(&mut rng),
                noise.sample(&mut rng),
            )
        })
        .collect();
    let mean = posterior_mean_from_chain(&chain_of(samples, vec![0.0; n])).unwrap();
    let se = sd / (n as f64).sqrt();
    assert!((mean.angles[0] - mu_phi).abs() < 3.0 * se);
    assert!((mean.translation[0] - mu_t).abs() < 3.0 * se);
    assert!(mean.translation[1].abs() < 3.0 * se);
}
