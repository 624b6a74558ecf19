//! Monte Carlo and analytic oracles for fitting, the generalized precision
//! estimate and the sample-size formula.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use sing::datagen::{gen_gaussian, gen_modified_rademacher, grid_precision, precision_support};
use sing::estimate::{component_objective, fit_component, fit_map, FitOptions};
use sing::experiments::standardized_abs_precision;
use sing::graphops::{induced_graph, sparsity_pattern, OrderingHeuristic};
use sing::linalg::{cholesky, pinv_psd, Matrix};
use sing::map::{SparsityPattern, TriangularMap};
use sing::precision::{estimate_precision, grad_alpha_omega, omega_hat};
use sing::scaling::{delta_star, n_star};
use sing::sing::{run_sing, SingConfig};
use sing::SampleSet;

fn chain_theta() -> Matrix<f64> {
    Matrix::from_rows(&[vec![1.0, -0.4, 0.0], vec![-0.4, 1.0, -0.4], vec![0.0, -0.4, 1.0]])
}

fn normal_samples(n: usize, p: usize, seed: u64) -> SampleSet<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * p).map(|_| rng.sample(StandardNormal)).collect();
    SampleSet::new(n, p, data).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn bootstrap(samples: &SampleSet<f64>, rng: &mut ChaCha20Rng) -> SampleSet<f64> {
    let n = samples.n();
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    samples.select_rows(&idx).unwrap()
}

#[test]
fn linear_fit_matches_inverse_cholesky_of_sample_covariance() {
    let n = 4000;
    let sigma = Matrix::from_rows(&[vec![2.0, 0.9], vec![0.9, 1.5]]);
    let l = cholesky(&sigma).unwrap();
    let z = normal_samples(n, 2, 21);
    let rows: Vec<Vec<f64>> = z
        .rows()
        .map(|r| vec![l[(0, 0)] * r[0], l[(1, 0)] * r[0] + l[(1, 1)] * r[1]])
        .collect();
    let x = SampleSet::from_rows(&rows).unwrap();

    // oracle: S(x) = K^{-1} (x - mean) with K the Cholesky factor of the 1/n covariance
    let mean: Vec<f64> = (0..2).map(|j| x.column(j).iter().sum::<f64>() / n as f64).collect();
    let mut cov = Matrix::<f64>::zeros(2, 2);
    for r in x.rows() {
        for a in 0..2 {
            for b in 0..2 {
                cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]) / n as f64;
            }
        }
    }
    let k = cholesky(&cov).unwrap();
    let kinv = [
        [1.0 / k[(0, 0)], 0.0],
        [-k[(1, 0)] / (k[(0, 0)] * k[(1, 1)]), 1.0 / k[(1, 1)]],
    ];

    let fit = fit_map(&x, &SparsityPattern::dense(2), &FitOptions::with_beta(1)).unwrap();
    let point = [0.3, -0.2];
    let tol = 5.0 / (n as f64).sqrt();
    let g0 = fit.map.component(0).gradient(&point).unwrap();
    let g1 = fit.map.component(1).gradient(&point).unwrap();
    assert!((g0[0] - kinv[0][0]).abs() < tol, "{g0:?} vs {kinv:?}");
    assert!((g1[0] - kinv[1][0]).abs() < tol, "{g1:?} vs {kinv:?}");
    assert!((g1[1] - kinv[1][1]).abs() < tol, "{g1:?} vs {kinv:?}");
    let s = fit.map.eval(&mean).unwrap();
    assert!(s[0].abs() < tol && s[1].abs() < tol, "{s:?}");
}

#[test]
fn random_restarts_reach_the_same_optimum() {
    let theta = chain_theta();
    let data = gen_gaussian(&theta, 1500, 5).unwrap().samples.standardize();
    let pattern = SparsityPattern::dense(3);
    let reference = fit_map(&data, &pattern, &FitOptions::with_beta(2)).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    for comp in reference.map.components() {
        let target = comp.flat_coefficients();
        for _ in 0..3 {
            let start: Vec<f64> = (0..target.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
            let mut c = comp.clone();
            c.set_flat_coefficients(&start).unwrap();
            let (fitted, diag) = fit_component(&c, &data, &FitOptions::with_beta(2)).unwrap();
            assert!(diag.converged);
            for (a, b) in fitted.flat_coefficients().iter().zip(&target) {
                assert!((a - b).abs() < 1e-5, "component {}: {a} vs {b}", comp.index());
            }
        }
    }
}

#[test]
fn newton_objective_decreases_and_gradient_vanishes() {
    let g = gen_modified_rademacher(2, 1000, 3).unwrap();
    let data = g.samples.standardize();
    let fit = fit_map(&data, &SparsityPattern::dense(4), &FitOptions::with_beta(3)).unwrap();
    for (k, c) in fit.components.iter().enumerate() {
        assert!(c.converged && c.grad_norm < 1e-6);
        assert_eq!(c.objective_trace.len(), c.iterations + 1);
        for w in c.objective_trace.windows(2) {
            assert!(w[1] <= w[0], "component {k}: {:?}", c.objective_trace);
        }
        let (_, grad, _) = component_objective(fit.map.component(k), &data).unwrap();
        assert!(grad.iter().all(|v| v.abs() < 1e-6));
    }
}

#[test]
fn dense_fit_equals_separate_component_fits() {
    let data = gen_gaussian(&chain_theta(), 800, 8).unwrap().samples.standardize();
    let options = FitOptions::with_beta(2);
    let fit = fit_map(&data, &SparsityPattern::dense(3), &options).unwrap();
    let start = TriangularMap::identity(SparsityPattern::dense(3), 2, options.quadrature_order).unwrap();
    for comp in start.components() {
        let (alone, _) = fit_component(comp, &data, &options).unwrap();
        assert_eq!(alone.flat_coefficients(), fit.map.component(comp.index()).flat_coefficients());
    }
}

#[test]
fn independent_normals_give_a_near_identity_map() {
    let n = 4000;
    let data = normal_samples(n, 3, 12);
    let bound = 5.0 / (n as f64).sqrt();
    for pattern in [SparsityPattern::dense(3), SparsityPattern::diagonal(3)] {
        let fit = fit_map(&data, &pattern, &FitOptions::with_beta(1)).unwrap();
        for comp in fit.map.components() {
            assert!(comp.flat_coefficients().iter().all(|c| c.abs() < bound), "{:?}", comp.flat_coefficients());
        }
    }
}

#[test]
fn information_block_matches_finite_differences() {
    let data = gen_modified_rademacher(1, 600, 4).unwrap().samples.standardize();
    let fit = fit_map(&data, &SparsityPattern::dense(2), &FitOptions::with_beta(2)).unwrap();
    for (k, c) in fit.components.iter().enumerate() {
        let comp = fit.map.component(k);
        let alpha = comp.flat_coefficients();
        let h = 1e-6;
        for i in 0..alpha.len() {
            let grad_at = |d: f64| {
                let mut a = alpha.clone();
                a[i] += d;
                let mut m = comp.clone();
                m.set_flat_coefficients(&a).unwrap();
                component_objective(&m, &data).unwrap().1
            };
            let (gp, gm) = (grad_at(h), grad_at(-h));
            for j in 0..alpha.len() {
                let fd = (gp[j] - gm[j]) / (2.0 * h);
                let scale = c.information[(j, i)].abs().max(1.0);
                assert!((fd - c.information[(j, i)]).abs() < 1e-5 * scale);
            }
        }
    }
}

#[test]
fn omega_error_shrinks_with_n() {
    let theta = chain_theta();
    let truth = standardized_abs_precision(&theta).unwrap();
    let mut medians = Vec::new();
    for n in [500, 2000, 8000] {
        let errors: Vec<f64> = (0..20)
            .map(|seed| {
                let data = gen_gaussian(&theta, n, 300 + seed).unwrap().samples.standardize();
                let fit = fit_map(&data, &SparsityPattern::dense(3), &FitOptions::with_beta(1)).unwrap();
                let om = omega_hat(&fit.map, &data).unwrap();
                om.as_slice().iter().zip(truth.as_slice()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            })
            .collect();
        medians.push(median(errors));
    }
    assert!(medians[0] > medians[1] && medians[1] > medians[2], "{medians:?}");
    // roughly 1/sqrt(n): a fourfold increase in n should at least not leave the error flat
    assert!(medians[2] < 0.75 * medians[0], "{medians:?}");
}

#[test]
fn bootstrap_spread_matches_delta_method() {
    let n = 2000;
    let data = gen_modified_rademacher(1, n, 6).unwrap().samples.standardize();
    let options = FitOptions::with_beta(2);
    let fit = fit_map(&data, &SparsityPattern::dense(2), &options).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let reps: Vec<Vec<f64>> = (0..50)
        .map(|_| {
            let b = bootstrap(&data, &mut rng);
            fit_map(&b, &SparsityPattern::dense(2), &options).unwrap().map.flat_coefficients()
        })
        .collect();
    let mut offset = 0;
    for c in &fit.components {
        let inv = pinv_psd(&c.information, 1e-12).inverse;
        for i in 0..c.information.rows() {
            let predicted = (inv[(i, i)] / n as f64).sqrt();
            let col: Vec<f64> = reps.iter().map(|r| r[offset + i]).collect();
            let ratio = sd(&col) / predicted;
            assert!((0.5..=2.0).contains(&ratio), "coefficient {}: ratio {ratio}", offset + i);
        }
        offset += c.information.rows();
    }
}

#[test]
fn exact_pattern_has_fewer_coefficients_and_lower_variance() {
    let theta = grid_precision(3, 0.3).unwrap();
    let truth = precision_support(&theta);
    let ord = OrderingHeuristic::default().order(&truth);
    let exact = sparsity_pattern(&induced_graph(&truth, &ord), &ord);
    let dense = SparsityPattern::dense(9);
    let options = FitOptions::with_beta(2);
    let mut omegas: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    let mut counts = [0, 0];
    for seed in 0..50 {
        let data = gen_gaussian(&theta, 1000, 500 + seed).unwrap().samples.standardize();
        for (slot, pattern) in [&dense, &exact].into_iter().enumerate() {
            let fit = fit_map(&data, pattern, &options).unwrap();
            counts[slot] = fit.map.n_coefficients();
            omegas[slot].push(omega_hat(&fit.map, &data).unwrap().as_slice().to_vec());
        }
    }
    let variance = |reps: &[Vec<f64>]| {
        let m = reps[0].len();
        let mean: Vec<f64> = (0..m).map(|i| reps.iter().map(|r| r[i]).sum::<f64>() / reps.len() as f64).collect();
        reps.iter()
            .map(|r| r.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (reps.len() - 1) as f64
    };
    assert!(counts[1] <= counts[0]);
    let (vd, ve) = (variance(&omegas[0]), variance(&omegas[1]));
    assert!(ve < vd, "exact {ve} dense {vd}");
}

#[test]
fn modified_rademacher_pairs_dominate_cross_pairs() {
    for seed in 0..20 {
        let g = gen_modified_rademacher(5, 2000, seed).unwrap();
        let data = g.samples.standardize();
        let fit = fit_map(&data, &SparsityPattern::dense(10), &FitOptions::with_beta(2)).unwrap();
        let om = omega_hat(&fit.map, &data).unwrap();
        let mut within = f64::INFINITY;
        let mut cross: f64 = 0.0;
        for j in 0..10 {
            for k in j + 1..10 {
                if g.truth.has_edge(j, k) {
                    within = within.min(om[(j, k)]);
                } else {
                    cross = cross.max(om[(j, k)]);
                }
            }
        }
        assert!(within > cross, "seed {seed}: within {within} cross {cross}");
    }
}

#[test]
fn gradient_of_omega_touches_only_dependent_components() {
    let data = gen_gaussian(&Matrix::from_rows(&[
        vec![1.0, -0.3, 0.0, 0.0],
        vec![-0.3, 1.0, -0.3, 0.0],
        vec![0.0, -0.3, 1.0, -0.3],
        vec![0.0, 0.0, -0.3, 1.0],
    ]), 500, 2)
    .unwrap()
    .samples
    .standardize();
    let fit = fit_map(&data, &SparsityPattern::dense(4), &FitOptions::with_beta(1)).unwrap();
    let offsets = fit.map.coefficient_offsets();
    for (j, k) in [(0, 1), (1, 2), (0, 3)] {
        let g = grad_alpha_omega(&fit.map, &data, j, k).unwrap();
        for m in 0..4 {
            let block = &g[offsets[m]..offsets[m + 1]];
            if m < j.max(k) {
                assert!(block.iter().all(|v| *v == 0.0), "pair ({j},{k}) component {m}");
            }
        }
        assert!(g.iter().any(|v| *v != 0.0));
    }
    let identity = TriangularMap::identity(SparsityPattern::dense(4), 1, 32).unwrap();
    let g = grad_alpha_omega(&identity, &data, 0, 2).unwrap();
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn rho_scales_with_duplicated_samples() {
    let data = gen_gaussian(&chain_theta(), 400, 4).unwrap().samples.standardize();
    let fit = fit_map(&data, &SparsityPattern::dense(3), &FitOptions::with_beta(1)).unwrap();
    let info = fit.information_blocks();
    let once = estimate_precision(&fit.map, &data, &info).unwrap();
    let idx: Vec<usize> = (0..data.n()).chain(0..data.n()).collect();
    let twice = estimate_precision(&fit.map, &data.select_rows(&idx).unwrap(), &info).unwrap();
    for j in 0..3 {
        for k in 0..3 {
            if j != k {
                let r = twice.rho[(j, k)] * 2f64.sqrt() / once.rho[(j, k)];
                assert!((r - 1.0).abs() < 1e-10, "{r}");
                assert!((twice.omega[(j, k)] - once.omega[(j, k)]).abs() < 1e-12);
            }
            assert_eq!(once.omega[(j, k)], once.omega[(k, j)]);
            assert_eq!(once.rho[(j, k)], once.rho[(k, j)]);
        }
    }
}

#[test]
fn rho_matches_bootstrap_spread() {
    let n = 2000;
    let data = gen_gaussian(&chain_theta(), n, 31).unwrap().samples.standardize();
    let pattern = SparsityPattern::dense(3);
    let options = FitOptions::with_beta(1);
    let fit = fit_map(&data, &pattern, &options).unwrap();
    let est = estimate_precision(&fit.map, &data, &fit.information_blocks()).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    let reps: Vec<Matrix<f64>> = (0..100)
        .map(|_| {
            let b = bootstrap(&data, &mut rng).standardize();
            let f = fit_map(&b, &pattern, &options).unwrap();
            omega_hat(&f.map, &b).unwrap()
        })
        .collect();
    for (j, k) in [(0, 1), (1, 2), (0, 2)] {
        let col: Vec<f64> = reps.iter().map(|m| m[(j, k)]).collect();
        let ratio = est.rho[(j, k)] / sd(&col);
        assert!((0.5..=2.0).contains(&ratio), "pair ({j},{k}) ratio {ratio}");
    }
}

#[test]
fn conditionally_independent_entry_vanishes() {
    let theta = chain_theta();
    let mut means = Vec::new();
    for n in [1000, 4000, 16000] {
        let vals: Vec<f64> = (0..20)
            .map(|seed| {
                let data = gen_gaussian(&theta, n, 700 + seed).unwrap().samples.standardize();
                let fit = fit_map(&data, &SparsityPattern::dense(3), &FitOptions::with_beta(1)).unwrap();
                omega_hat(&fit.map, &data).unwrap()[(0, 2)]
            })
            .collect();
        means.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
    assert!(means[2] < 0.5 * means[0], "{means:?}");
}

#[test]
fn n_star_is_invariant_to_relabeling() {
    let data = gen_gaussian(&chain_theta(), 600, 13).unwrap().samples.standardize();
    let options = FitOptions::with_beta(1);
    let fit = fit_map(&data, &SparsityPattern::dense(3), &options).unwrap();
    let est = estimate_precision(&fit.map, &data, &fit.information_blocks()).unwrap();
    let a = n_star(&est, 0.3, 0.1).unwrap();

    // shuffled columns, with the map ordering carried along
    let sigma = [2, 0, 1];
    let shuffled = data.permute_columns(&sigma).unwrap();
    let mut inv = [0; 3];
    for (c, &v) in sigma.iter().enumerate() {
        inv[v] = c;
    }
    let pattern = SparsityPattern::dense(3).with_permutation(inv.to_vec()).unwrap();
    let fit2 = fit_map(&shuffled, &pattern, &options).unwrap();
    let est2 = estimate_precision(&fit2.map, &shuffled, &fit2.information_blocks()).unwrap();
    let b = n_star(&est2, 0.3, 0.1).unwrap();
    assert_eq!(a.n_star, b.n_star);
    for j in 0..3 {
        for k in 0..3 {
            assert_eq!(a.per_pair[j][k], b.per_pair[sigma.iter().position(|&v| v == j).unwrap()][sigma.iter().position(|&v| v == k).unwrap()]);
        }
    }
}

#[test]
fn n_star_predicts_recovery_in_direction() {
    let theta = chain_theta();
    let truth = standardized_abs_precision(&theta).unwrap();
    let kappa = truth[(0, 1)].min(truth[(1, 2)]);
    let data = gen_gaussian(&theta, 5000, 1).unwrap().samples.standardize();
    let fit = fit_map(&data, &SparsityPattern::dense(3), &FitOptions::with_beta(1)).unwrap();
    let est = estimate_precision(&fit.map, &data, &fit.information_blocks()).unwrap();
    let m = 0.2;
    let ns = n_star(&est, kappa, m).unwrap();
    let delta = delta_star(3, m).unwrap();
    let rates: Vec<usize> = [1.0, 2.0, 4.0]
        .iter()
        .map(|mult| {
            let n = (ns.n_star * mult).ceil() as usize;
            (0..25u64)
                .filter(|seed| {
                    let d = gen_gaussian(&theta, n, 100 + seed).unwrap();
                    let cfg = SingConfig {
                        beta: 1,
                        delta,
                        ..SingConfig::default()
                    };
                    run_sing(&d.samples, &cfg).unwrap().graph == d.truth
                })
                .count()
        })
        .collect();
    assert!(rates[0] <= rates[1] && rates[1] <= rates[2], "{rates:?}");
    assert!(rates[2] * 100 > 80 * 25, "{rates:?}");
}
