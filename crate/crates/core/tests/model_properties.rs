use varcomp::model::{simulate_responses, submodel_posterior, Concentration, PriorKind, PriorSpec};
use varcomp::sampler::{fit, sample_location};
use varcomp::seed::stream;
use varcomp::{Dataset, IntegrationConfig, MeanPrior, ModelPrior, PriorConfig, SamplerConfig};

fn ks_two_sample(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

fn ks_beta_1_k(mut xs: Vec<f64>, k: i32) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = 1.0 - (1.0 - x).powi(k);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

#[test]
fn phi_law_does_not_depend_on_t_max() {
    let draws = |t_max: f64, seed: u64| {
        let p = PriorSpec::dirichlet_relative(Concentration::Shared(0.7), t_max).unwrap();
        let mut rng = stream(seed, &[]);
        (0..40_000).map(|_| p.sample(3, &mut rng).phi()[0]).collect::<Vec<f64>>()
    };
    let d = ks_two_sample(draws(1.0, 1), draws(1e4, 2));
    assert!(d < 0.015, "two-sample KS {d}");

    // same property through the sampler with the data switched off
    let ds = Dataset::one_way(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![1.0, 5.0]]).unwrap();
    let phi = |t_max: f64, seed: u64| {
        let prior = ModelPrior {
            variance: PriorSpec::dirichlet_relative(Concentration::Shared(1.0), t_max).unwrap(),
            mean: MeanPrior::new(0.0, 1.0).unwrap(),
        };
        let cfg = SamplerConfig {
            chains: 2,
            iterations: 21_000,
            burn_in: 1000,
            thin: 2,
            seed,
            likelihood: false,
            ..Default::default()
        };
        fit(&ds, &prior, &cfg).unwrap().draws.iter().map(|d| d.phi[0]).collect::<Vec<f64>>()
    };
    let d = ks_two_sample(phi(0.5, 3), phi(500.0, 4));
    assert!(d < 0.04, "two-sample KS {d}");
}

#[test]
fn prior_only_chain_recovers_dirichlet() {
    let ds = Dataset::one_way(&[vec![0.0, 1.0, 0.5], vec![2.0, 3.0, 2.2], vec![1.0, 5.0, 4.0]]).unwrap();
    let prior = ModelPrior {
        variance: PriorSpec::dirichlet_relative(Concentration::Shared(1.0), 2.0).unwrap(),
        mean: MeanPrior::new(0.0, 1.0).unwrap(),
    };
    let cfg = SamplerConfig {
        chains: 4,
        iterations: 1000 + 25_000 * 4,
        burn_in: 1000,
        thin: 4,
        seed: 8,
        likelihood: false,
        ..Default::default()
    };
    let draws = fit(&ds, &prior, &cfg).unwrap();
    assert_eq!(draws.len(), 100_000);
    for k in 0..2 {
        // Dirichlet(1, 1) marginals are uniform
        let d = ks_beta_1_k(draws.draws.iter().map(|d| d.phi[k]).collect(), 1);
        assert!(d < 0.03, "component {k}: KS {d}");
    }
}

#[test]
fn mean_conditional_matches_closed_form() {
    let groups = vec![vec![1.0, 2.0, 0.5], vec![3.0, 2.5], vec![-1.0, 0.0, 0.5, 1.5]];
    let ds = Dataset::one_way(&groups).unwrap();
    let (sa, se) = (0.8, 1.3);
    let prior = MeanPrior::new(0.5, 2.0).unwrap();
    let mut prec = 1.0 / (prior.sd * prior.sd);
    let mut num = prior.mean / (prior.sd * prior.sd);
    for g in &groups {
        let v = se + g.len() as f64 * sa;
        prec += g.len() as f64 / v;
        num += g.iter().sum::<f64>() / v;
    }
    let (mean, var) = (num / prec, 1.0 / prec);
    let mut rng = stream(21, &[]);
    let n = 10_000;
    let mus: Vec<f64> = (0..n).map(|_| sample_location(&ds, &[sa, se], &prior, &mut rng).unwrap().0).collect();
    let m = mus.iter().sum::<f64>() / n as f64;
    let v = mus.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se_mean = (var / n as f64).sqrt();
    assert!((m - mean).abs() <= 3.0 * se_mean, "mean {m} vs {mean}");
    // variance of a sample variance from 10⁴ normal draws has rel SD ≈ 1.4%
    assert!((v / var - 1.0).abs() < 0.06, "variance {v} vs {var}");
}

type Pick = fn(&varcomp::sampler::Draw) -> f64;

fn quantiles(mut v: Vec<f64>) -> [f64; 3] {
    v.sort_by(f64::total_cmp);
    [0.1, 0.5, 0.9].map(|q| v[((v.len() - 1) as f64 * q).round() as usize])
}

#[test]
fn scale_equivariance() {
    let c = 10.0;
    let base = Dataset::one_way(&vec![vec![0.0; 4]; 6]).unwrap();
    let mut rng = stream(5, &[]);
    let y = simulate_responses(&base, 1.0, &[1.0, 0.5], &mut rng);
    let ds = base.with_responses(y.clone()).unwrap();
    let scaled = base.with_responses(y.iter().map(|v| c * v).collect()).unwrap();
    for kind in [PriorKind::DirichletRelative, PriorKind::IndependentUniform] {
        let cfgp = PriorConfig {
            kind,
            ..Default::default()
        };
        let (p1, p2) = (cfgp.resolve(&ds).unwrap(), cfgp.resolve(&scaled).unwrap());
        let sampler = |seed| SamplerConfig {
            chains: 4,
            iterations: 6000,
            burn_in: 1000,
            thin: 2,
            seed,
            ..Default::default()
        };
        // every update is equivariant, so with a shared seed the chains agree
        // draw by draw up to rounding, which is stronger than equality in law
        let d1 = fit(&ds, &p1, &sampler(1)).unwrap();
        let d2 = fit(&scaled, &p2, &sampler(1)).unwrap();
        let pick: [(&str, Pick); 5] = [
            ("mu", |d| d.mu),
            ("eta0", |d| d.effects[0][0]),
            ("sigma_group", |d| d.sigma2[0].sqrt()),
            ("sigma_residual", |d| d.sigma2[1].sqrt()),
            ("s_group", |d| d.finite_sd[0]),
        ];
        for (name, f) in pick {
            let a: Vec<f64> = d1.draws.iter().map(f).collect();
            let b: Vec<f64> = d2.draws.iter().map(|d| f(d) / c).collect();
            let mean = a.iter().sum::<f64>() / a.len() as f64;
            let sd = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
            for (qa, qb) in quantiles(a).into_iter().zip(quantiles(b)) {
                assert!((qa - qb).abs() < 1e-9 * sd, "{kind:?} {name}: {qa} vs {qb} (sd {sd})");
            }
        }
    }
}

#[test]
fn submodel_probabilities_stable_under_doubling() {
    let base = Dataset::one_way(&vec![vec![0.0; 6]; 8]).unwrap();
    let mut rng = stream(17, &[]);
    let ds = base
        .with_responses(simulate_responses(&base, 0.0, &[0.3, 1.0], &mut rng))
        .unwrap();
    let prior = PriorConfig {
        kind: PriorKind::ModelMixing,
        ..Default::default()
    }
    .resolve(&ds)
    .unwrap();
    let run = |draws: usize, seed| {
        submodel_posterior(
            &ds,
            &prior,
            &IntegrationConfig {
                draws,
                seed,
                ..Default::default()
            },
        )
        .unwrap()
    };
    let (a, b) = (run(2000, 1), run(4000, 2));
    for post in [&a, &b] {
        let total: f64 = post.submodels.iter().map(|s| s.posterior_prob).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    for (x, y) in a.submodels.iter().zip(&b.submodels) {
        let tol = 3.0 * (x.posterior_se.powi(2) + y.posterior_se.powi(2)).sqrt();
        assert!(
            (x.posterior_prob - y.posterior_prob).abs() <= tol,
            "{:?}: {} vs {} (tol {tol})",
            x.included,
            x.posterior_prob,
            y.posterior_prob
        );
    }
}

#[test]
fn sign_probability_of_a_clear_contrast() {
    let ds = Dataset::one_way(&[vec![0.0, 0.2, -0.1, 0.1], vec![3.0, 3.1, 2.9, 3.2], vec![1.0, 1.2, 0.9, 1.1]]).unwrap();
    let prior = PriorConfig::default().resolve(&ds).unwrap();
    let draws = fit(
        &ds,
        &prior,
        &SamplerConfig {
            chains: 2,
            iterations: 3000,
            burn_in: 1000,
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let f = varcomp::sampler::Functional::Contrast {
        source: 0,
        plus: 1,
        minus: 0,
    };
    let p = varcomp::sampler::sign_probability(&draws, &f).unwrap();
    assert!(p > 0.99, "{p}");
}
