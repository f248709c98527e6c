use proptest::prelude::*;
use rand::SeedableRng;
use varcomp::anova::{expected_mean_squares, mom_estimates, sums_of_squares};
use varcomp::model::simulate_responses;
use varcomp::{analyze, AnovaTable, Dataset, FactorDecl, LayoutOptions, Observation};

fn crossed(a: usize, b: usize, n: usize, y: &[f64], relabel: bool) -> Dataset {
    let mut obs = Vec::new();
    for i in 0..a {
        for j in 0..b {
            for r in 0..n {
                let (la, lb) = if relabel {
                    (format!("x{}", a - 1 - i), format!("z{}", (j + 1) % b))
                } else {
                    (format!("a{i}"), format!("b{j}"))
                };
                obs.push(Observation::new(y[(i * b + j) * n + r], [("A", la), ("B", lb)]));
            }
        }
    }
    Dataset::build(
        &[FactorDecl::crossed("A"), FactorDecl::crossed("B")],
        obs,
        &LayoutOptions::default(),
    )
    .unwrap()
}

fn nested(a: usize, b: usize, n: usize, y: &[f64]) -> Dataset {
    let mut obs = Vec::new();
    for i in 0..a {
        for j in 0..b {
            for r in 0..n {
                obs.push(Observation::new(y[(i * b + j) * n + r], [("A", format!("a{i}")), ("B", format!("a{i}b{j}"))]));
            }
        }
    }
    Dataset::build(
        &[FactorDecl::crossed("A"), FactorDecl::nested("B", "A")],
        obs,
        &LayoutOptions::default(),
    )
    .unwrap()
}

fn ss_sorted(t: &AnovaTable) -> Vec<(String, f64)> {
    let mut v: Vec<(String, f64)> = t.rows.iter().map(|r| (r.name.clone(), r.ss)).collect();
    v.sort_by(|x, y| x.0.cmp(&y.0));
    v
}

fn total_ss(y: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| (v - mean).powi(2)).sum()
}

fn design() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (2usize..5, 2usize..5, 2usize..4)
        .prop_flat_map(|(a, b, n)| (Just(a), Just(b), Just(n), prop::collection::vec(-100.0f64..100.0, a * b * n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn balanced_ss_sum_to_total((a, b, n, y) in design()) {
        let total = total_ss(&y);
        for ds in [crossed(a, b, n, &y, false), nested(a, b, n, &y)] {
            let t = sums_of_squares(&ds).unwrap();
            let sum: f64 = t.rows.iter().map(|r| r.ss).sum();
            prop_assert!((sum - total).abs() <= 1e-9 * total.max(1e-300));
            prop_assert!(t.rows.iter().all(|r| r.ss >= 0.0 && (r.ms - r.ss / r.df as f64).abs() <= 1e-12 * r.ms.max(1.0)));
            prop_assert_eq!(t.rows.iter().map(|r| r.df).sum::<usize>(), a * b * n - 1);
        }
    }

    #[test]
    fn ss_invariant_to_order_and_relabelling((a, b, n, y) in design(), seed in any::<u64>()) {
        let base = sums_of_squares(&crossed(a, b, n, &y, false)).unwrap();
        let relabelled = sums_of_squares(&crossed(a, b, n, &y, true)).unwrap();
        let mut obs = crossed(a, b, n, &y, false).observations().to_vec();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(obs.as_mut_slice(), &mut rng);
        let shuffled = Dataset::build(
            &[FactorDecl::crossed("A"), FactorDecl::crossed("B")],
            obs,
            &LayoutOptions::default(),
        ).unwrap();
        let shuffled = sums_of_squares(&shuffled).unwrap();
        for other in [relabelled, shuffled] {
            for ((n1, s1), (n2, s2)) in ss_sorted(&base).into_iter().zip(ss_sorted(&other)) {
                prop_assert_eq!(n1, n2);
                prop_assert!((s1 - s2).abs() <= 1e-9 * s1.abs().max(1.0));
            }
        }
    }

    #[test]
    fn mom_round_trip((a, b, n, _y) in design(), sigma2 in prop::collection::vec(0.0f64..10.0, 4)) {
        let ds = crossed(a, b, n, &vec![0.0; a * b * n], false);
        let mut t = sums_of_squares(&ds).unwrap();
        t.ems = expected_mean_squares(&ds).unwrap();
        for (k, row) in t.rows.iter_mut().enumerate() {
            row.ms = t.ems[k].iter().zip(&sigma2).map(|(c, s)| c * s).sum();
        }
        let mom = mom_estimates(&t).unwrap();
        for (r, s) in mom.raw.iter().zip(&sigma2) {
            prop_assert!((r - s).abs() <= 1e-10 * s.max(1.0));
        }
    }
}

#[test]
fn raw_moment_estimates_are_unbiased() {
    const SIMS: usize = 10_000;
    let (a, b, n) = (3, 3, 2);
    let template = crossed(a, b, n, &vec![0.0; a * b * n], false);
    let names = analyze(&template).unwrap().names();
    let truth = [1.0, 0.5, 0.3, 1.0];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let est: Vec<Vec<f64>> = (0..SIMS)
        .map(|_| {
            let y = simulate_responses(&template, 2.0, &truth, &mut rng);
            analyze(&template.with_responses(y).unwrap()).unwrap().mom.unwrap().raw
        })
        .collect();
    for (k, name) in names.iter().enumerate() {
        let v: Vec<f64> = est.iter().map(|e| e[k]).collect();
        let mean = v.iter().sum::<f64>() / SIMS as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (SIMS - 1) as f64).sqrt();
        let z = (mean - truth[k]) / (sd / (SIMS as f64).sqrt());
        assert!(z.abs() <= 4.0, "{name}: mean {mean} vs {} (z = {z})", truth[k]);
    }
}
