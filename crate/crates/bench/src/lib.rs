//! Fixtures shared by the benchmarks.

use varcomp::{Dataset, FactorDecl, LayoutOptions, Observation};

/// Balanced `a × b` crossed layout with `n` replicates and deterministic
/// pseudo-random responses.
pub fn crossed(a: usize, b: usize, n: usize) -> Dataset {
    let mut obs = Vec::with_capacity(a * b * n);
    let mut state = 0x2545_F491_4F6C_DD1Du64;
    for i in 0..a {
        for j in 0..b {
            for _ in 0..n {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                let y = (state >> 11) as f64 / (1u64 << 53) as f64 + i as f64 * 0.3 - j as f64 * 0.1;
                obs.push(Observation::new(y, [("A", format!("a{i}")), ("B", format!("b{j}"))]));
            }
        }
    }
    Dataset::build(
        &[FactorDecl::crossed("A"), FactorDecl::crossed("B")],
        obs,
        &LayoutOptions::default(),
    )
    .expect("valid fixture")
}

/// One-way layout with `groups × per_group` observations.
pub fn one_way(groups: usize, per_group: usize) -> Dataset {
    let data: Vec<Vec<f64>> = (0..groups)
        .map(|g| (0..per_group).map(|i| ((g * 31 + i * 17) % 23) as f64 / 7.0 + g as f64 * 0.2).collect())
        .collect();
    Dataset::one_way(&data).expect("valid fixture")
}
