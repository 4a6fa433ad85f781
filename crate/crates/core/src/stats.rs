//! Correlation statistics: Pearson r between per-level metric pairs,
//! Fisher z-transformation, and the two-group z-test comparing correlations
//! across strata (gender, machine, or vertebral level).

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::special::normal_cdf_precise;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("length mismatch: {x} x values vs {y} y values")]
    LengthMismatch { x: usize, y: usize },
    #[error("need at least {required} samples, got {n}")]
    TooFewSamples { n: usize, required: usize },
    #[error("{axis} has zero variance: correlation undefined")]
    ZeroVariance { axis: &'static str },
    #[error("fisher z is infinite at |r| >= 1 (r = {0})")]
    DegenerateCorrelation(f64),
    #[error("{0}")]
    Invalid(String),
}

/// One paired observation with its stratum tags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedSample {
    /// e.g. SAC/CSA ratio.
    pub x: f64,
    /// e.g. FA.
    pub y: f64,
    pub gender: char,
    pub machine: char,
    pub level: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Gender,
    Machine,
    Level,
}

impl FromStr for GroupBy {
    type Err = StatsError;

    fn from_str(s: &str) -> Result<Self, StatsError> {
        match s {
            "gender" => Ok(Self::Gender),
            "machine" => Ok(Self::Machine),
            "level" => Ok(Self::Level),
            other => Err(StatsError::Invalid(format!(
                "unknown grouping {other:?}: expected gender, machine, or level"
            ))),
        }
    }
}

impl fmt::Display for GroupBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gender => "gender",
            Self::Machine => "machine",
            Self::Level => "level",
        })
    }
}

impl GroupBy {
    fn key(self, s: &PairedSample) -> String {
        match self {
            Self::Gender => s.gender.to_string(),
            Self::Machine => s.machine.to_string(),
            Self::Level => format!("C{}", s.level),
        }
    }
}

/// Pearson correlation within one stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationResult {
    pub r: f64,
    pub n: usize,
    pub stratum: String,
}

/// Fisher z-test between two stratum correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupComparison {
    pub z: f64,
    /// Two-sided p-value (Bonferroni-adjusted when requested).
    pub p: f64,
    pub a: CorrelationResult,
    pub b: CorrelationResult,
}

/// Pearson correlation coefficient in a single numerically stable pass
/// (Welford-style co-moment accumulation). The result is clamped into
/// [-1, 1] to absorb roundoff on exact linear relationships.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(StatsError::TooFewSamples {
            n: x.len(),
            required: 2,
        });
    }
    if let Some(i) = x.iter().chain(y).position(|v| !v.is_finite()) {
        return Err(StatsError::Invalid(format!(
            "non-finite value at flattened position {i}: exclude missing pairs first"
        )));
    }
    let mut mean_x = 0.0;
    let mut mean_y = 0.0;
    let mut m2x = 0.0;
    let mut m2y = 0.0;
    let mut cxy = 0.0;
    for (i, (&xi, &yi)) in x.iter().zip(y).enumerate() {
        let n = (i + 1) as f64;
        let dx = xi - mean_x;
        mean_x += dx / n;
        let dy = yi - mean_y;
        mean_y += dy / n;
        // dx uses the pre-update mean, (yi - mean_y) the post-update one:
        // their product telescopes to the exact co-moment
        cxy += dx * (yi - mean_y);
        m2x += dx * (xi - mean_x);
        m2y += dy * (yi - mean_y);
    }
    if m2x <= 0.0 {
        return Err(StatsError::ZeroVariance { axis: "x" });
    }
    if m2y <= 0.0 {
        return Err(StatsError::ZeroVariance { axis: "y" });
    }
    Ok((cxy / (m2x * m2y).sqrt()).clamp(-1.0, 1.0))
}

/// Fisher z-transform `atanh(r) = 0.5 ln((1+r)/(1-r))`; infinite (and so
/// rejected) at |r| >= 1.
pub fn fisher_z(r: f64) -> Result<f64, StatsError> {
    if !(r.abs() < 1.0) {
        return Err(StatsError::DegenerateCorrelation(r));
    }
    Ok(r.atanh())
}

/// Two-group z-test on Fisher-transformed correlations:
/// `z = (z_a - z_b) / sqrt(1/(n_a-3) + 1/(n_b-3))`, two-sided p from the
/// rational-approximation normal CDF.
pub fn compare_correlations(
    a: &CorrelationResult,
    b: &CorrelationResult,
) -> Result<GroupComparison, StatsError> {
    for r in [a, b] {
        if r.n <= 3 {
            return Err(StatsError::TooFewSamples {
                n: r.n,
                required: 4,
            });
        }
    }
    let za = fisher_z(a.r)?;
    let zb = fisher_z(b.r)?;
    let se = (1.0 / (a.n - 3) as f64 + 1.0 / (b.n - 3) as f64).sqrt();
    let z = (za - zb) / se;
    let p = (2.0 * (1.0 - normal_cdf_precise(z.abs()))).clamp(0.0, 1.0);
    Ok(GroupComparison {
        z,
        p,
        a: a.clone(),
        b: b.clone(),
    })
}

/// Full stratified analysis output: one correlation per stratum plus all
/// pairwise comparisons between testable strata.
#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedAnalysis {
    pub correlations: Vec<CorrelationResult>,
    pub comparisons: Vec<GroupComparison>,
}

/// Split samples by stratum, correlate within each, and run every pairwise
/// z-test. Pairs with a non-finite member are dropped first (pairwise
/// deletion, never imputation). Strata with n < 4 are reported in
/// `correlations` (when r is computable) but excluded from comparisons;
/// strata whose correlation is undefined (n < 2 or zero variance) are
/// omitted entirely. With `bonferroni`, p-values are multiplied by the
/// number of comparisons and clamped at 1.
pub fn stratified_analysis(
    samples: &[PairedSample],
    group_by: GroupBy,
    bonferroni: bool,
) -> Result<StratifiedAnalysis, StatsError> {
    let mut strata: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for s in samples {
        if !s.x.is_finite() || !s.y.is_finite() {
            continue; // pairwise deletion
        }
        let key = group_by.key(s);
        match strata.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push((s.x, s.y)),
            None => strata.push((key, vec![(s.x, s.y)])),
        }
    }
    strata.sort_by(|a, b| a.0.cmp(&b.0));

    let mut correlations = Vec::new();
    for (key, pairs) in &strata {
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        match pearson_r(&x, &y) {
            Ok(r) => correlations.push(CorrelationResult {
                r,
                n: pairs.len(),
                stratum: key.clone(),
            }),
            Err(StatsError::TooFewSamples { .. } | StatsError::ZeroVariance { .. }) => {}
            Err(e) => return Err(e),
        }
    }

    let testable: Vec<&CorrelationResult> = correlations
        .iter()
        .filter(|c| c.n > 3 && c.r.abs() < 1.0)
        .collect();
    let mut comparisons = Vec::new();
    for i in 0..testable.len() {
        for j in (i + 1)..testable.len() {
            comparisons.push(compare_correlations(testable[i], testable[j])?);
        }
    }
    if bonferroni {
        let m = comparisons.len() as f64;
        for c in &mut comparisons {
            c.p = (c.p * m).min(1.0);
        }
    }
    Ok(StratifiedAnalysis {
        correlations,
        comparisons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;
    use proptest::prelude::*;

    fn corr(r: f64, n: usize, tag: &str) -> CorrelationResult {
        CorrelationResult {
            r,
            n,
            stratum: tag.to_string(),
        }
    }

    /// Correlated standard-normal pairs with population correlation `rho`.
    fn correlated_pairs(rng: &mut SeedRng, n: usize, rho: f64) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let a = rng.normal();
            let b = rng.normal();
            x.push(a);
            y.push(rho * a + (1.0 - rho * rho).sqrt() * b);
        }
        (x, y)
    }

    #[test]
    fn exact_linear_relationships_hit_plus_minus_one() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert_eq!(pearson_r(&x, &y).unwrap(), 1.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(pearson_r(&x, &neg).unwrap(), -1.0);
    }

    #[test]
    fn one_pass_matches_the_two_pass_textbook_formula() {
        let x = [1.2, 3.4, 2.2, 5.9, 4.4, 0.3, 2.8, 6.1, 3.3, 1.9];
        let y = [0.7, 2.9, 1.1, 4.2, 5.0, 0.2, 2.0, 5.5, 2.6, 2.4];
        let mx = x.iter().sum::<f64>() / 10.0;
        let my = y.iter().sum::<f64>() / 10.0;
        let num: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let dx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let dy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        let oracle = num / (dx * dy).sqrt();
        assert!((pearson_r(&x, &y).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(
            pearson_r(&[1.0, 2.0], &[1.0]),
            Err(StatsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            pearson_r(&[1.0], &[1.0]),
            Err(StatsError::TooFewSamples { .. })
        ));
        assert!(matches!(
            pearson_r(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(StatsError::ZeroVariance { axis: "x" })
        ));
        assert!(matches!(
            pearson_r(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]),
            Err(StatsError::ZeroVariance { axis: "y" })
        ));
        assert!(pearson_r(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn fisher_z_known_values() {
        assert_eq!(fisher_z(0.0).unwrap(), 0.0);
        assert!((fisher_z(0.5).unwrap() - 0.549306).abs() < 1e-6);
        let (neg, pos) = (fisher_z(-0.73).unwrap(), fisher_z(0.73).unwrap());
        assert!((neg + pos).abs() < 1e-15, "antisymmetry: {neg} vs {pos}");
        assert!(matches!(
            fisher_z(1.0),
            Err(StatsError::DegenerateCorrelation(_))
        ));
        assert!(fisher_z(-1.2).is_err());
    }

    #[test]
    fn z_test_frozen_example() {
        // r 0.5 vs 0.3 at n 53/53: z = (atanh .5 - atanh .3) / sqrt(2/50)
        let c = compare_correlations(&corr(0.5, 53, "a"), &corr(0.3, 53, "b")).unwrap();
        assert!((c.z - 1.1989327).abs() < 1e-6, "z = {}", c.z);
        assert!((c.p - 0.230554).abs() < 1e-5, "p = {}", c.p);
    }

    #[test]
    fn identical_groups_compare_as_null() {
        let a = corr(0.42, 40, "a");
        let c = compare_correlations(&a, &a).unwrap();
        assert_eq!(c.z, 0.0);
        assert!((c.p - 1.0).abs() < 1e-6);
    }

    #[test]
    fn swapping_groups_flips_the_sign() {
        let a = corr(0.6, 30, "a");
        let b = corr(0.1, 50, "b");
        let ab = compare_correlations(&a, &b).unwrap();
        let ba = compare_correlations(&b, &a).unwrap();
        assert_eq!(ab.z, -ba.z);
        assert_eq!(ab.p, ba.p);
    }

    #[test]
    fn small_groups_are_rejected() {
        assert!(matches!(
            compare_correlations(&corr(0.5, 3, "a"), &corr(0.3, 53, "b")),
            Err(StatsError::TooFewSamples { n: 3, required: 4 })
        ));
    }

    #[test]
    fn stratified_analysis_splits_reports_and_tests() {
        let mut rng = SeedRng::new(77);
        let mut samples = Vec::new();
        for (gender, rho) in [('F', 0.7), ('M', 0.0)] {
            let (x, y) = correlated_pairs(&mut rng, 60, rho);
            for i in 0..60 {
                samples.push(PairedSample {
                    x: x[i],
                    y: y[i],
                    gender,
                    machine: if i % 2 == 0 { 'A' } else { 'B' },
                    level: 3,
                });
            }
        }
        // a tiny third stratum (n=2): reported, never tested
        samples.push(PairedSample {
            x: 1.0,
            y: 0.0,
            gender: 'F',
            machine: 'C',
            level: 3,
        });
        samples.push(PairedSample {
            x: 2.0,
            y: 1.0,
            gender: 'F',
            machine: 'C',
            level: 3,
        });

        let by_gender = stratified_analysis(&samples, GroupBy::Gender, false).unwrap();
        assert_eq!(by_gender.correlations.len(), 2);
        assert_eq!(by_gender.comparisons.len(), 1);
        assert_eq!(by_gender.correlations[0].stratum, "F");

        let by_machine = stratified_analysis(&samples, GroupBy::Machine, false).unwrap();
        assert_eq!(by_machine.correlations.len(), 3);
        // C has n=2 (and |r|=1): A-B is the only comparison
        assert_eq!(by_machine.comparisons.len(), 1);
        let tags: Vec<&str> = by_machine
            .comparisons
            .iter()
            .flat_map(|c| [c.a.stratum.as_str(), c.b.stratum.as_str()])
            .collect();
        assert_eq!(tags, ["A", "B"]);

        let by_level = stratified_analysis(&samples, GroupBy::Level, false).unwrap();
        assert_eq!(by_level.correlations.len(), 1);
        assert!(by_level.comparisons.is_empty()); // single stratum
    }

    #[test]
    fn missing_pairs_are_dropped_not_imputed() {
        let mut samples = Vec::new();
        let mut rng = SeedRng::new(9);
        let (x, y) = correlated_pairs(&mut rng, 20, 0.5);
        for i in 0..20 {
            samples.push(PairedSample {
                x: x[i],
                y: y[i],
                gender: 'F',
                machine: 'A',
                level: 1,
            });
        }
        let clean = stratified_analysis(&samples, GroupBy::Gender, false).unwrap();
        samples.push(PairedSample {
            x: f64::NAN,
            y: 0.3,
            gender: 'F',
            machine: 'A',
            level: 1,
        });
        let with_missing = stratified_analysis(&samples, GroupBy::Gender, false).unwrap();
        assert_eq!(clean.correlations, with_missing.correlations);
        assert_eq!(with_missing.correlations[0].n, 20);
    }

    #[test]
    fn bonferroni_scales_p_by_the_comparison_count() {
        let mut rng = SeedRng::new(41);
        let mut samples = Vec::new();
        for machine in ['A', 'B', 'C'] {
            let (x, y) = correlated_pairs(&mut rng, 30, 0.3);
            for i in 0..30 {
                samples.push(PairedSample {
                    x: x[i],
                    y: y[i],
                    gender: 'M',
                    machine,
                    level: 2,
                });
            }
        }
        let raw = stratified_analysis(&samples, GroupBy::Machine, false).unwrap();
        let adj = stratified_analysis(&samples, GroupBy::Machine, true).unwrap();
        assert_eq!(raw.comparisons.len(), 3);
        for (r, a) in raw.comparisons.iter().zip(&adj.comparisons) {
            assert!((a.p - (r.p * 3.0).min(1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn null_false_positive_rate_is_calibrated() {
        // two independent-null strata, 1000 simulations: p < 0.05 should
        // fire at the nominal rate
        let mut rng = SeedRng::new(0x5a11);
        let mut hits = 0usize;
        let sims = 1000;
        for _ in 0..sims {
            let (xa, ya) = correlated_pairs(&mut rng, 30, 0.0);
            let (xb, yb) = correlated_pairs(&mut rng, 30, 0.0);
            let a = corr(pearson_r(&xa, &ya).unwrap(), 30, "a");
            let b = corr(pearson_r(&xb, &yb).unwrap(), 30, "b");
            if compare_correlations(&a, &b).unwrap().p < 0.05 {
                hits += 1;
            }
        }
        let rate = hits as f64 / sims as f64;
        assert!(
            (0.03..=0.07).contains(&rate),
            "false positive rate {rate} outside [0.03, 0.07]"
        );
    }

    #[test]
    fn planted_group_difference_is_detected() {
        // r = 0.6 vs r = 0 at n = 100: the z-test should flag p < 0.01 in
        // nearly every run
        let mut rng = SeedRng::new(0xbea7);
        let mut significant = 0usize;
        let runs = 20;
        for _ in 0..runs {
            let (xa, ya) = correlated_pairs(&mut rng, 100, 0.6);
            let (xb, yb) = correlated_pairs(&mut rng, 100, 0.0);
            let a = corr(pearson_r(&xa, &ya).unwrap(), 100, "a");
            let b = corr(pearson_r(&xb, &yb).unwrap(), 100, "b");
            if compare_correlations(&a, &b).unwrap().p < 0.01 {
                significant += 1;
            }
        }
        assert!(significant >= 18, "only {significant}/{runs} runs significant");
    }

    #[test]
    fn permuting_stratum_labels_destroys_significance() {
        let mut rng = SeedRng::new(0x9e12);
        let mut ps = Vec::new();
        for _ in 0..31 {
            let (xa, ya) = correlated_pairs(&mut rng, 100, 0.6);
            let (xb, yb) = correlated_pairs(&mut rng, 100, 0.0);
            let mut samples = Vec::new();
            for i in 0..100 {
                samples.push(PairedSample {
                    x: xa[i],
                    y: ya[i],
                    gender: 'F',
                    machine: 'A',
                    level: 1,
                });
                samples.push(PairedSample {
                    x: xb[i],
                    y: yb[i],
                    gender: 'M',
                    machine: 'A',
                    level: 1,
                });
            }
            // uniform random relabeling breaks the group structure
            for s in &mut samples {
                s.gender = if rng.below(2) == 0 { 'F' } else { 'M' };
            }
            let out = stratified_analysis(&samples, GroupBy::Gender, false).unwrap();
            ps.push(out.comparisons[0].p);
        }
        ps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ps[ps.len() / 2];
        assert!(median > 0.2, "median permuted p = {median}");
    }

    proptest! {
        #[test]
        fn positive_affine_maps_leave_r_unchanged(
            seed in 0u64..100, a in 0.1f64..10.0, b in -5.0f64..5.0,
        ) {
            let mut rng = SeedRng::new(seed);
            let (x, y) = correlated_pairs(&mut rng, 24, 0.4);
            let mapped: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let r0 = pearson_r(&x, &y).unwrap();
            let r1 = pearson_r(&mapped, &y).unwrap();
            prop_assert!((r0 - r1).abs() < 1e-12);
            let negated: Vec<f64> = x.iter().map(|v| -v).collect();
            let rn = pearson_r(&negated, &y).unwrap();
            prop_assert!((r0 + rn).abs() < 1e-12);
        }

        #[test]
        fn fisher_z_inverts_tanh(t in -5.0f64..5.0) {
            prop_assert!((fisher_z(t.tanh()).unwrap() - t).abs() < 1e-10);
        }
    }
}
