//! Minimal reliable resampling size.
//!
//! For every candidate size `n` in `1..=N` the deviation set collects
//! `|moment(subset) - moment(all N scores)|` over size-`n` subsets of the
//! reference scores. The delta-level interval keeps the `delta/2` to
//! `1 - delta/2` percentiles of that set, and `n*` is the smallest `n` whose
//! interval upper end is within epsilon.
//!
//! Subsets are enumerated exhaustively when `C(N, n) <= K`, otherwise `K`
//! subsets are drawn independently, each uniformly without replacement.
//! Every `(n, moment)` pair draws from its own sub-seed, so the parallel
//! computation is bit-identical to a serial one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::ReliabilityParams;
use crate::moments::{first_moment, second_moment};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReliabilityError {
    #[error("n = {n} outside [1, {total}]")]
    NOutOfRange { n: usize, total: usize },
    #[error("reference scores incomplete: {0}")]
    IncompleteScores(String),
    #[error("expected {expected} reference scores, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("delta {0} outside (0, 1)")]
    DeltaOutOfRange(f64),
    #[error("report has no {0:?} moment curve")]
    MissingCurve(Moment),
    #[error("curves do not share the same n grid")]
    GridMismatch,
    #[error("deviation set is empty")]
    EmptyDeviations,
    #[error("inconsistent report: {0}")]
    InconsistentReport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Moment {
    First,
    Second,
}

impl Moment {
    pub const ALL: [Moment; 2] = [Moment::First, Moment::Second];

    pub fn index(self) -> u64 {
        match self {
            Moment::First => 1,
            Moment::Second => 2,
        }
    }

    pub fn of(self, scores: &[f64]) -> f64 {
        let r = match self {
            Moment::First => first_moment(scores),
            Moment::Second => second_moment(scores),
        };
        r.expect("subsets are never empty")
    }

    pub fn label(self) -> &'static str {
        match self {
            Moment::First => "mean",
            Moment::Second => "variance",
        }
    }
}

/// Linear-interpolation quantile of an ascending slice: rank `q * (m - 1)`,
/// interpolated between the neighbouring order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationSet {
    pub n: usize,
    pub moment: Moment,
    pub deviations: Vec<f64>,
    /// All `C(N, n)` subsets were enumerated.
    pub exact: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
}

/// `C(n, k)`, or `cap + 1` once it exceeds `cap`.
pub fn binomial_capped(n: usize, k: usize, cap: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
        if c > cap as u128 {
            return cap.saturating_add(1);
        }
    }
    c as u64
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one `(n, moment)` pair.
pub fn sub_seed(seed: u64, n: usize, moment: Moment) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ n as u64) ^ moment.index())
}

fn check_scores(scores: &[f64]) -> Result<(), ReliabilityError> {
    if scores.is_empty() {
        return Err(ReliabilityError::IncompleteScores(
            "no reference scores".into(),
        ));
    }
    if let Some(i) = scores.iter().position(|x| !x.is_finite()) {
        return Err(ReliabilityError::IncompleteScores(format!(
            "score {i} is not a finite number"
        )));
    }
    Ok(())
}

/// Deviation set for subsets of size `n` of the reference scores.
pub fn deviation_set(
    reference_scores: &[f64],
    n: usize,
    moment: Moment,
    resamples: usize,
    seed: u64,
) -> Result<DeviationSet, ReliabilityError> {
    check_scores(reference_scores)?;
    let total = reference_scores.len();
    if n == 0 || n > total {
        return Err(ReliabilityError::NOutOfRange { n, total });
    }
    let resamples = resamples.max(1);
    let reference = moment.of(reference_scores);
    let exact = binomial_capped(total, n, resamples as u64) <= resamples as u64;
    let mut buf = Vec::with_capacity(n);
    let deviations = if exact {
        let mut out = Vec::new();
        let mut combo: Vec<usize> = (0..n).collect();
        loop {
            buf.clear();
            buf.extend(combo.iter().map(|&i| reference_scores[i]));
            out.push((moment.of(&buf) - reference).abs());
            if !next_combination(&mut combo, total) {
                break;
            }
        }
        out
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, n, moment));
        let mut pool: Vec<usize> = (0..total).collect();
        (0..resamples)
            .map(|_| {
                // Partial Fisher-Yates: the first n slots become a uniform n-subset.
                for i in 0..n {
                    let j = rng.random_range(i..total);
                    pool.swap(i, j);
                }
                buf.clear();
                buf.extend(pool[..n].iter().map(|&i| reference_scores[i]));
                (moment.of(&buf) - reference).abs()
            })
            .collect()
    };
    Ok(DeviationSet {
        n,
        moment,
        deviations,
        exact,
    })
}

/// Advances `combo` to the next k-combination of `0..total` in lexicographic order.
fn next_combination(combo: &mut [usize], total: usize) -> bool {
    let k = combo.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] < total - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

pub fn confidence_interval(
    dev: &DeviationSet,
    delta: f64,
) -> Result<ConfidenceInterval, ReliabilityError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(ReliabilityError::DeltaOutOfRange(delta));
    }
    if dev.deviations.is_empty() {
        return Err(ReliabilityError::EmptyDeviations);
    }
    let mut sorted = dev.deviations.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(ConfidenceInterval {
        lower: quantile_sorted(&sorted, delta / 2.0),
        upper: quantile_sorted(&sorted, 1.0 - delta / 2.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub ci_upper: f64,
    pub ci_lower: f64,
    pub deviation_count: usize,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCurve {
    pub moment: Moment,
    pub points: Vec<CurvePoint>,
    /// Smallest n whose interval upper end is within epsilon.
    pub n_star: Option<usize>,
    /// Smallest n from which the condition holds at every larger measured n.
    pub stable_n_star: Option<usize>,
    /// The only passing n is N itself; the estimate is degenerate.
    pub unreliable_at_n: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub params: ReliabilityParams,
    pub reference_model_id: String,
    pub per_moment_curves: Vec<MomentCurve>,
    pub n_star_first: Option<usize>,
    pub n_star_second: Option<usize>,
    pub n_star_combined: Option<usize>,
    pub stable_n_star_first: Option<usize>,
    pub stable_n_star_second: Option<usize>,
    pub stable_n_star_combined: Option<usize>,
}

fn combine(a: Option<usize>, b: Option<usize>) -> Option<usize> {
    Some(a?.max(b?))
}

fn literal_n_star(points: &[CurvePoint], epsilon: f64) -> Option<usize> {
    points.iter().find(|p| epsilon >= p.ci_upper).map(|p| p.n)
}

fn stable_n_star(points: &[CurvePoint], epsilon: f64) -> Option<usize> {
    let mut best = None;
    for p in points.iter().rev() {
        if epsilon >= p.ci_upper {
            best = Some(p.n);
        } else {
            break;
        }
    }
    best
}

impl ReliabilityReport {
    pub fn curve(&self, moment: Moment) -> Option<&MomentCurve> {
        self.per_moment_curves.iter().find(|c| c.moment == moment)
    }

    /// The size downstream steps should use: the combined stable n*.
    pub fn recommended_n(&self) -> Option<usize> {
        self.stable_n_star_combined
    }

    /// Checks the stored n* values against the stored curves.
    pub fn validate(&self) -> Result<(), ReliabilityError> {
        let bad = |msg: String| Err(ReliabilityError::InconsistentReport(msg));
        let eps = self.params.epsilon();
        let total = self.params.reference_sample_count();
        let mut literal = [None, None];
        let mut stable = [None, None];
        for curve in &self.per_moment_curves {
            let grid_ok = curve.points.iter().enumerate().all(|(i, p)| p.n == i + 1);
            if !grid_ok || curve.points.len() != total {
                return bad(format!(
                    "{:?} curve does not cover n = 1..={total}",
                    curve.moment
                ));
            }
            if curve.n_star != literal_n_star(&curve.points, eps)
                || curve.stable_n_star != stable_n_star(&curve.points, eps)
            {
                return bad(format!("{:?} n* disagrees with its curve", curve.moment));
            }
            let slot = (curve.moment.index() - 1) as usize;
            literal[slot] = curve.n_star;
            stable[slot] = curve.stable_n_star;
        }
        if [self.n_star_first, self.n_star_second] != literal
            || [self.stable_n_star_first, self.stable_n_star_second] != stable
        {
            return bad("per-moment n* fields disagree with curves".into());
        }
        if self.n_star_combined != combine(literal[0], literal[1])
            || self.stable_n_star_combined != combine(stable[0], stable[1])
        {
            return bad("combined n* is not the max of the per-moment values".into());
        }
        Ok(())
    }
}

/// Computes both moment curves over `n = 1..=N` and the resulting n* values.
pub fn estimate_n_star(
    reference_scores: &[f64],
    params: &ReliabilityParams,
    reference_model_id: &str,
) -> Result<ReliabilityReport, ReliabilityError> {
    check_scores(reference_scores)?;
    let total = params.reference_sample_count();
    if reference_scores.len() != total {
        return Err(ReliabilityError::LengthMismatch {
            expected: total,
            actual: reference_scores.len(),
        });
    }
    let jobs: Vec<(Moment, usize)> = Moment::ALL
        .iter()
        .flat_map(|&m| (1..=total).map(move |n| (m, n)))
        .collect();
    let points: Vec<CurvePoint> = jobs
        .par_iter()
        .map(|&(moment, n)| {
            let dev = deviation_set(
                reference_scores,
                n,
                moment,
                params.resamples_per_n(),
                params.seed(),
            )?;
            let ci = confidence_interval(&dev, params.delta())?;
            Ok(CurvePoint {
                n,
                ci_upper: ci.upper,
                ci_lower: ci.lower,
                deviation_count: dev.deviations.len(),
                exact: dev.exact,
            })
        })
        .collect::<Result<_, ReliabilityError>>()?;

    let eps = params.epsilon();
    let curves: Vec<MomentCurve> = Moment::ALL
        .iter()
        .zip(points.chunks(total))
        .map(|(&moment, pts)| {
            let n_star = literal_n_star(pts, eps);
            MomentCurve {
                moment,
                points: pts.to_vec(),
                n_star,
                stable_n_star: stable_n_star(pts, eps),
                unreliable_at_n: n_star == Some(total),
            }
        })
        .collect();
    let (n1, n2) = (curves[0].n_star, curves[1].n_star);
    let (s1, s2) = (curves[0].stable_n_star, curves[1].stable_n_star);
    Ok(ReliabilityReport {
        params: *params,
        reference_model_id: reference_model_id.to_string(),
        per_moment_curves: curves,
        n_star_first: n1,
        n_star_second: n2,
        n_star_combined: combine(n1, n2),
        stable_n_star_first: s1,
        stable_n_star_second: s2,
        stable_n_star_combined: combine(s1, s2),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCurve {
    pub moment: Moment,
    pub points: Vec<(usize, f64)>,
    pub n_star: Option<usize>,
    pub stable_n_star: Option<usize>,
}

impl ConvergenceCurve {
    pub fn upper_at(&self, n: usize) -> Option<f64> {
        self.points.iter().find(|(m, _)| *m == n).map(|(_, u)| *u)
    }
}

pub fn convergence_curve(
    report: &ReliabilityReport,
    moment: Moment,
) -> Result<ConvergenceCurve, ReliabilityError> {
    let curve = report
        .curve(moment)
        .ok_or(ReliabilityError::MissingCurve(moment))?;
    Ok(ConvergenceCurve {
        moment,
        points: curve.points.iter().map(|p| (p.n, p.ci_upper)).collect(),
        n_star: curve.n_star,
        stable_n_star: curve.stable_n_star,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyCheck {
    pub holds: bool,
    pub violations: Vec<usize>,
}

/// Does the small (proxy) model's curve bound the large model's from above,
/// up to `slack`, at every n?
pub fn proxy_upper_bound_check(
    small_model_curve: &[(usize, f64)],
    large_model_curve: &[(usize, f64)],
    slack: f64,
) -> Result<ProxyCheck, ReliabilityError> {
    if small_model_curve.len() != large_model_curve.len()
        || small_model_curve
            .iter()
            .zip(large_model_curve)
            .any(|(a, b)| a.0 != b.0)
    {
        return Err(ReliabilityError::GridMismatch);
    }
    let violations: Vec<usize> = small_model_curve
        .iter()
        .zip(large_model_curve)
        .filter(|((_, small), (_, large))| small + slack < *large)
        .map(|((n, _), _)| *n)
        .collect();
    Ok(ProxyCheck {
        holds: violations.is_empty(),
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(eps: f64, n: usize) -> ReliabilityParams {
        ReliabilityParams::new(eps, 0.1, n, 1000, 42).unwrap()
    }

    #[test]
    fn quantile_rule() {
        let xs: Vec<f64> = (0..=10).map(|i| i as f64 / 100.0).collect();
        let dev = DeviationSet {
            n: 1,
            moment: Moment::First,
            deviations: xs,
            exact: true,
        };
        let ci = confidence_interval(&dev, 0.1).unwrap();
        assert!((ci.lower - 0.005).abs() < 1e-15);
        assert!((ci.upper - 0.095).abs() < 1e-15);
        let zero = DeviationSet {
            n: 1,
            moment: Moment::First,
            deviations: vec![0.0],
            exact: true,
        };
        assert_eq!(
            confidence_interval(&zero, 0.1).unwrap(),
            ConfidenceInterval {
                lower: 0.0,
                upper: 0.0
            }
        );
        assert_eq!(
            confidence_interval(&zero, 1.0),
            Err(ReliabilityError::DeltaOutOfRange(1.0))
        );
        assert_eq!(
            confidence_interval(&zero, 0.0),
            Err(ReliabilityError::DeltaOutOfRange(0.0))
        );
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial_capped(8, 3, 1000), 56);
        assert_eq!(binomial_capped(100, 2, 1000), 1001);
        assert_eq!(binomial_capped(100, 99, 1000), 100);
        assert_eq!(binomial_capped(100, 50, u64::MAX - 1), u64::MAX);
        assert_eq!(binomial_capped(3, 4, 10), 0);
    }

    #[test]
    fn full_sample_has_zero_deviation() {
        let xs = [0.3, 0.9, 0.1, 0.55, 0.7];
        for m in Moment::ALL {
            let d = deviation_set(&xs, xs.len(), m, 10, 1).unwrap();
            assert_eq!(d.deviations, vec![0.0]);
            assert!(d.exact);
        }
    }

    #[test]
    fn n_out_of_range_and_bad_scores() {
        let xs = [0.1, 0.2];
        assert_eq!(
            deviation_set(&xs, 0, Moment::First, 10, 0),
            Err(ReliabilityError::NOutOfRange { n: 0, total: 2 })
        );
        assert!(matches!(
            deviation_set(&xs, 3, Moment::First, 10, 0),
            Err(ReliabilityError::NOutOfRange { .. })
        ));
        assert!(matches!(
            deviation_set(&[0.1, f64::NAN], 1, Moment::First, 10, 0),
            Err(ReliabilityError::IncompleteScores(_))
        ));
    }

    #[test]
    fn constant_scores_give_n_star_one() {
        let report = estimate_n_star(&[0.42; 30], &params(0.01, 30), "ref").unwrap();
        assert_eq!(report.n_star_first, Some(1));
        assert_eq!(report.n_star_second, Some(1));
        assert_eq!(report.n_star_combined, Some(1));
        assert_eq!(report.stable_n_star_combined, Some(1));
        report.validate().unwrap();
    }

    #[test]
    fn length_mismatch() {
        assert_eq!(
            estimate_n_star(&[0.1, 0.2], &params(0.01, 3), "r").unwrap_err(),
            ReliabilityError::LengthMismatch {
                expected: 3,
                actual: 2
            }
        );
    }

    #[test]
    fn n_one_set_is_closed_form() {
        let xs = [0.1, 0.4, 0.8, 0.35, 0.95, 0.0];
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let d = deviation_set(&xs, 1, Moment::First, 1000, 0).unwrap();
        let expected: Vec<f64> = xs.iter().map(|x| (x - mean).abs()).collect();
        assert_eq!(d.deviations, expected);
        // epsilon at least the largest single-score deviation passes at n = 1
        let eps = expected.iter().cloned().fold(0.0, f64::max).max(0.25);
        let report = estimate_n_star(&xs, &params(eps.min(0.99), xs.len()), "r").unwrap();
        assert_eq!(report.n_star_first, Some(1));
    }

    #[test]
    fn degenerate_estimate_is_flagged() {
        let xs = [0.0, 1.0, 0.0, 1.0];
        let report = estimate_n_star(&xs, &params(1e-6, 4), "r").unwrap();
        assert_eq!(report.n_star_first, Some(4));
        assert!(report.curve(Moment::First).unwrap().unreliable_at_n);
    }

    #[test]
    fn monte_carlo_path_is_deterministic() {
        let xs: Vec<f64> = (0..40).map(|i| ((i * 37) % 41) as f64 / 41.0).collect();
        let a = deviation_set(&xs, 10, Moment::Second, 200, 9).unwrap();
        let b = deviation_set(&xs, 10, Moment::Second, 200, 9).unwrap();
        assert!(!a.exact);
        assert_eq!(a.deviations.len(), 200);
        assert_eq!(a, b);
        let c = deviation_set(&xs, 10, Moment::Second, 200, 10).unwrap();
        assert_ne!(a.deviations, c.deviations);
    }

    #[test]
    fn stable_versus_literal() {
        let pts: Vec<CurvePoint> = [0.05, 0.009, 0.02, 0.008, 0.0]
            .iter()
            .enumerate()
            .map(|(i, &u)| CurvePoint {
                n: i + 1,
                ci_upper: u,
                ci_lower: 0.0,
                deviation_count: 1,
                exact: true,
            })
            .collect();
        assert_eq!(literal_n_star(&pts, 0.01), Some(2));
        assert_eq!(stable_n_star(&pts, 0.01), Some(4));
    }

    #[test]
    fn proxy_check() {
        let large = vec![(1, 0.05), (2, 0.02), (3, 0.0)];
        let same = proxy_upper_bound_check(&large, &large, 0.0).unwrap();
        assert!(same.holds);
        let above: Vec<_> = large.iter().map(|(n, u)| (*n, u + 0.01)).collect();
        assert!(proxy_upper_bound_check(&above, &large, 0.0).unwrap().holds);
        let below: Vec<_> = large.iter().map(|(n, u)| (*n, u - 0.01)).collect();
        let check = proxy_upper_bound_check(&below, &large, 0.0).unwrap();
        assert_eq!(check.violations, vec![1, 2, 3]);
        assert!(proxy_upper_bound_check(&below, &large, 0.01).unwrap().holds);
        assert_eq!(
            proxy_upper_bound_check(&large[..2], &large, 0.0),
            Err(ReliabilityError::GridMismatch)
        );
    }

    #[test]
    fn validate_rejects_tampering() {
        let xs = [0.1, 0.5, 0.9, 0.3, 0.6];
        let mut report = estimate_n_star(&xs, &params(0.05, 5), "r").unwrap();
        report.validate().unwrap();
        report.n_star_combined = Some(1);
        report.n_star_first = Some(1);
        assert!(report.validate().is_err());
    }
}
