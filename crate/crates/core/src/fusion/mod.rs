//! Thurstone Case V fusion of a mapped initial score with pairwise evidence.
//!
//! The refined score minimizes
//!
//! ```text
//! J(s) = Σ_j BCE(Φ(s - s_j), y_j) + λ (s - s_init)²
//! ```
//!
//! where `s_j` are stored neighbor scores and `y_j = P(query > neighbor)`.
//! [`fuse_exact`] finds the minimizer of `J` directly; [`fuse_closed_form`]
//! replaces each preference by the pseudo-observation `s_j + Φ⁻¹(y_j)` and
//! solves the resulting ridge problem in closed form.

pub mod probit;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ScoreRange;
pub use probit::{log_cdf, normal_cdf, normal_pdf, normal_quantile};

/// Default tether strength.
pub const DEFAULT_LAMBDA: f64 = 0.01;
/// Default clip applied to preference probabilities.
pub const DEFAULT_PROB_CLIP: f64 = 1e-6;

const GRADIENT_TOL: f64 = 1e-10;
const MAX_ITERATIONS: usize = 200;
const MAX_BRACKET_EXPANSIONS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("probability {0} is not strictly inside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("no preference evidence and lambda = 0: objective has no unique minimizer")]
    Underdetermined,
    #[error("negative or non-finite lambda {0}")]
    InvalidLambda(f64),
    #[error("non-finite input {0}")]
    NonFinite(f64),
    #[error("exact solver did not converge after {iterations} iterations (|gradient| = {gradient:e})")]
    NoConvergence { iterations: usize, gradient: f64 },
}

/// One neighbor's stored score paired with the soft preference of the query over it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceEvidence {
    pub neighbor_score: f64,
    pub preference: f64,
}

impl PreferenceEvidence {
    pub fn new(neighbor_score: f64, preference: f64) -> Result<Self, FusionError> {
        if !neighbor_score.is_finite() {
            return Err(FusionError::NonFinite(neighbor_score));
        }
        if !(preference > 0.0 && preference < 1.0) {
            return Err(FusionError::ProbabilityOutOfRange(preference));
        }
        Ok(Self { neighbor_score, preference })
    }

    /// Builds evidence after clipping `preference` to `[clip, 1 - clip]`.
    pub fn clipped(neighbor_score: f64, preference: f64, clip: f64) -> Result<Self, FusionError> {
        if preference.is_nan() {
            return Err(FusionError::ProbabilityOutOfRange(preference));
        }
        Self::new(neighbor_score, preference.clamp(clip, 1.0 - clip))
    }

    /// Probit pseudo-observation `s_j + Φ⁻¹(y)`.
    pub fn pseudo_observation(&self) -> f64 {
        // preference is validated to lie in (0, 1)
        self.neighbor_score + normal_quantile(self.preference).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Exact,
    ClosedForm,
}

impl std::str::FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Self::Exact),
            "closed" | "closed_form" | "closed-form" => Ok(Self::ClosedForm),
            other => Err(format!("unknown fusion mode `{other}` (expected exact|closed)")),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::ClosedForm => "closed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lambda: f64,
    pub prob_clip: f64,
    pub mode: FusionMode,
    pub range: ScoreRange,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            prob_clip: DEFAULT_PROB_CLIP,
            mode: FusionMode::Exact,
            range: ScoreRange::default(),
        }
    }
}

fn check_problem(evidence: &[PreferenceEvidence], lambda: f64) -> Result<(), FusionError> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(FusionError::InvalidLambda(lambda));
    }
    if evidence.is_empty() && lambda == 0.0 {
        return Err(FusionError::Underdetermined);
    }
    Ok(())
}

/// BCE-plus-tether objective at candidate score `s`.
pub fn objective(s: f64, initial: f64, evidence: &[PreferenceEvidence], lambda: f64) -> f64 {
    let bce: f64 = evidence
        .iter()
        .map(|e| {
            let d = s - e.neighbor_score;
            -e.preference * log_cdf(d) - (1.0 - e.preference) * log_cdf(-d)
        })
        .sum();
    bce + lambda * (s - initial) * (s - initial)
}

/// Derivative of [`objective`] with respect to `s`.
pub fn gradient(s: f64, initial: f64, evidence: &[PreferenceEvidence], lambda: f64) -> f64 {
    let bce: f64 = evidence
        .iter()
        .map(|e| {
            let d = s - e.neighbor_score;
            -e.preference * probit::mills_lower(d) + (1.0 - e.preference) * probit::mills_upper(d)
        })
        .sum();
    bce + 2.0 * lambda * (s - initial)
}

fn curvature(s: f64, evidence: &[PreferenceEvidence], lambda: f64) -> f64 {
    let bce: f64 = evidence
        .iter()
        .map(|e| {
            let d = s - e.neighbor_score;
            let lo = probit::mills_lower(d);
            let hi = probit::mills_upper(d);
            e.preference * lo * (d + lo) + (1.0 - e.preference) * hi * (hi - d)
        })
        .sum();
    bce + 2.0 * lambda
}

/// Unclamped minimizer of the objective plus solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactSolution {
    pub score: f64,
    pub gradient: f64,
    pub iterations: usize,
    /// Initial sign-change bracket `[lo, hi]` of the derivative.
    pub bracket: (f64, f64),
}

/// Minimizes the objective over the real line.
///
/// The objective is convex in `s`, so its derivative is monotone: the
/// derivative's sign change is bracketed starting from `[lo - 2, hi + 2]`
/// (widened if needed) and then located by Newton steps that fall back to
/// bisection whenever a step leaves the bracket.
pub fn solve_exact(
    initial: f64,
    evidence: &[PreferenceEvidence],
    lambda: f64,
    range: ScoreRange,
) -> Result<ExactSolution, FusionError> {
    check_problem(evidence, lambda)?;
    if !initial.is_finite() {
        return Err(FusionError::NonFinite(initial));
    }
    let g = |s: f64| gradient(s, initial, evidence, lambda);

    let (mut a, mut b) = (range.lo - 2.0, range.hi + 2.0);
    let mut width = b - a;
    let mut expansions = 0;
    while g(a) > 0.0 && expansions < MAX_BRACKET_EXPANSIONS {
        b = a;
        a -= width;
        width *= 2.0;
        expansions += 1;
    }
    while g(b) < 0.0 && expansions < MAX_BRACKET_EXPANSIONS {
        a = b;
        b += width;
        width *= 2.0;
        expansions += 1;
    }
    let bracket = (a, b);

    let mut x = 0.5 * (a + b);
    let mut gx = g(x);
    for iteration in 1..=MAX_ITERATIONS {
        if gx.abs() <= GRADIENT_TOL {
            return Ok(ExactSolution { score: x, gradient: gx, iterations: iteration - 1, bracket });
        }
        if gx > 0.0 {
            b = x;
        } else {
            a = x;
        }
        let h = curvature(x, evidence, lambda);
        let newton = x - gx / h;
        let next = if h > 0.0 && newton > a && newton < b {
            newton
        } else {
            0.5 * (a + b)
        };
        if next == x {
            // bracket collapsed to adjacent floats
            break;
        }
        x = next;
        gx = g(x);
    }
    if gx.abs() <= GRADIENT_TOL {
        return Ok(ExactSolution { score: x, gradient: gx, iterations: MAX_ITERATIONS, bracket });
    }
    Err(FusionError::NoConvergence { iterations: MAX_ITERATIONS, gradient: gx })
}

/// Exact Thurstone fusion, clamped to the configured score range.
pub fn fuse_exact(
    initial: f64,
    evidence: &[PreferenceEvidence],
    cfg: &FusionConfig,
) -> Result<f64, FusionError> {
    let solution = solve_exact(initial, evidence, cfg.lambda, cfg.range)?;
    Ok(cfg.range.clamp(solution.score))
}

/// Ridge minimizer `(Σ μ_j + λ s_init) / (n + λ)` before clamping.
pub fn closed_form_unclamped(
    initial: f64,
    evidence: &[PreferenceEvidence],
    lambda: f64,
) -> Result<f64, FusionError> {
    check_problem(evidence, lambda)?;
    let pseudo: f64 = evidence.iter().map(PreferenceEvidence::pseudo_observation).sum();
    Ok((pseudo + lambda * initial) / (evidence.len() as f64 + lambda))
}

/// Probit-linearized fusion, clamped to the configured score range.
pub fn fuse_closed_form(
    initial: f64,
    evidence: &[PreferenceEvidence],
    cfg: &FusionConfig,
) -> Result<f64, FusionError> {
    closed_form_unclamped(initial, evidence, cfg.lambda).map(|s| cfg.range.clamp(s))
}

/// Dispatches on `cfg.mode`.
pub fn fuse(
    initial: f64,
    evidence: &[PreferenceEvidence],
    cfg: &FusionConfig,
) -> Result<f64, FusionError> {
    match cfg.mode {
        FusionMode::Exact => fuse_exact(initial, evidence, cfg),
        FusionMode::ClosedForm => fuse_closed_form(initial, evidence, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(pairs: &[(f64, f64)]) -> Vec<PreferenceEvidence> {
        pairs.iter().map(|&(s, y)| PreferenceEvidence::new(s, y).unwrap()).collect()
    }

    #[test]
    fn objective_reference_values() {
        let e = ev(&[(3.0, 0.5)]);
        assert!((objective(3.0, 0.0, &e, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(objective(2.5, 2.5, &[], 0.3), 0.0);

        // extended-precision reference evaluations
        let cases: [(f64, f64, f64, Vec<PreferenceEvidence>, f64); 5] = [
            (3.3, 3.0, 0.01, ev(&[(2.0, 0.8), (4.5, 0.1), (3.1, 0.55)]), 1.565_498_752_663_906_1),
            (-0.5, 1.2, 0.1, ev(&[(5.0, 1e-6), (1.0, 0.3)]), 1.149_201_537_541_627),
            (6.0, 4.0, 0.0, ev(&[(1.0, 0.999_999), (2.5, 0.9)]), 0.836_831_273_011_368_7),
            (31.0, 1.0, 0.0, ev(&[(1.0, 0.5)]), 227.160_621_978_171_6),
            (
                1.0,
                2.0,
                0.01,
                ev(&[(5.0, 0.25), (4.0, 1e-6), (1.5, 0.4), (2.5, 0.7)]),
                5.208_043_212_850_55,
            ),
        ];
        for (s, init, lambda, e, expected) in cases {
            let got = objective(s, init, &e, lambda);
            assert!((got - expected).abs() <= 1e-10 * expected.max(1.0), "{got} vs {expected}");
        }
    }

    #[test]
    fn gradient_edge_cases() {
        let e = ev(&[(3.0, 0.5)]);
        assert!(gradient(3.0, 0.0, &e, 0.0).abs() < 1e-15);
        for s in [-1.0, 0.5, 2.0, 7.5] {
            assert!((gradient(s, 2.0, &[], 0.3) - 0.6 * (s - 2.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_single_neighbor_is_fixed_point() {
        let cfg = FusionConfig { lambda: 0.0, ..Default::default() };
        let e = ev(&[(3.0, 0.5)]);
        assert!((fuse_exact(1.0, &e, &cfg).unwrap() - 3.0).abs() < 1e-12);
        assert!((fuse_closed_form(1.0, &e, &cfg).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn closed_form_examples() {
        let e = ev(&[(2.0, 0.5), (4.0, 0.5)]);
        let cfg0 = FusionConfig { lambda: 0.0, ..Default::default() };
        assert!((fuse_closed_form(1.0, &e, &cfg0).unwrap() - 3.0).abs() < 1e-15);
        let cfg = FusionConfig { lambda: 0.01, ..Default::default() };
        let got = fuse_closed_form(3.5, &e, &cfg).unwrap();
        assert!((got - 3.002_487_562_189_054_7).abs() < 1e-14, "{got}");
    }

    #[test]
    fn tether_dominates_for_huge_lambda() {
        let cfg = FusionConfig { lambda: 1e6, ..Default::default() };
        let e = ev(&[(1.0, 0.99), (5.0, 0.02), (2.0, 0.7)]);
        assert!((fuse_exact(3.7, &e, &cfg).unwrap() - 3.7).abs() < 1e-3);
        assert!((fuse_closed_form(3.7, &e, &cfg).unwrap() - 3.7).abs() < 1e-3);
    }

    #[test]
    fn underdetermined_problem_is_rejected() {
        let cfg = FusionConfig { lambda: 0.0, ..Default::default() };
        assert_eq!(fuse_exact(3.0, &[], &cfg), Err(FusionError::Underdetermined));
        assert_eq!(fuse_closed_form(3.0, &[], &cfg), Err(FusionError::Underdetermined));
        let tethered = FusionConfig { lambda: 0.5, ..Default::default() };
        assert!((fuse_exact(3.0, &[], &tethered).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn saturated_evidence_expands_bracket() {
        let e = ev(&[(5.0, 1.0 - 1e-6), (5.0, 1.0 - 1e-6)]);
        let sol = solve_exact(5.0, &e, 0.0, ScoreRange::default()).unwrap();
        assert!(sol.score > 7.0);
        assert!(sol.gradient.abs() <= 1e-10);
        let cfg = FusionConfig { lambda: 0.0, ..Default::default() };
        assert_eq!(fuse_exact(5.0, &e, &cfg).unwrap(), 5.0);
    }

    #[test]
    fn evidence_validation() {
        assert!(PreferenceEvidence::new(3.0, 0.0).is_err());
        assert!(PreferenceEvidence::new(3.0, 1.0).is_err());
        assert!(PreferenceEvidence::new(f64::NAN, 0.5).is_err());
        let e = PreferenceEvidence::clipped(3.0, 1.0, 1e-6).unwrap();
        assert_eq!(e.preference, 1.0 - 1e-6);
    }

    #[test]
    fn fusion_mode_parses() {
        assert_eq!("exact".parse::<FusionMode>().unwrap(), FusionMode::Exact);
        assert_eq!("closed".parse::<FusionMode>().unwrap(), FusionMode::ClosedForm);
        assert!("newton".parse::<FusionMode>().is_err());
    }

    fn evidence_strategy() -> impl Strategy<Value = Vec<PreferenceEvidence>> {
        prop::collection::vec((1.0f64..5.0, 1e-6f64..(1.0 - 1e-6)), 1..10).prop_map(|v| {
            v.into_iter().map(|(s, y)| PreferenceEvidence::new(s, y).unwrap()).collect()
        })
    }

    proptest! {
        #[test]
        fn exact_solution_is_stationary_and_beats_bracket_ends(
            e in evidence_strategy(),
            initial in 1.0f64..5.0,
            lambda in prop::sample::select(vec![0.0, 1e-3, 1e-2, 1e-1, 1.0]),
        ) {
            let sol = solve_exact(initial, &e, lambda, ScoreRange::default()).unwrap();
            prop_assert!(sol.gradient.abs() <= 1e-10);
            let j = objective(sol.score, initial, &e, lambda);
            prop_assert!(j <= objective(sol.bracket.0, initial, &e, lambda));
            prop_assert!(j <= objective(sol.bracket.1, initial, &e, lambda));
        }

        #[test]
        fn raising_one_preference_never_lowers_output(
            e in evidence_strategy(),
            initial in 1.0f64..5.0,
            idx in 0usize..10,
            bump in 0.0f64..0.5,
        ) {
            let cfg = FusionConfig::default();
            let i = idx % e.len();
            let mut raised = e.clone();
            raised[i].preference = (raised[i].preference + bump).min(1.0 - 1e-6);
            let before_exact = fuse_exact(initial, &e, &cfg).unwrap();
            let after_exact = fuse_exact(initial, &raised, &cfg).unwrap();
            prop_assert!(after_exact >= before_exact - 1e-9);
            let before_cf = fuse_closed_form(initial, &e, &cfg).unwrap();
            let after_cf = fuse_closed_form(initial, &raised, &cfg).unwrap();
            prop_assert!(after_cf >= before_cf - 1e-12);
        }

        #[test]
        fn perfect_evidence_recovers_latent_score(
            latent in 1.0f64..5.0,
            neighbors in prop::collection::vec(1.0f64..5.0, 1..16),
        ) {
            let e: Vec<_> = neighbors
                .iter()
                .map(|&s| PreferenceEvidence::clipped(s, normal_cdf(latent - s), 1e-6).unwrap())
                .collect();
            let sol = solve_exact(3.0, &e, 0.0, ScoreRange::default()).unwrap();
            prop_assert!((sol.score - latent).abs() < 1e-6);
        }

        #[test]
        fn closed_form_with_zero_lambda_is_mean_of_pseudo_observations(e in evidence_strategy()) {
            let mean = e.iter().map(|x| x.pseudo_observation()).sum::<f64>() / e.len() as f64;
            let got = closed_form_unclamped(0.0, &e, 0.0).unwrap();
            prop_assert!((got - mean).abs() < 1e-12);
        }
    }
}
