//! Standard normal utilities used by the Thurstone fusion.
//!
//! All tail-sensitive quantities (`log_cdf`, the Mills ratios) are evaluated
//! through `erfc` on the side where the result is small, so the relative
//! precision holds far into the tails.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::fusion::FusionError;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this argument `log_cdf` switches to the asymptotic tail expansion.
const ASYMPTOTIC_CUTOFF: f64 = -35.0;

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Standard normal CDF, `Φ(x) = erfc(-x/√2) / 2`.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `ln Φ(x)`, finite for every finite `x`.
pub fn log_cdf(x: f64) -> f64 {
    if x < ASYMPTOTIC_CUTOFF {
        // ln Φ(x) = ln φ(x) - ln(-x) + ln(1 - 1/x² + 3/x⁴ - 15/x⁶ + 105/x⁸)
        let z = 1.0 / (x * x);
        let series = 1.0 - z * (1.0 - z * (3.0 - z * (15.0 - z * 105.0)));
        -0.5 * x * x - LN_SQRT_2PI - (-x).ln() + series.ln()
    } else if x < 0.0 {
        (0.5 * libm::erfc(-x * FRAC_1_SQRT_2)).ln()
    } else {
        (-0.5 * libm::erfc(x * FRAC_1_SQRT_2)).ln_1p()
    }
}

/// `φ(x) / Φ(x)`, the inverse Mills ratio at `x`.
pub fn mills_lower(x: f64) -> f64 {
    if x < ASYMPTOTIC_CUTOFF {
        // φ/Φ = -x / (1 - 1/x² + 3/x⁴ - ...)
        let z = 1.0 / (x * x);
        let series = 1.0 - z * (1.0 - z * (3.0 - z * (15.0 - z * 105.0)));
        -x / series
    } else {
        (-0.5 * x * x - LN_SQRT_2PI - log_cdf(x)).exp()
    }
}

/// `φ(x) / (1 - Φ(x))`, the hazard of the standard normal.
#[inline]
pub fn mills_upper(x: f64) -> f64 {
    mills_lower(-x)
}

// Acklam's rational approximation, relative error ~1.15e-9 before refinement.
const A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_69e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996,
    3.754_408_661_907_416,
];
const P_LOW: f64 = 0.02425;

fn acklam(p: f64) -> f64 {
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Lower-half quantile (`p <= 0.5`), refined by one Halley step against `normal_cdf`.
fn lower_quantile(p: f64) -> f64 {
    let x = acklam(p);
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// `Φ⁻¹(p)` for `p` strictly inside `(0, 1)`.
pub fn normal_quantile(p: f64) -> Result<f64, FusionError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(FusionError::ProbabilityOutOfRange(p));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    if p < 0.5 {
        Ok(lower_quantile(p))
    } else {
        Ok(-lower_quantile(1.0 - p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_points() {
        assert_eq!(normal_cdf(0.0), 0.5);
        // extended-precision values
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((normal_cdf(1.96) - 0.975_002_104_851_779_6).abs() < 1e-15);
        assert!((normal_cdf(-8.0) - 6.220_960_574_271_784e-16).abs() < 1e-28);
    }

    #[test]
    fn cdf_symmetry() {
        for i in 0..200 {
            let x = -10.0 + 0.1 * i as f64;
            assert!((normal_cdf(-x) - (1.0 - normal_cdf(x))).abs() < 1e-15);
        }
    }

    #[test]
    fn quantile_reference_points() {
        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
        let q = normal_quantile(0.975).unwrap();
        assert!((q - 1.959_963_984_540_054).abs() < 1e-12, "{q}");
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
        assert!(normal_quantile(f64::NAN).is_err());
    }

    #[test]
    fn quantile_inverts_cdf_on_clip_range() {
        let mut p = 1e-6;
        while p < 1.0 - 1e-6 {
            let x = normal_quantile(p).unwrap();
            assert!((normal_cdf(x) - p).abs() <= 1e-10, "p={p}");
            p += 1.37e-3;
        }
        for p in [1e-6, 1.0 - 1e-6] {
            let x = normal_quantile(p).unwrap();
            assert!((normal_cdf(x) - p).abs() <= 1e-10);
        }
    }

    #[test]
    fn log_cdf_continuous_across_branches() {
        for x in [ASYMPTOTIC_CUTOFF - 1e-9, ASYMPTOTIC_CUTOFF + 1e-9] {
            let direct = (0.5 * libm::erfc(-x * FRAC_1_SQRT_2)).ln();
            assert!((log_cdf(x) - direct).abs() / direct.abs() < 1e-12);
        }
        assert!(log_cdf(-200.0).is_finite());
        assert!(log_cdf(40.0) <= 0.0);
    }

    #[test]
    fn mills_ratios_match_direct_ratio_in_bulk() {
        for i in 0..100 {
            let x = -5.0 + 0.1 * i as f64;
            let lower = normal_pdf(x) / normal_cdf(x);
            let upper = normal_pdf(x) / (1.0 - normal_cdf(x));
            assert!((mills_lower(x) - lower).abs() / lower < 1e-12);
            assert!((mills_upper(x) - upper).abs() / upper < 1e-10);
        }
        // far tail tends to -x
        assert!((mills_lower(-60.0) - 60.0).abs() / 60.0 < 1e-3);
    }
}
