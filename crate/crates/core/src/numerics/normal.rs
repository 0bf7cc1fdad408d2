//! Standard normal distribution function and its inverse.

use super::NumericsError;
use crate::Real;

/// Complementary error function for `x >= 0`.
///
/// Below 2 the positive-term series for erf is used; above, the Laplace
/// continued fraction evaluated with the modified Lentz scheme.
fn erfc_nonneg<T: Real>(x: T) -> T {
    let two = T::of(2.0);
    if x < two {
        // erf(x) = 2/sqrt(pi) e^{-x^2} sum_n 2^n x^{2n+1} / (2n+1)!!
        let x2 = x * x;
        let mut term = x;
        let mut sum = x;
        let mut n = 0usize;
        loop {
            n += 1;
            term *= two * x2 / T::idx(2 * n + 1);
            sum += term;
            if term <= T::epsilon() * sum || n > 200 {
                break;
            }
        }
        let erf = T::FRAC_2_SQRT_PI() * (-x2).exp() * sum;
        return T::one() - erf;
    }
    // erfc(x) = e^{-x^2}/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let tiny = T::min_positive_value() * T::of(1e10);
    let mut f = x;
    let mut c = x;
    let mut d = T::zero();
    for k in 1..500 {
        let a = T::idx(k) * T::of(0.5);
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = d.recip();
        let delta = c * d;
        f *= delta;
        if (delta - T::one()).abs() <= T::epsilon() {
            break;
        }
    }
    (-(x * x)).exp() / (f * T::PI().sqrt())
}

/// Standard normal distribution function Phi(z).
pub fn std_normal_cdf<T: Real>(z: T) -> T {
    let t = z * T::FRAC_1_SQRT_2();
    if z < T::zero() {
        T::of(0.5) * erfc_nonneg(-t)
    } else {
        T::one() - T::of(0.5) * erfc_nonneg(t)
    }
}

/// Upper tail 1 - Phi(z), accurate for large positive `z`.
pub fn std_normal_sf<T: Real>(z: T) -> T {
    std_normal_cdf(-z)
}

/// Standard normal density.
pub fn std_normal_pdf<T: Real>(z: T) -> T {
    (-(z * z) * T::of(0.5)).exp() / T::TAU().sqrt()
}

/// Two-sided p-value for a standard normal test statistic.
pub fn two_sided_p_value<T: Real>(z: T) -> T {
    T::of(2.0) * std_normal_sf(z.abs())
}

/// Quantile function Phi^{-1}(p) for `0 < p < 1`.
pub fn std_normal_quantile<T: Real>(p: T) -> Result<T, NumericsError> {
    if !(p > T::zero() && p < T::one()) {
        return Err(NumericsError::Domain {
            function: "std_normal_quantile",
            value: p.to_f64_lossy(),
        });
    }
    let half = T::of(0.5);
    if p > half {
        // 1 - p is exact on [0.5, 1)
        return Ok(-lower_quantile(T::one() - p));
    }
    Ok(lower_quantile(p))
}

/// Quantile for p in (0, 0.5]: rational starting value, then Halley steps
/// against the lower tail, which is computed without cancellation there.
fn lower_quantile<T: Real>(p: T) -> T {
    let pf = p.to_f64_lossy();
    let mut x = T::of(acklam_start(pf));
    for _ in 0..8 {
        let err = std_normal_cdf(x) - p;
        let pdf = std_normal_pdf(x);
        if pdf <= T::zero() {
            break;
        }
        let u = err / pdf;
        let step = u / (T::one() + x * u * T::of(0.5));
        x -= step;
        if step.abs() <= T::epsilon() * x.abs().max(T::one()) {
            break;
        }
    }
    x
}

fn acklam_start(p: f64) -> f64 {
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
    if p < 0.02425 {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_reference_points() {
        assert_eq!(std_normal_quantile(0.5_f64).unwrap(), 0.0);
        let q = std_normal_quantile(0.975_f64).unwrap();
        assert!((q - 1.959_963_984_540_054).abs() < 1e-14);
        let lo = std_normal_quantile(0.1_f64).unwrap();
        let hi = std_normal_quantile(0.9_f64).unwrap();
        assert_eq!(lo, -hi);
    }

    #[test]
    fn quantile_rejects_closed_endpoints() {
        for p in [0.0_f64, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(std_normal_quantile(p).is_err(), "p = {p}");
        }
    }

    #[test]
    fn cdf_tails_and_symmetry() {
        assert_eq!(std_normal_cdf(0.0_f64), 0.5);
        // Phi(-10) = 7.61985302416e-24
        assert!((std_normal_cdf(-10.0_f64) / 7.619_853_024_160_526e-24 - 1.0).abs() < 1e-12);
        for z in [0.3_f64, 1.7, 2.0, 2.5, 4.2] {
            assert!((std_normal_cdf(z) + std_normal_cdf(-z) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn p_values() {
        assert!((two_sided_p_value(1.959_963_984_540_054_f64) - 0.05).abs() < 1e-14);
        assert!((two_sided_p_value(-1.0_f64) - 0.317_310_507_862_914_1).abs() < 1e-14);
    }
}
