//! Log-gamma, digamma and trigamma for positive real arguments.
//!
//! Each function shifts small arguments upward with the functional
//! recurrence and then applies the asymptotic (Stirling-type) expansion.
//! Two regions where that scheme loses relative accuracy get dedicated
//! series: `log_gamma` near its zeros at 1 and 2, and `digamma` near its
//! positive root.

use super::NumericsError;
use crate::Real;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Arguments at or above this value go straight to the asymptotic series.
const ASYMPTOTIC_THRESHOLD: f64 = 10.0;

/// zeta(k) - 1 for k = 2..=40.
const ZETA_MINUS_ONE: [f64; 39] = [
    6.44934066848226406e-01,
    2.02056903159594292e-01,
    8.23232337111381857e-02,
    3.69277551433699266e-02,
    1.73430619844491402e-02,
    8.34927738192282713e-03,
    4.07735619794433960e-03,
    2.00839282608221426e-03,
    9.94575127818085256e-04,
    4.94188604119464529e-04,
    2.46086553308048320e-04,
    1.22713347578489145e-04,
    6.12481350587048277e-05,
    3.05882363070204933e-05,
    1.52822594086518710e-05,
    7.63719763789976257e-06,
    3.81729326499984022e-06,
    1.90821271655393897e-06,
    9.53962033872796212e-07,
    4.76932986787806447e-07,
    2.38450502727733004e-07,
    1.19219925965311064e-07,
    5.96081890512594801e-08,
    2.98035035146522793e-08,
    1.49015548283650427e-08,
    7.45071178983543006e-09,
    3.72533402478845728e-09,
    1.86265972351304914e-09,
    9.31327432419668166e-10,
    4.65662906503378366e-10,
    2.32831183367650534e-10,
    1.16415501727005193e-10,
    5.82077208790270145e-11,
    2.91038504449710001e-11,
    1.45519218910419849e-11,
    7.27595983505748180e-12,
    3.63797954737865086e-12,
    1.81898965030706607e-12,
    9.09494784026388841e-13,
];

/// Positive root of digamma, split into a leading double and its residual.
const DIGAMMA_ROOT_HI: f64 = 1.461_632_144_968_362_2;
const DIGAMMA_ROOT_LO: f64 = 9.549_995_429_965_697e-17;

/// Taylor coefficients psi^(k)(x0) / k! about the root x0, k = 1..=15.
const DIGAMMA_ROOT_TAYLOR: [f64; 15] = [
    9.67672245447621204e-01,
    -4.42763168983592081e-01,
    2.58499760955651026e-01,
    -1.63942705442406522e-01,
    1.07824050691262371e-01,
    -7.21995612564547140e-02,
    4.88042881641431101e-02,
    -3.31611264748473619e-02,
    2.25976482322181038e-02,
    -1.54247659049489595e-02,
    1.05387916166121750e-02,
    -7.20453438635686866e-03,
    4.92678139572985327e-03,
    -3.36980165543932821e-03,
    2.30512632673492797e-03,
];

fn check_domain<T: Real>(function: &'static str, x: T) -> Result<(), NumericsError> {
    if !(x.is_finite() && x > T::zero()) {
        return Err(NumericsError::Domain {
            function,
            value: x.to_f64_lossy(),
        });
    }
    Ok(())
}

/// Natural logarithm of the gamma function for `x > 0`.
pub fn log_gamma<T: Real>(x: T) -> Result<T, NumericsError> {
    check_domain("log_gamma", x)?;
    Ok(log_gamma_unchecked(x))
}

pub(crate) fn log_gamma_unchecked<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let one = T::one();
    if x < half {
        // x + 1 lands in [1, 1.5)
        return log_gamma_unchecked(x + one) - x.ln();
    }
    if x < T::of(1.5) {
        // ln(x) via ln_1p keeps the cancellation near x = 1 harmless
        return log_gamma_near_two(x + one) - (x - one).ln_1p();
    }
    if x < T::of(2.5) {
        return log_gamma_near_two(x);
    }
    if x < T::of(ASYMPTOTIC_THRESHOLD) {
        let mut shifted = x;
        let mut product = one;
        while shifted < T::of(ASYMPTOTIC_THRESHOLD) {
            product *= shifted;
            shifted += one;
        }
        return stirling(shifted) - product.ln();
    }
    stirling(x)
}

/// ln Gamma(2 + z) for |z| <= 0.5 from its Taylor series about 2.
fn log_gamma_near_two<T: Real>(x: T) -> T {
    let z = x - T::of(2.0);
    let mut sum = T::of(1.0 - EULER_GAMMA) * z;
    // (-z)^k
    let mut power = -z;
    for (i, &c) in ZETA_MINUS_ONE.iter().enumerate() {
        let k = i + 2;
        power *= -z;
        let term = T::of(c) * power / T::idx(k);
        sum += term;
        if term.abs() <= T::epsilon() * T::of(1e-3) * sum.abs() {
            break;
        }
    }
    sum
}

fn stirling<T: Real>(x: T) -> T {
    let inv = x.recip();
    let inv2 = inv * inv;
    // Bernoulli terms B_2k / (2k (2k-1) x^(2k-1))
    let coeffs = [
        1.0 / 12.0,
        -1.0 / 360.0,
        1.0 / 1260.0,
        -1.0 / 1680.0,
        1.0 / 1188.0,
        -691.0 / 360_360.0,
        1.0 / 156.0,
    ];
    let mut series = T::zero();
    for &c in coeffs.iter().rev() {
        series = series * inv2 + T::of(c);
    }
    series *= inv;
    (x - T::of(0.5)) * x.ln() - x + T::of(0.5) * (T::TAU()).ln() + series
}

/// Digamma function psi(x) = d/dx ln Gamma(x) for `x > 0`.
pub fn digamma<T: Real>(x: T) -> Result<T, NumericsError> {
    check_domain("digamma", x)?;
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked<T: Real>(x: T) -> T {
    let dx = (x - T::of(DIGAMMA_ROOT_HI)) - T::of(DIGAMMA_ROOT_LO);
    if dx.abs() < T::of(0.05) {
        let mut acc = T::zero();
        for &c in DIGAMMA_ROOT_TAYLOR.iter().rev() {
            acc = acc * dx + T::of(c);
        }
        return acc * dx;
    }
    let mut shifted = x;
    let mut correction = T::zero();
    while shifted < T::of(ASYMPTOTIC_THRESHOLD) {
        correction += shifted.recip();
        shifted += T::one();
    }
    let inv = shifted.recip();
    let inv2 = inv * inv;
    // -sum B_2k / (2k x^2k)
    let coeffs = [
        -1.0 / 12.0,
        1.0 / 120.0,
        -1.0 / 252.0,
        1.0 / 240.0,
        -1.0 / 132.0,
        691.0 / 32_760.0,
        -1.0 / 12.0,
    ];
    let mut series = T::zero();
    for &c in coeffs.iter().rev() {
        series = series * inv2 + T::of(c);
    }
    series *= inv2;
    shifted.ln() - T::of(0.5) * inv + series - correction
}

/// Trigamma function psi'(x) for `x > 0`.
pub fn trigamma<T: Real>(x: T) -> Result<T, NumericsError> {
    check_domain("trigamma", x)?;
    Ok(trigamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked<T: Real>(x: T) -> T {
    let mut shifted = x;
    let mut correction = T::zero();
    while shifted < T::of(ASYMPTOTIC_THRESHOLD) {
        correction += (shifted * shifted).recip();
        shifted += T::one();
    }
    let inv = shifted.recip();
    let inv2 = inv * inv;
    // B_2k / x^(2k+1)
    let coeffs = [
        1.0 / 6.0,
        -1.0 / 30.0,
        1.0 / 42.0,
        -1.0 / 30.0,
        5.0 / 66.0,
        -691.0 / 2730.0,
        7.0 / 6.0,
    ];
    let mut series = T::zero();
    for &c in coeffs.iter().rev() {
        series = series * inv2 + T::of(c);
    }
    series *= inv2 * inv;
    inv + T::of(0.5) * inv2 + series + correction
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn log_gamma_at_one_and_two_is_zero() {
        assert!(log_gamma(1.0_f64).unwrap().abs() < 1e-15);
        assert!(log_gamma(2.0_f64).unwrap().abs() < 1e-15);
    }

    #[test]
    fn log_gamma_five_and_a_half_matches_recursion_from_half_integer() {
        // Gamma(1.5) = sqrt(pi) / 2
        let lg15 = 0.5 * std::f64::consts::PI.ln() - 2.0_f64.ln();
        let expected = (4.5_f64 * 3.5 * 2.5 * 1.5).ln() + lg15;
        assert!(rel(log_gamma(5.5).unwrap(), expected) < 1e-13);
        // high-precision reference
        assert!(rel(log_gamma(5.5).unwrap(), 3.957_813_967_618_716_3) < 1e-14);
    }

    #[test]
    fn log_gamma_rejects_non_positive_and_non_finite() {
        assert!(log_gamma(0.0_f64).is_err());
        assert!(log_gamma(-1.5_f64).is_err());
        assert!(log_gamma(f64::NAN).is_err());
        assert!(log_gamma(f64::INFINITY).is_err());
    }

    #[test]
    fn digamma_known_values() {
        assert!(rel(digamma(1.0_f64).unwrap(), -EULER_GAMMA) < 1e-14);
        assert!(rel(digamma(2.0_f64).unwrap(), 1.0 - EULER_GAMMA) < 1e-14);
        assert!(rel(digamma(10.3_f64).unwrap(), 2.282_815_446_439_122_7) < 1e-14);
        assert!(digamma(DIGAMMA_ROOT_HI).unwrap().abs() < 1e-16);
        assert!(digamma(0.0_f64).is_err());
    }

    #[test]
    fn trigamma_known_values() {
        let zeta2 = std::f64::consts::PI.powi(2) / 6.0;
        assert!(rel(trigamma(1.0_f64).unwrap(), zeta2) < 1e-14);
        assert!(rel(trigamma(2.0_f64).unwrap(), zeta2 - 1.0) < 1e-14);
        assert!(rel(trigamma(7.25_f64).unwrap(), 0.147_879_233_158_932_17) < 1e-13);
        assert!(trigamma(-2.0_f64).is_err());
    }

    #[test]
    fn f32_instantiation_is_usable() {
        let v = log_gamma(5.5_f32).unwrap();
        assert!((v - 3.957_814_f32).abs() < 1e-5);
        assert!((digamma(1.0_f32).unwrap() + 0.577_215_7).abs() < 1e-5);
    }
}
