//! Globally adaptive Gauss–Kronrod (7/15) quadrature on finite intervals.

use crate::error::{CesisError, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy)]
pub struct QuadSettings {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadSettings {
    fn default() -> Self {
        Self {
            abs_tol: 1e-12,
            rel_tol: 1e-10,
            max_intervals: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Segment {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (j, (&x, &w)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
        let dx = half * x;
        let pair = f(center - dx) + f(center + dx);
        kronrod += w * pair;
        // odd Kronrod nodes coincide with the Gauss nodes
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    Segment {
        a,
        b,
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
    }
}

/// Integrates `f` over `[a, b]`.
///
/// Fails when the error estimate does not reach the tolerance within
/// `max_intervals` subdivisions or the integrand produces a non-finite value.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, settings: QuadSettings) -> Result<f64> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(CesisError::Oracle("quadrature bounds must be finite".into()));
    }
    if a == b {
        return Ok(0.0);
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut segments = vec![gk15(&f, lo, hi)];
    loop {
        let total: f64 = segments.iter().map(|s| s.value).sum();
        let error: f64 = segments.iter().map(|s| s.error).sum();
        if !total.is_finite() || !error.is_finite() {
            return Err(CesisError::Oracle("integrand is not finite".into()));
        }
        if error <= settings.abs_tol.max(settings.rel_tol * total.abs()) {
            return Ok(sign * total);
        }
        if segments.len() >= settings.max_intervals {
            return Err(CesisError::Oracle(format!(
                "quadrature did not converge: estimate {total:e}, error {error:e}"
            )));
        }
        let worst = segments
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .map(|(i, _)| i)
            .expect("at least one segment");
        let seg = segments.swap_remove(worst);
        let mid = 0.5 * (seg.a + seg.b);
        if mid <= seg.a || mid >= seg.b {
            return Err(CesisError::Oracle("quadrature interval underflow".into()));
        }
        segments.push(gk15(&f, seg.a, mid));
        segments.push(gk15(&f, mid, seg.b));
    }
}

/// Single 15-point Kronrod rule on `[a, b]`, for integrands known to be
/// smooth on the interval.
pub fn gauss_kronrod15<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    gk15(&f, a, b).value
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_are_exact() {
        let v = integrate(|x| x.powi(5) - 3.0 * x * x, -1.0, 2.0, QuadSettings::default()).unwrap();
        // [x^6/6 - x^3] from -1 to 2
        let exact = (64.0 / 6.0 - 8.0) - (1.0 / 6.0 + 1.0);
        assert!((v - exact).abs() < 1e-13);
    }

    #[test]
    fn oscillatory_and_reversed() {
        let v = integrate(|x| (14.0 * x).cos(), 0.0, 3.0, QuadSettings::default()).unwrap();
        assert!((v - (42.0f64).sin() / 14.0).abs() < 1e-12);
        let r = integrate(|x| x.exp(), 1.0, 0.0, QuadSettings::default()).unwrap();
        assert!((r + (1f64.exp() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn nan_integrand_is_an_error() {
        assert!(integrate(|_| f64::NAN, 0.0, 1.0, QuadSettings::default()).is_err());
    }
}
