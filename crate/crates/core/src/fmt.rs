//! Locale-independent number formatting for reports.

/// Formats `x` with six significant digits in plain decimal notation,
/// switching to scientific notation for very large or very small magnitudes.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-6..=9).contains(&exp) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - exp).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // rounding can carry into a new digit (9.999995 -> 10.00000)
    match s.parse::<f64>() {
        Ok(v) if v != 0.0 && (v.abs().log10().floor() as i32) > exp && decimals > 0 => {
            format!("{x:.prec$}", prec = decimals - 1)
        }
        _ => s,
    }
}

#[cfg(test)]
mod tests {
    use super::sig6;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.00972), "0.00972000");
        assert_eq!(sig6(0.0865112345), "0.0865112");
        assert_eq!(sig6(1600.0), "1600.00");
        assert_eq!(sig6(-1.23456789), "-1.23457");
        assert_eq!(sig6(9.9999996), "10.0000");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.5e-9), "1.50000e-9");
    }
}
