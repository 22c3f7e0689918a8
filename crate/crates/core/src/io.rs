//! Number formatting and small helpers for the CSV/JSON artifacts.

/// Formats a real with 17 significant digits (bitwise round-trip).
pub fn fmt_real(v: f64) -> String {
    if v == 0.0 {
        // avoid "-0" noise in tables
        return "0".to_string();
    }
    format!("{v:.16e}")
}

/// Formats a count: integral values print without a fractional part.
pub fn fmt_count(v: f64) -> String {
    if v.is_finite() && v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        fmt_real(v)
    }
}

pub(crate) fn parse_f64(field: &str, line: u64, name: &str) -> crate::Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| crate::WhError::Parse {
            line,
            message: format!("column '{name}': cannot parse '{field}' as a number"),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_print_as_integers() {
        assert_eq!(fmt_count(12.0), "12");
        assert_eq!(fmt_count(0.0), "0");
        assert_eq!(fmt_count(1.5), fmt_real(1.5));
    }

    proptest! {
        #[test]
        fn real_formatting_round_trips_bitwise(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL) {
            let back: f64 = fmt_real(v).parse().unwrap();
            prop_assert_eq!(back.to_bits(), if v == 0.0 { 0.0f64.to_bits() } else { v.to_bits() });
        }
    }
}
