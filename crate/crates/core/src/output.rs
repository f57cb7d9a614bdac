//! CSV helpers shared by trajectory and report exports.

use std::io::Write;

use crate::error::Result;

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `(k, t, value)` rows under the given header.
pub fn write_series_csv(
    mut w: impl Write,
    header: &str,
    rows: impl IntoIterator<Item = (i64, f64, f64)>,
) -> Result<()> {
    writeln!(w, "{header}")?;
    for (k, t, v) in rows {
        writeln!(w, "{k},{},{}", fmt_f64(t), fmt_f64(v))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        for v in [2.0 / 3.0, 0.1, -1e-300, 123_456_789.123_456_78, 0.0] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
        assert_eq!(fmt_f64(2.0 / 3.0), "6.6666666666666663e-1");
    }
}
