//! Structural constants of the monotonicity and Khasminskii-type conditions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constants of the growth, monotonicity, Lyapunov and Hölder conditions.
///
/// `p_star` is not free: it is always `4q - 2`. It may be given in a config
/// file, but it must then agree with `q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssumptionConstants {
    pub q: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub a5: f64,
    pub a6: f64,
    pub a7: f64,
    pub a8: f64,
    pub a9: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub b5: f64,
    pub b6: f64,
    pub b7: f64,
    pub b8: f64,
    pub b9: f64,
    pub b10: f64,
    pub b11: f64,
    pub b12: f64,
    pub b13: f64,
    pub l1: f64,
    pub l2: f64,
    #[serde(rename = "K1")]
    pub k1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_star: Option<f64>,
}

/// One strict inequality among the constants themselves.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeaderCheck {
    pub id: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl AssumptionConstants {
    /// The constant set listed for the cubic example, with `l1 = 3` and
    /// `l2 = 1.5` filled in (any `l1` in `(2, 5)` and `l2` in `(1, 2]` work
    /// for that model).
    pub fn ex1() -> Self {
        AssumptionConstants {
            q: 3.0,
            a1: 20.0,
            a2: 0.0,
            a3: 0.0,
            a4: 0.0,
            a5: 2.0,
            a6: 10.0,
            a7: 0.0,
            a8: 0.0,
            a9: 1.0,
            eps1: 0.0,
            eps2: 1.0,
            b1: 2.0,
            b2: 0.0,
            b3: 10.0,
            b4: 18f64.powi(9) / 10.0,
            b5: 5.0,
            b6: 0.0,
            b7: 70.0,
            b8: 15.0,
            b9: 100.0,
            b10: 1.0,
            b11: 0.0,
            b12: 20.0,
            b13: 2.0,
            l1: 3.0,
            l2: 1.5,
            k1: 1.0,
            p_star: None,
        }
    }

    pub fn p_star(&self) -> f64 {
        4.0 * self.q - 2.0
    }

    /// Range checks that make the constant set meaningful at all. Violations
    /// of the strict header inequalities are *not* errors; they are reported
    /// by [`header_checks`](Self::header_checks).
    pub fn validate(&self) -> Result<()> {
        if !(self.q >= 2.0) {
            return Err(Error::usage(format!("q must be at least 2, got {}", self.q)));
        }
        let nonneg = [
            ("a1", self.a1),
            ("a2", self.a2),
            ("a3", self.a3),
            ("a4", self.a4),
            ("a5", self.a5),
            ("a6", self.a6),
            ("a7", self.a7),
            ("a8", self.a8),
            ("a9", self.a9),
            ("eps1", self.eps1),
            ("eps2", self.eps2),
            ("b1", self.b1),
            ("b2", self.b2),
            ("b3", self.b3),
            ("b4", self.b4),
            ("b5", self.b5),
            ("b6", self.b6),
            ("b7", self.b7),
            ("b8", self.b8),
            ("b9", self.b9),
            ("b10", self.b10),
            ("b11", self.b11),
            ("b12", self.b12),
            ("b13", self.b13),
            ("K1", self.k1),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::usage(format!("constant {name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.l1.is_finite() && self.l2.is_finite()) {
            return Err(Error::usage("l1 and l2 must be finite"));
        }
        if let Some(p) = self.p_star {
            if p != self.p_star() {
                return Err(Error::usage(format!(
                    "p_star must equal 4q - 2 = {}, got {p}",
                    self.p_star()
                )));
            }
        }
        Ok(())
    }

    pub fn header_checks(&self) -> Vec<HeaderCheck> {
        let check = |id, lhs: f64, rhs: f64| HeaderCheck {
            id,
            lhs,
            rhs,
            holds: lhs > rhs,
        };
        vec![
            check("b1 > b2 + l1*(a2 + a3)", self.b1, self.b2 + self.l1 * (self.a2 + self.a3)),
            check("b3 > l1*(a4 + a5)", self.b3, self.l1 * (self.a4 + self.a5)),
            check("b5 > b6", self.b5, self.b6),
            check("b7 > b8", self.b7, self.b8),
            check("b10 > b11", self.b10, self.b11),
            check("b12 > b13", self.b12, self.b13),
            check("l1 > 2", self.l1, 2.0),
            check("l2 > 1", self.l2, 1.0),
        ]
    }
}
