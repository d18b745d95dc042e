//! Generalized logistic trajectories on the disease progression axis.
//!
//! Every curve is a unit sigmoid `g(s)` rescaled as `f(s) = (a - d) g(s) + d`,
//! so `d` is the value before the disease process and `a` the value it tends
//! to afterwards. All four families share an inflection point at `s = c`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponent arguments beyond this magnitude return the corresponding asymptote.
pub const EXP_CLAMP: f64 = 700.0;

/// Bounds on the symmetry parameter used by the optimizer.
pub const GAMMA_MIN: f64 = 1e-4;
pub const GAMMA_MAX: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogisticKind {
    Verhulst,
    Gompertz,
    Richards,
    ModifiedStannard,
}

impl LogisticKind {
    pub const ALL: [LogisticKind; 4] = [
        LogisticKind::Verhulst,
        LogisticKind::Gompertz,
        LogisticKind::Richards,
        LogisticKind::ModifiedStannard,
    ];

    /// Whether the family carries the symmetry parameter `gamma`.
    pub fn has_symmetry(self) -> bool {
        matches!(self, LogisticKind::Richards | LogisticKind::ModifiedStannard)
    }

    pub fn name(self) -> &'static str {
        match self {
            LogisticKind::Verhulst => "verhulst",
            LogisticKind::Gompertz => "gompertz",
            LogisticKind::Richards => "richards",
            LogisticKind::ModifiedStannard => "modified_stannard",
        }
    }
}

impl fmt::Display for LogisticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LogisticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "verhulst" | "logistic" => Ok(LogisticKind::Verhulst),
            "gompertz" => Ok(LogisticKind::Gompertz),
            "richards" => Ok(LogisticKind::Richards),
            "modified_stannard" | "stannard" | "ms" => Ok(LogisticKind::ModifiedStannard),
            other => Err(Error::Config(format!("unknown curve kind `{other}`"))),
        }
    }
}

/// One biomarker's trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveParams {
    pub kind: LogisticKind,
    /// Value approached as `g -> 1` (late disease).
    pub a: f64,
    /// Value approached as `g -> 0` (early disease).
    pub d: f64,
    /// Growth rate per progression-score unit, strictly positive.
    pub b: f64,
    /// Inflection location.
    pub c: f64,
    /// Symmetry; ignored by Verhulst and Gompertz.
    pub gamma: f64,
}

/// The unit sigmoid and its partial derivatives at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Shape {
    pub g: f64,
    pub ds: f64,
    pub db: f64,
    pub dc: f64,
    pub dgamma: f64,
}

impl Shape {
    fn saturated(g: f64) -> Self {
        Shape {
            g,
            ds: 0.0,
            db: 0.0,
            dc: 0.0,
            dgamma: 0.0,
        }
    }
}

/// `ln(1 + e^x)` without overflow.
fn log1p_exp(x: f64) -> f64 {
    if x > 36.0 {
        x + (-x).exp()
    } else if x < -36.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl CurveParams {
    pub fn new(kind: LogisticKind, a: f64, d: f64, b: f64, c: f64, gamma: f64) -> Self {
        CurveParams {
            kind,
            a,
            d,
            b,
            c,
            gamma,
        }
    }

    /// Symmetric sigmoid shortcut (`gamma = 1`).
    pub fn verhulst(a: f64, d: f64, b: f64, c: f64) -> Self {
        Self::new(LogisticKind::Verhulst, a, d, b, c, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("a", self.a),
            ("d", self.d),
            ("b", self.b),
            ("c", self.c),
            ("gamma", self.gamma),
        ];
        if let Some((name, v)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Domain(format!("curve parameter {name} = {v} is not finite")));
        }
        if self.b <= 0.0 {
            return Err(Error::Domain(format!("growth rate b = {} must be positive", self.b)));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Domain(format!(
                "symmetry gamma = {} must be positive",
                self.gamma
            )));
        }
        Ok(())
    }

    fn check(&self, s: f64) -> Result<()> {
        if !s.is_finite() {
            return Err(Error::Domain(format!("progression score {s} is not finite")));
        }
        self.validate()
    }

    pub(crate) fn shape(&self, s: f64) -> Shape {
        let x = s - self.c;
        let b = self.b;
        match self.kind {
            LogisticKind::Verhulst => {
                let z = b * x;
                if z > EXP_CLAMP {
                    return Shape::saturated(1.0);
                }
                if z < -EXP_CLAMP {
                    return Shape::saturated(0.0);
                }
                let g = sigmoid(z);
                let h = g * sigmoid(-z);
                Shape {
                    g,
                    ds: b * h,
                    db: x * h,
                    dc: -b * h,
                    dgamma: 0.0,
                }
            }
            LogisticKind::Gompertz => {
                let z = b * x;
                if z > EXP_CLAMP {
                    return Shape::saturated(1.0);
                }
                if z < -EXP_CLAMP {
                    return Shape::saturated(0.0);
                }
                let u = (-z).exp();
                let g = (-u).exp();
                let h = (-z - u).exp();
                Shape {
                    g,
                    ds: b * h,
                    db: x * h,
                    dc: -b * h,
                    dgamma: 0.0,
                }
            }
            LogisticKind::Richards => {
                let gamma = self.gamma;
                let z = b * x;
                if z > EXP_CLAMP {
                    return Shape::saturated(1.0);
                }
                if z < -EXP_CLAMP {
                    return Shape::saturated(0.0);
                }
                let t = gamma.ln() - z;
                let l = log1p_exp(t);
                let q = sigmoid(t);
                let g = (-l / gamma).exp();
                let ds = g * b * q / gamma;
                Shape {
                    g,
                    ds,
                    db: g * x * q / gamma,
                    dc: -ds,
                    dgamma: g * (l - q) / (gamma * gamma),
                }
            }
            LogisticKind::ModifiedStannard => {
                let gamma = self.gamma;
                let z = b * x / gamma;
                if z > EXP_CLAMP {
                    return Shape::saturated(1.0);
                }
                if z < -EXP_CLAMP {
                    return Shape::saturated(0.0);
                }
                let t = -z - gamma.ln();
                let l = log1p_exp(t);
                let q = sigmoid(t);
                let g = (-gamma * l).exp();
                let ds = g * b * q;
                Shape {
                    g,
                    ds,
                    db: g * x * q,
                    dc: -ds,
                    dgamma: g * (-l - q * (z - 1.0)),
                }
            }
        }
    }

    /// `f(s)` without input validation, for inner loops on already-checked parameters.
    #[inline]
    pub fn value(&self, s: f64) -> f64 {
        (self.a - self.d) * self.shape(s).g + self.d
    }

    /// The unit sigmoid `g(s)` in `[0, 1]`.
    pub fn unit_value(&self, s: f64) -> f64 {
        self.shape(s).g
    }

    pub fn evaluate(&self, s: f64) -> Result<f64> {
        self.check(s)?;
        Ok(self.value(s))
    }

    /// Partials of `f(s)` with respect to `[a, d, b, c, gamma]`.
    pub fn param_gradient(&self, s: f64) -> Result<[f64; 5]> {
        self.check(s)?;
        Ok(self.param_gradient_unchecked(s))
    }

    pub(crate) fn param_gradient_unchecked(&self, s: f64) -> [f64; 5] {
        let sh = self.shape(s);
        let span = self.a - self.d;
        [
            sh.g,
            1.0 - sh.g,
            span * sh.db,
            span * sh.dc,
            span * sh.dgamma,
        ]
    }

    /// Slope of `f` along the progression axis.
    pub fn dps_gradient(&self, s: f64) -> Result<f64> {
        self.check(s)?;
        Ok((self.a - self.d) * self.shape(s).ds)
    }

    pub fn inflection_point(&self) -> f64 {
        self.c
    }

    /// Score at which the unit sigmoid reaches `p` in `(0, 1)`, found by bisection.
    pub fn unit_quantile(&self, p: f64) -> f64 {
        let step = 1.0 / self.b.max(f64::MIN_POSITIVE);
        let (mut lo, mut hi) = (self.c - step, self.c + step);
        let mut grow = step;
        while self.unit_value(lo) > p && grow.is_finite() {
            grow *= 2.0;
            lo = self.c - grow;
        }
        grow = step;
        while self.unit_value(hi) < p && grow.is_finite() {
            grow *= 2.0;
            hi = self.c + grow;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.unit_value(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn is_increasing(&self) -> bool {
        self.a > self.d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_quantile_inverts_sigmoid() {
        for kind in [LogisticKind::Verhulst, LogisticKind::Gompertz, LogisticKind::Richards, LogisticKind::ModifiedStannard] {
            let p = CurveParams::new(kind, 3.0, 1.0, 0.7, 2.0, 0.4);
            for q in [0.01, 0.3, 0.5, 0.99] {
                assert!((p.unit_value(p.unit_quantile(q)) - q).abs() < 1e-12, "{kind} {q}");
            }
        }
        let v = CurveParams::verhulst(1.0, 0.0, 2.0, 1.0);
        assert!((v.unit_quantile(0.5) - 1.0).abs() < 1e-12);
    }

    fn ms(b: f64, c: f64, gamma: f64) -> CurveParams {
        CurveParams::new(LogisticKind::ModifiedStannard, 1.0, 0.0, b, c, gamma)
    }

    #[test]
    fn known_values() {
        let v = CurveParams::verhulst(1.0, 0.0, 2.0, 1.0);
        assert_eq!(v.evaluate(1.0).unwrap(), 0.5);

        let g = CurveParams::new(LogisticKind::Gompertz, 1.0, 0.0, 1.0, 0.0, 1.0);
        assert!((g.evaluate(0.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);

        let m = ms(1.0, 0.0, 2.0);
        assert!((m.evaluate(0.0).unwrap() - 4.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn richards_at_unit_gamma_is_verhulst() {
        let r = CurveParams::new(LogisticKind::Richards, 1.0, 0.0, 1.3, -0.2, 1.0);
        let v = CurveParams::verhulst(1.0, 0.0, 1.3, -0.2);
        assert!((r.evaluate(0.37).unwrap() - v.evaluate(0.37).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn dps_gradient_values() {
        let v = CurveParams::verhulst(1.0, 0.0, 2.0, 0.0);
        assert!((v.dps_gradient(0.0).unwrap() - 0.5).abs() < 1e-15);

        let flat = CurveParams::new(LogisticKind::Richards, 3.0, 3.0, 1.0, 0.0, 2.0);
        assert_eq!(flat.dps_gradient(0.4).unwrap(), 0.0);

        // e^-1 * exp(-e^-1), evaluated directly from the closed form
        let g = CurveParams::new(LogisticKind::Gompertz, 1.0, 0.0, 1.0, 0.0, 1.0);
        let expected = (-1.0f64).exp() * (-(-1.0f64).exp()).exp();
        assert!((g.dps_gradient(1.0).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.25465).abs() < 1e-5);
    }

    #[test]
    fn linear_partials_in_asymptotes() {
        for kind in LogisticKind::ALL {
            let p = CurveParams::new(kind, 4.0, -1.0, 0.7, 0.3, 1.7);
            let grad = p.param_gradient(1.1).unwrap();
            let g = p.unit_value(1.1);
            assert_eq!(grad[0], g);
            assert_eq!(grad[1], 1.0 - g);
        }
    }

    #[test]
    fn c_partial_is_negative_slope() {
        let p = CurveParams::verhulst(2.0, 0.5, 1.5, 0.25);
        let s = 0.9;
        let grad = p.param_gradient(s).unwrap();
        assert!((grad[3] + p.dps_gradient(s).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn modified_stannard_gradient_against_central_differences() {
        let p = ms(1.0, 0.0, 1.5);
        let s = 0.4;
        let h = 1e-5;
        let grad = p.param_gradient(s).unwrap();
        let perturb = |i: usize, delta: f64| {
            let mut q = p;
            match i {
                0 => q.a += delta,
                1 => q.d += delta,
                2 => q.b += delta,
                3 => q.c += delta,
                _ => q.gamma += delta,
            }
            q.evaluate(s).unwrap()
        };
        for (i, analytic) in grad.iter().enumerate() {
            let fd = (perturb(i, h) - perturb(i, -h)) / (2.0 * h);
            let rel = (analytic - fd).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-6, "partial {i}: analytic {analytic} fd {fd}");
        }
    }

    #[test]
    fn inflection_is_c() {
        for kind in LogisticKind::ALL {
            let p = CurveParams::new(kind, 18.0, 0.0, 0.8, 3.003, 2.5);
            assert_eq!(p.inflection_point(), 3.003);
        }
        assert_eq!(CurveParams::verhulst(1.0, 0.0, 1.0, 0.0).inflection_point(), 0.0);
    }

    #[test]
    fn exponent_clamping_returns_asymptotes() {
        for kind in LogisticKind::ALL {
            let p = CurveParams::new(kind, 5.0, 2.0, 1.0, 0.0, 1.0);
            assert_eq!(p.evaluate(800.0).unwrap(), 5.0);
            assert_eq!(p.evaluate(-800.0).unwrap(), 2.0);
            let grad = p.param_gradient(-800.0).unwrap();
            assert!(grad.iter().all(|g| g.is_finite()));
        }
    }

    #[test]
    fn rejects_invalid_input() {
        let p = CurveParams::verhulst(1.0, 0.0, 1.0, 0.0);
        assert!(p.evaluate(f64::NAN).is_err());
        assert!(p.evaluate(f64::INFINITY).is_err());
        let bad = CurveParams::verhulst(1.0, 0.0, -1.0, 0.0);
        assert!(bad.evaluate(0.0).is_err());
        let bad_gamma = CurveParams::new(LogisticKind::Richards, 1.0, 0.0, 1.0, 0.0, 0.0);
        assert!(bad_gamma.evaluate(0.0).is_err());
        let nan_a = CurveParams::verhulst(f64::NAN, 0.0, 1.0, 0.0);
        assert!(nan_a.dps_gradient(0.0).is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("modified-stannard".parse::<LogisticKind>().unwrap(), LogisticKind::ModifiedStannard);
        assert_eq!("Gompertz".parse::<LogisticKind>().unwrap(), LogisticKind::Gompertz);
        assert!("cubic".parse::<LogisticKind>().is_err());
    }
}
