//! Rho-type M-estimators, scaled as `tau^2 * rho(r / tau)` so that each one is
//! 95% efficient under Gaussian noise.

use std::f64::consts::{FRAC_PI_2, LN_2};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L2,
    L1L2,
    Logistic,
    ModifiedHuber,
    CauchyLorentz,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::L2,
        LossKind::L1L2,
        LossKind::Logistic,
        LossKind::ModifiedHuber,
        LossKind::CauchyLorentz,
    ];

    /// Fixed scale factor of the estimator.
    pub fn tau(self) -> f64 {
        match self {
            LossKind::L2 | LossKind::L1L2 => 1.0,
            LossKind::Logistic => 1.205,
            LossKind::ModifiedHuber => 1.2107,
            LossKind::CauchyLorentz => 2.3849,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::L2 => "l2",
            LossKind::L1L2 => "l1_l2",
            LossKind::Logistic => "logistic",
            LossKind::ModifiedHuber => "modified_huber",
            LossKind::CauchyLorentz => "cauchy_lorentz",
        }
    }

    /// Unscaled `rho(x)`.
    fn base_rho(self, x: f64) -> f64 {
        match self {
            LossKind::L2 => x * x,
            LossKind::L1L2 => 2.0 * ((1.0 + x * x).sqrt() - 1.0),
            LossKind::Logistic => {
                let ax = x.abs();
                ax + (-2.0 * ax).exp().ln_1p() - LN_2
            }
            LossKind::ModifiedHuber => {
                let ax = x.abs();
                if ax <= FRAC_PI_2 {
                    1.0 - ax.cos()
                } else {
                    ax + (1.0 - FRAC_PI_2)
                }
            }
            LossKind::CauchyLorentz => (x * x).ln_1p(),
        }
    }

    /// Unscaled `rho'(x)`.
    fn base_psi(self, x: f64) -> f64 {
        match self {
            LossKind::L2 => 2.0 * x,
            LossKind::L1L2 => 2.0 * x / (1.0 + x * x).sqrt(),
            LossKind::Logistic => x.tanh(),
            LossKind::ModifiedHuber => {
                if x.abs() <= FRAC_PI_2 {
                    x.sin()
                } else {
                    x.signum()
                }
            }
            LossKind::CauchyLorentz => 2.0 * x / (1.0 + x * x),
        }
    }

    /// Unscaled `rho'(x) / x`, continuous at zero.
    fn base_weight(self, x: f64) -> f64 {
        match self {
            LossKind::L2 => 2.0,
            LossKind::L1L2 => 2.0 / (1.0 + x * x).sqrt(),
            LossKind::Logistic => {
                if x.abs() < 1e-6 {
                    1.0 - x * x / 3.0
                } else {
                    x.tanh() / x
                }
            }
            LossKind::ModifiedHuber => {
                let ax = x.abs();
                if ax < 1e-6 {
                    1.0 - x * x / 6.0
                } else if ax <= FRAC_PI_2 {
                    ax.sin() / ax
                } else {
                    1.0 / ax
                }
            }
            LossKind::CauchyLorentz => 2.0 / (1.0 + x * x),
        }
    }

    #[inline]
    pub(crate) fn rho_unchecked(self, r: f64) -> f64 {
        let tau = self.tau();
        tau * tau * self.base_rho(r / tau)
    }

    #[inline]
    pub(crate) fn psi_unchecked(self, r: f64) -> f64 {
        let tau = self.tau();
        tau * self.base_psi(r / tau)
    }

    #[inline]
    pub(crate) fn weight_unchecked(self, r: f64) -> f64 {
        self.base_weight(r / self.tau())
    }

    pub fn rho(self, r: f64) -> Result<f64> {
        finite(r)?;
        Ok(self.rho_unchecked(r))
    }

    /// Derivative of [`LossKind::rho`].
    pub fn psi(self, r: f64) -> Result<f64> {
        finite(r)?;
        Ok(self.psi_unchecked(r))
    }

    /// IRLS weight `psi(r) / r`.
    pub fn weight(self, r: f64) -> Result<f64> {
        finite(r)?;
        Ok(self.weight_unchecked(r))
    }
}

fn finite(r: f64) -> Result<()> {
    if r.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("residual {r} is not finite")))
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "l2" => Ok(LossKind::L2),
            "l1_l2" | "l1l2" => Ok(LossKind::L1L2),
            "logistic" => Ok(LossKind::Logistic),
            "modified_huber" | "huber" => Ok(LossKind::ModifiedHuber),
            "cauchy_lorentz" | "cauchy" => Ok(LossKind::CauchyLorentz),
            other => Err(Error::Config(format!("unknown loss kind `{other}`"))),
        }
    }
}
