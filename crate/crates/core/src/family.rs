//! Linear-exponential-family components: mean, mean gradient, variance,
//! per-observation log-likelihood and score.
//!
//! Everything works off the linear index `eta = x'beta`; the row-level
//! functions taking `(x, beta)` are thin wrappers.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{ln_factorial, ln_gamma, norm_cdf, norm_pdf};

/// Probit means are kept inside [EPS_MEAN, 1 - EPS_MEAN].
pub const EPS_MEAN: f64 = 1e-10;

/// Largest linear index accepted by the exponential mean.
pub const MAX_ETA: f64 = 700.0;

/// Above this NB2 shape the Poisson limit of the log-likelihood is used.
const NB2_POISSON_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Family {
    Poisson,
    /// Negative binomial II with fixed dispersion. The variance is always
    /// m(1 + m tau2). `exponent` only enters `loglik_obs`, where the shape is
    /// (tau2)^-exponent; 2 reproduces the printed likelihood, 1 is the
    /// textbook NB2.
    NegBin2 {
        tau2: f64,
        exponent: u8,
    },
    BernoulliProbit,
}

impl Family {
    pub fn negbin2(tau2: f64) -> Result<Self> {
        Self::negbin2_with_exponent(tau2, 2)
    }

    pub fn negbin2_with_exponent(tau2: f64, exponent: u8) -> Result<Self> {
        if !(tau2.is_finite() && tau2 >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "NB2 tau2 must be finite and >= 0, got {tau2}"
            )));
        }
        if exponent != 1 && exponent != 2 {
            return Err(Error::InvalidArgument(format!(
                "NB2 exponent must be 1 or 2, got {exponent}"
            )));
        }
        Ok(Family::NegBin2 { tau2, exponent })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Poisson => "poisson",
            Family::NegBin2 { .. } => "nb2",
            Family::BernoulliProbit => "probit",
        }
    }

    pub fn is_count(&self) -> bool {
        !matches!(self, Family::BernoulliProbit)
    }

    /// Checks the response against the family's support.
    pub fn validate(&self, ds: &crate::data::Dataset) -> Result<()> {
        if self.is_count() {
            ds.validate_counts()
        } else {
            ds.validate_binary()
        }
    }

    fn check_eta(&self, eta: f64) -> Result<()> {
        if !eta.is_finite() || (self.is_count() && eta > MAX_ETA) {
            return Err(Error::Overflow { eta });
        }
        Ok(())
    }

    /// Conditional mean at linear index `eta`.
    pub fn mean_eta(&self, eta: f64) -> Result<f64> {
        self.check_eta(eta)?;
        Ok(match self {
            Family::Poisson | Family::NegBin2 { .. } => eta.exp(),
            Family::BernoulliProbit => norm_cdf(eta).clamp(EPS_MEAN, 1.0 - EPS_MEAN),
        })
    }

    /// dm/deta.
    pub fn dmean_eta(&self, eta: f64) -> Result<f64> {
        self.check_eta(eta)?;
        Ok(match self {
            Family::Poisson | Family::NegBin2 { .. } => eta.exp(),
            Family::BernoulliProbit => norm_pdf(eta),
        })
    }

    /// d2m/deta2.
    pub fn d2mean_eta(&self, eta: f64) -> Result<f64> {
        self.check_eta(eta)?;
        Ok(match self {
            Family::Poisson | Family::NegBin2 { .. } => eta.exp(),
            Family::BernoulliProbit => -eta * norm_pdf(eta),
        })
    }

    /// LEF variance as a function of the mean.
    pub fn lef_variance(&self, m: f64) -> Result<f64> {
        match self {
            Family::Poisson | Family::NegBin2 { .. } if !(m > 0.0 && m.is_finite()) => Err(Error::MeanOutOfRange {
                family: self.name(),
                mean: m,
            }),
            Family::Poisson => Ok(m),
            Family::NegBin2 { tau2, .. } => Ok(m * (1.0 + m * tau2)),
            Family::BernoulliProbit => {
                if !(m > 0.0 && m < 1.0) {
                    return Err(Error::MeanOutOfRange {
                        family: self.name(),
                        mean: m,
                    });
                }
                Ok(m * (1.0 - m))
            }
        }
    }

    /// (mean, variance) at `eta`. Probit uses Phi(-eta) for 1 - m so the upper
    /// tail keeps its precision.
    pub fn mean_var_eta(&self, eta: f64) -> Result<(f64, f64)> {
        match self {
            Family::BernoulliProbit => {
                self.check_eta(eta)?;
                let m = norm_cdf(eta).clamp(EPS_MEAN, 1.0 - EPS_MEAN);
                let q = norm_cdf(-eta).clamp(EPS_MEAN, 1.0 - EPS_MEAN);
                Ok((m, m * q))
            }
            _ => {
                let m = self.mean_eta(eta)?;
                Ok((m, self.lef_variance(m)?))
            }
        }
    }

    /// Per-observation log-likelihood at `eta`.
    ///
    /// Poisson includes -log(y!). The NB2 form has no factorial term, as
    /// printed, and reduces to y*eta - m when the shape is infinite.
    pub fn loglik_eta(&self, y: f64, eta: f64) -> Result<f64> {
        match *self {
            Family::Poisson => {
                let m = self.mean_eta(eta)?;
                Ok(y * eta - m - ln_factorial(y))
            }
            Family::NegBin2 { tau2, exponent } => {
                let m = self.mean_eta(eta)?;
                Ok(nb2_loglik(y, eta, m, tau2, exponent))
            }
            Family::BernoulliProbit => {
                self.check_eta(eta)?;
                let m = norm_cdf(eta).clamp(EPS_MEAN, 1.0 - EPS_MEAN);
                let q = norm_cdf(-eta).clamp(EPS_MEAN, 1.0 - EPS_MEAN);
                Ok(y * m.ln() + (1.0 - y) * q.ln())
            }
        }
    }

    /// Objective whose eta-derivative is exactly the LEF quasi-score. Equal
    /// to `loglik_eta` except for NB2, where the shape is 1/tau2 whatever the
    /// exponent switch says.
    pub fn quasi_loglik_eta(&self, y: f64, eta: f64) -> Result<f64> {
        match *self {
            Family::NegBin2 { tau2, .. } => {
                let m = self.mean_eta(eta)?;
                Ok(nb2_loglik(y, eta, m, tau2, 1))
            }
            _ => self.loglik_eta(y, eta),
        }
    }

    /// d(score)/d(eta) factor: score = x * w(eta) where
    /// w = m'(eta) (y - m) / v(m).
    pub fn score_weight_eta(&self, y: f64, eta: f64) -> Result<f64> {
        let dm = self.dmean_eta(eta)?;
        let (m, v) = self.mean_var_eta(eta)?;
        let resid = match self {
            // 1 - m from the upper tail so y = 1 residuals stay accurate
            Family::BernoulliProbit if y == 1.0 => norm_cdf(-eta).clamp(EPS_MEAN, 1.0 - EPS_MEAN),
            _ => y - m,
        };
        Ok(dm * resid / v)
    }

    pub fn mean(&self, x: &[f64], beta: &DVector<f64>) -> Result<f64> {
        self.mean_eta(dot(x, beta))
    }

    pub fn mean_gradient(&self, x: &[f64], beta: &DVector<f64>) -> Result<DVector<f64>> {
        let dm = self.dmean_eta(dot(x, beta))?;
        Ok(DVector::from_iterator(x.len(), x.iter().map(|v| v * dm)))
    }

    pub fn loglik_obs(&self, y: f64, x: &[f64], beta: &DVector<f64>) -> Result<f64> {
        self.loglik_eta(y, dot(x, beta))
    }

    pub fn score_obs(&self, y: f64, x: &[f64], beta: &DVector<f64>) -> Result<DVector<f64>> {
        let w = self.score_weight_eta(y, dot(x, beta))?;
        Ok(DVector::from_iterator(x.len(), x.iter().map(|v| v * w)))
    }

    /// Link applied to a sample mean, used for starting values.
    pub fn link(&self, mean: f64) -> Option<f64> {
        match self {
            Family::Poisson | Family::NegBin2 { .. } => (mean > 0.0).then(|| mean.ln()),
            Family::BernoulliProbit => (mean > 0.0 && mean < 1.0).then(|| crate::special::norm_quantile(mean)),
        }
    }
}

fn nb2_loglik(y: f64, eta: f64, m: f64, tau2: f64, exponent: u8) -> f64 {
    let alpha = if tau2 == 0.0 {
        f64::INFINITY
    } else {
        tau2.powi(-i32::from(exponent))
    };
    if alpha > NB2_POISSON_LIMIT {
        return y * eta - m;
    }
    // alpha*log(alpha/(alpha+m)) + y*log(m/(alpha+m)) + lnG(y+alpha) - lnG(alpha)
    -alpha * (m / alpha).ln_1p() + y * (eta - (alpha + m).ln()) + ln_gamma(y + alpha) - ln_gamma(alpha)
}

pub(crate) fn dot(x: &[f64], beta: &DVector<f64>) -> f64 {
    debug_assert_eq!(x.len(), beta.len());
    x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum()
}
