//! Distance kernels for spatial-HAC meat matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    /// k(d) = 1 for d < h.
    Truncation,
    /// k(d) = 1 - d/h for d < h.
    Bartlett,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(KernelSpec { kind, bandwidth })
    }

    pub fn bartlett(bandwidth: f64) -> Result<Self> {
        Self::new(KernelKind::Bartlett, bandwidth)
    }

    pub fn truncation(bandwidth: f64) -> Result<Self> {
        Self::new(KernelKind::Truncation, bandwidth)
    }

    pub fn weight(&self, d: f64) -> f64 {
        if d >= self.bandwidth {
            return 0.0;
        }
        match self.kind {
            KernelKind::Truncation => 1.0,
            KernelKind::Bartlett => 1.0 - d / self.bandwidth,
        }
    }
}
