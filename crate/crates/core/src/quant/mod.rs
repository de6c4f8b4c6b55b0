//! Simulated quantizers.
//!
//! All quantizers quantize and immediately dequantize in `f64`. Rounding is
//! half-to-even and backpropagates straight through; clamping gates the
//! gradient of the input. Bitwidth 32 turns every quantizer into the exact
//! identity.

mod activation;
mod affine;
mod batch;
mod fusion;
mod lsq;

pub use activation::{ActParam, ActivationQuantizer, ActivationScheme, LearnedScaleState};
pub use affine::{
    affine_codes, affine_derive, affine_quantize, ema_update, AffineParams, EmaState,
    DEFAULT_EMA_MOMENTUM,
};
pub use batch::{
    bq_calibrate, bq_codes, bq_estimate, bq_op, bq_quantize, BatchQuantState, BqVars, Estimator,
    QuantMode,
};
pub use fusion::{fused_bias_check, FusionCheck};
pub use lsq::{lsq_codes, lsq_init_scale, lsq_quantize, LsqState};

use serde::{Deserialize, Serialize};

use crate::error::{QfaError, Result};

/// Smallest scale any quantizer will use.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Bit precision of one quantized tensor. 32 means full precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Bitwidth(u8);

impl Bitwidth {
    pub const ALLOWED: [u32; 5] = [2, 3, 4, 8, 32];
    pub const FULL: Bitwidth = Bitwidth(32);
    pub const B2: Bitwidth = Bitwidth(2);
    pub const B3: Bitwidth = Bitwidth(3);
    pub const B4: Bitwidth = Bitwidth(4);
    pub const B8: Bitwidth = Bitwidth(8);

    pub fn new(bits: u32) -> Result<Self> {
        if Self::ALLOWED.contains(&bits) {
            Ok(Self(bits as u8))
        } else {
            Err(QfaError::Parameter(format!(
                "bitwidth {bits} not in {:?}",
                Self::ALLOWED
            )))
        }
    }

    pub fn bits(self) -> u32 {
        u32::from(self.0)
    }

    pub fn is_full(self) -> bool {
        self.0 == 32
    }

    /// `[0, 2^b - 1]`, used for activations.
    pub fn unsigned_range(self) -> (f64, f64) {
        (0.0, ((1u64 << self.0) - 1) as f64)
    }

    /// `[-2^(b-1), 2^(b-1) - 1]`, used for weights.
    pub fn signed_range(self) -> (f64, f64) {
        let half = (1u64 << (self.0 - 1)) as f64;
        (-half, half - 1.0)
    }
}

impl TryFrom<u32> for Bitwidth {
    type Error = QfaError;

    fn try_from(bits: u32) -> Result<Self> {
        Self::new(bits)
    }
}

impl From<Bitwidth> for u32 {
    fn from(b: Bitwidth) -> u32 {
        b.bits()
    }
}

impl std::fmt::Display for Bitwidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for Bitwidth {
    type Err = QfaError;

    fn from_str(s: &str) -> Result<Self> {
        let bits: u32 = s
            .trim()
            .parse()
            .map_err(|_| QfaError::Parameter(format!("not a bitwidth: {s:?}")))?;
        Self::new(bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(Bitwidth::B2.unsigned_range(), (0.0, 3.0));
        assert_eq!(Bitwidth::B2.signed_range(), (-2.0, 1.0));
        assert_eq!(Bitwidth::B8.unsigned_range(), (0.0, 255.0));
        assert_eq!(Bitwidth::B4.signed_range(), (-8.0, 7.0));
    }

    #[test]
    fn rejects_unknown_bits() {
        assert!(Bitwidth::new(5).is_err());
        assert!(Bitwidth::new(32).unwrap().is_full());
        assert_eq!("3".parse::<Bitwidth>().unwrap(), Bitwidth::B3);
        assert!(serde_json::from_str::<Bitwidth>("7").is_err());
        assert_eq!(serde_json::to_string(&Bitwidth::B4).unwrap(), "4");
    }
}
