//! The two denoising networks of the cascade.
//!
//! [`CommandNet`] predicts clean command tokens from corrupted ones, with an
//! optional length condition. [`ParamNet`] predicts clean parameter tokens
//! given the clean command sequence. Both expose `forward` returning logits
//! over the valid (non-absorbing) vocabulary plus a cache, and `backward`
//! accumulating exact weight gradients from logit gradients.

mod command;
pub mod nn;
mod optim;
mod param;

pub use command::{CommandCache, CommandNet};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamCache, ParamLayout, ParamNet};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cadseq::{MAX_COMMANDS, MAX_PARAMS, NUM_COMMANDS, NUM_LEVELS};
use crate::cadseq::PAD_OWNER;
use nn::Mask;

/// Command-chain states: the six commands plus absorbing.
pub const CMD_STATES: usize = NUM_COMMANDS + 1;
/// Parameter-chain states: 256 levels plus absorbing.
pub const PARAM_STATES: usize = NUM_LEVELS + 1;
/// Parameter-net input id of a padding position.
pub const PARAM_PAD_INPUT: usize = PARAM_STATES;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenoiserError {
    #[error("sequence length {got} exceeds the configured maximum {max}")]
    LengthExceeded { got: usize, max: usize },
    #[error("length condition {0} outside 1..=60")]
    OutOfRange(usize),
    #[error("slot layout disagrees with the command sequence: {0}")]
    LayoutMismatch(String),
    #[error("condition does not match the network's condition mode")]
    ConditionMismatch,
    #[error("token {token} outside 0..{states}")]
    BadToken { token: usize, states: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("weights do not match the configured architecture")]
    WeightLayout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionMode {
    #[default]
    None,
    Length,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_blocks_cmd: usize,
    pub n_blocks_param: usize,
    pub n_heads: usize,
    /// Hidden width of the feed-forward sublayers as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub max_cmd_len: usize,
    pub max_param_len: usize,
    pub condition: ConditionMode,
    pub use_global_attention: bool,
    pub use_local_attention: bool,
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_blocks_cmd: 8,
            n_blocks_param: 4,
            n_heads: 8,
            ffn_mult: 4,
            max_cmd_len: MAX_COMMANDS,
            max_param_len: MAX_PARAMS,
            condition: ConditionMode::None,
            use_global_attention: true,
            use_local_attention: true,
            dropout: 0.0,
            init_std: 0.02,
        }
    }
}

impl DenoiserConfig {
    /// Two blocks per net at width 32; used by gradient checks.
    pub fn miniature() -> Self {
        Self {
            d_model: 32,
            n_blocks_cmd: 2,
            n_blocks_param: 2,
            n_heads: 4,
            ffn_mult: 2,
            max_cmd_len: 12,
            max_param_len: 40,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn check(&self) -> Result<(), DenoiserError> {
        let bad = |m: &str| Err(DenoiserError::Config(m.into()));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if !self.d_model.is_multiple_of(2) {
            return bad("d_model must be even for the sinusoidal step embedding");
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive");
        }
        if self.max_cmd_len == 0 || self.max_cmd_len > MAX_COMMANDS {
            return bad("max_cmd_len must be in 1..=60");
        }
        if self.max_param_len == 0 || self.max_param_len > MAX_PARAMS {
            return bad("max_param_len must be in 1..=280");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive");
        }
        Ok(())
    }
}

/// `M[i, j] = 0` iff positions `i` and `j` belong to the same command
/// instance, `-inf` otherwise. Padding positions attend only to themselves.
pub fn build_local_mask(owners: &[usize]) -> Mask {
    let n = owners.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let same = owners[i] == owners[j] && owners[i] != PAD_OWNER;
        if same || i == j {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

/// Drops padding keys; a padding query still sees itself.
pub fn key_padding_mask(pad: &[bool]) -> Mask {
    let n = pad.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if pad[j] && i != j {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    })
}

/// Inverted dropout on a residual branch. Returns the kept-unit scale mask.
pub(crate) fn dropout<R: Rng + ?Sized>(
    x: &mut Array2<f64>,
    p: f64,
    rng: Option<&mut R>,
) -> Option<Array2<f64>> {
    let rng = rng?;
    if p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    });
    *x *= &mask;
    Some(mask)
}

pub(crate) fn dropout_backward(dy: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *dy *= m;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_mask_is_block_diagonal() {
        let m = build_local_mask(&[0, 0, 0, 1, 1, 2, 2]);
        let blocks = [0..3, 3..5, 5..7];
        for (bi, a) in blocks.iter().enumerate() {
            for (bj, b) in blocks.iter().enumerate() {
                for i in a.clone() {
                    for j in b.clone() {
                        let expect = if bi == bj { 0.0 } else { f64::NEG_INFINITY };
                        assert_eq!(m[[i, j]], expect);
                    }
                }
            }
        }
        assert!(build_local_mask(&[4, 4, 4]).iter().all(|&v| v == 0.0));
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(m[[i, j]], m[[j, i]]);
            }
        }
    }

    #[test]
    fn padding_attends_only_to_itself() {
        let m = build_local_mask(&[0, 0, PAD_OWNER, PAD_OWNER]);
        assert_eq!(m[[2, 2]], 0.0);
        assert_eq!(m[[2, 3]], f64::NEG_INFINITY);
        assert_eq!(m[[0, 2]], f64::NEG_INFINITY);
        let k = key_padding_mask(&[false, true]);
        assert_eq!(k[[0, 1]], f64::NEG_INFINITY);
        assert_eq!(k[[1, 1]], 0.0);
        assert_eq!(k[[1, 0]], 0.0);
    }

    #[test]
    fn config_checks() {
        assert!(DenoiserConfig::default().check().is_ok());
        assert!(DenoiserConfig::miniature().check().is_ok());
        let bad = DenoiserConfig {
            n_heads: 3,
            ..DenoiserConfig::default()
        };
        assert!(bad.check().is_err());
        assert_eq!(DenoiserConfig::default().head_dim(), 32);
    }
}
