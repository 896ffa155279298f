use thiserror::Error;

use crate::types::{RequestId, RequestStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("placement has {rows}x{layers} entries but batch has {batch} requests over {expected_layers} layers")]
    DimensionMismatch {
        rows: usize,
        layers: usize,
        batch: usize,
        expected_layers: usize,
    },
    #[error("placement row {row} has {got} layers, expected {expected}")]
    RaggedPlacement {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("placement entry ({row}, {layer}) is {value}, expected 0 or 1")]
    NonBinaryEntry { row: usize, layer: usize, value: u8 },
    #[error("bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid SLO configuration: {0}")]
    InvalidSlo(String),
    #[error("request {id}: illegal status transition {from:?} -> {to:?}")]
    IllegalTransition {
        id: RequestId,
        from: RequestStatus,
        to: RequestStatus,
    },
    #[error("planner called with an empty batch")]
    EmptyBatch,
    #[error("profile file: {0}")]
    ProfileParse(String),
}
