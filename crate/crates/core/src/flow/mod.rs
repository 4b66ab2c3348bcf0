//! Motion front-end: apex spotting, TV-L1 flow between onset and apex, and
//! conditioning of the flow into network inputs.

mod apex;
mod cache;
mod frame;
mod resize;
mod tvl1;

pub use apex::{onset_differences, spot_apex};
pub use cache::{decode_flow, encode_flow, read_flow, write_flow, FLOW_MAGIC};
pub use frame::{FlowField, GrayFrame, LUMA_WEIGHTS};
pub use resize::{normalize_flow, resize_bilinear, standardize, Resample, NET_INPUT_SIZE, VARIANCE_FLOOR};
pub use tvl1::{flow_energy, tvl1_flow, tvl1_flow_traced, LevelTrace, TvL1Params, MIN_FLOW_SIZE};

use crate::autodiff::Tensor;
use crate::error::Result;

/// Onset/apex frames to standardized `[1, 1, 28, 28]` network inputs.
pub fn flow_to_inputs(field: &FlowField) -> Result<(Tensor<f32>, Tensor<f32>)> {
    normalize_flow(&resize_bilinear(field, NET_INPUT_SIZE, NET_INPUT_SIZE)?)
}
