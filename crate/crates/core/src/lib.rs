//! Channel-masked sparse backpropagation for small CNNs, with the memory cost
//! model, channel-selection strategies and gradient statistics built on it.

pub mod analysis;
pub mod conv;
pub mod cost;
pub mod error;
pub mod layers;
pub mod mask;
pub mod metrics;
pub mod network;
pub mod selection;
pub mod stable;
pub mod tensor;

pub use error::{Error, Result};
pub use mask::{ChannelId, SelectionMask};
pub use tensor::{ConvGeometry, Tensor4};
