//! Noise schedule, backbone UNet, and samplers.

pub mod codec;
pub mod sampler;
pub mod schedule;
pub mod unet;

pub use codec::{LatentCodec, PixelCodec};
pub use schedule::NoiseSchedule;
pub use unet::{UNet, UNetConfig, NUM_TAPS};
