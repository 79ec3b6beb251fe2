use crate::tensor::Tensor;

/// Maps images to the space the diffusion process runs in and back.
pub trait LatentCodec {
    fn encode(&self, image: &Tensor<f32>) -> Tensor<f32>;
    fn decode(&self, latent: &Tensor<f32>) -> Tensor<f32>;
}

/// Pixel-space codec: no spatial compression, values rescaled from `[0, 1]`
/// to `[-1, 1]`. Decoding clamps back into `[0, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelCodec;

impl LatentCodec for PixelCodec {
    fn encode(&self, image: &Tensor<f32>) -> Tensor<f32> {
        image.map(|v| 2.0 * v - 1.0)
    }

    fn decode(&self, latent: &Tensor<f32>) -> Tensor<f32> {
        latent.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
    }
}
