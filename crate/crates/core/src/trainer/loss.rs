//! Denoising losses and their gradients with respect to ε̂.

use crate::control::resize_mask;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

fn check_pair<T: Float>(eps: &Tensor<T>, eps_hat: &Tensor<T>) -> Result<()> {
    if eps.shape() != eps_hat.shape() {
        return Err(Error::shape("eps_hat", eps.shape(), eps_hat.shape()));
    }
    if eps.shape().len() != 3 || eps.dim(1) != eps.dim(2) {
        return Err(Error::shape("eps", &[0, 0, 0], eps.shape()));
    }
    Ok(())
}

/// Unmasked mean squared error over every element.
pub fn loss_backbone<T: Float>(eps: &Tensor<T>, eps_hat: &Tensor<T>) -> Result<T> {
    check_pair(eps, eps_hat)?;
    let s: f64 = eps.data().iter().zip(eps_hat.data()).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum();
    Ok(T::of(s / eps.len() as f64))
}

/// One item's masked loss and its gradient with respect to ε̂.
#[derive(Debug, Clone)]
pub struct ItemLoss<T> {
    pub loss: T,
    pub grad: Tensor<T>,
}

/// `Σ m·(ε−ε̂)² / (N_on·C)` with the mask resized nearest-neighbor to ε's
/// resolution. `None` when no position is on.
pub fn masked_item_loss<T: Float>(eps: &Tensor<T>, eps_hat: &Tensor<T>, mask: &[u8]) -> Result<Option<ItemLoss<T>>> {
    check_pair(eps, eps_hat)?;
    let size = (mask.len() as f64).sqrt() as usize;
    if size * size != mask.len() || size == 0 {
        return Err(Error::validation("mask", "must be square"));
    }
    let (c, r) = (eps.dim(0), eps.dim(1));
    let m: Vec<T> = resize_mask(mask, size, r);
    let on = m.iter().filter(|&&v| v != T::zero()).count();
    if on == 0 {
        return Ok(None);
    }
    let denom = (on * c) as f64;
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(eps.shape());
    let k = T::of(-2.0 / denom);
    for ((g, (e, h)), mm) in grad
        .data_mut()
        .iter_mut()
        .zip(eps.data().iter().zip(eps_hat.data()))
        .zip(m.iter().cycle())
    {
        let d = *e - *h;
        sum += mm.as_f64() * d.as_f64().powi(2);
        *g = k * *mm * d;
    }
    Ok(Some(ItemLoss { loss: T::of(sum / denom), grad }))
}

/// Mean of the item losses over items whose mask is non-empty. Empty-mask
/// items are skipped with a warning; a batch with none left is an error.
pub fn masked_loss<T: Float>(eps: &[Tensor<T>], eps_hat: &[Tensor<T>], masks: &[&[u8]]) -> Result<T> {
    if eps.len() != eps_hat.len() || eps.len() != masks.len() {
        return Err(Error::validation("batch", "eps, eps_hat and masks differ in length"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, ((e, h), m)) in eps.iter().zip(eps_hat).zip(masks).enumerate() {
        match masked_item_loss(e, h, m)? {
            Some(l) => {
                sum += l.loss.as_f64();
                n += 1;
            }
            None => log::warn!("batch item {i} has an empty mask and is skipped"),
        }
    }
    if n == 0 {
        return Err(Error::Training("every item in the batch has an empty mask".into()));
    }
    Ok(T::of(sum / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(c: usize, r: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[c, r, r], v.to_vec())
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let eps = t(3, 4, &(0..48).map(|i| (i as f64).sin()).collect::<Vec<_>>());
        assert_eq!(loss_backbone(&eps, &eps).unwrap(), 0.0);
    }

    #[test]
    fn backbone_loss_matches_elementwise_sum() {
        let eps = t(1, 2, &[1.0, -2.0, 0.5, 3.0]);
        let hat = t(1, 2, &[0.0, 1.0, 0.5, 1.0]);
        // (1 + 9 + 0 + 4) / 4
        assert_eq!(loss_backbone(&eps, &hat).unwrap(), 3.5);
    }

    #[test]
    fn zero_prediction_loss_is_mean_square_noise() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut total = 0.0;
        for _ in 0..1024 {
            let v: Vec<f64> = (0..3 * 16).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eps = t(3, 4, &v);
            let direct = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
            let l = loss_backbone(&eps, &Tensor::zeros(eps.shape())).unwrap();
            assert!((l - direct).abs() < 1e-12);
            total += l;
        }
        assert!((total / 1024.0 - 1.0).abs() <= 0.05);
    }

    #[test]
    fn two_by_two_single_position() {
        let eps = t(1, 2, &[1.0, 2.0, 3.0, 4.0]);
        let hat = t(1, 2, &[0.5, 0.0, 0.0, 0.0]);
        let l = masked_item_loss(&eps, &hat, &[1, 0, 0, 0]).unwrap().unwrap();
        assert_eq!(l.loss, 0.25);
        assert_eq!(l.grad.data(), &[-1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_item_is_excluded() {
        let eps = vec![t(1, 2, &[1.0; 4]), t(1, 2, &[2.0; 4])];
        let hat = vec![t(1, 2, &[0.0; 4]), t(1, 2, &[0.0; 4])];
        let l = masked_loss(&eps, &hat, &[&[0, 0, 0, 0], &[1, 1, 1, 1]]).unwrap();
        assert_eq!(l, 4.0);
        assert!(matches!(masked_loss(&eps[..1], &hat[..1], &[&[0; 4]]), Err(Error::Training(_))));
    }

    #[test]
    fn mask_is_resized_to_output() {
        let eps = t(1, 2, &[1.0, 1.0, 1.0, 1.0]);
        let hat = t(1, 2, &[0.0, 0.0, 0.0, 3.0]);
        let mut mask = vec![0u8; 16];
        mask[15] = 1;
        let l = masked_item_loss(&eps, &hat, &mask).unwrap().unwrap();
        assert_eq!(l.loss, 4.0);
    }

    #[test]
    fn background_changes_the_loss() {
        let eps = t(1, 2, &[1.0, 0.0, 0.0, 0.0]);
        let hat = t(1, 2, &[0.0; 4]);
        let masked = masked_item_loss(&eps, &hat, &[0, 1, 1, 1]).unwrap().unwrap().loss;
        let full = loss_backbone(&eps, &hat).unwrap();
        assert_ne!(masked, full);
    }

    proptest! {
        #[test]
        fn full_mask_reduces_to_unmasked(v in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 16)) {
            let eps = Tensor::new(&[3, 4, 4], v[..48].to_vec());
            let hat = Tensor::new(&[3, 4, 4], v[48..].to_vec());
            let a = masked_item_loss(&eps, &hat, &[1; 16]).unwrap().unwrap().loss;
            let b = loss_backbone(&eps, &hat).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }

        #[test]
        fn gradient_matches_central_difference(v in prop::collection::vec(-2.0f64..2.0, 2 * 2 * 9), bits in prop::collection::vec(0u8..2, 9), k in 0usize..18) {
            prop_assume!(bits.contains(&1));
            let eps = Tensor::new(&[2, 3, 3], v[..18].to_vec());
            let mut hat = Tensor::new(&[2, 3, 3], v[18..].to_vec());
            let g = masked_item_loss(&eps, &hat, &bits).unwrap().unwrap().grad.data()[k];
            let h = 1e-6;
            hat.data_mut()[k] += h;
            let up = masked_item_loss(&eps, &hat, &bits).unwrap().unwrap().loss;
            hat.data_mut()[k] -= 2.0 * h;
            let dn = masked_item_loss(&eps, &hat, &bits).unwrap().unwrap().loss;
            prop_assert!((g - (up - dn) / (2.0 * h)).abs() < 1e-6);
        }
    }
}
