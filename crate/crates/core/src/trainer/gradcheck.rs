use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{backbone_item_loss, branch_item_loss, MaskFlags, TrainItem};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;

/// Analytic against central-difference gradient at one coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
    pub rel_err: f64,
}

/// Gradient magnitudes below this count as zero; central differences in
/// double precision resolve nothing finer.
pub const GRAD_FLOOR: f64 = 1e-8;

/// Check the branch masked-loss gradient in double precision at each
/// `(parameter name, flat index)` with step `h`.
pub fn gradient_check(
    model: &Model,
    item: &TrainItem<f32>,
    flags: MaskFlags,
    coords: &[(String, usize)],
    h: f64,
) -> Result<Vec<GradCheck>> {
    let b = model.branch()?;
    let backbone: ParamStore<f64> = model.backbone.cast();
    let mut store: ParamStore<f64> = b.store.cast();
    let item = item.cast::<f64>();
    let loss = |s: &ParamStore<f64>| -> Result<f64> {
        branch_item_loss(&model.unet, &backbone, &b.net, s, &model.schedule, &item, flags, None)?
            .ok_or_else(|| Error::Training("empty mask".into()))
    };
    let mut grads = store.zeros_like();
    branch_item_loss(&model.unet, &backbone, &b.net, &store, &model.schedule, &item, flags, Some(&mut grads))?
        .ok_or_else(|| Error::Training("empty mask".into()))?;
    central_differences(&mut store, &grads, coords, h, loss)
}

/// Check the unmasked backbone loss gradient in double precision.
pub fn backbone_gradient_check(
    model: &Model,
    item: &TrainItem<f32>,
    coords: &[(String, usize)],
    h: f64,
) -> Result<Vec<GradCheck>> {
    let mut store: ParamStore<f64> = model.backbone.cast();
    let item = item.cast::<f64>();
    let mut grads = store.zeros_like();
    backbone_item_loss(&model.unet, &store, &model.schedule, &item, Some(&mut grads))?;
    central_differences(&mut store, &grads, coords, h, |s| backbone_item_loss(&model.unet, s, &model.schedule, &item, None))
}

fn central_differences(
    store: &mut ParamStore<f64>,
    grads: &[crate::tensor::Tensor<f64>],
    coords: &[(String, usize)],
    h: f64,
    loss: impl Fn(&ParamStore<f64>) -> Result<f64>,
) -> Result<Vec<GradCheck>> {
    let mut out = Vec::with_capacity(coords.len());
    for (name, index) in coords {
        let id = store.id(name).ok_or_else(|| Error::validation("coordinate", format!("unknown parameter {name}")))?;
        if *index >= store.get(id).len() {
            return Err(Error::validation("coordinate", format!("{name}[{index}] out of range")));
        }
        let x = store.get(id).data()[*index];
        store.get_mut(id).data_mut()[*index] = x + h;
        let up = loss(store)?;
        store.get_mut(id).data_mut()[*index] = x - h;
        let dn = loss(store)?;
        store.get_mut(id).data_mut()[*index] = x;
        let numeric = (up - dn) / (2.0 * h);
        let analytic = grads[id.index()].data()[*index];
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        out.push(GradCheck { name: name.clone(), index: *index, analytic, numeric, rel_err });
    }
    Ok(out)
}

/// `n` coordinates drawn uniformly from the parameters whose names start
/// with one of `prefixes`.
pub fn random_coords(store: &ParamStore<f32>, prefixes: &[&str], n: usize, seed: u64) -> Vec<(String, usize)> {
    let pool: Vec<(&str, usize)> =
        store.iter().filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p))).map(|(n, t)| (n, t.len())).collect();
    assert!(!pool.is_empty(), "no parameters match {prefixes:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (name, len) = pool[rng.random_range(0..pool.len())];
            (name.to_string(), rng.random_range(0..len))
        })
        .collect()
}
