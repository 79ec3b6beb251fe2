#![allow(dead_code)]

use std::path::PathBuf;

use visconet::control::BranchConditioning;
use visconet::diffusion::UNetConfig;
use visconet::model::Model;
use visconet::scenegen::{build_dataset, DatasetConfig};
use visconet::trainer::Checkpoint;

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
}

/// A small random model with live zero convolutions and a 12-sample dataset.
pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("data");
    build_dataset(12, &DatasetConfig::default(), 9, &dataset).unwrap();
    let cfg = UNetConfig { widths: [8, 8, 16, 16], time_freq_dim: 8, time_dim: 16, ..Default::default() };
    let mut model = Model::new(&cfg, 1);
    model.attach_branch(2, BranchConditioning::Local).unwrap();
    let b = model.branch.as_mut().unwrap();
    for id in b.net.zero_conv_ids() {
        for (i, v) in b.store.get_mut(id).data_mut().iter_mut().enumerate() {
            *v = ((i * 7919) % 101) as f32 / 1000.0 - 0.05;
        }
    }
    let checkpoint = dir.path().join("ck.bin");
    Checkpoint::from_model(&model, None).save(&checkpoint).unwrap();
    Fixture { dir, checkpoint, dataset }
}
