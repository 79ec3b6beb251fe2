//! Versioned checkpoint container.
//!
//! Layout, little-endian:
//!
//! ```text
//! "VCKP" | version u32 | header_len u64 | header (JSON)
//! section_count u32, then per section:
//!   name (u16 length + UTF-8) | tensor_count u32, then per tensor:
//!     name (u16 length + UTF-8) | rank u8 | dims u64 × rank | f32 data
//! ```
//!
//! Sections are `backbone`, `style_encoder`, `text_encoder`, and optionally
//! `branch`, `adam.m`, `adam.v`. The header records the configuration and a
//! checksum per component, which loading verifies.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::{Adam, AdamHyper};
use crate::control::{BranchConditioning, ControlBranch};
use crate::diffusion::{NoiseSchedule, UNet, UNetConfig};
use crate::encoders::{Reduction, StyleEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::model::{Branch, Model};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

/// Enough to regenerate every random draw of a run from its current step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checksums {
    pub backbone: String,
    pub branch: Option<String>,
    pub reduction: Option<String>,
    pub style_encoder: String,
    pub text_encoder: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub unet: UNetConfig,
    pub schedule: ScheduleParams,
    pub conditioning: Option<BranchConditioning>,
    pub vocab: Vec<String>,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub rng: Option<RngState>,
    pub optimizer: Option<OptimizerState>,
    pub checksums: Checksums,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub backbone: ParamStore<f32>,
    pub branch: Option<ParamStore<f32>>,
    pub style_encoder: ParamStore<f32>,
    pub text_encoder: ParamStore<f32>,
    /// First and second moments, aligned with the trained store.
    pub adam: Option<(ParamStore<f32>, ParamStore<f32>)>,
}

/// Training progress stored alongside the weights.
#[derive(Debug, Clone)]
pub struct Progress<'a> {
    pub config: &'a TrainConfig,
    pub step: u64,
    pub adam: &'a Adam,
    pub trained: &'a ParamStore<f32>,
}

fn moments(names: &ParamStore<f32>, values: &[Tensor<f32>]) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    for ((n, _), v) in names.iter().zip(values) {
        s.add(n, v.clone());
    }
    s
}

impl Checkpoint {
    pub fn from_model(model: &Model, progress: Option<Progress<'_>>) -> Self {
        let branch = model.branch.as_ref();
        let checksums = Checksums {
            backbone: model.backbone.checksum(),
            branch: branch.map(|b| b.store.checksum()),
            reduction: branch.map(|b| b.store.checksum_prefix(Reduction::NAME)),
            style_encoder: model.style.checksum(),
            text_encoder: model.text.checksum(),
        };
        let header = Header {
            version: CHECKPOINT_VERSION,
            unet: model.unet.cfg.clone(),
            schedule: ScheduleParams {
                steps: model.schedule.steps(),
                beta_start: model.schedule.beta_start,
                beta_end: model.schedule.beta_end,
            },
            conditioning: branch.map(|b| b.net.conditioning),
            vocab: model.text.vocab.clone(),
            train: progress.as_ref().map(|p| p.config.clone()),
            step: progress.as_ref().map_or(0, |p| p.step),
            rng: progress.as_ref().map(|p| RngState { seed: p.config.seed, step: p.step }),
            optimizer: progress.as_ref().map(|p| OptimizerState { hyper: p.adam.hyper, step: p.adam.step }),
            checksums,
        };
        Self {
            header,
            backbone: model.backbone.clone(),
            branch: branch.map(|b| b.store.clone()),
            style_encoder: model.style.store.clone(),
            text_encoder: model.text.store.clone(),
            adam: progress.map(|p| (moments(p.trained, &p.adam.m), moments(p.trained, &p.adam.v))),
        }
    }

    /// Rebuild the model, verifying every component against its checksum.
    pub fn model(&self) -> Result<Model> {
        let h = &self.header;
        let bad = |what: &str| Error::validation("checkpoint", format!("{what} checksum mismatch"));
        h.unet.validate()?;
        let (unet, mut backbone) = UNet::structure(&h.unet);
        backbone.load_from(&self.backbone).map_err(|e| Error::validation("checkpoint backbone", e))?;
        if backbone.checksum() != h.checksums.backbone {
            return Err(bad("backbone"));
        }
        let style = StyleEncoder::from_store(&self.style_encoder)?;
        if style.checksum() != h.checksums.style_encoder {
            return Err(bad("style encoder"));
        }
        let text = TextEncoder { vocab: h.vocab.clone(), store: self.text_encoder.clone() };
        if text.checksum() != h.checksums.text_encoder {
            return Err(bad("text encoder"));
        }
        let branch = match (&self.branch, h.conditioning) {
            (Some(stored), Some(cond)) => {
                let (net, mut store) = ControlBranch::structure(&h.unet, cond);
                store.load_from(stored).map_err(|e| Error::validation("checkpoint branch", e))?;
                if Some(store.checksum()) != h.checksums.branch {
                    return Err(bad("branch"));
                }
                Some(Branch { net, store })
            }
            (None, None) => None,
            _ => return Err(Error::validation("checkpoint", "branch weights and conditioning disagree")),
        };
        let schedule = NoiseSchedule::linear(h.schedule.steps, h.schedule.beta_start, h.schedule.beta_end)?;
        Ok(Model { unet, backbone, style, text, schedule, branch })
    }

    /// Optimizer state for resuming, if the checkpoint carries one.
    pub fn optimizer(&self) -> Option<Adam> {
        let (m, v) = self.adam.as_ref()?;
        let o = self.header.optimizer.as_ref()?;
        Some(Adam {
            hyper: o.hyper,
            step: o.step,
            m: m.iter().map(|(_, t)| t.clone()).collect(),
            v: v.iter().map(|(_, t)| t.clone()).collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut sections: Vec<(&str, &ParamStore<f32>)> = vec![
            ("backbone", &self.backbone),
            ("style_encoder", &self.style_encoder),
            ("text_encoder", &self.text_encoder),
        ];
        if let Some(b) = &self.branch {
            sections.push(("branch", b));
        }
        if let Some((m, v)) = &self.adam {
            sections.push(("adam.m", m));
            sections.push(("adam.v", v));
        }
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, store) in sections {
            put_str(&mut out, name);
            out.extend_from_slice(&(store.len() as u32).to_le_bytes());
            for (n, t) in store.iter() {
                put_str(&mut out, n);
                out.push(t.shape().len() as u8);
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(path, e.to_string()))?;
        let mut sections = std::collections::BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let count = r.u32()?;
            let mut store = ParamStore::new();
            for _ in 0..count {
                let n = r.string()?;
                let rank = r.take(1)?[0] as usize;
                let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let len: usize = shape.iter().product();
                let data = r.take(len * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                if store.id(&n).is_some() {
                    return Err(Error::format(path, format!("duplicate tensor {n}")));
                }
                store.add(n, Tensor::new(&shape, data));
            }
            sections.insert(name, store);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        let mut take = |name: &str| sections.remove(name);
        let need = |s: Option<ParamStore<f32>>, name: &str| s.ok_or_else(|| Error::format(path, format!("missing section {name}")));
        let backbone = need(take("backbone"), "backbone")?;
        let style_encoder = need(take("style_encoder"), "style_encoder")?;
        let text_encoder = need(take("text_encoder"), "text_encoder")?;
        let branch = take("branch");
        let adam = match (take("adam.m"), take("adam.v")) {
            (Some(m), Some(v)) => Some((m, v)),
            (None, None) => None,
            _ => return Err(Error::format(path, "incomplete optimizer state")),
        };
        Ok(Self { header, backbone, branch, style_encoder, text_encoder, adam })
    }

    /// Write atomically through a temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "name is not UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        let cfg = UNetConfig { image_size: 16, widths: [8, 8, 16, 16], time_freq_dim: 8, time_dim: 16, ..Default::default() };
        let mut m = Model::new(&cfg, 3);
        m.attach_branch(4, BranchConditioning::Global).unwrap();
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = tiny();
        let cfg = TrainConfig { seed: 9, ..Default::default() };
        let store = &m.branch.as_ref().unwrap().store;
        let mut adam = Adam::new(AdamHyper::with_lr(1e-3), store);
        adam.m[0].data_mut()[0] = 0.25;
        adam.step = 3;
        let ck = Checkpoint::from_model(&m, Some(Progress { config: &cfg, step: 3, adam: &adam, trained: store }));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), std::fs::read(&p).unwrap());
        assert_eq!(back.optimizer().unwrap(), adam);
        let model = back.model().unwrap();
        assert_eq!(model.backbone, m.backbone);
        assert_eq!(model.branch.unwrap().store, m.branch.unwrap().store);
        assert_eq!(back.header.rng, Some(RngState { seed: 9, step: 3 }));
    }

    #[test]
    fn corruption_is_detected() {
        let m = tiny();
        let ck = Checkpoint::from_model(&m, None);
        let bytes = ck.to_bytes();
        let p = Path::new("x.bin");
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p), Err(Error::Format { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"nope", p), Err(Error::Format { .. })));
        let mut tampered = ck.clone();
        tampered.backbone.get_mut(tampered.backbone.ids().next().unwrap()).data_mut()[0] += 1.0;
        assert!(tampered.model().is_err());
    }
}
