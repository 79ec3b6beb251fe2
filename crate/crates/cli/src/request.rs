//! The generation request shared by `sample` and `/v1/generate`.

use std::collections::BTreeMap;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use visconet::control::{default_presets, ControlScales, SCALE_MAX};
use visconet::diffusion::NUM_TAPS;
use visconet::image::Image;
use visconet::model::{Model, SampleRequest};
use visconet::scenegen::{Category, Dataset, StyleImageSet, IMAGE_SIZE, STYLE_SIZE};

/// A preset name or 13 explicit strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalesSpec {
    Preset(String),
    Values(Vec<f32>),
}

impl Default for ScalesSpec {
    fn default() -> Self {
        ScalesSpec::Preset("faithful".into())
    }
}

/// A dataset sample id or an inline base64 PNG; exactly one is set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub png: Option<String>,
}

/// Style images from a sample, blank when absent, with per-category
/// overrides. An empty override string unsets that category.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleRefs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub images: BTreeMap<String, String>,
}

/// Control is off when `pose` is absent. The mask defaults to the pose
/// sample's mask and the style images to blank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default)]
    pub negative_prompt: String,
    #[serde(default = "one")]
    pub guidance: f32,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_refs: Option<StyleRefs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<ImageRef>,
    #[serde(default)]
    pub scales: ScalesSpec,
}

fn one() -> f32 {
    1.0
}

fn default_steps() -> usize {
    25
}

impl GenerateRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            negative_prompt: String::new(),
            guidance: 1.0,
            steps: default_steps(),
            seed: 0,
            pose: None,
            style_refs: None,
            mask: None,
            scales: ScalesSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RequestError {
    #[error("invalid request: {}", fields.iter().map(|f| format!("{}: {}", f.field, f.message)).collect::<Vec<_>>().join("; "))]
    Invalid { fields: Vec<FieldError> },
    #[error("out-of-vocabulary words: {}", .0.join(", "))]
    OutOfVocabulary(Vec<String>),
    #[error(transparent)]
    Runtime(visconet::Error),
}

impl RequestError {
    fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        RequestError::Invalid { fields: vec![FieldError { field: field.into(), message: message.into() }] }
    }
}

impl From<visconet::Error> for RequestError {
    fn from(e: visconet::Error) -> Self {
        match e {
            visconet::Error::OutOfVocabulary(w) => RequestError::OutOfVocabulary(w),
            visconet::Error::Validation { field, reason } => RequestError::field(field, reason),
            visconet::Error::Shape { what, expected, got } => {
                RequestError::field(what, format!("expected shape {expected:?}, got {got:?}"))
            }
            other => RequestError::Runtime(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub queue_ms: f64,
    pub generate_ms: f64,
}

/// Everything needed to reproduce an image with the same checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// The request with inline images kept and the scales resolved.
    pub request: GenerateRequest,
    pub scales: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub controlled: bool,
    pub seed: u64,
    pub timings: Timings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub id: String,
    /// Base64 PNG.
    pub image: String,
    pub metadata: Metadata,
}

pub fn encode_png(img: &Image) -> String {
    B64.encode(img.to_png())
}

fn decode_png(field: &str, data: &str, side: usize) -> Result<Image, RequestError> {
    let bytes = B64.decode(data.trim()).map_err(|e| RequestError::field(field, format!("not base64: {e}")))?;
    let img = Image::from_png(&bytes).map_err(|e| RequestError::field(field, e.to_string()))?;
    if img.width != side || img.height != side {
        return Err(RequestError::field(field, format!("must be {side}x{side}, got {}x{}", img.width, img.height)));
    }
    Ok(img)
}

/// Mask pixels are on wherever any channel is nonzero.
pub fn mask_from_image(img: &Image) -> Vec<u8> {
    img.data.chunks(3).map(|p| u8::from(p.iter().any(|&v| v > 0.0))).collect()
}

pub fn mask_to_image(mask: &[u8], side: usize) -> Image {
    let data = mask.iter().flat_map(|&m| [m as f32; 3]).collect();
    Image::from_data(side, side, data).expect("mask dimensions")
}

fn sample_from(dataset: Option<&Dataset>, field: &str, id: usize) -> Result<visconet::scenegen::Sample, RequestError> {
    let ds = dataset.ok_or_else(|| RequestError::field(field, "no dataset is configured for sample ids"))?;
    if id >= ds.len() {
        return Err(RequestError::field(field, format!("sample {id} does not exist (dataset has {})", ds.len())));
    }
    Ok(ds.get(id)?)
}

fn check_ref(field: &str, r: &ImageRef) -> Result<(), RequestError> {
    match (&r.sample, &r.png) {
        (Some(_), None) | (None, Some(_)) => Ok(()),
        _ => Err(RequestError::field(field, "set exactly one of sample or png")),
    }
}

/// Resolve the named preset or the explicit values.
pub fn resolve_scales(spec: &ScalesSpec) -> Result<(ControlScales, Option<String>), RequestError> {
    match spec {
        ScalesSpec::Preset(name) => default_presets()
            .remove(name)
            .map(|s| (s, Some(name.clone())))
            .ok_or_else(|| {
                let known: Vec<String> = default_presets().into_keys().collect();
                RequestError::field("scales", format!("unknown preset {name}; known: {}", known.join(", ")))
            }),
        ScalesSpec::Values(v) => {
            if v.len() != NUM_TAPS {
                return Err(RequestError::field("scales", format!("expected {NUM_TAPS} values, got {}", v.len())));
            }
            let mut fields = Vec::new();
            for (i, &x) in v.iter().enumerate() {
                if !(x.is_finite() && (0.0..=SCALE_MAX).contains(&x)) {
                    fields.push(FieldError { field: format!("scales[{i}]"), message: format!("{x} outside [0, {SCALE_MAX}]") });
                }
            }
            if !fields.is_empty() {
                return Err(RequestError::Invalid { fields });
            }
            Ok((ControlScales::new(v.clone().try_into().expect("length checked"))?, None))
        }
    }
}

/// A request checked and turned into sampler input.
pub struct Resolved {
    pub sample: SampleRequest,
    pub scales: ControlScales,
    pub preset: Option<String>,
}

pub fn resolve(req: &GenerateRequest, model: &Model, dataset: Option<&Dataset>) -> Result<Resolved, RequestError> {
    let mut fields = Vec::new();
    if !(req.guidance.is_finite() && req.guidance >= 0.0) {
        fields.push(FieldError { field: "guidance".into(), message: "must be a finite value >= 0".into() });
    }
    if req.steps == 0 || req.steps > model.schedule.steps() {
        fields.push(FieldError { field: "steps".into(), message: format!("must be in 1..={}", model.schedule.steps()) });
    }
    let scales = match resolve_scales(&req.scales) {
        Ok(s) => Some(s),
        Err(RequestError::Invalid { fields: f }) => {
            fields.extend(f);
            None
        }
        Err(e) => return Err(e),
    };
    if !fields.is_empty() {
        return Err(RequestError::Invalid { fields });
    }
    let (scales, preset) = scales.expect("no field errors");
    let mut words = Vec::new();
    for p in [&req.prompt, &req.negative_prompt] {
        if let Err(visconet::Error::OutOfVocabulary(w)) = model.text.ids(p) {
            words.extend(w.into_iter().filter(|x| !words.contains(x)).collect::<Vec<_>>());
        }
    }
    if !words.is_empty() {
        return Err(RequestError::OutOfVocabulary(words));
    }

    let control = match &req.pose {
        None => {
            if req.mask.is_some() || req.style_refs.is_some() {
                return Err(RequestError::field("pose", "required when mask or style_refs is given"));
            }
            None
        }
        Some(pose) => {
            check_ref("pose", pose)?;
            model.branch()?;
            let (pose_map, pose_mask) = match (pose.sample, &pose.png) {
                (Some(id), _) => {
                    let s = sample_from(dataset, "pose.sample", id)?;
                    (s.pose_map, Some(s.human_mask))
                }
                (None, Some(png)) => (decode_png("pose.png", png, IMAGE_SIZE)?, None),
                _ => unreachable!(),
            };
            let mask = match &req.mask {
                Some(m) => {
                    check_ref("mask", m)?;
                    match (m.sample, &m.png) {
                        (Some(id), _) => sample_from(dataset, "mask.sample", id)?.human_mask,
                        (None, Some(png)) => mask_from_image(&decode_png("mask.png", png, IMAGE_SIZE)?),
                        _ => unreachable!(),
                    }
                }
                None => pose_mask.ok_or_else(|| RequestError::field("mask", "required when pose is inline"))?,
            };
            let mut set = StyleImageSet::blank();
            if let Some(refs) = &req.style_refs {
                if let Some(id) = refs.sample {
                    set = sample_from(dataset, "style_refs.sample", id)?.style_set;
                }
                for (name, data) in &refs.images {
                    let field = format!("style_refs.images.{name}");
                    let cat = Category::parse(name).ok_or_else(|| RequestError::field(&field, "unknown category"))?;
                    let img = if data.is_empty() { Image::new(STYLE_SIZE, STYLE_SIZE) } else { decode_png(&field, data, STYLE_SIZE)? };
                    set.set(cat, img)?;
                }
            }
            Some(model.control_context(pose_map, &set, &req.prompt, mask, scales)?)
        }
    };
    let sample = SampleRequest {
        prompt: req.prompt.clone(),
        negative_prompt: req.negative_prompt.clone(),
        guidance: req.guidance,
        steps: req.steps,
        seed: req.seed,
        control,
    };
    Ok(Resolved { sample, scales, preset })
}

/// Resolve and sample, timing the generation.
pub fn generate(
    id: String,
    req: &GenerateRequest,
    model: &Model,
    dataset: Option<&Dataset>,
    queued: Option<Instant>,
) -> Result<GenerateResponse, RequestError> {
    let start = Instant::now();
    let r = resolve(req, model, dataset)?;
    let img = model.sample(&r.sample)?;
    let metadata = Metadata {
        request: GenerateRequest { scales: ScalesSpec::Values(r.scales.values().to_vec()), ..req.clone() },
        scales: r.scales.values().to_vec(),
        preset: r.preset,
        controlled: r.sample.control.is_some(),
        seed: req.seed,
        timings: Timings {
            queue_ms: queued.map_or(0.0, |q| start.duration_since(q).as_secs_f64() * 1e3),
            generate_ms: start.elapsed().as_secs_f64() * 1e3,
        },
    };
    Ok(GenerateResponse { id, image: encode_png(&img), metadata })
}
