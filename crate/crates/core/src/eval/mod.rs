//! Person-region similarity, background leak and style faithfulness
//! metrics, scale sweeps, and the suite runner that assembles them into a
//! report.

mod ssim;
mod style;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{preset, ControlScales, ScaleGroup};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Model, SampleRequest};
use crate::scenegen::{Background, BackgroundKind, Category, Dataset, Rgb, Sample, Split, NAMED_COLORS};
use crate::trainer::Checkpoint;

pub use ssim::{mask_bbox, min_side, ms_ssim, person_crop, person_similarity, resize_bilinear, PERSON_BOX, SCALES, SIGMA, WINDOW};
pub use style::{background_leak, classify_background, spearman, style_faithfulness, StyleFit, MIN_EXPLAINED, MIN_R2};

pub const REPORT_VERSION: u32 = 1;

/// Sampler settings shared by every generation in a suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenSettings {
    pub steps: usize,
    pub guidance: f32,
}

/// Generate with the reference's pose, style images and mask.
pub fn generate_from_reference(
    model: &Model,
    reference: &Sample,
    prompt: &str,
    scales: ControlScales,
    seed: u64,
    gen: GenSettings,
) -> Result<Image> {
    let ctx = model.control_context(
        reference.pose_map.clone(),
        &reference.style_set,
        prompt,
        reference.human_mask.clone(),
        scales,
    )?;
    let req = SampleRequest { guidance: gen.guidance, control: Some(ctx), ..SampleRequest::new(prompt, gen.steps, seed) };
    model.sample(&req)
}

/// Mean squared error over the pixels and channels where `mask` is on.
pub fn foreground_mse(a: &Image, b: &Image, mask: &[u8]) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) || mask.len() != a.width * a.height {
        return Err(Error::shape("foreground", &[a.height, a.width], &[b.height, b.width]));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m != 0) {
        let (p, q) = (a.get(i % a.width, i / a.width), b.get(i % a.width, i / a.width));
        sum += (0..3).map(|c| (p[c] as f64 - q[c] as f64).powi(2)).sum::<f64>();
        n += 3;
    }
    if n == 0 {
        return Err(Error::validation("mask", "no person pixels"));
    }
    Ok(sum / n as f64)
}

/// One seed of an MB sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub seed: u64,
    pub reference: usize,
    pub grid: Vec<f32>,
    pub mse: Vec<f64>,
    /// Rank correlation between the MB scale and `mse`.
    pub spearman: f64,
}

/// For each seed, sweep the MB scales over `grid` with the other groups
/// held at `base`, recording the foreground MSE to the reference.
/// The reference is `references[seed % len]` and the prompt its label.
pub fn interpolation_sweep(
    model: &Model,
    dataset: &Dataset,
    references: &[usize],
    seeds: &[u64],
    grid: &[f32],
    base: ControlScales,
    gen: GenSettings,
) -> Result<Vec<SweepCurve>> {
    if references.is_empty() || grid.is_empty() {
        return Err(Error::validation("sweep", "needs at least one reference and one grid point"));
    }
    let mut curves = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let reference = references[(seed % references.len() as u64) as usize];
        let r = dataset.get(reference)?;
        let mut mse = Vec::with_capacity(grid.len());
        for &mb in grid {
            let mut scales = base;
            scales.set_group(ScaleGroup::Mb, mb)?;
            let img = generate_from_reference(model, &r, &r.text_label, scales, seed, gen)?;
            mse.push(foreground_mse(&img, &r.image, &r.human_mask)?);
        }
        let xs: Vec<f64> = grid.iter().map(|&g| g as f64).collect();
        curves.push(SweepCurve { seed, reference, grid: grid.to_vec(), spearman: spearman(&xs, &mse), mse });
    }
    Ok(curves)
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => s[n / 2],
        _ => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    PersonSimilarity,
    BackgroundLeak,
    StyleFaithfulness,
    StripedSimilarity,
    Interpolation,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::PersonSimilarity,
        Metric::BackgroundLeak,
        Metric::StyleFaithfulness,
        Metric::StripedSimilarity,
        Metric::Interpolation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::PersonSimilarity => "person_similarity",
            Metric::BackgroundLeak => "background_leak",
            Metric::StyleFaithfulness => "style_faithfulness",
            Metric::StripedSimilarity => "striped_person_similarity",
            Metric::Interpolation => "interpolation_spearman",
        }
    }
}

/// A checkpoint evaluated next to the main one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    pub checkpoint: PathBuf,
    #[serde(default = "all_metrics")]
    pub metrics: Vec<Metric>,
}

fn all_metrics() -> Vec<Metric> {
    Metric::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Dataset whose test split supplies the references.
    pub dataset: PathBuf,
    pub steps: usize,
    pub guidance: f32,
    /// Base generation seed; item `i` of a metric uses `seed + i`.
    pub seed: u64,
    /// Preset used for every metric except the sweep's MB group.
    pub preset: String,
    pub references: usize,
    pub leak_references: usize,
    /// References per held-out background rule.
    pub style_references: usize,
    pub striped_references: usize,
    pub sweep_seeds: usize,
    pub mb_grid: Vec<f32>,
    /// Metrics computed for the main checkpoint.
    pub metrics: Vec<Metric>,
    pub arms: Vec<ArmConfig>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            steps: 25,
            guidance: 1.0,
            seed: 0,
            preset: "faithful".into(),
            references: 64,
            leak_references: 16,
            style_references: 8,
            striped_references: 16,
            sweep_seeds: 20,
            mb_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            metrics: all_metrics(),
            arms: Vec::new(),
        }
    }
}

impl SuiteConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::validation("steps", "must be at least 1"));
        }
        if !(self.guidance.is_finite() && self.guidance >= 0.0) {
            return Err(Error::validation("guidance", "must be a finite value ≥ 0"));
        }
        preset(&self.preset)?;
        if self.mb_grid.is_empty() {
            return Err(Error::validation("mb_grid", "must not be empty"));
        }
        for &v in &self.mb_grid {
            ControlScales::uniform(v).map_err(|_| Error::validation("mb_grid", format!("{v} outside [0, 2]")))?;
        }
        let mut names = vec!["default"];
        for arm in &self.arms {
            if names.contains(&arm.name.as_str()) {
                return Err(Error::validation("arms", format!("duplicate arm name {}", arm.name)));
            }
            names.push(&arm.name);
        }
        Ok(())
    }

    fn gen(&self) -> GenSettings {
        GenSettings { steps: self.steps, guidance: self.guidance }
    }
}

/// One table cell: a metric for one arm under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub arm: String,
    pub condition: String,
    pub value: f64,
    pub count: usize,
    /// Generation seeds, in item order.
    pub seeds: Vec<u64>,
    /// Dataset indices of the references, in item order.
    pub references: Vec<usize>,
}

/// Background score (`1 − leak`) and person similarity per arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: String,
    pub background_score: Option<f64>,
    pub person_similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmInfo {
    pub name: String,
    pub checkpoint: PathBuf,
    pub conditioning: String,
    pub branch_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub suite: SuiteConfig,
    pub arms: Vec<ArmInfo>,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
    pub curves: Vec<SweepCurve>,
}

impl EvalReport {
    pub fn row(&self, metric: Metric, arm: &str, condition: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.metric == metric.name() && r.arm == arm && r.condition == condition)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Condition names used in report rows.
pub mod condition {
    pub const FAITHFUL: &str = "faithful preset";
    pub const CONFLICTING: &str = "background color absent from the figure";
    pub const STRIPED: &str = "striped garments";
    pub const SWEEP: &str = "median over seeds";
    pub const HELD_OUT_MEAN: &str = "held-out mean";

    pub fn held_out(kind: crate::scenegen::BackgroundKind) -> String {
        format!("held-out {}", kind.word())
    }
}

/// Named color farthest from every color in `avoid`; ties keep the
/// earlier color.
pub fn farthest_color(avoid: &[Rgb]) -> (&'static str, Rgb) {
    let d = |c: Rgb| {
        avoid
            .iter()
            .map(|a| (0..3).map(|i| (a[i] as f64 - c[i] as f64).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    };
    let mut best = NAMED_COLORS[0];
    for &(n, c) in &NAMED_COLORS[1..] {
        if d(c) > d(best.1) {
            best = (n, c);
        }
    }
    best
}

/// A prompt asking for a `kind` background in two seeded named colors.
pub fn style_prompt(kind: BackgroundKind, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng.random_range(0..NAMED_COLORS.len());
    let b = (a + rng.random_range(1..NAMED_COLORS.len())) % NAMED_COLORS.len();
    let bg = match kind {
        BackgroundKind::Plain => Background::Plain { color: NAMED_COLORS[a].1 },
        BackgroundKind::Stripes => {
            Background::Stripes { color1: NAMED_COLORS[a].1, color2: NAMED_COLORS[b].1, period_px: 8 }
        }
        BackgroundKind::Gradient => Background::Gradient { color1: NAMED_COLORS[a].1, color2: NAMED_COLORS[b].1 },
    };
    format!("a person, {}", bg.describe())
}

fn is_striped(s: &Sample) -> bool {
    s.palette_meta.segment_palette.values().any(|p| p.stripes.is_some())
}

struct Ctx<'a> {
    suite: &'a SuiteConfig,
    dataset: &'a Dataset,
    test: Vec<usize>,
    scales: ControlScales,
}

impl Ctx<'_> {
    fn take(&self, n: usize, keep: impl Fn(&Sample) -> bool) -> Result<Vec<(usize, Sample)>> {
        let mut out = Vec::with_capacity(n);
        for &i in &self.test {
            if out.len() == n {
                break;
            }
            let s = self.dataset.get(i)?;
            if keep(&s) {
                out.push((i, s));
            }
        }
        if out.len() < n {
            return Err(Error::validation("suite", format!("test split has only {} of the {n} references needed", out.len())));
        }
        Ok(out)
    }

    fn row(&self, metric: Metric, arm: &str, condition: impl Into<String>, value: f64, refs: &[(usize, Sample)]) -> ReportRow {
        ReportRow {
            metric: metric.name().into(),
            arm: arm.into(),
            condition: condition.into(),
            value,
            count: refs.len(),
            seeds: (0..refs.len() as u64).map(|i| self.suite.seed + i).collect(),
            references: refs.iter().map(|(i, _)| *i).collect(),
        }
    }

    fn similarity(&self, model: &Model, refs: &[(usize, Sample)]) -> Result<f64> {
        let mut total = 0.0;
        for (k, (_, r)) in refs.iter().enumerate() {
            let img = generate_from_reference(model, r, &r.text_label, self.scales, self.suite.seed + k as u64, self.suite.gen())?;
            total += person_similarity(&img, &r.human_mask, &r.image, &r.human_mask)?;
        }
        Ok(total / refs.len() as f64)
    }

    fn arm(&self, model: &Model, arm: &str, metrics: &[Metric], report: &mut EvalReport) -> Result<()> {
        let s = self.suite;
        for &metric in metrics {
            log::info!("eval {arm}: {}", metric.name());
            match metric {
                Metric::PersonSimilarity => {
                    let refs = self.take(s.references, |_| true)?;
                    let v = self.similarity(model, &refs)?;
                    report.rows.push(self.row(metric, arm, condition::FAITHFUL, v, &refs));
                }
                Metric::StripedSimilarity => {
                    let refs = self.take(s.striped_references, is_striped)?;
                    let v = self.similarity(model, &refs)?;
                    report.rows.push(self.row(metric, arm, condition::STRIPED, v, &refs));
                }
                Metric::BackgroundLeak => {
                    let refs = self.take(s.leak_references, |_| true)?;
                    let mut total = 0.0;
                    for (k, (_, r)) in refs.iter().enumerate() {
                        let fg = r.palette_meta.foreground_colors();
                        let (name, color) = farthest_color(&fg);
                        let prompt = format!("a person, {name} plain");
                        let img = generate_from_reference(model, r, &prompt, self.scales, s.seed + k as u64, s.gen())?;
                        total += background_leak(&img, &r.human_mask, &fg, &[color])?;
                    }
                    report.rows.push(self.row(metric, arm, condition::CONFLICTING, total / refs.len() as f64, &refs));
                }
                Metric::StyleFaithfulness => {
                    let dataset_cfg = &self.dataset.manifest.config;
                    if dataset_cfg.holdout.is_empty() {
                        return Err(Error::validation("suite", "the dataset has no held-out background rules"));
                    }
                    let (mut sum, mut all_refs) = (0.0, Vec::new());
                    for rule in &dataset_cfg.holdout {
                        let refs = self.take(s.style_references, |x| {
                            x.palette_meta.segment_palette.get(&Category::Top).is_some_and(|p| rule.applies_to(p.color))
                        })?;
                        let mut images = Vec::with_capacity(refs.len());
                        for (k, (_, r)) in refs.iter().enumerate() {
                            let seed = s.seed + k as u64;
                            let prompt = style_prompt(rule.background, seed);
                            images.push(generate_from_reference(model, r, &prompt, self.scales, seed, s.gen())?);
                        }
                        let masks: Vec<&[u8]> = refs.iter().map(|(_, r)| r.human_mask.as_slice()).collect();
                        let v = style_faithfulness(&images, &masks, rule.background)?;
                        sum += v;
                        report.rows.push(self.row(metric, arm, condition::held_out(rule.background), v, &refs));
                        all_refs.extend(refs);
                    }
                    let mut mean = self.row(metric, arm, condition::HELD_OUT_MEAN, sum / dataset_cfg.holdout.len() as f64, &all_refs);
                    mean.seeds = report.rows.iter().rev().take(dataset_cfg.holdout.len()).rev().flat_map(|r| r.seeds.clone()).collect();
                    report.rows.push(mean);
                }
                Metric::Interpolation => {
                    let refs = self.test.clone();
                    let seeds: Vec<u64> = (0..s.sweep_seeds as u64).map(|i| s.seed + i).collect();
                    let curves = interpolation_sweep(model, self.dataset, &refs, &seeds, &s.mb_grid, self.scales, s.gen())?;
                    let rhos: Vec<f64> = curves.iter().map(|c| c.spearman).collect();
                    report.rows.push(ReportRow {
                        metric: metric.name().into(),
                        arm: arm.into(),
                        condition: condition::SWEEP.into(),
                        value: median(&rhos),
                        count: curves.len(),
                        seeds,
                        references: curves.iter().map(|c| c.reference).collect(),
                    });
                    report.curves.extend(curves);
                }
            }
        }
        Ok(())
    }
}

fn load_branch_model(path: &Path) -> Result<Model> {
    let model = Checkpoint::load(path)?.model()?;
    model.branch()?;
    Ok(model)
}

fn arm_info(name: &str, path: &Path, model: &Model) -> Result<ArmInfo> {
    let b = model.branch()?;
    Ok(ArmInfo {
        name: name.into(),
        checkpoint: path.to_path_buf(),
        conditioning: format!("{:?}", b.net.conditioning).to_lowercase(),
        branch_checksum: b.store.checksum(),
    })
}

/// Evaluate the checkpoint at `checkpoint` (arm "default") and every arm
/// of the suite.
pub fn run_eval(checkpoint: &Path, suite: &SuiteConfig) -> Result<EvalReport> {
    suite.validate()?;
    let model = load_branch_model(checkpoint)?;
    let dataset = Dataset::load(&suite.dataset)?;
    let ctx = Ctx { suite, dataset: &dataset, test: dataset.split(Split::Test), scales: preset(&suite.preset)? };
    let mut report = EvalReport {
        version: REPORT_VERSION,
        suite: suite.clone(),
        arms: vec![arm_info("default", checkpoint, &model)?],
        rows: Vec::new(),
        summary: Vec::new(),
        curves: Vec::new(),
    };
    ctx.arm(&model, "default", &suite.metrics, &mut report)?;
    drop(model);
    for arm in &suite.arms {
        let m = load_branch_model(&arm.checkpoint)?;
        report.arms.push(arm_info(&arm.name, &arm.checkpoint, &m)?);
        ctx.arm(&m, &arm.name, &arm.metrics, &mut report)?;
    }
    report.summary = report
        .arms
        .iter()
        .map(|a| SummaryRow {
            arm: a.name.clone(),
            background_score: report.row(Metric::BackgroundLeak, &a.name, condition::CONFLICTING).map(|r| 1.0 - r.value),
            person_similarity: report.row(Metric::PersonSimilarity, &a.name, condition::FAITHFUL).map(|r| r.value),
        })
        .collect();
    Ok(report)
}
