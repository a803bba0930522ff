//! Run configuration and the file-level stages behind each CLI command.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{self, Detector, DetectorConfig, DetectorReport, DetectorTrainConfig, EpochLog, TrainOutput};
use crate::error::{Error, Result};
use crate::imgproc::{self, GrayImage, LabelMap};
use crate::metrics::{self, ApTable};
use crate::postproc::{self, InstanceMask, PostprocConfig};
use crate::prior::{self, PriorReport, PriorTrainConfig, ShapePriorModel, VaeConfig};
use crate::rng::{stream, streams};
use crate::shapes::{self, SceneParams, ShapeGenParams, ShapePatch};

pub const CONFIG_FILE: &str = "config.resolved.json";
pub const VERSION_FILE: &str = "version.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PRIOR_FILE: &str = "prior.bin";
pub const DETECTOR_FILE: &str = "detector.bin";

/// Where training shapes come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Patches cut from annotated label images.
    Annotation,
    /// Elastically deformed ellipses.
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: Scenario,
    pub dataset_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub shapes: ShapeGenParams,
    pub n_shapes: usize,
    /// Rotation step for annotation patches, in degrees.
    pub rotation_step_deg: u32,
    /// Copies per rotated annotation patch: the patch itself plus
    /// `aug_factor - 1` elastic deformations.
    pub aug_factor: usize,
    pub vae: VaeConfig,
    pub prior_train: PriorTrainConfig,
    pub detector: DetectorConfig,
    pub detector_train: DetectorTrainConfig,
    pub postproc: PostprocConfig,
    pub scene: SceneParams,
    pub eval_thresholds: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenario: Scenario::Synthetic,
            dataset_dir: None,
            output_dir: None,
            shapes: ShapeGenParams::default(),
            n_shapes: 1000,
            rotation_step_deg: 30,
            aug_factor: 2,
            vae: VaeConfig::default(),
            prior_train: PriorTrainConfig::default(),
            detector: DetectorConfig::default(),
            detector_train: DetectorTrainConfig::default(),
            postproc: PostprocConfig::default(),
            scene: SceneParams::default(),
            eval_thresholds: metrics::default_thresholds(),
        }
    }
}

impl RunConfig {
    /// Defaults when `path` is `None`; unknown keys are errors.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if self.aug_factor == 0 {
            return Err(Error::Config("aug_factor must be >= 1".into()));
        }
        if self.rotation_step_deg == 0 || 360 % self.rotation_step_deg != 0 {
            return Err(Error::Config(format!("rotation_step_deg {} must divide 360", self.rotation_step_deg)));
        }
        if self.eval_thresholds.iter().any(|t| !(0.0..1.0).contains(t)) {
            return Err(Error::Config("eval thresholds must lie in [0, 1)".into()));
        }
        if self.shapes.r_max_shape < 1.0 || self.shapes.r_max_shape > shapes::MAX_SHAPE_RATIO {
            return Err(Error::Config(format!("r_max_shape {} outside [1, {}]", self.shapes.r_max_shape, shapes::MAX_SHAPE_RATIO)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VersionStamp {
    pub package: String,
    pub version: String,
    pub profile: String,
    pub config_sha256: String,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the resolved config and the version stamp into `dir`.
pub fn write_run_stamp(dir: &Path, cfg: &RunConfig) -> Result<()> {
    ensure_dir(dir)?;
    let json = cfg.to_json()?;
    let stamp = VersionStamp {
        package: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        profile: if cfg!(debug_assertions) { "debug" } else { "release" }.into(),
        config_sha256: {
            let mut h = Sha256::new();
            h.update(json.as_bytes());
            prior::hex_digest(h)
        },
    };
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join(VERSION_FILE), &stamp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeManifest {
    pub count: usize,
    pub seed: u64,
    pub source: String,
    pub files: Vec<String>,
}

fn write_patches(out: &Path, patches: &[ShapePatch], seed: u64, source: String) -> Result<ShapeManifest> {
    ensure_dir(out)?;
    let files: Vec<String> = (0..patches.len()).map(|i| format!("shape_{i:05}.png")).collect();
    for (p, f) in patches.iter().zip(&files) {
        imgproc::write_gray_png(&out.join(f), &p.to_image())?;
    }
    let m = ShapeManifest {
        count: patches.len(),
        seed,
        source,
        files,
    };
    write_json(&out.join(MANIFEST_FILE), &m)?;
    Ok(m)
}

/// Synthetic deformed ellipses for prior training.
pub fn gen_shapes(n: usize, cfg: &RunConfig, out: &Path) -> Result<ShapeManifest> {
    if n == 0 {
        return Err(Error::InvalidArgument("--n must be >= 1".into()));
    }
    let patches = shapes::gen_shape_dataset(n, &cfg.shapes, &mut stream(cfg.seed, streams::DATA))?;
    let m = write_patches(out, &patches, cfg.seed, format!("synthetic r_max_shape={}", cfg.shapes.r_max_shape))?;
    write_run_stamp(out, cfg)?;
    Ok(m)
}

/// Cuts every non-border instance out of a label image, then rotates and
/// elastically augments it.
pub fn extract_shapes(labels_path: &Path, cfg: &RunConfig, out: &Path) -> Result<ShapeManifest> {
    let labels = imgproc::read_label_png(labels_path)?;
    let found = shapes::extract_annotation_patches(&labels)?;
    if found.is_empty() {
        return Err(Error::Data(format!("{}: every instance touches the border", labels_path.display())));
    }
    let mut rng = stream(cfg.seed, streams::DATA);
    let mut patches = Vec::new();
    for ap in &found {
        for rotated in shapes::augment_rotations(&ap.patch, cfg.rotation_step_deg)? {
            for _ in 1..cfg.aug_factor {
                patches.push(shapes::elastic_deform(&rotated, cfg.shapes.alpha, cfg.shapes.sigma, &mut rng)?);
            }
            patches.push(rotated);
        }
    }
    let m = write_patches(out, &patches, cfg.seed, format!("annotation {}", labels_path.display()))?;
    write_run_stamp(out, cfg)?;
    Ok(m)
}

/// Loads the patches listed in a shape manifest, or every PNG in `dir`.
pub fn load_shapes(dir: &Path) -> Result<Vec<ShapePatch>> {
    let manifest = dir.join(MANIFEST_FILE);
    let files: Vec<PathBuf> = if manifest.exists() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let m: ShapeManifest = serde_json::from_str(&text)?;
        m.files.iter().map(|f| dir.join(f)).collect()
    } else {
        let mut v = png_files(dir)?;
        v.sort();
        v
    };
    if files.is_empty() {
        return Err(Error::Data(format!("no shape patches in {}", dir.display())));
    }
    files
        .iter()
        .map(|f| {
            let img = imgproc::read_gray_png(f)?;
            ShapePatch::new(img.data).map_err(|e| Error::Data(format!("{}: {e}", f.display())))
        })
        .collect()
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "png") {
            out.push(p);
        }
    }
    Ok(out)
}

pub fn train_prior_stage(shapes_dir: &Path, cfg: &RunConfig, out: &Path) -> Result<(ShapePriorModel<f32>, PriorReport)> {
    let patches = load_shapes(shapes_dir)?;
    let mut model = prior::build_vae(&cfg.vae, &mut stream(cfg.seed, streams::PRIOR_INIT))?;
    let report = prior::train_prior(&mut model, &patches, &cfg.prior_train, &mut stream(cfg.seed, streams::LATENT_NOISE))?;
    ensure_dir(out)?;
    prior::save_prior(&out.join(PRIOR_FILE), &model)?;
    write_json(&out.join("loss_history.json"), &report)?;
    write_run_stamp(out, cfg)?;
    Ok((model, report))
}

/// Stem and image for every input. A directory of benchmark scenes yields
/// its `<stem>_image.png` files; otherwise every PNG that is not a label,
/// prediction or overlay file.
pub fn load_images(input: &Path) -> Result<Vec<(String, GrayImage)>> {
    if input.is_file() {
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let stem = stem.strip_suffix("_image").map(str::to_string).unwrap_or(stem);
        return Ok(vec![(stem, imgproc::read_gray_png(input)?)]);
    }
    if !input.is_dir() {
        return Err(Error::Data(format!("{} does not exist", input.display())));
    }
    let scenes = shapes::list_scenes(input)?;
    let mut out = Vec::new();
    if !scenes.is_empty() {
        for s in scenes {
            out.push((s.clone(), imgproc::read_gray_png(&shapes::scene_paths(input, &s).0)?));
        }
    } else {
        let mut files = png_files(input)?;
        files.sort();
        for f in files {
            let stem = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            if ["_labels", "_pred", "_overlay"].iter().any(|s| stem.ends_with(s)) {
                continue;
            }
            out.push((stem, imgproc::read_gray_png(&f)?));
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no images in {}", input.display())));
    }
    Ok(out)
}

/// Fresh detector around a trained prior: the decoder is frozen and the
/// encoder reinitialized.
pub fn detector_from_prior(prior: ShapePriorModel<f32>, cfg: &RunConfig) -> Result<Detector<f32>> {
    let mut rng = stream(cfg.seed, streams::DETECTOR_INIT);
    let prior = prior::freeze_decoder(prior::reinit_encoder(prior, &mut rng));
    Detector::new(prior, cfg.detector, &mut rng)
}

/// Trains on preprocessed images with the run's data and noise streams.
pub fn train_detector_in_memory(
    det: &mut Detector<f32>,
    images: &[GrayImage],
    cfg: &RunConfig,
    output: Option<&TrainOutput>,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<DetectorReport> {
    let prepared = images.iter().map(|i| detector::preprocess(i, &det.config)).collect::<Result<Vec<_>>>()?;
    detector::train_detector(
        det,
        &prepared,
        &cfg.detector_train,
        &mut stream(cfg.seed, streams::DATA),
        &mut stream(cfg.seed, streams::LATENT_NOISE),
        output,
        on_epoch,
    )
}

pub fn train_detector_stage(images: &Path, prior_path: &Path, cfg: &RunConfig, out: &Path, on_epoch: impl FnMut(&EpochLog)) -> Result<DetectorReport> {
    let prior = prior::load_prior(prior_path)?;
    let imgs: Vec<GrayImage> = load_images(images)?.into_iter().map(|(_, i)| i).collect();
    let mut det = detector_from_prior(prior, cfg)?;
    ensure_dir(out)?;
    write_run_stamp(out, cfg)?;
    let output = TrainOutput { dir: out.to_path_buf() };
    let report = train_detector_in_memory(&mut det, &imgs, cfg, Some(&output), on_epoch)?;
    detector::save_detector(&out.join(DETECTOR_FILE), &det)?;
    write_json(&out.join("train_report.json"), &report)?;
    Ok(report)
}

/// Instances of one image at its own resolution, after thresholding and
/// suppression.
pub fn segment(det: &Detector<f32>, img: &GrayImage, pp: &PostprocConfig) -> Result<Vec<InstanceMask>> {
    let prepared = detector::preprocess(img, &det.config)?;
    let d = det.detect(&prepared.input)?;
    let size = (prepared.input.height, prepared.input.width);
    let masks = postproc::extract_instances(&d.decoded, &d.boxes, size, pp.presence_threshold, pp.mask_threshold)?;
    let mut kept = postproc::nms_masks(&masks, pp.p_non_max, pp.nms);
    if (img.height, img.width) != size {
        for m in &mut kept {
            let mut lm = LabelMap::new(size.0, size.1);
            lm.data = m.mask.iter().map(|&b| b as u32).collect();
            m.mask = imgproc::resize_nearest(&lm, img.height, img.width).data.iter().map(|&v| v == 1).collect();
        }
        kept.retain(|m| m.area() > 0);
    }
    Ok(kept)
}

/// Maps `f` over `items` on up to `jobs` threads, keeping order.
pub fn parallel_map<I: Sync, O: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<O>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Writes `<stem>_pred.png`, `<stem>_pred.json` and `<stem>_overlay.png`
/// for every input image; returns the instance count per stem.
pub fn infer_stage(model: &Path, input: &Path, cfg: &RunConfig, out: &Path, jobs: usize) -> Result<Vec<(String, usize)>> {
    let det = detector::load_detector(model)?;
    let images = load_images(input)?;
    ensure_dir(out)?;
    write_run_stamp(out, cfg)?;
    parallel_map(&images, jobs, |(stem, img)| {
        let masks = segment(&det, img, &cfg.postproc)?;
        postproc::write_predictions(out, stem, &masks, img.height, img.width, Some(img))?;
        Ok((stem.clone(), masks.len()))
    })
}

/// Pools matches over every ground-truth `<stem>_labels.png` in `gt_dir`
/// against `<stem>_pred.png` in `pred_dir`; writes `ap.csv` and `ap.json`.
pub fn evaluate_stage(pred_dir: &Path, gt_dir: &Path, cfg: &RunConfig, out: &Path, jobs: usize) -> Result<ApTable> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(gt_dir).map_err(|e| Error::io(gt_dir, e))? {
        let name = entry.map_err(|e| Error::io(gt_dir, e))?.file_name().to_string_lossy().into_owned();
        if let Some(s) = name.strip_suffix("_labels.png") {
            stems.push(s.to_string());
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Data(format!("no *_labels.png files in {}", gt_dir.display())));
    }
    let items = parallel_map(&stems, jobs, |stem| {
        let gt = imgproc::read_label_png(&gt_dir.join(format!("{stem}_labels.png")))?;
        let (pred_png, _) = postproc::prediction_paths(pred_dir, stem);
        if !pred_png.exists() {
            return Err(Error::Data(format!("no prediction for {stem} in {}", pred_dir.display())));
        }
        let (masks, labels) = postproc::read_predictions(pred_dir, stem)?;
        if (labels.height, labels.width) != (gt.height, gt.width) {
            return Err(Error::Data(format!("{stem}: prediction and ground truth sizes differ")));
        }
        Ok((masks, gt))
    })?;
    let table = metrics::evaluate_dataset(&items, &cfg.eval_thresholds)?;
    ensure_dir(out)?;
    let csv = out.join("ap.csv");
    std::fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    write_json(&out.join("ap.json"), &table)?;
    write_run_stamp(out, cfg)?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub seed: u64,
    pub k_range: (usize, usize),
    pub params: SceneParams,
    pub stems: Vec<String>,
}

/// Scenes whose instance count is drawn uniformly from `k_range`.
pub fn gen_benchmark(k_range: (usize, usize), n: usize, cfg: &RunConfig, out: &Path) -> Result<BenchmarkManifest> {
    if n == 0 {
        return Err(Error::InvalidArgument("--n-scenes must be >= 1".into()));
    }
    if k_range.0 == 0 || k_range.0 > k_range.1 {
        return Err(Error::InvalidArgument(format!("bad k range {}-{}", k_range.0, k_range.1)));
    }
    ensure_dir(out)?;
    let scenes = gen_scenes(k_range, n, &cfg.scene, cfg.seed)?;
    let mut stems = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let stem = format!("scene_{i:04}");
        shapes::write_scene(out, &stem, scene, Some(cfg.seed), Some(&cfg.scene))?;
        stems.push(stem);
    }
    let m = BenchmarkManifest {
        seed: cfg.seed,
        k_range,
        params: cfg.scene,
        stems,
    };
    write_json(&out.join(MANIFEST_FILE), &m)?;
    write_run_stamp(out, cfg)?;
    Ok(m)
}

/// In-memory scenes, same draws as [`gen_benchmark`].
pub fn gen_scenes(k_range: (usize, usize), n: usize, params: &SceneParams, seed: u64) -> Result<Vec<shapes::SceneSample>> {
    let mut rng = stream(seed, streams::DATA);
    (0..n)
        .map(|_| {
            let k = rng.random_range(k_range.0..=k_range.1);
            shapes::gen_toy_scene(&SceneParams { k, ..*params }, &mut rng)
        })
        .collect()
}
