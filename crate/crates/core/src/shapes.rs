//! Shape-prior training data and synthetic benchmark scenes.
//!
//! Patches are `32 x 32` soft masks. Synthetic shapes are rotated ellipses
//! with an elastic displacement field; the same continuous shape model is
//! rendered into toy scenes so the detector's targets are representable by
//! the prior.

use std::f32::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{self, GrayImage, LabelMap};

/// Side length of a shape patch in pixels.
pub const PATCH_SIZE: usize = 32;
const SUPERSAMPLE: usize = 4;

/// Soft binary mask of one object, `PATCH_SIZE x PATCH_SIZE`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapePatch {
    pub data: Vec<f32>,
}

impl ShapePatch {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.len() != PATCH_SIZE * PATCH_SIZE {
            return Err(Error::Shape(format!(
                "shape patch needs {} values, got {}",
                PATCH_SIZE * PATCH_SIZE,
                data.len()
            )));
        }
        Ok(Self { data })
    }

    pub fn empty() -> Self {
        Self {
            data: vec![0.0; PATCH_SIZE * PATCH_SIZE],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * PATCH_SIZE + x]
    }

    pub fn foreground(&self, threshold: f32) -> Vec<bool> {
        self.data.iter().map(|&v| v > threshold).collect()
    }

    pub fn area(&self, threshold: f32) -> usize {
        self.data.iter().filter(|&&v| v > threshold).count()
    }

    /// Foreground bounding box `(y0, y1, x0, x1)`, end-exclusive.
    pub fn bbox(&self, threshold: f32) -> Option<(usize, usize, usize, usize)> {
        bbox_of(&self.foreground(threshold), PATCH_SIZE, PATCH_SIZE)
    }

    pub fn touches_border(&self, threshold: f32) -> bool {
        let n = PATCH_SIZE;
        (0..n).any(|i| {
            self.get(0, i) > threshold
                || self.get(n - 1, i) > threshold
                || self.get(i, 0) > threshold
                || self.get(i, n - 1) > threshold
        })
    }

    /// At least 4 foreground pixels and a clear 1-pixel margin.
    pub fn is_valid(&self) -> bool {
        self.area(0.5) >= 4 && !self.touches_border(0.5)
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage {
            height: PATCH_SIZE,
            width: PATCH_SIZE,
            data: self.data.clone(),
        }
    }

    /// Bilinear read in index coordinates; zero outside.
    fn sample(&self, v: f32, u: f32) -> f32 {
        bilinear(&self.data, PATCH_SIZE, PATCH_SIZE, v, u)
    }
}

pub(crate) fn bbox_of(mask: &[bool], h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                b = Some(match b {
                    None => (y, y + 1, x, x + 1),
                    Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y + 1), x0.min(x), x1.max(x + 1)),
                });
            }
        }
    }
    b
}

/// Bilinear interpolation at index coordinates `(v, u)`, zero outside.
fn bilinear(data: &[f32], h: usize, w: usize, v: f32, u: f32) -> f32 {
    let (y0, x0) = (v.floor(), u.floor());
    let (fy, fx) = (v - y0, u - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let read = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            data[y as usize * w + x as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * read(y0, x0) + fx * read(y0, x0 + 1))
        + fy * ((1.0 - fx) * read(y0 + 1, x0) + fx * read(y0 + 1, x0 + 1))
}

/// Rotated ellipse in patch coordinates centered on the patch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// Major over minor axis, `>= 1`.
    pub ratio: f32,
    pub angle_deg: f32,
    /// Fraction of the patch spanned by the major axis.
    pub fill: f32,
}

impl Ellipse {
    /// `(dy, dx)` relative to the patch center, in patch pixels.
    fn contains(&self, dy: f32, dx: f32) -> bool {
        let a = self.fill * PATCH_SIZE as f32 / 2.0;
        let b = a / self.ratio;
        let (s, c) = (self.angle_deg * PI / 180.0).sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    }
}

/// Smooth random displacement field over the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub dy: Vec<f32>,
    pub dx: Vec<f32>,
}

impl DisplacementField {
    /// Uniform noise per axis, Gaussian-smoothed with `sigma`, rescaled so
    /// the largest displacement component is `alpha` pixels.
    pub fn random<R: Rng + ?Sized>(alpha: f32, sigma: f32, rng: &mut R) -> Self {
        let n = PATCH_SIZE * PATCH_SIZE;
        let mut noise = || -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
        let (ry, rx) = (noise(), noise());
        let dy = imgproc::gaussian_blur(&ry, PATCH_SIZE, PATCH_SIZE, sigma);
        let dx = imgproc::gaussian_blur(&rx, PATCH_SIZE, PATCH_SIZE, sigma);
        let peak = dy.iter().chain(&dx).fold(0.0f32, |m, v| m.max(v.abs()));
        let k = if peak > 0.0 { alpha / peak } else { 0.0 };
        Self {
            dy: dy.into_iter().map(|v| v * k).collect(),
            dx: dx.into_iter().map(|v| v * k).collect(),
        }
    }

    /// Displacement at continuous patch index coordinates (edge-clamped).
    fn at(&self, v: f32, u: f32) -> (f32, f32) {
        let n = PATCH_SIZE as f32 - 1.0;
        let (v, u) = (v.clamp(0.0, n), u.clamp(0.0, n));
        (
            bilinear(&self.dy, PATCH_SIZE, PATCH_SIZE, v, u),
            bilinear(&self.dx, PATCH_SIZE, PATCH_SIZE, v, u),
        )
    }
}

/// A deformed ellipse: membership of patch point `q` is the ellipse test at
/// `q + displacement(q)`, the continuous form of elastic resampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeModel {
    pub ellipse: Ellipse,
    pub field: Option<DisplacementField>,
}

impl ShapeModel {
    /// `(y, x)` are continuous patch coordinates (pixel `i` spans `[i, i+1)`).
    fn contains(&self, y: f32, x: f32) -> bool {
        let (mut yy, mut xx) = (y, x);
        if let Some(f) = &self.field {
            let (dy, dx) = f.at(y - 0.5, x - 0.5);
            yy += dy;
            xx += dx;
        }
        let c = PATCH_SIZE as f32 / 2.0;
        self.ellipse.contains(yy - c, xx - c)
    }

    /// Fraction of supersamples of the square `[y, y+size) x [x, x+size)`
    /// (patch coordinates) that fall inside the shape.
    fn coverage(&self, y: f32, x: f32, size: f32) -> f32 {
        let step = size / SUPERSAMPLE as f32;
        let mut hits = 0;
        for i in 0..SUPERSAMPLE {
            for j in 0..SUPERSAMPLE {
                let sy = y + (i as f32 + 0.5) * step;
                let sx = x + (j as f32 + 0.5) * step;
                if self.contains(sy, sx) {
                    hits += 1;
                }
            }
        }
        hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32
    }

    pub fn rasterize(&self) -> ShapePatch {
        let mut p = ShapePatch::empty();
        for y in 0..PATCH_SIZE {
            for x in 0..PATCH_SIZE {
                p.data[y * PATCH_SIZE + x] = self.coverage(y as f32, x as f32, 1.0);
            }
        }
        p
    }
}

/// Largest supported major/minor ratio of a synthetic ellipse.
pub const MAX_SHAPE_RATIO: f32 = 8.0;

/// Antialiased ellipse whose major axis spans `fill_fraction` of the patch.
pub fn gen_ellipse_patch(a_over_b: f32, angle_deg: f32, fill_fraction: f32) -> Result<ShapePatch> {
    if !(1.0..=MAX_SHAPE_RATIO).contains(&a_over_b) {
        return Err(Error::InvalidArgument(format!(
            "axis ratio {a_over_b} outside [1, {MAX_SHAPE_RATIO}]"
        )));
    }
    if !(0.2..=0.9).contains(&fill_fraction) {
        return Err(Error::InvalidArgument(format!(
            "fill fraction {fill_fraction} outside [0.2, 0.9]"
        )));
    }
    Ok(ShapeModel {
        ellipse: Ellipse {
            ratio: a_over_b,
            angle_deg,
            fill: fill_fraction,
        },
        field: None,
    }
    .rasterize())
}

/// Elastic deformation: bilinear resampling of `patch` through a smooth
/// random displacement field of peak magnitude `alpha` pixels.
pub fn elastic_deform<R: Rng + ?Sized>(patch: &ShapePatch, alpha: f32, sigma: f32, rng: &mut R) -> Result<ShapePatch> {
    if sigma < 1.0 || alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "elastic deformation needs sigma >= 1 and alpha >= 0, got sigma {sigma}, alpha {alpha}"
        )));
    }
    if alpha == 0.0 {
        return Ok(patch.clone());
    }
    let field = DisplacementField::random(alpha, sigma, rng);
    let mut out = ShapePatch::empty();
    for y in 0..PATCH_SIZE {
        for x in 0..PATCH_SIZE {
            let i = y * PATCH_SIZE + x;
            out.data[i] = patch.sample(y as f32 + field.dy[i], x as f32 + field.dx[i]);
        }
    }
    Ok(out)
}

/// Rotation about the patch center by `angle_deg`, bilinear, zero fill.
pub fn rotate_patch(patch: &ShapePatch, angle_deg: f32) -> ShapePatch {
    let (s, c) = (angle_deg * PI / 180.0).sin_cos();
    let mid = PATCH_SIZE as f32 / 2.0;
    let mut out = ShapePatch::empty();
    for y in 0..PATCH_SIZE {
        for x in 0..PATCH_SIZE {
            let (dy, dx) = (y as f32 + 0.5 - mid, x as f32 + 0.5 - mid);
            // inverse rotation maps the output pixel back into the source
            let sx = c * dx + s * dy;
            let sy = -s * dx + c * dy;
            out.data[y * PATCH_SIZE + x] = patch.sample(sy + mid - 0.5, sx + mid - 0.5);
        }
    }
    out
}

/// All rotations by multiples of `step_deg`, starting with the unrotated patch.
pub fn augment_rotations(patch: &ShapePatch, step_deg: u32) -> Result<Vec<ShapePatch>> {
    if step_deg == 0 || 360 % step_deg != 0 {
        return Err(Error::InvalidArgument(format!(
            "rotation step {step_deg} must divide 360"
        )));
    }
    Ok((0..360 / step_deg)
        .map(|i| {
            if i == 0 {
                patch.clone()
            } else {
                rotate_patch(patch, (i * step_deg) as f32)
            }
        })
        .collect())
}

/// Parameters of synthetic shape generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeGenParams {
    pub r_max_shape: f32,
    pub alpha: f32,
    pub sigma: f32,
    pub fill_fraction: f32,
}

impl Default for ShapeGenParams {
    fn default() -> Self {
        Self {
            r_max_shape: 1.5,
            alpha: 2.0,
            sigma: 4.0,
            fill_fraction: 0.8,
        }
    }
}

const MAX_SHAPE_TRIES: usize = 100;

/// `n` deformed ellipses with ratio ~ U[1, r_max] and angle ~ U[0, 360).
/// Draws that break the patch margin are redrawn.
pub fn gen_shape_dataset<R: Rng + ?Sized>(n: usize, params: &ShapeGenParams, rng: &mut R) -> Result<Vec<ShapePatch>> {
    if n == 0 {
        return Err(Error::InvalidArgument("shape dataset size must be >= 1".into()));
    }
    if !(1.0..=MAX_SHAPE_RATIO).contains(&params.r_max_shape) {
        return Err(Error::InvalidArgument(format!(
            "r_max_shape {} outside [1, {MAX_SHAPE_RATIO}]",
            params.r_max_shape
        )));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut patch = ShapePatch::empty();
        for _ in 0..MAX_SHAPE_TRIES {
            let ratio = if params.r_max_shape > 1.0 {
                rng.random_range(1.0..=params.r_max_shape)
            } else {
                1.0
            };
            let angle = rng.random_range(0.0..360.0f32);
            let base = gen_ellipse_patch(ratio, angle, params.fill_fraction)?;
            patch = elastic_deform(&base, params.alpha, params.sigma, rng)?;
            if patch.is_valid() {
                break;
            }
        }
        out.push(patch);
    }
    Ok(out)
}

/// One instance cropped from a label image, with the square it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationPatch {
    pub id: u32,
    pub patch: ShapePatch,
    /// Center of the source square in continuous pixel coordinates.
    pub center_y: f32,
    pub center_x: f32,
    /// Side of the source square in pixels.
    pub side: f32,
}

/// Fraction of the patch occupied by an instance's larger bbox side.
pub const ANNOTATION_FILL: f32 = 0.8;

/// Crops every instance not touching the image border into a patch: tight
/// bounding box, padded to a square whose side leaves a 10% margin, then
/// area-resampled to `PATCH_SIZE`.
pub fn extract_annotation_patches(labels: &LabelMap) -> Result<Vec<AnnotationPatch>> {
    let ids = labels.ids();
    if ids.is_empty() {
        return Err(Error::Data("label image contains no instances".into()));
    }
    let (h, w) = (labels.height, labels.width);
    let mut out = Vec::new();
    for id in ids {
        let mask = labels.mask(id);
        let Some((y0, y1, x0, x1)) = bbox_of(&mask, h, w) else {
            continue;
        };
        if y0 == 0 || x0 == 0 || y1 == h || x1 == w {
            continue;
        }
        let side = (y1 - y0).max(x1 - x0) as f32 / ANNOTATION_FILL;
        let cy = (y0 + y1) as f32 / 2.0;
        let cx = (x0 + x1) as f32 / 2.0;
        let px = side / PATCH_SIZE as f32;
        let mut patch = ShapePatch::empty();
        for i in 0..PATCH_SIZE {
            for j in 0..PATCH_SIZE {
                let top = cy - side / 2.0 + i as f32 * px;
                let left = cx - side / 2.0 + j as f32 * px;
                let mut hits = 0;
                for a in 0..SUPERSAMPLE {
                    for b in 0..SUPERSAMPLE {
                        let y = top + (a as f32 + 0.5) * px / SUPERSAMPLE as f32;
                        let x = left + (b as f32 + 0.5) * px / SUPERSAMPLE as f32;
                        if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize] {
                            hits += 1;
                        }
                    }
                }
                patch.data[i * PATCH_SIZE + j] = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
            }
        }
        out.push(AnnotationPatch {
            id,
            patch,
            center_y: cy,
            center_x: cx,
            side,
        });
    }
    Ok(out)
}

/// Warps an annotation patch back to image coordinates (threshold 0.5).
pub fn paste_back(ap: &AnnotationPatch, height: usize, width: usize) -> Vec<bool> {
    let mut mask = vec![false; height * width];
    let y_lo = (ap.center_y - ap.side / 2.0).floor().max(0.0) as usize;
    let y_hi = ((ap.center_y + ap.side / 2.0).ceil() as usize).min(height);
    let x_lo = (ap.center_x - ap.side / 2.0).floor().max(0.0) as usize;
    let x_hi = ((ap.center_x + ap.side / 2.0).ceil() as usize).min(width);
    let n = PATCH_SIZE as f32;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let v = ((y as f32 + 0.5 - ap.center_y) / ap.side + 0.5) * n - 0.5;
            let u = ((x as f32 + 0.5 - ap.center_x) / ap.side + 0.5) * n - 0.5;
            mask[y * width + x] = ap.patch.sample(v, u) >= 0.5;
        }
    }
    mask
}

/// Generator settings for toy benchmark scenes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub size: usize,
    pub cell_size: usize,
    /// Requested instance count.
    pub k: usize,
    /// Geometric-mean object diameter range, in cells.
    pub s_min: f32,
    pub s_max: f32,
    pub shape: ShapeGenParams,
    pub background: f32,
    pub contrast: f32,
    pub noise_sigma: f32,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            size: 256,
            cell_size: 16,
            k: 10,
            s_min: 1.0,
            s_max: 2.0,
            shape: ShapeGenParams::default(),
            background: 0.2,
            contrast: 0.6,
            noise_sigma: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub id: u32,
    /// `[y0, y1, x0, x1]`, end-exclusive.
    pub bbox: [usize; 4],
    pub area: usize,
    pub center: [f32; 2],
    /// Geometric-mean diameter in pixels.
    pub diameter: f32,
    pub ratio: f32,
    pub angle_deg: f32,
    /// Some pixels were covered by a later instance.
    pub occluded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: GrayImage,
    pub labels: LabelMap,
    pub meta: Vec<InstanceMeta>,
}

const PLACEMENT_TRIES: usize = 1000;
const MIN_INSTANCE_PIXELS: usize = 9;

struct Placed {
    model: ShapeModel,
    center: [f32; 2],
    diameter: f32,
    /// image pixels per patch pixel
    scale: f32,
    reach: f32,
}

/// Renders a scene of up to `params.k` deformed ellipses. Placement uses
/// rejection sampling with center spacing `>= 0.7 * mean diameter`; instances
/// that cannot be placed are dropped. Overlaps resolve later-id-wins.
pub fn gen_toy_scene<R: Rng + ?Sized>(params: &SceneParams, rng: &mut R) -> Result<SceneSample> {
    if params.k == 0 {
        return Err(Error::InvalidArgument("scene needs k >= 1".into()));
    }
    if !(params.s_min > 0.0 && params.s_max >= params.s_min) {
        return Err(Error::InvalidArgument(format!(
            "scale range [{}, {}] invalid",
            params.s_min, params.s_max
        )));
    }
    let size = params.size;
    let shape = &params.shape;
    let mut placed: Vec<Placed> = Vec::new();
    'instances: for _ in 0..params.k {
        for _ in 0..PLACEMENT_TRIES {
            let s = rng.random_range(params.s_min..=params.s_max);
            let ratio = if shape.r_max_shape > 1.0 {
                rng.random_range(1.0..=shape.r_max_shape)
            } else {
                1.0
            };
            let angle = rng.random_range(0.0..360.0f32);
            let diameter = s * params.cell_size as f32;
            let major = diameter * ratio.sqrt();
            let scale = major / (shape.fill_fraction * PATCH_SIZE as f32);
            let reach = major / 2.0 + shape.alpha * scale + 2.0;
            if 2.0 * reach + 2.0 >= size as f32 {
                continue;
            }
            let cy = rng.random_range(reach + 1.0..size as f32 - reach - 1.0);
            let cx = rng.random_range(reach + 1.0..size as f32 - reach - 1.0);
            let clear = placed.iter().all(|p| {
                let d = ((p.center[0] - cy).powi(2) + (p.center[1] - cx).powi(2)).sqrt();
                d >= 0.7 * (p.diameter + diameter) / 2.0
            });
            let field = (shape.alpha > 0.0).then(|| DisplacementField::random(shape.alpha, shape.sigma, rng));
            if !clear {
                continue;
            }
            placed.push(Placed {
                model: ShapeModel {
                    ellipse: Ellipse {
                        ratio,
                        angle_deg: angle,
                        fill: shape.fill_fraction,
                    },
                    field,
                },
                center: [cy, cx],
                diameter,
                scale,
                reach,
            });
            continue 'instances;
        }
        break;
    }

    let mut image = GrayImage::filled(size, size, params.background);
    let mut labels = LabelMap::new(size, size);
    let mut own_area = Vec::with_capacity(placed.len());
    let fg = params.background + params.contrast;
    let mid = PATCH_SIZE as f32 / 2.0;
    for (idx, p) in placed.iter().enumerate() {
        let id = idx as u32 + 1;
        let y0 = (p.center[0] - p.reach).floor().max(0.0) as usize;
        let y1 = ((p.center[0] + p.reach).ceil() as usize).min(size);
        let x0 = (p.center[1] - p.reach).floor().max(0.0) as usize;
        let x1 = ((p.center[1] + p.reach).ceil() as usize).min(size);
        let mut area = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                // image pixel square mapped into patch coordinates
                let py = (y as f32 - p.center[0]) / p.scale + mid;
                let px = (x as f32 - p.center[1]) / p.scale + mid;
                let cov = p.model.coverage(py, px, 1.0 / p.scale);
                if cov <= 0.0 {
                    continue;
                }
                let i = y * size + x;
                image.data[i] = image.data[i] * (1.0 - cov) + fg * cov;
                if cov >= 0.5 {
                    labels.data[i] = id;
                    area += 1;
                }
            }
        }
        own_area.push(area);
    }

    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, params.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in &mut image.data {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }

    // drop slivers and relabel contiguously
    let mut counts = vec![0usize; placed.len() + 1];
    for &v in &labels.data {
        counts[v as usize] += 1;
    }
    let mut remap = vec![0u32; placed.len() + 1];
    let mut meta = Vec::new();
    let mut next = 1u32;
    for (idx, p) in placed.iter().enumerate() {
        let old = idx + 1;
        if counts[old] < MIN_INSTANCE_PIXELS {
            continue;
        }
        remap[old] = next;
        meta.push(InstanceMeta {
            id: next,
            bbox: [0; 4],
            area: counts[old],
            center: p.center,
            diameter: p.diameter,
            ratio: p.model.ellipse.ratio,
            angle_deg: p.model.ellipse.angle_deg,
            occluded: counts[old] < own_area[idx],
        });
        next += 1;
    }
    for v in &mut labels.data {
        *v = remap[*v as usize];
    }
    for m in &mut meta {
        let mask = labels.mask(m.id);
        if let Some((y0, y1, x0, x1)) = bbox_of(&mask, size, size) {
            m.bbox = [y0, y1, x0, x1];
        }
    }
    Ok(SceneSample {
        image,
        labels,
        meta,
    })
}

/// Recomputes instance metadata from a label map (used for real datasets).
pub fn meta_from_labels(labels: &LabelMap) -> Vec<InstanceMeta> {
    labels
        .ids()
        .into_iter()
        .filter_map(|id| {
            let mask = labels.mask(id);
            let (y0, y1, x0, x1) = bbox_of(&mask, labels.height, labels.width)?;
            let area = mask.iter().filter(|&&m| m).count();
            Some(InstanceMeta {
                id,
                bbox: [y0, y1, x0, x1],
                area,
                center: [(y0 + y1) as f32 / 2.0, (x0 + x1) as f32 / 2.0],
                diameter: 2.0 * (area as f32 / PI).sqrt(),
                ratio: 1.0,
                angle_deg: 0.0,
                occluded: false,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneSidecar {
    seed: Option<u64>,
    params: Option<SceneParams>,
    instances: Vec<InstanceMeta>,
}

/// File names of a persisted scene: `<stem>_image.png`, `<stem>_labels.png`, `<stem>.json`.
pub fn scene_paths(dir: &Path, stem: &str) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("{stem}_image.png")),
        dir.join(format!("{stem}_labels.png")),
        dir.join(format!("{stem}.json")),
    )
}

pub fn write_scene(dir: &Path, stem: &str, scene: &SceneSample, seed: Option<u64>, params: Option<&SceneParams>) -> Result<()> {
    let (img, lab, side) = scene_paths(dir, stem);
    imgproc::write_gray_png(&img, &scene.image)?;
    imgproc::write_label_png(&lab, &scene.labels)?;
    let sidecar = SceneSidecar {
        seed,
        params: params.copied(),
        instances: scene.meta.clone(),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

/// Loads a scene pair; the JSON sidecar is optional.
pub fn read_scene(dir: &Path, stem: &str) -> Result<SceneSample> {
    let (img, lab, side) = scene_paths(dir, stem);
    let image = imgproc::read_gray_png(&img)?;
    let labels = imgproc::read_label_png(&lab)?;
    if (image.height, image.width) != (labels.height, labels.width) {
        return Err(Error::Data(format!("{stem}: image and label sizes differ")));
    }
    let meta = if side.exists() {
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        serde_json::from_str::<SceneSidecar>(&text)?.instances
    } else {
        meta_from_labels(&labels)
    };
    Ok(SceneSample {
        image,
        labels,
        meta,
    })
}

/// Stems of all `<stem>_image.png` files in `dir` that have a label partner, sorted.
pub fn list_scenes(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_image.png") {
            if dir.join(format!("{stem}_labels.png")).exists() {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mask_iou;
    use crate::rng::stream;

    fn aspect(p: &ShapePatch) -> f32 {
        let (y0, y1, x0, x1) = p.bbox(0.5).unwrap();
        (x1 - x0) as f32 / (y1 - y0) as f32
    }

    #[test]
    fn circle_is_four_fold_symmetric() {
        let p = gen_ellipse_patch(1.0, 0.0, 0.8).unwrap();
        let n = PATCH_SIZE;
        for y in 0..n {
            for x in 0..n {
                let v = p.get(y, x);
                assert_eq!(v, p.get(n - 1 - y, x));
                assert_eq!(v, p.get(y, n - 1 - x));
                assert_eq!(v, p.get(x, y));
            }
        }
    }

    #[test]
    fn ratio_two_box_is_twice_as_wide() {
        let p = gen_ellipse_patch(2.0, 0.0, 0.8).unwrap();
        let (y0, y1, x0, x1) = p.bbox(0.5).unwrap();
        let (h, w) = ((y1 - y0) as f32, (x1 - x0) as f32);
        assert!((w - 2.0 * h).abs() <= 2.0, "w {w} h {h}");
    }

    #[test]
    fn ellipse_area_matches_analytic() {
        for ratio in [1.0, 1.5, 2.0, 3.0] {
            let p = gen_ellipse_patch(ratio, 17.0, 0.8).unwrap();
            let a = 0.8 * PATCH_SIZE as f32 / 2.0;
            let analytic = PI * a * (a / ratio);
            let soft: f32 = p.data.iter().sum();
            assert!((soft - analytic).abs() / analytic < 0.1, "ratio {ratio}");
            let hard = p.area(0.5) as f32;
            assert!((hard - analytic).abs() / analytic < 0.1, "ratio {ratio}");
        }
    }

    #[test]
    fn ellipse_argument_checks() {
        assert!(gen_ellipse_patch(0.5, 0.0, 0.8).is_err());
        assert!(gen_ellipse_patch(1.0, 0.0, 0.95).is_err());
        assert!(gen_ellipse_patch(1.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn zero_alpha_is_identity() {
        let p = gen_ellipse_patch(1.7, 33.0, 0.8).unwrap();
        let mut rng = stream(1, "t");
        assert_eq!(elastic_deform(&p, 0.0, 4.0, &mut rng).unwrap(), p);
        assert!(elastic_deform(&p, 1.0, 0.5, &mut rng).is_err());
    }

    #[test]
    fn elastic_area_change_is_bounded() {
        let p = gen_ellipse_patch(1.5, 20.0, 0.8).unwrap();
        let base = p.area(0.5) as f32;
        let mut worst = 0.0f32;
        for seed in 0..100 {
            let mut rng = stream(seed, "elastic");
            let d = elastic_deform(&p, 2.0, 4.0, &mut rng).unwrap();
            worst = worst.max((d.area(0.5) as f32 - base).abs() / base);
        }
        assert!(worst < 0.25, "worst relative area change {worst}");
    }

    #[test]
    fn elastic_is_deterministic() {
        let p = gen_ellipse_patch(1.5, 20.0, 0.8).unwrap();
        let a = elastic_deform(&p, 2.0, 4.0, &mut stream(3, "e")).unwrap();
        let b = elastic_deform(&p, 2.0, 4.0, &mut stream(3, "e")).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, p);
    }

    #[test]
    fn twelve_rotations_of_a_circle_agree() {
        let c = gen_ellipse_patch(1.0, 0.0, 0.8).unwrap();
        let rots = augment_rotations(&c, 30).unwrap();
        assert_eq!(rots.len(), 12);
        for a in &rots {
            for b in &rots {
                assert!(mask_iou(&a.foreground(0.5), &b.foreground(0.5)) >= 0.95);
            }
        }
        assert!(augment_rotations(&c, 7).is_err());
    }

    #[test]
    fn double_half_turn_restores_patch() {
        let p = gen_ellipse_patch(2.0, 25.0, 0.8).unwrap();
        let back = rotate_patch(&rotate_patch(&p, 180.0), 180.0);
        let err = p.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn unit_ratio_dataset_is_near_circular() {
        let params = ShapeGenParams {
            r_max_shape: 1.0,
            ..Default::default()
        };
        let set = gen_shape_dataset(1000, &params, &mut stream(11, "shapes")).unwrap();
        assert_eq!(set.len(), 1000);
        for p in &set {
            let a = aspect(p);
            assert!((0.8..=1.25).contains(&a), "aspect {a}");
            assert!(p.is_valid());
        }
    }

    #[test]
    fn dataset_is_seeded_and_rejects_empty() {
        let params = ShapeGenParams::default();
        let a = gen_shape_dataset(20, &params, &mut stream(5, "s")).unwrap();
        let b = gen_shape_dataset(20, &params, &mut stream(5, "s")).unwrap();
        assert_eq!(a, b);
        assert!(gen_shape_dataset(0, &params, &mut stream(5, "s")).is_err());
    }

    fn square_labels() -> LabelMap {
        let mut l = LabelMap::new(40, 40);
        for y in 10..30 {
            for x in 10..30 {
                l.data[y * 40 + x] = 1;
            }
        }
        l
    }

    #[test]
    fn centered_square_gives_centered_patch() {
        let ps = extract_annotation_patches(&square_labels()).unwrap();
        assert_eq!(ps.len(), 1);
        let (y0, y1, x0, x1) = ps[0].patch.bbox(0.5).unwrap();
        assert_eq!((y0, x0), (PATCH_SIZE - y1, PATCH_SIZE - x1));
        assert!(!ps[0].patch.touches_border(0.0));
    }

    #[test]
    fn border_instances_are_skipped() {
        let mut l = LabelMap::new(50, 50);
        let mut paint = |id: u32, ys: std::ops::Range<usize>, xs: std::ops::Range<usize>| {
            for y in ys {
                for x in xs.clone() {
                    l.data[y * 50 + x] = id;
                }
            }
        };
        paint(1, 5..15, 5..15);
        paint(2, 20..30, 30..45);
        paint(3, 0..8, 20..28);
        let ps = extract_annotation_patches(&l).unwrap();
        assert_eq!(ps.iter().map(|p| p.id).collect::<Vec<_>>(), vec![1, 2]);
        assert!(extract_annotation_patches(&LabelMap::new(8, 8)).is_err());
    }

    #[test]
    fn paste_back_reproduces_instances() {
        let scene = gen_toy_scene(&SceneParams::default(), &mut stream(2, "scene")).unwrap();
        let ps = extract_annotation_patches(&scene.labels).unwrap();
        assert!(!ps.is_empty());
        for ap in &ps {
            assert!(!ap.patch.touches_border(0.5));
            let back = paste_back(ap, 256, 256);
            let iou = mask_iou(&back, &scene.labels.mask(ap.id));
            assert!(iou >= 0.8, "id {} iou {iou}", ap.id);
        }
    }

    #[test]
    fn single_instance_scene_edges_on_boundary() {
        let params = SceneParams {
            k: 1,
            ..Default::default()
        };
        let scene = gen_toy_scene(&params, &mut stream(4, "scene")).unwrap();
        assert_eq!(scene.meta.len(), 1);
        let g = imgproc::sobel_gradient_map(&scene.image).unwrap();
        let (argmax, _) = g
            .data
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        // the strongest edge pixel lies within one pixel of a label transition
        let (y, x) = (argmax / 256, argmax % 256);
        let mut near_boundary = false;
        for yy in y.saturating_sub(1)..=(y + 1).min(255) {
            for xx in x.saturating_sub(1)..=(x + 1).min(255) {
                if scene.labels.get(yy, xx) != scene.labels.get(y, x) {
                    near_boundary = true;
                }
            }
        }
        assert!(near_boundary);
    }

    #[test]
    fn scenes_are_deterministic() {
        let p = SceneParams::default();
        let a = gen_toy_scene(&p, &mut stream(9, "scene")).unwrap();
        let b = gen_toy_scene(&p, &mut stream(9, "scene")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scene_invariants_hold() {
        let p = SceneParams {
            k: 15,
            ..Default::default()
        };
        for seed in 0..10 {
            let s = gen_toy_scene(&p, &mut stream(seed, "scene")).unwrap();
            let ids = s.labels.ids();
            assert_eq!(ids, (1..=s.meta.len() as u32).collect::<Vec<_>>());
            let lo = PI / 4.0 * (16.0 * p.s_min).powi(2) * 0.75;
            let hi = PI / 4.0 * (16.0 * p.s_max * p.shape.r_max_shape).powi(2) * 1.25;
            for m in &s.meta {
                assert!(m.area >= MIN_INSTANCE_PIXELS);
                if !m.occluded {
                    assert!((lo..=hi).contains(&(m.area as f32)), "area {}", m.area);
                }
            }
            let thr = p.background + p.contrast / 2.0;
            let fg: Vec<usize> = (0..s.labels.data.len()).filter(|&i| s.labels.data[i] > 0).collect();
            let bright = fg.iter().filter(|&&i| s.image.data[i] > thr).count();
            assert!(bright as f32 >= 0.95 * fg.len() as f32);
        }
    }

    #[test]
    fn scene_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = SceneParams::default();
        let s = gen_toy_scene(&p, &mut stream(1, "scene")).unwrap();
        write_scene(dir.path(), "s0", &s, Some(1), Some(&p)).unwrap();
        let back = read_scene(dir.path(), "s0").unwrap();
        assert_eq!(back.labels, s.labels);
        assert_eq!(back.meta, s.meta);
        assert!(back.image.max_abs_diff(&s.image) <= 0.5 / 255.0 + 1e-6);
        assert_eq!(list_scenes(dir.path()).unwrap(), vec!["s0".to_string()]);
    }
}
