//! Spatial transformer: axis-aligned crop and stitch transforms in the
//! normalized `[-1, 1]` frame, bilinear sampling and additive stitching.
//!
//! The differentiable forms live on [`Graph`] (`affine_sample`, `stitch`);
//! the functions here are value-level conveniences and the transform algebra.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Graph, Real, Tensor};

/// 2x3 matrix `[a, b, c, d, e, f]` mapping normalized output coordinates
/// `(x, y)` to normalized source coordinates `(a x + b y + c, d x + e y + f)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub m: [f64; 6],
}

impl AffineTransform {
    pub const IDENTITY: Self = Self {
        m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
    };

    pub fn axis_aligned(sx: f64, tx: f64, sy: f64, ty: f64) -> Self {
        Self {
            m: [sx, 0.0, tx, 0.0, sy, ty],
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let [a, b, c, d, e, f] = self.m;
        let [p, q, r, s, t, u] = other.m;
        Self {
            m: [
                a * p + b * s,
                a * q + b * t,
                a * r + b * u + c,
                d * p + e * s,
                d * q + e * t,
                d * r + e * u + f,
            ],
        }
    }

    pub fn inverse(&self) -> Result<Self> {
        let [a, b, c, d, e, f] = self.m;
        let det = a * e - b * d;
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Numeric("singular affine transform".into()));
        }
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Ok(Self {
            m: [ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)],
        })
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [a, b, c, d, e, f] = self.m;
        (a * x + b * y + c, d * x + e * y + f)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.m.iter().zip(&other.m).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn theta<T: Real>(&self) -> [T; 6] {
        self.m.map(T::lit)
    }
}

/// One object hypothesis anchored at a grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxParams {
    /// `(row, col)` of the source cell.
    pub cell: (usize, usize),
    /// Cell-center pixel coordinates.
    pub x_cell: f64,
    pub y_cell: f64,
    /// Column and row offsets in pixels.
    pub o_x: f64,
    pub o_y: f64,
    pub h_obj: f64,
    pub w_obj: f64,
    pub presence: f64,
}

impl BoxParams {
    /// Box center in continuous pixel coordinates `(x, y)`.
    pub fn center(&self) -> (f64, f64) {
        (self.x_cell + self.o_x, self.y_cell + self.o_y)
    }

    /// Box with no cell bookkeeping, centered at `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, w_obj: f64, h_obj: f64) -> Self {
        Self {
            cell: (0, 0),
            x_cell: cx,
            y_cell: cy,
            o_x: 0.0,
            o_y: 0.0,
            h_obj,
            w_obj,
            presence: 1.0,
        }
    }

    fn check(&self) -> Result<()> {
        let vals = [self.x_cell, self.y_cell, self.o_x, self.o_y, self.h_obj, self.w_obj];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("box parameters must be finite".into()));
        }
        if self.h_obj <= 0.0 || self.w_obj <= 0.0 {
            return Err(Error::Domain(format!(
                "zero-size box {} x {}",
                self.h_obj, self.w_obj
            )));
        }
        Ok(())
    }
}

/// Patch-normalized to image-normalized mapping that extracts `bx` from an
/// image of size `(height, width)`.
pub fn crop_transform(bx: &BoxParams, img_size: (usize, usize)) -> Result<AffineTransform> {
    bx.check()?;
    let (h, w) = (img_size.0 as f64, img_size.1 as f64);
    let (cx, cy) = bx.center();
    Ok(AffineTransform::axis_aligned(
        bx.w_obj / w,
        cx * 2.0 / w - 1.0,
        bx.h_obj / h,
        cy * 2.0 / h - 1.0,
    ))
}

/// Image-normalized to patch-normalized mapping placing a patch back onto
/// the canvas at `bx`; the exact inverse of [`crop_transform`].
pub fn stitch_transform(bx: &BoxParams, img_size: (usize, usize)) -> Result<AffineTransform> {
    let c = crop_transform(bx, img_size)?;
    let [sx, _, tx, _, sy, ty] = c.m;
    Ok(AffineTransform::axis_aligned(1.0 / sx, -tx / sx, 1.0 / sy, -ty / sy))
}

fn theta_tensor<T: Real>(transforms: &[AffineTransform]) -> Tensor<T> {
    let data = transforms.iter().flat_map(|t| t.theta::<T>()).collect();
    Tensor::new(&[transforms.len(), 6], data).expect("six entries per transform")
}

/// Bilinear resampling of `src` `[1,C,H,W]` through `t` into `[1,C,h,w]`.
pub fn bilinear_sample<T: Real>(src: &Tensor<T>, t: &AffineTransform, out_size: (usize, usize)) -> Result<Tensor<T>> {
    if t.m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite transform".into()));
    }
    let mut g = Graph::new();
    let s = g.constant(src.clone());
    let th = g.constant(theta_tensor(std::slice::from_ref(t)));
    let out = g.affine_sample(s, th, out_size.0, out_size.1)?;
    Ok(g.value(out).clone())
}

/// `Σ_i presence_i · warp(patch_i, transform_i)` on a `[1,C,H,W]` canvas,
/// accumulated in list order.
pub fn stitch_add<T: Real>(
    patches: &[Tensor<T>],
    transforms: &[AffineTransform],
    presences: &[T],
    canvas_size: (usize, usize),
) -> Result<Tensor<T>> {
    if patches.len() != transforms.len() || patches.len() != presences.len() {
        return Err(Error::InvalidArgument(format!(
            "stitch_add: {} patches, {} transforms, {} presences",
            patches.len(),
            transforms.len(),
            presences.len()
        )));
    }
    let Some(first) = patches.first() else {
        return Ok(Tensor::zeros(&[1, 1, canvas_size.0, canvas_size.1]));
    };
    let shape = first.shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::Shape(format!("stitch_add patch shape {shape:?}")));
    }
    let mut data = Vec::with_capacity(patches.len() * first.numel());
    for p in patches {
        if p.shape() != shape.as_slice() {
            return Err(Error::Shape("stitch_add patches differ in shape".into()));
        }
        data.extend_from_slice(p.data());
    }
    let n = patches.len();
    let mut g = Graph::new();
    let pv = g.constant(Tensor::new(&[n, shape[1], shape[2], shape[3]], data)?);
    let th = g.constant(theta_tensor(transforms));
    let wv = g.constant(Tensor::new(&[n], presences.to_vec())?);
    let out = g.stitch(pv, th, wv, 1, canvas_size.0, canvas_size.1)?;
    Ok(g.value(out).clone())
}
