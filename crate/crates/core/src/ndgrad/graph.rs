//! Tape of operations and the reverse sweep.
//!
//! Nodes are appended in creation order, so inputs always precede their
//! consumers and the backward pass is a single reverse scan.

use super::kernels::{self, ConvGeom, Planes, Region};
use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise activations exposed as one operator family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Exp,
    Relu,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Clamp { lo: f64, hi: f64 },
    Sigmoid,
    Tanh,
    Exp,
    Relu,
    Log,
    Sqrt,
    Square,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ChannelBias {
        input: usize,
        bias: usize,
    },
    MaxPool {
        input: usize,
        argmax: Vec<u32>,
    },
    Upsample2x {
        input: usize,
    },
    PadReplicate {
        input: usize,
        pad: usize,
    },
    Unary {
        input: usize,
        kind: Unary,
    },
    Dense {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Binary {
        a: usize,
        b: usize,
        kind: Binary,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    Offset {
        input: usize,
    },
    Sum {
        input: usize,
    },
    Mean {
        input: usize,
    },
    SumLast {
        input: usize,
    },
    Reshape {
        input: usize,
    },
    Channel {
        input: usize,
        channel: usize,
    },
    Affine {
        sx: usize,
        tx: usize,
        sy: usize,
        ty: usize,
    },
    Sample {
        src: usize,
        theta: usize,
    },
    Stitch {
        patches: usize,
        theta: usize,
        weights: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// A single-threaded computation graph.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(shape_err!("{what}: {a:?} vs {b:?}"));
    }
    Ok(())
}

fn expect_rank(shape: &[usize], rank: usize, what: &str) -> Result<()> {
    if shape.len() != rank {
        return Err(shape_err!("{what} expects rank {rank}, got {shape:?}"));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Graph::backward`]; `None` when the leaf is
    /// not reachable from the loss or does not require a gradient.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor, zeros when unreachable.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v);
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[usize]) -> Var {
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    // ------------------------------------------------------------------
    // Forward operators
    // ------------------------------------------------------------------

    /// 2-D cross-correlation, `[N,C,H,W] * [F,C,kh,kw] -> [N,F,H',W']`, zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.conv_geom(input.0, kernel.0, stride, padding)?;
        let (n, f) = (self.shape(input)[0], self.shape(kernel)[0]);
        let x = self.val(input.0).data();
        let k = self.val(kernel.0).data();
        let in_len = geom.c * geom.h * geom.w;
        let out_len = f * geom.cols();
        let mut out = vec![T::zero(); n * out_len];
        let mut cols = vec![T::zero(); geom.rows() * geom.cols()];
        for s in 0..n {
            kernels::im2col(&x[s * in_len..(s + 1) * in_len], &geom, &mut cols);
            kernels::matmul(
                f,
                geom.rows(),
                geom.cols(),
                k,
                false,
                &cols,
                false,
                &mut out[s * out_len..(s + 1) * out_len],
                T::zero(),
            );
        }
        let value = Tensor::new(&[n, f, geom.ho, geom.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                stride,
                padding,
            },
            &[input.0, kernel.0],
        ))
    }

    fn conv_geom(&self, input: usize, kernel: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
        let xs = self.val(input).shape();
        let ks = self.val(kernel).shape();
        expect_rank(xs, 4, "conv2d input")?;
        expect_rank(ks, 4, "conv2d kernel")?;
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if xs[1] != ks[1] {
            return Err(shape_err!(
                "conv2d channels: input {:?} kernel {:?}",
                xs,
                ks
            ));
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ks[2], ks[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(shape_err!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        Ok(ConvGeom {
            c: xs[1],
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Adds a per-channel bias `[C]` to `[N,C,H,W]`.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        expect_rank(&xs, 4, "channel bias input")?;
        if self.shape(bias) != [xs[1]] {
            return Err(shape_err!(
                "channel bias {:?} for input {:?}",
                self.shape(bias),
                xs
            ));
        }
        let plane = xs[2] * xs[3];
        let b = self.val(bias.0).data();
        let mut out = self.val(input.0).data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bc = b[i % xs[1]];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(
            value,
            Op::ChannelBias {
                input: input.0,
                bias: bias.0,
            },
            &[input.0, bias.0],
        ))
    }

    /// Non-overlapping max pooling with a square window.
    pub fn maxpool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        expect_rank(&xs, 4, "maxpool2d input")?;
        if size == 0 || xs[2] % size != 0 || xs[3] % size != 0 {
            return Err(shape_err!("maxpool2d size {size} does not divide {xs:?}"));
        }
        let (h, w) = (xs[2], xs[3]);
        let (ho, wo) = (h / size, w / size);
        let x = self.val(input.0).data();
        let planes = xs[0] * xs[1];
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            // strict comparison keeps the first occurrence in row-major order
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(&[xs[0], xs[1], ho, wo], out)?;
        Ok(self.push(
            value,
            Op::MaxPool {
                input: input.0,
                argmax,
            },
            &[input.0],
        ))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        expect_rank(&xs, 4, "upsample2x input")?;
        let (h, w) = (xs[2], xs[3]);
        let x = self.val(input.0).data();
        let planes = xs[0] * xs[1];
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = x[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[xs[0], xs[1], 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x { input: input.0 }, &[input.0]))
    }

    /// Replicate (edge) padding of the two spatial axes.
    pub fn pad_replicate(&mut self, input: Var, pad: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        expect_rank(&xs, 4, "pad_replicate input")?;
        let (h, w) = (xs[2], xs[3]);
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let x = self.val(input.0).data();
        let planes = xs[0] * xs[1];
        let mut out = vec![T::zero(); planes * hp * wp];
        for p in 0..planes {
            for y in 0..hp {
                let sy = y.saturating_sub(pad).min(h - 1);
                for xx in 0..wp {
                    let sx = xx.saturating_sub(pad).min(w - 1);
                    out[p * hp * wp + y * wp + xx] = x[p * h * w + sy * w + sx];
                }
            }
        }
        let value = Tensor::new(&[xs[0], xs[1], hp, wp], out)?;
        Ok(self.push(
            value,
            Op::PadReplicate {
                input: input.0,
                pad,
            },
            &[input.0],
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let u = match kind {
            Activation::Sigmoid => Unary::Sigmoid,
            Activation::Tanh => Unary::Tanh,
            Activation::Exp => Unary::Exp,
            Activation::Relu => Unary::Relu,
            Activation::Log => Unary::Log,
        };
        self.unary(input, u)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Unary::Tanh)
    }

    pub fn exp(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Unary::Exp)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Unary::Relu)
    }

    pub fn log(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Unary::Log)
    }

    pub fn sqrt(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Unary::Sqrt)
    }

    pub fn square(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Unary::Square)
    }

    pub fn neg(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Unary::Neg)
    }

    /// Elementwise clamp to `[lo, hi]`; zero gradient where clamped.
    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp range [{lo}, {hi}]")));
        }
        self.unary(input, Unary::Clamp { lo, hi })
    }

    fn unary(&mut self, input: Var, kind: Unary) -> Result<Var> {
        let x = self.val(input.0);
        match kind {
            Unary::Log if x.data().iter().any(|&v| v <= T::zero()) => {
                return Err(Error::Domain("log of a non-positive value".into()));
            }
            Unary::Sqrt if x.data().iter().any(|&v| v < T::zero()) => {
                return Err(Error::Domain("sqrt of a negative value".into()));
            }
            _ => {}
        }
        let f = |v: T| -> T {
            match kind {
                Unary::Clamp { lo, hi } => v.max(T::lit(lo)).min(T::lit(hi)),
                Unary::Sigmoid => {
                    // split form avoids exp overflow for large |v|
                    if v >= T::zero() {
                        T::one() / (T::one() + (-v).exp())
                    } else {
                        let e = v.exp();
                        e / (T::one() + e)
                    }
                }
                Unary::Tanh => v.tanh(),
                Unary::Exp => v.exp(),
                Unary::Relu => v.max(T::zero()),
                Unary::Log => v.ln(),
                Unary::Sqrt => v.sqrt(),
                Unary::Square => v * v,
                Unary::Neg => -v,
            }
        };
        let value = x.map(f);
        Ok(self.push(
            value,
            Op::Unary {
                input: input.0,
                kind,
            },
            &[input.0],
        ))
    }

    /// Affine map `[N,D] x [D,E] + [E] -> [N,E]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        expect_rank(&xs, 2, "dense input")?;
        expect_rank(&ws, 2, "dense weight")?;
        if xs[1] != ws[0] || self.shape(bias) != [ws[1]] {
            return Err(shape_err!(
                "dense: input {:?}, weight {:?}, bias {:?}",
                xs,
                ws,
                self.shape(bias)
            ));
        }
        let (n, d, e) = (xs[0], xs[1], ws[1]);
        let b = self.val(bias.0).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| b.iter().copied()).collect();
        kernels::matmul(
            n,
            d,
            e,
            self.val(input.0).data(),
            false,
            self.val(weight.0).data(),
            false,
            &mut out,
            T::one(),
        );
        let value = Tensor::new(&[n, e], out)?;
        Ok(self.push(
            value,
            Op::Dense {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
            &[input.0, weight.0, bias.0],
        ))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "elementwise operands")?;
        let av = self.val(a.0).data();
        let bv = self.val(b.0).data();
        let data: Vec<T> = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
                Binary::Min => {
                    if x <= y {
                        x
                    } else {
                        y
                    }
                }
            })
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(
            value,
            Op::Binary {
                a: a.0,
                b: b.0,
                kind,
            },
            &[a.0, b.0],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    /// Elementwise minimum; the subgradient goes to `a` on ties.
    pub fn min_pairwise(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Min)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let value = self.val(input.0).map(|v| v * f);
        self.push(
            value,
            Op::Scale {
                input: input.0,
                factor,
            },
            &[input.0],
        )
    }

    pub fn add_scalar(&mut self, input: Var, c: f64) -> Var {
        let cv = T::lit(c);
        let value = self.val(input.0).map(|v| v + cv);
        self.push(value, Op::Offset { input: input.0 }, &[input.0])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.val(input.0).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { input: input.0 }, &[input.0])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.val(input.0);
        let n = T::lit(x.numel().max(1) as f64);
        let s = x.data().iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean { input: input.0 }, &[input.0])
    }

    /// Sums over the last axis: `[.., D] -> [..]`.
    pub fn sum_last(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let Some((&d, lead)) = xs.split_last() else {
            return Err(shape_err!("sum_last on a scalar"));
        };
        if d == 0 {
            return Err(shape_err!("sum_last over an empty axis"));
        }
        let data: Vec<T> = self
            .val(input.0)
            .data()
            .chunks(d)
            .map(|c| c.iter().copied().sum())
            .collect();
        let value = Tensor::new(lead, data)?;
        Ok(self.push(value, Op::SumLast { input: input.0 }, &[input.0]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.val(input.0).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input: input.0 }, &[input.0]))
    }

    /// Selects one channel: `[N,C,H,W] -> [N,1,H,W]`.
    pub fn channel(&mut self, input: Var, channel: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        expect_rank(&xs, 4, "channel input")?;
        if channel >= xs[1] {
            return Err(shape_err!("channel {channel} of {xs:?}"));
        }
        let plane = xs[2] * xs[3];
        let x = self.val(input.0).data();
        let mut out = Vec::with_capacity(xs[0] * plane);
        for n in 0..xs[0] {
            let base = (n * xs[1] + channel) * plane;
            out.extend_from_slice(&x[base..base + plane]);
        }
        let value = Tensor::new(&[xs[0], 1, xs[2], xs[3]], out)?;
        Ok(self.push(
            value,
            Op::Channel {
                input: input.0,
                channel,
            },
            &[input.0],
        ))
    }

    /// Assembles axis-aligned affine matrices `[[sx,0,tx],[0,sy,ty]]` from
    /// four `[M]` vectors into an `[M,6]` tensor.
    pub fn affine_from_parts(&mut self, sx: Var, tx: Var, sy: Var, ty: Var) -> Result<Var> {
        let s = self.shape(sx).to_vec();
        expect_rank(&s, 1, "affine part")?;
        for v in [tx, sy, ty] {
            same_shape(&s, self.shape(v), "affine parts")?;
        }
        let m = s[0];
        let (a, b, c, d) = (
            self.val(sx.0).data(),
            self.val(tx.0).data(),
            self.val(sy.0).data(),
            self.val(ty.0).data(),
        );
        let mut out = Vec::with_capacity(6 * m);
        for i in 0..m {
            out.extend_from_slice(&[a[i], T::zero(), b[i], T::zero(), c[i], d[i]]);
        }
        let value = Tensor::new(&[m, 6], out)?;
        Ok(self.push(
            value,
            Op::Affine {
                sx: sx.0,
                tx: tx.0,
                sy: sy.0,
                ty: ty.0,
            },
            &[sx.0, tx.0, sy.0, ty.0],
        ))
    }

    /// Bilinear affine sampling. `src` is `[B,C,H,W]`, `theta` is `[M,6]`
    /// with `M` a multiple of `B`; output `m` samples source image
    /// `m / (M / B)` and has shape `[M,C,out_h,out_w]`. Each theta row maps
    /// normalized output coordinates to normalized source coordinates.
    /// Reads outside the source are zero.
    pub fn affine_sample(&mut self, src: Var, theta: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let ss = self.shape(src).to_vec();
        let ts = self.shape(theta).to_vec();
        expect_rank(&ss, 4, "sample source")?;
        if ts.len() != 2 || ts[1] != 6 || ts[0] == 0 || ts[0] % ss[0] != 0 {
            return Err(shape_err!("sample theta {ts:?} for source {ss:?}"));
        }
        let (b, c, h, w) = (ss[0], ss[1], ss[2], ss[3]);
        let m = ts[0];
        let per = m / b;
        let sd = self.val(src.0).data();
        let td = self.val(theta.0).data();
        let olen = c * out_h * out_w;
        let mut out = vec![T::zero(); m * olen];
        for i in 0..m {
            let img = i / per;
            let planes = Planes {
                data: &sd[img * c * h * w..(img + 1) * c * h * w],
                c,
                h,
                w,
            };
            kernels::warp_forward(
                planes,
                &td[i * 6..i * 6 + 6],
                &mut out[i * olen..(i + 1) * olen],
                out_h,
                out_w,
                T::one(),
                Region::full(out_h, out_w),
            );
        }
        let value = Tensor::new(&[m, c, out_h, out_w], out)?;
        Ok(self.push(
            value,
            Op::Sample {
                src: src.0,
                theta: theta.0,
            },
            &[src.0, theta.0],
        ))
    }

    /// Additive stitching: `patches` `[M,C,h,w]` are warped onto `images`
    /// canvases of size `canvas_h x canvas_w` through `theta` `[M,6]`
    /// (canvas-normalized to patch-normalized) and accumulated with
    /// `weights` `[M]`. Patches are summed in index order.
    pub fn stitch(
        &mut self,
        patches: Var,
        theta: Var,
        weights: Var,
        images: usize,
        canvas_h: usize,
        canvas_w: usize,
    ) -> Result<Var> {
        let ps = self.shape(patches).to_vec();
        expect_rank(&ps, 4, "stitch patches")?;
        let m = ps[0];
        if self.shape(theta) != [m, 6] || self.shape(weights) != [m] {
            return Err(shape_err!(
                "stitch: patches {:?}, theta {:?}, weights {:?}",
                ps,
                self.shape(theta),
                self.shape(weights)
            ));
        }
        if images == 0 || m % images != 0 {
            return Err(shape_err!("stitch: {m} patches onto {images} canvases"));
        }
        let (c, h, w) = (ps[1], ps[2], ps[3]);
        let per = m / images;
        let pd = self.val(patches.0).data();
        let td = self.val(theta.0).data();
        let wd = self.val(weights.0).data();
        let clen = c * canvas_h * canvas_w;
        let mut out = vec![T::zero(); images * clen];
        for i in 0..m {
            let img = i / per;
            let th = &td[i * 6..i * 6 + 6];
            let region = kernels::warp_region(th, h, w, canvas_h, canvas_w);
            let planes = Planes {
                data: &pd[i * c * h * w..(i + 1) * c * h * w],
                c,
                h,
                w,
            };
            kernels::warp_forward(
                planes,
                th,
                &mut out[img * clen..(img + 1) * clen],
                canvas_h,
                canvas_w,
                wd[i],
                region,
            );
        }
        let value = Tensor::new(&[images, c, canvas_h, canvas_w], out)?;
        Ok(self.push(
            value,
            Op::Stitch {
                patches: patches.0,
                theta: theta.0,
                weights: weights.0,
            },
            &[patches.0, theta.0, weights.0],
        ))
    }

    // ------------------------------------------------------------------
    // Reverse sweep
    // ------------------------------------------------------------------

    /// Populates gradients of every `requires_grad` leaf reachable from the
    /// scalar `loss`. Gradients of intermediate nodes are released after use.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            let contributions = self.input_grads(id, &op, &g);
            self.nodes[id].op = op;
            for (input, contrib) in contributions {
                self.accumulate(input, contrib);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: usize, contrib: Vec<T>) {
        let node = &mut self.nodes[id];
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contrib),
        }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn input_grads(&self, id: usize, op: &Op, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let mut out = Vec::new();
        let y = self.val(id).data();
        match *op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let geom = self
                    .conv_geom(input, kernel, stride, padding)
                    .expect("validated in forward");
                let n = self.val(input).shape()[0];
                let f = self.val(kernel).shape()[0];
                let x = self.val(input).data();
                let k = self.val(kernel).data();
                let in_len = geom.c * geom.h * geom.w;
                let out_len = f * geom.cols();
                let mut cols = vec![T::zero(); geom.rows() * geom.cols()];
                let mut dk = self.rg(kernel).then(|| vec![T::zero(); k.len()]);
                let mut dx = self.rg(input).then(|| vec![T::zero(); x.len()]);
                for s in 0..n {
                    let gs = &g[s * out_len..(s + 1) * out_len];
                    if let Some(dk) = dk.as_mut() {
                        kernels::im2col(&x[s * in_len..(s + 1) * in_len], &geom, &mut cols);
                        kernels::matmul(f, geom.cols(), geom.rows(), gs, false, &cols, true, dk, T::one());
                    }
                    if let Some(dx) = dx.as_mut() {
                        kernels::matmul(geom.rows(), f, geom.cols(), k, true, gs, false, &mut cols, T::zero());
                        kernels::col2im(&cols, &geom, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                }
                if let Some(dk) = dk {
                    out.push((kernel, dk));
                }
                if let Some(dx) = dx {
                    out.push((input, dx));
                }
            }
            Op::ChannelBias { input, bias } => {
                let xs = self.val(input).shape();
                let (c, plane) = (xs[1], xs[2] * xs[3]);
                if self.rg(bias) {
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        db[i % c] += chunk.iter().copied().sum::<T>();
                    }
                    out.push((bias, db));
                }
                if self.rg(input) {
                    out.push((input, g.to_vec()));
                }
            }
            Op::MaxPool { input, ref argmax } => {
                if self.rg(input) {
                    let mut dx = vec![T::zero(); self.val(input).numel()];
                    for (&a, &gv) in argmax.iter().zip(g) {
                        dx[a as usize] += gv;
                    }
                    out.push((input, dx));
                }
            }
            Op::Upsample2x { input } => {
                if self.rg(input) {
                    let xs = self.val(input).shape();
                    let (h, w) = (xs[2], xs[3]);
                    let mut dx = vec![T::zero(); self.val(input).numel()];
                    for p in 0..xs[0] * xs[1] {
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[p * h * w + (yy / 2) * w + xx / 2] += g[p * 4 * h * w + yy * 2 * w + xx];
                            }
                        }
                    }
                    out.push((input, dx));
                }
            }
            Op::PadReplicate { input, pad } => {
                if self.rg(input) {
                    let xs = self.val(input).shape();
                    let (h, w) = (xs[2], xs[3]);
                    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                    let mut dx = vec![T::zero(); self.val(input).numel()];
                    for p in 0..xs[0] * xs[1] {
                        for yy in 0..hp {
                            let sy = yy.saturating_sub(pad).min(h - 1);
                            for xx in 0..wp {
                                let sx = xx.saturating_sub(pad).min(w - 1);
                                dx[p * h * w + sy * w + sx] += g[p * hp * wp + yy * wp + xx];
                            }
                        }
                    }
                    out.push((input, dx));
                }
            }
            Op::Unary { input, kind } => {
                let x = self.val(input).data();
                let two = T::lit(2.0);
                let dx: Vec<T> = (0..g.len())
                    .map(|i| {
                        let (gi, xi, yi) = (g[i], x[i], y[i]);
                        match kind {
                            Unary::Clamp { lo, hi } => {
                                if xi >= T::lit(lo) && xi <= T::lit(hi) {
                                    gi
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Sigmoid => gi * yi * (T::one() - yi),
                            Unary::Tanh => gi * (T::one() - yi * yi),
                            Unary::Exp => gi * yi,
                            Unary::Relu => {
                                if xi > T::zero() {
                                    gi
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Log => gi / xi,
                            Unary::Sqrt => gi / (two * yi),
                            Unary::Square => gi * two * xi,
                            Unary::Neg => -gi,
                        }
                    })
                    .collect();
                out.push((input, dx));
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let xs = self.val(input).shape();
                let (n, d) = (xs[0], xs[1]);
                let e = self.val(weight).shape()[1];
                if self.rg(input) {
                    let mut dx = vec![T::zero(); n * d];
                    kernels::matmul(n, e, d, g, false, self.val(weight).data(), true, &mut dx, T::zero());
                    out.push((input, dx));
                }
                if self.rg(weight) {
                    let mut dw = vec![T::zero(); d * e];
                    kernels::matmul(d, n, e, self.val(input).data(), true, g, false, &mut dw, T::zero());
                    out.push((weight, dw));
                }
                if self.rg(bias) {
                    let mut db = vec![T::zero(); e];
                    for row in g.chunks(e) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    out.push((bias, db));
                }
            }
            Op::Binary { a, b, kind } => {
                let av = self.val(a).data();
                let bv = self.val(b).data();
                if self.rg(a) {
                    let da: Vec<T> = (0..g.len())
                        .map(|i| match kind {
                            Binary::Add | Binary::Sub => g[i],
                            Binary::Mul => g[i] * bv[i],
                            Binary::Div => g[i] / bv[i],
                            Binary::Min => {
                                if av[i] <= bv[i] {
                                    g[i]
                                } else {
                                    T::zero()
                                }
                            }
                        })
                        .collect();
                    out.push((a, da));
                }
                if self.rg(b) {
                    let db: Vec<T> = (0..g.len())
                        .map(|i| match kind {
                            Binary::Add => g[i],
                            Binary::Sub => -g[i],
                            Binary::Mul => g[i] * av[i],
                            Binary::Div => -g[i] * av[i] / (bv[i] * bv[i]),
                            Binary::Min => {
                                if av[i] <= bv[i] {
                                    T::zero()
                                } else {
                                    g[i]
                                }
                            }
                        })
                        .collect();
                    out.push((b, db));
                }
            }
            Op::Scale { input, factor } => {
                let f = T::lit(factor);
                out.push((input, g.iter().map(|&v| v * f).collect()));
            }
            Op::Offset { input } | Op::Reshape { input } => {
                out.push((input, g.to_vec()));
            }
            Op::Sum { input } => {
                out.push((input, vec![g[0]; self.val(input).numel()]));
            }
            Op::Mean { input } => {
                let n = self.val(input).numel();
                out.push((input, vec![g[0] / T::lit(n.max(1) as f64); n]));
            }
            Op::SumLast { input } => {
                let d = *self.val(input).shape().last().expect("rank >= 1");
                out.push((input, g.iter().flat_map(|&v| std::iter::repeat_n(v, d)).collect()));
            }
            Op::Channel { input, channel } => {
                let xs = self.val(input).shape();
                let plane = xs[2] * xs[3];
                let mut dx = vec![T::zero(); self.val(input).numel()];
                for n in 0..xs[0] {
                    let base = (n * xs[1] + channel) * plane;
                    dx[base..base + plane].copy_from_slice(&g[n * plane..(n + 1) * plane]);
                }
                out.push((input, dx));
            }
            Op::Affine { sx, tx, sy, ty } => {
                for (src, col) in [(sx, 0), (tx, 2), (sy, 4), (ty, 5)] {
                    if self.rg(src) {
                        out.push((src, g.chunks(6).map(|r| r[col]).collect()));
                    }
                }
            }
            Op::Sample { src, theta } => {
                let ss = self.val(src).shape();
                let (b, c, h, w) = (ss[0], ss[1], ss[2], ss[3]);
                let os = self.val(id).shape();
                let (m, oh, ow) = (os[0], os[2], os[3]);
                let per = m / b;
                let sd = self.val(src).data();
                let td = self.val(theta).data();
                let olen = c * oh * ow;
                let mut dsrc = self.rg(src).then(|| vec![T::zero(); sd.len()]);
                let mut dth = self.rg(theta).then(|| vec![T::zero(); td.len()]);
                for i in 0..m {
                    let img = i / per;
                    let range = img * c * h * w..(img + 1) * c * h * w;
                    let planes = Planes {
                        data: &sd[range.clone()],
                        c,
                        h,
                        w,
                    };
                    kernels::warp_backward(
                        planes,
                        &td[i * 6..i * 6 + 6],
                        &g[i * olen..(i + 1) * olen],
                        oh,
                        ow,
                        T::one(),
                        Region::full(oh, ow),
                        dsrc.as_mut().map(|d| &mut d[range]),
                        dth.as_mut().map(|d| &mut d[i * 6..i * 6 + 6]),
                    );
                }
                if let Some(d) = dsrc {
                    out.push((src, d));
                }
                if let Some(d) = dth {
                    out.push((theta, d));
                }
            }
            Op::Stitch {
                patches,
                theta,
                weights,
            } => {
                let ps = self.val(patches).shape();
                let (m, c, h, w) = (ps[0], ps[1], ps[2], ps[3]);
                let os = self.val(id).shape();
                let (images, ch, cw) = (os[0], os[2], os[3]);
                let per = m / images;
                let pd = self.val(patches).data();
                let td = self.val(theta).data();
                let wd = self.val(weights).data();
                let clen = c * ch * cw;
                let plen = c * h * w;
                let mut dp = self.rg(patches).then(|| vec![T::zero(); pd.len()]);
                let mut dth = self.rg(theta).then(|| vec![T::zero(); td.len()]);
                let mut dw = vec![T::zero(); m];
                for i in 0..m {
                    let img = i / per;
                    let th = &td[i * 6..i * 6 + 6];
                    let region = kernels::warp_region(th, h, w, ch, cw);
                    let planes = Planes {
                        data: &pd[i * plen..(i + 1) * plen],
                        c,
                        h,
                        w,
                    };
                    dw[i] = kernels::warp_backward(
                        planes,
                        th,
                        &g[img * clen..(img + 1) * clen],
                        ch,
                        cw,
                        wd[i],
                        region,
                        dp.as_mut().map(|d| &mut d[i * plen..(i + 1) * plen]),
                        dth.as_mut().map(|d| &mut d[i * 6..i * 6 + 6]),
                    );
                }
                if let Some(d) = dp {
                    out.push((patches, d));
                }
                if let Some(d) = dth {
                    out.push((theta, d));
                }
                if self.rg(weights) {
                    out.push((weights, dw));
                }
            }
        }
        out.retain(|(i, _)| self.nodes[*i].requires_grad);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64));
        let k = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_all_ones_window_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 4, 4]));
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_shape_law_and_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 32, 32]));
        let k = g.constant(Tensor::zeros(&[8, 1, 3, 3]));
        let y = g.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 32, 32]);
        let bad = g.constant(Tensor::zeros(&[8, 2, 3, 3]));
        assert!(matches!(g.conv2d(x, bad, 1, 1), Err(Error::Shape(_))));
        let huge = g.constant(Tensor::zeros(&[1, 1, 40, 3]));
        assert!(g.conv2d(x, huge, 1, 1).is_err());
        assert!(g.conv2d(x, k, 0, 1).is_err());
    }

    #[test]
    fn strided_conv_output_size() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[2, 1, 7, 6]));
        let k = g.constant(Tensor::ones(&[3, 1, 3, 3]));
        let y = g.conv2d(x, k, 2, 1).unwrap();
        // (7 + 2 - 3)/2 + 1 = 4, (6 + 2 - 3)/2 + 1 = 3
        assert_eq!(g.shape(y), &[2, 3, 4, 3]);
    }

    #[test]
    fn maxpool_forward_and_argmax_routing() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2d(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[1, 1, 2, 2], 7.0));
        let y = g.maxpool2d(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
        let odd = g.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(g.maxpool2d(odd, 2).is_err());
    }

    #[test]
    fn upsample_forward_and_block_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.upsample2x(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0; 4]);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
        let z = g.constant(Tensor::zeros(&[1, 4, 8, 8]));
        let u = g.upsample2x(z).unwrap();
        assert_eq!(g.shape(u), &[1, 4, 16, 16]);
    }

    #[test]
    fn activations_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[0.0]));
        let s = g.activation(x, Activation::Sigmoid).unwrap();
        let th = g.activation(x, Activation::Tanh).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        assert_eq!(g.value(th).data(), &[0.0]);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert!((g.grad(x).unwrap()[0] - 0.25).abs() < 1e-15);
        let neg = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(neg), Err(Error::Domain(_))));
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[2], vec![-1e6, 1e6]).unwrap());
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.0, 1.0]);
    }

    #[test]
    fn dense_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);

        let id = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zb = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.dense(x, id, zb).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let zero = g.constant(t(&[3, 2], &[0.0; 6]));
        let bias = g.constant(t(&[2], &[0.5, -1.0]));
        let y = g.dense(zero, id, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
        assert!(g.dense(x, w, zb).is_err());
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let m = g.mean(x);
        assert_eq!(g.value(m).item().unwrap(), 2.0);

        let a = g.param(t(&[2], &[1.0, 5.0]));
        let b = g.param(t(&[2], &[3.0, 2.0]));
        let mn = g.min_pairwise(a, b).unwrap();
        assert_eq!(g.value(mn).data(), &[1.0, 2.0]);
        let l = g.sum(mn);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 0.0]);
        assert_eq!(g.grad(b).unwrap(), &[0.0, 1.0]);

        let c = g.constant(t(&[3], &[0.0; 3]));
        assert!(g.min_pairwise(a, c).is_err());
    }

    #[test]
    fn min_ties_route_to_first_argument() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[1], &[2.0]));
        let b = g.param(t(&[1], &[2.0]));
        let mn = g.min_pairwise(a, b).unwrap();
        let l = g.sum(mn);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0]);
        assert_eq!(g.grad(b).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[3.0]));
        let sq = g.square(x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[3.0]));
        let y = g.add(x, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);

        let v = g.constant(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn fan_out_sums_path_gradients() {
        // z = x*y + exp(x), dz/dx = y + exp(x), dz/dy = x
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[0.7]));
        let y = g.param(t(&[1], &[-1.3]));
        let xy = g.mul(x, y).unwrap();
        let ex = g.exp(x).unwrap();
        let z = g.add(xy, ex).unwrap();
        let l = g.sum(z);
        g.backward(l).unwrap();
        assert!((g.grad(x).unwrap()[0] - (-1.3 + 0.7f64.exp())).abs() < 1e-14);
        assert!((g.grad(y).unwrap()[0] - 0.7).abs() < 1e-14);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let p = g.param(t(&[2], &[3.0, 4.0]));
        let y = g.mul(c, p).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn sample_identity_reproduces_source() {
        let mut g = Graph::<f64>::new();
        let src = g.constant(Tensor::from_fn(&[1, 2, 5, 7], |i| (i as f64 * 0.3).sin()));
        let th = g.constant(t(&[1, 6], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let out = g.affine_sample(src, th, 5, 7).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(src)) < 1e-12);
    }

    #[test]
    fn sample_groups_map_to_images() {
        let mut g = Graph::<f64>::new();
        let mut data = vec![1.0; 16];
        data.extend(vec![2.0; 16]);
        let src = g.constant(t(&[2, 1, 4, 4], &data));
        let rows: Vec<f64> = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0].repeat(4);
        let th = g.constant(t(&[4, 6], &rows));
        let out = g.affine_sample(src, th, 2, 2).unwrap();
        let v = g.value(out).data();
        assert!(v[..8].iter().all(|&x| x == 1.0));
        assert!(v[8..].iter().all(|&x| x == 2.0));
    }

    #[test]
    fn stitch_zero_weights_give_zero_canvas() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::ones(&[3, 1, 4, 4]));
        let th = g.constant(t(&[3, 6], &[2.0, 0.0, 0.1, 0.0, 2.0, -0.3].repeat(3)));
        let w = g.constant(Tensor::zeros(&[3]));
        let c = g.stitch(p, th, w, 1, 16, 16).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }
}
