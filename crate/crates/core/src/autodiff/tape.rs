use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

use super::kernels::{self, ConvGeom};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of `add`/`mul` is expanded to the left operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// `(B,C,1,1)` against `(B,C,H,W)`.
    PerChannel,
    /// `(B,1,H,W)` against `(B,C,H,W)`.
    PerPixel,
    /// `(1,1,1,1)` against anything.
    Scalar,
}

impl Broadcast {
    fn resolve(op: &'static str, a: Shape, b: Shape) -> Result<Self> {
        let [ab, ac, ah, aw] = a.0;
        if a == b {
            Ok(Broadcast::Same)
        } else if b == Shape::scalar() {
            Ok(Broadcast::Scalar)
        } else if b == Shape::new(ab, ac, 1, 1) {
            Ok(Broadcast::PerChannel)
        } else if b == Shape::new(ab, 1, ah, aw) {
            Ok(Broadcast::PerPixel)
        } else {
            let dim = if a.b() != b.b() {
                "B"
            } else if a.c() != b.c() {
                "C"
            } else if a.h() != b.h() {
                "H"
            } else {
                "W"
            };
            Err(Error::shape(op, dim, format!("cannot combine {a} with {b}")))
        }
    }

    #[inline]
    fn index(self, a: Shape, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::PerChannel => i / a.plane(),
            Broadcast::PerPixel => {
                let plane = a.plane();
                (i / (plane * a.c())) * plane + i % plane
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    SoftmaxLast {
        x: Var,
    },
    GlobalAvg {
        x: Var,
    },
    GlobalMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelMean {
        x: Var,
    },
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    LayerNorm {
        x: Var,
        w: Var,
        b: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    PadReflect {
        x: Var,
        pad: usize,
    },
    SumAll {
        x: Var,
    },
    Bce {
        z: Var,
        target: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Branches taken by the non-smooth ops of one forward pass, in execution
/// order: ReLU masks and max selections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pattern {
    relu: Vec<Vec<bool>>,
    argmax: Vec<Vec<usize>>,
}

enum PatternMode {
    Off,
    Record(Pattern),
    Replay { pattern: Pattern, relu: usize, argmax: usize },
}

/// Ordered record of executed operations. Each forward pass builds a fresh
/// tape; [`Tape::backward`] replays the adjoints in reverse order.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    pattern: PatternMode,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Shape>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            pattern: PatternMode::Off,
        }
    }

    /// A tape that remembers every ReLU mask and max selection.
    pub fn recording() -> Self {
        Tape {
            nodes: Vec::new(),
            pattern: PatternMode::Record(Pattern::default()),
        }
    }

    /// A tape whose ReLUs and maxima follow `pattern` instead of their
    /// inputs, evaluating the smooth piece active where it was recorded.
    /// Meant for forward evaluation; the graph must match the recorded one.
    pub fn replaying(pattern: Pattern) -> Self {
        Tape {
            nodes: Vec::new(),
            pattern: PatternMode::Replay {
                pattern,
                relu: 0,
                argmax: 0,
            },
        }
    }

    pub fn take_pattern(&mut self) -> Option<Pattern> {
        match std::mem::replace(&mut self.pattern, PatternMode::Off) {
            PatternMode::Record(p) => Some(p),
            _ => None,
        }
    }

    fn relu_mask(&mut self, computed: impl FnOnce() -> Vec<bool>) -> Vec<bool> {
        match &mut self.pattern {
            PatternMode::Off => computed(),
            PatternMode::Record(p) => {
                let m = computed();
                p.relu.push(m.clone());
                m
            }
            PatternMode::Replay { pattern, relu, .. } => {
                let m = pattern.relu.get(*relu).expect("replayed graph has more ReLUs than recorded").clone();
                *relu += 1;
                m
            }
        }
    }

    fn selection(&mut self, computed: Vec<usize>) -> Vec<usize> {
        match &mut self.pattern {
            PatternMode::Off => computed,
            PatternMode::Record(p) => {
                p.argmax.push(computed.clone());
                computed
            }
            PatternMode::Replay { pattern, argmax, .. } => {
                let a = pattern.argmax.get(*argmax).expect("replayed graph has more maxima than recorded").clone();
                assert_eq!(a.len(), computed.len(), "replayed selection has a different size");
                *argmax += 1;
                a
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Record a leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Record a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let value = kernels::conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.rg(&ins);
        Ok(self.push(value, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bc = Broadcast::resolve("add", sa, sb)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = av
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[bc.index(sa, i)])
            .collect();
        let value = Tensor::from_vec(sa, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b, bc }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bc = Broadcast::resolve("mul", sa, sb)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = av
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[bc.index(sa, i)])
            .collect();
        let value = Tensor::from_vec(sa, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b, bc }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::lit(factor);
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = if matches!(self.pattern, PatternMode::Off) {
            // NaN passes through so numerical failures stay visible downstream
            self.value(x).map(|v| if v <= T::zero() { T::zero() } else { v })
        } else {
            let xv = self.value(x).clone();
            let mask = self.relu_mask(|| xv.data().iter().map(|&v| !(v <= T::zero())).collect());
            assert_eq!(mask.len(), xv.numel(), "replayed ReLU mask has a different size");
            let data = xv.data().iter().zip(&mask).map(|(&v, &m)| if m { v } else { T::zero() }).collect();
            Tensor::from_vec(xv.shape(), data).expect("relu shape")
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid_scalar);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    /// Softmax along the width axis, treating every other index as a row.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.w() == 0 {
            return Err(Error::shape("softmax", "W", "rows are empty"));
        }
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_exact_mut(s.w()) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            let inv = T::one() / total;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SoftmaxLast { x }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let plane = s.plane();
        if plane == 0 {
            return Err(Error::shape("global_avg_pool", "H*W", "empty spatial plane"));
        }
        let inv = T::lit(1.0 / plane as f64);
        let data = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|p| {
                let mut acc = T::zero();
                for &v in p {
                    acc += v;
                }
                acc * inv
            })
            .collect();
        let value = Tensor::from_vec(Shape::new(s.b(), s.c(), 1, 1), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalAvg { x }, rg))
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let plane = s.plane();
        if plane == 0 {
            return Err(Error::shape("global_max_pool", "H*W", "empty spatial plane"));
        }
        let mut argmax = Vec::with_capacity(s.b() * s.c());
        for (pi, p) in self.value(x).data().chunks_exact(plane).enumerate() {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            argmax.push(pi * plane + best);
        }
        let argmax = self.selection(argmax);
        let xv = self.value(x).data();
        let data = argmax.iter().map(|&i| xv[i]).collect();
        let value = Tensor::from_vec(Shape::new(s.b(), s.c(), 1, 1), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalMax { x, argmax }, rg))
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.c() == 0 {
            return Err(Error::shape("channel_mean", "C", "no channels"));
        }
        let (plane, c) = (s.plane(), s.c());
        let inv = T::lit(1.0 / c as f64);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); s.b() * plane];
        for b in 0..s.b() {
            let out = &mut data[b * plane..(b + 1) * plane];
            for ci in 0..c {
                let src = &xv[(b * c + ci) * plane..(b * c + ci + 1) * plane];
                for (o, &v) in out.iter_mut().zip(src) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::from_vec(Shape::new(s.b(), 1, s.h(), s.w()), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ChannelMean { x }, rg))
    }

    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.c() == 0 {
            return Err(Error::shape("channel_max", "C", "no channels"));
        }
        let (plane, c) = (s.plane(), s.c());
        let xv = self.value(x).data();
        let mut argmax = Vec::with_capacity(s.b() * plane);
        for b in 0..s.b() {
            for p in 0..plane {
                let mut best = (b * c) * plane + p;
                for ci in 1..c {
                    let idx = (b * c + ci) * plane + p;
                    if xv[idx] > xv[best] {
                        best = idx;
                    }
                }
                argmax.push(best);
            }
        }
        let argmax = self.selection(argmax);
        let xv = self.value(x).data();
        let data = argmax.iter().map(|&i| xv[i]).collect();
        let value = Tensor::from_vec(Shape::new(s.b(), 1, s.h(), s.w()), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ChannelMax { x, argmax }, rg))
    }

    /// Bilinear resize with half-pixel centers (align_corners = false).
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_upsample", "H/W", "output size must be >= 1"));
        }
        if s.h() == 0 || s.w() == 0 {
            return Err(Error::shape("bilinear_upsample", "H/W", "empty input plane"));
        }
        let out_shape = Shape::new(s.b(), s.c(), out_h, out_w);
        let value = if (out_h, out_w) == (s.h(), s.w()) {
            self.value(x).clone()
        } else {
            let ty = kernels::linear_taps(s.h(), out_h);
            let tx = kernels::linear_taps(s.w(), out_w);
            let xv = self.value(x).data();
            let mut data = Vec::with_capacity(out_shape.numel());
            for plane in xv.chunks_exact(s.plane()) {
                for &(y0, y1, ly) in &ty {
                    let ly = T::lit(ly);
                    for &(x0, x1, lx) in &tx {
                        let lx = T::lit(lx);
                        let top = plane[y0 * s.w() + x0] * (T::one() - lx) + plane[y0 * s.w() + x1] * lx;
                        let bot = plane[y1 * s.w() + x0] * (T::one() - lx) + plane[y1 * s.w() + x1] * lx;
                        data.push(top * (T::one() - ly) + bot * ly);
                    }
                }
            }
            Tensor::from_vec(out_shape, data)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample { x }, rg))
    }

    /// `(B,G,M,K) x (B,G,K,N) -> (B,G,M,N)`.
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.b() != sb.b() {
            return Err(Error::shape("batched_matmul", "B", format!("{sa} vs {sb}")));
        }
        if sa.c() != sb.c() {
            return Err(Error::shape("batched_matmul", "G", format!("{sa} vs {sb}")));
        }
        if sa.w() != sb.h() {
            return Err(Error::shape(
                "batched_matmul",
                "K",
                format!("inner dimensions differ: {sa} x {sb}"),
            ));
        }
        let (m, k, n) = (sa.h(), sa.w(), sb.w());
        let out_shape = Shape::new(sa.b(), sa.c(), m, n);
        let mut out = Tensor::zeros(out_shape);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for (i, dst) in out.data_mut().chunks_exact_mut((m * n).max(1)).enumerate().take(sa.b() * sa.c()) {
            T::gemm(
                m,
                k,
                n,
                &av[i * m * k..],
                k as isize,
                1,
                &bv[i * k * n..],
                n as isize,
                1,
                T::zero(),
                dst,
                n as isize,
                1,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Matmul { a, b }, rg))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let value = transpose_planes(self.value(x), s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Transpose { x }, rg)
    }

    /// Reinterpret the row-major buffer under a new shape.
    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "C", "nothing to concatenate"))?;
        let s0 = self.shape(first);
        let mut c_total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.b() != s0.b() {
                return Err(Error::shape("concat_channels", "B", format!("{s0} vs {s}")));
            }
            if s.h() != s0.h() {
                return Err(Error::shape("concat_channels", "H", format!("{s0} vs {s}")));
            }
            if s.w() != s0.w() {
                return Err(Error::shape("concat_channels", "W", format!("{s0} vs {s}")));
            }
            c_total += s.c();
        }
        let out_shape = Shape::new(s0.b(), c_total, s0.h(), s0.w());
        let mut data = Vec::with_capacity(out_shape.numel());
        for b in 0..s0.b() {
            for &v in xs {
                let t = self.value(v);
                let per = t.shape().c() * t.shape().plane();
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let value = Tensor::from_vec(out_shape, data)?;
        let rg = self.rg(xs);
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }, rg))
    }

    /// Layer normalization across channels at every pixel, with a per-channel
    /// affine `(1,C,1,1)` weight and bias.
    pub fn layer_norm_channels(&mut self, x: Var, w: Var, b: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        let affine = Shape::new(1, s.c(), 1, 1);
        for (v, name) in [(w, "weight"), (b, "bias")] {
            if self.shape(v) != affine {
                return Err(Error::shape(
                    "layer_norm",
                    "C",
                    format!("{name} {} does not match {affine}", self.shape(v)),
                ));
            }
        }
        let (c, plane) = (s.c(), s.plane());
        let eps = T::lit(eps);
        let inv_c = T::lit(1.0 / c as f64);
        let xv = self.value(x).data();
        let (wv, bv) = (self.value(w).data(), self.value(b).data());
        let mut xhat = vec![T::zero(); s.numel()];
        let mut inv_std = vec![T::zero(); s.b() * plane];
        let mut out = vec![T::zero(); s.numel()];
        for bi in 0..s.b() {
            for p in 0..plane {
                let idx = |ci: usize| (bi * c + ci) * plane + p;
                let mut mean = T::zero();
                for ci in 0..c {
                    mean += xv[idx(ci)];
                }
                mean *= inv_c;
                let mut var = T::zero();
                for ci in 0..c {
                    let d = xv[idx(ci)] - mean;
                    var += d * d;
                }
                let is = T::one() / (var * inv_c + eps).sqrt();
                inv_std[bi * plane + p] = is;
                for ci in 0..c {
                    let xh = (xv[idx(ci)] - mean) * is;
                    xhat[idx(ci)] = xh;
                    out[idx(ci)] = xh * wv[ci] + bv[ci];
                }
            }
        }
        let value = Tensor::from_vec(s, out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                w,
                b,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Reflection padding on both spatial axes.
    pub fn pad_reflect(&mut self, x: Var, pad: usize) -> Var {
        let s = self.shape(x);
        let (oh, ow) = (s.h() + 2 * pad, s.w() + 2 * pad);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(s.b() * s.c() * oh * ow);
        for plane in xv.chunks_exact(s.plane().max(1)).take(s.b() * s.c()) {
            for y in 0..oh {
                let sy = kernels::reflect_index(y as isize - pad as isize, s.h());
                for xx in 0..ow {
                    let sx = kernels::reflect_index(xx as isize - pad as isize, s.w());
                    data.push(plane[sy * s.w() + sx]);
                }
            }
        }
        let value = Tensor::from_vec(Shape::new(s.b(), s.c(), oh, ow), data).expect("pad shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::PadReflect { x, pad }, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(acc), Op::SumAll { x }, rg)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a `{0,1}`
    /// target, with probabilities clamped to `[eps, 1 - eps]`. The adjoint
    /// with respect to the logits is `(sigmoid(z) - t) / count`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        let s = self.shape(logits);
        if target.shape() != s {
            return Err(Error::shape(
                "bce_loss",
                "shape",
                format!("logits {s} vs target {}", target.shape()),
            ));
        }
        if let Some(bad) = target.data().iter().find(|&&t| t != T::zero() && t != T::one()) {
            return Err(Error::Validation(format!("bce target must be binary, found {bad}")));
        }
        let hi = -eps.ln();
        let lo = -(1.0 - eps).ln();
        let mut total = 0.0f64;
        for (&z, &t) in self.value(logits).data().iter().zip(target.data()) {
            let z = z.as_f64();
            // -ln(sigmoid(z)) = softplus(-z), -ln(1 - sigmoid(z)) = softplus(z)
            let nlp = softplus(-z).clamp(lo, hi);
            let nlq = softplus(z).clamp(lo, hi);
            total += if t == T::one() { nlp } else { nlq };
        }
        let loss = T::lit(total / s.numel().max(1) as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                z: logits,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(i, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn adjoint(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let want = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let cg = kernels::conv_backward(self.value(*x), self.value(*w), g, out.shape(), *geom, want);
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b, bc } => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    let sa = self.shape(*a);
                    let mut db = vec![T::zero(); self.value(*b).numel()];
                    for (k, &gv) in g.iter().enumerate() {
                        db[bc.index(sa, k)] += gv;
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul { a, b, bc } => {
                let sa = self.shape(*a);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let da = g.iter().enumerate().map(|(k, &gv)| gv * bv[bc.index(sa, k)]).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for (k, (&gv, &x)) in g.iter().zip(av).enumerate() {
                        db[bc.index(sa, k)] += gv * x;
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale { x, factor } => {
                let dx = g.iter().map(|&gv| gv * *factor).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = g
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxLast { x } => {
                let w = out.shape().w();
                let mut dx = vec![T::zero(); g.len()];
                for ((drow, grow), yrow) in dx.chunks_exact_mut(w).zip(g.chunks_exact(w)).zip(out.data().chunks_exact(w)) {
                    let mut dot = T::zero();
                    for (&gv, &y) in grow.iter().zip(yrow) {
                        dot += gv * y;
                    }
                    for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = y * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvg { x } => {
                let plane = self.shape(*x).plane();
                let inv = T::lit(1.0 / plane as f64);
                let mut dx = Vec::with_capacity(plane * g.len());
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv * inv, plane));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalMax { x, argmax } | Op::ChannelMax { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&gv, &idx) in g.iter().zip(argmax) {
                    dx[idx] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ChannelMean { x } => {
                let s = self.shape(*x);
                let (c, plane) = (s.c(), s.plane());
                let inv = T::lit(1.0 / c as f64);
                let mut dx = vec![T::zero(); s.numel()];
                for b in 0..s.b() {
                    let gb = &g[b * plane..(b + 1) * plane];
                    for ci in 0..c {
                        let dst = &mut dx[(b * c + ci) * plane..(b * c + ci + 1) * plane];
                        for (d, &gv) in dst.iter_mut().zip(gb) {
                            *d = gv * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample { x } => {
                let s = self.shape(*x);
                let os = out.shape();
                if (os.h(), os.w()) == (s.h(), s.w()) {
                    self.accumulate(grads, *x, g.to_vec());
                    return;
                }
                let ty = kernels::linear_taps(s.h(), os.h());
                let tx = kernels::linear_taps(s.w(), os.w());
                let mut dx = vec![T::zero(); s.numel()];
                for (dplane, gplane) in dx.chunks_exact_mut(s.plane()).zip(g.chunks_exact(os.plane())) {
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        let ly = T::lit(ly);
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let lx = T::lit(lx);
                            let gv = gplane[oy * os.w() + ox];
                            let top = gv * (T::one() - ly);
                            let bot = gv * ly;
                            dplane[y0 * s.w() + x0] += top * (T::one() - lx);
                            dplane[y0 * s.w() + x1] += top * lx;
                            dplane[y1 * s.w() + x0] += bot * (T::one() - lx);
                            dplane[y1 * s.w() + x1] += bot * lx;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa.h(), sa.w(), sb.w());
                let batches = sa.b() * sa.c();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) && m * k > 0 {
                    // dA = dC * B^T
                    let mut da = vec![T::zero(); av.len()];
                    for bi in 0..batches {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            n as isize,
                            1,
                            &bv[bi * k * n..],
                            1,
                            n as isize,
                            T::zero(),
                            &mut da[bi * m * k..],
                            k as isize,
                            1,
                        );
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) && k * n > 0 {
                    // dB = A^T * dC
                    let mut db = vec![T::zero(); bv.len()];
                    for bi in 0..batches {
                        T::gemm(
                            k,
                            m,
                            n,
                            &av[bi * m * k..],
                            1,
                            k as isize,
                            &g[bi * m * n..],
                            n as isize,
                            1,
                            T::zero(),
                            &mut db[bi * k * n..],
                            n as isize,
                            1,
                        );
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose { x } => {
                let gt = Tensor::from_vec(out.shape(), g.to_vec()).expect("grad shape");
                let dx = transpose_planes(&gt, out.shape()).into_vec();
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::Concat { xs } => {
                let s = out.shape();
                let per_total = s.c() * s.plane();
                let mut offset = 0;
                for &v in xs {
                    let per = self.shape(v).c() * s.plane();
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(per * s.b());
                        for b in 0..s.b() {
                            let start = b * per_total + offset;
                            dv.extend_from_slice(&g[start..start + per]);
                        }
                        self.accumulate(grads, v, dv);
                    }
                    offset += per;
                }
            }
            Op::LayerNorm {
                x,
                w,
                b,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let (c, plane) = (s.c(), s.plane());
                let wv = self.value(*w).data();
                let cf = T::lit(c as f64);
                let inv_c = T::lit(1.0 / c as f64);
                let mut dx = vec![T::zero(); s.numel()];
                let mut dw = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for bi in 0..s.b() {
                    for p in 0..plane {
                        let idx = |ci: usize| (bi * c + ci) * plane + p;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for ci in 0..c {
                            let gv = g[idx(ci)];
                            let xh = xhat[idx(ci)];
                            dw[ci] += gv * xh;
                            db[ci] += gv;
                            let dxh = gv * wv[ci];
                            s1 += dxh;
                            s2 += dxh * xh;
                        }
                        let is = inv_std[bi * plane + p];
                        for ci in 0..c {
                            let dxh = g[idx(ci)] * wv[ci];
                            dx[idx(ci)] = is * inv_c * (cf * dxh - s1 - xhat[idx(ci)] * s2);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::PadReflect { x, pad } => {
                let s = self.shape(*x);
                let os = out.shape();
                let mut dx = vec![T::zero(); s.numel()];
                for (dplane, gplane) in dx.chunks_exact_mut(s.plane()).zip(g.chunks_exact(os.plane())) {
                    for y in 0..os.h() {
                        let sy = kernels::reflect_index(y as isize - *pad as isize, s.h());
                        for xx in 0..os.w() {
                            let sx = kernels::reflect_index(xx as isize - *pad as isize, s.w());
                            dplane[sy * s.w() + sx] += gplane[y * os.w() + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumAll { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Bce { z, target } => {
                let zv = self.value(*z).data();
                let scale = g[0] / T::lit(zv.len().max(1) as f64);
                let dz = zv
                    .iter()
                    .zip(target.data())
                    .map(|(&zz, &t)| (sigmoid_scalar(zz) - t) * scale)
                    .collect();
                self.accumulate(grads, *z, dz);
            }
        }
    }
}

fn transpose_planes<T: Float>(t: &Tensor<T>, s: Shape) -> Tensor<T> {
    let (h, w) = (s.h(), s.w());
    let mut data = vec![T::zero(); s.numel()];
    if h * w > 0 {
        for (dst, src) in data.chunks_exact_mut(h * w).zip(t.data().chunks_exact(h * w)) {
            for r in 0..h {
                for c in 0..w {
                    dst[c * h + r] = src[r * w + c];
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(s.b(), s.c(), w, h), data).expect("transpose shape")
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Float>(v: T) -> T {
    let y = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    // keep the open interval (0, 1) under saturation
    let top = T::one() - T::epsilon() / T::lit(2.0);
    y.max(T::min_positive_value()).min(top)
}

fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}
