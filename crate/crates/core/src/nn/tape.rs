use super::{Grads, ParamId, ParamStore, Tensor};
use crate::resample::{linear_taps, Tap};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Convolution hyper-parameters; kernels are square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self { stride: 1, dilation, padding: dilation * (kernel - 1) / 2 }
    }

    pub fn strided(kernel: usize, stride: usize) -> Self {
        Self { stride, dilation: 1, padding: (kernel - 1) / 2 }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Add(Var, Var),
    ScaleConst(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    ScaleChannels(Var, Var),
    ScaleSpatial(Var, Var),
    ScaleScalar(Var, Var),
    Gap(Var),
    Linear { w: Var, x: Var },
    Conv1dSame { x: Var, w: Var },
    ChannelMean(Var),
    MinMaxNorm { x: Var, argmin: usize, argmax: usize, degenerate: bool },
    Upsample { x: Var, factor: usize },
    Concat(Var, Var),
    Reshape(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Bce { p: Var, target: Vec<f64> },
    WeightedSum { x: Var, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    pub params: Grads,
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Tape::input_with_grad`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements, matching the
    // strides given for row- or column-major views.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let mut cols = vec![0.0; g.patch() * hw];
    let (s, d, p) = (g.spec.stride as isize, g.spec.dilation as isize, g.spec.padding as isize);
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let out = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ky as isize * d;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize * d;
                        if ix >= 0 && ix < g.w as isize {
                            *v = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw = g.ho * g.wo;
    let (s, d, p) = (g.spec.stride as isize, g.spec.dilation as isize, g.spec.padding as isize);
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ky as isize * d;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s - p + kx as isize * d;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn upsample_plane(src: &[f64], dst: &mut [f64], wi: usize, ty: &[Tap], tx: &[Tap]) {
    let wo = tx.len();
    for (oy, a) in ty.iter().enumerate() {
        let r0 = &src[a.lo * wi..(a.lo + 1) * wi];
        let r1 = &src[a.hi * wi..(a.hi + 1) * wi];
        for (ox, b) in tx.iter().enumerate() {
            let top = (1.0 - b.w) * r0[b.lo] + b.w * r0[b.hi];
            let bot = (1.0 - b.w) * r1[b.lo] + b.w * r1[b.hi];
            dst[oy * wo + ox] = (1.0 - a.w) * top + a.w * bot;
        }
    }
}

fn upsample_plane_back(g: &[f64], dx: &mut [f64], wi: usize, ty: &[Tap], tx: &[Tap]) {
    let wo = tx.len();
    for (oy, a) in ty.iter().enumerate() {
        for (ox, b) in tx.iter().enumerate() {
            let v = g[oy * wo + ox];
            let (t, bt) = ((1.0 - a.w) * v, a.w * v);
            dx[a.lo * wi + b.lo] += (1.0 - b.w) * t;
            dx[a.lo * wi + b.hi] += b.w * t;
            dx[a.hi * wi + b.lo] += (1.0 - b.w) * bt;
            dx[a.hi * wi + b.hi] += b.w * bt;
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub const BCE_CLAMP: f64 = 1e-7;

fn acc<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|&p| self.req(p));
        self.push(value, op, rg)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// 2-D convolution of `(Ci, H, W)` by weights `(Co, Ci, K, K)` with optional bias `(Co)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let (cout, k) = match self.shape(w) {
            [co, ci, k1, k2] if *ci == cin && k1 == k2 => (*co, *k1),
            s => return Err(Error::Shape(format!("conv weight {s:?} does not fit input channels {cin}"))),
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::Shape(format!("conv bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let span = spec.dilation * (k - 1) + 1;
        if spec.stride == 0 || h + 2 * spec.padding < span || wd + 2 * spec.padding < span {
            return Err(Error::Shape(format!("conv kernel span {span} exceeds padded input {h}x{wd}")));
        }
        let ho = (h + 2 * spec.padding - span) / spec.stride + 1;
        let wo = (wd + 2 * spec.padding - span) / spec.stride + 1;
        let geom = ConvGeom { cin, h, w: wd, cout, k, spec, ho, wo };
        let hw = ho * wo;
        let mut out = vec![0.0; cout * hw];
        let xv = self.value(x).data();
        let owned;
        let cols: &[f64] = if geom.pointwise() {
            xv
        } else {
            owned = im2col(xv, &geom);
            &owned
        };
        gemm(cout, geom.patch(), hw, self.value(w).data(), false, cols, false, &mut out, 0.0);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (c, plane) in out.chunks_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v += bv[c]);
            }
        }
        let value = Tensor::new(vec![cout, ho, wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push_op(value, Op::Conv2d { x, w, b, geom }, &parents))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(value, Op::Add(a, b), &[a, b]))
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).expect("same size");
        self.push_op(value, Op::ScaleConst(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect()).expect("same size");
        self.push_op(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| sigmoid(v)).collect()).expect("same size");
        self.push_op(value, Op::Sigmoid(x), &[x])
    }

    /// `x (C, H, W) * g[c]`.
    pub fn scale_channels(&mut self, x: Var, g: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.shape(g) != [c] {
            return Err(Error::Shape(format!("channel gate {:?} for {c} channels", self.shape(g))));
        }
        let gv = self.value(g).data();
        let mut data = self.value(x).data().to_vec();
        for (ci, plane) in data.chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v *= gv[ci]);
        }
        let value = Tensor::new(vec![c, h, w], data)?;
        Ok(self.push_op(value, Op::ScaleChannels(x, g), &[x, g]))
    }

    /// `x (C, H, W) * s[h, w]` with `s` of shape `(H, W)` or `(1, H, W)`.
    pub fn scale_spatial(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.value(s).len() != h * w || !matches!(self.shape(s), [1, _, _] | [_, _]) {
            return Err(Error::Shape(format!("spatial map {:?} for {h}x{w} features", self.shape(s))));
        }
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for plane in data.chunks_mut(h * w) {
            plane.iter_mut().zip(sv).for_each(|(v, s)| *v *= s);
        }
        let value = Tensor::new(vec![c, h, w], data)?;
        Ok(self.push_op(value, Op::ScaleSpatial(x, s), &[x, s]))
    }

    /// `x * s` for a single-element `s`.
    pub fn scale_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!("scalar scale has shape {:?}", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * sv).collect())?;
        Ok(self.push_op(value, Op::ScaleScalar(x, s), &[x, s]))
    }

    /// Global average pool `(C, H, W) -> (C)`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let n = (h * w) as f64;
        let data = self.value(x).data().chunks(h * w).map(|p| p.iter().sum::<f64>() / n).collect();
        let value = Tensor::new(vec![c], data)?;
        Ok(self.push_op(value, Op::Gap(x), &[x]))
    }

    /// `W (O, I) · x (I)`.
    pub fn linear(&mut self, w: Var, x: Var) -> Result<Var> {
        let (o, i) = match self.shape(w) {
            [o, i] => (*o, *i),
            s => return Err(Error::Shape(format!("linear weight {s:?}"))),
        };
        if self.shape(x) != [i] {
            return Err(Error::Shape(format!("linear input {:?} for weight {o}x{i}", self.shape(x))));
        }
        let mut out = vec![0.0; o];
        gemm(o, i, 1, self.value(w).data(), false, self.value(x).data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![o], out)?;
        Ok(self.push_op(value, Op::Linear { w, x }, &[w, x]))
    }

    /// Zero-padded 1-D convolution with odd kernel `(K)` keeping length.
    pub fn conv1d_same(&mut self, x: Var, w: Var) -> Result<Var> {
        let n = match self.shape(x) {
            [n] => *n,
            s => return Err(Error::Shape(format!("conv1d input {s:?}"))),
        };
        let k = match self.shape(w) {
            [k] if k % 2 == 1 => *k,
            s => return Err(Error::Shape(format!("conv1d kernel {s:?} must be odd-length"))),
        };
        let r = k / 2;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let out = (0..n)
            .map(|i| {
                (0..k)
                    .filter_map(|j| (i + j).checked_sub(r).filter(|&t| t < n).map(|t| wv[j] * xv[t]))
                    .sum()
            })
            .collect();
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push_op(value, Op::Conv1dSame { x, w }, &[x, w]))
    }

    /// Mean over channels `(C, H, W) -> (1, H, W)`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let mut out = vec![0.0; h * w];
        for plane in self.value(x).data().chunks(h * w) {
            out.iter_mut().zip(plane).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= c as f64);
        let value = Tensor::new(vec![1, h, w], out)?;
        Ok(self.push_op(value, Op::ChannelMean(x), &[x]))
    }

    /// `(x - min) / (max - min)`; all ones when the input is constant.
    pub fn minmax_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (mut argmin, mut argmax) = (0, 0);
        for (i, &v) in t.data().iter().enumerate() {
            if v < t.data()[argmin] {
                argmin = i;
            }
            if v > t.data()[argmax] {
                argmax = i;
            }
        }
        let (lo, hi) = (t.data()[argmin], t.data()[argmax]);
        let degenerate = !(hi > lo);
        let data = if degenerate {
            vec![1.0; t.len()]
        } else {
            t.data().iter().map(|v| (v - lo) / (hi - lo)).collect()
        };
        let value = Tensor::new(t.shape().to_vec(), data).expect("same size");
        self.push_op(value, Op::MinMaxNorm { x, argmin, argmax, degenerate }, &[x])
    }

    /// Bilinear upsampling of `(C, H, W)` by an integer factor (half-pixel centres).
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if factor == 0 {
            return Err(Error::Shape("upsample factor must be >= 1".into()));
        }
        let (ty, tx) = (linear_taps(h, h * factor), linear_taps(w, w * factor));
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![0.0; c * ho * wo];
        for (src, dst) in self.value(x).data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            upsample_plane(src, dst, w, &ty, &tx);
        }
        let value = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push_op(value, Op::Upsample { x, factor }, &[x]))
    }

    /// Channel concatenation of two `(C, H, W)` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, h, w) = self.value(a).dims3()?;
        let (cb, hb, wb) = self.value(b).dims3()?;
        if (h, w) != (hb, wb) {
            return Err(Error::Shape(format!("concat spatial {h}x{w} vs {hb}x{wb}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ca + cb, h, w], data)?;
        Ok(self.push_op(value, Op::Concat(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push_op(value, Op::Reshape(x), &[x]))
    }

    /// `(m, k) x (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = match self.shape(a) {
            [m, n] => (*m, *n),
            s => return Err(Error::Shape(format!("transpose of {s:?}"))),
        };
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push_op(value, Op::Transpose(a), &[a]))
    }

    /// Row-wise softmax of an `(m, n)` matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let n = match self.shape(a) {
            [_, n] => *n,
            s => return Err(Error::Shape(format!("softmax of {s:?}"))),
        };
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push_op(value, Op::SoftmaxRows(a), &[a]))
    }

    /// Mean binary cross-entropy of probabilities against a binary target.
    pub fn bce(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(Error::Shape(format!("bce prediction {:?} vs target {:?}", self.shape(p), target.shape())));
        }
        if let Some(v) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Invalid(format!("bce target must be binary, found {v}")));
        }
        let n = target.len() as f64;
        let loss = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push_op(Tensor::scalar(loss), Op::Bce { p, target: target.data().to_vec() }, &[p]))
    }

    /// `Σ w_i x_i`, a scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::Shape("weighted_sum weight count".into()));
        }
        let s = self.value(x).data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push_op(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", self.shape(out))));
        }
        let mut params = Grads::zeros_like(self.params);
        let mut leaves: Vec<Option<Tensor>> = Vec::new();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.shape(out), 1.0));

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, node, &g, &mut grads, &mut params);
            if matches!(node.op, Op::Leaf) {
                if leaves.len() <= i {
                    leaves.resize_with(i + 1, || None);
                }
                leaves[i] = Some(g);
            }
        }
        Ok(Gradients { params, leaves })
    }

    fn backprop_node(&self, i: usize, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], params: &mut Grads) {
        let gv = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.tensors[id.0].add_assign(g),
            Op::Conv2d { x, w, b, geom } => {
                let hw = geom.ho * geom.wo;
                let xv = self.value(*x).data();
                let owned;
                let cols: &[f64] = if geom.pointwise() {
                    xv
                } else {
                    owned = im2col(xv, geom);
                    &owned
                };
                if self.req(*w) {
                    let gw = acc(grads, *w, self.shape(*w));
                    gemm(geom.cout, hw, geom.patch(), gv, false, cols, true, gw, 1.0);
                }
                if let Some(b) = b {
                    if self.req(*b) {
                        let gb = acc(grads, *b, &[geom.cout]);
                        for (c, plane) in gv.chunks(hw).enumerate() {
                            gb[c] += plane.iter().sum::<f64>();
                        }
                    }
                }
                if self.req(*x) {
                    let wv = self.value(*w).data();
                    let gx = acc(grads, *x, self.shape(*x));
                    if geom.pointwise() {
                        gemm(geom.patch(), geom.cout, hw, wv, true, gv, false, gx, 1.0);
                    } else {
                        let mut dcols = vec![0.0; geom.patch() * hw];
                        gemm(geom.patch(), geom.cout, hw, wv, true, gv, false, &mut dcols, 0.0);
                        col2im(&dcols, geom, gx);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.req(v) {
                        let ga = acc(grads, v, g.shape());
                        ga.iter_mut().zip(gv).for_each(|(o, g)| *o += g);
                    }
                }
            }
            Op::ScaleConst(x, c) => {
                let gx = acc(grads, *x, g.shape());
                gx.iter_mut().zip(gv).for_each(|(o, g)| *o += c * g);
            }
            Op::Relu(x) => {
                let gx = acc(grads, *x, g.shape());
                for ((o, g), y) in gx.iter_mut().zip(gv).zip(y) {
                    if *y > 0.0 {
                        *o += g;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let gx = acc(grads, *x, g.shape());
                for ((o, g), y) in gx.iter_mut().zip(gv).zip(y) {
                    *o += g * y * (1.0 - y);
                }
            }
            Op::ScaleChannels(x, s) => {
                let xv = self.value(*x);
                let hw = xv.len() / self.value(*s).len();
                if self.req(*x) {
                    let sv = self.value(*s).data();
                    let gx = acc(grads, *x, xv.shape());
                    for (c, (o, gp)) in gx.chunks_mut(hw).zip(gv.chunks(hw)).enumerate() {
                        o.iter_mut().zip(gp).for_each(|(o, g)| *o += g * sv[c]);
                    }
                }
                if self.req(*s) {
                    let gs = acc(grads, *s, self.shape(*s));
                    for (c, (xp, gp)) in xv.data().chunks(hw).zip(gv.chunks(hw)).enumerate() {
                        gs[c] += xp.iter().zip(gp).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::ScaleSpatial(x, s) => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let hw = sv.len();
                if self.req(*x) {
                    let gx = acc(grads, *x, xv.shape());
                    for (o, gp) in gx.chunks_mut(hw).zip(gv.chunks(hw)) {
                        for ((o, g), s) in o.iter_mut().zip(gp).zip(sv.data()) {
                            *o += g * s;
                        }
                    }
                }
                if self.req(*s) {
                    let gs = acc(grads, *s, sv.shape());
                    for (xp, gp) in xv.data().chunks(hw).zip(gv.chunks(hw)) {
                        for ((o, x), g) in gs.iter_mut().zip(xp).zip(gp) {
                            *o += x * g;
                        }
                    }
                }
            }
            Op::ScaleScalar(x, s) => {
                let xv = self.value(*x);
                if self.req(*x) {
                    let sv = self.value(*s).data()[0];
                    let gx = acc(grads, *x, xv.shape());
                    gx.iter_mut().zip(gv).for_each(|(o, g)| *o += g * sv);
                }
                if self.req(*s) {
                    let d: f64 = xv.data().iter().zip(gv).map(|(a, b)| a * b).sum();
                    acc(grads, *s, self.shape(*s))[0] += d;
                }
            }
            Op::Gap(x) => {
                let xv = self.value(*x);
                let hw = xv.len() / gv.len();
                let gx = acc(grads, *x, xv.shape());
                for (o, g) in gx.chunks_mut(hw).zip(gv) {
                    o.iter_mut().for_each(|o| *o += g / hw as f64);
                }
            }
            Op::Linear { w, x } => {
                let (o, n) = (gv.len(), self.value(*x).len());
                if self.req(*w) {
                    let xv = self.value(*x).data();
                    let gw = acc(grads, *w, self.shape(*w));
                    for r in 0..o {
                        for c in 0..n {
                            gw[r * n + c] += gv[r] * xv[c];
                        }
                    }
                }
                if self.req(*x) {
                    let wv = self.value(*w).data();
                    let gx = acc(grads, *x, self.shape(*x));
                    for r in 0..o {
                        for c in 0..n {
                            gx[c] += wv[r * n + c] * gv[r];
                        }
                    }
                }
            }
            Op::Conv1dSame { x, w } => {
                let (n, k) = (self.value(*x).len(), self.value(*w).len());
                let r = k / 2;
                let (xv, wv) = (self.value(*x).data().to_vec(), self.value(*w).data().to_vec());
                let (rx, rw) = (self.req(*x), self.req(*w));
                let mut gx = vec![0.0; n];
                let mut gw = vec![0.0; k];
                for i in 0..n {
                    for j in 0..k {
                        if let Some(t) = (i + j).checked_sub(r).filter(|&t| t < n) {
                            gx[t] += wv[j] * gv[i];
                            gw[j] += xv[t] * gv[i];
                        }
                    }
                }
                if rx {
                    acc(grads, *x, &[n]).iter_mut().zip(&gx).for_each(|(o, g)| *o += g);
                }
                if rw {
                    acc(grads, *w, &[k]).iter_mut().zip(&gw).for_each(|(o, g)| *o += g);
                }
            }
            Op::ChannelMean(x) => {
                let xv = self.value(*x);
                let c = xv.len() / gv.len();
                let gx = acc(grads, *x, xv.shape());
                for o in gx.chunks_mut(gv.len()) {
                    o.iter_mut().zip(gv).for_each(|(o, g)| *o += g / c as f64);
                }
            }
            Op::MinMaxNorm { x, argmin, argmax, degenerate } => {
                if *degenerate {
                    return;
                }
                let xv = self.value(*x).data();
                let (lo, hi) = (xv[*argmin], xv[*argmax]);
                let r = hi - lo;
                let mut d_hi = 0.0;
                let mut d_lo = 0.0;
                for (&xj, &g) in xv.iter().zip(gv) {
                    d_hi -= g * (xj - lo) / (r * r);
                    d_lo += g * (xj - hi) / (r * r);
                }
                let gx = acc(grads, *x, g.shape());
                gx.iter_mut().zip(gv).for_each(|(o, g)| *o += g / r);
                gx[*argmax] += d_hi;
                gx[*argmin] += d_lo;
            }
            Op::Upsample { x, factor } => {
                let (c, h, w) = self.value(*x).dims3().expect("rank 3");
                let (ty, tx) = (linear_taps(h, h * factor), linear_taps(w, w * factor));
                let ohw = h * factor * w * factor;
                let gx = acc(grads, *x, self.shape(*x));
                for ch in 0..c {
                    upsample_plane_back(
                        &gv[ch * ohw..(ch + 1) * ohw],
                        &mut gx[ch * h * w..(ch + 1) * h * w],
                        w,
                        &ty,
                        &tx,
                    );
                }
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                if self.req(*a) {
                    let ga = acc(grads, *a, self.shape(*a));
                    ga.iter_mut().zip(&gv[..na]).for_each(|(o, g)| *o += g);
                }
                if self.req(*b) {
                    let gb = acc(grads, *b, self.shape(*b));
                    gb.iter_mut().zip(&gv[na..]).for_each(|(o, g)| *o += g);
                }
            }
            Op::Reshape(x) => {
                let gx = acc(grads, *x, self.shape(*x));
                gx.iter_mut().zip(gv).for_each(|(o, g)| *o += g);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.req(*a) {
                    let bv = self.value(*b).data();
                    let ga = acc(grads, *a, &[m, k]);
                    gemm(m, n, k, gv, false, bv, true, ga, 1.0);
                }
                if self.req(*b) {
                    let av = self.value(*a).data();
                    let gb = acc(grads, *b, &[k, n]);
                    gemm(k, m, n, av, true, gv, false, gb, 1.0);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let ga = acc(grads, *a, &[m, n]);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += gv[j * m + i];
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let n = g.shape()[1];
                let ga = acc(grads, *a, g.shape());
                for ((o, gr), yr) in ga.chunks_mut(n).zip(gv.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, g), y) in o.iter_mut().zip(gr).zip(yr) {
                        *o += y * (g - dot);
                    }
                }
            }
            Op::Bce { p, target } => {
                let pv = self.value(*p).data();
                let n = target.len() as f64;
                let scale = gv[0] / n;
                let gp = acc(grads, *p, self.shape(*p));
                for ((o, &p), &t) in gp.iter_mut().zip(pv).zip(target) {
                    if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
                        *o += scale * (-t / p + (1.0 - t) / (1.0 - p));
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                let gx = acc(grads, *x, self.shape(*x));
                gx.iter_mut().zip(weights).for_each(|(o, w)| *o += gv[0] * w);
            }
        }
        let _ = i;
    }
}
