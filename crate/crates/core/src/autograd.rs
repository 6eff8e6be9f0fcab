//! Reverse-mode differentiation over a recorded op list.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Ops append a
//! node and return a [`Var`] handle; [`Tape::backward`] walks the nodes in
//! reverse and accumulates gradients into the leaves that asked for them.
//! Only the layers the denoiser and autoencoder need are supported. All
//! image-like values are `[N, C, H, W]`.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

enum Op<E> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(E, E)>,
    },
    Silu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, E),
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ConcatChannels(Var, Var),
    Upsample2(Var),
    AvgPool2(Var),
    DiffX(Var),
    DiffY(Var),
    MeanSquare(Var),
    SumSquare(Var),
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, var: Var) -> Option<&Tensor<E>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

fn dims4(t: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match *t {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: t.to_vec(),
            rhs: vec![0, 0, 0, 0],
        }),
    }
}

fn im2col<E: Element>(x: &[E], g: &ConvGeom, cols: &mut [E]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.ci {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(E::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            E::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<E: Element>(cols: &[E], g: &ConvGeom, dx: &mut [E]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.ci {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn silu<E: Element>(x: E) -> E {
    x / (E::one() + (-x).exp())
}

fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// 2-D convolution with square kernel `w: [Co, Ci, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [n, ci, h, wd] = dims4(self.shape(x), "conv2d input")?;
        let [co, wci, k, k2] = dims4(self.shape(w), "conv2d weight")?;
        if wci != ci || k != k2 || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![co],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::InvalidArgument(format!(
                "conv2d: input {h}x{wd} smaller than kernel {k}"
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let g = ConvGeom {
            n,
            ci,
            h,
            w: wd,
            co,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let hw_out = ho * wo;
        let mut out = vec![E::zero(); n * co * hw_out];
        let mut cols = if g.pointwise() {
            Vec::new()
        } else {
            vec![E::zero(); g.patch() * hw_out]
        };
        {
            let xv = self.nodes[x.0].value.data();
            let wv = self.nodes[w.0].value.data();
            for s in 0..n {
                let xs = &xv[s * ci * h * wd..(s + 1) * ci * h * wd];
                let os = &mut out[s * co * hw_out..(s + 1) * co * hw_out];
                let rhs: &[E] = if g.pointwise() {
                    xs
                } else {
                    im2col(xs, &g, &mut cols);
                    &cols
                };
                E::gemm(co, g.patch(), hw_out, wv, false, rhs, false, E::zero(), os);
                if let Some(b) = b {
                    let bv = self.nodes[b.0].value.data();
                    for (c, row) in os.chunks_mut(hw_out).enumerate() {
                        let bc = bv[c];
                        row.iter_mut().for_each(|o| *o += bc);
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new([n, co, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, g }, rg))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "group_norm")?;
        if groups == 0 || c % groups != 0 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::InvalidArgument(format!(
                "group_norm: {c} channels, {groups} groups"
            )));
        }
        let cg = c / groups;
        let span = cg * h * w;
        let count = E::from_f64_lossy(span as f64);
        let eps = E::from_f64_lossy(GROUP_NORM_EPS);
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let mut out = vec![E::zero(); xv.len()];
        let mut stats = Vec::with_capacity(n * groups);
        for s in 0..n {
            for g in 0..groups {
                let off = (s * c + g * cg) * h * w;
                let chunk = &xv[off..off + span];
                let mean = chunk.iter().copied().sum::<E>() / count;
                let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / count;
                let rstd = E::one() / (var + eps).sqrt();
                stats.push((mean, rstd));
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let base = off + cc * h * w;
                    for i in base..base + h * w {
                        out[i] = (xv[i] - mean) * rstd * gv[ch] + bv[ch];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new([n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            rg,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(silu);
        let rg = self.rg(x);
        self.push(value, Op::Silu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: E) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Adds `bias: [N, C]` to every pixel of `x: [N, C, H, W]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "add_channel_bias")?;
        if self.shape(bias) != [n, c] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: vec![n, c],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut value = self.value(x).clone();
        let bv = self.nodes[bias.0].value.data();
        for (plane, &b) in value.data_mut().chunks_mut(h * w).zip(bv) {
            plane.iter_mut().for_each(|v| *v += b);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddChannelBias { x, bias }, rg))
    }

    /// `x: [N, D]`, `w: [O, D]`, `b: [O]` → `[N, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (n, d, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![E::zero(); n * o];
        E::gemm(
            n,
            d,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            E::zero(),
            &mut out,
        );
        let bv = self.value(b).data();
        for row in out.chunks_mut(o) {
            row.iter_mut().zip(bv).for_each(|(y, &bb)| *y += bb);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new([n, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = dims4(self.shape(a), "concat")?;
        let [nb, cb, hb, wb] = dims4(self.shape(b), "concat")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for s in 0..n {
            out.extend_from_slice(&av[s * ca * h * w..(s + 1) * ca * h * w]);
            out.extend_from_slice(&bv[s * cb * h * w..(s + 1) * cb * h * w]);
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new([n, ca + cb, h, w], out)?;
        Ok(self.push(value, Op::ConcatChannels(a, b), rg))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "upsample2")?;
        let xv = self.value(x).data();
        let mut out = vec![E::zero(); n * c * h * w * 4];
        for (p, plane) in xv.chunks(h * w).enumerate() {
            let dst = &mut out[p * h * w * 4..(p + 1) * h * w * 4];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new([n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2(x), rg))
    }

    /// 2×2 mean pooling; `H` and `W` must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument(format!("avg_pool2 on {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let quarter = E::from_f64_lossy(0.25);
        let xv = self.value(x).data();
        let mut out = vec![E::zero(); n * c * ho * wo];
        for (p, plane) in xv.chunks(h * w).enumerate() {
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    out[p * ho * wo + y * wo + xx] =
                        (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter;
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new([n, c, ho, wo], out)?;
        Ok(self.push(value, Op::AvgPool2(x), rg))
    }

    /// Horizontal forward difference `x[.., j+1] − x[.., j]`, width shrinks by one.
    pub fn diff_x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "diff_x")?;
        if w < 2 {
            return Err(Error::InvalidArgument("diff_x needs width >= 2".into()));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * (w - 1));
        for row in xv.chunks(w) {
            out.extend(row.windows(2).map(|p| p[1] - p[0]));
        }
        let rg = self.rg(x);
        let value = Tensor::new([n, c, h, w - 1], out)?;
        Ok(self.push(value, Op::DiffX(x), rg))
    }

    /// Vertical forward difference, height shrinks by one.
    pub fn diff_y(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "diff_y")?;
        if h < 2 {
            return Err(Error::InvalidArgument("diff_y needs height >= 2".into()));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * (h - 1) * w);
        for plane in xv.chunks(h * w) {
            for y in 0..h - 1 {
                out.extend((0..w).map(|j| plane[(y + 1) * w + j] - plane[y * w + j]));
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new([n, c, h - 1, w], out)?;
        Ok(self.push(value, Op::DiffY(x), rg))
    }

    /// Mean of squared entries, as a scalar node.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f64 = v.data().iter().map(|a| a.as_f64() * a.as_f64()).sum();
        let value = Tensor::scalar(E::from_f64_lossy(s / v.len().max(1) as f64));
        let rg = self.rg(x);
        self.push(value, Op::MeanSquare(x), rg)
    }

    pub fn sum_square(&mut self, x: Var) -> Var {
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .map(|a| a.as_f64() * a.as_f64())
            .sum();
        let value = Tensor::scalar(E::from_f64_lossy(s));
        let rg = self.rg(x);
        self.push(value, Op::SumSquare(x), rg)
    }

    /// `mean((a − b)²)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        Ok(self.mean_square(d))
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// requires one.
    pub fn backward(&self, root: Var) -> Result<Gradients<E>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward from non-scalar of shape {:?}",
                rv.shape()
            )));
        }
        rv.ensure_finite("loss")?;
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), E::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &gy, &mut grads)?;
            // Interior gradients are no longer needed; leaves keep theirs.
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<E>>], v: Var, g: Tensor<E>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, node: &Node<E>, gy: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) -> Result<()> {
        let gyd = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, g } => {
                let hw_out = g.ho * g.wo;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let mut dw = vec![E::zero(); g.co * g.patch()];
                let mut dx = if need_x {
                    vec![E::zero(); xv.len()]
                } else {
                    Vec::new()
                };
                let mut cols = vec![E::zero(); g.patch() * hw_out];
                for s in 0..g.n {
                    let gys = &gyd[s * g.co * hw_out..(s + 1) * g.co * hw_out];
                    let xs = &xv[s * g.ci * g.h * g.w..(s + 1) * g.ci * g.h * g.w];
                    if need_w {
                        let rhs: &[E] = if g.pointwise() {
                            xs
                        } else {
                            im2col(xs, g, &mut cols);
                            &cols
                        };
                        E::gemm(g.co, hw_out, g.patch(), gys, false, rhs, true, E::one(), &mut dw);
                    }
                    if need_x {
                        let dxs = &mut dx[s * g.ci * g.h * g.w..(s + 1) * g.ci * g.h * g.w];
                        if g.pointwise() {
                            E::gemm(g.patch(), g.co, hw_out, wv, true, gys, false, E::one(), dxs);
                        } else {
                            E::gemm(g.patch(), g.co, hw_out, wv, true, gys, false, E::zero(), &mut cols);
                            col2im(&cols, g, dxs);
                        }
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                }
                if need_w {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw)?);
                }
                if let Some(b) = b {
                    let mut db = vec![E::zero(); g.co];
                    for s in 0..g.n {
                        for (c, d) in db.iter_mut().enumerate() {
                            let off = (s * g.co + c) * hw_out;
                            *d += gyd[off..off + hw_out].iter().copied().sum::<E>();
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new([g.co], db)?);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let [n, c, h, w] = dims4(self.shape(*x), "group_norm")?;
                let cg = c / groups;
                let hw = h * w;
                let count = E::from_f64_lossy((cg * hw) as f64);
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dx = vec![E::zero(); xv.len()];
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                for s in 0..n {
                    for g in 0..*groups {
                        let (mean, rstd) = stats[s * groups + g];
                        let off = (s * c + g * cg) * hw;
                        let mut sum_d = E::zero();
                        let mut sum_dx = E::zero();
                        for cc in 0..cg {
                            let ch = g * cg + cc;
                            for i in off + cc * hw..off + (cc + 1) * hw {
                                let xhat = (xv[i] - mean) * rstd;
                                let d = gyd[i] * gv[ch];
                                sum_d += d;
                                sum_dx += d * xhat;
                                dgamma[ch] += gyd[i] * xhat;
                                dbeta[ch] += gyd[i];
                            }
                        }
                        let mean_d = sum_d / count;
                        let mean_dx = sum_dx / count;
                        for cc in 0..cg {
                            let ch = g * cg + cc;
                            for i in off + cc * hw..off + (cc + 1) * hw {
                                let xhat = (xv[i] - mean) * rstd;
                                let d = gyd[i] * gv[ch];
                                dx[i] = rstd * (d - mean_d - xhat * mean_dx);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new([n, c, h, w], dx)?);
                self.accumulate(grads, *gamma, Tensor::new([c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new([c], dbeta)?);
            }
            Op::Silu(x) => {
                let g = self.value(*x).zip_map(gy, "silu", |v, d| {
                    let s = sigmoid(v);
                    d * s * (E::one() + v * (E::one() - s))
                })?;
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = node
                    .value
                    .zip_map(gy, "sigmoid", |s, d| d * s * (E::one() - s))?;
                self.accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|v| -v));
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, gy.map(|v| v * c));
            }
            Op::AddChannelBias { x, bias } => {
                self.accumulate(grads, *x, gy.clone());
                if self.rg(*bias) {
                    let [n, c, h, w] = dims4(gy.shape(), "add_channel_bias")?;
                    let db: Vec<E> = gyd.chunks(h * w).map(|p| p.iter().copied().sum()).collect();
                    self.accumulate(grads, *bias, Tensor::new([n, c], db)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if self.rg(*x) {
                    let mut dx = vec![E::zero(); n * d];
                    E::gemm(n, o, d, gyd, false, self.value(*w).data(), false, E::zero(), &mut dx);
                    self.accumulate(grads, *x, Tensor::new([n, d], dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![E::zero(); o * d];
                    E::gemm(o, n, d, gyd, true, self.value(*x).data(), false, E::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::new([o, d], dw)?);
                }
                if self.rg(*b) {
                    let mut db = vec![E::zero(); o];
                    for row in gyd.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                    }
                    self.accumulate(grads, *b, Tensor::new([o], db)?);
                }
            }
            Op::ConcatChannels(a, b) => {
                let [n, ca, h, w] = dims4(self.shape(*a), "concat")?;
                let cb = self.shape(*b)[1];
                let (sa, sb) = (ca * h * w, cb * h * w);
                let mut ga = Vec::with_capacity(n * sa);
                let mut gb = Vec::with_capacity(n * sb);
                for s in 0..n {
                    let base = s * (sa + sb);
                    ga.extend_from_slice(&gyd[base..base + sa]);
                    gb.extend_from_slice(&gyd[base + sa..base + sa + sb]);
                }
                self.accumulate(grads, *a, Tensor::new([n, ca, h, w], ga)?);
                self.accumulate(grads, *b, Tensor::new([n, cb, h, w], gb)?);
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = dims4(self.shape(*x), "upsample2")?;
                let mut dx = vec![E::zero(); n * c * h * w];
                for (p, plane) in gyd.chunks(4 * h * w).enumerate() {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += plane[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new([n, c, h, w], dx)?);
            }
            Op::AvgPool2(x) => {
                let [n, c, h, w] = dims4(self.shape(*x), "avg_pool2")?;
                let (ho, wo) = (h / 2, w / 2);
                let quarter = E::from_f64_lossy(0.25);
                let mut dx = vec![E::zero(); n * c * h * w];
                for (p, plane) in gyd.chunks(ho * wo).enumerate() {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = plane[(y / 2) * wo + xx / 2] * quarter;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new([n, c, h, w], dx)?);
            }
            Op::DiffX(x) => {
                let [n, c, h, w] = dims4(self.shape(*x), "diff_x")?;
                let mut dx = vec![E::zero(); n * c * h * w];
                for (r, row) in gyd.chunks(w - 1).enumerate() {
                    let dst = &mut dx[r * w..(r + 1) * w];
                    for (j, &g) in row.iter().enumerate() {
                        dst[j + 1] += g;
                        dst[j] -= g;
                    }
                }
                self.accumulate(grads, *x, Tensor::new([n, c, h, w], dx)?);
            }
            Op::DiffY(x) => {
                let [n, c, h, w] = dims4(self.shape(*x), "diff_y")?;
                let mut dx = vec![E::zero(); n * c * h * w];
                for (p, plane) in gyd.chunks((h - 1) * w).enumerate() {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..h - 1 {
                        for j in 0..w {
                            let g = plane[y * w + j];
                            dst[(y + 1) * w + j] += g;
                            dst[y * w + j] -= g;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new([n, c, h, w], dx)?);
            }
            Op::MeanSquare(x) => {
                let xv = self.value(*x);
                let k = gyd[0] * E::from_f64_lossy(2.0 / xv.len().max(1) as f64);
                self.accumulate(grads, *x, xv.map(|v| v * k));
            }
            Op::SumSquare(x) => {
                let k = gyd[0] + gyd[0];
                self.accumulate(grads, *x, self.value(*x).map(|v| v * k));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), f)
    }

    /// Central-difference check of d(loss)/d(leaf) for a graph builder.
    fn fd_check(leaf: Tensor<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let mut tape = Tape::new();
        let p = tape.param(leaf.clone());
        let root = build(&mut tape, p);
        let grads = tape.backward(root).unwrap();
        let g = grads.get(p).unwrap().clone();
        let h = 1e-5;
        for i in 0..leaf.len() {
            let eval = |delta: f64| {
                let mut l = leaf.clone();
                l.data_mut()[i] += delta;
                let mut tape = Tape::new();
                let p = tape.param(l);
                let r = build(&mut tape, p);
                tape.value(r).data()[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()),
                "entry {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    fn weights(shape: &[usize]) -> Tensor<f64> {
        t(shape, |i| ((i * 7919 % 113) as f64 / 113.0 - 0.5) * 0.8)
    }

    #[test]
    fn conv_gradients_all_inputs() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
            let x = t(&[2, 3, 6, 6], |i| (i as f64 * 0.37).sin());
            let w = weights(&[4, 3, k, k]);
            let b = t(&[4], |i| i as f64 * 0.1);
            let probe = t(&[2, 4, 6 / stride, 6 / stride], |i| (i as f64 * 0.11).cos());
            // w.r.t. input
            fd_check(x.clone(), |tp, p| {
                let w = tp.constant(w.clone());
                let b = tp.constant(b.clone());
                let y = tp.conv2d(p, w, Some(b), stride, pad).unwrap();
                let q = tp.constant(probe.clone());
                let d = tp.sub(y, q).unwrap();
                tp.sum_square(d)
            });
            // w.r.t. weight
            fd_check(w.clone(), |tp, p| {
                let xv = tp.constant(x.clone());
                let y = tp.conv2d(xv, p, None, stride, pad).unwrap();
                let q = tp.constant(probe.clone());
                let d = tp.sub(y, q).unwrap();
                tp.sum_square(d)
            });
        }
    }

    #[test]
    fn group_norm_and_pointwise_ops() {
        let x = t(&[2, 4, 3, 3], |i| (i as f64 * 0.77).sin() + 0.1 * i as f64);
        let probe = t(&[2, 4, 3, 3], |i| (i as f64 * 0.3).cos());
        fd_check(x.clone(), |tp, p| {
            let g = tp.constant(t(&[4], |i| 1.0 + 0.2 * i as f64));
            let b = tp.constant(t(&[4], |i| 0.1 * i as f64));
            let y = tp.group_norm(p, g, b, 2).unwrap();
            let y = tp.silu(y);
            let q = tp.constant(probe.clone());
            let d = tp.sub(y, q).unwrap();
            tp.mean_square(d)
        });
        fd_check(t(&[4], |i| 0.5 + i as f64), |tp, gamma| {
            let xv = tp.constant(x.clone());
            let b = tp.constant(Tensor::zeros([4]));
            let y = tp.group_norm(xv, gamma, b, 4).unwrap();
            let y = tp.sigmoid(y);
            let q = tp.constant(probe.clone());
            let d = tp.sub(y, q).unwrap();
            tp.sum_square(d)
        });
    }

    #[test]
    fn resample_concat_and_diff_ops() {
        let x = t(&[1, 2, 4, 4], |i| (i as f64 * 1.3).sin());
        fd_check(x.clone(), |tp, p| {
            let u = tp.upsample2(p).unwrap();
            let d = tp.avg_pool2(u).unwrap();
            let d = tp.avg_pool2(d).unwrap();
            let q = tp.constant(t(&[1, 2, 2, 2], |i| i as f64));
            let s = tp.sub(d, q).unwrap();
            tp.sum_square(s)
        });
        fd_check(x.clone(), |tp, p| {
            let other = tp.constant(t(&[1, 1, 4, 4], |i| i as f64 * 0.1));
            let c = tp.concat_channels(other, p).unwrap();
            let c = tp.scale(c, 0.5);
            let dx = tp.diff_x(c).unwrap();
            let dy = tp.diff_y(c).unwrap();
            let a = tp.sum_square(dx);
            let b = tp.mean_square(dy);
            tp.add(a, b).unwrap()
        });
    }

    #[test]
    fn linear_and_channel_bias() {
        let x = t(&[3, 5], |i| (i as f64 * 0.9).cos());
        fd_check(x.clone(), |tp, p| {
            let w = tp.constant(weights(&[2, 5]));
            let b = tp.constant(t(&[2], |i| i as f64));
            let y = tp.linear(p, w, b).unwrap();
            let img = tp.constant(t(&[3, 2, 2, 2], |i| i as f64 * 0.01));
            let z = tp.add_channel_bias(img, y).unwrap();
            let z = tp.silu(z);
            tp.sum_square(z)
        });
        fd_check(weights(&[2, 5]), |tp, w| {
            let xv = tp.constant(x.clone());
            let b = tp.constant(t(&[2], |i| i as f64));
            let y = tp.linear(xv, w, b).unwrap();
            tp.sum_square(y)
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::full([2], 3.0));
        let p = tape.param(Tensor::full([2], 1.0));
        let s = tape.add(c, p).unwrap();
        let l = tape.sum_square(s);
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[8.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_finite_loss() {
        let mut tape = Tape::<f32>::new();
        let p = tape.param(Tensor::full([1], f32::NAN));
        let l = tape.sum_square(p);
        assert!(matches!(tape.backward(l), Err(Error::NonFinite(_))));
    }
}
