//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] records every operation as a node holding its value, an
//! optional gradient buffer and a backward closure.  Nodes are appended in
//! program order, so visiting them in reverse index order during
//! [`Graph::backward`] is a valid topological sweep.  Gradient accumulation
//! happens in a fixed, creation-ordered sequence, which makes whole training
//! runs bit-reproducible on a given platform.
//!
//! The operator set is exactly what the parsing network and its auxiliary
//! modules need: dense and depthwise convolution, nearest-neighbour
//! upsampling, ReLU, matrix products (plain and B-transposed), row softmax,
//! elementwise add/mul, masked average+max region pooling, pixel-wise
//! cross-entropy with an ignore value, row-mean cosine alignment and scalar
//! linear combination.  Loss-producing ops additionally keep an `f64`
//! side-value so finite-difference verification is not drowned in `f32`
//! rounding noise; the tensor math itself is 32-bit throughout.

use std::rc::Rc;

use crate::tensor::{mat_mul_into, Tensor};

/// Index of a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(usize);

/// Label value that cross-entropy skips.
pub const IGNORE_LABEL: u8 = 255;

/// Norm floor for cosine alignment; rows with a smaller norm are treated as
/// degenerate (cosine contribution clamped via this floor, gradient through
/// the norm suppressed).
pub const COSINE_NORM_FLOOR: f64 = 1e-8;

type BackFn = Box<dyn Fn(&Tensor, &mut [Tensor])>;

/// Pixel membership of every category at one pyramid scale, used by the
/// masked pooling operator.  `lists[z]` holds the linear pixel indices
/// (row-major over `h * w`) labeled `z`; an empty list means the category is
/// absent from the image at this scale.
#[derive(Debug, Clone)]
pub struct PoolRegions {
    pub num_regions: usize,
    pub height: usize,
    pub width: usize,
    pub lists: Vec<Vec<u32>>,
}

impl PoolRegions {
    /// Collect the pixel lists of every label value `0..num_regions` from a
    /// label raster.  `IGNORE_LABEL` pixels belong to no region.
    pub fn from_labels(labels: &[u8], height: usize, width: usize, num_regions: usize) -> Self {
        assert_eq!(labels.len(), height * width);
        let mut lists = vec![Vec::new(); num_regions];
        for (i, &l) in labels.iter().enumerate() {
            if l == IGNORE_LABEL {
                continue;
            }
            let l = l as usize;
            assert!(l < num_regions, "label {l} out of range {num_regions}");
            lists[l].push(i as u32);
        }
        PoolRegions {
            num_regions,
            height,
            width,
            lists,
        }
    }

    pub fn present(&self, z: usize) -> bool {
        !self.lists[z].is_empty()
    }
}

/// A reverse-mode tape.  Build values with the op methods, then call
/// [`Graph::backward`] once on a scalar root and read gradients of leaves
/// with [`Graph::grad`].
#[derive(Default)]
pub struct Graph {
    vals: Vec<Rc<Tensor>>,
    side_f64: Vec<Option<f64>>,
    grads: Vec<Tensor>,
    needs: Vec<bool>,
    backs: Vec<Option<BackFn>>,
    ran_backward: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// The forward value of a node.
    pub fn value(&self, id: VarId) -> &Tensor {
        &self.vals[id.0]
    }

    /// The accumulated gradient of a node (zeros before `backward`).
    /// Panics for nodes that do not require gradients.
    pub fn grad(&self, id: VarId) -> &Tensor {
        assert!(self.needs[id.0], "node does not track gradients");
        &self.grads[id.0]
    }

    /// Scalar value in `f64` precision where the op provides it (loss ops),
    /// falling back to the stored `f32` value.
    pub fn scalar_f64(&self, id: VarId) -> f64 {
        match self.side_f64[id.0] {
            Some(v) => v,
            None => self.vals[id.0].item() as f64,
        }
    }

    fn push(
        &mut self,
        value: Tensor,
        needs: bool,
        back: Option<BackFn>,
        side: Option<f64>,
    ) -> VarId {
        let grad = if needs {
            Tensor::zeros(value.shape())
        } else {
            Tensor::empty()
        };
        self.vals.push(Rc::new(value));
        self.side_f64.push(side);
        self.grads.push(grad);
        self.needs.push(needs);
        self.backs.push(back);
        VarId(self.vals.len() - 1)
    }

    /// A node with no gradient; attention masks, images, anything frozen.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, false, None, None)
    }

    /// A gradient-tracking input node (parameters).
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, true, None, None)
    }

    /// Run the backward sweep from a scalar root.  May be called once per
    /// graph; gradients of all `leaf` nodes are then available via `grad`.
    pub fn backward(&mut self, root: VarId) {
        assert!(!self.ran_backward, "backward may only run once per graph");
        self.ran_backward = true;
        assert_eq!(
            self.vals[root.0].numel(),
            1,
            "backward root must be scalar"
        );
        assert!(self.needs[root.0], "backward root does not require gradients");
        self.grads[root.0] = Tensor::scalar(1.0);
        for i in (0..=root.0).rev() {
            if !self.needs[i] {
                continue;
            }
            let Some(back) = self.backs[i].take() else {
                continue;
            };
            let g = std::mem::replace(&mut self.grads[i], Tensor::empty());
            back(&g, &mut self.grads);
            self.grads[i] = g;
        }
    }

    // ---- elementwise ----

    /// `a + b`, identical shapes.
    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (self.vals[a.0].clone(), self.vals[b.0].clone());
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let mut out = (*av).clone();
        out.add_assign(&bv);
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        let needs = na || nb;
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &Tensor, grads: &mut [Tensor]| {
                if na {
                    grads[a.0].add_assign(g);
                }
                if nb {
                    grads[b.0].add_assign(g);
                }
            }) as BackFn
        });
        self.push(out, needs, back, None)
    }

    /// Elementwise `a * b`, identical shapes.  Either side may be a constant
    /// (e.g. an attention mask applied after softmax).
    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (self.vals[a.0].clone(), self.vals[b.0].clone());
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let mut out = (*av).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(bv.data()) {
            *o *= x;
        }
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        let needs = na || nb;
        let back: Option<BackFn> = needs.then(|| {
            let (av, bv) = (av.clone(), bv.clone());
            Box::new(move |g: &Tensor, grads: &mut [Tensor]| {
                if na {
                    for ((ga, &gv), &x) in
                        grads[a.0].data_mut().iter_mut().zip(g.data()).zip(bv.data())
                    {
                        *ga += gv * x;
                    }
                }
                if nb {
                    for ((gb, &gv), &x) in
                        grads[b.0].data_mut().iter_mut().zip(g.data()).zip(av.data())
                    {
                        *gb += gv * x;
                    }
                }
            }) as BackFn
        });
        self.push(out, needs, back, None)
    }

    /// `a * s` for a fixed scalar.
    pub fn scale(&mut self, a: VarId, s: f32) -> VarId {
        let av = self.vals[a.0].clone();
        let mut out = (*av).clone();
        for o in out.data_mut() {
            *o *= s;
        }
        let needs = self.needs[a.0];
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &Tensor, grads: &mut [Tensor]| {
                grads[a.0].axpy(s, g);
            }) as BackFn
        });
        self.push(out, needs, back, None)
    }

    /// Rectified linear unit.
    pub fn relu(&mut self, a: VarId) -> VarId {
        let av = self.vals[a.0].clone();
        let mut out = (*av).clone();
        for o in out.data_mut() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
        let needs = self.needs[a.0];
        let id = self.push(out, needs, None, None);
        if needs {
            let ov = self.vals[id.0].clone();
            self.backs[id.0] = Some(Box::new(move |g: &Tensor, grads: &mut [Tensor]| {
                for ((ga, &gv), &o) in
                    grads[a.0].data_mut().iter_mut().zip(g.data()).zip(ov.data())
                {
                    if o > 0.0 {
                        *ga += gv;
                    }
                }
            }));
        }
        id
    }

    // ---- matrix products ----

    /// `a @ b` for 2-D operands `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (self.vals[a.0].clone(), self.vals[b.0].clone());
        let (&[m, k], &[k2, n]) = (&av.shape()[..2], &bv.shape()[..2]) else {
            panic!("matmul expects 2-D operands");
        };
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        mat_mul_into(
            1.0,
            &av.as_mat(m, k),
            &bv.as_mat(k, n),
            0.0,
            &mut out.as_mat_mut(m, n),
        );
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        let needs = na || nb;
        let back: Option<BackFn> = needs.then(|| {
            let (av, bv) = (av.clone(), bv.clone());
            Box::new(move |g: &Tensor, grads: &mut [Tensor]| {
                if na {
                    // ga += g @ b^T
                    let bt = bv.as_mat(k, n);
                    mat_mul_into(
                        1.0,
                        &g.as_mat(m, n),
                        &bt.t(),
                        1.0,
                        &mut grads[a.0].as_mat_mut(m, k),
                    );
                }
                if nb {
                    // gb += a^T @ g
                    let at = av.as_mat(m, k);
                    mat_mul_into(
                        1.0,
                        &at.t(),
                        &g.as_mat(m, n),
                        1.0,
                        &mut grads[b.0].as_mat_mut(k, n),
                    );
                }
            }) as BackFn
        });
        self.push(out, needs, back, None)
    }

    /// `a @ b^T` for 2-D operands `[m, k] x [n, k]`.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (self.vals[a.0].clone(), self.vals[b.0].clone());
        let (&[m, k], &[n, k2]) = (&av.shape()[..2], &bv.shape()[..2]) else {
            panic!("matmul_nt expects 2-D operands");
        };
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        {
            let bt = bv.as_mat(n, k);
            mat_mul_into(
                1.0,
                &av.as_mat(m, k),
                &bt.t(),
                0.0,
                &mut out.as_mat_mut(m, n),
            );
        }
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        let needs = na || nb;
        let back: Option<BackFn> = needs.then(|| {
            let (av, bv) = (av.clone(), bv.clone());
            Box::new(move |g: &Tensor, grads: &mut [Tensor]| {
                if na {
                    // ga += g @ b
                    mat_mul_into(
                        1.0,
                        &g.as_mat(m, n),
                        &bv.as_mat(n, k),
                        1.0,
                        &mut grads[a.0].as_mat_mut(m, k),
                    );
                }
                if nb {
                    // gb += g^T @ a
                    let gm = g.as_mat(m, n);
                    mat_mul_into(
                        1.0,
                        &gm.t(),
                        &av.as_mat(m, k),
                        1.0,
                        &mut grads[b.0].as_mat_mut(n, k),
                    );
                }
            }) as BackFn
        });
        self.push(out, needs, back, None)
    }

    /// `w @ x (+ bias)` where `x`'s leading axis is the contraction axis and
    /// any trailing axes are kept: `w: [z, d]`, `x: [d, ...]` -> `[z, ...]`.
    /// This covers 1x1 convolution, segmentation heads and the auxiliary
    /// logits in one primitive.
    pub fn affine_map(&mut self, w: VarId, x: VarId, bias: Option<VarId>) -> VarId {
        let (wv, xv) = (self.vals[w.0].clone(), self.vals[x.0].clone());
        let &[z, d] = &wv.shape()[..2] else {
            panic!("affine_map weight must be 2-D");
        };
        let xd = xv.shape()[0];
        assert_eq!(d, xd, "affine_map contraction dims {d} vs {xd}");
        let n: usize = xv.shape()[1..].iter().product();
        let mut out_shape = vec![z];
        out_shape.extend_from_slice(&xv.shape()[1..]);
        let mut out = Tensor::zeros(&out_shape);
        mat_mul_into(
            1.0,
            &wv.as_mat(z, d),
            &xv.as_mat(d, n),
            0.0,
            &mut out.as_mat_mut(z, n),
        );
        let bv = bias.map(|b| self.vals[b.0].clone());
        if let Some(bv) = &bv {
            assert_eq!(bv.shape(), [z], "affine_map bias must be [z]");
            let data = out.data_mut();
            for (zi, &b) in bv.data().iter().enumerate() {
                for v in &mut data[zi * n..(zi + 1) * n] {
                    *v += b;
                }
            }
        }
        let nw = self.needs[w.0];
        let nx = self.needs[x.0];
        let nb = bias.map(|b| self.needs[b.0]).unwrap_or(false);
        let needs = nw || nx || nb;
        let back: Option<BackFn> = needs.then(|| {
            let (wv, xv) = (wv.clone(), xv.clone());
            Box::new(move |g: &Tensor, grads: &mut [Tensor]| {
                if nw {
                    // gw += g @ x^T
                    let xm = xv.as_mat(d, n);
                    mat_mul_into(
                        1.0,
                        &g.as_mat(z, n),
                        &xm.t(),
                        1.0,
                        &mut grads[w.0].as_mat_mut(z, d),
                    );
                }
                if nx {
                    // gx += w^T @ g
                    let wm = wv.as_mat(z, d);
                    mat_mul_into(
                        1.0,
                        &wm.t(),
                        &g.as_mat(z, n),
                        1.0,
                        &mut grads[x.0].as_mat_mut(d, n),
                    );
                }
                if nb {
                    let b = bias.expect("bias id");
                    let gb = grads[b.0].data_mut();
                    for zi in 0..z {
                        let mut s = 0.0f32;
                        for &gv in &g.data()[zi * n..(zi + 1) * n] {
                            s += gv;
                        }
                        gb[zi] += s;
                    }
                }
            }) as BackFn
        });
        self.push(out, needs, back, None)
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let av = self.vals[a.0].clone();
        let &[m, n] = &av.shape()[..2] else {
            panic!("softmax_rows expects a 2-D operand");
        };
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = &av.data()[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let orow = &mut out.data_mut()[i * n..(i + 1) * n];
            let mut sum = 0.0f32;
            for (o, &v) in orow.iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.needs[a.0];
        let id = self.push(out, needs, None, None);
        if needs {
            let ov = self.vals[id.0].clone();
            self.backs[id.0] = Some(Box::new(move |g: &Tensor, grads: &mut [Tensor]| {
                let ga = grads[a.0].data_mut();
                for i in 0..m {
                    let y = &ov.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let dot: f32 = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for ((ga, &yv), &gv) in
                        ga[i * n..(i + 1) * n].iter_mut().zip(y).zip(gr)
                    {
                        *ga += yv * (gv - dot);
                    }
                }
            }));
        }
        id
    }

    // ---- spatial ops ----

    /// Dense 2-D convolution: `x: [ci, h, w]`, `w: [co, ci, kh, kw]`,
    /// optional bias `[co]`, with the given stride and symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> VarId {
        let (xv, wv) = (self.vals[x.0].clone(), self.vals[w.0].clone());
        let &[ci, h, wd] = &xv.shape()[..3] else {
            panic!("conv2d input must be [c, h, w]");
        };
        let &[co, ci2, kh, kw] = &wv.shape()[..4] else {
            panic!("conv2d weight must be [co, ci, kh, kw]");
        };
        assert_eq!(ci, ci2, "conv2d channel mismatch");
        assert!(stride > 0);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let bv = bias.map(|b| self.vals[b.0].clone());
        let mut out = Tensor::zeros(&[co, oh, ow]);
        {
            let od = out.data_mut();
            let xd = xv.data();
            let wd_ = wv.data();
            for c_out in 0..co {
                let b = bv.as_ref().map(|b| b.data()[c_out]).unwrap_or(0.0);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b;
                        for c_in in 0..ci {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = &xd[c_in * h * wd + iy as usize * wd..];
                                let wrow =
                                    &wd_[((c_out * ci + c_in) * kh + ky) * kw..][..kw];
                                for (kx, &wv) in wrow.iter().enumerate() {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += wv * xrow[ix as usize];
                                }
                            }
                        }
                        od[(c_out * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let nx = self.needs[x.0];
        let nw = self.needs[w.0];
        let nb = bias.map(|b| self.needs[b.0]).unwrap_or(false);
        let needs = nx || nw || nb;
        let back: Option<BackFn> = needs.then(|| {
            let (xv, wv) = (xv.clone(), wv.clone());
            Box::new(move |g: &Tensor, grads: &mut [Tensor]| {
                let gd = g.data();
                for c_out in 0..co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gd[(c_out * oh + oy) * ow + ox];
                            if nb {
                                grads[bias.expect("bias id").0].data_mut()[c_out] += gv;
                            }
                            for c_in in 0..ci {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (c_in * h + iy as usize) * wd + ix as usize;
                                        let wi = ((c_out * ci + c_in) * kh + ky) * kw + kx;
                                        if nw {
                                            grads[w.0].data_mut()[wi] += gv * xv.data()[xi];
                                        }
                                        if nx {
                                            grads[x.0].data_mut()[xi] += gv * wv.data()[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }) as BackFn
        });
        self.push(out, needs, back, None)
    }

    /// Depthwise 3x3 convolution: `x: [c, h, w]`, `w: [c, 3, 3]`, optional
    /// bias `[c]`.
    pub fn depthwise3x3(
        &mut self,
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> VarId {
        let (xv, wv) = (self.vals[x.0].clone(), self.vals[w.0].clone());
        let &[c, h, wd] = &xv.shape()[..3] else {
            panic!("depthwise3x3 input must be [c, h, w]");
        };
        assert_eq!(wv.shape(), [c, 3, 3], "depthwise3x3 weight must be [c, 3, 3]");
        assert!(stride > 0);
        let oh = (h + 2 * pad - 3) / stride + 1;
        let ow = (wd + 2 * pad - 3) / stride + 1;
        let bv = bias.map(|b| self.vals[b.0].clone());
        let mut out = Tensor::zeros(&[c, oh, ow]);
        {
            let od = out.data_mut();
            let xd = xv.data();
            let kd = wv.data();
            for ch in 0..c {
                let b = bv.as_ref().map(|b| b.data()[ch]).unwrap_or(0.0);
                let kern = &kd[ch * 9..ch * 9 + 9];
                let plane = &xd[ch * h * wd..(ch + 1) * h * wd];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b;
                        for ky in 0..3 {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &plane[iy as usize * wd..iy as usize * wd + wd];
                            for kx in 0..3 {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += kern[ky * 3 + kx] * row[ix as usize];
                            }
                        }
                        od[(ch * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let nx = self.needs[x.0];
        let nw = self.needs[w.0];
        let nb = bias.map(|b| self.needs[b.0]).unwrap_or(false);
        let needs = nx || nw || nb;
        let back: Option<BackFn> = needs.then(|| {
            let (xv, wv) = (xv.clone(), wv.clone());
            Box::new(move |g: &Tensor, grads: &mut [Tensor]| {
                let gd = g.data();
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gd[(ch * oh + oy) * ow + ox];
                            if nb {
                                grads[bias.expect("bias id").0].data_mut()[ch] += gv;
                            }
                            for ky in 0..3 {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = (ch * h + iy as usize) * wd + ix as usize;
                                    let wi = ch * 9 + ky * 3 + kx;
                                    if nw {
                                        grads[w.0].data_mut()[wi] += gv * xv.data()[xi];
                                    }
                                    if nx {
                                        grads[x.0].data_mut()[xi] += gv * wv.data()[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }) as BackFn
        });
        self.push(out, needs, back, None)
    }

    /// Nearest-neighbour upsampling of `[c, h, w]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: VarId, factor: usize) -> VarId {
        assert!(factor >= 1);
        let xv = self.vals[x.0].clone();
        let &[c, h, w] = &xv.shape()[..3] else {
            panic!("upsample_nearest input must be [c, h, w]");
        };
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        {
            let od = out.data_mut();
            let xd = xv.data();
            for ch in 0..c {
                for oy in 0..oh {
                    let iy = oy / factor;
                    let src = &xd[(ch * h + iy) * w..(ch * h + iy) * w + w];
                    let dst = &mut od[(ch * oh + oy) * ow..(ch * oh + oy) * ow + ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        *d = src[ox / factor];
                    }
                }
            }
        }
        let needs = self.needs[x.0];
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &Tensor, grads: &mut [Tensor]| {
                let gx = grads[x.0].data_mut();
                let gd = g.data();
                for ch in 0..c {
                    for oy in 0..oh {
                        let iy = oy / factor;
                        let src = &gd[(ch * oh + oy) * ow..(ch * oh + oy) * ow + ow];
                        let dst = &mut gx[(ch * h + iy) * w..(ch * h + iy) * w + w];
                        for (ox, &gv) in src.iter().enumerate() {
                            dst[ox / factor] += gv;
                        }
                    }
                }
            }) as BackFn
        });
        self.push(out, needs, back, None)
    }

    /// Masked average+max pooling over labeled regions.  `x` is a feature map
    /// `[d, h, w]`; the output is `[z, 2d]` where row `z` is the
    /// concatenation of the per-channel mean and per-channel max over the
    /// pixels of region `z`, or all zeros when the region is absent.  Max
    /// gradients flow to the first maximizing pixel in raster order.
    pub fn masked_pool(&mut self, x: VarId, regions: Rc<PoolRegions>) -> VarId {
        let xv = self.vals[x.0].clone();
        let &[d, h, w] = &xv.shape()[..3] else {
            panic!("masked_pool input must be [d, h, w]");
        };
        assert_eq!(
            (h, w),
            (regions.height, regions.width),
            "masked_pool raster size mismatch"
        );
        let z = regions.num_regions;
        let hw = h * w;
        let mut out = Tensor::zeros(&[z, 2 * d]);
        let mut argmax = vec![0u32; z * d];
        {
            let od = out.data_mut();
            let xd = xv.data();
            for zi in 0..z {
                let list = &regions.lists[zi];
                if list.is_empty() {
                    continue;
                }
                let inv = 1.0 / list.len() as f32;
                for c in 0..d {
                    let plane = &xd[c * hw..(c + 1) * hw];
                    let mut sum = 0.0f32;
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = list[0];
                    for &px in list {
                        let v = plane[px as usize];
                        sum += v;
                        if v > best {
                            best = v;
                            best_i = px;
                        }
                    }
                    od[zi * 2 * d + c] = sum * inv;
                    od[zi * 2 * d + d + c] = best;
                    argmax[zi * d + c] = best_i;
                }
            }
        }
        let needs = self.needs[x.0];
        let back: Option<BackFn> = needs.then(|| {
            let regions = regions.clone();
            Box::new(move |g: &Tensor, grads: &mut [Tensor]| {
                let gx = grads[x.0].data_mut();
                let gd = g.data();
                for zi in 0..z {
                    let list = &regions.lists[zi];
                    if list.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / list.len() as f32;
                    for c in 0..d {
                        let gavg = gd[zi * 2 * d + c] * inv;
                        let plane = &mut gx[c * hw..(c + 1) * hw];
                        for &px in list {
                            plane[px as usize] += gavg;
                        }
                        plane[argmax[zi * d + c] as usize] += gd[zi * 2 * d + d + c];
                    }
                }
            }) as BackFn
        });
        self.push(out, needs, back, None)
    }

    // ---- losses ----

    /// Mean pixel-wise cross-entropy of logits `[z, h, w]` against a label
    /// raster, skipping `IGNORE_LABEL` pixels.  All-ignored input yields 0
    /// with a logged warning.  The sum is accumulated in `f64`.
    pub fn cross_entropy_mean(&mut self, logits: VarId, labels: Rc<Vec<u8>>) -> VarId {
        let lv = self.vals[logits.0].clone();
        let &[z, h, w] = &lv.shape()[..3] else {
            panic!("cross_entropy_mean logits must be [z, h, w]");
        };
        let hw = h * w;
        assert_eq!(labels.len(), hw, "label raster size mismatch");
        let mut probs = vec![0.0f32; z * hw];
        let mut sum = 0.0f64;
        let mut count = 0usize;
        {
            let ld = lv.data();
            for px in 0..hw {
                let y = labels[px];
                if y == IGNORE_LABEL {
                    continue;
                }
                let y = y as usize;
                assert!(y < z, "label {y} out of range {z}");
                let mut max = f32::NEG_INFINITY;
                for zi in 0..z {
                    max = max.max(ld[zi * hw + px]);
                }
                // The exponentials are f32; their sum is reduced in f64 so
                // the log-sum-exp (and thus the loss) is not polluted by
                // accumulation order.
                let mut se = 0.0f64;
                for zi in 0..z {
                    let e = (ld[zi * hw + px] - max).exp();
                    probs[zi * hw + px] = e;
                    se += e as f64;
                }
                let inv = (1.0 / se) as f32;
                for zi in 0..z {
                    probs[zi * hw + px] *= inv;
                }
                let lse = max as f64 + se.ln();
                sum += lse - ld[y * hw + px] as f64;
                count += 1;
            }
        }
        if count == 0 {
            log::warn!("cross_entropy_mean: all pixels ignored; loss is 0");
            return self.push(Tensor::scalar(0.0), self.needs[logits.0], None, Some(0.0));
        }
        let mean = sum / count as f64;
        let needs = self.needs[logits.0];
        let back: Option<BackFn> = needs.then(|| {
            let labels = labels.clone();
            let inv_count = 1.0f32 / count as f32;
            Box::new(move |g: &Tensor, grads: &mut [Tensor]| {
                let gs = g.item() * inv_count;
                let gl = grads[logits.0].data_mut();
                for px in 0..hw {
                    let y = labels[px];
                    if y == IGNORE_LABEL {
                        continue;
                    }
                    for zi in 0..z {
                        let p = probs[zi * hw + px];
                        let t = if zi == y as usize { 1.0 } else { 0.0 };
                        gl[zi * hw + px] += gs * (p - t);
                    }
                }
            }) as BackFn
        });
        self.push(Tensor::scalar(mean as f32), needs, back, Some(mean))
    }

    /// Mean over rows of `1 - cos(a_row, b_row)` for `[z, d]` operands.
    /// Row norms are floored at [`COSINE_NORM_FLOOR`]; a floored (degenerate)
    /// row contributes through the clamped norm and sends no gradient into
    /// its own norm term.
    pub fn cosine_align(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (self.vals[a.0].clone(), self.vals[b.0].clone());
        assert_eq!(av.shape(), bv.shape(), "cosine_align shape mismatch");
        let &[z, d] = &av.shape()[..2] else {
            panic!("cosine_align expects 2-D operands");
        };
        // Per-row: dot product, floored norms, whether the floor fired.
        let mut rows = Vec::with_capacity(z);
        let mut sum = 0.0f64;
        let mut any_floored = false;
        for zi in 0..z {
            let ra = &av.data()[zi * d..(zi + 1) * d];
            let rb = &bv.data()[zi * d..(zi + 1) * d];
            let mut dot = 0.0f64;
            let mut na2 = 0.0f64;
            let mut nb2 = 0.0f64;
            for (&x, &y) in ra.iter().zip(rb) {
                dot += x as f64 * y as f64;
                na2 += (x as f64) * (x as f64);
                nb2 += (y as f64) * (y as f64);
            }
            let (na_raw, nb_raw) = (na2.sqrt(), nb2.sqrt());
            let fa = na_raw < COSINE_NORM_FLOOR;
            let fb = nb_raw < COSINE_NORM_FLOOR;
            any_floored |= fa || fb;
            let na = na_raw.max(COSINE_NORM_FLOOR);
            let nb = nb_raw.max(COSINE_NORM_FLOOR);
            let cos = dot / (na * nb);
            sum += 1.0 - cos;
            rows.push((dot, na, nb, fa, fb));
        }
        if any_floored {
            log::warn!(
                "cosine_align: row norm under {COSINE_NORM_FLOOR:e} floored (degenerate row)"
            );
        }
        let mean = sum / z as f64;
        let (na_, nb_) = (self.needs[a.0], self.needs[b.0]);
        let needs = na_ || nb_;
        let back: Option<BackFn> = needs.then(|| {
            let (av, bv) = (av.clone(), bv.clone());
            Box::new(move |g: &Tensor, grads: &mut [Tensor]| {
                // loss = mean_z (1 - dot/(na*nb)); d(loss)/d(cos_z) = -1/z.
                let coef = -(g.item() as f64) / z as f64;
                for (zi, &(dot, na, nb, fa, fb)) in rows.iter().enumerate() {
                    let ra = &av.data()[zi * d..(zi + 1) * d];
                    let rb = &bv.data()[zi * d..(zi + 1) * d];
                    if na_ {
                        let ga = grads[a.0].data_mut();
                        for i in 0..d {
                            // d(cos)/d(a_i); the norm term vanishes when the
                            // floor is active (na is then a constant).
                            let mut dcos = rb[i] as f64 / (na * nb);
                            if !fa {
                                dcos -= dot * ra[i] as f64 / (na * na * na * nb);
                            }
                            ga[zi * d + i] += (coef * dcos) as f32;
                        }
                    }
                    if nb_ {
                        let gb = grads[b.0].data_mut();
                        for i in 0..d {
                            let mut dcos = ra[i] as f64 / (na * nb);
                            if !fb {
                                dcos -= dot * rb[i] as f64 / (nb * nb * nb * na);
                            }
                            gb[zi * d + i] += (coef * dcos) as f32;
                        }
                    }
                }
            }) as BackFn
        });
        self.push(Tensor::scalar(mean as f32), needs, back, Some(mean))
    }

    /// Weighted sum of scalar nodes: `sum_i coeff_i * term_i`.  Keeps an
    /// `f64` side-value built from the terms' side-values where available.
    pub fn linear_combination(&mut self, terms: &[(VarId, f64)]) -> VarId {
        let mut sum = 0.0f64;
        let mut needs = false;
        for &(id, c) in terms {
            assert_eq!(self.vals[id.0].numel(), 1, "linear_combination needs scalars");
            sum += c * self.scalar_f64(id);
            needs |= self.needs[id.0];
        }
        let captured: Vec<(usize, f64)> = terms.iter().map(|&(id, c)| (id.0, c)).collect();
        let needs_flags: Vec<bool> = terms.iter().map(|&(id, _)| self.needs[id.0]).collect();
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &Tensor, grads: &mut [Tensor]| {
                let gv = g.item();
                for (&(id, c), &nd) in captured.iter().zip(&needs_flags) {
                    if nd {
                        grads[id].data_mut()[0] += c as f32 * gv;
                    }
                }
            }) as BackFn
        });
        self.push(Tensor::scalar(sum as f32), needs, back, Some(sum))
    }
}

/// Verify the analytic gradient of a scalar-valued graph against central
/// finite differences.
///
/// `build` must construct the same computation from the leaves it is given;
/// it is re-run with perturbed inputs.  Differences are taken on the `f64`
/// side-values of loss ops, the forward math stays 32-bit.  For every
/// element, with analytic gradient `a` and finite-difference estimate `f`,
/// the check requires `|a - f| / max(1, |a|, |f|) < tol`.  Returns the
/// largest such normalized error.
///
/// # Panics
/// Panics with a descriptive message on the first element exceeding `tol`.
pub fn gradcheck(
    build: impl Fn(&mut Graph, &[VarId]) -> VarId,
    inits: &[Tensor],
    step: f64,
    tol: f64,
) -> f64 {
    let mut g = Graph::new();
    let leaves: Vec<VarId> = inits.iter().map(|t| g.leaf(t.clone())).collect();
    let root = build(&mut g, &leaves);
    g.backward(root);
    let analytic: Vec<Tensor> = leaves.iter().map(|&l| g.grad(l).clone()).collect();

    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let leaves: Vec<VarId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let root = build(&mut g, &leaves);
        g.scalar_f64(root)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inits.to_vec();
    for (ti, init) in inits.iter().enumerate() {
        for ei in 0..init.numel() {
            let x = init.data()[ei] as f64;
            let h = step * x.abs().max(1.0);
            work[ti].data_mut()[ei] = (x + h) as f32;
            let up = eval(&work);
            work[ti].data_mut()[ei] = (x - h) as f32;
            let down = eval(&work);
            work[ti].data_mut()[ei] = x as f32;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[ti].data()[ei] as f64;
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
            assert!(
                err < tol,
                "gradcheck failed: tensor {ti} element {ei}: analytic {an:.6e} vs fd {fd:.6e} (err {err:.3e} >= {tol:.1e})"
            );
            worst = worst.max(err);
        }
    }
    worst
}
