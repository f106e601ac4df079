//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op records its output
//! value and, when any input requires a gradient, a closure mapping the
//! output gradient to input gradients. Ops whose inputs are all constant are
//! recorded without a closure, so frozen subnetworks cost one forward pass.

use super::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arguments handed to a backward closure.
pub struct BwdCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub out: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&BwdCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "not a scalar: {:?}", t.shape());
        t.data()[0]
    }

    fn push<F>(&mut self, value: Tensor<T>, parents: &[Var], bw: F) -> Var
    where
        F: Fn(&BwdCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if needs_grad { Some(Box::new(bw)) } else { None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            // leaves have no closure and keep their accumulated gradient
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BwdCtx {
                grad: &grad,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| self.nodes[p].needs_grad).collect(),
            };
            let parent_grads = bw(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].needs_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }

    // ----------------------------------------------------------------------
    // elementwise
    // ----------------------------------------------------------------------

    /// Unary elementwise op; `df(x, y)` returns dy/dx.
    pub fn map<F, D>(&mut self, x: Var, f: F, df: D) -> Var
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let out = self.value(x).map(f);
        self.push(out, &[x], move |c| {
            let g = c
                .grad
                .data()
                .iter()
                .zip(c.inputs[0].data())
                .zip(c.out.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(c.grad.shape(), g))]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, &[a, b], |c| vec![Some(c.grad.clone()), Some(c.grad.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, &[a, b], |c| {
            vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, &[a, b], |c| {
            vec![
                c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y)),
                c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        self.map(x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        self.map(x, move |v| v + s, |_, _| T::one())
    }

    pub fn square(&mut self, x: Var) -> Var {
        let two = T::lit(2.0);
        self.map(x, |v| v * v, move |x, _| two * x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map(x, |v| v.ln(), |x, _| x.recip())
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.map(x, |v| v.sin(), |x, _| x.cos())
    }

    pub fn abs_smooth(&mut self, x: Var, eps: f64) -> Var {
        let e = T::lit(eps);
        self.map(x, move |v| (v * v + e).sqrt(), |x, y| x / y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        self.map(
            x,
            move |v| if v > T::zero() { v } else { v * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::lit(lo), T::lit(hi));
        self.map(
            x,
            move |v| v.max(l).min(h),
            move |x, _| {
                if x >= l && x <= h {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// `x − sin(2πx)/(2π)`: a differentiable stand-in for rounding whose
    /// derivative vanishes at integers.
    pub fn soft_round(&mut self, x: Var) -> Var {
        let tau = T::lit(std::f64::consts::TAU);
        self.map(
            x,
            move |v| v - (tau * v).sin() / tau,
            move |x, _| T::one() - (tau * x).cos(),
        )
    }

    // ----------------------------------------------------------------------
    // reductions
    // ----------------------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), &[x], |c| {
            vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.data()[0]))]
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over the trailing axis of a 2-d tensor: (N, F) → (N).
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, f) = self.value(x).dims2();
        let inv = T::lit(1.0 / f as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(f)
            .map(|r| r.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(Tensor::new(&[n], out), &[x], move |c| {
            let g: Vec<T> = c
                .grad
                .data()
                .iter()
                .flat_map(|&g| std::iter::repeat_n(g * inv, f))
                .collect();
            vec![Some(Tensor::new(&[n, f], g))]
        })
    }

    /// Row-wise log-sum-exp, (N, F) → (N), evaluated with the max shift
    /// `m + ln Σ exp(x − m)` so no exponent exceeds zero.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let (n, f) = self.value(x).dims2();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(f)
            .map(|r| logsumexp(r))
            .collect();
        self.push(Tensor::new(&[n], out), &[x], move |c| {
            let mut g = Vec::with_capacity(n * f);
            for ((row, &lse), &go) in c
                .inputs[0]
                .data()
                .chunks(f)
                .zip(c.out.data())
                .zip(c.grad.data())
            {
                g.extend(row.iter().map(|&v| go * (v - lse).exp()));
            }
            vec![Some(Tensor::new(&[n, f], g))]
        })
    }

    // ----------------------------------------------------------------------
    // shapes
    // ----------------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, &[x], |c| {
            vec![Some(c.grad.clone().reshape(c.inputs[0].shape()))]
        })
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let chans: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pn, pc, ph, pw) = self.value(p).dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat spatial mismatch");
                pc
            })
            .collect();
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = vec![T::zero(); n * total * hw];
        let mut off = 0;
        for (&p, &pc) in parts.iter().zip(&chans) {
            let src = self.value(p).data();
            for b in 0..n {
                let dst = (b * total + off) * hw;
                out[dst..dst + pc * hw].copy_from_slice(&src[b * pc * hw..(b + 1) * pc * hw]);
            }
            off += pc;
        }
        self.push(Tensor::new(&[n, total, h, w], out), parts, move |c| {
            let mut grads = Vec::with_capacity(chans.len());
            let mut off = 0;
            for (i, &pc) in chans.iter().enumerate() {
                if c.needs[i] {
                    let mut g = vec![T::zero(); n * pc * hw];
                    for b in 0..n {
                        let s = (b * total + off) * hw;
                        g[b * pc * hw..(b + 1) * pc * hw]
                            .copy_from_slice(&c.grad.data()[s..s + pc * hw]);
                    }
                    grads.push(Some(Tensor::new(&[n, pc, h, w], g)));
                } else {
                    grads.push(None);
                }
                off += pc;
            }
            grads
        })
    }

    /// Reorders channels of an NCHW tensor: output channel `i` is input
    /// channel `perm[i]`.
    pub fn permute_channels(&mut self, x: Var, perm: &[usize]) -> Var {
        let (n, ch, h, w) = self.value(x).dims4();
        assert_eq!(perm.len(), ch);
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for (i, &p) in perm.iter().enumerate() {
                let d = (b * ch + i) * hw;
                let s = (b * ch + p) * hw;
                out[d..d + hw].copy_from_slice(&src[s..s + hw]);
            }
        }
        let perm = perm.to_vec();
        self.push(Tensor::new(&[n, ch, h, w], out), &[x], move |c| {
            let mut g = vec![T::zero(); c.grad.numel()];
            for b in 0..n {
                for (i, &p) in perm.iter().enumerate() {
                    let d = (b * ch + i) * hw;
                    let s = (b * ch + p) * hw;
                    g[s..s + hw].copy_from_slice(&c.grad.data()[d..d + hw]);
                }
            }
            vec![Some(Tensor::new(&[n, ch, h, w], g))]
        })
    }

    // ----------------------------------------------------------------------
    // dense layers
    // ----------------------------------------------------------------------

    /// `x (N, F) · wᵀ` with `w (O, F)`, plus optional bias `b (O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, f) = self.value(x).dims2();
        let (o, wf) = self.value(w).dims2();
        assert_eq!(f, wf, "linear: feature mismatch");
        let mut out = vec![T::zero(); n * o];
        gemm(n, f, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), o);
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(Tensor::new(&[n, o], out), &parents, move |c| {
            let g = c.grad.data();
            let gx = c.needs[0].then(|| {
                let mut gx = vec![T::zero(); n * f];
                gemm(n, o, f, g, false, c.inputs[1].data(), false, &mut gx, false);
                Tensor::new(&[n, f], gx)
            });
            let gw = c.needs[1].then(|| {
                let mut gw = vec![T::zero(); o * f];
                gemm(o, n, f, g, true, c.inputs[0].data(), false, &mut gw, false);
                Tensor::new(&[o, f], gw)
            });
            let mut grads = vec![gx, gw];
            if c.inputs.len() == 3 {
                grads.push(c.needs[2].then(|| {
                    let mut gb = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::new(&[o], gb)
                }));
            }
            grads
        })
    }

    // ----------------------------------------------------------------------
    // spatial
    // ----------------------------------------------------------------------

    /// 2-d convolution of `x (N, C, H, W)` with `w (O, C, k, k)`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, ch, h, wd) = self.value(x).dims4();
        let (o, wc, k, k2) = self.value(w).dims4();
        assert_eq!(ch, wc, "conv2d: channel mismatch");
        assert_eq!(k, k2, "conv2d: square kernels only");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: input smaller than kernel");
        let geo = ConvGeometry {
            n,
            ch,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = geo.im2col(self.value(x).data());
        let ckk = ch * k * k;
        let cols_n = n * geo.oh * geo.ow;
        let mut mat = vec![T::zero(); o * cols_n];
        gemm(o, ckk, cols_n, self.value(w).data(), false, &cols, false, &mut mat, false);
        let ohw = geo.oh * geo.ow;
        let mut out = vec![T::zero(); n * o * ohw];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for oc in 0..o {
            let bb = bias.as_ref().map_or(T::zero(), |bv| bv[oc]);
            for bi in 0..n {
                let src = &mat[oc * cols_n + bi * ohw..oc * cols_n + (bi + 1) * ohw];
                let dst = &mut out[(bi * o + oc) * ohw..(bi * o + oc + 1) * ohw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bb;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        // the column buffer is only needed for the weight gradient
        let cols = if self.needs_grad(w) { cols } else { Vec::new() };
        self.push(Tensor::new(&[n, o, geo.oh, geo.ow], out), &parents, move |c| {
            let g = c.grad.data();
            // (N, O, ohw) → (O, N·ohw)
            let mut gmat = vec![T::zero(); o * cols_n];
            for bi in 0..n {
                for oc in 0..o {
                    gmat[oc * cols_n + bi * ohw..oc * cols_n + (bi + 1) * ohw]
                        .copy_from_slice(&g[(bi * o + oc) * ohw..(bi * o + oc + 1) * ohw]);
                }
            }
            let gx = c.needs[0].then(|| {
                let mut gcols = vec![T::zero(); ckk * cols_n];
                gemm(ckk, o, cols_n, c.inputs[1].data(), true, &gmat, false, &mut gcols, false);
                Tensor::new(&[n, ch, h, wd], geo.col2im(&gcols))
            });
            let gw = c.needs[1].then(|| {
                let mut gw = vec![T::zero(); o * ckk];
                gemm(o, cols_n, ckk, &gmat, false, &cols, true, &mut gw, false);
                Tensor::new(&[o, ch, k, k], gw)
            });
            let mut grads = vec![gx, gw];
            if c.inputs.len() == 3 {
                grads.push(c.needs[2].then(|| {
                    let gb: Vec<T> = gmat.chunks(cols_n).map(|r| r.iter().copied().sum()).collect();
                    Tensor::new(&[o], gb)
                }));
            }
            grads
        })
    }

    /// Nearest-neighbour resize of an NCHW tensor to `(oh, ow)`.
    pub fn upsample_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (n, ch, h, w) = self.value(x).dims4();
        let ys: Vec<usize> = (0..oh).map(|i| i * h / oh).collect();
        let xs: Vec<usize> = (0..ow).map(|j| j * w / ow).collect();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * ch * oh * ow];
        for p in 0..n * ch {
            for (i, &sy) in ys.iter().enumerate() {
                for (j, &sx) in xs.iter().enumerate() {
                    out[(p * oh + i) * ow + j] = src[(p * h + sy) * w + sx];
                }
            }
        }
        self.push(Tensor::new(&[n, ch, oh, ow], out), &[x], move |c| {
            let mut g = vec![T::zero(); n * ch * h * w];
            let gd = c.grad.data();
            for p in 0..n * ch {
                for (i, &sy) in ys.iter().enumerate() {
                    for (j, &sx) in xs.iter().enumerate() {
                        g[(p * h + sy) * w + sx] += gd[(p * oh + i) * ow + j];
                    }
                }
            }
            vec![Some(Tensor::new(&[n, ch, h, w], g))]
        })
    }

    /// Non-overlapping `k × k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let (n, ch, h, w) = self.value(x).dims4();
        assert!(h % k == 0 && w % k == 0, "avg_pool: {h}x{w} not divisible by {k}");
        let (oh, ow) = (h / k, w / k);
        let inv = T::lit(1.0 / (k * k) as f64);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * ch * oh * ow];
        for p in 0..n * ch {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * oh + y / k) * ow + xx / k] += src[(p * h + y) * w + xx] * inv;
                }
            }
        }
        self.push(Tensor::new(&[n, ch, oh, ow], out), &[x], move |c| {
            let gd = c.grad.data();
            let mut g = vec![T::zero(); n * ch * h * w];
            for p in 0..n * ch {
                for y in 0..h {
                    for xx in 0..w {
                        g[(p * h + y) * w + xx] = gd[(p * oh + y / k) * ow + xx / k] * inv;
                    }
                }
            }
            vec![Some(Tensor::new(&[n, ch, h, w], g))]
        })
    }

    /// Spatial mean: (N, C, H, W) → (N, C).
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, ch, h, w) = self.value(x).dims4();
        let hw = h * w;
        let inv = T::lit(1.0 / hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(Tensor::new(&[n, ch], out), &[x], move |c| {
            let g: Vec<T> = c
                .grad
                .data()
                .iter()
                .flat_map(|&g| std::iter::repeat_n(g * inv, hw))
                .collect();
            vec![Some(Tensor::new(&[n, ch, h, w], g))]
        })
    }

    /// Symmetric padding by `p` on each side, mirroring about the pixel
    /// edge so the border sample repeats (`d c b a | a b c d | d c b a`).
    /// With a symmetric kernel this keeps the image sum unchanged.
    pub fn pad_reflect(&mut self, x: Var, p: usize) -> Var {
        let (n, ch, h, w) = self.value(x).dims4();
        assert!(p <= h && p <= w, "reflect pad {p} too large for {h}x{w}");
        let (oh, ow) = (h + 2 * p, w + 2 * p);
        let rows: Vec<usize> = (0..oh).map(|i| reflect(i as isize - p as isize, h)).collect();
        let cols: Vec<usize> = (0..ow).map(|j| reflect(j as isize - p as isize, w)).collect();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * ch * oh * ow];
        for q in 0..n * ch {
            for (i, &sy) in rows.iter().enumerate() {
                for (j, &sx) in cols.iter().enumerate() {
                    out[(q * oh + i) * ow + j] = src[(q * h + sy) * w + sx];
                }
            }
        }
        self.push(Tensor::new(&[n, ch, oh, ow], out), &[x], move |c| {
            let gd = c.grad.data();
            let mut g = vec![T::zero(); n * ch * h * w];
            for q in 0..n * ch {
                for (i, &sy) in rows.iter().enumerate() {
                    for (j, &sx) in cols.iter().enumerate() {
                        g[(q * h + sy) * w + sx] += gd[(q * oh + i) * ow + j];
                    }
                }
            }
            vec![Some(Tensor::new(&[n, ch, h, w], g))]
        })
    }

    /// Per-pixel affine colour transform `out_c = Σ_k m[c][k]·x_k + offset_c`
    /// on a 3-channel NCHW tensor.
    pub fn color_affine(&mut self, x: Var, m: [[f64; 3]; 3], offset: [f64; 3]) -> Var {
        let (n, ch, h, w) = self.value(x).dims4();
        assert_eq!(ch, 3, "color_affine needs 3 channels");
        let hw = h * w;
        let mt: [[T; 3]; 3] = m.map(|r| r.map(T::lit));
        let off = offset.map(T::lit);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            let base = b * 3 * hw;
            for i in 0..hw {
                let px = [src[base + i], src[base + hw + i], src[base + 2 * hw + i]];
                for c in 0..3 {
                    out[base + c * hw + i] =
                        mt[c][0] * px[0] + mt[c][1] * px[1] + mt[c][2] * px[2] + off[c];
                }
            }
        }
        self.push(Tensor::new(&[n, 3, h, w], out), &[x], move |c| {
            let gd = c.grad.data();
            let mut g = vec![T::zero(); gd.len()];
            for b in 0..n {
                let base = b * 3 * hw;
                for i in 0..hw {
                    let go = [gd[base + i], gd[base + hw + i], gd[base + 2 * hw + i]];
                    for k in 0..3 {
                        g[base + k * hw + i] =
                            mt[0][k] * go[0] + mt[1][k] * go[1] + mt[2][k] * go[2];
                    }
                }
            }
            vec![Some(Tensor::new(&[n, 3, h, w], g))]
        })
    }

    /// Orthonormal 8×8 block DCT-II (or its inverse) over each channel plane.
    pub fn block_dct8(&mut self, x: Var, inverse: bool) -> Var {
        let (n, ch, h, w) = self.value(x).dims4();
        assert!(h % 8 == 0 && w % 8 == 0, "block_dct8 needs multiples of 8");
        let basis = dct8_basis::<T>();
        let out = block_transform(self.value(x).data(), n * ch, h, w, &basis, inverse);
        self.push(Tensor::new(&[n, ch, h, w], out), &[x], move |c| {
            // orthonormal: the adjoint of the forward transform is the inverse
            let g = block_transform(c.grad.data(), n * ch, h, w, &basis, !inverse);
            vec![Some(Tensor::new(&[n, ch, h, w], g))]
        })
    }

    /// Multiplies every 8×8 block of each plane elementwise by `table`
    /// (row-major 8×8, natural order). `tables[c]` is used for channel `c`.
    pub fn mul_block_table(&mut self, x: Var, tables: &[[f64; 64]]) -> Var {
        let (n, ch, h, w) = self.value(x).dims4();
        assert_eq!(tables.len(), ch);
        let tabs: Vec<[T; 64]> = tables.iter().map(|t| t.map(T::lit)).collect();
        let apply = move |src: &[T]| -> Vec<T> {
            let mut out = vec![T::zero(); src.len()];
            for b in 0..n {
                for (c, tab) in tabs.iter().enumerate() {
                    let base = (b * ch + c) * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            let i = base + y * w + xx;
                            out[i] = src[i] * tab[(y % 8) * 8 + xx % 8];
                        }
                    }
                }
            }
            out
        };
        let out = apply(self.value(x).data());
        self.push(Tensor::new(&[n, ch, h, w], out), &[x], move |c| {
            vec![Some(Tensor::new(&[n, ch, h, w], apply(c.grad.data())))]
        })
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Max-shifted log-sum-exp of a slice; `-inf` for an empty slice.
pub fn logsumexp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    };
    r as usize
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    n: usize,
    ch: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    /// Columns laid out as (C·k·k, N·oh·ow).
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let ohw = self.oh * self.ow;
        let cols_n = self.n * ohw;
        let mut cols = vec![T::zero(); self.ch * self.k * self.k * cols_n];
        for c in 0..self.ch {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for b in 0..self.n {
                        let plane = &x[(b * self.ch + c) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let src_row = &plane[iy as usize * self.w..][..self.w];
                            let dst = &mut dst_row[b * ohw + oy * self.ow..][..self.ow];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T]) -> Vec<T> {
        let ohw = self.oh * self.ow;
        let cols_n = self.n * ohw;
        let mut x = vec![T::zero(); self.n * self.ch * self.h * self.w];
        for c in 0..self.ch {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                    for b in 0..self.n {
                        let base = (b * self.ch + c) * self.h * self.w;
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let src = &src_row[b * ohw + oy * self.ow..][..self.ow];
                            let dst_row = base + iy as usize * self.w;
                            for (ox, &s) in src.iter().enumerate() {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    x[dst_row + ix as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Orthonormal DCT-II basis, `basis[u][x]`.
pub fn dct8_basis<T: Real>() -> [[T; 8]; 8] {
    let mut b = [[T::zero(); 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let scale = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            let angle = (2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0;
            *v = T::lit(scale * angle.cos());
        }
    }
    b
}

fn block_transform<T: Real>(
    src: &[T],
    planes: usize,
    h: usize,
    w: usize,
    basis: &[[T; 8]; 8],
    inverse: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    let mut blk = [[T::zero(); 8]; 8];
    let mut tmp = [[T::zero(); 8]; 8];
    for p in 0..planes {
        let base = p * h * w;
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for (i, row) in blk.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = src[base + (by + i) * w + bx + j];
                    }
                }
                // forward: B X Bᵀ; inverse: Bᵀ Y B
                for i in 0..8 {
                    for j in 0..8 {
                        let mut acc = T::zero();
                        for t in 0..8 {
                            let coef = if inverse { basis[t][i] } else { basis[i][t] };
                            acc += coef * blk[t][j];
                        }
                        tmp[i][j] = acc;
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let mut acc = T::zero();
                        for t in 0..8 {
                            let coef = if inverse { basis[t][j] } else { basis[j][t] };
                            acc += tmp[i][t] * coef;
                        }
                        out[base + (by + i) * w + bx + j] = acc;
                    }
                }
            }
        }
    }
    out
}
