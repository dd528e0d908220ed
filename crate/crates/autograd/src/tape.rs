//! The tape (Wengert list) and the differentiable operation set.
//!
//! Shape rules are enforced with assertions: a mismatch is a programming
//! error in the calling model code, not a recoverable condition.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

/// Dynamically shaped `f64` array, the single value type on the tape.
pub type Arr = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Arr, &mut GradSink)>;

struct Node {
    value: Arc<Arr>,
    backward: Option<BackFn>,
}

/// Accumulator for gradients during the reverse sweep.
pub struct GradSink {
    grads: Vec<Option<Arr>>,
}

impl GradSink {
    fn accum(&mut self, v: Var, g: Arr) {
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }
}

/// Gradients of one scalar output with respect to every tape node.
///
/// Nodes the output does not depend on (including anything behind a
/// [`Tape::detach`]) have no entry; their gradient is identically zero.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert!(a.len() == 1, "scalar_value on array of len {}", a.len());
        *a.iter().next().unwrap()
    }

    fn push(&mut self, value: Arr, backward: Option<BackFn>) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    fn arc(&self, v: Var) -> Arc<Arr> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// Insert an input (leaf) value.
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, None)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(ndarray::arr0(value).into_dyn(), None)
    }

    /// Copy a value onto the tape with its history cut: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, None)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert!(
            self.value(output).len() == 1,
            "backward requires a scalar output"
        );
        let mut sink = GradSink {
            grads: vec![None; self.nodes.len()],
        };
        sink.grads[output.0] = Some(Arr::ones(self.value(output).raw_dim()));
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = sink.grads[i].take() else {
                continue;
            };
            if let Some(back) = &self.nodes[i].backward {
                back(&g, &mut sink);
            }
            sink.grads[i] = Some(g);
        }
        Gradients { grads: sink.grads }
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.ew2("add", a, b, |x, y| x + y, |_, _, g| (g.clone(), g.clone()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.ew2("sub", a, b, |x, y| x - y, |_, _, g| (g.clone(), -g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.ew2("mul", a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.ew2(
            "div",
            a,
            b,
            |x, y| x / y,
            |x, y, g| (g / y, -(g * x) / (y * y)),
        )
    }

    fn ew2(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(&Arr, &Arr) -> Arr,
        df: impl Fn(&Arr, &Arr, &Arr) -> (Arr, Arr) + 'static,
    ) -> Var {
        let (va, vb) = (self.arc(a), self.arc(b));
        assert_eq!(va.shape(), vb.shape(), "{op}: operand shapes differ");
        let out = f(&va, &vb);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let (ga, gb) = df(&va, &vb, g);
                sink.accum(a, ga);
                sink.accum(b, gb);
            })),
        )
    }

    /// `x + p` where the shape of `p` is a suffix of the shape of `x`
    /// (broadcast over the leading axes).
    pub fn add_bcast(&mut self, x: Var, p: Var) -> Var {
        let (vx, vp) = (self.arc(x), self.arc(p));
        let (sx, sp) = (vx.shape().to_vec(), vp.shape().to_vec());
        assert!(
            sx.len() >= sp.len() && sx[sx.len() - sp.len()..] == sp[..],
            "add_bcast: {sp:?} is not a suffix of {sx:?}"
        );
        let lead = sx.len() - sp.len();
        let out = &*vx + &vp.broadcast(vx.raw_dim()).unwrap();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(x, g.clone());
                let mut gp = g.clone();
                for _ in 0..lead {
                    gp = gp.sum_axis(Axis(0));
                }
                sink.accum(p, gp);
            })),
        )
    }

    // ---- elementwise unary ----

    pub fn neg(&mut self, a: Var) -> Var {
        self.ew1(a, |x| -x, |_, _, g| -g)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.ew1(a, move |x| x + c, |_, _, g| g.clone())
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.ew1(a, move |x| x * c, move |_, _, g| g * c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.ew1(
            a,
            |x| x.mapv(|v| v.max(0.0)),
            |x, _, g| g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.ew1(
            a,
            |x| x.mapv(|v| 1.0 / (1.0 + (-v).exp())),
            |_, y, g| g * &y.mapv(|s| s * (1.0 - s)),
        )
    }

    /// GELU with the tanh approximation; the derivative matches the
    /// approximation, not the erf form.
    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const K: f64 = 0.044715;
        self.ew1(
            a,
            |x| x.mapv(|v| 0.5 * v * (1.0 + (C * (v + K * v * v * v)).tanh())),
            |x, _, g| {
                g * &x.mapv(|v| {
                    let inner = C * (v + K * v * v * v);
                    let t = inner.tanh();
                    let dinner = C * (1.0 + 3.0 * K * v * v);
                    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
                })
            },
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.ew1(a, |x| x.mapv(f64::exp), |_, y, g| g * y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.ew1(a, |x| x.mapv(f64::ln), |x, _, g| g / x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.ew1(a, |x| x.mapv(f64::sqrt), |_, y, g| g / &(y * 2.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.ew1(a, |x| x * x, |x, _, g| g * &(x * 2.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.ew1(a, |x| x.mapv(f64::abs), |x, _, g| g * &x.mapv(f64::signum))
    }

    fn ew1(
        &mut self,
        a: Var,
        f: impl Fn(&Arr) -> Arr,
        df: impl Fn(&Arr, &Arr, &Arr) -> Arr + 'static,
    ) -> Var {
        let va = self.arc(a);
        let out = f(&va);
        let v = self.push(out, None);
        let vy = self.arc(v);
        self.nodes[v.0].backward = Some(Box::new(move |g, sink| {
            sink.accum(a, df(&va, &vy, g));
        }));
        v
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = self.arc(a);
        let old = va.raw_dim();
        let out = va
            .to_shape(IxDyn(shape))
            .unwrap_or_else(|_| panic!("reshape: {:?} -> {shape:?}", va.shape()))
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(a, g.to_shape(old.clone()).unwrap().to_owned());
            })),
        )
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let va = self.arc(a);
        assert_eq!(va.ndim(), 2, "transpose2 requires a 2-d array");
        let out = va.t().to_owned();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(a, g.t().to_owned());
            })),
        )
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let va = self.arc(a);
        assert_eq!(va.ndim(), axes.len(), "permute: axes/rank mismatch");
        let out = va
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        // inverse permutation for the backward pass
        let mut inv = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inv[ax] = i;
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(
                    a,
                    g.view()
                        .permuted_axes(IxDyn(&inv))
                        .as_standard_layout()
                        .to_owned(),
                );
            })),
        )
    }

    /// Take the half-open range `start..end` along `axis`; the backward pass
    /// pads the complement with zeros.
    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let va = self.arc(a);
        assert!(
            start < end && end <= va.shape()[axis],
            "slice_axis: bad range {start}..{end} on axis {axis} of {:?}",
            va.shape()
        );
        let out = va
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .to_owned();
        let in_dim = va.raw_dim();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = Arr::zeros(in_dim.clone());
                ga.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..end))
                    .assign(g);
                sink.accum(a, ga);
            })),
        )
    }

    /// Concatenate along `axis`.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<Arc<Arr>> = parts.iter().map(|&p| self.arc(p)).collect();
        let out = ndarray::concatenate(
            Axis(axis),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat: incompatible shapes");
        let parts = parts.to_vec();
        let sizes: Vec<usize> = views.iter().map(|v| v.shape()[axis]).collect();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut start = 0;
                for (&p, &len) in parts.iter().zip(&sizes) {
                    let slice = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    sink.accum(p, slice);
                    start += len;
                }
            })),
        )
    }

    /// Gather rows (axis 0); an index may appear more than once.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.arc(a);
        let out = va.select(Axis(0), idx);
        let idx = idx.to_vec();
        let in_dim = va.raw_dim();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = Arr::zeros(in_dim.clone());
                for (row, &i) in idx.iter().enumerate() {
                    let mut dst = ga.index_axis_mut(Axis(0), i);
                    dst += &g.index_axis(Axis(0), row);
                }
                sink.accum(a, ga);
            })),
        )
    }

    /// Tile a 1-d vector into `n` identical rows.
    pub fn repeat_rows(&mut self, v: Var, n: usize) -> Var {
        let vv = self.arc(v);
        let d = vv.len();
        let row = vv.view().into_dimensionality::<Ix1>().expect("repeat_rows: 1-d input");
        let out = Array2::from_shape_fn((n, d), |(_, j)| row[j]).into_dyn();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(v, g.sum_axis(Axis(0)));
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = self.arc(a);
        let out = ndarray::arr0(va.sum()).into_dyn();
        let dim = va.raw_dim();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gv = g[[]];
                sink.accum(a, Arr::from_elem(dim.clone(), gv));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let va = self.arc(a);
        let v4 = va.view().into_dimensionality::<Ix4>().expect("global_avg_pool: 4-d input");
        let (n, c, h, w) = v4.dim();
        let mut out = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for j in 0..c {
                out[[i, j]] = v4.index_axis(Axis(0), i).index_axis(Axis(0), j).mean().unwrap();
            }
        }
        let scale = 1.0 / (h * w) as f64;
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut ga = Array4::<f64>::zeros((n, c, h, w));
                for i in 0..n {
                    for j in 0..c {
                        ga.index_axis_mut(Axis(0), i)
                            .index_axis_mut(Axis(0), j)
                            .fill(g2[[i, j]] * scale);
                    }
                }
                sink.accum(a, ga.into_dyn());
            })),
        )
    }

    /// 2x2 average pooling (spatial sides must be even).
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let va = self.arc(a);
        let v4 = va.view().into_dimensionality::<Ix4>().expect("avg_pool2: 4-d input");
        let (n, c, h, w) = v4.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial side {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::<f64>::zeros((n, c, oh, ow));
        for i in 0..n {
            for j in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        out[[i, j, y, x]] = 0.25
                            * (v4[[i, j, 2 * y, 2 * x]]
                                + v4[[i, j, 2 * y, 2 * x + 1]]
                                + v4[[i, j, 2 * y + 1, 2 * x]]
                                + v4[[i, j, 2 * y + 1, 2 * x + 1]]);
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut ga = Array4::<f64>::zeros((n, c, h, w));
                for i in 0..n {
                    for j in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let gv = 0.25 * g4[[i, j, y, x]];
                                ga[[i, j, 2 * y, 2 * x]] += gv;
                                ga[[i, j, 2 * y, 2 * x + 1]] += gv;
                                ga[[i, j, 2 * y + 1, 2 * x]] += gv;
                                ga[[i, j, 2 * y + 1, 2 * x + 1]] += gv;
                            }
                        }
                    }
                }
                sink.accum(a, ga.into_dyn());
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.arc(a), self.arc(b));
        let a2 = va.view().into_dimensionality::<Ix2>().expect("matmul: lhs 2-d");
        let b2 = vb.view().into_dimensionality::<Ix2>().expect("matmul: rhs 2-d");
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dims differ");
        let out = a2.dot(&b2).into_dyn();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
                sink.accum(a, g2.dot(&b2.t()).into_dyn());
                sink.accum(b, a2.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.arc(a), self.arc(b));
        assert!(va.ndim() == 3 && vb.ndim() == 3, "batch_matmul: 3-d inputs");
        let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (bs2, k2, n) = (vb.shape()[0], vb.shape()[1], vb.shape()[2]);
        assert!(bs == bs2 && k == k2, "batch_matmul: shape mismatch");
        let mut out = ArrayD::zeros(IxDyn(&[bs, m, n]));
        for i in 0..bs {
            let ai = va.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            let bi = vb.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = Arr::zeros(va.raw_dim());
                let mut gb = Arr::zeros(vb.raw_dim());
                for i in 0..bs {
                    let gi = g.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                    let ai = va.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                    let bi = vb.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                    ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    gb.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                sink.accum(a, ga);
                sink.accum(b, gb);
            })),
        )
    }

    /// Affine map over the last axis: `[..., i] x [i, o] (+ [o]) -> [..., o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.arc(x), self.arc(w));
        let w2 = vw.view().into_dimensionality::<Ix2>().expect("linear: weight 2-d");
        let (i, o) = w2.dim();
        let xs = vx.shape().to_vec();
        assert_eq!(*xs.last().unwrap(), i, "linear: input dim mismatch");
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let x2 = vx.to_shape((rows, i)).unwrap();
        let mut y2 = x2.dot(&w2);
        if let Some(bv) = b {
            let vb = self.arc(bv);
            let b1 = vb.view().into_dimensionality::<Ix1>().expect("linear: bias 1-d");
            assert_eq!(b1.len(), o, "linear: bias dim mismatch");
            y2 += &b1;
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = o;
        let out = y2.into_shape_with_order(IxDyn(&out_shape)).unwrap();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g2 = g.to_shape((rows, o)).unwrap();
                let x2 = vx.to_shape((rows, i)).unwrap();
                let w2 = vw.view().into_dimensionality::<Ix2>().unwrap();
                let gx = g2.dot(&w2.t());
                sink.accum(x, gx.into_shape_with_order(IxDyn(&xs)).unwrap());
                sink.accum(w, x2.t().dot(&g2).into_dyn());
                if let Some(bv) = b {
                    sink.accum(bv, g2.sum_axis(Axis(0)).into_dyn());
                }
            })),
        )
    }

    /// 2-d convolution via im2col. `x: [n, c, h, w]`, `w: [o, c, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.arc(x), self.arc(w));
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("conv2d: input 4-d");
        let w4 = vw.view().into_dimensionality::<Ix4>().expect("conv2d: weight 4-d");
        let (n, c, h, wd) = x4.dim();
        let (o, cw, kh, kw) = w4.dim();
        assert_eq!(c, cw, "conv2d: channel mismatch");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let wmat = w4.to_shape((o, c * kh * kw)).unwrap().to_owned();
        let mut out = Array4::<f64>::zeros((n, o, oh, ow));
        for ni in 0..n {
            let cols = im2col(&x4.index_axis(Axis(0), ni), kh, kw, stride, pad, oh, ow);
            let y = wmat.dot(&cols); // [o, oh*ow]
            out.index_axis_mut(Axis(0), ni)
                .assign(&y.into_shape_with_order((o, oh, ow)).unwrap());
        }
        if let Some(bv) = b {
            let vb = self.arc(bv);
            let b1 = vb.view().into_dimensionality::<Ix1>().expect("conv2d: bias 1-d");
            assert_eq!(b1.len(), o, "conv2d: bias dim mismatch");
            for ni in 0..n {
                for oi in 0..o {
                    let mut plane = out.index_axis_mut(Axis(0), ni);
                    let mut plane = plane.index_axis_mut(Axis(0), oi);
                    plane += b1[oi];
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
                let w4 = vw.view().into_dimensionality::<Ix4>().unwrap();
                let wmat = w4.to_shape((o, c * kh * kw)).unwrap().to_owned();
                let mut gx = Array4::<f64>::zeros((n, c, h, wd));
                let mut gw = Array2::<f64>::zeros((o, c * kh * kw));
                for ni in 0..n {
                    let gmat = g4
                        .index_axis(Axis(0), ni)
                        .to_shape((o, oh * ow))
                        .unwrap()
                        .to_owned();
                    let cols = im2col(&x4.index_axis(Axis(0), ni), kh, kw, stride, pad, oh, ow);
                    gw += &gmat.dot(&cols.t());
                    let gcols = wmat.t().dot(&gmat); // [c*kh*kw, oh*ow]
                    col2im(
                        &gcols,
                        &mut gx.index_axis_mut(Axis(0), ni),
                        kh,
                        kw,
                        stride,
                        pad,
                        oh,
                        ow,
                    );
                }
                sink.accum(x, gx.into_dyn());
                sink.accum(
                    w,
                    gw.into_shape_with_order((o, c, kh, kw)).unwrap().into_dyn(),
                );
                if let Some(bv) = b {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let gb = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    sink.accum(bv, gb.into_dyn());
                }
            })),
        )
    }

    /// Bilinear resize of `[n, c, h, w]` to `[n, c, oh, ow]` (half-pixel centres).
    pub fn upsample_bilinear(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let va = self.arc(a);
        let v4 = va.view().into_dimensionality::<Ix4>().expect("upsample_bilinear: 4-d input");
        let (n, c, h, w) = v4.dim();
        let plan_y = bilinear_plan(h, oh);
        let plan_x = bilinear_plan(w, ow);
        let mut out = Array4::<f64>::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                let outer = v4.index_axis(Axis(0), ni);
                let src = outer.index_axis(Axis(0), ci);
                let mut dst = out.index_axis_mut(Axis(0), ni);
                let mut dst = dst.index_axis_mut(Axis(0), ci);
                for (y, &(y0, y1, ty)) in plan_y.iter().enumerate() {
                    for (x, &(x0, x1, tx)) in plan_x.iter().enumerate() {
                        dst[[y, x]] = (1.0 - ty) * ((1.0 - tx) * src[[y0, x0]] + tx * src[[y0, x1]])
                            + ty * ((1.0 - tx) * src[[y1, x0]] + tx * src[[y1, x1]]);
                    }
                }
            }
        }
        let (py, px) = (plan_y.clone(), plan_x.clone());
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut ga = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let gouter = g4.index_axis(Axis(0), ni);
                        let gsrc = gouter.index_axis(Axis(0), ci);
                        let mut gdst = ga.index_axis_mut(Axis(0), ni);
                        let mut gdst = gdst.index_axis_mut(Axis(0), ci);
                        for (y, &(y0, y1, ty)) in py.iter().enumerate() {
                            for (x, &(x0, x1, tx)) in px.iter().enumerate() {
                                let gv = gsrc[[y, x]];
                                gdst[[y0, x0]] += (1.0 - ty) * (1.0 - tx) * gv;
                                gdst[[y0, x1]] += (1.0 - ty) * tx * gv;
                                gdst[[y1, x0]] += ty * (1.0 - tx) * gv;
                                gdst[[y1, x1]] += ty * tx * gv;
                            }
                        }
                    }
                }
                sink.accum(a, ga.into_dyn());
            })),
        )
    }

    // ---- fused nn ops ----

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.arc(a);
        let out = softmax_last(&va);
        let v = self.push(out, None);
        let vy = self.arc(v);
        let d = *vy.shape().last().unwrap();
        self.nodes[v.0].backward = Some(Box::new(move |g, sink| {
            let rows = vy.len() / d;
            let p = vy.to_shape((rows, d)).unwrap();
            let g2 = g.to_shape((rows, d)).unwrap();
            let mut ga = Array2::<f64>::zeros((rows, d));
            for r in 0..rows {
                let dot: f64 = (0..d).map(|j| g2[[r, j]] * p[[r, j]]).sum();
                for j in 0..d {
                    ga[[r, j]] = p[[r, j]] * (g2[[r, j]] - dot);
                }
            }
            sink.accum(a, ga.into_shape_with_order(vy.raw_dim()).unwrap().into_dyn());
        }));
        v
    }

    /// Log-softmax over the last axis (stable).
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.arc(a);
        let p = softmax_last(&va);
        let out = p.mapv(f64::ln);
        let d = *va.shape().last().unwrap();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let rows = va.len() / d;
                let p2 = softmax_last(&va);
                let p2 = p2.to_shape((rows, d)).unwrap().to_owned();
                let g2 = g.to_shape((rows, d)).unwrap();
                let mut ga = Array2::<f64>::zeros((rows, d));
                for r in 0..rows {
                    let gsum: f64 = (0..d).map(|j| g2[[r, j]]).sum();
                    for j in 0..d {
                        ga[[r, j]] = g2[[r, j]] - p2[[r, j]] * gsum;
                    }
                }
                sink.accum(a, ga.into_shape_with_order(va.raw_dim()).unwrap().into_dyn());
            })),
        )
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (vx, vg, vb) = (self.arc(x), self.arc(gamma), self.arc(beta));
        let d = *vx.shape().last().unwrap();
        assert!(vg.len() == d && vb.len() == d, "layer_norm: param dims");
        let rows = vx.len() / d;
        let x2 = vx.to_shape((rows, d)).unwrap();
        let mut xhat = Array2::<f64>::zeros((rows, d));
        for r in 0..rows {
            let row = x2.row(r);
            let mu = row.mean().unwrap();
            let var = row.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                xhat[[r, j]] = (row[j] - mu) * inv;
            }
        }
        let g1 = vg.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = vb.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = xhat.clone();
        for r in 0..rows {
            for j in 0..d {
                y[[r, j]] = y[[r, j]] * g1[j] + b1[j];
            }
        }
        let out = y.into_shape_with_order(vx.raw_dim()).unwrap().into_dyn();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let x2 = vx.to_shape((rows, d)).unwrap();
                let g2 = g.to_shape((rows, d)).unwrap();
                let g1 = vg.view().into_dimensionality::<Ix1>().unwrap();
                let mut gx = Array2::<f64>::zeros((rows, d));
                let mut ggamma = Array1::<f64>::zeros(d);
                let mut gbeta = Array1::<f64>::zeros(d);
                for r in 0..rows {
                    let row = x2.row(r);
                    let mu = row.mean().unwrap();
                    let var = row.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) * inv).collect();
                    let dxhat: Vec<f64> = (0..d).map(|j| g2[[r, j]] * g1[j]).collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[[r, j]] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        ggamma[j] += g2[[r, j]] * xhat[j];
                        gbeta[j] += g2[[r, j]];
                    }
                }
                sink.accum(x, gx.into_shape_with_order(vx.raw_dim()).unwrap().into_dyn());
                sink.accum(gamma, ggamma.into_dyn());
                sink.accum(beta, gbeta.into_dyn());
            })),
        )
    }

    /// Batch normalization over all axes except axis 1 (the channel axis),
    /// using batch (population) statistics. Works for `[n, d]` and
    /// `[n, c, h, w]` inputs.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (vx, vg, vb) = (self.arc(x), self.arc(gamma), self.arc(beta));
        let c = vx.shape()[1];
        assert!(vg.len() == c && vb.len() == c, "batch_norm: param dims");
        let (mean, var) = channel_stats(&vx);
        let out = bn_apply(&vx, &mean, &var, &vg, &vb, eps);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let (mean, var) = channel_stats(&vx);
                let g1 = vg.view().into_dimensionality::<Ix1>().unwrap();
                let (c, inner) = channel_layout(&vx);
                let m = (vx.len() / c) as f64;
                let xs = vx.as_slice().expect("bn: non-contiguous input");
                let gc = g.as_standard_layout();
                let gs = gc.as_slice().unwrap();
                let mut gx = vec![0.0; xs.len()];
                let mut ggamma = Array1::<f64>::zeros(c);
                let mut gbeta = Array1::<f64>::zeros(c);
                // Per channel: dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for (i, (&xv, &gv)) in xs.iter().zip(gs).enumerate() {
                    let ci = (i / inner) % c;
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    let xhat = (xv - mean[ci]) * inv;
                    let dxhat = gv * g1[ci];
                    sum_dxhat[ci] += dxhat;
                    sum_dxhat_xhat[ci] += dxhat * xhat;
                    ggamma[ci] += gv * xhat;
                    gbeta[ci] += gv;
                }
                for (i, (&xv, &gv)) in xs.iter().zip(gs).enumerate() {
                    let ci = (i / inner) % c;
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    let xhat = (xv - mean[ci]) * inv;
                    let dxhat = gv * g1[ci];
                    gx[i] = inv * (dxhat - sum_dxhat[ci] / m - xhat * sum_dxhat_xhat[ci] / m);
                }
                sink.accum(x, Arr::from_shape_vec(vx.raw_dim(), gx).unwrap());
                sink.accum(gamma, ggamma.into_dyn());
                sink.accum(beta, gbeta.into_dyn());
            })),
        )
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Array1<f64>,
        var: Array1<f64>,
        eps: f64,
    ) -> Var {
        let (vx, vg, vb) = (self.arc(x), self.arc(gamma), self.arc(beta));
        let out = bn_apply(&vx, &mean, &var, &vg, &vb, eps);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g1 = vg.view().into_dimensionality::<Ix1>().unwrap();
                let (c, inner) = channel_layout(&vx);
                let xs = vx.as_slice().expect("bn: non-contiguous input");
                let gc = g.as_standard_layout();
                let gs = gc.as_slice().unwrap();
                let mut gx = vec![0.0; xs.len()];
                let mut ggamma = Array1::<f64>::zeros(c);
                let mut gbeta = Array1::<f64>::zeros(c);
                for (i, (&xv, &gv)) in xs.iter().zip(gs).enumerate() {
                    let ci = (i / inner) % c;
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    gx[i] = gv * g1[ci] * inv;
                    ggamma[ci] += gv * (xv - mean[ci]) * inv;
                    gbeta[ci] += gv;
                }
                sink.accum(x, Arr::from_shape_vec(vx.raw_dim(), gx).unwrap());
                sink.accum(gamma, ggamma.into_dyn());
                sink.accum(beta, gbeta.into_dyn());
            })),
        )
    }
}

fn softmax_last(x: &Arr) -> Arr {
    let d = *x.shape().last().unwrap();
    let rows = x.len() / d;
    let x2 = x.to_shape((rows, d)).unwrap();
    let mut out = Array2::<f64>::zeros((rows, d));
    for r in 0..rows {
        let row = x2.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..d {
            let e = (row[j] - mx).exp();
            out[[r, j]] = e;
            denom += e;
        }
        for j in 0..d {
            out[[r, j]] /= denom;
        }
    }
    out.into_shape_with_order(x.raw_dim()).unwrap().into_dyn()
}

/// (channel count, elements per channel block) for a standard-layout array
/// with the channel on axis 1.
fn channel_layout(x: &Arr) -> (usize, usize) {
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    (c, inner)
}

/// Population mean/variance per channel (axis 1).
pub fn channel_stats(x: &Arr) -> (Array1<f64>, Array1<f64>) {
    let (c, inner) = channel_layout(x);
    let m = (x.len() / c) as f64;
    let xs = x.as_slice().expect("channel_stats: non-contiguous input");
    let mut mean = Array1::<f64>::zeros(c);
    let mut var = Array1::<f64>::zeros(c);
    for (i, &v) in xs.iter().enumerate() {
        mean[(i / inner) % c] += v;
    }
    mean /= m;
    for (i, &v) in xs.iter().enumerate() {
        let ci = (i / inner) % c;
        var[ci] += (v - mean[ci]) * (v - mean[ci]);
    }
    var /= m;
    (mean, var)
}

fn bn_apply(
    x: &Arr,
    mean: &Array1<f64>,
    var: &Array1<f64>,
    gamma: &Arr,
    beta: &Arr,
    eps: f64,
) -> Arr {
    let g1 = gamma.view().into_dimensionality::<Ix1>().unwrap();
    let b1 = beta.view().into_dimensionality::<Ix1>().unwrap();
    let (c, inner) = channel_layout(x);
    let xs = x.as_slice().expect("bn_apply: non-contiguous input");
    let out: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ci = (i / inner) % c;
            let inv = 1.0 / (var[ci] + eps).sqrt();
            (v - mean[ci]) * inv * g1[ci] + b1[ci]
        })
        .collect();
    Arr::from_shape_vec(x.raw_dim(), out).unwrap()
}

type BilinearTap = (usize, usize, f64);

/// For each output index: (lo, hi, frac) source taps with half-pixel centres.
fn bilinear_plan(src: usize, dst: usize) -> Vec<BilinearTap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    gx: &mut ndarray::ArrayViewMut3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (c, h, w) = gx.dim();
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[[ci, iy as usize, ix as usize]] += cols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
}
