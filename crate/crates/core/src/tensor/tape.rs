//! Wengert-list autodiff: every op appends a node holding its forward value
//! and whatever it needs for the vector-Jacobian product. `backward` walks
//! the list in reverse.

use super::conv::{self, ConvGeom};
use super::layers::BatchNormState;
use super::{dims4, lane_dot, lane_sq_dev, lane_sum, Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Depthwise {
        input: Var,
        kernel: Var,
        k: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Elu {
        input: Var,
        alpha: T,
    },
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Abs(Var),
    Scale(Var, T),
    Clip {
        input: Var,
        lo: T,
        hi: T,
    },
    ConcatChannels {
        a: Var,
        b: Var,
        ca: usize,
        cb: usize,
    },
    Mean(Var),
    Variance(Var),
    RowVariance(Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape is single-use: build it, call [`Tape::backward`] once on a scalar,
/// read the leaf gradients, drop it.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad matches value shape"))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = dims4("conv2d", self.shape(input))?;
        let [oc, ic, kh, kw] = dims4("conv2d", self.shape(kernel))?;
        if ic != c {
            return Err(TensorError::Shape {
                op: "conv2d",
                detail: format!("input has {c} channels, kernel expects {ic}"),
            });
        }
        if self.shape(bias) != [oc] {
            return Err(TensorError::Shape {
                op: "conv2d",
                detail: format!("bias {:?} for {oc} output channels", self.shape(bias)),
            });
        }
        if stride == 0 {
            return Err(TensorError::Argument {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::EmptyOutput {
                op: "conv2d",
                detail: format!("{h}x{w} input, padding {padding}, {kh}x{kw} kernel"),
            });
        }
        let geom = ConvGeom {
            n,
            in_ch: c,
            h,
            w,
            out_ch: oc,
            kh,
            kw,
            stride,
            padding,
        };
        let out = conv::conv2d_forward(&geom, self.data(input), self.data(kernel), self.data(bias));
        let value = Tensor::new(&[n, oc, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &[input, kernel, bias],
        ))
    }

    /// Per-channel convolution with an odd square kernel `[c, 1, k, k]`, "same" zero padding.
    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let dims = dims4("depthwise_conv2d", self.shape(input))?;
        let [kc, one, kh, kw] = dims4("depthwise_conv2d", self.shape(kernel))?;
        if kc != dims[1] || one != 1 {
            return Err(TensorError::Shape {
                op: "depthwise_conv2d",
                detail: format!("kernel {:?} for {} input channels", self.shape(kernel), dims[1]),
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::Argument {
                op: "depthwise_conv2d",
                detail: format!("kernel must be odd and square, got {kh}x{kw}"),
            });
        }
        let out = conv::depthwise_forward(dims, kh, self.data(input), self.data(kernel));
        let value = Tensor::new(&dims, out)?;
        Ok(self.push(value, Op::Depthwise { input, kernel, k: kh }, &[input, kernel]))
    }

    /// Depthwise `k×k` convolution followed by a pointwise `1×1` convolution.
    pub fn separable_conv2d(&mut self, input: Var, depthwise: Var, pointwise: Var, bias: Var) -> Result<Var> {
        let pw = self.shape(pointwise);
        if pw.len() != 4 || pw[2] != 1 || pw[3] != 1 {
            return Err(TensorError::Shape {
                op: "separable_conv2d",
                detail: format!("pointwise kernel must be [o, c, 1, 1], got {pw:?}"),
            });
        }
        let spatial = self.depthwise_conv2d(input, depthwise)?;
        self.conv2d(spatial, pointwise, bias, 1, 0)
    }

    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, state: &mut BatchNormState<T>) -> Result<Var> {
        let [n, c, h, w] = dims4("batch_norm", self.shape(input))?;
        if state.channels() != c || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::Shape {
                op: "batch_norm",
                detail: format!("{c} input channels, state has {}", state.channels()),
            });
        }
        let count = n * h * w;
        if state.training && count < 2 {
            return Err(TensorError::Argument {
                op: "batch_norm",
                detail: "training mode needs at least two values per channel".into(),
            });
        }
        let plane = h * w;
        let x = self.data(input);
        let (mean, var) = if state.training {
            let inv = T::one() / T::of(count as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += lane_sum(&x[(b * c + ch) * plane..(b * c + ch + 1) * plane]);
                }
                let mu = s * inv;
                let mut ss = T::zero();
                for b in 0..n {
                    ss += lane_sq_dev(&x[(b * c + ch) * plane..(b * c + ch + 1) * plane], mu);
                }
                mean[ch] = mu;
                var[ch] = ss * inv;
            }
            (mean, var)
        } else {
            (state.running_mean.data().to_vec(), state.running_var.data().to_vec())
        };
        let eps = T::of(state.epsilon);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                let (mu, is, gm, bb) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for ((xh, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&x[r]) {
                    *xh = (v - mu) * is;
                    *o = gm * *xh + bb;
                }
            }
        }
        let training = state.training;
        if training {
            state.update_running(&mean, &var, count);
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn elu(&mut self, input: Var, alpha: f64) -> Var {
        let a = T::of(alpha);
        let value = self
            .value(input)
            .map(|x| if x > T::zero() { x } else { a * (x.exp_fast() - T::one()) });
        self.push(value, Op::Elu { input, alpha: a }, &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| T::one() / (T::one() + (-x).exp_fast()));
        self.push(value, Op::Sigmoid(input), &[input])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn abs(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| x.abs());
        self.push(value, Op::Abs(input), &[input])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let value = self.value(input).map(|x| x * f);
        self.push(value, Op::Scale(input, f), &[input])
    }

    /// Elementwise clamp; the gradient passes where `lo <= x <= hi`.
    pub fn clip(&mut self, input: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
            return Err(TensorError::Argument {
                op: "clip",
                detail: format!("lo {lo} must be below hi {hi}"),
            });
        }
        let (l, h) = (T::of(lo), T::of(hi));
        let value = self.value(input).map(|x| x.max(l).min(h));
        Ok(self.push(value, Op::Clip { input, lo: l, hi: h }, &[input]))
    }

    /// Concatenates two `[n, c, h, w]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = dims4("concat_channels", self.shape(a))?;
        let [nb, cb, hb, wb] = dims4("concat_channels", self.shape(b))?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(TensorError::Shape {
                op: "concat_channels",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let plane = h * w;
        let (da, db) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(da.len() + db.len());
        for s in 0..n {
            data.extend_from_slice(&da[s * ca * plane..(s + 1) * ca * plane]);
            data.extend_from_slice(&db[s * cb * plane..(s + 1) * cb * plane]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], data)?;
        Ok(self.push(value, Op::ConcatChannels { a, b, ca, cb }, &[a, b]))
    }

    /// Mean over every element, as a one-element tensor.
    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let d = self.data(input);
        if d.is_empty() {
            return Err(TensorError::Empty("mean"));
        }
        let m = lane_sum(d) / T::of(d.len() as f64);
        Ok(self.push(Tensor::scalar(m), Op::Mean(input), &[input]))
    }

    /// Population variance over every element.
    pub fn variance(&mut self, input: Var) -> Result<Var> {
        let d = self.data(input);
        if d.is_empty() {
            return Err(TensorError::Empty("variance"));
        }
        let v = population_variance(d);
        Ok(self.push(Tensor::scalar(v), Op::Variance(input), &[input]))
    }

    /// Population variance of each leading-axis slice; output shape `[n]`.
    pub fn row_variance(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let n = *shape.first().ok_or(TensorError::Empty("row_variance"))?;
        let d = self.data(input);
        let per = d.len() / n;
        let data = d.chunks(per).map(population_variance).collect();
        let value = Tensor::new(&[n], data)?;
        Ok(self.push(value, Op::RowVariance(input), &[input]))
    }

    /// `mean(|a - b|)`
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let m = self.abs(d);
        self.mean(m)
    }

    /// Reverse sweep from a one-element `root`. Leaf gradients are kept;
    /// intermediate gradients are released as soon as they are consumed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(TensorError::NonScalarOutput(self.shape(root).to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g_owned: Vec<T>) {
        let g = &g_owned[..];
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let mut out: Vec<(Var, Vec<T>)> = Vec::with_capacity(3);
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (dx, dk, db) = conv::conv2d_backward(
                    geom,
                    nodes[input.0].value.data(),
                    nodes[kernel.0].value.data(),
                    g,
                    rg(*input),
                );
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                out.push((*kernel, dk));
                out.push((*bias, db));
            }
            Op::Depthwise { input, kernel, k } => {
                let x = &nodes[input.0].value;
                let dims = dims4("depthwise_conv2d", x.shape()).expect("checked in forward");
                let (dx, dk) =
                    conv::depthwise_backward(dims, *k, x.data(), nodes[kernel.0].value.data(), g, rg(*input));
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                out.push((*kernel, dk));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let [n, c, h, w] = dims4("batch_norm", nodes[input.0].value.shape()).expect("checked in forward");
                let plane = h * w;
                let count = T::of((n * plane) as f64);
                let gm = nodes[gamma.0].value.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                        dgamma[ch] += lane_dot(&g[r.clone()], &xhat[r.clone()]);
                        dbeta[ch] += lane_sum(&g[r]);
                    }
                }
                if rg(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                            let scale = gm[ch] * inv_std[ch];
                            if *training {
                                let (sdy, sdyx) = (dbeta[ch] / count, dgamma[ch] / count);
                                for ((d, &dy), &xh) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                    *d = scale * (dy - sdy - xh * sdyx);
                                }
                            } else {
                                for (d, &dy) in dx[r.clone()].iter_mut().zip(&g[r]) {
                                    *d = scale * dy;
                                }
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Elu { input, alpha } => {
                let x = nodes[input.0].value.data();
                let y = nodes[i].value.data();
                let dx = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gv, (&xv, &yv))| if xv > T::zero() { gv } else { gv * (yv + *alpha) })
                    .collect();
                out.push((*input, dx));
            }
            Op::Sigmoid(input) => {
                let y = nodes[i].value.data();
                let dx = g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                out.push((*input, dx));
            }
            Op::Add(a, b) => {
                if rg(*b) {
                    out.push((*b, g.to_vec()));
                }
                out.push((*a, g_owned));
            }
            Op::Sub(a, b) => {
                if rg(*b) {
                    out.push((*b, g.iter().map(|&v| -v).collect()));
                }
                out.push((*a, g_owned));
            }
            Op::Abs(input) => {
                let x = nodes[input.0].value.data();
                let dx = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((*input, dx));
            }
            Op::Scale(input, f) => {
                out.push((*input, g.iter().map(|&v| v * *f).collect()));
            }
            Op::Clip { input, lo, hi } => {
                let x = nodes[input.0].value.data();
                let dx = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { T::zero() })
                    .collect();
                out.push((*input, dx));
            }
            Op::ConcatChannels { a, b, ca, cb } => {
                let [n, _, h, w] = dims4("concat_channels", nodes[i].value.shape()).expect("checked in forward");
                let plane = h * w;
                let (mut ga, mut gb) = (Vec::with_capacity(n * ca * plane), Vec::with_capacity(n * cb * plane));
                for s in 0..n {
                    let base = s * (ca + cb) * plane;
                    ga.extend_from_slice(&g[base..base + ca * plane]);
                    gb.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Mean(input) => {
                let len = nodes[input.0].value.len();
                out.push((*input, vec![g[0] / T::of(len as f64); len]));
            }
            Op::Variance(input) => {
                let x = nodes[input.0].value.data();
                out.push((*input, variance_grad(x, g[0])));
            }
            Op::RowVariance(input) => {
                let x = nodes[input.0].value.data();
                let per = x.len() / g.len();
                let dx = x
                    .chunks(per)
                    .zip(g)
                    .flat_map(|(row, &gv)| variance_grad(row, gv))
                    .collect();
                out.push((*input, dx));
            }
        }
        for (v, gv) in out {
            self.accumulate(v, gv);
        }
    }
}

fn population_variance<T: Scalar>(d: &[T]) -> T {
    let n = T::of(d.len() as f64);
    let mean = lane_sum(d) / n;
    lane_sq_dev(d, mean) / n
}

fn variance_grad<T: Scalar>(x: &[T], g: T) -> Vec<T> {
    let n = T::of(x.len() as f64);
    let mean = lane_sum(x) / n;
    let k = T::of(2.0) * g / n;
    x.iter().map(|&v| k * (v - mean)).collect()
}
