use super::conv::{self, ConvGeometry};
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::field::{self, Stencil};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    Warp {
        img: Var,
        disp: Var,
    },
    BoxSum {
        x: Var,
        window: usize,
    },
    CentralDiff {
        x: Var,
        axis: usize,
    },
    ForwardDiff {
        x: Var,
        axis: usize,
    },
    Upsample2(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Reverse-mode computation graph. Nodes are appended in evaluation
/// order, which is also a topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of every parameter leaf reached by the sweep. Parameters
    /// that did not influence the root get zeros of the right length via
    /// [`Gradients::for_param`].
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> + '_ {
        self.params
            .iter()
            .map(move |&(id, node)| (id, self.grads[node].as_deref()))
    }

    pub fn for_param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .filter(|(p, _)| *p == id)
            .find_map(|&(_, node)| self.grads[node].as_deref())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch(a.shape(), b.shape()));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

fn add_into(slot: &mut Option<Vec<f64>>, src: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *slot = Some(src.to_vec()),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf that is not a registered parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf holding a copy of a registered parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| s * v)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same node has one shape")
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            Op::Relu(x),
            |v| if v > 0.0 || v.is_nan() { v } else { 0.0 },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    /// Square root of non-negative values; the gradient at 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::ClampMin(x, floor), |v| {
            if v > floor || v.is_nan() {
                v
            } else {
                floor
            }
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            if self.nodes[v.0].value.len() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "weighted_sum expects scalars, got shape {:?}",
                    self.shape(v)
                )));
            }
            let t = self.scale(v, w);
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t)?,
            });
        }
        acc.ok_or_else(|| Error::InvalidArgument("weighted_sum of nothing".into()))
    }

    fn check_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        transpose: bool,
    ) -> Result<(usize, usize)> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.len() != xs.len() + 1 || xs.len() < 3 {
            return Err(Error::mismatch(xs, ws));
        }
        let (ci, co) = if transpose {
            (ws[0], ws[1])
        } else {
            (ws[1], ws[0])
        };
        if xs[0] != ci {
            return Err(Error::mismatch(xs, ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::mismatch(self.shape(b), &[co]));
            }
        }
        Ok((ci, co))
    }

    /// Convolution of `x: [ci, s..]` with `w: [co, ci, k..]`, zero padding.
    pub fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let (ci, co) = self.check_conv(x, w, b, false)?;
        let xs = self.shape(x).to_vec();
        let ks = self.shape(w)[2..].to_vec();
        let g = ConvGeometry::new(&xs[1..], &ks, stride, pad)
            .ok_or_else(|| Error::mismatch(&xs, self.shape(w)))?;
        let out_sp: Vec<usize> = xs[1..]
            .iter()
            .zip(&ks)
            .map(|(&n, &k)| conv::conv_output_extent(n, k, stride, pad).unwrap())
            .collect();
        let data = conv::conv_forward(
            &g,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            ci,
            co,
        );
        let mut shape = vec![co];
        shape.extend(out_sp);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Transposed convolution with `w: [ci, co, k..]`; output extents are
    /// `(n - 1) * stride - 2 pad + k`.
    pub fn conv_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let (ci, co) = self.check_conv(x, w, b, true)?;
        let xs = self.shape(x).to_vec();
        let ks = self.shape(w)[2..].to_vec();
        let out_sp: Vec<usize> = xs[1..]
            .iter()
            .zip(&ks)
            .map(|(&n, &k)| ((n - 1) * stride + k).checked_sub(2 * pad))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::mismatch(&xs, &ks))?;
        let g = ConvGeometry::new(&out_sp, &ks, stride, pad)
            .ok_or_else(|| Error::mismatch(&xs, &ks))?;
        let data = conv::conv_transpose_forward(
            &g,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            ci,
            co,
        );
        let mut shape = vec![co];
        shape.extend(out_sp);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::ConvTranspose {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let sp = self.value(first).spatial().to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.spatial() != sp.as_slice() {
                return Err(Error::mismatch(t.shape(), self.shape(first)));
            }
            channels += t.channels();
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![channels];
        shape.extend(sp);
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Channels `start..start+len`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.channels() || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "channel range {start}..{} out of {:?}",
                start + len,
                t.shape()
            )));
        }
        let n: usize = t.spatial().iter().product();
        let data = t.data()[start * n..(start + len) * n].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(t.spatial());
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Narrow { x, start }, rg))
    }

    /// Samples every channel of `img` at `x + disp(x)` with multilinear
    /// interpolation and clamp-to-edge. Differentiable in both arguments.
    pub fn warp(&mut self, img: Var, disp: Var) -> Result<Var> {
        let ti = self.value(img);
        let td = self.value(disp);
        let sp = ti.spatial();
        if td.spatial() != sp || td.channels() != sp.len() || !(2..=3).contains(&sp.len()) {
            return Err(Error::mismatch(ti.shape(), td.shape()));
        }
        let dims = sp.to_vec();
        let st = field::strides(&dims);
        let n: usize = dims.iter().product();
        let d = dims.len();
        let c = ti.channels();
        let mut out = vec![0.0; c * n];
        let mut s = Stencil::new();
        let mut p = [0.0; 3];
        let mut idx = [0usize; 3];
        for v in 0..n {
            for a in 0..d {
                p[a] = idx[a] as f64 + td.data()[a * n + v];
            }
            s.fill(&dims, &st, &p[..d]);
            for ch in 0..c {
                let src = &ti.data()[ch * n..(ch + 1) * n];
                let mut acc = 0.0;
                for k in 0..s.len {
                    acc += s.weight[k] * src[s.index[k]];
                }
                out[ch * n + v] = acc;
            }
            for a in (0..d).rev() {
                idx[a] += 1;
                if idx[a] < dims[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        let shape = ti.shape().to_vec();
        let rg = self.rg(&[img, disp]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Warp { img, disp }, rg))
    }

    /// Zero-padded window sum of odd width over the spatial axes.
    pub fn box_sum(&mut self, x: Var, window: usize) -> Result<Var> {
        if window.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "window must be odd, got {window}"
            )));
        }
        let t = self.value(x);
        let data = field::box_sum_raw(t.data(), t.shape(), 1, window);
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::BoxSum { x, window },
            rg,
        ))
    }

    /// Central-difference derivative along spatial `axis`.
    pub fn central_diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis + 1 >= t.shape().len() {
            return Err(Error::InvalidArgument(format!(
                "axis {axis} for shape {:?}",
                t.shape()
            )));
        }
        let data = field::central_diff_raw(t.data(), t.shape(), axis + 1);
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::CentralDiff { x, axis },
            rg,
        ))
    }

    /// Forward differences along spatial `axis`; that extent shrinks by one.
    pub fn forward_diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis + 1 >= t.shape().len() {
            return Err(Error::InvalidArgument(format!(
                "axis {axis} for shape {:?}",
                t.shape()
            )));
        }
        let data = field::forward_diff_raw(t.data(), t.shape(), axis + 1);
        let mut shape = t.shape().to_vec();
        shape[axis + 1] -= 1;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::ForwardDiff { x, axis },
            rg,
        ))
    }

    /// Multilinear upsampling of the spatial axes by two (corners aligned).
    pub fn upsample2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = field::upsample2_axes(t.data(), t.shape(), 1);
        let mut shape = t.shape().to_vec();
        shape[1..].iter_mut().for_each(|n| *n *= 2);
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Upsample2(x), rg)
    }

    /// Smallest distance between the argument of any non-smooth primitive
    /// that is on a gradient path and its kink: zero for relu, abs and
    /// sqrt, the floor for `clamp_min`, and integer sample coordinates for
    /// a warp with a differentiable displacement. A finite-difference step
    /// below this margin only sees smooth pieces.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        let closest = |t: &Tensor, k: f64| {
            t.data()
                .iter()
                .fold(f64::INFINITY, |a, &v| a.min((v - k).abs()))
        };
        for node in &self.nodes {
            if !node.requires_grad {
                continue;
            }
            let v = match &node.op {
                Op::Relu(x) | Op::Abs(x) | Op::Sqrt(x) => closest(self.value(*x), 0.0),
                Op::ClampMin(x, floor) => closest(self.value(*x), *floor),
                Op::Warp { disp, .. } if self.nodes[disp.0].requires_grad => {
                    // offsets are relative to integer voxel positions
                    let f = |t: &Tensor| {
                        t.data()
                            .iter()
                            .fold(f64::INFINITY, |a, &v| a.min((v - v.round()).abs()))
                    };
                    f(self.value(*disp))
                }
                _ => continue,
            };
            m = m.min(v);
        }
        m
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = self.value(root);
        if rt.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got shape {:?}",
                rt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(root.0 + 1)
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let live = |v: Var| self.nodes[v.0].requires_grad;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if live(v) {
                        add_into(&mut grads[v.0], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if live(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if live(*b) {
                    accumulate(&mut grads[b.0], g.len(), |s| {
                        s.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if live(*a) {
                    accumulate(&mut grads[a.0], g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * tb[i];
                        }
                    });
                }
                if live(*b) {
                    accumulate(&mut grads[b.0], g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * ta[i];
                        }
                    });
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if live(*a) {
                    accumulate(&mut grads[a.0], g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] += g[i] / tb[i];
                        }
                    });
                }
                if live(*b) {
                    accumulate(&mut grads[b.0], g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] -= g[i] * ta[i] / (tb[i] * tb[i]);
                        }
                    });
                }
            }
            Op::Scale(x, k) => {
                accumulate(&mut grads[x.0], g.len(), |s| {
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += k * b)
                });
            }
            Op::AddScalar(x) => add_into(&mut grads[x.0], g),
            Op::Relu(x) => {
                let tx = val(*x).data();
                accumulate(&mut grads[x.0], g.len(), |s| {
                    for i in 0..g.len() {
                        if tx[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                accumulate(&mut grads[x.0], g.len(), |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = out.data();
                accumulate(&mut grads[x.0], g.len(), |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Abs(x) => {
                let tx = val(*x).data();
                accumulate(&mut grads[x.0], g.len(), |s| {
                    for i in 0..g.len() {
                        if tx[i] > 0.0 {
                            s[i] += g[i];
                        } else if tx[i] < 0.0 {
                            s[i] -= g[i];
                        }
                    }
                });
            }
            Op::Sqrt(x) => {
                let y = out.data();
                accumulate(&mut grads[x.0], g.len(), |s| {
                    for i in 0..g.len() {
                        if y[i] > 0.0 {
                            s[i] += 0.5 * g[i] / y[i];
                        }
                    }
                });
            }
            Op::ClampMin(x, floor) => {
                let tx = val(*x).data();
                accumulate(&mut grads[x.0], g.len(), |s| {
                    for i in 0..g.len() {
                        if tx[i] > *floor {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                accumulate(&mut grads[x.0], n, |s| {
                    s.iter_mut().for_each(|a| *a += g[0])
                });
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let k = g[0] / n as f64;
                accumulate(&mut grads[x.0], n, |s| s.iter_mut().for_each(|a| *a += k));
            }
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (tx, tw) = (val(*x), val(*w));
                let ks = &tw.shape()[2..];
                let geo = ConvGeometry::new(tx.spatial(), ks, *stride, *pad)
                    .expect("geometry validated in forward");
                let (ci, co) = (tw.shape()[1], tw.shape()[0]);
                let (gx, gw) =
                    conv::conv_backward(&geo, tx.data(), tw.data(), g, ci, co, live(*x), live(*w));
                if let Some(gx) = gx {
                    add_into(&mut grads[x.0], &gx);
                }
                if let Some(gw) = gw {
                    add_into(&mut grads[w.0], &gw);
                }
                if let Some(b) = b {
                    if live(*b) {
                        let n = geo.out_len;
                        let gb: Vec<f64> = (0..co)
                            .map(|o| g[o * n..(o + 1) * n].iter().sum())
                            .collect();
                        add_into(&mut grads[b.0], &gb);
                    }
                }
            }
            Op::ConvTranspose {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (tx, tw) = (val(*x), val(*w));
                let ks = &tw.shape()[2..];
                let geo = ConvGeometry::new(out.spatial(), ks, *stride, *pad)
                    .expect("geometry validated in forward");
                let (ci, co) = (tw.shape()[0], tw.shape()[1]);
                let (gx, gw) = conv::conv_transpose_backward(
                    &geo,
                    tx.data(),
                    tw.data(),
                    g,
                    ci,
                    co,
                    live(*x),
                    live(*w),
                );
                if let Some(gx) = gx {
                    add_into(&mut grads[x.0], &gx);
                }
                if let Some(gw) = gw {
                    add_into(&mut grads[w.0], &gw);
                }
                if let Some(b) = b {
                    if live(*b) {
                        let n = geo.in_len;
                        let gb: Vec<f64> = (0..co)
                            .map(|o| g[o * n..(o + 1) * n].iter().sum())
                            .collect();
                        add_into(&mut grads[b.0], &gb);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    if live(*p) {
                        add_into(&mut grads[p.0], &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Narrow { x, start } => {
                let tx = val(*x);
                let n: usize = tx.spatial().iter().product();
                let off = start * n;
                accumulate(&mut grads[x.0], tx.len(), |s| {
                    s[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b)
                });
            }
            Op::Warp { img, disp } => self.warp_backward(*img, *disp, g, grads),
            Op::BoxSum { x, window } => {
                let gs = field::box_sum_raw(g, out.shape(), 1, *window);
                add_into(&mut grads[x.0], &gs);
            }
            Op::CentralDiff { x, axis } => {
                let gs = field::central_diff_raw_t(g, out.shape(), axis + 1);
                add_into(&mut grads[x.0], &gs);
            }
            Op::ForwardDiff { x, axis } => {
                let gs = field::forward_diff_raw_t(g, val(*x).shape(), axis + 1);
                add_into(&mut grads[x.0], &gs);
            }
            Op::Upsample2(x) => {
                let gs = field::upsample2_axes_t(g, val(*x).shape(), 1);
                add_into(&mut grads[x.0], &gs);
            }
        }
    }

    fn warp_backward(&self, img: Var, disp: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let ti = self.value(img);
        let td = self.value(disp);
        let dims = ti.spatial().to_vec();
        let st = field::strides(&dims);
        let n: usize = dims.iter().product();
        let d = dims.len();
        let c = ti.channels();
        let want_img = self.nodes[img.0].requires_grad;
        let want_disp = self.nodes[disp.0].requires_grad;
        let mut gi = want_img.then(|| vec![0.0; c * n]);
        let mut gd = want_disp.then(|| vec![0.0; d * n]);
        let mut s = Stencil::new();
        let mut p = [0.0; 3];
        let mut idx = [0usize; 3];
        for v in 0..n {
            for a in 0..d {
                p[a] = idx[a] as f64 + td.data()[a * n + v];
            }
            s.fill(&dims, &st, &p[..d]);
            for ch in 0..c {
                let gv = g[ch * n + v];
                if gv == 0.0 {
                    continue;
                }
                if let Some(gi) = gi.as_mut() {
                    for k in 0..s.len {
                        gi[ch * n + s.index[k]] += s.weight[k] * gv;
                    }
                }
                if let Some(gd) = gd.as_mut() {
                    let src = &ti.data()[ch * n..(ch + 1) * n];
                    for a in 0..d {
                        let mut acc = 0.0;
                        for k in 0..s.len {
                            acc += s.dweight[k][a] * src[s.index[k]];
                        }
                        gd[a * n + v] += gv * acc;
                    }
                }
            }
            for a in (0..d).rev() {
                idx[a] += 1;
                if idx[a] < dims[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        if let Some(gi) = gi {
            add_into(&mut grads[img.0], &gi);
        }
        if let Some(gd) = gd {
            add_into(&mut grads[disp.0], &gd);
        }
    }
}
