//! Reverse-mode gradient tape.
//!
//! Operations append nodes in execution order; [`Tape::backprop`] walks them
//! backwards and accumulates vector-Jacobian products. A node with several
//! consumers receives the sum of their contributions.

use std::collections::BTreeMap;

use crate::array::NdArray;
use crate::element::{gemm, Element};
use crate::error::{NdError, Result};
use crate::kernels::{self, AttentionSaved, AttentionWeights, ConvGeom, GroupNormSaved};
use crate::params::ParamSet;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// Elementwise product with a constant array.
    MulConst(Var, NdArray<T>),
    /// Addition of a constant; the gradient passes through unchanged.
    Shift(Var),
    /// Keeps `sigmoid(x)` for the backward pass.
    Silu(Var, Vec<T>),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    ChannelBias(Var, Var),
    SampleChannelAdd(Var, Var),
    Linear(Var, Var, Var),
    Conv2d(Var, Var, ConvGeom),
    GroupNorm {
        x: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        saved: GroupNormSaved<T>,
    },
    Attention {
        x: Var,
        qkv: Var,
        qkv_bias: Var,
        out: Var,
        out_bias: Var,
        heads: usize,
        saved: AttentionSaved<T>,
    },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    SliceChannels(Var, usize),
    Reshape(Var),
    SpatialMean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: NdArray<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation for later differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

/// Gradients keyed by parameter path, shape-matched to the parameters.
pub type Gradients<T> = ParamSet<T>;

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: NdArray<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, value: NdArray<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Records a differentiable parameter under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: NdArray<T>) -> Var {
        let v = self.push(value, Op::Param, &[]);
        self.params.insert(name.into(), v);
        v
    }

    /// Registers every array of `set` as a parameter.
    pub fn params_from(&mut self, set: &ParamSet<T>) -> BTreeMap<String, Var> {
        set.iter()
            .map(|(k, v)| (k.clone(), self.param(k.clone(), v.clone())))
            .collect()
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
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

    /// Copy of a value cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<NdArray<T>> {
        let (x, y) = (self.value(a), self.value(b));
        x.expect_same_shape(y, op)?;
        x.zip_map(y, f)?.ensure_finite(op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c).ensure_finite("scale")?;
        Ok(self.push(v, Op::Scale(a, c), &[a]))
    }

    pub fn mul_const(&mut self, a: Var, c: NdArray<T>) -> Result<Var> {
        let v = self
            .value(a)
            .zip_map(&c, |x, y| x * y)?
            .ensure_finite("mul_const")?;
        Ok(self.push(v, Op::MulConst(a, c), &[a]))
    }

    pub fn add_const(&mut self, a: Var, c: &NdArray<T>) -> Result<Var> {
        let v = self
            .value(a)
            .zip_map(c, |x, y| x + y)?
            .ensure_finite("add_const")?;
        Ok(self.push(v, Op::Shift(a), &[a]))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let sig: Vec<T> = x.data().iter().map(|&v| sigmoid(v)).collect();
        let out = x.data().iter().zip(&sig).map(|(&v, &s)| v * s).collect();
        let v = NdArray::from_parts(x.shape().to_vec(), out);
        Ok(self.push(v, Op::Silu(a, sig), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        Ok(self.push(v, Op::Sigmoid(a), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.exp()).ensure_finite("exp")?;
        Ok(self.push(v, Op::Exp(a), &[a]))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x).ensure_finite("square")?;
        Ok(self.push(v, Op::Square(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = NdArray::scalar(self.value(a).sum());
        Ok(self.push(v, Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = NdArray::scalar(self.value(a).mean());
        Ok(self.push(v, Op::Mean(a), &[a]))
    }

    /// Adds a `[C]` bias to every position of an `[N,C,H,W]` value.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("channel_bias")?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(NdError::AxisMismatch {
                op: "channel_bias",
                axis: "C",
                expected: c,
                got: b.len(),
            });
        }
        let mut out = self.value(x).data().to_vec();
        for (i, plane) in out.chunks_exact_mut(h * w).enumerate() {
            let bv = b.data()[i % c];
            plane.iter_mut().for_each(|v| *v += bv);
        }
        let value = NdArray::from_parts(vec![n, c, h, w], out).ensure_finite("channel_bias")?;
        Ok(self.push(value, Op::ChannelBias(x, bias), &[x, bias]))
    }

    /// Adds a per-sample `[N,C]` vector to every position of `[N,C,H,W]`.
    pub fn add_sample_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("add_sample_channels")?;
        let vv = self.value(v);
        if vv.shape() != [n, c] {
            return Err(NdError::AxisMismatch {
                op: "add_sample_channels",
                axis: "C",
                expected: c,
                got: vv.shape().get(1).copied().unwrap_or(0),
            });
        }
        let mut out = self.value(x).data().to_vec();
        for (i, plane) in out.chunks_exact_mut(h * w).enumerate() {
            let bv = vv.data()[i];
            plane.iter_mut().for_each(|p| *p += bv);
        }
        let value =
            NdArray::from_parts(vec![n, c, h, w], out).ensure_finite("add_sample_channels")?;
        Ok(self.push(value, Op::SampleChannelAdd(x, v), &[x, v]))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let v = kernels::linear(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.push(v, Op::Linear(x, weight, bias), &[x, weight, bias]))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let g = ConvGeom::new(self.value(x), self.value(kernel), stride, padding)?;
        let out = kernels::conv2d_forward(&g, self.value(x).data(), self.value(kernel).data());
        let v = NdArray::from_parts(vec![g.n, g.k, g.ho, g.wo], out).ensure_finite("conv2d")?;
        Ok(self.push(v, Op::Conv2d(x, kernel, g), &[x, kernel]))
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        eps: T,
    ) -> Result<Var> {
        let (v, saved) = kernels::group_norm_forward(
            self.value(x),
            groups,
            self.value(gain),
            self.value(bias),
            eps,
        )?;
        Ok(self.push(
            v,
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                saved,
            },
            &[x, gain, bias],
        ))
    }

    pub fn self_attention(
        &mut self,
        x: Var,
        qkv: Var,
        qkv_bias: Var,
        out: Var,
        out_bias: Var,
        heads: usize,
    ) -> Result<Var> {
        let wt = AttentionWeights {
            qkv: self.value(qkv),
            qkv_bias: self.value(qkv_bias),
            out: self.value(out),
            out_bias: self.value(out_bias),
            heads,
        };
        let (v, saved) = kernels::self_attention_forward(self.value(x), &wt)?;
        Ok(self.push(
            v,
            Op::Attention {
                x,
                qkv,
                qkv_bias,
                out,
                out_bias,
                heads,
                saved,
            },
            &[x, qkv, qkv_bias, out, out_bias],
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let v = kernels::upsample2x(self.value(x))?;
        Ok(self.push(v, Op::Upsample2x(x), &[x]))
    }

    /// Concatenates two `[N,*,H,W]` values along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        for (axis, e, g) in [("N", n, nb), ("H", h, hb), ("W", w, wb)] {
            if e != g {
                return Err(NdError::AxisMismatch {
                    op: "concat_channels",
                    axis,
                    expected: e,
                    got: g,
                });
            }
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for s in 0..n {
            out.extend_from_slice(&xa[s * ca * h * w..(s + 1) * ca * h * w]);
            out.extend_from_slice(&xb[s * cb * h * w..(s + 1) * cb * h * w]);
        }
        let v = NdArray::from_parts(vec![n, ca + cb, h, w], out);
        Ok(self.push(v, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// Channels `[start, start + len)` of an `[N,C,H,W]` value.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("slice_channels")?;
        if len == 0 || start + len > c {
            return Err(NdError::invalid(
                "slice_channels",
                format!("range {start}..{} outside {c} channels", start + len),
            ));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * h * w);
        for s in 0..n {
            out.extend_from_slice(&xs[(s * c + start) * h * w..(s * c + start + len) * h * w]);
        }
        let v = NdArray::from_parts(vec![n, len, h, w], out);
        Ok(self.push(v, Op::SliceChannels(x, start), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// `[N,C,H,W] -> [N,C]` mean over spatial positions.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("spatial_mean")?;
        let inv = 1.0 / (h * w) as f64;
        let out = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .map(|p| T::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() * inv))
            .collect();
        let v = NdArray::from_parts(vec![n, c], out);
        Ok(self.push(v, Op::SpatialMean(x), &[x]))
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(NdError::invalid(
                "cross_entropy",
                format!("logits {:?} for {} labels", lv.shape(), labels.len()),
            ));
        }
        let k = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(NdError::invalid(
                "cross_entropy",
                format!("label {bad} >= {k} classes"),
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_exact_mut(k).zip(labels) {
            kernels::softmax_in_place(row);
            loss -= row[label].as_f64().max(1e-300).ln();
        }
        let v = NdArray::scalar(T::from_f64(loss / labels.len() as f64))
            .ensure_finite("cross_entropy")?;
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Gradients of the scalar `loss` with respect to the named parameters.
    pub fn backprop(&self, loss: Var, names: &[&str]) -> Result<Gradients<T>> {
        let vars = names
            .iter()
            .map(|&n| {
                self.params
                    .get(n)
                    .copied()
                    .ok_or_else(|| NdError::UnknownParam(n.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let grads = self.run_backward(loss)?;
        Ok(names
            .iter()
            .zip(vars)
            .map(|(&n, v)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| NdArray::zeros(self.value(v).shape().to_vec()));
                (n.to_string(), g)
            })
            .collect())
    }

    /// Gradients with respect to every parameter on the tape.
    pub fn backprop_all(&self, loss: Var) -> Result<Gradients<T>> {
        let names: Vec<&str> = self.params.keys().map(String::as_str).collect();
        self.backprop(loss, &names)
    }

    fn run_backward(&self, loss: Var) -> Result<Vec<Option<NdArray<T>>>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NdError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<NdArray<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(NdArray::ones(lv.shape().to_vec()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.node_backward(node, &g, &mut grads);
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
            }
        }
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn node_backward(&self, node: &Node<T>, g: &NdArray<T>, grads: &mut [Option<NdArray<T>>]) {
        let gd = g.data();
        let mut send = |v: Var, data: Vec<T>| {
            if !self.wants(v) {
                return;
            }
            let shape = self.value(v).shape().to_vec();
            match &mut grads[v.0] {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(&data)
                    .for_each(|(a, &d)| *a += d),
                slot @ None => *slot = Some(NdArray::from_parts(shape, data)),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                send(*a, gd.to_vec());
                send(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, gd.to_vec());
                send(*b, gd.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                send(*b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale(a, c) => send(*a, gd.iter().map(|&x| x * *c).collect()),
            Op::MulConst(a, c) => send(*a, gd.iter().zip(c.data()).map(|(&g, &y)| g * y).collect()),
            Op::Shift(a) => send(*a, gd.to_vec()),
            Op::Silu(a, sig) => {
                let x = self.value(*a).data();
                send(
                    *a,
                    gd.iter()
                        .zip(x)
                        .zip(sig)
                        .map(|((&g, &x), &s)| g * s * (T::one() + x * (T::one() - s)))
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                send(
                    *a,
                    gd.iter()
                        .zip(y)
                        .map(|(&g, &s)| g * s * (T::one() - s))
                        .collect(),
                );
            }
            Op::Exp(a) => {
                let y = node.value.data();
                send(*a, gd.iter().zip(y).map(|(&g, &e)| g * e).collect());
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let two = T::from_f64(2.0);
                send(*a, gd.iter().zip(x).map(|(&g, &x)| g * two * x).collect());
            }
            Op::Sum(a) => send(*a, vec![gd[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                send(*a, vec![gd[0] / T::from_f64(n as f64); n]);
            }
            Op::ChannelBias(x, b) => {
                let (c, hw) = (
                    node.value.shape()[1],
                    node.value.shape()[2] * node.value.shape()[3],
                );
                let mut db = vec![T::zero(); c];
                for (i, plane) in gd.chunks_exact(hw).enumerate() {
                    db[i % c] += plane.iter().copied().sum::<T>();
                }
                send(*x, gd.to_vec());
                send(*b, db);
            }
            Op::SampleChannelAdd(x, v) => {
                let hw = node.value.shape()[2] * node.value.shape()[3];
                let dv = gd
                    .chunks_exact(hw)
                    .map(|p| p.iter().copied().sum::<T>())
                    .collect();
                send(*x, gd.to_vec());
                send(*v, dv);
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, i) = (xv.shape()[0], xv.shape()[1]);
                let o = wv.shape()[0];
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); o * i];
                    gemm(
                        true,
                        false,
                        o,
                        i,
                        n,
                        T::one(),
                        gd,
                        xv.data(),
                        T::zero(),
                        &mut dw,
                    );
                    send(*w, dw);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in gd.chunks_exact(o) {
                        db.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                    send(*b, db);
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * i];
                    gemm(
                        false,
                        false,
                        n,
                        i,
                        o,
                        T::one(),
                        gd,
                        wv.data(),
                        T::zero(),
                        &mut dx,
                    );
                    send(*x, dx);
                }
            }
            Op::Conv2d(x, k, geom) => {
                let (dx, dk) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*k).data(),
                    gd,
                    self.wants(*x),
                );
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                send(*k, dk);
            }
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                saved,
            } => {
                let (dx, dg, db) = kernels::group_norm_backward(
                    node.value.shape(),
                    *groups,
                    self.value(*x).data(),
                    self.value(*gain).data(),
                    saved,
                    gd,
                );
                send(*x, dx);
                send(*gain, dg);
                send(*bias, db);
            }
            Op::Attention {
                x,
                qkv,
                qkv_bias,
                out,
                out_bias,
                heads,
                saved,
            } => {
                let ag = kernels::self_attention_backward(
                    node.value.shape(),
                    *heads,
                    self.value(*x).data(),
                    self.value(*qkv).data(),
                    self.value(*out).data(),
                    saved,
                    gd,
                );
                send(*x, ag.input);
                send(*qkv, ag.qkv);
                send(*qkv_bias, ag.qkv_bias);
                send(*out, ag.out);
                send(*out_bias, ag.out_bias);
            }
            Op::Upsample2x(x) => {
                send(*x, kernels::upsample2x_backward(self.value(*x).shape(), gd));
            }
            Op::ConcatChannels(a, b) => {
                let (n, c, h, w) = (
                    node.value.shape()[0],
                    node.value.shape()[1],
                    node.value.shape()[2],
                    node.value.shape()[3],
                );
                let ca = self.value(*a).shape()[1];
                let cb = c - ca;
                let mut da = Vec::with_capacity(n * ca * h * w);
                let mut db = Vec::with_capacity(n * cb * h * w);
                for s in 0..n {
                    let base = s * c * h * w;
                    da.extend_from_slice(&gd[base..base + ca * h * w]);
                    db.extend_from_slice(&gd[base + ca * h * w..base + c * h * w]);
                }
                send(*a, da);
                send(*b, db);
            }
            Op::SliceChannels(x, start) => {
                let xs = self.value(*x).shape();
                let (c, hw) = (xs[1], xs[2] * xs[3]);
                let len = node.value.shape()[1];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (s, chunk) in gd.chunks_exact(len * hw).enumerate() {
                    let base = (s * c + start) * hw;
                    dx[base..base + len * hw].copy_from_slice(chunk);
                }
                send(*x, dx);
            }
            Op::Reshape(x) => send(*x, gd.to_vec()),
            Op::SpatialMean(x) => {
                let xs = self.value(*x).shape();
                let hw = xs[2] * xs[3];
                let inv = T::from_f64(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                send(*x, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).shape()[1];
                let scale = gd[0] / T::from_f64(labels.len() as f64);
                let mut dl = probs.clone();
                for (row, &label) in dl.chunks_exact_mut(k).zip(labels) {
                    row[label] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                send(*logits, dl);
            }
        }
    }
}

#[inline(always)]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    x.sigmoid()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut t = Tape::<f64>::new();
        let p = t.param("p", NdArray::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = t.sum(p).unwrap();
        let g = t.backprop(s, &["p"]).unwrap();
        assert_eq!(g.get("p").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gives_twice_p() {
        let mut t = Tape::<f64>::new();
        let p = t.param("p", NdArray::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = t.square(p).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backprop(s, &["p"]).unwrap();
        assert_eq!(g.get("p").unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::<f64>::new();
        let p = t.param("p", NdArray::new([2], vec![3.0, -1.0]).unwrap());
        let a = t.add(p, p).unwrap();
        let b = t.mul(a, p).unwrap();
        let s = t.sum(b).unwrap();
        // s = 2 p^2
        let g = t.backprop(s, &["p"]).unwrap();
        assert_eq!(g.get("p").unwrap().data(), &[12.0, -4.0]);
    }

    #[test]
    fn constants_receive_no_gradient_and_unused_params_get_zero() {
        let mut t = Tape::<f64>::new();
        let p = t.param("p", NdArray::ones([2]));
        t.param("unused", NdArray::ones([4]));
        let c = t.constant(NdArray::full([2], 5.0));
        let m = t.mul(p, c).unwrap();
        let s = t.sum(m).unwrap();
        let g = t.backprop_all(s).unwrap();
        assert_eq!(g.get("p").unwrap().data(), &[5.0, 5.0]);
        assert_eq!(g.get("unused").unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_and_unknown_param_are_errors() {
        let mut t = Tape::<f64>::new();
        let p = t.param("p", NdArray::ones([2]));
        assert!(matches!(t.backprop(p, &["p"]), Err(NdError::NotScalar(_))));
        let s = t.sum(p).unwrap();
        assert!(matches!(
            t.backprop(s, &["q"]),
            Err(NdError::UnknownParam(_))
        ));
    }
}
