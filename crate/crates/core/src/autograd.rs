//! A small tape-based reverse-mode autodiff engine specialised for the
//! convolutional networks in this crate.
//!
//! Every op appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse. Nodes only receive gradients when some
//! ancestor is a trainable leaf (or an input explicitly marked as needing a
//! gradient), so frozen sub-networks and data inputs cost nothing on the
//! backward pass.

use crate::conv::{self, conv_out, ConvGeom, Scratch};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn sum_sorted<T: Scalar>(values: &mut [T]) -> T {
    values.sort_by(|a, b| a.as_f64().total_cmp(&b.as_f64()));
    values.iter().fold(T::zero(), |acc, &v| acc + v)
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
        x: Var,
    },
    MulChannelBroadcast {
        x: Var,
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    ChannelMean {
        x: Var,
    },
    ChannelMax {
        x: Var,
        argmax: Vec<u32>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    WeightedL1 {
        x: Var,
        target: Vec<T>,
        weights: Vec<T>,
        total: T,
    },
    SoftplusMean {
        x: Var,
        weights: Vec<T>,
        sign: T,
        total: T,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of scalars held by forward values on the tape.
    pub fn stored_scalars(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients (a trainable parameter, or an input
    /// being probed).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// 2-D cross-correlation. `x`: `[N, C, H, W]`, `w`: `[O, C, k, k]`,
    /// optional bias `[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.shape().len() != 4 || wv.shape().len() != 4 {
            return Err(Error::invalid("conv2d expects rank-4 input and weight"));
        }
        let (n, c, h, wd) = xv.dims4();
        let (o, wc, k, k2) = wv.dims4();
        if wc != c || k != k2 || stride == 0 {
            return Err(Error::invalid(format!(
                "conv2d weight {:?} incompatible with input {:?}",
                wv.shape(),
                xv.shape()
            )));
        }
        let (oh, ow) = match (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::invalid(format!(
                    "input {h}x{wd} smaller than kernel {k}"
                )))
            }
        };
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
            out_h: oh,
            out_w: ow,
        };
        let (in_len, ncols) = (geom.in_len(), geom.cols());
        let mut out = vec![T::zero(); n * o * ncols];
        let mut scratch = Scratch::default();
        for s in 0..n {
            conv::forward(
                &xv.data()[s * in_len..(s + 1) * in_len],
                wv.data(),
                o,
                &geom,
                &mut out[s * o * ncols..(s + 1) * o * ncols],
                &mut scratch,
            );
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != o {
                return Err(Error::invalid("conv2d bias length mismatch"));
            }
            add_channel_bias(&mut out, bv.data(), n, o, ncols);
        }
        let mut vars = vec![x, w];
        vars.extend(b);
        let needs = self.any_grad(&vars);
        let value = Tensor::from_vec(&[n, o, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, needs))
    }

    /// Transposed convolution (the adjoint of [`Graph::conv2d`]).
    /// `x`: `[N, Cin, H, W]`, `w`: `[Cin, Cout, k, k]`, optional bias `[Cout]`;
    /// output spatial size is `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.shape().len() != 4 || wv.shape().len() != 4 {
            return Err(Error::invalid(
                "conv_transpose2d expects rank-4 input and weight",
            ));
        }
        let (n, ci, h, wd) = xv.dims4();
        let (wci, co, k, k2) = wv.dims4();
        if wci != ci || k != k2 || stride == 0 {
            return Err(Error::invalid(format!(
                "conv_transpose2d weight {:?} incompatible with input {:?}",
                wv.shape(),
                xv.shape()
            )));
        }
        let oh = ((h - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::invalid("conv_transpose2d padding too large"))?;
        let ow = ((wd - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::invalid("conv_transpose2d padding too large"))?;
        let geom = ConvGeom {
            channels: co,
            height: oh,
            width: ow,
            kernel: k,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        if conv_out(oh, k, stride, pad) != Some(h) || conv_out(ow, k, stride, pad) != Some(wd) {
            return Err(Error::invalid(
                "conv_transpose2d geometry is not invertible",
            ));
        }
        let pin = h * wd;
        let out_len = geom.in_len();
        let mut out = vec![T::zero(); n * out_len];
        let mut scratch = Scratch::default();
        for s in 0..n {
            conv::input_grad(
                &xv.data()[s * ci * pin..(s + 1) * ci * pin],
                wv.data(),
                ci,
                &geom,
                &mut out[s * out_len..(s + 1) * out_len],
                &mut scratch,
            );
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != co {
                return Err(Error::invalid("conv_transpose2d bias length mismatch"));
            }
            add_channel_bias(&mut out, bv.data(), n, co, oh * ow);
        }
        let mut vars = vec![x, w];
        vars.extend(b);
        let needs = self.any_grad(&vars);
        let value = Tensor::from_vec(&[n, co, oh, ow], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, needs))
    }

    /// Per-sample, per-channel standardisation without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let eps = T::from_f64_lossy(eps);
        let count = T::from_usize(plane).unwrap();
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(n * c);
        for chunk in out.chunks_mut(plane) {
            let mean = chunk.iter().fold(T::zero(), |a, &v| a + v) / count;
            let var = chunk
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / count;
            let inv = T::one() / (var + eps).sqrt();
            for v in chunk.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let needs = self.nodes[x.0].needs_grad;
        let value = Tensor::from_vec(&[n, c, h, w], out).expect("shape preserved");
        self.push(value, Op::InstanceNorm { x, inv_std }, needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::from_f64_lossy(slope);
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        let needs = self.nodes[x.0].needs_grad;
        self.push(value, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let needs = self.nodes[x.0].needs_grad;
        self.push(value, Op::Sigmoid { x }, needs)
    }

    /// `x[n, c, i, j] * a[n, 0, i, j]`.
    pub fn mul_channel_broadcast(&mut self, x: Var, a: Var) -> Result<Var> {
        let xv = self.value(x);
        let av = self.value(a);
        if xv.shape().len() != 4 || av.shape().len() != 4 {
            return Err(Error::invalid("channel broadcast expects rank-4 tensors"));
        }
        let (n, c, h, w) = xv.dims4();
        let (an, ac, ah, aw) = av.dims4();
        if an != n || ac != 1 || ah != h || aw != w {
            return Err(Error::invalid(format!(
                "attention {:?} does not match features {:?}",
                av.shape(),
                xv.shape()
            )));
        }
        let plane = h * w;
        let mut out = xv.data().to_vec();
        for s in 0..n {
            let att = &av.data()[s * plane..(s + 1) * plane];
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for (o, &m) in out[base..base + plane].iter_mut().zip(att) {
                    *o = m * *o;
                }
            }
        }
        let needs = self.any_grad(&[x, a]);
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::MulChannelBroadcast { x, a }, needs))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (n, _, h, w) = self.value(*first).dims4();
        let mut total_c = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.shape().len() != 4 {
                return Err(Error::invalid("concat expects rank-4 tensors"));
            }
            let (pn, pc, ph, pw) = pv.dims4();
            if pn != n || ph != h || pw != w {
                return Err(Error::invalid(format!(
                    "concat shape mismatch: {:?} vs {:?}",
                    pv.shape(),
                    self.value(*first).shape()
                )));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for s in 0..n {
            for p in parts {
                let pv = self.value(*p);
                let pc = pv.shape()[1];
                out.extend_from_slice(&pv.data()[s * pc * plane..(s + 1) * pc * plane]);
            }
        }
        let needs = self.any_grad(parts);
        let value = Tensor::from_vec(&[n, total_c, h, w], out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Mean over channels, `[N, C, H, W] -> [N, 1, H, W]`. Values are summed
    /// in sorted order so the result is bit-identical under any permutation
    /// of the channels.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let count = T::from_usize(c).unwrap();
        let mut out = vec![T::zero(); n * plane];
        let mut buf = vec![T::zero(); c];
        for s in 0..n {
            for p in 0..plane {
                for (ch, slot) in buf.iter_mut().enumerate() {
                    *slot = xv.data()[(s * c + ch) * plane + p];
                }
                out[s * plane + p] = sum_sorted(&mut buf) / count;
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        let value = Tensor::from_vec(&[n, 1, h, w], out).expect("shape");
        self.push(value, Op::ChannelMean { x }, needs)
    }

    /// Max over channels, `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let mut out = vec![T::zero(); n * plane];
        let mut argmax = vec![0u32; n * plane];
        for s in 0..n {
            for p in 0..plane {
                let mut best = xv.data()[s * c * plane + p];
                let mut best_c = 0;
                for ch in 1..c {
                    let v = xv.data()[(s * c + ch) * plane + p];
                    if v > best {
                        best = v;
                        best_c = ch;
                    }
                }
                out[s * plane + p] = best;
                argmax[s * plane + p] = best_c as u32;
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        let value = Tensor::from_vec(&[n, 1, h, w], out).expect("shape");
        self.push(value, Op::ChannelMax { x, argmax }, needs)
    }

    /// `x[N, I] · w[O, I]ᵀ + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::invalid(format!(
                "linear weight {:?} incompatible with input {:?}",
                wv.shape(),
                xv.shape()
            )));
        }
        let (n, i) = (xv.shape()[0], xv.shape()[1]);
        let o = wv.shape()[0];
        let mut out = vec![T::zero(); n * o];
        T::gemm(
            n,
            i,
            o,
            xv.data(),
            (i as isize, 1),
            wv.data(),
            (1, i as isize),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != o {
                return Err(Error::invalid("linear bias length mismatch"));
            }
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v = *v + bb;
                }
            }
        }
        let mut vars = vec![x, w];
        vars.extend(b);
        let needs = self.any_grad(&vars);
        let value = Tensor::from_vec(&[n, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let count = T::from_usize(plane).unwrap();
        let out: Vec<T> = xv
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().fold(T::zero(), |a, &v| a + v) / count)
            .collect();
        let needs = self.nodes[x.0].needs_grad;
        let value = Tensor::from_vec(&[n, c], out).expect("shape");
        self.push(value, Op::GlobalAvgPool { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::invalid(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::from_f64_lossy(factor);
        let value = self.value(x).map(|v| v * factor);
        let needs = self.nodes[x.0].needs_grad;
        self.push(value, Op::Scale { x, factor }, needs)
    }

    /// `Σ wᵢ |xᵢ − tᵢ| / Σ wᵢ` as a scalar node.
    pub fn weighted_l1(&mut self, x: Var, target: &[T], weights: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != target.len() || xv.len() != weights.len() {
            return Err(Error::invalid(format!(
                "l1 operands differ in length: {} / {} / {}",
                xv.len(),
                target.len(),
                weights.len()
            )));
        }
        let total = weights.iter().fold(T::zero(), |a, &w| a + w);
        if total <= T::zero() {
            return Err(Error::invalid("l1 over an empty (zero-weight) set"));
        }
        let sum = xv
            .data()
            .iter()
            .zip(target)
            .zip(weights)
            .fold(T::zero(), |a, ((&p, &t), &w)| a + w * (p - t).abs());
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(
            Tensor::scalar(sum / total),
            Op::WeightedL1 {
                x,
                target: target.to_vec(),
                weights: weights.to_vec(),
                total,
            },
            needs,
        ))
    }

    /// `Σ wᵢ softplus(sign · xᵢ) / Σ wᵢ`; zero when every weight is zero.
    /// With `sign = -1` this is the mean of `-log σ(x)`, with `sign = +1` the
    /// mean of `-log(1 − σ(x))`.
    pub fn softplus_mean(&mut self, x: Var, weights: &[T], sign: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::invalid(
                "softplus weights differ in length from logits",
            ));
        }
        let sign = T::from_f64_lossy(sign.signum());
        let total = weights.iter().fold(T::zero(), |a, &w| a + w);
        let value = if total > T::zero() {
            xv.data()
                .iter()
                .zip(weights)
                .fold(T::zero(), |a, (&v, &w)| a + w * softplus(sign * v))
                / total
        } else {
            T::zero()
        };
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(
            Tensor::scalar(value),
            Op::SoftplusMean {
                x,
                weights: weights.to_vec(),
                sign,
                total,
            },
            needs,
        ))
    }

    /// `Σ wᵢ xᵢ` as a scalar node.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::invalid("weighted_sum weights differ in length"));
        }
        let value = xv
            .data()
            .iter()
            .zip(weights)
            .fold(T::zero(), |a, (&v, &w)| a + v * w);
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(
            Tensor::scalar(value),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            needs,
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let w = vec![T::one() / T::from_usize(n).unwrap(); n];
        self.weighted_sum(x, &w).expect("lengths agree")
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop_node(node, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, _, _, _) = xv.dims4();
                let o = wv.shape()[0];
                let (in_len, ncols) = (geom.in_len(), geom.cols());
                let want_w = self.wants(*w);
                let want_x = self.wants(*x);
                let mut scratch = Scratch::default();
                let mut dw = if want_w {
                    vec![T::zero(); wv.len()]
                } else {
                    Vec::new()
                };
                let mut dx = if want_x {
                    vec![T::zero(); n * in_len]
                } else {
                    Vec::new()
                };
                for s in 0..n {
                    let gys = &gy.data()[s * o * ncols..(s + 1) * o * ncols];
                    if want_w {
                        let xs = &xv.data()[s * in_len..(s + 1) * in_len];
                        conv::weight_grad(xs, gys, o, geom, &mut dw, &mut scratch);
                    }
                    if want_x {
                        let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                        conv::input_grad(gys, wv.data(), o, geom, dxs, &mut scratch);
                    }
                }
                if want_w {
                    accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw).unwrap());
                }
                if want_x {
                    accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    accumulate(grads, b, channel_sums(gy.data(), n, o, ncols));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, ci, h, wd) = xv.dims4();
                let pin = h * wd;
                let out_len = geom.in_len();
                let want_w = self.wants(*w);
                let want_x = self.wants(*x);
                let mut scratch = Scratch::default();
                let mut dw = if want_w {
                    vec![T::zero(); wv.len()]
                } else {
                    Vec::new()
                };
                let mut dx = if want_x {
                    vec![T::zero(); n * ci * pin]
                } else {
                    Vec::new()
                };
                for s in 0..n {
                    let gys = &gy.data()[s * out_len..(s + 1) * out_len];
                    if want_x {
                        let dxs = &mut dx[s * ci * pin..(s + 1) * ci * pin];
                        conv::forward(gys, wv.data(), ci, geom, dxs, &mut scratch);
                    }
                    if want_w {
                        let xs = &xv.data()[s * ci * pin..(s + 1) * ci * pin];
                        conv::weight_grad(gys, xs, ci, geom, &mut dw, &mut scratch);
                    }
                }
                if want_w {
                    accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw).unwrap());
                }
                if want_x {
                    accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    accumulate(
                        grads,
                        b,
                        channel_sums(gy.data(), n, geom.channels, geom.height * geom.width),
                    );
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let y = &node.value;
                let (_, _, h, w) = y.dims4();
                let plane = h * w;
                let count = T::from_usize(plane).unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for (idx, inv) in inv_std.iter().enumerate() {
                    let r = idx * plane..(idx + 1) * plane;
                    let (ys, gs) = (&y.data()[r.clone()], &gy.data()[r.clone()]);
                    let mean_g = gs.iter().fold(T::zero(), |a, &g| a + g) / count;
                    let mean_gy =
                        ys.iter().zip(gs).fold(T::zero(), |a, (&yy, &g)| a + yy * g) / count;
                    for ((d, &yy), &g) in dx[r].iter_mut().zip(ys).zip(gs) {
                        *d = *inv * (g - mean_g - yy * mean_gy);
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(y.shape(), dx).unwrap());
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let dx: Vec<T> = xv
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { g * *slope })
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::Sigmoid { x } => {
                let dx: Vec<T> = node
                    .value
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(node.value.shape(), dx).unwrap());
            }
            Op::MulChannelBroadcast { x, a } => {
                let xv = self.value(*x);
                let av = self.value(*a);
                let (n, c, h, w) = xv.dims4();
                let plane = h * w;
                if self.wants(*x) {
                    let mut dx = gy.data().to_vec();
                    for s in 0..n {
                        let att = &av.data()[s * plane..(s + 1) * plane];
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            for (d, &m) in dx[base..base + plane].iter_mut().zip(att) {
                                *d = *d * m;
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
                }
                if self.wants(*a) {
                    let mut da = vec![T::zero(); n * plane];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            let xs = &xv.data()[base..base + plane];
                            let gs = &gy.data()[base..base + plane];
                            for ((d, &xx), &g) in
                                da[s * plane..(s + 1) * plane].iter_mut().zip(xs).zip(gs)
                            {
                                *d = *d + xx * g;
                            }
                        }
                    }
                    accumulate(grads, *a, Tensor::from_vec(av.shape(), da).unwrap());
                }
            }
            Op::Concat { parts } => {
                let (n, total_c, h, w) = node.value.dims4();
                let plane = h * w;
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let pc = pv.shape()[1];
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(pv.len());
                        for s in 0..n {
                            let start = (s * total_c + offset) * plane;
                            dp.extend_from_slice(&gy.data()[start..start + pc * plane]);
                        }
                        accumulate(grads, *p, Tensor::from_vec(pv.shape(), dp).unwrap());
                    }
                    offset += pc;
                }
            }
            Op::ChannelMean { x } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let plane = h * w;
                let inv = T::one() / T::from_usize(c).unwrap();
                let mut dx = vec![T::zero(); xv.len()];
                for s in 0..n {
                    let g = &gy.data()[s * plane..(s + 1) * plane];
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for (d, &gg) in dx[base..base + plane].iter_mut().zip(g) {
                            *d = gg * inv;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::ChannelMax { x, argmax } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let plane = h * w;
                let mut dx = vec![T::zero(); xv.len()];
                for s in 0..n {
                    for p in 0..plane {
                        let ch = argmax[s * plane + p] as usize;
                        dx[(s * c + ch) * plane + p] = gy.data()[s * plane + p];
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, i) = (xv.shape()[0], xv.shape()[1]);
                let o = wv.shape()[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * i];
                    T::gemm(
                        n,
                        o,
                        i,
                        gy.data(),
                        (o as isize, 1),
                        wv.data(),
                        (i as isize, 1),
                        T::zero(),
                        &mut dx,
                    );
                    accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); o * i];
                    T::gemm(
                        o,
                        n,
                        i,
                        gy.data(),
                        (1, o as isize),
                        xv.data(),
                        (i as isize, 1),
                        T::zero(),
                        &mut dw,
                    );
                    accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw).unwrap());
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    accumulate(grads, b, channel_sums(gy.data(), n, o, 1));
                }
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, gy.clone().reshaped(&shape).unwrap());
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4();
                let plane = h * w;
                let inv = T::one() / T::from_usize(plane).unwrap();
                let mut dx = Vec::with_capacity(xv.len());
                for &g in gy.data() {
                    dx.extend(std::iter::repeat_n(g * inv, plane));
                }
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(grads, *v, gy.clone());
                    }
                }
            }
            Op::Scale { x, factor } => {
                accumulate(grads, *x, gy.map(|g| g * *factor));
            }
            Op::WeightedL1 {
                x,
                target,
                weights,
                total,
            } => {
                let xv = self.value(*x);
                let g = gy.data()[0] / *total;
                let dx: Vec<T> = xv
                    .data()
                    .iter()
                    .zip(target)
                    .zip(weights)
                    .map(|((&p, &t), &w)| {
                        let d = p - t;
                        let s = if d > T::zero() {
                            T::one()
                        } else if d < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        g * w * s
                    })
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::SoftplusMean {
                x,
                weights,
                sign,
                total,
            } => {
                let xv = self.value(*x);
                let dx: Vec<T> = if *total > T::zero() {
                    let g = gy.data()[0] / *total;
                    xv.data()
                        .iter()
                        .zip(weights)
                        .map(|(&v, &w)| g * w * *sign * sigmoid(*sign * v))
                        .collect()
                } else {
                    vec![T::zero(); xv.len()]
                };
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::WeightedSum { x, weights } => {
                let xv = self.value(*x);
                let g = gy.data()[0];
                let dx: Vec<T> = weights.iter().map(|&w| g * w).collect();
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
        }
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize, c: usize, plane: usize) {
    for s in 0..n {
        for (ch, &b) in bias.iter().enumerate().take(c) {
            let base = (s * c + ch) * plane;
            for v in &mut out[base..base + plane] {
                *v = *v + b;
            }
        }
    }
}

fn channel_sums<T: Scalar>(g: &[T], n: usize, c: usize, plane: usize) -> Tensor<T> {
    let mut sums = vec![T::zero(); c];
    for s in 0..n {
        for (ch, acc) in sums.iter_mut().enumerate() {
            let base = (s * c + ch) * plane;
            *acc = g[base..base + plane].iter().fold(*acc, |a, &v| a + v);
        }
    }
    Tensor::from_vec(&[c], sums).unwrap()
}

/// Numerically stable logistic function, exposed for reporting paths that
/// need probabilities outside a graph.
pub fn logistic<T: Scalar>(x: T) -> T {
    sigmoid(x)
}

/// Numerically stable `ln(1 + e^z)`.
pub fn softplus_value<T: Scalar>(z: T) -> T {
    softplus(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4();
        let (o, _, k, _) = w.dims4();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for s in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((s * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                        out.data_mut()[((s * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 4), (1, 3, 7), (1, 0, 1), (2, 0, 2)] {
            let x = random(&[2, 3, 9, 8], &mut rng);
            let w = random(&[4, 3, k, k], &mut rng);
            let expected = naive_conv(&x, &w, stride, pad);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let wv = g.constant(w);
            let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
            for (a, b) in g.value(y).data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> for the same weights.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 3, 8, 8], &mut rng);
        let w = random(&[5, 3, 4, 4], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let cx = g.conv2d(xv, wv, None, 2, 1).unwrap();
        let y = random(g.value(cx).shape(), &mut rng);
        let yv = g.constant(y.clone());
        // conv weight [O, C, k, k] read as transposed-conv weight [Cin=O, Cout=C, k, k]
        let ty = g.conv_transpose2d(yv, wv, None, 2, 1).unwrap();
        let lhs: f64 = g
            .value(cx)
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(g.value(ty).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    fn numeric_grad(f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / denom < 1e-5, "analytic {x} vs numeric {y}");
        }
    }

    #[test]
    fn every_op_backpropagates_like_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random(&[2, 3, 6, 6], &mut rng);
        let wc = random(&[4, 3, 3, 3], &mut rng);
        let wt = random(&[4, 2, 4, 4], &mut rng);
        let bt = random(&[2], &mut rng);
        let wl = random(&[3, 8], &mut rng);
        let weights = random(&[2 * 2 * 12 * 12], &mut rng);
        let build = |x: &Tensor<f64>, g: &mut Graph<f64>| -> (Var, Var) {
            let xv = g.param(x.clone());
            let w = g.constant(wc.clone());
            let c = g.conv2d(xv, w, None, 1, 1).unwrap();
            let n = g.instance_norm(c, 1e-5);
            let a = g.leaky_relu(n, 0.2);
            let mean = g.channel_mean(a);
            let max = g.channel_max(a);
            let cat = g.concat_channels(&[mean, max]).unwrap();
            let s = g.sigmoid(cat);
            let m0 = g.channel_mean(s);
            let att = g.mul_channel_broadcast(a, m0).unwrap();
            let wt = g.constant(wt.clone());
            let bt = g.constant(bt.clone());
            let up = g.conv_transpose2d(att, wt, Some(bt), 2, 1).unwrap();
            let loss1 = g.weighted_sum(up, weights.data()).unwrap();
            let pooled = g.global_avg_pool(a);
            let flat = g.reshape(pooled, &[1, 8]).unwrap();
            let wl = g.constant(wl.clone());
            let lin = g.linear(flat, wl, None).unwrap();
            let l2 = g
                .weighted_l1(lin, &[0.1, -0.3, 0.2], &[1.0, 2.0, 0.5])
                .unwrap();
            let l3 = g.softplus_mean(lin, &[1.0, 0.0, 3.0], -1.0).unwrap();
            let sum = g.add(loss1, l2).unwrap();
            let l3s = g.scale(l3, 0.7);
            (xv, g.add(sum, l3s).unwrap())
        };
        let f = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let (_, l) = build(x, &mut g);
            g.value(l).data()[0]
        };
        let mut g = Graph::new();
        let (xv, loss) = build(&x0, &mut g);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(xv).unwrap().data().to_vec();
        assert_close(&analytic, &numeric_grad(&f, &x0));
    }

    #[test]
    fn channel_mean_is_permutation_invariant_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 7, 5, 5], &mut rng).cast::<f32>();
        let mut perm: Vec<usize> = (0..7).collect();
        perm.reverse();
        perm.swap(1, 4);
        let mut xp = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            xp.data_mut()[dst * 25..(dst + 1) * 25]
                .copy_from_slice(&x.data()[src * 25..(src + 1) * 25]);
        }
        let mut g = Graph::new();
        let a = g.constant(x);
        let b = g.constant(xp);
        let ma = g.channel_mean(a);
        let mb = g.channel_mean(b);
        assert_eq!(g.value(ma).data(), g.value(mb).data());
    }

    #[test]
    fn frozen_branches_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 0.5));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let l = g.mean(y);
        assert!(!g.needs_grad(l));
        let grads = g.backward(l).unwrap();
        assert!(grads.get(w).is_none());
    }

    #[test]
    fn softplus_is_stable_for_large_logits() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
