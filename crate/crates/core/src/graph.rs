//! Recorded computation graph with reverse-mode gradient accumulation.
//!
//! Every operation appends a node holding its value and enough information to
//! replay its adjoint. Nodes are only ever appended, so the node list is a
//! topological order and [`Graph::backward`] walks it in reverse.
//!
//! Gradients of `requires_grad` leaves persist across calls to `backward` and
//! accumulate additively until [`Graph::zero_grad`].

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::conv::{col2im, gemm, im2col, ConvGeom};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation kinds. `Add`, `Sub` and `Mul` are binary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    LeakyRelu(f64),
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary {
        kind: Elementwise,
        a: Var,
    },
    Binary {
        kind: Elementwise,
        a: Var,
        b: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Reduce {
        a: Var,
        map: Arc<[usize]>,
        scale: f64,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        a: Var,
        offset: usize,
    },
    Reshape {
        a: Var,
    },
    Gather {
        a: Var,
        index: Arc<[usize]>,
    },
    BroadcastChannels {
        a: Var,
        plane: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation graph. Single-threaded; distinct graphs are independent.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    #[cfg(test)]
    pub(crate) mul_adjoint_fault: Option<f64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
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

    /// Accumulated gradient of a `requires_grad` leaf, `None` before any backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.grad(v)?;
        Tensor::new(self.shape(v).to_vec(), g.to_vec()).ok()
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.fill(0.0);
        }
    }

    // ---- elementwise -------------------------------------------------------

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => self.binary(kind, a, b),
            (false, None) => self.unary(kind, a),
            _ => Err(Error::Domain {
                op: "elementwise",
                detail: alloc::format!("{kind:?} called with wrong arity"),
            }),
        }
    }

    fn unary(&mut self, kind: Elementwise, a: Var) -> Result<Var> {
        let x = self.value(a);
        let f: fn(f64) -> f64 = match kind {
            Elementwise::Exp => math::exp,
            Elementwise::Log => {
                if let Some(bad) = x.data().iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: alloc::format!("non-positive input {bad}"),
                    });
                }
                math::ln
            }
            Elementwise::Tanh => math::tanh,
            Elementwise::Sigmoid => math::sigmoid,
            Elementwise::LeakyRelu(slope) => {
                let data = x.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
                let out = Tensor::new(x.shape().to_vec(), data)?;
                let rg = self.requires_grad(a);
                return Ok(self.push(out, Op::Unary { kind, a }, rg));
            }
            _ => unreachable!(),
        };
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::Unary { kind, a }, rg))
    }

    fn binary(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        let shape = if xa.shape() == xb.shape() || xb.numel() == 1 {
            xa.shape().to_vec()
        } else if xa.numel() == 1 {
            xb.shape().to_vec()
        } else {
            return Err(Error::ShapeMismatch {
                op: "elementwise",
                left: xa.shape().to_vec(),
                right: xb.shape().to_vec(),
            });
        };
        let n: usize = shape.iter().product();
        let (da, db) = (xa.data(), xb.data());
        let (sa, sb) = (da.len() != 1, db.len() != 1);
        let f: fn(f64, f64) -> f64 = match kind {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            Elementwise::Mul => |x, y| x * y,
            _ => unreachable!(),
        };
        let data = (0..n)
            .map(|i| f(da[if sa { i } else { 0 }], db[if sb { i } else { 0 }]))
            .collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Log, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Sigmoid, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(Elementwise::LeakyRelu(slope), a)
    }

    /// `a * c` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    /// `-a`.
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let zero = self.scalar(0.0);
        self.sub(zero, a)
    }

    // ---- convolution -------------------------------------------------------

    /// Convolution of a `C x H x W` input with an `O x C x k x k` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, pad: usize, stride: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let ks = self.shape(kernel).to_vec();
        let [o, kc, k, k2] = ks[..] else {
            return Err(Error::ShapeMismatch {
                op: "conv2d kernel",
                left: ks,
                right: vec![0, c, 0, 0],
            });
        };
        if kc != c {
            return Err(Error::ChannelMismatch { input: c, kernel: kc });
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::Domain {
                op: "conv2d",
                detail: alloc::format!("kernel must be square with odd extent, got {k}x{k2}"),
            });
        }
        if self.shape(bias) != [o] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: self.shape(bias).to_vec(),
                right: vec![o],
            });
        }
        let geom = ConvGeom::new(c, h, w, o, k, stride, pad).ok_or_else(|| Error::Domain {
            op: "conv2d",
            detail: alloc::format!("kernel {k} does not fit {h}x{w} with padding {pad}"),
        })?;
        let n = geom.out_pixels();
        let mut cols = vec![0.0; geom.patch() * n];
        im2col(self.value(input).data(), &geom, &mut cols);
        let mut out = vec![0.0; o * n];
        for (row, &b) in out.chunks_mut(n).zip(self.value(bias).data()) {
            row.fill(b);
        }
        gemm(o, geom.patch(), n, self.value(kernel).data(), false, &cols, false, 1.0, &mut out);
        let value = Tensor::new(vec![o, geom.ho, geom.wo], out)?;
        let rg = self.requires_grad(input) || self.requires_grad(kernel) || self.requires_grad(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Stride-1 convolution with `(k-1)/2` zero padding, preserving `H x W`.
    pub fn conv2d_same(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let k = self.shape(kernel).get(2).copied().unwrap_or(1);
        self.conv2d(input, kernel, bias, k.saturating_sub(1) / 2, 1)
    }

    // ---- reductions --------------------------------------------------------

    /// Sums or averages over `axes`; the reduced axes are removed from the shape.
    pub fn reduce(&mut self, kind: Reduce, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::InvalidAxis { axis: ax, rank });
            }
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, r)| !**r)
            .map(|(d, _)| *d)
            .collect();
        let count: usize = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, r)| **r)
            .map(|(d, _)| *d)
            .product();
        let numel: usize = shape.iter().product();
        let map: Arc<[usize]> = if out_shape.is_empty() {
            vec![0; numel].into()
        } else {
            let mut map = Vec::with_capacity(numel);
            let mut idx = vec![0usize; rank];
            for _ in 0..numel {
                let mut o = 0;
                for ax in 0..rank {
                    if !reduced[ax] {
                        o = o * shape[ax] + idx[ax];
                    }
                }
                map.push(o);
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    if idx[ax] < shape[ax] {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
            map.into()
        };
        let scale = match kind {
            Reduce::Sum => 1.0,
            Reduce::Mean => 1.0 / count.max(1) as f64,
        };
        let mut out = vec![0.0; out_shape.iter().product()];
        for (v, &o) in self.value(a).data().iter().zip(map.iter()) {
            out[o] += v;
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reduce { a, map, scale }, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(Reduce::Sum, a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(Reduce::Mean, a, &axes)
    }

    // ---- rearrangements ----------------------------------------------------

    /// Concatenates along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.is_empty() || s[1..] != first[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first,
                    right: s.to_vec(),
                });
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = lead;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Channels `[start, start + len)` of the leading axis.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::ShapeMismatch {
                op: "split",
                left: shape,
                right: vec![start + len],
            });
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let rg = self.requires_grad(a);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Slice {
                a,
                offset: start * inner,
            },
            rg,
        ))
    }

    /// Splits the leading axis into `[0, at)` and `[at, end)`.
    pub fn split_channels(&mut self, a: Var, at: usize) -> Result<(Var, Var)> {
        let total = self.shape(a).first().copied().unwrap_or(0);
        if at > total {
            return Err(Error::ShapeMismatch {
                op: "split",
                left: self.shape(a).to_vec(),
                right: vec![at],
            });
        }
        let lo = self.slice_channels(a, 0, at)?;
        let hi = self.slice_channels(a, at, total - at)?;
        Ok((lo, hi))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// `out[i] = a[index[i]]`, reshaped to `shape`. Indices may repeat.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: shape.to_vec(),
                right: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: self.shape(a).to_vec(),
                right: vec![bad],
            });
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Gather { a, index }, rg))
    }

    /// Repeats a length-`C` vector over an `H x W` plane.
    pub fn broadcast_channels(&mut self, a: Var, height: usize, width: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_channels",
                left: v.shape().to_vec(),
                right: vec![v.numel()],
            });
        }
        let plane = height * width;
        let mut data = Vec::with_capacity(v.numel() * plane);
        for &x in v.data() {
            data.extend(core::iter::repeat_n(x, plane));
        }
        let value = Tensor::new(vec![v.numel(), height, width], data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::BroadcastChannels { a, plane }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every reachable `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        match &mut self.leaf_grads[idx] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            slot => *slot = Some(g),
                        }
                    }
                }
                Op::Unary { kind, a } => {
                    let x = self.nodes[a.0].value.data();
                    let y = node.value.data();
                    if let Some(ga) = slot(&mut grads, &self.nodes, *a) {
                        match kind {
                            Elementwise::Exp => {
                                for i in 0..g.len() {
                                    ga[i] += g[i] * y[i];
                                }
                            }
                            Elementwise::Log => {
                                for i in 0..g.len() {
                                    ga[i] += g[i] / x[i];
                                }
                            }
                            Elementwise::Tanh => {
                                for i in 0..g.len() {
                                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                                }
                            }
                            Elementwise::Sigmoid => {
                                for i in 0..g.len() {
                                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                                }
                            }
                            Elementwise::LeakyRelu(slope) => {
                                for i in 0..g.len() {
                                    ga[i] += if x[i] > 0.0 { g[i] } else { slope * g[i] };
                                }
                            }
                            _ => unreachable!(),
                        }
                    }
                }
                Op::Binary { kind, a, b } => {
                    let (a, b, kind) = (*a, *b, *kind);
                    let xa = self.nodes[a.0].value.data();
                    let xb = self.nodes[b.0].value.data();
                    let (sa, sb) = (xa.len() != 1, xb.len() != 1);
                    #[cfg(test)]
                    let fault = self.mul_adjoint_fault.unwrap_or(1.0);
                    #[cfg(not(test))]
                    let fault = 1.0;
                    if let Some(ga) = slot(&mut grads, &self.nodes, a) {
                        for i in 0..g.len() {
                            let d = match kind {
                                Elementwise::Add | Elementwise::Sub => g[i],
                                _ => g[i] * xb[if sb { i } else { 0 }] * fault,
                            };
                            ga[if sa { i } else { 0 }] += d;
                        }
                    }
                    if let Some(gb) = slot(&mut grads, &self.nodes, b) {
                        for i in 0..g.len() {
                            let d = match kind {
                                Elementwise::Add => g[i],
                                Elementwise::Sub => -g[i],
                                _ => g[i] * xa[if sa { i } else { 0 }],
                            };
                            gb[if sb { i } else { 0 }] += d;
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let (input, kernel, bias, geom) = (*input, *kernel, *bias, *geom);
                    let n = geom.out_pixels();
                    if let Some(gb) = slot(&mut grads, &self.nodes, bias) {
                        for (o, row) in g.chunks(n).enumerate() {
                            gb[o] += row.iter().sum::<f64>();
                        }
                    }
                    let need_k = self.nodes[kernel.0].requires_grad;
                    let need_x = self.nodes[input.0].requires_grad;
                    if need_k {
                        let mut cols = vec![0.0; geom.patch() * n];
                        im2col(self.nodes[input.0].value.data(), &geom, &mut cols);
                        let gk = slot(&mut grads, &self.nodes, kernel).expect("kernel requires grad");
                        gemm(geom.o, n, geom.patch(), &g, false, &cols, true, 1.0, gk);
                    }
                    if need_x {
                        let mut dcols = vec![0.0; geom.patch() * n];
                        gemm(
                            geom.patch(),
                            geom.o,
                            n,
                            self.nodes[kernel.0].value.data(),
                            true,
                            &g,
                            false,
                            0.0,
                            &mut dcols,
                        );
                        let gx = slot(&mut grads, &self.nodes, input).expect("input requires grad");
                        col2im(&dcols, &geom, gx);
                    }
                }
                Op::Reduce { a, map, scale } => {
                    if let Some(ga) = slot(&mut grads, &self.nodes, *a) {
                        for (d, &o) in ga.iter_mut().zip(map.iter()) {
                            *d += g[o] * scale;
                        }
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.numel();
                        if let Some(gp) = slot(&mut grads, &self.nodes, p) {
                            gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, b)| *a += b);
                        }
                        offset += len;
                    }
                }
                Op::Slice { a, offset } => {
                    let offset = *offset;
                    if let Some(ga) = slot(&mut grads, &self.nodes, *a) {
                        ga[offset..offset + g.len()]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                Op::Reshape { a } => {
                    if let Some(ga) = slot(&mut grads, &self.nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                Op::Gather { a, index } => {
                    if let Some(ga) = slot(&mut grads, &self.nodes, *a) {
                        for (d, &i) in g.iter().zip(index.iter()) {
                            ga[i] += d;
                        }
                    }
                }
                Op::BroadcastChannels { a, plane } => {
                    let plane = *plane;
                    if let Some(ga) = slot(&mut grads, &self.nodes, *a) {
                        for (c, row) in g.chunks(plane).enumerate() {
                            ga[c] += row.iter().sum::<f64>();
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradient buffer for `v` in the current pass, or `None` if `v` needs no gradient.
fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn exp_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 1.0]));
        let y = g.exp(x).unwrap();
        assert_eq!(g.value(y).data()[0], 1.0);
        assert!((g.value(y).data()[1] - core::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn add_zero_is_exact() {
        let mut g = Graph::new();
        let data = [0.1, -3.7, 1e-300, 5e10];
        let x = g.constant(t(&[4], &data));
        let z = g.scalar(0.0);
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y).data(), &data);
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 0.0, 2.0]));
        assert!(matches!(g.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([3, 2]));
        assert!(matches!(g.mul(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(g.elementwise(Elementwise::Exp, a, Some(b)).is_err());
        assert!(g.elementwise(Elementwise::Add, a, None).is_err());
    }

    #[test]
    fn mul_gradient_matches_central_difference() {
        // d(a*b)/da at a=3, b=4; central difference with step 1e-6 taken on the
        // product function directly as an independent reference.
        let h = 1e-6;
        let numeric = ((3.0 + h) * 4.0 - (3.0 - h) * 4.0) / (2.0 * h);
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(3.0), true);
        let b = g.leaf(Tensor::scalar(4.0), true);
        let y = g.mul(a, b).unwrap();
        g.backward(y).unwrap();
        assert!((g.grad(a).unwrap()[0] - numeric).abs() < 1e-8);
        assert_eq!(g.grad(a).unwrap()[0], 4.0);
        assert_eq!(g.grad(b).unwrap()[0], 3.0);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        // repeated backward accumulates
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
        g.zero_grad();
        assert_eq!(g.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn independent_loss_gives_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let w = g.leaf(t(&[2], &[3.0, 4.0]), true);
        let _unused = g.exp(x).unwrap();
        let s = g.sum_all(w).unwrap();
        let keep_x = g.scale(x, 0.0).unwrap();
        let k = g.sum_all(keep_x).unwrap();
        let loss = g.add(s, k).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([2]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([1, 3, 4], |i| i as f64 * 0.5 - 1.0));
        let k = g.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros([1]));
        let y = g.conv2d_same(x, k, b).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_ones_kernel_on_constant_field() {
        // Direct summation: an interior 3x3 window covers 9 pixels, a corner 4.
        let c = 1.5;
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 5, 5], c));
        let k = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros([1]));
        let y = g.conv2d_same(x, k, b).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 4.0 * c);
        assert_eq!(v[4], 4.0 * c);
        assert_eq!(v[24], 4.0 * c);
        assert_eq!(v[2], 6.0 * c);
        assert_eq!(v[2 * 5 + 2], 9.0 * c);
        assert_eq!(v[5 + 1], 9.0 * c);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([2, 4, 4], |i| i as f64));
        let k = g.constant(Tensor::zeros([3, 2, 3, 3]));
        let b = g.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let y = g.conv2d_same(x, k, b).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[3, 4, 4]);
        assert!(v.data()[..16].iter().all(|&x| x == 0.5));
        assert!(v.data()[32..].iter().all(|&x| x == 2.0));
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 4, 4]));
        let k = g.constant(Tensor::zeros([1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros([1]));
        assert_eq!(
            g.conv2d_same(x, k, b).unwrap_err(),
            Error::ChannelMismatch { input: 2, kernel: 3 }
        );
    }

    #[test]
    fn conv_stride_two_shape() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 8, 6]));
        let k = g.constant(Tensor::zeros([4, 2, 3, 3]));
        let b = g.constant(Tensor::zeros([4]));
        let y = g.conv2d(x, k, b, 1, 2).unwrap();
        assert_eq!(g.shape(y), &[4, 4, 3]);
    }

    #[test]
    fn reduce_values_and_grads() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let s = g.sum_all(x).unwrap();
        assert_eq!(g.value(s).item(), 6.0);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let c = g.constant(Tensor::full([2, 3, 3], 0.7));
        let m = g.mean_all(c).unwrap();
        assert!((g.value(m).item() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn reduce_partial_axes() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn([2, 3], |i| i as f64), true);
        let rows = g.reduce(Reduce::Sum, x, &[1]).unwrap();
        assert_eq!(g.value(rows).data(), &[3.0, 12.0]);
        let cols = g.reduce(Reduce::Mean, x, &[0]).unwrap();
        assert_eq!(g.value(cols).data(), &[1.5, 2.5, 3.5]);
        assert_eq!(
            g.reduce(Reduce::Sum, x, &[2]).unwrap_err(),
            Error::InvalidAxis { axis: 2, rank: 2 }
        );
        let w = g.constant(t(&[3], &[1.0, 10.0, 100.0]));
        let weighted = g.mul(cols, w).unwrap();
        let loss = g.sum_all(weighted).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.5, 5.0, 50.0, 0.5, 5.0, 50.0]);
    }

    #[test]
    fn split_concat_round_trip() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn([5, 4, 4], |i| (i as f64).sqrt()), true);
        let (a, b) = g.split_channels(x, 2).unwrap();
        assert_eq!(g.shape(a), &[2, 4, 4]);
        assert_eq!(g.shape(b), &[3, 4, 4]);
        let y = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert_eq!(g.shape(y), &[5, 4, 4]);
        let s = g.sum_all(a).unwrap();
        g.backward(s).unwrap();
        let gx = g.grad(x).unwrap();
        assert!(gx[..32].iter().all(|&v| v == 1.0));
        assert!(gx[32..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_extent_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 4, 4]));
        let b = g.constant(Tensor::zeros([2, 4, 3]));
        assert!(g.concat(&[a, b]).is_err());
        assert!(g.reshape(a, &[31]).is_err());
    }

    #[test]
    fn injected_fault_changes_mul_adjoint() {
        let mut g = Graph::new();
        g.mul_adjoint_fault = Some(1.1);
        let a = g.leaf(Tensor::scalar(3.0), true);
        let b = g.constant(Tensor::scalar(4.0));
        let y = g.mul(a, b).unwrap();
        g.backward(y).unwrap();
        assert!((g.grad(a).unwrap()[0] - 4.4).abs() < 1e-12);
    }
}
