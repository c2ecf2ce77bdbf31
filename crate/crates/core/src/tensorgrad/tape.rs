use std::collections::BTreeMap;

use super::kernels::{axis_extents, gemm_nn, gemm_nt, gemm_tn, sigmoid, softplus};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a tensor recorded on a [`Tape`].
///
/// A `Var` together with its tape node plays the role of a differentiable
/// tensor: the node holds shape, values and whether a gradient is tracked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
    Sigmoid,
}

/// One bilinear read: up to four weighted texels of a grid, or nothing.
#[derive(Clone, Debug)]
pub struct BilinearTap<T> {
    pub grid: usize,
    pub texels: [(usize, T); 4],
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulRows(Var, Var),
    Affine { a: Var, scale: T },
    Exp(Var),
    Ln(Var),
    Activation(Var, Activation),
    Softmax(Var),
    LayerNorm { a: Var, gain: Var, bias: Var, normalized: Vec<T>, inv_std: Vec<T> },
    CumsumExclusive(Var),
    SumAxis { a: Var, axis: usize },
    SumAll(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    GatherRows { a: Var, indices: Vec<usize> },
    Bilinear { grids: Vec<Var>, taps: Vec<Option<BilinearTap<T>>> },
    Conv2d { input: Var, weight: Var, bias: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::MulRows(..) => "mul_rows",
            Op::Affine { .. } => "affine",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Activation(..) => "activation",
            Op::Softmax(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CumsumExclusive(..) => "cumsum_exclusive",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll(..) => "sum",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::Bilinear { .. } => "bilinear_gather",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed primitives, in execution (hence topological) order.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, or zeros shaped like it when `v` was not
    /// on the path to the loss.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a named parameter onto the tape. Repeated requests for the
    /// same name return the same node so gradients accumulate.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.variable(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `a[..., k] · b[k, n] -> [..., n]`; leading axes of `a` are flattened
    /// into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product `a[B,m,k] · b[B,k,n]`, or `a · bᵀ` with `b[B,n,k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Shape {
            op: "batch_matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let ab = &av[i * m * k..(i + 1) * m * k];
            let bb = &bv[i * k * n..(i + 1) * k * n];
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                gemm_nt(ab, bb, ob, m, k, n);
            } else {
                gemm_nn(ab, bb, ob, m, k, n);
            }
        }
        self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, transpose_b },
            &[a, b],
        )
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds `bias[n]` to every row of `a[..., n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                left: self.shape(a).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.push(value, Op::AddBias(a, bias), &[a, bias])
    }

    /// Scales each row of `a[..., d]` by the matching entry of `s`, where `s`
    /// holds one value per row.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        let rows = self.value(a).len() / d.max(1);
        if self.value(s).len() != rows {
            return Err(Error::Shape {
                op: "mul_rows",
                left: self.shape(a).to_vec(),
                right: self.shape(s).to_vec(),
            });
        }
        let mut value = self.value(a).clone();
        let sv = self.value(s).data().to_vec();
        for (row, &k) in value.data_mut().chunks_mut(d).zip(&sv) {
            for x in row.iter_mut() {
                *x *= k;
            }
        }
        self.push(value, Op::MulRows(a, s), &[a, s])
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var> {
        let value = self.value(a).map(|x| scale * x + shift);
        self.push(value, Op::Affine { a, scale }, &[a])
    }

    pub fn scale(&mut self, a: Var, scale: T) -> Result<Var> {
        self.affine(a, scale, T::zero())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(T::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    /// Natural logarithm; non-positive inputs fail the finiteness check.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(T::ln);
        self.push(value, Op::Ln(a), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let value = match kind {
            Activation::Relu => self.value(a).map(|x| x.max(T::zero())),
            Activation::Softplus => self.value(a).map(softplus),
            Activation::Sigmoid => self.value(a).map(sigmoid),
        };
        self.push(value, Op::Activation(a, kind), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax_rows(a, None)
    }

    /// Softmax over the last axis where entries with `mask == false` are
    /// excluded (their score is treated as −∞). A row with no admissible
    /// entry produces all zeros.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let n = self.value(a).last_dim();
        if let Some(m) = mask {
            if m.len() != self.value(a).len() {
                return Err(Error::Shape {
                    op: "softmax_rows",
                    left: self.shape(a).to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let mut value = self.value(a).clone();
        for (r, row) in value.data_mut().chunks_mut(n).enumerate() {
            let keep = |j: usize| mask.map_or(true, |m| m[r * n + j]);
            let mut max = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if keep(j) && x > max {
                    max = x;
                }
            }
            if max == T::neg_infinity() {
                row.iter_mut().for_each(|x| *x = T::zero());
                continue;
            }
            let mut total = T::zero();
            for (j, x) in row.iter_mut().enumerate() {
                *x = if keep(j) { (*x - max).exp() } else { T::zero() };
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = self.value(a).last_dim();
        if d < 2 || self.value(a).rank() == 0 {
            return Err(Error::InvalidDimension {
                op: "layer_norm",
                detail: format!("normalized width must be at least 2, got {d}"),
            });
        }
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: self.shape(a).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let x = self.value(a);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = x.len() / d;
        let dt = T::of(d as f64);
        let mut normalized = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * inv;
                normalized.push(xh);
                out.push(g[j] * xh + b[j]);
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                a,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[a, gain, bias],
        )
    }

    /// `y[i] = Σ_{j<i} x[j]` along the last axis.
    pub fn cumsum_exclusive(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(n) {
            let mut acc = T::zero();
            for x in row.iter_mut() {
                let cur = *x;
                *x = acc;
                acc += cur;
            }
        }
        self.push(value, Op::CumsumExclusive(a), &[a])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidDimension {
                op: "sum_axis",
                detail: format!("axis {axis} for shape {shape:?}"),
            });
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        self.push(Tensor::new(new_shape, out)?, Op::SumAxis { a, axis }, &[a])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return Err(Error::Contract("concat of zero tensors".into())),
        };
        if axis >= first.len() {
            return Err(Error::InvalidDimension {
                op: "concat",
                detail: format!("axis {axis} for shape {first:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    left: first.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape(a), &[a])
    }

    /// Treats `a` as rows of its last dimension and returns
    /// `[indices.len(), d]` with row `i` copied from row `indices[i]`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let d = self.value(a).last_dim();
        let rows = self.value(a).len() / d.max(1);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
            &[a],
        )
    }

    /// Bilinear reads from `[H, W, C]` grids: output row `i` is the weighted
    /// texel sum described by `taps[i]`, or zeros when `taps[i]` is `None`.
    pub fn bilinear_gather(&mut self, grids: &[Var], taps: Vec<Option<BilinearTap<T>>>) -> Result<Var> {
        let c = match grids.first() {
            Some(&g) => self.value(g).last_dim(),
            None => return Err(Error::Contract("bilinear_gather needs a grid".into())),
        };
        for &g in grids {
            let s = self.shape(g);
            if s.len() != 3 || s[2] != c {
                return Err(Error::Shape {
                    op: "bilinear_gather",
                    left: self.shape(grids[0]).to_vec(),
                    right: s.to_vec(),
                });
            }
        }
        let mut out = vec![T::zero(); taps.len() * c];
        for (row, tap) in out.chunks_mut(c).zip(&taps) {
            let Some(tap) = tap else { continue };
            let grid = grids
                .get(tap.grid)
                .ok_or_else(|| Error::Contract(format!("bilinear tap grid {} missing", tap.grid)))?;
            let data = self.value(*grid).data();
            let texels = data.len() / c;
            for &(texel, w) in &tap.texels {
                if texel >= texels {
                    return Err(Error::Contract(format!("bilinear texel {texel} out of range")));
                }
                for (o, &v) in row.iter_mut().zip(&data[texel * c..(texel + 1) * c]) {
                    *o += w * v;
                }
            }
        }
        let n = taps.len();
        self.push(
            Tensor::new(vec![n, c], out)?,
            Op::Bilinear {
                grids: grids.to_vec(),
                taps,
            },
            grids,
        )
    }

    /// 3×3 convolution, stride 1, zero padding: `[H, W, Cin] -> [H, W, Cout]`.
    /// `weight` is `[9·Cin, Cout]` with rows ordered by (ky, kx, cin).
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 3 || sw.len() != 2 || sw[0] != 9 * si[2] || self.shape(bias) != [sw[1]] {
            return Err(Error::Shape {
                op: "conv2d",
                left: si,
                right: sw,
            });
        }
        let (h, w, cin, cout) = (si[0], si[1], si[2], sw[1]);
        let x = self.value(input).data();
        let k = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(h * w * cout);
        for _ in 0..h * w {
            out.extend_from_slice(b);
        }
        for y in 0..h {
            for xx in 0..w {
                let o = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                for (tap, (sy, sx)) in conv_taps(y, xx, h, w) {
                    let src = &x[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                    gemm_nn(src, &k[tap * cin * cout..(tap + 1) * cin * cout], o, 1, cin, cout);
                }
            }
        }
        self.push(
            Tensor::new(vec![h, w, cout], out)?,
            Op::Conv2d { input, weight, bias },
            &[input, weight, bias],
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let value = self.value(loss);
        if value.len() != 1 {
            return Err(Error::NotScalar(value.shape().to_vec()));
        }
        self.backward_with_seed(loss, Tensor::full(value.shape(), T::one()))
    }

    /// Reverse-mode sweep seeded with an explicit upstream gradient for `root`.
    pub fn backward_with_seed(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(root) {
            return Err(Error::Shape {
                op: "backward",
                left: self.shape(root).to_vec(),
                right: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(seed);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            for (input, contribution) in self.local_grads(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient for every parameter in `store`, zero when the parameter was
    /// never used on this tape.
    pub fn param_gradients(&self, grads: &Gradients<T>, store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
        store
            .iter()
            .map(|(name, value)| {
                let g = self
                    .params
                    .get(name)
                    .and_then(|&v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (name.clone(), g)
            })
            .collect()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let out = match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul(a, b) => {
                let sb = self.shape(b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(a).len() / k.max(1);
                let mut res = Vec::new();
                if self.needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(gd, self.value(b).data(), &mut da, m, n, k);
                    res.push((a, Tensor::new(self.shape(a).to_vec(), da)?));
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(self.value(a).data(), gd, &mut db, m, k, n);
                    res.push((b, Tensor::new(vec![k, n], db)?));
                }
                res
            }
            &Op::BatchMatMul { a, b, transpose_b } => {
                let sa = self.shape(a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for t in 0..batch {
                    let gb = &gd[t * m * n..(t + 1) * m * n];
                    let ab = &av[t * m * k..(t + 1) * m * k];
                    let bb = &bv[t * k * n..(t + 1) * k * n];
                    let dab = &mut da[t * m * k..(t + 1) * m * k];
                    let dbb = &mut db[t * k * n..(t + 1) * k * n];
                    if transpose_b {
                        // c = a·bᵀ: da = g·b, db = gᵀ·a
                        gemm_nn(gb, bb, dab, m, n, k);
                        gemm_tn(gb, ab, dbb, m, n, k);
                    } else {
                        gemm_nt(gb, bb, dab, m, n, k);
                        gemm_tn(ab, gb, dbb, m, k, n);
                    }
                }
                vec![
                    (a, Tensor::new(sa.to_vec(), da)?),
                    (b, Tensor::new(self.shape(b).to_vec(), db)?),
                ]
            }
            &Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            &Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|x| -x))],
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let da = Tensor::from_fn(va.shape(), |j| gd[j] * vb.data()[j]);
                let db = Tensor::from_fn(vb.shape(), |j| gd[j] * va.data()[j]);
                vec![(a, da), (b, db)]
            }
            &Op::AddBias(a, bias) => {
                let n = self.value(bias).len();
                let mut db = vec![T::zero(); n];
                for row in gd.chunks(n) {
                    for (d, &x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                vec![(a, g.clone()), (bias, Tensor::new(vec![n], db)?)]
            }
            &Op::MulRows(a, s) => {
                let d = self.value(a).last_dim();
                let (va, vs) = (self.value(a).data(), self.value(s).data());
                let mut da = g.clone();
                let mut ds = vec![T::zero(); vs.len()];
                for (r, row) in da.data_mut().chunks_mut(d).enumerate() {
                    let mut acc = T::zero();
                    for (j, x) in row.iter_mut().enumerate() {
                        acc += *x * va[r * d + j];
                        *x *= vs[r];
                    }
                    ds[r] = acc;
                }
                vec![(a, da), (s, Tensor::new(self.shape(s).to_vec(), ds)?)]
            }
            &Op::Affine { a, scale } => vec![(a, g.map(|x| x * scale))],
            &Op::Exp(a) => {
                let y = node.value.data();
                vec![(a, Tensor::from_fn(g.shape(), |j| gd[j] * y[j]))]
            }
            &Op::Ln(a) => {
                let x = self.value(a).data();
                vec![(a, Tensor::from_fn(g.shape(), |j| gd[j] / x[j]))]
            }
            &Op::Activation(a, kind) => {
                let x = self.value(a).data();
                let y = node.value.data();
                let da = match kind {
                    Activation::Relu => Tensor::from_fn(g.shape(), |j| {
                        if x[j] > T::zero() {
                            gd[j]
                        } else {
                            T::zero()
                        }
                    }),
                    Activation::Softplus => Tensor::from_fn(g.shape(), |j| gd[j] * sigmoid(x[j])),
                    Activation::Sigmoid => Tensor::from_fn(g.shape(), |j| gd[j] * y[j] * (T::one() - y[j])),
                };
                vec![(a, da)]
            }
            &Op::Softmax(a) => {
                let n = node.value.last_dim();
                let y = node.value.data();
                let mut da = g.clone();
                for (r, row) in da.data_mut().chunks_mut(n).enumerate() {
                    let yr = &y[r * n..(r + 1) * n];
                    let dot: T = row.iter().zip(yr).map(|(&gv, &yv)| gv * yv).sum();
                    for (x, &yv) in row.iter_mut().zip(yr) {
                        *x = yv * (*x - dot);
                    }
                }
                vec![(a, da)]
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let dt = T::of(d as f64);
                let gv = self.value(*gain).data();
                let mut dx = vec![T::zero(); gd.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for (r, grow) in gd.chunks(d).enumerate() {
                    let xh = &normalized[r * d..(r + 1) * d];
                    let mut mean_g = T::zero();
                    let mut mean_gx = T::zero();
                    for j in 0..d {
                        let gxh = grow[j] * gv[j];
                        mean_g += gxh;
                        mean_gx += gxh * xh[j];
                        dgain[j] += grow[j] * xh[j];
                        dbias[j] += grow[j];
                    }
                    mean_g /= dt;
                    mean_gx /= dt;
                    for j in 0..d {
                        dx[r * d + j] = inv_std[r] * (grow[j] * gv[j] - mean_g - xh[j] * mean_gx);
                    }
                }
                vec![
                    (*a, Tensor::new(g.shape().to_vec(), dx)?),
                    (*gain, Tensor::new(vec![d], dgain)?),
                    (*bias, Tensor::new(vec![d], dbias)?),
                ]
            }
            &Op::CumsumExclusive(a) => {
                let n = node.value.last_dim();
                let mut da = g.clone();
                for row in da.data_mut().chunks_mut(n) {
                    let mut acc = T::zero();
                    for x in row.iter_mut().rev() {
                        let cur = *x;
                        *x = acc;
                        acc += cur;
                    }
                }
                vec![(a, da)]
            }
            &Op::SumAxis { a, axis } => {
                let shape = self.shape(a).to_vec();
                let (outer, len, inner) = axis_extents(&shape, axis);
                let mut da = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        da.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(a, Tensor::new(shape, da)?)]
            }
            &Op::SumAll(a) => vec![(a, Tensor::full(self.shape(a), gd[0]))],
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_extents(shape, *axis);
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    let mut dp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        dp.extend_from_slice(&gd[start..start + len * inner]);
                    }
                    offset += len;
                    res.push((p, Tensor::new(self.shape(p).to_vec(), dp)?));
                }
                res
            }
            &Op::Reshape(a) => vec![(a, g.clone().reshape(self.shape(a))?)],
            Op::GatherRows { a, indices } => {
                let d = node.value.last_dim();
                let mut da = Tensor::zeros(self.shape(*a));
                let dd = da.data_mut();
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        dd[i * d + j] += gd[r * d + j];
                    }
                }
                vec![(*a, da)]
            }
            Op::Bilinear { grids, taps } => {
                let c = node.value.last_dim();
                let mut dg: Vec<Tensor<T>> = grids.iter().map(|&v| Tensor::zeros(self.shape(v))).collect();
                for (r, tap) in taps.iter().enumerate() {
                    let Some(tap) = tap else { continue };
                    let dst = dg[tap.grid].data_mut();
                    for &(texel, w) in &tap.texels {
                        for j in 0..c {
                            dst[texel * c + j] += w * gd[r * c + j];
                        }
                    }
                }
                grids.iter().copied().zip(dg).collect()
            }
            &Op::Conv2d { input, weight, bias } => {
                let si = self.shape(input);
                let (h, w, cin) = (si[0], si[1], si[2]);
                let cout = node.value.last_dim();
                let x = self.value(input).data();
                let k = self.value(weight).data();
                let mut dx = vec![T::zero(); x.len()];
                let mut dk = vec![T::zero(); k.len()];
                let mut db = vec![T::zero(); cout];
                for y in 0..h {
                    for xx in 0..w {
                        let go = &gd[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                        for (d, &v) in db.iter_mut().zip(go) {
                            *d += v;
                        }
                        for (tap, (sy, sx)) in conv_taps(y, xx, h, w) {
                            let base = (sy * w + sx) * cin;
                            let kt = &k[tap * cin * cout..(tap + 1) * cin * cout];
                            let dkt = &mut dk[tap * cin * cout..(tap + 1) * cin * cout];
                            // dk[tap] += xᵀ·g ; dx += g·kᵀ
                            gemm_tn(&x[base..base + cin], go, dkt, 1, cin, cout);
                            gemm_nt(go, kt, &mut dx[base..base + cin], 1, cout, cin);
                        }
                    }
                }
                vec![
                    (input, Tensor::new(si.to_vec(), dx)?),
                    (weight, Tensor::new(self.shape(weight).to_vec(), dk)?),
                    (bias, Tensor::new(vec![cout], db)?),
                ]
            }
        };
        Ok(out)
    }
}

/// In-bounds source pixels of a 3×3 stencil centred on `(y, x)`, tagged
/// with their tap index `ky·3 + kx`.
fn conv_taps(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, (usize, usize))> {
    (0..9).filter_map(move |tap| {
        let sy = (y + tap / 3).checked_sub(1)?;
        let sx = (x + tap % 3).checked_sub(1)?;
        (sy < h && sx < w).then_some((tap, (sy, sx)))
    })
}
