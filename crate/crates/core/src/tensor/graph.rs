use super::{
    axis_extents, broadcast_index_map, broadcast_shapes, shape_error, ParamId, ParamStore, Real,
    Result, Tensor, TensorError,
};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param,
    Binary(Binary, Var, Var),
    Scale(Var, F),
    DivScalar(Var, F),
    Relu(Var),
    MatMul(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    SumAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    MaxAxis { input: Var, argmax: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    GatherRows { input: Var, idx: Vec<usize> },
    WeightedGather { input: Var, idx: Vec<usize>, weights: Vec<F>, fan: usize },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<F>, count: usize },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Records a forward computation so that gradients can be pulled back through it.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order and the backward pass simply walks it in reverse.
/// Parameters are looked up in the borrowed [`ParamStore`]; each parameter
/// becomes a single leaf no matter how often it is used, so gradients from
/// all of its uses accumulate on that leaf.
pub struct Graph<'s, F: Real> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    nodes: Vec<Option<Tensor<F>>>,
    param_vars: Vec<Option<Var>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient with respect to a recorded value, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter; `None` when the parameter was not reached.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.param_vars
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }

    /// Gradient of a parameter, zero-filled when it was not reached.
    pub fn param_or_zeros(&self, id: ParamId, store: &ParamStore<F>) -> Tensor<F> {
        self.param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape().to_vec()))
    }
}

fn bmap(out: &[usize], input: &[usize]) -> Option<Vec<usize>> {
    (out != input).then(|| broadcast_index_map(out, input))
}

#[inline]
fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    map.as_ref().map_or(i, |m| m[i])
}

impl<'s, F: Real> Graph<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Self { store, nodes: Vec::new(), param_vars: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        self.nodes.push(Node { value, op: Op::Param });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shapes(ta.shape(), tb.shape())?;
        let (ma, mb) = (bmap(&shape, ta.shape()), bmap(&shape, tb.shape()));
        let numel: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let f = match kind {
            Binary::Add => |x: F, y: F| x + y,
            Binary::Sub => |x: F, y: F| x - y,
            Binary::Mul => |x: F, y: F| x * y,
        };
        let data = if ma.is_none() && mb.is_none() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..numel).map(|i| f(da[at(&ma, i)], db[at(&mb, i)])).collect()
        };
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        self.push(Tensor::new(shape, data)?, Op::Binary(kind, a, b), name)
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::Scale(x, c), "scale")
    }

    /// Elementwise division by a scalar; kept separate from `scale` so that
    /// `x / c` is computed exactly as written.
    pub fn div_scalar(&mut self, x: Var, c: F) -> Result<Var> {
        if c == F::zero() {
            return Err(TensorError::Contract("division by zero".into()));
        }
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v / c).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::DivScalar(x, c), "div_scalar")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::Relu(x), "relu")
    }

    /// Batched matrix product `[.., p, q] · [.., q, r]` with broadcast batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_error(format!("matmul needs rank >= 2, got {sa:?} and {sb:?}"));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return shape_error(format!("matmul inner dimensions differ: {sa:?} · {sb:?}"));
        }
        let (batch_a, batch_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shapes(batch_a, batch_b)?;
        let mut shape = batch.clone();
        shape.extend([p, r]);
        let mut out = vec![F::zero(); shape.iter().product()];
        if batch_b.is_empty() {
            let rows = batch_a.iter().product::<usize>() * p;
            F::gemm(rows, q, r, F::one(), ta.data(), (q as isize, 1), tb.data(), (r as isize, 1), F::zero(), &mut out, (r as isize, 1));
        } else {
            let (ma, mb) = (broadcast_index_map(&batch, batch_a), broadcast_index_map(&batch, batch_b));
            for (bi, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
                F::gemm(
                    p,
                    q,
                    r,
                    F::one(),
                    &ta.data()[ia * p * q..(ia + 1) * p * q],
                    (q as isize, 1),
                    &tb.data()[ib * q * r..(ib + 1) * q * r],
                    (r as isize, 1),
                    F::zero(),
                    &mut out[bi * p * r..(bi + 1) * p * r],
                    (r as isize, 1),
                );
            }
        }
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 {
            return shape_error(format!("transpose_last2 needs rank >= 2, got {s:?}"));
        }
        let (p, q) = (s[s.len() - 2], s[s.len() - 1]);
        let mut shape = s.to_vec();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let value = Tensor::new(shape, transpose_blocks(t.data(), p, q))?;
        self.push(value, Op::TransposeLast2(x), "transpose_last2")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(x), "reshape")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        };
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return shape_error(format!("concat axis {axis} out of range for rank {}", base.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_error(format!("concat along {axis}: {base:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, "concat")
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if axis >= s.len() {
            return shape_error(format!("slice axis {axis} out of range for rank {}", s.len()));
        }
        if start + len > s[axis] {
            return shape_error(format!("slice {start}..{} exceeds axis size {}", start + len, s[axis]));
        }
        let (outer, full, inner) = axis_extents(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Slice { input: x, axis, start }, "slice")
    }

    /// Splits `x` along `axis` into pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let s = self.value(x).shape();
        if axis >= s.len() {
            return shape_error(format!("split axis {axis} out of range for rank {}", s.len()));
        }
        if sizes.iter().sum::<usize>() != s[axis] {
            return shape_error(format!("split sizes {sizes:?} do not cover axis of size {}", s[axis]));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: F = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), "sum_all")
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if axis >= s.len() {
            return shape_error(format!("reduction axis {axis} out of range for rank {}", s.len()));
        }
        let (outer, len, inner) = axis_extents(s, axis);
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        if mean {
            let n = F::of(len as f64);
            data.iter_mut().for_each(|d| *d /= n);
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, data)?;
        if mean {
            self.push(value, Op::MeanAxis(x, axis), "mean_over_axis")
        } else {
            self.push(value, Op::SumAxis(x, axis), "sum_over_axis")
        }
    }

    pub fn sum_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Maximum along `axis`; the gradient flows to the first maximal entry.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if axis >= s.len() {
            return shape_error(format!("max axis {axis} out of range for rank {}", s.len()));
        }
        let (outer, len, inner) = axis_extents(s, axis);
        if len == 0 {
            return shape_error("max over an empty axis");
        }
        let d = t.data();
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * len * inner;
            let first = &d[base..base + inner];
            let mut best: Vec<F> = first.to_vec();
            let mut best_idx: Vec<usize> = (base..base + inner).collect();
            for l in 1..len {
                let off = base + l * inner;
                for i in 0..inner {
                    if d[off + i] > best[i] {
                        best[i] = d[off + i];
                        best_idx[i] = off + i;
                    }
                }
            }
            data.extend(best);
            argmax.extend(best_idx);
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::MaxAxis { input: x, argmax }, "max_over_axis")
    }

    /// Softmax over the last axis, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() == 0 || t.last_dim() == 0 {
            return shape_error("softmax over an empty last dimension");
        }
        let mut data = Vec::with_capacity(t.numel());
        for row in t.rows() {
            softmax_into(row, &mut data);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::Softmax(x), "softmax_rows")
    }

    /// Normalises each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        if eps <= F::zero() {
            return Err(TensorError::Contract("layer_norm eps must be positive".into()));
        }
        let t = self.value(x);
        let d = t.last_dim();
        if t.ndim() == 0 || d == 0 {
            return shape_error("layer_norm over an empty last dimension");
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [d] || tb.shape() != [d] {
            return shape_error(format!(
                "layer_norm gain/bias must be [{d}], got {:?} and {:?}",
                tg.shape(),
                tb.shape()
            ));
        }
        let n = F::of(d as f64);
        let rows = t.numel() / d;
        let mut xhat = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(t.numel());
        for row in t.rows() {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                data.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, "layer_norm")
    }

    /// Selects rows (entries of axis 0) by index.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() == 0 {
            return shape_error("gather_rows on a scalar");
        }
        let n = t.shape()[0];
        let row: usize = t.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= n {
                return shape_error(format!("gather index {i} out of range for {n} rows"));
            }
            data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::GatherRows { input: x, idx: idx.to_vec() }, "gather_rows")
    }

    /// `out[q] = Σ_j weights[q·fan + j] · x[idx[q·fan + j]]` for a 2-D `x`.
    pub fn weighted_gather(&mut self, x: Var, idx: &[usize], weights: &[F], fan: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return shape_error(format!("weighted_gather needs a matrix, got {:?}", t.shape()));
        }
        if fan == 0 || idx.len() != weights.len() || idx.len() % fan != 0 {
            return shape_error("weighted_gather index/weight layout mismatch");
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let q = idx.len() / fan;
        let mut data = vec![F::zero(); q * d];
        for (qi, out) in data.chunks_exact_mut(d.max(1)).enumerate().take(q) {
            for j in 0..fan {
                let src = idx[qi * fan + j];
                if src >= n {
                    return shape_error(format!("gather index {src} out of range for {n} rows"));
                }
                let w = weights[qi * fan + j];
                for (o, &v) in out.iter_mut().zip(t.row(src)) {
                    *o += w * v;
                }
            }
        }
        let value = Tensor::new([q, d], data)?;
        let op = Op::WeightedGather { input: x, idx: idx.to_vec(), weights: weights.to_vec(), fan };
        self.push(value, op, "weighted_gather")
    }

    /// Mean negative log-likelihood over rows of `[R, C]` logits; rows whose
    /// target is `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.shape()[0] != targets.len() {
            return shape_error(format!(
                "cross_entropy expects [{}, C] logits, got {:?}",
                targets.len(),
                t.shape()
            ));
        }
        let c = t.shape()[1];
        let mut probs = Vec::with_capacity(t.numel());
        let mut total = F::zero();
        let mut count = 0;
        for (row, target) in t.rows().zip(targets) {
            let start = probs.len();
            softmax_into(row, &mut probs);
            if let Some(k) = *target {
                if k >= c {
                    return Err(TensorError::Contract(format!("label {k} out of range for {c} classes")));
                }
                let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
                total += lse - row[k];
                count += 1;
                debug_assert!(probs[start + k] <= F::one());
            }
        }
        if count == 0 {
            return Err(TensorError::Contract("every row is ignored".into()));
        }
        let loss = total / F::of(count as f64);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count };
        self.push(Tensor::scalar(loss), op, "cross_entropy")
    }

    /// Pulls gradients back from a scalar `loss` through every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        let mut done: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            done[i] = Some(Tensor::new(self.nodes[i].value.shape().to_vec(), g)?);
        }
        Ok(Gradients { nodes: done, param_vars: self.param_vars.clone() })
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ma, mb) = (bmap(out.shape(), ta.shape()), bmap(out.shape(), tb.shape()));
                let mut ga = vec![F::zero(); ta.numel()];
                let mut gb = vec![F::zero(); tb.numel()];
                for (k, &gk) in g.iter().enumerate() {
                    let (ia, ib) = (at(&ma, k), at(&mb, k));
                    match kind {
                        Binary::Add => {
                            ga[ia] += gk;
                            gb[ib] += gk;
                        }
                        Binary::Sub => {
                            ga[ia] += gk;
                            gb[ib] -= gk;
                        }
                        Binary::Mul => {
                            ga[ia] += gk * tb.data()[ib];
                            gb[ib] += gk * ta.data()[ia];
                        }
                    }
                }
                add_into(grads, *a, &ga);
                add_into(grads, *b, &gb);
            }
            Op::Scale(x, c) => {
                let gx: Vec<F> = g.iter().map(|&v| v * *c).collect();
                add_into(grads, *x, &gx);
            }
            Op::DivScalar(x, c) => {
                let gx: Vec<F> = g.iter().map(|&v| v / *c).collect();
                add_into(grads, *x, &gx);
            }
            Op::Relu(x) => {
                let gx: Vec<F> = g
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &o)| if o > F::zero() { gv } else { F::zero() })
                    .collect();
                add_into(grads, *x, &gx);
            }
            Op::MatMul(a, b) => self.backprop_matmul(*a, *b, out, g, grads),
            Op::TransposeLast2(x) => {
                let s = out.shape();
                let (p, q) = (s[s.len() - 2], s[s.len() - 1]);
                add_into(grads, *x, &transpose_blocks(g, p, q));
            }
            Op::Reshape(x) => add_into(grads, *x, g),
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_extents(out.shape(), *axis);
                let mut offset = 0;
                let parts: Vec<(Var, usize)> =
                    inputs.iter().map(|&v| (v, self.value(v).shape()[*axis] * inner)).collect();
                let mut pieces: Vec<Vec<F>> =
                    parts.iter().map(|&(_, b)| Vec::with_capacity(b * outer)).collect();
                for _ in 0..outer {
                    for (piece, &(_, block)) in pieces.iter_mut().zip(&parts) {
                        piece.extend_from_slice(&g[offset..offset + block]);
                        offset += block;
                    }
                }
                for ((v, _), piece) in parts.into_iter().zip(pieces) {
                    add_into(grads, v, &piece);
                }
            }
            Op::Slice { input, axis, start } => {
                let t = self.value(*input);
                let (outer, full, inner) = axis_extents(t.shape(), *axis);
                let len = out.shape()[*axis];
                let gx = slot(grads, *input, t.numel());
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, &v) in gx[base..base + len * inner].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                let gx = slot(grads, *x, n);
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let t = self.value(*x);
                let (outer, len, inner) = axis_extents(t.shape(), *axis);
                let factor = match node.op {
                    Op::MeanAxis(..) => F::one() / F::of(len as f64),
                    _ => F::one(),
                };
                let gx = slot(grads, *x, t.numel());
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += v * factor;
                        }
                    }
                }
            }
            Op::MaxAxis { input, argmax } => {
                let n = self.value(*input).numel();
                let gx = slot(grads, *input, n);
                for (&src, &v) in argmax.iter().zip(g) {
                    gx[src] += v;
                }
            }
            Op::Softmax(x) => {
                let d = out.last_dim();
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks_exact(d).zip(out.rows()) {
                    let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(&a, &y)| y * (a - dot)));
                }
                add_into(grads, *x, &gx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = out.last_dim();
                let gain_v = self.value(*gain).data();
                let n = F::of(d as f64);
                let mut gx = Vec::with_capacity(g.len());
                let mut ggain = vec![F::zero(); d];
                let mut gbias = vec![F::zero(); d];
                for ((gr, hr), &r) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(rstd) {
                    let mut mean_dh = F::zero();
                    let mut mean_dh_h = F::zero();
                    for j in 0..d {
                        let dh = gr[j] * gain_v[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                    }
                    mean_dh /= n;
                    mean_dh_h /= n;
                    for j in 0..d {
                        let dh = gr[j] * gain_v[j];
                        gx.push(r * (dh - mean_dh - hr[j] * mean_dh_h));
                    }
                }
                add_into(grads, *x, &gx);
                add_into(grads, *gain, &ggain);
                add_into(grads, *bias, &gbias);
            }
            Op::GatherRows { input, idx } => {
                let t = self.value(*input);
                let row: usize = t.shape()[1..].iter().product();
                let gx = slot(grads, *input, t.numel());
                for (k, &src) in idx.iter().enumerate() {
                    let dst = &mut gx[src * row..(src + 1) * row];
                    for (d, &v) in dst.iter_mut().zip(&g[k * row..(k + 1) * row]) {
                        *d += v;
                    }
                }
            }
            Op::WeightedGather { input, idx, weights, fan } => {
                let t = self.value(*input);
                let d = t.shape()[1];
                let gx = slot(grads, *input, t.numel());
                for (k, (&src, &w)) in idx.iter().zip(weights).enumerate() {
                    let q = k / fan;
                    let dst = &mut gx[src * d..(src + 1) * d];
                    for (dv, &v) in dst.iter_mut().zip(&g[q * d..(q + 1) * d]) {
                        *dv += w * v;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let c = self.value(*logits).shape()[1];
                let scale = g[0] / F::of(*count as f64);
                let mut gx = vec![F::zero(); probs.len()];
                for (r, target) in targets.iter().enumerate() {
                    if let Some(k) = *target {
                        for j in 0..c {
                            gx[r * c + j] = probs[r * c + j] * scale;
                        }
                        gx[r * c + k] -= scale;
                    }
                }
                add_into(grads, *logits, &gx);
            }
        }
        Ok(())
    }

    fn backprop_matmul(&self, a: Var, b: Var, out: &Tensor<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let r = sb[sb.len() - 1];
        let (batch_a, batch_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (qi, ri) = (q as isize, r as isize);
        let one = F::one();
        if batch_b.is_empty() {
            let rows = batch_a.iter().product::<usize>() * p;
            {
                let ga = slot(grads, a, ta.numel());
                F::gemm(rows, r, q, one, g, (ri, 1), tb.data(), (1, ri), one, ga, (qi, 1));
            }
            let gb = slot(grads, b, tb.numel());
            F::gemm(q, rows, r, one, ta.data(), (1, qi), g, (ri, 1), one, gb, (ri, 1));
            return;
        }
        let batch = &out.shape()[..out.ndim() - 2];
        let (ma, mb) = (broadcast_index_map(batch, batch_a), broadcast_index_map(batch, batch_b));
        for (bi, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
            let gc = &g[bi * p * r..(bi + 1) * p * r];
            {
                let ga = slot(grads, a, ta.numel());
                let bb = &tb.data()[ib * q * r..(ib + 1) * q * r];
                F::gemm(p, r, q, one, gc, (ri, 1), bb, (1, ri), one, &mut ga[ia * p * q..(ia + 1) * p * q], (qi, 1));
            }
            let gb = slot(grads, b, tb.numel());
            let ab = &ta.data()[ia * p * q..(ia + 1) * p * q];
            F::gemm(q, p, r, one, ab, (1, qi), gc, (ri, 1), one, &mut gb[ib * q * r..(ib + 1) * q * r], (ri, 1));
        }
    }
}

fn softmax_into<F: Real>(row: &[F], out: &mut Vec<F>) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let start = out.len();
    let mut sum = F::zero();
    for &v in row {
        let e = (v - m).exp();
        sum += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|e| *e /= sum);
}

fn transpose_blocks<F: Real>(data: &[F], p: usize, q: usize) -> Vec<F> {
    let block = p * q;
    let mut out = vec![F::zero(); data.len()];
    if block == 0 {
        return out;
    }
    for (src, dst) in data.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        for i in 0..p {
            for j in 0..q {
                dst[j * p + i] = src[i * q + j];
            }
        }
    }
    out
}

fn slot<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, numel: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); numel])
}

fn add_into<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, g: &[F]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &x)| *a += x),
        empty => *empty = Some(g.to_vec()),
    }
}
