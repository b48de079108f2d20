use std::ops::Range;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Row,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Sub {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Scale {
        a: Var,
        c: T,
    },
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    KlDiv {
        logits: Var,
        reference: Vec<T>,
        probs: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Slice {
        a: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always a valid topological order of the computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Constant input: no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
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

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::None)
        } else if sb.len() == 1 && sa.len() == 2 && sa[1] == sb[0] {
            Ok(Broadcast::Row)
        } else {
            Err(shape_err(op, sa, sb))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: fn(Var, Var, Broadcast) -> Op<T>,
    ) -> Result<Var> {
        let bc = self.broadcast(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[if bc == Broadcast::Row { i % n } else { i }]))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, op(a, b, bc)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|&x| f(x)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, rg, op)
    }

    /// Elementwise sum; `b` may be a row vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |a, b, bc| Op::Add { a, b, bc })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |a, b, bc| Op::Sub { a, b, bc })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |a, b, bc| Op::Mul { a, b, bc })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::Relu(a),
        )
    }

    /// Tanh approximation of GELU, as used by GPT-2.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
        self.unary(
            a,
            |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    /// `a · b` for 2-D operands, or `a · bᵀ` when `trans_b` is set.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let name = if trans_b { "matmul_t" } else { "matmul" };
        let (m, k) = self.dims2(name, a)?;
        let (br, bcn) = self.dims2(name, b)?;
        let (kb, n) = if trans_b { (bcn, br) } else { (br, bcn) };
        if k != kb {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        let bs = if trans_b { (1, k) } else { (n, 1) };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            bs,
            T::zero(),
            &mut out,
            (n, 1),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            rg,
            Op::MatMul { a, b, trans_b },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Layer normalization over the last axis followed by the affine map
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm", x)?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::lit(eps);
        let nf = T::from_usize(n).unwrap();
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + bt[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    fn softmax_rows(data: &mut [T], m: usize, n: usize, causal: bool) {
        let offset = n as isize - m as isize;
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let valid = if causal {
                ((i as isize + offset + 1).max(0) as usize).min(n)
            } else {
                n
            };
            let max = row[..valid].iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row[..valid].iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row[..valid].iter_mut() {
                *v = *v / total;
            }
            for v in row[valid..].iter_mut() {
                *v = T::zero();
            }
        }
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Row-wise softmax where entry `(i, j)` is masked out for
    /// `j > i + cols - rows` (autoregressive attention pattern).
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t
            .dims2()
            .ok_or_else(|| shape_err("softmax", t.shape(), &[]))?;
        let mut data = t.data().to_vec();
        Self::softmax_rows(&mut data, m, n, causal);
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Softmax { a }))
    }

    /// Mean next-token cross-entropy over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.dims2("cross_entropy", logits)?;
        if targets.len() != m {
            return Err(shape_err(
                "cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Invalid("cross_entropy: no targets".into()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= n) {
            return Err(Error::Invalid(format!(
                "cross_entropy: target {bad} >= {n}"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        Self::softmax_rows(&mut probs, m, n, false);
        let mut total = T::zero();
        let lv = self.value(logits).data();
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = &lv[i * n..(i + 1) * n];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                total += lse - row[t];
            }
        }
        let loss = total / T::from_usize(count).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Mean over rows of `KL(reference ‖ softmax(logits))`. The reference
    /// distribution is a constant.
    pub fn kl_div(&mut self, logits: Var, reference: &Tensor<T>) -> Result<Var> {
        let (m, n) = self.dims2("kl_div", logits)?;
        if reference.shape() != [m, n] {
            return Err(shape_err("kl_div", self.shape(logits), reference.shape()));
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        Self::softmax_rows(&mut probs, m, n, false);
        let mut total = T::zero();
        for i in 0..m {
            let row = &lv[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for j in 0..n {
                let q = reference.data()[i * n + j];
                if q > T::zero() {
                    total += q * (q.ln() - (row[j] - lse));
                }
            }
        }
        let loss = total / T::from_usize(m.max(1)).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::KlDiv {
                logits,
                reference: reference.data().to_vec(),
                probs,
            },
        ))
    }

    /// Gathers rows of `table` (`vocab x d`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("embedding", table)?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Invalid(format!("embedding: id {bad} >= vocab {v}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Rectangular block `a[rows, cols]` of a 2-D tensor.
    pub fn slice(&mut self, a: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (m, n) = self.dims2("slice", a)?;
        if rows.start > rows.end || rows.end > m || cols.start > cols.end || cols.end > n {
            return Err(shape_err("slice", self.shape(a), &[rows.end, cols.end]));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            out.extend_from_slice(&av[i * n + cols.start..i * n + cols.end]);
        }
        let shape = vec![rows.len(), cols.len()];
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Slice { a, rows, cols }))
    }

    pub fn slice_rows(&mut self, a: Var, rows: Range<usize>) -> Result<Var> {
        let (_, n) = self.dims2("slice", a)?;
        self.slice(a, rows, 0..n)
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Invalid("concat: need parts and axis 0 or 1".into()));
        }
        let dims = parts
            .iter()
            .map(|&p| self.dims2("concat", p))
            .collect::<Result<Vec<_>>>()?;
        let (r0, c0) = dims[0];
        for (&p, &(r, c)) in parts.iter().zip(&dims) {
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(shape_err("concat", self.shape(parts[0]), self.shape(p)));
            }
        }
        let (out, shape) = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * c0);
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
            (out, vec![rows, c0])
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
                }
            }
            (out, vec![r0, cols])
        };
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let av = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::Transpose(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.len().max(1)).unwrap();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// Reverse pass seeded with `d out = 1`. Consumes the tape.
    pub fn backward(self, out: Var) -> Result<Gradients<T>> {
        self.backward_with_seed(out, T::one())
    }

    pub fn backward_with_seed(self, out: Var, seed: T) -> Result<Gradients<T>> {
        let root = &self.nodes[out.0].value;
        if !root.is_scalar() {
            return Err(Error::NonScalar(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![seed]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = node.value.shape()[1];
                if wants(*a) {
                    // dA = dC · op(B)ᵀ
                    let bs = if *trans_b { (k, 1) } else { (1, n) };
                    let ga = acc(grads, *a, m * k);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gout,
                        (n, 1),
                        val(*b).data(),
                        bs,
                        T::one(),
                        ga,
                        (k, 1),
                    );
                }
                if wants(*b) {
                    let gb = acc(grads, *b, k * n);
                    if *trans_b {
                        // B is n x k: dB = dCᵀ · A
                        T::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            gout,
                            (1, n),
                            val(*a).data(),
                            (k, 1),
                            T::one(),
                            gb,
                            (k, 1),
                        );
                    } else {
                        // dB = Aᵀ · dC
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            val(*a).data(),
                            (1, k),
                            gout,
                            (n, 1),
                            T::one(),
                            gb,
                            (n, 1),
                        );
                    }
                }
            }
            Op::Add { a, b, bc } | Op::Sub { a, b, bc } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -T::one()
                } else {
                    T::one()
                };
                if wants(*a) {
                    for (g, &d) in acc(grads, *a, gout.len()).iter_mut().zip(gout) {
                        *g += d;
                    }
                }
                if wants(*b) {
                    let n = val(*b).len();
                    let gb = acc(grads, *b, n);
                    match bc {
                        Broadcast::None => {
                            gb.iter_mut().zip(gout).for_each(|(g, &d)| *g += sign * d)
                        }
                        Broadcast::Row => gout.chunks(n).for_each(|row| {
                            gb.iter_mut().zip(row).for_each(|(g, &d)| *g += sign * d)
                        }),
                    }
                }
            }
            Op::Mul { a, b, bc } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let n = bv.len();
                let bidx = |i: usize| if *bc == Broadcast::Row { i % n } else { i };
                if wants(*a) {
                    let ga = acc(grads, *a, av.len());
                    for (i, g) in ga.iter_mut().enumerate() {
                        *g += gout[i] * bv[bidx(i)];
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, *b, n);
                    for (i, &d) in gout.iter().enumerate() {
                        gb[bidx(i)] += d * av[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                for (g, &d) in acc(grads, *a, gout.len()).iter_mut().zip(gout) {
                    *g += d * *c;
                }
            }
            Op::Relu(a) | Op::Abs(a) | Op::Gelu(a) => {
                let av = val(*a).data();
                let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
                let deriv = |x: T| match node.op {
                    Op::Relu(_) => {
                        if x > T::zero() {
                            T::one()
                        } else {
                            T::zero()
                        }
                    }
                    Op::Abs(_) => {
                        if x > T::zero() {
                            T::one()
                        } else if x < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    }
                    _ => {
                        let t = (c * (x + k * x * x * x)).tanh();
                        half * (T::one() + t)
                            + half
                                * x
                                * (T::one() - t * t)
                                * c
                                * (T::one() + T::lit(3.0) * k * x * x)
                    }
                };
                let ga = acc(grads, *a, av.len());
                for ((g, &d), &x) in ga.iter_mut().zip(gout).zip(av) {
                    *g += d * deriv(x);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = val(*gamma).len();
                let m = rstd.len();
                let gv = val(*gamma).data();
                if wants(*gamma) {
                    let gg = acc(grads, *gamma, n);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += gout[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = acc(grads, *beta, n);
                    for row in gout.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                    }
                }
                if wants(*x) {
                    let nf = T::from_usize(n).unwrap();
                    let gx = acc(grads, *x, m * n);
                    let mut dxhat = vec![T::zero(); n];
                    for i in 0..m {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..n {
                            let d = gout[i * n + j] * gv[j];
                            dxhat[j] = d;
                            mean_d += d;
                            mean_dx += d * xhat[i * n + j];
                        }
                        mean_d = mean_d / nf;
                        mean_dx = mean_dx / nf;
                        for j in 0..n {
                            gx[i * n + j] +=
                                rstd[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let p = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let ga = acc(grads, *a, p.len());
                for (i, (prow, grow)) in p.chunks(n).zip(gout.chunks(n)).enumerate() {
                    let dot: T = prow.iter().zip(grow).map(|(&p, &g)| p * g).sum();
                    for j in 0..n {
                        ga[i * n + j] += prow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let n = val(*logits).shape()[1];
                let scale = gout[0] / T::from_usize(*count).unwrap();
                let gl = acc(grads, *logits, probs.len());
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..n {
                            gl[i * n + j] += scale * probs[i * n + j];
                        }
                        gl[i * n + t] -= scale;
                    }
                }
            }
            Op::KlDiv {
                logits,
                reference,
                probs,
            } => {
                let m = val(*logits).shape()[0];
                let scale = gout[0] / T::from_usize(m.max(1)).unwrap();
                let gl = acc(grads, *logits, probs.len());
                for ((g, &p), &q) in gl.iter_mut().zip(probs).zip(reference) {
                    *g += scale * (p - q);
                }
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).shape()[1];
                let gt = acc(grads, *table, val(*table).len());
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += gout[r * d + j];
                    }
                }
            }
            Op::Slice { a, rows, cols } => {
                let n = val(*a).shape()[1];
                let w = cols.len();
                let ga = acc(grads, *a, val(*a).len());
                for (r, i) in rows.clone().enumerate() {
                    let dst = &mut ga[i * n + cols.start..i * n + cols.end];
                    dst.iter_mut()
                        .zip(&gout[r * w..(r + 1) * w])
                        .for_each(|(g, &d)| *g += d);
                }
            }
            Op::Concat { parts, axis } => {
                let total_cols = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).dims2().unwrap();
                    if wants(p) {
                        let gp = acc(grads, p, r * c);
                        if *axis == 0 {
                            let src = &gout[offset * c..(offset + r) * c];
                            gp.iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                        } else {
                            for i in 0..r {
                                let src =
                                    &gout[i * total_cols + offset..i * total_cols + offset + c];
                                gp[i * c..(i + 1) * c]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(g, &d)| *g += d);
                            }
                        }
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Transpose(a) => {
                let (m, n) = val(*a).dims2().unwrap();
                let ga = acc(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += gout[j * m + i];
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let len = val(*a).len();
                let d = if matches!(node.op, Op::Mean(_)) {
                    gout[0] / T::from_usize(len.max(1)).unwrap()
                } else {
                    gout[0]
                };
                acc(grads, *a, len).iter_mut().for_each(|g| *g += d);
            }
        }
    }
}
