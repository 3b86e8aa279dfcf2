//! Define-by-run reverse-mode autodiff on dense tensors.
//!
//! A [`Graph`] owns every node created during a forward pass; values are
//! computed eagerly when an op is pushed. `backward` walks the node list in
//! exact reverse creation order (creation order is topological by
//! construction). Two runs with the same seed, inputs and op sequence produce
//! bit-identical results.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    SoftmaxRows,
    Relu,
}

enum Op<S: Scalar> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// (r,c) + row vector broadcast over rows.
    AddBias(Var, Var),
    Scale(Var, S),
    /// Elementwise product with a constant mask (dropout).
    MulMask(Var, Vec<S>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    // Backward uses only the output probabilities; masked entries are
    // exactly zero there, so the mask itself need not be retained.
    SoftmaxRows {
        x: Var,
    },
    SliceCols {
        x: Var,
        from: usize,
        to: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// Gather rows of `x` by index (embedding lookup). Backward scatter-adds.
    RowsSelect {
        x: Var,
        idx: Vec<usize>,
    },
    /// a:(B,d), b:(S*B,d) laid out time-major -> (B,S) of dot products.
    BatchedDot {
        a: Var,
        b: Var,
    },
    /// w:(B,S), b:(S*B,d) time-major -> (B,d) weighted sums.
    BatchedWeightedSum {
        w: Var,
        b: Var,
    },
    SumAll(Var),
    /// Weighted sum of scalar nodes -> scalar (loss combination).
    ScalarMix(Vec<(S, Var)>),
    /// Mean NLL over unmasked rows of logits against target ids.
    MeanNll {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    /// sum_r row_w[r] * sum_c (x[r,c] - target[r,c])^2  -> scalar.
    SqDiffConst {
        x: Var,
        target: Vec<S>,
        row_w: Vec<S>,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Vec<S>,
    op: Op<S>,
}

/// Topologically ordered op nodes plus a registry of named parameters and the
/// PRNG state all randomness flows from.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: IndexMap<String, Var>,
    pub rng: SplitMix64,
}

impl<S: Scalar> Graph<S> {
    pub fn new(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            params: IndexMap::new(),
            rng: SplitMix64::new(seed),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by op");
        self.nodes.push(Node {
            value,
            grad: Vec::new(),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: S) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    /// Register a named parameter leaf. Names must be unique per graph.
    pub fn param(&mut self, name: &str, value: Tensor<S>) -> Var {
        let v = self.leaf(value);
        let prev = self.params.insert(name.to_string(), v);
        assert!(prev.is_none(), "duplicate parameter {name}");
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &[S] {
        &self.nodes[v.0].grad
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Gradient of a named parameter; all zeros when the parameter is
    /// unreachable from the loss.
    pub fn param_grad(&self, name: &str) -> Option<&[S]> {
        self.params.get(name).map(|v| self.grad(*v))
    }

    // ---- ops ------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {m}x{k} . {k2}x{n}: inner dims disagree"
            )));
        }
        let mut out = vec![S::zero(); m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            for l in 0..k {
                let a_il = da[i * k + l];
                if a_il == S::zero() {
                    continue;
                }
                let brow = &db[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + a_il * brow[j];
                }
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b)))
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].value.dims() != self.nodes[b.0].value.dims() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].value.dims(),
                self.nodes[b.0].value.dims()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let v = self.zip(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let v = self.zip(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let v = self.zip(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.dims().to_vec(), data).unwrap()
    }

    /// `x` (r,c) plus `bias` (c) or (1,c), broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let tb = &self.nodes[bias.0].value;
        let c = tx.cols();
        if tb.len() != c {
            return Err(Error::Shape(format!(
                "add_bias: {c} cols vs bias of {}",
                tb.len()
            )));
        }
        let r = tx.rows();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(tx.data()[i * c + j] + tb.data()[j]);
            }
        }
        Ok(self.push(
            Tensor::new(tx.dims().to_vec(), out)?,
            Op::AddBias(x, bias),
        ))
    }

    pub fn scale(&mut self, x: Var, k: S) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| v * k).collect();
        let val = Tensor::new(t.dims().to_vec(), data).unwrap();
        self.push(val, Op::Scale(x, k))
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Result<Var> {
        match kind {
            ActivationKind::Sigmoid => Ok(self.sigmoid(x)),
            ActivationKind::Tanh => Ok(self.tanh(x)),
            ActivationKind::Relu => Ok(self.relu(x)),
            ActivationKind::SoftmaxRows => self.softmax_rows(x, None),
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = S::one();
        let t = self.unary(x, |v| one / (one + (-v).exp()));
        self.push(t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| v.tanh());
        self.push(t, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| if v > S::zero() { v } else { S::zero() });
        self.push(t, Op::Relu(x))
    }

    fn unary(&self, x: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::new(t.dims().to_vec(), data).unwrap()
    }

    /// Row-wise softmax of a rank-2 tensor. Masked-off entries (mask =
    /// false) are treated as -inf logits and come out exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.dims().len() != 2 {
            return Err(Error::Shape(format!(
                "softmax_rows requires rank 2, got {:?}",
                t.dims()
            )));
        }
        if let Some(m) = mask {
            if m.len() != t.len() {
                return Err(Error::Shape("softmax mask length mismatch".into()));
            }
        }
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = t.row(i);
            let keep = |j: usize| mask.map(|m| m[i * c + j]).unwrap_or(true);
            let mut mx: Option<S> = None;
            for j in 0..c {
                if keep(j) {
                    mx = Some(match mx {
                        Some(m) if m >= row[j] => m,
                        _ => row[j],
                    });
                }
            }
            let mx = match mx {
                Some(m) => m,
                None => return Err(Error::Invalid("softmax row fully masked".into())),
            };
            let mut z = S::zero();
            for j in 0..c {
                if keep(j) {
                    let e = (row[j] - mx).exp();
                    out[i * c + j] = e;
                    z = z + e;
                }
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / z;
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::SoftmaxRows { x },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, c) = (t.rows(), t.cols());
        if to > c || from >= to {
            return Err(Error::Shape(format!("slice_cols {from}..{to} of {c}")));
        }
        let mut out = Vec::with_capacity(r * (to - from));
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[from..to]);
        }
        Ok(self.push(
            Tensor::new(vec![r, to - from], out)?,
            Op::SliceCols { x, from, to },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.nodes[parts[0].0].value.rows();
        let mut c = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != r {
                return Err(Error::Shape("concat_cols: row mismatch".into()));
            }
            c += t.cols();
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.nodes[parts[0].0].value.cols();
        let mut r = 0;
        let mut out = Vec::new();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.cols() != c {
                return Err(Error::Shape("concat_rows: col mismatch".into()));
            }
            r += t.rows();
            out.extend_from_slice(t.data());
        }
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn rows_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Shape(format!("rows_select index {i} >= {r}")));
            }
            out.extend_from_slice(t.row(i));
        }
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::RowsSelect {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// `a`:(B,d), `b`:(S*B,d) time-major -> (B,S), out[b][s] = a[b].b[s*B+b].
    pub fn batched_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (bsz, d) = (ta.rows(), ta.cols());
        if tb.cols() != d || tb.rows() % bsz != 0 {
            return Err(Error::Shape("batched_dot shape mismatch".into()));
        }
        let s_len = tb.rows() / bsz;
        let mut out = vec![S::zero(); bsz * s_len];
        for bi in 0..bsz {
            for si in 0..s_len {
                let mut acc = S::zero();
                let arow = ta.row(bi);
                let brow = tb.row(si * bsz + bi);
                for j in 0..d {
                    acc = acc + arow[j] * brow[j];
                }
                out[bi * s_len + si] = acc;
            }
        }
        Ok(self.push(
            Tensor::new(vec![bsz, s_len], out)?,
            Op::BatchedDot { a, b },
        ))
    }

    /// `w`:(B,S), `b`:(S*B,d) time-major -> (B,d), out[b] = sum_s w[b][s] b[s*B+b].
    pub fn batched_weighted_sum(&mut self, w: Var, b: Var) -> Result<Var> {
        let (tw, tb) = (&self.nodes[w.0].value, &self.nodes[b.0].value);
        let (bsz, s_len) = (tw.rows(), tw.cols());
        if tb.rows() != bsz * s_len {
            return Err(Error::Shape("batched_weighted_sum shape mismatch".into()));
        }
        let d = tb.cols();
        let mut out = vec![S::zero(); bsz * d];
        for bi in 0..bsz {
            for si in 0..s_len {
                let wv = tw.data()[bi * s_len + si];
                if wv == S::zero() {
                    continue;
                }
                let brow = tb.row(si * bsz + bi);
                for j in 0..d {
                    out[bi * d + j] = out[bi * d + j] + wv * brow[j];
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![bsz, d], out)?,
            Op::BatchedWeightedSum { w, b },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: S = self.nodes[x.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// Weighted sum of scalar nodes.
    pub fn scalar_mix(&mut self, terms: &[(S, Var)]) -> Result<Var> {
        let mut acc = S::zero();
        for (k, v) in terms {
            let t = &self.nodes[v.0].value;
            if t.len() != 1 {
                return Err(Error::Shape("scalar_mix on non-scalar".into()));
            }
            acc = acc + *k * t.data()[0];
        }
        Ok(self.push(Tensor::scalar(acc), Op::ScalarMix(terms.to_vec())))
    }

    /// Mean negative log likelihood over unmasked rows. `mask[r]` true keeps
    /// row r; targets index into the columns of `logits`.
    pub fn mean_nll(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        let (r, c) = (t.rows(), t.cols());
        if targets.len() != r || mask.len() != r {
            return Err(Error::Shape("mean_nll: row count mismatch".into()));
        }
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            return Err(Error::Invalid("mean_nll: empty reference".into()));
        }
        let mut loss = S::zero();
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            if targets[i] >= c {
                return Err(Error::Shape("mean_nll: target id out of range".into()));
            }
            let row = t.row(i);
            let mx = row.iter().copied().fold(row[0], |a, b| if a >= b { a } else { b });
            let z: S = row.iter().map(|&v| (v - mx).exp()).sum();
            loss = loss - (row[targets[i]] - mx - z.ln());
        }
        loss = loss / S::from_f64(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MeanNll {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// sum_r row_w[r] * sum_c (x - target)^2 as a scalar node.
    pub fn sq_diff_const(&mut self, x: Var, target: &[S], row_w: &[S]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, c) = (t.rows(), t.cols());
        if target.len() != r * c || row_w.len() != r {
            return Err(Error::Shape("sq_diff_const shape mismatch".into()));
        }
        let mut acc = S::zero();
        for i in 0..r {
            if row_w[i] == S::zero() {
                continue;
            }
            let mut s = S::zero();
            for j in 0..c {
                let d = t.data()[i * c + j] - target[i * c + j];
                s = s + d * d;
            }
            acc = acc + row_w[i] * s;
        }
        Ok(self.push(
            Tensor::scalar(acc),
            Op::SqDiffConst {
                x,
                target: target.to_vec(),
                row_w: row_w.to_vec(),
            },
        ))
    }

    /// Inverted dropout with the given rate, drawing the mask from the graph
    /// PRNG. rate 0 is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let n = self.nodes[x.0].value.len();
        let keep = S::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..n)
            .map(|_| {
                if self.rng.next_f64() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let t = &self.nodes[x.0].value;
        let data = t
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let val = Tensor::new(t.dims().to_vec(), data).unwrap();
        self.push(val, Op::MulMask(x, mask))
    }

    /// Parameter initialization: uniform in [-0.1, 0.1] from the graph PRNG.
    pub fn init_uniform(&mut self, dims: Vec<usize>) -> Tensor<S> {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(self.rng.uniform(-0.1, 0.1)))
            .collect();
        Tensor::new(dims, data).unwrap()
    }

    // ---- backward --------------------------------------------------------

    /// Populate gradients for every node reachable from the scalar `loss`.
    /// Unreachable nodes (and parameters) end up with all-zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape("backward requires a scalar loss".into()));
        }
        for n in &mut self.nodes {
            n.grad = vec![S::zero(); n.value.len()];
        }
        self.nodes[loss.0].grad[0] = S::one();
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.iter().all(|&g| g == S::zero()) {
                continue;
            }
            self.backprop_node(i);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) {
        // Take the grad out to appease the borrow checker; ops never read
        // their own grad during backprop.
        let g = std::mem::take(&mut self.nodes[i].grad);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                // dA = G . B^T
                let mut da = vec![S::zero(); m * k];
                {
                    let bd = self.nodes[b.0].value.data();
                    for ii in 0..m {
                        for jj in 0..n {
                            let gij = g[ii * n + jj];
                            if gij == S::zero() {
                                continue;
                            }
                            for ll in 0..k {
                                da[ii * k + ll] = da[ii * k + ll] + gij * bd[ll * n + jj];
                            }
                        }
                    }
                }
                // dB = A^T . G
                let mut db = vec![S::zero(); k * n];
                {
                    let ad = self.nodes[a.0].value.data();
                    for ii in 0..m {
                        for ll in 0..k {
                            let ail = ad[ii * k + ll];
                            if ail == S::zero() {
                                continue;
                            }
                            for jj in 0..n {
                                db[ll * n + jj] = db[ll * n + jj] + ail * g[ii * n + jj];
                            }
                        }
                    }
                }
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, &g);
                self.accum(b, &g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, &g);
                let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                self.accum(b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<S> = g
                    .iter()
                    .zip(self.nodes[b.0].value.data())
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                let db: Vec<S> = g
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::AddBias(x, bias) => {
                let (x, bias) = (*x, *bias);
                let c = self.nodes[bias.0].value.len();
                let mut db = vec![S::zero(); c];
                for (pos, &gv) in g.iter().enumerate() {
                    db[pos % c] = db[pos % c] + gv;
                }
                self.accum(x, &g);
                self.accum(bias, &db);
            }
            Op::Scale(x, k) => {
                let (x, k) = (*x, *k);
                let dx: Vec<S> = g.iter().map(|&v| v * k).collect();
                self.accum(x, &dx);
            }
            Op::MulMask(x, mask) => {
                let x = *x;
                let dx: Vec<S> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accum(x, &dx);
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let y = self.nodes[i].value.data();
                let dx: Vec<S> = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (S::one() - yv))
                    .collect();
                self.accum(x, &dx);
            }
            Op::Tanh(x) => {
                let x = *x;
                let y = self.nodes[i].value.data();
                let dx: Vec<S> = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * (S::one() - yv * yv))
                    .collect();
                self.accum(x, &dx);
            }
            Op::Relu(x) => {
                let x = *x;
                let xv = self.nodes[x.0].value.data();
                let dx: Vec<S> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > S::zero() { gv } else { S::zero() })
                    .collect();
                self.accum(x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                let y = self.nodes[i].value.clone();
                let (r, c) = (y.rows(), y.cols());
                let mut dx = vec![S::zero(); r * c];
                for ii in 0..r {
                    let yrow = y.row(ii);
                    let grow = &g[ii * c..(ii + 1) * c];
                    let dot: S = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                    for jj in 0..c {
                        dx[ii * c + jj] = yrow[jj] * (grow[jj] - dot);
                    }
                }
                self.accum(x, &dx);
            }
            Op::SliceCols { x, from, to } => {
                let (x, from, to) = (*x, *from, *to);
                let c = self.nodes[x.0].value.cols();
                let r = self.nodes[x.0].value.rows();
                let w = to - from;
                let mut dx = vec![S::zero(); r * c];
                for ii in 0..r {
                    for jj in 0..w {
                        dx[ii * c + from + jj] = g[ii * w + jj];
                    }
                }
                self.accum(x, &dx);
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let r = self.nodes[i].value.rows();
                let c = self.nodes[i].value.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = self.nodes[p.0].value.cols();
                    let mut dp = vec![S::zero(); r * pc];
                    for ii in 0..r {
                        dp[ii * pc..(ii + 1) * pc]
                            .copy_from_slice(&g[ii * c + offset..ii * c + offset + pc]);
                    }
                    self.accum(p, &dp);
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let c = self.nodes[i].value.cols();
                let mut offset = 0;
                for p in parts {
                    let pr = self.nodes[p.0].value.rows();
                    self.accum(p, &g[offset * c..(offset + pr) * c]);
                    offset += pr;
                }
            }
            Op::RowsSelect { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let c = self.nodes[x.0].value.cols();
                let mut dx = vec![S::zero(); self.nodes[x.0].value.len()];
                for (pos, &src) in idx.iter().enumerate() {
                    for jj in 0..c {
                        dx[src * c + jj] = dx[src * c + jj] + g[pos * c + jj];
                    }
                }
                self.accum(x, &dx);
            }
            Op::BatchedDot { a, b } => {
                let (a, b) = (*a, *b);
                let (bsz, d) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let s_len = self.nodes[b.0].value.rows() / bsz;
                let mut da = vec![S::zero(); bsz * d];
                let mut db = vec![S::zero(); self.nodes[b.0].value.len()];
                {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    for bi in 0..bsz {
                        for si in 0..s_len {
                            let gv = g[bi * s_len + si];
                            if gv == S::zero() {
                                continue;
                            }
                            let boff = (si * bsz + bi) * d;
                            for jj in 0..d {
                                da[bi * d + jj] = da[bi * d + jj] + gv * bv[boff + jj];
                                db[boff + jj] = db[boff + jj] + gv * av[bi * d + jj];
                            }
                        }
                    }
                }
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::BatchedWeightedSum { w, b } => {
                let (w, b) = (*w, *b);
                let (bsz, s_len) = (self.nodes[w.0].value.rows(), self.nodes[w.0].value.cols());
                let d = self.nodes[b.0].value.cols();
                let mut dw = vec![S::zero(); bsz * s_len];
                let mut db = vec![S::zero(); self.nodes[b.0].value.len()];
                {
                    let wv = self.nodes[w.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    for bi in 0..bsz {
                        for si in 0..s_len {
                            let boff = (si * bsz + bi) * d;
                            let mut acc = S::zero();
                            for jj in 0..d {
                                let gv = g[bi * d + jj];
                                acc = acc + gv * bv[boff + jj];
                                db[boff + jj] = db[boff + jj] + gv * wv[bi * s_len + si];
                            }
                            dw[bi * s_len + si] = acc;
                        }
                    }
                }
                self.accum(w, &dw);
                self.accum(b, &db);
            }
            Op::SumAll(x) => {
                let x = *x;
                let n = self.nodes[x.0].value.len();
                let dx = vec![g[0]; n];
                self.accum(x, &dx);
            }
            Op::ScalarMix(terms) => {
                let terms = terms.clone();
                for (k, v) in terms {
                    self.accum(v, &[g[0] * k]);
                }
            }
            Op::MeanNll {
                logits,
                targets,
                mask,
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let mask = mask.clone();
                let t = self.nodes[logits.0].value.clone();
                let (r, c) = (t.rows(), t.cols());
                let n = mask.iter().filter(|&&m| m).count();
                let inv_n = S::from_f64(1.0 / n as f64);
                let mut dx = vec![S::zero(); r * c];
                for ii in 0..r {
                    if !mask[ii] {
                        continue;
                    }
                    let row = t.row(ii);
                    let mx = row.iter().copied().fold(row[0], |a, b| if a >= b { a } else { b });
                    let z: S = row.iter().map(|&v| (v - mx).exp()).sum();
                    for jj in 0..c {
                        let p = (row[jj] - mx).exp() / z;
                        let onehot = if jj == targets[ii] { S::one() } else { S::zero() };
                        dx[ii * c + jj] = g[0] * inv_n * (p - onehot);
                    }
                }
                self.accum(logits, &dx);
            }
            Op::SqDiffConst { x, target, row_w } => {
                let x = *x;
                let target = target.clone();
                let row_w = row_w.clone();
                let t = &self.nodes[x.0].value;
                let (r, c) = (t.rows(), t.cols());
                let two = S::from_f64(2.0);
                let mut dx = vec![S::zero(); r * c];
                for ii in 0..r {
                    if row_w[ii] == S::zero() {
                        continue;
                    }
                    for jj in 0..c {
                        dx[ii * c + jj] = g[0]
                            * two
                            * row_w[ii]
                            * (t.data()[ii * c + jj] - target[ii * c + jj]);
                    }
                }
                self.accum(x, &dx);
            }
        }
        self.nodes[i].grad = g;
    }

    fn accum(&mut self, v: Var, d: &[S]) {
        let grad = &mut self.nodes[v.0].grad;
        for (gv, &dv) in grad.iter_mut().zip(d) {
            *gv = *gv + dv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new(0);
        let i2 = g.leaf(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let a = g.leaf(t2(&[vec![3.0, -1.0], vec![2.5, 7.0]]));
        let p = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(p).data(), g.value(a).data());
    }

    #[test]
    fn matmul_hand() {
        let mut g = Graph::<f64>::new(0);
        let a = g.leaf(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.leaf(t2(&[vec![5.0], vec![6.0]]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_dim_mismatch() {
        let mut g = Graph::<f64>::new(0);
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![2, 3]));
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = SplitMix64::new(11);
        let a: Vec<f64> = (0..35).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut oracle = vec![0.0f64; 21];
        for i in 0..7 {
            for j in 0..3 {
                for k in 0..5 {
                    oracle[i * 3 + j] += a[i * 5 + k] * b[k * 3 + j];
                }
            }
        }
        let mut g = Graph::<f64>::new(0);
        let av = g.leaf(Tensor::new(vec![7, 5], a).unwrap());
        let bv = g.leaf(Tensor::new(vec![5, 3], b).unwrap());
        let p = g.matmul(av, bv).unwrap();
        for (x, y) in g.value(p).data().iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::<f64>::new(0);
        let x = g.leaf(Tensor::zeros(vec![1, 4]));
        let y = g.softmax_rows(x, None).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g = Graph::<f64>::new(0);
        let x = g.leaf(t2(&[vec![0.3, -1.2, 4.0, 0.0]]));
        let y = g.softmax_rows(x, None).unwrap();
        let xc = g.leaf(t2(&[vec![0.3 + 7.0, -1.2 + 7.0, 4.0 + 7.0, 7.0]]));
        let yc = g.softmax_rows(xc, None).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(yc).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_mask_exact_zero() {
        let mut g = Graph::<f64>::new(0);
        let x = g.leaf(t2(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 1.0]]));
        let mask = vec![true, true, false, true, true, true];
        let y = g.softmax_rows(x, Some(&mask)).unwrap();
        let v = g.value(y);
        assert_eq!(v.data()[2], 0.0);
        for r in 0..2 {
            let s: f64 = v.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn tanh_reference_value() {
        let mut g = Graph::<f64>::new(0);
        let x = g.leaf(Tensor::scalar(0.5));
        let y = g.tanh(x);
        assert!((g.value(y).data()[0] - 0.46211715726000974).abs() < 1e-9);
    }

    #[test]
    fn softmax_requires_rank2() {
        let mut g = Graph::<f64>::new(0);
        let x = g.leaf(Tensor::zeros(vec![4]));
        assert!(g.softmax_rows(x, None).is_err());
    }

    #[test]
    fn backward_linear_case() {
        // loss = sum(w * x), dloss/dw = x
        let mut g = Graph::<f64>::new(0);
        let w = g.param("w", t2(&[vec![0.5, -2.0, 3.0]]));
        let x = g.leaf(t2(&[vec![1.0, 2.0, -4.0]]));
        let p = g.mul(w, x).unwrap();
        let loss = g.sum_all(p);
        g.backward(loss).unwrap();
        assert_eq!(g.param_grad("w").unwrap(), &[1.0, 2.0, -4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new(0);
        let w = g.param("w", t2(&[vec![0.5, -2.0]]));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn unreachable_param_zero_grad() {
        let mut g = Graph::<f64>::new(0);
        let _unused = g.param("unused", t2(&[vec![1.0, 2.0]]));
        let w = g.param("w", Tensor::scalar(3.0));
        let loss = g.sum_all(w);
        g.backward(loss).unwrap();
        assert_eq!(g.param_grad("unused").unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn deterministic_given_seed_bit_identical() {
        let run = || {
            let mut g = Graph::<f64>::new(99);
            let init = g.init_uniform(vec![4, 4]);
            let w = g.param("w", init);
            let x = g.leaf(Tensor::new(vec![1, 4], vec![0.1, -0.2, 0.3, 0.4]).unwrap());
            let h = g.matmul(x, w).unwrap();
            let y = g.tanh(h);
            let loss = g.sum_all(y);
            g.backward(loss).unwrap();
            (
                g.value(loss).data().to_vec(),
                g.param_grad("w").unwrap().to_vec(),
            )
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }
}
