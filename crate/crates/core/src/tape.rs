//! Reverse-mode automatic differentiation over a recorded op graph.
//!
//! Ops execute eagerly against shared raw kernels (the inference path reuses
//! the same kernels, so taped and untaped forwards are bit-identical). The
//! tape is a per-forward structure: backward consumes accumulated adjoints
//! into the [`ParamStore`] and the graph is dropped afterwards.

use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, TensorError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position in the adjoint table returned by backward.
    pub fn index(self) -> usize {
        self.0
    }
}

pub const COSINE_EPS: f64 = 1e-8;
pub const LAYER_NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Raw kernels, shared between the tape and the no-grad inference path.
// ---------------------------------------------------------------------------

/// out += A[m,k] * B[k,n], row-major. `out` must hold m*n values.
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + aip * b_row[j];
            }
        }
    }
}

/// out += A[m,k] * B[n,k]^T.
pub fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for p in 0..k {
                acc = acc + a_row[p] * b_row[p];
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// out += A[k,m]^T * B[k,n].
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let aip = a_row[i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + aip * b_row[j];
            }
        }
    }
}

/// Row-wise softmax with max-subtraction. With `causal`, row i is normalized
/// over columns 0..=i and later columns are exactly zero.
pub fn softmax_rows_inplace<S: Scalar>(x: &mut [S], rows: usize, cols: usize, causal: bool) {
    for i in 0..rows {
        let active = if causal { (i + 1).min(cols) } else { cols };
        let row = &mut x[i * cols..(i + 1) * cols];
        let mut max = row[0];
        for &v in row[..active].iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = S::zero();
        for v in row[..active].iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row[..active].iter_mut() {
            *v = *v / sum;
        }
        for v in row[active..].iter_mut() {
            *v = S::zero();
        }
    }
}

pub fn layer_norm_forward<S: Scalar>(x: &[S], gamma: &[S], beta: &[S], rows: usize, d: usize, out: &mut [S]) {
    let eps = S::from_f64c(LAYER_NORM_EPS);
    let dn = S::from_f64c(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mut mean = S::zero();
        for &v in xr {
            mean = mean + v;
        }
        mean = mean / dn;
        let mut var = S::zero();
        for &v in xr {
            let c = v - mean;
            var = var + c * c;
        }
        var = var / dn;
        let inv_std = S::one() / (var + eps).sqrt();
        let or = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            or[j] = (xr[j] - mean) * inv_std * gamma[j] + beta[j];
        }
    }
}

pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    // tanh approximation; smooth everywhere, which keeps the
    // finite-difference probes clean.
    let c = S::from_f64c((2.0 / std::f64::consts::PI).sqrt());
    let k = S::from_f64c(0.044715);
    let u = c * (x + k * x * x * x);
    let half = S::from_f64c(0.5);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64c((2.0 / std::f64::consts::PI).sqrt());
    let k = S::from_f64c(0.044715);
    let three = S::from_f64c(3.0);
    let half = S::from_f64c(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    let du = c * (S::one() + three * k * x * x);
    half * (S::one() + t) + half * x * sech2 * du
}

/// Cosine similarity of two d-vectors with the fixed epsilon guard.
pub fn cosine_scalar<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut dot = S::zero();
    let mut na = S::zero();
    let mut nb = S::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        dot = dot + *x * *y;
        na = na + *x * *x;
        nb = nb + *y * *y;
    }
    dot / (na.sqrt() * nb.sqrt() + S::from_f64c(COSINE_EPS))
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

enum Op<S> {
    Leaf { param: Option<ParamId> },
    Matmul { a: Var, b: Var },
    MatmulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, c: S },
    Gelu { a: Var },
    SoftmaxRows { a: Var, causal: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    CrossEntropy { logits: Var, targets: Vec<u32>, ignore: Option<u32>, n_contrib: usize },
    RowCosine { a: Var, b: Var },
    MeanAll { a: Var },
    GatherRows { table: Var, ids: Vec<u32> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Pick { a: Var, index: usize },
}

struct Node<S> {
    values: Vec<S>,
    rows: usize,
    cols: usize,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, values: Vec<S>, rows: usize, cols: usize, op: Op<S>) -> Var {
        debug_assert_eq!(values.len(), rows * cols);
        self.nodes.push(Node { values, rows, cols, op });
        Var(self.nodes.len() - 1)
    }

    pub fn values(&self, v: Var) -> &[S] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn scalar_value(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input node (no gradient flows out of the tape).
    pub fn leaf(&mut self, values: Vec<S>, rows: usize, cols: usize) -> Var {
        self.push(values, rows, cols, Op::Leaf { param: None })
    }

    /// Parameter leaf: the value is snapshotted, and backward accumulates
    /// into the parameter's grad buffer if it is trainable.
    pub fn leaf_param(&mut self, params: &ParamStore<S>, id: ParamId) -> Var {
        let t = params.get(id);
        let (r, c) = t.rows_cols();
        self.push(t.values().to_vec(), r, c, Op::Leaf { param: Some(id) })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: vec![m, k], rhs: vec![k2, n] });
        }
        let mut out = vec![S::zero(); m * n];
        matmul_acc(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n, &mut out);
        Ok(self.push(out, m, n, Op::Matmul { a, b }))
    }

    /// a[m,k] * b[n,k]^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul_nt", lhs: vec![m, k], rhs: vec![n, k2] });
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nt_acc(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n, &mut out);
        Ok(self.push(out, m, n, Op::MatmulNT { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(TensorError::ShapeMismatch { op: "add", lhs: vec![ra, ca], rhs: vec![rb, cb] });
        }
        let out: Vec<S> = self.nodes[a.0]
            .values
            .iter()
            .zip(self.nodes[b.0].values.iter())
            .map(|(x, y)| *x + *y)
            .collect();
        Ok(self.push(out, ra, ca, Op::Add { a, b }))
    }

    /// Broadcast a row vector over every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = self.shape(a);
        let (rb, cb) = self.shape(bias);
        if rb != 1 || cb != c {
            return Err(TensorError::ShapeMismatch { op: "add_bias", lhs: vec![r, c], rhs: vec![rb, cb] });
        }
        let bvals = &self.nodes[bias.0].values;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(self.nodes[a.0].values[i * c + j] + bvals[j]);
            }
        }
        Ok(self.push(out, r, c, Op::AddBias { a, bias }))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let (r, cl) = self.shape(a);
        let out: Vec<S> = self.nodes[a.0].values.iter().map(|x| *x * c).collect();
        self.push(out, r, cl, Op::Scale { a, c })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out: Vec<S> = self.nodes[a.0].values.iter().map(|x| gelu_scalar(*x)).collect();
        self.push(out, r, c, Op::Gelu { a })
    }

    /// Row-wise softmax; rejects non-finite inputs.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Result<Var, TensorError> {
        let (r, c) = self.shape(a);
        if self.nodes[a.0].values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let mut out = self.nodes[a.0].values.clone();
        softmax_rows_inplace(&mut out, r, c, causal);
        Ok(self.push(out, r, c, Op::SoftmaxRows { a, causal }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (r, d) = self.shape(x);
        let (rg, cg) = self.shape(gamma);
        let (rb, cb) = self.shape(beta);
        if rg * cg != d || rb * cb != d {
            return Err(TensorError::ShapeMismatch { op: "layer_norm", lhs: vec![r, d], rhs: vec![cg.max(rg)] });
        }
        let mut out = vec![S::zero(); r * d];
        layer_norm_forward(
            &self.nodes[x.0].values,
            &self.nodes[gamma.0].values,
            &self.nodes[beta.0].values,
            r,
            d,
            &mut out,
        );
        Ok(self.push(out, r, d, Op::LayerNorm { x, gamma, beta }))
    }

    /// Mean over non-ignored positions of -log softmax(logits)[target].
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        ignore: Option<u32>,
    ) -> Result<Var, TensorError> {
        let (n, v) = self.shape(logits);
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch { op: "cross_entropy", lhs: vec![n, v], rhs: vec![targets.len()] });
        }
        let mut total = S::zero();
        let mut n_contrib = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t as usize >= v {
                return Err(TensorError::IndexOutOfRange { what: "target token", index: t as usize, bound: v });
            }
            let row = &self.nodes[logits.0].values[i * v..(i + 1) * v];
            let mut max = row[0];
            for &x in row {
                if x > max {
                    max = x;
                }
            }
            let mut sum = S::zero();
            for &x in row {
                sum = sum + (x - max).exp();
            }
            let lse = max + sum.ln();
            total = total + (lse - row[t as usize]);
            n_contrib += 1;
        }
        if n_contrib == 0 {
            return Err(TensorError::NoContributingPositions);
        }
        let mean = total / S::from_f64c(n_contrib as f64);
        Ok(self.push(
            vec![mean],
            1,
            1,
            Op::CrossEntropy { logits, targets: targets.to_vec(), ignore, n_contrib },
        ))
    }

    /// Row-wise cosine similarity of two [n, d] nodes, producing [n, 1].
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(TensorError::ShapeMismatch { op: "row_cosine", lhs: vec![ra, ca], rhs: vec![rb, cb] });
        }
        let mut out = Vec::with_capacity(ra);
        for i in 0..ra {
            let av = &self.nodes[a.0].values[i * ca..(i + 1) * ca];
            let bv = &self.nodes[b.0].values[i * ca..(i + 1) * ca];
            out.push(cosine_scalar(av, bv));
        }
        Ok(self.push(out, ra, 1, Op::RowCosine { a, b }))
    }

    /// Cosine similarity of two vectors (1-D nodes), producing a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra * ca != rb * cb || ra.min(ca) != 1 || rb.min(cb) != 1 {
            return Err(TensorError::ShapeMismatch { op: "cosine_similarity", lhs: vec![ra, ca], rhs: vec![rb, cb] });
        }
        // Route through row_cosine on a single row.
        let n = ra * ca;
        let av = self.nodes[a.0].values.clone();
        let bv = self.nodes[b.0].values.clone();
        let a1 = self.push(av, 1, n, Op::SliceRows { a, start: 0 });
        let b1 = self.push(bv, 1, n, Op::SliceRows { a: b, start: 0 });
        self.row_cosine(a1, b1)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let numel = self.nodes[a.0].values.len();
        let mut sum = S::zero();
        for &x in &self.nodes[a.0].values {
            sum = sum + x;
        }
        let mean = sum / S::from_f64c(numel as f64);
        self.push(vec![mean], 1, 1, Op::MeanAll { a })
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[u32]) -> Result<Var, TensorError> {
        let (v, d) = self.shape(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(TensorError::IndexOutOfRange { what: "token id", index: id as usize, bound: v });
            }
            out.extend_from_slice(&self.nodes[table.0].values[id as usize * d..(id as usize + 1) * d]);
        }
        Ok(self.push(out, ids.len(), d, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty());
        let (_, c0) = self.shape(parts[0]);
        let mut rows = 0usize;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != c0 {
                return Err(TensorError::ShapeMismatch { op: "concat_rows", lhs: vec![rows, c0], rhs: vec![r, c] });
            }
            rows += r;
            out.extend_from_slice(&self.nodes[p.0].values);
        }
        Ok(self.push(out, rows, c0, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Concatenate same-row-count nodes side by side. Panics on a row-count
    /// mismatch; callers build fixed layouts (attention heads).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (r0, _) = self.shape(parts[0]);
        let total: usize = parts.iter().map(|&p| self.shape(p).1).collect::<Vec<_>>().iter().sum();
        let mut out = Vec::with_capacity(r0 * total);
        for i in 0..r0 {
            for &p in parts {
                let (r, c) = self.shape(p);
                assert_eq!(r, r0, "concat_cols row mismatch");
                out.extend_from_slice(&self.nodes[p.0].values[i * c..(i + 1) * c]);
            }
        }
        self.push(out, r0, total, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(TensorError::IndexOutOfRange { what: "row slice end", index: start + len, bound: r });
        }
        let out = self.nodes[a.0].values[start * c..(start + len) * c].to_vec();
        Ok(self.push(out, len, c, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(TensorError::IndexOutOfRange { what: "column slice end", index: start + len, bound: c });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.nodes[a.0].values[i * c + start..i * c + start + len]);
        }
        Ok(self.push(out, r, len, Op::SliceCols { a, start }))
    }

    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var, TensorError> {
        let numel = self.nodes[a.0].values.len();
        if index >= numel {
            return Err(TensorError::IndexOutOfRange { what: "pick index", index, bound: numel });
        }
        let v = self.nodes[a.0].values[index];
        Ok(self.push(vec![v], 1, 1, Op::Pick { a, index }))
    }

    /// Backward pass from a scalar root. Adjoints of parameter leaves are
    /// accumulated into `params` for every tensor flagged trainable.
    /// Returns the full per-node adjoint table so probes can read gradients
    /// of intermediate activations.
    pub fn backward(&self, root: Var, params: &mut ParamStore<S>) -> Vec<Vec<S>> {
        let grads = self.backward_values(root);
        // Flush leaf adjoints into trainable parameters.
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = &node.op {
                let t = params.get_mut(*pid);
                if t.requires_grad() {
                    for (dst, gv) in t.grad_mut().iter_mut().zip(grads[i].iter()) {
                        *dst = *dst + *gv;
                    }
                }
            }
        }
        grads
    }

    /// Backward pass that only computes the adjoint table, leaving every
    /// parameter untouched (attribution probes run on read-only models).
    pub fn backward_values(&self, root: Var) -> Vec<Vec<S>> {
        assert_eq!(self.nodes[root.0].values.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Vec<S>> = self.nodes.iter().map(|n| vec![S::zero(); n.values.len()]).collect();
        grads[root.0][0] = S::one();

        for i in (0..=root.0).rev() {
            if grads[i].iter().all(|g| *g == S::zero()) {
                continue;
            }
            // Split off the current node's grad to allow writes into earlier ones.
            let (before, rest) = grads.split_at_mut(i);
            let g = &rest[0];
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let n = node.cols;
                    // da += g * b^T ; db += a^T * g
                    matmul_nt_acc(g, &self.nodes[b.0].values, m, n, k, &mut before[a.0]);
                    matmul_tn_acc(&self.nodes[a.0].values, g, k, m, n, &mut before[b.0]);
                }
                Op::MatmulNT { a, b } => {
                    let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let n = node.cols;
                    // c = a b^T : da += g * b ; db += g^T * a
                    matmul_acc(g, &self.nodes[b.0].values, m, n, k, &mut before[a.0]);
                    matmul_tn_acc(g, &self.nodes[a.0].values, n, m, k, &mut before[b.0]);
                }
                Op::Add { a, b } => {
                    for (dst, gv) in before[a.0].iter_mut().zip(g.iter()) {
                        *dst = *dst + *gv;
                    }
                    for (dst, gv) in before[b.0].iter_mut().zip(g.iter()) {
                        *dst = *dst + *gv;
                    }
                }
                Op::AddBias { a, bias } => {
                    let c = node.cols;
                    for (dst, gv) in before[a.0].iter_mut().zip(g.iter()) {
                        *dst = *dst + *gv;
                    }
                    for (idx, gv) in g.iter().enumerate() {
                        before[bias.0][idx % c] = before[bias.0][idx % c] + *gv;
                    }
                }
                Op::Scale { a, c } => {
                    for (dst, gv) in before[a.0].iter_mut().zip(g.iter()) {
                        *dst = *dst + *gv * *c;
                    }
                }
                Op::Gelu { a } => {
                    let xs = &self.nodes[a.0].values;
                    for ((dst, gv), x) in before[a.0].iter_mut().zip(g.iter()).zip(xs.iter()) {
                        *dst = *dst + *gv * gelu_grad_scalar(*x);
                    }
                }
                Op::SoftmaxRows { a, causal } => {
                    let (r, c) = (node.rows, node.cols);
                    let s = &node.values;
                    for row in 0..r {
                        let active = if *causal { (row + 1).min(c) } else { c };
                        let mut dot = S::zero();
                        for j in 0..active {
                            dot = dot + g[row * c + j] * s[row * c + j];
                        }
                        for j in 0..active {
                            let sv = s[row * c + j];
                            before[a.0][row * c + j] =
                                before[a.0][row * c + j] + sv * (g[row * c + j] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (r, d) = (node.rows, node.cols);
                    let eps = S::from_f64c(LAYER_NORM_EPS);
                    let dn = S::from_f64c(d as f64);
                    let xs = &self.nodes[x.0].values;
                    let gs = &self.nodes[gamma.0].values;
                    for row in 0..r {
                        let xr = &xs[row * d..(row + 1) * d];
                        let gr = &g[row * d..(row + 1) * d];
                        let mut mean = S::zero();
                        for &v in xr {
                            mean = mean + v;
                        }
                        mean = mean / dn;
                        let mut var = S::zero();
                        for &v in xr {
                            let cdev = v - mean;
                            var = var + cdev * cdev;
                        }
                        var = var / dn;
                        let inv_std = S::one() / (var + eps).sqrt();

                        let mut dxhat_sum = S::zero();
                        let mut dxhat_xhat_sum = S::zero();
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * inv_std;
                            let dxhat = gr[j] * gs[j];
                            dxhat_sum = dxhat_sum + dxhat;
                            dxhat_xhat_sum = dxhat_xhat_sum + dxhat * xhat;
                            before[gamma.0][j] = before[gamma.0][j] + gr[j] * xhat;
                            before[beta.0][j] = before[beta.0][j] + gr[j];
                        }
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * inv_std;
                            let dxhat = gr[j] * gs[j];
                            before[x.0][row * d + j] = before[x.0][row * d + j]
                                + inv_std / dn * (dn * dxhat - dxhat_sum - xhat * dxhat_xhat_sum);
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, ignore, n_contrib } => {
                    let (_, v) = (self.nodes[logits.0].rows, self.nodes[logits.0].cols);
                    let scale = g[0] / S::from_f64c(*n_contrib as f64);
                    for (row, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let lrow = &self.nodes[logits.0].values[row * v..(row + 1) * v];
                        let mut max = lrow[0];
                        for &xv in lrow {
                            if xv > max {
                                max = xv;
                            }
                        }
                        let mut sum = S::zero();
                        for &xv in lrow {
                            sum = sum + (xv - max).exp();
                        }
                        for j in 0..v {
                            let p = (lrow[j] - max).exp() / sum;
                            let y = if j == t as usize { S::one() } else { S::zero() };
                            before[logits.0][row * v + j] =
                                before[logits.0][row * v + j] + scale * (p - y);
                        }
                    }
                }
                Op::RowCosine { a, b } => {
                    let (n, d) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let eps = S::from_f64c(COSINE_EPS);
                    for row in 0..n {
                        let av = &self.nodes[a.0].values[row * d..(row + 1) * d];
                        let bv = &self.nodes[b.0].values[row * d..(row + 1) * d];
                        let mut dot = S::zero();
                        let mut na2 = S::zero();
                        let mut nb2 = S::zero();
                        for j in 0..d {
                            dot = dot + av[j] * bv[j];
                            na2 = na2 + av[j] * av[j];
                            nb2 = nb2 + bv[j] * bv[j];
                        }
                        let na = na2.sqrt();
                        let nb = nb2.sqrt();
                        let q = na * nb + eps;
                        let gv = g[row];
                        for j in 0..d {
                            // d s / d a_j = b_j/q - dot*nb*a_j/(na*q^2); zero-norm
                            // rows take the subgradient with the norm term dropped.
                            let da = if na > S::zero() {
                                bv[j] / q - dot * nb * av[j] / (na * q * q)
                            } else {
                                bv[j] / q
                            };
                            let db = if nb > S::zero() {
                                av[j] / q - dot * na * bv[j] / (nb * q * q)
                            } else {
                                av[j] / q
                            };
                            before[a.0][row * d + j] = before[a.0][row * d + j] + gv * da;
                            before[b.0][row * d + j] = before[b.0][row * d + j] + gv * db;
                        }
                    }
                }
                Op::MeanAll { a } => {
                    let numel = self.nodes[a.0].values.len();
                    let gv = g[0] / S::from_f64c(numel as f64);
                    for dst in before[a.0].iter_mut() {
                        *dst = *dst + gv;
                    }
                }
                Op::GatherRows { table, ids } => {
                    let d = node.cols;
                    for (row, &id) in ids.iter().enumerate() {
                        let base = id as usize * d;
                        for j in 0..d {
                            before[table.0][base + j] = before[table.0][base + j] + g[row * d + j];
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0usize;
                    for &p in parts {
                        let len = self.nodes[p.0].values.len();
                        for (dst, gv) in before[p.0].iter_mut().zip(g[offset..offset + len].iter()) {
                            *dst = *dst + *gv;
                        }
                        offset += len;
                    }
                }
                Op::ConcatCols { parts } => {
                    let rows = node.rows;
                    let total = node.cols;
                    for i in 0..rows {
                        let mut offset = 0usize;
                        for &p in parts {
                            let c = self.nodes[p.0].cols;
                            for j in 0..c {
                                before[p.0][i * c + j] =
                                    before[p.0][i * c + j] + g[i * total + offset + j];
                            }
                            offset += c;
                        }
                    }
                }
                Op::SliceRows { a, start } => {
                    let c = node.cols;
                    let base = start * c;
                    for (idx, gv) in g.iter().enumerate() {
                        before[a.0][base + idx] = before[a.0][base + idx] + *gv;
                    }
                }
                Op::SliceCols { a, start } => {
                    let (r, len) = (node.rows, node.cols);
                    let c = self.nodes[a.0].cols;
                    for row in 0..r {
                        for j in 0..len {
                            before[a.0][row * c + start + j] =
                                before[a.0][row * c + start + j] + g[row * len + j];
                        }
                    }
                }
                Op::Pick { a, index } => {
                    before[a.0][*index] = before[a.0][*index] + g[0];
                }
            }
        }
        grads
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}
