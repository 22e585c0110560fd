//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records operations in evaluation order. Every value is a 2-D
//! matrix; vectors are `1 x n` rows and scalars are `1 x 1`. Parameters live in
//! a [`ParamStore`] borrowed by the tape, so building a graph never copies
//! weights. [`Tape::backward`] walks the tape once in reverse and returns
//! gradients for every parameter and recorded input.

use ndarray::{s, Array2, Axis, Zip};
use crate::error::{Error, Result};

pub type ParamId = usize;

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Gather { param: ParamId, ids: Vec<usize> },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Array2<f64>),
    SoftmaxRows(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MaxPoolRows { x: Var, argmax: Vec<usize> },
    Element { x: Var, row: usize, col: usize },
    BceWithLogitsSum { logits: Var, targets: Array2<f64>, mask: Array2<f64> },
    CrossEntropy { logits: Var, target: usize },
}

#[derive(Debug)]
struct Node {
    value: Option<Array2<f64>>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: {a:?} vs {b:?}"))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise binary cross-entropy of a logit against a soft target.
pub fn bce_with_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// `log(sum(exp(row)))` of a single row.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(value), _) => value,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// A differentiable input whose gradient is reported by `backward`.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Selects rows `ids` of a parameter matrix (embedding lookup).
    pub fn gather(&mut self, param: ParamId, ids: &[usize]) -> Result<Var> {
        let table = self.params.get(param);
        let (rows, cols) = table.dim();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Vocabulary(format!(
                "index {bad} out of range for table with {rows} rows"
            )));
        }
        let mut out = Array2::zeros((ids.len(), cols));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&table.row(i));
        }
        Ok(self.push(
            out,
            Op::Gather {
                param,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.1 != db.0 {
            return Err(shape_err("matmul", &[da.0, da.1], &[db.0, db.1]));
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.1 != db.1 {
            return Err(shape_err("matmul_nt", &[da.0, da.1], &[db.0, db.1]));
        }
        let v = self.value(a).dot(&self.value(b).t());
        Ok(self.push(v, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(shape_err("add", &[da.0, da.1], &[db.0, db.1]));
        }
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (da, dr) = (self.dims(a), self.dims(row));
        if dr.0 != 1 || dr.1 != da.1 {
            return Err(shape_err("add_row", &[da.0, da.1], &[dr.0, dr.1]));
        }
        let v = self.value(a) + self.value(row);
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// `x * w + b` with `b` a `1 x out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    /// Adds a constant matrix; no gradient flows into the constant.
    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Result<Var> {
        if self.dims(a) != c.dim() {
            let d = self.dims(a);
            return Err(shape_err("add_const", &[d.0, d.1], &[c.nrows(), c.ncols()]));
        }
        let v = self.value(a) + c;
        Ok(self.push(v, Op::AddConst(a)))
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Result<Var> {
        if self.dims(a) != c.dim() {
            let d = self.dims(a);
            return Err(shape_err("mul_const", &[d.0, d.1], &[c.nrows(), c.ncols()]));
        }
        let v = self.value(a) * &c;
        Ok(self.push(v, Op::MulConst(a, c)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// `1 x n` affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        for p in [gamma, beta] {
            let d = self.dims(p);
            if d != (1, cols) {
                return Err(shape_err("layer_norm", &[rows, cols], &[d.0, d.1]));
            }
        }
        let xv = self.value(x);
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            Zip::from(xhat.row_mut(r))
                .and(&row)
                .for_each(|h, &v| *h = (v - mean) * is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (_, cols) = self.dims(x);
        if start + len > cols {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} of {cols} columns",
                start + len
            )));
        }
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| Error::Shape("concat of zero parts".into()))?;
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("checked shapes");
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Column-wise maximum over the rows where `mask` is true. Ties resolve to
    /// the earliest row.
    pub fn max_pool_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if mask.len() != rows {
            return Err(shape_err("max_pool_rows", &[rows, cols], &[mask.len()]));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Degenerate("max pooling over a fully masked row".into()));
        }
        let xv = self.value(x);
        let mut out = Array2::zeros((1, cols));
        let mut argmax = vec![0usize; cols];
        for c in 0..cols {
            let mut best = f64::NEG_INFINITY;
            let mut best_r = usize::MAX;
            for r in (0..rows).filter(|&r| mask[r]) {
                let v = xv[[r, c]];
                if best_r == usize::MAX || v > best {
                    best = v;
                    best_r = r;
                }
            }
            out[[0, c]] = best;
            argmax[c] = best_r;
        }
        Ok(self.push(out, Op::MaxPoolRows { x, argmax }))
    }

    pub fn element(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if row >= rows || col >= cols {
            return Err(Error::Shape(format!("element ({row}, {col}) of {rows}x{cols}")));
        }
        let v = Array2::from_elem((1, 1), self.value(x)[[row, col]]);
        Ok(self.push(v, Op::Element { x, row, col }))
    }

    /// Sum of elementwise binary cross-entropy over entries with mask 1.
    pub fn bce_with_logits_sum(
        &mut self,
        logits: Var,
        targets: Array2<f64>,
        mask: Array2<f64>,
    ) -> Result<Var> {
        let d = self.dims(logits);
        if targets.dim() != d || mask.dim() != d {
            return Err(shape_err(
                "bce_with_logits_sum",
                &[d.0, d.1],
                &[targets.nrows(), targets.ncols()],
            ));
        }
        let z = self.value(logits);
        let mut total = 0.0;
        Zip::from(z).and(&targets).and(&mask).for_each(|&z, &t, &m| {
            if m != 0.0 {
                total += m * bce_with_logit(z, t);
            }
        });
        Ok(self.push(
            Array2::from_elem((1, 1), total),
            Op::BceWithLogitsSum {
                logits,
                targets,
                mask,
            },
        ))
    }

    /// `-log softmax(logits)[target]` for a `1 x k` row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (rows, cols) = self.dims(logits);
        if rows != 1 || target >= cols {
            return Err(Error::Shape(format!(
                "cross_entropy on {rows}x{cols} with target {target}"
            )));
        }
        let row: Vec<f64> = self.value(logits).iter().copied().collect();
        let loss = log_sum_exp(&row) - row[target];
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy { logits, target },
        ))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        let mut params: Vec<Option<Array2<f64>>> = vec![None; self.params.len()];
        grads[root.0] = Some(Array2::ones(self.value(root).dim()));

        fn acc(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
            match slot {
                Some(existing) => *existing += &g,
                None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => acc(&mut params[*id], g),
                Op::Gather { param, ids } => {
                    let slot = params[*param]
                        .get_or_insert_with(|| Array2::zeros(self.params.get(*param).dim()));
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = slot.row_mut(id);
                        row += &g.row(r);
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads[a.0], ga);
                    acc(&mut grads[b.0], gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads[a.0], ga);
                    acc(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads[b.0], g.clone());
                    acc(&mut grads[a.0], g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads[row.0], gr);
                    acc(&mut grads[a.0], g);
                }
                Op::Scale(a, c) => acc(&mut grads[a.0], g * *c),
                Op::AddConst(a) => acc(&mut grads[a.0], g),
                Op::MulConst(a, c) => acc(&mut grads[a.0], g * c),
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(i));
                    let mut ga = Array2::zeros(y.dim());
                    for ((mut out, yr), gr) in ga.rows_mut().into_iter().zip(y.rows()).zip(g.rows())
                    {
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut out)
                            .and(&yr)
                            .and(&gr)
                            .for_each(|o, &y, &g| *o = y * (g - dot));
                    }
                    acc(&mut grads[a.0], ga);
                }
                Op::Gelu(a) => {
                    let ga = &g * &self.value(*a).mapv(gelu_grad);
                    acc(&mut grads[a.0], ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let cols = xhat.ncols() as f64;
                    acc(
                        &mut grads[gamma.0],
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    acc(&mut grads[beta.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * gv;
                    let mut gx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let h = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_h: f64 = dh.iter().zip(h.iter()).map(|(a, b)| a * b).sum();
                        let is = inv_std[r];
                        Zip::from(gx.row_mut(r))
                            .and(&dh)
                            .and(&h)
                            .for_each(|o, &d, &hv| {
                                *o = is / cols * (cols * d - sum_dh - hv * sum_dh_h)
                            });
                    }
                    acc(&mut grads[x.0], gx);
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Array2::zeros(self.dims(*x));
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads[x.0], gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.dims(*p).1;
                        acc(
                            &mut grads[p.0],
                            g.slice(s![.., offset..offset + w]).to_owned(),
                        );
                        offset += w;
                    }
                }
                Op::MaxPoolRows { x, argmax } => {
                    let mut gx = Array2::zeros(self.dims(*x));
                    for (c, &r) in argmax.iter().enumerate() {
                        gx[[r, c]] += g[[0, c]];
                    }
                    acc(&mut grads[x.0], gx);
                }
                Op::Element { x, row, col } => {
                    let mut gx = Array2::zeros(self.dims(*x));
                    gx[[*row, *col]] = g[[0, 0]];
                    acc(&mut grads[x.0], gx);
                }
                Op::BceWithLogitsSum {
                    logits,
                    targets,
                    mask,
                } => {
                    let scale = g[[0, 0]];
                    let mut gz = self.value(*logits).mapv(sigmoid);
                    Zip::from(&mut gz)
                        .and(targets)
                        .and(mask)
                        .for_each(|z, &t, &m| *z = (*z - t) * m * scale);
                    acc(&mut grads[logits.0], gz);
                }
                Op::CrossEntropy { logits, target } => {
                    let scale = g[[0, 0]];
                    let mut p = softmax_rows(self.value(*logits));
                    p[[0, *target]] -= 1.0;
                    acc(&mut grads[logits.0], p * scale);
                }
            }
        }
        Gradients { nodes: grads, params }
    }
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Array2<f64>>>,
    params: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient with respect to an [`Tape::input`] node.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.get(id).and_then(Option::as_ref)
    }

    pub fn into_param_grads(self) -> ParamGrads {
        ParamGrads(self.params)
    }
}

/// Accumulated parameter gradients, `None` where a parameter was unused.
#[derive(Debug, Clone)]
pub struct ParamGrads(pub Vec<Option<Array2<f64>>>);

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads(vec![None; store.len()])
    }

    pub fn accumulate(&mut self, other: ParamGrads) {
        for (slot, g) in self.0.iter_mut().zip(other.0) {
            if let Some(g) = g {
                match slot {
                    Some(existing) => *existing += &g,
                    None => *slot = Some(g),
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.0.iter_mut().flatten() {
            g.mapv_inplace(|v| v * c);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.0.get(id).and_then(Option::as_ref)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
