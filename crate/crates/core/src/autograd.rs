//! Tape-based reverse-mode differentiation over 2-D matrices.
//!
//! Every node of a [`Tape`] holds a matrix value. Parameters enter the tape
//! as matrices of shape `(dims[0], rest)`, or `(1, d)` for vectors, so a core
//! of dims `(r, I, r')` appears as its `(r, I r')` right unfolding.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::tensor::{permute_data, DenseTensor, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: DenseTensor,
    pub grad: DenseTensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: DenseTensor) -> Self {
        let grad = DenseTensor::zeros(value.dims().to_vec()).expect("dims already validated");
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    /// The `(rows, cols)` shape the parameter takes on a tape.
    pub fn matrix_shape(&self) -> (usize, usize) {
        matrix_shape(self.value.dims())
    }

    pub fn as_matrix(&self) -> Matrix {
        let (r, c) = self.matrix_shape();
        Array2::from_shape_vec((r, c), self.value.data().to_vec()).expect("consistent length")
    }
}

pub fn matrix_shape(dims: &[usize]) -> (usize, usize) {
    match dims {
        [d] => (1, *d),
        [first, rest @ ..] => (*first, rest.iter().product()),
        [] => (1, 1),
    }
}

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseTensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::State(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients of every parameter node on `tape` into `grad`.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for (&node, &id) in &tape.param_nodes {
            if let Some(g) = grads.get(Var(node)) {
                let dst = self.params[id.0].grad.data_mut();
                for (d, s) in dst.iter_mut().zip(g.iter()) {
                    *d += s;
                }
            }
        }
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    /// Axis permutation of the row-major data viewed with `dims`.
    Permute { a: Var, dims: Vec<usize>, perm: Vec<usize> },
    /// Standardizes each contiguous block of `block` columns in every row;
    /// saves `1/sqrt(var + eps)` per block.
    NormalizeBlocks { a: Var, block: usize, inv_std: Array2<f64> },
    Columns { a: Var, start: usize },
    Rows { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    /// Token-mean cross entropy; saves the softmax probabilities.
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
    SumSquares(Var),
    Sum(Var),
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Matrix>,
    ops: Vec<Op>,
    param_nodes: BTreeMap<usize, ParamId>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(tape.value(v).dim()))
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    let (da, db) = (tape.value(a).dim(), tape.value(b).dim());
    if da != db {
        return Err(Error::shape(format!("{what}: shapes {da:?} and {db:?} differ")));
    }
    Ok(())
}

fn row_vector(tape: &Tape, a: Var, row: Var, what: &str) -> Result<()> {
    let (da, dr) = (tape.value(a).dim(), tape.value(row).dim());
    if dr != (1, da.1) {
        return Err(Error::shape(format!("{what}: row {dr:?} does not broadcast over {da:?}")));
    }
    Ok(())
}

fn scalar(v: f64) -> Matrix {
    Matrix::from_elem((1, 1), v)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax probabilities and token-mean negative log-likelihood.
pub fn softmax_nll(logits: &Matrix, targets: &[usize]) -> Result<(Matrix, f64)> {
    if logits.nrows() != targets.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let v = logits.ncols();
    let mut probs = logits.clone();
    let mut nll = 0.0;
    for (mut row, &t) in probs.axis_iter_mut(Axis(0)).zip(targets) {
        if t >= v {
            return Err(Error::Vocab(format!("target {t} outside vocabulary of {v}")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let target_shifted = row[t] - max;
        row.mapv_inplace(|x| (x - max).exp());
        let z: f64 = row.sum();
        nll += z.ln() - target_shifted;
        row.mapv_inplace(|x| x / z);
    }
    Ok((probs, nll / targets.len().max(1) as f64))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.0]
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0][[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.get(id).as_matrix(), Op::Leaf);
        self.param_nodes.insert(v.0, id);
        v
    }

    /// Parameters recorded on this tape with their leaf handles.
    pub fn params(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.param_nodes.iter().map(|(&n, &id)| (Var(n), id))
    }

    /// `op(a) op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let va = if ta { va.t() } else { va.view() };
        let vb = if tb { vb.t() } else { vb.view() };
        if va.ncols() != vb.nrows() {
            return Err(Error::shape(format!(
                "matmul of {:?} by {:?}",
                va.dim(),
                vb.dim()
            )));
        }
        let out = va.dot(&vb);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    /// Adds the `1 x C` `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        row_vector(self, a, row, "add_row")?;
        let out = self.value(a) + self.value(row);
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by the `1 x C` `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        row_vector(self, a, row, "mul_row")?;
        let out = self.value(a) * self.value(row);
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Reinterprets the row-major data of `a` with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let src = self.value(a);
        if src.len() != rows * cols {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to ({rows}, {cols})",
                src.dim()
            )));
        }
        let data: Vec<f64> = src.iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), data).expect("length checked");
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Views the data of `a` as a tensor with `dims`, permutes its axes so
    /// output axis `k` is input axis `perm[k]`, and lays the result out as a
    /// `rows x cols` matrix.
    pub fn permute(&mut self, a: Var, dims: &[usize], perm: &[usize], rows: usize, cols: usize) -> Result<Var> {
        let src = self.value(a);
        if src.len() != rows * cols {
            return Err(Error::shape(format!("cannot lay {:?} out as ({rows}, {cols})", src.dim())));
        }
        let data: Vec<f64> = src.iter().copied().collect();
        let out = permute_data(&data, dims, perm)?;
        let out = Array2::from_shape_vec((rows, cols), out).expect("length checked");
        Ok(self.push(
            out,
            Op::Permute {
                a,
                dims: dims.to_vec(),
                perm: perm.to_vec(),
            },
        ))
    }

    /// Zero-mean, unit-variance standardization of every contiguous block of
    /// `block` columns in every row, using the population variance.
    pub fn normalize_blocks(&mut self, a: Var, block: usize, eps: f64) -> Result<Var> {
        let src = self.value(a);
        if block == 0 || !src.ncols().is_multiple_of(block) {
            return Err(Error::shape(format!(
                "{} columns do not split into blocks of {block}",
                src.ncols()
            )));
        }
        if !(eps >= 0.0) {
            return Err(Error::domain("epsilon must be non-negative"));
        }
        let blocks = src.ncols() / block;
        let mut out = src.clone();
        let mut inv_std = Array2::zeros((src.nrows(), blocks));
        for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            for b in 0..blocks {
                let mut seg = row.slice_mut(s![b * block..(b + 1) * block]);
                let mean = seg.sum() / block as f64;
                let var = seg.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / block as f64;
                let inv = 1.0 / (var + eps).sqrt();
                seg.mapv_inplace(|x| (x - mean) * inv);
                inv_std[[r, b]] = inv;
            }
        }
        Ok(self.push(out, Op::NormalizeBlocks { a, block, inv_std }))
    }

    pub fn columns(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        if start + len > src.ncols() {
            return Err(Error::shape(format!(
                "columns {start}..{} of {:?}",
                start + len,
                src.dim()
            )));
        }
        let out = src.slice(s![.., start..start + len]).to_owned();
        Ok(self.push(out, Op::Columns { a, start }))
    }

    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        if start + len > src.nrows() {
            return Err(Error::shape(format!(
                "rows {start}..{} of {:?}",
                start + len,
                src.dim()
            )));
        }
        let out = src.slice(s![start..start + len, ..]).to_owned();
        Ok(self.push(out, Op::Rows { a, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        if views.is_empty() {
            return Err(Error::shape("nothing to concatenate"));
        }
        let out = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `ids` of `table`, in order.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let src = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= src.nrows()) {
            return Err(Error::Vocab(format!(
                "id {bad} outside table of {} rows",
                src.nrows()
            )));
        }
        let out = src.select(Axis(0), ids);
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, as a `1 x 1` node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (probs, nll) = softmax_nll(self.value(logits), targets)?;
        Ok(self.push(
            scalar(nll),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x * x).sum();
        self.push(scalar(v), Op::SumSquares(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        self.push(scalar(v), Op::Sum(a))
    }

    /// Reverse sweep from the `1 x 1` node `loss`, seeded with `seed`.
    pub fn backward(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if self.values.is_empty() {
            return Err(Error::State("backward called before any forward computation".into()));
        }
        if loss.0 >= self.values.len() {
            return Err(Error::State(format!("node {} is not on this tape", loss.0)));
        }
        if self.values[loss.0].dim() != (1, 1) {
            return Err(Error::State(format!(
                "loss must be a scalar node, got {:?}",
                self.values[loss.0].dim()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.values.len()];
        grads[loss.0] = Some(scalar(seed));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for node in (0..=loss.0).rev() {
            let Some(g) = grads[node].take() else { continue };
            match &self.ops[node] {
                Op::Leaf => {
                    grads[node] = Some(g);
                    continue;
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let opb = if *tb { vb.t() } else { vb.view() };
                    let opa = if *ta { va.t() } else { va.view() };
                    let ga = if *ta { opb.dot(&g.t()) } else { g.dot(&opb.t()) };
                    let gb = if *tb { g.t().dot(&opa) } else { opa.t().dot(&g) };
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let grow = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, grow);
                    acc(&mut grads, *a, g * self.value(*row));
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.values[node])
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.values[node])
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).dim();
                    let data: Vec<f64> = g.iter().copied().collect();
                    acc(&mut grads, *a, Array2::from_shape_vec(dim, data).expect("same length"));
                }
                Op::Permute { a, dims, perm } => {
                    let permuted: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
                    let mut inverse = vec![0; perm.len()];
                    for (k, &p) in perm.iter().enumerate() {
                        inverse[p] = k;
                    }
                    let data: Vec<f64> = g.iter().copied().collect();
                    let back = permute_data(&data, &permuted, &inverse).expect("valid permutation");
                    let dim = self.value(*a).dim();
                    acc(&mut grads, *a, Array2::from_shape_vec(dim, back).expect("same length"));
                }
                Op::NormalizeBlocks { a, block, inv_std } => {
                    let y = &self.values[node];
                    let mut ga = g;
                    let n = *block as f64;
                    for (r, (mut grow, yrow)) in ga
                        .axis_iter_mut(Axis(0))
                        .zip(y.axis_iter(Axis(0)))
                        .enumerate()
                    {
                        for b in 0..inv_std.ncols() {
                            let range = b * block..(b + 1) * block;
                            let mut gs = grow.slice_mut(s![range.clone()]);
                            let ys = yrow.slice(s![range]);
                            let mean_g = gs.sum() / n;
                            let mean_gy = gs.iter().zip(ys.iter()).map(|(g, y)| g * y).sum::<f64>() / n;
                            let inv = inv_std[[r, b]];
                            Zip::from(&mut gs)
                                .and(&ys)
                                .for_each(|d, &yv| *d = inv * (*d - mean_g - yv * mean_gy));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Columns { a, start } => {
                    let mut ga = Matrix::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::Rows { a, start } => {
                    let mut ga = Matrix::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![offset..offset + rows, ..]).to_owned());
                        offset += rows;
                    }
                }
                Op::Gather { table, ids } => {
                    let mut gt = Matrix::zeros(self.value(*table).dim());
                    for (row, &id) in g.axis_iter(Axis(0)).zip(ids) {
                        let mut dst = gt.row_mut(id);
                        dst += &row;
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                    let scale = g[[0, 0]] / targets.len().max(1) as f64;
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[[r, t]] -= 1.0;
                    }
                    gl *= scale;
                    acc(&mut grads, *logits, gl);
                }
                Op::SumSquares(a) => {
                    let c = 2.0 * g[[0, 0]];
                    acc(&mut grads, *a, self.value(*a) * c);
                }
                Op::Sum(a) => {
                    acc(&mut grads, *a, Matrix::from_elem(self.value(*a).dim(), g[[0, 0]]));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat entry where the largest error occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Step used by [`grad_check`] for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Compares tape gradients of the scalar built by `f` against central
/// differences for every entry of every parameter in `store`.
///
/// The relative error of an entry is `|analytic - numeric| / max(1e-8,
/// |numeric|)`.
pub fn grad_check<F>(store: &mut ParamStore, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(store, &mut tape)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    let grads = tape.backward(loss, 1.0)?;
    store.zero_grads();
    store.accumulate(&tape, &grads);
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        let id = ParamId(pi);
        for (k, &a) in grads.iter().enumerate() {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + FD_STEP;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig - FD_STEP;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * FD_STEP);
            if !a.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {}", store.get(id).name)));
            }
            let err = (a - numeric).abs() / numeric.abs().max(1e-8);
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.get(id).name.clone(), k));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
