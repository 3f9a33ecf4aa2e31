//! Distillation penalties pulling a compressed student towards a dense
//! teacher.
//!
//! With `D = W* - W`, the activation penalty is `lambda Trace[D S D^T]` for
//! the data covariance `S`, and the weight penalty is its `S = I` special
//! case `lambda ||D||_F^2`. On a tape the trace form is evaluated as
//! `lambda ||D C||_F^2` with `S = C C^T`.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{FrozenModel, Gate, LmState, TTLstmModel};
use crate::tensor::Matrix;

/// Penalty weights tried for distillation runs.
pub const LAMBDA_GRID: [f64; 8] = [0.5e-6, 1e-6, 5e-6, 10e-6, 50e-6, 100e-6, 500e-6, 5000e-6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    #[default]
    None,
    /// Penalty on weights.
    Kdw,
    /// Penalty on activations, weighted by the data covariance.
    Kda,
}

impl std::fmt::Display for DistillMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistillMode::None => "none",
            DistillMode::Kdw => "kdw",
            DistillMode::Kda => "kda",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default)]
    pub mode: DistillMode,
    #[serde(default)]
    pub lambda: f64,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        Ok(())
    }

    /// True when the penalty contributes nothing.
    pub fn is_inactive(&self) -> bool {
        self.mode == DistillMode::None || self.lambda == 0.0
    }
}

/// Dense gate stacks of a trained full model.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherWeights {
    pub w_x: Matrix,
    pub w_h: Matrix,
    pub source: String,
}

impl TeacherWeights {
    pub fn from_model(model: &TTLstmModel, source: impl Into<String>) -> Result<Self> {
        Ok(Self {
            w_x: model.gate_weight(Gate::X)?,
            w_h: model.gate_weight(Gate::H)?,
            source: source.into(),
        })
    }

    pub fn weight(&self, gate: Gate) -> &Matrix {
        match gate {
            Gate::X => &self.w_x,
            Gate::H => &self.w_h,
        }
    }

    /// Config error unless both stacks match the student's shapes.
    pub fn check_compatible(&self, student: &TTLstmModel) -> Result<()> {
        for gate in [Gate::X, Gate::H] {
            let want = student.gate_shape(gate);
            let have = self.weight(gate).dim();
            if want != have {
                return Err(Error::config(format!(
                    "teacher {} is {have:?} but the student expects {want:?}",
                    gate.prefix()
                )));
            }
        }
        Ok(())
    }
}

/// `S = sum_i (x_i - mean)(x_i - mean)^T` over a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DataCovariance {
    pub s: Matrix,
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Two-pass covariance of the rows of `inputs`: the mean first, then the
/// sum of centered outer products.
pub fn accumulate_covariance(inputs: ArrayView2<f64>) -> Result<DataCovariance> {
    let count = inputs.nrows();
    if count == 0 {
        return Err(Error::domain("covariance of an empty stream"));
    }
    let mean = inputs.mean_axis(Axis(0)).expect("non-empty");
    let centered = &inputs - &mean.view().insert_axis(Axis(0));
    let mut s = centered.t().dot(&centered);
    // Exact symmetry regardless of summation order.
    for i in 0..s.nrows() {
        for j in 0..i {
            let v = 0.5 * (s[[i, j]] + s[[j, i]]);
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    Ok(DataCovariance {
        s,
        mean: mean.to_vec(),
        count,
    })
}

impl DataCovariance {
    pub fn dim(&self) -> usize {
        self.s.nrows()
    }

    /// Smallest and largest eigenvalues of `S`.
    pub fn eigen_extremes(&self) -> (f64, f64) {
        let n = self.dim();
        let m = DMatrix::from_fn(n, n, |i, j| self.s[[i, j]]);
        let eig = SymmetricEigen::new(m);
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    }

    /// `C` (`M x k`) with `S = C C^T`, by pivoted Cholesky stopped once the
    /// remaining diagonal falls below `1e-12 trace(S)`.
    pub fn factor(&self) -> Matrix {
        let n = self.dim();
        let trace: f64 = (0..n).map(|i| self.s[[i, i]]).sum();
        let tol = 1e-12 * trace.max(f64::MIN_POSITIVE);
        let mut diag: Vec<f64> = (0..n).map(|i| self.s[[i, i]]).collect();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut used = vec![false; n];
        while cols.len() < n {
            let (p, &d) = diag
                .iter()
                .enumerate()
                .filter(|(i, _)| !used[*i])
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("unused pivot remains");
            if d <= tol {
                break;
            }
            used[p] = true;
            let root = d.sqrt();
            let mut col = vec![0.0; n];
            for i in 0..n {
                if used[i] && i != p {
                    continue;
                }
                let mut v = self.s[[i, p]];
                for c in &cols {
                    v -= c[i] * c[p];
                }
                col[i] = v / root;
            }
            col[p] = root;
            for i in 0..n {
                if !used[i] {
                    diag[i] -= col[i] * col[i];
                }
            }
            cols.push(col);
        }
        let k = cols.len().max(1);
        let mut c = Array2::zeros((n, k));
        for (j, col) in cols.iter().enumerate() {
            for i in 0..n {
                c[[i, j]] = col[i];
            }
        }
        c
    }
}

fn check_pair(teacher: &Matrix, student: &Matrix) -> Result<()> {
    if teacher.dim() != student.dim() {
        return Err(Error::shape(format!(
            "teacher {:?} and student {:?} differ",
            teacher.dim(),
            student.dim()
        )));
    }
    Ok(())
}

/// `lambda Trace[(W* - W) S (W* - W)^T]`, or `lambda ||W* - W||_F^2` without
/// `S`.
pub fn kd_penalty(teacher: &Matrix, student: &Matrix, s: Option<&Matrix>, lambda: f64) -> Result<f64> {
    check_pair(teacher, student)?;
    let d = teacher - student;
    let value = match s {
        None => d.iter().map(|v| v * v).sum::<f64>(),
        Some(s) => {
            if s.dim() != (d.ncols(), d.ncols()) {
                return Err(Error::shape(format!(
                    "covariance {:?} does not match {} columns",
                    s.dim(),
                    d.ncols()
                )));
            }
            (&d.dot(s) * &d).sum()
        }
    };
    Ok(lambda * value)
}

/// Tape form of [`kd_penalty`] with `S = C C^T` given by `factor`.
pub fn kd_penalty_tape(
    tape: &mut Tape,
    student: Var,
    teacher: &Matrix,
    factor: Option<&Matrix>,
    lambda: f64,
) -> Result<Var> {
    check_pair(teacher, tape.value(student))?;
    let t = tape.constant(teacher.clone());
    let d = tape.sub(t, student)?;
    let projected = match factor {
        None => d,
        Some(c) => {
            let c = tape.constant(c.clone());
            tape.matmul(d, c)?
        }
    };
    let sq = tape.sum_squares(projected);
    Ok(tape.scale(sq, lambda))
}

/// Training objective: cross entropy plus a penalty already scaled by
/// `lambda`.
pub fn total_loss(ce: f64, penalty: f64) -> Result<f64> {
    if !ce.is_finite() || !penalty.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss terms {ce} and {penalty}")));
    }
    Ok(ce + penalty)
}

/// Inputs seen by `W_x` (embedded tokens) and `W_h` (previous hidden
/// states) while the teacher reads `ids` in `batch` lanes.
pub fn teacher_inputs(teacher: &FrozenModel, ids: &[usize], batch: usize) -> Result<(Matrix, Matrix)> {
    if batch == 0 || ids.len() < batch {
        return Err(Error::domain("not enough tokens for the requested lanes"));
    }
    let steps = ids.len() / batch;
    let mut xs = Matrix::zeros((steps * batch, teacher.embedding.ncols()));
    let mut hs = Matrix::zeros((steps * batch, teacher.hidden));
    let mut state = LmState::zeros(batch, teacher.hidden);
    for t in 0..steps {
        let lane_ids: Vec<usize> = (0..batch).map(|b| ids[b * steps + t]).collect();
        if let Some(&bad) = lane_ids.iter().find(|&&id| id >= teacher.vocab_size) {
            return Err(Error::Vocab(format!("token id {bad} outside the teacher vocabulary")));
        }
        let x = teacher.embedding.select(Axis(0), &lane_ids);
        xs.slice_mut(ndarray::s![t * batch..(t + 1) * batch, ..]).assign(&x);
        hs.slice_mut(ndarray::s![t * batch..(t + 1) * batch, ..]).assign(&state.h);
        state = teacher.lstm_step(x.view(), &state)?;
    }
    Ok((xs, hs))
}

/// Covariances of the `W_x` and `W_h` inputs collected from a teacher pass.
pub fn teacher_covariances(teacher: &FrozenModel, ids: &[usize], batch: usize) -> Result<(DataCovariance, DataCovariance)> {
    let (xs, hs) = teacher_inputs(teacher, ids, batch)?;
    Ok((accumulate_covariance(xs.view())?, accumulate_covariance(hs.view())?))
}
