//! Layer-normalized LSTM language model with tensor-train gate matrices.
//!
//! The four gate matrices acting on the input are stacked into `W_x`
//! (`4H x E`) and those acting on the hidden state into `W_h` (`4H x H`),
//! with gate blocks in the order of [`GATE_ORDER`]. One step computes
//!
//! ```text
//! a  = LN_x(W_x x) + LN_h(W_h h) + b          split into (i, f, g, o)
//! c' = sigmoid(f) * c + sigmoid(i) * tanh(g)
//! h' = sigmoid(o) * tanh(c')
//! ```
//!
//! where each layer norm standardizes every gate block of length `H`
//! separately before its own gain and bias.

use ndarray::{s, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_nll, ParamId, ParamStore, Tape, Var};
use crate::contract::{build_factor_pair, mps_matmul_rows, pick_rank, FactorPair};
use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Matrix};
use crate::ttrain::{
    InitScheme, MpoTrain, MpsTrain, RankChain, ShapeFactorization, TensorTrain, TrainKind,
};

/// Order of the gate blocks in the stacked `4H` rows.
pub const GATE_ORDER: [&str; 4] = ["i", "f", "g", "o"];

/// Initial value of the forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Dense,
    Mps,
    Mpo,
}

impl std::fmt::Display for Representation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Representation::Dense => "dense",
            Representation::Mps => "mps",
            Representation::Mpo => "mpo",
        })
    }
}

/// How one gate stack is represented. For tensor trains the rank comes from
/// `ranks`, else a uniform `rank`, else the rank planned for `target_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: Representation,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub row_dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub col_dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col_permutation: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks: Option<RankChain>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitScheme>,
}

impl LayerSpec {
    pub fn dense() -> Self {
        Self {
            kind: Representation::Dense,
            row_dims: Vec::new(),
            col_dims: Vec::new(),
            col_permutation: None,
            rank: None,
            target_rate: None,
            ranks: None,
            init: None,
        }
    }

    pub fn train(kind: TrainKind, row_dims: Vec<usize>, col_dims: Vec<usize>, rank: usize) -> Self {
        Self {
            kind: match kind {
                TrainKind::Mps => Representation::Mps,
                TrainKind::Mpo => Representation::Mpo,
            },
            row_dims,
            col_dims,
            rank: Some(rank),
            ..Self::dense()
        }
    }

    fn train_kind(&self) -> Option<TrainKind> {
        match self.kind {
            Representation::Dense => None,
            Representation::Mps => Some(TrainKind::Mps),
            Representation::Mpo => Some(TrainKind::Mpo),
        }
    }

    /// Checks the factorization against a `rows x cols` matrix and fixes the
    /// rank chain.
    pub fn resolve(&self, rows: usize, cols: usize) -> Result<LayerSpec> {
        let Some(kind) = self.train_kind() else {
            return Ok(LayerSpec::dense());
        };
        let mut fact = ShapeFactorization::new(self.row_dims.clone(), self.col_dims.clone())
            .map_err(|e| Error::config(e.to_string()))?;
        if let Some(perm) = &self.col_permutation {
            fact = fact.with_col_permutation(perm.clone()).map_err(|e| Error::config(e.to_string()))?;
        }
        if fact.rows() != rows || fact.cols() != cols {
            return Err(Error::config(format!(
                "factorization {:?} x {:?} does not match a {rows} x {cols} gate stack",
                self.row_dims, self.col_dims
            )));
        }
        let ranks = match (&self.ranks, self.rank, self.target_rate) {
            (Some(chain), _, _) => chain.clone(),
            (None, Some(r), _) => RankChain::uniform(kind, &fact, r),
            (None, None, Some(rate)) => {
                RankChain::uniform(kind, &fact, pick_rank(rate, &fact, kind).map_err(|e| Error::config(e.to_string()))?)
            }
            (None, None, None) => {
                return Err(Error::config("tensor-train layers need ranks, rank or target_rate"));
            }
        };
        if ranks.kind() != kind {
            return Err(Error::config("rank chain does not match the layer kind"));
        }
        ranks.validate(&fact).map_err(|e| Error::config(e.to_string()))?;
        Ok(LayerSpec {
            ranks: Some(ranks),
            rank: None,
            target_rate: None,
            init: Some(self.init.unwrap_or_default()),
            ..self.clone()
        })
    }

    fn factorization(&self) -> Result<ShapeFactorization> {
        let fact = ShapeFactorization::new(self.row_dims.clone(), self.col_dims.clone())?;
        match &self.col_permutation {
            Some(p) => fact.with_col_permutation(p.clone()),
            None => Ok(fact),
        }
    }
}

fn default_ln_eps() -> f64 {
    1e-5
}

fn default_unroll() -> usize {
    35
}

fn default_batch() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Filled in from the corpus vocabulary when training.
    #[serde(default)]
    pub vocab_size: usize,
    pub embed: usize,
    pub hidden: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_unroll")]
    pub unroll: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "LayerSpec::dense")]
    pub w_x: LayerSpec,
    #[serde(default = "LayerSpec::dense")]
    pub w_h: LayerSpec,
}

impl ModelConfig {
    pub fn dense(vocab_size: usize, embed: usize, hidden: usize) -> Self {
        Self {
            vocab_size,
            embed,
            hidden,
            ln_eps: default_ln_eps(),
            unroll: default_unroll(),
            batch: default_batch(),
            w_x: LayerSpec::dense(),
            w_h: LayerSpec::dense(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed == 0 || self.hidden == 0 {
            return Err(Error::config("vocab_size, embed and hidden must be positive"));
        }
        if self.unroll == 0 || self.batch == 0 {
            return Err(Error::config("unroll and batch must be positive"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("ln_eps must be positive"));
        }
        Ok(())
    }
}

/// The two gate stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gate {
    X,
    H,
}

impl Gate {
    pub fn prefix(self) -> &'static str {
        match self {
            Gate::X => "w_x",
            Gate::H => "w_h",
        }
    }
}

/// Layer normalization parameters over `d` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub epsilon: f64,
}

impl LayerNormParams {
    pub fn identity(d: usize, epsilon: f64) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
            epsilon,
        }
    }
}

/// `gain * (v - mean) / sqrt(var + eps) + bias` with the population variance.
pub fn layer_norm(v: &[f64], p: &LayerNormParams) -> Result<Vec<f64>> {
    if v.len() != p.gain.len() || v.len() != p.bias.len() {
        return Err(Error::shape(format!(
            "vector of length {} for layer norm over {}",
            v.len(),
            p.gain.len()
        )));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + p.epsilon).sqrt();
    Ok(v.iter()
        .zip(&p.gain)
        .zip(&p.bias)
        .map(|((x, g), b)| g * (x - mean) * inv + b)
        .collect())
}

/// Token-mean negative log-likelihood and its exponential.
pub fn cross_entropy_perplexity(logits: &Matrix, targets: &[usize]) -> Result<(f64, f64)> {
    let (_, nll) = softmax_nll(logits, targets)?;
    Ok((nll, nll.exp()))
}

/// Recurrent state, one row per batch lane.
#[derive(Debug, Clone, PartialEq)]
pub struct LmState {
    pub h: Matrix,
    pub c: Matrix,
}

impl LmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            h: Matrix::zeros((batch, hidden)),
            c: Matrix::zeros((batch, hidden)),
        }
    }
}

/// Embedding, LN-LSTM cell with two gate stacks, and a dense output
/// projection.
#[derive(Debug, Clone, PartialEq)]
pub struct TTLstmModel {
    config: ModelConfig,
    params: ParamStore,
}

fn uniform_tensor(dims: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Result<DenseTensor> {
    let len = dims.iter().product();
    DenseTensor::new(dims, (0..len).map(|_| rng.random_range(-bound..=bound)).collect())
}

/// Expected parameter names and dims of a gate stack.
fn layer_param_shapes(spec: &LayerSpec, rows: usize, cols: usize, prefix: &str) -> Result<Vec<(String, Vec<usize>)>> {
    Ok(match (spec.kind, &spec.ranks) {
        (Representation::Dense, _) => vec![(format!("{prefix}.weight"), vec![rows, cols])],
        (Representation::Mps, Some(RankChain::Mps { row, col })) => {
            let mut out = Vec::new();
            for (k, &i) in spec.row_dims.iter().enumerate() {
                out.push((format!("{prefix}.row{k}"), vec![row[k], i, row[k + 1]]));
            }
            for (k, &j) in spec.col_dims.iter().enumerate() {
                out.push((format!("{prefix}.col{k}"), vec![col[k], j, col[k + 1]]));
            }
            out
        }
        (Representation::Mpo, Some(RankChain::Mpo(chain))) => spec
            .factorization()?
            .mpo_pairs()?
            .iter()
            .enumerate()
            .map(|(k, &(i, j))| (format!("{prefix}.core{k}"), vec![chain[k], i * j, chain[k + 1]]))
            .collect(),
        _ => return Err(Error::config(format!("{prefix} has an unresolved rank chain"))),
    })
}

impl TTLstmModel {
    /// Resolves the layer specs and initializes every parameter from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (v, e, h) = (config.vocab_size, config.embed, config.hidden);
        let mut config = config;
        config.w_x = config.w_x.resolve(4 * h, e)?;
        config.w_h = config.w_h.resolve(4 * h, h)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.add("embedding", uniform_tensor(vec![v, e], 0.1, &mut rng)?)?;
        for (gate, spec, cols) in [(Gate::X, &config.w_x, e), (Gate::H, &config.w_h, h)] {
            let prefix = gate.prefix();
            let layer_seed = rng.random::<u64>();
            match spec.kind {
                Representation::Dense => {
                    let w = uniform_tensor(vec![4 * h, cols], 1.0 / (cols as f64).sqrt(), &mut rng)?;
                    params.add(format!("{prefix}.weight"), w)?;
                }
                Representation::Mps => {
                    let Some(RankChain::Mps { row, col }) = spec.ranks.clone() else {
                        unreachable!("resolved above")
                    };
                    let init = spec.init.unwrap_or_default();
                    let t = MpsTrain::new(spec.factorization()?, row, col, &init, layer_seed)?;
                    for (k, core) in t.row_cores().iter().enumerate() {
                        params.add(format!("{prefix}.row{k}"), core.clone())?;
                    }
                    for (k, core) in t.col_cores().iter().enumerate() {
                        params.add(format!("{prefix}.col{k}"), core.clone())?;
                    }
                }
                Representation::Mpo => {
                    let Some(RankChain::Mpo(chain)) = spec.ranks.clone() else {
                        unreachable!("resolved above")
                    };
                    let init = spec.init.unwrap_or_default();
                    let t = MpoTrain::new(spec.factorization()?, chain, &init, layer_seed)?;
                    for (k, core) in t.cores().iter().enumerate() {
                        params.add(format!("{prefix}.core{k}"), (*core).clone())?;
                    }
                }
            }
        }
        for ln in ["ln_x", "ln_h"] {
            params.add(format!("{ln}.gain"), DenseTensor::filled(vec![4 * h], 1.0)?)?;
            params.add(format!("{ln}.bias"), DenseTensor::zeros(vec![4 * h])?)?;
        }
        let mut bias = DenseTensor::zeros(vec![4 * h])?;
        bias.data_mut()[h..2 * h].fill(FORGET_BIAS);
        params.add("bias", bias)?;
        params.add("proj.weight", uniform_tensor(vec![h, v], 1.0 / (h as f64).sqrt(), &mut rng)?)?;
        params.add("proj.bias", DenseTensor::zeros(vec![v])?)?;
        Ok(Self { config, params })
    }

    /// Rebuilds a model from a resolved config and its parameters, checking
    /// every expected name and shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let model = Self { config, params };
        let expected = model.expected_shapes()?;
        if expected.len() != model.params.len() {
            return Err(Error::config(format!(
                "expected {} parameters, found {}",
                expected.len(),
                model.params.len()
            )));
        }
        for (name, dims) in expected {
            match model.params.by_name(&name) {
                Some(p) if p.value.dims() == dims.as_slice() => {}
                Some(p) => {
                    return Err(Error::config(format!(
                        "parameter {name} has dims {:?}, expected {dims:?}",
                        p.value.dims()
                    )))
                }
                None => return Err(Error::config(format!("missing parameter {name}"))),
            }
        }
        Ok(model)
    }

    fn expected_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let (v, e, h) = (self.config.vocab_size, self.config.embed, self.config.hidden);
        let mut out = vec![("embedding".to_string(), vec![v, e])];
        out.extend(layer_param_shapes(&self.config.w_x, 4 * h, e, "w_x")?);
        out.extend(layer_param_shapes(&self.config.w_h, 4 * h, h, "w_h")?);
        for ln in ["ln_x", "ln_h"] {
            out.push((format!("{ln}.gain"), vec![4 * h]));
            out.push((format!("{ln}.bias"), vec![4 * h]));
        }
        out.push(("bias".into(), vec![4 * h]));
        out.push(("proj.weight".into(), vec![h, v]));
        out.push(("proj.bias".into(), vec![v]));
        Ok(out)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ParamStore) {
        (self.config, self.params)
    }

    fn id(&self, name: &str) -> ParamId {
        self.params.id(name).unwrap_or_else(|| panic!("parameter {name} is registered at construction"))
    }

    pub fn layer_spec(&self, gate: Gate) -> &LayerSpec {
        match gate {
            Gate::X => &self.config.w_x,
            Gate::H => &self.config.w_h,
        }
    }

    /// `(4H, E)` or `(4H, H)`.
    pub fn gate_shape(&self, gate: Gate) -> (usize, usize) {
        let h = self.config.hidden;
        match gate {
            Gate::X => (4 * h, self.config.embed),
            Gate::H => (4 * h, h),
        }
    }

    fn layer_ids(&self, gate: Gate) -> Result<Vec<ParamId>> {
        let (rows, cols) = self.gate_shape(gate);
        Ok(layer_param_shapes(self.layer_spec(gate), rows, cols, gate.prefix())?
            .into_iter()
            .map(|(name, _)| self.id(&name))
            .collect())
    }

    pub fn mps(&self, gate: Gate) -> Result<MpsTrain> {
        let spec = self.layer_spec(gate);
        let ids = self.layer_ids(gate)?;
        let n = spec.row_dims.len();
        let cores: Vec<DenseTensor> = ids.iter().map(|&id| self.params.get(id).value.clone()).collect();
        let (rows, cols) = cores.split_at(n);
        MpsTrain::from_cores(spec.factorization()?, rows.to_vec(), cols.to_vec())
    }

    pub fn mpo(&self, gate: Gate) -> Result<MpoTrain> {
        let spec = self.layer_spec(gate);
        let cores = self
            .layer_ids(gate)?
            .iter()
            .map(|&id| self.params.get(id).value.clone())
            .collect();
        MpoTrain::from_cores(spec.factorization()?, cores)
    }

    /// Dense `4H x M` gate matrix.
    pub fn gate_weight(&self, gate: Gate) -> Result<Matrix> {
        match self.layer_spec(gate).kind {
            Representation::Dense => Ok(self.params.get(self.layer_ids(gate)?[0]).as_matrix()),
            Representation::Mps => self.mps(gate)?.reconstruct(),
            Representation::Mpo => self.mpo(gate)?.reconstruct(),
        }
    }

    /// Parameters held by the gate stack.
    pub fn gate_param_count(&self, gate: Gate) -> Result<usize> {
        Ok(self
            .layer_ids(gate)?
            .iter()
            .map(|&id| self.params.get(id).value.len())
            .sum())
    }

    /// Dense gate-stack parameters over represented gate-stack parameters.
    pub fn compression_rate(&self) -> Result<f64> {
        let (r, e) = self.gate_shape(Gate::X);
        let full = r * e + r * self.config.hidden;
        let tt = self.gate_param_count(Gate::X)? + self.gate_param_count(Gate::H)?;
        crate::contract::compression_rate(full, tt)
    }

    /// Same network with both gate stacks stored as dense matrices.
    pub fn densified(&self) -> Result<TTLstmModel> {
        let mut config = self.config.clone();
        config.w_x = LayerSpec::dense();
        config.w_h = LayerSpec::dense();
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            if p.name.starts_with("w_x.") || p.name.starts_with("w_h.") {
                continue;
            }
            if p.name == "ln_x.gain" {
                let (r, e) = self.gate_shape(Gate::X);
                let (_, hc) = self.gate_shape(Gate::H);
                let wx = self.gate_weight(Gate::X)?;
                let wh = self.gate_weight(Gate::H)?;
                params.add("w_x.weight", DenseTensor::from_matrix(&wx, vec![r, e])?)?;
                params.add("w_h.weight", DenseTensor::from_matrix(&wh, vec![r, hc])?)?;
            }
            params.add(p.name.clone(), p.value.clone())?;
        }
        Self::from_parts(config, params)
    }

    /// Inference copy with `F`/`G` built for MPS stacks and MPO stacks
    /// reconstructed once.
    pub fn freeze(&self) -> Result<FrozenModel> {
        FrozenModel::new(self, false)
    }

    /// Inference copy with every gate stack held as a dense matrix.
    pub fn freeze_dense(&self) -> Result<FrozenModel> {
        FrozenModel::new(self, true)
    }
}

/// Gate stack prepared on a tape.
#[derive(Debug, Clone, Copy)]
pub enum PreparedLinear {
    Dense(Var),
    /// `F` (`N x r`) and `G^T` (`r x M`).
    Mps { f: Var, gt: Var },
    Mpo(Var),
}

impl PreparedLinear {
    /// Records the gate stack of `model` on `tape`. MPS stacks contract their
    /// cores into `F` and `G^T`; MPO stacks are reconstructed.
    pub fn record(model: &TTLstmModel, gate: Gate, tape: &mut Tape) -> Result<Self> {
        let spec = model.layer_spec(gate);
        let ids = model.layer_ids(gate)?;
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(model.params(), id)).collect();
        let dims: Vec<Vec<usize>> = ids.iter().map(|&id| model.params().get(id).value.dims().to_vec()).collect();
        match spec.kind {
            Representation::Dense => Ok(PreparedLinear::Dense(vars[0])),
            Representation::Mps => {
                let n = spec.row_dims.len();
                let f = chain_left(tape, &vars[..n], &dims[..n])?;
                let gt = chain_right(tape, &vars[n..], &dims[n..])?;
                Ok(PreparedLinear::Mps { f, gt })
            }
            Representation::Mpo => {
                let fused = chain_left(tape, &vars, &dims)?;
                let fact = spec.factorization()?;
                let (chained, axes) = MpoTrain::unfuse_permutation(&fact)?;
                let w = tape.permute(fused, &chained, &axes, fact.rows(), fact.cols())?;
                Ok(PreparedLinear::Mpo(w))
            }
        }
    }

    /// `X W^T` for a batch `X` of shape `B x M`.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match *self {
            PreparedLinear::Dense(w) | PreparedLinear::Mpo(w) => tape.matmul_t(x, w, false, true),
            PreparedLinear::Mps { f, gt } => {
                let t = tape.matmul_t(x, gt, false, true)?;
                tape.matmul_t(t, f, false, true)
            }
        }
    }

    /// The dense `N x M` weight as a tape node.
    pub fn weight(&self, tape: &mut Tape) -> Result<Var> {
        match *self {
            PreparedLinear::Dense(w) | PreparedLinear::Mpo(w) => Ok(w),
            PreparedLinear::Mps { f, gt } => tape.matmul(f, gt),
        }
    }
}

/// Contracts cores from the left open boundary: returns the `(prod, r)`
/// matrix over the fused middle indices.
fn chain_left(tape: &mut Tape, cores: &[Var], dims: &[Vec<usize>]) -> Result<Var> {
    let mut acc = tape.reshape(cores[0], dims[0][1], dims[0][2])?;
    let mut rows = dims[0][1];
    for (&core, d) in cores[1..].iter().zip(&dims[1..]) {
        let prod = tape.matmul(acc, core)?;
        rows *= d[1];
        acc = tape.reshape(prod, rows, d[2])?;
    }
    Ok(acc)
}

/// Contracts cores from the right open boundary: returns the `(r, prod)`
/// matrix over the fused middle indices.
fn chain_right(tape: &mut Tape, cores: &[Var], dims: &[Vec<usize>]) -> Result<Var> {
    let last = dims.len() - 1;
    let mut acc = cores[last];
    let mut cols = dims[last][1];
    for (&core, d) in cores[..last].iter().zip(&dims[..last]).rev() {
        let left = tape.reshape(core, d[0] * d[1], d[2])?;
        let prod = tape.matmul(left, acc)?;
        cols *= d[1];
        acc = tape.reshape(prod, d[0], cols)?;
    }
    Ok(acc)
}

/// Parameter handles of one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct CellVars {
    pub w_x: PreparedLinear,
    pub w_h: PreparedLinear,
    ln_x: (Var, Var),
    ln_h: (Var, Var),
    bias: Var,
}

impl CellVars {
    pub fn record(model: &TTLstmModel, tape: &mut Tape) -> Result<Self> {
        let p = model.params();
        let w_x = PreparedLinear::record(model, Gate::X, tape)?;
        let w_h = PreparedLinear::record(model, Gate::H, tape)?;
        Ok(Self {
            w_x,
            w_h,
            ln_x: (tape.param(p, model.id("ln_x.gain")), tape.param(p, model.id("ln_x.bias"))),
            ln_h: (tape.param(p, model.id("ln_h.gain")), tape.param(p, model.id("ln_h.bias"))),
            bias: tape.param(p, model.id("bias")),
        })
    }

    pub fn prepared(&self, gate: Gate) -> PreparedLinear {
        match gate {
            Gate::X => self.w_x,
            Gate::H => self.w_h,
        }
    }
}

/// One LSTM step on a tape: returns `(h', c')`.
pub fn lstm_step_tape(
    tape: &mut Tape,
    cell: &CellVars,
    hidden: usize,
    eps: f64,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let ax = cell.w_x.apply(tape, x)?;
    let ax = tape.normalize_blocks(ax, hidden, eps)?;
    let ax = tape.mul_row(ax, cell.ln_x.0)?;
    let ax = tape.add_row(ax, cell.ln_x.1)?;
    let ah = cell.w_h.apply(tape, h)?;
    let ah = tape.normalize_blocks(ah, hidden, eps)?;
    let ah = tape.mul_row(ah, cell.ln_h.0)?;
    let ah = tape.add_row(ah, cell.ln_h.1)?;
    let a = tape.add(ax, ah)?;
    let a = tape.add_row(a, cell.bias)?;
    let i = tape.columns(a, 0, hidden)?;
    let f = tape.columns(a, hidden, hidden)?;
    let g = tape.columns(a, 2 * hidden, hidden)?;
    let o = tape.columns(a, 3 * hidden, hidden)?;
    let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Result of [`forward_tape`].
#[derive(Debug, Clone)]
pub struct TapeForward {
    /// `(T B) x V` logits, rows in time-major order `t * B + b`.
    pub logits: Var,
    pub cell: CellVars,
    /// Final state, detached from the tape.
    pub state: LmState,
}

/// Flattens a `B x T` array into the time-major order used for logits.
pub fn time_major(ids: ArrayView2<usize>) -> Vec<usize> {
    ids.t().iter().copied().collect()
}

/// Records embedding, `T` unrolled steps and the output projection for a
/// `B x T` batch of token ids starting from `state`.
pub fn forward_tape(
    model: &TTLstmModel,
    tape: &mut Tape,
    inputs: ArrayView2<usize>,
    state: &LmState,
) -> Result<TapeForward> {
    let cfg = model.config();
    let (b, t) = inputs.dim();
    if state.h.dim() != (b, cfg.hidden) || state.c.dim() != (b, cfg.hidden) {
        return Err(Error::shape("state does not match the batch"));
    }
    if let Some(&bad) = inputs.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Vocab(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let p = model.params();
    let emb = tape.param(p, model.id("embedding"));
    let cell = CellVars::record(model, tape)?;
    let mut h = tape.constant(state.h.clone());
    let mut c = tape.constant(state.c.clone());
    let mut outputs = Vec::with_capacity(t);
    for step in 0..t {
        let ids: Vec<usize> = inputs.column(step).to_vec();
        let x = tape.gather(emb, &ids)?;
        (h, c) = lstm_step_tape(tape, &cell, cfg.hidden, cfg.ln_eps, x, h, c)?;
        outputs.push(h);
    }
    let hs = tape.concat_rows(&outputs)?;
    let proj = tape.param(p, model.id("proj.weight"));
    let proj_b = tape.param(p, model.id("proj.bias"));
    let logits = tape.matmul(hs, proj)?;
    let logits = tape.add_row(logits, proj_b)?;
    let state = LmState {
        h: tape.value(h).clone(),
        c: tape.value(c).clone(),
    };
    Ok(TapeForward { logits, cell, state })
}

/// Runs a `B x T` batch from a zero state and returns `B x T x V` logits with
/// the recorded tape.
pub fn forward_lm(model: &TTLstmModel, tokens: ArrayView2<usize>) -> Result<(Array3<f64>, Tape, TapeForward)> {
    let mut tape = Tape::new();
    let (b, t) = tokens.dim();
    let state = LmState::zeros(b, model.config().hidden);
    let fwd = forward_tape(model, &mut tape, tokens, &state)?;
    let flat = tape.value(fwd.logits);
    let v = flat.ncols();
    let mut out = Array3::zeros((b, t, v));
    for step in 0..t {
        for lane in 0..b {
            out.slice_mut(s![lane, step, ..]).assign(&flat.row(step * b + lane));
        }
    }
    Ok((out, tape, fwd))
}

/// Gate stack ready for inference.
#[derive(Debug, Clone)]
pub enum FrozenLinear {
    Dense(Matrix),
    Mps(FactorPair),
    /// Reconstructed MPO matrix, reused by every step of a pass.
    Mpo(Matrix),
}

impl FrozenLinear {
    /// Maps each row of `x` (`B x M`) to a row of the `B x N` result.
    pub fn apply_rows(&self, x: ArrayView2<f64>) -> Result<Matrix> {
        match self {
            FrozenLinear::Dense(w) | FrozenLinear::Mpo(w) => {
                if x.ncols() != w.ncols() {
                    return Err(Error::shape("input width does not match the gate stack"));
                }
                Ok(x.dot(&w.t()))
            }
            FrozenLinear::Mps(fp) => mps_matmul_rows(fp, x),
        }
    }
}

/// Read-only model for evaluation and timing.
#[derive(Debug, Clone)]
pub struct FrozenModel {
    pub hidden: usize,
    pub vocab_size: usize,
    pub ln_eps: f64,
    pub embedding: Matrix,
    pub w_x: FrozenLinear,
    pub w_h: FrozenLinear,
    pub ln_x: LayerNormParams,
    pub ln_h: LayerNormParams,
    pub bias: Vec<f64>,
    pub proj: Matrix,
    pub proj_bias: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-row, per-block layer norm of `a` in place.
fn layer_norm_rows(a: &mut Matrix, block: usize, p: &LayerNormParams) {
    for mut row in a.axis_iter_mut(Axis(0)) {
        for start in (0..row.len()).step_by(block) {
            let mut seg = row.slice_mut(s![start..start + block]);
            let n = block as f64;
            let mean = seg.sum() / n;
            let var = seg.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + p.epsilon).sqrt();
            for (k, v) in seg.iter_mut().enumerate() {
                *v = p.gain[start + k] * (*v - mean) * inv + p.bias[start + k];
            }
        }
    }
}

impl FrozenModel {
    fn new(model: &TTLstmModel, dense: bool) -> Result<Self> {
        let cfg = model.config();
        let p = model.params();
        let vec_of = |name: &str| p.get(model.id(name)).value.data().to_vec();
        let freeze = |gate: Gate| -> Result<FrozenLinear> {
            if dense {
                return Ok(FrozenLinear::Dense(model.gate_weight(gate)?));
            }
            Ok(match model.layer_spec(gate).kind {
                Representation::Dense => FrozenLinear::Dense(model.gate_weight(gate)?),
                Representation::Mps => FrozenLinear::Mps(build_factor_pair(&model.mps(gate)?)?),
                Representation::Mpo => FrozenLinear::Mpo(model.mpo(gate)?.reconstruct()?),
            })
        };
        Ok(Self {
            hidden: cfg.hidden,
            vocab_size: cfg.vocab_size,
            ln_eps: cfg.ln_eps,
            embedding: p.get(model.id("embedding")).as_matrix(),
            w_x: freeze(Gate::X)?,
            w_h: freeze(Gate::H)?,
            ln_x: LayerNormParams {
                gain: vec_of("ln_x.gain"),
                bias: vec_of("ln_x.bias"),
                epsilon: cfg.ln_eps,
            },
            ln_h: LayerNormParams {
                gain: vec_of("ln_h.gain"),
                bias: vec_of("ln_h.bias"),
                epsilon: cfg.ln_eps,
            },
            bias: vec_of("bias"),
            proj: p.get(model.id("proj.weight")).as_matrix(),
            proj_bias: vec_of("proj.bias"),
        })
    }

    /// One step for a batch of input rows `x` (`B x E`).
    pub fn lstm_step(&self, x: ArrayView2<f64>, state: &LmState) -> Result<LmState> {
        let hd = self.hidden;
        let mut ax = self.w_x.apply_rows(x)?;
        layer_norm_rows(&mut ax, hd, &self.ln_x);
        let mut ah = self.w_h.apply_rows(state.h.view())?;
        layer_norm_rows(&mut ah, hd, &self.ln_h);
        let mut a = ax + ah;
        for mut row in a.axis_iter_mut(Axis(0)) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        let mut next = LmState::zeros(x.nrows(), hd);
        for lane in 0..x.nrows() {
            let row = a.row(lane);
            for k in 0..hd {
                let i = sigmoid(row[k]);
                let f = sigmoid(row[hd + k]);
                let g = row[2 * hd + k].tanh();
                let o = sigmoid(row[3 * hd + k]);
                let c = f * state.c[[lane, k]] + i * g;
                next.c[[lane, k]] = c;
                next.h[[lane, k]] = o * c.tanh();
            }
        }
        Ok(next)
    }

    /// Logits for a `B x T` window, rows in time-major order, and the state
    /// after the window.
    pub fn forward_window(&self, inputs: ArrayView2<usize>, state: &LmState) -> Result<(Matrix, LmState)> {
        let (b, t) = inputs.dim();
        if let Some(&bad) = inputs.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::Vocab(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let mut state = state.clone();
        let mut hs = Matrix::zeros((b * t, self.hidden));
        for step in 0..t {
            let ids: Vec<usize> = inputs.column(step).to_vec();
            let x = self.embedding.select(Axis(0), &ids);
            state = self.lstm_step(x.view(), &state)?;
            hs.slice_mut(s![step * b..(step + 1) * b, ..]).assign(&state.h);
        }
        let mut logits = hs.dot(&self.proj);
        for mut row in logits.axis_iter_mut(Axis(0)) {
            for (v, pb) in row.iter_mut().zip(&self.proj_bias) {
                *v += pb;
            }
        }
        Ok((logits, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn small(kind: Representation, seed: u64) -> TTLstmModel {
        let mut cfg = ModelConfig::dense(11, 4, 4);
        let spec = match kind {
            Representation::Dense => LayerSpec::dense(),
            Representation::Mps => LayerSpec::train(TrainKind::Mps, vec![4, 4], vec![2, 2], 3),
            Representation::Mpo => LayerSpec::train(TrainKind::Mpo, vec![4, 4], vec![2, 2], 3),
        };
        cfg.w_x = spec.clone();
        cfg.w_h = spec;
        TTLstmModel::new(cfg, seed).unwrap()
    }

    fn zeroed(mut m: TTLstmModel) -> TTLstmModel {
        for p in m.params_mut().iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        m
    }

    fn max_rel(a: &Matrix, b: &Matrix) -> f64 {
        let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn layer_norm_examples() {
        let p = LayerNormParams::identity(3, 0.0);
        let out = layer_norm(&[1.0, 2.0, 3.0], &p).unwrap();
        let z = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((out[0] + z).abs() < 1e-12 && out[1].abs() < 1e-12 && (out[2] - z).abs() < 1e-12);

        let flat = layer_norm(&[5.0; 4], &LayerNormParams::identity(4, 1e-5)).unwrap();
        assert!(flat.iter().all(|v| v.abs() < 1e-12));
        assert!(matches!(layer_norm(&[1.0; 3], &LayerNormParams::identity(4, 1e-5)), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_standardizes() {
        let v: Vec<f64> = (0..37).map(|k| ((k * 7919) % 101) as f64 * 0.37 - 11.0).collect();
        let out = layer_norm(&v, &LayerNormParams::identity(37, 0.0)).unwrap();
        let mean = out.iter().sum::<f64>() / 37.0;
        let var = out.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 37.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn layer_norm_ignores_shifts(v in prop::collection::vec(-50.0f64..50.0, 2..20), c in -100.0f64..100.0) {
            let p = LayerNormParams::identity(v.len(), 1e-5);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let (a, b) = (layer_norm(&v, &p).unwrap(), layer_norm(&shifted, &p).unwrap());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10 * (1.0 + x.abs()).max(1.0) * (1.0 + c.abs()));
            }
        }

        #[test]
        fn cell_state_grows_by_at_most_one(seed in 0u64..1000, c0 in prop::collection::vec(-3.0f64..3.0, 4)) {
            let frozen = small(Representation::Mps, seed).freeze().unwrap();
            let mut state = LmState::zeros(1, 4);
            state.c.row_mut(0).assign(&ndarray::Array1::from(c0.clone()));
            state.h.fill(0.3);
            let x = Array2::from_elem((1, 4), 0.7);
            let next = frozen.lstm_step(x.view(), &state).unwrap();
            for (k, c) in c0.iter().enumerate() {
                prop_assert!(next.c[[0, k]].abs() <= c.abs() + 1.0);
            }
        }
    }

    #[test]
    fn zero_model_step_closed_forms() {
        let frozen = zeroed(small(Representation::Dense, 0)).freeze().unwrap();
        let x = Array2::from_elem((1, 4), 0.5);
        let next = frozen.lstm_step(x.view(), &LmState::zeros(1, 4)).unwrap();
        assert!(next.h.iter().chain(next.c.iter()).all(|&v| v == 0.0));

        let mut state = LmState::zeros(1, 4);
        state.c = Array2::from_shape_vec((1, 4), vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let next = frozen.lstm_step(x.view(), &state).unwrap();
        for k in 0..4 {
            let c0 = state.c[[0, k]];
            assert!((next.c[[0, k]] - 0.5 * c0).abs() < 1e-15);
            assert!((next.h[[0, k]] - 0.5 * (0.5 * c0).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_model_logits_equal_projection_bias() {
        let mut m = zeroed(small(Representation::Dense, 0));
        let id = m.params().id("proj.bias").unwrap();
        for (k, v) in m.params_mut().get_mut(id).value.data_mut().iter_mut().enumerate() {
            *v = k as f64 * 0.1;
        }
        let tokens = Array2::from_shape_vec((3, 1), vec![0, 5, 10]).unwrap();
        let (logits, _, _) = forward_lm(&m, tokens.view()).unwrap();
        for b in 0..3 {
            for v in 0..11 {
                assert_eq!(logits[[b, 0, v]], v as f64 * 0.1);
            }
        }
    }

    #[test]
    fn identical_rows_give_identical_logits() {
        let m = small(Representation::Mps, 4);
        let tokens = Array2::from_shape_fn((3, 5), |(_, t)| (t * 3) % 11);
        let (logits, _, _) = forward_lm(&m, tokens.view()).unwrap();
        for b in 1..3 {
            assert_eq!(logits.slice(s![b, .., ..]), logits.slice(s![0, .., ..]));
        }
    }

    #[test]
    fn out_of_range_token_is_a_vocab_error() {
        let m = small(Representation::Dense, 0);
        let tokens = Array2::from_elem((1, 2), 11usize);
        assert!(matches!(forward_lm(&m, tokens.view()), Err(Error::Vocab(_))));
    }

    #[test]
    fn representations_agree_with_their_dense_reconstruction() {
        let tokens = Array2::from_shape_fn((2, 6), |(b, t)| (b * 5 + t * 7) % 11);
        for kind in [Representation::Mps, Representation::Mpo] {
            let m = small(kind, 9);
            let dense = m.densified().unwrap();
            let state = LmState::zeros(2, 4);
            let (a, _) = m.freeze().unwrap().forward_window(tokens.view(), &state).unwrap();
            let (b, _) = dense.freeze().unwrap().forward_window(tokens.view(), &state).unwrap();
            assert!(max_rel(&a, &b) < 1e-10, "{kind}");

            let mut tape = Tape::new();
            let fwd = forward_tape(&m, &mut tape, tokens.view(), &state).unwrap();
            assert!(max_rel(tape.value(fwd.logits), &b) < 1e-10, "{kind}");
        }
    }

    #[test]
    fn frozen_dense_matches_frozen_train() {
        let m = small(Representation::Mps, 2);
        let tokens = Array2::from_shape_fn((2, 3), |(b, t)| (b + t) % 11);
        let state = LmState::zeros(2, 4);
        let (a, _) = m.freeze().unwrap().forward_window(tokens.view(), &state).unwrap();
        let (b, _) = m.freeze_dense().unwrap().forward_window(tokens.view(), &state).unwrap();
        assert!(max_rel(&a, &b) < 1e-10);
    }

    #[test]
    fn uniform_predictor_perplexity_is_vocab_size() {
        let (nll, ppl) = cross_entropy_perplexity(&Matrix::zeros((7, 10)), &[0, 1, 2, 3, 4, 5, 6]).unwrap();
        assert!((nll - 10f64.ln()).abs() < 1e-15);
        assert!((ppl - 10.0).abs() < 1e-12);

        let mut sharp = Matrix::zeros((2, 10));
        sharp[[0, 3]] = 60.0;
        sharp[[1, 7]] = 60.0;
        let (_, ppl) = cross_entropy_perplexity(&sharp, &[3, 7]).unwrap();
        assert!((ppl - 1.0).abs() < 1e-20f64.max(1e-12));
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let mut cfg = ModelConfig::dense(50, 8, 8);
        cfg.w_x = LayerSpec::train(TrainKind::Mps, vec![4, 8], vec![2, 4], 2);
        let m = TTLstmModel::new(cfg, 3).unwrap();
        let tokens = Array2::from_shape_fn((4, 50), |(b, t)| (b * 131 + t * 17 + t * t) % 50);
        let (logits, _) = m.freeze().unwrap().forward_window(tokens.view(), &LmState::zeros(4, 8)).unwrap();
        let targets: Vec<usize> = (0..200).map(|k| (k * 37 + 11) % 50).collect();
        let (_, ppl) = cross_entropy_perplexity(&logits, &targets).unwrap();
        assert!((ppl - 50.0).abs() < 5.0, "{ppl}");
    }

    #[test]
    fn desk_configuration_compression() {
        let mut cfg = ModelConfig::dense(100, 64, 64);
        cfg.w_x = LayerSpec::train(TrainKind::Mps, vec![16, 16], vec![8, 8], 19);
        cfg.w_h = cfg.w_x.clone();
        let m = TTLstmModel::new(cfg, 0).unwrap();
        assert_eq!(m.gate_param_count(Gate::X).unwrap(), 9120);
        assert!((m.compression_rate().unwrap() - 16384.0 / 9120.0).abs() < 1e-12);
        assert_eq!(small(Representation::Dense, 0).compression_rate().unwrap(), 1.0);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let m = small(Representation::Dense, 0);
        let b = m.params().by_name("bias").unwrap().value.data();
        assert!(b[..4].iter().all(|&v| v == 0.0));
        assert!(b[4..8].iter().all(|&v| v == FORGET_BIAS));
        assert!(b[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_factorization_is_a_config_error() {
        let mut cfg = ModelConfig::dense(10, 4, 4);
        cfg.w_x = LayerSpec::train(TrainKind::Mps, vec![4, 2], vec![2, 2], 2);
        assert!(matches!(TTLstmModel::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn from_parts_checks_parameters() {
        let m = small(Representation::Mps, 1);
        let (cfg, params) = m.clone().into_parts();
        assert_eq!(TTLstmModel::from_parts(cfg.clone(), params).unwrap(), m);
        let mut fewer = ParamStore::new();
        fewer.add("embedding", DenseTensor::zeros(vec![11, 4]).unwrap()).unwrap();
        assert!(matches!(TTLstmModel::from_parts(cfg, fewer), Err(Error::Config(_))));
    }

    #[test]
    fn target_rate_resolves_to_a_rank() {
        let mut cfg = ModelConfig::dense(10, 64, 64);
        cfg.w_x = LayerSpec {
            target_rate: Some(1.8),
            rank: None,
            ..LayerSpec::train(TrainKind::Mps, vec![16, 16], vec![8, 8], 1)
        };
        let m = TTLstmModel::new(cfg, 0).unwrap();
        let r = m.config().w_x.ranks.as_ref().unwrap().max_rank();
        let rate = 16384.0 / m.gate_param_count(Gate::X).unwrap() as f64;
        assert!(r > 1 && (rate - 1.8).abs() < 0.45, "{r} {rate}");
    }
}
