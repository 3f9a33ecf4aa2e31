//! Tensor-train representations of a weight matrix.
//!
//! An `N x M` matrix with `N = I_1 ... I_n` and `M = J_1 ... J_m` is viewed as
//! a tensor with `n + m` axes. The MPS form keeps row and column factors on
//! separate cores, `A^(1) .. A^(n)` followed by `B^(1) .. B^(m)`, linked by a
//! shared middle bond `r_c0`. The MPO form requires `n == m` and fuses each row
//! factor with a column factor, `h_k = i_k + (j_k - 1) I_k`, on a single core.
//!
//! ```text
//!   MPS:  A1 - A2 - ... - An = B1 - B2 - ... - Bm
//!         |    |          |    |    |          |
//!         i1   i2         in   j1   j2         jm
//!
//!   MPO:  C1 - C2 - ... - Cn
//!         |    |          |
//!       (i1,j1)(i2,j2)  (in,jn)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{mode31_product, DenseTensor, Matrix};

/// Largest `N * M` that [`TensorTrain::reconstruct`] will materialize by
/// default.
pub const DEFAULT_MATERIALIZATION_CAP: usize = 1 << 26;

/// Factorizations `N = I_1 ... I_n` and `M = J_1 ... J_m` embedding a matrix
/// into a tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeFactorization {
    row_dims: Vec<usize>,
    col_dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    col_permutation: Option<Vec<usize>>,
}

impl ShapeFactorization {
    pub fn new(row_dims: Vec<usize>, col_dims: Vec<usize>) -> Result<Self> {
        let fact = Self {
            row_dims,
            col_dims,
            col_permutation: None,
        };
        fact.validate()?;
        Ok(fact)
    }

    /// Pairs row factor `k` with column factor `perm[k]` when fusing cores
    /// for an MPO.
    pub fn with_col_permutation(mut self, perm: Vec<usize>) -> Result<Self> {
        self.col_permutation = Some(perm);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.row_dims.is_empty() || self.col_dims.is_empty() {
            return Err(Error::shape("factorizations need at least one factor"));
        }
        if self.row_dims.contains(&0) || self.col_dims.contains(&0) {
            return Err(Error::shape("factors must be positive"));
        }
        if let Some(perm) = &self.col_permutation {
            let m = self.col_dims.len();
            let mut seen = vec![false; m];
            for &p in perm {
                if p >= m || seen[p] {
                    return Err(Error::shape(format!(
                        "{perm:?} is not a permutation of the {m} column factors"
                    )));
                }
                seen[p] = true;
            }
            if perm.len() != m {
                return Err(Error::shape(format!(
                    "{perm:?} is not a permutation of the {m} column factors"
                )));
            }
        }
        Ok(())
    }

    pub fn row_dims(&self) -> &[usize] {
        &self.row_dims
    }

    pub fn col_dims(&self) -> &[usize] {
        &self.col_dims
    }

    /// `N`.
    pub fn rows(&self) -> usize {
        self.row_dims.iter().product()
    }

    /// `M`.
    pub fn cols(&self) -> usize {
        self.col_dims.iter().product()
    }

    pub fn col_permutation(&self) -> Vec<usize> {
        self.col_permutation
            .clone()
            .unwrap_or_else(|| (0..self.col_dims.len()).collect())
    }

    /// `(I_k, J_pi(k))` for every MPO core.
    pub fn mpo_pairs(&self) -> Result<Vec<(usize, usize)>> {
        if self.row_dims.len() != self.col_dims.len() {
            return Err(Error::shape(format!(
                "MPO needs as many row factors as column factors, got {} and {}",
                self.row_dims.len(),
                self.col_dims.len()
            )));
        }
        let perm = self.col_permutation();
        Ok(self
            .row_dims
            .iter()
            .zip(&perm)
            .map(|(&i, &p)| (i, self.col_dims[p]))
            .collect())
    }

    /// Column permutation minimizing the largest fused extent `I_k J_pi(k)`,
    /// ties broken by the sum of fused extents. Exhaustive, so only for small
    /// factor counts.
    pub fn best_mpo_permutation(&self) -> Result<Vec<usize>> {
        let n = self.row_dims.len();
        if n != self.col_dims.len() {
            return Err(Error::shape("MPO needs as many row factors as column factors"));
        }
        if n > 8 {
            return Err(Error::domain("permutation search is limited to 8 factors"));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        let score = |p: &[usize]| {
            let fused: Vec<usize> = (0..n).map(|k| self.row_dims[k] * self.col_dims[p[k]]).collect();
            (*fused.iter().max().unwrap(), fused.iter().sum::<usize>())
        };
        let mut best = (score(&perm), perm.clone());
        // Heap's algorithm.
        let mut c = vec![0usize; n];
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                let s = score(&perm);
                if s < best.0 {
                    best = (s, perm.clone());
                }
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        Ok(best.1)
    }
}

/// Which tensor-train layout a weight uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainKind {
    Mps,
    Mpo,
}

impl std::fmt::Display for TrainKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainKind::Mps => "mps",
            TrainKind::Mpo => "mpo",
        })
    }
}

/// Inner-rank chain of a tensor train, boundary ranks included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankChain {
    /// `row = (r_r0 .. r_rn)`, `col = (r_c0 .. r_cm)`.
    Mps { row: Vec<usize>, col: Vec<usize> },
    /// `(r_0 .. r_n)`.
    Mpo(Vec<usize>),
}

impl RankChain {
    /// Every inner rank equal to `r`.
    pub fn uniform(kind: TrainKind, fact: &ShapeFactorization, r: usize) -> Self {
        match kind {
            TrainKind::Mps => {
                let n = fact.row_dims().len();
                let m = fact.col_dims().len();
                let mut row = vec![r; n + 1];
                row[0] = 1;
                let mut col = vec![r; m + 1];
                col[m] = 1;
                RankChain::Mps { row, col }
            }
            TrainKind::Mpo => {
                let n = fact.row_dims().len();
                let mut chain = vec![r; n + 1];
                chain[0] = 1;
                chain[n] = 1;
                RankChain::Mpo(chain)
            }
        }
    }

    pub fn kind(&self) -> TrainKind {
        match self {
            RankChain::Mps { .. } => TrainKind::Mps,
            RankChain::Mpo(_) => TrainKind::Mpo,
        }
    }

    /// `R`, the largest rank anywhere in the chain.
    pub fn max_rank(&self) -> usize {
        match self {
            RankChain::Mps { row, col } => row.iter().chain(col).copied().max().unwrap_or(1),
            RankChain::Mpo(chain) => chain.iter().copied().max().unwrap_or(1),
        }
    }

    /// Rank on the left bond of every core, in core order.
    pub fn entering_bonds(&self) -> Vec<usize> {
        match self {
            RankChain::Mps { row, col } => row[..row.len() - 1]
                .iter()
                .chain(&col[..col.len() - 1])
                .copied()
                .collect(),
            RankChain::Mpo(chain) => chain[..chain.len() - 1].to_vec(),
        }
    }

    /// Checks boundary conditions and chain lengths against `fact`.
    pub fn validate(&self, fact: &ShapeFactorization) -> Result<()> {
        match self {
            RankChain::Mps { row, col } => {
                let n = fact.row_dims().len();
                let m = fact.col_dims().len();
                if row.len() != n + 1 || col.len() != m + 1 {
                    return Err(Error::Rank(format!(
                        "expected {} row and {} column ranks, got {} and {}",
                        n + 1,
                        m + 1,
                        row.len(),
                        col.len()
                    )));
                }
                if row[0] != 1 {
                    return Err(Error::Rank(format!("r_r0 must be 1, got {}", row[0])));
                }
                if col[m] != 1 {
                    return Err(Error::Rank(format!("r_cm must be 1, got {}", col[m])));
                }
                if row[n] != col[0] {
                    return Err(Error::Rank(format!(
                        "r_rn ({}) must equal r_c0 ({})",
                        row[n], col[0]
                    )));
                }
                if row.iter().chain(col).any(|&r| r == 0) {
                    return Err(Error::Rank("ranks must be positive".into()));
                }
            }
            RankChain::Mpo(chain) => {
                let n = fact.mpo_pairs()?.len();
                if chain.len() != n + 1 {
                    return Err(Error::Rank(format!(
                        "expected {} ranks, got {}",
                        n + 1,
                        chain.len()
                    )));
                }
                if chain[0] != 1 || chain[n] != 1 {
                    return Err(Error::Rank(format!(
                        "boundary ranks must be 1, got {} and {}",
                        chain[0], chain[n]
                    )));
                }
                if chain.contains(&0) {
                    return Err(Error::Rank("ranks must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Distribution family used to fill cores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// Gaussian cores sized so reconstructed weights have variance `1/sqrt(M)`.
    GaussianVarianceMatched,
    /// Gaussian cores sized so `P(|w| <= B) = 1 - alpha`.
    FlatGaussian,
    /// Uniform cores with the same per-entry variance as `FlatGaussian`.
    FlatUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitScheme {
    pub kind: InitKind,
    /// Target bound `B`; `1/sqrt(M)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    /// Tail mass outside `(-B, B)`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    0.05
}

impl Default for InitScheme {
    fn default() -> Self {
        Self {
            kind: InitKind::FlatUniform,
            bound: None,
            alpha: default_alpha(),
        }
    }
}

impl InitScheme {
    pub fn new(kind: InitKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

/// Per-entry core distribution produced by [`init_params`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitSpread {
    Gaussian { sigma: f64 },
    Uniform { half_width: f64 },
}

impl InitSpread {
    pub fn variance(&self) -> f64 {
        match *self {
            InitSpread::Gaussian { sigma } => sigma * sigma,
            InitSpread::Uniform { half_width } => half_width * half_width / 3.0,
        }
    }

    fn fill(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            InitSpread::Gaussian { sigma } => {
                let dist = Normal::new(0.0, sigma).expect("finite sigma");
                (0..len).map(|_| dist.sample(rng)).collect()
            }
            InitSpread::Uniform { half_width } => {
                let dist = Uniform::new_inclusive(-half_width, half_width).expect("finite bound");
                (0..len).map(|_| dist.sample(rng)).collect()
            }
        }
    }
}

/// Per-entry spread for the cores of a train with `total_cores` cores whose
/// reconstructed weights feed an `M`-wide input.
///
/// `bonds` are the ranks `r_0 .. r_{n-1}` on the left bond of every core, the
/// leading boundary rank of 1 included, so their product is the number of
/// terms summed into each reconstructed weight.
pub fn init_params(
    scheme: &InitScheme,
    fan_in: usize,
    total_cores: usize,
    bonds: &[usize],
) -> Result<InitSpread> {
    if total_cores == 0 || fan_in == 0 {
        return Err(Error::domain("need at least one core and a positive fan-in"));
    }
    if bonds.contains(&0) {
        return Err(Error::domain("ranks must be positive"));
    }
    let n = total_cores as f64;
    let rank_product: f64 = bonds.iter().map(|&r| r as f64).product();
    let m = fan_in as f64;
    match scheme.kind {
        InitKind::GaussianVarianceMatched => {
            let var = rank_product.powf(-1.0 / n) * m.powf(-1.0 / (2.0 * n));
            Ok(InitSpread::Gaussian { sigma: var.sqrt() })
        }
        InitKind::FlatGaussian | InitKind::FlatUniform => {
            if !(scheme.alpha > 0.0 && scheme.alpha < 1.0) {
                return Err(Error::domain(format!(
                    "alpha must lie in (0, 1), got {}",
                    scheme.alpha
                )));
            }
            let bound = scheme.bound.unwrap_or(1.0 / m.sqrt());
            if !(bound > 0.0) || !bound.is_finite() {
                return Err(Error::domain(format!("bound must be positive, got {bound}")));
            }
            let ratio = bound / normal_quantile(1.0 - scheme.alpha / 2.0);
            if scheme.kind == InitKind::FlatGaussian {
                let var = ratio.powf(2.0 / n) * rank_product.powf(-1.0 / n);
                Ok(InitSpread::Gaussian { sigma: var.sqrt() })
            } else {
                let b = 3f64.sqrt() * ratio.powf(1.0 / n) * rank_product.powf(-1.0 / (2.0 * n));
                Ok(InitSpread::Uniform { half_width: b })
            }
        }
    }
}

/// Standard normal quantile function (Wichura's AS 241, PPND16).
#[allow(clippy::excessive_precision)]
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
            + 6.7265770927008700853e4)
            * r
            + 4.5921953931549871457e4)
            * r
            + 1.3731693765509461125e4)
            * r
            + 1.9715909503065514427e3)
            * r
            + 1.3314166789178437745e2)
            * r
            + 3.3871328727963666080e0;
        let den = ((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
            + 3.9307895800092710610e4)
            * r
            + 2.1213794301586595867e4)
            * r
            + 5.3941960214247511077e3)
            * r
            + 6.8718700749205790830e2)
            * r
            + 4.2313330701600911252e1)
            * r
            + 1.0;
        return q * num / den;
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
            + 2.41780725177450611770e-1)
            * r
            + 1.27045825245236838258e0)
            * r
            + 3.64784832476320460504e0)
            * r
            + 5.76949722146069140550e0)
            * r
            + 4.63033784615654529590e0)
            * r
            + 1.42343711074968357734e0;
        let den = ((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
            + 1.51986665636164571966e-2)
            * r
            + 1.48103976427480074590e-1)
            * r
            + 6.89767334985100004550e-1)
            * r
            + 1.67638483018380384940e0)
            * r
            + 2.05319162663775882187e0)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 1.24266094738807843860e-3)
            * r
            + 2.65321895265761230930e-2)
            * r
            + 2.96560571828504891230e-1)
            * r
            + 1.78482653991729133580e0)
            * r
            + 5.46378491116411436990e0)
            * r
            + 6.65790464350110377720e0;
        let den = ((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
            + 1.84631831751005468180e-5)
            * r
            + 7.86869131145613259100e-4)
            * r
            + 1.48753612908506148525e-2)
            * r
            + 1.36929880922735805310e-1)
            * r
            + 5.99832206555887937690e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Behaviour shared by the MPS and MPO layouts.
pub trait TensorTrain {
    fn factorization(&self) -> &ShapeFactorization;

    /// Cores in chain order.
    fn cores(&self) -> Vec<&DenseTensor>;

    fn rank_chain(&self) -> RankChain;

    /// Total number of core entries.
    fn storage_count(&self) -> usize {
        self.cores().iter().map(|c| c.len()).sum()
    }

    /// Dense `N x M` matrix, refused when `N * M` exceeds `cap`.
    fn reconstruct_capped(&self, cap: usize) -> Result<Matrix>;

    fn reconstruct(&self) -> Result<Matrix> {
        self.reconstruct_capped(DEFAULT_MATERIALIZATION_CAP)
    }

    fn rows(&self) -> usize {
        self.factorization().rows()
    }

    fn cols(&self) -> usize {
        self.factorization().cols()
    }
}

fn check_cap(fact: &ShapeFactorization, cap: usize) -> Result<()> {
    let requested = fact.rows().saturating_mul(fact.cols());
    if requested > cap {
        return Err(Error::Capacity { requested, cap });
    }
    Ok(())
}

/// Contracts a chain of rank-3 cores left to right into one `(1, prod, 1)` core.
fn contract_chain<'a>(cores: impl IntoIterator<Item = &'a DenseTensor>) -> Result<DenseTensor> {
    let mut iter = cores.into_iter();
    let mut acc = iter.next().ok_or_else(|| Error::shape("empty train"))?.clone();
    for core in iter {
        acc = mode31_product(&acc, core)?.fuse_middle()?;
    }
    Ok(acc)
}

fn check_core(core: &DenseTensor, expect: [usize; 3], what: &str) -> Result<()> {
    if core.dims() != expect {
        return Err(Error::shape(format!(
            "{what} has dims {:?}, expected {expect:?}",
            core.dims()
        )));
    }
    Ok(())
}

/// MPS tensor train: row cores `A^(k)` of dims `(r_r(k-1), I_k, r_rk)` followed
/// by column cores `B^(k)` of dims `(r_c(k-1), J_k, r_ck)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MpsTrain {
    fact: ShapeFactorization,
    row_ranks: Vec<usize>,
    col_ranks: Vec<usize>,
    row_cores: Vec<DenseTensor>,
    col_cores: Vec<DenseTensor>,
}

impl MpsTrain {
    /// Allocates cores and fills them i.i.d. from `init`, deterministically in
    /// `seed`.
    pub fn new(
        fact: ShapeFactorization,
        row_ranks: Vec<usize>,
        col_ranks: Vec<usize>,
        init: &InitScheme,
        seed: u64,
    ) -> Result<Self> {
        let chain = RankChain::Mps {
            row: row_ranks.clone(),
            col: col_ranks.clone(),
        };
        chain.validate(&fact)?;
        let total = fact.row_dims().len() + fact.col_dims().len();
        let spread = init_params(init, fact.cols(), total, &chain.entering_bonds())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row_cores = fact
            .row_dims()
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let dims = vec![row_ranks[k], i, row_ranks[k + 1]];
                let len = dims.iter().product();
                DenseTensor::new(dims, spread.fill(len, &mut rng))
            })
            .collect::<Result<Vec<_>>>()?;
        let col_cores = fact
            .col_dims()
            .iter()
            .enumerate()
            .map(|(k, &j)| {
                let dims = vec![col_ranks[k], j, col_ranks[k + 1]];
                let len = dims.iter().product();
                DenseTensor::new(dims, spread.fill(len, &mut rng))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            fact,
            row_ranks,
            col_ranks,
            row_cores,
            col_cores,
        })
    }

    /// Wraps existing cores, inferring the rank chain from their extents.
    pub fn from_cores(
        fact: ShapeFactorization,
        row_cores: Vec<DenseTensor>,
        col_cores: Vec<DenseTensor>,
    ) -> Result<Self> {
        if row_cores.len() != fact.row_dims().len() || col_cores.len() != fact.col_dims().len() {
            return Err(Error::shape("core count does not match the factorization"));
        }
        if row_cores.iter().chain(&col_cores).any(|c| c.rank() != 3) {
            return Err(Error::shape("cores must be rank 3"));
        }
        let mut row_ranks: Vec<usize> = row_cores.iter().map(|c| c.dims()[0]).collect();
        row_ranks.push(row_cores.last().unwrap().dims()[2]);
        let mut col_ranks: Vec<usize> = col_cores.iter().map(|c| c.dims()[0]).collect();
        col_ranks.push(col_cores.last().unwrap().dims()[2]);
        RankChain::Mps {
            row: row_ranks.clone(),
            col: col_ranks.clone(),
        }
        .validate(&fact)?;
        for (k, core) in row_cores.iter().enumerate() {
            check_core(
                core,
                [row_ranks[k], fact.row_dims()[k], row_ranks[k + 1]],
                &format!("row core {k}"),
            )?;
        }
        for (k, core) in col_cores.iter().enumerate() {
            check_core(
                core,
                [col_ranks[k], fact.col_dims()[k], col_ranks[k + 1]],
                &format!("column core {k}"),
            )?;
        }
        Ok(Self {
            fact,
            row_ranks,
            col_ranks,
            row_cores,
            col_cores,
        })
    }

    pub fn row_ranks(&self) -> &[usize] {
        &self.row_ranks
    }

    pub fn col_ranks(&self) -> &[usize] {
        &self.col_ranks
    }

    pub fn row_cores(&self) -> &[DenseTensor] {
        &self.row_cores
    }

    pub fn col_cores(&self) -> &[DenseTensor] {
        &self.col_cores
    }

    pub fn row_cores_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.row_cores
    }

    pub fn col_cores_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.col_cores
    }

    /// The shared middle bond `r_c0`.
    pub fn middle_rank(&self) -> usize {
        self.col_ranks[0]
    }
}

impl TensorTrain for MpsTrain {
    fn factorization(&self) -> &ShapeFactorization {
        &self.fact
    }

    fn cores(&self) -> Vec<&DenseTensor> {
        self.row_cores.iter().chain(&self.col_cores).collect()
    }

    fn rank_chain(&self) -> RankChain {
        RankChain::Mps {
            row: self.row_ranks.clone(),
            col: self.col_ranks.clone(),
        }
    }

    fn reconstruct_capped(&self, cap: usize) -> Result<Matrix> {
        check_cap(&self.fact, cap)?;
        // The fused middle axis enumerates (i_1..i_n, j_1..j_m) in colex
        // order, which is the row-major layout of the N x M matrix.
        let full = contract_chain(self.row_cores.iter().chain(&self.col_cores))?;
        full.to_matrix(self.fact.rows(), self.fact.cols())
    }
}

/// MPO tensor train: cores of dims `(r_(k-1), I_k J_pi(k), r_k)` with the fused
/// index `h_k = i_k + (j_k - 1) I_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MpoTrain {
    fact: ShapeFactorization,
    ranks: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    cores: Vec<DenseTensor>,
}

impl MpoTrain {
    pub fn new(fact: ShapeFactorization, ranks: Vec<usize>, init: &InitScheme, seed: u64) -> Result<Self> {
        let pairs = fact.mpo_pairs()?;
        let chain = RankChain::Mpo(ranks.clone());
        chain.validate(&fact)?;
        let spread = init_params(init, fact.cols(), pairs.len(), &chain.entering_bonds())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cores = pairs
            .iter()
            .enumerate()
            .map(|(k, &(i, j))| {
                let dims = vec![ranks[k], i * j, ranks[k + 1]];
                let len = dims.iter().product();
                DenseTensor::new(dims, spread.fill(len, &mut rng))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            fact,
            ranks,
            pairs,
            cores,
        })
    }

    pub fn from_cores(fact: ShapeFactorization, cores: Vec<DenseTensor>) -> Result<Self> {
        let pairs = fact.mpo_pairs()?;
        if cores.len() != pairs.len() || cores.iter().any(|c| c.rank() != 3) {
            return Err(Error::shape("core count or rank does not match the factorization"));
        }
        let mut ranks: Vec<usize> = cores.iter().map(|c| c.dims()[0]).collect();
        ranks.push(cores.last().unwrap().dims()[2]);
        RankChain::Mpo(ranks.clone()).validate(&fact)?;
        for (k, core) in cores.iter().enumerate() {
            let (i, j) = pairs[k];
            check_core(core, [ranks[k], i * j, ranks[k + 1]], &format!("core {k}"))?;
        }
        Ok(Self {
            fact,
            ranks,
            pairs,
            cores,
        })
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    /// `(I_k, J_pi(k))` per core, for unfusing.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn cores_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.cores
    }

    /// Axis permutation taking the chained tensor, whose axes are
    /// `(j_pi(1), i_1, ..., j_pi(n), i_n)`, to `(i_1..i_n, j_1..j_n)`.
    pub fn unfuse_permutation(fact: &ShapeFactorization) -> Result<(Vec<usize>, Vec<usize>)> {
        let pairs = fact.mpo_pairs()?;
        let perm = fact.col_permutation();
        let n = pairs.len();
        let mut chained_dims = Vec::with_capacity(2 * n);
        for &(i, j) in &pairs {
            chained_dims.push(j);
            chained_dims.push(i);
        }
        let mut axes = Vec::with_capacity(2 * n);
        axes.extend((0..n).map(|k| 2 * k + 1));
        for l in 0..n {
            let k = perm.iter().position(|&p| p == l).expect("valid permutation");
            axes.push(2 * k);
        }
        Ok((chained_dims, axes))
    }
}

impl TensorTrain for MpoTrain {
    fn factorization(&self) -> &ShapeFactorization {
        &self.fact
    }

    fn cores(&self) -> Vec<&DenseTensor> {
        self.cores.iter().collect()
    }

    fn rank_chain(&self) -> RankChain {
        RankChain::Mpo(self.ranks.clone())
    }

    fn reconstruct_capped(&self, cap: usize) -> Result<Matrix> {
        check_cap(&self.fact, cap)?;
        let full = contract_chain(&self.cores)?;
        let (dims, axes) = Self::unfuse_permutation(&self.fact)?;
        let unfused = full.reshape(dims)?.permute_axes(&axes)?;
        unfused.to_matrix(self.fact.rows(), self.fact.cols())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{linear_index, multi_index, MultiIndex};

    fn fact(rows: &[usize], cols: &[usize]) -> ShapeFactorization {
        ShapeFactorization::new(rows.to_vec(), cols.to_vec()).unwrap()
    }

    fn gaussian() -> InitScheme {
        InitScheme::new(InitKind::GaussianVarianceMatched)
    }

    fn mps_uniform(rows: &[usize], cols: &[usize], r: usize, seed: u64) -> MpsTrain {
        let f = fact(rows, cols);
        let RankChain::Mps { row, col } = RankChain::uniform(TrainKind::Mps, &f, r) else {
            unreachable!()
        };
        MpsTrain::new(f, row, col, &gaussian(), seed).unwrap()
    }

    fn mpo_uniform(rows: &[usize], cols: &[usize], r: usize, seed: u64) -> MpoTrain {
        let f = fact(rows, cols);
        let RankChain::Mpo(chain) = RankChain::uniform(TrainKind::Mpo, &f, r) else {
            unreachable!()
        };
        MpoTrain::new(f, chain, &gaussian(), seed).unwrap()
    }

    /// Entry (i, j) of an MPS by explicit summation over every bond index.
    fn mps_entry_brute(t: &MpsTrain, i: usize, j: usize) -> f64 {
        let fact = t.factorization();
        let ii = multi_index(i + 1, fact.row_dims()).unwrap().into_coords();
        let jj = multi_index(j + 1, fact.col_dims()).unwrap().into_coords();
        let picks: Vec<(&DenseTensor, usize)> = t
            .row_cores()
            .iter()
            .zip(&ii)
            .chain(t.col_cores().iter().zip(&jj))
            .map(|(c, &x)| (c, x - 1))
            .collect();
        fn walk(picks: &[(&DenseTensor, usize)], left: usize) -> f64 {
            match picks.split_first() {
                None => 1.0,
                Some((&(core, x), rest)) => (0..core.dims()[2])
                    .map(|right| core.at(&[left, x, right]) * walk(rest, right))
                    .sum(),
            }
        }
        walk(&picks, 0)
    }

    #[test]
    fn ptb_mps_core_shapes() {
        let t = mps_uniform(&[50, 52], &[25, 26], 20, 0);
        let shapes: Vec<&[usize]> = t.cores().iter().map(|c| c.dims()).collect();
        assert_eq!(
            shapes,
            vec![&[1, 50, 20][..], &[20, 52, 20], &[20, 25, 20], &[20, 26, 1]]
        );
        assert_eq!(t.storage_count(), 32_320);
    }

    #[test]
    fn rank_one_mps_storage() {
        let t = mps_uniform(&[2, 2], &[2, 2], 1, 3);
        assert_eq!(t.cores().len(), 4);
        assert_eq!(t.storage_count(), 8);
    }

    #[test]
    fn construction_is_deterministic_in_seed() {
        assert_eq!(mps_uniform(&[3, 4], &[2, 5], 3, 42), mps_uniform(&[3, 4], &[2, 5], 3, 42));
        assert_ne!(mps_uniform(&[3, 4], &[2, 5], 3, 42), mps_uniform(&[3, 4], &[2, 5], 3, 43));
    }

    #[test]
    fn mps_rank_boundaries_are_enforced() {
        let f = fact(&[2, 2], &[2, 2]);
        let bad = [
            (vec![2, 3, 3], vec![3, 3, 1]),
            (vec![1, 3, 3], vec![3, 3, 2]),
            (vec![1, 3, 4], vec![3, 3, 1]),
            (vec![1, 3], vec![3, 3, 1]),
        ];
        for (row, col) in bad {
            let res = MpsTrain::new(f.clone(), row, col, &gaussian(), 0);
            assert!(matches!(res, Err(Error::Rank(_))), "{res:?}");
        }
    }

    #[test]
    fn ptb_mpo_core_shapes() {
        let t = mpo_uniform(&[50, 52], &[25, 26], 20, 0);
        let shapes: Vec<&[usize]> = t.cores().iter().map(|c| c.dims()).collect();
        assert_eq!(shapes, vec![&[1, 1250, 20][..], &[20, 1352, 1]]);
        assert_eq!(t.storage_count(), 52_040);

        let t3 = fact(&[13, 10, 20], &[13, 5, 10]);
        let fused: Vec<usize> = t3.mpo_pairs().unwrap().iter().map(|(i, j)| i * j).collect();
        assert_eq!(fused, vec![169, 50, 200]);
        let t4 = fact(&[10, 5, 4, 13], &[5, 5, 13, 2]);
        let fused: Vec<usize> = t4.mpo_pairs().unwrap().iter().map(|(i, j)| i * j).collect();
        assert_eq!(fused, vec![50, 25, 52, 26]);
    }

    #[test]
    fn rank_one_mpo_storage_is_sum_of_fused_extents() {
        let t = mpo_uniform(&[3, 4, 2], &[2, 5, 3], 1, 9);
        assert_eq!(t.storage_count(), 3 * 2 + 4 * 5 + 2 * 3);
    }

    #[test]
    fn mpo_requires_matching_factor_counts() {
        let f = fact(&[2, 2], &[4]);
        assert!(matches!(
            MpoTrain::new(f, vec![1, 2, 1], &gaussian(), 0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn storage_formula_matches_core_element_count_on_grid() {
        let dims = [1usize, 2, 3];
        let mut cases = 0;
        for &i1 in &dims {
            for &i2 in &dims {
                for &j1 in &dims {
                    for &j2 in &dims {
                        for r1 in 1..=3 {
                            for r2 in 1..=3 {
                                for r3 in 1..=3 {
                                    let f = fact(&[i1, i2], &[j1, j2]);
                                    let t = MpsTrain::new(
                                        f.clone(),
                                        vec![1, r1, r2],
                                        vec![r2, r3, 1],
                                        &gaussian(),
                                        0,
                                    )
                                    .unwrap();
                                    let formula = r1 * i1 + r1 * r2 * i2 + r2 * r3 * j1 + r3 * j2;
                                    let elements: usize = t.cores().iter().map(|c| c.dims().iter().product::<usize>()).sum();
                                    assert_eq!(t.storage_count(), formula);
                                    assert_eq!(t.storage_count(), elements);
                                    let o = MpoTrain::new(f, vec![1, r1, 1], &gaussian(), 0).unwrap();
                                    assert_eq!(o.storage_count(), r1 * i1 * j1 + r1 * i2 * j2);
                                    cases += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(cases, 81 * 27);
    }

    #[test]
    fn all_ones_mps_reconstructs_all_ones() {
        let mut t = mps_uniform(&[2, 2], &[2, 2], 1, 0);
        for core in t.row_cores_mut() {
            core.data_mut().fill(1.0);
        }
        for core in t.col_cores_mut() {
            core.data_mut().fill(1.0);
        }
        let w = t.reconstruct().unwrap();
        assert_eq!(w.dim(), (4, 4));
        assert!(w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mps_reconstruct_matches_bond_loop() {
        let t = MpsTrain::new(fact(&[4, 4], &[4, 4]), vec![1, 3, 2], vec![2, 3, 1], &gaussian(), 5).unwrap();
        let w = t.reconstruct().unwrap();
        // Explicit (k1, h0, h1) triple loop.
        let (a1, a2, b1, b2) = (&t.row_cores()[0], &t.row_cores()[1], &t.col_cores()[0], &t.col_cores()[1]);
        for i in 0..16 {
            for j in 0..16 {
                let (i1, i2) = (i / 4, i % 4);
                let (j1, j2) = (j / 4, j % 4);
                let mut s = 0.0;
                for k1 in 0..3 {
                    for h0 in 0..2 {
                        for h1 in 0..3 {
                            s += a1.at(&[0, i1, k1]) * a2.at(&[k1, i2, h0]) * b1.at(&[h0, j1, h1]) * b2.at(&[h1, j2, 0]);
                        }
                    }
                }
                assert!((w[[i, j]] - s).abs() <= 1e-12 * (1.0 + s.abs()));
                assert!((mps_entry_brute(&t, i, j) - s).abs() <= 1e-12 * (1.0 + s.abs()));
            }
        }
    }

    #[test]
    fn mpo_rank_one_is_fused_outer_product() {
        let t = mpo_uniform(&[2, 3], &[3, 2], 1, 17);
        let w = t.reconstruct().unwrap();
        let (c1, c2) = (&t.cores()[0], &t.cores()[1]);
        for i in 1..=6 {
            for j in 1..=6 {
                let ii = multi_index(i, &[2, 3]).unwrap().into_coords();
                let jj = multi_index(j, &[3, 2]).unwrap().into_coords();
                // h_k = i_k + (j_k - 1) I_k, 1-based.
                let h1 = ii[0] + (jj[0] - 1) * 2;
                let h2 = ii[1] + (jj[1] - 1) * 3;
                let expect = c1.at(&[0, h1 - 1, 0]) * c2.at(&[0, h2 - 1, 0]);
                assert!((w[[i - 1, j - 1]] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mpo_reconstruct_matches_bond_loop_with_permutation() {
        let f = fact(&[2, 3, 2], &[3, 2, 2]).with_col_permutation(vec![1, 0, 2]).unwrap();
        let t = MpoTrain::new(f.clone(), vec![1, 3, 2, 1], &gaussian(), 23).unwrap();
        let w = t.reconstruct().unwrap();
        let perm = f.col_permutation();
        for i in 1..=12 {
            for j in 1..=12 {
                let ii = multi_index(i, f.row_dims()).unwrap().into_coords();
                let jj = multi_index(j, f.col_dims()).unwrap().into_coords();
                let h: Vec<usize> = (0..3)
                    .map(|k| (ii[k] - 1) + (jj[perm[k]] - 1) * f.row_dims()[k])
                    .collect();
                let c = t.cores();
                let mut s = 0.0;
                for a in 0..3 {
                    for b in 0..2 {
                        s += c[0].at(&[0, h[0], a]) * c[1].at(&[a, h[1], b]) * c[2].at(&[b, h[2], 0]);
                    }
                }
                assert!((w[[i - 1, j - 1]] - s).abs() <= 1e-12 * (1.0 + s.abs()));
            }
        }
    }

    #[test]
    fn rank_one_mpo_and_mps_agree() {
        let mps = mps_uniform(&[2, 3], &[4, 2], 1, 31);
        let f = fact(&[2, 3], &[4, 2]);
        let cores = (0..2)
            .map(|k| {
                let a = &mps.row_cores()[k];
                let b = &mps.col_cores()[k];
                let (i_k, j_k) = (a.dims()[1], b.dims()[1]);
                DenseTensor::from_fn(vec![1, i_k * j_k, 1], |c| {
                    let (i, j) = (c[1] % i_k, c[1] / i_k);
                    a.at(&[0, i, 0]) * b.at(&[0, j, 0])
                })
                .unwrap()
            })
            .collect();
        let mpo = MpoTrain::from_cores(f, cores).unwrap();
        let (wa, wb) = (mps.reconstruct().unwrap(), mpo.reconstruct().unwrap());
        for (x, y) in wa.iter().zip(wb.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn reconstruct_is_linear_in_each_core() {
        let t = mps_uniform(&[3, 2], &[2, 3], 3, 77);
        let w = t.reconstruct().unwrap();
        for k in 0..4 {
            let mut scaled = t.clone();
            let core = if k < 2 { &mut scaled.row_cores_mut()[k] } else { &mut scaled.col_cores_mut()[k - 2] };
            core.data_mut().iter_mut().for_each(|v| *v *= -2.5);
            let ws = scaled.reconstruct().unwrap();
            for (a, b) in w.iter().zip(ws.iter()) {
                assert!((a * -2.5 - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn reconstruct_respects_the_cap() {
        let t = mps_uniform(&[4, 4], &[4, 4], 2, 0);
        assert!(matches!(
            t.reconstruct_capped(255),
            Err(Error::Capacity { requested: 256, cap: 255 })
        ));
        assert!(t.reconstruct_capped(256).is_ok());
    }

    #[test]
    fn gaussian_matched_spread_formula() {
        let s = init_params(&gaussian(), 650, 4, &[1, 20, 20, 20]).unwrap();
        let expect = 20f64.powf(-0.75) * 650f64.powf(-0.125);
        assert!((s.variance() - expect).abs() < 1e-15);
        assert!((s.variance() - 0.04706).abs() < 5e-5);

        let unit = init_params(&gaussian(), 1, 3, &[1, 1, 1]).unwrap();
        assert!((unit.variance() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn flat_uniform_half_width() {
        let scheme = InitScheme {
            kind: InitKind::FlatUniform,
            bound: Some(1.0),
            alpha: 0.05,
        };
        let InitSpread::Uniform { half_width } = init_params(&scheme, 10, 2, &[1, 1]).unwrap() else {
            panic!("expected a uniform spread");
        };
        let expect = 3f64.sqrt() / 1.959963984540054f64.sqrt();
        assert!((half_width - expect).abs() < 1e-9);

        let flat = InitScheme { kind: InitKind::FlatGaussian, ..scheme };
        let g = init_params(&flat, 10, 2, &[1, 1]).unwrap();
        assert!((g.variance() - expect * expect / 3.0).abs() < 1e-9);
    }

    #[test]
    fn alpha_outside_unit_interval_is_rejected() {
        for alpha in [0.0, 1.0, -0.1, 1.5] {
            let scheme = InitScheme { kind: InitKind::FlatUniform, bound: None, alpha };
            assert!(matches!(init_params(&scheme, 10, 2, &[1, 2]), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn normal_quantile_matches_tables() {
        let table = [
            (0.5, 0.0),
            (0.975, 1.959963984540054),
            (0.95, 1.6448536269514722),
            (0.995, 2.5758293035489004),
            (0.999, 3.090232306167813),
            (0.8413447460685429, 1.0),
            (0.025, -1.959963984540054),
            (1e-10, -6.361340902404056),
        ];
        for (p, z) in table {
            assert!((normal_quantile(p) - z).abs() < 1e-8, "p = {p}");
        }
    }

    #[test]
    fn normal_quantile_matches_reference_implementation() {
        use statrs::distribution::{ContinuousCDF, Normal as RefNormal};
        let reference = RefNormal::new(0.0, 1.0).unwrap();
        let mut p = 1e-10;
        while p < 1.0 - 1e-10 {
            let (ours, theirs) = (normal_quantile(p), reference.inverse_cdf(p));
            assert!((ours - theirs).abs() < 1e-8, "p = {p}: {ours} vs {theirs}");
            if p >= 1e-3 {
                assert!((normal_quantile(1.0 - p) + ours).abs() < 1e-8);
            }
            p = if p < 0.01 { p * 3.0 } else { p + 0.0137 };
        }
    }

    #[test]
    fn best_permutation_minimizes_largest_fused_extent() {
        let f = fact(&[2, 8, 4], &[8, 2, 4]);
        let perm = f.best_mpo_permutation().unwrap();
        let f = f.with_col_permutation(perm).unwrap();
        let max = f.mpo_pairs().unwrap().iter().map(|(i, j)| i * j).max().unwrap();
        assert_eq!(max, 16);
    }

    #[test]
    fn multi_index_helpers_agree_with_reconstruct_layout() {
        // Row i of the reconstructed matrix is the colex rank of (i_1..i_n).
        let t = mps_uniform(&[2, 3], &[2, 2], 2, 1);
        let w = t.reconstruct().unwrap();
        let i = linear_index(&MultiIndex::new(vec![2, 3]), &[2, 3]).unwrap();
        let j = linear_index(&MultiIndex::new(vec![1, 2]), &[2, 2]).unwrap();
        assert!((w[[i - 1, j - 1]] - mps_entry_brute(&t, i - 1, j - 1)).abs() < 1e-12);
    }
}
