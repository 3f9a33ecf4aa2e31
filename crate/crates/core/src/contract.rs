//! Matrix-vector kernels for tensor trains and their cost models.
//!
//! An MPS splits into `W = F G^T` where `F` (`N x r_c0`) contracts the row
//! cores and `G` (`M x r_c0`) the column cores. Building the pair once makes
//! every product `W x = F (G^T x)` cost `r_c0 (N + M)` multiply-adds. An MPO
//! has no such split and is reconstructed before multiplying.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::ttrain::{MpoTrain, MpsTrain, RankChain, ShapeFactorization, TensorTrain, TrainKind};

/// Hex SHA-256 over the dims and little-endian values of every core.
pub fn train_digest<T: TensorTrain + ?Sized>(train: &T) -> String {
    let mut hasher = Sha256::new();
    for core in train.cores() {
        for &d in core.dims() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in core.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn counted_dot(a: ArrayView2<f64>, b: ArrayView2<f64>, ops: &mut u64) -> Matrix {
    *ops += (a.nrows() * a.ncols() * b.ncols()) as u64;
    a.dot(&b)
}

/// Precomputed `F` and `G` of an MPS.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    f: Matrix,
    g: Matrix,
    source_digest: String,
}

impl FactorPair {
    /// `N x r_c0`.
    pub fn f(&self) -> &Matrix {
        &self.f
    }

    /// `M x r_c0`.
    pub fn g(&self) -> &Matrix {
        &self.g
    }

    /// Digest of the train the pair was built from.
    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    pub fn is_built_from(&self, mps: &MpsTrain) -> bool {
        self.source_digest == train_digest(mps)
    }

    pub fn rows(&self) -> usize {
        self.f.nrows()
    }

    pub fn cols(&self) -> usize {
        self.g.nrows()
    }

    pub fn middle_rank(&self) -> usize {
        self.f.ncols()
    }

    /// `F G^T`, for tests and small layers.
    pub fn to_dense(&self) -> Matrix {
        self.f.dot(&self.g.t())
    }
}

pub fn build_factor_pair(mps: &MpsTrain) -> Result<FactorPair> {
    build_factor_pair_counted(mps).map(|(fp, _)| fp)
}

/// Builds `F` and `G`, also returning the multiply-add count.
///
/// `F` is grown from the open row boundary towards the middle bond and `G`
/// from the open column boundary towards it, so each step multiplies an
/// accumulator of at most `N` (or `M`) rows by one core.
pub fn build_factor_pair_counted(mps: &MpsTrain) -> Result<(FactorPair, u64)> {
    let mut ops = 0u64;

    let rows = mps.row_cores();
    let first = &rows[0];
    // (1, I, r) unfolds to (I, r).
    let mut f = first.as_left_unfolding().to_owned();
    for core in &rows[1..] {
        // (P, r) x (r, I r') -> (P, I r') == (P I, r') in row-major order.
        let prod = counted_dot(f.view(), core.as_right_unfolding(), &mut ops);
        let p = prod.nrows() * core.dims()[1];
        f = prod
            .into_shape_with_order((p, core.dims()[2]))
            .map_err(|e| Error::shape(e.to_string()))?;
    }

    let cols = mps.col_cores();
    let last = &cols[cols.len() - 1];
    // (r, J, 1) unfolds to (r, J).
    let mut acc = last.as_right_unfolding().to_owned();
    for core in cols[..cols.len() - 1].iter().rev() {
        // (r J, r') x (r', S) -> (r J, S) == (r, J S) in row-major order.
        let prod = counted_dot(core.as_left_unfolding(), acc.view(), &mut ops);
        let s = prod.ncols() * core.dims()[1];
        acc = prod
            .into_shape_with_order((core.dims()[0], s))
            .map_err(|e| Error::shape(e.to_string()))?;
    }
    let g = acc.reversed_axes().as_standard_layout().to_owned();

    Ok((
        FactorPair {
            f,
            g,
            source_digest: train_digest(mps),
        },
        ops,
    ))
}

fn check_len(x: &[f64], expect: usize) -> Result<()> {
    if x.len() != expect {
        return Err(Error::shape(format!(
            "input has length {}, expected {expect}",
            x.len()
        )));
    }
    Ok(())
}

pub fn mps_matvec(fp: &FactorPair, x: &[f64]) -> Result<Vec<f64>> {
    mps_matvec_counted(fp, x).map(|(y, _)| y)
}

/// `y = F (G^T x)` with its multiply-add count.
pub fn mps_matvec_counted(fp: &FactorPair, x: &[f64]) -> Result<(Vec<f64>, u64)> {
    check_len(x, fp.cols())?;
    let x = ArrayView1::from(x);
    let t = fp.g.t().dot(&x);
    let y = fp.f.dot(&t);
    let ops = (fp.middle_rank() * (fp.rows() + fp.cols())) as u64;
    Ok((y.to_vec(), ops))
}

/// Row-batched product: every row of `x` (`B x M`) mapped to a row of the
/// `B x N` result.
pub fn mps_matmul_rows(fp: &FactorPair, x: ArrayView2<f64>) -> Result<Matrix> {
    if x.ncols() != fp.cols() {
        return Err(Error::shape(format!(
            "input rows have length {}, expected {}",
            x.ncols(),
            fp.cols()
        )));
    }
    Ok(x.dot(&fp.g).dot(&fp.f.t()))
}

/// Reconstructed MPO matrix tagged with the digest of its source cores.
#[derive(Debug, Clone, PartialEq)]
pub struct MpoCache {
    matrix: Matrix,
    source_digest: String,
}

impl MpoCache {
    pub fn new(mpo: &MpoTrain) -> Result<Self> {
        Ok(Self {
            matrix: mpo.reconstruct()?,
            source_digest: train_digest(mpo),
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// False once any core of `mpo` differs from the cached source.
    pub fn is_valid_for(&self, mpo: &MpoTrain) -> bool {
        self.source_digest == train_digest(mpo)
    }
}

/// `y = W x` with `W` the reconstruction of `mpo`, or `cache` when given.
pub fn mpo_matvec(mpo: &MpoTrain, x: &[f64], cache: Option<&Matrix>) -> Result<Vec<f64>> {
    check_len(x, mpo.cols())?;
    let owned;
    let w = match cache {
        Some(w) => {
            if w.dim() != (mpo.rows(), mpo.cols()) {
                return Err(Error::shape(format!(
                    "cached matrix is {:?}, expected ({}, {})",
                    w.dim(),
                    mpo.rows(),
                    mpo.cols()
                )));
            }
            w
        }
        None => {
            owned = mpo.reconstruct()?;
            &owned
        }
    };
    Ok(w.dot(&ArrayView1::from(x)).to_vec())
}

/// Storage and operation counts for a train layout, with the asymptotic
/// bound terms evaluated at `R` = max rank, `I` = max row factor and `J` =
/// max column factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub kind: TrainKind,
    pub rows: usize,
    pub cols: usize,
    pub n: usize,
    pub m: usize,
    pub max_rank: usize,
    pub max_row_factor: usize,
    pub max_col_factor: usize,
    /// Exact number of core entries.
    pub storage: usize,
    /// Storage bound, `R(I+J) + R^2[(n-1)I + (m-1)J]` for MPS and
    /// `IJ[2R + (n-2)R^2]` for MPO.
    pub storage_bound: usize,
    /// Exact multiply-adds to prepare for products: building `F` and `G`
    /// (MPS) or reconstructing the matrix (MPO).
    pub precompute_ops: u64,
    /// Exact multiply-adds per product once prepared.
    pub matvec_ops: u64,
    /// `R(N+M)` for MPS, `NMR` for MPO.
    pub bound_linear: u64,
    /// `R^2[(n-1)N + (m-1)M]` for MPS, `NMR^2(n-2)` for MPO.
    pub bound_quadratic: u64,
    /// `NM / storage`.
    pub compression_rate: f64,
}

impl CostReport {
    pub fn op_bound(&self) -> u64 {
        self.bound_linear + self.bound_quadratic
    }
}

/// Exact multiply-adds spent by [`build_factor_pair_counted`].
pub fn factor_pair_ops(fact: &ShapeFactorization, row: &[usize], col: &[usize]) -> u64 {
    let mut ops = 0u64;
    let mut prefix = fact.row_dims()[0] as u64;
    for k in 1..fact.row_dims().len() {
        let i = fact.row_dims()[k] as u64;
        ops += prefix * row[k] as u64 * i * row[k + 1] as u64;
        prefix *= i;
    }
    let m = fact.col_dims().len();
    let mut suffix = fact.col_dims()[m - 1] as u64;
    for k in (0..m - 1).rev() {
        let j = fact.col_dims()[k] as u64;
        ops += col[k] as u64 * j * col[k + 1] as u64 * suffix;
        suffix *= j;
    }
    ops
}

/// Exact multiply-adds of a left-to-right MPO reconstruction.
pub fn mpo_reconstruct_ops(pairs: &[(usize, usize)], ranks: &[usize]) -> u64 {
    let mut ops = 0u64;
    let mut prefix = (pairs[0].0 * pairs[0].1) as u64;
    for k in 1..pairs.len() {
        let h = (pairs[k].0 * pairs[k].1) as u64;
        ops += prefix * ranks[k] as u64 * h * ranks[k + 1] as u64;
        prefix *= h;
    }
    ops
}

pub fn cost_model(fact: &ShapeFactorization, ranks: &RankChain) -> Result<CostReport> {
    ranks.validate(fact)?;
    let (nn, mm) = (fact.rows(), fact.cols());
    let n = fact.row_dims().len();
    let m = fact.col_dims().len();
    let r = ranks.max_rank();
    let i = *fact.row_dims().iter().max().unwrap();
    let j = *fact.col_dims().iter().max().unwrap();
    let (r64, nm) = (r as u64, (nn * mm) as u64);
    let report = match ranks {
        RankChain::Mps { row, col } => {
            let storage = (0..n).map(|k| row[k] * fact.row_dims()[k] * row[k + 1]).sum::<usize>()
                + (0..m).map(|k| col[k] * fact.col_dims()[k] * col[k + 1]).sum::<usize>();
            CostReport {
                kind: TrainKind::Mps,
                rows: nn,
                cols: mm,
                n,
                m,
                max_rank: r,
                max_row_factor: i,
                max_col_factor: j,
                storage,
                storage_bound: r * (i + j) + r * r * ((n - 1) * i + (m - 1) * j),
                precompute_ops: factor_pair_ops(fact, row, col),
                matvec_ops: (col[0] * (nn + mm)) as u64,
                bound_linear: r64 * (nn + mm) as u64,
                bound_quadratic: r64 * r64 * ((n - 1) * nn + (m - 1) * mm) as u64,
                compression_rate: (nn * mm) as f64 / storage as f64,
            }
        }
        RankChain::Mpo(chain) => {
            let pairs = fact.mpo_pairs()?;
            let storage = pairs
                .iter()
                .enumerate()
                .map(|(k, &(a, b))| chain[k] * a * b * chain[k + 1])
                .sum::<usize>();
            let quad_terms = n.saturating_sub(2) as u64;
            CostReport {
                kind: TrainKind::Mpo,
                rows: nn,
                cols: mm,
                n,
                m,
                max_rank: r,
                max_row_factor: i,
                max_col_factor: j,
                storage,
                storage_bound: i * j * (2 * r + n.saturating_sub(2) * r * r),
                precompute_ops: mpo_reconstruct_ops(&pairs, chain),
                matvec_ops: nm,
                bound_linear: nm * r64,
                bound_quadratic: nm * r64 * r64 * quad_terms,
                compression_rate: (nn * mm) as f64 / storage as f64,
            }
        }
    };
    Ok(report)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 1.0) || !rate.is_finite() {
        return Err(Error::domain(format!(
            "target compression rate must exceed 1, got {rate}"
        )));
    }
    Ok(())
}

fn square_factor_count(fact: &ShapeFactorization) -> Result<usize> {
    let n = fact.row_dims().len();
    if n != fact.col_dims().len() {
        return Err(Error::shape(format!(
            "rank planning needs as many row as column factors, got {n} and {}",
            fact.col_dims().len()
        )));
    }
    Ok(n)
}

/// Unfloored uniform rank solving the worst-case storage bound
/// `storage = NM / rate` with `I`, `J` the largest factors.
pub fn closed_form_rank(rate: f64, fact: &ShapeFactorization, kind: TrainKind) -> Result<f64> {
    check_rate(rate)?;
    let n = square_factor_count(fact)? as f64;
    let kappa = 1.0 / rate;
    let nm = fact.rows() as f64 * fact.cols() as f64;
    let i = *fact.row_dims().iter().max().unwrap() as f64;
    let j = *fact.col_dims().iter().max().unwrap() as f64;
    let r = match kind {
        TrainKind::Mps if n == 1.0 => kappa * nm / (i + j),
        TrainKind::Mps => {
            ((1.0 + 4.0 * kappa * (n - 1.0) * nm / (i + j)).sqrt() - 1.0) / (2.0 * (n - 1.0))
        }
        TrainKind::Mpo if n < 2.0 => {
            return Err(Error::domain("MPO rank planning needs at least two cores"));
        }
        TrainKind::Mpo if n == 2.0 => kappa * nm / (2.0 * i * j),
        TrainKind::Mpo => ((1.0 + kappa * (n - 2.0) * nm / (i * j)).sqrt() - 1.0) / (n - 2.0),
    };
    Ok(r)
}

/// Outcome of [`plan_rank`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankPlan {
    pub closed_form: f64,
    pub rank: usize,
    pub achieved_rate: f64,
    /// True when the closed form missed the tolerance and the rank was
    /// re-solved against the exact storage of the given factors.
    pub refined: bool,
}

/// Relative tolerance between target and achieved rate before
/// [`plan_rank`] refines the closed-form rank.
pub const RATE_TOLERANCE: f64 = 0.25;

fn uniform_rate(fact: &ShapeFactorization, kind: TrainKind, r: usize) -> Result<f64> {
    Ok(cost_model(fact, &RankChain::uniform(kind, fact, r))?.compression_rate)
}

/// Storage of a uniform-rank train as `a R + b R^2`.
fn uniform_storage_coefficients(fact: &ShapeFactorization, kind: TrainKind) -> Result<(f64, f64)> {
    let rows = fact.row_dims();
    let cols = fact.col_dims();
    Ok(match kind {
        TrainKind::Mps => {
            let a = rows[0] + cols[cols.len() - 1];
            let b = rows[1..].iter().sum::<usize>() + cols[..cols.len() - 1].iter().sum::<usize>();
            (a as f64, b as f64)
        }
        TrainKind::Mpo => {
            let fused: Vec<usize> = fact.mpo_pairs()?.iter().map(|(i, j)| i * j).collect();
            let n = fused.len();
            let a = fused[0] + fused[n - 1];
            let b = fused[1..n - 1].iter().sum::<usize>();
            (a as f64, b as f64)
        }
    })
}

/// Uniform rank hitting `rate`, starting from the closed form.
pub fn plan_rank(rate: f64, fact: &ShapeFactorization, kind: TrainKind) -> Result<RankPlan> {
    let closed_form = closed_form_rank(rate, fact, kind)?;
    let rank = (closed_form.floor() as usize).max(1);
    let achieved_rate = uniform_rate(fact, kind, rank)?;
    if (achieved_rate - rate).abs() <= RATE_TOLERANCE * rate {
        return Ok(RankPlan {
            closed_form,
            rank,
            achieved_rate,
            refined: false,
        });
    }
    let (a, b) = uniform_storage_coefficients(fact, kind)?;
    let target = fact.rows() as f64 * fact.cols() as f64 / rate;
    let exact = if b == 0.0 {
        target / a
    } else {
        ((a * a + 4.0 * b * target).sqrt() - a) / (2.0 * b)
    };
    let rank = (exact.floor() as usize).max(1);
    Ok(RankPlan {
        closed_form,
        rank,
        achieved_rate: uniform_rate(fact, kind, rank)?,
        refined: true,
    })
}

/// Uniform inner rank for a target compression `rate`.
pub fn pick_rank(rate: f64, fact: &ShapeFactorization, kind: TrainKind) -> Result<usize> {
    plan_rank(rate, fact, kind).map(|p| p.rank)
}

/// Ratio of MPO to MPS inference cost, `NM(I+J) / [IJ(N+M)]`, halved for
/// two cores.
pub fn efficiency_gain(fact: &ShapeFactorization) -> Result<f64> {
    let n = square_factor_count(fact)?;
    if n < 2 {
        return Err(Error::domain("efficiency gain needs at least two factors"));
    }
    let (nn, mm) = (fact.rows() as f64, fact.cols() as f64);
    let i = *fact.row_dims().iter().max().unwrap() as f64;
    let j = *fact.col_dims().iter().max().unwrap() as f64;
    let ratio = nn * mm * (i + j) / (i * j * (nn + mm));
    Ok(if n == 2 { ratio / 2.0 } else { ratio })
}

/// Full parameter count over tensorized parameter count.
pub fn compression_rate(full_params: usize, tt_params: usize) -> Result<f64> {
    if full_params == 0 || tt_params == 0 {
        return Err(Error::domain("parameter counts must be positive"));
    }
    Ok(full_params as f64 / tt_params as f64)
}

/// Dense `W x` helper used as an oracle.
pub fn dense_matvec(w: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    check_len(x, w.ncols())?;
    Ok(w.dot(&ArrayView1::from(x)).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ttrain::{InitKind, InitScheme};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fact(rows: &[usize], cols: &[usize]) -> ShapeFactorization {
        ShapeFactorization::new(rows.to_vec(), cols.to_vec()).unwrap()
    }

    fn mps(rows: &[usize], cols: &[usize], r: usize, seed: u64) -> MpsTrain {
        let f = fact(rows, cols);
        let RankChain::Mps { row, col } = RankChain::uniform(TrainKind::Mps, &f, r) else {
            unreachable!()
        };
        MpsTrain::new(f, row, col, &InitScheme::new(InitKind::GaussianVarianceMatched), seed).unwrap()
    }

    fn mpo(rows: &[usize], cols: &[usize], r: usize, seed: u64) -> MpoTrain {
        let f = fact(rows, cols);
        let RankChain::Mpo(chain) = RankChain::uniform(TrainKind::Mpo, &f, r) else {
            unreachable!()
        };
        MpoTrain::new(f, chain, &InitScheme::new(InitKind::GaussianVarianceMatched), seed).unwrap()
    }

    fn ones(mut t: MpsTrain) -> MpsTrain {
        for c in t.row_cores_mut() {
            c.data_mut().fill(1.0);
        }
        for c in t.col_cores_mut() {
            c.data_mut().fill(1.0);
        }
        t
    }

    fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
        let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
    }

    #[test]
    fn all_ones_factor_pair() {
        let fp = build_factor_pair(&ones(mps(&[2, 2], &[2, 2], 1, 0))).unwrap();
        assert_eq!(fp.f().dim(), (4, 1));
        assert_eq!(fp.g().dim(), (4, 1));
        assert!(fp.f().iter().chain(fp.g().iter()).all(|&v| v == 1.0));
        assert_eq!(mps_matvec(&fp, &[1.0; 4]).unwrap(), vec![4.0; 4]);
    }

    #[test]
    fn factor_pair_reproduces_reconstruction_six_cores() {
        let t = mps(&[3, 3, 3], &[3, 3, 3], 3, 11);
        let fp = build_factor_pair(&t).unwrap();
        let w = t.reconstruct().unwrap();
        let fg = fp.to_dense();
        assert!(rel_close(fg.as_slice().unwrap(), w.as_slice().unwrap(), 1e-10));
        assert!(fp.is_built_from(&t));
    }

    #[test]
    fn middle_rank_sets_f_width() {
        let f = fact(&[2, 4], &[2, 2]);
        let t = MpsTrain::new(
            f,
            vec![1, 2, 3],
            vec![3, 2, 1],
            &InitScheme::new(InitKind::GaussianVarianceMatched),
            0,
        )
        .unwrap();
        let fp = build_factor_pair(&t).unwrap();
        assert_eq!(fp.f().len(), 24);
    }

    #[test]
    fn mps_matvec_matches_dense() {
        let t = mps(&[4, 4], &[4, 4], 3, 5);
        let fp = build_factor_pair(&t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = mps_matvec(&fp, &x).unwrap();
        let oracle = dense_matvec(&t.reconstruct().unwrap(), &x).unwrap();
        assert!(rel_close(&y, &oracle, 1e-10));
        assert!(matches!(mps_matvec(&fp, &x[..15]), Err(Error::Shape(_))));
    }

    #[test]
    fn ptb_matvec_counter() {
        let t = mps(&[50, 52], &[25, 26], 20, 2);
        let (fp, build_ops) = build_factor_pair_counted(&t).unwrap();
        let (_, ops) = mps_matvec_counted(&fp, &vec![0.5; 650]).unwrap();
        assert_eq!(ops, 20 * 3250);
        assert!(ops <= 130_000);
        assert!(build_ops <= 4 * 400 * (2600 + 650));
        let RankChain::Mps { row, col } = t.rank_chain() else { unreachable!() };
        assert_eq!(build_ops, factor_pair_ops(t.factorization(), &row, &col));
    }

    #[test]
    fn row_batched_product_matches_per_row() {
        let t = mps(&[2, 3], &[3, 2], 2, 8);
        let fp = build_factor_pair(&t).unwrap();
        let x = Array2::from_shape_fn((3, 6), |(b, j)| (b * 6 + j) as f64 * 0.1 - 0.7);
        let y = mps_matmul_rows(&fp, x.view()).unwrap();
        for b in 0..3 {
            let row = mps_matvec(&fp, x.row(b).as_slice().unwrap()).unwrap();
            assert!(rel_close(y.row(b).as_slice().unwrap(), &row, 1e-12));
        }
    }

    #[test]
    fn mpo_all_ones_row_sums() {
        let mut o = mpo(&[2, 2], &[2, 2], 1, 0);
        for c in o.cores_mut() {
            c.data_mut().fill(1.0);
        }
        assert_eq!(mpo_matvec(&o, &[1.0; 4], None).unwrap(), vec![4.0; 4]);
    }

    #[test]
    fn mpo_cached_and_uncached_agree_bitwise() {
        let o = mpo(&[4, 4], &[4, 4], 3, 4);
        let x: Vec<f64> = (0..16).map(|k| (k as f64).sin()).collect();
        let cache = MpoCache::new(&o).unwrap();
        let a = mpo_matvec(&o, &x, None).unwrap();
        let b = mpo_matvec(&o, &x, Some(cache.matrix())).unwrap();
        assert_eq!(a, b);
        let mut changed = o.clone();
        changed.cores_mut()[0].data_mut()[0] += 1.0;
        assert!(cache.is_valid_for(&o));
        assert!(!cache.is_valid_for(&changed));
    }

    #[test]
    fn cost_model_ptb_storage() {
        let f = fact(&[50, 52], &[25, 26]);
        let mps = cost_model(&f, &RankChain::uniform(TrainKind::Mps, &f, 20)).unwrap();
        assert_eq!(mps.storage, 32_320);
        let mpo = cost_model(&f, &RankChain::uniform(TrainKind::Mpo, &f, 20)).unwrap();
        assert_eq!(mpo.storage, 52_040);
        assert!((compression_rate(1_690_000, 32_320).unwrap() - 52.29).abs() < 0.01);
    }

    #[test]
    fn single_factor_mps_bound_is_linear_only() {
        let f = fact(&[7], &[5]);
        let c = cost_model(&f, &RankChain::uniform(TrainKind::Mps, &f, 4)).unwrap();
        assert_eq!(c.bound_quadratic, 0);
        assert_eq!(c.storage_bound, 4 * 12);
        assert_eq!(c.storage, 4 * 12);
        assert_eq!(c.precompute_ops, 0);
    }

    #[test]
    fn storage_grows_with_every_rank() {
        let f = fact(&[3, 2, 4], &[2, 3, 2]);
        let base = [1, 2, 3, 2];
        let basec = [2, 3, 2, 1];
        let s0 = cost_model(&f, &RankChain::Mps { row: base.to_vec(), col: basec.to_vec() }).unwrap().storage;
        for k in 1..3 {
            let mut row = base.to_vec();
            row[k] += 1;
            let s = cost_model(&f, &RankChain::Mps { row, col: basec.to_vec() }).unwrap().storage;
            assert!(s > s0);
        }
        let mut row = base.to_vec();
        let mut col = basec.to_vec();
        row[3] += 1;
        col[0] += 1;
        assert!(cost_model(&f, &RankChain::Mps { row, col }).unwrap().storage > s0);
    }

    #[test]
    fn ptb_closed_form_ranks() {
        let f = fact(&[50, 52], &[25, 26]);
        let ro = closed_form_rank(1.8, &f, TrainKind::Mpo).unwrap();
        let rs = closed_form_rank(1.8, &f, TrainKind::Mps).unwrap();
        // kappa NM / (2 I J) and the quadratic root, evaluated by hand.
        let ro_hand = 1_690_000.0 / 1.8 / (2.0 * 52.0 * 26.0);
        let rs_hand = 0.5 * ((1.0 + 4.0 * 1_690_000.0 / 1.8 / 78.0f64).sqrt() - 1.0);
        assert!((ro - ro_hand).abs() < 1e-9 && (ro - 347.2).abs() < 0.1);
        assert!((rs - rs_hand).abs() < 1e-9 && (rs - 109.2).abs() < 0.1);
        assert_eq!(pick_rank(1.8, &f, TrainKind::Mpo).unwrap(), 347);
        assert_eq!(pick_rank(1.8, &f, TrainKind::Mps).unwrap(), 109);
    }

    #[test]
    fn extreme_rate_gives_small_mps_rank() {
        let f = fact(&[50, 52], &[25, 26]);
        let rate = 2600.0 * 650.0 / 78.0;
        let r = closed_form_rank(rate, &f, TrainKind::Mps).unwrap();
        assert!(r < 1.0);
        assert_eq!(pick_rank(rate, &f, TrainKind::Mps).unwrap(), 1);
    }

    #[test]
    fn rate_at_most_one_is_rejected() {
        let f = fact(&[4, 4], &[4, 4]);
        for rate in [1.0, 0.5, f64::NAN] {
            assert!(matches!(pick_rank(rate, &f, TrainKind::Mps), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn efficiency_gain_values() {
        let f = fact(&[50, 52], &[25, 26]);
        let g = efficiency_gain(&f).unwrap();
        let hand = 2600.0 * 650.0 * 78.0 / (2.0 * 1352.0 * 3250.0);
        assert!((g - hand).abs() < 1e-12);
        assert!((g - 15.0).abs() < 0.01);

        let sq = fact(&[4, 4, 4], &[4, 4, 4]);
        assert!((efficiency_gain(&sq).unwrap() - 16.0).abs() < 1e-12);
        let two = fact(&[8, 8], &[8, 8]);
        let three = fact(&[8, 8, 1], &[8, 8, 1]);
        assert!((efficiency_gain(&three).unwrap() - 2.0 * efficiency_gain(&two).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn compression_rate_edges() {
        assert_eq!(compression_rate(10, 10).unwrap(), 1.0);
        assert!(matches!(compression_rate(10, 0), Err(Error::Domain(_))));
    }
}
