//! Dense tensors, the colexicographic index maps between matrices and tensors,
//! and the mode-(3,1) product used to chain tensor-train cores.
//!
//! Storage is row-major with the last index varying fastest. Index maps take
//! and return 1-based coordinates; everything internal is 0-based.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Dense real matrix used throughout the numeric code.
pub type Matrix = Array2<f64>;

/// A dense real tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::shape("a tensor needs at least one dimension"));
        }
        if dims.contains(&0) {
            return Err(Error::shape(format!("zero extent in dims {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} hold {len} entries but {} were given",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, vec![0.0; len])
    }

    pub fn filled(dims: Vec<usize>, value: f64) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, vec![value; len])
    }

    /// Builds a tensor by evaluating `f` at every 0-based coordinate, in
    /// storage order.
    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len: usize = dims.iter().product();
        let mut coords = vec![0usize; dims.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&coords));
            for axis in (0..dims.len()).rev() {
                coords[axis] += 1;
                if coords[axis] < dims[axis] {
                    break;
                }
                coords[axis] = 0;
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Element at a 1-based multi-index.
    pub fn get(&self, mi: &MultiIndex) -> Result<f64> {
        let flat = linear_index(mi, &self.dims)?;
        Ok(self.data[flat - 1])
    }

    /// Storage offset of a 0-based coordinate tuple.
    pub fn offset(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.dims.len());
        coords
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&c, &d)| acc * d + c)
    }

    pub fn at(&self, coords: &[usize]) -> f64 {
        self.data[self.offset(coords)]
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// Matrix view grouping all leading axes into rows and the last axis into
    /// columns; for a core `(r0, I, r1)` this is its left unfolding.
    pub fn as_left_unfolding(&self) -> ArrayView2<'_, f64> {
        let cols = *self.dims.last().expect("non-empty dims");
        ArrayView2::from_shape((self.data.len() / cols, cols), &self.data)
            .expect("length checked at construction")
    }

    /// Matrix view with the first axis as rows and the remaining axes fused
    /// into columns.
    pub fn as_right_unfolding(&self) -> ArrayView2<'_, f64> {
        let rows = self.dims[0];
        ArrayView2::from_shape((rows, self.data.len() / rows), &self.data)
            .expect("length checked at construction")
    }

    pub fn to_matrix(&self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows * cols != self.data.len() {
            return Err(Error::shape(format!(
                "cannot view {} entries as {rows}x{cols}",
                self.data.len()
            )));
        }
        Ok(Array2::from_shape_vec((rows, cols), self.data.clone()).expect("checked"))
    }

    pub fn from_matrix(m: &Matrix, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, m.iter().copied().collect())
    }

    /// Reorders axes so that output axis `k` is input axis `perm[k]`.
    pub fn permute_axes(&self, perm: &[usize]) -> Result<Self> {
        let data = permute_data(&self.data, &self.dims, perm)?;
        let dims = perm.iter().map(|&p| self.dims[p]).collect();
        Self::new(dims, data)
    }

    /// Fuses the two middle axes of a rank-4 tensor, turning a mode-(3,1)
    /// result back into a rank-3 core. Data order is unchanged.
    pub fn fuse_middle(self) -> Result<Self> {
        if self.rank() != 4 {
            return Err(Error::shape(format!(
                "fuse_middle expects rank 4, got {:?}",
                self.dims
            )));
        }
        let d = self.dims.clone();
        self.reshape(vec![d[0], d[1] * d[2], d[3]])
    }
}

/// Permutes row-major `data` with extents `dims` so that output axis `k` is
/// input axis `perm[k]`.
pub fn permute_data(data: &[f64], dims: &[usize], perm: &[usize]) -> Result<Vec<f64>> {
    let rank = dims.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape(format!("{perm:?} is not a permutation of {rank} axes")));
    }
    let mut in_strides = vec![1usize; rank];
    for axis in (0..rank.saturating_sub(1)).rev() {
        in_strides[axis] = in_strides[axis + 1] * dims[axis + 1];
    }
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for axis in (0..rank).rev() {
            coords[axis] += 1;
            src += strides[axis];
            if coords[axis] < out_dims[axis] {
                break;
            }
            src -= strides[axis] * out_dims[axis];
            coords[axis] = 0;
        }
    }
    Ok(out)
}

/// A 1-based multi-index `(i_1, ..., i_n)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex(Vec<usize>);

impl MultiIndex {
    pub fn new(coords: Vec<usize>) -> Self {
        Self(coords)
    }

    pub fn coords(&self) -> &[usize] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<usize> {
        self.0
    }
}

impl From<Vec<usize>> for MultiIndex {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// Big-endian colexicographic flat index:
/// `i = i_n + (i_{n-1} - 1) I_n + ... + (i_1 - 1) I_2 ... I_n`, all 1-based.
pub fn linear_index(mi: &MultiIndex, dims: &[usize]) -> Result<usize> {
    let coords = mi.coords();
    if coords.len() != dims.len() {
        return Err(Error::Index(format!(
            "multi-index of length {} for {} dimensions",
            coords.len(),
            dims.len()
        )));
    }
    let mut flat = 0usize;
    for (k, (&c, &d)) in coords.iter().zip(dims).enumerate() {
        if c < 1 || c > d {
            return Err(Error::Index(format!(
                "coordinate {k} is {c}, outside 1..={d}"
            )));
        }
        flat = flat * d + (c - 1);
    }
    Ok(flat + 1)
}

/// Inverse of [`linear_index`].
pub fn multi_index(flat: usize, dims: &[usize]) -> Result<MultiIndex> {
    let total: usize = dims.iter().product();
    if flat < 1 || flat > total {
        return Err(Error::Index(format!("flat index {flat} outside 1..={total}")));
    }
    let mut rest = flat - 1;
    let mut coords = vec![0usize; dims.len()];
    for (c, &d) in coords.iter_mut().zip(dims).rev() {
        *c = rest % d + 1;
        rest /= d;
    }
    Ok(MultiIndex(coords))
}

/// Mode-(3,1) product: contracts the third axis of `g1` with the first axis
/// of `g2`, giving a rank-4 tensor `(a, b, c, d)` with
/// `out[a,b,c,d] = sum_k g1[a,b,k] g2[k,c,d]`.
pub fn mode31_product(g1: &DenseTensor, g2: &DenseTensor) -> Result<DenseTensor> {
    if g1.rank() != 3 || g2.rank() != 3 {
        return Err(Error::shape(format!(
            "mode-(3,1) product needs rank-3 operands, got {:?} and {:?}",
            g1.dims(),
            g2.dims()
        )));
    }
    let (a, b, k) = (g1.dims[0], g1.dims[1], g1.dims[2]);
    let (k2, c, d) = (g2.dims[0], g2.dims[1], g2.dims[2]);
    if k != k2 {
        return Err(Error::shape(format!(
            "contracted extents differ: {k} vs {k2}"
        )));
    }
    // (a*b, k) x (k, c*d) is exactly the row-major layout of (a, b, c, d).
    let prod = g1.as_left_unfolding().dot(&g2.as_right_unfolding());
    DenseTensor::new(vec![a, b, c, d], prod.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> DenseTensor {
        DenseTensor::from_fn(dims, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn linear_index_small_cases() {
        assert_eq!(linear_index(&MultiIndex::new(vec![1, 1]), &[2, 3]).unwrap(), 1);
        assert_eq!(linear_index(&MultiIndex::new(vec![2, 1]), &[2, 3]).unwrap(), 4);
        assert_eq!(multi_index(1, &[2, 3]).unwrap().coords(), &[1, 1]);
        assert_eq!(multi_index(6, &[2, 3]).unwrap().coords(), &[2, 3]);
    }

    #[test]
    fn linear_index_matches_colex_enumeration() {
        // Odometer with the last coordinate spinning fastest.
        let dims = [4, 5, 6];
        let mut rank = 0;
        for i1 in 1..=4 {
            for i2 in 1..=5 {
                for i3 in 1..=6 {
                    rank += 1;
                    let mi = MultiIndex::new(vec![i1, i2, i3]);
                    assert_eq!(linear_index(&mi, &dims).unwrap(), rank);
                }
            }
        }
        assert_eq!(rank, 120);
    }

    #[test]
    fn multi_index_round_trips() {
        let dims = [3, 3, 3];
        for f in 1..=27 {
            let mi = multi_index(f, &dims).unwrap();
            assert_eq!(linear_index(&mi, &dims).unwrap(), f);
        }
    }

    #[test]
    fn index_maps_are_bijections_on_small_shapes() {
        let shapes: &[&[usize]] = &[
            &[1],
            &[7],
            &[2, 3],
            &[1, 5, 1],
            &[4, 5, 6],
            &[10, 10, 10],
            &[2, 2, 2, 2, 2, 2, 2],
            &[100, 100],
            &[3, 1, 4, 1, 5, 9],
        ];
        for dims in shapes {
            let total: usize = dims.iter().product();
            assert!(total <= 10_000);
            let mut hit = vec![false; total];
            for f in 1..=total {
                let mi = multi_index(f, dims).unwrap();
                let back = linear_index(&mi, dims).unwrap();
                assert_eq!(back, f);
                assert!(!hit[back - 1]);
                hit[back - 1] = true;
            }
        }
    }

    #[test]
    fn out_of_range_indices_are_rejected() {
        assert!(matches!(
            linear_index(&MultiIndex::new(vec![3, 1]), &[2, 3]),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            linear_index(&MultiIndex::new(vec![0, 1]), &[2, 3]),
            Err(Error::Index(_))
        ));
        assert!(matches!(multi_index(0, &[2, 3]), Err(Error::Index(_))));
        assert!(matches!(multi_index(7, &[2, 3]), Err(Error::Index(_))));
    }

    #[test]
    fn storage_is_row_major_last_fastest() {
        let t = DenseTensor::new(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        for f in 1..=12 {
            let mi = multi_index(f, t.dims()).unwrap();
            assert_eq!(t.get(&mi).unwrap(), (f - 1) as f64);
            let zero_based: Vec<usize> = mi.coords().iter().map(|c| c - 1).collect();
            assert_eq!(t.offset(&zero_based), f - 1);
        }
    }

    #[test]
    fn mode31_shape_algebra() {
        let g1 = DenseTensor::filled(vec![1, 2, 3], 1.0).unwrap();
        let g2 = DenseTensor::filled(vec![3, 4, 1], 1.0).unwrap();
        assert_eq!(mode31_product(&g1, &g2).unwrap().dims(), &[1, 2, 4, 1]);
    }

    #[test]
    fn mode31_of_ones_sums_the_bond() {
        let g1 = DenseTensor::filled(vec![1, 2, 2], 1.0).unwrap();
        let g2 = DenseTensor::filled(vec![2, 2, 1], 1.0).unwrap();
        let out = mode31_product(&g1, &g2).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn mode31_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g1 = random_tensor(vec![2, 3, 4], &mut rng);
        let g2 = random_tensor(vec![4, 2, 3], &mut rng);
        let out = mode31_product(&g1, &g2).unwrap();
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..2 {
                    for d in 0..3 {
                        let mut s = 0.0;
                        for k in 0..4 {
                            s += g1.at(&[a, b, k]) * g2.at(&[k, c, d]);
                        }
                        assert!((out.at(&[a, b, c, d]) - s).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn mode31_rejects_mismatched_bond() {
        let g1 = DenseTensor::zeros(vec![1, 2, 3]).unwrap();
        let g2 = DenseTensor::zeros(vec![4, 2, 1]).unwrap();
        assert!(matches!(mode31_product(&g1, &g2), Err(Error::Shape(_))));
    }

    #[test]
    fn chained_mode31_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let r1 = rng.random_range(1..5);
            let r2 = rng.random_range(1..5);
            let g1 = random_tensor(vec![1, rng.random_range(1..4), r1], &mut rng);
            let g2 = random_tensor(vec![r1, rng.random_range(1..4), r2], &mut rng);
            let g3 = random_tensor(vec![r2, rng.random_range(1..4), 1], &mut rng);
            let left = mode31_product(&mode31_product(&g1, &g2).unwrap().fuse_middle().unwrap(), &g3)
                .unwrap()
                .fuse_middle()
                .unwrap();
            let right = mode31_product(&g1, &mode31_product(&g2, &g3).unwrap().fuse_middle().unwrap())
                .unwrap()
                .fuse_middle()
                .unwrap();
            assert_eq!(left.dims(), right.dims());
            for (x, y) in left.data().iter().zip(right.data()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn permute_axes_moves_elements() {
        let t = DenseTensor::from_fn(vec![2, 3, 4], |c| (100 * c[0] + 10 * c[1] + c[2]) as f64).unwrap();
        let p = t.permute_axes(&[2, 0, 1]).unwrap();
        assert_eq!(p.dims(), &[4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(p.at(&[a, b, c]), t.at(&[b, c, a]));
                }
            }
        }
        assert!(t.permute_axes(&[0, 0, 1]).is_err());
    }

    #[test]
    fn construction_checks_lengths() {
        assert!(DenseTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(DenseTensor::new(vec![2, 0], vec![]).is_err());
    }
}
