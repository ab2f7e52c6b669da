//! Dense linear-algebra primitives, reproducible RNG streams, and data
//! standardization shared by the rest of the crate.

use nalgebra::{DMatrix, DVector, DVectorView};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// Jitter ladder used when factorizing nearly positive-semidefinite
/// matrices, as multiples of `trace/d`.
pub const JITTER_LADDER: [f64; 5] = [0.0, 1e-12, 1e-10, 1e-8, 1e-6];

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("empty data matrix")]
    Empty,
    #[error("ragged rows: row {row} has {got} columns, expected {expected}")]
    RaggedRows {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("dispersion matrix is singular (min eigenvalue {min_eigenvalue:.3e} below {threshold:.3e})")]
    SingularDispersion { min_eigenvalue: f64, threshold: f64 },
    #[error("need at least {needed} observations in dimension {dim}, got {got}")]
    TooFewRows { needed: usize, dim: usize, got: usize },
    #[error("matrix is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix not factorizable within the jitter ladder (max jitter {max_jitter:.3e})")]
    NotFactorizable { max_jitter: f64 },
}

/// A sample of `n` observations in `d` dimensions.
///
/// Observations are stored as matrix columns so that a single point is a
/// contiguous slice; the public API speaks in terms of rows (observations)
/// regardless.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    // d x n: column j is observation j
    data: DMatrix<f64>,
}

impl DataMatrix {
    /// Build from observation rows. All rows must share a length and every
    /// entry must be finite.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(NumericsError::Empty);
        }
        let d = rows[0].len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(NumericsError::RaggedRows {
                    row: i,
                    got: r.len(),
                    expected: d,
                });
            }
            for (j, v) in r.iter().enumerate() {
                if !v.is_finite() {
                    return Err(NumericsError::NonFinite { row: i, col: j });
                }
            }
        }
        let data = DMatrix::from_fn(d, rows.len(), |r, c| rows[c][r]);
        Ok(Self { data })
    }

    /// Build from a `d x n` matrix whose columns are observations.
    pub fn from_points(data: DMatrix<f64>) -> Result<Self, NumericsError> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(NumericsError::Empty);
        }
        for c in 0..data.ncols() {
            for r in 0..data.nrows() {
                if !data[(r, c)].is_finite() {
                    return Err(NumericsError::NonFinite { row: c, col: r });
                }
            }
        }
        Ok(Self { data })
    }

    /// Number of observations.
    pub fn n_points(&self) -> usize {
        self.data.ncols()
    }

    /// Dimension of each observation.
    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    /// The `i`-th observation as a column view.
    pub fn point(&self, i: usize) -> DVectorView<'_, f64> {
        self.data.column(i)
    }

    pub fn points(&self) -> impl Iterator<Item = DVectorView<'_, f64>> {
        self.data.column_iter()
    }

    /// Underlying `d x n` storage (columns are observations).
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Concatenate two samples of equal dimension.
    pub fn pooled(&self, other: &DataMatrix) -> Result<DataMatrix, NumericsError> {
        if self.dim() != other.dim() {
            return Err(NumericsError::ShapeMismatch {
                context: format!("pooling dims {} and {}", self.dim(), other.dim()),
            });
        }
        let mut data = DMatrix::zeros(self.dim(), self.n_points() + other.n_points());
        data.columns_mut(0, self.n_points()).copy_from(&self.data);
        data.columns_mut(self.n_points(), other.n_points())
            .copy_from(&other.data);
        Ok(DataMatrix { data })
    }

    /// Column mean over observations.
    pub fn mean(&self) -> DVector<f64> {
        let n = self.n_points() as f64;
        let mut m = DVector::zeros(self.dim());
        for p in self.points() {
            m += p;
        }
        m / n
    }

    /// True when every observation equals the first one.
    pub fn is_degenerate(&self) -> bool {
        let first = self.point(0);
        self.points().all(|p| p == first)
    }

    /// Checksum of the raw values, used to witness that paired experiments
    /// fed identical data to every test.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for v in self.data.iter() {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Affine transform `x -> factor^{-1} (x - mean)` fitted by maximum
/// likelihood (dispersion divisor `n`).
#[derive(Debug, Clone)]
pub struct StandardizationTransform {
    pub mean: DVector<f64>,
    pub dispersion: DMatrix<f64>,
    /// Lower-triangular `A` with `A Aᵀ = dispersion`.
    pub factor: DMatrix<f64>,
}

/// Fit the MLE mean and dispersion of a sample and the Cholesky root of the
/// dispersion.
pub fn fit_standardization(x: &DataMatrix) -> Result<StandardizationTransform, NumericsError> {
    let (n, d) = (x.n_points(), x.dim());
    // n <= d always yields a singular dispersion, reported as such below
    let mean = x.mean();
    let mut disp = DMatrix::zeros(d, d);
    for p in x.points() {
        let c = p - &mean;
        disp.syger(1.0 / n as f64, &c, &c, 1.0);
    }
    // syger fills the lower triangle; mirror it
    for i in 0..d {
        for j in (i + 1)..d {
            disp[(i, j)] = disp[(j, i)];
        }
    }
    let (eigvals, _) = sym_eigen(&disp)?;
    let threshold = 1e-12 * disp.trace() / d as f64;
    let min_eig = eigvals[d - 1];
    if min_eig <= threshold {
        return Err(NumericsError::SingularDispersion {
            min_eigenvalue: min_eig,
            threshold,
        });
    }
    let (factor, _) = cholesky(&disp)?;
    Ok(StandardizationTransform {
        mean,
        dispersion: disp,
        factor,
    })
}

/// Replace each observation `x` by `A^{-1}(x - mean)`.
pub fn apply_standardization(
    x: &DataMatrix,
    t: &StandardizationTransform,
) -> Result<DataMatrix, NumericsError> {
    if x.dim() != t.mean.len() {
        return Err(NumericsError::ShapeMismatch {
            context: format!("data dim {} vs transform dim {}", x.dim(), t.mean.len()),
        });
    }
    let mut out = x.as_matrix().clone();
    for mut col in out.column_iter_mut() {
        col -= &t.mean;
    }
    let solved = t
        .factor
        .clone()
        .solve_lower_triangular(&out)
        .ok_or(NumericsError::NotFactorizable { max_jitter: 0.0 })?;
    DataMatrix::from_points(solved)
}

/// Invert a standardization: `z -> factor z + mean`.
pub fn unapply_standardization(
    z: &DataMatrix,
    t: &StandardizationTransform,
) -> Result<DataMatrix, NumericsError> {
    if z.dim() != t.mean.len() {
        return Err(NumericsError::ShapeMismatch {
            context: format!("data dim {} vs transform dim {}", z.dim(), t.mean.len()),
        });
    }
    let mut out = &t.factor * z.as_matrix();
    for mut col in out.column_iter_mut() {
        col += &t.mean;
    }
    DataMatrix::from_points(out)
}

fn symmetry_defect(m: &DMatrix<f64>) -> f64 {
    let scale = 1.0 + m.amax();
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending
/// with matching orthonormal eigenvector columns.
pub fn sym_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>), NumericsError> {
    if m.nrows() != m.ncols() {
        return Err(NumericsError::ShapeMismatch {
            context: format!("{}x{} matrix passed to sym_eigen", m.nrows(), m.ncols()),
        });
    }
    let asymmetry = symmetry_defect(m);
    if asymmetry > 1e-8 {
        return Err(NumericsError::NotSymmetric { asymmetry });
    }
    let sym = (m + m.transpose()) * 0.5;
    let decomp = nalgebra::SymmetricEigen::new(sym);
    let d = m.nrows();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        decomp.eigenvalues[b]
            .partial_cmp(&decomp.eigenvalues[a])
            .unwrap()
    });
    let values = DVector::from_fn(d, |i, _| decomp.eigenvalues[order[i]]);
    let vectors = DMatrix::from_fn(d, d, |r, c| decomp.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Lower-triangular factorization of a symmetric positive-semidefinite
/// matrix, with a diagonal jitter ladder for matrices that are PSD only up
/// to Monte Carlo noise. Returns `(L, applied_jitter)` with
/// `L Lᵀ = M + applied_jitter · I`.
pub fn cholesky(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64), NumericsError> {
    if m.nrows() != m.ncols() {
        return Err(NumericsError::ShapeMismatch {
            context: format!("{}x{} matrix passed to cholesky", m.nrows(), m.ncols()),
        });
    }
    let asymmetry = symmetry_defect(m);
    if asymmetry > 1e-8 {
        return Err(NumericsError::NotSymmetric { asymmetry });
    }
    let d = m.nrows();
    let unit = m.trace() / d as f64;
    let mut max_jitter = 0.0;
    for rung in JITTER_LADDER {
        let eps = rung * unit;
        max_jitter = eps;
        if let Some(l) = psd_cholesky(m, eps) {
            return Ok((l, eps));
        }
    }
    Err(NumericsError::NotFactorizable { max_jitter })
}

/// Pivot-free semidefinite Cholesky; zero pivots produce zero columns.
/// Returns `None` when a pivot is decisively negative or a zero pivot has a
/// nonzero residual column (matrix not PSD at this jitter).
fn psd_cholesky(m: &DMatrix<f64>, eps: f64) -> Option<DMatrix<f64>> {
    let d = m.nrows();
    let mut l = DMatrix::zeros(d, d);
    let scale = 1.0 + m.amax();
    let pivot_tol = 1e-12 * scale;
    let residual_tol = 1e-9 * scale;
    for j in 0..d {
        let mut s = m[(j, j)] + eps;
        for k in 0..j {
            s -= l[(j, k)] * l[(j, k)];
        }
        if s > pivot_tol {
            let pivot = s.sqrt();
            l[(j, j)] = pivot;
            for i in (j + 1)..d {
                let mut v = m[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = v / pivot;
            }
        } else if s >= -pivot_tol {
            // semidefinite direction: the whole residual column must vanish
            for i in (j + 1)..d {
                let mut v = m[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                if v.abs() > residual_tol {
                    return None;
                }
            }
        } else {
            return None;
        }
    }
    Some(l)
}

/// A reproducible random stream: identical `(master_seed, stream_id)` pairs
/// yield identical draws, distinct stream ids are independent. Substreams
/// are derived deterministically so parallel loops stay order-independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            stream_id: 0,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derive a child stream; chaining labels yields distinct independent
    /// streams for nested parallel loops.
    pub fn substream(&self, label: u64) -> Self {
        Self {
            master_seed: self.master_seed,
            stream_id: splitmix64(self.stream_id ^ label.wrapping_mul(0xA24BAED4963EE407)),
        }
    }

    /// Instantiate the generator for this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn cross_2d() -> DataMatrix {
        DataMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ])
        .unwrap()
    }

    #[test]
    fn fit_rejects_rank_deficient_two_point_cloud() {
        let x = DataMatrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        match fit_standardization(&x) {
            Err(NumericsError::SingularDispersion { .. }) => {}
            other => panic!("expected SingularDispersion, got {other:?}"),
        }
    }

    #[test]
    fn fit_cross_sample() {
        let t = fit_standardization(&cross_2d()).unwrap();
        assert_relative_eq!(t.mean[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(t.mean[1], 0.0, epsilon = 1e-14);
        assert_relative_eq!(t.dispersion[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(t.dispersion[(1, 1)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(t.dispersion[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn fit_large_standard_normal_sample() {
        let mut rng = RngStream::new(7).rng();
        let rows: Vec<Vec<f64>> = (0..100_000)
            .map(|_| {
                (0..3)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect()
            })
            .collect();
        let x = DataMatrix::from_rows(&rows).unwrap();
        let t = fit_standardization(&x).unwrap();
        for i in 0..3 {
            assert!(t.mean[i].abs() < 0.02);
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((t.dispersion[(i, j)] - target).abs() < 0.05);
            }
        }
    }

    #[test]
    fn apply_identity_leaves_data_unchanged() {
        let x = cross_2d();
        let t = StandardizationTransform {
            mean: DVector::zeros(2),
            dispersion: DMatrix::identity(2, 2),
            factor: DMatrix::identity(2, 2),
        };
        let y = apply_standardization(&x, &t).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn standardization_round_trip() {
        let mut rng = RngStream::new(11).rng();
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let a: f64 = rng.sample(rand_distr::StandardNormal);
                let b: f64 = rng.sample(rand_distr::StandardNormal);
                vec![2.0 * a + 1.0, a + 0.5 * b - 3.0]
            })
            .collect();
        let x = DataMatrix::from_rows(&rows).unwrap();
        let t = fit_standardization(&x).unwrap();
        let z = apply_standardization(&x, &t).unwrap();
        let tz = fit_standardization(&z).unwrap();
        for i in 0..2 {
            assert!(tz.mean[i].abs() < 1e-10);
            for j in 0..2 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((tz.dispersion[(i, j)] - target).abs() < 1e-10);
            }
        }
        let back = unapply_standardization(&z, &t).unwrap();
        for (a, b) in back.as_matrix().iter().zip(x.as_matrix().iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn one_dimensional_standardization() {
        let x = DataMatrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let t = fit_standardization(&x).unwrap();
        assert_relative_eq!(t.mean[0], 2.0);
        assert_relative_eq!(t.dispersion[(0, 0)], 1.0);
        let z = apply_standardization(&x, &t).unwrap();
        assert_relative_eq!(z.point(0)[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(z.point(1)[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sym_eigen_identity() {
        let (vals, _) = sym_eigen(&DMatrix::identity(3, 3)).unwrap();
        for v in vals.iter() {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sym_eigen_rotated_spectrum() {
        let c = (std::f64::consts::FRAC_PI_4).cos();
        let s = (std::f64::consts::FRAC_PI_4).sin();
        let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let m = &r * DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0])) * r.transpose();
        let (vals, vecs) = sym_eigen(&m).unwrap();
        assert_relative_eq!(vals[0], 3.0, epsilon = 1e-10);
        assert_relative_eq!(vals[1], 1.0, epsilon = 1e-10);
        let rebuilt = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!((rebuilt - &m).amax() < 1e-10);
    }

    #[test]
    fn sym_eigen_rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            sym_eigen(&m),
            Err(NumericsError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn sym_eigen_reconstruction_random() {
        let mut rng = RngStream::new(3).rng();
        for d in [2usize, 10, 50] {
            let mut m = DMatrix::zeros(d, d);
            for i in 0..d {
                for j in 0..=i {
                    let v: f64 = rng.random::<f64>() * 2.0 - 1.0;
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            let (vals, vecs) = sym_eigen(&m).unwrap();
            let rebuilt = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
            assert!((rebuilt - &m).amax() <= 1e-8 * (1.0 + m.amax()));
        }
    }

    #[test]
    fn cholesky_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let (l, eps) = cholesky(&m).unwrap();
        assert_eq!(eps, 0.0);
        assert_relative_eq!(l[(0, 0)], 2.0);
        assert_relative_eq!(l[(1, 1)], 3.0);
        assert_relative_eq!(l[(1, 0)], 0.0);
    }

    #[test]
    fn cholesky_hand_worked() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (l, eps) = cholesky(&m).unwrap();
        assert_eq!(eps, 0.0);
        assert_relative_eq!(l[(0, 0)], 2f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(l[(1, 0)], 1.0 / 2f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(l[(1, 1)], (3.0f64 / 2.0).sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn cholesky_zero_matrix() {
        let m = DMatrix::zeros(3, 3);
        let (l, eps) = cholesky(&m).unwrap();
        assert_eq!(eps, 0.0);
        assert_eq!(l, DMatrix::zeros(3, 3));
    }

    #[test]
    fn cholesky_semidefinite_and_noisy() {
        // rank-1 PSD
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let m = &v * v.transpose();
        let (l, eps) = cholesky(&m).unwrap();
        let err = (&l * l.transpose() - &m).amax();
        assert!(err <= 1e-9 * (1.0 + m.amax()) + eps);

        // small negative noise gets absorbed by the ladder
        let mut noisy = m.clone();
        noisy[(2, 2)] -= 1e-11;
        let (l2, eps2) = cholesky(&noisy).unwrap();
        let err2 = (&l2 * l2.transpose() - &noisy).amax();
        assert!(err2 <= 1e-9 * (1.0 + noisy.amax()) + eps2 + 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            cholesky(&m),
            Err(NumericsError::NotFactorizable { .. })
        ));
    }

    #[test]
    fn rng_stream_is_reproducible() {
        let s = RngStream::new(42).substream(5);
        let a: Vec<u64> = {
            let mut r = s.rng();
            (0..16).map(|_| r.random()).collect()
        };
        let b: Vec<u64> = {
            let mut r = s.rng();
            (0..16).map(|_| r.random()).collect()
        };
        assert_eq!(a, b);
        let c: Vec<u64> = {
            let mut r = RngStream::new(42).substream(6).rng();
            (0..16).map(|_| r.random()).collect()
        };
        assert_ne!(a, c);
    }
}
