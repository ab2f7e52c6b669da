//! Samplers, densities, CDFs, and model spatial quantiles for the
//! distribution families used in the experiments: multivariate normal,
//! spherical Laplace and Cauchy, skew-normal, two-component mixtures, and
//! discretized Brownian paths.

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::numerics::{cholesky, DataMatrix, NumericsError, RngStream};
use crate::spatial::{spatial_quantile, QuantileIndex, SolverConfig};

#[derive(Debug, Error)]
pub enum DistributionError {
    #[error("invalid distribution spec: {reason}")]
    BadSpec { reason: String },
    #[error("no closed-form CDF for this family; use Monte Carlo")]
    NoClosedForm,
    #[error("no density formula for this family")]
    NoDensity,
    #[error("closed radial quantiles require a spherically symmetric spec")]
    NotSpherical,
    #[error("radial root finder failed to bracket the quantile at norm {norm}")]
    NoConvergence { norm: f64 },
    #[error("dimension mismatch: spec is {spec}, argument is {arg}")]
    DimensionMismatch { spec: usize, arg: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Standard univariate normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Declarative description of a sampling distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum DistributionSpec {
    /// Multivariate normal with arbitrary mean and SPD covariance.
    Normal {
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    },
    /// Spherical Laplace with density proportional to `exp(-‖x‖)`.
    StdLaplace { dim: usize },
    /// Spherical Cauchy (multivariate t with one degree of freedom).
    StdCauchy { dim: usize },
    /// Skew-normal with skewness vector `delta` and correlation `psi`.
    SkewNormal {
        delta: DVector<f64>,
        psi: DMatrix<f64>,
    },
    /// Two-component mixture drawing from `contaminant` with probability
    /// `beta`.
    Mixture {
        beta: f64,
        base: Box<DistributionSpec>,
        contaminant: Box<DistributionSpec>,
    },
    /// Brownian motion observed on a fixed time grid, with covariance
    /// `scale * min(s, t)` and constant mean level.
    BrownianPath {
        mean_level: f64,
        scale: f64,
        grid: Vec<f64>,
    },
}

impl DistributionSpec {
    pub fn standard_normal(dim: usize) -> Self {
        DistributionSpec::Normal {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DistributionSpec::Normal { mean, .. } => mean.len(),
            DistributionSpec::StdLaplace { dim } | DistributionSpec::StdCauchy { dim } => *dim,
            DistributionSpec::SkewNormal { delta, .. } => delta.len(),
            DistributionSpec::Mixture { base, .. } => base.dim(),
            DistributionSpec::BrownianPath { grid, .. } => grid.len(),
        }
    }

    /// Check the structural invariants of the spec.
    pub fn validate(&self) -> Result<(), DistributionError> {
        let bad = |reason: String| Err(DistributionError::BadSpec { reason });
        match self {
            DistributionSpec::Normal { mean, cov } => {
                if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
                    return bad(format!(
                        "covariance is {}x{} for mean of length {}",
                        cov.nrows(),
                        cov.ncols(),
                        mean.len()
                    ));
                }
                match cholesky(cov) {
                    Ok((_, eps)) if eps == 0.0 => Ok(()),
                    _ => bad("covariance is not positive-definite".into()),
                }
            }
            DistributionSpec::StdLaplace { dim } | DistributionSpec::StdCauchy { dim } => {
                if *dim == 0 {
                    bad("dimension must be positive".into())
                } else {
                    Ok(())
                }
            }
            DistributionSpec::SkewNormal { delta, psi } => {
                if delta.iter().any(|d| d.abs() >= 1.0) {
                    return bad("skewness entries must satisfy |delta| < 1".into());
                }
                if psi.nrows() != delta.len() || psi.ncols() != delta.len() {
                    return bad("psi shape does not match delta".into());
                }
                for i in 0..psi.nrows() {
                    if (psi[(i, i)] - 1.0).abs() > 1e-12 {
                        return bad("psi must have unit diagonal".into());
                    }
                }
                match cholesky(psi) {
                    Ok((_, eps)) if eps == 0.0 => Ok(()),
                    _ => bad("psi is not positive-definite".into()),
                }
            }
            DistributionSpec::Mixture {
                beta,
                base,
                contaminant,
            } => {
                if !(0.0..=1.0).contains(beta) {
                    return bad(format!("mixture weight {beta} outside [0, 1]"));
                }
                if base.dim() != contaminant.dim() {
                    return bad("mixture components must share a dimension".into());
                }
                base.validate()?;
                contaminant.validate()
            }
            DistributionSpec::BrownianPath { scale, grid, .. } => {
                if *scale < 0.0 {
                    return bad("scale must be nonnegative".into());
                }
                if grid.is_empty() {
                    return bad("time grid is empty".into());
                }
                let mut prev = 0.0;
                for &t in grid {
                    if t <= prev || t > 1.0 {
                        return bad("time grid must be strictly increasing within (0, 1]".into());
                    }
                    prev = t;
                }
                Ok(())
            }
        }
    }

    /// Center of symmetry for spherically symmetric specs.
    fn spherical_center(&self) -> Option<DVector<f64>> {
        match self {
            DistributionSpec::Normal { mean, cov } => {
                let d = mean.len();
                let sigma = cov[(0, 0)];
                for i in 0..d {
                    for j in 0..d {
                        let want = if i == j { sigma } else { 0.0 };
                        if (cov[(i, j)] - want).abs() > 1e-12 {
                            return None;
                        }
                    }
                }
                Some(mean.clone())
            }
            DistributionSpec::StdLaplace { dim } | DistributionSpec::StdCauchy { dim } => {
                Some(DVector::zeros(*dim))
            }
            DistributionSpec::Mixture {
                base, contaminant, ..
            } => {
                let a = base.spherical_center()?;
                let b = contaminant.spherical_center()?;
                ((&a - &b).norm() < 1e-12).then_some(a)
            }
            _ => None,
        }
    }

    pub fn is_spherical(&self) -> bool {
        self.spherical_center().is_some()
    }
}

fn standard_normal_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

fn uniform_sphere_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = standard_normal_vector(dim, rng);
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

fn sample_one<R: Rng + ?Sized>(spec: &DistributionSpec, rng: &mut R) -> DVector<f64> {
    match spec {
        DistributionSpec::Normal { mean, cov } => {
            let (l, _) = cholesky(cov).expect("validated covariance");
            mean + l * standard_normal_vector(mean.len(), rng)
        }
        DistributionSpec::StdLaplace { dim } => {
            let radius = Gamma::new(*dim as f64, 1.0).unwrap().sample(rng);
            uniform_sphere_direction(*dim, rng) * radius
        }
        DistributionSpec::StdCauchy { dim } => {
            let z = standard_normal_vector(*dim, rng);
            let g: f64 = rng.sample(StandardNormal);
            let chi = g.abs().max(1e-300);
            z / chi
        }
        DistributionSpec::SkewNormal { delta, psi } => {
            let (l, _) = cholesky(psi).expect("validated correlation");
            let y = &l * standard_normal_vector(delta.len(), rng);
            let y0: f64 = rng.sample(StandardNormal);
            let a = y0.abs();
            DVector::from_fn(delta.len(), |i, _| {
                delta[i] * a + (1.0 - delta[i] * delta[i]).sqrt() * y[i]
            })
        }
        DistributionSpec::Mixture {
            beta,
            base,
            contaminant,
        } => {
            let pick_contaminant = rng.random::<f64>() < *beta;
            if pick_contaminant {
                sample_one(contaminant, rng)
            } else {
                sample_one(base, rng)
            }
        }
        DistributionSpec::BrownianPath {
            mean_level,
            scale,
            grid,
        } => {
            let mut w = 0.0;
            let mut prev_t = 0.0;
            DVector::from_fn(grid.len(), |i, _| {
                let dt = grid[i] - prev_t;
                prev_t = grid[i];
                let z: f64 = rng.sample(StandardNormal);
                w += dt.sqrt() * z;
                mean_level + scale.sqrt() * w
            })
        }
    }
}

/// Draw `n` i.i.d. observations from the spec.
pub fn sample<R: Rng + ?Sized>(
    spec: &DistributionSpec,
    n: usize,
    rng: &mut R,
) -> Result<DataMatrix, DistributionError> {
    spec.validate()?;
    if n == 0 {
        return Err(DistributionError::BadSpec {
            reason: "sample size must be at least 1".into(),
        });
    }
    let d = spec.dim();
    let mut data = DMatrix::zeros(d, n);
    for j in 0..n {
        data.set_column(j, &sample_one(spec, rng));
    }
    Ok(DataMatrix::from_points(data)?)
}

fn log_mvn_density(x: DVectorView<'_, f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = mean.len() as f64;
    let (l, _) = cholesky(cov).expect("validated covariance");
    let centered = x - mean;
    let w = l
        .solve_lower_triangular(&centered)
        .expect("positive-definite factor");
    let log_det: f64 = (0..mean.len()).map(|i| l[(i, i)].ln()).sum();
    -0.5 * d * (2.0 * std::f64::consts::PI).ln() - log_det - 0.5 * w.norm_squared()
}

/// Pointwise density. Brownian paths carry no density here.
pub fn density(
    spec: &DistributionSpec,
    x: DVectorView<'_, f64>,
) -> Result<f64, DistributionError> {
    if spec.dim() != x.len() {
        return Err(DistributionError::DimensionMismatch {
            spec: spec.dim(),
            arg: x.len(),
        });
    }
    match spec {
        DistributionSpec::Normal { mean, cov } => Ok(log_mvn_density(x, mean, cov).exp()),
        DistributionSpec::StdLaplace { dim } => {
            let d = *dim as f64;
            let log_c = ln_gamma(d / 2.0)
                - (2.0f64).ln()
                - ln_gamma(d)
                - (d / 2.0) * std::f64::consts::PI.ln();
            Ok((log_c - x.norm()).exp())
        }
        DistributionSpec::StdCauchy { dim } => {
            let d = *dim as f64;
            let log_c = ln_gamma((d + 1.0) / 2.0) - ((d + 1.0) / 2.0) * std::f64::consts::PI.ln();
            Ok((log_c - 0.5 * (d + 1.0) * (1.0 + x.norm_squared()).ln()).exp())
        }
        DistributionSpec::SkewNormal { delta, psi } => {
            let dim = delta.len();
            let lambda = DVector::from_fn(dim, |i, _| {
                delta[i] / (1.0 - delta[i] * delta[i]).sqrt()
            });
            let cap_delta = DVector::from_fn(dim, |i, _| (1.0 - delta[i] * delta[i]).sqrt());
            let mut omega = psi + &lambda * lambda.transpose();
            for i in 0..dim {
                for j in 0..dim {
                    omega[(i, j)] *= cap_delta[i] * cap_delta[j];
                }
            }
            let psi_inv_lambda = psi
                .clone()
                .lu()
                .solve(&lambda)
                .expect("validated correlation");
            let denom = (1.0 + lambda.dot(&psi_inv_lambda)).sqrt();
            let alpha = DVector::from_fn(dim, |i, _| psi_inv_lambda[i] / cap_delta[i] / denom);
            let phi = log_mvn_density(x, &DVector::zeros(dim), &omega).exp();
            Ok(2.0 * phi * std_normal_cdf(alpha.dot(&x)))
        }
        DistributionSpec::Mixture {
            beta,
            base,
            contaminant,
        } => {
            let fb = density(base, x)?;
            let fc = density(contaminant, x)?;
            Ok((1.0 - beta) * fb + beta * fc)
        }
        DistributionSpec::BrownianPath { .. } => Err(DistributionError::NoDensity),
    }
}

/// How to evaluate `P(x <= t)` coordinatewise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CdfMethod {
    /// Exact product form; only normal specs with diagonal covariance.
    Closed,
    /// Empirical proportion over `draws` fresh samples seeded independently.
    MonteCarlo { draws: usize, seed: u64 },
}

fn diagonal_normal_params(
    spec: &DistributionSpec,
) -> Option<(DVector<f64>, DVector<f64>)> {
    if let DistributionSpec::Normal { mean, cov } = spec {
        let d = mean.len();
        for i in 0..d {
            for j in 0..d {
                if i != j && cov[(i, j)].abs() > 1e-12 {
                    return None;
                }
            }
        }
        let sd = DVector::from_fn(d, |i, _| cov[(i, i)].sqrt());
        Some((mean.clone(), sd))
    } else {
        None
    }
}

/// `P(x <= t)` coordinatewise.
pub fn cdf(
    spec: &DistributionSpec,
    t: DVectorView<'_, f64>,
    method: CdfMethod,
) -> Result<f64, DistributionError> {
    if spec.dim() != t.len() {
        return Err(DistributionError::DimensionMismatch {
            spec: spec.dim(),
            arg: t.len(),
        });
    }
    match method {
        CdfMethod::Closed => {
            let (mean, sd) = diagonal_normal_params(spec).ok_or(DistributionError::NoClosedForm)?;
            Ok((0..t.len())
                .map(|i| std_normal_cdf((t[i] - mean[i]) / sd[i]))
                .product())
        }
        CdfMethod::MonteCarlo { draws, seed } => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let sample = sample(spec, draws, &mut rng)?;
            let hits = sample
                .points()
                .filter(|p| p.iter().zip(t.iter()).all(|(a, b)| a <= b))
                .count();
            Ok(hits as f64 / draws as f64)
        }
    }
}

/// Number of radial cache nodes for closed-radial model quantiles.
const RADIAL_TABLE_SIZE: usize = 512;

/// Default Monte Carlo draws behind the radial expectation.
pub const RADIAL_EXPECTATION_DRAWS: usize = 100_000;

#[derive(Debug, Clone)]
enum ModelQuantileInner {
    /// Spherical families: quantiles lie on rays from the center, with the
    /// radius read from a cached monotone table over index norms.
    Radial {
        center: DVector<f64>,
        max_norm: f64,
        radii: Vec<f64>,
    },
    /// Generic fallback: empirical spatial quantiles of one large frozen
    /// sample.
    Empirical {
        sample: DataMatrix,
        solver: SolverConfig,
    },
}

/// Spatial quantile function of a model distribution.
#[derive(Debug, Clone)]
pub struct ModelQuantileFunction {
    spec: Option<DistributionSpec>,
    inner: ModelQuantileInner,
}

/// Precomputed per-draw quantities for the scalar radial equation
/// `E[(r - x₁) / ‖r e₁ - x‖] = ‖u‖`.
struct RadialDraws {
    first: Vec<f64>,
    rest_sq: Vec<f64>,
}

impl RadialDraws {
    fn of(sample: &DataMatrix) -> Self {
        let mut first = Vec::with_capacity(2 * sample.n_points());
        let mut rest_sq = Vec::with_capacity(2 * sample.n_points());
        for p in sample.points() {
            let f = p[0];
            let s = p.norm_squared() - f * f;
            // antithetic pair keeps the expectation exactly zero at r = 0
            first.push(f);
            rest_sq.push(s);
            first.push(-f);
            rest_sq.push(s);
        }
        Self { first, rest_sq }
    }

    fn mean_at(&self, r: f64) -> f64 {
        let mut total = 0.0;
        for (f, s) in self.first.iter().zip(&self.rest_sq) {
            let dx = r - f;
            let denom = (dx * dx + s).sqrt();
            if denom > 0.0 {
                total += dx / denom;
            }
        }
        total / self.first.len() as f64
    }
}

impl ModelQuantileFunction {
    /// Build the radial quantile table for a spherical spec by Monte Carlo
    /// estimation of the defining expectation and bisection in the radius.
    pub fn closed_radial(
        spec: &DistributionSpec,
        draws: usize,
        stream: &RngStream,
    ) -> Result<Self, DistributionError> {
        spec.validate()?;
        let center = spec
            .spherical_center()
            .ok_or(DistributionError::NotSpherical)?;
        let mut rng = stream.rng();
        let raw = sample(spec, draws.max(2), &mut rng)?;
        // center the draws so the radial law is about the origin
        let mut centered = raw.as_matrix().clone();
        for mut col in centered.column_iter_mut() {
            col -= &center;
        }
        let draws = RadialDraws::of(&DataMatrix::from_points(centered)?);

        let max_norm = crate::spatial::DEFAULT_GRID_RADIUS;
        let mut radii = Vec::with_capacity(RADIAL_TABLE_SIZE);
        let mut lo = 0.0f64;
        for k in 0..RADIAL_TABLE_SIZE {
            let target = max_norm * k as f64 / (RADIAL_TABLE_SIZE - 1) as f64;
            if k == 0 {
                radii.push(0.0);
                continue;
            }
            // the expectation is nondecreasing in r, so the previous radius
            // brackets from below
            let mut hi = (lo * 2.0).max(1.0);
            let mut expansions = 0;
            while draws.mean_at(hi) < target {
                hi *= 2.0;
                expansions += 1;
                if expansions > 200 {
                    return Err(DistributionError::NoConvergence { norm: target });
                }
            }
            let mut a = lo;
            let mut b = hi;
            for _ in 0..80 {
                let mid = 0.5 * (a + b);
                if draws.mean_at(mid) < target {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            let r = 0.5 * (a + b);
            radii.push(r);
            lo = r;
        }
        Ok(Self {
            spec: Some(spec.clone()),
            inner: ModelQuantileInner::Radial {
                center,
                max_norm,
                radii,
            },
        })
    }

    /// Freeze one large sample and answer quantile queries empirically.
    pub fn large_sample_empirical(
        spec: &DistributionSpec,
        n: usize,
        stream: &RngStream,
        solver: SolverConfig,
    ) -> Result<Self, DistributionError> {
        spec.validate()?;
        let mut rng = stream.rng();
        let sample = sample(spec, n, &mut rng)?;
        Ok(Self {
            spec: Some(spec.clone()),
            inner: ModelQuantileInner::Empirical { sample, solver },
        })
    }

    /// Closed radial table when the spec is spherical, otherwise the
    /// large-sample empirical fallback with the same draw budget.
    pub fn auto(
        spec: &DistributionSpec,
        draws: usize,
        stream: &RngStream,
        solver: SolverConfig,
    ) -> Result<Self, DistributionError> {
        if spec.is_spherical() {
            Self::closed_radial(spec, draws, stream)
        } else {
            Self::large_sample_empirical(spec, draws, stream, solver)
        }
    }

    /// Treat an explicit sample as the reference law; quantile queries are
    /// answered by the empirical solver on it.
    pub fn empirical_from_sample(sample: DataMatrix, solver: SolverConfig) -> Self {
        Self {
            spec: None,
            inner: ModelQuantileInner::Empirical { sample, solver },
        }
    }

    pub fn spec(&self) -> Option<&DistributionSpec> {
        self.spec.as_ref()
    }

    pub fn dim(&self) -> usize {
        match &self.inner {
            ModelQuantileInner::Radial { center, .. } => center.len(),
            ModelQuantileInner::Empirical { sample, .. } => sample.dim(),
        }
    }

    /// The `u`-th spatial quantile of the model. Index norms above the
    /// table range (0.99) are clamped to it.
    pub fn quantile(&self, u: &QuantileIndex) -> Result<DVector<f64>, DistributionError> {
        if u.dim() != self.dim() {
            return Err(DistributionError::DimensionMismatch {
                spec: self.dim(),
                arg: u.dim(),
            });
        }
        match &self.inner {
            ModelQuantileInner::Radial {
                center,
                max_norm,
                radii,
            } => {
                let norm = u.norm().min(*max_norm);
                if norm == 0.0 {
                    return Ok(center.clone());
                }
                let pos = norm / max_norm * (RADIAL_TABLE_SIZE - 1) as f64;
                let i = (pos.floor() as usize).min(RADIAL_TABLE_SIZE - 2);
                let frac = pos - i as f64;
                let r = radii[i] * (1.0 - frac) + radii[i + 1] * frac;
                Ok(center + u.coords() * (r / u.norm()))
            }
            ModelQuantileInner::Empirical { sample, solver } => {
                let res = spatial_quantile(sample, u, solver).map_err(|_| {
                    DistributionError::NoConvergence { norm: u.norm() }
                })?;
                Ok(res.point)
            }
        }
    }

    /// Radius of the cached quantile ray at a given index norm (radial
    /// method only); used by diagnostics and tests.
    pub fn radial_radius(&self, norm: f64) -> Option<f64> {
        match &self.inner {
            ModelQuantileInner::Radial {
                max_norm, radii, ..
            } => {
                let norm = norm.min(*max_norm);
                let pos = norm / max_norm * (RADIAL_TABLE_SIZE - 1) as f64;
                let i = (pos.floor() as usize).min(RADIAL_TABLE_SIZE - 2);
                let frac = pos - i as f64;
                Some(radii[i] * (1.0 - frac) + radii[i + 1] * frac)
            }
            _ => None,
        }
    }
}
