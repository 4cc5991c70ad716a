//! Gaussian-process kernels, exact sampling via Cholesky factorization, and
//! conditional (kriging) posteriors.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Error;
use crate::Result;

/// Covariance families used across the crate.
///
/// `ExponentialSpaceTime` measures Euclidean distance on raw (s, t)
/// coordinates; `SquaredExponentialSpace` acts on the spatial coordinate only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    ExponentialSpaceTime,
    SquaredExponentialSpace,
}

/// A stationary kernel: family, marginal variance, and length scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub variance: f64,
    pub length_scale: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, variance: f64, length_scale: f64) -> Result<Self> {
        let spec = KernelSpec { family, variance, length_scale };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0) || !self.variance.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "kernel variance must be positive, got {}",
                self.variance
            )));
        }
        if !(self.length_scale > 0.0) || !self.length_scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "kernel length scale must be positive, got {}",
                self.length_scale
            )));
        }
        Ok(())
    }

    /// Kernel evaluation between two (s, t) coordinates.
    pub fn eval(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        match self.family {
            KernelFamily::ExponentialSpaceTime => {
                let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                self.variance * (-d / self.length_scale).exp()
            }
            KernelFamily::SquaredExponentialSpace => {
                let d2 = (a.0 - b.0).powi(2);
                self.variance * (-d2 / (2.0 * self.length_scale * self.length_scale)).exp()
            }
        }
    }
}

/// Pairwise kernel matrix between two coordinate lists. Exactly symmetric
/// when the lists are identical.
pub fn cov_matrix(kernel: &KernelSpec, points_a: &[(f64, f64)], points_b: &[(f64, f64)]) -> Result<DMatrix<f64>> {
    kernel.validate()?;
    if points_a.is_empty() || points_b.is_empty() {
        return Err(Error::InvalidArgument("cov_matrix needs nonempty point lists".into()));
    }
    let same = std::ptr::eq(points_a, points_b) || points_a == points_b;
    let mut k = DMatrix::zeros(points_a.len(), points_b.len());
    if same {
        for i in 0..points_a.len() {
            for j in 0..=i {
                let v = kernel.eval(points_a[i], points_a[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
    } else {
        for (i, &pa) in points_a.iter().enumerate() {
            for (j, &pb) in points_b.iter().enumerate() {
                k[(i, j)] = kernel.eval(pa, pb);
            }
        }
    }
    Ok(k)
}

/// Cholesky with escalating jitter: tries the matrix as-is, then adds
/// `scale * 1e-10, 1e-9, ..., 1e-4` to the diagonal before giving up.
/// Dense squared-exponential Gram matrices are routinely near-singular.
pub(crate) fn cholesky_with_jitter(
    mat: &DMatrix<f64>,
    scale: f64,
    context: &str,
) -> Result<Cholesky<f64, Dyn>> {
    if let Some(chol) = Cholesky::new(mat.clone()) {
        return Ok(chol);
    }
    let mut jitter = 1e-10 * scale;
    let max_jitter = 1e-4 * scale;
    while jitter <= max_jitter * (1.0 + 1e-12) {
        let mut jittered = mat.clone();
        for i in 0..mat.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok(chol);
        }
        jitter *= 10.0;
    }
    Err(Error::Factorization(context.to_string()))
}

/// A draw from a zero-mean GP at fixed query points. Deterministic given
/// (kernel, points, seed).
#[derive(Debug, Clone, PartialEq)]
pub struct GpSample {
    pub values: Vec<f64>,
    pub seed: u64,
}

/// Exact GP sampling: values = L z with L the (jittered) Cholesky factor of
/// the kernel matrix and z i.i.d. standard normals from a seeded generator.
pub fn sample_gp(kernel: &KernelSpec, points: &[(f64, f64)], seed: u64) -> Result<GpSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_gp_with(kernel, points, &mut rng, seed)
}

/// As [`sample_gp`] but drawing from a caller-managed generator, for use in
/// seed-streamed pipelines. `seed` is only recorded in the output.
pub fn sample_gp_with(
    kernel: &KernelSpec,
    points: &[(f64, f64)],
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<GpSample> {
    let k = cov_matrix(kernel, points, points)?;
    let chol = cholesky_with_jitter(&k, kernel.variance, "sample_gp kernel matrix")?;
    let z = DVector::from_iterator(
        points.len(),
        (0..points.len()).map(|_| StandardNormal.sample(rng)),
    );
    let values = chol.l() * z;
    Ok(GpSample { values: values.iter().copied().collect(), seed })
}

/// GP conditional (kriging): posterior mean and covariance at `query_points`
/// given noisy observations at `train_points`.
///
/// With no training points the prior (zero mean, prior covariance) is
/// returned.
pub fn gp_condition(
    kernel: &KernelSpec,
    train_points: &[(f64, f64)],
    train_values: &[f64],
    noise_var: f64,
    query_points: &[(f64, f64)],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    kernel.validate()?;
    if noise_var < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be nonnegative, got {noise_var}"
        )));
    }
    if train_points.len() != train_values.len() {
        return Err(Error::DimensionMismatch {
            context: "gp_condition training data".into(),
            expected: train_points.len(),
            actual: train_values.len(),
        });
    }
    let k_qq = cov_matrix(kernel, query_points, query_points)?;
    if train_points.is_empty() {
        return Ok((DVector::zeros(query_points.len()), k_qq));
    }
    let mut k_tt = cov_matrix(kernel, train_points, train_points)?;
    for i in 0..train_points.len() {
        k_tt[(i, i)] += noise_var;
    }
    let k_qt = cov_matrix(kernel, query_points, train_points)?;
    let chol = cholesky_with_jitter(&k_tt, kernel.variance + noise_var, "gp_condition train matrix")?;
    let alpha = chol.solve(&DVector::from_column_slice(train_values));
    let mean = &k_qt * alpha;
    let cov = &k_qq - &k_qt * chol.solve(&k_qt.transpose());
    Ok((mean, cov))
}
