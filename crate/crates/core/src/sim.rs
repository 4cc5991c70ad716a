//! End-to-end synthetic data generation for the Burgers testbed.
//!
//! The generative process on an n x T space-time grid:
//! 1. two covariate fields drawn from a space-time exponential GP,
//! 2. mean field mu = X beta,
//! 3. latent dynamic field from the spectral Burgers solve,
//! 4. per-time spatial discrepancy fields from a squared-exponential GP,
//! 5. truth u = mu + u_tilde + nu,
//! 6. i.i.d. Gaussian measurement noise and a fixed-in-time spatial
//!    missingness pattern.
//!
//! Every random component consumes its own stream of a counter-based seeded
//! generator, so adding a component never perturbs existing draws and equal
//! seeds give bitwise-identical output.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::burgers::{solve, BurgersConfig};
use crate::error::Error;
use crate::gp::{cholesky_with_jitter, cov_matrix, KernelFamily, KernelSpec};
use crate::grid::{build_grid, make_mask, write_multi_csv, Field, SpaceTimeGrid};
use crate::Result;

/// Stream ids for the counter-based seed split.
mod streams {
    pub const COVARIATE_X1: u64 = 0;
    pub const COVARIATE_X2: u64 = 1;
    pub const DISCREPANCY: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const MASK: u64 = 4;
}

/// Full configuration of the data-generating process. The default reproduces
/// the standard testbed: 51 x 25 grid on [-pi, pi] x [0, 5], beta =
/// (0.3, -0.2), lambda = 0.1, noise std 0.2, exponential space-time covariate
/// kernel (variance 0.1, length scale 8.03/20), squared-exponential
/// discrepancy kernel (variance 0.05, length scale 0.15), 50% of spatial
/// columns missing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_space: usize,
    pub n_time: usize,
    pub s_min: f64,
    pub s_max: f64,
    pub t_max: f64,
    pub beta: [f64; 2],
    pub lambda: f64,
    /// Measurement error standard deviation.
    pub sigma_d: f64,
    pub missing_fraction: f64,
    pub covariate_variance: f64,
    pub covariate_length_scale: f64,
    pub discrepancy_variance: f64,
    pub discrepancy_length_scale: f64,
    pub solver_n_internal: usize,
    pub solver_dt: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_space: 51,
            n_time: 25,
            s_min: -PI,
            s_max: PI,
            t_max: 5.0,
            beta: [0.3, -0.2],
            lambda: 0.1,
            sigma_d: 0.2,
            missing_fraction: 0.5,
            covariate_variance: 0.1,
            covariate_length_scale: 8.03 / 20.0,
            discrepancy_variance: 0.05,
            discrepancy_length_scale: 0.15,
            solver_n_internal: 256,
            solver_dt: 1e-3,
        }
    }
}

impl SimConfig {
    pub fn grid(&self) -> Result<SpaceTimeGrid> {
        build_grid(self.n_space, self.n_time, self.s_min, self.s_max, self.t_max)
    }

    pub fn covariate_kernel(&self) -> Result<KernelSpec> {
        KernelSpec::new(
            KernelFamily::ExponentialSpaceTime,
            self.covariate_variance,
            self.covariate_length_scale,
        )
    }

    pub fn discrepancy_kernel(&self) -> Result<KernelSpec> {
        KernelSpec::new(
            KernelFamily::SquaredExponentialSpace,
            self.discrepancy_variance,
            self.discrepancy_length_scale,
        )
    }

    pub fn burgers_config(&self) -> Result<BurgersConfig> {
        let mut cfg = BurgersConfig::new(self.lambda)?;
        cfg.n_internal = self.solver_n_internal;
        cfg.dt_internal = self.solver_dt;
        cfg.s_min = self.s_min;
        cfg.s_max = self.s_max;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The complete generative record: every latent component, the scalar truth,
/// and the masked observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTruth {
    pub u_true: Field,
    pub u_tilde: Field,
    pub mu: Field,
    pub nu: Field,
    pub covariates: [Field; 2],
    pub observations: Field,
    pub beta_true: [f64; 2],
    pub lambda_true: f64,
    pub sigma_d_true: f64,
    pub seed: u64,
}

/// Scalar parameters serialized to `truth.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthScalars {
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
    pub sigma_d: f64,
    pub sigma2_nu: f64,
    pub ell_nu: f64,
    pub missing_fraction: f64,
    pub seed: u64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs the full generative pipeline.
pub fn simulate(config: &SimConfig, seed: u64) -> Result<SimulationTruth> {
    let grid = config.grid()?;
    let (nt, ns) = (grid.n_time(), grid.n_space());

    // Covariates: joint draws over the full space-time grid, time-major point
    // order to match Field layout.
    let st_points: Vec<(f64, f64)> = grid
        .t_nodes()
        .iter()
        .flat_map(|&t| grid.s_nodes().iter().map(move |&s| (s, t)))
        .collect();
    let cov_kernel = config.covariate_kernel()?;
    let k_cov = cov_matrix(&cov_kernel, &st_points, &st_points)?;
    let chol = cholesky_with_jitter(&k_cov, cov_kernel.variance, "covariate kernel matrix")?;
    let mut draw_field = |rng: &mut ChaCha8Rng| -> Field {
        let z = nalgebra::DVector::from_iterator(
            st_points.len(),
            (0..st_points.len()).map(|_| -> f64 { StandardNormal.sample(rng) }),
        );
        let flat = chol.l() * z;
        let values = (0..nt)
            .map(|t| (0..ns).map(|j| flat[t * ns + j]).collect())
            .collect();
        Field::new(grid.clone(), values).expect("finite GP draw")
    };
    let x1 = draw_field(&mut stream_rng(seed, streams::COVARIATE_X1));
    let x2 = draw_field(&mut stream_rng(seed, streams::COVARIATE_X2));

    // Mean field.
    let mu_values: Vec<Vec<f64>> = (0..nt)
        .map(|t| {
            (0..ns)
                .map(|j| config.beta[0] * x1.value(t, j) + config.beta[1] * x2.value(t, j))
                .collect()
        })
        .collect();
    let mu = Field::new(grid.clone(), mu_values)?;

    // Latent dynamic field.
    let u_tilde = solve(&config.burgers_config()?, &grid)?;

    // Discrepancy: independent per-time spatial draws sharing one Cholesky.
    let disc_kernel = config.discrepancy_kernel()?;
    let s_points: Vec<(f64, f64)> = grid.s_nodes().iter().map(|&s| (s, 0.0)).collect();
    let k_disc = cov_matrix(&disc_kernel, &s_points, &s_points)?;
    let chol_disc = cholesky_with_jitter(&k_disc, disc_kernel.variance, "discrepancy kernel matrix")?;
    let mut disc_rng = stream_rng(seed, streams::DISCREPANCY);
    let nu_values: Vec<Vec<f64>> = (0..nt)
        .map(|_| {
            let z = nalgebra::DVector::from_iterator(
                ns,
                (0..ns).map(|_| -> f64 { StandardNormal.sample(&mut disc_rng) }),
            );
            (chol_disc.l() * z).iter().copied().collect()
        })
        .collect();
    let nu = Field::new(grid.clone(), nu_values)?;

    // Truth: exact elementwise sum of the three components.
    let u_values: Vec<Vec<f64>> = (0..nt)
        .map(|t| {
            (0..ns)
                .map(|j| mu.value(t, j) + u_tilde.value(t, j) + nu.value(t, j))
                .collect()
        })
        .collect();
    let u_true = Field::new(grid.clone(), u_values)?;

    // Observations: noise drawn for every cell, mask applied afterwards so the
    // noise stream does not depend on the mask pattern.
    let mut noise_rng = stream_rng(seed, streams::NOISE);
    let mask = make_mask(&grid, config.missing_fraction, derive_mask_seed(seed))?;
    let obs_values: Vec<Vec<f64>> = (0..nt)
        .map(|t| {
            (0..ns)
                .map(|j| {
                    let eps: f64 = StandardNormal.sample(&mut noise_rng);
                    let z = u_true.value(t, j) + config.sigma_d * eps;
                    if mask[t][j] {
                        z
                    } else {
                        f64::NAN
                    }
                })
                .collect()
        })
        .collect();
    let observations = Field::with_mask(grid, obs_values, mask)?;

    Ok(SimulationTruth {
        u_true,
        u_tilde,
        mu,
        nu,
        covariates: [x1, x2],
        observations,
        beta_true: config.beta,
        lambda_true: config.lambda,
        sigma_d_true: config.sigma_d,
        seed,
    })
}

/// Sub-seed for the missingness pattern, drawn from the mask stream.
fn derive_mask_seed(seed: u64) -> u64 {
    let mut rng = stream_rng(seed, streams::MASK);
    let z: f64 = StandardNormal.sample(&mut rng);
    z.to_bits() ^ seed
}

impl SimulationTruth {
    /// Writes `truth.csv` (all latent components and covariates), `obs.csv`
    /// (masked observations), and `truth.json` (scalar parameters).
    pub fn write(&self, dir: &Path, config: &SimConfig) -> Result<()> {
        write_multi_csv(
            &dir.join("truth.csv"),
            self.u_true.grid(),
            &[
                ("u_true", &self.u_true),
                ("u_tilde", &self.u_tilde),
                ("mu", &self.mu),
                ("nu", &self.nu),
                ("x1", &self.covariates[0]),
                ("x2", &self.covariates[1]),
            ],
        )?;
        self.observations.write_csv(&dir.join("obs.csv"), "z")?;
        let scalars = TruthScalars {
            beta1: self.beta_true[0],
            beta2: self.beta_true[1],
            lambda: self.lambda_true,
            sigma_d: self.sigma_d_true,
            sigma2_nu: config.discrepancy_variance,
            ell_nu: config.discrepancy_length_scale,
            missing_fraction: config.missing_fraction,
            seed: self.seed,
        };
        let json = serde_json::to_string_pretty(&scalars).expect("serializable scalars");
        let path = dir.join("truth.json");
        std::fs::write(&path, json).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SimConfig {
        SimConfig {
            n_space: 15,
            n_time: 7,
            solver_n_internal: 64,
            solver_dt: 2e-3,
            ..SimConfig::default()
        }
    }

    #[test]
    fn default_config_carries_generative_values() {
        let c = SimConfig::default();
        assert_eq!(c.beta, [0.3, -0.2]);
        assert_eq!(c.sigma_d, 0.2);
        assert_eq!(c.discrepancy_variance, 0.05);
        assert_eq!(c.discrepancy_length_scale, 0.15);
        assert_eq!(c.covariate_variance, 0.1);
        assert_eq!(c.covariate_length_scale, 8.03 / 20.0);
        assert_eq!(c.missing_fraction, 0.5);
    }

    #[test]
    fn noiseless_complete_observations_equal_truth() {
        let config = SimConfig {
            sigma_d: 0.0,
            missing_fraction: 0.0,
            ..small_config()
        };
        let truth = simulate(&config, 5).unwrap();
        for t in 0..config.n_time {
            for j in 0..config.n_space {
                assert!(truth.observations.observed(t, j));
                assert_eq!(truth.observations.value(t, j), truth.u_true.value(t, j));
            }
        }
    }

    #[test]
    fn equal_seeds_are_bitwise_identical() {
        // Missing observations carry NaN, so compare bit patterns rather than
        // relying on float equality.
        let bits = |truth: &SimulationTruth| -> Vec<u64> {
            [
                &truth.u_true,
                &truth.u_tilde,
                &truth.mu,
                &truth.nu,
                &truth.covariates[0],
                &truth.covariates[1],
                &truth.observations,
            ]
            .iter()
            .flat_map(|f| f.values().iter().flatten().map(|v| v.to_bits()))
            .collect()
        };
        let config = small_config();
        let a = simulate(&config, 123).unwrap();
        let b = simulate(&config, 123).unwrap();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.observations.mask(), b.observations.mask());
        let c = simulate(&config, 124).unwrap();
        assert_ne!(bits(&a), bits(&c));

        // File outputs are byte-identical too.
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        a.write(da.path(), &config).unwrap();
        b.write(db.path(), &config).unwrap();
        for name in ["truth.csv", "obs.csv", "truth.json"] {
            let fa = std::fs::read(da.path().join(name)).unwrap();
            let fb = std::fs::read(db.path().join(name)).unwrap();
            assert_eq!(fa, fb, "{name} differs between equal-seed runs");
        }
    }

    #[test]
    fn decomposition_identity_is_exact() {
        let truth = simulate(&small_config(), 9).unwrap();
        for t in 0..truth.u_true.grid().n_time() {
            for j in 0..truth.u_true.grid().n_space() {
                let sum = truth.mu.value(t, j) + truth.u_tilde.value(t, j) + truth.nu.value(t, j);
                assert_eq!(truth.u_true.value(t, j), sum);
            }
        }
    }

    #[test]
    fn observation_noise_variance_near_nominal() {
        let config = SimConfig::default();
        let truth = simulate(&config, 42).unwrap();
        let mut diffs = Vec::new();
        for t in 0..config.n_time {
            for j in 0..config.n_space {
                if truth.observations.observed(t, j) {
                    diffs.push(truth.observations.value(t, j) - truth.u_true.value(t, j));
                }
            }
        }
        assert_eq!(diffs.len(), 26 * 25);
        let mean: f64 = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var: f64 =
            diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / diffs.len() as f64;
        assert!(
            (var - 0.04).abs() / 0.04 < 0.2,
            "noise variance {var} deviates more than 20% from 0.04"
        );
    }

    #[test]
    fn discrepancy_rows_uncorrelated_across_time() {
        let config = SimConfig::default();
        let truth = simulate(&config, 7).unwrap();
        let nu = truth.nu.values();
        let ns = config.n_space as f64;
        // Lag-1 temporal correlation of nu averaged over space.
        let mut corr_sum = 0.0;
        let mut count = 0.0;
        for t in 0..config.n_time - 1 {
            let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
            for j in 0..config.n_space {
                saa += nu[t][j] * nu[t][j];
                sbb += nu[t + 1][j] * nu[t + 1][j];
                sab += nu[t][j] * nu[t + 1][j];
            }
            corr_sum += (sab / ns) / ((saa / ns).sqrt() * (sbb / ns).sqrt());
            count += 1.0;
        }
        let avg = corr_sum / count;
        assert!(avg.abs() < 0.15, "lag-1 discrepancy correlation {avg}");
    }

    #[test]
    fn writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config();
        let truth = simulate(&config, 3).unwrap();
        truth.write(dir.path(), &config).unwrap();
        let obs = std::fs::read_to_string(dir.path().join("obs.csv")).unwrap();
        assert_eq!(obs.lines().count(), 1 + 15 * 7);
        assert!(obs.lines().next().unwrap() == "t,s,z,observed");
        let parsed: TruthScalars =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("truth.json")).unwrap())
                .unwrap();
        assert_eq!(parsed.beta1, 0.3);
        assert_eq!(parsed.lambda, 0.1);
        let truth_csv = std::fs::read_to_string(dir.path().join("truth.csv")).unwrap();
        assert!(truth_csv.starts_with("t,s,u_true,u_tilde,mu,nu,x1,x2"));
    }
}
