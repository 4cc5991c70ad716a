//! The hierarchical log joint density: a neural latent dynamic process
//! constrained by the Burgers residual, boundary and initial-condition
//! pseudo-data, a covariate mean, a per-time marginalized GP discrepancy, the
//! measurement model, and priors with constrained/unconstrained transforms.
//!
//! The discrepancy field is integrated out of the likelihood analytically
//! (Gaussian-Gaussian conjugacy), leaving per-time marginal covariance
//! `H K H' + sigma_d^2 I`; it is reconstructed per posterior draw by
//! [`predict`]. Sampling runs in unconstrained coordinates: network weights
//! and regression coefficients are unbounded, the diffusion coefficient is
//! log-transformed, and the three bounded scale parameters use a scaled
//! logistic transform.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::autodiff::{input_derivs, Real, SpaceTimeFn, Tape};
use crate::error::Error;
use crate::gp::{gp_condition, KernelFamily, KernelSpec};
use crate::grid::{Field, SpaceTimeGrid};
use crate::nuts::LogDensity;
use crate::Result;

const MAX_WIDTH: usize = 32;
const LN_2PI: f64 = 1.8378770664093453;

/// Dense feed-forward architecture: 2 inputs (s, t), `hidden_layers` tanh
/// layers of `hidden_width` units, scalar linear output.
///
/// Flat weight layout, layer by layer: W1 (width x 2, row-major), b1, then
/// (width x width, bias) per remaining hidden layer, then the output weights
/// (width) and output bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeuralNetSpec {
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl NeuralNetSpec {
    pub fn new(hidden_layers: usize, hidden_width: usize) -> Result<Self> {
        if hidden_layers == 0 {
            return Err(Error::InvalidArgument("need at least one hidden layer".into()));
        }
        if hidden_width == 0 || hidden_width > MAX_WIDTH {
            return Err(Error::InvalidArgument(format!(
                "hidden width must lie in 1..={MAX_WIDTH}, got {hidden_width}"
            )));
        }
        Ok(NeuralNetSpec { hidden_layers, hidden_width })
    }

    /// Total number of weights and biases.
    pub fn param_count(&self) -> usize {
        let w = self.hidden_width;
        (2 * w + w) + (self.hidden_layers - 1) * (w * w + w) + (w + 1)
    }
}

/// Affine input normalization mapping the domain onto [-1, 1]^2, which keeps
/// tanh units in their responsive range. Input derivatives pick up the chain
/// factors `d s_norm / d s = 1 / s_half` and `d t_norm / d t = 1 / t_half`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputScaling {
    pub s_center: f64,
    pub s_half: f64,
    pub t_center: f64,
    pub t_half: f64,
}

impl InputScaling {
    pub fn from_grid(grid: &SpaceTimeGrid) -> Self {
        InputScaling {
            s_center: 0.5 * (grid.s_min() + grid.s_max()),
            s_half: 0.5 * (grid.s_max() - grid.s_min()),
            t_center: 0.5 * grid.t_max(),
            t_half: 0.5 * grid.t_max(),
        }
    }
}

/// Forward pass of the network at (s, t), generic over the scalar type.
pub fn nn_forward<R: Real>(
    spec: &NeuralNetSpec,
    theta: &[R],
    s: R,
    t: R,
    scaling: &InputScaling,
) -> R {
    debug_assert_eq!(theta.len(), spec.param_count());
    let w = spec.hidden_width;
    let sn = (s - scaling.s_center) * (1.0 / scaling.s_half);
    let tn = (t - scaling.t_center) * (1.0 / scaling.t_half);

    let mut cur = [sn; MAX_WIDTH];
    cur[1] = tn;
    let mut n_in = 2;
    let mut off = 0;
    for _ in 0..spec.hidden_layers {
        let mut next = [sn; MAX_WIDTH];
        for (i, slot) in next.iter_mut().enumerate().take(w) {
            let mut z = theta[off + w * n_in + i];
            for (j, &a) in cur.iter().enumerate().take(n_in) {
                z = theta[off + i * n_in + j].mul_add(a, z);
            }
            *slot = z.tanh();
        }
        off += w * n_in + w;
        cur = next;
        n_in = w;
    }
    let mut out = theta[off + w];
    for (j, &a) in cur.iter().enumerate().take(w) {
        out = theta[off + j].mul_add(a, out);
    }
    out
}

/// The network as a space-time function, for input differentiation.
struct NetFn<'a> {
    spec: &'a NeuralNetSpec,
    scaling: &'a InputScaling,
}

impl SpaceTimeFn for NetFn<'_> {
    fn eval<R: Real>(&self, s: R, t: R, params: &[R]) -> R {
        nn_forward(self.spec, params, s, t, self.scaling)
    }
}

/// Burgers residual of the network at one space-time point:
/// `r = du/dt + u du/ds - lambda d2u/ds2`, differentiable in the weights and
/// the diffusion coefficient.
pub fn pde_residual<R: Real>(
    spec: &NeuralNetSpec,
    theta: &[R],
    lambda: R,
    s: f64,
    t: f64,
    scaling: &InputScaling,
) -> R {
    let f = NetFn { spec, scaling };
    let sr = lambda.lit(s);
    let tr = lambda.lit(t);
    let (u, ut, us, uss) = input_derivs(&f, sr, tr, theta);
    ut + u * us - lambda * uss
}

/// Prior hyperparameters and truncation bounds. Defaults: diffuse Gaussian
/// priors on the regression coefficients (scale 10) and weights (scale 1), a
/// standard half-normal on the diffusion coefficient, unit Cauchy scales on
/// the two variance-like parameters, and informative truncation intervals
/// that keep the measurement scale and the discrepancy scale identifiable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    pub c_beta: f64,
    pub c_w: f64,
    pub sigma2_lambda: f64,
    pub mu_d: f64,
    pub gamma_d: f64,
    pub mu_nu: f64,
    pub gamma_nu: f64,
    pub mu_ell: f64,
    pub sigma2_ell: f64,
    /// Bounds on the measurement error standard deviation.
    pub sigma_d_bounds: (f64, f64),
    pub sigma2_nu_bounds: (f64, f64),
    pub ell_nu_bounds: (f64, f64),
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            c_beta: 10.0,
            c_w: 1.0,
            sigma2_lambda: 1.0,
            mu_d: 0.0,
            gamma_d: 1.0,
            mu_nu: 0.0,
            gamma_nu: 1.0,
            mu_ell: 0.0,
            sigma2_ell: 1.0,
            sigma_d_bounds: (0.1, 0.3),
            sigma2_nu_bounds: (0.02, 0.1),
            ell_nu_bounds: (0.05, 0.2),
        }
    }
}

/// Constrained model parameters. For a GP-only model (no neural component)
/// `theta_w` is empty and `lambda` is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub theta_w: Vec<f64>,
    pub beta: [f64; 2],
    pub lambda: f64,
    pub sigma_d: f64,
    pub sigma2_nu: f64,
    pub ell_nu: f64,
}

/// Dimension bookkeeping for the unconstrained coordinate vector. Layout:
/// `[theta_w.., beta1, beta2, log lambda, bounded sigma_d, sigma2_nu,
/// ell_nu]`; the weight block and the diffusion coefficient are absent in
/// GP-only models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_weights: usize,
    pub use_nn: bool,
}

impl ParamLayout {
    pub fn dim(&self) -> usize {
        if self.use_nn {
            self.n_weights + 2 + 4
        } else {
            2 + 3
        }
    }
}

/// Constrained parameter values of generic scalar type plus the accumulated
/// log-Jacobian of the unconstraining transform.
struct ConstrainedView<'a, R: Real> {
    theta_w: &'a [R],
    beta: [R; 2],
    lambda: Option<R>,
    sigma_d: R,
    sigma2_nu: R,
    ell_nu: R,
    log_jacobian: R,
}

/// Scaled-logistic map from the real line onto (lo, hi), returning the value
/// and the log-Jacobian contribution. `sigmoid(-z)` supplies the upper factor
/// so neither tail cancels catastrophically.
fn bounded_from_unconstrained<R: Real>(z: R, lo: f64, hi: f64) -> (R, R) {
    let s_pos = z.sigmoid();
    let s_neg = (-z).sigmoid();
    let x = s_pos * (hi - lo) + lo;
    let logjac = s_pos.ln() + s_neg.ln() + (hi - lo).ln();
    (x, logjac)
}

fn bounded_to_unconstrained(x: f64, lo: f64, hi: f64) -> f64 {
    let p = (x - lo) / (hi - lo);
    (p / (1.0 - p)).ln()
}

fn constrain_view<'a, R: Real>(
    z: &'a [R],
    layout: &ParamLayout,
    priors: &PriorConfig,
) -> ConstrainedView<'a, R> {
    let nw = if layout.use_nn { layout.n_weights } else { 0 };
    let beta = [z[nw], z[nw + 1]];
    let mut idx = nw + 2;
    let mut logjac = z[0].lit(0.0);
    let lambda = if layout.use_nn {
        let l = z[idx].exp();
        logjac = logjac + z[idx];
        idx += 1;
        Some(l)
    } else {
        None
    };
    let (sigma_d, j1) =
        bounded_from_unconstrained(z[idx], priors.sigma_d_bounds.0, priors.sigma_d_bounds.1);
    let (sigma2_nu, j2) =
        bounded_from_unconstrained(z[idx + 1], priors.sigma2_nu_bounds.0, priors.sigma2_nu_bounds.1);
    let (ell_nu, j3) =
        bounded_from_unconstrained(z[idx + 2], priors.ell_nu_bounds.0, priors.ell_nu_bounds.1);
    ConstrainedView {
        theta_w: &z[..nw],
        beta,
        lambda,
        sigma_d,
        sigma2_nu,
        ell_nu,
        log_jacobian: logjac + j1 + j2 + j3,
    }
}

impl ParameterVector {
    /// Packs into unconstrained coordinates. Requires every bounded component
    /// strictly inside its bounds and, for neural models, a positive lambda.
    pub fn unconstrain(&self, layout: &ParamLayout, priors: &PriorConfig) -> Result<Vec<f64>> {
        if layout.use_nn && self.theta_w.len() != layout.n_weights {
            return Err(Error::DimensionMismatch {
                context: "unconstrain weights".into(),
                expected: layout.n_weights,
                actual: self.theta_w.len(),
            });
        }
        let check_inside = |name: &str, x: f64, (lo, hi): (f64, f64)| -> Result<()> {
            if x <= lo || x >= hi {
                return Err(Error::InvalidArgument(format!(
                    "{name} = {x} not strictly inside ({lo}, {hi})"
                )));
            }
            Ok(())
        };
        check_inside("sigma_d", self.sigma_d, priors.sigma_d_bounds)?;
        check_inside("sigma2_nu", self.sigma2_nu, priors.sigma2_nu_bounds)?;
        check_inside("ell_nu", self.ell_nu, priors.ell_nu_bounds)?;
        let mut z = Vec::with_capacity(layout.dim());
        if layout.use_nn {
            z.extend_from_slice(&self.theta_w);
        }
        z.extend_from_slice(&self.beta);
        if layout.use_nn {
            if !(self.lambda > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "lambda must be positive to unconstrain, got {}",
                    self.lambda
                )));
            }
            z.push(self.lambda.ln());
        }
        z.push(bounded_to_unconstrained(self.sigma_d, priors.sigma_d_bounds.0, priors.sigma_d_bounds.1));
        z.push(bounded_to_unconstrained(
            self.sigma2_nu,
            priors.sigma2_nu_bounds.0,
            priors.sigma2_nu_bounds.1,
        ));
        z.push(bounded_to_unconstrained(self.ell_nu, priors.ell_nu_bounds.0, priors.ell_nu_bounds.1));
        Ok(z)
    }

    /// Unpacks unconstrained coordinates into constrained values.
    pub fn constrain(z: &[f64], layout: &ParamLayout, priors: &PriorConfig) -> Result<Self> {
        if z.len() != layout.dim() {
            return Err(Error::DimensionMismatch {
                context: "constrain coordinates".into(),
                expected: layout.dim(),
                actual: z.len(),
            });
        }
        let view = constrain_view(z, layout, priors);
        Ok(ParameterVector {
            theta_w: view.theta_w.to_vec(),
            beta: view.beta,
            lambda: view.lambda.unwrap_or(0.0),
            sigma_d: view.sigma_d,
            sigma2_nu: view.sigma2_nu,
            ell_nu: view.ell_nu,
        })
    }

    /// Names of the scalar (non-weight) parameters, in layout order.
    pub fn scalar_names(layout: &ParamLayout) -> Vec<&'static str> {
        if layout.use_nn {
            vec!["beta1", "beta2", "lambda", "sigma_d", "sigma2_nu", "ell_nu"]
        } else {
            vec!["beta1", "beta2", "sigma_d", "sigma2_nu", "ell_nu"]
        }
    }

    /// Scalar parameter values in the order of [`Self::scalar_names`].
    pub fn scalar_values(&self, layout: &ParamLayout) -> Vec<f64> {
        if layout.use_nn {
            vec![self.beta[0], self.beta[1], self.lambda, self.sigma_d, self.sigma2_nu, self.ell_nu]
        } else {
            vec![self.beta[0], self.beta[1], self.sigma_d, self.sigma2_nu, self.ell_nu]
        }
    }
}

/// Space-time locations where the PDE residual, boundary, and initial
/// conditions are scored, with their fixed pseudo-observation variances.
///
/// Point lists are canonically sorted at construction, so the log joint is
/// exactly invariant to the order in which callers supply them.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    residual: Vec<(f64, f64)>,
    boundary: Vec<(f64, f64)>,
    ic: Vec<f64>,
    pub sigma2_r: f64,
    pub sigma2_bc: f64,
    pub sigma2_ic: f64,
}

impl CollocationSet {
    /// Builds a collocation set from (s, t) residual points, (s, t) boundary
    /// points, and initial-condition spatial points.
    pub fn new(
        mut residual: Vec<(f64, f64)>,
        mut boundary: Vec<(f64, f64)>,
        mut ic: Vec<f64>,
        sigma2_r: f64,
        sigma2_bc: f64,
        sigma2_ic: f64,
    ) -> Result<Self> {
        for (name, v) in [("sigma2_r", sigma2_r), ("sigma2_bc", sigma2_bc), ("sigma2_ic", sigma2_ic)] {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        let key = |p: &(f64, f64)| (p.1.to_bits() as i64 ^ i64::MIN, p.0.to_bits() as i64 ^ i64::MIN);
        residual.sort_by_key(key);
        boundary.sort_by_key(key);
        ic.sort_by(f64::total_cmp);
        Ok(CollocationSet { residual, boundary, ic, sigma2_r, sigma2_bc, sigma2_ic })
    }

    /// The standard design: every grid point as a residual point, both
    /// endpoints at every time as boundary points, every spatial node at the
    /// initial time as an IC point.
    pub fn dense(grid: &SpaceTimeGrid, sigma2_r: f64, sigma2_bc: f64, sigma2_ic: f64) -> Result<Self> {
        let residual: Vec<(f64, f64)> = grid
            .t_nodes()
            .iter()
            .flat_map(|&t| grid.s_nodes().iter().map(move |&s| (s, t)))
            .collect();
        let boundary: Vec<(f64, f64)> = grid
            .t_nodes()
            .iter()
            .flat_map(|&t| [(grid.s_min(), t), (grid.s_max(), t)])
            .collect();
        let ic = grid.s_nodes().to_vec();
        Self::new(residual, boundary, ic, sigma2_r, sigma2_bc, sigma2_ic)
    }

    pub fn residual_points(&self) -> &[(f64, f64)] {
        &self.residual
    }

    pub fn boundary_points(&self) -> &[(f64, f64)] {
        &self.boundary
    }

    pub fn ic_points(&self) -> &[f64] {
        &self.ic
    }
}

/// Everything the posterior conditions on: observations with their mask and
/// the two known covariate fields.
#[derive(Debug, Clone)]
pub struct FitData {
    pub observations: Field,
    pub covariates: [Field; 2],
}

impl FitData {
    pub fn new(observations: Field, covariates: [Field; 2]) -> Result<Self> {
        for c in &covariates {
            if c.grid() != observations.grid() {
                return Err(Error::InvalidArgument(
                    "covariate grid does not match observation grid".into(),
                ));
            }
        }
        Ok(FitData { observations, covariates })
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        self.observations.grid()
    }
}

/// Model structure switches and fixed hyperparameters.
#[derive(Clone)]
pub struct ModelConfig {
    pub nn: NeuralNetSpec,
    pub priors: PriorConfig,
    /// Include the neural dynamic component and its residual/BC/IC terms.
    /// When false the latent dynamic field is identically zero and the model
    /// reduces to covariate regression plus the GP discrepancy.
    pub use_nn: bool,
    /// Target function for the initial-condition pseudo-data.
    pub ic: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for ModelConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelConfig")
            .field("nn", &self.nn)
            .field("priors", &self.priors)
            .field("use_nn", &self.use_nn)
            .finish()
    }
}

impl ModelConfig {
    pub fn new(nn: NeuralNetSpec) -> Self {
        ModelConfig {
            nn,
            priors: PriorConfig::default(),
            use_nn: true,
            ic: Arc::new(|s: f64| (-s * s).exp()),
        }
    }
}

/// One group of times sharing an identical observed-index pattern; the
/// marginal covariance factorization is shared across the group.
struct ObsPattern {
    indices: Vec<usize>,
    times: Vec<usize>,
    /// Squared spatial distances between observed nodes (lower triangle).
    sq_dists: Vec<Vec<f64>>,
}

/// The un-normalized posterior density over unconstrained coordinates.
pub struct BpinnPosterior {
    config: ModelConfig,
    colloc: CollocationSet,
    data: FitData,
    layout: ParamLayout,
    scaling: InputScaling,
    patterns: Vec<ObsPattern>,
    /// Exact-coordinate lookup from (s, t) to grid indices, for reusing
    /// network evaluations between the residual, boundary, IC, and data terms.
    grid_lookup: HashMap<(u64, u64), (usize, usize)>,
}

impl BpinnPosterior {
    pub fn new(config: ModelConfig, colloc: CollocationSet, data: FitData) -> Result<Self> {
        let grid = data.grid().clone();
        let layout = ParamLayout { n_weights: config.nn.param_count(), use_nn: config.use_nn };
        let scaling = InputScaling::from_grid(&grid);

        // Group times by identical observation patterns.
        let mut patterns: Vec<ObsPattern> = Vec::new();
        for t in 0..grid.n_time() {
            let idx: Vec<usize> = (0..grid.n_space())
                .filter(|&j| data.observations.observed(t, j))
                .collect();
            if idx.is_empty() {
                continue;
            }
            if let Some(p) = patterns.iter_mut().find(|p| p.indices == idx) {
                p.times.push(t);
            } else {
                let sq_dists = idx
                    .iter()
                    .map(|&i| {
                        idx.iter()
                            .take_while(|&&j| j <= i)
                            .map(|&j| {
                                let d = grid.s_nodes()[i] - grid.s_nodes()[j];
                                d * d
                            })
                            .collect()
                    })
                    .collect();
                patterns.push(ObsPattern { indices: idx, times: vec![t], sq_dists });
            }
        }

        let mut grid_lookup = HashMap::new();
        for (ti, &t) in grid.t_nodes().iter().enumerate() {
            for (si, &s) in grid.s_nodes().iter().enumerate() {
                grid_lookup.insert((s.to_bits(), t.to_bits()), (ti, si));
            }
        }

        Ok(BpinnPosterior { config, colloc, data, layout, scaling, patterns, grid_lookup })
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn priors(&self) -> &PriorConfig {
        &self.config.priors
    }

    pub fn scaling(&self) -> InputScaling {
        self.scaling
    }

    pub fn data(&self) -> &FitData {
        &self.data
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// The un-normalized log joint density at unconstrained coordinates
    /// (truncated-prior normalizing constants are dropped; they are constant
    /// given fixed bounds).
    pub fn log_joint<R: Real>(&self, z: &[R]) -> Result<R> {
        if z.len() != self.layout.dim() {
            return Err(Error::DimensionMismatch {
                context: "log_joint coordinates".into(),
                expected: self.layout.dim(),
                actual: z.len(),
            });
        }
        let grid = self.data.grid();
        let priors = &self.config.priors;
        let view = constrain_view(z, &self.layout, priors);
        let zero = z[0].lit(0.0);
        let mut lp = view.log_jacobian;

        // Network evaluations at grid nodes, shared between the likelihood
        // mean and any collocation point that coincides with a grid node.
        let ns = grid.n_space();
        let mut u_grid: Vec<Option<R>> = vec![None; grid.n_time() * ns];

        if self.layout.use_nn {
            let lambda = view.lambda.expect("lambda present in neural layout");
            let net = NetFn { spec: &self.config.nn, scaling: &self.scaling };

            // PDE residual pseudo-data.
            let inv_2s2r = 1.0 / (2.0 * self.colloc.sigma2_r);
            let resid_const = -0.5 * (LN_2PI + self.colloc.sigma2_r.ln());
            let mut resid_sum = zero;
            for &(s, t) in &self.colloc.residual {
                let (u, ut, us, uss) = input_derivs(&net, zero.lit(s), zero.lit(t), view.theta_w);
                let r = u.mul_add(us, ut) - lambda * uss;
                resid_sum = r.mul_add(r, resid_sum);
                if let Some(&(ti, si)) = self.grid_lookup.get(&(s.to_bits(), t.to_bits())) {
                    u_grid[ti * ns + si] = Some(u);
                }
            }
            lp = lp - resid_sum * inv_2s2r + self.colloc.residual.len() as f64 * resid_const;

            // Boundary pseudo-data: the network is pulled to zero at the ends.
            let inv_2s2bc = 1.0 / (2.0 * self.colloc.sigma2_bc);
            let bc_const = -0.5 * (LN_2PI + self.colloc.sigma2_bc.ln());
            let mut bc_sum = zero;
            for &(s, t) in &self.colloc.boundary {
                let u = self.net_value_at(&mut u_grid, view.theta_w, s, t, &zero);
                bc_sum = u.mul_add(u, bc_sum);
            }
            lp = lp - bc_sum * inv_2s2bc + self.colloc.boundary.len() as f64 * bc_const;

            // Initial-condition pseudo-data.
            let t0 = grid.t_nodes()[grid.ic_time_idx()];
            let inv_2s2ic = 1.0 / (2.0 * self.colloc.sigma2_ic);
            let ic_const = -0.5 * (LN_2PI + self.colloc.sigma2_ic.ln());
            let mut ic_sum = zero;
            for &s in &self.colloc.ic {
                let u = self.net_value_at(&mut u_grid, view.theta_w, s, t0, &zero);
                let d = u - (self.config.ic)(s);
                ic_sum = d.mul_add(d, ic_sum);
            }
            lp = lp - ic_sum * inv_2s2ic + self.colloc.ic.len() as f64 * ic_const;

            // Fill any remaining grid nodes the likelihood mean needs.
            for pat in &self.patterns {
                for &t in &pat.times {
                    for &j in &pat.indices {
                        if u_grid[t * ns + j].is_none() {
                            let u = nn_forward(
                                &self.config.nn,
                                view.theta_w,
                                zero.lit(grid.s_nodes()[j]),
                                zero.lit(grid.t_nodes()[t]),
                                &self.scaling,
                            );
                            u_grid[t * ns + j] = Some(u);
                        }
                    }
                }
            }
        }

        // Marginal data likelihood per time: residual ~ N(0, K_nu + sigma_d^2 I)
        // on the observed entries, with the discrepancy integrated out.
        let sigma_d2 = view.sigma_d * view.sigma_d;
        let ell2_inv_half = (view.ell_nu * view.ell_nu * 2.0).recip();
        let x1 = &self.data.covariates[0];
        let x2 = &self.data.covariates[1];
        let obs = &self.data.observations;
        for pat in &self.patterns {
            let m = pat.indices.len();
            // Lower triangle of K + sigma_d^2 I on the observed nodes.
            let mut k: Vec<Vec<R>> = Vec::with_capacity(m);
            for i in 0..m {
                let mut row = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    let d2 = pat.sq_dists[i][j];
                    let mut v = if d2 == 0.0 {
                        view.sigma2_nu
                    } else {
                        view.sigma2_nu * (-(ell2_inv_half * d2)).exp()
                    };
                    if i == j {
                        v = v + sigma_d2;
                    }
                    row.push(v);
                }
                k.push(row);
            }
            let chol = cholesky_lower(&k).map_err(|_| {
                Error::Factorization(format!("marginal covariance at time index {}", pat.times[0]))
            })?;
            let mut half_logdet = zero;
            for (i, row) in chol.iter().enumerate() {
                half_logdet = half_logdet + row[i].ln();
            }
            let norm_const = -0.5 * m as f64 * LN_2PI;

            for &t in &pat.times {
                // Whitened residual via forward substitution.
                let mut y: Vec<R> = Vec::with_capacity(m);
                let mut quad = zero;
                for (i, &j) in pat.indices.iter().enumerate() {
                    let mut mean = view.beta[0] * x1.value(t, j) + view.beta[1] * x2.value(t, j);
                    if self.layout.use_nn {
                        mean = mean + u_grid[t * ns + j].expect("grid value filled");
                    }
                    let mut acc = -mean + obs.value(t, j);
                    for (p, &yp) in y.iter().enumerate() {
                        acc = acc - chol[i][p] * yp;
                    }
                    let yi = acc / chol[i][i];
                    quad = yi.mul_add(yi, quad);
                    y.push(yi);
                }
                lp = lp - quad * 0.5 - half_logdet + norm_const;
            }
        }

        // Priors.
        if self.layout.use_nn {
            let mut wsum = zero;
            for &w in view.theta_w {
                wsum = w.mul_add(w, wsum);
            }
            lp = lp - wsum * (0.5 / priors.c_w)
                - 0.5 * self.layout.n_weights as f64 * (LN_2PI + priors.c_w.ln());
            let lambda = view.lambda.expect("lambda present");
            lp = lp - lambda * lambda * (0.5 / priors.sigma2_lambda)
                + 0.5 * (2.0 / (std::f64::consts::PI * priors.sigma2_lambda)).ln();
        }
        for b in view.beta {
            lp = lp - b * b * (0.5 / priors.c_beta) - 0.5 * (LN_2PI + priors.c_beta.ln());
        }
        // Truncated Cauchy priors on the two scale-like parameters.
        let cd = (view.sigma_d - priors.mu_d) * (1.0 / priors.gamma_d);
        lp = lp - (cd * cd + 1.0).ln() - (std::f64::consts::PI * priors.gamma_d).ln();
        let cn = (view.sigma2_nu - priors.mu_nu) * (1.0 / priors.gamma_nu);
        lp = lp - (cn * cn + 1.0).ln() - (std::f64::consts::PI * priors.gamma_nu).ln();
        // Truncated normal prior on the discrepancy length scale.
        let ce = view.ell_nu - priors.mu_ell;
        lp = lp - ce * ce * (0.5 / priors.sigma2_ell) - 0.5 * (LN_2PI + priors.sigma2_ell.ln());

        Ok(lp)
    }

    /// Network value at (s, t), reusing the grid table when the coordinate is
    /// a grid node.
    fn net_value_at<R: Real>(
        &self,
        u_grid: &mut [Option<R>],
        theta: &[R],
        s: f64,
        t: f64,
        zero: &R,
    ) -> R {
        let ns = self.data.grid().n_space();
        if let Some(&(ti, si)) = self.grid_lookup.get(&(s.to_bits(), t.to_bits())) {
            if let Some(u) = u_grid[ti * ns + si] {
                return u;
            }
            let u = nn_forward(&self.config.nn, theta, zero.lit(s), zero.lit(t), &self.scaling);
            u_grid[ti * ns + si] = Some(u);
            return u;
        }
        nn_forward(&self.config.nn, theta, zero.lit(s), zero.lit(t), &self.scaling)
    }

    /// A deterministic initial point for sampling: weights drawn from a
    /// down-scaled prior, regression coefficients at zero, scale parameters at
    /// the centers of their bounds.
    pub fn initial_point(&self, seed: u64) -> Vec<f64> {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut z = vec![0.0; self.layout.dim()];
        if self.layout.use_nn {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(17);
            let normal = rand_distr::StandardNormal;
            for w in z.iter_mut().take(self.layout.n_weights) {
                let x: f64 = normal.sample(&mut rng);
                *w = 0.1 * self.config.priors.c_w.sqrt() * x;
            }
            // log lambda starts at a moderate prior scale.
            z[self.layout.n_weights + 2] = (0.1f64).ln();
        }
        z
    }
}

/// Generic Cholesky of a lower-triangular-stored SPD matrix. Fails when a
/// pivot is non-positive.
fn cholesky_lower<R: Real>(k: &[Vec<R>]) -> Result<Vec<Vec<R>>> {
    let m = k.len();
    let mut l: Vec<Vec<R>> = Vec::with_capacity(m);
    for i in 0..m {
        let mut row: Vec<R> = Vec::with_capacity(i + 1);
        for j in 0..=i {
            let mut sum = k[i][j];
            for p in 0..j {
                let ljp = if j == i { row[p] } else { l[j][p] };
                sum = sum - row[p] * ljp;
            }
            if i == j {
                if !(sum.value() > 0.0) {
                    return Err(Error::Factorization(format!("pivot {i} non-positive")));
                }
                row.push(sum.sqrt());
            } else {
                row.push(sum / l[j][j]);
            }
        }
        l.push(row);
    }
    Ok(l)
}

thread_local! {
    static SCRATCH_TAPE: Tape = Tape::new();
}

impl LogDensity for BpinnPosterior {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        SCRATCH_TAPE.with(|tape| {
            tape.reset();
            let vars = tape.vars(x);
            match self.log_joint(&vars) {
                Ok(out) if out.value().is_finite() => {
                    tape.gradient_into(out, &vars, grad);
                    out.value()
                }
                _ => {
                    grad.fill(0.0);
                    f64::NEG_INFINITY
                }
            }
        })
    }

    fn logp(&self, x: &[f64]) -> f64 {
        match self.log_joint::<f64>(x) {
            Ok(v) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        }
    }
}

/// Posterior field reconstruction for one parameter draw.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// The latent dynamic field (zero for GP-only models).
    pub u_nn: Field,
    /// Discrepancy posterior mean given the draw's residuals.
    pub nu_mean: Field,
    /// Pointwise discrepancy posterior variance.
    pub nu_var: Field,
    /// Full per-time discrepancy posterior covariance matrices.
    pub nu_cov: Vec<DMatrix<f64>>,
    /// mu + u_nn + posterior-mean discrepancy.
    pub u_total: Field,
}

/// Reconstructs the latent fields for a constrained parameter draw: the
/// network field on the full grid, the discrepancy conditional per time
/// (kriging on the observed residuals with the draw's kernel and noise), and
/// their combination with the covariate mean.
pub fn predict(params: &ParameterVector, config: &ModelConfig, data: &FitData) -> Result<Prediction> {
    let grid = data.grid().clone();
    let (nt, ns) = (grid.n_time(), grid.n_space());
    let scaling = InputScaling::from_grid(&grid);

    let u_nn_values: Vec<Vec<f64>> = if config.use_nn {
        if params.theta_w.len() != config.nn.param_count() {
            return Err(Error::DimensionMismatch {
                context: "predict weights".into(),
                expected: config.nn.param_count(),
                actual: params.theta_w.len(),
            });
        }
        grid.t_nodes()
            .iter()
            .map(|&t| {
                grid.s_nodes()
                    .iter()
                    .map(|&s| nn_forward(&config.nn, &params.theta_w, s, t, &scaling))
                    .collect()
            })
            .collect()
    } else {
        vec![vec![0.0; ns]; nt]
    };

    let kernel =
        KernelSpec::new(KernelFamily::SquaredExponentialSpace, params.sigma2_nu, params.ell_nu)?;
    let query: Vec<(f64, f64)> = grid.s_nodes().iter().map(|&s| (s, 0.0)).collect();
    let noise = params.sigma_d * params.sigma_d;

    let mut nu_mean = vec![vec![0.0; ns]; nt];
    let mut nu_var = vec![vec![0.0; ns]; nt];
    let mut nu_cov = Vec::with_capacity(nt);
    let mut u_total = vec![vec![0.0; ns]; nt];
    let x1 = &data.covariates[0];
    let x2 = &data.covariates[1];
    for t in 0..nt {
        let mut train_pts = Vec::new();
        let mut train_vals = Vec::new();
        for j in 0..ns {
            if data.observations.observed(t, j) {
                let mean = params.beta[0] * x1.value(t, j)
                    + params.beta[1] * x2.value(t, j)
                    + u_nn_values[t][j];
                train_pts.push((grid.s_nodes()[j], 0.0));
                train_vals.push(data.observations.value(t, j) - mean);
            }
        }
        let (mean, cov) = gp_condition(&kernel, &train_pts, &train_vals, noise, &query)?;
        for j in 0..ns {
            nu_mean[t][j] = mean[j];
            nu_var[t][j] = cov[(j, j)].max(0.0);
            u_total[t][j] = params.beta[0] * x1.value(t, j)
                + params.beta[1] * x2.value(t, j)
                + u_nn_values[t][j]
                + mean[j];
        }
        nu_cov.push(cov);
    }

    Ok(Prediction {
        u_nn: Field::new(grid.clone(), u_nn_values)?,
        nu_mean: Field::new(grid.clone(), nu_mean)?,
        nu_var: Field::new(grid.clone(), nu_var)?,
        nu_cov,
        u_total: Field::new(grid, u_total)?,
    })
}
