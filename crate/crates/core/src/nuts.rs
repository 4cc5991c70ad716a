//! Hamiltonian Monte Carlo with No-U-Turn termination, multinomial trajectory
//! sampling, dual-averaging step-size adaptation, and diagonal mass-matrix
//! adaptation.
//!
//! Warmup runs in three phases: a fast step-size window (15%), expanding
//! mass-matrix windows (75%), and a final fast window (10%), with the dual
//! averaging restarted after each mass update. Divergences are flagged when
//! the Hamiltonian error along a trajectory exceeds 1000.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Error;
use crate::Result;

const MAX_DELTA_H: f64 = 1000.0;

/// A differentiable un-normalized log density.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Evaluates the log density and writes its gradient. Non-finite values
    /// signal an invalid point (treated as a divergence by the sampler).
    fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    /// Value-only evaluation.
    fn logp(&self, x: &[f64]) -> f64 {
        let mut scratch = vec![0.0; self.dim()];
        self.logp_and_grad(x, &mut scratch)
    }
}

/// Sampler settings.
#[derive(Debug, Clone)]
pub struct NutsConfig {
    pub n_warmup: usize,
    pub n_samples: usize,
    pub max_tree_depth: usize,
    pub target_accept: f64,
    pub seed: u64,
    pub n_chains: usize,
}

impl Default for NutsConfig {
    fn default() -> Self {
        NutsConfig {
            n_warmup: 1000,
            n_samples: 1000,
            max_tree_depth: 10,
            target_accept: 0.8,
            seed: 0,
            n_chains: 1,
        }
    }
}

impl NutsConfig {
    fn validate(&self) -> Result<()> {
        if self.max_tree_depth > 12 {
            return Err(Error::InvalidArgument(format!(
                "max_tree_depth {} exceeds the memory guard of 12",
                self.max_tree_depth
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target_accept must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        if self.n_chains == 0 {
            return Err(Error::InvalidArgument("n_chains must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-chain sampler diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct ChainStats {
    pub accept_rate: f64,
    pub divergences: usize,
    pub step_size: f64,
    pub max_depth_hits: usize,
}

/// Posterior draws in unconstrained coordinates, chains concatenated in chain
/// order, plus sampler statistics.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub draws: Vec<Vec<f64>>,
    pub dim: usize,
    pub n_chains: usize,
    pub n_samples_per_chain: usize,
    pub chain_stats: Vec<ChainStats>,
}

impl PosteriorSamples {
    pub fn divergences(&self) -> usize {
        self.chain_stats.iter().map(|c| c.divergences).sum()
    }

    pub fn accept_rate(&self) -> f64 {
        if self.chain_stats.is_empty() {
            return 0.0;
        }
        self.chain_stats.iter().map(|c| c.accept_rate).sum::<f64>() / self.chain_stats.len() as f64
    }
}

/// A point in phase space together with its cached density and gradient.
#[derive(Clone)]
pub struct HamiltonianState {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

impl HamiltonianState {
    /// Builds a state at `position` with the given momentum, evaluating the
    /// target there.
    pub fn new<T: LogDensity + ?Sized>(target: &T, position: Vec<f64>, momentum: Vec<f64>) -> Self {
        let mut grad = vec![0.0; position.len()];
        let logp = target.logp_and_grad(&position, &mut grad);
        HamiltonianState { position, momentum, grad, logp }
    }

    /// Total energy -logp + kinetic under a diagonal inverse mass matrix.
    pub fn energy(&self, inv_mass: &[f64]) -> f64 {
        let ke: f64 = self
            .momentum
            .iter()
            .zip(inv_mass)
            .map(|(&p, &im)| 0.5 * p * p * im)
            .sum();
        -self.logp + ke
    }
}

/// One leapfrog step of size `eps` under a diagonal inverse mass matrix:
/// half-step momentum, full-step position, half-step momentum.
pub fn leapfrog<T: LogDensity + ?Sized>(
    target: &T,
    state: &HamiltonianState,
    eps: f64,
    inv_mass: &[f64],
) -> HamiltonianState {
    let dim = state.position.len();
    let mut p = vec![0.0; dim];
    let mut q = vec![0.0; dim];
    for i in 0..dim {
        p[i] = state.momentum[i] + 0.5 * eps * state.grad[i];
    }
    for i in 0..dim {
        q[i] = state.position[i] + eps * inv_mass[i] * p[i];
    }
    let mut grad = vec![0.0; dim];
    let logp = target.logp_and_grad(&q, &mut grad);
    for i in 0..dim {
        p[i] += 0.5 * eps * grad[i];
    }
    HamiltonianState { position: q, momentum: p, grad, logp }
}

struct TreeResult {
    left: HamiltonianState,
    right: HamiltonianState,
    proposal: HamiltonianState,
    log_sum_weight: f64,
    sum_accept: f64,
    n_accept: usize,
    n_leapfrog: usize,
    turning: bool,
    diverging: bool,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Generalized U-turn criterion between two trajectory endpoints.
fn is_uturn(left: &HamiltonianState, right: &HamiltonianState, inv_mass: &[f64]) -> bool {
    let mut dot_left = 0.0;
    let mut dot_right = 0.0;
    for i in 0..left.position.len() {
        let dq = right.position[i] - left.position[i];
        dot_left += dq * inv_mass[i] * left.momentum[i];
        dot_right += dq * inv_mass[i] * right.momentum[i];
    }
    dot_left < 0.0 || dot_right < 0.0
}

/// Builds a balanced subtree of the given depth in the direction of `eps`'s
/// sign, combining proposals multinomially.
#[allow(clippy::too_many_arguments)]
fn build_subtree<T: LogDensity + ?Sized>(
    target: &T,
    from: &HamiltonianState,
    eps: f64,
    inv_mass: &[f64],
    h0: f64,
    depth: usize,
    rng: &mut ChaCha8Rng,
) -> TreeResult {
    if depth == 0 {
        let next = leapfrog(target, from, eps, inv_mass);
        let h = next.energy(inv_mass);
        let delta = h - h0;
        let diverging = !delta.is_finite() || delta > MAX_DELTA_H;
        let log_weight = if diverging { f64::NEG_INFINITY } else { -delta };
        let accept = if delta.is_finite() { (-delta).exp().min(1.0) } else { 0.0 };
        return TreeResult {
            left: next.clone(),
            right: next.clone(),
            proposal: next,
            log_sum_weight: log_weight,
            sum_accept: accept,
            n_accept: 1,
            n_leapfrog: 1,
            turning: false,
            diverging,
        };
    }

    let inner = build_subtree(target, from, eps, inv_mass, h0, depth - 1, rng);
    if inner.diverging || inner.turning {
        return inner;
    }
    let start = if eps > 0.0 { &inner.right } else { &inner.left };
    let outer = build_subtree(target, start, eps, inv_mass, h0, depth - 1, rng);

    let sum_accept = inner.sum_accept + outer.sum_accept;
    let n_accept = inner.n_accept + outer.n_accept;
    let n_leapfrog = inner.n_leapfrog + outer.n_leapfrog;
    if outer.diverging || outer.turning {
        return TreeResult {
            left: inner.left,
            right: inner.right,
            proposal: inner.proposal,
            log_sum_weight: inner.log_sum_weight,
            sum_accept,
            n_accept,
            n_leapfrog,
            turning: outer.turning,
            diverging: outer.diverging,
        };
    }

    let log_sum = log_sum_exp(inner.log_sum_weight, outer.log_sum_weight);
    let take_outer = (outer.log_sum_weight - log_sum).exp();
    let proposal = if rng.gen::<f64>() < take_outer { outer.proposal } else { inner.proposal };
    let (left, right) = if eps > 0.0 {
        (inner.left, outer.right)
    } else {
        (outer.left, inner.right)
    };
    let turning = is_uturn(&left, &right, inv_mass);
    TreeResult {
        left,
        right,
        proposal,
        log_sum_weight: log_sum,
        sum_accept,
        n_accept,
        n_leapfrog,
        turning,
        diverging: false,
    }
}

struct TrajectoryStats {
    accept_stat: f64,
    diverging: bool,
    hit_max_depth: bool,
}

/// Runs one NUTS update: iterative doubling until a U-turn, divergence, or
/// the depth cap.
fn nuts_transition<T: LogDensity + ?Sized>(
    target: &T,
    current: &mut HamiltonianState,
    eps: f64,
    inv_mass: &[f64],
    max_depth: usize,
    rng: &mut ChaCha8Rng,
) -> TrajectoryStats {
    let h0 = current.energy(inv_mass);
    let mut left = current.clone();
    let mut right = current.clone();
    let mut proposal: Option<HamiltonianState> = None;
    let mut log_sum_weight = 0.0f64; // the initial point carries weight exp(0)
    let mut sum_accept = 0.0;
    let mut n_accept = 0usize;
    let mut diverging = false;
    let mut depth = 0usize;

    while depth < max_depth {
        let forward = rng.gen::<bool>();
        let subtree = if forward {
            build_subtree(target, &right, eps, inv_mass, h0, depth, rng)
        } else {
            build_subtree(target, &left, -eps, inv_mass, h0, depth, rng)
        };
        sum_accept += subtree.sum_accept;
        n_accept += subtree.n_accept;

        if subtree.diverging {
            diverging = true;
            break;
        }
        if subtree.turning {
            break;
        }

        // Biased progressive sampling favors the fresh subtree.
        let take = ((subtree.log_sum_weight - log_sum_weight).exp()).min(1.0);
        if rng.gen::<f64>() < take {
            proposal = Some(subtree.proposal);
        }
        log_sum_weight = log_sum_exp(log_sum_weight, subtree.log_sum_weight);

        if forward {
            right = subtree.right;
        } else {
            left = subtree.left;
        }
        if is_uturn(&left, &right, inv_mass) {
            depth += 1;
            break;
        }
        depth += 1;
    }

    if let Some(p) = proposal {
        *current = p;
    }
    TrajectoryStats {
        accept_stat: if n_accept > 0 { sum_accept / n_accept as f64 } else { 0.0 },
        diverging,
        hit_max_depth: depth >= max_depth,
    }
}

/// Heuristic initial step size: double or halve until the one-step acceptance
/// probability crosses 1/2.
fn find_initial_step_size<T: LogDensity + ?Sized>(
    target: &T,
    position: &[f64],
    inv_mass: &[f64],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let dim = position.len();
    let momentum: Vec<f64> = (0..dim)
        .map(|i| {
            let z: f64 = StandardNormal.sample(rng);
            z / inv_mass[i].sqrt()
        })
        .collect();
    let state = HamiltonianState::new(target, position.to_vec(), momentum);
    let h0 = state.energy(inv_mass);
    let mut eps = 1.0;
    let probe = |eps: f64| -> f64 {
        let next = leapfrog(target, &state, eps, inv_mass);
        let h = next.energy(inv_mass);
        if h.is_finite() {
            h0 - h
        } else {
            f64::NEG_INFINITY
        }
    };
    let mut log_ratio = probe(eps);
    let go_up = log_ratio > (0.5f64).ln();
    for _ in 0..60 {
        if go_up {
            eps *= 2.0;
        } else {
            eps *= 0.5;
        }
        log_ratio = probe(eps);
        if go_up != (log_ratio > (0.5f64).ln()) {
            break;
        }
    }
    eps.clamp(1e-10, 1e3)
}

struct DualAveraging {
    mu: f64,
    log_eps_bar: f64,
    h_bar: f64,
    count: u64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64, target: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps0).ln(),
            log_eps_bar: eps0.ln(),
            h_bar: 0.0,
            count: 0,
            target,
        }
    }

    fn update(&mut self, accept_stat: f64) -> f64 {
        self.count += 1;
        let m = self.count as f64;
        let w = 1.0 / (m + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_stat);
        let log_eps = self.mu - (m.sqrt() / Self::GAMMA) * self.h_bar;
        let m_pow = m.powf(-Self::KAPPA);
        self.log_eps_bar = m_pow * log_eps + (1.0 - m_pow) * self.log_eps_bar;
        log_eps.exp()
    }

    fn final_step_size(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

struct ChainOutput {
    draws: Vec<Vec<f64>>,
    stats: ChainStats,
}

fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    init: &[f64],
    cfg: &NutsConfig,
    chain_idx: u64,
) -> Result<ChainOutput> {
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain_idx.wrapping_add(1));

    let mut inv_mass = vec![1.0f64; dim];
    let mut current = HamiltonianState::new(target, init.to_vec(), vec![0.0; dim]);
    if !current.logp.is_finite() {
        return Err(Error::NonFinite {
            context: format!("log density at chain {chain_idx} initial point"),
            index: None,
        });
    }

    let mut eps = find_initial_step_size(target, init, &inv_mass, &mut rng);
    let mut da = DualAveraging::new(eps, cfg.target_accept);

    // Warmup phases: fast | expanding mass windows | fast.
    let phase1_end = cfg.n_warmup * 15 / 100;
    let phase2_end = cfg.n_warmup * 90 / 100;
    let mut window_len = 25usize;
    let mut window_end = (phase1_end + window_len).min(phase2_end);
    let mut acc_sum = vec![0.0f64; dim];
    let mut acc_sq = vec![0.0f64; dim];
    let mut acc_count = 0usize;

    let mut draws = Vec::with_capacity(cfg.n_samples);
    let mut divergences = 0usize;
    let mut warmup_divergences = 0usize;
    let mut max_depth_hits = 0usize;
    let mut accept_sum = 0.0;
    let mut accept_count = 0usize;

    let total = cfg.n_warmup + cfg.n_samples;
    for iter in 0..total {
        let warmup = iter < cfg.n_warmup;
        for i in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            current.momentum[i] = z / inv_mass[i].sqrt();
        }
        let stats = nuts_transition(target, &mut current, eps, &inv_mass, cfg.max_tree_depth, &mut rng);
        if stats.diverging {
            if warmup {
                warmup_divergences += 1;
            } else {
                divergences += 1;
            }
        }
        if stats.hit_max_depth {
            max_depth_hits += 1;
        }

        if warmup {
            eps = da.update(stats.accept_stat);
            let in_mass_phase = iter >= phase1_end && iter < phase2_end;
            if in_mass_phase {
                for i in 0..dim {
                    acc_sum[i] += current.position[i];
                    acc_sq[i] += current.position[i] * current.position[i];
                }
                acc_count += 1;
                if iter + 1 == window_end {
                    if acc_count > 4 {
                        let n = acc_count as f64;
                        for i in 0..dim {
                            let mean = acc_sum[i] / n;
                            let var = (acc_sq[i] / n - mean * mean).max(0.0);
                            // Regularized estimate, shrunk toward unity.
                            let reg = (n / (n + 5.0)) * var + (5.0 / (n + 5.0)) * 1e-3;
                            if reg > 1e-10 {
                                inv_mass[i] = 1.0 / reg;
                            }
                        }
                        // Restart step-size adaptation for the new metric.
                        eps = find_initial_step_size(target, &current.position, &inv_mass, &mut rng);
                        da = DualAveraging::new(eps, cfg.target_accept);
                        // Refresh cached gradient: position unchanged, metric new.
                        current = HamiltonianState::new(
                            target,
                            current.position.clone(),
                            current.momentum.clone(),
                        );
                    }
                    acc_sum.fill(0.0);
                    acc_sq.fill(0.0);
                    acc_count = 0;
                    window_len *= 2;
                    window_end = (iter + 1 + window_len).min(phase2_end);
                    // Absorb a too-short trailing window into this one.
                    if phase2_end - window_end < 25 {
                        window_end = phase2_end;
                    }
                }
            }
            if iter + 1 == cfg.n_warmup {
                eps = da.final_step_size();
                if !eps.is_finite() || eps < 1e-12 || warmup_divergences >= cfg.n_warmup.max(1) {
                    return Err(Error::SamplerCollapse {
                        message: format!("step size collapsed during warmup on chain {chain_idx}"),
                        divergences: warmup_divergences,
                        step_size: eps,
                    });
                }
            }
        } else {
            accept_sum += stats.accept_stat;
            accept_count += 1;
            draws.push(current.position.clone());
        }
    }

    Ok(ChainOutput {
        draws,
        stats: ChainStats {
            accept_rate: if accept_count > 0 { accept_sum / accept_count as f64 } else { 0.0 },
            divergences,
            step_size: eps,
            max_depth_hits,
        },
    })
}

/// Draws `cfg.n_samples` posterior samples per chain after `cfg.n_warmup`
/// adaptation iterations. Chains run in parallel on independent seed streams
/// and are concatenated in chain order, so results are deterministic given
/// the seed.
pub fn nuts_sample<T: LogDensity + ?Sized>(
    target: &T,
    init: &[f64],
    cfg: &NutsConfig,
) -> Result<PosteriorSamples> {
    cfg.validate()?;
    if init.len() != target.dim() {
        return Err(Error::DimensionMismatch {
            context: "nuts_sample initial point".into(),
            expected: target.dim(),
            actual: init.len(),
        });
    }
    let chain_results: Vec<Result<ChainOutput>> = (0..cfg.n_chains as u64)
        .into_par_iter()
        .map(|c| run_chain(target, init, cfg, c))
        .collect();
    let mut draws = Vec::with_capacity(cfg.n_chains * cfg.n_samples);
    let mut chain_stats = Vec::with_capacity(cfg.n_chains);
    for r in chain_results {
        let out = r?;
        draws.extend(out.draws);
        chain_stats.push(out.stats);
    }
    Ok(PosteriorSamples {
        draws,
        dim: target.dim(),
        n_chains: cfg.n_chains,
        n_samples_per_chain: cfg.n_samples,
        chain_stats,
    })
}

/// Per-parameter posterior summary.
#[derive(Debug, Clone, Serialize)]
pub struct ParameterSummary {
    pub mean: f64,
    pub std: f64,
    pub q025: f64,
    pub q975: f64,
    /// Effective sample size estimate; absent for degenerate (constant) chains.
    pub ess: Option<f64>,
    /// Split R-hat across chains; present when at least two chains ran.
    pub rhat: Option<f64>,
}

/// Full diagnostics report for a set of posterior draws.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub parameters: Vec<ParameterSummary>,
    pub divergences: usize,
    pub accept_rate: f64,
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Effective sample size by Geyer's initial positive sequence estimator.
/// Returns None for chains with zero variance.
pub fn effective_sample_size(chain: &[f64]) -> Option<f64> {
    let n = chain.len();
    if n < 4 {
        return None;
    }
    let nf = n as f64;
    let mean = chain.iter().sum::<f64>() / nf;
    let var: f64 = chain.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf;
    if var <= 0.0 {
        return None;
    }
    let autocov = |lag: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..n - lag {
            s += (chain[i] - mean) * (chain[i + lag] - mean);
        }
        s / nf
    };
    let mut tau = 1.0;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = (autocov(lag) + autocov(lag + 1)) / var;
        if pair < 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    Some(nf / tau)
}

/// Split R-hat over a set of chains of equal length (each chain is halved).
pub fn split_rhat(chains: &[&[f64]]) -> Option<f64> {
    let mut halves: Vec<&[f64]> = Vec::new();
    for c in chains {
        if c.len() < 4 {
            return None;
        }
        let mid = c.len() / 2;
        halves.push(&c[..mid]);
        halves.push(&c[mid..mid * 2]);
    }
    let m = halves.len() as f64;
    let n = halves[0].len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / n).collect();
    let vars: Vec<f64> = halves
        .iter()
        .zip(&means)
        .map(|(h, &mu)| h.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0))
        .collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|&mu| (mu - grand) * (mu - grand)).sum::<f64>();
    let w = vars.iter().sum::<f64>() / m;
    if w <= 0.0 {
        return None;
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Some((var_plus / w).sqrt())
}

/// Computes per-parameter summaries, ESS, and (for two or more chains)
/// split R-hat from posterior draws.
pub fn diagnostics(samples: &PosteriorSamples) -> Result<DiagnosticsReport> {
    if samples.draws.is_empty() {
        return Err(Error::InvalidArgument("diagnostics requires nonempty draws".into()));
    }
    let n = samples.draws.len();
    let dim = samples.dim;
    let mut parameters = Vec::with_capacity(dim);
    for d in 0..dim {
        let col: Vec<f64> = samples.draws.iter().map(|row| row[d]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let mut sorted = col.clone();
        sorted.sort_by(f64::total_cmp);
        let per_chain = samples.n_samples_per_chain;
        let ess = if per_chain > 0 && samples.n_chains > 1 {
            // Sum of per-chain ESS estimates.
            let mut total = 0.0;
            let mut any = false;
            for c in 0..samples.n_chains {
                if let Some(e) = effective_sample_size(&col[c * per_chain..(c + 1) * per_chain]) {
                    total += e;
                    any = true;
                }
            }
            any.then_some(total)
        } else {
            effective_sample_size(&col)
        };
        let rhat = if samples.n_chains >= 2 && per_chain >= 4 {
            let chains: Vec<&[f64]> = (0..samples.n_chains)
                .map(|c| &col[c * per_chain..(c + 1) * per_chain])
                .collect();
            split_rhat(&chains)
        } else {
            None
        };
        parameters.push(ParameterSummary {
            mean,
            std: var.sqrt(),
            q025: quantile(&sorted, 0.025),
            q975: quantile(&sorted, 0.975),
            ess,
            rhat,
        });
    }
    Ok(DiagnosticsReport {
        parameters,
        divergences: samples.divergences(),
        accept_rate: samples.accept_rate(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Diagonal Gaussian target.
    struct DiagGaussian {
        variances: Vec<f64>,
    }

    impl LogDensity for DiagGaussian {
        fn dim(&self) -> usize {
            self.variances.len()
        }
        fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for i in 0..x.len() {
                lp -= 0.5 * x[i] * x[i] / self.variances[i];
                grad[i] = -x[i] / self.variances[i];
            }
            lp
        }
    }

    /// 2-D correlated Gaussian with unit variances and correlation rho.
    struct CorrGaussian {
        rho: f64,
    }

    impl LogDensity for CorrGaussian {
        fn dim(&self) -> usize {
            2
        }
        fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            let r = self.rho;
            let det = 1.0 - r * r;
            let q = (x[0] * x[0] - 2.0 * r * x[0] * x[1] + x[1] * x[1]) / det;
            grad[0] = -(x[0] - r * x[1]) / det;
            grad[1] = -(x[1] - r * x[0]) / det;
            -0.5 * q
        }
    }

    #[test]
    fn standard_gaussian_5d_calibration() {
        let target = DiagGaussian { variances: vec![1.0; 5] };
        let cfg = NutsConfig {
            n_warmup: 500,
            n_samples: 4000,
            seed: 11,
            ..Default::default()
        };
        let samples = nuts_sample(&target, &[0.1; 5], &cfg).unwrap();
        assert_eq!(samples.draws.len(), 4000);
        for d in 0..5 {
            let col: Vec<f64> = samples.draws.iter().map(|r| r[d]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 0.05, "dim {d} mean {mean}");
            assert!((var - 1.0).abs() < 0.1, "dim {d} variance {var}");
        }
    }

    #[test]
    fn correlated_gaussian_recovers_correlation() {
        let target = CorrGaussian { rho: 0.9 };
        let cfg = NutsConfig {
            n_warmup: 500,
            n_samples: 4000,
            seed: 3,
            ..Default::default()
        };
        let samples = nuts_sample(&target, &[0.0, 0.0], &cfg).unwrap();
        let n = samples.draws.len() as f64;
        let mx = samples.draws.iter().map(|r| r[0]).sum::<f64>() / n;
        let my = samples.draws.iter().map(|r| r[1]).sum::<f64>() / n;
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for r in &samples.draws {
            sxx += (r[0] - mx) * (r[0] - mx);
            syy += (r[1] - my) * (r[1] - my);
            sxy += (r[0] - mx) * (r[1] - my);
        }
        let corr = sxy / (sxx.sqrt() * syy.sqrt());
        assert!((corr - 0.9).abs() < 0.05, "sample correlation {corr}");
    }

    #[test]
    fn zero_samples_returns_empty() {
        let target = DiagGaussian { variances: vec![1.0, 1.0] };
        let cfg = NutsConfig {
            n_warmup: 50,
            n_samples: 0,
            seed: 1,
            ..Default::default()
        };
        let samples = nuts_sample(&target, &[0.0, 0.0], &cfg).unwrap();
        assert!(samples.draws.is_empty());
    }

    #[test]
    fn deterministic_given_seed() {
        let target = DiagGaussian { variances: vec![1.0, 4.0] };
        let cfg = NutsConfig {
            n_warmup: 100,
            n_samples: 50,
            seed: 42,
            ..Default::default()
        };
        let a = nuts_sample(&target, &[0.5, -0.5], &cfg).unwrap();
        let b = nuts_sample(&target, &[0.5, -0.5], &cfg).unwrap();
        assert_eq!(a.draws, b.draws);
    }

    #[test]
    fn rejects_bad_config_and_init() {
        let target = DiagGaussian { variances: vec![1.0] };
        let cfg = NutsConfig { max_tree_depth: 13, ..Default::default() };
        assert!(nuts_sample(&target, &[0.0], &cfg).is_err());
        let cfg = NutsConfig { target_accept: 1.0, ..Default::default() };
        assert!(nuts_sample(&target, &[0.0], &cfg).is_err());
        let cfg = NutsConfig::default();
        assert!(nuts_sample(&target, &[f64::NAN], &cfg).is_err());
    }

    #[test]
    fn leapfrog_is_reversible() {
        let target = CorrGaussian { rho: 0.5 };
        let inv_mass = [1.0, 1.0];
        let mut state = HamiltonianState::new(&target, vec![0.3, -0.7], vec![0.9, 0.4]);
        let start = state.clone();
        let eps = 0.05;
        let steps = 64;
        for _ in 0..steps {
            state = leapfrog(&target, &state, eps, &inv_mass);
        }
        for p in state.momentum.iter_mut() {
            *p = -*p;
        }
        // Re-evaluate gradient at the (unchanged) position before going back.
        state = HamiltonianState::new(&target, state.position.clone(), state.momentum.clone());
        for _ in 0..steps {
            state = leapfrog(&target, &state, eps, &inv_mass);
        }
        for i in 0..2 {
            assert!(
                (state.position[i] - start.position[i]).abs() < 1e-8,
                "position not recovered: {:?}",
                state.position
            );
            assert!((state.momentum[i] + start.momentum[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn leapfrog_energy_error_is_second_order() {
        let target = DiagGaussian { variances: vec![1.0, 0.5, 2.0] };
        let inv_mass = [1.0, 1.0, 1.0];
        let run = |eps: f64| -> f64 {
            let mut state =
                HamiltonianState::new(&target, vec![0.8, -0.4, 0.6], vec![0.3, 0.7, -0.5]);
            let h0 = state.energy(&inv_mass);
            let steps = (2.0 / eps).round() as usize;
            let mut max_err = 0.0f64;
            for _ in 0..steps {
                state = leapfrog(&target, &state, eps, &inv_mass);
                max_err = max_err.max((state.energy(&inv_mass) - h0).abs());
            }
            max_err
        };
        let e1 = run(0.05);
        let e2 = run(0.025);
        let ratio = e1 / e2;
        assert!((2.5..6.0).contains(&ratio), "energy error ratio {ratio}");
    }

    #[test]
    fn one_dimensional_cdf_matches_gaussian() {
        let target = DiagGaussian { variances: vec![1.0] };
        let cfg = NutsConfig {
            n_warmup: 500,
            n_samples: 4000,
            seed: 8,
            ..Default::default()
        };
        let samples = nuts_sample(&target, &[0.0], &cfg).unwrap();
        let mut xs: Vec<f64> = samples.draws.iter().map(|r| r[0]).collect();
        xs.sort_by(f64::total_cmp);
        // Standard normal CDF via the error function complement series.
        let phi = |x: f64| 0.5 * erfc_approx(-x / std::f64::consts::SQRT_2);
        let n = xs.len() as f64;
        let mut ks = 0.0f64;
        for (i, &x) in xs.iter().enumerate() {
            let f = phi(x);
            ks = ks.max((f - i as f64 / n).abs());
            ks = ks.max(((i + 1) as f64 / n - f).abs());
        }
        assert!(ks < 0.05, "KS statistic {ks}");
    }

    /// Abramowitz-Stegun style erfc approximation, adequate for a KS check.
    fn erfc_approx(x: f64) -> f64 {
        let z = x.abs();
        let t = 1.0 / (1.0 + 0.5 * z);
        let ans = t
            * (-z * z - 1.26551223
                + t * (1.00002368
                    + t * (0.37409196
                        + t * (0.09678418
                            + t * (-0.18628806
                                + t * (0.27886807
                                    + t * (-1.13520398
                                        + t * (1.48851587
                                            + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
        if x >= 0.0 {
            ans
        } else {
            2.0 - ans
        }
    }

    #[test]
    fn ess_of_iid_chain_is_near_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let chain: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ess = effective_sample_size(&chain).unwrap();
        assert!((500.0..1500.0).contains(&ess), "iid ESS {ess}");
    }

    #[test]
    fn constant_chain_flags_degenerate_diagnostics() {
        let samples = PosteriorSamples {
            draws: vec![vec![2.5]; 100],
            dim: 1,
            n_chains: 1,
            n_samples_per_chain: 100,
            chain_stats: vec![ChainStats {
                accept_rate: 1.0,
                divergences: 0,
                step_size: 0.5,
                max_depth_hits: 0,
            }],
        };
        let report = diagnostics(&samples).unwrap();
        assert_eq!(report.parameters[0].std, 0.0);
        assert_eq!(report.parameters[0].q025, report.parameters[0].q975);
        assert!(report.parameters[0].ess.is_none());
    }

    #[test]
    fn identical_chains_give_unit_rhat() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let chain: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut draws = Vec::new();
        draws.extend(chain.iter().map(|&x| vec![x]));
        draws.extend(chain.iter().map(|&x| vec![x]));
        let samples = PosteriorSamples {
            draws,
            dim: 1,
            n_chains: 2,
            n_samples_per_chain: 200,
            chain_stats: vec![
                ChainStats { accept_rate: 0.9, divergences: 0, step_size: 0.4, max_depth_hits: 0 },
                ChainStats { accept_rate: 0.9, divergences: 0, step_size: 0.4, max_depth_hits: 0 },
            ],
        };
        let report = diagnostics(&samples).unwrap();
        let rhat = report.parameters[0].rhat.unwrap();
        assert!((rhat - 1.0).abs() < 0.05, "R-hat {rhat}");
    }

    #[test]
    fn multiple_chains_merge_deterministically() {
        let target = DiagGaussian { variances: vec![1.0, 1.0] };
        let cfg = NutsConfig {
            n_warmup: 100,
            n_samples: 30,
            n_chains: 3,
            seed: 5,
            ..Default::default()
        };
        let a = nuts_sample(&target, &[0.0, 0.0], &cfg).unwrap();
        let b = nuts_sample(&target, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(a.draws.len(), 90);
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.chain_stats.len(), 3);
    }
}
