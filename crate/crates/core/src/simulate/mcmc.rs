//! Random-walk Metropolis sampler over the exact joint posterior
//! `p(u, theta | y)` that the fast path approximates: the same latent
//! layout, constrained intrinsic priors, hyperparameter transforms, and
//! hyperpriors, with no Gaussian approximation anywhere.
//!
//! Latent coordinates move one site at a time; sum-to-zero replicates move
//! by paired opposite steps that keep each constraint exact; one shift move
//! per unconstrained block trades its level against the intercept (a likeli-
//! hood-invariant direction that single-site moves mix slowly). Hyper-
//! parameters random-walk on the internal (log / logit) scale. Step sizes
//! adapt toward a 0.44 acceptance rate during burn-in and freeze afterward.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Panel;
use crate::inference::{HyperMap, LatentModel};
use crate::likelihood::{CachedLikelihood, FamilyKind};
use crate::model::ModelSpec;

use super::SimulateError;

const ADAPT_TARGET: f64 = 0.44;
const PSRF_FLAG_THRESHOLD: f64 = 1.1;

#[derive(Debug, Clone)]
pub struct McmcOptions {
    /// Post-burn-in sweeps (every `thin`-th is kept).
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub family: FamilyKind,
    /// Gaussian precision of the fixed-effect prior; 0 = improper flat.
    pub fixed_effect_precision: f64,
    /// Initial random-walk standard deviations (adapted during burn-in).
    pub latent_step: f64,
    pub hyper_step: f64,
}

impl Default for McmcOptions {
    fn default() -> Self {
        McmcOptions {
            iterations: 4000,
            burn_in: 1500,
            thin: 2,
            seed: 0,
            family: FamilyKind::Poisson,
            fixed_effect_precision: 0.0,
            latent_step: 0.1,
            hyper_step: 0.2,
        }
    }
}

/// Kept draws plus mixing diagnostics. Draw vectors are indexed
/// `[parameter][draw]`; hyper draws are on natural scales.
#[derive(Debug, Clone)]
pub struct McmcResult {
    pub coefficient_names: Vec<String>,
    pub coefficient_draws: Vec<Vec<f64>>,
    pub hyper_names: Vec<&'static str>,
    pub hyper_draws: Vec<Vec<f64>>,
    pub acceptance_latent: f64,
    pub acceptance_hyper: f64,
    /// Split-chain potential scale reduction, coefficients then hypers.
    pub psrf: Vec<f64>,
    /// True when any split-chain factor exceeds 1.1: treat the run as
    /// suspect and rerun longer rather than trusting its moments.
    pub mixing_flag: bool,
    pub kept: usize,
}

impl McmcResult {
    /// Posterior mean and standard deviation of one coefficient.
    pub fn coefficient_summary(&self, name: &str) -> Option<(f64, f64)> {
        let i = self.coefficient_names.iter().position(|n| n == name)?;
        Some(mean_sd(&self.coefficient_draws[i]))
    }

    /// Posterior mean and standard deviation of one hyperparameter
    /// (natural scale).
    pub fn hyper_summary(&self, name: &str) -> Option<(f64, f64)> {
        let i = self.hyper_names.iter().position(|n| *n == name)?;
        Some(mean_sd(&self.hyper_draws[i]))
    }
}

fn mean_sd(draws: &[f64]) -> (f64, f64) {
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Split-chain potential scale reduction from one chain's kept draws.
fn split_rhat(draws: &[f64]) -> f64 {
    let half = draws.len() / 2;
    if half < 2 {
        return f64::INFINITY;
    }
    let a = &draws[..half];
    let b = &draws[draws.len() - half..];
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    let w = 0.5 * (sa * sa + sb * sb);
    let grand = 0.5 * (ma + mb);
    let b_over_n = (ma - grand).powi(2) + (mb - grand).powi(2);
    if w == 0.0 {
        return if b_over_n == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let n = half as f64;
    (((n - 1.0) / n * w + b_over_n) / w).sqrt()
}

enum MoveKind {
    /// Random-walk on one unconstrained latent coordinate.
    Single(usize),
    /// Opposite-step pair inside one sum-to-zero group.
    Pair(usize),
    /// Shift an unconstrained block against the intercept (eta-invariant).
    Shift { coords: Vec<usize>, intercept: usize },
}

struct Move {
    kind: MoveKind,
    step: f64,
    proposed: u64,
    accepted: u64,
}

struct Chain<'a> {
    model: &'a LatentModel,
    map: &'a HyperMap,
    rows_by_coord: Vec<Vec<u32>>,
    u: Vec<f64>,
    v: Vec<f64>,
    theta: DVector<f64>,
    cache: CachedLikelihood,
    q: nalgebra::DMatrix<f64>,
    log_gdet: f64,
    ll_total: f64,
    quad: f64,
    log_prior_theta: f64,
    max_count: u64,
}

impl<'a> Chain<'a> {
    fn new(model: &'a LatentModel, map: &'a HyperMap) -> Result<Chain<'a>, SimulateError> {
        let mut rows_by_coord = vec![Vec::new(); model.dim()];
        for i in 0..model.n_rows() {
            for &j in model.row(i) {
                rows_by_coord[j as usize].push(i as u32);
            }
        }
        let theta = map.initial();
        let observation = map.observation_model(&theta);
        observation
            .validate()
            .map_err(|e| SimulateError::InvalidConfig(e.to_string()))?;
        let max_count = model.y.iter().copied().max().unwrap_or(0);
        let cache = observation.cached(max_count);
        let hypers = model.resolve_hypers(&map.effect_values(&theta))?;
        let prior = model.assemble_prior(&hypers)?;

        // Start at zero (which satisfies every constraint) except the
        // intercept, seeded at the method-of-moments value so burn-in is not
        // spent walking the best-identified coordinate across its range.
        let mut u = vec![0.0f64; model.dim()];
        if let Some(j) = model.coefficient_names().iter().position(|n| n == "intercept") {
            let n = model.n_rows() as f64;
            let mean_y = model.y.iter().map(|&y| y as f64).sum::<f64>() / n;
            let mean_offset = (0..model.n_rows()).map(|i| model.offset(i)).sum::<f64>() / n;
            u[j] = (mean_y + 0.5 / n).ln() - mean_offset;
        }
        let v = model.linear_predictors(&u);
        let ll_total = (0..model.n_rows())
            .map(|i| cache.log_lik(model.y[i], v[i]))
            .sum();
        let quad = quad_form(&prior.q, &u);
        let log_prior_theta = map.log_prior(&theta);
        Ok(Chain {
            model,
            map,
            rows_by_coord,
            u,
            v,
            theta,
            cache,
            q: prior.q,
            log_gdet: prior.log_gdet,
            ll_total,
            quad,
            log_prior_theta,
            max_count,
        })
    }

    fn q_dot(&self, p: usize) -> f64 {
        let n = self.u.len();
        (0..n).map(|k| self.q[(p, k)] * self.u[k]).sum()
    }

    fn delta_ll(&self, coord: usize, delta: f64) -> f64 {
        let mut dll = 0.0;
        for &i in &self.rows_by_coord[coord] {
            let i = i as usize;
            let y = self.model.y[i];
            dll += self.cache.log_lik(y, self.v[i] + delta) - self.cache.log_lik(y, self.v[i]);
        }
        dll
    }

    fn apply_latent(&mut self, coord: usize, delta: f64) {
        self.u[coord] += delta;
        for &i in &self.rows_by_coord[coord] {
            self.v[i as usize] += delta;
        }
    }

    /// One Metropolis proposal for a latent move; returns the acceptance
    /// probability and whether the move was taken.
    fn propose_latent(&mut self, mv: &MoveKind, step: f64, rng: &mut ChaCha8Rng) -> (f64, bool) {
        let delta = rng.sample::<f64, _>(StandardNormal) * step;
        let (dll, dquad) = match mv {
            MoveKind::Single(p) => {
                let p = *p;
                let dquad =
                    2.0 * delta * self.q_dot(p) + delta * delta * self.q[(p, p)];
                (self.delta_ll(p, delta), dquad)
            }
            MoveKind::Pair(g) => {
                let group = &self.model.groups[*g];
                let m = group.len();
                let a = rng.random_range(0..m);
                let b = (a + rng.random_range(1..m)) % m;
                let (p, q) = (group[a] as usize, group[b] as usize);
                let dquad = 2.0 * delta * (self.q_dot(p) - self.q_dot(q))
                    + delta
                        * delta
                        * (self.q[(p, p)] + self.q[(q, q)] - 2.0 * self.q[(p, q)]);
                let dll = self.delta_ll(p, delta) + self.delta_ll(q, -delta);
                let accept = metropolis(dll - 0.5 * dquad);
                if rng.random::<f64>() < accept {
                    self.apply_latent(p, delta);
                    self.apply_latent(q, -delta);
                    self.ll_total += dll;
                    self.quad += dquad;
                    return (accept, true);
                }
                return (accept, false);
            }
            MoveKind::Shift { coords, intercept } => {
                // d = sum_k e_k - e_intercept leaves every predictor alone.
                let d_qu: f64 = coords.iter().map(|&k| self.q_dot(k)).sum::<f64>()
                    - self.q_dot(*intercept);
                let mut d_qd = self.q[(*intercept, *intercept)];
                for &k in coords {
                    d_qd += self.q[(k, k)] - 2.0 * self.q[(k, *intercept)];
                    for &k2 in coords {
                        if k2 != k {
                            d_qd += self.q[(k, k2)];
                        }
                    }
                }
                let dquad = 2.0 * delta * d_qu + delta * delta * d_qd;
                let accept = metropolis(-0.5 * dquad);
                if rng.random::<f64>() < accept {
                    for &k in coords {
                        self.u[k] += delta;
                    }
                    self.u[*intercept] -= delta;
                    self.quad += dquad;
                    return (accept, true);
                }
                return (accept, false);
            }
        };
        let accept = metropolis(dll - 0.5 * dquad);
        if rng.random::<f64>() < accept {
            if let MoveKind::Single(p) = mv {
                self.apply_latent(*p, delta);
            }
            self.ll_total += dll;
            self.quad += dquad;
            (accept, true)
        } else {
            (accept, false)
        }
    }

    /// One Metropolis proposal for internal-scale hyper coordinate `j`.
    fn propose_hyper(
        &mut self,
        j: usize,
        step: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, bool), SimulateError> {
        let delta = rng.sample::<f64, _>(StandardNormal) * step;
        let mut theta_new = self.theta.clone();
        theta_new[j] += delta;
        let new_log_prior = self.map.log_prior(&theta_new);
        let n_lik = self.map.family().hyper_count();
        if j < n_lik {
            let observation = self.map.observation_model(&theta_new);
            if observation.validate().is_err() {
                return Ok((0.0, false));
            }
            let cache = observation.cached(self.max_count);
            let new_ll: f64 = (0..self.model.n_rows())
                .map(|i| cache.log_lik(self.model.y[i], self.v[i]))
                .sum();
            let log_alpha = new_ll - self.ll_total + new_log_prior - self.log_prior_theta;
            let accept = metropolis(log_alpha);
            if rng.random::<f64>() < accept {
                self.theta = theta_new;
                self.cache = cache;
                self.ll_total = new_ll;
                self.log_prior_theta = new_log_prior;
                return Ok((accept, true));
            }
            Ok((accept, false))
        } else {
            let hypers = self.model.resolve_hypers(&self.map.effect_values(&theta_new))?;
            let prior = self.model.assemble_prior(&hypers)?;
            let new_quad = quad_form(&prior.q, &self.u);
            let log_alpha = -0.5 * (new_quad - self.quad)
                + 0.5 * (prior.log_gdet - self.log_gdet)
                + new_log_prior
                - self.log_prior_theta;
            let accept = metropolis(log_alpha);
            if rng.random::<f64>() < accept {
                self.theta = theta_new;
                self.q = prior.q;
                self.log_gdet = prior.log_gdet;
                self.quad = new_quad;
                self.log_prior_theta = new_log_prior;
                return Ok((accept, true));
            }
            Ok((accept, false))
        }
    }

    /// Recompute the tracked totals from scratch, clearing float drift.
    fn refresh(&mut self) {
        self.v = self.model.linear_predictors(&self.u);
        self.ll_total = (0..self.model.n_rows())
            .map(|i| self.cache.log_lik(self.model.y[i], self.v[i]))
            .sum();
        self.quad = quad_form(&self.q, &self.u);
    }
}

fn quad_form(q: &nalgebra::DMatrix<f64>, u: &[f64]) -> f64 {
    let n = u.len();
    let mut total = 0.0;
    for i in 0..n {
        if u[i] == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for j in 0..n {
            row += q[(i, j)] * u[j];
        }
        total += u[i] * row;
    }
    total
}

/// Acceptance probability min(1, exp(log_alpha)); NaN proposals are
/// rejected outright.
fn metropolis(log_alpha: f64) -> f64 {
    if log_alpha.is_nan() {
        return 0.0;
    }
    log_alpha.exp().min(1.0)
}

fn validate_options(options: &McmcOptions) -> Result<(), SimulateError> {
    let bad = |msg: String| Err(SimulateError::InvalidConfig(msg));
    if options.iterations < 10 {
        return bad(format!(
            "iterations must be at least 10, got {}",
            options.iterations
        ));
    }
    if options.thin == 0 {
        return bad("thin must be at least 1".into());
    }
    if options.iterations / options.thin < 4 {
        return bad(format!(
            "iterations/thin must keep at least 4 draws, got {}",
            options.iterations / options.thin
        ));
    }
    for (name, step) in [
        ("latent_step", options.latent_step),
        ("hyper_step", options.hyper_step),
    ] {
        if !(step > 0.0 && step.is_finite()) {
            return bad(format!("{name} must be positive and finite, got {step}"));
        }
    }
    Ok(())
}

/// Sample the exact posterior of a model on a panel. Deterministic in
/// `options.seed`. A result with `mixing_flag` set is a flagged result, not
/// an error: rerun longer before using it.
pub fn mcmc_oracle(
    panel: &Panel,
    spec: &ModelSpec,
    options: &McmcOptions,
) -> Result<McmcResult, SimulateError> {
    validate_options(options)?;
    let model = LatentModel::build(panel, spec, options.fixed_effect_precision)?;
    let map = HyperMap::new(options.family, &model, spec);
    let mut chain = Chain::new(&model, &map)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

    // Move schedule: one move object per unconstrained coordinate, one per
    // constraint group (executing as many pair proposals as the group has
    // members), and one block-against-intercept shift per unconstrained
    // random-effect block when an intercept exists.
    let mut constrained = vec![false; model.dim()];
    for g in &model.groups {
        for &p in g {
            constrained[p as usize] = true;
        }
    }
    let mut moves = Vec::new();
    for p in 0..model.dim() {
        if !constrained[p] {
            moves.push(Move {
                kind: MoveKind::Single(p),
                step: options.latent_step,
                proposed: 0,
                accepted: 0,
            });
        }
    }
    for g in 0..model.groups.len() {
        moves.push(Move {
            kind: MoveKind::Pair(g),
            step: options.latent_step,
            proposed: 0,
            accepted: 0,
        });
    }
    let intercept = model
        .coefficient_names()
        .iter()
        .position(|n| n == "intercept");
    if let Some(intercept) = intercept {
        for coords in unconstrained_blocks(&model, &constrained) {
            moves.push(Move {
                kind: MoveKind::Shift { coords, intercept },
                step: options.latent_step,
                proposed: 0,
                accepted: 0,
            });
        }
    }

    let mut hyper_moves: Vec<Move> = (0..map.dim())
        .map(|j| Move {
            kind: MoveKind::Single(j),
            step: options.hyper_step,
            proposed: 0,
            accepted: 0,
        })
        .collect();

    let n_fixed = model.n_fixed();
    let kept_target = options.iterations.div_ceil(options.thin);
    let mut coefficient_draws = vec![Vec::with_capacity(kept_target); n_fixed];
    let mut hyper_draws = vec![Vec::with_capacity(kept_target); map.dim()];
    let total_sweeps = options.burn_in + options.iterations;
    for sweep in 0..total_sweeps {
        let adapt = sweep < options.burn_in;
        let gamma = (sweep as f64 + 1.0).powf(-0.6);
        for mv in &mut moves {
            let repeats = match &mv.kind {
                MoveKind::Pair(g) => model.groups[*g].len(),
                _ => 1,
            };
            for _ in 0..repeats {
                let (alpha, accepted) = chain.propose_latent(&mv.kind, mv.step, &mut rng);
                mv.proposed += 1;
                mv.accepted += u64::from(accepted);
                if adapt {
                    mv.step =
                        (mv.step.ln() + gamma * (alpha - ADAPT_TARGET)).clamp(-12.0, 3.0).exp();
                }
            }
        }
        for mv in &mut hyper_moves {
            let j = match mv.kind {
                MoveKind::Single(j) => j,
                _ => unreachable!("hyper moves are single-coordinate"),
            };
            let (alpha, accepted) = chain.propose_hyper(j, mv.step, &mut rng)?;
            mv.proposed += 1;
            mv.accepted += u64::from(accepted);
            if adapt {
                mv.step = (mv.step.ln() + gamma * (alpha - ADAPT_TARGET)).clamp(-12.0, 3.0).exp();
            }
        }
        if sweep % 500 == 499 {
            chain.refresh();
        }
        if sweep >= options.burn_in && (sweep - options.burn_in) % options.thin == 0 {
            for (j, draws) in coefficient_draws.iter_mut().enumerate() {
                draws.push(chain.u[j]);
            }
            for (j, draws) in hyper_draws.iter_mut().enumerate() {
                draws.push(map.natural_value(j, chain.theta[j]));
            }
        }
    }

    let latent_proposed: u64 = moves.iter().map(|m| m.proposed).sum();
    let latent_accepted: u64 = moves.iter().map(|m| m.accepted).sum();
    let hyper_proposed: u64 = hyper_moves.iter().map(|m| m.proposed).sum();
    let hyper_accepted: u64 = hyper_moves.iter().map(|m| m.accepted).sum();
    let mut psrf = Vec::with_capacity(n_fixed + map.dim());
    for draws in coefficient_draws.iter().chain(hyper_draws.iter()) {
        psrf.push(split_rhat(draws));
    }
    let mixing_flag = psrf.iter().any(|&r| !(r <= PSRF_FLAG_THRESHOLD));
    let kept = coefficient_draws.first().map_or(
        hyper_draws.first().map_or(0, Vec::len),
        Vec::len,
    );
    Ok(McmcResult {
        coefficient_names: model.coefficient_names().to_vec(),
        coefficient_draws,
        hyper_names: map.names(),
        hyper_draws,
        acceptance_latent: latent_accepted as f64 / latent_proposed.max(1) as f64,
        acceptance_hyper: hyper_accepted as f64 / hyper_proposed.max(1) as f64,
        psrf,
        mixing_flag,
        kept,
    })
}

/// Contiguous latent segments of unconstrained random-effect blocks
/// (IID and Matérn areas).
fn unconstrained_blocks(model: &LatentModel, constrained: &[bool]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p = model.n_fixed();
    while p < model.dim() {
        if constrained[p] {
            p += 1;
            continue;
        }
        let mut coords = Vec::new();
        while p < model.dim() && !constrained[p] {
            coords.push(p);
            p += 1;
        }
        out.push(coords);
    }
    out
}
