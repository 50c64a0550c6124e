//! Reference posterior samplers for validating the fast inference paths.
//!
//! Two independent oracles live here. [`mcmc_sample`] runs random-scan
//! Metropolis — one tangent coordinate at a time, step sizes adapted during
//! burn-in only, a 10% heavy mixture branch with 10× steps to hop between
//! well-separated modes — across several overdispersed chains, and refuses to
//! return samples when split-R̂ flags non-convergence. [`grid_marginal`]
//! integrates a 2D landmark potential on a dense grid with all other
//! variables pinned. Both are deliberately brute-force: they trade orders of
//! magnitude in compute for being simple enough to trust, and everything
//! faster in this crate is judged against them.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::graph::{FactorGraph, GraphError};
use crate::potential::{LandmarkPotential, PotentialError};
use crate::values::{Value, Values, VarId};

/// Proposal scale multiplier for the occasional long-range jump.
const WIDE_SCALE: f64 = 10.0;
/// Probability of taking the long-range branch on any single proposal.
const WIDE_PROB: f64 = 0.12;
/// Initial per-coordinate random-walk scale before adaptation.
const INITIAL_STEP: f64 = 0.5;
/// Single-coordinate Metropolis acceptance target (Gelman et al.).
const TARGET_ACCEPT: f64 = 0.44;
/// Proposals per adaptation batch during burn-in.
const ADAPT_BATCH: u32 = 25;
/// Split-R̂ level above which the run is declared unconverged.
const RHAT_LIMIT: f64 = 1.05;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("need at least 2 chains for split-R̂ (got {0})")]
    TooFewChains(usize),
    #[error("need a positive sample count")]
    NoSamples,
    #[error("chains failed to converge: split-R̂ = {r_hat:.4} on {var} coordinate {coord}")]
    Unconverged { var: VarId, coord: usize, r_hat: f64 },
    #[error("initial values missing variable {0}")]
    MissingInitial(VarId),
    #[error("target density is zero everywhere on the grid")]
    ZeroMass,
    #[error("grid bounds/resolution are degenerate")]
    BadGrid,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
}

/// Convergence and mixing summary for one [`mcmc_sample`] run.
#[derive(Debug, Clone)]
pub struct ChainDiagnostics {
    /// Post-burn-in acceptance rate per chain.
    pub acceptance: Vec<f64>,
    /// Split-R̂ per flattened tangent coordinate, labeled by variable.
    pub r_hat: Vec<(VarId, usize, f64)>,
    /// Smallest per-coordinate effective sample size across the run.
    pub effective_samples: f64,
    /// Accumulated log target at each chain's final state; tested against a
    /// from-scratch evaluation to validate the incremental bookkeeping.
    pub final_log_target: Vec<f64>,
}

/// Log of the unnormalized posterior density the chains target: the sum of
/// every factor's log likelihood at `values`.
pub fn log_target(graph: &FactorGraph, values: &Values) -> Result<f64, OracleError> {
    Ok(graph.log_posterior(values)?)
}

/// Global coordinates used for cross-chain statistics: poses flatten to
/// translation plus rotation log, points to themselves. Adequate for the
/// desk-scale problems this oracle is for; heading wraps would need care.
fn flatten(values: &Values, order: &[VarId]) -> DVector<f64> {
    let mut out = Vec::new();
    for &v in order {
        match values.get(v).expect("state covers all variables") {
            Value::PoseSE2(p) => {
                out.extend_from_slice(&[p.translation.x, p.translation.y, p.theta]);
            }
            Value::PoseSE3(p) => {
                out.extend_from_slice(p.translation.as_slice());
                out.extend_from_slice(p.rotation.scaled_axis().as_slice());
            }
            Value::Point2(p) => out.extend_from_slice(p.as_slice()),
            Value::Point3(p) => out.extend_from_slice(p.as_slice()),
        }
    }
    DVector::from_vec(out)
}

struct Chain {
    state: Values,
    log_target: f64,
    /// Per (variable, coordinate) proposal scale.
    steps: BTreeMap<(VarId, usize), f64>,
    /// Accept/propose counters for the current adaptation batch.
    batch: BTreeMap<(VarId, usize), (u32, u32)>,
    accepted: u64,
    proposed: u64,
}

impl Chain {
    fn new(graph: &FactorGraph, init: Values) -> Result<Self, OracleError> {
        let log_target = graph.log_posterior(&init)?;
        Ok(Chain {
            state: init,
            log_target,
            steps: BTreeMap::new(),
            batch: BTreeMap::new(),
            accepted: 0,
            proposed: 0,
        })
    }

    /// One random-scan sweep: as many single-block updates as there are
    /// variables, each visiting every tangent coordinate of its block.
    fn sweep(
        &mut self,
        graph: &FactorGraph,
        order: &[VarId],
        adapt: bool,
        count: bool,
        rng: &mut impl Rng,
    ) -> Result<(), OracleError> {
        for _ in 0..order.len() {
            let var = order[rng.gen_range(0..order.len())];
            let adjacent = graph.adjacent_factors(var);
            let dim = self
                .state
                .get(var)
                .expect("state covers all variables")
                .dim();
            for coord in 0..dim {
                let key = (var, coord);
                let step = *self.steps.entry(key).or_insert(INITIAL_STEP);
                let wide = rng.gen_bool(WIDE_PROB);
                let scale = if wide { step * WIDE_SCALE } else { step };
                let mut delta = vec![0.0; dim];
                delta[coord] = scale * rng.sample::<f64, _>(StandardNormal);

                let current = self.state.get(var).expect("present").clone();
                let candidate = current.retract(&delta);
                let before = graph.log_potential(adjacent, &self.state)?;
                self.state.insert(var, candidate);
                let after = graph.log_potential(adjacent, &self.state)?;

                let log_ratio = after - before;
                let accept = if before == f64::NEG_INFINITY {
                    after > f64::NEG_INFINITY
                } else {
                    log_ratio >= 0.0 || rng.gen_range(0.0..1.0_f64).ln() < log_ratio
                };
                if count {
                    self.proposed += 1;
                }
                if accept {
                    if count {
                        self.accepted += 1;
                    }
                    // keep the running target consistent without a full pass
                    if before == f64::NEG_INFINITY {
                        self.log_target = graph.log_posterior(&self.state)?;
                    } else {
                        self.log_target += log_ratio;
                    }
                } else {
                    self.state.insert(var, current);
                }
                // adapt on the local branch only; wide proposals are expected
                // to fail often and must not drag the baseline scale down
                if adapt && !wide {
                    let entry = self.batch.entry(key).or_insert((0, 0));
                    entry.1 += 1;
                    if accept {
                        entry.0 += 1;
                    }
                    if entry.1 >= ADAPT_BATCH {
                        let rate = entry.0 as f64 / entry.1 as f64;
                        let factor = ((rate - TARGET_ACCEPT) * 1.2).exp().clamp(0.5, 2.0);
                        let s = self.steps.get_mut(&key).expect("seen above");
                        *s = (*s * factor).clamp(1e-8, 1e4);
                        *entry = (0, 0);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Split-R̂ over `chains[chain][draw]` for one coordinate: each chain is cut
/// in half, and the ratio of pooled to within-half variance is reported.
fn split_r_hat(chains: &[Vec<f64>]) -> f64 {
    let half = chains[0].len() / 2;
    if half < 2 {
        return f64::INFINITY;
    }
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[c.len() - half..]])
        .collect();
    let m = halves.len() as f64;
    let n = half as f64;
    let means: Vec<f64> = halves
        .iter()
        .map(|h| h.iter().sum::<f64>() / n)
        .collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Effective sample size for one coordinate (variogram autocorrelation
/// estimate with Geyer's initial-monotone truncation).
fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len();
    let means: Vec<f64> = chains
        .iter()
        .map(|c| c.iter().sum::<f64>() / n as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / m;
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n as f64 - 1.0))
        .sum::<f64>()
        / m;
    let b = if chains.len() > 1 {
        n as f64 / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>()
    } else {
        0.0
    };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    if var_plus <= 0.0 {
        return m * n as f64;
    }
    let mut rho_sum = 0.0;
    let mut t = 1;
    let mut prev_pair = f64::INFINITY;
    while t + 1 < n {
        let rho_at = |lag: usize| {
            let vt = chains
                .iter()
                .map(|c| {
                    (lag..n).map(|i| (c[i] - c[i - lag]).powi(2)).sum::<f64>()
                        / (n - lag) as f64
                })
                .sum::<f64>()
                / m;
            1.0 - vt / (2.0 * var_plus)
        };
        let pair = rho_at(t) + rho_at(t + 1);
        if pair < 0.0 {
            break;
        }
        // Geyer: the pair sums must be non-increasing; clip any rebound
        rho_sum += pair.min(prev_pair);
        prev_pair = pair;
        t += 2;
    }
    (m * n as f64 / (1.0 + 2.0 * rho_sum)).max(1.0)
}

/// Draw `n_samples` joint posterior samples by running `n_chains` adaptive
/// random-walk chains from overdispersed starts around `init`. Adaptation
/// happens during the `burn_in` sweeps only; afterwards one state is recorded
/// per sweep until the chains have jointly produced `n_samples` draws, and
/// the merged output interleaves the chains. Errors rather than returning
/// samples when any coordinate's split-R̂ exceeds 1.05.
pub fn mcmc_sample(
    graph: &FactorGraph,
    init: &Values,
    n_chains: usize,
    n_samples: usize,
    burn_in: usize,
    seed: u64,
) -> Result<(Vec<Values>, ChainDiagnostics), OracleError> {
    use rand::SeedableRng;
    if n_chains < 2 {
        return Err(OracleError::TooFewChains(n_chains));
    }
    if n_samples == 0 {
        return Err(OracleError::NoSamples);
    }
    let order: Vec<VarId> = graph.variables().to_vec();
    for &v in &order {
        if init.get(v).is_none() {
            return Err(OracleError::MissingInitial(v));
        }
    }
    let per_chain = n_samples.div_ceil(n_chains);
    let coord_labels: Vec<(VarId, usize)> = order
        .iter()
        .flat_map(|&v| {
            let d = init.get(v).expect("checked").dim();
            (0..d).map(move |i| (v, i))
        })
        .collect();

    let mut recorded: Vec<Vec<DVector<f64>>> = Vec::with_capacity(n_chains);
    let mut kept_states: Vec<Vec<Values>> = Vec::with_capacity(n_chains);
    let mut diag = ChainDiagnostics {
        acceptance: Vec::with_capacity(n_chains),
        r_hat: Vec::new(),
        effective_samples: 0.0,
        final_log_target: Vec::with_capacity(n_chains),
    };

    for c in 0..n_chains {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
            seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(c as u64),
        );
        // overdispersed start: retract every variable by a unit-scale draw
        let mut start = Values::new();
        for &v in &order {
            let value = init.get(v).expect("checked");
            let delta: Vec<f64> = (0..value.dim())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            start.insert(v, value.retract(&delta));
        }
        let mut chain = Chain::new(graph, start)?;
        for _ in 0..burn_in {
            chain.sweep(graph, &order, true, false, &mut rng)?;
        }
        let mut flat = Vec::with_capacity(per_chain);
        let mut states = Vec::with_capacity(per_chain);
        for _ in 0..per_chain {
            chain.sweep(graph, &order, false, true, &mut rng)?;
            flat.push(flatten(&chain.state, &order));
            states.push(chain.state.clone());
        }
        diag.acceptance
            .push(chain.accepted as f64 / chain.proposed.max(1) as f64);
        diag.final_log_target.push(chain.log_target);
        recorded.push(flat);
        kept_states.push(states);
    }

    let n_coords = coord_labels.len();
    let mut min_ess = f64::INFINITY;
    let mut worst: Option<(VarId, usize, f64)> = None;
    for k in 0..n_coords {
        let series: Vec<Vec<f64>> = recorded
            .iter()
            .map(|chain| chain.iter().map(|x| x[k]).collect())
            .collect();
        let r = split_r_hat(&series);
        let (var, coord) = coord_labels[k];
        diag.r_hat.push((var, coord, r));
        if worst.map(|(_, _, w)| r > w).unwrap_or(true) {
            worst = Some((var, coord, r));
        }
        min_ess = min_ess.min(effective_sample_size(&series));
    }
    diag.effective_samples = min_ess;
    if let Some((var, coord, r_hat)) = worst {
        if r_hat > RHAT_LIMIT {
            return Err(OracleError::Unconverged { var, coord, r_hat });
        }
    }

    // interleave chains so truncation keeps a balanced mix
    let mut merged = Vec::with_capacity(n_samples);
    'outer: for i in 0..per_chain {
        for chain in &kept_states {
            if merged.len() == n_samples {
                break 'outer;
            }
            merged.push(chain[i].clone());
        }
    }
    Ok((merged, diag))
}

/// Stack one point-valued variable from a joint sample list into a matrix
/// (one column per sample).
pub fn marginal_matrix(samples: &[Values], var: VarId) -> Option<DMatrix<f64>> {
    let first = samples.first()?.get(var)?.point_coords()?;
    let d = first.len();
    let mut out = DMatrix::zeros(d, samples.len());
    for (i, s) in samples.iter().enumerate() {
        let coords = s.get(var)?.point_coords()?;
        if coords.len() != d {
            return None;
        }
        out.set_column(i, &coords);
    }
    Some(out)
}

/// Normalized density of a 2D landmark on a regular grid, all other
/// variables held at `fixed`. Cell values are the landmark potential at cell
/// centers, scaled to sum to one.
#[derive(Debug, Clone)]
pub struct GridDensity {
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
    /// Cell mass, indexed `[(ix, iy)]`.
    pub mass: DMatrix<f64>,
}

impl GridDensity {
    pub fn nx(&self) -> usize {
        self.mass.nrows()
    }

    pub fn ny(&self) -> usize {
        self.mass.ncols()
    }

    pub fn center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.x0 + (ix as f64 + 0.5) * self.dx,
            self.y0 + (iy as f64 + 0.5) * self.dy,
        )
    }

    /// Total mass of cells whose centers satisfy the predicate.
    pub fn region_mass(&self, mut pred: impl FnMut(f64, f64) -> bool) -> f64 {
        let mut total = 0.0;
        for ix in 0..self.nx() {
            for iy in 0..self.ny() {
                let (x, y) = self.center(ix, iy);
                if pred(x, y) {
                    total += self.mass[(ix, iy)];
                }
            }
        }
        total
    }

    /// Center of the highest-mass cell.
    pub fn argmax_center(&self) -> (f64, f64) {
        let mut best = (0, 0);
        let mut best_mass = f64::NEG_INFINITY;
        for ix in 0..self.nx() {
            for iy in 0..self.ny() {
                if self.mass[(ix, iy)] > best_mass {
                    best_mass = self.mass[(ix, iy)];
                    best = (ix, iy);
                }
            }
        }
        self.center(best.0, best.1)
    }

    /// Mass-weighted mean position.
    pub fn mean(&self) -> (f64, f64) {
        let (mut mx, mut my) = (0.0, 0.0);
        for ix in 0..self.nx() {
            for iy in 0..self.ny() {
                let (x, y) = self.center(ix, iy);
                mx += x * self.mass[(ix, iy)];
                my += y * self.mass[(ix, iy)];
            }
        }
        (mx, my)
    }
}

/// Evaluate the landmark's measurement potential (regularizers excluded) on
/// an `nx × ny` grid over `[x_lo, x_hi] × [y_lo, y_hi]` and normalize.
pub fn grid_marginal(
    graph: &FactorGraph,
    landmark: VarId,
    fixed: &Values,
    bounds: ((f64, f64), (f64, f64)),
    resolution: (usize, usize),
) -> Result<GridDensity, OracleError> {
    let ((x_lo, x_hi), (y_lo, y_hi)) = bounds;
    let (nx, ny) = resolution;
    if nx == 0 || ny == 0 || !(x_hi > x_lo) || !(y_hi > y_lo) {
        return Err(OracleError::BadGrid);
    }
    let potential = LandmarkPotential::new(graph, landmark, fixed)?;
    let dx = (x_hi - x_lo) / nx as f64;
    let dy = (y_hi - y_lo) / ny as f64;
    // evaluate in log space and shift by the max before exponentiating so
    // sharply peaked potentials don't underflow to all-zero
    let mut logs = DMatrix::from_element(nx, ny, f64::NEG_INFINITY);
    let mut max_log = f64::NEG_INFINITY;
    for ix in 0..nx {
        for iy in 0..ny {
            let x = x_lo + (ix as f64 + 0.5) * dx;
            let y = y_lo + (iy as f64 + 0.5) * dy;
            let l = potential.log_psi_coords(&[x, y]);
            logs[(ix, iy)] = l;
            max_log = max_log.max(l);
        }
    }
    if max_log == f64::NEG_INFINITY {
        return Err(OracleError::ZeroMass);
    }
    let mut mass = logs.map(|l| (l - max_log).exp());
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(OracleError::ZeroMass);
    }
    mass /= total;
    Ok(GridDensity {
        x0: x_lo,
        y0: y_lo,
        dx,
        dy,
        mass,
    })
}
