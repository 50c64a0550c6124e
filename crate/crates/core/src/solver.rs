//! Sparse nonlinear least-squares solving and the Gaussian belief it yields.
//!
//! The posterior over poses and well-localized landmarks is approximated by a
//! Gaussian centered at the MAP estimate (a Laplace approximation): the mean
//! comes from Levenberg–Marquardt over the whitened factor residuals, and the
//! information matrix is the undamped Gauss–Newton Hessian `H = JᵀJ` built at
//! that mean. `H` is kept in sparse form and factored once per solve with a
//! fill-reducing sparse Cholesky; marginal covariance blocks are recovered by
//! solving against unit vectors, and joint samples are drawn via perturbation
//! of the whitened residuals (`δ = H⁻¹ Jᵀ w`, `w ~ N(0, I)`), which avoids
//! ever materializing a dense covariance.
//!
//! Rank deficiency is surfaced as an explicit [`SolverError::IndeterminateSystem`]
//! naming the under-constrained variables rather than silently regularized —
//! upstream code decides which variables deserve wide priors, not the solver.

use std::collections::BTreeMap;
use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Llt;
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::factor::EvalError;
use crate::graph::FactorGraph;
use crate::values::{Value, ValueKind, Values, VarId};

/// Squared-error charge for a factor whose residual cannot be evaluated at the
/// current estimate (e.g. a landmark behind its camera). The factor drops out
/// of the normal equations but the charge makes any step that *introduces*
/// such a configuration strictly worse, so LM rejects it.
const INVALID_FACTOR_PENALTY: f64 = 1e8;

/// Diagonal entries below this are treated as structurally zero: no factor
/// constrains the coordinate at the current linearization.
const ZERO_DIAG_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("variable {0} has no initial value")]
    MissingInitial(VarId),
    #[error("unknown variable {0}")]
    UnknownVariable(VarId),
    #[error("wrong kind for {var}: expected {expected}, got {found}")]
    KindMismatch {
        var: VarId,
        expected: ValueKind,
        found: ValueKind,
    },
    #[error("indeterminate linear system; under-constrained variables: {}", join_vars(.0))]
    IndeterminateSystem(Vec<VarId>),
    #[error("invalid solver config: {0}")]
    BadConfig(&'static str),
    #[error("graph has no variables")]
    EmptyGraph,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn join_vars(vars: &[VarId]) -> String {
    let names: Vec<String> = vars.iter().map(|v| v.to_string()).collect();
    names.join(", ")
}

/// Levenberg–Marquardt knobs. Damping is multiplicative on the Hessian
/// diagonal and swings by `lambda_scale` on each reject/accept.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Starting damping. Zero makes the first step pure Gauss–Newton.
    pub initial_lambda: f64,
    pub lambda_scale: f64,
    /// Damping above which the solver gives up on finding a better step.
    pub max_lambda: f64,
    /// Stop when an accepted step reduces the squared error by less than this
    /// fraction of the previous error.
    pub relative_decrease_tol: f64,
    /// Stop when an accepted step reduces the squared error by less than this.
    pub absolute_decrease_tol: f64,
    /// Stop when the gradient norm `‖Jᵀr‖` falls below this.
    pub gradient_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 100,
            initial_lambda: 1e-4,
            lambda_scale: 10.0,
            max_lambda: 1e10,
            relative_decrease_tol: 1e-10,
            absolute_decrease_tol: 1e-12,
            gradient_tol: 1e-10,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<(), SolverError> {
        if self.max_iterations == 0 {
            return Err(SolverError::BadConfig("max_iterations must be positive"));
        }
        if !(self.initial_lambda >= 0.0) {
            return Err(SolverError::BadConfig("initial_lambda must be non-negative"));
        }
        if !(self.lambda_scale > 1.0) {
            return Err(SolverError::BadConfig("lambda_scale must exceed 1"));
        }
        if !(self.relative_decrease_tol > 0.0)
            || !(self.absolute_decrease_tol > 0.0)
            || !(self.gradient_tol > 0.0)
        {
            return Err(SolverError::BadConfig("tolerances must be positive"));
        }
        Ok(())
    }
}

/// One whitened residual row: the stacked residual of a single factor and its
/// Jacobian blocks keyed by tangent-space column offset.
struct RowBlock {
    residual: DVector<f64>,
    blocks: Vec<(usize, DMatrix<f64>)>,
}

struct LinearSystem {
    rows: Vec<RowBlock>,
    /// Total squared whitened residual, including invalid-factor penalties.
    error: f64,
}

fn layout(graph: &FactorGraph) -> (Vec<VarId>, BTreeMap<VarId, (usize, usize)>, usize) {
    let ordering: Vec<VarId> = graph.variables().to_vec();
    let mut offsets = BTreeMap::new();
    let mut dim = 0;
    for &v in &ordering {
        let d = graph.var_kind(v).expect("ordering var must exist").dim();
        offsets.insert(v, (dim, d));
        dim += d;
    }
    (ordering, offsets, dim)
}

fn linearize_all(
    graph: &FactorGraph,
    values: &Values,
    offsets: &BTreeMap<VarId, (usize, usize)>,
) -> Result<LinearSystem, SolverError> {
    let mut rows = Vec::with_capacity(graph.num_factors());
    let mut error = 0.0;
    for (_, factor) in graph.factors() {
        match factor.linearize(values) {
            Ok(lin) => {
                error += lin.residual.norm_squared();
                let blocks = lin
                    .blocks
                    .into_iter()
                    .map(|(var, jac)| (offsets[&var].0, jac))
                    .collect();
                rows.push(RowBlock {
                    residual: lin.residual,
                    blocks,
                });
            }
            Err(EvalError::BehindCamera) => error += INVALID_FACTOR_PENALTY,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(LinearSystem { rows, error })
}

fn evaluate_error(graph: &FactorGraph, values: &Values) -> Result<f64, SolverError> {
    let mut error = 0.0;
    for (_, factor) in graph.factors() {
        match factor.whitened_residual(values) {
            Ok(r) => error += r.norm_squared(),
            Err(EvalError::BehindCamera) => error += INVALID_FACTOR_PENALTY,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(error)
}

/// Normal equations of the linearized system: sparse `H = JᵀJ` as triplets,
/// the gradient `g = Jᵀr`, and the diagonal of `H` (for damping and for
/// structural-zero detection).
fn normal_equations(
    sys: &LinearSystem,
    dim: usize,
) -> (Vec<Triplet<usize, usize, f64>>, DVector<f64>, DVector<f64>) {
    let mut triplets = Vec::new();
    let mut grad = DVector::zeros(dim);
    let mut diag = DVector::zeros(dim);
    for row in &sys.rows {
        for (off_i, jac_i) in &row.blocks {
            let jt_r = jac_i.transpose() * &row.residual;
            for (k, v) in jt_r.iter().enumerate() {
                grad[off_i + k] += v;
            }
            for (off_j, jac_j) in &row.blocks {
                let block = jac_i.transpose() * jac_j;
                for c in 0..block.ncols() {
                    for r in 0..block.nrows() {
                        let v = block[(r, c)];
                        if v != 0.0 {
                            triplets.push(Triplet::new(off_i + r, off_j + c, v));
                        }
                    }
                }
                if off_i == off_j {
                    for d in 0..block.nrows().min(block.ncols()) {
                        diag[off_i + d] += block[(d, d)];
                    }
                }
            }
        }
    }
    (triplets, grad, diag)
}

fn assemble(
    dim: usize,
    triplets: &[Triplet<usize, usize, f64>],
    damping: Option<(&DVector<f64>, f64)>,
) -> SparseColMat<usize, f64> {
    let mut all = triplets.to_vec();
    if let Some((diag, lambda)) = damping {
        if lambda > 0.0 {
            for i in 0..dim {
                all.push(Triplet::new(i, i, lambda * diag[i]));
            }
        }
    }
    SparseColMat::try_new_from_triplets(dim, dim, &all).expect("normal-equation indices in range")
}

fn solve_with(llt: &Llt<usize, f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let b = faer::Mat::from_fn(rhs.len(), 1, |i, _| rhs[i]);
    let x = llt.solve(&b);
    DVector::from_fn(rhs.len(), |i, _| x[(i, 0)])
}

fn spmv(triplets: &[Triplet<usize, usize, f64>], x: &DVector<f64>, dim: usize) -> DVector<f64> {
    let mut y = DVector::zeros(dim);
    for t in triplets {
        y[t.row] += t.val * x[t.col];
    }
    y
}

fn retract_all(
    mean: &Values,
    offsets: &BTreeMap<VarId, (usize, usize)>,
    delta: &DVector<f64>,
) -> Values {
    let mut out = Values::new();
    for (&var, &(off, d)) in offsets {
        let value = mean.get(var).expect("mean covers all offsets");
        out.insert(var, value.retract(&delta.as_slice()[off..off + d]));
    }
    out
}

/// Find coordinates with (numerically) zero Hessian diagonal and name the
/// variables that own them. Multiplicative damping cannot repair these.
fn structural_zeros(
    diag: &DVector<f64>,
    offsets: &BTreeMap<VarId, (usize, usize)>,
) -> Vec<VarId> {
    let mut vars = Vec::new();
    for (&var, &(off, d)) in offsets {
        if (0..d).any(|k| diag[off + k].abs() < ZERO_DIAG_TOL) {
            vars.push(var);
        }
    }
    vars
}

/// Dense eigen-analysis of a singular `H`, run only on the failure path: the
/// variables carrying significant mass in near-null eigenvectors are the
/// under-constrained ones.
fn diagnose_indeterminate(
    dim: usize,
    triplets: &[Triplet<usize, usize, f64>],
    offsets: &BTreeMap<VarId, (usize, usize)>,
) -> SolverError {
    let mut dense = DMatrix::<f64>::zeros(dim, dim);
    for t in triplets {
        dense[(t.row, t.col)] += t.val;
    }
    let eig = nalgebra::SymmetricEigen::new(dense);
    let scale = eig.eigenvalues.iter().fold(1.0_f64, |a, &b| a.max(b.abs()));
    let mut flagged: Vec<VarId> = Vec::new();
    for (idx, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam <= 1e-9 * scale {
            let vec = eig.eigenvectors.column(idx);
            let mut best: Option<(f64, VarId)> = None;
            let mut any = false;
            for (&var, &(off, d)) in offsets {
                let mass = vec.rows(off, d).norm_squared();
                if mass > 0.2 {
                    if !flagged.contains(&var) {
                        flagged.push(var);
                    }
                    any = true;
                }
                if best.map_or(true, |(m, _)| mass > m) {
                    best = Some((mass, var));
                }
            }
            if !any {
                if let Some((_, var)) = best {
                    if !flagged.contains(&var) {
                        flagged.push(var);
                    }
                }
            }
        }
    }
    flagged.sort();
    SolverError::IndeterminateSystem(flagged)
}

/// Gaussian approximation of the posterior: MAP mean plus the information
/// matrix `H = JᵀJ` factored at that mean. Snapshots are cheap to clone and
/// safe to read from multiple threads while the next update is being built.
#[derive(Clone)]
pub struct GaussianBelief {
    mean: Values,
    ordering: Vec<VarId>,
    offsets: BTreeMap<VarId, (usize, usize)>,
    dim: usize,
    resid_dim: usize,
    triplets: Arc<Vec<Triplet<usize, usize, f64>>>,
    llt: Arc<Llt<usize, f64>>,
    jac_rows: Arc<Vec<RowBlock>>,
    /// `‖Jᵀr‖` at the mean.
    pub gradient_norm: f64,
    /// Total squared whitened residual at the mean.
    pub total_squared_error: f64,
    /// Number of LM solve attempts performed.
    pub iterations: usize,
    /// Squared error at the initial point and after each accepted step.
    pub error_history: Vec<f64>,
}

impl std::fmt::Debug for GaussianBelief {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GaussianBelief")
            .field("vars", &self.ordering.len())
            .field("tangent_dim", &self.dim)
            .field("error", &self.total_squared_error)
            .field("gradient_norm", &self.gradient_norm)
            .finish()
    }
}

impl GaussianBelief {
    pub fn mean(&self) -> &Values {
        &self.mean
    }

    pub fn ordering(&self) -> &[VarId] {
        &self.ordering
    }

    pub fn tangent_dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, var: VarId) -> bool {
        self.offsets.contains_key(&var)
    }

    /// Tangent-space (offset, dimension) of a variable in this belief's ordering.
    pub fn var_offset(&self, var: VarId) -> Option<(usize, usize)> {
        self.offsets.get(&var).copied()
    }

    fn gather(&self, vars: &[VarId]) -> Result<(Vec<(usize, usize)>, usize), SolverError> {
        let mut spans = Vec::with_capacity(vars.len());
        let mut total = 0;
        for &v in vars {
            let span = *self
                .offsets
                .get(&v)
                .ok_or(SolverError::UnknownVariable(v))?;
            spans.push(span);
            total += span.1;
        }
        Ok((spans, total))
    }

    /// Dense covariance block over `vars`, i.e. the corresponding rows and
    /// columns of `H⁻¹`, obtained by solving against unit vectors. Symmetric
    /// by construction (the raw solves are symmetrized to scrub roundoff).
    pub fn marginal_covariance(&self, vars: &[VarId]) -> Result<DMatrix<f64>, SolverError> {
        let (spans, total) = self.gather(vars)?;
        let mut cov = DMatrix::zeros(total, total);
        let mut col = 0;
        for &(off_j, dim_j) in &spans {
            for j in 0..dim_j {
                let mut e = DVector::zeros(self.dim);
                e[off_j + j] = 1.0;
                let x = solve_with(&self.llt, &e);
                let mut row = 0;
                for &(off_i, dim_i) in &spans {
                    for i in 0..dim_i {
                        cov[(row + i, col + j)] = x[off_i + i];
                    }
                    row += dim_i;
                }
            }
            col += dim_j;
        }
        let sym = 0.5 * (&cov + cov.transpose());
        Ok(sym)
    }

    /// Draw `k` joint samples of `vars` from the Gaussian. Each sample comes
    /// from a full-dimensional perturbation `δ = H⁻¹ Jᵀ w` with `w ~ N(0, I)`
    /// (so `Cov(δ) = H⁻¹` exactly), retracted at the mean and then restricted
    /// to the requested variables.
    pub fn sample_joint(
        &self,
        vars: &[VarId],
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Values>, SolverError> {
        if k == 0 {
            return Err(SolverError::BadConfig("sample count must be at least 1"));
        }
        let (spans, _) = self.gather(vars)?;
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let mut b = DVector::zeros(self.dim);
            for row in self.jac_rows.iter() {
                let w = DVector::from_fn(row.residual.len(), |_, _| rng.sample(StandardNormal));
                for (off, jac) in &row.blocks {
                    let contrib = jac.transpose() * &w;
                    for (i, v) in contrib.iter().enumerate() {
                        b[off + i] += v;
                    }
                }
            }
            let delta = solve_with(&self.llt, &b);
            let mut values = Values::new();
            for (&var, &(off, d)) in vars.iter().zip(&spans) {
                let value = self.mean.get(var).expect("belief mean covers ordering");
                values.insert(var, value.retract(&delta.as_slice()[off..off + d]));
            }
            out.push(values);
        }
        Ok(out)
    }

    /// Total whitened residual rows backing this belief (used by tests).
    pub fn residual_dim(&self) -> usize {
        self.resid_dim
    }

    /// `H x` for the stored information matrix (used by tests and diagnostics).
    pub fn information_product(&self, x: &DVector<f64>) -> DVector<f64> {
        spmv(&self.triplets, x, self.dim)
    }
}

/// Minimize the total squared whitened residual of `graph` starting from
/// `init`, returning the Gaussian belief at the optimum.
pub fn optimize(
    graph: &FactorGraph,
    init: &Values,
    cfg: &SolverConfig,
) -> Result<GaussianBelief, SolverError> {
    cfg.validate()?;
    let (ordering, offsets, dim) = layout(graph);
    if dim == 0 {
        return Err(SolverError::EmptyGraph);
    }
    let mut mean = Values::new();
    for &v in &ordering {
        let value = init.get(v).ok_or(SolverError::MissingInitial(v))?;
        let expected = graph.var_kind(v).expect("ordering var exists");
        if value.kind() != expected {
            return Err(SolverError::KindMismatch {
                var: v,
                expected,
                found: value.kind(),
            });
        }
        mean.insert(v, value.clone());
    }

    let mut sys = linearize_all(graph, &mean, &offsets)?;
    let mut history = vec![sys.error];
    let mut lambda = cfg.initial_lambda;
    let mut attempts = 0usize;

    'outer: while attempts < cfg.max_iterations {
        let (triplets, grad, diag) = normal_equations(&sys, dim);
        if grad.norm() <= cfg.gradient_tol {
            break;
        }
        let zeros = structural_zeros(&diag, &offsets);
        if !zeros.is_empty() {
            return Err(SolverError::IndeterminateSystem(zeros));
        }
        let neg_grad = -&grad;
        loop {
            if lambda > cfg.max_lambda {
                break 'outer;
            }
            let h = assemble(dim, &triplets, Some((&diag, lambda)));
            let llt = match h.sp_cholesky(faer::Side::Lower) {
                Ok(f) => f,
                Err(_) => return Err(diagnose_indeterminate(dim, &triplets, &offsets)),
            };
            let delta = solve_with(&llt, &neg_grad);
            attempts += 1;
            if !delta.iter().all(|x| x.is_finite()) {
                return Err(diagnose_indeterminate(dim, &triplets, &offsets));
            }
            let candidate = retract_all(&mean, &offsets, &delta);
            let cand_err = evaluate_error(graph, &candidate)?;
            if cand_err <= sys.error {
                let decrease = sys.error - cand_err;
                let relative = if sys.error > 0.0 {
                    decrease / sys.error
                } else {
                    0.0
                };
                mean = candidate;
                sys = linearize_all(graph, &mean, &offsets)?;
                sys.error = cand_err;
                history.push(cand_err);
                lambda /= cfg.lambda_scale;
                if decrease <= cfg.absolute_decrease_tol || relative <= cfg.relative_decrease_tol {
                    break 'outer;
                }
                break;
            }
            lambda = if lambda == 0.0 {
                1e-4
            } else {
                lambda * cfg.lambda_scale
            };
            if attempts >= cfg.max_iterations {
                break 'outer;
            }
        }
    }

    finalize(graph, mean, ordering, offsets, dim, attempts, history)
}

fn finalize(
    graph: &FactorGraph,
    mean: Values,
    ordering: Vec<VarId>,
    offsets: BTreeMap<VarId, (usize, usize)>,
    dim: usize,
    iterations: usize,
    error_history: Vec<f64>,
) -> Result<GaussianBelief, SolverError> {
    let sys = linearize_all(graph, &mean, &offsets)?;
    let (triplets, grad, diag) = normal_equations(&sys, dim);
    let zeros = structural_zeros(&diag, &offsets);
    if !zeros.is_empty() {
        return Err(SolverError::IndeterminateSystem(zeros));
    }
    let h = assemble(dim, &triplets, None);
    let llt = match h.sp_cholesky(faer::Side::Lower) {
        Ok(f) => f,
        Err(_) => return Err(diagnose_indeterminate(dim, &triplets, &offsets)),
    };
    // A near-singular H can slip through Cholesky with tiny pivots; verify the
    // factorization actually inverts H before trusting it for covariances.
    let ones = DVector::from_element(dim, 1.0);
    let probe = solve_with(&llt, &spmv(&triplets, &ones, dim));
    if (&probe - &ones).amax() > 1e-6 {
        return Err(diagnose_indeterminate(dim, &triplets, &offsets));
    }
    let resid_dim = sys.rows.iter().map(|r| r.residual.len()).sum();
    Ok(GaussianBelief {
        mean,
        ordering,
        offsets,
        dim,
        resid_dim,
        triplets: Arc::new(triplets),
        llt: Arc::new(llt),
        jac_rows: Arc::new(sys.rows),
        gradient_norm: grad.norm(),
        total_squared_error: sys.error,
        iterations,
        error_history,
    })
}

/// Unnormalized log posterior of a full assignment: the sum of factor
/// log-likelihoods (−∞ if any factor's residual is invalid there).
pub fn log_posterior(graph: &FactorGraph, values: &Values) -> f64 {
    graph.log_posterior(values).unwrap_or(f64::NEG_INFINITY)
}

/// Stateful wrapper that owns the linearization point between solves: new
/// variables get initial values here, re-initialization overwrites them, and
/// each optimize() warm-starts from the previous mean.
#[derive(Clone)]
pub struct Solver {
    values: Values,
    pub config: SolverConfig,
}

impl Solver {
    pub fn new(config: SolverConfig) -> Self {
        Solver {
            values: Values::new(),
            config,
        }
    }

    /// Install the initial value for a (possibly new) variable.
    pub fn set_initial(&mut self, var: VarId, value: Value) {
        self.values.insert(var, value);
    }

    /// Overwrite the linearization point of an existing variable, so the next
    /// optimize() starts from `value` for `var` and the current point for all
    /// others. The variable must exist and keep its kind.
    pub fn reset_linearization(&mut self, var: VarId, value: Value) -> Result<(), SolverError> {
        let current = self
            .values
            .get(var)
            .ok_or(SolverError::UnknownVariable(var))?;
        if current.kind() != value.kind() {
            return Err(SolverError::KindMismatch {
                var,
                expected: current.kind(),
                found: value.kind(),
            });
        }
        self.values.insert(var, value);
        Ok(())
    }

    /// Current linearization point of one variable.
    pub fn value(&self, var: VarId) -> Option<&Value> {
        self.values.get(var)
    }

    pub fn values(&self) -> &Values {
        &self.values
    }

    pub fn optimize(&mut self, graph: &FactorGraph) -> Result<GaussianBelief, SolverError> {
        let belief = optimize(graph, &self.values, &self.config)?;
        for (var, value) in belief.mean().iter() {
            self.values.insert(var, value.clone());
        }
        Ok(belief)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::Factor;
    use crate::geometry::PoseSE2;
    use crate::noise::Noise;
    use crate::values::Value;
    use nalgebra::{Matrix2, Vector2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p(i: u32) -> VarId {
        VarId::Pose(i)
    }

    fn l(i: u32) -> VarId {
        VarId::Landmark(i)
    }

    /// Independent dense weighted-least-squares oracle: stacks every factor's
    /// whitened linearization into one dense J/r at `point` and solves the
    /// normal equations with nalgebra. Exact for linear graphs.
    fn dense_wls(graph: &FactorGraph, point: &Values) -> (Values, DMatrix<f64>) {
        let (_, offsets, dim) = layout(graph);
        let mut jac_rows: Vec<DMatrix<f64>> = Vec::new();
        let mut res_rows: Vec<DVector<f64>> = Vec::new();
        for (_, factor) in graph.factors() {
            let lin = factor.linearize(point).unwrap();
            let mut row = DMatrix::zeros(lin.residual.len(), dim);
            for (var, block) in &lin.blocks {
                let (off, d) = offsets[var];
                row.view_mut((0, off), (block.nrows(), d)).copy_from(block);
            }
            jac_rows.push(row);
            res_rows.push(lin.residual);
        }
        let total: usize = res_rows.iter().map(|r| r.len()).sum();
        let mut jac = DMatrix::zeros(total, dim);
        let mut res = DVector::zeros(total);
        let mut at = 0;
        for (j, r) in jac_rows.iter().zip(&res_rows) {
            jac.view_mut((at, 0), (r.len(), dim)).copy_from(j);
            res.rows_mut(at, r.len()).copy_from(r);
            at += r.len();
        }
        let h = jac.transpose() * &jac;
        let cov = h.clone().try_inverse().unwrap();
        let delta = -(&cov * (jac.transpose() * res));
        (retract_all(point, &offsets, &delta), cov)
    }

    /// Linear-Gaussian chain: point priors plus point-difference odometry, so
    /// every residual is affine and WLS is exact.
    fn linear_chain() -> (FactorGraph, Values) {
        let mut g = FactorGraph::new();
        g.add_variable(p(0), ValueKind::Point2).unwrap();
        g.add_variable(p(1), ValueKind::Point2).unwrap();
        g.add_variable(p(2), ValueKind::Point2).unwrap();
        g.add_factor(Factor::Prior {
            var: p(0),
            mean: Value::Point2(Vector2::new(1.3, -0.7)),
            noise: Noise::isotropic(2, 0.5).unwrap(),
        })
        .unwrap();
        g.add_factor(Factor::Odometry {
            from: p(0),
            to: p(1),
            delta: Value::Point2(Vector2::new(1.0, 2.0)),
            noise: Noise::diagonal(&[0.3, 0.4]).unwrap(),
        })
        .unwrap();
        g.add_factor(Factor::Odometry {
            from: p(1),
            to: p(2),
            delta: Value::Point2(Vector2::new(-0.5, 1.0)),
            noise: Noise::isotropic(2, 0.2).unwrap(),
        })
        .unwrap();
        g.add_factor(Factor::Prior {
            var: p(2),
            mean: Value::Point2(Vector2::new(1.9, 2.4)),
            noise: Noise::isotropic(2, 1.0).unwrap(),
        })
        .unwrap();
        let mut init = Values::new();
        for i in 0..3 {
            init.insert(p(i), Value::Point2(Vector2::new(0.0, 0.0)));
        }
        (g, init)
    }

    #[test]
    fn linear_gaussian_matches_dense_weighted_least_squares() {
        let (g, init) = linear_chain();
        let belief = optimize(&g, &init, &SolverConfig::default()).unwrap();
        let (oracle_mean, oracle_cov) = dense_wls(&g, &init);
        for i in 0..3 {
            let got = belief.mean().get(p(i)).unwrap().as_point2().unwrap();
            let want = oracle_mean.get(p(i)).unwrap().as_point2().unwrap();
            assert!((got - want).norm() < 1e-9, "p{i}: {got:?} vs {want:?}");
        }
        let cov = belief.marginal_covariance(&[p(0), p(1), p(2)]).unwrap();
        assert!((&cov - &oracle_cov).amax() < 1e-9);
    }

    #[test]
    fn gauss_newton_exact_on_linear_graph_with_zero_damping() {
        let (g, _) = linear_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut init = Values::new();
        for i in 0..3 {
            init.insert(
                p(i),
                Value::Point2(Vector2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0))),
            );
        }
        let cfg = SolverConfig {
            initial_lambda: 0.0,
            ..SolverConfig::default()
        };
        let belief = optimize(&g, &init, &cfg).unwrap();
        let (oracle_mean, _) = dense_wls(&g, &init);
        for i in 0..3 {
            let got = belief.mean().get(p(i)).unwrap().as_point2().unwrap();
            let want = oracle_mean.get(p(i)).unwrap().as_point2().unwrap();
            assert!((got - want).norm() < 1e-9);
        }
        // one Gauss–Newton step reaches the optimum; a second only confirms it
        assert!(belief.iterations <= 2, "took {} attempts", belief.iterations);
    }

    #[test]
    fn single_prior_recovers_mean_and_covariance() {
        let mut g = FactorGraph::new();
        g.add_variable(l(0), ValueKind::Point2).unwrap();
        let cov = Matrix2::new(0.09, 0.027, 0.027, 0.16);
        g.add_factor(Factor::Prior {
            var: l(0),
            mean: Value::Point2(Vector2::new(2.0, 3.0)),
            noise: Noise::full_covariance(DMatrix::from_iterator(2, 2, cov.iter().copied()))
                .unwrap(),
        })
        .unwrap();
        let mut init = Values::new();
        init.insert(l(0), Value::Point2(Vector2::new(-1.0, 4.0)));
        let belief = optimize(&g, &init, &SolverConfig::default()).unwrap();
        let mean = belief.mean().get(l(0)).unwrap().as_point2().unwrap();
        assert!((mean - Vector2::new(2.0, 3.0)).norm() < 1e-9);
        let marg = belief.marginal_covariance(&[l(0)]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((marg[(i, j)] - cov[(i, j)]).abs() < 1e-8);
            }
        }
    }

    fn se2_prior(var: VarId, x: f64, y: f64, theta: f64, sigma: f64) -> Factor {
        Factor::Prior {
            var,
            mean: Value::PoseSE2(PoseSE2::new(x, y, theta)),
            noise: Noise::isotropic(3, sigma).unwrap(),
        }
    }

    fn range_factor(pose: VarId, landmark: VarId, z: f64, sigma: f64) -> Factor {
        Factor::Range {
            pose,
            landmark,
            range: z,
            sigma,
        }
    }

    #[test]
    fn zero_residual_init_converges_within_three_iterations() {
        let mut g = FactorGraph::new();
        g.add_variable(p(0), ValueKind::PoseSE2).unwrap();
        g.add_variable(p(1), ValueKind::PoseSE2).unwrap();
        g.add_variable(l(0), ValueKind::Point2).unwrap();
        g.add_factor(se2_prior(p(0), 0.0, 0.0, 0.0, 0.01)).unwrap();
        g.add_factor(se2_prior(p(1), 2.0, 0.0, 0.0, 0.01)).unwrap();
        let d = 2.0_f64.hypot(1.0);
        g.add_factor(range_factor(p(0), l(0), d, 0.1)).unwrap();
        g.add_factor(range_factor(p(1), l(0), 1.0, 0.1)).unwrap();
        let mut init = Values::new();
        init.insert(p(0), Value::PoseSE2(PoseSE2::new(0.0, 0.0, 0.0)));
        init.insert(p(1), Value::PoseSE2(PoseSE2::new(2.0, 0.0, 0.0)));
        init.insert(l(0), Value::Point2(Vector2::new(2.0, 1.0)));
        let belief = optimize(&g, &init, &SolverConfig::default()).unwrap();
        assert!(belief.iterations <= 3);
        assert!(belief.gradient_norm < 1e-8);
        assert!(belief.total_squared_error < 1e-12);
    }

    #[test]
    fn marginal_invariant_to_variable_insertion_order() {
        let build = |flip: bool| {
            let mut g = FactorGraph::new();
            if flip {
                g.add_variable(p(1), ValueKind::Point2).unwrap();
                g.add_variable(p(0), ValueKind::Point2).unwrap();
            } else {
                g.add_variable(p(0), ValueKind::Point2).unwrap();
                g.add_variable(p(1), ValueKind::Point2).unwrap();
            }
            g.add_factor(Factor::Prior {
                var: p(0),
                mean: Value::Point2(Vector2::new(1.0, 2.0)),
                noise: Noise::diagonal(&[0.7, 0.3]).unwrap(),
            })
            .unwrap();
            g.add_factor(Factor::Odometry {
                from: p(0),
                to: p(1),
                delta: Value::Point2(Vector2::new(0.5, -0.25)),
                noise: Noise::diagonal(&[0.2, 0.9]).unwrap(),
            })
            .unwrap();
            let mut init = Values::new();
            init.insert(p(0), Value::Point2(Vector2::zeros()));
            init.insert(p(1), Value::Point2(Vector2::zeros()));
            optimize(&g, &init, &SolverConfig::default()).unwrap()
        };
        let a = build(false);
        let b = build(true);
        assert_ne!(a.ordering(), b.ordering());
        let ca = a.marginal_covariance(&[p(0)]).unwrap();
        let cb = b.marginal_covariance(&[p(0)]).unwrap();
        assert!((&ca - &cb).amax() < 1e-10);
        let ja = a.marginal_covariance(&[p(0), p(1)]).unwrap();
        let jb = b.marginal_covariance(&[p(0), p(1)]).unwrap();
        assert!((&ja - &jb).amax() < 1e-10);
    }

    #[test]
    fn marginal_blocks_compose_to_full_covariance() {
        // SE2 chain with two landmarks: 3 poses (9 dof) + 2 points (4 dof)
        let mut g = FactorGraph::new();
        for i in 0..3 {
            g.add_variable(p(i), ValueKind::PoseSE2).unwrap();
        }
        for i in 0..2 {
            g.add_variable(l(i), ValueKind::Point2).unwrap();
        }
        g.add_factor(se2_prior(p(0), 0.0, 0.0, 0.0, 0.1)).unwrap();
        for i in 0..2 {
            g.add_factor(Factor::Odometry {
                from: p(i),
                to: p(i + 1),
                delta: Value::PoseSE2(PoseSE2::new(1.0, 0.0, 0.2)),
                noise: Noise::diagonal(&[0.05, 0.05, 0.02]).unwrap(),
            })
            .unwrap();
        }
        for (pi, li, z) in [(0u32, 0u32, 2.0), (1, 0, 1.7), (1, 1, 2.2), (2, 1, 1.4)] {
            g.add_factor(range_factor(p(pi), l(li), z, 0.2)).unwrap();
        }
        // landmarks need two non-parallel constraints; give each a weak prior
        for i in 0..2 {
            g.add_factor(Factor::Prior {
                var: l(i),
                mean: Value::Point2(Vector2::new(i as f64, 2.0)),
                noise: Noise::isotropic(2, 5.0).unwrap(),
            })
            .unwrap();
        }
        let mut init = Values::new();
        init.insert(p(0), Value::PoseSE2(PoseSE2::new(0.0, 0.0, 0.0)));
        init.insert(p(1), Value::PoseSE2(PoseSE2::new(1.0, 0.1, 0.2)));
        init.insert(p(2), Value::PoseSE2(PoseSE2::new(1.9, 0.4, 0.4)));
        init.insert(l(0), Value::Point2(Vector2::new(0.3, 1.9)));
        init.insert(l(1), Value::Point2(Vector2::new(1.2, 2.1)));
        let belief = optimize(&g, &init, &SolverConfig::default()).unwrap();
        let all = [p(0), p(1), p(2), l(0), l(1)];
        let full = belief.marginal_covariance(&all).unwrap();
        // every pairwise block must agree with the corresponding sub-block
        let offs = [0usize, 3, 6, 9, 11];
        let dims = [3usize, 3, 3, 2, 2];
        for i in 0..all.len() {
            for j in 0..all.len() {
                let pair = belief.marginal_covariance(&[all[i], all[j]]).unwrap();
                let block = pair.view((0, dims[i]), (dims[i], dims[j]));
                let want = full.view((offs[i], offs[j]), (dims[i], dims[j]));
                assert!((block - want).amax() < 1e-8, "block ({i},{j})");
            }
        }
    }

    #[test]
    fn unconstrained_variable_reported_by_name() {
        let mut g = FactorGraph::new();
        g.add_variable(p(0), ValueKind::Point2).unwrap();
        g.add_variable(l(3), ValueKind::Point2).unwrap();
        g.add_factor(Factor::Prior {
            var: p(0),
            mean: Value::Point2(Vector2::zeros()),
            noise: Noise::isotropic(2, 1.0).unwrap(),
        })
        .unwrap();
        let mut init = Values::new();
        init.insert(p(0), Value::Point2(Vector2::zeros()));
        init.insert(l(3), Value::Point2(Vector2::new(1.0, 1.0)));
        let err = optimize(&g, &init, &SolverConfig::default()).unwrap_err();
        match err {
            SolverError::IndeterminateSystem(vars) => {
                assert_eq!(vars, vec![l(3)]);
            }
            other => panic!("expected indeterminate system, got {other}"),
        }
    }

    #[test]
    fn rank_deficient_landmark_reported_by_name() {
        // one range constrains only the radial direction; the tangential
        // direction is unobservable, which only the full H reveals
        let mut g = FactorGraph::new();
        g.add_variable(p(0), ValueKind::PoseSE2).unwrap();
        g.add_variable(l(0), ValueKind::Point2).unwrap();
        g.add_factor(se2_prior(p(0), 0.0, 0.0, 0.0, 0.01)).unwrap();
        g.add_factor(range_factor(p(0), l(0), 5.0, 0.3)).unwrap();
        let mut init = Values::new();
        init.insert(p(0), Value::PoseSE2(PoseSE2::new(0.0, 0.0, 0.0)));
        init.insert(l(0), Value::Point2(Vector2::new(3.0, 4.0)));
        let err = optimize(&g, &init, &SolverConfig::default()).unwrap_err();
        match err {
            SolverError::IndeterminateSystem(vars) => {
                assert!(vars.contains(&l(0)), "named {vars:?}");
                assert!(!vars.contains(&p(0)), "pose is fully constrained: {vars:?}");
            }
            other => panic!("expected indeterminate system, got {other}"),
        }
    }

    #[test]
    fn sample_joint_covariance_matches_marginal() {
        let mut g = FactorGraph::new();
        g.add_variable(l(0), ValueKind::Point2).unwrap();
        let cov = DMatrix::from_row_slice(2, 2, &[0.09, 0.027, 0.027, 0.04]);
        g.add_factor(Factor::Prior {
            var: l(0),
            mean: Value::Point2(Vector2::new(-1.0, 2.5)),
            noise: Noise::full_covariance(cov.clone()).unwrap(),
        })
        .unwrap();
        let mut init = Values::new();
        init.insert(l(0), Value::Point2(Vector2::zeros()));
        let belief = optimize(&g, &init, &SolverConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let samples = belief.sample_joint(&[l(0)], 10_000, &mut rng).unwrap();
        let pts: Vec<Vector2<f64>> = samples
            .iter()
            .map(|v| *v.get(l(0)).unwrap().as_point2().unwrap())
            .collect();
        let mean = pts.iter().sum::<Vector2<f64>>() / pts.len() as f64;
        let mut emp = Matrix2::zeros();
        for pt in &pts {
            let d = pt - mean;
            emp += d * d.transpose();
        }
        emp /= (pts.len() - 1) as f64;
        let want = belief.marginal_covariance(&[l(0)]).unwrap();
        let diff = (emp
            - Matrix2::new(want[(0, 0)], want[(0, 1)], want[(1, 0)], want[(1, 1)]))
        .norm();
        assert!(
            diff < 0.1 * want.norm(),
            "sample covariance off by {diff} (want norm {})",
            want.norm()
        );
    }

    #[test]
    fn sample_joint_tiny_covariance_collapses_to_mean() {
        let mut g = FactorGraph::new();
        g.add_variable(l(0), ValueKind::Point2).unwrap();
        g.add_factor(Factor::Prior {
            var: l(0),
            mean: Value::Point2(Vector2::new(4.0, -2.0)),
            noise: Noise::isotropic(2, 1e-6).unwrap(),
        })
        .unwrap();
        let mut init = Values::new();
        init.insert(l(0), Value::Point2(Vector2::new(4.0, -2.0)));
        let belief = optimize(&g, &init, &SolverConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in belief.sample_joint(&[l(0)], 200, &mut rng).unwrap() {
            let pt = v.get(l(0)).unwrap().as_point2().unwrap();
            assert!((pt - Vector2::new(4.0, -2.0)).norm() < 1e-4);
        }
    }

    #[test]
    fn sample_joint_correlation_sign_matches_covariance() {
        let mut g = FactorGraph::new();
        g.add_variable(p(0), ValueKind::Point2).unwrap();
        g.add_variable(p(1), ValueKind::Point2).unwrap();
        g.add_factor(Factor::Prior {
            var: p(0),
            mean: Value::Point2(Vector2::zeros()),
            noise: Noise::isotropic(2, 1.0).unwrap(),
        })
        .unwrap();
        g.add_factor(Factor::Odometry {
            from: p(0),
            to: p(1),
            delta: Value::Point2(Vector2::new(1.0, 0.0)),
            noise: Noise::isotropic(2, 0.3).unwrap(),
        })
        .unwrap();
        let mut init = Values::new();
        init.insert(p(0), Value::Point2(Vector2::zeros()));
        init.insert(p(1), Value::Point2(Vector2::new(1.0, 0.0)));
        let belief = optimize(&g, &init, &SolverConfig::default()).unwrap();
        let full = belief.marginal_covariance(&[p(0), p(1)]).unwrap();
        assert!(full[(0, 2)] > 0.0, "chained point shares prior uncertainty");
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let samples = belief.sample_joint(&[p(0), p(1)], 4000, &mut rng).unwrap();
        let xs: Vec<(f64, f64)> = samples
            .iter()
            .map(|v| {
                (
                    v.get(p(0)).unwrap().as_point2().unwrap().x,
                    v.get(p(1)).unwrap().as_point2().unwrap().x,
                )
            })
            .collect();
        let mx: f64 = xs.iter().map(|a| a.0).sum::<f64>() / xs.len() as f64;
        let my: f64 = xs.iter().map(|a| a.1).sum::<f64>() / xs.len() as f64;
        let c: f64 = xs.iter().map(|a| (a.0 - mx) * (a.1 - my)).sum::<f64>() / xs.len() as f64;
        assert!(c > 0.0, "empirical cross-covariance {c} should be positive");
    }

    #[test]
    fn reset_linearization_reads_back_and_is_noop_at_mean() {
        let (g, init) = linear_chain();
        let mut solver = Solver::new(SolverConfig::default());
        for (var, value) in init.iter() {
            solver.set_initial(var, value.clone());
        }
        let first = solver.optimize(&g).unwrap();
        let mean0 = first.mean().get(p(0)).unwrap().clone();
        solver.reset_linearization(p(0), mean0.clone()).unwrap();
        assert_eq!(
            solver.value(p(0)).unwrap().as_point2().unwrap(),
            mean0.as_point2().unwrap()
        );
        let second = solver.optimize(&g).unwrap();
        for i in 0..3 {
            let a = first.mean().get(p(i)).unwrap().as_point2().unwrap();
            let b = second.mean().get(p(i)).unwrap().as_point2().unwrap();
            assert!((a - b).norm() < 1e-9);
        }
        // value is visible before the next optimize
        let probe = Value::Point2(Vector2::new(42.0, -13.0));
        solver.reset_linearization(p(1), probe.clone()).unwrap();
        assert_eq!(
            solver.value(p(1)).unwrap().as_point2().unwrap(),
            probe.as_point2().unwrap()
        );
        // unknown variable and kind mismatch are rejected
        assert!(matches!(
            solver.reset_linearization(l(9), probe.clone()),
            Err(SolverError::UnknownVariable(_))
        ));
        assert!(matches!(
            solver.reset_linearization(p(0), Value::PoseSE2(PoseSE2::identity())),
            Err(SolverError::KindMismatch { .. })
        ));
    }

    /// Three ranging positions, two of them on the x-axis, so a landmark at
    /// (5, 4) has a mirror basin near (5, -4) held up only by the two strong
    /// ranges; the weak third range makes the true basin strictly better.
    fn mirror_basin_graph() -> (FactorGraph, Values) {
        let mut g = FactorGraph::new();
        for (i, (x, y)) in [(0.0, 0.0), (10.0, 0.0), (2.0, 3.0)].iter().enumerate() {
            g.add_variable(p(i as u32), ValueKind::PoseSE2).unwrap();
            g.add_factor(se2_prior(p(i as u32), *x, *y, 0.0, 1e-3)).unwrap();
        }
        g.add_variable(l(0), ValueKind::Point2).unwrap();
        let truth = Vector2::new(5.0, 4.0);
        let d0 = truth.norm();
        let d1 = (truth - Vector2::new(10.0, 0.0)).norm();
        let d2 = (truth - Vector2::new(2.0, 3.0)).norm();
        g.add_factor(range_factor(p(0), l(0), d0, 0.1)).unwrap();
        g.add_factor(range_factor(p(1), l(0), d1, 0.1)).unwrap();
        g.add_factor(range_factor(p(2), l(0), d2, 5.0)).unwrap();
        let mut init = Values::new();
        init.insert(p(0), Value::PoseSE2(PoseSE2::new(0.0, 0.0, 0.0)));
        init.insert(p(1), Value::PoseSE2(PoseSE2::new(10.0, 0.0, 0.0)));
        init.insert(p(2), Value::PoseSE2(PoseSE2::new(2.0, 3.0, 0.0)));
        init.insert(l(0), Value::Point2(Vector2::new(5.0, -3.8)));
        (g, init)
    }

    #[test]
    fn reset_escapes_mirror_basin() {
        let (g, init) = mirror_basin_graph();
        let mut solver = Solver::new(SolverConfig::default());
        for (var, value) in init.iter() {
            solver.set_initial(var, value.clone());
        }
        let stuck = solver.optimize(&g).unwrap();
        let lm = *stuck.mean().get(l(0)).unwrap().as_point2().unwrap();
        assert!(lm.y < 0.0, "landmark should settle in the mirror basin: {lm:?}");
        let stuck_err = stuck.total_squared_error;

        solver
            .reset_linearization(l(0), Value::Point2(Vector2::new(5.0, 4.0)))
            .unwrap();
        let freed = solver.optimize(&g).unwrap();
        let lm = *freed.mean().get(l(0)).unwrap().as_point2().unwrap();
        assert!(lm.y > 0.0, "landmark should land in the true basin: {lm:?}");
        assert!(
            freed.total_squared_error < stuck_err,
            "true basin must score better: {} vs {stuck_err}",
            freed.total_squared_error
        );
    }

    #[test]
    fn accepted_steps_never_increase_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        for _ in 0..10 {
            let (g, _) = mirror_basin_graph();
            let mut init = Values::new();
            init.insert(p(0), Value::PoseSE2(PoseSE2::new(0.0, 0.0, 0.0)));
            init.insert(p(1), Value::PoseSE2(PoseSE2::new(10.0, 0.0, 0.0)));
            init.insert(p(2), Value::PoseSE2(PoseSE2::new(2.0, 3.0, 0.0)));
            init.insert(
                l(0),
                Value::Point2(Vector2::new(
                    rng.gen_range(-8.0..14.0),
                    rng.gen_range(-8.0..8.0),
                )),
            );
            let belief = optimize(&g, &init, &SolverConfig::default()).unwrap();
            for w in belief.error_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "history not monotone: {w:?}");
            }
        }
    }

    #[test]
    fn log_posterior_peaks_at_map_on_linear_graph() {
        let (g, init) = linear_chain();
        let belief = optimize(&g, &init, &SolverConfig::default()).unwrap();
        let at_map = log_posterior(&g, belief.mean());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, offsets, dim) = layout(&g);
        for _ in 0..25 {
            let delta = DVector::from_fn(dim, |_, _| rng.gen_range(-0.5..0.5));
            let perturbed = retract_all(belief.mean(), &offsets, &delta);
            assert!(log_posterior(&g, &perturbed) <= at_map + 1e-12);
        }
    }

    #[test]
    fn recovers_from_behind_camera_initialization() {
        use crate::factor::CameraIntrinsics;
        use crate::geometry::PoseSE3;
        use nalgebra::Vector3;
        let mut g = FactorGraph::new();
        g.add_variable(p(0), ValueKind::PoseSE3).unwrap();
        g.add_variable(l(0), ValueKind::Point3).unwrap();
        g.add_factor(Factor::Prior {
            var: p(0),
            mean: Value::PoseSE3(PoseSE3::identity()),
            noise: Noise::isotropic(6, 1e-3).unwrap(),
        })
        .unwrap();
        let cam = CameraIntrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
        };
        g.add_factor(Factor::Projection {
            pose: p(0),
            landmark: l(0),
            pixel: Vector2::new(320.0, 240.0),
            pixel_sigmas: Vector2::new(1.0, 1.0),
            camera: cam,
        })
        .unwrap();
        g.add_factor(Factor::RegularizerPrior {
            var: l(0),
            mean: Value::Point3(Vector3::new(0.0, 0.0, 4.0)),
            sigma: 100.0,
        })
        .unwrap();
        let mut init = Values::new();
        init.insert(p(0), Value::PoseSE3(PoseSE3::identity()));
        init.insert(l(0), Value::Point3(Vector3::new(0.0, 0.0, -2.0)));
        let belief = optimize(&g, &init, &SolverConfig::default()).unwrap();
        let lm = belief.mean().get(l(0)).unwrap().as_point3().unwrap();
        assert!(lm.z > 0.0, "landmark must end in front of the camera: {lm:?}");
        assert!(belief.total_squared_error < INVALID_FACTOR_PENALTY);
    }

    #[test]
    fn missing_initial_and_unknown_marginal_are_errors() {
        let (g, mut init) = linear_chain();
        init.remove(p(2));
        assert!(matches!(
            optimize(&g, &init, &SolverConfig::default()),
            Err(SolverError::MissingInitial(v)) if v == p(2)
        ));
        let (g, init) = linear_chain();
        let belief = optimize(&g, &init, &SolverConfig::default()).unwrap();
        assert!(matches!(
            belief.marginal_covariance(&[l(7)]),
            Err(SolverError::UnknownVariable(v)) if v == l(7)
        ));
        assert!(matches!(
            belief.sample_joint(&[p(0)], 0, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(SolverError::BadConfig(_))
        ));
    }
}
