//! Importance sampling of non-Gaussian landmark marginals, conditioned on
//! path samples from the Gaussian belief.
//!
//! For each sampled path, a landmark's marginal is approximated by drawing
//! from a sum-mixture of inverse measurement models (each binary factor,
//! pierced through its sampled pose, induces a closed-form generator over
//! landmark positions), weighting the draws by the ratio of the true factor
//! potential ψ to the mixture density, and resampling to equal weights. The
//! union over all paths forms the landmark's particle cloud.
//!
//! Resampling regularization deliberately departs from the classic
//! all-samples kernel jitter: only duplicated survivors get jittered, each
//! with a bandwidth tied to the distance to its nearest distinct surviving
//! neighbor. Annular and multimodal clouds keep their sharp structure this
//! way, while collapsed weight distributions still spread into a kernel of
//! sensible width (a global Silverman bandwidth over the proposal cloud).

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::factor::{CameraIntrinsics, Factor, LN_2PI, MIN_DEPTH};
use crate::geometry::PoseSE3;
use crate::graph::{FactorGraph, FactorId};
use crate::potential::{LandmarkPotential, PotentialError};
use crate::solver::{GaussianBelief, SolverError};
use crate::stats::{empirical_covariance, logsumexp, max_eigenvalue, silverman_factor};
use crate::values::{Value, ValueKind, Values, VarId};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("unknown landmark {0}")]
    UnknownLandmark(VarId),
    #[error("landmark {0} has no binary measurement factors")]
    NoBinaryFactors(VarId),
    #[error("factor {0} is not a binary pose–landmark measurement")]
    NotBinaryMeasurement(FactorId),
    #[error("importance weights degenerate: all sample weights underflowed")]
    DegenerateWeights,
    #[error("weight vector length {weights} does not match sample count {samples}")]
    LengthMismatch { weights: usize, samples: usize },
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Equally weighted landmark samples: one column per particle.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub landmark: VarId,
    pub samples: DMatrix<f64>,
    pub created_step: u64,
}

impl ParticleCloud {
    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.nrows()
    }

    pub fn mean(&self) -> DVector<f64> {
        crate::stats::empirical_mean(&self.samples)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        empirical_covariance(&self.samples)
    }

    /// Largest eigenvalue of the empirical covariance — the graduation
    /// statistic: a cloud is Gaussian enough once this falls under threshold.
    pub fn max_eigenvalue(&self) -> f64 {
        max_eigenvalue(&self.covariance())
    }

    /// Particle `i` as a point value of the given kind.
    pub fn point(&self, i: usize, kind: ValueKind) -> Option<Value> {
        if i >= self.len() {
            return None;
        }
        let col = self.samples.column(i);
        Value::point_from_coords(kind, col.as_slice())
    }
}

/// Sampling knobs: `paths` is the number of Gaussian path samples (K), and
/// `per_path` the number of landmark samples conditioned on each (M).
#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub paths: usize,
    pub per_path: usize,
    /// Maximum number of mixture components; extra factors are dropped at
    /// random to bound proposal cost.
    pub component_cap: usize,
    /// Depth interval of the uniform prior used to invert bearing-only
    /// (projection) measurements, in meters.
    pub depth_near: f64,
    pub depth_far: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            paths: 200,
            per_path: 100,
            component_cap: 5,
            depth_near: 0.3,
            depth_far: 15.0,
        }
    }
}

/// Generator over landmark positions induced by one binary measurement with
/// its pose substituted: supports direct sampling and exact density
/// evaluation of the points it generates.
pub enum InverseModel {
    /// Radius drawn from the range likelihood, direction uniform.
    Range {
        origin: Vector2<f64>,
        range: f64,
        sigma: f64,
    },
    /// Pixel drawn from the pixel likelihood, depth from a uniform prior,
    /// point back-projected into the world.
    Projection {
        pose: PoseSE3,
        camera: CameraIntrinsics,
        pixel: Vector2<f64>,
        pixel_sigmas: Vector2<f64>,
        depth_near: f64,
        depth_far: f64,
    },
}

impl InverseModel {
    /// Build the generator for a binary factor, reading the pose side from
    /// `fixed`.
    pub fn from_factor(
        id: FactorId,
        factor: &Factor,
        fixed: &Values,
        depth_near: f64,
        depth_far: f64,
    ) -> Result<InverseModel, SamplerError> {
        match factor {
            Factor::Range {
                pose, range, sigma, ..
            } => {
                let value = fixed
                    .get(*pose)
                    .ok_or(PotentialError::MissingFixed(*pose))?;
                let se2 = value.as_pose_se2().ok_or(PotentialError::KindMismatch {
                    var: *pose,
                    expected: ValueKind::PoseSE2,
                    found: value.kind(),
                })?;
                Ok(InverseModel::Range {
                    origin: se2.translation,
                    range: *range,
                    sigma: *sigma,
                })
            }
            Factor::Projection {
                pose,
                pixel,
                pixel_sigmas,
                camera,
                ..
            } => {
                let value = fixed
                    .get(*pose)
                    .ok_or(PotentialError::MissingFixed(*pose))?;
                let se3 = value.as_pose_se3().ok_or(PotentialError::KindMismatch {
                    var: *pose,
                    expected: ValueKind::PoseSE3,
                    found: value.kind(),
                })?;
                Ok(InverseModel::Projection {
                    pose: se3.clone(),
                    camera: *camera,
                    pixel: *pixel,
                    pixel_sigmas: *pixel_sigmas,
                    depth_near,
                    depth_far,
                })
            }
            _ => Err(SamplerError::NotBinaryMeasurement(id)),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InverseModel::Range { .. } => 2,
            InverseModel::Projection { .. } => 3,
        }
    }

    /// Draw one landmark point.
    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        match self {
            InverseModel::Range {
                origin,
                range,
                sigma,
            } => {
                let radius = range + sigma * rng.sample::<f64, _>(StandardNormal);
                let theta = rng.gen_range(0.0..TAU);
                let point = origin + radius * Vector2::new(theta.cos(), theta.sin());
                DVector::from_column_slice(point.as_slice())
            }
            InverseModel::Projection {
                pose,
                camera,
                pixel,
                pixel_sigmas,
                depth_near,
                depth_far,
            } => {
                let px = pixel.x + pixel_sigmas.x * rng.sample::<f64, _>(StandardNormal);
                let py = pixel.y + pixel_sigmas.y * rng.sample::<f64, _>(StandardNormal);
                let depth = rng.gen_range(*depth_near..*depth_far);
                let cam_point = camera.backproject(&Vector2::new(px, py), depth);
                let world = pose.transform_point(&cam_point);
                DVector::from_column_slice(world.as_slice())
            }
        }
    }

    /// Exact log density of `sample()`'s output at `point` (in world
    /// coordinates), accounting for the change of variables.
    pub fn log_density(&self, point: &DVector<f64>) -> f64 {
        match self {
            InverseModel::Range {
                origin,
                range,
                sigma,
            } => {
                let lm = Vector2::new(point[0], point[1]);
                let dist = (lm - origin).norm().max(1e-12);
                // radius may come out negative, mapping to the mirrored
                // direction: both signs contribute to the density at `dist`
                let log_pos = log_normal(dist, *range, *sigma);
                let log_neg = log_normal(-dist, *range, *sigma);
                logsumexp(&[log_pos, log_neg]) - (TAU * dist).ln()
            }
            InverseModel::Projection {
                pose,
                camera,
                pixel,
                pixel_sigmas,
                depth_near,
                depth_far,
            } => {
                let world = Vector3::new(point[0], point[1], point[2]);
                let p_cam = pose.rotation.inverse() * (world - pose.translation);
                if p_cam.z < *depth_near || p_cam.z > *depth_far || p_cam.z <= MIN_DEPTH {
                    return f64::NEG_INFINITY;
                }
                let u = camera.fx * p_cam.x / p_cam.z + camera.cx;
                let v = camera.fy * p_cam.y / p_cam.z + camera.cy;
                // (u, v, depth) → (x, y, z) has Jacobian determinant z²/(fx·fy)
                log_normal(u, pixel.x, pixel_sigmas.x)
                    + log_normal(v, pixel.y, pixel_sigmas.y)
                    - (depth_far - depth_near).ln()
                    + camera.fx.ln()
                    + camera.fy.ln()
                    - 2.0 * p_cam.z.ln()
            }
        }
    }
}

fn log_normal(x: f64, mean: f64, sigma: f64) -> f64 {
    let r = (x - mean) / sigma;
    -0.5 * r * r - 0.5 * LN_2PI - sigma.ln()
}

/// Uniformly weighted mixture of inverse measurement models.
pub struct MixtureProposal {
    components: Vec<InverseModel>,
}

impl MixtureProposal {
    pub fn new(components: Vec<InverseModel>) -> Result<Self, SamplerError> {
        if components.is_empty() {
            return Err(SamplerError::DegenerateWeights);
        }
        Ok(MixtureProposal { components })
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        let idx = rng.gen_range(0..self.components.len());
        self.components[idx].sample(rng)
    }

    pub fn log_density(&self, point: &DVector<f64>) -> f64 {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.log_density(point))
            .collect();
        logsumexp(&logs) - (self.components.len() as f64).ln()
    }
}

/// Binary measurement factors adjacent to `landmark`, in graph order.
fn binary_factors(graph: &FactorGraph, landmark: VarId) -> Vec<FactorId> {
    graph
        .adjacent_factors(landmark)
        .iter()
        .copied()
        .filter(|&fid| {
            graph
                .factor(fid)
                .map(|f| f.is_binary_measurement())
                .unwrap_or(false)
        })
        .collect()
}

/// Build the sum-mixture proposal for one path sample: up to `cap` adjacent
/// binary factors chosen uniformly without replacement, each inverted through
/// its pose value in `poses`.
pub fn build_proposal(
    graph: &FactorGraph,
    landmark: VarId,
    poses: &Values,
    cap: usize,
    depth_near: f64,
    depth_far: f64,
    rng: &mut impl Rng,
) -> Result<MixtureProposal, SamplerError> {
    let candidates = binary_factors(graph, landmark);
    if candidates.is_empty() {
        return Err(SamplerError::NoBinaryFactors(landmark));
    }
    let take = cap.min(candidates.len());
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, candidates.len(), take).into_vec();
    chosen.sort_unstable();
    let mut components = Vec::with_capacity(take);
    for i in chosen {
        let fid = candidates[i];
        let factor = graph.factor(fid).expect("candidate factors are live");
        components.push(InverseModel::from_factor(
            fid, factor, poses, depth_near, depth_far,
        )?);
    }
    MixtureProposal::new(components)
}

/// Normalized importance weights from per-sample log potential and log
/// proposal density, computed with a max-log shift. Errors if every weight
/// underflows to zero.
pub fn importance_weights(log_psi: &[f64], log_q: &[f64]) -> Result<Vec<f64>, SamplerError> {
    if log_psi.len() != log_q.len() {
        return Err(SamplerError::LengthMismatch {
            weights: log_psi.len(),
            samples: log_q.len(),
        });
    }
    let logw: Vec<f64> = log_psi
        .iter()
        .zip(log_q)
        .map(|(&p, &q)| {
            let w = p - q;
            if w.is_nan() {
                f64::NEG_INFINITY
            } else {
                w
            }
        })
        .collect();
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(SamplerError::DegenerateWeights);
    }
    let unnormalized: Vec<f64> = logw.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = unnormalized.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(SamplerError::DegenerateWeights);
    }
    Ok(unnormalized.into_iter().map(|w| w / total).collect())
}

/// Systematic resampling: one uniform offset, then a comb of `n` equally
/// spaced pointers over the cumulative weights. Low-variance: an input with
/// weight `w` survives either ⌊nw⌋ or ⌈nw⌉ times.
fn systematic_indices(weights: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let n = weights.len();
    let mut indices = Vec::with_capacity(n);
    let offset: f64 = rng.gen_range(0.0..1.0) / n as f64;
    let mut cumulative = weights[0];
    let mut j = 0usize;
    for i in 0..n {
        let target = offset + i as f64 / n as f64;
        while cumulative < target && j + 1 < n {
            j += 1;
            cumulative += weights[j];
        }
        indices.push(j);
    }
    indices
}

/// Resample `samples` (one column per particle) by `weights` and regularize:
/// the first surviving copy of each input stays put, extra copies are
/// jittered with a Gaussian kernel whose bandwidth is the Silverman factor
/// times the distance to the nearest distinct survivor. When the survivors
/// all collapse onto a single input, the jitter falls back to a global
/// Silverman kernel shaped by the input cloud's covariance.
pub fn resample_regularize(
    samples: &DMatrix<f64>,
    weights: &[f64],
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>, SamplerError> {
    let n = samples.ncols();
    if weights.len() != n {
        return Err(SamplerError::LengthMismatch {
            weights: weights.len(),
            samples: n,
        });
    }
    if n == 0 {
        return Ok(samples.clone());
    }
    let d = samples.nrows();
    let indices = systematic_indices(weights, rng);
    let survivors: BTreeSet<usize> = indices.iter().copied().collect();

    let mut out = DMatrix::zeros(d, n);
    if survivors.len() <= 1 {
        // all mass on one input: spread every copy by a global kernel shaped
        // like the proposal cloud
        let bandwidth = silverman_factor(d, n);
        let shape = matrix_sqrt(&empirical_covariance(samples));
        let src = *survivors.iter().next().expect("n > 0 implies a survivor");
        for i in 0..n {
            let noise = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let jitter = &shape * noise * bandwidth;
            out.set_column(i, &(samples.column(src) + jitter));
        }
        return Ok(out);
    }

    let bandwidth = silverman_factor(d, n);
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    let mut nearest: BTreeMap<usize, f64> = BTreeMap::new();
    for (i, &src) in indices.iter().enumerate() {
        if seen.insert(src) {
            out.set_column(i, &samples.column(src));
            continue;
        }
        let dist = *nearest.entry(src).or_insert_with(|| {
            survivors
                .iter()
                .filter(|&&other| other != src)
                .map(|&other| (samples.column(src) - samples.column(other)).norm())
                .fold(f64::INFINITY, f64::min)
        });
        let sigma = bandwidth * dist;
        let jitter = DVector::from_fn(d, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
        out.set_column(i, &(samples.column(src) + jitter));
    }
    Ok(out)
}

/// Symmetric square root of a PSD matrix (eigenvalue clamping guards tiny
/// negative roundoff).
fn matrix_sqrt(sym: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(sym.clone());
    let mut scaled = eig.eigenvectors.clone();
    for (c, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        scaled.column_mut(c).scale_mut(s);
    }
    &scaled * eig.eigenvectors.transpose()
}

fn restrict(values: &Values, vars: &[VarId]) -> Values {
    let mut out = Values::new();
    for &v in vars {
        if let Some(value) = values.get(v) {
            out.insert(v, value.clone());
        }
    }
    out
}

/// One conditional sampling pass with every other variable pinned at
/// `poses`: sum-mixture proposal → importance weights against the landmark
/// potential → regularized resampling. [`sample_landmark`] runs this once per
/// path sample; it is also the right tool when no Gaussian belief exists yet
/// (e.g. sampling a landmark created in the current, not-yet-optimized
/// frame).
pub fn sample_conditioned(
    graph: &FactorGraph,
    landmark: VarId,
    poses: &Values,
    cfg: &SampleConfig,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>, SamplerError> {
    let proposal = build_proposal(
        graph,
        landmark,
        poses,
        cfg.component_cap,
        cfg.depth_near,
        cfg.depth_far,
        rng,
    )?;
    let draws: Vec<DVector<f64>> = (0..cfg.per_path).map(|_| proposal.sample(rng)).collect();
    let potential = LandmarkPotential::new(graph, landmark, poses)?;
    let log_psi: Vec<f64> = draws
        .iter()
        .map(|s| potential.log_psi_coords(s.as_slice()))
        .collect();
    let log_q: Vec<f64> = draws.iter().map(|s| proposal.log_density(s)).collect();
    let weights = importance_weights(&log_psi, &log_q)?;
    let d = draws[0].len();
    let mat = DMatrix::from_fn(d, draws.len(), |r, c| draws[c][r]);
    resample_regularize(&mat, &weights, rng)
}

/// Draw a landmark's particle cloud: `cfg.paths` Gaussian path samples over
/// the poses observing it (the plain belief mean when `paths == 1`), each
/// conditioning `cfg.per_path` importance-resampled landmark samples. Paths
/// whose weights underflow are retried once with a fresh proposal, then
/// skipped with a warning.
pub fn sample_landmark(
    graph: &FactorGraph,
    belief: &GaussianBelief,
    landmark: VarId,
    cfg: &SampleConfig,
    step: u64,
    rng: &mut impl Rng,
) -> Result<ParticleCloud, SamplerError> {
    if graph.var_kind(landmark).is_none() {
        return Err(SamplerError::UnknownLandmark(landmark));
    }
    let binary = binary_factors(graph, landmark);
    if binary.is_empty() {
        return Err(SamplerError::NoBinaryFactors(landmark));
    }
    let pose_set: BTreeSet<VarId> = binary
        .iter()
        .flat_map(|&fid| {
            let vars = graph.factor(fid).expect("live factor").vars();
            vars.into_iter().filter(|&v| v != landmark)
        })
        .collect();
    let pose_list: Vec<VarId> = pose_set.into_iter().collect();
    let paths: Vec<Values> = if cfg.paths <= 1 {
        vec![restrict(belief.mean(), &pose_list)]
    } else {
        belief.sample_joint(&pose_list, cfg.paths, rng)?
    };

    let mut blocks: Vec<DMatrix<f64>> = Vec::with_capacity(paths.len());
    for (k, poses) in paths.iter().enumerate() {
        let first = sample_conditioned(graph, landmark, poses, cfg, rng);
        let block = match first {
            Ok(b) => Some(b),
            Err(SamplerError::DegenerateWeights) => {
                match sample_conditioned(graph, landmark, poses, cfg, rng) {
                    Ok(b) => Some(b),
                    Err(SamplerError::DegenerateWeights) => {
                        log::warn!(
                            "skipping path {k} for {landmark}: importance weights degenerate after retry"
                        );
                        None
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(e) => return Err(e),
        };
        if let Some(b) = block {
            blocks.push(b);
        }
    }
    if blocks.is_empty() {
        return Err(SamplerError::DegenerateWeights);
    }
    let d = blocks[0].nrows();
    let total: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut samples = DMatrix::zeros(d, total);
    let mut at = 0;
    for b in &blocks {
        samples.view_mut((0, at), (d, b.ncols())).copy_from(b);
        at += b.ncols();
    }
    Ok(ParticleCloud {
        landmark,
        samples,
        created_step: step,
    })
}
