//! The hybrid inference state machine: Gaussian belief over the full joint,
//! particle clouds for landmarks whose marginals are still non-Gaussian, and
//! the feedback loop between them.
//!
//! Per key frame the driver calls [`Gapslam::process_odometry`], then
//! [`Gapslam::process_landmark_measurement`] for each detection, then
//! [`Gapslam::finish_frame`]. A new landmark starts life in the non-Gaussian
//! registry: it gets a wide regularizer prior (keeping the normal equations
//! positive definite while the measurements alone leave it underdetermined)
//! and an initial value drawn from the measurement's inverse model. While
//! registered, each frame that observes the landmark re-initializes the
//! solver's linearization point to the best point of its particle cloud —
//! this is what lets the least-squares estimate escape a wrong basin — and
//! refreshes the cloud against the new belief. Once the cloud's covariance
//! collapses (largest eigenvalue under a threshold), the landmark graduates
//! and from then on the plain Gaussian belief carries it. Graduation also
//! deletes the regularizer — immediately when the landmark's own
//! measurements can hold it up, otherwise (reachable only near the
//! threshold-∞ boundary, where landmarks graduate on first sight) at the
//! first frame they can, so the normal equations never lose rank.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::factor::Factor;
use crate::graph::{FactorGraph, FactorId, GraphError};
use crate::potential::{LandmarkPotential, PotentialError};
use crate::sampler::{
    sample_conditioned, sample_landmark, ParticleCloud, SampleConfig, SamplerError,
};
use crate::solver::{GaussianBelief, Solver, SolverConfig, SolverError};
use crate::values::{Value, ValueKind, Values, VarId};

#[derive(Debug, Error)]
pub enum GapslamError {
    #[error("no pose exists yet; initialize the trajectory first")]
    NoPose,
    #[error("trajectory is already initialized")]
    AlreadyInitialized,
    #[error("association names unknown landmark {0}")]
    UnknownAssociation(VarId),
    #[error("association says new, but landmark {0} already exists")]
    DuplicateLandmark(VarId),
    #[error("factor is not a pose–landmark measurement")]
    NotAMeasurement,
    #[error("odometry delta must be a pose")]
    BadOdometry,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
}

/// Which parts of the machinery run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Full hybrid: particle clouds, re-initialization, graduation.
    Gapslam,
    /// Graduate everything on sight (threshold = ∞): degenerates to the bare
    /// Gaussian solver with inverse-model initialization.
    GaussOnly,
    /// Keep clouds off and regularizers forever (threshold = 0, no
    /// re-initialization): the ablation baseline.
    NoReinit,
}

#[derive(Debug, Clone)]
pub struct GapslamConfig {
    pub mode: Mode,
    /// Path samples (K) for dense exported clouds.
    pub paths: usize,
    /// Landmark samples per path (M).
    pub per_path: usize,
    pub component_cap: usize,
    pub depth_near: f64,
    pub depth_far: f64,
    /// Graduation threshold on the largest eigenvalue of the cloud
    /// covariance, in m². 0.05 suits planar range-only landmarks; 0.02 suits
    /// 3D object landmarks.
    pub eig_threshold: f64,
    /// Per-axis σ of the wide prior placed on every new landmark.
    pub regularizer_sigma: f64,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for GapslamConfig {
    fn default() -> Self {
        GapslamConfig {
            mode: Mode::Gapslam,
            paths: 200,
            per_path: 100,
            component_cap: 5,
            depth_near: 0.3,
            depth_far: 15.0,
            eig_threshold: 0.05,
            regularizer_sigma: 100.0,
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

impl GapslamConfig {
    fn sample_config(&self, paths: usize) -> SampleConfig {
        SampleConfig {
            paths,
            per_path: self.per_path,
            component_cap: self.component_cap,
            depth_near: self.depth_near,
            depth_far: self.depth_far,
        }
    }

    fn effective_threshold(&self) -> f64 {
        match self.mode {
            Mode::Gapslam => self.eig_threshold,
            Mode::GaussOnly => f64::INFINITY,
            Mode::NoReinit => 0.0,
        }
    }

    fn reinit_enabled(&self) -> bool {
        self.mode != Mode::NoReinit
    }

    fn sampling_enabled(&self) -> bool {
        self.mode != Mode::NoReinit
    }
}

/// Did the caller associate the measurement to a brand-new landmark or an
/// existing one?
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Association {
    New,
    Existing,
}

struct RegistryEntry {
    cloud: ParticleCloud,
    regularizer: FactorId,
}

/// Wall-clock cost breakdown of one frame, in milliseconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepTimings {
    pub update_ms: f64,
    pub reinit_ms: f64,
    pub sampling_ms: f64,
}

/// What [`Gapslam::finish_frame`] did.
#[derive(Debug, Clone)]
pub struct StepSummary {
    pub step: u64,
    pub timings: StepTimings,
    /// Landmarks that left the registry this frame.
    pub graduated: Vec<VarId>,
}

pub struct Gapslam {
    cfg: GapslamConfig,
    graph: FactorGraph,
    solver: Solver,
    belief: Option<GaussianBelief>,
    registry: BTreeMap<VarId, RegistryEntry>,
    graduated: BTreeSet<VarId>,
    /// Graduated landmarks whose regularizer is still load-bearing (their
    /// measurements alone cannot hold them yet) and must come out later.
    retained_regularizers: BTreeMap<VarId, FactorId>,
    /// Registry landmarks measured since the last finish_frame.
    dirty: BTreeSet<VarId>,
    creation_values: BTreeMap<VarId, Value>,
    current_pose: Option<VarId>,
    next_pose_index: u32,
    step: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn var_code(v: VarId) -> u64 {
    match v {
        VarId::Pose(i) => i as u64,
        VarId::Landmark(i) => (1u64 << 32) | i as u64,
    }
}

fn compose_pose(base: &Value, delta: &Value) -> Option<Value> {
    match (base, delta) {
        (Value::PoseSE2(a), Value::PoseSE2(d)) => Some(Value::PoseSE2(a.compose(d))),
        (Value::PoseSE3(a), Value::PoseSE3(d)) => Some(Value::PoseSE3(a.compose(d))),
        _ => None,
    }
}

impl Gapslam {
    /// Start a trajectory: the first pose variable gets `origin` as value and
    /// a prior factor with `noise`.
    pub fn new(
        cfg: GapslamConfig,
        origin: Value,
        prior_noise: crate::noise::Noise,
    ) -> Result<Self, GapslamError> {
        let mut graph = FactorGraph::new();
        let mut solver = Solver::new(cfg.solver.clone());
        let pose = VarId::Pose(0);
        graph.add_variable(pose, origin.kind())?;
        graph.add_factor(Factor::Prior {
            var: pose,
            mean: origin.clone(),
            noise: prior_noise,
        })?;
        solver.set_initial(pose, origin);
        Ok(Gapslam {
            cfg,
            graph,
            solver,
            belief: None,
            registry: BTreeMap::new(),
            graduated: BTreeSet::new(),
            retained_regularizers: BTreeMap::new(),
            dirty: BTreeSet::new(),
            creation_values: BTreeMap::new(),
            current_pose: Some(pose),
            next_pose_index: 1,
            step: 0,
        })
    }

    /// Rng for one landmark's sampling work, derived so distinct landmarks,
    /// steps, and call sites never share a stream.
    fn landmark_rng(&self, landmark: VarId, salt: u64) -> ChaCha8Rng {
        let seed = splitmix(
            self.cfg
                .seed
                .wrapping_add(splitmix(var_code(landmark)))
                .wrapping_add(splitmix(self.step.wrapping_add(salt << 40))),
        );
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Append a pose: the new variable starts at compose(previous estimate,
    /// delta) and is tied to its predecessor by an odometry factor.
    pub fn process_odometry(
        &mut self,
        delta: Value,
        noise: crate::noise::Noise,
    ) -> Result<VarId, GapslamError> {
        let prev = self.current_pose.ok_or(GapslamError::NoPose)?;
        let prev_value = self.solver.value(prev).expect("pose has a value").clone();
        let init = compose_pose(&prev_value, &delta).ok_or(GapslamError::BadOdometry)?;
        let pose = VarId::Pose(self.next_pose_index);
        self.graph.add_variable(pose, init.kind())?;
        self.graph.add_factor(Factor::Odometry {
            from: prev,
            to: pose,
            delta,
            noise,
        })?;
        self.solver.set_initial(pose, init);
        self.current_pose = Some(pose);
        self.next_pose_index += 1;
        Ok(pose)
    }

    /// Route one pose–landmark measurement through the three cases: brand-new
    /// landmark (register, regularize, initialize from the inverse model),
    /// registered landmark (queue for re-initialization and refresh), or
    /// graduated landmark (plain factor insert).
    pub fn process_landmark_measurement(
        &mut self,
        factor: Factor,
        assoc: Association,
    ) -> Result<(), GapslamError> {
        if !factor.is_binary_measurement() {
            return Err(GapslamError::NotAMeasurement);
        }
        let (landmark, kind) = match &factor {
            Factor::Range { landmark, .. } => (*landmark, ValueKind::Point2),
            Factor::Projection { landmark, .. } => (*landmark, ValueKind::Point3),
            _ => return Err(GapslamError::NotAMeasurement),
        };
        match assoc {
            Association::Existing => {
                if self.graph.var_kind(landmark).is_none() {
                    return Err(GapslamError::UnknownAssociation(landmark));
                }
                self.graph.add_factor(factor)?;
                if self.registry.contains_key(&landmark) {
                    self.dirty.insert(landmark);
                }
                Ok(())
            }
            Association::New => {
                if self.graph.var_kind(landmark).is_some() {
                    return Err(GapslamError::DuplicateLandmark(landmark));
                }
                self.graph.add_variable(landmark, kind)?;
                let fid = self.graph.add_factor(factor)?;

                // draw the creation cloud through the full importance
                // pipeline conditioned on the current estimates, and pick a
                // random particle as the initial value
                let mut rng = self.landmark_rng(landmark, 1);
                let sample_cfg = self.cfg.sample_config(1);
                let samples =
                    sample_conditioned(&self.graph, landmark, self.solver.values(), &sample_cfg, &mut rng)
                        .inspect_err(|_| {
                            // roll back so the graph is not left with an
                            // uninitializable variable
                            let _ = self.graph.remove_factor(fid);
                        })?;
                let cloud = ParticleCloud {
                    landmark,
                    samples,
                    created_step: self.step,
                };
                let init = cloud
                    .point(0, kind)
                    .expect("creation cloud is non-empty");
                let regularizer = self.graph.add_factor(Factor::RegularizerPrior {
                    var: landmark,
                    mean: init.clone(),
                    sigma: self.cfg.regularizer_sigma,
                })?;
                self.solver.set_initial(landmark, init.clone());
                self.creation_values.insert(landmark, init);
                self.registry
                    .insert(landmark, RegistryEntry { cloud, regularizer });
                self.dirty.insert(landmark);
                Ok(())
            }
        }
    }

    /// Re-initialize one registered landmark: evaluate the measurement
    /// potential (regularizer excluded, poses fixed at the current estimates)
    /// at every cloud particle and at the current estimate, and move the
    /// solver's linearization point to the argmax. Ties keep the current
    /// estimate, so the potential at the linearization point never decreases.
    pub fn reinitialize_landmark(&mut self, landmark: VarId) -> Result<bool, GapslamError> {
        let Some(entry) = self.registry.get(&landmark) else {
            return Ok(false);
        };
        if entry.cloud.is_empty() {
            log::warn!("re-init of {landmark} skipped: empty cloud");
            return Ok(false);
        }
        let current = self
            .solver
            .value(landmark)
            .expect("registered landmark has a value")
            .clone();
        let potential = LandmarkPotential::new(&self.graph, landmark, self.solver.values())?;
        let mut best_log = potential.log_psi(&current);
        let mut best: Option<usize> = None;
        for i in 0..entry.cloud.len() {
            let log = potential.log_psi_coords(entry.cloud.samples.column(i).as_slice());
            if log > best_log {
                best_log = log;
                best = Some(i);
            }
        }
        if let Some(i) = best {
            let kind = current.kind();
            let value = entry.cloud.point(i, kind).expect("index in range");
            self.solver.reset_linearization(landmark, value)?;
            return Ok(true);
        }
        Ok(false)
    }

    /// Remove the landmark from the registry (deleting its regularizer) if
    /// its cloud has collapsed: largest covariance eigenvalue under the
    /// mode's threshold. Returns whether it graduated.
    pub fn graduation_check(&mut self, landmark: VarId) -> Result<bool, GapslamError> {
        let threshold = self.cfg.effective_threshold();
        let Some(entry) = self.registry.get(&landmark) else {
            return Ok(false);
        };
        if !(entry.cloud.max_eigenvalue() < threshold) {
            return Ok(false);
        }
        let entry = self.registry.remove(&landmark).expect("checked above");
        if self.structurally_constrained(landmark) {
            self.graph.remove_factor(entry.regularizer)?;
        } else {
            // Reachable only near the threshold-∞ boundary, where landmarks
            // graduate on first sight: the wide prior is still the only
            // thing pinning some direction, so it stays until the
            // measurements alone can carry the landmark.
            self.retained_regularizers.insert(landmark, entry.regularizer);
        }
        self.graduated.insert(landmark);
        self.dirty.remove(&landmark);
        Ok(true)
    }

    /// Whether the landmark's measurement factors alone pin it down: at
    /// least two distinct observing poses and at least as many residual rows
    /// as the landmark has coordinates. One pose is never enough — repeated
    /// ranges from the same pose stack on the same annulus, and a lone
    /// pinhole ray leaves depth free.
    fn structurally_constrained(&self, landmark: VarId) -> bool {
        let dim = match self.graph.var_kind(landmark) {
            Some(ValueKind::Point2) => 2,
            Some(ValueKind::Point3) => 3,
            _ => return false,
        };
        let mut poses = BTreeSet::new();
        let mut rows = 0usize;
        for &fid in self.graph.adjacent_factors(landmark) {
            match self.graph.factor(fid) {
                Some(Factor::Range { pose, .. }) => {
                    poses.insert(*pose);
                    rows += 1;
                }
                Some(Factor::Projection { pose, .. }) => {
                    poses.insert(*pose);
                    rows += 2;
                }
                _ => {}
            }
        }
        poses.len() >= 2 && rows >= dim
    }

    /// Close the frame: re-initialize every registered landmark measured this
    /// frame, run one optimize over everything inserted, refresh the touched
    /// clouds against the new belief (single-path mode), and run their
    /// graduation checks.
    pub fn finish_frame(&mut self) -> Result<StepSummary, GapslamError> {
        let dirty: Vec<VarId> = self.dirty.iter().copied().collect();
        let mut timings = StepTimings::default();

        if self.cfg.reinit_enabled() {
            let t = Instant::now();
            for &landmark in &dirty {
                self.reinitialize_landmark(landmark)?;
            }
            timings.reinit_ms = t.elapsed().as_secs_f64() * 1e3;
        }

        let t = Instant::now();
        let belief = self.solver.optimize(&self.graph)?;
        timings.update_ms = t.elapsed().as_secs_f64() * 1e3;

        let mut graduated_now = Vec::new();
        if self.cfg.sampling_enabled() {
            let t = Instant::now();
            let refresh_cfg = self.cfg.sample_config(1);
            for &landmark in &dirty {
                if !self.registry.contains_key(&landmark) {
                    continue;
                }
                let mut rng = self.landmark_rng(landmark, 2);
                match sample_landmark(&self.graph, &belief, landmark, &refresh_cfg, self.step, &mut rng)
                {
                    Ok(cloud) => {
                        self.registry
                            .get_mut(&landmark)
                            .expect("checked above")
                            .cloud = cloud;
                    }
                    Err(SamplerError::DegenerateWeights) => {
                        log::warn!("cloud refresh for {landmark} degenerate; keeping previous cloud");
                    }
                    Err(e) => return Err(e.into()),
                }
                if self.graduation_check(landmark)? {
                    graduated_now.push(landmark);
                }
            }
            timings.sampling_ms = t.elapsed().as_secs_f64() * 1e3;
        }

        // Regularizers kept past graduation come out at the first frame the
        // landmark's own measurements can carry it.
        let ready: Vec<VarId> = self
            .retained_regularizers
            .keys()
            .copied()
            .filter(|&l| self.structurally_constrained(l))
            .collect();
        for landmark in ready {
            let factor = self
                .retained_regularizers
                .remove(&landmark)
                .expect("key just listed");
            self.graph.remove_factor(factor)?;
        }

        self.belief = Some(belief);
        self.dirty.clear();
        let summary = StepSummary {
            step: self.step,
            timings,
            graduated: graduated_now,
        };
        self.step += 1;
        debug_assert!(self.partition_invariant_holds());
        Ok(summary)
    }

    /// Draw a dense evaluation cloud (config K × M) for one registered
    /// landmark against the current belief.
    pub fn dense_cloud(&self, landmark: VarId) -> Result<ParticleCloud, GapslamError> {
        let belief = self.belief.as_ref().ok_or(GapslamError::NoPose)?;
        let cfg = self.cfg.sample_config(self.cfg.paths);
        let mut rng = self.landmark_rng(landmark, 3);
        // The belief always describes the last finished frame, so stamp the
        // cloud with that frame's index like the refresh path does.
        Ok(sample_landmark(
            &self.graph,
            belief,
            landmark,
            &cfg,
            self.step.saturating_sub(1),
            &mut rng,
        )?)
    }

    /// Non-Gaussian landmark set and Gaussian complement stay disjoint,
    /// every registry key is a live graph variable with a live regularizer,
    /// and any regularizer kept past graduation belongs to a graduate.
    pub fn partition_invariant_holds(&self) -> bool {
        self.registry.keys().all(|l| {
            !self.graduated.contains(l)
                && self.graph.var_kind(*l).is_some()
                && self
                    .graph
                    .factor(self.registry[l].regularizer)
                    .map(|f| matches!(f, Factor::RegularizerPrior { var, .. } if var == l))
                    .unwrap_or(false)
        }) && self.graduated.iter().all(|l| self.graph.var_kind(*l).is_some())
            && self.retained_regularizers.iter().all(|(l, fid)| {
                self.graduated.contains(l)
                    && self
                        .graph
                        .factor(*fid)
                        .map(|f| matches!(f, Factor::RegularizerPrior { var, .. } if var == l))
                        .unwrap_or(false)
            })
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn belief(&self) -> Option<&GaussianBelief> {
        self.belief.as_ref()
    }

    /// Current estimate of every variable (belief mean after a solve, plus
    /// initial values of anything inserted since).
    pub fn estimates(&self) -> &Values {
        self.solver.values()
    }

    pub fn estimate(&self, var: VarId) -> Option<&Value> {
        self.solver.value(var)
    }

    /// The value a landmark was born with (inverse-model sample).
    pub fn creation_value(&self, landmark: VarId) -> Option<&Value> {
        self.creation_values.get(&landmark)
    }

    pub fn registry_landmarks(&self) -> Vec<VarId> {
        self.registry.keys().copied().collect()
    }

    pub fn registry_size(&self) -> usize {
        self.registry.len()
    }

    pub fn is_non_gaussian(&self, landmark: VarId) -> bool {
        self.registry.contains_key(&landmark)
    }

    pub fn cloud(&self, landmark: VarId) -> Option<&ParticleCloud> {
        self.registry.get(&landmark).map(|e| &e.cloud)
    }

    pub fn graduated_landmarks(&self) -> Vec<VarId> {
        self.graduated.iter().copied().collect()
    }

    pub fn current_pose(&self) -> Option<VarId> {
        self.current_pose
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &GapslamConfig {
        &self.cfg
    }

    #[cfg(test)]
    pub(crate) fn set_cloud_for_test(&mut self, landmark: VarId, cloud: ParticleCloud) {
        self.registry
            .get_mut(&landmark)
            .expect("landmark registered")
            .cloud = cloud;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::CameraIntrinsics;
    use crate::geometry::{PoseSE2, PoseSE3};
    use crate::noise::Noise;
    use nalgebra::{DMatrix, Vector2};
    use std::f64::consts::TAU;

    fn p(i: u32) -> VarId {
        VarId::Pose(i)
    }

    fn l(i: u32) -> VarId {
        VarId::Landmark(i)
    }

    fn se2(x: f64, y: f64, theta: f64) -> Value {
        Value::PoseSE2(PoseSE2::new(x, y, theta))
    }

    fn quick_cfg(mode: Mode) -> GapslamConfig {
        GapslamConfig {
            mode,
            paths: 30,
            per_path: 60,
            seed: 9,
            ..GapslamConfig::default()
        }
    }

    fn start(cfg: GapslamConfig) -> Gapslam {
        Gapslam::new(
            cfg,
            se2(0.0, 0.0, 0.0),
            Noise::isotropic(3, 1e-3).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_odometry_keeps_the_mean_and_grows_uncertainty() {
        let mut sys = start(quick_cfg(Mode::Gapslam));
        let mut traces = Vec::new();
        for _ in 0..5 {
            let pose = sys
                .process_odometry(se2(0.0, 0.0, 0.0), Noise::isotropic(3, 0.1).unwrap())
                .unwrap();
            sys.finish_frame().unwrap();
            let est = sys.estimate(pose).unwrap().as_pose_se2().unwrap().clone();
            assert!(est.translation.norm() < 1e-9, "drifted to {est:?}");
            let cov = sys
                .belief()
                .unwrap()
                .marginal_covariance(&[pose])
                .unwrap();
            traces.push(cov.trace());
        }
        for w in traces.windows(2) {
            assert!(w[1] > w[0], "covariance should accumulate: {traces:?}");
        }
    }

    #[test]
    fn dead_reckoning_walks_the_commanded_line() {
        let mut sys = start(quick_cfg(Mode::Gapslam));
        let mut last = p(0);
        for _ in 0..10 {
            last = sys
                .process_odometry(se2(1.0, 0.0, 0.0), Noise::isotropic(3, 0.05).unwrap())
                .unwrap();
        }
        sys.finish_frame().unwrap();
        let est = sys.estimate(last).unwrap().as_pose_se2().unwrap().clone();
        assert!((est.translation.x - 10.0).abs() < 1e-6);
        assert!(est.translation.y.abs() < 1e-6);
    }

    #[test]
    fn first_range_measurement_registers_and_initializes_on_the_annulus() {
        let mut sys = start(quick_cfg(Mode::Gapslam));
        sys.process_landmark_measurement(
            Factor::Range {
                pose: p(0),
                landmark: l(0),
                range: 5.0,
                sigma: 0.3,
            },
            Association::New,
        )
        .unwrap();
        assert_eq!(sys.registry_size(), 1);
        assert!(sys.is_non_gaussian(l(0)));
        let init = sys
            .creation_value(l(0))
            .unwrap()
            .point_coords()
            .unwrap();
        let radius = (init[0] * init[0] + init[1] * init[1]).sqrt();
        assert!(
            (radius - 5.0).abs() < 4.0 * 0.3,
            "initial value off the measured annulus: radius {radius}"
        );
        // the registry survives the solve thanks to the regularizer
        sys.finish_frame().unwrap();
        assert_eq!(sys.registry_size(), 1);
        assert!(sys.partition_invariant_holds());
    }

    #[test]
    fn graduated_landmarks_take_plain_factor_inserts() {
        let mut sys = start(quick_cfg(Mode::GaussOnly));
        sys.process_landmark_measurement(
            Factor::Range {
                pose: p(0),
                landmark: l(0),
                range: 2.0,
                sigma: 0.1,
            },
            Association::New,
        )
        .unwrap();
        sys.finish_frame().unwrap();
        // threshold ∞ graduates in the same frame
        assert_eq!(sys.registry_size(), 0);
        assert_eq!(sys.graduated_landmarks(), vec![l(0)]);

        let factors_before = sys.graph().factors().count();
        sys.process_odometry(se2(1.0, 0.5, 0.1), Noise::isotropic(3, 0.05).unwrap())
            .unwrap();
        sys.process_landmark_measurement(
            Factor::Range {
                pose: p(1),
                landmark: l(0),
                range: 2.0,
                sigma: 0.1,
            },
            Association::Existing,
        )
        .unwrap();
        sys.finish_frame().unwrap();
        assert_eq!(sys.registry_size(), 0, "graduated landmark must not re-enter");
        // odometry + range came in, and the second observing pose let the
        // regularizer kept from the on-sight graduation finally drop out
        assert_eq!(sys.graph().factors().count(), factors_before + 2 - 1);
        let regs = sys
            .graph()
            .factors()
            .filter(|(_, f)| matches!(f, Factor::RegularizerPrior { .. }))
            .count();
        assert_eq!(regs, 0);
        assert!(sys.partition_invariant_holds());
    }

    #[test]
    fn association_errors_are_reported() {
        let mut sys = start(quick_cfg(Mode::Gapslam));
        let range = Factor::Range {
            pose: p(0),
            landmark: l(3),
            range: 1.0,
            sigma: 0.1,
        };
        assert!(matches!(
            sys.process_landmark_measurement(range.clone(), Association::Existing),
            Err(GapslamError::UnknownAssociation(v)) if v == l(3)
        ));
        sys.process_landmark_measurement(range.clone(), Association::New)
            .unwrap();
        assert!(matches!(
            sys.process_landmark_measurement(range, Association::New),
            Err(GapslamError::DuplicateLandmark(v)) if v == l(3)
        ));
        assert!(matches!(
            sys.process_landmark_measurement(
                Factor::Prior {
                    var: l(3),
                    mean: Value::Point2(Vector2::zeros()),
                    noise: Noise::isotropic(2, 1.0).unwrap()
                },
                Association::Existing
            ),
            Err(GapslamError::NotAMeasurement)
        ));
    }

    /// Three poses with tight priors via odometry; landmark truly at (5, 4)
    /// but with a mirror attractor near (5, -4) when only the first two
    /// ranges (taken along the y = 0 baseline) are in. The third, looser
    /// range discriminates between the reflections.
    fn mirror_scenario(mode: Mode, seed: u64) -> Gapslam {
        let mut cfg = quick_cfg(mode);
        cfg.seed = seed;
        cfg.per_path = 100;
        let mut sys = start(cfg);
        let truth = Vector2::new(5.0, 4.0);
        let stops = [
            Vector2::new(10.0, 0.0),
            Vector2::new(2.0, 3.0),
        ];
        // frame 0: first range from the origin
        sys.process_landmark_measurement(
            Factor::Range {
                pose: p(0),
                landmark: l(0),
                range: truth.norm(),
                sigma: 0.3,
            },
            Association::New,
        )
        .unwrap();
        sys.finish_frame().unwrap();
        // frames 1-2: drive to each stop, measure again
        let mut at = Vector2::zeros();
        for (i, stop) in stops.iter().enumerate() {
            let delta = stop - at;
            sys.process_odometry(
                se2(delta.x, delta.y, 0.0),
                Noise::isotropic(3, 1e-3).unwrap(),
            )
            .unwrap();
            let sigma = if i == 0 { 0.3 } else { 1.0 };
            sys.process_landmark_measurement(
                Factor::Range {
                    pose: p(i as u32 + 1),
                    landmark: l(0),
                    range: (truth - stop).norm(),
                    sigma,
                },
                Association::Existing,
            )
            .unwrap();
            sys.finish_frame().unwrap();
            at = *stop;
        }
        sys
    }

    #[test]
    fn reinitialization_recovers_the_true_basin_across_seeds() {
        // the creation draw lands on either side of the annulus depending on
        // the seed; with re-initialization the final estimate must end up in
        // the correct basin regardless
        for seed in [1, 2, 3, 4, 5] {
            let sys = mirror_scenario(Mode::Gapslam, seed);
            let est = sys.estimate(l(0)).unwrap().point_coords().unwrap();
            let err = (Vector2::new(est[0], est[1]) - Vector2::new(5.0, 4.0)).norm();
            assert!(
                err < 0.5,
                "seed {seed}: estimate ({}, {}) not in the true basin",
                est[0],
                est[1]
            );
        }
    }

    #[test]
    fn without_reinitialization_some_seeds_stay_in_the_mirror_basin() {
        let mut stuck = 0;
        for seed in 1..=8 {
            let sys = mirror_scenario(Mode::NoReinit, seed);
            let est = sys.estimate(l(0)).unwrap().point_coords().unwrap();
            if (Vector2::new(est[0], est[1]) - Vector2::new(5.0, -4.0)).norm() < 1.0 {
                stuck += 1;
            }
        }
        assert!(
            stuck > 0,
            "expected at least one seed to stay trapped without re-initialization"
        );
    }

    #[test]
    fn reinit_prefers_cloud_point_exactly_when_potential_is_higher() {
        let mut sys = start(quick_cfg(Mode::Gapslam));
        sys.process_landmark_measurement(
            Factor::Range {
                pose: p(0),
                landmark: l(0),
                range: 5.0,
                sigma: 0.1,
            },
            Association::New,
        )
        .unwrap();
        sys.finish_frame().unwrap();

        // current estimate sits on the annulus; a strictly better point (the
        // exact radius) must win, worse points must lose
        let exact = Vector2::new(5.0, 0.0);
        let worse = Vector2::new(6.0, 1.0);
        sys.set_cloud_for_test(
            l(0),
            ParticleCloud {
                landmark: l(0),
                samples: DMatrix::from_column_slice(2, 2, &[worse.x, worse.y, exact.x, exact.y]),
                created_step: 0,
            },
        );
        let moved = sys.reinitialize_landmark(l(0)).unwrap();
        assert!(moved);
        let est = sys.estimate(l(0)).unwrap().point_coords().unwrap();
        assert_eq!((est[0], est[1]), (exact.x, exact.y));

        // idempotent: the estimate is now the argmax of the same candidate set
        let moved = sys.reinitialize_landmark(l(0)).unwrap();
        assert!(!moved, "re-running must keep the current estimate");

        // ties keep the incumbent: a cloud that duplicates the estimate
        let dup = DMatrix::from_column_slice(2, 3, &[5.0, 0.0, 5.0, 0.0, 5.0, 0.0]);
        sys.set_cloud_for_test(
            l(0),
            ParticleCloud {
                landmark: l(0),
                samples: dup,
                created_step: 0,
            },
        );
        assert!(!sys.reinitialize_landmark(l(0)).unwrap());
    }

    #[test]
    fn out_of_support_clouds_keep_the_current_estimate() {
        // projection landmark with every cloud particle behind the camera:
        // all candidates evaluate to -inf and the incumbent stays
        let mut cfg = quick_cfg(Mode::Gapslam);
        cfg.depth_near = 0.5;
        cfg.depth_far = 10.0;
        let mut sys = Gapslam::new(
            cfg,
            Value::PoseSE3(PoseSE3::identity()),
            Noise::isotropic(6, 1e-3).unwrap(),
        )
        .unwrap();
        let camera = CameraIntrinsics {
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 240.0,
        };
        sys.process_landmark_measurement(
            Factor::Projection {
                pose: p(0),
                landmark: l(0),
                pixel: Vector2::new(320.0, 240.0),
                pixel_sigmas: Vector2::new(2.0, 2.0),
                camera,
            },
            Association::New,
        )
        .unwrap();
        let before = sys.estimate(l(0)).unwrap().point_coords().unwrap();
        sys.set_cloud_for_test(
            l(0),
            ParticleCloud {
                landmark: l(0),
                samples: DMatrix::from_column_slice(3, 2, &[0.0, 0.0, -3.0, 1.0, 1.0, -5.0]),
                created_step: 0,
            },
        );
        assert!(!sys.reinitialize_landmark(l(0)).unwrap());
        let after = sys.estimate(l(0)).unwrap().point_coords().unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn graduation_follows_the_cloud_eigenvalue() {
        let mut sys = start(quick_cfg(Mode::Gapslam));
        sys.process_landmark_measurement(
            Factor::Range {
                pose: p(0),
                landmark: l(0),
                range: 5.0,
                sigma: 0.3,
            },
            Association::New,
        )
        .unwrap();
        sys.finish_frame().unwrap();

        // a radius-5 annulus cloud has covariance eigenvalues r²/2 = 12.5
        let n = 720;
        let ring = DMatrix::from_fn(2, n, |r, c| {
            let angle = TAU * c as f64 / n as f64;
            5.0 * if r == 0 { angle.cos() } else { angle.sin() }
        });
        sys.set_cloud_for_test(
            l(0),
            ParticleCloud {
                landmark: l(0),
                samples: ring,
                created_step: 0,
            },
        );
        let lambda = sys.cloud(l(0)).unwrap().max_eigenvalue();
        assert!((lambda - 12.5).abs() < 0.05, "annulus λ_max = {lambda}");
        assert!(!sys.graduation_check(l(0)).unwrap());
        assert_eq!(sys.registry_size(), 1);

        // identical points collapse to λ_max = 0 → graduate; but with only
        // one observing pose the wide prior is still load-bearing and stays
        let regs = |sys: &Gapslam| {
            sys.graph()
                .factors()
                .filter(|(_, f)| matches!(f, Factor::RegularizerPrior { .. }))
                .count()
        };
        assert_eq!(regs(&sys), 1);
        sys.set_cloud_for_test(
            l(0),
            ParticleCloud {
                landmark: l(0),
                samples: DMatrix::from_element(2, 50, 3.0),
                created_step: 0,
            },
        );
        assert!(sys.graduation_check(l(0)).unwrap());
        assert_eq!(sys.registry_size(), 0);
        assert!(sys.graduated_landmarks().contains(&l(0)));
        assert_eq!(regs(&sys), 1, "single annulus cannot hold the landmark");
        assert!(sys.partition_invariant_holds());

        // a second annulus from a distinct pose makes the measurements
        // self-sufficient: the next frame sheds the kept regularizer
        sys.process_odometry(
            Value::PoseSE2(PoseSE2::new(1.0, 0.0, 0.0)),
            Noise::isotropic(3, 0.01).unwrap(),
        )
        .unwrap();
        sys.process_landmark_measurement(
            Factor::Range {
                pose: p(1),
                landmark: l(0),
                range: 4.2,
                sigma: 0.3,
            },
            Association::Existing,
        )
        .unwrap();
        sys.finish_frame().unwrap();
        assert_eq!(regs(&sys), 0);
        assert!(sys.partition_invariant_holds());
    }

    #[test]
    fn no_reinit_mode_equals_the_bare_solver_on_the_same_graph() {
        // drive the ablation mode, then replay its exact graph and creation
        // values through a bare solver with the same per-frame cadence
        let mut sys = start(quick_cfg(Mode::NoReinit));
        sys.process_landmark_measurement(
            Factor::Range {
                pose: p(0),
                landmark: l(0),
                range: 5.0,
                sigma: 0.2,
            },
            Association::New,
        )
        .unwrap();
        sys.finish_frame().unwrap();
        sys.process_odometry(se2(6.0, 0.0, 0.0), Noise::isotropic(3, 1e-3).unwrap())
            .unwrap();
        sys.process_landmark_measurement(
            Factor::Range {
                pose: p(1),
                landmark: l(0),
                range: 5.0,
                sigma: 0.2,
            },
            Association::Existing,
        )
        .unwrap();
        sys.finish_frame().unwrap();
        assert_eq!(sys.registry_size(), 1, "nothing graduates at threshold 0");

        // replay: identical factors in insertion order, identical inits
        let mut graph = FactorGraph::new();
        graph.add_variable(p(0), ValueKind::PoseSE2).unwrap();
        graph.add_variable(l(0), ValueKind::Point2).unwrap();
        let mut solver = Solver::new(SolverConfig::default());
        solver.set_initial(p(0), se2(0.0, 0.0, 0.0));
        solver.set_initial(l(0), sys.creation_value(l(0)).unwrap().clone());
        graph
            .add_factor(Factor::Prior {
                var: p(0),
                mean: se2(0.0, 0.0, 0.0),
                noise: Noise::isotropic(3, 1e-3).unwrap(),
            })
            .unwrap();
        graph
            .add_factor(Factor::Range {
                pose: p(0),
                landmark: l(0),
                range: 5.0,
                sigma: 0.2,
            })
            .unwrap();
        graph
            .add_factor(Factor::RegularizerPrior {
                var: l(0),
                mean: sys.creation_value(l(0)).unwrap().clone(),
                sigma: 100.0,
            })
            .unwrap();
        solver.optimize(&graph).unwrap();
        graph.add_variable(p(1), ValueKind::PoseSE2).unwrap();
        graph
            .add_factor(Factor::Odometry {
                from: p(0),
                to: p(1),
                delta: se2(6.0, 0.0, 0.0),
                noise: Noise::isotropic(3, 1e-3).unwrap(),
            })
            .unwrap();
        let from = solver.value(p(0)).unwrap().as_pose_se2().unwrap().clone();
        solver.set_initial(p(1), Value::PoseSE2(from.compose(&PoseSE2::new(6.0, 0.0, 0.0))));
        graph
            .add_factor(Factor::Range {
                pose: p(1),
                landmark: l(0),
                range: 5.0,
                sigma: 0.2,
            })
            .unwrap();
        solver.optimize(&graph).unwrap();

        for var in [p(0), p(1), l(0)] {
            let a = sys.estimate(var).unwrap();
            let b = solver.value(var).unwrap();
            let diff = a.local(b).unwrap().norm();
            assert!(diff < 1e-12, "{var} differs by {diff}");
        }
    }

    #[test]
    fn dense_cloud_has_k_by_m_samples() {
        let mut sys = start(quick_cfg(Mode::Gapslam));
        sys.process_landmark_measurement(
            Factor::Range {
                pose: p(0),
                landmark: l(0),
                range: 4.0,
                sigma: 0.3,
            },
            Association::New,
        )
        .unwrap();
        sys.finish_frame().unwrap();
        let cloud = sys.dense_cloud(l(0)).unwrap();
        assert_eq!(cloud.len(), 30 * 60);
        // stamped with the frame the belief describes, not the upcoming one
        assert_eq!(cloud.created_step, 0);
    }

    #[test]
    fn defaults_match_the_documented_operating_point() {
        let cfg = GapslamConfig::default();
        assert_eq!(cfg.paths, 200);
        assert_eq!(cfg.per_path, 100);
        assert_eq!(cfg.component_cap, 5);
        assert_eq!(cfg.eig_threshold, 0.05);
        assert_eq!(cfg.regularizer_sigma, 100.0);
        assert_eq!(cfg.depth_near, 0.3);
        assert_eq!(cfg.depth_far, 15.0);
    }
}
