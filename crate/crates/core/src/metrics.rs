//! Accuracy metrics: RMSE of point estimates against ground truth, and
//! kernel maximum mean discrepancy (MMD) between two sample sets.
//!
//! MMD is the workhorse for judging the particle clouds: a cloud is good
//! when its discrepancy against reference posterior samples is comparable to
//! the discrepancy between two independent reference runs (the resolution
//! floor of the estimator), and bad when it is several times that.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::values::{Value, Values, VarId};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no entities to compare")]
    Empty,
    #[error("ground truth is missing {0}")]
    MissingTruth(VarId),
    #[error("sample sets have dimensions {a} and {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("bandwidth must be positive and finite (got {0})")]
    BadBandwidth(f64),
}

fn position(value: &Value) -> Vec<f64> {
    match value {
        Value::PoseSE2(p) => vec![p.translation.x, p.translation.y],
        Value::PoseSE3(p) => p.translation.as_slice().to_vec(),
        Value::Point2(p) => p.as_slice().to_vec(),
        Value::Point3(p) => p.as_slice().to_vec(),
    }
}

/// Root-mean-square Euclidean position error over every variable in
/// `estimated`, paired with `truth` by id. Poses compare translations only;
/// both worlds are assumed to share a frame (no alignment is applied).
pub fn rmse(estimated: &Values, truth: &Values) -> Result<f64, MetricsError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (id, value) in estimated.iter() {
        let reference = truth.get(id).ok_or(MetricsError::MissingTruth(id))?;
        let a = position(value);
        let b = position(reference);
        if a.len() != b.len() {
            return Err(MetricsError::DimensionMismatch {
                a: a.len(),
                b: b.len(),
            });
        }
        total += a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
        count += 1;
    }
    if count == 0 {
        return Err(MetricsError::Empty);
    }
    Ok((total / count as f64).sqrt())
}

/// Kernel bandwidth policy for [`mmd`].
#[derive(Debug, Clone, Copy)]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled sample set.
    Auto,
    Value(f64),
}

/// MMD estimate together with the bandwidth that produced it, so runs can
/// record what they measured with.
#[derive(Debug, Clone, Copy)]
pub struct MmdEstimate {
    /// `max(0, ·)` of the unbiased squared-MMD U-statistic.
    pub value: f64,
    pub bandwidth: f64,
}

fn sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for r in 0..a.nrows() {
        let d = a[(r, i)] - b[(r, j)];
        s += d * d;
    }
    s
}

/// Median pairwise Euclidean distance over the pooled columns of `a` and `b`.
fn median_pooled_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.ncols() + b.ncols();
    let col = |k: usize| {
        if k < a.ncols() {
            (a, k)
        } else {
            (b, k - a.ncols())
        }
    };
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let (mi, ci) = col(i);
        for j in (i + 1)..n {
            let (mj, cj) = col(j);
            dists.push(sq_dist(mi, ci, mj, cj).sqrt());
        }
    }
    let mid = dists.len() / 2;
    *dists
        .select_nth_unstable_by(mid, |x, y| x.partial_cmp(y).expect("finite distances"))
        .1
}

/// Unbiased U-statistic estimate of the squared MMD between two sample sets
/// (one column per sample) under a Gaussian kernel, clamped at zero.
/// Identical inputs report exactly zero.
pub fn mmd(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    bandwidth: Bandwidth,
) -> Result<MmdEstimate, MetricsError> {
    if a.ncols() < 2 || b.ncols() < 2 {
        return Err(MetricsError::Empty);
    }
    if a.nrows() != b.nrows() {
        return Err(MetricsError::DimensionMismatch {
            a: a.nrows(),
            b: b.nrows(),
        });
    }
    let h = match bandwidth {
        Bandwidth::Value(h) => h,
        Bandwidth::Auto => {
            let med = median_pooled_distance(a, b);
            // degenerate pooled set (all points equal): any scale works,
            // since every kernel value is then exactly 1
            if med > 0.0 {
                med
            } else {
                1.0
            }
        }
    };
    if !(h > 0.0) || !h.is_finite() {
        return Err(MetricsError::BadBandwidth(h));
    }
    let gamma = 1.0 / (2.0 * h * h);
    let kernel = |d2: f64| (-gamma * d2).exp();

    let m = a.ncols();
    let n = b.ncols();
    let mut within_a = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            within_a += kernel(sq_dist(a, i, a, j));
        }
    }
    let mut within_b = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            within_b += kernel(sq_dist(b, i, b, j));
        }
    }
    let mut cross = 0.0;
    for i in 0..m {
        for j in 0..n {
            cross += kernel(sq_dist(a, i, b, j));
        }
    }
    let estimate = 2.0 * within_a / (m as f64 * (m as f64 - 1.0))
        + 2.0 * within_b / (n as f64 * (n as f64 - 1.0))
        - 2.0 * cross / (m as f64 * n as f64);
    Ok(MmdEstimate {
        value: estimate.max(0.0),
        bandwidth: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PoseSE2;
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn l(i: u32) -> VarId {
        VarId::Landmark(i)
    }

    #[test]
    fn rmse_matches_hand_computed_cases() {
        let mut truth = Values::new();
        truth.insert(l(0), Value::Point2(Vector2::new(1.0, 1.0)));
        truth.insert(l(1), Value::Point2(Vector2::new(-2.0, 0.5)));

        let exact = truth.clone();
        assert_eq!(rmse(&exact, &truth).unwrap(), 0.0);

        let mut off = Values::new();
        off.insert(l(0), Value::Point2(Vector2::new(4.0, 5.0))); // off by (3,4)
        let mut single_truth = Values::new();
        single_truth.insert(l(0), Value::Point2(Vector2::new(1.0, 1.0)));
        assert!((rmse(&off, &single_truth).unwrap() - 5.0).abs() < 1e-15);

        // errors 1 and 7 → sqrt((1 + 49) / 2) = 5
        let mut est = Values::new();
        est.insert(l(0), Value::Point2(Vector2::new(2.0, 1.0)));
        est.insert(l(1), Value::Point2(Vector2::new(5.0, 0.5)));
        assert!((rmse(&est, &truth).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn rmse_uses_pose_translations_and_rejects_unknown_ids() {
        let mut est = Values::new();
        est.insert(VarId::Pose(0), Value::PoseSE2(PoseSE2::new(1.0, 0.0, 0.9)));
        let mut truth = Values::new();
        // heading differs wildly; only the translation counts
        truth.insert(VarId::Pose(0), Value::PoseSE2(PoseSE2::new(0.0, 0.0, -2.0)));
        assert!((rmse(&est, &truth).unwrap() - 1.0).abs() < 1e-15);

        est.insert(l(9), Value::Point2(Vector2::zeros()));
        assert!(matches!(
            rmse(&est, &truth),
            Err(MetricsError::MissingTruth(v)) if v == l(9)
        ));
        assert!(matches!(
            rmse(&Values::new(), &truth),
            Err(MetricsError::Empty)
        ));
    }

    fn gaussian_matrix(n: usize, shift: f64, rng: &mut impl Rng) -> DMatrix<f64> {
        DMatrix::from_fn(2, n, |r, _| {
            shift * (r == 0) as u8 as f64 + rng.sample::<f64, _>(StandardNormal)
        })
    }

    #[test]
    fn identical_sets_report_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gaussian_matrix(300, 0.0, &mut rng);
        let est = mmd(&a, &a.clone(), Bandwidth::Auto).unwrap();
        assert!(est.value <= 1e-12, "identical sets gave {}", est.value);
    }

    #[test]
    fn shifted_gaussians_dwarf_the_self_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gaussian_matrix(2000, 0.0, &mut rng);
        let b = gaussian_matrix(2000, 3.0, &mut rng); // 3σ shift
        let shifted = mmd(&a, &b, Bandwidth::Auto).unwrap();

        let a2 = gaussian_matrix(2000, 0.0, &mut rng);
        let self_dist = mmd(&a, &a2, Bandwidth::Auto).unwrap();
        assert!(
            shifted.value > 10.0 * self_dist.value.max(1e-12),
            "shifted {} vs self {}",
            shifted.value,
            self_dist.value
        );
        assert!(shifted.bandwidth > 0.0);
    }

    #[test]
    fn estimator_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian_matrix(150, 0.0, &mut rng);
        let b = gaussian_matrix(220, 1.0, &mut rng);
        let ab = mmd(&a, &b, Bandwidth::Auto).unwrap();
        let ba = mmd(&b, &a, Bandwidth::Auto).unwrap();
        // swapped arguments reorder the floating-point sums; equality holds
        // to roundoff
        assert!((ab.value - ba.value).abs() < 1e-12 * (1.0 + ab.value));
        assert_eq!(ab.bandwidth, ba.bandwidth);
    }

    #[test]
    fn self_distance_shrinks_with_sample_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut means = [0.0, 0.0];
        for (slot, n) in [(0usize, 500usize), (1, 2000)] {
            let mut total = 0.0;
            for _ in 0..20 {
                let a = gaussian_matrix(n, 0.0, &mut rng);
                let b = gaussian_matrix(n, 0.0, &mut rng);
                total += mmd(&a, &b, Bandwidth::Auto).unwrap().value;
            }
            means[slot] = total / 20.0;
        }
        assert!(
            means[1] < means[0],
            "self-distance should shrink: N=500 gives {}, N=2000 gives {}",
            means[0],
            means[1]
        );
    }

    #[test]
    fn dimension_mismatch_and_tiny_sets_are_errors() {
        let a = DMatrix::<f64>::zeros(2, 10);
        let b = DMatrix::<f64>::zeros(3, 10);
        assert!(matches!(
            mmd(&a, &b, Bandwidth::Auto),
            Err(MetricsError::DimensionMismatch { a: 2, b: 3 })
        ));
        let tiny = DMatrix::<f64>::zeros(2, 1);
        assert!(matches!(
            mmd(&a, &tiny, Bandwidth::Auto),
            Err(MetricsError::Empty)
        ));
        assert!(matches!(
            mmd(&a, &a, Bandwidth::Value(-1.0)),
            Err(MetricsError::BadBandwidth(_))
        ));
    }

    #[test]
    fn fixed_bandwidth_matches_direct_computation() {
        // 2 + 2 points, hand-evaluated U-statistic
        let a = DMatrix::from_column_slice(1, 2, &[0.0, 1.0]);
        let b = DMatrix::from_column_slice(1, 2, &[0.5, 1.5]);
        let h = 1.0;
        let k = |d: f64| (-d * d / 2.0).exp();
        let want = k(1.0) + k(1.0)
            - 2.0 / 4.0 * (k(0.5) + k(1.5) + k(0.5) + k(0.5));
        let got = mmd(&a, &b, Bandwidth::Value(h)).unwrap().value;
        assert!((got - want.max(0.0)).abs() < 1e-15, "got {got}, want {want}");
    }
}
