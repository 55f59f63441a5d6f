//! Ground-truth scenes, noise injection, down-sampling and error metrics.

use std::io::Write;
use std::time::Instant;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::em::{register, EmConfig};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointSet, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Unit sphere at the origin.
    Sphere,
    /// Box with half extents (1.0, 0.7, 0.5).
    Box,
    /// Sphere of radius 0.6 fused with an off-centre 1.6 x 1.0 x 0.6 box.
    Composite,
}

impl std::str::FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Shape::Sphere),
            "box" => Ok(Shape::Box),
            "composite" => Ok(Shape::Composite),
            other => Err(Error::InvalidConfig(format!("unknown shape '{other}'"))),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Shape::Sphere => "sphere",
            Shape::Box => "box",
            Shape::Composite => "composite",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub shape: Shape,
    pub sets: usize,
    pub points_per_set: usize,
    /// Upper bound of the ground-truth rotation angle, degrees.
    pub max_rotation_deg: f64,
    /// Upper bound of the ground-truth translation length.
    pub max_translation: f64,
    /// Fraction of each view shared with its azimuthal neighbour, in (0, 1].
    pub overlap: f64,
    /// Magnification applied to the unit-size shape.
    pub scale: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            shape: Shape::Sphere,
            sets: 5,
            points_per_set: 2000,
            max_rotation_deg: 10.0,
            max_translation: 0.1,
            overlap: 0.7,
            scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScene {
    pub sets: Vec<PointSet>,
    /// Maps each set's frame into the model frame.
    pub truth: Vec<RigidTransform>,
    /// Largest distance between two model points.
    pub scene_diameter: f64,
}

impl GroundTruthScene {
    pub fn identity_init(&self) -> Vec<RigidTransform> {
        vec![RigidTransform::identity(); self.sets.len()]
    }
}

pub fn rotation_from_axis_angle(axis: &Vector3<f64>, angle: f64) -> RigidTransform {
    let rotation = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
    RigidTransform::new(*rotation.matrix(), Vector3::zeros()).expect("axis-angle rotation is orthonormal")
}

/// `(unit axis, angle)`; the axis is arbitrary for the identity.
pub fn axis_angle(transform: &RigidTransform) -> (Vector3<f64>, f64) {
    let rotation = Rotation3::from_matrix_unchecked(*transform.rotation());
    match rotation.axis_angle() {
        Some((axis, angle)) => (axis.into_inner(), angle),
        None => (Vector3::z(), 0.0),
    }
}

fn unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn sample_box(rng: &mut impl Rng, center: Vector3<f64>, half: Vector3<f64>) -> Point3 {
    let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut axis = 2;
    for (a, area) in areas.iter().enumerate() {
        if pick < *area {
            axis = a;
            break;
        }
        pick -= area;
    }
    let mut p = Vector3::new(
        rng.random_range(-half.x..half.x),
        rng.random_range(-half.y..half.y),
        rng.random_range(-half.z..half.z),
    );
    p[axis] = if rng.random_bool(0.5) { half[axis] } else { -half[axis] };
    center + p
}

fn sample_surface(shape: Shape, rng: &mut impl Rng) -> Point3 {
    match shape {
        Shape::Sphere => unit_vector(rng),
        Shape::Box => sample_box(rng, Vector3::zeros(), Vector3::new(1.0, 0.7, 0.5)),
        Shape::Composite => {
            if rng.random_bool(0.5) {
                0.6 * unit_vector(rng)
            } else {
                sample_box(rng, Vector3::new(0.7, 0.2, 0.0), Vector3::new(0.8, 0.5, 0.3))
            }
        }
    }
}

/// Builds `M` views of an analytic surface.
///
/// One model-frame sample cloud is drawn and each view keeps the points whose
/// azimuth about the z axis falls in its sector. Sector centres are spaced
/// `2 pi / M` apart and each sector is widened so that azimuthal neighbours
/// share `overlap` of their extent; shared regions therefore hold identical
/// samples. Each view is expressed in its own frame through the inverse of
/// its ground-truth transform. Sphere views come out near `points_per_set`
/// points; for the other shapes the count follows the surface area in the
/// sector.
pub fn synth_scene(spec: &SceneSpec) -> Result<GroundTruthScene> {
    if spec.sets < 2 {
        return Err(Error::TooFewSets(spec.sets));
    }
    if spec.points_per_set < 10 {
        return Err(Error::InvalidConfig("points_per_set must be at least 10".into()));
    }
    if !(spec.overlap > 0.0 && spec.overlap <= 1.0) {
        return Err(Error::InvalidConfig(format!("overlap must lie in (0, 1], got {}", spec.overlap)));
    }
    if !(spec.scale > 0.0 && spec.scale.is_finite()) {
        return Err(Error::InvalidConfig(format!("scale must be positive, got {}", spec.scale)));
    }
    if !(spec.max_rotation_deg >= 0.0 && spec.max_translation >= 0.0) {
        return Err(Error::InvalidConfig("perturbation bounds must be non-negative".into()));
    }

    let tau = std::f64::consts::TAU;
    let spacing = tau / spec.sets as f64;
    let width = if spec.overlap >= 1.0 {
        tau
    } else {
        (spacing / (1.0 - spec.overlap)).min(tau)
    };
    let model_points = ((spec.points_per_set as f64) * tau / width).ceil() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let model: Vec<Point3> = (0..model_points)
        .map(|_| spec.scale * sample_surface(spec.shape, &mut rng))
        .collect();

    let max_angle = spec.max_rotation_deg.to_radians();
    let mut truth = Vec::with_capacity(spec.sets);
    for _ in 0..spec.sets {
        let axis = unit_vector(&mut rng);
        let angle = rng.random_range(0.0..=1.0) * max_angle;
        let direction = unit_vector(&mut rng);
        let length = rng.random_range(0.0..=1.0) * spec.max_translation;
        let rotation = if angle == 0.0 {
            RigidTransform::identity()
        } else {
            rotation_from_axis_angle(&axis, angle)
        };
        let translation = if length == 0.0 { Vector3::zeros() } else { direction * length };
        truth.push(RigidTransform::new(*rotation.rotation(), translation)?);
    }

    let mut sets = Vec::with_capacity(spec.sets);
    for (i, t) in truth.iter().enumerate() {
        let center = i as f64 * spacing;
        let to_set = t.inverse();
        let points: Vec<Point3> = model
            .iter()
            .filter(|p| {
                let azimuth = p.y.atan2(p.x);
                let offset = (azimuth - center + tau / 2.0).rem_euclid(tau) - tau / 2.0;
                width >= tau || offset.abs() <= width / 2.0
            })
            .map(|p| to_set.apply(p))
            .collect();
        sets.push(PointSet::new(i, points)?);
    }

    Ok(GroundTruthScene {
        sets,
        truth,
        scene_diameter: diameter(&model),
    })
}

/// Exact diameter of a point cloud by exhaustive pairing.
pub fn diameter(points: &[Point3]) -> f64 {
    points
        .par_iter()
        .enumerate()
        .map(|(k, p)| points[k + 1..].iter().map(|q| (p - q).norm_squared()).fold(0.0, f64::max))
        .reduce(|| 0.0, f64::max)
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Signal-to-noise ratio in dB; `f64::INFINITY` disables noise.
    pub snr_db: f64,
    pub seed: u64,
}

/// Mean squared norm of the centred points.
pub fn signal_power(points: &[Point3]) -> f64 {
    let c = points.iter().sum::<Point3>() / points.len() as f64;
    points.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / points.len() as f64
}

/// Adds i.i.d. zero-mean Gaussian noise whose total power is
/// `P_s / 10^(snr / 10)`, split evenly over the three coordinates.
pub fn add_noise(set: &PointSet, spec: &NoiseSpec) -> Result<PointSet> {
    if spec.snr_db.is_nan() || spec.snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidConfig(format!("invalid SNR {}", spec.snr_db)));
    }
    if spec.snr_db == f64::INFINITY {
        return Ok(set.clone());
    }
    let noise_power = signal_power(set.points()) / 10f64.powf(spec.snr_db / 10.0);
    let normal = Normal::new(0.0, (noise_power / 3.0).sqrt())
        .map_err(|e| Error::InvalidConfig(format!("noise distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let points = set
        .points()
        .iter()
        .map(|p| p + Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
        .collect();
    PointSet::new(set.id(), points)
}

/// Keeps indices `round(k N / target)` for `k = 0..target`.
pub fn downsample_uniform(set: &PointSet, target: usize) -> Result<PointSet> {
    if target < 1 {
        return Err(Error::InvalidConfig("down-sampling target must be at least 1".into()));
    }
    let n = set.len();
    if target >= n {
        return Ok(set.clone());
    }
    let mut keep: Vec<usize> = (0..target).map(|k| (2 * k * n + target) / (2 * target)).collect();
    keep.dedup();
    PointSet::new(set.id(), keep.into_iter().map(|k| set.points()[k]).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMetrics {
    /// `(1/M) sum |R_est - R_true|_F`.
    pub e_r: f64,
    /// `(1/M) sum |t_est - t_true|`.
    pub e_t: f64,
    pub per_set_r: Vec<f64>,
    pub per_set_t: Vec<f64>,
    pub gauge_fixed: bool,
}

/// With `gauge_fix`, the estimates are first left-composed with
/// `G = T_true[0] ∘ T_est[0]^-1` so that set 0 agrees exactly.
pub fn compute_errors(
    estimated: &[RigidTransform],
    truth: &[RigidTransform],
    gauge_fix: bool,
) -> Result<ErrorMetrics> {
    if estimated.len() != truth.len() {
        return Err(Error::SetCountMismatch {
            expected: truth.len(),
            actual: estimated.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::TooFewSets(0));
    }
    let gauge = if gauge_fix {
        truth[0].compose(&estimated[0].inverse())
    } else {
        RigidTransform::identity()
    };
    let (per_set_r, per_set_t): (Vec<f64>, Vec<f64>) = estimated
        .iter()
        .zip(truth)
        .map(|(est, tru)| {
            let est = if gauge_fix { gauge.compose(est) } else { *est };
            (
                (est.rotation() - tru.rotation()).norm(),
                (est.translation() - tru.translation()).norm(),
            )
        })
        .unzip();
    let m = truth.len() as f64;
    Ok(ErrorMetrics {
        e_r: per_set_r.iter().sum::<f64>() / m,
        e_t: per_set_t.iter().sum::<f64>() / m,
        per_set_r,
        per_set_t,
        gauge_fixed: gauge_fix,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub w: f64,
    #[serde(rename = "e_R")]
    pub e_r: f64,
    pub e_t: f64,
    pub runtime_s: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial: usize,
    #[serde(rename = "e_R")]
    pub e_r: f64,
    pub e_t: f64,
    pub runtime_s: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSummary {
    pub rows: Vec<TrialRow>,
    pub mean_e_r: f64,
    pub std_e_r: f64,
    pub mean_e_t: f64,
    pub std_e_t: f64,
    pub mean_runtime_s: f64,
}

/// Registers `sets` from identity and scores the gauge-fixed result.
fn run_once(sets: &[PointSet], truth: &[RigidTransform], cfg: &EmConfig) -> Result<(ErrorMetrics, f64, usize)> {
    let init = vec![RigidTransform::identity(); sets.len()];
    let started = Instant::now();
    let (params, report) = register(sets, &init, cfg)?;
    let runtime = started.elapsed().as_secs_f64();
    let errors = compute_errors(&params.transforms, truth, true)?;
    Ok((errors, runtime, report.iterations_run()))
}

/// One registration per `w`, reporting gauge-fixed errors.
pub fn sweep_w(scene: &GroundTruthScene, w_values: &[f64], cfg: &EmConfig) -> Result<Vec<SweepRow>> {
    w_values
        .iter()
        .map(|&w| {
            let cfg = EmConfig { w, ..cfg.clone() };
            let (errors, runtime_s, iterations) = run_once(&scene.sets, &scene.truth, &cfg)?;
            Ok(SweepRow {
                w,
                e_r: errors.e_r,
                e_t: errors.e_t,
                runtime_s,
                iterations,
            })
        })
        .collect()
}

/// SplitMix64 finaliser, used to derive independent RNG streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean and sample standard deviation; the deviation is 0 for one sample.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Repeats noisy registration `trials` times, each trial with fresh noise
/// streams derived from `(noise.seed, trial, set)`. With `cfg.threads > 1`
/// the trials run concurrently, each registration single-threaded.
pub fn trial_statistics(
    scene: &GroundTruthScene,
    noise: &NoiseSpec,
    trials: usize,
    cfg: &EmConfig,
) -> Result<TrialSummary> {
    if trials < 1 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let run_trial = |trial: usize| -> Result<TrialRow> {
        let trial_seed = derive_seed(noise.seed, trial as u64);
        let sets = scene
            .sets
            .iter()
            .enumerate()
            .map(|(i, s)| {
                add_noise(
                    s,
                    &NoiseSpec {
                        snr_db: noise.snr_db,
                        seed: derive_seed(trial_seed, i as u64),
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let inner = EmConfig { threads: 1, ..cfg.clone() };
        let (errors, runtime_s, iterations) = run_once(&sets, &scene.truth, &inner)?;
        Ok(TrialRow {
            trial,
            e_r: errors.e_r,
            e_t: errors.e_t,
            runtime_s,
            iterations,
        })
    };
    let rows: Vec<TrialRow> = if cfg.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| (0..trials).into_par_iter().map(run_trial).collect::<Result<_>>())?
    } else {
        (0..trials).map(run_trial).collect::<Result<_>>()?
    };
    let (mean_e_r, std_e_r) = mean_std(&rows.iter().map(|r| r.e_r).collect::<Vec<_>>());
    let (mean_e_t, std_e_t) = mean_std(&rows.iter().map(|r| r.e_t).collect::<Vec<_>>());
    let mean_runtime_s = rows.iter().map(|r| r.runtime_s).sum::<f64>() / trials as f64;
    Ok(TrialSummary {
        rows,
        mean_e_r,
        std_e_r,
        mean_e_t,
        std_e_t,
        mean_runtime_s,
    })
}

/// Writes rows as CSV with a header line, even when `rows` is empty.
pub fn write_csv<R: Serialize>(rows: &[R], header: &[&str], out: impl Write) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    writer.write_record(header)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub const SWEEP_HEADER: [&str; 5] = ["w", "e_R", "e_t", "runtime_s", "iterations"];
pub const TRIAL_HEADER: [&str; 5] = ["trial", "e_R", "e_t", "runtime_s", "iterations"];
