//! Joint registration of `M` point sets by expectation-maximisation.
//!
//! Every point `v_{i,l}` is modelled as drawn from a mixture of `M - 1`
//! isotropic Gaussians centred at its nearest neighbours in the other
//! (transformed) sets, plus a uniform outlier component of weight `w`.
//! One outer iteration visits the sets in order; each visit runs
//!
//! 1. correspondence search: `c(j, l)` for every `j != i` ([`e_correspond`]),
//! 2. posteriors `alpha_{i,l,j}` and the outlier mass ([`e_posteriors`]),
//! 3. the weighted least-squares update of `(R_i, t_i)` ([`WeightedPairs`]),
//!
//! and after all sets have moved the shared variance is refitted
//! ([`update_sigma`]). Nearest-neighbour trees are rebuilt once per outer
//! iteration.

use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointSet, RigidTransform};
use crate::spatial_index::NnIndex;

/// Point dimension.
pub const DIM: usize = 3;

/// Total posterior mass below which a set's transform is left unchanged.
pub const MIN_EFFECTIVE_WEIGHT: f64 = 1e-12;

/// Number of random (point, opposite set) pairs used to seed `sigma2`.
pub const SIGMA_INIT_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    /// Outlier ratio of the uniform component, in `[0, 1)`.
    pub w: f64,
    /// Iteration cap `K`.
    pub max_iters: usize,
    /// Convergence threshold on the per-iteration parameter change.
    pub tolerance: f64,
    /// Variance floor relative to the squared scene diameter.
    pub sigma2_floor: f64,
    /// Worker threads for the E-step; 1 runs fully sequentially.
    pub threads: usize,
    /// Seed for the variance initialisation sample.
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            w: 0.01,
            max_iters: 100,
            tolerance: 1e-6,
            sigma2_floor: 1e-12,
            threads: 1,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.w) {
            return Err(Error::InvalidConfig(format!("w must lie in [0, 1), got {}", self.w)));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::InvalidConfig(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.sigma2_floor.is_nan() || self.sigma2_floor <= 0.0 {
            return Err(Error::InvalidConfig("sigma2_floor must be positive".into()));
        }
        if self.threads < 1 {
            return Err(Error::InvalidConfig("threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// The full parameter set: one transform per view, the shared isotropic
/// variance and the fixed outlier ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub transforms: Vec<RigidTransform>,
    pub sigma2: f64,
    pub w: f64,
}

impl ModelParams {
    pub fn new(transforms: Vec<RigidTransform>, sigma2: f64, w: f64) -> Result<Self> {
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::DegenerateCovariance(sigma2));
        }
        if !(0.0..1.0).contains(&w) {
            return Err(Error::InvalidConfig(format!("w must lie in [0, 1), got {w}")));
        }
        Ok(Self { transforms, sigma2, w })
    }

    pub fn num_sets(&self) -> usize {
        self.transforms.len()
    }

    /// `lambda = w M' / ((1 - w) M)`, the outlier term of the posterior.
    pub fn outlier_term(&self) -> f64 {
        let m = self.num_sets() as f64;
        self.w * (m - 1.0) / ((1.0 - self.w) * m)
    }
}

/// Nearest-neighbour table for one data set `i`: `c(j, l)` for all `j`.
/// The `j == i` column holds `l` itself and is never read.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceTable {
    set: usize,
    num_sets: usize,
    matches: Vec<u32>,
}

impl CorrespondenceTable {
    pub fn set(&self) -> usize {
        self.set
    }

    pub fn len(&self) -> usize {
        self.matches.len() / self.num_sets
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn neighbor(&self, l: usize, j: usize) -> usize {
        self.matches[l * self.num_sets + j] as usize
    }
}

/// Correspondences plus posteriors for one data set `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceField {
    table: CorrespondenceTable,
    alpha: Vec<f64>,
    outlier: Vec<f64>,
}

impl CorrespondenceField {
    pub fn set(&self) -> usize {
        self.table.set
    }

    pub fn num_sets(&self) -> usize {
        self.table.num_sets
    }

    pub fn len(&self) -> usize {
        self.outlier.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outlier.is_empty()
    }

    pub fn table(&self) -> &CorrespondenceTable {
        &self.table
    }

    pub fn neighbor(&self, l: usize, j: usize) -> usize {
        self.table.neighbor(l, j)
    }

    /// `alpha_{i,l,j}`; zero for `j == i`.
    pub fn alpha(&self, l: usize, j: usize) -> f64 {
        self.alpha[l * self.table.num_sets + j]
    }

    /// Posterior probability that `v_{i,l}` is an outlier.
    pub fn outlier(&self, l: usize) -> f64 {
        self.outlier[l]
    }

    pub fn total_weight(&self) -> f64 {
        self.alpha.iter().sum()
    }

    /// Multiplies every Gaussian posterior by `factor`; the outlier column is
    /// left as is. Only useful for probing the objective.
    pub fn scale_alpha(&mut self, factor: f64) {
        self.alpha.iter_mut().for_each(|a| *a *= factor);
    }

    /// Builds a field from explicit tables, mainly for tests.
    pub fn from_parts(set: usize, num_sets: usize, neighbors: Vec<usize>, alpha: Vec<f64>) -> Result<Self> {
        let n = neighbors.len() / num_sets.max(1);
        if num_sets < 2 || neighbors.len() != n * num_sets || alpha.len() != neighbors.len() {
            return Err(Error::InvalidConfig("correspondence tables have inconsistent shapes".into()));
        }
        let mut alpha = alpha;
        let mut outlier = Vec::with_capacity(n);
        for l in 0..n {
            alpha[l * num_sets + set] = 0.0;
            let row: f64 = alpha[l * num_sets..(l + 1) * num_sets].iter().sum();
            outlier.push((1.0 - row).max(0.0));
        }
        Ok(Self {
            table: CorrespondenceTable {
                set,
                num_sets,
                matches: neighbors.into_iter().map(|h| h as u32).collect(),
            },
            alpha,
            outlier,
        })
    }
}

/// `(2 pi sigma2)^(-d/2) exp(-dist2 / (2 sigma2))`.
pub fn gaussian_density(dist2: f64, sigma2: f64, dim: usize) -> f64 {
    log_gaussian_density(dist2, sigma2, dim).exp()
}

pub fn log_gaussian_density(dist2: f64, sigma2: f64, dim: usize) -> f64 {
    -0.5 * dim as f64 * (2.0 * std::f64::consts::PI * sigma2).ln() - dist2 / (2.0 * sigma2)
}

/// Nearest neighbour of every `T_i(v_{i,l})` in each opposite index.
///
/// `indices[j]` must be built for set `j`; `indices[i]` is ignored.
pub fn e_correspond(
    i: usize,
    sets: &[PointSet],
    params: &ModelParams,
    indices: &[NnIndex],
) -> CorrespondenceTable {
    correspond_with(i, sets, params, indices, None)
}

/// Posteriors `alpha_{i,l,j} = beta_{i,l,j} / (sum_j beta_{i,l,j} + lambda)`
/// with residuals measured under the current transforms.
pub fn e_posteriors(
    i: usize,
    table: &CorrespondenceTable,
    sets: &[PointSet],
    params: &ModelParams,
) -> Result<CorrespondenceField> {
    posteriors_with(i, table, sets, params, None)
}

fn correspond_with(
    i: usize,
    sets: &[PointSet],
    params: &ModelParams,
    indices: &[NnIndex],
    pool: Option<&ThreadPool>,
) -> CorrespondenceTable {
    let m = sets.len();
    let transform = params.transforms[i];
    let points = sets[i].points();
    let mut matches = vec![0u32; points.len() * m];
    let fill = |(l, row): (usize, &mut [u32])| {
        let query = transform.apply(&points[l]);
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = if j == i {
                l as u32
            } else {
                indices[j].nearest_squared(&query).0 as u32
            };
        }
    };
    match pool {
        Some(pool) => pool.install(|| matches.par_chunks_mut(m).enumerate().for_each(fill)),
        None => matches.chunks_mut(m).enumerate().for_each(fill),
    }
    CorrespondenceTable {
        set: i,
        num_sets: m,
        matches,
    }
}

fn posteriors_with(
    i: usize,
    table: &CorrespondenceTable,
    sets: &[PointSet],
    params: &ModelParams,
    pool: Option<&ThreadPool>,
) -> Result<CorrespondenceField> {
    let sigma2 = params.sigma2;
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::DegenerateCovariance(sigma2));
    }
    let m = sets.len();
    let log_lambda = params.outlier_term().ln();
    let points = sets[i].points();
    let transforms = &params.transforms;
    let mut alpha = vec![0.0; points.len() * m];
    let mut outlier = vec![0.0; points.len()];

    // Log domain: with sigma2 near its floor the densities overflow, far
    // from it they underflow.
    let fill = |(l, (row, out)): (usize, (&mut [f64], &mut f64))| {
        let x = transforms[i].apply(&points[l]);
        let mut peak = log_lambda;
        for j in (0..m).filter(|&j| j != i) {
            let y = transforms[j].apply(&sets[j].points()[table.neighbor(l, j)]);
            row[j] = log_gaussian_density((x - y).norm_squared(), sigma2, DIM);
            peak = peak.max(row[j]);
        }
        let mut denom = (log_lambda - peak).exp();
        for j in (0..m).filter(|&j| j != i) {
            row[j] = (row[j] - peak).exp();
            denom += row[j];
        }
        let mut total = 0.0;
        for j in (0..m).filter(|&j| j != i) {
            row[j] /= denom;
            total += row[j];
        }
        row[i] = 0.0;
        *out = (1.0 - total).max(0.0);
    };
    match pool {
        Some(pool) => pool.install(|| {
            alpha
                .par_chunks_mut(m)
                .zip(outlier.par_iter_mut())
                .enumerate()
                .for_each(fill)
        }),
        None => alpha.chunks_mut(m).zip(outlier.iter_mut()).enumerate().for_each(fill),
    }
    Ok(CorrespondenceField {
        table: table.clone(),
        alpha,
        outlier,
    })
}

/// Result of the weighted Procrustes rotation solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationEstimate {
    pub rotation: Matrix3<f64>,
    /// The cross-covariance was rank deficient or the reflection fix hit two
    /// equal singular values, so the optimum is not unique.
    pub ambiguous: bool,
}

/// Weighted point pairs `(v_{i,l}, T_j(v_{j,c(j,l)}), alpha_{i,l,j})` of the
/// M-step for one set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightedPairs {
    pub source: Vec<Point3>,
    pub target: Vec<Point3>,
    pub weight: Vec<f64>,
}

impl WeightedPairs {
    pub fn new(source: Vec<Point3>, target: Vec<Point3>, weight: Vec<f64>) -> Result<Self> {
        if source.len() != target.len() || source.len() != weight.len() {
            return Err(Error::InvalidConfig("weighted pair arrays differ in length".into()));
        }
        Ok(Self { source, target, weight })
    }

    pub fn from_field(i: usize, field: &CorrespondenceField, sets: &[PointSet], params: &ModelParams) -> Self {
        let m = field.num_sets();
        let mut pairs = WeightedPairs::default();
        for (l, v) in sets[i].points().iter().enumerate() {
            for j in (0..m).filter(|&j| j != i) {
                let a = field.alpha(l, j);
                if a > 0.0 {
                    pairs.source.push(*v);
                    pairs.target.push(params.transforms[j].apply(&sets[j].points()[field.neighbor(l, j)]));
                    pairs.weight.push(a);
                }
            }
        }
        pairs
    }

    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weight.iter().sum()
    }

    /// Weighted centroids of sources and targets.
    pub fn centroids(&self) -> Option<(Point3, Point3)> {
        let total = self.total_weight();
        if total.is_nan() || total <= 0.0 {
            return None;
        }
        let mut sx = Vector3::zeros();
        let mut sy = Vector3::zeros();
        for ((x, y), a) in self.source.iter().zip(&self.target).zip(&self.weight) {
            sx += *a * x;
            sy += *a * y;
        }
        Some((sx / total, sy / total))
    }

    /// `J(R, t) = sum alpha |R x + t - y|^2`.
    pub fn cost(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> f64 {
        self.source
            .iter()
            .zip(&self.target)
            .zip(&self.weight)
            .map(|((x, y), a)| a * (rotation * x + translation - y).norm_squared())
            .sum()
    }

    /// `sum alpha q^T R p` over centred pairs; maximised by [`Self::rotation`].
    pub fn alignment(&self, rotation: &Matrix3<f64>) -> f64 {
        let Some((cx, cy)) = self.centroids() else {
            return 0.0;
        };
        self.source
            .iter()
            .zip(&self.target)
            .zip(&self.weight)
            .map(|((x, y), a)| a * (y - cy).dot(&(rotation * (x - cx))))
            .sum()
    }

    /// `H = sum alpha q p^T` with `p`, `q` the centred sources and targets.
    pub fn cross_covariance(&self) -> Option<Matrix3<f64>> {
        let (cx, cy) = self.centroids()?;
        let mut h = Matrix3::zeros();
        for ((x, y), a) in self.source.iter().zip(&self.target).zip(&self.weight) {
            h += *a * (y - cy) * (x - cx).transpose();
        }
        Some(h)
    }

    /// Rotation minimising `J` over SO(3). With `H = U S V^T` the optimum is
    /// `U diag(1, 1, det(U V^T)) V^T`.
    pub fn rotation(&self) -> Result<RotationEstimate> {
        let h = self.cross_covariance().ok_or(Error::NoEffectiveCorrespondences { set: usize::MAX })?;
        Ok(procrustes(&h))
    }

    /// `t = sum alpha (y - R x) / sum alpha`, the stationary point of `J` in `t`.
    pub fn translation(&self, rotation: &Matrix3<f64>) -> Result<Vector3<f64>> {
        let (cx, cy) = self.centroids().ok_or(Error::NoEffectiveCorrespondences { set: usize::MAX })?;
        Ok(cy - rotation * cx)
    }

    pub fn solve(&self) -> Result<(RigidTransform, bool)> {
        let estimate = self.rotation()?;
        let t = self.translation(&estimate.rotation)?;
        Ok((RigidTransform::new(estimate.rotation, t)?, estimate.ambiguous))
    }
}

fn procrustes(h: &Matrix3<f64>) -> RotationEstimate {
    let svd = h.svd(true, true);
    let mut u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let (s0, s1, s2) = (s[order[0]], s[order[1]], s[order[2]]);

    let reflected = (u * v_t).determinant() < 0.0;
    if reflected {
        u.column_mut(order[2]).neg_mut();
    }
    let eps = 1e-12 * s0;
    let ambiguous = s0 == 0.0 || s1 <= eps || (reflected && s1 - s2 <= eps);
    RotationEstimate {
        rotation: u * v_t,
        ambiguous,
    }
}

pub fn estimate_rotation(
    i: usize,
    field: &CorrespondenceField,
    sets: &[PointSet],
    params: &ModelParams,
) -> Result<RotationEstimate> {
    WeightedPairs::from_field(i, field, sets, params)
        .rotation()
        .map_err(|_| Error::NoEffectiveCorrespondences { set: i })
}

pub fn estimate_translation(
    i: usize,
    field: &CorrespondenceField,
    sets: &[PointSet],
    params: &ModelParams,
    rotation: &Matrix3<f64>,
) -> Result<Vector3<f64>> {
    WeightedPairs::from_field(i, field, sets, params)
        .translation(rotation)
        .map_err(|_| Error::NoEffectiveCorrespondences { set: i })
}

/// `(sum alpha r^2, sum alpha)` over all fields under `params`.
fn weighted_residuals(sets: &[PointSet], params: &ModelParams, fields: &[CorrespondenceField]) -> (f64, f64) {
    let mut weighted = 0.0;
    let mut mass = 0.0;
    for field in fields {
        let i = field.set();
        let ti = &params.transforms[i];
        for (l, v) in sets[i].points().iter().enumerate() {
            let x = ti.apply(v);
            for j in (0..field.num_sets()).filter(|&j| j != i) {
                let a = field.alpha(l, j);
                if a > 0.0 {
                    let y = params.transforms[j].apply(&sets[j].points()[field.neighbor(l, j)]);
                    weighted += a * (x - y).norm_squared();
                    mass += a;
                }
            }
        }
    }
    (weighted, mass)
}

/// `sigma2 = sum alpha r^2 / (d sum alpha)`, clamped below at `floor`.
pub fn update_sigma(
    sets: &[PointSet],
    params: &ModelParams,
    fields: &[CorrespondenceField],
    floor: f64,
) -> Result<f64> {
    let (weighted, mass) = weighted_residuals(sets, params, fields);
    if mass.is_nan() || mass <= 0.0 {
        return Err(Error::NoEffectiveCorrespondences {
            set: fields.first().map_or(0, |f| f.set()),
        });
    }
    Ok((weighted / (DIM as f64 * mass)).max(floor))
}

/// `f = -sum alpha (r^2 / sigma2 + d log sigma2)`, monitored but never
/// used for decisions.
pub fn objective(sets: &[PointSet], params: &ModelParams, fields: &[CorrespondenceField]) -> f64 {
    let (weighted, mass) = weighted_residuals(sets, params, fields);
    -(weighted / params.sigma2 + DIM as f64 * params.sigma2.ln() * mass)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Warning {
    /// All points of the set were classified as outliers; its transform was
    /// kept for this iteration.
    FrozenTransform { iteration: usize, set: usize },
    /// The rotation optimum was not unique; the smallest-singular-value
    /// convention was applied.
    AmbiguousRotation { iteration: usize, set: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub sigma2: f64,
    /// `max_i |R_i - R_i'|_F + |t_i - t_i'| / diameter`.
    pub max_transform_delta: f64,
    pub sigma2_rel_change: f64,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationReport {
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub initial_sigma2: f64,
    pub sigma2_floor: f64,
    pub scene_diameter: f64,
    pub warnings: Vec<Warning>,
    pub params: ModelParams,
}

impl RegistrationReport {
    pub fn iterations_run(&self) -> usize {
        self.iterations.len()
    }

    pub fn total_time(&self) -> Duration {
        self.iterations.iter().map(|r| r.elapsed).sum()
    }

    /// Equality on everything except wall-clock timings.
    pub fn same_numbers(&self, other: &RegistrationReport) -> bool {
        let strip = |r: &RegistrationReport| {
            let mut r = r.clone();
            r.iterations.iter_mut().for_each(|it| it.elapsed = Duration::ZERO);
            r
        };
        strip(self) == strip(other)
    }
}

/// Bounding-box diagonal of all sets under `transforms`.
pub fn scene_diameter(sets: &[PointSet], transforms: &[RigidTransform]) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for (set, t) in sets.iter().zip(transforms) {
        for p in set.points() {
            let q = t.apply(p);
            lo = lo.inf(&q);
            hi = hi.sup(&q);
        }
    }
    (hi - lo).norm()
}

fn build_indices(sets: &[PointSet], transforms: &[RigidTransform], pool: Option<&ThreadPool>) -> Result<Vec<NnIndex>> {
    match pool {
        Some(pool) => pool.install(|| {
            sets.par_iter()
                .zip(transforms.par_iter())
                .map(|(s, t)| NnIndex::build(s, t))
                .collect()
        }),
        None => sets.iter().zip(transforms).map(|(s, t)| NnIndex::build(s, t)).collect(),
    }
}

/// Mean squared nearest-neighbour residual over a random sample of
/// (point, opposite set) pairs, divided by `d`.
pub fn initial_sigma2(sets: &[PointSet], transforms: &[RigidTransform], indices: &[NnIndex], seed: u64) -> f64 {
    let m = sets.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..SIGMA_INIT_SAMPLES {
        let i = rng.random_range(0..m);
        let l = rng.random_range(0..sets[i].len());
        let j = (i + rng.random_range(1..m)) % m;
        let query = transforms[i].apply(&sets[i].points()[l]);
        total += indices[j].nearest_squared(&query).1;
    }
    total / (SIGMA_INIT_SAMPLES as f64 * DIM as f64)
}

/// Runs the EM iteration from `init` until the parameter change drops
/// below `cfg.tolerance` or `cfg.max_iters` iterations have run.
pub fn register(
    sets: &[PointSet],
    init: &[RigidTransform],
    cfg: &EmConfig,
) -> Result<(ModelParams, RegistrationReport)> {
    cfg.validate()?;
    let m = sets.len();
    if m < 2 {
        return Err(Error::TooFewSets(m));
    }
    if init.len() != m {
        return Err(Error::SetCountMismatch {
            expected: m,
            actual: init.len(),
        });
    }
    if sets.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptyPointSet);
    }

    let pool = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let pool = pool.as_ref();

    let diameter = match scene_diameter(sets, init) {
        d if d > 0.0 => d,
        _ => 1.0,
    };
    let floor = cfg.sigma2_floor * diameter * diameter;
    let mut indices = build_indices(sets, init, pool)?;
    let sigma2 = initial_sigma2(sets, init, &indices, cfg.seed).max(floor);
    let mut params = ModelParams::new(init.to_vec(), sigma2, cfg.w)?;

    let mut report = RegistrationReport {
        iterations: Vec::new(),
        converged: false,
        initial_sigma2: sigma2,
        sigma2_floor: floor,
        scene_diameter: diameter,
        warnings: Vec::new(),
        params: params.clone(),
    };

    for iteration in 1..=cfg.max_iters {
        let started = Instant::now();
        if iteration > 1 {
            indices = build_indices(sets, &params.transforms, pool)?;
        }
        let previous = params.clone();
        let mut fields = Vec::with_capacity(m);

        for i in 0..m {
            let table = correspond_with(i, sets, &params, &indices, pool);
            let field = posteriors_with(i, &table, sets, &params, pool)?;
            let pairs = WeightedPairs::from_field(i, &field, sets, &params);
            if pairs.total_weight() < MIN_EFFECTIVE_WEIGHT {
                report.warnings.push(Warning::FrozenTransform { iteration, set: i });
            } else {
                let (transform, ambiguous) = pairs.solve()?;
                if ambiguous {
                    report.warnings.push(Warning::AmbiguousRotation { iteration, set: i });
                }
                params.transforms[i] = transform;
            }
            fields.push(field);
        }

        params.sigma2 = match update_sigma(sets, &params, &fields, floor) {
            Ok(s) => s,
            Err(Error::NoEffectiveCorrespondences { .. }) => previous.sigma2,
            Err(e) => return Err(e),
        };

        let max_transform_delta = previous
            .transforms
            .iter()
            .zip(&params.transforms)
            .map(|(a, b)| a.delta(b, diameter))
            .fold(0.0, f64::max);
        let sigma2_rel_change = (params.sigma2 - previous.sigma2).abs() / previous.sigma2;
        report.iterations.push(IterationRecord {
            iteration,
            objective: objective(sets, &params, &fields),
            sigma2: params.sigma2,
            max_transform_delta,
            sigma2_rel_change,
            elapsed: started.elapsed(),
        });

        if max_transform_delta < cfg.tolerance && sigma2_rel_change < cfg.tolerance {
            report.converged = true;
            break;
        }
    }

    report.params = params.clone();
    Ok((params, report))
}
