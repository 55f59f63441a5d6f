//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Failing criteria are reported but do not fail the run unless
//! `EMPMR_ACCEPTANCE_STRICT=1` is set.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use empmr::cli::{time_iterations, EXIT_CONVERGED};
use empmr::em::{
    e_correspond, e_posteriors, initial_sigma2, register, EmConfig, ModelParams, WeightedPairs,
};
use empmr::geometry::{Point3, PointSet, RigidTransform};
use empmr::io::{self, Format, TransformFile};
use empmr::spatial_index::NnIndex;
use empmr::synthesis::{
    compute_errors, rotation_from_axis_angle, sweep_w, synth_scene, trial_statistics, GroundTruthScene, NoiseSpec,
    SceneSpec, Shape,
};
use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, SymmetricEigen, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
}

fn report(id: usize, pass: bool, detail: String) -> Outcome {
    println!("criterion {id:>2}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, pass, detail }
}

fn point(rng: &mut impl Rng, scale: f64) -> Point3 {
    Point3::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    )
}

fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let axis = Unit::new_normalize(point(rng, 1.0) + Vector3::new(0.0, 0.0, 1e-9));
    *Rotation3::from_axis_angle(&axis, rng.random_range(-3.1..3.1)).matrix()
}

fn horn_rotation(pairs: &WeightedPairs) -> Matrix3<f64> {
    let (cx, cy) = pairs.centroids().unwrap();
    let mut s = Matrix3::zeros();
    for ((x, y), a) in pairs.source.iter().zip(&pairs.target).zip(&pairs.weight) {
        s += *a * (x - cx) * (y - cy).transpose();
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let n = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(n);
    let v = eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned();
    *UnitQuaternion::from_quaternion(Quaternion::new(v[0], v[1], v[2], v[3]))
        .to_rotation_matrix()
        .matrix()
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut worst_det = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(20..=200);
        let r = random_rotation(&mut rng);
        let t = point(&mut rng, 3.0);
        let noise = rng.random_range(0.0..0.5);
        let source: Vec<Point3> = (0..n).map(|_| point(&mut rng, 1.0)).collect();
        let target = source.iter().map(|x| r * x + t + point(&mut rng, 1.0) * noise).collect();
        let weight = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let pairs = WeightedPairs::new(source, target, weight).unwrap();
        let est = pairs.rotation().unwrap().rotation;
        let gap = (pairs.alignment(&horn_rotation(&pairs)) - pairs.alignment(&est)).abs();
        worst = worst.max(gap);
        worst_det = worst_det.max((est.determinant() - 1.0).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    report(
        1,
        worst < 1e-8 && worst_det < 1e-9 && secs < 10.0,
        format!("max objective gap {worst:.2e} (< 1e-8), max |det - 1| {worst_det:.2e}, {secs:.2}s (< 10s)"),
    )
}

/// Fields of every set under random transforms of a random scene.
fn random_scene_pairs(seed: u64) -> (Vec<PointSet>, ModelParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = synth_scene(&SceneSpec {
        shape: [Shape::Sphere, Shape::Box, Shape::Composite][seed as usize % 3],
        sets: 5,
        points_per_set: 400,
        max_rotation_deg: 8.0,
        max_translation: 0.08,
        seed,
        ..Default::default()
    })
    .unwrap();
    let init = scene.identity_init();
    let indices: Vec<NnIndex> = scene.sets.iter().map(|s| NnIndex::build(s, &RigidTransform::identity()).unwrap()).collect();
    let sigma2 = initial_sigma2(&scene.sets, &init, &indices, seed) * rng.random_range(0.05..2.0);
    (scene.sets, ModelParams::new(init, sigma2, 0.01).unwrap())
}

/// Central-difference gradient of `J` in `(omega, t)` where the rotation is
/// perturbed as `exp([omega]x) R`.
fn fd_gradient(pairs: &WeightedPairs, transform: &RigidTransform, h: f64) -> [f64; 6] {
    let eval = |k: usize, s: f64| {
        let mut omega = Vector3::zeros();
        let mut dt = Vector3::zeros();
        if k < 3 {
            omega[k] = s;
        } else {
            dt[k - 3] = s;
        }
        let r = Rotation3::new(omega).matrix() * transform.rotation();
        pairs.cost(&r, &(transform.translation() + dt))
    };
    let mut g = [0.0; 6];
    for (k, slot) in g.iter_mut().enumerate() {
        *slot = (eval(k, h) - eval(k, -h)) / (2.0 * h);
    }
    g
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    let mut instances = 0;
    for seed in 0..20 {
        let (sets, params) = random_scene_pairs(100 + seed);
        let indices: Vec<NnIndex> = sets
            .iter()
            .zip(&params.transforms)
            .map(|(s, t)| NnIndex::build(s, t).unwrap())
            .collect();
        for i in 0..sets.len() {
            let table = e_correspond(i, &sets, &params, &indices);
            let field = e_posteriors(i, &table, &sets, &params).unwrap();
            let pairs = WeightedPairs::from_field(i, &field, &sets, &params);
            let (transform, _) = pairs.solve().unwrap();
            let g = fd_gradient(&pairs, &transform, 1e-6);
            let total = pairs.total_weight();
            let (_, cy) = pairs.centroids().unwrap();
            let spread = (pairs
                .target
                .iter()
                .zip(&pairs.weight)
                .map(|(y, a)| a * (y - cy).norm_squared())
                .sum::<f64>()
                / total)
                .sqrt();
            let rot = Vector3::new(g[0], g[1], g[2]).norm() / (total * spread * spread);
            let trans = Vector3::new(g[3], g[4], g[5]).norm() / (total * spread);
            worst = worst.max(rot).max(trans);
            instances += 1;
        }
    }
    report(2, worst < 1e-8, format!("max relative gradient {worst:.2e} over {instances} M-steps (< 1e-8)"))
}

fn criterion_3() -> Outcome {
    let (sets, params) = random_scene_pairs(7);
    let indices: Vec<NnIndex> = sets.iter().map(|s| NnIndex::build(s, &RigidTransform::identity()).unwrap()).collect();
    let mut worst = 0.0f64;
    let mut points = 0;
    for i in 0..sets.len() {
        let table = e_correspond(i, &sets, &params, &indices);
        let field = e_posteriors(i, &table, &sets, &params).unwrap();
        for l in 0..field.len() {
            let total: f64 = (0..sets.len()).map(|j| field.alpha(l, j)).sum::<f64>() + field.outlier(l);
            worst = worst.max((total - 1.0).abs());
            points += 1;
        }
    }
    report(3, worst <= 1e-12, format!("max |sum alpha + outlier - 1| {worst:.2e} over {points} points (<= 1e-12)"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut ties = 0;
    let mut queries = 0;
    for k in 0..20 {
        let lattice = k % 2 == 0;
        let n = rng.random_range(50..2000);
        let pts: Vec<Point3> = (0..n)
            .map(|_| {
                if lattice {
                    Point3::new(rng.random_range(0..6) as f64, rng.random_range(0..6) as f64, rng.random_range(0..6) as f64)
                } else {
                    point(&mut rng, 1.0)
                }
            })
            .collect();
        let t = if lattice {
            RigidTransform::identity()
        } else {
            RigidTransform::new(random_rotation(&mut rng), point(&mut rng, 1.0)).unwrap()
        };
        let set = PointSet::new(k, pts).unwrap();
        let index = NnIndex::build(&set, &t).unwrap();
        let mapped: Vec<Point3> = set.points().iter().map(|p| t.apply(p)).collect();
        for _ in 0..500 {
            let q = if lattice {
                Point3::new(
                    rng.random_range(-2..14) as f64 * 0.5,
                    rng.random_range(-2..14) as f64 * 0.5,
                    rng.random_range(-2..14) as f64 * 0.5,
                )
            } else {
                point(&mut rng, 2.0)
            };
            let mut best = (usize::MAX, f64::INFINITY);
            let mut count = 0;
            for (h, p) in mapped.iter().enumerate() {
                let d2 = (q - p).norm_squared();
                if d2 < best.1 {
                    best = (h, d2);
                    count = 1;
                } else if d2 == best.1 {
                    count += 1;
                }
            }
            if count > 1 {
                ties += 1;
            }
            if index.nearest_squared(&q) != best {
                mismatches += 1;
            }
            queries += 1;
        }
    }
    report(4, mismatches == 0, format!("{mismatches} mismatches in {queries} queries ({ties} with exact ties)"))
}

/// Criterion-5 scene: unit sphere, 5 views, 10 degrees, 5% of diameter.
fn clean_scene() -> GroundTruthScene {
    let nominal = synth_scene(&SceneSpec {
        shape: Shape::Sphere,
        sets: 5,
        points_per_set: 2000,
        max_rotation_deg: 10.0,
        max_translation: 0.0,
        seed: 0,
        ..Default::default()
    })
    .unwrap();
    synth_scene(&SceneSpec {
        shape: Shape::Sphere,
        sets: 5,
        points_per_set: 2000,
        max_rotation_deg: 10.0,
        max_translation: 0.05 * nominal.scene_diameter,
        seed: 0,
        ..Default::default()
    })
    .unwrap()
}

struct CleanRun {
    e_r: f64,
    objective: Vec<f64>,
}

fn criterion_5(scene: &GroundTruthScene) -> (Outcome, CleanRun) {
    let started = Instant::now();
    let cfg = EmConfig { threads: 4, ..Default::default() };
    let (params, report_) = register(&scene.sets, &scene.identity_init(), &cfg).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let errors = compute_errors(&params.transforms, &scene.truth, true).unwrap();
    let d = scene.scene_diameter;
    let pass = errors.e_r < 1e-3 && errors.e_t < 1e-3 * d && report_.converged && secs < 60.0;
    let outcome = report(
        5,
        pass,
        format!(
            "e_R {:.3e} (< 1e-3), e_t {:.3e} (< {:.3e}), converged {} in {} iterations, {secs:.1}s (< 60s)",
            errors.e_r,
            errors.e_t,
            1e-3 * d,
            report_.converged,
            report_.iterations_run()
        ),
    );
    let run = CleanRun {
        e_r: errors.e_r,
        objective: report_.iterations.iter().map(|it| it.objective).collect(),
    };
    (outcome, run)
}

fn criterion_6(scene: &GroundTruthScene, clean: &CleanRun) -> Outcome {
    let cfg = EmConfig { threads: 4, ..Default::default() };
    let high = trial_statistics(scene, &NoiseSpec { snr_db: 50.0, seed: 50 }, 30, &cfg).unwrap();
    let low = trial_statistics(scene, &NoiseSpec { snr_db: 25.0, seed: 25 }, 30, &cfg).unwrap();
    let bound = 10.0 * clean.e_r;
    let pass = low.mean_e_r >= high.mean_e_r && high.mean_e_r < bound && low.mean_e_r < bound;
    report(
        6,
        pass,
        format!(
            "e_R 50dB {:.3e} +- {:.2e}, 25dB {:.3e} +- {:.2e}; ordering {}; bound 10 x clean = {bound:.3e}",
            high.mean_e_r,
            high.std_e_r,
            low.mean_e_r,
            low.std_e_r,
            low.mean_e_r >= high.mean_e_r
        ),
    )
}

fn criterion_7(scene: &GroundTruthScene) -> Outcome {
    let ws = [0.0005, 0.001, 0.005, 0.01, 0.05];
    let rows = sweep_w(scene, &ws, &EmConfig { threads: 4, ..Default::default() }).unwrap();
    let errs: Vec<f64> = rows.iter().map(|r| r.e_r).collect();
    let max = errs.iter().cloned().fold(f64::MIN, f64::max);
    let min = errs.iter().cloned().fold(f64::MAX, f64::min);
    let ratio = max / min;
    let listed: Vec<String> = errs.iter().map(|e| format!("{e:.2e}")).collect();
    report(7, ratio < 3.0, format!("e_R over w = [{}], max/min {ratio:.3} (< 3)", listed.join(", ")))
}

fn criterion_8(clean: &CleanRun) -> Outcome {
    let mut worst = 0.0f64;
    let mut drops = 0;
    for pair in clean.objective.windows(2) {
        let drop = (pair[0] - pair[1]) / pair[0].abs().max(f64::MIN_POSITIVE);
        if drop > 1e-9 {
            drops += 1;
        }
        worst = worst.max(drop);
    }
    report(
        8,
        drops == 0,
        format!("{drops} decreasing steps in {} iterations, largest relative drop {worst:.2e} (<= 1e-9)", clean.objective.len()),
    )
}

fn criterion_9(scene: &GroundTruthScene, clean: &CleanRun) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut sets = scene.sets.clone();
    let target = &sets[2];
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in target.points() {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let pad = 0.1 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let mut points = target.points().to_vec();
    let junk = target.len() / 10;
    for _ in 0..junk {
        points.push(Point3::new(
            rng.random_range(lo.x..hi.x),
            rng.random_range(lo.y..hi.y),
            rng.random_range(lo.z..hi.z),
        ));
    }
    sets[2] = PointSet::new(2, points).unwrap();
    let cfg = EmConfig { w: 0.01, threads: 4, ..Default::default() };
    let (params, _) = register(&sets, &scene.identity_init(), &cfg).unwrap();
    let errors = compute_errors(&params.transforms, &scene.truth, true).unwrap();
    let bound = 5.0 * clean.e_r;
    report(
        9,
        errors.e_r < bound,
        format!("{junk} junk points in set 2: e_R {:.3e} (< 5 x clean = {bound:.3e})", errors.e_r),
    )
}

fn per_iteration(m: usize, n: usize) -> f64 {
    let scene = synth_scene(&SceneSpec {
        shape: Shape::Composite,
        sets: m,
        points_per_set: n,
        max_rotation_deg: 2.0,
        max_translation: 0.02,
        seed: 10,
        ..Default::default()
    })
    .unwrap();
    (0..3)
        .map(|_| time_iterations(&scene.sets, 5, 1, 0).unwrap().1)
        .fold(f64::INFINITY, f64::min)
}

fn criterion_10() -> Outcome {
    let sizes: Vec<f64> = [1000, 2000, 4000, 8000].iter().map(|&n| per_iteration(4, n)).collect();
    let counts: Vec<f64> = [2, 4, 8].iter().map(|&m| per_iteration(m, 2000)).collect();
    let size_ratios: Vec<f64> = sizes.windows(2).map(|w| w[1] / w[0]).collect();
    let count_ratios: Vec<f64> = counts.windows(2).map(|w| w[1] / w[0]).collect();
    let pass = size_ratios.iter().all(|&r| r < 3.0) && count_ratios.iter().all(|&r| r < 5.0);
    let fmt = |v: &[f64]| v.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(", ");
    report(
        10,
        pass,
        format!(
            "points 1k->8k (M = 4) ratios [{}] (< 3); sets 2->4->8 (2k points) ratios [{}] (< 5)",
            fmt(&size_ratios),
            fmt(&count_ratios)
        ),
    )
}

fn run_cli(dir: &Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_empmr"))
        .args(args)
        .current_dir(dir)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env_remove("EMPMR_THREADS")
        .output()
        .expect("run empmr")
        .status
        .code()
        .unwrap_or(-1)
}

fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let synth = [
        "synth", "--shape", "composite", "--sets", "4", "--points", "800", "--perturb-deg", "3",
        "--perturb-trans", "0.03", "--seed", "5", "--out-dir", "scene",
    ];
    assert_eq!(run_cli(dir, &synth), EXIT_CONVERGED as i32);
    let mut register_args = vec!["register", "--inputs"];
    let inputs: Vec<String> = (0..4).map(|i| format!("scene/set_{i:02}.ply")).collect();
    register_args.extend(inputs.iter().map(String::as_str));
    register_args.extend(["--out", "est.toml", "--trace", "trace.csv"]);
    run_cli(dir, &register_args);
    ["scene/manifest.toml", "scene/truth.toml", "est.toml", "est.manifest.toml"]
        .iter()
        .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
        .chain(inputs.iter().map(|f| (f.clone(), std::fs::read(dir.join(f)).unwrap())))
        .collect()
}

fn criterion_11() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pts: Vec<Point3> = (0..1000)
        .map(|_| Point3::new(rng.random_range(-1e4..1e4), rng.random::<f64>() * 1e-9, rng.random_range(-1.0..1.0)))
        .collect();
    let set = PointSet::new(0, pts).unwrap();
    let mut lossy = Vec::new();
    for (name, format) in [("p.ply", Format::PlyBinaryLe), ("q.ply", Format::PlyAscii), ("r.xyz", Format::Xyz)] {
        let path = a.path().join(name);
        io::write_point_set(&set, &path, format).unwrap();
        if io::read_point_set(&path, None, 1.0).unwrap().points() != set.points() {
            lossy.push(name.to_string());
        }
    }
    let transforms: Vec<RigidTransform> = (0..8)
        .map(|_| {
            let r = rotation_from_axis_angle(&point(&mut rng, 1.0), rng.random_range(-3.0..3.0));
            RigidTransform::new(*r.rotation(), point(&mut rng, 10.0)).unwrap()
        })
        .collect();
    let mut file = TransformFile::from_transforms(&transforms, None);
    file.sigma2 = Some(rng.random());
    file.metadata.insert("note".into(), "kept".into());
    let path = a.path().join("t.toml");
    io::write_transforms(&file, &path).unwrap();
    let back = io::read_transforms(&path).unwrap();
    let max_delta = back
        .rigid_transforms()
        .iter()
        .zip(&transforms)
        .map(|(x, y)| {
            (x.rotation() - y.rotation())
                .abs()
                .max()
                .max((x.translation() - y.translation()).abs().max())
        })
        .fold(0.0, f64::max);
    if back != file || max_delta >= 1e-15 {
        lossy.push("t.toml".into());
    }
    report(
        11,
        differing.is_empty() && lossy.is_empty(),
        format!(
            "{} of {} artefacts differ between identical runs {:?}; lossy round trips {:?}; transform max delta {max_delta:.1e}",
            differing.len(),
            first.len(),
            differing,
            lossy
        ),
    )
}

fn main() {
    let strict = std::env::var("EMPMR_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let started = Instant::now();
    let mut outcomes = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4()];
    let scene = clean_scene();
    let (c5, clean) = criterion_5(&scene);
    outcomes.push(c5);
    outcomes.push(criterion_6(&scene, &clean));
    outcomes.push(criterion_7(&scene));
    outcomes.push(criterion_8(&clean));
    outcomes.push(criterion_9(&scene, &clean));
    outcomes.push(criterion_10());
    outcomes.push(criterion_11());

    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!(
        "acceptance: {} of {} criteria pass ({:.0}s)",
        outcomes.len() - failed.len(),
        outcomes.len(),
        started.elapsed().as_secs_f64()
    );
    for o in &failed {
        println!("  failing: criterion {} ({})", o.id, o.detail);
    }
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
