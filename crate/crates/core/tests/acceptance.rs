//! Acceptance run: one `PASS`/`FAIL`/`SKIP` line per criterion, nonzero exit
//! if any gating criterion fails.
//!
//! The desk-scale criteria train the sphere/shell fixture through the full
//! pipeline in `$CARGO_TARGET_TMPDIR/acceptance_desk`. Training resumes from
//! the checkpoint there, so a finished run is re-evaluated without
//! retraining; delete the directory to start over.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxfuse::degrade::{kernel_for, DegradeMode};
use voxfuse::harness::{run_case_study, CheckpointScore, Consistency, ExperimentConfig, RunDir};
use voxfuse::metrics::{
    chord_length_distribution, interphase_surface_area, subvolume_distribution, tpb_density, transport,
    two_point_correlation, volume_fraction, MetricSpec, MetricsReport, SolverConfig,
};
use voxfuse::netspec::{build_generator_spec, build_generator_spec_with, crop_and_slice, Generator, SLICE_CROP};
use voxfuse::synth::{boundary_layers, generate_volume, Model, SynthRequest};
use voxfuse::trainer::{generator_loss, train, Downsampler, TrainConfig};
use voxfuse::volgrid::{
    extract_slice, load_volume, one_hot_encode, Axis, OneHotField, PhaseMapping, PhaseVolume, ScaleFactor,
};
use voxfuse::{degrade::HrSliceBank, fixtures};
use voxfuse_autograd::{grad, Tensor, Var};

/// Tolerances and limits, each pinned by its criterion.
mod tol {
    use std::time::Duration;

    /// Oracle comparisons are exact.
    pub const ORACLE_VOLUMES: usize = 120;
    pub const ORACLE_MAX_SIDE: usize = 12;
    pub const FAST_RUNTIME: Duration = Duration::from_secs(60);

    /// Transport efficiencies of dense and channel volumes.
    pub const TRANSPORT_ABS: f64 = 1e-3;
    /// Relative spread of plane fluxes at convergence.
    pub const FLUX_SPREAD: f64 = 0.01;

    /// Relative error of analytic vs central-difference gradients.
    pub const GRAD_REL: f64 = 1e-4;
    pub const FD_STEP: f64 = 1e-6;
    /// Deviation of a hard constant field from itself after downsampling.
    pub const FIXED_POINT_ABS: f64 = 1e-6;

    /// Voxel-wise MSE of generated volumes vs the low-res input.
    pub const VOXELWISE_MSE: f64 = 0.01;
    /// Absolute volume fraction gap vs the HR slice.
    pub const VF_ABS: f64 = 0.05;
    /// Relative surface-area gap vs the ground truth.
    pub const SA_REL: f64 = 0.20;
    pub const SA_CUBES: usize = 64;
    pub const SA_CUBE: usize = 64;
    pub const MAX_ITERATIONS: usize = 20_000;
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = Box<dyn FnOnce() -> Outcome>;

fn pal(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i}")).collect()
}

// ---------------------------------------------------------------------------
// 1. metrics vs brute-force oracles

fn random_volume(rng: &mut ChaCha8Rng) -> PhaseVolume {
    let dims = [0; 3].map(|_| rng.random_range(2..=tol::ORACLE_MAX_SIDE));
    let n: usize = dims.iter().product();
    let smooth = rng.random_bool(0.5);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
    if smooth {
        // runs along x so chords longer than one voxel are common
        for i in 1..n {
            if i % dims[0] != 0 && rng.random_bool(0.7) {
                labels[i] = labels[i - 1];
            }
        }
    }
    PhaseVolume::new(dims, 1.0, labels, pal(3)).unwrap()
}

fn at(v: &PhaseVolume, c: [usize; 3]) -> u8 {
    v.get(c[0], c[1], c[2])
}

fn sites(dims: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    (0..dims[2]).flat_map(move |z| (0..dims[1]).flat_map(move |y| (0..dims[0]).map(move |x| [x, y, z])))
}

fn step(c: [usize; 3], axis: usize, d: usize) -> [usize; 3] {
    let mut c = c;
    c[axis] += d;
    c
}

fn oracle_vf(v: &PhaseVolume, p: u8) -> f64 {
    sites(v.dims()).filter(|&c| at(v, c) == p).count() as f64 / sites(v.dims()).count() as f64
}

/// Every unordered face-adjacent pair, visited from both ends.
fn oracle_sa(v: &PhaseVolume, a: u8, b: u8) -> f64 {
    let d = v.dims();
    let (mut hits, mut pairs) = (0usize, 0usize);
    for c in sites(d) {
        for axis in 0..3 {
            for sign in [-1isize, 1] {
                let q = c[axis] as isize + sign;
                if q < 0 || q >= d[axis] as isize {
                    continue;
                }
                let mut n = c;
                n[axis] = q as usize;
                pairs += 1;
                let (l, m) = (at(v, c), at(v, n));
                if (l == a && m == b) || (l == b && m == a) {
                    hits += 1;
                }
            }
        }
    }
    if pairs == 0 { 0.0 } else { (hits / 2) as f64 / (pairs / 2) as f64 }
}

/// Every 2×2 voxel square in every plane; a TPB edge sees three distinct labels.
fn oracle_tpb(v: &PhaseVolume) -> f64 {
    let d = v.dims();
    let (mut hits, mut edges) = (0usize, 0usize);
    for c in sites(d) {
        for (u, w) in [(0, 1), (1, 2), (0, 2)] {
            if c[u] + 1 >= d[u] || c[w] + 1 >= d[w] {
                continue;
            }
            edges += 1;
            let set: HashSet<u8> = [c, step(c, u, 1), step(c, w, 1), step(step(c, u, 1), w, 1)].iter().map(|&s| at(v, s)).collect();
            if set.len() == 3 {
                hits += 1;
            }
        }
    }
    if edges == 0 { 0.0 } else { hits as f64 / edges as f64 }
}

fn oracle_s2(v: &PhaseVolume, a: u8, b: u8, axis: usize, dmax: usize) -> Vec<f64> {
    let d = v.dims();
    (0..=dmax)
        .map(|lag| {
            let (mut hits, mut pairs) = (0usize, 0usize);
            for c in sites(d).filter(|c| c[axis] + lag < d[axis]) {
                pairs += 1;
                if at(v, c) == a && at(v, step(c, axis, lag)) == b {
                    hits += 1;
                }
            }
            hits as f64 / pairs as f64
        })
        .collect()
}

/// Per voxel: walk both ways to find its run; uncensored runs of length ≤ dmax
/// contribute one unit of mass at their length.
fn oracle_cld(v: &PhaseVolume, p: u8, axis: usize, dmax: usize) -> Vec<f64> {
    let d = v.dims();
    let mut mass = vec![0usize; dmax + 1];
    let mut total = 0usize;
    for c in sites(d).filter(|&c| at(v, c) == p) {
        total += 1;
        let mut lo = c[axis];
        while lo > 0 && at(v, { let mut s = c; s[axis] = lo - 1; s }) == p {
            lo -= 1;
        }
        let mut hi = c[axis];
        while hi + 1 < d[axis] && at(v, step({ let mut s = c; s[axis] = hi; s }, axis, 1)) == p {
            hi += 1;
        }
        let len = hi - lo + 1;
        if lo > 0 && hi + 1 < d[axis] && len <= dmax {
            mass[len] += 1;
        }
    }
    if total == 0 {
        return vec![0.0; dmax + 1];
    }
    mass.iter().map(|&m| m as f64 / total as f64).collect()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = Vec::new();
    let axes = [Axis::X, Axis::Y, Axis::Z];
    for k in 0..tol::ORACLE_VOLUMES {
        let v = random_volume(&mut rng);
        let mut bad = |what: String| mismatches.push(format!("volume {k} {:?}: {what}", v.dims()));
        for p in 0..3u8 {
            if volume_fraction(&v, p as usize).unwrap() != oracle_vf(&v, p) {
                bad(format!("vf {p}"));
            }
        }
        for (a, b) in [(0u8, 1u8), (0, 2), (1, 2)] {
            if interphase_surface_area(&v, a as usize, b as usize).unwrap() != oracle_sa(&v, a, b) {
                bad(format!("sa {a}|{b}"));
            }
        }
        if tpb_density(&v).unwrap() != oracle_tpb(&v) {
            bad("tpb".into());
        }
        for (ai, &axis) in axes.iter().enumerate() {
            let dmax = v.dims()[ai] - 1;
            for (a, b) in [(0u8, 0u8), (1, 2), (2, 1)] {
                if two_point_correlation(&v, a as usize, b as usize, axis, dmax).unwrap() != oracle_s2(&v, a, b, ai, dmax) {
                    bad(format!("s2 {a},{b} along {axis:?}"));
                }
            }
            for p in 0..3u8 {
                if chord_length_distribution(&v, p as usize, axis, dmax).unwrap() != oracle_cld(&v, p, ai, dmax) {
                    bad(format!("cld {p} along {axis:?}"));
                }
            }
        }
    }
    let el = t.elapsed();
    let pass = mismatches.is_empty() && el < tol::FAST_RUNTIME;
    outcome(pass, format!("{} volumes, {} mismatches{}, {el:.1?}", tol::ORACLE_VOLUMES, mismatches.len(), mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default()))
}

// ---------------------------------------------------------------------------
// 2. transport solver

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let cfg = SolverConfig::default();
    let dense = PhaseVolume::new([16; 3], 1.0, vec![0; 4096], pal(2)).unwrap();
    let e_dense = transport(&dense, 0, Axis::Z, &cfg).unwrap().efficiency;
    let channel = PhaseVolume::from_fn([16; 3], 1.0, pal(2), |x, y, _| (x < 8 && y < 8) as u8).unwrap();
    let e_chan = transport(&channel, 1, Axis::Z, &cfg).unwrap().efficiency;
    let blocked = PhaseVolume::from_fn([12; 3], 1.0, pal(2), |_, _, z| (z != 6) as u8).unwrap();
    let e_block = transport(&blocked, 1, Axis::Z, &cfg).unwrap().efficiency;
    let porous = fixtures::spheres(24, 3).unwrap();
    let r = transport(&porous, 0, Axis::Z, &cfg).unwrap();
    let spread = r.flux_spread();
    let el = t.elapsed();
    let pass = (e_dense - 1.0).abs() <= tol::TRANSPORT_ABS
        && (e_chan - 0.25).abs() <= tol::TRANSPORT_ABS
        && e_block == 0.0
        && r.efficiency > 0.0
        && spread <= tol::FLUX_SPREAD
        && el < tol::FAST_RUNTIME;
    outcome(pass, format!("dense {e_dense:.5}, channel {e_chan:.5}, blocked {e_block}, porous flux spread {spread:.2e}, {el:.1?}"))
}

// ---------------------------------------------------------------------------
// 3. blur kernels

fn criterion_3() -> Outcome {
    let cases = [(4.0, 3usize, 0.8), (8.0, 7, 1.4), (1.6, 1, 0.5)];
    let mut pass = true;
    let mut detail = Vec::new();
    for (sf, k, sigma) in cases {
        let b = kernel_for(ScaleFactor::new(sf).unwrap());
        pass &= b.k == k && (b.sigma - sigma).abs() < 1e-12;
        detail.push(format!("sf {sf} → k {} σ {}", b.k, b.sigma));
    }
    outcome(pass, detail.join(", "))
}

// ---------------------------------------------------------------------------
// 4. differentiable downsampler

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let merge = PhaseMapping::new(vec![0, 1, 0]).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (sf, mode, temp) in [(2.0, DegradeMode::UnderResolved, 0.05), (4.0, DegradeMode::UnderResolved, 0.5), (2.0, DegradeMode::UnderSampled, 0.2)] {
        let sf = ScaleFactor::new(sf).unwrap();
        let ds = Downsampler::<f64>::new([8, 8, 8], sf, mode, &merge, temp).unwrap();
        let shape = [1, 3, 8, 8, 8];
        let x0: Vec<f64> = (0..1536).map(|_| rng.random::<f64>()).collect();
        let out_len = ds.apply(&Var::constant(Tensor::from_vec(&shape, x0.clone()))).value().len();
        let w = Rc::new(Var::constant(Tensor::from_vec(
            ds.apply(&Var::constant(Tensor::from_vec(&shape, x0.clone()))).shape(),
            (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )));
        let f = |x: &Var<f64>| ds.apply(x).mul(&w).sum_all();
        let x = Var::leaf(Tensor::from_vec(&shape, x0.clone()));
        let g = grad(&[f(&x)], &[None], &[x], false).remove(0).value().clone();
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p[i] += tol::FD_STEP;
            let up = f(&Var::constant(Tensor::from_vec(&shape, p.clone()))).item();
            p[i] -= 2.0 * tol::FD_STEP;
            let dn = f(&Var::constant(Tensor::from_vec(&shape, p))).item();
            let fd = (up - dn) / (2.0 * tol::FD_STEP);
            let an = g.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    // constant hard fields map onto themselves
    let mut fixed = 0.0f64;
    for phase in 0..2u8 {
        let v = PhaseVolume::new([8; 3], 1.0, vec![phase; 512], pal(2)).unwrap();
        let ds = Downsampler::<f64>::new([8, 8, 8], ScaleFactor::new(4.0).unwrap(), DegradeMode::UnderResolved, &PhaseMapping::identity(2), 0.05).unwrap();
        let out = ds.apply(&Var::constant(one_hot_encode(&v).into_tensor().reshaped(&[1, 2, 8, 8, 8])));
        let field = OneHotField::from_tensor(out.value().clone().reshaped(&[2, 2, 2, 2])).unwrap();
        for s in 0..field.sites() {
            for c in 0..2 {
                fixed = fixed.max((field.value(c, s) - (c == phase as usize) as u8 as f64).abs());
            }
        }
    }
    let pass = worst <= tol::GRAD_REL && fixed <= tol::FIXED_POINT_ABS;
    outcome(pass, format!("{checked} gradient entries, worst relative error {worst:.2e}; fixed-point deviation {fixed:.1e}"))
}

// ---------------------------------------------------------------------------
// 5. training mechanics

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = PhaseVolume::new([64; 3], 1.0, (0..64 * 64 * 64).map(|_| rng.random_range(0..3)).collect(), pal(3)).unwrap();
    let patches = crop_and_slice(&one_hot_encode(&v)).unwrap();
    let shapes_ok = patches.iter().all(|(_, p)| p.spatial() == [56, 56]);

    let hr = fixtures::spheres(64, 2).unwrap();
    let sf = ScaleFactor::new(4.0).unwrap();
    let merge = fixtures::lr_merge(fixtures::FixtureKind::Spheres);
    let lr = voxfuse::degrade::simulate_low_res(&hr, sf, &merge, &voxfuse::degrade::IntensityMap::binary(), DegradeMode::UnderResolved).unwrap();
    let bank = HrSliceBank::new(vec![extract_slice(&hr, Axis::Z, 32).unwrap()], false, false).unwrap();
    let cfg = TrainConfig {
        sf,
        merge_map: Some(merge),
        iterations: 20,
        batch_size: 1,
        hr_cube: 16,
        critic_slices: Some(2),
        monitor_interval: 10,
        checkpoint_interval: 100,
        generator_widths: vec![4, 4, 4],
        critic_widths: vec![4, 4],
        ..TrainConfig::default()
    };
    let s = train(&lr, &bank, &cfg, 3, None).unwrap();
    let ratio = s.critic_updates as f64 / s.generator_updates as f64;

    let scores = Var::constant(Tensor::from_vec(&[2], vec![0.5, 1.5]));
    let g = |l: f64| generator_loss(&scores, &Var::scalar(l), 0.005, 10.0).item();
    let below = g(0.005 - 1e-9) == -1.0;
    let at_b = (g(0.005) - (-1.0 + 10.0 * 0.005)).abs() < 1e-12;
    let above = (g(0.02) - (-1.0 + 0.2)).abs() < 1e-12;
    let pass = patches.len() == 168 && shapes_ok && ratio == 5.0 && below && at_b && above && SLICE_CROP == 4;
    outcome(
        pass,
        format!(
            "{} patches of 56² ({shapes_ok}); {} critic / {} generator updates = {ratio}; loss branch below/at/above b: {below}/{at_b}/{above}",
            patches.len(),
            s.critic_updates,
            s.generator_updates
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. size law, cropping, tiling

fn tiny_model(sf: f64, seed: u64) -> Model {
    let sf = ScaleFactor::new(sf).unwrap();
    let spec = build_generator_spec_with(sf, 2, 3, 1, &[6, 5, 4]).unwrap();
    Model { generator: Generator::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)), hr_palette: pal(3), lr_palette: pal(2) }
}

fn criterion_6() -> Outcome {
    let sf = ScaleFactor::new(4.0).unwrap();
    let full = build_generator_spec(sf, 2, 3, 1).unwrap();
    let raw_side = full.output_side(128);
    let cropped = raw_side.map(|s| s - 2 * boundary_layers(sf));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = tiny_model(4.0, 1);
    let small = PhaseVolume::new([16; 3], 1.0, (0..4096).map(|_| rng.random_range(0..2)).collect(), pal(2)).unwrap();
    let run_raw = generate_volume(&SynthRequest { crop_boundary: false, ..SynthRequest::new(&model, &small, 1) }).unwrap().dims();
    let run_crop = generate_volume(&SynthRequest::new(&model, &small, 1)).unwrap().dims();

    let lr = PhaseVolume::new([32; 3], 1.0, (0..32 * 32 * 32).map(|_| rng.random_range(0..2)).collect(), pal(2)).unwrap();
    let single = generate_volume(&SynthRequest::new(&model, &lr, 4)).unwrap();
    let tiled = generate_volume(&SynthRequest { tile: Some(8), ..SynthRequest::new(&model, &lr, 4) }).unwrap();
    let same = single == tiled;
    let pass = raw_side == Some(512) && cropped == Some(504) && run_raw == [64; 3] && run_crop == [56; 3] && same;
    outcome(
        pass,
        format!("128³ → {raw_side:?} raw, {cropped:?} cropped; 16³ run → {run_raw:?} / {run_crop:?}; tiled 32³ bit-exact: {same}"),
    )
}

// ---------------------------------------------------------------------------
// 7–9. desk-scale run

struct Desk {
    cfg: ExperimentConfig,
    run: RunDir,
    elapsed: Duration,
}

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_spheres.toml")
}

fn desk_run() -> Result<Desk, String> {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_desk");
    let cfg = ExperimentConfig::load(&desk_config()).map_err(|e| e.to_string())?;
    let run = RunDir::new(&root);
    let t = Instant::now();
    run_case_study(&cfg, &run).map_err(|e| e.to_string())?;
    Ok(Desk { cfg, run, elapsed: t.elapsed() })
}

fn consistency(d: &Desk) -> Vec<Consistency> {
    serde_json::from_str(&std::fs::read_to_string(d.run.generated().join("consistency.json")).unwrap()).unwrap()
}

fn criterion_7(d: &Desk) -> Outcome {
    let c = consistency(d);
    let worst_mse = c.iter().map(|c| c.voxelwise_mse).fold(0.0, f64::max);
    let truth = load_volume(&d.run.truth()).unwrap();
    let slice = extract_slice(&truth, Axis::Z, truth.dims()[2] / 2).unwrap();
    let n_px = slice.labels().len() as f64;
    let slice_vf: Vec<f64> = slice.phase_counts().iter().map(|&c| c as f64 / n_px).collect();
    let mut vf_gap = 0.0f64;
    let mut sa_gap = 0.0f64;
    let mut sa_detail = Vec::new();
    for seed in d.cfg.seeds() {
        let sr = load_volume(&d.run.generated_volume(seed)).unwrap();
        for (p, &want) in slice_vf.iter().enumerate() {
            vf_gap = vf_gap.max((volume_fraction(&sr, p).unwrap() - want).abs());
        }
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let m = MetricSpec::SurfaceArea { a, b };
            let got = subvolume_distribution(&sr, &m, tol::SA_CUBES, tol::SA_CUBE, 7).unwrap().mean;
            let want = subvolume_distribution(&truth, &m, tol::SA_CUBES, tol::SA_CUBE, 7).unwrap().mean;
            let rel = (got - want).abs() / want;
            sa_gap = sa_gap.max(rel);
            if seed == d.cfg.seeds()[0] {
                sa_detail.push(format!("{a}|{b} {got:.4} vs {want:.4}"));
            }
        }
    }
    let iters = d.cfg.train.iterations;
    let chosen = std::fs::read_to_string(d.run.generated().join("checkpoint_scores.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<Vec<CheckpointScore>>(&t).ok())
        .and_then(|s| s.into_iter().min_by(|a, b| a.score.total_cmp(&b.score)))
        .map_or("latest".to_string(), |s| format!("checkpoint {}", s.iteration));
    let pass = worst_mse <= tol::VOXELWISE_MSE && vf_gap <= tol::VF_ABS && sa_gap <= tol::SA_REL && iters <= tol::MAX_ITERATIONS;
    outcome(
        pass,
        format!(
            "{iters} iterations, {:.0?}, {chosen}; (a) mse {worst_mse:.4} (b) vf gap {vf_gap:.3} (c) sa rel gap {sa_gap:.3} [{}]",
            d.elapsed,
            sa_detail.join(", ")
        ),
    )
}

fn criterion_8(d: &Desk) -> Outcome {
    let seeds = d.cfg.seeds();
    let a = load_volume(&d.run.generated_volume(seeds[0])).unwrap();
    let b = load_volume(&d.run.generated_volume(seeds[1])).unwrap();
    let differ = a.labels().iter().zip(b.labels()).filter(|(x, y)| x != y).count();
    let c = consistency(d);
    let mse_ok = c.iter().all(|c| c.voxelwise_mse <= tol::VOXELWISE_MSE);

    // noise ablation: a short run with no noise channels completes the pipeline
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_no_noise");
    let _ = std::fs::remove_dir_all(&root);
    let text = std::fs::read_to_string(desk_config()).unwrap()
        .replace("iterations = ", "noise_channels = 0\niterations = 20 # ")
        .replace("checkpoint = \"inspect\"", "checkpoint = \"latest\"");
    let ablation = ExperimentConfig::parse(&text, desk_config().parent().unwrap())
        .map_err(|e| e.to_string())
        .and_then(|cfg| run_case_study(&cfg, &RunDir::new(&root)).map_err(|e| e.to_string()));
    let pass = differ >= 1 && mse_ok && ablation.is_ok();
    outcome(
        pass,
        format!("seeds {seeds:?} differ in {differ} voxels, mse {:?}; ablation: {}", c.iter().map(|c| c.voxelwise_mse).collect::<Vec<_>>(), ablation.map(|_| "completed".into()).unwrap_or_else(|e| e)),
    )
}

fn criterion_9(d: &Desk) -> Outcome {
    let load = |id: &str| MetricsReport::from_json(&std::fs::read_to_string(d.run.reports().join(format!("{id}.json"))).unwrap()).unwrap();
    let truth = load("truth");
    let blurred = &truth.curves["fft_blurred"];
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in d.cfg.seeds() {
        let sr = &load(&format!("sr_seed{seed}")).curves["fft"];
        let n = sr.len().min(blurred.len());
        let band = n / 2..n;
        let margin = band.clone().map(|r| sr[r] - blurred[r]).fold(f64::INFINITY, f64::min);
        pass &= margin > 0.0;
        detail.push(format!("seed {seed}: min margin {margin:.3} over bins {band:?}"));
    }
    outcome(pass, detail.join("; "))
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    })
}

fn main() {
    let mut checks: Vec<(&str, &str, Check)> = vec![
        ("1", "metrics equal brute-force oracles", Box::new(criterion_1)),
        ("2", "transport solver correctness", Box::new(criterion_2)),
        ("3", "blur kernel formulas", Box::new(criterion_3)),
        ("4", "downsampler gradients and fixed points", Box::new(criterion_4)),
        ("5", "slicing, update ratio, loss branch", Box::new(criterion_5)),
        ("6", "size law, cropping, tiling", Box::new(criterion_6)),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |id: &str| filter.as_deref().is_none_or(|f| f.split(',').any(|x| x == id));
    let mut failed = 0;
    let mut report = |id: &str, name: &str, o: Outcome| {
        println!("{} {id:>2}  {name:<40} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    };
    for (id, name, check) in checks.drain(..) {
        if wanted(id) {
            report(id, name, guarded(check));
        }
    }
    if ["7", "8", "9"].iter().any(|id| wanted(id)) {
        match catch_unwind(desk_run).unwrap_or_else(|_| Err("panicked".into())) {
            Ok(d) => {
                let desk: [(&str, &str, &dyn Fn(&Desk) -> Outcome); 3] = [
                    ("7", "desk-scale end-to-end quality", &criterion_7),
                    ("8", "stochasticity and noise ablation", &criterion_8),
                    ("9", "spectral resolution gain", &criterion_9),
                ];
                for (id, name, f) in desk {
                    if wanted(id) {
                        report(id, name, guarded(|| f(&d)));
                    }
                }
            }
            Err(e) => {
                for (id, name) in [("7", "desk-scale end-to-end quality"), ("8", "stochasticity and noise ablation"), ("9", "spectral resolution gain")] {
                    if wanted(id) {
                        report(id, name, outcome(false, format!("desk run failed: {e}")));
                    }
                }
            }
        }
    }
    if wanted("10") {
        println!("SKIP 10  {:<40} public dataset not available offline; not gating", "subvolume TPB of downloaded dataset");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
