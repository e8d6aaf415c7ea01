//! Mesostructural metrics: phase fractions, interfaces, transport, triple
//! phase boundaries, correlation functions and spectral profiles.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{Axis, PhaseVolume};

fn check_phase(v: &PhaseVolume, phase: usize) -> Result<()> {
    if phase < v.n_phases() { Ok(()) } else { Err(Error::UnknownPhase(phase)) }
}

fn stride(dims: [usize; 3], axis: Axis) -> usize {
    match axis {
        Axis::X => 1,
        Axis::Y => dims[0],
        Axis::Z => dims[0] * dims[1],
    }
}

/// Calls `f(start, step, len)` for every line of voxels running along `axis`.
fn for_each_line(dims: [usize; 3], axis: Axis, mut f: impl FnMut(usize, usize, usize)) {
    let a = axis.index();
    let step = stride(dims, axis);
    let len = dims[a];
    for z in 0..if a == 2 { 1 } else { dims[2] } {
        for y in 0..if a == 1 { 1 } else { dims[1] } {
            for x in 0..if a == 0 { 1 } else { dims[0] } {
                f(x + dims[0] * (y + dims[1] * z), step, len);
            }
        }
    }
}

pub fn volume_fraction(v: &PhaseVolume, phase: usize) -> Result<f64> {
    check_phase(v, phase)?;
    let n = v.labels().iter().filter(|&&l| l as usize == phase).count();
    Ok(n as f64 / v.len() as f64)
}

/// Number of 6-connected internal voxel pairs.
pub fn internal_pairs(dims: [usize; 3]) -> usize {
    let [nx, ny, nz] = dims;
    (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1)
}

/// Fraction of internal adjacent voxel pairs whose labels are `{a, b}`.
pub fn interphase_surface_area(v: &PhaseVolume, a: usize, b: usize) -> Result<f64> {
    check_phase(v, a)?;
    check_phase(v, b)?;
    if a == b {
        return Err(Error::Config(format!("surface area needs two distinct phases, got {a} twice")));
    }
    let total = internal_pairs(v.dims());
    if total == 0 {
        return Ok(0.0);
    }
    let (a, b) = (a as u8, b as u8);
    let l = v.labels();
    let mut count = 0usize;
    for axis in Axis::ALL {
        for_each_line(v.dims(), axis, |start, step, len| {
            for i in 0..len.saturating_sub(1) {
                let (p, q) = (l[start + i * step], l[start + (i + 1) * step]);
                if (p == a && q == b) || (p == b && q == a) {
                    count += 1;
                }
            }
        });
    }
    Ok(count as f64 / total as f64)
}

/// Number of internal voxel edges, each shared by four voxels.
pub fn internal_edges(dims: [usize; 3]) -> usize {
    let [nx, ny, nz] = dims;
    let m = |n: usize| n.saturating_sub(1);
    nx * m(ny) * m(nz) + m(nx) * ny * m(nz) + m(nx) * m(ny) * nz
}

/// Fraction of internal voxel edges whose four voxels include all three phases.
pub fn tpb_density(v: &PhaseVolume) -> Result<f64> {
    if v.n_phases() != 3 {
        return Err(Error::Config(format!("triple phase boundaries need 3 phases, got {}", v.n_phases())));
    }
    let total = internal_edges(v.dims());
    if total == 0 {
        return Ok(0.0);
    }
    let [nx, ny, nz] = v.dims();
    let l = v.labels();
    let mut count = 0usize;
    let st = [1, nx, nx * ny];
    let dims = [nx, ny, nz];
    for axis in 0..3 {
        // the edge runs along `axis`; its four voxels step along the other two
        let (t1, t2) = (st[(axis + 1) % 3], st[(axis + 2) % 3]);
        let mut hi = dims;
        hi[(axis + 1) % 3] -= 1;
        hi[(axis + 2) % 3] -= 1;
        for z in 0..hi[2] {
            for y in 0..hi[1] {
                for x in 0..hi[0] {
                    let i = x + nx * (y + ny * z);
                    let mask = (1u8 << l[i]) | (1u8 << l[i + t1]) | (1u8 << l[i + t2]) | (1u8 << l[i + t1 + t2]);
                    if mask == 0b111 {
                        count += 1;
                    }
                }
            }
        }
    }
    Ok(count as f64 / total as f64)
}

/// `S[d] = P(label(x) == a and label(x + d·axis) == b)` over all valid pairs, `d = 0..=dmax`.
pub fn two_point_correlation(v: &PhaseVolume, a: usize, b: usize, axis: Axis, dmax: usize) -> Result<Vec<f64>> {
    check_phase(v, a)?;
    check_phase(v, b)?;
    let len = v.dims()[axis.index()];
    if dmax >= len {
        return Err(Error::TooSmall(format!("dmax {dmax} must be below the axis length {len}")));
    }
    let (a, b) = (a as u8, b as u8);
    let l = v.labels();
    let mut counts = vec![0usize; dmax + 1];
    let mut lines = 0usize;
    for_each_line(v.dims(), axis, |start, step, len| {
        lines += 1;
        for i in 0..len {
            if l[start + i * step] != a {
                continue;
            }
            for (d, c) in counts.iter_mut().enumerate().take((len - i).min(dmax + 1)) {
                if l[start + (i + d) * step] == b {
                    *c += 1;
                }
            }
        }
    });
    Ok(counts.iter().enumerate().map(|(d, &c)| c as f64 / (lines * (len - d)) as f64).collect())
}

/// Probability that a voxel of `phase` lies in a maximal run of length `d`
/// along `axis`; index `d` of the result, `d = 0..=dmax` (entry 0 is zero).
/// Runs touching the volume boundary are left out unless `include_censored`.
pub fn chord_length_distribution_with(
    v: &PhaseVolume,
    phase: usize,
    axis: Axis,
    dmax: usize,
    include_censored: bool,
) -> Result<Vec<f64>> {
    check_phase(v, phase)?;
    let len = v.dims()[axis.index()];
    if dmax >= len {
        return Err(Error::TooSmall(format!("dmax {dmax} must be below the axis length {len}")));
    }
    let p = phase as u8;
    let l = v.labels();
    let mut mass = vec![0usize; dmax + 1];
    let mut total = 0usize;
    for_each_line(v.dims(), axis, |start, step, len| {
        let mut i = 0;
        while i < len {
            if l[start + i * step] != p {
                i += 1;
                continue;
            }
            let s = i;
            while i < len && l[start + i * step] == p {
                i += 1;
            }
            let run = i - s;
            total += run;
            let censored = s == 0 || i == len;
            if run <= dmax && (include_censored || !censored) {
                mass[run] += run;
            }
        }
    });
    if total == 0 {
        return Ok(vec![0.0; dmax + 1]);
    }
    Ok(mass.iter().map(|&m| m as f64 / total as f64).collect())
}

pub fn chord_length_distribution(v: &PhaseVolume, phase: usize, axis: Axis, dmax: usize) -> Result<Vec<f64>> {
    chord_length_distribution_with(v, phase, axis, dmax, false)
}

// ---------------------------------------------------------------------------
// transport

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub omega: f64,
    pub tolerance: f64,
    pub check_interval: usize,
    pub max_iterations: usize,
    /// Largest admissible relative spread of plane fluxes at convergence.
    pub conservation: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { omega: 1.9, tolerance: 1e-5, check_interval: 25, max_iterations: 1_000_000, conservation: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportResult {
    pub volume_fraction: f64,
    /// `VF / tau`; zero when the phase does not percolate.
    pub efficiency: f64,
    /// Tortuosity factor; infinite when the phase does not percolate.
    pub tau: f64,
    /// Flux through each of the `L + 1` transverse planes, reservoirs included.
    pub plane_flux: Vec<f64>,
    pub iterations: usize,
}

impl TransportResult {
    /// Largest relative deviation of any plane flux from their mean.
    pub fn flux_spread(&self) -> f64 {
        if self.plane_flux.is_empty() {
            return 0.0;
        }
        let mean = self.plane_flux.iter().sum::<f64>() / self.plane_flux.len() as f64;
        if mean == 0.0 {
            return 0.0;
        }
        self.plane_flux.iter().map(|f| ((f - mean) / mean).abs()).fold(0.0, f64::max)
    }
}

/// Voxels of `phase` 6-connected to both faces normal to `axis`.
fn percolating(v: &PhaseVolume, phase: u8, axis: Axis) -> Vec<bool> {
    let dims = v.dims();
    let a = axis.index();
    let l = v.labels();
    let coord = |i: usize| [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
    let flood = |face: usize| {
        let mut seen = vec![false; l.len()];
        let mut stack: Vec<usize> = (0..l.len()).filter(|&i| l[i] == phase && coord(i)[a] == face).collect();
        for &i in &stack {
            seen[i] = true;
        }
        while let Some(i) = stack.pop() {
            let c = coord(i);
            for ax in 0..3 {
                let st = [1, dims[0], dims[0] * dims[1]][ax];
                if c[ax] > 0 && !seen[i - st] && l[i - st] == phase {
                    seen[i - st] = true;
                    stack.push(i - st);
                }
                if c[ax] + 1 < dims[ax] && !seen[i + st] && l[i + st] == phase {
                    seen[i + st] = true;
                    stack.push(i + st);
                }
            }
        }
        seen
    };
    let from_in = flood(0);
    let from_out = flood(dims[a] - 1);
    from_in.iter().zip(&from_out).map(|(&p, &q)| p && q).collect()
}

/// Steady-state diffusion through `phase` along `axis`.
///
/// Unit conductance between face-adjacent phase voxels; reservoirs at
/// concentration 1 and 0 sit half a voxel beyond the two end faces; other
/// faces are sealed. `tau = VF · A / (L · flux)`, so a dense volume gives 1.
pub fn transport(v: &PhaseVolume, phase: usize, axis: Axis, cfg: &SolverConfig) -> Result<TransportResult> {
    let vf = volume_fraction(v, phase)?;
    let dims = v.dims();
    let a = axis.index();
    let len = dims[a];
    let area = v.len() / len;
    let mask = percolating(v, phase as u8, axis);
    if !mask.iter().any(|&m| m) {
        return Ok(TransportResult {
            volume_fraction: vf,
            efficiency: 0.0,
            tau: f64::INFINITY,
            plane_flux: vec![0.0; len + 1],
            iterations: 0,
        });
    }
    let st = [1, dims[0], dims[0] * dims[1]];
    let coord = |i: usize| [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
    let active: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    // neighbours within the cluster, plus reservoir conductance and source term
    let mut nbrs: Vec<[u32; 6]> = Vec::with_capacity(active.len());
    let mut degree = Vec::with_capacity(active.len());
    let mut source = Vec::with_capacity(active.len());
    for &i in &active {
        let c = coord(i);
        let mut nb = [u32::MAX; 6];
        let mut g = 0.0;
        for ax in 0..3 {
            if c[ax] > 0 && mask[i - st[ax]] {
                nb[2 * ax] = (i - st[ax]) as u32;
                g += 1.0;
            }
            if c[ax] + 1 < dims[ax] && mask[i + st[ax]] {
                nb[2 * ax + 1] = (i + st[ax]) as u32;
                g += 1.0;
            }
        }
        let mut s = 0.0;
        if c[a] == 0 {
            g += 2.0;
            s += 2.0;
        }
        if c[a] == len - 1 {
            g += 2.0;
        }
        nbrs.push(nb);
        degree.push(g);
        source.push(s);
    }
    let mut conc = vec![0.0f64; v.len()];
    for &i in &active {
        conc[i] = 1.0 - (coord(i)[a] as f64 + 0.5) / len as f64;
    }

    let plane_flux = |conc: &[f64]| -> Vec<f64> {
        let mut f = vec![0.0; len + 1];
        for &i in &active {
            let c = coord(i);
            if c[a] == 0 {
                f[0] += 2.0 * (1.0 - conc[i]);
            }
            if c[a] == len - 1 {
                f[len] += 2.0 * conc[i];
            } else if mask[i + st[a]] {
                f[c[a] + 1] += conc[i] - conc[i + st[a]];
            }
        }
        f
    };

    let omega = cfg.omega;
    let mut prev = f64::NAN;
    let mut it = 0;
    loop {
        for (k, &i) in active.iter().enumerate() {
            let mut s = source[k];
            for &n in &nbrs[k] {
                if n != u32::MAX {
                    s += conc[n as usize];
                }
            }
            conc[i] += omega * (s / degree[k] - conc[i]);
        }
        it += 1;
        if it % cfg.check_interval == 0 || it >= cfg.max_iterations {
            let f = plane_flux(&conc);
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            let spread = f.iter().map(|x| ((x - mean) / mean).abs()).fold(0.0, f64::max);
            let change = ((mean - prev) / mean).abs();
            if !mean.is_finite() {
                return Err(Error::Solver("diffusion solve diverged".into()));
            }
            if change < cfg.tolerance && spread < cfg.conservation {
                let tau = vf * area as f64 / (len as f64 * mean);
                return Ok(TransportResult {
                    volume_fraction: vf,
                    efficiency: vf / tau,
                    tau,
                    plane_flux: f,
                    iterations: it,
                });
            }
            if it >= cfg.max_iterations {
                return Err(Error::Solver(format!(
                    "diffusion solve did not converge in {it} iterations (flux change {change:.2e}, spread {spread:.2e})"
                )));
            }
            prev = mean;
        }
    }
}

pub fn transport_efficiency(v: &PhaseVolume, phase: usize, axis: Axis) -> Result<f64> {
    transport(v, phase, axis, &SolverConfig::default()).map(|r| r.efficiency)
}

// ---------------------------------------------------------------------------
// spectra

/// Ring-averaged `ln(|F| + 1e-8)` of a centred 2D spectrum, from DC out to
/// the Nyquist radius `min(w, h) / 2`. Frequencies beyond Nyquist (the
/// corners) fold into the last ring. `data` is row-major with width `w`.
pub fn radial_fft_profile(data: &[f64], w: usize, h: usize) -> Result<Vec<f64>> {
    if w < 2 || h < 2 {
        return Err(Error::TooSmall(format!("spectral profile needs at least 2x2, got {w}x{h}")));
    }
    if data.len() != w * h {
        return Err(Error::Shape(format!("{} values for a {w}x{h} image", data.len())));
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = data.iter().map(|&x| Complex::new(x, 0.0)).collect();
    let row = planner.plan_fft_forward(w);
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let col = planner.plan_fft_forward(h);
    let mut tmp = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            tmp[y] = buf[y * w + x];
        }
        col.process(&mut tmp);
        for y in 0..h {
            buf[y * w + x] = tmp[y];
        }
    }
    let rmax = w.min(h) / 2;
    let mut sum = vec![0.0; rmax + 1];
    let mut cnt = vec![0usize; rmax + 1];
    let signed = |k: usize, n: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    for y in 0..h {
        for x in 0..w {
            let r = (signed(x, w).powi(2) + signed(y, h).powi(2)).sqrt().round() as usize;
            let r = r.min(rmax);
            sum[r] += (buf[y * w + x].norm() + 1e-8).ln();
            cnt[r] += 1;
        }
    }
    Ok(sum.iter().zip(&cnt).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect())
}

/// Mean of the per-phase indicator profiles over `phases` for a `w × h` label image.
pub fn phase_fft_profile(labels: &[u8], w: usize, h: usize, phases: &[usize]) -> Result<Vec<f64>> {
    let fields: Vec<Vec<f64>> =
        phases.iter().map(|&p| labels.iter().map(|&l| (l as usize == p) as u8 as f64).collect()).collect();
    mean_profile(&fields, w, h)
}

/// Mean of the profiles of several real fields of equal size.
pub fn mean_profile(fields: &[Vec<f64>], w: usize, h: usize) -> Result<Vec<f64>> {
    if fields.is_empty() {
        return Err(Error::Config("no fields for a spectral profile".into()));
    }
    let mut acc: Option<Vec<f64>> = None;
    for f in fields {
        let p = radial_fft_profile(f, w, h)?;
        acc = Some(match acc {
            None => p,
            Some(a) => a.iter().zip(&p).map(|(x, y)| x + y).collect(),
        });
    }
    Ok(acc.unwrap().into_iter().map(|x| x / fields.len() as f64).collect())
}

// ---------------------------------------------------------------------------
// distributions and reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub samples: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Distribution {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Distribution { samples, mean, std: var.sqrt() }
    }
}

/// A metric evaluated on each sampled cube.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricSpec {
    VolumeFraction { phase: usize },
    SurfaceArea { a: usize, b: usize },
    Transport { phase: usize, axis: Axis },
    Tpb,
}

impl MetricSpec {
    /// Stable name built from the palette, e.g. `vf:pore` or `sa:am|binder`.
    pub fn name(&self, palette: &[String]) -> String {
        let p = |i: usize| palette.get(i).cloned().unwrap_or_else(|| i.to_string());
        match self {
            MetricSpec::VolumeFraction { phase } => format!("vf:{}", p(*phase)),
            MetricSpec::SurfaceArea { a, b } => format!("sa:{}|{}", p(*a), p(*b)),
            MetricSpec::Transport { phase, axis } => format!("te:{}:{axis:?}", p(*phase)).to_lowercase(),
            MetricSpec::Tpb => "tpb".into(),
        }
    }

    /// Whether the metric is meaningful on a single 2D image.
    pub fn is_planar(&self) -> bool {
        !matches!(self, MetricSpec::Transport { .. })
    }

    pub fn evaluate(&self, v: &PhaseVolume) -> Result<f64> {
        match *self {
            MetricSpec::VolumeFraction { phase } => volume_fraction(v, phase),
            MetricSpec::SurfaceArea { a, b } => interphase_surface_area(v, a, b),
            MetricSpec::Transport { phase, axis } => transport_efficiency(v, phase, axis),
            MetricSpec::Tpb => tpb_density(v),
        }
    }

    /// Volume fraction of every phase and surface area of every phase pair,
    /// plus TPB for 3 phases and, optionally, transport of every phase along z.
    pub fn standard_set(n_phases: usize, with_transport: bool) -> Vec<MetricSpec> {
        let mut out: Vec<MetricSpec> = (0..n_phases).map(|phase| MetricSpec::VolumeFraction { phase }).collect();
        for a in 0..n_phases {
            for b in a + 1..n_phases {
                out.push(MetricSpec::SurfaceArea { a, b });
            }
        }
        if with_transport {
            out.extend((0..n_phases).map(|phase| MetricSpec::Transport { phase, axis: Axis::Z }));
        }
        if n_phases == 3 {
            out.push(MetricSpec::Tpb);
        }
        out
    }
}

/// Origin of cube `index` of a sampling run; each index owns its own stream.
pub fn cube_origin(dims: [usize; 3], size: usize, seed: u64, index: usize) -> [usize; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - size))
}

fn check_cube(v: &PhaseVolume, size: usize) -> Result<()> {
    if size == 0 || v.dims().iter().any(|&d| d < size) {
        return Err(Error::TooSmall(format!("volume {:?} cannot hold a {size}³ cube", v.dims())));
    }
    Ok(())
}

/// `n` uniformly placed `size³` cubes, each scored by `metric`.
pub fn subvolume_distribution(v: &PhaseVolume, metric: &MetricSpec, n: usize, size: usize, seed: u64) -> Result<Distribution> {
    Ok(subvolume_distributions(v, std::slice::from_ref(metric), n, size, seed)?.remove(0))
}

/// Several metrics over one shared set of cubes.
pub fn subvolume_distributions(
    v: &PhaseVolume,
    metrics: &[MetricSpec],
    n: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<Distribution>> {
    check_cube(v, size)?;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let cube = v.subvolume(cube_origin(v.dims(), size, seed, i), [size; 3])?;
            metrics.iter().map(|m| m.evaluate(&cube)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok((0..metrics.len()).map(|j| Distribution::from_samples(rows.iter().map(|r| r[j]).collect())).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetricValue {
    Scalar { value: f64 },
    Distribution(Distribution),
}

impl MetricValue {
    pub fn mean(&self) -> f64 {
        match self {
            MetricValue::Scalar { value } => *value,
            MetricValue::Distribution(d) => d.mean,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub volume_id: String,
    pub cube_count: Option<usize>,
    pub cube_size: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub provenance: Provenance,
    pub values: BTreeMap<String, MetricValue>,
    /// Curve-valued statistics (correlations, chord lengths, spectra), keyed by name.
    #[serde(default)]
    pub curves: BTreeMap<String, Vec<f64>>,
}

impl MetricsReport {
    pub fn new(volume_id: impl Into<String>) -> Self {
        MetricsReport { provenance: Provenance { volume_id: volume_id.into(), ..Default::default() }, ..Default::default() }
    }

    /// Distributions over sampled cubes of a 3D volume.
    pub fn for_volume(
        id: impl Into<String>,
        v: &PhaseVolume,
        metrics: &[MetricSpec],
        n: usize,
        size: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut r = MetricsReport::new(id);
        r.provenance.cube_count = Some(n);
        r.provenance.cube_size = Some(size);
        r.provenance.seed = Some(seed);
        for (m, d) in metrics.iter().zip(subvolume_distributions(v, metrics, n, size, seed)?) {
            r.values.insert(m.name(v.palette()), MetricValue::Distribution(d));
        }
        Ok(r)
    }

    /// Whole-image scalars for a 2D source, given as a one-voxel-thick volume;
    /// volumetric metrics are skipped.
    pub fn for_plane(id: impl Into<String>, plane: &PhaseVolume, metrics: &[MetricSpec]) -> Result<Self> {
        let mut r = MetricsReport::new(id);
        for m in metrics.iter().filter(|m| m.is_planar()) {
            r.values.insert(m.name(plane.palette()), MetricValue::Scalar { value: m.evaluate(plane)? });
        }
        Ok(r)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("bad metrics report: {e}")))
    }

    /// `metric,kind,n,mean,std` rows.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Config(format!("csv: {e}"));
        out.write_record(["metric", "kind", "n", "mean", "std"]).map_err(err)?;
        for (name, v) in &self.values {
            let row = match v {
                MetricValue::Scalar { value } => [name.clone(), "scalar".into(), "1".into(), value.to_string(), "0".into()],
                MetricValue::Distribution(d) => [
                    name.clone(),
                    "distribution".into(),
                    d.samples.len().to_string(),
                    d.mean.to_string(),
                    d.std.to_string(),
                ],
            };
            out.write_record(&row).map_err(err)?;
        }
        out.flush().map_err(|e| Error::Config(format!("csv: {e}")))
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(f)
    }
}
