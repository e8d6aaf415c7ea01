//! Full-volume generation from a trained generator, with boundary cropping,
//! halo-overlapped tiling and noise-seeded ensembles.

use std::path::Path;

use voxfuse_autograd::Tensor;

use crate::error::{Error, Result};
use crate::netspec::Generator;
use crate::trainer::{load_checkpoint, TrainState};
use crate::volgrid::PhaseVolume;

/// A generator together with the phase contracts it was trained on.
#[derive(Clone, Debug)]
pub struct Model {
    pub generator: Generator<f32>,
    pub hr_palette: Vec<String>,
    pub lr_palette: Vec<String>,
}

impl Model {
    pub fn from_state(s: &TrainState) -> Self {
        Model { generator: s.generator_net(), hr_palette: s.hr_palette.clone(), lr_palette: s.lr_palette.clone() }
    }

    pub fn load(checkpoint: &Path) -> Result<Self> {
        Ok(Model::from_state(&load_checkpoint(checkpoint)?))
    }
}

#[derive(Clone, Debug)]
pub struct SynthRequest<'a> {
    pub model: &'a Model,
    pub lr: &'a PhaseVolume,
    pub seed: u64,
    /// Strip the ill-informed outer shell (one LR voxel) from every face.
    pub crop_boundary: bool,
    /// LR tile side for overlapped generation; single pass when `None`.
    pub tile: Option<usize>,
}

impl<'a> SynthRequest<'a> {
    pub fn new(model: &'a Model, lr: &'a PhaseVolume, seed: u64) -> Self {
        SynthRequest { model, lr, seed, crop_boundary: true, tile: None }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard normal sample keyed by seed, channel and global LR site, so that
/// overlapping tiles see identical noise.
pub fn spatial_noise(seed: u64, channel: usize, site: [usize; 3]) -> f32 {
    let mut h = splitmix64(seed);
    for k in [channel, site[0], site[1], site[2]] {
        h = splitmix64(h ^ k as u64);
    }
    let h2 = splitmix64(h);
    // uniforms in (0, 1]
    let u1 = ((h >> 11) + 1) as f64 / (1u64 << 53) as f64;
    let u2 = (h2 >> 11) as f64 / (1u64 << 53) as f64;
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

/// Generator input for the LR box `[origin, origin + size)`: one-hot phases then noise.
fn input_tensor(lr: &PhaseVolume, noise: usize, seed: u64, origin: [usize; 3], size: [usize; 3]) -> Tensor<f32> {
    let c = lr.n_phases();
    let n = size.iter().product::<usize>();
    let mut data = vec![0.0f32; (c + noise) * n];
    let mut i = 0;
    for z in 0..size[2] {
        for y in 0..size[1] {
            for x in 0..size[0] {
                let g = [origin[0] + x, origin[1] + y, origin[2] + z];
                data[lr.get(g[0], g[1], g[2]) as usize * n + i] = 1.0;
                for k in 0..noise {
                    data[(c + k) * n + i] = spatial_noise(seed, k, g);
                }
                i += 1;
            }
        }
    }
    Tensor::from_vec(&[1, c + noise, size[2], size[1], size[0]], data)
}

fn check(req: &SynthRequest) -> Result<()> {
    let m = req.model;
    if req.lr.palette() != m.lr_palette.as_slice() {
        return Err(Error::Mapping(format!(
            "low-res palette {:?} does not match the model's {:?}",
            req.lr.palette(),
            m.lr_palette
        )));
    }
    let min = m.generator.spec.sf.lr_side(crate::netspec::TRAINING_CUBE).unwrap_or(1);
    if req.lr.dims().iter().any(|&d| d < min) {
        return Err(Error::TooSmall(format!("low-res volume {:?} is smaller than {min}³", req.lr.dims())));
    }
    for &d in &req.lr.dims() {
        if m.generator.spec.output_side(d).is_none() {
            return Err(Error::Shape(format!("low-res side {d} has no whole upscale at sf {}", m.generator.spec.sf)));
        }
    }
    Ok(())
}

/// Argmax of `[1, C, z, y, x]` probabilities written into `out` at `dst`,
/// reading the box `[src, src + size)` of the tile.
fn scatter_argmax(p: &Tensor<f32>, src: [usize; 3], size: [usize; 3], out: &mut [u8], out_dims: [usize; 3], dst: [usize; 3]) {
    let sh = p.shape();
    let (c, tz, ty, tx) = (sh[1], sh[2], sh[3], sh[4]);
    let n = tz * ty * tx;
    let d = p.data();
    for z in 0..size[2] {
        for y in 0..size[1] {
            for x in 0..size[0] {
                let i = ((src[2] + z) * ty + src[1] + y) * tx + src[0] + x;
                let mut best = 0;
                for ch in 1..c {
                    if d[ch * n + i] > d[best * n + i] {
                        best = ch;
                    }
                }
                let o = ((dst[2] + z) * out_dims[1] + dst[1] + y) * out_dims[0] + dst[0] + x;
                out[o] = best as u8;
            }
        }
    }
}

/// Raw SR labels before any boundary crop.
fn generate_raw(req: &SynthRequest) -> Result<PhaseVolume> {
    let g = &req.model.generator;
    let spec = &g.spec;
    let lr = req.lr;
    let ld = lr.dims();
    let out_dims = ld.map(|d| spec.output_side(d).expect("checked"));
    let mut labels = vec![0u8; out_dims.iter().product()];
    let halo = spec.lr_halo();
    let tile = match (req.tile, halo) {
        (Some(t), Some(_)) if ld.iter().any(|&d| d > t) => Some(t.max(1)),
        (Some(_), None) => {
            log::warn!("sf {} needs a global resample; generating in one pass", spec.sf);
            None
        }
        _ => None,
    };
    match (tile, halo) {
        (Some(t), Some(h)) => {
            let sf = spec.sf.as_integer().expect("tiling implies an integer factor");
            let starts = |n: usize| (0..n).step_by(t).collect::<Vec<_>>();
            for &z0 in &starts(ld[2]) {
                for &y0 in &starts(ld[1]) {
                    for &x0 in &starts(ld[0]) {
                        let a = [x0, y0, z0];
                        let b = [0, 1, 2].map(|k| (a[k] + t).min(ld[k]));
                        let ia = [0, 1, 2].map(|k| a[k].saturating_sub(h));
                        let ib = [0, 1, 2].map(|k| (b[k] + h).min(ld[k]));
                        let size = [0, 1, 2].map(|k| ib[k] - ia[k]);
                        let p = g.forward(&input_tensor(lr, spec.noise_channels, req.seed, ia, size));
                        let src = [0, 1, 2].map(|k| (a[k] - ia[k]) * sf);
                        let keep = [0, 1, 2].map(|k| (b[k] - a[k]) * sf);
                        scatter_argmax(&p, src, keep, &mut labels, out_dims, a.map(|v| v * sf));
                    }
                }
            }
        }
        _ => {
            let p = g.forward(&input_tensor(lr, spec.noise_channels, req.seed, [0; 3], ld));
            scatter_argmax(&p, [0; 3], out_dims, &mut labels, out_dims, [0; 3]);
        }
    }
    PhaseVolume::new(out_dims, lr.voxel_pitch() / spec.sf.value(), labels, req.model.hr_palette.clone())
}

/// Layers removed per face when cropping: one LR voxel's worth.
pub fn boundary_layers(sf: crate::volgrid::ScaleFactor) -> usize {
    sf.value().round() as usize
}

/// Super-resolves `req.lr`; raw dims are `sf ×` the LR dims.
pub fn generate_volume(req: &SynthRequest) -> Result<PhaseVolume> {
    check(req)?;
    let raw = generate_raw(req)?;
    if req.crop_boundary { raw.crop_faces(boundary_layers(req.model.generator.spec.sf)) } else { Ok(raw) }
}

/// One volume per seed, differing only in the noise.
pub fn generate_ensemble(req: &SynthRequest, seeds: &[u64]) -> Result<Vec<PhaseVolume>> {
    seeds.iter().map(|&seed| generate_volume(&SynthRequest { seed, ..req.clone() })).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::build_generator_spec_with;
    use crate::volgrid::ScaleFactor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(sf: f64, noise: usize) -> Model {
        let spec = build_generator_spec_with(ScaleFactor::new(sf).unwrap(), 2, 3, noise, &[6, 5, 4, 4]).unwrap();
        let generator = Generator::new(spec, &mut ChaCha8Rng::seed_from_u64(5));
        Model { generator, hr_palette: vec!["a".into(), "b".into(), "c".into()], lr_palette: vec!["a".into(), "b".into()] }
    }

    fn lr(dims: [usize; 3]) -> PhaseVolume {
        PhaseVolume::from_fn(dims, 4.0, vec!["a".into(), "b".into()], |x, y, z| ((x * 3 + y * 5 + z * 7) % 4 == 0) as u8).unwrap()
    }

    #[test]
    fn noise_is_standard_normal_and_keyed() {
        let s: Vec<f64> = (0..20_000).map(|i| spatial_noise(9, 0, [i, 3, 1]) as f64).collect();
        let m = s.iter().sum::<f64>() / s.len() as f64;
        let v = s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / s.len() as f64;
        assert!(m.abs() < 0.03 && (v - 1.0).abs() < 0.05, "mean {m} var {v}");
        assert_eq!(spatial_noise(1, 0, [2, 3, 4]), spatial_noise(1, 0, [2, 3, 4]));
        assert_ne!(spatial_noise(1, 0, [2, 3, 4]), spatial_noise(2, 0, [2, 3, 4]));
        assert_ne!(spatial_noise(1, 0, [2, 3, 4]), spatial_noise(1, 1, [2, 3, 4]));
    }

    #[test]
    fn size_law_and_crop() {
        for (sf, dims) in [(4.0, [16, 17, 18]), (2.0, [32, 33, 35]), (8.0, [8, 9, 10])] {
            let m = model(sf, 1);
            let v = lr(dims);
            let mut req = SynthRequest::new(&m, &v, 1);
            req.crop_boundary = false;
            let raw = generate_volume(&req).unwrap();
            assert_eq!(raw.dims(), dims.map(|d| d * sf as usize));
            assert_eq!(raw.voxel_pitch(), 4.0 / sf);
            req.crop_boundary = true;
            let c = generate_volume(&req).unwrap();
            let k = sf as usize;
            assert_eq!(c.dims(), raw.dims().map(|d| d - 2 * k));
            assert_eq!(c, raw.crop_faces(k).unwrap());
        }
        let spec = &model(4.0, 1).generator.spec;
        assert_eq!(spec.output_side(128), Some(512));
        assert_eq!(512 - 2 * boundary_layers(spec.sf), 504);
    }

    #[test]
    fn tiled_generation_matches_single_pass() {
        for (sf, dims) in [(2.0, [34, 33, 32]), (4.0, [18, 17, 16]), (8.0, [10, 9, 8])] {
            let m = model(sf, 2);
            let v = lr(dims);
            let single = generate_volume(&SynthRequest { crop_boundary: false, ..SynthRequest::new(&m, &v, 3) }).unwrap();
            for t in [3, 5, 8] {
                let tiled = generate_volume(&SynthRequest { crop_boundary: false, tile: Some(t), ..SynthRequest::new(&m, &v, 3) }).unwrap();
                assert!(tiled == single, "sf {sf} tile {t}");
            }
        }
    }

    #[test]
    fn rational_factor_generates_in_one_pass() {
        let m = model(64.0 / 24.0, 1);
        assert!(m.generator.spec.lr_halo().is_none());
        let v = lr([24, 27, 30]);
        let raw = generate_volume(&SynthRequest { crop_boundary: false, tile: Some(4), ..SynthRequest::new(&m, &v, 1) }).unwrap();
        assert_eq!(raw.dims(), [64, 72, 80]);
        assert_eq!(generate_volume(&SynthRequest::new(&m, &v, 1)).unwrap().dims(), [58, 66, 74]);
    }

    #[test]
    fn ensemble_and_determinism() {
        let m = model(4.0, 1);
        let v = lr([16, 16, 16]);
        let req = SynthRequest::new(&m, &v, 10);
        let e = generate_ensemble(&req, &[10, 11, 12]).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[0], generate_volume(&req).unwrap());
        assert_eq!(generate_volume(&req).unwrap(), generate_volume(&req).unwrap());
        assert!(e.iter().all(|x| x.labels().iter().all(|&l| l < 3)));
        let deterministic = model(4.0, 0);
        let r = SynthRequest::new(&deterministic, &v, 1);
        assert_eq!(generate_volume(&r).unwrap(), generate_volume(&SynthRequest { seed: 2, ..r.clone() }).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = model(4.0, 1);
        let small = lr([15, 16, 16]);
        assert!(matches!(generate_volume(&SynthRequest::new(&m, &small, 1)), Err(Error::TooSmall(_))));
        let other = PhaseVolume::new([16; 3], 1.0, vec![0; 4096], vec!["x".into(), "y".into()]).unwrap();
        assert!(matches!(generate_volume(&SynthRequest::new(&m, &other, 1)), Err(Error::Mapping(_))));
    }
}
