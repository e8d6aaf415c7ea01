//! Generator and critic architectures, their parameters and forward passes,
//! and the crop-and-slice geometry that turns generated cubes into 2D patches.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voxfuse_autograd::{ops, ConvGeom, Element, Tensor, Var};

use crate::degrade::{cast_map, trilinear_map};
use crate::error::{Error, Result};
use crate::volgrid::{OneHotField, Orientation, ScaleFactor};

/// Hidden widths for the generator, taken from the input end.
pub const GENERATOR_WIDTHS: [usize; 4] = [512, 256, 128, 64];
/// Hidden widths for the critic.
pub const CRITIC_WIDTHS: [usize; 4] = [64, 128, 256, 512];
/// Side of the HR cube the generator is trained to emit.
pub const TRAINING_CUBE: usize = 64;
/// Layers removed from each face before slicing.
pub const SLICE_CROP: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// sf in (4, 8]: three doublings.
    A,
    /// sf in (2, 4]: two doublings.
    B,
    /// sf in [1, 2]: at most one doubling plus a refinement layer.
    C,
}

/// A transposed convolution; `stride = 1` layers keep the size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Layer {
    fn up(in_ch: usize, out_ch: usize) -> Self {
        Layer { in_ch, out_ch, kernel: 4, stride: 2, pad: 1 }
    }

    fn same(in_ch: usize, out_ch: usize) -> Self {
        Layer { in_ch, out_ch, kernel: 3, stride: 1, pad: 1 }
    }

    fn down(in_ch: usize, out_ch: usize) -> Self {
        Layer { in_ch, out_ch, kernel: 4, stride: 2, pad: 1 }
    }

    /// Output side of the transposed convolution.
    pub fn up_size(&self, n: usize) -> Option<usize> {
        ((n.checked_sub(1)? * self.stride + self.kernel).checked_sub(2 * self.pad)).filter(|&m| m > 0)
    }

    /// Output side of the forward convolution.
    pub fn down_size(&self, n: usize) -> Option<usize> {
        let span = n + 2 * self.pad;
        (span >= self.kernel).then(|| (span - self.kernel) / self.stride + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub sf: ScaleFactor,
    pub lr_phases: usize,
    pub hr_phases: usize,
    pub noise_channels: usize,
    pub variant: Variant,
    pub layers: Vec<Layer>,
    /// Trilinear resample from `2^m · s` to `sf · s` before the softmax, when sf is not a power of two.
    pub resample: bool,
}

fn doublings(sf: ScaleFactor) -> u32 {
    let mut m = 0;
    while ((1u32 << m) as f64) < sf.value() - 1e-12 {
        m += 1;
    }
    m
}

pub fn build_generator_spec(sf: ScaleFactor, lr_phases: usize, hr_phases: usize, noise_channels: usize) -> Result<GeneratorSpec> {
    build_generator_spec_with(sf, lr_phases, hr_phases, noise_channels, &GENERATOR_WIDTHS)
}

/// Generator plan with custom hidden widths; a plan of `L` layers uses the
/// last `L - 1` entries of `widths`.
pub fn build_generator_spec_with(
    sf: ScaleFactor,
    lr_phases: usize,
    hr_phases: usize,
    noise_channels: usize,
    widths: &[usize],
) -> Result<GeneratorSpec> {
    if lr_phases == 0 || hr_phases == 0 {
        return Err(Error::Config("generator needs at least one LR and one HR phase".into()));
    }
    let m = doublings(sf);
    let (variant, kinds): (Variant, Vec<bool>) = match m {
        3 => (Variant::A, vec![false, true, true, true, false]),
        2 => (Variant::B, vec![false, true, true, false]),
        1 => (Variant::C, vec![false, true, false, false]),
        0 => (Variant::C, vec![false, false, false, false]),
        _ => return Err(Error::InvalidScaleFactor(sf.value())),
    };
    let hidden = kinds.len() - 1;
    if widths.len() < hidden || widths.contains(&0) {
        return Err(Error::Config(format!("need {hidden} positive hidden widths, got {widths:?}")));
    }
    let mut chans = vec![lr_phases + noise_channels];
    chans.extend_from_slice(&widths[widths.len() - hidden..]);
    chans.push(hr_phases);
    let layers = kinds
        .iter()
        .enumerate()
        .map(|(i, &up)| if up { Layer::up(chans[i], chans[i + 1]) } else { Layer::same(chans[i], chans[i + 1]) })
        .collect();
    let spec = GeneratorSpec {
        sf,
        lr_phases,
        hr_phases,
        noise_channels,
        variant,
        layers,
        resample: sf.as_integer() != Some(1 << m),
    };
    let s = sf.divisor() as usize;
    if spec.output_side(s) != Some(TRAINING_CUBE) {
        return Err(Error::Shape(format!("plan for sf {sf} does not map {s}³ to {TRAINING_CUBE}³")));
    }
    Ok(spec)
}

impl GeneratorSpec {
    pub fn in_channels(&self) -> usize {
        self.lr_phases + self.noise_channels
    }

    fn expanded_side(&self, n: usize) -> Option<usize> {
        self.layers.iter().try_fold(n, |s, l| l.up_size(s))
    }

    /// SR side for an LR side, following the layer plan symbolically.
    pub fn output_side(&self, lr: usize) -> Option<usize> {
        let e = self.expanded_side(lr)?;
        if self.resample { self.sf.hr_side(lr) } else { Some(e) }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| [vec![l.in_ch, l.out_ch, l.kernel, l.kernel, l.kernel], vec![l.out_ch]])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Inclusive LR interval that SR sites `lo..=hi` depend on (power-of-two sf only).
    pub fn lr_dependency(&self, lo: isize, hi: isize) -> (isize, isize) {
        let (mut a, mut b) = (lo, hi);
        for l in self.layers.iter().rev() {
            let (k, s, p) = (l.kernel as isize, l.stride as isize, l.pad as isize);
            a = (a + p - k + 1).div_euclid(s) + ((a + p - k + 1).rem_euclid(s) != 0) as isize;
            b = (b + p).div_euclid(s);
        }
        (a, b)
    }

    /// LR context needed on each side of a tile so that its SR interior
    /// matches a single pass; `None` when tiling is not translation-exact.
    pub fn lr_halo(&self) -> Option<usize> {
        if self.resample {
            return None;
        }
        let sf = self.sf.as_integer()? as isize;
        let t = 8isize;
        let (lo, hi) = self.lr_dependency(0, sf * t - 1);
        Some((-lo).max(hi - (t - 1)).max(0) as usize)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("spec serializes")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticSpec {
    pub in_channels: usize,
    pub orientation: Orientation,
    pub patch: usize,
    /// Strided convolutions followed by one unpadded layer reducing to 1×1.
    pub layers: Vec<Layer>,
    pub leaky_slope: f64,
}

pub fn build_critic_specs(hr_phases: usize, anisotropic: bool) -> Result<Vec<CriticSpec>> {
    build_critic_specs_with(hr_phases, anisotropic, TRAINING_CUBE - 2 * SLICE_CROP, &CRITIC_WIDTHS)
}

/// Up to four `k4 s2 p1` convolutions over a `patch²` input, then a final
/// convolution whose kernel spans the remaining map, giving one score.
pub fn build_critic_specs_with(hr_phases: usize, anisotropic: bool, patch: usize, widths: &[usize]) -> Result<Vec<CriticSpec>> {
    if hr_phases < 2 {
        return Err(Error::Config(format!("critic needs at least 2 phases, got {hr_phases}")));
    }
    if patch < 2 {
        return Err(Error::TooSmall(format!("critic patch {patch} is too small")));
    }
    let mut layers = Vec::new();
    let mut size = patch;
    let mut ch = hr_phases;
    for &w in widths.iter().take(4) {
        if size < 2 {
            break;
        }
        let l = Layer::down(ch, w);
        size = l.down_size(size).expect("k4 s2 p1 fits any side >= 2");
        layers.push(l);
        ch = w;
    }
    layers.push(Layer { in_ch: ch, out_ch: 1, kernel: size, stride: 1, pad: 0 });
    let orientations: Vec<Orientation> =
        if anisotropic { Orientation::PLANES.to_vec() } else { vec![Orientation::Isotropic] };
    Ok(orientations
        .into_iter()
        .map(|orientation| CriticSpec { in_channels: hr_phases, orientation, patch, layers: layers.clone(), leaky_slope: 0.2 })
        .collect())
}

impl CriticSpec {
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| [vec![l.out_ch, l.in_ch, l.kernel, l.kernel], vec![l.out_ch]])
            .collect()
    }

    /// Final map side for a given patch side.
    pub fn output_side(&self, patch: usize) -> Option<usize> {
        self.layers.iter().try_fold(patch, |s, l| l.down_size(s))
    }
}

// ---------------------------------------------------------------------------
// parameters and forward passes

/// He-uniform weights, zero biases. Transposed layers count `in_ch·(k/s)^3` as fan-in.
fn init_params<T: Element, R: Rng + ?Sized>(shapes: &[Vec<usize>], fan_in: &[f64], rng: &mut R) -> Vec<Tensor<T>> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let n = s.iter().product();
            if i % 2 == 1 {
                return Tensor::zeros(s);
            }
            let bound = (6.0 / fan_in[i / 2]).sqrt();
            Tensor::from_vec(s, (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub spec: GeneratorSpec,
    pub params: Vec<Tensor<T>>,
}

impl<T: Element> Generator<T> {
    pub fn new<R: Rng + ?Sized>(spec: GeneratorSpec, rng: &mut R) -> Self {
        let fan: Vec<f64> =
            spec.layers.iter().map(|l| l.in_ch as f64 * (l.kernel as f64 / l.stride as f64).powi(3)).collect();
        let params = init_params(&spec.param_shapes(), &fan, rng);
        Generator { spec, params }
    }

    /// Inference-only pass.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let p: Vec<Var<T>> = self.params.iter().cloned().map(Var::constant).collect();
        generator_forward(&self.spec, &p, &Var::constant(x.clone())).value().clone()
    }
}

/// `x` is `[N, lr_phases + noise, z, y, x]`; returns per-site phase probabilities.
pub fn generator_forward<T: Element>(spec: &GeneratorSpec, params: &[Var<T>], x: &Var<T>) -> Var<T> {
    assert_eq!(params.len(), 2 * spec.layers.len(), "generator parameter count");
    assert_eq!(x.shape().len(), 5, "generator input must be [N, C, z, y, x]");
    let lr: Vec<usize> = x.shape()[2..].to_vec();
    let mut h = x.clone();
    for (i, l) in spec.layers.iter().enumerate() {
        let small = [h.shape()[2], h.shape()[3], h.shape()[4]];
        let g = ConvGeom::transposed(small, [l.kernel; 3], [l.stride; 3], [l.pad; 3]).expect("valid generator geometry");
        h = ops::add_channel_bias(&ops::conv_transpose(&h, &params[2 * i], &g), &params[2 * i + 1]);
        if i + 1 < spec.layers.len() {
            h = h.relu();
        }
    }
    if spec.resample {
        for (a, &n) in lr.iter().enumerate() {
            let target = spec.sf.hr_side(n).expect("LR side compatible with sf");
            let map = Rc::new(cast_map::<T>(&trilinear_map(h.shape()[2 + a], target)));
            h = h.apply_axis_map(2 + a, &map);
        }
    }
    h.softmax_channels(T::one())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Critic<T> {
    pub spec: CriticSpec,
    pub params: Vec<Tensor<T>>,
}

impl<T: Element> Critic<T> {
    pub fn new<R: Rng + ?Sized>(spec: CriticSpec, rng: &mut R) -> Self {
        let fan: Vec<f64> = spec.layers.iter().map(|l| (l.in_ch * l.kernel * l.kernel) as f64).collect();
        let params = init_params(&spec.param_shapes(), &fan, rng);
        Critic { spec, params }
    }

    pub fn score(&self, x: &Tensor<T>) -> Tensor<T> {
        let p: Vec<Var<T>> = self.params.iter().cloned().map(Var::constant).collect();
        critic_forward(&self.spec, &p, &Var::constant(x.clone())).value().clone()
    }
}

/// `x` is `[N, C, v, u]`; returns `[N]` unbounded scores.
pub fn critic_forward<T: Element>(spec: &CriticSpec, params: &[Var<T>], x: &Var<T>) -> Var<T> {
    assert_eq!(params.len(), 2 * spec.layers.len(), "critic parameter count");
    assert_eq!(x.shape().len(), 4, "critic input must be [N, C, v, u]");
    let n = x.shape()[0];
    let mut h = x.clone();
    let slope = T::lit(spec.leaky_slope);
    for (i, l) in spec.layers.iter().enumerate() {
        let size = [1, h.shape()[2], h.shape()[3]];
        let g = ConvGeom::forward(size, [1, l.kernel, l.kernel], [1, l.stride, l.stride], [0, l.pad, l.pad])
            .expect("valid critic geometry");
        h = ops::add_channel_bias(&ops::conv(&h, &params[2 * i], &g), &params[2 * i + 1]);
        if i + 1 < spec.layers.len() {
            h = h.leaky_relu(slope);
        }
    }
    assert_eq!(&h.shape()[1..], &[1, 1, 1], "critic must reduce to one score per patch");
    h.reshape(&[n])
}

// ---------------------------------------------------------------------------
// crop and slice

/// Axis permutations of `[N, C, z, y, x]` that put the slicing axis next to
/// the batch and lay each plane out as `[C, v, u]`.
fn slice_perm(o: Orientation) -> [usize; 5] {
    match o {
        Orientation::Yz => [0, 4, 1, 2, 3],
        Orientation::Xz => [0, 3, 1, 2, 4],
        Orientation::Xy | Orientation::Isotropic => [0, 2, 1, 3, 4],
    }
}

/// Crops `crop` sites off every face of `[N, C, s, s, s]` and returns the
/// planes normal to x, y and z as `[N·(s - 2·crop), C, p, p]` batches.
pub fn slice_batches<T: Element>(sr: &Var<T>, crop: usize) -> [(Orientation, Var<T>); 3] {
    let sh = sr.shape().to_vec();
    assert_eq!(sh.len(), 5, "slice input must be [N, C, z, y, x]");
    let p = sh[2] - 2 * crop;
    assert!(sh[2] == sh[3] && sh[3] == sh[4] && sh[2] > 2 * crop, "slice input must be a cube larger than the crop");
    let cube = sr.crop(&[0, 0, crop, crop, crop], &[sh[0], sh[1], p, p, p]);
    Orientation::PLANES.map(|o| (o, cube.permute(&slice_perm(o)).reshape(&[sh[0] * p, sh[1], p, p])))
}

/// One-hot cube to orientation-tagged planes after cropping `crop` per face.
pub fn crop_and_slice_cube(sr: &OneHotField, crop: usize) -> Result<Vec<(Orientation, OneHotField)>> {
    let sp = sr.spatial();
    if sp.len() != 3 || sp[0] != sp[1] || sp[1] != sp[2] || sp[0] <= 2 * crop {
        return Err(Error::Shape(format!("crop and slice needs a cube larger than {}, got {sp:?}", 2 * crop)));
    }
    let c = sr.channels();
    let t = sr.tensor().clone().reshaped(&[1, c, sp[0], sp[1], sp[2]]);
    let batches = slice_batches(&Var::constant(t), crop);
    let p = sp[0] - 2 * crop;
    let mut out = Vec::with_capacity(3 * p);
    for (o, b) in batches {
        for chunk in b.value().data().chunks(c * p * p) {
            out.push((o, OneHotField::from_tensor(Tensor::from_vec(&[c, p, p], chunk.to_vec()))?));
        }
    }
    Ok(out)
}

/// The 168 planes (56 per axis) of a cropped 64³ cube.
pub fn crop_and_slice(sr: &OneHotField) -> Result<Vec<(Orientation, OneHotField)>> {
    if sr.spatial() != [TRAINING_CUBE; 3] {
        return Err(Error::Shape(format!("expected a {TRAINING_CUBE}³ field, got {:?}", sr.spatial())));
    }
    crop_and_slice_cube(sr, SLICE_CROP)
}
