//! Simulated low-resolution data and training-data augmentation.
//!
//! Every resampling step is a separable linear map expressed as one
//! [`AxisMap`] per axis, so the same operators drive both the label-space
//! degradation here and the differentiable downsampler used in training.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use voxfuse_autograd::{AxisMap, Element, Tensor};

use crate::error::{Error, Result};
use crate::volgrid::{merge_phases, one_hot_encode, OneHotField, Orientation, PhaseImage, PhaseMapping, PhaseVolume, ScaleFactor};

/// Separable Gaussian blur.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurSpec {
    pub k: usize,
    pub sigma: f64,
    /// Normalized 1D weights; the 3D kernel is their outer product.
    pub weights: Vec<f64>,
}

impl BlurSpec {
    pub fn new(k: usize, sigma: f64) -> Result<Self> {
        if k % 2 == 0 || !(sigma > 0.0) {
            return Err(Error::Config(format!("blur needs odd k and sigma > 0, got k={k}, sigma={sigma}")));
        }
        let half = (k / 2) as f64;
        let raw: Vec<f64> = (0..k)
            .map(|i| {
                let x = (i as f64 - half) / sigma;
                (-0.5 * x * x).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        Ok(BlurSpec { k, sigma, weights: raw.into_iter().map(|w| w / s).collect() })
    }

    pub fn radius(&self) -> usize {
        self.k / 2
    }

    pub fn weights_3d(&self) -> Vec<f64> {
        let w = &self.weights;
        let mut out = Vec::with_capacity(self.k.pow(3));
        for &a in w {
            for &b in w {
                for &c in w {
                    out.push(a * b * c);
                }
            }
        }
        out
    }
}

/// Odd kernel for a scale factor: `ceil(sf)`, less one when even; sigma follows
/// the usual `0.3 * ((k - 1) / 2 - 1) + 0.8` rule.
pub fn kernel_for(sf: ScaleFactor) -> BlurSpec {
    let c = sf.value().ceil() as usize;
    let k = if c % 2 == 1 { c } else { c - 1 };
    let sigma = 0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    BlurSpec::new(k, sigma).expect("kernel_for yields odd k and positive sigma")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeMode {
    /// Blur, trilinear downsample, threshold.
    UnderResolved,
    /// Strided nearest-site pick.
    UnderSampled,
}

impl DegradeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "under_resolved" => Ok(DegradeMode::UnderResolved),
            "under_sampled" => Ok(DegradeMode::UnderSampled),
            _ => Err(Error::Config(format!("unknown degrade mode '{s}'"))),
        }
    }
}

// ---------------------------------------------------------------------------
// 1D operators

/// Half-sample symmetric reflection into `0..n` (`-1 -> 0`, `n -> n - 1`).
fn reflect(i: isize, n: usize) -> usize {
    let p = 2 * n as isize;
    let m = i.rem_euclid(p);
    if m < n as isize { m as usize } else { (p - 1 - m) as usize }
}

/// Blur along one axis of length `n` with mirror padding.
pub fn blur_map(n: usize, spec: &BlurSpec) -> AxisMap<f64> {
    let r = spec.radius() as isize;
    let rows = (0..n as isize)
        .map(|j| {
            let mut row: Vec<(usize, f64)> = Vec::new();
            for (t, &w) in spec.weights.iter().enumerate() {
                let src = reflect(j + t as isize - r, n);
                match row.iter_mut().find(|e| e.0 == src) {
                    Some(e) => e.1 += w,
                    None => row.push((src, w)),
                }
            }
            row.sort_by_key(|e| e.0);
            row
        })
        .collect();
    AxisMap::new(n, rows)
}

/// Linear interpolation from `n_in` to `n_out` sites with half-pixel centres
/// (`src = (j + 0.5) * n_in / n_out - 0.5`, clamped at the low edge).
pub fn trilinear_map(n_in: usize, n_out: usize) -> AxisMap<f64> {
    let scale = n_in as f64 / n_out as f64;
    let rows = (0..n_out)
        .map(|j| {
            let src = ((j as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l = src - i0 as f64;
            if i0 == i1 || l == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - l), (i1, l)]
            }
        })
        .collect();
    AxisMap::new(n_in, rows)
}

/// Picks site `floor(j * n_in / n_out)` for each output `j`.
pub fn stride_map(n_in: usize, n_out: usize) -> AxisMap<f64> {
    AxisMap::new(n_in, (0..n_out).map(|j| vec![(j * n_in / n_out, 1.0)]).collect())
}

/// Full per-axis degradation operator from `n_in` HR sites to `n_in / sf` LR sites.
pub fn downsample_map(n_in: usize, sf: ScaleFactor, mode: DegradeMode) -> Result<AxisMap<f64>> {
    let n_out = sf
        .lr_side(n_in)
        .ok_or_else(|| Error::Shape(format!("length {n_in} is not divisible by scale factor {sf}")))?;
    if n_out == 0 {
        return Err(Error::TooSmall(format!("length {n_in} vanishes at scale factor {sf}")));
    }
    Ok(match mode {
        DegradeMode::UnderResolved => {
            let blur = kernel_for(sf);
            let down = trilinear_map(n_in, n_out);
            if blur.k == 1 { down } else { down.compose(&blur_map(n_in, &blur)) }
        }
        DegradeMode::UnderSampled => stride_map(n_in, n_out),
    })
}

pub fn cast_map<T: Element>(m: &AxisMap<f64>) -> AxisMap<T> {
    AxisMap::new(
        m.in_len(),
        m.rows().iter().map(|r| r.iter().map(|&(i, w)| (i, T::lit(w))).collect()).collect(),
    )
}

/// Channel-collapse operator summing HR channels into their LR targets.
pub fn merge_channel_map(mapping: &PhaseMapping) -> AxisMap<f64> {
    let rows = (0..mapping.targets())
        .map(|t| (0..mapping.sources()).filter(|&s| mapping.target_of(s) == t).map(|s| (s, 1.0)).collect())
        .collect();
    AxisMap::new(mapping.sources(), rows)
}

/// Applies `maps[a]` along trailing spatial axes of a `[.., nz, ny, nx]` tensor;
/// `maps` is ordered x, y, z.
pub fn apply_separable(t: &Tensor<f64>, maps: &[AxisMap<f64>; 3]) -> Tensor<f64> {
    let r = t.ndim();
    let mut out = maps[0].apply(t, r - 1);
    out = maps[1].apply(&out, r - 2);
    maps[2].apply(&out, r - 3)
}

// ---------------------------------------------------------------------------
// low-res simulation

/// Greyscale level per LR phase used before blurring and for re-segmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityMap(pub Vec<f64>);

impl IntensityMap {
    /// Phase 0 dark, phase 1 bright.
    pub fn binary() -> Self {
        IntensityMap(vec![0.0, 1.0])
    }

    /// Evenly spaced levels in `[0, 1]`.
    pub fn even(n: usize) -> Self {
        if n == 1 {
            return IntensityMap(vec![1.0]);
        }
        IntensityMap((0..n).map(|i| i as f64 / (n - 1) as f64).collect())
    }

    fn check(&self, phases: usize) -> Result<()> {
        if self.0.len() != phases {
            return Err(Error::Config(format!("{} intensities for {phases} phases", self.0.len())));
        }
        for i in 0..self.0.len() {
            for j in 0..i {
                if self.0[i] == self.0[j] {
                    return Err(Error::Config("phase intensities must be distinct".into()));
                }
            }
        }
        Ok(())
    }

    /// Nearest level; equidistant values go to the brighter phase, so with
    /// the binary map a value of exactly 0.5 is solid.
    pub fn classify(&self, g: f64) -> u8 {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            let (d, db) = ((g - v).abs(), (g - self.0[best]).abs());
            if d < db || (d == db && v > self.0[best]) {
                best = i;
            }
        }
        best as u8
    }
}

/// Crops each axis down to the nearest length that `sf` divides exactly.
pub fn crop_to_multiple(hr: &PhaseVolume, sf: ScaleFactor) -> Result<PhaseVolume> {
    let step = 64 / gcd(64, sf.divisor() as usize);
    let size = hr.dims().map(|n| n / step * step);
    if size.contains(&0) {
        return Err(Error::TooSmall(format!("{:?} is smaller than one LR voxel at sf {sf}", hr.dims())));
    }
    if size == hr.dims() {
        return Ok(hr.clone());
    }
    log::warn!("cropping {:?} to {size:?} so that sf {sf} divides it", hr.dims());
    hr.subvolume([0; 3], size)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

pub fn simulate_low_res(
    hr: &PhaseVolume,
    sf: ScaleFactor,
    merge_map: &PhaseMapping,
    intensities: &IntensityMap,
    mode: DegradeMode,
) -> Result<PhaseVolume> {
    let hr = crop_to_multiple(hr, sf)?;
    let merged = merge_phases(&hr, merge_map)?;
    intensities.check(merged.n_phases())?;
    let [nx, ny, nz] = merged.dims();
    let maps = [
        downsample_map(nx, sf, mode)?,
        downsample_map(ny, sf, mode)?,
        downsample_map(nz, sf, mode)?,
    ];
    let out_dims = [maps[0].out_len(), maps[1].out_len(), maps[2].out_len()];
    let pitch = merged.voxel_pitch() * sf.value();
    let labels = match mode {
        DegradeMode::UnderSampled => {
            let pick = |m: &AxisMap<f64>, j: usize| m.rows()[j][0].0;
            let mut out = Vec::with_capacity(out_dims.iter().product());
            for z in 0..out_dims[2] {
                for y in 0..out_dims[1] {
                    for x in 0..out_dims[0] {
                        out.push(merged.get(pick(&maps[0], x), pick(&maps[1], y), pick(&maps[2], z)));
                    }
                }
            }
            out
        }
        DegradeMode::UnderResolved => {
            let grey: Vec<f64> = merged.labels().iter().map(|&l| intensities.0[l as usize]).collect();
            let g = apply_separable(&Tensor::from_vec(&[nz, ny, nx], grey), &maps);
            g.data().iter().map(|&v| intensities.classify(v)).collect()
        }
    };
    PhaseVolume::new(out_dims, pitch, labels, merged.palette().to_vec())
}

// ---------------------------------------------------------------------------
// augmentation

/// An element of the square's symmetry group: rotate by `rot` quarter turns
/// (counter-clockwise in (u, v)), then mirror `u` if `mirror`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub rot: u8,
    pub mirror: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { rot: 0, mirror: false };

    /// All 8 elements; index 0 is the identity.
    pub fn all() -> [Dihedral; 8] {
        let mut out = [Self::IDENTITY; 8];
        for (i, d) in out.iter_mut().enumerate() {
            *d = Dihedral { rot: (i % 4) as u8, mirror: i >= 4 };
        }
        out
    }

    /// The 4 elements that map the u and v axes onto themselves.
    pub fn axis_preserving() -> [Dihedral; 4] {
        [
            Dihedral { rot: 0, mirror: false },
            Dihedral { rot: 2, mirror: false },
            Dihedral { rot: 0, mirror: true },
            Dihedral { rot: 2, mirror: true },
        ]
    }

    fn map(self, u: usize, v: usize, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let (mut u, mut v, mut w, mut h) = (u, v, w, h);
        for _ in 0..self.rot {
            (u, v, w, h) = (h - 1 - v, u, h, w);
        }
        if self.mirror {
            u = w - 1 - u;
        }
        (u, v, w, h)
    }

    pub fn inverse(self) -> Dihedral {
        if self.mirror { self } else { Dihedral { rot: (4 - self.rot) % 4, mirror: false } }
    }

    pub fn apply(self, img: &PhaseImage) -> PhaseImage {
        let [w, h] = img.dims();
        let (_, _, ow, oh) = self.map(0, 0, w, h);
        let mut labels = vec![0u8; w * h];
        for v in 0..h {
            for u in 0..w {
                let (a, b, _, _) = self.map(u, v, w, h);
                labels[a + ow * b] = img.get(u, v);
            }
        }
        PhaseImage::new([ow, oh], img.pixel_pitch(), labels, img.palette().to_vec(), img.orientation())
            .expect("a permutation of valid labels is valid")
    }
}

/// The 8 mirror/rotation variants, identity first.
pub fn dihedral_augment(img: &PhaseImage) -> Vec<PhaseImage> {
    Dihedral::all().iter().map(|d| d.apply(img)).collect()
}

/// High-res training images grouped by orientation.
///
/// An isotropic bank holds everything under [`Orientation::Isotropic`] with
/// full 8-fold augmentation. An anisotropic bank keys images by plane and
/// augments only with the axis-preserving subset, so the in-plane axes keep
/// their meaning; isotropic-tagged images are shared by every plane.
#[derive(Clone, Debug)]
pub struct HrSliceBank {
    groups: BTreeMap<Orientation, Vec<PhaseImage>>,
    palette: Vec<String>,
    anisotropic: bool,
}

impl HrSliceBank {
    pub fn new(images: Vec<PhaseImage>, anisotropic: bool, augment: bool) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Config("no high-res images".into()))?;
        let palette = first.palette().to_vec();
        if images.iter().any(|i| i.palette() != palette.as_slice()) {
            return Err(Error::Config("high-res images disagree on the palette".into()));
        }
        let mut groups: BTreeMap<Orientation, Vec<PhaseImage>> = BTreeMap::new();
        for img in images {
            let variants: Vec<PhaseImage> = match (augment, anisotropic) {
                (false, _) => vec![img],
                (true, false) => dihedral_augment(&img),
                (true, true) => Dihedral::axis_preserving().iter().map(|d| d.apply(&img)).collect(),
            };
            let keys: Vec<Orientation> = match (anisotropic, img_orientation(&variants[0])) {
                (false, _) => vec![Orientation::Isotropic],
                (true, Orientation::Isotropic) => Orientation::PLANES.to_vec(),
                (true, o) => vec![o],
            };
            for k in keys {
                groups.entry(k).or_default().extend(variants.iter().cloned());
            }
        }
        Ok(HrSliceBank { groups, palette, anisotropic })
    }

    pub fn is_anisotropic(&self) -> bool {
        self.anisotropic
    }

    pub fn palette(&self) -> &[String] {
        &self.palette
    }

    pub fn n_phases(&self) -> usize {
        self.palette.len()
    }

    /// Images serving `orientation`; an isotropic bank serves every request.
    pub fn images(&self, orientation: Orientation) -> &[PhaseImage] {
        let key = if self.anisotropic { orientation } else { Orientation::Isotropic };
        self.groups.get(&key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn orientations(&self) -> Vec<Orientation> {
        self.groups.keys().copied().collect()
    }

    /// Pixel-weighted phase fractions over every image.
    pub fn phase_fractions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.palette.len()];
        for imgs in self.groups.values() {
            for img in imgs {
                for (c, n) in counts.iter_mut().zip(img.phase_counts()) {
                    *c += n;
                }
            }
        }
        let total: usize = counts.iter().sum();
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    }
}

fn img_orientation(img: &PhaseImage) -> Orientation {
    img.orientation()
}

fn encode_region(img: &PhaseImage, u0: usize, v0: usize, size: usize, out: &mut [f64]) {
    let n = size * size;
    for v in 0..size {
        for u in 0..size {
            out[img.get(u0 + u, v0 + v) as usize * n + v * size + u] = 1.0;
        }
    }
}

/// A uniformly placed `size²` patch from a uniformly chosen image, one-hot encoded as `[C, size, size]`.
pub fn sample_hr_patch<R: Rng + ?Sized>(
    bank: &HrSliceBank,
    size: usize,
    orientation: Orientation,
    rng: &mut R,
) -> Result<OneHotField> {
    let imgs = bank.images(orientation);
    if imgs.is_empty() {
        return Err(Error::Config(format!("no high-res images for orientation {orientation:?}")));
    }
    if let Some(small) = imgs.iter().find(|i| i.dims()[0] < size || i.dims()[1] < size) {
        return Err(Error::TooSmall(format!("high-res image {:?} is smaller than a {size}² patch", small.dims())));
    }
    let img = &imgs[rng.random_range(0..imgs.len())];
    let [w, h] = img.dims();
    let u0 = rng.random_range(0..=w - size);
    let v0 = rng.random_range(0..=h - size);
    let c = bank.n_phases();
    let mut data = vec![0.0; c * size * size];
    encode_region(img, u0, v0, size, &mut data);
    OneHotField::from_tensor(Tensor::from_vec(&[c, size, size], data))
}

/// A uniformly placed LR cube of the given side, one-hot encoded, with its origin.
pub fn sample_lr_cube<R: Rng + ?Sized>(lr: &PhaseVolume, side: usize, rng: &mut R) -> Result<([usize; 3], OneHotField)> {
    let d = lr.dims();
    if d.iter().any(|&n| n < side) {
        return Err(Error::TooSmall(format!("low-res volume {d:?} is smaller than a {side}³ training cube")));
    }
    let origin = [
        rng.random_range(0..=d[0] - side),
        rng.random_range(0..=d[1] - side),
        rng.random_range(0..=d[2] - side),
    ];
    let cube = lr.subvolume(origin, [side; 3])?;
    Ok((origin, one_hot_encode(&cube)))
}

/// A training cube of side `64 / sf`, i.e. the LR footprint of a 64³ output.
pub fn sample_lr_patch<R: Rng + ?Sized>(lr: &PhaseVolume, sf: ScaleFactor, rng: &mut R) -> Result<OneHotField> {
    sample_lr_cube(lr, sf.divisor() as usize, rng).map(|(_, f)| f)
}
