//! Voxel and pixel phase maps, one-hot fields, and the volume container.
//!
//! Volumes are stored x-fastest: `index = x + nx * (y + ny * z)`. One-hot
//! fields are `[C, spatial...]` tensors with the slowest spatial axis first,
//! so a volume field is `[C, nz, ny, nx]` and an image field `[C, nv, nu]`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use voxfuse_autograd::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn parse(s: &str) -> Result<Axis> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            _ => Err(Error::Config(format!("unknown axis '{s}'"))),
        }
    }
}

/// Plane orientation of a 2D image. `Isotropic` images may stand in for any plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Xy,
    Yz,
    Xz,
    Isotropic,
}

impl Orientation {
    pub const PLANES: [Orientation; 3] = [Orientation::Yz, Orientation::Xz, Orientation::Xy];

    /// Axis perpendicular to the plane.
    pub fn normal(self) -> Option<Axis> {
        match self {
            Orientation::Yz => Some(Axis::X),
            Orientation::Xz => Some(Axis::Y),
            Orientation::Xy => Some(Axis::Z),
            Orientation::Isotropic => None,
        }
    }

    pub fn normal_to(axis: Axis) -> Orientation {
        match axis {
            Axis::X => Orientation::Yz,
            Axis::Y => Orientation::Xz,
            Axis::Z => Orientation::Xy,
        }
    }

    pub fn parse(s: &str) -> Result<Orientation> {
        match s.to_ascii_lowercase().as_str() {
            "xy" => Ok(Orientation::Xy),
            "yz" => Ok(Orientation::Yz),
            "xz" => Ok(Orientation::Xz),
            "isotropic" | "iso" => Ok(Orientation::Isotropic),
            _ => Err(Error::Config(format!("unknown orientation '{s}'"))),
        }
    }
}

/// Ratio of LR to HR pitch, restricted to `64 / d` for an integer `8 <= d <= 64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ScaleFactor {
    divisor: u32,
}

impl ScaleFactor {
    pub fn from_divisor(d: u32) -> Result<Self> {
        if (8..=64).contains(&d) {
            Ok(ScaleFactor { divisor: d })
        } else {
            Err(Error::InvalidScaleFactor(64.0 / d as f64))
        }
    }

    pub fn new(sf: f64) -> Result<Self> {
        if !(sf.is_finite() && sf > 0.0) {
            return Err(Error::InvalidScaleFactor(sf));
        }
        let d = 64.0 / sf;
        let r = d.round();
        if (d - r).abs() > 1e-9 * d.max(1.0) || !(8.0..=64.0).contains(&r) {
            return Err(Error::InvalidScaleFactor(sf));
        }
        Ok(ScaleFactor { divisor: r as u32 })
    }

    pub fn value(self) -> f64 {
        64.0 / self.divisor as f64
    }

    /// `d = 64 / sf`, which is also the LR side of a 64³ training cube.
    pub fn divisor(self) -> u32 {
        self.divisor
    }

    /// Integer sf, when 64 / d is whole.
    pub fn as_integer(self) -> Option<usize> {
        (64 % self.divisor == 0).then(|| (64 / self.divisor) as usize)
    }

    /// LR side whose upscale is an HR cube of side `hr`; `None` when fractional.
    pub fn lr_side(self, hr: usize) -> Option<usize> {
        let n = hr * self.divisor as usize;
        (n % 64 == 0).then_some(n / 64)
    }

    /// HR side produced from LR side `lr`; `None` when fractional.
    pub fn hr_side(self, lr: usize) -> Option<usize> {
        let n = lr * 64;
        (n % self.divisor as usize == 0).then(|| n / self.divisor as usize)
    }
}

impl TryFrom<f64> for ScaleFactor {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        ScaleFactor::new(v)
    }
}

impl From<ScaleFactor> for f64 {
    fn from(s: ScaleFactor) -> f64 {
        s.value()
    }
}

impl std::fmt::Display for ScaleFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.value())
    }
}

fn check_labels(labels: &[u8], palette: usize) -> Result<()> {
    if palette == 0 || palette > u8::MAX as usize + 1 {
        return Err(Error::Header(format!("palette must have 1..=256 phases, got {palette}")));
    }
    match labels.iter().find(|&&l| l as usize >= palette) {
        Some(&label) => Err(Error::LabelOutOfRange { label, palette }),
        None => Ok(()),
    }
}

/// A 3D grid of phase labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseVolume {
    dims: [usize; 3],
    voxel_pitch: f64,
    labels: Vec<u8>,
    palette: Vec<String>,
}

impl PhaseVolume {
    pub fn new(dims: [usize; 3], voxel_pitch: f64, labels: Vec<u8>, palette: Vec<String>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("volume dims must be >= 1, got {dims:?}")));
        }
        let n = dims.iter().product::<usize>();
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for dims {dims:?}", labels.len())));
        }
        check_labels(&labels, palette.len())?;
        Ok(PhaseVolume { dims, voxel_pitch, labels, palette })
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        voxel_pitch: f64,
        palette: Vec<String>,
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> Result<Self> {
        let mut labels = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    labels.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, voxel_pitch, labels, palette)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_pitch(&self) -> f64 {
        self.voxel_pitch
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn palette(&self) -> &[String] {
        &self.palette
    }

    pub fn n_phases(&self) -> usize {
        self.palette.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.index(x, y, z)]
    }

    pub fn with_pitch(mut self, pitch: f64) -> Self {
        self.voxel_pitch = pitch;
        self
    }

    pub fn phase_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.palette.len()];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    /// Copy of the box `[origin, origin + size)`.
    pub fn subvolume(&self, origin: [usize; 3], size: [usize; 3]) -> Result<PhaseVolume> {
        for a in 0..3 {
            if size[a] == 0 || origin[a] + size[a] > self.dims[a] {
                return Err(Error::Shape(format!(
                    "subvolume {origin:?}+{size:?} outside {:?}",
                    self.dims
                )));
            }
        }
        PhaseVolume::from_fn(size, self.voxel_pitch, self.palette.clone(), |x, y, z| {
            self.get(x + origin[0], y + origin[1], z + origin[2])
        })
    }

    /// Removes `n` layers from every face.
    pub fn crop_faces(&self, n: usize) -> Result<PhaseVolume> {
        let size = self.dims.map(|d| d.saturating_sub(2 * n));
        if size.contains(&0) {
            return Err(Error::TooSmall(format!("cannot crop {n} layers from {:?}", self.dims)));
        }
        self.subvolume([n; 3], size)
    }
}

/// A 2D grid of phase labels; `u` is the fast axis.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseImage {
    dims: [usize; 2],
    pixel_pitch: f64,
    labels: Vec<u8>,
    palette: Vec<String>,
    orientation: Orientation,
}

impl PhaseImage {
    pub fn new(
        dims: [usize; 2],
        pixel_pitch: f64,
        labels: Vec<u8>,
        palette: Vec<String>,
        orientation: Orientation,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("image dims must be >= 1, got {dims:?}")));
        }
        if labels.len() != dims[0] * dims[1] {
            return Err(Error::Shape(format!("{} labels for dims {dims:?}", labels.len())));
        }
        check_labels(&labels, palette.len())?;
        Ok(PhaseImage { dims, pixel_pitch, labels, palette, orientation })
    }

    pub fn from_fn(
        dims: [usize; 2],
        pixel_pitch: f64,
        palette: Vec<String>,
        orientation: Orientation,
        mut f: impl FnMut(usize, usize) -> u8,
    ) -> Result<Self> {
        let mut labels = Vec::with_capacity(dims[0] * dims[1]);
        for v in 0..dims[1] {
            for u in 0..dims[0] {
                labels.push(f(u, v));
            }
        }
        Self::new(dims, pixel_pitch, labels, palette, orientation)
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn palette(&self) -> &[String] {
        &self.palette
    }

    pub fn n_phases(&self) -> usize {
        self.palette.len()
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> u8 {
        self.labels[u + self.dims[0] * v]
    }

    pub fn phase_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.palette.len()];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    /// Embeds the image as a one-voxel-thick volume (its plane becomes x-y).
    pub fn as_volume(&self) -> PhaseVolume {
        PhaseVolume {
            dims: [self.dims[0], self.dims[1], 1],
            voxel_pitch: self.pixel_pitch,
            labels: self.labels.clone(),
            palette: self.palette.clone(),
        }
    }
}

/// Anything with a label grid and palette.
pub trait PhaseMap {
    fn labels(&self) -> &[u8];
    fn palette(&self) -> &[String];
    /// Spatial shape, slowest axis first.
    fn spatial_shape(&self) -> Vec<usize>;
}

impl PhaseMap for PhaseVolume {
    fn labels(&self) -> &[u8] {
        &self.labels
    }
    fn palette(&self) -> &[String] {
        &self.palette
    }
    fn spatial_shape(&self) -> Vec<usize> {
        vec![self.dims[2], self.dims[1], self.dims[0]]
    }
}

impl PhaseMap for PhaseImage {
    fn labels(&self) -> &[u8] {
        &self.labels
    }
    fn palette(&self) -> &[String] {
        &self.palette
    }
    fn spatial_shape(&self) -> Vec<usize> {
        vec![self.dims[1], self.dims[0]]
    }
}

/// Per-site probability channels, shape `[C, spatial...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotField {
    values: Tensor<f64>,
}

impl OneHotField {
    pub fn from_tensor(values: Tensor<f64>) -> Result<Self> {
        if values.ndim() < 2 {
            return Err(Error::Shape(format!("one-hot field needs [C, ...], got {:?}", values.shape())));
        }
        if values.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Shape("one-hot values must be non-negative".into()));
        }
        Ok(OneHotField { values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn spatial(&self) -> &[usize] {
        &self.values.shape()[1..]
    }

    pub fn sites(&self) -> usize {
        self.spatial().iter().product()
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor<f64> {
        self.values
    }

    #[inline]
    pub fn value(&self, channel: usize, site: usize) -> f64 {
        self.values.data()[channel * self.sites() + site]
    }

    /// Largest deviation of a per-site channel sum from 1.
    pub fn max_sum_error(&self) -> f64 {
        let s = self.sites();
        (0..s)
            .map(|i| ((0..self.channels()).map(|c| self.value(c, i)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_hard(&self) -> bool {
        let s = self.sites();
        (0..s).all(|i| {
            let ones = (0..self.channels()).filter(|&c| self.value(c, i) == 1.0).count();
            let zeros = (0..self.channels()).filter(|&c| self.value(c, i) == 0.0).count();
            ones == 1 && ones + zeros == self.channels()
        })
    }
}

pub fn one_hot_encode(v: &impl PhaseMap) -> OneHotField {
    let c = v.palette().len();
    let labels = v.labels();
    let n = labels.len();
    let mut data = vec![0.0; c * n];
    for (i, &l) in labels.iter().enumerate() {
        data[l as usize * n + i] = 1.0;
    }
    let mut shape = vec![c];
    shape.extend(v.spatial_shape());
    OneHotField { values: Tensor::from_vec(&shape, data) }
}

/// Per-site argmax; ties go to the lowest channel index.
pub fn argmax_labels(f: &OneHotField) -> Vec<u8> {
    let (c, n) = (f.channels(), f.sites());
    let d = f.values.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for ch in 1..c {
                if d[ch * n + i] > d[best * n + i] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect()
}

fn check_decode(f: &OneHotField, palette: &[String]) -> Result<()> {
    if f.channels() != palette.len() {
        return Err(Error::Shape(format!("{} channels for a {}-phase palette", f.channels(), palette.len())));
    }
    Ok(())
}

pub fn one_hot_decode_volume(f: &OneHotField, palette: &[String], voxel_pitch: f64) -> Result<PhaseVolume> {
    check_decode(f, palette)?;
    let sp = f.spatial();
    if sp.len() != 3 {
        return Err(Error::Shape(format!("expected a 3D field, got spatial {sp:?}")));
    }
    PhaseVolume::new([sp[2], sp[1], sp[0]], voxel_pitch, argmax_labels(f), palette.to_vec())
}

pub fn one_hot_decode_image(
    f: &OneHotField,
    palette: &[String],
    pixel_pitch: f64,
    orientation: Orientation,
) -> Result<PhaseImage> {
    check_decode(f, palette)?;
    let sp = f.spatial();
    if sp.len() != 2 {
        return Err(Error::Shape(format!("expected a 2D field, got spatial {sp:?}")));
    }
    PhaseImage::new([sp[1], sp[0]], pixel_pitch, argmax_labels(f), palette.to_vec(), orientation)
}

/// A total relabelling `old -> new` whose image is `0..k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseMapping {
    map: Vec<usize>,
    targets: usize,
}

impl PhaseMapping {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        if map.is_empty() {
            return Err(Error::Mapping("empty mapping".into()));
        }
        let targets = map.iter().max().unwrap() + 1;
        for t in 0..targets {
            if !map.contains(&t) {
                return Err(Error::Mapping(format!("target labels are not contiguous: {t} unused")));
            }
        }
        Ok(PhaseMapping { map, targets })
    }

    pub fn identity(n: usize) -> Self {
        PhaseMapping { map: (0..n).collect(), targets: n }
    }

    /// Parses `"0=0,1=1,2=0"`; every source in `0..n_sources` must appear once.
    pub fn parse(s: &str, n_sources: usize) -> Result<Self> {
        let mut map = vec![None; n_sources];
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (a, b) = part
                .split_once('=')
                .ok_or_else(|| Error::Mapping(format!("expected old=new, got '{part}'")))?;
            let (a, b): (usize, usize) = (
                a.trim().parse().map_err(|_| Error::Mapping(format!("bad label '{a}'")))?,
                b.trim().parse().map_err(|_| Error::Mapping(format!("bad label '{b}'")))?,
            );
            if a >= n_sources {
                return Err(Error::Mapping(format!("source {a} outside a {n_sources}-phase palette")));
            }
            if map[a].replace(b).is_some() {
                return Err(Error::Mapping(format!("source {a} mapped twice")));
            }
        }
        let map: Option<Vec<usize>> = map.into_iter().collect();
        Self::new(map.ok_or_else(|| Error::Mapping("mapping is not total over the palette".into()))?)
    }

    pub fn sources(&self) -> usize {
        self.map.len()
    }

    pub fn targets(&self) -> usize {
        self.targets
    }

    pub fn target_of(&self, source: usize) -> usize {
        self.map[source]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &t)| i == t)
    }

    /// Palette of the merged classes; merged names are joined with `+`.
    pub fn merged_palette(&self, palette: &[String]) -> Vec<String> {
        (0..self.targets)
            .map(|t| {
                let names: Vec<&str> =
                    self.map.iter().enumerate().filter(|(_, &m)| m == t).map(|(i, _)| palette[i].as_str()).collect();
                names.join("+")
            })
            .collect()
    }

    fn check(&self, palette_len: usize) -> Result<()> {
        if self.map.len() != palette_len {
            return Err(Error::Mapping(format!(
                "mapping covers {} phases, palette has {palette_len}",
                self.map.len()
            )));
        }
        Ok(())
    }
}

fn relabel(labels: &[u8], mapping: &PhaseMapping) -> Vec<u8> {
    labels.iter().map(|&l| mapping.target_of(l as usize) as u8).collect()
}

pub fn merge_phases(v: &PhaseVolume, mapping: &PhaseMapping) -> Result<PhaseVolume> {
    mapping.check(v.n_phases())?;
    PhaseVolume::new(v.dims, v.voxel_pitch, relabel(&v.labels, mapping), mapping.merged_palette(&v.palette))
}

pub fn merge_image_phases(img: &PhaseImage, mapping: &PhaseMapping) -> Result<PhaseImage> {
    mapping.check(img.n_phases())?;
    PhaseImage::new(
        img.dims,
        img.pixel_pitch,
        relabel(&img.labels, mapping),
        mapping.merged_palette(&img.palette),
        img.orientation,
    )
}

/// The plane `index` perpendicular to `axis`.
///
/// Normal x gives (u, v) = (y, z); normal y gives (x, z); normal z gives (x, y).
pub fn extract_slice(v: &PhaseVolume, axis: Axis, index: usize) -> Result<PhaseImage> {
    let [nx, ny, nz] = v.dims;
    let len = v.dims[axis.index()];
    if index >= len {
        return Err(Error::IndexOutOfRange { index, len });
    }
    let orientation = Orientation::normal_to(axis);
    let pal = v.palette.clone();
    let pitch = v.voxel_pitch;
    match axis {
        Axis::X => PhaseImage::from_fn([ny, nz], pitch, pal, orientation, |u, w| v.get(index, u, w)),
        Axis::Y => PhaseImage::from_fn([nx, nz], pitch, pal, orientation, |u, w| v.get(u, index, w)),
        Axis::Z => PhaseImage::from_fn([nx, ny], pitch, pal, orientation, |u, w| v.get(u, w, index)),
    }
}

/// The six boundary planes, ordered x=0, x=max, y=0, y=max, z=0, z=max.
pub fn extract_facets(v: &PhaseVolume) -> Vec<PhaseImage> {
    let mut out = Vec::with_capacity(6);
    for axis in Axis::ALL {
        let last = v.dims[axis.index()] - 1;
        for index in [0, last] {
            out.push(extract_slice(v, axis, index).expect("boundary index is in range"));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// container format

const FORMAT_NAME: &str = "voxfuse-volume";

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    format: String,
    version: u32,
    dims: [usize; 3],
    voxel_pitch_nm: f64,
    palette: Vec<String>,
    encoding: String,
    axis_order: String,
}

/// Serializes to the container: one JSON header line, then `nx*ny*nz` raw bytes.
pub fn encode_volume(v: &PhaseVolume) -> Vec<u8> {
    let header = VolumeHeader {
        format: FORMAT_NAME.into(),
        version: 1,
        dims: v.dims,
        voxel_pitch_nm: v.voxel_pitch,
        palette: v.palette.clone(),
        encoding: "u8".into(),
        axis_order: "x-fastest".into(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(&v.labels);
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<PhaseVolume> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Header("no header line".into()))?;
    let header: VolumeHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Header(e.to_string()))?;
    if header.format != FORMAT_NAME || header.version != 1 {
        return Err(Error::Header(format!("unsupported format {} v{}", header.format, header.version)));
    }
    if header.encoding != "u8" || header.axis_order != "x-fastest" {
        return Err(Error::Header(format!(
            "unsupported encoding {} / axis order {}",
            header.encoding, header.axis_order
        )));
    }
    let payload = &bytes[nl + 1..];
    let expected: usize = header.dims.iter().product();
    if payload.len() < expected {
        return Err(Error::TruncatedPayload { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(Error::Header(format!("{} trailing bytes after payload", payload.len() - expected)));
    }
    PhaseVolume::new(header.dims, header.voxel_pitch_nm, payload.to_vec(), header.palette)
}

pub fn save_volume(v: &PhaseVolume, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: &Path) -> Result<PhaseVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

// ---------------------------------------------------------------------------
// greyscale image ingestion

/// Greyscale value → label table read from `grey=label` lines.
///
/// An optional `palette=name,name,...` line names the phases; `#` starts a comment.
#[derive(Clone, Debug, PartialEq)]
pub struct PaletteMap {
    grey_to_label: BTreeMap<u8, u8>,
    palette: Vec<String>,
}

impl PaletteMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut grey_to_label = BTreeMap::new();
        let mut names: Option<Vec<String>> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, val) = line
                .split_once('=')
                .ok_or_else(|| Error::Header(format!("palette map line {}: expected key=value", no + 1)))?;
            let (k, val) = (k.trim(), val.trim());
            if k == "palette" {
                names = Some(val.split(',').map(|s| s.trim().to_string()).collect());
                continue;
            }
            let grey: u8 = k.parse().map_err(|_| Error::Header(format!("line {}: bad grey value '{k}'", no + 1)))?;
            let label: u8 = val.parse().map_err(|_| Error::Header(format!("line {}: bad label '{val}'", no + 1)))?;
            if grey_to_label.insert(grey, label).is_some() {
                return Err(Error::Header(format!("line {}: grey value {grey} listed twice", no + 1)));
            }
        }
        if grey_to_label.is_empty() {
            return Err(Error::Header("palette map has no entries".into()));
        }
        let n = *grey_to_label.values().max().unwrap() as usize + 1;
        let palette = match names {
            Some(p) if p.len() == n => p,
            Some(p) => {
                return Err(Error::Header(format!("palette names {} phases, labels use {n}", p.len())));
            }
            None => (0..n).map(|i| format!("phase{i}")).collect(),
        };
        Ok(PaletteMap { grey_to_label, palette })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn palette(&self) -> &[String] {
        &self.palette
    }

    pub fn label(&self, grey: u8) -> Result<u8> {
        self.grey_to_label
            .get(&grey)
            .copied()
            .ok_or_else(|| Error::Image(format!("grey value {grey} not in palette map")))
    }
}

fn read_grey(path: &Path) -> Result<image::GrayImage> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(img.into_luma8())
}

/// Loads one segmented greyscale image; image rows become the `v` axis.
pub fn load_image(path: &Path, map: &PaletteMap, pixel_pitch: f64, orientation: Orientation) -> Result<PhaseImage> {
    let g = read_grey(path)?;
    let labels = g.pixels().map(|p| map.label(p.0[0])).collect::<Result<Vec<u8>>>()?;
    PhaseImage::new([g.width() as usize, g.height() as usize], pixel_pitch, labels, map.palette.clone(), orientation)
}

/// Stacks one greyscale image per z-slice, in the given order.
pub fn load_image_stack(paths: &[impl AsRef<Path>], map: &PaletteMap, voxel_pitch: f64) -> Result<PhaseVolume> {
    let mut labels = Vec::new();
    let mut wh = None;
    for p in paths {
        let img = load_image(p.as_ref(), map, voxel_pitch, Orientation::Xy)?;
        match wh {
            None => wh = Some(img.dims()),
            Some(d) if d != img.dims() => {
                return Err(Error::Shape(format!("{} is {:?}, stack is {d:?}", p.as_ref().display(), img.dims())));
            }
            _ => {}
        }
        labels.extend_from_slice(img.labels());
    }
    let [w, h] = wh.ok_or_else(|| Error::Shape("empty image stack".into()))?;
    PhaseVolume::new([w, h, paths.len()], voxel_pitch, labels, map.palette.clone())
}

/// Writes labels as evenly spaced grey levels.
pub fn save_image_png(img: &PhaseImage, path: &Path) -> Result<()> {
    let n = img.n_phases().max(2) - 1;
    let [w, h] = img.dims();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |u, v| {
        image::Luma([(img.get(u as usize, v as usize) as usize * 255 / n) as u8])
    });
    buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pal(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    fn vol(dims: [usize; 3], n: usize, seed: u64) -> PhaseVolume {
        let mut s = seed;
        PhaseVolume::from_fn(dims, 1.0, pal(n), |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) % n as u64) as u8
        })
        .unwrap()
    }

    #[test]
    fn scale_factor_set() {
        let valid: Vec<u32> = (1..=200u32)
            .filter_map(|i| ScaleFactor::new(i as f64 / 20.0).ok())
            .map(|s| s.divisor())
            .collect();
        assert!(valid.iter().all(|d| (8..=64).contains(d)));
        assert_eq!(ScaleFactor::new(4.0).unwrap().divisor(), 16);
        assert_eq!(ScaleFactor::new(1.6).unwrap().divisor(), 40);
        assert!(ScaleFactor::new(5.0).is_err());
        assert!(ScaleFactor::new(0.5).is_err());
        assert!(ScaleFactor::new(16.0).is_err());
        assert_eq!(ScaleFactor::new(4.0).unwrap().lr_side(64), Some(16));
        assert_eq!(ScaleFactor::new(1.6).unwrap().lr_side(64), Some(40));
        assert_eq!(ScaleFactor::new(8.0).unwrap().hr_side(16), Some(128));
    }

    #[test]
    fn container_round_trip() {
        let v = vol([8, 8, 8], 3, 1).with_pitch(12.5);
        let back = decode_volume(&encode_volume(&v)).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let v = vol([4, 4, 4], 2, 2);
        let mut bytes = encode_volume(&v);
        bytes.truncate(bytes.len() - 3);
        let err = decode_volume(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated payload"), "{err}");
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let v = vol([2, 2, 2], 3, 3);
        let mut bytes = encode_volume(&v);
        let last = bytes.len() - 1;
        bytes[last] = 3;
        let err = decode_volume(&bytes).unwrap_err();
        assert!(err.to_string().contains("label out of range"), "{err}");
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(load_volume(Path::new("/nonexistent/vol.vxf")), Err(Error::Io { .. })));
    }

    #[test]
    fn encode_single_label() {
        let v = PhaseVolume::new([1, 1, 1], 1.0, vec![1], pal(3)).unwrap();
        let f = one_hot_encode(&v);
        assert_eq!(f.tensor().data(), &[0.0, 1.0, 0.0]);
        assert!(f.is_hard());
    }

    #[test]
    fn all_pore_encodes_to_channel_zero() {
        let v = PhaseVolume::new([3, 2, 2], 1.0, vec![0; 12], pal(3)).unwrap();
        let f = one_hot_encode(&v);
        let d = f.tensor().data();
        assert!(d[..12].iter().all(|&x| x == 1.0));
        assert!(d[12..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn decode_argmax_and_ties() {
        let f = OneHotField::from_tensor(Tensor::from_vec(&[3, 1, 1, 1], vec![0.2, 0.7, 0.1])).unwrap();
        assert_eq!(one_hot_decode_volume(&f, &pal(3), 1.0).unwrap().labels(), &[1]);
        let t = OneHotField::from_tensor(Tensor::from_vec(&[2, 1, 1, 1], vec![0.5, 0.5])).unwrap();
        assert_eq!(one_hot_decode_volume(&t, &pal(2), 1.0).unwrap().labels(), &[0]);
        assert!(one_hot_decode_volume(&t, &pal(3), 1.0).is_err());
    }

    #[test]
    fn decode_inverts_encode() {
        let v = vol([6, 6, 6], 3, 4);
        assert_eq!(one_hot_decode_volume(&one_hot_encode(&v), v.palette(), 1.0).unwrap(), v);
    }

    #[test]
    fn merge_relabels() {
        let v = PhaseVolume::new([3, 1, 1], 1.0, vec![0, 1, 2], pal(3)).unwrap();
        let m = PhaseMapping::parse("0=0,2=0,1=1", 3).unwrap();
        let merged = merge_phases(&v, &m).unwrap();
        assert_eq!(merged.labels(), &[0, 1, 0]);
        assert_eq!(merged.palette(), &["p0+p2".to_string(), "p1".to_string()]);
        assert_eq!(merge_phases(&v, &PhaseMapping::identity(3)).unwrap(), v);
    }

    #[test]
    fn merge_preserves_fraction_sums() {
        let v = vol([7, 5, 6], 3, 5);
        let m = PhaseMapping::new(vec![0, 1, 0]).unwrap();
        let merged = merge_phases(&v, &m).unwrap();
        // brute-force voxel count
        let old = v.labels().iter().filter(|&&l| l == 0 || l == 2).count();
        let new = merged.labels().iter().filter(|&&l| l == 0).count();
        assert_eq!(old, new);
        assert_eq!(merged.len(), v.len());
    }

    #[test]
    fn invalid_mappings() {
        assert!(PhaseMapping::new(vec![0, 2]).is_err());
        assert!(PhaseMapping::parse("0=0,1=1", 3).is_err());
        assert!(PhaseMapping::parse("0=0,0=1,1=1", 2).is_err());
        let v = vol([2, 2, 2], 3, 6);
        assert!(merge_phases(&v, &PhaseMapping::identity(2)).is_err());
    }

    #[test]
    fn facets_of_separator_sized_volume() {
        let v = PhaseVolume::new([624, 300, 300], 1.0, vec![0; 624 * 300 * 300], pal(2)).unwrap();
        let facets = extract_facets(&v);
        assert_eq!(facets.len(), 6);
        let rect = facets.iter().filter(|f| f.dims() == [624, 300]).count();
        let square = facets.iter().filter(|f| f.dims() == [300, 300]).count();
        assert_eq!((rect, square), (4, 2));
    }

    #[test]
    fn facets_of_single_voxel() {
        let v = PhaseVolume::new([1, 1, 1], 1.0, vec![1], pal(2)).unwrap();
        let f = extract_facets(&v);
        assert!(f.iter().all(|i| i.dims() == [1, 1] && i.labels() == [1]));
    }

    #[test]
    fn facets_tile_the_boundary() {
        let v = vol([4, 5, 3], 3, 7);
        let f = extract_facets(&v);
        let [nx, ny, nz] = v.dims();
        for z in 0..nz {
            for y in 0..ny {
                assert_eq!(f[0].get(y, z), v.get(0, y, z));
                assert_eq!(f[1].get(y, z), v.get(nx - 1, y, z));
            }
            for x in 0..nx {
                assert_eq!(f[2].get(x, z), v.get(x, 0, z));
                assert_eq!(f[3].get(x, z), v.get(x, ny - 1, z));
            }
        }
        for y in 0..ny {
            for x in 0..nx {
                assert_eq!(f[4].get(x, y), v.get(x, y, 0));
                assert_eq!(f[5].get(x, y), v.get(x, y, nz - 1));
            }
        }
        assert_eq!(f[0].orientation(), Orientation::Yz);
        assert_eq!(f[2].orientation(), Orientation::Xz);
        assert_eq!(f[4].orientation(), Orientation::Xy);
    }

    #[test]
    fn slices() {
        let c = PhaseVolume::new([3, 3, 3], 1.0, vec![2; 27], pal(3)).unwrap();
        assert!(extract_slice(&c, Axis::Z, 0).unwrap().labels().iter().all(|&l| l == 2));
        assert!(matches!(extract_slice(&c, Axis::Y, 3), Err(Error::IndexOutOfRange { .. })));

        let v = vol([4, 3, 5], 3, 8);
        for axis in Axis::ALL {
            let s = extract_slice(&v, axis, 1).unwrap();
            let enc_slice = one_hot_encode(&s);
            // slice of the one-hot field, taken directly from the tensor
            let f = one_hot_encode(&v);
            let [nx, ny, nz] = v.dims();
            let mut direct = Vec::new();
            for ch in 0..3 {
                let (nu, nv) = (s.dims()[0], s.dims()[1]);
                for w in 0..nv {
                    for u in 0..nu {
                        let (x, y, z) = match axis {
                            Axis::X => (1, u, w),
                            Axis::Y => (u, 1, w),
                            Axis::Z => (u, w, 1),
                        };
                        direct.push(f.value(ch, x + nx * (y + ny * z)));
                    }
                }
            }
            let _ = nz;
            assert_eq!(enc_slice.tensor().data(), &direct[..]);
        }
    }

    #[test]
    fn palette_map_parsing() {
        let m = PaletteMap::parse("# cathode\npalette=pore,am,binder\n0=0\n128=1\n255=2\n").unwrap();
        assert_eq!(m.palette().len(), 3);
        assert_eq!(m.label(128).unwrap(), 1);
        assert!(m.label(7).is_err());
        assert!(PaletteMap::parse("palette=a\n0=0\n1=1\n").is_err());
    }

    #[test]
    fn image_stack_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let map = PaletteMap::parse("0=0\n255=1\n").unwrap();
        let mut paths = Vec::new();
        for z in 0..3u32 {
            let img = image::GrayImage::from_fn(4, 2, |x, y| image::Luma([if (x + y + z) % 2 == 0 { 255 } else { 0 }]));
            let p = dir.path().join(format!("slice_{z:03}.png"));
            img.save(&p).unwrap();
            paths.push(p);
        }
        let v = load_image_stack(&paths, &map, 2.0).unwrap();
        assert_eq!(v.dims(), [4, 2, 3]);
        for z in 0..3 {
            for y in 0..2 {
                for x in 0..4 {
                    assert_eq!(v.get(x, y, z), ((x + y + z) % 2 == 0) as u8);
                }
            }
        }
    }
}
