//! Experiment orchestration: configuration, the prepare → train → generate →
//! evaluate → report pipeline, report emission and run manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::{apply_separable, blur_map, kernel_for, simulate_low_res, DegradeMode, HrSliceBank, IntensityMap};
use crate::error::{Error, Result};
use crate::figures::{distribution_chart, line_chart, Column};
use crate::fixtures::{self, FixtureKind};
use crate::metrics::{
    chord_length_distribution, interphase_surface_area, mean_profile, phase_fft_profile, two_point_correlation,
    volume_fraction, MetricSpec, MetricValue, MetricsReport,
};
use crate::synth::{boundary_layers, generate_ensemble, Model, SynthRequest};
use crate::trainer::{
    downsample_field, load_checkpoint, load_checkpoint_for, resume, validate_inputs, CheckpointSink, TrainConfig,
    TrainState,
};
use crate::volgrid::{
    extract_slice, load_image, load_volume, one_hot_encode, save_image_png, save_volume, Axis, Orientation, PaletteMap,
    PhaseImage, PhaseMapping, PhaseVolume, ScaleFactor,
};

// ---------------------------------------------------------------------------
// stages

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Prepare,
    Train,
    Generate,
    Evaluate,
    Report,
}

impl Stage {
    pub const PIPELINE: [Stage; 5] = [Stage::Prepare, Stage::Train, Stage::Generate, Stage::Evaluate, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Prepare => "prepare",
            Stage::Train => "train",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Process exit code for a failure in this stage.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Prepare => 3,
            Stage::Train => 4,
            Stage::Generate => 5,
            Stage::Evaluate => 6,
            Stage::Report => 7,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub type StageResult<T> = std::result::Result<T, StageError>;

trait Tag<T> {
    fn stage(self, stage: Stage) -> StageResult<T>;
}

impl<T> Tag<T> for Result<T> {
    fn stage(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| StageError { stage, source })
    }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Built-in synthetic ground truth.
    pub fixture: Option<FixtureKind>,
    #[serde(default = "default_fixture_size")]
    pub fixture_size: usize,
    #[serde(default)]
    pub fixture_seed: u64,
    /// High-res ground-truth volume from which the low-res input is simulated.
    pub hr_volume: Option<PathBuf>,
    /// Measured low-res volume.
    pub lr_volume: Option<PathBuf>,
    /// High-res segmented images (PNG), read through `palette`.
    #[serde(default)]
    pub hr_images: Vec<PathBuf>,
    /// Plane of each entry of `hr_images` (`xy`, `yz`, `xz`); isotropic when empty.
    #[serde(default)]
    pub hr_orientations: Vec<String>,
    /// Greyscale → phase table for the HR images.
    pub palette: Option<PathBuf>,
    #[serde(default = "one")]
    pub hr_pitch: f64,
    /// Greyscale intensity of each LR phase for simulated degradation.
    pub intensities: Option<Vec<f64>>,
    #[serde(default = "yes")]
    pub augment: bool,
}

fn default_fixture_size() -> usize {
    96
}
fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    /// Noise seeds; defaults to the run seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "yes")]
    pub crop_boundary: bool,
    pub tile: Option<usize>,
    #[serde(default)]
    pub checkpoint: CheckpointChoice,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { seeds: Vec::new(), crop_boundary: true, tile: None, checkpoint: CheckpointChoice::Latest }
    }
}

/// Which training checkpoint the generate stage uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointChoice {
    /// The final iterate.
    #[default]
    Latest,
    /// The saved checkpoint whose output best matches the training data
    /// (see [`inspect_checkpoints`]).
    Inspect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub transport: bool,
    /// Longest lag of correlation and chord-length curves.
    pub curve_length: usize,
    /// Phases averaged in spectral profiles; all but phase 0 when empty.
    pub fft_phases: Vec<usize>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig { n: 64, size: 64, seed: 0, transport: false, curve_length: 20, fft_phases: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: String,
    #[serde(default)]
    seed: u64,
    sf: f64,
    #[serde(default = "default_mode")]
    mode: DegradeMode,
    /// HR → LR phase map, e.g. `0=0,1=1,2=0`; identity when omitted.
    merge: Option<String>,
    #[serde(default)]
    anisotropic: bool,
    out: Option<PathBuf>,
    data: DataConfig,
    #[serde(default)]
    train: toml::Table,
    #[serde(default)]
    generate: GenerateConfig,
    #[serde(default)]
    evaluate: EvaluateConfig,
}

fn default_mode() -> DegradeMode {
    DegradeMode::UnderResolved
}

/// A validated experiment. Relative paths are resolved against the config file.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub sf: ScaleFactor,
    pub mode: DegradeMode,
    pub merge: Option<String>,
    pub anisotropic: bool,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    /// Without the merge map, which is resolved once the HR palette is known.
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub evaluate: EvaluateConfig,
    /// Source text, recorded in the manifest.
    pub source: String,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for key in ["sf", "mode", "merge_map", "anisotropic"] {
            if raw.train.contains_key(key) {
                return Err(Error::Config(format!("`{key}` belongs at the top level, not in [train]")));
            }
        }
        let sf = ScaleFactor::new(raw.sf)?;
        let mut train: TrainConfig =
            toml::Value::Table(raw.train).try_into().map_err(|e: toml::de::Error| Error::Config(format!("[train]: {e}")))?;
        train.sf = sf;
        train.mode = raw.mode;
        train.anisotropic = raw.anisotropic;
        let abs = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let mut data = raw.data;
        data.hr_volume = data.hr_volume.map(abs);
        data.lr_volume = data.lr_volume.map(abs);
        data.palette = data.palette.map(abs);
        data.hr_images = data.hr_images.into_iter().map(abs).collect();
        let cfg = ExperimentConfig {
            name: raw.name,
            seed: raw.seed,
            sf,
            mode: raw.mode,
            merge: raw.merge,
            anisotropic: raw.anisotropic,
            out: raw.out.map(abs),
            data,
            train,
            generate: raw.generate,
            evaluate: raw.evaluate,
            source: text.to_string(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Static checks: one data source, referenced files present, sane settings.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.data;
        let sources = d.fixture.is_some() as u8 + d.hr_volume.is_some() as u8 + d.lr_volume.is_some() as u8;
        if sources != 1 {
            return bad("exactly one of data.fixture, data.hr_volume or data.lr_volume must be given".into());
        }
        let exists = |p: &Path| if p.exists() { Ok(()) } else { Err(Error::Config(format!("missing file {}", p.display()))) };
        if let Some(p) = &d.hr_volume {
            exists(p)?;
        }
        if let Some(p) = &d.lr_volume {
            exists(p)?;
            if d.hr_images.is_empty() {
                return bad("a measured low-res volume needs data.hr_images".into());
            }
            match &d.palette {
                Some(p) => exists(p)?,
                None => return bad("data.hr_images need data.palette".into()),
            }
        }
        for p in &d.hr_images {
            exists(p)?;
        }
        if !d.hr_orientations.is_empty() && d.hr_orientations.len() != d.hr_images.len() {
            return bad("data.hr_orientations must list one plane per image".into());
        }
        for o in &d.hr_orientations {
            Orientation::parse(o)?;
        }
        if self.anisotropic && d.lr_volume.is_some() && d.hr_orientations.is_empty() {
            return bad("anisotropic training needs data.hr_orientations".into());
        }
        if d.fixture.is_some() && d.fixture_size == 0 {
            return bad("data.fixture_size must be positive".into());
        }
        if self.evaluate.n == 0 || self.evaluate.size == 0 {
            return bad("evaluate.n and evaluate.size must be positive".into());
        }
        if self.generate.tile == Some(0) {
            return bad("generate.tile must be positive".into());
        }
        self.train.validate()
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.generate.seeds.is_empty() { vec![self.seed] } else { self.generate.seeds.clone() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    fn merge_for(&self, hr_phases: usize) -> Result<PhaseMapping> {
        match (&self.merge, self.data.fixture) {
            (Some(s), _) => PhaseMapping::parse(s, hr_phases),
            (None, Some(k)) => Ok(fixtures::lr_merge(k)),
            (None, None) => Ok(PhaseMapping::identity(hr_phases)),
        }
    }
}

// ---------------------------------------------------------------------------
// run directory

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }
    pub fn inputs(&self) -> PathBuf {
        self.root.join("inputs")
    }
    pub fn lr(&self) -> PathBuf {
        self.inputs().join("lr.vox")
    }
    pub fn truth(&self) -> PathBuf {
        self.inputs().join("truth.vox")
    }
    pub fn hr_index(&self) -> PathBuf {
        self.inputs().join("hr_images.json")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn latest_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("latest.vxck")
    }
    pub fn generated(&self) -> PathBuf {
        self.root.join("generated")
    }
    pub fn generated_volume(&self, seed: u64) -> PathBuf {
        self.generated().join(format!("sr_seed{seed}.vox"))
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn read_string(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::io(p, e))
}

#[derive(Serialize, Deserialize)]
struct HrEntry {
    file: String,
    orientation: Orientation,
}

/// Ingested inputs of a run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub lr: PhaseVolume,
    pub hr_images: Vec<PhaseImage>,
    pub truth: Option<PhaseVolume>,
}

impl Prepared {
    pub fn load(run: &RunDir) -> Result<Self> {
        let lr = load_volume(&run.lr())?;
        let truth = if run.truth().exists() { Some(load_volume(&run.truth())?) } else { None };
        let index: Vec<HrEntry> =
            serde_json::from_str(&read_string(&run.hr_index())?).map_err(|e| Error::Config(format!("hr image index: {e}")))?;
        let hr_images = index
            .iter()
            .map(|e| {
                let v = load_volume(&run.inputs().join(&e.file))?;
                let [w, h, _] = v.dims();
                PhaseImage::new([w, h], v.voxel_pitch(), v.labels().to_vec(), v.palette().to_vec(), e.orientation)
            })
            .collect::<Result<_>>()?;
        Ok(Prepared { lr, hr_images, truth })
    }

    pub fn bank(&self, cfg: &ExperimentConfig) -> Result<HrSliceBank> {
        HrSliceBank::new(self.hr_images.clone(), cfg.anisotropic, cfg.data.augment)
    }
}

fn slices_of(truth: &PhaseVolume, anisotropic: bool) -> Result<Vec<PhaseImage>> {
    let mid = |a: Axis| truth.dims()[a.index()] / 2;
    if anisotropic {
        Axis::ALL.iter().map(|&a| extract_slice(truth, a, mid(a))).collect()
    } else {
        Ok(vec![extract_slice(truth, Axis::Z, mid(Axis::Z))?.with_orientation(Orientation::Isotropic)])
    }
}

// ---------------------------------------------------------------------------
// pipeline stages

/// Ingests or simulates the inputs and checks that every size constraint of
/// the later stages holds.
pub fn prepare(cfg: &ExperimentConfig, run: &RunDir) -> Result<Prepared> {
    let d = &cfg.data;
    let truth = match (d.fixture, &d.hr_volume) {
        (Some(k), _) => Some(fixtures::build(k, d.fixture_size, d.fixture_seed)?.with_pitch(d.hr_pitch)),
        (None, Some(p)) => Some(load_volume(p)?),
        _ => None,
    };
    let prepared = match &truth {
        Some(t) => {
            let merge = cfg.merge_for(t.n_phases())?;
            let intensities = IntensityMap(d.intensities.clone().unwrap_or_else(|| IntensityMap::even(merge.targets()).0));
            let lr = simulate_low_res(t, cfg.sf, &merge, &intensities, cfg.mode)?;
            let hr_images = if d.hr_images.is_empty() { slices_of(t, cfg.anisotropic)? } else { load_hr_images(cfg)? };
            Prepared { lr, hr_images, truth: truth.clone() }
        }
        None => {
            let lr = load_volume(d.lr_volume.as_ref().expect("validated"))?;
            Prepared { lr, hr_images: load_hr_images(cfg)?, truth: None }
        }
    };
    check_sizes(cfg, &prepared)?;

    mkdir(&run.inputs())?;
    save_volume(&prepared.lr, &run.lr())?;
    if let Some(t) = &prepared.truth {
        save_volume(t, &run.truth())?;
    }
    let mut index = Vec::new();
    for (i, img) in prepared.hr_images.iter().enumerate() {
        let file = format!("hr_{i:02}.vox");
        save_volume(&img.as_volume(), &run.inputs().join(&file))?;
        save_image_png(img, &run.inputs().join(format!("hr_{i:02}.png")))?;
        index.push(HrEntry { file, orientation: img.orientation() });
    }
    write(&run.hr_index(), serde_json::to_string_pretty(&index).expect("index serializes"))?;
    Ok(prepared)
}

fn load_hr_images(cfg: &ExperimentConfig) -> Result<Vec<PhaseImage>> {
    let d = &cfg.data;
    let map = PaletteMap::load(d.palette.as_ref().ok_or_else(|| Error::Config("data.hr_images need data.palette".into()))?)?;
    d.hr_images
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let o = d.hr_orientations.get(i).map(|s| Orientation::parse(s)).transpose()?.unwrap_or(Orientation::Isotropic);
            load_image(p, &map, d.hr_pitch, o)
        })
        .collect()
}

fn check_sizes(cfg: &ExperimentConfig, p: &Prepared) -> Result<()> {
    let bank = p.bank(cfg)?;
    let mut train = cfg.train.clone();
    train.merge_map = Some(cfg.merge_for(bank.n_phases())?);
    validate_inputs(&p.lr, &bank, &train)?;
    let crop = if cfg.generate.crop_boundary { 2 * boundary_layers(cfg.sf) } else { 0 };
    let size = cfg.evaluate.size;
    let min = cfg.sf.lr_side(crate::netspec::TRAINING_CUBE).unwrap_or(1);
    if p.lr.dims().iter().any(|&d| d < min) {
        return Err(Error::TooSmall(format!("low-res volume {:?} is smaller than {min}³", p.lr.dims())));
    }
    for &n in &p.lr.dims() {
        let out = cfg.sf.hr_side(n).ok_or_else(|| Error::Shape(format!("low-res side {n} has no whole upscale at sf {}", cfg.sf)))?;
        if out < crop + size {
            return Err(Error::TooSmall(format!("generated side {} cannot hold a {size}³ evaluation cube", out.saturating_sub(crop))));
        }
    }
    if let Some(t) = &p.truth {
        if t.dims().iter().any(|&n| n < size) {
            return Err(Error::TooSmall(format!("ground truth {:?} cannot hold a {size}³ evaluation cube", t.dims())));
        }
    }
    Ok(())
}

/// Trains, resuming from the run's latest checkpoint when it was made with
/// the same configuration.
pub fn train_stage(cfg: &ExperimentConfig, run: &RunDir) -> Result<TrainState> {
    let p = Prepared::load(run)?;
    let bank = p.bank(cfg)?;
    let mut tc = cfg.train.clone();
    tc.merge_map = Some(cfg.merge_for(bank.n_phases())?);
    let sink = CheckpointSink { dir: run.checkpoints() };
    let fresh = || TrainState::new(tc.clone(), bank.palette(), p.lr.palette(), cfg.seed);
    let state = match load_checkpoint(&run.latest_checkpoint()) {
        Ok(s) if s.seed == cfg.seed && TrainConfig { iterations: tc.iterations, ..s.config.clone() } == tc => {
            log::info!("resuming from iteration {}", s.iteration);
            TrainState { config: tc.clone(), ..s }
        }
        _ => fresh()?,
    };
    let state = resume(state, &p.lr, &bank, Some(&sink))?;
    mkdir(&run.root.join("train"))?;
    state.write_history_csv(&run.root.join("train").join("history.csv"))?;
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub seed: u64,
    /// Mean squared error between the LR input and the downsampled raw output.
    pub voxelwise_mse: f64,
}

/// Generates one volume per seed; records LR consistency of each raw output.
pub fn generate_stage(cfg: &ExperimentConfig, run: &RunDir) -> Result<Vec<PathBuf>> {
    let p = Prepared::load(run)?;
    let state = load_checkpoint(&run.latest_checkpoint())?;
    let expected = crate::netspec::build_generator_spec_with(
        cfg.sf,
        p.lr.n_phases(),
        state.hr_palette.len(),
        cfg.train.noise_channels,
        &cfg.train.generator_widths,
    )?;
    mkdir(&run.generated())?;
    let chosen = match cfg.generate.checkpoint {
        CheckpointChoice::Latest => run.latest_checkpoint(),
        CheckpointChoice::Inspect => {
            let scores = inspect_checkpoints(cfg, run, &p, &expected)?;
            write(&run.generated().join("checkpoint_scores.json"), serde_json::to_string_pretty(&scores).expect("serializes"))?;
            let best = scores.iter().min_by(|a, b| a.score.total_cmp(&b.score)).expect("at least one checkpoint");
            log::info!("using checkpoint {} (iteration {}, score {:.4})", best.file, best.iteration, best.score);
            run.checkpoints().join(&best.file)
        }
    };
    let state = load_checkpoint_for(&chosen, &expected)?;
    let model = Model::from_state(&state);
    let merge = state.config.merge_for(state.hr_palette.len());
    let seeds = cfg.seeds();
    let base = SynthRequest { crop_boundary: false, tile: cfg.generate.tile, ..SynthRequest::new(&model, &p.lr, cfg.seed) };
    let raws = generate_ensemble(&base, &seeds)?;
    let mut out = Vec::new();
    let mut consistency = Vec::new();
    for (seed, raw) in seeds.iter().zip(raws) {
        consistency.push(Consistency { seed: *seed, voxelwise_mse: voxelwise_consistency(&raw, &p.lr, cfg, &merge)? });
        let v = if cfg.generate.crop_boundary { raw.crop_faces(boundary_layers(cfg.sf))? } else { raw };
        let path = run.generated_volume(*seed);
        save_volume(&v, &path)?;
        let mid = extract_slice(&v, Axis::Z, v.dims()[2] / 2)?;
        save_image_png(&mid, &path.with_extension("png"))?;
        out.push(path);
    }
    write(&run.generated().join("consistency.json"), serde_json::to_string_pretty(&consistency).expect("serializes"))?;
    Ok(out)
}

/// Training-data fit of one saved checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    pub file: String,
    pub iteration: u64,
    pub voxelwise_mse: f64,
    pub volume_fractions: Vec<f64>,
    pub surface_areas: Vec<f64>,
    /// `mse / b` plus the summed relative errors of every volume fraction and
    /// interphase surface area against the HR images; lower is better.
    pub score: f64,
}

/// Volume fractions and interphase surface areas (all pairs `a < b`).
fn phase_statistics(v: &PhaseVolume) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = v.n_phases();
    let vf = (0..n).map(|p| volume_fraction(v, p)).collect::<Result<_>>()?;
    let mut sa = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            sa.push(interphase_surface_area(v, a, b)?);
        }
    }
    Ok((vf, sa))
}

fn relative_error(x: f64, reference: f64) -> f64 {
    if reference > 0.0 { (x - reference).abs() / reference } else { x.abs() }
}

/// Scores every periodic checkpoint of the run on training data only: the
/// LR consistency of a generated volume and how well its volume fractions
/// and surface areas match those of the HR images. Surface area counts
/// adjacent pairs, so in-plane image values estimate the 3D ones for
/// statistically isotropic material. Each checkpoint generates with the
/// first ensemble seed. The ground truth is never consulted.
pub fn inspect_checkpoints(
    cfg: &ExperimentConfig,
    run: &RunDir,
    p: &Prepared,
    expected: &crate::netspec::GeneratorSpec,
) -> Result<Vec<CheckpointScore>> {
    let stats = p.hr_images.iter().map(|img| phase_statistics(&img.as_volume())).collect::<Result<Vec<_>>>()?;
    let mean = |pick: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<f64> {
        let m = pick(&stats[0]).len();
        (0..m).map(|i| stats.iter().map(|s| pick(s)[i]).sum::<f64>() / stats.len() as f64).collect()
    };
    let (ref_vf, ref_sa) = (mean(&|s| &s.0), mean(&|s| &s.1));
    let dir = run.checkpoints();
    let mut files: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().and_then(|e| e.file_name().into_string().ok()))
        .filter(|f| f.starts_with("ckpt_") && f.ends_with(".vxck"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no periodic checkpoints in {}", dir.display())));
    }
    let mut scores = Vec::new();
    for file in files {
        let state = load_checkpoint_for(&dir.join(&file), expected)?;
        let model = Model::from_state(&state);
        let merge = state.config.merge_for(state.hr_palette.len());
        let req = SynthRequest { crop_boundary: false, tile: cfg.generate.tile, ..SynthRequest::new(&model, &p.lr, cfg.seed) };
        let raw = generate_ensemble(&req, &cfg.seeds()[..1])?.remove(0);
        let mse = voxelwise_consistency(&raw, &p.lr, cfg, &merge)?;
        let v = if cfg.generate.crop_boundary { raw.crop_faces(boundary_layers(cfg.sf))? } else { raw };
        let (vf, sa) = phase_statistics(&v)?;
        let fit: f64 = vf.iter().zip(&ref_vf).chain(sa.iter().zip(&ref_sa)).map(|(&x, &r)| relative_error(x, r)).sum();
        let score = mse / cfg.train.b + fit;
        log::info!("{file}: mse {mse:.4}, score {score:.4}");
        scores.push(CheckpointScore { file, iteration: state.iteration, voxelwise_mse: mse, volume_fractions: vf, surface_areas: sa, score });
    }
    Ok(scores)
}

/// MSE between the one-hot LR and the downsampled one-hot of a raw SR volume.
pub fn voxelwise_consistency(raw: &PhaseVolume, lr: &PhaseVolume, cfg: &ExperimentConfig, merge: &PhaseMapping) -> Result<f64> {
    let ds = downsample_field(&one_hot_encode(raw), cfg.sf, cfg.mode, merge, cfg.train.temperature)?;
    let lo = one_hot_encode(lr);
    if ds.tensor().shape() != lo.tensor().shape() {
        return Err(Error::Shape(format!("downsampled {:?} vs low-res {:?}", ds.tensor().shape(), lo.tensor().shape())));
    }
    let n = lo.tensor().len() as f64;
    Ok(ds.tensor().data().iter().zip(lo.tensor().data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

fn fft_phases(cfg: &ExperimentConfig, n: usize) -> Vec<usize> {
    if cfg.evaluate.fft_phases.is_empty() { (1..n.max(2)).collect() } else { cfg.evaluate.fft_phases.clone() }
}

/// Correlation, chord-length and spectral curves of a volume.
fn volume_curves(r: &mut MetricsReport, v: &PhaseVolume, cfg: &ExperimentConfig) -> Result<()> {
    let pal = v.palette().to_vec();
    let len = cfg.evaluate.curve_length.min(v.dims()[0].saturating_sub(1));
    for p in 0..v.n_phases() {
        r.curves.insert(format!("s2:{}", pal[p]), two_point_correlation(v, p, p, Axis::X, len)?);
        r.curves.insert(format!("cld:{}", pal[p]), chord_length_distribution(v, p, Axis::X, len)?);
    }
    let [w, h, nz] = v.dims();
    let z = nz / 2;
    let (win, s) = centre_window(&v.labels()[z * w * h..(z + 1) * w * h], w, h, cfg.evaluate.size);
    r.curves.insert("fft".into(), phase_fft_profile(&win, s, s, &fft_phases(cfg, v.n_phases()))?);
    Ok(())
}

/// Central square window of side `min(size, w, h)` of a row-major plane, so
/// spectra of differently sized sources share frequency bins.
fn centre_window<T: Copy>(plane: &[T], w: usize, h: usize, size: usize) -> (Vec<T>, usize) {
    let s = size.min(w).min(h);
    let (x0, y0) = ((w - s) / 2, (h - s) / 2);
    let out = (y0..y0 + s).flat_map(|y| plane[y * w + x0..y * w + x0 + s].iter().copied()).collect();
    (out, s)
}

/// Spectral profile of the Gaussian-blurred ground truth at its own pitch.
fn blurred_fft(truth: &PhaseVolume, cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let spec = kernel_for(cfg.sf);
    let [w, h, nz] = truth.dims();
    let maps = [blur_map(w, &spec), blur_map(h, &spec), blur_map(nz, &spec)];
    let blurred = apply_separable(one_hot_encode(truth).tensor(), &maps);
    let z = nz / 2;
    let n = w * h * nz;
    let mut side = 0;
    let fields: Vec<Vec<f64>> = fft_phases(cfg, truth.n_phases())
        .iter()
        .map(|&p| {
            let (win, s) = centre_window(&blurred.data()[p * n + z * w * h..p * n + (z + 1) * w * h], w, h, cfg.evaluate.size);
            side = s;
            win
        })
        .collect();
    mean_profile(&fields, side, side)
}

/// Metric reports for every generated volume, the ground truth (if any) and
/// the first HR image, written to `reports/`.
pub fn evaluate_stage(cfg: &ExperimentConfig, run: &RunDir) -> Result<Vec<MetricsReport>> {
    let p = Prepared::load(run)?;
    let e = &cfg.evaluate;
    let mut reports = Vec::new();
    let hr_phases = p.hr_images[0].n_phases();
    let metrics = MetricSpec::standard_set(hr_phases, e.transport);
    for seed in cfg.seeds() {
        let v = load_volume(&run.generated_volume(seed))?;
        let mut r = MetricsReport::for_volume(format!("sr_seed{seed}"), &v, &metrics, e.n, e.size, e.seed)?;
        volume_curves(&mut r, &v, cfg)?;
        reports.push(r);
    }
    if let Some(t) = &p.truth {
        let mut r = MetricsReport::for_volume("truth", t, &metrics, e.n, e.size, e.seed)?;
        volume_curves(&mut r, t, cfg)?;
        r.curves.insert("fft_blurred".into(), blurred_fft(t, cfg)?);
        reports.push(r);
    }
    let img = &p.hr_images[0];
    let plane = img.as_volume();
    let mut r = MetricsReport::for_plane("hr_2d", &plane, &metrics)?;
    let [w, h] = img.dims();
    let len = e.curve_length.min(w.saturating_sub(1));
    for ph in 0..hr_phases {
        r.curves.insert(format!("s2:{}", img.palette()[ph]), two_point_correlation(&plane, ph, ph, Axis::X, len)?);
        r.curves.insert(format!("cld:{}", img.palette()[ph]), chord_length_distribution(&plane, ph, Axis::X, len)?);
    }
    let (win, s) = centre_window(img.labels(), w, h, e.size);
    r.curves.insert("fft".into(), phase_fft_profile(&win, s, s, &fft_phases(cfg, hr_phases))?);
    reports.push(r);
    mkdir(&run.reports())?;
    for r in &reports {
        r.save(&run.reports(), &r.provenance.volume_id)?;
    }
    Ok(reports)
}

pub fn report_stage(cfg: &ExperimentConfig, run: &RunDir) -> Result<ReportSummary> {
    let mut reports = Vec::new();
    let mut ids: Vec<String> = cfg.seeds().iter().map(|s| format!("sr_seed{s}")).collect();
    if run.truth().exists() {
        ids.push("truth".into());
    }
    ids.push("hr_2d".into());
    for id in ids {
        reports.push(MetricsReport::from_json(&read_string(&run.reports().join(format!("{id}.json")))?)?);
    }
    emit_report(&reports, &run.figures())
}

// ---------------------------------------------------------------------------
// report emission

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub metric: String,
    pub source: String,
    pub kind: &'static str,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    /// Mean minus the mean of the first source that has this metric.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportSummary {
    pub rows: Vec<SummaryRow>,
    pub figures: Vec<PathBuf>,
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

/// Per-metric comparison figures, curve figures and `summary.csv` in `dir`.
/// Volumetric sources must report the same metrics; planar sources (all
/// scalar) may omit ones that need a volume.
pub fn emit_report(reports: &[MetricsReport], dir: &Path) -> Result<ReportSummary> {
    if reports.is_empty() {
        return Err(Error::Config("no reports to compare".into()));
    }
    let is_planar = |r: &MetricsReport| r.values.values().all(|v| matches!(v, MetricValue::Scalar { .. }));
    let volumetric: Vec<&MetricsReport> = reports.iter().filter(|r| !is_planar(r)).collect();
    let names: Vec<String> = match volumetric.first() {
        Some(r) => r.values.keys().cloned().collect(),
        None => reports[0].values.keys().cloned().collect(),
    };
    for r in reports {
        let keys: Vec<&String> = r.values.keys().collect();
        let ok = if is_planar(r) && !volumetric.is_empty() {
            keys.iter().all(|k| names.contains(k))
        } else {
            keys.len() == names.len() && keys.iter().zip(&names).all(|(a, b)| *a == b)
        };
        if !ok {
            return Err(Error::Config(format!("report {} has a mismatched metric set", r.provenance.volume_id)));
        }
    }
    mkdir(dir)?;
    let mut rows = Vec::new();
    let mut figures = Vec::new();
    for name in &names {
        let mut cols = Vec::new();
        let mut reference = None;
        for r in reports {
            let Some(v) = r.values.get(name) else { continue };
            let id = r.provenance.volume_id.as_str();
            let (kind, n, mean, std) = match v {
                MetricValue::Scalar { value } => {
                    cols.push(Column::Point { label: id, value: *value });
                    ("scalar", 1, *value, 0.0)
                }
                MetricValue::Distribution(d) => {
                    cols.push(Column::Samples { label: id, values: &d.samples });
                    ("distribution", d.samples.len(), d.mean, d.std)
                }
            };
            let base = *reference.get_or_insert(mean);
            rows.push(SummaryRow { metric: name.clone(), source: id.to_string(), kind, n, mean, std, gap: mean - base });
        }
        let path = dir.join(format!("{}.svg", file_stem(name)));
        write(&path, distribution_chart(name, name, &cols))?;
        figures.push(path);
    }
    let mut curve_names: Vec<&String> = reports.iter().flat_map(|r| r.curves.keys()).collect();
    curve_names.sort();
    curve_names.dedup();
    let mut by_family: BTreeMap<&str, Vec<(String, &[f64])>> = BTreeMap::new();
    for c in curve_names {
        for r in reports {
            if let Some(v) = r.curves.get(c) {
                let family = if c.starts_with("fft") { "fft" } else { c.as_str() };
                let label = if c == "fft_blurred" { format!("{} (blurred)", r.provenance.volume_id) } else { r.provenance.volume_id.clone() };
                by_family.entry(family).or_default().push((label, v));
            }
        }
    }
    for (family, series) in by_family {
        let s: Vec<(&str, &[f64])> = series.iter().map(|(l, v)| (l.as_str(), *v)).collect();
        let (x, y) = match family.split(':').next().unwrap() {
            "s2" => ("lag (voxels)", "two-point correlation"),
            "cld" => ("chord length (voxels)", "chord length density"),
            _ => ("radius (frequency bins)", "mean log |F|"),
        };
        let path = dir.join(format!("curve_{}.svg", file_stem(family)));
        write(&path, line_chart(family, x, y, &s))?;
        figures.push(path);
    }
    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(["metric", "source", "kind", "n", "mean", "std", "mean_gap"]).map_err(err)?;
    for r in &rows {
        w.write_record([&r.metric, &r.source, r.kind, &r.n.to_string(), &r.mean.to_string(), &r.std.to_string(), &r.gap.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(ReportSummary { rows, figures })
}

// ---------------------------------------------------------------------------
// manifest and orchestration

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub code_version: String,
    pub seed: u64,
    pub generation_seeds: Vec<u64>,
    pub config: String,
    pub stages: Vec<Stage>,
    /// Relative path → sha256 of every artifact.
    pub artifacts: BTreeMap<String, String>,
}

fn hash_tree(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            hash_tree(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != "manifest.json") {
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.insert(rel, hex::encode(Sha256::digest(&bytes)));
        }
    }
    Ok(())
}

fn update_manifest(cfg: &ExperimentConfig, run: &RunDir, stage: Stage) -> Result<()> {
    let mut m: Manifest = fs::read_to_string(run.manifest()).ok().and_then(|s| serde_json::from_str(&s).ok()).unwrap_or_default();
    m.name = cfg.name.clone();
    m.code_version = env!("CARGO_PKG_VERSION").into();
    m.seed = cfg.seed;
    m.generation_seeds = cfg.seeds();
    m.config = cfg.source.clone();
    if !m.stages.contains(&stage) {
        m.stages.push(stage);
        m.stages.sort();
    }
    m.artifacts.clear();
    hash_tree(&run.root, &run.root, &mut m.artifacts)?;
    write(&run.manifest(), serde_json::to_string_pretty(&m).expect("manifest serializes"))
}

/// Runs one stage and records it in the manifest.
pub fn run_stage(cfg: &ExperimentConfig, run: &RunDir, stage: Stage) -> StageResult<()> {
    mkdir(&run.root).stage(stage)?;
    match stage {
        Stage::Config => cfg.validate(),
        Stage::Prepare => prepare(cfg, run).map(|_| ()),
        Stage::Train => train_stage(cfg, run).map(|_| ()),
        Stage::Generate => generate_stage(cfg, run).map(|_| ()),
        Stage::Evaluate => evaluate_stage(cfg, run).map(|_| ()),
        Stage::Report => report_stage(cfg, run).map(|_| ()),
    }
    .stage(stage)?;
    update_manifest(cfg, run, stage).stage(stage)
}

/// prepare → train → generate → evaluate → report into `run`.
pub fn run_case_study(cfg: &ExperimentConfig, run: &RunDir) -> StageResult<PathBuf> {
    for stage in Stage::PIPELINE {
        log::info!("stage {stage}");
        run_stage(cfg, run, stage)?;
    }
    Ok(run.root.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Distribution;

    fn report(id: &str, vals: &[(&str, MetricValue)]) -> MetricsReport {
        let mut r = MetricsReport::new(id);
        for (k, v) in vals {
            r.values.insert(k.to_string(), v.clone());
        }
        r
    }

    fn dist(s: &[f64]) -> MetricValue {
        MetricValue::Distribution(Distribution::from_samples(s.to_vec()))
    }

    #[test]
    fn identical_reports_have_zero_gap() {
        let dir = tempfile::tempdir().unwrap();
        let a = report("a", &[("vf:x", dist(&[0.1, 0.2, 0.3])), ("te:x:z", dist(&[0.5, 0.6]))]);
        let b = MetricsReport { provenance: crate::metrics::Provenance { volume_id: "b".into(), ..Default::default() }, ..a.clone() };
        let s = emit_report(&[a, b], dir.path()).unwrap();
        assert!(s.rows.iter().all(|r| r.gap == 0.0));
        assert_eq!(s.rows.len(), 4);
        assert!(dir.path().join("summary.csv").exists());
    }

    #[test]
    fn planar_sources_are_points_without_transport() {
        let dir = tempfile::tempdir().unwrap();
        let a = report("sr", &[("vf:x", dist(&[0.1, 0.2])), ("te:x:z", dist(&[0.5, 0.6]))]);
        let p = report("hr_2d", &[("vf:x", MetricValue::Scalar { value: 0.15 })]);
        let s = emit_report(&[a, p], dir.path()).unwrap();
        let vf = fs::read_to_string(dir.path().join("vf_x.svg")).unwrap();
        assert_eq!(vf.matches("<polygon").count(), 1);
        assert_eq!(vf.matches("<path").count(), 1);
        assert!(!s.rows.iter().any(|r| r.source == "hr_2d" && r.metric.starts_with("te:")));
        let bad = report("other", &[("vf:y", dist(&[0.1]))]);
        let a = report("sr", &[("vf:x", dist(&[0.1, 0.2]))]);
        assert!(emit_report(&[a, bad], dir.path()).is_err());
    }

    fn fixture_config(dir: &Path, extra: &str) -> String {
        format!(
            r#"
name = "smoke"
seed = 3
sf = 4
out = "{}"
{extra}
[data]
fixture = "spheres"
fixture_size = 64
[train]
iterations = 10
batch_size = 1
hr_cube = 16
critic_slices = 2
monitor_interval = 5
checkpoint_interval = 5
generator_widths = [4, 4, 4]
critic_widths = [4, 4]
[generate]
seeds = [1, 2]
[evaluate]
n = 4
size = 16
curve_length = 6
"#,
            dir.display()
        )
    }

    #[test]
    fn config_validation() {
        let dir = tempfile::tempdir().unwrap();
        let ok = ExperimentConfig::parse(&fixture_config(dir.path(), ""), dir.path()).unwrap();
        assert_eq!(ok.train.sf.value(), 4.0);
        let bad_sf = fixture_config(dir.path(), "").replace("sf = 4", "sf = 5");
        assert!(ExperimentConfig::parse(&bad_sf, dir.path()).is_err());
        let missing = fixture_config(dir.path(), "").replace("fixture = \"spheres\"", "lr_volume = \"nope.vox\"");
        let e = ExperimentConfig::parse(&missing, dir.path()).unwrap_err();
        assert!(e.to_string().contains("missing file"), "{e}");
        let misplaced = fixture_config(dir.path(), "").replace("iterations = 10", "iterations = 10\nsf = 2");
        assert!(ExperimentConfig::parse(&misplaced, dir.path()).is_err());
        let unknown = fixture_config(dir.path(), "bogus = 1");
        assert!(ExperimentConfig::parse(&unknown, dir.path()).is_err());
    }

    #[test]
    fn undersized_inputs_fail_in_prepare() {
        let dir = tempfile::tempdir().unwrap();
        let text = fixture_config(dir.path(), "").replace("size = 16", "size = 60");
        let cfg = ExperimentConfig::parse(&text, dir.path()).unwrap();
        let err = run_stage(&cfg, &RunDir::new(dir.path()), Stage::Prepare).unwrap_err();
        assert_eq!(err.stage, Stage::Prepare);
        assert!(matches!(err.source, Error::TooSmall(_)));
    }

    #[test]
    fn pipeline_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let run = |d: &Path| {
            let cfg = ExperimentConfig::parse(&fixture_config(d, ""), d).unwrap();
            run_case_study(&cfg, &RunDir::new(d)).unwrap();
            cfg
        };
        run(a.path());
        run(b.path());
        for f in ["reports/sr_seed1.json", "reports/truth.csv", "reports/hr_2d.json", "figures/summary.csv", "generated/sr_seed2.vox"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let m: Manifest = serde_json::from_str(&fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m.stages, Stage::PIPELINE.to_vec());
        assert!(m.artifacts.contains_key("checkpoints/latest.vxck"));
        assert!(a.path().join("figures/curve_fft.svg").exists());
        assert!(a.path().join("train/history.csv").exists());
        let hist = fs::read_to_string(a.path().join("train/history.csv")).unwrap();
        assert!(hist.starts_with("iteration,metric,value"));
    }

    #[test]
    fn inspection_picks_the_best_scoring_checkpoint() {
        let d = tempfile::tempdir().unwrap();
        let text = fixture_config(d.path(), "").replace("seeds = [1, 2]", "seeds = [1, 2]\ncheckpoint = \"inspect\"");
        let cfg = ExperimentConfig::parse(&text, d.path()).unwrap();
        run_case_study(&cfg, &RunDir::new(d.path())).unwrap();
        let scores: Vec<CheckpointScore> =
            serde_json::from_str(&fs::read_to_string(d.path().join("generated/checkpoint_scores.json")).unwrap()).unwrap();
        assert_eq!(scores.iter().map(|s| s.iteration).collect::<Vec<_>>(), [5, 10]);
        for s in &scores {
            assert_eq!(s.volume_fractions.len(), 3);
            assert_eq!(s.surface_areas.len(), 3);
            assert!(s.score >= s.voxelwise_mse / cfg.train.b);
        }
        let best = scores.iter().min_by(|a, b| a.score.total_cmp(&b.score)).unwrap();
        let used: Vec<Consistency> =
            serde_json::from_str(&fs::read_to_string(d.path().join("generated/consistency.json")).unwrap()).unwrap();
        assert_eq!(used[0].seed, 1);
        assert_eq!(used[0].voxelwise_mse, best.voxelwise_mse);
    }
}
