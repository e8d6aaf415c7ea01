//! Adversarial training: differentiable downsampling, voxel-wise and
//! Wasserstein losses with gradient penalty, the update schedule, monitoring
//! and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use voxfuse_autograd::{grad, no_grad, Adam, AdamConfig, AdamState, AxisMap, Element, Tensor, Var};

use crate::degrade::{cast_map, downsample_map, merge_channel_map, sample_hr_patch, sample_lr_cube, DegradeMode, HrSliceBank};
use crate::error::{Error, Result};
use crate::metrics::interphase_surface_area;
use crate::netspec::{
    build_critic_specs_with, build_generator_spec_with, critic_forward, generator_forward, slice_batches, CriticSpec,
    Generator, GeneratorSpec, CRITIC_WIDTHS, GENERATOR_WIDTHS, SLICE_CROP, TRAINING_CUBE,
};
use crate::volgrid::{argmax_labels, OneHotField, Orientation, PhaseMapping, PhaseVolume, ScaleFactor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub sf: ScaleFactor,
    pub mode: DegradeMode,
    /// HR phase -> LR phase, applied as channel sums before comparing with the LR input.
    pub merge_map: Option<PhaseMapping>,
    /// Voxel-wise loss threshold below which only the adversarial term is used.
    pub b: f64,
    /// Voxel-wise loss coefficient.
    pub c: f64,
    pub critic_iters_per_g: usize,
    pub gp_lambda: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub noise_channels: usize,
    /// Temperature of the sharpening softmax in the downsampler.
    pub temperature: f64,
    pub iterations: usize,
    pub monitor_interval: usize,
    pub checkpoint_interval: usize,
    pub anisotropic: bool,
    /// Side of the generated training cube (64 at full scale).
    pub hr_cube: usize,
    /// Fake slices per orientation shown to the critic each update; all when `None`.
    pub critic_slices: Option<usize>,
    pub generator_widths: Vec<usize>,
    pub critic_widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sf: ScaleFactor::from_divisor(16).unwrap(),
            mode: DegradeMode::UnderResolved,
            merge_map: None,
            b: 0.005,
            c: 10.0,
            critic_iters_per_g: 5,
            gp_lambda: 10.0,
            lr_g: 1e-4,
            lr_d: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            batch_size: 8,
            noise_channels: 1,
            temperature: 0.05,
            iterations: 20_000,
            monitor_interval: 100,
            checkpoint_interval: 1000,
            anisotropic: false,
            hr_cube: TRAINING_CUBE,
            critic_slices: None,
            generator_widths: GENERATOR_WIDTHS.to_vec(),
            critic_widths: CRITIC_WIDTHS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.b > 0.0) || !(self.c > 0.0) || !(self.temperature > 0.0) {
            return bad(format!("b, c and temperature must be positive (b={}, c={}, T={})", self.b, self.c, self.temperature));
        }
        if self.critic_iters_per_g == 0 || self.batch_size == 0 || self.monitor_interval == 0 || self.checkpoint_interval == 0 {
            return bad("iteration ratios, batch size and intervals must be at least 1".into());
        }
        if self.gp_lambda < 0.0 || !(self.lr_g > 0.0) || !(self.lr_d > 0.0) {
            return bad("learning rates must be positive and the penalty weight non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment parameters must lie in [0, 1)".into());
        }
        if self.hr_cube <= 2 * SLICE_CROP + 1 {
            return bad(format!("training cube {} leaves no slices after cropping", self.hr_cube));
        }
        if self.lr_cube().is_none() {
            return bad(format!("training cube {} is not a whole number of LR voxels at sf {}", self.hr_cube, self.sf));
        }
        if self.critic_slices == Some(0) {
            return bad("critic_slices must be at least 1".into());
        }
        Ok(())
    }

    /// LR side of a training cube.
    pub fn lr_cube(&self) -> Option<usize> {
        self.sf.lr_side(self.hr_cube).filter(|&n| n > 0)
    }

    /// Side of the 2D slices and real patches.
    pub fn patch(&self) -> usize {
        self.hr_cube - 2 * SLICE_CROP
    }

    pub fn merge_for(&self, hr_phases: usize) -> PhaseMapping {
        self.merge_map.clone().unwrap_or_else(|| PhaseMapping::identity(hr_phases))
    }

    pub fn is_generator_step(&self, iteration: u64) -> bool {
        let k = self.critic_iters_per_g as u64;
        iteration % k == k - 1
    }
}

// ---------------------------------------------------------------------------
// differentiable downsampler

/// Precomputed linear operators for one input size.
pub struct Downsampler<T: Element> {
    merge: Rc<AxisMap<T>>,
    axes: [Rc<AxisMap<T>>; 3],
    temperature: T,
}

impl<T: Element> Downsampler<T> {
    /// `spatial` is `[z, y, x]` of the HR input.
    pub fn new(spatial: [usize; 3], sf: ScaleFactor, mode: DegradeMode, merge: &PhaseMapping, temperature: f64) -> Result<Self> {
        let m = |n| downsample_map(n, sf, mode).map(|m| Rc::new(cast_map::<T>(&m)));
        Ok(Downsampler {
            merge: Rc::new(cast_map(&merge_channel_map(merge))),
            axes: [m(spatial[0])?, m(spatial[1])?, m(spatial[2])?],
            temperature: T::lit(temperature),
        })
    }

    /// `[N, C_hr, z, y, x]` probabilities to sharpened `[N, C_lr, z/sf, y/sf, x/sf]`.
    pub fn apply(&self, sr: &Var<T>) -> Var<T> {
        let mut h = sr.apply_axis_map(1, &self.merge);
        for (a, m) in self.axes.iter().enumerate() {
            h = h.apply_axis_map(2 + a, m);
        }
        h.softmax_channels(self.temperature)
    }
}

/// Merges channels, blurs and resamples (or picks) by `sf`, then sharpens.
pub fn differentiable_downsample<T: Element>(
    sr: &Var<T>,
    sf: ScaleFactor,
    mode: DegradeMode,
    merge: &PhaseMapping,
    temperature: f64,
) -> Result<Var<T>> {
    let sh = sr.shape();
    if sh.len() != 5 {
        return Err(Error::Shape(format!("downsample input must be [N, C, z, y, x], got {sh:?}")));
    }
    if sh[1] != merge.sources() {
        return Err(Error::Mapping(format!("merge map covers {} channels, input has {}", merge.sources(), sh[1])));
    }
    Ok(Downsampler::new([sh[2], sh[3], sh[4]], sf, mode, merge, temperature)?.apply(sr))
}

/// [`differentiable_downsample`] on a single one-hot field.
pub fn downsample_field(f: &OneHotField, sf: ScaleFactor, mode: DegradeMode, merge: &PhaseMapping, temperature: f64) -> Result<OneHotField> {
    let sp = f.spatial();
    if sp.len() != 3 {
        return Err(Error::Shape(format!("expected a 3D field, got {sp:?}")));
    }
    let t = f.tensor().clone().reshaped(&[1, f.channels(), sp[0], sp[1], sp[2]]);
    let out = no_grad(|| differentiable_downsample(&Var::constant(t), sf, mode, merge, temperature))?;
    let s = out.shape().to_vec();
    OneHotField::from_tensor(out.value().clone().reshaped(&s[1..]))
}

// ---------------------------------------------------------------------------
// losses

/// `mean((lr - downsampled)²)` over all sites and channels.
pub fn voxelwise_loss<T: Element>(lr: &Var<T>, downsampled: &Var<T>) -> Result<Var<T>> {
    if lr.shape() != downsampled.shape() {
        return Err(Error::Shape(format!("low-res {:?} vs downsampled {:?}", lr.shape(), downsampled.shape())));
    }
    Ok(lr.sub(downsampled).square().mean_all())
}

/// `-mean(scores)`, plus `c · l_vw` unless `l_vw < b`.
pub fn generator_loss<T: Element>(scores: &Var<T>, l_vw: &Var<T>, b: f64, c: f64) -> Var<T> {
    let adv = scores.mean_all().neg();
    if l_vw.item().to_f64().unwrap() < b { adv } else { adv.add(&l_vw.scale(T::lit(c))) }
}

/// Wasserstein critic objective `mean(fake) - mean(real) + gp`.
pub fn critic_loss<T: Element>(fake: &Var<T>, real: &Var<T>, gp: &Var<T>) -> Var<T> {
    fake.mean_all().sub(&real.mean_all()).add(gp)
}

/// `λ · mean((‖∇ critic(x̂)‖ - 1)²)` over per-sample interpolates
/// `x̂ = ε·real + (1 - ε)·fake`, `ε ~ U(0, 1)`. `critic` maps `[N, ...]` to `[N]`.
pub fn gradient_penalty<T: Element, R: Rng + ?Sized>(
    critic: impl Fn(&Var<T>) -> Var<T>,
    fake: &Tensor<T>,
    real: &Tensor<T>,
    lambda: f64,
    rng: &mut R,
) -> Result<Var<T>> {
    if fake.shape() != real.shape() {
        return Err(Error::Shape(format!("fake {:?} vs real {:?}", fake.shape(), real.shape())));
    }
    let n = fake.shape()[0];
    let per = fake.len() / n;
    let eps: Vec<T> = (0..n).map(|_| T::lit(rng.random::<f64>())).collect();
    let data = fake
        .data()
        .iter()
        .zip(real.data())
        .enumerate()
        .map(|(i, (&f, &r))| {
            let e = eps[i / per];
            e * r + (T::one() - e) * f
        })
        .collect();
    let x = Var::leaf(Tensor::from_vec(fake.shape(), data));
    let scores = critic(&x);
    let g = grad(&[scores.sum_all()], &[None], &[x], true).remove(0);
    let mut red = vec![1; fake.ndim()];
    red[0] = n;
    let norm = g.square().sum_to(&red).add_scalar(T::lit(1e-12)).sqrt();
    Ok(norm.add_scalar(-T::one()).square().mean_all().scale(T::lit(lambda)))
}

// ---------------------------------------------------------------------------
// state

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: u64,
    pub metric: String,
    pub value: f64,
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(r: &ChaCha8Rng) -> Self {
        RngState { seed: hex::encode(r.get_seed()), stream: r.get_stream(), word_pos: r.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |m: &str| Error::Checkpoint(format!("bad rng state: {m}"));
        let seed: [u8; 32] = hex::decode(&self.seed).map_err(|_| bad("seed"))?.try_into().map_err(|_| bad("seed length"))?;
        let mut r = ChaCha8Rng::from_seed(seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub gen_spec: GeneratorSpec,
    pub critic_specs: Vec<CriticSpec>,
    pub generator: Vec<Tensor<f32>>,
    pub critics: Vec<Vec<Tensor<f32>>>,
    pub gen_opt: AdamState<f32>,
    pub critic_opts: Vec<AdamState<f32>>,
    pub iteration: u64,
    pub generator_updates: u64,
    pub critic_updates: u64,
    pub seed: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<MetricRecord>,
    pub hr_palette: Vec<String>,
    pub lr_palette: Vec<String>,
}

impl TrainState {
    /// Fresh parameters and optimizer state.
    pub fn new(config: TrainConfig, hr_palette: &[String], lr_palette: &[String], seed: u64) -> Result<Self> {
        config.validate()?;
        let merge = config.merge_for(hr_palette.len());
        if merge.sources() != hr_palette.len() || merge.targets() != lr_palette.len() {
            return Err(Error::Mapping(format!(
                "merge map {}→{} does not match {} HR and {} LR phases",
                merge.sources(),
                merge.targets(),
                hr_palette.len(),
                lr_palette.len()
            )));
        }
        let gen_spec = build_generator_spec_with(config.sf, lr_palette.len(), hr_palette.len(), config.noise_channels, &config.generator_widths)?;
        let critic_specs = build_critic_specs_with(hr_palette.len(), config.anisotropic, config.patch(), &config.critic_widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::<f32>::new(gen_spec.clone(), &mut rng).params;
        let critics: Vec<Vec<Tensor<f32>>> =
            critic_specs.iter().map(|s| crate::netspec::Critic::<f32>::new(s.clone(), &mut rng).params).collect();
        let gen_opt = Adam::new(AdamConfig::default(), &generator).state;
        let critic_opts = critics.iter().map(|c| Adam::new(AdamConfig::default(), c).state).collect();
        Ok(TrainState {
            config,
            gen_spec,
            critic_specs,
            generator,
            critics,
            gen_opt,
            critic_opts,
            iteration: 0,
            generator_updates: 0,
            critic_updates: 0,
            seed,
            rng,
            history: Vec::new(),
            hr_palette: hr_palette.to_vec(),
            lr_palette: lr_palette.to_vec(),
        })
    }

    pub fn generator_net(&self) -> Generator<f32> {
        Generator { spec: self.gen_spec.clone(), params: self.generator.clone() }
    }

    pub fn history_of(&self, metric: &str) -> Vec<(u64, f64)> {
        self.history.iter().filter(|r| r.metric == metric).map(|r| (r.iteration, r.value)).collect()
    }

    fn adam(&self, lr: f64, state: &AdamState<f32>) -> Adam<f32> {
        Adam {
            config: AdamConfig { lr, beta1: self.config.beta1, beta2: self.config.beta2, eps: 1e-8 },
            state: state.clone(),
        }
    }

    /// `iteration,metric,value` rows.
    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let err = |e: csv::Error| Error::Config(format!("csv: {e}"));
        w.write_record(["iteration", "metric", "value"]).map_err(err)?;
        for r in &self.history {
            w.write_record([r.iteration.to_string(), r.metric.clone(), r.value.to_string()]).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// training loop

fn stack(fields: &[OneHotField]) -> Tensor<f32> {
    let mut shape = vec![fields.len()];
    shape.extend_from_slice(&fields[0].tensor().shape());
    let data = fields.iter().flat_map(|f| f.tensor().data().iter().map(|&v| v as f32)).collect();
    Tensor::from_vec(&shape, data)
}

/// Concatenates `[N, a, ...]` and `[N, b, ...]` along channels.
pub(crate) fn concat_channels(x: &Tensor<f32>, y: &Tensor<f32>) -> Tensor<f32> {
    let n = x.shape()[0];
    let (px, py) = (x.len() / n, y.len() / n);
    let mut data = Vec::with_capacity(x.len() + y.len());
    for b in 0..n {
        data.extend_from_slice(&x.data()[b * px..(b + 1) * px]);
        data.extend_from_slice(&y.data()[b * py..(b + 1) * py]);
    }
    let mut shape = x.shape().to_vec();
    shape[1] += y.shape()[1];
    Tensor::from_vec(&shape, data)
}

/// Rows `idx` of a `[N, ...]` tensor.
fn gather(t: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let per = t.len() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_vec(&shape, idx.iter().flat_map(|&i| t.data()[i * per..(i + 1) * per].iter().copied()).collect())
}

fn check_finite(v: f64, what: &str, iteration: u64) -> Result<()> {
    if v.is_finite() { Ok(()) } else { Err(Error::NonFinite(format!("{what} = {v} at iteration {iteration}"))) }
}

/// Periodic checkpoint destination.
#[derive(Clone, Debug)]
pub struct CheckpointSink {
    pub dir: PathBuf,
}

impl CheckpointSink {
    pub fn path_for(&self, iteration: u64) -> PathBuf {
        self.dir.join(format!("ckpt_{iteration:07}.vxck"))
    }

    pub fn latest(&self) -> PathBuf {
        self.dir.join("latest.vxck")
    }
}

/// Checks that the inputs can feed the configured training.
pub fn validate_inputs(lr: &PhaseVolume, bank: &HrSliceBank, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    let side = cfg.lr_cube().expect("validated");
    if lr.dims().iter().any(|&d| d < side) {
        return Err(Error::TooSmall(format!("low-res volume {:?} is smaller than a {side}³ training cube", lr.dims())));
    }
    let need: Vec<Orientation> = if cfg.anisotropic { Orientation::PLANES.to_vec() } else { vec![Orientation::Isotropic] };
    for o in need {
        let imgs = bank.images(o);
        if imgs.is_empty() {
            return Err(Error::Config(format!("no high-res images for {o:?}")));
        }
        if imgs.iter().any(|i| i.dims()[0] < cfg.patch() || i.dims()[1] < cfg.patch()) {
            return Err(Error::TooSmall(format!("high-res images for {o:?} are smaller than {}²", cfg.patch())));
        }
    }
    let merge = cfg.merge_for(bank.n_phases());
    if merge.sources() != bank.n_phases() || merge.targets() != lr.n_phases() {
        return Err(Error::Mapping(format!(
            "merge map {}→{} does not match {} HR and {} LR phases",
            merge.sources(),
            merge.targets(),
            bank.n_phases(),
            lr.n_phases()
        )));
    }
    Ok(())
}

/// Trains from scratch for `cfg.iterations` iterations.
pub fn train(lr: &PhaseVolume, bank: &HrSliceBank, cfg: &TrainConfig, seed: u64, sink: Option<&CheckpointSink>) -> Result<TrainState> {
    validate_inputs(lr, bank, cfg)?;
    let state = TrainState::new(cfg.clone(), bank.palette(), lr.palette(), seed)?;
    resume(state, lr, bank, sink)
}

/// Continues training until `state.config.iterations`.
pub fn resume(mut state: TrainState, lr: &PhaseVolume, bank: &HrSliceBank, sink: Option<&CheckpointSink>) -> Result<TrainState> {
    let cfg = state.config.clone();
    validate_inputs(lr, bank, &cfg)?;
    if let Some(s) = sink {
        fs::create_dir_all(&s.dir).map_err(|e| Error::io(&s.dir, e))?;
    }
    let merge = cfg.merge_for(bank.n_phases());
    let ds = Downsampler::<f32>::new([cfg.hr_cube; 3], cfg.sf, cfg.mode, &merge, cfg.temperature)?;
    let side = cfg.lr_cube().expect("validated");
    let patch = cfg.patch();
    let n = cfg.batch_size;

    while (state.iteration as usize) < cfg.iterations {
        let it = state.iteration;
        let rng = &mut state.rng;

        let cubes: Vec<OneHotField> =
            (0..n).map(|_| sample_lr_cube(lr, side, rng).map(|(_, f)| f)).collect::<Result<_>>()?;
        let lr_t = stack(&cubes);
        let noise_shape = [n, cfg.noise_channels, side, side, side];
        let noise = Tensor::from_vec(
            &noise_shape,
            (0..noise_shape.iter().product()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect(),
        );
        let input = Var::constant(concat_channels(&lr_t, &noise));
        let gen_step = cfg.is_generator_step(it);

        let gparams: Vec<Var<f32>> = state
            .generator
            .iter()
            .map(|p| if gen_step { Var::leaf(p.clone()) } else { Var::constant(p.clone()) })
            .collect();
        let sr = generator_forward(&state.gen_spec, &gparams, &input);
        let fakes = slice_batches(&sr.detach(), SLICE_CROP);

        // critic update
        let mut d_losses = 0.0;
        let mut gps = 0.0;
        let routes: Vec<(usize, Orientation)> = (0..3).map(|k| (if cfg.anisotropic { k } else { 0 }, fakes[k].0)).collect();
        let mut grads_acc: Vec<Vec<Tensor<f32>>> =
            state.critics.iter().map(|c| c.iter().map(|p| Tensor::zeros(p.shape())).collect()).collect();
        let groups: f32 = if cfg.anisotropic { 1.0 } else { 3.0 };
        for (k, &(ci, o)) in routes.iter().enumerate() {
            let all = fakes[k].1.value();
            let count = cfg.critic_slices.map_or(all.shape()[0], |c| c.min(all.shape()[0]));
            let idx = sample_indices(rng, all.shape()[0], count).into_vec();
            let fake = gather(all, &idx);
            let real_f: Vec<OneHotField> = (0..count).map(|_| sample_hr_patch(bank, patch, o, rng)).collect::<Result<_>>()?;
            let real = stack(&real_f);
            let spec = &state.critic_specs[ci];
            let params: Vec<Var<f32>> = state.critics[ci].iter().cloned().map(Var::leaf).collect();
            let f_scores = critic_forward(spec, &params, &Var::constant(fake.clone()));
            let r_scores = critic_forward(spec, &params, &Var::constant(real.clone()));
            let gp = gradient_penalty(|x| critic_forward(spec, &params, x), &fake, &real, cfg.gp_lambda, rng)?;
            let loss = critic_loss(&f_scores, &r_scores, &gp).scale(1.0 / groups);
            d_losses += loss.item() as f64;
            gps += gp.item() as f64 / groups as f64;
            for (acc, g) in grads_acc[ci].iter_mut().zip(grad(&[loss], &[None], &params, false)) {
                *acc = acc.zip_map(g.value(), |a, b| a + b);
            }
        }
        check_finite(d_losses, "critic loss", it)?;
        for ci in 0..state.critics.len() {
            let mut opt = state.adam(cfg.lr_d, &state.critic_opts[ci]);
            opt.step(&mut state.critics[ci], &grads_acc[ci]);
            state.critic_opts[ci] = opt.state;
        }
        state.critic_updates += 1;

        // generator update
        let lr_var = Var::constant(lr_t);
        let l_vw = voxelwise_loss(&lr_var, &ds.apply(&if gen_step { sr.clone() } else { sr.detach() }))?;
        let mut g_loss = f64::NAN;
        if gen_step {
            let slices = slice_batches(&sr, SLICE_CROP);
            let mut adv: Option<Var<f32>> = None;
            for (k, (_, s)) in slices.iter().enumerate() {
                let ci = routes[k].0;
                let params: Vec<Var<f32>> = state.critics[ci].iter().cloned().map(Var::constant).collect();
                let m = critic_forward(&state.critic_specs[ci], &params, s).mean_all();
                adv = Some(match adv {
                    None => m,
                    Some(a) => a.add(&m),
                });
            }
            let scores_mean = adv.unwrap().scale(1.0 / 3.0);
            let loss = generator_loss(&scores_mean, &l_vw, cfg.b, cfg.c);
            g_loss = loss.item() as f64;
            check_finite(g_loss, "generator loss", it)?;
            let grads: Vec<Tensor<f32>> = grad(&[loss], &[None], &gparams, false).into_iter().map(|g| g.value().clone()).collect();
            let mut opt = state.adam(cfg.lr_g, &state.gen_opt);
            opt.step(&mut state.generator, &grads);
            state.gen_opt = opt.state;
            state.generator_updates += 1;
        }
        let l_vw_val = l_vw.item() as f64;
        check_finite(l_vw_val, "voxel-wise loss", it)?;

        state.iteration += 1;
        if state.iteration % cfg.monitor_interval as u64 == 0 || state.iteration as usize == cfg.iterations {
            record_monitor(&mut state, sr.value(), l_vw_val, d_losses, gps, g_loss);
        }
        if let Some(s) = sink {
            if state.iteration % cfg.checkpoint_interval as u64 == 0 || state.iteration as usize == cfg.iterations {
                save_checkpoint(&state, &s.path_for(state.iteration))?;
                save_checkpoint(&state, &s.latest())?;
            }
        }
    }
    Ok(state)
}

/// Cheap statistics of the current batch: phase fractions, surface areas and losses.
fn record_monitor(state: &mut TrainState, sr: &Tensor<f32>, l_vw: f64, d_loss: f64, gp: f64, g_loss: f64) {
    let it = state.iteration;
    let sh = sr.shape();
    let (n, c) = (sh[0], sh[1]);
    let per = sr.len() / n;
    let mut vf = vec![0.0; c];
    let pairs: Vec<(usize, usize)> = (0..c).flat_map(|a| (a + 1..c).map(move |b| (a, b))).collect();
    let mut sa = vec![0.0; pairs.len()];
    for b in 0..n {
        let f = OneHotField::from_tensor(Tensor::from_vec(&sh[1..], sr.data()[b * per..(b + 1) * per].iter().map(|&v| v as f64).collect()))
            .expect("softmax output is non-negative");
        let labels = argmax_labels(&f);
        for &l in &labels {
            vf[l as usize] += 1.0 / (labels.len() * n) as f64;
        }
        let v = PhaseVolume::new([sh[4], sh[3], sh[2]], 1.0, labels, state.hr_palette.clone()).expect("argmax labels fit the palette");
        for (k, &(p, q)) in pairs.iter().enumerate() {
            sa[k] += interphase_surface_area(&v, p, q).unwrap_or(0.0) / n as f64;
        }
    }
    let mut push = |metric: String, value: f64| state.history.push(MetricRecord { iteration: it, metric, value });
    for (p, v) in vf.iter().enumerate() {
        push(format!("vf:{}", state.hr_palette[p]), *v);
    }
    for (k, &(p, q)) in pairs.iter().enumerate() {
        push(format!("sa:{}|{}", state.hr_palette[p], state.hr_palette[q]), sa[k]);
    }
    push("l_vw".into(), l_vw);
    push("loss_d".into(), d_loss);
    push("gp".into(), gp);
    if g_loss.is_finite() {
        push("loss_g".into(), g_loss);
    }
    log::info!("iter {it}: l_vw {l_vw:.5} loss_d {d_loss:.4} gp {gp:.4}");
}

// ---------------------------------------------------------------------------
// checkpoints

const MAGIC: &[u8; 4] = b"VXCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BlobRef {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    generator_hash: String,
    config: TrainConfig,
    gen_spec: GeneratorSpec,
    critic_specs: Vec<CriticSpec>,
    iteration: u64,
    generator_updates: u64,
    critic_updates: u64,
    seed: u64,
    rng: RngState,
    gen_opt_step: u64,
    critic_opt_steps: Vec<u64>,
    history: Vec<MetricRecord>,
    hr_palette: Vec<String>,
    lr_palette: Vec<String>,
    blobs: Vec<BlobRef>,
}

fn named_tensors(s: &TrainState) -> Vec<(String, &Tensor<f32>)> {
    fn put<'a>(out: &mut Vec<(String, &'a Tensor<f32>)>, prefix: &str, ts: &'a [Tensor<f32>]) {
        out.extend(ts.iter().enumerate().map(|(i, t)| (format!("{prefix}.{i}"), t)));
    }
    let mut out = Vec::new();
    put(&mut out, "g", &s.generator);
    put(&mut out, "g.m", &s.gen_opt.m);
    put(&mut out, "g.v", &s.gen_opt.v);
    for (k, c) in s.critics.iter().enumerate() {
        put(&mut out, &format!("d{k}"), c);
        put(&mut out, &format!("d{k}.m"), &s.critic_opts[k].m);
        put(&mut out, &format!("d{k}.v"), &s.critic_opts[k].v);
    }
    out
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let tensors = named_tensors(state);
    let mut offset = 0;
    let blobs = tensors
        .iter()
        .map(|(name, t)| {
            let b = BlobRef { name: name.clone(), shape: t.shape().to_vec(), offset };
            offset += t.len() * 4;
            b
        })
        .collect();
    let header = CheckpointHeader {
        generator_hash: state.gen_spec.hash(),
        config: state.config.clone(),
        gen_spec: state.gen_spec.clone(),
        critic_specs: state.critic_specs.clone(),
        iteration: state.iteration,
        generator_updates: state.generator_updates,
        critic_updates: state.critic_updates,
        seed: state.seed,
        rng: RngState::capture(&state.rng),
        gen_opt_step: state.gen_opt.step,
        critic_opt_steps: state.critic_opts.iter().map(|o| o.step).collect(),
        history: state.history.clone(),
        hr_palette: state.hr_palette.clone(),
        lr_palette: state.lr_palette.clone(),
        blobs,
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let h: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    if h.gen_spec.hash() != h.generator_hash {
        return Err(bad("spec hash mismatch".into()));
    }
    let payload = &bytes[16 + hlen..];
    let mut lookup = std::collections::HashMap::new();
    for b in &h.blobs {
        let n: usize = b.shape.iter().product();
        let raw = payload.get(b.offset..b.offset + 4 * n).ok_or_else(|| bad(format!("truncated blob {}", b.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        lookup.insert(b.name.clone(), Tensor::from_vec(&b.shape, data));
    }
    let take = |prefix: &str, shapes: &[Vec<usize>]| -> Result<Vec<Tensor<f32>>> {
        (0..shapes.len())
            .map(|i| {
                let name = format!("{prefix}.{i}");
                let t = lookup.get(&name).cloned().ok_or_else(|| Error::Checkpoint(format!("missing blob {name}")))?;
                if t.shape() != shapes[i].as_slice() {
                    return Err(Error::Checkpoint(format!("blob {name} has shape {:?}, spec wants {:?}", t.shape(), shapes[i])));
                }
                Ok(t)
            })
            .collect()
    };
    let gs = h.gen_spec.param_shapes();
    let generator = take("g", &gs)?;
    let gen_opt = AdamState { step: h.gen_opt_step, m: take("g.m", &gs)?, v: take("g.v", &gs)? };
    let mut critics = Vec::new();
    let mut critic_opts = Vec::new();
    for (k, spec) in h.critic_specs.iter().enumerate() {
        let cs = spec.param_shapes();
        critics.push(take(&format!("d{k}"), &cs)?);
        let step = *h.critic_opt_steps.get(k).ok_or_else(|| bad("missing optimizer step".into()))?;
        critic_opts.push(AdamState { step, m: take(&format!("d{k}.m"), &cs)?, v: take(&format!("d{k}.v"), &cs)? });
    }
    Ok(TrainState {
        config: h.config,
        gen_spec: h.gen_spec,
        critic_specs: h.critic_specs,
        generator,
        critics,
        gen_opt,
        critic_opts,
        iteration: h.iteration,
        generator_updates: h.generator_updates,
        critic_updates: h.critic_updates,
        seed: h.seed,
        rng: h.rng.restore()?,
        history: h.history,
        hr_palette: h.hr_palette,
        lr_palette: h.lr_palette,
    })
}

/// Atomic write: temp file in the same directory, then rename.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("vxck.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&encode_checkpoint(state)).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint and insists its generator matches `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &GeneratorSpec) -> Result<TrainState> {
    let s = load_checkpoint(path)?;
    if s.gen_spec.hash() != expected.hash() {
        return Err(Error::Checkpoint("spec hash mismatch: checkpoint was trained for a different generator".into()));
    }
    Ok(s)
}
