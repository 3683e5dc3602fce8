//! Training objective, Adam loop, single-trajectory sampling and checkpoints.
//!
//! Checkpoint file layout (integers little-endian):
//!
//! ```text
//! b"SFCK" | version u32 | meta_len u32 | meta JSON (meta_len bytes) | SFTN tensor * n
//! ```
//!
//! The JSON block carries every config echo plus the ordered list of
//! parameter names and shapes; the tensors follow in the same order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, Latent};
use crate::denoiser::{concat_latents, mask_hr, normalize_dt, ConcatLatent, Denoiser, DenoiserConfig};
use crate::diffusion::{self, inference_timesteps, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::format::{self, RawTensor};
use crate::nn::ParamSet;
use crate::par;
use crate::rng::{derive_key, tag, Stream};
use crate::synthdata::{Scene, SceneConfig};
use crate::tensor::{Image, Tensor3};
use crate::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    /// Snapshot period in iterations; 0 disables intermediate snapshots.
    pub checkpoint_every: usize,
    /// Window of the smoothed loss.
    pub loss_window: usize,
    /// Decay of an exponential moving average of the weights; 0 turns it
    /// off. When on, snapshots and the final checkpoint carry the averaged
    /// weights.
    pub ema_decay: f64,
    pub model: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            learning_rate: 1e-4,
            iterations: 2000,
            seed: 0,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            checkpoint_every: 500,
            loss_window: 100,
            ema_decay: 0.0,
            model: DenoiserConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("train.ema_decay", "must be in [0, 1)"));
        }
        if self.loss_window == 0 {
            return Err(Error::config("train.loss_window", "must be at least 1"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) {
            return Err(Error::config("train.adam.beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::config("train.adam.beta2", "must be in [0, 1)"));
        }
        if a.eps.is_nan() || a.eps <= 0.0 {
            return Err(Error::config("train.adam.eps", "must be positive"));
        }
        self.schedule.build()?;
        self.model.validate()
    }
}

/// One training example after all random draws.
#[derive(Debug, Clone)]
pub struct TrainSample<T = f32> {
    pub z_lr: Latent<T>,
    pub z_hr: Latent<T>,
    pub dt_norm: f64,
    pub t: usize,
    /// Noise over the full concatenated latent.
    pub eps: ConcatLatent<T>,
}

impl<T: Real> TrainSample<T> {
    /// `concat(z_lr, z_hr)` noised to level `t`.
    pub fn noisy_input(&self, sched: &NoiseSchedule) -> Result<ConcatLatent<T>> {
        let clean = concat_latents(&self.z_lr, &self.z_hr)?;
        let (h, w, c) = clean.shape();
        Tensor3::from_vec(
            h,
            w,
            c,
            diffusion::forward_noise(clean.as_slice(), self.t, self.eps.as_slice(), sched)?,
        )
    }
}

/// Build a sample from scene `scene`, revisit `lr_index`, timestep `t`, with
/// noise drawn from `noise`.
pub fn make_sample<T: Real>(scene: &Scene, lr_index: usize, t: usize, noise: &mut Stream) -> Result<TrainSample<T>> {
    let obs = scene
        .lr_list
        .get(lr_index)
        .ok_or_else(|| Error::Input(format!("scene {} has no revisit {lr_index}", scene.scene_id)))?;
    let z_lr = codec::encode(&obs.image.cast::<T>())?;
    let z_hr = codec::encode(&scene.hr.cast::<T>())?;
    let (h, w, c) = z_hr.shape();
    let eps = Tensor3::from_vec(h, 2 * w, c, noise.normals(h * 2 * w * c))?;
    Ok(TrainSample {
        z_lr,
        z_hr,
        dt_norm: normalize_dt(obs.dt_days),
        t,
        eps,
    })
}

/// Scene order for iteration `iteration`: epochs are consecutive random
/// permutations of the dataset, consumed `batch_size` at a time.
fn batch_scene_indices(n_scenes: usize, batch_size: usize, seed: u64, iteration: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch_size)
        .map(|b| {
            let pos = iteration * batch_size + b;
            let (epoch, offset) = (pos / n_scenes, pos % n_scenes);
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut s = Stream::derived(seed, &[tag::TRAIN_BATCH, 0, epoch as u64]);
                cached = Some((epoch, s.choose_distinct(n_scenes, n_scenes)));
            }
            cached.as_ref().unwrap().1[offset]
        })
        .collect()
}

/// The training batch of `iteration`: scene order from the epoch permutation;
/// revisit index, timestep and noise from a stream keyed by
/// `(seed, iteration, slot)`.
pub fn draw_batch<T: Real>(
    scenes: &[Scene],
    batch_size: usize,
    seed: u64,
    iteration: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<TrainSample<T>>> {
    if scenes.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let idx = batch_scene_indices(scenes.len(), batch_size, seed, iteration);
    idx.iter()
        .enumerate()
        .map(|(b, &si)| {
            let scene = &scenes[si];
            if scene.lr_list.is_empty() {
                return Err(Error::Input(format!("scene {} has no revisits", scene.scene_id)));
            }
            let mut s = Stream::derived(seed, &[tag::TRAIN_BATCH, 1, iteration as u64, b as u64]);
            let lr_index = s.below(scene.lr_list.len() as u64) as usize;
            let t = 1 + s.below(sched.len() as u64) as usize;
            make_sample(scene, lr_index, t, &mut s)
        })
        .collect()
}

/// `|F(eps_hat - eps)|^2 / count` and its gradient w.r.t. `eps_hat` (zero on
/// the LR half).
pub fn masked_loss<T: Real>(eps_hat: &ConcatLatent<T>, eps: &ConcatLatent<T>) -> Result<(f64, ConcatLatent<T>)> {
    eps_hat.ensure_same_shape(eps, "masked_loss")?;
    let (h, w, c) = eps.shape();
    if w % 2 != 0 {
        return Err(Error::Shape(format!("concatenated width {w} is odd")));
    }
    let half = w / 2;
    let count = (h * half * c) as f64;
    let scale = T::of(2.0 / count);
    let mut grad = Tensor3::zeros(h, w, c);
    let mut sum = 0.0;
    for y in 0..h {
        for x in half..w {
            for ch in 0..c {
                let d = eps_hat.get(y, x, ch) - eps.get(y, x, ch);
                sum += d.f64() * d.f64();
                grad.set(y, x, ch, scale * d);
            }
        }
    }
    Ok((sum / count, grad))
}

/// Batch loss for an arbitrary noise predictor.
pub fn training_loss_with<T: Real>(
    samples: &[TrainSample<T>],
    sched: &NoiseSchedule,
    predict: impl Fn(&ConcatLatent<T>, usize, f64) -> Result<ConcatLatent<T>>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let x = s.noisy_input(sched)?;
        let eps_hat = predict(&x, s.t, s.dt_norm)?;
        total += masked_loss(&eps_hat, &s.eps)?.0;
    }
    Ok(total / samples.len() as f64)
}

pub fn training_loss<T: Real>(model: &Denoiser<T>, samples: &[TrainSample<T>], sched: &NoiseSchedule) -> Result<f64> {
    training_loss_with(samples, sched, |x, t, dt| model.forward(x, t, dt))
}

/// Batch loss and its parameter gradient. Samples run in parallel; the
/// per-sample gradients are summed in sample order.
pub fn loss_and_gradients<T: Real>(
    model: &Denoiser<T>,
    samples: &[TrainSample<T>],
    sched: &NoiseSchedule,
) -> Result<(f64, ParamSet<T>)> {
    if samples.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let parts = par::map_slice(samples, |s| -> Result<(f64, ParamSet<T>)> {
        let x = s.noisy_input(sched)?;
        let (eps_hat, cache) = model.forward_cached(&x, s.t, s.dt_norm)?;
        let (loss, d_out) = masked_loss(&eps_hat, &s.eps)?;
        let mut g = model.params.zeros_like();
        model.backward(&cache, &d_out, &mut g);
        Ok((loss, g))
    });
    let mut total = 0.0;
    let mut grads: Option<ParamSet<T>> = None;
    for part in parts {
        let (l, g) = part?;
        total += l;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => acc.add_assign(&g),
        }
    }
    let n = samples.len() as f64;
    let mut grads = grads.expect("nonempty batch");
    grads.scale(T::of(1.0 / n));
    Ok((total / n, grads))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: ParamSet<f32>,
    v: ParamSet<f32>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet<f32>) -> Self {
        Adam {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// Update every tensor except those listed in `frozen`.
    pub fn update(&mut self, params: &mut ParamSet<f32>, grads: &ParamSet<f32>, lr: f64, frozen: &[usize]) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = c.eps as f32;
        for (i, p) in params.tensors.iter_mut().enumerate() {
            if frozen.contains(&i) {
                continue;
            }
            let g = &grads.tensors[i].data;
            let m = &mut self.m.tensors[i].data;
            let v = &mut self.v.tensors[i].data;
            for j in 0..p.data.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p.data[j] -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Codec description stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecInfo {
    pub kind: String,
    pub levels: u32,
}

impl Default for CodecInfo {
    fn default() -> Self {
        CodecInfo {
            kind: "haar".into(),
            levels: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub codec: CodecInfo,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub iteration: usize,
    pub loss_history: Vec<f64>,
    pub params: ParamSet<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format_version: u32,
    model: DenoiserConfig,
    schedule: ScheduleConfig,
    codec: CodecInfo,
    scene: SceneConfig,
    train: TrainConfig,
    iteration: usize,
    loss_history: Vec<f64>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn denoiser(&self) -> Result<Denoiser<f32>> {
        Denoiser::from_params(&self.model, self.params.clone())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            schedule: self.schedule,
            codec: self.codec.clone(),
            scene: self.scene.clone(),
            train: self.train.clone(),
            iteration: self.iteration,
            loss_history: self.loss_history.clone(),
            tensors: self
                .params
                .tensors
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.params.count() + 64 * self.params.tensors.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params.tensors {
            let dims = p.shape.iter().map(|&d| d as u32).collect();
            format::encode_tensor(&RawTensor::new(dims, p.data.clone())?, &mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let read_u32 = |pos: usize| -> Result<u32> {
            buf.get(pos..pos + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::Format("truncated checkpoint header".into()))
        };
        if buf.len() < 4 || &buf[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(4)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let len = read_u32(8)? as usize;
        let json = buf
            .get(12..12 + len)
            .ok_or_else(|| Error::Format("truncated checkpoint metadata".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if meta.format_version != version {
            return Err(Error::Format("metadata version disagrees with header".into()));
        }
        let mut pos = 12 + len;
        let mut params = ParamSet::default();
        for entry in meta.tensors {
            let raw = format::decode_tensor(buf, &mut pos)?;
            let dims: Vec<usize> = raw.dims.iter().map(|&d| d as usize).collect();
            if dims != entry.shape {
                return Err(Error::Format(format!(
                    "tensor {} has dims {dims:?}, metadata says {:?}",
                    entry.name, entry.shape
                )));
            }
            params.push(entry.name, dims, raw.data);
        }
        if pos != buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes in checkpoint",
                buf.len() - pos
            )));
        }
        let ckpt = Checkpoint {
            model: meta.model,
            schedule: meta.schedule,
            codec: meta.codec,
            scene: meta.scene,
            train: meta.train,
            iteration: meta.iteration,
            loss_history: meta.loss_history,
            params,
        };
        // reject parameter sets that do not match the declared architecture
        ckpt.denoiser().map_err(|e| Error::Format(e.to_string()))?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    format::write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Per-iteration report handed to the [`train`] observer. `snapshot` is set
/// every `checkpoint_every` iterations.
pub struct Progress<'a> {
    pub iteration: usize,
    pub loss: f64,
    pub smoothed: f64,
    pub snapshot: Option<&'a Checkpoint>,
}

/// Mean of the last `window` entries ending at `end` (exclusive).
pub fn smoothed_loss(history: &[f64], end: usize, window: usize) -> f64 {
    let start = end.saturating_sub(window);
    let s = &history[start..end];
    s.iter().sum::<f64>() / s.len().max(1) as f64
}

pub fn train(
    scenes: &[Scene],
    scene_config: &SceneConfig,
    config: &TrainConfig,
    mut observer: impl FnMut(Progress<'_>) -> Result<()>,
) -> Result<Checkpoint> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let sched = config.schedule.build()?;
    let mut model = Denoiser::<f32>::init(&config.model, config.seed)?;
    let frozen: Vec<usize> = if config.model.use_dt {
        Vec::new()
    } else {
        model.dt_param_indices().to_vec()
    };
    let mut adam = Adam::new(config.adam, &model.params);
    let mut history = Vec::with_capacity(config.iterations);
    let mut ema = (config.ema_decay > 0.0).then(|| model.params.clone());
    let snapshot = |params: &ParamSet<f32>, history: &Vec<f64>| Checkpoint {
        model: config.model.clone(),
        schedule: config.schedule,
        codec: CodecInfo::default(),
        scene: scene_config.clone(),
        train: config.clone(),
        iteration: history.len(),
        loss_history: history.clone(),
        params: params.clone(),
    };
    for it in 0..config.iterations {
        let batch = draw_batch::<f32>(scenes, config.batch_size, config.seed, it, &sched)?;
        let (loss, grads) = loss_and_gradients(&model, &batch, &sched).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("training diverged at iteration {it}: {m}")),
            other => other,
        })?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at iteration {it}: non-finite loss or gradient"
            )));
        }
        adam.update(&mut model.params, &grads, config.learning_rate, &frozen);
        if let Some(name) = model.params.first_non_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at iteration {it}: parameter {name}"
            )));
        }
        if let Some(avg) = ema.as_mut() {
            // short warm-up so early weights do not dominate the average
            let d = config.ema_decay.min((1 + it) as f64 / (10 + it) as f64) as f32;
            for (a, p) in avg.tensors.iter_mut().zip(&model.params.tensors) {
                for (x, &y) in a.data.iter_mut().zip(&p.data) {
                    *x = d * *x + (1.0 - d) * y;
                }
            }
        }
        history.push(loss);
        let done = it + 1;
        let weights = ema.as_ref().unwrap_or(&model.params);
        let snap =
            (config.checkpoint_every > 0 && done % config.checkpoint_every == 0).then(|| snapshot(weights, &history));
        observer(Progress {
            iteration: done,
            loss,
            smoothed: smoothed_loss(&history, done, config.loss_window),
            snapshot: snap.as_ref(),
        })?;
    }
    Ok(snapshot(ema.as_ref().unwrap_or(&model.params), &history))
}

/// One reverse-sampling chain for a single revisit. The LR half of the model
/// input is `E(LR)` re-noised to the current level with a per-step draw.
///
/// Sampler state is kept in double precision; only the network input is
/// rounded to single precision.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub index: usize,
    pub z_t: Latent<f64>,
    pub z_lr: Latent<f32>,
    pub dt_norm: f64,
    seed: u64,
}

impl Trajectory {
    /// `z_T ~ N(0, I)` drawn from `(seed, index)`.
    pub fn new(lr: &Image, dt_days: f64, seed: u64, index: usize) -> Result<Self> {
        if !lr.is_finite() {
            return Err(Error::Input("non-finite LR image".into()));
        }
        let z_lr = codec::encode(lr)?;
        let (h, w, c) = z_lr.shape();
        let mut s = Stream::derived(seed, &[tag::SAMPLE_INIT, index as u64]);
        let z_t = Tensor3::from_vec(h, w, c, s.normals(h * w * c))?;
        Ok(Trajectory {
            index,
            z_t,
            z_lr,
            dt_norm: normalize_dt(dt_days),
            seed,
        })
    }

    fn step_noise<T: Real>(&self, label: u64, step: usize) -> Vec<T> {
        let key = derive_key(self.seed, &[label, self.index as u64, step as u64]);
        Stream::new(key).normals(self.z_t.len())
    }

    /// `(eps_hat, z0_hat)` for the HR half at timestep `t` (step `step` of the
    /// inference grid).
    pub fn predict(
        &self,
        model: &Denoiser<f32>,
        sched: &NoiseSchedule,
        t: usize,
        step: usize,
    ) -> Result<(Latent<f64>, Latent<f64>)> {
        let lr_noise = self.step_noise::<f32>(tag::SAMPLE_LR_NOISE, step);
        let (h, w, c) = self.z_lr.shape();
        let lr_t = Tensor3::from_vec(
            h,
            w,
            c,
            diffusion::forward_noise(self.z_lr.as_slice(), t, &lr_noise, sched)?,
        )?;
        let x = concat_latents(&lr_t, &self.z_t.cast::<f32>())?;
        let eps_full = model.forward(&x, t, self.dt_norm)?;
        let eps_raw = mask_hr(&eps_full)?.cast::<f64>();
        let z0 = diffusion::tweedie(self.z_t.as_slice(), eps_raw.as_slice(), t, sched)?;
        let mut z0 = Tensor3::from_vec(h, w, c, z0)?;
        // keep z0_hat decodable to a unit-range image; eps_hat is recomputed so
        // the DDIM update stays consistent with the clamped estimate
        codec::clamp_to_unit_box(&mut z0);
        let eps_hat = diffusion::eps_from_z0(self.z_t.as_slice(), z0.as_slice(), t, sched)?;
        Ok((Tensor3::from_vec(h, w, c, eps_hat)?, z0))
    }

    /// DDIM update from `t` to `prev` given (possibly fused) `z0_hat`.
    #[allow(clippy::too_many_arguments)]
    pub fn advance(
        &mut self,
        z0_hat: &Latent<f64>,
        eps_hat: &Latent<f64>,
        t: usize,
        prev: usize,
        eta: f64,
        step: usize,
        sched: &NoiseSchedule,
    ) -> Result<()> {
        self.z_t = self.next_latent(z0_hat, eps_hat, t, prev, eta, step, sched)?;
        Ok(())
    }

    /// The latent [`Trajectory::advance`] would store, without mutating.
    #[allow(clippy::too_many_arguments)]
    pub fn next_latent(
        &self,
        z0_hat: &Latent<f64>,
        eps_hat: &Latent<f64>,
        t: usize,
        prev: usize,
        eta: f64,
        step: usize,
        sched: &NoiseSchedule,
    ) -> Result<Latent<f64>> {
        let noise = if eta > 0.0 {
            self.step_noise::<f64>(tag::SAMPLE_DDIM_NOISE, step)
        } else {
            Vec::new()
        };
        let z = diffusion::ddim_step(z0_hat.as_slice(), eps_hat.as_slice(), t, prev, eta, &noise, sched)?;
        let (h, w, c) = self.z_t.shape();
        let z = Tensor3::from_vec(h, w, c, z)?;
        if !z.is_finite() {
            return Err(Error::Numeric(format!("non-finite latent at step {step} (t = {t})")));
        }
        Ok(z)
    }
}

/// Decode a final latent into a unit-range image.
pub fn finish_latent(z0: &Latent<f64>) -> Result<Image> {
    Ok(codec::decode(z0)?.clamp01().cast::<f32>())
}

/// Conditional DDIM sample for one revisit: returns the decoded HR half,
/// clamped to `[0, 1]`.
pub fn sample_conditional(
    lr: &Image,
    dt_days: f64,
    model: &Denoiser<f32>,
    sched: &NoiseSchedule,
    steps: usize,
    eta: f64,
    seed: u64,
) -> Result<Image> {
    let ts = inference_timesteps(sched.len(), steps)?;
    let mut traj = Trajectory::new(lr, dt_days, seed, 0)?;
    for (j, &t) in ts.iter().enumerate() {
        let prev = ts.get(j + 1).copied().unwrap_or(0);
        let (eps_hat, z0) = traj.predict(model, sched, t, j)?;
        traj.advance(&z0, &eps_hat, t, prev, eta, j, sched)?;
    }
    finish_latent(&traj.z_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_scenes;

    fn tiny_model() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 12,
            base_channels: 2,
            embed_dim: 4,
            embed_hidden: 4,
            use_dt: true,
        }
    }

    fn small_scenes(n: usize) -> (SceneConfig, Vec<Scene>) {
        let cfg = SceneConfig {
            hr_size: 8,
            lr_factor: 2,
            n_lr: 3,
            ..Default::default()
        };
        let scenes = generate_scenes(&cfg, 0, n).unwrap();
        (cfg, scenes)
    }

    fn sched() -> NoiseSchedule {
        ScheduleConfig::default().build().unwrap()
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let (_, scenes) = small_scenes(3);
        let s = sched();
        let batch = draw_batch::<f64>(&scenes, 4, 1, 0, &s).unwrap();
        let lookup = batch.clone();
        let loss = training_loss_with(&batch, &s, |x, t, _| {
            let hit = lookup
                .iter()
                .find(|b| b.t == t && b.noisy_input(&s).unwrap() == *x)
                .unwrap();
            Ok(hit.eps.clone())
        })
        .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn lr_half_perturbation_leaves_loss_unchanged() {
        let mut st = Stream::new(3);
        let eps = Tensor3::<f64>::from_fn(4, 8, 3, |_, _, _| st.normal());
        let eps_hat = Tensor3::<f64>::from_fn(4, 8, 3, |_, _, _| st.normal());
        let (l0, g) = masked_loss(&eps_hat, &eps).unwrap();
        let bumped = Tensor3::from_fn(4, 8, 3, |y, x, c| {
            eps_hat.get(y, x, c) + if x < 4 { 1e3 * st.normal() } else { 0.0 }
        });
        assert_eq!(masked_loss(&bumped, &eps).unwrap().0, l0);
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    assert_eq!(g.get(y, x, c), 0.0);
                }
            }
        }
        assert!(l0 >= 0.0);
    }

    #[test]
    fn zero_net_loss_is_chi_square_mean() {
        let (_, scenes) = small_scenes(4);
        let s = sched();
        let model = Denoiser::<f64>::init(&tiny_model(), 0).unwrap();
        // 4x4x12 HR half = 192 elements per sample; 64 samples ~ 1.2e4 elements
        let mut samples = Vec::new();
        for it in 0..16 {
            samples.extend(draw_batch::<f64>(&scenes, 4, 9, it, &s).unwrap());
        }
        let n = (samples.len() * 192) as f64;
        let loss = training_loss(&model, &samples, &s).unwrap();
        let sd = (2.0 / n).sqrt();
        assert!((loss - 1.0).abs() < 3.0 * sd, "loss {loss}, 3 sd {}", 3.0 * sd);
    }

    #[test]
    fn empty_batch_is_an_input_error() {
        let s = sched();
        let model = Denoiser::<f64>::init(&tiny_model(), 0).unwrap();
        assert!(matches!(training_loss(&model, &[], &s), Err(Error::Input(_))));
        assert!(matches!(draw_batch::<f32>(&[], 2, 0, 0, &s), Err(Error::Input(_))));
    }

    #[test]
    fn batch_draws_are_deterministic_and_cover_epochs() {
        let (_, scenes) = small_scenes(5);
        let s = sched();
        let a = draw_batch::<f32>(&scenes, 4, 2, 7, &s).unwrap();
        let b = draw_batch::<f32>(&scenes, 4, 2, 7, &s).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.t, x.dt_norm), (y.t, y.dt_norm));
            assert_eq!(x.eps, y.eps);
        }
        let mut seen: Vec<usize> = (0..5).flat_map(|it| batch_scene_indices(5, 1, 2, it)).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert!(a.iter().all(|x| (1..=1000).contains(&x.t)));
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let cfg = crate::denoiser::tests::tiny_config();
        let mut model = Denoiser::<f64>::init(&cfg, 4).unwrap();
        assert!(model.param_count() <= 1000);
        let mut st = Stream::new(5);
        for p in &mut model.params.tensors {
            for v in &mut p.data {
                *v = 0.3 * st.normal();
            }
        }
        let s = sched();
        let mk = |seed: u64, dt: f64| {
            let mut r = Stream::new(seed);
            TrainSample {
                z_lr: Tensor3::from_fn(4, 4, 4, |_, _, _| r.normal()),
                z_hr: Tensor3::from_fn(4, 4, 4, |_, _, _| r.normal()),
                dt_norm: dt,
                t: 1 + r.below(1000) as usize,
                eps: Tensor3::from_fn(4, 8, 4, |_, _, _| r.normal()),
            }
        };
        let batch = vec![mk(1, 0.3), mk(2, -0.7)];
        let (_, grads) = loss_and_gradients(&model, &batch, &s).unwrap();
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for ti in 0..model.params.tensors.len() {
            for j in 0..model.params.tensors[ti].data.len() {
                let orig = model.params.tensors[ti].data[j];
                model.params.tensors[ti].data[j] = orig + h;
                let lp = training_loss(&model, &batch, &s).unwrap();
                model.params.tensors[ti].data[j] = orig - h;
                let lm = training_loss(&model, &batch, &s).unwrap();
                model.params.tensors[ti].data[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.tensors[ti].data[j];
                worst = worst.max((fd - an).abs() / (fd.abs() + an.abs()).max(1e-3));
            }
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }

    fn tiny_train_config(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 2,
            learning_rate: 1e-3,
            checkpoint_every: 2,
            loss_window: 2,
            model: tiny_model(),
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let (sc, scenes) = small_scenes(2);
        let cfg = tiny_train_config(0);
        let ck = train(&scenes, &sc, &cfg, |_| Ok(())).unwrap();
        assert_eq!(ck.params, Denoiser::<f32>::init(&cfg.model, cfg.seed).unwrap().params);
        assert_eq!(ck.iteration, 0);
    }

    #[test]
    fn training_is_reproducible_and_snapshots_fire() {
        let (sc, scenes) = small_scenes(3);
        let cfg = tiny_train_config(4);
        let mut snaps = Vec::new();
        let a = train(&scenes, &sc, &cfg, |p| {
            if let Some(s) = p.snapshot {
                snaps.push(s.iteration);
            }
            Ok(())
        })
        .unwrap();
        let b = train(&scenes, &sc, &cfg, |_| Ok(())).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(snaps, vec![2, 4]);
        assert_eq!(a.loss_history.len(), 4);
        assert_ne!(a.params, Denoiser::<f32>::init(&cfg.model, cfg.seed).unwrap().params);
    }

    #[test]
    fn frozen_dt_branch_stays_zero() {
        let (sc, scenes) = small_scenes(3);
        let mut cfg = tiny_train_config(3);
        cfg.model.use_dt = false;
        let ck = train(&scenes, &sc, &cfg, |_| Ok(())).unwrap();
        let net = ck.denoiser().unwrap();
        for i in net.dt_param_indices() {
            assert_eq!(
                ck.params.get(i),
                Denoiser::<f32>::init(&cfg.model, cfg.seed).unwrap().params.get(i)
            );
        }
        assert!(net.dt_embedding(0.5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ema_weights_follow_the_warmed_up_average() {
        let (sc, scenes) = small_scenes(3);
        let mut cfg = tiny_train_config(3);
        cfg.checkpoint_every = 1;
        let mut raw = vec![Denoiser::<f32>::init(&cfg.model, cfg.seed).unwrap().params];
        train(&scenes, &sc, &cfg, |p| {
            raw.push(p.snapshot.unwrap().params.clone());
            Ok(())
        })
        .unwrap();

        cfg.ema_decay = 0.9;
        let ck = train(&scenes, &sc, &cfg, |_| Ok(())).unwrap();
        let mut expect: Vec<f64> = raw[0]
            .tensors
            .iter()
            .flat_map(|t| t.data.iter().map(|&v| v as f64))
            .collect();
        for (it, p) in raw[1..].iter().enumerate() {
            let d = 0.9f64.min((1 + it) as f64 / (10 + it) as f64);
            let flat = p.tensors.iter().flat_map(|t| t.data.iter());
            for (e, &v) in expect.iter_mut().zip(flat) {
                *e = d * *e + (1.0 - d) * v as f64;
            }
        }
        let got = ck.params.tensors.iter().flat_map(|t| t.data.iter());
        for (e, &g) in expect.iter().zip(got) {
            assert!((e - g as f64).abs() <= 1e-6 * (1.0 + e.abs()), "{e} vs {g}");
        }
        assert_ne!(ck.params, raw[3]);

        cfg.ema_decay = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn observer_error_aborts_training() {
        let (sc, scenes) = small_scenes(2);
        let cfg = tiny_train_config(3);
        let r = train(&scenes, &sc, &cfg, |p| {
            if p.iteration == 2 {
                Err(Error::Input("stop".into()))
            } else {
                Ok(())
            }
        });
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn invalid_config_names_field() {
        let (sc, scenes) = small_scenes(1);
        let mut cfg = tiny_train_config(1);
        cfg.batch_size = 0;
        match train(&scenes, &sc, &cfg, |_| Ok(())) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "train.batch_size"),
            other => panic!("{other:?}"),
        }
    }

    fn trained_checkpoint() -> (Vec<Scene>, Checkpoint) {
        let (sc, scenes) = small_scenes(3);
        let ck = train(&scenes, &sc, &tiny_train_config(3), |_| Ok(())).unwrap();
        (scenes, ck)
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward() {
        let (_, ck) = trained_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let mut st = Stream::new(1);
        let x = Tensor3::<f32>::from_fn(4, 8, 12, |_, _, _| st.normal() as f32);
        let a = ck.denoiser().unwrap().forward(&x, 300, 0.1).unwrap();
        let b = back.denoiser().unwrap().forward(&x, 300, 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let (_, ck) = trained_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        for cut in [0, 3, 10, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn sample_conditional_is_deterministic_with_hr_shape() {
        let (scenes, ck) = trained_checkpoint();
        let model = ck.denoiser().unwrap();
        let s = ck.noise_schedule().unwrap();
        let lr = &scenes[0].lr_list[0];
        let a = sample_conditional(&lr.image, lr.dt_days, &model, &s, 10, 0.0, 5).unwrap();
        let b = sample_conditional(&lr.image, lr.dt_days, &model, &s, 10, 0.0, 5).unwrap();
        assert_eq!(a.shape(), scenes[0].hr.shape());
        assert_eq!(a.as_slice(), b.as_slice());
        let c = sample_conditional(&lr.image, lr.dt_days, &model, &s, 10, 0.0, 6).unwrap();
        assert_ne!(a.as_slice(), c.as_slice());
        let d = sample_conditional(&lr.image, lr.dt_days, &model, &s, 10, 1.0, 5).unwrap();
        let e = sample_conditional(&lr.image, lr.dt_days, &model, &s, 10, 1.0, 5).unwrap();
        assert_eq!(d.as_slice(), e.as_slice());
    }
}
