//! Procedural multi-temporal scenes: one clean HR image plus `n_lr` degraded
//! revisits, each tagged with its signed acquisition offset in days.
//!
//! On-disk layout written by [`generate_dataset`]:
//!
//! ```text
//! out_dir/
//!   manifest.json            config echo + [{scene_id, seed, dt_days}]
//!   scene_00000/hr.f32       (hr, hr, 3) SFTN tensor
//!   scene_00000/lr_0.f32     LR revisit 0, already upsampled to (hr, hr, 3)
//!   ...
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{load_image, save_image, write_atomic};
use crate::rng::{derive_key, tag, Stream};
use crate::tensor::{Image, Tensor3};

pub const CHANNELS: usize = 3;
pub const MANIFEST_VERSION: u32 = 1;
pub const SEASON_DAYS: f64 = 365.0;
pub const TINT_AMPLITUDE: f64 = 0.15;
/// Per-channel seasonal phase (R, G, B).
pub const TINT_PHASES: [f64; CHANNELS] = [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub hr_size: usize,
    pub lr_factor: usize,
    pub n_lr: usize,
    pub dt_range_days: [f64; 2],
    pub cloud_prob: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            hr_size: 32,
            lr_factor: 4,
            n_lr: 16,
            dt_range_days: [-180.0, 180.0],
            cloud_prob: 0.3,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hr_size == 0 || !self.hr_size.is_multiple_of(2) {
            return Err(Error::config("hr_size", "must be positive and even"));
        }
        if self.lr_factor == 0 {
            return Err(Error::config("lr_factor", "must be at least 1"));
        }
        if !self.hr_size.is_multiple_of(self.lr_factor) {
            return Err(Error::config(
                "hr_size",
                format!("{} is not divisible by lr_factor {}", self.hr_size, self.lr_factor),
            ));
        }
        if self.n_lr < 1 {
            return Err(Error::config("n_lr", "must be at least 1"));
        }
        let [lo, hi] = self.dt_range_days;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config("dt_range_days", "must be a nonempty finite interval"));
        }
        if !(0.0..=1.0).contains(&self.cloud_prob) {
            return Err(Error::config("cloud_prob", "must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrObservation {
    pub image: Image,
    pub dt_days: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub seed: u64,
    pub hr: Image,
    pub lr_list: Vec<LrObservation>,
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Seasonal brightness factor applied to channel `ch` at offset `dt_days`.
/// Each channel's curve is shifted so that `tint_factor(0, ch) == 1`.
pub fn tint_factor(dt_days: f64, ch: usize) -> f64 {
    let phase = TINT_PHASES[ch];
    1.0 + TINT_AMPLITUDE * ((2.0 * PI * dt_days / SEASON_DAYS + phase).sin() - phase.sin())
}

fn smooth_coverage(inside: f64) -> f64 {
    inside.clamp(0.0, 1.0)
}

fn render_hr(size: usize, rng: &mut Stream) -> Image {
    const PALETTES: [[f64; 3]; 4] = [
        [0.28, 0.42, 0.22], // vegetation
        [0.47, 0.38, 0.27], // bare soil
        [0.62, 0.57, 0.44], // dry grass
        [0.33, 0.37, 0.30], // scrub
    ];
    let n = size as f64;
    let base = PALETTES[rng.below(PALETTES.len() as u64) as usize];
    let mut img = Tensor3::<f64>::zeros(size, size, CHANNELS);

    // background: a few low-frequency plane waves
    let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let angle = rng.uniform_range(0.0, PI);
            let freq = rng.uniform_range(0.5, 3.0) * 2.0 * PI / n;
            let phase = rng.uniform_range(0.0, 2.0 * PI);
            let amp = rng.uniform_range(0.03, 0.08);
            let tint = [
                rng.uniform_range(0.7, 1.3),
                rng.uniform_range(0.7, 1.3),
                rng.uniform_range(0.7, 1.3),
            ];
            (angle.cos() * freq, angle.sin() * freq, phase, amp, tint)
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            for ch in 0..CHANNELS {
                let mut v = base[ch];
                for &(fx, fy, ph, amp, tint) in &waves {
                    v += amp * tint[ch] * (fx * x as f64 + fy * y as f64 + ph).sin();
                }
                img.set(y, x, ch, v);
            }
        }
    }

    // roads
    let n_roads = 1 + rng.below(2) as usize;
    for _ in 0..n_roads {
        let angle = rng.uniform_range(0.0, PI);
        let (cx, cy) = (rng.uniform_range(0.2, 0.8) * n, rng.uniform_range(0.2, 0.8) * n);
        let half_width = rng.uniform_range(0.8, 1.6);
        let gray = rng.uniform_range(0.45, 0.62);
        let (nx, ny) = (-angle.sin(), angle.cos());
        for y in 0..size {
            for x in 0..size {
                let dist = ((x as f64 + 0.5 - cx) * nx + (y as f64 + 0.5 - cy) * ny).abs();
                let cov = smooth_coverage(half_width + 0.5 - dist);
                if cov > 0.0 {
                    for ch in 0..CHANNELS {
                        let v = img.get(y, x, ch);
                        img.set(y, x, ch, v + cov * (gray - v));
                    }
                }
            }
        }
    }

    // buildings with a one-pixel cast shadow
    let n_buildings = 1 + rng.below(3) as usize;
    for _ in 0..n_buildings {
        let bw = 3 + rng.below((size / 4).max(2) as u64) as usize;
        let bh = 3 + rng.below((size / 4).max(2) as u64) as usize;
        let x0 = rng.below((size - bw.min(size - 1)) as u64) as usize;
        let y0 = rng.below((size - bh.min(size - 1)) as u64) as usize;
        let roof = match rng.below(3) {
            0 => [0.72, 0.36, 0.30],
            1 => [0.80, 0.80, 0.78],
            _ => [0.52, 0.52, 0.55],
        };
        let shade = rng.uniform_range(0.9, 1.1);
        for y in y0..(y0 + bh + 1).min(size) {
            for x in x0..(x0 + bw + 1).min(size) {
                let in_roof = y < y0 + bh && x < x0 + bw;
                for (ch, &r) in roof.iter().enumerate() {
                    let v = if in_roof { r * shade } else { img.get(y, x, ch) * 0.55 };
                    img.set(y, x, ch, v);
                }
            }
        }
    }

    // fine texture
    for v in img.as_mut_slice() {
        *v += 0.02 * rng.normal();
    }
    img.map(|v| v.clamp(0.0, 1.0)).cast()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with replicated borders.
fn blur(img: &Tensor3<f64>, sigma: f64) -> Tensor3<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w, c) = img.shape();
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let horiz = Tensor3::from_fn(h, w, c, |y, x, ch| {
        k.iter()
            .enumerate()
            .map(|(j, kv)| kv * img.get(y, clampi(x as isize + j as isize - r, w), ch))
            .sum::<f64>()
    });
    Tensor3::from_fn(h, w, c, |y, x, ch| {
        k.iter()
            .enumerate()
            .map(|(j, kv)| kv * horiz.get(clampi(y as isize + j as isize - r, h), x, ch))
            .sum::<f64>()
    })
}

fn average_pool(img: &Tensor3<f64>, f: usize) -> Tensor3<f64> {
    let (h, w, c) = img.shape();
    let norm = 1.0 / (f * f) as f64;
    Tensor3::from_fn(h / f, w / f, c, |y, x, ch| {
        let mut s = 0.0;
        for dy in 0..f {
            for dx in 0..f {
                s += img.get(y * f + dy, x * f + dx, ch);
            }
        }
        s * norm
    })
}

/// Bilinear resize by an integer factor with half-pixel centers and clamped
/// borders.
pub fn upsample_bilinear(img: &Tensor3<f64>, f: usize) -> Tensor3<f64> {
    let (h, w, c) = img.shape();
    let coord = |dst: usize, n: usize| {
        let src = ((dst as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    Tensor3::from_fn(h * f, w * f, c, |y, x, ch| {
        let (y0, y1, fy) = coord(y, h);
        let (x0, x1, fx) = coord(x, w);
        let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
        let bot = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Simulate one LR revisit of `hr` acquired `dt_days` away from it.
///
/// Fixed order: seasonal tint, optional cloud, Gaussian blur
/// (`sigma = lr_factor / 2`), average pooling, sensor noise, clamp to
/// `[0, 1]`, bilinear upsampling back to the HR grid.
pub fn degrade(hr: &Image, dt_days: f64, rng_seed: u64, config: &SceneConfig) -> Result<Image> {
    if !dt_days.is_finite() || !hr.is_finite() {
        return Err(Error::Input("degrade: non-finite input".into()));
    }
    let (h, w, c) = hr.shape();
    let f = config.lr_factor.max(1);
    if h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!("{h}x{w} image not divisible by lr_factor {f}")));
    }
    let mut rng = Stream::new(rng_seed);
    let mut img: Tensor3<f64> = hr.cast();

    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let s = tint_factor(dt_days, ch % CHANNELS);
                img.set(y, x, ch, img.get(y, x, ch) * s);
            }
        }
    }

    if rng.bernoulli(config.cloud_prob) {
        let ch_ = rng.uniform_range(0.25, 0.5) * h as f64;
        let cw = rng.uniform_range(0.25, 0.5) * w as f64;
        let cy = rng.uniform_range(0.0, h as f64 - ch_);
        let cx = rng.uniform_range(0.0, w as f64 - cw);
        let opacity = rng.uniform_range(0.6, 0.9);
        let edge = 2.0;
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let ay = ((py - cy).min(cy + ch_ - py) / edge).clamp(0.0, 1.0);
                let ax = ((px - cx).min(cx + cw - px) / edge).clamp(0.0, 1.0);
                let a = opacity * ay * ax;
                for ch in 0..c {
                    let v = img.get(y, x, ch);
                    img.set(y, x, ch, v + a * (0.95 - v));
                }
            }
        }
    }

    let img = blur(&img, f as f64 / 2.0);
    let mut lr = average_pool(&img, f);
    for v in lr.as_mut_slice() {
        let n = rng.normal();
        *v = (*v + config.noise_sigma * n).clamp(0.0, 1.0);
    }
    Ok(upsample_bilinear(&lr, f).cast())
}

/// Build scene `scene_index` of the family defined by `config`.
pub fn generate_scene(config: &SceneConfig, scene_index: usize) -> Result<Scene> {
    config.validate()?;
    let seed = derive_key(config.seed, &[tag::SCENE, scene_index as u64]);
    let mut rng = Stream::new(seed);
    let hr = render_hr(config.hr_size, &mut rng);
    let [lo, hi] = config.dt_range_days;
    let lr_list = (0..config.n_lr)
        .map(|i| {
            let dt_days = rng.uniform_range(lo, hi);
            let key = derive_key(config.seed, &[tag::DEGRADE, scene_index as u64, i as u64]);
            degrade(&hr, dt_days, key, config).map(|image| LrObservation { image, dt_days })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        scene_id: scene_id(scene_index),
        seed,
        hr,
        lr_list,
    })
}

/// Generate `n` scenes starting at `first_index`, in parallel.
pub fn generate_scenes(config: &SceneConfig, first_index: usize, n: usize) -> Result<Vec<Scene>> {
    config.validate()?;
    crate::par::map_range(n, |i| generate_scene(config, first_index + i))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub seed: u64,
    pub dt_days: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: SceneConfig,
    pub scenes: Vec<ManifestEntry>,
}

fn dir_is_nonempty(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_image(&dir.join("hr.f32"), &scene.hr)?;
    for (i, lr) in scene.lr_list.iter().enumerate() {
        save_image(&dir.join(format!("lr_{i}.f32")), &lr.image)?;
    }
    Ok(())
}

/// Write `n_scenes` scenes plus `manifest.json` into `out_dir`.
///
/// Refuses a non-empty `out_dir` unless `overwrite` is set, in which case the
/// directory is cleared first.
pub fn generate_dataset(config: &SceneConfig, n_scenes: usize, out_dir: &Path, overwrite: bool) -> Result<Manifest> {
    config.validate()?;
    if dir_is_nonempty(out_dir)? {
        if !overwrite {
            return Err(Error::io(
                out_dir,
                std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    "output directory is not empty (pass overwrite to replace it)",
                ),
            ));
        }
        fs::remove_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let scenes = generate_scenes(config, 0, n_scenes)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        write_scene(&out_dir.join(&scene.scene_id), scene)?;
        entries.push(ManifestEntry {
            scene_id: scene.scene_id.clone(),
            seed: scene.seed,
            dt_days: scene.lr_list.iter().map(|l| l.dt_days).collect(),
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        config: config.clone(),
        scenes: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&out_dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "manifest version {} (expected {MANIFEST_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

/// Load one scene directory given its manifest entry.
pub fn load_scene(scene_dir: &Path, entry: &ManifestEntry) -> Result<Scene> {
    let hr = load_image(&scene_dir.join("hr.f32"))?;
    let lr_list = entry
        .dt_days
        .iter()
        .enumerate()
        .map(|(i, &dt_days)| {
            load_image(&scene_dir.join(format!("lr_{i}.f32"))).map(|image| LrObservation { image, dt_days })
        })
        .collect::<Result<Vec<_>>>()?;
    for lr in &lr_list {
        hr.ensure_same_shape(&lr.image, "LR vs HR")?;
    }
    Ok(Scene {
        scene_id: entry.scene_id.clone(),
        seed: entry.seed,
        hr,
        lr_list,
    })
}

/// Load every scene of a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Scene>)> {
    let manifest = read_manifest(dir)?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|e| load_scene(&dir.join(&e.scene_id), e))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}

/// Resolve a path that is either a scene directory inside a dataset (its
/// parent holds `manifest.json`) and load that scene.
pub fn load_scene_dir(scene_dir: &Path) -> Result<Scene> {
    let parent: PathBuf = scene_dir
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = read_manifest(&parent)?;
    let name = scene_dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Input(format!("bad scene path {}", scene_dir.display())))?;
    let entry = manifest
        .scenes
        .iter()
        .find(|e| e.scene_id == name)
        .ok_or_else(|| Error::Input(format!("scene {name} not listed in {}", parent.display())))?;
    load_scene(scene_dir, entry)
}
