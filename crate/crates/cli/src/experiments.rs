//! Reconstruction methods run over a test set, and the ablation tables built
//! from them.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use satfuse::denoiser::Denoiser;
use satfuse::diffusion::NoiseSchedule;
use satfuse::fusion::{satdiffmoe, FusionConfig};
use satfuse::metrics::{self, mean_std, MeanStd};
use satfuse::rng::derive_key;
use satfuse::synthdata::Scene;
use satfuse::trainer::sample_conditional;
use satfuse::{par, Error, Image, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub psnr: f64,
    pub ssim: f64,
    pub proxy: f64,
}

/// PSNR (capped), SSIM and perceptual proxy of `pred` against `hr`.
pub fn score(pred: &Image, hr: &Image) -> Result<Scores> {
    Ok(Scores {
        psnr: metrics::psnr_capped(pred, hr)?,
        ssim: metrics::ssim(pred, hr)?,
        proxy: metrics::perceptual_proxy(pred, hr)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub scene_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub proxy: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub proxy: MeanStd,
    pub wall_time_s: MeanStd,
}

pub fn aggregate(rows: &[SceneScore]) -> Aggregate {
    let col = |f: fn(&SceneScore) -> f64| mean_std(&rows.iter().map(f).collect::<Vec<_>>());
    Aggregate {
        psnr: col(|r| r.psnr),
        ssim: col(|r| r.ssim),
        proxy: col(|r| r.proxy),
        wall_time_s: col(|r| r.wall_time_s),
    }
}

/// Sampling seed for one scene: the same for every method and every `N`, so
/// rows of a sweep differ only in the method.
pub fn scene_seed(base: u64, scene: &Scene) -> u64 {
    derive_key(base, &[scene.seed])
}

/// A reconstruction method.
#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    /// One conditional chain on revisit 0.
    Single { model: &'a Denoiser<f32> },
    /// Fusion over the first `n` revisits.
    Fusion {
        model: &'a Denoiser<f32>,
        n: usize,
        config: FusionConfig,
    },
}

pub struct Runner<'a> {
    pub sched: &'a NoiseSchedule,
    pub fusion: FusionConfig,
    pub seed: u64,
}

impl Runner<'_> {
    pub fn reconstruct(&self, method: Method<'_>, scene: &Scene) -> Result<Image> {
        let seed = scene_seed(self.seed, scene);
        match method {
            Method::Single { model } => {
                let lr = scene
                    .lr_list
                    .first()
                    .ok_or_else(|| Error::Input(format!("scene {} has no revisits", scene.scene_id)))?;
                sample_conditional(
                    &lr.image,
                    lr.dt_days,
                    model,
                    self.sched,
                    self.fusion.steps,
                    self.fusion.eta,
                    seed,
                )
            }
            Method::Fusion { model, n, config } => {
                if n == 0 || n > scene.lr_list.len() {
                    return Err(Error::config(
                        "n_lr",
                        format!(
                            "{n} revisits requested, scene {} has {}",
                            scene.scene_id,
                            scene.lr_list.len()
                        ),
                    ));
                }
                Ok(satdiffmoe(&scene.lr_list[..n], model, self.sched, &config, seed)?.image)
            }
        }
    }

    /// Score `method` on every scene. With `parallel_scenes` scenes are spread
    /// over the thread pool; otherwise they run one after another so that the
    /// recorded wall times reflect a single run with the whole pool.
    pub fn evaluate(&self, method: Method<'_>, scenes: &[Scene], parallel_scenes: bool) -> Result<Vec<SceneScore>> {
        let one = |scene: &Scene| -> Result<SceneScore> {
            let started = Instant::now();
            let pred = self.reconstruct(method, scene)?;
            let wall = started.elapsed().as_secs_f64();
            let s = score(&pred, &scene.hr)?;
            Ok(SceneScore {
                scene_id: scene.scene_id.clone(),
                psnr: s.psnr,
                ssim: s.ssim,
                proxy: s.proxy,
                wall_time_s: wall,
            })
        };
        if parallel_scenes {
            par::map_slice(scenes, one).into_iter().collect()
        } else {
            scenes.iter().map(one).collect()
        }
    }
}

/// Baseline: the first revisit as given (already upsampled).
pub fn evaluate_lr_baseline(scenes: &[Scene]) -> Result<Vec<SceneScore>> {
    scenes
        .iter()
        .map(|scene| {
            let lr = scene
                .lr_list
                .first()
                .ok_or_else(|| Error::Input(format!("scene {} has no revisits", scene.scene_id)))?;
            let s = score(&lr.image, &scene.hr)?;
            Ok(SceneScore {
                scene_id: scene.scene_id.clone(),
                psnr: s.psnr,
                ssim: s.ssim,
                proxy: s.proxy,
                wall_time_s: 0.0,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(flatten)]
    pub aggregate: Aggregate,
    pub scenes: Vec<SceneScore>,
}

impl AblationRow {
    pub fn new(label: impl Into<String>, scenes: Vec<SceneScore>) -> Self {
        AblationRow {
            label: label.into(),
            n: None,
            alpha: None,
            lambda: None,
            aggregate: aggregate(&scenes),
            scenes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: String,
    pub n_scenes: usize,
    pub seed: u64,
    pub fusion: FusionConfig,
    pub rows: Vec<AblationRow>,
}

/// Fusion over `N in n_values` revisits.
pub fn n_sweep(
    runner: &Runner<'_>,
    model: &Denoiser<f32>,
    scenes: &[Scene],
    n_values: &[usize],
) -> Result<Vec<AblationRow>> {
    n_values
        .iter()
        .map(|&n| {
            // a fixed batch larger than a small N is clamped to N
            let config = FusionConfig {
                batch_b: runner.fusion.batch_b.map(|b| b.min(n)),
                ..runner.fusion
            };
            let method = Method::Fusion { model, n, config };
            let mut row = AblationRow::new(format!("N={n}"), runner.evaluate(method, scenes, false)?);
            row.n = Some(n);
            Ok(row)
        })
        .collect()
}

/// `no-dt no-fusion`, `dt no-fusion`, `dt+fusion` over `n` revisits.
pub fn module_ablation(
    runner: &Runner<'_>,
    model: &Denoiser<f32>,
    model_no_dt: &Denoiser<f32>,
    scenes: &[Scene],
    n: usize,
) -> Result<Vec<AblationRow>> {
    let no_dt = runner.evaluate(Method::Single { model: model_no_dt }, scenes, true)?;
    let dt = runner.evaluate(Method::Single { model }, scenes, true)?;
    let full = runner.evaluate(
        Method::Fusion {
            model,
            n,
            config: runner.fusion,
        },
        scenes,
        false,
    )?;
    let mut rows = vec![
        AblationRow::new("no-dt no-fusion", no_dt),
        AblationRow::new("dt no-fusion", dt),
        AblationRow::new("dt+fusion", full),
    ];
    rows[2].n = Some(n);
    Ok(rows)
}

/// Grid over `alpha x lambda` with `n` revisits.
pub fn hyper_sweep(
    runner: &Runner<'_>,
    model: &Denoiser<f32>,
    scenes: &[Scene],
    n: usize,
    alphas: &[f64],
    lambdas: &[f64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(alphas.len() * lambdas.len());
    for &alpha in alphas {
        for &lambda in lambdas {
            let config = FusionConfig {
                alpha,
                lambda,
                ..runner.fusion
            };
            config.validate()?;
            let scores = runner.evaluate(Method::Fusion { model, n, config }, scenes, false)?;
            let mut row = AblationRow::new(format!("alpha={alpha} lambda={lambda}"), scores);
            row.n = Some(n);
            row.alpha = Some(alpha);
            row.lambda = Some(lambda);
            rows.push(row);
        }
    }
    Ok(rows)
}
