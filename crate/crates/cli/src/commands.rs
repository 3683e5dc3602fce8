//! Subcommand implementations. Each resolves its configuration (file, then
//! flags), does the work, and writes its outputs plus the resolved config.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use satfuse::format::{load_image, ppm_bytes, save_image, write_atomic};
use satfuse::fusion::{satdiffmoe, FusionReport};
use satfuse::synthdata::{generate_dataset, load_dataset, load_scene_dir, Scene};
use satfuse::trainer::{load_checkpoint, sample_conditional, save_checkpoint, train, Checkpoint};
use satfuse::{Error, Result};

use crate::config::{echo_config, write_json, AblateKind, RunConfig};
use crate::experiments::{self, aggregate, score, AblationTable, Aggregate, Runner, SceneScore, Scores};
use crate::{AblateArgs, Command, EvalArgs, FuseArgs, GenDataArgs, SampleArgs, TrainArgs};

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample(a),
        Command::Fuse(a) => fuse(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn write_preview(path: &Path, img: &satfuse::Image) -> Result<()> {
    write_atomic(path, &ppm_bytes(img))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    load_checkpoint(path)
}

fn check_scene_shape(ckpt: &Checkpoint, scene: &Scene) -> Result<()> {
    let (h, w, _) = scene.hr.shape();
    let s = ckpt.scene.hr_size;
    if (h, w) != (s, s) {
        return Err(Error::Shape(format!(
            "checkpoint was trained on {s}x{s} scenes, scene {} is {h}x{w}",
            scene.scene_id
        )));
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut c = RunConfig::load_or_default(a.config.as_deref())?;
    set(&mut c.scene.seed, a.seed);
    set(&mut c.scene.n_lr, a.n_lr);
    set(&mut c.gen_data.n_scenes, a.n_scenes);
    c.gen_data.overwrite |= a.overwrite;
    set_path(&mut c.paths.out, a.out);
    let out = RunConfig::require(&c.paths.out, "out")?.to_path_buf();
    let manifest = generate_dataset(&c.scene, c.gen_data.n_scenes, &out, c.gen_data.overwrite)?;
    echo_config(&out, "gen-data", &c)?;
    println!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct LossLog<'a> {
    iterations: usize,
    loss: &'a [f64],
    smoothed: Vec<f64>,
    wall_time_s: f64,
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut c = RunConfig::load_or_default(a.config.as_deref())?;
    set_path(&mut c.paths.data, a.data);
    set_path(&mut c.paths.out, a.out);
    set(&mut c.train.iterations, a.iterations);
    set(&mut c.train.seed, a.seed);
    set(&mut c.train.learning_rate, a.learning_rate);
    set(&mut c.train.batch_size, a.batch_size);
    set(&mut c.train.checkpoint_every, a.checkpoint_every);
    set(&mut c.train.ema_decay, a.ema_decay);
    if a.no_dt {
        c.train.model.use_dt = false;
    }
    c.train.validate()?;
    let data = RunConfig::require(&c.paths.data, "data")?.to_path_buf();
    let out = RunConfig::require(&c.paths.out, "out")?.to_path_buf();
    let (manifest, scenes) = load_dataset(&data)?;
    if scenes.is_empty() {
        return Err(Error::Input(format!("dataset {} has no scenes", data.display())));
    }
    c.scene = manifest.config.clone();
    echo_config(&out, "train", &c)?;
    let started = Instant::now();
    let ckpt = train(&scenes, &manifest.config, &c.train, |p| {
        if let Some(snap) = p.snapshot {
            save_checkpoint(snap, &out.join(format!("ckpt_{:06}.ckpt", p.iteration)))?;
            println!(
                "iteration {} loss {:.5} smoothed {:.5}",
                p.iteration, p.loss, p.smoothed
            );
        }
        Ok(())
    })?;
    save_checkpoint(&ckpt, &out.join("model.ckpt"))?;
    let window = c.train.loss_window;
    let smoothed = (1..=ckpt.loss_history.len())
        .map(|i| satfuse::trainer::smoothed_loss(&ckpt.loss_history, i, window))
        .collect();
    write_json(
        &out.join("loss.json"),
        &LossLog {
            iterations: ckpt.iteration,
            loss: &ckpt.loss_history,
            smoothed,
            wall_time_s: started.elapsed().as_secs_f64(),
        },
    )?;
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

#[derive(Serialize)]
struct SampleReport {
    scene_id: String,
    lr_index: usize,
    dt_days: f64,
    seed: u64,
    steps: usize,
    eta: f64,
    scores: Scores,
    wall_time_s: f64,
}

fn sample(a: SampleArgs) -> Result<()> {
    let mut c = RunConfig::load_or_default(a.config.as_deref())?;
    set_path(&mut c.paths.ckpt, a.ckpt);
    set_path(&mut c.paths.scene, a.scene);
    set_path(&mut c.paths.out, a.out);
    set(&mut c.sample.lr_index, a.lr_index);
    set(&mut c.sample.seed, a.seed);
    set(&mut c.fusion.steps, a.steps);
    set(&mut c.fusion.eta, a.eta);
    c.fusion.validate()?;
    let out = RunConfig::require(&c.paths.out, "out")?.to_path_buf();
    let ckpt = load_ckpt(RunConfig::require(&c.paths.ckpt, "ckpt")?)?;
    let scene = load_scene_dir(RunConfig::require(&c.paths.scene, "scene")?)?;
    check_scene_shape(&ckpt, &scene)?;
    let lr = scene.lr_list.get(c.sample.lr_index).ok_or_else(|| {
        Error::config(
            "sample.lr_index",
            format!("scene {} has {} revisits", scene.scene_id, scene.lr_list.len()),
        )
    })?;
    let model = ckpt.denoiser()?;
    let sched = ckpt.noise_schedule()?;
    let started = Instant::now();
    let img = sample_conditional(
        &lr.image,
        lr.dt_days,
        &model,
        &sched,
        c.fusion.steps,
        c.fusion.eta,
        c.sample.seed,
    )?;
    let wall = started.elapsed().as_secs_f64();
    echo_config(&out, "sample", &c)?;
    save_image(&out.join("sample.f32"), &img)?;
    write_preview(&out.join("sample.ppm"), &img)?;
    write_json(
        &out.join("report.json"),
        &SampleReport {
            scene_id: scene.scene_id.clone(),
            lr_index: c.sample.lr_index,
            dt_days: lr.dt_days,
            seed: c.sample.seed,
            steps: c.fusion.steps,
            eta: c.fusion.eta,
            scores: score(&img, &scene.hr)?,
            wall_time_s: wall,
        },
    )
}

#[derive(Serialize)]
struct FuseReport {
    scene_id: String,
    n_lr: usize,
    dt_days: Vec<f64>,
    seed: u64,
    scores: Scores,
    feature_moment_distance: f64,
    fusion: FusionReport,
}

fn fuse(a: FuseArgs) -> Result<()> {
    let mut c = RunConfig::load_or_default(a.config.as_deref())?;
    set_path(&mut c.paths.ckpt, a.ckpt);
    set_path(&mut c.paths.scene, a.scene);
    set_path(&mut c.paths.out, a.out);
    if a.n_lr.is_some() {
        c.fuse.n_lr = a.n_lr;
    }
    set(&mut c.fuse.seed, a.seed);
    set(&mut c.fusion.lambda, a.lambda);
    set(&mut c.fusion.alpha, a.alpha);
    set(&mut c.fusion.k, a.k);
    if a.batch_b.is_some() {
        c.fusion.batch_b = a.batch_b;
    }
    set(&mut c.fusion.steps, a.steps);
    set(&mut c.fusion.eta, a.eta);
    c.fusion.validate()?;
    let out = RunConfig::require(&c.paths.out, "out")?.to_path_buf();
    let ckpt = load_ckpt(RunConfig::require(&c.paths.ckpt, "ckpt")?)?;
    let scene = load_scene_dir(RunConfig::require(&c.paths.scene, "scene")?)?;
    check_scene_shape(&ckpt, &scene)?;
    let n = c.fuse.n_lr.unwrap_or(scene.lr_list.len());
    if n == 0 || n > scene.lr_list.len() {
        return Err(Error::config(
            "fuse.n_lr",
            format!(
                "{n} requested, scene {} has {} revisits",
                scene.scene_id,
                scene.lr_list.len()
            ),
        ));
    }
    c.fusion.batch_for(n)?;
    let model = ckpt.denoiser()?;
    let sched = ckpt.noise_schedule()?;
    let revisits = &scene.lr_list[..n];
    let run = satdiffmoe(revisits, &model, &sched, &c.fusion, c.fuse.seed)?;
    echo_config(&out, "fuse", &c)?;
    save_image(&out.join("fused.f32"), &run.image)?;
    write_preview(&out.join("fused.ppm"), &run.image)?;
    write_json(
        &out.join("report.json"),
        &FuseReport {
            scene_id: scene.scene_id.clone(),
            n_lr: n,
            dt_days: revisits.iter().map(|r| r.dt_days).collect(),
            seed: c.fuse.seed,
            scores: score(&run.image, &scene.hr)?,
            feature_moment_distance: satfuse::metrics::feature_moment_distance(
                std::slice::from_ref(&run.image),
                std::slice::from_ref(&scene.hr),
            )?,
            fusion: run.report,
        },
    )
}

#[derive(Serialize)]
struct EvalReport {
    n_scenes: usize,
    rows: Vec<EvalRow>,
    aggregate: EvalAggregate,
}

#[derive(Serialize)]
struct EvalRow {
    scene_id: String,
    psnr: f64,
    ssim: f64,
    proxy: f64,
}

#[derive(Serialize)]
struct EvalAggregate {
    psnr: satfuse::metrics::MeanStd,
    ssim: satfuse::metrics::MeanStd,
    proxy: satfuse::metrics::MeanStd,
}

/// Prediction for `scene_id` inside `pred_dir`: `<id>/fused.f32`,
/// `<id>/sample.f32` or `<id>.f32`, in that order.
pub fn find_prediction(pred_dir: &Path, scene_id: &str) -> Result<PathBuf> {
    let candidates = [
        pred_dir.join(scene_id).join("fused.f32"),
        pred_dir.join(scene_id).join("sample.f32"),
        pred_dir.join(format!("{scene_id}.f32")),
    ];
    candidates.iter().find(|p| p.is_file()).cloned().ok_or_else(|| {
        Error::io(
            &candidates[0],
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("no prediction for {scene_id}")),
        )
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut c = RunConfig::load_or_default(a.config.as_deref())?;
    set_path(&mut c.paths.pred_dir, a.pred_dir);
    set_path(&mut c.paths.data, a.data);
    set_path(&mut c.paths.out, a.out);
    let pred_dir = RunConfig::require(&c.paths.pred_dir, "pred_dir")?.to_path_buf();
    let data = RunConfig::require(&c.paths.data, "data")?.to_path_buf();
    let out = RunConfig::require(&c.paths.out, "out")?.to_path_buf();
    let (_, scenes) = load_dataset(&data)?;
    let rows = scenes
        .iter()
        .map(|scene| {
            let pred = load_image(&find_prediction(&pred_dir, &scene.scene_id)?)?;
            let s = score(&pred, &scene.hr)?;
            Ok(SceneScore {
                scene_id: scene.scene_id.clone(),
                psnr: s.psnr,
                ssim: s.ssim,
                proxy: s.proxy,
                wall_time_s: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let agg: Aggregate = aggregate(&rows);
    echo_config(&out, "eval", &c)?;
    write_json(
        &out.join("eval.json"),
        &EvalReport {
            n_scenes: rows.len(),
            aggregate: EvalAggregate {
                psnr: agg.psnr,
                ssim: agg.ssim,
                proxy: agg.proxy,
            },
            rows: rows
                .into_iter()
                .map(|r| EvalRow {
                    scene_id: r.scene_id,
                    psnr: r.psnr,
                    ssim: r.ssim,
                    proxy: r.proxy,
                })
                .collect(),
        },
    )
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut c = RunConfig::load_or_default(a.config.as_deref())?;
    set(&mut c.ablate.kind, a.kind);
    set_path(&mut c.paths.ckpt, a.ckpt);
    set_path(&mut c.paths.ckpt_no_dt, a.ckpt_no_dt);
    set_path(&mut c.paths.data, a.data);
    set_path(&mut c.paths.out, a.out);
    if a.n_scenes.is_some() {
        c.ablate.n_scenes = a.n_scenes;
    }
    if a.n_lr.is_some() {
        c.fuse.n_lr = a.n_lr;
    }
    if a.batch_b.is_some() {
        c.fusion.batch_b = a.batch_b;
    }
    set(&mut c.fusion.steps, a.steps);
    set(&mut c.ablate.seed, a.seed);
    c.fusion.validate()?;
    let out = RunConfig::require(&c.paths.out, "out")?.to_path_buf();
    let ckpt = load_ckpt(RunConfig::require(&c.paths.ckpt, "ckpt")?)?;
    let ckpt_no_dt = match c.ablate.kind {
        AblateKind::Module => Some(load_ckpt(RunConfig::require(&c.paths.ckpt_no_dt, "ckpt_no_dt")?)?),
        _ => None,
    };
    let data = RunConfig::require(&c.paths.data, "data")?.to_path_buf();
    let (_, mut scenes) = load_dataset(&data)?;
    if let Some(n) = c.ablate.n_scenes {
        scenes.truncate(n);
    }
    if scenes.is_empty() {
        return Err(Error::Input(format!("dataset {} has no scenes", data.display())));
    }
    for s in &scenes {
        check_scene_shape(&ckpt, s)?;
    }
    let min_revisits = scenes.iter().map(|s| s.lr_list.len()).min().unwrap_or(0);
    let n = c.fuse.n_lr.unwrap_or(min_revisits);
    let model = ckpt.denoiser()?;
    let sched = ckpt.noise_schedule()?;
    let runner = Runner {
        sched: &sched,
        fusion: c.fusion,
        seed: c.ablate.seed,
    };
    let rows = match c.ablate.kind {
        AblateKind::NSweep => experiments::n_sweep(&runner, &model, &scenes, &c.ablate.n_values)?,
        AblateKind::Module => {
            let no_dt = ckpt_no_dt.as_ref().expect("loaded above").denoiser()?;
            experiments::module_ablation(&runner, &model, &no_dt, &scenes, n)?
        }
        AblateKind::Hyper => {
            experiments::hyper_sweep(&runner, &model, &scenes, n, &c.ablate.alphas, &c.ablate.lambdas)?
        }
    };
    let table = AblationTable {
        kind: c.ablate.kind.name().into(),
        n_scenes: scenes.len(),
        seed: c.ablate.seed,
        fusion: c.fusion,
        rows,
    };
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    echo_config(&out, "ablate", &c)?;
    write_json(&out.join(format!("{}.json", table.kind)), &table)?;
    for r in &table.rows {
        println!(
            "{:<22} psnr {:>7.3}  ssim {:>6.4}  proxy {:>7.5}  time {:>7.3}s",
            r.label, r.aggregate.psnr.mean, r.aggregate.ssim.mean, r.aggregate.proxy.mean, r.aggregate.wall_time_s.mean
        );
    }
    Ok(())
}
