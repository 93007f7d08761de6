use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use hybrid_ir::camera::Camera;
use hybrid_ir::config::{PipelineConfig, Preset};
use hybrid_ir::dataset::synthetic::{generate_synthetic, SynthOptions, SyntheticScene};
use hybrid_ir::dataset::{load_dataset, save_dataset, FrameFormat};
use hybrid_ir::evaluate::{evaluate_views, novel_view_light, psnr};
use hybrid_ir::export::{export_scene, parse_obj, write_assets, OBJ_NAME};
use hybrid_ir::gradcheck::run_gradcheck;
use hybrid_ir::image::ImageBuf;
use hybrid_ir::lighting::calibrate_flash_color;
use hybrid_ir::optimizer::{fit, initial_model, save_log_csv, FitEvent};
use hybrid_ir::relight::{ratio_relight, render_sh_basis, solve_sh_weights, RgbImage, ShEnvironment};
use hybrid_ir::rendering::{render_image, RenderConfig, RenderMode};
use hybrid_ir::scene::Model;
use hybrid_ir::DVec3;

use crate::args::{
    CalibrateArgs, Cli, Command, ExportArgs, FitArgs, FormatArg, GradcheckArgs, ModeArg, PresetArg, RelightArgs,
    RenderArgs, SynthArgs,
};
use crate::InternalError;

/// Seed offset of the held-out capture written next to a synthetic one.
const HELD_OUT_SEED: u64 = 99;

struct Ctx {
    out: PathBuf,
    config: PipelineConfig,
    verbose: u8,
}

impl Ctx {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn log(&self, level: u8, msg: impl FnOnce() -> String) {
        if self.verbose >= level {
            eprintln!("{}", msg());
        }
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    version: &'static str,
    preset: PresetArg,
    config_file: Option<&'a Path>,
    seed: Option<u64>,
    workers: usize,
    command: &'a Command,
    config: &'a PipelineConfig,
}

fn preset(p: PresetArg) -> Preset {
    match p {
        PresetArg::Full => Preset::Full,
        PresetArg::Desk => Preset::Desk,
        PresetArg::Small => Preset::Small,
    }
}

fn set_opt<T: Copy>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

/// Flag values over the config file over the preset.
fn resolve(cli: &Cli, workers: usize) -> Result<PipelineConfig> {
    let base = PipelineConfig::preset(preset(cli.common.preset));
    let mut c = match &cli.common.config {
        Some(p) => PipelineConfig::load(&base, p)?,
        None => base,
    };
    if let Some(s) = cli.common.seed {
        c.synth.seed = s;
        c.train.seed = s;
        c.gradcheck.seed = s;
    }
    c.train.workers = workers;
    match &cli.command {
        Command::Synth(a) => {
            set_opt(&mut c.synth.views, a.views);
            set_opt(&mut c.synth.width, a.width);
            set_opt(&mut c.synth.height, a.height);
            set_opt(&mut c.synth.fov_degrees, a.fov);
        }
        Command::Fit(a) => {
            let t = &mut c.train;
            set_opt(&mut t.total_iters, a.total_iters);
            set_opt(&mut t.stage1_iters, a.stage1_iters);
            set_opt(&mut t.lr0, a.lr0);
            set_opt(&mut t.lr_decay_factor, a.lr_decay_factor);
            set_opt(&mut t.lr_decay_every, a.lr_decay_every);
            set_opt(&mut t.rays_per_batch, a.rays_per_batch);
            set_opt(&mut t.adam_beta1, a.adam_beta1);
            set_opt(&mut t.adam_beta2, a.adam_beta2);
            set_opt(&mut t.adam_eps, a.adam_eps);
            set_opt(&mut t.samples_per_ray, a.samples_per_ray);
        }
        Command::Export(a) => {
            set_opt(&mut c.export.resolution, a.resolution);
            set_opt(&mut c.export.texture_size, a.texture_size);
            set_opt(&mut c.export.iso, a.iso);
        }
        Command::Relight(a) => set_opt(&mut c.relight.floor, a.floor),
        Command::Gradcheck(a) => {
            set_opt(&mut c.gradcheck.scenes, a.scenes);
            set_opt(&mut c.gradcheck.rays, a.rays);
            set_opt(&mut c.gradcheck.resolution, a.resolution);
            set_opt(&mut c.gradcheck.tolerance, a.tolerance);
        }
        Command::Render(_) | Command::CalibrateFlash(_) => {}
    }
    c.validate()?;
    Ok(c)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| InternalError(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n").with_context(|| format!("write {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parse {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("create {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let workers = match cli.common.workers {
        Some(0) => bail!("--workers must be positive"),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| InternalError(format!("thread pool: {e}")))?;
    let config = resolve(&cli, workers)?;
    let ctx = Ctx {
        out: cli.common.out.clone(),
        config,
        verbose: cli.common.verbose,
    };
    create_dir(&ctx.out)?;
    write_json(
        &ctx.path("run.json"),
        &RunRecord {
            version: env!("CARGO_PKG_VERSION"),
            preset: cli.common.preset,
            config_file: cli.common.config.as_deref(),
            seed: cli.common.seed,
            workers,
            command: &cli.command,
            config: &ctx.config,
        },
    )?;
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Fit(a) => fit_cmd(&ctx, a),
        Command::Render(a) => render(&ctx, a),
        Command::Export(a) => export(&ctx, a),
        Command::Relight(a) => relight(&ctx, a),
        Command::Gradcheck(a) => gradcheck(&ctx, a),
        Command::CalibrateFlash(a) => calibrate(&ctx, a),
    }
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let format = match a.format {
        FormatArg::Raw => FrameFormat::Raw,
        FormatArg::Png => FrameFormat::Png,
    };
    if a.held_out > 0 && a.held_out < 4 {
        bail!("--held-out needs at least 4 views, got {}", a.held_out);
    }
    let head = SyntheticScene::head();
    let opts = ctx.config.synth;
    let ds = generate_synthetic(&head, &opts)?;
    save_dataset(&ds, &ctx.out, format)?;
    println!("wrote {} views to {}", ds.frames.len(), ctx.out.display());
    if a.held_out > 0 {
        let held = SynthOptions {
            views: a.held_out,
            phase: 0.5,
            seed: opts.seed + HELD_OUT_SEED,
            ..opts
        };
        let ds = generate_synthetic(&head, &held)?;
        let dir = ctx.path("held_out");
        save_dataset(&ds, &dir, format)?;
        println!("wrote {} held-out views to {}", ds.frames.len(), dir.display());
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct FlashCalibration {
    flash_color: [f64; 3],
    flash_scale: f64,
}

#[derive(Serialize)]
struct FitSummary {
    iterations: usize,
    stage_switch: Option<usize>,
    final_loss: f64,
    train_psnr: f64,
    held_out_psnr: Option<f64>,
    held_out_l1: Option<f64>,
}

fn fit_cmd(ctx: &Ctx, a: &FitArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let mut model = initial_model(&ds, &ctx.config.init)?;
    if let Some(p) = &a.flash {
        let cal: FlashCalibration = read_json(p)?;
        model.light.flash_color = DVec3::from_array(cal.flash_color);
        model.light.flash_scale = cal.flash_scale;
    }
    let snapshots = ctx.path("snapshots");
    let every = a.snapshot_every;
    let mut observer = |e: FitEvent<'_>| -> hybrid_ir::Result<()> {
        match e {
            FitEvent::Step { row, model } => {
                ctx.log(1, || format!("{:>6} stage {} loss {:.5} l1 {:.5}", row.iter, row.stage, row.total, row.l1));
                if every > 0 && (row.iter + 1) % every == 0 {
                    model.save(&snapshots.join(format!("{:06}", row.iter + 1)))?;
                }
            }
            FitEvent::StageSwitch { iter, .. } => ctx.log(1, || format!("surface stage from step {iter}")),
        }
        Ok(())
    };
    let r = fit(&ds, model, &ctx.config.train, &mut observer)?;
    r.model.save(&ctx.path("model"))?;
    save_log_csv(&r.log, &ctx.path("log.csv"))?;

    let eps = ctx.config.train.surface_eps;
    let train = evaluate_trained(&r.model, &ds.frames, eps)?;
    let held = a.held_out.as_ref().map(|p| -> Result<_> { Ok(evaluate_views(&r.model, &load_dataset(p)?.frames, eps)?) }).transpose()?;
    let summary = FitSummary {
        iterations: r.log.len(),
        stage_switch: r.stage_switch,
        final_loss: r.log.last().map_or(f64::NAN, |l| l.total),
        train_psnr: train,
        held_out_psnr: held.as_ref().map(|h| h.psnr),
        held_out_l1: held.as_ref().map(|h| h.l1),
    };
    write_json(&ctx.path("metrics.json"), &summary)?;
    println!("fit {} steps, training PSNR {:.2} dB", summary.iterations, summary.train_psnr);
    if let Some(p) = summary.held_out_psnr {
        println!("held-out PSNR {p:.2} dB");
    }
    Ok(())
}

/// Pooled PSNR over training views, each with its own occlusion mask.
fn evaluate_trained(model: &Model, frames: &[hybrid_ir::dataset::Frame], eps: f64) -> Result<f64> {
    let mut se = 0.0;
    let mut n = 0usize;
    for (i, f) in frames.iter().enumerate() {
        let (light, view) = light_for_view(model, i, frames.len());
        let img = render_image(&f.camera, &model.scene, &light, &RenderConfig::default(), RenderMode::Surface { eps }, view)?.rgb();
        se += 10f64.powf(-psnr(&img, &f.image) / 10.0) * img.data.len() as f64;
        n += img.data.len();
    }
    Ok(-10.0 * (se / n as f64).log10())
}

/// Trained views keep their own occlusion mask when the model has one per
/// frame; anything else is shaded as a novel view.
fn light_for_view(model: &Model, i: usize, frames: usize) -> (hybrid_ir::lighting::CombinedLight, Option<usize>) {
    if model.light.occlusion_enabled() && model.light.occlusion.len() == frames {
        (model.light.clone(), Some(i))
    } else {
        novel_view_light(&model.light)
    }
}

fn read_camera(path: &Path) -> Result<Camera> {
    let c: Camera = read_json(path)?;
    Ok(Camera::new(c.intrinsics, c.world_from_camera)?)
}

#[derive(Serialize)]
struct RenderMetrics {
    psnr: Vec<(String, f64)>,
}

fn render(ctx: &Ctx, a: &RenderArgs) -> Result<()> {
    let model = Model::load(&a.scene)?;
    let mode = match a.mode {
        ModeArg::Volume => RenderMode::Volume,
        ModeArg::Surface => RenderMode::Surface {
            eps: ctx.config.train.surface_eps,
        },
    };
    let rcfg = RenderConfig {
        samples_per_ray: ctx.config.train.samples_per_ray,
        seed: ctx.config.train.seed,
        ..RenderConfig::default()
    };
    let dir = ctx.path("renders");
    create_dir(&dir)?;
    let write = |id: &str, img: &ImageBuf| -> Result<()> {
        img.write_raw(&dir.join(format!("{id}.raw")))?;
        img.write_png8(&dir.join(format!("{id}.png")), true)?;
        Ok(())
    };
    match (&a.data, &a.camera) {
        (Some(d), _) => {
            let ds = load_dataset(d)?;
            let mut metrics = RenderMetrics { psnr: Vec::new() };
            for (i, f) in ds.frames.iter().enumerate() {
                let (light, view) = light_for_view(&model, i, ds.frames.len());
                let img = render_image(&f.camera, &model.scene, &light, &rcfg, mode, view)?.rgb();
                write(&f.id, &img)?;
                metrics.psnr.push((f.id.clone(), psnr(&img, &f.image)));
            }
            write_json(&ctx.path("metrics.json"), &metrics)?;
            println!("rendered {} frames to {}", ds.frames.len(), dir.display());
        }
        (None, Some(c)) => {
            let cam = read_camera(c)?;
            let (light, view) = novel_view_light(&model.light);
            let img = render_image(&cam, &model.scene, &light, &rcfg, mode, view)?.rgb();
            write("render", &img)?;
            println!("rendered {}", dir.join("render.png").display());
        }
        (None, None) => bail!("render needs --data or --camera"),
    }
    Ok(())
}

fn export(ctx: &Ctx, a: &ExportArgs) -> Result<()> {
    let model = Model::load(&a.scene)?;
    let ds = load_dataset(&a.data)?;
    let cams: Vec<Camera> = ds.frames.iter().map(|f| f.camera).collect();
    let (assets, stats) = export_scene(&model.scene, &cams, &ctx.config.export)?;
    write_assets(&assets, &ctx.out)?;
    // Re-read what was written so a broken file fails here, not downstream.
    let obj = parse_obj(&ctx.path(OBJ_NAME))?;
    if obj.triangles().len() != stats.final_triangles {
        return Err(InternalError(format!("wrote {} triangles, read back {}", stats.final_triangles, obj.triangles().len())).into());
    }
    write_json(&ctx.path("export_stats.json"), &stats)?;
    println!("{} triangles, {} vertices in {}", stats.final_triangles, stats.final_vertices, ctx.path(OBJ_NAME).display());
    Ok(())
}

fn read_frame(path: &Path) -> Result<ImageBuf> {
    let img = match path.extension().and_then(|e| e.to_str()) {
        Some("raw") => ImageBuf::read_raw(path)?,
        Some("png") => ImageBuf::read_png_linear(path)?,
        _ => bail!("{}: expected .raw or .png", path.display()),
    };
    Ok(img)
}

#[derive(Serialize)]
struct FrameRelight {
    frame: String,
    source_env: ShEnvironment,
    residual: [f64; 3],
    rank_deficient: bool,
}

fn relight(ctx: &Ctx, a: &RelightArgs) -> Result<()> {
    let model = Model::load(&a.scene)?;
    let camera = read_camera(&a.camera)?;
    let target = ShEnvironment::load(&a.target_env)?;
    let mut frames: Vec<PathBuf> = fs::read_dir(&a.performance)
        .with_context(|| format!("read {}", a.performance.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    frames.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("raw" | "png")));
    frames.sort();
    if frames.is_empty() {
        bail!("no .raw or .png frames in {}", a.performance.display());
    }

    let eps = ctx.config.relight.surface_eps;
    let basis = render_sh_basis(&model.scene, &camera, &model.light, eps);
    let tgt = basis.combine(&target).to_buf();
    let dir = ctx.path("relit");
    create_dir(&dir)?;
    let mut report = Vec::new();
    for p in &frames {
        let frame = read_frame(p)?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("frame").to_string();
        let solve = solve_sh_weights(&basis, &RgbImage::from_buf(&frame)?, None)?;
        if solve.rank_deficient {
            ctx.log(0, || format!("warning: {stem}: rank-deficient SH fit, using the minimum-norm solution"));
        }
        let src = basis.combine(&solve.env).to_buf();
        let out = ratio_relight(&src, &tgt, &frame, ctx.config.relight.floor)?;
        out.write_raw(&dir.join(format!("{stem}.raw")))?;
        out.write_png8(&dir.join(format!("{stem}.png")), true)?;
        ctx.log(1, || format!("{stem}: residual {:?}", solve.residual));
        report.push(FrameRelight {
            frame: stem,
            source_env: solve.env,
            residual: solve.residual,
            rank_deficient: solve.rank_deficient,
        });
    }
    write_json(&ctx.path("relight.json"), &report)?;
    println!("relit {} frames into {}", report.len(), dir.display());
    Ok(())
}

fn gradcheck(ctx: &Ctx, _a: &GradcheckArgs) -> Result<()> {
    let cfg = &ctx.config.gradcheck;
    let r = run_gradcheck(cfg)?;
    write_json(&ctx.path("gradcheck.json"), &r)?;
    for (g, e) in &r.per_group {
        ctx.log(1, || format!("{g:>14} {e:.3e}"));
    }
    println!(
        "max relative error {:.3e} over {} coordinates on {} scenes ({} kinks skipped)",
        r.max_rel_error, r.checked, r.scenes, r.kinks
    );
    if !r.passed(cfg.tolerance) {
        return Err(InternalError(format!("gradient check failed: {:.3e} >= {:.1e}", r.max_rel_error, cfg.tolerance)).into());
    }
    Ok(())
}

fn calibrate(ctx: &Ctx, a: &CalibrateArgs) -> Result<()> {
    let img = read_frame(&a.image)?;
    let c = calibrate_flash_color(&img, a.patch)?;
    let cal = FlashCalibration {
        flash_color: c.to_array(),
        flash_scale: a.scale,
    };
    write_json(&ctx.path("flash.json"), &cal)?;
    println!("flash color {:.4} {:.4} {:.4}", c.x, c.y, c.z);
    Ok(())
}
