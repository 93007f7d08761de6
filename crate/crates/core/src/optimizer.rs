//! Adam, the step-decay schedule and the two-stage fitting driver.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::brdf::{EyePrior, Material};
use crate::dataset::{CaptureDataset, RayPool};
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::lighting::CombinedLight;
use crate::losses::{LossTerms, LossWeights, Stage};
use crate::math::DVec3;
use crate::objective::{surface_objective, volume_objective, Evaluation, ObjectiveConfig, Workspace};
use crate::rendering::{surface_trace, RenderConfig, SurfaceHit};
use crate::scene::{HybridScene, Model, ModelGrad, ParamGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub stage1_iters: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub rays_per_batch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub workers: usize,
    pub samples_per_ray: usize,
    pub smooth_eps: f64,
    pub surface_eps: f64,
    /// Pixels added around each frame's foreground box when sampling rays.
    pub bbox_margin: u32,
    pub stage1_weights: LossWeights,
    pub stage2_weights: LossWeights,
    /// Per-group multipliers on the scheduled learning rate.
    pub lr_scale: BTreeMap<ParamGroup, f64>,
    /// Groups never updated. The flash scale is calibrated, not fitted.
    pub frozen: Vec<ParamGroup>,
    /// Lower clamp on the density scale after each update.
    pub beta_min: f64,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 40_000,
            stage1_iters: 30_000,
            lr0: 1e-3,
            lr_decay_factor: 0.3,
            lr_decay_every: 15_000,
            rays_per_batch: 1024,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-15,
            seed: 0,
            workers: 1,
            samples_per_ray: 64,
            smooth_eps: 0.01,
            surface_eps: 1e-5,
            bbox_margin: 4,
            stage1_weights: LossWeights::stage_one(),
            stage2_weights: LossWeights::stage_two(),
            lr_scale: BTreeMap::new(),
            frozen: vec![ParamGroup::FlashScale],
            beta_min: crate::scene::BETA_FLOOR,
            divergence_factor: 10.0,
            divergence_patience: 100,
        }
    }
}

impl TrainConfig {
    /// Every count shrunk by `total / 40000`, rounded.
    pub fn scaled(total_iters: usize, stage1_iters: usize) -> Self {
        let d = Self::default();
        let f = total_iters as f64 / d.total_iters as f64;
        Self {
            total_iters,
            stage1_iters,
            lr_decay_every: ((d.lr_decay_every as f64 * f).round() as usize).max(1),
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage1_iters > self.total_iters {
            return bad(format!("stage1_iters {} exceeds total_iters {}", self.stage1_iters, self.total_iters));
        }
        if !(self.lr0 > 0.0) || !(self.lr_decay_factor > 0.0) || self.lr_decay_every == 0 {
            return bad("learning rate schedule must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps >= 0.0) {
            return bad("Adam moments must lie in [0,1) and eps must be nonnegative".into());
        }
        if self.rays_per_batch == 0 || self.workers == 0 {
            return bad("rays_per_batch and workers must be positive".into());
        }
        if self.stage1_weights.stage != Stage::One || self.stage2_weights.stage != Stage::Two {
            return bad("stage weight sets are tagged with the wrong stage".into());
        }
        self.stage1_weights.validate()?;
        self.stage2_weights.validate()?;
        self.render_config(Stage::One).validate()?;
        Ok(())
    }

    pub fn render_config(&self, _stage: Stage) -> RenderConfig {
        RenderConfig {
            samples_per_ray: self.samples_per_ray,
            seed: self.seed,
            ..RenderConfig::default()
        }
    }

    pub fn objective(&self, stage: Stage) -> ObjectiveConfig {
        ObjectiveConfig {
            render: self.render_config(stage),
            weights: match stage {
                Stage::One => self.stage1_weights,
                Stage::Two => self.stage2_weights,
            },
            smooth_eps: self.smooth_eps,
            workers: self.workers,
        }
    }

    pub fn stage_at(&self, iter: usize) -> Stage {
        if iter < self.stage1_iters {
            Stage::One
        } else {
            Stage::Two
        }
    }

    pub fn trains(&self, g: ParamGroup, stage: Stage) -> bool {
        !self.frozen.contains(&g) && !(stage == Stage::Two && g.is_geometry())
    }
}

/// `lr0 * factor^floor(iter / every)`.
pub fn learning_rate(cfg: &TrainConfig, iter: usize) -> f64 {
    cfg.lr0 * cfg.lr_decay_factor.powi((iter / cfg.lr_decay_every) as i32)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update. Returns `false` and leaves everything
/// untouched when any gradient entry is non-finite.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, p: &AdamParams) -> bool {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths");
    assert_eq!(params.len(), state.m.len(), "parameter and state lengths");
    if grads.iter().any(|g| !g.is_finite()) {
        diagnostics::skipped_update();
        return false;
    }
    state.t += 1;
    let c1 = 1.0 - p.beta1.powi(state.t as i32);
    let c2 = 1.0 - p.beta2.powi(state.t as i32);
    for ((x, &g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        *m = p.beta1 * *m + (1.0 - p.beta1) * g;
        *v = p.beta2 * *v + (1.0 - p.beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        let step = lr * mh / (vh.sqrt() + p.eps);
        if step != 0.0 {
            *x -= step;
        }
    }
    true
}

/// Adam over every parameter group of a [`Model`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub params: AdamParams,
    pub states: BTreeMap<ParamGroup, AdamState>,
}

impl Adam {
    pub fn new(model: &Model, params: AdamParams) -> Self {
        let states = ParamGroup::ALL.iter().map(|&g| (g, AdamState::new(model.group_len(g)))).collect();
        Self { params, states }
    }

    /// Updates group `g`; returns whether the step was applied.
    pub fn step_group(&mut self, model: &mut Model, grad: &ModelGrad, g: ParamGroup, lr: f64) -> bool {
        let state = self.states.get_mut(&g).expect("state for every group");
        let p = self.params;
        match grad.group_slice(g) {
            Some(gs) => model.with_group_mut(g, |v| adam_step(v, gs, state, lr, &p)),
            None => {
                let gs = grad.group(g);
                model.with_group_mut(g, |v| adam_step(v, &gs, state, lr, &p))
            }
        }
    }
}

/// Starting point of a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub resolutions: Vec<usize>,
    pub sphere_radius: f64,
    pub beta: f64,
    pub material: Material,
    pub ambient_level: f64,
    /// Per-view SH occlusion masks. Off unless a capture asks for them.
    pub occlusion: bool,
    pub eye_prior: EyePrior,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![16, 32, 64],
            sphere_radius: 0.6,
            beta: 0.05,
            material: Material {
                diffuse: DVec3::splat(0.5),
                specular: 0.1,
                roughness: 0.5,
            },
            ambient_level: 0.1,
            occlusion: false,
            eye_prior: EyePrior::default(),
        }
    }
}

/// Sphere-initialized model using the dataset's eyeballs and frame ids.
pub fn initial_model(ds: &CaptureDataset, init: &InitConfig) -> Result<Model> {
    let scene = HybridScene::new(&init.resolutions, init.sphere_radius, ds.eyes, init.eye_prior, &init.material, init.beta)?;
    let mut light = CombinedLight::default().with_uniform_ambient(init.ambient_level);
    if init.occlusion {
        light = light.with_occlusion(&ds.frame_ids());
    }
    Ok(Model {
        scene,
        light,
        log_k: 0.0,
    })
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub iter: usize,
    pub stage: u8,
    pub lr: f64,
    pub total: f64,
    pub l1: f64,
    pub mask: f64,
    pub eikonal: f64,
    pub smooth_hair: f64,
    pub smooth_other: f64,
    pub comp: f64,
    pub reflectance: f64,
    pub beta: f64,
    pub k: f64,
    pub skipped: u64,
}

impl LogRow {
    fn new(iter: usize, stage: Stage, lr: f64, e: &Evaluation, model: &Model, skipped: u64) -> Self {
        let LossTerms {
            l1,
            mask,
            eikonal,
            smooth_hair,
            smooth_other,
            comp,
            reflectance,
        } = e.terms;
        Self {
            iter,
            stage: match stage {
                Stage::One => 1,
                Stage::Two => 2,
            },
            lr,
            total: e.total,
            l1,
            mask,
            eikonal,
            smooth_hair,
            smooth_other,
            comp,
            reflectance,
            beta: model.scene.beta,
            k: model.k(),
            skipped,
        }
    }
}

pub fn write_log_csv(rows: &[LogRow], w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(|e| Error::Invariant(format!("csv: {e}")))?;
    }
    wr.flush().map_err(|e| Error::io("training log", e))?;
    Ok(())
}

pub fn save_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_log_csv(rows, std::io::BufWriter::new(f))
}

/// Progress notifications from [`fit`].
pub enum FitEvent<'a> {
    Step { row: &'a LogRow, model: &'a Model },
    /// Emitted once, right before the first stage-two update.
    StageSwitch { iter: usize, model: &'a Model },
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub model: Model,
    pub log: Vec<LogRow>,
    /// Iteration of the first stage-two update, if any ran.
    pub stage_switch: Option<usize>,
}

fn hits_for_pool(model: &Model, ds: &CaptureDataset, pool: &RayPool, eps: f64) -> Vec<Option<SurfaceHit>> {
    use rayon::prelude::*;
    (0..pool.len())
        .into_par_iter()
        .map(|i| surface_trace(&pool.ray(ds, i, 0).ray, &model.scene, 0.0, f64::INFINITY, eps))
        .collect()
}

/// Two-stage fit. Parallel sections run on the current rayon pool. Stage one volume renders with every loss; stage two
/// freezes geometry and density, shades surface hits and fits reflectance,
/// light and `k` only.
pub fn fit(
    ds: &CaptureDataset,
    mut model: Model,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(FitEvent<'_>) -> Result<()>,
) -> Result<FitResult> {
    cfg.validate()?;
    ds.validate()?;
    if model.light.occlusion_enabled() && model.light.occlusion.len() != ds.frames.len() {
        return Err(Error::Config(format!(
            "{} occlusion masks for {} frames",
            model.light.occlusion.len(),
            ds.frames.len()
        )));
    }
    let pool = RayPool::new(ds, cfg.bbox_margin);
    if pool.is_empty() {
        return Err(Error::Config("no foreground pixels in any frame".into()));
    }
    let (log, stage_switch) = fit_inner(ds, &mut model, cfg, &pool, observer)?;
    Ok(FitResult {
        model,
        log,
        stage_switch,
    })
}

type Trace = (Vec<LogRow>, Option<usize>);

fn fit_inner(
    ds: &CaptureDataset,
    model: &mut Model,
    cfg: &TrainConfig,
    pool: &RayPool,
    observer: &mut dyn FnMut(FitEvent<'_>) -> Result<()>,
) -> Result<Trace> {
    let mut adam = Adam::new(
        model,
        AdamParams {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        },
    );
    let mut ws = Workspace::new(model, cfg.workers);
    let mut log = Vec::with_capacity(cfg.total_iters);
    let mut hits: Option<Vec<Option<SurfaceHit>>> = None;
    let mut stage_switch = None;
    let mut initial: Option<f64> = None;
    let mut over = 0usize;
    let mut skipped = 0u64;
    for iter in 0..cfg.total_iters {
        let stage = cfg.stage_at(iter);
        let obj = cfg.objective(stage);
        let idx = pool.batch_indices(cfg.seed, iter as u64, cfg.rays_per_batch);
        let rays: Vec<_> = idx.iter().enumerate().map(|(k, &i)| pool.ray(ds, i, k as u64)).collect();
        let eval = match stage {
            Stage::One => volume_objective(model, &rays, &obj, iter as u64, Some(&mut ws))?,
            Stage::Two => {
                if hits.is_none() {
                    observer(FitEvent::StageSwitch { iter, model })?;
                    stage_switch = Some(iter);
                    hits = Some(hits_for_pool(model, ds, pool, cfg.surface_eps));
                }
                let all = hits.as_ref().expect("hits computed at the switch");
                let batch_hits: Vec<_> = idx.iter().map(|&i| all[i]).collect();
                surface_objective(model, &rays, &batch_hits, &obj, Some(&mut ws))?
            }
        };
        if !eval.total.is_finite() {
            return Err(Error::Invariant(format!("non-finite loss at step {iter}")));
        }

        let init = *initial.get_or_insert(eval.total);
        if eval.total > cfg.divergence_factor * init {
            over += 1;
            if over >= cfg.divergence_patience {
                return Err(Error::Diverged {
                    step: iter,
                    loss: eval.total,
                    initial: init,
                    run: over,
                });
            }
        } else {
            over = 0;
        }

        let lr = learning_rate(cfg, iter);
        for g in ParamGroup::ALL {
            if !cfg.trains(g, stage) {
                continue;
            }
            let scale = cfg.lr_scale.get(&g).copied().unwrap_or(1.0);
            if !adam.step_group(model, &ws.grad, g, lr * scale) {
                skipped += 1;
            }
        }
        if cfg.trains(ParamGroup::Beta, stage) && model.scene.beta < cfg.beta_min {
            model.scene.beta = cfg.beta_min;
        }
        let row = LogRow::new(iter, stage, lr, &eval, model, skipped);
        observer(FitEvent::Step { row: &row, model })?;
        log.push(row);
    }
    Ok((log, stage_switch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic::{generate_synthetic, SynthOptions, SyntheticScene};

    #[test]
    fn first_adam_step_is_minus_lr() {
        let p = AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        };
        let mut x = [2.0];
        let mut s = AdamState::new(1);
        assert!(adam_step(&mut x, &[1.0], &mut s, 0.01, &p));
        assert!((x[0] - (2.0 - 0.01)).abs() < 1e-12);
        let mut y = [3.0, -1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut y, &[0.0, 0.0], &mut s, 0.1, &p);
        assert_eq!(y, [3.0, -1.0]);
    }

    #[test]
    fn non_finite_gradient_skips_update() {
        let p = AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut x = [1.0, 2.0];
        let mut s = AdamState::new(2);
        let before = diagnostics::snapshot();
        assert!(!adam_step(&mut x, &[1.0, f64::NAN], &mut s, 0.1, &p));
        assert_eq!(x, [1.0, 2.0]);
        assert_eq!(s, AdamState::new(2));
        assert!(diagnostics::snapshot().since(&before).skipped_updates >= 1);
    }

    #[test]
    fn schedule_follows_step_decay() {
        let cfg = TrainConfig::default();
        for &(i, k) in &[(0, 0), (14_999, 0), (15_000, 1), (29_999, 1), (30_000, 2), (39_999, 2)] {
            assert_eq!(learning_rate(&cfg, i), 1e-3 * 0.3f64.powi(k));
        }
        assert_eq!(cfg.stage_at(29_999), Stage::One);
        assert_eq!(cfg.stage_at(30_000), Stage::Two);
        assert_eq!(TrainConfig::scaled(4000, 3000).lr_decay_every, 1500);
        assert!(TrainConfig { stage1_iters: 5, total_iters: 4, ..TrainConfig::default() }.validate().is_err());
    }

    fn tiny() -> (CaptureDataset, Model, TrainConfig) {
        let opts = SynthOptions {
            views: 4,
            width: 16,
            height: 16,
            ..SynthOptions::default()
        };
        let ds = generate_synthetic(&SyntheticScene::head(), &opts).unwrap();
        let model = initial_model(&ds, &InitConfig::default()).unwrap();
        let cfg = TrainConfig {
            total_iters: 6,
            stage1_iters: 4,
            rays_per_batch: 32,
            samples_per_ray: 16,
            ..TrainConfig::scaled(6, 4)
        };
        (ds, model, cfg)
    }

    #[test]
    fn stage_two_freezes_geometry_and_honors_the_switch() {
        let (ds, model, cfg) = tiny();
        let mut at_switch = None;
        let r = fit(&ds, model.clone(), &cfg, &mut |e| {
            if let FitEvent::StageSwitch { model, .. } = e {
                at_switch = Some(model.clone());
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(r.stage_switch, Some(4));
        assert_eq!(r.log.iter().filter(|row| row.stage == 1).count(), 4);
        let snap = at_switch.unwrap();
        assert_eq!(snap.scene.sdf, r.model.scene.sdf);
        assert_eq!(snap.scene.beta.to_bits(), r.model.scene.beta.to_bits());
        assert_ne!(snap.scene.reflectance, r.model.scene.reflectance);
        assert_ne!(model.scene.sdf, snap.scene.sdf);
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let (ds, model, mut cfg) = tiny();
        cfg.stage1_weights = LossWeights::zero(Stage::One);
        cfg.stage2_weights = LossWeights::zero(Stage::Two);
        let r = fit(&ds, model.clone(), &cfg, &mut |_| Ok(())).unwrap();
        assert_eq!(r.model, model);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let (ds, model, cfg) = tiny();
        let a = fit(&ds, model.clone(), &cfg, &mut |_| Ok(())).unwrap();
        let b = fit(&ds, model, &cfg, &mut |_| Ok(())).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn csv_log_has_header_and_rows() {
        let (ds, model, cfg) = tiny();
        let r = fit(&ds, model, &cfg, &mut |_| Ok(())).unwrap();
        let mut buf = Vec::new();
        write_log_csv(&r.log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,stage,lr,total,l1"));
        assert_eq!(text.lines().count(), 1 + cfg.total_iters);
    }

    #[test]
    fn divergence_guard_aborts() {
        let (ds, model, mut cfg) = tiny();
        cfg.total_iters = 30;
        cfg.stage1_iters = 30;
        cfg.divergence_factor = 0.0;
        cfg.divergence_patience = 5;
        let err = fit(&ds, model, &cfg, &mut |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Diverged { run: 5, .. }), "{err}");
    }
}
