//! Finite-difference check of the analytic objective gradients on small
//! random scenes.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::brdf::{EyePrior, Material};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::geometry::SphereEyeballs;
use crate::lighting::CombinedLight;
use crate::losses::LossWeights;
use crate::math::{stream_rng, DVec3, Ray};
use crate::objective::{surface_objective, volume_objective, ObjectiveConfig, TrainRay, Workspace};
use crate::rendering::{surface_trace, RenderConfig};
use crate::scene::{HybridScene, Model, ModelGrad, ParamGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub scenes: usize,
    pub rays: usize,
    pub resolution: usize,
    pub samples_per_ray: usize,
    /// Largest-magnitude coordinates checked per group.
    pub coords_per_group: usize,
    /// Extra random coordinates per group, usually with zero gradient.
    pub random_coords: usize,
    pub step: f64,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            scenes: 20,
            rays: 8,
            resolution: 16,
            samples_per_ray: 24,
            coords_per_group: 12,
            random_coords: 4,
            step: 1e-6,
            abs_floor: 1e-6,
            tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub per_group: BTreeMap<ParamGroup, f64>,
    pub checked: usize,
    /// Coordinates skipped because the one-sided differences disagree,
    /// which marks a kink of the piecewise-smooth objective.
    pub kinks: usize,
    pub scenes: usize,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// A two-ball-sized scene with perturbed grids and random light.
pub fn random_model(seed: u64, resolutions: &[usize]) -> Result<Model> {
    let eyes = SphereEyeballs::new(DVec3::new(-0.18, 0.05, 0.42), DVec3::new(0.18, 0.05, 0.42), 0.12)?;
    let m = Material {
        diffuse: DVec3::new(0.6, 0.45, 0.35),
        specular: 0.3,
        roughness: 0.5,
    };
    let mut scene = HybridScene::new(resolutions, 0.5, eyes, EyePrior::default(), &m, 0.05)?;
    let mut rng = stream_rng(seed, &[1]);
    for v in scene.sdf.grid_mut().values_mut() {
        *v += rng.gen_range(-0.02..0.02);
    }
    for v in scene.reflectance.grid_mut().values_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    scene.beta = rng.gen_range(0.03..0.08);
    let mut light = CombinedLight::default().with_occlusion(&["a".into(), "b".into()]);
    light.flash_scale = rng.gen_range(6.0..10.0);
    for k in light.ambient.iter_mut() {
        *k = DVec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
    }
    for o in light.occlusion.iter_mut() {
        o.coeffs.iter_mut().for_each(|c| *c = rng.gen_range(-0.5..0.5));
    }
    Ok(Model {
        scene,
        light,
        log_k: rng.gen_range(-0.3..0.3),
    })
}

/// Rays from a small window at z = 2.5 toward the head, cycling labels and
/// the two views of [`random_model`].
pub fn random_rays(seed: u64, n: usize) -> Vec<TrainRay> {
    let mut rng = stream_rng(seed, &[2]);
    (0..n)
        .map(|i| {
            let o = DVec3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), 2.5);
            let target = DVec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.0);
            TrainRay {
                ray: Ray::new(o, (target - o).normalize()),
                view: i % 2,
                target: DVec3::new(rng.gen(), rng.gen(), rng.gen()) * 0.3,
                label: Label::ALL[i % 4],
                pseudo_spec: rng.gen_range(0.0..0.5),
                key: i as u64,
            }
        })
        .collect()
}

fn objective_config(cfg: &GradcheckConfig, seed: u64) -> ObjectiveConfig {
    ObjectiveConfig {
        render: RenderConfig {
            samples_per_ray: cfg.samples_per_ray,
            near: 1.0,
            far: 4.0,
            seed,
            ..RenderConfig::default()
        },
        weights: LossWeights::stage_one(),
        smooth_eps: 0.03,
        workers: 1,
    }
}

/// Outcome of checking one coordinate.
enum Probe {
    Checked(f64),
    Kink,
}

fn probe(model: &Model, f: &dyn Fn(&Model) -> Result<f64>, f0: f64, g: ParamGroup, i: usize, analytic: f64, cfg: &GradcheckConfig) -> Result<Probe> {
    let h = cfg.step;
    let mut p = model.clone();
    p.with_group_mut(g, |v| v[i] += h);
    let mut m = model.clone();
    m.with_group_mut(g, |v| v[i] -= h);
    let (fp, fm) = (f(&p)?, f(&m)?);
    let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
    if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(cfg.abs_floor) {
        return Ok(Probe::Kink);
    }
    let c = (fp - fm) / (2.0 * h);
    Ok(Probe::Checked((analytic - c).abs() / analytic.abs().max(c.abs()).max(cfg.abs_floor)))
}

fn check_groups(
    model: &Model,
    f: &dyn Fn(&Model) -> Result<f64>,
    grad: &ModelGrad,
    groups: &[ParamGroup],
    cfg: &GradcheckConfig,
    seed: u64,
    report: &mut GradcheckReport,
) -> Result<()> {
    let f0 = f(model)?;
    let mut rng = stream_rng(seed, &[3]);
    for &g in groups {
        let v = grad.group(g);
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
        idx.truncate(cfg.coords_per_group);
        for _ in 0..cfg.random_coords.min(v.len()) {
            let i = rng.gen_range(0..v.len());
            if !idx.contains(&i) {
                idx.push(i);
            }
        }
        for i in idx {
            match probe(model, f, f0, g, i, v[i], cfg)? {
                Probe::Kink => report.kinks += 1,
                Probe::Checked(e) => {
                    report.checked += 1;
                    let worst = report.per_group.entry(g).or_insert(0.0);
                    *worst = worst.max(e);
                    report.max_rel_error = report.max_rel_error.max(e);
                }
            }
        }
    }
    Ok(())
}

/// Checks the stage-one objective over every group and the stage-two
/// objective over the groups it trains, on `cfg.scenes` random scenes.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.scenes == 0 || cfg.rays == 0 {
        return Err(Error::Config("gradcheck needs at least one scene and one ray".into()));
    }
    let mut report = GradcheckReport::default();
    for s in 0..cfg.scenes as u64 {
        let seed = stream_rng(cfg.seed, &[s]).gen::<u64>();
        let model = random_model(seed, &[cfg.resolution])?;
        let rays = random_rays(seed ^ 1, cfg.rays);
        let ocfg = objective_config(cfg, seed);

        let mut ws = Workspace::new(&model, 1);
        volume_objective(&model, &rays, &ocfg, 0, Some(&mut ws))?;
        let f = |m: &Model| volume_objective(m, &rays, &ocfg, 0, None).map(|e| e.total);
        check_groups(&model, &f, &ws.grad, &ParamGroup::ALL, cfg, seed, &mut report)?;

        let mut scfg = ocfg;
        scfg.weights = LossWeights::stage_two();
        let hits: Vec<_> = rays.iter().map(|r| surface_trace(&r.ray, &model.scene, 0.0, 10.0, 1e-6)).collect();
        let mut ws = Workspace::new(&model, 1);
        surface_objective(&model, &rays, &hits, &scfg, Some(&mut ws))?;
        let f = |m: &Model| surface_objective(m, &rays, &hits, &scfg, None).map(|e| e.total);
        let groups: Vec<ParamGroup> = ParamGroup::ALL.into_iter().filter(|g| !g.is_geometry()).collect();
        check_groups(&model, &f, &ws.grad, &groups, cfg, seed ^ 2, &mut report)?;
        report.scenes += 1;
    }
    Ok(report)
}
