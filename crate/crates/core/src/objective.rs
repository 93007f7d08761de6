//! Batch objective with a hand-written reverse pass.
//!
//! Stage one volume renders every ray of the batch and differentiates the
//! full loss with respect to the SDF grid, reflectance grid, light and
//! density scale. Stage two shades precomputed surface hits and only
//! touches reflectance, light and `k`.
//!
//! Rays are split into one contiguous chunk per worker; each chunk writes
//! into its own gradient buffer and the buffers are summed in worker
//! order, so results depend on the worker count only through rounding.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brdf::{activate, REFLECTANCE_CHANNELS};
use crate::dataset::Label;
use crate::error::Result;
use crate::geometry::{normalize_gradient, region_of, select, Region};
use crate::lighting::{shade, shade_backward};
use crate::losses::{reflectance_target, total_loss, LossTerms, LossWeights};
use crate::math::{normalize_backward, stream_rng, uniform_sphere, DVec3, Ray};
use crate::rendering::{density_with_grad, PixelRender, RenderConfig, SurfaceHit, TRANSMITTANCE_CUTOFF};
use crate::scene::{Model, ModelGrad, BETA_FLOOR};

/// One supervised ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRay {
    pub ray: Ray,
    pub view: usize,
    pub target: DVec3,
    pub label: Label,
    pub pseudo_spec: f64,
    /// Identifies the ray's random stream within a step.
    pub key: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub render: RenderConfig,
    pub weights: LossWeights,
    /// Perturbation radius of the normal smoothness term.
    pub smooth_eps: f64,
    pub workers: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Evaluation {
    /// Unweighted batch means.
    pub terms: LossTerms,
    pub weighted: LossTerms,
    pub total: f64,
}

/// Per-worker gradient buffers, reused across steps.
pub struct Workspace {
    partials: Vec<ModelGrad>,
    /// Reduced gradient of the last evaluation.
    pub grad: ModelGrad,
}

impl Workspace {
    pub fn new(model: &Model, workers: usize) -> Self {
        Self {
            partials: (0..workers.max(1)).map(|_| model.zero_grad()).collect(),
            grad: model.zero_grad(),
        }
    }

    fn reduce(&mut self) {
        self.grad.clear();
        for p in &self.partials {
            self.grad.add(p);
        }
    }
}

/// Batch-level normalizers, fixed before any ray is evaluated.
#[derive(Clone, Copy, Debug)]
struct Norms {
    rays: f64,
    samples: f64,
    hair: f64,
    other: f64,
    reflectance: f64,
}

impl Norms {
    fn new(rays: &[TrainRay], render: Option<&RenderConfig>) -> Self {
        let count = |f: &dyn Fn(&TrainRay) -> bool| rays.iter().filter(|r| f(r)).count() as f64;
        let samples = match render {
            Some(c) => count(&|r| c.interval(&r.ray).is_some()) * c.samples_per_ray as f64,
            None => 0.0,
        };
        Self {
            rays: rays.len() as f64,
            samples,
            hair: count(&|r| r.label == Label::Hair),
            other: count(&|r| matches!(r.label, Label::Skin | Label::Eye)),
            reflectance: count(&|r| reflectance_target(r.label, r.pseudo_spec).is_some()),
        }
    }
}

#[inline]
fn inv(n: f64) -> f64 {
    if n > 0.0 {
        1.0 / n
    } else {
        0.0
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct SampleRec {
    x: DVec3,
    delta: f64,
    region_eye: bool,
    d_sigma: f64,
    d_sigma_beta: f64,
    /// Transmittance after this sample, `T_j exp(-tau_j)`.
    t_after: f64,
    w: f64,
    grad_s: DVec3,
    grad_len: f64,
    normal: DVec3,
    diffuse: DVec3,
    specular: f64,
    roughness: f64,
    d_raw: [f64; REFLECTANCE_CHANNELS],
    radiance: DVec3,
}

/// Field values at `x`: surface SDF and gradient, plus raw reflectance
/// when `raw` is given. One corner walk when both grids share a layout.
#[inline]
fn query_fields(model: &Model, x: DVec3, raw: Option<&mut [f64; REFLECTANCE_CHANNELS]>) -> (f64, DVec3) {
    let sdf_grid = model.scene.sdf.grid();
    let refl = model.scene.reflectance.grid();
    let sv = sdf_grid.values();
    let mut v = 0.0;
    let mut g = DVec3::ZERO;
    match raw {
        Some(raw) if sdf_grid.same_layout(refl) => {
            *raw = [0.0; REFLECTANCE_CHANNELS];
            let rv = refl.values();
            sdf_grid.visit_corners(x, |c| {
                let s = sv[c.vertex];
                v += c.weight * s;
                g += c.d_weight * s;
                let base = c.vertex * REFLECTANCE_CHANNELS;
                for (o, r) in raw.iter_mut().zip(&rv[base..base + REFLECTANCE_CHANNELS]) {
                    *o += c.weight * r;
                }
            });
        }
        Some(raw) => {
            refl.query_all(x, raw);
            (v, g) = sdf_grid.query_grad(x, 0);
        }
        None => (v, g) = sdf_grid.query_grad(x, 0),
    }
    (v, g)
}

/// Scatters adjoints at `x`: `d_value` on the SDF value, `d_grad` on its
/// spatial gradient, and `d_raw` on the reflectance channels.
#[inline]
fn scatter(model: &Model, grad: &mut ModelGrad, x: DVec3, d_value: f64, d_grad: DVec3, d_raw: Option<&[f64; REFLECTANCE_CHANNELS]>) {
    let sdf_grid = model.scene.sdf.grid();
    let refl = model.scene.reflectance.grid();
    let touch_sdf = d_value != 0.0 || d_grad != DVec3::ZERO;
    match d_raw {
        Some(d_raw) if sdf_grid.same_layout(refl) => {
            let (gs, gr) = (&mut grad.sdf, &mut grad.reflectance);
            sdf_grid.visit_corners(x, |c| {
                if touch_sdf {
                    gs[c.vertex] += c.weight * d_value + c.d_weight.dot(d_grad);
                }
                let base = c.vertex * REFLECTANCE_CHANNELS;
                for (o, d) in gr[base..base + REFLECTANCE_CHANNELS].iter_mut().zip(d_raw) {
                    *o += c.weight * d;
                }
            });
        }
        _ => {
            if touch_sdf {
                let gs = &mut grad.sdf;
                sdf_grid.visit_corners(x, |c| gs[c.vertex] += c.weight * d_value + c.d_weight.dot(d_grad));
            }
            if let Some(d_raw) = d_raw {
                let gr = &mut grad.reflectance;
                refl.visit_corners(x, |c| {
                    let base = c.vertex * REFLECTANCE_CHANNELS;
                    for (o, d) in gr[base..base + REFLECTANCE_CHANNELS].iter_mut().zip(d_raw) {
                        *o += c.weight * d;
                    }
                });
            }
        }
    }
}

/// Forward volume pass over one ray, filling `recs` with every sample
/// before the transmittance cutoff. Samples after it are returned in
/// `tail` (position only) for the eikonal term.
fn forward_ray(
    model: &Model,
    ray: &Ray,
    view: usize,
    render: &RenderConfig,
    rng: &mut impl Rng,
    recs: &mut Vec<SampleRec>,
    tail: &mut Vec<DVec3>,
    t: &mut Vec<f64>,
    delta: &mut Vec<f64>,
) -> Result<PixelRender> {
    recs.clear();
    tail.clear();
    let mut out = PixelRender::default();
    if !render.sample_depths(ray, rng, t, delta) {
        return Ok(out);
    }
    let scene = &model.scene;
    let beta = scene.beta.max(BETA_FLOOR);
    let fixed_alpha = render.density_alpha;
    let log_cutoff = TRANSMITTANCE_CUTOFF.ln();
    let mut log_t = 0.0f64;
    for (&tj, &dj) in t.iter().zip(delta.iter()) {
        let x = ray.at(tj);
        if log_t < log_cutoff {
            tail.push(x);
            continue;
        }
        let mut raw = [0.0; REFLECTANCE_CHANNELS];
        let (sdf_s, grad_s) = query_fields(model, x, Some(&mut raw));
        let (sdf_e, grad_e) = scene.eyes.sdf_grad(x);
        let region = region_of(sdf_e, sdf_s);
        let sdf = select(sdf_e, sdf_s, sdf_e, sdf_s);
        let g = select(grad_e, grad_s, sdf_e, sdf_s);
        let normal = normalize_gradient(g);
        let (sigma, d_sigma, d_sigma_beta) = density_with_grad(sdf, beta, fixed_alpha);
        let tau = sigma * dj;
        let t_before = log_t.exp();
        let w = t_before * (1.0 - (-tau).exp());
        log_t -= tau;
        let act = activate(&raw);
        let eye = region == Region::Eye;
        let (specular, roughness) = if eye {
            (scene.eye_prior.specular, scene.eye_prior.roughness)
        } else {
            (act.material.specular, act.material.roughness)
        };
        let diffuse = act.material.diffuse;
        let radiance = shade(x, ray.origin, normal, diffuse, specular, roughness, &model.light, Some(view))?;
        out.rgb += radiance * w;
        out.opacity += w;
        if eye {
            out.opacity_eye += w;
        } else {
            out.opacity_surface += w;
        }
        out.expected_depth += w * tj;
        out.specular += w * specular;
        recs.push(SampleRec {
            x,
            delta: dj,
            region_eye: eye,
            d_sigma,
            d_sigma_beta,
            t_after: log_t.exp(),
            w,
            grad_s,
            grad_len: g.length(),
            normal,
            diffuse,
            specular,
            roughness,
            d_raw: act.d_raw,
            radiance,
        });
    }
    Ok(out)
}

/// Volume-rendered outputs of one ray exactly as the training pass sees them.
pub fn render_train_ray(model: &Model, ray: &Ray, view: usize, render: &RenderConfig, rng: &mut impl Rng) -> Result<PixelRender> {
    let (mut recs, mut tail, mut t, mut d) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    forward_ray(model, ray, view, render, rng, &mut recs, &mut tail, &mut t, &mut d)
}

#[derive(Default)]
struct Scratch {
    recs: Vec<SampleRec>,
    tail: Vec<DVec3>,
    t: Vec<f64>,
    delta: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn volume_ray(
    model: &Model,
    tr: &TrainRay,
    cfg: &ObjectiveConfig,
    norms: &Norms,
    step_key: u64,
    mut grad: Option<&mut ModelGrad>,
    s: &mut Scratch,
) -> Result<LossTerms> {
    let w = cfg.weights.effective();
    let mut rng = stream_rng(cfg.render.seed, &[step_key, tr.key]);
    let out = forward_ray(model, &tr.ray, tr.view, &cfg.render, &mut rng, &mut s.recs, &mut s.tail, &mut s.t, &mut s.delta)?;
    let mut terms = LossTerms::default();

    // Photometric.
    let diff = out.rgb - tr.target;
    terms.l1 = diff.abs().element_sum() * inv(3.0 * norms.rays);
    let g_rgb = DVec3::new(sign(diff.x), sign(diff.y), sign(diff.z)) * (w.l1 * inv(3.0 * norms.rays));

    // Mask and composition against hard labels.
    let fg = tr.label.is_foreground() as u8 as f64;
    let is_eye = (tr.label == Label::Eye) as u8 as f64;
    let is_surf = tr.label.is_surface() as u8 as f64;
    terms.mask = (out.opacity - fg).abs() * inv(norms.rays);
    terms.comp = ((out.opacity_eye - is_eye).abs() + (out.opacity_surface - is_surf).abs()) * inv(norms.rays);
    let g_op = w.mask * sign(out.opacity - fg) * inv(norms.rays);
    let g_op_eye = w.comp * sign(out.opacity_eye - is_eye) * inv(norms.rays);
    let g_op_surf = w.comp * sign(out.opacity_surface - is_surf) * inv(norms.rays);

    // Reflectance prior.
    let k = model.k();
    let (mut g_spec, mut g_log_k) = (0.0, 0.0);
    if let Some(target) = reflectance_target(tr.label, tr.pseudo_spec) {
        let r = k * out.specular - target;
        terms.reflectance = r.abs() * inv(norms.reflectance);
        let gs = w.reflectance * sign(r) * inv(norms.reflectance);
        g_spec = gs * k;
        g_log_k = gs * k * out.specular;
    }

    // Eikonal on the surface field at every sample of the ray.
    let eik_scale = inv(norms.samples);
    for r in &s.recs {
        let len = r.grad_s.length();
        terms.eikonal += (len - 1.0).powi(2) * eik_scale;
    }
    let mut tail_grads = Vec::new();
    for &x in &s.tail {
        let (_, g) = query_fields(model, x, None);
        terms.eikonal += (g.length() - 1.0).powi(2) * eik_scale;
        tail_grads.push(g);
    }

    // Normal smoothness at the highest-weight sample.
    let smooth_weight = match tr.label {
        Label::Hair => Some((w.smooth_hair, inv(norms.hair), true)),
        Label::Skin | Label::Eye => Some((w.smooth_other, inv(norms.other), false)),
        Label::Background => None,
    };
    let mut smooth = None;
    if let (Some((ws, scale, hair)), Some(best)) = (
        smooth_weight,
        s.recs.iter().filter(|r| r.w > 0.0).max_by(|a, b| a.w.total_cmp(&b.w)),
    ) {
        let u = uniform_sphere(rng.gen(), rng.gen());
        let x1 = best.x;
        let x2 = x1 + u * cfg.smooth_eps;
        let (_, g1) = query_fields(model, x1, None);
        let (_, g2) = query_fields(model, x2, None);
        let (n1, n2) = (normalize_gradient(g1), normalize_gradient(g2));
        let v = (1.0 - n1.dot(n2)) * scale;
        if hair {
            terms.smooth_hair = v;
        } else {
            terms.smooth_other = v;
        }
        smooth = Some((ws * scale, x1, x2, g1, g2, n1, n2));
    }

    let Some(grad) = grad.as_deref_mut() else {
        return Ok(terms);
    };
    grad.log_k += g_log_k;

    // Reverse pass through compositing.
    let mut suffix = 0.0;
    let n = s.recs.len();
    let mut e = vec![0.0; n];
    for (j, r) in s.recs.iter().enumerate() {
        e[j] = g_rgb.dot(r.radiance) + g_op + if r.region_eye { g_op_eye } else { g_op_surf } + g_spec * r.specular;
    }
    for j in (0..n).rev() {
        let r = &s.recs[j];
        let d_tau = e[j] * r.t_after - suffix;
        suffix += r.w * e[j];
        let d_sdf_total = d_tau * r.delta * r.d_sigma;
        grad.beta += d_tau * r.delta * r.d_sigma_beta;

        let (_, sg) = shade_backward(
            r.x,
            tr.ray.origin,
            r.normal,
            r.diffuse,
            r.specular,
            r.roughness,
            &model.light,
            Some(tr.view),
            g_rgb * r.w,
            &mut grad.light,
        )?;
        let d_specular = sg.specular + g_spec * r.w;

        let mut d_grad = DVec3::ZERO;
        let mut d_value = 0.0;
        let mut d_raw = [0.0; REFLECTANCE_CHANNELS];
        d_raw[0] = sg.diffuse.x * r.d_raw[0];
        d_raw[1] = sg.diffuse.y * r.d_raw[1];
        d_raw[2] = sg.diffuse.z * r.d_raw[2];
        if !r.region_eye {
            d_value = d_sdf_total;
            if r.grad_len > 1e-12 {
                d_grad += normalize_backward(r.normal, r.grad_len, sg.normal);
            }
            d_raw[3] = d_specular * r.d_raw[3];
            d_raw[4] = sg.roughness * r.d_raw[4];
        }
        let len = r.grad_s.length();
        if w.eikonal > 0.0 && len > 0.0 {
            d_grad += r.grad_s * (w.eikonal * eik_scale * 2.0 * (len - 1.0) / len);
        }
        scatter(model, grad, r.x, d_value, d_grad, Some(&d_raw));
    }
    if w.eikonal > 0.0 {
        for (&x, g) in s.tail.iter().zip(&tail_grads) {
            let len = g.length();
            if len > 0.0 {
                let d = *g * (w.eikonal * eik_scale * 2.0 * (len - 1.0) / len);
                scatter(model, grad, x, 0.0, d, None);
            }
        }
    }
    if let Some((scale, x1, x2, g1, g2, n1, n2)) = smooth {
        if scale > 0.0 {
            if g1.length() > 1e-12 {
                scatter(model, grad, x1, 0.0, normalize_backward(n1, g1.length(), -n2 * scale), None);
            }
            if g2.length() > 1e-12 {
                scatter(model, grad, x2, 0.0, normalize_backward(n2, g2.length(), -n1 * scale), None);
            }
        }
    }
    Ok(terms)
}

fn surface_ray(
    model: &Model,
    tr: &TrainRay,
    hit: Option<&SurfaceHit>,
    cfg: &ObjectiveConfig,
    norms: &Norms,
    grad: Option<&mut ModelGrad>,
) -> Result<LossTerms> {
    let w = cfg.weights.effective();
    let mut terms = LossTerms::default();
    let (rgb, spec, state) = match hit {
        Some(h) => {
            let mut raw = [0.0; REFLECTANCE_CHANNELS];
            model.scene.reflectance.grid().query_all(h.x, &mut raw);
            let act = activate(&raw);
            let eye = h.region == Region::Eye;
            let (s, rho) = if eye {
                (model.scene.eye_prior.specular, model.scene.eye_prior.roughness)
            } else {
                (act.material.specular, act.material.roughness)
            };
            let c = act.material.diffuse;
            let l = shade(h.x, tr.ray.origin, h.normal, c, s, rho, &model.light, Some(tr.view))?;
            (l, s, Some((h, act, eye, c, s, rho)))
        }
        None => (DVec3::ZERO, 0.0, None),
    };
    let diff = rgb - tr.target;
    terms.l1 = diff.abs().element_sum() * inv(3.0 * norms.rays);
    let g_rgb = DVec3::new(sign(diff.x), sign(diff.y), sign(diff.z)) * (w.l1 * inv(3.0 * norms.rays));
    let k = model.k();
    let (mut g_spec, mut g_log_k) = (0.0, 0.0);
    if let Some(target) = reflectance_target(tr.label, tr.pseudo_spec) {
        let r = k * spec - target;
        terms.reflectance = r.abs() * inv(norms.reflectance);
        let gs = w.reflectance * sign(r) * inv(norms.reflectance);
        g_spec = gs * k;
        g_log_k = gs * k * spec;
    }
    let (Some(grad), Some((h, act, eye, c, s, rho))) = (grad, state) else {
        return Ok(terms);
    };
    grad.log_k += g_log_k;
    let (_, sg) = shade_backward(h.x, tr.ray.origin, h.normal, c, s, rho, &model.light, Some(tr.view), g_rgb, &mut grad.light)?;
    let mut d_raw = [0.0; REFLECTANCE_CHANNELS];
    for ch in 0..3 {
        d_raw[ch] = sg.diffuse[ch] * act.d_raw[ch];
    }
    if !eye {
        d_raw[3] = (sg.specular + g_spec) * act.d_raw[3];
        d_raw[4] = sg.roughness * act.d_raw[4];
    }
    let gr = &mut grad.reflectance;
    model.scene.reflectance.grid().visit_corners(h.x, |cr| {
        let base = cr.vertex * REFLECTANCE_CHANNELS;
        for (o, d) in gr[base..base + REFLECTANCE_CHANNELS].iter_mut().zip(&d_raw) {
            *o += cr.weight * d;
        }
    });
    Ok(terms)
}

fn run_chunks<F>(rays: &[TrainRay], workers: usize, ws: Option<&mut Workspace>, f: F) -> Result<LossTerms>
where
    F: Fn(usize, &TrainRay, Option<&mut ModelGrad>, &mut Scratch) -> Result<LossTerms> + Sync,
{
    let workers = workers.max(1);
    let chunk = rays.len().div_ceil(workers).max(1);
    let run = |(ci, grad): (usize, Option<&mut ModelGrad>)| -> Result<LossTerms> {
        let mut scratch = Scratch::default();
        let mut terms = LossTerms::default();
        let mut grad = grad;
        if let Some(g) = grad.as_deref_mut() {
            g.clear();
        }
        let start = (ci * chunk).min(rays.len());
        let end = ((ci + 1) * chunk).min(rays.len());
        for (i, tr) in rays[start..end].iter().enumerate() {
            terms.add(&f(start + i, tr, grad.as_deref_mut(), &mut scratch)?);
        }
        Ok(terms)
    };
    let parts: Vec<Result<LossTerms>> = match ws {
        Some(ws) => {
            if ws.partials.len() != workers {
                let template = ws.grad.clone();
                ws.partials.resize(workers, template);
            }
            let parts = ws.partials.par_iter_mut().enumerate().map(|(i, g)| run((i, Some(g)))).collect();
            ws.reduce();
            parts
        }
        None => (0..workers).into_par_iter().map(|i| run((i, None))).collect(),
    };
    sum_terms(parts)
}

fn sum_terms(parts: Vec<Result<LossTerms>>) -> Result<LossTerms> {
    let mut total = LossTerms::default();
    for p in parts {
        total.add(&p?);
    }
    Ok(total)
}

fn finish(terms: LossTerms, weights: &LossWeights) -> Evaluation {
    let (total, weighted) = total_loss(&terms, weights);
    Evaluation {
        terms,
        weighted,
        total,
    }
}

/// Stage-one objective. With a workspace, its `grad` receives the gradient
/// of the weighted total.
pub fn volume_objective(
    model: &Model,
    rays: &[TrainRay],
    cfg: &ObjectiveConfig,
    step_key: u64,
    ws: Option<&mut Workspace>,
) -> Result<Evaluation> {
    let norms = Norms::new(rays, Some(&cfg.render));
    let terms = run_chunks(rays, cfg.workers, ws, |_, tr, g, s| volume_ray(model, tr, cfg, &norms, step_key, g, s))?;
    Ok(finish(terms, &cfg.weights))
}

/// Stage-two objective over rays with precomputed surface hits.
pub fn surface_objective(
    model: &Model,
    rays: &[TrainRay],
    hits: &[Option<SurfaceHit>],
    cfg: &ObjectiveConfig,
    ws: Option<&mut Workspace>,
) -> Result<Evaluation> {
    assert_eq!(rays.len(), hits.len());
    let norms = Norms::new(rays, None);
    let terms = run_chunks(rays, cfg.workers, ws, |i, tr, g, _| surface_ray(model, tr, hits[i].as_ref(), cfg, &norms, g))?;
    Ok(finish(terms, &cfg.weights))
}
