//! Held-out metrics for fitted scenes.

use serde::Serialize;

use crate::dataset::synthetic::SyntheticScene;
use crate::dataset::{Frame, Label};
use crate::error::Result;
use crate::geometry::Region;
use crate::image::ImageBuf;
use crate::lighting::{CombinedLight, ViewOcclusion, SH_COUNT};
use crate::rendering::{render_image, surface_trace, RenderConfig, RenderMode};
use crate::scene::{Model, ShadingScene};

/// PSNR in dB of two RGB images after clamping both to `[0,1]`.
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> f64 {
    assert!(a.same_shape(b), "image shapes differ");
    let se: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x.clamp(0.0, 1.0) as f64 - y.clamp(0.0, 1.0) as f64).powi(2))
        .sum();
    let mse = se / a.data.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn mean_abs_diff(a: &ImageBuf, b: &ImageBuf) -> f64 {
    assert!(a.same_shape(b), "image shapes differ");
    a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.data.len() as f64
}

/// Light for views that were not trained: the per-view occlusion masks are
/// replaced by their mean, stored as view 0.
pub fn novel_view_light(light: &CombinedLight) -> (CombinedLight, Option<usize>) {
    if !light.occlusion_enabled() {
        return (light.clone(), None);
    }
    let mut mean = [0.0; SH_COUNT];
    for o in &light.occlusion {
        for (m, c) in mean.iter_mut().zip(&o.coeffs) {
            *m += c / light.occlusion.len() as f64;
        }
    }
    let mut l = light.clone();
    l.occlusion = vec![ViewOcclusion {
        frame_id: "mean".into(),
        coeffs: mean,
    }];
    (l, Some(0))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ViewReport {
    pub psnr: f64,
    pub l1: f64,
    /// Per-view values in frame order.
    pub per_view: Vec<f64>,
}

/// Surface renders of `frames` (treated as unseen views) against their images.
pub fn evaluate_views(model: &Model, frames: &[Frame], eps: f64) -> Result<ViewReport> {
    let (light, view) = novel_view_light(&model.light);
    let cfg = RenderConfig::default();
    let mut report = ViewReport::default();
    let mut se = 0.0;
    let mut n = 0usize;
    for f in frames {
        let img = render_image(&f.camera, &model.scene, &light, &cfg, RenderMode::Surface { eps }, view)?.rgb();
        report.l1 += mean_abs_diff(&img, &f.image) / frames.len() as f64;
        let p = psnr(&img, &f.image);
        report.per_view.push(p);
        se += 10f64.powf(-p / 10.0) * img.data.len() as f64;
        n += img.data.len();
    }
    report.psnr = -10.0 * (se / n as f64).log10();
    Ok(report)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MaterialReport {
    pub diffuse_mae: f64,
    pub specular_mae: f64,
    pub roughness_mae: f64,
    pub pixels: usize,
}

/// Material errors over pixels labeled skin or hair. The fitted field is
/// read at the fitted surface hit, falling back to the true hit.
pub fn material_errors(model: &Model, truth: &SyntheticScene, frames: &[Frame], eps: f64) -> MaterialReport {
    let mut r = MaterialReport::default();
    for f in frames {
        for y in 0..f.mask.height {
            for x in 0..f.mask.width {
                if !f.label(x, y).is_surface() {
                    continue;
                }
                let ray = f.camera.pixel_ray(x, y);
                let Some(gt) = surface_trace(&ray, truth, 0.0, f64::INFINITY, eps) else {
                    continue;
                };
                let p = match surface_trace(&ray, &model.scene, 0.0, f64::INFINITY, eps) {
                    Some(h) if h.region == Region::Surface => h.x,
                    _ => gt.x,
                };
                let want = truth.material(gt.x, gt.region);
                let got = model.scene.reflectance.at(p);
                r.diffuse_mae += (got.diffuse - want.diffuse).abs().element_sum() / 3.0;
                r.specular_mae += (got.specular - want.specular).abs();
                r.roughness_mae += (got.roughness - want.roughness).abs();
                r.pixels += 1;
            }
        }
    }
    if r.pixels > 0 {
        let n = r.pixels as f64;
        r.diffuse_mae /= n;
        r.specular_mae /= n;
        r.roughness_mae /= n;
    }
    r
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SeparationReport {
    /// Fraction of eye pixels with eye opacity at least 0.9.
    pub eye_owned: f64,
    /// Fraction of skin pixels with eye opacity at most 0.05.
    pub skin_clear: f64,
    pub eye_pixels: usize,
    pub skin_pixels: usize,
}

/// Volume-rendered eye opacity against the labels of `frames`.
pub fn region_separation(model: &Model, frames: &[Frame], cfg: &RenderConfig, views: Option<&[usize]>) -> Result<SeparationReport> {
    let mut r = SeparationReport::default();
    let (mut eye_ok, mut skin_ok) = (0usize, 0usize);
    for (i, f) in frames.iter().enumerate() {
        let view = views.map(|v| v[i]);
        let (light, view) = match view {
            Some(v) => (model.light.clone(), Some(v)),
            None => novel_view_light(&model.light),
        };
        let img = render_image(&f.camera, &model.scene, &light, cfg, RenderMode::Volume, view)?;
        for y in 0..f.mask.height {
            for x in 0..f.mask.width {
                let o = img.get(x, y).opacity_eye;
                match f.label(x, y) {
                    Label::Eye => {
                        r.eye_pixels += 1;
                        eye_ok += (o >= 0.9) as usize;
                    }
                    Label::Skin => {
                        r.skin_pixels += 1;
                        skin_ok += (o <= 0.05) as usize;
                    }
                    _ => {}
                }
            }
        }
    }
    r.eye_owned = eye_ok as f64 / r.eye_pixels.max(1) as f64;
    r.skin_clear = skin_ok as f64 / r.skin_pixels.max(1) as f64;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic::{generate_synthetic, SynthOptions};

    #[test]
    fn psnr_examples() {
        let a = ImageBuf::from_fn(4, 4, 3, |_, _, p| p.fill(0.5));
        let b = ImageBuf::from_fn(4, 4, 3, |_, _, p| p.fill(0.6));
        assert_eq!(psnr(&a, &a), f64::INFINITY);
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-5);
        // Out-of-range values are clamped before comparison.
        let c = ImageBuf::from_fn(4, 4, 3, |_, _, p| p.fill(1.7));
        let d = ImageBuf::from_fn(4, 4, 3, |_, _, p| p.fill(1.0));
        assert_eq!(psnr(&c, &d), f64::INFINITY);
    }

    #[test]
    fn novel_light_averages_masks() {
        let mut l = CombinedLight::default().with_occlusion(&["a".into(), "b".into()]);
        l.occlusion[0].coeffs[0] = 1.0;
        l.occlusion[1].coeffs[0] = 3.0;
        let (m, v) = novel_view_light(&l);
        assert_eq!(v, Some(0));
        assert_eq!(m.occlusion.len(), 1);
        assert_eq!(m.occlusion[0].coeffs[0], 2.0);
    }

    #[test]
    fn truth_scores_perfectly_against_itself() {
        let head = SyntheticScene::head();
        let opts = SynthOptions {
            views: 4,
            width: 16,
            height: 16,
            ..SynthOptions::default()
        };
        let ds = generate_synthetic(&head, &opts).unwrap();
        let rep = material_errors_of_truth(&head, &ds.frames, opts.surface_eps);
        assert!(rep.pixels > 0);
        assert_eq!(rep.diffuse_mae, 0.0);
    }

    fn material_errors_of_truth(head: &SyntheticScene, frames: &[Frame], eps: f64) -> MaterialReport {
        let mut r = MaterialReport::default();
        for f in frames {
            for y in 0..f.mask.height {
                for x in 0..f.mask.width {
                    if let Some(h) = surface_trace(&f.camera.pixel_ray(x, y), head, 0.0, f64::INFINITY, eps) {
                        if f.label(x, y).is_surface() {
                            let m = head.material(h.x, h.region);
                            let expect = if f.label(x, y) == Label::Hair { head.hair } else { head.skin };
                            r.diffuse_mae += (m.diffuse - expect.diffuse).abs().element_sum();
                            r.pixels += 1;
                        }
                    }
                }
            }
        }
        r
    }
}
