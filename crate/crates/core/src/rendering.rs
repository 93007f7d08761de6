//! Volume rendering of the union SDF through a Laplace-CDF density, and
//! surface rendering by root finding. This module holds the plain forward
//! passes used for evaluation and data synthesis; the differentiable
//! training pass lives in [`crate::objective`].

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::image::ImageBuf;
use crate::lighting::{shade, CombinedLight};
use crate::math::{stream_rng, DVec3, Ray};
use crate::scene::{ShadingScene, BETA_FLOOR};

/// Marching stops once transmittance falls below this value.
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    /// Fixed density scale; `None` ties it to `1 / beta`.
    pub density_alpha: Option<f64>,
    pub near: f64,
    pub far: f64,
    pub seed: u64,
    /// Stratified jitter inside each depth bin; bin centers when off.
    pub jitter: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 64,
            density_alpha: None,
            near: 0.0,
            far: f64::INFINITY,
            seed: 0,
            jitter: true,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 8 {
            return Err(Error::Config(format!(
                "samples_per_ray must be at least 8, got {}",
                self.samples_per_ray
            )));
        }
        if !(self.far > self.near) || self.near < 0.0 {
            return Err(Error::Config(format!("bad clip range [{}, {}]", self.near, self.far)));
        }
        if let Some(a) = self.density_alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("density_alpha must be positive, got {a}")));
            }
        }
        Ok(())
    }

    pub fn alpha(&self, beta: f64) -> f64 {
        self.density_alpha.unwrap_or(1.0 / beta.max(BETA_FLOOR))
    }

    /// Ray interval inside both the cube and the clip range.
    pub fn interval(&self, ray: &Ray) -> Option<(f64, f64)> {
        let (a, b) = ray.cube_interval()?;
        let (a, b) = (a.max(self.near), b.min(self.far));
        (b > a).then_some((a, b))
    }

    /// Stratified depths and interval lengths `delta_j = t_{j+1} - t_j`
    /// (the last interval runs to the end of the range).
    pub fn sample_depths(&self, ray: &Ray, rng: &mut impl Rng, t: &mut Vec<f64>, delta: &mut Vec<f64>) -> bool {
        t.clear();
        delta.clear();
        let Some((a, b)) = self.interval(ray) else {
            return false;
        };
        let k = self.samples_per_ray;
        let bin = (b - a) / k as f64;
        for j in 0..k {
            let u = if self.jitter { rng.gen::<f64>() } else { 0.5 };
            t.push(a + (j as f64 + u) * bin);
        }
        for j in 0..k {
            let next = if j + 1 < k { t[j + 1] } else { b };
            delta.push(next - t[j]);
        }
        true
    }
}

/// `alpha * Psi_beta(-sdf)` with `Psi_beta` the zero-mean Laplace CDF.
#[inline]
pub fn sdf_to_density(sdf: f64, alpha: f64, beta: f64) -> f64 {
    if sdf <= 0.0 {
        alpha * (1.0 - 0.5 * (sdf / beta).exp())
    } else {
        alpha * 0.5 * (-sdf / beta).exp()
    }
}

/// Density together with `d sigma / d sdf` and `d sigma / d beta`. With
/// `alpha = None` the scale is `1 / beta` and the beta derivative includes
/// that dependence.
#[inline]
pub fn density_with_grad(sdf: f64, beta: f64, fixed_alpha: Option<f64>) -> (f64, f64, f64) {
    let alpha = fixed_alpha.unwrap_or(1.0 / beta);
    let e = (-sdf.abs() / beta).exp();
    let psi = if sdf <= 0.0 { 1.0 - 0.5 * e } else { 0.5 * e };
    let sigma = alpha * psi;
    let d_sdf = -0.5 * alpha * e / beta;
    // d psi / d beta at fixed alpha, same expression on both sides.
    let d_psi_beta = 0.5 * e * sdf / (beta * beta);
    let mut d_beta = alpha * d_psi_beta;
    if fixed_alpha.is_none() {
        d_beta -= psi / (beta * beta);
    }
    (sigma, d_sdf, d_beta)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PixelRender {
    pub rgb: DVec3,
    pub opacity: f64,
    pub opacity_eye: f64,
    pub opacity_surface: f64,
    pub expected_depth: f64,
    /// Composited specular albedo.
    pub specular: f64,
}

/// Volume renders one ray.
pub fn march_ray<S: ShadingScene + ?Sized>(
    ray: &Ray,
    scene: &S,
    light: &CombinedLight,
    config: &RenderConfig,
    view: Option<usize>,
    rng: &mut impl Rng,
) -> Result<PixelRender> {
    let mut t = Vec::with_capacity(config.samples_per_ray);
    let mut delta = Vec::with_capacity(config.samples_per_ray);
    let mut out = PixelRender::default();
    if !config.sample_depths(ray, rng, &mut t, &mut delta) {
        return Ok(out);
    }
    let beta = scene.beta().max(BETA_FLOOR);
    let alpha = config.alpha(beta);
    let mut log_transmittance = 0.0f64;
    let log_cutoff = TRANSMITTANCE_CUTOFF.ln();
    for (&tj, &dj) in t.iter().zip(&delta) {
        if log_transmittance < log_cutoff {
            break;
        }
        let x = ray.at(tj);
        let p = scene.sample(x, tj);
        let tau = sdf_to_density(p.sdf, alpha, beta) * dj;
        let w = log_transmittance.exp() * (1.0 - (-tau).exp());
        log_transmittance -= tau;
        if w <= 0.0 {
            continue;
        }
        let m = scene.material(x, p.region);
        let l = shade(x, ray.origin, p.normal, m.diffuse, m.specular, m.roughness, light, view)?;
        out.rgb += l * w;
        out.opacity += w;
        match p.region {
            Region::Eye => out.opacity_eye += w,
            Region::Surface => out.opacity_surface += w,
        }
        out.expected_depth += w * tj;
        out.specular += w * m.specular;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceHit {
    pub t: f64,
    pub x: DVec3,
    pub normal: DVec3,
    pub region: Region,
}

/// First zero crossing of the union SDF along the ray, by sphere tracing
/// with a 0.9 safety factor followed by bisection once a step lands inside.
pub fn surface_trace<S: ShadingScene + ?Sized>(
    ray: &Ray,
    scene: &S,
    near: f64,
    far: f64,
    eps: f64,
) -> Option<SurfaceHit> {
    let (a, b) = ray.cube_interval()?;
    let (a, b) = (a.max(near), b.min(far));
    if b <= a {
        return None;
    }
    let f = |t: f64| scene.union(ray.at(t)).sdf;
    let hit = |t: f64| {
        let x = ray.at(t);
        let p = scene.sample(x, t);
        SurfaceHit {
            t,
            x,
            normal: p.normal,
            region: p.region,
        }
    };
    let mut t = a;
    let mut v = f(t);
    if v < 0.0 {
        // Started inside; report the entry point.
        return Some(hit(t));
    }
    let mut prev_t = t;
    for _ in 0..4096 {
        if v.abs() < eps {
            return Some(hit(t));
        }
        if v < 0.0 {
            let (mut lo, mut hi) = (prev_t, t);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let fm = f(mid);
                if fm.abs() < eps {
                    return Some(hit(mid));
                }
                if fm > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(hit(0.5 * (lo + hi)));
        }
        prev_t = t;
        t += (0.9 * v).max(0.5 * eps);
        if t > b {
            return None;
        }
        v = f(t);
    }
    None
}

/// Shades the first surface hit; the pixel is fully owned by the hit region.
pub fn shade_surface<S: ShadingScene + ?Sized>(
    ray: &Ray,
    scene: &S,
    light: &CombinedLight,
    config: &RenderConfig,
    view: Option<usize>,
    eps: f64,
) -> Result<PixelRender> {
    let Some(h) = surface_trace(ray, scene, config.near, config.far, eps) else {
        return Ok(PixelRender::default());
    };
    let m = scene.material(h.x, h.region);
    let rgb = shade(h.x, ray.origin, h.normal, m.diffuse, m.specular, m.roughness, light, view)?;
    Ok(PixelRender {
        rgb,
        opacity: 1.0,
        opacity_eye: (h.region == Region::Eye) as u8 as f64,
        opacity_surface: (h.region == Region::Surface) as u8 as f64,
        expected_depth: h.t,
        specular: m.specular,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RenderMode {
    Volume,
    Surface { eps: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<PixelRender>,
}

impl RenderedImage {
    pub fn get(&self, x: u32, y: u32) -> &PixelRender {
        &self.pixels[(y * self.width + x) as usize]
    }

    pub fn rgb(&self) -> ImageBuf {
        ImageBuf::from_fn(self.width, self.height, 3, |x, y, p| {
            let c = self.get(x, y).rgb;
            p.copy_from_slice(&[c.x as f32, c.y as f32, c.z as f32]);
        })
    }

    /// Opacity, eye opacity, surface opacity, depth and specular as a
    /// 5-channel image.
    pub fn aux(&self) -> ImageBuf {
        ImageBuf::from_fn(self.width, self.height, 5, |x, y, p| {
            let r = self.get(x, y);
            p.copy_from_slice(&[
                r.opacity as f32,
                r.opacity_eye as f32,
                r.opacity_surface as f32,
                r.expected_depth as f32,
                r.specular as f32,
            ]);
        })
    }
}

/// Renders every pixel center. Each pixel draws its jitter from its own
/// stream keyed by `(view, x, y)`, so results do not depend on scheduling.
pub fn render_image<S: ShadingScene + ?Sized>(
    camera: &Camera,
    scene: &S,
    light: &CombinedLight,
    config: &RenderConfig,
    mode: RenderMode,
    view: Option<usize>,
) -> Result<RenderedImage> {
    config.validate()?;
    let (w, h) = (camera.width(), camera.height());
    let view_key = view.map_or(u64::MAX, |v| v as u64);
    let rows: Vec<Vec<PixelRender>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let ray = camera.pixel_ray(x, y);
                    match mode {
                        RenderMode::Volume => {
                            let mut rng = stream_rng(config.seed, &[view_key, x as u64, y as u64]);
                            march_ray(&ray, scene, light, config, view, &mut rng)
                        }
                        RenderMode::Surface { eps } => shade_surface(&ray, scene, light, config, view, eps),
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RenderedImage {
        width: w,
        height: h,
        pixels: rows.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brdf::Material;
    use crate::camera::Intrinsics;
    use crate::geometry::{SdfField, SphereEyeballs, SphereSdf};

    /// Analytic test scene: one SDF primitive, constant materials.
    struct TestScene<F: SdfField> {
        field: F,
        eyes: SphereEyeballs,
        surface: Material,
        eye: Material,
        beta: f64,
    }

    impl<F: SdfField> ShadingScene for TestScene<F> {
        fn eyes(&self) -> &SphereEyeballs {
            &self.eyes
        }
        fn surface_sdf(&self, x: DVec3) -> f64 {
            self.field.sdf(x)
        }
        fn surface_sdf_grad(&self, x: DVec3) -> (f64, DVec3) {
            self.field.sdf_grad(x)
        }
        fn material(&self, _x: DVec3, region: Region) -> Material {
            match region {
                Region::Eye => self.eye,
                Region::Surface => self.surface,
            }
        }
        fn beta(&self) -> f64 {
            self.beta
        }
    }

    fn far_eyes() -> SphereEyeballs {
        SphereEyeballs::new(DVec3::new(0.95, 0.95, -0.95), DVec3::new(0.95, 0.85, -0.95), 0.01).unwrap()
    }

    fn lambert(c: f64) -> Material {
        Material {
            diffuse: DVec3::splat(c),
            specular: 0.0,
            roughness: 0.5,
        }
    }

    fn sphere_scene(beta: f64) -> TestScene<SphereSdf> {
        TestScene {
            field: SphereSdf {
                center: DVec3::ZERO,
                radius: 0.5,
            },
            eyes: far_eyes(),
            surface: lambert(0.6),
            eye: lambert(0.9),
            beta,
        }
    }

    #[test]
    fn density_examples() {
        assert_eq!(sdf_to_density(0.0, 3.0, 0.1), 1.5);
        assert!(sdf_to_density(50.0, 3.0, 0.1) < 1e-12);
        assert!((sdf_to_density(-50.0, 3.0, 0.1) - 3.0).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for i in 0..=2000 {
            let s = -1.0 + i as f64 * 1e-3;
            let d = sdf_to_density(s, 10.0, 0.05);
            assert!(d <= prev);
            prev = d;
        }
        let (below, above) = (sdf_to_density(-1e-12, 2.0, 0.1), sdf_to_density(1e-12, 2.0, 0.1));
        assert!((below - above).abs() < 1e-9);
    }

    #[test]
    fn density_gradients_match_finite_differences() {
        let h = 1e-7;
        for &alpha in &[None, Some(7.0)] {
            for &sdf in &[-0.3, -0.01, 0.004, 0.2] {
                let beta = 0.05;
                let (_, ds, db) = density_with_grad(sdf, beta, alpha);
                let f = |s: f64, b: f64| density_with_grad(s, b, alpha).0;
                let fd_s = (f(sdf + h, beta) - f(sdf - h, beta)) / (2.0 * h);
                let fd_b = (f(sdf, beta + h) - f(sdf, beta - h)) / (2.0 * h);
                assert!((ds - fd_s).abs() <= 1e-5 * fd_s.abs().max(1.0), "{ds} {fd_s}");
                assert!((db - fd_b).abs() <= 1e-5 * fd_b.abs().max(1.0), "{db} {fd_b}");
                assert_eq!(f(sdf, beta), sdf_to_density(sdf, alpha.unwrap_or(1.0 / beta), beta));
            }
        }
    }

    #[test]
    fn empty_space_is_transparent() {
        let scene = TestScene {
            field: crate::geometry::ConstantSdf(5.0),
            eyes: far_eyes(),
            surface: lambert(0.5),
            eye: lambert(0.5),
            beta: 0.01,
        };
        let ray = Ray::new(DVec3::new(0.0, 0.0, 3.0), -DVec3::Z);
        let mut rng = stream_rng(0, &[]);
        let p = march_ray(&ray, &scene, &CombinedLight::default(), &RenderConfig::default(), None, &mut rng).unwrap();
        assert!(p.opacity < 0.01);
        let miss = Ray::new(DVec3::new(0.0, 3.0, 3.0), DVec3::Z);
        let p = march_ray(&miss, &scene, &CombinedLight::default(), &RenderConfig::default(), None, &mut rng).unwrap();
        assert_eq!(p, PixelRender::default());
    }

    #[test]
    fn opaque_slab_composites_constant_color() {
        // A slab `z < 0` with only ambient light on a normal facing the ray:
        // every sample shades the same, so rgb = C * opacity.
        let scene = TestScene {
            field: crate::geometry::PlaneSdf {
                normal: DVec3::Z,
                offset: 0.0,
            },
            eyes: far_eyes(),
            surface: lambert(0.4),
            eye: lambert(0.4),
            beta: 0.02,
        };
        let mut light = CombinedLight::default();
        light.flash_scale = 0.0;
        let c = DVec3::splat(0.4) * std::f64::consts::LN_2;
        let ray = Ray::new(DVec3::new(0.1, 0.2, 3.0), -DVec3::Z);
        let mut last = 0.0;
        for &alpha in &[1.0, 10.0, 100.0, 1000.0] {
            let cfg = RenderConfig {
                density_alpha: Some(alpha),
                ..RenderConfig::default()
            };
            let mut rng = stream_rng(1, &[]);
            let p = march_ray(&ray, &scene, &light, &cfg, None, &mut rng).unwrap();
            assert!((p.rgb - c * p.opacity).length() < 1e-12);
            assert!(p.opacity >= last);
            last = p.opacity;
        }
        assert!(last > 0.999);
    }

    #[test]
    fn eye_ray_is_owned_by_the_eye() {
        let eyes = SphereEyeballs::new(DVec3::new(-0.2, 0.0, 0.5), DVec3::new(0.2, 0.0, 0.5), 0.12).unwrap();
        let scene = TestScene {
            field: SphereSdf {
                center: DVec3::ZERO,
                radius: 0.55,
            },
            eyes,
            surface: lambert(0.6),
            eye: lambert(0.9),
            beta: 0.003,
        };
        let ray = Ray::new(DVec3::new(-0.2, 0.0, 3.0), -DVec3::Z);
        let cfg = RenderConfig {
            samples_per_ray: 256,
            ..RenderConfig::default()
        };
        let mut rng = stream_rng(2, &[]);
        let p = march_ray(&ray, &scene, &CombinedLight::default(), &cfg, None, &mut rng).unwrap();
        assert!(p.opacity_eye > 0.9, "{p:?}");
        assert!(p.opacity_surface < 0.05);
    }

    #[test]
    fn weights_are_bounded_and_partition() {
        let scene = sphere_scene(0.01);
        let mut rng = stream_rng(3, &[]);
        for _ in 0..500 {
            let o = crate::math::uniform_sphere(rng.gen(), rng.gen()) * 2.5;
            let target = DVec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6));
            let ray = Ray::new(o, (target - o).normalize());
            let p = march_ray(&ray, &scene, &CombinedLight::default(), &RenderConfig::default(), None, &mut rng).unwrap();
            assert!(p.opacity <= 1.0 + 1e-6 && p.opacity >= 0.0);
            assert!((p.opacity_eye + p.opacity_surface - p.opacity).abs() < 1e-5);
        }
    }

    #[test]
    fn surface_trace_examples() {
        let scene = sphere_scene(0.01);
        let o = DVec3::new(0.0, 0.0, 2.0);
        let hit = surface_trace(&Ray::new(o, -DVec3::Z), &scene, 0.0, 10.0, 1e-4).unwrap();
        assert!((hit.t - 1.5).abs() < 1e-4);
        assert!(scene.union(hit.x).sdf.abs() < 1e-4);
        assert!((hit.normal - DVec3::Z).length() < 1e-3);
        assert!(surface_trace(&Ray::new(DVec3::new(0.0, 0.51, 2.0), -DVec3::Z), &scene, 0.0, 10.0, 1e-4).is_none());
        assert!(surface_trace(&Ray::new(o, -DVec3::Z), &scene, 0.0, 1.0, 1e-4).is_none());
    }

    #[test]
    fn lambert_sphere_matches_closed_form() {
        let scene = sphere_scene(0.01);
        let mut light = CombinedLight::default();
        light.ambient_enabled = false;
        let cam = Camera::look_at(Intrinsics::from_fov(24, 24, 40.0), DVec3::new(0.0, 0.0, 3.0), DVec3::ZERO, DVec3::Y).unwrap();
        let img = render_image(&cam, &scene, &light, &RenderConfig::default(), RenderMode::Surface { eps: 1e-7 }, None).unwrap();
        for y in 0..24 {
            for x in 0..24 {
                let ray = cam.pixel_ray(x, y);
                // Closed-form ray/sphere intersection.
                let b = ray.origin.dot(ray.direction);
                let disc = b * b - (ray.origin.length_squared() - 0.25);
                let px = img.get(x, y);
                if disc <= 0.0 {
                    assert_eq!(px.opacity, 0.0);
                    continue;
                }
                let t = -b - disc.sqrt();
                let p = ray.at(t);
                let n = p.normalize();
                let mu = n.dot(-ray.direction);
                let expected = 8.0 / (t * t) * 0.6 / std::f64::consts::PI * mu;
                assert!((px.rgb.x - expected).abs() < 1e-5, "({x},{y}) {} vs {expected}", px.rgb.x);
            }
        }
    }

    #[test]
    fn render_image_is_deterministic_and_pixelwise() {
        let scene = sphere_scene(0.02);
        let light = CombinedLight::default();
        let cfg = RenderConfig {
            samples_per_ray: 16,
            seed: 9,
            ..RenderConfig::default()
        };
        let cam = Camera::look_at(Intrinsics::from_fov(2, 2, 30.0), DVec3::new(0.0, 0.0, 3.0), DVec3::ZERO, DVec3::Y).unwrap();
        let a = render_image(&cam, &scene, &light, &cfg, RenderMode::Volume, Some(3)).unwrap();
        let b = render_image(&cam, &scene, &light, &cfg, RenderMode::Volume, Some(3)).unwrap();
        assert_eq!(a, b);
        for y in 0..2 {
            for x in 0..2 {
                let mut rng = stream_rng(9, &[3, x as u64, y as u64]);
                let p = march_ray(&cam.pixel_ray(x, y), &scene, &light, &cfg, Some(3), &mut rng).unwrap();
                assert_eq!(*a.get(x, y), p);
            }
        }
        let small = cam.with_intrinsics(cam.intrinsics.scaled(1, 1));
        assert_eq!(render_image(&small, &scene, &light, &cfg, RenderMode::Volume, None).unwrap().pixels.len(), 1);
    }
}
