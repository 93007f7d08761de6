//! Analytic ground-truth head used to synthesize captures.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CaptureDataset, Frame, Label};
use crate::brdf::{EyePrior, Material};
use crate::camera::{Camera, Intrinsics};
use crate::error::{Error, Result};
use crate::geometry::{Region, SphereEyeballs};
use crate::image::{ImageBuf, LabelImage};
use crate::lighting::{shade, CombinedLight};
use crate::math::{stream_rng, DVec3};
use crate::rendering::surface_trace;
use crate::scene::ShadingScene;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: DVec3,
    pub radius: f64,
}

impl Ball {
    fn sdf_grad(&self, x: DVec3) -> (f64, DVec3) {
        let d = x - self.center;
        let len = d.length();
        let g = if len > 0.0 { d / len } else { DVec3::Z };
        (len - self.radius, g)
    }
}

/// Polynomial smooth minimum with blend width `w`, and its partials.
pub fn smooth_min(a: f64, b: f64, w: f64) -> (f64, f64, f64) {
    if w <= 0.0 {
        return if a <= b { (a, 1.0, 0.0) } else { (b, 0.0, 1.0) };
    }
    let h = (w - (a - b).abs()).max(0.0) / w;
    let v = a.min(b) - h * h * w * 0.25;
    if a <= b {
        (v, 1.0 - 0.5 * h, 0.5 * h)
    } else {
        (v, 0.5 * h, 1.0 - 0.5 * h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub blobs: Vec<Ball>,
    pub blend: f64,
    pub eyes: SphereEyeballs,
    pub skin: Material,
    pub hair: Material,
    pub eye_diffuse: DVec3,
    pub eye_prior: EyePrior,
    /// Surface points above this height are hair.
    pub hair_above: f64,
    pub light: CombinedLight,
    /// Density scale used when the scene is volume rendered.
    pub beta: f64,
}

impl SyntheticScene {
    /// Cranium, face and jaw blobs with slightly protruding eyeballs.
    pub fn head() -> Self {
        let mut light = CombinedLight::default().with_uniform_ambient(0.15);
        light.ambient[2] = DVec3::new(0.25, 0.22, 0.2);
        light.ambient[3] = DVec3::new(0.1, 0.08, 0.05);
        Self {
            blobs: vec![
                Ball { center: DVec3::new(0.0, 0.15, -0.05), radius: 0.55 },
                Ball { center: DVec3::new(0.0, -0.1, 0.12), radius: 0.45 },
                Ball { center: DVec3::new(0.0, -0.38, 0.12), radius: 0.28 },
            ],
            blend: 1.0 / 8.0,
            eyes: SphereEyeballs::new(DVec3::new(-0.17, 0.05, 0.45), DVec3::new(0.17, 0.05, 0.45), 0.12)
                .expect("valid eyeballs"),
            skin: Material { diffuse: DVec3::new(0.62, 0.42, 0.33), specular: 0.3, roughness: 0.45 },
            hair: Material { diffuse: DVec3::new(0.12, 0.08, 0.05), specular: 0.02, roughness: 0.6 },
            eye_diffuse: DVec3::new(0.8, 0.78, 0.74),
            eye_prior: EyePrior::default(),
            hair_above: 0.4,
            light,
            beta: 0.01,
        }
    }

    pub fn is_hair(&self, x: DVec3) -> bool {
        x.y > self.hair_above
    }

    pub fn label_at(&self, x: DVec3, region: Region) -> Label {
        match region {
            Region::Eye => Label::Eye,
            Region::Surface if self.is_hair(x) => Label::Hair,
            Region::Surface => Label::Skin,
        }
    }
}

impl ShadingScene for SyntheticScene {
    fn eyes(&self) -> &SphereEyeballs {
        &self.eyes
    }

    fn surface_sdf(&self, x: DVec3) -> f64 {
        self.surface_sdf_grad(x).0
    }

    fn surface_sdf_grad(&self, x: DVec3) -> (f64, DVec3) {
        let mut it = self.blobs.iter();
        let Some(first) = it.next() else {
            return (f64::INFINITY, DVec3::Z);
        };
        let (mut v, mut g) = first.sdf_grad(x);
        for b in it {
            let (bv, bg) = b.sdf_grad(x);
            let (m, da, db) = smooth_min(v, bv, self.blend);
            v = m;
            g = g * da + bg * db;
        }
        (v, g)
    }

    fn material(&self, x: DVec3, region: Region) -> Material {
        match region {
            Region::Eye => Material {
                diffuse: self.eye_diffuse,
                specular: self.eye_prior.specular,
                roughness: self.eye_prior.roughness,
            },
            Region::Surface if self.is_hair(x) => self.hair,
            Region::Surface => self.skin,
        }
    }

    fn beta(&self) -> f64 {
        self.beta
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub views: usize,
    pub width: u32,
    pub height: u32,
    pub fov_degrees: f64,
    pub radius: f64,
    /// Per-view elevations are drawn uniformly from this range.
    pub elevation_degrees: (f64, f64),
    /// Orbit rotation in units of the angular step.
    pub phase: f64,
    pub seed: u64,
    /// Multiplier between true and pseudo specular albedo.
    pub pseudo_scale: f64,
    pub surface_eps: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            views: 16,
            width: 64,
            height: 64,
            fov_degrees: 38.0,
            radius: 3.0,
            elevation_degrees: (-10.0, 25.0),
            phase: 0.0,
            seed: 0,
            pseudo_scale: 1.0,
            surface_eps: 1e-5,
        }
    }
}

/// Cameras on a full orbit around the y axis with per-view elevations.
pub fn synth_cameras(opts: &SynthOptions) -> Result<Vec<Camera>> {
    if opts.views < 4 {
        return Err(Error::InvalidArgument(format!("need at least 4 views, got {}", opts.views)));
    }
    let intr = Intrinsics::from_fov(opts.width, opts.height, opts.fov_degrees);
    let (lo, hi) = opts.elevation_degrees;
    (0..opts.views)
        .map(|i| {
            let mut rng = stream_rng(opts.seed, &[0x5e1f, i as u64]);
            let el = if hi > lo { rng.gen_range(lo..hi) } else { lo }.to_radians();
            let az = (i as f64 + opts.phase) / opts.views as f64 * std::f64::consts::TAU;
            let eye = DVec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * opts.radius;
            Camera::look_at(intr, eye, DVec3::ZERO, DVec3::Y)
        })
        .collect()
}

/// Surface render, labels and pseudo specular map of one view.
pub fn render_view(scene: &SyntheticScene, camera: &Camera, opts: &SynthOptions, id: String) -> Result<Frame> {
    let (w, h) = (camera.width(), camera.height());
    let rows: Vec<Result<Vec<(DVec3, u8, f32)>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let ray = camera.pixel_ray(x, y);
                    let Some(hit) = surface_trace(&ray, scene, 0.0, f64::INFINITY, opts.surface_eps) else {
                        return Ok((DVec3::ZERO, Label::Background as u8, 0.0));
                    };
                    let m = scene.material(hit.x, hit.region);
                    let l = shade(hit.x, ray.origin, hit.normal, m.diffuse, m.specular, m.roughness, &scene.light, None)?;
                    let label = scene.label_at(hit.x, hit.region);
                    Ok((l, label as u8, (m.specular * opts.pseudo_scale) as f32))
                })
                .collect()
        })
        .collect();
    let mut image = ImageBuf::new(w, h, 3);
    let mut mask = LabelImage::new(w, h);
    let mut spec = ImageBuf::new(w, h, 1);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (l, label, s)) in row?.into_iter().enumerate() {
            image.set_rgb(x as u32, y as u32, l);
            mask.set(x as u32, y as u32, label);
            spec.pixel_mut(x as u32, y as u32)[0] = s;
        }
    }
    Ok(Frame {
        id,
        camera: *camera,
        image,
        mask,
        pseudo_spec: spec,
    })
}

/// Renders every orbit view of `scene`. The flash sits at each camera
/// origin and the ambient light carries no occlusion mask.
pub fn generate_synthetic(scene: &SyntheticScene, opts: &SynthOptions) -> Result<CaptureDataset> {
    let cameras = synth_cameras(opts)?;
    let frames = cameras
        .iter()
        .enumerate()
        .map(|(i, c)| render_view(scene, c, opts, format!("{i:04}")))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = CaptureDataset {
        intrinsics: cameras[0].intrinsics,
        frames,
        eyes: scene.eyes,
        metadata: Default::default(),
    };
    ds.metadata.insert("source".into(), "synthetic head".into());
    ds.metadata.insert("seed".into(), opts.seed.to_string());
    ds.metadata.insert("phase".into(), opts.phase.to_string());
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::union_sdf;
    use crate::rendering::shade_surface;

    #[test]
    fn smooth_min_partials_match_differences() {
        for &(a, b) in &[(0.1, 0.15), (0.2, 0.1), (0.3, -0.4), (0.0, 0.0)] {
            let (_, da, db) = smooth_min(a, b, 0.125);
            let h = 1e-7;
            let fa = (smooth_min(a + h, b, 0.125).0 - smooth_min(a - h, b, 0.125).0) / (2.0 * h);
            let fb = (smooth_min(a, b + h, 0.125).0 - smooth_min(a, b - h, 0.125).0) / (2.0 * h);
            assert!((da - fa).abs() < 1e-6 && (db - fb).abs() < 1e-6);
            assert!(smooth_min(a, b, 0.125).0 <= a.min(b));
        }
    }

    #[test]
    fn head_gradient_is_bounded_and_single_blob_is_exact() {
        let head = SyntheticScene::head();
        let mut rng = stream_rng(1, &[]);
        for _ in 0..2000 {
            let x = DVec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let (_, g) = head.surface_sdf_grad(x);
            assert!(g.length() <= 1.0 + 1e-12 && g.length() > 0.5);
        }
        let mut one = head.clone();
        one.blobs.truncate(1);
        let x = DVec3::new(0.3, -0.2, 0.7);
        let (v, g) = one.surface_sdf_grad(x);
        assert!((g.length() - 1.0).abs() < 1e-12);
        assert!((v - ((x - one.blobs[0].center).length() - 0.55)).abs() < 1e-15);
    }

    #[test]
    fn eyes_protrude_from_face() {
        let head = SyntheticScene::head();
        for c in [head.eyes.left, head.eyes.right] {
            let front = c + DVec3::Z * head.eyes.radius;
            assert!(head.surface_sdf(front) > 0.0);
            let u = union_sdf(front, &ConstantFieldOf(&head), &head.eyes);
            assert_eq!(u.region(), Region::Eye);
        }
    }

    struct ConstantFieldOf<'a>(&'a SyntheticScene);

    impl crate::geometry::SdfField for ConstantFieldOf<'_> {
        fn sdf(&self, x: DVec3) -> f64 {
            self.0.surface_sdf(x)
        }
        fn sdf_grad(&self, x: DVec3) -> (f64, DVec3) {
            self.0.surface_sdf_grad(x)
        }
    }

    fn small() -> SynthOptions {
        SynthOptions {
            views: 4,
            width: 24,
            height: 24,
            ..SynthOptions::default()
        }
    }

    #[test]
    fn cameras_face_origin() {
        for c in synth_cameras(&SynthOptions::default()).unwrap() {
            let o = c.origin();
            let axis = c.axis(2);
            let closest = o + axis * (-o.dot(axis));
            assert!(closest.length() < 0.05);
        }
        assert!(synth_cameras(&SynthOptions { views: 3, ..small() }).is_err());
    }

    #[test]
    fn labels_follow_hit_region_and_generation_is_deterministic() {
        let head = SyntheticScene::head();
        let opts = small();
        let a = generate_synthetic(&head, &opts).unwrap();
        let b = generate_synthetic(&head, &opts).unwrap();
        assert_eq!(a, b);
        let f = &a.frames[0];
        let mut seen = [0usize; 4];
        for y in 0..f.mask.height {
            for x in 0..f.mask.width {
                let label = Label::from_index(f.mask.get(x, y)).expect("label in range");
                seen[label as usize] += 1;
                let ray = f.camera.pixel_ray(x, y);
                let hit = surface_trace(&ray, &head, 0.0, f64::INFINITY, opts.surface_eps);
                assert_eq!(hit.is_some(), label.is_foreground());
                if let Some(h) = hit {
                    assert_eq!(h.region == Region::Eye, label == Label::Eye);
                }
            }
        }
        assert!(seen.iter().all(|&n| n > 0), "{seen:?}");
        // Frame pixels equal the plain surface renderer.
        let p = shade_surface(&f.camera.pixel_ray(12, 12), &head, &head.light, &Default::default(), None, opts.surface_eps)
            .unwrap();
        assert!((p.rgb - f.image.rgb(12, 12)).abs().max_element() < 1e-6);
    }
}
