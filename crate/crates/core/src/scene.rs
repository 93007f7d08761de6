//! Scene containers: the [`ShadingScene`] interface shared by the fitted
//! hybrid scene and analytic reference scenes, and the trainable [`Model`]
//! with its flat parameter groups.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::brdf::{material_in_region, EyePrior, Material, ReflectanceField};
use crate::error::{Error, Result};
use crate::geometry::{
    normalize_gradient, region_of, select, Region, SamplePoint, SdfField, SdfGridField, SphereEyeballs, UnionSdf,
};
use crate::lighting::{CombinedLight, LightGrad, SH_COUNT};
use crate::math::DVec3;

/// Minimum VolSDF scale.
pub const BETA_FLOOR: f64 = 1e-4;

/// Anything that can be rendered: a surface-region SDF, the eyeball
/// spheres and a material per point and region.
pub trait ShadingScene: Sync {
    fn eyes(&self) -> &SphereEyeballs;
    fn surface_sdf(&self, x: DVec3) -> f64;
    fn surface_sdf_grad(&self, x: DVec3) -> (f64, DVec3);
    fn material(&self, x: DVec3, region: Region) -> Material;
    /// Laplace scale used when the scene is volume rendered.
    fn beta(&self) -> f64;

    fn union(&self, x: DVec3) -> UnionSdf {
        let sdf_eye = crate::geometry::sphere_sdf(x, self.eyes());
        let sdf_surface = self.surface_sdf(x);
        UnionSdf {
            sdf: sdf_eye.min(sdf_surface),
            sdf_eye,
            sdf_surface,
        }
    }

    fn sample(&self, x: DVec3, t: f64) -> SamplePoint {
        let (sdf_eye, g_eye) = self.eyes().sdf_grad(x);
        let (sdf_surface, g_surface) = self.surface_sdf_grad(x);
        SamplePoint {
            x,
            t,
            sdf_eye,
            sdf_surface,
            sdf: select(sdf_eye, sdf_surface, sdf_eye, sdf_surface),
            normal: normalize_gradient(select(g_eye, g_surface, sdf_eye, sdf_surface)),
            region: region_of(sdf_eye, sdf_surface),
        }
    }
}

/// The fitted representation: grid SDF for the surface region, fixed
/// eyeball spheres, grid reflectance and the eye specular prior.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridScene {
    pub sdf: SdfGridField,
    pub eyes: SphereEyeballs,
    pub reflectance: ReflectanceField,
    pub eye_prior: EyePrior,
    pub beta: f64,
}

impl HybridScene {
    pub fn new(
        resolutions: &[usize],
        r0: f64,
        eyes: SphereEyeballs,
        eye_prior: EyePrior,
        initial: &Material,
        beta: f64,
    ) -> Result<Self> {
        let mut sdf = SdfGridField::new(resolutions)?;
        sdf.init_sphere(r0)?;
        let mut reflectance = ReflectanceField::new(resolutions)?;
        reflectance.fill_constant(initial);
        if !(beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        Ok(Self {
            sdf,
            eyes,
            reflectance,
            eye_prior,
            beta: beta.max(BETA_FLOOR),
        })
    }
}

impl ShadingScene for HybridScene {
    fn eyes(&self) -> &SphereEyeballs {
        &self.eyes
    }

    #[inline]
    fn surface_sdf(&self, x: DVec3) -> f64 {
        self.sdf.sdf(x)
    }

    #[inline]
    fn surface_sdf_grad(&self, x: DVec3) -> (f64, DVec3) {
        self.sdf.sdf_grad(x)
    }

    fn material(&self, x: DVec3, region: Region) -> Material {
        material_in_region(self.reflectance.at(x), &self.eye_prior, region)
    }

    fn beta(&self) -> f64 {
        self.beta
    }
}

/// Everything the optimizer may touch.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub scene: HybridScene,
    pub light: CombinedLight,
    /// Reflectance scale compensator, `k = exp(log_k)`.
    pub log_k: f64,
}

impl Model {
    pub fn k(&self) -> f64 {
        self.log_k.exp()
    }

    pub fn zero_grad(&self) -> ModelGrad {
        ModelGrad {
            sdf: vec![0.0; self.scene.sdf.grid().values().len()],
            reflectance: vec![0.0; self.scene.reflectance.grid().values().len()],
            light: LightGrad::zeros(self.light.occlusion.len()),
            beta: 0.0,
            log_k: 0.0,
        }
    }

    pub fn group_len(&self, g: ParamGroup) -> usize {
        match g {
            ParamGroup::Sdf => self.scene.sdf.grid().values().len(),
            ParamGroup::Reflectance => self.scene.reflectance.grid().values().len(),
            ParamGroup::Ambient => 3 * SH_COUNT,
            ParamGroup::Occlusion => SH_COUNT * self.light.occlusion.len(),
            ParamGroup::Beta | ParamGroup::LogK | ParamGroup::FlashScale => 1,
        }
    }

    /// Runs `f` over the group's values as one mutable slice. Grid groups
    /// are borrowed in place; small groups go through a scratch copy.
    pub fn with_group_mut<R>(&mut self, g: ParamGroup, f: impl FnOnce(&mut [f64]) -> R) -> R {
        match g {
            ParamGroup::Sdf => f(self.scene.sdf.grid_mut().values_mut()),
            ParamGroup::Reflectance => f(self.scene.reflectance.grid_mut().values_mut()),
            _ => {
                let mut scratch = self.group_values(g);
                let r = f(&mut scratch);
                self.set_group_values(g, &scratch);
                r
            }
        }
    }

    pub fn group_values(&self, g: ParamGroup) -> Vec<f64> {
        match g {
            ParamGroup::Sdf => self.scene.sdf.grid().values().to_vec(),
            ParamGroup::Reflectance => self.scene.reflectance.grid().values().to_vec(),
            ParamGroup::Ambient => self.light.ambient.iter().flat_map(|k| k.to_array()).collect(),
            ParamGroup::Occlusion => self.light.occlusion.iter().flat_map(|o| o.coeffs).collect(),
            ParamGroup::Beta => vec![self.scene.beta],
            ParamGroup::LogK => vec![self.log_k],
            ParamGroup::FlashScale => vec![self.light.flash_scale],
        }
    }

    pub fn set_group_values(&mut self, g: ParamGroup, v: &[f64]) {
        assert_eq!(v.len(), self.group_len(g), "group {g} length");
        match g {
            ParamGroup::Sdf => self.scene.sdf.grid_mut().values_mut().copy_from_slice(v),
            ParamGroup::Reflectance => self.scene.reflectance.grid_mut().values_mut().copy_from_slice(v),
            ParamGroup::Ambient => {
                for (k, c) in self.light.ambient.iter_mut().zip(v.chunks_exact(3)) {
                    *k = DVec3::new(c[0], c[1], c[2]);
                }
            }
            ParamGroup::Occlusion => {
                for (o, c) in self.light.occlusion.iter_mut().zip(v.chunks_exact(SH_COUNT)) {
                    o.coeffs.copy_from_slice(c);
                }
            }
            ParamGroup::Beta => self.scene.beta = v[0].max(BETA_FLOOR),
            ParamGroup::LogK => self.log_k = v[0],
            ParamGroup::FlashScale => self.light.flash_scale = v[0],
        }
    }

    /// Writes the binary snapshots plus the light and scalar state.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.scene.sdf.save(&dir.join("sdf.hirg"))?;
        self.scene.reflectance.save(&dir.join("reflectance.hirr"))?;
        self.light.save(&dir.join("light.toml"))?;
        let state = ModelState {
            beta: self.scene.beta,
            log_k: self.log_k,
            eye_left: self.scene.eyes.left.to_array(),
            eye_right: self.scene.eyes.right.to_array(),
            eye_radius: self.scene.eyes.radius,
            eye_specular: self.scene.eye_prior.specular,
            eye_roughness: self.scene.eye_prior.roughness,
        };
        let p = dir.join("model.json");
        let text = serde_json::to_string_pretty(&state).expect("model state serializes");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("model.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let state: ModelState = serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?;
        let scene = HybridScene {
            sdf: SdfGridField::load(&dir.join("sdf.hirg"))?,
            reflectance: ReflectanceField::load(&dir.join("reflectance.hirr"))?,
            eyes: SphereEyeballs::new(
                DVec3::from_array(state.eye_left),
                DVec3::from_array(state.eye_right),
                state.eye_radius,
            )?,
            eye_prior: EyePrior::new(state.eye_specular, state.eye_roughness)?,
            beta: state.beta.max(BETA_FLOOR),
        };
        Ok(Self {
            scene,
            light: CombinedLight::load(&dir.join("light.toml"))?,
            log_k: state.log_k,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelState {
    beta: f64,
    log_k: f64,
    eye_left: [f64; 3],
    eye_right: [f64; 3],
    eye_radius: f64,
    eye_specular: f64,
    eye_roughness: f64,
}

/// Parameter groups with independent optimizer state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Sdf,
    Reflectance,
    Ambient,
    Occlusion,
    Beta,
    LogK,
    FlashScale,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Sdf,
        ParamGroup::Reflectance,
        ParamGroup::Ambient,
        ParamGroup::Occlusion,
        ParamGroup::Beta,
        ParamGroup::LogK,
        ParamGroup::FlashScale,
    ];

    /// Groups that define geometry and are frozen in the second stage.
    pub fn is_geometry(self) -> bool {
        matches!(self, ParamGroup::Sdf | ParamGroup::Beta)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::Sdf => "sdf",
            ParamGroup::Reflectance => "reflectance",
            ParamGroup::Ambient => "ambient",
            ParamGroup::Occlusion => "occlusion",
            ParamGroup::Beta => "beta",
            ParamGroup::LogK => "log_k",
            ParamGroup::FlashScale => "flash_scale",
        };
        f.write_str(s)
    }
}

/// Gradient with the same layout as [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad {
    pub sdf: Vec<f64>,
    pub reflectance: Vec<f64>,
    pub light: LightGrad,
    pub beta: f64,
    pub log_k: f64,
}

impl ModelGrad {
    pub fn clear(&mut self) {
        self.sdf.iter_mut().for_each(|v| *v = 0.0);
        self.reflectance.iter_mut().for_each(|v| *v = 0.0);
        self.light.clear();
        self.beta = 0.0;
        self.log_k = 0.0;
    }

    pub fn add(&mut self, other: &ModelGrad) {
        for (a, b) in self.sdf.iter_mut().zip(&other.sdf) {
            *a += b;
        }
        for (a, b) in self.reflectance.iter_mut().zip(&other.reflectance) {
            *a += b;
        }
        self.light.add(&other.light);
        self.beta += other.beta;
        self.log_k += other.log_k;
    }

    pub fn scale(&mut self, s: f64) {
        self.sdf.iter_mut().for_each(|v| *v *= s);
        self.reflectance.iter_mut().for_each(|v| *v *= s);
        self.light.flash_scale *= s;
        self.light.ambient.iter_mut().for_each(|v| *v *= s);
        self.light.occlusion.iter_mut().flatten().for_each(|v| *v *= s);
        self.beta *= s;
        self.log_k *= s;
    }

    pub fn group(&self, g: ParamGroup) -> Vec<f64> {
        match g {
            ParamGroup::Sdf => self.sdf.clone(),
            ParamGroup::Reflectance => self.reflectance.clone(),
            ParamGroup::Ambient => self.light.ambient.iter().flat_map(|k| k.to_array()).collect(),
            ParamGroup::Occlusion => self.light.occlusion.iter().flatten().copied().collect(),
            ParamGroup::Beta => vec![self.beta],
            ParamGroup::LogK => vec![self.log_k],
            ParamGroup::FlashScale => vec![self.light.flash_scale],
        }
    }

    /// Borrowed view for the large groups; `None` for the small ones.
    pub fn group_slice(&self, g: ParamGroup) -> Option<&[f64]> {
        match g {
            ParamGroup::Sdf => Some(&self.sdf),
            ParamGroup::Reflectance => Some(&self.reflectance),
            _ => None,
        }
    }
}
