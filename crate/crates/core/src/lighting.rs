//! Combined lighting: an inverse-square point flash at the camera plus a
//! SoftPlus-wrapped second-order SH ambient term, optionally modulated by a
//! per-view sigmoid-of-SH occlusion mask.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::brdf::colocated_lobe;
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::math::{sigmoid, softplus, DVec3};

pub const SH_COUNT: usize = 9;

const Y00: f64 = 0.282_094_791_773_878_14; // 1 / (2 sqrt(pi))
const Y1: f64 = 0.488_602_511_902_919_9; // sqrt(3 / (4 pi))
const Y2_A: f64 = 1.092_548_430_592_079_2; // sqrt(15 / (4 pi))
const Y20: f64 = 0.315_391_565_252_520_05; // sqrt(5 / (16 pi))
const Y22: f64 = 0.546_274_215_296_039_6; // sqrt(15 / (16 pi))

/// Real SH bands 0..2 in `(l, m)` order
/// `(0,0) (1,-1) (1,0) (1,1) (2,-2) (2,-1) (2,0) (2,1) (2,2)`,
/// without the Condon-Shortley phase.
#[inline]
pub fn sh_basis(n: DVec3) -> [f64; SH_COUNT] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        Y00,
        Y1 * y,
        Y1 * z,
        Y1 * x,
        Y2_A * x * y,
        Y2_A * y * z,
        Y20 * (3.0 * z * z - 1.0),
        Y2_A * x * z,
        Y22 * (x * x - y * y),
    ]
}

/// Gradients of the basis polynomials with respect to `n`.
#[inline]
pub fn sh_basis_grad(n: DVec3) -> [DVec3; SH_COUNT] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        DVec3::ZERO,
        DVec3::new(0.0, Y1, 0.0),
        DVec3::new(0.0, 0.0, Y1),
        DVec3::new(Y1, 0.0, 0.0),
        DVec3::new(Y2_A * y, Y2_A * x, 0.0),
        DVec3::new(0.0, Y2_A * z, Y2_A * y),
        DVec3::new(0.0, 0.0, 6.0 * Y20 * z),
        DVec3::new(Y2_A * z, 0.0, Y2_A * x),
        DVec3::new(2.0 * Y22 * x, -2.0 * Y22 * y, 0.0),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewOcclusion {
    pub frame_id: String,
    pub coeffs: [f64; SH_COUNT],
}

#[derive(Clone, Debug, PartialEq)]
pub struct CombinedLight {
    /// Scalar flash scale `s_L`.
    pub flash_scale: f64,
    /// Flash color `c_L`, each channel in `(0, 1]`.
    pub flash_color: DVec3,
    /// Ambient SH coefficients, one RGB triple per basis function.
    pub ambient: [DVec3; SH_COUNT],
    pub ambient_enabled: bool,
    /// Per-view occlusion masks, indexed by training-view index. Empty when
    /// occlusion modeling is off.
    pub occlusion: Vec<ViewOcclusion>,
}

impl Default for CombinedLight {
    fn default() -> Self {
        Self {
            flash_scale: 8.0,
            flash_color: DVec3::ONE,
            ambient: [DVec3::ZERO; SH_COUNT],
            ambient_enabled: true,
            occlusion: Vec::new(),
        }
    }
}

/// Gradient of a scalar objective with respect to the light parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LightGrad {
    pub flash_scale: f64,
    pub ambient: [DVec3; SH_COUNT],
    /// Sparse per-view occlusion gradients `(view, coeffs)`.
    pub occlusion: Vec<[f64; SH_COUNT]>,
}

impl LightGrad {
    pub fn zeros(views: usize) -> Self {
        Self {
            flash_scale: 0.0,
            ambient: [DVec3::ZERO; SH_COUNT],
            occlusion: vec![[0.0; SH_COUNT]; views],
        }
    }

    pub fn add(&mut self, other: &LightGrad) {
        self.flash_scale += other.flash_scale;
        for (a, b) in self.ambient.iter_mut().zip(&other.ambient) {
            *a += *b;
        }
        for (a, b) in self.occlusion.iter_mut().zip(&other.occlusion) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn clear(&mut self) {
        self.flash_scale = 0.0;
        self.ambient = [DVec3::ZERO; SH_COUNT];
        self.occlusion.iter_mut().for_each(|o| *o = [0.0; SH_COUNT]);
    }
}

impl CombinedLight {
    /// Ambient coefficients that give a uniform SoftPlus output of `level`.
    pub fn with_uniform_ambient(mut self, level: f64) -> Self {
        let k00 = crate::math::inverse_softplus(level) / Y00;
        self.ambient = [DVec3::ZERO; SH_COUNT];
        self.ambient[0] = DVec3::splat(k00);
        self
    }

    /// Enables occlusion masks (all-zero coefficients) for the given frames.
    pub fn with_occlusion(mut self, frame_ids: &[String]) -> Self {
        self.occlusion = frame_ids
            .iter()
            .map(|id| ViewOcclusion {
                frame_id: id.clone(),
                coeffs: [0.0; SH_COUNT],
            })
            .collect();
        self
    }

    pub fn occlusion_enabled(&self) -> bool {
        !self.occlusion.is_empty()
    }

    pub fn intensity(&self) -> DVec3 {
        self.flash_color * self.flash_scale
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.intensity();
        if !(l.min_element() > 0.0) || !l.is_finite() {
            return Err(Error::Config(format!("flash intensity {l:?} must be positive")));
        }
        if self.flash_color.max_element() > 1.0 {
            return Err(Error::Config("flash color channels must be <= 1".into()));
        }
        if self.ambient.iter().any(|k| !k.is_finite()) {
            return Err(Error::Config("non-finite ambient coefficient".into()));
        }
        Ok(())
    }

    fn occlusion_for(&self, view: Option<usize>) -> Result<Option<&[f64; SH_COUNT]>> {
        if !self.occlusion_enabled() {
            return Ok(None);
        }
        match view {
            Some(i) => self
                .occlusion
                .get(i)
                .map(|o| Some(&o.coeffs))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "no occlusion mask for view {i} ({} configured)",
                        self.occlusion.len()
                    ))
                }),
            None => Ok(None),
        }
    }
}

/// Flash color as the mean linear color of the `(x, y, w, h)` patch of a
/// photo of a white page lit by the flash.
pub fn calibrate_flash_color(image: &ImageBuf, patch: (u32, u32, u32, u32)) -> Result<DVec3> {
    let (x0, y0, w, h) = patch;
    if image.channels != 3 || w == 0 || h == 0 || x0 + w > image.width || y0 + h > image.height {
        return Err(Error::InvalidArgument(format!(
            "patch {patch:?} does not fit a {}x{} RGB image",
            image.width, image.height
        )));
    }
    let mut sum = DVec3::ZERO;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            sum += image.rgb(x, y);
        }
    }
    let c = sum / (w * h) as f64;
    if !(c.min_element() > 0.0) || c.max_element() > 1.0 {
        return Err(Error::InvalidArgument(format!("patch mean {c:?} is not a valid flash color")));
    }
    Ok(c)
}

/// `c * O(n) * SoftPlus(sum K Y(n))` per channel. Relighting uses a
/// clamped linear form instead, see [`crate::relight`].
pub fn ambient_shading(
    c: DVec3,
    n: DVec3,
    light: &CombinedLight,
    view: Option<usize>,
) -> Result<DVec3> {
    let occ = light.occlusion_for(view)?;
    if !light.ambient_enabled {
        return Ok(DVec3::ZERO);
    }
    let y = sh_basis(n);
    Ok(ambient_from_basis(c, &y, light, occ).0)
}

/// Returns (radiance, pre-activation sums z, mask value).
#[inline]
fn ambient_from_basis(
    c: DVec3,
    y: &[f64; SH_COUNT],
    light: &CombinedLight,
    occ: Option<&[f64; SH_COUNT]>,
) -> (DVec3, DVec3, f64) {
    let mut z = DVec3::ZERO;
    for (k, yj) in light.ambient.iter().zip(y) {
        z += *k * *yj;
    }
    let mask = match occ {
        Some(o) => sigmoid(o.iter().zip(y).map(|(a, b)| a * b).sum()),
        None => 1.0,
    };
    let a = DVec3::new(softplus(z.x), softplus(z.y), softplus(z.z));
    (c * a * mask, z, mask)
}

/// `L / |x - o|^2 * f(v, v, n) * max(n.v, 0)` with `v` pointing at the camera.
pub fn flash_shading(
    x: DVec3,
    o: DVec3,
    n: DVec3,
    c: DVec3,
    s: f64,
    rho: f64,
    light: &CombinedLight,
) -> DVec3 {
    let to_cam = o - x;
    let d2 = to_cam.length_squared();
    if d2 < 1e-12 {
        diagnostics::near_singular_flash();
        return DVec3::ZERO;
    }
    let v = to_cam / d2.sqrt();
    let mu = n.dot(v);
    if mu <= 0.0 {
        return DVec3::ZERO;
    }
    let lobe = colocated_lobe(mu, rho);
    light.intensity() / d2 * mu * (c / std::f64::consts::PI + DVec3::splat(s * lobe.value))
}

pub fn shade(
    x: DVec3,
    o: DVec3,
    n: DVec3,
    c: DVec3,
    s: f64,
    rho: f64,
    light: &CombinedLight,
    view: Option<usize>,
) -> Result<DVec3> {
    Ok(flash_shading(x, o, n, c, s, rho, light) + ambient_shading(c, n, light, view)?)
}

/// Adjoints of [`shade`] inputs for an upstream gradient on its RGB output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadeGrad {
    pub normal: DVec3,
    pub diffuse: DVec3,
    pub specular: f64,
    pub roughness: f64,
}

/// Forward shading plus reverse-mode accumulation. Light-parameter
/// gradients are added into `light_grad`; the returned struct holds the
/// adjoints of the geometric and material inputs.
#[allow(clippy::too_many_arguments)]
pub fn shade_backward(
    x: DVec3,
    o: DVec3,
    n: DVec3,
    c: DVec3,
    s: f64,
    rho: f64,
    light: &CombinedLight,
    view: Option<usize>,
    upstream: DVec3,
    light_grad: &mut LightGrad,
) -> Result<(DVec3, ShadeGrad)> {
    let mut g = ShadeGrad {
        normal: DVec3::ZERO,
        diffuse: DVec3::ZERO,
        specular: 0.0,
        roughness: 0.0,
    };
    let mut out = DVec3::ZERO;

    // Flash.
    let to_cam = o - x;
    let d2 = to_cam.length_squared();
    if d2 < 1e-12 {
        diagnostics::near_singular_flash();
    } else {
        let v = to_cam / d2.sqrt();
        let mu = n.dot(v);
        if mu > 0.0 {
            let lobe = colocated_lobe(mu, rho);
            let inv_pi = 1.0 / std::f64::consts::PI;
            let falloff = light.flash_color / d2;
            let brdf = c * inv_pi + DVec3::splat(s * lobe.value);
            let radiance = falloff * light.flash_scale * mu * brdf;
            out += radiance;
            let u = upstream * falloff * light.flash_scale;
            light_grad.flash_scale += (upstream * falloff * mu * brdf).element_sum();
            g.diffuse += u * mu * inv_pi;
            let u_sum = u.element_sum();
            g.specular += u_sum * mu * lobe.value;
            g.roughness += u_sum * mu * s * lobe.d_roughness;
            let d_mu = (u * (brdf + DVec3::splat(mu * s * lobe.d_mu))).element_sum();
            g.normal += v * d_mu;
        }
    }

    // Ambient.
    let occ = light.occlusion_for(view)?;
    if light.ambient_enabled {
        let y = sh_basis(n);
        let (radiance, z, mask) = ambient_from_basis(c, &y, light, occ);
        out += radiance;
        let a = DVec3::new(softplus(z.x), softplus(z.y), softplus(z.z));
        let sig = DVec3::new(sigmoid(z.x), sigmoid(z.y), sigmoid(z.z));
        g.diffuse += upstream * a * mask;
        // d/dz_c of c_c * mask * softplus(z_c)
        let dz = upstream * c * mask * sig;
        let dy = sh_basis_grad(n);
        for j in 0..SH_COUNT {
            light_grad.ambient[j] += dz * y[j];
            g.normal += dy[j] * dz.dot(light.ambient[j]);
        }
        if let (Some(o), Some(i)) = (occ, view) {
            let dm = (upstream * c * a).element_sum() * mask * (1.0 - mask);
            for j in 0..SH_COUNT {
                light_grad.occlusion[i][j] += dm * y[j];
                g.normal += dy[j] * (dm * o[j]);
            }
        }
    }
    Ok((out, g))
}

#[derive(Serialize, Deserialize)]
struct LightFile {
    s_l: f64,
    c_l: [f64; 3],
    ambient_enabled: bool,
    /// Nine rows `(l, m)` of RGB coefficients.
    k: Vec<[f64; 3]>,
    #[serde(default)]
    occlusion: BTreeMap<String, OcclusionBlock>,
}

#[derive(Serialize, Deserialize)]
struct OcclusionBlock {
    index: usize,
    coeffs: Vec<f64>,
}

impl CombinedLight {
    pub fn to_text(&self) -> String {
        let file = LightFile {
            s_l: self.flash_scale,
            c_l: self.flash_color.to_array(),
            ambient_enabled: self.ambient_enabled,
            k: self.ambient.iter().map(|k| k.to_array()).collect(),
            occlusion: self
                .occlusion
                .iter()
                .enumerate()
                .map(|(i, o)| {
                    (
                        o.frame_id.clone(),
                        OcclusionBlock {
                            index: i,
                            coeffs: o.coeffs.to_vec(),
                        },
                    )
                })
                .collect(),
        };
        toml::to_string(&file).expect("light state serializes")
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let file: LightFile =
            toml::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        if file.k.len() != SH_COUNT {
            return Err(Error::format(path, format!("expected {SH_COUNT} rows of K, got {}", file.k.len())));
        }
        let mut ambient = [DVec3::ZERO; SH_COUNT];
        for (a, k) in ambient.iter_mut().zip(&file.k) {
            *a = DVec3::from_array(*k);
        }
        let mut blocks: Vec<(usize, ViewOcclusion)> = Vec::new();
        for (id, block) in file.occlusion {
            let coeffs: [f64; SH_COUNT] = block.coeffs.as_slice().try_into().map_err(|_| {
                Error::format(path, format!("occlusion block {id} needs {SH_COUNT} values"))
            })?;
            blocks.push((block.index, ViewOcclusion { frame_id: id, coeffs }));
        }
        blocks.sort_by_key(|b| b.0);
        if blocks.iter().enumerate().any(|(i, b)| b.0 != i) {
            return Err(Error::format(path, "occlusion indices must be 0..n without gaps"));
        }
        let light = CombinedLight {
            flash_scale: file.s_l,
            flash_color: DVec3::from_array(file.c_l),
            ambient,
            ambient_enabled: file.ambient_enabled,
            occlusion: blocks.into_iter().map(|b| b.1).collect(),
        };
        light.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(light)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}
