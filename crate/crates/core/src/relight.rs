//! SH-basis relighting of a fitted scan and ratio-image relighting of
//! frames aligned with it.
//!
//! Basis renders use the clamped linear ambient `c * max(Y_j(n), 0)` with
//! the flash off, so a render under any environment is the weighted sum of
//! the nine basis images. This differs from the SoftPlus ambient used for
//! fitting, which is not linear in its coefficients.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::lighting::{flash_shading, sh_basis, CombinedLight, SH_COUNT};
use crate::math::DVec3;
use crate::rendering::surface_trace;
use crate::scene::ShadingScene;

pub const DEFAULT_RATIO_FLOOR: f64 = 1e-3;

/// Per-channel SH weights of an environment, in basis order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShEnvironment {
    pub coeffs: [[f64; 3]; SH_COUNT],
}

impl ShEnvironment {
    pub fn weight(&self, j: usize) -> DVec3 {
        DVec3::from_array(self.coeffs[j])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("environment serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Linear RGB image held in f64 so the solve is not limited by storage
/// precision.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<DVec3>,
}

impl RgbImage {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![DVec3::ZERO; (width * height) as usize],
        }
    }

    pub fn from_buf(img: &ImageBuf) -> Result<Self> {
        if img.channels != 3 {
            return Err(Error::InvalidArgument(format!("expected 3 channels, got {}", img.channels)));
        }
        let data = img.data.chunks_exact(3).map(|p| DVec3::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect();
        Ok(Self {
            width: img.width,
            height: img.height,
            data,
        })
    }

    pub fn to_buf(&self) -> ImageBuf {
        ImageBuf::from_fn(self.width, self.height, 3, |x, y, p| {
            let c = self.data[(y * self.width + x) as usize];
            p.copy_from_slice(&[c.x as f32, c.y as f32, c.z as f32]);
        })
    }

    fn same_shape(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShBasisRenders {
    pub basis: Vec<RgbImage>,
    pub flash: RgbImage,
    /// Pixels whose ray hits the scene.
    pub hit: Vec<bool>,
}

impl ShBasisRenders {
    pub fn width(&self) -> u32 {
        self.flash.width
    }

    pub fn height(&self) -> u32 {
        self.flash.height
    }

    /// Weighted sum of the basis images.
    pub fn combine(&self, env: &ShEnvironment) -> RgbImage {
        let mut out = RgbImage::zeros(self.width(), self.height());
        for (j, b) in self.basis.iter().enumerate() {
            let w = env.weight(j);
            for (o, &v) in out.data.iter_mut().zip(&b.data) {
                *o += w * v;
            }
        }
        out
    }
}

/// Basis renders of `scene` seen from `camera`. The flash image uses the
/// intensity of `light`.
pub fn render_sh_basis<S: ShadingScene + ?Sized>(scene: &S, camera: &Camera, light: &CombinedLight, eps: f64) -> ShBasisRenders {
    let (w, h) = (camera.width(), camera.height());
    let px: Vec<Option<([DVec3; SH_COUNT], DVec3)>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let ray = camera.pixel_ray(i % w, i / w);
            let hit = surface_trace(&ray, scene, 0.0, f64::INFINITY, eps)?;
            let m = scene.material(hit.x, hit.region);
            let y = sh_basis(hit.normal);
            let basis = y.map(|yj| m.diffuse * yj.max(0.0));
            let flash = flash_shading(hit.x, ray.origin, hit.normal, m.diffuse, m.specular, m.roughness, light);
            Some((basis, flash))
        })
        .collect();
    let mut out = ShBasisRenders {
        basis: vec![RgbImage::zeros(w, h); SH_COUNT],
        flash: RgbImage::zeros(w, h),
        hit: vec![false; px.len()],
    };
    for (i, p) in px.into_iter().enumerate() {
        if let Some((basis, flash)) = p {
            out.hit[i] = true;
            out.flash.data[i] = flash;
            for (img, v) in out.basis.iter_mut().zip(basis) {
                img.data[i] = v;
            }
        }
    }
    out
}

/// Direct render under the clamped linear ambient of `env`, flash off.
pub fn render_environment<S: ShadingScene + ?Sized>(scene: &S, camera: &Camera, env: &ShEnvironment, eps: f64) -> RgbImage {
    let (w, h) = (camera.width(), camera.height());
    let data = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let ray = camera.pixel_ray(i % w, i / w);
            let Some(hit) = surface_trace(&ray, scene, 0.0, f64::INFINITY, eps) else {
                return DVec3::ZERO;
            };
            let m = scene.material(hit.x, hit.region);
            let y = sh_basis(hit.normal);
            let mut shading = DVec3::ZERO;
            for (j, yj) in y.iter().enumerate() {
                shading += env.weight(j) * yj.max(0.0);
            }
            m.diffuse * shading
        })
        .collect();
    RgbImage { width: w, height: h, data }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShSolve {
    pub env: ShEnvironment,
    /// RMS residual per channel over the solved pixels.
    pub residual: [f64; 3],
    /// Numerical rank per channel.
    pub rank: [usize; 3],
    pub rank_deficient: bool,
    pub pixels: usize,
}

const RANK_TOLERANCE: f64 = 1e-10;

/// Least-squares SH weights reproducing `target` from the basis renders,
/// per channel, over hit pixels inside `mask`. Rank-deficient systems get
/// the minimum-norm solution.
pub fn solve_sh_weights(basis: &ShBasisRenders, target: &RgbImage, mask: Option<&[bool]>) -> Result<ShSolve> {
    if !target.same_shape(&basis.flash) {
        return Err(Error::InvalidArgument(format!(
            "target is {}x{} but basis renders are {}x{}",
            target.width,
            target.height,
            basis.width(),
            basis.height()
        )));
    }
    if let Some(m) = mask {
        if m.len() != basis.hit.len() {
            return Err(Error::InvalidArgument(format!("mask has {} entries, expected {}", m.len(), basis.hit.len())));
        }
    }
    let rows: Vec<usize> = (0..basis.hit.len()).filter(|&i| basis.hit[i] && mask.map_or(true, |m| m[i])).collect();
    let mut out = ShSolve {
        env: ShEnvironment::default(),
        residual: [0.0; 3],
        rank: [0; 3],
        rank_deficient: false,
        pixels: rows.len(),
    };
    if rows.is_empty() {
        out.rank_deficient = true;
        return Ok(out);
    }
    for ch in 0..3 {
        let a = DMatrix::from_fn(rows.len(), SH_COUNT, |r, j| basis.basis[j].data[rows[r]][ch]);
        let b = DVector::from_fn(rows.len(), |r, _| target.data[rows[r]][ch]);
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let tol = smax * RANK_TOLERANCE;
        let rank = svd.singular_values.iter().filter(|&&s| s > tol && s > 0.0).count();
        let x = if rank == 0 {
            DVector::zeros(SH_COUNT)
        } else {
            svd.solve(&b, tol).map_err(|e| Error::Invariant(format!("SVD solve failed: {e}")))?
        };
        for j in 0..SH_COUNT {
            out.env.coeffs[j][ch] = x[j];
        }
        let r = &a * &x - &b;
        out.residual[ch] = (r.norm_squared() / rows.len() as f64).sqrt();
        out.rank[ch] = rank;
        out.rank_deficient |= rank < SH_COUNT;
    }
    Ok(out)
}

/// `max(tgt / max(src, floor) * frame, 0)` per pixel and channel.
pub fn ratio_relight(src: &ImageBuf, tgt: &ImageBuf, frame: &ImageBuf, floor: f64) -> Result<ImageBuf> {
    if !(floor > 0.0) {
        return Err(Error::InvalidArgument(format!("ratio floor must be positive, got {floor}")));
    }
    if !src.same_shape(tgt) || !src.same_shape(frame) {
        return Err(Error::InvalidArgument("ratio relight images differ in shape".into()));
    }
    let floor = floor as f32;
    let mut out = frame.clone();
    out.data.par_iter_mut().zip(&src.data).zip(&tgt.data).for_each(|((o, &s), &t)| {
        let v = t / s.max(floor) * *o;
        // `max` also maps NaN to zero.
        *o = if v.is_finite() { v.max(0.0) } else { 0.0 };
    });
    Ok(out)
}
