//! Lambertian diffuse plus GGX / Smith / Schlick specular, and the
//! grid-backed reflectance field feeding it.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{select, Region};
use crate::grid::DenseGrid;
use crate::math::{logit, sigmoid, DVec3};

pub const REFLECTANCE_MAGIC: &[u8; 4] = b"HIRR";
pub const REFLECTANCE_CHANNELS: usize = 5;
pub const ROUGHNESS_MIN: f64 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub diffuse: DVec3,
    pub specular: f64,
    pub roughness: f64,
}

/// Specular prior shared by both eyeballs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyePrior {
    pub specular: f64,
    pub roughness: f64,
}

impl Default for EyePrior {
    fn default() -> Self {
        Self {
            specular: 0.25,
            roughness: 0.1,
        }
    }
}

impl EyePrior {
    pub fn new(specular: f64, roughness: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&specular) || !(ROUGHNESS_MIN..=1.0).contains(&roughness) {
            return Err(Error::Config(format!(
                "eye prior out of range: specular {specular}, roughness {roughness}"
            )));
        }
        Ok(Self {
            specular,
            roughness,
        })
    }
}

/// GGX distribution, Smith masking and their derivatives with respect to
/// `a2 = roughness^4`.
#[inline]
fn ggx_d(nh: f64, a2: f64) -> (f64, f64) {
    let t = nh * nh * (a2 - 1.0) + 1.0;
    let d = a2 / (PI * t * t);
    let dd_da2 = (t - 2.0 * a2 * nh * nh) / (PI * t * t * t);
    (d, dd_da2)
}

#[inline]
fn smith_g1(x: f64, a2: f64) -> (f64, f64) {
    let q = (a2 + (1.0 - a2) * x * x).sqrt();
    let denom = x + q;
    let g = 2.0 * x / denom;
    let dq_da2 = (1.0 - x * x) / (2.0 * q);
    (g, -2.0 * x / (denom * denom) * dq_da2)
}

/// BRDF value for `(l, v, n)`: `c / pi + D G F / (4 (n.l)(n.v))` where the
/// specular term is white and `s` is the Fresnel reflectance at normal
/// incidence. Zero when either direction is below the horizon.
pub fn eval_brdf(l: DVec3, v: DVec3, n: DVec3, c: DVec3, s: f64, rho: f64) -> DVec3 {
    eval_brdf_with_grad(l, v, n, c, s, rho).0
}

/// Derivatives of [`eval_brdf`] with respect to its material parameters.
/// Every output channel `i` has `d/dc_j = delta_ij * d_diffuse`; the
/// specular terms are the same for all channels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BrdfGrad {
    pub d_diffuse: f64,
    pub d_specular: f64,
    pub d_roughness: f64,
}

pub fn eval_brdf_with_grad(
    l: DVec3,
    v: DVec3,
    n: DVec3,
    c: DVec3,
    s: f64,
    rho: f64,
) -> (DVec3, BrdfGrad) {
    let nl = n.dot(l);
    let nv = n.dot(v);
    if nl <= 0.0 || nv <= 0.0 {
        return (DVec3::ZERO, BrdfGrad::default());
    }
    let h = (l + v).normalize();
    let nh = n.dot(h).max(0.0);
    // Averaged so that swapping l and v is bit-exact.
    let hl = (0.5 * (h.dot(l) + h.dot(v))).clamp(0.0, 1.0);
    let a2 = rho.powi(4);
    let da2 = 4.0 * rho.powi(3);
    let (d, dd) = ggx_d(nh, a2);
    let (gl, dgl) = smith_g1(nl, a2);
    let (gv, dgv) = smith_g1(nv, a2);
    let fw = (1.0 - hl).powi(5);
    // Schlick with F90 = saturate(50 F0): exact Lambertian at s = 0.
    let (f90, df90) = if 50.0 * s < 1.0 { (50.0 * s, 50.0) } else { (1.0, 0.0) };
    let f = s + (f90 - s) * fw;
    let norm = 1.0 / (4.0 * nl * nv);
    let g = gl * gv;
    let spec = d * g * f * norm;
    let d_spec_a2 = (dd * g + d * (dgl * gv + gl * dgv)) * f * norm;
    let value = (c / PI + DVec3::splat(spec)).max(DVec3::ZERO);
    (
        value,
        BrdfGrad {
            d_diffuse: 1.0 / PI,
            d_specular: d * g * (1.0 - fw + df90 * fw) * norm,
            d_roughness: d_spec_a2 * da2,
        },
    )
}

/// Specular lobe per unit F0 for a co-located light (`l = v`, so `h = v`
/// and Fresnel reduces to F0): `D(mu) G1(mu)^2 / (4 mu^2)` with
/// `mu = n . v`, plus derivatives in `mu` and roughness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColocatedLobe {
    pub value: f64,
    pub d_mu: f64,
    pub d_roughness: f64,
}

pub fn colocated_lobe(mu: f64, rho: f64) -> ColocatedLobe {
    if mu <= 0.0 {
        return ColocatedLobe {
            value: 0.0,
            d_mu: 0.0,
            d_roughness: 0.0,
        };
    }
    let a2 = rho.powi(4);
    let da2 = 4.0 * rho.powi(3);
    let (d, dd_a2) = ggx_d(mu, a2);
    let (g, dg_a2) = smith_g1(mu, a2);
    let t = mu * mu * (a2 - 1.0) + 1.0;
    let dd_mu = -4.0 * a2 * mu * (a2 - 1.0) / (PI * t * t * t);
    let q = (a2 + (1.0 - a2) * mu * mu).sqrt();
    let dq_mu = (1.0 - a2) * mu / q;
    let dg_mu = 2.0 * (q - mu * dq_mu) / ((mu + q) * (mu + q));
    let inv = 1.0 / (4.0 * mu * mu);
    let value = d * g * g * inv;
    let d_mu = (dd_mu * g * g + 2.0 * d * g * dg_mu) * inv - 2.0 * value / mu;
    let d_a2 = (dd_a2 * g * g + 2.0 * d * g * dg_a2) * inv;
    ColocatedLobe {
        value,
        d_mu,
        d_roughness: d_a2 * da2,
    }
}

/// Grid of raw reflectance channels: three diffuse logits, one specular
/// logit and one roughness logit per vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct ReflectanceField {
    grid: DenseGrid,
}

/// Activated material plus the derivative of each activated quantity with
/// respect to its raw channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivatedMaterial {
    pub material: Material,
    pub d_raw: [f64; REFLECTANCE_CHANNELS],
}

pub fn activate(raw: &[f64; REFLECTANCE_CHANNELS]) -> ActivatedMaterial {
    let c = [sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2])];
    let s = sigmoid(raw[3]);
    let r = sigmoid(raw[4]);
    ActivatedMaterial {
        material: Material {
            diffuse: DVec3::new(c[0], c[1], c[2]),
            specular: s,
            roughness: ROUGHNESS_MIN + (1.0 - ROUGHNESS_MIN) * r,
        },
        d_raw: [
            c[0] * (1.0 - c[0]),
            c[1] * (1.0 - c[1]),
            c[2] * (1.0 - c[2]),
            s * (1.0 - s),
            (1.0 - ROUGHNESS_MIN) * r * (1.0 - r),
        ],
    }
}

/// Raw channel values whose activation reproduces `m` (channels clamped
/// slightly inside the open ranges).
pub fn deactivate(m: &Material) -> [f64; REFLECTANCE_CHANNELS] {
    let p = |x: f64| logit(x.clamp(1e-4, 1.0 - 1e-4));
    [
        p(m.diffuse.x),
        p(m.diffuse.y),
        p(m.diffuse.z),
        p(m.specular),
        p((m.roughness - ROUGHNESS_MIN) / (1.0 - ROUGHNESS_MIN)),
    ]
}

impl ReflectanceField {
    pub fn new(resolutions: &[usize]) -> Result<Self> {
        let weights = vec![1.0; resolutions.len()];
        Ok(Self {
            grid: DenseGrid::new(resolutions, &weights, REFLECTANCE_CHANNELS)?,
        })
    }

    pub fn from_grid(grid: DenseGrid) -> Result<Self> {
        if grid.channels() != REFLECTANCE_CHANNELS {
            return Err(Error::Config(format!(
                "reflectance grid must have {REFLECTANCE_CHANNELS} channels, found {}",
                grid.channels()
            )));
        }
        Ok(Self { grid })
    }

    /// Sets a spatially constant material: the coarsest level carries the
    /// raw values, finer levels are zero.
    pub fn fill_constant(&mut self, m: &Material) {
        let raw = deactivate(m);
        let levels = self.grid.levels().to_vec();
        let coarsest = levels
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.spacing().total_cmp(&b.1.spacing()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        let values = self.grid.values_mut();
        values.iter_mut().for_each(|v| *v = 0.0);
        let level = &levels[coarsest];
        for vtx in 0..level.vertex_count() {
            let base = (level.vertex_offset() + vtx) * REFLECTANCE_CHANNELS;
            for ch in 0..REFLECTANCE_CHANNELS {
                values[base + ch] = raw[ch] / level.weight;
            }
        }
    }

    pub fn grid(&self) -> &DenseGrid {
        &self.grid
    }

    pub fn grid_mut(&mut self) -> &mut DenseGrid {
        &mut self.grid
    }

    pub fn raw_at(&self, x: DVec3) -> [f64; REFLECTANCE_CHANNELS] {
        let mut raw = [0.0; REFLECTANCE_CHANNELS];
        self.grid.query_all(x, &mut raw);
        raw
    }

    pub fn at(&self, x: DVec3) -> Material {
        activate(&self.raw_at(x)).material
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.grid
            .write_to(REFLECTANCE_MAGIC, BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_grid(DenseGrid::read_from(REFLECTANCE_MAGIC, path, BufReader::new(f))?)
    }
}

/// Material at a point of the hybrid scene: diffuse always comes from the
/// field, specular and roughness from the prior when the eye branch wins.
pub fn material_at(
    x: DVec3,
    field: &ReflectanceField,
    prior: &EyePrior,
    sdf_eye: f64,
    sdf_surface: f64,
) -> Material {
    let m = field.at(x);
    Material {
        diffuse: m.diffuse,
        specular: select(prior.specular, m.specular, sdf_eye, sdf_surface),
        roughness: select(prior.roughness, m.roughness, sdf_eye, sdf_surface),
    }
}

/// Same as [`material_at`] for a known region.
pub fn material_in_region(field_material: Material, prior: &EyePrior, region: Region) -> Material {
    match region {
        Region::Eye => Material {
            diffuse: field_material.diffuse,
            specular: prior.specular,
            roughness: prior.roughness,
        },
        Region::Surface => field_material,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{stream_rng, uniform_sphere};
    use rand::Rng;

    fn hemi(n: DVec3, rng: &mut impl Rng) -> DVec3 {
        let d = uniform_sphere(rng.gen(), rng.gen());
        if d.dot(n) < 0.0 {
            -d
        } else {
            d
        }
    }

    #[test]
    fn lambertian_when_specular_zero() {
        let n = DVec3::Z;
        let l = DVec3::new(0.3, 0.1, 0.9).normalize();
        let v = DVec3::new(-0.5, 0.2, 0.7).normalize();
        let c = DVec3::new(0.2, 0.5, 0.9);
        assert_eq!(eval_brdf(l, v, n, c, 0.0, 0.5), c / PI);
        let at_normal = eval_brdf(n, n, n, c, 0.0, 0.7);
        assert!((at_normal - c / PI).length() < 1e-15);
    }

    #[test]
    fn colocated_normal_incidence_closed_form() {
        // l = v = n, rho = 1: alpha = 1, D = 1/pi, G = 1, F = s.
        let s = 0.04;
        let f = eval_brdf(DVec3::Z, DVec3::Z, DVec3::Z, DVec3::ZERO, s, 1.0);
        let expected = (1.0 / PI) * 1.0 * s / 4.0;
        assert!((f.x - expected).abs() < 1e-15, "{} vs {expected}", f.x);
    }

    #[test]
    fn below_horizon_is_black() {
        let n = DVec3::Z;
        let v = DVec3::new(0.0, 0.6, 0.8);
        let l = DVec3::new(0.0, 0.6, -0.8);
        assert_eq!(eval_brdf(l, v, n, DVec3::ONE, 0.5, 0.3), DVec3::ZERO);
        assert_eq!(eval_brdf(v, l, n, DVec3::ONE, 0.5, 0.3), DVec3::ZERO);
    }

    #[test]
    fn hemispherical_energy_is_bounded() {
        // Cosine-weighted quadrature: integrand f * cos / pdf = f * pi.
        let n = DVec3::Z;
        for &rho in &[0.3, 0.5, 0.8, 1.0] {
            let mut rng = stream_rng(11, &[(rho * 100.0) as u64]);
            let samples = 10_000;
            let mut acc = 0.0;
            for _ in 0..samples {
                let (u1, u2): (f64, f64) = (rng.gen(), rng.gen());
                let r = u1.sqrt();
                let phi = 2.0 * PI * u2;
                let l = DVec3::new(r * phi.cos(), r * phi.sin(), (1.0 - u1).sqrt());
                acc += eval_brdf(l, n, n, DVec3::ONE, 0.04, rho).x * PI;
            }
            let albedo = acc / samples as f64;
            assert!(albedo <= 1.05, "rho {rho}: albedo {albedo}");
            assert!(albedo >= 1.0);
        }
    }

    #[test]
    fn reciprocity_and_nonnegativity() {
        let mut rng = stream_rng(5, &[]);
        for _ in 0..2000 {
            let n = uniform_sphere(rng.gen(), rng.gen());
            let l = hemi(n, &mut rng);
            let v = hemi(n, &mut rng);
            let c = DVec3::new(rng.gen(), rng.gen(), rng.gen());
            let s = rng.gen::<f64>();
            let rho = rng.gen_range(ROUGHNESS_MIN..1.0);
            let a = eval_brdf(l, v, n, c, s, rho);
            let b = eval_brdf(v, l, n, c, s, rho);
            assert_eq!(a, b);
            assert!(a.min_element() >= 0.0);
        }
    }

    #[test]
    fn smoother_lobes_are_brighter_at_normal_incidence() {
        let mut last = 0.0;
        for i in (4..=100).rev() {
            let rho = i as f64 / 100.0;
            let spec = eval_brdf(DVec3::Z, DVec3::Z, DVec3::Z, DVec3::ZERO, 0.3, rho).x;
            assert!(spec > last, "rho {rho}");
            last = spec;
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = stream_rng(9, &[]);
        let h = 1e-6;
        for _ in 0..200 {
            let n = uniform_sphere(rng.gen(), rng.gen());
            let l = hemi(n, &mut rng);
            let v = hemi(n, &mut rng);
            if n.dot(l) < 0.05 || n.dot(v) < 0.05 {
                continue;
            }
            let c = DVec3::new(rng.gen(), rng.gen(), rng.gen());
            let s = rng.gen_range(0.05..0.95);
            let rho = rng.gen_range(0.1..0.95);
            let (_, g) = eval_brdf_with_grad(l, v, n, c, s, rho);
            let fd_s = (eval_brdf(l, v, n, c, s + h, rho).x - eval_brdf(l, v, n, c, s - h, rho).x) / (2.0 * h);
            let fd_r = (eval_brdf(l, v, n, c, s, rho + h).x - eval_brdf(l, v, n, c, s, rho - h).x) / (2.0 * h);
            let fd_c = (eval_brdf(l, v, n, c + DVec3::X * h, s, rho).x
                - eval_brdf(l, v, n, c - DVec3::X * h, s, rho).x)
                / (2.0 * h);
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
            assert!(rel(g.d_specular, fd_s) < 1e-4, "s: {} vs {fd_s}", g.d_specular);
            assert!(rel(g.d_roughness, fd_r) < 1e-4, "rho: {} vs {fd_r}", g.d_roughness);
            assert!(rel(g.d_diffuse, fd_c) < 1e-4);
        }
    }

    #[test]
    fn colocated_lobe_matches_general_brdf_and_derivatives() {
        let h = 1e-6;
        for &(mu, rho) in &[(0.9, 0.3), (0.5, 0.6), (0.2, 0.9), (0.99, 0.1)] {
            let n = DVec3::Z;
            let v = DVec3::new((1.0 - mu * mu as f64).sqrt(), 0.0, mu);
            let lobe = colocated_lobe(mu, rho);
            let general = eval_brdf(v, v, n, DVec3::ZERO, 1.0, rho).x;
            assert!((lobe.value - general).abs() < 1e-10 * general.max(1.0));
            let fd_mu = (colocated_lobe(mu + h, rho).value - colocated_lobe(mu - h, rho).value) / (2.0 * h);
            let fd_r = (colocated_lobe(mu, rho + h).value - colocated_lobe(mu, rho - h).value) / (2.0 * h);
            assert!((lobe.d_mu - fd_mu).abs() < 1e-4 * fd_mu.abs().max(1.0));
            assert!((lobe.d_roughness - fd_r).abs() < 1e-4 * fd_r.abs().max(1.0));
        }
    }

    #[test]
    fn activation_ranges_hold_for_extreme_raw_values() {
        for &x in &[-1e6, -40.0, -1.0, 0.0, 2.0, 40.0, 1e6] {
            let m = activate(&[x; REFLECTANCE_CHANNELS]).material;
            assert!(m.diffuse.min_element() >= 0.0 && m.diffuse.max_element() <= 1.0);
            assert!((0.0..=1.0).contains(&m.specular));
            assert!(m.roughness >= ROUGHNESS_MIN && m.roughness <= 1.0);
        }
        let m = Material {
            diffuse: DVec3::new(0.2, 0.4, 0.6),
            specular: 0.3,
            roughness: 0.5,
        };
        let back = activate(&deactivate(&m)).material;
        assert!((back.diffuse - m.diffuse).length() < 1e-12);
        assert!((back.roughness - m.roughness).abs() < 1e-12);
    }

    #[test]
    fn material_selection_by_region() {
        let mut field = ReflectanceField::new(&[4]).unwrap();
        let m = Material {
            diffuse: DVec3::new(0.7, 0.5, 0.4),
            specular: 0.6,
            roughness: 0.45,
        };
        field.fill_constant(&m);
        let prior = EyePrior::new(0.2, 0.1).unwrap();
        let x = DVec3::new(0.1, 0.2, 0.3);
        let eye = material_at(x, &field, &prior, -0.05, 0.1);
        assert_eq!((eye.specular, eye.roughness), (0.2, 0.1));
        let surf = material_at(x, &field, &prior, 0.3, -0.1);
        assert!((surf.specular - 0.6).abs() < 1e-9 && (surf.roughness - 0.45).abs() < 1e-9);
        assert_eq!(eye.diffuse, surf.diffuse);
    }
}
