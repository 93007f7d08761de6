//! Hybrid geometry: a grid SDF for the non-eye region unioned with two
//! analytic eyeball spheres.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics;
use crate::error::{Error, Result};
use crate::grid::DenseGrid;
use crate::math::DVec3;

pub const SDF_MAGIC: &[u8; 4] = b"HIRG";

/// Fallback normal returned where the SDF gradient vanishes.
pub const FALLBACK_NORMAL: DVec3 = DVec3::Z;

/// Anything that can report a signed distance and its spatial gradient.
pub trait SdfField: Send + Sync {
    fn sdf(&self, x: DVec3) -> f64;

    fn sdf_grad(&self, x: DVec3) -> (f64, DVec3);
}

/// Which component of the union owns a point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    /// Eyeball spheres.
    Eye,
    /// Everything else, represented by the grid.
    Surface,
}

/// Attribute chooser keyed on which component SDF is smaller. Ties go to
/// the eye branch.
#[inline]
pub fn select<T>(eye: T, surface: T, sdf_eye: f64, sdf_surface: f64) -> T {
    if sdf_eye <= sdf_surface {
        eye
    } else {
        surface
    }
}

#[inline]
pub fn region_of(sdf_eye: f64, sdf_surface: f64) -> Region {
    select(Region::Eye, Region::Surface, sdf_eye, sdf_surface)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereEyeballs {
    pub left: DVec3,
    pub right: DVec3,
    pub radius: f64,
}

impl SphereEyeballs {
    pub fn new(left: DVec3, right: DVec3, radius: f64) -> Result<Self> {
        let inside = |p: DVec3| p.abs().max_element() <= 1.0;
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Config(format!("eyeball radius must be positive, got {radius}")));
        }
        if !inside(left) || !inside(right) {
            return Err(Error::Config("eyeball centers must lie inside [-1,1]^3".into()));
        }
        Ok(Self { left, right, radius })
    }

    /// Center of the sphere nearer to `x` (left on ties).
    #[inline]
    pub fn nearest_center(&self, x: DVec3) -> DVec3 {
        if (x - self.left).length() <= (x - self.right).length() {
            self.left
        } else {
            self.right
        }
    }

    /// Analytic SDF and gradient of the two-sphere union.
    #[inline]
    pub fn sdf_grad(&self, x: DVec3) -> (f64, DVec3) {
        let c = self.nearest_center(x);
        let d = x - c;
        let len = d.length();
        let grad = if len > 0.0 { d / len } else { DVec3::ZERO };
        (len - self.radius, grad)
    }
}

/// `min(|x - p_l| - r, |x - p_r| - r)`.
#[inline]
pub fn sphere_sdf(x: DVec3, eyes: &SphereEyeballs) -> f64 {
    ((x - eyes.left).length() - eyes.radius).min((x - eyes.right).length() - eyes.radius)
}

/// Grid-backed SDF for the non-eye region.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfGridField {
    grid: DenseGrid,
}

impl SdfGridField {
    pub fn new(resolutions: &[usize]) -> Result<Self> {
        let weights = vec![1.0; resolutions.len()];
        Self::with_weights(resolutions, &weights)
    }

    pub fn with_weights(resolutions: &[usize], weights: &[f64]) -> Result<Self> {
        Ok(Self {
            grid: DenseGrid::new(resolutions, weights, 1)?,
        })
    }

    pub fn from_grid(grid: DenseGrid) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::Config(format!(
                "SDF grid must have 1 channel, found {}",
                grid.channels()
            )));
        }
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &DenseGrid {
        &self.grid
    }

    pub fn grid_mut(&mut self) -> &mut DenseGrid {
        &mut self.grid
    }

    /// Initializes the field to `|x| - r0`: the coarsest level carries the
    /// sphere (divided by its level weight), all finer levels are zeroed.
    pub fn init_sphere(&mut self, r0: f64) -> Result<()> {
        if !(r0 > 0.0 && r0 < 1.0) {
            return Err(Error::InvalidArgument(format!("sphere radius {r0} outside (0,1)")));
        }
        let coarsest = self
            .grid
            .levels()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.spacing().total_cmp(&b.1.spacing()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        let levels = self.grid.levels().to_vec();
        let values = self.grid.values_mut();
        values.iter_mut().for_each(|v| *v = 0.0);
        let level = &levels[coarsest];
        if level.weight == 0.0 {
            return Err(Error::Config("coarsest level has zero weight".into()));
        }
        let res = level.res;
        for k in 0..res {
            for j in 0..res {
                for i in 0..res {
                    let p = level.vertex_position(i, j, k);
                    values[level.vertex_offset() + i + res * (j + res * k)] =
                        (p.length() - r0) / level.weight;
                }
            }
        }
        Ok(())
    }

    /// Diagonal of one voxel of the coarsest level.
    pub fn coarsest_voxel_diagonal(&self) -> f64 {
        self.grid.coarsest_spacing() * 3f64.sqrt()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.grid
            .write_to(SDF_MAGIC, BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_grid(DenseGrid::read_from(SDF_MAGIC, path, BufReader::new(f))?)
    }
}

impl SdfField for SdfGridField {
    #[inline]
    fn sdf(&self, x: DVec3) -> f64 {
        self.grid.query(x, 0)
    }

    #[inline]
    fn sdf_grad(&self, x: DVec3) -> (f64, DVec3) {
        self.grid.query_grad(x, 0)
    }
}

/// Exact SDF of a single sphere; handy as a reference field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereSdf {
    pub center: DVec3,
    pub radius: f64,
}

impl SdfField for SphereSdf {
    fn sdf(&self, x: DVec3) -> f64 {
        (x - self.center).length() - self.radius
    }

    fn sdf_grad(&self, x: DVec3) -> (f64, DVec3) {
        let d = x - self.center;
        let len = d.length();
        (len - self.radius, if len > 0.0 { d / len } else { DVec3::ZERO })
    }
}

/// Signed distance to the plane `n . x = offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneSdf {
    pub normal: DVec3,
    pub offset: f64,
}

impl SdfField for PlaneSdf {
    fn sdf(&self, x: DVec3) -> f64 {
        self.normal.dot(x) - self.offset
    }

    fn sdf_grad(&self, x: DVec3) -> (f64, DVec3) {
        (self.sdf(x), self.normal)
    }
}

/// Constant field; positive values model empty space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantSdf(pub f64);

impl SdfField for ConstantSdf {
    fn sdf(&self, _x: DVec3) -> f64 {
        self.0
    }

    fn sdf_grad(&self, _x: DVec3) -> (f64, DVec3) {
        (self.0, DVec3::ZERO)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnionSdf {
    pub sdf: f64,
    pub sdf_eye: f64,
    pub sdf_surface: f64,
}

impl UnionSdf {
    pub fn region(&self) -> Region {
        region_of(self.sdf_eye, self.sdf_surface)
    }
}

/// Union of the surface field and the eyeball spheres.
pub fn union_sdf<F: SdfField + ?Sized>(x: DVec3, field: &F, eyes: &SphereEyeballs) -> UnionSdf {
    let sdf_eye = sphere_sdf(x, eyes);
    let sdf_surface = field.sdf(x);
    UnionSdf {
        sdf: select(sdf_eye, sdf_surface, sdf_eye, sdf_surface),
        sdf_eye,
        sdf_surface,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub x: DVec3,
    pub t: f64,
    pub sdf_eye: f64,
    pub sdf_surface: f64,
    pub sdf: f64,
    pub normal: DVec3,
    pub region: Region,
}

/// Normalizes an SDF gradient, falling back to `+z` when it vanishes.
#[inline]
pub fn normalize_gradient(g: DVec3) -> DVec3 {
    let len = g.length();
    if len > 1e-12 && len.is_finite() {
        g / len
    } else {
        diagnostics::degenerate_normal();
        FALLBACK_NORMAL
    }
}

/// Evaluates the union at `x` together with the normal of the selected branch.
pub fn sample_point<F: SdfField + ?Sized>(
    x: DVec3,
    t: f64,
    field: &F,
    eyes: &SphereEyeballs,
) -> SamplePoint {
    let (sdf_eye, g_eye) = eyes.sdf_grad(x);
    let (sdf_surface, g_surface) = field.sdf_grad(x);
    let region = region_of(sdf_eye, sdf_surface);
    let g = select(g_eye, g_surface, sdf_eye, sdf_surface);
    SamplePoint {
        x,
        t,
        sdf_eye,
        sdf_surface,
        sdf: select(sdf_eye, sdf_surface, sdf_eye, sdf_surface),
        normal: normalize_gradient(g),
        region,
    }
}

/// Unit normal of the union SDF at `x`.
pub fn normal<F: SdfField + ?Sized>(x: DVec3, field: &F, eyes: &SphereEyeballs) -> DVec3 {
    sample_point(x, 0.0, field, eyes).normal
}
