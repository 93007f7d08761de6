//! Training objective terms and their stage-dependent weighting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::geometry::{normalize_gradient, SdfField};
use crate::math::{uniform_sphere, DVec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    One,
    Two,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::One => "1",
            Stage::Two => "2",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub mask: f64,
    pub eikonal: f64,
    pub smooth_hair: f64,
    pub smooth_other: f64,
    pub comp: f64,
    pub reflectance: f64,
    pub stage: Stage,
}

impl LossWeights {
    pub fn stage_one() -> Self {
        Self {
            l1: 1.0,
            mask: 1.0,
            eikonal: 1.0,
            smooth_hair: 0.5,
            smooth_other: 0.02,
            comp: 1.0,
            reflectance: 0.5,
            stage: Stage::One,
        }
    }

    /// Photometric and reflectance terms only.
    pub fn stage_two() -> Self {
        Self {
            l1: 1.0,
            mask: 0.0,
            eikonal: 0.0,
            smooth_hair: 0.0,
            smooth_other: 0.0,
            comp: 0.0,
            reflectance: 0.01,
            stage: Stage::Two,
        }
    }

    pub fn zero(stage: Stage) -> Self {
        Self {
            l1: 0.0,
            mask: 0.0,
            eikonal: 0.0,
            smooth_hair: 0.0,
            smooth_other: 0.0,
            comp: 0.0,
            reflectance: 0.0,
            stage,
        }
    }

    /// Weights actually applied: geometry terms are inactive in stage two.
    pub fn effective(&self) -> Self {
        match self.stage {
            Stage::One => *self,
            Stage::Two => Self {
                mask: 0.0,
                eikonal: 0.0,
                smooth_hair: 0.0,
                smooth_other: 0.0,
                comp: 0.0,
                ..*self
            },
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let all = [
            self.l1,
            self.mask,
            self.eikonal,
            self.smooth_hair,
            self.smooth_other,
            self.comp,
            self.reflectance,
        ];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(crate::Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted value of every term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l1: f64,
    pub mask: f64,
    pub eikonal: f64,
    pub smooth_hair: f64,
    pub smooth_other: f64,
    pub comp: f64,
    pub reflectance: f64,
}

impl LossTerms {
    pub fn add(&mut self, o: &LossTerms) {
        self.l1 += o.l1;
        self.mask += o.mask;
        self.eikonal += o.eikonal;
        self.smooth_hair += o.smooth_hair;
        self.smooth_other += o.smooth_other;
        self.comp += o.comp;
        self.reflectance += o.reflectance;
    }

    pub const NAMES: [&'static str; 7] = ["l1", "mask", "eikonal", "smooth_hair", "smooth_other", "comp", "reflectance"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.l1,
            self.mask,
            self.eikonal,
            self.smooth_hair,
            self.smooth_other,
            self.comp,
            self.reflectance,
        ]
    }
}

/// Weighted sum of the active terms and the weighted breakdown.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> (f64, LossTerms) {
    let w = weights.effective();
    let weighted = LossTerms {
        l1: w.l1 * terms.l1,
        mask: w.mask * terms.mask,
        eikonal: w.eikonal * terms.eikonal,
        smooth_hair: w.smooth_hair * terms.smooth_hair,
        smooth_other: w.smooth_other * terms.smooth_other,
        comp: w.comp * terms.comp,
        reflectance: w.reflectance * terms.reflectance,
    };
    (weighted.values().iter().sum(), weighted)
}

#[inline]
fn mean(sum: f64, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mean absolute difference over rays and channels.
pub fn photometric_l1(rendered: &[DVec3], target: &[DVec3]) -> f64 {
    assert_eq!(rendered.len(), target.len(), "photometric_l1: batch shape mismatch");
    let s: f64 = rendered.iter().zip(target).map(|(a, b)| (*a - *b).abs().element_sum()).sum();
    mean(s, 3 * rendered.len())
}

pub fn mask_loss(opacity: &[f64], target: &[f64]) -> f64 {
    assert_eq!(opacity.len(), target.len(), "mask_loss: batch shape mismatch");
    mean(opacity.iter().zip(target).map(|(a, b)| (a - b).abs()).sum(), opacity.len())
}

pub fn eikonal_loss(gradients: &[DVec3]) -> f64 {
    mean(gradients.iter().map(|g| (g.length() - 1.0).powi(2)).sum(), gradients.len())
}

/// Mean of `1 - n(x) . n(x + eps u)` for `u` uniform on the sphere, drawn
/// independently per point.
pub fn normal_smooth_loss<F: SdfField + ?Sized>(points: &[DVec3], field: &F, eps: f64, rng: &mut impl Rng) -> f64 {
    let s: f64 = points
        .iter()
        .map(|&x| {
            let u = uniform_sphere(rng.gen(), rng.gen());
            let a = normalize_gradient(field.sdf_grad(x).1);
            let b = normalize_gradient(field.sdf_grad(x + u * eps).1);
            1.0 - a.dot(b)
        })
        .sum();
    mean(s, points.len())
}

/// Mean L1 on the eye opacity plus mean L1 on the surface opacity.
pub fn composition_loss(opacity_eye: &[f64], opacity_surface: &[f64], mask_eye: &[f64], mask_surface: &[f64]) -> f64 {
    mask_loss(opacity_eye, mask_eye) + mask_loss(opacity_surface, mask_surface)
}

/// Target for the reflectance prior: `None` for rays the prior ignores.
#[inline]
pub fn reflectance_target(label: Label, pseudo: f64) -> Option<f64> {
    match label {
        Label::Eye => None,
        Label::Hair => Some(0.0),
        Label::Skin | Label::Background => Some(pseudo),
    }
}

/// Mean over non-eye rays of `|k s_hat - s_pseudo|`, with hair forced to zero.
pub fn reflectance_reg(rendered_spec: &[f64], pseudo_spec: &[f64], labels: &[Label], k: f64) -> f64 {
    assert!(rendered_spec.len() == pseudo_spec.len() && pseudo_spec.len() == labels.len());
    let mut sum = 0.0;
    let mut n = 0;
    for ((&s, &p), &l) in rendered_spec.iter().zip(pseudo_spec).zip(labels) {
        if let Some(target) = reflectance_target(l, p) {
            sum += (k * s - target).abs();
            n += 1;
        }
    }
    mean(sum, n)
}
