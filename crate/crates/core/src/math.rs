//! Small numeric helpers shared across the pipeline.

pub use glam::DVec3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, stable for large |x|.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn inverse_softplus(y: f64) -> f64 {
    assert!(y > 0.0, "softplus output must be positive");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// sRGB-style display encoding used throughout: plain gamma 2.2.
pub const GAMMA: f64 = 2.2;

#[inline]
pub fn linearize(v: f64) -> f64 {
    v.max(0.0).powf(GAMMA)
}

#[inline]
pub fn gamma_encode(v: f64) -> f64 {
    v.max(0.0).powf(1.0 / GAMMA)
}

/// IEC 61966-2-1 sRGB transfer, used for exported albedo maps.
#[inline]
pub fn srgb_encode(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

#[inline]
pub fn srgb_decode(e: f64) -> f64 {
    let e = e.clamp(0.0, 1.0);
    if e <= 0.040_45 {
        e / 12.92
    } else {
        ((e + 0.055) / 1.055).powf(2.4)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: DVec3,
    pub direction: DVec3,
}

impl Ray {
    pub fn new(origin: DVec3, direction: DVec3) -> Self {
        Self { origin, direction }
    }

    #[inline]
    pub fn at(&self, t: f64) -> DVec3 {
        self.origin + self.direction * t
    }

    /// Parametric interval where the ray is inside the `[-1,1]^3` cube.
    pub fn cube_interval(&self) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for axis in 0..3 {
            let o = self.origin[axis];
            let d = self.direction[axis];
            if d.abs() < 1e-15 {
                if !(-1.0..=1.0).contains(&o) {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (a, b) = ((-1.0 - o) * inv, (1.0 - o) * inv);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        let t0 = t0.max(0.0);
        (t1 > t0).then_some((t0, t1))
    }
}

/// Deterministic per-item RNG derived from a run seed and a stream of integer keys.
pub fn stream_rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &k in keys {
        h = splitmix(h ^ k.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform direction on the unit sphere.
pub fn uniform_sphere(u1: f64, u2: f64) -> DVec3 {
    let z = 1.0 - 2.0 * u1;
    let r = (1.0 - z * z).max(0.0).sqrt();
    let phi = 2.0 * std::f64::consts::PI * u2;
    DVec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// `(I - n n^T) / len` applied to `v`: the Jacobian of `g / |g|` contracted with `v`.
#[inline]
pub fn normalize_backward(normal: DVec3, length: f64, upstream: DVec3) -> DVec3 {
    (upstream - normal * normal.dot(upstream)) / length
}
