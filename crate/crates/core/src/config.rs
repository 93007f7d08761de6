//! Whole-pipeline configuration: named presets overlaid by a TOML file.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::synthetic::SynthOptions;
use crate::error::{Error, Result};
use crate::export::ExportConfig;
use crate::gradcheck::GradcheckConfig;
use crate::optimizer::{InitConfig, TrainConfig};
use crate::relight::DEFAULT_RATIO_FLOOR;
use crate::scene::ParamGroup;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-length schedule on the 16-view 64x64 synthetic capture.
    #[default]
    Full,
    /// 5000 iterations on the same capture, two grid levels.
    Desk,
    /// Seconds-scale runs for smoke tests.
    Small,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Full, Preset::Desk, Preset::Small];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Desk => "desk",
            Preset::Small => "small",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}, expected full, desk or small")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelightConfig {
    pub floor: f64,
    pub surface_eps: f64,
}

impl Default for RelightConfig {
    fn default() -> Self {
        Self {
            floor: DEFAULT_RATIO_FLOOR,
            surface_eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub synth: SynthOptions,
    pub init: InitConfig,
    pub train: TrainConfig,
    pub export: ExportConfig,
    pub relight: RelightConfig,
    pub gradcheck: GradcheckConfig,
}

impl PipelineConfig {
    pub fn preset(p: Preset) -> Self {
        let mut c = Self::default();
        match p {
            Preset::Full => {}
            Preset::Desk => {
                c.init.resolutions = vec![16, 32];
                c.train = desk_train(TrainConfig::scaled(5000, 4000));
            }
            Preset::Small => {
                c.synth.views = 8;
                c.synth.width = 32;
                c.synth.height = 32;
                c.init.resolutions = vec![16, 32];
                c.train = desk_train(TrainConfig {
                    rays_per_batch: 256,
                    samples_per_ray: 32,
                    ..TrainConfig::scaled(120, 90)
                });
                c.export.resolution = 64;
                c.export.texture_size = 1024;
                c.gradcheck.scenes = 4;
            }
        }
        c
    }

    /// `base` with the tables of `text` merged over it key by key.
    pub fn overlay(base: &Self, text: &str, origin: &Path) -> Result<Self> {
        let patch: toml::Table = toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::Invariant(format!("config does not serialize: {e}")))?;
        merge(&mut merged, patch);
        let out: Self = merged.try_into().map_err(|e: toml::de::Error| Error::format(origin, e.to_string()))?;
        out.validate()?;
        Ok(out)
    }

    pub fn load(base: &Self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::overlay(base, &text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.synth.views < 4 || self.synth.width == 0 || self.synth.height == 0 {
            return Err(Error::Config("synthetic capture needs at least 4 views of nonzero size".into()));
        }
        if self.init.resolutions.is_empty() {
            return Err(Error::Config("init.resolutions is empty".into()));
        }
        if self.export.resolution < 32 || self.export.texture_size == 0 {
            return Err(Error::Config("export.resolution must be at least 32 and texture_size positive".into()));
        }
        if !(self.relight.floor > 0.0) {
            return Err(Error::Config(format!("relight.floor must be positive, got {}", self.relight.floor)));
        }
        Ok(())
    }
}

/// Short schedules leave the coarse grids little time: the density floor
/// stops `beta` from collapsing before the geometry settles, and the
/// reflectance grid learns ten times faster than the shared rate.
fn desk_train(t: TrainConfig) -> TrainConfig {
    let mut lr_scale = t.lr_scale.clone();
    lr_scale.insert(ParamGroup::Reflectance, 10.0);
    TrainConfig {
        beta_min: 0.005,
        lr_scale,
        ..t
    }
}

fn merge(into: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in Preset::ALL {
            let c = PipelineConfig::preset(p);
            c.validate().unwrap();
            let back = PipelineConfig::overlay(&PipelineConfig::default(), &c.to_toml(), Path::new("x")).unwrap();
            assert_eq!(back, c, "{p}");
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("huge".parse::<Preset>().is_err());
    }

    #[test]
    fn full_preset_keeps_default_schedule() {
        let t = PipelineConfig::preset(Preset::Full).train;
        assert_eq!((t.total_iters, t.stage1_iters, t.lr_decay_every), (40_000, 30_000, 15_000));
        let d = PipelineConfig::preset(Preset::Desk).train;
        assert_eq!((d.total_iters, d.stage1_iters, d.lr_decay_every), (5000, 4000, 1875));
    }

    #[test]
    fn overlay_changes_only_named_keys() {
        let base = PipelineConfig::preset(Preset::Small);
        let c = PipelineConfig::overlay(&base, "[train]\nlr0 = 0.002\n[synth]\nviews = 6\n", Path::new("x")).unwrap();
        assert_eq!(c.train.lr0, 0.002);
        assert_eq!(c.synth.views, 6);
        assert_eq!(c.train.total_iters, base.train.total_iters);
        assert_eq!(c.export, base.export);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let base = PipelineConfig::default();
        assert!(PipelineConfig::overlay(&base, "[train]\nlr_zero = 1\n", Path::new("x")).is_err());
        assert!(PipelineConfig::overlay(&base, "[bogus]\n", Path::new("x")).is_err());
        let e = PipelineConfig::overlay(&base, "[train]\nstage1_iters = 50000\n", Path::new("x")).unwrap_err();
        assert!(e.to_string().contains("stage1_iters"));
    }
}
