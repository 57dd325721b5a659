//! Pipeline configuration file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use gridpoint_core::detect::{ClassicalParams, DetectParams};
use gridpoint_core::eval::EvalParams;
use gridpoint_core::label::{AdaptiveThreshold, LabelParams};
use gridpoint_core::patches::AugmentPolicy;
use gridpoint_core::pattern::{Canvas, GridLayout};
use gridpoint_core::scene::{surface_preset, Albedo, Dims, Photometry};
use gridpoint_core::seed;
use gridpoint_net::{ArchSpec, HyperParams};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub deterministic: bool,
    pub pattern: PatternSection,
    pub scenes: Vec<SceneConfig>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ArchSpec,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub label: ThresholdSection,
    #[serde(default)]
    pub classical: ThresholdSection,
    #[serde(default)]
    pub detect: DetectParams,
    #[serde(default)]
    pub eval: EvalParams,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSection {
    pub width: usize,
    pub height: usize,
    pub spacing_x: f64,
    pub spacing_y: f64,
    pub slit_width: f64,
    /// Defaults to as many slits as fit the canvas.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_vertical: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_horizontal: Option<usize>,
    #[serde(default = "default_k")]
    pub debruijn_k: u32,
}

fn default_k() -> u32 {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub id: String,
    pub split: Split,
    /// One of the named surface presets.
    pub surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub albedo: Option<Albedo>,
    #[serde(default)]
    pub ambient: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub psf_sigma: f64,
    /// Defaults to a seed derived from the run seed and the scene's position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub patch_size: usize,
    pub val_fraction: f64,
    /// `identity`, `geometric`, `photometric` or `full`.
    pub augment: String,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            patch_size: gridpoint_core::patches::PATCH_SIZE,
            val_fraction: 0.2,
            augment: "full".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// `desk` or `paper`; the other fields override it.
    pub profile: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pos_weight: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            profile: "desk".into(),
            learning_rate: None,
            batch_size: None,
            epochs: None,
            steps_per_epoch: None,
            pos_weight: None,
        }
    }
}

/// Smoothing plus adaptive threshold. Window and offset default to values
/// derived from the slit pitch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSection {
    pub blur_sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<f32>,
}

impl Default for ThresholdSection {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            window: None,
            offset: None,
        }
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub profile: Option<String>,
    pub seed: Option<u64>,
    pub deterministic: bool,
}

/// Seed paths per stage.
pub(crate) mod seeds {
    pub const PATTERN: u64 = 1;
    pub const SCENE: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const TRAIN: u64 = 4;
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at `{path}`: {}", e.into_inner().message().trim()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(mut self, o: &Overrides) -> Result<Self> {
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(p) = &o.profile {
            self.train.profile = p.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        self.deterministic |= o.deterministic;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, msg: String| Err(CliError::Config(format!("at `{path}`: {msg}")));
        let p = &self.pattern;
        if p.width == 0 || p.height == 0 {
            return err("pattern", "width and height must be positive".into());
        }
        if let Err(e) = gridpoint_core::pattern::make_grid_spec(&self.grid_layout()) {
            return err("pattern", e.to_string());
        }
        let n = self.dataset.patch_size;
        if n == 0 || n % self.model.size_multiple() != 0 {
            return err("dataset.patch_size", format!("{n} is not a positive multiple of {}", self.model.size_multiple()));
        }
        if p.width % n != 0 || p.height % n != 0 {
            return err("dataset.patch_size", format!("{n} does not tile the {}x{} images", p.width, p.height));
        }
        if !(self.dataset.val_fraction > 0.0 && self.dataset.val_fraction < 1.0) {
            return err("dataset.val_fraction", format!("{} is not in (0, 1)", self.dataset.val_fraction));
        }
        if AugmentPolicy::by_id(&self.dataset.augment).is_none() {
            return err("dataset.augment", format!("unknown policy `{}`", self.dataset.augment));
        }
        if let Err(e) = self.model.validate() {
            return err("model", e.to_string());
        }
        match self.hyper() {
            Ok(hp) => {
                if let Err(e) = hp.validate() {
                    return err("train", e.to_string());
                }
            }
            Err(e) => return Err(e),
        }
        let mut ids = BTreeSet::new();
        for (i, s) in self.scenes.iter().enumerate() {
            let path = format!("scenes[{i}]");
            let safe = !s.id.is_empty() && s.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !safe || s.id == gridpoint_core::eval::AGGREGATE_SCENE {
                return err(&format!("{path}.id"), format!("`{}` must be a non-empty [A-Za-z0-9_-] name other than `all`", s.id));
            }
            if !ids.insert(s.id.as_str()) {
                return err(&format!("{path}.id"), format!("duplicate scene id `{}`", s.id));
            }
            if surface_preset(&s.surface, self.dims()).is_none() {
                return err(&format!("{path}.surface"), format!("unknown surface preset `{}`", s.surface));
            }
            if let Err(e) = self.photometry(s).validate() {
                return err(&path, e.to_string());
            }
        }
        if !self.scenes.iter().any(|s| s.split == Split::Train) {
            return err("scenes", "at least one scene needs split = \"train\"".into());
        }
        if !self.scenes.iter().any(|s| s.split == Split::Test) {
            return err("scenes", "at least one scene needs split = \"test\"".into());
        }
        for (path, t) in [("label", &self.label), ("classical", &self.classical)] {
            if let Some(w) = t.window {
                if w % 2 == 0 {
                    return err(&format!("{path}.window"), format!("{w} must be odd"));
                }
            }
            if !(t.blur_sigma >= 0.0) {
                return err(&format!("{path}.blur_sigma"), "must be >= 0".into());
            }
        }
        if !(self.eval.match_radius > 0.0 && self.eval.dev_threshold > 0.0) {
            return err("eval", "match_radius and dev_threshold must be positive".into());
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.pattern.width, self.pattern.height)
    }

    pub fn grid_layout(&self) -> GridLayout {
        let p = &self.pattern;
        let fit = |len: usize, pitch: f64| ((len as f64 / pitch).floor() as usize).saturating_sub(1);
        GridLayout {
            n_vertical: p.n_vertical.unwrap_or_else(|| fit(p.width, p.spacing_x)),
            n_horizontal: p.n_horizontal.unwrap_or_else(|| fit(p.height, p.spacing_y)),
            spacing_x: p.spacing_x,
            spacing_y: p.spacing_y,
            slit_width: p.slit_width,
            canvas: Canvas::new(p.width, p.height),
            debruijn_k: p.debruijn_k,
            seed: seed::derive(self.seed, &[seeds::PATTERN]),
        }
    }

    pub fn photometry(&self, s: &SceneConfig) -> Photometry {
        Photometry {
            albedo: s.albedo.clone().unwrap_or(Albedo::Constant { value: 1.0 }),
            ambient: s.ambient,
            noise_sigma: s.noise_sigma,
            psf_sigma: s.psf_sigma,
        }
    }

    pub fn scene_seed(&self, index: usize) -> u64 {
        self.scenes[index]
            .seed
            .unwrap_or_else(|| seed::derive(self.seed, &[seeds::SCENE, index as u64]))
    }

    pub fn scenes_in(&self, split: Split) -> impl Iterator<Item = &SceneConfig> {
        self.scenes.iter().filter(move |s| s.split == split)
    }

    fn threshold(&self, t: &ThresholdSection) -> AdaptiveThreshold {
        let base = AdaptiveThreshold::for_spacing(self.pattern.spacing_x.min(self.pattern.spacing_y));
        AdaptiveThreshold {
            window: t.window.unwrap_or(base.window),
            offset: t.offset.unwrap_or(base.offset),
        }
    }

    pub fn label_params(&self) -> LabelParams {
        LabelParams {
            blur_sigma: self.label.blur_sigma,
            threshold: self.threshold(&self.label),
        }
    }

    pub fn classical_params(&self) -> ClassicalParams {
        ClassicalParams {
            blur_sigma: self.classical.blur_sigma,
            threshold: self.threshold(&self.classical),
        }
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        AugmentPolicy::by_id(&self.dataset.augment).expect("validated")
    }

    pub fn hyper(&self) -> Result<HyperParams> {
        let t = &self.train;
        let base = HyperParams::by_name(&t.profile)
            .ok_or_else(|| CliError::Config(format!("at `train.profile`: unknown profile `{}` (desk, paper)", t.profile)))?;
        Ok(HyperParams {
            learning_rate: t.learning_rate.unwrap_or(base.learning_rate),
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            epochs: t.epochs.unwrap_or(base.epochs),
            steps_per_epoch: t.steps_per_epoch.unwrap_or(base.steps_per_epoch),
            pos_weight: t.pos_weight.or(base.pos_weight),
            seed: seed::derive(self.seed, &[seeds::TRAIN]),
        })
    }

    pub fn split_seed(&self) -> u64 {
        seed::derive(self.seed, &[seeds::SPLIT])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3

[pattern]
width = 128
height = 128
spacing_x = 13
spacing_y = 25
slit_width = 3

[[scenes]]
id = "a"
split = "train"
surface = "plane"

[[scenes]]
id = "b"
split = "test"
surface = "ripple"
noise_sigma = 4.0
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = PipelineConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.dataset.patch_size, 64);
        assert_eq!(c.hyper().unwrap().batch_size, 16);
        assert_eq!(c.grid_layout().n_vertical, 8);
        assert_eq!(c.label_params().threshold.window, 27);
        let again = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let bad = MINIMAL.replace("noise_sigma", "noise_sigmma");
        let e = PipelineConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(e.contains("scenes[1]") && e.contains("noise_sigmma"), "{e}");
        let bad = format!("{MINIMAL}\n[train]\nepocs = 3\n");
        let e = PipelineConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(e.contains("train") && e.contains("epocs"), "{e}");
    }

    #[test]
    fn semantic_errors_name_their_path() {
        let cases = [
            (MINIMAL.replace("\"ripple\"", "\"saddle\""), "scenes[1].surface"),
            (format!("{MINIMAL}\n[dataset]\npatch_size = 60\n"), "dataset.patch_size"),
            (format!("{MINIMAL}\n[dataset]\npatch_size = 48\n"), "dataset.patch_size"),
            (format!("{MINIMAL}\n[train]\nprofile = \"huge\"\n"), "train.profile"),
            (MINIMAL.replace("id = \"b\"", "id = \"a\""), "scenes[1].id"),
            (MINIMAL.replace("\"test\"", "\"train\""), "scenes"),
        ];
        for (text, path) in cases {
            let e = PipelineConfig::from_toml(&text).unwrap_err();
            assert!(matches!(e, CliError::Config(_)));
            assert!(e.to_string().contains(path), "{path}: {e}");
        }
    }

    #[test]
    fn overrides_apply() {
        let c = PipelineConfig::from_toml(MINIMAL).unwrap();
        let o = Overrides {
            output_dir: Some("x".into()),
            profile: Some("paper".into()),
            seed: Some(9),
            deterministic: true,
        };
        let c = c.apply(&o).unwrap();
        assert_eq!(c.hyper().unwrap().batch_size, 128);
        assert_eq!(c.seed, 9);
        assert!(c.deterministic);
    }

    #[test]
    fn shipped_configs_validate() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let desk = PipelineConfig::load(dir.join("desk.toml")).unwrap();
        assert_eq!(desk.hyper().unwrap().epochs, 10);
        assert_eq!(desk.scenes_in(Split::Test).count(), 2);
        let paper = PipelineConfig::load(dir.join("paper.toml")).unwrap();
        assert_eq!(paper.dims(), Dims::new(1664, 1664));
        assert_eq!(paper.hyper().unwrap().batch_size, 128);
        assert_eq!(paper.model, ArchSpec::default());
    }
}
