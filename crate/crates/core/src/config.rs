//! TOML experiment configuration.
//!
//! ```toml
//! [generator]
//! preset = "toy"          # or: layers = [{ channels = 32, kind = "conv", resolution = 4 }, ...]
//! weight_seed = 42
//!
//! [planted]               # optional
//! mixing_noise = 0.0
//! seed = 0
//! plants = [{ channel = [3, 4], target = "mouth-redness", effect = 2.0 }]
//!
//! [detection]
//! color = "mean"
//! n_target = 30
//! ```
//!
//! `[layout]` and `[[probes]]` default to the built-in face layout and probes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::{ColorReduction, Exclusions};
use crate::error::{Error, Result};
use crate::generator::{
    make_planted, Generator, GeneratorConfig, GroundTruth, LayerSpec, PlantedSpec, StyleLayer,
};
use crate::probes::{LinearProbe, ProbeSpec, RegionLayout};

fn default_preset() -> Option<String> {
    Some("toy".into())
}

fn default_dim() -> usize {
    16
}

fn default_weight_seed() -> u64 {
    42
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    #[serde(default = "default_preset")]
    pub preset: Option<String>,
    /// Explicit layers; overrides `preset`.
    #[serde(default)]
    pub layers: Option<Vec<StyleLayer>>,
    #[serde(default)]
    pub detection_cut: Option<usize>,
    #[serde(default = "default_dim")]
    pub z_dim: usize,
    #[serde(default = "default_dim")]
    pub w_dim: usize,
    #[serde(default = "default_weight_seed")]
    pub weight_seed: u64,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            preset: default_preset(),
            layers: None,
            detection_cut: None,
            z_dim: 16,
            w_dim: 16,
            weight_seed: 42,
        }
    }
}

impl GeneratorSection {
    pub fn layer_spec(&self) -> Result<LayerSpec> {
        match (&self.layers, &self.preset) {
            (Some(layers), _) => {
                let cut = self.detection_cut.unwrap_or(layers.len());
                LayerSpec::new("custom", layers.clone(), cut)
            }
            (None, Some(name)) => {
                let mut spec = LayerSpec::preset(name)?;
                if let Some(cut) = self.detection_cut {
                    spec = LayerSpec::new(&spec.name, spec.layers, cut)?;
                }
                Ok(spec)
            }
            (None, None) => Err(Error::Config("generator needs `preset` or `layers`".into())),
        }
    }

    pub fn generator_config(&self) -> Result<GeneratorConfig> {
        if self.z_dim == 0 || self.w_dim == 0 {
            return Err(Error::Config("z_dim and w_dim must be positive".into()));
        }
        Ok(GeneratorConfig {
            z_dim: self.z_dim,
            w_dim: self.w_dim,
            layer_spec: self.layer_spec()?,
            weight_seed: self.weight_seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSection {
    #[serde(flatten)]
    pub spec: PlantedSpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_target() -> usize {
    30
}

fn default_max_attempts() -> usize {
    2000
}

fn default_top_layers() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionSection {
    #[serde(default)]
    pub color: ColorReduction,
    /// Positive samples to average over for attribute objectives.
    #[serde(default = "default_n_target")]
    pub n_target: usize,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: usize,
    #[serde(default = "default_top_layers")]
    pub top_layers: usize,
    /// Layers withheld from ranking; defaults to the layer spec's exclusions.
    #[serde(default)]
    pub exclude_layers: Option<Vec<usize>>,
}

impl Default for DetectionSection {
    fn default() -> Self {
        DetectionSection {
            color: ColorReduction::Mean,
            n_target: default_n_target(),
            max_attempts: default_max_attempts(),
            top_layers: default_top_layers(),
            exclude_layers: None,
        }
    }
}

fn default_channel_samples() -> usize {
    1000
}

fn default_logit_samples() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    #[serde(default = "default_channel_samples")]
    pub channel_samples: usize,
    #[serde(default = "default_logit_samples")]
    pub logit_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for StatsSection {
    fn default() -> Self {
        StatsSection {
            channel_samples: default_channel_samples(),
            logit_samples: default_logit_samples(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub generator: GeneratorSection,
    #[serde(default)]
    pub planted: Option<PlantedSection>,
    #[serde(default)]
    pub layout: RegionLayout,
    #[serde(default = "ProbeSpec::defaults")]
    pub probes: Vec<ProbeSpec>,
    #[serde(default)]
    pub detection: DetectionSection,
    #[serde(default)]
    pub stats: StatsSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            generator: GeneratorSection::default(),
            planted: None,
            layout: RegionLayout::default(),
            probes: ProbeSpec::defaults(),
            detection: DetectionSection::default(),
            stats: StatsSection::default(),
        }
    }
}

/// Everything a config describes, built.
#[derive(Clone, Debug)]
pub struct Workbench {
    pub generator: Generator,
    pub truth: Option<GroundTruth>,
    pub layout: RegionLayout,
    pub probes: Vec<LinearProbe>,
    pub exclusions: Exclusions,
    pub config: Config,
}

impl Workbench {
    pub fn probe(&self, name: &str) -> Result<&LinearProbe> {
        use crate::probes::AttributeProbe;
        self.probes
            .iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Unknown(format!("probe `{name}`")))
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Config::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Named presets: `toy`, `tiny8`, `paper-mirror` and `planted-demo`
    /// (toy weights with two independent planted attributes).
    pub fn preset(name: &str) -> Result<Config> {
        let mut cfg = Config::default();
        match name {
            "toy" | "tiny8" | "paper-mirror" => cfg.generator.preset = Some(name.into()),
            "planted-demo" => cfg.planted = Some(PlantedSection::demo()),
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.layer_spec()?;
        self.layout.validate()?;
        if let Some(p) = &self.planted {
            p.spec.validate()?;
        }
        for (i, p) in self.probes.iter().enumerate() {
            if self.probes[..i].iter().any(|q| q.name == p.name) {
                return Err(Error::Config(format!("duplicate probe `{}`", p.name)));
            }
        }
        if self.detection.n_target == 0 || self.detection.top_layers == 0 {
            return Err(Error::Config("n_target and top_layers must be >= 1".into()));
        }
        if self.stats.channel_samples < 2 || self.stats.logit_samples < 2 {
            return Err(Error::Config("statistics need >= 2 samples".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Workbench> {
        self.validate()?;
        let gen_config = self.generator.generator_config()?;
        let (generator, truth) = match &self.planted {
            Some(p) => {
                let (g, t) = make_planted(&p.spec, gen_config, &self.layout, &self.probes, p.seed)?;
                (g, Some(t))
            }
            None => (Generator::new(gen_config)?, None),
        };
        let exclusions = match &self.detection.exclude_layers {
            Some(layers) => Exclusions {
                layers: layers.iter().copied().collect(),
                ..Exclusions::none()
            },
            None => Exclusions::default_for(generator.spec()),
        };
        let probes = if generator.can_synthesize() {
            self.probes
                .iter()
                .map(|p| p.resolve(&self.layout, generator.resolution()))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Workbench {
            generator,
            truth,
            layout: self.layout.clone(),
            probes,
            exclusions,
            config: self.clone(),
        })
    }
}

impl PlantedSection {
    /// Mouth-redness on `(3, 4)` and hair-darkness on `(5, 2)`, noise-free.
    pub fn demo() -> Self {
        use crate::generator::{ChannelId, Plant};
        PlantedSection {
            spec: PlantedSpec {
                plants: vec![
                    Plant {
                        channel: ChannelId::new(3, 4),
                        target: "mouth-redness".into(),
                        effect: 2.0,
                    },
                    Plant {
                        channel: ChannelId::new(5, 2),
                        target: "hair-darkness".into(),
                        effect: 2.0,
                    },
                ],
                mixing_noise: 0.0,
            },
            seed: 0,
        }
    }
}
