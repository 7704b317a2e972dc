//! Generators with known ground truth.
//!
//! A planted generator attenuates the random synthesis network by
//! `mixing_noise` and adds, for every plant, a read-out that paints the
//! plant's target region in the target colour in proportion to the planted
//! style channel. Every other channel only reaches the image through the
//! attenuated network, so at `mixing_noise = 0` the plants are the only
//! channels with any effect.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ChannelId, Generator, GeneratorConfig, PlantedReadout, COLOR_CHANNELS};
use crate::error::{Error, Result};
use crate::probes::{region_mask, ProbeSpec, RegionLayout, FULL_REGION};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    pub channel: ChannelId,
    /// Region name or probe (attribute) name.
    pub target: String,
    pub effect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub plants: Vec<Plant>,
    #[serde(default)]
    pub mixing_noise: f64,
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.1).contains(&self.mixing_noise) {
            return Err(Error::Config(format!(
                "mixing_noise {} outside [0, 0.1]",
                self.mixing_noise
            )));
        }
        for (i, p) in self.plants.iter().enumerate() {
            if self.plants[..i].iter().any(|q| q.channel == p.channel) {
                return Err(Error::ConflictingPlant {
                    layer: p.channel.layer,
                    channel: p.channel.channel,
                });
            }
            if !p.effect.is_finite() || p.effect.abs() <= 10.0 * self.mixing_noise {
                return Err(Error::Config(format!(
                    "plant {} effect {} must exceed 10x mixing_noise {}",
                    p.channel, p.effect, self.mixing_noise
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub channel: ChannelId,
    pub target: String,
    pub region: String,
    pub color: [f64; 3],
    pub effect: f64,
}

/// Which channels were planted for which targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub fingerprint: String,
    pub mixing_noise: f64,
    pub entries: Vec<GroundTruthEntry>,
}

impl GroundTruth {
    /// Channels planted for `target` (a region or attribute name).
    pub fn channels_for(&self, target: &str) -> Vec<ChannelId> {
        self.entries
            .iter()
            .filter(|e| e.target == target)
            .map(|e| e.channel)
            .collect()
    }

    pub fn entry(&self, channel: ChannelId) -> Option<&GroundTruthEntry> {
        self.entries.iter().find(|e| e.channel == channel)
    }
}

fn resolve_target(target: &str, layout: &RegionLayout, probes: &[ProbeSpec]) -> Result<(String, [f64; 3])> {
    if target == FULL_REGION || layout.names().any(|n| n == target) {
        return Ok((target.to_string(), [1.0; 3]));
    }
    match probes.iter().find(|p| p.name == target) {
        Some(p) => p.plant_hint(),
        None => Err(Error::UnknownRegion(target.to_string())),
    }
}

/// Builds a planted generator over `config`'s architecture and weights.
/// `seed` drives the off-target read-out noise.
pub fn make_planted(
    spec: &PlantedSpec,
    config: GeneratorConfig,
    layout: &RegionLayout,
    probes: &[ProbeSpec],
    seed: u64,
) -> Result<(Generator, GroundTruth)> {
    spec.validate()?;
    let base = Generator::new(config)?;
    if !base.can_synthesize() {
        return Err(Error::UnsupportedSpec("planted generators need a synthesizable spec".into()));
    }
    let layer_spec = base.spec().clone();
    let res = layer_spec.output_resolution();
    let pixels = res * res;
    let rows = COLOR_CHANNELS * pixels;

    let mut columns: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut entries = Vec::with_capacity(spec.plants.len());
    let mut noise_rng = rng::seeded(seed);
    for plant in &spec.plants {
        layer_spec.flat_index(plant.channel)?;
        let (region, color) = resolve_target(&plant.target, layout, probes)?;
        let mask = region_mask(layout, &region, res)?;
        mask.ensure_non_empty()?;
        let cols = layer_spec.layers[plant.channel.layer].channels;
        let matrix = columns
            .entry(plant.channel.layer)
            .or_insert_with(|| vec![0.0; rows * cols]);
        for (k, c) in color.iter().enumerate() {
            for p in 0..pixels {
                let on_target = if mask.cells()[p] { plant.effect * c } else { 0.0 };
                let leak = spec.mixing_noise * noise_rng.sample::<f64, _>(StandardNormal);
                matrix[(k * pixels + p) * cols + plant.channel.channel] = on_target + leak;
            }
        }
        entries.push(GroundTruthEntry {
            channel: plant.channel,
            target: plant.target.clone(),
            region,
            color,
            effect: plant.effect,
        });
    }

    let per_layer = layer_spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            columns
                .remove(&i)
                .map(|data| Tensor::new(vec![rows, l.channels], data).map(Arc::new))
                .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    let generator = base.with_planted(PlantedReadout {
        base_gain: spec.mixing_noise,
        per_layer,
        spec_json: serde_json::to_string(spec)?,
    });
    let truth = GroundTruth {
        fingerprint: generator.fingerprint().to_string(),
        mixing_noise: spec.mixing_noise,
        entries,
    };
    Ok((generator, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plant(layer: usize, channel: usize, target: &str) -> Plant {
        Plant {
            channel: ChannelId::new(layer, channel),
            target: target.into(),
            effect: 2.0,
        }
    }

    #[test]
    fn rejects_conflicts_and_weak_effects() {
        let layout = RegionLayout::default();
        let dup = PlantedSpec {
            plants: vec![plant(3, 1, "mouth"), plant(3, 1, "hairband")],
            mixing_noise: 0.0,
        };
        assert!(matches!(
            make_planted(&dup, GeneratorConfig::default(), &layout, &[], 0),
            Err(Error::ConflictingPlant { layer: 3, channel: 1 })
        ));
        let weak = PlantedSpec {
            plants: vec![Plant {
                effect: 0.5,
                ..plant(3, 1, "mouth")
            }],
            mixing_noise: 0.1,
        };
        assert!(make_planted(&weak, GeneratorConfig::default(), &layout, &[], 0).is_err());
        let noisy = PlantedSpec {
            plants: vec![],
            mixing_noise: 0.2,
        };
        assert!(noisy.validate().is_err());
        let unknown = PlantedSpec {
            plants: vec![plant(3, 1, "nose")],
            mixing_noise: 0.0,
        };
        assert!(matches!(
            make_planted(&unknown, GeneratorConfig::default(), &layout, &[], 0),
            Err(Error::UnknownRegion(_))
        ));
    }

    #[test]
    fn attribute_targets_use_probe_hints() {
        let spec = PlantedSpec {
            plants: vec![plant(5, 2, "hair-darkness")],
            mixing_noise: 0.0,
        };
        let (g, truth) = make_planted(
            &spec,
            GeneratorConfig::default(),
            &RegionLayout::default(),
            &ProbeSpec::defaults(),
            1,
        )
        .unwrap();
        assert!(g.is_planted());
        assert_eq!(truth.fingerprint, g.fingerprint());
        assert_eq!(truth.entries[0].region, "hairband");
        assert_eq!(truth.channels_for("hair-darkness"), vec![ChannelId::new(5, 2)]);
    }

    #[test]
    fn mixing_zero_confines_changes_to_region() {
        let spec = PlantedSpec {
            plants: vec![plant(3, 4, "mouth")],
            mixing_noise: 0.0,
        };
        let layout = RegionLayout::default();
        let (g, _) = make_planted(&spec, GeneratorConfig::default(), &layout, &[], 0).unwrap();
        let s = g.style_from_z(&g.sample_z(0, 0)).unwrap();
        let mut t = s.clone();
        let id = ChannelId::new(3, 4);
        t.set(id, s.get(id).unwrap() + 0.7).unwrap();
        let (a, b) = (g.synthesize(&s).unwrap(), g.synthesize(&t).unwrap());
        let mouth = region_mask(&layout, "mouth", 32).unwrap();
        let (mut inside, mut total) = (0.0, 0.0);
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let d = (x - y).abs();
            total += d;
            if mouth.cells()[i % 1024] {
                inside += d;
            }
        }
        assert!(total > 0.0);
        assert!(inside / total >= 0.95);
    }
}
