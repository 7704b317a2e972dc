//! End-to-end detection on a built [`Workbench`]: objective parsing, sample
//! selection, averaging, layer choice and channel ranking.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::Workbench;
use crate::detection::{
    average_objective_gradient, layer_profile, rank_channels, top_k_channels, top_layers, ChannelRanking,
    GradientField, LayerProfile, Objective,
};
use crate::error::{Error, Result};
use crate::generator::{ChannelId, Generator, StyleVector};
use crate::manipulation::{gradient_sign, multi_channel_direction, EditSpec};
use crate::metrics::{logit_std, LogitBank, LogitStats};
use crate::probes::{collect_positive, region_mask, AttributeProbe, LinearProbe, RegionMask};

/// `region:NAME` or `attr:NAME`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ObjectiveSpec {
    Region(String),
    Attribute(String),
}

impl FromStr for ObjectiveSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("region", name)) if !name.is_empty() => Ok(ObjectiveSpec::Region(name.into())),
            Some(("attr", name)) if !name.is_empty() => Ok(ObjectiveSpec::Attribute(name.into())),
            _ => Err(Error::InvalidArgument(format!(
                "objective `{s}` is not `region:NAME` or `attr:NAME`"
            ))),
        }
    }
}

impl TryFrom<String> for ObjectiveSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ObjectiveSpec> for String {
    fn from(o: ObjectiveSpec) -> String {
        o.to_string()
    }
}

impl fmt::Display for ObjectiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveSpec::Region(n) => write!(f, "region:{n}"),
            ObjectiveSpec::Attribute(n) => write!(f, "attr:{n}"),
        }
    }
}

/// An [`ObjectiveSpec`] bound to a workbench's layout and probes.
pub enum ResolvedObjective<'a> {
    Region(RegionMask, crate::detection::ColorReduction),
    Probe(&'a LinearProbe),
}

impl ResolvedObjective<'_> {
    pub fn objective(&self) -> Objective<'_> {
        match self {
            ResolvedObjective::Region(mask, color) => Objective::Region(mask, *color),
            ResolvedObjective::Probe(p) => Objective::Probe(*p),
        }
    }
}

impl Workbench {
    pub fn resolve(&self, spec: &ObjectiveSpec) -> Result<ResolvedObjective<'_>> {
        match spec {
            ObjectiveSpec::Region(name) => {
                let mask = region_mask(&self.layout, name, self.generator.resolution())?;
                mask.ensure_non_empty()?;
                Ok(ResolvedObjective::Region(mask, self.config.detection.color))
            }
            ObjectiveSpec::Attribute(name) => Ok(ResolvedObjective::Probe(self.probe(name)?)),
        }
    }

    pub fn probe_refs(&self) -> Vec<&dyn AttributeProbe> {
        self.probes.iter().map(|p| p as &dyn AttributeProbe).collect()
    }

    pub fn logit_stats(&self) -> Result<LogitStats> {
        let stats = &self.config.stats;
        logit_std(&self.probe_refs(), &self.generator, stats.logit_samples, stats.seed)
    }

    /// Every probe's logit for `s`, in probe order.
    pub fn logits(&self, s: &StyleVector) -> Result<Vec<(String, f64)>> {
        let bank = LogitBank::new(&self.generator, &self.probe_refs())?;
        Ok(bank.names().iter().cloned().zip(bank.logits(&self.generator, s)?).collect())
    }
}

/// Style vector of latent `index` in seeded stream `seed`.
pub fn sample_style(generator: &Generator, seed: u64, index: u64) -> Result<StyleVector> {
    generator.style_from_z(&generator.sample_z(seed, index))
}

/// Samples a detection averages over: the first `n` latents of stream `seed`
/// for a region, or the first `n` positives for an attribute. Returns the
/// styles and the number of latents drawn.
pub fn detection_samples(
    workbench: &Workbench,
    objective: &ObjectiveSpec,
    n: usize,
    seed: u64,
) -> Result<(Vec<StyleVector>, usize)> {
    if n == 0 {
        return Err(Error::InvalidArgument("detection needs >= 1 sample".into()));
    }
    match objective {
        ObjectiveSpec::Region(_) => {
            let styles = (0..n as u64)
                .map(|i| sample_style(&workbench.generator, seed, i))
                .collect::<Result<Vec<_>>>()?;
            Ok((styles, n))
        }
        ObjectiveSpec::Attribute(name) => {
            let probe = workbench.probe(name)?;
            let set = collect_positive(
                &workbench.generator,
                probe,
                n,
                workbench.config.detection.max_attempts,
                seed,
            )?;
            Ok((set.styles(), set.attempts))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub objective: ObjectiveSpec,
    pub samples: usize,
    pub k: usize,
    pub seed: u64,
}

/// Result of one detection run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub objective: ObjectiveSpec,
    pub fingerprint: String,
    pub seed: u64,
    pub samples: usize,
    pub attempts: usize,
    pub profile: LayerProfile,
    pub top_layers: Vec<usize>,
    /// Top `k` over every non-excluded channel.
    pub ranking: ChannelRanking,
    /// `C^k_l` for each of `top_layers`, in the same order.
    pub layer_rankings: Vec<ChannelRanking>,
    pub field: GradientField,
}

impl Detection {
    /// Single-channel edit on the `rank`-th channel (0-based), signed so that
    /// positive `alpha` raises the objective.
    pub fn single_edit(&self, rank: usize, alpha: f64) -> Result<EditSpec> {
        let entry = self
            .ranking
            .entries
            .get(rank)
            .ok_or_else(|| Error::InvalidArgument(format!("rank {rank} outside ranking of {}", self.ranking.k)))?;
        Ok(EditSpec::Single {
            channel: entry.channel,
            alpha,
            sign: gradient_sign(&self.field, entry.channel)?,
        })
    }

    /// Multi-channel edit along the averaged field restricted to `channels`.
    pub fn multi_edit(&self, channels: &ChannelRanking, alpha: f64) -> Result<EditSpec> {
        Ok(EditSpec::Multi {
            ranking: channels.clone(),
            direction: multi_channel_direction(&self.field, channels)?,
            alpha,
        })
    }

    pub fn channels(&self) -> Vec<ChannelId> {
        self.ranking.channels()
    }
}

pub fn detect(workbench: &Workbench, params: &DetectParams) -> Result<Detection> {
    if params.k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let resolved = workbench.resolve(&params.objective)?;
    let (styles, attempts) = detection_samples(workbench, &params.objective, params.samples, params.seed)?;
    let field = average_objective_gradient(&workbench.generator, &styles, resolved.objective())?;
    let profile = layer_profile(&field);
    let exclusions = &workbench.exclusions;
    let available = workbench.generator.spec().len() - exclusions.layers.len();
    let chosen = top_layers(&profile, workbench.config.detection.top_layers.min(available), &exclusions.layers)?;
    let layer_rankings = chosen
        .iter()
        .map(|&l| {
            let open = (0..field.layers[l].len())
                .filter(|&c| !exclusions.excludes(ChannelId::new(l, c)))
                .count();
            top_k_channels(&field, l, params.k.min(open), exclusions)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ranking = rank_channels(&field, exclusions);
    ranking.entries.truncate(params.k);
    ranking.k = ranking.entries.len();
    Ok(Detection {
        objective: params.objective.clone(),
        fingerprint: workbench.generator.fingerprint().to_string(),
        seed: params.seed,
        samples: styles.len(),
        attempts,
        profile,
        top_layers: chosen,
        ranking,
        layer_rankings,
        field,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    #[test]
    fn objective_spec_round_trip() {
        for text in ["region:mouth", "attr:mouth-redness"] {
            let o: ObjectiveSpec = text.parse().unwrap();
            assert_eq!(o.to_string(), text);
            let json = serde_json::to_string(&o).unwrap();
            assert_eq!(json, format!("\"{text}\""));
            assert_eq!(serde_json::from_str::<ObjectiveSpec>(&json).unwrap(), o);
        }
        for bad in ["mouth", "region:", "pixel:mouth"] {
            assert!(bad.parse::<ObjectiveSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn planted_demo_detects_its_plants() {
        let wb = Config::preset("planted-demo").unwrap().build().unwrap();
        let truth = wb.truth.clone().unwrap();
        for target in ["mouth-redness", "hair-darkness"] {
            let d = detect(
                &wb,
                &DetectParams {
                    objective: ObjectiveSpec::Attribute(target.into()),
                    samples: 10,
                    k: 5,
                    seed: 3,
                },
            )
            .unwrap();
            assert_eq!(d.ranking.k, 5);
            assert_eq!(d.ranking.entries[0].channel, truth.channels_for(target)[0]);
            assert_eq!(d.top_layers.len(), 3);
            assert!(d.samples == 10 && d.attempts >= 10);
            let edit = d.single_edit(0, 1.0).unwrap();
            assert!(matches!(edit, EditSpec::Single { sign, .. } if sign == 1.0));
        }
    }

    #[test]
    fn detection_is_deterministic() {
        let wb = Config::preset("tiny8").unwrap().build().unwrap();
        let params = DetectParams {
            objective: "region:full".parse().unwrap(),
            samples: 3,
            k: 4,
            seed: 1,
        };
        let a = serde_json::to_string(&detect(&wb, &params).unwrap()).unwrap();
        let b = serde_json::to_string(&detect(&wb, &params).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(detect(&wb, &DetectParams { k: 0, ..params.clone() }).is_err());
        assert!(detect(&wb, &DetectParams { objective: "region:nowhere".parse().unwrap(), ..params }).is_err());
    }
}
