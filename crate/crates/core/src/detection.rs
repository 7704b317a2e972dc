//! Gradient fields over the style space and channel selection.
//!
//! A region objective is the masked mean of the image (per-pixel colour
//! mean by default); an attribute objective is a probe logit. Either way the
//! field over every style channel comes from a single backward pass from the
//! scalar objective, never from a per-pixel Jacobian.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{style_input_name, ChannelId, Generator, LayerSpec, StyleVector};
use crate::probes::{AttributeProbe, RegionMask};
use crate::tensor::{backward, forward_eval, Graph, GraphBuilder, NodeId};

/// How a pixel's three colour values collapse into one scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorReduction {
    #[default]
    Mean,
    PerChannelMax,
}

/// Scalar quantity whose style-space gradient is analysed.
#[derive(Clone, Copy)]
pub enum Objective<'a> {
    Region(&'a RegionMask, ColorReduction),
    Probe(&'a dyn AttributeProbe),
}

impl Objective<'_> {
    pub fn tag(&self) -> String {
        match self {
            Objective::Region(m, _) => format!("region:{}", m.name),
            Objective::Probe(p) => format!("attr:{}", p.name()),
        }
    }
}

/// `styles -> scalar objective`.
pub struct ObjectiveGraph {
    pub graph: Graph,
    pub objective: NodeId,
}

impl ObjectiveGraph {
    pub fn new(generator: &Generator, objective: Objective<'_>) -> Result<Self> {
        let mut b = GraphBuilder::new();
        let styles = generator.style_inputs(&mut b)?;
        let image = generator.build_synthesis(&mut b, &styles)?;
        let scalar = match objective {
            Objective::Region(mask, reduction) => {
                mask.ensure_non_empty()?;
                if mask.resolution != generator.resolution() {
                    return Err(Error::ShapeMismatch {
                        op: "region_gradient",
                        detail: format!(
                            "mask resolution {} vs image {}",
                            mask.resolution,
                            generator.resolution()
                        ),
                    });
                }
                let per_pixel = match reduction {
                    ColorReduction::Mean => b.channel_mean(image)?,
                    ColorReduction::PerChannelMax => b.channel_max(image)?,
                };
                let r = mask.resolution;
                let plane = b.reshape(per_pixel, &[1, r, r])?;
                let mean = b.masked_mean(plane, mask.cells().clone())?;
                b.sum(mean)?
            }
            Objective::Probe(probe) => probe.build(&mut b, image)?,
        };
        Ok(ObjectiveGraph {
            graph: b.finish(),
            objective: scalar,
        })
    }

    pub fn value(&self, generator: &Generator, s: &StyleVector) -> Result<f64> {
        let eval = forward_eval(&self.graph, &generator.style_bindings(s)?)?;
        Ok(eval.value(self.objective).item())
    }

    pub fn gradient(&self, generator: &Generator, s: &StyleVector) -> Result<(f64, Vec<Vec<f64>>)> {
        let eval = forward_eval(&self.graph, &generator.style_bindings(s)?)?;
        let value = eval.value(self.objective).item();
        let grads = backward(&self.graph, &eval, self.objective)?;
        let layers = (0..generator.spec().len())
            .map(|i| grads[&style_input_name(i)].data().to_vec())
            .collect();
        Ok((value, layers))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Single,
    Averaged { count: usize },
}

/// `d(objective)/ds`, shaped like a [`StyleVector`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientField {
    pub objective: String,
    pub fingerprint: String,
    pub provenance: Provenance,
    pub layers: Vec<Vec<f64>>,
}

impl GradientField {
    pub fn get(&self, id: ChannelId) -> Result<f64> {
        self.layers
            .get(id.layer)
            .and_then(|l| l.get(id.channel))
            .copied()
            .ok_or(Error::UnknownChannel {
                layer: id.layer,
                channel: id.channel,
            })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flatten().copied().collect()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    /// Same field multiplied by `c`.
    pub fn scaled(&self, c: f64) -> GradientField {
        GradientField {
            layers: self
                .layers
                .iter()
                .map(|l| l.iter().map(|v| v * c).collect())
                .collect(),
            ..self.clone()
        }
    }

    fn channels(&self) -> impl Iterator<Item = (ChannelId, f64)> + '_ {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, vals)| vals.iter().enumerate().map(move |(c, v)| (ChannelId::new(l, c), *v)))
    }
}

fn field_from(generator: &Generator, objective: &Objective<'_>, layers: Vec<Vec<f64>>) -> Result<GradientField> {
    if layers.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", objective.tag())));
    }
    Ok(GradientField {
        objective: objective.tag(),
        fingerprint: generator.fingerprint().to_string(),
        provenance: Provenance::Single,
        layers,
    })
}

/// Gradient of one objective at one style code.
pub fn objective_gradient(generator: &Generator, s: &StyleVector, objective: Objective<'_>) -> Result<GradientField> {
    let og = ObjectiveGraph::new(generator, objective)?;
    let (value, layers) = og.gradient(generator, s)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(objective.tag()));
    }
    field_from(generator, &objective, layers)
}

/// Gradient of the masked image mean (per-pixel colour mean) with respect
/// to every style channel.
pub fn region_gradient(generator: &Generator, s: &StyleVector, mask: &RegionMask) -> Result<GradientField> {
    objective_gradient(generator, s, Objective::Region(mask, ColorReduction::Mean))
}

/// Gradient of a probe logit through the generator (chain rule via backward).
pub fn attribute_gradient(generator: &Generator, s: &StyleVector, probe: &dyn AttributeProbe) -> Result<GradientField> {
    objective_gradient(generator, s, Objective::Probe(probe))
}

/// Component-wise mean of signed fields. All fields must share shape and
/// objective tag.
pub fn average_gradient(fields: &[GradientField]) -> Result<GradientField> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidArgument("average of zero gradient fields".into()))?;
    let mut acc = first.layers.clone();
    for f in &fields[1..] {
        if f.objective != first.objective {
            return Err(Error::InvalidArgument(format!(
                "mixed objectives `{}` and `{}`",
                first.objective, f.objective
            )));
        }
        if f.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "average_gradient",
                detail: format!("{:?} vs {:?}", f.shape(), first.shape()),
            });
        }
        for (a, b) in acc.iter_mut().zip(&f.layers) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
    let n = fields.len() as f64;
    acc.iter_mut().flatten().for_each(|x| *x /= n);
    Ok(GradientField {
        objective: first.objective.clone(),
        fingerprint: first.fingerprint.clone(),
        provenance: Provenance::Averaged { count: fields.len() },
        layers: acc,
    })
}

/// Averaged field over many style codes. Per-sample gradients run in
/// parallel; the reduction is in sample order.
pub fn average_objective_gradient(
    generator: &Generator,
    styles: &[StyleVector],
    objective: Objective<'_>,
) -> Result<GradientField> {
    let og = ObjectiveGraph::new(generator, objective)?;
    let fields = styles
        .par_iter()
        .map(|s| {
            let (_, layers) = og.gradient(generator, s)?;
            field_from(generator, &objective, layers)
        })
        .collect::<Result<Vec<_>>>()?;
    average_gradient(&fields)
}

/// Per-layer mean of `|g|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile(pub Vec<f64>);

pub fn layer_profile(field: &GradientField) -> LayerProfile {
    LayerProfile(
        field
            .layers
            .iter()
            .map(|l| {
                if l.is_empty() {
                    0.0
                } else {
                    l.iter().map(|v| v.abs()).sum::<f64>() / l.len() as f64
                }
            })
            .collect(),
    )
}

/// The `n` strongest layers, excluded layers removed first; ties go to the
/// lower layer index.
pub fn top_layers(profile: &LayerProfile, n: usize, exclusions: &BTreeSet<usize>) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let mut candidates: Vec<usize> = (0..profile.0.len()).filter(|i| !exclusions.contains(i)).collect();
    if n > candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {n} layers, only {} available",
            candidates.len()
        )));
    }
    candidates.sort_by(|&a, &b| profile.0[b].total_cmp(&profile.0[a]).then(a.cmp(&b)));
    candidates.truncate(n);
    Ok(candidates)
}

/// Channels withheld from ranking.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusions {
    pub layers: BTreeSet<usize>,
    pub channels: BTreeSet<ChannelId>,
}

impl Exclusions {
    pub fn none() -> Self {
        Self::default()
    }

    /// tRGB layers and the high layers at or above the spec's detection cut.
    pub fn default_for(spec: &LayerSpec) -> Self {
        Exclusions {
            layers: spec.default_exclusions(),
            channels: BTreeSet::new(),
        }
    }

    pub fn excludes(&self, id: ChannelId) -> bool {
        self.layers.contains(&id.layer) || self.channels.contains(&id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedChannel {
    pub channel: ChannelId,
    pub magnitude: f64,
}

impl Serialize for RankedChannel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        (self.channel.layer, self.channel.channel, self.magnitude).serialize(s)
    }
}

impl<'de> Deserialize<'de> for RankedChannel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let (layer, channel, magnitude) = <(usize, usize, f64)>::deserialize(d)?;
        Ok(RankedChannel {
            channel: ChannelId::new(layer, channel),
            magnitude,
        })
    }
}

/// Channels by non-increasing magnitude; ties by `(layer, channel)` ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRanking {
    pub objective: String,
    pub fingerprint: String,
    pub k: usize,
    pub exclusions: Exclusions,
    pub entries: Vec<RankedChannel>,
}

impl ChannelRanking {
    /// Ranks `(channel, magnitude)` pairs, keeping the first `k`.
    pub fn from_magnitudes(
        objective: &str,
        fingerprint: &str,
        mut entries: Vec<RankedChannel>,
        k: usize,
        exclusions: Exclusions,
    ) -> Self {
        entries.retain(|e| !exclusions.excludes(e.channel));
        entries.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude).then(a.channel.cmp(&b.channel)));
        entries.truncate(k);
        ChannelRanking {
            objective: objective.to_string(),
            fingerprint: fingerprint.to_string(),
            k: entries.len(),
            exclusions,
            entries,
        }
    }

    pub fn channels(&self) -> Vec<ChannelId> {
        self.entries.iter().map(|e| e.channel).collect()
    }

    pub fn top(&self, k: usize) -> &[RankedChannel] {
        &self.entries[..k.min(self.entries.len())]
    }

    pub fn position(&self, id: ChannelId) -> Option<usize> {
        self.entries.iter().position(|e| e.channel == id)
    }

    pub fn magnitude(&self, id: ChannelId) -> Option<f64> {
        self.entries.iter().find(|e| e.channel == id).map(|e| e.magnitude)
    }
}

/// Every non-excluded channel of the field ranked by `|g|`.
pub fn rank_channels(field: &GradientField, exclusions: &Exclusions) -> ChannelRanking {
    let entries = field
        .channels()
        .map(|(channel, g)| RankedChannel {
            channel,
            magnitude: g.abs(),
        })
        .collect();
    ChannelRanking::from_magnitudes(&field.objective, &field.fingerprint, entries, usize::MAX, exclusions.clone())
}

/// `C^k_l`: the top `k` channels of one layer by `|g|`.
pub fn top_k_channels(
    field: &GradientField,
    layer: usize,
    k: usize,
    exclusions: &Exclusions,
) -> Result<ChannelRanking> {
    let values = field.layers.get(layer).ok_or(Error::UnknownChannel { layer, channel: 0 })?;
    let available = (0..values.len())
        .filter(|&c| !exclusions.excludes(ChannelId::new(layer, c)))
        .count();
    if k == 0 || k > available {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={available} for layer {layer}"
        )));
    }
    let entries = values
        .iter()
        .enumerate()
        .map(|(c, g)| RankedChannel {
            channel: ChannelId::new(layer, c),
            magnitude: g.abs(),
        })
        .collect();
    Ok(ChannelRanking::from_magnitudes(
        &field.objective,
        &field.fingerprint,
        entries,
        k,
        exclusions.clone(),
    ))
}

/// Share of total `|g|` held by the top-`k` channels of the flattened field,
/// for each requested `k`.
pub fn concentration_stats(field: &GradientField, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    let mut mags: Vec<f64> = field.flatten().iter().map(|v| v.abs()).collect();
    let total: f64 = mags.iter().sum();
    if total == 0.0 {
        return Err(Error::ZeroField(field.objective.clone()));
    }
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut prefix = Vec::with_capacity(mags.len() + 1);
    prefix.push(0.0);
    for m in &mags {
        prefix.push(prefix.last().copied().unwrap_or(0.0) + m);
    }
    Ok(ks
        .iter()
        .map(|&k| (k, prefix[k.min(mags.len())] / total))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(layers: Vec<Vec<f64>>) -> GradientField {
        GradientField {
            objective: "t".into(),
            fingerprint: "f".into(),
            provenance: Provenance::Single,
            layers,
        }
    }

    #[test]
    fn averaging() {
        let f = field(vec![vec![1.0, -2.0], vec![3.0]]);
        assert_eq!(average_gradient(std::slice::from_ref(&f)).unwrap().layers, f.layers);
        let avg = average_gradient(&[f.clone(), f.scaled(-1.0)]).unwrap();
        assert!(avg.flatten().iter().all(|v| *v == 0.0));
        assert_eq!(avg.provenance, Provenance::Averaged { count: 2 });
        assert!(average_gradient(&[]).is_err());
        let mut other = f.clone();
        other.objective = "u".into();
        assert!(average_gradient(&[f, other]).is_err());
    }

    #[test]
    fn profiles() {
        let zero = field(vec![vec![0.0; 3], vec![0.0; 2]]);
        assert_eq!(layer_profile(&zero).0, vec![0.0, 0.0]);
        let f = field(vec![vec![0.0; 3], vec![0.0; 2], vec![1.0, -3.0]]);
        assert_eq!(layer_profile(&f).0, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn top_layers_tie_break_and_exclusions() {
        let flat = LayerProfile(vec![1.0; 5]);
        assert_eq!(top_layers(&flat, 3, &BTreeSet::new()).unwrap(), vec![0, 1, 2]);
        let p = LayerProfile(vec![0.1, 0.5, 0.3, 0.9, 0.2]);
        let all = top_layers(&p, 5, &BTreeSet::new()).unwrap();
        assert_eq!(all, vec![3, 1, 2, 4, 0]);
        let ex: BTreeSet<usize> = [3, 1].into();
        assert_eq!(top_layers(&p, 2, &ex).unwrap(), vec![2, 4]);
        assert!(top_layers(&p, 4, &ex).is_err());
        assert!(top_layers(&p, 0, &ex).is_err());
    }

    #[test]
    fn top_k_orders_by_magnitude_then_index() {
        let f = field(vec![vec![0.5, -2.0, 2.0, 0.1]]);
        let r = top_k_channels(&f, 0, 4, &Exclusions::none()).unwrap();
        let order: Vec<usize> = r.entries.iter().map(|e| e.channel.channel).collect();
        assert_eq!(order, vec![1, 2, 0, 3]);
        assert!(top_k_channels(&f, 0, 5, &Exclusions::none()).is_err());
        let ex = Exclusions {
            channels: [ChannelId::new(0, 1)].into(),
            ..Exclusions::none()
        };
        let r = top_k_channels(&f, 0, 3, &ex).unwrap();
        assert!(r.position(ChannelId::new(0, 1)).is_none());
        assert!(top_k_channels(&f, 0, 4, &ex).is_err());
    }

    #[test]
    fn ranking_json_uses_triples() {
        let f = field(vec![vec![0.5, -2.0]]);
        let r = top_k_channels(&f, 0, 1, &Exclusions::none()).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["entries"], serde_json::json!([[0, 1, 2.0]]));
    }

    #[test]
    fn concentration() {
        let f = field(vec![vec![0.0, 3.0], vec![1.0]]);
        let stats = concentration_stats(&f, &[1, 2, 3]).unwrap();
        assert_eq!(stats, vec![(1, 0.75), (2, 1.0), (3, 1.0)]);
        let one_hot = field(vec![vec![0.0, 0.0, -4.0]]);
        assert_eq!(concentration_stats(&one_hot, &[1]).unwrap(), vec![(1, 1.0)]);
        assert!(matches!(
            concentration_stats(&field(vec![vec![0.0]]), &[1]),
            Err(Error::ZeroField(_))
        ));
    }

    proptest! {
        #[test]
        fn ranking_invariant_under_positive_scale(
            values in prop::collection::vec(-5.0f64..5.0, 1..40),
            c in 1e-3f64..1e3,
        ) {
            let f = field(vec![values.clone()]);
            let k = values.len();
            let a = top_k_channels(&f, 0, k, &Exclusions::none()).unwrap();
            let b = top_k_channels(&f.scaled(c), 0, k, &Exclusions::none()).unwrap();
            prop_assert_eq!(a.channels(), b.channels());
        }

        #[test]
        fn concentration_is_monotone(values in prop::collection::vec(-5.0f64..5.0, 2..40)) {
            prop_assume!(values.iter().any(|v| *v != 0.0));
            let f = field(vec![values.clone()]);
            let ks: Vec<usize> = (1..=values.len()).collect();
            let stats = concentration_stats(&f, &ks).unwrap();
            for w in stats.windows(2) {
                prop_assert!(w[1].1 >= w[0].1);
            }
            prop_assert!((stats.last().unwrap().1 - 1.0).abs() < 1e-12);
        }
    }
}
