use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::layout::{region_mask, RegionLayout, RegionMask};
use crate::error::{Error, Result};
use crate::tensor::{forward_eval, Bindings, GraphBuilder, NodeId, Tensor};

/// Differentiable scalar attribute of an image.
///
/// Implementations must build their logit purely from graph operations so
/// that gradients flow back through the generator.
pub trait AttributeProbe: Send + Sync {
    fn name(&self) -> &str;

    /// Logits strictly above this value count as positive.
    fn threshold(&self) -> f64 {
        0.0
    }

    /// Appends the logit computation for `image` (`[3, h, w]`) and returns a scalar node.
    fn build(&self, b: &mut GraphBuilder, image: NodeId) -> Result<NodeId>;
}

/// One `coefficient * (color . masked_mean(region))` term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTerm {
    pub region: String,
    pub color: [f64; 3],
    pub coefficient: f64,
}

/// Config-level description of a [`LinearProbe`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub name: String,
    pub terms: Vec<ProbeTerm>,
    #[serde(default)]
    pub bias: f64,
    #[serde(default)]
    pub threshold: f64,
}

const GRAY: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];

impl ProbeSpec {
    /// `a * mean(red over mouth) + b`.
    pub fn mouth_redness(a: f64, b: f64) -> Self {
        ProbeSpec {
            name: "mouth-redness".into(),
            terms: vec![ProbeTerm {
                region: "mouth".into(),
                color: [1.0, 0.0, 0.0],
                coefficient: a,
            }],
            bias: b,
            threshold: 0.0,
        }
    }

    /// `a * (mean(background) - mean(hairband)) + b`, on grey intensity.
    pub fn hair_darkness(a: f64, b: f64) -> Self {
        ProbeSpec {
            name: "hair-darkness".into(),
            terms: vec![
                ProbeTerm {
                    region: "hairband".into(),
                    color: GRAY,
                    coefficient: -a,
                },
                ProbeTerm {
                    region: "background".into(),
                    color: GRAY,
                    coefficient: a,
                },
            ],
            bias: b,
            threshold: 0.0,
        }
    }

    /// `a * mean(blue over both eyes) + b`.
    pub fn eye_blueness(a: f64, b: f64) -> Self {
        let eye = |region: &str| ProbeTerm {
            region: region.into(),
            color: [0.0, 0.0, 1.0],
            coefficient: a / 2.0,
        };
        ProbeSpec {
            name: "eye-blueness".into(),
            terms: vec![eye("left-eye"), eye("right-eye")],
            bias: b,
            threshold: 0.0,
        }
    }

    /// Mean grey intensity over one region: the objective behind
    /// region-gradient detection, expressed as a probe.
    pub fn region_mean(region: &str) -> Self {
        ProbeSpec {
            name: format!("region-mean:{region}"),
            terms: vec![ProbeTerm {
                region: region.into(),
                color: GRAY,
                coefficient: 1.0,
            }],
            bias: 0.0,
            threshold: 0.0,
        }
    }

    /// Built-in probes with biases calibrated on the default toy generator
    /// (seed 42) so that 30-60% of random samples are positive.
    pub fn defaults() -> Vec<ProbeSpec> {
        vec![
            ProbeSpec::mouth_redness(10.0, DEFAULT_MOUTH_REDNESS_BIAS),
            ProbeSpec::hair_darkness(10.0, DEFAULT_HAIR_DARKNESS_BIAS),
            ProbeSpec::eye_blueness(10.0, DEFAULT_EYE_BLUENESS_BIAS),
        ]
    }

    /// Region and colour a planted channel should drive to move this probe
    /// upward: the first term, signed by its coefficient.
    pub fn plant_hint(&self) -> Result<(String, [f64; 3])> {
        let t = self
            .terms
            .first()
            .ok_or_else(|| Error::Config(format!("probe `{}` has no terms", self.name)))?;
        let sign = t.coefficient.signum();
        Ok((t.region.clone(), t.color.map(|c| c * sign)))
    }

    pub fn resolve(&self, layout: &RegionLayout, resolution: usize) -> Result<LinearProbe> {
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let mask = region_mask(layout, &t.region, resolution)?;
                mask.ensure_non_empty()?;
                Ok((mask, t.color, t.coefficient))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LinearProbe {
            spec: self.clone(),
            terms,
        })
    }
}

pub(crate) const DEFAULT_MOUTH_REDNESS_BIAS: f64 = -5.33;
pub(crate) const DEFAULT_HAIR_DARKNESS_BIAS: f64 = -0.1;
pub(crate) const DEFAULT_EYE_BLUENESS_BIAS: f64 = -4.22;

/// Affine combination of region/colour means, with masks resolved.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    spec: ProbeSpec,
    terms: Vec<(RegionMask, [f64; 3], f64)>,
}

impl LinearProbe {
    pub fn spec(&self) -> &ProbeSpec {
        &self.spec
    }
}

impl AttributeProbe for LinearProbe {
    fn name(&self) -> &str {
        &self.spec.name
    }

    fn threshold(&self) -> f64 {
        self.spec.threshold
    }

    fn build(&self, b: &mut GraphBuilder, image: NodeId) -> Result<NodeId> {
        let mut logit: Option<NodeId> = None;
        for (mask, color, coefficient) in &self.terms {
            let means = b.masked_mean(image, mask.cells().clone())?;
            let weights = Tensor::new(vec![1, 3], color.map(|c| c * coefficient).to_vec())?;
            let w = b.constant(Arc::new(weights));
            let dotted = b.matmul(w, means)?;
            let term = b.sum(dotted)?;
            logit = Some(match logit {
                Some(acc) => b.add(acc, term)?,
                None => term,
            });
        }
        match logit {
            Some(l) => b.affine(l, 1.0, self.spec.bias),
            None => {
                // constant probe: still anchor the logit to the image so the graph is connected
                let full = b.sum(image)?;
                b.affine(full, 0.0, self.spec.bias)
            }
        }
    }
}

/// Probe logit of one image, via the graph.
pub fn probe_logit(image: &Tensor, probe: &dyn AttributeProbe) -> Result<f64> {
    let mut b = GraphBuilder::new();
    let input = b.input("image", image.shape())?;
    let logit = probe.build(&mut b, input)?;
    let graph = b.finish();
    let mut bindings = Bindings::new();
    bindings.insert("image".into(), image.clone());
    let eval = forward_eval(&graph, &bindings)?;
    let value = eval.value(logit).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("logit of `{}`", probe.name())));
    }
    Ok(value)
}

/// Probe whose logit jumps from `0` to `1` where the mouth redness crosses
/// `level`. Deliberately non-differentiable.
pub struct StepProbe {
    inner: LinearProbe,
    level: f64,
}

impl StepProbe {
    pub fn new(inner: LinearProbe, level: f64) -> Self {
        StepProbe { inner, level }
    }
}

impl AttributeProbe for StepProbe {
    fn name(&self) -> &str {
        "step"
    }

    fn threshold(&self) -> f64 {
        0.5
    }

    fn build(&self, b: &mut GraphBuilder, image: NodeId) -> Result<NodeId> {
        let smooth = self.inner.build(b, image)?;
        b.step(smooth, self.level)
    }
}
