use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::probe::AttributeProbe;
use crate::error::{Error, Result};
use crate::generator::{Generator, StyleVector};
use crate::tensor::{forward_eval, Graph, GraphBuilder, NodeId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositiveSample {
    /// Index of the latent within the sampling stream.
    pub index: u64,
    pub z: Vec<f64>,
    pub w: Vec<f64>,
    pub style: StyleVector,
    pub logit: f64,
}

/// Samples whose probe logit exceeded the threshold, from one generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositiveSet {
    pub probe: String,
    pub threshold: f64,
    pub fingerprint: String,
    pub seed: u64,
    pub attempts: usize,
    pub samples: Vec<PositiveSample>,
}

impl PositiveSet {
    pub fn styles(&self) -> Vec<StyleVector> {
        self.samples.iter().map(|s| s.style.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `styles -> image -> logit`, built once and reused for every sample.
pub(crate) struct LogitGraph {
    graph: Graph,
    logit: NodeId,
}

impl LogitGraph {
    pub(crate) fn new(generator: &Generator, probe: &dyn AttributeProbe) -> Result<Self> {
        let mut b = GraphBuilder::new();
        let styles = generator.style_inputs(&mut b)?;
        let image = generator.build_synthesis(&mut b, &styles)?;
        let logit = probe.build(&mut b, image)?;
        Ok(LogitGraph {
            graph: b.finish(),
            logit,
        })
    }

    pub(crate) fn logit(&self, generator: &Generator, s: &StyleVector) -> Result<f64> {
        let eval = forward_eval(&self.graph, &generator.style_bindings(s)?)?;
        Ok(eval.value(self.logit).item())
    }
}

const BATCH: usize = 16;

/// Draws `z ~ N(0, I)` from stream `seed` until `n_target` positives are
/// found or `max_attempts` latents have been tried. Candidates are scored in
/// parallel batches and accepted in index order, so the result does not
/// depend on scheduling.
pub fn collect_positive(
    generator: &Generator,
    probe: &dyn AttributeProbe,
    n_target: usize,
    max_attempts: usize,
    seed: u64,
) -> Result<PositiveSet> {
    if n_target == 0 {
        return Err(Error::InvalidArgument("n_target must be >= 1".into()));
    }
    let scorer = LogitGraph::new(generator, probe)?;
    let threshold = probe.threshold();
    let mut samples = Vec::with_capacity(n_target);
    let mut attempts = 0;
    let mut start = 0usize;
    while start < max_attempts && samples.len() < n_target {
        let end = (start + BATCH).min(max_attempts);
        let scored = (start..end)
            .into_par_iter()
            .map(|i| {
                let z = generator.sample_z(seed, i as u64);
                let w = generator.map_latent(&z)?;
                let style = generator.style_from_w(&w)?;
                let logit = scorer.logit(generator, &style)?;
                if !logit.is_finite() {
                    return Err(Error::NonFinite(format!("logit of `{}`", probe.name())));
                }
                Ok(PositiveSample {
                    index: i as u64,
                    z: z.into_data(),
                    w: w.into_data(),
                    style,
                    logit,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for sample in scored {
            if samples.len() == n_target {
                break;
            }
            attempts = sample.index as usize + 1;
            if sample.logit > threshold {
                samples.push(sample);
            }
        }
        start = end;
    }
    if samples.len() < n_target {
        return Err(Error::InsufficientPositives {
            found: samples.len(),
            attempts,
            rate: samples.len() as f64 / attempts.max(1) as f64,
        });
    }
    Ok(PositiveSet {
        probe: probe.name().to_string(),
        threshold,
        fingerprint: generator.fingerprint().to_string(),
        seed,
        attempts,
        samples,
    })
}
