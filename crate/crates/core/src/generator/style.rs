use serde::{Deserialize, Serialize};

use super::layers::{ChannelId, LayerSpec};
use crate::error::{Error, Result};

/// Ragged, layer-indexed style code `s = {s^0, ..., s^(L-1)}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleVector {
    layers: Vec<Vec<f64>>,
}

impl StyleVector {
    pub fn new(layers: Vec<Vec<f64>>) -> Self {
        StyleVector { layers }
    }

    pub fn zeros(spec: &LayerSpec) -> Self {
        StyleVector {
            layers: spec.layers.iter().map(|l| vec![0.0; l.channels]).collect(),
        }
    }

    pub fn from_flat(spec: &LayerSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.total_channels() {
            return Err(Error::ShapeMismatch {
                op: "style_vector",
                detail: format!("flat length {} vs {} channels", flat.len(), spec.total_channels()),
            });
        }
        let mut rest = flat;
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let (head, tail) = rest.split_at(l.channels);
                rest = tail;
                head.to_vec()
            })
            .collect();
        Ok(StyleVector { layers })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flatten().copied().collect()
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &[f64] {
        &self.layers[i]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn total_len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

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

    pub fn set(&mut self, id: ChannelId, value: f64) -> Result<()> {
        let slot = self
            .layers
            .get_mut(id.layer)
            .and_then(|l| l.get_mut(id.channel))
            .ok_or(Error::UnknownChannel {
                layer: id.layer,
                channel: id.channel,
            })?;
        *slot = value;
        Ok(())
    }

    /// True when layer `i` has exactly `spec`'s channel count, for every layer.
    pub fn matches(&self, spec: &LayerSpec) -> bool {
        self.layers.len() == spec.len()
            && self
                .layers
                .iter()
                .zip(&spec.layers)
                .all(|(v, l)| v.len() == l.channels)
    }

    pub fn check_matches(&self, spec: &LayerSpec) -> Result<()> {
        if self.matches(spec) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op: "style_vector",
                detail: format!("style layers {:?} vs spec {:?}", self.shape(), spec.channel_counts()),
            })
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn same_shape(&self, other: &StyleVector) -> bool {
        self.shape() == other.shape()
    }

    /// Component-wise mean of equally shaped vectors.
    pub fn mean(vectors: &[StyleVector]) -> Result<StyleVector> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::InvalidArgument("mean of zero style vectors".into()))?;
        let mut acc = first.clone();
        for v in &vectors[1..] {
            if !v.same_shape(first) {
                return Err(Error::ShapeMismatch {
                    op: "style_mean",
                    detail: "style vectors differ in shape".into(),
                });
            }
            for (a, b) in acc.layers.iter_mut().zip(&v.layers) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
        let n = vectors.len() as f64;
        acc.layers.iter_mut().flatten().for_each(|x| *x /= n);
        Ok(acc)
    }
}
