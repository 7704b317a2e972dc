use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    #[serde(rename = "trgb")]
    ToRgb,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleLayer {
    pub channels: usize,
    pub kind: LayerKind,
    pub resolution: usize,
}

/// Address of one style channel: `(style-layer index, channel index)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelId {
    pub layer: usize,
    pub channel: usize,
}

impl ChannelId {
    pub fn new(layer: usize, channel: usize) -> Self {
        ChannelId { layer, channel }
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.layer, self.channel)
    }
}

impl Serialize for ChannelId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        (self.layer, self.channel).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ChannelId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let (layer, channel) = <(usize, usize)>::deserialize(d)?;
        Ok(ChannelId { layer, channel })
    }
}

/// Layer/channel structure of the style space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub layers: Vec<StyleLayer>,
    /// First layer index of the "high" layers filtered out of detection by default.
    pub detection_cut: usize,
}

fn block(kind: LayerKind, channels: usize, resolution: usize) -> StyleLayer {
    StyleLayer {
        channels,
        kind,
        resolution,
    }
}

impl LayerSpec {
    pub fn new(name: &str, layers: Vec<StyleLayer>, detection_cut: usize) -> Result<Self> {
        let spec = LayerSpec {
            name: name.to_string(),
            layers,
            detection_cut,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 4x4 base (conv + tRGB) and three conv,conv,tRGB blocks up to 32x32;
    /// 304 channels in 11 style layers.
    pub fn toy() -> Self {
        use LayerKind::*;
        let layers = vec![
            block(Conv, 32, 4),
            block(ToRgb, 32, 4),
            block(Conv, 32, 8),
            block(Conv, 32, 8),
            block(ToRgb, 32, 8),
            block(Conv, 32, 16),
            block(Conv, 24, 16),
            block(ToRgb, 24, 16),
            block(Conv, 24, 32),
            block(Conv, 24, 32),
            block(ToRgb, 24, 32),
        ];
        LayerSpec {
            name: "toy".into(),
            layers,
            detection_cut: 8,
        }
    }

    /// Small 8x8 generator for explicit-Jacobian checks.
    pub fn tiny8() -> Self {
        use LayerKind::*;
        LayerSpec {
            name: "tiny8".into(),
            layers: vec![
                block(Conv, 8, 4),
                block(ToRgb, 8, 4),
                block(Conv, 8, 8),
                block(Conv, 6, 8),
                block(ToRgb, 6, 8),
            ],
            detection_cut: 2,
        }
    }

    /// The 1024x1024 StyleGAN2 style-space layout: 26 layers, 9088 channels.
    pub fn paper_mirror() -> Self {
        use LayerKind::*;
        let mut layers = vec![block(Conv, 512, 4), block(ToRgb, 512, 4)];
        // (conv in, conv in, trgb) channel counts per resolution block
        let blocks = [
            (8, 512, 512, 512),
            (16, 512, 512, 512),
            (32, 512, 512, 512),
            (64, 512, 512, 512),
            (128, 512, 256, 256),
            (256, 256, 128, 128),
            (512, 128, 64, 64),
            (1024, 64, 32, 32),
        ];
        for (res, c1, c2, rgb) in blocks {
            layers.push(block(Conv, c1, res));
            layers.push(block(Conv, c2, res));
            layers.push(block(ToRgb, rgb, res));
        }
        LayerSpec {
            name: "paper-mirror".into(),
            layers,
            detection_cut: 15,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "tiny8" => Ok(Self::tiny8()),
            "paper-mirror" => Ok(Self::paper_mirror()),
            other => Err(Error::Config(format!("unknown layer preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("layer spec has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.channels == 0 || l.resolution == 0 {
                return Err(Error::Config(format!("layer {i} has zero channels or resolution")));
            }
        }
        if self.layers.windows(2).any(|w| w[1].resolution < w[0].resolution) {
            return Err(Error::Config("resolutions must be non-decreasing".into()));
        }
        if self.detection_cut > self.layers.len() {
            return Err(Error::Config("detection_cut beyond last layer".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn channel_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.channels).collect()
    }

    pub fn channels(&self, layer: usize) -> Result<usize> {
        self.layers
            .get(layer)
            .map(|l| l.channels)
            .ok_or(Error::UnknownChannel { layer, channel: 0 })
    }

    pub fn total_channels(&self) -> usize {
        self.layers.iter().map(|l| l.channels).sum()
    }

    pub fn output_resolution(&self) -> usize {
        self.layers.last().map(|l| l.resolution).unwrap_or(0)
    }

    fn offset(&self, layer: usize) -> usize {
        self.layers[..layer].iter().map(|l| l.channels).sum()
    }

    pub fn flat_index(&self, id: ChannelId) -> Result<usize> {
        match self.layers.get(id.layer) {
            Some(l) if id.channel < l.channels => Ok(self.offset(id.layer) + id.channel),
            _ => Err(Error::UnknownChannel {
                layer: id.layer,
                channel: id.channel,
            }),
        }
    }

    pub fn channel_at(&self, flat: usize) -> Result<ChannelId> {
        let mut rest = flat;
        for (layer, l) in self.layers.iter().enumerate() {
            if rest < l.channels {
                return Ok(ChannelId::new(layer, rest));
            }
            rest -= l.channels;
        }
        Err(Error::InvalidArgument(format!("flat index {flat} out of range")))
    }

    /// Every channel in flat order.
    pub fn all_channels(&self) -> impl Iterator<Item = ChannelId> + '_ {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(layer, l)| (0..l.channels).map(move |c| ChannelId::new(layer, c)))
    }

    /// tRGB layers plus every layer at or above `detection_cut`.
    pub fn default_exclusions(&self) -> BTreeSet<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(i, l)| l.kind == LayerKind::ToRgb || *i >= self.detection_cut)
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks that the layers describe a buildable synthesis network: a conv
    /// first, resolutions that double between blocks, tRGB widths matching
    /// the feature maps they read, and a tRGB last.
    pub fn check_synthesizable(&self, max_resolution: usize) -> Result<()> {
        let unsupported = |m: String| Err(Error::UnsupportedSpec(m));
        if self.output_resolution() > max_resolution {
            return unsupported(format!(
                "output resolution {} exceeds {max_resolution}",
                self.output_resolution()
            ));
        }
        if self.layers[0].kind != LayerKind::Conv {
            return unsupported("first style layer must be a conv".into());
        }
        if self.layers.last().map(|l| l.kind) != Some(LayerKind::ToRgb) {
            return unsupported("last style layer must be a tRGB".into());
        }
        let mut features = self.layers[0].channels;
        let mut resolution = self.layers[0].resolution;
        for (i, l) in self.layers.iter().enumerate() {
            if l.resolution != resolution && l.resolution != 2 * resolution {
                return unsupported(format!("layer {i} jumps resolution {resolution} -> {}", l.resolution));
            }
            if l.resolution != resolution && l.kind != LayerKind::Conv {
                return unsupported(format!("layer {i}: resolution changes only at a conv"));
            }
            resolution = l.resolution;
            match l.kind {
                LayerKind::Conv => {
                    if l.channels != features {
                        return unsupported(format!(
                            "conv layer {i} modulates {} channels but receives {features}",
                            l.channels
                        ));
                    }
                    features = self.conv_output_channels(i)?;
                }
                LayerKind::ToRgb => {
                    if l.channels != features {
                        return unsupported(format!(
                            "tRGB layer {i} has {} channels, features have {features}",
                            l.channels
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// A conv's output width is the width of the next style layer.
    pub(crate) fn conv_output_channels(&self, layer: usize) -> Result<usize> {
        self.layers
            .get(layer + 1)
            .map(|l| l.channels)
            .ok_or_else(|| Error::UnsupportedSpec(format!("conv layer {layer} has no successor")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_mirror_structure() {
        let spec = LayerSpec::paper_mirror();
        assert_eq!(spec.len(), 26);
        assert_eq!(spec.total_channels(), 9088);
        let counts = spec.channel_counts();
        assert!(counts[..15].iter().all(|&c| c == 512));
        assert_eq!(&counts[15..], &[256, 256, 256, 128, 128, 128, 64, 64, 64, 32, 32]);
        spec.validate().unwrap();
        // resolution ladder: 4 (x2 layers), then three layers per doubling up to 1024
        let res: Vec<usize> = spec.layers.iter().map(|l| l.resolution).collect();
        assert_eq!(&res[..2], &[4, 4]);
        for (b, r) in [8, 16, 32, 64, 128, 256, 512, 1024].iter().enumerate() {
            assert_eq!(&res[2 + 3 * b..5 + 3 * b], &[*r; 3]);
        }
        assert!(spec.check_synthesizable(2048).is_ok());
        assert!(matches!(spec.check_synthesizable(64), Err(Error::UnsupportedSpec(_))));
    }

    #[test]
    fn toy_is_synthesizable() {
        let spec = LayerSpec::toy();
        spec.check_synthesizable(64).unwrap();
        assert_eq!(spec.total_channels(), 312);
        assert_eq!(spec.output_resolution(), 32);
        LayerSpec::tiny8().check_synthesizable(64).unwrap();
    }

    #[test]
    fn flat_round_trip_is_exact() {
        for spec in [LayerSpec::toy(), LayerSpec::paper_mirror(), LayerSpec::tiny8()] {
            for (flat, id) in spec.all_channels().enumerate() {
                assert_eq!(spec.flat_index(id).unwrap(), flat);
                assert_eq!(spec.channel_at(flat).unwrap(), id);
            }
            assert!(spec.channel_at(spec.total_channels()).is_err());
        }
    }

    #[test]
    fn unknown_channel() {
        let spec = LayerSpec::toy();
        assert!(matches!(
            spec.flat_index(ChannelId::new(6, 24)),
            Err(Error::UnknownChannel { layer: 6, channel: 24 })
        ));
        assert!(spec.flat_index(ChannelId::new(11, 0)).is_err());
    }

    #[test]
    fn default_exclusions_cover_trgb_and_top_block() {
        let toy = LayerSpec::toy();
        let ex = toy.default_exclusions();
        assert_eq!(ex.into_iter().collect::<Vec<_>>(), vec![1, 4, 7, 8, 9, 10]);
        let pm = LayerSpec::paper_mirror().default_exclusions();
        assert!(pm.contains(&15) && pm.contains(&25) && pm.contains(&1) && !pm.contains(&14));
    }

    #[test]
    fn rejects_decreasing_resolution() {
        let layers = vec![
            block(LayerKind::Conv, 4, 8),
            block(LayerKind::ToRgb, 4, 4),
        ];
        assert!(LayerSpec::new("bad", layers, 0).is_err());
    }
}
