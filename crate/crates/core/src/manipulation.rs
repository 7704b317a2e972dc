//! Single- and multi-channel edits of style codes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{ChannelRanking, GradientField};
use crate::error::{Error, Result};
use crate::generator::{ChannelId, Generator, StyleVector};

/// Single-channel edit strengths are limited to this many sigmas.
pub const PAUTA_LIMIT: f64 = 3.0;

/// Soft slider range offered for multi-channel edits.
pub const MULTI_CHANNEL_SOFT_RANGE: (f64, f64) = (-5.0, 5.0);

/// Per-channel mean and sample standard deviation of the style code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub n: usize,
    pub seed: u64,
    pub fingerprint: String,
    pub mean: StyleVector,
    pub std: StyleVector,
}

impl ChannelStats {
    /// Statistics of an explicit sample set.
    pub fn from_styles(styles: &[StyleVector], seed: u64, fingerprint: &str) -> Result<Self> {
        if styles.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "channel statistics need >= 2 samples, got {}",
                styles.len()
            )));
        }
        let mean = StyleVector::mean(styles)?;
        let n = styles.len() as f64;
        // shifted by the first sample so a constant channel gives exactly zero
        let first = &styles[0];
        let std = StyleVector::new(
            first
                .layers()
                .iter()
                .enumerate()
                .map(|(l, origin)| {
                    origin
                        .iter()
                        .enumerate()
                        .map(|(c, x0)| {
                            let (mut sum, mut sq) = (0.0, 0.0);
                            for s in styles {
                                let d = s.layer(l)[c] - x0;
                                sum += d;
                                sq += d * d;
                            }
                            ((sq - sum * sum / n) / (n - 1.0)).max(0.0).sqrt()
                        })
                        .collect()
                })
                .collect(),
        );
        Ok(ChannelStats {
            n: styles.len(),
            seed,
            fingerprint: fingerprint.to_string(),
            mean,
            std,
        })
    }

    pub fn delta(&self, id: ChannelId) -> Result<f64> {
        self.std.get(id)
    }
}

/// Style statistics over `n_samples` latents of stream `seed`.
pub fn channel_stats(generator: &Generator, n_samples: usize, seed: u64) -> Result<ChannelStats> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "channel statistics need >= 2 samples, got {n_samples}"
        )));
    }
    let styles = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| generator.style_from_z(&generator.sample_z(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    ChannelStats::from_styles(&styles, seed, generator.fingerprint())
}

/// Clamps an edit strength (in sigma units) to `[-limit, limit]`.
pub fn clamp_pauta(alpha: f64, limit: f64) -> f64 {
    alpha.clamp(-limit, limit)
}

/// `+1` or `-1`: the direction that increases the objective at `channel`.
/// A zero gradient counts as positive.
pub fn gradient_sign(field: &GradientField, channel: ChannelId) -> Result<f64> {
    Ok(if field.get(channel)? < 0.0 { -1.0 } else { 1.0 })
}

fn check_sign(sign: f64) -> Result<()> {
    if sign == 1.0 || sign == -1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("sign must be +1 or -1, got {sign}")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha must be finite, got {alpha}")))
    }
}

/// `s*_ch = s_ch + sign * clamp(alpha) * delta_ch`; every other component
/// is copied unchanged.
pub fn single_channel_edit(
    s: &StyleVector,
    channel: ChannelId,
    alpha: f64,
    stats: &ChannelStats,
    sign: f64,
) -> Result<StyleVector> {
    check_alpha(alpha)?;
    check_sign(sign)?;
    let current = s.get(channel)?;
    let delta = stats.delta(channel)?;
    if delta <= 0.0 {
        return Err(Error::ZeroVariance {
            layer: channel.layer,
            channel: channel.channel,
        });
    }
    let alpha = clamp_pauta(alpha, PAUTA_LIMIT);
    let mut out = s.clone();
    if alpha != 0.0 {
        out.set(channel, current + sign * alpha * delta)?;
    }
    Ok(out)
}

/// Sparse unit vector over a set of style channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditDirection {
    pub components: Vec<(ChannelId, f64)>,
}

impl EditDirection {
    pub fn norm(&self) -> f64 {
        self.components.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn support(&self) -> Vec<ChannelId> {
        self.components.iter().map(|(c, _)| *c).collect()
    }

    pub fn get(&self, id: ChannelId) -> f64 {
        self.components
            .iter()
            .find(|(c, _)| *c == id)
            .map_or(0.0, |(_, v)| *v)
    }

    fn check_unit(&self) -> Result<()> {
        let n = self.norm();
        if (n - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("direction norm {n} is not 1")));
        }
        Ok(())
    }
}

/// The averaged field restricted to the ranking's channels, scaled to unit
/// Euclidean norm.
pub fn multi_channel_direction(field: &GradientField, channels: &ChannelRanking) -> Result<EditDirection> {
    if channels.entries.is_empty() {
        return Err(Error::InvalidArgument("empty channel set".into()));
    }
    let raw = channels
        .entries
        .iter()
        .map(|e| Ok((e.channel, field.get(e.channel)?)))
        .collect::<Result<Vec<_>>>()?;
    // scale by the largest component first so tiny fields do not underflow
    let peak = raw.iter().fold(0.0f64, |m, (_, v)| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::ZeroField(field.objective.clone()));
    }
    let scaled: Vec<(ChannelId, f64)> = raw.into_iter().map(|(c, v)| (c, v / peak)).collect();
    let norm = scaled.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
    Ok(EditDirection {
        components: scaled.into_iter().map(|(c, v)| (c, v / norm)).collect(),
    })
}

/// `s* = s + alpha * direction`. Not clamped.
pub fn multi_channel_edit(s: &StyleVector, direction: &EditDirection, alpha: f64) -> Result<StyleVector> {
    check_alpha(alpha)?;
    direction.check_unit()?;
    let mut out = s.clone();
    if alpha == 0.0 {
        return Ok(out);
    }
    for (id, v) in &direction.components {
        out.set(*id, s.get(*id)? + alpha * v)?;
    }
    Ok(out)
}

fn positive() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum EditSpec {
    Single {
        channel: ChannelId,
        alpha: f64,
        #[serde(default = "positive")]
        sign: f64,
    },
    Multi {
        ranking: ChannelRanking,
        direction: EditDirection,
        alpha: f64,
    },
}

impl EditSpec {
    pub fn alpha(&self) -> f64 {
        match self {
            EditSpec::Single { alpha, .. } | EditSpec::Multi { alpha, .. } => *alpha,
        }
    }

    /// Same edit at another strength.
    pub fn with_alpha(&self, a: f64) -> EditSpec {
        let mut out = self.clone();
        match &mut out {
            EditSpec::Single { alpha, .. } | EditSpec::Multi { alpha, .. } => *alpha = a,
        }
        out
    }

    /// Strength that is actually applied, after the Pauta clamp for single
    /// channels.
    pub fn effective_alpha(&self) -> f64 {
        match self {
            EditSpec::Single { alpha, .. } => clamp_pauta(*alpha, PAUTA_LIMIT),
            EditSpec::Multi { alpha, .. } => *alpha,
        }
    }

    pub fn fingerprint(&self) -> Option<&str> {
        match self {
            EditSpec::Single { .. } => None,
            EditSpec::Multi { ranking, .. } => Some(&ranking.fingerprint),
        }
    }
}

pub fn apply_edit(s: &StyleVector, edit: &EditSpec, stats: &ChannelStats) -> Result<StyleVector> {
    match edit {
        EditSpec::Single { channel, alpha, sign } => single_channel_edit(s, *channel, *alpha, stats, *sign),
        EditSpec::Multi { direction, alpha, .. } => multi_channel_edit(s, direction, *alpha),
    }
}
