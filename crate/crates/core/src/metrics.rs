//! Attribute dependency (AD) and logit standardisation.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::generator::{Generator, StyleVector};
use crate::manipulation::{apply_edit, ChannelStats, EditSpec};
use crate::probes::AttributeProbe;
use crate::tensor::{forward_eval, Graph, GraphBuilder, NodeId};

/// Probes whose logit spread is below this are treated as constant.
pub const DEGENERATE_SIGMA: f64 = 1e-9;

/// All probe logits of one generated image, from one shared graph.
pub struct LogitBank {
    graph: Graph,
    names: Vec<String>,
    logits: Vec<NodeId>,
}

impl LogitBank {
    pub fn new(generator: &Generator, probes: &[&dyn AttributeProbe]) -> Result<Self> {
        let mut b = GraphBuilder::new();
        let styles = generator.style_inputs(&mut b)?;
        let image = generator.build_synthesis(&mut b, &styles)?;
        let logits = probes
            .iter()
            .map(|p| p.build(&mut b, image))
            .collect::<Result<Vec<_>>>()?;
        Ok(LogitBank {
            graph: b.finish(),
            names: probes.iter().map(|p| p.name().to_string()).collect(),
            logits,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn logits(&self, generator: &Generator, s: &StyleVector) -> Result<Vec<f64>> {
        let eval = forward_eval(&self.graph, &generator.style_bindings(s)?)?;
        self.logits
            .iter()
            .zip(&self.names)
            .map(|(id, name)| {
                let v = eval.value(*id).item();
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite(format!("logit of `{name}`")))
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSigma {
    pub probe: String,
    pub sigma: f64,
    pub degenerate: bool,
}

/// Sample standard deviation of every probe's logit over a reference set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitStats {
    pub n: usize,
    pub seed: u64,
    pub probes: Vec<ProbeSigma>,
}

impl LogitStats {
    /// From a `[sample][probe]` logit table.
    pub fn from_logits(names: &[String], table: &[Vec<f64>], seed: u64) -> Result<Self> {
        if table.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "logit statistics need >= 2 samples, got {}",
                table.len()
            )));
        }
        let n = table.len() as f64;
        let probes = names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let mean = table.iter().map(|row| row[j]).sum::<f64>() / n;
                let var = table.iter().map(|row| (row[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
                let sigma = var.sqrt();
                ProbeSigma {
                    probe: name.clone(),
                    sigma,
                    degenerate: sigma < DEGENERATE_SIGMA,
                }
            })
            .collect();
        Ok(LogitStats {
            n: table.len(),
            seed,
            probes,
        })
    }

    pub fn get(&self, probe: &str) -> Option<&ProbeSigma> {
        self.probes.iter().find(|p| p.probe == probe)
    }
}

/// Logit spread of each probe over `n_samples` latents of stream `seed`.
pub fn logit_std(
    probes: &[&dyn AttributeProbe],
    generator: &Generator,
    n_samples: usize,
    seed: u64,
) -> Result<LogitStats> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "logit statistics need >= 2 samples, got {n_samples}"
        )));
    }
    let bank = LogitBank::new(generator, probes)?;
    let table = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let s = generator.style_from_z(&generator.sample_z(seed, i))?;
            bank.logits(generator, &s)
        })
        .collect::<Result<Vec<_>>>()?;
    LogitStats::from_logits(bank.names(), &table, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeChange {
    pub probe: String,
    /// Mean of `|delta logit| / sigma` over samples; `None` for excluded probes.
    pub mean_normalized_change: Option<f64>,
    pub excluded: bool,
}

fn ratio_out<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

fn ratio_in<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Raw::Text(t) => Err(serde::de::Error::custom(format!("bad ratio `{t}`"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ADReport {
    pub target: String,
    pub alpha: f64,
    pub samples: usize,
    pub ad_t: f64,
    pub ad_o: f64,
    /// `ad_t / ad_o`, or `+inf` when `ad_o` is zero.
    #[serde(serialize_with = "ratio_out", deserialize_with = "ratio_in")]
    pub ratio: f64,
    pub ratio_unbounded: bool,
    pub per_probe: Vec<ProbeChange>,
    pub warnings: Vec<String>,
}

impl fmt::Display for ADReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ratio = if self.ratio_unbounded {
            "inf".to_string()
        } else {
            format!("{:.2}", self.ratio)
        };
        writeln!(f, "{:<20} {:>8} {:>8} {:>8} {:>8}", "target", "alpha", "AD_t", "AD_o", "Ratio")?;
        writeln!(
            f,
            "{:<20} {:>8.2} {:>8.2} {:>8.2} {:>8}",
            self.target, self.alpha, self.ad_t, self.ad_o, ratio
        )?;
        writeln!(f, "({:.2}, {:.2}, {})", self.ad_t, self.ad_o, ratio)?;
        for p in &self.per_probe {
            match p.mean_normalized_change {
                Some(v) => writeln!(f, "  {:<18} {:>8.4}", p.probe, v)?,
                None => writeln!(f, "  {:<18} {:>8}", p.probe, "excluded")?,
            }
        }
        Ok(())
    }
}

/// AD from raw logit changes. `deltas[sample][probe]` lines up with
/// `stats.probes` by name through `names`.
pub fn ad_from_deltas(
    target: &str,
    alpha: f64,
    names: &[String],
    deltas: &[Vec<f64>],
    stats: &LogitStats,
) -> Result<ADReport> {
    if names.len() < 2 {
        return Err(Error::InvalidArgument("attribute dependency needs >= 2 probes".into()));
    }
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("attribute dependency needs >= 1 sample".into()));
    }
    let t = names
        .iter()
        .position(|n| n == target)
        .ok_or_else(|| Error::Unknown(format!("target probe `{target}`")))?;
    let sigmas = names
        .iter()
        .map(|n| {
            stats
                .get(n)
                .ok_or_else(|| Error::Unknown(format!("no logit statistics for `{n}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if sigmas[t].degenerate {
        return Err(Error::DegenerateProbes(format!("target `{target}` has constant logit")));
    }
    let others: Vec<usize> = (0..names.len()).filter(|&i| i != t && !sigmas[i].degenerate).collect();
    if others.is_empty() {
        return Err(Error::DegenerateProbes(
            "every non-target probe has a constant logit".into(),
        ));
    }
    let mut warnings = Vec::new();
    for (i, s) in sigmas.iter().enumerate() {
        if i != t && s.degenerate {
            warnings.push(format!("probe `{}` excluded: sigma {:.3e}", s.probe, s.sigma));
        }
    }

    let n = deltas.len() as f64;
    let norm = |row: &[f64], i: usize| row[i].abs() / sigmas[i].sigma;
    let ad_t = deltas.iter().map(|row| norm(row, t)).sum::<f64>() / n;
    let ad_o = deltas
        .iter()
        .map(|row| others.iter().map(|&i| norm(row, i)).sum::<f64>() / others.len() as f64)
        .sum::<f64>()
        / n;
    let per_probe = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let excluded = sigmas[i].degenerate;
            ProbeChange {
                probe: name.clone(),
                mean_normalized_change: (!excluded).then(|| deltas.iter().map(|row| norm(row, i)).sum::<f64>() / n),
                excluded,
            }
        })
        .collect();
    let ratio_unbounded = ad_o == 0.0;
    Ok(ADReport {
        target: target.to_string(),
        alpha,
        samples: deltas.len(),
        ad_t,
        ad_o,
        ratio: if ratio_unbounded { f64::INFINITY } else { ad_t / ad_o },
        ratio_unbounded,
        per_probe,
        warnings,
    })
}

/// Applies `edit` to every original and measures normalised logit changes.
pub fn attribute_dependency(
    generator: &Generator,
    originals: &[StyleVector],
    edit: &EditSpec,
    target: &str,
    probes: &[&dyn AttributeProbe],
    channel_stats: &ChannelStats,
    stats: &LogitStats,
) -> Result<ADReport> {
    if let Some(fp) = edit.fingerprint() {
        if fp != generator.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: generator.fingerprint().to_string(),
                found: fp.to_string(),
            });
        }
    }
    let bank = LogitBank::new(generator, probes)?;
    let deltas = originals
        .par_iter()
        .map(|s| {
            let before = bank.logits(generator, s)?;
            let edited = apply_edit(s, edit, channel_stats)?;
            let after = bank.logits(generator, &edited)?;
            Ok(after.iter().zip(&before).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    ad_from_deltas(target, edit.effective_alpha(), bank.names(), &deltas, stats)
}

/// One printed `(AD_t, AD_o, Ratio)` cell of the published comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PublishedCell {
    pub method: &'static str,
    pub attribute: &'static str,
    pub ad_t: f64,
    pub ad_o: f64,
    pub ratio: f64,
}

const fn cell(method: &'static str, attribute: &'static str, ad_t: f64, ad_o: f64, ratio: f64) -> PublishedCell {
    PublishedCell {
        method,
        attribute,
        ad_t,
        ad_o,
        ratio,
    }
}

/// Published AD results on the pretrained face generator. `(2,36` is read as
/// 2.36 and `1.34. 1.89` as `1.34, 1.89`.
pub const PUBLISHED_AD: [PublishedCell; 15] = [
    cell("StyleSpace", "Eyeglasses", 0.40, 0.76, 0.53),
    cell("StyleSpace", "Goatee", 2.76, 0.50, 5.49),
    cell("StyleSpace", "Smiling", 2.94, 1.19, 2.46),
    cell("StyleSpace", "Gender", 2.54, 1.34, 1.89),
    cell("StyleSpace", "Black Hair", 4.38, 0.54, 8.03),
    cell("Single-channel", "Eyeglasses", 2.61, 0.35, 7.31),
    cell("Single-channel", "Goatee", 2.36, 0.38, 6.20),
    cell("Single-channel", "Smiling", 5.67, 0.67, 8.42),
    cell("Single-channel", "Gender", 5.08, 1.12, 4.54),
    cell("Single-channel", "Black Hair", 4.38, 0.54, 8.03),
    cell("Multi-channel", "Eyeglasses", 5.28, 0.71, 7.4),
    cell("Multi-channel", "Goatee", 6.72, 1.19, 3.50),
    cell("Multi-channel", "Smiling", 7.80, 0.88, 8.88),
    cell("Multi-channel", "Gender", 5.95, 1.36, 4.39),
    cell("Multi-channel", "Black Hair", 10.05, 1.04, 9.61),
];

impl PublishedCell {
    pub fn recomputed_ratio(&self) -> f64 {
        self.ad_t / self.ad_o
    }

    pub fn ratio_error(&self) -> f64 {
        (self.recomputed_ratio() - self.ratio).abs()
    }

    /// Whether some `(AD_t, AD_o)` that rounds to the printed pair gives a
    /// ratio that rounds to the printed ratio.
    pub fn rounding_consistent(&self) -> bool {
        let half = |v: f64| {
            let text = format!("{v}");
            let decimals = text.split('.').nth(1).map_or(0, str::len);
            0.5 * 10f64.powi(-(decimals.max(2) as i32))
        };
        let (ht, ho, hr) = (half(self.ad_t), half(self.ad_o), half(self.ratio));
        let lo = (self.ad_t - ht) / (self.ad_o + ho);
        let hi = (self.ad_t + ht) / (self.ad_o - ho);
        lo <= self.ratio + hr && hi >= self.ratio - hr
    }
}
