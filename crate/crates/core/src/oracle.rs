//! Brute-force checks on the gradient machinery: finite-difference channel
//! rankings, rank agreement, and recovery of planted channels.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{ChannelRanking, Exclusions, Objective, ObjectiveGraph, RankedChannel};
use crate::error::{Error, Result};
use crate::generator::{ChannelId, Generator, GroundTruth, LayerSpec, Plant, PlantedSpec, StyleVector};
use crate::rng;

pub const DEFAULT_STEP: f64 = 1e-3;

/// Central-difference derivative of the objective along every channel, in
/// flat order. Excluded channels are reported as zero and not evaluated.
pub fn perturbation_gradient(
    generator: &Generator,
    s: &StyleVector,
    objective: Objective<'_>,
    step: f64,
    exclusions: &Exclusions,
) -> Result<Vec<(ChannelId, f64)>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {step}")));
    }
    s.check_matches(generator.spec())?;
    let og = ObjectiveGraph::new(generator, objective)?;
    let channels: Vec<ChannelId> = generator.spec().all_channels().collect();
    channels
        .par_iter()
        .map(|&id| {
            if exclusions.excludes(id) {
                return Ok((id, 0.0));
            }
            let x = s.get(id)?;
            let mut probe = s.clone();
            probe.set(id, x + step)?;
            let up = og.value(generator, &probe)?;
            probe.set(id, x - step)?;
            let down = og.value(generator, &probe)?;
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::NonFinite(format!("objective {} at {id}", objective.tag())));
            }
            Ok((id, (up - down) / (2.0 * step)))
        })
        .collect()
}

/// Channels ranked by `|finite-difference derivative|`.
pub fn perturbation_ranking(
    generator: &Generator,
    s: &StyleVector,
    objective: Objective<'_>,
    step: f64,
    exclusions: &Exclusions,
) -> Result<ChannelRanking> {
    let grads = perturbation_gradient(generator, s, objective, step, exclusions)?;
    let entries = grads
        .into_iter()
        .map(|(channel, g)| RankedChannel {
            channel,
            magnitude: g.abs(),
        })
        .collect();
    Ok(ChannelRanking::from_magnitudes(
        &objective.tag(),
        generator.fingerprint(),
        entries,
        usize::MAX,
        exclusions.clone(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub k: usize,
    pub overlap: f64,
    pub spearman: f64,
    /// `(channel, magnitude in a, magnitude in b)` over the union of both top-k sets.
    pub pairs: Vec<(ChannelId, f64, f64)>,
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        order[i..=j].iter().for_each(|&o| ranks[o] = r);
        i = j + 1;
    }
    ranks
}

/// Spearman's rho as the Pearson correlation of average ranks. Two constant
/// inputs correlate perfectly; one constant input gives 0.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    match (va == 0.0, vb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (cov / (va * vb).sqrt()).clamp(-1.0, 1.0),
    }
}

/// Top-k overlap and Spearman correlation over the union of the two top-k
/// sets. A channel missing from one ranking counts as magnitude 0 there.
pub fn ranking_agreement(a: &ChannelRanking, b: &ChannelRanking, k: usize) -> Result<AgreementReport> {
    if a.fingerprint != b.fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: a.fingerprint.clone(),
            found: b.fingerprint.clone(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let top_a: BTreeSet<ChannelId> = a.top(k).iter().map(|e| e.channel).collect();
    let top_b: BTreeSet<ChannelId> = b.top(k).iter().map(|e| e.channel).collect();
    let overlap = top_a.intersection(&top_b).count() as f64 / k as f64;
    let pairs: Vec<(ChannelId, f64, f64)> = top_a
        .union(&top_b)
        .map(|&c| (c, a.magnitude(c).unwrap_or(0.0), b.magnitude(c).unwrap_or(0.0)))
        .collect();
    let xs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    Ok(AgreementReport {
        k,
        overlap,
        spearman: spearman(&xs, &ys),
        pairs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub planted: Vec<ChannelId>,
    pub at_plants: PrecisionRecall,
    pub at_double: PrecisionRecall,
}

fn precision_recall(ranking: &ChannelRanking, truth: &BTreeSet<ChannelId>, k: usize) -> PrecisionRecall {
    let hits = ranking.top(k).iter().filter(|e| truth.contains(&e.channel)).count() as f64;
    PrecisionRecall {
        k,
        precision: if k == 0 { 0.0 } else { hits / k as f64 },
        recall: if truth.is_empty() { 0.0 } else { hits / truth.len() as f64 },
    }
}

/// Precision and recall of the ranking's head against the channels planted
/// for `target` (every planted channel when `target` is `None`).
pub fn planted_recovery(ranking: &ChannelRanking, truth: &GroundTruth, target: Option<&str>) -> RecoveryReport {
    let planted: Vec<ChannelId> = match target {
        Some(t) => truth.channels_for(t),
        None => truth.entries.iter().map(|e| e.channel).collect(),
    };
    let set: BTreeSet<ChannelId> = planted.iter().copied().collect();
    let n = set.len();
    RecoveryReport {
        at_plants: precision_recall(ranking, &set, n),
        at_double: precision_recall(ranking, &set, 2 * n),
        planted,
    }
}

/// Random planted layout: `count` distinct channels per `(target, count)`,
/// drawn from the channels `exclusions` leave open, with effects of random
/// sign and magnitude in `[1.5, 2.5]`.
pub fn random_plants(
    spec: &LayerSpec,
    exclusions: &Exclusions,
    targets: &[(&str, usize)],
    mixing_noise: f64,
    seed: u64,
) -> Result<PlantedSpec> {
    let open: Vec<ChannelId> = spec.all_channels().filter(|&c| !exclusions.excludes(c)).collect();
    let total: usize = targets.iter().map(|(_, n)| n).sum();
    if total > open.len() {
        return Err(Error::InvalidArgument(format!(
            "{total} plants requested, {} channels open",
            open.len()
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut chosen: Vec<ChannelId> = open.choose_multiple(&mut rng, total).copied().collect();
    let mut plants = Vec::with_capacity(total);
    for (target, n) in targets {
        for channel in chosen.drain(..*n) {
            let magnitude = rng.random_range(1.5..=2.5);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            plants.push(Plant {
                channel,
                target: target.to_string(),
                effect: sign * magnitude,
            });
        }
    }
    let planted = PlantedSpec { plants, mixing_noise };
    planted.validate()?;
    Ok(planted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(mags: &[f64]) -> ChannelRanking {
        let entries = mags
            .iter()
            .enumerate()
            .map(|(c, &m)| RankedChannel {
                channel: ChannelId::new(0, c),
                magnitude: m,
            })
            .collect();
        ChannelRanking::from_magnitudes("t", "fp", entries, usize::MAX, Exclusions::none())
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(average_ranks(&[]), Vec::<f64>::new());
    }

    #[test]
    fn identical_and_reversed() {
        let a = ranking(&[5.0, 4.0, 3.0, 2.0, 1.0]);
        let r = ranking_agreement(&a, &a, 3).unwrap();
        assert_eq!((r.overlap, r.spearman), (1.0, 1.0));
        let b = ranking(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let r = ranking_agreement(&a, &b, 5).unwrap();
        assert_eq!(r.spearman, -1.0);
        assert_eq!(r.overlap, 1.0);
    }

    #[test]
    fn fingerprint_mismatch() {
        let a = ranking(&[1.0]);
        let mut b = a.clone();
        b.fingerprint = "other".into();
        assert!(matches!(ranking_agreement(&a, &b, 1), Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn random_plants_respect_exclusions() {
        let spec = LayerSpec::toy();
        let ex = Exclusions::default_for(&spec);
        let a = random_plants(&spec, &ex, &[("mouth", 3), ("hair-darkness", 2)], 0.05, 4).unwrap();
        assert_eq!(a.plants.len(), 5);
        assert_eq!(a.plants.iter().filter(|p| p.target == "mouth").count(), 3);
        assert!(a.plants.iter().all(|p| !ex.excludes(p.channel) && (1.5..=2.5).contains(&p.effect.abs())));
        assert_eq!(a, random_plants(&spec, &ex, &[("mouth", 3), ("hair-darkness", 2)], 0.05, 4).unwrap());
        assert!(random_plants(&spec, &ex, &[("mouth", 1000)], 0.0, 0).is_err());
    }

    #[test]
    fn recovery_scores() {
        use crate::generator::GroundTruthEntry;
        let truth = GroundTruth {
            fingerprint: "fp".into(),
            mixing_noise: 0.0,
            entries: [1usize, 3]
                .iter()
                .map(|&c| GroundTruthEntry {
                    channel: ChannelId::new(0, c),
                    target: "mouth".into(),
                    region: "mouth".into(),
                    color: [1.0; 3],
                    effect: 1.0,
                })
                .collect(),
        };
        let perfect = ranking(&[0.0, 9.0, 1.0, 8.0]);
        let r = planted_recovery(&perfect, &truth, Some("mouth"));
        assert_eq!((r.at_plants.precision, r.at_plants.recall), (1.0, 1.0));
        assert_eq!((r.at_double.k, r.at_double.precision), (4, 0.5));
        let miss = ranking(&[9.0, 0.0, 8.0, 0.0]);
        let r = planted_recovery(&miss, &truth, None);
        assert_eq!((r.at_plants.precision, r.at_plants.recall), (0.0, 0.0));
    }
}
