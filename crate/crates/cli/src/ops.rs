//! Deterministic operations over one workbench. Every op is a pure function
//! of its fields and the session config; it produces named artifact files and
//! a JSON response.

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use styleprobe_core::config::{Config, Workbench};
use styleprobe_core::detection::{rank_channels, ChannelRanking, Exclusions};
use styleprobe_core::generator::{ChannelId, StyleVector};
use styleprobe_core::image_io::png_bytes;
use styleprobe_core::manipulation::{apply_edit, channel_stats, ChannelStats, EditSpec, MULTI_CHANNEL_SOFT_RANGE, PAUTA_LIMIT};
use styleprobe_core::metrics::{attribute_dependency, LogitStats};
use styleprobe_core::oracle::{perturbation_ranking, ranking_agreement};
use styleprobe_core::pipeline::{detect, sample_style, DetectParams, Detection, ObjectiveSpec};
use styleprobe_core::Error as CoreError;

use crate::error::{ServiceError, ServiceResult};

/// Which edit to derive from a stored detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Selection {
    /// The `rank`-th channel of the global ranking.
    Single { rank: usize },
    /// Direction over `C^k_l` of one of the detection's top layers (the
    /// strongest when `layer` is absent).
    Multi {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        layer: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curation {
    pub id: String,
    pub channel: ChannelId,
    pub tag: String,
    pub note: String,
    /// Seconds since the Unix epoch, fixed when the request is accepted.
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Op {
    Sample {
        seed: u64,
        index: u64,
    },
    Stats,
    Detect(DetectParams),
    Edit {
        sample: String,
        edit: EditSpec,
    },
    /// Edit of a sample derived from a stored detection.
    DetectionEdit {
        sample: String,
        detection: String,
        selection: Selection,
        alpha: f64,
    },
    Ad {
        detection: String,
        selection: Selection,
        alpha: f64,
        samples: usize,
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<String>,
    },
    Oracle {
        objective: ObjectiveSpec,
        sample: String,
        k: usize,
        step: f64,
    },
    Truncate {
        sample: String,
        ks: Vec<usize>,
        avg_samples: usize,
        avg_seed: u64,
    },
    Curate {
        channel: ChannelId,
        tag: String,
        #[serde(default)]
        note: String,
        timestamp: u64,
    },
}

impl Op {
    /// Content-addressed id of the artifact this op produces.
    pub fn artifact_id(&self) -> String {
        let prefix = match self {
            Op::Sample { seed, index } => return sample_id(*seed, *index),
            Op::Stats => return "stats".into(),
            Op::Detect(_) => "det",
            Op::Edit { .. } | Op::DetectionEdit { .. } => "edit",
            Op::Ad { .. } => "ad",
            Op::Oracle { .. } => "orc",
            Op::Truncate { .. } => "trunc",
            Op::Curate { .. } => "cur",
        };
        let bytes = serde_json::to_vec(self).expect("ops serialize");
        format!("{prefix}-{}", &hex::encode(Sha256::digest(&bytes))[..12])
    }

    /// Artifact ids this op reads.
    pub fn references(&self) -> Vec<&str> {
        match self {
            Op::Edit { sample, .. } | Op::Oracle { sample, .. } | Op::Truncate { sample, .. } => vec![sample],
            Op::DetectionEdit { sample, detection, .. } => vec![sample, detection],
            Op::Ad { detection, .. } => vec![detection],
            _ => Vec::new(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Op::Sample { .. } => "sample",
            Op::Stats => "stats",
            Op::Detect(_) => "detection",
            Op::Edit { .. } | Op::DetectionEdit { .. } => "edit",
            Op::Ad { .. } => "ad",
            Op::Oracle { .. } => "oracle",
            Op::Truncate { .. } => "truncate",
            Op::Curate { .. } => "curation",
        }
    }
}

pub fn sample_id(seed: u64, index: u64) -> String {
    format!("s{seed}-{index}")
}

pub fn parse_sample_id(id: &str) -> ServiceResult<(u64, u64)> {
    let bad = || ServiceError::NotFound(format!("`{id}` is not a sample id"));
    let (seed, index) = id.strip_prefix('s').and_then(|r| r.split_once('-')).ok_or_else(bad)?;
    Ok((seed.parse().map_err(|_| bad())?, index.parse().map_err(|_| bad())?))
}

/// Result of running an op, before it is committed to a session.
#[derive(Debug)]
pub struct Outcome {
    pub id: String,
    pub files: Vec<(String, Vec<u8>)>,
    pub response: Value,
    pub curation: Option<Curation>,
}

/// Immutable workbench plus lazily computed statistics. Shared by every
/// request; all randomness comes from op fields.
pub struct Engine {
    workbench: Workbench,
    channel_stats: OnceLock<ChannelStats>,
    logit_stats: OnceLock<LogitStats>,
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("artifacts serialize");
    out.push(b'\n');
    out
}

impl Engine {
    pub fn new(config: &Config) -> ServiceResult<Self> {
        Ok(Engine {
            workbench: config.build()?,
            channel_stats: OnceLock::new(),
            logit_stats: OnceLock::new(),
        })
    }

    pub fn workbench(&self) -> &Workbench {
        &self.workbench
    }

    pub fn fingerprint(&self) -> &str {
        self.workbench.generator.fingerprint()
    }

    pub fn channel_stats(&self) -> ServiceResult<&ChannelStats> {
        if let Some(s) = self.channel_stats.get() {
            return Ok(s);
        }
        let cfg = &self.workbench.config.stats;
        let stats = channel_stats(&self.workbench.generator, cfg.channel_samples, cfg.seed)?;
        Ok(self.channel_stats.get_or_init(|| stats))
    }

    pub fn logit_stats(&self) -> ServiceResult<&LogitStats> {
        if let Some(s) = self.logit_stats.get() {
            return Ok(s);
        }
        let stats = self.workbench.logit_stats()?;
        Ok(self.logit_stats.get_or_init(|| stats))
    }

    /// Edit bounds reported to clients.
    pub fn bounds(&self) -> Value {
        json!({
            "single": [-PAUTA_LIMIT, PAUTA_LIMIT],
            "multi_soft": [MULTI_CHANNEL_SOFT_RANGE.0, MULTI_CHANNEL_SOFT_RANGE.1],
        })
    }

    fn style(&self, sample: &str) -> ServiceResult<StyleVector> {
        let (seed, index) = parse_sample_id(sample)?;
        Ok(sample_style(&self.workbench.generator, seed, index)?)
    }

    fn png(&self, s: &StyleVector) -> ServiceResult<Option<Vec<u8>>> {
        if !self.workbench.generator.can_synthesize() {
            return Ok(None);
        }
        Ok(Some(png_bytes(&self.workbench.generator.synthesize(s)?)?))
    }

    fn logits(&self, s: &StyleVector) -> ServiceResult<Vec<(String, f64)>> {
        if !self.workbench.generator.can_synthesize() {
            return Ok(Vec::new());
        }
        Ok(self.workbench.logits(s)?)
    }

    /// Loads a stored detection from `artifacts`.
    pub fn load_detection(&self, artifacts: &Path, id: &str) -> ServiceResult<Detection> {
        let bytes = std::fs::read(artifacts.join(format!("{id}.json")))
            .map_err(|_| ServiceError::NotFound(format!("detection `{id}`")))?;
        let stored: StoredDetection = serde_json::from_slice(&bytes)?;
        if stored.detection.fingerprint != self.fingerprint() {
            return Err(CoreError::FingerprintMismatch {
                expected: self.fingerprint().to_string(),
                found: stored.detection.fingerprint,
            }
            .into());
        }
        Ok(stored.detection)
    }

    fn selection_edit(&self, d: &Detection, selection: &Selection, alpha: f64) -> ServiceResult<EditSpec> {
        match selection {
            Selection::Single { rank } => Ok(d.single_edit(*rank, alpha)?),
            Selection::Multi { layer } => {
                let pos = match layer {
                    None => 0,
                    Some(l) => d.top_layers.iter().position(|t| t == l).ok_or_else(|| {
                        CoreError::InvalidArgument(format!("layer {l} is not among {:?}", d.top_layers))
                    })?,
                };
                let ranking = d
                    .layer_rankings
                    .get(pos)
                    .ok_or_else(|| CoreError::InvalidArgument("detection has no layer rankings".into()))?;
                Ok(d.multi_edit(ranking, alpha)?)
            }
        }
    }

    /// Runs `op`, reading referenced artifacts from `artifacts`.
    pub fn run(&self, op: &Op, artifacts: &Path) -> ServiceResult<Outcome> {
        let id = op.artifact_id();
        let fingerprint = self.fingerprint().to_string();
        let mut files = Vec::new();
        let mut curation = None;
        let response = match op {
            Op::Sample { seed, index } => {
                let s = sample_style(&self.workbench.generator, *seed, *index)?;
                let logits = self.logits(&s)?;
                let image = self.png(&s)?.map(|png| {
                    files.push((format!("{id}.png"), png));
                    format!("{id}.png")
                });
                let record = json!({
                    "id": id, "fingerprint": fingerprint, "seed": seed, "index": index,
                    "image": image, "logits": logits, "style": s,
                });
                files.push((format!("{id}.json"), to_json(&record)));
                json!({ "id": id, "image": image, "logits": logits })
            }
            Op::Stats => {
                let cs = self.channel_stats()?;
                let ls = self.logit_stats()?;
                files.push(("stats-channel.json".into(), to_json(cs)));
                files.push(("stats-logit.json".into(), to_json(ls)));
                json!({
                    "id": id, "fingerprint": fingerprint,
                    "channel_samples": cs.n, "logit_samples": ls.n, "probes": ls.probes,
                })
            }
            Op::Detect(params) => {
                let detection = detect(&self.workbench, params)?;
                let summary = json!({
                    "id": id,
                    "objective": detection.objective,
                    "fingerprint": detection.fingerprint,
                    "samples": detection.samples,
                    "attempts": detection.attempts,
                    "top_layers": detection.top_layers,
                    "ranking": detection.ranking,
                    "layer_rankings": detection.layer_rankings,
                });
                files.push((format!("{id}.json"), to_json(&StoredDetection { id: id.clone(), detection })));
                summary
            }
            Op::Edit { sample, edit } => self.edit(&id, sample, edit, &mut files)?,
            Op::DetectionEdit {
                sample,
                detection,
                selection,
                alpha,
            } => {
                let d = self.load_detection(artifacts, detection)?;
                let edit = self.selection_edit(&d, selection, *alpha)?;
                let mut out = self.edit(&id, sample, &edit, &mut files)?;
                out["detection"] = json!(detection);
                out
            }
            Op::Ad {
                detection,
                selection,
                alpha,
                samples,
                seed,
                target,
            } => {
                let d = self.load_detection(artifacts, detection)?;
                let edit = self.selection_edit(&d, selection, *alpha)?;
                let target = match (target, &d.objective) {
                    (Some(t), _) => t.clone(),
                    (None, ObjectiveSpec::Attribute(name)) => name.clone(),
                    (None, ObjectiveSpec::Region(_)) => {
                        return Err(ServiceError::BadRequest(
                            "a region detection needs an explicit AD target probe".into(),
                        ))
                    }
                };
                if *samples == 0 {
                    return Err(CoreError::InvalidArgument("AD needs >= 1 sample".into()).into());
                }
                let g = &self.workbench.generator;
                let originals = (0..*samples as u64)
                    .map(|i| sample_style(g, *seed, i))
                    .collect::<Result<Vec<_>, _>>()?;
                let report = attribute_dependency(
                    g,
                    &originals,
                    &edit,
                    &target,
                    &self.workbench.probe_refs(),
                    self.channel_stats()?,
                    self.logit_stats()?,
                )?;
                let record = json!({
                    "id": id, "fingerprint": fingerprint, "detection": detection,
                    "edit": edit, "report": report,
                });
                files.push((format!("{id}.json"), to_json(&record)));
                record
            }
            Op::Oracle {
                objective,
                sample,
                k,
                step,
            } => {
                let s = self.style(sample)?;
                let resolved = self.workbench.resolve(objective)?;
                let g = &self.workbench.generator;
                let field = styleprobe_core::detection::objective_gradient(g, &s, resolved.objective())?;
                let by_gradient = rank_channels(&field, &Exclusions::none());
                let by_perturbation = perturbation_ranking(g, &s, resolved.objective(), *step, &Exclusions::none())?;
                let k = (*k).min(by_gradient.entries.len());
                let report = ranking_agreement(&by_gradient, &by_perturbation, k)?;
                let record = json!({
                    "id": id, "fingerprint": fingerprint, "objective": objective, "sample": sample,
                    "step": step, "report": report,
                    "gradient_top": top(&by_gradient, k), "perturbation_top": top(&by_perturbation, k),
                });
                files.push((format!("{id}.json"), to_json(&record)));
                record
            }
            Op::Truncate {
                sample,
                ks,
                avg_samples,
                avg_seed,
            } => {
                let g = &self.workbench.generator;
                if !g.can_synthesize() {
                    return Err(CoreError::UnsupportedSpec("truncation needs a synthesizable spec".into()).into());
                }
                let s = self.style(sample)?;
                let s_avg = g.average_style(*avg_samples, *avg_seed)?;
                let mut images = Vec::new();
                for &k in ks {
                    let name = format!("{id}-k{k}.png");
                    files.push((name.clone(), png_bytes(&g.synthesize_truncated(&s, k, &s_avg)?)?));
                    images.push(json!({ "k": k, "image": name }));
                }
                let record = json!({
                    "id": id, "fingerprint": fingerprint, "sample": sample,
                    "avg_samples": avg_samples, "avg_seed": avg_seed, "images": images,
                });
                files.push((format!("{id}.json"), to_json(&record)));
                record
            }
            Op::Curate {
                channel,
                tag,
                note,
                timestamp,
            } => {
                self.workbench.generator.spec().channels(channel.layer).and_then(|n| {
                    if channel.channel < n {
                        Ok(())
                    } else {
                        Err(CoreError::UnknownChannel {
                            layer: channel.layer,
                            channel: channel.channel,
                        })
                    }
                })?;
                if tag.trim().is_empty() {
                    return Err(ServiceError::BadRequest("curation tag is empty".into()));
                }
                let c = Curation {
                    id: id.clone(),
                    channel: *channel,
                    tag: tag.clone(),
                    note: note.clone(),
                    timestamp: *timestamp,
                };
                let out = serde_json::to_value(&c)?;
                curation = Some(c);
                out
            }
        };
        Ok(Outcome {
            id,
            files,
            response,
            curation,
        })
    }

    fn edit(
        &self,
        id: &str,
        sample: &str,
        edit: &EditSpec,
        files: &mut Vec<(String, Vec<u8>)>,
    ) -> ServiceResult<Value> {
        if let Some(fp) = edit.fingerprint() {
            if fp != self.fingerprint() {
                return Err(CoreError::FingerprintMismatch {
                    expected: self.fingerprint().to_string(),
                    found: fp.to_string(),
                }
                .into());
            }
        }
        let s = self.style(sample)?;
        let edited = apply_edit(&s, edit, self.channel_stats()?)?;
        let before = self.logits(&s)?;
        let after = self.logits(&edited)?;
        let deltas: Vec<(String, f64)> =
            before.iter().zip(&after).map(|((name, b), (_, a))| (name.clone(), a - b)).collect();
        let image = self.png(&edited)?.map(|png| {
            files.push((format!("{id}.png"), png));
            format!("{id}.png")
        });
        let original = image.as_ref().map(|_| format!("{sample}.png"));
        let record = json!({
            "id": id,
            "fingerprint": self.fingerprint(),
            "sample": sample,
            "edit": edit,
            "effective_alpha": edit.effective_alpha(),
            "clamped": edit.effective_alpha() != edit.alpha(),
            "bounds": self.bounds(),
            "image": image,
            "original_image": original,
            "logits_before": before,
            "logits_after": after,
            "deltas": deltas,
        });
        files.push((format!("{id}.json"), to_json(&record)));
        Ok(record)
    }
}

fn top(r: &ChannelRanking, k: usize) -> Value {
    json!(r.top(k))
}

#[derive(Serialize, Deserialize)]
struct StoredDetection {
    id: String,
    #[serde(flatten)]
    detection: Detection,
}
