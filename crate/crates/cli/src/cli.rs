use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;
use styleprobe_core::config::Config;
use styleprobe_core::generator::ChannelId;
use styleprobe_core::manipulation::EditSpec;
use styleprobe_core::metrics::ADReport;
use styleprobe_core::oracle::DEFAULT_STEP;
use styleprobe_core::pipeline::{DetectParams, ObjectiveSpec};

use crate::error::{ServiceError, ServiceResult};
use crate::ops::{sample_id, Op, Selection};
use crate::session::{replay, Session};

#[derive(Debug, Parser)]
#[command(name = "styleprobe", version, about = "Find, edit and verify attribute-specific style channels")]
pub struct Cli {
    /// Config file (TOML); overrides --preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Built-in config: toy, tiny8, paper-mirror or planted-demo.
    #[arg(long, global = true)]
    pub preset: Option<String>,

    /// Session directory; without one, commands run in a throwaway session.
    #[arg(long, global = true, env = "STYLEPROBE_SESSION_DIR")]
    pub session_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render samples of a latent stream.
    Sample {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long, default_value_t = 1)]
        count: u64,
        /// PNG path for one sample, directory for several.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank channels by averaged gradient magnitude.
    Detect {
        #[command(flatten)]
        detect: DetectArgs,
        #[arg(long, default_value = "ranking.json")]
        out: PathBuf,
    },
    /// Edit one sample along a channel or a detected direction.
    Edit {
        #[command(flatten)]
        target: SampleArgs,
        /// Explicit channel `LAYER:CHANNEL`; otherwise --objective is detected first.
        #[arg(long, value_parser = parse_channel, conflicts_with = "objective")]
        channel: Option<ChannelId>,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        sign: f64,
        #[command(flatten)]
        detect: OptionalDetect,
        #[command(flatten)]
        select: SelectArgs,
        #[arg(long, allow_negative_numbers = true, required_unless_present = "alpha_sweep")]
        alpha: Option<f64>,
        /// Comma-separated strengths; writes one PNG per value into --out.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "alpha")]
        alpha_sweep: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attribute dependency of a detected edit.
    Ad {
        #[command(flatten)]
        detect: DetectArgs,
        #[command(flatten)]
        select: SelectArgs,
        #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
        alpha: f64,
        /// Number of originals the edit is applied to.
        #[arg(long, default_value_t = 20)]
        samples: usize,
        /// Latent stream of the originals.
        #[arg(long = "ad-seed", default_value_t = 1000)]
        ad_seed: u64,
        /// Target probe; defaults to the detected attribute.
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare gradient and perturbation rankings on one sample.
    Oracle {
        #[arg(long)]
        objective: ObjectiveSpec,
        #[command(flatten)]
        target: SampleArgs,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-channel style statistics and probe logit spreads.
    Stats {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a sample with only its first k layers kept.
    Truncate {
        #[command(flatten)]
        target: SampleArgs,
        /// Comma-separated k values; all of 0..=L by default.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long, default_value_t = 1000)]
        avg_samples: usize,
        #[arg(long, default_value_t = 0)]
        avg_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API over the session directory.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Re-execute a session log and compare every artifact.
    Replay {
        /// Empty directory for the rebuilt session (a temporary one by default).
        #[arg(long)]
        into: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Latent stream seed of the sample.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub index: u64,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub objective: ObjectiveSpec,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Samples averaged (positives for an attribute); config default when absent.
    #[arg(long)]
    pub detect_samples: Option<usize>,
    /// Latent stream the detection samples are drawn from.
    #[arg(long = "seed", visible_alias = "detect-seed", default_value_t = 0)]
    pub detect_seed: u64,
}

#[derive(Debug, Args)]
pub struct OptionalDetect {
    #[arg(long)]
    pub objective: Option<ObjectiveSpec>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub detect_samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub detect_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Single,
    Multi,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long, value_enum, default_value_t = Mode::Single)]
    pub mode: Mode,
    /// Ranked channel used by single mode (0-based).
    #[arg(long, default_value_t = 0)]
    pub rank: usize,
    /// Layer whose top-k channels multi mode uses; the strongest by default.
    #[arg(long)]
    pub layer: Option<usize>,
}

impl SelectArgs {
    fn selection(&self) -> Selection {
        match self.mode {
            Mode::Single => Selection::Single { rank: self.rank },
            Mode::Multi => Selection::Multi { layer: self.layer },
        }
    }
}

fn parse_channel(s: &str) -> Result<ChannelId, String> {
    let (l, c) = s.split_once(':').ok_or("expected LAYER:CHANNEL")?;
    Ok(ChannelId::new(
        l.parse().map_err(|e| format!("layer: {e}"))?,
        c.parse().map_err(|e| format!("channel: {e}"))?,
    ))
}

fn load_config(cli: &Cli) -> ServiceResult<Option<Config>> {
    Ok(match (&cli.config, &cli.preset) {
        (Some(path), _) => Some(Config::load(path)?),
        (None, Some(name)) => Some(Config::preset(name)?),
        (None, None) => None,
    })
}

fn write_out(path: &Path, bytes: &[u8]) -> ServiceResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn write_json(path: &Path, v: &Value) -> ServiceResult<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    write_out(path, &bytes)
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values print"));
}

fn field<'a>(v: &'a Value, key: &str) -> ServiceResult<&'a str> {
    v[key]
        .as_str()
        .ok_or_else(|| ServiceError::Io(format!("response is missing `{key}`")))
}

/// Copies the image a response names to `out`.
fn export_image(session: &Session, response: &Value, out: &Path) -> ServiceResult<()> {
    let name = response["image"]
        .as_str()
        .ok_or_else(|| ServiceError::BadRequest("this generator cannot render images".into()))?;
    write_out(out, &session.read_file(name)?)
}

fn detect_op(session: &Session, d: &DetectArgs) -> Op {
    let samples = d.detect_samples.unwrap_or(session.engine().workbench().config.detection.n_target);
    Op::Detect(DetectParams {
        objective: d.objective.clone(),
        samples,
        k: d.k,
        seed: d.detect_seed,
    })
}

fn ensure_sample(session: &Session, t: &SampleArgs) -> ServiceResult<String> {
    let v = session.execute(
        Op::Sample {
            seed: t.seed,
            index: t.index,
        },
        None,
    )?;
    Ok(field(&v, "id")?.to_string())
}

fn dispatch(cli: Cli) -> ServiceResult<()> {
    let config = load_config(&cli)?;
    let scratch;
    let dir = match &cli.session_dir {
        Some(d) => d.clone(),
        None => {
            if matches!(cli.command, Command::Serve { .. } | Command::Replay { .. }) {
                return Err(ServiceError::BadRequest(
                    "this command needs --session-dir or STYLEPROBE_SESSION_DIR".into(),
                ));
            }
            scratch = tempfile::tempdir()?;
            scratch.path().to_path_buf()
        }
    };
    if let Command::Replay { into } = &cli.command {
        let tmp;
        let target = match into {
            Some(p) => p.clone(),
            None => {
                tmp = tempfile::tempdir()?;
                tmp.path().to_path_buf()
            }
        };
        let report = replay(&dir, &target)?;
        print_json(&serde_json::to_value(&report)?);
        return if report.identical() {
            Ok(())
        } else {
            Err(ServiceError::Io(format!("replay differs in {} file(s)", report.mismatches.len())))
        };
    }
    let session = Session::open(&dir, config.as_ref())?;

    match cli.command {
        Command::Sample { seed, index, count, out } => {
            for i in index..index + count {
                let v = session.execute(Op::Sample { seed, index: i }, None)?;
                if let Some(out) = &out {
                    let path = if count == 1 {
                        out.clone()
                    } else {
                        out.join(format!("{}.png", sample_id(seed, i)))
                    };
                    export_image(&session, &v, &path)?;
                }
                print_json(&v);
            }
        }
        Command::Detect { detect, out } => {
            let v = session.execute(detect_op(&session, &detect), None)?;
            write_json(&out, &v["ranking"])?;
            println!("{} ({} samples, top layers {})", field(&v, "id")?, v["samples"], v["top_layers"]);
            for (i, e) in v["ranking"]["entries"].as_array().into_iter().flatten().enumerate() {
                println!("{:>3}  {}:{}  {:.6e}", i + 1, e[0], e[1], e[2].as_f64().unwrap_or(f64::NAN));
            }
        }
        Command::Edit {
            target,
            channel,
            sign,
            detect,
            select,
            alpha,
            alpha_sweep,
            out,
        } => {
            let sample = ensure_sample(&session, &target)?;
            let detection = match (&channel, &detect.objective) {
                (Some(_), _) => None,
                (None, Some(objective)) => {
                    let d = DetectArgs {
                        objective: objective.clone(),
                        k: detect.k,
                        detect_samples: detect.detect_samples,
                        detect_seed: detect.detect_seed,
                    };
                    let v = session.execute(detect_op(&session, &d), None)?;
                    Some(field(&v, "id")?.to_string())
                }
                (None, None) => return Err(ServiceError::BadRequest("edit needs --channel or --objective".into())),
            };
            let sweep = alpha_sweep.is_some();
            let alphas = alpha_sweep.unwrap_or_else(|| alpha.into_iter().collect());
            for a in alphas {
                let op = match (&channel, &detection) {
                    (Some(c), _) => Op::Edit {
                        sample: sample.clone(),
                        edit: EditSpec::Single {
                            channel: *c,
                            alpha: a,
                            sign,
                        },
                    },
                    (None, Some(d)) => Op::DetectionEdit {
                        sample: sample.clone(),
                        detection: d.clone(),
                        selection: select.selection(),
                        alpha: a,
                    },
                    (None, None) => unreachable!("checked above"),
                };
                let v = session.execute(op, None)?;
                let path = if sweep { out.join(format!("alpha{a:+}.png")) } else { out.clone() };
                export_image(&session, &v, &path)?;
                println!(
                    "{} alpha {} (applied {}) -> {}",
                    field(&v, "id")?,
                    a,
                    v["effective_alpha"],
                    path.display()
                );
                for d in v["deltas"].as_array().into_iter().flatten() {
                    println!("  {:<16} {:+.4}", d[0].as_str().unwrap_or("?"), d[1].as_f64().unwrap_or(f64::NAN));
                }
            }
        }
        Command::Ad {
            detect,
            select,
            alpha,
            samples,
            ad_seed,
            target,
            out,
        } => {
            let d = session.execute(detect_op(&session, &detect), None)?;
            let op = Op::Ad {
                detection: field(&d, "id")?.to_string(),
                selection: select.selection(),
                alpha,
                samples,
                seed: ad_seed,
                target,
            };
            let v = session.execute(op, None)?;
            let report: ADReport = serde_json::from_value(v["report"].clone())?;
            print!("{report}");
            if let Some(out) = out {
                write_json(&out, &v)?;
            }
        }
        Command::Oracle {
            objective,
            target,
            k,
            step,
            out,
        } => {
            let sample = ensure_sample(&session, &target)?;
            let v = session.execute(
                Op::Oracle {
                    objective,
                    sample,
                    k,
                    step,
                },
                None,
            )?;
            println!(
                "top-{} overlap {} spearman {}",
                v["report"]["k"], v["report"]["overlap"], v["report"]["spearman"]
            );
            if let Some(out) = out {
                write_json(&out, &v)?;
            }
        }
        Command::Stats { out } => {
            let v = session.execute(Op::Stats, None)?;
            print_json(&v);
            if let Some(out) = out {
                let a = session.artifact_dir();
                let channel: Value = serde_json::from_slice(&fs::read(a.join("stats-channel.json"))?)?;
                let logit: Value = serde_json::from_slice(&fs::read(a.join("stats-logit.json"))?)?;
                write_json(&out, &serde_json::json!({ "channel": channel, "logit": logit }))?;
            }
        }
        Command::Truncate {
            target,
            ks,
            avg_samples,
            avg_seed,
            out,
        } => {
            let sample = ensure_sample(&session, &target)?;
            let ks = ks.unwrap_or_else(|| (0..=session.engine().workbench().generator.spec().len()).collect());
            let v = session.execute(
                Op::Truncate {
                    sample,
                    ks,
                    avg_samples,
                    avg_seed,
                },
                None,
            )?;
            for img in v["images"].as_array().into_iter().flatten() {
                let name = img["image"].as_str().unwrap_or_default();
                let path = out.join(format!("k{}.png", img["k"]));
                write_out(&path, &session.read_file(name)?)?;
                println!("k = {} -> {}", img["k"], path.display());
            }
        }
        Command::Serve { port, host } => {
            let session = Arc::new(session);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(crate::api::serve(session, &host, port))?;
        }
        Command::Replay { .. } => unreachable!("handled above"),
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn channels_parse() {
        assert_eq!(parse_channel("3:4").unwrap(), ChannelId::new(3, 4));
        assert!(parse_channel("3").is_err());
        assert!(parse_channel("a:1").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["styleprobe", "--bogus"]), 1);
        assert_eq!(run(["styleprobe", "detect"]), 1);
        assert_eq!(run(["styleprobe", "--help"]), 0);
        assert_eq!(run(["styleprobe", "detect", "--objective", "mouth"]), 1);
    }
}
