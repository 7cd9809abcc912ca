//! `res2wake`: generate data, train the two classifiers, detect and evaluate.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use res2wake::data::{
    generate_toy_corpus, load_manifest, write_wav_chunks, Label, Manifest, NegativeStream, WavChunks, SAMPLE_RATE,
};
use res2wake::dsp::{FeatureConfig, Spectrogram};
use res2wake::eval::{frr_at_fah, is_monotone, parse_thresholds, sweep, write_det_csv, UtteranceCandidates};
use res2wake::model::{load_weights, save_weights, Arch, ArchiveTensor, BlockKind, Model, ModelConfig, WeightArchive};
use res2wake::pipeline::Pipeline;
use res2wake::stream::Candidate;
use res2wake::trainer::{featurize_manifest, train_utterances, write_log, Target, TrainConfig};
use serde::{Deserialize, Serialize};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "res2wake",
    version,
    about = "Two-stage wake word detection on SE-Res2Net classifiers"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for corpus generation and training (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with [corpus], [features], [train] and [detector] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic keyword corpus (and optionally a long negative stream).
    GenData {
        #[arg(long)]
        n_pos: Option<usize>,
        #[arg(long)]
        n_neg: Option<usize>,
        /// Also write `negative_stream.wav` of this many hours.
        #[arg(long)]
        stream_hours: Option<f64>,
    },
    /// Compute log-mel features for a manifest.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train M0 (whole resized utterances) or M1 (slices).
    Train {
        #[arg(long)]
        target: Target,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory written by `featurize`, used instead of a manifest.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        arch: Option<Arch>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print the architecture summary and parameter count.
    Params {
        #[arg(long)]
        arch: Arch,
    },
    /// Run the streaming detector over a WAV file.
    Detect {
        #[arg(long)]
        stream: PathBuf,
        #[command(flatten)]
        models: ModelDirs,
    },
    /// Score a labelled manifest (plus optional negative streams) and sweep the final threshold.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Keyword-free WAV files counted as negative audio.
        #[arg(long = "negative-stream")]
        negative_streams: Vec<PathBuf>,
        #[command(flatten)]
        models: ModelDirs,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Re-sweep candidates saved by `eval`.
    Sweep {
        #[arg(long)]
        candidates: PathBuf,
        #[command(flatten)]
        sweep: SweepArgs,
    },
}

#[derive(Args)]
struct ModelDirs {
    /// Directory written by `train --target m0`.
    #[arg(long)]
    m0: PathBuf,
    /// Directory written by `train --target m1`.
    #[arg(long)]
    m1: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Final thresholds as start:stop:count.
    #[arg(long, default_value = "0:0.999:1000")]
    thresholds: String,
    /// Operating point reported as FRR at this many false alarms per hour.
    #[arg(long, default_value_t = 0.5)]
    fah: f64,
}

/// Written next to `model.wwa`; enough to rebuild the network and its inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    target: Target,
    arch: Arch,
    params: usize,
    best_epoch: usize,
    features: FeatureConfig,
    train: TrainConfig,
}

/// One line of `candidates.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CandidateRecord {
    source: String,
    label: Label,
    duration_s: f64,
    candidates: Vec<ScoredCandidate>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ScoredCandidate {
    #[serde(flatten)]
    run: Candidate,
    y_m0: f32,
}

/// One line of the feature index written by `featurize`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeatureRecord {
    index: usize,
    path: PathBuf,
    label: Label,
    frames: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    cfg.apply_seed(cli.common.seed);
    let out = cli.common.out;
    match cli.command {
        Command::GenData {
            n_pos,
            n_neg,
            stream_hours,
        } => {
            cfg.corpus.n_pos = n_pos.unwrap_or(cfg.corpus.n_pos);
            cfg.corpus.n_neg = n_neg.unwrap_or(cfg.corpus.n_neg);
            start(&cfg, &out)?;
            gen_data(&cfg, &out, stream_hours)
        }
        Command::Featurize { manifest } => {
            start(&cfg, &out)?;
            featurize(&cfg, &manifest, &out)
        }
        Command::Train {
            target,
            manifest,
            features,
            arch,
            epochs,
        } => {
            cfg.train.target = target;
            cfg.train.arch = arch.unwrap_or(cfg.train.arch);
            if let Some(e) = epochs {
                cfg.train.min_epochs = e;
                cfg.train.max_epochs = e;
            }
            start(&cfg, &out)?;
            train(&cfg, manifest.as_deref(), features.as_deref(), &out)
        }
        Command::Params { arch } => params(arch),
        Command::Detect { stream, models } => {
            start(&cfg, &out)?;
            detect(&cfg, &stream, &models, &out)
        }
        Command::Eval {
            manifest,
            negative_streams,
            models,
            sweep,
        } => {
            start(&cfg, &out)?;
            eval(&cfg, &manifest, &negative_streams, &models, &sweep, &out)
        }
        Command::Sweep { candidates, sweep } => {
            start(&cfg, &out)?;
            let records = read_jsonl::<CandidateRecord>(&candidates)?;
            report_sweep(&records, &cfg, &sweep, &out)
        }
    }
}

/// Validates the configuration, creates `out` and echoes the effective
/// configuration to `out/config.toml` and, as `#` comment lines, to standard
/// error.
fn start(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = cfg.to_toml();
    eprintln!("# effective configuration");
    for line in text.lines() {
        eprintln!("#   {line}");
    }
    fs::write(out.join("config.toml"), text).with_context(|| format!("writing {}/config.toml", out.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w =
        std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}: malformed record", path.display(), i + 1))
        })
        .collect()
}

fn gen_data(cfg: &RunConfig, out: &Path, stream_hours: Option<f64>) -> Result<()> {
    let (manifest, items) = generate_toy_corpus(out, &cfg.corpus)?;
    #[derive(Serialize)]
    struct Truth<'a> {
        path: &'a Path,
        duration_s: f64,
        #[serde(flatten)]
        content: &'a res2wake::data::UtteranceContent,
    }
    write_jsonl(
        &out.join("contents.jsonl"),
        items.iter().map(|i| Truth {
            path: &i.record.path,
            duration_s: i.duration_s,
            content: &i.content,
        }),
    )?;
    println!(
        "wrote {} utterances to {}",
        manifest.len(),
        out.join("manifest.jsonl").display()
    );
    if let Some(h) = stream_hours {
        if !(h > 0.0) {
            bail!("--stream-hours must be positive");
        }
        let path = out.join("negative_stream.wav");
        let n = write_wav_chunks(
            &path,
            NegativeStream::new(cfg.corpus.seed ^ 0x57ea, h * 3600.0, 10.0),
            SAMPLE_RATE,
        )?;
        println!(
            "wrote {:.1} s of negative audio to {}",
            n as f64 / SAMPLE_RATE as f64,
            path.display()
        );
    }
    Ok(())
}

fn featurize(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let specs = featurize_manifest(&manifest, &cfg.features)?;
    let archive = WeightArchive {
        tensors: specs
            .iter()
            .enumerate()
            .map(|(i, (s, _))| ArchiveTensor {
                name: format!("utt.{i}"),
                shape: vec![s.bands(), s.frames()],
                data: s.values().to_vec(),
            })
            .collect(),
    };
    archive.write(&out.join("features.wwa"))?;
    write_jsonl(
        &out.join("features.jsonl"),
        manifest
            .records
            .iter()
            .zip(&specs)
            .enumerate()
            .map(|(index, (r, (s, _)))| FeatureRecord {
                index,
                path: r.path.clone(),
                label: r.label,
                frames: s.frames(),
            }),
    )?;
    fs::write(out.join("features.json"), serde_json::to_string_pretty(&cfg.features)?)?;
    println!("featurized {} utterances ({} bands)", specs.len(), cfg.features.n_mels);
    Ok(())
}

fn load_features(dir: &Path, expected: &FeatureConfig) -> Result<Vec<(Spectrogram, Label)>> {
    let stored: FeatureConfig = serde_json::from_str(&fs::read_to_string(dir.join("features.json"))?)
        .with_context(|| format!("reading {}/features.json", dir.display()))?;
    if &stored != expected {
        bail!(
            "features in {} were computed with a different [features] configuration",
            dir.display()
        );
    }
    let records = read_jsonl::<FeatureRecord>(&dir.join("features.jsonl"))?;
    let archive = WeightArchive::read(&dir.join("features.wwa"))?;
    if archive.tensors.len() != records.len() {
        bail!(
            "{}: {} feature tensors for {} records",
            dir.display(),
            archive.tensors.len(),
            records.len()
        );
    }
    records
        .iter()
        .zip(archive.tensors)
        .map(|(r, t)| {
            let [bands, frames] = t.shape[..] else {
                bail!("feature tensor {} is not two-dimensional", t.name);
            };
            Ok((
                Spectrogram::new(bands, frames, t.data, stored.frame_period_s())?,
                r.label,
            ))
        })
        .collect()
}

fn train(cfg: &RunConfig, manifest: Option<&Path>, features: Option<&Path>, out: &Path) -> Result<()> {
    let utterances = match (manifest, features) {
        (_, Some(dir)) => load_features(dir, &cfg.features)?,
        (Some(m), None) => featurize_manifest(&load_manifest(m)?, &cfg.features)?,
        (None, None) => bail!("train needs --manifest or --features"),
    };
    let outcome = train_utterances(&utterances, cfg.features.floor_value(), &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  train loss {:.4} acc {:.3}  dev loss {:.4} acc {:.3}  ({:.1} s)",
            r.epoch, r.lr, r.train_loss, r.train_accuracy, r.dev_loss, r.dev_accuracy, r.seconds
        );
    })?;
    save_weights(&outcome.model, &out.join("model.wwa"))?;
    write_log(&out.join("train_log.jsonl"), &outcome.log)?;
    let meta = ModelMeta {
        target: cfg.train.target,
        arch: cfg.train.arch,
        params: outcome.model.count_params(),
        best_epoch: outcome.best_epoch,
        features: cfg.features.clone(),
        train: cfg.train.clone(),
    };
    fs::write(out.join("model.json"), serde_json::to_string_pretty(&meta)?)?;
    println!(
        "trained {} ({}) for {} epochs, best epoch {}",
        meta.target,
        meta.arch,
        outcome.log.len(),
        meta.best_epoch
    );
    Ok(())
}

/// Human-readable layer table, one stage per line.
fn summary(cfg: &ModelConfig) -> Vec<String> {
    let mut lines = Vec::new();
    let stem: Vec<String> = cfg
        .stem
        .convs
        .iter()
        .map(|c| format!("{k}x{k}, {ch}, stride {s}", k = c.kernel, ch = c.channels, s = c.stride))
        .collect();
    lines.push(format!("conv1    {}", stem.join("; ")));
    if let Some(p) = cfg.stem.max_pool {
        lines.push(format!(
            "         {s}x{s} max pool, stride {st}",
            s = p.size,
            st = p.stride
        ));
    }
    for (i, st) in cfg.stages.iter().enumerate() {
        let b = &st.block;
        let body = match b.kind {
            BlockKind::Basic => format!("3x3, {w}; 3x3, {w}", w = b.width),
            BlockKind::Bottleneck => format!("1x1, {}; 3x3, {}; 1x1, {}", b.width, b.width, b.out_channels()),
            BlockKind::Res2Net | BlockKind::SeRes2Net => {
                let se = if b.kind == BlockKind::SeRes2Net {
                    format!("; SE r={}", b.se_reduction)
                } else {
                    String::new()
                };
                format!(
                    "1x1, {}; 3x3, {} x {} groups; 1x1, {}{se}",
                    b.inner_channels(),
                    b.group_width,
                    b.scale,
                    b.out_channels()
                )
            }
        };
        lines.push(format!(
            "conv{}_x  [{body}] x {}  (stride {})",
            i + 2,
            st.repeats,
            b.stride
        ));
    }
    lines.push(format!("         global average pool, {}-d fc, softmax", cfg.classes));
    lines
}

fn params(arch: Arch) -> Result<()> {
    let cfg = ModelConfig::from_arch(arch);
    let model = Model::build(&cfg, 0)?;
    println!("{arch}");
    for l in summary(&cfg) {
        println!("  {l}");
    }
    println!("params {}", model.count_params());
    Ok(())
}

fn load_model(dir: &Path, expected: Target) -> Result<(Model, ModelMeta)> {
    let meta: ModelMeta = serde_json::from_str(
        &fs::read_to_string(dir.join("model.json")).with_context(|| format!("reading {}/model.json", dir.display()))?,
    )
    .with_context(|| format!("parsing {}/model.json", dir.display()))?;
    if meta.target != expected {
        bail!("{} holds a {} model, expected {expected}", dir.display(), meta.target);
    }
    let model = load_weights(&dir.join("model.wwa"), &ModelConfig::from_arch(meta.arch))?;
    Ok((model, meta))
}

fn load_pair(models: &ModelDirs, cfg: &RunConfig) -> Result<(Model, Model, FeatureConfig)> {
    let (m0, meta0) = load_model(&models.m0, Target::M0)?;
    let (m1, meta1) = load_model(&models.m1, Target::M1)?;
    if meta0.features != meta1.features {
        bail!("M0 and M1 were trained on different features");
    }
    if meta1.train.slice != cfg.detector.slice || meta0.train.resize_frames != cfg.detector.resize_frames {
        bail!("[detector] slice / resize settings differ from those the models were trained with");
    }
    Ok((m0, m1, meta0.features))
}

/// Short streams are padded with the silence value of the features the
/// models were trained on.
fn pipeline<'m>(cfg: &RunConfig, features: &FeatureConfig, m0: &'m Model, m1: &'m Model) -> Result<Pipeline<'m>> {
    let detector = res2wake::stream::DetectorConfig {
        pad_value: features.floor_value(),
        ..cfg.detector.clone()
    };
    Ok(Pipeline::new(features.clone(), detector, m0, m1)?)
}

type ReadError = std::rc::Rc<std::cell::RefCell<Option<anyhow::Error>>>;

/// Events, every scored candidate with its global score, and seconds of audio.
type StreamOutput = (Vec<res2wake::stream::DetectionEvent>, Vec<(Candidate, f32)>, f64);

/// Audio chunks of a WAV file; a read error ends the stream and is reported
/// afterwards.
fn wav_stream(path: &Path) -> Result<(impl Iterator<Item = Vec<i16>>, ReadError)> {
    let chunks = WavChunks::open(path, SAMPLE_RATE as usize * 10)?;
    let err = std::rc::Rc::new(std::cell::RefCell::new(None));
    let sink = err.clone();
    let it = chunks.map_while(move |c| match c {
        Ok(v) => Some(v),
        Err(e) => {
            *sink.borrow_mut() = Some(e.into());
            None
        }
    });
    Ok((it, err))
}

fn stream_candidates(p: &Pipeline, path: &Path) -> Result<StreamOutput> {
    let (chunks, err) = wav_stream(path)?;
    let result = p.detect_stream(chunks)?;
    if let Some(e) = err.borrow_mut().take() {
        return Err(e);
    }
    Ok(result)
}

fn detect(cfg: &RunConfig, stream: &Path, models: &ModelDirs, out: &Path) -> Result<()> {
    let (m0, m1, features) = load_pair(models, cfg)?;
    let p = pipeline(cfg, &features, &m0, &m1)?;
    let (events, _, duration) = stream_candidates(&p, stream)?;
    let period = features.frame_period_s();
    write_jsonl(&out.join("events.jsonl"), events.iter().map(|e| e.record(period)))?;
    println!("{} events in {:.1} s of audio", events.len(), duration);
    Ok(())
}

fn eval(
    cfg: &RunConfig,
    manifest_path: &Path,
    negative_streams: &[PathBuf],
    models: &ModelDirs,
    sweep_args: &SweepArgs,
    out: &Path,
) -> Result<()> {
    let manifest: Manifest = load_manifest(manifest_path)?;
    let (m0, m1, features) = load_pair(models, cfg)?;
    let p = pipeline(cfg, &features, &m0, &m1)?;
    let mut records = Vec::with_capacity(manifest.len() + negative_streams.len());
    for r in &manifest.records {
        let audio = res2wake::data::read_wav(&r.path)?;
        let u = p.labelled_candidates(&audio.samples, r.label)?;
        records.push(to_record(r.path.display().to_string(), u));
    }
    for s in negative_streams {
        let (_, candidates, duration_s) = stream_candidates(&p, s)?;
        let u = UtteranceCandidates {
            label: Label::Negative,
            duration_s,
            candidates,
        };
        records.push(to_record(s.display().to_string(), u));
    }
    write_jsonl(&out.join("candidates.jsonl"), &records)?;
    report_sweep(&records, cfg, sweep_args, out)
}

fn to_record(source: String, u: UtteranceCandidates) -> CandidateRecord {
    CandidateRecord {
        source,
        label: u.label,
        duration_s: u.duration_s,
        candidates: u
            .candidates
            .into_iter()
            .map(|(run, y_m0)| ScoredCandidate { run, y_m0 })
            .collect(),
    }
}

fn report_sweep(records: &[CandidateRecord], cfg: &RunConfig, args: &SweepArgs, out: &Path) -> Result<()> {
    let thresholds = parse_thresholds(&args.thresholds)?;
    let utts: Vec<UtteranceCandidates> = records
        .iter()
        .map(|r| UtteranceCandidates {
            label: r.label,
            duration_s: r.duration_s,
            candidates: r.candidates.iter().map(|c| (c.run, c.y_m0)).collect(),
        })
        .collect();
    let points = sweep(&utts, &thresholds, cfg.detector.refractory_frames)?;
    let path = out.join("det.csv");
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_det_csv(std::io::BufWriter::new(file), &points)?;
    println!(
        "FRR {:.4} at FAH {} over {} thresholds (monotone: {}); DET curve in {}",
        frr_at_fah(&points, args.fah),
        args.fah,
        points.len(),
        is_monotone(&points),
        path.display()
    );
    Ok(())
}
