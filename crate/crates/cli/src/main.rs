//! `gmixseq`: generate synthetic corpora, train GMEG/NFMG models, sample,
//! interpolate, and score sequence files.
//!
//! Failures print one line, `error: <category>: <message>`, to stderr and
//! exit nonzero (2 for usage errors, 1 otherwise).

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use gmixseq::checkpoint::{Checkpoint, Model, ModelKind};
use gmixseq::config::KeyValues;
use gmixseq::gmeg::{self, EmotionSpec, GmegConfig, GmegModel, InterpMode};
use gmixseq::metrics::{self, BeatTrack, MetricReport, BA_SIGMA, PCM_TAU};
use gmixseq::nfmg::{self, NfmgConfig, NfmgModel};
use gmixseq::params::{Adam, AdamConfig};
use gmixseq::synthdata::{
    archetype_separation, audio_beat_track, gen_emotion_corpus, gen_motion_corpus, sequence_mean,
    Corpus, CorpusKind, EmotionConfig, Modality, MotionConfig, OracleClassifier, Record,
};
use gmixseq::train::TrainConfig;
use gmixseq::util::{normal_vec, seeded, uniform};
use gmixseq::{Error, Tensor};

const SEED_ENV: &str = "GMIXSEQ_SEED";

#[derive(Parser)]
#[command(
    name = "gmixseq",
    version,
    about = "Mixture- and flow-prior sequence VAEs on synthetic face coefficients"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Bin,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Emotion,
    Motion,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Gmeg,
    Nfmg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Blend,
    Mixture,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Div,
    Ba,
    Pcm,
    EPpl,
    EPdv,
    Accuracy,
}

impl MetricArg {
    fn name(self) -> &'static str {
        match self {
            Self::Div => "div",
            Self::Ba => "ba",
            Self::Pcm => "pcm",
            Self::EPpl => "e-ppl",
            Self::EPdv => "e-pdv",
            Self::Accuracy => "accuracy",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic emotion or motion corpus.
    GenData {
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Emotions (emotion kind only).
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Sequences per emotion, or per speaker for motion.
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        t: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 16)]
        coef_dim: usize,
        #[arg(long, default_value_t = 2)]
        speakers: usize,
        /// Motion regimes: one or two.
        #[arg(long, default_value = "bimodal")]
        modality: String,
        #[arg(long, value_enum, default_value = "bin")]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint and a per-epoch CSV log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// key=value file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Epochs between checkpoint writes.
        #[arg(long)]
        save_every: Option<usize>,
        /// Any config key, e.g. `--set enc_dim=32`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from this checkpoint up to `epochs` total.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate sequences for the audio tracks of a dataset file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Target emotion (GMEG only).
        #[arg(long)]
        emotion: Option<usize>,
        /// Use only the first N records.
        #[arg(long)]
        count: Option<usize>,
        /// Samples per record.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "bin")]
        format: Format,
    },
    /// Sweep the interpolation weight between two emotions (GMEG only).
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled dataset: audio source and classifier reference.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        e1: usize,
        #[arg(long)]
        e2: usize,
        /// Record whose audio and speaker drive the sweep.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Comma-separated weights in [0, 1]; default 0, 0.1, .., 1.
        #[arg(long)]
        alphas: Option<String>,
        #[arg(long, value_enum, default_value = "blend")]
        mode: ModeArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// CSV with alpha, p(e1), p(e2) and the E-PPL of the path so far.
        #[arg(long)]
        table: PathBuf,
        #[arg(long, value_enum, default_value = "bin")]
        format: Format,
    },
    /// Score a sequence file.
    Eval {
        #[arg(long, value_enum)]
        metric: MetricArg,
        #[arg(long)]
        input: PathBuf,
        /// Ground truth (pcm) or labeled classifier data (e-ppl, e-pdv, accuracy on emotion files).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = BA_SIGMA)]
        sigma: f64,
        #[arg(long, default_value_t = PCM_TAU)]
        tau: f64,
    },
    /// Print a checkpoint's header and hyperparameters.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (cat, code) = categorize(&e);
            eprintln!("error: {cat}: {}", one_line(&e));
            ExitCode::from(code)
        }
    }
}

/// The context chain joined with `: `, skipping causes already quoted by
/// the message above them.
fn one_line(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for c in e.chain() {
        let c = c.to_string();
        if !out.ends_with(&c) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&c);
        }
    }
    out.replace('\n', " ")
}

fn categorize(e: &anyhow::Error) -> (&'static str, u8) {
    match e.downcast_ref::<Error>() {
        Some(Error::InvalidArgument(_)) | Some(Error::UnknownSpeaker(_)) => ("usage", 2),
        Some(Error::Checksum) => ("checksum", 1),
        Some(Error::Version { .. }) => ("version", 1),
        Some(Error::KindMismatch { .. }) => ("kind", 1),
        Some(Error::Diverged { .. }) => ("diverged", 1),
        Some(Error::Io(_)) => ("io", 1),
        Some(Error::Format(_)) => ("format", 1),
        Some(_) => ("model", 1),
        None if e.downcast_ref::<std::io::Error>().is_some() => ("io", 1),
        None => ("usage", 2),
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData {
            kind,
            k,
            n,
            t,
            seed,
            coef_dim,
            speakers,
            modality,
            format,
            out,
        } => {
            let seed = resolve_seed(seed, None)?;
            let corpus = match kind {
                KindArg::Emotion => {
                    let mut cfg = EmotionConfig::new(k, n, t, coef_dim, seed);
                    cfg.n_speakers = speakers;
                    gen_emotion_corpus(&cfg)?
                }
                KindArg::Motion => {
                    let m = match modality.as_str() {
                        "unimodal" => Modality::Unimodal,
                        "bimodal" => Modality::Bimodal,
                        _ => {
                            return Err(Error::InvalidArgument(format!(
                                "modality {modality:?} (unimodal|bimodal)"
                            ))
                            .into())
                        }
                    };
                    gen_motion_corpus(&MotionConfig::new(speakers, n, t, seed, m))?
                }
            };
            write_corpus(&corpus, &out, format)?;
            let labels: Vec<usize> = (0..corpus.k.max(1))
                .map(|l| corpus.records.iter().filter(|r| r.label == Some(l)).count())
                .collect();
            print!(
                "wrote {} sequences kind={} K={} T={} coef_dim={} audio_dim={} per_label={:?}",
                corpus.len(),
                corpus.kind.as_str(),
                corpus.k,
                corpus.t,
                corpus.coef_dim,
                corpus.audio_dim,
                labels
            );
            if let Some(sep) = archetype_separation(&corpus) {
                print!(" min_separation={sep:.4}");
            }
            println!();
            Ok(())
        }
        Command::Train {
            data,
            model,
            out,
            log,
            config,
            epochs,
            lr,
            batch_size,
            seed,
            save_every,
            overrides,
            resume,
        } => {
            let mut flags = KeyValues::new();
            if let Some(v) = epochs {
                flags.set("epochs", v);
            }
            if let Some(v) = lr {
                flags.set("lr", v);
            }
            if let Some(v) = batch_size {
                flags.set("batch_size", v);
            }
            if let Some(v) = seed {
                flags.set("seed", v);
            }
            if let Some(v) = save_every {
                flags.set("save_every", v);
            }
            for o in &overrides {
                let one = KeyValues::parse(o).map_err(|_| {
                    Error::InvalidArgument(format!("--set expects KEY=VALUE, got {o:?}"))
                })?;
                flags = flags.merged(&one);
            }
            let file = match &config {
                Some(p) => {
                    KeyValues::load(p).with_context(|| format!("reading {}", p.display()))?
                }
                None => KeyValues::new(),
            };
            let corpus = read_corpus(&data)?;
            train(
                &corpus,
                model,
                &out,
                &log,
                &file.merged(&flags),
                resume.as_deref(),
            )
        }
        Command::Sample {
            checkpoint,
            data,
            out,
            emotion,
            count,
            repeat,
            seed,
            format,
        } => {
            let ck = read_checkpoint(&checkpoint)?;
            let seed = resolve_seed(seed, None)?;
            let corpus = read_corpus(&data)?;
            let n = count.unwrap_or(corpus.len()).min(corpus.len());
            if n == 0 || repeat == 0 {
                bail!(Error::InvalidArgument("nothing to sample".into()));
            }
            let mut records = Vec::with_capacity(n * repeat);
            for (i, r) in corpus.records[..n].iter().enumerate() {
                for j in 0..repeat {
                    let coefs = match &ck.model {
                        Model::Gmeg(m) => {
                            let e = emotion.ok_or_else(|| {
                                Error::InvalidArgument("--emotion is required for GMEG".into())
                            })?;
                            let (nw, nz) = gmeg_noise(m, seed, i, j);
                            m.generate(&r.audio, r.speaker, EmotionSpec::Label(e), &nw, &nz)?
                        }
                        Model::Nfmg(m) => {
                            if emotion.is_some() {
                                bail!(Error::InvalidArgument(
                                    "--emotion applies to GMEG only".into()
                                ));
                            }
                            let mut rng = seeded(noise_seed(seed, i, j));
                            m.sample_motion(
                                &r.audio,
                                r.speaker,
                                &normal_vec(&mut rng, m.config().latent_dim),
                            )?
                        }
                    };
                    records.push(Record {
                        label: emotion,
                        speaker: r.speaker,
                        audio: r.audio.clone(),
                        coefs,
                    });
                }
            }
            let k = match &ck.model {
                Model::Gmeg(m) => m.config().k,
                Model::Nfmg(_) => corpus.k,
            };
            let kind = match ck.model.kind() {
                ModelKind::Gmeg => CorpusKind::Emotion,
                ModelKind::Nfmg => CorpusKind::Motion,
            };
            let generated = sequence_corpus(kind, k, &corpus, seed, records);
            write_corpus(&generated, &out, format)?;
            println!("wrote {} sequences to {}", generated.len(), out.display());
            Ok(())
        }
        Command::Interpolate {
            checkpoint,
            data,
            e1,
            e2,
            index,
            alphas,
            mode,
            seed,
            out,
            table,
            format,
        } => {
            let m = read_checkpoint(&checkpoint)?.into_gmeg()?.0;
            let seed = resolve_seed(seed, None)?;
            let corpus = read_corpus(&data)?;
            let grid = parse_alphas(alphas.as_deref())?;
            let r = corpus.records.get(index).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "record {index} out of range ({} records)",
                    corpus.len()
                ))
            })?;
            let clf = OracleClassifier::fit(&corpus)?;
            if e1 >= clf.k() || e2 >= clf.k() {
                bail!(Error::InvalidArgument(format!(
                    "emotions must be < {}",
                    clf.k()
                )));
            }
            let (nw, nz) = gmeg_noise(&m, seed, index, 0);
            let u: f64 = uniform(&mut seeded(noise_seed(seed, index, 0) ^ 0x5555));
            let mode = match mode {
                ModeArg::Blend => InterpMode::MomentBlend,
                ModeArg::Mixture => InterpMode::Mixture { u },
            };
            let mut csv = BufWriter::new(
                File::create(&table).with_context(|| format!("creating {}", table.display()))?,
            );
            writeln!(csv, "alpha,p_e1,p_e2,e_ppl")?;
            let mut path: Vec<Tensor> = Vec::with_capacity(grid.len());
            let mut records = Vec::with_capacity(grid.len());
            for &alpha in &grid {
                let y = m.generate(
                    &r.audio,
                    r.speaker,
                    EmotionSpec::Blend {
                        e1,
                        e2,
                        alpha,
                        mode,
                    },
                    &nw,
                    &nz,
                )?;
                let p = clf.probs(&y);
                path.push(y.clone());
                let eppl = if path.len() < 2 {
                    0.0
                } else {
                    metrics::e_ppl(&path, |s| clf.embed_sequence(s))?
                };
                writeln!(csv, "{alpha},{:e},{:e},{:e}", p[e1], p[e2], eppl)?;
                records.push(Record {
                    label: None,
                    speaker: r.speaker,
                    audio: r.audio.clone(),
                    coefs: y,
                });
            }
            csv.flush()?;
            let generated =
                sequence_corpus(CorpusKind::Emotion, m.config().k, &corpus, seed, records);
            write_corpus(&generated, &out, format)?;
            println!(
                "wrote {} path points to {} and {}",
                grid.len(),
                out.display(),
                table.display()
            );
            Ok(())
        }
        Command::Eval {
            metric,
            input,
            reference,
            out,
            sigma,
            tau,
        } => {
            let c = read_corpus(&input)?;
            let reference = reference.map(|p| read_corpus(&p)).transpose()?;
            let report = evaluate(metric, &c, reference.as_ref(), sigma, tau)?;
            let line = report.to_line();
            if let Some(p) = out {
                std::fs::write(&p, format!("{line}\n"))
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            println!("{line}");
            Ok(())
        }
        Command::InspectCheckpoint { checkpoint } => {
            let ck = read_checkpoint(&checkpoint)?;
            let p = ck.model.params();
            println!("kind={}", ck.model.kind().as_str());
            println!("version={}", gmixseq::checkpoint::VERSION);
            println!("seed={}", ck.seed);
            println!("epoch={}", ck.epoch);
            println!("tensors={}", p.len());
            println!("scalars={}", p.num_scalars());
            println!(
                "optimizer={}",
                ck.optimizer
                    .as_ref()
                    .map_or("none".to_string(), |a| format!("adam step={}", a.step))
            );
            if let Model::Gmeg(m) = &ck.model {
                println!(
                    "anchors={}",
                    if m.anchors().is_some() { "yes" } else { "no" }
                );
            }
            print!("{}", ck.model.hyperparams().to_text());
            Ok(())
        }
    }
}

/// Flag, then config file, then `GMIXSEQ_SEED`, then 0.
fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> anyhow::Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV}={v:?} is not a u64")).into()),
        Err(_) => Ok(0),
    }
}

fn noise_seed(seed: u64, record: usize, rep: usize) -> u64 {
    seed ^ ((record as u64) << 20 | rep as u64)
        .wrapping_add(1)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// The same draws for a record in `sample` and `interpolate`, so sweep
/// endpoints reproduce plain samples.
fn gmeg_noise(m: &GmegModel, seed: u64, record: usize, rep: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = seeded(noise_seed(seed, record, rep));
    let nw = normal_vec(&mut rng, m.config().w_dim);
    let nz = normal_vec(&mut rng, m.config().z_dim);
    (nw, nz)
}

fn parse_alphas(s: Option<&str>) -> anyhow::Result<Vec<f64>> {
    let grid: Vec<f64> = match s {
        None => (0..=10).map(|i| i as f64 / 10.0).collect(),
        Some(s) => s
            .split(',')
            .map(|a| {
                a.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("bad alpha {a:?}")))
            })
            .collect::<Result<_, _>>()?,
    };
    if grid.is_empty() || grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
        bail!(Error::InvalidArgument(format!(
            "alpha grid must be non-empty and within [0, 1], got {grid:?}"
        )));
    }
    Ok(grid)
}

fn read_corpus(p: &Path) -> anyhow::Result<Corpus> {
    Corpus::load(p).with_context(|| format!("reading {}", p.display()))
}

fn write_corpus(c: &Corpus, p: &Path, format: Format) -> anyhow::Result<()> {
    match format {
        Format::Bin => c.save(p),
        Format::Text => c.save_text(p),
    }
    .with_context(|| format!("writing {}", p.display()))
}

fn read_checkpoint(p: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(p).with_context(|| format!("reading {}", p.display()))
}

fn sequence_corpus(
    kind: CorpusKind,
    k: usize,
    src: &Corpus,
    seed: u64,
    records: Vec<Record>,
) -> Corpus {
    Corpus {
        kind,
        k,
        t: src.t,
        coef_dim: records.first().map_or(src.coef_dim, |r| r.coefs.cols()),
        audio_dim: src.audio_dim,
        seed,
        params: Vec::new(),
        records,
    }
}

const TRAIN_KEYS: [&str; 7] = [
    "epochs",
    "batch_size",
    "lr",
    "seed",
    "prev_dropout",
    "kl_warmup",
    "save_every",
];

struct RunSettings {
    train: TrainConfig,
    save_every: usize,
}

fn run_settings(kv: &KeyValues, model: ModelArg) -> anyhow::Result<RunSettings> {
    let d = TrainConfig::default();
    let (dropout, warmup) = match model {
        ModelArg::Gmeg => (0.8, 0),
        ModelArg::Nfmg => (0.9, 10),
    };
    let epochs = kv.get("epochs")?.unwrap_or(d.epochs);
    let train = TrainConfig {
        epochs,
        batch_size: kv.get("batch_size")?.unwrap_or(d.batch_size),
        seed: resolve_seed(None, kv.get("seed")?)?,
        adam: AdamConfig {
            lr: kv.get("lr")?.unwrap_or(d.adam.lr),
            ..d.adam
        },
        prev_dropout: kv.get("prev_dropout")?.unwrap_or(dropout),
        kl_warmup: kv.get("kl_warmup")?.unwrap_or(warmup),
    };
    train.validate()?;
    let save_every = kv.get("save_every")?.unwrap_or(epochs.max(1));
    if save_every == 0 {
        bail!(Error::InvalidArgument("save_every must be >= 1".into()));
    }
    Ok(RunSettings { train, save_every })
}

/// Defaults sized to the corpus, with the model keys of `kv` on top.
fn model_kv(defaults: KeyValues, kv: &KeyValues) -> anyhow::Result<KeyValues> {
    for k in kv.keys() {
        if !TRAIN_KEYS.contains(&k) && defaults.get_str(k).is_none() {
            bail!(Error::InvalidArgument(format!("unknown config key {k:?}")));
        }
    }
    let mut model = defaults.clone();
    for k in defaults.keys() {
        if let Some(v) = kv.get_str(k) {
            model.set(k, v);
        }
    }
    Ok(model)
}

fn train(
    corpus: &Corpus,
    model: ModelArg,
    out: &Path,
    log: &Path,
    kv: &KeyValues,
    resume: Option<&Path>,
) -> anyhow::Result<()> {
    let s = run_settings(kv, model)?;
    let (mut m, mut adam, start) = match resume {
        Some(p) => {
            let ck = read_checkpoint(p)?;
            let start = ck.epoch as usize;
            let (m, adam) = match (model, ck.model) {
                (ModelArg::Gmeg, Model::Gmeg(g)) => (Model::Gmeg(g), ck.optimizer),
                (ModelArg::Nfmg, Model::Nfmg(n)) => (Model::Nfmg(n), ck.optimizer),
                (_, other) => bail!(Error::KindMismatch {
                    found: other.kind().as_str().into(),
                    expected: match model {
                        ModelArg::Gmeg => "gmeg".into(),
                        ModelArg::Nfmg => "nfmg".into(),
                    },
                }),
            };
            let adam = adam.unwrap_or_else(|| Adam::new(m.params(), s.train.adam));
            (m, adam, start)
        }
        None => {
            let m = match model {
                ModelArg::Gmeg => {
                    let cfg = GmegConfig::from_kv(&model_kv(
                        GmegConfig::for_corpus(corpus).to_kv(),
                        kv,
                    )?)?;
                    Model::Gmeg(GmegModel::new(cfg, s.train.seed)?)
                }
                ModelArg::Nfmg => {
                    let cfg = NfmgConfig::from_kv(&model_kv(
                        NfmgConfig::for_corpus(corpus).to_kv(),
                        kv,
                    )?)?;
                    Model::Nfmg(NfmgModel::new(cfg, s.train.seed)?)
                }
            };
            let adam = Adam::new(m.params(), s.train.adam);
            (m, adam, 0)
        }
    };
    adam.config.lr = s.train.adam.lr;

    let mut logw = if resume.is_some() && log.exists() {
        BufWriter::new(OpenOptions::new().append(true).open(log)?)
    } else {
        let mut w = BufWriter::new(
            File::create(log).with_context(|| format!("creating {}", log.display()))?,
        );
        let header = match model {
            ModelArg::Gmeg => gmeg::LOG_HEADER,
            ModelArg::Nfmg => nfmg::LOG_HEADER,
        };
        writeln!(w, "{header}")?;
        w.flush()?;
        w
    };

    let mut done = start;
    while done < s.train.epochs {
        let n = s.save_every.min(s.train.epochs - done);
        let tc = TrainConfig {
            epochs: n,
            ..s.train
        };
        let mut write_row = |row: String| -> gmixseq::Result<()> {
            writeln!(logw, "{row}")?;
            logw.flush()?;
            Ok(())
        };
        let result = match &mut m {
            Model::Gmeg(g) => g
                .train(corpus, &tc, &mut adam, done, |_, l| write_row(l.csv_row()))
                .map(|_| ()),
            Model::Nfmg(f) => f
                .train(corpus, &tc, &mut adam, done, |_, l| write_row(l.csv_row()))
                .map(|_| ()),
        };
        if let Err(e) = result {
            let kept = if out.exists() {
                format!("; last good checkpoint kept at {}", out.display())
            } else {
                String::new()
            };
            return Err(anyhow!(e).context(format!("training stopped{kept}")));
        }
        done += n;
        Checkpoint {
            model: m.clone(),
            seed: s.train.seed,
            epoch: done as u64,
            optimizer: Some(adam.clone()),
        }
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    }
    println!(
        "trained {} to epoch {done}; checkpoint {}",
        m.kind().as_str(),
        out.display()
    );
    Ok(())
}

fn evaluate(
    metric: MetricArg,
    c: &Corpus,
    reference: Option<&Corpus>,
    sigma: f64,
    tau: f64,
) -> anyhow::Result<MetricReport> {
    let inputs: Vec<&Tensor> = c.records.iter().map(|r| &r.coefs).collect();
    let mut params = Vec::new();
    let need_ref = || {
        reference
            .ok_or_else(|| Error::InvalidArgument(format!("{} needs --reference", metric.name())))
    };
    let motion = c.kind == CorpusKind::Motion;
    let value = match metric {
        MetricArg::Div => {
            let seqs: Vec<Tensor> = c.records.iter().map(|r| r.coefs.clone()).collect();
            if motion {
                metrics::div_motion(&seqs)?
            } else {
                metrics::div(&seqs.iter().map(sequence_mean).collect::<Vec<_>>())?
            }
        }
        MetricArg::Ba => {
            if !motion {
                bail!(Error::InvalidArgument(
                    "ba applies to motion sequences".into()
                ));
            }
            params.push(("sigma".to_string(), sigma));
            let mut acc = 0.0;
            for r in &c.records {
                let mb = metrics::extract_motion_beats(&r.coefs)?;
                let ab = BeatTrack::new(audio_beat_track(&r.audio))?;
                acc += metrics::beat_align(&mb, &ab, sigma)?;
            }
            if c.is_empty() {
                bail!(Error::InvalidArgument("ba of an empty file".into()));
            }
            acc / c.len() as f64
        }
        MetricArg::Pcm => {
            let g = need_ref()?;
            if g.len() != c.len() || g.is_empty() {
                bail!(Error::InvalidArgument(format!(
                    "pcm pairs sequences: {} vs {}",
                    c.len(),
                    g.len()
                )));
            }
            params.push(("tau".to_string(), tau));
            let mut acc = 0.0;
            for (p, t) in c.records.iter().zip(&g.records) {
                acc += if motion {
                    metrics::pcm_motion(&p.coefs, &t.coefs, tau)?
                } else {
                    metrics::pcm(&p.coefs, &t.coefs, tau)?
                };
            }
            acc / c.len() as f64
        }
        MetricArg::EPpl | MetricArg::EPdv => {
            let seqs: Vec<&Tensor> = c.records.iter().map(|r| &r.coefs).collect();
            let embed: Box<dyn Fn(&&Tensor) -> Vec<f64>> = if motion {
                Box::new(|s| metrics::sequence_embedding(s).unwrap_or_default())
            } else {
                let clf = OracleClassifier::fit(need_ref()?)?;
                Box::new(move |s| clf.embed_sequence(s))
            };
            if metric == MetricArg::EPpl {
                metrics::e_ppl(&seqs, embed)?
            } else {
                metrics::e_pdv(&seqs, embed)?
            }
        }
        MetricArg::Accuracy => {
            let clf = OracleClassifier::fit(need_ref()?)?;
            clf.accuracy(c)?
        }
    };
    Ok(MetricReport {
        name: metric.name().to_string(),
        value,
        params,
        provenance: metrics::provenance_hash(&inputs),
    })
}
