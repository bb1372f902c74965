//! Synthetic corpora with known generating parameters.
//!
//! Emotion corpora pair audio-like feature streams with expression
//! coefficients built from a per-emotion archetype, a per-emotion oscillation,
//! a per-speaker offset, a fixed linear map of the audio, and Gaussian noise.
//! Motion corpora pair a beat-carrying audio stream with 12-channel motion
//! (`[r1(3), t(3), r2(2), r3(2), blink(2)]`) whose head rotation follows one
//! of two oscillation regimes.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::{argmax, l2, normal_vec, seeded};

pub const MOTION_DIM: usize = 12;
pub const DEFAULT_AUDIO_DIM: usize = 8;
/// Frames between audio beats in motion corpora.
pub const BEAT_PERIOD: usize = 8;

const DATA_MAGIC: &[u8; 8] = b"GMXDATA\0";
const DATA_VERSION: u32 = 1;
const TEXT_HEADER: &str = "gmixseq-data";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    Emotion,
    Motion,
}

impl CorpusKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CorpusKind::Emotion => "emotion",
            CorpusKind::Motion => "motion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "emotion" => Ok(CorpusKind::Emotion),
            "motion" => Ok(CorpusKind::Motion),
            _ => Err(Error::InvalidArgument(format!("unknown corpus kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Unimodal,
    Bimodal,
}

/// One paired sequence. For motion corpora `label` is the head-motion regime.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub label: Option<usize>,
    pub speaker: usize,
    pub audio: Tensor,
    pub coefs: Tensor,
}

impl Record {
    pub fn len(&self) -> usize {
        self.coefs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub kind: CorpusKind,
    /// Number of classes (emotions, or motion regimes).
    pub k: usize,
    pub t: usize,
    pub coef_dim: usize,
    pub audio_dim: usize,
    pub seed: u64,
    /// Generator parameters, by name.
    pub params: Vec<(String, Tensor)>,
    pub records: Vec<Record>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn n_speakers(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.speaker + 1)
            .max()
            .unwrap_or(0)
    }

    /// Moves the last `per_label` records of every label into a second corpus.
    pub fn split_holdout(&self, per_label: usize) -> (Corpus, Corpus) {
        let mut train = Corpus {
            records: Vec::new(),
            ..self.clone()
        };
        let mut held = train.clone();
        let mut remaining = vec![0usize; self.k.max(1)];
        for r in &self.records {
            remaining[r.label.unwrap_or(0).min(self.k.max(1) - 1)] += 1;
        }
        for r in &self.records {
            let slot = &mut remaining[r.label.unwrap_or(0).min(self.k.max(1) - 1)];
            if *slot <= per_label {
                held.records.push(r.clone());
            } else {
                train.records.push(r.clone());
            }
            *slot -= 1;
        }
        (train, held)
    }

    fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.audio.rank() != 2 || r.coefs.rank() != 2 {
                return Err(Error::Format(format!(
                    "record {i}: sequences must be matrices"
                )));
            }
            if r.audio.rows() != r.coefs.rows() || r.coefs.rows() == 0 {
                return Err(Error::Format(format!(
                    "record {i}: audio has {} frames, coefficients {}",
                    r.audio.rows(),
                    r.coefs.rows()
                )));
            }
            if r.audio.cols() != self.audio_dim || r.coefs.cols() != self.coef_dim {
                return Err(Error::Format(format!(
                    "record {i}: feature dims disagree with header"
                )));
            }
            if let Some(l) = r.label {
                if l >= self.k {
                    return Err(Error::Format(format!(
                        "record {i}: label {l} >= K={}",
                        self.k
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(DATA_MAGIC);
        w.u32(DATA_VERSION);
        w.u8(match self.kind {
            CorpusKind::Emotion => 0,
            CorpusKind::Motion => 1,
        });
        w.len(self.k);
        w.len(self.t);
        w.len(self.coef_dim);
        w.len(self.audio_dim);
        w.u64(self.seed);
        w.len(self.params.len());
        for (name, t) in &self.params {
            w.str(name);
            w.tensor(t);
        }
        w.len(self.records.len());
        for r in &self.records {
            w.i32(r.label.map_or(-1, |l| l as i32));
            w.len(r.speaker);
            w.tensor(&r.audio);
            w.tensor(&r.coefs);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::checked(bytes)?;
        if r.take(DATA_MAGIC.len())? != DATA_MAGIC {
            return Err(Error::Format("not a gmixseq dataset file".into()));
        }
        let version = r.u32()?;
        if version != DATA_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DATA_VERSION,
            });
        }
        let kind = match r.u8()? {
            0 => CorpusKind::Emotion,
            1 => CorpusKind::Motion,
            b => return Err(Error::Format(format!("unknown corpus kind byte {b}"))),
        };
        let k = r.len()?;
        let t = r.len()?;
        let coef_dim = r.len()?;
        let audio_dim = r.len()?;
        let seed = r.u64()?;
        let n_params = r.len()?;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = r.str()?;
            params.push((name, r.tensor()?));
        }
        let n = r.len()?;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let label = r.i32()?;
            let label = if label < 0 {
                None
            } else {
                Some(label as usize)
            };
            let speaker = r.len()?;
            let audio = r.tensor()?;
            let coefs = r.tensor()?;
            records.push(Record {
                label,
                speaker,
                audio,
                coefs,
            });
        }
        r.expect_end()?;
        let c = Corpus {
            kind,
            k,
            t,
            coef_dim,
            audio_dim,
            seed,
            params,
            records,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Reads either format, telling them apart by the binary magic.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(DATA_MAGIC) {
            return Self::from_bytes(&bytes);
        }
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format("neither a binary nor a text dataset".into()))?;
        Self::from_text(&text)
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Line-oriented export. Floats use the shortest representation that
    /// parses back to the same bits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{TEXT_HEADER} {DATA_VERSION}");
        let _ = writeln!(s, "kind {}", self.kind.as_str());
        let _ = writeln!(s, "k {}", self.k);
        let _ = writeln!(s, "t {}", self.t);
        let _ = writeln!(s, "coef_dim {}", self.coef_dim);
        let _ = writeln!(s, "audio_dim {}", self.audio_dim);
        let _ = writeln!(s, "seed {}", self.seed);
        for (name, t) in &self.params {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = write!(s, "param {name} {} {}", t.rank(), dims.join(" "));
            push_floats(&mut s, t.data());
            s.push('\n');
        }
        for r in &self.records {
            let label = r.label.map_or("-".to_string(), |l| l.to_string());
            let _ = writeln!(s, "record {label} {} {}", r.speaker, r.len());
            for i in 0..r.len() {
                s.push('a');
                push_floats(&mut s, r.audio.row(i));
                s.push('\n');
                s.push('c');
                push_floats(&mut s, r.coefs.row(i));
                s.push('\n');
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let mut next = |what: &str| {
            lines
                .next()
                .map(|(n, l)| (n + 1, l))
                .ok_or_else(|| Error::Format(format!("text corpus ended before {what}")))
        };
        let (n, l) = next("header")?;
        let version: u32 = match l.split_whitespace().collect::<Vec<_>>().as_slice() {
            [h, v] if *h == TEXT_HEADER => parse_at(v, n)?,
            _ => {
                return Err(Error::Format(format!(
                    "line {n}: expected {TEXT_HEADER} header"
                )))
            }
        };
        if version != DATA_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DATA_VERSION,
            });
        }
        let mut field = |key: &str| -> Result<String> {
            let (n, l) = next(key)?;
            match l.split_once(' ') {
                Some((k, v)) if k == key => Ok(v.trim().to_string()),
                _ => Err(Error::Format(format!("line {n}: expected `{key}`"))),
            }
        };
        let kind = CorpusKind::parse(&field("kind")?)?;
        let k = parse_at(&field("k")?, 0)?;
        let t = parse_at(&field("t")?, 0)?;
        let coef_dim = parse_at(&field("coef_dim")?, 0)?;
        let audio_dim = parse_at(&field("audio_dim")?, 0)?;
        let seed = parse_at(&field("seed")?, 0)?;

        let mut params = Vec::new();
        let mut records = Vec::new();
        while let Ok((n, l)) = next("record") {
            let mut tok = l.split_whitespace();
            match tok.next() {
                Some("param") => {
                    let name = tok
                        .next()
                        .ok_or_else(|| Error::Format(format!("line {n}: param name")))?;
                    let rank: usize = parse_at(tok.next().unwrap_or(""), n)?;
                    let shape = (0..rank)
                        .map(|_| parse_at(tok.next().unwrap_or(""), n))
                        .collect::<Result<Vec<usize>>>()?;
                    let data = tok.map(|v| parse_at(v, n)).collect::<Result<Vec<f64>>>()?;
                    params.push((name.to_string(), Tensor::new(shape, data)?));
                }
                Some("record") => {
                    let label = match tok.next() {
                        Some("-") => None,
                        Some(v) => Some(parse_at(v, n)?),
                        None => return Err(Error::Format(format!("line {n}: record label"))),
                    };
                    let speaker = parse_at(tok.next().unwrap_or(""), n)?;
                    let len: usize = parse_at(tok.next().unwrap_or(""), n)?;
                    let mut audio = Vec::with_capacity(len * audio_dim);
                    let mut coefs = Vec::with_capacity(len * coef_dim);
                    for _ in 0..len {
                        for (tag, dst) in [("a", &mut audio), ("c", &mut coefs)] {
                            let (n, l) = next("frame")?;
                            let mut tok = l.split_whitespace();
                            if tok.next() != Some(tag) {
                                return Err(Error::Format(format!(
                                    "line {n}: expected `{tag}` row"
                                )));
                            }
                            for v in tok {
                                dst.push(parse_at(v, n)?);
                            }
                        }
                    }
                    records.push(Record {
                        label,
                        speaker,
                        audio: Tensor::matrix(len, audio_dim, audio)?,
                        coefs: Tensor::matrix(len, coef_dim, coefs)?,
                    });
                }
                _ => return Err(Error::Format(format!("line {n}: unexpected {l:?}"))),
            }
        }
        let c = Corpus {
            kind,
            k,
            t,
            coef_dim,
            audio_dim,
            seed,
            params,
            records,
        };
        c.validate()?;
        Ok(c)
    }
}

fn push_floats(s: &mut String, xs: &[f64]) {
    for x in xs {
        let _ = write!(s, " {x:e}");
    }
}

fn parse_at<T: std::str::FromStr>(v: &str, line: usize) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Format(format!("line {line}: cannot parse {v:?}")))
}

/// Mean-centred AR(1) walk per channel, `[t, d]`.
pub fn smooth_walk<R: Rng>(rng: &mut R, t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for c in 0..d {
        let mut x: f64 = rng.sample(StandardNormal);
        for i in 0..t {
            let e: f64 = rng.sample(StandardNormal);
            x = 0.8 * x + 0.6 * e;
            data[i * d + c] = x;
        }
        let m = (0..t).map(|i| data[i * d + c]).sum::<f64>() / t as f64;
        for i in 0..t {
            data[i * d + c] -= m;
        }
    }
    Tensor::matrix(t, d, data).expect("shape by construction")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmotionConfig {
    pub k: usize,
    pub n_per_class: usize,
    pub t: usize,
    pub coef_dim: usize,
    pub audio_dim: usize,
    pub n_speakers: usize,
    pub noise: f64,
    /// Scale of the per-emotion oscillation amplitudes.
    pub osc_amp: f64,
    /// Scale of the audio-to-expression map.
    pub audio_gain: f64,
    pub speaker_scale: f64,
    pub seed: u64,
}

impl EmotionConfig {
    pub fn new(k: usize, n_per_class: usize, t: usize, coef_dim: usize, seed: u64) -> Self {
        Self {
            k,
            n_per_class,
            t,
            coef_dim,
            audio_dim: DEFAULT_AUDIO_DIM,
            n_speakers: 2,
            noise: 0.1,
            osc_amp: 0.3,
            audio_gain: 0.5,
            speaker_scale: 0.3,
            seed,
        }
    }
}

/// Ground-truth parameters of an emotion corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionGenerator {
    pub offsets: Tensor,
    pub osc_amp: Tensor,
    pub osc_freq: Vec<f64>,
    pub osc_phase: Vec<f64>,
    pub audio_map: Tensor,
    pub speaker_offsets: Tensor,
    pub noise: f64,
}

impl EmotionGenerator {
    fn draw<R: Rng>(cfg: &EmotionConfig, rng: &mut R) -> Result<Self> {
        let (k, d) = (cfg.k, cfg.coef_dim);
        let mut offsets = None;
        for _ in 0..100 {
            let cand = Tensor::matrix(k, d, normal_vec(rng, k * d))?;
            if min_pairwise_distance(&cand) > 4.0 * cfg.noise {
                offsets = Some(cand);
                break;
            }
        }
        let offsets = offsets.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "could not draw archetypes separated by 4x noise ({}) in {d} dims",
                cfg.noise
            ))
        })?;
        let osc_amp = Tensor::matrix(
            k,
            d,
            normal_vec(rng, k * d)
                .into_iter()
                .map(|v| v * cfg.osc_amp)
                .collect(),
        )?;
        let osc_freq = (0..k).map(|_| rng.random_range(0.2..0.8)).collect();
        let osc_phase = (0..k).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let scale = cfg.audio_gain / (cfg.audio_dim as f64).sqrt();
        let audio_map = Tensor::matrix(
            cfg.audio_dim,
            d,
            normal_vec(rng, cfg.audio_dim * d)
                .into_iter()
                .map(|v| v * scale)
                .collect(),
        )?;
        let s = cfg.n_speakers;
        let speaker_offsets = Tensor::matrix(
            s,
            d,
            normal_vec(rng, s * d)
                .into_iter()
                .map(|v| v * cfg.speaker_scale)
                .collect(),
        )?;
        Ok(Self {
            offsets,
            osc_amp,
            osc_freq,
            osc_phase,
            audio_map,
            speaker_offsets,
            noise: cfg.noise,
        })
    }

    pub fn k(&self) -> usize {
        self.offsets.rows()
    }

    pub fn coef_dim(&self) -> usize {
        self.offsets.cols()
    }

    /// Noise-free expression frame for `label`, `speaker` at time `t`.
    pub fn mean_frame(&self, label: usize, speaker: usize, t: usize, audio: &[f64]) -> Vec<f64> {
        let d = self.coef_dim();
        let wave = (self.osc_freq[label] * t as f64 + self.osc_phase[label]).sin();
        (0..d)
            .map(|j| {
                let lin: f64 = audio
                    .iter()
                    .enumerate()
                    .map(|(c, a)| a * self.audio_map.data()[c * d + j])
                    .sum();
                self.offsets.row(label)[j]
                    + self.osc_amp.row(label)[j] * wave
                    + self.speaker_offsets.row(speaker)[j]
                    + lin
            })
            .collect()
    }

    pub fn expression<R: Rng>(
        &self,
        label: usize,
        speaker: usize,
        audio: &Tensor,
        rng: &mut R,
    ) -> Result<Tensor> {
        if label >= self.k() || speaker >= self.speaker_offsets.rows() {
            return Err(Error::InvalidArgument(format!(
                "label {label} / speaker {speaker} out of range"
            )));
        }
        let d = self.coef_dim();
        let mut data = Vec::with_capacity(audio.rows() * d);
        for t in 0..audio.rows() {
            let frame = self.mean_frame(label, speaker, t, audio.row(t));
            for v in frame {
                let e: f64 = rng.sample(StandardNormal);
                data.push(v + self.noise * e);
            }
        }
        Tensor::matrix(audio.rows(), d, data)
    }

    fn params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("offsets".into(), self.offsets.clone()),
            ("osc_amp".into(), self.osc_amp.clone()),
            ("osc_freq".into(), Tensor::vector(self.osc_freq.clone())),
            ("osc_phase".into(), Tensor::vector(self.osc_phase.clone())),
            ("audio_map".into(), self.audio_map.clone()),
            ("speaker_offsets".into(), self.speaker_offsets.clone()),
            ("noise".into(), Tensor::vector(vec![self.noise])),
        ]
    }

    pub fn from_corpus(c: &Corpus) -> Result<Self> {
        let get = |n: &str| {
            c.param(n)
                .cloned()
                .ok_or_else(|| Error::Format(format!("corpus lacks generator parameter {n}")))
        };
        Ok(Self {
            offsets: get("offsets")?,
            osc_amp: get("osc_amp")?,
            osc_freq: get("osc_freq")?.into_data(),
            osc_phase: get("osc_phase")?.into_data(),
            audio_map: get("audio_map")?,
            speaker_offsets: get("speaker_offsets")?,
            noise: get("noise")?.data()[0],
        })
    }
}

fn min_pairwise_distance(rows: &Tensor) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..rows.rows() {
        for j in i + 1..rows.rows() {
            best = best.min(l2(rows.row(i), rows.row(j)));
        }
    }
    best
}

/// Smallest distance between two archetype offsets, if the corpus records them.
pub fn archetype_separation(c: &Corpus) -> Option<f64> {
    c.param("offsets").map(min_pairwise_distance)
}

/// Records are grouped by class; within a class speakers alternate.
pub fn gen_emotion_corpus(cfg: &EmotionConfig) -> Result<Corpus> {
    if cfg.k < 2 {
        return Err(Error::InvalidArgument(format!(
            "emotion corpus needs K >= 2, got {}",
            cfg.k
        )));
    }
    if cfg.t == 0 || cfg.coef_dim == 0 || cfg.audio_dim == 0 || cfg.n_speakers == 0 {
        return Err(Error::InvalidArgument(
            "emotion corpus dimensions must be positive".into(),
        ));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise {} must be finite and >= 0",
            cfg.noise
        )));
    }
    let mut rng = seeded(cfg.seed);
    let gen = EmotionGenerator::draw(cfg, &mut rng)?;
    let mut records = Vec::with_capacity(cfg.k * cfg.n_per_class);
    for label in 0..cfg.k {
        for i in 0..cfg.n_per_class {
            let speaker = i % cfg.n_speakers;
            let audio = smooth_walk(&mut rng, cfg.t, cfg.audio_dim);
            let coefs = gen.expression(label, speaker, &audio, &mut rng)?;
            records.push(Record {
                label: Some(label),
                speaker,
                audio,
                coefs,
            });
        }
    }
    Ok(Corpus {
        kind: CorpusKind::Emotion,
        k: cfg.k,
        t: cfg.t,
        coef_dim: cfg.coef_dim,
        audio_dim: cfg.audio_dim,
        seed: cfg.seed,
        params: gen.params(),
        records,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionConfig {
    pub n_speakers: usize,
    pub n_per_speaker: usize,
    pub t: usize,
    pub audio_dim: usize,
    pub modality: Modality,
    /// Standard deviation, in frames, of audio beat placement.
    pub jitter: f64,
    pub seed: u64,
}

impl MotionConfig {
    pub fn new(
        n_speakers: usize,
        n_per_speaker: usize,
        t: usize,
        seed: u64,
        modality: Modality,
    ) -> Self {
        Self {
            n_speakers,
            n_per_speaker,
            t,
            audio_dim: DEFAULT_AUDIO_DIM,
            modality,
            jitter: 1.0,
            seed,
        }
    }
}

/// Head-rotation regimes: (yaw offset, amplitude, period in frames).
pub const REGIMES: [(f64, f64, f64); 2] = [
    (0.8, 0.6, 2.0 * BEAT_PERIOD as f64),
    (-0.8, 0.2, BEAT_PERIOD as f64),
];

/// Motion frames for one sequence. Position extrema fall on `first_beat + n * BEAT_PERIOD`
/// (every extremum in the slow regime, every other one in the fast regime).
pub fn motion_sequence<R: Rng>(
    regime: usize,
    amp_scale: f64,
    first_beat: f64,
    t: usize,
    rng: &mut R,
) -> Tensor {
    let (offset, amp, period) = REGIMES[regime];
    let w = 2.0 * PI / period;
    let phase = PI / 2.0 - w * first_beat;
    let a = amp * amp_scale;
    let drift: Vec<f64> = normal_vec(rng, 3).into_iter().map(|v| 0.05 * v).collect();
    let gaze: Vec<f64> = normal_vec(rng, 4).into_iter().map(|v| 0.1 * v).collect();
    let blink_at = rng.random_range(0.0..t as f64);
    let mut data = Vec::with_capacity(t * MOTION_DIM);
    for i in 0..t {
        let tf = i as f64;
        let s = (w * tf + phase).sin();
        data.extend_from_slice(&[0.3 * a * s, offset + a * s, 0.2 * a * s]);
        for d in &drift {
            data.push(d * tf / t as f64);
        }
        let eye = (0.5 * w * tf).sin();
        data.extend(gaze.iter().map(|g| g * eye));
        let blink = (-(tf - blink_at).powi(2) / 2.0).exp();
        data.extend_from_slice(&[blink, blink]);
    }
    Tensor::matrix(t, MOTION_DIM, data).expect("shape by construction")
}

/// Audio for a motion sequence: channel 0 carries unit Gaussian pulses at the
/// (jittered) beat times, the rest are smooth walks.
pub fn beat_audio<R: Rng>(
    beats: &[f64],
    t: usize,
    audio_dim: usize,
    jitter: f64,
    rng: &mut R,
) -> Tensor {
    let mut audio = smooth_walk(rng, t, audio_dim);
    let placed: Vec<f64> = beats
        .iter()
        .map(|b| {
            let e: f64 = rng.sample(StandardNormal);
            b + jitter * e
        })
        .collect();
    let d = audio_dim;
    let data = audio.data_mut();
    for i in 0..t {
        data[i * d] = placed
            .iter()
            .map(|b| (-(i as f64 - b).powi(2) / 2.0).exp())
            .sum();
    }
    audio
}

/// Strict local maxima of audio channel 0 above 0.5.
pub fn audio_beat_track(audio: &Tensor) -> Vec<usize> {
    let x: Vec<f64> = (0..audio.rows()).map(|i| audio.row(i)[0]).collect();
    (1..x.len().saturating_sub(1))
        .filter(|&i| x[i] > 0.5 && x[i] > x[i - 1] && x[i] > x[i + 1])
        .collect()
}

pub fn gen_motion_corpus(cfg: &MotionConfig) -> Result<Corpus> {
    if cfg.t < 3 || cfg.audio_dim == 0 || cfg.n_speakers == 0 {
        return Err(Error::InvalidArgument(
            "motion corpus needs T >= 3 and positive dims".into(),
        ));
    }
    let mut rng = seeded(cfg.seed);
    let s = cfg.n_speakers;
    let amp_scale: Vec<f64> = (0..s).map(|_| rng.random_range(0.8..1.2)).collect();
    let bias: Vec<f64> = (0..s).map(|_| rng.random_range(0.25..0.75)).collect();
    let mut records = Vec::with_capacity(s * cfg.n_per_speaker);
    for speaker in 0..s {
        for _ in 0..cfg.n_per_speaker {
            let regime = match cfg.modality {
                Modality::Unimodal => 0,
                Modality::Bimodal => usize::from(!rng.random_bool(bias[speaker])),
            };
            let first = rng.random_range(0.0..BEAT_PERIOD as f64);
            let coefs = motion_sequence(regime, amp_scale[speaker], first, cfg.t, &mut rng);
            let beats: Vec<f64> = (0..)
                .map(|n| first + (n * BEAT_PERIOD) as f64)
                .take_while(|&b| b < cfg.t as f64)
                .collect();
            let audio = beat_audio(&beats, cfg.t, cfg.audio_dim, cfg.jitter, &mut rng);
            records.push(Record {
                label: Some(regime),
                speaker,
                audio,
                coefs,
            });
        }
    }
    let regimes = Tensor::matrix(
        2,
        3,
        REGIMES.iter().flat_map(|&(o, a, p)| [o, a, p]).collect(),
    )?;
    Ok(Corpus {
        kind: CorpusKind::Motion,
        k: match cfg.modality {
            Modality::Unimodal => 1,
            Modality::Bimodal => 2,
        },
        t: cfg.t,
        coef_dim: MOTION_DIM,
        audio_dim: cfg.audio_dim,
        seed: cfg.seed,
        params: vec![
            ("regimes".into(), regimes),
            ("speaker_amp".into(), Tensor::vector(amp_scale)),
            ("speaker_bias".into(), Tensor::vector(bias)),
            ("jitter".into(), Tensor::vector(vec![cfg.jitter])),
        ],
        records,
    })
}

/// Nearest-centroid classifier on sequence-mean frames.
///
/// The embedding is the projection onto an orthonormal basis of the span of
/// centroid differences (`K - 1` dims), which keeps every between-class
/// distance and drops directions shared by all classes.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleClassifier {
    centroids: Vec<Vec<f64>>,
    basis: Vec<Vec<f64>>,
    tau: f64,
}

impl OracleClassifier {
    pub fn fit(corpus: &Corpus) -> Result<Self> {
        let k = corpus.k;
        if k < 2 {
            return Err(Error::InvalidArgument(
                "oracle classifier needs K >= 2".into(),
            ));
        }
        let d = corpus.coef_dim;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for r in &corpus.records {
            let label = r.label.ok_or_else(|| {
                Error::InvalidArgument("oracle classifier needs a labeled corpus".into())
            })?;
            let m = sequence_mean(&r.coefs);
            sums[label].iter_mut().zip(&m).for_each(|(s, v)| *s += v);
            counts[label] += 1;
        }
        if counts.contains(&0) {
            return Err(Error::InvalidArgument(
                "every label needs at least one sequence".into(),
            ));
        }
        let centroids: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
            .collect();
        Self::from_centroids(centroids)
    }

    pub fn from_centroids(centroids: Vec<Vec<f64>>) -> Result<Self> {
        // Gram-Schmidt on c_k - c_0
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for c in &centroids[1..] {
            let mut v: Vec<f64> = c.iter().zip(&centroids[0]).map(|(a, b)| a - b).collect();
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let mut min_sep = f64::INFINITY;
        for i in 0..centroids.len() {
            for j in i + 1..centroids.len() {
                min_sep = min_sep.min(l2(&centroids[i], &centroids[j]));
            }
        }
        let tau = 0.25 * min_sep;
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument("class centroids coincide".into()));
        }
        Ok(Self {
            centroids,
            basis,
            tau,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.basis.len()
    }

    /// Embedding of one frame (or any vector in coefficient space).
    pub fn embed_frame(&self, x: &[f64]) -> Vec<f64> {
        let c0 = &self.centroids[0];
        self.basis
            .iter()
            .map(|b| b.iter().zip(x).zip(c0).map(|((b, x), c)| b * (x - c)).sum())
            .collect()
    }

    pub fn embed_sequence(&self, coefs: &Tensor) -> Vec<f64> {
        self.embed_frame(&sequence_mean(coefs))
    }

    /// `softmax(-|x - c_k|² / (2 τ²))` with `τ` a quarter of the closest centroid gap.
    pub fn probs_frame(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .centroids
            .iter()
            .map(|c| -l2(x, c).powi(2) / (2.0 * self.tau * self.tau))
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn probs(&self, coefs: &Tensor) -> Vec<f64> {
        self.probs_frame(&sequence_mean(coefs))
    }

    pub fn predict(&self, coefs: &Tensor) -> usize {
        let m = sequence_mean(coefs);
        let d: Vec<f64> = self.centroids.iter().map(|c| -l2(&m, c)).collect();
        argmax(&d)
    }

    /// Fraction of labeled records predicted correctly.
    pub fn accuracy(&self, corpus: &Corpus) -> Result<f64> {
        let labeled: Vec<_> = corpus
            .records
            .iter()
            .filter_map(|r| r.label.map(|l| (r, l)))
            .collect();
        if labeled.is_empty() {
            return Err(Error::InvalidArgument("no labeled records".into()));
        }
        let hits = labeled
            .iter()
            .filter(|(r, l)| self.predict(&r.coefs) == *l)
            .count();
        Ok(hits as f64 / labeled.len() as f64)
    }
}

pub fn sequence_mean(coefs: &Tensor) -> Vec<f64> {
    let (n, d) = (coefs.rows(), coefs.cols());
    let mut m = vec![0.0; d];
    for i in 0..n {
        m.iter_mut().zip(coefs.row(i)).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}
