//! Motion diversity, beat alignment, PCM, interpolation smoothness, and
//! latent cluster separation.
//!
//! Motion embeddings are the three head-rotation channels of a motion
//! sequence. Sequence-level embeddings (for [`div`]) are per-sequence means.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::synthdata::MOTION_DIM;
use crate::tensor::Tensor;
use crate::util::l2;

pub const BA_SIGMA: f64 = 3.0;
pub const PCM_TAU: f64 = 1.0;
pub const PATH_LEN: usize = 17;
pub const EMBED_DIM: usize = 3;

/// Per-frame head-rotation embedding `[T, 3]` of a `[T, 12]` motion sequence.
pub fn motion_embedding(rho: &Tensor) -> Result<Tensor> {
    if rho.rank() != 2 || rho.cols() != MOTION_DIM {
        return shape_err(
            "motion_embedding",
            format!("expected [T, {MOTION_DIM}], got {:?}", rho.shape()),
        );
    }
    let data = (0..rho.rows())
        .flat_map(|i| rho.row(i)[..EMBED_DIM].to_vec())
        .collect();
    Tensor::matrix(rho.rows(), EMBED_DIM, data)
}

/// Mean head-rotation embedding of a motion sequence.
pub fn sequence_embedding(rho: &Tensor) -> Result<Vec<f64>> {
    Ok(crate::synthdata::sequence_mean(&motion_embedding(rho)?))
}

/// `2 / (B (B - 1)) Σ_{i<j} |m_i - m_j|_1`.
pub fn div(embeddings: &[Vec<f64>]) -> Result<f64> {
    let b = embeddings.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "div needs at least 2 embeddings, got {b}"
        )));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return shape_err("div", "embeddings differ in length");
    }
    let mut acc = 0.0;
    for i in 0..b {
        for j in i + 1..b {
            acc += embeddings[i]
                .iter()
                .zip(&embeddings[j])
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>();
        }
    }
    Ok(2.0 * acc / (b * (b - 1)) as f64)
}

/// [`div`] over the sequence embeddings of motion sequences.
pub fn div_motion(seqs: &[Tensor]) -> Result<f64> {
    let e = seqs
        .iter()
        .map(sequence_embedding)
        .collect::<Result<Vec<_>>>()?;
    div(&e)
}

/// Strictly increasing frame indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BeatTrack(Vec<usize>);

impl BeatTrack {
    pub fn new(beats: Vec<usize>) -> Result<Self> {
        if beats.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "beat track must be strictly increasing".into(),
            ));
        }
        Ok(Self(beats))
    }

    pub fn beats(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Distance from `t` to the closest beat.
    fn nearest(&self, t: usize) -> Option<usize> {
        let i = self.0.partition_point(|&b| b < t);
        let after = self.0.get(i).map(|&b| b - t);
        let before = i.checked_sub(1).map(|j| t - self.0[j]);
        match (before, after) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

/// Mean over motion beats of `exp(-d² / (2σ²))`, `d` the distance to the nearest audio beat.
pub fn beat_align(motion: &BeatTrack, audio: &BeatTrack, sigma: f64) -> Result<f64> {
    if motion.is_empty() {
        return Err(Error::InvalidArgument(
            "beat_align: empty motion beat track".into(),
        ));
    }
    if audio.is_empty() {
        return Err(Error::InvalidArgument(
            "beat_align: empty audio beat track".into(),
        ));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "beat_align: sigma {sigma} must be > 0"
        )));
    }
    let total: f64 = motion
        .beats()
        .iter()
        .map(|&b| {
            let d = audio.nearest(b).expect("audio non-empty") as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / motion.len() as f64)
}

/// Head-rotation speed per frame: central differences inside, one-sided at the ends.
pub fn rotation_speed(rho: &Tensor) -> Result<Vec<f64>> {
    let e = motion_embedding(rho)?;
    let n = e.rows();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 frames, got {n}"
        )));
    }
    Ok((0..n)
        .map(|t| {
            let (a, b, h) = match t {
                0 => (0, 1, 1.0),
                t if t == n - 1 => (n - 2, n - 1, 1.0),
                t => (t - 1, t + 1, 2.0),
            };
            l2(e.row(b), e.row(a)) / h
        })
        .collect())
}

/// Frames that are strict local minima of head-rotation speed.
pub fn extract_motion_beats(rho: &Tensor) -> Result<BeatTrack> {
    let v = rotation_speed(rho)?;
    BeatTrack::new(
        (1..v.len() - 1)
            .filter(|&t| v[t] < v[t - 1] && v[t] < v[t + 1])
            .collect(),
    )
}

/// `1/(T J) Σ_t Σ_j 1[|m̂_tj - m_tj| < τ]` over `[T, J]` embeddings.
pub fn pcm(pred: &Tensor, truth: &Tensor, tau: f64) -> Result<f64> {
    if pred.shape() != truth.shape() || pred.rank() != 2 {
        return shape_err("pcm", format!("{:?} vs {:?}", pred.shape(), truth.shape()));
    }
    if pred.numel() == 0 {
        return Err(Error::InvalidArgument("pcm of empty sequences".into()));
    }
    let hits = pred
        .data()
        .iter()
        .zip(truth.data())
        .filter(|(a, b)| (*a - *b).abs() < tau)
        .count();
    Ok(hits as f64 / pred.numel() as f64)
}

/// [`pcm`] on the head-rotation embeddings of two motion sequences.
pub fn pcm_motion(pred: &Tensor, truth: &Tensor, tau: f64) -> Result<f64> {
    pcm(&motion_embedding(pred)?, &motion_embedding(truth)?, tau)
}

/// Embedding distances between consecutive path points.
pub fn path_steps<T, F>(path: &[T], embed: F) -> Result<Vec<f64>>
where
    F: Fn(&T) -> Vec<f64>,
{
    let e: Vec<Vec<f64>> = path.iter().map(embed).collect();
    if e.windows(2).any(|w| w[0].len() != w[1].len()) {
        return shape_err("path_steps", "embeddings differ in length");
    }
    Ok(e.windows(2).map(|w| l2(&w[0], &w[1])).collect())
}

/// Mean embedding distance between adjacent path points.
pub fn e_ppl<T, F: Fn(&T) -> Vec<f64>>(path: &[T], embed: F) -> Result<f64> {
    if path.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "e_ppl needs a path of >= 2 points, got {}",
            path.len()
        )));
    }
    let s = path_steps(path, embed)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Population variance of the adjacent-point distances.
pub fn e_pdv<T, F: Fn(&T) -> Vec<f64>>(path: &[T], embed: F) -> Result<f64> {
    if path.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "e_pdv needs a path of >= 3 points, got {}",
            path.len()
        )));
    }
    let s = path_steps(path, embed)?;
    let m = s.iter().sum::<f64>() / s.len() as f64;
    Ok(s.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / s.len() as f64)
}

/// Mean silhouette coefficient with Euclidean distance.
pub fn cluster_separation(points: &[(Vec<f64>, usize)]) -> Result<f64> {
    let n_labels = points.iter().map(|p| p.1 + 1).max().unwrap_or(0);
    let mut counts = vec![0usize; n_labels];
    for p in points {
        counts[p.1] += 1;
    }
    let present: Vec<usize> = (0..n_labels).filter(|&l| counts[l] > 0).collect();
    if present.len() < 2 || present.iter().any(|&l| counts[l] < 2) {
        return Err(Error::InvalidArgument(
            "cluster_separation needs >= 2 labels with >= 2 points each".into(),
        ));
    }
    let mut total = 0.0;
    for (i, (x, li)) in points.iter().enumerate() {
        let mut sums = vec![0.0; n_labels];
        for (j, (y, lj)) in points.iter().enumerate() {
            if i != j {
                sums[*lj] += l2(x, y);
            }
        }
        let a = sums[*li] / (counts[*li] - 1) as f64;
        let b = present
            .iter()
            .filter(|&&l| l != *li)
            .map(|&l| sums[l] / counts[l] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / points.len() as f64)
}

/// sha256 over the shapes and little-endian values of `inputs`, hex encoded.
pub fn provenance_hash(inputs: &[&Tensor]) -> String {
    let mut h = Sha256::new();
    for t in inputs {
        h.update((t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// One metric value with its parameters and an input hash.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub params: Vec<(String, f64)>,
    pub provenance: String,
}

impl MetricReport {
    /// `metric=<name> value=<v> [<param>=<v>]* inputs=<sha256>`
    pub fn to_line(&self) -> String {
        let mut s = format!("metric={} value={:e}", self.name, self.value);
        for (k, v) in &self.params {
            let _ = write!(s, " {k}={v:e}");
        }
        let _ = write!(s, " inputs={}", self.provenance);
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("malformed metric line {line:?}"));
        let mut name = None;
        let mut value = None;
        let mut provenance = None;
        let mut params = Vec::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(bad)?;
            match k {
                "metric" => name = Some(v.to_string()),
                "value" => value = Some(v.parse().map_err(|_| bad())?),
                "inputs" => provenance = Some(v.to_string()),
                _ => params.push((k.to_string(), v.parse().map_err(|_| bad())?)),
            }
        }
        Ok(Self {
            name: name.ok_or_else(bad)?,
            value: value.ok_or_else(bad)?,
            params,
            provenance: provenance.ok_or_else(bad)?,
        })
    }
}
