//! Gaussian-mixture expression generator.
//!
//! An encoder maps an expression sequence and its audio to posteriors over a
//! content latent `z` and a mixture latent `w`. A mapper turns `w` into `K`
//! Gaussian components, one per emotion, that act as the prior of `z`. An
//! autoregressive decoder rebuilds the sequence from `z`, the audio, and the
//! previous frames, starting from a learned per-speaker embedding.
//!
//! The emotion label is used only to pick the prior component in the loss and
//! at sampling time; the decoder never sees it.

use rand::seq::SliceRandom;

use crate::config::KeyValues;
use crate::distributions::{ad, DiagGaussian, MixtureParams};
use crate::error::{shape_err, Error, Result};
use crate::nn::{positional_encoding, DecoderStack, EncoderStack, Linear, Mask, StackConfig};
use crate::params::{accumulate_grads, scale_grads, Adam, Graph, ParamId, ParamStore};
use crate::synthdata::{Corpus, CorpusKind};
use crate::tensor::{Tensor, Var};
use crate::train::{epoch_rng, TrainConfig};
use crate::util::{argmax, l2, seeded};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub cond: f64,
    pub w: f64,
    pub emo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            cond: 0.5,
            w: 0.5,
            emo: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rec, self.cond, self.w, self.emo];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and >= 0: {all:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmegConfig {
    /// Number of emotions.
    pub k: usize,
    pub coef_dim: usize,
    pub audio_dim: usize,
    pub n_speakers: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub encoder: StackConfig,
    pub mapper: StackConfig,
    pub decoder: StackConfig,
    pub weights: LossWeights,
    /// Single-Gaussian prior ablation: the mapper emits one component and
    /// emotions are located afterwards by class means of encoded latents.
    pub unimodal: bool,
}

impl GmegConfig {
    pub fn new(k: usize, coef_dim: usize, audio_dim: usize, n_speakers: usize) -> Self {
        Self {
            k,
            coef_dim,
            audio_dim,
            n_speakers,
            z_dim: 16,
            w_dim: 16,
            encoder: StackConfig::default(),
            mapper: StackConfig::default(),
            decoder: StackConfig::default(),
            weights: LossWeights::default(),
            unimodal: false,
        }
    }

    /// Sized to match an emotion corpus.
    pub fn for_corpus(c: &Corpus) -> Self {
        Self::new(c.k, c.coef_dim, c.audio_dim, c.n_speakers().max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("K must be >= 1".into()));
        }
        if [
            self.coef_dim,
            self.audio_dim,
            self.n_speakers,
            self.z_dim,
            self.w_dim,
        ]
        .contains(&0)
        {
            return Err(Error::InvalidArgument(
                "GMEG dimensions must be positive".into(),
            ));
        }
        for s in [&self.encoder, &self.mapper, &self.decoder] {
            s.validate()?;
            if s.model_dim % 2 != 0 {
                return Err(Error::InvalidArgument("model_dim must be even".into()));
            }
        }
        self.weights.validate()
    }

    pub fn n_components(&self) -> usize {
        if self.unimodal {
            1
        } else {
            self.k
        }
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("k", self.k);
        kv.set("coef_dim", self.coef_dim);
        kv.set("audio_dim", self.audio_dim);
        kv.set("n_speakers", self.n_speakers);
        kv.set("z_dim", self.z_dim);
        kv.set("w_dim", self.w_dim);
        stack_to_kv(&mut kv, "enc", &self.encoder);
        stack_to_kv(&mut kv, "map", &self.mapper);
        stack_to_kv(&mut kv, "dec", &self.decoder);
        kv.set("lambda_rec", self.weights.rec);
        kv.set("lambda_cond", self.weights.cond);
        kv.set("lambda_w", self.weights.w);
        kv.set("lambda_emo", self.weights.emo);
        kv.set("unimodal", self.unimodal);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let c = Self {
            k: kv.require("k")?,
            coef_dim: kv.require("coef_dim")?,
            audio_dim: kv.require("audio_dim")?,
            n_speakers: kv.require("n_speakers")?,
            z_dim: kv.require("z_dim")?,
            w_dim: kv.require("w_dim")?,
            encoder: stack_from_kv(kv, "enc")?,
            mapper: stack_from_kv(kv, "map")?,
            decoder: stack_from_kv(kv, "dec")?,
            weights: LossWeights {
                rec: kv.require("lambda_rec")?,
                cond: kv.require("lambda_cond")?,
                w: kv.require("lambda_w")?,
                emo: kv.require("lambda_emo")?,
            },
            unimodal: kv.require("unimodal")?,
        };
        c.validate()?;
        Ok(c)
    }
}

pub(crate) fn stack_to_kv(kv: &mut KeyValues, p: &str, s: &StackConfig) {
    kv.set(&format!("{p}_layers"), s.n_layers);
    kv.set(&format!("{p}_dim"), s.model_dim);
    kv.set(&format!("{p}_heads"), s.n_heads);
    kv.set(&format!("{p}_ff"), s.ff_dim);
}

pub(crate) fn stack_from_kv(kv: &KeyValues, p: &str) -> Result<StackConfig> {
    StackConfig::new(
        kv.require(&format!("{p}_layers"))?,
        kv.require(&format!("{p}_dim"))?,
        kv.require(&format!("{p}_heads"))?,
        kv.require(&format!("{p}_ff"))?,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub z: DiagGaussian,
    pub w: DiagGaussian,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub rec: f64,
    pub cond: f64,
    pub w: f64,
    pub emo: f64,
}

/// Interpolation between two emotion components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InterpMode {
    /// Sample from `N(α μ1 + (1-α) μ2, α σ1² + (1-α) σ2²)`.
    MomentBlend,
    /// Sample component 1 when `u < α`, else component 2.
    Mixture { u: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EmotionSpec {
    Label(usize),
    Blend {
        e1: usize,
        e2: usize,
        alpha: f64,
        mode: InterpMode,
    },
}

/// Mean loss terms over one pass of the training set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub terms: LossTerms,
}

pub const LOG_HEADER: &str = "epoch,total,rec,cond,w,emo";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let t = &self.terms;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.epoch, t.total, t.rec, t.cond, t.w, t.emo
        )
    }
}

struct EncVars {
    z_mu: Var,
    z_lv: Var,
    w_mu: Var,
    w_lv: Var,
}

struct LossVars {
    total: Var,
    rec: Var,
    cond: Var,
    w: Var,
    emo: Var,
}

#[derive(Clone, Debug)]
pub struct GmegModel {
    config: GmegConfig,
    params: ParamStore,
    enc_coef: Linear,
    enc_audio: Linear,
    encoder: EncoderStack,
    z_mu: Linear,
    z_lv: Linear,
    w_mu: Linear,
    w_lv: Linear,
    map_in: Linear,
    comp_embed: ParamId,
    mapper: EncoderStack,
    map_mu: Linear,
    map_lv: Linear,
    dec_prev: Linear,
    dec_z: Linear,
    dec_audio: Linear,
    decoder: DecoderStack,
    dec_out: Linear,
    speakers: ParamId,
    anchors: Option<Tensor>,
}

impl GmegModel {
    pub fn new(config: GmegConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let r = &mut rng;
        let mut p = ParamStore::new();
        let c = &config;
        let (de, dm, dd) = (c.encoder.model_dim, c.mapper.model_dim, c.decoder.model_dim);
        let enc_coef = Linear::new(&mut p, "gmeg.enc.in_coef", c.coef_dim, de, r)?;
        let enc_audio = Linear::new(&mut p, "gmeg.enc.in_audio", c.audio_dim, de, r)?;
        let encoder = EncoderStack::new(&mut p, "gmeg.enc", c.encoder, r)?;
        let z_mu = Linear::new(&mut p, "gmeg.enc.z_mu", de, c.z_dim, r)?;
        let z_lv = Linear::new(&mut p, "gmeg.enc.z_logvar", de, c.z_dim, r)?;
        let w_mu = Linear::new(&mut p, "gmeg.enc.w_mu", de, c.w_dim, r)?;
        let w_lv = Linear::new(&mut p, "gmeg.enc.w_logvar", de, c.w_dim, r)?;
        let map_in = Linear::new(&mut p, "gmeg.map.in_w", c.w_dim, dm, r)?;
        let comp_embed = p.add_uniform("gmeg.map.components", &[c.n_components(), dm], 1.0, r)?;
        let mapper = EncoderStack::new(&mut p, "gmeg.map", c.mapper, r)?;
        let map_mu = Linear::new(&mut p, "gmeg.map.mu", dm, c.z_dim, r)?;
        let map_lv = Linear::new(&mut p, "gmeg.map.logvar", dm, c.z_dim, r)?;
        let dec_prev = Linear::new(&mut p, "gmeg.dec.in_prev", c.coef_dim, dd, r)?;
        let dec_z = Linear::new(&mut p, "gmeg.dec.in_z", c.z_dim, dd, r)?;
        let dec_audio = Linear::new(&mut p, "gmeg.dec.in_audio", c.audio_dim, dd, r)?;
        let decoder = DecoderStack::new(&mut p, "gmeg.dec", c.decoder, r)?;
        let dec_out = Linear::new(&mut p, "gmeg.dec.out", dd, c.coef_dim, r)?;
        let speakers = p.add_uniform("gmeg.speakers", &[c.n_speakers, c.coef_dim], 0.1, r)?;
        Ok(Self {
            config,
            params: p,
            enc_coef,
            enc_audio,
            encoder,
            z_mu,
            z_lv,
            w_mu,
            w_lv,
            map_in,
            comp_embed,
            mapper,
            map_mu,
            map_lv,
            dec_prev,
            dec_z,
            dec_audio,
            decoder,
            dec_out,
            speakers,
            anchors: None,
        })
    }

    /// Rebuild from stored hyperparameters and weights.
    pub fn from_parts(
        config: GmegConfig,
        params: &ParamStore,
        anchors: Option<Tensor>,
    ) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.load_from(params)?;
        if let Some(a) = &anchors {
            if a.shape() != [m.config.k, m.config.z_dim] {
                return shape_err("GmegModel::from_parts", format!("anchors {:?}", a.shape()));
            }
        }
        m.anchors = anchors;
        Ok(m)
    }

    pub fn config(&self) -> &GmegConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn anchors(&self) -> Option<&Tensor> {
        self.anchors.as_ref()
    }

    fn check_pair(&self, coefs: &Tensor, audio: &Tensor) -> Result<()> {
        if coefs.rank() != 2 || audio.rank() != 2 {
            return shape_err("gmeg", "sequences must be [T, dim] matrices");
        }
        if coefs.rows() != audio.rows() || coefs.rows() == 0 {
            return shape_err(
                "gmeg",
                format!(
                    "{} expression frames vs {} audio frames",
                    coefs.rows(),
                    audio.rows()
                ),
            );
        }
        if coefs.cols() != self.config.coef_dim {
            return shape_err(
                "gmeg",
                format!("coef dim {} vs {}", coefs.cols(), self.config.coef_dim),
            );
        }
        self.check_audio(audio)
    }

    fn check_audio(&self, audio: &Tensor) -> Result<()> {
        if audio.rank() != 2 || audio.cols() != self.config.audio_dim || audio.rows() == 0 {
            return shape_err(
                "gmeg",
                format!(
                    "audio must be [T>=1, {}], got {:?}",
                    self.config.audio_dim,
                    audio.shape()
                ),
            );
        }
        Ok(())
    }

    fn check_speaker(&self, speaker: usize) -> Result<()> {
        if speaker >= self.config.n_speakers {
            return Err(Error::UnknownSpeaker(speaker));
        }
        Ok(())
    }

    fn check_label(&self, e: usize) -> Result<()> {
        if e >= self.config.k {
            return Err(Error::InvalidArgument(format!(
                "emotion {e} out of range for K={}",
                self.config.k
            )));
        }
        Ok(())
    }

    fn check_len(name: &str, v: &[f64], n: usize) -> Result<()> {
        if v.len() != n {
            return shape_err(
                "gmeg",
                format!("{name} has {} entries, expected {n}", v.len()),
            );
        }
        Ok(())
    }

    fn encode_vars(&self, g: &mut Graph, coefs: &Tensor, audio: &Tensor) -> Result<EncVars> {
        self.check_pair(coefs, audio)?;
        let t = coefs.rows();
        let c = g.constant(coefs.clone())?;
        let a = g.constant(audio.clone())?;
        let pc = self.enc_coef.forward(g, c)?;
        let pa = self.enc_audio.forward(g, a)?;
        let x = g.tape.add(pc, pa)?;
        let pe = g.constant(positional_encoding(t, self.config.encoder.model_dim)?)?;
        let x = g.tape.add(x, pe)?;
        let h = self.encoder.encode(g, x, Mask::None)?;
        let pooled = g.tape.mean_rows(h)?;
        Ok(EncVars {
            z_mu: self.z_mu.forward(g, pooled)?,
            z_lv: self.z_lv.forward(g, pooled)?,
            w_mu: self.w_mu.forward(g, pooled)?,
            w_lv: self.w_lv.forward(g, pooled)?,
        })
    }

    /// Component means and log-variances, both `[K, z_dim]`.
    fn mog_vars(&self, g: &mut Graph, w: Var) -> Result<(Var, Var)> {
        let e = g.param(self.comp_embed)?;
        let pw = self.map_in.forward(g, w)?;
        let tokens = g.tape.add(e, pw)?;
        let h = self.mapper.encode(g, tokens, Mask::None)?;
        Ok((self.map_mu.forward(g, h)?, self.map_lv.forward(g, h)?))
    }

    fn memory(&self, g: &mut Graph, audio: &Tensor) -> Result<Var> {
        let a = g.constant(audio.clone())?;
        let m = self.dec_audio.forward(g, a)?;
        let pe = g.constant(positional_encoding(
            audio.rows(),
            self.config.decoder.model_dim,
        )?)?;
        g.tape.add(m, pe)
    }

    /// Decoder output for every row of `prefix` (`[n, coef_dim]`, start token first).
    fn decode_vars(&self, g: &mut Graph, z: Var, prefix: Var, memory: Var) -> Result<Var> {
        let n = g.value(prefix).rows();
        let x = self.dec_prev.forward(g, prefix)?;
        let pe = g.constant(positional_encoding(n, self.config.decoder.model_dim)?)?;
        let x = g.tape.add(x, pe)?;
        let pz = self.dec_z.forward(g, z)?;
        let x = g.tape.add(x, pz)?;
        let h = self.decoder.decode(g, x, memory)?;
        self.dec_out.forward(g, h)
    }

    fn speaker_row(&self, g: &mut Graph, speaker: usize) -> Result<Var> {
        self.check_speaker(speaker)?;
        let table = g.param(self.speakers)?;
        g.tape.slice_rows(table, speaker, 1)
    }

    /// Teacher-forced reconstruction: frame `t` is predicted from ground-truth frames `< t`.
    /// `keep`, when given, zeroes the fed-back frames whose entry is false.
    fn teacher_forced_vars(
        &self,
        g: &mut Graph,
        z: Var,
        coefs: &Tensor,
        audio: &Tensor,
        speaker: usize,
        keep: Option<&[bool]>,
    ) -> Result<Var> {
        let start = self.speaker_row(g, speaker)?;
        let t = coefs.rows();
        let prefix = if t > 1 {
            let d = coefs.cols();
            let mut prev = Tensor::matrix(t - 1, d, coefs.data()[..(t - 1) * d].to_vec())?;
            if let Some(keep) = keep {
                for (i, row) in prev.data_mut().chunks_mut(d).enumerate() {
                    if !keep[i] {
                        row.fill(0.0);
                    }
                }
            }
            let prev = g.constant(prev)?;
            g.tape.concat_rows(&[start, prev])?
        } else {
            start
        };
        let memory = self.memory(g, audio)?;
        self.decode_vars(g, z, prefix, memory)
    }

    #[allow(clippy::too_many_arguments)]
    fn loss_vars(
        &self,
        g: &mut Graph,
        coefs: &Tensor,
        audio: &Tensor,
        label: usize,
        speaker: usize,
        noise_w: &[f64],
        noise_z: &[f64],
        keep: Option<&[bool]>,
    ) -> Result<LossVars> {
        self.check_label(label)?;
        self.check_speaker(speaker)?;
        Self::check_len("noise_w", noise_w, self.config.w_dim)?;
        Self::check_len("noise_z", noise_z, self.config.z_dim)?;
        let enc = self.encode_vars(g, coefs, audio)?;
        let nw = g.constant(Tensor::vector(noise_w.to_vec()))?;
        let nz = g.constant(Tensor::vector(noise_z.to_vec()))?;
        let w = ad::reparam(&mut g.tape, enc.w_mu, enc.w_lv, nw)?;
        let z = ad::reparam(&mut g.tape, enc.z_mu, enc.z_lv, nz)?;

        let recon = self.teacher_forced_vars(g, z, coefs, audio, speaker, keep)?;
        let target = g.constant(coefs.clone())?;
        let diff = g.tape.sub(target, recon)?;
        let rec = g.tape.norm(diff)?;

        let (means, lvs) = self.mog_vars(g, w)?;
        let log_q = ad::gaussian_log_pdf(&mut g.tape, enc.z_mu, enc.z_lv, z)?;
        let comp = ad::component_log_pdfs(&mut g.tape, means, lvs, z)?;
        let chosen = if self.config.unimodal { 0 } else { label };
        let picked = g.tape.slice_cols(comp, chosen, 1)?;
        let picked = g.tape.sum(picked)?;
        let cond = g.tape.sub(log_q, picked)?;

        let kc = self.config.n_components() as f64;
        let log_joint = g.tape.add_scalar(comp, -kc.ln())?;
        let log_resp = ad::log_responsibilities(&mut g.tape, log_joint)?;
        let emo = ad::kl_categorical_to_uniform(&mut g.tape, log_resp)?;
        let lw = ad::kl_to_std_normal(&mut g.tape, enc.w_mu, enc.w_lv)?;

        let wt = self.config.weights;
        let mut total = g.tape.scale(rec, wt.rec)?;
        for (v, c) in [(cond, wt.cond), (lw, wt.w), (emo, wt.emo)] {
            let s = g.tape.scale(v, c)?;
            total = g.tape.add(total, s)?;
        }
        Ok(LossVars {
            total,
            rec,
            cond,
            w: lw,
            emo,
        })
    }

    fn terms(g: &Graph, v: &LossVars) -> Result<LossTerms> {
        let s = |x: Var| g.tape.scalar(x);
        Ok(LossTerms {
            total: s(v.total)?,
            rec: s(v.rec)?,
            cond: s(v.cond)?,
            w: s(v.w)?,
            emo: s(v.emo)?,
        })
    }

    pub fn encode(&self, coefs: &Tensor, audio: &Tensor) -> Result<Posterior> {
        let mut g = Graph::inference(&self.params);
        let e = self.encode_vars(&mut g, coefs, audio)?;
        let v = |x: Var| g.value(x).data().to_vec();
        Ok(Posterior {
            z: DiagGaussian::new(v(e.z_mu), v(e.z_lv))?,
            w: DiagGaussian::new(v(e.w_mu), v(e.w_lv))?,
        })
    }

    /// Prior components for `w`, with uniform weights.
    pub fn mog_map(&self, w: &[f64]) -> Result<MixtureParams> {
        Self::check_len("w", w, self.config.w_dim)?;
        let mut g = Graph::inference(&self.params);
        let wv = g.constant(Tensor::vector(w.to_vec()))?;
        let (m, lv) = self.mog_vars(&mut g, wv)?;
        let (m, lv) = (g.value(m), g.value(lv));
        let comps = (0..m.rows())
            .map(|k| DiagGaussian::new(m.row(k).to_vec(), lv.row(k).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        MixtureParams::uniform(comps)
    }

    /// Free-running rollout, one frame per audio frame.
    pub fn decode(&self, z: &[f64], audio: &Tensor, speaker: usize) -> Result<Tensor> {
        Self::check_len("z", z, self.config.z_dim)?;
        self.check_audio(audio)?;
        self.check_speaker(speaker)?;
        let d = self.config.coef_dim;
        let t = audio.rows();
        let mut out: Vec<f64> = Vec::with_capacity(t * d);
        for step in 0..t {
            let mut g = Graph::inference(&self.params);
            let start = self.speaker_row(&mut g, speaker)?;
            let prefix = if step == 0 {
                start
            } else {
                let prev = g.constant(Tensor::matrix(step, d, out.clone())?)?;
                g.tape.concat_rows(&[start, prev])?
            };
            let memory = self.memory(&mut g, audio)?;
            let zv = g.constant(Tensor::vector(z.to_vec()))?;
            let y = self.decode_vars(&mut g, zv, prefix, memory)?;
            out.extend_from_slice(g.value(y).row(step));
        }
        Tensor::matrix(t, d, out)
    }

    /// Reconstruction of `coefs` with ground-truth previous frames fed back.
    pub fn teacher_forced(
        &self,
        z: &[f64],
        coefs: &Tensor,
        audio: &Tensor,
        speaker: usize,
    ) -> Result<Tensor> {
        Self::check_len("z", z, self.config.z_dim)?;
        self.check_pair(coefs, audio)?;
        let mut g = Graph::inference(&self.params);
        let zv = g.constant(Tensor::vector(z.to_vec()))?;
        let y = self.teacher_forced_vars(&mut g, zv, coefs, audio, speaker, None)?;
        Ok(g.value(y).clone())
    }

    pub fn loss(
        &self,
        coefs: &Tensor,
        audio: &Tensor,
        label: usize,
        speaker: usize,
        noise_w: &[f64],
        noise_z: &[f64],
    ) -> Result<LossTerms> {
        let mut g = Graph::inference(&self.params);
        let v = self.loss_vars(&mut g, coefs, audio, label, speaker, noise_w, noise_z, None)?;
        Self::terms(&g, &v)
    }

    /// Loss and per-parameter gradients for one sequence. `keep` optionally
    /// drops fed-back frames (see [`TrainConfig::prev_dropout`]).
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grads(
        &self,
        coefs: &Tensor,
        audio: &Tensor,
        label: usize,
        speaker: usize,
        noise_w: &[f64],
        noise_z: &[f64],
        keep: Option<&[bool]>,
    ) -> Result<(LossTerms, Vec<Tensor>)> {
        let mut g = Graph::new(&self.params);
        let v = self.loss_vars(&mut g, coefs, audio, label, speaker, noise_w, noise_z, keep)?;
        let terms = Self::terms(&g, &v)?;
        let grads = g.backward(v.total)?;
        Ok((terms, grads))
    }

    /// Finite-difference check of the total loss against its parameter gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn grad_check_loss(
        &self,
        coefs: &Tensor,
        audio: &Tensor,
        label: usize,
        speaker: usize,
        noise_w: &[f64],
        noise_z: &[f64],
        h: f64,
        max_coords: usize,
    ) -> Result<f64> {
        crate::params::grad_check_params(
            &self.params,
            |g| {
                Ok(self
                    .loss_vars(g, coefs, audio, label, speaker, noise_w, noise_z, None)?
                    .total)
            },
            h,
            max_coords,
        )
    }

    /// Mean and variance of the prior component for emotion `e` at `w`.
    fn component(&self, e: usize, w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_label(e)?;
        let mix = self.mog_map(w)?;
        if self.config.unimodal {
            let anchors = self.anchors.as_ref().ok_or_else(|| {
                Error::InvalidArgument(
                    "unimodal model has no emotion anchors; fit them after training".into(),
                )
            })?;
            Ok((anchors.row(e).to_vec(), mix.component(0).var()))
        } else {
            let c = mix.component(e);
            Ok((c.mean.clone(), c.var()))
        }
    }

    /// `z = μ_e(w) + σ_e(w) ⊙ noise_z` with `w = noise_w` drawn from the standard-normal prior.
    pub fn sample_latent(&self, e: usize, noise_w: &[f64], noise_z: &[f64]) -> Result<Vec<f64>> {
        Self::check_len("noise_w", noise_w, self.config.w_dim)?;
        Self::check_len("noise_z", noise_z, self.config.z_dim)?;
        let (m, v) = self.component(e, noise_w)?;
        Ok(gaussian_point(&m, &v, noise_z))
    }

    pub fn interpolate_latent(
        &self,
        e1: usize,
        e2: usize,
        alpha: f64,
        noise_w: &[f64],
        noise_z: &[f64],
        mode: InterpMode,
    ) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!(
                "interpolation weight {alpha} outside [0, 1]"
            )));
        }
        Self::check_len("noise_w", noise_w, self.config.w_dim)?;
        Self::check_len("noise_z", noise_z, self.config.z_dim)?;
        match mode {
            InterpMode::Mixture { u } => {
                let e = if u < alpha { e1 } else { e2 };
                self.check_label(e1)?;
                self.check_label(e2)?;
                self.sample_latent(e, noise_w, noise_z)
            }
            InterpMode::MomentBlend => {
                let (m1, v1) = self.component(e1, noise_w)?;
                let (m2, v2) = self.component(e2, noise_w)?;
                let m = blend(&m1, &m2, alpha);
                let v = blend(&v1, &v2, alpha);
                Ok(gaussian_point(&m, &v, noise_z))
            }
        }
    }

    pub fn latent_for(
        &self,
        spec: EmotionSpec,
        noise_w: &[f64],
        noise_z: &[f64],
    ) -> Result<Vec<f64>> {
        match spec {
            EmotionSpec::Label(e) => self.sample_latent(e, noise_w, noise_z),
            EmotionSpec::Blend {
                e1,
                e2,
                alpha,
                mode,
            } => self.interpolate_latent(e1, e2, alpha, noise_w, noise_z, mode),
        }
    }

    /// Sample or interpolate a latent, then decode it over `audio`.
    pub fn generate(
        &self,
        audio: &Tensor,
        speaker: usize,
        spec: EmotionSpec,
        noise_w: &[f64],
        noise_z: &[f64],
    ) -> Result<Tensor> {
        let z = self.latent_for(spec, noise_w, noise_z)?;
        self.decode(&z, audio, speaker)
    }

    /// Emotion of an observed sequence: the most responsible prior component
    /// at the posterior means (nearest anchor for the unimodal ablation).
    pub fn classify(&self, coefs: &Tensor, audio: &Tensor) -> Result<usize> {
        let post = self.encode(coefs, audio)?;
        if self.config.unimodal {
            let anchors = self.anchors.as_ref().ok_or_else(|| {
                Error::InvalidArgument("unimodal model has no emotion anchors".into())
            })?;
            let d: Vec<f64> = (0..anchors.rows())
                .map(|k| -l2(anchors.row(k), &post.z.mean))
                .collect();
            return Ok(argmax(&d));
        }
        let mix = self.mog_map(&post.w.mean)?;
        Ok(mix.responsibilities(&post.z.mean)?.argmax())
    }

    /// Class means of encoded posterior means; these locate emotions for the unimodal ablation.
    pub fn fit_anchors(&mut self, corpus: &Corpus) -> Result<()> {
        let (k, dz) = (self.config.k, self.config.z_dim);
        let mut sums = vec![0.0; k * dz];
        let mut counts = vec![0usize; k];
        for r in &corpus.records {
            let label = r
                .label
                .ok_or_else(|| Error::InvalidArgument("anchors need labeled data".into()))?;
            self.check_label(label)?;
            let post = self.encode(&r.coefs, &r.audio)?;
            for j in 0..dz {
                sums[label * dz + j] += post.z.mean[j];
            }
            counts[label] += 1;
        }
        if counts.contains(&0) {
            return Err(Error::InvalidArgument(
                "every emotion needs at least one sequence".into(),
            ));
        }
        for (i, s) in sums.iter_mut().enumerate() {
            *s /= counts[i / dz] as f64;
        }
        self.anchors = Some(Tensor::matrix(k, dz, sums)?);
        Ok(())
    }

    /// Mean squared error of teacher-forced reconstructions at the posterior mean of `z`.
    pub fn reconstruction_mse(&self, corpus: &Corpus) -> Result<f64> {
        let mut se = 0.0;
        let mut n = 0usize;
        for r in &corpus.records {
            let post = self.encode(&r.coefs, &r.audio)?;
            let y = self.teacher_forced(&post.z.mean, &r.coefs, &r.audio, r.speaker)?;
            se += y
                .data()
                .iter()
                .zip(r.coefs.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            n += y.numel();
        }
        if n == 0 {
            return Err(Error::InvalidArgument("empty corpus".into()));
        }
        Ok(se / n as f64)
    }

    fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("training corpus is empty".into()));
        }
        if corpus.kind != CorpusKind::Emotion {
            return Err(Error::InvalidArgument(
                "GMEG trains on emotion corpora".into(),
            ));
        }
        for r in &corpus.records {
            let label = r
                .label
                .ok_or_else(|| Error::InvalidArgument("GMEG needs labeled sequences".into()))?;
            self.check_label(label)?;
            self.check_speaker(r.speaker)?;
            self.check_pair(&r.coefs, &r.audio)?;
        }
        Ok(())
    }

    /// Run `cfg.epochs` epochs starting at `start_epoch`. Each epoch shuffles the
    /// corpus, draws fresh reparameterization noise, and takes one Adam step per
    /// mini-batch of averaged gradients. `on_epoch` sees each epoch's mean terms.
    pub fn train<F>(
        &mut self,
        corpus: &Corpus,
        cfg: &TrainConfig,
        adam: &mut Adam,
        start_epoch: usize,
        mut on_epoch: F,
    ) -> Result<Vec<EpochLog>>
    where
        F: FnMut(&GmegModel, &EpochLog) -> Result<()>,
    {
        self.check_corpus(corpus)?;
        cfg.validate()?;
        let (dw, dz) = (self.config.w_dim, self.config.z_dim);
        let mut logs = Vec::with_capacity(cfg.epochs);
        for epoch in start_epoch..start_epoch + cfg.epochs {
            let mut rng = epoch_rng(cfg.seed, epoch);
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            order.shuffle(&mut rng);
            let mut sum = LossTerms {
                total: 0.0,
                rec: 0.0,
                cond: 0.0,
                w: 0.0,
                emo: 0.0,
            };
            for batch in order.chunks(cfg.batch_size) {
                let mut acc = Vec::new();
                for &i in batch {
                    let r = &corpus.records[i];
                    let nw = crate::util::normal_vec(&mut rng, dw);
                    let nz = crate::util::normal_vec(&mut rng, dz);
                    let keep = cfg.draw_keep(&mut rng, r.len());
                    let (t, grads) = self
                        .loss_and_grads(
                            &r.coefs,
                            &r.audio,
                            r.label.unwrap_or(0),
                            r.speaker,
                            &nw,
                            &nz,
                            keep.as_deref(),
                        )
                        .map_err(|e| diverged(epoch, e))?;
                    if !t.total.is_finite() {
                        return Err(Error::Diverged {
                            epoch,
                            detail: "non-finite loss".into(),
                        });
                    }
                    sum.total += t.total;
                    sum.rec += t.rec;
                    sum.cond += t.cond;
                    sum.w += t.w;
                    sum.emo += t.emo;
                    accumulate_grads(&mut acc, grads);
                }
                scale_grads(&mut acc, 1.0 / batch.len() as f64);
                adam.update(&mut self.params, &acc)?;
            }
            let n = corpus.len() as f64;
            let log = EpochLog {
                epoch,
                terms: LossTerms {
                    total: sum.total / n,
                    rec: sum.rec / n,
                    cond: sum.cond / n,
                    w: sum.w / n,
                    emo: sum.emo / n,
                },
            };
            on_epoch(self, &log)?;
            logs.push(log);
        }
        if self.config.unimodal {
            self.fit_anchors(corpus)?;
        }
        Ok(logs)
    }
}

pub(crate) fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Diverged {
            epoch,
            detail: format!("non-finite value in {op}"),
        },
        Error::Domain { op, detail } => Error::Diverged {
            epoch,
            detail: format!("{op}: {detail}"),
        },
        other => other,
    }
}

/// `α a + (1-α) b`, exactly `a` at `α = 1` and exactly `b` at `α = 0`.
fn blend(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    if alpha == 1.0 {
        return a.to_vec();
    }
    if alpha == 0.0 {
        return b.to_vec();
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
        .collect()
}

fn gaussian_point(mean: &[f64], var: &[f64], noise: &[f64]) -> Vec<f64> {
    mean.iter()
        .zip(var)
        .zip(noise)
        .map(|((m, v), n)| m + v.sqrt() * n)
        .collect()
}
