//! Normalizing-flow motion generator.
//!
//! A motion VAE whose latent prior is a standard normal pushed through a stack
//! of affine coupling steps. Each coupling step reads one half of the latent
//! with a small Transformer (every scalar is a token) and emits a bounded
//! log-scale and a shift for the other half; a feature-order reversal follows
//! every step so both halves get transformed.

use rand::seq::SliceRandom;

use crate::config::KeyValues;
use crate::distributions::{ad, DiagGaussian};
use crate::error::{shape_err, Error, Result};
use crate::gmeg::{stack_from_kv, stack_to_kv};
use crate::nn::{positional_encoding, DecoderStack, EncoderStack, Linear, Mask, StackConfig};
use crate::params::{accumulate_grads, scale_grads, Adam, Graph, ParamId, ParamStore};
use crate::synthdata::{Corpus, CorpusKind, MOTION_DIM};
use crate::tensor::{Tensor, Var};
use crate::train::{epoch_rng, TrainConfig};
use crate::util::{normal_vec, seeded};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One affine coupling step: `z1' = z1 ⊙ exp(s(z2)) + t(z2)`, `z2' = z2`,
/// with `s = 2 tanh(raw)`.
#[derive(Clone, Debug)]
pub struct CouplingStep {
    pub embed: Linear,
    pub net: EncoderStack,
    pub head: Linear,
    dim: usize,
}

impl CouplingStep {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        net: StackConfig,
        rng: &mut R,
    ) -> Result<Self> {
        check_even(dim)?;
        if !net.model_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(
                "coupling model_dim must be even".into(),
            ));
        }
        Ok(Self {
            embed: Linear::new(store, &format!("{name}.embed"), 1, net.model_dim, rng)?,
            net: EncoderStack::new(store, name, net, rng)?,
            head: Linear::new(store, &format!("{name}.head"), net.model_dim, 2, rng)?,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Log-scale and shift for the transformed half, from the conditioning half.
    fn scale_shift(&self, g: &mut Graph, z2: Var) -> Result<(Var, Var)> {
        let h = self.dim / 2;
        let tokens = g.tape.reshape(z2, &[h, 1])?;
        let x = self.embed.forward(g, tokens)?;
        let pe = g.constant(positional_encoding(h, self.net.config.model_dim)?)?;
        let x = g.tape.add(x, pe)?;
        let x = self.net.encode(g, x, Mask::None)?;
        let out = self.head.forward(g, x)?;
        let raw = g.tape.slice_cols(out, 0, 1)?;
        let raw = g.tape.reshape(raw, &[h])?;
        let s = g.tape.tanh(raw)?;
        let s = g.tape.scale(s, 2.0)?;
        let t = g.tape.slice_cols(out, 1, 1)?;
        let t = g.tape.reshape(t, &[h])?;
        Ok((s, t))
    }

    fn check(&self, g: &Graph, z: Var) -> Result<()> {
        let sh = g.value(z).shape();
        if sh != [self.dim] {
            return shape_err("coupling", format!("expected [{}], got {sh:?}", self.dim));
        }
        Ok(())
    }

    /// `(z', log_det)` on the tape.
    pub fn forward_var(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        self.check(g, z)?;
        let h = self.dim / 2;
        let z1 = g.tape.slice_cols(z, 0, h)?;
        let z2 = g.tape.slice_cols(z, h, h)?;
        let (s, t) = self.scale_shift(g, z2)?;
        let es = g.tape.exp(s)?;
        let y1 = g.tape.mul(z1, es)?;
        let y1 = g.tape.add(y1, t)?;
        let out = g.tape.concat_cols(&[y1, z2])?;
        let ld = g.tape.sum(s)?;
        Ok((out, ld))
    }

    /// `(z, log_det of the inverse)` on the tape.
    pub fn inverse_var(&self, g: &mut Graph, y: Var) -> Result<(Var, Var)> {
        self.check(g, y)?;
        let h = self.dim / 2;
        let y1 = g.tape.slice_cols(y, 0, h)?;
        let y2 = g.tape.slice_cols(y, h, h)?;
        let (s, t) = self.scale_shift(g, y2)?;
        let ns = g.tape.neg(s)?;
        let ens = g.tape.exp(ns)?;
        let d = g.tape.sub(y1, t)?;
        let z1 = g.tape.mul(d, ens)?;
        let out = g.tape.concat_cols(&[z1, y2])?;
        let ld = g.tape.sum(ns)?;
        Ok((out, ld))
    }

    pub fn forward(&self, params: &ParamStore, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_even(z.len())?;
        run_pair(params, z, |g, v| self.forward_var(g, v))
    }

    pub fn inverse(&self, params: &ParamStore, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_even(y.len())?;
        run_pair(params, y, |g, v| self.inverse_var(g, v))
    }
}

fn check_even(d: usize) -> Result<()> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "coupling needs an even, positive dim, got {d}"
        )));
    }
    Ok(())
}

fn run_pair<F>(params: &ParamStore, z: &[f64], f: F) -> Result<(Vec<f64>, f64)>
where
    F: FnOnce(&mut Graph, Var) -> Result<(Var, Var)>,
{
    let mut g = Graph::inference(params);
    let v = g.constant(Tensor::vector(z.to_vec()))?;
    let (out, ld) = f(&mut g, v)?;
    Ok((g.value(out).data().to_vec(), g.tape.scalar(ld)?))
}

/// Coupling steps, each followed by a reversal of feature order.
#[derive(Clone, Debug)]
pub struct FlowStack {
    pub steps: Vec<CouplingStep>,
    dim: usize,
}

impl FlowStack {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        n_steps: usize,
        net: StackConfig,
        rng: &mut R,
    ) -> Result<Self> {
        check_even(dim)?;
        if n_steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "flow needs at least 2 steps, got {n_steps}"
            )));
        }
        let steps = (0..n_steps)
            .map(|i| CouplingStep::new(store, &format!("{name}.step{i}"), dim, net, rng))
            .collect::<Result<_>>()?;
        Ok(Self { steps, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Base sample to prior sample, with the summed log-determinant.
    pub fn forward_var(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        let mut x = z;
        let mut total = g.constant(Tensor::scalar(0.0))?;
        for step in &self.steps {
            let (y, ld) = step.forward_var(g, x)?;
            x = g.tape.reverse_cols(y)?;
            total = g.tape.add(total, ld)?;
        }
        Ok((x, total))
    }

    pub fn inverse_var(&self, g: &mut Graph, y: Var) -> Result<(Var, Var)> {
        let mut x = y;
        let mut total = g.constant(Tensor::scalar(0.0))?;
        for step in self.steps.iter().rev() {
            let r = g.tape.reverse_cols(x)?;
            let (z, ld) = step.inverse_var(g, r)?;
            x = z;
            total = g.tape.add(total, ld)?;
        }
        Ok((x, total))
    }

    /// `log N(F⁻¹(y); 0, I) + log|det ∂F⁻¹/∂y|`.
    pub fn log_prob_var(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let (z, ld) = self.inverse_var(g, y)?;
        let base = std_normal_log_pdf_var(g, z)?;
        g.tape.add(base, ld)
    }

    pub fn forward(&self, params: &ParamStore, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_even(z.len())?;
        run_pair(params, z, |g, v| self.forward_var(g, v))
    }

    pub fn inverse(&self, params: &ParamStore, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_even(y.len())?;
        run_pair(params, y, |g, v| self.inverse_var(g, v))
    }

    pub fn log_prob(&self, params: &ParamStore, y: &[f64]) -> Result<f64> {
        check_even(y.len())?;
        let mut g = Graph::inference(params);
        let v = g.constant(Tensor::vector(y.to_vec()))?;
        let lp = self.log_prob_var(&mut g, v)?;
        g.tape.scalar(lp)
    }
}

fn std_normal_log_pdf_var(g: &mut Graph, z: Var) -> Result<Var> {
    let d = g.value(z).numel() as f64;
    let sq = g.tape.square(z)?;
    let s = g.tape.sum(sq)?;
    let s = g.tape.scale(s, -0.5)?;
    g.tape.add_scalar(s, -0.5 * d * LN_2PI)
}

pub fn std_normal_log_pdf(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v + LN_2PI).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NfmgConfig {
    pub audio_dim: usize,
    pub n_speakers: usize,
    /// Even.
    pub latent_dim: usize,
    pub encoder: StackConfig,
    pub coupling: StackConfig,
    pub decoder: StackConfig,
    pub n_flow_steps: usize,
    pub lambda_kl: f64,
    pub lambda_vel: f64,
    /// `false` replaces the flow prior by a plain standard normal.
    pub flow_prior: bool,
}

impl NfmgConfig {
    pub fn new(audio_dim: usize, n_speakers: usize) -> Self {
        Self {
            audio_dim,
            n_speakers,
            latent_dim: 8,
            encoder: StackConfig::default(),
            coupling: StackConfig {
                n_layers: 1,
                model_dim: 16,
                n_heads: 2,
                ff_dim: 32,
            },
            decoder: StackConfig::default(),
            n_flow_steps: 4,
            lambda_kl: 1.0,
            lambda_vel: 0.1,
            flow_prior: true,
        }
    }

    pub fn for_corpus(c: &Corpus) -> Self {
        Self::new(c.audio_dim, c.n_speakers().max(1))
    }

    pub fn validate(&self) -> Result<()> {
        check_even(self.latent_dim)?;
        if self.audio_dim == 0 || self.n_speakers == 0 {
            return Err(Error::InvalidArgument(
                "NFMG dimensions must be positive".into(),
            ));
        }
        for s in [&self.encoder, &self.coupling, &self.decoder] {
            s.validate()?;
            if s.model_dim % 2 != 0 {
                return Err(Error::InvalidArgument("model_dim must be even".into()));
            }
        }
        if self.flow_prior && self.n_flow_steps < 2 {
            return Err(Error::InvalidArgument("flow needs at least 2 steps".into()));
        }
        for (n, v) in [
            ("lambda_kl", self.lambda_kl),
            ("lambda_vel", self.lambda_vel),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{n} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("audio_dim", self.audio_dim);
        kv.set("n_speakers", self.n_speakers);
        kv.set("latent_dim", self.latent_dim);
        stack_to_kv(&mut kv, "enc", &self.encoder);
        stack_to_kv(&mut kv, "cpl", &self.coupling);
        stack_to_kv(&mut kv, "dec", &self.decoder);
        kv.set("flow_steps", self.n_flow_steps);
        kv.set("lambda_kl", self.lambda_kl);
        kv.set("lambda_vel", self.lambda_vel);
        kv.set("flow_prior", self.flow_prior);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let c = Self {
            audio_dim: kv.require("audio_dim")?,
            n_speakers: kv.require("n_speakers")?,
            latent_dim: kv.require("latent_dim")?,
            encoder: stack_from_kv(kv, "enc")?,
            coupling: stack_from_kv(kv, "cpl")?,
            decoder: stack_from_kv(kv, "dec")?,
            n_flow_steps: kv.require("flow_steps")?,
            lambda_kl: kv.require("lambda_kl")?,
            lambda_vel: kv.require("lambda_vel")?,
            flow_prior: kv.require("flow_prior")?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NfmgTerms {
    pub total: f64,
    pub rec: f64,
    pub kl: f64,
    pub vel: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NfmgEpochLog {
    pub epoch: usize,
    pub terms: NfmgTerms,
}

pub const LOG_HEADER: &str = "epoch,total,rec,kl,vel";

impl NfmgEpochLog {
    pub fn csv_row(&self) -> String {
        let t = &self.terms;
        format!(
            "{},{:e},{:e},{:e},{:e}",
            self.epoch, t.total, t.rec, t.kl, t.vel
        )
    }
}

struct LossVars {
    total: Var,
    rec: Var,
    kl: Var,
    vel: Var,
}

#[derive(Clone, Debug)]
pub struct NfmgModel {
    config: NfmgConfig,
    params: ParamStore,
    enc_motion: Linear,
    enc_audio: Linear,
    encoder: EncoderStack,
    posterior: Linear,
    flow: Option<FlowStack>,
    dec_prev: Linear,
    dec_z: Linear,
    dec_audio: Linear,
    decoder: DecoderStack,
    dec_out: Linear,
    speakers: ParamId,
}

impl NfmgModel {
    pub fn new(config: NfmgConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let r = &mut rng;
        let mut p = ParamStore::new();
        let c = &config;
        let (de, dd, l) = (c.encoder.model_dim, c.decoder.model_dim, c.latent_dim);
        let enc_motion = Linear::new(&mut p, "nfmg.enc.in_motion", MOTION_DIM, de, r)?;
        let enc_audio = Linear::new(&mut p, "nfmg.enc.in_audio", c.audio_dim, de, r)?;
        let encoder = EncoderStack::new(&mut p, "nfmg.enc", c.encoder, r)?;
        let posterior = Linear::new(&mut p, "nfmg.enc.posterior", de, 2 * l, r)?;
        let flow = if c.flow_prior {
            Some(FlowStack::new(
                &mut p,
                "nfmg.flow",
                l,
                c.n_flow_steps,
                c.coupling,
                r,
            )?)
        } else {
            None
        };
        let dec_prev = Linear::new(&mut p, "nfmg.dec.in_prev", MOTION_DIM, dd, r)?;
        let dec_z = Linear::new(&mut p, "nfmg.dec.in_z", l, dd, r)?;
        let dec_audio = Linear::new(&mut p, "nfmg.dec.in_audio", c.audio_dim, dd, r)?;
        let decoder = DecoderStack::new(&mut p, "nfmg.dec", c.decoder, r)?;
        let dec_out = Linear::new(&mut p, "nfmg.dec.out", dd, MOTION_DIM, r)?;
        let speakers = p.add_uniform("nfmg.speakers", &[c.n_speakers, MOTION_DIM], 0.1, r)?;
        Ok(Self {
            config,
            params: p,
            enc_motion,
            enc_audio,
            encoder,
            posterior,
            flow,
            dec_prev,
            dec_z,
            dec_audio,
            decoder,
            dec_out,
            speakers,
        })
    }

    pub fn from_parts(config: NfmgConfig, params: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.load_from(params)?;
        Ok(m)
    }

    pub fn config(&self) -> &NfmgConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn flow(&self) -> Option<&FlowStack> {
        self.flow.as_ref()
    }

    fn check_audio(&self, audio: &Tensor) -> Result<()> {
        if audio.rank() != 2 || audio.cols() != self.config.audio_dim || audio.rows() == 0 {
            return shape_err(
                "nfmg",
                format!(
                    "audio must be [T>=1, {}], got {:?}",
                    self.config.audio_dim,
                    audio.shape()
                ),
            );
        }
        Ok(())
    }

    fn check_pair(&self, rho: &Tensor, audio: &Tensor) -> Result<()> {
        self.check_audio(audio)?;
        if rho.rank() != 2 || rho.cols() != MOTION_DIM || rho.rows() != audio.rows() {
            return shape_err(
                "nfmg",
                format!(
                    "motion {:?} does not pair with audio {:?}",
                    rho.shape(),
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

    fn check_noise(&self, noise: &[f64]) -> Result<()> {
        if noise.len() != self.config.latent_dim {
            return shape_err(
                "nfmg",
                format!(
                    "noise has {} entries, expected {}",
                    noise.len(),
                    self.config.latent_dim
                ),
            );
        }
        Ok(())
    }

    /// Posterior mean and log-variance, each `[latent_dim]`.
    fn encode_vars(&self, g: &mut Graph, rho: &Tensor, audio: &Tensor) -> Result<(Var, Var)> {
        self.check_pair(rho, audio)?;
        let m = g.constant(rho.clone())?;
        let a = g.constant(audio.clone())?;
        let pm = self.enc_motion.forward(g, m)?;
        let pa = self.enc_audio.forward(g, a)?;
        let x = g.tape.add(pm, pa)?;
        let pe = g.constant(positional_encoding(
            rho.rows(),
            self.config.encoder.model_dim,
        )?)?;
        let x = g.tape.add(x, pe)?;
        let h = self.encoder.encode(g, x, Mask::None)?;
        let pooled = g.tape.mean_rows(h)?;
        let out = self.posterior.forward(g, pooled)?;
        let l = self.config.latent_dim;
        Ok((g.tape.slice_cols(out, 0, l)?, g.tape.slice_cols(out, l, l)?))
    }

    fn prior_log_prob_var(&self, g: &mut Graph, z: Var) -> Result<Var> {
        match &self.flow {
            Some(f) => f.log_prob_var(g, z),
            None => std_normal_log_pdf_var(g, z),
        }
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

    fn teacher_forced_vars(
        &self,
        g: &mut Graph,
        z: Var,
        rho: &Tensor,
        audio: &Tensor,
        speaker: usize,
        keep: Option<&[bool]>,
    ) -> Result<Var> {
        let start = self.speaker_row(g, speaker)?;
        let t = rho.rows();
        let prefix = if t > 1 {
            let mut prev = Tensor::matrix(
                t - 1,
                MOTION_DIM,
                rho.data()[..(t - 1) * MOTION_DIM].to_vec(),
            )?;
            if let Some(keep) = keep {
                for (i, row) in prev.data_mut().chunks_mut(MOTION_DIM).enumerate() {
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

    fn frame_diff(g: &mut Graph, x: Var) -> Result<Var> {
        let t = g.value(x).rows();
        let a = g.tape.slice_rows(x, 1, t - 1)?;
        let b = g.tape.slice_rows(x, 0, t - 1)?;
        g.tape.sub(a, b)
    }

    #[allow(clippy::too_many_arguments)]
    fn loss_vars(
        &self,
        g: &mut Graph,
        rho: &Tensor,
        audio: &Tensor,
        speaker: usize,
        noise: &[f64],
        keep: Option<&[bool]>,
        kl_ramp: f64,
    ) -> Result<LossVars> {
        self.check_noise(noise)?;
        self.check_speaker(speaker)?;
        let (mu, lv) = self.encode_vars(g, rho, audio)?;
        let n = g.constant(Tensor::vector(noise.to_vec()))?;
        let z = ad::reparam(&mut g.tape, mu, lv, n)?;
        let recon = self.teacher_forced_vars(g, z, rho, audio, speaker, keep)?;
        let target = g.constant(rho.clone())?;
        let diff = g.tape.sub(target, recon)?;
        let rec = g.tape.norm(diff)?;

        let log_q = ad::gaussian_log_pdf(&mut g.tape, mu, lv, z)?;
        let log_p = self.prior_log_prob_var(g, z)?;
        let kl = g.tape.sub(log_q, log_p)?;

        let vel = if rho.rows() > 1 {
            let dt = Self::frame_diff(g, target)?;
            let dr = Self::frame_diff(g, recon)?;
            let dd = g.tape.sub(dt, dr)?;
            g.tape.norm(dd)?
        } else {
            g.constant(Tensor::scalar(0.0))?
        };

        let kl_w = g.tape.scale(kl, kl_ramp * self.config.lambda_kl)?;
        let vel_w = g.tape.scale(vel, self.config.lambda_vel)?;
        let total = g.tape.add(rec, kl_w)?;
        let total = g.tape.add(total, vel_w)?;
        Ok(LossVars {
            total,
            rec,
            kl,
            vel,
        })
    }

    fn terms(g: &Graph, v: &LossVars) -> Result<NfmgTerms> {
        let s = |x: Var| g.tape.scalar(x);
        Ok(NfmgTerms {
            total: s(v.total)?,
            rec: s(v.rec)?,
            kl: s(v.kl)?,
            vel: s(v.vel)?,
        })
    }

    pub fn encode(&self, rho: &Tensor, audio: &Tensor) -> Result<DiagGaussian> {
        let mut g = Graph::inference(&self.params);
        let (m, lv) = self.encode_vars(&mut g, rho, audio)?;
        DiagGaussian::new(g.value(m).data().to_vec(), g.value(lv).data().to_vec())
    }

    pub fn loss(
        &self,
        rho: &Tensor,
        audio: &Tensor,
        speaker: usize,
        noise: &[f64],
    ) -> Result<NfmgTerms> {
        let mut g = Graph::inference(&self.params);
        let v = self.loss_vars(&mut g, rho, audio, speaker, noise, None, 1.0)?;
        Self::terms(&g, &v)
    }

    /// Loss and gradients for one sequence. `kl_ramp` scales the KL weight
    /// (1 outside warm-up); `total` includes that scaling.
    pub fn loss_and_grads(
        &self,
        rho: &Tensor,
        audio: &Tensor,
        speaker: usize,
        noise: &[f64],
        keep: Option<&[bool]>,
        kl_ramp: f64,
    ) -> Result<(NfmgTerms, Vec<Tensor>)> {
        let mut g = Graph::new(&self.params);
        let v = self.loss_vars(&mut g, rho, audio, speaker, noise, keep, kl_ramp)?;
        let terms = Self::terms(&g, &v)?;
        Ok((terms, g.backward(v.total)?))
    }

    pub fn grad_check_loss(
        &self,
        rho: &Tensor,
        audio: &Tensor,
        speaker: usize,
        noise: &[f64],
        h: f64,
        max_coords: usize,
    ) -> Result<f64> {
        crate::params::grad_check_params(
            &self.params,
            |g| {
                Ok(self
                    .loss_vars(g, rho, audio, speaker, noise, None, 1.0)?
                    .total)
            },
            h,
            max_coords,
        )
    }

    /// Log density of `z` under the model's prior (flow or standard normal).
    pub fn prior_log_prob(&self, z: &[f64]) -> Result<f64> {
        self.check_noise(z)?;
        match &self.flow {
            Some(f) => f.log_prob(&self.params, z),
            None => Ok(std_normal_log_pdf(z)),
        }
    }

    /// Prior sample for base noise `noise`.
    pub fn prior_sample(&self, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_noise(noise)?;
        match &self.flow {
            Some(f) => Ok(f.forward(&self.params, noise)?.0),
            None => Ok(noise.to_vec()),
        }
    }

    /// Free-running rollout from latent `z`.
    pub fn decode(&self, z: &[f64], audio: &Tensor, speaker: usize) -> Result<Tensor> {
        self.check_noise(z)?;
        self.check_audio(audio)?;
        self.check_speaker(speaker)?;
        let t = audio.rows();
        let mut out: Vec<f64> = Vec::with_capacity(t * MOTION_DIM);
        for step in 0..t {
            let mut g = Graph::inference(&self.params);
            let start = self.speaker_row(&mut g, speaker)?;
            let prefix = if step == 0 {
                start
            } else {
                let prev = g.constant(Tensor::matrix(step, MOTION_DIM, out.clone())?)?;
                g.tape.concat_rows(&[start, prev])?
            };
            let memory = self.memory(&mut g, audio)?;
            let zv = g.constant(Tensor::vector(z.to_vec()))?;
            let y = self.decode_vars(&mut g, zv, prefix, memory)?;
            out.extend_from_slice(g.value(y).row(step));
        }
        Tensor::matrix(t, MOTION_DIM, out)
    }

    /// Map base noise through the prior and decode over `audio`.
    pub fn sample_motion(&self, audio: &Tensor, speaker: usize, noise: &[f64]) -> Result<Tensor> {
        let z = self.prior_sample(noise)?;
        self.decode(&z, audio, speaker)
    }

    pub fn teacher_forced(
        &self,
        z: &[f64],
        rho: &Tensor,
        audio: &Tensor,
        speaker: usize,
    ) -> Result<Tensor> {
        self.check_noise(z)?;
        self.check_pair(rho, audio)?;
        let mut g = Graph::inference(&self.params);
        let zv = g.constant(Tensor::vector(z.to_vec()))?;
        let y = self.teacher_forced_vars(&mut g, zv, rho, audio, speaker, None)?;
        Ok(g.value(y).clone())
    }

    /// Mean squared error of teacher-forced reconstructions at the posterior mean.
    pub fn reconstruction_mse(&self, corpus: &Corpus) -> Result<f64> {
        let mut se = 0.0;
        let mut n = 0usize;
        for r in &corpus.records {
            let post = self.encode(&r.coefs, &r.audio)?;
            let y = self.teacher_forced(&post.mean, &r.coefs, &r.audio, r.speaker)?;
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

    /// Mean log density of encoded held-out latents under the model prior and
    /// under `N(0, I)`. Each sequence contributes `draws` reparameterized
    /// posterior samples, so the comparison sees the latents the decoder was
    /// trained on rather than only the posterior means.
    pub fn latent_log_likelihood(
        &self,
        corpus: &Corpus,
        draws: usize,
        seed: u64,
    ) -> Result<(f64, f64)> {
        if corpus.is_empty() || draws == 0 {
            return Err(Error::InvalidArgument("empty corpus or zero draws".into()));
        }
        let mut rng = seeded(seed);
        let (mut prior, mut normal) = (0.0, 0.0);
        for r in &corpus.records {
            let post = self.encode(&r.coefs, &r.audio)?;
            for _ in 0..draws {
                let z = post.reparam_sample(&normal_vec(&mut rng, self.config.latent_dim))?;
                prior += self.prior_log_prob(&z)?;
                normal += std_normal_log_pdf(&z);
            }
        }
        let n = (corpus.len() * draws) as f64;
        Ok((prior / n, normal / n))
    }

    fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("training corpus is empty".into()));
        }
        if corpus.kind != CorpusKind::Motion {
            return Err(Error::InvalidArgument(
                "NFMG trains on motion corpora".into(),
            ));
        }
        for r in &corpus.records {
            self.check_speaker(r.speaker)?;
            self.check_pair(&r.coefs, &r.audio)?;
        }
        Ok(())
    }

    /// Same schedule as GMEG training: shuffled mini-batches, fresh noise per
    /// sequence, one Adam step per batch.
    pub fn train<F>(
        &mut self,
        corpus: &Corpus,
        cfg: &TrainConfig,
        adam: &mut Adam,
        start_epoch: usize,
        mut on_epoch: F,
    ) -> Result<Vec<NfmgEpochLog>>
    where
        F: FnMut(&NfmgModel, &NfmgEpochLog) -> Result<()>,
    {
        self.check_corpus(corpus)?;
        cfg.validate()?;
        let l = self.config.latent_dim;
        let mut logs = Vec::with_capacity(cfg.epochs);
        for epoch in start_epoch..start_epoch + cfg.epochs {
            let mut rng = epoch_rng(cfg.seed, epoch);
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            order.shuffle(&mut rng);
            let ramp = cfg.kl_ramp(epoch);
            let mut sum = NfmgTerms {
                total: 0.0,
                rec: 0.0,
                kl: 0.0,
                vel: 0.0,
            };
            for batch in order.chunks(cfg.batch_size) {
                let mut acc = Vec::new();
                for &i in batch {
                    let r = &corpus.records[i];
                    let noise = normal_vec(&mut rng, l);
                    let keep = cfg.draw_keep(&mut rng, r.len());
                    let (t, grads) = self
                        .loss_and_grads(
                            &r.coefs,
                            &r.audio,
                            r.speaker,
                            &noise,
                            keep.as_deref(),
                            ramp,
                        )
                        .map_err(|e| crate::gmeg::diverged(epoch, e))?;
                    if !t.total.is_finite() {
                        return Err(Error::Diverged {
                            epoch,
                            detail: "non-finite loss".into(),
                        });
                    }
                    sum.total += t.total;
                    sum.rec += t.rec;
                    sum.kl += t.kl;
                    sum.vel += t.vel;
                    accumulate_grads(&mut acc, grads);
                }
                scale_grads(&mut acc, 1.0 / batch.len() as f64);
                adam.update(&mut self.params, &acc)?;
            }
            let n = corpus.len() as f64;
            let log = NfmgEpochLog {
                epoch,
                terms: NfmgTerms {
                    total: sum.total / n,
                    rec: sum.rec / n,
                    kl: sum.kl / n,
                    vel: sum.vel / n,
                },
            };
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    /// Train from scratch on a (multi-speaker) corpus.
    pub fn pretrain(&mut self, corpus: &Corpus, cfg: &TrainConfig) -> Result<Vec<NfmgEpochLog>> {
        let mut adam = Adam::new(&self.params, cfg.adam);
        self.train(corpus, cfg, &mut adam, 0, |_, _| Ok(()))
    }

    /// A copy of `self` further trained on `target` with a fresh optimizer.
    pub fn finetune(
        &self,
        target: &Corpus,
        cfg: &TrainConfig,
    ) -> Result<(NfmgModel, Vec<NfmgEpochLog>)> {
        let mut m = self.clone();
        let logs = m.pretrain(target, cfg)?;
        Ok((m, logs))
    }
}
