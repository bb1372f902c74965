//! Binary checkpoint container shared by both model kinds.
//!
//! Layout (little-endian): magic `GMXCKPT\0`, u32 version, u8 kind,
//! hyperparameters as `key=value` text, u64 seed, u64 epoch counter, named
//! parameter tensors, optional extras (GMEG anchors), optional Adam state,
//! then a crc32 of everything before it. Floats are stored as raw bits, so a
//! round trip is exact.

use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::gmeg::{GmegConfig, GmegModel};
use crate::nfmg::{NfmgConfig, NfmgModel};
use crate::params::{Adam, AdamConfig, ParamStore};

const MAGIC: &[u8; 8] = b"GMXCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Gmeg,
    Nfmg,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gmeg => "gmeg",
            Self::Nfmg => "nfmg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gmeg" => Ok(Self::Gmeg),
            "nfmg" => Ok(Self::Nfmg),
            _ => Err(Error::InvalidArgument(format!(
                "unknown model kind {s:?} (gmeg|nfmg)"
            ))),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Self::Gmeg => 1,
            Self::Nfmg => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            1 => Ok(Self::Gmeg),
            2 => Ok(Self::Nfmg),
            _ => Err(Error::Format(format!("unknown model kind tag {t}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Gmeg(GmegModel),
    Nfmg(NfmgModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Gmeg(_) => ModelKind::Gmeg,
            Self::Nfmg(_) => ModelKind::Nfmg,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Self::Gmeg(m) => m.params(),
            Self::Nfmg(m) => m.params(),
        }
    }

    pub fn hyperparams(&self) -> KeyValues {
        match self {
            Self::Gmeg(m) => m.config().to_kv(),
            Self::Nfmg(m) => m.config().to_kv(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    /// Completed training epochs.
    pub epoch: u64,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u8(self.model.kind().tag());
        w.str(&self.model.hyperparams().to_text());
        w.u64(self.seed);
        w.u64(self.epoch);
        let params = self.model.params();
        w.len(params.len());
        for (name, t) in params.iter() {
            w.str(name);
            w.tensor(t);
        }
        match &self.model {
            Model::Gmeg(m) => match m.anchors() {
                Some(a) => {
                    w.u8(1);
                    w.tensor(a);
                }
                None => w.u8(0),
            },
            Model::Nfmg(_) => w.u8(0),
        }
        match &self.optimizer {
            Some(adam) => {
                w.u8(1);
                let c = adam.config;
                for v in [c.lr, c.beta1, c.beta2, c.eps] {
                    w.f64(v);
                }
                w.u64(adam.step);
                for t in adam.m.iter().chain(&adam.v) {
                    w.tensor(t);
                }
            }
            None => w.u8(0),
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::checked(bytes)?;
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let kind = ModelKind::from_tag(r.u8()?)?;
        let hyper = KeyValues::parse(&r.str()?)?;
        let seed = r.u64()?;
        let epoch = r.u64()?;
        let mut store = ParamStore::new();
        for _ in 0..r.len()? {
            let name = r.str()?;
            let t = r.tensor()?;
            store.add(name, t)?;
        }
        let extra = if r.u8()? == 1 {
            Some(r.tensor()?)
        } else {
            None
        };
        let optimizer = if r.u8()? == 1 {
            let config = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let step = r.u64()?;
            let n = store.len();
            let m = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
            let v = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
            for ((id, a), b) in store.ids().zip(&m).zip(&v) {
                if a.shape() != store.get(id).shape() || b.shape() != store.get(id).shape() {
                    return Err(Error::Format(format!(
                        "optimizer state for {} has the wrong shape",
                        store.name(id)
                    )));
                }
            }
            Some(Adam { config, step, m, v })
        } else {
            None
        };
        r.expect_end()?;
        let model = match kind {
            ModelKind::Gmeg => Model::Gmeg(GmegModel::from_parts(
                GmegConfig::from_kv(&hyper)?,
                &store,
                extra,
            )?),
            ModelKind::Nfmg => {
                if extra.is_some() {
                    return Err(Error::Format(
                        "unexpected extra tensor in NFMG checkpoint".into(),
                    ));
                }
                Model::Nfmg(NfmgModel::from_parts(NfmgConfig::from_kv(&hyper)?, &store)?)
            }
        };
        Ok(Self {
            model,
            seed,
            epoch,
            optimizer,
        })
    }

    /// Write via a temporary file and rename, so an interrupted save never
    /// clobbers an existing good checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn into_gmeg(self) -> Result<(GmegModel, u64, u64, Option<Adam>)> {
        match self.model {
            Model::Gmeg(m) => Ok((m, self.seed, self.epoch, self.optimizer)),
            Model::Nfmg(_) => Err(Error::KindMismatch {
                found: "nfmg".into(),
                expected: "gmeg".into(),
            }),
        }
    }

    pub fn into_nfmg(self) -> Result<(NfmgModel, u64, u64, Option<Adam>)> {
        match self.model {
            Model::Nfmg(m) => Ok((m, self.seed, self.epoch, self.optimizer)),
            Model::Gmeg(_) => Err(Error::KindMismatch {
                found: "gmeg".into(),
                expected: "nfmg".into(),
            }),
        }
    }
}

/// Load a GMEG checkpoint, rejecting other kinds.
pub fn load_gmeg(path: &Path) -> Result<GmegModel> {
    Ok(Checkpoint::load(path)?.into_gmeg()?.0)
}

/// Load an NFMG checkpoint, rejecting other kinds.
pub fn load_nfmg(path: &Path) -> Result<NfmgModel> {
    Ok(Checkpoint::load(path)?.into_nfmg()?.0)
}
