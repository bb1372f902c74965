//! Named parameter storage, tape binding, and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named weight tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter {name}"
            )));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replace every tensor from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "parameter count {} does not match model ({})",
                other.len(),
                self.len()
            )));
        }
        for (name, t) in other.iter() {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter {name}")))?;
            if self.get(id).shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    t.shape(),
                    self.get(id).shape()
                )));
            }
            *self.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

/// A tape plus lazily bound parameters for one forward pass.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'a> Graph<'a> {
    /// Parameters are tracked; call [`Graph::backward`] for gradients.
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            track: true,
        }
    }

    /// Parameters enter as constants.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let t = self.store.get(id).clone();
        let v = if self.track {
            self.tape.param(t)?
        } else {
            self.tape.constant(t)?
        };
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Backward from `loss`, returning one gradient per stored parameter
    /// (zeros for parameters the loss never touched).
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Tensor>> {
        self.tape.backward(loss)?;
        Ok(self
            .store
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| self.tape.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()))
            })
            .collect())
    }
}

/// Central-difference check of `loss` with respect to stored parameters.
///
/// At most `max_coords` coordinates are probed, spread evenly over the flattened
/// parameter vector. Returns the max relative error as in [`crate::tensor::grad_check`].
pub fn grad_check_params<F>(store: &ParamStore, loss: F, h: f64, max_coords: usize) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    crate::tensor::check_step(h)?;
    let mut g = Graph::new(store);
    let l = loss(&mut g)?;
    let analytic = g.backward(l)?;

    let total = store.num_scalars();
    let stride = total.div_ceil(max_coords.max(1)).max(1);
    let mut probe = store.clone();
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(p);
        let l = loss(&mut g)?;
        g.tape.scalar(l)
    };
    let mut worst: f64 = 0.0;
    let mut flat = 0usize;
    for id in store.ids() {
        let n = store.get(id).numel();
        for i in 0..n {
            if (flat + i).is_multiple_of(stride) {
                let orig = store.get(id).data()[i];
                probe.get_mut(id).data_mut()[i] = orig + h;
                let up = eval(&probe)?;
                probe.get_mut(id).data_mut()[i] = orig - h;
                let down = eval(&probe)?;
                probe.get_mut(id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let err = (analytic[id.0].data()[i] - numeric).abs() / numeric.abs().max(1.0);
                worst = worst.max(err);
            }
        }
        flat += n;
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers line up with the store's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Sum `src` into `acc`, elementwise per parameter.
pub fn accumulate_grads(acc: &mut Vec<Tensor>, src: Vec<Tensor>) {
    if acc.is_empty() {
        *acc = src;
        return;
    }
    for (a, s) in acc.iter_mut().zip(src) {
        a.data_mut()
            .iter_mut()
            .zip(s.data())
            .for_each(|(x, y)| *x += y);
    }
}

pub fn scale_grads(grads: &mut [Tensor], c: f64) {
    for g in grads {
        g.data_mut().iter_mut().for_each(|x| *x *= c);
    }
}
