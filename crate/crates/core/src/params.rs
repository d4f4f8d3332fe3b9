//! Named parameter store shared by every trainable module.
//!
//! Parameters live outside any tape. A forward pass copies them onto a
//! fresh [`Tape`] as leaves via [`ParamStore::enter`]; after backward the
//! leaf gradients are pulled back out with [`Tape::grad`] and reduced into
//! `Param::grad` by the training loop.

use crate::tensor::{Tape, TensorId};
use crate::Result;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    Const(f64),
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let value = match init {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Const(c) => vec![c; n],
        };
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.into(), shape, value, grad: vec![0.0; n] });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Copy every parameter onto the tape as a gradient-tracking leaf.
    pub fn enter(&self, tape: &mut Tape) -> Result<EnteredParams> {
        let mut ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            ids.push(tape.leaf(p.value.clone(), p.shape.clone())?);
        }
        Ok(EnteredParams { ids })
    }

    /// Per-parameter gradients from a tape after backward, in store order.
    /// Parameters untouched by the loss yield zero vectors.
    pub fn grads_from_tape(&self, tape: &Tape, entered: &EnteredParams) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .zip(&entered.ids)
            .map(|(p, &tid)| match tape.grad(tid) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.numel()],
            })
            .collect()
    }

    /// Add `scale * grads` into the stored gradient accumulators.
    pub fn accumulate_grads(&mut self, grads: &[Vec<f64>], scale: f64) {
        debug_assert_eq!(grads.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(grads) {
            for (dst, src) in p.grad.iter_mut().zip(g) {
                *dst += scale * src;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }
}

/// Tape-side handles for every parameter, in store order.
#[derive(Debug)]
pub struct EnteredParams {
    ids: Vec<TensorId>,
}

impl EnteredParams {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn register_enter_and_extract_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.register("w", vec![2, 2], Init::Normal(0.02), &mut rng);
        let b = store.register("b", vec![2], Init::Const(0.0), &mut rng);
        assert_eq!(store.get(b).value, vec![0.0, 0.0]);
        assert_eq!(store.numel(), 6);
        assert_eq!(store.find("w"), Some(w));
        assert_eq!(store.find("nope"), None);

        let mut tape = Tape::new();
        let entered = store.enter(&mut tape).unwrap();
        let s = tape.sum(entered.id(w));
        tape.backward(s).unwrap();
        let grads = store.grads_from_tape(&tape, &entered);
        assert_eq!(grads[0], vec![1.0; 4]);
        assert_eq!(grads[1], vec![0.0; 2]); // untouched by the loss

        store.accumulate_grads(&grads, 0.5);
        assert_eq!(store.get(w).grad, vec![0.5; 4]);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
        store.zero_grads();
        assert_eq!(store.grad_norm(), 0.0);
    }

    #[test]
    fn deterministic_init_given_seed() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut store = ParamStore::new();
            store.register("w", vec![8], Init::Normal(0.02), &mut rng);
            store.get(ParamId(0)).value.clone()
        };
        assert_eq!(build(), build());
    }
}
