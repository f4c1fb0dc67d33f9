use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Partition used by two-stage training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Embeddings, sentence encoder, decoder and path encoder.
    Sentence,
    /// Hierarchical context attention and gate.
    Context,
}

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Vec<S>>,
    pub group: ParamGroup,
    pub trainable: bool,
}

/// Named, ordered parameter collection.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    by_name: BTreeMap<String, ParamId>,
}

/// Stable 64-bit FNV-1a, used to derive per-parameter init streams.
fn fnv1a(text: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for byte in text.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Registers a parameter. Panics on duplicate names, which would be a
    /// model construction bug.
    pub fn insert(&mut self, name: &str, value: Tensor<S>, group: ParamGroup) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: None,
            group,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Uniform init in `[-bound, bound]`. The random stream depends only on
    /// `(seed, name)`, so a parameter gets the same initial values whichever
    /// other parameters a model happens to allocate.
    pub fn uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        seed: u64,
        group: ParamGroup,
    ) -> ParamId {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| S::lit(rng.gen_range(-bound..=bound)))
            .collect();
        let value = Tensor::new(shape.to_vec(), data).expect("shape/product agree");
        self.insert(name, value, group)
    }

    pub fn constant(
        &mut self,
        name: &str,
        shape: &[usize],
        value: f64,
        group: ParamGroup,
    ) -> ParamId {
        self.insert(name, Tensor::full(shape, S::lit(value)), group)
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for p in &mut self.params {
            if p.group == group {
                p.trainable = trainable;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds gradients from one backward pass into the stored `grad` fields.
    pub fn accumulate(&mut self, grads: &super::Gradients<S>) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
                None => p.grad = Some(g.to_vec()),
            }
        }
    }

    /// Zeroes every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut count = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.value.data_mut().iter_mut().for_each(|v| *v = S::zero());
                count += 1;
            }
        }
        count
    }
}
