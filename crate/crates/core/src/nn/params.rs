use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::BnStat;
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// How a parameter is (re)initialized by [`xavier_init`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Const(f64),
    /// LSTM gate bias laid out `[i, f, g, o]`; the forget block starts at 1.
    LstmBias { hidden: usize },
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub init: Init,
    /// Buffers (batch-norm running statistics, fixed prior variances) are
    /// stored and checkpointed but never touched by the optimizer.
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Named parameters in registration order, each with a gradient buffer.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
    pub rng_seed: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            entries: IndexMap::new(),
            rng_seed,
        }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::InvalidInput(format!("parameter `{name}` registered twice")));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidInput(format!("parameter `{name}` has a zero dimension")));
        }
        let n = shape.iter().product();
        let mut p = Param {
            shape: shape.to_vec(),
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
            init,
            trainable,
        };
        fill_deterministic(&mut p);
        self.entries.insert(name.to_string(), p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&[T]> {
        self.get(name)
            .map(|p| p.value.as_slice())
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Fold training-mode batch statistics into `<name>.running_mean` /
    /// `<name>.running_var`: `running = momentum·running + (1−momentum)·batch`.
    pub fn apply_bn_stats(&mut self, stats: &[BnStat<T>], momentum: f64) {
        let keep = T::from_f64_lossy(momentum);
        let take = T::one() - keep;
        for s in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                if let Some(p) = self.entries.get_mut(&format!("{}.{suffix}", s.name)) {
                    for (r, &b) in p.value.iter_mut().zip(batch) {
                        *r = keep * *r + take * b;
                    }
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    let conv = |xs: &[T]| xs.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect();
                    (
                        k.clone(),
                        Param {
                            shape: p.shape.clone(),
                            value: conv(&p.value),
                            grad: conv(&p.grad),
                            init: p.init,
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
            rng_seed: self.rng_seed,
        }
    }
}

fn fill_deterministic<T: Scalar>(p: &mut Param<T>) {
    match p.init {
        Init::Zeros | Init::Xavier { .. } => p.value.iter_mut().for_each(|v| *v = T::zero()),
        Init::Const(c) => p.value.iter_mut().for_each(|v| *v = T::from_f64_lossy(c)),
        Init::LstmBias { hidden } => {
            for (i, v) in p.value.iter_mut().enumerate() {
                *v = if (hidden..2 * hidden).contains(&i) { T::one() } else { T::zero() };
            }
        }
    }
}

/// Initialize every parameter from its [`Init`] rule. Xavier draws come from
/// one ChaCha stream seeded by `store.rng_seed`, consumed in registration
/// order, so equal seeds give bit-identical stores.
pub fn xavier_init<T: Scalar>(store: &mut ParamStore<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(store.rng_seed);
    for p in store.entries.values_mut() {
        match p.init {
            Init::Xavier { fan_in, fan_out } => {
                let bound = xavier_bound(fan_in, fan_out);
                for v in p.value.iter_mut() {
                    *v = T::from_f64_lossy(rng.random_range(-bound..=bound));
                }
            }
            _ => fill_deterministic(p),
        }
        p.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fc_store(seed: u64) -> ParamStore<f32> {
        let mut s = ParamStore::new(seed);
        s.register("fc.w", &[4, 4], Init::Xavier { fan_in: 4, fan_out: 4 }, true)
            .unwrap();
        s.register("fc.b", &[4], Init::Zeros, true).unwrap();
        xavier_init(&mut s);
        s
    }

    #[test]
    fn xavier_bound_fc_4x4() {
        let bound = xavier_bound(4, 4);
        assert!((bound - 0.75f64.sqrt()).abs() < 1e-12);
        assert!((bound - 0.8660).abs() < 1e-4);
        let s = fc_store(3);
        let w = s.value("fc.w").unwrap();
        assert!(w.iter().all(|&v| (v as f64).abs() <= bound + 1e-7));
        assert!(w.iter().any(|&v| v != 0.0));
        assert!(s.value("fc.b").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn xavier_is_deterministic_per_seed() {
        let a = fc_store(11);
        let b = fc_store(11);
        let c = fc_store(12);
        assert_eq!(a.value("fc.w").unwrap(), b.value("fc.w").unwrap());
        assert_ne!(a.value("fc.w").unwrap(), c.value("fc.w").unwrap());
    }

    #[test]
    fn lstm_bias_sets_forget_block() {
        let mut s = ParamStore::<f64>::new(0);
        s.register("b", &[8], Init::LstmBias { hidden: 2 }, true).unwrap();
        assert_eq!(s.value("b").unwrap(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut s = ParamStore::<f64>::new(0);
        s.register("x", &[1], Init::Zeros, true).unwrap();
        assert!(s.register("x", &[1], Init::Zeros, true).is_err());
    }
}
