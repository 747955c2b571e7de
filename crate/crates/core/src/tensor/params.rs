use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{lit, Graph, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Entry<T> {
    tensor: Arc<Tensor<T>>,
    trainable: bool,
}

/// Named parameters with a trainable flag per entry.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet<T> {
    entries: BTreeMap<String, Entry<T>>,
}

/// Parameters bound into a graph, by name.
pub type ParamVars<N> = BTreeMap<String, N>;

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) {
        self.entries.insert(
            name.into(),
            Entry {
                tensor: Arc::new(tensor),
                trainable,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| e.tensor.as_ref())
    }

    pub fn get_arc(&self, name: &str) -> Result<&Arc<Tensor<T>>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter `{}`", name)))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, bool)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), e.tensor.as_ref(), e.trainable))
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// Replace the value of a trainable entry. Frozen entries are never updated.
    pub fn update(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{}`", name)))?;
        if !e.trainable {
            return Err(Error::Contract(format!(
                "parameter `{}` is frozen and cannot be updated",
                name
            )));
        }
        if e.tensor.shape() != tensor.shape() {
            return Err(Error::Contract(format!(
                "update of `{}` changes shape {:?} -> {:?}",
                name,
                e.tensor.shape(),
                tensor.shape()
            )));
        }
        e.tensor = Arc::new(tensor);
        Ok(())
    }

    /// Bind every entry into a graph.
    pub fn bind<G: Graph<T>>(&self, g: &G) -> ParamVars<G::Node> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), g.param(k, &e.tensor, e.trainable)))
            .collect()
    }

    /// Content hash over names, shapes and values (as little-endian f64).
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, e) in &self.entries {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for &d in e.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: Arc::new(e.tensor.cast()),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Merge another set in; names must not collide.
    pub fn extend(&mut self, other: ParameterSet<T>) -> Result<()> {
        for (k, e) in other.entries {
            if self.entries.contains_key(&k) {
                return Err(Error::Config(format!("duplicate parameter `{}`", k)));
            }
            self.entries.insert(k, e);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    Zeros,
    Ones,
}

/// Shape and initializer of one parameter.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init, trainable: bool) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
            trainable,
        }
    }

    /// `[out, in]` weight with Xavier init.
    pub fn dense(name: impl Into<String>, out: usize, inp: usize, trainable: bool) -> Self {
        Self::new(
            name,
            &[out, inp],
            Init::Xavier {
                fan_in: inp,
                fan_out: out,
            },
            trainable,
        )
    }

    pub fn bias(name: impl Into<String>, out: usize, trainable: bool) -> Self {
        Self::new(name, &[out], Init::Zeros, trainable)
    }
}

/// Deterministic initialization: same `(specs, seed)` gives bit-identical values.
pub fn init_params<T: Scalar>(specs: &[ParamSpec], seed: u64) -> ParameterSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParameterSet::new();
    for s in specs {
        let n: usize = s.shape.iter().product();
        let data: Vec<T> = match s.init {
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                (0..n).map(|_| lit(rng.gen_range(-bound..=bound))).collect()
            }
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
        };
        set.insert(
            s.name.clone(),
            Tensor::new(s.shape.clone(), data).expect("spec shape"),
            s.trainable,
        );
    }
    set
}

/// Maximum over all trainable coordinates of
/// `|analytic - central difference| / max(1, |central difference|)`.
///
/// The numeric side only re-runs the forward pass on perturbed values, so it
/// does not depend on any backward rule.
pub fn finite_diff_check<F>(f: F, params: &ParameterSet<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &ParamVars<Var>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("eps must be positive".into()));
    }
    let tape = Tape::new();
    let vars = params.bind(&tape);
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |set: &ParameterSet<f64>| -> Result<f64> {
        let t = Tape::new();
        let v = set.bind(&t);
        let l = f(&t, &v)?;
        Ok(t.value(&l).item())
    };

    let mut worst = 0.0f64;
    for (name, tensor, trainable) in params.iter() {
        if !trainable {
            continue;
        }
        let analytic = grads
            .param(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        for i in 0..tensor.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut tp = tensor.clone();
            tp.data_mut()[i] += eps;
            let mut tm = tensor.clone();
            tm.data_mut()[i] -= eps;
            plus.update(name, tp)?;
            minus.update(name, tm)?;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::dense("w", 100, 100, true),
            ParamSpec::bias("b", 100, true),
        ]
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a: ParameterSet<f32> = init_params(&specs(), 7);
        let b: ParameterSet<f32> = init_params(&specs(), 7);
        let c: ParameterSet<f32> = init_params(&specs(), 8);
        assert_eq!(a.get("w"), b.get("w"));
        assert_ne!(a.get("w"), c.get("w"));
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn xavier_bound_for_square_layer() {
        let p: ParameterSet<f64> = init_params(&specs(), 1);
        let bound = 0.03f64.sqrt();
        assert!(p.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(p.get("b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_entries_refuse_updates() {
        let mut p: ParameterSet<f64> = ParameterSet::new();
        p.insert("trunk", Tensor::vector(vec![1.0]), false);
        assert!(p.update("trunk", Tensor::vector(vec![2.0])).is_err());
        assert_eq!(p.get("trunk").unwrap().data(), &[1.0]);
    }
}
