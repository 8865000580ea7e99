//! Named parameter storage.
//!
//! All trainable tensors live in a single [`ParamStore`]. Registration order
//! is the canonical order: it fixes RNG consumption during initialization,
//! checkpoint layout, and optimizer-state alignment. Parameter names never
//! encode a depth variant, which is what lets one checkpoint serve every
//! reuse schedule.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    value: ArrayD<f64>,
}

/// Ordered, name-addressable set of parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.lookup(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Total number of stored scalar parameters.
    pub fn total_len(&self) -> u64 {
        self.entries.iter().map(|e| e.value.len() as u64).sum()
    }

    /// Overwrite a tensor by name, checking the shape matches.
    pub fn set_by_name(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let id = self
            .lookup(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        let current = self.value(id);
        if current.shape() != value.shape() {
            return Err(Error::shape(
                format!("parameter `{name}`"),
                format!("{:?}", current.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        self.entries[id.0].value = value;
        Ok(())
    }
}

/// Kaiming-uniform bound used for conv and linear kernels: U(-b, b) with
/// b = sqrt(1 / fan_in), matching the usual conv default.
pub fn kaiming_uniform(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product mismatch")
}

/// Uniform [0, 1) initialization (prompt components).
pub fn uniform01(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product mismatch")
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn registration_order_is_stable() {
        let mut store = ParamStore::new();
        let a = store.register("a", zeros(&[2, 2]));
        let b = store.register("b", zeros(&[3]));
        assert_eq!(a.index(), 0);
        assert_eq!(b.index(), 1);
        assert_eq!(store.name(a), "a");
        assert_eq!(store.lookup("b"), Some(b));
        assert_eq!(store.total_len(), 7);
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let mut r1 = ChaCha12Rng::seed_from_u64(7);
        let mut r2 = ChaCha12Rng::seed_from_u64(7);
        let x = kaiming_uniform(&mut r1, &[4, 3, 3, 3], 27);
        let y = kaiming_uniform(&mut r2, &[4, 3, 3, 3], 27);
        assert_eq!(x, y);
    }

    #[test]
    fn set_by_name_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.register("w", zeros(&[2, 2]));
        let err = store.set_by_name("w", zeros(&[3])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }
}
