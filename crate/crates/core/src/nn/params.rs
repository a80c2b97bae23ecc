use std::collections::HashMap;

use rand::Rng;

use crate::error::{structural, Result};

/// Index of a tensor inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Named, shaped real tensors with a gradient slot per tensor, laid out in one
/// flat buffer in insertion order. Equality ignores the gradient slots.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    values: Vec<f64>,
    grads: Vec<f64>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries && self.values == other.values
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        let len: usize = shape.iter().product();
        if values.len() != len {
            return Err(structural!(
                "parameter {name:?} has {} values for shape {shape:?}",
                values.len()
            ));
        }
        if self.by_name.contains_key(name) {
            return Err(structural!("duplicate parameter name {name:?}"));
        }
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.values.len(),
            len,
        });
        self.by_name.insert(name.to_string(), id);
        self.values.extend(values);
        self.grads.resize(self.values.len(), 0.0);
        Ok(ParamId(id))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let len = shape.iter().product();
        self.add(name, shape, vec![0.0; len])
    }

    pub fn add_filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let len = shape.iter().product();
        self.add(name, shape, vec![value; len])
    }

    /// Uniform in `[-bound, bound]`, rounded to f32 so checkpoints are exact.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let len: usize = shape.iter().product();
        let values = (0..len)
            .map(|_| round_f32((2.0 * rng.random::<f64>() - 1.0) * bound))
            .collect();
        self.add(name, shape, values)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.values[e.offset..e.offset + e.len]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = &self.entries[id.0];
        &mut self.values[e.offset..e.offset + e.len]
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.grads[e.offset..e.offset + e.len]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Replaces the gradient buffer.
    pub fn set_grads(&mut self, grads: &[f64]) -> Result<()> {
        if grads.len() != self.grads.len() {
            return Err(structural!(
                "gradient buffer of {} entries for store of {}",
                grads.len(),
                self.grads.len()
            ));
        }
        self.grads.copy_from_slice(grads);
        Ok(())
    }

    /// Rounds every value to the nearest f32.
    pub fn quantize_f32(&mut self) {
        self.values.iter_mut().for_each(|v| *v = round_f32(*v));
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the value bits; equal iff the stores hold bitwise equal values
    /// (up to hash collisions).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}
