//! Named parameter storage shared by every trainable component.
//!
//! Parameters are addressed by a dense [`ParamId`] at run time and by a
//! `scope/layer/name` string for checkpoints.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{CompError, Result};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> + '_ {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Mat) -> Result<()> {
        let slot = &mut self.values[id.0];
        if slot.dim() != value.dim() {
            return Err(CompError::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                slot.dim(),
                value.dim()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Order-sensitive FNV-1a hash over every parameter's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for x in v.iter() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Gradient slots aligned with a [`ParamStore`]; `None` means the parameter
/// did not take part in the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    slots: Vec<Option<Mat>>,
}

impl ParamGrads {
    pub fn empty(len: usize) -> Self {
        Self {
            slots: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Mat> {
        self.slots.get_mut(id.0).and_then(|s| s.as_mut())
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: Mat) {
        match &mut self.slots[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Drop gradients for parameters that must not be updated.
    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        for (i, slot) in self.slots.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *slot = None;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}
