//! Bit addressing, flip application and exact rollback.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{QuantizedModel, QuantizedTensor};

pub const MSB: u8 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BitAddress {
    pub layer: usize,
    pub param: usize,
    /// 0..=7, 7 being the sign bit of the stored byte.
    pub bit: u8,
}

impl BitAddress {
    pub fn msb(layer: usize, param: usize) -> Self {
        Self { layer, param, bit: MSB }
    }
}

/// Sorted, duplicate-free set of bit addresses.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "Vec<BitAddress>", into = "Vec<BitAddress>")]
pub struct BitFlipSet(Vec<BitAddress>);

impl BitFlipSet {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    /// MSB flips of `params` in one layer.
    pub fn msb_in_layer(layer: usize, params: impl IntoIterator<Item = usize>) -> Self {
        params.into_iter().map(|p| BitAddress::msb(layer, p)).collect()
    }

    pub fn addresses(&self) -> &[BitAddress] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn insert(&mut self, a: BitAddress) -> bool {
        match self.0.binary_search(&a) {
            Ok(_) => false,
            Err(pos) => {
                self.0.insert(pos, a);
                true
            }
        }
    }

    pub fn contains(&self, a: &BitAddress) -> bool {
        self.0.binary_search(a).is_ok()
    }

    /// Param indices touched in `layer`, ascending and deduplicated.
    pub fn params_in(&self, layer: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.0.iter().filter(|a| a.layer == layer).map(|a| a.param).collect();
        v.dedup();
        v
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.0.iter().map(|a| a.layer).collect();
        v.dedup();
        v
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }
}

impl From<Vec<BitAddress>> for BitFlipSet {
    fn from(mut v: Vec<BitAddress>) -> Self {
        v.sort_unstable();
        v.dedup();
        Self(v)
    }
}

impl From<BitFlipSet> for Vec<BitAddress> {
    fn from(s: BitFlipSet) -> Self {
        s.0
    }
}

impl FromIterator<BitAddress> for BitFlipSet {
    fn from_iter<I: IntoIterator<Item = BitAddress>>(iter: I) -> Self {
        iter.into_iter().collect::<Vec<_>>().into()
    }
}

/// Original values of one layer, enough to undo any flips in it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightSnapshot {
    pub layer: usize,
    pub values: Vec<i8>,
}

#[inline]
pub fn flip_bit(v: i8, bit: u8) -> i8 {
    (v as u8 ^ (1u8 << bit)) as i8
}

/// XOR 0x80 on each selected byte. Indices may repeat; every occurrence flips.
pub fn flip_msb(tensor: &QuantizedTensor, indices: &[usize]) -> Result<QuantizedTensor> {
    let mut out = tensor.clone();
    for &i in indices {
        let v = out
            .values
            .get_mut(i)
            .ok_or_else(|| Error::Address(format!("param {i} outside tensor of {}", tensor.len())))?;
        *v = flip_bit(*v, MSB);
    }
    Ok(out)
}

pub fn validate(model: &QuantizedModel, flips: &BitFlipSet) -> Result<()> {
    for a in flips.addresses() {
        let n = model
            .layer(a.layer)
            .ok_or_else(|| Error::Address(format!("layer {} does not exist", a.layer)))?
            .weight_count();
        if a.param >= n {
            return Err(Error::Address(format!(
                "param {} outside layer {} with {n} weights",
                a.param, a.layer
            )));
        }
        if a.bit > 7 {
            return Err(Error::Address(format!("bit {} is not in 0..=7", a.bit)));
        }
    }
    Ok(())
}

/// Returns the perturbed model and one snapshot per touched layer.
pub fn apply_flipset(model: &QuantizedModel, flips: &BitFlipSet) -> Result<(QuantizedModel, Vec<WeightSnapshot>)> {
    validate(model, flips)?;
    let mut out = model.clone();
    let mut by_layer: BTreeMap<usize, Vec<&BitAddress>> = BTreeMap::new();
    for a in flips.addresses() {
        by_layer.entry(a.layer).or_default().push(a);
    }
    let mut snaps = Vec::with_capacity(by_layer.len());
    for (layer, addrs) in by_layer {
        let values = out.values_mut(layer)?;
        snaps.push(WeightSnapshot { layer, values: values.to_vec() });
        for a in addrs {
            values[a.param] = flip_bit(values[a.param], a.bit);
        }
    }
    Ok((out, snaps))
}

/// Writes the snapshot values back.
pub fn restore(model: &QuantizedModel, snapshots: &[WeightSnapshot]) -> Result<QuantizedModel> {
    let mut out = model.clone();
    for s in snapshots {
        let values = out
            .values_mut(s.layer)
            .map_err(|_| Error::Lineage(format!("layer {} has no weights", s.layer)))?;
        if values.len() != s.values.len() {
            return Err(Error::Lineage(format!(
                "snapshot of layer {} has {} values, layer has {}",
                s.layer,
                s.values.len(),
                values.len()
            )));
        }
        values.copy_from_slice(&s.values);
    }
    Ok(out)
}
