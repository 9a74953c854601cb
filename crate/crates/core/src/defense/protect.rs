//! Simulated ECC memory: flips pass through SECDED on protected words.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::defense::secded::{secded_decode, secded_encode, DecodeStatus, SecdedWord};
use crate::error::Result;
use crate::fault::{flip_bit, validate, BitAddress, BitFlipSet};
use crate::model::QuantizedModel;

/// Weight bytes per codeword.
pub const WORD_BYTES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WordAddress {
    pub layer: usize,
    /// Word index within the layer; covers params `8w..8w+8`.
    pub word: usize,
}

impl WordAddress {
    pub fn of(a: &BitAddress) -> Self {
        Self { layer: a.layer, word: a.param / WORD_BYTES }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordOutcome {
    Unprotected,
    Clean,
    Corrected,
    Uncorrectable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordStatus {
    pub address: WordAddress,
    pub flips: usize,
    pub outcome: WordOutcome,
}

/// Which words sit behind ECC.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protection {
    All,
    None,
    Words(BTreeSet<WordAddress>),
}

impl Protection {
    /// Protects exactly the words a flip set touches.
    pub fn words_of(flips: &BitFlipSet) -> Self {
        Protection::Words(flips.addresses().iter().map(WordAddress::of).collect())
    }

    pub fn covers(&self, w: &WordAddress) -> bool {
        match self {
            Protection::All => true,
            Protection::None => false,
            Protection::Words(s) => s.contains(w),
        }
    }
}

/// Applies `flips`, routing each touched word through encode, flip, decode
/// when `protected` holds for it. Single flips in a protected word are undone;
/// multiple flips leave the word as the faults wrote it. Returns one status
/// per touched word.
pub fn protect_and_apply(
    model: &QuantizedModel,
    flips: &BitFlipSet,
    protected: impl Fn(&WordAddress) -> bool,
) -> Result<(QuantizedModel, Vec<WordStatus>)> {
    validate(model, flips)?;
    let mut out = model.clone();
    let mut by_word: BTreeMap<WordAddress, Vec<&BitAddress>> = BTreeMap::new();
    for a in flips.addresses() {
        by_word.entry(WordAddress::of(a)).or_default().push(a);
    }
    let mut statuses = Vec::with_capacity(by_word.len());
    for (addr, bits) in by_word {
        let values = out.values_mut(addr.layer)?;
        let start = addr.word * WORD_BYTES;
        let end = (start + WORD_BYTES).min(values.len());
        let outcome = if protected(&addr) {
            let mut raw = [0u8; WORD_BYTES];
            for (i, v) in values[start..end].iter().enumerate() {
                raw[i] = *v as u8;
            }
            let mut code: SecdedWord = secded_encode(u64::from_le_bytes(raw));
            for a in &bits {
                code = code.flip((a.param - start) * 8 + a.bit as usize);
            }
            let (data, status) = secded_decode(code);
            // An uncorrectable word keeps its faulty contents.
            let bytes = if status == DecodeStatus::Uncorrectable { code.data } else { data }.to_le_bytes();
            for (i, v) in values[start..end].iter_mut().enumerate() {
                *v = bytes[i] as i8;
            }
            match status {
                DecodeStatus::Clean => WordOutcome::Clean,
                DecodeStatus::Corrected => WordOutcome::Corrected,
                DecodeStatus::Uncorrectable => WordOutcome::Uncorrectable,
            }
        } else {
            for a in &bits {
                values[a.param] = flip_bit(values[a.param], a.bit);
            }
            WordOutcome::Unprotected
        };
        statuses.push(WordStatus { address: addr, flips: bits.len(), outcome });
    }
    Ok((out, statuses))
}
