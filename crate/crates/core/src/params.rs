//! Named parameter storage with freeze groups.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Disjoint groups covering every trainable parameter in the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    QuantizerCodebook,
    SpeechEncoder,
    Teacher,
    Am,
    Heads,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::QuantizerCodebook,
        ParamGroup::SpeechEncoder,
        ParamGroup::Teacher,
        ParamGroup::Am,
        ParamGroup::Heads,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::QuantizerCodebook => "quantizer_codebook",
            ParamGroup::SpeechEncoder => "speech_encoder",
            ParamGroup::Teacher => "teacher",
            ParamGroup::Am => "am",
            ParamGroup::Heads => "heads",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group `{s}`")))
    }
}

/// Set of parameter groups excluded from gradient updates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSet(BTreeSet<ParamGroup>);

impl FreezeSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self(ParamGroup::ALL.into_iter().collect())
    }

    pub fn of(groups: &[ParamGroup]) -> Self {
        Self(groups.iter().copied().collect())
    }

    /// Parses group names, rejecting unknown ones.
    pub fn parse<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut set = BTreeSet::new();
        for n in names {
            set.insert(n.as_ref().parse()?);
        }
        Ok(Self(set))
    }

    pub fn freeze(&mut self, group: ParamGroup) {
        self.0.insert(group);
    }

    pub fn unfreeze(&mut self, group: ParamGroup) {
        self.0.remove(&group);
    }

    pub fn union(&self, other: &FreezeSet) -> FreezeSet {
        FreezeSet(self.0.union(&other.0).copied().collect())
    }

    pub fn contains(&self, group: ParamGroup) -> bool {
        self.0.contains(&group)
    }

    pub fn groups(&self) -> impl Iterator<Item = ParamGroup> + '_ {
        self.0.iter().copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Parameters of one model. Each store carries a process-unique id so that
/// several models can share one computation graph.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self { uid: next_uid(), params: self.params.clone(), index: self.index.clone() }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { uid: next_uid(), params: Vec::new(), index: HashMap::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        id
    }

    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> usize {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.add(name, group, Tensor::new(shape.to_vec(), data))
    }

    pub fn get(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_scalars_in(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    /// Overwrites values from `other`, matching by name. Every parameter of
    /// `self` must be present with the same shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .id_of(&p.name)
                .map(|i| &other.params[i])
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    /// Copies the named subset of parameters from `other` (used to transfer
    /// trunks while leaving freshly initialised heads alone).
    pub fn load_matching(&mut self, other: &ParamStore, keep: impl Fn(&Param) -> bool) -> Result<usize> {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| keep(p)) {
            if let Some(i) = other.id_of(&p.name) {
                let src = &other.params[i].value;
                if src.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!("shape mismatch for `{}`", p.name)));
                }
                p.value = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Checksum restricted to one group.
    pub fn group_checksum(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
