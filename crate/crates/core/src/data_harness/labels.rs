use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cardinalities of the (action, object, location) label space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpace {
    pub actions: usize,
    pub objects: usize,
    pub locations: usize,
}

impl LabelSpace {
    /// Fluent Speech Commands: 6 x 14 x 4 = 336 classes.
    pub const FSC: LabelSpace = LabelSpace { actions: 6, objects: 14, locations: 4 };
    /// Desk-scale default: 4 x 3 x 2 = 24 classes.
    pub const TOY: LabelSpace = LabelSpace { actions: 4, objects: 3, locations: 2 };

    pub fn num_classes(&self) -> usize {
        self.actions * self.objects * self.locations
    }

    pub fn validate(&self) -> Result<()> {
        if self.actions == 0 || self.objects == 0 || self.locations == 0 {
            return Err(Error::Config(format!("empty label dimension in {self:?}")));
        }
        Ok(())
    }

    /// `action * (objects * locations) + object * locations + location`.
    pub fn encode(&self, t: IntentTriple) -> Result<usize> {
        if t.action >= self.actions || t.object >= self.objects || t.location >= self.locations {
            return Err(Error::Label(format!("{t} outside {}x{}x{}", self.actions, self.objects, self.locations)));
        }
        Ok(t.action * self.objects * self.locations + t.object * self.locations + t.location)
    }

    pub fn decode(&self, index: usize) -> Result<IntentTriple> {
        if index >= self.num_classes() {
            return Err(Error::Label(format!("index {index} outside [0, {})", self.num_classes())));
        }
        let per_action = self.objects * self.locations;
        Ok(IntentTriple {
            action: index / per_action,
            object: (index % per_action) / self.locations,
            location: index % self.locations,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntentTriple {
    pub action: usize,
    pub object: usize,
    pub location: usize,
}

impl IntentTriple {
    pub fn new(action: usize, object: usize, location: usize) -> Self {
        Self { action, object, location }
    }
}

impl fmt::Display for IntentTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.action, self.object, self.location)
    }
}

/// Flat index under the FSC label space.
pub fn label_encode(t: IntentTriple) -> Result<usize> {
    LabelSpace::FSC.encode(t)
}

pub fn label_decode(index: usize) -> Result<IntentTriple> {
    LabelSpace::FSC.decode(index)
}
