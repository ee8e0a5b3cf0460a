use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::Error;

/// The freeze/unfreeze unit of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupName {
    Density,
    Albedo,
    Roughness,
    F0,
    Envmap,
    SpecularMlp,
}

impl GroupName {
    pub const ALL: [GroupName; 6] = [
        GroupName::Density,
        GroupName::Albedo,
        GroupName::Roughness,
        GroupName::F0,
        GroupName::Envmap,
        GroupName::SpecularMlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupName::Density => "density",
            GroupName::Albedo => "albedo",
            GroupName::Roughness => "roughness",
            GroupName::F0 => "f0",
            GroupName::Envmap => "envmap",
            GroupName::SpecularMlp => "specular_mlp",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for GroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GroupName::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::UnknownGroup(s.to_string()))
    }
}

/// Identifies one tensor inside the model's group registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub group: GroupName,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: GroupName,
    pub tensors: Vec<Tensor>,
    pub trainable: bool,
}

impl ParamGroup {
    pub fn new(name: GroupName, tensors: Vec<Tensor>) -> Self {
        ParamGroup { name, tensors, trainable: true }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn bit_eq(&self, other: &ParamGroup) -> bool {
        self.name == other.name
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}
