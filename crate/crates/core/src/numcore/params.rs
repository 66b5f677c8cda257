use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which half of the encoder-decoder a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Decoder,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Decoder => "decoder",
        }
    }

    pub fn parse(s: &str) -> Option<Group> {
        match s {
            "encoder" => Some(Group::Encoder),
            "decoder" => Some(Group::Decoder),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: Group,
    /// Marks layer-normalization gains and biases.
    pub norm: bool,
    pub tensor: Tensor<T>,
}

/// Ordered collection of named parameter tensors, each tagged with a group.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

/// Gradient of a scalar loss; shares the layout of the parameters it differentiates.
pub type Grad<T> = ParamSet<T>;

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: &str, group: Group, norm: bool, tensor: Tensor<T>) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::StructuralMismatch(format!("duplicate entry `{name}`")));
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            norm,
            tensor,
        });
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all entries.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.tensor)
    }

    /// Same names, shapes, groups and norm flags, in the same order.
    pub fn check_compatible<U: Scalar>(&self, other: &ParamSet<U>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::StructuralMismatch(format!(
                "{} entries vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name
                || a.group != b.group
                || a.norm != b.norm
                || a.tensor.shape() != b.tensor.shape()
            {
                return Err(Error::StructuralMismatch(format!(
                    "entry `{}` {:?} vs `{}` {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    norm: e.norm,
                    tensor: Tensor::zeros(e.tensor.shape().to_vec()),
                })
                .collect(),
        }
    }

    /// Applies `f` to every value, keeping the layout.
    pub fn map(&self, f: impl Fn(T) -> T) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    tensor: e.tensor.map(&f),
                    ..e.clone()
                })
                .collect(),
        }
    }

    /// `self += s * other`; layouts must match.
    pub fn add_scaled(&mut self, s: T, other: &ParamSet<T>) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.tensor.add_scaled(s, &b.tensor);
        }
        Ok(())
    }

    /// Fails on the first entry holding NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.entries.iter().find(|e| !e.tensor.all_finite()) {
            Some(e) => Err(Error::NonFinite {
                entry: e.name.clone(),
            }),
            None => Ok(()),
        }
    }

    /// Flattened values in entry order.
    pub fn flat(&self) -> Vec<T> {
        self.entries
            .iter()
            .flat_map(|e| e.tensor.data().iter().copied())
            .collect()
    }

    /// Overwrites all values from a flat slice in entry order.
    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a set of {}",
                values.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.tensor.len();
            e.tensor.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    norm: e.norm,
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }
}
