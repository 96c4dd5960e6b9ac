use std::fmt;
use std::str::FromStr;

use crate::error::{QtError, Result};
use crate::tensor::Tensor;

/// The graphical-model families that can be compiled into an unrolled network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Rbm,
    Dbm,
    Grbm,
    Gmrf,
}

impl ModelKind {
    pub fn tag(self) -> u32 {
        match self {
            ModelKind::Rbm => 1,
            ModelKind::Dbm => 2,
            ModelKind::Grbm => 3,
            ModelKind::Gmrf => 4,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Some(match tag {
            1 => ModelKind::Rbm,
            2 => ModelKind::Dbm,
            3 => ModelKind::Grbm,
            4 => ModelKind::Gmrf,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rbm => "rbm",
            ModelKind::Dbm => "dbm",
            ModelKind::Grbm => "grbm",
            ModelKind::Gmrf => "gmrf",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = QtError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rbm" => Ok(ModelKind::Rbm),
            "dbm" => Ok(ModelKind::Dbm),
            "grbm" => Ok(ModelKind::Grbm),
            "gmrf" => Ok(ModelKind::Gmrf),
            other => Err(QtError::InvalidArgument(format!("unknown model kind `{other}`"))),
        }
    }
}

/// A parameter object. Gradients are represented by the same type, so a
/// gradient bundle is always shape-congruent with the parameters it belongs to.
pub trait Parameters: Clone + Send + Sync + Sized {
    const KIND: ModelKind;

    /// Every tensor needed to rebuild the object, trainable or not.
    fn to_tensors(&self) -> Vec<Tensor>;

    fn from_tensors(tensors: Vec<Tensor>) -> Result<Self>;

    /// A copy with every trainable entry set to zero.
    fn zeros_like(&self) -> Self;

    /// Trainable entries, in a fixed order.
    fn trainable(&self) -> Vec<&[f64]>;

    fn trainable_mut(&mut self) -> Vec<&mut [f64]>;

    fn n_trainable(&self) -> usize {
        self.trainable().iter().map(|s| s.len()).sum()
    }

    /// Adds `scale * other` to every trainable entry.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.trainable_mut().into_iter().zip(other.trainable()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
        }
    }

    fn scale(&mut self, factor: f64) {
        for dst in self.trainable_mut() {
            dst.iter_mut().for_each(|d| *d *= factor);
        }
    }

    fn all_finite(&self) -> bool {
        self.trainable().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// Flattened trainable entries.
    fn flat(&self) -> Vec<f64> {
        self.trainable().concat()
    }
}

/// Message states of every layer (index 0 is the initial state) and the
/// unary term they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace<M, U = Vec<f64>> {
    pub unary: U,
    pub states: Vec<M>,
}

impl<M, U> LayerTrace<M, U> {
    pub fn n_layers(&self) -> usize {
        self.states.len() - 1
    }

    pub fn last(&self) -> &M {
        self.states.last().expect("trace holds the initial state")
    }
}
