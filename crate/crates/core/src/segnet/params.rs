use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Graph, Tensor, Var};

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Copies every tensor into `g`, as gradient leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Replaces the tensors wholesale. Names and shapes must match.
    pub fn load(&mut self, named: &[(String, Tensor)]) -> Result<(), String> {
        if named.len() != self.len() {
            return Err(format!("expected {} tensors, found {}", self.len(), named.len()));
        }
        for (slot, (name, t)) in named.iter().enumerate() {
            if name != &self.names[slot] || t.shape() != self.tensors[slot].shape() {
                return Err(format!(
                    "tensor {slot}: expected {} {:?}, found {name} {:?}",
                    self.names[slot],
                    self.tensors[slot].shape(),
                    t.shape()
                ));
            }
        }
        for (slot, (_, t)) in named.iter().enumerate() {
            self.tensors[slot] = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }
}

/// Seeded source of fan-in scaled normal weights.
pub(crate) struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-normal with a leaky-ReLU gain: `std = sqrt(2 / ((1 + slope^2) fan_in))`.
    pub fn kaiming(&mut self, shape: &[usize], fan_in: usize, slope: f32) -> Tensor {
        let std = (2.0 / ((1.0 + slope * slope) * fan_in as f32)).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..shape.iter().product::<usize>()).map(|_| normal.sample(&mut self.rng)).collect();
        Tensor::from_vec(shape, data)
    }
}
