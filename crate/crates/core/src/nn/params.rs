use rand::Rng;
use serde::{Deserialize, Serialize};

/// Location of one named tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId {
    pub offset: usize,
    pub len: usize,
}

impl ParamId {
    pub fn of<'a>(&self, buf: &'a [f64]) -> &'a [f64] {
        &buf[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a>(&self, buf: &'a mut [f64]) -> &'a mut [f64] {
        &mut buf[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
}

/// All trainable parameters of a model in one flat `f64` buffer.
///
/// Gradients and optimizer moments are plain vectors of the same length,
/// addressed through the same [`ParamId`]s.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    specs: Vec<TensorSpec>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        match init {
            Init::Zeros => self.data.resize(offset + len, 0.0),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                self.data
                    .extend((0..len).map(|_| rng.random_range(-bound..=bound)));
            }
        }
        self.specs.push(TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        });
        ParamId { offset, len }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().find(|s| s.name == name).map(|s| ParamId {
            offset: s.offset,
            len: s.len(),
        })
    }

    /// Replaces the values, keeping the layout.
    pub fn load(&mut self, values: &[f64]) -> Result<(), String> {
        if values.len() != self.data.len() {
            return Err(format!(
                "parameter count mismatch: expected {}, got {}",
                self.data.len(),
                values.len()
            ));
        }
        self.data.copy_from_slice(values);
        Ok(())
    }
}
