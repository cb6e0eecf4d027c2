//! ReLU coordinate-network bodies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::real::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlpError {
    #[error("topology needs at least an input and an output dimension, all >= 1: {0:?}")]
    Topology(Vec<usize>),
    #[error("feature length {got} does not match input dimension {want}")]
    InputDim { got: usize, want: usize },
}

impl From<MlpError> for DiffError {
    fn from(e: MlpError) -> Self {
        DiffError::Other(e.to_string())
    }
}

/// Affine layers `x·W + b` with ReLU between them; the last layer is affine
/// only. Weights are stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights<T: Real> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

/// Tape handles for one bound MLP.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl<T: Real> MlpWeights<T> {
    /// He-uniform hidden layers, final weights scaled by 0.1, zero biases.
    pub fn init(topology: &[usize], seed: u64) -> Result<Self, MlpError> {
        if topology.len() < 2 || topology.iter().any(|&d| d == 0) {
            return Err(MlpError::Topology(topology.to_vec()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = topology.len() - 2;
        let layers = topology
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let gain = if i == last { 0.1 } else { 1.0 };
                let weights = (0..fan_in * fan_out).map(|_| T::lit(gain * rng.gen_range(-bound..bound))).collect();
                (
                    Tensor::new(vec![fan_in, fan_out], weights).expect("positive dims"),
                    Tensor::zeros(&[fan_out]),
                )
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").0.shape()[1]
    }

    pub fn topology(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|(w, _)| w.shape()[1]));
        dims
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    pub fn output_bias_mut(&mut self) -> &mut Tensor<T> {
        &mut self.layers.last_mut().expect("at least one layer").1
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> MlpVars {
        MlpVars { layers: self.layers.iter().map(|(w, b)| (tape.param(w), tape.param(b))).collect() }
    }

    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a, T>) -> MlpVars {
        MlpVars { layers: self.layers.iter().map(|(w, b)| (tape.frozen(w), tape.frozen(b))).collect() }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    /// Plain batched forward over `features` laid out `[rows, input_dim]`.
    pub fn forward(&self, features: &[T]) -> Result<Vec<T>, MlpError> {
        let din = self.input_dim();
        if features.len() % din != 0 || features.is_empty() {
            return Err(MlpError::InputDim { got: features.len(), want: din });
        }
        let rows = features.len() / din;
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::new(vec![rows, din], features.to_vec()).expect("checked"));
        let y = mlp_forward(&mut tape, &vars, x).map_err(|_| MlpError::InputDim { got: features.len(), want: din })?;
        Ok(tape.value(y).data().to_vec())
    }
}

/// Record the MLP on the tape for an input `[rows, input_dim]`.
pub fn mlp_forward<'a, T: Real>(tape: &mut Tape<'a, T>, vars: &MlpVars, x: Var) -> Result<Var, DiffError> {
    let din = tape.value(vars.layers[0].0).shape()[0];
    let xv = tape.value(x);
    if xv.cols() != din {
        return Err(MlpError::InputDim { got: xv.cols(), want: din }.into());
    }
    let mut h = x;
    let n = vars.layers.len();
    for (i, &(w, b)) in vars.layers.iter().enumerate() {
        h = tape.matmul(h, w)?;
        h = tape.add_row(h, b)?;
        if i + 1 < n {
            h = tape.relu(h);
        }
    }
    Ok(h)
}
