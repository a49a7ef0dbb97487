//! The frozen 784→128→128→10 ReLU backbone and the adapter family that
//! specializes it.

mod adapter;
pub mod checkpoint;
mod pass;

pub use adapter::{Adapter, AdapterConfig, LoraParams, Method, TauGateParams};
pub use pass::{
    backward, forward, predict, sigmoid, AdapterGrads, ForwardTrace, GateMode, HiddenTrace,
};

use sha2::{Digest, Sha256};

use crate::ndcore::{rng_normal, Matrix, Real, Rng};

pub const INPUT_DIM: usize = 784;
pub const HIDDEN_DIM: usize = 128;
pub const NUM_CLASSES: usize = 10;
pub const HIDDEN_LAYERS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub b3: Matrix,
}

pub const BACKBONE_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

impl Backbone {
    /// Gaussian init with variance `1 / (3·fan_in)` for weights and biases,
    /// the same second moment as the common uniform `±1/√fan_in` scheme.
    pub fn init(rng: &mut Rng) -> Self {
        let layer = |rng: &mut Rng, fan_in: usize, fan_out: usize| {
            let std = (1.0 / (3.0 * fan_in as Real)).sqrt();
            let w = rng_normal(rng, fan_in, fan_out, 0.0, std);
            let b = rng_normal(rng, 1, fan_out, 0.0, std);
            (w, b)
        };
        let (w1, b1) = layer(rng, INPUT_DIM, HIDDEN_DIM);
        let (w2, b2) = layer(rng, HIDDEN_DIM, HIDDEN_DIM);
        let (w3, b3) = layer(rng, HIDDEN_DIM, NUM_CLASSES);
        Self {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        }
    }

    /// Weight and bias of linear layer `idx` (0 and 1 hidden, 2 output).
    pub fn layer(&self, idx: usize) -> (&Matrix, &Matrix) {
        match idx {
            0 => (&self.w1, &self.b1),
            1 => (&self.w2, &self.b2),
            2 => (&self.w3, &self.b3),
            _ => panic!("backbone has three linear layers, asked for {idx}"),
        }
    }

    pub fn arrays(&self) -> [&Matrix; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn arrays_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.arrays().iter().map(|m| m.len()).sum()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.arrays().iter().flat_map(|m| m.to_le_bytes()).collect()
    }

    /// Hex SHA-256 prefix of the parameter bytes; identifies a foundation.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_le_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

pub fn count_trainable(ad: &Adapter) -> usize {
    ad.params().iter().map(|(_, m)| m.len()).sum()
}

pub fn init_adapter(method: Method, bb: &Backbone, rng: &mut Rng, cfg: &AdapterConfig) -> Adapter {
    Adapter::init(method, bb, rng, cfg)
}
