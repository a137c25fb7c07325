use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, Mlp};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "motion-prior-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn vector(data: &[f64]) -> Self {
        Self {
            shape: vec![data.len()],
            data: data.to_vec(),
        }
    }
}

/// Serialized position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Compatibility("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Named parameter tensors plus optional optimizer and RNG state, behind a
/// versioned header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
    pub optimizers: BTreeMap<String, Adam>,
    pub rng: Option<RngState>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
            optimizers: BTreeMap::new(),
            rng: None,
        }
    }
}

impl Checkpoint {
    pub fn put_mlp(&mut self, name: &str, net: &Mlp) {
        self.tensors.insert(
            name.to_string(),
            Tensor {
                shape: net.sizes().to_vec(),
                data: net.params().to_vec(),
            },
        );
    }

    /// Restore an MLP; its layer sizes must match `expected_sizes`.
    pub fn get_mlp(&self, name: &str, expected_sizes: &[usize], activation: super::Activation) -> Result<Mlp> {
        let t = self.tensor(name)?;
        if t.shape != expected_sizes {
            return Err(Error::Compatibility(format!(
                "tensor '{name}' has layer sizes {:?}, expected {expected_sizes:?}",
                t.shape
            )));
        }
        Mlp::from_params(&t.shape, activation, t.data.clone())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Compatibility(format!("checkpoint has no tensor '{name}'")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let text = serde_json::to_string(self)?;
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Compatibility(format!(
                "unsupported checkpoint header {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use rand::RngCore;

    use super::super::Activation;
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[4, 8, 2], Activation::Tanh, &mut rng);
        let mut opt = Adam::new(1e-3, &[net.num_params()]);
        opt.t = 7;
        opt.m[0][3] = 0.1234567890123;
        let _ = rng.next_u64();
        let mut ck = Checkpoint::default();
        ck.put_mlp("policy", &net);
        ck.optimizers.insert("main".into(), opt.clone());
        ck.rng = Some(RngState::capture(&rng));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let restored = back.get_mlp("policy", &[4, 8, 2], Activation::Tanh).unwrap();
        assert_eq!(restored.params(), net.params());
        let mut r2 = back.rng.unwrap().restore().unwrap();
        assert_eq!(r2.next_u64(), rng.next_u64());
    }

    #[test]
    fn header_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = Checkpoint {
            version: 99,
            ..Checkpoint::default()
        };
        ck.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Compatibility(_))));
    }

    #[test]
    fn size_mismatch_is_compatibility_error() {
        let net = Mlp::new(&[4, 8, 2], Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(0));
        let mut ck = Checkpoint::default();
        ck.put_mlp("p", &net);
        assert!(matches!(ck.get_mlp("p", &[4, 8, 3], Activation::Tanh), Err(Error::Compatibility(_))));
    }
}
