//! Versioned JSON checkpoints. Floats are written with round-trip precision,
//! so save followed by load reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mlp::{Layer, Mlp};
use super::optim::Optimizer;
use crate::error::{Error, Result};
use crate::seed::StreamRng;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    /// `"q"` for a local Q-network, `"cb"` for a worst-case predictor.
    pub kind: String,
    pub layer_dims: Vec<usize>,
    pub action_levels: usize,
    /// Factor mapping environment rewards to network units.
    pub reward_scale: f64,
    /// Layer by layer: weights row-major, then biases.
    pub weights: Vec<f64>,
    pub optimizer: Option<Optimizer>,
    pub rng: Option<StreamRng>,
    pub config_hash: String,
}

/// SHA-256 of the canonical JSON encoding, hex encoded.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Checkpoint {
    pub fn new(kind: &str, net: &Mlp, action_levels: usize, reward_scale: f64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            kind: kind.to_owned(),
            layer_dims: net.dims(),
            action_levels,
            reward_scale,
            weights: net.flat_params(),
            optimizer: None,
            rng: None,
            config_hash: String::new(),
        }
    }

    pub fn with_optimizer(mut self, optimizer: Optimizer) -> Self {
        self.optimizer = Some(optimizer);
        self
    }

    pub fn with_rng(mut self, rng: StreamRng) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn with_config_hash(mut self, hash: String) -> Self {
        self.config_hash = hash;
        self
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)));
        }
        Ok(())
    }

    pub fn network(&self) -> Result<Mlp> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let layers = self.layer_dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        let mut net = Mlp::from_layers(layers).map_err(|e| Error::Checkpoint(e.to_string()))?;
        net.set_flat_params(&self.weights).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(net)
    }

    /// Hex SHA-256 over the parameter bits.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.weights {
            h.update(w.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Checkpoint(format!("{}: {}", e.path(), e.inner())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::Seeder;
    use rand::Rng;

    #[test]
    fn bit_exact_roundtrip() {
        let mut rng = Seeder::new(8).rng();
        let net = Mlp::new(&[7, 16, 16, 1], &mut rng).unwrap();
        let mut opt = Optimizer::adam(1e-3, &net);
        let mut g = net.zero_gradients();
        g.layers[0].weights[3] = 0.123456789;
        let mut live = net.clone();
        opt.step(&mut live, &g);
        let _: u64 = rng.random();
        let ck = Checkpoint::new("q", &live, 2, 1.0 / 1200.0)
            .with_optimizer(opt.clone())
            .with_rng(rng.clone())
            .with_config_hash(config_hash(&"cfg").unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let restored = back.network().unwrap();
        let bits = |m: &Mlp| m.flat_params().iter().map(|w| w.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&restored), bits(&live));
        assert_eq!(back.optimizer, Some(opt));
        let mut r1 = back.rng.clone().unwrap();
        assert_eq!(r1.random::<u64>(), rng.random::<u64>());
        assert_eq!(back.weights_hash(), ck.weights_hash());
    }

    #[test]
    fn corrupt_documents_are_rejected() {
        assert!(Checkpoint::from_json("{\"version\":1}").is_err());
        let net = Mlp::zeros(&[2, 1]).unwrap();
        let mut ck = Checkpoint::new("q", &net, 1, 1.0);
        assert!(ck.expect_kind("cb").is_err());
        ck.weights.pop();
        assert!(ck.network().is_err());
        ck.version = 99;
        assert!(ck.network().is_err());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash(&[1, 2]).unwrap(), config_hash(&vec![1, 2]).unwrap());
        assert_ne!(config_hash(&[1, 2]).unwrap(), config_hash(&[2, 1]).unwrap());
    }
}
