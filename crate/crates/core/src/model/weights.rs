use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngStream};

use super::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    /// `1 x d` RMSNorm scale before attention.
    pub attn_norm: Matrix,
    /// `1 x d` RMSNorm scale before the FFN.
    pub ffn_norm: Matrix,
}

/// Parameter names inside a layer, in storage order.
pub const LAYER_PARAMS: [&str; 9] =
    ["wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "attn_norm", "ffn_norm"];

impl LayerWeights {
    fn zeros_like(config: &ModelConfig) -> Self {
        let (d, kv, f) = (config.d_model, config.kv_width(), config.d_ff);
        Self {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, kv),
            wv: Matrix::zeros(d, kv),
            wo: Matrix::zeros(d, d),
            w_gate: Matrix::zeros(d, f),
            w_up: Matrix::zeros(d, f),
            w_down: Matrix::zeros(f, d),
            attn_norm: Matrix::zeros(1, d),
            ffn_norm: Matrix::zeros(1, d),
        }
    }

    pub fn params(&self) -> [&Matrix; 9] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
            &self.attn_norm,
            &self.ffn_norm,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 9] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
            &mut self.attn_norm,
            &mut self.ffn_norm,
        ]
    }
}

/// Full parameter set of the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    /// `vocab x d`
    pub embed: Matrix,
    /// `d x vocab`
    pub unembed: Matrix,
    /// `1 x d` scale of the norm before the unembedding.
    pub final_norm: Matrix,
    pub layers: Vec<LayerWeights>,
}

impl Weights {
    /// Gaussian entries with standard deviation `1/√d_model`; norm scales are 1.
    pub fn init(config: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let (d, kv, f, v) = (config.d_model, config.kv_width(), config.d_ff, config.vocab_size);
        let scale = 1.0 / (d as f64).sqrt();
        let mut gauss = |r, c| rng.gaussian_matrix(r, c).scale(scale);
        let embed = gauss(v, d);
        let unembed = gauss(d, v);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: gauss(d, d),
                wk: gauss(d, kv),
                wv: gauss(d, kv),
                wo: gauss(d, d),
                w_gate: gauss(d, f),
                w_up: gauss(d, f),
                w_down: gauss(f, d),
                attn_norm: ones(d),
                ffn_norm: ones(d),
            })
            .collect();
        Ok(Self { embed, unembed, final_norm: ones(d), layers })
    }

    pub fn zeros_like(config: &ModelConfig) -> Self {
        Self {
            embed: Matrix::zeros(config.vocab_size, config.d_model),
            unembed: Matrix::zeros(config.d_model, config.vocab_size),
            final_norm: Matrix::zeros(1, config.d_model),
            layers: (0..config.n_layers).map(|_| LayerWeights::zeros_like(config)).collect(),
        }
    }

    /// `(name, tensor)` pairs in a fixed order; layer numbers are 1-based.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("embed".to_string(), &self.embed),
            ("unembed".to_string(), &self.unembed),
            ("final_norm".to_string(), &self.final_norm),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, m) in LAYER_PARAMS.iter().zip(layer.params()) {
                out.push((format!("layer.{}.{name}", i + 1), m));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("embed".to_string(), &mut self.embed),
            ("unembed".to_string(), &mut self.unembed),
            ("final_norm".to_string(), &mut self.final_norm),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, m) in LAYER_PARAMS.iter().zip(layer.params_mut()) {
                out.push((format!("layer.{}.{name}", i + 1), m));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let reference = Self::zeros_like(config);
        if reference.layers.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "weights have {} layers, config has {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        for ((name, want), (_, got)) in reference.named().iter().zip(self.named()) {
            if want.shape() != got.shape() {
                return Err(Error::Config(format!(
                    "{name} is {:?}, config expects {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a hash over the raw bits of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, m) in self.named() {
            for v in m.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

fn ones(d: usize) -> Matrix {
    Matrix::from_fn(1, d, |_, _| 1.0)
}
