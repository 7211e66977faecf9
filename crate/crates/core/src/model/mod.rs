// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instrumented decoder-only transformer.
//!
//! Each block is pre-norm attention followed by an un-normalized FFN that
//! reads the residual directly:
//!
//! ```text
//! r   = h_prev + Attn(RMSNorm(h_prev))
//! m_k = act(fc1_k · r)                 (gated: act(fc1_k · r) * (gate_k · r))
//! F   = Σ_k m_k fc2_k
//! h   = r + F
//! ```
//!
//! so the FFN output is exactly a coefficient-weighted sum of the `fc2`
//! columns, and zeroing a coefficient removes that neuron's subvalue.

mod config;
mod forward;
mod generate;
mod train;

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{Container, NamedTensor};
use crate::error::{Error, Result};

pub use config::{Activation, FfnKind, TransformerConfig};
pub use forward::{DecodeState, ForwardTrace, LayerTrace, Record};
pub use generate::{GenerateParams, Generation, StepSnapshot};
pub use train::{
    continue_training, heldout_loss, train_toy, LanguageStream, TrainCorpus, TrainHyper, TrainReport,
};

const CHECKPOINT_KIND: &str = "transformer";

/// Weights of one transformer block. Matrices are row-major `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    /// `[ffn_width, d_model]`; row `k` is `fc1_k`.
    pub fc1: Vec<f32>,
    /// `[d_model, ffn_width]`; column `k` is `fc2_k`.
    pub fc2: Vec<f32>,
    /// `[ffn_width, d_model]`, present only for gated FFNs.
    pub gate: Option<Vec<f32>>,
}

/// Every tensor of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `[vocab, d_model]`
    pub token_embedding: Vec<f32>,
    /// `[max_seq_len, d_model]`
    pub position_embedding: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `[vocab, d_model]`
    pub unembedding: Vec<f32>,
}

/// A validated, immutable model. Interventions never touch the weights; they
/// act on FFN coefficients at run time through [`EditMask`] or a hook.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: TransformerConfig,
    weights: ModelWeights,
    model_id: String,
}

/// One FFN neuron: column `index` of `fc2` in block `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }

    /// Position in a layer-major flattening of all neurons.
    pub fn flat(self, ffn_width: usize) -> usize {
        self.layer * ffn_width + self.index
    }

    pub fn from_flat(flat: usize, ffn_width: usize) -> Self {
        Self::new(flat / ffn_width, flat % ffn_width)
    }
}

/// Set of neurons whose coefficients are forced to zero.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditMask {
    pub zeroed: BTreeSet<NeuronId>,
}

impl EditMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_neurons(neurons: impl IntoIterator<Item = NeuronId>) -> Self {
        Self {
            zeroed: neurons.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.zeroed.is_empty()
    }

    pub fn len(&self) -> usize {
        self.zeroed.len()
    }

    pub fn validate(&self, config: &TransformerConfig) -> Result<()> {
        for n in &self.zeroed {
            if n.layer >= config.n_layers || n.index >= config.ffn_width {
                return Err(Error::InvalidNeuron {
                    layer: n.layer,
                    index: n.index,
                });
            }
        }
        Ok(())
    }

    /// Zeroed indices grouped per layer.
    pub fn per_layer(&self, n_layers: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_layers];
        for n in &self.zeroed {
            if n.layer < n_layers {
                out[n.layer].push(n.index);
            }
        }
        out
    }

    /// Hex SHA-256 over the sorted neuron list; `"identity"` for an empty mask.
    pub fn digest(&self) -> String {
        if self.zeroed.is_empty() {
            return "identity".into();
        }
        let mut h = Sha256::new();
        for n in &self.zeroed {
            h.update((n.layer as u64).to_le_bytes());
            h.update((n.index as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

impl Model {
    /// Assemble a model from explicit weights, validating shapes and values.
    pub fn new(
        config: TransformerConfig,
        weights: ModelWeights,
        model_id: impl Into<String>,
    ) -> Result<Self> {
        config.validate()?;
        let model = Self {
            config,
            weights,
            model_id: model_id.into(),
        };
        for (name, shape, data) in model.named_tensors() {
            let expect: usize = shape.iter().product();
            if data.len() != expect {
                return Err(Error::ShapeMismatch {
                    tensor: name,
                    detail: format!("expected {shape:?} ({expect} values), got {}", data.len()),
                });
            }
            if let Some(index) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: name,
                    index,
                });
            }
        }
        Ok(model)
    }

    /// Randomly initialized model (normal(0, 0.02) matrices, unit norms).
    pub fn init(config: TransformerConfig, seed: u64, model_id: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let n = config.ffn_width;
        let v = config.vocab_size;
        let std = 0.02f32;
        // Output projections are scaled down with depth.
        let out_std = std / (2.0 * config.n_layers as f32).sqrt();
        let mut normal = |len: usize, s: f32| -> Vec<f32> {
            (0..len).map(|_| gaussian(&mut rng) * s).collect()
        };
        let token_embedding = normal(v * d, std);
        let position_embedding = normal(config.max_seq_len * d, std);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: vec![1.0; d],
                wq: normal(d * d, std),
                wk: normal(d * d, std),
                wv: normal(d * d, std),
                wo: normal(d * d, out_std),
                fc1: normal(n * d, std),
                fc2: normal(d * n, out_std),
                gate: match config.ffn_kind {
                    FfnKind::Gated => Some(normal(n * d, std)),
                    FfnKind::TwoMatrix => None,
                },
            });
        }
        let unembedding = normal(v * d, std);
        Self::new(
            config,
            ModelWeights {
                token_embedding,
                position_embedding,
                layers,
                final_norm: vec![1.0; d],
                unembedding,
            },
            model_id,
        )
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub(crate) fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }

    pub fn with_model_id(mut self, id: impl Into<String>) -> Self {
        self.model_id = id.into();
        self
    }

    /// Column `index` of layer `layer`'s `fc2`, i.e. the neuron's subvalue direction.
    pub fn fc2_column(&self, neuron: NeuronId) -> Vec<f32> {
        let n = self.config.ffn_width;
        let fc2 = &self.weights.layers[neuron.layer].fc2;
        (0..self.config.d_model)
            .map(|i| fc2[i * n + neuron.index])
            .collect()
    }

    fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let c = &self.config;
        let (d, n, v) = (c.d_model, c.ffn_width, c.vocab_size);
        let w = &self.weights;
        let mut out: Vec<(String, Vec<usize>, &[f32])> = vec![
            ("token_embedding".into(), vec![v, d], &w.token_embedding),
            (
                "position_embedding".into(),
                vec![c.max_seq_len, d],
                &w.position_embedding,
            ),
        ];
        if w.layers.len() != c.n_layers {
            // Reported through the first missing layer's norm.
            out.push((
                format!("layers.{}.attn_norm", w.layers.len()),
                vec![c.n_layers, d],
                &[],
            ));
        }
        for (i, l) in w.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), vec![d], &l.attn_norm));
            out.push((format!("layers.{i}.wq"), vec![d, d], &l.wq));
            out.push((format!("layers.{i}.wk"), vec![d, d], &l.wk));
            out.push((format!("layers.{i}.wv"), vec![d, d], &l.wv));
            out.push((format!("layers.{i}.wo"), vec![d, d], &l.wo));
            out.push((format!("layers.{i}.fc1"), vec![n, d], &l.fc1));
            out.push((format!("layers.{i}.fc2"), vec![d, n], &l.fc2));
            match (&l.gate, c.ffn_kind) {
                (Some(g), _) => out.push((format!("layers.{i}.gate"), vec![n, d], g)),
                (None, FfnKind::Gated) => {
                    out.push((format!("layers.{i}.gate"), vec![n, d], &[]))
                }
                (None, FfnKind::TwoMatrix) => {}
            }
        }
        out.push(("final_norm".into(), vec![d], &w.final_norm));
        out.push(("unembedding".into(), vec![v, d], &w.unembedding));
        out
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "config": self.config,
            "model_id": self.model_id,
        });
        let mut c = Container::new(CHECKPOINT_KIND, meta);
        for (name, shape, data) in self.named_tensors() {
            c.push(NamedTensor::new(name, shape, data.to_vec()));
        }
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let config: TransformerConfig = serde_json::from_value(
            c.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::CorruptHeader("missing config".into()))?,
        )
        .map_err(|e| Error::CorruptHeader(format!("config: {e}")))?;
        config.validate()?;
        let model_id = c
            .meta
            .get("model_id")
            .and_then(|v| v.as_str())
            .unwrap_or("")
            .to_string();
        let (d, n, v) = (config.d_model, config.ffn_width, config.vocab_size);
        let token_embedding = c.take("token_embedding", &[v, d])?;
        let position_embedding = c.take("position_embedding", &[config.max_seq_len, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: c.take(&format!("layers.{i}.attn_norm"), &[d])?,
                wq: c.take(&format!("layers.{i}.wq"), &[d, d])?,
                wk: c.take(&format!("layers.{i}.wk"), &[d, d])?,
                wv: c.take(&format!("layers.{i}.wv"), &[d, d])?,
                wo: c.take(&format!("layers.{i}.wo"), &[d, d])?,
                fc1: c.take(&format!("layers.{i}.fc1"), &[n, d])?,
                fc2: c.take(&format!("layers.{i}.fc2"), &[d, n])?,
                gate: match config.ffn_kind {
                    FfnKind::Gated => Some(c.take(&format!("layers.{i}.gate"), &[n, d])?),
                    FfnKind::TwoMatrix => None,
                },
            });
        }
        let final_norm = c.take("final_norm", &[d])?;
        let unembedding = c.take("unembedding", &[v, d])?;
        if let Some(extra) = c.tensors.first() {
            return Err(Error::ShapeMismatch {
                tensor: extra.name.clone(),
                detail: "unexpected tensor for this configuration".into(),
            });
        }
        Self::new(
            config,
            ModelWeights {
                token_embedding,
                position_embedding,
                layers,
                final_norm,
                unembedding,
            },
            model_id,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        let bytes = self
            .to_container()
            .to_bytes()
            .expect("validated model always serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Save a model checkpoint.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    model.save(path)
}

/// Load and validate a model checkpoint.
pub fn load_model(path: &Path) -> Result<Model> {
    Model::load(path)
}

/// Standard normal draw via Box-Muller.
pub(crate) fn gaussian(rng: &mut impl Rng) -> f32 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}
