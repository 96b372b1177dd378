//! Deterministic desk-scale decoder-only transformer.
//!
//! Two entry points cover every consistency check in the crate: the
//! monolithic masked forward pass ([`forward_full`], the oracle) and the
//! incremental cached step ([`forward_step`]). Reduction order is fixed
//! left-to-right everywhere so the two agree bit-for-bit at fp64.

mod checkpoint;
mod forward;
mod grad;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{forward_full, forward_full_plain, forward_kv, forward_step, loss_masked};
pub use grad::grad_path_embeddings;

use crate::layout::SpecialVocab;
use crate::matrix::Matrix;
use crate::precision::Precision;
use crate::rng::SplitMix64;
use crate::rope::{PathEmbeddingTable, RotaryParams};
use crate::{Error, Result};

/// Desk-scale model shape and arithmetic settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Even; the rotary pair dimension.
    pub head_dim: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub precision: Precision,
    pub seed: u64,
    /// Rows in the path-embedding table.
    pub max_paths: usize,
}

impl ModelConfig {
    /// 2 layers, 4 heads of 16, vocab 512: large enough for non-degenerate
    /// attention, small enough for exhaustive oracle runs in seconds.
    pub fn desk_default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            head_dim: 16,
            vocab_size: 512,
            rope_base: 10000.0,
            precision: Precision::Fp64,
            seed: 0,
            max_paths: crate::layout::MAX_PATHS,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn ff_dim(&self) -> usize {
        2 * self.model_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::InvalidConfig(
                "n_layers and n_heads must be positive".into(),
            ));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::InvalidConfig("rope_base must be positive".into()));
        }
        if self.max_paths == 0 || self.max_paths > crate::layout::MAX_PATHS {
            return Err(Error::InvalidConfig(format!(
                "max_paths must be in 1..={}, got {}",
                crate::layout::MAX_PATHS,
                self.max_paths
            )));
        }
        // the vocabulary must fit every special token
        SpecialVocab::desk_default().validate_vocab(self.vocab_size)?;
        Ok(())
    }
}

#[derive(Clone)]
pub(crate) struct LayerWeights {
    pub(crate) attn_norm: Vec<f64>,
    pub(crate) wq: Matrix,
    pub(crate) wk: Matrix,
    pub(crate) wv: Matrix,
    pub(crate) wo: Matrix,
    pub(crate) mlp_norm: Vec<f64>,
    pub(crate) w_up: Matrix,
    pub(crate) w_down: Matrix,
}

/// Decoder weights plus the path-embedding table.
#[derive(Clone)]
pub struct ToyDecoder {
    pub(crate) config: ModelConfig,
    pub(crate) rotary: RotaryParams,
    pub(crate) embed: Matrix,
    pub(crate) unembed: Matrix,
    pub(crate) layers: Vec<LayerWeights>,
    pub(crate) final_norm: Vec<f64>,
    pub(crate) path_embed: PathEmbeddingTable,
}

impl ToyDecoder {
    /// Initialize weights from the config seed.
    ///
    /// Projection and embedding weights are drawn uniformly from
    /// `[-0.02, 0.02]` by one splitmix64 stream in a fixed order: token
    /// embedding, unembedding, then per layer the query, key, value, output,
    /// MLP up and MLP down matrices, each row-major. Norm gains start at one
    /// and path embeddings at zero, so the path-aware key/value transform
    /// coincides with plain rotary encoding at step zero.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(config.seed);
        let p = config.precision;
        let mut draw = |rows: usize, cols: usize| -> Matrix {
            let mut m = Matrix::zeros(rows, cols);
            for x in m.data_mut() {
                *x = p.round((rng.next_f64() * 2.0 - 1.0) * 0.02);
            }
            m
        };
        let d = config.model_dim();
        let ff = config.ff_dim();
        let embed = draw(config.vocab_size, d);
        let unembed = draw(config.vocab_size, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: vec![1.0; d],
                wq: draw(d, d),
                wk: draw(d, d),
                wv: draw(d, d),
                wo: draw(d, d),
                mlp_norm: vec![1.0; d],
                w_up: draw(ff, d),
                w_down: draw(d, ff),
            });
        }
        Ok(Self {
            rotary: RotaryParams::new(config.head_dim, config.rope_base)?,
            embed,
            unembed,
            layers,
            final_norm: vec![1.0; d],
            path_embed: PathEmbeddingTable::zeros(config.max_paths, config.head_dim),
            config: config.clone(),
        })
    }

    /// All-zero weights; every forward pass yields uniform logits. Baseline
    /// for degenerate-model checks.
    pub fn zeroed(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim();
        let ff = config.ff_dim();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: Matrix::zeros(d, d),
                wk: Matrix::zeros(d, d),
                wv: Matrix::zeros(d, d),
                wo: Matrix::zeros(d, d),
                mlp_norm: vec![1.0; d],
                w_up: Matrix::zeros(ff, d),
                w_down: Matrix::zeros(d, ff),
            })
            .collect();
        Ok(Self {
            rotary: RotaryParams::new(config.head_dim, config.rope_base)?,
            embed: Matrix::zeros(config.vocab_size, d),
            unembed: Matrix::zeros(config.vocab_size, d),
            layers,
            final_norm: vec![1.0; d],
            path_embed: PathEmbeddingTable::zeros(config.max_paths, config.head_dim),
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn rotary(&self) -> &RotaryParams {
        &self.rotary
    }

    pub fn path_embeddings(&self) -> &PathEmbeddingTable {
        &self.path_embed
    }

    /// Mutable access for training updates. Read-shared during inference;
    /// callers take exclusive access while writing.
    pub fn path_embeddings_mut(&mut self) -> &mut PathEmbeddingTable {
        &mut self.path_embed
    }

    pub fn set_path_embeddings(&mut self, table: PathEmbeddingTable) -> Result<()> {
        if table.n_paths() != self.config.max_paths {
            return Err(Error::DimensionMismatch {
                expected: self.config.max_paths,
                got: table.n_paths(),
            });
        }
        if table.head_dim() != self.config.head_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.head_dim,
                got: table.head_dim(),
            });
        }
        self.path_embed = table;
        Ok(())
    }

    /// Tensors in checkpoint order: name, dims, row-major data.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let d = self.config.model_dim();
        let ff = self.config.ff_dim();
        let vocab = self.config.vocab_size;
        let mut out = vec![
            (
                "embed".to_string(),
                vec![vocab, d],
                self.embed.data().to_vec(),
            ),
            (
                "unembed".to_string(),
                vec![vocab, d],
                self.unembed.data().to_vec(),
            ),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.attn_norm"), vec![d], layer.attn_norm.clone()));
            out.push((format!("layer{i}.wq"), vec![d, d], layer.wq.data().to_vec()));
            out.push((format!("layer{i}.wk"), vec![d, d], layer.wk.data().to_vec()));
            out.push((format!("layer{i}.wv"), vec![d, d], layer.wv.data().to_vec()));
            out.push((format!("layer{i}.wo"), vec![d, d], layer.wo.data().to_vec()));
            out.push((format!("layer{i}.mlp_norm"), vec![d], layer.mlp_norm.clone()));
            out.push((format!("layer{i}.w_up"), vec![ff, d], layer.w_up.data().to_vec()));
            out.push((format!("layer{i}.w_down"), vec![d, ff], layer.w_down.data().to_vec()));
        }
        out.push(("final_norm".to_string(), vec![d], self.final_norm.clone()));
        let mut path_flat = Vec::with_capacity(self.config.max_paths * self.config.head_dim);
        for row in self.path_embed.rows() {
            path_flat.extend_from_slice(row);
        }
        out.push((
            "path_embed".to_string(),
            vec![self.config.max_paths, self.config.head_dim],
            path_flat,
        ));
        out
    }
}
