use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Scalar;
use crate::container::{ModelKind, NamedTensor, WeightsContainer};
use crate::encoding::{column_info, feature_width, ColumnFamily};
use crate::error::{Error, Result};

/// Recency of a column-embedding slot: 0 for the newest interaction and the
/// label cell.
pub fn slot_lag(max_lag: usize, slot: usize) -> usize {
    match slot / max_lag {
        0 => slot,
        1 => slot - max_lag,
        2 => slot - 2 * max_lag + 1,
        _ => 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniPfnConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    /// Column slots available, label cell included.
    pub max_features: usize,
    pub value_hash_seed: u64,
}

impl Default for MiniPfnConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_blocks: 3,
            d_ff: 128,
            max_features: 64,
            value_hash_seed: 0x4c4b_5457,
        }
    }
}

impl MiniPfnConfig {
    /// The small configuration used for gradient checking.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            n_heads: 2,
            n_blocks: 1,
            d_ff: 16,
            max_features: 16,
            value_hash_seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.max_features < 7 {
            return Err(Error::InvalidArgument("d_ff must be positive and max_features >= 7".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Largest lag a column embedding exists for, plus one.
    pub fn max_lag(&self) -> usize {
        (self.max_features - 1) / 3
    }

    pub fn n_slots(&self) -> usize {
        3 * self.max_lag() + 1
    }

    pub fn max_horizon(&self) -> usize {
        self.max_lag()
    }

    pub fn label_slot(&self) -> usize {
        3 * self.max_lag()
    }

    pub fn slot_lag(&self, slot: usize) -> usize {
        slot_lag(self.max_lag(), slot)
    }

    /// Column-embedding slot of feature column `j` at horizon `T`. Slots are
    /// keyed on (family, lag) so the same recency shares an embedding across
    /// horizons.
    pub fn slot(&self, horizon: usize, j: usize) -> usize {
        let l = self.max_lag();
        match column_info(horizon, j) {
            (ColumnFamily::Question, lag) => lag,
            (ColumnFamily::Skill, lag) => l + lag,
            (ColumnFamily::Correct, lag) => 2 * l + lag - 1,
        }
    }

    pub fn check_width(&self, horizon: usize) -> Result<()> {
        let width = feature_width(horizon);
        if width + 1 > self.max_features || horizon > self.max_horizon() {
            return Err(Error::WidthOverflow {
                width,
                max: self.max_features,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![S::ZERO; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std is finite and positive");
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product()).map(|_| S::from_f64(dist.sample(rng))).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let w = self.shape[1];
        &mut self.data[i * w..(i + 1) * w]
    }
}

/// Query/key/value/output projections of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams<S> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<S> {
    /// Attention across the cells of one row.
    pub feature_attn: AttnParams<S>,
    /// Attention across rows within one column.
    pub row_attn: AttnParams<S>,
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    pub ff_w1: Tensor<S>,
    pub ff_b1: Tensor<S>,
    pub ff_w2: Tensor<S>,
    pub ff_b2: Tensor<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    /// Mixes the fixed hashed value vectors, `d_model x d_model`.
    pub value_mix: Tensor<S>,
    /// `n_slots x d_model`.
    pub col_emb: Tensor<S>,
    /// `max_lag x d_model`, shared by every cell of one time step.
    pub time_emb: Tensor<S>,
    pub pad_emb: Tensor<S>,
    /// `2 x d_model`, one row per class.
    pub label_emb: Tensor<S>,
    pub mask_emb: Tensor<S>,
    pub blocks: Vec<BlockParams<S>>,
    /// `d_model x 2`.
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn init(config: &MiniPfnConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let f = config.d_ff;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let out_scale = inv(2 * config.n_blocks.max(1));
        let attn = |rng: &mut ChaCha8Rng| {
            AttnParams {
                wq: Tensor::normal(&[d, d], inv(d), rng),
                wk: Tensor::normal(&[d, d], inv(d), rng),
                wv: Tensor::normal(&[d, d], inv(d), rng),
                wo: Tensor::normal(&[d, d], inv(d) * out_scale, rng),
            }
        };
        let value_mix = Tensor::normal(&[d, d], 1.0, &mut rng);
        let col_emb = Tensor::normal(&[config.n_slots(), d], 0.5, &mut rng);
        let time_emb = Tensor::normal(&[config.max_lag(), d], 0.5, &mut rng);
        let pad_emb = Tensor::normal(&[d], 0.5, &mut rng);
        let label_emb = Tensor::normal(&[2, d], 1.0, &mut rng);
        let mask_emb = Tensor::normal(&[d], 0.5, &mut rng);
        let blocks = (0..config.n_blocks)
            .map(|_| BlockParams {
                feature_attn: attn(&mut rng),
                row_attn: attn(&mut rng),
                ln1_gain: Tensor::filled(&[d], S::ONE),
                ln1_bias: Tensor::zeros(&[d]),
                ff_w1: Tensor::normal(&[d, f], inv(d), &mut rng),
                ff_b1: Tensor::zeros(&[f]),
                ff_w2: Tensor::normal(&[f, d], inv(f) * out_scale, &mut rng),
                ff_b2: Tensor::zeros(&[d]),
                ln2_gain: Tensor::filled(&[d], S::ONE),
                ln2_bias: Tensor::zeros(&[d]),
            })
            .collect();
        let head_w = Tensor::normal(&[d, 2], inv(d), &mut rng);
        let head_b = Tensor::zeros(&[2]);
        Self {
            value_mix,
            col_emb,
            time_emb,
            pad_emb,
            label_emb,
            mask_emb,
            blocks,
            head_w,
            head_b,
        }
    }

    /// All tensors with stable names, in serialization order.
    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("value_mix".to_string(), &self.value_mix),
            ("col_emb".to_string(), &self.col_emb),
            ("time_emb".to_string(), &self.time_emb),
            ("pad_emb".to_string(), &self.pad_emb),
            ("label_emb".to_string(), &self.label_emb),
            ("mask_emb".to_string(), &self.mask_emb),
        ];
        for (b, blk) in self.blocks.iter().enumerate() {
            for (kind, a) in [("feature_attn", &blk.feature_attn), ("row_attn", &blk.row_attn)] {
                out.push((format!("block{b}.{kind}.wq"), &a.wq));
                out.push((format!("block{b}.{kind}.wk"), &a.wk));
                out.push((format!("block{b}.{kind}.wv"), &a.wv));
                out.push((format!("block{b}.{kind}.wo"), &a.wo));
            }
            out.push((format!("block{b}.ln1.gain"), &blk.ln1_gain));
            out.push((format!("block{b}.ln1.bias"), &blk.ln1_bias));
            out.push((format!("block{b}.ff.w1"), &blk.ff_w1));
            out.push((format!("block{b}.ff.b1"), &blk.ff_b1));
            out.push((format!("block{b}.ff.w2"), &blk.ff_w2));
            out.push((format!("block{b}.ff.b2"), &blk.ff_b2));
            out.push((format!("block{b}.ln2.gain"), &blk.ln2_gain));
            out.push((format!("block{b}.ln2.bias"), &blk.ln2_bias));
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    /// Same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![
            &mut self.value_mix,
            &mut self.col_emb,
            &mut self.time_emb,
            &mut self.pad_emb,
            &mut self.label_emb,
            &mut self.mask_emb,
        ];
        for blk in &mut self.blocks {
            for a in [&mut blk.feature_attn, &mut blk.row_attn] {
                out.push(&mut a.wq);
                out.push(&mut a.wk);
                out.push(&mut a.wv);
                out.push(&mut a.wo);
            }
            out.push(&mut blk.ln1_gain);
            out.push(&mut blk.ln1_bias);
            out.push(&mut blk.ff_w1);
            out.push(&mut blk.ff_b1);
            out.push(&mut blk.ff_w2);
            out.push(&mut blk.ff_b2);
            out.push(&mut blk.ln2_gain);
            out.push(&mut blk.ln2_bias);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(&t.shape))
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        self.map(Tensor::cast)
    }

    fn map<T: Scalar>(&self, f: impl Fn(&Tensor<S>) -> Tensor<T>) -> ModelParams<T> {
        let attn = |a: &AttnParams<S>| AttnParams {
            wq: f(&a.wq),
            wk: f(&a.wk),
            wv: f(&a.wv),
            wo: f(&a.wo),
        };
        ModelParams {
            value_mix: f(&self.value_mix),
            col_emb: f(&self.col_emb),
            time_emb: f(&self.time_emb),
            pad_emb: f(&self.pad_emb),
            label_emb: f(&self.label_emb),
            mask_emb: f(&self.mask_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    feature_attn: attn(&b.feature_attn),
                    row_attn: attn(&b.row_attn),
                    ln1_gain: f(&b.ln1_gain),
                    ln1_bias: f(&b.ln1_bias),
                    ff_w1: f(&b.ff_w1),
                    ff_b1: f(&b.ff_b1),
                    ff_w2: f(&b.ff_w2),
                    ff_b2: f(&b.ff_b2),
                    ln2_gain: f(&b.ln2_gain),
                    ln2_bias: f(&b.ln2_bias),
                })
                .collect(),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
        }
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn to_named_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        self.named()
            .into_iter()
            .map(|(name, t)| {
                NamedTensor::new(
                    format!("{prefix}{name}"),
                    t.shape.clone(),
                    t.data.iter().map(|x| x.to_f64() as f32).collect(),
                )
            })
            .collect()
    }

    /// Overwrite every tensor from `container`, checking names and shapes.
    pub fn load_named_tensors(&mut self, container: &WeightsContainer, prefix: &str) -> Result<()> {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(self.tensors_mut()) {
            let src = container.tensor(&format!("{prefix}{name}"))?;
            if src.shape != t.shape {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape, t.shape
                )));
            }
            for (dst, &v) in t.data.iter_mut().zip(&src.data) {
                *dst = S::from_f64(f64::from(v));
            }
        }
        Ok(())
    }
}

/// A trained (or freshly initialized) model.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniPfnWeights {
    pub config: MiniPfnConfig,
    pub params: ModelParams<f32>,
}

impl MiniPfnWeights {
    pub fn init(config: MiniPfnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            params: ModelParams::init(&config, seed),
        })
    }

    pub fn to_container(&self) -> WeightsContainer {
        WeightsContainer::new(ModelKind::MiniPfn, &self.config, self.params.to_named_tensors(""))
    }

    pub fn from_container(c: &WeightsContainer) -> Result<Self> {
        c.expect_kind(ModelKind::MiniPfn)?;
        let config: MiniPfnConfig = c.metadata()?;
        config.validate()?;
        let mut params = ModelParams::init(&config, 0);
        params.load_named_tensors(c, "")?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&WeightsContainer::load(path)?)
    }
}
