//! MiniPFN: a small two-way attention network that predicts the label column
//! of a query table by reading a labelled context table at inference time.

pub mod model;
pub mod params;
pub mod tensor;

use std::sync::Arc;

pub use model::{cross_entropy, forward, hash_vector, loss_and_grad, AttentionRecord, CellTable, ForwardOptions, ForwardOutput};
pub use params::{MiniPfnConfig, MiniPfnWeights, ModelParams, Tensor};

use crate::baselines::Predictor;
use crate::encoding::{EncodedTable, QueryTable};
use crate::error::Result;

/// Probabilities for every test row plus the row-attention record.
pub fn predict_in_context(weights: &MiniPfnWeights, train: &EncodedTable, test: &QueryTable) -> Result<(Vec<f64>, AttentionRecord)> {
    let table = CellTable::from_tables(train, test)?;
    let options = ForwardOptions {
        record_attention: true,
        ..Default::default()
    };
    let out = forward(&weights.params, &weights.config, &table, options)?;
    let probs = out.probabilities();
    Ok((probs, out.record.expect("attention was recorded")))
}

/// Top `k` context rows for one query row, by descending weight with ties
/// broken by ascending index.
pub fn explain(record: &AttentionRecord, query: usize, k: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = record.row(query).iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

/// In-context predictor; `prepare` does nothing.
#[derive(Debug, Clone)]
pub struct MiniPfn {
    weights: Arc<MiniPfnWeights>,
}

impl MiniPfn {
    pub fn new(weights: Arc<MiniPfnWeights>) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> &MiniPfnWeights {
        &self.weights
    }
}

impl Predictor for MiniPfn {
    fn name(&self) -> &str {
        "minipfn"
    }

    fn is_in_context(&self) -> bool {
        true
    }

    fn prepare(&mut self, _train: &EncodedTable) -> Result<()> {
        Ok(())
    }

    fn predict(&self, train: &EncodedTable, test: &QueryTable) -> Result<Vec<f64>> {
        let table = CellTable::from_tables(train, test)?;
        Ok(forward(&self.weights.params, &self.weights.config, &table, ForwardOptions::default())?.probabilities())
    }
}
