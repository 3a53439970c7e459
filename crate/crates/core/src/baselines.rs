//! The uniform predictor contract plus the majority and logistic-regression baselines.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{ModelKind, NamedTensor, WeightsContainer};
use crate::data::PAD;
use crate::encoding::{EncodedTable, QueryTable, RowFeatures};
use crate::error::{Error, Result};
use crate::hash::mix64;

/// A model evaluated by the live harness.
///
/// `prepare` sees the labelled train table and may fit parameters; `predict`
/// receives the same train table again (in-context models read it there)
/// and returns `P(label = 1)` for each test row, in order.
pub trait Predictor {
    fn name(&self) -> &str;

    /// True when `prepare` does no work and all conditioning happens in `predict`.
    fn is_in_context(&self) -> bool {
        false
    }

    /// Passes over the train table made by one `prepare` call.
    fn epochs(&self) -> usize {
        1
    }

    fn prepare(&mut self, train: &EncodedTable) -> Result<()>;

    fn predict(&self, train: &EncodedTable, test: &QueryTable) -> Result<Vec<f64>>;
}

fn laplace(pos: u32, n: u32) -> f64 {
    (f64::from(pos) + 1.0) / (f64::from(n) + 2.0)
}

/// Per-question smoothed success rate, keyed on the question at the
/// prediction position, with the global smoothed rate as fallback.
#[derive(Debug, Clone, Default)]
pub struct Majority {
    by_question: HashMap<u32, (u32, u32)>,
    global: (u32, u32),
}

impl Majority {
    pub fn new() -> Self {
        Self::default()
    }

    fn fit(train: &EncodedTable) -> Self {
        let mut m = Majority::default();
        for row in &train.rows {
            let y = u32::from(row.label);
            let e = m.by_question.entry(row.features.last_question()).or_default();
            e.0 += y;
            e.1 += 1;
            m.global.0 += y;
            m.global.1 += 1;
        }
        m
    }

    fn score(&self, row: &RowFeatures) -> f64 {
        match self.by_question.get(&row.last_question()) {
            Some(&(pos, n)) => laplace(pos, n),
            None => laplace(self.global.0, self.global.1),
        }
    }
}

pub fn majority_predict(train: &EncodedTable, test: &QueryTable) -> Vec<f64> {
    let m = Majority::fit(train);
    test.rows.iter().map(|r| m.score(r)).collect()
}

impl Predictor for Majority {
    fn name(&self) -> &str {
        "majority"
    }

    fn prepare(&mut self, train: &EncodedTable) -> Result<()> {
        *self = Majority::fit(train);
        Ok(())
    }

    fn predict(&self, _train: &EncodedTable, test: &QueryTable) -> Result<Vec<f64>> {
        Ok(test.rows.iter().map(|r| self.score(r)).collect())
    }
}

/// Hashed slot of one categorical cell.
pub fn feature_slot(column: usize, code: u32, dim: usize, seed: u64) -> u32 {
    debug_assert!(dim.is_power_of_two());
    let key = ((column as u64) << 32) | u64::from(code);
    (mix64(seed ^ mix64(key)) & (dim as u64 - 1)) as u32
}

/// One slot per non-PAD cell, in column order.
pub fn featurize(row: &RowFeatures, dim: usize, seed: u64) -> Vec<u32> {
    row.cells()
        .enumerate()
        .filter(|&(_, code)| code != PAD)
        .map(|(j, code)| feature_slot(j, code, dim, seed))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrParams {
    /// Initial step size; step `t` uses `learning_rate / sqrt(t)`.
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for LrParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 3,
            l2: 1e-6,
            dim: 1 << 18,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrWeights {
    pub w: Vec<f32>,
    pub b: f32,
    pub params: LrParams,
    /// SGD steps taken so far; drives the step-size decay.
    pub steps: u64,
    /// Completed passes; seeds the next pass's shuffle.
    pub epochs_done: u64,
}

impl LrWeights {
    pub fn zeros(params: LrParams) -> Self {
        Self {
            w: vec![0.0; params.dim],
            b: 0.0,
            params,
            steps: 0,
            epochs_done: 0,
        }
    }

    fn logit(&self, slots: &[u32]) -> f64 {
        let s: f64 = slots.iter().map(|&i| f64::from(self.w[i as usize])).sum();
        s + f64::from(self.b)
    }

    pub fn to_container(&self) -> WeightsContainer {
        #[derive(Serialize)]
        struct Meta {
            params: LrParams,
            steps: u64,
            epochs_done: u64,
        }
        WeightsContainer::new(
            ModelKind::LogisticRegression,
            &Meta {
                params: self.params,
                steps: self.steps,
                epochs_done: self.epochs_done,
            },
            vec![
                NamedTensor::vector("w", self.w.clone()),
                NamedTensor::vector("b", vec![self.b]),
            ],
        )
    }

    pub fn from_container(c: &WeightsContainer) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            params: LrParams,
            steps: u64,
            epochs_done: u64,
        }
        c.expect_kind(ModelKind::LogisticRegression)?;
        let meta: Meta = c.metadata()?;
        let w = c.tensor("w")?.data.clone();
        if w.len() != meta.params.dim {
            return Err(Error::Format("weight length does not match dim".into()));
        }
        let b = *c
            .tensor("b")?
            .data
            .first()
            .ok_or_else(|| Error::Format("empty bias".into()))?;
        Ok(Self {
            w,
            b,
            params: meta.params,
            steps: meta.steps,
            epochs_done: meta.epochs_done,
        })
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sequential SGD on the logistic loss, continuing from `init` when given.
pub fn lr_fit(train: &EncodedTable, params: LrParams, init: Option<LrWeights>) -> Result<LrWeights> {
    if train.is_empty() {
        return Err(Error::EmptyTable { side: "train" });
    }
    if !params.dim.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "hash dimension must be a power of two, got {}",
            params.dim
        )));
    }
    let mut weights = match init {
        Some(w) if w.params.dim == params.dim && w.params.seed == params.seed => LrWeights { params, ..w },
        _ => LrWeights::zeros(params),
    };
    let rows: Vec<(Vec<u32>, f64)> = train
        .rows
        .iter()
        .map(|r| (featurize(&r.features, params.dim, params.seed), f64::from(r.label)))
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();

    for _ in 0..params.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(params.seed ^ mix64(weights.epochs_done + 1)));
        order.sort_unstable();
        order.shuffle(&mut rng);
        // w = scale * v keeps the L2 shrink O(1) per step
        let mut scale = 1.0f64;
        for &i in &order {
            let (slots, y) = &rows[i];
            weights.steps += 1;
            let lr = params.learning_rate / (weights.steps as f64).sqrt();
            let z: f64 = scale * slots.iter().map(|&k| f64::from(weights.w[k as usize])).sum::<f64>()
                + f64::from(weights.b);
            let g = sigmoid(z) - y;
            scale *= 1.0 - lr * params.l2;
            if scale <= 0.0 {
                return Err(Error::Diverged { step: weights.steps });
            }
            let delta = (lr * g / scale) as f32;
            for &k in slots {
                weights.w[k as usize] -= delta;
                if !weights.w[k as usize].is_finite() {
                    return Err(Error::Diverged { step: weights.steps });
                }
            }
            weights.b -= (lr * g) as f32;
            if !weights.b.is_finite() {
                return Err(Error::Diverged { step: weights.steps });
            }
        }
        if scale != 1.0 {
            for w in &mut weights.w {
                *w = (f64::from(*w) * scale) as f32;
            }
        }
        weights.epochs_done += 1;
    }
    Ok(weights)
}

pub fn lr_predict(weights: &LrWeights, test: &QueryTable) -> Vec<f64> {
    test.rows
        .iter()
        .map(|r| sigmoid(weights.logit(&featurize(r, weights.params.dim, weights.params.seed))))
        .collect()
}

/// Mean logistic loss plus `l2/2 * |w|^2`.
pub fn lr_loss(weights: &LrWeights, table: &EncodedTable) -> f64 {
    let scores = lr_predict(weights, &table.to_query());
    let data: f64 = scores
        .iter()
        .zip(&table.rows)
        .map(|(&p, r)| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            if r.label == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / table.n_rows() as f64;
    let norm: f64 = weights.w.iter().map(|&w| f64::from(w) * f64::from(w)).sum();
    data + 0.5 * weights.params.l2 * norm
}

/// Logistic regression on hashed categorical cells.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    pub params: LrParams,
    /// Continue from the previous `prepare` instead of refitting from zero.
    pub warm_start: bool,
    weights: Option<LrWeights>,
}

impl LogisticRegression {
    pub fn new(params: LrParams) -> Self {
        Self {
            params,
            warm_start: false,
            weights: None,
        }
    }

    pub fn weights(&self) -> Option<&LrWeights> {
        self.weights.as_ref()
    }
}

impl Predictor for LogisticRegression {
    fn name(&self) -> &str {
        "lr"
    }

    fn epochs(&self) -> usize {
        self.params.epochs
    }

    fn prepare(&mut self, train: &EncodedTable) -> Result<()> {
        let init = if self.warm_start { self.weights.take() } else { None };
        self.weights = Some(lr_fit(train, self.params, init)?);
        Ok(())
    }

    fn predict(&self, _train: &EncodedTable, test: &QueryTable) -> Result<Vec<f64>> {
        let w = self
            .weights
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("lr: predict called before prepare".into()))?;
        Ok(lr_predict(w, test))
    }
}
