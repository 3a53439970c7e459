//! Episode-based pretraining of MiniPFN with Adam, plus a finite-difference
//! gradient check of the hand-written backward pass.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{ModelKind, WeightsContainer};
use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::minipfn::{cross_entropy, forward, loss_and_grad, CellTable, ForwardOptions, MiniPfnConfig, MiniPfnWeights, ModelParams};
use crate::prior::{sample_kt_episode, EpisodeBatch, KTPriorParams, PriorConfig, Range};

/// Episodes averaged into one point of the loss curve.
pub const SMOOTHING_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub n_episodes: usize,
    pub batch_episodes: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Episodes between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            n_episodes: 10_000,
            batch_episodes: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 1_000,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_episodes > 0
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid training parameters: {self:?}")))
        }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &ModelParams<f32>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>, tp: &TrainParams) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - tp.beta1.powi(t);
        let c2 = 1.0 - tp.beta2.powi(t);
        let (b1, b2) = (tp.beta1 as f32, tp.beta2 as f32);
        let step_size = (tp.lr / c1) as f32;
        let c2 = c2 as f32;
        let eps = tp.eps as f32;
        let named = grads.named();
        for (((p, m), v), (_, g)) in params.tensors_mut().into_iter().zip(self.m.tensors_mut()).zip(self.v.tensors_mut()).zip(named) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                p.data[i] -= step_size * m.data[i] / ((v.data[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ModelParams<f32>, max_norm: f64) -> f64 {
    let norm = grads
        .named()
        .iter()
        .flat_map(|(_, t)| t.data.iter())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for t in grads.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One point of the smoothed loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub episode: usize,
    pub smoothed_loss: f64,
}

pub fn write_loss_curve<W: Write>(curve: &[LossPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "episode,smoothed_loss")?;
    for p in curve {
        writeln!(out, "{},{}", p.episode, p.smoothed_loss)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    config: MiniPfnConfig,
    prior: PriorConfig,
    train: TrainParams,
    episodes_done: usize,
    step: u64,
    window_sum: f64,
    window_count: usize,
    curve: Vec<LossPoint>,
}

/// Complete training state; resuming from it is bitwise equivalent to never stopping.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: MiniPfnConfig,
    pub prior: PriorConfig,
    pub train: TrainParams,
    pub params: ModelParams<f32>,
    pub adam: Adam,
    pub episodes_done: usize,
    pub curve: Vec<LossPoint>,
    window_sum: f64,
    window_count: usize,
}

impl Checkpoint {
    pub fn to_container(&self) -> WeightsContainer {
        let meta = CheckpointMeta {
            config: self.config,
            prior: self.prior,
            train: self.train,
            episodes_done: self.episodes_done,
            step: self.adam.step,
            window_sum: self.window_sum,
            window_count: self.window_count,
            curve: self.curve.clone(),
        };
        let mut tensors = self.params.to_named_tensors("param.");
        tensors.extend(self.adam.m.to_named_tensors("adam_m."));
        tensors.extend(self.adam.v.to_named_tensors("adam_v."));
        WeightsContainer::new(ModelKind::PretrainCheckpoint, &meta, tensors)
    }

    pub fn from_container(c: &WeightsContainer) -> Result<Self> {
        c.expect_kind(ModelKind::PretrainCheckpoint)?;
        let meta: CheckpointMeta = c.metadata()?;
        meta.config.validate()?;
        let mut params = ModelParams::init(&meta.config, 0);
        params.load_named_tensors(c, "param.")?;
        let mut m = params.zeros_like();
        m.load_named_tensors(c, "adam_m.")?;
        let mut v = params.zeros_like();
        v.load_named_tensors(c, "adam_v.")?;
        Ok(Self {
            config: meta.config,
            prior: meta.prior,
            train: meta.train,
            params,
            adam: Adam { m, v, step: meta.step },
            episodes_done: meta.episodes_done,
            curve: meta.curve,
            window_sum: meta.window_sum,
            window_count: meta.window_count,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&WeightsContainer::load(path)?)
    }

    pub fn weights(&self) -> MiniPfnWeights {
        MiniPfnWeights {
            config: self.config,
            params: self.params.clone(),
        }
    }
}

/// Side channels of a training run.
#[derive(Debug, Default)]
pub struct PretrainHooks<'a> {
    /// Written every `checkpoint_every` episodes and when stopping early.
    pub checkpoint_path: Option<PathBuf>,
    /// Checked between optimizer steps.
    pub stop: Option<&'a AtomicBool>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub weights: MiniPfnWeights,
    pub curve: Vec<LossPoint>,
    pub episodes_done: usize,
    pub stopped_early: bool,
    pub checkpoint: Checkpoint,
}

/// Seed of episode `index` in a run seeded with `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// Fresh training state.
pub fn initial_checkpoint(prior: PriorConfig, train: TrainParams, config: MiniPfnConfig) -> Result<Checkpoint> {
    config.validate()?;
    train.validate()?;
    let params = ModelParams::init(&config, derive_seed(train.seed, u64::MAX));
    let adam = Adam::new(&params);
    Ok(Checkpoint {
        config,
        prior,
        train,
        params,
        adam,
        episodes_done: 0,
        curve: Vec::new(),
        window_sum: 0.0,
        window_count: 0,
    })
}

fn episode_loss_and_grad(params: &ModelParams<f32>, config: &MiniPfnConfig, ep: &EpisodeBatch) -> Result<(f64, ModelParams<f32>)> {
    let table = CellTable::from_tables(&ep.context, &ep.query)?;
    loss_and_grad(params, config, &table, &ep.query_labels, ForwardOptions::default())
}

/// Train from scratch.
pub fn pretrain(prior: PriorConfig, train: TrainParams, config: MiniPfnConfig, hooks: &PretrainHooks<'_>) -> Result<PretrainOutcome> {
    resume(initial_checkpoint(prior, train, config)?, hooks)
}

/// Continue a run until `state.train.n_episodes` episodes have been consumed.
pub fn resume(mut state: Checkpoint, hooks: &PretrainHooks<'_>) -> Result<PretrainOutcome> {
    state.train.validate()?;
    state.config.check_width(state.prior.max_horizon())?;
    let tp = state.train;
    let mut stopped_early = false;
    while state.episodes_done < tp.n_episodes {
        if hooks.stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
            stopped_early = true;
            break;
        }
        let start = state.episodes_done;
        let end = (start + tp.batch_episodes).min(tp.n_episodes);
        let params = &state.params;
        let config = &state.config;
        let prior = &state.prior;
        let results: Vec<Result<(f64, ModelParams<f32>)>> = (start..end)
            .into_par_iter()
            .map(|e| {
                let ep = prior.sample(episode_seed(tp.seed, e))?;
                episode_loss_and_grad(params, config, &ep)
            })
            .collect();
        let mut total: Option<ModelParams<f32>> = None;
        for (offset, r) in results.into_iter().enumerate() {
            let episode = start + offset;
            let (loss, g) = r.map_err(|e| match e {
                Error::NonFiniteActivation { .. } => Error::NonFiniteLoss { episode: episode as u64 },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { episode: episode as u64 });
            }
            state.window_sum += loss;
            state.window_count += 1;
            if (episode + 1) % SMOOTHING_WINDOW == 0 {
                state.curve.push(LossPoint {
                    episode: episode + 1,
                    smoothed_loss: state.window_sum / state.window_count as f64,
                });
                state.window_sum = 0.0;
                state.window_count = 0;
            }
            match total.as_mut() {
                None => total = Some(g),
                Some(t) => {
                    for (dst, (_, src)) in t.tensors_mut().into_iter().zip(g.named()) {
                        for (a, &b) in dst.data.iter_mut().zip(&src.data) {
                            *a += b;
                        }
                    }
                }
            }
        }
        let mut grads = total.expect("batch is non-empty");
        let inv = 1.0 / (end - start) as f32;
        for t in grads.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= inv);
        }
        clip_grad_norm(&mut grads, tp.clip_norm);
        state.adam.update(&mut state.params, &grads, &tp);
        state.episodes_done = end;
        if !state.params.all_finite() {
            return Err(Error::Diverged { step: state.adam.step });
        }
        if let Some(path) = &hooks.checkpoint_path {
            if tp.checkpoint_every > 0 && end / tp.checkpoint_every > start / tp.checkpoint_every {
                state.save(path)?;
            }
        }
        if end % 1000 < tp.batch_episodes {
            log::info!(
                "episode {end}/{}: smoothed loss {}",
                tp.n_episodes,
                state.curve.last().map_or(f64::NAN, |p| p.smoothed_loss)
            );
        }
    }
    if stopped_early {
        if let Some(path) = &hooks.checkpoint_path {
            state.save(path)?;
        }
    }
    Ok(PretrainOutcome {
        weights: state.weights(),
        curve: state.curve.clone(),
        episodes_done: state.episodes_done,
        stopped_early,
        checkpoint: state,
    })
}

/// Mean query AUC and loss of `weights` on fresh prior episodes.
pub fn evaluate_on_prior(weights: &MiniPfnWeights, prior: &PriorConfig, seed: u64, n: usize) -> Result<Vec<EpisodeScore>> {
    (0..n)
        .map(|i| {
            let ep = prior.sample(episode_seed(seed, i))?;
            let table = CellTable::from_tables(&ep.context, &ep.query)?;
            let out = forward(&weights.params, &weights.config, &table, ForwardOptions::default())?;
            let probs = out.probabilities();
            let majority = crate::baselines::majority_predict(&ep.context, &ep.query);
            Ok(EpisodeScore {
                seed: ep.seed,
                auc: crate::metrics::auc(&probs, &ep.query_labels)?,
                majority_auc: crate::metrics::auc(&majority, &ep.query_labels)?,
                loss: cross_entropy(&out.logits, &ep.query_labels),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeScore {
    pub seed: u64,
    pub auc: f64,
    pub majority_auc: f64,
    pub loss: f64,
}

/// Small episode (four context rows, two query rows of both classes) for gradient checks.
pub fn grad_check_episode(seed: u64) -> Result<EpisodeBatch> {
    let prior = KTPriorParams {
        n_students: Range::new(10, 10),
        n_questions: Range::new(3, 5),
        n_skills: Range::new(1, 3),
        horizon: Range::new(3, 4),
        ..Default::default()
    };
    let mut ep = sample_kt_episode(&prior, seed)?;
    ep.context.rows.truncate(4);
    Ok(ep)
}

/// Largest `|g_a - g_n| / max(1, |g_a|, |g_n|)` over all parameters, comparing
/// the analytic gradient with central differences of half-width `step`, all in f64.
pub fn grad_check(config: &MiniPfnConfig, param_seed: u64, episode: &EpisodeBatch, step: f64, bypass_blocks: bool) -> Result<f64> {
    config.validate()?;
    let options = ForwardOptions {
        record_attention: false,
        bypass_blocks,
    };
    let table = CellTable::from_tables(&episode.context, &episode.query)?;
    let mut params: ModelParams<f64> = ModelParams::init(config, param_seed);
    let (_, analytic) = loss_and_grad(&params, config, &table, &episode.query_labels, options)?;
    let loss_at = |p: &ModelParams<f64>| -> Result<f64> { Ok(cross_entropy(&forward(p, config, &table, options)?.logits, &episode.query_labels)) };
    let analytic: Vec<f64> = analytic.named().iter().flat_map(|(_, t)| t.data.iter().copied()).collect();
    let mut worst = 0.0f64;
    let mut flat_index = 0;
    let n_tensors = params.named().len();
    for ti in 0..n_tensors {
        let len = params.named()[ti].1.data.len();
        for i in 0..len {
            let orig = params.tensors_mut()[ti].data[i];
            params.tensors_mut()[ti].data[i] = orig + step;
            let plus = loss_at(&params)?;
            params.tensors_mut()[ti].data[i] = orig - step;
            let minus = loss_at(&params)?;
            params.tensors_mut()[ti].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let ga = analytic[flat_index];
            let err = (ga - numeric).abs() / 1f64.max(ga.abs()).max(numeric.abs());
            worst = worst.max(err);
            flat_index += 1;
        }
    }
    Ok(worst)
}
