//! Synthetic task generators used to pretrain MiniPFN.
//!
//! The knowledge-tracing prior simulates students answering questions under
//! either a Rasch model with a learning term or a two-state mastery model.
//! The structural prior pushes latent vectors through a random two-layer
//! network and discretizes the inputs into categories.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::sigmoid;
use crate::data::Step;
use crate::encoding::{build_row, feature_width, EncodedRow, EncodedTable, QueryTable, RowFeatures, CORRECT, INCORRECT};
use crate::error::{Error, Result};
use crate::hash::derive_seed;

/// Resampling attempts before a degenerate episode becomes an error.
pub const MAX_ATTEMPTS: u64 = 10;

/// Share of an episode's students placed in the context table.
pub const CONTEXT_RATIO: f64 = 0.8;

/// Inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range<T> {
    pub lo: T,
    pub hi: T,
}

impl<T> Range<T> {
    pub const fn new(lo: T, hi: T) -> Self {
        Self { lo, hi }
    }
}

impl Range<usize> {
    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.gen_range(self.lo..=self.hi)
    }
}

impl Range<f64> {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KTPriorParams {
    pub n_students: Range<usize>,
    pub n_questions: Range<usize>,
    pub n_skills: Range<usize>,
    pub horizon: Range<usize>,
    /// Standard deviation of student ability.
    pub sigma_theta: Range<f64>,
    /// Standard deviation of question difficulty.
    pub sigma_d: Range<f64>,
    /// Logit gain per earlier attempt on the same skill.
    pub gamma: Range<f64>,
    pub slip: Range<f64>,
    pub guess: Range<f64>,
    pub p_learn: Range<f64>,
    pub p_init: Range<f64>,
    /// Probability that an episode uses the mastery model instead of Rasch.
    pub bkt_weight: f64,
}

impl Default for KTPriorParams {
    fn default() -> Self {
        Self {
            n_students: Range::new(24, 72),
            n_questions: Range::new(4, 40),
            n_skills: Range::new(1, 8),
            horizon: Range::new(5, 20),
            sigma_theta: Range::new(0.5, 1.5),
            sigma_d: Range::new(0.5, 1.5),
            gamma: Range::new(0.0, 0.3),
            slip: Range::new(0.02, 0.2),
            guess: Range::new(0.1, 0.35),
            p_learn: Range::new(0.05, 0.3),
            p_init: Range::new(0.1, 0.6),
            bkt_weight: 0.3,
        }
    }
}

impl KTPriorParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("invalid prior parameter: {what}")));
        for (name, r) in [
            ("n_students", self.n_students),
            ("n_questions", self.n_questions),
            ("n_skills", self.n_skills),
            ("horizon", self.horizon),
        ] {
            if r.lo > r.hi || r.lo == 0 {
                return bad(name);
            }
        }
        if self.n_students.lo < 2 {
            return bad("n_students must allow a context and a query row");
        }
        if self.horizon.lo < 2 {
            return bad("horizon");
        }
        for (name, r, lo, hi) in [
            ("sigma_theta", self.sigma_theta, 0.0, f64::INFINITY),
            ("sigma_d", self.sigma_d, 0.0, f64::INFINITY),
            ("gamma", self.gamma, 0.0, f64::INFINITY),
            ("slip", self.slip, 0.0, 0.5),
            ("guess", self.guess, 0.0, 0.5),
            ("p_learn", self.p_learn, 0.0, 1.0),
            ("p_init", self.p_init, 0.0, 1.0),
        ] {
            let upper_ok = if hi == 0.5 { r.hi < hi } else { r.hi <= hi };
            if !(r.lo <= r.hi && r.lo >= lo && upper_ok && r.lo.is_finite() && r.hi.is_finite()) {
                return bad(name);
            }
        }
        if !(0.0..=1.0).contains(&self.bkt_weight) {
            return bad("bkt_weight");
        }
        Ok(())
    }
}

/// Structural prior; off by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScmPriorParams {
    pub n_rows: Range<usize>,
    pub horizon: Range<usize>,
    pub hidden: usize,
    pub weight_scale: f64,
    /// Largest number of categories per input column.
    pub max_categories: usize,
}

impl Default for ScmPriorParams {
    fn default() -> Self {
        Self {
            n_rows: Range::new(24, 72),
            horizon: Range::new(5, 20),
            hidden: 16,
            weight_scale: 1.0,
            max_categories: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub kt: KTPriorParams,
    pub scm: ScmPriorParams,
    /// Probability of drawing a structural episode instead of a KT one.
    pub scm_weight: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            kt: KTPriorParams::default(),
            scm: ScmPriorParams::default(),
            scm_weight: 0.0,
        }
    }
}

impl PriorConfig {
    pub fn sample(&self, seed: u64) -> Result<EpisodeBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5052));
        if self.scm_weight > 0.0 && rng.gen_bool(self.scm_weight.min(1.0)) {
            sample_scm_episode(&self.scm, seed)
        } else {
            sample_kt_episode(&self.kt, seed)
        }
    }

    pub fn max_horizon(&self) -> usize {
        if self.scm_weight > 0.0 {
            self.kt.horizon.hi.max(self.scm.horizon.hi)
        } else {
            self.kt.horizon.hi
        }
    }
}

/// One pretraining task.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub context: EncodedTable,
    pub query: QueryTable,
    pub query_labels: Vec<u8>,
    /// Seed that produced this episode after any resampling.
    pub seed: u64,
}

impl EpisodeBatch {
    pub fn horizon(&self) -> usize {
        self.context.horizon
    }
}

/// Parameters of one simulated cohort.
#[derive(Debug, Clone, PartialEq)]
pub enum StudentModel {
    /// `p = sigmoid(theta - d_q + gamma * prior attempts on skill(q))`.
    RaschLearning { gamma: f64 },
    /// Per-skill mastery that switches on with `p_learn` after each attempt.
    Mastery { slip: f64, guess: f64, p_learn: f64, p_init: f64 },
}

/// Rasch-with-learning correctness probability.
pub fn rasch_probability(theta: f64, difficulty: f64, gamma: f64, prior_attempts: u32) -> f64 {
    sigmoid(theta - difficulty + gamma * f64::from(prior_attempts))
}

/// Simulation settings for [`simulate_students`].
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub n_students: usize,
    pub n_questions: usize,
    pub n_skills: usize,
    pub sigma_theta: f64,
    pub sigma_d: f64,
    pub model: StudentModel,
    pub min_len: usize,
    pub max_len: usize,
}

/// Dense sequences (questions `1..=n_questions`, skills `1..=n_skills`).
pub fn simulate_students(cohort: &Cohort, rng: &mut ChaCha8Rng) -> Vec<Vec<Step>> {
    let nq = cohort.n_questions.max(1);
    let ns = cohort.n_skills.max(1);
    let skill_of: Vec<u32> = (0..nq)
        .map(|q| if q < ns { q as u32 + 1 } else { rng.gen_range(1..=ns as u32) })
        .collect();
    let difficulty: Vec<f64> = (0..nq).map(|_| cohort.sigma_d * sample_normal(rng)).collect();
    (0..cohort.n_students)
        .map(|_| {
            let theta = cohort.sigma_theta * sample_normal(rng);
            let len = rng.gen_range(cohort.min_len..=cohort.max_len.max(cohort.min_len));
            let mut attempts = vec![0u32; ns + 1];
            let mastered: Vec<bool> = match cohort.model {
                StudentModel::Mastery { p_init, .. } => (0..=ns).map(|_| rng.gen_bool(p_init)).collect(),
                StudentModel::RaschLearning { .. } => vec![false; ns + 1],
            };
            let mut mastered = mastered;
            (0..len)
                .map(|_| {
                    let q = rng.gen_range(0..nq);
                    let skill = skill_of[q];
                    let k = skill as usize;
                    let p = match cohort.model {
                        StudentModel::RaschLearning { gamma } => rasch_probability(theta, difficulty[q], gamma, attempts[k]),
                        StudentModel::Mastery { slip, guess, p_learn, .. } => {
                            let p = if mastered[k] { 1.0 - slip } else { guess };
                            if !mastered[k] && rng.gen_bool(p_learn) {
                                mastered[k] = true;
                            }
                            p
                        }
                    };
                    attempts[k] += 1;
                    Step {
                        question: q as u32 + 1,
                        skill,
                        correct: u8::from(rng.gen_bool(p.clamp(0.0, 1.0))),
                    }
                })
                .collect()
        })
        .collect()
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random distinct codes so no particular code value carries meaning.
fn random_codes(n: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut codes = std::collections::BTreeSet::new();
    while codes.len() < n {
        codes.insert(rng.gen_range(3..1_000_000u32));
    }
    let mut codes: Vec<u32> = codes.into_iter().collect();
    codes.shuffle(rng);
    codes
}

fn split_rows(rows: Vec<EncodedRow>, horizon: usize, rng: &mut ChaCha8Rng, seed: u64) -> Option<EpisodeBatch> {
    let n = rows.len();
    if n < 2 {
        return None;
    }
    let mut rows = rows;
    rows.shuffle(rng);
    let n_ctx = crate::data::train_count(n, CONTEXT_RATIO);
    let query_rows = rows.split_off(n_ctx);
    let query_labels: Vec<u8> = query_rows.iter().map(|r| r.label).collect();
    if query_labels.iter().all(|&y| y == query_labels[0]) {
        return None;
    }
    Some(EpisodeBatch {
        context: EncodedTable { horizon, rows },
        query: QueryTable {
            horizon,
            rows: query_rows.into_iter().map(|r| r.features).collect(),
        },
        query_labels,
        seed,
    })
}

fn kt_attempt(params: &KTPriorParams, seed: u64) -> Result<Option<EpisodeBatch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = params.horizon.sample(&mut rng);
    let model = if rng.gen_bool(params.bkt_weight) {
        StudentModel::Mastery {
            slip: params.slip.sample(&mut rng),
            guess: params.guess.sample(&mut rng),
            p_learn: params.p_learn.sample(&mut rng),
            p_init: params.p_init.sample(&mut rng),
        }
    } else {
        StudentModel::RaschLearning {
            gamma: params.gamma.sample(&mut rng),
        }
    };
    let cohort = Cohort {
        n_students: params.n_students.sample(&mut rng),
        n_questions: params.n_questions.sample(&mut rng),
        n_skills: params.n_skills.sample(&mut rng),
        sigma_theta: params.sigma_theta.sample(&mut rng),
        sigma_d: params.sigma_d.sample(&mut rng),
        model,
        min_len: 2,
        max_len: 2 * horizon,
    };
    let sequences = simulate_students(&cohort, &mut rng);
    let q_codes = random_codes(cohort.n_questions, &mut rng);
    let s_codes = random_codes(cohort.n_skills, &mut rng);
    let mut rows = Vec::with_capacity(sequences.len());
    for (i, seq) in sequences.iter().enumerate() {
        let relabelled: Vec<Step> = seq
            .iter()
            .map(|s| Step {
                question: q_codes[s.question as usize - 1],
                skill: s_codes[s.skill as usize - 1],
                correct: s.correct,
            })
            .collect();
        if let Some(row) = build_row(&relabelled, i as u32 + 1, horizon, horizon)? {
            rows.push(row);
        }
    }
    Ok(split_rows(rows, horizon, &mut rng, seed))
}

fn with_retries(seed: u64, mut attempt: impl FnMut(u64) -> Result<Option<EpisodeBatch>>) -> Result<EpisodeBatch> {
    for i in 0..MAX_ATTEMPTS {
        if let Some(ep) = attempt(seed.wrapping_add(i))? {
            return Ok(ep);
        }
    }
    Err(Error::DegenerateEpisode {
        seed,
        attempts: MAX_ATTEMPTS as u32,
    })
}

/// Simulated knowledge-tracing episode, split into context and query rows.
/// A query set with a single class is resampled from `seed + 1`, `seed + 2`, ...
pub fn sample_kt_episode(params: &KTPriorParams, seed: u64) -> Result<EpisodeBatch> {
    params.validate()?;
    with_retries(seed, |s| kt_attempt(params, s))
}

fn scm_attempt(params: &ScmPriorParams, seed: u64) -> Result<Option<EpisodeBatch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = params.horizon.sample(&mut rng);
    let n = params.n_rows.sample(&mut rng);
    let width = feature_width(horizon);
    let hidden = params.hidden.max(1);
    let w_dist = Normal::new(0.0, params.weight_scale.max(0.0) / (width as f64).sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let w1: Vec<f64> = (0..hidden * width).map(|_| w_dist.sample(&mut rng)).collect();
    let w2: Vec<f64> = (0..hidden).map(|_| params.weight_scale * sample_normal(&mut rng)).collect();
    let latent: Vec<Vec<f64>> = (0..n).map(|_| (0..width).map(|_| sample_normal(&mut rng)).collect()).collect();
    let scores: Vec<f64> = latent
        .iter()
        .map(|x| {
            (0..hidden)
                .map(|h| w2[h] * w1[h * width..(h + 1) * width].iter().zip(x).map(|(a, b)| a * b).sum::<f64>().tanh())
                .sum()
        })
        .collect();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };

    // per-column cut points on the standard normal scale
    let max_cat = params.max_categories.max(2);
    let cuts: Vec<Vec<f64>> = (0..width)
        .map(|j| {
            let k = if j >= 2 * horizon { 2 } else { rng.gen_range(2..=max_cat) };
            let mut c: Vec<f64> = (0..k - 1).map(|_| sample_normal(&mut rng)).collect();
            c.sort_by(f64::total_cmp);
            c
        })
        .collect();
    let offsets: Vec<u32> = (0..width).map(|_| rng.gen_range(0..1000u32) * 16).collect();
    let rows: Vec<EncodedRow> = latent
        .iter()
        .zip(&scores)
        .enumerate()
        .map(|(i, (x, &s))| {
            let code = |j: usize| -> u32 {
                let bin = cuts[j].iter().filter(|&&c| x[j] > c).count() as u32;
                if j >= 2 * horizon {
                    if bin == 0 { INCORRECT } else { CORRECT }
                } else {
                    offsets[j] + bin + 1
                }
            };
            EncodedRow {
                features: RowFeatures {
                    student_idx: i as u32 + 1,
                    observed_len: horizon,
                    questions: (0..horizon).map(code).collect(),
                    skills: (horizon..2 * horizon).map(code).collect(),
                    past_correct: (2 * horizon..width).map(code).collect(),
                },
                label: u8::from(s > median),
            }
        })
        .collect();
    Ok(split_rows(rows, horizon, &mut rng, seed))
}

/// Episode from the structural prior; labels are `score > median`.
pub fn sample_scm_episode(params: &ScmPriorParams, seed: u64) -> Result<EpisodeBatch> {
    if params.n_rows.lo < 2 || params.n_rows.lo > params.n_rows.hi || params.horizon.lo < 2 || params.horizon.lo > params.horizon.hi {
        return Err(Error::InvalidArgument("invalid structural prior ranges".into()));
    }
    with_retries(seed, |s| scm_attempt(params, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_ability_and_difficulty_give_half() {
        for theta in [-2.0, 0.0, 1.3] {
            assert_eq!(rasch_probability(theta, theta, 0.0, 7), 0.5);
        }
    }

    #[test]
    fn learning_gain_after_three_attempts() {
        let p = rasch_probability(0.0, 0.0, 1.0, 3);
        assert!((p - 0.952_574_126_822_433_4).abs() < 1e-12);
    }

    #[test]
    fn kt_episode_is_deterministic() {
        let p = KTPriorParams::default();
        let a = sample_kt_episode(&p, 42).unwrap();
        let b = sample_kt_episode(&p, 42).unwrap();
        assert_eq!(a, b);
        assert!(!a.context.rows.is_empty());
        assert_eq!(a.query.rows.len(), a.query_labels.len());
        assert!(a.query_labels.contains(&0) && a.query_labels.contains(&1));
    }

    #[test]
    fn scm_episode_is_deterministic() {
        let p = ScmPriorParams::default();
        assert_eq!(sample_scm_episode(&p, 3).unwrap(), sample_scm_episode(&p, 3).unwrap());
    }

    #[test]
    fn zero_weights_exhaust_retries() {
        let p = ScmPriorParams {
            weight_scale: 0.0,
            ..Default::default()
        };
        assert!(matches!(sample_scm_episode(&p, 1), Err(Error::DegenerateEpisode { attempts: 10, .. })));
    }

    #[test]
    fn scm_labels_are_balanced() {
        let p = ScmPriorParams::default();
        let (mut pos, mut total) = (0usize, 0usize);
        for seed in 0..100 {
            let ep = sample_scm_episode(&p, seed).unwrap();
            for y in ep.context.labels().into_iter().chain(ep.query_labels) {
                pos += usize::from(y);
                total += 1;
            }
        }
        let rate = pos as f64 / total as f64;
        assert!((0.45..=0.55).contains(&rate), "positive rate {rate}");
    }

    #[test]
    fn invalid_slip_rejected() {
        let p = KTPriorParams {
            slip: Range::new(0.1, 0.5),
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
