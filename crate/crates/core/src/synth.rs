//! Synthetic student datasets with a known ability/difficulty structure.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, CSV_HEADER};
use crate::prior::{simulate_students, Cohort, StudentModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_students: usize,
    pub n_questions: usize,
    pub n_skills: usize,
    pub sigma_theta: f64,
    pub sigma_d: f64,
    pub gamma: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_students: 1000,
            n_questions: 100,
            n_skills: 10,
            sigma_theta: 1.0,
            sigma_d: 1.0,
            gamma: 0.05,
            min_len: 10,
            max_len: 40,
            seed: 0,
        }
    }
}

/// Rasch-with-learning students, questions `q1..`, skills `k1..`, students `u1..`.
pub fn synth_dataset(p: &SynthParams) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let cohort = Cohort {
        n_students: p.n_students,
        n_questions: p.n_questions,
        n_skills: p.n_skills,
        sigma_theta: p.sigma_theta,
        sigma_d: p.sigma_d,
        model: StudentModel::RaschLearning { gamma: p.gamma },
        min_len: p.min_len.max(1),
        max_len: p.max_len,
    };
    let sequences = simulate_students(&cohort, &mut rng);
    Dataset::from_dense(sequences, p.n_questions.max(1) as u32, p.n_skills.max(1) as u32)
}

/// Interaction CSV with the step position as timestamp.
pub fn write_interactions_csv<W: Write>(dataset: &Dataset, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for (i, seq) in dataset.sequences.iter().enumerate() {
        let student = dataset.students.id_of(i as u32 + 1).unwrap_or("?");
        for (t, step) in seq.iter().enumerate() {
            let question = dataset.questions.id_of(step.question).unwrap_or("?");
            let skill = dataset.skill_id(step.skill).unwrap_or("");
            writeln!(out, "{student},{question},{skill},{},{t}", step.correct)?;
        }
    }
    Ok(())
}
