//! Fixed-width tabular encoding of student histories.
//!
//! A row at horizon `T` holds the question codes `q1..qT`, skill codes
//! `s1..sT` and correctness codes `c1..c{T-1}`; the label is `cT`. Histories
//! shorter than `T` are right-aligned so the most recent interaction always
//! sits in the last position, and the leading cells hold [`PAD`].

use std::io::Write;

use crate::data::{Dataset, Split, Step, PAD};
use crate::error::{Error, Result};

/// Correctness code of an incorrect answer.
pub const INCORRECT: u32 = 1;
/// Correctness code of a correct answer.
pub const CORRECT: u32 = 2;

pub fn correct_code(correct: u8) -> u32 {
    u32::from(correct) + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColumnFamily {
    Question,
    Skill,
    Correct,
}

impl ColumnFamily {
    pub fn index(self) -> u32 {
        match self {
            ColumnFamily::Question => 0,
            ColumnFamily::Skill => 1,
            ColumnFamily::Correct => 2,
        }
    }
}

/// Number of feature cells in a row at horizon `T`.
pub fn feature_width(horizon: usize) -> usize {
    3 * horizon - 1
}

/// Family of feature column `j` and its lag behind the label position
/// (`qT` and `sT` have lag 0, `c{T-1}` has lag 1).
pub fn column_info(horizon: usize, j: usize) -> (ColumnFamily, usize) {
    debug_assert!(j < feature_width(horizon));
    if j < horizon {
        (ColumnFamily::Question, horizon - 1 - j)
    } else if j < 2 * horizon {
        (ColumnFamily::Skill, 2 * horizon - 1 - j)
    } else {
        (ColumnFamily::Correct, 3 * horizon - 1 - j)
    }
}

/// Feature cells of one student row; the label is kept elsewhere.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RowFeatures {
    pub student_idx: u32,
    /// Number of real (non-PAD) positions, `2..=T`.
    pub observed_len: usize,
    pub questions: Vec<u32>,
    pub skills: Vec<u32>,
    /// Length `T - 1`, codes in `{PAD, INCORRECT, CORRECT}`.
    pub past_correct: Vec<u32>,
}

impl RowFeatures {
    pub fn horizon(&self) -> usize {
        self.questions.len()
    }

    pub fn width(&self) -> usize {
        feature_width(self.horizon())
    }

    /// Cell `j` in `q1..qT, s1..sT, c1..c{T-1}` order.
    pub fn cell(&self, j: usize) -> u32 {
        let t = self.horizon();
        if j < t {
            self.questions[j]
        } else if j < 2 * t {
            self.skills[j - t]
        } else {
            self.past_correct[j - 2 * t]
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = u32> + '_ {
        self.questions
            .iter()
            .chain(&self.skills)
            .chain(&self.past_correct)
            .copied()
    }

    /// Question code at the prediction position.
    pub fn last_question(&self) -> u32 {
        *self.questions.last().expect("horizon >= 2")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedRow {
    pub features: RowFeatures,
    pub label: u8,
}

/// Labelled rows sharing one horizon.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EncodedTable {
    pub horizon: usize,
    pub rows: Vec<EncodedRow>,
}

impl EncodedTable {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        feature_width(self.horizon)
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// The same rows with labels withheld.
    pub fn to_query(&self) -> QueryTable {
        QueryTable {
            horizon: self.horizon,
            rows: self.rows.iter().map(|r| r.features.clone()).collect(),
        }
    }

    /// Debug dump: `q1..qT,s1..sT,c1..c{T-1},label`, PAD rendered as 0.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let t = self.horizon;
        let mut header: Vec<String> = Vec::with_capacity(3 * t);
        header.extend((1..=t).map(|i| format!("q{i}")));
        header.extend((1..=t).map(|i| format!("s{i}")));
        header.extend((1..t).map(|i| format!("c{i}")));
        header.push("label".into());
        writeln!(out, "{}", header.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row
                .features
                .cells()
                .map(|c| c.to_string())
                .chain(std::iter::once(row.label.to_string()))
                .collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Rows whose labels are held out from the predictor.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QueryTable {
    pub horizon: usize,
    pub rows: Vec<RowFeatures>,
}

impl QueryTable {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Encode the first `min(visible, T, len)` interactions of `sequence`.
///
/// Returns `Ok(None)` when fewer than two interactions are usable.
pub fn build_row(
    sequence: &[Step],
    student_idx: u32,
    horizon: usize,
    visible: usize,
) -> Result<Option<EncodedRow>> {
    if horizon < 2 {
        return Err(Error::InvalidArgument(format!(
            "horizon must be at least 2, got {horizon}"
        )));
    }
    let k = visible.min(horizon).min(sequence.len());
    if k < 2 {
        return Ok(None);
    }
    let used = &sequence[..k];
    let offset = horizon - k;
    let mut questions = vec![PAD; horizon];
    let mut skills = vec![PAD; horizon];
    let mut past_correct = vec![PAD; horizon - 1];
    for (i, step) in used.iter().enumerate() {
        questions[offset + i] = step.question;
        skills[offset + i] = step.skill;
        if i + 1 < k {
            past_correct[offset + i] = correct_code(step.correct);
        }
    }
    Ok(Some(EncodedRow {
        features: RowFeatures {
            student_idx,
            observed_len: k,
            questions,
            skills,
            past_correct,
        },
        label: used[k - 1].correct,
    }))
}

/// Train and test tables for one point of the live schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiveTables {
    pub train: EncodedTable,
    pub test: QueryTable,
    /// Held-out correctness for each test row, in row order.
    pub test_labels: Vec<u8>,
    pub skipped_train: Vec<u32>,
    pub skipped_test: Vec<u32>,
}

/// Encode train students with `visible_train` observed interactions and test
/// students with `visible_test` observed outcomes; each test row additionally
/// exposes the question and skill of interaction `visible_test + 1`, whose
/// correctness becomes the held-out label.
pub fn build_tables(
    dataset: &Dataset,
    split: &Split,
    horizon: usize,
    visible_train: usize,
    visible_test: usize,
) -> Result<LiveTables> {
    let mut train = EncodedTable {
        horizon,
        rows: Vec::with_capacity(split.train_students.len()),
    };
    let mut skipped_train = Vec::new();
    for &s in &split.train_students {
        match build_row(dataset.sequence(s), s, horizon, visible_train)? {
            Some(row) => train.rows.push(row),
            None => skipped_train.push(s),
        }
    }
    let mut test = QueryTable {
        horizon,
        rows: Vec::with_capacity(split.test_students.len()),
    };
    let mut test_labels = Vec::with_capacity(split.test_students.len());
    let mut skipped_test = Vec::new();
    for &s in &split.test_students {
        match build_row(dataset.sequence(s), s, horizon, visible_test + 1)? {
            Some(row) => {
                test.rows.push(row.features);
                test_labels.push(row.label);
            }
            None => skipped_test.push(s),
        }
    }
    if train.is_empty() {
        return Err(Error::EmptyTable { side: "train" });
    }
    if test.is_empty() {
        return Err(Error::EmptyTable { side: "test" });
    }
    Ok(LiveTables {
        train,
        test,
        test_labels,
        skipped_train,
        skipped_test,
    })
}
