//! Interaction logs, dense vocabularies, student splits and dataset statistics.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};

/// Header every interaction CSV must start with.
pub const CSV_HEADER: &str = "student_id,question_id,skill_id,correct,timestamp";
const COLUMNS: [&str; 5] = ["student_id", "question_id", "skill_id", "correct", "timestamp"];

/// Dense index reserved for padding in every vocabulary.
pub const PAD: u32 = 0;

pub const DATASET_MAGIC: [u8; 4] = *b"LKTD";
pub const DATASET_VERSION: u32 = 1;

/// One graded attempt as read from the input file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub student: String,
    pub question: String,
    pub skill: Option<String>,
    pub correct: u8,
    pub timestamp: Option<i64>,
    /// Zero-based position of the row in the body of the file.
    pub line_index: usize,
}

impl Interaction {
    /// Timestamp when present, input position otherwise.
    pub fn order_key(&self) -> i64 {
        self.timestamp.unwrap_or(self.line_index as i64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub interactions: Vec<Interaction>,
    /// Rows dropped by the lenient parser.
    pub skipped_rows: usize,
}

impl InteractionLog {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

/// Parse an interaction CSV, failing on the first malformed row.
pub fn parse_interactions<R: Read>(reader: R) -> Result<InteractionLog> {
    parse_with(reader, false)
}

/// Parse an interaction CSV, dropping malformed rows and counting them in
/// [`InteractionLog::skipped_rows`]. A missing header is still an error.
pub fn parse_interactions_lenient<R: Read>(reader: R) -> Result<InteractionLog> {
    parse_with(reader, true)
}

fn parse_with<R: Read>(reader: R, lenient: bool) -> Result<InteractionLog> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();

    let header = match records.next() {
        Some(Ok(rec)) => rec,
        Some(Err(e)) => {
            let line = e.position().map_or(1, |p| p.line() as usize);
            return Err(Error::MissingHeader {
                line,
                expected: CSV_HEADER,
            });
        }
        None => {
            return Err(Error::MissingHeader {
                line: 1,
                expected: CSV_HEADER,
            })
        }
    };
    let header_ok = header.len() == COLUMNS.len()
        && header
            .iter()
            .zip(COLUMNS)
            .all(|(got, want)| got.trim_start_matches('\u{feff}') == want);
    if !header_ok {
        return Err(Error::MissingHeader {
            line: 1,
            expected: CSV_HEADER,
        });
    }

    let mut log = InteractionLog::default();
    let mut line_index = 0usize;
    for rec in records {
        let result = match rec {
            Ok(rec) => {
                let line = rec.position().map_or(0, |p| p.line() as usize);
                if rec.len() == 1 && rec.get(0) == Some("") {
                    continue;
                }
                parse_row(&rec, line, line_index)
            }
            Err(e) => Err(Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                column: "student_id",
                message: e.to_string(),
            }),
        };
        match result {
            Ok(it) => log.interactions.push(it),
            Err(e) if lenient => {
                log::warn!("skipping malformed row: {e}");
                log.skipped_rows += 1;
            }
            Err(e) => return Err(e),
        }
        line_index += 1;
    }
    if log.skipped_rows > 0 {
        log::warn!("{} malformed rows skipped", log.skipped_rows);
    }
    Ok(log)
}

fn parse_row(rec: &csv::StringRecord, line: usize, line_index: usize) -> Result<Interaction> {
    if rec.len() != COLUMNS.len() {
        let column = COLUMNS.get(rec.len()).copied().unwrap_or("timestamp");
        return Err(Error::Parse {
            line,
            column,
            message: format!("expected {} fields, found {}", COLUMNS.len(), rec.len()),
        });
    }
    let field = |i: usize| rec.get(i).unwrap_or("");
    let required = |i: usize| -> Result<String> {
        let v = field(i);
        if v.is_empty() {
            Err(Error::Parse {
                line,
                column: COLUMNS[i],
                message: "empty value".into(),
            })
        } else {
            Ok(v.to_string())
        }
    };
    let student = required(0)?;
    let question = required(1)?;
    let skill = Some(field(2)).filter(|s| !s.is_empty()).map(str::to_string);
    let correct = match field(3) {
        "0" => 0,
        "1" => 1,
        other => {
            return Err(Error::Parse {
                line,
                column: COLUMNS[3],
                message: format!("correct must be 0 or 1, found `{other}`"),
            })
        }
    };
    let timestamp = match field(4) {
        "" => None,
        raw => Some(raw.parse::<i64>().map_err(|_| Error::Parse {
            line,
            column: COLUMNS[4],
            message: format!("timestamp must be an integer, found `{raw}`"),
        })?),
    };
    Ok(Interaction {
        student,
        question,
        skill,
        correct,
        timestamp,
        line_index,
    })
}

/// Bijection between external string IDs and dense indices starting at 1.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    ids: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut v = Vocab::new();
        for id in ids {
            if v.lookup.contains_key(&id) {
                return Err(Error::Format(format!("duplicate vocabulary entry `{id}`")));
            }
            v.intern(&id);
        }
        Ok(v)
    }

    /// Index of `id`, assigning the next free index on first sight.
    pub fn intern(&mut self, id: &str) -> u32 {
        if let Some(&idx) = self.lookup.get(id) {
            return idx;
        }
        self.ids.push(id.to_string());
        let idx = self.ids.len() as u32;
        self.lookup.insert(id.to_string(), idx);
        idx
    }

    pub fn index_of(&self, id: &str) -> Option<u32> {
        self.lookup.get(id).copied()
    }

    pub fn id_of(&self, idx: u32) -> Option<&str> {
        if idx == PAD {
            return None;
        }
        self.ids.get(idx as usize - 1).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// One interaction after remapping to dense indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Step {
    pub question: u32,
    pub skill: u32,
    pub correct: u8,
}

/// Students with their time-ordered, densely indexed interaction sequences.
///
/// `sequences[i]` belongs to the student with dense index `i + 1`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub students: Vocab,
    pub questions: Vocab,
    pub skills: Vocab,
    /// Dense index used for interactions without a skill; always `skills.len() + 1`.
    pub no_skill: Option<u32>,
    pub sequences: Vec<Vec<Step>>,
}

impl Dataset {
    pub fn n_students(&self) -> usize {
        self.sequences.len()
    }

    pub fn sequence(&self, student_idx: u32) -> &[Step] {
        &self.sequences[student_idx as usize - 1]
    }

    /// Size of the skill code space including the no-skill category.
    pub fn skill_codes(&self) -> usize {
        self.skills.len() + usize::from(self.no_skill.is_some())
    }

    /// External skill ID for a dense skill index; `None` for the no-skill category.
    pub fn skill_id(&self, idx: u32) -> Option<&str> {
        if Some(idx) == self.no_skill {
            None
        } else {
            self.skills.id_of(idx)
        }
    }

    /// Builds a dataset from already dense sequences, naming every entity by
    /// its index. Used by the synthetic generators.
    pub fn from_dense(sequences: Vec<Vec<Step>>, n_questions: u32, n_skills: u32) -> Self {
        let names = |prefix: &str, n: u32| {
            Vocab::from_ids((1..=n).map(|i| format!("{prefix}{i}")).collect())
                .expect("generated names are unique")
        };
        Dataset {
            students: names("u", sequences.len() as u32),
            questions: names("q", n_questions),
            skills: names("k", n_skills),
            no_skill: None,
            sequences,
        }
    }

    /// Serialize into the versioned, checksummed `LKTD` container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = ByteWriter::default();
        for vocab in [&self.students, &self.questions, &self.skills] {
            body.u32(vocab.len() as u32);
            for id in vocab.ids() {
                body.str(id);
            }
        }
        body.u32(u32::from(self.no_skill.is_some()));
        body.u32(self.sequences.len() as u32);
        for seq in &self.sequences {
            body.u32(seq.len() as u32);
            for step in seq {
                body.u32(step.question);
                body.u32(step.skill);
                body.u8(step.correct);
            }
        }
        container::frame(DATASET_MAGIC, DATASET_VERSION, &body.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = container::unframe(bytes, DATASET_MAGIC, DATASET_VERSION)?;
        let mut r = ByteReader::new(body);
        let mut vocabs = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = r.u32()? as usize;
            let mut ids = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                ids.push(r.str()?);
            }
            vocabs.push(Vocab::from_ids(ids)?);
        }
        let skills = vocabs.pop().unwrap_or_default();
        let questions = vocabs.pop().unwrap_or_default();
        let students = vocabs.pop().unwrap_or_default();
        let no_skill = match r.u32()? {
            0 => None,
            1 => Some(skills.len() as u32 + 1),
            other => return Err(Error::Format(format!("bad no-skill flag {other}"))),
        };
        let n_seq = r.u32()? as usize;
        if n_seq != students.len() {
            return Err(Error::Format(format!(
                "{n_seq} sequences for {} students",
                students.len()
            )));
        }
        let n_skill_codes = skills.len() as u32 + u32::from(no_skill.is_some());
        let mut sequences = Vec::with_capacity(n_seq);
        for _ in 0..n_seq {
            let len = r.u32()? as usize;
            if len == 0 {
                return Err(Error::Format("empty student sequence".into()));
            }
            let mut seq = Vec::with_capacity(len.min(1 << 20));
            for _ in 0..len {
                let step = Step {
                    question: r.u32()?,
                    skill: r.u32()?,
                    correct: r.u8()?,
                };
                if step.question == PAD
                    || step.question as usize > questions.len()
                    || step.skill == PAD
                    || step.skill > n_skill_codes
                    || step.correct > 1
                {
                    return Err(Error::Format("interaction index out of range".into()));
                }
                seq.push(step);
            }
            sequences.push(seq);
        }
        r.finish()?;
        Ok(Dataset {
            students,
            questions,
            skills,
            no_skill,
            sequences,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Assign dense indices in first-appearance order and sort each student's
/// interactions stably by order key.
pub fn remap_ids(log: &InteractionLog) -> Result<Dataset> {
    if log.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build a dataset from an empty interaction log".into(),
        ));
    }
    let mut students = Vocab::new();
    let mut questions = Vocab::new();
    let mut skills = Vocab::new();
    let mut any_missing_skill = false;
    for it in &log.interactions {
        students.intern(&it.student);
        questions.intern(&it.question);
        match &it.skill {
            Some(s) => {
                skills.intern(s);
            }
            None => any_missing_skill = true,
        }
    }
    let no_skill = any_missing_skill.then(|| skills.len() as u32 + 1);

    // (order key, input position, step) per student
    let mut keyed: Vec<Vec<(i64, usize, Step)>> = vec![Vec::new(); students.len()];
    for (pos, it) in log.interactions.iter().enumerate() {
        let s = students.index_of(&it.student).expect("interned above");
        let question = questions.index_of(&it.question).expect("interned above");
        let skill = match &it.skill {
            Some(k) => skills.index_of(k).expect("interned above"),
            None => no_skill.expect("missing skill seen"),
        };
        keyed[s as usize - 1].push((
            it.order_key(),
            pos,
            Step {
                question,
                skill,
                correct: it.correct,
            },
        ));
    }
    let sequences = keyed
        .into_iter()
        .map(|mut seq| {
            seq.sort_by_key(|&(key, pos, _)| (key, pos));
            seq.into_iter().map(|(_, _, step)| step).collect()
        })
        .collect();
    Ok(Dataset {
        students,
        questions,
        skills,
        no_skill,
        sequences,
    })
}

/// Partition of dense student indices into train and test sides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    /// Ascending.
    pub train_students: Vec<u32>,
    /// Ascending.
    pub test_students: Vec<u32>,
    pub seed: u64,
}

impl Split {
    pub fn is_train(&self, student_idx: u32) -> bool {
        self.train_students.binary_search(&student_idx).is_ok()
    }

    pub fn is_test(&self, student_idx: u32) -> bool {
        self.test_students.binary_search(&student_idx).is_ok()
    }
}

/// Number of students sent to the train side: `round(ratio * n)` kept within
/// `1..=n-1` so neither side is empty.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Seeded shuffle of all students; the first `train_count` go to train.
pub fn split_students(dataset: &Dataset, ratio: f64, seed: u64) -> Result<Split> {
    split_indices(dataset.n_students(), ratio, seed)
}

pub fn split_indices(n_students: usize, ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    if n_students < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 students to split, got {n_students}"
        )));
    }
    let mut order: Vec<u32> = (1..=n_students as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = train_count(n_students, ratio);
    let mut train_students = order[..n_train].to_vec();
    let mut test_students = order[n_train..].to_vec();
    train_students.sort_unstable();
    test_students.sort_unstable();
    Ok(Split {
        train_students,
        test_students,
        seed,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub n_students: usize,
    pub n_questions: usize,
    /// Distinct real skill IDs; the no-skill category is not counted.
    pub n_skills: usize,
    pub n_interactions: usize,
}

pub fn dataset_stats(dataset: &Dataset) -> Stats {
    Stats {
        n_students: dataset.n_students(),
        n_questions: dataset.questions.len(),
        n_skills: dataset.skills.len(),
        n_interactions: dataset.sequences.iter().map(Vec::len).sum(),
    }
}

impl std::fmt::Display for Stats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "students={} questions={} skills={} interactions={}",
            self.n_students, self.n_questions, self.n_skills, self.n_interactions
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<InteractionLog> {
        parse_interactions(text.as_bytes())
    }

    #[test]
    fn empty_body_parses_to_empty_log() {
        let log = parse(&format!("{CSV_HEADER}\n")).unwrap();
        assert!(log.is_empty());
    }

    #[test]
    fn three_rows_keep_input_order() {
        let log = parse(&format!("{CSV_HEADER}\na,q1,k1,1,\na,q2,k1,0,\na,q3,,1,\n")).unwrap();
        let corrects: Vec<u8> = log.interactions.iter().map(|i| i.correct).collect();
        assert_eq!(corrects, vec![1, 0, 1]);
        assert_eq!(log.interactions[2].skill, None);
        assert_eq!(log.interactions[1].order_key(), 1);
    }

    #[test]
    fn missing_header_is_an_error() {
        assert!(matches!(parse(""), Err(Error::MissingHeader { .. })));
        assert!(matches!(
            parse("a,q1,k1,1,\n"),
            Err(Error::MissingHeader { .. })
        ));
    }

    #[test]
    fn bad_correct_names_line_and_column() {
        let err = parse(&format!("{CSV_HEADER}\na,q1,k1,1,\na,q2,k1,2,\n")).unwrap_err();
        match err {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "correct");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_timestamp_and_field_count() {
        let err = parse(&format!("{CSV_HEADER}\na,q1,k1,1,yesterday\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { column: "timestamp", .. }));
        let err = parse(&format!("{CSV_HEADER}\na,q1,k1\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, column: "correct", .. }));
    }

    #[test]
    fn lenient_parse_drops_malformed_rows() {
        let text = format!("{CSV_HEADER}\na,q1,k1,1,\nb,q1,k1,7,\na,q2,k1,0,\n");
        let log = parse_interactions_lenient(text.as_bytes()).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log.skipped_rows, 1);
        let ds = remap_ids(&log).unwrap();
        // student b only appeared in the malformed row
        assert_eq!(ds.n_students(), 1);
    }

    #[test]
    fn single_interaction_gets_index_one() {
        let ds = remap_ids(&parse(&format!("{CSV_HEADER}\na,q9,k4,1,\n")).unwrap()).unwrap();
        assert_eq!(ds.sequences, vec![vec![Step { question: 1, skill: 1, correct: 1 }]]);
        let ds = remap_ids(&parse(&format!("{CSV_HEADER}\na,q9,,1,\n")).unwrap()).unwrap();
        assert_eq!(ds.sequences[0][0].skill, 1);
        assert_eq!(ds.no_skill, Some(1));
        assert_eq!(ds.skill_id(1), None);
    }

    #[test]
    fn shared_question_shares_index() {
        let text = format!("{CSV_HEADER}\na,x,k,1,\nb,y,k,0,\nb,x,k,1,\n");
        let ds = remap_ids(&parse(&text).unwrap()).unwrap();
        assert_eq!(ds.sequence(1)[0].question, ds.sequence(2)[1].question);
        assert_ne!(ds.sequence(2)[0].question, ds.sequence(2)[1].question);
    }

    #[test]
    fn no_skill_is_last_entry() {
        let text = format!("{CSV_HEADER}\na,x,,1,\na,y,k1,0,\nb,z,k2,1,\n");
        let ds = remap_ids(&parse(&text).unwrap()).unwrap();
        assert_eq!(ds.skills.len(), 2);
        assert_eq!(ds.no_skill, Some(3));
        assert_eq!(ds.sequence(1)[0].skill, 3);
    }

    #[test]
    fn shuffled_timestamps_match_sorted_input() {
        let sorted = format!(
            "{CSV_HEADER}\na,q1,k1,1,10\na,q2,k1,0,20\nb,q1,k1,0,5\na,q3,k2,1,30\nb,q3,k2,1,7\n"
        );
        let shuffled = format!(
            "{CSV_HEADER}\na,q1,k1,1,10\nb,q1,k1,0,5\na,q3,k2,1,30\nb,q3,k2,1,7\na,q2,k1,0,20\n"
        );
        let a = remap_ids(&parse(&sorted).unwrap()).unwrap();
        let b = remap_ids(&parse(&shuffled).unwrap()).unwrap();
        let external = |ds: &Dataset| -> Vec<Vec<(String, u8)>> {
            ds.sequences
                .iter()
                .map(|seq| {
                    seq.iter()
                        .map(|s| (ds.questions.id_of(s.question).unwrap().to_string(), s.correct))
                        .collect()
                })
                .collect()
        };
        assert_eq!(external(&a), external(&b));
    }

    #[test]
    fn equal_timestamps_keep_input_order() {
        let text = format!("{CSV_HEADER}\na,q2,k,1,5\na,q1,k,0,5\n");
        let ds = remap_ids(&parse(&text).unwrap()).unwrap();
        assert_eq!(ds.questions.id_of(ds.sequence(1)[0].question), Some("q2"));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let split = split_indices(10, 0.8, 7).unwrap();
        assert_eq!(split.train_students.len(), 8);
        assert_eq!(split.test_students.len(), 2);
        assert_eq!(split, split_indices(10, 0.8, 7).unwrap());
        assert!(split_indices(10, 1.0, 7).is_err());
        assert!(split_indices(10, 0.0, 7).is_err());
        assert!(split_indices(1, 0.5, 7).is_err());
    }

    #[test]
    fn every_student_reaches_test_for_some_seed() {
        let mut seen = [false; 5];
        for seed in 0..1000 {
            for &s in &split_indices(5, 0.8, seed).unwrap().test_students {
                seen[s as usize - 1] = true;
            }
        }
        assert!(seen.iter().all(|&x| x));
    }

    #[test]
    fn stats_count_by_hand() {
        assert_eq!(dataset_stats(&Dataset::default()), Stats::default());
        let text = format!(
            "{CSV_HEADER}\na,q1,k1,1,\na,q2,k1,0,\nb,q1,,1,\nb,q3,k2,0,\nb,q1,k1,1,\nc,q2,k2,1,\nc,q4,k3,0,\n"
        );
        let stats = dataset_stats(&remap_ids(&parse(&text).unwrap()).unwrap());
        assert_eq!(
            stats,
            Stats { n_students: 3, n_questions: 4, n_skills: 3, n_interactions: 7 }
        );
    }

    #[test]
    fn container_rejects_csv_bytes() {
        let err = Dataset::from_bytes(CSV_HEADER.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
    }
}
