#![allow(dead_code)]

use livekt::baselines::{sigmoid, Predictor};
use livekt::data::{split_indices, split_students, Dataset, Split, Step, PAD};
use livekt::encoding::{build_row, build_tables, correct_code, EncodedTable, QueryTable};
use livekt::eval::{run_live_eval, LiveSchedule};
use livekt::gbdt::{base_log_odds, logistic_grad, split_gain, BinMapper, BinStat, FeatureBins, GbdtParams};
use livekt::minipfn::{explain, predict_in_context, MiniPfnWeights};
use livekt::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pairwise AUC: wins plus half the ties over all positive/negative pairs.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &yi) in labels.iter().enumerate() {
        if yi != 1 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Random AUC instance with at least one label of each class and scores
/// drawn from a small grid so ties are common.
pub fn random_auc_instance<R: Rng>(rng: &mut R) -> (Vec<f64>, Vec<u8>) {
    let n = rng.gen_range(2..=50);
    let grid = rng.gen_range(2..=10);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let scores = (0..n).map(|_| f64::from(rng.gen_range(0..grid)) / f64::from(grid)).collect();
    (scores, labels)
}

pub fn random_sequence<R: Rng>(rng: &mut R, max_len: usize, n_questions: u32, n_skills: u32) -> Vec<Step> {
    let len = rng.gen_range(0..=max_len);
    (0..len)
        .map(|_| Step {
            question: rng.gen_range(1..=n_questions),
            skill: rng.gen_range(1..=n_skills),
            correct: rng.gen_range(0..2),
        })
        .collect()
}

/// Students whose correctness depends on a per-student ability, so every
/// predictor has some signal to fit.
pub fn random_dataset<R: Rng>(rng: &mut R, n_students: usize, n_questions: u32, n_skills: u32) -> Dataset {
    let sequences = (0..n_students)
        .map(|_| {
            let ability: f64 = rng.gen_range(-1.5..1.5);
            let len = rng.gen_range(3..=24);
            (0..len)
                .map(|_| {
                    let question = rng.gen_range(1..=n_questions);
                    let difficulty = f64::from(question) / f64::from(n_questions) - 0.5;
                    Step {
                        question,
                        skill: (question - 1) % n_skills + 1,
                        correct: u8::from(rng.gen::<f64>() < sigmoid(ability - difficulty)),
                    }
                })
                .collect()
        })
        .collect();
    Dataset::from_dense(sequences, n_questions, n_skills)
}

/// Copy of `dataset` where every test student's interactions past the first
/// `horizon - 1` outcomes are rewritten: the held-out outcome at position
/// `horizon` is flipped and later interactions are replaced and extended.
pub fn perturb_beyond_horizon<R: Rng>(dataset: &Dataset, split: &Split, horizon: usize, rng: &mut R) -> Dataset {
    let mut out = dataset.clone();
    let nq = dataset.questions.len() as u32;
    let ns = dataset.skills.len() as u32;
    for (i, seq) in out.sequences.iter_mut().enumerate() {
        if !split.is_test(i as u32 + 1) || seq.len() < horizon {
            continue;
        }
        seq[horizon - 1].correct ^= 1;
        for step in seq.iter_mut().skip(horizon) {
            *step = Step {
                question: rng.gen_range(1..=nq),
                skill: rng.gen_range(1..=ns),
                correct: rng.gen_range(0..2),
            };
        }
        for _ in 0..rng.gen_range(0..4) {
            seq.push(Step {
                question: rng.gen_range(1..=nq),
                skill: rng.gen_range(1..=ns),
                correct: rng.gen_range(0..2),
            });
        }
    }
    out
}

/// Scalar gradient boosting that accumulates per-bin statistics straight from
/// the rows of each node, orders occupied bins by `G/H` (then bin id), takes
/// the first best prefix over features in ascending order, and checks every
/// choice against an exhaustive search over all two-way partitions of the
/// occupied bins. Returns train-row probabilities.
///
/// The exhaustive check needs `min_samples_leaf == 1`, where the best ordered
/// prefix and the best arbitrary partition coincide.
pub fn exact_split_gbdt(train: &EncodedTable, params: GbdtParams) -> Vec<f64> {
    assert_eq!(params.min_samples_leaf, 1);
    let labels = train.labels();
    let n = labels.len();
    let mapper = BinMapper::fit(train.rows.iter().map(|r| &r.features), train.width(), params.max_bins);
    let binned: Vec<Vec<u8>> = train.rows.iter().map(|r| mapper.bin_row(&r.features)).collect();
    let n_features = mapper.features.len();
    let n_bins: Vec<usize> = mapper.features.iter().map(FeatureBins::n_bins).collect();
    let mut raw = vec![base_log_odds(&labels); n];
    if labels.iter().all(|&y| y == labels[0]) {
        return raw.into_iter().map(sigmoid).collect();
    }
    for _ in 0..params.n_trees {
        let gh: Vec<(f64, f64)> = (0..n).map(|i| logistic_grad(raw[i], labels[i])).collect();
        let mut frontier: Vec<Vec<usize>> = vec![(0..n).collect()];
        let mut leaves: Vec<Vec<usize>> = Vec::new();
        for _ in 0..params.max_depth {
            let mut next = Vec::new();
            for rows in frontier {
                let pure = rows.iter().all(|&r| labels[r] == labels[rows[0]]);
                if rows.len() < 2 * params.min_samples_leaf || pure {
                    leaves.push(rows);
                    continue;
                }
                let mut best: Option<(f64, usize, Vec<bool>)> = None;
                let mut exhaustive_best: f64 = 0.0;
                for f in 0..n_features {
                    let mut per_bin = vec![BinStat::default(); n_bins[f]];
                    for &r in &rows {
                        let s = &mut per_bin[binned[r][f] as usize];
                        s.g += gh[r].0;
                        s.h += gh[r].1;
                        s.count += 1;
                    }
                    let mut occupied: Vec<usize> = (0..n_bins[f]).filter(|&b| per_bin[b].count > 0).collect();
                    let m = occupied.len();
                    if m < 2 {
                        continue;
                    }
                    exhaustive_best = exhaustive_best.max(best_partition_gain(&occupied, &per_bin, params.lambda_l2));
                    occupied.sort_by(|&a, &b| {
                        let ra = per_bin[a].g / per_bin[a].h;
                        let rb = per_bin[b].g / per_bin[b].h;
                        ra.partial_cmp(&rb).unwrap().then(a.cmp(&b))
                    });
                    let mut total = BinStat::default();
                    for &b in &occupied {
                        total.add(&per_bin[b]);
                    }
                    let mut left = BinStat::default();
                    for k in 1..m {
                        left.add(&per_bin[occupied[k - 1]]);
                        let right = BinStat { g: total.g - left.g, h: total.h - left.h, count: total.count - left.count };
                        let gain = split_gain(&left, &right, params.lambda_l2);
                        if gain > 0.0 && best.as_ref().map_or(true, |b| gain > b.0) {
                            let mut on_left = vec![false; n_bins[f]];
                            for &b in &occupied[..k] {
                                on_left[b] = true;
                            }
                            best = Some((gain, f, on_left));
                        }
                    }
                }
                let chosen = best.as_ref().map_or(0.0, |b| b.0);
                assert!(chosen >= exhaustive_best - 1e-9, "ordered scan {chosen} below exhaustive {exhaustive_best}");
                match best {
                    None => leaves.push(rows),
                    Some((_, f, on_left)) => {
                        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| on_left[binned[r][f] as usize]);
                        next.push(l);
                        next.push(r);
                    }
                }
            }
            frontier = next;
            if frontier.is_empty() {
                break;
            }
        }
        leaves.extend(frontier);
        for rows in leaves {
            let g: f64 = rows.iter().map(|&r| gh[r].0).sum();
            let h: f64 = rows.iter().map(|&r| gh[r].1).sum();
            let value = -g / (h + params.lambda_l2) * params.learning_rate;
            for r in rows {
                raw[r] += value;
            }
        }
    }
    raw.into_iter().map(sigmoid).collect()
}

/// Highest gain over every two-way partition of the occupied bins.
fn best_partition_gain(occupied: &[usize], per_bin: &[BinStat], lambda: f64) -> f64 {
    let m = occupied.len();
    assert!(m <= 16, "fixture feature has too many occupied bins");
    let mut best: f64 = 0.0;
    for mask in 0u32..(1 << (m - 1)) {
        let mut left = BinStat::default();
        let mut right = BinStat::default();
        for (k, &b) in occupied.iter().enumerate() {
            if k == 0 || mask & (1 << (k - 1)) != 0 {
                left.add(&per_bin[b]);
            } else {
                right.add(&per_bin[b]);
            }
        }
        if right.count > 0 {
            best = best.max(split_gain(&left, &right, lambda));
        }
    }
    best
}

/// Checks width, right alignment, PAD placement and the label of one row.
pub fn check_row_layout(seq: &[Step], horizon: usize, visible: usize) -> Result<(), String> {
    let row = build_row(seq, 1, horizon, visible).map_err(|e| e.to_string())?;
    let k = visible.min(horizon).min(seq.len());
    let Some(row) = row else {
        return if k < 2 { Ok(()) } else { Err(format!("row skipped with k={k}")) };
    };
    let f = &row.features;
    let t = horizon;
    if f.observed_len != k || f.width() != 3 * t - 1 || f.cells().count() != 3 * t - 1 {
        return Err(format!("width or observed_len wrong at T={t}, k={k}"));
    }
    let pad = t - k;
    for p in 0..t {
        if (f.questions[p] == PAD) != (p < pad) || (f.skills[p] == PAD) != (p < pad) {
            return Err(format!("PAD misplaced at position {p}"));
        }
    }
    for p in 0..t - 1 {
        if (f.past_correct[p] == PAD) != (p < pad) {
            return Err(format!("correctness PAD misplaced at position {p}"));
        }
    }
    for (j, s) in seq[..k].iter().enumerate() {
        if f.questions[pad + j] != s.question || f.skills[pad + j] != s.skill {
            return Err(format!("interaction {j} not right-aligned"));
        }
        if j + 1 < k && f.past_correct[pad + j] != correct_code(s.correct) {
            return Err(format!("correctness {j} not right-aligned"));
        }
    }
    if row.label != seq[k - 1].correct {
        return Err("label differs from the last used interaction".into());
    }
    Ok(())
}

/// Checks that one more visible interaction only shifts the row left and appends.
pub fn check_prefix(seq: &[Step], horizon: usize, visible: usize) -> Result<(), String> {
    let t = horizon;
    let (Some(a), Some(b)) = (
        build_row(seq, 1, t, visible).map_err(|e| e.to_string())?,
        build_row(seq, 1, t, visible + 1).map_err(|e| e.to_string())?,
    ) else {
        return Ok(());
    };
    let k = visible.min(t).min(seq.len());
    if k == (visible + 1).min(t).min(seq.len()) {
        return if a == b { Ok(()) } else { Err("saturated row changed".into()) };
    }
    let (fa, fb) = (&a.features, &b.features);
    let shifted = fa.questions[1..] == fb.questions[..t - 1]
        && fa.skills[1..] == fb.skills[..t - 1]
        && fa.past_correct[1..] == fb.past_correct[..t - 2]
        && fb.past_correct[t - 2] == correct_code(a.label)
        && fb.questions[t - 1] == seq[k].question
        && b.label == seq[k].correct;
    if shifted {
        Ok(())
    } else {
        Err(format!("prefix property broken at T={t}, visible={visible}"))
    }
}

/// Scores of one live-evaluation horizon keyed by student, as raw bits.
fn score_bits(predictor: &mut dyn Predictor, ds: &Dataset, split: &Split, t: usize) -> Vec<(u32, u64)> {
    let schedule = LiveSchedule::new(vec![t]).unwrap();
    let (_, records) = run_live_eval(predictor, ds, "fixture", split, &schedule).unwrap();
    records.iter().map(|r| (r.student_idx, r.score.to_bits())).collect()
}

/// Number of trials in which rewriting test students past the visible
/// horizon changed any prediction bit.
pub fn leakage_mismatches(make: &dyn Fn() -> Box<dyn Predictor>, trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let ds = random_dataset(&mut rng, 60, 15, 4);
        let split = split_students(&ds, 0.7, rng.gen()).unwrap();
        let t = [5usize, 10, 15, 20][rng.gen_range(0..4)];
        let perturbed = perturb_beyond_horizon(&ds, &split, t, &mut rng);
        assert_ne!(ds, perturbed);
        if score_bits(make().as_mut(), &ds, &split, t) != score_bits(make().as_mut(), &perturbed, &split, t) {
            bad += 1;
        }
    }
    bad
}

pub fn live_tables(seed: u64, n: usize, t: usize) -> (EncodedTable, QueryTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = random_dataset(&mut rng, n, 20, 5);
    let split = split_students(&ds, 0.75, seed).unwrap();
    let lt = build_tables(&ds, &split, t, t, t - 1).unwrap();
    (lt.train, lt.test)
}

/// Largest deviations seen by the MiniPFN invariance checks.
#[derive(Debug, Clone, Copy, Default)]
pub struct Invariances {
    pub permutation: f64,
    pub independence: f64,
    pub attention_sum: f64,
    pub single_row_exact: bool,
}

pub fn minipfn_invariances(w: &MiniPfnWeights, seed: u64) -> Invariances {
    let mut out = Invariances { single_row_exact: true, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in [5, 10, 20] {
        let (train, test) = live_tables(seed + t as u64, 80, t);
        let (base, record) = predict_in_context(w, &train, &test).unwrap();
        let mut shuffled = train.clone();
        shuffled.rows.shuffle(&mut rng);
        let (perm, _) = predict_in_context(w, &shuffled, &test).unwrap();
        for (a, b) in base.iter().zip(&perm) {
            out.permutation = out.permutation.max((a - b).abs());
        }
        for i in 0..test.rows.len() {
            let single = QueryTable { horizon: t, rows: vec![test.rows[i].clone()] };
            let (one, _) = predict_in_context(w, &train, &single).unwrap();
            out.independence = out.independence.max((one[0] - base[i]).abs());
        }
        for q in 0..record.n_query() {
            out.attention_sum = out.attention_sum.max((record.row(q).iter().sum::<f64>() - 1.0).abs());
        }
        let one = EncodedTable { horizon: t, rows: vec![train.rows[0].clone()] };
        let (_, rec1) = predict_in_context(w, &one, &test).unwrap();
        out.single_row_exact &= (0..rec1.n_query()).all(|q| rec1.row(q) == [1.0]);
    }
    out
}

/// Up to 100 rows over four interactions with an ability signal, for the
/// exact-split oracle.
pub fn gbdt_fixture(seed: u64, n: usize) -> EncodedTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = 4;
    let rows = (0..n)
        .map(|i| {
            let ability: f64 = rng.gen_range(-2.0..2.0);
            let seq: Vec<Step> = (0..rng.gen_range(2..=horizon))
                .map(|_| {
                    let question = rng.gen_range(1..=6u32);
                    Step {
                        question,
                        skill: (question - 1) % 3 + 1,
                        correct: u8::from(rng.gen::<f64>() < sigmoid(ability + 0.4 * f64::from(question) - 1.4)),
                    }
                })
                .collect();
            build_row(&seq, i as u32 + 1, horizon, horizon).unwrap().unwrap()
        })
        .collect();
    EncodedTable { horizon, rows }
}

/// Random students plus one train student that copies the first test
/// student's first `t` interactions.
pub fn clone_fixture(seed: u64, t: usize) -> (Dataset, Split, u32, u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seqs: Vec<Vec<Step>> = (0..60)
        .map(|_| {
            (0..rng.gen_range(t..t + 5))
                .map(|_| Step { question: rng.gen_range(1..=40), skill: rng.gen_range(1..=8), correct: rng.gen_range(0..2) })
                .collect()
        })
        .collect();
    let split = split_indices(seqs.len(), 0.8, seed).unwrap();
    let test_idx = (1..=seqs.len() as u32).find(|&i| split.is_test(i)).unwrap();
    let clone_idx = (1..=seqs.len() as u32).find(|&i| split.is_train(i)).unwrap();
    let mut copy = seqs[test_idx as usize - 1][..t].to_vec();
    copy.truncate(t);
    seqs[clone_idx as usize - 1] = copy;
    (Dataset::from_dense(seqs, 40, 8), split, test_idx, clone_idx)
}

/// One-based attention rank of the cloned train student for its test twin,
/// after checking that the explanation is sorted and sums to at most one.
pub fn clone_rank(w: &MiniPfnWeights, seed: u64, t: usize) -> usize {
    let (ds, split, test_idx, clone_idx) = clone_fixture(seed, t);
    let tables = build_tables(&ds, &split, t, t, t - 1).unwrap();
    let (_, record) = predict_in_context(w, &tables.train, &tables.test).unwrap();
    let q = tables.test.rows.iter().position(|r| r.student_idx == test_idx).unwrap();
    let all = explain(&record, q, record.n_context);
    let ws: Vec<f64> = all.iter().map(|x| x.1).collect();
    assert!(ws.windows(2).all(|p| p[0] >= p[1]));
    assert!(ws.iter().sum::<f64>() <= 1.0 + 1e-5);
    all.iter().position(|&(c, _)| tables.train.rows[c].features.student_idx == clone_idx).unwrap() + 1
}

pub fn is_frame_error(e: &Error) -> bool {
    matches!(
        e,
        Error::BadMagic { .. } | Error::ChecksumMismatch { .. } | Error::VersionMismatch { .. } | Error::Format(_)
    )
}

/// Flip one byte somewhere in the file, truncate it, or append junk.
pub fn corrupt(bytes: &[u8], rng: &mut ChaCha8Rng) -> (Vec<u8>, Option<usize>) {
    let mut out = bytes.to_vec();
    match rng.gen_range(0..4) {
        0 | 1 => {
            let i = rng.gen_range(0..out.len());
            out[i] ^= rng.gen_range(1..=255u8);
            (out, Some(i))
        }
        2 => {
            out.truncate(rng.gen_range(0..bytes.len()));
            (out, None)
        }
        _ => {
            out.extend((0..rng.gen_range(1..9)).map(|_| rng.gen::<u8>()));
            (out, None)
        }
    }
}

pub fn expected_kind(flipped: Option<usize>, e: &Error) {
    assert!(is_expected_kind(flipped, e), "{flipped:?}: {e:?}");
}

/// Whether `e` is the rejection expected for a corruption at `flipped`.
pub fn is_expected_kind(flipped: Option<usize>, e: &Error) -> bool {
    match flipped {
        Some(i) if i < 4 => matches!(e, Error::BadMagic { .. }),
        Some(i) if i < 8 => matches!(e, Error::VersionMismatch { .. }),
        Some(i) if i < 16 => matches!(e, Error::Format(_)),
        Some(_) => matches!(e, Error::ChecksumMismatch { .. }),
        None => is_frame_error(e),
    }
}
