//! Dataset ingestion, pool sampling, hard-set filtering and RAG-bank
//! construction.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{validate_example, McqExample, RawRecord};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{} invalid line(s) in {path}:\n{}", .errors.len(), summarize(.errors))]
    InvalidLines { path: PathBuf, errors: Vec<LineError> },
    #[error("task `{task}` has {available} examples, {requested} requested")]
    InsufficientTask { task: String, available: usize, requested: usize },
    #[error("only {available} examples outside the pool, {requested} requested")]
    InsufficientRemainder { available: usize, requested: usize },
    #[error("result matrix has no cell for example `{example_id}`, model `{model}`")]
    IncompleteMatrix { example_id: String, model: String },
    #[error("result matrix {path}: {message}")]
    MatrixFormat { path: PathBuf, message: String },
}

fn summarize(errors: &[LineError]) -> String {
    errors.iter().map(|e| format!("  line {}: {}", e.line, e.message)).collect::<Vec<_>>().join("\n")
}

/// A validated dataset with the task and category labels it uses.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<McqExample>,
    pub tasks: BTreeSet<String>,
    pub categories: BTreeSet<String>,
}

impl Dataset {
    pub fn new(examples: Vec<McqExample>) -> Self {
        let tasks = examples.iter().map(|e| e.task_name.clone()).collect();
        let categories = examples.iter().map(|e| e.category.clone()).collect();
        Dataset { examples, tasks, categories }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Parses line-delimited records. Blank lines are skipped. Every bad line is
/// reported, not just the first.
pub fn parse_dataset(reader: impl BufRead, path: &Path) -> Result<Dataset, DatasetError> {
    let mut examples = Vec::new();
    let mut errors = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RawRecord>(&line)
            .map_err(|e| format!("malformed JSON: {e}"))
            .and_then(|raw| validate_example(raw).map_err(|e| e.to_string()));
        match parsed {
            Ok(ex) => {
                if let Some(first) = seen.get(&ex.id) {
                    errors.push(LineError {
                        line: line_no,
                        message: format!("duplicate id `{}` (first seen on line {first})", ex.id),
                    });
                } else {
                    seen.insert(ex.id.clone(), line_no);
                    examples.push(ex);
                }
            }
            Err(message) => errors.push(LineError { line: line_no, message }),
        }
    }
    if errors.is_empty() {
        Ok(Dataset::new(examples))
    } else {
        Err(DatasetError::InvalidLines { path: path.to_path_buf(), errors })
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    parse_dataset(BufReader::new(file), path)
}

pub fn write_dataset(mut w: impl Write, examples: &[McqExample]) -> io::Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, examples: &[McqExample]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let io_err = |source| DatasetError::Io { path: path.to_path_buf(), source };
    let mut file = io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    write_dataset(&mut file, examples).map_err(io_err)?;
    file.flush().map_err(io_err)
}

/// Groups examples by task, each group sorted by id so sampling does not
/// depend on input order.
fn by_task<'a>(examples: impl Iterator<Item = &'a McqExample>) -> BTreeMap<&'a str, Vec<&'a McqExample>> {
    let mut groups: BTreeMap<&str, Vec<&McqExample>> = BTreeMap::new();
    for ex in examples {
        groups.entry(&ex.task_name).or_default().push(ex);
    }
    for group in groups.values_mut() {
        group.sort_by(|a, b| a.id.cmp(&b.id));
    }
    groups
}

fn sorted_by_id(mut examples: Vec<McqExample>) -> Vec<McqExample> {
    examples.sort_by(|a, b| a.id.cmp(&b.id));
    examples
}

/// Draws `per_task` examples from every task without replacement.
pub fn sample_pool(dataset: &[McqExample], per_task: usize, seed: u64) -> Result<Vec<McqExample>, DatasetError> {
    let groups = by_task(dataset.iter());
    if let Some((task, group)) = groups.iter().find(|(_, g)| g.len() < per_task) {
        return Err(DatasetError::InsufficientTask {
            task: task.to_string(),
            available: group.len(),
            requested: per_task,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(groups.len() * per_task);
    for group in groups.values() {
        out.extend(index::sample(&mut rng, group.len(), per_task).into_iter().map(|i| group[i].clone()));
    }
    Ok(sorted_by_id(out))
}

/// Splits `target` across groups in proportion to their sizes, rounding by
/// largest remainder. Ties go to the larger group, then the earlier name.
pub fn allocate_largest_remainder(sizes: &[(&str, usize)], target: usize) -> Vec<usize> {
    let total: usize = sizes.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let mut quotas: Vec<usize> = sizes.iter().map(|(_, n)| target * n / total).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = target * sizes[a].1 % total;
        let rb = target * sizes[b].1 % total;
        rb.cmp(&ra).then(sizes[b].1.cmp(&sizes[a].1)).then(sizes[a].0.cmp(sizes[b].0))
    });
    let short = target - quotas.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        quotas[i] += 1;
    }
    quotas
}

/// Stratified sample of `target_size` examples from `dataset` minus `pool`.
pub fn build_rag_bank(
    dataset: &[McqExample],
    pool: &[McqExample],
    target_size: usize,
    seed: u64,
) -> Result<Vec<McqExample>, DatasetError> {
    let pool_ids: HashSet<&str> = pool.iter().map(|e| e.id.as_str()).collect();
    let groups = by_task(dataset.iter().filter(|e| !pool_ids.contains(e.id.as_str())));
    let available: usize = groups.values().map(Vec::len).sum();
    if available < target_size {
        return Err(DatasetError::InsufficientRemainder { available, requested: target_size });
    }
    let sizes: Vec<(&str, usize)> = groups.iter().map(|(t, g)| (*t, g.len())).collect();
    let quotas = allocate_largest_remainder(&sizes, target_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(target_size);
    for (group, quota) in groups.values().zip(quotas) {
        out.extend(index::sample(&mut rng, group.len(), quota).into_iter().map(|i| group[i].clone()));
    }
    assert!(out.iter().all(|e| !pool_ids.contains(e.id.as_str())), "rag bank overlaps the pool");
    Ok(sorted_by_id(out))
}

/// Per-example correctness of a panel of models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResultMatrix {
    #[serde(rename = "models")]
    pub model_names: Vec<String>,
    #[serde(rename = "results")]
    pub cells: BTreeMap<String, BTreeMap<String, bool>>,
}

impl ModelResultMatrix {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text)
            .map_err(|e| DatasetError::MatrixFormat { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn get(&self, example_id: &str, model: &str) -> Option<bool> {
        self.cells.get(example_id)?.get(model).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardSetSummary {
    pub pool_size: usize,
    pub min_wrong: usize,
    pub selected: usize,
    /// `(model, accuracy on the pool)` in matrix order.
    pub per_model_accuracy: Vec<(String, f64)>,
    /// Entry `i` counts pool examples answered wrongly by exactly `i` models.
    pub wrong_histogram: Vec<usize>,
}

impl HardSetSummary {
    pub fn render(&self) -> String {
        let mut out = format!(
            "hard set: {} of {} pool examples wrong for at least {} models\n",
            self.selected, self.pool_size, self.min_wrong
        );
        let width = self.per_model_accuracy.iter().map(|(m, _)| m.len()).max().unwrap_or(0);
        for (model, acc) in &self.per_model_accuracy {
            out.push_str(&format!("  {model:<width$}  {:6.2}%\n", acc * 100.0));
        }
        for (wrong, count) in self.wrong_histogram.iter().enumerate() {
            out.push_str(&format!("  wrong={wrong}: {count}\n"));
        }
        out
    }
}

/// Pool examples answered wrongly by at least `min_wrong` models, in pool
/// order.
pub fn build_hard_set(
    pool: &[McqExample],
    matrix: &ModelResultMatrix,
    min_wrong: usize,
) -> Result<(Vec<McqExample>, HardSetSummary), DatasetError> {
    let models = &matrix.model_names;
    let mut correct_per_model = vec![0usize; models.len()];
    let mut histogram = vec![0usize; models.len() + 1];
    let mut selected = Vec::new();
    for ex in pool {
        let mut wrong = 0;
        for (m, model) in models.iter().enumerate() {
            match matrix.get(&ex.id, model) {
                Some(true) => correct_per_model[m] += 1,
                Some(false) => wrong += 1,
                None => {
                    return Err(DatasetError::IncompleteMatrix { example_id: ex.id.clone(), model: model.clone() })
                }
            }
        }
        histogram[wrong] += 1;
        if wrong >= min_wrong {
            selected.push(ex.clone());
        }
    }
    let n = pool.len().max(1) as f64;
    let summary = HardSetSummary {
        pool_size: pool.len(),
        min_wrong,
        selected: selected.len(),
        per_model_accuracy: models.iter().cloned().zip(correct_per_model.iter().map(|c| *c as f64 / n)).collect(),
        wrong_histogram: histogram,
    };
    Ok((selected, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AnswerLetter;

    pub(crate) fn ex(id: &str, task: &str) -> McqExample {
        McqExample {
            id: id.into(),
            question: format!("question {id}"),
            options: AnswerLetter::ALL.iter().map(|l| (*l, format!("option {l}"))).collect(),
            gold_answer: AnswerLetter::A,
            gold_explanation: String::new(),
            task_name: task.into(),
            category: "cat".into(),
            images: vec![],
        }
    }

    fn line(id: &str, answer: &str) -> String {
        format!(
            r#"{{"id":"{id}","question":"q","options":{{"A":"a","B":"b","C":"c","D":"d"}},"answer":"{answer}","explanation":"","task":"t","category":"c","images":[]}}"#
        )
    }

    fn parse(text: &str) -> Result<Dataset, DatasetError> {
        parse_dataset(text.as_bytes(), Path::new("mem.jsonl"))
    }

    #[test]
    fn loads_valid_lines() {
        let text = [line("1", "A"), line("2", "B"), line("3", "D")].join("\n");
        let ds = parse(&text).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.tasks.len(), 1);
    }

    #[test]
    fn reports_line_numbers() {
        let bad = line("2", "A").replace(r#""answer":"A","#, "");
        let text = [line("1", "A"), bad, line("3", "E")].join("\n");
        match parse(&text) {
            Err(DatasetError::InvalidLines { errors, .. }) => {
                assert_eq!(errors.iter().map(|e| e.line).collect::<Vec<_>>(), vec![2, 3]);
                assert!(errors[0].message.contains("answer"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = [line("x", "A"), line("x", "B")].join("\n");
        let err = parse(&text).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("duplicate id `x`"), "{err}");
    }

    #[test]
    fn round_trips_through_writer() {
        let examples = vec![ex("a", "t1"), ex("b", "t2")];
        let mut buf = Vec::new();
        write_dataset(&mut buf, &examples).unwrap();
        assert_eq!(parse(std::str::from_utf8(&buf).unwrap()).unwrap().examples, examples);
    }

    fn tasks(spec: &[(&str, usize)]) -> Vec<McqExample> {
        spec.iter()
            .flat_map(|(t, n)| (0..*n).map(move |i| ex(&format!("{t}-{i:04}"), t)))
            .collect()
    }

    #[test]
    fn pool_sampling() {
        let data = tasks(&[("a", 700), ("b", 600), ("c", 650), ("d", 900), ("e", 601)]);
        let pool = sample_pool(&data, 600, 7).unwrap();
        assert_eq!(pool.len(), 3000);
        assert_eq!(pool, sample_pool(&data, 600, 7).unwrap());
        assert!(pool.windows(2).all(|w| w[0].id < w[1].id));
        let mut reversed = data.clone();
        reversed.reverse();
        assert_eq!(pool, sample_pool(&reversed, 600, 7).unwrap());
    }

    #[test]
    fn insufficient_task() {
        let data = tasks(&[("a", 3), ("b", 1)]);
        match sample_pool(&data, 2, 0) {
            Err(DatasetError::InsufficientTask { task, available: 1, requested: 2 }) => assert_eq!(task, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn allocation() {
        assert_eq!(allocate_largest_remainder(&[("a", 10), ("b", 10)], 10), vec![5, 5]);
        // 7.5 / 2.5: equal remainders, the larger task wins the spare slot
        assert_eq!(allocate_largest_remainder(&[("a", 30), ("b", 10)], 10), vec![8, 2]);
        assert_eq!(allocate_largest_remainder(&[("a", 1), ("b", 1), ("c", 1)], 2), vec![1, 1, 0]);
    }

    #[test]
    fn rag_bank_is_stratified_and_disjoint() {
        let data = tasks(&[("a", 40), ("b", 20)]);
        let pool = sample_pool(&data, 5, 1).unwrap();
        let bank = build_rag_bank(&data, &pool, 10, 3).unwrap();
        let count = |t: &str| bank.iter().filter(|e| e.task_name == t).count();
        // remainder is 35/15, quotas 7/3
        assert_eq!((count("a"), count("b")), (7, 3));
        assert!(bank.iter().all(|b| pool.iter().all(|p| p.id != b.id)));

        let uneven = tasks(&[("a", 30), ("b", 10)]);
        let bank = build_rag_bank(&uneven, &[], 10, 3).unwrap();
        assert_eq!(bank.iter().filter(|e| e.task_name == "a").count(), 8);
    }

    #[test]
    fn rag_bank_needs_remainder() {
        let data = tasks(&[("a", 4)]);
        assert!(matches!(
            build_rag_bank(&data, &data, 1, 0),
            Err(DatasetError::InsufficientRemainder { available: 0, requested: 1 })
        ));
    }

    fn matrix(rows: &[(&str, [bool; 5])]) -> ModelResultMatrix {
        let models: Vec<String> = (1..=5).map(|i| format!("m{i}")).collect();
        let cells = rows
            .iter()
            .map(|(id, row)| (id.to_string(), models.iter().cloned().zip(row.iter().copied()).collect()))
            .collect();
        ModelResultMatrix { model_names: models, cells }
    }

    #[test]
    fn hard_set_threshold() {
        let pool = vec![ex("x", "t"), ex("y", "t")];
        let m = matrix(&[("x", [false, false, false, true, true]), ("y", [false, false, true, true, true])]);
        let (hard, summary) = build_hard_set(&pool, &m, 3).unwrap();
        assert_eq!(hard.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), ["x"]);
        assert_eq!(summary.wrong_histogram, vec![0, 0, 1, 1, 0, 0]);
        assert_eq!(summary.per_model_accuracy[2].1, 0.5);
        assert!(summary.render().contains("1 of 2"));
    }

    #[test]
    fn incomplete_matrix() {
        let pool = vec![ex("x", "t"), ex("z", "t")];
        let m = matrix(&[("x", [true; 5])]);
        assert!(matches!(
            build_hard_set(&pool, &m, 3),
            Err(DatasetError::IncompleteMatrix { example_id, model }) if example_id == "z" && model == "m1"
        ));
    }
}
