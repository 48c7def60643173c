//! Synthetic datasets (copy, reverse, parity) and TSV ingestion.
//!
//! Token id layout is fixed: 0 = padding, 1 = begin, 2 = end, 3 = unknown,
//! content ids from 4 up. Generators draw content ids only; the special ids
//! are added at batching time.

use crate::error::{Error, Result};
use crate::rng::{StreamPurpose, TrainRng};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const FIRST_CONTENT: usize = 4;

/// The token whose occurrence count (mod 2) labels a parity example.
pub const PARITY_TOKEN: usize = FIRST_CONTENT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    #[serde(alias = "parity-pattern")]
    ParityPattern,
    #[serde(alias = "tsv-classification")]
    TsvClassification,
}

impl TaskKind {
    pub fn is_seq2seq(self) -> bool {
        matches!(self, TaskKind::Copy | TaskKind::Reverse)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ParityPattern => "parity_pattern",
            TaskKind::TsvClassification => "tsv_classification",
        };
        write!(f, "{s}")
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "parity_pattern" => Ok(TaskKind::ParityPattern),
            "tsv_classification" => Ok(TaskKind::TsvClassification),
            other => Err(Error::config(
                "task",
                format!("unknown task `{other}` (known: copy, reverse, parity_pattern, tsv_classification)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<usize>,
    /// Output id sequence for seq2seq tasks; a single class id otherwise.
    pub target: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub task: TaskKind,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub eval: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < FIRST_CONTENT + 1 {
            return Err(Error::config(
                "vocab",
                format!(
                    "vocab {} leaves no content ids after the reserved pad/bos/eos/unk block",
                    self.vocab
                ),
            ));
        }
        if self.min_len == 0 {
            return Err(Error::config("min_len", "sequences must be nonempty"));
        }
        if self.max_len < self.min_len {
            return Err(Error::config(
                "max_len",
                format!("max_len {} below min_len {}", self.max_len, self.min_len),
            ));
        }
        if self.train == 0 {
            return Err(Error::config("train_examples", "need at least one training example"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub task: TaskKind,
    pub vocab: usize,
    pub classes: usize,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

// ── Generators ──────────────────────────────────────────────────────────────

pub fn parity_label(input: &[usize]) -> usize {
    input.iter().filter(|t| **t == PARITY_TOKEN).count() % 2
}

fn draw_input(spec: &DatasetSpec, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    (0..len).map(|_| rng.random_range(FIRST_CONTENT..spec.vocab)).collect()
}

fn attempt_budget(total: usize) -> usize {
    200 * total + 1000
}

fn budget_error(total: usize) -> Error {
    Error::contract(
        "generate",
        format!(
            "could not draw {total} distinct examples in {} attempts; \
             widen the length range or vocab",
            attempt_budget(total)
        ),
    )
}

/// Distinct-input generation for the seq2seq tasks: the first `train` draws
/// form the training split, the rest evaluation, so the splits are disjoint
/// by construction.
fn gen_seq2seq(spec: &DatasetSpec, make_target: impl Fn(&[usize]) -> Vec<usize>) -> Result<Dataset> {
    spec.validate()?;
    let rng = TrainRng::new(spec.seed);
    let mut r = rng.stream(StreamPurpose::Data, [0; 4]);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let total = spec.train + spec.eval;
    let mut examples = Vec::with_capacity(total);
    for attempt in 0.. {
        if examples.len() == total {
            break;
        }
        if attempt >= attempt_budget(total) {
            return Err(budget_error(total));
        }
        let input = draw_input(spec, &mut r);
        if !seen.insert(input.clone()) {
            continue;
        }
        examples.push(Example { target: make_target(&input), input });
    }
    let eval = examples.split_off(spec.train);
    Ok(Dataset { task: spec.task, vocab: spec.vocab, classes: spec.vocab, train: examples, eval })
}

/// Seq2seq identity task: the target repeats the input.
pub fn gen_copy(spec: &DatasetSpec) -> Result<Dataset> {
    gen_seq2seq(spec, |input| input.to_vec())
}

/// Seq2seq reversal task: the target is the input backwards.
pub fn gen_reverse(spec: &DatasetSpec) -> Result<Dataset> {
    gen_seq2seq(spec, |input| input.iter().rev().copied().collect())
}

/// Binary classification: the label is the parity of occurrences of
/// `PARITY_TOKEN`. Both splits are balanced exactly by stratified filling
/// (odd sizes give the extra slot to class 0); inputs are distinct across
/// everything, so the splits stay disjoint.
pub fn gen_parity_pattern(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let rng = TrainRng::new(spec.seed);
    let mut r = rng.stream(StreamPurpose::Data, [0; 4]);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut train_quota = [spec.train - spec.train / 2, spec.train / 2];
    let mut eval_quota = [spec.eval - spec.eval / 2, spec.eval / 2];
    let mut train = Vec::with_capacity(spec.train);
    let mut eval = Vec::with_capacity(spec.eval);
    let total = spec.train + spec.eval;
    for attempt in 0.. {
        if train_quota == [0, 0] && eval_quota == [0, 0] {
            break;
        }
        if attempt >= attempt_budget(total) {
            return Err(budget_error(total));
        }
        let input = draw_input(spec, &mut r);
        if seen.contains(&input) {
            continue;
        }
        let label = parity_label(&input);
        let ex = Example { input, target: vec![label] };
        if train_quota[label] > 0 {
            train_quota[label] -= 1;
            seen.insert(ex.input.clone());
            train.push(ex);
        } else if eval_quota[label] > 0 {
            eval_quota[label] -= 1;
            seen.insert(ex.input.clone());
            eval.push(ex);
        }
    }
    Ok(Dataset { task: spec.task, vocab: spec.vocab, classes: 2, train, eval })
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec.task {
        TaskKind::Copy => gen_copy(spec),
        TaskKind::Reverse => gen_reverse(spec),
        TaskKind::ParityPattern => gen_parity_pattern(spec),
        TaskKind::TsvClassification => Err(Error::config(
            "task",
            "tsv_classification reads files; point `train_tsv` at one instead of generating",
        )),
    }
}

// ── TSV ingestion ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    Whitespace,
    Chars,
}

impl FromStr for Tokenizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" => Ok(Tokenizer::Whitespace),
            "chars" => Ok(Tokenizer::Chars),
            other => Err(Error::config(
                "tokenizer",
                format!("unknown tokenizer `{other}` (known: whitespace, chars)"),
            )),
        }
    }
}

impl Tokenizer {
    fn split(&self, text: &str) -> Vec<String> {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().map(str::to_string).collect(),
            Tokenizer::Chars => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        }
    }
}

struct TsvRow {
    tokens: Vec<String>,
    label: usize,
}

fn read_tsv_rows(path: &Path, tokenizer: Tokenizer) -> Result<Vec<TsvRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let Some((text, label)) = line.split_once('\t') else {
            return Err(Error::Format(format!(
                "{}: line {lineno}: expected text<TAB>label",
                path.display()
            )));
        };
        let label: usize = label.trim().parse().map_err(|_| {
            Error::Format(format!(
                "{}: line {lineno}: label `{}` is not a nonnegative integer",
                path.display(),
                label.trim()
            ))
        })?;
        let tokens = tokenizer.split(text);
        if tokens.is_empty() {
            return Err(Error::Format(format!(
                "{}: line {lineno}: empty text column",
                path.display()
            )));
        }
        rows.push(TsvRow { tokens, label });
    }
    Ok(rows)
}

/// The vocabulary induced by a training split: most frequent first, ties
/// broken lexicographically, ids starting after the reserved block.
#[derive(Clone, Debug, Default)]
pub struct Vocab {
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    fn build(rows: &[TsvRow]) -> Vocab {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for row in rows {
            for tok in &row.tokens {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut order: Vec<(&str, usize)> = freq.into_iter().collect();
        order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let ids = order
            .into_iter()
            .enumerate()
            .map(|(i, (tok, _))| (tok.to_string(), FIRST_CONTENT + i))
            .collect();
        Vocab { ids }
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Read a `text<TAB>label` classification corpus. The vocabulary comes from
/// the training file alone; evaluation tokens outside it map to the unknown
/// id. Returns the dataset and the vocabulary used for the mapping.
pub fn load_tsv(
    train_path: &Path,
    eval_path: Option<&Path>,
    tokenizer: Tokenizer,
) -> Result<(Dataset, Vocab)> {
    let train_rows = read_tsv_rows(train_path, tokenizer)?;
    if train_rows.is_empty() {
        return Err(Error::Format(format!("{}: empty dataset", train_path.display())));
    }
    let vocab = Vocab::build(&train_rows);
    let eval_rows = match eval_path {
        Some(p) => read_tsv_rows(p, tokenizer)?,
        None => Vec::new(),
    };
    let map = |rows: &[TsvRow]| -> Vec<Example> {
        rows.iter()
            .map(|row| Example {
                input: row.tokens.iter().map(|t| vocab.id(t)).collect(),
                target: vec![row.label],
            })
            .collect()
    };
    let train = map(&train_rows);
    let eval = map(&eval_rows);
    let classes = train
        .iter()
        .chain(&eval)
        .map(|e| e.target[0])
        .max()
        .unwrap_or(0)
        + 1;
    Ok((
        Dataset {
            task: TaskKind::TsvClassification,
            vocab: FIRST_CONTENT + vocab.len(),
            classes,
            train,
            eval,
        },
        vocab,
    ))
}

/// Write examples in the same `text<TAB>label` shape the loader reads,
/// tokens rendered as space-joined ids. Seq2seq targets occupy the label
/// column as a space-joined sequence.
pub fn export_tsv(path: &Path, examples: &[Example]) -> Result<()> {
    let ctx = |e| Error::io(path.display().to_string(), e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(ctx)?);
    for ex in examples {
        let input = ex.input.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        let target = ex.target.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(w, "{input}\t{target}").map_err(ctx)?;
    }
    w.flush().map_err(ctx)
}

// ── Tests ───────────────────────────────────────────────────────────────────
