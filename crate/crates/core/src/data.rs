//! Synthetic text+image tasks whose labels need both modalities, JSON-lines
//! storage, batching and span-level metrics.
//!
//! Token ids:
//! - `1..=4` entity triggers (MNER) / `1..=3` sentiment cues (MSA)
//! - `5..=8` entity continuations (MNER)
//! - everything else up to `VOCAB - 1` is filler; `0` is never emitted.
//!
//! Images are 8×8 grids striped horizontally (pattern 0, even rows lit) or
//! vertically (pattern 1, even columns lit), with a few cells flipped.
//!
//! In MNER the trigger's entity type is `X` for pattern 0 and `Y` for
//! pattern 1, so text alone cannot name the type. In MSA the label is
//! `(cue + pattern) mod 3`, so neither modality alone determines it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{MuseError, Result};
use crate::heads::{BioTag, LabelScheme};
use crate::Rng;

pub const VOCAB: usize = 64;
pub const SEQ_LEN: usize = 12;
pub const GRID: usize = 8;
pub const MSA_CLASSES: usize = 3;

const TRIGGERS: std::ops::RangeInclusive<usize> = 1..=4;
const CONTINUATIONS: std::ops::RangeInclusive<usize> = 5..=8;
const MNER_FILLER: std::ops::RangeInclusive<usize> = 9..=63;
const MSA_FILLER: std::ops::RangeInclusive<usize> = 4..=63;

pub type Grid = [[f64; GRID]; GRID];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mner,
    Msa,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Mner => "mner",
            Task::Msa => "msa",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = MuseError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mner" => Ok(Task::Mner),
            "msa" => Ok(Task::Msa),
            other => Err(MuseError::config("task", format!("unknown task `{other}`"))),
        }
    }
}

/// Generation-time facts not stored in the JSON-lines files.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExampleMeta {
    pub trigger_positions: Vec<usize>,
    pub pattern: usize,
    pub cue: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthExample {
    pub tokens: Vec<usize>,
    pub image: Grid,
    #[serde(rename = "labels", default, skip_serializing_if = "Option::is_none")]
    pub mner_labels: Option<Vec<usize>>,
    #[serde(rename = "label", default, skip_serializing_if = "Option::is_none")]
    pub msa_label: Option<usize>,
    #[serde(skip)]
    pub meta: Option<ExampleMeta>,
}

impl SynthExample {
    pub fn task(&self) -> Task {
        if self.mner_labels.is_some() {
            Task::Mner
        } else {
            Task::Msa
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: Task,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub noise_pixels: usize,
}

impl TaskConfig {
    pub fn new(task: Task, seed: u64) -> Self {
        TaskConfig {
            task,
            train: 2000,
            val: 500,
            test: 500,
            seed,
            noise_pixels: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("train", self.train),
            ("val", self.val),
            ("test", self.test),
        ] {
            if v == 0 {
                return Err(MuseError::config(field, "split size must be at least 1"));
            }
        }
        if self.noise_pixels > GRID * GRID {
            return Err(MuseError::config("noise_pixels", "more flips than cells"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub train: Vec<SynthExample>,
    pub val: Vec<SynthExample>,
    pub test: Vec<SynthExample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SynthExample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for split in Split::ALL {
            write_jsonl(
                &dir.join(format!("{}.jsonl", split.name())),
                self.split(split),
            )?;
        }
        Ok(())
    }

    /// Task of a dataset directory, judged by the first validation example.
    pub fn detect_task(dir: &Path) -> Result<Task> {
        let path = dir.join(format!("{}.jsonl", Split::Val.name()));
        let reader = BufReader::new(File::open(&path)?);
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                let ex: SynthExample = serde_json::from_str(&line)?;
                return Ok(ex.task());
            }
        }
        Err(MuseError::Input(format!(
            "{} holds no examples",
            path.display()
        )))
    }

    pub fn read_dir(dir: &Path, task: Task) -> Result<Self> {
        let read = |s: Split| read_jsonl(&dir.join(format!("{}.jsonl", s.name())), task);
        Ok(Dataset {
            task,
            train: read(Split::Train)?,
            val: read(Split::Val)?,
            test: read(Split::Test)?,
        })
    }
}

/// Every example draws from its own ChaCha stream keyed by split and index,
/// so split sizes never shift each other's content.
fn example_rng(seed: u64, split: Split, index: usize) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream((split.stream_id() << 40) | index as u64);
    rng
}

pub fn generate_task(cfg: &TaskConfig) -> Result<Dataset> {
    cfg.validate()?;
    let make = |split: Split, count: usize| -> Vec<SynthExample> {
        (0..count)
            .map(|i| {
                let mut rng = example_rng(cfg.seed, split, i);
                match cfg.task {
                    Task::Mner => mner_example(&mut rng, cfg.noise_pixels),
                    Task::Msa => msa_example(&mut rng, cfg.noise_pixels),
                }
            })
            .collect()
    };
    Ok(Dataset {
        task: cfg.task,
        train: make(Split::Train, cfg.train),
        val: make(Split::Val, cfg.val),
        test: make(Split::Test, cfg.test),
    })
}

pub fn striped_grid(pattern: usize, noise_pixels: usize, rng: &mut Rng) -> Grid {
    let mut grid = [[0.0; GRID]; GRID];
    for (r, row) in grid.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let lit = if pattern == 0 { r % 2 == 0 } else { c % 2 == 0 };
            *v = if lit { 1.0 } else { 0.0 };
        }
    }
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    let (flipped, _) = cells.partial_shuffle(rng, noise_pixels);
    for &cell in flipped.iter() {
        let v = &mut grid[cell / GRID][cell % GRID];
        *v = 1.0 - *v;
    }
    grid
}

fn mner_example(rng: &mut Rng, noise_pixels: usize) -> SynthExample {
    let scheme = LabelScheme::two_types();
    let pattern = rng.random_range(0..2usize);
    let (begin, inside) = if pattern == 0 {
        (scheme.id("B-X").unwrap(), scheme.id("I-X").unwrap())
    } else {
        (scheme.id("B-Y").unwrap(), scheme.id("I-Y").unwrap())
    };
    let spans = rng.random_range(1..=2usize);
    let mut labels = vec![0usize; SEQ_LEN];
    let mut tokens: Vec<usize> = (0..SEQ_LEN)
        .map(|_| rng.random_range(MNER_FILLER))
        .collect();
    let mut triggers = Vec::new();
    let mut placed = 0;
    while placed < spans {
        let len = rng.random_range(1..=3usize);
        let start = rng.random_range(0..=SEQ_LEN - len);
        // keep one O on both sides so spans never touch
        let lo = start.saturating_sub(1);
        let hi = (start + len + 1).min(SEQ_LEN);
        if labels[lo..hi].iter().any(|&y| y != 0) {
            continue;
        }
        labels[start] = begin;
        tokens[start] = rng.random_range(TRIGGERS);
        for t in start + 1..start + len {
            labels[t] = inside;
            tokens[t] = rng.random_range(CONTINUATIONS);
        }
        triggers.push(start);
        placed += 1;
    }
    triggers.sort_unstable();
    let image = striped_grid(pattern, noise_pixels, rng);
    SynthExample {
        tokens,
        image,
        mner_labels: Some(labels),
        msa_label: None,
        meta: Some(ExampleMeta {
            trigger_positions: triggers,
            pattern,
            cue: None,
        }),
    }
}

fn msa_example(rng: &mut Rng, noise_pixels: usize) -> SynthExample {
    let cue = rng.random_range(0..MSA_CLASSES);
    let pattern = rng.random_range(0..2usize);
    let mut tokens: Vec<usize> = (0..SEQ_LEN).map(|_| rng.random_range(MSA_FILLER)).collect();
    tokens[rng.random_range(0..SEQ_LEN)] = 1 + cue;
    let image = striped_grid(pattern, noise_pixels, rng);
    SynthExample {
        tokens,
        image,
        mner_labels: None,
        msa_label: Some((cue + pattern) % MSA_CLASSES),
        meta: Some(ExampleMeta {
            trigger_positions: Vec::new(),
            pattern,
            cue: Some(cue),
        }),
    }
}

pub fn write_jsonl(path: &Path, examples: &[SynthExample]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path, task: Task) -> Result<Vec<SynthExample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: SynthExample = serde_json::from_str(&line)?;
        let ok = match task {
            Task::Mner => ex
                .mner_labels
                .as_ref()
                .is_some_and(|l| l.len() == ex.tokens.len()),
            Task::Msa => ex.msa_label.is_some(),
        };
        if !ok {
            return Err(MuseError::Input(format!(
                "{}:{}: not a {task} example",
                path.display(),
                lineno + 1
            )));
        }
        out.push(ex);
    }
    Ok(out)
}

/// Shuffled index batches; the last partial batch is kept.
pub fn make_batches(len: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(MuseError::config("batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `(start, end_exclusive, type)` entity spans of a BIO sequence. A stray
/// `I-k` opens a new span, as in conlleval.
pub fn extract_spans(labels: &[usize], scheme: &LabelScheme) -> Vec<(usize, usize, String)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (t, &y) in labels.iter().enumerate() {
        let tag = scheme.tag(y);
        let continues = matches!((tag, open), (BioTag::Inside(k), Some((_, o))) if k == o);
        if continues {
            continue;
        }
        if let Some((s, k)) = open.take() {
            spans.push((s, t, k.to_string()));
        }
        match tag {
            BioTag::Begin(k) | BioTag::Inside(k) => open = Some((t, k)),
            BioTag::Outside => {}
        }
    }
    if let Some((s, k)) = open {
        spans.push((s, labels.len(), k.to_string()));
    }
    spans
}

/// Exact-match span precision/recall/F1 over a corpus of sequences.
pub fn span_f1(
    pred: &[Vec<usize>],
    gold: &[Vec<usize>],
    scheme: &LabelScheme,
) -> Result<SpanScores> {
    if pred.len() != gold.len() {
        return Err(MuseError::contract(format!(
            "span_f1: {} predicted vs {} gold sequences",
            pred.len(),
            gold.len()
        )));
    }
    let (mut n_pred, mut n_gold, mut correct) = (0usize, 0usize, 0usize);
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(MuseError::contract(format!(
                "span_f1: sequence {i} lengths differ ({} vs {})",
                p.len(),
                g.len()
            )));
        }
        let ps = extract_spans(p, scheme);
        let gs = extract_spans(g, scheme);
        correct += ps.iter().filter(|s| gs.contains(s)).count();
        n_pred += ps.len();
        n_gold += gs.len();
    }
    let precision = if n_pred == 0 {
        0.0
    } else {
        correct as f64 / n_pred as f64
    };
    let recall = if n_gold == 0 {
        0.0
    } else {
        correct as f64 / n_gold as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SpanScores {
        precision,
        recall,
        f1,
    })
}
