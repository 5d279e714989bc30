//! Dataset ingestion: JSONL function splits, split statistics, pretrained
//! embedding import, stratified subsampling and graph preparation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::build_graph;
use crate::model::{embedding_scale, GraphInput};
use crate::numeric::Matrix;
use crate::tokenizer::{encode, split_pretokenized, tokenize, Vocabulary};

/// Split sizes of the CodeXGLUE defect-detection release.
pub const CODEXGLUE_TRAIN: usize = 21_854;
pub const CODEXGLUE_VALID: usize = 2_732;
pub const CODEXGLUE_TEST: usize = 2_732;

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// One labelled function; label 1 means vulnerable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSample {
    pub idx: i64,
    pub source: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub samples: Vec<CodeSample>,
    pub rejected: Vec<RejectedLine>,
}

fn parse_line(value: &str, position: usize) -> std::result::Result<CodeSample, String> {
    let v: Value = serde_json::from_str(value).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = v.as_object().ok_or("not a JSON object")?;
    let source = obj
        .get("func")
        .ok_or("missing field `func`")?
        .as_str()
        .ok_or("`func` is not a string")?;
    if source.is_empty() {
        return Err("`func` is empty".into());
    }
    let target = obj.get("target").ok_or("missing field `target`")?;
    let label = match target.as_u64() {
        Some(t @ (0 | 1)) => t as usize,
        _ => return Err(format!("`target` must be 0 or 1, got {target}")),
    };
    let idx = match obj.get("idx") {
        None | Some(Value::Null) => position as i64,
        Some(i) => i
            .as_i64()
            .or_else(|| i.as_str().and_then(|s| s.parse().ok()))
            .ok_or_else(|| format!("`idx` is not an integer: {i}"))?,
    };
    Ok(CodeSample {
        idx,
        source: source.to_owned(),
        label,
    })
}

/// Reads one JSON object per line with `func`, `target` and optional `idx`.
///
/// Malformed lines are reported with their 1-based line number and skipped;
/// more than 1% malformed lines fails the whole load.
pub fn load_jsonl(path: &Path) -> Result<LoadReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    let mut total = 0;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match parse_line(line, samples.len()) {
            Ok(s) => samples.push(s),
            Err(reason) => rejected.push(RejectedLine {
                line: n + 1,
                reason,
            }),
        }
    }
    if total == 0 {
        return Err(Error::EmptySplit { path: path.into() });
    }
    if rejected.len() * 100 > total {
        let first = &rejected[0];
        return Err(Error::TooManyMalformed {
            path: path.into(),
            bad: rejected.len(),
            total,
            first_line: first.line,
            first_reason: first.reason.clone(),
        });
    }
    Ok(LoadReport { samples, rejected })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SplitStats {
    pub total: usize,
    pub vulnerable: usize,
}

impl SplitStats {
    pub fn of(samples: &[CodeSample]) -> Self {
        SplitStats {
            total: samples.len(),
            vulnerable: samples.iter().filter(|s| s.label == 1).count(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsVerdict {
    NotChecked,
    Match,
    Mismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatsReport {
    pub train: SplitStats,
    pub valid: SplitStats,
    pub test: SplitStats,
    pub verdict: StatsVerdict,
}

impl std::fmt::Display for StatsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, s) in [
            ("train", self.train),
            ("valid", self.valid),
            ("test", self.test),
        ] {
            writeln!(
                f,
                "{name}: {} samples ({} vulnerable)",
                s.total, s.vulnerable
            )?;
        }
        match self.verdict {
            StatsVerdict::NotChecked => write!(f, "codexglue: not checked"),
            StatsVerdict::Match => write!(f, "codexglue: match"),
            StatsVerdict::Mismatch => write!(f, "codexglue: mismatch (expected for subsets)"),
        }
    }
}

/// Summarises the three splits; with `expect_codexglue`, compares their
/// sizes against the public release. A mismatch is reported, not an error.
pub fn verify_stats(
    train: Option<&[CodeSample]>,
    valid: Option<&[CodeSample]>,
    test: Option<&[CodeSample]>,
    expect_codexglue: bool,
) -> Result<StatsReport> {
    let train = train.ok_or(Error::MissingSplit("train"))?;
    let valid = valid.ok_or(Error::MissingSplit("valid"))?;
    let test = test.ok_or(Error::MissingSplit("test"))?;
    let (tr, va, te) = (
        SplitStats::of(train),
        SplitStats::of(valid),
        SplitStats::of(test),
    );
    let verdict = if !expect_codexglue {
        StatsVerdict::NotChecked
    } else if (tr.total, va.total, te.total) == (CODEXGLUE_TRAIN, CODEXGLUE_VALID, CODEXGLUE_TEST) {
        StatsVerdict::Match
    } else {
        StatsVerdict::Mismatch
    };
    Ok(StatsReport {
        train: tr,
        valid: va,
        test: te,
        verdict,
    })
}

#[derive(Debug, Clone)]
pub struct EmbeddingImport {
    pub table: Matrix,
    /// Fraction of non-reserved vocabulary tokens found in the file.
    pub coverage: f64,
    pub matched: usize,
}

/// Builds a `vocab x d` table from a whitespace-separated text matrix
/// (`token v1 ... vd` per line). Rows for tokens missing from the file keep
/// the standard random initialisation.
pub fn import_embeddings<R: Rng + ?Sized>(
    path: &Path,
    vocab: &Vocabulary,
    d: usize,
    rng: &mut R,
) -> Result<EmbeddingImport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table = Matrix::uniform(vocab.len(), d, embedding_scale(d), rng);
    let mut file_dim: Option<usize> = None;
    let mut filled = vec![false; vocab.len()];
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: path.into(),
                line: n + 1,
                reason: format!("bad number: {e}"),
            })?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.into(),
                line: n + 1,
                reason: "non-finite value".into(),
            });
        }
        match file_dim {
            None => {
                if values.len() != d {
                    return Err(Error::EmbeddingDim {
                        expected: d,
                        found: values.len(),
                    });
                }
                file_dim = Some(values.len());
            }
            Some(fd) if fd != values.len() => {
                return Err(Error::Parse {
                    path: path.into(),
                    line: n + 1,
                    reason: format!("row has {} values, earlier rows have {fd}", values.len()),
                })
            }
            Some(_) => {}
        }
        if let Some(id) = vocab.id(token) {
            table.row_mut(id).copy_from_slice(&values);
            filled[id] = true;
        }
    }
    let matched = filled[2..].iter().filter(|&&f| f).count();
    let regular = vocab.len() - 2;
    let coverage = if regular == 0 {
        0.0
    } else {
        matched as f64 / regular as f64
    };
    Ok(EmbeddingImport {
        table,
        coverage,
        matched,
    })
}

/// Seeded, label-stratified choice of `floor(fraction * n)` indices, returned
/// in ascending order. Per-class quotas are floored and the remainder goes to
/// the classes with the largest fractional parts (lower label first on ties).
pub fn stratified_subsample(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = labels.len();
    if fraction == 1.0 {
        return Ok((0..n).collect());
    }
    let target = (fraction * n as f64).floor() as usize;
    let mut by_class: Vec<(usize, Vec<usize>)> = {
        let mut m: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, &l) in labels.iter().enumerate() {
            m.entry(l).or_default().push(i);
        }
        let mut v: Vec<_> = m.into_iter().collect();
        v.sort_by_key(|(l, _)| *l);
        v
    };
    let mut quotas: Vec<usize> = by_class
        .iter()
        .map(|(_, idx)| (fraction * idx.len() as f64).floor() as usize)
        .collect();
    let mut order: Vec<usize> = (0..by_class.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = fraction * by_class[a].1.len() as f64 - quotas[a] as f64;
        let fb = fraction * by_class[b].1.len() as f64 - quotas[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(quotas.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if quotas[c] < by_class[c].1.len() {
            quotas[c] += 1;
            missing -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(target);
    for ((_, idx), q) in by_class.iter_mut().zip(quotas) {
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..q]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn tokens_of(source: &str, pretokenized: bool) -> Vec<String> {
    if pretokenized {
        split_pretokenized(source)
    } else {
        tokenize(source)
    }
}

/// Graph inputs for every sample with at least one token; the ids of
/// samples that produced no tokens are returned separately.
pub fn prepare_graphs(
    samples: &[CodeSample],
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<(Vec<GraphInput>, Vec<i64>)> {
    let built: Vec<Result<Option<GraphInput>>> = samples
        .par_iter()
        .map(|s| {
            let tokens = tokens_of(&s.source, config.pretokenized);
            if tokens.is_empty() {
                return Ok(None);
            }
            let seq = encode(&tokens, vocab, config.max_len)?;
            let g = build_graph(&seq, config.window, config.construction)?;
            Ok(Some(GraphInput::from_graph(&g, s.idx, s.label)))
        })
        .collect();
    let mut graphs = Vec::with_capacity(samples.len());
    let mut dropped = Vec::new();
    for (s, r) in samples.iter().zip(built) {
        match r? {
            Some(g) => graphs.push(g),
            None => dropped.push(s.idx),
        }
    }
    Ok((graphs, dropped))
}
