//! Core data types shared by every stage of the back-end: labeled embedding
//! sets, trial lists and score sets, plus their on-disk formats.
//!
//! Formats:
//! - embeddings, text: one record per line, `utt_id spk_id gender v1 .. vD`,
//!   whitespace separated; `-` as spk_id marks an unlabeled utterance,
//!   gender is one of `M`, `F`, `U`. Values are printed with shortest
//!   round-trip formatting, so text round trips are value-exact.
//! - embeddings, binary: magic `XVB1`, little-endian `u32` N and D, then N
//!   records of `[u16 id_len, id, u16 spk_len, spk, u8 gender, D × f32]`.
//!   Payload values are `f32`; writing rounds once.
//! - trial list: `enroll_id test_id [target|nontarget]` per line.
//! - score file: `enroll_id test_id score` per line, 9 decimal places.
//!
//! All types are immutable after construction and validated on entry:
//! loaders reject anything that breaks an invariant rather than repairing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const BINARY_MAGIC: &[u8; 4] = b"XVB1";

/// Gender tag attached to each utterance. `U` (unknown) marks cohort-style
/// data; gender-matched trial sampling skips it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gender {
    M,
    F,
    U,
}

impl Gender {
    pub fn parse(token: &str) -> Option<Gender> {
        match token {
            "M" => Some(Gender::M),
            "F" => Some(Gender::F),
            "U" => Some(Gender::U),
            _ => None,
        }
    }

    fn from_byte(b: u8) -> Option<Gender> {
        match b {
            0 => Some(Gender::M),
            1 => Some(Gender::F),
            2 => Some(Gender::U),
            _ => None,
        }
    }

    fn to_byte(self) -> u8 {
        match self {
            Gender::M => 0,
            Gender::F => 1,
            Gender::U => 2,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Gender::M => "M",
            Gender::F => "F",
            Gender::U => "U",
        };
        f.write_str(s)
    }
}

/// Ground-truth label of a trial. `Target` means enrollment and test come
/// from the same speaker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Target,
    Nontarget,
    Unknown,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Label::Target => "target",
            Label::Nontarget => "nontarget",
            Label::Unknown => "unknown",
        };
        f.write_str(s)
    }
}

/// A set of fixed-dimensional speaker embeddings with per-utterance metadata.
///
/// Rows of `matrix` align index-wise with `utt_ids`, `speakers` and
/// `genders`. `speakers[i] == None` marks an unlabeled utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    utt_ids: Vec<String>,
    speakers: Vec<Option<String>>,
    genders: Vec<Gender>,
    matrix: DMatrix<f64>,
}

impl EmbeddingSet {
    pub fn new(
        utt_ids: Vec<String>,
        speakers: Vec<Option<String>>,
        genders: Vec<Gender>,
        matrix: DMatrix<f64>,
    ) -> Result<Self> {
        let n = utt_ids.len();
        if speakers.len() != n || genders.len() != n || matrix.nrows() != n {
            return Err(Error::InvalidConfig(format!(
                "embedding set fields disagree on length: {} ids, {} speakers, {} genders, {} rows",
                n,
                speakers.len(),
                genders.len(),
                matrix.nrows()
            )));
        }
        if matrix.ncols() == 0 {
            return Err(Error::InvalidConfig(
                "embedding dimension must be at least 1".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(n);
        for (i, id) in utt_ids.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateUttId {
                    id: id.clone(),
                    record: i + 1,
                });
            }
        }
        if !crate::linalg::all_finite(&matrix) {
            return Err(Error::Degenerate(
                "embedding matrix contains NaN or Inf".into(),
            ));
        }
        Ok(EmbeddingSet {
            utt_ids,
            speakers,
            genders,
            matrix,
        })
    }

    pub fn len(&self) -> usize {
        self.utt_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utt_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn utt_ids(&self) -> &[String] {
        &self.utt_ids
    }

    pub fn speakers(&self) -> &[Option<String>] {
        &self.speakers
    }

    pub fn genders(&self) -> &[Gender] {
        &self.genders
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Embedding of utterance `i` as a column vector.
    pub fn row(&self, i: usize) -> DVector<f64> {
        self.matrix.row(i).transpose()
    }

    /// Map from utterance id to row index.
    pub fn index_map(&self) -> HashMap<&str, usize> {
        self.utt_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// Row indices of labeled utterances grouped by speaker, in sorted
    /// speaker order (deterministic iteration for fits).
    pub fn speaker_groups(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, spk) in self.speakers.iter().enumerate() {
            if let Some(s) = spk {
                groups.entry(s.as_str()).or_default().push(i);
            }
        }
        groups
    }

    /// New set containing the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<EmbeddingSet> {
        let mut ids = Vec::with_capacity(rows.len());
        let mut spk = Vec::with_capacity(rows.len());
        let mut gen = Vec::with_capacity(rows.len());
        let mut mat = DMatrix::zeros(rows.len(), self.dim());
        for (dst, &src) in rows.iter().enumerate() {
            if src >= self.len() {
                return Err(Error::InvalidConfig(format!(
                    "subset row {src} out of range (set has {} rows)",
                    self.len()
                )));
            }
            ids.push(self.utt_ids[src].clone());
            spk.push(self.speakers[src].clone());
            gen.push(self.genders[src]);
            mat.set_row(dst, &self.matrix.row(src));
        }
        EmbeddingSet::new(ids, spk, gen, mat)
    }

    /// Indices of rows that carry a speaker label.
    pub fn labeled_rows(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.speakers[i].is_some())
            .collect()
    }
}

/// An ordered list of (enrollment, test) utterance-id pairs with per-pair
/// labels. Order is significant and preserved by all I/O.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialList {
    pairs: Vec<(String, String)>,
    labels: Vec<Label>,
}

impl TrialList {
    pub fn new(pairs: Vec<(String, String)>, labels: Vec<Label>) -> Result<Self> {
        if pairs.len() != labels.len() {
            return Err(Error::InvalidConfig(format!(
                "trial list has {} pairs but {} labels",
                pairs.len(),
                labels.len()
            )));
        }
        Ok(TrialList { pairs, labels })
    }

    pub fn unlabeled(pairs: Vec<(String, String)>) -> Self {
        let labels = vec![Label::Unknown; pairs.len()];
        TrialList { pairs, labels }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// Concatenates two trial lists (sampled + externally loaded).
    pub fn concat(mut self, other: TrialList) -> TrialList {
        self.pairs.extend(other.pairs);
        self.labels.extend(other.labels);
        self
    }
}

/// Real-valued scores aligned with a list of trial pairs; the score scale is
/// log-likelihood-ratio-like (higher means more target-like).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pairs: Vec<(String, String)>,
    scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(pairs: Vec<(String, String)>, scores: Vec<f64>) -> Result<Self> {
        if pairs.len() != scores.len() {
            return Err(Error::InvalidConfig(format!(
                "score set has {} pairs but {} scores",
                pairs.len(),
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Degenerate(format!(
                "score at index {i} is not finite"
            )));
        }
        Ok(ScoreSet { pairs, scores })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Same pairs, new score values.
    pub fn with_scores(&self, scores: Vec<f64>) -> Result<ScoreSet> {
        ScoreSet::new(self.pairs.clone(), scores)
    }
}

/// Pairs scores with {0,1} labels for metric computation. The score set and
/// trial list must list identical pairs in identical order, and every label
/// must be known. Returns `(scores, is_target)`.
pub fn align_labels(scores: &ScoreSet, trials: &TrialList) -> Result<(Vec<f64>, Vec<bool>)> {
    if scores.len() != trials.len() {
        return Err(Error::InvalidConfig(format!(
            "score set has {} trials but trial list has {}",
            scores.len(),
            trials.len()
        )));
    }
    let mut is_target = Vec::with_capacity(trials.len());
    for (i, (sp, tp)) in scores.pairs().iter().zip(trials.pairs()).enumerate() {
        if sp != tp {
            return Err(Error::InvalidConfig(format!(
                "pair mismatch at index {i}: scores have ({} {}), trials have ({} {})",
                sp.0, sp.1, tp.0, tp.1
            )));
        }
        match trials.labels()[i] {
            Label::Target => is_target.push(true),
            Label::Nontarget => is_target.push(false),
            Label::Unknown => {
                return Err(Error::InvalidConfig(format!(
                    "trial {i} has no label; metrics need target/nontarget ground truth"
                )))
            }
        }
    }
    Ok((scores.scores().to_vec(), is_target))
}

/// On-disk embedding representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Text,
    Binary,
}

pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingSet> {
    match format {
        EmbeddingFormat::Text => load_embeddings_text(path),
        EmbeddingFormat::Binary => load_embeddings_binary(path),
    }
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path, format: EmbeddingFormat) -> Result<()> {
    match format {
        EmbeddingFormat::Text => write_embeddings_text(set, path),
        EmbeddingFormat::Binary => write_embeddings_binary(set, path),
    }
}

pub fn load_embeddings_text(path: &Path) -> Result<EmbeddingSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut utt_ids = Vec::new();
    let mut speakers = Vec::new();
    let mut genders = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut dim: Option<usize> = None;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let id = tokens
            .next()
            .ok_or_else(|| Error::parse(path, lineno, "missing utt_id"))?;
        let spk = tokens
            .next()
            .ok_or_else(|| Error::parse(path, lineno, "missing spk_id"))?;
        let gender_tok = tokens
            .next()
            .ok_or_else(|| Error::parse(path, lineno, "missing gender"))?;
        let gender = Gender::parse(gender_tok).ok_or_else(|| {
            Error::parse(
                path,
                lineno,
                format!("bad gender {gender_tok:?}, expected M, F or U"),
            )
        })?;

        let mut row = Vec::new();
        for tok in tokens {
            let v: f64 = tok.parse().map_err(|_| {
                Error::parse(path, lineno, format!("unparseable numeric field {tok:?}"))
            })?;
            row.push(v);
        }
        if row.is_empty() {
            return Err(Error::parse(path, lineno, "record has no embedding values"));
        }
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("dimension mismatch: record has {} values, expected {d}", row.len()),
                ))
            }
            _ => {}
        }

        utt_ids.push(id.to_string());
        speakers.push(if spk == "-" { None } else { Some(spk.to_string()) });
        genders.push(gender);
        values.extend_from_slice(&row);
    }

    let d = dim.ok_or_else(|| Error::parse(path, 1, "file contains no records"))?;
    let n = utt_ids.len();
    EmbeddingSet::new(
        utt_ids,
        speakers,
        genders,
        DMatrix::from_row_slice(n, d, &values),
    )
}

pub fn write_embeddings_text(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for i in 0..set.len() {
        let spk = set.speakers[i].as_deref().unwrap_or("-");
        write!(w, "{} {} {}", set.utt_ids[i], spk, set.genders[i]).map_err(|e| Error::io(path, e))?;
        for v in set.matrix.row(i).iter() {
            write!(w, " {v}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_exact_or(path: &Path, r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: format!("truncated file while reading {what}"),
    })
}

fn read_u16(path: &Path, r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact_or(path, r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(path: &Path, r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(path, r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(path: &Path, r: &mut impl Read, len: usize, what: &str) -> Result<String> {
    let mut buf = vec![0u8; len];
    read_exact_or(path, r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: format!("{what} is not valid UTF-8"),
    })
}

pub fn load_embeddings_binary(path: &Path) -> Result<EmbeddingSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_or(path, &mut r, &mut magic, "magic")?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("bad magic {magic:?}, expected XVB1"),
        });
    }
    let n = read_u32(path, &mut r, "record count")? as usize;
    let d = read_u32(path, &mut r, "dimension")? as usize;
    if d == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "dimension must be at least 1".into(),
        });
    }

    let mut utt_ids = Vec::with_capacity(n);
    let mut speakers = Vec::with_capacity(n);
    let mut genders = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * d);
    for rec in 0..n {
        let what = format!("record {}", rec + 1);
        let id_len = read_u16(path, &mut r, &what)? as usize;
        let id = read_string(path, &mut r, id_len, &what)?;
        let spk_len = read_u16(path, &mut r, &what)? as usize;
        let spk = read_string(path, &mut r, spk_len, &what)?;
        let mut gb = [0u8; 1];
        read_exact_or(path, &mut r, &mut gb, &what)?;
        let gender = Gender::from_byte(gb[0]).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("record {}: bad gender byte {}", rec + 1, gb[0]),
        })?;
        let mut fb = [0u8; 4];
        for _ in 0..d {
            read_exact_or(path, &mut r, &mut fb, &what)?;
            values.push(f32::from_le_bytes(fb) as f64);
        }
        utt_ids.push(id);
        speakers.push(if spk == "-" { None } else { Some(spk) });
        genders.push(gender);
    }

    EmbeddingSet::new(
        utt_ids,
        speakers,
        genders,
        DMatrix::from_row_slice(n, d, &values),
    )
}

/// Writes the binary format. Values are stored as `f32`: the round trip is
/// bit-exact once the data has been through this format (or is otherwise
/// `f32`-representable).
pub fn write_embeddings_binary(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let err = |e| Error::io(path, e);

    w.write_all(BINARY_MAGIC).map_err(err)?;
    w.write_all(&(set.len() as u32).to_le_bytes()).map_err(err)?;
    w.write_all(&(set.dim() as u32).to_le_bytes()).map_err(err)?;
    for i in 0..set.len() {
        let id = set.utt_ids[i].as_bytes();
        let spk_owned = set.speakers[i].as_deref().unwrap_or("-");
        let spk = spk_owned.as_bytes();
        if id.len() > u16::MAX as usize || spk.len() > u16::MAX as usize {
            return Err(Error::InvalidConfig(format!(
                "identifier too long for binary format at record {}",
                i + 1
            )));
        }
        w.write_all(&(id.len() as u16).to_le_bytes()).map_err(err)?;
        w.write_all(id).map_err(err)?;
        w.write_all(&(spk.len() as u16).to_le_bytes()).map_err(err)?;
        w.write_all(spk).map_err(err)?;
        w.write_all(&[set.genders[i].to_byte()]).map_err(err)?;
        for v in set.matrix.row(i).iter() {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(err)?;
        }
    }
    w.flush().map_err(err)
}

pub fn load_trials(path: &Path) -> Result<TrialList> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [e, t] => {
                pairs.push((e.to_string(), t.to_string()));
                labels.push(Label::Unknown);
            }
            [e, t, lab] => {
                let label = match *lab {
                    "target" => Label::Target,
                    "nontarget" => Label::Nontarget,
                    other => {
                        return Err(Error::parse(
                            path,
                            lineno,
                            format!("bad label {other:?}, expected target or nontarget"),
                        ))
                    }
                };
                pairs.push((e.to_string(), t.to_string()));
                labels.push(label);
            }
            _ => {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("expected 2 or 3 fields, got {}", tokens.len()),
                ))
            }
        }
    }
    TrialList::new(pairs, labels)
}

pub fn write_trials(trials: &TrialList, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (pair, label) in trials.pairs().iter().zip(trials.labels()) {
        match label {
            Label::Unknown => writeln!(w, "{} {}", pair.0, pair.1),
            known => writeln!(w, "{} {} {known}", pair.0, pair.1),
        }
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_scores(path: &Path) -> Result<ScoreSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    let mut scores = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let [e, t, s] = tokens.as_slice() else {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 3 fields, got {}", tokens.len()),
            ));
        };
        let score: f64 = s
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("unparseable score {s:?}")))?;
        if !score.is_finite() {
            return Err(Error::parse(path, lineno, "score is not finite"));
        }
        pairs.push((e.to_string(), t.to_string()));
        scores.push(score);
    }
    ScoreSet::new(pairs, scores)
}

/// Writes `enroll test score` lines with 9 decimal places (absolute error of
/// a write/read round trip is below 5e-10).
pub fn write_scores(scores: &ScoreSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (pair, s) in scores.pairs().iter().zip(scores.scores()) {
        writeln!(w, "{} {} {s:.9}", pair.0, pair.1).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
