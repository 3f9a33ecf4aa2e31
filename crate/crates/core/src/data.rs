//! Corpus ingestion, vocabularies and contiguous batching.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const UNK_ID: usize = 0;
pub const EOS_ID: usize = 1;

/// Token to id map with `<unk>` and `<eos>` reserved at ids 0 and 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or the unknown id.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `token<TAB>id` lines in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(out, "{t}\t{i}").expect("writing to a string");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let (token, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Vocab(format!("line {} has no tab", line_no + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::Vocab(format!("line {} has a malformed id", line_no + 1)))?;
            if id != tokens.len() {
                return Err(Error::Vocab(format!("line {} has id {id}, expected {}", line_no + 1, tokens.len())));
            }
            tokens.push(token.to_string());
        }
        if tokens.len() < 2 || tokens[UNK_ID] != UNK || tokens[EOS_ID] != EOS {
            return Err(Error::Vocab(format!("vocabulary must start with {UNK} and {EOS}")));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(Error::Vocab("duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }
}

/// The `max_size - 2` most frequent whitespace tokens of `text` after the
/// reserved markers, ties broken lexicographically.
pub fn build_vocab(text: &str, max_size: usize) -> Result<Vocab> {
    if max_size < 2 {
        return Err(Error::domain("vocabulary needs room for the two reserved tokens"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut total = 0usize;
    for tok in text.split_whitespace() {
        total += 1;
        if tok != UNK && tok != EOS {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if total == 0 {
        return Err(Error::domain("empty corpus"));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens = vec![UNK.to_string(), EOS.to_string()];
    tokens.extend(ranked.into_iter().take(max_size - 2).map(|(t, _)| t.to_string()));
    Ok(Vocab::from_tokens(tokens))
}

/// One id per token with `<eos>` closing every non-blank line.
pub fn encode_stream(text: &str, vocab: &Vocab) -> Vec<usize> {
    let mut ids = Vec::new();
    for line in text.lines() {
        let before = ids.len();
        ids.extend(line.split_whitespace().map(|t| vocab.id(t)));
        if ids.len() > before {
            ids.push(EOS_ID);
        }
    }
    ids
}

/// One `B x T` window of inputs and next-token targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub inputs: Array2<usize>,
    pub targets: Array2<usize>,
}

/// A token stream laid out in `batch` contiguous lanes and cut into windows
/// of `unroll` steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchStream {
    lanes: Array2<usize>,
    unroll: usize,
}

/// Splits `ids` into `batch` lanes, dropping the remainder, and windows of
/// `unroll` inputs whose targets are the next tokens of the same lane.
pub fn make_batches(ids: &[usize], batch: usize, unroll: usize) -> Result<BatchStream> {
    if batch == 0 || unroll == 0 {
        return Err(Error::domain("batch and unroll must be positive"));
    }
    if ids.len() < batch * (unroll + 1) {
        return Err(Error::domain(format!(
            "{} tokens cannot fill {batch} lanes of {} tokens",
            ids.len(),
            unroll + 1
        )));
    }
    let lane_len = ids.len() / batch;
    let lanes = Array2::from_shape_vec((batch, lane_len), ids[..batch * lane_len].to_vec())
        .expect("length matches");
    Ok(BatchStream { lanes, unroll })
}

impl BatchStream {
    pub fn batch(&self) -> usize {
        self.lanes.nrows()
    }

    pub fn unroll(&self) -> usize {
        self.unroll
    }

    pub fn lanes(&self) -> ArrayView2<'_, usize> {
        self.lanes.view()
    }

    pub fn window_count(&self) -> usize {
        (self.lanes.ncols() - 1) / self.unroll
    }

    /// Number of target tokens over all windows.
    pub fn target_tokens(&self) -> usize {
        self.batch() * self.unroll * self.window_count()
    }

    pub fn window(&self, k: usize) -> Option<Window> {
        if k >= self.window_count() {
            return None;
        }
        let start = k * self.unroll;
        Some(Window {
            inputs: self.lanes.slice(s![.., start..start + self.unroll]).to_owned(),
            targets: self.lanes.slice(s![.., start + 1..start + 1 + self.unroll]).to_owned(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Window> + '_ {
        (0..self.window_count()).map(|k| self.window(k).expect("index in range"))
    }
}

/// Perplexity on `test` of the add-one-smoothed unigram distribution of
/// `train`.
pub fn unigram_perplexity(train: &[usize], test: &[usize], vocab_size: usize) -> Result<f64> {
    if test.is_empty() || vocab_size == 0 {
        return Err(Error::domain("empty test stream or vocabulary"));
    }
    let mut counts = vec![1.0f64; vocab_size];
    for &t in train {
        counts[t] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let nll: f64 = test.iter().map(|&t| -(counts[t] / total).ln()).sum::<f64>() / test.len() as f64;
    Ok(nll.exp())
}

/// Train, validation and test text of a corpus.
#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub train: String,
    pub valid: Option<String>,
    pub test: Option<String>,
}

impl CorpusSplits {
    /// Reads `train.txt`, `valid.txt` and `test.txt` from a directory, or a
    /// single file as the training text.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let read_opt = |name: &str| -> Result<Option<String>> {
                let p: PathBuf = path.join(name);
                if p.exists() {
                    Ok(Some(std::fs::read_to_string(p)?))
                } else {
                    Ok(None)
                }
            };
            let train = read_opt("train.txt")?
                .ok_or_else(|| Error::config(format!("{} has no train.txt", path.display())))?;
            Ok(Self {
                train,
                valid: read_opt("valid.txt")?,
                test: read_opt("test.txt")?,
            })
        } else {
            Ok(Self {
                train: std::fs::read_to_string(path)?,
                valid: None,
                test: None,
            })
        }
    }

    /// Text used for evaluation: the test split when present, otherwise the
    /// whole file.
    pub fn evaluation_text(&self) -> &str {
        self.test.as_deref().unwrap_or(&self.train)
    }
}
