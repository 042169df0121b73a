//! Synthetic corpus generation.
//!
//! The data source is a control-coded Markov chain over content tokens: each
//! control code selects its own order-`m` transition table, rows are drawn
//! from a symmetric Dirichlet, and every row carries a capped amount of EOS
//! mass so sequences terminate at plausible lengths. Because the chain is
//! fully known, tests can compare learned models against exact conditionals
//! and exact entropies.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::sample_categorical;
use crate::rng::RngStream;

/// Padding token, index 0. Used only to left-fill model context windows.
pub const PAD: u32 = 0;
/// Beginning-of-sequence token, index 1.
pub const BOS: u32 = 1;
/// End-of-sequence token, index 2.
pub const EOS: u32 = 2;

/// Maximum EOS probability in any chain row.
pub const EOS_CAP: f64 = 0.2;

const RESAMPLE_CAP: usize = 100;

/// Token-index layout: `PAD=0, BOS=1, EOS=2`, control codes `[3, 3+K)`,
/// content tokens `[3+K, V)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: u32,
    num_codes: u32,
}

impl Vocab {
    /// Requires room for at least two content tokens after the reserved
    /// indices and the control codes.
    pub fn new(size: u32, num_codes: u32) -> Result<Self> {
        if size < 3 + num_codes + 2 {
            return Err(Error::InvalidArgument(format!(
                "vocab of size {size} cannot hold {num_codes} codes plus content tokens"
            )));
        }
        Ok(Vocab { size, num_codes })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn num_codes(&self) -> u32 {
        self.num_codes
    }

    /// First control-code token index.
    pub fn code_base(&self) -> u32 {
        3
    }

    /// First content token index.
    pub fn content_base(&self) -> u32 {
        3 + self.num_codes
    }

    /// Number of content tokens.
    pub fn num_content(&self) -> u32 {
        self.size - self.content_base()
    }

    pub fn is_code(&self, tok: u32) -> bool {
        (self.code_base()..self.content_base()).contains(&tok)
    }

    pub fn is_content(&self, tok: u32) -> bool {
        (self.content_base()..self.size).contains(&tok)
    }

    /// Global token index of control code `ordinal`.
    pub fn code_token(&self, ordinal: u32) -> Result<u32> {
        if ordinal >= self.num_codes {
            return Err(Error::InvalidArgument(format!(
                "code ordinal {ordinal} out of range (K = {})",
                self.num_codes
            )));
        }
        Ok(self.code_base() + ordinal)
    }

    /// Ordinal of a control-code token, if it is one.
    pub fn code_ordinal(&self, tok: u32) -> Option<u32> {
        self.is_code(tok).then(|| tok - self.code_base())
    }

    /// Content index of a content token, if it is one.
    pub fn content_index(&self, tok: u32) -> Option<u32> {
        self.is_content(tok).then(|| tok - self.content_base())
    }

    /// First control-code token in a window, scanning left to right.
    pub fn first_code(&self, window: &[u32]) -> Option<u32> {
        window.iter().copied().find(|&t| self.is_code(t))
    }
}

/// Control-coded order-`m` Markov chain over content tokens.
///
/// One row per `(code, m-gram)` pair; each row is a distribution over the
/// content tokens followed by EOS in the final slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovChainSpec {
    vocab: Vocab,
    order: u32,
    concentration: f64,
    seed: u64,
    rows: Vec<Vec<f64>>,
}

/// Draws a fresh chain spec. Row order is fixed (code-major, m-grams in
/// lexicographic order), so a given stream state pins the spec exactly.
pub fn generate_chain(
    vocab: Vocab,
    order: u32,
    concentration: f64,
    stream: &mut RngStream,
) -> Result<MarkovChainSpec> {
    if order == 0 {
        return Err(Error::InvalidArgument(
            "chain order must be at least 1".into(),
        ));
    }
    if !(concentration.is_finite() && concentration > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Dirichlet concentration must be positive, got {concentration}"
        )));
    }
    let vc = vocab.num_content() as usize;
    let n_rows = (vocab.num_codes() as usize)
        .checked_mul(vc.checked_pow(order).ok_or_else(|| {
            Error::InvalidArgument(format!("m-gram space overflow: {vc}^{order}"))
        })?)
        .ok_or_else(|| Error::InvalidArgument("row count overflow".into()))?;
    if n_rows > 20_000_000 {
        return Err(Error::InvalidArgument(format!(
            "chain would need {n_rows} rows; reduce vocab or order"
        )));
    }

    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("gamma setup: {e}")))?;
    let mut rows = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let mut row: Vec<f64> = (0..=vc).map(|_| gamma.sample(stream)).collect();
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 || !sum.is_finite() {
            row = vec![1.0; vc + 1];
        }
        normalize(&mut row);
        cap_eos(&mut row);
        rows.push(row);
    }
    Ok(MarkovChainSpec {
        vocab,
        order,
        concentration,
        seed: stream.seed(),
        rows,
    })
}

fn normalize(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    for p in row.iter_mut() {
        *p /= sum;
    }
}

/// Caps the EOS slot (last entry) at [`EOS_CAP`], rescaling the content
/// slots to absorb the remainder.
fn cap_eos(row: &mut [f64]) {
    let last = row.len() - 1;
    let eos = row[last];
    if eos > EOS_CAP {
        let scale = (1.0 - EOS_CAP) / (1.0 - eos);
        for p in row[..last].iter_mut() {
            *p *= scale;
        }
        row[last] = EOS_CAP;
    }
}

impl MarkovChainSpec {
    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn concentration(&self) -> f64 {
        self.concentration
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Outcomes per row: one per content token plus EOS in the final slot.
    pub fn row_width(&self) -> usize {
        self.vocab.num_content() as usize + 1
    }

    fn row_index(&self, code_ordinal: u32, mgram: &[u32]) -> usize {
        debug_assert_eq!(mgram.len(), self.order as usize);
        let vc = self.vocab.num_content() as usize;
        let mut idx = code_ordinal as usize;
        for &g in mgram {
            debug_assert!((g as usize) < vc);
            idx = idx * vc + g as usize;
        }
        idx
    }

    /// Transition row for `(code, m-gram)`; the m-gram is given as content
    /// indices, oldest first.
    pub fn row(&self, code_ordinal: u32, mgram: &[u32]) -> Result<&[f64]> {
        if code_ordinal >= self.vocab.num_codes() {
            return Err(Error::InvalidArgument(format!(
                "code ordinal {code_ordinal} out of range"
            )));
        }
        if mgram.len() != self.order as usize {
            return Err(Error::InvalidArgument(format!(
                "m-gram length {} does not match chain order {}",
                mgram.len(),
                self.order
            )));
        }
        if let Some(&g) = mgram.iter().find(|&&g| g >= self.vocab.num_content()) {
            return Err(Error::InvalidArgument(format!(
                "content index {g} out of range"
            )));
        }
        Ok(&self.rows[self.row_index(code_ordinal, mgram)])
    }

    /// The conditioning m-gram for a raw token window: the last `m` content
    /// tokens, left-padded with content index 0 when history is shorter.
    /// Non-content tokens (PAD, BOS, EOS, codes) are skipped. Corpus
    /// sampling and the oracle teacher share this convention.
    pub fn conditional_context(&self, window: &[u32]) -> Vec<u32> {
        let m = self.order as usize;
        let mut ctx: Vec<u32> = window
            .iter()
            .rev()
            .filter_map(|&t| self.vocab.content_index(t))
            .take(m)
            .collect();
        while ctx.len() < m {
            ctx.push(0);
        }
        ctx.reverse();
        ctx
    }

    /// Next-token distribution (content outcomes then EOS) for a raw window.
    /// The control code is read from the window itself; if none is visible
    /// the per-code rows are averaged under a uniform code prior.
    pub fn next_distribution(&self, window: &[u32]) -> Result<Vec<f64>> {
        let mgram = self.conditional_context(window);
        match self
            .vocab
            .first_code(window)
            .and_then(|t| self.vocab.code_ordinal(t))
        {
            Some(ord) => Ok(self.row(ord, &mgram)?.to_vec()),
            None => {
                let k = self.vocab.num_codes();
                let mut mix = vec![0.0; self.row_width()];
                for ord in 0..k {
                    for (acc, &p) in mix.iter_mut().zip(self.row(ord, &mgram)?) {
                        *acc += p;
                    }
                }
                for p in &mut mix {
                    *p /= k as f64;
                }
                Ok(mix)
            }
        }
    }

    /// Degenerate copy with every row one-hot at its content argmax. EOS is
    /// excluded from the argmax so sampled sequences never stall before the
    /// prompt is full. Used by tests as a zero-entropy chain.
    pub fn deterministic(&self) -> MarkovChainSpec {
        let mut out = self.clone();
        for row in &mut out.rows {
            let last = row.len() - 1;
            let argmax = row[..last]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            for (i, p) in row.iter_mut().enumerate() {
                *p = if i == argmax { 1.0 } else { 0.0 };
            }
        }
        out
    }

    /// Hex SHA-256 over a canonical byte encoding of the spec.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.vocab.size.to_le_bytes());
        hasher.update(self.vocab.num_codes.to_le_bytes());
        hasher.update(self.order.to_le_bytes());
        hasher.update(self.concentration.to_le_bytes());
        hasher.update(self.seed.to_le_bytes());
        for row in &self.rows {
            for &p in row {
                hasher.update(p.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Writes the spec as JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<MarkovChainSpec> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let spec: MarkovChainSpec = serde_json::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        for row in &spec.rows {
            if row.len() != spec.row_width() {
                return Err(Error::format(
                    path.display().to_string(),
                    "row width mismatch",
                ));
            }
        }
        if spec.rows.len()
            != spec.vocab.num_codes() as usize * (spec.vocab.num_content() as usize).pow(spec.order)
        {
            return Err(Error::format(
                path.display().to_string(),
                "row count mismatch",
            ));
        }
        Ok(spec)
    }
}

/// Corpus split labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
    Public,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
            Split::Public => "public",
        };
        f.write_str(s)
    }
}

/// One record: a control code, a prompt, and a reference continuation
/// (possibly ending in EOS).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub id: u64,
    /// Control-code token index, or `None` when codes are unused.
    pub code: Option<u32>,
    pub prompt: Vec<u32>,
    pub reference: Vec<u32>,
}

/// Model input prefix for an example: `[c, BOS, prompt...]`, or
/// `[BOS, prompt...]` without a code. Returns the tokens and the offset of
/// the first continuation position (= prefix length).
pub fn build_model_input(example: &Example) -> (Vec<u32>, usize) {
    let mut input = Vec::with_capacity(example.prompt.len() + 2);
    if let Some(c) = example.code {
        input.push(c);
    }
    input.push(BOS);
    input.extend_from_slice(&example.prompt);
    let offset = input.len();
    (input, offset)
}

/// A split of examples together with the metadata needed to interpret it.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub order: u32,
    pub split: Split,
    pub chain_hash: String,
    pub seed: u64,
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Fails with an integrity error if this corpus was not generated from
    /// `spec`.
    pub fn verify_chain(&self, spec: &MarkovChainSpec) -> Result<()> {
        let actual = spec.hash();
        if self.chain_hash != actual {
            return Err(Error::Integrity(format!(
                "corpus chain hash {} does not match chain spec hash {}",
                self.chain_hash, actual
            )));
        }
        Ok(())
    }
}

/// Requested split sizes for [`sample_corpus`].
#[derive(Clone, Copy, Debug)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// Train/valid/test splits with disjoint record ids.
#[derive(Clone, Debug)]
pub struct CorpusSet {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

/// Samples one split of `n` examples, assigning ids `id_base..id_base + n`.
pub fn sample_split(
    spec: &MarkovChainSpec,
    n: usize,
    prompt_len: usize,
    total_len: usize,
    split: Split,
    id_base: u64,
    stream: &mut RngStream,
) -> Result<Corpus> {
    if prompt_len == 0 || prompt_len >= total_len {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= prompt_len < total_len, got {prompt_len} and {total_len}"
        )));
    }
    let vocab = spec.vocab();
    let vc = vocab.num_content() as usize;
    let k = vocab.num_codes();
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let ordinal = ((stream.next_f64() * k as f64) as u32).min(k - 1);
        let tokens = roll_sequence(spec, ordinal, prompt_len, total_len, vc, stream)?;
        let prompt = tokens[..prompt_len].to_vec();
        let reference = tokens[prompt_len..].to_vec();
        examples.push(Example {
            id: id_base + i as u64,
            code: Some(vocab.code_token(ordinal)?),
            prompt,
            reference,
        });
    }
    Ok(Corpus {
        vocab,
        order: spec.order(),
        split,
        chain_hash: spec.hash(),
        seed: stream.seed(),
        examples,
    })
}

/// Rolls the chain until `total_len` content tokens or an EOS draw; EOS is
/// kept as the final token. Draws that hit EOS before the prompt is full are
/// resampled, up to a cap of 100 attempts.
fn roll_sequence(
    spec: &MarkovChainSpec,
    code_ordinal: u32,
    prompt_len: usize,
    total_len: usize,
    vc: usize,
    stream: &mut RngStream,
) -> Result<Vec<u32>> {
    let content_base = spec.vocab().content_base();
    'attempt: for _ in 0..RESAMPLE_CAP {
        let mut content_idx: Vec<u32> = Vec::with_capacity(total_len);
        let mut tokens: Vec<u32> = Vec::with_capacity(total_len + 1);
        while tokens.len() < total_len {
            let mgram = pad_mgram(&content_idx, spec.order() as usize);
            let row = spec.row(code_ordinal, &mgram)?;
            let outcome = sample_categorical(row, stream)?;
            if outcome == vc {
                if content_idx.len() < prompt_len {
                    continue 'attempt;
                }
                tokens.push(EOS);
                return Ok(tokens);
            }
            content_idx.push(outcome as u32);
            tokens.push(content_base + outcome as u32);
        }
        return Ok(tokens);
    }
    Err(Error::Contract(format!(
        "gave up sampling an example after {RESAMPLE_CAP} attempts (EOS keeps arriving before \
         prompt_len = {prompt_len})"
    )))
}

/// Last `m` content indices of `hist`, left-padded with content index 0.
fn pad_mgram(hist: &[u32], m: usize) -> Vec<u32> {
    let have = hist.len().min(m);
    let mut out = vec![0; m - have];
    out.extend_from_slice(&hist[hist.len() - have..]);
    out
}

/// Samples disjoint train/valid/test splits from one stream.
pub fn sample_corpus(
    spec: &MarkovChainSpec,
    sizes: SplitSizes,
    prompt_len: usize,
    total_len: usize,
    stream: &mut RngStream,
) -> Result<CorpusSet> {
    let train = sample_split(
        spec,
        sizes.train,
        prompt_len,
        total_len,
        Split::Train,
        0,
        stream,
    )?;
    let valid = sample_split(
        spec,
        sizes.valid,
        prompt_len,
        total_len,
        Split::Valid,
        sizes.train as u64,
        stream,
    )?;
    let test = sample_split(
        spec,
        sizes.test,
        prompt_len,
        total_len,
        Split::Test,
        (sizes.train + sizes.valid) as u64,
        stream,
    )?;
    Ok(CorpusSet { train, valid, test })
}

/// Corpus file header, serialized as the first line of the file.
#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    vocab_size: u32,
    num_codes: u32,
    order: u32,
    split: Split,
    chain_hash: String,
    seed: u64,
    n: usize,
}

/// Renders a corpus in its on-disk format: a single-line JSON header, then
/// one tab-separated example per line
/// (`id<TAB>code<TAB>prompt tokens<TAB>reference tokens`).
pub fn corpus_to_string(corpus: &Corpus) -> Result<String> {
    let header = CorpusHeader {
        vocab_size: corpus.vocab.size(),
        num_codes: corpus.vocab.num_codes(),
        order: corpus.order,
        split: corpus.split,
        chain_hash: corpus.chain_hash.clone(),
        seed: corpus.seed,
        n: corpus.examples.len(),
    };
    let mut out = serde_json::to_string(&header)
        .map_err(|e| Error::format("corpus header", e.to_string()))?;
    out.push('\n');
    for ex in &corpus.examples {
        out.push_str(&ex.id.to_string());
        out.push('\t');
        if let Some(c) = ex.code {
            out.push_str(&c.to_string());
        }
        out.push('\t');
        push_tokens(&mut out, &ex.prompt);
        out.push('\t');
        push_tokens(&mut out, &ex.reference);
        out.push('\n');
    }
    Ok(out)
}

fn push_tokens(out: &mut String, tokens: &[u32]) {
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&t.to_string());
    }
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let text = corpus_to_string(corpus)?;
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parses a corpus file, validating the header, line count, token ranges,
/// and record-id uniqueness. Errors name the offending 1-based line.
pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = BufReader::new(file);
    let pathstr = path.display().to_string();

    let mut header_line = String::new();
    reader
        .read_line(&mut header_line)
        .map_err(|e| Error::io(pathstr.clone(), e))?;
    if header_line.trim().is_empty() {
        return Err(Error::format(&pathstr, "line 1: missing header"));
    }
    let header: CorpusHeader = serde_json::from_str(header_line.trim_end())
        .map_err(|e| Error::format(&pathstr, format!("line 1: bad header: {e}")))?;
    let vocab = Vocab::new(header.vocab_size, header.num_codes)?;

    let mut examples = Vec::with_capacity(header.n);
    let mut seen = std::collections::HashSet::with_capacity(header.n);
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 2;
        let line = line.map_err(|e| Error::io(pathstr.clone(), e))?;
        if line.is_empty() {
            continue;
        }
        let ex = parse_example_line(&line, vocab)
            .map_err(|detail| Error::format(&pathstr, format!("line {lineno}: {detail}")))?;
        if !seen.insert(ex.id) {
            return Err(Error::format(
                &pathstr,
                format!("line {lineno}: duplicate id {}", ex.id),
            ));
        }
        examples.push(ex);
    }
    if examples.len() != header.n {
        return Err(Error::format(
            &pathstr,
            format!(
                "truncated corpus: header says n = {} but found {} examples (last line {})",
                header.n,
                examples.len(),
                examples.len() + 1
            ),
        ));
    }
    Ok(Corpus {
        vocab,
        order: header.order,
        split: header.split,
        chain_hash: header.chain_hash,
        seed: header.seed,
        examples,
    })
}

fn parse_example_line(line: &str, vocab: Vocab) -> std::result::Result<Example, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(format!(
            "expected 4 tab-separated fields, found {}",
            fields.len()
        ));
    }
    let id: u64 = fields[0]
        .parse()
        .map_err(|_| format!("bad id {:?}", fields[0]))?;
    let code = if fields[1].is_empty() {
        None
    } else {
        let c: u32 = fields[1]
            .parse()
            .map_err(|_| format!("bad code {:?}", fields[1]))?;
        if !vocab.is_code(c) {
            return Err(format!("token {c} is not a control code"));
        }
        Some(c)
    };
    let prompt = parse_tokens(fields[2], vocab)?;
    let reference = parse_tokens(fields[3], vocab)?;
    Ok(Example {
        id,
        code,
        prompt,
        reference,
    })
}

fn parse_tokens(field: &str, vocab: Vocab) -> std::result::Result<Vec<u32>, String> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(' ')
        .map(|t| {
            let tok: u32 = t.parse().map_err(|_| format!("bad token {t:?}"))?;
            if tok >= vocab.size() {
                return Err(format!("token {tok} exceeds vocab size {}", vocab.size()));
            }
            Ok(tok)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn small_chain(seed: u64) -> MarkovChainSpec {
        // V = 19 with K = 3 codes leaves 13 content tokens.
        let vocab = Vocab::new(19, 3).unwrap();
        let mut stream = RngStream::new(seed, "data");
        generate_chain(vocab, 2, 0.5, &mut stream).unwrap()
    }

    #[test]
    fn vocab_layout() {
        let v = Vocab::new(32, 4).unwrap();
        assert_eq!(v.code_base(), 3);
        assert_eq!(v.content_base(), 7);
        assert_eq!(v.num_content(), 25);
        assert!(v.is_code(3) && v.is_code(6) && !v.is_code(7));
        assert!(v.is_content(7) && v.is_content(31));
        assert_eq!(v.code_token(0).unwrap(), 3);
        assert!(v.code_token(4).is_err());
        assert_eq!(v.content_index(7), Some(0));
        assert_eq!(v.content_index(2), None);
    }

    #[test]
    fn vocab_too_small_rejected() {
        assert!(Vocab::new(8, 4).is_err());
        assert!(Vocab::new(9, 4).is_ok());
    }

    #[test]
    fn chain_has_expected_rows_and_stochastic_rows() {
        let spec = small_chain(1);
        assert_eq!(spec.num_rows(), 3 * 13 * 13);
        assert_eq!(spec.row_width(), 14);
        for code in 0..3 {
            for a in 0..13 {
                for b in 0..13 {
                    let row = spec.row(code, &[a, b]).unwrap();
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-9, "row sum {sum}");
                    assert!(row.iter().all(|&p| p >= 0.0));
                    assert!(row[row.len() - 1] <= EOS_CAP + 1e-12);
                }
            }
        }
    }

    #[test]
    fn chain_is_deterministic_in_the_stream() {
        let a = small_chain(7);
        let b = small_chain(7);
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        let c = small_chain(8);
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn deterministic_chain_is_one_hot_on_content() {
        let det = small_chain(3).deterministic();
        for code in 0..3 {
            for a in 0..13 {
                for b in 0..13 {
                    let row = det.row(code, &[a, b]).unwrap();
                    let ones = row.iter().filter(|&&p| p == 1.0).count();
                    let zeros = row.iter().filter(|&&p| p == 0.0).count();
                    assert_eq!(ones, 1);
                    assert_eq!(zeros, row.len() - 1);
                    assert_eq!(row[row.len() - 1], 0.0, "EOS must not be the argmax");
                }
            }
        }
    }

    #[test]
    fn chain_roundtrips_through_json() {
        let spec = small_chain(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.json");
        spec.save(&path).unwrap();
        let loaded = MarkovChainSpec::load(&path).unwrap();
        assert_eq!(spec, loaded);
        assert_eq!(spec.hash(), loaded.hash());
    }

    #[test]
    fn conditional_context_pads_and_filters() {
        let spec = small_chain(5);
        let base = spec.vocab().content_base();
        // Window with a code, BOS, and two content tokens.
        assert_eq!(
            spec.conditional_context(&[3, BOS, base + 5, base + 7]),
            vec![5, 7]
        );
        // Shorter history pads on the left with content index 0.
        assert_eq!(spec.conditional_context(&[3, BOS, base + 9]), vec![0, 9]);
        assert_eq!(spec.conditional_context(&[]), vec![0, 0]);
    }

    #[test]
    fn next_distribution_reads_code_from_window() {
        let spec = small_chain(6);
        let base = spec.vocab().content_base();
        let window = [4, BOS, base + 1, base + 2];
        let got = spec.next_distribution(&window).unwrap();
        assert_eq!(got, spec.row(1, &[1, 2]).unwrap());
    }

    #[test]
    fn next_distribution_without_code_averages() {
        let spec = small_chain(6);
        let base = spec.vocab().content_base();
        let got = spec.next_distribution(&[base + 1, base + 2]).unwrap();
        let mut expect = vec![0.0; spec.row_width()];
        for code in 0..3 {
            for (acc, &p) in expect.iter_mut().zip(spec.row(code, &[1, 2]).unwrap()) {
                *acc += p / 3.0;
            }
        }
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn sampled_splits_are_disjoint_and_sized() {
        let spec = small_chain(9);
        let mut stream = RngStream::new(9, "corpus");
        let sizes = SplitSizes {
            train: 20,
            valid: 10,
            test: 5,
        };
        let set = sample_corpus(&spec, sizes, 4, 12, &mut stream).unwrap();
        assert_eq!(set.train.len(), 20);
        assert_eq!(set.valid.len(), 10);
        assert_eq!(set.test.len(), 5);
        assert_eq!(set.train.split, Split::Train);
        let mut ids = std::collections::HashSet::new();
        for ex in set
            .train
            .examples
            .iter()
            .chain(&set.valid.examples)
            .chain(&set.test.examples)
        {
            assert!(ids.insert(ex.id), "duplicate id {}", ex.id);
            assert_eq!(ex.prompt.len(), 4);
            assert!(ex.prompt.iter().all(|&t| spec.vocab().is_content(t)));
            assert!(!ex.reference.is_empty());
            assert!(ex.reference.len() <= 12 - 4 + 1);
            for (i, &t) in ex.reference.iter().enumerate() {
                if t == EOS {
                    assert_eq!(i, ex.reference.len() - 1, "EOS only as final token");
                } else {
                    assert!(spec.vocab().is_content(t));
                }
            }
        }
        assert_eq!(ids.len(), 35);
    }

    #[test]
    fn sampling_is_reproducible_from_the_stream() {
        let spec = small_chain(10);
        let sizes = SplitSizes {
            train: 8,
            valid: 4,
            test: 4,
        };
        let mut s1 = RngStream::new(77, "corpus");
        let mut s2 = RngStream::new(77, "corpus");
        let a = sample_corpus(&spec, sizes, 4, 16, &mut s1).unwrap();
        let b = sample_corpus(&spec, sizes, 4, 16, &mut s2).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.valid, b.valid);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn deterministic_chain_gives_identical_sequences_per_code() {
        let det = small_chain(11).deterministic();
        let mut stream = RngStream::new(11, "corpus");
        let corpus = sample_split(&det, 40, 4, 12, Split::Train, 0, &mut stream).unwrap();
        let mut by_code: HashMap<u32, (Vec<u32>, Vec<u32>)> = HashMap::new();
        for ex in &corpus.examples {
            let entry = by_code
                .entry(ex.code.unwrap())
                .or_insert_with(|| (ex.prompt.clone(), ex.reference.clone()));
            assert_eq!(entry.0, ex.prompt);
            assert_eq!(entry.1, ex.reference);
        }
    }

    #[test]
    fn empirical_conditionals_match_chain_rows() {
        // Order-1 single-code chain so each context gets thousands of visits.
        let vocab = Vocab::new(14, 1).unwrap();
        let mut stream = RngStream::new(123, "chain");
        let spec = generate_chain(vocab, 1, 0.5, &mut stream).unwrap();
        let vc = vocab.num_content() as usize;

        let mut sampler = RngStream::new(124, "tv");
        let mut counts: Vec<Vec<f64>> = vec![vec![0.0; vc + 1]; vc];
        let mut total = 0usize;
        while total < 100_000 {
            let corpus = sample_split(&spec, 50, 2, 60, Split::Train, 0, &mut sampler).unwrap();
            for ex in &corpus.examples {
                let mut hist: Vec<u32> = Vec::new();
                let tokens: Vec<u32> = ex.prompt.iter().chain(&ex.reference).copied().collect();
                for &t in &tokens {
                    if !hist.is_empty() {
                        let ctx = hist[hist.len() - 1] as usize;
                        let outcome = if t == EOS {
                            vc
                        } else {
                            vocab.content_index(t).unwrap() as usize
                        };
                        counts[ctx][outcome] += 1.0;
                        total += 1;
                    }
                    if t != EOS {
                        hist.push(vocab.content_index(t).unwrap());
                    }
                }
            }
        }

        for (ctx, row_counts) in counts.iter().enumerate() {
            let n: f64 = row_counts.iter().sum();
            if n < 500.0 {
                continue;
            }
            let row = spec.row(0, &[ctx as u32]).unwrap();
            let tv: f64 = row_counts
                .iter()
                .zip(row)
                .map(|(c, p)| (c / n - p).abs())
                .sum::<f64>()
                / 2.0;
            let bound = if n >= 5000.0 { 0.02 } else { 0.05 };
            assert!(tv <= bound, "context {ctx}: TV {tv} over {n} observations");
        }
    }

    #[test]
    fn build_model_input_layout() {
        let ex = Example {
            id: 0,
            code: Some(5),
            prompt: vec![9, 8, 7],
            reference: vec![],
        };
        let (input, offset) = build_model_input(&ex);
        assert_eq!(input, vec![5, BOS, 9, 8, 7]);
        assert_eq!(offset, 5);

        let bare = Example {
            id: 1,
            code: None,
            prompt: vec![9, 8],
            reference: vec![],
        };
        let (input, offset) = build_model_input(&bare);
        assert_eq!(input, vec![BOS, 9, 8]);
        assert_eq!(offset, 3);
    }

    #[test]
    fn corpus_file_roundtrip_is_byte_identical() {
        let spec = small_chain(12);
        let mut stream = RngStream::new(12, "corpus");
        let corpus = sample_split(&spec, 10, 4, 12, Split::Valid, 100, &mut stream).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("valid.tsv");
        write_corpus(&corpus, &path).unwrap();
        let first = std::fs::read(&path).unwrap();

        let loaded = read_corpus(&path).unwrap();
        assert_eq!(loaded, corpus);

        write_corpus(&loaded, &path).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn corpus_header_is_single_line_json_with_expected_keys() {
        let spec = small_chain(13);
        let mut stream = RngStream::new(13, "corpus");
        let corpus = sample_split(&spec, 3, 4, 12, Split::Train, 0, &mut stream).unwrap();
        let text = corpus_to_string(&corpus).unwrap();
        let header = text.lines().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(header).unwrap();
        assert_eq!(v["vocab_size"], 19);
        assert_eq!(v["num_codes"], 3);
        assert_eq!(v["order"], 2);
        assert_eq!(v["split"], "train");
        assert_eq!(v["seed"], 13);
        assert_eq!(v["n"], 3);
        assert_eq!(v["chain_hash"], serde_json::Value::String(spec.hash()));
    }

    #[test]
    fn truncated_corpus_reports_line() {
        let spec = small_chain(14);
        let mut stream = RngStream::new(14, "corpus");
        let corpus = sample_split(&spec, 5, 4, 12, Split::Train, 0, &mut stream).unwrap();
        let text = corpus_to_string(&corpus).unwrap();
        let truncated: Vec<&str> = text.lines().take(4).collect();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.tsv");
        std::fs::write(&path, truncated.join("\n")).unwrap();
        let err = read_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "unexpected error: {err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let spec = small_chain(15);
        let mut stream = RngStream::new(15, "corpus");
        let corpus = sample_split(&spec, 3, 4, 12, Split::Train, 0, &mut stream).unwrap();
        let mut text = corpus_to_string(&corpus).unwrap();
        text.push_str("not a line\n");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, text).unwrap();
        let err = read_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("line 5"), "unexpected error: {err}");
    }

    #[test]
    fn out_of_vocab_token_rejected() {
        let spec = small_chain(16);
        let mut stream = RngStream::new(16, "corpus");
        let corpus = sample_split(&spec, 2, 4, 12, Split::Train, 0, &mut stream).unwrap();
        let text = corpus_to_string(&corpus).unwrap();
        let hacked: Vec<String> = text
            .lines()
            .enumerate()
            .map(|(i, line)| {
                if i != 1 {
                    return line.to_string();
                }
                let mut fields: Vec<String> = line.split('\t').map(String::from).collect();
                fields[2] = format!("99 {}", fields[2]);
                fields.join("\t")
            })
            .collect();
        let hacked = hacked.join("\n");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oov.tsv");
        std::fs::write(&path, hacked).unwrap();
        let err = read_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("exceeds vocab"), "unexpected error: {err}");
    }

    #[test]
    fn chain_hash_mismatch_is_an_integrity_error() {
        let spec = small_chain(17);
        let other = small_chain(18);
        let mut stream = RngStream::new(17, "corpus");
        let corpus = sample_split(&spec, 2, 4, 12, Split::Train, 0, &mut stream).unwrap();
        assert!(corpus.verify_chain(&spec).is_ok());
        assert!(matches!(
            corpus.verify_chain(&other),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn duplicate_ids_rejected_on_read() {
        let spec = small_chain(19);
        let mut stream = RngStream::new(19, "corpus");
        let corpus = sample_split(&spec, 2, 4, 12, Split::Train, 0, &mut stream).unwrap();
        let text = corpus_to_string(&corpus).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[1].clone();
        // Fix the count so only the duplicate id triggers.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.tsv");
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = read_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("duplicate id"), "unexpected error: {err}");
    }
}
