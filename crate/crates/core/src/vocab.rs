//! Vocabularies with embedding matrices, and corpora of prompt/code/test records.
//!
//! The binary vocabulary layout is
//! `"NVCB" | version u16 | |V| u32 | m u32 | |V| x (len u32, utf8) | |V|*m f32`, all little-endian,
//! with the matrix stored row-major.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::wire::{put_f32s, truncation_as_format, Reader};

pub const VOCAB_MAGIC: &[u8; 4] = b"NVCB";
pub const VOCAB_VERSION: u16 = 1;

/// Token strings paired with a `|V| x m` embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    embeddings: Vec<f32>,
    dim: usize,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, embeddings: Vec<f32>, dim: usize) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Validation(format!(
                "vocabulary needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        if dim == 0 {
            return Err(Error::Validation("embedding dimension must be >= 1".into()));
        }
        if embeddings.len() != tokens.len() * dim {
            return Err(Error::Validation(format!(
                "embedding matrix has {} values, expected {} x {}",
                embeddings.len(),
                tokens.len(),
                dim
            )));
        }
        if let Some(pos) = embeddings.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value at token {}, feature {}",
                pos / dim,
                pos % dim
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self {
            tokens,
            embeddings,
            dim,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of features per embedding (`m`).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, index: usize) -> Result<&str> {
        self.tokens
            .get(index)
            .map(String::as_str)
            .ok_or(Error::Index {
                index,
                size: self.len(),
            })
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn row(&self, token: usize) -> &[f32] {
        &self.embeddings[token * self.dim..(token + 1) * self.dim]
    }

    pub fn value(&self, token: usize, feature: usize) -> f32 {
        self.embeddings[token * self.dim + feature]
    }

    pub fn column(&self, feature: usize) -> Vec<f32> {
        (0..self.len()).map(|t| self.value(t, feature)).collect()
    }

    pub(crate) fn check_cell(&self, token: usize, feature: usize) -> Result<()> {
        if token >= self.len() {
            return Err(Error::Index {
                index: token,
                size: self.len(),
            });
        }
        if feature >= self.dim {
            return Err(Error::Index {
                index: feature,
                size: self.dim,
            });
        }
        Ok(())
    }

    /// Resolves a token sequence to vocabulary indices.
    pub fn resolve<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.index_of(t.as_ref()).ok_or_else(|| Error::UnknownToken {
                    token: t.as_ref().to_string(),
                    line: None,
                })
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.embeddings.len() * 4);
        out.extend_from_slice(VOCAB_MAGIC);
        out.extend_from_slice(&VOCAB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for tok in &self.tokens {
            out.extend_from_slice(&(tok.len() as u32).to_le_bytes());
            out.extend_from_slice(tok.as_bytes());
        }
        put_f32s(&mut out, &self.embeddings);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let vocab = Self::read(&mut r).map_err(truncation_as_format)?;
        if r.remaining() != 0 {
            return Err(Error::format(format!(
                "{} trailing bytes after embedding matrix",
                r.remaining()
            )));
        }
        Ok(vocab)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        if r.take(4)? != VOCAB_MAGIC {
            return Err(Error::format("bad vocabulary magic"));
        }
        let version = r.u16()?;
        if version != VOCAB_VERSION {
            return Err(Error::format(format!("unsupported vocabulary version {version}")));
        }
        let size = r.u32()? as usize;
        let dim = r.u32()? as usize;
        // Each token needs at least its 4-byte length prefix.
        if size.saturating_mul(4) > r.remaining() {
            return Err(Error::format(format!(
                "header declares {size} tokens but the body is only {} bytes",
                r.remaining()
            )));
        }
        let mut tokens = Vec::with_capacity(size);
        for _ in 0..size {
            let len = r.u32()? as usize;
            let raw = r.take(len)?;
            let tok = std::str::from_utf8(raw)
                .map_err(|_| Error::format("token is not valid UTF-8"))?;
            tokens.push(tok.to_string());
        }
        let embeddings = r.f32_vec(
            size.checked_mul(dim)
                .ok_or_else(|| Error::format("matrix size overflow"))?,
        )?;
        Self::new(tokens, embeddings, dim)
    }

    /// SHA-256 over the canonical binary encoding.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<Vocabulary> {
    Vocabulary::from_bytes(&fs::read(path)?)
}

pub fn save_vocabulary(vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, vocab.to_bytes())?;
    Ok(())
}

/// Deterministic synthetic vocabulary: tokens `tok0000..`, features i.i.d. uniform in `[-scale, scale]`.
pub fn synth_vocabulary(size: usize, dim: usize, seed: u64, scale: f32) -> Result<Vocabulary> {
    if size < 2 {
        return Err(Error::argument(format!("vocabulary size must be >= 2, got {size}")));
    }
    if dim < 1 {
        return Err(Error::argument("embedding dimension must be >= 1"));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::argument(format!("scale must be positive, got {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..size).map(|i| format!("tok{i:04}")).collect();
    let embeddings = (0..size * dim)
        .map(|_| rng.gen_range(-scale..=scale))
        .collect();
    Vocabulary::new(tokens, embeddings, dim)
}

/// One prompt/code pair with its unit tests, stored as vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusRecord {
    pub prompt: Vec<usize>,
    pub code: Vec<usize>,
    pub tests: Vec<String>,
    pub pass_truth: Option<Vec<bool>>,
}

impl CorpusRecord {
    pub fn new(prompt: Vec<usize>, code: Vec<usize>) -> Self {
        Self {
            prompt,
            code,
            tests: Vec::new(),
            pass_truth: None,
        }
    }
}

fn resolve_field(field: &str, vocab: &Vocabulary, line: usize) -> Result<Vec<usize>> {
    field
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(|t| {
            vocab.index_of(t).ok_or_else(|| Error::UnknownToken {
                token: t.to_string(),
                line: Some(line),
            })
        })
        .collect()
}

/// Parses the tab-separated corpus text format. Blank lines and lines starting with `#` are skipped.
pub fn parse_corpus(text: &str, vocab: &Vocabulary) -> Result<Vec<CorpusRecord>> {
    let mut records = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(Error::format(format!(
                "line {line_no}: expected 3 or 4 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let prompt = resolve_field(fields[0], vocab, line_no)?;
        if prompt.is_empty() {
            return Err(Error::format(format!("line {line_no}: empty prompt")));
        }
        let code = resolve_field(fields[1], vocab, line_no)?;
        let tests: Vec<String> = fields[2]
            .split(';')
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        let pass_truth = match fields.get(3) {
            None | Some(&"") => None,
            Some(bits) => {
                let parsed = bits
                    .chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        other => Err(Error::format(format!(
                            "line {line_no}: bad pass bitmap character {other:?}"
                        ))),
                    })
                    .collect::<Result<Vec<bool>>>()?;
                if parsed.len() != tests.len() {
                    return Err(Error::format(format!(
                        "line {line_no}: pass bitmap has {} entries for {} tests",
                        parsed.len(),
                        tests.len()
                    )));
                }
                Some(parsed)
            }
        };
        records.push(CorpusRecord {
            prompt,
            code,
            tests,
            pass_truth,
        });
    }
    Ok(records)
}

pub fn format_corpus(records: &[CorpusRecord], vocab: &Vocabulary) -> Result<String> {
    let join = |ids: &[usize]| -> Result<String> {
        Ok(ids
            .iter()
            .map(|&i| vocab.token(i))
            .collect::<Result<Vec<_>>>()?
            .join(" "))
    };
    let mut out = String::new();
    for rec in records {
        for &id in rec.prompt.iter().chain(&rec.code) {
            let tok = vocab.token(id)?;
            if tok.is_empty() || tok.contains([' ', '\t', '\n', '\r']) {
                return Err(Error::format(format!(
                    "token {tok:?} cannot be written in the corpus text format"
                )));
            }
        }
        let _ = write!(out, "{}\t{}\t{}", join(&rec.prompt)?, join(&rec.code)?, rec.tests.join(";"));
        if let Some(bits) = &rec.pass_truth {
            out.push('\t');
            out.extend(bits.iter().map(|&b| if b { '1' } else { '0' }));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<CorpusRecord>> {
    parse_corpus(&fs::read_to_string(path)?, vocab)
}

pub fn save_corpus(records: &[CorpusRecord], vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_corpus(records, vocab)?)?;
    Ok(())
}

/// Random corpus over `vocab`, used by fixtures and tests.
pub fn synth_corpus(
    vocab: &Vocabulary,
    records: usize,
    prompt_len: usize,
    code_len: usize,
    seed: u64,
) -> Vec<CorpusRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..records)
        .map(|r| {
            let prompt = (0..prompt_len.max(1)).map(|_| rng.gen_range(0..vocab.len())).collect();
            let code = (0..code_len).map(|_| rng.gen_range(0..vocab.len())).collect();
            let n_tests = rng.gen_range(1..=3);
            let tests = (0..n_tests).map(|k| format!("r{r}_u{k}")).collect();
            let pass_truth = Some((0..n_tests).map(|_| rng.gen_bool(0.8)).collect());
            CorpusRecord {
                prompt,
                code,
                tests,
                pass_truth,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_token_bytes(declared: u32, rows: usize) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(VOCAB_MAGIC);
        out.extend_from_slice(&VOCAB_VERSION.to_le_bytes());
        out.extend_from_slice(&declared.to_le_bytes());
        out.extend_from_slice(&1u32.to_le_bytes());
        for i in 0..declared {
            let t = format!("t{i}");
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            out.extend_from_slice(t.as_bytes());
        }
        for i in 0..rows {
            out.extend_from_slice(&(i as f32).to_le_bytes());
        }
        out
    }

    #[test]
    fn minimal_file_loads() {
        let v = Vocabulary::from_bytes(&two_token_bytes(2, 2)).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.dim(), 1);
        assert_eq!(v.column(0), vec![0.0, 1.0]);
    }

    #[test]
    fn header_body_mismatch_is_format_error() {
        let err = Vocabulary::from_bytes(&two_token_bytes(3, 2)).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err:?}");
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = two_token_bytes(2, 2);
        b[0] = b'X';
        assert!(matches!(Vocabulary::from_bytes(&b), Err(Error::Format(_))));
        let mut b = two_token_bytes(2, 2);
        b[4] = 9;
        assert!(matches!(Vocabulary::from_bytes(&b), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_duplicates_and_non_finite() {
        let dup = Vocabulary::new(vec!["a".into(), "a".into()], vec![0.0, 1.0], 1);
        assert!(matches!(dup, Err(Error::Validation(_))));
        let nan = Vocabulary::new(vec!["a".into(), "b".into()], vec![0.0, f32::NAN], 1);
        assert!(matches!(nan, Err(Error::Validation(_))));
        let inf = Vocabulary::new(vec!["a".into(), "b".into()], vec![f32::INFINITY, 0.0], 1);
        assert!(matches!(inf, Err(Error::Validation(_))));
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nvcb");
        let v = synth_vocabulary(6, 3, 42, 1.0).unwrap();
        save_vocabulary(&v, &path).unwrap();
        let back = load_vocabulary(&path).unwrap();
        let bits = |x: &Vocabulary| x.embeddings().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&v), bits(&back));
        assert_eq!(bits(&back).len(), 18);
        let first = std::fs::read(&path).unwrap();
        save_vocabulary(&back, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn save_to_unwritable_location_is_io_error() {
        let v = synth_vocabulary(2, 1, 0, 1.0).unwrap();
        let err = save_vocabulary(&v, "/nonexistent-dir/sub/v.nvcb").unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn synth_is_deterministic_and_bounded() {
        assert_eq!(
            synth_vocabulary(6, 3, 42, 1.0).unwrap(),
            synth_vocabulary(6, 3, 42, 1.0).unwrap()
        );
        let v = synth_vocabulary(2, 1, 7, 1.0).unwrap();
        assert!(v.embeddings().iter().all(|x| (-1.0..=1.0).contains(x)));
        assert_eq!(v.token(0).unwrap(), "tok0000");
        assert!(matches!(synth_vocabulary(1, 1, 7, 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn corpus_parsing() {
        let v = synth_vocabulary(6, 3, 1, 1.0).unwrap();
        let text = "tok0000 tok0001\ttok0002\tu1;u2\t10\ntok0005\t\tu9\n";
        let recs = parse_corpus(text, &v).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].prompt, vec![0, 1]);
        assert_eq!(recs[0].pass_truth, Some(vec![true, false]));
        assert!(recs[1].code.is_empty());
        assert_eq!(recs[1].pass_truth, None);

        let err = parse_corpus("tok0000\ttok0001\tu1\nbogus\t\tu\n", &v).unwrap_err();
        match err {
            Error::UnknownToken { token, line } => {
                assert_eq!(token, "bogus");
                assert_eq!(line, Some(2));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_corpus("tok0000\n", &v), Err(Error::Format(_))));
    }

    #[test]
    fn corpus_round_trip() {
        let v = synth_vocabulary(6, 3, 1, 1.0).unwrap();
        let recs = synth_corpus(&v, 100, 5, 4, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        save_corpus(&recs, &v, &path).unwrap();
        assert_eq!(load_corpus(&path, &v).unwrap(), recs);
    }
}
