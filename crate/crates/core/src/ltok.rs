//! The client's secret tokenizer: a seeded uniform permutation of token indices.
//!
//! The permutation file stores only `(size, seed)`; both directions of the mapping are
//! regenerated on load.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;
use crate::wire::{truncation_as_format, Reader};

pub const PERM_MAGIC: &[u8; 4] = b"NPRM";
pub const PERM_VERSION: u16 = 1;

#[derive(Clone, PartialEq, Eq)]
pub struct TokenPermutation {
    seed: u64,
    forward: Vec<u32>,
    inverse: Vec<u32>,
}

// Keep the table out of debug output.
impl std::fmt::Debug for TokenPermutation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TokenPermutation")
            .field("size", &self.size())
            .finish_non_exhaustive()
    }
}

impl TokenPermutation {
    /// Fisher-Yates shuffle of `0..size` driven by a ChaCha generator seeded with `seed`.
    pub fn generate(size: usize, seed: u64) -> Result<Self> {
        if size == 0 || size > u32::MAX as usize {
            return Err(Error::argument(format!("permutation size must be in 1..=2^32-1, got {size}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut forward: Vec<u32> = (0..size as u32).collect();
        for i in (1..size).rev() {
            let j = rng.gen_range(0..=i);
            forward.swap(i, j);
        }
        let mut inverse = vec![0u32; size];
        for (orig, &local) in forward.iter().enumerate() {
            inverse[local as usize] = orig as u32;
        }
        Ok(Self {
            seed,
            forward,
            inverse,
        })
    }

    pub fn identity(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::argument("permutation size must be >= 1"));
        }
        let forward: Vec<u32> = (0..size as u32).collect();
        Ok(Self {
            seed: 0,
            inverse: forward.clone(),
            forward,
        })
    }

    pub fn size(&self) -> usize {
        self.forward.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Original index -> local index.
    pub fn forward(&self, original: usize) -> Result<usize> {
        self.forward
            .get(original)
            .map(|&l| l as usize)
            .ok_or(Error::Index {
                index: original,
                size: self.size(),
            })
    }

    /// Local index -> original index.
    pub fn inverse(&self, local: usize) -> Result<usize> {
        self.inverse
            .get(local)
            .map(|&o| o as usize)
            .ok_or(Error::Index {
                index: local,
                size: self.size(),
            })
    }

    pub fn forward_table(&self) -> &[u32] {
        &self.forward
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18);
        out.extend_from_slice(PERM_MAGIC);
        out.extend_from_slice(&PERM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.size() as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let parsed = (|| {
            if r.take(4)? != PERM_MAGIC {
                return Err(Error::format("bad permutation magic"));
            }
            let version = r.u16()?;
            if version != PERM_VERSION {
                return Err(Error::format(format!("unsupported permutation version {version}")));
            }
            let size = r.u32()? as usize;
            let seed = r.u64()?;
            Ok((size, seed))
        })()
        .map_err(truncation_as_format)?;
        if r.remaining() != 0 {
            return Err(Error::format("trailing bytes in permutation file"));
        }
        Self::generate(parsed.0, parsed.1)
    }
}

pub fn load_permutation(path: impl AsRef<Path>) -> Result<TokenPermutation> {
    TokenPermutation::from_bytes(&fs::read(path)?)
}

pub fn save_permutation(perm: &TokenPermutation, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, perm.to_bytes())?;
    Ok(())
}

/// Greedy longest-match segmentation. Unmatched whitespace is skipped; any other unmatched
/// character is an error carrying its byte offset.
pub fn segment(text: &str, vocab: &Vocabulary) -> Result<Vec<String>> {
    let longest = vocab.tokens().iter().map(String::len).max().unwrap_or(0);
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let rest = &text[pos..];
        let limit = longest.min(rest.len());
        let found = (1..=limit)
            .rev()
            .filter(|&len| rest.is_char_boundary(len))
            .find(|&len| vocab.index_of(&rest[..len]).is_some());
        match found {
            Some(len) => {
                out.push(rest[..len].to_string());
                pos += len;
            }
            None => {
                let ch = rest.chars().next().expect("non-empty remainder");
                if ch.is_whitespace() {
                    pos += ch.len_utf8();
                } else {
                    return Err(Error::Unsegmentable { offset: pos });
                }
            }
        }
    }
    Ok(out)
}

pub fn encode<S: AsRef<str>>(tokens: &[S], perm: &TokenPermutation, vocab: &Vocabulary) -> Result<Vec<usize>> {
    check_sizes(perm, vocab)?;
    vocab
        .resolve(tokens)?
        .into_iter()
        .map(|t| perm.forward(t))
        .collect()
}

pub fn decode(indices: &[usize], perm: &TokenPermutation, vocab: &Vocabulary) -> Result<Vec<String>> {
    check_sizes(perm, vocab)?;
    indices
        .iter()
        .map(|&l| Ok(vocab.token(perm.inverse(l)?)?.to_string()))
        .collect()
}

fn check_sizes(perm: &TokenPermutation, vocab: &Vocabulary) -> Result<()> {
    if perm.size() != vocab.len() {
        return Err(Error::DimensionMismatch(format!(
            "permutation covers {} tokens, vocabulary has {}",
            perm.size(),
            vocab.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::synth_vocabulary;

    fn words(list: &[&str]) -> Vocabulary {
        Vocabulary::new(
            list.iter().map(|s| s.to_string()).collect(),
            (0..list.len()).map(|i| i as f32).collect(),
            1,
        )
        .unwrap()
    }

    #[test]
    fn trivial_and_deterministic() {
        assert_eq!(TokenPermutation::generate(1, 99).unwrap().forward_table(), &[0]);
        let a = TokenPermutation::generate(50, 3).unwrap();
        let b = TokenPermutation::generate(50, 3).unwrap();
        assert_eq!(a, b);
        assert!(TokenPermutation::generate(0, 3).is_err());
    }

    #[test]
    fn inverse_is_inverse() {
        let p = TokenPermutation::generate(100, 17).unwrap();
        for t in 0..100 {
            assert_eq!(p.inverse(p.forward(t).unwrap()).unwrap(), t);
        }
        let mut seen = p.forward_table().to_vec();
        seen.sort_unstable();
        assert_eq!(seen, (0..100).collect::<Vec<u32>>());
    }

    #[test]
    fn file_round_trip_regenerates() {
        let p = TokenPermutation::generate(37, 5).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), 18);
        assert_eq!(TokenPermutation::from_bytes(&bytes).unwrap(), p);
        assert!(matches!(TokenPermutation::from_bytes(&bytes[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn debug_hides_table() {
        let p = TokenPermutation::generate(5, 5).unwrap();
        assert!(!format!("{p:?}").contains("forward:"));
    }

    #[test]
    fn segmentation() {
        assert_eq!(segment("ab", &words(&["ab", "a", "b"])).unwrap(), vec!["ab"]);
        assert_eq!(segment("ab", &words(&["a", "b"])).unwrap(), vec!["a", "b"]);
        assert_eq!(segment("a b", &words(&["a", "b"])).unwrap(), vec!["a", "b"]);
        assert_eq!(segment("a b", &words(&["a", "b", " "])).unwrap(), vec!["a", " ", "b"]);
        assert!(matches!(
            segment("ax", &words(&["a", "b"])),
            Err(Error::Unsegmentable { offset: 1 })
        ));
        assert!(matches!(
            segment("aé", &words(&["a", "b"])),
            Err(Error::Unsegmentable { offset: 1 })
        ));
    }

    #[test]
    fn encode_decode() {
        let v = words(&["a", "b", "c", "d", "e", "f"]);
        let id = TokenPermutation::identity(6).unwrap();
        assert_eq!(encode(&["c", "a"], &id, &v).unwrap(), vec![2, 0]);
        let p = TokenPermutation::generate(6, 8).unwrap();
        assert_eq!(decode(&encode(&["a", "b"], &p, &v).unwrap(), &p, &v).unwrap(), vec!["a", "b"]);
        assert!(matches!(encode(&["zz"], &p, &v), Err(Error::UnknownToken { .. })));
        assert!(matches!(decode(&[6], &p, &v), Err(Error::Index { .. })));
    }

    #[test]
    fn round_trip_random_sequences() {
        let v = synth_vocabulary(6, 1, 0, 1.0).unwrap();
        let p = TokenPermutation::generate(6, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let len = rng.gen_range(1..20);
            let seq: Vec<String> = (0..len).map(|_| v.tokens()[rng.gen_range(0..6)].clone()).collect();
            assert_eq!(decode(&encode(&seq, &p, &v).unwrap(), &p, &v).unwrap(), seq);
        }
    }

    #[test]
    fn cloud_side_identity_decoding_mismatches_moved_tokens() {
        let v = words(&["def", "function", "jump", "return", "x", "y"]);
        let p = TokenPermutation::generate(6, 2).unwrap();
        let id = TokenPermutation::identity(6).unwrap();
        for t in 0..6 {
            let local = encode(&[v.tokens()[t].as_str()], &p, &v).unwrap();
            let seen = decode(&local, &id, &v).unwrap();
            assert_eq!(seen[0] == v.tokens()[t], p.forward(t).unwrap() == t);
        }
    }
}
