use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A deterministic "language pair": target = cipher(source), reversed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyPairSpec {
    pub alphabet: String,
    /// Image of each alphabet character, in alphabet order. The images may
    /// come from a different script than the alphabet.
    pub cipher: String,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for ToyPairSpec {
    fn default() -> Self {
        let mut spec = Self::shifted("ABCDEFGHKLMN", 5, 3, 8);
        spec.cipher = spec.cipher.to_lowercase();
        spec
    }
}

impl ToyPairSpec {
    /// Cipher that rotates the alphabet by `shift` positions.
    pub fn shifted(alphabet: &str, shift: usize, min_len: usize, max_len: usize) -> Self {
        let chars: Vec<char> = alphabet.chars().collect();
        let n = chars.len().max(1);
        let cipher = (0..chars.len()).map(|i| chars[(i + shift) % n]).collect();
        Self {
            alphabet: alphabet.to_string(),
            cipher,
            min_len,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a: Vec<char> = self.alphabet.chars().collect();
        let c: Vec<char> = self.cipher.chars().collect();
        let set_a: BTreeSet<char> = a.iter().copied().collect();
        let set_c: BTreeSet<char> = c.iter().copied().collect();
        if a.is_empty() || set_a.len() != a.len() {
            return Err(Error::Config("alphabet must be non-empty with unique characters".into()));
        }
        if c.len() != a.len() || set_c.len() != c.len() {
            return Err(Error::Config(
                "cipher must list one distinct image per alphabet character".into(),
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("length range must satisfy 1 <= min_len <= max_len".into()));
        }
        Ok(())
    }

    pub fn forward_map(&self) -> BTreeMap<char, char> {
        self.alphabet.chars().zip(self.cipher.chars()).collect()
    }

    pub fn inverse_map(&self) -> BTreeMap<char, char> {
        self.cipher.chars().zip(self.alphabet.chars()).collect()
    }

    pub fn translate(&self, source: &str) -> String {
        let map = self.forward_map();
        source.chars().rev().map(|c| map.get(&c).copied().unwrap_or(c)).collect()
    }

    pub fn invert(&self, target: &str) -> String {
        let map = self.inverse_map();
        target.chars().rev().map(|c| map.get(&c).copied().unwrap_or(c)).collect()
    }
}

pub fn make_toy_parallel(spec: &ToyPairSpec, n: usize, seed: u64) -> Result<Vec<(String, String)>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let alphabet: Vec<char> = spec.alphabet.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let src: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
            let tgt = spec.translate(&src);
            (src, tgt)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cipher_then_reverse() {
        let spec = ToyPairSpec {
            alphabet: "abc".into(),
            cipher: "xyz".into(),
            min_len: 1,
            max_len: 3,
        };
        spec.validate().unwrap();
        assert_eq!(spec.translate("abc"), "zyx");
        assert_eq!(spec.invert("zyx"), "abc");
        let bad = ToyPairSpec {
            cipher: "xxz".into(),
            ..spec
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pairs_respect_length_and_invert() {
        let spec = ToyPairSpec::default();
        let pairs = make_toy_parallel(&spec, 100, 3).unwrap();
        assert_eq!(pairs.len(), 100);
        for (s, t) in &pairs {
            let n = s.chars().count();
            assert!((spec.min_len..=spec.max_len).contains(&n));
            assert_eq!(&spec.invert(t), s);
        }
        assert_eq!(pairs, make_toy_parallel(&spec, 100, 3).unwrap());
    }
}
