use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::{canonical_digest, canonical_encode};
use crate::error::{Error, Result};

/// A named list of token-id prompts. The digest is SHA-256 over the canonical
/// encoding of `{name, sequences}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub name: String,
    pub sequences: Vec<Vec<u32>>,
}

#[derive(Serialize)]
struct PromptContent<'a> {
    name: &'a str,
    sequences: &'a [Vec<u32>],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptFile {
    name: String,
    sequences: Vec<Vec<u32>>,
    digest: String,
}

impl PromptSet {
    pub fn new(name: impl Into<String>, sequences: Vec<Vec<u32>>) -> Result<Self> {
        let set = PromptSet {
            name: name.into(),
            sequences,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::Input(format!("prompt set `{}` is empty", self.name)));
        }
        if let Some(i) = self.sequences.iter().position(|s| s.len() < 2) {
            return Err(Error::Input(format!(
                "prompt {i} of `{}` has fewer than 2 tokens",
                self.name
            )));
        }
        Ok(())
    }

    /// Seeded random prompts with lengths drawn from `min_len..=max_len`.
    pub fn random(
        name: impl Into<String>,
        count: usize,
        min_len: usize,
        max_len: usize,
        vocab: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sequences = (0..count)
            .map(|_| {
                let len = rng.gen_range(min_len..=max_len);
                (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
            })
            .collect();
        PromptSet::new(name, sequences)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn digest(&self) -> Result<String> {
        canonical_digest(&PromptContent {
            name: &self.name,
            sequences: &self.sequences,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        canonical_encode(&PromptFile {
            name: self.name.clone(),
            sequences: self.sequences.clone(),
            digest: self.digest()?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Reads `prompts.json`; a stored digest that disagrees with the content is
    /// rejected.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: PromptFile = serde_json::from_slice(&bytes)?;
        let set = PromptSet::new(file.name, file.sequences)?;
        let found = set.digest()?;
        if found != file.digest {
            return Err(Error::DigestMismatch {
                name: path.display().to_string(),
                expected: file.digest,
                found,
            });
        }
        Ok(set)
    }
}
