//! Reproducible ballot selection from a published seed.
//!
//! Index `counter` is derived from SHA-256(seed || counter || attempt), with
//! the counter as 8 big-endian bytes and the attempt as 4 big-endian bytes.
//! The leading 8 bytes of the digest are read as a big-endian integer and
//! accepted only below the largest multiple of N, so the mapping onto [1, N]
//! carries no modulo bias. A rejected value moves to the next attempt.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::manifest::{BundleListing, Location, ManifestError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SamplingError {
    #[error("seed must be a non-empty hex string")]
    EmptySeed,
    #[error("seed is not valid hex: {0}")]
    BadHex(String),
    #[error("population size must be at least 1")]
    EmptyPopulation,
}

/// Published random seed, supplied and displayed as hex.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Seed(Vec<u8>);

impl Seed {
    pub fn from_hex(s: &str) -> Result<Self, SamplingError> {
        let s = s.trim();
        if s.is_empty() {
            return Err(SamplingError::EmptySeed);
        }
        // odd-length seeds are left-padded so that e.g. "abc" is accepted
        let padded = if s.len() % 2 == 1 { format!("0{s}") } else { s.to_owned() };
        hex::decode(&padded).map(Seed).map_err(|e| SamplingError::BadHex(e.to_string()))
    }

    pub fn from_bytes(bytes: impl Into<Vec<u8>>) -> Self {
        Seed(bytes.into())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }

    /// A 32-byte key derived from this seed and a context label.
    pub fn derive(&self, context: &[&[u8]]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(&self.0);
        for part in context {
            h.update((part.len() as u64).to_be_bytes());
            h.update(part);
        }
        h.finalize().into()
    }
}

impl FromStr for Seed {
    type Err = SamplingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Seed::from_hex(s)
    }
}

impl fmt::Debug for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Seed({})", self.to_hex())
    }
}

impl fmt::Display for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Seed {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Seed {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Seed::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// One logged draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Draw {
    pub counter: u64,
    pub index: u64,
}

/// A drawn index together with where it lands in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledBallot {
    pub counter: u64,
    pub index: u64,
    pub location: Location,
}

/// Sequential with-replacement sampler over ballot indices `[1, N]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededSampler {
    seed: Seed,
    counter: u64,
    population: u64,
}

impl SeededSampler {
    pub fn new(seed: Seed, population: u64) -> Result<Self, SamplingError> {
        Self::resume(seed, population, 0)
    }

    /// A sampler positioned so that its next draw uses `counter`.
    pub fn resume(seed: Seed, population: u64, counter: u64) -> Result<Self, SamplingError> {
        if population == 0 {
            return Err(SamplingError::EmptyPopulation);
        }
        Ok(SeededSampler { seed, counter, population })
    }

    pub fn seed(&self) -> &Seed {
        &self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn population(&self) -> u64 {
        self.population
    }

    /// The index drawn at `counter`; a pure function of seed, counter and N.
    pub fn index_at(&self, counter: u64) -> u64 {
        let n = self.population;
        let limit = (u64::MAX / n) * n;
        for attempt in 0u32.. {
            let mut h = Sha256::new();
            h.update(self.seed.as_bytes());
            h.update(counter.to_be_bytes());
            h.update(attempt.to_be_bytes());
            let digest = h.finalize();
            let x = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
            if x < limit {
                return x % n + 1;
            }
        }
        unreachable!("rejection loop always terminates")
    }

    pub fn next_index(&mut self) -> Draw {
        let draw = Draw { counter: self.counter, index: self.index_at(self.counter) };
        self.counter += 1;
        draw
    }

    pub fn next_ballot<M: BundleListing + ?Sized>(&mut self, manifest: &M) -> Result<SampledBallot, ManifestError> {
        let Draw { counter, index } = self.next_index();
        let location = manifest.locate(index, self.population)?;
        Ok(SampledBallot { counter, index, location })
    }

    /// Draws `k` ballots in order, phantoms included.
    pub fn draw_sample<M: BundleListing + ?Sized>(
        &mut self,
        manifest: &M,
        k: usize,
    ) -> Result<Vec<SampledBallot>, ManifestError> {
        (0..k).map(|_| self.next_ballot(manifest)).collect()
    }
}
