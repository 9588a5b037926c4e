//! Ballot and preference manifests.
//!
//! A ballot manifest lists how the physical ballots are bundled. A preference
//! manifest additionally labels each bundle with the single candidate every
//! ballot in it is claimed to show, which commits to a cast vote record for
//! every sorted ballot.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Contest, INVALID_LABEL};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest header must be `{expected}`, found `{found}`")]
    BadHeader { expected: &'static str, found: String },
    #[error("bundle id {0:?} appears more than once")]
    DuplicateBundle(String),
    #[error("bundle ids must be non-empty")]
    EmptyBundleId,
    #[error("bundle {0:?} has a zero count")]
    EmptyBundle(String),
    #[error("bundle {bundle:?} claims unknown candidate {candidate:?}")]
    UnknownClaim { bundle: String, candidate: String },
    #[error("manifest lists {listed} ballots, more than the trusted upper bound {bound}")]
    BoundExceeded { listed: u64, bound: u64 },
    #[error("manifest implies winner {found:?}, but {reported:?} was reported")]
    WinnerMismatch { reported: String, found: Option<String> },
    #[error("ballot index {index} outside [1, {bound}]")]
    IndexOutOfRange { index: u64, bound: u64 },
}

/// Where a sampled ballot index lands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Location {
    Ballot {
        bundle_id: String,
        /// 1-based position within the bundle.
        offset: u64,
        /// Claimed candidate, for preference manifests.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        claimed: Option<String>,
    },
    /// The index lies beyond the listed ballots, or the ballot cannot be produced.
    Phantom,
}

impl Location {
    pub fn bundle_id(&self) -> Option<&str> {
        match self {
            Location::Ballot { bundle_id, .. } => Some(bundle_id),
            Location::Phantom => None,
        }
    }

    pub fn claimed(&self) -> Option<&str> {
        match self {
            Location::Ballot { claimed, .. } => claimed.as_deref(),
            Location::Phantom => None,
        }
    }

    pub fn is_phantom(&self) -> bool {
        matches!(self, Location::Phantom)
    }
}

/// One manifest row. `candidate_id` is present exactly for preference manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleRow {
    pub bundle_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_id: Option<String>,
    pub count: u64,
}

/// Cumulative-count index shared by both manifest kinds.
#[derive(Debug, Clone, PartialEq, Eq)]
struct BundleIndex {
    rows: Vec<BundleRow>,
    /// `ends[i]` is the 1-based index of the last ballot in bundle `i`.
    ends: Vec<u64>,
}

impl BundleIndex {
    fn new(rows: Vec<BundleRow>) -> Result<Self, ManifestError> {
        let mut seen = HashSet::with_capacity(rows.len());
        let mut ends = Vec::with_capacity(rows.len());
        let mut total = 0u64;
        for row in &rows {
            if row.bundle_id.is_empty() {
                return Err(ManifestError::EmptyBundleId);
            }
            if !seen.insert(row.bundle_id.as_str()) {
                return Err(ManifestError::DuplicateBundle(row.bundle_id.clone()));
            }
            if row.count == 0 {
                return Err(ManifestError::EmptyBundle(row.bundle_id.clone()));
            }
            total += row.count;
            ends.push(total);
        }
        Ok(BundleIndex { rows, ends })
    }

    fn total(&self) -> u64 {
        self.ends.last().copied().unwrap_or(0)
    }

    fn locate(&self, index: u64, upper_bound: u64) -> Result<Location, ManifestError> {
        if index < 1 || index > upper_bound {
            return Err(ManifestError::IndexOutOfRange { index, bound: upper_bound });
        }
        if index > self.total() {
            return Ok(Location::Phantom);
        }
        let slot = self.ends.partition_point(|&end| end < index);
        let start = if slot == 0 { 0 } else { self.ends[slot - 1] };
        let row = &self.rows[slot];
        Ok(Location::Ballot {
            bundle_id: row.bundle_id.clone(),
            offset: index - start,
            claimed: row.candidate_id.clone(),
        })
    }
}

/// Anything sampled ballots can be located in.
pub trait BundleListing {
    /// Number of ballots the manifest lists.
    fn listed_total(&self) -> u64;

    /// Maps a 1-based ballot index to its bundle and offset. Indices in
    /// `(listed_total, upper_bound]` are phantoms.
    fn locate(&self, index: u64, upper_bound: u64) -> Result<Location, ManifestError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BundleRow>", into = "Vec<BundleRow>")]
pub struct BallotManifest {
    index: BundleIndex,
}

impl BallotManifest {
    pub const HEADER: &'static str = "bundle_id,count";

    pub fn new(bundles: impl IntoIterator<Item = (String, u64)>) -> Result<Self, ManifestError> {
        let rows = bundles
            .into_iter()
            .map(|(bundle_id, count)| BundleRow { bundle_id, candidate_id: None, count })
            .collect();
        Ok(BallotManifest { index: BundleIndex::new(rows)? })
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self, ManifestError> {
        #[derive(Deserialize)]
        struct Row {
            bundle_id: String,
            count: u64,
        }
        let rows: Vec<Row> = read_rows(reader, Self::HEADER)?;
        Self::new(rows.into_iter().map(|r| (r.bundle_id, r.count)))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        Self::from_csv(std::fs::File::open(path).map_err(csv::Error::from)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for row in &self.index.rows {
            out.push_str(&format!("{},{}\n", row.bundle_id, row.count));
        }
        out
    }

    pub fn bundles(&self) -> impl Iterator<Item = (&str, u64)> {
        self.index.rows.iter().map(|r| (r.bundle_id.as_str(), r.count))
    }
}

impl TryFrom<Vec<BundleRow>> for BallotManifest {
    type Error = ManifestError;

    fn try_from(rows: Vec<BundleRow>) -> Result<Self, ManifestError> {
        Self::new(rows.into_iter().map(|r| (r.bundle_id, r.count)))
    }
}

impl From<BallotManifest> for Vec<BundleRow> {
    fn from(m: BallotManifest) -> Self {
        m.index.rows
    }
}

impl BundleListing for BallotManifest {
    fn listed_total(&self) -> u64 {
        self.index.total()
    }

    fn locate(&self, index: u64, upper_bound: u64) -> Result<Location, ManifestError> {
        self.index.locate(index, upper_bound)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BundleRow>", into = "Vec<BundleRow>")]
pub struct PreferenceManifest {
    index: BundleIndex,
}

impl PreferenceManifest {
    pub const HEADER: &'static str = "bundle_id,candidate_id,count";

    pub fn new(bundles: impl IntoIterator<Item = (String, String, u64)>) -> Result<Self, ManifestError> {
        let rows = bundles
            .into_iter()
            .map(|(bundle_id, candidate, count)| BundleRow { bundle_id, candidate_id: Some(candidate), count })
            .collect();
        Ok(PreferenceManifest { index: BundleIndex::new(rows)? })
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self, ManifestError> {
        #[derive(Deserialize)]
        struct Row {
            bundle_id: String,
            candidate_id: String,
            count: u64,
        }
        let rows: Vec<Row> = read_rows(reader, Self::HEADER)?;
        Self::new(rows.into_iter().map(|r| (r.bundle_id, r.candidate_id, r.count)))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        Self::from_csv(std::fs::File::open(path).map_err(csv::Error::from)?)
    }

    /// Sorted piles matching the contest's own reported tallies, split into
    /// bundles of at most `bundle_size` ballots. Invalid ballots go to
    /// `INVALID` bundles.
    pub fn from_tallies(contest: &Contest, bundle_size: u64) -> Self {
        let bundle_size = bundle_size.max(1);
        let mut piles: Vec<(String, u64)> = (0..contest.candidate_count())
            .map(|i| (contest.candidate_id(i).to_owned(), contest.votes(i)))
            .collect();
        piles.push((INVALID_LABEL.to_owned(), contest.invalid_votes()));
        let mut rows = Vec::new();
        for (candidate, mut remaining) in piles {
            let mut part = 1;
            while remaining > 0 {
                let count = remaining.min(bundle_size);
                rows.push((format!("{candidate}-{part:04}"), candidate.clone(), count));
                remaining -= count;
                part += 1;
            }
        }
        Self::new(rows).expect("generated bundle ids are unique and non-empty")
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for row in &self.index.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                row.bundle_id,
                row.candidate_id.as_deref().unwrap_or_default(),
                row.count
            ));
        }
        out
    }

    pub fn bundles(&self) -> impl Iterator<Item = (&str, &str, u64)> {
        self.index
            .rows
            .iter()
            .map(|r| (r.bundle_id.as_str(), r.candidate_id.as_deref().unwrap_or_default(), r.count))
    }

    /// The same bundles without their claims.
    pub fn to_ballot_manifest(&self) -> BallotManifest {
        BallotManifest::new(self.bundles().map(|(id, _, n)| (id.to_owned(), n))).expect("already validated")
    }

    /// Ballot counts implied by the bundle labels, keyed by claimed candidate.
    pub fn implied_tallies(&self) -> BTreeMap<String, u64> {
        let mut tallies = BTreeMap::new();
        for (_, candidate, count) in self.bundles() {
            *tallies.entry(candidate.to_owned()).or_insert(0) += count;
        }
        tallies
    }
}

impl TryFrom<Vec<BundleRow>> for PreferenceManifest {
    type Error = ManifestError;

    fn try_from(rows: Vec<BundleRow>) -> Result<Self, ManifestError> {
        let mut out = Vec::with_capacity(rows.len());
        for r in rows {
            let candidate = r.candidate_id.ok_or_else(|| ManifestError::UnknownClaim {
                bundle: r.bundle_id.clone(),
                candidate: String::new(),
            })?;
            out.push((r.bundle_id, candidate, r.count));
        }
        Self::new(out)
    }
}

impl From<PreferenceManifest> for Vec<BundleRow> {
    fn from(m: PreferenceManifest) -> Self {
        m.index.rows
    }
}

impl BundleListing for PreferenceManifest {
    fn listed_total(&self) -> u64 {
        self.index.total()
    }

    fn locate(&self, index: u64, upper_bound: u64) -> Result<Location, ManifestError> {
        self.index.locate(index, upper_bound)
    }
}

fn read_rows<R: Read, T: serde::de::DeserializeOwned>(reader: R, header: &'static str) -> Result<Vec<T>, ManifestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let found = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
    if found != header {
        return Err(ManifestError::BadHeader { expected: header, found });
    }
    rdr.deserialize().collect::<Result<Vec<T>, _>>().map_err(Into::into)
}

/// Outcome of a passed pre-audit consistency check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConsistencyReport {
    /// Bundle-implied tallies per candidate (zero for candidates with no bundle).
    pub tallies: BTreeMap<String, u64>,
    pub invalid: u64,
    pub listed_total: u64,
    pub upper_bound: u64,
    pub winner: String,
}

/// Checks that the preference manifest reproduces the reported winner and
/// lists no more ballots than can exist. Either failure means the audit must
/// not start.
pub fn consistency_check(manifest: &PreferenceManifest, contest: &Contest) -> Result<ConsistencyReport, ManifestError> {
    let mut tallies: BTreeMap<String, u64> =
        (0..contest.candidate_count()).map(|i| (contest.candidate_id(i).to_owned(), 0)).collect();
    let mut invalid = 0;
    for (bundle, candidate, count) in manifest.bundles() {
        if candidate == INVALID_LABEL {
            invalid += count;
            continue;
        }
        match tallies.get_mut(candidate) {
            Some(t) => *t += count,
            None => {
                return Err(ManifestError::UnknownClaim { bundle: bundle.to_owned(), candidate: candidate.to_owned() })
            }
        }
    }
    let listed = manifest.listed_total();
    let bound = contest.ballot_upper_bound();
    if listed > bound {
        return Err(ManifestError::BoundExceeded { listed, bound });
    }
    let top = tallies.values().copied().max().unwrap_or(0);
    let mut leaders = tallies.iter().filter(|(_, &v)| v == top).map(|(k, _)| k);
    let found = match (leaders.next(), leaders.next()) {
        (Some(only), None) => Some(only.clone()),
        _ => None,
    };
    if found.as_deref() != Some(contest.winner()) {
        return Err(ManifestError::WinnerMismatch { reported: contest.winner().to_owned(), found });
    }
    Ok(ConsistencyReport { tallies, invalid, listed_total: listed, upper_bound: bound, winner: contest.winner().to_owned() })
}
