//! Interaction logs, leave-one-out splits and fixed negative sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// One implicit-feedback event. Ids are compact 0-based indices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InteractionRecord {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub timestamp: i64,
}

/// Records plus the raw-id tables used to compact them.
#[derive(Clone, Debug, Default)]
pub struct LoadedLog {
    pub records: Vec<InteractionRecord>,
    /// `raw_users[i]` is the id that appeared in the file for compact user `i`.
    pub raw_users: Vec<u64>,
    pub raw_items: Vec<u64>,
}

impl LoadedLog {
    pub fn num_users(&self) -> usize {
        self.raw_users.len()
    }

    pub fn num_items(&self) -> usize {
        self.raw_items.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogFormat {
    /// MovieLens layout. Fields separated by a tab (ML-100K) or `::` (ML-1M).
    TabSeparated,
}

fn parse_field<T: std::str::FromStr>(field: &str, name: &str, line: usize) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {name} field {:?}", field.trim()),
    })
}

/// Parses `user item rating timestamp` lines from text.
pub fn parse_interactions(text: &str, format: LogFormat) -> Result<LoadedLog> {
    let LogFormat::TabSeparated = format;
    let mut raw = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = if line.contains("::") {
            line.split("::").collect()
        } else {
            line.split('\t').collect()
        };
        if fields.len() < 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let user: u64 = parse_field(fields[0], "user", line_no)?;
        let item: u64 = parse_field(fields[1], "item", line_no)?;
        let rating: f64 = parse_field(fields[2], "rating", line_no)?;
        let timestamp: i64 = parse_field(fields[3], "timestamp", line_no)?;
        raw.push((user, item, rating, timestamp));
    }
    if raw.is_empty() {
        return Err(Error::NoRecords);
    }

    let users: BTreeSet<u64> = raw.iter().map(|r| r.0).collect();
    let items: BTreeSet<u64> = raw.iter().map(|r| r.1).collect();
    let user_index: BTreeMap<u64, usize> = users.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let item_index: BTreeMap<u64, usize> = items.iter().enumerate().map(|(i, &v)| (v, i)).collect();

    let records = raw
        .into_iter()
        .map(|(u, v, rating, timestamp)| InteractionRecord {
            user: user_index[&u],
            item: item_index[&v],
            rating,
            timestamp,
        })
        .collect();
    Ok(LoadedLog {
        records,
        raw_users: users.into_iter().collect(),
        raw_items: items.into_iter().collect(),
    })
}

pub fn load_interactions(path: impl AsRef<Path>, format: LogFormat) -> Result<LoadedLog> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_interactions(&text, format)
}

/// One retained user's private data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserData {
    /// Index of this user in the loaded log.
    pub source_user: usize,
    /// Training positives D+, sorted.
    pub positives: Vec<usize>,
    /// Sampled negatives D-, sorted, fixed for the whole run.
    pub negatives: Vec<usize>,
    /// Held-out latest interaction.
    pub test_item: usize,
}

impl UserData {
    /// Labeled training set D = D+ ∪ D-, in ascending item order.
    pub fn samples(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = self
            .positives
            .iter()
            .map(|&j| (j, 1.0))
            .chain(self.negatives.iter().map(|&j| (j, 0.0)))
            .collect();
        out.sort_by_key(|s| s.0);
        out
    }

    pub fn has_positive(&self, item: usize) -> bool {
        self.positives.binary_search(&item).is_ok()
    }

    pub fn in_training_set(&self, item: usize) -> bool {
        self.has_positive(item) || self.negatives.binary_search(&item).is_ok()
    }

    /// Any recorded interaction, including the held-out one.
    pub fn has_interacted(&self, item: usize) -> bool {
        self.test_item == item || self.has_positive(item)
    }

    pub fn training_len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }
}

/// Per-user leave-one-out splits with fixed sampled negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    pub num_items: usize,
    pub q: f64,
    pub users: Vec<UserData>,
}

impl InteractionDataset {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Interaction count per item over retained users, held-out items included.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items];
        for user in &self.users {
            for &j in &user.positives {
                counts[j] += 1;
            }
            counts[user.test_item] += 1;
        }
        counts
    }

    /// Item ids ordered most-interacted first, ties by smaller id.
    pub fn popularity_order(&self) -> Vec<usize> {
        let counts = self.item_counts();
        let mut order: Vec<usize> = (0..self.num_items).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        order
    }

    /// `rank[j]` is item j's 1-based position in [`Self::popularity_order`].
    pub fn popularity_ranks(&self) -> Vec<usize> {
        let mut rank = vec![0; self.num_items];
        for (pos, j) in self.popularity_order().into_iter().enumerate() {
            rank[j] = pos + 1;
        }
        rank
    }
}

/// Splits each user's interactions by leave-one-out and draws `round(q·|D+|)`
/// negatives per user from their uninteracted items.
pub fn build_dataset(
    records: &[InteractionRecord],
    num_items: usize,
    q: f64,
    seed: u64,
) -> Result<InteractionDataset> {
    if !(q > 0.0) || !q.is_finite() {
        return Err(Error::config(format!(
            "negative sampling ratio q must be > 0, got {q}"
        )));
    }
    // latest timestamp per (user, item); duplicates collapse to one positive
    let mut per_user: BTreeMap<usize, BTreeMap<usize, i64>> = BTreeMap::new();
    for r in records {
        if r.item >= num_items {
            return Err(Error::config(format!(
                "record item {} out of range for {num_items} items",
                r.item
            )));
        }
        let ts = per_user
            .entry(r.user)
            .or_default()
            .entry(r.item)
            .or_insert(r.timestamp);
        *ts = (*ts).max(r.timestamp);
    }

    let mut users = Vec::with_capacity(per_user.len());
    for (source_user, items) in per_user {
        if items.len() < 2 {
            warn!(
                "dropping user {source_user}: only {} interaction(s)",
                items.len()
            );
            continue;
        }
        let (&test_item, _) = items
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(b.0)))
            .expect("nonempty");
        let positives: Vec<usize> = items.keys().copied().filter(|&j| j != test_item).collect();

        let candidates: Vec<usize> = (0..num_items).filter(|j| !items.contains_key(j)).collect();
        let wanted = ((q * positives.len() as f64).round() as usize).min(candidates.len());
        let mut rng = substream(seed, Stream::Negatives, source_user as u64);
        let mut negatives: Vec<usize> = index::sample(&mut rng, candidates.len(), wanted)
            .into_iter()
            .map(|k| candidates[k])
            .collect();
        negatives.sort_unstable();

        users.push(UserData {
            source_user,
            positives,
            negatives,
            test_item,
        });
    }
    if users.is_empty() {
        return Err(Error::config("no user has at least two interactions"));
    }
    Ok(InteractionDataset {
        num_items,
        q,
        users,
    })
}
