//! Rating ingestion, preprocessing, train/validation/test splitting and
//! random group partitioning.
//!
//! A [`SparseRatings`] keeps only the observed (strictly positive) ratings.
//! Dense row/column positions are assigned through [`IdIndex`] maps so that
//! subsets such as a split member or a group's local matrix can share the
//! item space of the dataset they were cut from.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no ratings survive filtering (min_user_ratings={min_user}, min_item_ratings={min_item})")]
    Degenerate { min_user: usize, min_item: usize },
    #[error("invalid split fractions: test={test}, validation={validation}")]
    InvalidFractions { test: f64, validation: f64 },
    #[error("split infeasible: {0}")]
    SplitInfeasible(String),
    #[error("need at least {min_size} users to form a group, got {n_users}")]
    TooFewUsers { n_users: usize, min_size: usize },
    #[error("invalid group size bounds [{min_size}, {max_size}]")]
    InvalidGroupBounds { min_size: usize, max_size: usize },
    #[error("unknown user id {0}")]
    UnknownUser(u64),
    #[error("unknown item id {0}")]
    UnknownItem(u64),
}

/// One explicit rating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingTriple {
    pub user: u64,
    pub item: u64,
    pub rating: f64,
}

/// An observed coordinate in dense index space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Bidirectional map between external ids and dense positions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdIndex {
    ids: Vec<u64>,
    pos: HashMap<u64, usize>,
}

impl IdIndex {
    pub fn new(ids: Vec<u64>) -> Self {
        let pos = ids.iter().enumerate().map(|(p, &id)| (id, p)).collect();
        Self { ids, pos }
    }

    /// Index over the distinct ids, sorted ascending.
    pub fn sorted<I: IntoIterator<Item = u64>>(ids: I) -> Self {
        let mut ids: Vec<u64> = ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        Self::new(ids)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.pos.get(&id).copied()
    }

    pub fn id(&self, position: usize) -> u64 {
        self.ids[position]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }
}

/// Users × items explicit-feedback matrix stored by its non-zero entries.
///
/// Entries are kept sorted by (row, col); zeros are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRatings {
    users: IdIndex,
    items: IdIndex,
    entries: Vec<Entry>,
}

impl SparseRatings {
    /// Builds a matrix whose user and item indices are the sorted distinct ids
    /// present in `triples`. A repeated (user, item) pair keeps the last value.
    pub fn from_triples<I: IntoIterator<Item = RatingTriple>>(triples: I) -> Self {
        let triples: Vec<RatingTriple> = triples.into_iter().collect();
        let users = IdIndex::sorted(triples.iter().map(|t| t.user));
        let items = IdIndex::sorted(triples.iter().map(|t| t.item));
        Self::with_index(users, items, triples)
            .expect("indices were built from the triples themselves")
    }

    /// Builds a matrix over a fixed index space. Triples whose user or item is
    /// not in the index are rejected; zero ratings are dropped.
    pub fn with_index<I: IntoIterator<Item = RatingTriple>>(
        users: IdIndex,
        items: IdIndex,
        triples: I,
    ) -> Result<Self, DataError> {
        let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
        for t in triples {
            let row = users.position(t.user).ok_or(DataError::UnknownUser(t.user))?;
            let col = items.position(t.item).ok_or(DataError::UnknownItem(t.item))?;
            cells.insert((row, col), t.rating);
        }
        let mut entries: Vec<Entry> = cells
            .into_iter()
            .filter(|&(_, v)| v > 0.0)
            .map(|((row, col), value)| Entry { row, col, value })
            .collect();
        entries.sort_unstable_by_key(|e| (e.row, e.col));
        Ok(Self { users, items, entries })
    }

    /// Dense-coordinate constructor used by tests and synthetic generators:
    /// user and item ids equal their positions.
    pub fn from_dense_entries(n_users: usize, n_items: usize, entries: &[(usize, usize, f64)]) -> Self {
        let users = IdIndex::new((0..n_users as u64).collect());
        let items = IdIndex::new((0..n_items as u64).collect());
        let triples = entries.iter().map(|&(r, c, v)| RatingTriple {
            user: r as u64,
            item: c as u64,
            rating: v,
        });
        Self::with_index(users, items, triples).expect("coordinates must lie inside the given shape")
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn users(&self) -> &IdIndex {
        &self.users
    }

    pub fn items(&self) -> &IdIndex {
        &self.items
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn triples(&self) -> impl Iterator<Item = RatingTriple> + '_ {
        self.entries.iter().map(move |e| RatingTriple {
            user: self.users.id(e.row),
            item: self.items.id(e.col),
            rating: e.value,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.entries
            .binary_search_by_key(&(row, col), |e| (e.row, e.col))
            .ok()
            .map(|i| self.entries[i].value)
    }

    pub fn mean(&self) -> Option<f64> {
        if self.entries.is_empty() {
            return None;
        }
        Some(self.entries.iter().map(|e| e.value).sum::<f64>() / self.entries.len() as f64)
    }

    pub fn user_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_users()];
        for e in &self.entries {
            counts[e.row] += 1;
        }
        counts
    }

    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_items()];
        for e in &self.entries {
            counts[e.col] += 1;
        }
        counts
    }

    /// Same index space, different entries.
    pub fn with_entries(&self, mut entries: Vec<Entry>) -> Self {
        entries.retain(|e| e.value > 0.0);
        entries.sort_unstable_by_key(|e| (e.row, e.col));
        Self {
            users: self.users.clone(),
            items: self.items.clone(),
            entries,
        }
    }

    /// Rows for the listed users, in the listed order, over the full item space.
    pub fn restrict_users(&self, user_ids: &[u64]) -> Result<Self, DataError> {
        let mut old_to_new = vec![usize::MAX; self.n_users()];
        for (new, &id) in user_ids.iter().enumerate() {
            let old = self.users.position(id).ok_or(DataError::UnknownUser(id))?;
            old_to_new[old] = new;
        }
        let mut entries: Vec<Entry> = self
            .entries
            .iter()
            .filter(|e| old_to_new[e.row] != usize::MAX)
            .map(|e| Entry {
                row: old_to_new[e.row],
                ..*e
            })
            .collect();
        entries.sort_unstable_by_key(|e| (e.row, e.col));
        Ok(Self {
            users: IdIndex::new(user_ids.to_vec()),
            items: self.items.clone(),
            entries,
        })
    }

    /// Union of two matrices over the same index space; `other` wins on overlap.
    pub fn merged(&self, other: &SparseRatings) -> Self {
        assert_eq!(self.users, other.users, "merge needs a shared user index");
        assert_eq!(self.items, other.items, "merge needs a shared item index");
        let mut cells: HashMap<(usize, usize), f64> = HashMap::with_capacity(self.nnz() + other.nnz());
        for e in self.entries.iter().chain(&other.entries) {
            cells.insert((e.row, e.col), e.value);
        }
        self.with_entries(
            cells
                .into_iter()
                .map(|((row, col), value)| Entry { row, col, value })
                .collect(),
        )
    }

    /// Canonical `user,item,rating` text, sorted by (user id, item id).
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> io::Result<()> {
        let mut triples: Vec<RatingTriple> = self.triples().collect();
        triples.sort_by_key(|t| (t.user, t.item));
        writeln!(out, "user,item,rating")?;
        for t in triples {
            writeln!(out, "{},{},{}", t.user, t.item, t.rating)?;
        }
        Ok(())
    }
}

/// Accepted on-disk rating layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatingFormat {
    /// `user item rating [timestamp]`, tab- or whitespace-separated (ML-100K `u.data`).
    Tab,
    /// `user,item,rating[,timestamp]` with an optional `userId,...` header (ml-latest).
    Comma,
    /// `user::item::rating::timestamp` (ML-1M `ratings.dat`).
    DoubleColon,
}

impl RatingFormat {
    /// Guess from the file name: `.csv` → comma, `.dat` → `::`, otherwise tab.
    pub fn infer(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => RatingFormat::Comma,
            Some("dat") => RatingFormat::DoubleColon,
            _ => RatingFormat::Tab,
        }
    }

    fn fields<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            RatingFormat::Tab => line.split_whitespace().collect(),
            RatingFormat::Comma => line.split(',').map(str::trim).collect(),
            RatingFormat::DoubleColon => line.split("::").map(str::trim).collect(),
        }
    }
}

impl FromStr for RatingFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tab" | "tsv" | "u.data" => Ok(RatingFormat::Tab),
            "comma" | "csv" => Ok(RatingFormat::Comma),
            "double-colon" | "dat" | "::" => Ok(RatingFormat::DoubleColon),
            other => Err(format!("unknown rating format '{other}'")),
        }
    }
}

impl fmt::Display for RatingFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RatingFormat::Tab => "tab",
            RatingFormat::Comma => "comma",
            RatingFormat::DoubleColon => "double-colon",
        })
    }
}

/// Parses rating lines. Blank lines and `#` comments are skipped, as is a
/// leading header whose first field is not numeric.
pub fn parse_ratings<R: BufRead>(reader: R, format: RatingFormat) -> Result<Vec<RatingTriple>, DataError> {
    let mut triples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| DataError::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields = format.fields(trimmed);
        let is_header = triples.is_empty()
            && fields
                .first()
                .is_some_and(|f| f.chars().next().is_some_and(|c| c.is_ascii_alphabetic()));
        if is_header {
            continue;
        }
        if fields.len() < 3 {
            return Err(DataError::Parse {
                line: lineno,
                reason: format!("expected at least 3 fields, found {}", fields.len()),
            });
        }
        let parse_id = |s: &str, what: &str| {
            s.parse::<u64>().map_err(|_| DataError::Parse {
                line: lineno,
                reason: format!("invalid {what} id '{s}'"),
            })
        };
        let user = parse_id(fields[0], "user")?;
        let item = parse_id(fields[1], "item")?;
        let rating: f64 = fields[2].parse().map_err(|_| DataError::Parse {
            line: lineno,
            reason: format!("invalid rating '{}'", fields[2]),
        })?;
        if !(0.5..=5.0).contains(&rating) {
            return Err(DataError::Parse {
                line: lineno,
                reason: format!("rating {rating} outside [0.5, 5]"),
            });
        }
        triples.push(RatingTriple { user, item, rating });
    }
    Ok(triples)
}

/// Loads a MovieLens-style ratings file.
pub fn load_movielens(path: &Path, format: RatingFormat) -> Result<SparseRatings, DataError> {
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let triples = parse_ratings(BufReader::new(file), format)?;
    if triples.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(SparseRatings::from_triples(triples))
}

/// How half-star ratings are mapped to integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HalfStarRounding {
    /// Every half-star rating rounds up: 0.5 → 1, 3.5 → 4.
    #[default]
    Ceil,
    /// Only 0.5 becomes 1; other half stars are kept.
    OnlyHalf,
}

impl HalfStarRounding {
    pub fn apply(self, rating: f64) -> f64 {
        match self {
            HalfStarRounding::Ceil => rating.ceil(),
            HalfStarRounding::OnlyHalf if rating == 0.5 => 1.0,
            HalfStarRounding::OnlyHalf => rating,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Preprocessing {
    pub min_user_ratings: usize,
    pub min_item_ratings: usize,
    pub rounding: HalfStarRounding,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            min_user_ratings: 20,
            min_item_ratings: 20,
            rounding: HalfStarRounding::Ceil,
        }
    }
}

/// Drops light users, then light items (one pass each, in that order), then
/// rounds half-star ratings. Users pushed below the threshold by the item pass
/// are kept.
pub fn preprocess(raw: &SparseRatings, opts: &Preprocessing) -> Result<SparseRatings, DataError> {
    if raw.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let user_counts = raw.user_counts();
    let after_users: Vec<&Entry> = raw
        .entries()
        .iter()
        .filter(|e| user_counts[e.row] >= opts.min_user_ratings)
        .collect();

    let mut item_counts = vec![0usize; raw.n_items()];
    for e in &after_users {
        item_counts[e.col] += 1;
    }
    let kept = after_users
        .into_iter()
        .filter(|e| item_counts[e.col] >= opts.min_item_ratings)
        .map(|e| RatingTriple {
            user: raw.users().id(e.row),
            item: raw.items().id(e.col),
            rating: opts.rounding.apply(e.value),
        });
    let out = SparseRatings::from_triples(kept);
    if out.is_empty() {
        return Err(DataError::Degenerate {
            min_user: opts.min_user_ratings,
            min_item: opts.min_item_ratings,
        });
    }
    Ok(out)
}

/// Disjoint train/validation/test members over one shared index space.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    pub train: SparseRatings,
    pub validation: SparseRatings,
    pub test: SparseRatings,
}

impl SplitSet {
    /// Train and validation together; the data a final model is fit on.
    pub fn train_and_validation(&self) -> SparseRatings {
        self.train.merged(&self.validation)
    }
}

/// Uniform random split of the observed entries.
///
/// `test_frac` of all entries go to test, then `val_frac` of the remainder to
/// validation. Afterwards any test or validation entry whose user or item has
/// no train entry is moved to train.
pub fn split(ratings: &SparseRatings, test_frac: f64, val_frac: f64, seed: u64) -> Result<SplitSet, DataError> {
    let valid = |f: f64| f > 0.0 && f < 1.0;
    if !valid(test_frac) || !valid(val_frac) || test_frac + val_frac * (1.0 - test_frac) >= 1.0 {
        return Err(DataError::InvalidFractions {
            test: test_frac,
            validation: val_frac,
        });
    }
    if ratings.is_empty() {
        return Err(DataError::EmptyDataset);
    }

    let entries = ratings.entries();
    let mut order: Vec<usize> = (0..entries.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n = entries.len();
    let n_test = (test_frac * n as f64).round() as usize;
    let n_val = (val_frac * (n - n_test) as f64).round() as usize;

    #[derive(Clone, Copy, PartialEq)]
    enum Member {
        Train,
        Validation,
        Test,
    }
    let mut member = vec![Member::Train; n];
    for (rank, &idx) in order.iter().enumerate() {
        member[idx] = if rank < n_test {
            Member::Test
        } else if rank < n_test + n_val {
            Member::Validation
        } else {
            Member::Train
        };
    }

    let mut user_cover = vec![0usize; ratings.n_users()];
    let mut item_cover = vec![0usize; ratings.n_items()];
    for (idx, e) in entries.iter().enumerate() {
        if member[idx] == Member::Train {
            user_cover[e.row] += 1;
            item_cover[e.col] += 1;
        }
    }
    // Coverage only grows, so one pass in shuffle order is enough.
    for &idx in &order {
        let e = entries[idx];
        if member[idx] != Member::Train && (user_cover[e.row] == 0 || item_cover[e.col] == 0) {
            member[idx] = Member::Train;
            user_cover[e.row] += 1;
            item_cover[e.col] += 1;
        }
    }

    let pick = |m: Member| {
        ratings.with_entries(
            entries
                .iter()
                .zip(&member)
                .filter(|(_, &mm)| mm == m)
                .map(|(e, _)| *e)
                .collect(),
        )
    };
    let out = SplitSet {
        train: pick(Member::Train),
        validation: pick(Member::Validation),
        test: pick(Member::Test),
    };
    if out.test.is_empty() {
        return Err(DataError::SplitInfeasible(
            "coverage repair moved every test rating back to train".into(),
        ));
    }
    Ok(out)
}

/// Assignment of users to groups (clients). Group ids are 0-based positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPartition {
    groups: Vec<Vec<u64>>,
}

impl GroupPartition {
    pub fn from_groups(groups: Vec<Vec<u64>>) -> Self {
        Self { groups }
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<u64>] {
        &self.groups
    }

    pub fn members(&self, group: usize) -> &[u64] {
        &self.groups[group]
    }

    pub fn assignments(&self) -> HashMap<u64, usize> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(g, users)| users.iter().map(move |&u| (u, g)))
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub fn covers(&self, users: &[u64]) -> bool {
        let assigned: HashSet<u64> = self.groups.iter().flatten().copied().collect();
        users.iter().all(|u| assigned.contains(u))
    }
}

/// Shuffles users and cuts them into groups of uniformly drawn size in
/// `[min_size, max_size]`. A short final remainder joins the previous group.
pub fn partition_groups(users: &[u64], min_size: usize, max_size: usize, seed: u64) -> Result<GroupPartition, DataError> {
    if min_size == 0 || max_size < min_size {
        return Err(DataError::InvalidGroupBounds { min_size, max_size });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = users.to_vec();
    shuffled.shuffle(&mut rng);
    partition_with_sizes(&shuffled, min_size, || rng.random_range(min_size..=max_size))
}

/// Slices `users` in order using sizes supplied by `next_size`.
pub fn partition_with_sizes<F: FnMut() -> usize>(
    users: &[u64],
    min_size: usize,
    mut next_size: F,
) -> Result<GroupPartition, DataError> {
    if users.len() < min_size {
        return Err(DataError::TooFewUsers {
            n_users: users.len(),
            min_size,
        });
    }
    let mut groups: Vec<Vec<u64>> = Vec::new();
    let mut start = 0;
    while start < users.len() {
        let size = next_size().max(1).min(users.len() - start);
        groups.push(users[start..start + size].to_vec());
        start += size;
    }
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() < min_size) {
        let tail = groups.pop().unwrap();
        groups.last_mut().unwrap().extend(tail);
    }
    Ok(GroupPartition { groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(user: u64, item: u64, rating: f64) -> RatingTriple {
        RatingTriple { user, item, rating }
    }

    #[test]
    fn parses_whitespace_lines() {
        let text = "1 10 4.0\n2 10 3.0\n";
        let triples = parse_ratings(text.as_bytes(), RatingFormat::Tab).unwrap();
        let m = SparseRatings::from_triples(triples);
        assert_eq!((m.n_users(), m.n_items(), m.nnz()), (2, 1, 2));
    }

    #[test]
    fn malformed_rating_reports_line() {
        let err = parse_ratings("1 10 abc\n".as_bytes(), RatingFormat::Tab).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn all_formats_and_header() {
        let csv = "userId,movieId,rating,timestamp\n1,31,2.5,1260759144\n1,1029,3.0,1260759179\n";
        let got = parse_ratings(csv.as_bytes(), RatingFormat::Comma).unwrap();
        assert_eq!(got, vec![t(1, 31, 2.5), t(1, 1029, 3.0)]);

        let dat = "1::1193::5::978300760\n";
        assert_eq!(parse_ratings(dat.as_bytes(), RatingFormat::DoubleColon).unwrap(), vec![t(1, 1193, 5.0)]);

        let tab = "196\t242\t3\t881250949\n";
        assert_eq!(parse_ratings(tab.as_bytes(), RatingFormat::Tab).unwrap(), vec![t(196, 242, 3.0)]);
    }

    #[test]
    fn rejects_out_of_range_ratings() {
        let err = parse_ratings("1 1 4\n1 2 7\n".as_bytes(), RatingFormat::Tab).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }));
    }

    #[test]
    fn duplicate_pair_keeps_last() {
        let m = SparseRatings::from_triples([t(1, 1, 2.0), t(1, 1, 5.0)]);
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(0, 0), Some(5.0));
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.data");
        fs::write(&path, "").unwrap();
        assert!(matches!(load_movielens(&path, RatingFormat::Tab), Err(DataError::EmptyDataset)));
    }

    #[test]
    fn half_star_rounding() {
        assert_eq!(HalfStarRounding::Ceil.apply(0.5), 1.0);
        assert_eq!(HalfStarRounding::Ceil.apply(3.5), 4.0);
        assert_eq!(HalfStarRounding::Ceil.apply(4.0), 4.0);
        assert_eq!(HalfStarRounding::OnlyHalf.apply(0.5), 1.0);
        assert_eq!(HalfStarRounding::OnlyHalf.apply(3.5), 3.5);
    }

    #[test]
    fn preprocess_filters_users_then_items() {
        // User 0 has 19 ratings and goes. Item 0 is rated by user 0 and by 19
        // other users, so it drops to 19 after the user pass and goes too.
        let mut triples = Vec::new();
        for item in 0..19 {
            triples.push(t(0, item, 4.0));
        }
        for user in 1..=20 {
            for item in 1..=20 {
                triples.push(t(user, item, 3.5));
            }
            if user <= 19 {
                triples.push(t(user, 0, 2.0));
            }
        }
        let raw = SparseRatings::from_triples(triples);
        let out = preprocess(&raw, &Preprocessing::default()).unwrap();
        assert!(out.users().position(0).is_none());
        assert!(out.items().position(0).is_none());
        assert_eq!(out.n_users(), 20);
        assert_eq!(out.n_items(), 20);
        assert!(out.entries().iter().all(|e| e.value == 4.0));
    }

    #[test]
    fn preprocess_fixed_point() {
        let triples: Vec<_> = (0..20)
            .flat_map(|u| (0..20).map(move |i| t(u, i, ((u + i) % 5 + 1) as f64)))
            .collect();
        let raw = SparseRatings::from_triples(triples);
        assert_eq!(preprocess(&raw, &Preprocessing::default()).unwrap(), raw);
    }

    #[test]
    fn preprocess_can_empty_out() {
        let raw = SparseRatings::from_triples([t(1, 1, 4.0)]);
        assert!(matches!(preprocess(&raw, &Preprocessing::default()), Err(DataError::Degenerate { .. })));
    }

    fn grid(n_users: u64, n_items: u64) -> SparseRatings {
        SparseRatings::from_triples(
            (0..n_users).flat_map(|u| (0..n_items).map(move |i| t(u, i, ((u * 7 + i) % 5 + 1) as f64))),
        )
    }

    #[test]
    fn split_cardinality_and_determinism() {
        let m = grid(10, 10);
        let a = split(&m, 0.2, 0.2, 7).unwrap();
        let b = split(&m, 0.2, 0.2, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.test.nnz() <= 20);
        assert_eq!(a.train.nnz() + a.validation.nnz() + a.test.nnz(), 100);
    }

    #[test]
    fn split_forces_singleton_item_into_train() {
        let mut triples: Vec<_> = grid(10, 10).triples().collect();
        triples.push(t(3, 99, 5.0));
        let m = SparseRatings::from_triples(triples);
        let col = m.items().position(99).unwrap();
        for seed in 0..20 {
            let s = split(&m, 0.2, 0.2, seed).unwrap();
            assert!(s.train.entries().iter().any(|e| e.col == col));
            let train_users = s.train.user_counts();
            let train_items = s.train.item_counts();
            for e in s.validation.entries().iter().chain(s.test.entries()) {
                assert!(train_users[e.row] > 0 && train_items[e.col] > 0);
            }
        }
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let m = grid(4, 4);
        assert!(split(&m, 0.0, 0.2, 1).is_err());
        assert!(split(&m, 0.5, 1.0, 1).is_err());
    }

    #[test]
    fn restrict_users_keeps_item_space() {
        let m = grid(5, 4);
        let g = m.restrict_users(&[3, 1]).unwrap();
        assert_eq!(g.n_users(), 2);
        assert_eq!(g.n_items(), 4);
        assert_eq!(g.get(0, 2), m.get(3, 2));
        assert_eq!(g.nnz(), 8);
    }

    #[test]
    fn snapshot_is_canonical() {
        let m = SparseRatings::from_triples([t(2, 1, 3.0), t(1, 5, 4.5)]);
        let mut buf = Vec::new();
        m.write_snapshot(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "user,item,rating\n1,5,4.5\n2,1,3\n");
    }

    #[test]
    fn minimum_partition() {
        let p = partition_groups(&[1, 2, 3], 3, 30, 0).unwrap();
        assert_eq!(p.sizes(), vec![3]);
    }

    #[test]
    fn exact_packing() {
        let users: Vec<u64> = (0..33).collect();
        let mut draws = [30, 3].into_iter();
        let p = partition_with_sizes(&users, 3, || draws.next().unwrap()).unwrap();
        assert_eq!(p.sizes(), vec![30, 3]);
    }

    #[test]
    fn short_remainder_merges_into_previous() {
        let users: Vec<u64> = (0..32).collect();
        let mut draws = [30, 30].into_iter();
        let p = partition_with_sizes(&users, 3, || draws.next().unwrap()).unwrap();
        assert_eq!(p.sizes(), vec![32]);
    }

    #[test]
    fn too_few_users() {
        assert!(matches!(partition_groups(&[1, 2], 3, 30, 0), Err(DataError::TooFewUsers { .. })));
    }

    #[test]
    fn group_count_matches_table_scale() {
        // 610 users in groups of 3..=30 gives about 36.7 groups on average.
        let users: Vec<u64> = (1..=610).collect();
        let mean = (0..10)
            .map(|seed| partition_groups(&users, 3, 30, seed).unwrap().n_groups() as f64)
            .sum::<f64>()
            / 10.0;
        assert!((mean - 36.7).abs() < 2.613 * 1.5, "mean group count {mean}");
    }
}
