//! Raw catalog and review ingestion.
//!
//! Everything produced here is immutable after construction and ordered
//! deterministically (B-tree maps, stable sorts), so re-ingesting the same
//! input yields byte-identical serialized output.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Category assigned to items whose raw labels were all filtered out.
pub const UNCATEGORIZED: &str = "UNCATEGORIZED";

pub const DEFAULT_RATING_THRESHOLD: f64 = 3.0;
pub const DEFAULT_CATEGORY_LOW_CUT: usize = 5;
pub const DEFAULT_CATEGORY_HIGH_CUT: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("rejected input: {0}")]
    Rejected(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("duplicate item id `{0}`")]
    DuplicateItem(String),
}

/// Binary engagement label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Dislike = 0,
    Like = 1,
}

impl Label {
    pub fn from_bool(liked: bool) -> Self {
        if liked {
            Label::Like
        } else {
            Label::Dislike
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn is_like(self) -> bool {
        self == Label::Like
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Dislike),
            1 => Ok(Label::Like),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawItem {
    pub item_id: String,
    pub name: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default, rename = "categories")]
    pub raw_categories: Vec<String>,
}

impl RawItem {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.item_id.trim().is_empty() {
            return Err(CorpusError::Rejected("item_id must be non-empty".into()));
        }
        if self.name.trim().is_empty() {
            return Err(CorpusError::Rejected(format!(
                "item `{}` has an empty name",
                self.item_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawReview {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    #[serde(default)]
    pub comment: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
}

/// One (item, label) pair at a given ordinal position of a user's sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub label: Label,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub item_id: String,
    pub label: Label,
}

impl HistoryEntry {
    pub fn new(item_id: impl Into<String>, label: Label) -> Self {
        Self {
            item_id: item_id.into(),
            label,
        }
    }
}

/// A user's chronologically ordered feedback sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub entries: Vec<HistoryEntry>,
}

impl UserHistory {
    pub fn new(entries: Vec<HistoryEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, item_id: impl Into<String>, label: Label) {
        self.entries.push(HistoryEntry::new(item_id, label));
    }

    pub fn iter(&self) -> impl Iterator<Item = &HistoryEntry> {
        self.entries.iter()
    }

    pub fn interactions(&self, user_id: &str) -> Vec<Interaction> {
        self.entries
            .iter()
            .enumerate()
            .map(|(position, e)| Interaction {
                user_id: user_id.to_string(),
                item_id: e.item_id.clone(),
                label: e.label,
                position,
            })
            .collect()
    }
}

impl FromIterator<(String, Label)> for UserHistory {
    fn from_iter<T: IntoIterator<Item = (String, Label)>>(iter: T) -> Self {
        Self {
            entries: iter
                .into_iter()
                .map(|(item_id, label)| HistoryEntry { item_id, label })
                .collect(),
        }
    }
}

impl FromIterator<HistoryEntry> for UserHistory {
    fn from_iter<T: IntoIterator<Item = HistoryEntry>>(iter: T) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Serialized form of one user's history (one JSON line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub user_id: String,
    pub interactions: Vec<HistoryEntry>,
}

/// Immutable item catalog with a dense index over sorted item ids.
#[derive(Debug, Clone)]
pub struct Catalog {
    items: Vec<RawItem>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(mut items: Vec<RawItem>) -> Result<Self, CorpusError> {
        for item in &items {
            item.validate()?;
        }
        items.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if index.insert(item.item_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateItem(item.item_id.clone()));
            }
        }
        Ok(Self { items, index })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[RawItem] {
        &self.items
    }

    pub fn get(&self, item_id: &str) -> Option<&RawItem> {
        self.index.get(item_id).map(|&i| &self.items[i])
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.index.contains_key(item_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.item_id.as_str())
    }
}

/// Final single category per item plus the retained label vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTable {
    pub assignments: BTreeMap<String, String>,
    pub vocabulary: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub item_id: String,
    pub category: String,
}

impl CategoryTable {
    pub fn category_of(&self, item_id: &str) -> Option<&str> {
        self.assignments.get(item_id).map(String::as_str)
    }

    pub fn records(&self) -> Vec<CategoryRecord> {
        self.assignments
            .iter()
            .map(|(item_id, category)| CategoryRecord {
                item_id: item_id.clone(),
                category: category.clone(),
            })
            .collect()
    }

    pub fn from_records(records: Vec<CategoryRecord>) -> Self {
        let mut table = CategoryTable::default();
        for r in records {
            table.vocabulary.insert(r.category.clone());
            table.assignments.insert(r.item_id, r.category);
        }
        table
    }

    /// Categories in vocabulary order; the position is the category index.
    pub fn category_list(&self) -> Vec<String> {
        self.vocabulary.iter().cloned().collect()
    }
}

pub fn binarize_rating(rating: f64, threshold: f64) -> Result<Label, CorpusError> {
    if !rating.is_finite() {
        return Err(CorpusError::Rejected(format!("non-finite rating {rating}")));
    }
    if !threshold.is_finite() {
        return Err(CorpusError::InvalidParameter(format!(
            "non-finite threshold {threshold}"
        )));
    }
    Ok(Label::from_bool(rating >= threshold))
}

/// Count, for every label, the number of distinct items carrying it.
fn label_frequencies(items: &[RawItem]) -> BTreeMap<&str, usize> {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for item in items {
        let labels: BTreeSet<&str> = item
            .raw_categories
            .iter()
            .map(|c| c.trim())
            .filter(|c| !c.is_empty())
            .collect();
        for l in labels {
            *freq.entry(l).or_default() += 1;
        }
    }
    freq
}

pub fn assign_categories(
    items: &[RawItem],
    low_cut: usize,
    high_cut: f64,
) -> Result<CategoryTable, CorpusError> {
    if items.is_empty() {
        return Err(CorpusError::InvalidParameter("item list is empty".into()));
    }
    if !(0.0..=1.0).contains(&high_cut) {
        return Err(CorpusError::InvalidParameter(format!(
            "high_cut must lie in [0, 1], got {high_cut}"
        )));
    }
    let mut seen = BTreeSet::new();
    for item in items {
        item.validate()?;
        if !seen.insert(item.item_id.as_str()) {
            return Err(CorpusError::DuplicateItem(item.item_id.clone()));
        }
    }

    let ceiling = high_cut * items.len() as f64;
    let retained: BTreeMap<&str, usize> = label_frequencies(items)
        .into_iter()
        .filter(|&(_, f)| f >= low_cut && (f as f64) <= ceiling)
        .collect();

    let mut table = CategoryTable {
        vocabulary: retained.keys().map(|s| s.to_string()).collect(),
        ..Default::default()
    };
    for item in items {
        // highest frequency first, then lexicographically smallest label
        let best = item
            .raw_categories
            .iter()
            .map(|c| c.trim())
            .filter_map(|c| retained.get(c).map(|&f| (c, f)))
            .min_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let category = match best {
            Some((label, _)) => label.to_string(),
            None => {
                table.vocabulary.insert(UNCATEGORIZED.to_string());
                UNCATEGORIZED.to_string()
            }
        };
        table.assignments.insert(item.item_id.clone(), category);
    }
    Ok(table)
}

/// Result of folding reviews into per-user histories.
#[derive(Debug, Clone, Default)]
pub struct HistoryBuild {
    pub histories: BTreeMap<String, UserHistory>,
    pub rejected: usize,
    pub duplicates_dropped: usize,
}

/// Fold reviews into chronological per-user histories.
///
/// Reviews are ordered by timestamp when every review of that user carries
/// one, otherwise by input order. A repeated (user, item) pair keeps only the
/// latest review, placed at that review's position.
pub fn build_user_histories(
    reviews: &[RawReview],
    threshold: f64,
    catalog: &Catalog,
) -> Result<HistoryBuild, CorpusError> {
    if !threshold.is_finite() {
        return Err(CorpusError::InvalidParameter(format!(
            "non-finite threshold {threshold}"
        )));
    }
    let mut out = HistoryBuild::default();
    let mut per_user: BTreeMap<&str, Vec<(usize, &RawReview)>> = BTreeMap::new();
    for (idx, review) in reviews.iter().enumerate() {
        if !catalog.contains(&review.item_id) || !review.rating.is_finite() {
            tracing::warn!(
                user = %review.user_id,
                item = %review.item_id,
                "rejected review record"
            );
            out.rejected += 1;
            continue;
        }
        per_user.entry(&review.user_id).or_default().push((idx, review));
    }

    for (user, mut records) in per_user {
        if records.iter().all(|(_, r)| r.timestamp.is_some()) {
            records.sort_by_key(|(idx, r)| (r.timestamp, *idx));
        }
        let mut latest: HashMap<&str, usize> = HashMap::new();
        for (pos, (_, r)) in records.iter().enumerate() {
            latest.insert(r.item_id.as_str(), pos);
        }
        let mut history = UserHistory::default();
        for (pos, (_, r)) in records.iter().enumerate() {
            if latest[r.item_id.as_str()] != pos {
                out.duplicates_dropped += 1;
                continue;
            }
            history.push(r.item_id.clone(), binarize_rating(r.rating, threshold)?);
        }
        out.histories.insert(user.to_string(), history);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn item(id: &str, cats: &[&str]) -> RawItem {
        RawItem {
            item_id: id.into(),
            name: format!("name {id}"),
            attributes: vec![],
            raw_categories: cats.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn review(user: &str, item: &str, rating: f64, ts: Option<i64>) -> RawReview {
        RawReview {
            user_id: user.into(),
            item_id: item.into(),
            rating,
            comment: String::new(),
            timestamp: ts,
        }
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize_rating(3.0, 3.0).unwrap(), Label::Like);
        assert_eq!(binarize_rating(2.0, 3.0).unwrap(), Label::Dislike);
        for t in [-1.5, 0.0, 3.0, 7.25, 1e9] {
            assert_eq!(binarize_rating(t, t).unwrap(), Label::Like);
        }
        assert!(binarize_rating(f64::NAN, 3.0).is_err());
        assert!(binarize_rating(f64::INFINITY, 3.0).is_err());
    }

    proptest! {
        #[test]
        fn binarize_is_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0, t in -10.0f64..10.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(binarize_rating(lo, t).unwrap() <= binarize_rating(hi, t).unwrap());
        }
    }

    #[test]
    fn umbrella_label_is_removed() {
        let items: Vec<_> = (0..10)
            .map(|i| {
                if i < 4 {
                    item(&format!("i{i}"), &["Restaurants", "Diner"])
                } else {
                    item(&format!("i{i}"), &["Restaurants"])
                }
            })
            .collect();
        let table = assign_categories(&items, 1, 0.8).unwrap();
        assert!(!table.vocabulary.contains("Restaurants"));
        assert_eq!(table.category_of("i0"), Some("Diner"));
        assert_eq!(table.category_of("i9"), Some(UNCATEGORIZED));
        assert!(table.vocabulary.contains(UNCATEGORIZED));
    }

    #[test]
    fn higher_retained_frequency_wins() {
        let mut items = vec![item("target", &["Bakeries", "Food"])];
        for i in 0..3 {
            items.push(item(&format!("b{i}"), &["Bakeries"]));
        }
        for i in 0..5 {
            items.push(item(&format!("f{i}"), &["Food"]));
        }
        for i in 0..6 {
            items.push(item(&format!("o{i}"), &["Other"]));
        }
        let table = assign_categories(&items, 1, 1.0).unwrap();
        assert_eq!(table.category_of("target"), Some("Food"));
    }

    #[test]
    fn frequency_tie_breaks_lexicographically() {
        let items = vec![item("a", &["Zed", "Alpha"]), item("b", &["Zed", "Alpha"])];
        let table = assign_categories(&items, 0, 1.0).unwrap();
        assert_eq!(table.category_of("a"), Some("Alpha"));
    }

    #[test]
    fn low_cut_removes_rare_labels() {
        let items = vec![item("a", &["Rare", "Common"]), item("b", &["Common"])];
        let table = assign_categories(&items, 2, 1.0).unwrap();
        assert_eq!(table.category_of("a"), Some("Common"));
        assert!(!table.vocabulary.contains("Rare"));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(assign_categories(&[], 1, 0.5).is_err());
        assert!(assign_categories(&[item("a", &["x"])], 1, 1.5).is_err());
        assert!(assign_categories(&[item("a", &["x"]), item("a", &["y"])], 1, 0.5).is_err());
        let mut nameless = item("a", &["x"]);
        nameless.name = " ".into();
        assert!(assign_categories(&[nameless], 1, 0.5).is_err());
    }

    fn random_items(rng: &mut ChaCha8Rng, n: usize) -> Vec<RawItem> {
        let labels = ["A", "B", "C", "D", "E", "F", "G"];
        (0..n)
            .map(|i| {
                let k = rng.random_range(0..4);
                let cats: Vec<&str> = (0..k).map(|_| labels[rng.random_range(0..labels.len())]).collect();
                item(&format!("i{i:03}"), &cats)
            })
            .collect()
    }

    #[test]
    fn every_label_surviving_matches_brute_force_counter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let items = random_items(&mut rng, 200);
        let table = assign_categories(&items, 0, 1.0).unwrap();
        // oracle: count label occurrences by scanning items per label
        for it in &items {
            let mut best: Option<(String, usize)> = None;
            let mut distinct: Vec<&String> = it.raw_categories.iter().collect();
            distinct.sort();
            distinct.dedup();
            for label in distinct {
                let count = items.iter().filter(|o| o.raw_categories.contains(label)).count();
                let better = match &best {
                    None => true,
                    Some((bl, bc)) => count > *bc || (count == *bc && label < bl),
                };
                if better {
                    best = Some((label.clone(), count));
                }
            }
            let expected = best.map(|b| b.0).unwrap_or_else(|| UNCATEGORIZED.to_string());
            assert_eq!(table.category_of(&it.item_id), Some(expected.as_str()));
        }
    }

    #[test]
    fn category_assignment_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let items = random_items(&mut rng, 120);
        let reference = assign_categories(&items, 3, 0.4).unwrap();
        for _ in 0..5 {
            let mut shuffled = items.clone();
            shuffled.shuffle(&mut rng);
            assert_eq!(assign_categories(&shuffled, 3, 0.4).unwrap(), reference);
        }
    }

    fn catalog(n: usize) -> Catalog {
        Catalog::new((0..n).map(|i| item(&format!("item{i}"), &["x"])).collect()).unwrap()
    }

    #[test]
    fn histories_sort_by_timestamp_then_binarize() {
        let cat = catalog(2);
        let reviews = vec![
            review("u", "item1", 4.0, Some(1)),
            review("u", "item0", 2.0, Some(0)),
        ];
        let built = build_user_histories(&reviews, 3.0, &cat).unwrap();
        let h = &built.histories["u"];
        assert_eq!(
            h.entries,
            vec![
                HistoryEntry::new("item0", Label::Dislike),
                HistoryEntry::new("item1", Label::Like)
            ]
        );
        let positions: Vec<usize> = h.interactions("u").iter().map(|i| i.position).collect();
        assert_eq!(positions, vec![0, 1]);
    }

    #[test]
    fn empty_reviews_give_empty_mapping() {
        let built = build_user_histories(&[], 3.0, &catalog(1)).unwrap();
        assert!(built.histories.is_empty());
    }

    #[test]
    fn unknown_items_are_counted_not_fatal() {
        let cat = catalog(1);
        let reviews = vec![review("u", "ghost", 5.0, None), review("u", "item0", 5.0, None)];
        let built = build_user_histories(&reviews, 3.0, &cat).unwrap();
        assert_eq!(built.rejected, 1);
        assert_eq!(built.histories["u"].len(), 1);
    }

    #[test]
    fn duplicate_pair_keeps_latest() {
        let cat = catalog(3);
        let reviews = vec![
            review("u", "item0", 5.0, Some(0)),
            review("u", "item1", 5.0, Some(1)),
            review("u", "item0", 1.0, Some(2)),
        ];
        let built = build_user_histories(&reviews, 3.0, &cat).unwrap();
        assert_eq!(built.duplicates_dropped, 1);
        assert_eq!(
            built.histories["u"].entries,
            vec![
                HistoryEntry::new("item1", Label::Like),
                HistoryEntry::new("item0", Label::Dislike)
            ]
        );
    }

    #[test]
    fn missing_timestamps_keep_input_order() {
        let cat = catalog(3);
        let reviews = vec![
            review("u", "item2", 5.0, None),
            review("u", "item0", 1.0, Some(5)),
            review("u", "item1", 5.0, None),
        ];
        let built = build_user_histories(&reviews, 3.0, &cat).unwrap();
        let ids: Vec<&str> = built.histories["u"].iter().map(|e| e.item_id.as_str()).collect();
        assert_eq!(ids, vec!["item2", "item0", "item1"]);
    }

    #[test]
    fn thousand_reviews_match_sort_then_fold_oracle() {
        let cat = catalog(40);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let reviews: Vec<RawReview> = (0..1000)
            .map(|_| {
                review(
                    &format!("u{}", rng.random_range(0..25)),
                    &format!("item{}", rng.random_range(0..40)),
                    rng.random_range(1..=5) as f64,
                    Some(rng.random_range(0..10_000)),
                )
            })
            .collect();
        let built = build_user_histories(&reviews, 3.0, &cat).unwrap();

        // oracle: per user, sort (ts, idx), keep the last occurrence of each item
        let mut oracle: BTreeMap<String, Vec<(String, u8)>> = BTreeMap::new();
        let mut users: Vec<&str> = reviews.iter().map(|r| r.user_id.as_str()).collect();
        users.sort();
        users.dedup();
        for u in users {
            let mut rs: Vec<(i64, usize, &RawReview)> = reviews
                .iter()
                .enumerate()
                .filter(|(_, r)| r.user_id == u)
                .map(|(i, r)| (r.timestamp.unwrap(), i, r))
                .collect();
            rs.sort_by_key(|r| (r.0, r.1));
            let mut seq: Vec<(String, u8)> = Vec::new();
            for (_, _, r) in rs {
                seq.retain(|(id, _)| id != &r.item_id);
                seq.push((r.item_id.clone(), u8::from(r.rating >= 3.0)));
            }
            oracle.insert(u.to_string(), seq);
        }
        let got: BTreeMap<String, Vec<(String, u8)>> = built
            .histories
            .iter()
            .map(|(u, h)| {
                (
                    u.clone(),
                    h.iter().map(|e| (e.item_id.clone(), e.label.as_u8())).collect(),
                )
            })
            .collect();
        assert_eq!(got, oracle);
        for h in built.histories.values() {
            let mut ids: Vec<&str> = h.iter().map(|e| e.item_id.as_str()).collect();
            ids.sort();
            let n = ids.len();
            ids.dedup();
            assert_eq!(ids.len(), n, "duplicate item ids in history");
        }
    }

    #[test]
    fn label_serializes_as_integer() {
        let e = HistoryEntry::new("a", Label::Like);
        assert_eq!(serde_json::to_string(&e).unwrap(), r#"{"item_id":"a","label":1}"#);
        assert!(serde_json::from_str::<HistoryEntry>(r#"{"item_id":"a","label":2}"#).is_err());
    }
}
