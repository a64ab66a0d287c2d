//! Synthetic world with planted preferences. Each category owns a pool of
//! pro and con keywords; a user likes an item iff it belongs to their
//! favourite category and shares a pro keyword with their affinity set.
//! Item attributes carry `good:`/`bad:` tags so the offline LLM backend
//! reports exactly the planted keywords.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, RawItem, RawReview, UserHistory};
use crate::distiller::{ItemProfile, GROUNDED_CON_TAG, GROUNDED_PRO_TAG};
use crate::seeding::rng_from;

const NOUNS: [&str; 12] = [
    "diner", "bakery", "cinema", "museum", "spa", "arcade", "library", "garden", "brewery", "theater", "gym",
    "market",
];
const GOOD: [&str; 10] = [
    "cozy", "friendly", "spotless", "scenic", "affordable", "lively", "quiet", "fresh", "roomy", "punctual",
];
const BAD: [&str; 10] = [
    "noisy", "cramped", "pricey", "grimy", "slow", "stale", "dim", "rude", "crowded", "drafty",
];

/// Label every generated item also carries; frequent enough that category
/// assignment drops it.
pub const UMBRELLA_CATEGORY: &str = "Venues";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    /// Pro (and con) keywords per category.
    pub pool_size: usize,
    pub pros_per_item: usize,
    pub cons_per_item: usize,
    pub affinity_size: usize,
    pub history_len: usize,
    /// Probability that a history slot is drawn from the favourite category.
    pub favourite_share: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            users: 200,
            items: 500,
            categories: 8,
            pool_size: 6,
            pros_per_item: 2,
            cons_per_item: 2,
            affinity_size: 2,
            history_len: 20,
            favourite_share: 0.5,
            seed: 7,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.users == 0 || self.items == 0 || self.categories == 0 {
            return Err("users, items and categories must be positive".into());
        }
        if self.items < self.categories {
            return Err("every category needs at least one item".into());
        }
        if self.pros_per_item > self.pool_size || self.cons_per_item > self.pool_size || self.affinity_size > self.pool_size {
            return Err("per-item and affinity keyword counts cannot exceed pool_size".into());
        }
        if self.affinity_size == 0 || self.pros_per_item == 0 {
            return Err("affinity_size and pros_per_item must be positive".into());
        }
        if self.history_len > self.items {
            return Err("history_len exceeds the catalog".into());
        }
        if !(0.0..=1.0).contains(&self.favourite_share) {
            return Err("favourite_share must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedUser {
    pub user_id: String,
    pub favourite: String,
    pub affinity: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub categories: Vec<String>,
    pub items: Vec<RawItem>,
    pub item_category: BTreeMap<String, String>,
    /// Planted keywords per item, in item order.
    pub profiles: Vec<ItemProfile>,
    pub users: Vec<PlantedUser>,
    pub histories: BTreeMap<String, UserHistory>,
    profile_index: BTreeMap<String, usize>,
    user_index: BTreeMap<String, usize>,
}

fn category_name(c: usize) -> String {
    let noun = NOUNS[c % NOUNS.len()];
    let title = format!("{}{}", noun[..1].to_uppercase(), &noun[1..]);
    match c / NOUNS.len() {
        0 => title,
        round => format!("{title} {}", round + 1),
    }
}

fn keyword(adjectives: &[&str], j: usize, c: usize) -> String {
    let noun = NOUNS[c % NOUNS.len()];
    let round = j / adjectives.len() + c / NOUNS.len();
    match round {
        0 => format!("{} {noun}", adjectives[j % adjectives.len()]),
        r => format!("{} {noun} {}", adjectives[j % adjectives.len()], r + 1),
    }
}

pub fn pro_pool(spec: &WorldSpec, c: usize) -> Vec<String> {
    (0..spec.pool_size).map(|j| keyword(&GOOD, j, c)).collect()
}

pub fn con_pool(spec: &WorldSpec, c: usize) -> Vec<String> {
    (0..spec.pool_size).map(|j| keyword(&BAD, j, c)).collect()
}

fn pick(rng: &mut impl Rng, pool: &[String], k: usize) -> Vec<String> {
    let mut ix = index::sample(rng, pool.len(), k).into_vec();
    ix.sort_unstable();
    ix.into_iter().map(|i| pool[i].clone()).collect()
}

pub fn generate_world(spec: &WorldSpec) -> Result<World, String> {
    spec.validate()?;
    let categories: Vec<String> = (0..spec.categories).map(category_name).collect();
    let mut rng = rng_from(spec.seed, "world-items");
    let mut items = Vec::with_capacity(spec.items);
    let mut profiles = Vec::with_capacity(spec.items);
    let mut item_category = BTreeMap::new();
    let mut by_category: Vec<Vec<usize>> = vec![Vec::new(); spec.categories];
    for i in 0..spec.items {
        let c = i % spec.categories;
        let id = format!("i{i:05}");
        let pros = pick(&mut rng, &pro_pool(spec, c), spec.pros_per_item);
        let cons = pick(&mut rng, &con_pool(spec, c), spec.cons_per_item);
        let mut attributes: Vec<String> = pros.iter().map(|k| format!("{GROUNDED_PRO_TAG}{k}")).collect();
        attributes.extend(cons.iter().map(|k| format!("{GROUNDED_CON_TAG}{k}")));
        profiles.push(ItemProfile::with_keywords(
            &id,
            &categories[c],
            pros.iter().map(String::as_str),
            cons.iter().map(String::as_str),
        ));
        items.push(RawItem {
            item_id: id.clone(),
            name: format!("{} No. {}", categories[c], i / spec.categories + 1),
            attributes,
            raw_categories: vec![categories[c].clone(), UMBRELLA_CATEGORY.to_string()],
        });
        item_category.insert(id, categories[c].clone());
        by_category[c].push(i);
    }
    let profile_index = items.iter().enumerate().map(|(i, it)| (it.item_id.clone(), i)).collect();

    let mut rng = rng_from(spec.seed, "world-users");
    let mut users = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let c = rng.random_range(0..spec.categories);
        users.push(PlantedUser {
            user_id: format!("u{u:05}"),
            favourite: categories[c].clone(),
            affinity: pick(&mut rng, &pro_pool(spec, c), spec.affinity_size).into_iter().collect(),
        });
    }
    let user_index = users.iter().enumerate().map(|(i, u)| (u.user_id.clone(), i)).collect();

    let mut world = World {
        spec: spec.clone(),
        categories,
        items,
        item_category,
        profiles,
        users,
        histories: BTreeMap::new(),
        profile_index,
        user_index,
    };

    let mut rng = rng_from(spec.seed, "world-histories");
    for user in &world.users {
        let fav = world.categories.iter().position(|c| *c == user.favourite).expect("known category");
        let fav_items = &by_category[fav];
        let mut used = BTreeSet::new();
        let mut history = UserHistory::default();
        while history.len() < spec.history_len {
            let fav_left = fav_items.iter().any(|i| !used.contains(i));
            let i = if fav_left && rng.random::<f64>() < spec.favourite_share {
                fav_items[rng.random_range(0..fav_items.len())]
            } else {
                rng.random_range(0..spec.items)
            };
            if !used.insert(i) {
                continue;
            }
            let id = &world.items[i].item_id;
            history.push(id.clone(), Label::from_bool(world.planted_like(user, id)));
        }
        world.histories.insert(user.user_id.clone(), history);
    }
    Ok(world)
}

impl World {
    fn planted_like(&self, user: &PlantedUser, item_id: &str) -> bool {
        let Some(&i) = self.profile_index.get(item_id) else {
            return false;
        };
        let p = &self.profiles[i];
        p.category == user.favourite && p.pros.iter().any(|k| user.affinity.contains(k))
    }

    /// Ground-truth preference of a user for an item.
    pub fn likes(&self, user_id: &str, item_id: &str) -> Option<bool> {
        let u = &self.users[*self.user_index.get(user_id)?];
        self.profile_index.contains_key(item_id).then(|| self.planted_like(u, item_id))
    }

    pub fn user(&self, user_id: &str) -> Option<&PlantedUser> {
        self.user_index.get(user_id).map(|&i| &self.users[i])
    }

    /// One review per history entry: rating 5 for a like, 1 otherwise, with
    /// the history position as timestamp.
    pub fn reviews(&self) -> Vec<RawReview> {
        let mut out = Vec::new();
        for (user, history) in &self.histories {
            for (t, e) in history.iter().enumerate() {
                let liked = e.label.is_like();
                out.push(RawReview {
                    user_id: user.clone(),
                    item_id: e.item_id.clone(),
                    rating: if liked { 5.0 } else { 1.0 },
                    comment: if liked { "Would come back." } else { "Not for me." }.to_string(),
                    timestamp: Some(t as i64),
                });
            }
        }
        out
    }

    /// Probability that a uniformly drawn (user, item) pair is a like,
    /// computed from the planted structure.
    pub fn exact_like_rate(&self) -> f64 {
        let mut hits = 0usize;
        for u in &self.users {
            hits += self.items.iter().filter(|it| self.planted_like(u, &it.item_id)).count();
        }
        hits as f64 / (self.users.len() * self.items.len()) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{assign_categories, build_user_histories, Catalog, DEFAULT_CATEGORY_HIGH_CUT, DEFAULT_CATEGORY_LOW_CUT};

    #[test]
    fn deterministic_and_well_formed() {
        let spec = WorldSpec::default();
        let a = generate_world(&spec).unwrap();
        let b = generate_world(&spec).unwrap();
        assert_eq!(a.items, b.items);
        assert_eq!(a.histories, b.histories);
        assert_eq!(a.categories.len(), 8);
        for p in &a.profiles {
            assert_eq!(p.pros.len(), 2);
            assert_eq!(p.cons.len(), 2);
        }
        for h in a.histories.values() {
            assert_eq!(h.len(), spec.history_len);
            let distinct: BTreeSet<_> = h.iter().map(|e| &e.item_id).collect();
            assert_eq!(distinct.len(), h.len());
        }
        let other = generate_world(&WorldSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(other.histories, a.histories);
    }

    #[test]
    fn history_labels_follow_the_planted_rule() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        for (user, h) in &w.histories {
            let u = w.user(user).unwrap();
            for e in h.iter() {
                let p = &w.profiles[w.profile_index[&e.item_id]];
                let rule = p.category == u.favourite && !p.pros.is_disjoint(&u.affinity);
                assert_eq!(e.label.is_like(), rule);
            }
        }
    }

    #[test]
    fn ingest_recovers_categories_and_histories() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        let table = assign_categories(&w.items, DEFAULT_CATEGORY_LOW_CUT, DEFAULT_CATEGORY_HIGH_CUT).unwrap();
        assert_eq!(table.assignments, w.item_category);
        let catalog = Catalog::new(w.items.clone()).unwrap();
        let built = build_user_histories(&w.reviews(), 3.0, &catalog).unwrap();
        assert_eq!(built.histories, w.histories);
    }

    #[test]
    fn like_rate_matches_the_planted_structure() {
        let spec = WorldSpec::default();
        let w = generate_world(&spec).unwrap();
        // analytic: P(fav category) * P(two random pros hit a 2-of-6 affinity)
        let pool = spec.pool_size as f64;
        let miss = ((pool - 2.0) * (pool - 3.0)) / (pool * (pool - 1.0));
        let per_cat: Vec<f64> = (0..spec.categories)
            .map(|c| (0..spec.items).filter(|i| i % spec.categories == c).count() as f64 / spec.items as f64)
            .collect();
        let fav_share: f64 = w
            .users
            .iter()
            .map(|u| per_cat[w.categories.iter().position(|c| *c == u.favourite).unwrap()])
            .sum::<f64>()
            / w.users.len() as f64;
        let analytic = fav_share * (1.0 - miss);
        let exact = w.exact_like_rate();
        assert!((exact - analytic).abs() < 0.02, "exact {exact} vs analytic {analytic}");

        let mut rng = rng_from(99, "mc");
        let n = 20_000;
        let hits = (0..n)
            .filter(|_| {
                let u = &w.users[rng.random_range(0..w.users.len())];
                let it = &w.items[rng.random_range(0..w.items.len())];
                w.likes(&u.user_id, &it.item_id).unwrap()
            })
            .count();
        let mc = hits as f64 / n as f64;
        let se = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((mc - exact).abs() < 4.0 * se, "mc {mc} vs exact {exact}");
    }
}
