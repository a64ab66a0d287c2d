//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use simrec_core::corpus::{Label, UserHistory};
use simrec_core::seeding::rng_from;

pub const PLANTED_ITEMS: usize = 500;
pub const PLANTED_USERS: usize = 200;
pub const PLANTED_CATS: usize = 5;

pub fn planted_category(item: usize) -> usize {
    item % PLANTED_CATS
}

pub fn planted_item_id(item: usize) -> String {
    format!("item{item:03}")
}

/// Majority category of a prefix; ties go to the smallest category index.
pub fn majority(prefix: &[usize]) -> Option<usize> {
    let mut counts = [0usize; PLANTED_CATS];
    prefix.iter().for_each(|&i| counts[planted_category(i)] += 1);
    let best = *counts.iter().max()?;
    (best > 0).then(|| counts.iter().position(|&c| c == best).unwrap())
}

/// Users drift toward a favourite category; an interaction is liked iff the
/// item's category is the majority category of everything before it.
pub struct PlantedCorpus {
    pub histories: Vec<UserHistory>,
    pub item_rows: Vec<Vec<usize>>,
    pub vocab: Vec<String>,
}

pub fn planted_corpus(seed: u64) -> PlantedCorpus {
    let mut rng = rng_from(seed, "planted-corpus");
    let vocab: Vec<String> = (0..PLANTED_ITEMS).map(planted_item_id).collect();
    let mut histories = Vec::new();
    let mut item_rows = Vec::new();
    for _ in 0..PLANTED_USERS {
        let fav = rng.random_range(0..PLANTED_CATS);
        let n = rng.random_range(30..50);
        let mut items: Vec<usize> = Vec::new();
        let mut h = UserHistory::default();
        for _ in 0..n {
            let cat = if rng.random_bool(0.6) { fav } else { rng.random_range(0..PLANTED_CATS) };
            let item = rng.random_range(0..PLANTED_ITEMS / PLANTED_CATS) * PLANTED_CATS + cat;
            let liked = majority(&items) == Some(planted_category(item));
            h.push(vocab[item].clone(), Label::from_bool(liked));
            items.push(item);
        }
        histories.push(h);
        item_rows.push(items);
    }
    PlantedCorpus { histories, item_rows, vocab }
}

pub fn planted_hyper() -> simrec_core::basemodels::StaHyper {
    simrec_core::basemodels::StaHyper {
        dim: 16,
        max_len: 30,
        epochs: 20,
        lr: 0.01,
        batch_size: 16,
        seed: 3,
        ..Default::default()
    }
}
