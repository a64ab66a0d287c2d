mod common;

use common::*;
use rand::Rng;
use simrec_core::basemodels::{f_sta, train_sequential, StaHyper};
use simrec_core::corpus::UserHistory;
use simrec_core::seeding::rng_from;

#[test]
fn one_epoch_lowers_training_loss() {
    let c = planted_corpus(1);
    let hyper = StaHyper { epochs: 1, ..planted_hyper() };
    let (_, log) = train_sequential(&c.histories, &c.vocab, &hyper).unwrap();
    assert!(log.epoch_losses[0] < log.initial_loss, "{log:?}");
}

#[test]
fn rule_matching_candidates_score_higher_on_average() {
    let c = planted_corpus(1);
    let (model, log) = train_sequential(&c.histories, &c.vocab, &planted_hyper()).unwrap();
    assert!(log.epoch_losses.iter().all(|l| l.is_finite()));
    let mut rng = rng_from(5, "pairs");
    let (mut hit, mut miss) = (Vec::new(), Vec::new());
    while hit.len() + miss.len() < 1000 {
        let u = rng.random_range(0..c.histories.len());
        let rows = &c.item_rows[u];
        let cut = rng.random_range(1..rows.len());
        let prefix: UserHistory = c.histories[u].entries[..cut].iter().cloned().collect();
        let cand = rng.random_range(0..PLANTED_ITEMS);
        let (_, score) = f_sta(&model, &prefix, &c.vocab[cand]);
        if majority(&rows[..cut]) == Some(planted_category(cand)) {
            hit.push(score);
        } else {
            miss.push(score);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!hit.is_empty() && !miss.is_empty());
    assert!(mean(&hit) > mean(&miss), "{} vs {}", mean(&hit), mean(&miss));
}

#[test]
fn training_is_deterministic_given_seed() {
    let c = planted_corpus(2);
    let hyper = StaHyper { epochs: 2, ..planted_hyper() };
    let (a, la) = train_sequential(&c.histories, &c.vocab, &hyper).unwrap();
    let (b, lb) = train_sequential(&c.histories, &c.vocab, &hyper).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.to_json(), b.to_json());
}
