//! Single-block causal self-attention scorer.
//!
//! Tokens: a start token followed by the (item, feedback) history, each
//! embedded as item + position + feedback label. One causal attention layer
//! with residual and a ReLU feed-forward with residual; no normalization.
//! The candidate logit is the mean of the block outputs over the prefix,
//! dotted with the (shared) candidate item embedding, plus item and global
//! biases. Trained with binary cross-entropy and Adam; gradients are manual.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BaseModelError, Vote};
use crate::corpus::{Label, UserHistory};
use crate::nn::{Adam, AdamConfig};
use crate::seeding::rng_from;

pub const CHECKPOINT_FORMAT: &str = "simrec-sta";
pub const CHECKPOINT_VERSION: u32 = 1;

const PAD: usize = 0;
const OOV: usize = 1;
const RESERVED: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaHyper {
    pub dim: usize,
    pub layers: usize,
    pub max_len: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Decoupled L2 decay applied each step (0 disables).
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for StaHyper {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 1,
            max_len: 50,
            lr: 0.005,
            epochs: 20,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 7,
        }
    }
}

impl StaHyper {
    pub fn validate(&self) -> Result<(), BaseModelError> {
        let bad = |m: &str| Err(BaseModelError::InvalidHyper(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.layers != 1 {
            return bad("only a single attention block is supported (layers = 1)");
        }
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be a positive finite number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be a non-negative finite number");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub initial_loss: f64,
    /// Full training-set loss after each epoch.
    pub epoch_losses: Vec<f64>,
    pub heldout_auc: Option<f64>,
    pub train_examples: usize,
    pub heldout_examples: usize,
}

/// All trainable tensors; every array is in standard layout.
#[derive(Debug, Clone, PartialEq)]
struct Params {
    item: Array2<f64>,
    pos: Array2<f64>,
    feedback: Array2<f64>,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    item_bias: Array1<f64>,
    out_bias: Array1<f64>,
}

const PARAM_NAMES: [&str; 12] = [
    "item", "pos", "feedback", "wq", "wk", "wv", "w1", "b1", "w2", "b2", "item_bias", "out_bias",
];

impl Params {
    fn zeros(vocab: usize, max_len: usize, d: usize) -> Self {
        Self {
            item: Array2::zeros((vocab, d)),
            pos: Array2::zeros((max_len + 1, d)),
            feedback: Array2::zeros((2, d)),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            w1: Array2::zeros((d, d)),
            b1: Array1::zeros(d),
            w2: Array2::zeros((d, d)),
            b2: Array1::zeros(d),
            item_bias: Array1::zeros(vocab),
            out_bias: Array1::zeros(1),
        }
    }

    fn init(vocab: usize, max_len: usize, d: usize, seed: u64) -> Self {
        let mut p = Self::zeros(vocab, max_len, d);
        let mut rng = rng_from(seed, "sta-init");
        let emb = Normal::new(0.0, 0.1).expect("valid std");
        let lin = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        for (i, t) in p.tensors_mut().into_iter().enumerate() {
            let dist = match PARAM_NAMES[i] {
                "item" | "pos" | "feedback" => &emb,
                "wq" | "wk" | "wv" | "w1" | "w2" => &lin,
                _ => continue,
            };
            t.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
        }
        p
    }

    fn tensors(&self) -> [&[f64]; 12] {
        fn f(a: Option<&[f64]>) -> &[f64] {
            a.expect("standard layout")
        }
        [
            f(self.item.as_slice()),
            f(self.pos.as_slice()),
            f(self.feedback.as_slice()),
            f(self.wq.as_slice()),
            f(self.wk.as_slice()),
            f(self.wv.as_slice()),
            f(self.w1.as_slice()),
            f(self.b1.as_slice()),
            f(self.w2.as_slice()),
            f(self.b2.as_slice()),
            f(self.item_bias.as_slice()),
            f(self.out_bias.as_slice()),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 12] {
        fn f(a: Option<&mut [f64]>) -> &mut [f64] {
            a.expect("standard layout")
        }
        [
            f(self.item.as_slice_mut()),
            f(self.pos.as_slice_mut()),
            f(self.feedback.as_slice_mut()),
            f(self.wq.as_slice_mut()),
            f(self.wk.as_slice_mut()),
            f(self.wv.as_slice_mut()),
            f(self.w1.as_slice_mut()),
            f(self.b1.as_slice_mut()),
            f(self.w2.as_slice_mut()),
            f(self.b2.as_slice_mut()),
            f(self.item_bias.as_slice_mut()),
            f(self.out_bias.as_slice_mut()),
        ]
    }

    fn shapes(&self) -> [Vec<usize>; 12] {
        [
            self.item.shape().to_vec(),
            self.pos.shape().to_vec(),
            self.feedback.shape().to_vec(),
            self.wq.shape().to_vec(),
            self.wk.shape().to_vec(),
            self.wv.shape().to_vec(),
            self.w1.shape().to_vec(),
            self.b1.shape().to_vec(),
            self.w2.shape().to_vec(),
            self.b2.shape().to_vec(),
            self.item_bias.shape().to_vec(),
            self.out_bias.shape().to_vec(),
        ]
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// One encoded sequence: token item rows and feedback labels (None for the
/// start token), plus the (prefix end, candidate row, target) triples scored
/// against it.
#[derive(Debug, Clone)]
struct Sequence {
    items: Vec<usize>,
    labels: Vec<Option<usize>>,
    targets: Vec<(usize, usize, f64)>,
}

struct Forward {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    a: Array2<f64>,
    h: Array2<f64>,
    u: Array2<f64>,
    r: Array2<f64>,
    /// Running mean of block outputs over each prefix.
    m: Array2<f64>,
}

fn forward(p: &Params, items: &[usize], labels: &[Option<usize>]) -> Forward {
    let n = items.len();
    let d = p.item.ncols();
    let mut x = Array2::zeros((n, d));
    for t in 0..n {
        let mut row = x.row_mut(t);
        row += &p.item.row(items[t]);
        row += &p.pos.row(t);
        if let Some(l) = labels[t] {
            row += &p.feedback.row(l);
        }
    }
    let q = x.dot(&p.wq);
    let k = x.dot(&p.wk);
    let v = x.dot(&p.wv);
    let scale = 1.0 / (d as f64).sqrt();
    let mut a = q.dot(&k.t()) * scale;
    for t in 0..n {
        let mut row = a.row_mut(t);
        let max = row.slice(s![..=t]).fold(f64::NEG_INFINITY, |m, &z| m.max(z));
        let mut sum = 0.0;
        for j in 0..n {
            if j <= t {
                row[j] = (row[j] - max).exp();
                sum += row[j];
            } else {
                row[j] = 0.0;
            }
        }
        row.mapv_inplace(|z| z / sum);
    }
    let h = &x + &a.dot(&v);
    let u = h.dot(&p.w1) + &p.b1;
    let r = u.mapv(|z| z.max(0.0));
    let z = &h + &r.dot(&p.w2) + &p.b2;
    let mut m = Array2::zeros((n, d));
    let mut acc = Array1::<f64>::zeros(d);
    for t in 0..n {
        acc += &z.row(t);
        m.row_mut(t).assign(&(&acc / (t + 1) as f64));
    }
    Forward { x, q, k, v, a, h, u, r, m }
}

fn logit(p: &Params, m: ndarray::ArrayView1<f64>, cand: usize) -> f64 {
    m.dot(&p.item.row(cand)) + p.item_bias[cand] + p.out_bias[0]
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable BCE on a logit.
fn bce(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Sum of BCE over the sequence's targets; accumulates `weight * dLoss` into
/// `g` when given.
fn loss_and_grad(p: &Params, seq: &Sequence, weight: f64, g: Option<&mut Params>) -> f64 {
    let f = forward(p, &seq.items, &seq.labels);
    let mut loss = 0.0;
    for &(t, c, y) in &seq.targets {
        loss += bce(logit(p, f.m.row(t), c), y);
    }
    let Some(g) = g else { return loss };

    let n = seq.items.len();
    let d = p.item.ncols();
    let mut dm = Array2::<f64>::zeros((n, d));
    for &(t, c, y) in &seq.targets {
        let gl = weight * (sigmoid(logit(p, f.m.row(t), c)) - y);
        dm.row_mut(t).scaled_add(gl, &p.item.row(c));
        g.item.row_mut(c).scaled_add(gl, &f.m.row(t));
        g.item_bias[c] += gl;
        g.out_bias[0] += gl;
    }
    // m_t = mean_{s<=t} z_s  =>  dz_s = sum_{t>=s} dm_t / (t+1)
    let mut dz = Array2::<f64>::zeros((n, d));
    let mut acc = Array1::<f64>::zeros(d);
    for t in (0..n).rev() {
        acc.scaled_add(1.0 / (t + 1) as f64, &dm.row(t));
        dz.row_mut(t).assign(&acc);
    }
    // z = h + relu(h w1 + b1) w2 + b2
    g.w2 += &f.r.t().dot(&dz);
    g.b2 += &dz.sum_axis(Axis(0));
    let mut du = dz.dot(&p.w2.t());
    du.zip_mut_with(&f.u, |g, &u| {
        if u <= 0.0 {
            *g = 0.0;
        }
    });
    g.w1 += &f.h.t().dot(&du);
    g.b1 += &du.sum_axis(Axis(0));
    let dh = &dz + &du.dot(&p.w1.t());
    // h = x + a v
    let mut dx = dh.clone();
    let da = dh.dot(&f.v.t());
    let dv = f.a.t().dot(&dh);
    // row-wise softmax backward; masked entries have a = 0
    let mut ds = Array2::<f64>::zeros((n, n));
    for t in 0..n {
        let arow = f.a.row(t);
        let darow = da.row(t);
        let dot = arow.dot(&darow);
        let mut srow = ds.row_mut(t);
        for j in 0..=t {
            srow[j] = arow[j] * (darow[j] - dot);
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    let dq = ds.dot(&f.k) * scale;
    let dk = ds.t().dot(&f.q) * scale;
    g.wq += &f.x.t().dot(&dq);
    g.wk += &f.x.t().dot(&dk);
    g.wv += &f.x.t().dot(&dv);
    dx += &dq.dot(&p.wq.t());
    dx += &dk.dot(&p.wk.t());
    dx += &dv.dot(&p.wv.t());
    for t in 0..n {
        g.item.row_mut(seq.items[t]).scaled_add(1.0, &dx.row(t));
        g.pos.row_mut(t).scaled_add(1.0, &dx.row(t));
        if let Some(l) = seq.labels[t] {
            g.feedback.row_mut(l).scaled_add(1.0, &dx.row(t));
        }
    }
    loss
}

#[derive(Debug, Clone)]
pub struct SequentialModel {
    hyper: StaHyper,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    params: Params,
}

#[derive(Serialize, Deserialize)]
struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    hyper: StaHyper,
    vocab: Vec<String>,
    weights: BTreeMap<String, Tensor>,
}

impl SequentialModel {
    fn new(hyper: StaHyper, vocab: Vec<String>) -> Self {
        let index = vocab.iter().enumerate().map(|(i, v)| (v.clone(), i + RESERVED)).collect();
        let params = Params::init(vocab.len() + RESERVED, hyper.max_len, hyper.dim, hyper.seed);
        Self {
            hyper,
            vocab,
            index,
            params,
        }
    }

    pub fn hyper(&self) -> &StaHyper {
        &self.hyper
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn row_of(&self, item: &str) -> usize {
        self.index.get(item).copied().unwrap_or(OOV)
    }

    /// Tokens for a history truncated to its last `max_len` entries.
    fn encode(&self, history: &[(usize, Label)]) -> (Vec<usize>, Vec<Option<usize>>) {
        let start = history.len().saturating_sub(self.hyper.max_len);
        let mut items = vec![PAD];
        let mut labels = vec![None];
        for &(row, label) in &history[start..] {
            items.push(row);
            labels.push(Some(label.as_u8() as usize));
        }
        (items, labels)
    }

    /// Probability that the user likes `candidate` given `history`.
    pub fn score(&self, history: &UserHistory, candidate: &str) -> f64 {
        let rows: Vec<(usize, Label)> = history.iter().map(|e| (self.row_of(&e.item_id), e.label)).collect();
        let (items, labels) = self.encode(&rows);
        let f = forward(&self.params, &items, &labels);
        sigmoid(logit(&self.params, f.m.row(items.len() - 1), self.row_of(candidate)))
    }

    /// Training sequences for one user's targets `[from, to)`: one causal
    /// pass covers every target whose truncated history starts at 0, and
    /// each later target gets its own window.
    fn sequences(&self, rows: &[(usize, Label)], from: usize, to: usize, out: &mut Vec<Sequence>) {
        let l = self.hyper.max_len;
        let first_end = to.min(l + 1);
        if from < first_end {
            let (items, labels) = self.encode(&rows[..first_end.saturating_sub(1)]);
            let targets = (from..first_end)
                .map(|k| (k, rows[k].0, rows[k].1.as_u8() as f64))
                .collect();
            out.push(Sequence { items, labels, targets });
        }
        for k in first_end.max(from)..to {
            let (items, labels) = self.encode(&rows[k - l..k]);
            out.push(Sequence {
                targets: vec![(items.len() - 1, rows[k].0, rows[k].1.as_u8() as f64)],
                items,
                labels,
            });
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), BaseModelError> {
        std::fs::write(path, self.to_json()).map_err(|source| BaseModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        let weights = PARAM_NAMES
            .iter()
            .zip(self.params.shapes())
            .zip(self.params.tensors())
            .map(|((name, shape), data)| {
                (
                    name.to_string(),
                    Tensor {
                        shape,
                        data: data.to_vec(),
                    },
                )
            })
            .collect();
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            hyper: self.hyper.clone(),
            vocab: self.vocab.clone(),
            weights,
        };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn load(path: &Path) -> Result<Self, BaseModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| BaseModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, BaseModelError> {
        let bad = |m: String| BaseModelError::Checkpoint(m);
        let mut ck: Checkpoint = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        ck.hyper.validate()?;
        let mut model = Self::new(ck.hyper, ck.vocab);
        let expected = model.params.shapes();
        for ((name, shape), slot) in PARAM_NAMES.iter().zip(expected).zip(model.params.tensors_mut()) {
            let t = ck.weights.remove(*name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.shape != shape || t.data.len() != slot.len() {
                return Err(bad(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape)));
            }
            slot.copy_from_slice(&t.data);
        }
        if let Some(extra) = ck.weights.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        if !model.params.is_finite() {
            return Err(bad("checkpoint holds non-finite weights".into()));
        }
        Ok(model)
    }
}

pub fn f_sta(model: &SequentialModel, history: &UserHistory, candidate: &str) -> (Vote, f64) {
    let score = model.score(history, candidate);
    ((score >= 0.5) as Vote, score)
}

/// Rank-based AUC with average ranks for ties; None when one class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&r| labels[order[r]]).count() as f64 * avg;
        i = j + 1;
    }
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

/// Train on every interaction except each user's last (held out for AUC).
/// `vocab` lists every item that may be scored later; items outside it use
/// the out-of-vocabulary row.
pub fn train_sequential(
    histories: &[UserHistory],
    vocab: &[String],
    hyper: &StaHyper,
) -> Result<(SequentialModel, TrainingLog), BaseModelError> {
    hyper.validate()?;
    if histories.iter().all(|h| h.len() < 2) {
        return Err(BaseModelError::EmptyCorpus);
    }
    let mut vocab: Vec<String> = vocab.to_vec();
    vocab.sort();
    vocab.dedup();
    let mut model = SequentialModel::new(hyper.clone(), vocab);

    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for h in histories {
        let rows: Vec<(usize, Label)> = h.iter().map(|e| (model.row_of(&e.item_id), e.label)).collect();
        if rows.len() < 2 {
            continue;
        }
        model.sequences(&rows, 0, rows.len() - 1, &mut train);
        model.sequences(&rows, rows.len() - 1, rows.len(), &mut heldout);
    }
    let n_train: usize = train.iter().map(|s| s.targets.len()).sum();
    let n_heldout: usize = heldout.iter().map(|s| s.targets.len()).sum();
    let full_loss = |p: &Params| train.iter().map(|s| loss_and_grad(p, s, 0.0, None)).sum::<f64>() / n_train as f64;

    let initial_loss = full_loss(&model.params);
    if !initial_loss.is_finite() {
        return Err(BaseModelError::Diverged { epoch: 0 });
    }
    let sizes: Vec<usize> = model.params.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr), &sizes);
    let (v, l, d) = (model.params.item.nrows(), hyper.max_len, hyper.dim);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng_from(hyper.seed, &format!("sta-epoch-{epoch}")));
        for batch in order.chunks(hyper.batch_size) {
            let count: usize = batch.iter().map(|&i| train[i].targets.len()).sum();
            let mut g = Params::zeros(v, l, d);
            for &i in batch {
                loss_and_grad(&model.params, &train[i], 1.0 / count as f64, Some(&mut g));
            }
            if hyper.weight_decay > 0.0 {
                let shrink = 1.0 - hyper.lr * hyper.weight_decay;
                for t in model.params.tensors_mut() {
                    t.iter_mut().for_each(|x| *x *= shrink);
                }
            }
            let grads = g.tensors();
            adam.step(&mut model.params.tensors_mut(), &grads);
        }
        let loss = full_loss(&model.params);
        if !loss.is_finite() || !model.params.is_finite() {
            return Err(BaseModelError::Diverged { epoch });
        }
        tracing::info!(epoch, loss, "sequential model epoch");
        epoch_losses.push(loss);
    }

    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for s in &heldout {
        let f = forward(&model.params, &s.items, &s.labels);
        for &(t, c, y) in &s.targets {
            scores.push(sigmoid(logit(&model.params, f.m.row(t), c)));
            labels.push(y > 0.5);
        }
    }
    let heldout_auc = auc(&scores, &labels);
    tracing::info!(auc = ?heldout_auc, "sequential model held-out AUC");
    Ok((
        model,
        TrainingLog {
            initial_loss,
            epoch_losses,
            heldout_auc,
            train_examples: n_train,
            heldout_examples: n_heldout,
        },
    ))
}

/// Central-difference gradient check on a freshly initialized model; returns
/// the largest relative error over every parameter entry.
pub fn gradient_check(dim: usize, max_len: usize, seed: u64) -> f64 {
    let hyper = StaHyper {
        dim,
        max_len,
        seed,
        ..Default::default()
    };
    let vocab: Vec<String> = (0..6).map(|i| format!("i{i}")).collect();
    let mut model = SequentialModel::new(hyper, vocab);
    // biases start at zero; perturb them so their gradients are generic
    let mut rng = rng_from(seed, "gradcheck");
    let normal = Normal::new(0.0, 0.3).expect("valid std");
    for name in ["b1", "b2", "item_bias", "out_bias"] {
        let i = PARAM_NAMES.iter().position(|n| *n == name).expect("known");
        model.params.tensors_mut()[i].iter_mut().for_each(|x| *x = normal.sample(&mut rng));
    }
    let rows: Vec<(usize, Label)> = [(2, 1), (3, 0), (4, 1), (2, 1), (5, 0), (7, 1), (6, 0)]
        .iter()
        .map(|&(r, l)| (r, Label::from_bool(l == 1)))
        .collect();
    let mut seqs = Vec::new();
    model.sequences(&rows, 0, rows.len(), &mut seqs);
    let total = |p: &Params| seqs.iter().map(|s| loss_and_grad(p, s, 1.0, None)).sum::<f64>();

    let (v, d) = (model.params.item.nrows(), dim);
    let mut g = Params::zeros(v, max_len, d);
    for s in &seqs {
        loss_and_grad(&model.params, s, 1.0, Some(&mut g));
    }
    let analytic: Vec<Vec<f64>> = g.tensors().iter().map(|t| t.to_vec()).collect();
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for (ti, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let mut plus = model.params.clone();
            plus.tensors_mut()[ti][j] += h;
            let mut minus = model.params.clone();
            minus.tensors_mut()[ti][j] -= h;
            let numeric = (total(&plus) - total(&minus)) / (2.0 * h);
            let denom = a.abs().max(numeric.abs());
            let err = if denom < 1e-7 { (a - numeric).abs() } else { (a - numeric).abs() / denom };
            worst = worst.max(err);
        }
    }
    worst
}
