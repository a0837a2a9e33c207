//! Hierarchical contrastive pairing and loss.
//!
//! Every batch exposes six representations per sample (pan and specific, one
//! per modality). All unordered pairs of distinct representation keys are
//! partitioned into four sets:
//!
//! * `P1` — same sample, same knowledge, different modality (positive);
//! * `P2` — different samples in the same sentiment interval, same knowledge
//!   (positive, all modality combinations);
//! * `N1` — one pan key and one specific key, any samples (negative);
//! * `N2` — different samples in different intervals, same knowledge
//!   (negative).
//!
//! The loss contrasts, per anchor sample, its positive pairs against every
//! pair touching it, using temperature-scaled cosine similarity.

use crate::data::{round_to_interval, LabelRange, SentimentInterval};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use std::collections::BTreeSet;

/// Norm guard added to each l2 norm before division.
pub const NORM_EPS: f64 = 1e-8;

/// Default similarity temperature.
pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Knowledge {
    Pan,
    Specific,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Text,
    Vision,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Vision, Modality::Audio];

    pub fn short(self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Vision => "v",
            Modality::Audio => "a",
        }
    }
}

/// Identifies one representation inside a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RepKey {
    pub sample: usize,
    pub knowledge: Knowledge,
    pub modality: Modality,
}

impl RepKey {
    pub fn new(sample: usize, knowledge: Knowledge, modality: Modality) -> Self {
        RepKey {
            sample,
            knowledge,
            modality,
        }
    }

    /// Flat position in display order: per sample `O_t O_v O_a A_t A_v A_a`.
    pub fn index(self) -> usize {
        let k = match self.knowledge {
            Knowledge::Pan => 0,
            Knowledge::Specific => 3,
        };
        let m = match self.modality {
            Modality::Text => 0,
            Modality::Vision => 1,
            Modality::Audio => 2,
        };
        self.sample * 6 + k + m
    }

    pub fn from_index(idx: usize) -> Self {
        let sample = idx / 6;
        let rem = idx % 6;
        let knowledge = if rem < 3 {
            Knowledge::Pan
        } else {
            Knowledge::Specific
        };
        let modality = Modality::ALL[rem % 3];
        RepKey {
            sample,
            knowledge,
            modality,
        }
    }

    pub fn label(self) -> String {
        let k = match self.knowledge {
            Knowledge::Pan => "O",
            Knowledge::Specific => "A",
        };
        format!("{}_{}^{}", k, self.modality.short(), self.sample + 1)
    }
}

pub type KeyPair = (usize, usize);

/// The four disjoint pair sets over a batch, stored as ordered flat-index
/// pairs `(lo, hi)` with `lo < hi`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairPartition {
    pub batch_size: usize,
    pub intervals: Vec<SentimentInterval>,
    pub p1: BTreeSet<KeyPair>,
    pub p2: BTreeSet<KeyPair>,
    pub n1: BTreeSet<KeyPair>,
    pub n2: BTreeSet<KeyPair>,
}

impl PairPartition {
    pub fn num_keys(&self) -> usize {
        self.batch_size * 6
    }

    pub fn total_pairs(&self) -> usize {
        self.p1.len() + self.p2.len() + self.n1.len() + self.n2.len()
    }

    /// True if the pair `(lo, hi)` involves a key of `sample`.
    fn touches(pair: KeyPair, sample: usize) -> bool {
        pair.0 / 6 == sample || pair.1 / 6 == sample
    }

    pub fn positives_of(&self, sample: usize) -> Vec<KeyPair> {
        self.p1
            .iter()
            .chain(self.p2.iter())
            .copied()
            .filter(|&p| Self::touches(p, sample))
            .collect()
    }

    pub fn all_pairs_of(&self, sample: usize, include_n1: bool) -> Vec<KeyPair> {
        let mut out = self.positives_of(sample);
        if include_n1 {
            out.extend(self.n1.iter().copied().filter(|&p| Self::touches(p, sample)));
        }
        out.extend(self.n2.iter().copied().filter(|&p| Self::touches(p, sample)));
        out
    }

    /// 0/1 cell of the pairing matrix; diagonal self-cells print 1 although
    /// they belong to no pair set.
    pub fn matrix_cell(&self, row: usize, col: usize) -> u8 {
        if row == col {
            return 1;
        }
        let pair = (row.min(col), row.max(col));
        u8::from(self.p1.contains(&pair) || self.p2.contains(&pair))
    }

    /// Render the labeled pairing matrix, rows and columns in key order.
    pub fn matrix_text(&self) -> String {
        let n = self.num_keys();
        let labels: Vec<String> = (0..n).map(|i| RepKey::from_index(i).label()).collect();
        let width = labels.iter().map(|l| l.len()).max().unwrap_or(1);
        let mut out = String::new();
        out.push_str(&" ".repeat(width));
        for l in &labels {
            out.push(' ');
            out.push_str(&format!("{l:>width$}"));
        }
        out.push('\n');
        for r in 0..n {
            out.push_str(&format!("{:>width$}", labels[r]));
            for c in 0..n {
                out.push(' ');
                out.push_str(&format!("{:>width$}", self.matrix_cell(r, c)));
            }
            out.push('\n');
        }
        out
    }
}

/// Which knowledge types actually produce representations. Ablations that
/// remove the adapter or pan path contrast over the remaining keys only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KnowledgeSet {
    pub pan: bool,
    pub specific: bool,
}

impl KnowledgeSet {
    pub const BOTH: KnowledgeSet = KnowledgeSet {
        pan: true,
        specific: true,
    };

    pub fn contains(self, k: Knowledge) -> bool {
        match k {
            Knowledge::Pan => self.pan,
            Knowledge::Specific => self.specific,
        }
    }
}

/// Classify every unordered pair of distinct representation keys for a batch
/// with the given labels. Deterministic in `(labels, range)`.
pub fn build_pairs(labels: &[f64], range: LabelRange) -> Result<PairPartition> {
    build_pairs_over(labels, range, KnowledgeSet::BOTH)
}

/// [`build_pairs`] restricted to the knowledge types a model variant emits.
/// Keys of an absent knowledge type take part in no pair.
pub fn build_pairs_over(
    labels: &[f64],
    range: LabelRange,
    knowledges: KnowledgeSet,
) -> Result<PairPartition> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("build_pairs on an empty batch".into()));
    }
    let intervals: Vec<SentimentInterval> = labels
        .iter()
        .map(|&y| round_to_interval(y, range))
        .collect::<Result<_>>()?;

    let n = labels.len() * 6;
    let mut partition = PairPartition {
        batch_size: labels.len(),
        intervals: intervals.clone(),
        p1: BTreeSet::new(),
        p2: BTreeSet::new(),
        n1: BTreeSet::new(),
        n2: BTreeSet::new(),
    };
    for lo in 0..n {
        let a = RepKey::from_index(lo);
        if !knowledges.contains(a.knowledge) {
            continue;
        }
        for hi in lo + 1..n {
            let b = RepKey::from_index(hi);
            if !knowledges.contains(b.knowledge) {
                continue;
            }
            let pair = (lo, hi);
            if a.knowledge != b.knowledge {
                partition.n1.insert(pair);
            } else if a.sample == b.sample {
                partition.p1.insert(pair);
            } else if intervals[a.sample] == intervals[b.sample] {
                partition.p2.insert(pair);
            } else {
                partition.n2.insert(pair);
            }
        }
    }
    Ok(partition)
}

/// Temperature-scaled similarity `exp(cos(p, q) / tau)` with an epsilon guard
/// on each norm.
pub fn pair_similarity(p: &[f64], q: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau {tau} must be > 0")));
    }
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "cosine of {}-dim and {}-dim vectors",
            p.len(),
            q.len()
        )));
    }
    if !p.iter().chain(q.iter()).all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite representation".into()));
    }
    let norm = |v: &[f64]| v.iter().map(|e| e * e).sum::<f64>().sqrt() + NORM_EPS;
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    Ok((dot / (norm(p) * norm(q)) / tau).exp())
}

/// All six representations of a batch, indexed by [`RepKey`].
#[derive(Clone, Debug)]
pub struct BatchReps {
    batch_size: usize,
    vecs: Vec<Option<Vec<f64>>>,
}

impl BatchReps {
    pub fn new(batch_size: usize) -> Self {
        BatchReps {
            batch_size,
            vecs: vec![None; batch_size * 6],
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn insert(&mut self, key: RepKey, vec: Vec<f64>) {
        self.vecs[key.index()] = Some(vec);
    }

    pub fn get(&self, key: RepKey) -> Option<&Vec<f64>> {
        self.vecs[key.index()].as_ref()
    }

    fn require(&self, idx: usize) -> Result<&Vec<f64>> {
        self.vecs[idx].as_ref().ok_or_else(|| {
            Error::InvalidInput(format!(
                "missing representation {}",
                RepKey::from_index(idx).label()
            ))
        })
    }
}

/// Hierarchical contrastive loss over a batch.
///
/// For each anchor sample `i`, the positive pairs are the members of
/// `P1 ∪ P2` touching a key of sample `i`; the normalizer sums similarities
/// over every pair touching sample `i` (all four sets). Cross-sample pairs
/// therefore contribute to two anchors.
pub fn contrastive_loss(reps: &BatchReps, partition: &PairPartition, tau: f64) -> Result<f64> {
    contrastive_loss_with(reps, partition, tau, true)
}

/// [`contrastive_loss`] with the `N1` set optionally dropped from the
/// normalizer (the knowledge-contrast ablation).
pub fn contrastive_loss_with(
    reps: &BatchReps,
    partition: &PairPartition,
    tau: f64,
    include_n1: bool,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau {tau} must be > 0")));
    }
    if reps.batch_size != partition.batch_size {
        return Err(Error::Shape(format!(
            "reps batch {} vs partition batch {}",
            reps.batch_size, partition.batch_size
        )));
    }
    let n = partition.num_keys();
    // Pre-normalize once; cosine of a pair is then a plain dot product.
    let mut units: Vec<Vec<f64>> = Vec::with_capacity(n);
    for idx in 0..n {
        let v = reps.require(idx)?;
        if !v.iter().all(|e| e.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite representation {}",
                RepKey::from_index(idx).label()
            )));
        }
        let norm = v.iter().map(|e| e * e).sum::<f64>().sqrt() + NORM_EPS;
        units.push(v.iter().map(|e| e / norm).collect());
    }
    let logit = |pair: KeyPair| -> f64 {
        let dot: f64 = units[pair.0]
            .iter()
            .zip(&units[pair.1])
            .map(|(a, b)| a * b)
            .sum();
        dot / tau
    };

    let mut total = 0.0;
    for i in 0..partition.batch_size {
        let positives = partition.positives_of(i);
        if positives.is_empty() {
            // Unreachable for live knowledge sets: P1 alone never empties.
            continue;
        }
        let denom: f64 = partition
            .all_pairs_of(i, include_n1)
            .iter()
            .map(|&p| logit(p).exp())
            .sum();
        let ln_denom = denom.ln();
        let sum_pos: f64 = positives.iter().map(|&p| logit(p) - ln_denom).sum();
        total -= sum_pos / positives.len() as f64;
    }
    Ok(total)
}

/// Graph twin of [`contrastive_loss_with`]: identical math, differentiable
/// w.r.t. the representation nodes. `rep_nodes[k]` is the `1 x d` node for
/// flat key `k`; absent keys (ablated knowledge paths) are `None`.
pub fn contrastive_loss_node(
    g: &mut Graph,
    rep_nodes: &[Option<NodeId>],
    partition: &PairPartition,
    tau: f64,
    include_n1: bool,
) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau {tau} must be > 0")));
    }
    let n = partition.num_keys();
    if rep_nodes.len() != n {
        return Err(Error::Shape(format!(
            "{} rep nodes for {} keys",
            rep_nodes.len(),
            n
        )));
    }
    // Normalized rows stacked into U, cosines via U U^T, logits via scale.
    let mut live = Vec::new();
    let mut unit_rows = Vec::new();
    for (idx, node) in rep_nodes.iter().enumerate() {
        let Some(node) = node else { continue };
        let sq = g.squared_norm(*node)?;
        let norm = g.sqrt(sq);
        let guarded = g.add_const(norm, NORM_EPS);
        let inv = g.recip(guarded);
        unit_rows.push(g.mul_scalar(*node, inv)?);
        live.push(idx);
    }
    if live.is_empty() {
        return Err(Error::InvalidInput("no live representations".into()));
    }
    let u = g.concat_rows(&unit_rows)?;
    let ut = g.transpose(u);
    let cos = g.matmul(u, ut)?;
    let logits = g.scale(cos, 1.0 / tau);
    let exp_logits = g.exp(logits);

    let live_pos: std::collections::BTreeMap<usize, usize> =
        live.iter().enumerate().map(|(row, &idx)| (idx, row)).collect();
    let mask_for = |pairs: &[KeyPair]| -> Result<Tensor> {
        let m = live_pos.len();
        let mut mask = Tensor::zeros(m, m);
        for &(lo, hi) in pairs {
            let (r, c) = (
                *live_pos.get(&lo).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "pair references absent key {}",
                        RepKey::from_index(lo).label()
                    ))
                })?,
                *live_pos.get(&hi).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "pair references absent key {}",
                        RepKey::from_index(hi).label()
                    ))
                })?,
            );
            mask.set(r, c, 1.0);
        }
        Ok(mask)
    };

    let mut per_anchor = Vec::new();
    for i in 0..partition.batch_size {
        let positives = partition.positives_of(i);
        if positives.is_empty() {
            continue;
        }
        let pos_mask = g.leaf(mask_for(&positives)?);
        let all_mask = g.leaf(mask_for(&partition.all_pairs_of(i, include_n1))?);
        let masked_logits = g.mul(logits, pos_mask)?;
        let sum_pos_logits = g.sum_all(masked_logits);
        let masked_exp = g.mul(exp_logits, all_mask)?;
        let denom = g.sum_all(masked_exp);
        let ln_denom = g.ln(denom);
        let scaled_ln = g.scale(ln_denom, positives.len() as f64);
        let inner = g.sub(sum_pos_logits, scaled_ln)?;
        per_anchor.push(g.scale(inner, -1.0 / positives.len() as f64));
    }
    let mut total = per_anchor[0];
    for &t in &per_anchor[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}
