//! Training objectives: cross-entropy, the frozen-judge generator loss,
//! multi-kernel MMD, the inter-subject contrastive loss, and their weighted sum.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::SubjectId;
use crate::error::{Error, Result};
use crate::models::{one_hot_labels, ClassifierModel};

/// Labels and subject ids for each row of a feature batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchMeta {
    pub labels: Vec<usize>,
    pub subjects: Vec<SubjectId>,
}

impl BatchMeta {
    pub fn new(labels: Vec<usize>, subjects: Vec<SubjectId>) -> Result<Self> {
        if labels.len() != subjects.len() {
            return Err(Error::invalid(
                "batch meta",
                format!("{} labels but {} subject ids", labels.len(), subjects.len()),
            ));
        }
        Ok(BatchMeta { labels, subjects })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch { op: "cross_entropy", lhs: shape, rhs: vec![labels.len()] });
    }
    if labels.is_empty() {
        return Err(Error::Empty("cross_entropy batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {} classes", shape[1])));
    }
    let log_p = g.log_softmax(logits)?;
    let picked = g.pick(log_p, labels)?;
    let mean = g.mean(picked)?;
    g.scale(mean, -1.0)
}

/// Cross-entropy of the frozen classifier head on generated features
/// against the class codes that conditioned them.
pub fn generator_loss(g: &mut Graph, gen_out: Var, class_codes: &Tensor, frozen: &ClassifierModel) -> Result<Var> {
    if !frozen.params.is_frozen() {
        return Err(Error::invalid("generator_loss", "the judging classifier must be frozen"));
    }
    let labels = one_hot_labels(class_codes)?;
    let vars = frozen.bind(g, false)?;
    let logits = frozen.classify(g, &vars, gen_out)?;
    cross_entropy(g, logits, &labels)
}

/// Gaussian kernel bandwidths for [`mmd_loss`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Explicit `sigma` values.
    Fixed(Vec<f64>),
    /// Median pooled pairwise distance times each scale, recomputed per batch.
    Median { scales: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub bandwidth: Bandwidth,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig { bandwidth: Bandwidth::Median { scales: vec![0.25, 0.5, 1.0, 2.0, 4.0] } }
    }
}

impl MmdConfig {
    pub fn fixed(sigmas: Vec<f64>) -> Self {
        MmdConfig { bandwidth: Bandwidth::Fixed(sigmas) }
    }

    fn validate(&self) -> Result<()> {
        let values = match &self.bandwidth {
            Bandwidth::Fixed(v) => v,
            Bandwidth::Median { scales } => scales,
        };
        if values.is_empty() {
            return Err(Error::invalid("mmd_loss", "at least one kernel is required"));
        }
        if values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("mmd_loss", "bandwidths must be positive"));
        }
        Ok(())
    }
}

/// Median of the pairwise Euclidean distances over the pooled rows of `a` and `b`.
/// Falls back to 1 when there are no pairs or every pair coincides.
pub fn median_pairwise_distance(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..a.outer_len()).map(|i| a.row(i)).chain((0..b.outer_len()).map(|i| b.row(i))).collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d2: f64 = rows[i].iter().zip(rows[j]).map(|(x, y)| (x - y) * (x - y)).sum();
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 { dists[mid] } else { 0.5 * (dists[mid - 1] + dists[mid]) };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Kernel bandwidths that [`mmd_loss`] would use for this pair of batches.
pub fn mmd_bandwidths(src: &Tensor, trg: &Tensor, cfg: &MmdConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    Ok(match &cfg.bandwidth {
        Bandwidth::Fixed(s) => s.clone(),
        Bandwidth::Median { scales } => {
            let m = median_pairwise_distance(src, trg);
            scales.iter().map(|s| s * m).collect()
        }
    })
}

/// Biased squared MMD between the rows of `src` and `trg`, summed over a
/// bank of Gaussian kernels `exp(-|a-b|^2 / (2 sigma^2))`.
pub fn mmd_loss(g: &mut Graph, src: Var, trg: Var, cfg: &MmdConfig) -> Result<Var> {
    let (ss, ts) = (g.shape(src).to_vec(), g.shape(trg).to_vec());
    if ss.len() != 2 || ts.len() != 2 || ss[1] != ts[1] {
        return Err(Error::ShapeMismatch { op: "mmd_loss", lhs: ss, rhs: ts });
    }
    if ss[0] == 0 || ts[0] == 0 {
        return Err(Error::Empty("mmd_loss batch"));
    }
    // Bandwidths are data-dependent constants: no gradient flows through them.
    let sigmas = mmd_bandwidths(g.value(src), g.value(trg), cfg)?;

    let d_ss = g.sq_dist(src, src)?;
    let d_tt = g.sq_dist(trg, trg)?;
    let d_st = g.sq_dist(src, trg)?;
    let mut total: Option<Var> = None;
    for sigma in sigmas {
        let gamma = -1.0 / (2.0 * sigma * sigma);
        let mut kernel_mean = |d: Var| -> Result<Var> {
            let scaled = g.scale(d, gamma)?;
            let k = g.exp(scaled)?;
            g.mean(k)
        };
        let k_ss = kernel_mean(d_ss)?;
        let k_tt = kernel_mean(d_tt)?;
        let k_st = kernel_mean(d_st)?;
        let within = g.add(k_ss, k_tt)?;
        let cross = g.scale(k_st, 2.0)?;
        let term = g.sub(within, cross)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("validated non-empty kernel bank"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConLossConfig {
    pub temperature: f64,
    pub normalize: bool,
}

impl Default for ConLossConfig {
    fn default() -> Self {
        ConLossConfig { temperature: 0.5, normalize: true }
    }
}

/// Inter-subject contrastive loss and how many anchors contributed.
#[derive(Clone, Copy, Debug)]
pub struct ConLoss {
    pub loss: Var,
    /// Per-anchor terms `[n]`; entries of skipped anchors carry zero weight in `loss`.
    /// `None` when every anchor was skipped.
    pub per_anchor: Option<Var>,
    pub anchors_used: usize,
    pub anchors_skipped: usize,
}

impl ConLoss {
    /// Every anchor lacked a positive; `loss` is then the constant 0.
    pub fn all_skipped(&self) -> bool {
        self.anchors_used == 0
    }
}

/// Membership masks of the positive set `P(i)` and anchor set `A(i) = P(i) ∪ S(i)`,
/// row-major `[n, n]`. The diagonal is always excluded.
pub fn anchor_masks(meta: &BatchMeta) -> (Vec<bool>, Vec<bool>) {
    let n = meta.len();
    let mut pos = vec![false; n * n];
    let mut anchor = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let same_class = meta.labels[i] == meta.labels[j];
            let same_subject = meta.subjects[i] == meta.subjects[j];
            pos[i * n + j] = same_class;
            anchor[i * n + j] = same_class || same_subject;
        }
    }
    (pos, anchor)
}

/// Supervised contrastive loss whose denominator only ranges over same-class
/// or same-subject samples; the different-class different-subject rows are
/// left out entirely. Anchors without a positive are skipped.
pub fn iscon_loss(g: &mut Graph, w: Var, meta: &BatchMeta, cfg: &ConLossConfig) -> Result<ConLoss> {
    let shape = g.shape(w).to_vec();
    if shape.len() != 2 || shape[0] != meta.len() || meta.subjects.len() != meta.len() {
        return Err(Error::ShapeMismatch { op: "iscon_loss", lhs: shape, rhs: vec![meta.len()] });
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::invalid("iscon_loss", "needs a batch of at least two samples"));
    }
    if !(cfg.temperature > 0.0) || !cfg.temperature.is_finite() {
        return Err(Error::invalid("iscon_loss", format!("temperature must be positive, got {}", cfg.temperature)));
    }

    let (pos, anchor) = anchor_masks(meta);
    let valid: Vec<bool> = (0..n).map(|i| pos[i * n..(i + 1) * n].iter().any(|&p| p)).collect();
    let used = valid.iter().filter(|&&v| v).count();
    if used == 0 {
        let loss = g.constant(Tensor::scalar(0.0))?;
        return Ok(ConLoss { loss, per_anchor: None, anchors_used: 0, anchors_skipped: n });
    }

    let feats = if cfg.normalize { g.l2_normalize(w)? } else { w };
    let feats_t = g.transpose(feats)?;
    let dots = g.matmul(feats, feats_t)?;
    let logits = g.scale(dots, 1.0 / cfg.temperature)?;
    let log_denominator = g.masked_log_sum_exp(logits, Rc::new(anchor))?;
    let log_numerator = g.masked_log_sum_exp(logits, Rc::new(pos))?;
    let per_anchor = g.sub(log_denominator, log_numerator)?;
    let weights = valid.iter().map(|&v| if v { 1.0 / used as f64 } else { 0.0 }).collect();
    let weights = g.constant(Tensor::vector(weights))?;
    let weighted = g.mul(per_anchor, weights)?;
    let loss = g.sum(weighted)?;
    Ok(ConLoss { loss, per_anchor: Some(per_anchor), anchors_used: used, anchors_skipped: n - used })
}

/// `cls + lambda * align`
pub fn total_loss(g: &mut Graph, cls: Var, align: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid("total_loss", format!("lambda must be >= 0, got {lambda}")));
    }
    for v in [cls, align] {
        if !g.value(v).is_scalar() {
            return Err(Error::invalid("total_loss", format!("expected scalar losses, got {:?}", g.shape(v))));
        }
    }
    let weighted = g.scale(align, lambda)?;
    g.add(cls, weighted)
}
