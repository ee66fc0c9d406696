//! Sequence cross-entropy and KL, the EWC penalty with its diagonal Fisher,
//! and scalar parameter fusion. Value-level kernels work on
//! [`SequenceDistribution`]s; the `*_var` forms build differentiable nodes.

use std::sync::Arc;

use crate::autograd::{log_softmax, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::model::{Forward, ModelState, SeqInput, SequenceDistribution};
use crate::vocab::TokenId;

/// Teacher probabilities are floored here and renormalized before any KL.
pub const Q_FLOOR: f64 = 1e-8;

/// Mean over unmasked positions of `−ln p(target)`.
pub fn cross_entropy_seq(pred: &SequenceDistribution, target: &[TokenId]) -> Result<f64> {
    if pred.probs.nrows() != target.len() || pred.mask.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} positions vs {} targets",
            pred.probs.nrows(),
            target.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, &t) in target.iter().enumerate() {
        if !pred.mask[r] {
            continue;
        }
        let p = *pred
            .probs
            .get((r, t))
            .ok_or(Error::UnknownTokenId(t))?;
        sum -= p.ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyTarget);
    }
    Ok(sum / n as f64)
}

/// Floor every entry at [`Q_FLOOR`] and renormalize each row.
pub fn smooth(q: &Mat) -> Mat {
    let mut out = q.mapv(|v| v.max(Q_FLOOR));
    for mut row in out.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Mean over unmasked positions of `Σ_v p ln(p / q̂)` where `q̂` is the
/// smoothed `q`.
pub fn kl_divergence_seq(p: &SequenceDistribution, q: &SequenceDistribution) -> Result<f64> {
    if p.probs.dim() != q.probs.dim() || p.mask != q.mask || p.mask.len() != p.probs.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "p {:?} vs q {:?}",
            p.probs.dim(),
            q.probs.dim()
        )));
    }
    let qs = smooth(&q.probs);
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in 0..p.probs.nrows() {
        if !p.mask[r] {
            continue;
        }
        sum += p
            .probs
            .row(r)
            .iter()
            .zip(qs.row(r))
            .map(|(&pv, &qv)| if pv > 0.0 { pv * (pv / qv).ln() } else { 0.0 })
            .sum::<f64>();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyTarget);
    }
    Ok(sum / n as f64)
}

/// Per-row weights giving "mean over positions, then mean over samples".
pub fn row_weights(fwd: &Forward) -> Vec<f64> {
    let b = fwd.rows.len() as f64;
    let mut w = vec![0.0; fwd.labels.len()];
    for r in &fwd.rows {
        let n = r.len() as f64;
        for i in r.clone() {
            w[i] = 1.0 / (n * b);
        }
    }
    w
}

/// Teacher-forced CE of a forward pass against its own labels.
pub fn ce_var(g: &mut Graph, fwd: &Forward) -> Var {
    let w = row_weights(fwd);
    g.cross_entropy(fwd.logits, fwd.labels.clone(), w)
}

/// Smoothed teacher log-probabilities for the prediction rows of `inputs`.
pub fn teacher_log_probs(teacher: &ModelState, inputs: &[SeqInput]) -> Result<Arc<Mat>> {
    let (logits, _) = teacher.logits(inputs)?;
    let mut out = log_softmax(&logits);
    // rows with no entry under the floor are left as computed, so a
    // student identical to the teacher gives exactly zero
    for mut row in out.rows_mut() {
        if row.iter().any(|&lq| lq.exp() < Q_FLOOR) {
            let q = row.mapv(f64::exp).insert_axis(ndarray::Axis(0));
            row.assign(&smooth(&q).row(0).mapv(f64::ln));
        }
    }
    Ok(Arc::new(out))
}

/// `KL(current ‖ teacher)` averaged per position then per sample.
pub fn kl_var(g: &mut Graph, fwd: &Forward, teacher_log_q: Arc<Mat>) -> Result<Var> {
    if g.value(fwd.logits).dim() != teacher_log_q.dim() {
        return Err(Error::ShapeMismatch(format!(
            "student {:?} vs teacher {:?}",
            g.value(fwd.logits).dim(),
            teacher_log_q.dim()
        )));
    }
    let w = row_weights(fwd);
    Ok(g.kl_div(fwd.logits, teacher_log_q, w))
}

/// Diagonal Fisher information with its anchor parameters `θ*`.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    pub ids: Vec<usize>,
    pub values: Vec<Arc<Mat>>,
    pub anchor: Vec<Arc<Mat>>,
}

impl FisherDiag {
    pub fn new(ids: Vec<usize>, values: Vec<Mat>, anchor: Vec<Mat>) -> Result<Self> {
        if ids.len() != values.len() || ids.len() != anchor.len() {
            return Err(Error::ShapeMismatch("fisher ids/values/anchor lengths differ".into()));
        }
        for (v, a) in values.iter().zip(&anchor) {
            if v.dim() != a.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "fisher {:?} vs anchor {:?}",
                    v.dim(),
                    a.dim()
                )));
            }
            if v.iter().any(|x| *x < 0.0) {
                return Err(Error::InvalidConfig("negative fisher entry".into()));
            }
        }
        Ok(Self {
            ids,
            values: values.into_iter().map(Arc::new).collect(),
            anchor: anchor.into_iter().map(Arc::new).collect(),
        })
    }

    fn check(&self, model: &ModelState) -> Result<()> {
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(p) = model.params.get(id) else {
                return Err(Error::ShapeMismatch(format!("no tensor {id}")));
            };
            if p.value.dim() != self.values[k].dim() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor '{}' {:?} vs fisher {:?}",
                    p.name,
                    p.value.dim(),
                    self.values[k].dim()
                )));
            }
        }
        Ok(())
    }

    /// Sum importances with a newer estimate and move the anchor to it.
    pub fn accumulate(&self, newer: &FisherDiag) -> Result<FisherDiag> {
        let mut ids = self.ids.clone();
        let mut values: Vec<Mat> = self.values.iter().map(|v| (**v).clone()).collect();
        let mut anchor: Vec<Mat> = self.anchor.iter().map(|v| (**v).clone()).collect();
        for (k, &id) in newer.ids.iter().enumerate() {
            match ids.iter().position(|&i| i == id) {
                Some(j) => {
                    if values[j].dim() != newer.values[k].dim() {
                        return Err(Error::ShapeMismatch(format!("fisher tensor {id}")));
                    }
                    values[j] += &*newer.values[k];
                    anchor[j] = (*newer.anchor[k]).clone();
                }
                None => {
                    ids.push(id);
                    values.push((*newer.values[k]).clone());
                    anchor.push((*newer.anchor[k]).clone());
                }
            }
        }
        FisherDiag::new(ids, values, anchor)
    }
}

/// `(λ/2) Σ_k F_k (θ_k − θ*_k)²`.
pub fn ewc_penalty(model: &ModelState, fisher: &FisherDiag, ewc_lambda: f64) -> Result<f64> {
    fisher.check(model)?;
    let mut total = 0.0;
    for (k, &id) in fisher.ids.iter().enumerate() {
        for ((x, a), f) in model
            .value(id)
            .iter()
            .zip(fisher.anchor[k].iter())
            .zip(fisher.values[k].iter())
        {
            total += f * (x - a) * (x - a);
        }
    }
    Ok(0.5 * ewc_lambda * total)
}

/// Differentiable EWC penalty; gradients flow to the tensors in `fisher.ids`.
pub fn ewc_var(g: &mut Graph, model: &ModelState, fisher: &FisherDiag, ewc_lambda: f64) -> Result<Var> {
    fisher.check(model)?;
    let mut terms = Vec::with_capacity(fisher.ids.len());
    for (k, &id) in fisher.ids.iter().enumerate() {
        let x = g.param(id, model.value(id).clone());
        let w = Arc::new(fisher.values[k].mapv(|f| 0.5 * ewc_lambda * f));
        terms.push((g.sq_dist(x, fisher.anchor[k].clone(), w), 1.0));
    }
    if terms.is_empty() {
        return Ok(g.constant_owned(Mat::zeros((1, 1))));
    }
    Ok(g.weighted_sum(&terms))
}

/// Mean over `batches` of the squared task-loss gradient of each tensor in `ids`.
pub fn estimate_fisher(model: &ModelState, batches: &[Vec<SeqInput>], ids: &[usize]) -> Result<FisherDiag> {
    if batches.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mask = model.mask(ids);
    let mut values: Vec<Mat> = ids.iter().map(|&i| Mat::zeros(model.value(i).raw_dim())).collect();
    for batch in batches {
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, batch, &mask)?;
        let loss = ce_var(&mut g, &fwd);
        let grads = g.backward(loss);
        for (k, &id) in ids.iter().enumerate() {
            if let Some(gr) = grads.get(id) {
                values[k] += &gr.mapv(|v| v * v);
            }
        }
    }
    let n = batches.len() as f64;
    for v in &mut values {
        v.mapv_inplace(|x| x / n);
    }
    let anchor = ids.iter().map(|&i| (**model.value(i)).clone()).collect();
    FisherDiag::new(ids.to_vec(), values, anchor)
}

/// `α θ_cur + (1 − α) θ_old`, element-wise.
pub fn fuse_params(cur: &Mat, old: &Mat, alpha: f64) -> Result<Mat> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha must be in [0, 1], got {alpha}")));
    }
    if cur.dim() != old.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", cur.dim(), old.dim())));
    }
    if alpha == 1.0 {
        return Ok(cur.clone());
    }
    if alpha == 0.0 {
        return Ok(old.clone());
    }
    Ok(cur * alpha + old * (1.0 - alpha))
}

/// Fuse the tensors `ids` of `model` toward `old` in place.
pub fn fuse_model(model: &mut ModelState, old: &ModelState, ids: &[usize], alpha: f64) -> Result<()> {
    for &id in ids {
        let fused = fuse_params(model.value(id), old.value(id), alpha)?;
        *model.value_mut(id) = fused;
    }
    Ok(())
}
