//! Losses and the training loop.
//!
//! The branch parameters are fit to cross-entropy on the fused factual score
//! and on each single-branch score. The counterfactual values are fit
//! separately so that the counterfactual score distribution is about as
//! sharp as the factual one.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{to_batch, Sample};
use crate::effects::{CfMode, GraphMode, InferenceMode};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{BatchForward, BranchGrads, EnsembleModel};
use crate::nn::{log_softmax, softmax_cross_entropy, softmax_in_place, Adam, Tensor2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Classification terms for one batch. `l_va` is zero on the simplified graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClassificationLoss {
    pub l_vqa: f64,
    pub l_qa: f64,
    pub l_va: f64,
}

impl ClassificationLoss {
    pub fn total(&self) -> f64 {
        self.l_vqa + self.l_qa + self.l_va
    }
}

/// Fused factual scores of a forward pass.
fn factual_scores(
    model: &EnsembleModel,
    fwd: &BatchForward,
) -> (Tensor2, Vec<crate::effects::FuseGrad>) {
    let (b, a) = fwd.z_q.shape();
    let mut scores = Tensor2::zeros(b, a);
    let mut grads = Vec::with_capacity(b * a);
    for r in 0..b {
        for k in 0..a {
            let (h, g) = model.fuse_factual(fwd, r, k);
            scores.row_mut(r)[k] = h;
            grads.push(g);
        }
    }
    (scores, grads)
}

/// Classification loss value and upstream branch gradients.
fn classification_terms(
    model: &EnsembleModel,
    fwd: &BatchForward,
    targets: &[usize],
) -> Result<(ClassificationLoss, BranchGrads)> {
    let (fused, fuse_grads) = factual_scores(model, fwd);
    let (l_vqa, d_fused) = softmax_cross_entropy(&fused, targets)?;
    let (l_qa, d_q) = softmax_cross_entropy(&fwd.z_q, targets)?;

    let mut grads = BranchGrads::zeros_like(fwd);
    grads.z_q = d_q;
    let l_va = match (&fwd.z_v, model.config().mode) {
        (Some(z_v), GraphMode::Full) => {
            let (l, d_v) = softmax_cross_entropy(z_v, targets)?;
            grads.z_v = Some(d_v);
            l
        }
        _ => 0.0,
    };

    let a = fused.cols();
    for (i, (d, g)) in d_fused.data().iter().zip(&fuse_grads).enumerate() {
        let (r, k) = (i / a, i % a);
        grads.z_q.row_mut(r)[k] += d * g.q;
        grads.z_k.row_mut(r)[k] += d * g.k;
        if let Some(dz_v) = grads.z_v.as_mut() {
            dz_v.row_mut(r)[k] += d * g.v;
        }
        if let Some(dg) = grads.g.as_mut() {
            dg[r] += d * g.g;
        }
    }
    Ok((ClassificationLoss { l_vqa, l_qa, l_va }, grads))
}

/// Sharpness-matching loss and its gradient with respect to the stored
/// counterfactual values (one entry for UNIFORM, one per answer otherwise).
///
/// Per sample: `(1/|A|) sum_a -p(a|q,v,k) log p(a|q,v*,k*)`, with the factual
/// distribution held constant; averaged over the batch.
fn kl_terms(model: &EnsembleModel, fwd: &BatchForward) -> (f64, Vec<f64>) {
    let (b, a) = fwd.z_q.shape();
    let n_c = model.store().value(model.cf_param()).data().len();
    let mut grad_c = vec![0.0; n_c];
    let mut loss = 0.0;
    let scale = 1.0 / (a as f64 * b as f64);
    let full = model.config().mode == GraphMode::Full;
    let mut p = vec![0.0; a];
    let mut cf = vec![0.0; a];
    let mut cf_grads = Vec::with_capacity(a);
    for r in 0..b {
        cf_grads.clear();
        for k in 0..a {
            p[k] = model.fuse_factual(fwd, r, k).0;
            let (h, g) = model.fuse_counterfactual(fwd, r, k);
            cf[k] = h;
            cf_grads.push(g);
        }
        softmax_in_place(&mut p);
        let log_q = log_softmax(&cf);
        let p_sum: f64 = p.iter().sum();
        for k in 0..a {
            loss -= p[k] * log_q[k];
            let d_cf = (log_q[k].exp() * p_sum - p[k]) * scale;
            // Both withheld slots hold the same counterfactual value.
            let g = &cf_grads[k];
            let d_s = d_cf * (g.k + if full { g.v } else { 0.0 });
            grad_c[if n_c == 1 { 0 } else { k }] += d_s;
        }
    }
    (loss * scale, grad_c)
}

/// Classification loss of a batch; leaves the parameter gradients (all
/// branch weights and the mixin head, never `c`) in the model's store.
pub fn classification_loss(
    model: &mut EnsembleModel,
    batch: &[&Sample],
) -> Result<ClassificationLoss> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let (v, q, targets) = to_batch(batch)?;
    let fwd = model.forward_batch(&v, &q)?;
    let (loss, grads) = classification_terms(model, &fwd, &targets)?;
    model.store_mut().zero_grad();
    model.backward(&fwd, &grads);
    Ok(loss)
}

/// Sharpness-matching loss of a batch; leaves the gradient of `c` in the
/// store and zeros every other gradient.
pub fn kl_loss(model: &mut EnsembleModel, batch: &[&Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let (v, q, _) = to_batch(batch)?;
    let fwd = model.forward_batch(&v, &q)?;
    let (loss, grad_c) = kl_terms(model, &fwd);
    let cf = model.cf_param();
    let store = model.store_mut();
    store.zero_grad();
    store.grad_mut(cf).data_mut().copy_from_slice(&grad_c);
    Ok(loss)
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub epoch: usize,
    pub l_vqa: f64,
    pub l_qa: f64,
    pub l_va: f64,
    pub l_kl: f64,
    pub total: f64,
    pub val_acc_posterior: f64,
    pub val_acc_tie: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Classification loss of the untrained model on the first batch order.
    pub initial_l_cls: f64,
    pub epochs: Vec<LossReport>,
}

impl TrainReport {
    /// `epoch,l_vqa,l_qa,l_va,l_kl,val_acc_posterior,val_acc_tie`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_vqa,l_qa,l_va,l_kl,val_acc_posterior,val_acc_tie\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch, e.l_vqa, e.l_qa, e.l_va, e.l_kl, e.val_acc_posterior, e.val_acc_tie
            ));
        }
        out
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Trains `model` in place. Every batch updates the branch parameters from
/// the classification loss and `c` from the sharpness-matching loss (unless
/// the counterfactual values are the frozen PRIOR).
pub fn fit(
    model: &mut EnsembleModel,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut theta_opt = Adam::new(model.store(), model.theta_ids(), config.lr);
    let mut c_opt = (model.config().cf_mode != CfMode::Prior)
        .then(|| Adam::new(model.store(), vec![model.cf_param()], config.lr));
    let cf = model.cf_param();

    let initial_l_cls = {
        let n = config.batch_size.min(train.len());
        let batch: Vec<&Sample> = train[..n].iter().collect();
        let (v, q, t) = to_batch(&batch)?;
        let fwd = model.forward_batch(&v, &q)?;
        classification_terms(model, &fwd, &t)?.0.total()
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut epoch_rng(config.seed, epoch));
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (v, q, targets) = to_batch(&batch)?;
            let fwd = model.forward_batch(&v, &q)?;
            let (cls, grads) = classification_terms(model, &fwd, &targets)?;
            let (kl, grad_c) = kl_terms(model, &fwd);
            if !(cls.total().is_finite() && kl.is_finite()) {
                return Err(Error::Divergence { epoch, batch: bi });
            }

            model.store_mut().zero_grad();
            model.backward(&fwd, &grads);
            theta_opt.step(model.store_mut());
            if let Some(opt) = c_opt.as_mut() {
                model
                    .store_mut()
                    .grad_mut(cf)
                    .data_mut()
                    .copy_from_slice(&grad_c);
                opt.step(model.store_mut());
            }
            if !model.store().all_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }

            sums[0] += cls.l_vqa;
            sums[1] += cls.l_qa;
            sums[2] += cls.l_va;
            sums[3] += kl;
            batches += 1;
        }
        let n = batches as f64;
        let [l_vqa, l_qa, l_va, l_kl] = sums.map(|s| s / n);
        let (val_acc_posterior, val_acc_tie) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let acc =
                eval::accuracies(model, val, &[InferenceMode::Posterior, InferenceMode::Tie])?;
            (acc[0], acc[1])
        };
        epochs.push(LossReport {
            epoch: epoch + 1,
            l_vqa,
            l_qa,
            l_va,
            l_kl,
            total: l_vqa + l_qa + l_va + l_kl,
            val_acc_posterior,
            val_acc_tie,
        });
    }
    Ok(TrainReport {
        initial_l_cls,
        epochs,
    })
}
