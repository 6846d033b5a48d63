//! Three-branch ensemble: question-only `F_Q`, vision-only `F_V` and the
//! vision-language `F_VQ`, plus the learnable counterfactual values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::effects::{
    self, fuse_scalar_with_grad, sigmoid, softplus, CfMode, CounterfactualConfig, FuseGrad,
    FusionKind, GraphMode, InferenceMode, Logits,
};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Dense, Mlp, MlpCache, MlpSpec, ParamId, ParamStore, Tensor2};

/// Architecture and counterfactual choices for an [`EnsembleModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub strategy: FusionKind,
    pub mode: GraphMode,
    pub cf_mode: CfMode,
    /// Width of both hidden layers in every branch.
    pub hidden: usize,
    /// Route the question through one embedding layer shared by `F_Q` and `F_VQ`.
    pub share_question_embedding: bool,
    /// With a shared embedding, keep the question-only branch from updating it.
    pub detach_mask_gradient: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            strategy: FusionKind::Sum,
            mode: GraphMode::Full,
            cf_mode: CfMode::Uniform,
            hidden: 32,
            share_question_embedding: false,
            detach_mask_gradient: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategy.requires_simplified() && self.mode == GraphMode::Full {
            return Err(Error::InvalidConfig(format!(
                "{} fusion requires mode SIMPLIFIED",
                self.strategy
            )));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidConfig("hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Input and output sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub v: usize,
    pub q: usize,
    pub answers: usize,
}

/// Factual branch outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    pub z_q: Logits,
    pub z_v: Option<Logits>,
    pub z_k: Logits,
    /// Learned-mixin weight, present only for LM fusion.
    pub g: Option<f64>,
}

/// Batched forward pass with everything needed for backward.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub z_q: Tensor2,
    pub z_v: Option<Tensor2>,
    pub z_k: Tensor2,
    pub g: Option<Vec<f64>>,
    q_embed: Option<(Tensor2, Tensor2)>,
    q_cache: MlpCache,
    v_cache: Option<MlpCache>,
    vq_cache: MlpCache,
    g_pre: Option<Vec<f64>>,
}

impl BatchForward {
    pub fn batch_size(&self) -> usize {
        self.z_q.rows()
    }

    /// Branch outputs of one row.
    pub fn outputs(&self, row: usize) -> BranchOutputs {
        let l = |t: &Tensor2| Logits::new(t.row(row).to_vec()).expect("finite logits");
        BranchOutputs {
            z_q: l(&self.z_q),
            z_v: self.z_v.as_ref().map(l),
            z_k: l(&self.z_k),
            g: self.g.as_ref().map(|g| g[row]),
        }
    }
}

/// Upstream gradients with respect to the branch outputs.
#[derive(Debug, Clone)]
pub struct BranchGrads {
    pub z_q: Tensor2,
    pub z_v: Option<Tensor2>,
    pub z_k: Tensor2,
    pub g: Option<Vec<f64>>,
}

impl BranchGrads {
    pub fn zeros_like(fwd: &BatchForward) -> Self {
        let (b, a) = fwd.z_q.shape();
        BranchGrads {
            z_q: Tensor2::zeros(b, a),
            z_v: fwd.z_v.as_ref().map(|_| Tensor2::zeros(b, a)),
            z_k: Tensor2::zeros(b, a),
            g: fwd.g.as_ref().map(|_| vec![0.0; b]),
        }
    }
}

pub const CF_PARAM: &str = "cf.c";

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    config: ModelConfig,
    dims: FeatureDims,
    store: ParamStore,
    q_embed: Option<Dense>,
    f_q: Mlp,
    f_v: Option<Mlp>,
    f_vq: Mlp,
    g_head: Option<Dense>,
    cf: ParamId,
}

impl EnsembleModel {
    /// Builds a freshly initialized model. PRIOR mode needs the training
    /// answer prior (strictly positive, one entry per answer).
    pub fn new(
        config: ModelConfig,
        dims: FeatureDims,
        train_prior: Option<&[f64]>,
    ) -> Result<Self> {
        config.validate()?;
        if dims.answers < 2 || dims.v == 0 || dims.q == 0 {
            return Err(Error::InvalidConfig(format!(
                "unusable feature dims {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let h = config.hidden;

        let q_embed = config
            .share_question_embedding
            .then(|| Dense::new(&mut store, "q_embed", dims.q, h, &mut rng));
        let q_in = if q_embed.is_some() { h } else { dims.q };

        let f_q = Mlp::new(
            MlpSpec::three_layer(q_in, h, dims.answers),
            &mut store,
            "f_q",
            &mut rng,
        );
        let f_v = (config.mode == GraphMode::Full).then(|| {
            Mlp::new(
                MlpSpec::three_layer(dims.v, h, dims.answers),
                &mut store,
                "f_v",
                &mut rng,
            )
        });
        let f_vq = Mlp::new(
            MlpSpec::three_layer(dims.v + q_in, h, dims.answers),
            &mut store,
            "f_vq",
            &mut rng,
        );
        let g_head = (config.strategy == FusionKind::LearnedMixin)
            .then(|| Dense::new(&mut store, "g_head", h, 1, &mut rng));

        let c = match config.cf_mode {
            CfMode::Uniform => Tensor2::zeros(1, 1),
            CfMode::Prior => {
                let prior = train_prior.ok_or_else(|| {
                    Error::InvalidConfig("PRIOR counterfactuals need the training prior".into())
                })?;
                if prior.len() != dims.answers {
                    return Err(Error::DimensionMismatch {
                        expected: dims.answers,
                        actual: prior.len(),
                    });
                }
                let cfg = CounterfactualConfig::from_prior(prior)?;
                Tensor2::from_vec(1, dims.answers, cfg.values().to_vec())?
            }
            CfMode::Random => {
                let init = (0..dims.answers)
                    .map(|_| 0.01 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect();
                Tensor2::from_vec(1, dims.answers, init)?
            }
        };
        let cf = store.add(CF_PARAM, c);

        Ok(EnsembleModel {
            config,
            dims,
            store,
            q_embed,
            f_q,
            f_v,
            f_vq,
            g_head,
            cf,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> FeatureDims {
        self.dims
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn cf_param(&self) -> ParamId {
        self.cf
    }

    /// Every trainable parameter except the counterfactual values.
    pub fn theta_ids(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| id != self.cf).collect()
    }

    /// Parameters belonging to the vision-only branch.
    pub fn vision_branch_ids(&self) -> Vec<ParamId> {
        self.f_v.as_ref().map(Mlp::param_ids).unwrap_or_default()
    }

    pub fn cf_config(&self) -> CounterfactualConfig {
        let values = self.store.value(self.cf).data();
        match self.config.cf_mode {
            CfMode::Uniform => CounterfactualConfig::Uniform { c: values[0] },
            CfMode::Prior => CounterfactualConfig::Prior {
                log_prior: values.to_vec(),
            },
            CfMode::Random => CounterfactualConfig::Random { c: values.to_vec() },
        }
    }

    /// Overrides the scalar counterfactual value of a UNIFORM model.
    pub fn set_uniform_c(&mut self, c: f64) -> Result<()> {
        if self.config.cf_mode != CfMode::Uniform {
            return Err(Error::InvalidConfig(
                "forcing c requires UNIFORM counterfactuals".into(),
            ));
        }
        self.store.value_mut(self.cf).data_mut()[0] = c;
        Ok(())
    }

    /// Counterfactual value for answer `a`.
    pub fn star(&self, a: usize) -> f64 {
        let c = self.store.value(self.cf).data();
        if c.len() == 1 {
            c[0]
        } else {
            c[a]
        }
    }

    pub fn forward_batch(&self, v: &Tensor2, q: &Tensor2) -> Result<BatchForward> {
        if v.cols() != self.dims.v {
            return Err(Error::DimensionMismatch {
                expected: self.dims.v,
                actual: v.cols(),
            });
        }
        if q.cols() != self.dims.q {
            return Err(Error::DimensionMismatch {
                expected: self.dims.q,
                actual: q.cols(),
            });
        }
        if v.rows() != q.rows() {
            return Err(Error::DimensionMismatch {
                expected: v.rows(),
                actual: q.rows(),
            });
        }
        let q_embed = match &self.q_embed {
            Some(layer) => {
                let mut e = layer.forward(&self.store, q)?;
                e.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
                Some((q.clone(), e))
            }
            None => None,
        };
        let q_in = q_embed.as_ref().map_or(q, |(_, e)| e);
        let q_cache = self.f_q.forward(&self.store, q_in)?;
        let v_cache = match &self.f_v {
            Some(f_v) => Some(f_v.forward(&self.store, v)?),
            None => None,
        };
        let vq_cache = self.f_vq.forward(&self.store, &v.hcat(q_in)?)?;

        let (g, g_pre) = match &self.g_head {
            Some(head) => {
                let pre = head.forward(&self.store, vq_cache.penultimate())?;
                let pre = pre.data().to_vec();
                (Some(pre.iter().map(|&a| softplus(a)).collect()), Some(pre))
            }
            None => (None, None),
        };
        Ok(BatchForward {
            z_q: q_cache.output.clone(),
            z_v: v_cache.as_ref().map(|c| c.output.clone()),
            z_k: vq_cache.output.clone(),
            g,
            q_embed,
            q_cache,
            v_cache,
            vq_cache,
            g_pre,
        })
    }

    /// Accumulates parameter gradients from upstream branch gradients.
    pub fn backward(&mut self, fwd: &BatchForward, grads: &BranchGrads) {
        let EnsembleModel {
            config,
            dims,
            store,
            q_embed,
            f_q,
            f_v,
            f_vq,
            g_head,
            ..
        } = self;

        let d_pen = match (g_head.as_ref(), &grads.g, &fwd.g_pre) {
            (Some(head), Some(dg), Some(pre)) => {
                // g = softplus(a), dg/da = sigmoid(a)
                let da: Vec<f64> = dg.iter().zip(pre).map(|(d, &a)| d * sigmoid(a)).collect();
                let da = Tensor2::from_vec(da.len(), 1, da).expect("one column");
                head.backward(store, fwd.vq_cache.penultimate(), &da, true)
            }
            _ => None,
        };

        let shared = q_embed.is_some();
        let want_q_dx = shared && !config.detach_mask_gradient;
        let dq_from_q = f_q.backward(store, &fwd.q_cache, &grads.z_q, None, want_q_dx);
        if let (Some(f_v), Some(cache), Some(dz_v)) = (f_v.as_ref(), &fwd.v_cache, &grads.z_v) {
            f_v.backward(store, cache, dz_v, None, false);
        }
        let dvq = f_vq.backward(store, &fwd.vq_cache, &grads.z_k, d_pen.as_ref(), shared);

        if let (Some(layer), Some((q_raw, e))) = (q_embed.as_ref(), &fwd.q_embed) {
            let mut de = dvq
                .expect("requested")
                .slice_cols(dims.v, dims.v + e.cols());
            if let Some(dq) = dq_from_q {
                for (a, b) in de.data_mut().iter_mut().zip(dq.data()) {
                    *a += b;
                }
            }
            for (g, &act) in de.data_mut().iter_mut().zip(e.data()) {
                if act <= 0.0 {
                    *g = 0.0;
                }
            }
            layer.backward(store, q_raw, &de, false);
        }
    }

    /// Factual branch outputs for one sample.
    pub fn forward(&self, v: &[f64], q: &[f64]) -> Result<BranchOutputs> {
        let fwd = self.forward_batch(&Tensor2::from_rows(&[v])?, &Tensor2::from_rows(&[q])?)?;
        Ok(fwd.outputs(0))
    }

    fn strategy_for(&self, out: &BranchOutputs) -> effects::FusionStrategy {
        self.config.strategy.with_weight(out.g.unwrap_or(0.0))
    }

    /// `h(z_q, z_v, z_k)` with all factual inputs.
    pub fn factual_score(&self, out: &BranchOutputs) -> Result<Logits> {
        effects::fuse(
            self.strategy_for(out),
            self.config.mode,
            &out.z_q,
            out.z_v.as_ref(),
            &out.z_k,
        )
    }

    /// `h(z_q, z_v*, z_k*)`: the question kept, everything else withheld.
    pub fn counterfactual_score(&self, out: &BranchOutputs) -> Result<Logits> {
        let s = effects::star_value(&self.cf_config(), out.z_q.len())?;
        effects::fuse(
            self.strategy_for(out),
            self.config.mode,
            &out.z_q,
            Some(&s),
            &s,
        )
    }

    pub fn inference_score(&self, out: &BranchOutputs, inference: InferenceMode) -> Result<Logits> {
        effects::inference_score(
            inference,
            self.strategy_for(out),
            self.config.mode,
            &out.z_q,
            out.z_v.as_ref(),
            &out.z_k,
            &self.cf_config(),
        )
    }

    /// Answer index (ties to the lowest index) and the score it was read from.
    pub fn predict(
        &self,
        v: &[f64],
        q: &[f64],
        inference: InferenceMode,
    ) -> Result<(usize, Logits)> {
        let out = self.forward(v, q)?;
        let score = self.inference_score(&out, inference)?;
        Ok((score.argmax(), score))
    }

    /// Fused factual score and gradient for answer `a` of a batch row.
    pub(crate) fn fuse_factual(&self, fwd: &BatchForward, row: usize, a: usize) -> (f64, FuseGrad) {
        let g = fwd.g.as_ref().map_or(0.0, |g| g[row]);
        let v = fwd.z_v.as_ref().map_or(0.0, |z| z.row(row)[a]);
        fuse_scalar_with_grad(
            self.config.strategy.with_weight(g),
            self.config.mode,
            fwd.z_q.row(row)[a],
            v,
            fwd.z_k.row(row)[a],
        )
    }

    /// Counterfactual score `h(z_q, s, s)` and gradient for answer `a`.
    pub(crate) fn fuse_counterfactual(
        &self,
        fwd: &BatchForward,
        row: usize,
        a: usize,
    ) -> (f64, FuseGrad) {
        let g = fwd.g.as_ref().map_or(0.0, |g| g[row]);
        let s = self.star(a);
        fuse_scalar_with_grad(
            self.config.strategy.with_weight(g),
            self.config.mode,
            fwd.z_q.row(row)[a],
            s,
            s,
        )
    }

    pub fn header(&self) -> ModelHeader {
        ModelHeader {
            strategy: self.config.strategy,
            mode: self.config.mode,
            cf_mode: self.config.cf_mode,
            c: self.store.value(self.cf).data().to_vec(),
            dims: self.dims,
            layer_sizes: LayerSizes {
                f_q: self.f_q.spec().layer_sizes.clone(),
                f_v: self.f_v.as_ref().map(|m| m.spec().layer_sizes.clone()),
                f_vq: self.f_vq.spec().layer_sizes.clone(),
            },
            hidden: self.config.hidden,
            share_question_embedding: self.config.share_question_embedding,
            detach_mask_gradient: self.config.detach_mask_gradient,
            seed: self.config.seed,
        }
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            header: self.header(),
            params: self.store.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        let h = &ckpt.header;
        let config = ModelConfig {
            strategy: h.strategy,
            mode: h.mode,
            cf_mode: h.cf_mode,
            hidden: h.hidden,
            share_question_embedding: h.share_question_embedding,
            detach_mask_gradient: h.detach_mask_gradient,
            seed: h.seed,
        };
        // Every declared size shows up in some stored weight matrix, so a
        // header that outgrows the stored values is malformed; checking first
        // keeps allocation proportional to the input.
        ckpt.params.validate()?;
        let stored: usize = ckpt.params.0.values().map(|t| t.values.len()).sum();
        let declared = [
            h.dims.v,
            h.dims.q,
            h.dims.answers,
            h.hidden.saturating_mul(h.hidden),
        ];
        if declared.iter().any(|&n| n > stored) {
            return Err(Error::MalformedCheckpoint(
                "header sizes exceed the stored parameters".into(),
            ));
        }
        // Placeholder prior; the stored values overwrite it below.
        let prior = vec![1.0 / h.dims.answers.max(1) as f64; h.dims.answers];
        let mut model = EnsembleModel::new(config, h.dims, Some(&prior))?;
        model.store.load_checkpoint(&ckpt.params)?;
        if model.header() != ckpt.header {
            return Err(Error::MalformedCheckpoint(
                "header does not match the stored parameters".into(),
            ));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSizes {
    pub f_q: Vec<usize>,
    pub f_v: Option<Vec<usize>>,
    pub f_vq: Vec<usize>,
}

/// Human-readable description stored alongside the parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub strategy: FusionKind,
    pub mode: GraphMode,
    pub cf_mode: CfMode,
    pub c: Vec<f64>,
    pub dims: FeatureDims,
    pub layer_sizes: LayerSizes,
    pub hidden: usize,
    pub share_question_embedding: bool,
    pub detach_mask_gradient: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub header: ModelHeader,
    pub params: Checkpoint,
}

impl ModelCheckpoint {
    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: ModelCheckpoint = serde_json::from_str(text)?;
        ckpt.params.validate()?;
        Ok(ckpt)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: FeatureDims = FeatureDims {
        v: 4,
        q: 2,
        answers: 4,
    };

    fn model(strategy: FusionKind, mode: GraphMode) -> EnsembleModel {
        let cfg = ModelConfig {
            strategy,
            mode,
            hidden: 6,
            seed: 5,
            ..ModelConfig::default()
        };
        EnsembleModel::new(cfg, DIMS, None).unwrap()
    }

    fn zeroed(mut m: EnsembleModel) -> EnsembleModel {
        for id in m.theta_ids() {
            m.store_mut().value_mut(id).fill(0.0);
        }
        m
    }

    fn l(v: &[f64]) -> Logits {
        Logits::new(v.to_vec()).unwrap()
    }

    const V: [f64; 4] = [0.2, -1.0, 0.5, 2.0];
    const Q: [f64; 2] = [1.0, -0.3];

    #[test]
    fn zero_model_outputs_zero() {
        let m = zeroed(model(FusionKind::Sum, GraphMode::Full));
        let out = m.forward(&V, &Q).unwrap();
        for z in [&out.z_q, out.z_v.as_ref().unwrap(), &out.z_k] {
            assert!(z.as_slice().iter().all(|&x| x == 0.0));
        }
        let f = m.factual_score(&out).unwrap();
        assert!(f
            .as_slice()
            .iter()
            .all(|&x| (x + std::f64::consts::LN_2).abs() < 1e-12));

        let hm = zeroed(model(FusionKind::Harmonic, GraphMode::Full));
        let f = hm.factual_score(&hm.forward(&V, &Q).unwrap()).unwrap();
        assert!(f.as_slice().iter().all(|&x| (x + 2.197225).abs() < 1e-6));
    }

    #[test]
    fn seeded_models_are_reproducible() {
        let a = model(FusionKind::Sum, GraphMode::Full);
        let b = model(FusionKind::Sum, GraphMode::Full);
        assert_eq!(a.forward(&V, &Q).unwrap(), b.forward(&V, &Q).unwrap());
    }

    #[test]
    fn simplified_drops_only_the_vision_branch() {
        let full = model(FusionKind::Sum, GraphMode::Full);
        let mut simple = model(FusionKind::Sum, GraphMode::Simplified);
        for id in simple.store().ids().collect::<Vec<_>>() {
            let name = simple.store().name(id).to_string();
            let src = full.store().id(&name).unwrap();
            *simple.store_mut().value_mut(id) = full.store().value(src).clone();
        }
        let a = full.forward(&V, &Q).unwrap();
        let b = simple.forward(&V, &Q).unwrap();
        assert_eq!(a.z_q, b.z_q);
        assert_eq!(a.z_k, b.z_k);
        assert!(b.z_v.is_none());
        assert!(simple.vision_branch_ids().is_empty());
    }

    #[test]
    fn rubi_factual_and_counterfactual_scores() {
        let m = model(FusionKind::Rubi, GraphMode::Simplified);
        let out = BranchOutputs {
            z_q: l(&[1.0, 0.0]),
            z_v: None,
            z_k: l(&[3.0, 0.0]),
            g: None,
        };
        assert!(
            (m.factual_score(&out).unwrap().as_slice()[0] - 2.193_175_735_890_015).abs() < 1e-12
        );
    }

    #[test]
    fn counterfactual_score_examples() {
        let m = model(FusionKind::Sum, GraphMode::Full);
        let out = BranchOutputs {
            z_q: l(&[1.0, 0.0]),
            z_v: Some(l(&[5.0, 5.0])),
            z_k: l(&[5.0, 5.0]),
            g: None,
        };
        let cf = m.counterfactual_score(&out).unwrap();
        assert!((cf.as_slice()[0] + 0.313262).abs() < 1e-6);
        assert!((cf.as_slice()[0] - effects::log_sigmoid(1.0)).abs() < 1e-15);

        let hm = model(FusionKind::Harmonic, GraphMode::Full);
        let out = BranchOutputs {
            z_q: l(&[0.0, 0.0]),
            z_v: Some(l(&[1.0, 1.0])),
            z_k: l(&[1.0, 1.0]),
            g: None,
        };
        let cf = hm.counterfactual_score(&out).unwrap();
        assert!((cf.as_slice()[0] + 2.197225).abs() < 1e-6);
    }

    #[test]
    fn predict_examples() {
        let m = model(FusionKind::Sum, GraphMode::Full);
        let flat = l(&[0.0; 4]);
        let out = BranchOutputs {
            z_q: flat.clone(),
            z_v: Some(flat.clone()),
            z_k: l(&[0.0, 1.0, 4.0, 0.5]),
            g: None,
        };
        let post = m.inference_score(&out, InferenceMode::Posterior).unwrap();
        assert_eq!(post.argmax(), 2);

        // z_v = z_k = c = 0: TIE is identically zero and ties go to index 0.
        let out = BranchOutputs {
            z_q: l(&[3.0, -1.0, 0.0, 2.0]),
            z_v: Some(flat.clone()),
            z_k: flat,
            g: None,
        };
        let tie = m.inference_score(&out, InferenceMode::Tie).unwrap();
        assert!(tie.as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(tie.argmax(), 0);
    }

    #[test]
    fn lm_weight_is_non_negative() {
        let m = model(FusionKind::LearnedMixin, GraphMode::Simplified);
        let g = m.forward(&V, &Q).unwrap().g.unwrap();
        assert!(g >= 0.0);
    }

    #[test]
    fn rejects_bad_configs_and_dims() {
        let cfg = ModelConfig {
            strategy: FusionKind::Rubi,
            mode: GraphMode::Full,
            ..ModelConfig::default()
        };
        assert!(EnsembleModel::new(cfg, DIMS, None).is_err());
        let cfg = ModelConfig {
            cf_mode: CfMode::Prior,
            ..ModelConfig::default()
        };
        assert!(EnsembleModel::new(cfg, DIMS, None).is_err());
        let m = model(FusionKind::Sum, GraphMode::Full);
        assert!(matches!(
            m.forward(&V[..3], &Q),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        for (kind, mode, cf) in [
            (FusionKind::Sum, GraphMode::Full, CfMode::Random),
            (
                FusionKind::LearnedMixin,
                GraphMode::Simplified,
                CfMode::Prior,
            ),
        ] {
            let cfg = ModelConfig {
                strategy: kind,
                mode,
                cf_mode: cf,
                hidden: 5,
                share_question_embedding: true,
                seed: 9,
                ..ModelConfig::default()
            };
            let m = EnsembleModel::new(cfg, DIMS, Some(&[0.1, 0.2, 0.3, 0.4])).unwrap();
            let json = m.to_checkpoint().to_json().unwrap();
            let back = EnsembleModel::from_checkpoint(&ModelCheckpoint::from_json(&json).unwrap())
                .unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn oversized_headers_are_rejected_before_allocating() {
        let mut ckpt = model(FusionKind::Sum, GraphMode::Full).to_checkpoint();
        ckpt.header.hidden = usize::MAX / 2;
        assert!(matches!(
            EnsembleModel::from_checkpoint(&ckpt),
            Err(Error::MalformedCheckpoint(_))
        ));
        let mut ckpt = model(FusionKind::Sum, GraphMode::Full).to_checkpoint();
        ckpt.header.dims.answers = 1 << 40;
        assert!(EnsembleModel::from_checkpoint(&ckpt).is_err());
    }
}
