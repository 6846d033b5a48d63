//! Fusion functions and counterfactual effect decompositions over branch logits.
//!
//! Everything here is model-free: callers hand in factual branch logits and a
//! [`CounterfactualConfig`] describing what a branch outputs when its input is
//! withheld, and get back fused scores or the per-answer effects
//! (TE, NDE, TIE, TDE, NIE).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fused HM/SUM log-scores are clamped from below at this value.
///
/// A withheld branch can drive the fused probability arbitrarily close to
/// zero; the clamp replaces that `-inf` limit with one constant so that the
/// counterfactual score becomes answer-independent rather than tracking tiny
/// per-answer differences deep in the tail.
pub const LOG_SCORE_FLOOR: f64 = -40.0;

/// Per-answer real-valued scores from one branch or one fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyLogits);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        Ok(Logits(values))
    }

    /// Constant vector of length `len`.
    pub fn splat(value: f64, len: usize) -> Result<Self> {
        Self::new(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry, ties going to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    fn zip_map(&self, other: &Logits, f: impl Fn(f64, f64) -> f64) -> Logits {
        Logits(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    fn sub(&self, other: &Logits) -> Logits {
        self.zip_map(other, |a, b| a - b)
    }
}

impl TryFrom<Vec<f64>> for Logits {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Logits::new(values)
    }
}

impl From<Logits> for Vec<f64> {
    fn from(logits: Logits) -> Self {
        logits.0
    }
}

impl AsRef<[f64]> for Logits {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Index of the largest entry of `values`; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))`, i.e. `-softplus(-x)`, without overflow at either tail.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn softplus(x: f64) -> f64 {
    -log_sigmoid(-x)
}

/// Which fusion function combines the branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionKind {
    #[serde(rename = "HM")]
    Harmonic,
    #[serde(rename = "SUM")]
    Sum,
    #[serde(rename = "RUBI")]
    Rubi,
    #[serde(rename = "LM")]
    LearnedMixin,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [
        FusionKind::Harmonic,
        FusionKind::Sum,
        FusionKind::Rubi,
        FusionKind::LearnedMixin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Harmonic => "HM",
            FusionKind::Sum => "SUM",
            FusionKind::Rubi => "RUBI",
            FusionKind::LearnedMixin => "LM",
        }
    }

    /// Pairs the kind with a per-sample mixin weight; `g` is ignored unless
    /// the kind is [`FusionKind::LearnedMixin`].
    pub fn with_weight(self, g: f64) -> FusionStrategy {
        match self {
            FusionKind::Harmonic => FusionStrategy::Harmonic,
            FusionKind::Sum => FusionStrategy::Sum,
            FusionKind::Rubi => FusionStrategy::Rubi,
            FusionKind::LearnedMixin => FusionStrategy::LearnedMixin { g },
        }
    }

    /// Whether the fusion needs the simplified (no vision-only) graph.
    pub fn requires_simplified(self) -> bool {
        matches!(self, FusionKind::Rubi | FusionKind::LearnedMixin)
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HM" | "HARMONIC" => Ok(FusionKind::Harmonic),
            "SUM" => Ok(FusionKind::Sum),
            "RUBI" => Ok(FusionKind::Rubi),
            "LM" | "LEARNED_MIXIN" => Ok(FusionKind::LearnedMixin),
            _ => Err(Error::InvalidConfig(format!("unknown fusion `{s}`"))),
        }
    }
}

/// A fusion function together with its per-sample data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FusionStrategy {
    Harmonic,
    Sum,
    Rubi,
    /// `g` scales the question-only log-probability and must be `>= 0`.
    LearnedMixin {
        g: f64,
    },
}

impl FusionStrategy {
    pub fn kind(self) -> FusionKind {
        match self {
            FusionStrategy::Harmonic => FusionKind::Harmonic,
            FusionStrategy::Sum => FusionKind::Sum,
            FusionStrategy::Rubi => FusionKind::Rubi,
            FusionStrategy::LearnedMixin { .. } => FusionKind::LearnedMixin,
        }
    }

    fn validate(self, mode: GraphMode) -> Result<()> {
        if mode == GraphMode::Full && self.kind().requires_simplified() {
            return Err(Error::FullGraphUnsupported {
                strategy: self.kind().name(),
            });
        }
        if let FusionStrategy::LearnedMixin { g } = self {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::InvalidMixinWeight(g));
            }
        }
        Ok(())
    }
}

/// Causal graph variant. `Simplified` has no vision-to-answer edge, so the
/// vision-only branch is ignored everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GraphMode {
    Full,
    Simplified,
}

impl FromStr for GraphMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FULL" => Ok(GraphMode::Full),
            "SIMPLIFIED" => Ok(GraphMode::Simplified),
            _ => Err(Error::InvalidConfig(format!("unknown graph mode `{s}`"))),
        }
    }
}

/// Partial derivatives of one fused score with respect to its inputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FuseGrad {
    pub q: f64,
    pub v: f64,
    pub k: f64,
    /// Derivative with respect to the learned-mixin weight.
    pub g: f64,
}

/// Fuses one answer's scores. `v` is ignored on the simplified graph.
///
/// The caller is responsible for having validated `strategy` against `mode`.
pub fn fuse_scalar(strategy: FusionStrategy, mode: GraphMode, q: f64, v: f64, k: f64) -> f64 {
    fuse_scalar_with_grad(strategy, mode, q, v, k).0
}

/// Fused score and its gradient for one answer.
pub fn fuse_scalar_with_grad(
    strategy: FusionStrategy,
    mode: GraphMode,
    q: f64,
    v: f64,
    k: f64,
) -> (f64, FuseGrad) {
    let full = mode == GraphMode::Full;
    match strategy {
        FusionStrategy::Harmonic => {
            let mut log_z = log_sigmoid(q) + log_sigmoid(k);
            if full {
                log_z += log_sigmoid(v);
            }
            // log(Z / (1 + Z)) = log Z - log(1 + Z)
            let h = log_z - log_z.exp().ln_1p();
            if h < LOG_SCORE_FLOOR {
                return (LOG_SCORE_FLOOR, FuseGrad::default());
            }
            let scale = 1.0 / (1.0 + log_z.exp());
            let grad = FuseGrad {
                q: sigmoid(-q) * scale,
                v: if full { sigmoid(-v) * scale } else { 0.0 },
                k: sigmoid(-k) * scale,
                g: 0.0,
            };
            (h, grad)
        }
        FusionStrategy::Sum => {
            let s = if full { q + v + k } else { q + k };
            let h = log_sigmoid(s);
            if h < LOG_SCORE_FLOOR {
                return (LOG_SCORE_FLOOR, FuseGrad::default());
            }
            let d = sigmoid(-s);
            let grad = FuseGrad {
                q: d,
                v: if full { d } else { 0.0 },
                k: d,
                g: 0.0,
            };
            (h, grad)
        }
        FusionStrategy::Rubi => {
            let mask = sigmoid(q);
            let grad = FuseGrad {
                q: k * mask * sigmoid(-q),
                v: 0.0,
                k: mask,
                g: 0.0,
            };
            (k * mask, grad)
        }
        FusionStrategy::LearnedMixin { g } => {
            let lq = log_sigmoid(q);
            let grad = FuseGrad {
                q: g * sigmoid(-q),
                v: 0.0,
                k: sigmoid(-k),
                g: lq,
            };
            (log_sigmoid(k) + g * lq, grad)
        }
    }
}

fn check_len(expected: usize, logits: &Logits) -> Result<()> {
    if logits.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: logits.len(),
        });
    }
    Ok(())
}

/// Applies the fusion function element-wise across answers.
///
/// `z_v` is required on the full graph and ignored on the simplified one.
/// Counterfactual slots must already be resolved with [`star_value`].
pub fn fuse(
    strategy: FusionStrategy,
    mode: GraphMode,
    z_q: &Logits,
    z_v: Option<&Logits>,
    z_k: &Logits,
) -> Result<Logits> {
    strategy.validate(mode)?;
    let n = z_q.len();
    check_len(n, z_k)?;
    let v = match mode {
        GraphMode::Full => {
            let v = z_v.ok_or(Error::MissingVisionBranch)?;
            check_len(n, v)?;
            Some(v.as_slice())
        }
        GraphMode::Simplified => None,
    };
    let out = (0..n)
        .map(|a| {
            let va = v.map_or(0.0, |v| v[a]);
            fuse_scalar(strategy, mode, z_q.0[a], va, z_k.0[a])
        })
        .collect::<Vec<_>>();
    Logits::new(out)
}

/// How withheld branches are imagined to respond.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CounterfactualConfig {
    /// One scalar shared by every answer and every withheld branch.
    Uniform { c: f64 },
    /// Log of the training answer prior; never trained.
    Prior { log_prior: Vec<f64> },
    /// Free per-answer values.
    Random { c: Vec<f64> },
}

/// The mode tag of a [`CounterfactualConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CfMode {
    Uniform,
    Prior,
    Random,
}

impl CfMode {
    pub const ALL: [CfMode; 3] = [CfMode::Uniform, CfMode::Prior, CfMode::Random];

    pub fn name(self) -> &'static str {
        match self {
            CfMode::Uniform => "UNIFORM",
            CfMode::Prior => "PRIOR",
            CfMode::Random => "RANDOM",
        }
    }
}

impl fmt::Display for CfMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CfMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "UNIFORM" => Ok(CfMode::Uniform),
            "PRIOR" => Ok(CfMode::Prior),
            "RANDOM" => Ok(CfMode::Random),
            _ => Err(Error::InvalidConfig(format!(
                "unknown counterfactual mode `{s}`"
            ))),
        }
    }
}

impl CounterfactualConfig {
    /// PRIOR config from a probability vector over answers.
    pub fn from_prior(prior: &[f64]) -> Result<Self> {
        if prior.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidConfig(
                "prior probabilities must be strictly positive".into(),
            ));
        }
        Ok(CounterfactualConfig::Prior {
            log_prior: prior.iter().map(|p| p.ln()).collect(),
        })
    }

    pub fn mode(&self) -> CfMode {
        match self {
            CounterfactualConfig::Uniform { .. } => CfMode::Uniform,
            CounterfactualConfig::Prior { .. } => CfMode::Prior,
            CounterfactualConfig::Random { .. } => CfMode::Random,
        }
    }

    /// The raw stored values (one entry for UNIFORM).
    pub fn values(&self) -> &[f64] {
        match self {
            CounterfactualConfig::Uniform { c } => std::slice::from_ref(c),
            CounterfactualConfig::Prior { log_prior } => log_prior,
            CounterfactualConfig::Random { c } => c,
        }
    }
}

/// The vector substituted for any branch whose input is withheld.
pub fn star_value(cfg: &CounterfactualConfig, num_answers: usize) -> Result<Logits> {
    match cfg {
        CounterfactualConfig::Uniform { c } => Logits::splat(*c, num_answers),
        CounterfactualConfig::Prior { log_prior: c } | CounterfactualConfig::Random { c } => {
            if c.len() != num_answers {
                return Err(Error::DimensionMismatch {
                    expected: num_answers,
                    actual: c.len(),
                });
            }
            Logits::new(c.clone())
        }
    }
}

/// Per-answer causal effects of the question on the answer for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectDecomposition {
    pub te: Logits,
    pub nde: Logits,
    pub tie: Logits,
    pub tde: Logits,
    pub nie: Logits,
}

/// Decomposes the total effect into direct and indirect parts.
///
/// With `s` the counterfactual vector:
/// `TE = h(q,v,k) - h(s,s,s)`, `NDE = h(q,s,s) - h(s,s,s)`,
/// `TIE = h(q,v,k) - h(q,s,s)`, `TDE = h(q,v,k) - h(s,v,k)`,
/// `NIE = h(s,v,k) - h(s,s,s)`.
pub fn decompose(
    strategy: FusionStrategy,
    mode: GraphMode,
    z_q: &Logits,
    z_v: Option<&Logits>,
    z_k: &Logits,
    cfg: &CounterfactualConfig,
) -> Result<EffectDecomposition> {
    let s = star_value(cfg, z_q.len())?;
    let factual = fuse(strategy, mode, z_q, z_v, z_k)?;
    let all_star = fuse(strategy, mode, &s, Some(&s), &s)?;
    let q_only = fuse(strategy, mode, z_q, Some(&s), &s)?;
    let q_star = fuse(strategy, mode, &s, z_v, z_k)?;
    Ok(EffectDecomposition {
        te: factual.sub(&all_star),
        nde: q_only.sub(&all_star),
        tie: factual.sub(&q_only),
        tde: factual.sub(&q_star),
        nie: q_star.sub(&all_star),
    })
}

/// Debiased TIE for a RUBi-trained ensemble: `(z_k - c) * sigmoid(z_q)`.
pub fn rubi_improved_tie(z_q: &Logits, z_k: &Logits, c: f64) -> Result<Logits> {
    check_len(z_q.len(), z_k)?;
    Logits::new(
        z_q.0
            .iter()
            .zip(&z_k.0)
            .map(|(&q, &k)| (k - c) * sigmoid(q))
            .collect(),
    )
}

/// Which score is used to pick an answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InferenceMode {
    /// The fused factual score.
    Posterior,
    Te,
    Tie,
    Nie,
    /// The vision-language branch alone.
    BranchK,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 5] = [
        InferenceMode::Posterior,
        InferenceMode::Te,
        InferenceMode::Tie,
        InferenceMode::Nie,
        InferenceMode::BranchK,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::Posterior => "posterior",
            InferenceMode::Te => "te",
            InferenceMode::Tie => "tie",
            InferenceMode::Nie => "nie",
            InferenceMode::BranchK => "branch_k",
        }
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "posterior" => Ok(InferenceMode::Posterior),
            "te" => Ok(InferenceMode::Te),
            "tie" => Ok(InferenceMode::Tie),
            "nie" => Ok(InferenceMode::Nie),
            "branch_k" | "k" => Ok(InferenceMode::BranchK),
            _ => Err(Error::InvalidConfig(format!(
                "unknown inference mode `{s}`"
            ))),
        }
    }
}

/// The score vector an inference mode ranks answers by.
pub fn inference_score(
    inference: InferenceMode,
    strategy: FusionStrategy,
    mode: GraphMode,
    z_q: &Logits,
    z_v: Option<&Logits>,
    z_k: &Logits,
    cfg: &CounterfactualConfig,
) -> Result<Logits> {
    match inference {
        InferenceMode::Posterior => fuse(strategy, mode, z_q, z_v, z_k),
        InferenceMode::BranchK => Ok(z_k.clone()),
        InferenceMode::Te | InferenceMode::Tie | InferenceMode::Nie => {
            let d = decompose(strategy, mode, z_q, z_v, z_k, cfg)?;
            Ok(match inference {
                InferenceMode::Te => d.te,
                InferenceMode::Tie => d.tie,
                _ => d.nie,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l(v: &[f64]) -> Logits {
        Logits::new(v.to_vec()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    // Straight-line scalar references, independent of the fuse dispatch.
    fn ref_sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn fuse_trivial_zero_logits() {
        let z = l(&[0.0]);
        let sum = fuse(FusionStrategy::Sum, GraphMode::Full, &z, Some(&z), &z).unwrap();
        close(sum.as_slice()[0], -std::f64::consts::LN_2, 1e-12);
        let hm = fuse(FusionStrategy::Harmonic, GraphMode::Full, &z, Some(&z), &z).unwrap();
        close(hm.as_slice()[0], (1.0f64 / 9.0).ln(), 1e-12);
        close(hm.as_slice()[0], -2.197225, 1e-6);
    }

    #[test]
    fn fuse_scalar_examples() {
        let (q, v, k) = (l(&[1.0]), l(&[2.0]), l(&[3.0]));
        let sum = fuse(FusionStrategy::Sum, GraphMode::Full, &q, Some(&v), &k).unwrap();
        close(sum.as_slice()[0], ref_sigmoid(6.0).ln(), 1e-12);
        close(sum.as_slice()[0], -0.002_475_685_137_730_45, 1e-12);

        let p = ref_sigmoid(1.0) * ref_sigmoid(2.0) * ref_sigmoid(3.0);
        let hm = fuse(FusionStrategy::Harmonic, GraphMode::Full, &q, Some(&v), &k).unwrap();
        close(hm.as_slice()[0], (p / (1.0 + p)).ln(), 1e-12);
        close(hm.as_slice()[0], -0.967_105_967_709_065, 1e-12);

        let rubi = fuse(FusionStrategy::Rubi, GraphMode::Simplified, &q, None, &k).unwrap();
        close(rubi.as_slice()[0], 3.0 * ref_sigmoid(1.0), 1e-12);
        close(rubi.as_slice()[0], 2.193_175_735_890_015, 1e-12);

        let lm = FusionStrategy::LearnedMixin { g: 1.0 };
        let lm = fuse(lm, GraphMode::Simplified, &q, None, &k).unwrap();
        close(
            lm.as_slice()[0],
            ref_sigmoid(3.0).ln() + ref_sigmoid(1.0).ln(),
            1e-12,
        );
        close(lm.as_slice()[0], -0.361_849_039_091_965, 1e-12);
    }

    #[test]
    fn fuse_rejects_bad_inputs() {
        let a = l(&[0.0, 1.0]);
        let b = l(&[0.0]);
        assert!(matches!(
            fuse(FusionStrategy::Sum, GraphMode::Full, &a, Some(&a), &b),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            fuse(FusionStrategy::Rubi, GraphMode::Full, &a, Some(&a), &a),
            Err(Error::FullGraphUnsupported { .. })
        ));
        assert!(matches!(
            fuse(FusionStrategy::Sum, GraphMode::Full, &a, None, &a),
            Err(Error::MissingVisionBranch)
        ));
        let lm = FusionStrategy::LearnedMixin { g: -1.0 };
        assert!(matches!(
            fuse(lm, GraphMode::Simplified, &a, None, &a),
            Err(Error::InvalidMixinWeight(_))
        ));
        assert!(matches!(
            Logits::new(vec![f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(Logits::new(vec![]), Err(Error::EmptyLogits)));
    }

    #[test]
    fn simplified_ignores_vision() {
        let q = l(&[0.3, -1.0]);
        let k = l(&[2.0, 0.5]);
        let a = fuse(FusionStrategy::Sum, GraphMode::Simplified, &q, None, &k).unwrap();
        let b = fuse(
            FusionStrategy::Sum,
            GraphMode::Simplified,
            &q,
            Some(&l(&[9.0, 9.0])),
            &k,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn star_value_modes() {
        let u = star_value(&CounterfactualConfig::Uniform { c: 0.0 }, 3).unwrap();
        assert_eq!(u.as_slice(), &[0.0, 0.0, 0.0]);
        let p = CounterfactualConfig::from_prior(&[0.5, 0.25, 0.25]).unwrap();
        let p = star_value(&p, 3).unwrap();
        assert_eq!(p.as_slice(), &[0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()]);
        let r = CounterfactualConfig::Random {
            c: vec![0.3, -1.2, 2.0],
        };
        assert_eq!(star_value(&r, 3).unwrap().as_slice(), &[0.3, -1.2, 2.0]);
        assert!(star_value(&r, 4).is_err());
    }

    #[test]
    fn decompose_sum_example() {
        let (q, v, k) = (l(&[1.0]), l(&[2.0]), l(&[3.0]));
        let cfg = CounterfactualConfig::Uniform { c: 0.0 };
        let d = decompose(FusionStrategy::Sum, GraphMode::Full, &q, Some(&v), &k, &cfg).unwrap();
        let ls = |x: f64| ref_sigmoid(x).ln();
        // h(1,2,3)=ls(6), h(0,0,0)=ls(0), h(1,0,0)=ls(1), h(0,2,3)=ls(5)
        close(d.te.as_slice()[0], ls(6.0) - ls(0.0), 1e-12);
        close(d.nde.as_slice()[0], ls(1.0) - ls(0.0), 1e-12);
        close(d.tie.as_slice()[0], ls(6.0) - ls(1.0), 1e-12);
        close(d.tde.as_slice()[0], ls(6.0) - ls(5.0), 1e-12);
        close(d.nie.as_slice()[0], ls(5.0) - ls(0.0), 1e-12);
        close(d.te.as_slice()[0], 0.690671, 1e-6);
        close(d.nde.as_slice()[0], 0.379885, 1e-6);
        close(d.tie.as_slice()[0], 0.310786, 1e-6);
        close(d.tde.as_slice()[0], 0.004240, 1e-6);
        close(d.nie.as_slice()[0], 0.686432, 1e-6);

        let d = decompose(
            FusionStrategy::Sum,
            GraphMode::Full,
            &l(&[2.0]),
            Some(&l(&[0.0])),
            &l(&[0.0]),
            &cfg,
        )
        .unwrap();
        close(d.nde.as_slice()[0], ls(2.0) - ls(0.0), 1e-12);
        close(d.nde.as_slice()[0], 0.566219, 1e-6);
    }

    #[test]
    fn decompose_at_counterfactual_is_zero() {
        let cfg = CounterfactualConfig::Random {
            c: vec![0.3, -1.2, 2.0],
        };
        let s = star_value(&cfg, 3).unwrap();
        for kind in FusionKind::ALL {
            let mode = if kind.requires_simplified() {
                GraphMode::Simplified
            } else {
                GraphMode::Full
            };
            let d = decompose(kind.with_weight(0.7), mode, &s, Some(&s), &s, &cfg).unwrap();
            for e in [&d.te, &d.nde, &d.tie, &d.tde, &d.nie] {
                assert!(e.as_slice().iter().all(|&x| x == 0.0), "{kind}: {e:?}");
            }
        }
    }

    #[test]
    fn rubi_tie_examples() {
        let t = rubi_improved_tie(&l(&[0.0, 0.0, 0.0]), &l(&[1.0, 3.0, 2.0]), 0.5).unwrap();
        assert_eq!(t.as_slice(), &[0.25, 1.25, 0.75]);
        let t = rubi_improved_tie(&l(&[0.4, -2.0]), &l(&[1.5, 1.5]), 1.5).unwrap();
        assert_eq!(t.as_slice(), &[0.0, 0.0]);
        let t = rubi_improved_tie(&l(&[1.0]), &l(&[3.0]), 0.0).unwrap();
        close(t.as_slice()[0], 2.193_175_735_890_015, 1e-12);
        assert!(rubi_improved_tie(&l(&[1.0]), &l(&[3.0, 1.0]), 0.0).is_err());
    }

    #[test]
    fn inference_modes() {
        let k = l(&[1.0, 3.0, 2.0]);
        let z = l(&[0.0, 0.0, 0.0]);
        let cfg = CounterfactualConfig::Uniform { c: 0.0 };
        let s = inference_score(
            InferenceMode::BranchK,
            FusionStrategy::Sum,
            GraphMode::Full,
            &z,
            Some(&z),
            &k,
            &cfg,
        )
        .unwrap();
        assert_eq!(s, k);
        assert_eq!(s.argmax(), 1);

        let nie = inference_score(
            InferenceMode::Nie,
            FusionStrategy::Rubi,
            GraphMode::Simplified,
            &l(&[5.0, -3.0, 0.1]),
            None,
            &k,
            &CounterfactualConfig::Uniform { c: -0.8 },
        )
        .unwrap();
        assert_eq!(nie.argmax(), 1);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 2.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
    }

    #[test]
    fn log_sigmoid_tails() {
        close(log_sigmoid(800.0), 0.0, 1e-300);
        close(log_sigmoid(-800.0), -800.0, 1e-9);
        close(softplus(0.0), 2f64.ln(), 1e-15);
    }

    #[test]
    fn floor_makes_extreme_counterfactual_constant() {
        // SUM with c = -30: h(q, c, c) = log sigmoid(q - 60) lies below the floor.
        for q in [-10.0, 0.0, 10.0] {
            let h = fuse_scalar(FusionStrategy::Sum, GraphMode::Full, q, -30.0, -30.0);
            assert_eq!(h, LOG_SCORE_FLOOR);
        }
    }
}
