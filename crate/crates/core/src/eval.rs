//! Accuracy reports, ranking agreement and the counterfactual ablations.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{answer_prior, to_batch, Dataset, Sample};
use crate::effects::{self, CfMode, InferenceMode};
use crate::error::{Error, Result};
use crate::model::{BranchOutputs, EnsembleModel, FeatureDims, ModelConfig};
use crate::train::{fit, TrainConfig, TrainReport};

const CHUNK: usize = 256;

/// Runs `f` on every sample's branch outputs, in parallel, preserving order.
fn map_outputs<T, F>(model: &EnsembleModel, split: &[Sample], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Sample, &BranchOutputs) -> Result<T> + Sync,
{
    crate::install(|| {
        let chunks: Vec<Result<Vec<T>>> = split
            .par_chunks(CHUNK)
            .map(|chunk| {
                let refs: Vec<&Sample> = chunk.iter().collect();
                let (v, q, _) = to_batch(&refs)?;
                let fwd = model.forward_batch(&v, &q)?;
                chunk
                    .iter()
                    .enumerate()
                    .map(|(i, s)| f(s, &fwd.outputs(i)))
                    .collect()
            })
            .collect();
        let mut out = Vec::with_capacity(split.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    })
}

/// Predicted answer per sample for each requested mode.
pub fn predictions(
    model: &EnsembleModel,
    split: &[Sample],
    modes: &[InferenceMode],
) -> Result<Vec<Vec<usize>>> {
    map_outputs(model, split, |_, out| {
        modes
            .iter()
            .map(|&m| Ok(model.inference_score(out, m)?.argmax()))
            .collect()
    })
}

/// Top-1 accuracy for each mode, in the order given.
pub fn accuracies(
    model: &EnsembleModel,
    split: &[Sample],
    modes: &[InferenceMode],
) -> Result<Vec<f64>> {
    if split.is_empty() {
        return Err(Error::Empty("split"));
    }
    let preds = predictions(model, split, modes)?;
    let n = split.len() as f64;
    Ok((0..modes.len())
        .map(|m| {
            let hits = preds
                .iter()
                .zip(split)
                .filter(|(p, s)| p[m] == s.answer)
                .count();
            hits as f64 / n
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeReport {
    pub mode: InferenceMode,
    pub accuracy: f64,
    /// `None` for qtypes absent from the split.
    pub per_qtype_accuracy: Vec<Option<f64>>,
    /// Predicted-answer counts, `[qtype][answer]`.
    pub predicted_histogram: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub num_samples: usize,
    /// Ground-truth answer counts, `[qtype][answer]`.
    pub truth_histogram: Vec<Vec<usize>>,
    pub modes: Vec<ModeReport>,
}

impl EvalReport {
    pub fn accuracy(&self, mode: InferenceMode) -> Option<f64> {
        self.modes
            .iter()
            .find(|m| m.mode == mode)
            .map(|m| m.accuracy)
    }

    /// `mode,qtype,accuracy` rows; qtype `all` carries the overall number.
    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("mode,qtype,accuracy\n");
        for m in &self.modes {
            out.push_str(&format!("{},all,{}\n", m.mode, m.accuracy));
            for (t, acc) in m.per_qtype_accuracy.iter().enumerate() {
                let acc = acc.map_or_else(String::new, |a| a.to_string());
                out.push_str(&format!("{},{t},{acc}\n", m.mode));
            }
        }
        out
    }
}

fn qtype_count(split: &[Sample]) -> usize {
    split.iter().map(|s| s.qtype + 1).max().unwrap_or(0)
}

/// Exact-match accuracy, per-qtype accuracy and prediction histograms.
pub fn evaluate(
    model: &EnsembleModel,
    split: &[Sample],
    modes: &[InferenceMode],
) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::Empty("split"));
    }
    let answers = model.dims().answers;
    let n_qtypes = qtype_count(split);
    let preds = predictions(model, split, modes)?;

    let mut truth = vec![vec![0usize; answers]; n_qtypes];
    for s in split {
        truth[s.qtype][s.answer] += 1;
    }
    let per_type_total: Vec<usize> = truth.iter().map(|row| row.iter().sum()).collect();

    let modes = modes
        .iter()
        .enumerate()
        .map(|(m, &mode)| {
            let mut hist = vec![vec![0usize; answers]; n_qtypes];
            let mut hits = vec![0usize; n_qtypes];
            for (p, s) in preds.iter().zip(split) {
                hist[s.qtype][p[m]] += 1;
                if p[m] == s.answer {
                    hits[s.qtype] += 1;
                }
            }
            let total_hits: usize = hits.iter().sum();
            ModeReport {
                mode,
                accuracy: total_hits as f64 / split.len() as f64,
                per_qtype_accuracy: hits
                    .iter()
                    .zip(&per_type_total)
                    .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
                    .collect(),
                predicted_histogram: hist,
            }
        })
        .collect();
    Ok(EvalReport {
        num_samples: split.len(),
        truth_histogram: truth,
        modes,
    })
}

/// Predicted-vs-true answer counts per qtype under one inference mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionReport {
    pub mode: InferenceMode,
    pub predicted: Vec<Vec<usize>>,
    pub truth: Vec<Vec<usize>>,
}

impl DistributionReport {
    /// `qtype,answer,predicted,truth`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("qtype,answer,predicted,truth\n");
        for (t, (p, g)) in self.predicted.iter().zip(&self.truth).enumerate() {
            for (a, (pc, gc)) in p.iter().zip(g).enumerate() {
                out.push_str(&format!("{t},{a},{pc},{gc}\n"));
            }
        }
        out
    }
}

pub fn distribution_report(
    model: &EnsembleModel,
    split: &[Sample],
    mode: InferenceMode,
) -> Result<DistributionReport> {
    let mut report = evaluate(model, split, &[mode])?;
    let m = report.modes.pop().expect("one mode");
    Ok(DistributionReport {
        mode,
        predicted: m.predicted_histogram,
        truth: report.truth_histogram,
    })
}

/// Kendall's tau-b between two score vectors.
///
/// Pairs tied in one vector count toward that vector's tie correction. When
/// both vectors are entirely tied the rankings agree trivially and the result
/// is 1; when only one is, it is 0.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "kendall_tau_b needs equal lengths");
    let n = x.len();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut untied_x, mut untied_y) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx != 0.0 {
                untied_x += 1;
            }
            if dy != 0.0 {
                untied_y += 1;
            }
            if dx != 0.0 && dy != 0.0 {
                if (dx > 0.0) == (dy > 0.0) {
                    concordant += 1;
                } else {
                    discordant += 1;
                }
            }
        }
    }
    match (untied_x, untied_y) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => (concordant - discordant) as f64 / ((untied_x as f64) * (untied_y as f64)).sqrt(),
    }
}

/// Metrics of a UNIFORM model with `c` forced to one value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub c: f64,
    pub tie_accuracy: f64,
    /// Mean tau-b between the TIE ranking and the fused factual ranking.
    pub tau_tie_factual: f64,
    /// Mean tau-b between the TIE ranking and the NDE ranking.
    pub tau_tie_nde: f64,
}

/// Mean ranking agreements of TIE with the factual score and with NDE.
pub fn ranking_agreement(
    strategy: effects::FusionStrategy,
    mode: effects::GraphMode,
    outputs: &[BranchOutputs],
    cfg: &effects::CounterfactualConfig,
) -> Result<(f64, f64)> {
    let mut sums = (0.0, 0.0);
    for out in outputs {
        let strategy = match strategy {
            effects::FusionStrategy::LearnedMixin { .. } => {
                strategy.kind().with_weight(out.g.unwrap_or(0.0))
            }
            s => s,
        };
        let d = effects::decompose(strategy, mode, &out.z_q, out.z_v.as_ref(), &out.z_k, cfg)?;
        let factual = effects::fuse(strategy, mode, &out.z_q, out.z_v.as_ref(), &out.z_k)?;
        sums.0 += kendall_tau_b(d.tie.as_slice(), factual.as_slice());
        sums.1 += kendall_tau_b(d.tie.as_slice(), d.nde.as_slice());
    }
    let n = outputs.len().max(1) as f64;
    Ok((sums.0 / n, sums.1 / n))
}

/// Evaluates TIE with `c` forced to each of `c_values`.
pub fn sweep_c(
    model: &EnsembleModel,
    split: &[Sample],
    c_values: &[f64],
) -> Result<Vec<SweepPoint>> {
    if split.is_empty() {
        return Err(Error::Empty("split"));
    }
    if model.config().cf_mode != CfMode::Uniform {
        return Err(Error::InvalidConfig(
            "sweep-c requires UNIFORM counterfactuals".into(),
        ));
    }
    let outputs = map_outputs(model, split, |_, out| Ok(out.clone()))?;
    let mut forced = model.clone();
    c_values
        .iter()
        .map(|&c| {
            forced.set_uniform_c(c)?;
            let tie_accuracy = accuracies(&forced, split, &[InferenceMode::Tie])?[0];
            let (tau_tie_factual, tau_tie_nde) = ranking_agreement(
                forced.config().strategy.with_weight(0.0),
                forced.config().mode,
                &outputs,
                &forced.cf_config(),
            )?;
            Ok(SweepPoint {
                c,
                tie_accuracy,
                tau_tie_factual,
                tau_tie_nde,
            })
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("c,tie_accuracy,tau_tie_factual,tau_tie_nde\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.c, p.tie_accuracy, p.tau_tie_factual, p.tau_tie_nde
        ));
    }
    out
}

/// One trained model of the counterfactual-assumption ablation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub cf_mode: CfMode,
    pub tie_accuracy: f64,
    pub c_initial: Vec<f64>,
    pub c_final: Vec<f64>,
}

/// Builds an untrained model for `config` sized for `data`, using the
/// smoothed training answer prior for PRIOR counterfactuals.
pub fn build_model(
    config: &ModelConfig,
    data: &Dataset,
    dims: FeatureDims,
) -> Result<EnsembleModel> {
    let prior = answer_prior(&data.train, dims.answers);
    EnsembleModel::new(config.clone(), dims, Some(&prior))
}

/// Trains a model with `config` and the given counterfactual mode.
pub fn train_model(
    config: &ModelConfig,
    cf_mode: CfMode,
    data: &Dataset,
    dims: FeatureDims,
    train: &TrainConfig,
) -> Result<(EnsembleModel, TrainReport)> {
    let config = ModelConfig {
        cf_mode,
        ..config.clone()
    };
    let mut model = build_model(&config, data, dims)?;
    let report = fit(&mut model, &data.train, &data.val, train)?;
    Ok((model, report))
}

/// Trains one model per counterfactual mode (same seeds otherwise) and
/// reports TIE accuracy on the test split.
pub fn assumption_ablation(
    config: &ModelConfig,
    data: &Dataset,
    dims: FeatureDims,
    train: &TrainConfig,
    modes: &[CfMode],
) -> Result<Vec<AblationRow>> {
    modes
        .iter()
        .map(|&cf_mode| {
            let config = ModelConfig {
                cf_mode,
                ..config.clone()
            };
            let mut model = build_model(&config, data, dims)?;
            let c_initial = model.cf_config().values().to_vec();
            fit(&mut model, &data.train, &data.val, train)?;
            let tie_accuracy = accuracies(&model, &data.test, &[InferenceMode::Tie])?[0];
            Ok(AblationRow {
                cf_mode,
                tie_accuracy,
                c_initial,
                c_final: model.cf_config().values().to_vec(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SplitSizes, SyntheticTaskSpec};
    use crate::effects::{FusionKind, GraphMode};
    use crate::nn::Tensor2;

    fn spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            sizes: SplitSizes {
                train: 200,
                val: 50,
                test: 300,
            },
            seed: 8,
            ..SyntheticTaskSpec::default()
        }
    }

    fn dims(spec: &SyntheticTaskSpec) -> FeatureDims {
        FeatureDims {
            v: spec.v_dim(),
            q: spec.q_dim(),
            answers: spec.num_answers,
        }
    }

    /// Linear read-out of `v` in `f_vq` (times `scale`), everything else zero.
    /// With `v = snr * onehot + noise`, a huge `scale` and noise-free inputs
    /// this is an oracle.
    fn readout_model(
        spec: &SyntheticTaskSpec,
        strategy: FusionKind,
        mode: GraphMode,
        scale: f64,
    ) -> EnsembleModel {
        let d = dims(spec);
        let cfg = ModelConfig {
            strategy,
            mode,
            hidden: d.v,
            ..ModelConfig::default()
        };
        let mut m = EnsembleModel::new(cfg, d, None).unwrap();
        for id in m.theta_ids() {
            m.store_mut().value_mut(id).fill(0.0);
        }
        let eye = |rows: usize, cols: usize, s: f64| {
            let mut t = Tensor2::zeros(rows, cols);
            for i in 0..rows.min(cols) {
                t.row_mut(i)[i] = s;
            }
            t
        };
        // f_vq input is [v | q]; ReLU layers pass positive parts of v.
        for (layer, s) in [(0, 1.0), (1, 1.0), (2, scale)] {
            let id = m.store().id(&format!("f_vq.{layer}.weight")).unwrap();
            let (r, c) = m.store().value(id).shape();
            *m.store_mut().value_mut(id) = eye(r, c, s);
        }
        m
    }

    fn noiseless(split: &[Sample]) -> Vec<Sample> {
        split
            .iter()
            .map(|s| {
                let mut v = vec![0.0; s.v.len()];
                v[s.answer] = 1.0;
                Sample { v, ..s.clone() }
            })
            .collect()
    }

    #[test]
    fn oracle_model_is_perfect_in_every_mode() {
        let spec = spec();
        let data = generate(&spec).unwrap();
        let test = noiseless(&data.test);
        let m = readout_model(&spec, FusionKind::Sum, GraphMode::Full, 50.0);
        let report = evaluate(&m, &test, &InferenceMode::ALL).unwrap();
        for mode in &report.modes {
            assert_eq!(mode.accuracy, 1.0, "{}", mode.mode);
            assert_eq!(mode.predicted_histogram, report.truth_histogram);
        }
        let dist = distribution_report(&m, &test, InferenceMode::Tie).unwrap();
        assert_eq!(dist.predicted, dist.truth);
    }

    #[test]
    fn constant_model_picks_answer_zero() {
        let spec = spec();
        let data = generate(&spec).unwrap();
        let m = readout_model(&spec, FusionKind::Sum, GraphMode::Full, 0.0);
        let report = evaluate(
            &m,
            &data.test,
            &[InferenceMode::Posterior, InferenceMode::Tie],
        )
        .unwrap();
        let freq0 =
            data.test.iter().filter(|s| s.answer == 0).count() as f64 / data.test.len() as f64;
        for mode in &report.modes {
            assert_eq!(mode.accuracy, freq0);
            let total: usize = mode.predicted_histogram.iter().flatten().sum();
            assert_eq!(total, data.test.len());
        }
    }

    #[test]
    fn empty_split_is_an_error() {
        let spec = spec();
        let m = readout_model(&spec, FusionKind::Sum, GraphMode::Full, 1.0);
        assert!(matches!(
            evaluate(&m, &[], &[InferenceMode::Tie]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn nie_matches_branch_k_for_rubi() {
        let spec = spec();
        let data = generate(&spec).unwrap();
        let mut m = readout_model(&spec, FusionKind::Rubi, GraphMode::Simplified, 3.0);
        // Give the question branch something to say.
        let id = m.store().id("f_q.2.bias").unwrap();
        m.store_mut().value_mut(id).data_mut()[3] = 4.0;
        m.set_uniform_c(0.7).unwrap();
        let preds = predictions(
            &m,
            &data.test,
            &[InferenceMode::Nie, InferenceMode::BranchK],
        )
        .unwrap();
        assert!(preds.iter().all(|p| p[0] == p[1]));
    }

    #[test]
    fn kendall_tau_properties() {
        assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(kendall_tau_b(&[1.0, 1.0], &[1.0, 1.0]), 1.0);
        assert_eq!(kendall_tau_b(&[1.0, 1.0], &[1.0, 2.0]), 0.0);
        // scipy.stats.kendalltau([1,2,2,3],[1,3,2,4]) = 0.912870929175277 = 5/sqrt(30)
        let t = kendall_tau_b(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]);
        assert!((t - 0.912870929175277).abs() < 1e-12);
    }

    #[test]
    fn sweep_requires_uniform() {
        let spec = spec();
        let data = generate(&spec).unwrap();
        let cfg = ModelConfig {
            cf_mode: CfMode::Random,
            hidden: 4,
            ..ModelConfig::default()
        };
        let m = EnsembleModel::new(cfg, dims(&spec), None).unwrap();
        assert!(sweep_c(&m, &data.test, &[0.0]).is_err());
    }

    #[test]
    fn sweep_extreme_c_matches_factual_ranking() {
        let spec = spec();
        let data = generate(&spec).unwrap();
        let cfg = ModelConfig {
            hidden: 8,
            seed: 3,
            ..ModelConfig::default()
        };
        let m = EnsembleModel::new(cfg, dims(&spec), None).unwrap();
        let pts = sweep_c(&m, &data.test, &[-30.0, 30.0]).unwrap();
        for p in pts {
            assert_eq!(p.tau_tie_factual, 1.0, "c = {}", p.c);
        }
    }
}
