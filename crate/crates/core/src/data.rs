//! Synthetic changing-priors classification task.
//!
//! Each question type owns a subset of the answers (its context). Labels are
//! drawn from a per-type prior that differs between the training and test
//! splits, and the visual features carry a noisy one-hot of the true label.
//! A model that memorizes the training prior therefore does well in-domain
//! and badly on the test split.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Everything needed to regenerate a task, including the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub num_answers: usize,
    pub num_qtypes: usize,
    /// Answers admissible for each question type.
    pub context_map: Vec<Vec<usize>>,
    /// Per-type distribution over `context_map[t]`, training (and val) split.
    pub train_prior: Vec<Vec<f64>>,
    /// Per-type distribution over `context_map[t]`, test split.
    pub test_prior: Vec<Vec<f64>>,
    pub visual_snr: f64,
    /// Probability that a label follows the split prior rather than being
    /// uniform over the context.
    pub spurious_strength: f64,
    pub sizes: SplitSizes,
    pub seed: u64,
    /// Smallest admissible total-variation distance between the train and
    /// test prior of every question type.
    #[serde(default = "default_min_prior_tv")]
    pub min_prior_tv: f64,
}

fn default_min_prior_tv() -> f64 {
    0.3
}

impl Default for SyntheticTaskSpec {
    /// Ten answers, three question types sharing one binary answer context
    /// (a yes/no analog; answers 2..9 are visual distractors that never
    /// occur). Every type leans towards answer 0 in training and towards
    /// answer 1 at test time, a total-variation shift of 0.6.
    fn default() -> Self {
        SyntheticTaskSpec {
            num_answers: 10,
            num_qtypes: 3,
            context_map: vec![vec![0, 1]; 3],
            train_prior: vec![vec![0.75, 0.25]; 3],
            test_prior: vec![vec![0.15, 0.85]; 3],
            visual_snr: 1.0,
            spurious_strength: 0.8,
            sizes: SplitSizes {
                train: 20_000,
                val: 4_000,
                test: 4_000,
            },
            seed: 0,
            min_prior_tv: default_min_prior_tv(),
        }
    }
}

/// Total-variation distance between two distributions of equal length.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

impl SyntheticTaskSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SyntheticTaskSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.num_answers < 4 {
            return bad(format!(
                "num_answers must be >= 4, got {}",
                self.num_answers
            ));
        }
        if self.num_qtypes < 2 {
            return bad(format!("num_qtypes must be >= 2, got {}", self.num_qtypes));
        }
        for (name, table) in [
            ("context_map", self.context_map.len()),
            ("train_prior", self.train_prior.len()),
            ("test_prior", self.test_prior.len()),
        ] {
            if table != self.num_qtypes {
                return bad(format!(
                    "{name} has {table} entries for {} qtypes",
                    self.num_qtypes
                ));
            }
        }
        if !(self.visual_snr.is_finite() && self.visual_snr >= 0.0) {
            return bad(format!(
                "visual_snr must be finite and >= 0, got {}",
                self.visual_snr
            ));
        }
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return bad(format!(
                "spurious_strength must lie in [0, 1], got {}",
                self.spurious_strength
            ));
        }
        if !(0.0..=1.0).contains(&self.min_prior_tv) {
            return bad(format!(
                "min_prior_tv must lie in [0, 1], got {}",
                self.min_prior_tv
            ));
        }
        if self.sizes.train == 0 {
            return bad("the training split must not be empty".into());
        }
        for t in 0..self.num_qtypes {
            let ctx = &self.context_map[t];
            if ctx.is_empty() {
                return bad(format!("qtype {t} has an empty context"));
            }
            let mut seen = vec![false; self.num_answers];
            for &a in ctx {
                if a >= self.num_answers {
                    return bad(format!("qtype {t} lists answer {a} >= num_answers"));
                }
                if std::mem::replace(&mut seen[a], true) {
                    return bad(format!("qtype {t} lists answer {a} twice"));
                }
            }
            for (name, prior) in [
                ("train_prior", &self.train_prior[t]),
                ("test_prior", &self.test_prior[t]),
            ] {
                if prior.len() != ctx.len() {
                    return bad(format!(
                        "{name}[{t}] has {} entries for a context of {}",
                        prior.len(),
                        ctx.len()
                    ));
                }
                if prior.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return bad(format!("{name}[{t}] has a negative or non-finite entry"));
                }
                let total: f64 = prior.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return bad(format!("{name}[{t}] sums to {total}"));
                }
            }
            let tv = total_variation(&self.train_prior[t], &self.test_prior[t]);
            if tv + 1e-12 < self.min_prior_tv {
                return bad(format!(
                    "qtype {t}: train/test prior TV {tv:.4} below min_prior_tv {}",
                    self.min_prior_tv
                ));
            }
        }
        Ok(())
    }

    pub fn v_dim(&self) -> usize {
        self.num_answers
    }

    pub fn q_dim(&self) -> usize {
        self.num_qtypes
    }

    fn prior(&self, split: Split, qtype: usize) -> &[f64] {
        match split {
            Split::Test => &self.test_prior[qtype],
            Split::Train | Split::Val => &self.train_prior[qtype],
        }
    }

    /// Label distribution over the full answer set for one qtype and split,
    /// i.e. the prior mixed with the uniform context distribution.
    pub fn label_distribution(&self, split: Split, qtype: usize) -> Vec<f64> {
        let ctx = &self.context_map[qtype];
        let s = self.spurious_strength;
        let mut out = vec![0.0; self.num_answers];
        for (&a, &p) in ctx.iter().zip(self.prior(split, qtype)) {
            out[a] = s * p + (1.0 - s) / ctx.len() as f64;
        }
        out
    }

    /// Accuracy of always answering the most likely label of the qtype,
    /// averaged over (uniformly drawn) qtypes. No classifier can beat it
    /// when `visual_snr` is zero and the qtype is known.
    pub fn max_prior_accuracy(&self, split: Split) -> f64 {
        (0..self.num_qtypes)
            .map(|t| {
                self.label_distribution(split, t)
                    .into_iter()
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / self.num_qtypes as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// One (v, q, answer) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub qtype: usize,
    pub answer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent stream per (seed, split, index), so samples can be drawn in
/// any order or in parallel.
fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let s = splitmix64(splitmix64(seed) ^ split.tag());
    ChaCha8Rng::seed_from_u64(splitmix64(s ^ index as u64))
}

fn draw_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the final cumulative sum.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn generate_sample(spec: &SyntheticTaskSpec, split: Split, index: usize) -> Sample {
    let mut rng = sample_rng(spec.seed, split, index);
    let qtype = rng.random_range(0..spec.num_qtypes);
    let ctx = &spec.context_map[qtype];
    let follow_prior = rng.random::<f64>() < spec.spurious_strength;
    let slot = if follow_prior {
        draw_index(&mut rng, spec.prior(split, qtype))
    } else {
        rng.random_range(0..ctx.len())
    };
    let answer = ctx[slot];
    let v = (0..spec.num_answers)
        .map(|a| {
            let signal = if a == answer { spec.visual_snr } else { 0.0 };
            signal + Distribution::<f64>::sample(&StandardNormal, &mut rng)
        })
        .collect();
    let q = (0..spec.num_qtypes)
        .map(|t| {
            let signal = if t == qtype { 1.0 } else { 0.0 };
            signal + Distribution::<f64>::sample(&StandardNormal, &mut rng)
        })
        .collect();
    Sample {
        v,
        q,
        qtype,
        answer,
    }
}

pub fn generate_split(spec: &SyntheticTaskSpec, split: Split, len: usize) -> Vec<Sample> {
    crate::install(|| {
        (0..len)
            .into_par_iter()
            .map(|i| generate_sample(spec, split, i))
            .collect()
    })
}

/// Draws the three splits. A pure function of `spec`.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        train: generate_split(spec, Split::Train, spec.sizes.train),
        val: generate_split(spec, Split::Val, spec.sizes.val),
        test: generate_split(spec, Split::Test, spec.sizes.test),
    })
}

/// Parses one JSON-lines record.
pub fn parse_sample_line(line: &str) -> std::result::Result<Sample, String> {
    let sample: Sample = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if sample.v.is_empty() || sample.q.is_empty() {
        return Err("empty feature vector".into());
    }
    Ok(sample)
}

pub fn save(split: &[Sample], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in split {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let sample = parse_sample_line(&line).map_err(|message| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Checks every sample against the dimensions of `spec`.
pub fn check_split(spec: &SyntheticTaskSpec, split: &[Sample]) -> Result<()> {
    for (i, s) in split.iter().enumerate() {
        if s.v.len() != spec.v_dim()
            || s.q.len() != spec.q_dim()
            || s.qtype >= spec.num_qtypes
            || s.answer >= spec.num_answers
        {
            return Err(Error::InvalidSpec(format!(
                "sample {i} does not fit the task dimensions"
            )));
        }
    }
    Ok(())
}

/// Stacks the features of `samples` into `(v, q, answers)`.
pub fn to_batch(samples: &[&Sample]) -> Result<(Tensor2, Tensor2, Vec<usize>)> {
    let v: Vec<&[f64]> = samples.iter().map(|s| s.v.as_slice()).collect();
    let q: Vec<&[f64]> = samples.iter().map(|s| s.q.as_slice()).collect();
    let answers = samples.iter().map(|s| s.answer).collect();
    Ok((Tensor2::from_rows(&v)?, Tensor2::from_rows(&q)?, answers))
}

/// Laplace-smoothed empirical answer distribution of a split.
pub fn answer_prior(split: &[Sample], num_answers: usize) -> Vec<f64> {
    let mut counts = vec![1.0; num_answers];
    for s in split {
        counts[s.answer] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| c / total).collect()
}

/// Train-vs-test label histogram and total-variation distance for one qtype.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QtypeShift {
    pub qtype: usize,
    /// `None` when either split has no sample of this qtype.
    pub tv: Option<f64>,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PriorShiftReport {
    pub num_answers: usize,
    pub qtypes: Vec<QtypeShift>,
}

fn normalized(counts: &[usize]) -> Option<Vec<f64>> {
    let total: usize = counts.iter().sum();
    (total > 0).then(|| counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Per-qtype empirical label shift between two splits.
pub fn prior_shift_report(train: &[Sample], test: &[Sample]) -> PriorShiftReport {
    let all = || train.iter().chain(test);
    let num_answers = all().map(|s| s.answer + 1).max().unwrap_or(0);
    let num_qtypes = all().map(|s| s.qtype + 1).max().unwrap_or(0);
    let histogram = |split: &[Sample], t: usize| {
        let mut counts = vec![0usize; num_answers];
        for s in split.iter().filter(|s| s.qtype == t) {
            counts[s.answer] += 1;
        }
        counts
    };
    let qtypes = (0..num_qtypes)
        .map(|t| {
            let train_counts = histogram(train, t);
            let test_counts = histogram(test, t);
            let tv = match (normalized(&train_counts), normalized(&test_counts)) {
                (Some(p), Some(q)) => Some(total_variation(&p, &q)),
                _ => None,
            };
            QtypeShift {
                qtype: t,
                tv,
                train_counts,
                test_counts,
            }
        })
        .collect();
    PriorShiftReport {
        num_answers,
        qtypes,
    }
}

impl PriorShiftReport {
    /// `qtype,tv` table.
    pub fn tv_csv(&self) -> String {
        let mut out = String::from("qtype,tv\n");
        for q in &self.qtypes {
            let tv = q.tv.map_or_else(String::new, |tv| format!("{tv:.6}"));
            out.push_str(&format!("{},{tv}\n", q.qtype));
        }
        out
    }

    /// Long-format `qtype,answer,train_count,test_count` histogram.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("qtype,answer,train_count,test_count\n");
        for q in &self.qtypes {
            for a in 0..self.num_answers {
                out.push_str(&format!(
                    "{},{a},{},{}\n",
                    q.qtype, q.train_counts[a], q.test_counts[a]
                ));
            }
        }
        out
    }
}
