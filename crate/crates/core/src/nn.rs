//! Small dense networks with hand-written backward passes.
//!
//! Parameters live in a [`ParamStore`] next to their gradients; layers only
//! hold [`ParamId`]s into it, so an optimizer or a gradient checker can walk
//! every parameter without knowing which layer owns it.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Tensor2 { rows, cols, data })
    }

    /// Stacks equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor2 {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                actual: other.rows,
            });
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Tensor2 {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Columns `[start, end)` as a new tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor2 {
        let cols = end - start;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Tensor2 {
            rows: self.rows,
            cols,
            data,
        }
    }

    fn expect_shape(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(Error::ShapeMismatch {
                expected_rows: rows,
                expected_cols: cols,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }
}

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    value: Tensor2,
    grad: Tensor2,
}

/// Named parameter tensors with matching gradient buffers, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor2) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        let grad = Tensor2::zeros(value.rows, value.cols);
        self.params.push(Param { name, value, grad });
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Total number of scalars across `ids`.
    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter()
            .map(|&id| self.params[id.0].value.data.len())
            .sum()
    }

    /// Concatenated values of `ids`, in order.
    pub fn flat_values(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter()
            .flat_map(|&id| self.params[id.0].value.data.iter().copied())
            .collect()
    }

    /// Concatenated gradients of `ids`, in order.
    pub fn flat_grads(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter()
            .flat_map(|&id| self.params[id.0].grad.data.iter().copied())
            .collect()
    }

    /// Inverse of [`ParamStore::flat_values`].
    pub fn set_flat_values(&mut self, ids: &[ParamId], flat: &[f64]) -> Result<()> {
        let n = self.numel(ids);
        if flat.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for &id in ids {
            let data = &mut self.params[id.0].value.data;
            let len = data.len();
            data.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Serializable snapshot of every parameter value.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint(
            self.params
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        TensorRecord {
                            shape: [p.value.rows, p.value.cols],
                            values: p.value.data.clone(),
                        },
                    )
                })
                .collect(),
        )
    }

    /// Overwrites values from a checkpoint holding exactly this store's
    /// parameters with matching shapes.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.0.len() != self.params.len() {
            return Err(Error::MalformedCheckpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                ckpt.0.len()
            )));
        }
        for (name, record) in &ckpt.0 {
            let id = self
                .id(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            let value = &mut self.params[id.0].value;
            value.expect_shape(record.shape[0], record.shape[1])?;
            value.data.copy_from_slice(&record.values);
        }
        Ok(())
    }
}

/// One tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// `{name -> {shape, values}}` map of parameter tensors. Values survive a
/// JSON round trip bit-for-bit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint(pub BTreeMap<String, TensorRecord>);

impl Checkpoint {
    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in &self.0 {
            let n = r.shape[0].checked_mul(r.shape[1]);
            if n != Some(r.values.len()) {
                return Err(Error::MalformedCheckpoint(format!(
                    "`{name}` has shape {:?} but {} values",
                    r.shape,
                    r.values.len()
                )));
            }
            if r.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::MalformedCheckpoint(format!(
                    "`{name}` holds non-finite values"
                )));
            }
        }
        Ok(())
    }
}

/// Glorot-uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor2 {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor2 {
        rows: fan_in,
        cols: fan_out,
        data,
    }
}

/// Affine layer `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{prefix}.weight"),
            glorot_uniform(rng, fan_in, fan_out),
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor2::zeros(1, fan_out));
        Dense { weight, bias }
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).rows
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).cols
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor2) -> Result<Tensor2> {
        let w = store.value(self.weight);
        let b = store.value(self.bias);
        if x.cols != w.rows {
            return Err(Error::DimensionMismatch {
                expected: w.rows,
                actual: x.cols,
            });
        }
        let mut y = Tensor2::zeros(x.rows, w.cols);
        for r in 0..x.rows {
            let out = y.row_mut(r);
            out.copy_from_slice(&b.data);
            for (i, &xi) in x.row(r).iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let w_row = w.row(i);
                for (o, &wij) in out.iter_mut().zip(w_row) {
                    *o += xi * wij;
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx` when requested.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        x: &Tensor2,
        dy: &Tensor2,
        want_dx: bool,
    ) -> Option<Tensor2> {
        let (in_dim, out_dim) = store.value(self.weight).shape();
        {
            let dw = store.grad_mut(self.weight);
            for r in 0..x.rows {
                let dy_r = dy.row(r);
                for (i, &xi) in x.row(r).iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let dw_row = &mut dw.data[i * out_dim..(i + 1) * out_dim];
                    for (g, &d) in dw_row.iter_mut().zip(dy_r) {
                        *g += xi * d;
                    }
                }
            }
        }
        {
            let db = store.grad_mut(self.bias);
            for r in 0..dy.rows {
                for (g, &d) in db.data.iter_mut().zip(dy.row(r)) {
                    *g += d;
                }
            }
        }
        if !want_dx {
            return None;
        }
        let w = store.value(self.weight);
        let mut dx = Tensor2::zeros(x.rows, in_dim);
        for r in 0..dy.rows {
            let dy_r = dy.row(r);
            let dx_r = dx.row_mut(r);
            for (i, g) in dx_r.iter_mut().enumerate() {
                *g = w.row(i).iter().zip(dy_r).map(|(a, b)| a * b).sum();
            }
        }
        Some(dx)
    }
}

/// Layer sizes of a ReLU multilayer perceptron with a linear output layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "an MLP needs at least two positive layer sizes, got {layer_sizes:?}"
            )));
        }
        Ok(MlpSpec { layer_sizes })
    }

    /// Three fully connected layers: `input -> hidden -> hidden -> output`.
    pub fn three_layer(input: usize, hidden: usize, output: usize) -> Self {
        MlpSpec {
            layer_sizes: vec![input, hidden, hidden, output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Dense>,
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Tensor2>,
    pub output: Tensor2,
}

impl MlpCache {
    /// Activation feeding the output layer.
    pub fn penultimate(&self) -> &Tensor2 {
        self.inputs.last().unwrap()
    }
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        spec: MlpSpec,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Self {
        let layers = spec
            .layer_sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{prefix}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { spec, layers }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor2) -> Result<MlpCache> {
        if x.cols != self.spec.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim(),
                actual: x.cols,
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(store, &h)?;
            if i != last {
                y.data.iter_mut().for_each(|a| *a = a.max(0.0));
            }
            inputs.push(h);
            h = y;
        }
        Ok(MlpCache { inputs, output: h })
    }

    /// Backpropagates `d_out` (and optionally an extra gradient arriving at
    /// the penultimate activation), returning `dL/dx` if `want_dx`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &MlpCache,
        d_out: &Tensor2,
        d_penultimate: Option<&Tensor2>,
        want_dx: bool,
    ) -> Option<Tensor2> {
        let mut grad = d_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            let need_dx = i > 0 || want_dx;
            let dx = layer.backward(store, x, &grad, need_dx)?;
            if i == 0 {
                return Some(dx);
            }
            grad = dx;
            if i == self.layers.len() - 1 {
                if let Some(extra) = d_penultimate {
                    for (g, e) in grad.data.iter_mut().zip(&extra.data) {
                        *g += e;
                    }
                }
            }
            // ReLU: x here is the post-activation output of layer i-1; zero
            // activations (including exactly 0) pass no gradient.
            for (g, &a) in grad.data.iter_mut().zip(&x.data) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        None
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Row-wise `log softmax`.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits, `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Tensor2, targets: &[usize]) -> Result<(f64, Tensor2)> {
    if logits.rows != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: logits.rows,
            actual: targets.len(),
        });
    }
    if logits.rows == 0 {
        return Err(Error::Empty("batch"));
    }
    let batch = logits.rows as f64;
    let mut grad = Tensor2::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols {
            return Err(Error::TargetOutOfRange {
                index: t,
                num_classes: logits.cols,
            });
        }
        let ls = log_softmax(logits.row(r));
        loss -= ls[t];
        let g = grad.row_mut(r);
        for (gi, l) in g.iter_mut().zip(&ls) {
            *gi = l.exp() / batch;
        }
        g[t] -= 1.0 / batch;
    }
    Ok((loss / batch, grad))
}

/// Compares an analytic gradient against central differences.
///
/// `f` maps a parameter vector to `(loss, analytic gradient)`. Returns the
/// largest `|g_fd - g_an| / max(1, |g_fd|, |g_an|)` over coordinates.
pub fn finite_difference_check<F>(mut f: F, params: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidEpsilon(epsilon));
    }
    let (loss, analytic) = f(params);
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    if analytic.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: analytic.len(),
        });
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let (up, _) = f(&x);
        x[i] = orig - epsilon;
        let (down, _) = f(&x);
        x[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite("loss"));
        }
        let fd = (up - down) / (2.0 * epsilon);
        let an = analytic[i];
        let err = (fd - an).abs() / 1f64.max(fd.abs()).max(an.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Adam with bias correction over a fixed subset of a store's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    targets: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, targets: Vec<ParamId>, lr: f64) -> Self {
        let m: Vec<Vec<f64>> = targets
            .iter()
            .map(|&id| vec![0.0; store.value(id).data.len()])
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            targets,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn targets(&self) -> &[ParamId] {
        &self.targets
    }

    /// One update from the gradients currently stored for the targets.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (slot, &id) in self.targets.iter().enumerate() {
            let p = &mut store.params[id.0];
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (i, (w, &g)) in p.value.data.iter_mut().zip(&p.grad.data).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
