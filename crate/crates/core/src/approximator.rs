//! Small function approximators with hand-written reverse mode.
//!
//! Three backends share one interface: a lookup table over one-hot inputs, an
//! affine map, and a one-hidden-layer tanh network. Parameters live in a
//! flat [`ParamVector`] whose named slices describe the layout; gradients use
//! the same type so they can be summed, clipped, and applied elementwise.

use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, AcerError, Result};

/// A named, contiguous slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<Slot>,
}

impl ParamVector {
    /// Zero vector with consecutive slots of the given names and lengths.
    pub fn zeros(slots: &[(&str, usize)]) -> Self {
        let mut layout = Vec::with_capacity(slots.len());
        let mut offset = 0;
        for (name, len) in slots {
            layout.push(Slot { name: (*name).to_string(), offset, len: *len });
            offset += len;
        }
        ParamVector { values: vec![0.0; offset], layout }
    }

    pub fn zeros_like(other: &ParamVector) -> Self {
        ParamVector { values: vec![0.0; other.values.len()], layout: other.layout.clone() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.layout.iter().find(|s| s.name == name)
    }

    pub fn slice(&self, name: &str) -> &[f64] {
        let range = self.slot(name).unwrap_or_else(|| panic!("no slot named {name}")).range();
        &self.values[range]
    }

    pub fn slice_mut(&mut self, name: &str) -> &mut [f64] {
        let range = self.slot(name).unwrap_or_else(|| panic!("no slot named {name}")).range();
        &mut self.values[range]
    }

    pub fn same_shape(&self, other: &ParamVector) -> bool {
        self.values.len() == other.values.len() && self.layout == other.layout
    }

    /// Slots are disjoint, in order, and cover the vector; all entries finite.
    pub fn is_valid(&self) -> bool {
        let mut offset = 0;
        for slot in &self.layout {
            if slot.offset != offset {
                return false;
            }
            offset += slot.len;
        }
        offset == self.values.len() && self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add_assign(&mut self, other: &ParamVector) -> Result<()> {
        if !self.same_shape(other) {
            return invalid("parameter shapes differ");
        }
        self.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Backend {
    /// One row per state; input must be one-hot.
    Tabular,
    Linear,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Approximator {
    backend: Backend,
    input_dim: usize,
    output_dim: usize,
    pub params: ParamVector,
}

struct Hidden {
    activations: Vec<f64>,
}

impl Approximator {
    pub fn tabular(n_states: usize, output_dim: usize) -> Self {
        Approximator {
            backend: Backend::Tabular,
            input_dim: n_states,
            output_dim,
            params: ParamVector::zeros(&[("table", n_states * output_dim)]),
        }
    }

    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        Approximator {
            backend: Backend::Linear,
            input_dim,
            output_dim,
            params: ParamVector::zeros(&[("w", output_dim * input_dim), ("b", output_dim)]),
        }
    }

    /// One tanh hidden layer. Weights are uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn mlp<R: Rng + ?Sized>(input_dim: usize, hidden: usize, output_dim: usize, rng: &mut R) -> Self {
        let mut params = ParamVector::zeros(&[
            ("w1", hidden * input_dim),
            ("b1", hidden),
            ("w2", output_dim * hidden),
            ("b2", output_dim),
        ]);
        let s1 = 1.0 / (input_dim.max(1) as f64).sqrt();
        params.slice_mut("w1").iter_mut().for_each(|w| *w = rng.gen_range(-s1..s1));
        let s2 = 1.0 / (hidden.max(1) as f64).sqrt();
        params.slice_mut("w2").iter_mut().for_each(|w| *w = rng.gen_range(-s2..s2));
        Approximator { backend: Backend::Mlp { hidden }, input_dim, output_dim, params }
    }

    /// Build any backend; `rng` seeds the MLP weights.
    pub fn new<R: Rng + ?Sized>(backend: Backend, input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        match backend {
            Backend::Tabular => Self::tabular(input_dim, output_dim),
            Backend::Linear => Self::linear(input_dim, output_dim),
            Backend::Mlp { hidden } => Self::mlp(input_dim, hidden, output_dim, rng),
        }
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return invalid(format!("input has {} entries, expected {}", x.len(), self.input_dim));
        }
        Ok(())
    }

    fn table_row(&self, x: &[f64]) -> Result<usize> {
        let mut hot = None;
        for (i, v) in x.iter().enumerate() {
            if *v == 1.0 && hot.is_none() {
                hot = Some(i);
            } else if *v != 0.0 {
                return invalid("tabular input must be one-hot");
            }
        }
        hot.ok_or_else(|| AcerError::InvalidArgument("tabular input must be one-hot".into()))
    }

    fn hidden(&self, x: &[f64], hidden: usize) -> Hidden {
        let w1 = self.params.slice("w1");
        let b1 = self.params.slice("b1");
        let activations = (0..hidden)
            .map(|j| {
                let row = &w1[j * self.input_dim..(j + 1) * self.input_dim];
                (b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh()
            })
            .collect();
        Hidden { activations }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let (n_in, n_out) = (self.input_dim, self.output_dim);
        Ok(match self.backend {
            Backend::Tabular => {
                let s = self.table_row(x)?;
                self.params.slice("table")[s * n_out..(s + 1) * n_out].to_vec()
            }
            Backend::Linear => {
                let w = self.params.slice("w");
                let b = self.params.slice("b");
                (0..n_out)
                    .map(|o| b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
                    .collect()
            }
            Backend::Mlp { hidden } => {
                let h = self.hidden(x, hidden).activations;
                let w2 = self.params.slice("w2");
                let b2 = self.params.slice("b2");
                (0..n_out)
                    .map(|o| b2[o] + w2[o * hidden..(o + 1) * hidden].iter().zip(&h).map(|(w, v)| w * v).sum::<f64>())
                    .collect()
            }
        })
    }

    /// `accumulator += J^T upstream`, with `J` the Jacobian of the output in the parameters.
    pub fn backward(&self, x: &[f64], upstream: &[f64], accumulator: &mut ParamVector) -> Result<()> {
        self.check_input(x)?;
        if upstream.len() != self.output_dim {
            return invalid(format!("upstream has {} entries, expected {}", upstream.len(), self.output_dim));
        }
        if !accumulator.same_shape(&self.params) {
            return invalid("accumulator layout differs from parameters");
        }
        let (n_in, n_out) = (self.input_dim, self.output_dim);
        match self.backend {
            Backend::Tabular => {
                let s = self.table_row(x)?;
                let table = accumulator.slice_mut("table");
                for (t, u) in table[s * n_out..(s + 1) * n_out].iter_mut().zip(upstream) {
                    *t += u;
                }
            }
            Backend::Linear => {
                let w = accumulator.slot("w").unwrap().range();
                let b = accumulator.slot("b").unwrap().range();
                for o in 0..n_out {
                    let u = upstream[o];
                    if u == 0.0 {
                        continue;
                    }
                    for i in 0..n_in {
                        accumulator.values[w.start + o * n_in + i] += u * x[i];
                    }
                    accumulator.values[b.start + o] += u;
                }
            }
            Backend::Mlp { hidden } => {
                let h = self.hidden(x, hidden).activations;
                let w2 = self.params.slice("w2");
                let mut dh = vec![0.0; hidden];
                let w2_range = accumulator.slot("w2").unwrap().range();
                let b2_range = accumulator.slot("b2").unwrap().range();
                for o in 0..n_out {
                    let u = upstream[o];
                    for j in 0..hidden {
                        accumulator.values[w2_range.start + o * hidden + j] += u * h[j];
                        dh[j] += u * w2[o * hidden + j];
                    }
                    accumulator.values[b2_range.start + o] += u;
                }
                let w1_range = accumulator.slot("w1").unwrap().range();
                let b1_range = accumulator.slot("b1").unwrap().range();
                for j in 0..hidden {
                    let dz = dh[j] * (1.0 - h[j] * h[j]);
                    if dz == 0.0 {
                        continue;
                    }
                    for i in 0..n_in {
                        accumulator.values[w1_range.start + j * n_in + i] += dz * x[i];
                    }
                    accumulator.values[b1_range.start + j] += dz;
                }
            }
        }
        Ok(())
    }

    /// Gradient of the output with respect to the input, contracted with `upstream`.
    pub fn input_gradient(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let (n_in, n_out) = (self.input_dim, self.output_dim);
        Ok(match self.backend {
            Backend::Tabular => vec![0.0; n_in],
            Backend::Linear => {
                let w = self.params.slice("w");
                (0..n_in).map(|i| (0..n_out).map(|o| upstream[o] * w[o * n_in + i]).sum()).collect()
            }
            Backend::Mlp { hidden } => {
                let h = self.hidden(x, hidden).activations;
                let w1 = self.params.slice("w1");
                let w2 = self.params.slice("w2");
                let mut dx = vec![0.0; n_in];
                for j in 0..hidden {
                    let dh: f64 = (0..n_out).map(|o| upstream[o] * w2[o * hidden + j]).sum();
                    let dz = dh * (1.0 - h[j] * h[j]);
                    for i in 0..n_in {
                        dx[i] += dz * w1[j * n_in + i];
                    }
                }
                dx
            }
        })
    }

    /// Maximum relative error between [`backward`](Self::backward) and
    /// central differences of `upstream · forward(x)` over every parameter.
    ///
    /// The error of each coordinate is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub fn fd_check(&self, x: &[f64], upstream: &[f64], step: f64) -> Result<f64> {
        if !(step > 0.0) {
            return invalid("finite-difference step must be positive");
        }
        let mut analytic = ParamVector::zeros_like(&self.params);
        self.backward(x, upstream, &mut analytic)?;
        let objective = |net: &Approximator| -> Result<f64> {
            Ok(net.forward(x)?.iter().zip(upstream).map(|(y, u)| y * u).sum())
        };
        let mut probe = self.clone();
        let mut worst = 0.0f64;
        for i in 0..self.params.len() {
            let orig = probe.params.values[i];
            probe.params.values[i] = orig + step;
            let plus = objective(&probe)?;
            probe.params.values[i] = orig - step;
            let minus = objective(&probe)?;
            probe.params.values[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.values[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(err);
        }
        Ok(worst)
    }
}

fn check_finite(grad: &ParamVector) -> Result<()> {
    if let Some(i) = grad.values.iter().position(|g| !g.is_finite()) {
        return Err(AcerError::NumericFault(format!("non-finite gradient entry at index {i}")));
    }
    Ok(())
}

/// `shared -= lr * grad`
pub fn sgd_apply(shared: &mut ParamVector, grad: &ParamVector, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return invalid("learning rate must be positive");
    }
    if !shared.same_shape(grad) {
        return invalid("gradient layout differs from parameters");
    }
    check_finite(grad)?;
    shared.values.iter_mut().zip(&grad.values).for_each(|(p, g)| *p -= lr * g);
    Ok(())
}

/// `average = alpha * average + (1 - alpha) * current`
pub fn soft_update(average: &mut ParamVector, current: &ParamVector, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return invalid("alpha must lie in [0, 1]");
    }
    if !average.same_shape(current) {
        return invalid("average and current layouts differ");
    }
    average
        .values
        .iter_mut()
        .zip(&current.values)
        .for_each(|(a, c)| *a = alpha * *a + (1.0 - alpha) * c);
    Ok(())
}

/// Rescale the gradients so their joint norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [&mut ParamVector], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.values.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let factor = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(factor));
    }
    norm
}

/// RMSProp-style per-coordinate scaling of plain SGD steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub decay: f64,
    pub epsilon: f64,
    square_avg: Vec<f64>,
}

impl RmsProp {
    pub fn new(len: usize, decay: f64, epsilon: f64) -> Self {
        RmsProp { decay, epsilon, square_avg: vec![0.0; len] }
    }

    pub fn apply(&mut self, shared: &mut ParamVector, grad: &ParamVector, lr: f64) -> Result<()> {
        if !shared.same_shape(grad) || self.square_avg.len() != grad.len() {
            return invalid("gradient layout differs from parameters");
        }
        check_finite(grad)?;
        for ((p, g), s) in shared.values.iter_mut().zip(&grad.values).zip(&mut self.square_avg) {
            *s = self.decay * *s + (1.0 - self.decay) * g * g;
            *p -= lr * g / (*s + self.epsilon).sqrt();
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    slots: Vec<Slot>,
    total: usize,
}

const CHECKPOINT_FORMAT: &str = "acerlab-params-v1";

/// Write named parameter vectors as one checkpoint.
///
/// Layout: a single JSON manifest line listing every slot (prefixed with its
/// vector's name) with offset and length, then `total` little-endian `f64`s.
pub fn write_checkpoint<W: Write>(out: &mut W, vectors: &[(&str, &ParamVector)]) -> Result<()> {
    let mut slots = Vec::new();
    let mut offset = 0;
    for (prefix, pv) in vectors {
        for slot in &pv.layout {
            slots.push(Slot { name: format!("{prefix}/{}", slot.name), offset: offset + slot.offset, len: slot.len });
        }
        offset += pv.len();
    }
    let manifest = Manifest { format: CHECKPOINT_FORMAT.into(), slots, total: offset };
    let line = serde_json::to_string(&manifest).map_err(|e| AcerError::Config(e.to_string()))?;
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    for (_, pv) in vectors {
        for v in &pv.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a checkpoint back as a flat vector with fully qualified slot names.
pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<ParamVector> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| AcerError::InvalidArgument("checkpoint has no manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| AcerError::InvalidArgument(format!("bad checkpoint manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return invalid(format!("unsupported checkpoint format {}", manifest.format));
    }
    let body = &bytes[newline + 1..];
    if body.len() != manifest.total * 8 {
        return invalid("checkpoint body length disagrees with manifest");
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let pv = ParamVector { values, layout: manifest.slots };
    if !pv.is_valid() {
        return invalid("checkpoint layout does not tile the vector");
    }
    Ok(pv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn random_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_linear_outputs_zero() {
        let net = Approximator::linear(3, 2);
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn tabular_returns_row() {
        let mut net = Approximator::tabular(3, 2);
        net.params.values.copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(net.forward(&[0.0, 1.0, 0.0]).unwrap(), vec![3.0, 4.0]);
        assert!(net.forward(&[0.5, 0.5, 0.0]).is_err());
    }

    #[test]
    fn mlp_matches_straight_line_formula() {
        let mut r = rng();
        let net = Approximator::mlp(3, 8, 2, &mut r);
        let x = random_vec(&mut r, 3);
        let p = &net.params.values;
        // w1: 8x3 at 0, b1 at 24, w2: 2x8 at 32, b2 at 48
        let mut out = [p[48], p[49]];
        for j in 0..8 {
            let z = p[24 + j] + p[j * 3] * x[0] + p[j * 3 + 1] * x[1] + p[j * 3 + 2] * x[2];
            out[0] += p[32 + j] * z.tanh();
            out[1] += p[40 + j] * z.tanh();
        }
        let y = net.forward(&x).unwrap();
        assert!((y[0] - out[0]).abs() < 1e-14 && (y[1] - out[1]).abs() < 1e-14);
    }

    #[test]
    fn linear_jacobian_is_input_in_row() {
        let net = Approximator::linear(3, 2);
        let x = [0.3, -0.2, 0.5];
        let mut acc = ParamVector::zeros_like(&net.params);
        net.backward(&x, &[0.0, 1.0], &mut acc).unwrap();
        assert_eq!(&acc.slice("w")[3..6], &x);
        assert_eq!(&acc.slice("w")[0..3], &[0.0; 3]);
        assert_eq!(acc.slice("b"), &[0.0, 1.0]);
    }

    #[test]
    fn zero_upstream_leaves_accumulator() {
        let mut r = rng();
        let net = Approximator::mlp(2, 4, 3, &mut r);
        let mut acc = ParamVector::zeros_like(&net.params);
        acc.values[0] = 7.0;
        let before = acc.clone();
        net.backward(&[0.1, 0.2], &[0.0; 3], &mut acc).unwrap();
        assert_eq!(acc, before);
        assert_eq!(net.fd_check(&[0.1, 0.2], &[0.0; 3], 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn finite_differences_all_backends() {
        let mut r = rng();
        for _ in 0..20 {
            let mut lin = Approximator::linear(4, 3);
            lin.params.values = random_vec(&mut r, lin.params.len());
            let x = random_vec(&mut r, 4);
            let u = random_vec(&mut r, 3);
            assert!(lin.fd_check(&x, &u, 1e-5).unwrap() < 1e-10);

            let mut tab = Approximator::tabular(5, 3);
            tab.params.values = random_vec(&mut r, tab.params.len());
            let mut onehot = vec![0.0; 5];
            onehot[r.gen_range(0..5)] = 1.0;
            assert!(tab.fd_check(&onehot, &u, 1e-5).unwrap() < 1e-10);

            let mlp = Approximator::mlp(4, 8, 3, &mut r);
            assert!(mlp.fd_check(&x, &u, 1e-5).unwrap() < 1e-4);
        }
        assert!(Approximator::linear(1, 1).fd_check(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn input_gradient_matches_differences() {
        let mut r = rng();
        let net = Approximator::mlp(3, 6, 2, &mut r);
        let x = random_vec(&mut r, 3);
        let u = [0.7, -0.4];
        let g = net.input_gradient(&x, &u).unwrap();
        for i in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let f = |v: &[f64]| net.forward(v).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn sgd_examples() {
        let mut p = ParamVector::zeros(&[("a", 3)]);
        p.values = vec![1.0, 2.0, 3.0];
        let zero = ParamVector::zeros_like(&p);
        sgd_apply(&mut p, &zero, 0.5).unwrap();
        assert_eq!(p.values, vec![1.0, 2.0, 3.0]);
        let mut e1 = ParamVector::zeros_like(&p);
        e1.values[1] = 1.0;
        sgd_apply(&mut p, &e1, 1.0).unwrap();
        assert_eq!(p.values, vec![1.0, 1.0, 3.0]);
        e1.values[2] = f64::NAN;
        assert!(matches!(sgd_apply(&mut p, &e1, 1.0), Err(AcerError::NumericFault(_))));
        assert!(sgd_apply(&mut p, &zero, 0.0).is_err());
    }

    #[test]
    fn soft_update_examples() {
        let mut avg = ParamVector::zeros(&[("a", 2)]);
        let mut cur = ParamVector::zeros_like(&avg);
        cur.values = vec![1.0, -1.0];
        let mut a0 = avg.clone();
        soft_update(&mut a0, &cur, 0.0).unwrap();
        assert_eq!(a0.values, cur.values);
        let mut a1 = avg.clone();
        soft_update(&mut a1, &cur, 1.0).unwrap();
        assert_eq!(a1.values, vec![0.0, 0.0]);
        let mut prev = 2f64.sqrt();
        for _ in 0..50 {
            soft_update(&mut avg, &cur, 0.995).unwrap();
            let gap = avg.values.iter().zip(&cur.values).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            assert!((gap / prev - 0.995).abs() < 1e-9);
            prev = gap;
        }
        assert!(soft_update(&mut avg, &cur, 1.5).is_err());
    }

    #[test]
    fn clip_scales_jointly() {
        let mut a = ParamVector::zeros(&[("a", 1)]);
        let mut b = ParamVector::zeros(&[("b", 1)]);
        a.values[0] = 30.0;
        b.values[0] = 40.0;
        let norm = clip_global_norm(&mut [&mut a, &mut b], 40.0);
        assert_eq!(norm, 50.0);
        assert!((a.values[0] - 24.0).abs() < 1e-12 && (b.values[0] - 32.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng();
        let net = Approximator::mlp(2, 3, 1, &mut r);
        let lin = Approximator::linear(2, 2);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("policy", &net.params), ("critic", &lin.params)]).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), net.params.len() + lin.params.len());
        assert_eq!(back.slice("policy/w2"), net.params.slice("w2"));
        assert_eq!(back.slot("critic/b").unwrap().offset, net.params.len() + 4);
        assert!(read_checkpoint(&mut &buf[..buf.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn backward_is_additive(seed in 0u64..1000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let net = Approximator::mlp(3, 5, 2, &mut r);
            let x = random_vec(&mut r, 3);
            let u1 = random_vec(&mut r, 2);
            let u2 = random_vec(&mut r, 2);
            let sum: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a + b).collect();
            let mut joint = ParamVector::zeros_like(&net.params);
            net.backward(&x, &sum, &mut joint).unwrap();
            let mut split = ParamVector::zeros_like(&net.params);
            net.backward(&x, &u1, &mut split).unwrap();
            net.backward(&x, &u2, &mut split).unwrap();
            for (a, b) in joint.values.iter().zip(&split.values) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn soft_update_fixed_point(vals in prop::collection::vec(-5.0f64..5.0, 1..10), alpha in 0.0f64..=1.0) {
            let mut avg = ParamVector::zeros(&[("a", vals.len())]);
            avg.values = vals.clone();
            let cur = avg.clone();
            soft_update(&mut avg, &cur, alpha).unwrap();
            for (a, c) in avg.values.iter().zip(&cur.values) {
                prop_assert!((a - c).abs() <= 1e-15 * c.abs().max(1.0));
            }
        }

        #[test]
        fn sgd_is_linear(g1 in prop::collection::vec(-1.0f64..1.0, 4), g2 in prop::collection::vec(-1.0f64..1.0, 4)) {
            let base = ParamVector::zeros(&[("a", 4)]);
            let mut a = base.clone();
            let mut b = base.clone();
            let mut ga = ParamVector::zeros_like(&base);
            ga.values = g1.clone();
            let mut gb = ParamVector::zeros_like(&base);
            gb.values = g2.clone();
            sgd_apply(&mut a, &ga, 0.1).unwrap();
            sgd_apply(&mut a, &gb, 0.1).unwrap();
            let mut sum = ga.clone();
            sum.add_assign(&gb).unwrap();
            sgd_apply(&mut b, &sum, 0.1).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
