//! Fully connected drift network `b(s, x_s, window)` with exact reverse-mode
//! derivatives.
//!
//! Inputs are the normalised interpolant state, a sinusoidal embedding of
//! `s`, and one learned `embed_dim`-wide projection per conditioning state of
//! per-coordinate features `[u, sin(2^i u), cos(2^i u)]`. Hidden layers use
//! SiLU; the output layer is linear and rescaled per coordinate.
//!
//! Parameters live in one flat vector. Layout, in order: for each
//! conditioning slot the projection matrix (`embed_dim × D(1 + embed_dim)`,
//! row-major) and bias, then every dense layer's matrix (`out × in`) and
//! bias.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::linalg::{matmul_a_b, matmul_a_bt, matmul_at_b};
use crate::par::map_chunks;
use crate::state::StateVector;

/// Rows per parallel work unit. Fixed so reductions do not depend on the
/// number of threads.
const ROW_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    /// No nonlinearity; only useful for analytic checks.
    Identity,
}

impl Activation {
    pub fn id(self) -> u8 {
        match self {
            Activation::Silu => 0,
            Activation::Identity => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Activation::Silu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + libm::exp(-z)),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let sig = 1.0 / (1.0 + libm::exp(-z));
                sig * (1.0 + z * (1.0 - sig))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Shape of a drift network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub state_dim: usize,
    pub cond_len: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Width of each embedding; must be even.
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.state_dim == 0 {
            return bad("state_dim must be >= 1");
        }
        if self.cond_len == 0 {
            return bad("cond_len must be >= 1");
        }
        if !self.embed_dim.is_multiple_of(2) {
            return bad("embed_dim must be even");
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return bad("hidden_width must be >= 1");
        }
        Ok(())
    }

    /// Width of the first dense layer's input.
    pub fn input_width(&self) -> usize {
        self.state_dim + self.embed_dim * (1 + self.cond_len)
    }

    /// Per-coordinate feature count of a conditioning state.
    pub fn cond_feature_width(&self) -> usize {
        self.state_dim * (1 + self.embed_dim)
    }

    /// Layer widths from network input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(core::iter::repeat_n(self.hidden_width, self.hidden_layers));
        w.push(self.state_dim);
        w
    }

    pub fn dense_layers(&self) -> usize {
        self.hidden_layers + 1
    }

    fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut proj = Vec::with_capacity(self.cond_len);
        let fw = self.cond_feature_width();
        for _ in 0..self.cond_len {
            let w = offset..offset + self.embed_dim * fw;
            offset = w.end;
            let b = offset..offset + self.embed_dim;
            offset = b.end;
            proj.push((w, b));
        }
        let widths = self.widths();
        let mut dense = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = offset..offset + fan_in * fan_out;
            offset = w.end;
            let b = offset..offset + fan_out;
            offset = b.end;
            dense.push(DenseSlot { fan_in, fan_out, w, b });
        }
        Layout {
            proj,
            dense,
            total: offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone)]
struct DenseSlot {
    fan_in: usize,
    fan_out: usize,
    w: Range<usize>,
    b: Range<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    proj: Vec<(Range<usize>, Range<usize>)>,
    dense: Vec<DenseSlot>,
    total: usize,
}

/// Fixed affine maps around the network: inputs are standardised with
/// `(x - shift) / scale` and raw outputs are multiplied by `out_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub out_scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
            out_scale: vec![1.0; dim],
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        ensure_len(self.shift.len(), dim, "normalizer shift")?;
        ensure_len(self.scale.len(), dim, "normalizer scale")?;
        ensure_len(self.out_scale.len(), dim, "normalizer out_scale")?;
        ensure_finite(&self.shift, "normalizer")?;
        ensure_finite(&self.scale, "normalizer")?;
        ensure_finite(&self.out_scale, "normalizer")?;
        if self.scale.iter().chain(&self.out_scale).any(|v| *v <= 0.0) {
            return Err(Error::InvalidConfig("normalizer scales must be positive".into()));
        }
        Ok(())
    }
}

/// Learned drift `b(s, x_s, x_{k-L+1..k})`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDrift {
    arch: Architecture,
    norm: Normalizer,
    params: Vec<f64>,
}

/// Gradient with respect to every network parameter, in the flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub values: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            values: vec![0.0; arch.param_count()],
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.values.iter().map(|v| v * v).sum())
    }
}

/// Inputs for a batch of `rows` evaluations, stored row-major.
#[derive(Debug, Clone, Copy)]
pub struct BatchInput<'a> {
    /// One interpolation time per row.
    pub s: &'a [f64],
    /// `rows × D`.
    pub x_s: &'a [f64],
    /// `rows × L × D`, oldest state first.
    pub cond: &'a [f64],
}

impl BatchInput<'_> {
    pub fn rows(&self) -> usize {
        self.s.len()
    }

    fn chunk(&self, r: Range<usize>, d: usize, l: usize) -> BatchInput<'_> {
        BatchInput {
            s: &self.s[r.clone()],
            x_s: &self.x_s[r.start * d..r.end * d],
            cond: &self.cond[r.start * l * d..r.end * l * d],
        }
    }
}

/// Activations saved by a forward pass over one chunk of rows.
#[derive(Debug, Clone)]
struct ChunkTape {
    rows: Range<usize>,
    /// `rows × L × D(1+E)`.
    cond_features: Vec<f64>,
    /// Input to each dense layer, `h[0]` is the assembled network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
}

/// Saved forward state for a whole batch, consumed by the VJP methods.
#[derive(Debug, Clone)]
pub struct Tape {
    chunks: Vec<ChunkTape>,
    rows: usize,
}

impl Tape {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

fn embed_time(s: f64, out: &mut [f64]) {
    for i in 0..out.len() / 2 {
        let w = (1u64 << i) as f64 * PI;
        out[2 * i] = libm::sin(w * s);
        out[2 * i + 1] = libm::cos(w * s);
    }
}

fn coordinate_features(u: f64, out: &mut [f64]) {
    out[0] = u;
    for i in 0..(out.len() - 1) / 2 {
        let w = (1u64 << i) as f64;
        out[1 + 2 * i] = libm::sin(w * u);
        out[2 + 2 * i] = libm::cos(w * u);
    }
}

impl MlpDrift {
    /// Fan-in uniform initialisation; the output layer starts at zero so the
    /// initial drift vanishes everywhere.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, norm: Normalizer, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        norm.validate(arch.state_dim)?;
        let layout = arch.layout();
        let mut params = vec![0.0; layout.total];
        let fw = arch.cond_feature_width();
        for (w, _) in &layout.proj {
            let bound = 1.0 / libm::sqrt(fw as f64);
            for p in &mut params[w.clone()] {
                *p = (2.0 * rng.random::<f64>() - 1.0) * bound;
            }
        }
        let last = layout.dense.len() - 1;
        for (i, slot) in layout.dense.iter().enumerate() {
            if i == last {
                continue;
            }
            let bound = 1.0 / libm::sqrt(slot.fan_in as f64);
            for p in &mut params[slot.w.clone()] {
                *p = (2.0 * rng.random::<f64>() - 1.0) * bound;
            }
        }
        Ok(Self { arch, norm, params })
    }

    pub fn from_parts(arch: Architecture, norm: Normalizer, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        norm.validate(arch.state_dim)?;
        ensure_len(params.len(), arch.param_count(), "parameter vector")?;
        ensure_finite(&params, "network parameters")?;
        Ok(Self { arch, norm, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Dense layer `index` as `(weights out×in, bias)`.
    pub fn dense_layer(&self, index: usize) -> (&[f64], &[f64]) {
        let slot = &self.arch.layout().dense[index];
        (&self.params[slot.w.clone()], &self.params[slot.b.clone()])
    }

    pub fn dense_layer_mut(&mut self, index: usize) -> (&mut [f64], &mut [f64]) {
        let slot = self.arch.layout().dense[index].clone();
        let (head, tail) = self.params.split_at_mut(slot.b.start);
        (&mut head[slot.w], &mut tail[..slot.b.len()])
    }

    /// Errors with `ShapeMismatch` unless the network was built for `arch`.
    pub fn check_compatible(&self, arch: &Architecture) -> Result<()> {
        if &self.arch == arch {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(alloc::format!(
                "model built for {:?}, expected {:?}",
                self.arch,
                arch
            )))
        }
    }

    fn check_batch(&self, input: &BatchInput<'_>) -> Result<()> {
        let (d, l) = (self.arch.state_dim, self.arch.cond_len);
        let rows = input.rows();
        ensure_len(input.x_s.len(), rows * d, "network input x_s")?;
        ensure_len(input.cond.len(), rows * l * d, "network conditioning window")?;
        if let Some(&s) = input.s.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::TimeOutOfRange(s));
        }
        ensure_finite(input.x_s, "network input x_s")?;
        ensure_finite(input.cond, "network conditioning window")
    }

    fn forward_chunk(&self, layout: &Layout, input: BatchInput<'_>, rows: Range<usize>) -> (Vec<f64>, ChunkTape) {
        let a = &self.arch;
        let (d, l, e) = (a.state_dim, a.cond_len, a.embed_dim);
        let m = rows.len();
        let fw = a.cond_feature_width();
        let width0 = a.input_width();

        let mut cond_features = vec![0.0; m * l * fw];
        for r in 0..m {
            for j in 0..l {
                for c in 0..d {
                    let u = (input.cond[(r * l + j) * d + c] - self.norm.shift[c]) / self.norm.scale[c];
                    let at = (r * l + j) * fw + c * (1 + e);
                    coordinate_features(u, &mut cond_features[at..at + 1 + e]);
                }
            }
        }

        let mut h0 = vec![0.0; m * width0];
        for r in 0..m {
            let row = &mut h0[r * width0..(r + 1) * width0];
            let x = &input.x_s[r * d..(r + 1) * d];
            for (c, v) in row[..d].iter_mut().enumerate() {
                *v = (x[c] - self.norm.shift[c]) / self.norm.scale[c];
            }
            embed_time(input.s[r], &mut row[d..d + e]);
        }
        if e > 0 {
            let mut proj = vec![0.0; m * e];
            for (j, (w, b)) in layout.proj.iter().enumerate() {
                // Gather this slot's features into a contiguous block.
                let mut feats = vec![0.0; m * fw];
                for r in 0..m {
                    feats[r * fw..(r + 1) * fw].copy_from_slice(&cond_features[(r * l + j) * fw..(r * l + j + 1) * fw]);
                }
                matmul_a_bt(m, fw, e, &feats, &self.params[w.clone()], 0.0, &mut proj);
                let bias = &self.params[b.clone()];
                for r in 0..m {
                    let dst = r * width0 + d + e + j * e;
                    for t in 0..e {
                        h0[dst + t] = proj[r * e + t] + bias[t];
                    }
                }
            }
        }

        let n_dense = layout.dense.len();
        let mut inputs = Vec::with_capacity(n_dense);
        let mut pre = Vec::with_capacity(n_dense - 1);
        inputs.push(h0);
        let mut out = Vec::new();
        for (i, slot) in layout.dense.iter().enumerate() {
            let mut z = vec![0.0; m * slot.fan_out];
            let bias = &self.params[slot.b.clone()];
            for r in 0..m {
                z[r * slot.fan_out..(r + 1) * slot.fan_out].copy_from_slice(bias);
            }
            matmul_a_bt(
                m,
                slot.fan_in,
                slot.fan_out,
                &inputs[i],
                &self.params[slot.w.clone()],
                1.0,
                &mut z,
            );
            if i + 1 < n_dense {
                let act: Vec<f64> = z.iter().map(|&v| a.activation.apply(v)).collect();
                pre.push(z);
                inputs.push(act);
            } else {
                for r in 0..m {
                    for c in 0..d {
                        z[r * d + c] *= self.norm.out_scale[c];
                    }
                }
                out = z;
            }
        }
        (
            out,
            ChunkTape {
                rows,
                cond_features,
                inputs,
                pre,
            },
        )
    }

    /// Reverse pass over one chunk. Returns parameter gradients and/or the
    /// gradient with respect to `x_s`.
    fn backward_chunk(
        &self,
        layout: &Layout,
        tape: &ChunkTape,
        cotangent: &[f64],
        want_params: bool,
        want_input: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let a = &self.arch;
        let (d, l, e) = (a.state_dim, a.cond_len, a.embed_dim);
        let m = tape.rows.len();
        let fw = a.cond_feature_width();
        let width0 = a.input_width();
        let mut grads = want_params.then(|| vec![0.0; layout.total]);

        let need_input_grad = want_input || (want_params && e > 0);
        let mut g: Vec<f64> = (0..m * d).map(|i| cotangent[i] * self.norm.out_scale[i % d]).collect();
        for (i, slot) in layout.dense.iter().enumerate().rev() {
            if let Some(gr) = grads.as_mut() {
                matmul_at_b(
                    m,
                    slot.fan_out,
                    slot.fan_in,
                    &g,
                    &tape.inputs[i],
                    0.0,
                    &mut gr[slot.w.clone()],
                );
                let gb = &mut gr[slot.b.clone()];
                for r in 0..m {
                    for (t, v) in gb.iter_mut().enumerate() {
                        *v += g[r * slot.fan_out + t];
                    }
                }
            }
            if i == 0 && !need_input_grad {
                return (grads, None);
            }
            let mut gin = vec![0.0; m * slot.fan_in];
            matmul_a_b(
                m,
                slot.fan_out,
                slot.fan_in,
                &g,
                &self.params[slot.w.clone()],
                0.0,
                &mut gin,
            );
            if i > 0 {
                for (v, &z) in gin.iter_mut().zip(&tape.pre[i - 1]) {
                    *v *= a.activation.derivative(z);
                }
            }
            g = gin;
        }
        debug_assert_eq!(g.len(), m * width0);

        if let Some(gr) = grads.as_mut() {
            if e > 0 {
                for (j, (w, b)) in layout.proj.iter().enumerate() {
                    let mut gp = vec![0.0; m * e];
                    let mut feats = vec![0.0; m * fw];
                    for r in 0..m {
                        gp[r * e..(r + 1) * e]
                            .copy_from_slice(&g[r * width0 + d + e + j * e..r * width0 + d + e + (j + 1) * e]);
                        feats[r * fw..(r + 1) * fw]
                            .copy_from_slice(&tape.cond_features[(r * l + j) * fw..(r * l + j + 1) * fw]);
                    }
                    matmul_at_b(m, e, fw, &gp, &feats, 0.0, &mut gr[w.clone()]);
                    let gb = &mut gr[b.clone()];
                    for r in 0..m {
                        for t in 0..e {
                            gb[t] += gp[r * e + t];
                        }
                    }
                }
            }
        }
        let dx = want_input.then(|| {
            let mut dx = vec![0.0; m * d];
            for r in 0..m {
                for c in 0..d {
                    dx[r * d + c] = g[r * width0 + c] / self.norm.scale[c];
                }
            }
            dx
        });
        (grads, dx)
    }

    /// Batched forward pass; returns `rows × D` drifts and the saved tape.
    pub fn forward_batch_taped(&self, input: BatchInput<'_>) -> Result<(Vec<f64>, Tape)> {
        self.check_batch(&input)?;
        let layout = self.arch.layout();
        let (d, l) = (self.arch.state_dim, self.arch.cond_len);
        let parts = map_chunks(input.rows(), ROW_CHUNK, |r| {
            self.forward_chunk(&layout, input.chunk(r.clone(), d, l), r)
        });
        let mut out = Vec::with_capacity(input.rows() * d);
        let mut chunks = Vec::with_capacity(parts.len());
        for (o, t) in parts {
            out.extend_from_slice(&o);
            chunks.push(t);
        }
        ensure_finite(&out, "network output")?;
        Ok((
            out,
            Tape {
                chunks,
                rows: input.rows(),
            },
        ))
    }

    pub fn forward_batch(&self, input: BatchInput<'_>) -> Result<Vec<f64>> {
        self.forward_batch_taped(input).map(|(o, _)| o)
    }

    /// Gradient of `sum_rows <cotangent_row, output_row>` with respect to the
    /// parameters, reduced over chunks in index order.
    pub fn vjp_params_taped(&self, tape: &Tape, cotangent: &[f64]) -> Result<ParamGrads> {
        ensure_len(cotangent.len(), tape.rows * self.arch.state_dim, "cotangent")?;
        ensure_finite(cotangent, "cotangent")?;
        let layout = self.arch.layout();
        let d = self.arch.state_dim;
        let parts = map_chunks(tape.chunks.len(), 1, |c| {
            let ch = &tape.chunks[c.start];
            self.backward_chunk(&layout, ch, &cotangent[ch.rows.start * d..ch.rows.end * d], true, false)
                .0
                .unwrap()
        });
        let mut total = ParamGrads::zeros(&self.arch);
        for p in parts {
            for (a, b) in total.values.iter_mut().zip(&p) {
                *a += b;
            }
        }
        Ok(total)
    }

    /// Row-wise gradient of `<cotangent_row, output_row>` with respect to `x_s`.
    pub fn vjp_input_taped(&self, tape: &Tape, cotangent: &[f64]) -> Result<Vec<f64>> {
        let d = self.arch.state_dim;
        ensure_len(cotangent.len(), tape.rows * d, "cotangent")?;
        ensure_finite(cotangent, "cotangent")?;
        let layout = self.arch.layout();
        let parts = map_chunks(tape.chunks.len(), 1, |c| {
            let ch = &tape.chunks[c.start];
            self.backward_chunk(&layout, ch, &cotangent[ch.rows.start * d..ch.rows.end * d], false, true)
                .1
                .unwrap()
        });
        Ok(parts.concat())
    }

    fn single_input<'a>(&self, s: &'a [f64; 1], x_s: &'a [f64], cond: &'a [f64]) -> BatchInput<'a> {
        BatchInput { s, x_s, cond }
    }

    fn flatten_cond(&self, cond: &[StateVector]) -> Result<Vec<f64>> {
        ensure_len(cond.len(), self.arch.cond_len, "conditioning window length")?;
        let mut flat = Vec::with_capacity(cond.len() * self.arch.state_dim);
        for c in cond {
            ensure_len(c.dim(), self.arch.state_dim, "conditioning state")?;
            flat.extend_from_slice(c);
        }
        Ok(flat)
    }

    pub fn forward(&self, s: f64, x_s: &StateVector, cond: &[StateVector]) -> Result<StateVector> {
        ensure_len(x_s.dim(), self.arch.state_dim, "network input x_s")?;
        let flat = self.flatten_cond(cond)?;
        let out = self.forward_batch(self.single_input(&[s], x_s, &flat))?;
        StateVector::from_computed(out, "network output")
    }

    pub fn vjp_params(&self, s: f64, x_s: &StateVector, cond: &[StateVector], cotangent: &[f64]) -> Result<ParamGrads> {
        ensure_len(x_s.dim(), self.arch.state_dim, "network input x_s")?;
        let flat = self.flatten_cond(cond)?;
        let (_, tape) = self.forward_batch_taped(self.single_input(&[s], x_s, &flat))?;
        self.vjp_params_taped(&tape, cotangent)
    }

    pub fn vjp_input(&self, s: f64, x_s: &StateVector, cond: &[StateVector], cotangent: &[f64]) -> Result<StateVector> {
        ensure_len(x_s.dim(), self.arch.state_dim, "network input x_s")?;
        let flat = self.flatten_cond(cond)?;
        let (_, tape) = self.forward_batch_taped(self.single_input(&[s], x_s, &flat))?;
        StateVector::from_computed(self.vjp_input_taped(&tape, cotangent)?, "input gradient")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_standard_normal, RngStream};

    fn arch(d: usize, l: usize, layers: usize, width: usize, e: usize) -> Architecture {
        Architecture {
            state_dim: d,
            cond_len: l,
            hidden_layers: layers,
            hidden_width: width,
            embed_dim: e,
            activation: Activation::Silu,
        }
    }

    fn randomized(a: Architecture, seed: u64) -> MlpDrift {
        let mut rng = RngStream::new(seed).rng();
        let mut m = MlpDrift::init(a, Normalizer::identity(a.state_dim), &mut rng).unwrap();
        let n = m.params.len();
        let mut noise = vec![0.0; n];
        fill_standard_normal(&mut rng, &mut noise);
        for (p, z) in m.params.iter_mut().zip(noise) {
            *p += 0.3 * z;
        }
        m
    }

    fn sv(v: &[f64]) -> StateVector {
        StateVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_output_layer_gives_zero_drift() {
        let a = arch(3, 1, 2, 16, 4);
        let m = MlpDrift::init(a, Normalizer::identity(3), &mut RngStream::new(1).rng()).unwrap();
        for s in [0.0, 0.3, 1.0] {
            let out = m.forward(s, &sv(&[1.0, -4.0, 20.0]), &[sv(&[0.5, 0.5, 0.5])]).unwrap();
            assert_eq!(out.as_slice(), &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = randomized(arch(3, 2, 2, 8, 4), 3);
        let cond = [sv(&[0.1, 0.2, 0.3]), sv(&[0.3, -0.2, 1.0])];
        let a = m.forward(0.4, &sv(&[1.0, 2.0, 3.0]), &cond).unwrap();
        let b = m.forward(0.4, &sv(&[1.0, 2.0, 3.0]), &cond).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_toy_network_is_affine() {
        // No hidden layers, identity activation, D = 1, embed_dim = 2.
        let a = Architecture {
            activation: Activation::Identity,
            ..arch(1, 1, 0, 0, 2)
        };
        assert_eq!(a.input_width(), 1 + 2 + 2);
        let mut m = MlpDrift::init(a, Normalizer::identity(1), &mut RngStream::new(1).rng()).unwrap();
        {
            let (w, b) = m.dense_layer_mut(0);
            w.copy_from_slice(&[2.0, 0.5, -1.0, 0.0, 0.0]);
            b[0] = 0.25;
        }
        let (s, x) = (0.25_f64, 1.5_f64);
        let expected = 2.0 * x + 0.5 * (PI * s).sin() - (PI * s).cos() + 0.25;
        let out = m.forward(s, &sv(&[x]), &[sv(&[7.0])]).unwrap();
        assert!((out[0] - expected).abs() < 1e-14, "{} vs {expected}", out[0]);
    }

    #[test]
    fn batch_and_single_evaluations_agree() {
        let m = randomized(arch(2, 1, 2, 8, 2), 5);
        let rows = 300;
        let mut rng = RngStream::new(9).rng();
        let mut xs = vec![0.0; rows * 2];
        let mut cond = vec![0.0; rows * 2];
        fill_standard_normal(&mut rng, &mut xs);
        fill_standard_normal(&mut rng, &mut cond);
        let s: Vec<f64> = (0..rows).map(|i| i as f64 / rows as f64).collect();
        let out = m
            .forward_batch(BatchInput {
                s: &s,
                x_s: &xs,
                cond: &cond,
            })
            .unwrap();
        for r in [0, 127, 128, 299] {
            let single = m
                .forward(s[r], &sv(&xs[2 * r..2 * r + 2]), &[sv(&cond[2 * r..2 * r + 2])])
                .unwrap();
            assert_eq!(single.as_slice(), &out[2 * r..2 * r + 2]);
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let m = randomized(arch(3, 1, 2, 8, 4), 2);
        let x = sv(&[0.3, -0.1, 0.9]);
        let cond = [sv(&[1.0, 0.0, -1.0])];
        let g = m.vjp_params(0.5, &x, &cond, &[0.0; 3]).unwrap();
        assert!(g.values.iter().all(|v| *v == 0.0));
        let gi = m.vjp_input(0.5, &x, &cond, &[0.0; 3]).unwrap();
        assert!(gi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn disconnected_state_input_has_zero_gradient() {
        let a = arch(3, 1, 2, 8, 4);
        let mut m = randomized(a, 4);
        {
            let (w, _) = m.dense_layer_mut(0);
            let width0 = a.input_width();
            for row in w.chunks_mut(width0) {
                row[..3].fill(0.0);
            }
        }
        let gi = m
            .vjp_input(0.6, &sv(&[0.3, -0.1, 0.9]), &[sv(&[1.0, 0.0, -1.0])], &[1.0, -2.0, 0.5])
            .unwrap();
        assert!(gi.iter().all(|v| *v == 0.0), "{gi:?}");
    }

    #[test]
    fn vjp_is_linear_in_cotangent() {
        let m = randomized(arch(3, 2, 2, 8, 4), 8);
        let x = sv(&[0.3, -0.1, 0.9]);
        let cond = [sv(&[1.0, 0.0, -1.0]), sv(&[0.5, 0.2, -0.4])];
        let c1 = [0.7, -1.3, 0.2];
        let c2 = [-0.4, 0.8, 1.9];
        let c12: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| a + b).collect();
        let g1 = m.vjp_params(0.3, &x, &cond, &c1).unwrap();
        let g2 = m.vjp_params(0.3, &x, &cond, &c2).unwrap();
        let g12 = m.vjp_params(0.3, &x, &cond, &c12).unwrap();
        for i in 0..g1.values.len() {
            assert!((g1.values[i] + g2.values[i] - g12.values[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes_and_times() {
        let m = randomized(arch(3, 1, 1, 4, 2), 1);
        assert!(m.forward(0.5, &sv(&[1.0, 2.0]), &[sv(&[1.0, 2.0, 3.0])]).is_err());
        assert!(m.forward(0.5, &sv(&[1.0, 2.0, 3.0]), &[]).is_err());
        assert!(matches!(
            m.forward(1.5, &sv(&[1.0, 2.0, 3.0]), &[sv(&[1.0, 2.0, 3.0])]),
            Err(Error::TimeOutOfRange(_))
        ));
        assert!(m
            .vjp_input(0.5, &sv(&[1.0, 2.0, 3.0]), &[sv(&[1.0, 2.0, 3.0])], &[1.0])
            .is_err());
    }

    #[test]
    fn outputs_stay_finite_on_large_inputs() {
        let m = randomized(arch(3, 1, 3, 32, 4), 11);
        let out = m
            .forward(0.7, &sv(&[1e3, -1e3, 1e3]), &[sv(&[-1e3, 1e3, -1e3])])
            .unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }
}
