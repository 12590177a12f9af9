//! Field evaluation `μ = softplus(MLP(h(p) ⊙ m))` with a hand-written
//! reverse pass, and Beer's-law rendering of sampled rays.

use super::encoding::{check_unit, encode_into};
use super::mask::{visible_levels, MaskSchedule};
use super::params::{FieldGradients, FieldParams};
use crate::error::{Error, Result};
use crate::geometry::RaySamples;
use crate::scalar::{sigmoid, softplus, Real};

/// `y += a · x`.
#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// Encoded inputs and activations of a batch of points, point-major.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchTape<T> {
    pub visible: usize,
    /// Number of points.
    pub len: usize,
    /// Masked encoding, `L·F` per point.
    pub input: Vec<T>,
    /// `8·L` corner entries per point.
    pub corners: Vec<u32>,
    pub weights: Vec<T>,
    /// Post-ReLU hidden activations, every hidden layer of a point back to back.
    pub hidden: Vec<T>,
    /// Output pre-activations.
    pub z: Vec<T>,
}

impl<T: Real> BatchTape<T> {
    fn reset(&mut self, params: &FieldParams<T>, visible: usize, len: usize) {
        let layout = &params.layout;
        self.visible = visible;
        self.len = len;
        self.input.resize(layout.widths[0] * len, T::zero());
        self.corners.resize(layout.levels * 8 * len, 0);
        self.weights.resize(layout.levels * 8 * len, T::zero());
        self.hidden.resize(layout.hidden_len() * len, T::zero());
        self.z.resize(len, T::zero());
    }
}

#[derive(Debug, Clone, Default)]
pub struct MlpScratch<T> {
    /// Each layer's weights transposed to `[in][out]`.
    transposed: Vec<T>,
    upstream: Vec<T>,
    next: Vec<T>,
}

/// Encode `points` and run them through the MLP.
pub(crate) fn forward_batch<T: Real>(
    params: &FieldParams<T>,
    visible: usize,
    points: &[[f64; 3]],
    tape: &mut BatchTape<T>,
    scratch: &mut MlpScratch<T>,
) {
    let layout = &params.layout;
    let m = points.len();
    tape.reset(params, visible, m);
    let (width, nc) = (layout.widths[0], layout.levels * 8);
    for (s, p) in points.iter().enumerate() {
        encode_into(
            params,
            to_t(*p),
            visible,
            &mut tape.input[s * width..(s + 1) * width],
            &mut tape.corners[s * nc..(s + 1) * nc],
            &mut tape.weights[s * nc..(s + 1) * nc],
        );
    }
    mlp_forward(params, tape, scratch);
}

fn mlp_forward<T: Real>(params: &FieldParams<T>, tape: &mut BatchTape<T>, scratch: &mut MlpScratch<T>) {
    let layout = &params.layout;
    let n_layers = layout.n_layers();
    let w0 = layout.weight_offsets[0];
    let wt = &mut scratch.transposed;
    wt.resize(layout.bias_offsets[n_layers - 1] + 1 - w0, T::zero());
    for j in 0..n_layers {
        let (nin, nout) = (layout.widths[j], layout.widths[j + 1]);
        let wo = layout.weight_offsets[j];
        for o in 0..nout {
            for i in 0..nin {
                wt[wo - w0 + i * nout + o] = params.data[wo + o * nin + i];
            }
        }
    }
    let (width, hidden) = (layout.widths[0], layout.hidden_len());
    let BatchTape { input, hidden: acts, z, len, .. } = tape;
    for s in 0..*len {
        let x0 = &input[s * width..(s + 1) * width];
        let h = &mut acts[s * hidden..(s + 1) * hidden];
        let mut src_off = 0;
        let mut dst_off = 0;
        for j in 0..n_layers {
            let (nin, nout) = (layout.widths[j], layout.widths[j + 1]);
            let wt_j = &wt[layout.weight_offsets[j] - w0..layout.weight_offsets[j] - w0 + nin * nout];
            let b = &params.data[layout.bias_offsets[j]..layout.bias_offsets[j] + nout];
            if j + 1 == n_layers {
                let src = if j == 0 { x0 } else { &h[src_off..src_off + nin] };
                let mut a = b[0];
                for (x, w) in src.iter().zip(wt_j) {
                    a += *x * *w;
                }
                z[s] = a;
                break;
            }
            let (lo, hi) = h.split_at_mut(dst_off);
            let src = if j == 0 { x0 } else { &lo[src_off..src_off + nin] };
            let dst = &mut hi[..nout];
            dst.copy_from_slice(b);
            for (i, x) in src.iter().enumerate() {
                if *x != T::zero() {
                    axpy(*x, &wt_j[i * nout..(i + 1) * nout], dst);
                }
            }
            for v in dst.iter_mut() {
                *v = v.max(T::zero());
            }
            src_off = dst_off;
            dst_off += nout;
        }
    }
}

/// Reverse pass through the MLP given `∂L/∂z` per point. Weight and bias
/// gradients accumulate into `grads` (laid out like the parameters,
/// shifted down by `base`); `∂L/∂input` is left in `d_input`, point-major.
pub(crate) fn mlp_backward<T: Real>(
    params: &FieldParams<T>,
    tape: &BatchTape<T>,
    dz: &[T],
    grads: &mut [T],
    base: usize,
    d_input: &mut Vec<T>,
    scratch: &mut MlpScratch<T>,
) {
    let layout = &params.layout;
    let n_layers = layout.n_layers();
    let (width, hidden) = (layout.widths[0], layout.hidden_len());
    let m = tape.len;
    d_input.clear();
    d_input.resize(m * width, T::zero());
    let MlpScratch { upstream, next, .. } = scratch;
    for s in 0..m {
        let x0 = &tape.input[s * width..(s + 1) * width];
        let h = &tape.hidden[s * hidden..(s + 1) * hidden];
        upstream.clear();
        upstream.push(dz[s]);
        // Start of the hidden activations feeding layer j.
        let mut src_off = hidden;
        for j in (0..n_layers).rev() {
            let (nin, nout) = (layout.widths[j], layout.widths[j + 1]);
            let wo = layout.weight_offsets[j];
            let (gw, bo) = (wo - base, layout.bias_offsets[j] - base);
            // `upstream` holds ∂L/∂(pre-activation) of layer j.
            let src = if j == 0 {
                x0
            } else {
                src_off -= nin;
                &h[src_off..src_off + nin]
            };
            for (g, u) in grads[bo..bo + nout].iter_mut().zip(upstream.iter()) {
                *g += *u;
            }
            next.clear();
            next.resize(nin, T::zero());
            for (o, u) in upstream.iter().enumerate() {
                if *u == T::zero() {
                    continue;
                }
                axpy(*u, src, &mut grads[gw + o * nin..gw + (o + 1) * nin]);
                axpy(*u, &params.data[wo + o * nin..wo + (o + 1) * nin], next);
            }
            if j > 0 {
                for (d, x) in next.iter_mut().zip(src) {
                    *d = if *x > T::zero() { *d } else { T::zero() };
                }
            }
            std::mem::swap(upstream, next);
        }
        d_input[s * width..(s + 1) * width].copy_from_slice(upstream);
    }
}

/// Scatter `∂L/∂features` of every point into the touched table entries of
/// visible levels, in point order.
pub(crate) fn scatter_tables<T: Real>(params: &FieldParams<T>, tape: &BatchTape<T>, d_input: &[T], grads: &mut FieldGradients<T>) {
    let layout = &params.layout;
    let f = layout.features;
    let (width, nc) = (layout.widths[0], layout.levels * 8);
    let mut buf = [T::zero(); 16];
    let mut buf_vec = Vec::new();
    let buf: &mut [T] = if f <= buf.len() {
        &mut buf[..f]
    } else {
        buf_vec.resize(f, T::zero());
        &mut buf_vec
    };
    for s in 0..tape.len {
        for l in 0..tape.visible.min(layout.levels) {
            let d = &d_input[s * width + l * f..s * width + (l + 1) * f];
            for k in 0..8 {
                let w = tape.weights[s * nc + l * 8 + k];
                let entry = tape.corners[s * nc + l * 8 + k] as usize;
                for (b, di) in buf.iter_mut().zip(d) {
                    *b = w * *di;
                }
                grads.add_entry(entry, buf);
            }
        }
    }
}

/// Everything the reverse pass needs from one point evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTape<T> {
    pub batch: BatchTape<T>,
}

impl<T: Real> FieldTape<T> {
    /// Output pre-activation.
    pub fn z(&self) -> T {
        self.batch.z[0]
    }
}

fn to_t<T: Real>(p: [f64; 3]) -> [T; 3] {
    [T::of(p[0]), T::of(p[1]), T::of(p[2])]
}

/// `μ` at a unit-cube point under the mask for `epoch`.
pub fn field_forward<T: Real>(
    params: &FieldParams<T>,
    schedule: Option<&MaskSchedule>,
    epoch: usize,
    p: [f64; 3],
) -> Result<(T, FieldTape<T>)> {
    check_unit(p)?;
    let visible = visible_levels(schedule, params.layout.levels, epoch);
    let mut batch = BatchTape::default();
    forward_batch(params, visible, &[p], &mut batch, &mut MlpScratch::default());
    Ok((softplus(batch.z[0]), FieldTape { batch }))
}

/// Accumulate `∂L/∂θ` and `∂L/∂φ` given `∂L/∂μ` for one taped point.
pub fn field_backward<T: Real>(params: &FieldParams<T>, tape: &FieldTape<T>, d_mu: T, grads: &mut FieldGradients<T>) {
    let dz = [d_mu * sigmoid(tape.z())];
    let mut d_input = Vec::new();
    let mut scratch = MlpScratch::default();
    mlp_backward(params, &tape.batch, &dz, &mut grads.data, 0, &mut d_input, &mut scratch);
    scatter_tables(params, &tape.batch, &d_input, grads);
}

/// Taped evaluation of every sample on one ray. Buffers are reused across
/// rays, so a single tape serves a whole batch.
#[derive(Debug, Clone, Default)]
pub struct RayTape<T> {
    pub batch: BatchTape<T>,
    pub mu: Vec<T>,
    pub deltas: Vec<T>,
    pub i0: T,
    pub intensity: T,
}

/// Reusable buffers for rendering and back-propagating rays.
#[derive(Debug, Clone, Default)]
pub struct RayWorkspace<T> {
    pub tape: RayTape<T>,
    mlp: MlpScratch<T>,
    dz: Vec<T>,
    d_input: Vec<T>,
}

/// Render into `ws.tape`: `I = i0 · exp(-Σ μ_i δ_i)` over unit-cube points.
pub(crate) fn render_into<T: Real>(
    params: &FieldParams<T>,
    visible: usize,
    points: &[[f64; 3]],
    deltas: &[f64],
    i0: f64,
    ws: &mut RayWorkspace<T>,
) {
    let tape = &mut ws.tape;
    forward_batch(params, visible, points, &mut tape.batch, &mut ws.mlp);
    let m = points.len();
    tape.mu.clear();
    tape.mu.extend(tape.batch.z.iter().map(|z| softplus(*z)));
    tape.deltas.clear();
    tape.deltas.extend(deltas[..m].iter().map(|d| T::of(*d)));
    tape.i0 = T::of(i0);
    let mut optical = T::zero();
    for (mu, d) in tape.mu.iter().zip(&tape.deltas) {
        optical += *mu * *d;
    }
    tape.intensity = tape.i0 * (-optical).exp();
}

/// First half of the ray reverse pass: MLP gradients go into `mlp_grad`
/// (the parameter vector past the tables) and `∂L/∂features` is kept in
/// the workspace for [`scatter_ray`].
pub(crate) fn render_backward_mlp<T: Real>(params: &FieldParams<T>, ws: &mut RayWorkspace<T>, d_intensity: T, mlp_grad: &mut [T]) {
    let base = params.layout.table_len();
    let RayWorkspace { tape, mlp, dz, d_input } = ws;
    let scale = -d_intensity * tape.intensity;
    dz.clear();
    // dI/dμ_i = -I δ_i
    dz.extend(tape.batch.z.iter().zip(&tape.deltas).map(|(z, d)| scale * *d * sigmoid(*z)));
    mlp_backward(params, &tape.batch, dz, mlp_grad, base, d_input, mlp);
}

/// Second half of the ray reverse pass: scatter the stored feature
/// gradients into the touched table entries, in sample order.
pub(crate) fn scatter_ray<T: Real>(params: &FieldParams<T>, ws: &RayWorkspace<T>, grads: &mut FieldGradients<T>) {
    scatter_tables(params, &ws.tape.batch, &ws.d_input, grads);
}

pub(crate) fn render_backward<T: Real>(
    params: &FieldParams<T>,
    ws: &mut RayWorkspace<T>,
    d_intensity: T,
    grads: &mut FieldGradients<T>,
) {
    render_backward_mlp(params, ws, d_intensity, grads.mlp_mut());
    scatter_ray(params, ws, grads);
}

/// Render one ray whose sample points are already in unit-cube coordinates.
pub fn render_ray<T: Real>(
    params: &FieldParams<T>,
    schedule: Option<&MaskSchedule>,
    epoch: usize,
    samples: &RaySamples,
    i0: f64,
) -> Result<(T, RayTape<T>)> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    for p in &samples.points {
        check_unit(*p)?;
    }
    let visible = visible_levels(schedule, params.layout.levels, epoch);
    let mut ws = RayWorkspace::default();
    render_into(params, visible, &samples.points, &samples.deltas, i0, &mut ws);
    Ok((ws.tape.intensity, ws.tape))
}

/// Reverse pass for [`render_ray`].
pub fn render_ray_backward<T: Real>(params: &FieldParams<T>, tape: RayTape<T>, d_intensity: T, grads: &mut FieldGradients<T>) {
    let mut ws = RayWorkspace { tape, ..Default::default() };
    render_backward(params, &mut ws, d_intensity, grads);
}

/// Untaped evaluation with every level visible, for volume extraction.
#[derive(Debug, Clone)]
pub struct FieldEvaluator<'a, T> {
    params: &'a FieldParams<T>,
    tape: BatchTape<T>,
    scratch: MlpScratch<T>,
}

impl<'a, T: Real> FieldEvaluator<'a, T> {
    pub fn new(params: &'a FieldParams<T>) -> Self {
        FieldEvaluator { params, tape: BatchTape::default(), scratch: MlpScratch::default() }
    }

    pub fn mu(&mut self, p: [f64; 3]) -> T {
        let mut out = [T::zero()];
        self.mu_batch(&[p], &mut out);
        out[0]
    }

    /// `μ` at each of `points` into `out`.
    pub fn mu_batch(&mut self, points: &[[f64; 3]], out: &mut [T]) {
        let levels = self.params.layout.levels;
        forward_batch(self.params, levels, points, &mut self.tape, &mut self.scratch);
        for (o, z) in out.iter_mut().zip(&self.tape.z) {
            *o = softplus(*z);
        }
    }
}
