//! Forward and backward passes of the forecaster.
//!
//! Each frame's `16 x 5` detection block is one 80-dim token. Tokens get a
//! sinusoidal position code, pass through post-norm encoder layers
//! (self-attention, then a ReLU feed-forward, each followed by residual and
//! layer norm), are aggregated, and go through three ReLU layers, a linear
//! projection to the 16-dim latent, and a linear decoder producing `f x 4`
//! deltas.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{Aggregation, NetConfig};
use super::params::{EncoderSlots, ForecasterParams, Gradients, LinearSlots, NormSlots};
use super::positional_encoding;
use crate::error::{Error, Result};
use crate::tensor::{self, axpy, dot};
use crate::types::{DeltaTrajectory, DetectionWindow};

pub const LATENT_DIM: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentVector(pub [f64; LATENT_DIM]);

#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub prediction: DeltaTrajectory,
    pub latent: LatentVector,
}

/// Intermediates of one encoder layer kept for the backward pass.
#[derive(Clone, Debug)]
struct LayerTrace {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads x s x s` softmax outputs.
    probs: Vec<f64>,
    /// Inverted-dropout scale per attention weight, if dropout was active.
    attn_mask: Option<Vec<f64>>,
    ctx: Vec<f64>,
    attn_out_mask: Option<Vec<f64>>,
    norm1_hat: Vec<f64>,
    norm1_inv: Vec<f64>,
    y1: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_act: Vec<f64>,
    ff_out_mask: Option<Vec<f64>>,
    norm2_hat: Vec<f64>,
    norm2_inv: Vec<f64>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug)]
pub struct Trace {
    layers: Vec<LayerTrace>,
    fc_in: Vec<f64>,
    fc_pre: Vec<Vec<f64>>,
    fc_act: Vec<Vec<f64>>,
    latent: Vec<f64>,
    output: Vec<f64>,
}

impl Trace {
    /// Raw `f * 4` output values.
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn latent(&self) -> &[f64] {
        &self.latent
    }
}

fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

fn apply_mask(values: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        values.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
    }
}

fn wb_mut<'a>(values: &'a mut [f64], s: &LinearSlots) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(s.w.end, s.b.start);
    values[s.w.start..s.b.end].split_at_mut(s.w.len())
}

fn norm_mut<'a>(values: &'a mut [f64], s: &NormSlots) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(s.gamma.end, s.beta.start);
    values[s.gamma.start..s.beta.end].split_at_mut(s.gamma.len())
}

fn linear_fwd(p: &ForecasterParams, s: &LinearSlots, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len() / s.n_in * s.n_out];
    tensor::linear(x, p.slice(&s.w), p.slice(&s.b), s.n_in, s.n_out, &mut out);
    out
}

fn linear_bwd(p: &ForecasterParams, g: &mut Gradients, s: &LinearSlots, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    let (dw, db) = wb_mut(g.values_mut(), s);
    tensor::linear_backward(x, p.slice(&s.w), dy, s.n_in, s.n_out, dw, db, Some(&mut dx));
    dx
}

fn check_input(cfg: &NetConfig, input: &[f64]) -> Result<()> {
    let want = cfg.seq_len * cfg.token_dim();
    if input.len() != want {
        return Err(Error::Shape(format!(
            "input has {} values, expected {} x {} = {want}",
            input.len(),
            cfg.seq_len,
            cfg.token_dim()
        )));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite value in input window".into()));
    }
    Ok(())
}

fn encoder_layer(
    p: &ForecasterParams,
    slots: &EncoderSlots,
    x: Vec<f64>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Vec<f64>, LayerTrace) {
    let cfg = p.config();
    let (s, d, heads, dh) = (cfg.seq_len, cfg.token_dim(), cfg.n_heads, cfg.head_dim());
    let drop = cfg.dropout;
    let q = linear_fwd(p, &slots.q, &x);
    let k = linear_fwd(p, &slots.k, &x);
    let v = linear_fwd(p, &slots.v, &x);
    let scale = 1.0 / libm::sqrt(dh as f64);

    let mut probs = vec![0.0; heads * s * s];
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        for i in 0..s {
            let qi = &q[i * d..(i + 1) * d][hs.clone()];
            let row = &mut probs[(h * s + i) * s..(h * s + i + 1) * s];
            for (j, r) in row.iter_mut().enumerate() {
                *r = dot(qi, &k[j * d..(j + 1) * d][hs.clone()]) * scale;
            }
            tensor::softmax_row(row);
        }
    }
    let attn_mask = match (rng.as_deref_mut(), drop > 0.0) {
        (Some(r), true) => Some(dropout_mask(r, probs.len(), drop)),
        _ => None,
    };
    let mut ctx = vec![0.0; s * d];
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        for i in 0..s {
            let base = (h * s + i) * s;
            let ci = &mut ctx[i * d..(i + 1) * d][hs.clone()];
            for j in 0..s {
                let mut w = probs[base + j];
                if let Some(m) = &attn_mask {
                    w *= m[base + j];
                }
                if w != 0.0 {
                    axpy(w, &v[j * d..(j + 1) * d][hs.clone()], ci);
                }
            }
        }
    }
    let mut attn = linear_fwd(p, &slots.o, &ctx);
    let attn_out_mask = match (rng.as_deref_mut(), drop > 0.0) {
        (Some(r), true) => Some(dropout_mask(r, attn.len(), drop)),
        _ => None,
    };
    apply_mask(&mut attn, &attn_out_mask);
    for (a, xi) in attn.iter_mut().zip(&x) {
        *a += xi;
    }
    let eps = cfg.layer_norm_eps;
    let mut y1 = vec![0.0; s * d];
    let mut norm1_hat = vec![0.0; s * d];
    let mut norm1_inv = vec![0.0; s];
    tensor::layer_norm(
        &attn,
        p.slice(&slots.norm1.gamma),
        p.slice(&slots.norm1.beta),
        eps,
        &mut y1,
        &mut norm1_hat,
        &mut norm1_inv,
    );

    let ff_pre = linear_fwd(p, &slots.ff1, &y1);
    let ff_act: Vec<f64> = ff_pre.iter().map(|&v| v.max(0.0)).collect();
    let mut ff_out = linear_fwd(p, &slots.ff2, &ff_act);
    let ff_out_mask = match (rng.as_deref_mut(), drop > 0.0) {
        (Some(r), true) => Some(dropout_mask(r, ff_out.len(), drop)),
        _ => None,
    };
    apply_mask(&mut ff_out, &ff_out_mask);
    for (a, yi) in ff_out.iter_mut().zip(&y1) {
        *a += yi;
    }
    let mut y2 = vec![0.0; s * d];
    let mut norm2_hat = vec![0.0; s * d];
    let mut norm2_inv = vec![0.0; s];
    tensor::layer_norm(
        &ff_out,
        p.slice(&slots.norm2.gamma),
        p.slice(&slots.norm2.beta),
        eps,
        &mut y2,
        &mut norm2_hat,
        &mut norm2_inv,
    );
    let trace = LayerTrace {
        x,
        q,
        k,
        v,
        probs,
        attn_mask,
        ctx,
        attn_out_mask,
        norm1_hat,
        norm1_inv,
        y1,
        ff_pre,
        ff_act,
        ff_out_mask,
        norm2_hat,
        norm2_inv,
    };
    (y2, trace)
}

fn encoder_layer_backward(
    p: &ForecasterParams,
    g: &mut Gradients,
    slots: &EncoderSlots,
    t: &LayerTrace,
    dy2: &[f64],
) -> Vec<f64> {
    let cfg = p.config();
    let (s, d, heads, dh) = (cfg.seq_len, cfg.token_dim(), cfg.n_heads, cfg.head_dim());

    let mut dr2 = vec![0.0; s * d];
    {
        let (dgamma, dbeta) = norm_mut(g.values_mut(), &slots.norm2);
        tensor::layer_norm_backward(
            &t.norm2_hat,
            &t.norm2_inv,
            p.slice(&slots.norm2.gamma),
            dy2,
            dgamma,
            dbeta,
            &mut dr2,
        );
    }
    let mut dff_out = dr2.clone();
    apply_mask(&mut dff_out, &t.ff_out_mask);
    let mut dff = linear_bwd(p, g, &slots.ff2, &t.ff_act, &dff_out);
    for (dv, pre) in dff.iter_mut().zip(&t.ff_pre) {
        if *pre <= 0.0 {
            *dv = 0.0;
        }
    }
    let mut dy1 = linear_bwd(p, g, &slots.ff1, &t.y1, &dff);
    for (a, b) in dy1.iter_mut().zip(&dr2) {
        *a += b;
    }

    let mut dr1 = vec![0.0; s * d];
    {
        let (dgamma, dbeta) = norm_mut(g.values_mut(), &slots.norm1);
        tensor::layer_norm_backward(
            &t.norm1_hat,
            &t.norm1_inv,
            p.slice(&slots.norm1.gamma),
            &dy1,
            dgamma,
            dbeta,
            &mut dr1,
        );
    }
    let mut dattn = dr1.clone();
    apply_mask(&mut dattn, &t.attn_out_mask);
    let dctx = linear_bwd(p, g, &slots.o, &t.ctx, &dattn);

    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut dq = vec![0.0; s * d];
    let mut dk = vec![0.0; s * d];
    let mut dv = vec![0.0; s * d];
    let mut dprob = vec![0.0; s];
    let mut dscore = vec![0.0; s];
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        for i in 0..s {
            let base = (h * s + i) * s;
            let dci = &dctx[i * d..(i + 1) * d][hs.clone()];
            for j in 0..s {
                let vj = &t.v[j * d..(j + 1) * d][hs.clone()];
                let m = t.attn_mask.as_ref().map_or(1.0, |m| m[base + j]);
                let used = t.probs[base + j] * m;
                if used != 0.0 {
                    axpy(used, dci, &mut dv[j * d..(j + 1) * d][hs.clone()]);
                }
                dprob[j] = if m != 0.0 { dot(dci, vj) * m } else { 0.0 };
            }
            tensor::softmax_row_backward(&t.probs[base..base + s], &dprob, &mut dscore);
            let qi = &t.q[i * d..(i + 1) * d][hs.clone()];
            for j in 0..s {
                let ds = dscore[j] * scale;
                if ds != 0.0 {
                    axpy(ds, &t.k[j * d..(j + 1) * d][hs.clone()], &mut dq[i * d..(i + 1) * d][hs.clone()]);
                    axpy(ds, qi, &mut dk[j * d..(j + 1) * d][hs.clone()]);
                }
            }
        }
    }
    let mut dx = dr1;
    for (slot, grad) in [(&slots.q, &dq), (&slots.k, &dk), (&slots.v, &dv)] {
        let part = linear_bwd(p, g, slot, &t.x, grad);
        for (a, b) in dx.iter_mut().zip(&part) {
            *a += b;
        }
    }
    dx
}

/// Runs the network on a flattened `s x 80` input, keeping intermediates.
///
/// With `rng` set and a positive dropout probability, dropout masks are
/// sampled from it; otherwise the pass is deterministic inference.
pub fn forward_trace(params: &ForecasterParams, input: &[f64], rng: Option<&mut ChaCha8Rng>) -> Result<Trace> {
    let cfg = params.config();
    check_input(cfg, input)?;
    let (s, d) = (cfg.seq_len, cfg.token_dim());
    let layout = params.layout();

    let pe = positional_encoding(s, d)?;
    let mut x: Vec<f64> = input.iter().zip(&pe).map(|(a, b)| a + b).collect();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut rng = rng;
    for slots in &layout.layers {
        let (y, t) = encoder_layer(params, slots, x, rng.as_deref_mut());
        layers.push(t);
        x = y;
    }

    let fc_in = match cfg.aggregation {
        Aggregation::Flatten => x,
        Aggregation::MeanPool => {
            let mut pooled = vec![0.0; d];
            for row in x.chunks_exact(d) {
                axpy(1.0 / s as f64, row, &mut pooled);
            }
            pooled
        }
    };
    let mut fc_pre = Vec::with_capacity(layout.fc.len());
    let mut fc_act: Vec<Vec<f64>> = Vec::with_capacity(layout.fc.len());
    for slots in &layout.fc {
        let prev = fc_act.last().unwrap_or(&fc_in);
        let pre = linear_fwd(params, slots, prev);
        fc_act.push(pre.iter().map(|&v| v.max(0.0)).collect());
        fc_pre.push(pre);
    }
    let latent = linear_fwd(params, &layout.latent, fc_act.last().unwrap_or(&fc_in));
    let output = linear_fwd(params, &layout.decoder, &latent);
    if output.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("forward pass produced a non-finite output".into()));
    }
    Ok(Trace {
        layers,
        fc_in,
        fc_pre,
        fc_act,
        latent,
        output,
    })
}

/// Accumulates the parameter gradients of `<upstream, output>` into `grads`.
pub fn backward_trace(params: &ForecasterParams, trace: &Trace, upstream: &[f64], grads: &mut Gradients) -> Result<()> {
    let cfg = params.config();
    if upstream.len() != cfg.output_dim() {
        return Err(Error::Shape(format!(
            "upstream gradient has {} values, expected {}",
            upstream.len(),
            cfg.output_dim()
        )));
    }
    if grads.layout() != params.layout() {
        return Err(Error::Shape("gradient buffer layout differs from parameters".into()));
    }
    let layout = params.layout();
    let (s, d) = (cfg.seq_len, cfg.token_dim());

    let dlatent = linear_bwd(params, grads, &layout.decoder, &trace.latent, upstream);
    let last_act = trace.fc_act.last().unwrap_or(&trace.fc_in);
    let mut dact = linear_bwd(params, grads, &layout.latent, last_act, &dlatent);
    for i in (0..layout.fc.len()).rev() {
        for (g, pre) in dact.iter_mut().zip(&trace.fc_pre[i]) {
            if *pre <= 0.0 {
                *g = 0.0;
            }
        }
        let input = if i == 0 { &trace.fc_in } else { &trace.fc_act[i - 1] };
        dact = linear_bwd(params, grads, &layout.fc[i], input, &dact);
    }
    let mut dy = match cfg.aggregation {
        Aggregation::Flatten => dact,
        Aggregation::MeanPool => {
            let mut full = vec![0.0; s * d];
            for row in full.chunks_exact_mut(d) {
                axpy(1.0 / s as f64, &dact, row);
            }
            full
        }
    };
    for (slots, t) in layout.layers.iter().zip(&trace.layers).rev() {
        dy = encoder_layer_backward(params, grads, slots, t, &dy);
    }
    Ok(())
}

fn window_input(params: &ForecasterParams, window: &DetectionWindow, use_anatomy: bool) -> Result<Vec<f64>> {
    let cfg = params.config();
    if window.len() != cfg.seq_len {
        return Err(Error::Shape(format!(
            "window has {} frames, model expects {}",
            window.len(),
            cfg.seq_len
        )));
    }
    Ok(window.to_tensor(use_anatomy))
}

fn to_forecast(trace: &Trace) -> Result<Forecast> {
    let mut z = [0.0; LATENT_DIM];
    z.copy_from_slice(&trace.latent);
    Ok(Forecast {
        prediction: DeltaTrajectory::from_prediction(&trace.output)?,
        latent: LatentVector(z),
    })
}

/// Inference on a window with all detections visible.
pub fn forward(params: &ForecasterParams, window: &DetectionWindow) -> Result<Forecast> {
    forward_masked(params, window, true)
}

/// Inference; with `use_anatomy == false` the anatomy rows are zeroed
/// before tokenization.
pub fn forward_masked(params: &ForecasterParams, window: &DetectionWindow, use_anatomy: bool) -> Result<Forecast> {
    let input = window_input(params, window, use_anatomy)?;
    to_forecast(&forward_trace(params, &input, None)?)
}

/// Parameter gradients of `<upstream, prediction>` at `window`.
pub fn backward(params: &ForecasterParams, window: &DetectionWindow, upstream: &[f64]) -> Result<Gradients> {
    backward_masked(params, window, true, upstream)
}

pub fn backward_masked(
    params: &ForecasterParams,
    window: &DetectionWindow,
    use_anatomy: bool,
    upstream: &[f64],
) -> Result<Gradients> {
    let input = window_input(params, window, use_anatomy)?;
    let trace = forward_trace(params, &input, None)?;
    let mut grads = params.zeros_like();
    backward_trace(params, &trace, upstream, &mut grads)?;
    Ok(grads)
}
