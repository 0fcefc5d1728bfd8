//! The trainable epsilon-predictor: a dilated-convolution residual network
//! with gated activations, conditioned on the observed signal, the mask and
//! the pulse-prior rows, plus a sinusoidal diffusion-step embedding.
//!
//! Parameters live in one flat vector with a layout table mapping named
//! tensors to slices, which keeps the optimizer, checkpointing and the
//! finite-difference tests independent of the architecture internals.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// How the pulse prior is fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PriorMode {
    /// Prior rows are stacked as extra input channels.
    Input,
    /// No prior conditioning (ablation baseline).
    None,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct DenoiserConfig {
    pub residual_blocks: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Dilations cycle through 1, 2, 4, ... within `dilation_cycle` blocks.
    pub dilation_cycle: usize,
    pub step_embed_dim: usize,
    /// Number of prior rows (K) stacked as input channels.
    pub prior_channels: usize,
    pub prior_mode: PriorMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            residual_blocks: 4,
            channels: 32,
            kernel: 3,
            dilation_cycle: 4,
            step_embed_dim: 64,
            prior_channels: 16,
            prior_mode: PriorMode::Input,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.residual_blocks == 0
            || self.channels == 0
            || self.kernel == 0
            || self.dilation_cycle == 0
            || self.step_embed_dim == 0
        {
            return Err(Error::InvalidParameter(
                "denoiser dimensions must all be positive".into(),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidParameter("kernel size must be odd".into()));
        }
        if self.step_embed_dim % 2 != 0 {
            return Err(Error::InvalidParameter(
                "step_embed_dim must be even".into(),
            ));
        }
        if self.prior_mode == PriorMode::Input && self.prior_channels == 0 {
            return Err(Error::InvalidParameter(
                "prior_mode=input requires prior_channels >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Channels of the stacked input: noisy signal, observed values and mask,
    /// plus the prior rows when conditioning is enabled.
    pub fn in_channels(&self) -> usize {
        3 + match self.prior_mode {
            PriorMode::Input => self.prior_channels,
            PriorMode::None => 0,
        }
    }

    pub fn dilation(&self, block: usize) -> usize {
        1 << (block % self.dilation_cycle)
    }
}

/// A named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Fan-in used for uniform initialisation.
    fn fan_in(&self) -> usize {
        if self.dims.len() >= 2 {
            self.dims[1..].iter().product()
        } else {
            1
        }
    }
}

/// Ordered table of tensors covering the parameter vector exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl ParamLayout {
    pub fn for_config(cfg: &DenoiserConfig) -> Self {
        let c = cfg.channels;
        let e = cfg.step_embed_dim;
        let k = cfg.kernel;
        let in_ch = cfg.in_channels();

        let mut tensors = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, dims: Vec<usize>| {
            let len: usize = dims.iter().product();
            tensors.push(TensorInfo { name, dims, offset });
            offset += len;
        };

        push("input.weight".into(), vec![c, in_ch]);
        push("input.bias".into(), vec![c]);
        push("step_mlp1.weight".into(), vec![e, e]);
        push("step_mlp1.bias".into(), vec![e]);
        push("step_mlp2.weight".into(), vec![e, e]);
        push("step_mlp2.bias".into(), vec![e]);
        for b in 0..cfg.residual_blocks {
            push(format!("block{b}.step.weight"), vec![c, e]);
            push(format!("block{b}.step.bias"), vec![c]);
            push(format!("block{b}.conv.weight"), vec![2 * c, c, k]);
            push(format!("block{b}.conv.bias"), vec![2 * c]);
            push(format!("block{b}.res.weight"), vec![c, c]);
            push(format!("block{b}.res.bias"), vec![c]);
            push(format!("block{b}.skip.weight"), vec![c, c]);
            push(format!("block{b}.skip.bias"), vec![c]);
        }
        push("out1.weight".into(), vec![c, c]);
        push("out1.bias".into(), vec![c]);
        push("out2.weight".into(), vec![1, c]);
        push("out2.bias".into(), vec![1]);

        ParamLayout {
            tensors,
            total: offset,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn find(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn slice<'a, F>(&self, theta: &'a [F], name: &str) -> &'a [F] {
        let info = self.find(name).expect("tensor name in layout");
        &theta[info.range()]
    }
}

/// The flat parameter vector with its layout and configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<F> {
    config: DenoiserConfig,
    layout: ParamLayout,
    theta: Vec<F>,
}

impl<F: Float> DenoiserParams<F> {
    /// All-zero parameters (the network output is identically zero).
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::for_config(&config);
        let theta = vec![F::zero(); layout.total()];
        Ok(Self {
            config,
            layout,
            theta,
        })
    }

    /// Uniform `(-1/sqrt(fan_in), +1/sqrt(fan_in))` initialisation for every
    /// tensor, except the output head which starts at zero so the initial
    /// prediction is identically zero.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::for_config(&config);
        let mut theta = vec![F::zero(); layout.total()];
        let mut stream = rng::stream(seed, "denoiser.init");
        for info in layout.tensors() {
            if info.name.starts_with("out2.") {
                continue;
            }
            let bound = 1.0 / (info.fan_in() as f64).sqrt();
            for v in &mut theta[info.range()] {
                *v = F::from(stream.random_range(-bound..bound)).unwrap();
            }
        }
        Ok(Self {
            config,
            layout,
            theta,
        })
    }

    /// Wraps an existing parameter vector; its length must match the layout.
    pub fn from_theta(config: DenoiserConfig, theta: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::for_config(&config);
        if theta.len() != layout.total() {
            return Err(Error::ShapeMismatch(format!(
                "parameter vector: expected {} values, got {}",
                layout.total(),
                theta.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            theta,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn theta(&self) -> &[F] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [F] {
        &mut self.theta
    }

    pub fn tensor(&self, name: &str) -> &[F] {
        self.layout.slice(&self.theta, name)
    }

    /// Converts the parameters to another float width (used by the
    /// float64 gradient checks).
    pub fn convert<G: Float>(&self) -> DenoiserParams<G> {
        DenoiserParams {
            config: self.config,
            layout: self.layout.clone(),
            theta: self
                .theta
                .iter()
                .map(|&v| G::from(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

/// Conditioning inputs: observed values (zero-filled at missing positions),
/// the observation mask, and the prior rows (`K x L`, row-major; ignored when
/// the configuration disables prior conditioning).
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a, F> {
    pub observed: &'a [F],
    pub mask: &'a [F],
    pub prior_rows: &'a [F],
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    len: usize,
    input: Vec<F>,
    embed_input: Vec<F>,
    embed_z1: Vec<F>,
    embed_a1: Vec<F>,
    embed_z2: Vec<F>,
    embed_a2: Vec<F>,
    h0: Vec<F>,
    blocks: Vec<BlockCache<F>>,
    skip_scaled: Vec<F>,
    out_a1: Vec<F>,
}

#[derive(Debug, Clone)]
struct BlockCache<F> {
    conv_in: Vec<F>,
    gate_tanh: Vec<F>,
    gate_sigmoid: Vec<F>,
    gated: Vec<F>,
}

fn sigmoid<F: Float>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

fn swish<F: Float>(z: F) -> F {
    z * sigmoid(z)
}

fn swish_grad<F: Float>(z: F) -> F {
    let s = sigmoid(z);
    s * (F::one() + z * (F::one() - s))
}

/// Transformer-style sinusoidal embedding of the integer diffusion step.
fn step_embedding<F: Float>(t: usize, dim: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(dim);
    let half = dim / 2;
    for j in 0..half {
        let freq = 10000f64.powf(-(j as f64) / half as f64);
        let angle = t as f64 * freq;
        out.push(F::from(angle.sin()).unwrap());
        out.push(F::from(angle.cos()).unwrap());
    }
    out
}

fn dense_forward<F: Float>(w: &[F], b: &[F], x: &[F], out_dim: usize, in_dim: usize) -> Vec<F> {
    let mut y = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o];
        for (wv, xv) in row.iter().zip(x) {
            acc = acc + *wv * *xv;
        }
        y.push(acc);
    }
    y
}

fn conv1x1_forward<F: Float>(
    w: &[F],
    b: &[F],
    x: &[F],
    in_c: usize,
    out_c: usize,
    len: usize,
    y: &mut [F],
) {
    for o in 0..out_c {
        let y_row = &mut y[o * len..(o + 1) * len];
        for v in y_row.iter_mut() {
            *v = b[o];
        }
        for i in 0..in_c {
            let weight = w[o * in_c + i];
            let x_row = &x[i * len..(i + 1) * len];
            for (yv, &xv) in y_row.iter_mut().zip(x_row) {
                *yv = *yv + weight * xv;
            }
        }
    }
}

/// Destination/source sample ranges for one tap offset under zero padding.
fn shifted_ranges(len: usize, off: isize) -> Option<(core::ops::Range<usize>, core::ops::Range<usize>)> {
    let start = if off < 0 { (-off) as usize } else { 0 };
    let end = if off > 0 {
        len.saturating_sub(off as usize)
    } else {
        len
    };
    if start >= end {
        return None;
    }
    let src_start = (start as isize + off) as usize;
    let src_end = (end as isize + off) as usize;
    Some((start..end, src_start..src_end))
}

#[allow(clippy::too_many_arguments)]
fn dilated_conv_forward<F: Float>(
    w: &[F],
    b: &[F],
    x: &[F],
    in_c: usize,
    out_c: usize,
    len: usize,
    taps: usize,
    dilation: usize,
    y: &mut [F],
) {
    let center = (taps / 2) as isize;
    for o in 0..out_c {
        let y_row = &mut y[o * len..(o + 1) * len];
        for v in y_row.iter_mut() {
            *v = b[o];
        }
        for i in 0..in_c {
            let x_row = &x[i * len..(i + 1) * len];
            for k in 0..taps {
                let weight = w[(o * in_c + i) * taps + k];
                let off = (k as isize - center) * dilation as isize;
                if let Some((dst, src)) = shifted_ranges(len, off) {
                    for (yv, &xv) in y_row[dst].iter_mut().zip(&x_row[src]) {
                        *yv = *yv + weight * xv;
                    }
                }
            }
        }
    }
}

fn assemble_input<F: Float>(
    cfg: &DenoiserConfig,
    x_t: &[F],
    cond: &Conditioning<'_, F>,
) -> Result<Vec<F>> {
    let len = x_t.len();
    let check = |name: &'static str, got: usize, expected: usize| -> Result<()> {
        if got != expected {
            return Err(Error::LengthMismatch {
                context: name,
                expected,
                got,
            });
        }
        Ok(())
    };
    check("observed vs x_t", cond.observed.len(), len)?;
    check("mask vs x_t", cond.mask.len(), len)?;
    let in_ch = cfg.in_channels();
    let mut input = Vec::with_capacity(in_ch * len);
    input.extend_from_slice(x_t);
    input.extend_from_slice(cond.observed);
    input.extend_from_slice(cond.mask);
    if cfg.prior_mode == PriorMode::Input {
        if cond.prior_rows.len() != cfg.prior_channels * len {
            return Err(Error::ShapeMismatch(format!(
                "prior rows: expected {} x {len} samples, got {}",
                cfg.prior_channels,
                cond.prior_rows.len()
            )));
        }
        input.extend_from_slice(cond.prior_rows);
    }
    Ok(input)
}

/// Predicted noise for `x_t` at step `t` under the given conditioning.
pub fn denoiser_forward<F: Float>(
    params: &DenoiserParams<F>,
    x_t: &[F],
    t: usize,
    cond: &Conditioning<'_, F>,
) -> Result<Vec<F>> {
    denoiser_forward_with_cache(params, x_t, t, cond).map(|(y, _)| y)
}

/// Forward pass that also returns the activations needed by
/// [`denoiser_backward`].
pub fn denoiser_forward_with_cache<F: Float>(
    params: &DenoiserParams<F>,
    x_t: &[F],
    t: usize,
    cond: &Conditioning<'_, F>,
) -> Result<(Vec<F>, ForwardCache<F>)> {
    let cfg = params.config;
    let len = x_t.len();
    if len == 0 {
        return Err(Error::InvalidParameter("empty input".into()));
    }
    let input = assemble_input(&cfg, x_t, cond)?;
    let c = cfg.channels;
    let e = cfg.step_embed_dim;
    let in_ch = cfg.in_channels();
    let nb = cfg.residual_blocks;

    // Diffusion-step embedding through the shared two-layer MLP.
    let embed_input = step_embedding::<F>(t, e);
    let embed_z1 = dense_forward(
        params.tensor("step_mlp1.weight"),
        params.tensor("step_mlp1.bias"),
        &embed_input,
        e,
        e,
    );
    let embed_a1: Vec<F> = embed_z1.iter().map(|&z| swish(z)).collect();
    let embed_z2 = dense_forward(
        params.tensor("step_mlp2.weight"),
        params.tensor("step_mlp2.bias"),
        &embed_a1,
        e,
        e,
    );
    let embed_a2: Vec<F> = embed_z2.iter().map(|&z| swish(z)).collect();

    // Input projection with ReLU.
    let mut h0 = vec![F::zero(); c * len];
    conv1x1_forward(
        params.tensor("input.weight"),
        params.tensor("input.bias"),
        &input,
        in_ch,
        c,
        len,
        &mut h0,
    );
    for v in &mut h0 {
        if *v < F::zero() {
            *v = F::zero();
        }
    }

    let inv_sqrt2 = F::from(core::f64::consts::FRAC_1_SQRT_2).unwrap();
    let mut h = h0.clone();
    let mut skip_sum = vec![F::zero(); c * len];
    let mut blocks = Vec::with_capacity(nb);

    for b in 0..nb {
        let step_c = dense_forward(
            params.tensor(&format!("block{b}.step.weight")),
            params.tensor(&format!("block{b}.step.bias")),
            &embed_a2,
            c,
            e,
        );
        // Broadcast-add the projected step embedding.
        let mut conv_in = h.clone();
        for ch in 0..c {
            let add = step_c[ch];
            for v in &mut conv_in[ch * len..(ch + 1) * len] {
                *v = *v + add;
            }
        }

        let mut pre_gate = vec![F::zero(); 2 * c * len];
        dilated_conv_forward(
            params.tensor(&format!("block{b}.conv.weight")),
            params.tensor(&format!("block{b}.conv.bias")),
            &conv_in,
            c,
            2 * c,
            len,
            cfg.kernel,
            cfg.dilation(b),
            &mut pre_gate,
        );
        let mut gate_tanh = Vec::with_capacity(c * len);
        let mut gate_sigmoid = Vec::with_capacity(c * len);
        for &z in &pre_gate[..c * len] {
            gate_tanh.push(z.tanh());
        }
        for &z in &pre_gate[c * len..] {
            gate_sigmoid.push(sigmoid(z));
        }
        let gated: Vec<F> = gate_tanh
            .iter()
            .zip(&gate_sigmoid)
            .map(|(&a, &s)| a * s)
            .collect();

        let mut res = vec![F::zero(); c * len];
        conv1x1_forward(
            params.tensor(&format!("block{b}.res.weight")),
            params.tensor(&format!("block{b}.res.bias")),
            &gated,
            c,
            c,
            len,
            &mut res,
        );
        let mut skip = vec![F::zero(); c * len];
        conv1x1_forward(
            params.tensor(&format!("block{b}.skip.weight")),
            params.tensor(&format!("block{b}.skip.bias")),
            &gated,
            c,
            c,
            len,
            &mut skip,
        );

        for (hv, rv) in h.iter_mut().zip(&res) {
            *hv = (*hv + *rv) * inv_sqrt2;
        }
        for (sv, nv) in skip_sum.iter_mut().zip(&skip) {
            *sv = *sv + *nv;
        }
        blocks.push(BlockCache {
            conv_in,
            gate_tanh,
            gate_sigmoid,
            gated,
        });
    }

    let skip_scale = F::from(1.0 / (nb as f64).sqrt()).unwrap();
    let skip_scaled: Vec<F> = skip_sum.iter().map(|&v| v * skip_scale).collect();

    let mut out_z1 = vec![F::zero(); c * len];
    conv1x1_forward(
        params.tensor("out1.weight"),
        params.tensor("out1.bias"),
        &skip_scaled,
        c,
        c,
        len,
        &mut out_z1,
    );
    let out_a1: Vec<F> = out_z1
        .iter()
        .map(|&z| if z > F::zero() { z } else { F::zero() })
        .collect();

    let mut output = vec![F::zero(); len];
    conv1x1_forward(
        params.tensor("out2.weight"),
        params.tensor("out2.bias"),
        &out_a1,
        c,
        1,
        len,
        &mut output,
    );

    let cache = ForwardCache {
        len,
        input,
        embed_input,
        embed_z1,
        embed_a1,
        embed_z2,
        embed_a2,
        h0,
        blocks,
        skip_scaled,
        out_a1,
    };
    Ok((output, cache))
}

fn conv1x1_backward<F: Float>(
    w: &[F],
    x: &[F],
    dy: &[F],
    in_c: usize,
    out_c: usize,
    len: usize,
    dw: &mut [F],
    db: &mut [F],
    dx: Option<&mut [F]>,
) {
    for o in 0..out_c {
        let dy_row = &dy[o * len..(o + 1) * len];
        let mut bias_acc = F::zero();
        for &v in dy_row {
            bias_acc = bias_acc + v;
        }
        db[o] = db[o] + bias_acc;
        for i in 0..in_c {
            let x_row = &x[i * len..(i + 1) * len];
            let mut acc = F::zero();
            for (&dv, &xv) in dy_row.iter().zip(x_row) {
                acc = acc + dv * xv;
            }
            dw[o * in_c + i] = dw[o * in_c + i] + acc;
        }
    }
    if let Some(dx) = dx {
        for i in 0..in_c {
            let dx_row = &mut dx[i * len..(i + 1) * len];
            for o in 0..out_c {
                let weight = w[o * in_c + i];
                let dy_row = &dy[o * len..(o + 1) * len];
                for (dv, &gy) in dx_row.iter_mut().zip(dy_row) {
                    *dv = *dv + weight * gy;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn dilated_conv_backward<F: Float>(
    w: &[F],
    x: &[F],
    dy: &[F],
    in_c: usize,
    out_c: usize,
    len: usize,
    taps: usize,
    dilation: usize,
    dw: &mut [F],
    db: &mut [F],
    dx: &mut [F],
) {
    let center = (taps / 2) as isize;
    for o in 0..out_c {
        let dy_row = &dy[o * len..(o + 1) * len];
        let mut bias_acc = F::zero();
        for &v in dy_row {
            bias_acc = bias_acc + v;
        }
        db[o] = db[o] + bias_acc;
        for i in 0..in_c {
            let x_row = &x[i * len..(i + 1) * len];
            let dx_row = &mut dx[i * len..(i + 1) * len];
            for k in 0..taps {
                let off = (k as isize - center) * dilation as isize;
                if let Some((dst, src)) = shifted_ranges(len, off) {
                    let weight = w[(o * in_c + i) * taps + k];
                    let mut acc = F::zero();
                    for (&gy, &xv) in dy_row[dst.clone()].iter().zip(&x_row[src.clone()]) {
                        acc = acc + gy * xv;
                    }
                    dw[(o * in_c + i) * taps + k] = dw[(o * in_c + i) * taps + k] + acc;
                    for (dxv, &gy) in dx_row[src].iter_mut().zip(&dy_row[dst]) {
                        *dxv = *dxv + weight * gy;
                    }
                }
            }
        }
    }
}

/// Gradient of a scalar loss with respect to every parameter, given the
/// gradient of that loss with respect to the network output.
pub fn denoiser_backward<F: Float>(
    params: &DenoiserParams<F>,
    cache: &ForwardCache<F>,
    grad_output: &[F],
) -> Vec<F> {
    let cfg = params.config;
    let len = cache.len;
    let c = cfg.channels;
    let e = cfg.step_embed_dim;
    let in_ch = cfg.in_channels();
    let nb = cfg.residual_blocks;
    assert_eq!(grad_output.len(), len, "grad_output length");

    let layout = params.layout();
    let mut grads = vec![F::zero(); layout.total()];
    // Split helper: tensors are non-overlapping, so index ranges are safe to
    // write through raw offsets.
    macro_rules! grad_slice {
        ($name:expr) => {{
            let info = layout.find($name).expect("tensor in layout");
            info.range()
        }};
    }

    // Output head.
    let mut d_out_a1 = vec![F::zero(); c * len];
    {
        let r_w = grad_slice!("out2.weight");
        let r_b = grad_slice!("out2.bias");
        let (mut dw, mut db) = (vec![F::zero(); c], vec![F::zero(); 1]);
        conv1x1_backward(
            params.tensor("out2.weight"),
            &cache.out_a1,
            grad_output,
            c,
            1,
            len,
            &mut dw,
            &mut db,
            Some(&mut d_out_a1),
        );
        grads[r_w].copy_from_slice(&dw);
        grads[r_b].copy_from_slice(&db);
    }

    // ReLU before the last 1x1.
    for (dv, &a) in d_out_a1.iter_mut().zip(&cache.out_a1) {
        if a <= F::zero() {
            *dv = F::zero();
        }
    }

    let mut d_skip_scaled = vec![F::zero(); c * len];
    {
        let r_w = grad_slice!("out1.weight");
        let r_b = grad_slice!("out1.bias");
        let (mut dw, mut db) = (vec![F::zero(); c * c], vec![F::zero(); c]);
        conv1x1_backward(
            params.tensor("out1.weight"),
            &cache.skip_scaled,
            &d_out_a1,
            c,
            c,
            len,
            &mut dw,
            &mut db,
            Some(&mut d_skip_scaled),
        );
        grads[r_w].copy_from_slice(&dw);
        grads[r_b].copy_from_slice(&db);
    }

    let skip_scale = F::from(1.0 / (nb as f64).sqrt()).unwrap();
    let d_skip_sum: Vec<F> = d_skip_scaled.iter().map(|&v| v * skip_scale).collect();

    let inv_sqrt2 = F::from(core::f64::consts::FRAC_1_SQRT_2).unwrap();
    let mut d_h = vec![F::zero(); c * len]; // gradient wrt the running h after the last block
    let mut d_embed_a2 = vec![F::zero(); e];

    for b in (0..nb).rev() {
        let block = &cache.blocks[b];

        // h_out = (h_in + res) / sqrt(2)
        let mut d_res = vec![F::zero(); c * len];
        for (dr, dh) in d_res.iter_mut().zip(&d_h) {
            *dr = *dh * inv_sqrt2;
        }
        let mut d_h_in: Vec<F> = d_res.clone();

        // res and skip projections back to the gated activations.
        let mut d_gated = vec![F::zero(); c * len];
        {
            let r_w = grad_slice!(&format!("block{b}.res.weight"));
            let r_b = grad_slice!(&format!("block{b}.res.bias"));
            let (mut dw, mut db) = (vec![F::zero(); c * c], vec![F::zero(); c]);
            conv1x1_backward(
                params.tensor(&format!("block{b}.res.weight")),
                &block.gated,
                &d_res,
                c,
                c,
                len,
                &mut dw,
                &mut db,
                Some(&mut d_gated),
            );
            grads[r_w].copy_from_slice(&dw);
            grads[r_b].copy_from_slice(&db);
        }
        {
            let r_w = grad_slice!(&format!("block{b}.skip.weight"));
            let r_b = grad_slice!(&format!("block{b}.skip.bias"));
            let (mut dw, mut db) = (vec![F::zero(); c * c], vec![F::zero(); c]);
            conv1x1_backward(
                params.tensor(&format!("block{b}.skip.weight")),
                &block.gated,
                &d_skip_sum,
                c,
                c,
                len,
                &mut dw,
                &mut db,
                Some(&mut d_gated),
            );
            grads[r_w].copy_from_slice(&dw);
            grads[r_b].copy_from_slice(&db);
        }

        // Gated activation: g = tanh(v_t) * sigmoid(v_s).
        let mut d_pre_gate = vec![F::zero(); 2 * c * len];
        for idx in 0..c * len {
            let gt = block.gate_tanh[idx];
            let gs = block.gate_sigmoid[idx];
            let dg = d_gated[idx];
            d_pre_gate[idx] = dg * gs * (F::one() - gt * gt);
            d_pre_gate[c * len + idx] = dg * gt * gs * (F::one() - gs);
        }

        // Dilated convolution.
        let mut d_conv_in = vec![F::zero(); c * len];
        {
            let r_w = grad_slice!(&format!("block{b}.conv.weight"));
            let r_b = grad_slice!(&format!("block{b}.conv.bias"));
            let (mut dw, mut db) = (
                vec![F::zero(); 2 * c * c * cfg.kernel],
                vec![F::zero(); 2 * c],
            );
            dilated_conv_backward(
                params.tensor(&format!("block{b}.conv.weight")),
                &block.conv_in,
                &d_pre_gate,
                c,
                2 * c,
                len,
                cfg.kernel,
                cfg.dilation(b),
                &mut dw,
                &mut db,
                &mut d_conv_in,
            );
            grads[r_w].copy_from_slice(&dw);
            grads[r_b].copy_from_slice(&db);
        }

        // conv_in = h_in + broadcast(step_c)
        for (dh, dc) in d_h_in.iter_mut().zip(&d_conv_in) {
            *dh = *dh + *dc;
        }
        let mut d_step_c = vec![F::zero(); c];
        for ch in 0..c {
            let mut acc = F::zero();
            for &v in &d_conv_in[ch * len..(ch + 1) * len] {
                acc = acc + v;
            }
            d_step_c[ch] = acc;
        }
        {
            // Dense step projection: step_c = W * embed_a2 + b.
            let r_w = grad_slice!(&format!("block{b}.step.weight"));
            let r_b = grad_slice!(&format!("block{b}.step.bias"));
            let w = params.tensor(&format!("block{b}.step.weight"));
            for ch in 0..c {
                let g = d_step_c[ch];
                grads[r_b.clone()][ch] = grads[r_b.clone()][ch] + g;
                for j in 0..e {
                    grads[r_w.clone()][ch * e + j] =
                        grads[r_w.clone()][ch * e + j] + g * cache.embed_a2[j];
                    d_embed_a2[j] = d_embed_a2[j] + w[ch * e + j] * g;
                }
            }
        }

        d_h = d_h_in;
    }

    // Input projection ReLU.
    let mut d_h0 = d_h;
    for (dv, &h) in d_h0.iter_mut().zip(&cache.h0) {
        if h <= F::zero() {
            *dv = F::zero();
        }
    }
    {
        let r_w = grad_slice!("input.weight");
        let r_b = grad_slice!("input.bias");
        let (mut dw, mut db) = (vec![F::zero(); c * in_ch], vec![F::zero(); c]);
        conv1x1_backward(
            params.tensor("input.weight"),
            &cache.input,
            &d_h0,
            in_ch,
            c,
            len,
            &mut dw,
            &mut db,
            None,
        );
        grads[r_w].copy_from_slice(&dw);
        grads[r_b].copy_from_slice(&db);
    }

    // Shared embedding MLP: a2 = swish(z2), z2 = W2 a1 + b2, a1 = swish(z1).
    let mut d_z2 = vec![F::zero(); e];
    for j in 0..e {
        d_z2[j] = d_embed_a2[j] * swish_grad(cache.embed_z2[j]);
    }
    let mut d_embed_a1 = vec![F::zero(); e];
    {
        let r_w = grad_slice!("step_mlp2.weight");
        let r_b = grad_slice!("step_mlp2.bias");
        let w = params.tensor("step_mlp2.weight");
        for o in 0..e {
            grads[r_b.clone()][o] = grads[r_b.clone()][o] + d_z2[o];
            for j in 0..e {
                grads[r_w.clone()][o * e + j] =
                    grads[r_w.clone()][o * e + j] + d_z2[o] * cache.embed_a1[j];
                d_embed_a1[j] = d_embed_a1[j] + w[o * e + j] * d_z2[o];
            }
        }
    }
    let mut d_z1 = vec![F::zero(); e];
    for j in 0..e {
        d_z1[j] = d_embed_a1[j] * swish_grad(cache.embed_z1[j]);
    }
    {
        let r_w = grad_slice!("step_mlp1.weight");
        let r_b = grad_slice!("step_mlp1.bias");
        for o in 0..e {
            grads[r_b.clone()][o] = grads[r_b.clone()][o] + d_z1[o];
            for j in 0..e {
                grads[r_w.clone()][o * e + j] =
                    grads[r_w.clone()][o * e + j] + d_z1[o] * cache.embed_input[j];
            }
        }
    }

    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            residual_blocks: 2,
            channels: 4,
            kernel: 3,
            dilation_cycle: 2,
            step_embed_dim: 8,
            prior_channels: 1,
            prior_mode: PriorMode::Input,
        }
    }

    fn conditioning_buffers(len: usize, k: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut stream = rng::stream(seed, "test.cond");
        let observed: Vec<f64> = (0..len).map(|_| stream.random_range(-1.0..1.0)).collect();
        let mask: Vec<f64> = (0..len)
            .map(|i| if i % 3 == 0 { 0.0 } else { 1.0 })
            .collect();
        let prior: Vec<f64> = (0..k * len).map(|_| stream.random_range(-1.0..1.0)).collect();
        (observed, mask, prior)
    }

    /// Init with the zero output head replaced by random weights, so tests
    /// exercise a network whose output actually depends on every tensor.
    fn random_params(cfg: DenoiserConfig, seed: u64) -> DenoiserParams<f64> {
        let mut params = DenoiserParams::<f64>::init(cfg, seed).unwrap();
        let mut stream = rng::stream(seed, "test.out_head");
        for name in ["out2.weight", "out2.bias"] {
            let range = params.layout().find(name).unwrap().range();
            for v in &mut params.theta_mut()[range] {
                *v = stream.random_range(-0.5..0.5);
            }
        }
        params
    }

    #[test]
    fn layout_covers_theta_exactly_once() {
        let layout = ParamLayout::for_config(&DenoiserConfig::default());
        let mut covered = 0usize;
        for info in layout.tensors() {
            assert_eq!(info.offset, covered, "layout gap before {}", info.name);
            covered += info.len();
        }
        assert_eq!(covered, layout.total());
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let cfg = small_config();
        let params = DenoiserParams::<f64>::zeros(cfg).unwrap();
        let len = 20;
        let (observed, mask, prior) = conditioning_buffers(len, 1, 0);
        let x_t = vec![0.3f64; len];
        let cond = Conditioning {
            observed: &observed,
            mask: &mask,
            prior_rows: &prior,
        };
        let y = denoiser_forward(&params, &x_t, 3, &cond).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_length_matches_input_for_odd_and_even_lengths() {
        let cfg = small_config();
        let params = DenoiserParams::<f64>::init(cfg, 1).unwrap();
        for len in [37usize, 64, 1000] {
            let (observed, mask, prior) = conditioning_buffers(len, 1, 1);
            let x_t = vec![0.1f64; len];
            let cond = Conditioning {
                observed: &observed,
                mask: &mask,
                prior_rows: &prior,
            };
            let y = denoiser_forward(&params, &x_t, 5, &cond).unwrap();
            assert_eq!(y.len(), len);
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn forward_rejects_mismatched_conditioning() {
        let cfg = small_config();
        let params = DenoiserParams::<f64>::init(cfg, 1).unwrap();
        let (observed, mask, prior) = conditioning_buffers(16, 1, 2);
        let cond = Conditioning {
            observed: &observed[..8],
            mask: &mask,
            prior_rows: &prior,
        };
        assert!(denoiser_forward(&params, &vec![0.0; 16], 1, &cond).is_err());
        let cond = Conditioning {
            observed: &observed,
            mask: &mask,
            prior_rows: &prior[..8],
        };
        assert!(denoiser_forward(&params, &vec![0.0; 16], 1, &cond).is_err());
    }

    #[test]
    fn prior_conditioning_matters_only_in_input_mode() {
        let len = 24;
        let (observed, mask, prior) = conditioning_buffers(len, 1, 3);
        let mut other_prior = prior.clone();
        other_prior[5] += 1.0;
        let x_t = vec![0.2f64; len];

        let with_prior = random_params(small_config(), 4);
        let cond_a = Conditioning {
            observed: &observed,
            mask: &mask,
            prior_rows: &prior,
        };
        let cond_b = Conditioning {
            observed: &observed,
            mask: &mask,
            prior_rows: &other_prior,
        };
        let ya = denoiser_forward(&with_prior, &x_t, 2, &cond_a).unwrap();
        let yb = denoiser_forward(&with_prior, &x_t, 2, &cond_b).unwrap();
        assert_ne!(ya, yb, "input-mode network ignored its prior");

        let no_prior_cfg = DenoiserConfig {
            prior_mode: PriorMode::None,
            ..small_config()
        };
        let without_prior = random_params(no_prior_cfg, 4);
        let ya = denoiser_forward(&without_prior, &x_t, 2, &cond_a).unwrap();
        let yb = denoiser_forward(&without_prior, &x_t, 2, &cond_b).unwrap();
        assert_eq!(ya, yb, "prior-free network depends on the prior argument");
    }

    #[test]
    fn initial_prediction_is_zero_but_parameters_are_not() {
        let cfg = small_config();
        let params = DenoiserParams::<f64>::init(cfg, 9).unwrap();
        assert!(params.theta().iter().any(|&v| v != 0.0));
        assert!(params.tensor("out2.weight").iter().all(|&v| v == 0.0));
        let len = 12;
        let (observed, mask, prior) = conditioning_buffers(len, 1, 9);
        let cond = Conditioning {
            observed: &observed,
            mask: &mask,
            prior_rows: &prior,
        };
        let y = denoiser_forward(&params, &vec![0.5; len], 1, &cond).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    /// Central finite differences on the mean-squared output, float64.
    fn finite_difference_check(cfg: DenoiserConfig, len: usize, tolerance: f64) {
        let params = DenoiserParams::<f64>::init(cfg, 42).unwrap();
        let k = cfg.prior_channels;
        let (observed, mask, prior) = conditioning_buffers(len, k, 7);
        let mut stream = rng::stream(13, "test.xt");
        let x_t: Vec<f64> = (0..len).map(|_| stream.random_range(-1.0..1.0)).collect();
        let cond = Conditioning {
            observed: &observed,
            mask: &mask,
            prior_rows: &prior,
        };
        let t = 3;

        let loss_of = |p: &DenoiserParams<f64>| -> f64 {
            let y = denoiser_forward(p, &x_t, t, &cond).unwrap();
            y.iter().map(|&v| v * v).sum::<f64>() / len as f64
        };

        let (y, cache) = denoiser_forward_with_cache(&params, &x_t, t, &cond).unwrap();
        let grad_out: Vec<f64> = y.iter().map(|&v| 2.0 * v / len as f64).collect();
        let analytic = denoiser_backward(&params, &cache, &grad_out);

        let mut perturbed = params.clone();
        for info in params.layout().tensors().to_vec() {
            for idx in info.range() {
                let original = perturbed.theta()[idx];
                let h = 6e-6 * original.abs().max(1.0);
                perturbed.theta_mut()[idx] = original + h;
                let plus = loss_of(&perturbed);
                perturbed.theta_mut()[idx] = original - h;
                let minus = loss_of(&perturbed);
                perturbed.theta_mut()[idx] = original;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic[idx];
                let denom = a.abs().max(numeric.abs());
                if denom < 1e-10 {
                    continue;
                }
                let rel = (a - numeric).abs() / denom;
                assert!(
                    rel < tolerance,
                    "{}[{}]: analytic {a}, numeric {numeric}, rel {rel}",
                    info.name,
                    idx - info.offset
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_a_small_network() {
        finite_difference_check(small_config(), 16, 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_without_prior_conditioning() {
        let cfg = DenoiserConfig {
            prior_mode: PriorMode::None,
            ..small_config()
        };
        finite_difference_check(cfg, 12, 1e-4);
    }

    #[test]
    fn config_validation_rejects_degenerate_setups() {
        let bad = DenoiserConfig {
            kernel: 2,
            ..DenoiserConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DenoiserConfig {
            channels: 0,
            ..DenoiserConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DenoiserConfig {
            prior_channels: 0,
            prior_mode: PriorMode::Input,
            ..DenoiserConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn from_theta_validates_the_parameter_count() {
        let cfg = small_config();
        let layout = ParamLayout::for_config(&cfg);
        assert!(DenoiserParams::from_theta(cfg, vec![0.0f32; layout.total()]).is_ok());
        assert!(DenoiserParams::from_theta(cfg, vec![0.0f32; layout.total() - 1]).is_err());
    }
}
