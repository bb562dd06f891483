//! Small dense-network engine and the symmetric manifold network.
//!
//! The SMN holds one encoder per constellation point (2 -> 4 tanh -> 1) and a
//! single decoder (1 -> 4 tanh -> 2) shared by every branch. The decoder emits
//! polar coordinates of the fading value, `rho = sigmoid(o0)` and
//! `phi = o1`, which are turned into Cartesian form and then rotated/scaled
//! by the fixed matrix `T_k` built from constellation point `k`. Every curve
//! is therefore a rigid rotation-scaling of one base curve.
//!
//! Parameters are addressed through a flat vector whose layout is: encoders
//! in label order, then the decoder; inside an MLP, layers in order; inside a
//! layer, weights row-major (`out x in`) followed by biases.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::PosteriorMatrix;
use crate::error::{Error, Result};
use crate::link::Constellation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Linear => 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Parse(format!("unknown activation '{other}'"))),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    inputs: usize,
    outputs: usize,
    /// Row-major, `outputs x inputs`.
    weights: Vec<f64>,
    biases: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        DenseLayer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
            activation,
        }
    }

    /// Weights and biases i.i.d. `N(0, std^2)`.
    pub fn gaussian<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("finite non-negative std");
        let mut layer = Self::zeros(inputs, outputs, activation);
        for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
            *w = normal.sample(rng);
        }
        layer
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, out_o) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let z = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.biases[o];
            *out_o = self.activation.apply(z);
        }
    }
}

/// A feed-forward stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

/// Per-layer activations from a forward pass; `acts[0]` is the input.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    back: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Gradient with respect to the network input after [`Mlp::backward`].
    pub fn input_grad(&self) -> &[f64] {
        &self.delta
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::Contract(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        Ok(Mlp { layers })
    }

    /// Gaussian-initialised stack over `widths` (input first), with
    /// `hidden` activation on all but the last layer.
    pub fn gaussian<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n { output } else { hidden };
                DenseLayer::gaussian(widths[l], widths[l + 1], act, std, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    pub fn forward<'t>(&self, x: &[f64], trace: &'t mut Trace) -> &'t [f64] {
        let n = self.layers.len() + 1;
        trace.acts.resize_with(n, Vec::new);
        trace.acts[0].clear();
        trace.acts[0].extend_from_slice(x);
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = trace.acts.split_at_mut(l + 1);
            let out = &mut tail[0];
            out.resize(layer.outputs, 0.0);
            layer.forward_into(&head[l], out);
        }
        &trace.acts[n - 1]
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut trace = Trace::default();
        self.forward(x, &mut trace).to_vec()
    }

    /// Accumulates `d loss / d params` into `grad` (this MLP's slice of the
    /// flat layout) given `d loss / d output`. Leaves `d loss / d input` in
    /// [`Trace::input_grad`].
    pub fn backward(&self, trace: &mut Trace, grad_out: &[f64], grad: &mut [f64]) {
        let last = self.layers.len();
        trace.delta.clear();
        trace.delta.extend(
            grad_out
                .iter()
                .zip(&trace.acts[last])
                .map(|(g, &y)| g * self.layers[last - 1].activation.derivative_at_output(y)),
        );
        let mut offset = grad.len();
        for l in (0..last).rev() {
            let layer = &self.layers[l];
            offset -= layer.num_params();
            let (gw, gb) = grad[offset..offset + layer.num_params()].split_at_mut(layer.weights.len());
            let input = &trace.acts[l];
            trace.back.clear();
            trace.back.resize(layer.inputs, 0.0);
            for (o, &d) in trace.delta.iter().enumerate() {
                gb[o] += d;
                let row = o * layer.inputs;
                for i in 0..layer.inputs {
                    gw[row + i] += d * input[i];
                    trace.back[i] += layer.weights[row + i] * d;
                }
            }
            if l > 0 {
                let act = self.layers[l - 1].activation;
                for (b, &y) in trace.back.iter_mut().zip(input) {
                    *b *= act.derivative_at_output(y);
                }
            }
            std::mem::swap(&mut trace.delta, &mut trace.back);
        }
    }

    /// Flat parameters: per layer, weights row-major then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.write_params(&mut out);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        self.read_params(params);
        Ok(())
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.biases);
        }
    }

    fn read_params(&mut self, params: &[f64]) -> usize {
        let mut at = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = layer.biases.len();
            layer.biases.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        at
    }
}

/// Fixed 2x2 rotation-scale `rho * R(phi)` taken from a constellation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform(pub [[f64; 2]; 2]);

impl Transform {
    pub fn from_point(point: Complex64) -> Self {
        let (rho, phi) = point.to_polar();
        let (s, c) = phi.sin_cos();
        Transform([[rho * c, -rho * s], [rho * s, rho * c]])
    }

    #[inline]
    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        let m = &self.0;
        [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
    }

    #[inline]
    fn apply_transpose(&self, v: [f64; 2]) -> [f64; 2] {
        let m = &self.0;
        [m[0][0] * v[0] + m[1][0] * v[1], m[0][1] * v[0] + m[1][1] * v[1]]
    }

    /// `rho` of the generating point.
    pub fn scale(&self) -> f64 {
        self.0[0][0].hypot(self.0[1][0])
    }
}

/// Layer widths for the SMN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            encoder_hidden: 4,
            decoder_hidden: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmnModel {
    encoders: Vec<Mlp>,
    decoder: Mlp,
    transforms: Vec<Transform>,
    pub noise_variance: f64,
}

/// Standard deviation of the `N(0, 0.1)` initialiser.
pub const DEFAULT_INIT_STD: f64 = 0.1;

/// Gaussian initialisation of every weight and bias with standard deviation
/// `init_std`; transforms are taken from the constellation.
pub fn init_model<R: Rng + ?Sized>(
    constellation: &Constellation,
    architecture: Architecture,
    init_std: f64,
    rng: &mut R,
) -> Result<SmnModel> {
    if !(init_std >= 0.0 && init_std.is_finite()) {
        return Err(Error::Config(format!("init std must be finite and >= 0, got {init_std}")));
    }
    let encoders = (0..constellation.order())
        .map(|_| {
            Mlp::gaussian(
                &[2, architecture.encoder_hidden, 1],
                Activation::Tanh,
                Activation::Linear,
                init_std,
                rng,
            )
        })
        .collect();
    let decoder = Mlp::gaussian(
        &[1, architecture.decoder_hidden, 2],
        Activation::Tanh,
        Activation::Linear,
        init_std,
        rng,
    );
    SmnModel::from_parts(
        encoders,
        decoder,
        constellation.points().iter().map(|&p| Transform::from_point(p)).collect(),
        1.0,
    )
}

/// Scratch buffers for one branch evaluation.
#[derive(Debug, Default)]
struct BranchScratch {
    enc: Trace,
    dec: Trace,
}

/// Intermediate values of one (sample, branch) forward pass.
#[derive(Debug, Clone, Copy)]
struct BranchOut {
    rho: f64,
    phi: f64,
    projection: [f64; 2],
}

const SHARD: usize = 256;

impl SmnModel {
    pub fn from_parts(
        encoders: Vec<Mlp>,
        decoder: Mlp,
        transforms: Vec<Transform>,
        noise_variance: f64,
    ) -> Result<Self> {
        if encoders.is_empty() || encoders.len() != transforms.len() {
            return Err(Error::Contract(format!(
                "{} encoders for {} transforms",
                encoders.len(),
                transforms.len()
            )));
        }
        for e in &encoders {
            if e.input_width() != 2 || e.output_width() != 1 {
                return Err(Error::Contract("encoders must map 2 -> 1".into()));
            }
        }
        if decoder.input_width() != 1 || decoder.output_width() != 2 {
            return Err(Error::Contract("decoder must map 1 -> 2".into()));
        }
        Ok(SmnModel {
            encoders,
            decoder,
            transforms,
            noise_variance,
        })
    }

    pub fn order(&self) -> usize {
        self.encoders.len()
    }

    pub fn encoders(&self) -> &[Mlp] {
        &self.encoders
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn num_params(&self) -> usize {
        self.encoders.iter().map(Mlp::num_params).sum::<usize>() + self.decoder.num_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for e in &self.encoders {
            e.write_params(&mut out);
        }
        self.decoder.write_params(&mut out);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Contract(format!(
                "{} parameters for a model with {}",
                params.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for e in &mut self.encoders {
            at += e.read_params(&params[at..]);
        }
        self.decoder.read_params(&params[at..]);
        Ok(())
    }

    /// Curve coordinate of `y` under encoder `k`.
    pub fn encode(&self, y: [f64; 2], k: usize) -> f64 {
        self.encoders[k].eval(&y)[0]
    }

    /// Decoder output as polar `(rho, phi)`; `rho` lies in (0, 1).
    pub fn decode_polar(&self, lambda: f64) -> (f64, f64) {
        let o = self.decoder.eval(&[lambda]);
        (sigmoid(o[0]), o[1])
    }

    /// Point of the base (untransformed) curve at `lambda`.
    pub fn base_curve(&self, lambda: f64) -> [f64; 2] {
        let (rho, phi) = self.decode_polar(lambda);
        let (s, c) = phi.sin_cos();
        [rho * c, rho * s]
    }

    /// `T_k * cart(decoder(lambda))`.
    pub fn curve_point(&self, lambda: f64, k: usize) -> [f64; 2] {
        self.transforms[k].apply(self.base_curve(lambda))
    }

    /// Projection of `y` onto curve `k`.
    pub fn project(&self, y: [f64; 2], k: usize) -> [f64; 2] {
        let mut scratch = BranchScratch::default();
        self.branch(y, k, &mut scratch).projection
    }

    fn branch(&self, y: [f64; 2], k: usize, s: &mut BranchScratch) -> BranchOut {
        let lambda = self.encoders[k].forward(&y, &mut s.enc)[0];
        let o = self.decoder.forward(&[lambda], &mut s.dec);
        let rho = sigmoid(o[0]);
        let phi = o[1];
        let (sn, cs) = phi.sin_cos();
        let projection = self.transforms[k].apply([rho * cs, rho * sn]);
        BranchOut { rho, phi, projection }
    }

    /// Squared distances `||y_i - project(y_i, k)||^2`, row-major `m x K`.
    pub fn distances(&self, samples: &[Complex64]) -> Vec<f64> {
        let k_count = self.order();
        samples
            .par_chunks(SHARD)
            .flat_map_iter(|chunk| {
                let mut scratch = BranchScratch::default();
                let mut out = Vec::with_capacity(chunk.len() * k_count);
                for y in chunk {
                    let yv = [y.re, y.im];
                    for k in 0..k_count {
                        let p = self.branch(yv, k, &mut scratch).projection;
                        out.push(sq_dist(yv, p));
                    }
                }
                out.into_iter()
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite()) && self.noise_variance.is_finite()
    }

    /// Index of the first parameter of encoder `k` / the decoder in the flat layout.
    fn offsets(&self) -> (Vec<usize>, usize) {
        let mut at = 0;
        let enc = self
            .encoders
            .iter()
            .map(|e| {
                let start = at;
                at += e.num_params();
                start
            })
            .collect();
        (enc, at)
    }
}

#[inline]
fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

fn check_weights(samples: &[Complex64], weights: &PosteriorMatrix, order: usize) -> Result<()> {
    if weights.rows() != samples.len() || weights.order() != order {
        return Err(Error::Contract(format!(
            "weight matrix is {}x{}, expected {}x{}",
            weights.rows(),
            weights.order(),
            samples.len(),
            order
        )));
    }
    if samples.is_empty() {
        return Err(Error::Contract("no samples".into()));
    }
    Ok(())
}

/// `(1/m) sum_i sum_k W_ik ||y_i - project(y_i, k)||^2`.
pub fn weighted_loss(model: &SmnModel, samples: &[Complex64], weights: &PosteriorMatrix) -> Result<f64> {
    check_weights(samples, weights, model.order())?;
    let d = model.distances(samples);
    let total: f64 = d.iter().zip(weights.as_slice()).map(|(d, w)| d * w).sum();
    Ok(total / samples.len() as f64)
}

/// Loss and its exact gradient with respect to the flat parameter vector.
///
/// Samples are processed in fixed shards whose partial sums are combined in
/// shard order, so the result does not depend on the thread count.
/// Transforms are constants and receive no gradient.
pub fn loss_and_gradients(
    model: &SmnModel,
    samples: &[Complex64],
    weights: &PosteriorMatrix,
) -> Result<(f64, Vec<f64>)> {
    check_weights(samples, weights, model.order())?;
    let k_count = model.order();
    let n_params = model.num_params();
    let (enc_offsets, dec_offset) = model.offsets();
    let scale = 1.0 / samples.len() as f64;
    let w = weights.as_slice();

    let partials: Vec<(f64, Vec<f64>)> = samples
        .par_chunks(SHARD)
        .enumerate()
        .map(|(shard, chunk)| {
            let mut grad = vec![0.0; n_params];
            let mut loss = 0.0;
            let mut scratch = BranchScratch::default();
            for (j, y) in chunk.iter().enumerate() {
                let i = shard * SHARD + j;
                let yv = [y.re, y.im];
                for k in 0..k_count {
                    let wik = w[i * k_count + k];
                    if wik == 0.0 {
                        continue;
                    }
                    let out = model.branch(yv, k, &mut scratch);
                    let r = [yv[0] - out.projection[0], yv[1] - out.projection[1]];
                    loss += wik * (r[0] * r[0] + r[1] * r[1]);
                    // d/dp of w*||y-p||^2 is -2 w (y - p)
                    let gp = [-2.0 * wik * scale * r[0], -2.0 * wik * scale * r[1]];
                    let gc = model.transforms[k].apply_transpose(gp);
                    let (sn, cs) = out.phi.sin_cos();
                    let g_rho = gc[0] * cs + gc[1] * sn;
                    let g_phi = out.rho * (-gc[0] * sn + gc[1] * cs);
                    let g_o = [g_rho * out.rho * (1.0 - out.rho), g_phi];
                    model.decoder.backward(
                        &mut scratch.dec,
                        &g_o,
                        &mut grad[dec_offset..dec_offset + model.decoder.num_params()],
                    );
                    let g_lambda = scratch.dec.input_grad()[0];
                    let enc = &model.encoders[k];
                    let start = enc_offsets[k];
                    enc.backward(&mut scratch.enc, &[g_lambda], &mut grad[start..start + enc.num_params()]);
                }
            }
            (loss * scale, grad)
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = vec![0.0; n_params];
    for (l, g) in partials {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {loss}")));
    }
    if let Some((idx, v)) = grad.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {idx} of {n_params} is {v} (loss {loss})"
        )));
    }
    Ok((loss, grad))
}

/// Gradient of [`weighted_loss`] only.
pub fn gradients(model: &SmnModel, samples: &[Complex64], weights: &PosteriorMatrix) -> Result<Vec<f64>> {
    loss_and_gradients(model, samples, weights).map(|(_, g)| g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub learning_rate: f64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        AdamState {
            config,
            learning_rate: config.learning_rate,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Contract(format!(
                "adam shapes differ: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        let AdamConfig { beta1, beta2, epsilon, .. } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Applies one Adam step to the model's flat parameters.
pub fn adam_step(model: &mut SmnModel, grads: &[f64], state: &mut AdamState) -> Result<()> {
    let mut params = model.params();
    state.step(&mut params, grads)?;
    model.set_params(&params)
}

/// Fresh state with the same configuration and size: moments and step count
/// zeroed, learning rate restored.
pub fn reset_optimizer(state: &AdamState) -> AdamState {
    AdamState::new(state.config, state.first_moment.len())
}

const CHECKPOINT_MAGIC: &str = "smn-checkpoint 1";

fn write_mlp(out: &mut String, name: &str, mlp: &Mlp) {
    let _ = writeln!(out, "mlp {name} {}", mlp.layers.len());
    for layer in &mlp.layers {
        let _ = writeln!(
            out,
            "layer {} {} {}",
            layer.outputs,
            layer.inputs,
            layer.activation.name()
        );
        for row in layer.weights.chunks(layer.inputs) {
            let _ = writeln!(out, "{}", join(row));
        }
        let _ = writeln!(out, "{}", join(&layer.biases));
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

/// Text checkpoint: a magic line, the order and noise variance, one line per
/// transform (`a b c d` row-major), then each MLP as `mlp <name> <layers>`
/// followed per layer by `layer <out> <in> <activation>`, `out` weight rows
/// and one bias row. Floats round-trip exactly.
pub fn save_checkpoint<W: Write>(model: &SmnModel, mut writer: W) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(out, "order {}", model.order());
    let _ = writeln!(out, "noise_variance {:?}", model.noise_variance);
    for t in &model.transforms {
        let m = t.0;
        let _ = writeln!(out, "transform {}", join(&[m[0][0], m[0][1], m[1][0], m[1][1]]));
    }
    for (k, e) in model.encoders.iter().enumerate() {
        write_mlp(&mut out, &format!("encoder.{k}"), e);
    }
    write_mlp(&mut out, "decoder", &model.decoder);
    writer
        .write_all(out.as_bytes())
        .map_err(|e| Error::io("<checkpoint>", e))
}

struct Lines<R> {
    inner: std::io::Lines<R>,
}

impl<R: BufRead> Lines<R> {
    fn next_line(&mut self) -> Result<String> {
        match self.inner.next() {
            Some(line) => line.map_err(|e| Error::io("<checkpoint>", e)),
            None => Err(Error::Parse("unexpected end of checkpoint".into())),
        }
    }

    fn tagged(&mut self, tag: &str) -> Result<Vec<String>> {
        let line = self.next_line()?;
        let mut parts = line.split_whitespace().map(str::to_string);
        match parts.next() {
            Some(t) if t == tag => Ok(parts.collect()),
            _ => Err(Error::Parse(format!("expected '{tag}', found '{line}'"))),
        }
    }

    fn floats(&mut self, expected: usize) -> Result<Vec<f64>> {
        let line = self.next_line()?;
        let values = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("bad number '{t}'"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != expected {
            return Err(Error::Parse(format!(
                "expected {expected} numbers, found {}",
                values.len()
            )));
        }
        Ok(values)
    }
}

fn parse_usize(s: Option<&String>) -> Result<usize> {
    s.and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse("expected a count".into()))
}

fn read_mlp<R: BufRead>(lines: &mut Lines<R>, name: &str) -> Result<Mlp> {
    let head = lines.tagged("mlp")?;
    if head.first().map(String::as_str) != Some(name) {
        return Err(Error::Parse(format!("expected mlp '{name}'")));
    }
    let n = parse_usize(head.get(1))?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let h = lines.tagged("layer")?;
        let outputs = parse_usize(h.first())?;
        let inputs = parse_usize(h.get(1))?;
        let activation: Activation = h
            .get(2)
            .ok_or_else(|| Error::Parse("missing activation".into()))?
            .parse()?;
        let mut layer = DenseLayer::zeros(inputs, outputs, activation);
        for o in 0..outputs {
            let row = lines.floats(inputs)?;
            layer.weights[o * inputs..(o + 1) * inputs].copy_from_slice(&row);
        }
        layer.biases = lines.floats(outputs)?;
        layers.push(layer);
    }
    Mlp::new(layers)
}

pub fn load_checkpoint<R: BufRead>(reader: R) -> Result<SmnModel> {
    let mut lines = Lines { inner: reader.lines() };
    if lines.next_line()?.trim() != CHECKPOINT_MAGIC {
        return Err(Error::Parse("not an smn checkpoint".into()));
    }
    let order = parse_usize(lines.tagged("order")?.first())?;
    let noise_variance: f64 = lines
        .tagged("noise_variance")?
        .first()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse("bad noise variance".into()))?;
    let mut transforms = Vec::with_capacity(order);
    for _ in 0..order {
        let v = lines
            .tagged("transform")?
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("bad number '{t}'"))))
            .collect::<Result<Vec<_>>>()?;
        if v.len() != 4 {
            return Err(Error::Parse("transform needs 4 entries".into()));
        }
        transforms.push(Transform([[v[0], v[1]], [v[2], v[3]]]));
    }
    let encoders = (0..order)
        .map(|k| read_mlp(&mut lines, &format!("encoder.{k}")))
        .collect::<Result<Vec<_>>>()?;
    let decoder = read_mlp(&mut lines, "decoder")?;
    SmnModel::from_parts(encoders, decoder, transforms, noise_variance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::build_constellation;
    use crate::rng::{substream, Role};
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn qpsk_model(seed: u64) -> SmnModel {
        let c = build_constellation(2).unwrap();
        init_model(&c, Architecture::default(), 0.1, &mut substream(seed, Role::Init, 0)).unwrap()
    }

    fn zero_model() -> SmnModel {
        let mut m = qpsk_model(0);
        let n = m.num_params();
        m.set_params(&vec![0.0; n]).unwrap();
        m
    }

    #[test]
    fn shapes_and_param_count() {
        let m = qpsk_model(1);
        assert_eq!(m.order(), 4);
        // encoder: 2*4+4 + 4*1+1 = 17; decoder: 1*4+4 + 4*2+2 = 18
        assert_eq!(m.num_params(), 4 * 17 + 18);
        let p = m.params();
        let mut m2 = m.clone();
        m2.set_params(&p).unwrap();
        assert_eq!(m, m2);
        assert!(m2.set_params(&p[1..]).is_err());
    }

    #[test]
    fn init_statistics() {
        let c = build_constellation(2).unwrap();
        let arch = Architecture { encoder_hidden: 64, decoder_hidden: 64 };
        let m = init_model(&c, arch, 0.1, &mut substream(5, Role::Init, 0)).unwrap();
        let p = m.params();
        let n = p.len() as f64;
        let mean = p.iter().sum::<f64>() / n;
        let sd = (p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((sd - 0.1).abs() < 0.005, "sd {sd}");
    }

    #[test]
    fn transforms_from_points() {
        let t = Transform::from_point(Complex64::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2));
        let r = FRAC_1_SQRT_2;
        for (a, b) in t.0.iter().flatten().zip([r, -r, r, r]) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
        let id = Transform::from_point(Complex64::new(1.0, 0.0));
        assert_eq!(id.0, [[1.0, -0.0], [0.0, 1.0]]);
        let rot = Transform::from_point(Complex64::new(0.0, 1.0));
        for (a, b) in rot.0.iter().flatten().zip([0.0, -1.0, 1.0, 0.0]) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_weight_forward_pass() {
        let m = zero_model();
        for k in 0..4 {
            let p = m.project([0.3, -0.8], k);
            let expect = m.transforms()[k].apply([0.5, 0.0]);
            assert_eq!(p, expect);
        }
    }

    #[test]
    fn projection_magnitude_bounded_by_point_scale() {
        let m = qpsk_model(2);
        for i in 0..50 {
            let y = [(i as f64 * 0.37).sin() * 3.0, (i as f64 * 0.91).cos() * 3.0];
            for k in 0..4 {
                let p = m.project(y, k);
                assert!(p[0].hypot(p[1]) < m.transforms()[k].scale());
            }
        }
    }

    #[test]
    fn shared_decoder_symmetry() {
        let mut m = qpsk_model(3);
        let e0 = m.encoders[0].clone();
        for e in &mut m.encoders {
            *e = e0.clone();
        }
        let y = [0.2, 0.4];
        let base = m.base_curve(m.encode(y, 0));
        for k in 0..4 {
            assert_eq!(m.project(y, k), m.transforms()[k].apply(base));
        }
    }

    fn posterior(m: usize, k: usize, seed: u64) -> PosteriorMatrix {
        let mut rng = substream(seed, Role::Baseline, 0);
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.01).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        PosteriorMatrix::from_rows(&rows).unwrap()
    }

    fn samples(m: usize, seed: u64) -> Vec<Complex64> {
        let normal = Normal::new(0.0, 0.6).unwrap();
        let mut rng = substream(seed, Role::Noise, 0);
        (0..m)
            .map(|_| Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng)))
            .collect()
    }

    #[test]
    fn weighted_loss_arithmetic() {
        // Naive double loop over (i, k).
        let m = qpsk_model(4);
        let y = samples(37, 4);
        let w = posterior(37, 4, 4);
        let mut oracle = 0.0;
        for (i, yi) in y.iter().enumerate() {
            for k in 0..4 {
                let p = m.project([yi.re, yi.im], k);
                oracle += w.get(i, k) * ((yi.re - p[0]).powi(2) + (yi.im - p[1]).powi(2));
            }
        }
        oracle /= 37.0;
        assert_relative_eq!(weighted_loss(&m, &y, &w).unwrap(), oracle, max_relative = 1e-12);
    }

    #[test]
    fn weighted_loss_one_hot_exact_fit_is_zero() {
        // A zero-weight model maps every input to T_k (0.5, 0), so those points
        // are their own projections.
        let z = zero_model();
        let fixed: Vec<Complex64> = (0..4)
            .map(|k| {
                let p = z.transforms()[k].apply([0.5, 0.0]);
                Complex64::new(p[0], p[1])
            })
            .collect();
        let w = PosteriorMatrix::one_hot(&[0, 1, 2, 3], 4).unwrap();
        assert_eq!(weighted_loss(&z, &fixed, &w).unwrap(), 0.0);
    }

    #[test]
    fn weighted_loss_one_hot_is_plain_mse() {
        let m = qpsk_model(5);
        let y = samples(40, 5);
        let labels: Vec<usize> = (0..40).map(|i| (i * 7) % 4).collect();
        let w = PosteriorMatrix::one_hot(&labels, 4).unwrap();
        let mse = y
            .iter()
            .zip(&labels)
            .map(|(v, &k)| {
                let p = m.project([v.re, v.im], k);
                (v.re - p[0]).powi(2) + (v.im - p[1]).powi(2)
            })
            .sum::<f64>()
            / 40.0;
        assert_relative_eq!(weighted_loss(&m, &y, &w).unwrap(), mse, max_relative = 1e-12);
    }

    #[test]
    fn weighted_loss_half_weights() {
        // m=1, K=2: distances^2 (2, 4), weights (0.5, 0.5) -> 3.
        let c = build_constellation(1).unwrap();
        let mut m = init_model(&c, Architecture::default(), 0.0, &mut substream(0, Role::Init, 0)).unwrap();
        m.noise_variance = 1.0;
        // Zero model projects everything to (+-0.5, 0).
        // y = (0.5 + a, b): d0 = a^2 + b^2, d1 = (1 + a)^2 + b^2.
        // d0 = 2, d1 = 4 -> a = 0.5, b^2 = 1.75.
        let y = vec![Complex64::new(1.0, 1.75f64.sqrt())];
        let w = PosteriorMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_relative_eq!(weighted_loss(&m, &y, &w).unwrap(), 3.0, max_relative = 1e-12);
    }

    #[test]
    fn loss_dimension_mismatch() {
        let m = qpsk_model(6);
        let y = samples(5, 6);
        let w = posterior(4, 4, 6);
        assert!(matches!(weighted_loss(&m, &y, &w), Err(Error::Contract(_))));
        let w = posterior(5, 2, 6);
        assert!(matches!(gradients(&m, &y, &w), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let m = qpsk_model(7);
        let y = samples(20, 7);
        let w = PosteriorMatrix::zeros(20, 4);
        assert!(gradients(&m, &y, &w).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn finite_difference_spot_check() {
        let m = qpsk_model(8);
        let y = samples(300, 8);
        let w = posterior(300, 4, 8);
        let g = gradients(&m, &y, &w).unwrap();
        let p0 = m.params();
        let h = 1e-5;
        for j in (0..p0.len()).step_by(7) {
            let mut plus = m.clone();
            let mut p = p0.clone();
            p[j] += h;
            plus.set_params(&p).unwrap();
            let mut minus = m.clone();
            p[j] -= 2.0 * h;
            minus.set_params(&p).unwrap();
            let fd = (weighted_loss(&plus, &y, &w).unwrap() - weighted_loss(&minus, &y, &w).unwrap()) / (2.0 * h);
            let denom = fd.abs().max(g[j].abs()).max(1e-6);
            assert!((fd - g[j]).abs() / denom < 1e-4, "param {j}: fd {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn duplicated_sample_matches_single() {
        let m = qpsk_model(9);
        let y1 = samples(1, 9);
        let y2 = vec![y1[0], y1[0]];
        let w1 = PosteriorMatrix::one_hot(&[2], 4).unwrap();
        let w2 = PosteriorMatrix::one_hot(&[2, 2], 4).unwrap();
        // The loss is a mean over rows, so a duplicated row changes nothing.
        let g1 = gradients(&m, &y1, &w1).unwrap();
        let g2 = gradients(&m, &y2, &w2).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12, epsilon = 1e-300);
        }
    }

    #[test]
    fn gradient_is_thread_count_independent() {
        let m = qpsk_model(10);
        let y = samples(1000, 10);
        let w = posterior(1000, 4, 10);
        let a = gradients(&m, &y, &w).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| gradients(&m, &y, &w).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut m = qpsk_model(11);
        let before = m.clone();
        let mut st = AdamState::new(AdamConfig::default(), m.num_params());
        let zeros = vec![0.0; m.num_params()];
        adam_step(&mut m, &zeros, &mut st).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut st = AdamState::new(AdamConfig::default(), 3);
        let mut p = vec![1.0, 1.0, 1.0];
        st.step(&mut p, &[0.5, -3.0, 1e-3]).unwrap();
        for (v, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert_relative_eq!(*v - 1.0, s * 1e-3, max_relative = 1e-4);
        }
        assert!(st.step(&mut p, &[0.0; 2]).is_err());
    }

    #[test]
    fn reset_matches_fresh_state() {
        let cfg = AdamConfig { learning_rate: 0.01, ..AdamConfig::default() };
        let mut st = AdamState::new(cfg, 4);
        let mut p = vec![0.0; 4];
        st.step(&mut p, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        st.learning_rate = 0.5;
        let r = reset_optimizer(&st);
        assert_eq!(r, AdamState::new(cfg, 4));

        let before = p.clone();
        let mut r = r;
        r.step(&mut p, &[0.0; 4]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut m = qpsk_model(12);
            let y = samples(64, 12);
            let w = posterior(64, 4, 12);
            let mut st = AdamState::new(AdamConfig::default(), m.num_params());
            for _ in 0..2 {
                let g = gradients(&m, &y, &w).unwrap();
                adam_step(&mut m, &g, &mut st).unwrap();
            }
            m.params()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = qpsk_model(13);
        m.noise_variance = 0.0123456789;
        let mut buf = Vec::new();
        save_checkpoint(&m, &mut buf).unwrap();
        let back = load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert!(load_checkpoint("garbage\n".as_bytes()).is_err());
        let truncated = &buf[..buf.len() / 2];
        assert!(load_checkpoint(truncated).is_err());
    }

    #[test]
    fn mlp_backward_matches_finite_difference() {
        let mut rng = substream(14, Role::Init, 0);
        let mlp = Mlp::gaussian(&[3, 5, 2], Activation::Sigmoid, Activation::Tanh, 0.7, &mut rng);
        let x = [0.3, -0.2, 0.9];
        let g_out = [1.3, -0.4];
        let mut trace = Trace::default();
        mlp.forward(&x, &mut trace);
        let mut grad = vec![0.0; mlp.num_params()];
        mlp.backward(&mut trace, &g_out, &mut grad);
        let f = |m: &Mlp, x: &[f64]| {
            let o = m.eval(x);
            o[0] * g_out[0] + o[1] * g_out[1]
        };
        let mut params = Vec::new();
        mlp.write_params(&mut params);
        let h = 1e-6;
        for j in 0..params.len() {
            let mut a = mlp.clone();
            let mut p = params.clone();
            p[j] += h;
            a.read_params(&p);
            let mut b = mlp.clone();
            p[j] -= 2.0 * h;
            b.read_params(&p);
            let fd = (f(&a, &x) - f(&b, &x)) / (2.0 * h);
            assert!((fd - grad[j]).abs() < 1e-7, "param {j}");
        }
        let gi = trace.input_grad().to_vec();
        for i in 0..3 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (f(&mlp, &xp) - f(&mlp, &xm)) / (2.0 * h);
            assert!((fd - gi[i]).abs() < 1e-7, "input {i}");
        }
    }

    #[test]
    fn mlp_rejects_mismatched_layers() {
        let a = DenseLayer::zeros(2, 3, Activation::Tanh);
        let b = DenseLayer::zeros(4, 1, Activation::Linear);
        assert!(Mlp::new(vec![a, b]).is_err());
        assert!(Mlp::new(vec![]).is_err());
    }
}
