//! The gated VAE: encoder stack, Gaussian heads, decoder stack, and the
//! hand-written reverse-mode pass through everything including the gates and
//! the single-sample reparameterization.

use std::sync::Once;

use crate::error::{Error, Result};
use crate::gate::BetaConditioner;
use crate::linalg::RngStream;
use crate::nn::layer::{DenseLayer, Layer, LayerGradSink, LayerTape};

pub const LN_2PI: f64 = crate::analytic::LN_2PI;
const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Likelihood {
    BernoulliLogits,
    GaussianUnitVar,
}

#[derive(Debug, Clone)]
pub struct MrvaeModel {
    pub encoder: Vec<Layer>,
    pub latent_dim: usize,
    pub mean_head: DenseLayer,
    pub logvar_head: DenseLayer,
    pub decoder: Vec<Layer>,
    pub decoder_head: DenseLayer,
    pub likelihood: Likelihood,
    /// Some => gates consume the standardized log KL weight; None => raw
    /// log(beta), as the constructive linear-VAE setting assumes.
    pub conditioner: Option<BetaConditioner>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub recon: Vec<f64>,
    pub z_mean: Vec<f64>,
    pub z_logvar: Vec<f64>,
    pub z_sample: Vec<f64>,
}

/// Record of one forward pass, sufficient for the exact backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub x: Vec<f64>,
    pub beta: f64,
    pub eta_gate: f64,
    pub enc: Vec<LayerTape>,
    pub mean: LayerTape,
    pub logvar: LayerTape,
    /// Clamped log-variance actually used for sampling and the rate term.
    pub z_logvar: Vec<f64>,
    pub eps: Vec<f64>,
    pub z: Vec<f64>,
    pub dec: Vec<LayerTape>,
    pub head: LayerTape,
}

#[derive(Debug, Clone, Copy)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct LayerSlots {
    pub weight: Slot,
    pub bias: Slot,
    pub gate_w: Option<Slot>,
    pub gate_b: Option<Slot>,
    pub gate_shift: Option<Slot>,
}

/// Offsets of every parameter group in the canonical flat vector.
#[derive(Debug, Clone)]
pub struct LayoutIndex {
    pub encoder: Vec<LayerSlots>,
    pub mean_head: LayerSlots,
    pub logvar_head: LayerSlots,
    pub decoder: Vec<LayerSlots>,
    pub decoder_head: LayerSlots,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCounts {
    pub base: usize,
    pub gate: usize,
    pub overhead_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub distortion: f64,
    pub rate: f64,
}

impl ElboTerms {
    pub fn loss(&self, beta: f64) -> f64 {
        self.distortion + beta * self.rate
    }
}

/// Closed-form KL of N(mean, e^logvar) against the standard normal, summed
/// over latent dimensions.
pub fn rate_term(z_mean: &[f64], z_logvar: &[f64]) -> f64 {
    z_mean
        .iter()
        .zip(z_logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum()
}

/// Negative log-likelihood of x under the decoder output.
pub fn distortion_term(likelihood: Likelihood, recon: &[f64], x: &[f64]) -> f64 {
    match likelihood {
        Likelihood::BernoulliLogits => recon
            .iter()
            .zip(x)
            .map(|(l, x)| l.max(0.0) - l * x + (-l.abs()).exp().ln_1p())
            .sum(),
        Likelihood::GaussianUnitVar => {
            let sq: f64 = recon.iter().zip(x).map(|(r, x)| (r - x) * (r - x)).sum();
            0.5 * sq + 0.5 * x.len() as f64 * LN_2PI
        }
    }
}

fn slots_for(offset: &mut usize, weight_len: usize, bias_len: usize, gate: Option<&crate::gate::GateParams>) -> LayerSlots {
    let mut take = |len: usize| {
        let s = Slot { offset: *offset, len };
        *offset += len;
        s
    };
    let weight = take(weight_len);
    let bias = take(bias_len);
    let (gate_w, gate_b, gate_shift) = match gate {
        Some(g) => {
            let w = take(g.width());
            let b = take(g.width());
            let s = g.shift_hyper.as_ref().map(|sh| take(sh.len()));
            (Some(w), Some(b), s)
        }
        None => (None, None, None),
    };
    LayerSlots { weight, bias, gate_w, gate_b, gate_shift }
}

fn layer_slots(offset: &mut usize, layer: &Layer) -> LayerSlots {
    slots_for(offset, layer.weight().rows() * layer.weight().cols(), layer.bias().len(), layer.gate())
}

fn dense_slots(offset: &mut usize, layer: &DenseLayer) -> LayerSlots {
    slots_for(offset, layer.weight.rows() * layer.weight.cols(), layer.bias.len(), layer.gate.as_ref())
}

/// Split the flat buffer into the per-group mutable slices of one layer.
/// Relies on the layout placing the groups contiguously in order.
fn sink_at<'a>(buf: &'a mut [f64], slots: &LayerSlots) -> LayerGradSink<'a> {
    let rest = &mut buf[slots.weight.offset..];
    let (d_weight, rest) = rest.split_at_mut(slots.weight.len);
    let (d_bias, rest) = rest.split_at_mut(slots.bias.len);
    let (d_gate_w, rest) = match slots.gate_w {
        Some(s) => {
            let (a, r) = rest.split_at_mut(s.len);
            (Some(a), r)
        }
        None => (None, rest),
    };
    let (d_gate_b, rest) = match slots.gate_b {
        Some(s) => {
            let (a, r) = rest.split_at_mut(s.len);
            (Some(a), r)
        }
        None => (None, rest),
    };
    let d_gate_shift = match slots.gate_shift {
        Some(s) => Some(&mut rest[..s.len]),
        None => None,
    };
    LayerGradSink { d_weight, d_bias, d_gate_w, d_gate_b, d_gate_shift }
}

fn copy_layer_params(flat: &mut [f64], slots: &LayerSlots, weight: &[f64], bias: &[f64], gate: Option<&crate::gate::GateParams>) {
    flat[slots.weight.offset..slots.weight.offset + slots.weight.len].copy_from_slice(weight);
    flat[slots.bias.offset..slots.bias.offset + slots.bias.len].copy_from_slice(bias);
    if let Some(g) = gate {
        let w = slots.gate_w.unwrap();
        flat[w.offset..w.offset + w.len].copy_from_slice(&g.w_hyper);
        let b = slots.gate_b.unwrap();
        flat[b.offset..b.offset + b.len].copy_from_slice(&g.b_hyper);
        if let (Some(s), Some(sh)) = (slots.gate_shift, g.shift_hyper.as_ref()) {
            flat[s.offset..s.offset + s.len].copy_from_slice(sh);
        }
    }
}

fn load_layer_params(flat: &[f64], slots: &LayerSlots, weight: &mut [f64], bias: &mut [f64], gate: Option<&mut crate::gate::GateParams>) {
    weight.copy_from_slice(&flat[slots.weight.offset..slots.weight.offset + slots.weight.len]);
    bias.copy_from_slice(&flat[slots.bias.offset..slots.bias.offset + slots.bias.len]);
    if let Some(g) = gate {
        let w = slots.gate_w.unwrap();
        g.w_hyper.copy_from_slice(&flat[w.offset..w.offset + w.len]);
        let b = slots.gate_b.unwrap();
        g.b_hyper.copy_from_slice(&flat[b.offset..b.offset + b.len]);
        if let (Some(s), Some(sh)) = (slots.gate_shift, g.shift_hyper.as_mut()) {
            sh.copy_from_slice(&flat[s.offset..s.offset + s.len]);
        }
    }
}

fn check_finite(values: &[f64], layer: usize, site: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { layer, site: site.to_string() });
    }
    Ok(())
}

static EXTRAPOLATION_WARNING: Once = Once::new();

impl MrvaeModel {
    pub fn input_dim(&self) -> usize {
        self.encoder
            .first()
            .map(|l| l.in_dim())
            .unwrap_or_else(|| self.mean_head.in_dim())
    }

    pub fn output_dim(&self) -> usize {
        self.decoder_head.out_dim()
    }

    /// Gate input for a given beta: raw log(beta), standardized when a
    /// conditioner is present.
    pub fn gate_eta(&self, beta: f64) -> f64 {
        let eta = beta.ln();
        match &self.conditioner {
            Some(c) => {
                if eta < c.log_a() - 1e-9 || eta > c.log_b() + 1e-9 {
                    EXTRAPOLATION_WARNING.call_once(|| {
                        log::warn!(
                            "beta {beta} outside the conditioner range; extrapolating gates"
                        );
                    });
                }
                c.normalize(eta)
            }
            None => eta,
        }
    }

    pub fn layout(&self) -> LayoutIndex {
        let mut offset = 0usize;
        let encoder = self.encoder.iter().map(|l| layer_slots(&mut offset, l)).collect();
        let mean_head = dense_slots(&mut offset, &self.mean_head);
        let logvar_head = dense_slots(&mut offset, &self.logvar_head);
        let decoder = self.decoder.iter().map(|l| layer_slots(&mut offset, l)).collect();
        let decoder_head = dense_slots(&mut offset, &self.decoder_head);
        LayoutIndex { encoder, mean_head, logvar_head, decoder, decoder_head, total: offset }
    }

    /// Stable names for the flat parameter groups, aligned with `layout()`.
    pub fn named_slots(&self) -> Vec<(String, Slot)> {
        let layout = self.layout();
        let mut out = Vec::new();
        let mut push = |prefix: &str, slots: &LayerSlots| {
            out.push((format!("{prefix}.weight"), slots.weight));
            out.push((format!("{prefix}.bias"), slots.bias));
            if let Some(s) = slots.gate_w {
                out.push((format!("{prefix}.gate_w"), s));
            }
            if let Some(s) = slots.gate_b {
                out.push((format!("{prefix}.gate_b"), s));
            }
            if let Some(s) = slots.gate_shift {
                out.push((format!("{prefix}.gate_shift"), s));
            }
        };
        for (i, slots) in layout.encoder.iter().enumerate() {
            push(&format!("enc.{i}"), slots);
        }
        push("mean_head", &layout.mean_head);
        push("logvar_head", &layout.logvar_head);
        for (i, slots) in layout.decoder.iter().enumerate() {
            push(&format!("dec.{i}"), slots);
        }
        push("dec_head", &layout.decoder_head);
        out
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let layout = self.layout();
        let mut flat = vec![0.0; layout.total];
        for (layer, slots) in self.encoder.iter().zip(&layout.encoder) {
            copy_layer_params(&mut flat, slots, layer.weight().data(), layer.bias(), layer.gate());
        }
        copy_layer_params(&mut flat, &layout.mean_head, self.mean_head.weight.data(), &self.mean_head.bias, self.mean_head.gate.as_ref());
        copy_layer_params(&mut flat, &layout.logvar_head, self.logvar_head.weight.data(), &self.logvar_head.bias, self.logvar_head.gate.as_ref());
        for (layer, slots) in self.decoder.iter().zip(&layout.decoder) {
            copy_layer_params(&mut flat, slots, layer.weight().data(), layer.bias(), layer.gate());
        }
        copy_layer_params(&mut flat, &layout.decoder_head, self.decoder_head.weight.data(), &self.decoder_head.bias, self.decoder_head.gate.as_ref());
        flat
    }

    pub fn load_params(&mut self, flat: &[f64]) -> Result<()> {
        let layout = self.layout();
        if flat.len() != layout.total {
            return Err(Error::dimension("load_params", "flat vector length mismatch"));
        }
        for (layer, slots) in self.encoder.iter_mut().zip(&layout.encoder) {
            match layer {
                Layer::Dense(l) => load_layer_params(flat, slots, l.weight.data_mut(), &mut l.bias, l.gate.as_mut()),
                Layer::Conv(l) => load_layer_params(flat, slots, l.weight.data_mut(), &mut l.bias, l.gate.as_mut()),
            }
        }
        load_layer_params(flat, &layout.mean_head, self.mean_head.weight.data_mut(), &mut self.mean_head.bias, self.mean_head.gate.as_mut());
        load_layer_params(flat, &layout.logvar_head, self.logvar_head.weight.data_mut(), &mut self.logvar_head.bias, self.logvar_head.gate.as_mut());
        for (layer, slots) in self.decoder.iter_mut().zip(&layout.decoder) {
            match layer {
                Layer::Dense(l) => load_layer_params(flat, slots, l.weight.data_mut(), &mut l.bias, l.gate.as_mut()),
                Layer::Conv(l) => load_layer_params(flat, slots, l.weight.data_mut(), &mut l.bias, l.gate.as_mut()),
            }
        }
        load_layer_params(flat, &layout.decoder_head, self.decoder_head.weight.data_mut(), &mut self.decoder_head.bias, self.decoder_head.gate.as_mut());
        Ok(())
    }

    /// Base parameters, gate parameters, and their ratio.
    pub fn param_counts(&self) -> ParamCounts {
        let mut base = 0usize;
        let mut gate = 0usize;
        let mut tally_parts = |wlen: usize, blen: usize, g: Option<&crate::gate::GateParams>| {
            base += wlen + blen;
            gate += g.map_or(0, |g| g.extra_params());
        };
        for layer in &self.encoder {
            tally_parts(layer.weight().rows() * layer.weight().cols(), layer.bias().len(), layer.gate());
        }
        for head in [&self.mean_head, &self.logvar_head, &self.decoder_head] {
            tally_parts(head.weight.rows() * head.weight.cols(), head.bias.len(), head.gate.as_ref());
        }
        for layer in &self.decoder {
            tally_parts(layer.weight().rows() * layer.weight().cols(), layer.bias().len(), layer.gate());
        }
        ParamCounts { base, gate, overhead_ratio: gate as f64 / base as f64 }
    }

    pub fn forward(&self, x: &[f64], beta: f64, rng: &mut RngStream) -> Result<(ForwardOutput, Tape)> {
        if !(beta > 0.0) {
            return Err(Error::domain("forward", "beta must be positive"));
        }
        if x.len() != self.input_dim() {
            return Err(Error::dimension("forward", "input width mismatch"));
        }
        let eta = self.gate_eta(beta);
        let mut layer_index = 0usize;

        let mut enc_tapes = Vec::with_capacity(self.encoder.len());
        let mut cur = x.to_vec();
        for (i, layer) in self.encoder.iter().enumerate() {
            let tape = layer.forward(&cur, eta);
            check_finite(&tape.out, layer_index, &format!("encoder[{i}]"))?;
            cur = tape.out.clone();
            enc_tapes.push(tape);
            layer_index += 1;
        }

        let mean_tape = self.mean_head.forward(&cur, eta);
        check_finite(&mean_tape.out, layer_index, "mean_head")?;
        layer_index += 1;
        let logvar_tape = self.logvar_head.forward(&cur, eta);
        check_finite(&logvar_tape.out, layer_index, "logvar_head")?;
        layer_index += 1;

        let z_mean = mean_tape.out.clone();
        let z_logvar: Vec<f64> = logvar_tape
            .out
            .iter()
            .map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))
            .collect();
        let eps = rng.normal_vec(self.latent_dim);
        let z: Vec<f64> = z_mean
            .iter()
            .zip(&z_logvar)
            .zip(&eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();

        let mut dec_tapes = Vec::with_capacity(self.decoder.len());
        let mut cur = z.clone();
        for (i, layer) in self.decoder.iter().enumerate() {
            let tape = layer.forward(&cur, eta);
            check_finite(&tape.out, layer_index, &format!("decoder[{i}]"))?;
            cur = tape.out.clone();
            dec_tapes.push(tape);
            layer_index += 1;
        }
        let head_tape = self.decoder_head.forward(&cur, eta);
        check_finite(&head_tape.out, layer_index, "decoder_head")?;

        let output = ForwardOutput {
            recon: head_tape.out.clone(),
            z_mean,
            z_logvar: z_logvar.clone(),
            z_sample: z.clone(),
        };
        let tape = Tape {
            x: x.to_vec(),
            beta,
            eta_gate: eta,
            enc: enc_tapes,
            mean: mean_tape,
            logvar: logvar_tape,
            z_logvar,
            eps,
            z,
            dec: dec_tapes,
            head: head_tape,
        };
        Ok((output, tape))
    }

    /// Posterior parameters only (no sampling); used by sweeps and the
    /// active-units metric.
    pub fn encode(&self, x: &[f64], beta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.input_dim() {
            return Err(Error::dimension("encode", "input width mismatch"));
        }
        let eta = self.gate_eta(beta);
        let mut cur = x.to_vec();
        for layer in &self.encoder {
            cur = layer.forward(&cur, eta).out;
        }
        let mean = self.mean_head.forward(&cur, eta).out;
        let logvar: Vec<f64> = self
            .logvar_head
            .forward(&cur, eta)
            .out
            .iter()
            .map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))
            .collect();
        Ok((mean, logvar))
    }

    pub fn decode(&self, z: &[f64], beta: f64) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim {
            return Err(Error::dimension("decode", "latent width mismatch"));
        }
        let eta = self.gate_eta(beta);
        let mut cur = z.to_vec();
        for layer in &self.decoder {
            cur = layer.forward(&cur, eta).out;
        }
        Ok(self.decoder_head.forward(&cur, eta).out)
    }

    pub fn elbo_terms(&self, out: &ForwardOutput, x: &[f64]) -> ElboTerms {
        ElboTerms {
            distortion: distortion_term(self.likelihood, &out.recon, x),
            rate: rate_term(&out.z_mean, &out.z_logvar),
        }
    }

    /// Exact gradients of distortion + beta * rate, accumulated (+=) into
    /// `grads`, which must have `layout.total` entries.
    pub fn backward_into(
        &self,
        tape: &Tape,
        beta: f64,
        layout: &LayoutIndex,
        grads: &mut [f64],
    ) -> Result<()> {
        if grads.len() != layout.total {
            return Err(Error::State("gradient buffer does not match layout".into()));
        }
        if tape.x.len() != self.input_dim()
            || tape.enc.len() != self.encoder.len()
            || tape.dec.len() != self.decoder.len()
        {
            return Err(Error::State("tape does not match model topology".into()));
        }
        let eta = tape.eta_gate;

        // dL/d recon_params.
        let d_recon: Vec<f64> = match self.likelihood {
            Likelihood::BernoulliLogits => tape
                .head
                .out
                .iter()
                .zip(&tape.x)
                .map(|(l, x)| 1.0 / (1.0 + (-l).exp()) - x)
                .collect(),
            Likelihood::GaussianUnitVar => {
                tape.head.out.iter().zip(&tape.x).map(|(r, x)| r - x).collect()
            }
        };

        let mut sink = sink_at(grads, &layout.decoder_head);
        let mut cur = self.decoder_head.backward(&tape.head, &d_recon, eta, &mut sink);
        for ((layer, ltape), slots) in self
            .decoder
            .iter()
            .zip(&tape.dec)
            .zip(&layout.decoder)
            .rev()
        {
            let mut sink = sink_at(grads, slots);
            cur = layer.backward(ltape, &cur, eta, &mut sink);
        }
        let dz = cur;

        // Reparameterization and the closed-form rate.
        let k = self.latent_dim;
        let mut d_mean = vec![0.0; k];
        let mut d_logvar = vec![0.0; k];
        for i in 0..k {
            let lv = tape.z_logvar[i];
            d_mean[i] = dz[i] + beta * tape.mean.out[i];
            d_logvar[i] = dz[i] * 0.5 * (0.5 * lv).exp() * tape.eps[i] + beta * 0.5 * (lv.exp() - 1.0);
        }
        // Clamp: gradient blocked where the raw head output was clipped.
        for (dlv, raw) in d_logvar.iter_mut().zip(&tape.logvar.out) {
            if raw.abs() > LOGVAR_CLAMP {
                *dlv = 0.0;
            }
        }

        let mut sink = sink_at(grads, &layout.mean_head);
        let mut d_h = self.mean_head.backward(&tape.mean, &d_mean, eta, &mut sink);
        let mut sink = sink_at(grads, &layout.logvar_head);
        let d_h2 = self.logvar_head.backward(&tape.logvar, &d_logvar, eta, &mut sink);
        for (a, b) in d_h.iter_mut().zip(&d_h2) {
            *a += b;
        }

        let mut cur = d_h;
        for ((layer, ltape), slots) in self
            .encoder
            .iter()
            .zip(&tape.enc)
            .zip(&layout.encoder)
            .rev()
        {
            let mut sink = sink_at(grads, slots);
            cur = layer.backward(ltape, &cur, eta, &mut sink);
        }
        Ok(())
    }

    /// Fresh gradient vector for a single tape.
    pub fn backward(&self, tape: &Tape, beta: f64) -> Result<Vec<f64>> {
        let layout = self.layout();
        let mut grads = vec![0.0; layout.total];
        self.backward_into(tape, beta, &layout, &mut grads)?;
        Ok(grads)
    }
}
