//! Conditional gating: affine maps of log(beta) feed per-row (or per-channel)
//! activations that scale weights and biases.
//!
//! The weight-scaling route (gate applied to the rows of W and to b) and the
//! pre-activation route (gate applied to W x + b) are algebraically the same;
//! both are provided and property-tested against each other. Encoder layers
//! use a sigmoid gate, decoder layers use sqrt(max(0, 1 - e^x)), which is
//! exactly 0 whenever its affine pre-image is >= 0. FiLM (unsquashed scale
//! plus additive shift) and a constant-1 identity gate exist for ablations
//! and for the constructive exactness proof, which sets second layers
//! directly.

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Sigmoid; the encoder-side gate activation, valued in (0, 1).
#[inline]
pub fn activation_encoder(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// sqrt(max(0, 1 - e^x)); the decoder-side gate activation, valued in [0, 1)
/// and exactly 0 for x >= 0.
#[inline]
pub fn activation_decoder(x: f64) -> f64 {
    if x >= 0.0 {
        0.0
    } else {
        (1.0 - x.exp()).max(0.0).sqrt()
    }
}

#[inline]
fn activation_encoder_deriv(x: f64) -> f64 {
    let s = activation_encoder(x);
    s * (1.0 - s)
}

#[inline]
fn activation_decoder_deriv(x: f64) -> f64 {
    if x >= 0.0 {
        0.0
    } else {
        let g = activation_decoder(x);
        if g == 0.0 {
            0.0
        } else {
            -x.exp() / (2.0 * g)
        }
    }
}

/// Which squashing the gate applies to its affine pre-image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GateActivation {
    SigmoidEncoder,
    SqrtExpDecoder,
    /// Unsquashed scale plus additive shift (ablation only, never default).
    Film,
    /// Constant 1; expresses the "set directly" layers of the constructive
    /// proof, which the decoder activation only reaches in a limit.
    Identity,
}

impl GateActivation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            GateActivation::SigmoidEncoder => activation_encoder(x),
            GateActivation::SqrtExpDecoder => activation_decoder(x),
            GateActivation::Film => x,
            GateActivation::Identity => 1.0,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            GateActivation::SigmoidEncoder => activation_encoder_deriv(x),
            GateActivation::SqrtExpDecoder => activation_decoder_deriv(x),
            GateActivation::Film => 1.0,
            GateActivation::Identity => 0.0,
        }
    }
}

/// Per-layer hypernetwork parameters: the gate for row i is
/// activation(w_hyper[i] * eta + b_hyper[i]). `shift_hyper` exists only for
/// FiLM and produces the additive shift shift_hyper[i] * eta.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub w_hyper: Vec<f64>,
    pub b_hyper: Vec<f64>,
    pub activation: GateActivation,
    pub shift_hyper: Option<Vec<f64>>,
}

impl GateParams {
    pub fn new(width: usize, activation: GateActivation) -> Self {
        let shift_hyper = match activation {
            GateActivation::Film => Some(vec![0.0; width]),
            _ => None,
        };
        Self { w_hyper: vec![0.0; width], b_hyper: vec![0.0; width], activation, shift_hyper }
    }

    pub fn width(&self) -> usize {
        self.w_hyper.len()
    }

    /// Number of hypernetwork parameters this gate adds to its layer:
    /// 2 per output row (3 for FiLM).
    pub fn extra_params(&self) -> usize {
        self.width() * 2 + self.shift_hyper.as_ref().map_or(0, |s| s.len())
    }

    #[inline]
    pub fn pre_image(&self, i: usize, eta: f64) -> f64 {
        self.w_hyper[i] * eta + self.b_hyper[i]
    }
}

/// Evaluated gate: multiplicative scale per row, plus FiLM's additive shift.
#[derive(Debug, Clone)]
pub struct GateOutput {
    pub scale: Vec<f64>,
    pub shift: Option<Vec<f64>>,
}

/// Evaluate the gate at the (normalized) log KL weight.
pub fn gate_vector(gp: &GateParams, eta: f64) -> GateOutput {
    let scale = (0..gp.width())
        .map(|i| gp.activation.apply(gp.pre_image(i, eta)))
        .collect();
    let shift = gp
        .shift_hyper
        .as_ref()
        .map(|sh| sh.iter().map(|s| s * eta).collect());
    GateOutput { scale, shift }
}

/// The weight-scaling route: row i of W and entry i of b multiplied by the
/// gate (FiLM's shift folds into the effective bias).
pub fn effective_weight(
    gp: &GateParams,
    eta: f64,
    w_base: &DenseMatrix,
    b_base: &[f64],
) -> Result<(DenseMatrix, Vec<f64>)> {
    if gp.width() != w_base.rows() || b_base.len() != w_base.rows() {
        return Err(Error::dimension(
            "effective_weight",
            format!("gate width {} vs {} weight rows", gp.width(), w_base.rows()),
        ));
    }
    let gate = gate_vector(gp, eta);
    let w = w_base.scale_rows(&gate.scale);
    let mut b: Vec<f64> = b_base.iter().zip(&gate.scale).map(|(b, g)| b * g).collect();
    if let Some(shift) = &gate.shift {
        for (b, s) in b.iter_mut().zip(shift) {
            *b += s;
        }
    }
    Ok((w, b))
}

/// The pre-activation route: gate .* s (+ shift for FiLM).
pub fn apply_gate_preactivation(gate: &GateOutput, s: &[f64]) -> Result<Vec<f64>> {
    if gate.scale.len() != s.len() {
        return Err(Error::dimension(
            "apply_gate_preactivation",
            format!("gate width {} vs pre-activation width {}", gate.scale.len(), s.len()),
        ));
    }
    let mut out: Vec<f64> = gate.scale.iter().zip(s).map(|(g, v)| g * v).collect();
    if let Some(shift) = &gate.shift {
        for (o, sh) in out.iter_mut().zip(shift) {
            *o += sh;
        }
    }
    Ok(out)
}

/// Channel-wise gating for convolutions: each output channel's entire
/// spatial map is scaled by one scalar gate (2 C_out extra parameters).
/// `channel_preacts` is laid out channel-major with `spatial` entries per
/// channel.
pub fn conv_gate(gp: &GateParams, eta: f64, channel_preacts: &[f64], spatial: usize) -> Result<Vec<f64>> {
    let channels = gp.width();
    if channel_preacts.len() != channels * spatial {
        return Err(Error::dimension(
            "conv_gate",
            format!("{} pre-activations for {channels} channels x {spatial}", channel_preacts.len()),
        ));
    }
    let gate = gate_vector(gp, eta);
    let mut out = Vec::with_capacity(channel_preacts.len());
    for c in 0..channels {
        let g = gate.scale[c];
        let sh = gate.shift.as_ref().map_or(0.0, |s| s[c]);
        for v in &channel_preacts[c * spatial..(c + 1) * spatial] {
            out.push(g * v + sh);
        }
    }
    Ok(out)
}

/// Gradients of the gated pre-activation with respect to the gate parameters
/// and the incoming pre-activation.
#[derive(Debug, Clone)]
pub struct GateGrads {
    pub d_w_hyper: Vec<f64>,
    pub d_b_hyper: Vec<f64>,
    pub d_shift_hyper: Option<Vec<f64>>,
    pub d_s: Vec<f64>,
}

/// Reverse-mode step through `apply_gate_preactivation`: given dL/d(output),
/// produce dL/d(w_hyper), dL/d(b_hyper), (dL/d(shift_hyper) for FiLM) and
/// dL/d(s).
pub fn gate_backward(gp: &GateParams, eta: f64, s: &[f64], upstream: &[f64]) -> Result<GateGrads> {
    let m = gp.width();
    if s.len() != m || upstream.len() != m {
        return Err(Error::dimension("gate_backward", "shape mismatch"));
    }
    let mut d_w = vec![0.0; m];
    let mut d_b = vec![0.0; m];
    let mut d_s = vec![0.0; m];
    for i in 0..m {
        let u = gp.pre_image(i, eta);
        let g = gp.activation.apply(u);
        let dg = gp.activation.derivative(u);
        let du = upstream[i] * s[i] * dg;
        d_w[i] = du * eta;
        d_b[i] = du;
        d_s[i] = g * upstream[i];
    }
    let d_shift = gp
        .shift_hyper
        .as_ref()
        .map(|_| upstream.iter().map(|u| u * eta).collect());
    Ok(GateGrads { d_w_hyper: d_w, d_b_hyper: d_b, d_shift_hyper: d_shift, d_s })
}

/// Standardizes eta = log(beta) for a sampling range [a, b]: the exact
/// moments of U[log a, log b] are mean (log a + log b)/2 and standard
/// deviation (log b - log a)/sqrt(12), so the endpoints map to +-sqrt(3).
#[derive(Debug, Clone, Copy)]
pub struct BetaConditioner {
    log_a: f64,
    log_b: f64,
}

impl BetaConditioner {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a < b && a.is_finite() && b.is_finite()) {
            return Err(Error::domain("BetaConditioner::new", "need 0 < a < b, finite"));
        }
        Ok(Self { log_a: a.ln(), log_b: b.ln() })
    }

    pub fn log_a(&self) -> f64 {
        self.log_a
    }

    pub fn log_b(&self) -> f64 {
        self.log_b
    }

    pub fn mean_eta(&self) -> f64 {
        0.5 * (self.log_a + self.log_b)
    }

    pub fn std_eta(&self) -> f64 {
        (self.log_b - self.log_a) / 12f64.sqrt()
    }

    /// (eta - mean)/std, arranged so the endpoints hit +-sqrt(3) exactly.
    pub fn normalize(&self, eta: f64) -> f64 {
        3f64.sqrt() * ((eta - self.log_a) + (eta - self.log_b)) / (self.log_b - self.log_a)
    }
}

/// A base matrix with a row gate; evaluating at eta yields the effective
/// weight of Eq. 6's scaling route. Building block for the two-layer linear
/// models.
#[derive(Debug, Clone)]
pub struct GatedMatrix {
    pub base: DenseMatrix,
    pub gate: GateParams,
}

impl GatedMatrix {
    pub fn new(base: DenseMatrix, activation: GateActivation) -> Self {
        let gate = GateParams::new(base.rows(), activation);
        Self { base, gate }
    }

    pub fn eval(&self, eta: f64) -> DenseMatrix {
        let gate = gate_vector(&self.gate, eta);
        self.base.scale_rows(&gate.scale)
    }
}

/// A gated diagonal: entry i is activation(w eta + b) * base_i.
#[derive(Debug, Clone)]
pub struct GatedDiag {
    pub base: Vec<f64>,
    pub gate: GateParams,
}

impl GatedDiag {
    pub fn new(base: Vec<f64>, activation: GateActivation) -> Self {
        let gate = GateParams::new(base.len(), activation);
        Self { base, gate }
    }

    pub fn eval(&self, eta: f64) -> Vec<f64> {
        let gate = gate_vector(&self.gate, eta);
        self.base.iter().zip(&gate.scale).map(|(b, g)| b * g).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RngStream;
    use proptest::prelude::*;

    #[test]
    fn encoder_activation_hand_values() {
        assert_eq!(activation_encoder(0.0), 0.5);
        assert!((activation_encoder(2.0 * 3f64.ln()) - 0.9).abs() < 1e-15);
        assert!(activation_encoder(60.0) > 1.0 - 1e-15);
        assert!(activation_encoder(-60.0) < 1e-15);
    }

    #[test]
    fn decoder_activation_hand_values() {
        assert_eq!(activation_decoder(0.0), 0.0);
        assert_eq!(activation_decoder(1.5), 0.0);
        assert!((activation_decoder(0.75f64.ln()) - 0.5).abs() < 1e-15);
        assert!((activation_decoder(-60.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gate_vector_neutral_parameters() {
        let gp = GateParams::new(4, GateActivation::SigmoidEncoder);
        assert_eq!(gate_vector(&gp, 1.3).scale, vec![0.5; 4]);
        let gp = GateParams::new(4, GateActivation::Identity);
        assert_eq!(gate_vector(&gp, -2.0).scale, vec![1.0; 4]);
    }

    #[test]
    fn gate_vector_matches_scalar_oracle() {
        let mut rng = RngStream::new(9);
        for activation in [GateActivation::SigmoidEncoder, GateActivation::SqrtExpDecoder] {
            let mut gp = GateParams::new(6, activation);
            for v in gp.w_hyper.iter_mut().chain(gp.b_hyper.iter_mut()) {
                *v = rng.normal();
            }
            for eta in [-1.0, 0.0, 1.0] {
                let out = gate_vector(&gp, eta);
                for i in 0..6 {
                    let x = gp.w_hyper[i] * eta + gp.b_hyper[i];
                    let expect = match activation {
                        GateActivation::SigmoidEncoder => activation_encoder(x),
                        _ => activation_decoder(x),
                    };
                    assert_eq!(out.scale[i], expect);
                }
            }
        }
    }

    #[test]
    fn gate_ranges_hold() {
        let mut rng = RngStream::new(10);
        let mut enc = GateParams::new(8, GateActivation::SigmoidEncoder);
        let mut dec = GateParams::new(8, GateActivation::SqrtExpDecoder);
        for v in enc
            .w_hyper
            .iter_mut()
            .chain(enc.b_hyper.iter_mut())
            .chain(dec.w_hyper.iter_mut())
            .chain(dec.b_hyper.iter_mut())
        {
            *v = 3.0 * rng.normal();
        }
        for _ in 0..200 {
            let eta = rng.uniform(-5.0, 5.0);
            for g in gate_vector(&enc, eta).scale {
                assert!(g > 0.0 && g < 1.0);
            }
            for (i, g) in gate_vector(&dec, eta).scale.iter().enumerate() {
                assert!((0.0..1.0).contains(g));
                if dec.pre_image(i, eta) >= 0.0 {
                    assert_eq!(*g, 0.0);
                }
            }
        }
    }

    #[test]
    fn effective_weight_identity_and_half() {
        let w = DenseMatrix::from_fn(3, 2, |i, j| (i + j) as f64);
        let b = vec![1.0, 2.0, 3.0];
        let gp = GateParams::new(3, GateActivation::Identity);
        let (we, be) = effective_weight(&gp, 0.7, &w, &b).unwrap();
        assert_eq!(we, w);
        assert_eq!(be, b);
        // Sigmoid with zero affine: exactly one half.
        let gp = GateParams::new(3, GateActivation::SigmoidEncoder);
        let (we, be) = effective_weight(&gp, 0.7, &w, &b).unwrap();
        assert_eq!(we, w.scale(0.5));
        assert_eq!(be, vec![0.5, 1.0, 1.5]);
    }

    #[test]
    fn preactivation_route_trivial_gates() {
        let s = vec![1.0, -2.0, 3.0];
        let ones = GateOutput { scale: vec![1.0; 3], shift: None };
        assert_eq!(apply_gate_preactivation(&ones, &s).unwrap(), s);
        let zeros = GateOutput { scale: vec![0.0; 3], shift: None };
        assert_eq!(apply_gate_preactivation(&zeros, &s).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn conv_gate_scales_whole_channel() {
        let mut gp = GateParams::new(1, GateActivation::SigmoidEncoder);
        gp.b_hyper[0] = 0.0; // gate 0.5
        let pre = vec![2.0, 4.0, 6.0, 8.0];
        assert_eq!(conv_gate(&gp, 0.0, &pre, 4).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let id = GateParams::new(3, GateActivation::Identity);
        let pre: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(conv_gate(&id, 1.0, &pre, 4).unwrap(), pre);
    }

    #[test]
    fn conv_gate_matches_per_channel_oracle() {
        let mut rng = RngStream::new(11);
        let mut gp = GateParams::new(3, GateActivation::SqrtExpDecoder);
        for v in gp.w_hyper.iter_mut().chain(gp.b_hyper.iter_mut()) {
            *v = rng.normal();
        }
        let spatial = 5;
        let pre: Vec<f64> = (0..15).map(|_| rng.normal()).collect();
        let eta = 0.4;
        let out = conv_gate(&gp, eta, &pre, spatial).unwrap();
        let gates = gate_vector(&gp, eta);
        for c in 0..3 {
            for p in 0..spatial {
                assert_eq!(out[c * spatial + p], gates.scale[c] * pre[c * spatial + p]);
            }
        }
        assert!(conv_gate(&gp, eta, &pre, 4).is_err());
    }

    #[test]
    fn gate_backward_trivial_cases() {
        let gp = GateParams::new(3, GateActivation::SigmoidEncoder);
        let s = vec![1.0, 2.0, 3.0];
        let g = gate_backward(&gp, 0.5, &s, &[0.0; 3]).unwrap();
        assert_eq!(g.d_w_hyper, vec![0.0; 3]);
        assert_eq!(g.d_b_hyper, vec![0.0; 3]);
        assert_eq!(g.d_s, vec![0.0; 3]);

        let id = GateParams::new(3, GateActivation::Identity);
        let upstream = vec![0.5, -1.0, 2.0];
        let g = gate_backward(&id, 0.5, &s, &upstream).unwrap();
        assert_eq!(g.d_w_hyper, vec![0.0; 3]);
        assert_eq!(g.d_b_hyper, vec![0.0; 3]);
        assert_eq!(g.d_s, upstream);
    }

    #[test]
    fn gate_backward_matches_finite_differences() {
        let mut rng = RngStream::new(12);
        for activation in [
            GateActivation::SigmoidEncoder,
            GateActivation::SqrtExpDecoder,
            GateActivation::Film,
        ] {
            let m = 4;
            let mut gp = GateParams::new(m, activation);
            for v in gp.w_hyper.iter_mut() {
                *v = 0.3 * rng.normal();
            }
            for v in gp.b_hyper.iter_mut() {
                // Keep sqrt-exp pre-images safely negative and away from the
                // kink at 0 where the derivative blows up.
                *v = if activation == GateActivation::SqrtExpDecoder {
                    -1.5 + 0.3 * rng.normal()
                } else {
                    0.5 * rng.normal()
                };
            }
            if let Some(sh) = gp.shift_hyper.as_mut() {
                for v in sh.iter_mut() {
                    *v = rng.normal();
                }
            }
            let eta = 0.8;
            let s: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            let upstream: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            let loss = |gp: &GateParams, s: &[f64]| -> f64 {
                let out = apply_gate_preactivation(&gate_vector(gp, eta), s).unwrap();
                out.iter().zip(&upstream).map(|(o, u)| o * u).sum()
            };
            let grads = gate_backward(&gp, eta, &s, &upstream).unwrap();
            let h = 1e-6;
            let check = |got: f64, fd: f64, what: &str| {
                let denom = got.abs().max(fd.abs()).max(1e-9);
                assert!((got - fd).abs() / denom <= 1e-6, "{what}: {got} vs {fd}");
            };
            for i in 0..m {
                let orig = gp.w_hyper[i];
                gp.w_hyper[i] = orig + h;
                let up = loss(&gp, &s);
                gp.w_hyper[i] = orig - h;
                let dn = loss(&gp, &s);
                gp.w_hyper[i] = orig;
                check(grads.d_w_hyper[i], (up - dn) / (2.0 * h), "d_w_hyper");

                let orig = gp.b_hyper[i];
                gp.b_hyper[i] = orig + h;
                let up = loss(&gp, &s);
                gp.b_hyper[i] = orig - h;
                let dn = loss(&gp, &s);
                gp.b_hyper[i] = orig;
                check(grads.d_b_hyper[i], (up - dn) / (2.0 * h), "d_b_hyper");

                let mut s2 = s.clone();
                s2[i] += h;
                let up = loss(&gp, &s2);
                s2[i] -= 2.0 * h;
                let dn = loss(&gp, &s2);
                check(grads.d_s[i], (up - dn) / (2.0 * h), "d_s");

                if gp.shift_hyper.is_some() {
                    let orig = gp.shift_hyper.as_ref().unwrap()[i];
                    gp.shift_hyper.as_mut().unwrap()[i] = orig + h;
                    let up = loss(&gp, &s);
                    gp.shift_hyper.as_mut().unwrap()[i] = orig - h;
                    let dn = loss(&gp, &s);
                    gp.shift_hyper.as_mut().unwrap()[i] = orig;
                    check(
                        grads.d_shift_hyper.as_ref().unwrap()[i],
                        (up - dn) / (2.0 * h),
                        "d_shift_hyper",
                    );
                }
            }
        }
    }

    #[test]
    fn parameter_accounting() {
        assert_eq!(GateParams::new(128, GateActivation::SigmoidEncoder).extra_params(), 256);
        assert_eq!(GateParams::new(16, GateActivation::SqrtExpDecoder).extra_params(), 32);
        assert_eq!(GateParams::new(16, GateActivation::Film).extra_params(), 48);
    }

    #[test]
    fn conditioner_endpoints_exact() {
        let cond = BetaConditioner::new(0.01, 10.0).unwrap();
        assert_eq!(cond.normalize(cond.log_b()), 3f64.sqrt());
        assert_eq!(cond.normalize(cond.log_a()), -(3f64.sqrt()));
        // Geometric midpoint maps to 0 up to the rounding of ln(sqrt(ab)).
        let mid = (0.01f64 * 10.0).sqrt().ln();
        assert!(cond.normalize(mid).abs() < 1e-12);
        // Identity with the moment form.
        for eta in [-4.0, -1.0, 0.3, 2.0] {
            let direct = (eta - cond.mean_eta()) / cond.std_eta();
            assert!((cond.normalize(eta) - direct).abs() < 1e-12);
        }
        assert!(BetaConditioner::new(1.0, 1.0).is_err());
        assert!(BetaConditioner::new(-1.0, 1.0).is_err());
    }

    proptest! {
        // Eq. 6 route vs Eq. 9 route on random layers, all activations.
        #[test]
        fn formulation_equivalence(
            seed in 0u64..1000,
            kind in 0usize..4,
            rows in 1usize..8,
            cols in 1usize..8,
            eta in -3.0f64..3.0,
        ) {
            let activation = [
                GateActivation::SigmoidEncoder,
                GateActivation::SqrtExpDecoder,
                GateActivation::Film,
                GateActivation::Identity,
            ][kind];
            let mut rng = RngStream::new(seed);
            let w = DenseMatrix::from_fn(rows, cols, |_, _| 2.0 * rng.normal());
            let b: Vec<f64> = (0..rows).map(|_| 2.0 * rng.normal()).collect();
            let x: Vec<f64> = (0..cols).map(|_| 2.0 * rng.normal()).collect();
            let mut gp = GateParams::new(rows, activation);
            for v in gp.w_hyper.iter_mut().chain(gp.b_hyper.iter_mut()) {
                *v = rng.normal();
            }
            if let Some(sh) = gp.shift_hyper.as_mut() {
                for v in sh.iter_mut() { *v = rng.normal(); }
            }
            let (we, be) = effective_weight(&gp, eta, &w, &b).unwrap();
            let mut via_weights = we.matvec(&x);
            for (v, b) in via_weights.iter_mut().zip(&be) { *v += b; }

            let mut s = w.matvec(&x);
            for (v, b) in s.iter_mut().zip(&b) { *v += b; }
            let via_preact = apply_gate_preactivation(&gate_vector(&gp, eta), &s).unwrap();

            for (a, b) in via_weights.iter().zip(&via_preact) {
                prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }
}
