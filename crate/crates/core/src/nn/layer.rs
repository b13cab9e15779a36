//! Dense and small convolutional layers with optional row/channel gates and
//! hand-written reverse-mode rules.
//!
//! Gating happens on the pre-activations, before the nonlinearity. The conv
//! path lowers to im2col so both layer kinds share the same matrix backward.

use crate::error::{Error, Result};
use crate::gate::{self, GateActivation, GateOutput, GateParams};
use crate::linalg::{DenseMatrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Relu,
    Tanh,
    Identity,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Relu => x.max(0.0),
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Identity => x,
        }
    }

    /// Derivative given the pre-activation and the activation output.
    #[inline]
    pub fn derivative(self, preact: f64, out: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if preact > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Tanh => 1.0 - out * out,
            Nonlinearity::Identity => 1.0,
        }
    }
}

/// Everything a layer's backward pass needs from its forward pass.
#[derive(Debug, Clone)]
pub struct LayerTape {
    pub input: Vec<f64>,
    /// im2col lowering of the input (conv layers only).
    pub col: Option<DenseMatrix>,
    pub s_base: Vec<f64>,
    pub gate: Option<GateOutput>,
    pub s_gated: Vec<f64>,
    pub out: Vec<f64>,
}

/// Gradient sink for one layer; slices point into the flat gradient buffer.
pub struct LayerGradSink<'a> {
    pub d_weight: &'a mut [f64],
    pub d_bias: &'a mut [f64],
    pub d_gate_w: Option<&'a mut [f64]>,
    pub d_gate_b: Option<&'a mut [f64]>,
    pub d_gate_shift: Option<&'a mut [f64]>,
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// m_out x m_in.
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub nonlinearity: Nonlinearity,
    pub gate: Option<GateParams>,
}

impl DenseLayer {
    pub fn new_random(m_out: usize, m_in: usize, nonlinearity: Nonlinearity, rng: &mut RngStream) -> Self {
        // Kaiming-uniform, fan-in.
        let bound = (6.0 / m_in as f64).sqrt();
        Self {
            weight: DenseMatrix::from_fn(m_out, m_in, |_, _| rng.uniform(-bound, bound)),
            bias: vec![0.0; m_out],
            nonlinearity,
            gate: None,
        }
    }

    pub fn with_gate(mut self, activation: GateActivation) -> Self {
        self.gate = Some(default_gate_init(self.out_dim(), activation));
        self
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, input: &[f64], eta: f64) -> LayerTape {
        let mut s_base = self.weight.matvec(input);
        for (s, b) in s_base.iter_mut().zip(&self.bias) {
            *s += b;
        }
        let (gate, s_gated) = match &self.gate {
            Some(gp) => {
                let g = gate::gate_vector(gp, eta);
                let s = gate::apply_gate_preactivation(&g, &s_base).expect("gate width");
                (Some(g), s)
            }
            None => (None, s_base.clone()),
        };
        let out = s_gated.iter().map(|&s| self.nonlinearity.apply(s)).collect();
        LayerTape { input: input.to_vec(), col: None, s_base, gate, s_gated, out }
    }

    /// Accumulates parameter gradients into `sink` and returns dL/d(input).
    /// `upstream` is dL/d(out).
    pub fn backward(
        &self,
        tape: &LayerTape,
        upstream: &[f64],
        eta: f64,
        sink: &mut LayerGradSink<'_>,
    ) -> Vec<f64> {
        let m_out = self.out_dim();
        debug_assert_eq!(upstream.len(), m_out);
        let mut d_s_gated: Vec<f64> = (0..m_out)
            .map(|i| upstream[i] * self.nonlinearity.derivative(tape.s_gated[i], tape.out[i]))
            .collect();
        let d_s_base = match &self.gate {
            Some(gp) => {
                let grads = gate::gate_backward(gp, eta, &tape.s_base, &d_s_gated).expect("gate width");
                if let Some(dw) = sink.d_gate_w.as_deref_mut() {
                    for (a, g) in dw.iter_mut().zip(&grads.d_w_hyper) {
                        *a += g;
                    }
                }
                if let Some(db) = sink.d_gate_b.as_deref_mut() {
                    for (a, g) in db.iter_mut().zip(&grads.d_b_hyper) {
                        *a += g;
                    }
                }
                if let (Some(ds), Some(g)) = (sink.d_gate_shift.as_deref_mut(), &grads.d_shift_hyper) {
                    for (a, g) in ds.iter_mut().zip(g) {
                        *a += g;
                    }
                }
                grads.d_s
            }
            None => std::mem::take(&mut d_s_gated),
        };
        for (i, &ds) in d_s_base.iter().enumerate() {
            let wrow = &mut sink.d_weight[i * self.in_dim()..(i + 1) * self.in_dim()];
            for (w, x) in wrow.iter_mut().zip(&tape.input) {
                *w += ds * x;
            }
            sink.d_bias[i] += ds;
        }
        self.weight.tmatvec(&d_s_base)
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// C_out x (C_in * K * K).
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub nonlinearity: Nonlinearity,
    pub gate: Option<GateParams>,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new_random(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        nonlinearity: Nonlinearity,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if stride == 0 || stride > 2 {
            return Err(Error::domain("ConvLayer::new_random", "stride must be 1 or 2"));
        }
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let layer = Self {
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel,
            stride,
            padding,
            weight: DenseMatrix::from_fn(out_channels, fan_in, |_, _| rng.uniform(-bound, bound)),
            bias: vec![0.0; out_channels],
            nonlinearity,
            gate: None,
        };
        if layer.out_h() == 0 || layer.out_w() == 0 {
            return Err(Error::dimension("ConvLayer::new_random", "empty spatial output"));
        }
        Ok(layer)
    }

    pub fn with_gate(mut self, activation: GateActivation) -> Self {
        self.gate = Some(default_gate_init(self.out_channels, activation));
        self
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_dim(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_dim(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    fn im2col(&self, input: &[f64]) -> DenseMatrix {
        let (k, oh, ow) = (self.kernel, self.out_h(), self.out_w());
        let mut col = DenseMatrix::zeros(self.in_channels * k * k, oh * ow);
        for c in 0..self.in_channels {
            let plane = &input[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            col.set(row, oy * ow + ox, plane[iy as usize * self.in_w + ix as usize]);
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, d_col: &DenseMatrix) -> Vec<f64> {
        let (k, oh, ow) = (self.kernel, self.out_h(), self.out_w());
        let mut d_input = vec![0.0; self.in_dim()];
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            d_input[c * self.in_h * self.in_w + iy as usize * self.in_w + ix as usize] +=
                                d_col.get(row, oy * ow + ox);
                        }
                    }
                }
            }
        }
        d_input
    }

    pub fn forward(&self, input: &[f64], eta: f64) -> LayerTape {
        debug_assert_eq!(input.len(), self.in_dim());
        let col = self.im2col(input);
        let spatial = self.out_h() * self.out_w();
        let mut s_base = self.weight.matmul(&col); // C_out x spatial
        for c in 0..self.out_channels {
            for v in s_base.row_mut(c) {
                *v += self.bias[c];
            }
        }
        let s_base = s_base.data().to_vec();
        let (gate_out, s_gated) = match &self.gate {
            Some(gp) => {
                let g = gate::gate_vector(gp, eta);
                let s = gate::conv_gate(gp, eta, &s_base, spatial).expect("channel count");
                (Some(g), s)
            }
            None => (None, s_base.clone()),
        };
        let out = s_gated.iter().map(|&s| self.nonlinearity.apply(s)).collect();
        LayerTape { input: input.to_vec(), col: Some(col), s_base, gate: gate_out, s_gated, out }
    }

    pub fn backward(
        &self,
        tape: &LayerTape,
        upstream: &[f64],
        eta: f64,
        sink: &mut LayerGradSink<'_>,
    ) -> Vec<f64> {
        let spatial = self.out_h() * self.out_w();
        let d_s_gated: Vec<f64> = (0..self.out_dim())
            .map(|i| upstream[i] * self.nonlinearity.derivative(tape.s_gated[i], tape.out[i]))
            .collect();
        let d_s_base: Vec<f64> = match &self.gate {
            Some(gp) => {
                let gate_out = tape.gate.as_ref().expect("gated tape");
                let mut d_s_base = vec![0.0; d_s_gated.len()];
                for c in 0..self.out_channels {
                    let seg = c * spatial..(c + 1) * spatial;
                    let du: f64 = d_s_gated[seg.clone()]
                        .iter()
                        .zip(&tape.s_base[seg.clone()])
                        .map(|(d, s)| d * s)
                        .sum::<f64>()
                        * gp.activation.derivative(gp.pre_image(c, eta));
                    if let Some(dw) = sink.d_gate_w.as_deref_mut() {
                        dw[c] += du * eta;
                    }
                    if let Some(db) = sink.d_gate_b.as_deref_mut() {
                        db[c] += du;
                    }
                    if let Some(ds) = sink.d_gate_shift.as_deref_mut() {
                        ds[c] += eta * d_s_gated[seg.clone()].iter().sum::<f64>();
                    }
                    let g = gate_out.scale[c];
                    for (o, d) in d_s_base[seg.clone()].iter_mut().zip(&d_s_gated[seg]) {
                        *o = g * d;
                    }
                }
                d_s_base
            }
            None => d_s_gated,
        };
        let col = tape.col.as_ref().expect("conv tape has col");
        // dW += d_s_base (C_out x P) * col^T.
        for c in 0..self.out_channels {
            let drow = &d_s_base[c * spatial..(c + 1) * spatial];
            let wrow = &mut sink.d_weight[c * col.rows()..(c + 1) * col.rows()];
            for (r, w) in wrow.iter_mut().enumerate() {
                *w += crate::linalg::dot(drow, col.row(r));
            }
            sink.d_bias[c] += drow.iter().sum::<f64>();
        }
        // d_col = W^T * d_s_base, then scatter back to the input.
        let mut d_col = DenseMatrix::zeros(col.rows(), col.cols());
        for c in 0..self.out_channels {
            let drow = &d_s_base[c * spatial..(c + 1) * spatial];
            let wrow = self.weight.row(c);
            for (r, &w) in wrow.iter().enumerate() {
                let target = d_col.row_mut(r);
                for (t, d) in target.iter_mut().zip(drow) {
                    *t += w * d;
                }
            }
        }
        self.col2im(&d_col)
    }
}

/// Gate initialization: w_hyper = 0 everywhere; b_hyper = 0 for sigmoid
/// (gate 0.5) but -1 for sqrt-exp gates. b = 0 would park sqrt-exp gates at
/// their hard zero (zero subgradient), blocking all learning through the
/// layer.
pub fn default_gate_init(width: usize, activation: GateActivation) -> GateParams {
    let mut gp = GateParams::new(width, activation);
    if activation == GateActivation::SqrtExpDecoder {
        for b in gp.b_hyper.iter_mut() {
            *b = -1.0;
        }
    }
    gp
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(DenseLayer),
    Conv(ConvLayer),
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Dense(l) => l.in_dim(),
            Layer::Conv(l) => l.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Dense(l) => l.out_dim(),
            Layer::Conv(l) => l.out_dim(),
        }
    }

    pub fn gate(&self) -> Option<&GateParams> {
        match self {
            Layer::Dense(l) => l.gate.as_ref(),
            Layer::Conv(l) => l.gate.as_ref(),
        }
    }

    pub fn gate_mut(&mut self) -> Option<&mut GateParams> {
        match self {
            Layer::Dense(l) => l.gate.as_mut(),
            Layer::Conv(l) => l.gate.as_mut(),
        }
    }

    pub fn weight(&self) -> &DenseMatrix {
        match self {
            Layer::Dense(l) => &l.weight,
            Layer::Conv(l) => &l.weight,
        }
    }

    pub fn weight_mut(&mut self) -> &mut DenseMatrix {
        match self {
            Layer::Dense(l) => &mut l.weight,
            Layer::Conv(l) => &mut l.weight,
        }
    }

    pub fn bias(&self) -> &[f64] {
        match self {
            Layer::Dense(l) => &l.bias,
            Layer::Conv(l) => &l.bias,
        }
    }

    pub fn bias_mut(&mut self) -> &mut Vec<f64> {
        match self {
            Layer::Dense(l) => &mut l.bias,
            Layer::Conv(l) => &mut l.bias,
        }
    }

    pub fn forward(&self, input: &[f64], eta: f64) -> LayerTape {
        match self {
            Layer::Dense(l) => l.forward(input, eta),
            Layer::Conv(l) => l.forward(input, eta),
        }
    }

    pub fn backward(
        &self,
        tape: &LayerTape,
        upstream: &[f64],
        eta: f64,
        sink: &mut LayerGradSink<'_>,
    ) -> Vec<f64> {
        match self {
            Layer::Dense(l) => l.backward(tape, upstream, eta, sink),
            Layer::Conv(l) => l.backward(tape, upstream, eta, sink),
        }
    }
}
