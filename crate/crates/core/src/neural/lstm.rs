use rand::Rng;

use super::{axpy, dot, sigmoid, Parameters, Tensor};
use crate::error::{Error, Result};

/// One gate's input matrix `W` (`H x D`), recurrent matrix `U` (`H x H`) and bias `b` (`H`).
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

impl GateParams {
    fn zeros(input: usize, hidden: usize) -> Self {
        GateParams {
            w: Tensor::zeros(&[hidden, input]),
            u: Tensor::zeros(&[hidden, hidden]),
            b: Tensor::zeros(&[hidden]),
        }
    }

    fn init<R: Rng>(input: usize, hidden: usize, bias: f64, rng: &mut R) -> Self {
        let mut gate = GateParams {
            w: Tensor::uniform(&[hidden, input], 1.0 / (input as f64).sqrt(), rng),
            u: Tensor::uniform(&[hidden, hidden], 1.0 / (hidden as f64).sqrt(), rng),
            b: Tensor::zeros(&[hidden]),
        };
        gate.b.data_mut().fill(bias);
        gate
    }

    /// `out = b + W x + U h`
    fn preactivation(&self, x: &[f64], h: &[f64], out: &mut [f64]) {
        for (r, z) in out.iter_mut().enumerate() {
            *z = self.b.data()[r] + dot(self.w.row(r), x) + dot(self.u.row(r), h);
        }
    }
}

/// Single-layer LSTM with input (`i`), forget (`f`), output (`o`) and cell (`g`) gates.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input_gate: GateParams,
    pub forget_gate: GateParams,
    pub output_gate: GateParams,
    pub cell_gate: GateParams,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            input_gate: GateParams::zeros(input, hidden),
            forget_gate: GateParams::zeros(input, hidden),
            output_gate: GateParams::zeros(input, hidden),
            cell_gate: GateParams::zeros(input, hidden),
        }
    }

    /// `W` uniform in `±1/sqrt(D)`, `U` uniform in `±1/sqrt(H)`, biases zero
    /// except the forget gate bias, which is 1.
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        LstmParams {
            input_gate: GateParams::init(input, hidden, 0.0, rng),
            forget_gate: GateParams::init(input, hidden, 1.0, rng),
            output_gate: GateParams::init(input, hidden, 0.0, rng),
            cell_gate: GateParams::init(input, hidden, 0.0, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_gate.w.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.input_gate.w.shape()[0]
    }

    fn gates(&self) -> [(&'static str, &GateParams); 4] {
        [
            ("i", &self.input_gate),
            ("f", &self.forget_gate),
            ("o", &self.output_gate),
            ("g", &self.cell_gate),
        ]
    }
}

impl Parameters for LstmParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(12);
        for (name, gate) in self.gates() {
            out.push((format!("w_{name}"), &gate.w));
            out.push((format!("u_{name}"), &gate.u));
            out.push((format!("b_{name}"), &gate.b));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(12);
        for (name, gate) in [
            ("i", &mut self.input_gate),
            ("f", &mut self.forget_gate),
            ("o", &mut self.output_gate),
            ("g", &mut self.cell_gate),
        ] {
            out.push((format!("w_{name}"), &mut gate.w));
            out.push((format!("u_{name}"), &mut gate.u));
            out.push((format!("b_{name}"), &mut gate.b));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Step {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Per-step activations saved for backpropagation through time.
#[derive(Debug, Clone)]
pub struct LstmCache {
    steps: Vec<Step>,
}

impl LstmCache {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Runs the sequence (`L x D`, oldest row first) and returns the last hidden state.
pub fn lstm_forward(seq: &Tensor, params: &LstmParams, h0: &[f64], c0: &[f64]) -> Result<(Tensor, LstmCache)> {
    let (len, d) = seq.matrix_dims()?;
    let hidden = params.hidden_dim();
    if d != params.input_dim() {
        return Err(Error::Shape(format!(
            "sequence {:?} has feature width {d}, LSTM expects {}",
            seq.shape(),
            params.input_dim()
        )));
    }
    if h0.len() != hidden || c0.len() != hidden {
        return Err(Error::Shape(format!(
            "initial state lengths {} / {} do not match hidden size {hidden}",
            h0.len(),
            c0.len()
        )));
    }
    if len == 0 {
        return Err(Error::Shape("LSTM sequence must have at least one step".into()));
    }
    let mut h = h0.to_vec();
    let mut c = c0.to_vec();
    let mut steps = Vec::with_capacity(len);
    for t in 0..len {
        let x = seq.row(t).to_vec();
        let mut i = vec![0.0; hidden];
        let mut f = vec![0.0; hidden];
        let mut o = vec![0.0; hidden];
        let mut g = vec![0.0; hidden];
        params.input_gate.preactivation(&x, &h, &mut i);
        params.forget_gate.preactivation(&x, &h, &mut f);
        params.output_gate.preactivation(&x, &h, &mut o);
        params.cell_gate.preactivation(&x, &h, &mut g);
        let mut c_new = vec![0.0; hidden];
        let mut h_new = vec![0.0; hidden];
        let mut tanh_c = vec![0.0; hidden];
        for k in 0..hidden {
            i[k] = sigmoid(i[k]);
            f[k] = sigmoid(f[k]);
            o[k] = sigmoid(o[k]);
            g[k] = g[k].tanh();
            c_new[k] = f[k] * c[k] + i[k] * g[k];
            tanh_c[k] = c_new[k].tanh();
            h_new[k] = o[k] * tanh_c[k];
        }
        let h_prev = std::mem::replace(&mut h, h_new);
        let c_prev = std::mem::replace(&mut c, c_new);
        steps.push(Step {
            x,
            h_prev,
            c_prev,
            i,
            f,
            o,
            g,
            tanh_c,
        });
    }
    Ok((Tensor::vector(h), LstmCache { steps }))
}

#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub params: LstmParams,
    /// `L x D`
    pub input: Tensor,
    pub h0: Vec<f64>,
    pub c0: Vec<f64>,
}

/// Backpropagation through time from a gradient on the final hidden state.
pub fn lstm_backward(params: &LstmParams, cache: &LstmCache, grad_h: &[f64]) -> Result<LstmGrads> {
    let mut grads = LstmParams::zeros(params.input_dim(), params.hidden_dim());
    let (input, h0, c0) = lstm_backward_into(params, cache, grad_h, &mut grads)?;
    Ok(LstmGrads {
        params: grads,
        input,
        h0,
        c0,
    })
}

/// Like [`lstm_backward`] but adds parameter gradients into `grads`.
/// Returns the gradients for the input sequence, `h0` and `c0`.
pub fn lstm_backward_into(
    params: &LstmParams,
    cache: &LstmCache,
    grad_h: &[f64],
    grads: &mut LstmParams,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let hidden = params.hidden_dim();
    let d = params.input_dim();
    if grad_h.len() != hidden {
        return Err(Error::Shape(format!(
            "hidden gradient has length {}, expected {hidden}",
            grad_h.len()
        )));
    }
    let len = cache.steps.len();
    let mut dx = Tensor::zeros(&[len, d]);
    let mut dh = grad_h.to_vec();
    let mut dc = vec![0.0; hidden];
    let mut dz_i = vec![0.0; hidden];
    let mut dz_f = vec![0.0; hidden];
    let mut dz_o = vec![0.0; hidden];
    let mut dz_g = vec![0.0; hidden];
    for t in (0..len).rev() {
        let s = &cache.steps[t];
        for k in 0..hidden {
            let tc = s.tanh_c[k];
            dz_o[k] = dh[k] * tc * s.o[k] * (1.0 - s.o[k]);
            dc[k] += dh[k] * s.o[k] * (1.0 - tc * tc);
            dz_i[k] = dc[k] * s.g[k] * s.i[k] * (1.0 - s.i[k]);
            dz_g[k] = dc[k] * s.i[k] * (1.0 - s.g[k] * s.g[k]);
            dz_f[k] = dc[k] * s.c_prev[k] * s.f[k] * (1.0 - s.f[k]);
        }
        let mut dh_prev = vec![0.0; hidden];
        let dx_row = dx.row_mut(t);
        for (gate, grad, dz) in [
            (&params.input_gate, &mut grads.input_gate, &dz_i),
            (&params.forget_gate, &mut grads.forget_gate, &dz_f),
            (&params.output_gate, &mut grads.output_gate, &dz_o),
            (&params.cell_gate, &mut grads.cell_gate, &dz_g),
        ] {
            axpy(1.0, dz, grad.b.data_mut());
            for (r, &z) in dz.iter().enumerate() {
                if z == 0.0 {
                    continue;
                }
                axpy(z, &s.x, grad.w.row_mut(r));
                axpy(z, &s.h_prev, grad.u.row_mut(r));
                axpy(z, gate.w.row(r), dx_row);
                axpy(z, gate.u.row(r), &mut dh_prev);
            }
        }
        for (c, f) in dc.iter_mut().zip(&s.f) {
            *c *= f;
        }
        dh = dh_prev;
    }
    Ok((dx, dh, dc))
}
