//! Residual MLP with hand-written reverse-mode gradients.
//!
//! Layout of the network:
//!
//! ```text
//! h_0     = x W_in + b_in
//! h_{l+1} = h_l + act(act(h_l) W_1 + b_1) W_2 + b_2      (one per block)
//! y       = h_L W_out + b_out
//! ```
//!
//! All weights live in one flat `f64` vector. Each dense layer stores its
//! weight as a `(fan_in, fan_out)` row-major matrix followed by its bias, so a
//! batch forward pass is a single GEMM per layer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::Rng;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    /// GELU uses the tanh approximation.
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let inner = GELU_K * (x + GELU_C * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let inner = GELU_K * (x + GELU_C * x * x * x);
                let th = inner.tanh();
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            Activation::Gelu => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Gelu),
            1 => Ok(Activation::Relu),
            other => Err(Error::Format(format!("unknown activation tag {other}"))),
        }
    }
}

/// Shape of a residual MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl NetSpec {
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        num_blocks: usize,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let spec = NetSpec {
            input_dim,
            hidden_dim,
            num_blocks,
            output_dim,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config(format!("network dimensions must be >= 1: {self:?}")));
        }
        if self.num_blocks == 0 {
            return Err(Error::Config("network needs at least one residual block".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let h = self.hidden_dim;
        (self.input_dim + 1) * h + self.num_blocks * 2 * (h + 1) * h + (h + 1) * self.output_dim
    }
}

/// A dense layer's position inside a flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn len(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }

    pub fn weight<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        let end = self.bias_offset();
        ArrayView2::from_shape((self.fan_in, self.fan_out), &params[self.offset..end])
            .expect("layout matches parameter vector")
    }

    pub fn bias<'a>(&self, params: &'a [f64]) -> ArrayView1<'a, f64> {
        let start = self.bias_offset();
        ArrayView1::from(&params[start..start + self.fan_out])
    }

    /// `x W + b` for a batch of rows.
    pub fn forward(&self, params: &[f64], x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.fan_out));
        out += &self.bias(params);
        general_mat_mul(1.0, &x, &self.weight(params), 1.0, &mut out);
        out
    }

    /// Accumulate parameter gradients for upstream gradient `g`, returning
    /// the gradient with respect to the layer input when requested.
    pub fn backward(
        &self,
        params: &[f64],
        x: ArrayView2<'_, f64>,
        g: ArrayView2<'_, f64>,
        grads: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let bias_start = self.bias_offset();
        {
            let mut dw = ArrayViewMut2::from_shape(
                (self.fan_in, self.fan_out),
                &mut grads[self.offset..bias_start],
            )
            .expect("layout matches gradient vector");
            general_mat_mul(1.0, &x.t(), &g, 1.0, &mut dw);
        }
        let db = g.sum_axis(Axis(0));
        for (dst, v) in grads[bias_start..bias_start + self.fan_out].iter_mut().zip(db.iter()) {
            *dst += v;
        }
        want_input_grad.then(|| g.dot(&self.weight(params).t()))
    }

    pub(crate) fn init(&self, params: &mut [f64], rng: &mut Rng, zero: bool) {
        let slot = &mut params[self.offset..self.offset + self.len()];
        if zero {
            slot.fill(0.0);
        } else {
            let bound = 1.0 / (self.fan_in as f64).sqrt();
            for v in slot {
                *v = rng.gen_range(-bound..bound);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub input: Dense,
    pub blocks: Vec<[Dense; 2]>,
    pub output: Dense,
    pub len: usize,
}

impl Layout {
    pub fn for_spec(spec: &NetSpec) -> Self {
        let mut offset = 0;
        let mut dense = |fan_in, fan_out| {
            let d = Dense {
                offset,
                fan_in,
                fan_out,
            };
            offset += d.len();
            d
        };
        let h = spec.hidden_dim;
        let input = dense(spec.input_dim, h);
        let blocks = (0..spec.num_blocks).map(|_| [dense(h, h), dense(h, h)]).collect();
        let output = dense(h, spec.output_dim);
        Layout {
            input,
            blocks,
            output,
            len: offset,
        }
    }
}

/// Flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    values: Vec<f64>,
}

impl NetParams {
    pub fn zeros(spec: &NetSpec) -> Self {
        NetParams {
            values: vec![0.0; spec.num_params()],
        }
    }

    pub fn from_vec(spec: &NetSpec, values: Vec<f64>) -> Result<Self> {
        check_len("parameter vector", spec.num_params(), values.len())?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric("parameter vector", i));
        }
        Ok(NetParams { values })
    }

    /// Uniform fan-in initialization; the output layer is zeroed when
    /// `zero_output` is set.
    pub fn init(spec: &NetSpec, rng: &mut Rng, zero_output: bool) -> Self {
        let layout = Layout::for_spec(spec);
        let mut values = vec![0.0; layout.len];
        layout.input.init(&mut values, rng, false);
        for [a, b] in &layout.blocks {
            a.init(&mut values, rng, false);
            b.init(&mut values, rng, false);
        }
        layout.output.init(&mut values, rng, zero_output);
        NetParams { values }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Round every entry to the nearest `f32`, matching what a checkpoint
    /// round trip produces.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }
}

/// Activations saved by a batch forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    input: Array2<f64>,
    /// Block inputs `h_l`, plus the final hidden state.
    hidden: Vec<Array2<f64>>,
    /// Block pre-activations `act(h_l) W_1 + b_1`.
    pre: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

/// A residual MLP: spec plus derived parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetSpec,
    layout: Layout,
}

impl Network {
    pub fn new(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Network {
            layout: Layout::for_spec(&spec),
            spec,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn check_params(&self, params: &NetParams) -> Result<()> {
        check_len("parameter vector", self.layout.len, params.len())
    }

    /// Single-input forward pass.
    pub fn forward(&self, params: &NetParams, input: &[f64]) -> Result<Vec<f64>> {
        check_len("network input", self.spec.input_dim, input.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        Ok(self.predict_batch(params, x)?.into_raw_vec_and_offset().0)
    }

    /// Gradient of `<forward(input), output_grad>` with respect to the parameters.
    pub fn backward(&self, params: &NetParams, input: &[f64], output_grad: &[f64]) -> Result<Vec<f64>> {
        check_len("network input", self.spec.input_dim, input.len())?;
        check_len("output gradient", self.spec.output_dim, output_grad.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let g = ArrayView2::from_shape((1, output_grad.len()), output_grad).expect("row vector");
        let (_, tape) = self.forward_batch(params, x)?;
        self.backward_batch(params, &tape, g)
    }

    /// Batch forward pass without keeping intermediate activations.
    pub fn predict_batch(&self, params: &NetParams, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_params(params)?;
        check_len("network input", self.spec.input_dim, inputs.ncols())?;
        let p = params.as_slice();
        let act = self.spec.activation;
        let mut h = self.layout.input.forward(p, inputs);
        for [first, second] in &self.layout.blocks {
            let mut a = first.forward(p, h.mapv(|v| act.apply(v)).view());
            a.mapv_inplace(|v| act.apply(v));
            h += &second.forward(p, a.view());
        }
        Ok(self.layout.output.forward(p, h.view()))
    }

    /// Batch forward pass that records what [`Network::backward_batch`] needs.
    pub fn forward_batch(
        &self,
        params: &NetParams,
        inputs: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Tape)> {
        self.check_params(params)?;
        check_len("network input", self.spec.input_dim, inputs.ncols())?;
        let p = params.as_slice();
        let act = self.spec.activation;
        let mut hidden = Vec::with_capacity(self.spec.num_blocks + 1);
        let mut pre = Vec::with_capacity(self.spec.num_blocks);
        let mut h = self.layout.input.forward(p, inputs);
        for [first, second] in &self.layout.blocks {
            let a = first.forward(p, h.mapv(|v| act.apply(v)).view());
            let r = a.mapv(|v| act.apply(v));
            let next = &h + &second.forward(p, r.view());
            hidden.push(h);
            pre.push(a);
            h = next;
        }
        let out = self.layout.output.forward(p, h.view());
        hidden.push(h);
        Ok((
            out,
            Tape {
                input: inputs.to_owned(),
                hidden,
                pre,
            },
        ))
    }

    /// Parameter gradient of `sum(output .* output_grad)` over the batch.
    ///
    /// Layer indices in numeric errors count from the input layer (0) through
    /// the residual blocks (1..=L) to the output layer (L+1).
    pub fn backward_batch(
        &self,
        params: &NetParams,
        tape: &Tape,
        output_grad: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>> {
        self.check_params(params)?;
        check_len("output gradient", self.spec.output_dim, output_grad.ncols())?;
        check_len("output gradient rows", tape.batch_size(), output_grad.nrows())?;
        let p = params.as_slice();
        let act = self.spec.activation;
        let num_blocks = self.spec.num_blocks;
        let mut grads = vec![0.0; self.layout.len];

        let last = &tape.hidden[num_blocks];
        let mut g = self
            .layout
            .output
            .backward(p, last.view(), output_grad, &mut grads, true)
            .expect("input gradient requested");
        ensure_finite(&g, num_blocks + 1)?;

        for (l, [first, second]) in self.layout.blocks.iter().enumerate().rev() {
            let h = &tape.hidden[l];
            let a = &tape.pre[l];
            let r = a.mapv(|v| act.apply(v));
            let mut g_a = second
                .backward(p, r.view(), g.view(), &mut grads, true)
                .expect("input gradient requested");
            Zip::from(&mut g_a).and(a).for_each(|ga, &av| *ga *= act.derivative(av));
            let u = h.mapv(|v| act.apply(v));
            let mut g_u = first
                .backward(p, u.view(), g_a.view(), &mut grads, true)
                .expect("input gradient requested");
            Zip::from(&mut g_u).and(h).for_each(|gu, &hv| *gu *= act.derivative(hv));
            g += &g_u;
            ensure_finite(&g, l + 1)?;
        }

        self.layout
            .input
            .backward(p, tape.input.view(), g.view(), &mut grads, false);
        if let Some(i) = grads.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric("parameter gradient", i));
        }
        Ok(grads)
    }
}

fn ensure_finite(g: &Array2<f64>, layer: usize) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric("backward pass (layer)", layer))
    }
}
