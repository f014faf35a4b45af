//! Recurrent surrogate network: an input FC stack, a single LSTM cell and an
//! output FC stack, exposed as discrete dynamics `x⁺ = f(x, u)` and output map
//! `y = g(x, u)` over the 8-dimensional LSTM state.

mod file;

pub use file::{load_weights, save_weights, WeightsFileError, FORMAT_VERSION, MAGIC};

use nalgebra::{DMatrix, SMatrix};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Physical model inputs: previous IMEP and CA50, fuel DOI, water DOI, NVO.
pub const N_INPUTS: usize = 5;
/// Physical model outputs: IMEP, CA50, NOx, MPRR.
pub const N_OUTPUTS: usize = 4;
/// LSTM hidden size.
pub const N_HIDDEN: usize = 4;
/// Cell plus hidden states.
pub const N_STATE: usize = 2 * N_HIDDEN;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("layer {layer}: expected input of width {expected}, got {got}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("layer {layer}: non-finite value")]
    NonFinite { layer: usize },
    #[error("layer {layer} is not a {expected:?} layer")]
    WrongKind { layer: usize, expected: LayerKind },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("parameter vector has {got} entries, spec requires {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("invalid normalization: {0}")]
    InvalidNormalization(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative written in terms of the activation's output.
    #[inline]
    pub fn slope(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Lstm,
}

/// One layer of the network. For the LSTM layer `activation` selects the
/// candidate and cell-output squashing; its gates are always sigmoids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input_width: usize,
    pub output_width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn dense(input_width: usize, output_width: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense,
            input_width,
            output_width,
            activation,
        }
    }

    pub fn lstm(input_width: usize, hidden: usize) -> Self {
        Self {
            kind: LayerKind::Lstm,
            input_width,
            output_width: hidden,
            activation: Activation::Tanh,
        }
    }

    pub fn param_count(&self) -> usize {
        let (i, o) = (self.input_width, self.output_width);
        match self.kind {
            LayerKind::Dense => o * i + o,
            LayerKind::Lstm => 4 * o * i + 4 * o * o + 4 * o,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl Default for NetworkSpec {
    /// FC 5→24→24→16 (tanh), LSTM 16→4, FC 4→24→24 (tanh) →4 (linear).
    fn default() -> Self {
        Self::from_widths(&[24, 24, 16], &[24, 24])
    }
}

impl NetworkSpec {
    /// Builds the standard topology from hidden widths. `input_widths` are the
    /// outputs of the input FC stack (the last one feeds the LSTM);
    /// `output_widths` are the hidden widths of the output stack, which always
    /// ends in a linear layer of width [`N_OUTPUTS`].
    pub fn from_widths(input_widths: &[usize], output_widths: &[usize]) -> Self {
        let mut layers = Vec::new();
        let mut width = N_INPUTS;
        for &w in input_widths {
            layers.push(LayerSpec::dense(width, w, Activation::Tanh));
            width = w;
        }
        layers.push(LayerSpec::lstm(width, N_HIDDEN));
        width = N_HIDDEN;
        for &w in output_widths {
            layers.push(LayerSpec::dense(width, w, Activation::Tanh));
            width = w;
        }
        layers.push(LayerSpec::dense(width, N_OUTPUTS, Activation::Linear));
        Self { layers }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let invalid = |m: String| Err(NnError::InvalidSpec(m));
        let lstm: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == LayerKind::Lstm)
            .map(|(i, _)| i)
            .collect();
        if lstm.len() != 1 {
            return invalid(format!("expected exactly one lstm layer, found {}", lstm.len()));
        }
        let Some(first) = self.layers.first() else {
            return invalid("no layers".into());
        };
        if first.input_width != N_INPUTS {
            return invalid(format!("first layer must take {N_INPUTS} inputs"));
        }
        if self.layers.last().map(|l| l.output_width) != Some(N_OUTPUTS) {
            return invalid(format!("last layer must emit {N_OUTPUTS} outputs"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.input_width == 0 || l.output_width == 0 {
                return invalid(format!("layer {i} has zero width"));
            }
            if l.kind == LayerKind::Lstm && l.output_width != N_HIDDEN {
                return invalid(format!("lstm layer must have hidden size {N_HIDDEN}"));
            }
            if i > 0 && self.layers[i - 1].output_width != l.input_width {
                return invalid(format!("layer {i} input width does not chain"));
            }
        }
        Ok(())
    }

    pub fn lstm_index(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.kind == LayerKind::Lstm)
            .expect("validated spec has an lstm layer")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Start offset of each layer inside the flat parameter block.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = acc;
                acc += l.param_count();
                o
            })
            .collect()
    }
}

/// Per-channel affine normalization: `normalized = (physical - offset) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_offset: [f64; N_INPUTS],
    pub input_scale: [f64; N_INPUTS],
    pub output_offset: [f64; N_OUTPUTS],
    pub output_scale: [f64; N_OUTPUTS],
}

impl Default for Normalization {
    fn default() -> Self {
        Self::identity()
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            input_offset: [0.0; N_INPUTS],
            input_scale: [1.0; N_INPUTS],
            output_offset: [0.0; N_OUTPUTS],
            output_scale: [1.0; N_OUTPUTS],
        }
    }

    /// Z-score constants from data. Channels with (near) zero spread get scale 1.
    pub fn fit(inputs: &[ModelInput], outputs: &[ModelOutput]) -> Self {
        fn moments<const D: usize>(rows: impl Iterator<Item = [f64; D]>) -> ([f64; D], [f64; D]) {
            let mut n = 0.0;
            let mut mean = [0.0; D];
            let mut m2 = [0.0; D];
            for row in rows {
                n += 1.0;
                for j in 0..D {
                    let d = row[j] - mean[j];
                    mean[j] += d / n;
                    m2[j] += d * (row[j] - mean[j]);
                }
            }
            let mut std = [1.0; D];
            if n > 0.0 {
                for j in 0..D {
                    let s = (m2[j] / n).sqrt();
                    std[j] = if s > 1e-12 { s } else { 1.0 };
                }
            }
            (mean, std)
        }
        let (input_offset, input_scale) = moments(inputs.iter().map(ModelInput::to_array));
        let (output_offset, output_scale) = moments(outputs.iter().map(ModelOutput::to_array));
        Self {
            input_offset,
            input_scale,
            output_offset,
            output_scale,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let scales = self.input_scale.iter().chain(self.output_scale.iter());
        if scales.clone().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(NnError::InvalidNormalization(
                "scale constants must be strictly positive".into(),
            ));
        }
        let offsets = self.input_offset.iter().chain(self.output_offset.iter());
        if offsets.clone().any(|o| !o.is_finite()) {
            return Err(NnError::InvalidNormalization("non-finite offset".into()));
        }
        Ok(())
    }

    pub fn normalize_input(&self, u: &ModelInput) -> [f64; N_INPUTS] {
        let a = u.to_array();
        std::array::from_fn(|j| (a[j] - self.input_offset[j]) / self.input_scale[j])
    }

    pub fn normalize_output(&self, y: &ModelOutput) -> [f64; N_OUTPUTS] {
        let a = y.to_array();
        std::array::from_fn(|j| (a[j] - self.output_offset[j]) / self.output_scale[j])
    }

    pub fn denormalize_output(&self, yn: &[f64; N_OUTPUTS]) -> ModelOutput {
        ModelOutput::from_array(std::array::from_fn(|j| {
            yn[j] * self.output_scale[j] + self.output_offset[j]
        }))
    }
}

/// LSTM internal state `x(k) = [c(k-1); h(k-1)]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LstmState {
    pub c: [f64; N_HIDDEN],
    pub h: [f64; N_HIDDEN],
}

impl LstmState {
    pub fn to_array(&self) -> [f64; N_STATE] {
        let mut v = [0.0; N_STATE];
        v[..N_HIDDEN].copy_from_slice(&self.c);
        v[N_HIDDEN..].copy_from_slice(&self.h);
        v
    }

    pub fn from_array(v: &[f64; N_STATE]) -> Self {
        let mut s = Self::default();
        s.c.copy_from_slice(&v[..N_HIDDEN]);
        s.h.copy_from_slice(&v[N_HIDDEN..]);
        s
    }

    pub fn is_finite(&self) -> bool {
        self.c.iter().chain(self.h.iter()).all(|v| v.is_finite())
    }
}

/// Model input vector in its fixed channel order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelInput {
    /// bar
    pub imep_prev: f64,
    /// CAD aTDC
    pub ca50_prev: f64,
    /// ms
    pub doi_fuel: f64,
    /// ms
    pub doi_water: f64,
    /// CAD
    pub nvo: f64,
}

impl ModelInput {
    pub fn to_array(&self) -> [f64; N_INPUTS] {
        [
            self.imep_prev,
            self.ca50_prev,
            self.doi_fuel,
            self.doi_water,
            self.nvo,
        ]
    }

    pub fn from_array(a: [f64; N_INPUTS]) -> Self {
        Self {
            imep_prev: a[0],
            ca50_prev: a[1],
            doi_fuel: a[2],
            doi_water: a[3],
            nvo: a[4],
        }
    }
}

/// Model output vector in its fixed channel order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    /// bar
    pub imep: f64,
    /// CAD aTDC
    pub ca50: f64,
    /// ppm
    pub nox: f64,
    /// bar/CAD
    pub mprr: f64,
}

impl ModelOutput {
    pub fn to_array(&self) -> [f64; N_OUTPUTS] {
        [self.imep, self.ca50, self.nox, self.mprr]
    }

    pub fn from_array(a: [f64; N_OUTPUTS]) -> Self {
        Self {
            imep: a[0],
            ca50: a[1],
            nox: a[2],
            mprr: a[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// First-order sensitivities of one model step, in physical input/output units
/// and with the state ordered `[c; h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelJacobians {
    pub state_state: SMatrix<f64, N_STATE, N_STATE>,
    pub state_input: SMatrix<f64, N_STATE, N_INPUTS>,
    pub output_state: SMatrix<f64, N_OUTPUTS, N_STATE>,
    pub output_input: SMatrix<f64, N_OUTPUTS, N_INPUTS>,
}

/// Borrowed view of a single layer and its parameters.
#[derive(Debug, Clone, Copy)]
pub struct Layer<'a> {
    pub index: usize,
    pub spec: LayerSpec,
    pub params: &'a [f64],
}

impl<'a> Layer<'a> {
    pub fn new(index: usize, spec: LayerSpec, params: &'a [f64]) -> Result<Self, NnError> {
        if params.len() != spec.param_count() {
            return Err(NnError::ParamCount {
                expected: spec.param_count(),
                got: params.len(),
            });
        }
        Ok(Self {
            index,
            spec,
            params,
        })
    }

    fn split_dense(&self) -> (&'a [f64], &'a [f64]) {
        self.params
            .split_at(self.spec.output_width * self.spec.input_width)
    }

    fn split_lstm(&self) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let (i, h) = (self.spec.input_width, self.spec.output_width);
        let (wx, rest) = self.params.split_at(4 * h * i);
        let (wh, b) = rest.split_at(4 * h * h);
        (wx, wh, b)
    }

    fn check(&self, kind: LayerKind, width: usize) -> Result<(), NnError> {
        if self.spec.kind != kind {
            return Err(NnError::WrongKind {
                layer: self.index,
                expected: kind,
            });
        }
        if width != self.spec.input_width {
            return Err(NnError::DimensionMismatch {
                layer: self.index,
                expected: self.spec.input_width,
                got: width,
            });
        }
        Ok(())
    }

    /// `activation(W x + b)`
    pub fn dense_forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check(LayerKind::Dense, x.len())?;
        let mut out = vec![0.0; self.spec.output_width];
        self.dense_into(x, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite { layer: self.index });
        }
        Ok(out)
    }

    fn dense_into(&self, x: &[f64], out: &mut [f64]) {
        let (w, b) = self.split_dense();
        let n_in = self.spec.input_width;
        for (r, o) in out.iter_mut().enumerate() {
            let row = &w[r * n_in..(r + 1) * n_in];
            let z = b[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            *o = self.spec.activation.apply(z);
        }
    }

    /// Standard LSTM cell update with gate order (input, forget, candidate, output).
    pub fn lstm_step(&self, state: &LstmState, x: &[f64]) -> Result<LstmState, NnError> {
        self.check(LayerKind::Lstm, x.len())?;
        let cell = self.lstm_cell(state, x);
        if !cell.next.is_finite() {
            return Err(NnError::NonFinite { layer: self.index });
        }
        Ok(cell.next)
    }

    fn lstm_cell(&self, state: &LstmState, x: &[f64]) -> LstmCell {
        let (wx, wh, b) = self.split_lstm();
        let n_in = self.spec.input_width;
        let act = self.spec.activation;
        let mut pre = [0.0; 4 * N_HIDDEN];
        for (r, p) in pre.iter_mut().enumerate() {
            let rx = &wx[r * n_in..(r + 1) * n_in];
            let rh = &wh[r * N_HIDDEN..(r + 1) * N_HIDDEN];
            *p = b[r]
                + rx.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                + rh.iter().zip(&state.h).map(|(a, b)| a * b).sum::<f64>();
        }
        let gate = |g: usize, j: usize| pre[g * N_HIDDEN + j];
        let i: [f64; N_HIDDEN] = std::array::from_fn(|j| sigmoid(gate(0, j)));
        let f: [f64; N_HIDDEN] = std::array::from_fn(|j| sigmoid(gate(1, j)));
        let g: [f64; N_HIDDEN] = std::array::from_fn(|j| act.apply(gate(2, j)));
        let o: [f64; N_HIDDEN] = std::array::from_fn(|j| sigmoid(gate(3, j)));
        let c: [f64; N_HIDDEN] = std::array::from_fn(|j| f[j] * state.c[j] + i[j] * g[j]);
        let tc: [f64; N_HIDDEN] = std::array::from_fn(|j| act.apply(c[j]));
        let h: [f64; N_HIDDEN] = std::array::from_fn(|j| o[j] * tc[j]);
        LstmCell {
            i,
            f,
            g,
            o,
            tc,
            prev: *state,
            next: LstmState { c, h },
        }
    }
}

#[derive(Debug, Clone)]
struct LstmCell {
    i: [f64; N_HIDDEN],
    f: [f64; N_HIDDEN],
    g: [f64; N_HIDDEN],
    o: [f64; N_HIDDEN],
    tc: [f64; N_HIDDEN],
    prev: LstmState,
    next: LstmState,
}

/// Intermediate values of one normalized step, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct StepTrace {
    /// `pre[0]` is the normalized input, `pre[k + 1]` the output of input layer k.
    pre: Vec<Vec<f64>>,
    cell: LstmCell,
    /// `post[0]` is the new hidden state, the last entry the normalized output.
    post: Vec<Vec<f64>>,
}

impl StepTrace {
    pub(crate) fn next_state(&self) -> LstmState {
        self.cell.next
    }

    pub(crate) fn output_normalized(&self) -> [f64; N_OUTPUTS] {
        let y = self.post.last().expect("output layer present");
        std::array::from_fn(|j| y[j])
    }
}

/// All learnable parameters plus the normalization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkWeights {
    pub spec: NetworkSpec,
    pub norm: Normalization,
    pub params: Vec<f64>,
}

impl NetworkWeights {
    pub fn new(spec: NetworkSpec, norm: Normalization, params: Vec<f64>) -> Result<Self, NnError> {
        spec.validate()?;
        norm.validate()?;
        if params.len() != spec.param_count() {
            return Err(NnError::ParamCount {
                expected: spec.param_count(),
                got: params.len(),
            });
        }
        Ok(Self { spec, norm, params })
    }

    pub fn zeros(spec: NetworkSpec, norm: Normalization) -> Result<Self, NnError> {
        let n = spec.param_count();
        Self::new(spec, norm, vec![0.0; n])
    }

    /// Glorot-uniform dense layers, uniform(±1/√h) LSTM weights with unit
    /// forget bias, and a down-scaled output layer.
    pub fn random<R: Rng + ?Sized>(
        spec: NetworkSpec,
        norm: Normalization,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        spec.validate()?;
        let mut params = Vec::with_capacity(spec.param_count());
        let last = spec.layers.len() - 1;
        for (idx, l) in spec.layers.iter().enumerate() {
            let (i, o) = (l.input_width, l.output_width);
            match l.kind {
                LayerKind::Dense => {
                    let mut a = (6.0 / (i + o) as f64).sqrt();
                    if idx == last {
                        a *= 0.1;
                    }
                    params.extend((0..o * i).map(|_| rng.random_range(-a..a)));
                    params.extend(std::iter::repeat_n(0.0, o));
                }
                LayerKind::Lstm => {
                    let a = 1.0 / (o as f64).sqrt();
                    params.extend((0..4 * o * (i + o)).map(|_| rng.random_range(-a..a)));
                    for gate in 0..4 {
                        let bias = if gate == 1 { 1.0 } else { 0.0 };
                        params.extend(std::iter::repeat_n(bias, o));
                    }
                }
            }
        }
        Self::new(spec, norm, params)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn layer(&self, index: usize) -> Layer<'_> {
        let offsets = self.spec.offsets();
        let spec = self.spec.layers[index];
        Layer {
            index,
            spec,
            params: &self.params[offsets[index]..offsets[index] + spec.param_count()],
        }
    }

    fn layers(&self) -> impl Iterator<Item = Layer<'_>> {
        let mut offset = 0;
        self.spec.layers.iter().enumerate().map(move |(index, &spec)| {
            let n = spec.param_count();
            let l = Layer {
                index,
                spec,
                params: &self.params[offset..offset + n],
            };
            offset += n;
            l
        })
    }

    /// One model step `(x(k+1), y(k)) = (f(x, u), g(x, u))` in physical units.
    pub fn step(&self, state: &LstmState, u: &ModelInput) -> Result<(LstmState, ModelOutput), NnError> {
        let un = self.norm.normalize_input(u);
        let trace = self.trace(state, &un)?;
        let y = self.norm.denormalize_output(&trace.output_normalized());
        if !y.is_finite() {
            return Err(NnError::NonFinite {
                layer: self.spec.layers.len() - 1,
            });
        }
        Ok((trace.next_state(), y))
    }

    pub(crate) fn trace(&self, state: &LstmState, un: &[f64; N_INPUTS]) -> Result<StepTrace, NnError> {
        let lstm_idx = self.spec.lstm_index();
        let mut pre = vec![un.to_vec()];
        let mut post = Vec::new();
        let mut cell = None;
        for layer in self.layers() {
            if layer.index < lstm_idx {
                let x = pre.last().expect("input present");
                let y = layer.dense_forward(x)?;
                pre.push(y);
            } else if layer.index == lstm_idx {
                let x = pre.last().expect("input present");
                layer.check(LayerKind::Lstm, x.len())?;
                let c = layer.lstm_cell(state, x);
                if !c.next.is_finite() {
                    return Err(NnError::NonFinite { layer: layer.index });
                }
                post.push(c.next.h.to_vec());
                cell = Some(c);
            } else {
                let x = post.last().expect("hidden state present");
                let y = layer.dense_forward(x)?;
                post.push(y);
            }
        }
        Ok(StepTrace {
            pre,
            cell: cell.expect("validated spec has an lstm layer"),
            post,
        })
    }

    /// Exact first-order sensitivities of [`NetworkWeights::step`].
    pub fn jacobians(&self, state: &LstmState, u: &ModelInput) -> Result<ModelJacobians, NnError> {
        let un = self.norm.normalize_input(u);
        let trace = self.trace(state, &un)?;
        let lstm_idx = self.spec.lstm_index();

        // d(lstm input) / d(physical input)
        let mut dz = DMatrix::<f64>::from_diagonal(&nalgebra::DVector::from_iterator(
            N_INPUTS,
            self.norm.input_scale.iter().map(|s| 1.0 / s),
        ));
        for (k, layer) in self.layers().take(lstm_idx).enumerate() {
            dz = dense_jacobian(&layer, &trace.pre[k + 1]) * dz;
        }

        let lstm = self.layer(lstm_idx);
        let (wx, wh, _) = lstm.split_lstm();
        let n_in = lstm.spec.input_width;
        let act = lstm.spec.activation;
        let cell = &trace.cell;
        let wx = DMatrix::from_row_slice(4 * N_HIDDEN, n_in, wx);
        let wh = DMatrix::from_row_slice(4 * N_HIDDEN, N_HIDDEN, wh);
        // Gate pre-activations w.r.t. [c_prev; h_prev; u]: columns 0..4 c, 4..8 h, 8..13 u.
        let n_col = N_STATE + N_INPUTS;
        let mut da = DMatrix::<f64>::zeros(4 * N_HIDDEN, n_col);
        da.view_mut((0, N_HIDDEN), (4 * N_HIDDEN, N_HIDDEN)).copy_from(&wh);
        da.view_mut((0, N_STATE), (4 * N_HIDDEN, N_INPUTS))
            .copy_from(&(&wx * &dz));
        let gate_row = |g: usize, j: usize| da.row(g * N_HIDDEN + j).clone_owned();

        let mut dc = DMatrix::<f64>::zeros(N_HIDDEN, n_col);
        let mut dh = DMatrix::<f64>::zeros(N_HIDDEN, n_col);
        for j in 0..N_HIDDEN {
            let di = gate_row(0, j) * Activation::Sigmoid.slope(cell.i[j]);
            let df = gate_row(1, j) * Activation::Sigmoid.slope(cell.f[j]);
            let dg = gate_row(2, j) * act.slope(cell.g[j]);
            let d_o = gate_row(3, j) * Activation::Sigmoid.slope(cell.o[j]);
            let mut row = df * cell.prev.c[j] + di * cell.g[j] + dg * cell.i[j];
            row[j] += cell.f[j];
            let hrow = d_o * cell.tc[j] + &row * (cell.o[j] * act.slope(cell.tc[j]));
            dc.set_row(j, &row);
            dh.set_row(j, &hrow);
        }

        let mut dy = DMatrix::<f64>::identity(N_HIDDEN, N_HIDDEN);
        for (k, layer) in self.layers().skip(lstm_idx + 1).enumerate() {
            dy = dense_jacobian(&layer, &trace.post[k + 1]) * dy;
        }
        for (r, s) in self.norm.output_scale.iter().enumerate() {
            dy.row_mut(r).scale_mut(*s);
        }
        let dy = dy * &dh;

        let mut j = ModelJacobians {
            state_state: SMatrix::zeros(),
            state_input: SMatrix::zeros(),
            output_state: SMatrix::zeros(),
            output_input: SMatrix::zeros(),
        };
        for r in 0..N_HIDDEN {
            for c in 0..N_STATE {
                j.state_state[(r, c)] = dc[(r, c)];
                j.state_state[(r + N_HIDDEN, c)] = dh[(r, c)];
            }
            for c in 0..N_INPUTS {
                j.state_input[(r, c)] = dc[(r, N_STATE + c)];
                j.state_input[(r + N_HIDDEN, c)] = dh[(r, N_STATE + c)];
            }
        }
        for r in 0..N_OUTPUTS {
            for c in 0..N_STATE {
                j.output_state[(r, c)] = dy[(r, c)];
            }
            for c in 0..N_INPUTS {
                j.output_input[(r, c)] = dy[(r, N_STATE + c)];
            }
        }
        Ok(j)
    }

    /// Reverse pass through one traced step. `gy` is the loss gradient w.r.t.
    /// the normalized output, `gc`/`gh` w.r.t. the step's next state.
    /// Accumulates into `grad` and returns the gradient w.r.t. the previous state.
    pub(crate) fn backward(
        &self,
        trace: &StepTrace,
        gy: &[f64; N_OUTPUTS],
        gc: &[f64; N_HIDDEN],
        gh: &[f64; N_HIDDEN],
        grad: &mut [f64],
    ) -> ([f64; N_HIDDEN], [f64; N_HIDDEN]) {
        let offsets = self.spec.offsets();
        let lstm_idx = self.spec.lstm_index();
        let n_layers = self.spec.layers.len();

        let mut delta = gy.to_vec();
        for idx in (lstm_idx + 1..n_layers).rev() {
            let k = idx - lstm_idx - 1;
            let layer = self.layer(idx);
            delta = dense_backward(&layer, &trace.post[k], &trace.post[k + 1], &delta, &mut grad[offsets[idx]..]);
        }

        let cell = &trace.cell;
        let lstm = self.layer(lstm_idx);
        let act = lstm.spec.activation;
        let mut dpre = [0.0; 4 * N_HIDDEN];
        let mut gc_prev = [0.0; N_HIDDEN];
        for j in 0..N_HIDDEN {
            let dh = delta[j] + gh[j];
            let d_o = dh * cell.tc[j];
            let dcn = gc[j] + dh * cell.o[j] * act.slope(cell.tc[j]);
            let df = dcn * cell.prev.c[j];
            let di = dcn * cell.g[j];
            let dg = dcn * cell.i[j];
            gc_prev[j] = dcn * cell.f[j];
            dpre[j] = di * Activation::Sigmoid.slope(cell.i[j]);
            dpre[N_HIDDEN + j] = df * Activation::Sigmoid.slope(cell.f[j]);
            dpre[2 * N_HIDDEN + j] = dg * act.slope(cell.g[j]);
            dpre[3 * N_HIDDEN + j] = d_o * Activation::Sigmoid.slope(cell.o[j]);
        }
        let (wx, wh, _) = lstm.split_lstm();
        let n_in = lstm.spec.input_width;
        let z = &trace.pre[lstm_idx];
        let g = &mut grad[offsets[lstm_idx]..offsets[lstm_idx] + lstm.spec.param_count()];
        let (gwx, rest) = g.split_at_mut(4 * N_HIDDEN * n_in);
        let (gwh, gb) = rest.split_at_mut(4 * N_HIDDEN * N_HIDDEN);
        let mut gh_prev = [0.0; N_HIDDEN];
        let mut dz = vec![0.0; n_in];
        for (r, &d) in dpre.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            gb[r] += d;
            for c in 0..n_in {
                gwx[r * n_in + c] += d * z[c];
                dz[c] += d * wx[r * n_in + c];
            }
            for c in 0..N_HIDDEN {
                gwh[r * N_HIDDEN + c] += d * cell.prev.h[c];
                gh_prev[c] += d * wh[r * N_HIDDEN + c];
            }
        }

        let mut delta = dz;
        for idx in (0..lstm_idx).rev() {
            let layer = self.layer(idx);
            delta = dense_backward(&layer, &trace.pre[idx], &trace.pre[idx + 1], &delta, &mut grad[offsets[idx]..]);
        }
        (gc_prev, gh_prev)
    }
}

fn dense_jacobian(layer: &Layer<'_>, out: &[f64]) -> DMatrix<f64> {
    let (w, _) = layer.split_dense();
    let mut m = DMatrix::from_row_slice(layer.spec.output_width, layer.spec.input_width, w);
    for (r, y) in out.iter().enumerate() {
        m.row_mut(r).scale_mut(layer.spec.activation.slope(*y));
    }
    m
}

/// Accumulates parameter gradients into `grad` (starting at the layer offset)
/// and returns the gradient w.r.t. the layer input.
fn dense_backward(layer: &Layer<'_>, input: &[f64], out: &[f64], delta: &[f64], grad: &mut [f64]) -> Vec<f64> {
    let (w, _) = layer.split_dense();
    let (n_in, n_out) = (layer.spec.input_width, layer.spec.output_width);
    let (gw, gb) = grad[..layer.spec.param_count()].split_at_mut(n_out * n_in);
    let mut dx = vec![0.0; n_in];
    for r in 0..n_out {
        let d = delta[r] * layer.spec.activation.slope(out[r]);
        gb[r] += d;
        let row = &w[r * n_in..(r + 1) * n_in];
        let grow = &mut gw[r * n_in..(r + 1) * n_in];
        for c in 0..n_in {
            grow[c] += d * input[c];
            dx[c] += d * row[c];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_weights(seed: u64) -> NetworkWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = NetworkWeights::random(NetworkSpec::default(), Normalization::identity(), &mut rng).unwrap();
        // Larger weights than the default init so gates leave their linear region.
        for p in &mut w.params {
            *p *= 1.5;
        }
        w.norm = Normalization {
            input_offset: [3.0, 6.0, 0.75, 0.5, 255.0],
            input_scale: [1.2, 4.0, 0.4, 0.3, 60.0],
            output_offset: [3.0, 6.0, 150.0, 5.0],
            output_scale: [1.2, 4.0, 90.0, 3.0],
        };
        w
    }

    fn random_point(rng: &mut ChaCha8Rng) -> (LstmState, ModelInput) {
        let s = LstmState {
            c: std::array::from_fn(|_| rng.random_range(-1.5..1.5)),
            h: std::array::from_fn(|_| rng.random_range(-0.9..0.9)),
        };
        let u = ModelInput {
            imep_prev: rng.random_range(1.0..6.0),
            ca50_prev: rng.random_range(0.0..17.0),
            doi_fuel: rng.random_range(0.0..1.5),
            doi_water: rng.random_range(0.0..1.0),
            nvo: rng.random_range(150.0..360.0),
        };
        (s, u)
    }

    #[test]
    fn default_architecture_has_about_2260_parameters() {
        let spec = NetworkSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.param_count(), 2300);
        assert!((spec.param_count() as f64 - 2260.0).abs() <= 0.05 * 2260.0);
        assert_eq!(spec.layers.iter().filter(|l| l.kind == LayerKind::Dense).count(), 6);
    }

    #[test]
    fn spec_validation_rejects_bad_topologies() {
        let mut two_lstm = NetworkSpec::default();
        two_lstm.layers.insert(3, LayerSpec::lstm(16, 16));
        assert!(two_lstm.validate().is_err());
        let mut broken_chain = NetworkSpec::default();
        broken_chain.layers[1].input_width = 7;
        assert!(broken_chain.validate().is_err());
        let mut wide_lstm = NetworkSpec::from_widths(&[8], &[8]);
        wide_lstm.layers[1].output_width = 5;
        assert!(wide_lstm.validate().is_err());
    }

    #[test]
    fn dense_zero_weights_give_zero() {
        let spec = LayerSpec::dense(3, 2, Activation::Tanh);
        let params = vec![0.0; spec.param_count()];
        let out = Layer::new(0, spec, &params).unwrap().dense_forward(&[0.3, -2.0, 5.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn dense_identity_linear_passes_through() {
        let spec = LayerSpec::dense(3, 3, Activation::Linear);
        let mut params = vec![0.0; spec.param_count()];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let x = [0.3, -2.0, 5.0];
        let out = Layer::new(0, spec, &params).unwrap().dense_forward(&x).unwrap();
        assert_eq!(out, x.to_vec());
    }

    #[test]
    fn dense_scalar_tanh() {
        let spec = LayerSpec::dense(1, 1, Activation::Tanh);
        let params = [2.0, 0.5];
        let out = Layer::new(0, spec, &params).unwrap().dense_forward(&[0.25]).unwrap();
        assert_relative_eq!(out[0], 0.761_594_155_955_764_9, epsilon = 1e-15);
    }

    #[test]
    fn dense_dimension_mismatch_names_layer() {
        let spec = LayerSpec::dense(2, 1, Activation::Tanh);
        let params = vec![0.0; spec.param_count()];
        let err = Layer::new(4, spec, &params).unwrap().dense_forward(&[1.0]).unwrap_err();
        assert_eq!(
            err,
            NnError::DimensionMismatch {
                layer: 4,
                expected: 2,
                got: 1
            }
        );
    }

    #[test]
    fn lstm_zero_network() {
        let spec = LayerSpec::lstm(3, N_HIDDEN);
        let params = vec![0.0; spec.param_count()];
        let layer = Layer::new(0, spec, &params).unwrap();
        let next = layer.lstm_step(&LstmState::default(), &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(next, LstmState::default());

        let state = LstmState {
            c: [1.0, 0.0, 0.0, 0.0],
            h: [0.0; 4],
        };
        let next = layer.lstm_step(&state, &[0.1, 0.2, 0.3]).unwrap();
        assert_relative_eq!(next.c[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(next.h[0], 0.231_058_578_630_004_9, epsilon = 1e-15);
        assert_eq!(&next.c[1..], &[0.0; 3]);
        assert_eq!(&next.h[1..], &[0.0; 3]);
    }

    #[test]
    fn lstm_hidden_state_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = LayerSpec::lstm(6, N_HIDDEN);
        let params: Vec<f64> = (0..spec.param_count()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let layer = Layer::new(0, spec, &params).unwrap();
        let mut s = LstmState::default();
        for _ in 0..200 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-10.0..10.0)).collect();
            s = layer.lstm_step(&s, &x).unwrap();
            assert!(s.h.iter().all(|h| h.abs() < 1.0));
        }
    }

    #[test]
    fn zero_network_outputs_denormalization_offsets() {
        let mut w = random_weights(1);
        w.params.iter_mut().for_each(|p| *p = 0.0);
        let (s, u) = random_point(&mut ChaCha8Rng::seed_from_u64(2));
        let (_, y) = w.step(&s, &u).unwrap();
        assert_eq!(y.to_array(), w.norm.output_offset);
        let j = w.jacobians(&s, &u).unwrap();
        assert!(j.output_state.iter().all(|v| *v == 0.0));
        assert!(j.output_input.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn step_is_deterministic() {
        let w = random_weights(3);
        let (s, u) = random_point(&mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(w.step(&s, &u).unwrap(), w.step(&s, &u).unwrap());
    }

    #[test]
    fn non_finite_input_reports_layer() {
        let w = random_weights(3);
        let u = ModelInput {
            nvo: f64::NAN,
            ..Default::default()
        };
        assert_eq!(w.step(&LstmState::default(), &u).unwrap_err(), NnError::NonFinite { layer: 0 });
    }

    #[test]
    fn normalization_round_trip() {
        let w = random_weights(5);
        let y = ModelOutput {
            imep: 3.7,
            ca50: 5.9,
            nox: 211.0,
            mprr: 7.25,
        };
        let back = w.norm.denormalize_output(&w.norm.normalize_output(&y));
        for (a, b) in back.to_array().iter().zip(y.to_array()) {
            assert_relative_eq!(*a, b, max_relative = 1e-15);
        }
    }

    /// Central finite differences over the physical input and state.
    fn fd_jacobians(w: &NetworkWeights, s: &LstmState, u: &ModelInput) -> (DMatrix<f64>, DMatrix<f64>) {
        let f = |x: &[f64; N_STATE], u: &[f64; N_INPUTS]| {
            let (sn, y) = w.step(&LstmState::from_array(x), &ModelInput::from_array(*u)).unwrap();
            let mut v = sn.to_array().to_vec();
            v.extend(y.to_array());
            v
        };
        let x0 = s.to_array();
        let u0 = u.to_array();
        let n_out = N_STATE + N_OUTPUTS;
        let mut dx = DMatrix::<f64>::zeros(n_out, N_STATE);
        let mut du = DMatrix::<f64>::zeros(n_out, N_INPUTS);
        for c in 0..N_STATE {
            let step = 1e-6;
            let (mut xp, mut xm) = (x0, x0);
            xp[c] += step;
            xm[c] -= step;
            let (fp, fm) = (f(&xp, &u0), f(&xm, &u0));
            for r in 0..n_out {
                dx[(r, c)] = (fp[r] - fm[r]) / (2.0 * step);
            }
        }
        for c in 0..N_INPUTS {
            // step of 1e-6 on the normalized scale
            let step = 1e-6 * w.norm.input_scale[c];
            let (mut up, mut um) = (u0, u0);
            up[c] += step;
            um[c] -= step;
            let (fp, fm) = (f(&x0, &up), f(&x0, &um));
            for r in 0..n_out {
                du[(r, c)] = (fp[r] - fm[r]) / (2.0 * step);
            }
        }
        (dx, du)
    }

    fn analytic_stacked(j: &ModelJacobians) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut dx = DMatrix::<f64>::zeros(N_STATE + N_OUTPUTS, N_STATE);
        let mut du = DMatrix::<f64>::zeros(N_STATE + N_OUTPUTS, N_INPUTS);
        dx.view_mut((0, 0), (N_STATE, N_STATE)).copy_from(&j.state_state);
        dx.view_mut((N_STATE, 0), (N_OUTPUTS, N_STATE)).copy_from(&j.output_state);
        du.view_mut((0, 0), (N_STATE, N_INPUTS)).copy_from(&j.state_input);
        du.view_mut((N_STATE, 0), (N_OUTPUTS, N_INPUTS)).copy_from(&j.output_input);
        (dx, du)
    }

    /// max |a - b| / max(|b|, 1) scaled per row by the row magnitude.
    pub(crate) fn max_rel_dev(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let scale = b.abs().max().max(1e-3);
        (a - b).abs().max() / scale
    }

    #[test]
    fn jacobians_match_finite_differences_seed_42() {
        let w = random_weights(42);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (s, u) = random_point(&mut rng);
        let j = w.jacobians(&s, &u).unwrap();
        let (ax, au) = analytic_stacked(&j);
        let (fx, fu) = fd_jacobians(&w, &s, &u);
        assert!(max_rel_dev(&ax, &fx) <= 1e-6, "{}", max_rel_dev(&ax, &fx));
        assert!(max_rel_dev(&au, &fu) <= 1e-6, "{}", max_rel_dev(&au, &fu));
    }

    #[test]
    fn linear_network_has_constant_jacobian() {
        let spec = NetworkSpec {
            layers: NetworkSpec::default()
                .layers
                .into_iter()
                .map(|mut l| {
                    l.activation = Activation::Linear;
                    l
                })
                .collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut w = NetworkWeights::random(spec, Normalization::identity(), &mut rng).unwrap();
        w.norm = random_weights(0).norm;
        let lstm_idx = w.spec.lstm_index();
        let offsets = w.spec.offsets();
        let l = w.spec.layers[lstm_idx];
        let bias0 = offsets[lstm_idx] + 4 * N_HIDDEN * (l.input_width + N_HIDDEN);
        // Saturate input, forget and output gates open.
        for g in [0, 1, 3] {
            for j in 0..N_HIDDEN {
                w.params[bias0 + g * N_HIDDEN + j] = 40.0;
            }
        }
        let (s1, u1) = random_point(&mut rng);
        let (s2, u2) = random_point(&mut rng);
        let j1 = w.jacobians(&s1, &u1).unwrap();
        let j2 = w.jacobians(&s2, &u2).unwrap();
        let (a1, b1) = analytic_stacked(&j1);
        let (a2, b2) = analytic_stacked(&j2);
        assert!((a1 - a2).abs().max() < 1e-9);
        assert!((b1 - b2).abs().max() < 1e-9);
    }
}
