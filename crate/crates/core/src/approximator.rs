//! Dense feed-forward networks with exact backpropagation, an Adam optimizer
//! and polyak target averaging.
//!
//! Every learned function in the crate (actor, critic, ensemble members) is an
//! [`MlpParams`]. Batches are stored `(examples, features)`, weights are stored
//! `(out, in)`.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const SNAPSHOT_MAGIC: &[u8; 6] = b"VDSNN1";

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("malformed snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Linear,
    Tanh,
}

impl HiddenActivation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            HiddenActivation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            HiddenActivation::Tanh => z.mapv_inplace(f64::tanh),
        }
    }

    /// Multiplies `grad` by the activation derivative, expressed through the
    /// post-activation value `a`.
    fn backprop(self, grad: &mut Array2<f64>, a: &Array2<f64>) {
        match self {
            HiddenActivation::Relu => Zip::from(grad).and(a).for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }),
            HiddenActivation::Tanh => Zip::from(grad).and(a).for_each(|g, &a| *g *= 1.0 - a * a),
        }
    }
}

impl OutputActivation {
    fn apply(self, z: &mut Array2<f64>) {
        if self == OutputActivation::Tanh {
            z.mapv_inplace(f64::tanh);
        }
    }

    fn backprop(self, grad: &mut Array2<f64>, a: &Array2<f64>) {
        if self == OutputActivation::Tanh {
            Zip::from(grad).and(a).for_each(|g, &a| *g *= 1.0 - a * a);
        }
    }
}

/// Weights and biases of a multilayer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    /// Layer `l` has shape `(layer_sizes[l + 1], layer_sizes[l])`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

/// Gradients with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Post-activation values of every layer for one batch, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input batch, the last entry is the output.
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache always holds the input")
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.activations.pop().expect("cache always holds the input")
    }
}

/// Result of a backward pass: parameter gradients plus the gradient with
/// respect to the network input.
#[derive(Debug, Clone)]
pub struct Backward {
    pub params: ParamGrads,
    pub input: Array2<f64>,
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(NnError::InvalidConfig(format!(
            "need at least an input and an output width, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(NnError::InvalidConfig(format!(
            "layer widths must be positive, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

impl MlpParams {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases. Fully determined by `seed`.
    pub fn init(
        layer_sizes: &[usize],
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
        seed: u64,
    ) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                rng.random_range(-bound..bound)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            hidden_activation,
            output_activation,
        })
    }

    /// All-zero parameters; handy for building networks by hand.
    pub fn zeros(
        layer_sizes: &[usize],
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights: layer_sizes
                .windows(2)
                .map(|p| Array2::zeros((p[1], p[0])))
                .collect(),
            biases: layer_sizes.windows(2).map(|p| Array1::zeros(p[1])).collect(),
            hidden_activation,
            output_activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|p| p[1] * (p[0] + 1)).sum()
    }

    pub fn same_layout(&self, other: &MlpParams) -> bool {
        self.layer_sizes == other.layer_sizes
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_width() {
            return Err(NnError::Shape {
                what: "forward input",
                expected: self.input_width(),
                got: input.len(),
            });
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("contiguous row");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(inputs)?.into_output())
    }

    pub fn forward_cached(&self, inputs: ArrayView2<f64>) -> Result<ForwardCache> {
        if inputs.ncols() != self.input_width() {
            return Err(NnError::Shape {
                what: "forward input",
                expected: self.input_width(),
                got: inputs.ncols(),
            });
        }
        let last = self.num_layers() - 1;
        let mut activations = Vec::with_capacity(self.num_layers() + 1);
        activations.push(inputs.to_owned());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = activations[l].dot(&w.t());
            z += b;
            if l == last {
                self.output_activation.apply(&mut z);
            } else {
                self.hidden_activation.apply(&mut z);
            }
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    /// Gradients of `sum_i <output_i, output_grad_i>` for a single example.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<(ParamGrads, Vec<f64>)> {
        if output_grad.len() != self.output_width() {
            return Err(NnError::Shape {
                what: "output gradient",
                expected: self.output_width(),
                got: output_grad.len(),
            });
        }
        if input.len() != self.input_width() {
            return Err(NnError::Shape {
                what: "backward input",
                expected: self.input_width(),
                got: input.len(),
            });
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("contiguous row");
        let cache = self.forward_cached(x)?;
        let g = ArrayView2::from_shape((1, output_grad.len()), output_grad).expect("contiguous row");
        let back = self.backward_batch(&cache, g)?;
        Ok((back.params, back.input.into_raw_vec_and_offset().0))
    }

    /// Backprop through a cached forward pass. Parameter gradients are summed
    /// over the batch.
    pub fn backward_batch(&self, cache: &ForwardCache, output_grad: ArrayView2<f64>) -> Result<Backward> {
        let out = cache.output();
        if output_grad.dim() != out.dim() {
            return Err(NnError::Shape {
                what: "output gradient",
                expected: out.len(),
                got: output_grad.len(),
            });
        }
        let n = self.num_layers();
        let mut weight_grads = Vec::with_capacity(n);
        let mut bias_grads = Vec::with_capacity(n);
        let mut delta = output_grad.to_owned();
        self.output_activation.backprop(&mut delta, out);
        for l in (0..n).rev() {
            let a_in = &cache.activations[l];
            weight_grads.push(delta.t().dot(a_in));
            bias_grads.push(delta.sum_axis(Axis(0)));
            let mut upstream = delta.dot(&self.weights[l]);
            if l > 0 {
                self.hidden_activation.backprop(&mut upstream, a_in);
            }
            delta = upstream;
        }
        weight_grads.reverse();
        bias_grads.reverse();
        Ok(Backward {
            params: ParamGrads {
                weights: weight_grads,
                biases: bias_grads,
            },
            input: delta,
        })
    }

    /// Parameters flattened layer by layer: weights row-major, then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.weights, &self.biases)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(NnError::Shape {
                what: "flat parameters",
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|v| *v = it.next().unwrap());
            b.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Writes the `VDSNN1` binary snapshot. Activations are not part of the
    /// format and travel in the owning checkpoint's manifest.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&(self.layer_sizes.len() as u32).to_le_bytes())?;
        for &n in &self.layer_sizes {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for v in self.to_flat() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(
        mut r: R,
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(NnError::Snapshot("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let count = u32::from_le_bytes(word) as usize;
        if count > 1024 {
            return Err(NnError::Snapshot(format!("implausible layer count {count}")));
        }
        let mut sizes = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut word)?;
            sizes.push(u32::from_le_bytes(word) as usize);
        }
        let mut params = Self::zeros(&sizes, hidden_activation, output_activation)
            .map_err(|e| NnError::Snapshot(e.to_string()))?;
        let mut flat = vec![0.0; params.param_count()];
        let mut bytes = [0u8; 8];
        for v in flat.iter_mut() {
            r.read_exact(&mut bytes)?;
            *v = f64::from_le_bytes(bytes);
        }
        params.set_flat(&flat)?;
        if !params.all_finite() {
            return Err(NnError::NonFinite("snapshot parameters"));
        }
        Ok(params)
    }
}

fn flatten(weights: &[Array2<f64>], biases: &[Array1<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in weights.iter().zip(biases) {
        out.extend(w.iter().copied());
        out.extend(b.iter().copied());
    }
    out
}

impl ParamGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: params.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.weights, &self.biases)
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
        self.biases.iter_mut().for_each(|b| *b *= factor);
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn matches(&self, params: &MlpParams) -> bool {
        self.weights.len() == params.weights.len()
            && self
                .weights
                .iter()
                .zip(&params.weights)
                .all(|(g, w)| g.dim() == w.dim())
            && self
                .biases
                .iter()
                .zip(&params.biases)
                .all(|(g, b)| g.dim() == b.dim())
    }
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
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam moment accumulators for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub step_count: u64,
    pub first_moment: ParamGrads,
    pub second_moment: ParamGrads,
    pub config: AdamConfig,
}

impl OptState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        Self {
            step_count: 0,
            first_moment: ParamGrads::zeros_like(params),
            second_moment: ParamGrads::zeros_like(params),
            config,
        }
    }

    /// One bias-corrected Adam step. A gradient with any non-finite entry is
    /// rejected before anything is modified.
    pub fn step(&mut self, params: &mut MlpParams, grads: &ParamGrads) -> Result<()> {
        if !grads.matches(params) || !self.first_moment.matches(params) {
            return Err(NnError::Shape {
                what: "adam gradients",
                expected: params.param_count(),
                got: grads.to_flat().len(),
            });
        }
        if !grads.all_finite() {
            return Err(NnError::NonFinite("gradient"));
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        };
        for l in 0..params.num_layers() {
            Zip::from(&mut params.weights[l])
                .and(&mut self.first_moment.weights[l])
                .and(&mut self.second_moment.weights[l])
                .and(&grads.weights[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut params.biases[l])
                .and(&mut self.first_moment.biases[l])
                .and(&mut self.second_moment.biases[l])
                .and(&grads.biases[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(())
    }
}

/// `target <- tau * target + (1 - tau) * online`; `tau` is the retained fraction.
pub fn polyak_update(target: &mut MlpParams, online: &MlpParams, tau: f64) -> Result<()> {
    if !target.same_layout(online) {
        return Err(NnError::Shape {
            what: "polyak layouts",
            expected: target.param_count(),
            got: online.param_count(),
        });
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(NnError::InvalidConfig(format!("polyak tau {tau} outside [0, 1]")));
    }
    for l in 0..target.num_layers() {
        Zip::from(&mut target.weights[l])
            .and(&online.weights[l])
            .for_each(|t, &o| *t = tau * *t + (1.0 - tau) * o);
        Zip::from(&mut target.biases[l])
            .and(&online.biases[l])
            .for_each(|t, &o| *t = tau * *t + (1.0 - tau) * o);
    }
    Ok(())
}

/// Finite-difference gradient checking built on forward passes only.
pub mod gradcheck {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Tolerance {
        pub step: f64,
        pub relative: f64,
        pub absolute: f64,
    }

    impl Default for Tolerance {
        fn default() -> Self {
            Self {
                step: 1e-5,
                relative: 1e-4,
                absolute: 1e-7,
            }
        }
    }

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Comparison {
        pub analytic: f64,
        pub numeric: f64,
    }

    impl Comparison {
        pub fn relative_error(&self) -> f64 {
            let diff = (self.analytic - self.numeric).abs();
            let scale = self.analytic.abs().max(self.numeric.abs());
            if scale == 0.0 {
                0.0
            } else {
                diff / scale
            }
        }

        pub fn within(&self, tol: &Tolerance) -> bool {
            (self.analytic - self.numeric).abs() <= tol.absolute || self.relative_error() <= tol.relative
        }
    }

    fn probe(params: &MlpParams, input: &[f64], output_grad: &[f64]) -> Result<f64> {
        let out = params.forward(input)?;
        Ok(out.iter().zip(output_grad).map(|(o, g)| o * g).sum())
    }

    /// Central differences of `<f(input), output_grad>` for every parameter,
    /// paired with the backpropagated values.
    pub fn compare_parameters(
        params: &MlpParams,
        input: &[f64],
        output_grad: &[f64],
        step: f64,
    ) -> Result<Vec<Comparison>> {
        let (grads, _) = params.backward(input, output_grad)?;
        let analytic = grads.to_flat();
        let base = params.to_flat();
        let mut probe_params = params.clone();
        let mut flat = base.clone();
        let mut out = Vec::with_capacity(base.len());
        for (i, &a) in analytic.iter().enumerate() {
            flat[i] = base[i] + step;
            probe_params.set_flat(&flat)?;
            let plus = probe(&probe_params, input, output_grad)?;
            flat[i] = base[i] - step;
            probe_params.set_flat(&flat)?;
            let minus = probe(&probe_params, input, output_grad)?;
            flat[i] = base[i];
            out.push(Comparison {
                analytic: a,
                numeric: (plus - minus) / (2.0 * step),
            });
        }
        Ok(out)
    }

    /// Same check for the gradient with respect to the input vector.
    pub fn compare_input(params: &MlpParams, input: &[f64], output_grad: &[f64], step: f64) -> Result<Vec<Comparison>> {
        let (_, analytic) = params.backward(input, output_grad)?;
        let mut x = input.to_vec();
        let mut out = Vec::with_capacity(x.len());
        for (i, &a) in analytic.iter().enumerate() {
            x[i] = input[i] + step;
            let plus = probe(params, &x, output_grad)?;
            x[i] = input[i] - step;
            let minus = probe(params, &x, output_grad)?;
            x[i] = input[i];
            out.push(Comparison {
                analytic: a,
                numeric: (plus - minus) / (2.0 * step),
            });
        }
        Ok(out)
    }

    #[derive(Debug, Clone, PartialEq)]
    pub struct SuiteReport {
        pub networks: usize,
        pub parameters_checked: usize,
        pub failures: usize,
        pub worst_relative_error: f64,
    }

    impl SuiteReport {
        pub fn passed(&self) -> bool {
            self.failures == 0
        }
    }

    /// Checks `networks` randomly shaped small networks (at most 200
    /// parameters each, random activations, random inputs and output weights).
    pub fn run_suite(networks: usize, seed: u64, tol: Tolerance) -> Result<SuiteReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = SuiteReport {
            networks,
            parameters_checked: 0,
            failures: 0,
            worst_relative_error: 0.0,
        };
        for _ in 0..networks {
            let sizes = loop {
                let depth = rng.random_range(2..=4);
                let sizes: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=8)).collect();
                let count: usize = sizes.windows(2).map(|p| p[1] * (p[0] + 1)).sum();
                if count <= 200 {
                    break sizes;
                }
            };
            let hidden = if rng.random_bool(0.5) {
                HiddenActivation::Relu
            } else {
                HiddenActivation::Tanh
            };
            let output = if rng.random_bool(0.5) {
                OutputActivation::Linear
            } else {
                OutputActivation::Tanh
            };
            let mut params = MlpParams::init(&sizes, hidden, output, rng.random())?;
            // non-zero biases so every code path is exercised
            for b in params.biases.iter_mut() {
                b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
            let input: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let output_grad: Vec<f64> = (0..params.output_width())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            for c in compare_parameters(&params, &input, &output_grad, tol.step)? {
                report.parameters_checked += 1;
                report.worst_relative_error = report.worst_relative_error.max(c.relative_error());
                if !c.within(&tol) {
                    report.failures += 1;
                }
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Scalar nested-loop forward pass, independent of the batched path.
    fn naive_forward(p: &MlpParams, input: &[f64]) -> Vec<f64> {
        let mut a = input.to_vec();
        let n = p.num_layers();
        for l in 0..n {
            let w = &p.weights[l];
            let mut z = vec![0.0; w.nrows()];
            for i in 0..w.nrows() {
                let mut acc = p.biases[l][i];
                for j in 0..w.ncols() {
                    acc += w[[i, j]] * a[j];
                }
                z[i] = if l + 1 == n {
                    match p.output_activation {
                        OutputActivation::Linear => acc,
                        OutputActivation::Tanh => acc.tanh(),
                    }
                } else {
                    match p.hidden_activation {
                        HiddenActivation::Relu => acc.max(0.0),
                        HiddenActivation::Tanh => acc.tanh(),
                    }
                };
            }
            a = z;
        }
        a
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = MlpParams::init(&[3, 5, 2], HiddenActivation::Relu, OutputActivation::Linear, 1).unwrap();
        let b = MlpParams::init(&[3, 5, 2], HiddenActivation::Relu, OutputActivation::Linear, 1).unwrap();
        let c = MlpParams::init(&[3, 5, 2], HiddenActivation::Relu, OutputActivation::Linear, 2).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        assert_ne!(a.to_flat(), c.to_flat());
    }

    #[test]
    fn init_biases_zero_and_weights_bounded() {
        let p = MlpParams::init(&[4, 1], HiddenActivation::Relu, OutputActivation::Linear, 9).unwrap();
        assert!(p.biases[0].iter().all(|&b| b == 0.0));
        assert!(p.weights[0].iter().all(|w| w.abs() <= 0.5));
    }

    #[test]
    fn init_rejects_bad_sizes() {
        for sizes in [vec![], vec![3], vec![3, 0, 1]] {
            assert!(matches!(
                MlpParams::init(&sizes, HiddenActivation::Relu, OutputActivation::Linear, 0),
                Err(NnError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut p = MlpParams::zeros(&[3, 4, 2], HiddenActivation::Relu, OutputActivation::Linear).unwrap();
        p.biases[1] = array![0.25, -3.0];
        for input in [[0.0, 0.0, 0.0], [5.0, -2.0, 1.0]] {
            assert_eq!(p.forward(&input).unwrap(), vec![0.25, -3.0]);
        }
    }

    #[test]
    fn tanh_output_is_bounded() {
        let mut p = MlpParams::init(&[2, 8, 3], HiddenActivation::Relu, OutputActivation::Tanh, 4).unwrap();
        p.weights.iter_mut().for_each(|w| *w *= 50.0);
        let out = p.forward(&[3.0, -7.0]).unwrap();
        assert!(out.iter().all(|v| v.abs() <= 1.0));
        let out = p.forward(&[0.0, 0.0]).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn forward_matches_scalar_recomputation() {
        let mut p = MlpParams::init(&[5, 7, 6, 3], HiddenActivation::Tanh, OutputActivation::Linear, 17).unwrap();
        p.biases[0].mapv_inplace(|_| 0.1);
        p.biases[2].mapv_inplace(|_| -0.3);
        let input = [0.3, -0.7, 1.2, 0.0, -0.05];
        let fast = p.forward(&input).unwrap();
        let slow = naive_forward(&p, &input);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        p.hidden_activation = HiddenActivation::Relu;
        let fast = p.forward(&input).unwrap();
        let slow = naive_forward(&p, &input);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_rows_match_single_forward() {
        let p = MlpParams::init(&[2, 4, 1], HiddenActivation::Relu, OutputActivation::Linear, 3).unwrap();
        let x = array![[0.1, 0.2], [-0.5, 0.9], [1.0, 1.0]];
        let out = p.forward_batch(x.view()).unwrap();
        for (row, o) in x.rows().into_iter().zip(out.rows()) {
            assert_eq!(p.forward(row.as_slice().unwrap()).unwrap()[0], o[0]);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = MlpParams::init(&[2, 1], HiddenActivation::Relu, OutputActivation::Linear, 3).unwrap();
        assert!(matches!(p.forward(&[1.0]), Err(NnError::Shape { .. })));
        assert!(matches!(p.backward(&[1.0, 2.0], &[1.0, 2.0]), Err(NnError::Shape { .. })));
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let p = MlpParams::init(&[3, 6, 2], HiddenActivation::Tanh, OutputActivation::Tanh, 5).unwrap();
        let (g, dx) = p.backward(&[0.3, 0.1, -0.2], &[0.0, 0.0]).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_closed_form() {
        let p = MlpParams::init(&[3, 2], HiddenActivation::Relu, OutputActivation::Linear, 5).unwrap();
        let x = [0.5, -1.5, 2.0];
        let g = [0.7, -0.2];
        let (grads, dx) = p.backward(&x, &g).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(grads.weights[0][[i, j]], g[i] * x[j]);
            }
            assert_eq!(grads.biases[0][i], g[i]);
        }
        for j in 0..3 {
            let expect = g[0] * p.weights[0][[0, j]] + g[1] * p.weights[0][[1, j]];
            assert!((dx[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn three_layer_network_passes_finite_differences() {
        let tol = gradcheck::Tolerance::default();
        for (seed, hidden) in [(11, HiddenActivation::Relu), (12, HiddenActivation::Tanh)] {
            let mut p = MlpParams::init(&[4, 6, 5, 2], hidden, OutputActivation::Tanh, seed).unwrap();
            p.biases.iter_mut().for_each(|b| b.mapv_inplace(|_| 0.05));
            let x = [0.2, -0.4, 0.9, 0.1];
            let g = [1.0, -0.5];
            for c in gradcheck::compare_parameters(&p, &x, &g, tol.step).unwrap() {
                assert!(c.within(&tol), "{c:?}");
            }
            for c in gradcheck::compare_input(&p, &x, &g, tol.step).unwrap() {
                assert!(c.within(&tol), "{c:?}");
            }
        }
    }

    #[test]
    fn adam_zero_grad_leaves_params() {
        let mut p = MlpParams::init(&[2, 3, 1], HiddenActivation::Relu, OutputActivation::Linear, 1).unwrap();
        let before = p.clone();
        let mut opt = OptState::new(&p, AdamConfig::default());
        opt.step(&mut p, &ParamGrads::zeros_like(&before)).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn adam_step_size_and_direction() {
        let mut p = MlpParams::zeros(&[1, 1], HiddenActivation::Relu, OutputActivation::Linear).unwrap();
        let mut opt = OptState::new(&p, AdamConfig::default());
        let mut g = ParamGrads::zeros_like(&p);
        g.weights[0][[0, 0]] = 1.0;
        g.biases[0][0] = -2.0;
        for _ in 0..50 {
            let before = p.clone();
            opt.step(&mut p, &g).unwrap();
            let dw = p.weights[0][[0, 0]] - before.weights[0][[0, 0]];
            let db = p.biases[0][0] - before.biases[0][0];
            assert!(dw < 0.0 && db > 0.0);
            assert!(dw.abs() <= 1e-3 * (1.0 + 1e-6));
            assert!(db.abs() <= 1e-3 * (1.0 + 1e-6));
        }
        assert_eq!(opt.step_count, 50);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = MlpParams::zeros(&[1, 1], HiddenActivation::Relu, OutputActivation::Linear).unwrap();
        let before = p.clone();
        let mut opt = OptState::new(&p, AdamConfig::default());
        let mut g = ParamGrads::zeros_like(&p);
        g.biases[0][0] = f64::NAN;
        assert!(matches!(opt.step(&mut p, &g), Err(NnError::NonFinite(_))));
        assert_eq!(p, before);
        assert_eq!(opt.step_count, 0);
    }

    #[test]
    fn polyak_conventions() {
        let mut t = MlpParams::zeros(&[1, 1], HiddenActivation::Relu, OutputActivation::Linear).unwrap();
        t.weights[0][[0, 0]] = 1.0;
        let o = MlpParams::zeros(&[1, 1], HiddenActivation::Relu, OutputActivation::Linear).unwrap();

        let mut keep = t.clone();
        polyak_update(&mut keep, &o, 1.0).unwrap();
        assert_eq!(keep, t);

        let mut copy = t.clone();
        polyak_update(&mut copy, &o, 0.0).unwrap();
        assert_eq!(copy, o);

        let mut mix = t.clone();
        polyak_update(&mut mix, &o, 0.95).unwrap();
        assert_eq!(mix.weights[0][[0, 0]], 0.95);
    }

    #[test]
    fn polyak_rejects_layout_mismatch() {
        let mut t = MlpParams::zeros(&[1, 1], HiddenActivation::Relu, OutputActivation::Linear).unwrap();
        let o = MlpParams::zeros(&[1, 2], HiddenActivation::Relu, OutputActivation::Linear).unwrap();
        assert!(matches!(polyak_update(&mut t, &o, 0.5), Err(NnError::Shape { .. })));
    }

    #[test]
    fn snapshot_layout_is_stable() {
        let mut p = MlpParams::zeros(&[2, 1], HiddenActivation::Relu, OutputActivation::Linear).unwrap();
        p.weights[0] = array![[1.5, -2.0]];
        p.biases[0] = array![0.25];
        let mut bytes = Vec::new();
        p.write_snapshot(&mut bytes).unwrap();
        let mut expect = b"VDSNN1".to_vec();
        expect.extend(2u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        for v in [1.5f64, -2.0, 0.25] {
            expect.extend(v.to_le_bytes());
        }
        assert_eq!(bytes, expect);
        let back = MlpParams::read_snapshot(&bytes[..], HiddenActivation::Relu, OutputActivation::Linear).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn snapshot_rejects_bad_magic_and_truncation() {
        let p = MlpParams::init(&[2, 3, 1], HiddenActivation::Relu, OutputActivation::Linear, 0).unwrap();
        let mut bytes = Vec::new();
        p.write_snapshot(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(MlpParams::read_snapshot(&bad[..], HiddenActivation::Relu, OutputActivation::Linear).is_err());
        bytes.truncate(bytes.len() - 3);
        assert!(MlpParams::read_snapshot(&bytes[..], HiddenActivation::Relu, OutputActivation::Linear).is_err());
    }
}
