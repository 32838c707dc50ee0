//! Parameterized value functions with exact batch Jacobians.
//!
//! A [`ValueModel`] is an immutable architecture descriptor: either a
//! bias-free linear map `h(u; θ) = θ·u` or a fully connected MLP with one
//! scalar output head per action. Parameters live in a single flat vector so
//! the filter can attach a `d x d` covariance to them; the layout is
//! layer-major with each layer's weights (row-major, one row per output unit)
//! followed by its biases. `jacobian` accumulates exact reverse-mode
//! gradients through that layout, one column per batch input.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    /// Any dimension disagreement: parameter length, feature width, head index.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    /// Parameter vectors must be finite.
    #[error("non-finite {what}")]
    NotFinite { what: &'static str },
}

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    Tanh,
}

impl Nonlinearity {
    fn apply(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Relu => z.max(0.0),
            Nonlinearity::Tanh => z.tanh(),
        }
    }

    /// Derivative at `z`. The ReLU subgradient at exactly 0 is taken as 0.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Tanh => 1.0 - z.tanh() * z.tanh(),
        }
    }
}

/// One evaluation point: state features plus, for Q-models, the action index
/// selecting which scalar head is read.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub features: Array1<f64>,
    pub action: Option<usize>,
}

impl ModelInput {
    /// Input for a state-value model (no action head selection).
    pub fn state(features: Array1<f64>) -> Self {
        Self {
            features,
            action: None,
        }
    }

    /// Input for an action-value model: read head `action`.
    pub fn state_action(features: Array1<f64>, action: usize) -> Self {
        Self {
            features,
            action: Some(action),
        }
    }
}

/// Where one layer's parameters sit in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    /// Flat range of the weight block (row-major, `rows x cols`).
    pub weights: Range<usize>,
    /// Flat range of the bias block (empty for bias-free layers).
    pub bias: Range<usize>,
    /// Output units of this layer.
    pub rows: usize,
    /// Input units of this layer.
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Arch {
    /// `h(u; θ) = θ·u`; no bias, one output, d equals the feature width.
    Linear { inputs: usize },
    /// Fully connected layers `dims[0] -> dims[1] -> ... -> dims[last]`,
    /// nonlinear activations on hidden layers, linear output heads.
    Mlp {
        dims: Vec<usize>,
        nonlinearity: Nonlinearity,
    },
}

/// Immutable value-function architecture with a flat parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueModel {
    arch: Arch,
}

impl ValueModel {
    /// Bias-free linear state-value function over `inputs` features.
    pub fn linear(inputs: usize) -> Result<Self, ModelError> {
        if inputs == 0 {
            return Err(ModelError::ShapeMismatch {
                expected: "at least one input feature".to_string(),
                got: "0".to_string(),
            });
        }
        Ok(Self {
            arch: Arch::Linear { inputs },
        })
    }

    /// Fully connected MLP from `inputs` features to `heads` scalar outputs.
    ///
    /// `hidden` may be empty, which yields a single affine layer.
    pub fn mlp(
        inputs: usize,
        hidden: &[usize],
        nonlinearity: Nonlinearity,
        heads: usize,
    ) -> Result<Self, ModelError> {
        if inputs == 0 || heads == 0 || hidden.contains(&0) {
            return Err(ModelError::ShapeMismatch {
                expected: "all layer widths >= 1".to_string(),
                got: format!("inputs {inputs}, hidden {hidden:?}, heads {heads}"),
            });
        }
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(inputs);
        dims.extend_from_slice(hidden);
        dims.push(heads);
        Ok(Self {
            arch: Arch::Mlp { dims, nonlinearity },
        })
    }

    /// Feature width expected by the model.
    pub fn inputs(&self) -> usize {
        match &self.arch {
            Arch::Linear { inputs } => *inputs,
            Arch::Mlp { dims, .. } => dims[0],
        }
    }

    /// Number of scalar output heads (1 for state-value models).
    pub fn heads(&self) -> usize {
        match &self.arch {
            Arch::Linear { .. } => 1,
            Arch::Mlp { dims, .. } => *dims.last().expect("dims non-empty"),
        }
    }

    /// Total parameter count `d`.
    pub fn param_count(&self) -> usize {
        self.layer_layouts()
            .last()
            .map(|l| l.bias.end.max(l.weights.end))
            .unwrap_or(0)
    }

    /// Flat layout of every layer: weights first, then biases, layer-major.
    ///
    /// The ranges partition `0..d` in order, which is what ties a covariance
    /// row/column index back to a specific weight or bias.
    pub fn layer_layouts(&self) -> Vec<LayerLayout> {
        match &self.arch {
            Arch::Linear { inputs } => vec![LayerLayout {
                weights: 0..*inputs,
                bias: *inputs..*inputs,
                rows: 1,
                cols: *inputs,
            }],
            Arch::Mlp { dims, .. } => {
                let mut layouts = Vec::with_capacity(dims.len() - 1);
                let mut offset = 0;
                for l in 0..dims.len() - 1 {
                    let (cols, rows) = (dims[l], dims[l + 1]);
                    let weights = offset..offset + rows * cols;
                    let bias = weights.end..weights.end + rows;
                    offset = bias.end;
                    layouts.push(LayerLayout {
                        weights,
                        bias,
                        rows,
                        cols,
                    });
                }
                layouts
            }
        }
    }

    /// Reproducible initialization: per layer, weights uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init_parameters(&self, seed: u64) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Array1::zeros(self.param_count());
        for layout in self.layer_layouts() {
            let s = 1.0 / (layout.cols as f64).sqrt();
            for idx in layout.weights {
                theta[idx] = rng.gen_range(-s..=s);
            }
            // Bias entries stay zero.
        }
        theta
    }

    fn check_theta(&self, theta: &Array1<f64>) -> Result<(), ModelError> {
        let d = self.param_count();
        if theta.len() != d {
            return Err(ModelError::ShapeMismatch {
                expected: format!("{d} parameters"),
                got: format!("{}", theta.len()),
            });
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NotFinite {
                what: "parameter vector",
            });
        }
        Ok(())
    }

    fn check_features(&self, features: &Array1<f64>) -> Result<(), ModelError> {
        if features.len() != self.inputs() {
            return Err(ModelError::ShapeMismatch {
                expected: format!("{} features", self.inputs()),
                got: format!("{}", features.len()),
            });
        }
        Ok(())
    }

    fn head_index(&self, input: &ModelInput) -> Result<usize, ModelError> {
        let heads = self.heads();
        match input.action {
            Some(a) if a < heads => Ok(a),
            Some(a) => Err(ModelError::ShapeMismatch {
                expected: format!("action index < {heads}"),
                got: format!("{a}"),
            }),
            None if heads == 1 => Ok(0),
            None => Err(ModelError::ShapeMismatch {
                expected: format!("an action index selecting one of {heads} heads"),
                got: "none".to_string(),
            }),
        }
    }

    /// All head values in one forward pass.
    pub fn q_values(
        &self,
        theta: &Array1<f64>,
        features: &Array1<f64>,
    ) -> Result<Array1<f64>, ModelError> {
        self.check_theta(theta)?;
        self.check_features(features)?;
        Ok(self.forward(theta, features).outputs)
    }

    /// `h(u_i; θ)` for each input, in order. Deterministic.
    pub fn evaluate(
        &self,
        theta: &Array1<f64>,
        inputs: &[ModelInput],
    ) -> Result<Array1<f64>, ModelError> {
        self.check_theta(theta)?;
        require_nonempty(inputs)?;
        let mut out = Array1::zeros(inputs.len());
        for (i, input) in inputs.iter().enumerate() {
            self.check_features(&input.features)?;
            let head = self.head_index(input)?;
            out[i] = self.forward(theta, &input.features).outputs[head];
        }
        Ok(out)
    }

    /// Exact gradient columns: entry `(p, i)` is `∂h(u_i; θ) / ∂θ_p`.
    pub fn jacobian(
        &self,
        theta: &Array1<f64>,
        inputs: &[ModelInput],
    ) -> Result<Array2<f64>, ModelError> {
        Ok(self.evaluate_with_jacobian(theta, inputs)?.1)
    }

    /// Evaluations and Jacobian from one shared forward pass per input.
    pub fn evaluate_with_jacobian(
        &self,
        theta: &Array1<f64>,
        inputs: &[ModelInput],
    ) -> Result<(Array1<f64>, Array2<f64>), ModelError> {
        self.check_theta(theta)?;
        require_nonempty(inputs)?;
        let d = self.param_count();
        let mut values = Array1::zeros(inputs.len());
        let mut jac = Array2::zeros((d, inputs.len()));
        let mut grad = vec![0.0; d];
        for (i, input) in inputs.iter().enumerate() {
            self.check_features(&input.features)?;
            let head = self.head_index(input)?;
            let trace = self.forward(theta, &input.features);
            values[i] = trace.outputs[head];
            grad.fill(0.0);
            self.backward(theta, &trace, head, &mut grad);
            for (dst, src) in jac.column_mut(i).iter_mut().zip(&grad) {
                *dst = *src;
            }
        }
        Ok((values, jac))
    }

    /// Forward pass keeping pre-activations and activations for backprop.
    fn forward(&self, theta: &Array1<f64>, features: &Array1<f64>) -> ForwardTrace {
        match &self.arch {
            Arch::Linear { .. } => {
                let h = theta.dot(features);
                ForwardTrace {
                    activations: vec![features.clone()],
                    preactivations: Vec::new(),
                    outputs: Array1::from_vec(vec![h]),
                }
            }
            Arch::Mlp { dims, nonlinearity } => {
                let t = theta.as_slice().expect("contiguous parameters");
                let layouts = self.layer_layouts();
                let mut activations = vec![features.clone()];
                let mut preactivations = Vec::with_capacity(layouts.len());
                for (l, layout) in layouts.iter().enumerate() {
                    let w = &t[layout.weights.clone()];
                    let b = &t[layout.bias.clone()];
                    let a_in = activations[l].as_slice().expect("contiguous activation");
                    let mut z = Array1::zeros(layout.rows);
                    for o in 0..layout.rows {
                        let row = &w[o * layout.cols..(o + 1) * layout.cols];
                        let dot: f64 = row.iter().zip(a_in).map(|(wi, ai)| wi * ai).sum();
                        z[o] = dot + b[o];
                    }
                    let last = l + 1 == layouts.len();
                    let a_out = if last {
                        z.clone()
                    } else {
                        z.mapv(|v| nonlinearity.apply(v))
                    };
                    preactivations.push(z);
                    activations.push(a_out);
                }
                let outputs = activations.last().expect("output layer").clone();
                debug_assert_eq!(outputs.len(), *dims.last().expect("dims non-empty"));
                ForwardTrace {
                    activations,
                    preactivations,
                    outputs,
                }
            }
        }
    }

    /// Reverse-mode gradient of head `head` written into `grad` (length d).
    fn backward(&self, theta: &Array1<f64>, trace: &ForwardTrace, head: usize, grad: &mut [f64]) {
        match &self.arch {
            Arch::Linear { .. } => {
                for (g, x) in grad.iter_mut().zip(trace.activations[0].iter()) {
                    *g = *x;
                }
            }
            Arch::Mlp { nonlinearity, .. } => {
                let t = theta.as_slice().expect("contiguous parameters");
                let layouts = self.layer_layouts();
                let n_layers = layouts.len();
                // Seed with the selected head; output layer is linear.
                let mut delta = vec![0.0; layouts[n_layers - 1].rows];
                delta[head] = 1.0;
                for l in (0..n_layers).rev() {
                    let layout = &layouts[l];
                    let a_in = trace.activations[l].as_slice().expect("contiguous");
                    let gw = &mut grad[layout.weights.clone()];
                    for o in 0..layout.rows {
                        let d_o = delta[o];
                        if d_o != 0.0 {
                            let row = &mut gw[o * layout.cols..(o + 1) * layout.cols];
                            for (g, a) in row.iter_mut().zip(a_in) {
                                *g = d_o * a;
                            }
                        }
                    }
                    for (o, d_o) in delta.iter().enumerate() {
                        grad[layout.bias.start + o] = *d_o;
                    }
                    if l > 0 {
                        let w = &t[layout.weights.clone()];
                        let z_prev = &trace.preactivations[l - 1];
                        let mut next = vec![0.0; layout.cols];
                        for o in 0..layout.rows {
                            let d_o = delta[o];
                            if d_o != 0.0 {
                                let row = &w[o * layout.cols..(o + 1) * layout.cols];
                                for (nx, wi) in next.iter_mut().zip(row) {
                                    *nx += d_o * wi;
                                }
                            }
                        }
                        for (i, nx) in next.iter_mut().enumerate() {
                            *nx *= nonlinearity.derivative(z_prev[i]);
                        }
                        delta = next;
                    }
                }
            }
        }
    }
}

/// Intermediate state of one forward pass.
struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l+1]` the output of layer l.
    activations: Vec<Array1<f64>>,
    /// Pre-activation of each layer, in order.
    preactivations: Vec<Array1<f64>>,
    /// All head values (equals the last activation).
    outputs: Array1<f64>,
}

fn require_nonempty(inputs: &[ModelInput]) -> Result<(), ModelError> {
    if inputs.is_empty() {
        return Err(ModelError::ShapeMismatch {
            expected: "at least one input".to_string(),
            got: "empty batch".to_string(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Test-local forward pass written straight from the layout description,
    /// independent of `ValueModel::forward`. Returns (head values,
    /// pre-activations per layer).
    fn oracle_forward(
        dims: &[usize],
        nonlinearity: Nonlinearity,
        theta: &[f64],
        x: &[f64],
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut offset = 0;
        let mut a: Vec<f64> = x.to_vec();
        let mut preacts = Vec::new();
        for l in 0..dims.len() - 1 {
            let (nin, nout) = (dims[l], dims[l + 1]);
            let mut z = vec![0.0; nout];
            for (o, zo) in z.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (i, ai) in a.iter().enumerate() {
                    acc += theta[offset + o * nin + i] * ai;
                }
                *zo = acc + theta[offset + nout * nin + o];
            }
            offset += nout * nin + nout;
            preacts.push(z.clone());
            let last = l + 2 == dims.len();
            a = if last {
                z
            } else {
                z.iter()
                    .map(|&v| match nonlinearity {
                        Nonlinearity::Relu => v.max(0.0),
                        Nonlinearity::Tanh => v.tanh(),
                    })
                    .collect()
            };
        }
        (a, preacts)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
        Array1::from_shape_fn(n, |_| rng.gen_range(-scale..scale))
    }

    #[test]
    fn linear_evaluate_is_dot_product() {
        let model = ValueModel::linear(2).unwrap();
        let theta = arr1(&[2.0, -1.0]);
        let inputs = [ModelInput::state(arr1(&[3.0, 4.0]))];
        let h = model.evaluate(&theta, &inputs).unwrap();
        assert_eq!(h[0], 2.0);
    }

    #[test]
    fn zero_weights_yield_bias_only_output() {
        let model = ValueModel::mlp(3, &[4], Nonlinearity::Relu, 2).unwrap();
        let mut theta = Array1::zeros(model.param_count());
        let layouts = model.layer_layouts();
        // Hidden bias is nonzero but cannot reach the output through zero weights.
        theta[layouts[0].bias.start] = 5.0;
        theta[layouts[1].bias.start] = 0.7;
        theta[layouts[1].bias.start + 1] = -0.3;
        let x = arr1(&[1.0, 2.0, 3.0]);
        let inputs = [
            ModelInput::state_action(x.clone(), 0),
            ModelInput::state_action(x, 1),
        ];
        let h = model.evaluate(&theta, &inputs).unwrap();
        assert_eq!(h[0], 0.7);
        assert_eq!(h[1], -0.3);
    }

    #[test]
    fn forward_matches_independent_oracle() {
        let model = ValueModel::mlp(16, &[16], Nonlinearity::Relu, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let theta = random_vec(&mut rng, model.param_count(), 0.8);
        let x = random_vec(&mut rng, 16, 1.0);
        let (oracle, _) = oracle_forward(
            &[16, 16, 4],
            Nonlinearity::Relu,
            theta.as_slice().unwrap(),
            x.as_slice().unwrap(),
        );
        let got = model.q_values(&theta, &x).unwrap();
        for (a, (g, o)) in got.iter().zip(oracle.iter()).enumerate() {
            assert!(
                (g - o).abs() <= 1e-12,
                "head {a}: forward {g} vs oracle {o}"
            );
        }
    }

    #[test]
    fn linear_jacobian_is_the_input() {
        let model = ValueModel::linear(2).unwrap();
        let theta = arr1(&[2.0, -1.0]);
        let inputs = [ModelInput::state(arr1(&[3.0, 4.0]))];
        let jac = model.jacobian(&theta, &inputs).unwrap();
        assert_eq!(jac.column(0).to_vec(), vec![3.0, 4.0]);
    }

    #[test]
    fn identical_inputs_produce_identical_columns() {
        let model = ValueModel::mlp(5, &[7], Nonlinearity::Tanh, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta = random_vec(&mut rng, model.param_count(), 0.6);
        let x = random_vec(&mut rng, 5, 1.0);
        let inputs = [
            ModelInput::state_action(x.clone(), 2),
            ModelInput::state_action(x, 2),
        ];
        let jac = model.jacobian(&theta, &inputs).unwrap();
        assert_eq!(jac.column(0), jac.column(1));
    }

    /// Central finite differences with step 1e-5 against the exact Jacobian.
    /// ReLU configurations are resampled when any pre-activation magnitude is
    /// below 1e-3, so no kink is crossed inside the difference stencil.
    fn check_jacobian_fd(model: &ValueModel, dims: &[usize], nonlin: Nonlinearity, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.param_count();
        let (theta, x) = loop {
            let theta = random_vec(&mut rng, d, 0.7);
            let x = random_vec(&mut rng, dims[0], 1.0);
            let (_, preacts) = oracle_forward(
                dims,
                nonlin,
                theta.as_slice().unwrap(),
                x.as_slice().unwrap(),
            );
            let near_kink =
                nonlin == Nonlinearity::Relu && preacts.iter().flatten().any(|z| z.abs() < 1e-3);
            if !near_kink {
                break (theta, x);
            }
        };
        let head = (seed as usize) % model.heads();
        let inputs = [ModelInput::state_action(x, head)];
        let jac = model.jacobian(&theta, &inputs).unwrap();
        let step = 1e-5;
        for p in 0..d {
            let mut plus = theta.clone();
            plus[p] += step;
            let mut minus = theta.clone();
            minus[p] -= step;
            let hp = model.evaluate(&plus, &inputs).unwrap()[0];
            let hm = model.evaluate(&minus, &inputs).unwrap()[0];
            let fd = (hp - hm) / (2.0 * step);
            let err = (jac[[p, 0]] - fd).abs() / fd.abs().max(1e-3);
            assert!(
                err <= 1e-5,
                "seed {seed} param {p}: exact {} vs fd {fd} (rel {err:.2e})",
                jac[[p, 0]]
            );
        }
    }

    #[test]
    fn jacobian_agrees_with_finite_differences_large_relu() {
        let model = ValueModel::mlp(100, &[32], Nonlinearity::Relu, 4).unwrap();
        check_jacobian_fd(&model, &[100, 32, 4], Nonlinearity::Relu, 3);
    }

    #[test]
    fn jacobian_agrees_with_finite_differences_many_architectures() {
        // 100 random (model, θ, input) triples across widths and activations.
        for seed in 0..100u64 {
            let nonlin = if seed % 2 == 0 {
                Nonlinearity::Relu
            } else {
                Nonlinearity::Tanh
            };
            let inputs = 2 + (seed % 5) as usize;
            let hidden = 1 + (seed % 4) as usize;
            let heads = 1 + (seed % 3) as usize;
            let model = ValueModel::mlp(inputs, &[hidden], nonlin, heads).unwrap();
            check_jacobian_fd(&model, &[inputs, hidden, heads], nonlin, 1000 + seed);
        }
    }

    #[test]
    fn init_respects_per_layer_bounds() {
        let linear = ValueModel::linear(4).unwrap();
        let theta = linear.init_parameters(11);
        assert_eq!(theta.len(), 4);
        assert!(theta.iter().all(|w| w.abs() <= 0.5));

        let model = ValueModel::mlp(16, &[16], Nonlinearity::Relu, 4).unwrap();
        let theta = model.init_parameters(7);
        for layout in model.layer_layouts() {
            let s = 1.0 / (layout.cols as f64).sqrt();
            for p in layout.weights.clone() {
                assert!(theta[p].abs() <= s, "weight {p} out of [-{s}, {s}]");
            }
            for p in layout.bias.clone() {
                assert_eq!(theta[p], 0.0);
            }
        }
    }

    #[test]
    fn init_is_reproducible() {
        let model = ValueModel::mlp(16, &[16], Nonlinearity::Relu, 4).unwrap();
        assert_eq!(model.init_parameters(7), model.init_parameters(7));
        assert_ne!(model.init_parameters(7), model.init_parameters(8));
    }

    #[test]
    fn evaluate_is_linear_in_parameters_for_linear_models() {
        let model = ValueModel::linear(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..50 {
            let t1 = random_vec(&mut rng, 6, 2.0);
            let t2 = random_vec(&mut rng, 6, 2.0);
            let (a, b) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let inputs = [ModelInput::state(random_vec(&mut rng, 6, 2.0))];
            let combo = model.evaluate(&(&t1 * a + &t2 * b), &inputs).unwrap()[0];
            let parts = a * model.evaluate(&t1, &inputs).unwrap()[0]
                + b * model.evaluate(&t2, &inputs).unwrap()[0];
            assert!((combo - parts).abs() <= 1e-12);
        }
    }

    #[test]
    fn layout_partitions_the_flat_vector() {
        let model = ValueModel::mlp(10, &[5, 3], Nonlinearity::Tanh, 2).unwrap();
        let layouts = model.layer_layouts();
        let mut cursor = 0;
        for layout in &layouts {
            assert_eq!(layout.weights.start, cursor);
            assert_eq!(layout.weights.len(), layout.rows * layout.cols);
            assert_eq!(layout.bias.start, layout.weights.end);
            assert_eq!(layout.bias.len(), layout.rows);
            cursor = layout.bias.end;
        }
        assert_eq!(cursor, model.param_count());
        assert_eq!(model.param_count(), 10 * 5 + 5 + 5 * 3 + 3 + 3 * 2 + 2);
    }

    #[test]
    fn shape_errors_are_reported() {
        let model = ValueModel::mlp(3, &[2], Nonlinearity::Relu, 2).unwrap();
        let theta = model.init_parameters(0);
        let short = Array1::zeros(model.param_count() - 1);
        let good_input = [ModelInput::state_action(arr1(&[1.0, 2.0, 3.0]), 0)];
        assert!(model.evaluate(&short, &good_input).is_err());
        let bad_features = [ModelInput::state_action(arr1(&[1.0]), 0)];
        assert!(model.evaluate(&theta, &bad_features).is_err());
        let bad_action = [ModelInput::state_action(arr1(&[1.0, 2.0, 3.0]), 5)];
        assert!(model.evaluate(&theta, &bad_action).is_err());
        let missing_action = [ModelInput::state(arr1(&[1.0, 2.0, 3.0]))];
        assert!(model.evaluate(&theta, &missing_action).is_err());
        assert!(model.evaluate(&theta, &[]).is_err());
        let nan = Array1::from_elem(model.param_count(), f64::NAN);
        assert!(matches!(
            model.evaluate(&nan, &good_input),
            Err(ModelError::NotFinite { .. })
        ));
    }
}
