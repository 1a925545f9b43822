//! Minimal sequential network engine: dense linear layers with bias and
//! elementwise activations, factored (low-rank) replacements, forward
//! evaluation recording every intermediate activation, and reverse-mode
//! gradients of the combined loss with respect to each layer's linear output.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{combined_loss_grad, LossConfig};

/// Elementwise activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
        }
    }
}

/// Dense linear layer `z = W x + b` followed by an activation.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl LinearLayer {
    /// `bias = None` means zeros.
    pub fn new(weight: Matrix, bias: Option<Vec<f64>>, activation: Activation) -> Result<Self> {
        if weight.rows() == 0 || weight.cols() == 0 {
            return Err(Error::Contract("linear layer needs positive dims".into()));
        }
        let bias = bias.unwrap_or_else(|| vec![0.0; weight.rows()]);
        if bias.len() != weight.rows() {
            return Err(Error::Contract(format!(
                "bias length {} does not match output dim {}",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }
}

/// Low-rank layer `z = left (right x) + b`; `k = 0` is the zero linear map.
#[derive(Debug, Clone)]
pub struct FactoredLayer {
    pub left: Matrix,
    pub right: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl FactoredLayer {
    pub fn new(
        left: Matrix,
        right: Matrix,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if left.cols() != right.rows() {
            return Err(Error::Contract(format!(
                "factored layer rank mismatch: left is {}x{}, right is {}x{}",
                left.rows(),
                left.cols(),
                right.rows(),
                right.cols()
            )));
        }
        if bias.len() != left.rows() {
            return Err(Error::Contract(format!(
                "bias length {} does not match output dim {}",
                bias.len(),
                left.rows()
            )));
        }
        Ok(Self {
            left,
            right,
            bias,
            activation,
        })
    }

    pub fn rank(&self) -> usize {
        self.left.cols()
    }
}

/// A layer in a sequential model.
#[derive(Debug, Clone)]
pub enum Layer {
    Dense(LinearLayer),
    Factored(FactoredLayer),
}

impl Layer {
    pub fn d_out(&self) -> usize {
        match self {
            Layer::Dense(l) => l.weight.rows(),
            Layer::Factored(l) => l.left.rows(),
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            Layer::Dense(l) => l.weight.cols(),
            Layer::Factored(l) => l.right.cols(),
        }
    }

    pub fn bias(&self) -> &[f64] {
        match self {
            Layer::Dense(l) => &l.bias,
            Layer::Factored(l) => &l.bias,
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Layer::Dense(l) => l.activation,
            Layer::Factored(l) => l.activation,
        }
    }

    /// Linear output `W x + b` (for factored layers `left (right x) + b`).
    pub fn linear(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Layer::Dense(l) => {
                let mut z = l.weight.mul_vec(x);
                for (zi, bi) in z.iter_mut().zip(&l.bias) {
                    *zi += bi;
                }
                z
            }
            Layer::Factored(l) => {
                let mid = l.right.mul_vec(x);
                let mut z = l.left.mul_vec(&mid);
                for (zi, bi) in z.iter_mut().zip(&l.bias) {
                    *zi += bi;
                }
                z
            }
        }
    }

    /// The linear map alone, `W x` without bias.
    pub fn linear_map(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Layer::Dense(l) => l.weight.mul_vec(x),
            Layer::Factored(l) => {
                let mid = l.right.mul_vec(x);
                l.left.mul_vec(&mid)
            }
        }
    }

    /// `W^T g` — pulls a gradient at the linear output back to the input.
    pub fn input_grad(&self, g: &[f64]) -> Vec<f64> {
        match self {
            Layer::Dense(l) => l.weight.mul_vec_transposed(g),
            Layer::Factored(l) => {
                let mid = l.left.mul_vec_transposed(g);
                l.right.mul_vec_transposed(&mid)
            }
        }
    }

    /// The layer's linear map as a dense matrix (materializes `left*right`
    /// for factored layers).
    pub fn dense_weight(&self) -> Matrix {
        match self {
            Layer::Dense(l) => l.weight.clone(),
            Layer::Factored(l) => l.left.matmul(&l.right),
        }
    }
}

/// Ordered layers with chained dimensions.
#[derive(Debug, Clone)]
pub struct SequentialModel {
    layers: Vec<Layer>,
}

impl SequentialModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("model needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::Contract(format!(
                    "layer {} output dim {} does not chain into layer {} input dim {}",
                    i,
                    pair[0].d_out(),
                    i + 1,
                    pair[1].d_in()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &Layer {
        &self.layers[i]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }
}

/// Per-layer activations recorded by [`forward`]: `inputs_per_layer[i]` is
/// the post-activation input entering linear layer `i`, `linear_outputs[i]`
/// its linear output.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub inputs_per_layer: Vec<Vec<f64>>,
    pub linear_outputs: Vec<Vec<f64>>,
    pub final_output: Vec<f64>,
}

/// Gradients of the loss with respect to each layer's linear output.
#[derive(Debug, Clone)]
pub struct GradTrace {
    pub z_grads: Vec<Vec<f64>>,
}

/// Evaluate the model, recording all intermediates.
pub fn forward(model: &SequentialModel, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != model.input_dim() {
        return Err(Error::Contract(format!(
            "input length {} does not match model input dim {}",
            x.len(),
            model.input_dim()
        )));
    }
    let n = model.num_layers();
    let mut inputs = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    let mut current = x.to_vec();
    for layer in model.layers() {
        let z = layer.linear(&current);
        let next: Vec<f64> = z.iter().map(|&v| layer.activation().apply(v)).collect();
        inputs.push(current);
        zs.push(z);
        current = next;
    }
    Ok(ForwardTrace {
        inputs_per_layer: inputs,
        linear_outputs: zs,
        final_output: current,
    })
}

/// Final output only.
pub fn forward_output(model: &SequentialModel, x: &[f64]) -> Result<Vec<f64>> {
    Ok(forward(model, x)?.final_output)
}

/// The post-activation vector entering linear layer `layer_index`
/// (`x` itself for index 0). Only layers before `layer_index` are evaluated.
pub fn forward_input_to(model: &SequentialModel, x: &[f64], layer_index: usize) -> Result<Vec<f64>> {
    if layer_index >= model.num_layers() {
        return Err(Error::Contract(format!(
            "layer index {} out of range for {} layers",
            layer_index,
            model.num_layers()
        )));
    }
    if x.len() != model.input_dim() {
        return Err(Error::Contract(format!(
            "input length {} does not match model input dim {}",
            x.len(),
            model.input_dim()
        )));
    }
    let mut current = x.to_vec();
    for layer in &model.layers()[..layer_index] {
        let z = layer.linear(&current);
        current = z.iter().map(|&v| layer.activation().apply(v)).collect();
    }
    Ok(current)
}

/// Reverse-mode gradients `g_i = d loss / d z_i` for every layer, holding all
/// parameters fixed.
pub fn backward(
    model: &SequentialModel,
    trace: &ForwardTrace,
    target: &[f64],
    loss_cfg: &LossConfig,
) -> Result<GradTrace> {
    let n = model.num_layers();
    if trace.linear_outputs.len() != n {
        return Err(Error::Contract(
            "trace does not match the model layer count".into(),
        ));
    }
    if target.len() != model.output_dim() {
        return Err(Error::Contract(format!(
            "target length {} does not match output dim {}",
            target.len(),
            model.output_dim()
        )));
    }
    let out_grad = combined_loss_grad(&trace.final_output, target, loss_cfg)?;

    let mut z_grads = vec![Vec::new(); n];
    let mut upstream = out_grad;
    for i in (0..n).rev() {
        let layer = model.layer(i);
        let act = layer.activation();
        let g: Vec<f64> = trace.linear_outputs[i]
            .iter()
            .zip(&upstream)
            .map(|(&z, &u)| act.derivative(z) * u)
            .collect();
        if i > 0 {
            upstream = layer.input_grad(&g);
        }
        z_grads[i] = g;
    }
    Ok(GradTrace { z_grads })
}

/// Replace layer `index` with a factored layer, carrying the original
/// layer's bias and activation over unchanged. The original model is left
/// untouched.
pub fn replace_layer(
    model: &SequentialModel,
    index: usize,
    factored: FactoredLayer,
) -> Result<SequentialModel> {
    if index >= model.num_layers() {
        return Err(Error::Contract(format!(
            "replace_layer index {} out of range for {} layers",
            index,
            model.num_layers()
        )));
    }
    let old = model.layer(index);
    if factored.left.rows() != old.d_out() || factored.right.cols() != old.d_in() {
        return Err(Error::Contract(format!(
            "factored layer shape {}x{} does not match layer {} ({}x{})",
            factored.left.rows(),
            factored.right.cols(),
            index,
            old.d_out(),
            old.d_in()
        )));
    }
    let replacement = FactoredLayer {
        left: factored.left,
        right: factored.right,
        bias: old.bias().to_vec(),
        activation: old.activation(),
    };
    let mut layers = model.layers().to_vec();
    layers[index] = Layer::Factored(replacement);
    SequentialModel::new(layers)
}

/// Parameter counts: `budgeted` covers linear parameters only (dense
/// `d_out*d_in`, factored `k*(d_out+d_in)`); biases are reported separately
/// and excluded from the compression budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub budgeted: usize,
    pub bias: usize,
}

pub fn param_count(model: &SequentialModel) -> ParamCount {
    let mut budgeted = 0;
    let mut bias = 0;
    for layer in model.layers() {
        budgeted += match layer {
            Layer::Dense(l) => l.weight.rows() * l.weight.cols(),
            Layer::Factored(l) => l.rank() * (l.left.rows() + l.right.cols()),
        };
        bias += layer.bias().len();
    }
    ParamCount { budgeted, bias }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::BaseKind;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense(weight: Matrix, bias: Option<Vec<f64>>, act: Activation) -> Layer {
        Layer::Dense(LinearLayer::new(weight, bias, act).unwrap())
    }

    fn seeded_model(seed: u64, dims: &[usize], act: Activation) -> SequentialModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let (d_in, d_out) = (w[0], w[1]);
            let scale = 1.0 / (d_in as f64).sqrt();
            let weight = Matrix::from_fn(d_out, d_in, |_, _| {
                (rng.random::<f64>() * 2.0 - 1.0) * scale
            });
            let bias: Vec<f64> = (0..d_out).map(|_| rng.random::<f64>() * 0.1).collect();
            layers.push(dense(weight, Some(bias), act));
        }
        let last = layers.len() - 1;
        if let Layer::Dense(l) = &mut layers[last] {
            l.activation = Activation::Identity;
        }
        SequentialModel::new(layers).unwrap()
    }

    #[test]
    fn forward_identity_layer() {
        let model =
            SequentialModel::new(vec![dense(Matrix::identity(2), None, Activation::Identity)])
                .unwrap();
        let t = forward(&model, &[1.0, 2.0]).unwrap();
        assert_eq!(t.final_output, vec![1.0, 2.0]);
        assert_eq!(t.inputs_per_layer[0], vec![1.0, 2.0]);
    }

    #[test]
    fn forward_forced_arithmetic() {
        let model = SequentialModel::new(vec![dense(
            Matrix::diag(&[2.0, 3.0]),
            Some(vec![1.0, 0.0]),
            Activation::Identity,
        )])
        .unwrap();
        let t = forward(&model, &[1.0, 1.0]).unwrap();
        assert_eq!(t.linear_outputs[0], vec![3.0, 3.0]);
    }

    #[test]
    fn forward_matches_straight_line_reevaluation() {
        let model = seeded_model(3, &[4, 5, 3], Activation::Tanh);
        let x = [0.3, -0.2, 0.9, 0.05];
        let t = forward(&model, &x).unwrap();

        // independent straight-line re-evaluation
        let mut v = x.to_vec();
        for layer in model.layers() {
            let z = layer.linear(&v);
            v = z.iter().map(|&z| layer.activation().apply(z)).collect();
        }
        for (a, b) in t.final_output.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
        // chain invariant: X_{i+1} = activation(Z_i) exactly
        for i in 0..model.num_layers() - 1 {
            for (x_next, z) in t.inputs_per_layer[i + 1]
                .iter()
                .zip(&t.linear_outputs[i])
            {
                assert_eq!(*x_next, model.layer(i).activation().apply(*z));
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let model = seeded_model(0, &[3, 2], Activation::Tanh);
        assert!(forward(&model, &[1.0]).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = seeded_model(9, &[6, 6, 6], Activation::Tanh);
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = forward(&model, &x).unwrap();
        let b = forward(&model, &x).unwrap();
        assert_eq!(a.final_output, b.final_output);
        assert_eq!(a.linear_outputs, b.linear_outputs);
    }

    #[test]
    fn backward_zero_at_loss_minimum() {
        let model =
            SequentialModel::new(vec![dense(Matrix::identity(2), None, Activation::Identity)])
                .unwrap();
        let x = [0.5, -1.0];
        let t = forward(&model, &x).unwrap();
        let g = backward(&model, &t, &x, &LossConfig::base_only(BaseKind::Mse)).unwrap();
        assert_eq!(g.z_grads[0], vec![0.0, 0.0]);
    }

    #[test]
    fn backward_analytic_mse_gradient() {
        // identity layer, mse over d=2: g = (2/d) * (z - y) = (2, 0)
        let model =
            SequentialModel::new(vec![dense(Matrix::identity(2), None, Activation::Identity)])
                .unwrap();
        let t = forward(&model, &[2.0, 0.0]).unwrap();
        let g = backward(&model, &t, &[0.0, 0.0], &LossConfig::base_only(BaseKind::Mse)).unwrap();
        assert_eq!(g.z_grads[0], vec![2.0, 0.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let model = seeded_model(17, &[5, 6, 4], Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let y: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let cfg = LossConfig::base_only(BaseKind::Mse);
        let trace = forward(&model, &x).unwrap();
        let grads = backward(&model, &trace, &y, &cfg).unwrap();

        // Perturb each z_i coordinate and re-run the downstream layers.
        let h = 1e-5;
        let loss_from_layer = |i: usize, z: &[f64]| -> f64 {
            let mut v: Vec<f64> = z
                .iter()
                .map(|&zv| model.layer(i).activation().apply(zv))
                .collect();
            for layer in &model.layers()[i + 1..] {
                let z = layer.linear(&v);
                v = z.iter().map(|&zv| layer.activation().apply(zv)).collect();
            }
            crate::losses::combined_loss(&v, &y, &cfg).unwrap()
        };
        for i in 0..model.num_layers() {
            for j in 0..trace.linear_outputs[i].len() {
                let mut plus = trace.linear_outputs[i].clone();
                plus[j] += h;
                let mut minus = trace.linear_outputs[i].clone();
                minus[j] -= h;
                let fd = (loss_from_layer(i, &plus) - loss_from_layer(i, &minus)) / (2.0 * h);
                let got = grads.z_grads[i][j];
                let denom = fd.abs().max(got.abs()).max(1e-8);
                assert!(
                    (fd - got).abs() / denom <= 1e-5,
                    "layer {i} coord {j}: fd {fd} vs grad {got}"
                );
            }
        }
    }

    #[test]
    fn replace_with_exact_factorization_preserves_outputs() {
        let model = seeded_model(23, &[4, 4, 4], Activation::Tanh);
        let w = model.layer(0).dense_weight();
        let factored =
            FactoredLayer::new(w.clone(), Matrix::identity(4), vec![0.0; 4], Activation::Tanh)
                .unwrap();
        let replaced = replace_layer(&model, 0, factored).unwrap();
        let x = [0.1, -0.4, 0.8, 0.3];
        let a = forward_output(&model, &x).unwrap();
        let b = forward_output(&replaced, &x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn replace_with_rank_zero_gives_bias_output() {
        let model = SequentialModel::new(vec![dense(
            Matrix::diag(&[2.0, 3.0]),
            Some(vec![0.5, -0.25]),
            Activation::Identity,
        )])
        .unwrap();
        let factored = FactoredLayer::new(
            Matrix::zeros(2, 0),
            Matrix::zeros(0, 2),
            vec![0.0; 2],
            Activation::Identity,
        )
        .unwrap();
        let replaced = replace_layer(&model, 0, factored).unwrap();
        for x in [[1.0, 1.0], [3.0, -2.0]] {
            let out = forward_output(&replaced, &x).unwrap();
            assert_eq!(out, vec![0.5, -0.25]);
        }
    }

    #[test]
    fn replace_with_full_rank_svd_matches_dense() {
        let model = seeded_model(31, &[5, 3], Activation::Identity);
        let w = model.layer(0).dense_weight();
        let (l, r) = crate::linalg::truncated_svd(&w, 3).unwrap();
        let factored = FactoredLayer::new(l, r, vec![0.0; 3], Activation::Identity).unwrap();
        let replaced = replace_layer(&model, 0, factored).unwrap();
        let x = [0.2, 0.4, -0.3, 0.9, -0.8];
        let a = forward_output(&model, &x).unwrap();
        let b = forward_output(&replaced, &x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn replace_rejects_bad_index_and_shape() {
        let model = seeded_model(1, &[3, 2], Activation::Tanh);
        let f = FactoredLayer::new(
            Matrix::zeros(2, 1),
            Matrix::zeros(1, 3),
            vec![0.0; 2],
            Activation::Tanh,
        )
        .unwrap();
        assert!(replace_layer(&model, 5, f.clone()).is_err());
        let bad = FactoredLayer::new(
            Matrix::zeros(4, 1),
            Matrix::zeros(1, 3),
            vec![0.0; 4],
            Activation::Tanh,
        )
        .unwrap();
        assert!(replace_layer(&model, 0, bad).is_err());
    }

    #[test]
    fn param_count_examples() {
        let dense_model = SequentialModel::new(vec![dense(
            Matrix::zeros(4, 8),
            None,
            Activation::Identity,
        )])
        .unwrap();
        assert_eq!(param_count(&dense_model).budgeted, 32);
        assert_eq!(param_count(&dense_model).bias, 4);

        let factored_model = SequentialModel::new(vec![Layer::Factored(
            FactoredLayer::new(
                Matrix::zeros(4, 2),
                Matrix::zeros(2, 8),
                vec![0.0; 4],
                Activation::Identity,
            )
            .unwrap(),
        )])
        .unwrap();
        assert_eq!(param_count(&factored_model).budgeted, 24);
    }

    #[test]
    fn param_count_mixed_additivity() {
        let mixed = SequentialModel::new(vec![
            dense(Matrix::zeros(4, 8), None, Activation::Tanh),
            Layer::Factored(
                FactoredLayer::new(
                    Matrix::zeros(8, 2),
                    Matrix::zeros(2, 4),
                    vec![0.0; 8],
                    Activation::Identity,
                )
                .unwrap(),
            ),
        ])
        .unwrap();
        assert_eq!(param_count(&mixed).budgeted, 32 + 24);
    }

    #[test]
    fn replace_then_count_is_consistent() {
        let model = seeded_model(2, &[8, 4], Activation::Identity);
        let before = param_count(&model).budgeted;
        let k = 2;
        let f = FactoredLayer::new(
            Matrix::zeros(4, k),
            Matrix::zeros(k, 8),
            vec![0.0; 4],
            Activation::Identity,
        )
        .unwrap();
        let replaced = replace_layer(&model, 0, f).unwrap();
        let after = param_count(&replaced).budgeted;
        assert_eq!(before - after, 4 * 8 - k * (4 + 8));
    }
}
