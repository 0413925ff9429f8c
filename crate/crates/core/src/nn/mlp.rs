use rand::Rng;

use super::Matrix;
use crate::error::{shape_err, Error, Result};

/// One dense layer: `out = x · weight + bias`, with `weight` shaped `n × m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self { weight: Matrix::zeros(n, m), bias: vec![0.0; m] }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// A fixed-topology MLP. ReLU sits between consecutive layers; the last layer
/// is linear unless `relu_output` is set (client encoders end in a ReLU).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
    pub relu_output: bool,
}

impl MlpParams {
    /// Fan-in uniform init: every weight and bias of a layer with `n` inputs is
    /// drawn from `U[-1/√n, 1/√n]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], relu_output: bool, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(dims, relu_output)?;
        for layer in &mut params.layers {
            let bound = 1.0 / (layer.input_dim() as f64).sqrt();
            for w in layer.weight.data_mut().iter_mut().chain(layer.bias.iter_mut()) {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(params)
    }

    pub fn zeros(dims: &[usize], relu_output: bool) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("an MLP needs at least two dims, got {dims:?}")));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!("zero-width layer in {dims:?}")));
        }
        let layers = dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        Ok(Self { layers, relu_output })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            relu_output: self.relu_output,
        }
    }

    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Linear::output_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer, weight (row-major) then bias.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.data().iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.data_mut().iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.shape() == b.weight.shape() && a.bias.len() == b.bias.len()
            })
    }

    fn relu_after(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.relu_output
    }
}

/// Activations recorded by [`mlp_forward`]: the input to each layer and each
/// layer's pre-activation.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

pub fn linear_forward(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if b.len() != w.cols() {
        return shape_err(format!("bias length {} vs {} weight columns", b.len(), w.cols()));
    }
    let mut out = x.matmul(w)?;
    for r in 0..out.rows() {
        for (o, bias) in out.row_mut(r).iter_mut().zip(b) {
            *o += bias;
        }
    }
    Ok(out)
}

pub fn mlp_forward(params: &MlpParams, x: &Matrix) -> Result<(Matrix, Tape)> {
    if x.cols() != params.input_dim() {
        return shape_err(format!(
            "input has {} features, network expects {}",
            x.cols(),
            params.input_dim()
        ));
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut act = x.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = linear_forward(&act, &layer.weight, &layer.bias)?;
        let next = if params.relu_after(i) { z.map(|v| v.max(0.0)) } else { z.clone() };
        inputs.push(std::mem::replace(&mut act, next));
        pre.push(z);
    }
    Ok((act, Tape { inputs, pre }))
}

/// Reverse pass. Returns parameter gradients and the gradient with respect to
/// the network input.
pub fn mlp_backward(params: &MlpParams, tape: &Tape, d_out: &Matrix) -> Result<(MlpParams, Matrix)> {
    let last = tape.pre.last().ok_or_else(|| Error::Shape("empty tape".into()))?;
    if d_out.shape() != last.shape() {
        return shape_err(format!(
            "output gradient {:?} does not match output {:?}",
            d_out.shape(),
            last.shape()
        ));
    }
    let mut grads = params.zeros_like();
    let mut d_act = d_out.clone();
    for i in (0..params.layers.len()).rev() {
        let mut dz = d_act;
        if params.relu_after(i) {
            for (d, &z) in dz.data_mut().iter_mut().zip(tape.pre[i].data()) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let g = &mut grads.layers[i];
        g.weight = tape.inputs[i].t_matmul(&dz)?;
        for r in dz.row_iter() {
            for (b, d) in g.bias.iter_mut().zip(r) {
                *b += d;
            }
        }
        d_act = dz.matmul_t(&params.layers[i].weight)?;
    }
    Ok((grads, d_act))
}

/// `logits − logsumexp(logits)`, stabilized by subtracting the maximum.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return logits.to_vec();
    }
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

pub fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = log_softmax(logits.row(r));
        out.row_mut(r).copy_from_slice(&row);
    }
    out
}

/// Loss functions available for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// Cross-entropy against a one-hot target, i.e. KL divergence to it.
    #[default]
    CrossEntropyOneHot,
}

/// Mean cross-entropy of `softmax(logits)` against class indices, and its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return shape_err(format!("{} labels for {} rows", labels.len(), logits.rows()));
    }
    let batch = logits.rows().max(1) as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::Input(format!("label {y} out of range for {} classes", logits.cols())));
        }
        let lp = log_softmax(logits.row(r));
        loss -= lp[y];
        for (g, l) in grad.row_mut(r).iter_mut().zip(&lp) {
            *g = l.exp() / batch;
        }
        grad.row_mut(r)[y] -= 1.0 / batch;
    }
    Ok((loss / batch, grad))
}

fn one_hot_labels(y: &Matrix) -> Result<Vec<usize>> {
    y.row_iter()
        .enumerate()
        .map(|(r, row)| {
            let hot: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
            let rest_zero = row.iter().all(|&v| v == 0.0 || v == 1.0);
            match hot.as_slice() {
                [i] if rest_zero => Ok(*i),
                _ => Err(Error::Input(format!("target row {r} is not one-hot: {row:?}"))),
            }
        })
        .collect()
}

/// Mean loss over the batch and exact parameter gradients.
pub fn loss_and_grad(params: &MlpParams, x: &Matrix, y: &Matrix, loss: LossKind) -> Result<(f64, MlpParams)> {
    let LossKind::CrossEntropyOneHot = loss;
    if y.rows() != x.rows() || y.cols() != params.output_dim() {
        return shape_err(format!(
            "targets {:?} do not match batch {} x classes {}",
            y.shape(),
            x.rows(),
            params.output_dim()
        ));
    }
    let labels = one_hot_labels(y)?;
    let (logits, tape) = mlp_forward(params, x)?;
    let (value, d_logits) = softmax_cross_entropy(&logits, &labels)?;
    let (grads, _) = mlp_backward(params, &tape, &d_logits)?;
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_forward_examples() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let id = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(linear_forward(&x, &id, &[0.0, 0.0]).unwrap(), x);

        let x = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let w = Matrix::from_rows(&[[2.0, 0.0], [0.0, 3.0]]).unwrap();
        assert_eq!(linear_forward(&x, &w, &[1.0, 1.0]).unwrap().data(), &[3.0, 4.0]);

        let empty = Matrix::zeros(0, 2);
        assert_eq!(linear_forward(&empty, &w, &[0.0, 0.0]).unwrap().shape(), (0, 2));

        assert!(matches!(linear_forward(&x, &w, &[0.0]), Err(Error::Shape(_))));
        assert!(linear_forward(&Matrix::zeros(1, 3), &w, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn identity_and_relu_clamp() {
        let mut p = MlpParams::zeros(&[2, 2], false).unwrap();
        p.layers[0].weight = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let x = Matrix::from_rows(&[[0.5, -3.0]]).unwrap();
        assert_eq!(mlp_forward(&p, &x).unwrap().0, x);

        p.relu_output = true;
        assert_eq!(mlp_forward(&p, &x).unwrap().0.data(), &[0.5, 0.0]);
    }

    // Second, straight-line evaluation of a 2-layer net used as the oracle.
    fn straight_line(p: &MlpParams, x: &[f64]) -> Vec<f64> {
        let (l0, l1) = (&p.layers[0], &p.layers[1]);
        let hidden: Vec<f64> = (0..l0.output_dim())
            .map(|j| {
                let s: f64 = (0..l0.input_dim()).map(|i| x[i] * l0.weight.get(i, j)).sum::<f64>() + l0.bias[j];
                s.max(0.0)
            })
            .collect();
        (0..l1.output_dim())
            .map(|j| (0..l1.input_dim()).map(|i| hidden[i] * l1.weight.get(i, j)).sum::<f64>() + l1.bias[j])
            .collect()
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut rng = stream(3, Stream::Certificate);
        for _ in 0..20 {
            let p = MlpParams::new(&[5, 7, 3], false, &mut rng).unwrap();
            let x = random_matrix(4, 5, &mut rng);
            let (out, _) = mlp_forward(&p, &x).unwrap();
            for r in 0..4 {
                let oracle = straight_line(&p, x.row(r));
                for (a, b) in out.row(r).iter().zip(&oracle) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn log_softmax_examples() {
        let ln2 = std::f64::consts::LN_2;
        let out = log_softmax(&[0.0, 0.0]);
        assert!((out[0] + ln2).abs() < 1e-15 && (out[1] + ln2).abs() < 1e-15);

        let out = log_softmax(&[1000.0, 0.0]);
        assert!(out[0].abs() < 1e-12);
        assert!((out[1] + 1000.0).abs() < 1e-9);
        assert!(out.iter().all(|v| v.is_finite()));

        // Frozen from a 40-digit mpmath evaluation of ln softmax([1, 2, 3]).
        let out = log_softmax(&[1.0, 2.0, 3.0]);
        let frozen = [-2.40760596444438, -1.4076059644443804, -0.4076059644443803];
        for (a, b) in out.iter().zip(frozen) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn uniform_prediction_loss_is_ln10() {
        let p = MlpParams::zeros(&[3, 10], false).unwrap();
        let x = Matrix::from_rows(&[[0.3, -1.0, 2.0], [1.0, 1.0, 1.0]]).unwrap();
        let mut y = Matrix::zeros(2, 10);
        y.set(0, 4, 1.0);
        y.set(1, 9, 1.0);
        let (loss, _) = loss_and_grad(&p, &x, &y, LossKind::CrossEntropyOneHot).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - std::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_has_zero_loss_and_gradient() {
        let logits = Matrix::from_rows(&[[1000.0, 0.0, 0.0]]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_non_one_hot_targets() {
        let p = MlpParams::zeros(&[2, 3], false).unwrap();
        let x = Matrix::zeros(1, 2);
        let y = Matrix::from_rows(&[[0.5, 0.5, 0.0]]).unwrap();
        assert!(matches!(loss_and_grad(&p, &x, &y, LossKind::CrossEntropyOneHot), Err(Error::Input(_))));
        let y = Matrix::from_rows(&[[1.0, 1.0, 0.0]]).unwrap();
        assert!(loss_and_grad(&p, &x, &y, LossKind::CrossEntropyOneHot).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = stream(1, Stream::Init);
        let p = MlpParams::new(&[49, 16, 4], true, &mut rng).unwrap();
        let b0 = 1.0 / 7.0;
        assert!(p.layers[0].weight.data().iter().all(|w| w.abs() <= b0));
        assert!(p.layers[1].bias.iter().all(|w| w.abs() <= 0.25));
        assert_eq!(p.param_count(), 49 * 16 + 16 + 16 * 4 + 4);
        assert_eq!(p.dims(), vec![49, 16, 4]);
    }
}
