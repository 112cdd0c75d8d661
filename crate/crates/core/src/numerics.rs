//! Scalar primitives, dense layers with hand-written gradients, Adam, and a
//! central-difference gradient oracle.
//!
//! Everything here works in `f64`; embeddings are widened from `f32` on load.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `log(sum(exp(logits)))` with a max shift so nothing overflows.
pub fn lse(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::arg("lse of an empty vector"));
    }
    check_finite(logits, "lse input")?;
    Ok(lse_unchecked(logits))
}

pub(crate) fn lse_unchecked(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    max + sum.ln()
}

/// `log(1 + exp(x))`, evaluated as `max(x, 0) + log1p(exp(-|x|))`.
pub fn softplus(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::numeric(format!("softplus of non-finite value {x}")));
    }
    Ok(softplus_unchecked(x))
}

pub(crate) fn softplus_unchecked(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, branch-selected so neither tail overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the given logits (max-shifted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Derivative of [`leaky_relu`]; the kink at zero takes the `slope` branch.
pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

pub(crate) fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::numeric(format!(
            "{what}: non-finite value {} at index {i}",
            values[i]
        ))),
    }
}

/// A dense parameter with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::arg(format!("invalid tensor shape {shape:?}")));
        }
        if values.len() != n {
            return Err(Error::arg(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        check_finite(&values, "tensor values")?;
        Ok(Self {
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            values,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// `y = W x + b` with `W` stored row-major as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
}

impl Affine {
    pub fn new(weight: ParamTensor, bias: ParamTensor) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([out, _], [b]) if out == b => Ok(Self { weight, bias }),
            (w, b) => Err(Error::arg(format!(
                "affine layer shapes disagree: weight {w:?}, bias {b:?}"
            ))),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: ParamTensor::zeros(&[output, input]),
            bias: ParamTensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::arg(format!(
                "affine input has length {}, layer expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_upstream(&self, upstream: &[f64]) -> Result<()> {
        if upstream.len() != self.output_dim() {
            return Err(Error::arg(format!(
                "upstream gradient has length {}, layer emits {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let n_in = self.input_dim();
        Ok(self
            .weight
            .values
            .chunks_exact(n_in)
            .zip(&self.bias.values)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect())
    }

    /// `W^T upstream`, leaving the gradient buffers alone.
    pub fn input_grad(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_upstream(upstream)?;
        let n_in = self.input_dim();
        let mut out = vec![0.0; n_in];
        for (row, &u) in self.weight.values.chunks_exact(n_in).zip(upstream) {
            if u == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * u;
            }
        }
        Ok(out)
    }

    /// Accumulates `upstream ⊗ x` into the weight gradient and `upstream`
    /// into the bias gradient, then returns `W^T upstream`.
    pub fn backward(&mut self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let input_grad = self.input_grad(upstream)?;
        let n_in = self.input_dim();
        for ((grow, &u), gb) in self
            .weight
            .grad
            .chunks_exact_mut(n_in)
            .zip(upstream)
            .zip(self.bias.grad.iter_mut())
        {
            *gb += u;
            if u == 0.0 {
                continue;
            }
            for (g, xi) in grow.iter_mut().zip(x) {
                *g += u * xi;
            }
        }
        Ok(input_grad)
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }
}

pub fn affine_forward(layer: &Affine, x: &[f64]) -> Result<Vec<f64>> {
    layer.forward(x)
}

pub fn affine_backward(layer: &mut Affine, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    layer.backward(x, upstream)
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
            learning_rate: 5e-5,
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

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(param: &ParamTensor, config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: vec![0.0; param.len()],
            second_moment: vec![0.0; param.len()],
        }
    }
}

/// One bias-corrected Adam update. The gradient is zeroed on success; on a
/// non-finite gradient nothing is touched and a numeric error is returned.
pub fn adam_step(param: &mut ParamTensor, state: &mut OptimizerState) -> Result<()> {
    if state.first_moment.len() != param.len() || state.second_moment.len() != param.len() {
        return Err(Error::arg("optimizer state does not match parameter shape"));
    }
    check_finite(&param.grad, "gradient")?;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let correction1 = 1.0 - beta1.powi(t);
    let correction2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in param
        .values
        .iter_mut()
        .zip(param.grad.iter_mut())
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * *g;
        *v = beta2 * *v + (1.0 - beta2) * *g * *g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        *g = 0.0;
    }
    Ok(())
}

/// Central-difference gradient of `loss` at `params`.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|i| {
            let original = probe[i];
            probe[i] = original + h;
            let plus = loss(&probe);
            probe[i] = original - h;
            let minus = loss(&probe);
            probe[i] = original;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn lse_examples() {
        assert!(close(lse(&[0.0, 0.0, 0.0]).unwrap(), 3f64.ln(), 1e-15));
        assert!(close(lse(&[1000.0, 1000.0]).unwrap(), 1000.0 + 2f64.ln(), 1e-12));
        assert_eq!(lse(&[5.0]).unwrap(), 5.0);
    }

    #[test]
    fn lse_errors() {
        assert!(matches!(lse(&[]), Err(Error::Argument(_))));
        assert!(matches!(lse(&[1.0, f64::NAN]), Err(Error::Numeric(_))));
        assert!(matches!(lse(&[f64::INFINITY]), Err(Error::Numeric(_))));
    }

    #[test]
    fn softplus_examples() {
        assert!(close(softplus(0.0).unwrap(), 2f64.ln(), 1e-15));
        assert!(close(softplus(100.0).unwrap(), 100.0, 1e-12));
        let tail = softplus(-100.0).unwrap();
        assert!(tail > 0.0);
        assert!(close(tail, (-100f64).exp(), 1e-55));
        assert!(softplus(f64::NAN).is_err());
    }

    #[test]
    fn leaky_relu_examples() {
        assert_eq!(leaky_relu(3.0, 0.2), 3.0);
        assert_eq!(leaky_relu(-5.0, 0.2), -1.0);
        assert_eq!(leaky_relu_grad(-5.0, 0.2), 0.2);
        assert_eq!(leaky_relu_grad(0.0, 0.2), 0.2);
        assert_eq!(leaky_relu_grad(1e-300, 0.2), 1.0);
    }

    fn layer(rows: &[&[f64]], bias: &[f64]) -> Affine {
        let out = rows.len();
        let inp = rows[0].len();
        let w = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Affine::new(
            ParamTensor::from_values(&[out, inp], w).unwrap(),
            ParamTensor::from_values(&[out], bias.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn affine_forward_examples() {
        let id = layer(&[&[1.0, 0.0], &[0.0, 1.0]], &[1.0, 1.0]);
        assert_eq!(affine_forward(&id, &[2.0, 3.0]).unwrap(), vec![3.0, 4.0]);
        let zero = layer(&[&[0.0, 0.0, 0.0]], &[7.0]);
        assert_eq!(affine_forward(&zero, &[9.0, -4.0, 1e3]).unwrap(), vec![7.0]);
        let dot = layer(&[&[1.0, 2.0]], &[0.0]);
        assert_eq!(affine_forward(&dot, &[3.0, 4.0]).unwrap(), vec![11.0]);
        assert!(matches!(affine_forward(&dot, &[1.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn affine_backward_examples() {
        let mut id = layer(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]);
        let g = affine_backward(&mut id, &[5.0, 6.0], &[1.0, 0.0]).unwrap();
        assert_eq!(g, vec![1.0, 0.0]);

        let mut row = layer(&[&[0.5, -0.5]], &[0.0]);
        affine_backward(&mut row, &[2.0, 3.0], &[1.0]).unwrap();
        assert_eq!(row.weight.grad, vec![2.0, 3.0]);
        assert_eq!(row.bias.grad, vec![1.0]);
        assert!(affine_backward(&mut row, &[2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (n_in, n_out) = (rng.random_range(1..6), rng.random_range(1..6));
            let mut l = Affine::zeros(n_in, n_out);
            l.weight.values.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
            l.bias.values.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
            let x: Vec<f64> = (0..n_in).map(|_| rng.random_range(-2.0..2.0)).collect();
            let c: Vec<f64> = (0..n_out).map(|_| rng.random_range(-2.0..2.0)).collect();
            // L = sum_j c_j * tanh(y_j), a nonlinear readout
            let readout = |y: &[f64]| y.iter().zip(&c).map(|(y, c)| c * y.tanh()).sum::<f64>();
            let y = l.forward(&x).unwrap();
            let upstream: Vec<f64> = y
                .iter()
                .zip(&c)
                .map(|(y, c)| c * (1.0 - y.tanh().powi(2)))
                .collect();
            let gx = l.backward(&x, &upstream).unwrap();

            let fx = finite_diff_grad(|p| readout(&l.forward(p).unwrap()), &x, 1e-5);
            let base = l.clone();
            let fw = finite_diff_grad(
                |p| {
                    let mut probe = base.clone();
                    probe.weight.values.copy_from_slice(p);
                    readout(&probe.forward(&x).unwrap())
                },
                &base.weight.values,
                1e-5,
            );
            for (a, n) in gx.iter().zip(&fx).chain(l.weight.grad.iter().zip(&fw)) {
                assert!((a - n).abs() <= 1e-6 * a.abs().max(n.abs()).max(1.0), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = ParamTensor::from_values(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.values.clone();
        p.grad = vec![1.0; 3];
        let mut s = OptimizerState::new(&p, AdamConfig::with_learning_rate(1e-3));
        adam_step(&mut p, &mut s).unwrap();
        for (a, b) in p.values.iter().zip(&before) {
            assert!(close(a - b, -1e-3 / (1.0 + 1e-8), 1e-15));
        }
        assert_eq!(p.grad, vec![0.0; 3]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = ParamTensor::from_values(&[2], vec![0.5, -1.0]).unwrap();
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut p, &mut s).unwrap();
        assert_eq!(p.values, vec![0.5, -1.0]);
    }

    #[test]
    fn adam_second_identical_step_does_not_grow() {
        let mut p = ParamTensor::zeros(&[4]);
        let mut s = OptimizerState::new(&p, AdamConfig::with_learning_rate(1e-3));
        p.grad = vec![1.0; 4];
        adam_step(&mut p, &mut s).unwrap();
        let d1 = p.values[0];
        p.grad = vec![1.0; 4];
        adam_step(&mut p, &mut s).unwrap();
        let d2 = p.values[0] - d1;
        assert!(d2.abs() <= d1.abs() * (1.0 + 1e-9));
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = ParamTensor::zeros(&[2]);
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        p.grad = vec![1.0, f64::NAN];
        assert!(matches!(adam_step(&mut p, &mut s), Err(Error::Numeric(_))));
        assert_eq!(s.step_count, 0);
        assert_eq!(p.values, vec![0.0, 0.0]);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5);
        assert!(close(g[0], 6.0, 1e-6));
        let g = finite_diff_grad(|p| softplus(p[0]).unwrap(), &[0.0], 1e-5);
        assert!(close(g[0], 0.5, 1e-6));
    }

    proptest! {
        #[test]
        fn lse_shift_invariance(
            v in prop::collection::vec(-50.0f64..50.0, 1..12),
            c in -1e3f64..1e3,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let lhs = lse(&shifted).unwrap();
            let rhs = lse(&v).unwrap() + c;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }

        #[test]
        fn lse_bounds(v in prop::collection::vec(-1e4f64..1e4, 1..12)) {
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let value = lse(&v).unwrap();
            prop_assert!(value >= max);
            prop_assert!(value <= max + (v.len() as f64).ln() + 1e-9 * max.abs().max(1.0));
        }

        #[test]
        fn softplus_of_lse_is_log_z_plus_one(v in prop::collection::vec(-30.0f64..30.0, 1..10)) {
            let stable = softplus(lse(&v).unwrap()).unwrap();
            let direct = v.iter().map(|x| x.exp()).sum::<f64>().ln_1p();
            prop_assert!((stable - direct).abs() <= 1e-12 * direct.abs().max(f64::MIN_POSITIVE));
        }

        #[test]
        fn primitives_finite_on_bounded_inputs(x in -1e4f64..1e4, slope in 0.01f64..0.99) {
            prop_assert!(softplus(x).unwrap().is_finite());
            prop_assert!(sigmoid(x).is_finite());
            prop_assert!(leaky_relu(x, slope).is_finite());
            prop_assert!(lse(&[x, -x, 0.0]).unwrap().is_finite());
        }
    }
}
