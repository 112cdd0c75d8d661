//! Generator, discriminator, label-embedding table, latent formation, and
//! inference.
//!
//! The discriminator emits `k` logits; the fake class logit is fixed at zero
//! and never materialised, so `D(v) = Z / (Z + 1)` with `Z = sum(exp(l))`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{leaky_relu, leaky_relu_grad, lse, softmax, softplus, Affine, ParamTensor};

pub const INIT_SD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Real,
    Fake,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentVariable {
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

/// Structural sizes of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub dim: usize,
    pub hidden: usize,
    pub k: usize,
    /// Width of the generator input: `dim` when conditioned on `h_cls`,
    /// the noise width otherwise.
    pub generator_input: usize,
}

impl ModelShape {
    pub fn conditional(dim: usize, hidden: usize, k: usize) -> Self {
        Self {
            dim,
            hidden,
            k,
            generator_input: dim,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.generator_input == 0 {
            return Err(Error::arg(format!("model sizes must be positive: {self:?}")));
        }
        if self.k < 2 {
            return Err(Error::arg("need at least two real classes"));
        }
        Ok(())
    }
}

fn init_affine<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Affine {
    let normal = Normal::new(0.0, INIT_SD).expect("valid sd");
    let mut layer = Affine::zeros(input, output);
    layer
        .weight
        .values
        .iter_mut()
        .for_each(|w| *w = normal.sample(rng));
    layer
}

/// Post-activation caches from one generator pass.
#[derive(Debug, Clone)]
pub struct GeneratorTrace {
    pub pre_activation: Vec<f64>,
    pub mask: Option<Vec<f64>>,
    pub hidden_out: Vec<f64>,
    pub output: Vec<f64>,
}

/// `output(dropout(leaky_relu(hidden(x))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub hidden: Affine,
    pub output: Affine,
    pub leaky_slope: f64,
    pub dropout: f64,
}

impl Generator {
    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.output.output_dim()
    }

    /// Inverted-dropout mask: each unit is zeroed with probability
    /// `dropout`, survivors are scaled by `1 / (1 - dropout)`.
    pub fn dropout_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Vec<f64>> {
        if self.dropout <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.dropout;
        Some(
            (0..self.hidden.output_dim())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        )
    }

    pub fn forward_traced(&self, x: &[f64], mask: Option<&[f64]>) -> Result<GeneratorTrace> {
        let pre = self.hidden.forward(x)?;
        let mut hidden_out: Vec<f64> = pre.iter().map(|&z| leaky_relu(z, self.leaky_slope)).collect();
        if let Some(mask) = mask {
            if mask.len() != hidden_out.len() {
                return Err(Error::arg("dropout mask width differs from hidden width"));
            }
            hidden_out.iter_mut().zip(mask).for_each(|(h, m)| *h *= m);
        }
        let output = self.output.forward(&hidden_out)?;
        Ok(GeneratorTrace {
            pre_activation: pre,
            mask: mask.map(<[f64]>::to_vec),
            hidden_out,
            output,
        })
    }

    /// Generator output; pass `None` for inference.
    pub fn forward(&self, x: &[f64], mask: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(self.forward_traced(x, mask)?.output)
    }

    /// Accumulates parameter gradients for `d loss / d output = upstream`.
    pub fn backward(&mut self, x: &[f64], trace: &GeneratorTrace, upstream: &[f64]) -> Result<()> {
        let mut d_hidden = self.output.backward(&trace.hidden_out, upstream)?;
        if let Some(mask) = &trace.mask {
            d_hidden.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
        }
        d_hidden
            .iter_mut()
            .zip(&trace.pre_activation)
            .for_each(|(d, &z)| *d *= leaky_relu_grad(z, self.leaky_slope));
        self.hidden.backward(x, &d_hidden)?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.hidden.zero_grad();
        self.output.zero_grad();
    }
}

pub fn generator_forward(gen: &Generator, h_cls: &[f64], dropout_mask: Option<&[f64]>) -> Result<Vec<f64>> {
    gen.forward(h_cls, dropout_mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorOutput {
    /// Post-activation intermediate layer, the feature-matching target.
    pub hidden_features: Vec<f64>,
    pub logits: Vec<f64>,
    pub(crate) pre_activation: Vec<f64>,
}

/// `output(leaky_relu(hidden(v)))`, no dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub hidden: Affine,
    pub output: Affine,
    pub leaky_slope: f64,
}

impl Discriminator {
    pub fn forward(&self, v: &[f64]) -> Result<DiscriminatorOutput> {
        let pre = self.hidden.forward(v)?;
        let hidden_features: Vec<f64> = pre.iter().map(|&z| leaky_relu(z, self.leaky_slope)).collect();
        let logits = self.output.forward(&hidden_features)?;
        Ok(DiscriminatorOutput {
            hidden_features,
            logits,
            pre_activation: pre,
        })
    }

    fn hidden_upstream(&self, out: &DiscriminatorOutput, d_logits: &[f64], d_features: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut d = self.output.input_grad(d_logits)?;
        if let Some(extra) = d_features {
            d.iter_mut().zip(extra).for_each(|(d, e)| *d += e);
        }
        d.iter_mut()
            .zip(&out.pre_activation)
            .for_each(|(d, &z)| *d *= leaky_relu_grad(z, self.leaky_slope));
        Ok(d)
    }

    /// Accumulates parameter gradients and returns `d loss / d v`.
    /// `d_features` is an optional extra gradient on the hidden features.
    pub fn backward(
        &mut self,
        v: &[f64],
        out: &DiscriminatorOutput,
        d_logits: &[f64],
        d_features: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let d_pre = self.hidden_upstream(out, d_logits, d_features)?;
        self.output.backward(&out.hidden_features, d_logits)?;
        self.hidden.backward(v, &d_pre)
    }

    /// `d loss / d v` without touching any gradient buffer.
    pub fn input_grad(&self, out: &DiscriminatorOutput, d_logits: &[f64], d_features: Option<&[f64]>) -> Result<Vec<f64>> {
        let d_pre = self.hidden_upstream(out, d_logits, d_features)?;
        self.hidden.input_grad(&d_pre)
    }

    pub fn zero_grad(&mut self) {
        self.hidden.zero_grad();
        self.output.zero_grad();
    }
}

pub fn discriminator_forward(disc: &Discriminator, v: &LatentVariable) -> Result<DiscriminatorOutput> {
    disc.forward(&v.values)
}

/// Trainable real-label embeddings, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddingTable {
    pub rows: ParamTensor,
}

impl LabelEmbeddingTable {
    pub fn k(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn row(&self, label: usize) -> Result<&[f64]> {
        if label >= self.k() {
            return Err(Error::arg(format!("label {label} outside 0..{}", self.k())));
        }
        let d = self.dim();
        Ok(&self.rows.values[label * d..(label + 1) * d])
    }

    /// Adds `d loss / d row` for `label`.
    pub fn accumulate_grad(&mut self, label: usize, grad: &[f64]) -> Result<()> {
        if label >= self.k() || grad.len() != self.dim() {
            return Err(Error::arg("label-table gradient has the wrong shape"));
        }
        let d = self.dim();
        self.rows.grad[label * d..(label + 1) * d]
            .iter_mut()
            .zip(grad)
            .for_each(|(g, x)| *g += x);
        Ok(())
    }
}

fn hadamard(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::arg(format!(
            "element-wise product of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

pub fn form_fake_latent(h_cls: &[f64], y_fake: &[f64]) -> Result<LatentVariable> {
    Ok(LatentVariable {
        values: hadamard(h_cls, y_fake)?,
        provenance: Provenance::Fake,
    })
}

pub fn form_real_latent(h_cls: &[f64], label: usize, table: &LabelEmbeddingTable) -> Result<LatentVariable> {
    Ok(LatentVariable {
        values: hadamard(h_cls, table.row(label)?)?,
        provenance: Provenance::Real,
    })
}

/// Probability mass of the implicit fake class, `1 / (Z + 1)`.
pub fn fake_probability(logits: &[f64]) -> Result<f64> {
    Ok((-softplus(lse(logits)?)?).exp())
}

/// How a test-time latent is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceRoute {
    /// `h ⊙ G(h)`, argmax over the k real logits.
    #[default]
    Generator,
    /// `h ⊙ table[j]` for each j, scored by its own logit j.
    PerLabel,
    /// `h` fed to the discriminator unmodified (unconditioned models).
    Direct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Full parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Cssda {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub table: LabelEmbeddingTable,
}

impl Cssda {
    /// Seeded normal(0, 0.02) weights, zero biases.
    pub fn init<R: Rng + ?Sized>(shape: ModelShape, leaky_slope: f64, dropout: f64, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        if !(leaky_slope > 0.0 && leaky_slope < 1.0) {
            return Err(Error::arg(format!("leaky slope {leaky_slope} outside (0, 1)")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::arg(format!("dropout {dropout} outside [0, 1)")));
        }
        let ModelShape {
            dim,
            hidden,
            k,
            generator_input,
        } = shape;
        let generator = Generator {
            hidden: init_affine(generator_input, hidden, rng),
            output: init_affine(hidden, dim, rng),
            leaky_slope,
            dropout,
        };
        let discriminator = Discriminator {
            hidden: init_affine(dim, hidden, rng),
            output: init_affine(hidden, k, rng),
            leaky_slope,
        };
        let normal = Normal::new(0.0, INIT_SD).expect("valid sd");
        let mut rows = ParamTensor::zeros(&[k, dim]);
        rows.values.iter_mut().for_each(|v| *v = normal.sample(rng));
        let model = Self {
            generator,
            discriminator,
            table: LabelEmbeddingTable { rows },
        };
        let expected = generator_input * hidden + hidden + hidden * dim + dim + dim * hidden + hidden + hidden * k + k + k * dim;
        assert_eq!(model.parameter_count(), expected);
        Ok(model)
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            dim: self.discriminator.hidden.input_dim(),
            hidden: self.discriminator.hidden.output_dim(),
            k: self.discriminator.output.output_dim(),
            generator_input: self.generator.input_dim(),
        }
    }

    pub fn k(&self) -> usize {
        self.discriminator.output.output_dim()
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> [&ParamTensor; 9] {
        [
            &self.generator.hidden.weight,
            &self.generator.hidden.bias,
            &self.generator.output.weight,
            &self.generator.output.bias,
            &self.discriminator.hidden.weight,
            &self.discriminator.hidden.bias,
            &self.discriminator.output.weight,
            &self.discriminator.output.bias,
            &self.table.rows,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut ParamTensor; 9] {
        [
            &mut self.generator.hidden.weight,
            &mut self.generator.hidden.bias,
            &mut self.generator.output.weight,
            &mut self.generator.output.bias,
            &mut self.discriminator.hidden.weight,
            &mut self.discriminator.hidden.bias,
            &mut self.discriminator.output.weight,
            &mut self.discriminator.output.bias,
            &mut self.table.rows,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(ParamTensor::zero_grad);
    }

    pub fn predict(&self, h_cls: &[f64], route: InferenceRoute) -> Result<Prediction> {
        let scores = match route {
            InferenceRoute::Generator => {
                let y_fake = self.generator.forward(h_cls, None)?;
                let v = form_fake_latent(h_cls, &y_fake)?;
                self.discriminator.forward(&v.values)?.logits
            }
            InferenceRoute::PerLabel => (0..self.k())
                .map(|j| {
                    let v = form_real_latent(h_cls, j, &self.table)?;
                    Ok(self.discriminator.forward(&v.values)?.logits[j])
                })
                .collect::<Result<Vec<f64>>>()?,
            InferenceRoute::Direct => self.discriminator.forward(h_cls)?.logits,
        };
        crate::numerics::check_finite(&scores, "class scores")?;
        Ok(Prediction {
            class: argmax(&scores),
            probabilities: softmax(&scores),
        })
    }
}

pub fn predict_class(model: &Cssda, h_cls: &[f64], route: InferenceRoute) -> Result<Prediction> {
    model.predict(h_cls, route)
}
