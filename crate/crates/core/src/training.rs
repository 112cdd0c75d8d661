//! The alternating adversarial loop: one discriminator step (with the label
//! table) followed by one generator step per mini-batch.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, Batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    d_unsup_grad, g_feature_match_grad, g_unsup_grad, supervised_loss_grad, LossBreakdown, LossForm,
};
use crate::model::{form_fake_latent, form_real_latent, Cssda, DiscriminatorOutput, GeneratorTrace, InferenceRoute, ModelShape};
use crate::numerics::{adam_step, AdamConfig, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Conditional latents, stabilised losses.
    #[default]
    Full,
    /// Generator maps noise to a fake feature vector; no label conditioning.
    NonConditional,
    /// Conditional latents, unsupervised losses evaluated without LSE/Softplus.
    NaiveLoss,
    /// Supervised discriminator-shaped MLP on labeled embeddings only.
    NoAugment,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NonConditional => "non-conditional",
            Mode::NaiveLoss => "naive-loss",
            Mode::NoAugment => "no-augment",
        }
    }

    pub fn loss_form(self) -> LossForm {
        match self {
            Mode::NaiveLoss => LossForm::Naive,
            _ => LossForm::Derived,
        }
    }

    /// Whether the generator conditions on `h_cls` and real latents read the
    /// label table.
    pub fn is_conditional(self) -> bool {
        matches!(self, Mode::Full | Mode::NaiveLoss)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Number of real classes; taken from the data when unset.
    pub k: Option<usize>,
    /// Embedding width; taken from the data when unset.
    pub dim: Option<usize>,
    /// Hidden width of both networks; defaults to `dim`.
    pub hidden: Option<usize>,
    pub labeled_fraction: f64,
    pub lr_d: f64,
    pub lr_g: f64,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub seed: u64,
    pub mode: Mode,
    pub infer: InferenceRoute,
    /// Noise width for the non-conditional generator.
    pub noise_dim: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 5,
            k: None,
            dim: None,
            hidden: None,
            labeled_fraction: 0.5,
            lr_d: 5e-5,
            lr_g: 5e-5,
            leaky_slope: 0.2,
            dropout: 0.1,
            seed: 0,
            mode: Mode::Full,
            infer: InferenceRoute::Generator,
            noise_dim: 100,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::arg(format!("batch size {} is below 2", self.batch_size)));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::arg(format!(
                "labeled fraction {} outside (0, 1]",
                self.labeled_fraction
            )));
        }
        AdamConfig::with_learning_rate(self.lr_d).validate()?;
        AdamConfig::with_learning_rate(self.lr_g).validate()?;
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::arg(format!("leaky slope {} outside (0, 1)", self.leaky_slope)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::arg(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.noise_dim == 0 || self.hidden == Some(0) {
            return Err(Error::arg("network widths must be positive"));
        }
        Ok(())
    }

    /// Model sizes for a dataset, checking any sizes fixed in the config.
    pub fn shape_for(&self, dataset: &Dataset) -> Result<ModelShape> {
        let dim = dataset.dim();
        let k = dataset.vocab().k();
        if let Some(want) = self.dim {
            if want != dim {
                return Err(Error::config(format!("config dim {want} but embeddings have {dim}")));
            }
        }
        if let Some(want) = self.k {
            if want != k {
                return Err(Error::config(format!("config k {want} but labels define {k} classes")));
            }
        }
        let hidden = self.hidden.unwrap_or(dim);
        let generator_input = if self.mode == Mode::NonConditional { self.noise_dim } else { dim };
        Ok(ModelShape {
            dim,
            hidden,
            k,
            generator_input,
        })
    }

    /// Route used when scoring a model trained in this configuration.
    pub fn inference_route(&self) -> InferenceRoute {
        if self.mode.is_conditional() {
            self.infer
        } else {
            InferenceRoute::Direct
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub numeric_error_count: usize,
    /// Seconds.
    #[serde(with = "duration_secs")]
    pub wall_time: Duration,
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?))
    }
}

/// What a single step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    /// The batch had labeled samples, so the supervised term is defined.
    pub supervised_present: bool,
    /// The batch produced fake latents, so fake-side terms are defined.
    pub fake_present: bool,
    pub generator_updated: bool,
}

/// Which loss terms contribute to a gradient evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub supervised: bool,
    pub unsupervised: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        supervised: true,
        unsupervised: true,
    };
}

/// Per-sample randomness of one batch, drawn up front so a loss evaluation
/// is a pure function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNoise {
    pub masks: Vec<Option<Vec<f64>>>,
    pub noise: Vec<Vec<f64>>,
}

struct RealLatent<'a> {
    v: Vec<f64>,
    label: Option<usize>,
    h: &'a [f64],
}

/// Inputs of one step resolved against the dataset.
#[derive(Debug, Clone)]
pub struct StepInputs<'a> {
    pub mode: Mode,
    pub form: LossForm,
    pub labeled: Vec<(&'a [f64], usize)>,
    pub unlabeled: Vec<&'a [f64]>,
}

impl<'a> StepInputs<'a> {
    pub fn new(dataset: &'a Dataset, batch: &Batch, mode: Mode) -> Self {
        let samples = dataset.samples();
        let labeled = batch
            .labeled
            .iter()
            .map(|&i| (samples[i].embedding.values(), samples[i].label.expect("labeled sample")))
            .collect();
        let unlabeled = if mode == Mode::NoAugment {
            Vec::new()
        } else {
            batch.unlabeled.iter().map(|&i| samples[i].embedding.values()).collect()
        };
        Self {
            mode,
            form: mode.loss_form(),
            labeled,
            unlabeled,
        }
    }

    pub fn fake_count(&self) -> usize {
        self.unlabeled.len()
    }

    /// Latents the discriminator treats as real, with their labels when the
    /// supervised term applies.
    fn real_latents(&self, model: &Cssda) -> Result<Vec<RealLatent<'a>>> {
        let mut out = Vec::with_capacity(self.labeled.len() + self.unlabeled.len());
        for &(h, label) in &self.labeled {
            let v = if self.mode.is_conditional() {
                form_real_latent(h, label, &model.table)?.values
            } else {
                h.to_vec()
            };
            out.push(RealLatent {
                v,
                label: Some(label),
                h,
            });
        }
        if self.mode == Mode::NonConditional {
            out.extend(self.unlabeled.iter().map(|&h| RealLatent {
                v: h.to_vec(),
                label: None,
                h,
            }));
        }
        Ok(out)
    }

    pub fn draw_noise(&self, model: &Cssda, noise_dim: usize, rng: &mut ChaCha8Rng) -> BatchNoise {
        let n = self.fake_count();
        let masks = (0..n).map(|_| model.generator.dropout_mask(rng)).collect();
        let noise = if self.mode == Mode::NonConditional {
            (0..n)
                .map(|_| (0..noise_dim).map(|_| StandardNormal.sample(&mut *rng)).collect())
                .collect()
        } else {
            Vec::new()
        };
        BatchNoise { masks, noise }
    }

    fn generator_input<'b>(&'b self, noise: &'b BatchNoise, i: usize) -> &'b [f64] {
        if self.mode == Mode::NonConditional {
            &noise.noise[i]
        } else {
            self.unlabeled[i]
        }
    }

    /// Fake latent from a generator output.
    fn fake_latent(&self, i: usize, y: &[f64]) -> Result<Vec<f64>> {
        if self.mode.is_conditional() {
            Ok(form_fake_latent(self.unlabeled[i], y)?.values)
        } else {
            Ok(y.to_vec())
        }
    }

    /// `d loss / d y` from `d loss / d v`.
    fn fake_output_grad(&self, i: usize, dv: Vec<f64>) -> Vec<f64> {
        if self.mode.is_conditional() {
            dv.iter().zip(self.unlabeled[i]).map(|(d, h)| d * h).collect()
        } else {
            dv
        }
    }

    fn fakes(&self, model: &Cssda, noise: &BatchNoise) -> Result<Vec<(GeneratorTrace, Vec<f64>, DiscriminatorOutput)>> {
        (0..self.fake_count())
            .map(|i| {
                let trace = model
                    .generator
                    .forward_traced(self.generator_input(noise, i), noise.masks[i].as_deref())?;
                let v = self.fake_latent(i, &trace.output)?;
                let out = model.discriminator.forward(&v)?;
                Ok((trace, v, out))
            })
            .collect()
    }
}

/// Discriminator-side objective. Accumulates gradients into the
/// discriminator and label table and returns `(supervised, unsupervised)`.
pub fn discriminator_objective(model: &mut Cssda, inputs: &StepInputs, noise: &BatchNoise, terms: Terms) -> Result<(f64, f64)> {
    let real = inputs.real_latents(model)?;
    let real_out: Vec<DiscriminatorOutput> = real
        .iter()
        .map(|r| model.discriminator.forward(&r.v))
        .collect::<Result<_>>()?;
    let fakes = inputs.fakes(model, noise)?;

    let supervised_rows: Vec<usize> = (0..real.len()).filter(|&i| real[i].label.is_some()).collect();
    let sup_logits: Vec<&[f64]> = supervised_rows.iter().map(|&i| real_out[i].logits.as_slice()).collect();
    let sup_labels: Vec<usize> = supervised_rows.iter().filter_map(|&i| real[i].label).collect();
    let sup = supervised_loss_grad(&sup_logits, &sup_labels)?;

    let mut d_real: Vec<Vec<f64>> = vec![vec![0.0; model.k()]; real.len()];
    let mut d_fake: Vec<Vec<f64>> = vec![vec![0.0; model.k()]; fakes.len()];
    if terms.supervised {
        for (&i, g) in supervised_rows.iter().zip(&sup.grads) {
            d_real[i].iter_mut().zip(g).for_each(|(d, g)| *d += g);
        }
    }
    let mut unsup_value = 0.0;
    if inputs.mode != Mode::NoAugment && !(real.is_empty() && fakes.is_empty()) {
        let real_logits: Vec<&[f64]> = real_out.iter().map(|o| o.logits.as_slice()).collect();
        let fake_logits: Vec<&[f64]> = fakes.iter().map(|f| f.2.logits.as_slice()).collect();
        let unsup = d_unsup_grad(inputs.form, &real_logits, &fake_logits)?;
        unsup_value = unsup.value;
        if terms.unsupervised {
            for (d, g) in d_real.iter_mut().zip(&unsup.real) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            for (d, g) in d_fake.iter_mut().zip(&unsup.fake) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
    }

    for (real, (out, d)) in real.iter().zip(real_out.iter().zip(&d_real)) {
        let dv = model.discriminator.backward(&real.v, out, d, None)?;
        if let (Some(label), true) = (real.label, inputs.mode.is_conditional()) {
            let row_grad: Vec<f64> = dv.iter().zip(real.h).map(|(d, h)| d * h).collect();
            model.table.accumulate_grad(label, &row_grad)?;
        }
    }
    for ((_, v, out), d) in fakes.iter().zip(&d_fake) {
        model.discriminator.backward(v, out, d, None)?;
    }
    Ok((sup.value, unsup_value))
}

/// Generator-side objective. Accumulates gradients into the generator only
/// and returns `(feature_match, unsupervised)`; `None` when there are no fakes.
pub fn generator_objective(model: &mut Cssda, inputs: &StepInputs, noise: &BatchNoise, terms: GeneratorTerms) -> Result<Option<(f64, f64)>> {
    if inputs.fake_count() == 0 {
        return Ok(None);
    }
    let real_features: Vec<Vec<f64>> = inputs
        .real_latents(model)?
        .iter()
        .map(|r| Ok(model.discriminator.forward(&r.v)?.hidden_features))
        .collect::<Result<_>>()?;
    let fakes = inputs.fakes(model, noise)?;
    let fake_features: Vec<&[f64]> = fakes.iter().map(|f| f.2.hidden_features.as_slice()).collect();
    let fake_logits: Vec<&[f64]> = fakes.iter().map(|f| f.2.logits.as_slice()).collect();

    let (fm_value, fm_grad) = if real_features.is_empty() {
        (0.0, None)
    } else {
        let (v, g) = g_feature_match_grad(&real_features, &fake_features)?;
        (v, Some(g))
    };
    let unsup = g_unsup_grad(inputs.form, &fake_logits)?;

    let zeros = vec![0.0; model.k()];
    for (i, (trace, _, out)) in fakes.iter().enumerate() {
        let d_logits = if terms.unsupervised { &unsup.grads[i] } else { &zeros };
        let d_features = if terms.feature_match { fm_grad.as_deref() } else { None };
        let dv = model.discriminator.input_grad(out, d_logits, d_features)?;
        let dy = inputs.fake_output_grad(i, dv);
        model.generator.backward(inputs.generator_input(noise, i), trace, &dy)?;
    }
    Ok(Some((fm_value, unsup.value)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorTerms {
    pub feature_match: bool,
    pub unsupervised: bool,
}

impl GeneratorTerms {
    pub const ALL: GeneratorTerms = GeneratorTerms {
        feature_match: true,
        unsupervised: true,
    };
}

/// A model together with optimizer state and the step RNG.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Cssda,
    config: TrainingConfig,
    d_state: Vec<OptimizerState>,
    g_state: Vec<OptimizerState>,
    rng: ChaCha8Rng,
}

const GENERATOR_TENSORS: std::ops::Range<usize> = 0..4;
const DISCRIMINATOR_TENSORS: std::ops::Range<usize> = 4..9;

impl Trainer {
    pub fn new(shape: ModelShape, config: &TrainingConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Cssda::init(shape, config.leaky_slope, config.dropout, &mut init_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let tensors = model.tensors();
        let g_state = tensors[GENERATOR_TENSORS]
            .iter()
            .map(|t| OptimizerState::new(t, AdamConfig::with_learning_rate(config.lr_g)))
            .collect();
        let d_state = tensors[DISCRIMINATOR_TENSORS]
            .iter()
            .map(|t| OptimizerState::new(t, AdamConfig::with_learning_rate(config.lr_d)))
            .collect();
        Ok(Self {
            model,
            config: config.clone(),
            d_state,
            g_state,
            rng,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    fn apply(&mut self, range: std::ops::Range<usize>, discriminator: bool) -> Result<()> {
        let states = if discriminator { &mut self.d_state } else { &mut self.g_state };
        let mut tensors = self.model.tensors_mut();
        // validate every gradient before touching any parameter
        for t in &tensors[range.clone()] {
            crate::numerics::check_finite(&t.grad, "gradient")?;
        }
        for (t, s) in tensors[range].iter_mut().zip(states.iter_mut()) {
            adam_step(t, s)?;
        }
        Ok(())
    }

    /// One discriminator update then one generator update on fresh forward
    /// passes. On error no parameter of the failing phase has moved.
    pub fn train_step(&mut self, dataset: &Dataset, batch: &Batch) -> Result<StepOutcome> {
        let inputs = StepInputs::new(dataset, batch, self.config.mode);
        if inputs.labeled.is_empty() && inputs.unlabeled.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let noise = inputs.draw_noise(&self.model, self.config.noise_dim, &mut self.rng);
        self.model.zero_grad();
        let d_result = discriminator_objective(&mut self.model, &inputs, &noise, Terms::ALL);
        let (d_sup, d_unsup) = match d_result {
            Ok(v) => v,
            Err(e) => {
                self.model.zero_grad();
                return Err(e);
            }
        };
        if let Err(e) = self.apply(DISCRIMINATOR_TENSORS, true) {
            self.model.zero_grad();
            return Err(e);
        }

        let mut losses = LossBreakdown::new(d_sup, d_unsup, 0.0, 0.0);
        let mut generator_updated = false;
        if self.config.mode != Mode::NoAugment {
            let noise = inputs.draw_noise(&self.model, self.config.noise_dim, &mut self.rng);
            self.model.zero_grad();
            let g = generator_objective(&mut self.model, &inputs, &noise, GeneratorTerms::ALL)
                .and_then(|g| {
                    if g.is_some() {
                        self.apply(GENERATOR_TENSORS, false)?;
                    }
                    Ok(g)
                });
            match g {
                Ok(Some((fm, unsup))) => {
                    losses = LossBreakdown::new(d_sup, d_unsup, fm, unsup);
                    generator_updated = true;
                }
                Ok(None) => {}
                Err(e) => {
                    self.model.zero_grad();
                    return Err(e);
                }
            }
        }
        Ok(StepOutcome {
            losses,
            supervised_present: !inputs.labeled.is_empty(),
            fake_present: inputs.fake_count() > 0,
            generator_updated,
        })
    }
}

/// A trained model and the mode it was trained in.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Cssda,
    pub mode: Mode,
    pub route: InferenceRoute,
}

/// Runs every epoch. Numeric errors are counted and skipped in naive-loss
/// mode and abort the run otherwise.
pub fn train_run_with<F>(dataset: &Dataset, config: &TrainingConfig, mut on_epoch: F) -> Result<(TrainedModel, Vec<EpochLog>)>
where
    F: FnMut(&EpochLog),
{
    config.validate()?;
    if dataset.labeled_count() == 0 {
        return Err(Error::config("training needs at least one labeled sample"));
    }
    let labeled_only;
    let train_set = if config.mode == Mode::NoAugment {
        labeled_only = dataset.labeled_only().expect("labeled samples exist");
        &labeled_only
    } else {
        dataset
    };
    let shape = config.shape_for(train_set)?;
    let mut trainer = Trainer::new(shape, config)?;
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut step_losses = Vec::new();
        let mut numeric_error_count = 0;
        for batch in batch_iter(train_set, config.batch_size, config.seed, epoch as u64)? {
            match trainer.train_step(train_set, &batch) {
                Ok(outcome) => step_losses.push(outcome.losses),
                Err(Error::Numeric(_)) if config.mode == Mode::NaiveLoss => numeric_error_count += 1,
                Err(e) => return Err(e),
            }
        }
        let log = EpochLog {
            epoch,
            losses: LossBreakdown::mean(&step_losses),
            numeric_error_count,
            wall_time: started.elapsed(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((
        TrainedModel {
            model: trainer.model,
            mode: config.mode,
            route: config.inference_route(),
        },
        logs,
    ))
}

pub fn train_run(dataset: &Dataset, config: &TrainingConfig) -> Result<(TrainedModel, Vec<EpochLog>)> {
    train_run_with(dataset, config, |_| {})
}
