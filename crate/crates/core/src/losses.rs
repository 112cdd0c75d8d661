//! Training objectives over batches of discriminator outputs.
//!
//! With the fake logit pinned at zero, `D(v) = Z / (Z + 1)` and the
//! unsupervised terms reduce to
//!
//! - real: `-log D(v)       = log(1 + 1/Z) = softplus(-lse(l))`
//! - fake: `-log(1 - D(v))  = log(1 + Z)   = softplus(lse(l))`
//!
//! The derived form evaluates these through `lse` and `softplus` and never
//! materialises `Z`. The naive form computes `Z = sum(exp(l))` directly and
//! reports overflow as a numeric error; it is kept as an ablation arm and as
//! an oracle for the derived form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_finite, lse, sigmoid, softmax, softplus_unchecked};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossForm {
    #[default]
    Derived,
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub d_supervised: f64,
    pub d_unsupervised: f64,
    pub d_total: f64,
    pub g_feature_match: f64,
    pub g_unsupervised: f64,
    pub g_total: f64,
}

impl LossBreakdown {
    pub fn new(d_supervised: f64, d_unsupervised: f64, g_feature_match: f64, g_unsupervised: f64) -> Self {
        Self {
            d_supervised,
            d_unsupervised,
            d_total: d_supervised + d_unsupervised,
            g_feature_match,
            g_unsupervised,
            g_total: g_feature_match + g_unsupervised,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.d_supervised,
            self.d_unsupervised,
            self.d_total,
            self.g_feature_match,
            self.g_unsupervised,
            self.g_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Component-wise mean; zero for an empty slice.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown::new(
            avg(|b| b.d_supervised),
            avg(|b| b.d_unsupervised),
            avg(|b| b.g_feature_match),
            avg(|b| b.g_unsupervised),
        )
    }
}

/// A batch loss with its gradient for each row of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Unsupervised discriminator loss with gradients for both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct UnsupGrad {
    pub value: f64,
    pub real: Vec<Vec<f64>>,
    pub fake: Vec<Vec<f64>>,
}

fn scale_rows(rows: &mut [Vec<f64>], factor: f64) {
    rows.iter_mut().flatten().for_each(|g| *g *= factor);
}

/// Mean cross-entropy over the k real classes, with gradients.
/// An empty batch contributes zero.
pub fn supervised_loss_grad<L: AsRef<[f64]>>(logits: &[L], labels: &[usize]) -> Result<BatchGrad> {
    if logits.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} logit rows but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Ok(BatchGrad {
            value: 0.0,
            grads: Vec::new(),
        });
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (row, &label) in logits.iter().zip(labels) {
        let row = row.as_ref();
        if label >= row.len() {
            return Err(Error::arg(format!("label {label} outside 0..{}", row.len())));
        }
        total += lse(row)? - row[label];
        let mut g = softmax(row);
        g[label] -= 1.0;
        grads.push(g);
    }
    scale_rows(&mut grads, 1.0 / n);
    Ok(BatchGrad {
        value: total / n,
        grads,
    })
}

pub fn supervised_loss<L: AsRef<[f64]>>(logits: &[L], labels: &[usize]) -> Result<f64> {
    Ok(supervised_loss_grad(logits, labels)?.value)
}

/// Unshifted `Z = sum(exp(l))`; overflow or total underflow is an error.
fn naive_partition(row: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_finite(row, "logits")?;
    let exps: Vec<f64> = row.iter().map(|l| l.exp()).collect();
    let z: f64 = exps.iter().sum();
    if !z.is_finite() {
        return Err(Error::numeric("partition sum overflowed"));
    }
    if z == 0.0 {
        return Err(Error::numeric("partition sum underflowed to zero"));
    }
    Ok((z, exps))
}

/// Per-sample `-log D(v)` and its logit gradient.
fn real_term(form: LossForm, row: &[f64]) -> Result<(f64, Vec<f64>)> {
    if row.is_empty() {
        return Err(Error::arg("empty logit row"));
    }
    match form {
        LossForm::Derived => {
            let s = lse(row)?;
            // -s + softplus(s) == softplus(-s); the latter keeps full precision
            let value = softplus_unchecked(-s);
            let w = -sigmoid(-s);
            Ok((value, softmax(row).into_iter().map(|p| w * p).collect()))
        }
        LossForm::Naive => {
            let (z, exps) = naive_partition(row)?;
            let value = (1.0 / z).ln_1p();
            let grad = exps.into_iter().map(|e| -(e / z) / (z + 1.0)).collect();
            Ok((value, grad))
        }
    }
}

/// Per-sample `-log(1 - D(v))` and its logit gradient.
fn fake_term(form: LossForm, row: &[f64]) -> Result<(f64, Vec<f64>)> {
    if row.is_empty() {
        return Err(Error::arg("empty logit row"));
    }
    match form {
        LossForm::Derived => {
            let s = lse(row)?;
            let w = sigmoid(s);
            Ok((softplus_unchecked(s), softmax(row).into_iter().map(|p| w * p).collect()))
        }
        LossForm::Naive => {
            let (z, exps) = naive_partition(row)?;
            let grad = exps.into_iter().map(|e| e / (z + 1.0)).collect();
            Ok((z.ln_1p(), grad))
        }
    }
}

fn mean_terms<L: AsRef<[f64]>>(
    rows: &[L],
    term: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<BatchGrad> {
    if rows.is_empty() {
        return Ok(BatchGrad {
            value: 0.0,
            grads: Vec::new(),
        });
    }
    let n = rows.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(rows.len());
    for row in rows {
        let (v, g) = term(row.as_ref())?;
        total += v;
        grads.push(g);
    }
    scale_rows(&mut grads, 1.0 / n);
    let value = total / n;
    if !value.is_finite() {
        return Err(Error::numeric("unsupervised loss is not finite"));
    }
    Ok(BatchGrad { value, grads })
}

/// Discriminator unsupervised loss. Either side may be empty (it then
/// contributes zero), but not both.
pub fn d_unsup_grad<R: AsRef<[f64]>, F: AsRef<[f64]>>(form: LossForm, real: &[R], fake: &[F]) -> Result<UnsupGrad> {
    if real.is_empty() && fake.is_empty() {
        return Err(Error::config("unsupervised loss needs a real or a fake sample"));
    }
    let r = mean_terms(real, |row| real_term(form, row))?;
    let f = mean_terms(fake, |row| fake_term(form, row))?;
    Ok(UnsupGrad {
        value: r.value + f.value,
        real: r.grads,
        fake: f.grads,
    })
}

pub fn d_unsup_derived<R: AsRef<[f64]>, F: AsRef<[f64]>>(real: &[R], fake: &[F]) -> Result<f64> {
    Ok(d_unsup_grad(LossForm::Derived, real, fake)?.value)
}

pub fn d_unsup_naive<R: AsRef<[f64]>, F: AsRef<[f64]>>(real: &[R], fake: &[F]) -> Result<f64> {
    Ok(d_unsup_grad(LossForm::Naive, real, fake)?.value)
}

/// Generator unsupervised loss, `-mean log D(v_fake)`.
pub fn g_unsup_grad<F: AsRef<[f64]>>(form: LossForm, fake: &[F]) -> Result<BatchGrad> {
    if fake.is_empty() {
        return Err(Error::config("generator loss needs at least one fake sample"));
    }
    mean_terms(fake, |row| real_term(form, row))
}

pub fn g_unsup_derived<F: AsRef<[f64]>>(fake: &[F]) -> Result<f64> {
    Ok(g_unsup_grad(LossForm::Derived, fake)?.value)
}

pub fn g_unsup_naive<F: AsRef<[f64]>>(fake: &[F]) -> Result<f64> {
    Ok(g_unsup_grad(LossForm::Naive, fake)?.value)
}

fn batch_mean<L: AsRef<[f64]>>(rows: &[L], width: usize) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; width];
    for row in rows {
        let row = row.as_ref();
        if row.len() != width {
            return Err(Error::arg(format!(
                "feature width {} differs from {width}",
                row.len()
            )));
        }
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Feature matching: MSE between batch-mean features. The returned gradient
/// applies to every fake row alike; the real side is treated as constant.
pub fn g_feature_match_grad<R: AsRef<[f64]>, F: AsRef<[f64]>>(real: &[R], fake: &[F]) -> Result<(f64, Vec<f64>)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::config("feature matching needs real and fake features"));
    }
    let width = real[0].as_ref().len();
    if width == 0 {
        return Err(Error::arg("empty feature rows"));
    }
    let mu_real = batch_mean(real, width)?;
    let mu_fake = batch_mean(fake, width)?;
    let h = width as f64;
    let n_fake = fake.len() as f64;
    let value = mu_real
        .iter()
        .zip(&mu_fake)
        .map(|(r, f)| (r - f).powi(2))
        .sum::<f64>()
        / h;
    let grad = mu_real
        .iter()
        .zip(&mu_fake)
        .map(|(r, f)| 2.0 * (f - r) / (h * n_fake))
        .collect();
    Ok((value, grad))
}

pub fn g_feature_match<R: AsRef<[f64]>, F: AsRef<[f64]>>(real: &[R], fake: &[F]) -> Result<f64> {
    Ok(g_feature_match_grad(real, fake)?.0)
}
