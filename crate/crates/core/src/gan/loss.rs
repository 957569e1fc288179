//! Adversarial, cycle-consistency and identity losses.

use polypforge_nn::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::nets::CycleNets;
use super::{GanError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialLoss {
    /// `mean (D − 1)²` for real, `mean D²` for fake.
    #[default]
    LeastSquares,
    /// Binary cross-entropy on logits.
    Bce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Real,
    Fake,
}

impl Target {
    fn value(self) -> f64 {
        match self {
            Target::Real => 1.0,
            Target::Fake => 0.0,
        }
    }
}

/// Adversarial loss of raw discriminator outputs.
pub fn adversarial_loss(outputs: &[f64], target: Target, form: AdversarialLoss) -> Result<f64> {
    if outputs.is_empty() {
        return Err(GanError::ShapeMismatch("no discriminator outputs".into()));
    }
    if outputs.iter().any(|v| !v.is_finite()) {
        return Err(GanError::NonFiniteInput("discriminator outputs"));
    }
    let t = target.value();
    let total: f64 = match form {
        AdversarialLoss::LeastSquares => outputs.iter().map(|d| (d - t) * (d - t)).sum(),
        AdversarialLoss::Bce => outputs.iter().map(|&z| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()).sum(),
    };
    Ok(total / outputs.len() as f64)
}

/// [`adversarial_loss`] as a differentiable graph node.
pub fn adversarial_term<T: Scalar>(g: &mut Graph<'_, T>, d_out: Var, target: Target, form: AdversarialLoss) -> Var {
    match form {
        AdversarialLoss::LeastSquares => {
            let shifted = g.add_scalar(d_out, -target.value());
            let sq = g.square(shifted);
            g.mean(sq)
        }
        AdversarialLoss::Bce => g.bce_with_logits(d_out, target.value()),
    }
}

/// Mean absolute difference.
pub fn l1_term<T: Scalar>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// An image-to-image mapping on `[N, 3, H, W]` tensors in `[-1, 1]`.
pub trait ImageMap {
    fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

pub struct IdentityMap;

impl ImageMap for IdentityMap {
    fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(x.clone())
    }
}

/// Mean L1 distance between `x` and `backward(forward(x))`.
pub fn cycle_consistency_loss(x: &Tensor<f32>, forward: &dyn ImageMap, backward: &dyn ImageMap) -> Result<f64> {
    let rec = backward.apply(&forward.apply(x)?)?;
    if rec.shape() != x.shape() {
        return Err(GanError::ShapeMismatch(format!("reconstruction {:?} vs input {:?}", rec.shape(), x.shape())));
    }
    let total: f64 = x.data().iter().zip(rec.data()).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
    Ok(total / x.numel() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub form: AdversarialLoss,
    pub lambda_cyc: f64,
    pub lambda_id: f64,
}

/// Nodes of one generator objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorObjective {
    pub total: Var,
    /// Adversarial loss of `G` against `D_Y`.
    pub adv_g: Var,
    /// Adversarial loss of `F` against `D_X`.
    pub adv_f: Var,
    /// Sum of both reconstruction L1 terms.
    pub cycle: Var,
    /// Sum of both identity L1 terms.
    pub identity: Var,
    pub fake_x: Var,
    pub fake_y: Var,
}

/// `adv_G + adv_F + λ_cyc·cycle + λ_id·identity` for source batch `x` and
/// target batch `y`.
pub fn generator_objective<T: Scalar>(
    g: &mut Graph<'_, T>,
    nets: &CycleNets,
    x: Var,
    y: Var,
    w: LossWeights,
) -> Result<GeneratorObjective> {
    let fake_y = nets.g.forward(g, x)?;
    let rec_x = nets.f.forward(g, fake_y)?;
    let fake_x = nets.f.forward(g, y)?;
    let rec_y = nets.g.forward(g, fake_x)?;

    let dy_fake = nets.dy.forward(g, fake_y)?;
    let adv_g = adversarial_term(g, dy_fake, Target::Real, w.form);
    let dx_fake = nets.dx.forward(g, fake_x)?;
    let adv_f = adversarial_term(g, dx_fake, Target::Real, w.form);

    let cx = l1_term(g, rec_x, x)?;
    let cy = l1_term(g, rec_y, y)?;
    let cycle = g.add(cx, cy)?;

    let mut total = g.add(adv_g, adv_f)?;
    let weighted = g.scale(cycle, w.lambda_cyc);
    total = g.add(total, weighted)?;

    let identity = if w.lambda_id > 0.0 {
        let idt_y = nets.g.forward(g, y)?;
        let idt_x = nets.f.forward(g, x)?;
        let iy = l1_term(g, idt_y, y)?;
        let ix = l1_term(g, idt_x, x)?;
        let identity = g.add(iy, ix)?;
        let weighted = g.scale(identity, w.lambda_id);
        total = g.add(total, weighted)?;
        identity
    } else {
        g.input(Tensor::scalar(T::zero()))
    };
    Ok(GeneratorObjective { total, adv_g, adv_f, cycle, identity, fake_x, fake_y })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_squares_examples() {
        let ls = AdversarialLoss::LeastSquares;
        assert_eq!(adversarial_loss(&[1.0, 1.0], Target::Real, ls).unwrap(), 0.0);
        assert_eq!(adversarial_loss(&[0.0, 0.0], Target::Fake, ls).unwrap(), 0.0);
        assert_eq!(adversarial_loss(&[0.5, 0.5], Target::Real, ls).unwrap(), 0.25);
        assert!(adversarial_loss(&[f64::NAN], Target::Real, ls).is_err());
    }
}
