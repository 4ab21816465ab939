//! Central-finite-difference verification of tape gradients.
//!
//! The checker perturbs every coordinate of every trainable parameter,
//! re-evaluates the loss, and compares `(f(θ+h) - f(θ-h)) / 2h` against the
//! reverse-mode gradient. It also enforces two structural properties:
//! the loss must be bitwise deterministic (two evaluations at the same θ
//! return identical bits), and frozen parameters must have no gradient
//! entry at all.
//!
//! Errors aggregate per parameter tensor: for each parameter the report
//! carries `‖g_ad - g_fd‖₂ / max(‖g_fd‖₂, 1e-8)` and the maximum over
//! parameters. Central differences at 64-bit bottom out near 1e-11 absolute
//! (roundoff of an O(1) loss against the optimal step), so a lone coordinate
//! whose true derivative is tiny — attention key biases are exactly such a
//! case, since softmax cancels any row-constant score shift — would swamp a
//! coordinate-wise quotient without indicating a wrong backward rule. The
//! tensor norm keeps the comparison meaningful at any healthy scale while
//! still exposing real formula errors, which perturb entire tensors.

use alloc::format;
use alloc::string::String;

use crate::tape::{GradientTable, ParamSet};
use crate::{Error, Result};

/// Default central-difference half-step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// The coordinate with the largest absolute analytic/numeric gap.
#[derive(Debug, Clone)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Coordinates compared (every trainable scalar).
    pub checked: usize,
    /// Largest `‖g_ad - g_fd‖₂ / max(‖g_fd‖₂, 1e-8)` over parameter tensors.
    pub max_err: f64,
    pub worst: Option<WorstCoordinate>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_err < tolerance
    }
}

/// Verifies `grads` against central finite differences of `loss` at every
/// trainable coordinate.
///
/// `loss` must recompute the objective from the current parameter values;
/// it is called `2 * checked + 2` times. Parameters are restored bit-exactly
/// after each probe.
pub fn finite_diff_check<F>(
    params: &mut ParamSet,
    grads: &GradientTable,
    mut loss: F,
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let h = step;
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Plan(format!(
            "finite-difference step {h:e} outside [1e-7, 1e-3]"
        )));
    }

    let base_a = loss(params)?;
    let base_b = loss(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::Determinism(format!(
            "loss is not bitwise repeatable: {base_a:?} vs {base_b:?}"
        )));
    }
    if !base_a.is_finite() {
        return Err(Error::Numeric(format!("loss at the base point is {base_a}")));
    }

    for (id, entry) in params.iter() {
        if !entry.trainable && grads.param(id).is_some() {
            return Err(Error::FrozenGradient(format!(
                "frozen parameter {} has a gradient entry",
                entry.name
            )));
        }
        if entry.trainable && grads.param(id).is_none() {
            return Err(Error::Plan(format!(
                "trainable parameter {} received no gradient",
                entry.name
            )));
        }
    }

    let targets: alloc::vec::Vec<(crate::tape::ParamId, String, usize)> = params
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(id, e)| (id, e.name.clone(), e.data.len()))
        .collect();

    let mut checked = 0;
    let mut max_err = 0.0_f64;
    let mut worst = None;
    let mut worst_gap = -1.0_f64;
    for (id, name, len) in targets {
        let mut gap_sq = 0.0_f64;
        let mut fd_sq = 0.0_f64;
        for i in 0..len {
            let original = params.data_mut(id)[i];
            params.data_mut(id)[i] = original + h;
            let plus = loss(params);
            params.data_mut(id)[i] = original - h;
            let minus = loss(params);
            params.data_mut(id)[i] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is not finite while probing {name}[{i}]"
                )));
            }
            let fd = (plus - minus) / (2.0 * h);
            let ad = grads.param(id).map(|g| g.data()[i]).unwrap_or(0.0);
            gap_sq += (ad - fd) * (ad - fd);
            fd_sq += fd * fd;
            checked += 1;
            if (ad - fd).abs() > worst_gap {
                worst_gap = (ad - fd).abs();
                worst = Some(WorstCoordinate {
                    param: name.clone(),
                    index: i,
                    analytic: ad,
                    numeric: fd,
                });
            }
        }
        let err = libm::sqrt(gap_sq) / libm::sqrt(fd_sq).max(1e-8);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(GradCheckReport { checked, max_err, worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{Stage, TapeBuilder, TapeMode};
    use crate::tensor::Tensor;
    use alloc::vec;
    use alloc::vec::Vec;

    fn quadratic_setup() -> (ParamSet, GradientTable) {
        let mut params = ParamSet::new();
        let w = params.add("w", &[3], vec![0.5, -1.25, 2.0], Stage::Head).unwrap();
        params.set_trainable(w, true);
        let mut grads = GradientTable::default();
        // loss = sum((w - c)^2) with c = [1, 2, 3]  =>  d/dw = 2 (w - c).
        let c = [1.0, 2.0, 3.0];
        let g: Vec<f64> =
            params.iter().next().unwrap().1.data.iter().zip(c).map(|(w, c)| 2.0 * (w - c)).collect();
        grads.insert_param(w, Tensor::new(&[3], g).unwrap());
        (params, grads)
    }

    fn quadratic_loss(p: &ParamSet) -> crate::Result<f64> {
        let id = p.find("w").unwrap();
        let c = [1.0, 2.0, 3.0];
        Ok(p.iter()
            .find(|(i, _)| *i == id)
            .unwrap()
            .1
            .data
            .iter()
            .zip(c)
            .map(|(w, c)| (w - c) * (w - c))
            .sum())
    }

    #[test]
    fn quadratic_gradient_verifies_to_machine_precision() {
        let (mut params, grads) = quadratic_setup();
        let report =
            finite_diff_check(&mut params, &grads, quadratic_loss, DEFAULT_STEP)
                .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_err < 1e-9, "max_err = {}", report.max_err);
        // Probing leaves the parameters bit-identical.
        assert_eq!(params.iter().next().unwrap().1.data, vec![0.5, -1.25, 2.0]);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let (mut params, mut grads) = quadratic_setup();
        let id = params.find("w").unwrap();
        let mut g = grads.param(id).unwrap().clone();
        g.data_mut()[1] += 0.05;
        grads.insert_param(id, g);
        let report =
            finite_diff_check(&mut params, &grads, quadratic_loss, DEFAULT_STEP)
                .unwrap();
        assert!(report.max_err > 5e-3, "max_err = {}", report.max_err);
        assert_eq!(report.worst.as_ref().unwrap().index, 1);
    }

    #[test]
    fn frozen_parameter_with_gradient_is_rejected() {
        let (mut params, mut grads) = quadratic_setup();
        let frozen = params.add("frozen", &[2], vec![1.0, 1.0], Stage::Head).unwrap();
        grads.insert_param(frozen, Tensor::zeros(&[2]));
        let err =
            finite_diff_check(&mut params, &grads, quadratic_loss, DEFAULT_STEP)
                .unwrap_err();
        assert!(matches!(err, Error::FrozenGradient(_)));
    }

    #[test]
    fn trainable_parameter_without_gradient_is_rejected() {
        let (mut params, _) = quadratic_setup();
        let err = finite_diff_check(
            &mut params,
            &GradientTable::default(),
            quadratic_loss,
            DEFAULT_STEP,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Plan(_)));
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        let (mut params, grads) = quadratic_setup();
        let mut calls = 0_u32;
        let err = finite_diff_check(
            &mut params,
            &grads,
            |p| {
                calls += 1;
                quadratic_loss(p).map(|l| l + f64::from(calls) * 1e-12)
            },
            DEFAULT_STEP,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Determinism(_)));
    }

    #[test]
    fn step_outside_the_safe_window_is_rejected() {
        let (mut params, grads) = quadratic_setup();
        for step in [1e-8, 1e-2] {
            let err =
                finite_diff_check(&mut params, &grads, quadratic_loss, step).unwrap_err();
            assert!(matches!(err, Error::Plan(_)));
        }
    }

    #[test]
    fn tape_built_loss_with_gelu_and_softmax_verifies() {
        let mut params = ParamSet::new();
        let w = params
            .add("w", &[3, 2], vec![0.3, -0.7, 1.1, 0.4, -0.2, 0.9], Stage::Head)
            .unwrap();
        let b = params.add("b", &[2], vec![0.05, -0.15], Stage::Head).unwrap();
        params.set_trainable(w, true);
        params.set_trainable(b, true);
        let x = Tensor::new(&[2, 3], vec![0.2, -0.4, 0.6, 1.0, 0.1, -0.3]).unwrap();
        let coef = Tensor::new(&[2, 2], vec![0.7, -0.3, 0.2, 0.8]).unwrap();

        let run = |p: &ParamSet| -> crate::Result<(f64, GradientTable)> {
            let mut tb = TapeBuilder::new(p, TapeMode::Training, 0);
            tb.set_stage(Stage::Head);
            let xin = tb.input(&x)?;
            let lin = tb.matmul(xin, p.find("w").unwrap())?;
            let biased = tb.add_bias(lin, p.find("b").unwrap())?;
            let act = tb.gelu(biased)?;
            let probs = tb.softmax_rows(act)?;
            let out = tb.tensor(probs);
            let loss = out.data().iter().zip(coef.data()).map(|(p, c)| p * c).sum();
            let grads = tb.finish().backward(p, probs, &coef, &[])?;
            Ok((loss, grads))
        };

        let (_, grads) = run(&params).unwrap();
        let report = finite_diff_check(
            &mut params,
            &grads,
            |p| run(p).map(|(l, _)| l),
            DEFAULT_STEP,
        )
        .unwrap();
        assert_eq!(report.checked, 8);
        assert!(report.max_err < 1e-9, "max_err = {}", report.max_err);
    }
}
