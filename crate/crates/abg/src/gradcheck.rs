//! Central finite differences, the independent oracle for every
//! differentiable path in the crate, and the per-group audit of the
//! adversarial training schedule.

use crate::config::TrainConfig;
use crate::error::{AbgError, Result};
use crate::loss::SemiMask;
use crate::mat::Mat;
use crate::model::Model;
use crate::nn::{seeded_rng, Group, Mode, Session};
use crate::trainer::step_objectives;

pub const FD_STEP: f64 = 1e-5;

/// Central-difference estimate (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    assert!(h > 0.0);
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe)?;
        probe[i] = x[i] - h;
        let fm = f(&probe)?;
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(AbgError::NonFiniteEvaluation(format!(
                "f(x +/- h) at coordinate {i}: {fp}, {fm}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest relative error between an analytic gradient and its
/// finite-difference estimate, with an absolute floor for near-zero entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            // Near-zero entries are compared absolutely: subtractive
            // roundoff in f(x+h) - f(x-h) is ~1e-11 for O(1) losses, which
            // would swamp a relative comparison against a ~1e-6 gradient.
            let denom = a.abs().max(n.abs()).max(1e-5);
            (a - n).abs() / denom
        })
        .fold(0.0, f64::max)
}

/// Worst relative error per parameter group between the analytic
/// gradients of one combined backward pass and central finite
/// differences of that group's effective objective:
/// `l_task - beta * l_disc` for every group upstream of the gradient
/// reversal, `l_disc` for the discriminator itself.
///
/// The detached target-prediction branch is frozen at its base value for
/// the numeric side (differencing cannot express a stop-gradient), and
/// stochastic layers must be off: dropout zero, batch statistics frozen.
pub fn audit_groups(
    cfg: &TrainConfig,
    feats_s: &Mat,
    labels_s: &[usize],
    feats_t: &Mat,
    mask: &SemiMask,
) -> Result<Vec<(Group, f64)>> {
    if cfg.dropout != 0.0 {
        return Err(AbgError::ConfigError("gradient audit requires dropout = 0".into()));
    }
    let model = Model::new(cfg)?;
    let store = model.init_store(cfg.seed);

    // analytic pass: one backward of l_task + l_disc with the detach in place
    let mut sess = Session::new(&store, Mode::Train, seeded_rng(0), false);
    let (out, l_task, l_disc, _) =
        step_objectives(&model, &mut sess, cfg, feats_s, labels_s, feats_t, mask, None)?;
    let base_pt = sess.tape.value(out.preds_t).clone();
    let total = sess.tape.add(l_task, l_disc);
    sess.tape.backward(total)?;
    let grads = sess.collect_grads();

    let beta = cfg.beta;
    let mut report = Vec::new();
    for group in Group::ALL {
        let keys = store.group_keys(group);
        if keys.is_empty() {
            continue;
        }
        let mut analytic = Vec::new();
        for k in &keys {
            analytic.extend_from_slice(&grads[k].data);
        }
        let base_flat = store.flatten_group(group);
        let mut probe_store = store.clone();
        let f = |x: &[f64]| -> Result<f64> {
            probe_store.unflatten_group(group, x);
            let mut s = Session::new(&probe_store, Mode::Train, seeded_rng(0), false);
            let (_, l_task, l_disc, v) = step_objectives(
                &model, &mut s, cfg, feats_s, labels_s, feats_t, mask, Some(&base_pt),
            )?;
            let _ = (l_task, l_disc);
            Ok(if group == Group::D { -v.l_d } else { v.total + beta * v.l_d })
        };
        let numeric = finite_difference_gradient(f, &base_flat, FD_STEP)?;
        report.push((group, max_relative_error(&analytic, &numeric)));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_difference_gradient(|x| Ok(x[0] * x[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function() {
        let g = finite_difference_gradient(|_| Ok(42.0), &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_evaluation_is_error() {
        let r = finite_difference_gradient(|x| Ok(x[0].ln()), &[0.0], 1e-5);
        assert!(matches!(r, Err(AbgError::NonFiniteEvaluation(_))));
    }
}
