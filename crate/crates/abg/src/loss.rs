//! Classification, entropy, edge-supervision and composite objectives.

use std::rc::Rc;

use crate::error::{AbgError, Result};
use crate::graph::{frame_row, EdgeMap, Level};
use crate::nn::{Session, PROB_CLAMP};
use crate::tape::Var;

/// Indices of labeled target videos in the current mini-batch, with their
/// labels.
#[derive(Clone, Debug, Default)]
pub struct SemiMask {
    pub labeled: Vec<usize>,
    pub labels: Vec<usize>,
}

impl SemiMask {
    pub fn empty() -> Self {
        SemiMask::default()
    }

    pub fn unlabeled(&self, batch: usize) -> Vec<usize> {
        (0..batch).filter(|i| !self.labeled.contains(i)).collect()
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    for &l in labels {
        if l >= classes {
            return Err(AbgError::LabelOutOfRange { label: l, classes });
        }
    }
    Ok(())
}

fn check_simplex(sess: &Session, preds: Var) -> Result<()> {
    let p = sess.tape.value(preds);
    for r in 0..p.rows {
        let sum: f64 = p.row(r).iter().sum();
        if (sum - 1.0).abs() > 1e-6 || p.row(r).iter().any(|&v| v < 0.0) {
            return Err(AbgError::NotASimplex { sum });
        }
    }
    Ok(())
}

/// -(1/B) sum_i log p_i[y_i], probabilities clamped at 1e-7.
pub fn source_nll(sess: &mut Session, preds: Var, labels: &[usize]) -> Result<Var> {
    let p = sess.tape.value(preds);
    let (rows, cols) = (p.rows, p.cols);
    if labels.len() != rows {
        return Err(AbgError::ShapeMismatch(format!(
            "{} labels for {} prediction rows",
            labels.len(),
            rows
        )));
    }
    check_labels(labels, cols)?;
    let clamped = sess.tape.clamp(preds, PROB_CLAMP, 1.0);
    let picked = sess.tape.gather_row_col(clamped, Rc::new(labels.to_vec()));
    let logs = sess.tape.ln(picked);
    let total = sess.tape.sum(logs);
    Ok(sess.tape.scale(total, -1.0 / rows as f64))
}

/// -(1/B) sum_j sum_c p_jc log p_jc with 0*log 0 := 0 via clamping.
pub fn target_entropy(sess: &mut Session, preds: Var) -> Result<Var> {
    check_simplex(sess, preds)?;
    let rows = sess.tape.value(preds).rows;
    let clamped = sess.tape.clamp(preds, PROB_CLAMP, 1.0);
    let logs = sess.tape.ln(clamped);
    let prod = sess.tape.mul_elem(preds, logs);
    let total = sess.tape.sum(prod);
    Ok(sess.tape.scale(total, -1.0 / rows as f64))
}

/// Semi-supervised split of the classification objectives: the source
/// term gains the NLL over labeled target rows (each term averaged over
/// its own count); the entropy term runs over unlabeled rows only.
pub fn semi_losses(
    sess: &mut Session,
    preds_s: Var,
    labels_s: &[usize],
    preds_t: Var,
    mask: &SemiMask,
) -> Result<(Var, Var)> {
    let batch_t = sess.tape.value(preds_t).rows;
    let mut l_ys = source_nll(sess, preds_s, labels_s)?;
    if !mask.labeled.is_empty() {
        let rows = sess.tape.select_rows(preds_t, Rc::new(mask.labeled.clone()));
        let extra = source_nll(sess, rows, &mask.labels)?;
        l_ys = sess.tape.add(l_ys, extra);
    }
    let rest = mask.unlabeled(batch_t);
    let l_yt = if rest.is_empty() {
        sess.tape.scalar(0.0)
    } else {
        let rows = sess.tape.select_rows(preds_t, Rc::new(rest));
        target_entropy(sess, rows)?
    };
    Ok((l_ys, l_yt))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeLossForm {
    /// Mean binary cross-entropy over supervised pairs (the operative form).
    Bce,
    /// The literal delta-weighted sum of edge values, for fidelity runs.
    LiteralSum,
}

/// Supervision over the edge map restricted to pairs (source i, labeled
/// target j), expanded at frame level to the K aligned frame pairs.
pub fn edge_supervision(
    sess: &mut Session,
    edges: &EdgeMap,
    source_labels: &[usize],
    mask: &SemiMask,
    level: Level,
    k: usize,
    form: EdgeLossForm,
) -> Result<Var> {
    if edges.level != level {
        return Err(AbgError::LevelMismatch { expected: level.as_str(), got: edges.level.as_str() });
    }
    if mask.labeled.is_empty() {
        return Ok(sess.tape.scalar(0.0));
    }
    let mut entries = Vec::new();
    let mut deltas = Vec::new();
    for (i, &yi) in source_labels.iter().enumerate() {
        for (pos, &j) in mask.labeled.iter().enumerate() {
            let delta = if yi == mask.labels[pos] { 1.0 } else { 0.0 };
            match level {
                Level::Video => {
                    entries.push((i, j));
                    deltas.push(delta);
                }
                Level::Frame => {
                    for f in 0..k {
                        entries.push((frame_row(i, f, k), frame_row(j, f, k)));
                        deltas.push(delta);
                    }
                }
            }
        }
    }
    let n = entries.len() as f64;
    let picked = sess.tape.select_entries(edges.var, Rc::new(entries));
    match form {
        EdgeLossForm::LiteralSum => {
            let weighted = sess.tape.mul_mask(picked, Rc::new(deltas));
            Ok(sess.tape.sum(weighted))
        }
        EdgeLossForm::Bce => {
            let e = sess.tape.clamp(picked, PROB_CLAMP, 1.0 - PROB_CLAMP);
            let log_e = sess.tape.ln(e);
            let neg = sess.tape.scale(e, -1.0);
            let one_minus = sess.tape.add_scalar(neg, 1.0);
            let log_ne = sess.tape.ln(one_minus);
            let pos_part = sess.tape.mul_mask(log_e, Rc::new(deltas.clone()));
            let inv: Vec<f64> = deltas.iter().map(|d| 1.0 - d).collect();
            let neg_part = sess.tape.mul_mask(log_ne, Rc::new(inv));
            let both = sess.tape.add(pos_part, neg_part);
            let total = sess.tape.sum(both);
            Ok(sess.tape.scale(total, -1.0 / n))
        }
    }
}

/// Coefficients of the composite objective.
#[derive(Clone, Copy, Debug)]
pub struct LossCoeffs {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
}

/// L = L_y^s + gamma*L_y^t + lambda*(L_e^v + alpha*L_e^f).
pub fn composite_objective(
    sess: &mut Session,
    l_ys: Var,
    l_yt: Var,
    l_ef: Var,
    l_ev: Var,
    c: &LossCoeffs,
) -> Var {
    let gt = sess.tape.scale(l_yt, c.gamma);
    let ef = sess.tape.scale(l_ef, c.alpha);
    let edge = sess.tape.add(l_ev, ef);
    let ledge = sess.tape.scale(edge, c.lambda);
    let a = sess.tape.add(l_ys, gt);
    sess.tape.add(a, ledge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Mat;
    use crate::nn::{seeded_rng, Mode, ParameterStore};

    fn sess() -> Session {
        Session::new(&ParameterStore::default(), Mode::Eval, seeded_rng(0), true)
    }

    #[test]
    fn nll_of_perfect_predictions_is_near_zero() {
        let mut s = sess();
        let p = s.tape.leaf(Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let l = source_nll(&mut s, p, &[0, 1]).unwrap();
        assert!(s.tape.scalar_value(l).abs() < 1e-6);
    }

    #[test]
    fn nll_of_uniform_is_log_c() {
        let mut s = sess();
        let p = s.tape.leaf(Mat::from_vec(2, 4, vec![0.25; 8]));
        let l = source_nll(&mut s, p, &[3, 1]).unwrap();
        assert!((s.tape.scalar_value(l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_hand_oracle_batch_of_three() {
        let mut s = sess();
        let rows = [vec![0.7, 0.2, 0.1], vec![0.1, 0.6, 0.3], vec![0.25, 0.25, 0.5]];
        let p = s.tape.leaf(Mat::from_rows(&rows));
        let l = source_nll(&mut s, p, &[0, 2, 1]).unwrap();
        let expect = -(0.7f64.ln() + 0.3f64.ln() + 0.25f64.ln()) / 3.0;
        assert!((s.tape.scalar_value(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn nll_label_out_of_range() {
        let mut s = sess();
        let p = s.tape.leaf(Mat::from_vec(1, 2, vec![0.5, 0.5]));
        assert!(matches!(
            source_nll(&mut s, p, &[2]),
            Err(AbgError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn entropy_of_one_hot_is_zero() {
        let mut s = sess();
        let p = s.tape.leaf(Mat::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]));
        let l = target_entropy(&mut s, p).unwrap();
        assert!(s.tape.scalar_value(l).abs() < 1e-5);
    }

    #[test]
    fn entropy_of_uniform_is_log_c() {
        let mut s = sess();
        let p = s.tape.leaf(Mat::from_vec(2, 3, vec![1.0 / 3.0; 6]));
        let l = target_entropy(&mut s, p).unwrap();
        assert!((s.tape.scalar_value(l) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_hand_oracle() {
        let mut s = sess();
        let p = s.tape.leaf(Mat::from_rows(&[vec![0.5, 0.5], vec![0.9, 0.1]]));
        let l = target_entropy(&mut s, p).unwrap();
        let h1 = -(0.5f64 * 0.5f64.ln() + 0.5 * 0.5f64.ln());
        let h2 = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        let expect = (h1 + h2) / 2.0;
        assert!((s.tape.scalar_value(l) - expect).abs() < 1e-12);
        assert!((expect - 0.50912).abs() < 1e-5);
    }

    #[test]
    fn entropy_rejects_non_simplex() {
        let mut s = sess();
        let p = s.tape.leaf(Mat::from_vec(1, 2, vec![0.9, 0.3]));
        assert!(matches!(target_entropy(&mut s, p), Err(AbgError::NotASimplex { .. })));
    }

    #[test]
    fn semi_ratio_zero_reduces_to_plain_losses() {
        let mut s = sess();
        let ps = s.tape.leaf(Mat::from_rows(&[vec![0.7, 0.3], vec![0.4, 0.6]]));
        let pt = s.tape.leaf(Mat::from_rows(&[vec![0.5, 0.5], vec![0.8, 0.2]]));
        let (l_ys, l_yt) = semi_losses(&mut s, ps, &[0, 1], pt, &SemiMask::empty()).unwrap();
        let nll = source_nll(&mut s, ps, &[0, 1]).unwrap();
        let ent = target_entropy(&mut s, pt).unwrap();
        assert_eq!(s.tape.scalar_value(l_ys), s.tape.scalar_value(nll));
        assert_eq!(s.tape.scalar_value(l_yt), s.tape.scalar_value(ent));
    }

    #[test]
    fn semi_ratio_one_zeroes_entropy() {
        let mut s = sess();
        let ps = s.tape.leaf(Mat::from_rows(&[vec![0.7, 0.3]]));
        let pt = s.tape.leaf(Mat::from_rows(&[vec![0.5, 0.5], vec![0.8, 0.2]]));
        let mask = SemiMask { labeled: vec![0, 1], labels: vec![0, 1] };
        let (_, l_yt) = semi_losses(&mut s, ps, &[0], pt, &mask).unwrap();
        assert_eq!(s.tape.scalar_value(l_yt), 0.0);
    }

    #[test]
    fn semi_split_matches_hand_evaluation() {
        let mut s = sess();
        let ps = s.tape.leaf(Mat::from_rows(&[vec![0.6, 0.4]]));
        let pt = s.tape.leaf(Mat::from_rows(&[
            vec![0.5, 0.5],
            vec![0.2, 0.8],
            vec![0.9, 0.1],
            vec![0.3, 0.7],
        ]));
        let mask = SemiMask { labeled: vec![1, 3], labels: vec![1, 0] };
        let (l_ys, l_yt) = semi_losses(&mut s, ps, &[0], pt, &mask).unwrap();
        let expect_s = -(0.6f64.ln()) - (0.8f64.ln() + 0.3f64.ln()) / 2.0;
        let h0 = -(0.5f64 * 0.5f64.ln() * 2.0);
        let h2 = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        let expect_t = (h0 + h2) / 2.0;
        assert!((s.tape.scalar_value(l_ys) - expect_s).abs() < 1e-12);
        assert!((s.tape.scalar_value(l_yt) - expect_t).abs() < 1e-12);
    }

    #[test]
    fn edge_supervision_empty_mask_is_zero() {
        let mut s = sess();
        let e = s.tape.leaf(Mat::from_vec(2, 2, vec![0.5; 4]));
        let edges = EdgeMap { var: e, level: Level::Video };
        let l = edge_supervision(&mut s, &edges, &[0, 1], &SemiMask::empty(), Level::Video, 1, EdgeLossForm::Bce)
            .unwrap();
        assert_eq!(s.tape.scalar_value(l), 0.0);
    }

    #[test]
    fn edge_supervision_half_everywhere_is_log_two() {
        let mut s = sess();
        let e = s.tape.leaf(Mat::from_vec(2, 2, vec![0.5; 4]));
        let edges = EdgeMap { var: e, level: Level::Video };
        let mask = SemiMask { labeled: vec![0, 1], labels: vec![0, 1] };
        let l = edge_supervision(&mut s, &edges, &[0, 1], &mask, Level::Video, 1, EdgeLossForm::Bce).unwrap();
        assert!((s.tape.scalar_value(l) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn edge_supervision_hand_bce() {
        let mut s = sess();
        let e = s.tape.leaf(Mat::from_rows(&[vec![0.8, 0.3], vec![0.2, 0.7]]));
        let edges = EdgeMap { var: e, level: Level::Video };
        let mask = SemiMask { labeled: vec![0, 1], labels: vec![0, 1] };
        let l = edge_supervision(&mut s, &edges, &[0, 1], &mask, Level::Video, 1, EdgeLossForm::Bce).unwrap();
        let expect = -(0.8f64.ln() + 0.7f64.ln() + 0.7f64.ln() + 0.8f64.ln()) / 4.0;
        assert!((s.tape.scalar_value(l) - expect).abs() < 1e-12);
        assert!((expect - 0.28990).abs() < 1e-5);
    }

    #[test]
    fn edge_supervision_level_mismatch() {
        let mut s = sess();
        let e = s.tape.leaf(Mat::from_vec(1, 1, vec![0.5]));
        let edges = EdgeMap { var: e, level: Level::Frame };
        let mask = SemiMask { labeled: vec![0], labels: vec![0] };
        assert!(matches!(
            edge_supervision(&mut s, &edges, &[0], &mask, Level::Video, 1, EdgeLossForm::Bce),
            Err(AbgError::LevelMismatch { .. })
        ));
    }

    #[test]
    fn composite_is_the_stated_linear_combination() {
        let mut s = sess();
        let parts: Vec<Var> = [1.0, 0.5, 0.4, 0.2].iter().map(|&v| s.tape.scalar(v)).collect();
        let c = LossCoeffs { alpha: 0.1, gamma: 0.3, lambda: 1.0 };
        let l = composite_objective(&mut s, parts[0], parts[1], parts[2], parts[3], &c);
        assert!((s.tape.scalar_value(l) - 1.39).abs() < 1e-12);
    }

    #[test]
    fn composite_zero_coeffs_reduce_to_source_term() {
        let mut s = sess();
        let l_ys = s.tape.scalar(1.7);
        let z1 = s.tape.scalar(5.0);
        let z2 = s.tape.scalar(4.0);
        let z3 = s.tape.scalar(3.0);
        let c = LossCoeffs { alpha: 0.1, gamma: 0.0, lambda: 0.0 };
        let l = composite_objective(&mut s, l_ys, z1, z2, z3, &c);
        assert_eq!(s.tape.scalar_value(l), 1.7);
    }
}
