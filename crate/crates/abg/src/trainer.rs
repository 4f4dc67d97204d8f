//! The training loop (per-group adversarial schedule via one backward
//! pass), per-video evaluation, and embedding extraction.

use std::collections::BTreeMap;

use crate::config::TrainConfig;
use crate::data::{mask_labels, steps_per_epoch, Cycler, Dataset};
use crate::error::{AbgError, Result};
use crate::graph::Level;
use crate::loss::{
    composite_objective, edge_supervision, semi_losses, EdgeLossForm, LossCoeffs, SemiMask,
};
use crate::mat::Mat;
use crate::model::Model;
use crate::nn::{apply_stat_updates, seeded_rng, Group, Mode, ParameterStore, Session};
use crate::optim::{lr_schedule, sgd_step, MOMENTUM, WEIGHT_DECAY};
use crate::parallel::par_map_indexed;

/// Loss terms of one optimization step, as scalars.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepLosses {
    pub l_ys: f64,
    pub l_yt: f64,
    pub l_ef: f64,
    pub l_ev: f64,
    pub l_d: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub losses: StepLosses,
    pub grad_norms: BTreeMap<Group, f64>,
}

impl StepReport {
    pub fn csv_header() -> String {
        let groups: Vec<String> =
            Group::ALL.iter().map(|g| format!("grad_{}", g.as_str())).collect();
        format!("epoch,step,lr,l_ys,l_yt,l_d,l_ef,l_ev,total,{}", groups.join(","))
    }

    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        let groups: Vec<String> = Group::ALL
            .iter()
            .map(|g| format!("{:.6e}", self.grad_norms.get(g).copied().unwrap_or(0.0)))
            .collect();
        format!(
            "{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{}",
            self.epoch,
            self.step,
            self.lr,
            l.l_ys,
            l.l_yt,
            l.l_d,
            l.l_ef,
            l.l_ev,
            l.total,
            groups.join(",")
        )
    }
}

fn edge_form(cfg: &TrainConfig) -> EdgeLossForm {
    if cfg.edge_loss_literal {
        EdgeLossForm::LiteralSum
    } else {
        EdgeLossForm::Bce
    }
}

/// All loss terms of one forward pass; shared by the optimization step
/// and the gradient audits.
pub fn step_objectives(
    model: &Model,
    sess: &mut Session,
    cfg: &TrainConfig,
    feats_s: &Mat,
    labels_s: &[usize],
    feats_t: &Mat,
    mask: &SemiMask,
    embed_override: Option<&Mat>,
) -> Result<(crate::model::ForwardOutput, crate::tape::Var, crate::tape::Var, StepLosses)> {
    let out = model.forward(sess, feats_s, feats_t)?;
    let (l_ys, l_yt) = semi_losses(sess, out.preds_s, labels_s, out.preds_t, mask)?;
    let l_ef = match &out.frame_edges {
        Some(e) => edge_supervision(sess, e, labels_s, mask, Level::Frame, cfg.k, edge_form(cfg))?,
        None => sess.tape.scalar(0.0),
    };
    let l_ev = match &out.video_edges {
        Some(e) => edge_supervision(sess, e, labels_s, mask, Level::Video, cfg.k, edge_form(cfg))?,
        None => sess.tape.scalar(0.0),
    };
    let coeffs = LossCoeffs { alpha: cfg.alpha, gamma: cfg.gamma, lambda: cfg.lambda };
    let l_task = composite_objective(sess, l_ys, l_yt, l_ef, l_ev, &coeffs);
    let (l_disc, l_d) =
        model.adversarial_branch(sess, &out, labels_s, cfg.beta, embed_override)?;
    let losses = StepLosses {
        l_ys: sess.tape.scalar_value(l_ys),
        l_yt: sess.tape.scalar_value(l_yt),
        l_ef: sess.tape.scalar_value(l_ef),
        l_ev: sess.tape.scalar_value(l_ev),
        l_d: sess.tape.scalar_value(l_d),
        total: sess.tape.scalar_value(l_task),
    };
    Ok((out, l_task, l_disc, losses))
}

/// One optimization step. A single backward pass over
/// `l_task + l_disc` realizes the whole per-group schedule: the
/// discriminator sees the plain discrimination gradient, while gradient
/// reversal hands every upstream group the `-beta`-scaled adversarial
/// component on top of its task gradient.
pub fn train_step(
    model: &Model,
    store: &mut ParameterStore,
    cfg: &TrainConfig,
    feats_s: &Mat,
    labels_s: &[usize],
    feats_t: &Mat,
    mask: &SemiMask,
    lr: f64,
    step_seed: u64,
) -> Result<StepLosses> {
    let mut sess = Session::new(store, Mode::Train, seeded_rng(step_seed), cfg.batchnorm);
    let (_, l_task, l_disc, losses) =
        step_objectives(model, &mut sess, cfg, feats_s, labels_s, feats_t, mask, None)?;
    let total = sess.tape.add(l_task, l_disc);
    let tv = sess.tape.scalar_value(total);
    if !tv.is_finite() {
        return Err(AbgError::NonFiniteLoss(format!("step objective = {tv}")));
    }
    sess.tape.backward(total)?;
    let grads = sess.collect_grads();
    sgd_step(store, &grads, &Group::ALL, lr, MOMENTUM, WEIGHT_DECAY)?;
    apply_stat_updates(store, &sess);
    Ok(losses)
}

fn grad_norms(grads: &BTreeMap<crate::nn::ParamKey, Mat>) -> BTreeMap<Group, f64> {
    let mut out = BTreeMap::new();
    for (key, g) in grads {
        let sq: f64 = g.data.iter().map(|v| v * v).sum();
        *out.entry(key.0).or_insert(0.0) += sq;
    }
    out.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
}

/// Full training driver. `on_step` receives one report per optimization
/// step, in order.
pub fn train(
    model: &Model,
    store: &mut ParameterStore,
    cfg: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    mut on_step: impl FnMut(&StepReport),
) -> Result<()> {
    source.validate()?;
    target.validate()?;
    if source.d != model.d_feat || target.d != model.d_feat {
        return Err(AbgError::DimMismatch(format!(
            "model expects width {}, datasets have {} and {}",
            model.d_feat, source.d, target.d
        )));
    }
    let labeled = mask_labels(target.len(), cfg.semi_ratio, cfg.seed);
    let mut cyc_s = Cycler::new(source.len(), cfg.batch_source, cfg.seed.wrapping_add(101))?;
    let mut cyc_t = Cycler::new(target.len(), cfg.batch_target, cfg.seed.wrapping_add(202))?;
    let steps = steps_per_epoch(source.len(), cfg.batch_source, target.len(), cfg.batch_target);
    let total_steps = (cfg.epochs * steps).max(1);
    for epoch in 0..cfg.epochs {
        for step in 0..steps {
            let global = epoch * steps + step;
            let lr = lr_schedule(global as f64 / total_steps as f64, cfg.lr0);
            let idx_s = cyc_s.next_batch();
            let idx_t = cyc_t.next_batch();
            let (feats_s, labels_s) = source.gather(&idx_s);
            let (feats_t, labels_t) = target.gather(&idx_t);
            // positions in this batch whose video is in the labeled subset
            let mut mask = SemiMask::empty();
            for (pos, &v) in idx_t.iter().enumerate() {
                if labeled.binary_search(&v).is_ok() {
                    mask.labeled.push(pos);
                    mask.labels.push(labels_t[pos]);
                }
            }
            let step_seed = cfg.seed.wrapping_add(0x9e37_79b9).wrapping_add(global as u64);
            // collect gradients inside train_step; re-derive norms here
            let mut sess = Session::new(store, Mode::Train, seeded_rng(step_seed), cfg.batchnorm);
            let (_, l_task, l_disc, losses) = step_objectives(
                model, &mut sess, cfg, &feats_s, &labels_s, &feats_t, &mask, None,
            )?;
            let total = sess.tape.add(l_task, l_disc);
            let tv = sess.tape.scalar_value(total);
            if !tv.is_finite() {
                return Err(AbgError::NonFiniteLoss(format!(
                    "epoch {epoch} step {step}: objective = {tv}"
                )));
            }
            sess.tape.backward(total)?;
            let grads = sess.collect_grads();
            let norms = grad_norms(&grads);
            sgd_step(store, &grads, &Group::ALL, lr, MOMENTUM, WEIGHT_DECAY)?;
            apply_stat_updates(store, &sess);
            on_step(&StepReport { epoch, step, lr, losses, grad_norms: norms });
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Seeded source companion batch used for every evaluation forward.
fn companion_videos(cfg: &TrainConfig, n_source: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n_source).collect();
    idx.shuffle(&mut seeded_rng(cfg.seed.wrapping_add(7777)));
    idx.truncate(cfg.batch_source.min(n_source));
    idx.sort_unstable();
    idx
}

fn predict_one(
    model: &Model,
    store: &ParameterStore,
    cfg: &TrainConfig,
    companions: &Mat,
    video: &Mat,
) -> Result<usize> {
    let mut sess = Session::new(store, Mode::Eval, seeded_rng(0), cfg.batchnorm);
    let out = model.forward(&mut sess, companions, video)?;
    let p = sess.tape.value(out.preds_t);
    if !p.all_finite() {
        return Err(AbgError::NonFiniteEvaluation("target prediction".into()));
    }
    let row = p.row(0);
    let mut best = 0;
    for c in 1..row.len() {
        if row[c] > row[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Classify every target video independently against one fixed seeded
/// source companion batch. Scores are therefore invariant to how the
/// target set might be partitioned into batches, and videos can be
/// evaluated in parallel.
pub fn evaluate(
    model: &Model,
    store: &ParameterStore,
    cfg: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
) -> Result<EvalReport> {
    source.validate()?;
    target.validate()?;
    let comp_idx = companion_videos(cfg, source.len());
    let (companions, _) = source.gather(&comp_idx);
    let results: Vec<Result<usize>> = par_map_indexed(target.len(), |v| {
        let (video, _) = target.gather(&[v]);
        predict_one(model, store, cfg, &companions, &video)
    });
    let mut confusion = vec![vec![0usize; target.classes]; target.classes];
    let mut predictions = Vec::with_capacity(target.len());
    let mut correct = 0;
    for (v, r) in results.into_iter().enumerate() {
        let pred = r?;
        predictions.push(pred);
        confusion[target.labels[v]][pred] += 1;
        if pred == target.labels[v] {
            correct += 1;
        }
    }
    Ok(EvalReport { correct, total: target.len(), confusion, predictions })
}

/// Final representations (one row per video) for both domains, computed
/// the same way evaluation computes them.
pub fn dump_embeddings(
    model: &Model,
    store: &ParameterStore,
    cfg: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
) -> Result<(Mat, Mat)> {
    source.validate()?;
    target.validate()?;
    let comp_idx = companion_videos(cfg, source.len());
    let (companions, _) = source.gather(&comp_idx);
    let d_rep = model.d_rep();
    let embed_side = |ds: &Dataset, take_target: bool| -> Result<Mat> {
        let rows: Vec<Result<Vec<f64>>> = par_map_indexed(ds.len(), |v| {
            let (video, _) = ds.gather(&[v]);
            let mut sess = Session::new(store, Mode::Eval, seeded_rng(0), cfg.batchnorm);
            // every video is embedded through the target slot so both
            // domains receive identical treatment against the companions
            let out = model.forward(&mut sess, &companions, &video)?;
            let _ = take_target;
            Ok(sess.tape.value(out.rep_t).row(0).to_vec())
        });
        let mut m = Mat::zeros(ds.len(), d_rep);
        for (v, r) in rows.into_iter().enumerate() {
            m.row_mut(v).copy_from_slice(&r?);
        }
        Ok(m)
    };
    Ok((embed_side(source, false)?, embed_side(target, true)?))
}
