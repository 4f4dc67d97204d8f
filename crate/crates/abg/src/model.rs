//! The full cross-domain classifier: frame-level bipartite graph,
//! frame aggregation, optional video-level graph, softmax classifier,
//! and the conditional adversarial branch behind gradient reversal.

use crate::adversarial::{domain_adversarial_loss, one_hot, DomainDiscriminator, LabelEmbedder};
use crate::agg::Aggregator;
use crate::config::{TrainConfig, Variant};
use crate::error::{AbgError, Result};
use crate::graph::{graph_forward, EdgeMap, Level, VertexBatch};
use crate::mat::Mat;
use crate::nn::{seeded_rng, AffineBlock, Group, ParameterStore, Session};
use crate::tape::Var;

/// Everything the losses need from one paired forward pass.
pub struct ForwardOutput {
    pub rep_s: Var,
    pub rep_t: Var,
    pub preds_s: Var,
    pub preds_t: Var,
    pub frame_edges: Option<EdgeMap>,
    pub video_edges: Option<EdgeMap>,
    pub batch_s: usize,
    pub batch_t: usize,
}

pub struct Model {
    pub variant: Variant,
    pub no_graph: bool,
    pub k: usize,
    pub classes: usize,
    pub d_feat: usize,
    pub rounds: usize,
    frame_metric: Option<AffineBlock>,
    frame_updater: Option<AffineBlock>,
    aggregator: Aggregator,
    video_metric: Option<AffineBlock>,
    video_updater: Option<AffineBlock>,
    classifier: AffineBlock,
    embedder: LabelEmbedder,
    discriminator: DomainDiscriminator,
    d_rep: usize,
}

impl Model {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        // width of the per-frame vertexes entering aggregation, and of the
        // final representation the classifier and discriminator consume
        let agg_width = if cfg.no_graph { cfg.d_feat } else { cfg.d_frame };
        let use_video_graph = cfg.variant == Variant::Habg && !cfg.no_graph;
        let d_rep = if use_video_graph { cfg.d_video } else { agg_width };
        if cfg.rounds > 1 && !cfg.no_graph {
            if cfg.d_frame != cfg.d_feat {
                return Err(AbgError::ConfigError(
                    "rounds > 1 needs d_frame == d_feat (the updater is reused)".into(),
                ));
            }
            if use_video_graph && cfg.d_video != cfg.d_frame {
                return Err(AbgError::ConfigError(
                    "rounds > 1 needs d_video == d_frame (the updater is reused)".into(),
                ));
            }
        }
        let (frame_metric, frame_updater) = if cfg.no_graph {
            (None, None)
        } else {
            (
                Some(AffineBlock::new(Group::Fe, "fmet", cfg.d_feat, cfg.hidden, 1)),
                Some(
                    AffineBlock::new(Group::Fv, "fupd", 2 * cfg.d_feat, cfg.hidden, cfg.d_frame)
                        .with_dropout(cfg.dropout)
                        .with_batchnorm(cfg.batchnorm),
                ),
            )
        };
        let (video_metric, video_updater) = if use_video_graph {
            (
                Some(AffineBlock::new(Group::Ve, "vmet", agg_width, cfg.hidden, 1)),
                Some(
                    AffineBlock::new(Group::Vn, "vupd", 2 * agg_width, cfg.hidden, cfg.d_video)
                        .with_dropout(cfg.dropout)
                        .with_batchnorm(cfg.batchnorm),
                ),
            )
        } else {
            (None, None)
        };
        Ok(Model {
            variant: cfg.variant,
            no_graph: cfg.no_graph,
            k: cfg.k,
            classes: cfg.classes,
            d_feat: cfg.d_feat,
            rounds: cfg.rounds,
            frame_metric,
            frame_updater,
            aggregator: Aggregator::build(cfg.agg, agg_width, cfg.k, cfg.hidden, cfg.trn_cap),
            video_metric,
            video_updater,
            classifier: AffineBlock::new(Group::Y, "cls", d_rep, cfg.hidden, cfg.classes)
                .with_dropout(cfg.dropout)
                .with_batchnorm(cfg.batchnorm),
            embedder: LabelEmbedder::new(cfg.classes, d_rep),
            discriminator: DomainDiscriminator::new(d_rep, cfg.hidden, cfg.dropout, cfg.batchnorm),
            d_rep,
        })
    }

    pub fn d_rep(&self) -> usize {
        self.d_rep
    }

    pub fn init_store(&self, seed: u64) -> ParameterStore {
        let mut store = ParameterStore::default();
        let mut rng = seeded_rng(seed);
        if let Some(m) = &self.frame_metric {
            m.init(&mut store, &mut rng);
        }
        if let Some(u) = &self.frame_updater {
            u.init(&mut store, &mut rng);
        }
        self.aggregator.init(&mut store, &mut rng);
        if let Some(m) = &self.video_metric {
            m.init(&mut store, &mut rng);
        }
        if let Some(u) = &self.video_updater {
            u.init(&mut store, &mut rng);
        }
        self.classifier.init(&mut store, &mut rng);
        self.embedder.init(&mut store, &mut rng);
        self.discriminator.init(&mut store, &mut rng);
        store
    }

    fn batch_of(&self, m: &Mat, side: &str) -> Result<usize> {
        if m.cols != self.d_feat || m.rows == 0 || m.rows % self.k != 0 {
            return Err(AbgError::ShapeMismatch(format!(
                "{side} features are {}x{}, need a positive multiple of k={} rows and width {}",
                m.rows, m.cols, self.k, self.d_feat
            )));
        }
        Ok(m.rows / self.k)
    }

    /// Run both domains through graphs, aggregation and the classifier.
    pub fn forward(&self, sess: &mut Session, feats_s: &Mat, feats_t: &Mat) -> Result<ForwardOutput> {
        let batch_s = self.batch_of(feats_s, "source")?;
        let batch_t = self.batch_of(feats_t, "target")?;
        let xs = sess.tape.constant(feats_s.clone());
        let xt = sess.tape.constant(feats_t.clone());

        let (frames, frame_edges) = match (&self.frame_metric, &self.frame_updater) {
            (Some(metric), Some(updater)) => {
                let init = VertexBatch { source: xs, target: xt, level: Level::Frame };
                let (v, e) = graph_forward(sess, init, metric, updater, self.rounds)?;
                (v, Some(e))
            }
            _ => (VertexBatch { source: xs, target: xt, level: Level::Frame }, None),
        };

        let agg_s = self.aggregator.forward(sess, frames.source, batch_s, self.k)?;
        let agg_t = self.aggregator.forward(sess, frames.target, batch_t, self.k)?;

        let (rep, video_edges) = match (&self.video_metric, &self.video_updater) {
            (Some(metric), Some(updater)) => {
                let init = VertexBatch { source: agg_s, target: agg_t, level: Level::Video };
                let (v, e) = graph_forward(sess, init, metric, updater, self.rounds)?;
                (v, Some(e))
            }
            _ => (VertexBatch { source: agg_s, target: agg_t, level: Level::Video }, None),
        };

        let logits_s = self.classifier.forward(sess, rep.source)?;
        let logits_t = self.classifier.forward(sess, rep.target)?;
        let preds_s = sess.tape.softmax_rows(logits_s);
        let preds_t = sess.tape.softmax_rows(logits_t);
        Ok(ForwardOutput {
            rep_s: rep.source,
            rep_t: rep.target,
            preds_s,
            preds_t,
            frame_edges,
            video_edges,
            batch_s,
            batch_t,
        })
    }

    /// The discriminator branch. Returns the loss the discriminator
    /// descends (negated payoff) and the raw payoff value
    /// `L_d = E log D + E log(1 - D)`.
    ///
    /// Target predictions are detached before label embedding: the
    /// adversary conditions on them but never trains through them.
    /// `embed_override` freezes the target-side embedding input at given
    /// probabilities instead (used by finite-difference audits, which must
    /// hold the detached branch constant while a group is perturbed).
    pub fn adversarial_branch(
        &self,
        sess: &mut Session,
        out: &ForwardOutput,
        labels_s: &[usize],
        beta: f64,
        embed_override: Option<&Mat>,
    ) -> Result<(Var, Var)> {
        if labels_s.len() != out.batch_s {
            return Err(AbgError::ShapeMismatch(format!(
                "{} source labels for batch of {}",
                labels_s.len(),
                out.batch_s
            )));
        }
        let ys = sess.tape.constant(one_hot(labels_s, self.classes));
        let emb_s = self.embedder.forward(sess, ys)?;
        let pt = match embed_override {
            Some(p) => sess.tape.constant(p.clone()),
            None => sess.tape.detach(out.preds_t),
        };
        let emb_t = self.embedder.forward(sess, pt)?;
        let in_s = sess.tape.add(out.rep_s, emb_s);
        let in_t = sess.tape.add(out.rep_t, emb_t);
        let rev_s = sess.tape.grad_reverse(in_s, beta);
        let rev_t = sess.tape.grad_reverse(in_t, beta);
        let d_s = self.discriminator.forward(sess, rev_s)?;
        let d_t = self.discriminator.forward(sess, rev_t)?;
        let l_d = domain_adversarial_loss(sess, d_s, d_t)?;
        let l_disc = sess.tape.scale(l_d, -1.0);
        Ok((l_disc, l_d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.k = 3;
        cfg.d_feat = 6;
        cfg.d_frame = 4;
        cfg.d_video = 4;
        cfg.hidden = 5;
        cfg.classes = 3;
        cfg.dropout = 0.0;
        cfg
    }

    fn feats(batch: usize, k: usize, d: usize, seed: u64) -> Mat {
        crate::nn::normal_mat(&mut seeded_rng(seed), batch * k, d, 1.0)
    }

    #[test]
    fn forward_shapes_per_variant() {
        for (variant, no_graph, want_rep) in [
            (Variant::Abg, false, 4),
            (Variant::Habg, false, 4),
            (Variant::Abg, true, 6),
        ] {
            let mut cfg = tiny_cfg();
            cfg.variant = variant;
            cfg.no_graph = no_graph;
            let model = Model::new(&cfg).unwrap();
            assert_eq!(model.d_rep(), want_rep);
            let store = model.init_store(1);
            let mut sess = Session::new(&store, Mode::Eval, seeded_rng(0), true);
            let out = model
                .forward(&mut sess, &feats(4, 3, 6, 2), &feats(2, 3, 6, 3))
                .unwrap();
            let ps = sess.tape.value(out.preds_s);
            let pt = sess.tape.value(out.preds_t);
            assert_eq!((ps.rows, ps.cols), (4, 3));
            assert_eq!((pt.rows, pt.cols), (2, 3));
            assert_eq!(sess.tape.value(out.rep_t).cols, want_rep);
            assert_eq!(out.frame_edges.is_some(), !no_graph);
            assert_eq!(out.video_edges.is_some(), variant == Variant::Habg && !no_graph);
            if let Some(e) = out.frame_edges {
                let ev = sess.tape.value(e.var);
                assert_eq!((ev.rows, ev.cols), (12, 6));
            }
        }
    }

    #[test]
    fn predictions_are_row_simplices() {
        let cfg = tiny_cfg();
        let model = Model::new(&cfg).unwrap();
        let store = model.init_store(7);
        let mut sess = Session::new(&store, Mode::Eval, seeded_rng(0), true);
        let out = model.forward(&mut sess, &feats(3, 3, 6, 4), &feats(3, 3, 6, 5)).unwrap();
        for var in [out.preds_s, out.preds_t] {
            let p = sess.tape.value(var);
            for r in 0..p.rows {
                let sum: f64 = p.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(p.row(r).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn adversarial_branch_is_scalar_and_negated() {
        let cfg = tiny_cfg();
        let model = Model::new(&cfg).unwrap();
        let store = model.init_store(3);
        let mut sess = Session::new(&store, Mode::Eval, seeded_rng(0), true);
        let out = model.forward(&mut sess, &feats(2, 3, 6, 6), &feats(2, 3, 6, 7)).unwrap();
        let (l_disc, l_d) = model.adversarial_branch(&mut sess, &out, &[0, 2], 1.0, None).unwrap();
        let (a, b) = (sess.tape.scalar_value(l_disc), sess.tape.scalar_value(l_d));
        assert!((a + b).abs() < 1e-12);
        assert!(b < 0.0); // a log-likelihood of probabilities
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let cfg = tiny_cfg();
        let model = Model::new(&cfg).unwrap();
        let store = model.init_store(3);
        let mut sess = Session::new(&store, Mode::Eval, seeded_rng(0), true);
        assert!(model.forward(&mut sess, &feats(2, 3, 5, 1), &feats(2, 3, 6, 1)).is_err());
    }

    #[test]
    fn round_reuse_requires_matching_widths() {
        let mut cfg = tiny_cfg();
        cfg.rounds = 2;
        assert!(Model::new(&cfg).is_err());
        cfg.d_frame = cfg.d_feat;
        cfg.d_video = cfg.d_feat;
        assert!(Model::new(&cfg).is_ok());
    }
}
