//! Conditional adversarial head: label embedding, domain discriminator,
//! and the adversarial value function routed through gradient reversal.

use crate::error::{AbgError, Result};
use crate::mat::Mat;
use crate::nn::{AffineBlock, Group, Linear, ParameterStore, Session, PROB_CLAMP};
use crate::tape::Var;
use rand_chacha::ChaCha8Rng;

/// Affine map from class probability (or one-hot) vectors to the video
/// representation width, so that n + y_tilde is well formed.
#[derive(Clone, Debug)]
pub struct LabelEmbedder {
    pub linear: Linear,
}

impl LabelEmbedder {
    pub fn new(classes: usize, d_rep: usize) -> Self {
        LabelEmbedder { linear: Linear::new(Group::L, "emb", classes, d_rep) }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        self.linear.init(store, rng);
    }

    /// Embed rows that must lie on the probability simplex (one-hot rows
    /// are the degenerate case).
    pub fn forward(&self, sess: &mut Session, probs: Var) -> Result<Var> {
        let p = sess.tape.value(probs);
        for r in 0..p.rows {
            let sum: f64 = p.row(r).iter().sum();
            if (sum - 1.0).abs() > 1e-6 || p.row(r).iter().any(|&v| v < 0.0) {
                return Err(AbgError::NotASimplex { sum });
            }
        }
        self.linear.forward(sess, probs)
    }
}

/// Two affine blocks ending in a sigmoid, mapping representations to a
/// source-vs-target probability.
#[derive(Clone, Debug)]
pub struct DomainDiscriminator {
    pub blk1: AffineBlock,
    pub blk2: AffineBlock,
}

impl DomainDiscriminator {
    pub fn new(d_rep: usize, hidden: usize, dropout: f64, batchnorm: bool) -> Self {
        DomainDiscriminator {
            blk1: AffineBlock::new(Group::D, "disc1", d_rep, hidden, hidden)
                .with_dropout(dropout)
                .with_batchnorm(batchnorm),
            blk2: AffineBlock::new(Group::D, "disc2", hidden, hidden, 1)
                .with_dropout(dropout)
                .with_batchnorm(batchnorm),
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        self.blk1.init(store, rng);
        self.blk2.init(store, rng);
    }

    /// Probability of the source domain, clamped into (0, 1).
    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let h = self.blk1.forward(sess, x)?;
        let s = self.blk2.forward(sess, h)?;
        let p = sess.tape.sigmoid(s);
        Ok(sess.tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP))
    }
}

/// The adversarial value function
/// L_d = mean log D(s-side) + mean log(1 - D(t-side)).
pub fn domain_adversarial_loss(sess: &mut Session, d_source: Var, d_target: Var) -> Result<Var> {
    let (ds, dt) = (sess.tape.value(d_source), sess.tape.value(d_target));
    if ds.cols != 1 || dt.cols != 1 {
        return Err(AbgError::ShapeMismatch(format!(
            "discriminator outputs must be column vectors, got widths {} and {}",
            ds.cols, dt.cols
        )));
    }
    let (ns, nt) = (ds.rows as f64, dt.rows as f64);
    let cs = sess.tape.clamp(d_source, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_s = sess.tape.ln(cs);
    let sum_s = sess.tape.sum(log_s);
    let mean_s = sess.tape.scale(sum_s, 1.0 / ns);
    let ct = sess.tape.clamp(d_target, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let neg = sess.tape.scale(ct, -1.0);
    let one_minus = sess.tape.add_scalar(neg, 1.0);
    let log_t = sess.tape.ln(one_minus);
    let sum_t = sess.tape.sum(log_t);
    let mean_t = sess.tape.scale(sum_t, 1.0 / nt);
    Ok(sess.tape.add(mean_s, mean_t))
}

/// One-hot rows for a label vector.
pub fn one_hot(labels: &[usize], classes: usize) -> Mat {
    let mut m = Mat::zeros(labels.len(), classes);
    for (r, &l) in labels.iter().enumerate() {
        m.set(r, l, 1.0);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{seeded_rng, Mode};

    fn sess() -> Session {
        Session::new(&ParameterStore::default(), Mode::Eval, seeded_rng(0), true)
    }

    #[test]
    fn uninformative_discriminator_gives_two_log_half() {
        let mut s = sess();
        let ds = s.tape.leaf(Mat::from_vec(3, 1, vec![0.5; 3]));
        let dt = s.tape.leaf(Mat::from_vec(2, 1, vec![0.5; 2]));
        let l = domain_adversarial_loss(&mut s, ds, dt).unwrap();
        assert!((s.tape.scalar_value(l) - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((s.tape.scalar_value(l) + 1.38629).abs() < 1e-5);
    }

    #[test]
    fn perfect_discriminator_at_clamp_is_near_zero() {
        let mut s = sess();
        let ds = s.tape.leaf(Mat::from_vec(2, 1, vec![1.0 - 1e-7; 2]));
        let dt = s.tape.leaf(Mat::from_vec(2, 1, vec![1e-7; 2]));
        let l = domain_adversarial_loss(&mut s, ds, dt).unwrap();
        assert!(s.tape.scalar_value(l).abs() < 3e-7);
    }

    #[test]
    fn random_batch_matches_hand_evaluation() {
        let mut s = sess();
        let sv = [0.3, 0.8];
        let tv = [0.6, 0.1];
        let ds = s.tape.leaf(Mat::from_vec(2, 1, sv.to_vec()));
        let dt = s.tape.leaf(Mat::from_vec(2, 1, tv.to_vec()));
        let l = domain_adversarial_loss(&mut s, ds, dt).unwrap();
        let expect = (sv[0].ln() + sv[1].ln()) / 2.0 + ((1.0 - tv[0]).ln() + (1.0 - tv[1]).ln()) / 2.0;
        assert!((s.tape.scalar_value(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn one_hot_embedding_picks_matrix_row() {
        let emb = LabelEmbedder::new(3, 2);
        let mut store = ParameterStore::default();
        let mut rng = seeded_rng(4);
        emb.init(&mut store, &mut rng);
        let w = store.get(Group::L, "emb.w").clone();
        let mut s = Session::new(&store, Mode::Eval, seeded_rng(0), true);
        let x = s.tape.leaf(one_hot(&[2], 3));
        let y = emb.forward(&mut s, x).unwrap();
        // zero bias at init, so the output is row 2 of the weight matrix
        assert_eq!(s.tape.value(y).data, w.row(2).to_vec());
    }

    #[test]
    fn uniform_prediction_embeds_to_row_mean() {
        let emb = LabelEmbedder::new(4, 3);
        let mut store = ParameterStore::default();
        let mut rng = seeded_rng(4);
        emb.init(&mut store, &mut rng);
        let w = store.get(Group::L, "emb.w").clone();
        let mut s = Session::new(&store, Mode::Eval, seeded_rng(0), true);
        let x = s.tape.leaf(Mat::from_vec(1, 4, vec![0.25; 4]));
        let y = emb.forward(&mut s, x).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..4).map(|r| w.get(r, c)).sum::<f64>() / 4.0;
            assert!((s.tape.value(y).get(0, c) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn embedder_rejects_non_simplex() {
        let emb = LabelEmbedder::new(2, 2);
        let mut store = ParameterStore::default();
        let mut rng = seeded_rng(4);
        emb.init(&mut store, &mut rng);
        let mut s = Session::new(&store, Mode::Eval, seeded_rng(0), true);
        let x = s.tape.leaf(Mat::from_vec(1, 2, vec![0.9, 0.4]));
        assert!(matches!(emb.forward(&mut s, x), Err(AbgError::NotASimplex { .. })));
    }
}
