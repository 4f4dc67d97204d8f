//! Frame aggregation: collapse the K per-frame vertexes of each video
//! into one video representation. Four interchangeable functions: mean
//! pooling, LSTM, GRU, and a multi-scale temporal relation network.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AbgError, Result};
use crate::graph::frame_slice_rows;
use crate::mat::Mat;
use crate::nn::{AffineBlock, Group, ParameterStore, Session};
use crate::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggKind {
    Avg,
    Lstm,
    Gru,
    Trn,
}

impl AggKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AggKind::Avg => "avg",
            AggKind::Lstm => "lstm",
            AggKind::Gru => "gru",
            AggKind::Trn => "trn",
        }
    }

    pub fn from_str(s: &str) -> Option<AggKind> {
        match s {
            "avg" => Some(AggKind::Avg),
            "lstm" => Some(AggKind::Lstm),
            "gru" => Some(AggKind::Gru),
            "trn" => Some(AggKind::Trn),
            _ => None,
        }
    }
}

/// Gate weights for an LSTM or GRU cell of width `d` (hidden == input).
#[derive(Clone, Debug)]
pub struct RecurrentCell {
    pub kind: AggKind,
    pub d: usize,
    gates: &'static [&'static str],
}

impl RecurrentCell {
    pub fn new(kind: AggKind, d: usize) -> Self {
        let gates: &'static [&'static str] = match kind {
            AggKind::Lstm => &["i", "f", "o", "g"],
            AggKind::Gru => &["z", "r", "h"],
            _ => panic!("not a recurrent aggregator"),
        };
        RecurrentCell { kind, d, gates }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        for gate in self.gates {
            let std = (1.0 / self.d as f64).sqrt();
            store.insert(Group::Agg, &format!("cell.w{gate}"), crate::nn::normal_mat(rng, self.d, self.d, std));
            store.insert(Group::Agg, &format!("cell.u{gate}"), crate::nn::normal_mat(rng, self.d, self.d, std));
            store.insert(Group::Agg, &format!("cell.b{gate}"), Mat::zeros(1, self.d));
        }
    }

    fn gate(&self, sess: &mut Session, name: &str, x: Var, h: Var) -> Var {
        let w = sess.var(Group::Agg, &format!("cell.w{name}"));
        let u = sess.var(Group::Agg, &format!("cell.u{name}"));
        let b = sess.var(Group::Agg, &format!("cell.b{name}"));
        let xw = sess.tape.matmul(x, w);
        let hu = sess.tape.matmul(h, u);
        let s = sess.tape.add(xw, hu);
        sess.tape.add_row_broadcast(s, b)
    }

    /// Run the recurrence over frames in order; output is the hidden state
    /// at the last step, one row per video.
    pub fn forward(&self, sess: &mut Session, frames: Var, batch: usize, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(AbgError::EmptySequence);
        }
        if sess.tape.value(frames).cols != self.d {
            return Err(AbgError::ShapeMismatch(format!(
                "cell width {} vs frame width {}",
                self.d,
                sess.tape.value(frames).cols
            )));
        }
        let mut h = sess.tape.constant(Mat::zeros(batch, self.d));
        let mut c = sess.tape.constant(Mat::zeros(batch, self.d));
        for step in 0..k {
            let x = sess.tape.select_rows(frames, frame_slice_rows(batch, step, k));
            match self.kind {
                AggKind::Lstm => {
                    let i_pre = self.gate(sess, "i", x, h);
                    let i = sess.tape.sigmoid(i_pre);
                    let f_pre = self.gate(sess, "f", x, h);
                    let f = sess.tape.sigmoid(f_pre);
                    let o_pre = self.gate(sess, "o", x, h);
                    let o = sess.tape.sigmoid(o_pre);
                    let g_pre = self.gate(sess, "g", x, h);
                    let g = sess.tape.tanh(g_pre);
                    let fc = sess.tape.mul_elem(f, c);
                    let ig = sess.tape.mul_elem(i, g);
                    c = sess.tape.add(fc, ig);
                    let tc = sess.tape.tanh(c);
                    h = sess.tape.mul_elem(o, tc);
                }
                AggKind::Gru => {
                    let z_pre = self.gate(sess, "z", x, h);
                    let z = sess.tape.sigmoid(z_pre);
                    let r_pre = self.gate(sess, "r", x, h);
                    let r = sess.tape.sigmoid(r_pre);
                    let rh = sess.tape.mul_elem(r, h);
                    let cand_pre = self.gate(sess, "h", x, rh);
                    let cand = sess.tape.tanh(cand_pre);
                    let one_minus_z = {
                        let nz = sess.tape.scale(z, -1.0);
                        sess.tape.add_scalar(nz, 1.0)
                    };
                    let keep = sess.tape.mul_elem(one_minus_z, h);
                    let new = sess.tape.mul_elem(z, cand);
                    h = sess.tape.add(keep, new);
                }
                _ => unreachable!(),
            }
        }
        Ok(h)
    }
}

/// Per-scale relation networks: for each scale m in 2..=K one pair
/// (F_t^(m), G^(m)). All strictly increasing m-tuples are enumerated
/// (exact at desk scale); `sample_cap` bounds the per-scale tuple count
/// for larger K.
#[derive(Clone, Debug)]
pub struct TrnAggregator {
    pub d: usize,
    pub k: usize,
    pub hidden: usize,
    pub sample_cap: Option<usize>,
}

impl TrnAggregator {
    pub fn scale_nets(&self, scale: usize) -> (AffineBlock, AffineBlock) {
        let f = AffineBlock::new(
            Group::Agg,
            &format!("trn.f{scale}"),
            scale * self.d,
            self.hidden,
            self.d,
        );
        let g = AffineBlock::new(Group::Agg, &format!("trn.g{scale}"), self.d, self.hidden, self.d);
        (f, g)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        for scale in 2..=self.k {
            let (f, g) = self.scale_nets(scale);
            f.init(store, rng);
            g.init(store, rng);
        }
    }

    pub fn forward(&self, sess: &mut Session, frames: Var, batch: usize, k: usize) -> Result<Var> {
        if k < 2 {
            return Err(AbgError::ScaleOutOfRange { scale: 2, max: k });
        }
        if k != self.k {
            return Err(AbgError::ShapeMismatch(format!(
                "aggregator built for K={}, got K={k}",
                self.k
            )));
        }
        let mut total: Option<Var> = None;
        for scale in 2..=k {
            let (f_net, g_net) = self.scale_nets(scale);
            let mut tuples = increasing_tuples(k, scale);
            if let Some(cap) = self.sample_cap {
                if tuples.len() > cap {
                    tuples.shuffle(&mut sess.rng);
                    tuples.truncate(cap);
                    tuples.sort();
                }
            }
            let mut scale_sum: Option<Var> = None;
            for tuple in &tuples {
                let mut cat: Option<Var> = None;
                for &frame in tuple {
                    let x = sess.tape.select_rows(frames, frame_slice_rows(batch, frame, k));
                    cat = Some(match cat {
                        None => x,
                        Some(c) => sess.tape.concat_cols(c, x),
                    });
                }
                let rel = f_net.forward(sess, cat.unwrap())?;
                scale_sum = Some(match scale_sum {
                    None => rel,
                    Some(s) => sess.tape.add(s, rel),
                });
            }
            let fused = g_net.forward(sess, scale_sum.unwrap())?;
            total = Some(match total {
                None => fused,
                Some(t) => sess.tape.add(t, fused),
            });
        }
        Ok(total.unwrap())
    }
}

/// All strictly increasing `len`-tuples over 0..k, lexicographic order.
pub fn increasing_tuples(k: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(len);
    fn rec(start: usize, k: usize, len: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == len {
            out.push(cur.clone());
            return;
        }
        for i in start..k {
            cur.push(i);
            rec(i + 1, k, len, cur, out);
            cur.pop();
        }
    }
    rec(0, k, len, &mut cur, &mut out);
    out
}

/// The configured aggregation function with its parameters.
#[derive(Clone, Debug)]
pub enum Aggregator {
    Avg,
    Recurrent(RecurrentCell),
    Trn(TrnAggregator),
}

impl Aggregator {
    pub fn build(kind: AggKind, d: usize, k: usize, hidden: usize, cap: Option<usize>) -> Self {
        match kind {
            AggKind::Avg => Aggregator::Avg,
            AggKind::Lstm | AggKind::Gru => Aggregator::Recurrent(RecurrentCell::new(kind, d)),
            AggKind::Trn => Aggregator::Trn(TrnAggregator { d, k, hidden, sample_cap: cap }),
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        match self {
            Aggregator::Avg => {}
            Aggregator::Recurrent(cell) => cell.init(store, rng),
            Aggregator::Trn(trn) => trn.init(store, rng),
        }
    }

    /// frames: (batch*k) x d in video-major layout; returns batch x d.
    pub fn forward(&self, sess: &mut Session, frames: Var, batch: usize, k: usize) -> Result<Var> {
        match self {
            Aggregator::Avg => avg_pool(sess, frames, batch, k),
            Aggregator::Recurrent(cell) => cell.forward(sess, frames, batch, k),
            Aggregator::Trn(trn) => trn.forward(sess, frames, batch, k),
        }
    }
}

/// H_i = (1/K) sum_k v_{ik}, via a constant pooling matrix.
pub fn avg_pool(sess: &mut Session, frames: Var, batch: usize, k: usize) -> Result<Var> {
    if k == 0 {
        return Err(AbgError::EmptySequence);
    }
    let mut pool = Mat::zeros(batch, batch * k);
    for v in 0..batch {
        for f in 0..k {
            pool.set(v, v * k + f, 1.0 / k as f64);
        }
    }
    let p = sess.tape.constant(pool);
    Ok(sess.tape.matmul(p, frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{seeded_rng, Mode};

    fn eval_session(store: &ParameterStore) -> Session {
        Session::new(store, Mode::Eval, seeded_rng(0), true)
    }

    #[test]
    fn avg_pool_means_frames() {
        let store = ParameterStore::default();
        let mut sess = eval_session(&store);
        let frames = sess.tape.leaf(Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let h = avg_pool(&mut sess, frames, 1, 2).unwrap();
        assert_eq!(sess.tape.value(h).data, vec![2.0, 3.0]);
    }

    #[test]
    fn avg_pool_single_frame_is_identity() {
        let store = ParameterStore::default();
        let mut sess = eval_session(&store);
        let frames = sess.tape.leaf(Mat::from_rows(&[vec![5.0, -1.0]]));
        let h = avg_pool(&mut sess, frames, 1, 1).unwrap();
        assert_eq!(sess.tape.value(h).data, vec![5.0, -1.0]);
    }

    #[test]
    fn avg_pool_rejects_empty() {
        let store = ParameterStore::default();
        let mut sess = eval_session(&store);
        let frames = sess.tape.leaf(Mat::zeros(0, 2));
        assert!(matches!(avg_pool(&mut sess, frames, 0, 0), Err(AbgError::EmptySequence)));
    }

    #[test]
    fn avg_pool_frame_permutation_invariant() {
        let store = ParameterStore::default();
        let a = Mat::from_rows(&[vec![1.0, 0.5], vec![2.0, -3.0], vec![0.1, 4.0]]);
        let b = Mat::from_rows(&[vec![2.0, -3.0], vec![0.1, 4.0], vec![1.0, 0.5]]);
        let run = |m: &Mat| {
            let mut sess = eval_session(&store);
            let frames = sess.tape.leaf(m.clone());
            let h = avg_pool(&mut sess, frames, 1, 3).unwrap();
            sess.tape.value(h).data.clone()
        };
        let (ha, hb) = (run(&a), run(&b));
        for (x, y) in ha.iter().zip(&hb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lstm_outputs_zero_hidden() {
        let cell = RecurrentCell::new(AggKind::Lstm, 3);
        let mut store = ParameterStore::default();
        let mut rng = seeded_rng(1);
        cell.init(&mut store, &mut rng);
        for v in store.params.values_mut() {
            v.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut sess = eval_session(&store);
        let frames = sess.tape.leaf(Mat::from_rows(&[
            vec![1.0, -2.0, 0.5],
            vec![3.0, 0.0, 1.0],
        ]));
        let h = cell.forward(&mut sess, frames, 1, 2).unwrap();
        assert!(sess.tape.value(h).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gru_single_step_matches_hand_oracle() {
        let cell = RecurrentCell::new(AggKind::Gru, 2);
        let mut store = ParameterStore::default();
        let mut rng = seeded_rng(5);
        cell.init(&mut store, &mut rng);
        let x = [0.3, -0.7];
        let mut sess = eval_session(&store);
        let frames = sess.tape.leaf(Mat::from_vec(1, 2, x.to_vec()));
        let h = cell.forward(&mut sess, frames, 1, 1).unwrap();
        let got = sess.tape.value(h).data.clone();

        // hand evaluation of one GRU step from h0 = 0
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let gate = |w: &Mat, b: &Mat, j: usize| {
            b.data[j] + (0..2).map(|i| x[i] * w.get(i, j)).sum::<f64>()
        };
        let wz = store.get(Group::Agg, "cell.wz");
        let bz = store.get(Group::Agg, "cell.bz");
        let wh = store.get(Group::Agg, "cell.wh");
        let bh = store.get(Group::Agg, "cell.bh");
        for j in 0..2 {
            let z = sig(gate(wz, bz, j));
            let cand = gate(wh, bh, j).tanh();
            let expect = z * cand; // h0 = 0 so the keep term vanishes
            assert!((got[j] - expect).abs() < 1e-12, "{} vs {}", got[j], expect);
        }
    }

    #[test]
    fn recurrent_output_depends_on_frame_order() {
        let cell = RecurrentCell::new(AggKind::Lstm, 2);
        let mut store = ParameterStore::default();
        let mut rng = seeded_rng(9);
        cell.init(&mut store, &mut rng);
        let fwd = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let rev = Mat::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        let run = |m: &Mat| {
            let mut sess = eval_session(&store);
            let frames = sess.tape.leaf(m.clone());
            let h = cell.forward(&mut sess, frames, 1, 3).unwrap();
            sess.tape.value(h).data.clone()
        };
        assert_ne!(run(&fwd), run(&rev));
    }

    #[test]
    fn tuple_counts() {
        assert_eq!(increasing_tuples(4, 2).len(), 6);
        assert_eq!(increasing_tuples(4, 3).len(), 4);
        assert_eq!(increasing_tuples(4, 4).len(), 1);
        assert_eq!(increasing_tuples(5, 2).len(), 10);
        let total: usize = (2..=5).map(|m| increasing_tuples(5, m).len()).sum();
        assert_eq!(total, 26);
    }

    #[test]
    fn trn_zero_nets_output_zero() {
        let trn = TrnAggregator { d: 2, k: 3, hidden: 4, sample_cap: None };
        let mut store = ParameterStore::default();
        let mut rng = seeded_rng(3);
        trn.init(&mut store, &mut rng);
        for v in store.params.values_mut() {
            v.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut sess = eval_session(&store);
        let frames = sess.tape.leaf(Mat::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
        ]));
        let h = trn.forward(&mut sess, frames, 1, 3).unwrap();
        assert!(sess.tape.value(h).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn trn_rejects_k_below_two() {
        let trn = TrnAggregator { d: 2, k: 1, hidden: 4, sample_cap: None };
        let store = ParameterStore::default();
        let mut sess = eval_session(&store);
        let frames = sess.tape.leaf(Mat::zeros(1, 2));
        assert!(matches!(
            trn.forward(&mut sess, frames, 1, 1),
            Err(AbgError::ScaleOutOfRange { .. })
        ));
    }
}
