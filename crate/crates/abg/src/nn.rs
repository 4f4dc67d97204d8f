//! Trainable parameters and the affine building block used by every
//! metric, updater, classifier and discriminator network.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AbgError, Result};
use crate::mat::Mat;
use crate::tape::{Tape, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_DECAY: f64 = 0.9;
pub const LEAKY_SLOPE: f64 = 0.01;
pub const PROB_CLAMP: f64 = 1e-7;

/// The eight trainable parameter groups of the optimization schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    Fe,
    Fv,
    Agg,
    Ve,
    Vn,
    L,
    Y,
    D,
}

impl Group {
    pub const ALL: [Group; 8] = [
        Group::Fe,
        Group::Fv,
        Group::Agg,
        Group::Ve,
        Group::Vn,
        Group::L,
        Group::Y,
        Group::D,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::Fe => "fe",
            Group::Fv => "fv",
            Group::Agg => "a",
            Group::Ve => "ve",
            Group::Vn => "vn",
            Group::L => "l",
            Group::Y => "y",
            Group::D => "d",
        }
    }

    pub fn from_str(s: &str) -> Option<Group> {
        Group::ALL.iter().copied().find(|g| g.as_str() == s)
    }
}

pub type ParamKey = (Group, String);

/// Named trainable arrays partitioned into groups, plus momentum buffers
/// and non-trainable running normalization statistics.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    pub params: BTreeMap<ParamKey, Mat>,
    pub momentum: BTreeMap<ParamKey, Mat>,
    pub stats: BTreeMap<ParamKey, Mat>,
}

impl ParameterStore {
    pub fn insert(&mut self, group: Group, name: &str, value: Mat) {
        self.params.insert((group, name.to_string()), value);
    }

    pub fn get(&self, group: Group, name: &str) -> &Mat {
        self.params
            .get(&(group, name.to_string()))
            .unwrap_or_else(|| panic!("missing parameter {}.{}", group.as_str(), name))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }

    pub fn group_keys(&self, group: Group) -> Vec<ParamKey> {
        self.params.keys().filter(|k| k.0 == group).cloned().collect()
    }

    /// Flatten a group's parameters into one vector (deterministic key order).
    pub fn flatten_group(&self, group: Group) -> Vec<f64> {
        let mut out = Vec::new();
        for (k, v) in &self.params {
            if k.0 == group {
                out.extend_from_slice(&v.data);
            }
        }
        out
    }

    pub fn unflatten_group(&mut self, group: Group, flat: &[f64]) {
        let mut off = 0;
        for (k, v) in self.params.iter_mut() {
            if k.0 == group {
                let len = v.data.len();
                v.data.copy_from_slice(&flat[off..off + len]);
                off += len;
            }
        }
        assert_eq!(off, flat.len());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward/backward episode: a tape with every store parameter bound
/// as a leaf, plus the rng stream and the running-stat updates produced
/// by train-mode normalization.
pub struct Session {
    pub tape: Tape,
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    pub bn_enabled: bool,
    vars: BTreeMap<ParamKey, Var>,
    stats: BTreeMap<ParamKey, Mat>,
    pub stat_updates: Vec<(ParamKey, Mat)>,
}

impl Session {
    pub fn new(store: &ParameterStore, mode: Mode, rng: ChaCha8Rng, bn_enabled: bool) -> Self {
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for (k, v) in &store.params {
            vars.insert(k.clone(), tape.leaf(v.clone()));
        }
        Session {
            tape,
            mode,
            rng,
            bn_enabled,
            vars,
            stats: store.stats.clone(),
            stat_updates: Vec::new(),
        }
    }

    pub fn var(&self, group: Group, name: &str) -> Var {
        *self
            .vars
            .get(&(group, name.to_string()))
            .unwrap_or_else(|| panic!("unbound parameter {}.{}", group.as_str(), name))
    }

    pub fn try_var(&self, group: Group, name: &str) -> Option<Var> {
        self.vars.get(&(group, name.to_string())).copied()
    }

    pub fn param_vars(&self) -> &BTreeMap<ParamKey, Var> {
        &self.vars
    }

    /// Pull gradients for every bound parameter after `backward`.
    pub fn collect_grads(&self) -> BTreeMap<ParamKey, Mat> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), self.tape.grad(v).clone()))
            .collect()
    }

    fn running_stat(&self, key: &ParamKey, width: usize, fill: f64) -> Mat {
        self.stats
            .get(key)
            .cloned()
            .unwrap_or_else(|| Mat::from_vec(1, width, vec![fill; width]))
    }
}

pub fn normal_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Mat::from_vec(rows, cols, data)
}

/// Draw an inverted-scaling dropout mask and apply it.
pub fn dropout(sess: &mut Session, x: Var, rate: f64) -> Var {
    if sess.mode == Mode::Eval || rate <= 0.0 {
        return x;
    }
    let n = sess.tape.value(x).len();
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..n)
        .map(|_| if sess.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    sess.tape.mul_mask(x, Rc::new(mask))
}

/// Two affine layers with per-feature normalization, leaky rectification
/// and dropout between them. Stands in for the 1x1 convolution stacks:
/// a 1x1 convolution over node or edge positions is a per-position
/// affine map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AffineBlock {
    pub group: Group,
    pub name: String,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub dropout: f64,
    pub batchnorm: bool,
}

impl AffineBlock {
    pub fn new(group: Group, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        AffineBlock {
            group,
            name: name.to_string(),
            d_in,
            d_hidden,
            d_out,
            dropout: 0.0,
            batchnorm: false,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn with_batchnorm(mut self, on: bool) -> Self {
        self.batchnorm = on;
        self
    }

    fn key(&self, suffix: &str) -> String {
        format!("{}.{}", self.name, suffix)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        let w1 = normal_mat(rng, self.d_in, self.d_hidden, (2.0 / self.d_in as f64).sqrt());
        let w2 = normal_mat(rng, self.d_hidden, self.d_out, (2.0 / self.d_hidden as f64).sqrt());
        store.insert(self.group, &self.key("w1"), w1);
        store.insert(self.group, &self.key("b1"), Mat::zeros(1, self.d_hidden));
        store.insert(self.group, &self.key("w2"), w2);
        store.insert(self.group, &self.key("b2"), Mat::zeros(1, self.d_out));
        if self.batchnorm {
            store.insert(
                self.group,
                &self.key("gamma"),
                Mat::from_vec(1, self.d_hidden, vec![1.0; self.d_hidden]),
            );
            store.insert(self.group, &self.key("beta"), Mat::zeros(1, self.d_hidden));
        }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let xv = sess.tape.value(x);
        if xv.cols != self.d_in {
            return Err(AbgError::ShapeMismatch(format!(
                "block {} expects width {}, got {}",
                self.name, self.d_in, xv.cols
            )));
        }
        let w1 = sess.var(self.group, &self.key("w1"));
        let b1 = sess.var(self.group, &self.key("b1"));
        let w2 = sess.var(self.group, &self.key("w2"));
        let b2 = sess.var(self.group, &self.key("b2"));
        let mut h = sess.tape.matmul(x, w1);
        h = sess.tape.add_row_broadcast(h, b1);
        if self.batchnorm && sess.bn_enabled {
            h = self.batchnorm_layer(sess, h)?;
        }
        h = sess.tape.leaky_relu(h, LEAKY_SLOPE);
        h = dropout(sess, h, self.dropout);
        let mut y = sess.tape.matmul(h, w2);
        y = sess.tape.add_row_broadcast(y, b2);
        Ok(y)
    }

    fn batchnorm_layer(&self, sess: &mut Session, h: Var) -> Result<Var> {
        let gamma = sess.var(self.group, &self.key("gamma"));
        let beta = sess.var(self.group, &self.key("beta"));
        let n = sess.tape.value(h).rows as f64;
        let (mean, std) = match sess.mode {
            Mode::Train => {
                let cs = sess.tape.col_sum(h);
                let mean = sess.tape.scale(cs, 1.0 / n);
                let neg_mean = sess.tape.scale(mean, -1.0);
                let centered = sess.tape.add_row_broadcast(h, neg_mean);
                let sq = sess.tape.mul_elem(centered, centered);
                let vs = sess.tape.col_sum(sq);
                let var = sess.tape.scale(vs, 1.0 / n);
                let shifted = sess.tape.add_scalar(var, BN_EPS);
                let std = sess.tape.sqrt(shifted);
                self.record_stat_update(sess, mean, var);
                (mean, std)
            }
            Mode::Eval => {
                let mk = (self.group, self.key("run_mean"));
                let vk = (self.group, self.key("run_var"));
                let rm = sess.running_stat(&mk, self.d_hidden, 0.0);
                let rv = sess.running_stat(&vk, self.d_hidden, 1.0);
                let mean = sess.tape.constant(rm);
                let var = sess.tape.constant(rv);
                let shifted = sess.tape.add_scalar(var, BN_EPS);
                let std = sess.tape.sqrt(shifted);
                (mean, std)
            }
        };
        let neg_mean = sess.tape.scale(mean, -1.0);
        let centered = sess.tape.add_row_broadcast(h, neg_mean);
        let xn = sess.tape.div_row_broadcast(centered, std);
        let scaled = sess.tape.mul_row_broadcast(xn, gamma);
        Ok(sess.tape.add_row_broadcast(scaled, beta))
    }

    fn record_stat_update(&self, sess: &mut Session, mean: Var, var: Var) {
        let mk = (self.group, self.key("run_mean"));
        let vk = (self.group, self.key("run_var"));
        let bm = sess.tape.value(mean).clone();
        let bv = sess.tape.value(var).clone();
        let old_m = sess.running_stat(&mk, self.d_hidden, 0.0);
        let old_v = sess.running_stat(&vk, self.d_hidden, 1.0);
        let mix = |old: &Mat, new: &Mat| {
            let data = old
                .data
                .iter()
                .zip(&new.data)
                .map(|(o, n)| BN_DECAY * o + (1.0 - BN_DECAY) * n)
                .collect();
            Mat::from_vec(1, old.cols, data)
        };
        sess.stat_updates.push((mk, mix(&old_m, &bm)));
        sess.stat_updates.push((vk, mix(&old_v, &bv)));
    }
}

/// Apply a session's accumulated running-stat updates back to the store.
pub fn apply_stat_updates(store: &mut ParameterStore, sess: &Session) {
    for (k, v) in &sess.stat_updates {
        store.stats.insert(k.clone(), v.clone());
    }
}

/// Plain affine map (the label embedder).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub group: Group,
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(group: Group, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear { group, name: name.to_string(), d_in, d_out }
    }

    fn key(&self, suffix: &str) -> String {
        format!("{}.{}", self.name, suffix)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        let w = normal_mat(rng, self.d_in, self.d_out, (1.0 / self.d_in as f64).sqrt());
        store.insert(self.group, &self.key("w"), w);
        store.insert(self.group, &self.key("b"), Mat::zeros(1, self.d_out));
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let xv = sess.tape.value(x);
        if xv.cols != self.d_in {
            return Err(AbgError::ShapeMismatch(format!(
                "linear {} expects width {}, got {}",
                self.name, self.d_in, xv.cols
            )));
        }
        let w = sess.var(self.group, &self.key("w"));
        let b = sess.var(self.group, &self.key("b"));
        let y = sess.tape.matmul(x, w);
        Ok(sess.tape.add_row_broadcast(y, b))
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sess_for(store: &ParameterStore, mode: Mode) -> Session {
        Session::new(store, mode, seeded_rng(7), true)
    }

    #[test]
    fn zero_block_maps_to_zero() {
        let blk = AffineBlock::new(Group::Y, "t", 3, 4, 2);
        let mut store = ParameterStore::default();
        let mut rng = seeded_rng(1);
        blk.init(&mut store, &mut rng);
        for v in store.params.values_mut() {
            v.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut sess = sess_for(&store, Mode::Eval);
        let x = sess.tape.leaf(Mat::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.1, -0.4]));
        let y = blk.forward(&mut sess, x).unwrap();
        assert!(sess.tape.value(y).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_configured_block_passes_nonnegative_input() {
        // unit diagonal weights, zero bias, no normalization: x >= 0 survives
        let blk = AffineBlock::new(Group::Y, "t", 2, 2, 2);
        let mut store = ParameterStore::default();
        let mut rng = seeded_rng(1);
        blk.init(&mut store, &mut rng);
        let eye = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        *store.params.get_mut(&(Group::Y, "t.w1".into())).unwrap() = eye.clone();
        *store.params.get_mut(&(Group::Y, "t.w2".into())).unwrap() = eye;
        let mut sess = sess_for(&store, Mode::Eval);
        let x = sess.tape.leaf(Mat::from_vec(1, 2, vec![0.25, 3.0]));
        let y = blk.forward(&mut sess, x).unwrap();
        assert_eq!(sess.tape.value(y).data, vec![0.25, 3.0]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let blk = AffineBlock::new(Group::Y, "t", 3, 5, 2).with_dropout(0.5).with_batchnorm(true);
        let mut store = ParameterStore::default();
        let mut rng = seeded_rng(2);
        blk.init(&mut store, &mut rng);
        let x = Mat::from_vec(2, 3, vec![0.3, -1.0, 2.0, 0.7, 0.2, -0.5]);
        let run = || {
            let mut sess = sess_for(&store, Mode::Eval);
            let xv = sess.tape.leaf(x.clone());
            let y = blk.forward(&mut sess, xv).unwrap();
            sess.tape.value(y).data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let blk = AffineBlock::new(Group::Y, "t", 3, 4, 2);
        let mut store = ParameterStore::default();
        let mut rng = seeded_rng(1);
        blk.init(&mut store, &mut rng);
        let mut sess = sess_for(&store, Mode::Eval);
        let x = sess.tape.leaf(Mat::zeros(2, 5));
        assert!(matches!(blk.forward(&mut sess, x), Err(AbgError::ShapeMismatch(_))));
    }

    #[test]
    fn train_mode_records_running_stats() {
        let blk = AffineBlock::new(Group::Y, "t", 2, 3, 1).with_batchnorm(true);
        let mut store = ParameterStore::default();
        let mut rng = seeded_rng(3);
        blk.init(&mut store, &mut rng);
        let mut sess = sess_for(&store, Mode::Train);
        let x = sess.tape.leaf(Mat::from_vec(4, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0, 2.0, -2.0]));
        blk.forward(&mut sess, x).unwrap();
        assert_eq!(sess.stat_updates.len(), 2);
        apply_stat_updates(&mut store, &sess);
        assert!(store.stats.contains_key(&(Group::Y, "t.run_mean".into())));
    }
}
