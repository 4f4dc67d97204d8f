//! Synthetic cross-domain sequence data: labeled videos as stacks of
//! frame features, a controllable domain shift, batch cycling, and
//! semi-supervised label masks.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::ShiftSpec;
use crate::error::{AbgError, Result};
use crate::mat::Mat;
use crate::nn::seeded_rng;

/// A set of fixed-length videos. Frame `f` of video `v` lives at feature
/// row `v * k + f`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub k: usize,
    pub d: usize,
    pub classes: usize,
    pub domain: u8,
    pub features: Mat,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(AbgError::EmptyDataset);
        }
        if self.features.rows != self.labels.len() * self.k || self.features.cols != self.d {
            return Err(AbgError::DimMismatch(format!(
                "feature matrix is {}x{}, expected {}x{}",
                self.features.rows,
                self.features.cols,
                self.labels.len() * self.k,
                self.d
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(AbgError::LabelOutOfRange { label: l, classes: self.classes });
        }
        Ok(())
    }

    /// Stack the frame rows of the chosen videos into a batch matrix.
    pub fn gather(&self, videos: &[usize]) -> (Mat, Vec<usize>) {
        let mut out = Mat::zeros(videos.len() * self.k, self.d);
        let mut labels = Vec::with_capacity(videos.len());
        for (b, &v) in videos.iter().enumerate() {
            for f in 0..self.k {
                let src = self.features.row(v * self.k + f);
                out.row_mut(b * self.k + f).copy_from_slice(src);
            }
            labels.push(self.labels[v]);
        }
        (out, labels)
    }
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Rotation by `angle` inside the plane spanned by orthonormal `u`, `w`.
fn rotate_in_plane(x: &mut [f64], u: &[f64], w: &[f64], angle: f64) {
    let (cu, cw): (f64, f64) = (
        x.iter().zip(u).map(|(a, b)| a * b).sum(),
        x.iter().zip(w).map(|(a, b)| a * b).sum(),
    );
    let (c, s) = (angle.cos() - 1.0, angle.sin());
    for i in 0..x.len() {
        x[i] += c * (cu * u[i] + cw * w[i]) + s * (cu * w[i] - cw * u[i]);
    }
}

/// Generate a paired source/target corpus.
///
/// Every class has a prototype plus a sinusoidal temporal component along
/// a class direction; the target domain sees the same classes rotated in
/// a random 2-plane, shifted by a constant bias and re-noised. With
/// `order_classes` set, classes come in pairs sharing prototype and
/// direction and differing only in frame order, so any order-blind
/// summary of a video is identical in distribution across the pair.
pub fn generate(
    classes: usize,
    n_per_domain: usize,
    k: usize,
    d: usize,
    spec: &ShiftSpec,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    if classes == 0 || n_per_domain == 0 || k == 0 || d == 0 {
        return Err(AbgError::InvalidSpec("classes, n, k and d must be positive".into()));
    }
    if spec.order_classes && classes % 2 != 0 {
        return Err(AbgError::InvalidSpec("order_classes needs an even class count".into()));
    }
    let mut rng = seeded_rng(seed);

    // class prototypes, temporal directions and phases
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut phases: Vec<f64> = Vec::with_capacity(classes);
    for c in 0..classes {
        if spec.order_classes && c % 2 == 1 {
            // odd member of a pair: same statics as the even member
            protos.push(protos[c - 1].clone());
            dirs.push(dirs[c - 1].clone());
            phases.push(phases[c - 1]);
        } else {
            protos.push(
                (0..d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * spec.proto_scale
                    })
                    .collect(),
            );
            let mut dir = unit_vec(&mut rng, d);
            dir.iter_mut().for_each(|x| *x *= spec.temporal_scale * spec.proto_scale);
            dirs.push(dir);
            phases.push(rng.gen::<f64>() * std::f64::consts::TAU);
        }
    }

    // target-domain shift: a random 2-plane that leans halfway into the
    // span of the class prototypes. A plane fully inside the span can
    // rotate one class cluster onto another's position (alignment becomes
    // ambiguous); a fully isotropic plane barely touches class structure
    // in high dimension. The 50/50 blend displaces every class enough to
    // hurt a source-only classifier while keeping identities recoverable.
    let proto_mix = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let coefs: Vec<f64> = (0..classes).map(|_| StandardNormal.sample(rng)).collect();
        let mut v = vec![0.0; d];
        for (c, coef) in coefs.iter().enumerate() {
            for i in 0..d {
                v[i] += coef * protos[c][i];
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        let iso = unit_vec(rng, d);
        let mut blend: Vec<f64> = v.iter().zip(&iso).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
        let bn = blend.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        blend.iter_mut().for_each(|x| *x /= bn);
        blend
    };
    let u = proto_mix(&mut rng);
    let mut w = proto_mix(&mut rng);
    let dot: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
    for i in 0..d {
        w[i] -= dot * u[i];
    }
    let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    w.iter_mut().for_each(|x| *x /= wn);
    let bias: Vec<f64> = unit_vec(&mut rng, d)
        .into_iter()
        .map(|x| x * spec.bias_scale * spec.proto_scale * (d as f64).sqrt())
        .collect();

    let make = |domain: u8, noise: f64, rng: &mut ChaCha8Rng| -> Dataset {
        let mut features = Mat::zeros(n_per_domain * k, d);
        let mut labels = Vec::with_capacity(n_per_domain);
        for v in 0..n_per_domain {
            let c = v % classes;
            labels.push(c);
            for f in 0..k {
                // the odd member of an order pair plays its frames backwards
                let step = if spec.order_classes && c % 2 == 1 { k - 1 - f } else { f };
                let t = std::f64::consts::TAU * step as f64 / k as f64 + phases[c];
                let row = features.row_mut(v * k + f);
                for i in 0..d {
                    let z: f64 = StandardNormal.sample(rng);
                    row[i] = protos[c][i] + t.sin() * dirs[c][i] + noise * z;
                }
                if domain == 1 {
                    rotate_in_plane(row, &u, &w, spec.rot_angle);
                    for i in 0..d {
                        row[i] += bias[i];
                    }
                }
            }
        }
        Dataset { k, d, classes, domain, features, labels }
    };

    let mut src_rng = seeded_rng(seed.wrapping_add(1));
    let mut tgt_rng = seeded_rng(seed.wrapping_add(2));
    let source = make(0, spec.noise_source, &mut src_rng);
    let target = make(1, spec.noise_target, &mut tgt_rng);
    Ok((source, target))
}

/// Endless seeded batch supplier over one dataset side. When fewer than a
/// full batch remain in the current pass, the leftovers are dropped and a
/// fresh shuffled pass begins.
pub struct Cycler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch > n {
            return Err(AbgError::BatchLargerThanSet { batch, set: n });
        }
        let mut c = Cycler { order: (0..n).collect(), pos: 0, batch, rng: seeded_rng(seed) };
        c.order.shuffle(&mut c.rng);
        Ok(c)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Steps per epoch: the slower-cycling side sets the pace, partial
/// batches do not count.
pub fn steps_per_epoch(n_s: usize, b_s: usize, n_t: usize, b_t: usize) -> usize {
    (n_s / b_s).max(n_t / b_t)
}

/// Choose the labeled subset for a semi-supervised run: a fixed seeded
/// sample of round(ratio * n) videos, returned sorted.
pub fn mask_labels(n: usize, ratio: f64, seed: u64) -> Vec<usize> {
    let m = (ratio * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed));
    idx.truncate(m.min(n));
    idx.sort_unstable();
    idx
}
