//! Frame- and video-level bipartite graphs: cross-domain edge
//! computation and message-passing node update. One generic layer serves
//! both levels; only the metric/updater networks and the vertex layout
//! differ.

use std::rc::Rc;

use crate::error::{AbgError, Result};
use crate::nn::{AffineBlock, Session, PROB_CLAMP};
use crate::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Frame,
    Video,
}

impl Level {
    pub fn as_str(&self) -> &'static str {
        match self {
            Level::Frame => "frame",
            Level::Video => "video",
        }
    }
}

/// Column-stochastic source-by-target affinity matrix.
#[derive(Clone, Copy, Debug)]
pub struct EdgeMap {
    pub var: Var,
    pub level: Level,
}

/// Source and target vertex features of one bipartite level.
#[derive(Clone, Copy, Debug)]
pub struct VertexBatch {
    pub source: Var,
    pub target: Var,
    pub level: Level,
}

/// A = sigmoid(metric(|v_i^s - v_j^t|)) per pair, clamped away from {0,1};
/// rows are L1-normalized first, then columns, yielding a column-stochastic
/// edge map. The R x C x D pair tensor is streamed, never materialized
/// beyond the (R*C) x D difference block.
pub fn edge_update(
    sess: &mut Session,
    v: &VertexBatch,
    metric: &AffineBlock,
) -> Result<EdgeMap> {
    let (s, t) = (v.source, v.target);
    let (sv, tv) = (sess.tape.value(s), sess.tape.value(t));
    if sv.cols != tv.cols {
        return Err(AbgError::ShapeMismatch(format!(
            "vertex widths differ: {} vs {}",
            sv.cols, tv.cols
        )));
    }
    if metric.d_out != 1 {
        return Err(AbgError::ShapeMismatch(format!(
            "metric must map to 1 score, maps to {}",
            metric.d_out
        )));
    }
    let (rows, cols) = (sv.rows, tv.rows);
    let diffs = sess.tape.pair_abs_diff(s, t);
    let scores = metric.forward(sess, diffs)?;
    let grid = sess.tape.reshape(scores, rows, cols);
    let affinity = sess.tape.sigmoid(grid);
    let clamped = sess.tape.clamp(affinity, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let row_sums = sess.tape.row_sum(clamped);
    let row_norm = sess.tape.div_col_broadcast(clamped, row_sums);
    let col_sums = sess.tape.col_sum(row_norm);
    let e = sess.tape.div_row_broadcast(row_norm, col_sums);
    Ok(EdgeMap { var: e, level: v.level })
}

/// Vs' = updater([Vs; E Vt]), Vt' = updater([Vt; E^T Vs]), one shared
/// updater for both sides.
pub fn node_update(
    sess: &mut Session,
    v: &VertexBatch,
    edges: &EdgeMap,
    updater: &AffineBlock,
) -> Result<VertexBatch> {
    if edges.level != v.level {
        return Err(AbgError::LevelMismatch {
            expected: v.level.as_str(),
            got: edges.level.as_str(),
        });
    }
    let ev = sess.tape.value(edges.var);
    let (sv, tv) = (sess.tape.value(v.source), sess.tape.value(v.target));
    if ev.rows != sv.rows || ev.cols != tv.rows {
        return Err(AbgError::ShapeMismatch(format!(
            "edge map {}x{} does not conform to vertex sets {}x{}",
            ev.rows, ev.cols, sv.rows, tv.rows
        )));
    }
    let msg_s = sess.tape.matmul(edges.var, v.target);
    let et = sess.tape.transpose(edges.var);
    let msg_t = sess.tape.matmul(et, v.source);
    let cat_s = sess.tape.concat_cols(v.source, msg_s);
    let cat_t = sess.tape.concat_cols(v.target, msg_t);
    let new_s = updater.forward(sess, cat_s)?;
    let new_t = updater.forward(sess, cat_t)?;
    Ok(VertexBatch { source: new_s, target: new_t, level: v.level })
}

/// Compose edge_update then node_update `rounds` times; returns the final
/// vertexes and the last edge map (the one edge supervision consumes).
pub fn graph_forward(
    sess: &mut Session,
    init: VertexBatch,
    metric: &AffineBlock,
    updater: &AffineBlock,
    rounds: usize,
) -> Result<(VertexBatch, EdgeMap)> {
    assert!(rounds >= 1, "at least one propagation round");
    let mut v = init;
    let mut last_edges = None;
    for _ in 0..rounds {
        let edges = edge_update(sess, &v, metric)?;
        v = node_update(sess, &v, &edges, updater)?;
        last_edges = Some(edges);
    }
    Ok((v, last_edges.unwrap()))
}

/// Frame vertex row index for video `video`, frame `frame` (0-based).
pub fn frame_row(video: usize, frame: usize, k: usize) -> usize {
    video * k + frame
}

/// Indices selecting frame `frame` of every video in a (B*K)-row layout.
pub fn frame_slice_rows(batch: usize, frame: usize, k: usize) -> Rc<Vec<usize>> {
    Rc::new((0..batch).map(|v| frame_row(v, frame, k)).collect())
}
