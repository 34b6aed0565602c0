//! Contrastive representation learning attached to the encoder: the
//! augmentation pipeline, a positive critic `g(y, w) = exp(cos(Py, Pw) /
//! tau)`, the predictive-coding objective, an optional FIFO store of past
//! keys, and the momentum update for the key encoder.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;

use crate::error::{D2cError, Result};
use crate::nn::{bind, collect_grads, scaled_normal, Bound, ParamSet, SpatialShape};
use crate::rng::{uniform, Stream};
use crate::tape::{GatherPlan, NodeId, Tape};
use crate::tensor::Mat;

/// Augmentation parameters, all acting in `[0, 1]` pixel space.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    /// Area fraction range of the random resized crop.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        AugmentationPolicy {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
        }
    }
}

fn luma(px: &[f64]) -> f64 {
    match px.len() {
        1 => px[0],
        3 => 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2],
        _ => px.iter().sum::<f64>() / px.len() as f64,
    }
}

/// Random resized crop, horizontal flip, color jitter, grayscale; output
/// clamped to `[0, 1]`. All randomness comes from `rng`, with a fixed draw
/// order so one stream always produces one augmentation.
pub fn augment(x: &[f64], shape: SpatialShape, policy: &AugmentationPolicy, rng: &mut Stream) -> Vec<f64> {
    let (c, h, w) = (shape.channels, shape.height, shape.width);
    assert_eq!(x.len(), c * h * w, "image size mismatch");

    let scale = policy.crop_scale.0 + (policy.crop_scale.1 - policy.crop_scale.0) * uniform(rng);
    let u_y = uniform(rng);
    let u_x = uniform(rng);
    let u_flip = uniform(rng);
    let f_bright = 1.0 + policy.brightness * (2.0 * uniform(rng) - 1.0);
    let f_contrast = 1.0 + policy.contrast * (2.0 * uniform(rng) - 1.0);
    let f_sat = 1.0 + policy.saturation * (2.0 * uniform(rng) - 1.0);
    let u_gray = uniform(rng);

    // crop + bilinear resize back to full size (aspect kept at 1)
    let side = scale.sqrt();
    let (crop_h, crop_w) = (side * h as f64, side * w as f64);
    let y0 = u_y * (h as f64 - crop_h);
    let x0 = u_x * (w as f64 - crop_w);
    let mut out = vec![0.0; x.len()];
    for i in 0..h {
        let sy = y0 + (i as f64 + 0.5) * crop_h / h as f64 - 0.5;
        let iy = sy.floor();
        let fy = sy - iy;
        let (y_lo, y_hi) = (
            (iy.max(0.0) as usize).min(h - 1),
            ((iy + 1.0).max(0.0) as usize).min(h - 1),
        );
        for j in 0..w {
            let sx = x0 + (j as f64 + 0.5) * crop_w / w as f64 - 0.5;
            let ix = sx.floor();
            let fx = sx - ix;
            let (x_lo, x_hi) = (
                (ix.max(0.0) as usize).min(w - 1),
                ((ix + 1.0).max(0.0) as usize).min(w - 1),
            );
            for ch in 0..c {
                let v00 = x[(y_lo * w + x_lo) * c + ch];
                let v01 = x[(y_lo * w + x_hi) * c + ch];
                let v10 = x[(y_hi * w + x_lo) * c + ch];
                let v11 = x[(y_hi * w + x_hi) * c + ch];
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                out[(i * w + j) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }

    if u_flip < policy.flip_prob {
        for i in 0..h {
            for j in 0..w / 2 {
                for ch in 0..c {
                    let a = (i * w + j) * c + ch;
                    let b = (i * w + (w - 1 - j)) * c + ch;
                    out.swap(a, b);
                }
            }
        }
    }

    if policy.brightness > 0.0 {
        for v in out.iter_mut() {
            *v *= f_bright;
        }
    }
    if policy.contrast > 0.0 {
        let mean = out
            .chunks(c)
            .map(|px| luma(px))
            .sum::<f64>()
            / (h * w) as f64;
        for v in out.iter_mut() {
            *v = (*v - mean) * f_contrast + mean;
        }
    }
    if policy.saturation > 0.0 && c == 3 {
        for px in out.chunks_mut(c) {
            let l = luma(px);
            for v in px.iter_mut() {
                *v = l + (*v - l) * f_sat;
            }
        }
    }
    if u_gray < policy.grayscale_prob && c == 3 {
        for px in out.chunks_mut(c) {
            let l = luma(px);
            px.fill(l);
        }
    }
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Linear projection head plus temperature; the critic value is
/// `exp(cos(P y, P w) / tau)`, positive by construction.
#[derive(Debug, Clone)]
pub struct Critic {
    pub latent_dim: usize,
    pub proj_dim: usize,
    pub temperature: f64,
    pub params: ParamSet,
}

impl Critic {
    pub fn new(latent_dim: usize, proj_dim: usize, temperature: f64, rng: &mut Stream) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        let mut params = ParamSet::new();
        params.insert(
            "proj/w",
            scaled_normal(rng, latent_dim, proj_dim, (1.0 / latent_dim as f64).sqrt()),
        );
        Critic {
            latent_dim,
            proj_dim,
            temperature,
            params,
        }
    }

    /// Projected and L2-normalized rows.
    pub fn project_on_tape(&self, tape: &mut Tape, bound: &Bound, latents: NodeId) -> NodeId {
        let u = tape.matmul(latents, bound.id("proj/w"));
        let sq = tape.square(u);
        let nrm2 = tape.row_sum(sq);
        let nrm2 = tape.add_const(nrm2, 1e-12);
        let nrm = tape.sqrt(nrm2);
        let denom = tape.row_broadcast(nrm, self.proj_dim);
        tape.div(u, denom)
    }
}

/// Where the `m - 1` negatives of each anchor come from.
pub enum NegativeSource<'a> {
    /// Every other anchor's key in the batch (m = batch size).
    InBatch,
    /// A fixed bank of projected keys, shared by all anchors (m = len + 1).
    Bank(&'a Mat),
    /// Per-anchor negatives, stacked `[n * (m-1)] x latent_dim`.
    PerAnchor(NodeId, usize),
}

fn repeat_rows_plan(rows: usize, times: usize, cols: usize) -> Arc<GatherPlan> {
    let mut template = Vec::with_capacity(rows * times * cols);
    for r in 0..rows {
        for _ in 0..times {
            for c in 0..cols {
                template.push((r * cols + c) as i64);
            }
        }
    }
    Arc::new(GatherPlan {
        template,
        out_rows_per_item: rows * times,
        out_cols: cols,
        in_rows_per_item: rows,
    })
}

/// `-L_CPC` on the tape: the m-way classification loss whose optimum
/// saturates at `-log m`. Positive score enters the denominator alongside
/// the negatives.
pub fn cpc_loss_on_tape(
    tape: &mut Tape,
    critic: &Critic,
    bound: &Bound,
    queries: NodeId,
    pos_keys: NodeId,
    negatives: NegativeSource,
) -> NodeId {
    let n = tape.value(queries).rows;
    let tau_inv = 1.0 / critic.temperature;
    let qp = critic.project_on_tape(tape, bound, queries);
    let kp = critic.project_on_tape(tape, bound, pos_keys);

    let (scores, m) = match negatives {
        NegativeSource::InBatch => {
            let s = tape.matmul_bt(qp, kp);
            (tape.scale(s, tau_inv), n)
        }
        NegativeSource::Bank(bank) => {
            let prod = tape.mul(qp, kp);
            let pos = tape.row_sum(prod);
            let bank_node = tape.constant(bank.clone());
            let negs = tape.matmul_bt(qp, bank_node);
            let all = tape.concat(pos, negs);
            (tape.scale(all, tau_inv), bank.rows + 1)
        }
        NegativeSource::PerAnchor(neg_latents, m_minus_1) => {
            let prod = tape.mul(qp, kp);
            let pos = tape.row_sum(prod);
            let np = critic.project_on_tape(tape, bound, neg_latents);
            let plan = repeat_rows_plan(n, m_minus_1, critic.proj_dim);
            let q_rep = tape.gather(qp, plan);
            let nprod = tape.mul(q_rep, np);
            let nscore = tape.row_sum(nprod);
            let nscore = tape.reshape(nscore, n, m_minus_1);
            let all = tape.concat(pos, nscore);
            (tape.scale(all, tau_inv), m_minus_1 + 1)
        }
    };

    let lse = tape.log_sum_exp_row(scores);
    let pos_score = match negatives_kind(&scores, tape, n) {
        ScoresKind::Square => tape.diag_col(scores),
        ScoresKind::PosFirst => {
            // positive sits in column 0; extract with a gather
            let plan = first_col_plan(n, tape.value(scores).cols);
            tape.gather(scores, plan)
        }
    };
    let gap = tape.sub(lse, pos_score);
    let mean = tape.mean(gap);
    tape.add_const(mean, -(m as f64).ln())
}

enum ScoresKind {
    Square,
    PosFirst,
}

fn negatives_kind(scores: &NodeId, tape: &Tape, n: usize) -> ScoresKind {
    let m = tape.value(*scores);
    if m.rows == n && m.cols == n {
        ScoresKind::Square
    } else {
        ScoresKind::PosFirst
    }
}

fn first_col_plan(rows: usize, cols: usize) -> Arc<GatherPlan> {
    let template: Vec<i64> = (0..rows).map(|r| (r * cols) as i64).collect();
    Arc::new(GatherPlan {
        template,
        out_rows_per_item: rows,
        out_cols: 1,
        in_rows_per_item: rows,
    })
}

/// Gradients of the standalone objective.
pub struct CpcLoss {
    pub loss: f64,
    pub critic_grads: ParamSet,
    pub query_grads: Mat,
    pub pos_key_grads: Mat,
    pub negative_grads: Mat,
}

/// `-L_CPC` with gradients for the critic and for every latent input.
/// `negatives` stacks each anchor's `m - 1` negatives row-contiguously.
pub fn cpc_loss(
    critic: &Critic,
    queries: &Mat,
    pos_keys: &Mat,
    negatives: &Mat,
) -> Result<CpcLoss> {
    let n = queries.rows;
    queries.check_same_shape(pos_keys, "positive pairs")?;
    if negatives.rows == 0 || negatives.rows % n != 0 {
        return Err(D2cError::ShapeMismatch {
            expected: format!("negatives in multiples of {n} rows"),
            got: format!("{}", negatives.rows),
        });
    }
    if negatives.cols != queries.cols || queries.cols != critic.latent_dim {
        return Err(D2cError::ShapeMismatch {
            expected: format!("{} latent columns", critic.latent_dim),
            got: format!("{} / {}", queries.cols, negatives.cols),
        });
    }
    let m_minus_1 = negatives.rows / n;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &critic.params, true);
    let q = tape.var(queries.clone());
    let k = tape.var(pos_keys.clone());
    let negs = tape.var(negatives.clone());
    let loss = cpc_loss_on_tape(
        &mut tape,
        critic,
        &bound,
        q,
        k,
        NegativeSource::PerAnchor(negs, m_minus_1),
    );
    let value = tape.value(loss).data[0];
    if !value.is_finite() {
        return Err(D2cError::NonFiniteLoss("contrastive".into()));
    }
    let grads = tape.backward(loss);
    Ok(CpcLoss {
        loss: value,
        critic_grads: collect_grads(&grads, &bound, &critic.params),
        query_grads: grads.get(q).cloned().unwrap_or_else(|| Mat::zeros(n, queries.cols)),
        pos_key_grads: grads.get(k).cloned().unwrap_or_else(|| Mat::zeros(n, queries.cols)),
        negative_grads: grads
            .get(negs)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(negatives.rows, negatives.cols)),
    })
}

/// FIFO ring of past projected keys.
#[derive(Debug, Clone)]
pub struct NegativeStore {
    capacity: usize,
    buf: VecDeque<Vec<f64>>,
    dim: usize,
}

impl NegativeStore {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        NegativeStore {
            capacity,
            buf: VecDeque::new(),
            dim,
        }
    }

    pub fn push_batch(&mut self, keys: &Mat) {
        assert_eq!(keys.cols, self.dim, "key dimension mismatch");
        for r in 0..keys.rows {
            self.buf.push_back(keys.row(r).to_vec());
            if self.buf.len() > self.capacity {
                self.buf.pop_front();
            }
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn as_mat(&self) -> Option<Mat> {
        if self.buf.is_empty() {
            return None;
        }
        let mut data = Vec::with_capacity(self.buf.len() * self.dim);
        for row in &self.buf {
            data.extend_from_slice(row);
        }
        Some(Mat::from_vec(self.buf.len(), self.dim, data))
    }
}

/// `key <- m key + (1 - m) query`, elementwise over congruent tables.
pub fn momentum_update(key: &mut ParamSet, query: &ParamSet, m_coef: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m_coef) {
        return Err(D2cError::InvalidParameter(format!(
            "momentum must be in [0, 1), got {m_coef}"
        )));
    }
    key.congruent(query)?;
    let names: Vec<String> = key.names().map(String::from).collect();
    for name in names {
        let q = query.get(&name).data.clone();
        let k = key.get_mut(&name);
        for (kv, qv) in k.data.iter_mut().zip(q) {
            *kv = m_coef * *kv + (1.0 - m_coef) * qv;
        }
    }
    Ok(())
}

/// Draw an index different from `i` in `[0, n)`.
pub fn other_index(i: usize, n: usize, rng: &mut Stream) -> usize {
    let j = rng.gen_range(0..n - 1);
    if j >= i {
        j + 1
    } else {
        j
    }
}
