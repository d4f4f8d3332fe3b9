//! Training losses: box regression, token classification, object-text
//! alignment, and patch-text alignment, plus their combination.
//!
//! Alignment targets: each ground-truth box k carries the token positions
//! it refers to (`T_k`); the binary table `A[i][j]` marks token i as
//! aligned to patch j when some box containing token i covers patch j.
//! Per-token and per-patch normalizations of `A` are the reference
//! distributions the contrastive losses pull the projected embeddings
//! toward. KL terms are taken as KL(reference || predicted), which stays
//! finite off the reference support, and are averaged over the aligned
//! token/patch sets.

use crate::config::ModelConfig;
use crate::geometry::{patch_coverage_with_rule, BBox, CoverageRule, PatchGrid};
use crate::heads::{AlignmentEmbeddings, Predictions};
use crate::matching::Assignment;
use crate::tensor::{Tape, TensorId, LOG_FLOOR};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Binary token-patch alignment table, m x n row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignMatrix {
    pub data: Vec<f64>,
    pub tokens: usize,
    pub patches: usize,
}

impl AlignMatrix {
    pub fn zeros(tokens: usize, patches: usize) -> Self {
        Self { data: vec![0.0; tokens * patches], tokens, patches }
    }

    pub fn get(&self, token: usize, patch: usize) -> f64 {
        self.data[token * self.patches + patch]
    }

    pub fn set(&mut self, token: usize, patch: usize, v: f64) {
        self.data[token * self.patches + patch] = v;
    }
}

/// Ground truth for one sample: boxes, their token sets, the per-token
/// object sets, and the alignment table.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<BBox>,
    /// `token_sets[k]`: sorted 0-based token positions box k refers to.
    pub token_sets: Vec<Vec<usize>>,
    /// `object_sets[i]`: sorted box indices token i refers to; empty for
    /// tokens outside every box's set.
    pub object_sets: Vec<Vec<usize>>,
    pub alignment: AlignMatrix,
}

impl GroundTruth {
    /// Derive the object sets and alignment table from boxes and token
    /// sets over the given patch grid.
    pub fn new(
        boxes: Vec<BBox>,
        token_sets: Vec<Vec<usize>>,
        text_len: usize,
        grid: &PatchGrid,
        rule: CoverageRule,
    ) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::Contract("ground truth requires at least one box".into()));
        }
        if token_sets.len() != boxes.len() {
            return Err(Error::Contract(format!(
                "{} token sets for {} boxes",
                token_sets.len(),
                boxes.len()
            )));
        }
        let mut token_sets = token_sets;
        for set in &mut token_sets {
            set.sort_unstable();
            set.dedup();
            if set.is_empty() {
                return Err(Error::Contract("every box needs a nonempty token set".into()));
            }
            if let Some(&bad) = set.iter().find(|&&t| t >= text_len) {
                return Err(Error::Contract(format!(
                    "token position {bad} outside phrase of {text_len}"
                )));
            }
        }
        let mut object_sets = vec![Vec::new(); text_len];
        let mut alignment = AlignMatrix::zeros(text_len, grid.len());
        for (k, (b, set)) in boxes.iter().zip(&token_sets).enumerate() {
            let covered = patch_coverage_with_rule(grid, b, rule);
            for &i in set {
                object_sets[i].push(k);
                for &j in &covered {
                    alignment.set(i, j, 1.0);
                }
            }
        }
        Ok(Self { boxes, token_sets, object_sets, alignment })
    }

    pub fn num_boxes(&self) -> usize {
        self.boxes.len()
    }

    /// Soft classification label for box k: uniform over its token
    /// positions, shifted by one because class 0 is the no-text slot.
    pub fn class_distribution(&self, k: usize, num_classes: usize) -> Vec<f64> {
        let set = &self.token_sets[k];
        let mut dist = vec![0.0; num_classes];
        let p = 1.0 / set.len() as f64;
        for &t in set {
            dist[t + 1] = p;
        }
        dist
    }
}

/// Row- and column-normalized views of the alignment table, with the sets
/// of aligned tokens and patches.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAlignment {
    /// m x n; row i is token i's distribution over patches (zero row for
    /// unaligned tokens).
    pub token_rows: Vec<f64>,
    /// m x n; column j is patch j's distribution over tokens.
    pub patch_cols: Vec<f64>,
    pub aligned_tokens: Vec<usize>,
    pub aligned_patches: Vec<usize>,
    pub tokens: usize,
    pub patches: usize,
}

/// Normalize the binary table per token (rows over patches) and per patch
/// (columns over tokens).
pub fn normalize_alignment(a: &AlignMatrix) -> NormalizedAlignment {
    let (m, n) = (a.tokens, a.patches);
    let mut token_rows = vec![0.0; m * n];
    let mut patch_cols = vec![0.0; m * n];
    let mut aligned_tokens = Vec::new();
    let mut aligned_patches = Vec::new();
    for i in 0..m {
        let row_sum: f64 = (0..n).map(|j| a.get(i, j)).sum();
        if row_sum > 0.0 {
            aligned_tokens.push(i);
            for j in 0..n {
                token_rows[i * n + j] = a.get(i, j) / row_sum;
            }
        }
    }
    for j in 0..n {
        let col_sum: f64 = (0..m).map(|i| a.get(i, j)).sum();
        if col_sum > 0.0 {
            aligned_patches.push(j);
            for i in 0..m {
                patch_cols[i * n + j] = a.get(i, j) / col_sum;
            }
        }
    }
    NormalizedAlignment { token_rows, patch_cols, aligned_tokens, aligned_patches, tokens: m, patches: n }
}

/// Cross-entropy of `probs` against a constant same-shape target:
/// `-sum(target * ln(max(probs, floor)))`. Probabilities at a supported
/// index that undercut the floor are clamped and logged.
fn masked_cross_entropy(tape: &mut Tape, probs: TensorId, target: Vec<f64>) -> Result<TensorId> {
    let shape = tape.shape(probs).to_vec();
    let clamped_support = tape
        .value(probs)
        .iter()
        .zip(&target)
        .filter(|&(&p, &t)| t > 0.0 && p < LOG_FLOOR)
        .count();
    if clamped_support > 0 {
        log::warn!("{clamped_support} supported probabilities clamped to {LOG_FLOOR}");
    }
    let target = tape.constant(target, shape)?;
    let clamped = tape.clamp_min(probs, LOG_FLOOR);
    let logp = tape.log(clamped);
    let prod = tape.mul(target, logp)?;
    let s = tape.sum(prod);
    Ok(tape.neg(s))
}

fn scalar_const(tape: &mut Tape, v: f64) -> TensorId {
    tape.scalar(v)
}

/// Box regression term for one matched pair:
/// `lambda_l1 * L1 + lambda_giou * (1 - giou)`, built from differentiable
/// ops on the unclipped corner forms.
pub fn bbox_loss(
    tape: &mut Tape,
    boxes: TensorId,
    detection: usize,
    gt: &BBox,
    cfg: &ModelConfig,
) -> Result<TensorId> {
    let row = tape.slice_rows(boxes, detection, 1)?;
    let gt_row = tape.constant(vec![gt.cx, gt.cy, gt.w, gt.h], vec![1, 4])?;
    let diff = tape.sub(row, gt_row)?;
    let l1 = tape.abs(diff);
    let l1 = tape.sum(l1);

    // Predicted corners.
    let cx = tape.slice_cols(row, 0, 1)?;
    let cy = tape.slice_cols(row, 1, 1)?;
    let w = tape.slice_cols(row, 2, 1)?;
    let h = tape.slice_cols(row, 3, 1)?;
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    let x1 = tape.sub(cx, hw)?;
    let x2 = tape.add(cx, hw)?;
    let y1 = tape.sub(cy, hh)?;
    let y2 = tape.add(cy, hh)?;

    let (gx1, gy1, gx2, gy2) = gt.corners();
    let gx1 = tape.constant(vec![gx1], vec![1, 1])?;
    let gy1 = tape.constant(vec![gy1], vec![1, 1])?;
    let gx2 = tape.constant(vec![gx2], vec![1, 1])?;
    let gy2 = tape.constant(vec![gy2], vec![1, 1])?;

    let ix1 = tape.maximum(x1, gx1)?;
    let iy1 = tape.maximum(y1, gy1)?;
    let ix2 = tape.minimum(x2, gx2)?;
    let iy2 = tape.minimum(y2, gy2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;

    let area_pred = tape.mul(w, h)?;
    let area_gt = tape.constant(vec![gt.w * gt.h], vec![1, 1])?;
    let areas = tape.add(area_pred, area_gt)?;
    let union = tape.sub(areas, inter)?;
    let iou = tape.div(inter, union)?;

    let hx1 = tape.minimum(x1, gx1)?;
    let hy1 = tape.minimum(y1, gy1)?;
    let hx2 = tape.maximum(x2, gx2)?;
    let hy2 = tape.maximum(y2, gy2)?;
    let hw_hull = tape.sub(hx2, hx1)?;
    let hh_hull = tape.sub(hy2, hy1)?;
    let hull = tape.mul(hw_hull, hh_hull)?;
    let slack = tape.sub(hull, union)?;
    let penalty = tape.div(slack, hull)?;
    let giou = tape.sub(iou, penalty)?;

    let one = tape.constant(vec![1.0], vec![1, 1])?;
    let giou_loss = tape.sub(one, giou)?;
    let giou_loss = tape.sum(giou_loss); // [1,1] -> scalar

    let l1_term = tape.scale(l1, cfg.lambda_l1);
    let giou_term = tape.scale(giou_loss, cfg.lambda_giou);
    tape.add(l1_term, giou_term)
}

/// Target matrix for the classification head: matched queries carry the
/// soft label of their ground truth, unmatched queries the no-text
/// one-hot.
pub fn classification_targets(
    assignment: &Assignment,
    gt: &GroundTruth,
    queries: usize,
    num_classes: usize,
) -> Vec<f64> {
    let mut targets = vec![0.0; queries * num_classes];
    for i in 0..queries {
        targets[i * num_classes] = 1.0;
    }
    for &(det, k) in &assignment.pairs {
        let row = &mut targets[det * num_classes..(det + 1) * num_classes];
        row.iter_mut().for_each(|v| *v = 0.0);
        let dist = gt.class_distribution(k, num_classes);
        row.copy_from_slice(&dist);
    }
    targets
}

/// Mean soft cross-entropy over all query tokens.
pub fn cls_loss(tape: &mut Tape, class_probs: TensorId, targets: Vec<f64>) -> Result<TensorId> {
    let queries = tape.shape(class_probs)[0];
    let ce = masked_cross_entropy(tape, class_probs, targets)?;
    Ok(tape.scale(ce, 1.0 / queries as f64))
}

/// Matched detection embedding rows in ground-truth order.
fn matched_rows(
    tape: &mut Tape,
    det_align: TensorId,
    assignment: &Assignment,
) -> Result<TensorId> {
    let rows: Result<Vec<TensorId>> = assignment
        .pairs
        .iter()
        .map(|&(det, _)| tape.slice_rows(det_align, det, 1))
        .collect();
    tape.concat_rows(&rows?)
}

/// Object-to-text alignment: for each matched object, the mean over its
/// token set of the cross-entropy of a softmax over all m text embeddings.
pub fn ota_loss(
    tape: &mut Tape,
    det_align: TensorId,
    text_align: TensorId,
    assignment: &Assignment,
    gt: &GroundTruth,
    tau: f64,
) -> Result<TensorId> {
    let g = assignment.pairs.len();
    if g == 0 {
        return Err(Error::Contract("alignment requires at least one matched object".into()));
    }
    if gt.token_sets.iter().any(|s| s.is_empty()) {
        return Err(Error::Contract("empty token set in object-text alignment".into()));
    }
    let m = tape.shape(text_align)[0];
    let matched = matched_rows(tape, det_align, assignment)?;
    let text_t = tape.transpose(text_align)?;
    let sim = tape.matmul(matched, text_t)?;
    let sim = tape.scale(sim, 1.0 / tau);
    let probs = tape.softmax(sim, 1)?;
    let mut target = vec![0.0; g * m];
    for (row, &(_, k)) in assignment.pairs.iter().enumerate() {
        let set = &gt.token_sets[k];
        for &t in set {
            target[row * m + t] = 1.0 / set.len() as f64;
        }
    }
    masked_cross_entropy(tape, probs, target)
}

/// Text-to-object alignment: the mirror of [`ota_loss`], a softmax over
/// the g matched objects summed over tokens with a nonempty object set.
pub fn toa_loss(
    tape: &mut Tape,
    text_align: TensorId,
    det_align: TensorId,
    assignment: &Assignment,
    gt: &GroundTruth,
    tau: f64,
) -> Result<TensorId> {
    let g = assignment.pairs.len();
    if g == 0 {
        return Err(Error::Contract("alignment requires at least one matched object".into()));
    }
    let m = tape.shape(text_align)[0];
    let matched = matched_rows(tape, det_align, assignment)?;
    let det_t = tape.transpose(matched)?;
    let sim = tape.matmul(text_align, det_t)?;
    let sim = tape.scale(sim, 1.0 / tau);
    let probs = tape.softmax(sim, 1)?;
    // Column r of the similarity corresponds to ground truth
    // assignment.pairs[r].1; object sets index ground truths directly.
    let mut gt_to_col = vec![usize::MAX; gt.num_boxes()];
    for (col, &(_, k)) in assignment.pairs.iter().enumerate() {
        gt_to_col[k] = col;
    }
    let mut target = vec![0.0; m * g];
    for (i, objs) in gt.object_sets.iter().enumerate() {
        if i >= m || objs.is_empty() {
            continue;
        }
        let p = 1.0 / objs.len() as f64;
        for &k in objs {
            let col = gt_to_col[k];
            if col != usize::MAX {
                target[i * g + col] = p;
            }
        }
    }
    masked_cross_entropy(tape, probs, target)
}

/// The two patch-alignment terms and their mean.
#[derive(Debug, Clone, Copy)]
pub struct PaLossNodes {
    pub tpa: TensorId,
    pub pta: TensorId,
    pub pa: TensorId,
}

fn entropy_of_rows(rows: &[f64]) -> f64 {
    rows.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Patch-text alignment: mean KL(reference || softmax similarity) over
/// aligned tokens (text to patch) and over aligned patches (patch to
/// text). Zero when nothing is aligned.
pub fn pa_loss(
    tape: &mut Tape,
    pa_text: TensorId,
    pa_vision: TensorId,
    norm: &NormalizedAlignment,
    tau: f64,
) -> Result<PaLossNodes> {
    if norm.aligned_tokens.is_empty() {
        let z1 = scalar_const(tape, 0.0);
        let z2 = scalar_const(tape, 0.0);
        let z3 = scalar_const(tape, 0.0);
        return Ok(PaLossNodes { tpa: z1, pta: z2, pa: z3 });
    }
    let (m, n) = (norm.tokens, norm.patches);
    if tape.shape(pa_text)[0] != m || tape.shape(pa_vision)[0] != n {
        return Err(Error::Dimension(format!(
            "alignment table {}x{} does not match embeddings {}x{}",
            m,
            n,
            tape.shape(pa_text)[0],
            tape.shape(pa_vision)[0]
        )));
    }
    let vision_t = tape.transpose(pa_vision)?;
    let sim = tape.matmul(pa_text, vision_t)?;
    let sim = tape.scale(sim, 1.0 / tau);

    // Token to patch: softmax over patches per aligned token.
    let probs_tok = tape.softmax(sim, 1)?;
    let ce_tok = masked_cross_entropy(tape, probs_tok, norm.token_rows.clone())?;
    let s_tok = norm.aligned_tokens.len() as f64;
    let h_tok = entropy_of_rows(&norm.token_rows);
    let tpa = tape.scale(ce_tok, 1.0 / s_tok);
    let tpa = tape.add_scalar(tpa, -h_tok / s_tok);

    // Patch to token: softmax over tokens per aligned patch, on the
    // transposed similarity.
    let sim_t = tape.transpose(sim)?;
    let probs_pat = tape.softmax(sim_t, 1)?;
    let mut target_pat = vec![0.0; n * m];
    for j in 0..n {
        for i in 0..m {
            target_pat[j * m + i] = norm.patch_cols[i * n + j];
        }
    }
    let h_pat = entropy_of_rows(&target_pat);
    let ce_pat = masked_cross_entropy(tape, probs_pat, target_pat)?;
    let s_pat = norm.aligned_patches.len() as f64;
    let pta = tape.scale(ce_pat, 1.0 / s_pat);
    let pta = tape.add_scalar(pta, -h_pat / s_pat);

    let sum = tape.add(tpa, pta)?;
    let pa = tape.scale(sum, 0.5);
    Ok(PaLossNodes { tpa, pta, pa })
}

/// Which loss terms participate in training.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossToggles {
    pub use_oa: bool,
    pub use_pa: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self { use_oa: true, use_pa: true }
    }
}

/// Scalar values of every loss term for one sample or batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_bbox: f64,
    pub l_cls: f64,
    pub l_ota: f64,
    pub l_toa: f64,
    pub l_oa: f64,
    pub l_tpa: f64,
    pub l_pta: f64,
    pub l_pa: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_bbox += other.l_bbox;
        self.l_cls += other.l_cls;
        self.l_ota += other.l_ota;
        self.l_toa += other.l_toa;
        self.l_oa += other.l_oa;
        self.l_tpa += other.l_tpa;
        self.l_pta += other.l_pta;
        self.l_pa += other.l_pa;
        self.l_total += other.l_total;
    }

    pub fn scale(&mut self, f: f64) {
        self.l_bbox *= f;
        self.l_cls *= f;
        self.l_ota *= f;
        self.l_toa *= f;
        self.l_oa *= f;
        self.l_tpa *= f;
        self.l_pta *= f;
        self.l_pa *= f;
        self.l_total *= f;
    }
}

/// The total loss node plus its detached breakdown.
#[derive(Debug)]
pub struct LossNodes {
    pub total: TensorId,
    pub breakdown: LossBreakdown,
}

/// Assemble the combined loss
/// `L = L_bbox + L_cls + (L_OTA + L_TOA)/2 + (L_TPA + L_PTA)/2`
/// over one sample given a fixed assignment. Box and alignment terms use
/// matched pairs only; classification covers all queries.
pub fn total_loss(
    tape: &mut Tape,
    predictions: &Predictions,
    alignment_emb: &AlignmentEmbeddings,
    gt: &GroundTruth,
    assignment: &Assignment,
    cfg: &ModelConfig,
    toggles: &LossToggles,
) -> Result<LossNodes> {
    if assignment.pairs.len() != gt.num_boxes() {
        return Err(Error::Contract(format!(
            "assignment covers {} of {} ground truths",
            assignment.pairs.len(),
            gt.num_boxes()
        )));
    }

    // Box regression, summed over matched pairs.
    let mut bbox_total: Option<TensorId> = None;
    for &(det, k) in &assignment.pairs {
        let term = bbox_loss(tape, predictions.boxes, det, &gt.boxes[k], cfg)?;
        bbox_total = Some(match bbox_total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let l_bbox = bbox_total.expect("at least one matched pair");

    // Classification over every query.
    let num_classes = cfg.max_text_len + 1;
    let targets = classification_targets(assignment, gt, predictions.queries, num_classes);
    let l_cls = cls_loss(tape, predictions.class_probs, targets)?;

    let mut total = tape.add(l_bbox, l_cls)?;
    let mut breakdown = LossBreakdown {
        l_bbox: tape.item(l_bbox),
        l_cls: tape.item(l_cls),
        ..Default::default()
    };

    if toggles.use_oa {
        let ota = ota_loss(tape, alignment_emb.det, alignment_emb.text, assignment, gt, cfg.tau)?;
        let toa = toa_loss(tape, alignment_emb.text, alignment_emb.det, assignment, gt, cfg.tau)?;
        let oa_sum = tape.add(ota, toa)?;
        let oa = tape.scale(oa_sum, 0.5);
        total = tape.add(total, oa)?;
        breakdown.l_ota = tape.item(ota);
        breakdown.l_toa = tape.item(toa);
        breakdown.l_oa = tape.item(oa);
    }

    if toggles.use_pa {
        let norm = normalize_alignment(&gt.alignment);
        let nodes = pa_loss(tape, alignment_emb.pa_text, alignment_emb.pa_vision, &norm, cfg.tau)?;
        total = tape.add(total, nodes.pa)?;
        breakdown.l_tpa = tape.item(nodes.tpa);
        breakdown.l_pta = tape.item(nodes.pta);
        breakdown.l_pa = tape.item(nodes.pa);
    }

    breakdown.l_total = tape.item(total);
    if !breakdown.l_total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss: {breakdown:?}")));
    }
    Ok(LossNodes { total, breakdown })
}
