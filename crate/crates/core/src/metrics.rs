//! Parsing metrics: semantic mIoU, part-based AP, PCP, and an exhaustive
//! matching oracle.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};

/// AP thresholds 0.1, 0.2, ..., 0.9.
pub fn ap_thresholds() -> [f64; 9] {
    core::array::from_fn(|i| (i + 1) as f64 / 10.0)
}

/// A predicted person: score plus a row-major part-label map (0 = not this person).
#[derive(Clone, Copy, Debug)]
pub struct Prediction<'a> {
    pub score: f64,
    pub labels: &'a [u8],
}

/// Per-category intersection and union counts accumulated over images.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticAccumulator {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl SemanticAccumulator {
    pub fn new(parts: usize) -> Self {
        SemanticAccumulator { intersection: vec![0; parts], union: vec![0; parts] }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(dim_err!("label maps differ in size: {} vs {}", pred.len(), gt.len()));
        }
        let c = self.union.len();
        if let Some(&bad) = pred.iter().chain(gt).find(|&&l| l as usize >= c) {
            return Err(dim_err!("label {bad} out of range for {c} categories"));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p == g {
                self.intersection[p as usize] += 1;
                self.union[p as usize] += 1;
            } else {
                self.union[p as usize] += 1;
                self.union[g as usize] += 1;
            }
        }
        Ok(())
    }

    /// Mean IoU over categories with a non-empty union; 1.0 when there are none.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self
            .intersection
            .iter()
            .zip(&self.union)
            .filter(|(_, &u)| u > 0)
            .map(|(&i, &u)| i as f64 / u as f64)
            .collect();
        if ious.is_empty() {
            1.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }
}

/// Mean IoU of one semantic map against another, background included.
pub fn semantic_miou(pred: &[u8], gt: &[u8], parts: usize) -> Result<f64> {
    let mut acc = SemanticAccumulator::new(parts);
    acc.add(pred, gt)?;
    Ok(acc.miou())
}

/// IoU of part `k` between two instance maps; `None` when both lack it.
pub fn part_iou(pred: &[u8], gt: &[u8], k: u8) -> Option<f64> {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (a, b) = (p == k, g == k);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Mean IoU over non-background parts present in either map; 1.0 when neither has any.
pub fn mean_part_iou(pred: &[u8], gt: &[u8], parts: usize) -> f64 {
    let ious: Vec<f64> = (1..parts as u8).filter_map(|k| part_iou(pred, gt, k)).collect();
    if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// One-to-one assignment between predictions and ground truths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// `(pred, gt, mean part IoU)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl MatchResult {
    fn from_pairs(mut pairs: Vec<(usize, usize, f64)>, np: usize, ng: usize) -> Self {
        pairs.sort_by_key(|&(p, _, _)| p);
        let unmatched_preds = (0..np).filter(|p| !pairs.iter().any(|m| m.0 == *p)).collect();
        let unmatched_gts = (0..ng).filter(|g| !pairs.iter().any(|m| m.1 == *g)).collect();
        MatchResult { pairs, unmatched_preds, unmatched_gts }
    }

    /// Per-prediction true-positive flags.
    pub fn tp_flags(&self, np: usize) -> Vec<bool> {
        let mut f = vec![false; np];
        for &(p, _, _) in &self.pairs {
            f[p] = true;
        }
        f
    }
}

/// `iou[p][g]` mean part IoU matrix.
pub fn iou_matrix(preds: &[Prediction<'_>], gts: &[&[u8]], parts: usize) -> Vec<Vec<f64>> {
    preds.iter().map(|p| gts.iter().map(|g| mean_part_iou(p.labels, g, parts)).collect()).collect()
}

/// Prediction indices by descending score, ties by index.
pub fn score_order(preds: &[Prediction<'_>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Score-ordered greedy matching on a precomputed IoU matrix: each
/// prediction takes its best still-unmatched ground truth if that IoU exceeds `t`.
pub fn greedy_match_matrix(iou: &[Vec<f64>], order: &[usize], ng: usize, t: f64) -> MatchResult {
    let mut taken = vec![false; ng];
    let mut pairs = Vec::new();
    for &p in order {
        let best = (0..ng)
            .filter(|&g| !taken[g])
            .max_by(|&a, &b| iou[p][a].partial_cmp(&iou[p][b]).unwrap_or(Ordering::Equal).then(b.cmp(&a)));
        if let Some(g) = best {
            if iou[p][g] > t {
                taken[g] = true;
                pairs.push((p, g, iou[p][g]));
            }
        }
    }
    MatchResult::from_pairs(pairs, iou.len(), ng)
}

pub fn greedy_match(preds: &[Prediction<'_>], gts: &[&[u8]], parts: usize, t: f64) -> MatchResult {
    let iou = iou_matrix(preds, gts, parts);
    greedy_match_matrix(&iou, &score_order(preds), gts.len(), t)
}

/// Largest instance count accepted by [`oracle_match`].
pub const ORACLE_MAX: usize = 8;

/// Exhaustive one-to-one assignment. Among assignments whose pairs all
/// exceed `t` it maximises the pair count, then prefers matching
/// higher-scored predictions (TP flags compared lexicographically in score
/// order), then the total IoU.
pub fn oracle_match(preds: &[Prediction<'_>], gts: &[&[u8]], parts: usize, t: f64) -> Result<MatchResult> {
    if preds.len() > ORACLE_MAX || gts.len() > ORACLE_MAX {
        return Err(contract_err!(
            "oracle handles at most {ORACLE_MAX} instances per side, got {} and {}",
            preds.len(),
            gts.len()
        ));
    }
    let iou = iou_matrix(preds, gts, parts);
    Ok(oracle_match_matrix(&iou, &score_order(preds), gts.len(), t))
}

pub fn oracle_match_matrix(iou: &[Vec<f64>], order: &[usize], ng: usize, t: f64) -> MatchResult {
    struct Best {
        count: usize,
        ranked: Vec<bool>,
        total: f64,
        pairs: Vec<(usize, usize, f64)>,
    }
    struct Search<'a> {
        iou: &'a [Vec<f64>],
        order: &'a [usize],
        t: f64,
        used: Vec<bool>,
        current: Vec<(usize, usize, f64)>,
        best: Option<Best>,
    }
    impl Search<'_> {
        fn finish(&mut self, total: f64) {
            let count = self.current.len();
            let ranked: Vec<bool> = self.order.iter().map(|&p| self.current.iter().any(|m| m.0 == p)).collect();
            let better = match &self.best {
                None => true,
                Some(b) => (count, &ranked).cmp(&(b.count, &b.ranked)).then(total.total_cmp(&b.total)) == Ordering::Greater,
            };
            if better {
                self.best = Some(Best { count, ranked, total, pairs: self.current.clone() });
            }
        }

        fn go(&mut self, p: usize, total: f64) {
            if p == self.iou.len() {
                self.finish(total);
                return;
            }
            self.go(p + 1, total);
            for g in 0..self.used.len() {
                let v = self.iou[p][g];
                if !self.used[g] && v > self.t {
                    self.used[g] = true;
                    self.current.push((p, g, v));
                    self.go(p + 1, total + v);
                    self.current.pop();
                    self.used[g] = false;
                }
            }
        }
    }
    let mut s = Search { iou, order, t, used: vec![false; ng], current: Vec::new(), best: None };
    s.go(0, 0.0);
    let pairs = s.best.map(|b| b.pairs).unwrap_or_default();
    MatchResult::from_pairs(pairs, iou.len(), ng)
}

/// All-point interpolated AP from score-sorted TP flags.
pub fn ap_from_flags(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// Part-based AP at every threshold plus their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    pub thresholds: Vec<f64>,
    pub ap: Vec<f64>,
    pub ap_vol: f64,
}

impl ApResult {
    pub fn at(&self, t: f64) -> Option<f64> {
        self.thresholds.iter().position(|&x| (x - t).abs() < 1e-9).map(|i| self.ap[i])
    }
}

/// Pools score-ranked match decisions across images.
#[derive(Clone, Debug)]
pub struct ApAccumulator {
    thresholds: Vec<f64>,
    /// Per threshold: `(score, image, rank, tp)`.
    entries: Vec<Vec<(f64, usize, usize, bool)>>,
    num_gt: usize,
    images: usize,
}

impl ApAccumulator {
    pub fn new(thresholds: &[f64]) -> Self {
        ApAccumulator {
            thresholds: thresholds.to_vec(),
            entries: vec![Vec::new(); thresholds.len()],
            num_gt: 0,
            images: 0,
        }
    }

    pub fn add(&mut self, preds: &[Prediction<'_>], gts: &[&[u8]], parts: usize) {
        let iou = iou_matrix(preds, gts, parts);
        let order = score_order(preds);
        for (ti, &t) in self.thresholds.iter().enumerate() {
            let flags = greedy_match_matrix(&iou, &order, gts.len(), t).tp_flags(preds.len());
            for (rank, &p) in order.iter().enumerate() {
                self.entries[ti].push((preds[p].score, self.images, rank, flags[p]));
            }
        }
        self.num_gt += gts.len();
        self.images += 1;
    }

    pub fn finish(&self) -> ApResult {
        let ap: Vec<f64> = self
            .entries
            .iter()
            .map(|e| {
                let mut e = e.clone();
                e.sort_by(|a, b| {
                    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
                });
                let flags: Vec<bool> = e.iter().map(|x| x.3).collect();
                ap_from_flags(&flags, self.num_gt)
            })
            .collect();
        let ap_vol = if ap.is_empty() { 0.0 } else { ap.iter().sum::<f64>() / ap.len() as f64 };
        ApResult { thresholds: self.thresholds.clone(), ap, ap_vol }
    }
}

/// AP of one image's predictions at every threshold.
pub fn average_precision_part(preds: &[Prediction<'_>], gts: &[&[u8]], parts: usize, thresholds: &[f64]) -> ApResult {
    let mut acc = ApAccumulator::new(thresholds);
    acc.add(preds, gts, parts);
    acc.finish()
}

/// Running PCP: sum of per-gt contributions and gt count.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PcpAccumulator {
    pub sum: f64,
    pub count: usize,
}

impl PcpAccumulator {
    pub fn add(&mut self, preds: &[Prediction<'_>], gts: &[&[u8]], parts: usize, t: f64) {
        let iou = iou_matrix(preds, gts, parts);
        let m = greedy_match_matrix(&iou, &score_order(preds), gts.len(), 0.0);
        for (g, gt) in gts.iter().enumerate() {
            let Some(&(p, _, _)) = m.pairs.iter().find(|x| x.1 == g) else { continue };
            let present: Vec<u8> = (1..parts as u8).filter(|&k| gt.contains(&k)).collect();
            self.sum += if present.is_empty() {
                1.0
            } else {
                let good = present.iter().filter(|&&k| part_iou(preds[p].labels, gt, k).unwrap_or(0.0) > t).count();
                good as f64 / present.len() as f64
            };
        }
        self.count += gts.len();
    }

    /// 1.0 with no ground truth.
    pub fn value(&self) -> f64 {
        if self.count == 0 {
            1.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Fraction of each ground-truth person's present parts parsed above IoU `t`, averaged.
pub fn pcp(preds: &[Prediction<'_>], gts: &[&[u8]], parts: usize, t: f64) -> f64 {
    let mut acc = PcpAccumulator::default();
    acc.add(preds, gts, parts, t);
    acc.value()
}

/// Headline numbers plus the per-threshold AP table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub ap_p_50: f64,
    pub ap_p_vol: f64,
    pub pcp_50: f64,
    pub ap_by_threshold: BTreeMap<String, f64>,
}

/// Accumulates every metric over a dataset.
#[derive(Clone, Debug)]
pub struct Evaluator {
    parts: usize,
    semantic: SemanticAccumulator,
    ap: ApAccumulator,
    pcp: PcpAccumulator,
}

impl Evaluator {
    pub fn new(parts: usize) -> Self {
        Evaluator {
            parts,
            semantic: SemanticAccumulator::new(parts),
            ap: ApAccumulator::new(&ap_thresholds()),
            pcp: PcpAccumulator::default(),
        }
    }

    /// Adds one image. The semantic prediction is the score-ordered composite of `preds`.
    pub fn add_image(&mut self, preds: &[Prediction<'_>], gts: &[&[u8]]) -> Result<()> {
        let len = gts.first().map(|g| g.len()).or(preds.first().map(|p| p.labels.len())).unwrap_or(0);
        if preds.iter().any(|p| p.labels.len() != len) || gts.iter().any(|g| g.len() != len) {
            return Err(dim_err!("instance maps in one image differ in size"));
        }
        let composite_pred = composite(preds, len);
        let mut composite_gt = vec![0u8; len];
        for g in gts {
            for (o, &v) in composite_gt.iter_mut().zip(g.iter()) {
                if v != 0 {
                    *o = v;
                }
            }
        }
        self.semantic.add(&composite_pred, &composite_gt)?;
        self.ap.add(preds, gts, self.parts);
        self.pcp.add(preds, gts, self.parts, 0.5);
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let ap = self.ap.finish();
        let ap_by_threshold = ap.thresholds.iter().zip(&ap.ap).map(|(t, a)| (alloc::format!("{t:.1}"), *a)).collect();
        MetricsReport {
            miou: self.semantic.miou(),
            ap_p_50: ap.at(0.5).unwrap_or(0.0),
            ap_p_vol: ap.ap_vol,
            pcp_50: self.pcp.value(),
            ap_by_threshold,
        }
    }
}

/// Semantic map from instances, higher scores painted last.
pub fn composite(preds: &[Prediction<'_>], len: usize) -> Vec<u8> {
    let mut order = score_order(preds);
    order.reverse();
    let mut out = vec![0u8; len];
    for p in order {
        for (o, &v) in out.iter_mut().zip(preds[p].labels) {
            if v != 0 {
                *o = v;
            }
        }
    }
    out
}
