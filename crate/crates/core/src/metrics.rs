//! Instance-segmentation scores: binary Dice, detection F1, Aggregated
//! Jaccard Index and Panoptic Quality.
//!
//! When neither mask has any foreground every score is 1.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::InstanceMask;

/// IoU a pair must exceed to count as a detection match.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub gt: u32,
    pub pred: u32,
    pub intersection: usize,
    pub union: usize,
    pub iou: f64,
}

/// Every overlapping (gt, pred) pair plus instance areas.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchTable {
    /// Sorted by `(gt, pred)`.
    pub pairs: Vec<Pair>,
    pub gt_area: HashMap<u32, usize>,
    pub pred_area: HashMap<u32, usize>,
}

fn check_dims(gt: &InstanceMask, pred: &InstanceMask) -> Result<()> {
    if gt.dims() != pred.dims() {
        return Err(Error::DimensionMismatch { expected: gt.dims(), found: pred.dims() });
    }
    Ok(())
}

impl MatchTable {
    pub fn new(gt: &InstanceMask, pred: &InstanceMask) -> Result<Self> {
        check_dims(gt, pred)?;
        let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
        let mut gt_area = HashMap::new();
        let mut pred_area = HashMap::new();
        for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
            if g != 0 {
                *gt_area.entry(g).or_insert(0) += 1;
            }
            if p != 0 {
                *pred_area.entry(p).or_insert(0) += 1;
            }
            if g != 0 && p != 0 {
                *inter.entry((g, p)).or_insert(0) += 1;
            }
        }
        let mut pairs: Vec<Pair> = inter
            .into_iter()
            .map(|((g, p), i)| {
                let union = gt_area[&g] + pred_area[&p] - i;
                Pair { gt: g, pred: p, intersection: i, union, iou: i as f64 / union as f64 }
            })
            .collect();
        pairs.sort_by_key(|p| (p.gt, p.pred));
        Ok(Self { pairs, gt_area, pred_area })
    }

    /// Pairs with IoU above [`MATCH_IOU`]. Each instance appears in at most
    /// one of them, since two such pairs sharing an instance would need the
    /// shared instance to be more than half covered twice.
    pub fn detections(&self) -> Vec<Pair> {
        self.pairs.iter().copied().filter(|p| p.iou > MATCH_IOU).collect()
    }

    /// GT labels in no detection.
    pub fn unmatched_gt(&self) -> BTreeSet<u32> {
        let hit: BTreeSet<u32> = self.detections().iter().map(|p| p.gt).collect();
        self.gt_area.keys().copied().filter(|g| !hit.contains(g)).collect()
    }

    /// Predicted labels in no detection.
    pub fn unmatched_pred(&self) -> BTreeSet<u32> {
        let hit: BTreeSet<u32> = self.detections().iter().map(|p| p.pred).collect();
        self.pred_area.keys().copied().filter(|p| !hit.contains(p)).collect()
    }

    fn both_empty(&self) -> bool {
        self.gt_area.is_empty() && self.pred_area.is_empty()
    }
}

/// `2|A∩B| / (|A|+|B|)` over foreground pixels.
pub fn dice(gt: &InstanceMask, pred: &InstanceMask) -> Result<f64> {
    check_dims(gt, pred)?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
        a += (g != 0) as usize;
        b += (p != 0) as usize;
        both += (g != 0 && p != 0) as usize;
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 })
}

/// Aggregated Jaccard Index from a prebuilt table.
///
/// GT instances are visited in ascending label order, each taking the unused
/// overlapping prediction of highest IoU (lower label on ties). Predictions
/// never taken add their area to the denominator.
pub fn aji_from_table(t: &MatchTable) -> f64 {
    if t.both_empty() {
        return 1.0;
    }
    let mut by_gt: HashMap<u32, Vec<&Pair>> = HashMap::new();
    for p in &t.pairs {
        by_gt.entry(p.gt).or_default().push(p);
    }
    let mut gts: Vec<u32> = t.gt_area.keys().copied().collect();
    gts.sort_unstable();
    let mut used = BTreeSet::new();
    let (mut num, mut den) = (0usize, 0usize);
    for g in gts {
        let best = by_gt
            .get(&g)
            .into_iter()
            .flatten()
            .filter(|p| !used.contains(&p.pred))
            .min_by(|a, b| b.iou.total_cmp(&a.iou).then(a.pred.cmp(&b.pred)));
        match best {
            Some(p) => {
                used.insert(p.pred);
                num += p.intersection;
                den += p.union;
            }
            None => den += t.gt_area[&g],
        }
    }
    den += t.pred_area.iter().filter(|(p, _)| !used.contains(p)).map(|(_, a)| a).sum::<usize>();
    num as f64 / den as f64
}

pub fn aji(gt: &InstanceMask, pred: &InstanceMask) -> Result<f64> {
    Ok(aji_from_table(&MatchTable::new(gt, pred)?))
}

/// Detection counts `(tp, fp, fn)` at IoU above [`MATCH_IOU`].
pub fn detection_counts(t: &MatchTable) -> (usize, usize, usize) {
    let tp = t.detections().len();
    (tp, t.pred_area.len() - tp, t.gt_area.len() - tp)
}

/// `(pq, dq, sq)` from a prebuilt table.
pub fn pq_from_table(t: &MatchTable) -> (f64, f64, f64) {
    if t.both_empty() {
        return (1.0, 1.0, 1.0);
    }
    let det = t.detections();
    let (tp, fp, fn_) = detection_counts(t);
    let dq = tp as f64 / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64);
    let sq = if tp == 0 { 1.0 } else { det.iter().map(|p| p.iou).sum::<f64>() / tp as f64 };
    (dq * sq, dq, sq)
}

pub fn pq(gt: &InstanceMask, pred: &InstanceMask) -> Result<(f64, f64, f64)> {
    Ok(pq_from_table(&MatchTable::new(gt, pred)?))
}

/// `2tp / (2tp + fp + fn)` at the same matching as [`pq`].
pub fn f1_detect(gt: &InstanceMask, pred: &InstanceMask) -> Result<f64> {
    let t = MatchTable::new(gt, pred)?;
    let (tp, fp, fn_) = detection_counts(&t);
    Ok(if tp + fp + fn_ == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dice: f64,
    pub f1: f64,
    pub aji: f64,
    pub pq: f64,
    pub dq: f64,
    pub sq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl EvalReport {
    pub fn new(gt: &InstanceMask, pred: &InstanceMask) -> Result<Self> {
        let t = MatchTable::new(gt, pred)?;
        let (tp, fp, fn_) = detection_counts(&t);
        let (pq, dq, sq) = pq_from_table(&t);
        let f1 = if tp + fp + fn_ == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        Ok(Self { dice: dice(gt, pred)?, f1, aji: aji_from_table(&t), pq, dq, sq, tp, fp, fn_ })
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        format!(
            "dice={:.6}\nf1={:.6}\naji={:.6}\npq={:.6}\ndq={:.6}\nsq={:.6}\ntp={}\nfp={}\nfn={}\n",
            self.dice, self.f1, self.aji, self.pq, self.dq, self.sq, self.tp, self.fp, self.fn_
        )
    }

    fn scores(&self) -> [f64; 6] {
        [self.dice, self.f1, self.aji, self.pq, self.dq, self.sq]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, std }
    }
}

/// Mean and spread of each score over a set of tiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub tiles: usize,
    pub dice: Summary,
    pub f1: Summary,
    pub aji: Summary,
    pub pq: Summary,
    pub dq: Summary,
    pub sq: Summary,
}

impl Aggregate {
    /// `None` for an empty slice.
    pub fn of(reports: &[EvalReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let col = |k: usize| Summary::of(&reports.iter().map(|r| r.scores()[k]).collect::<Vec<_>>());
        Some(Self { tiles: reports.len(), dice: col(0), f1: col(1), aji: col(2), pq: col(3), dq: col(4), sq: col(5) })
    }

    pub fn to_kv(&self) -> String {
        let mut s = format!("tiles={}\n", self.tiles);
        for (k, v) in [("dice", self.dice), ("f1", self.f1), ("aji", self.aji), ("pq", self.pq), ("dq", self.dq), ("sq", self.sq)] {
            s += &format!("{k}_mean={:.6}\n{k}_std={:.6}\n", v.mean, v.std);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, labels: &[u32]) -> InstanceMask {
        InstanceMask::new(w, h, labels.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_toy() {
        let gt = mask(2, 2, &[1, 0, 1, 0]);
        let pred = mask(2, 2, &[1, 1, 0, 0]);
        assert_eq!(dice(&gt, &pred).unwrap(), 0.5);
        assert!((aji(&gt, &pred).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let r = EvalReport::new(&gt, &pred).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (0, 1, 1));
        assert_eq!(r.pq, 0.0);
    }

    #[test]
    fn exact_match_plus_spurious() {
        let gt = mask(4, 1, &[1, 1, 0, 0]);
        let pred = mask(4, 1, &[5, 5, 0, 2]);
        let (p, d, s) = pq(&gt, &pred).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s, 1.0);
        assert!((p - 2.0 / 3.0).abs() < 1e-15);
        assert!((f1_detect(&gt, &pred).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn trivial_cases() {
        let gt = mask(3, 1, &[1, 2, 2]);
        let empty = InstanceMask::empty(3, 1);
        let r = EvalReport::new(&gt, &gt).unwrap();
        assert_eq!(r.scores(), [1.0; 6]);
        assert_eq!(aji(&gt, &empty).unwrap(), 0.0);
        assert_eq!(f1_detect(&gt, &empty).unwrap(), 0.0);
        assert_eq!(dice(&gt, &mask(3, 1, &[0, 0, 0])).unwrap(), 0.0);
        assert_eq!(EvalReport::new(&empty, &empty).unwrap().scores(), [1.0; 6]);
        assert!(matches!(dice(&gt, &InstanceMask::empty(1, 3)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn aji_ties_go_to_lower_pred() {
        // GT covers both preds equally; the lower label is taken, the other
        // pred stays unused and inflates the denominator.
        let gt = mask(4, 1, &[1, 1, 1, 1]);
        let pred = mask(4, 1, &[7, 7, 3, 3]);
        let t = MatchTable::new(&gt, &pred).unwrap();
        assert!((aji_from_table(&t) - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(t.unmatched_gt().into_iter().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn aggregate_of_toy_tiles() {
        let gt = mask(2, 2, &[1, 0, 1, 0]);
        let a = EvalReport::new(&gt, &mask(2, 2, &[1, 1, 0, 0])).unwrap();
        let b = EvalReport::new(&gt, &gt).unwrap();
        let agg = Aggregate::of(&[a, b]).unwrap();
        assert!((agg.aji.mean - 2.0 / 3.0).abs() < 1e-15);
        assert!((agg.aji.std - 1.0 / 3.0).abs() < 1e-15);
        assert!(Aggregate::of(&[]).is_none());
        assert!(a.to_kv().contains("aji=0.333333\n"));
    }
}
