//! Per-class IoU and Dice in exact rational arithmetic.

use num_rational::Rational64;
use num_traits::{ToPrimitive, Zero};

use super::mask::Mask;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub intersection: u64,
    pub predicted: u64,
    pub truth: u64,
}

impl ClassCounts {
    /// `None` when the union is empty.
    pub fn iou(&self) -> Option<Rational64> {
        let union = self.predicted + self.truth - self.intersection;
        (union > 0).then(|| Rational64::new(self.intersection as i64, union as i64))
    }

    /// `None` when both sets are empty.
    pub fn dice(&self) -> Option<Rational64> {
        let denom = self.predicted + self.truth;
        (denom > 0).then(|| Rational64::new(2 * self.intersection as i64, denom as i64))
    }
}

pub fn class_counts(pred: &Mask, gt: &Mask, classes: usize) -> Result<Vec<ClassCounts>> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(
            "metrics",
            format!("prediction {}x{} vs truth {}x{}", pred.height(), pred.width(), gt.height(), gt.width()),
        ));
    }
    pred.check_classes(classes)?;
    gt.check_classes(classes)?;
    let mut counts = vec![ClassCounts::default(); classes];
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        counts[p as usize].predicted += 1;
        counts[g as usize].truth += 1;
        if p == g {
            counts[p as usize].intersection += 1;
        }
    }
    Ok(counts)
}

/// Scores of one prediction/truth pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameScores {
    pub iou: Vec<Option<Rational64>>,
    pub dice: Vec<Option<Rational64>>,
    pub include_background: bool,
}

fn mean_of(values: &[Option<Rational64>], skip_background: bool) -> Option<Rational64> {
    let kept: Vec<Rational64> =
        values.iter().enumerate().filter(|(c, _)| !(skip_background && *c == 0)).filter_map(|(_, v)| *v).collect();
    if kept.is_empty() {
        return None;
    }
    let sum = kept.iter().fold(Rational64::zero(), |a, b| a + b);
    Some(sum / Rational64::from_integer(kept.len() as i64))
}

impl FrameScores {
    pub fn miou(&self) -> Option<Rational64> {
        mean_of(&self.iou, !self.include_background)
    }

    pub fn mdice(&self) -> Option<Rational64> {
        mean_of(&self.dice, !self.include_background)
    }
}

pub fn frame_scores(pred: &Mask, gt: &Mask, classes: usize, include_background: bool) -> Result<FrameScores> {
    let counts = class_counts(pred, gt, classes)?;
    Ok(FrameScores {
        iou: counts.iter().map(ClassCounts::iou).collect(),
        dice: counts.iter().map(ClassCounts::dice).collect(),
        include_background,
    })
}

/// Mean IoU over scored classes of one pair.
pub fn miou(pred: &Mask, gt: &Mask, classes: usize) -> Result<Option<Rational64>> {
    Ok(frame_scores(pred, gt, classes, false)?.miou())
}

pub fn mdice(pred: &Mask, gt: &Mask, classes: usize) -> Result<Option<Rational64>> {
    Ok(frame_scores(pred, gt, classes, false)?.mdice())
}

/// Dataset-level summary: each frame contributes its class mean; per-class
/// values average over the frames where the class is scored.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub class_iou: Vec<Option<f64>>,
    pub class_dice: Vec<Option<f64>>,
    pub miou: f64,
    pub mdice: f64,
    pub frames: usize,
}

#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    classes: usize,
    include_background: bool,
    iou_sum: Vec<f64>,
    iou_n: Vec<usize>,
    dice_sum: Vec<f64>,
    dice_n: Vec<usize>,
    miou_sum: f64,
    mdice_sum: f64,
    scored: usize,
    frames: usize,
}

fn to_f64(r: Rational64) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

impl MetricAccumulator {
    pub fn new(classes: usize, include_background: bool) -> Self {
        MetricAccumulator {
            classes,
            include_background,
            iou_sum: vec![0.0; classes],
            iou_n: vec![0; classes],
            dice_sum: vec![0.0; classes],
            dice_n: vec![0; classes],
            miou_sum: 0.0,
            mdice_sum: 0.0,
            scored: 0,
            frames: 0,
        }
    }

    pub fn add(&mut self, pred: &Mask, gt: &Mask) -> Result<FrameScores> {
        let s = frame_scores(pred, gt, self.classes, self.include_background)?;
        for c in 0..self.classes {
            if let Some(v) = s.iou[c] {
                self.iou_sum[c] += to_f64(v);
                self.iou_n[c] += 1;
            }
            if let Some(v) = s.dice[c] {
                self.dice_sum[c] += to_f64(v);
                self.dice_n[c] += 1;
            }
        }
        if let (Some(i), Some(d)) = (s.miou(), s.mdice()) {
            self.miou_sum += to_f64(i);
            self.mdice_sum += to_f64(d);
            self.scored += 1;
        }
        self.frames += 1;
        Ok(s)
    }

    pub fn finish(&self) -> Metrics {
        let avg = |sum: &[f64], n: &[usize]| -> Vec<Option<f64>> {
            sum.iter().zip(n).map(|(&s, &n)| (n > 0).then(|| s / n as f64)).collect()
        };
        let denom = self.scored.max(1) as f64;
        Metrics {
            class_iou: avg(&self.iou_sum, &self.iou_n),
            class_dice: avg(&self.dice_sum, &self.dice_n),
            miou: if self.scored > 0 { self.miou_sum / denom } else { 0.0 },
            mdice: if self.scored > 0 { self.mdice_sum / denom } else { 0.0 },
            frames: self.frames,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(a: i64, b: i64) -> Rational64 {
        Rational64::new(a, b)
    }

    #[test]
    fn half_covered_class() {
        let gt = Mask::new(1, 4, vec![1, 1, 1, 1]).unwrap();
        let pred = Mask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let s = frame_scores(&pred, &gt, 2, false).unwrap();
        assert_eq!(s.iou[1], Some(r(1, 2)));
        assert_eq!(s.dice[1], Some(r(2, 3)));
        assert_eq!(s.miou(), Some(r(1, 2)));
    }

    #[test]
    fn overflowing_label_rejected() {
        let a = Mask::new(1, 1, vec![5]).unwrap();
        assert!(frame_scores(&a, &a, 4, false).is_err());
    }
}
