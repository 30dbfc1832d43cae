//! Volume-level segmentation metrics: Dice per case, global Dice and the
//! tumor burden RMSE.

use ndarray::{ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::LabelVolume;

/// Overlap counts `(|a ∩ b|, |a|, |b|)` of two binary volumes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub intersection: u64,
    pub pred: u64,
    pub truth: u64,
}

impl Overlap {
    pub fn dice(&self) -> f64 {
        let denom = self.pred + self.truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }
}

impl std::ops::Add for Overlap {
    type Output = Overlap;
    fn add(self, o: Overlap) -> Overlap {
        Overlap {
            intersection: self.intersection + o.intersection,
            pred: self.pred + o.pred,
            truth: self.truth + o.truth,
        }
    }
}

pub fn overlap(pred: ArrayView3<u8>, truth: ArrayView3<u8>) -> Result<Overlap> {
    if pred.dim() != truth.dim() {
        return Err(Error::Validation(format!(
            "prediction shape {:?} differs from ground truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let mut o = Overlap::default();
    Zip::from(pred).and(truth).for_each(|&p, &t| {
        let (p, t) = (p != 0, t != 0);
        o.intersection += u64::from(p && t);
        o.pred += u64::from(p);
        o.truth += u64::from(t);
    });
    Ok(o)
}

/// `2|a∩b| / (|a|+|b|)`, 1 when both are empty.
pub fn dice(a: ArrayView3<u8>, b: ArrayView3<u8>) -> Result<f64> {
    Ok(overlap(a, b)?.dice())
}

fn nonempty<T>(cases: &[T]) -> Result<()> {
    if cases.is_empty() {
        return Err(Error::Validation("metric over an empty case list".into()));
    }
    Ok(())
}

/// Unweighted mean of per-case Dice scores.
pub fn dice_per_case(cases: &[Overlap]) -> Result<f64> {
    nonempty(cases)?;
    Ok(cases.iter().map(Overlap::dice).sum::<f64>() / cases.len() as f64)
}

/// Dice over voxel counts pooled across cases.
pub fn global_dice(cases: &[Overlap]) -> Result<f64> {
    nonempty(cases)?;
    Ok(cases.iter().fold(Overlap::default(), |a, &b| a + b).dice())
}

/// Tumor voxels over liver voxels; 0 for an empty liver.
pub fn tumor_burden(labels: ArrayView3<u8>) -> f64 {
    let liver = labels.iter().filter(|&&l| l >= 1).count();
    let tumor = labels.iter().filter(|&&l| l == 2).count();
    if liver == 0 {
        0.0
    } else {
        tumor as f64 / liver as f64
    }
}

/// Root-mean-square of `pred − truth` over `(pred, truth)` burden pairs.
pub fn tumor_burden_rmse(burdens: &[(f64, f64)]) -> Result<f64> {
    nonempty(burdens)?;
    let ss: f64 = burdens.iter().map(|(p, t)| (p - t).powi(2)).sum();
    Ok((ss / burdens.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice_liver: f64,
    pub dice_tumor: f64,
    pub burden_pred: f64,
    pub burden_gt: f64,
    pub liver: Overlap,
    pub tumor: Overlap,
}

impl CaseMetrics {
    pub fn evaluate(pred: &LabelVolume, truth: &LabelVolume) -> Result<Self> {
        let liver = overlap(pred.liver_mask().view(), truth.liver_mask().view())?;
        let tumor = overlap(pred.tumor_mask().view(), truth.tumor_mask().view())?;
        Ok(CaseMetrics {
            case_id: truth.case_id.clone(),
            dice_liver: liver.dice(),
            dice_tumor: tumor.dice(),
            burden_pred: tumor_burden(pred.labels.view()),
            burden_gt: tumor_burden(truth.labels.view()),
            liver,
            tumor,
        })
    }
}

/// Headline numbers over a set of cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_cases: usize,
    pub liver_dice_per_case: f64,
    pub liver_global_dice: f64,
    pub tumor_dice_per_case: f64,
    pub tumor_global_dice: f64,
    pub tumor_burden_rmse: f64,
}

pub fn summarize(cases: &[CaseMetrics]) -> Result<Summary> {
    nonempty(cases)?;
    let liver: Vec<Overlap> = cases.iter().map(|c| c.liver).collect();
    let tumor: Vec<Overlap> = cases.iter().map(|c| c.tumor).collect();
    let burdens: Vec<(f64, f64)> = cases.iter().map(|c| (c.burden_pred, c.burden_gt)).collect();
    Ok(Summary {
        n_cases: cases.len(),
        liver_dice_per_case: dice_per_case(&liver)?,
        liver_global_dice: global_dice(&liver)?,
        tumor_dice_per_case: dice_per_case(&tumor)?,
        tumor_global_dice: global_dice(&tumor)?,
        tumor_burden_rmse: tumor_burden_rmse(&burdens)?,
    })
}

/// Comma-separated per-case table.
pub fn cases_csv(cases: &[CaseMetrics]) -> String {
    let mut s = String::from("case_id,dice_liver,dice_tumor,burden_pred,burden_gt\n");
    for c in cases {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            c.case_id, c.dice_liver, c.dice_tumor, c.burden_pred, c.burden_gt
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(i: u64, p: u64, t: u64) -> Overlap {
        Overlap { intersection: i, pred: p, truth: t }
    }

    #[test]
    fn dice_conventions() {
        assert_eq!(ov(0, 0, 0).dice(), 1.0);
        assert_eq!(ov(0, 3, 5).dice(), 0.0);
        assert_eq!(ov(2, 4, 4).dice(), 0.5);
    }

    #[test]
    fn empty_lists_are_rejected() {
        assert!(dice_per_case(&[]).is_err());
        assert!(global_dice(&[]).is_err());
        assert!(tumor_burden_rmse(&[]).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert!((tumor_burden_rmse(&[(0.3, 0.1)]).unwrap() - 0.2).abs() < 1e-12);
        assert!((tumor_burden_rmse(&[(0.2, 0.1), (0.0, 0.1)]).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(tumor_burden_rmse(&[(0.25, 0.25)]).unwrap(), 0.0);
    }
}
