//! Binary cross-entropy and IoU losses and the two stage objectives.
//!
//! Everything here is evaluated in `f64`. Probability-level functions
//! follow the textbook definitions; the `*_logits` variants additionally
//! return gradients with respect to pre-sigmoid logits for training.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Probabilities are clamped to `[EPS, 1 − EPS]` inside the logarithms.
pub const BCE_EPS: f64 = 1e-7;
/// Below this union the IoU loss is defined as 0 (both maps empty).
pub const IOU_EMPTY: f64 = 1e-7;
/// Weight of the edge-head cross-entropy in the second-stage objective.
pub const EDGE_WEIGHT: f64 = 4.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

fn same_len(g: &[f64], p: &[f64]) -> Result<()> {
    ensure!(g.len() == p.len(), "target has {} elements, prediction has {}", g.len(), p.len());
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// `−Σ[g·ln p + (1−g)·ln(1−p)]`, divided by the element count for `Mean`.
/// Targets may be soft (any value in `[0, 1]`).
pub fn bce_loss(g: &[f64], p: &[f64], reduction: Reduction) -> Result<f64> {
    same_len(g, p)?;
    let sum: f64 = g
        .iter()
        .zip(p)
        .map(|(&g, &p)| {
            let p = clamp_prob(p);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(reduce(sum, g.len(), reduction))
}

/// Gradient of [`bce_loss`] with respect to `p` (zero where `p` is clamped).
pub fn bce_grad(g: &[f64], p: &[f64], reduction: Reduction) -> Result<Vec<f64>> {
    same_len(g, p)?;
    let scale = reduce(1.0, g.len(), reduction);
    Ok(g.iter()
        .zip(p)
        .map(|(&g, &p)| if p < BCE_EPS || p > 1.0 - BCE_EPS { 0.0 } else { scale * (-g / p + (1.0 - g) / (1.0 - p)) })
        .collect())
}

fn reduce(sum: f64, n: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Sum => sum,
        Reduction::Mean if n == 0 => 0.0,
        Reduction::Mean => sum / n as f64,
    }
}

fn iou_parts(g: &[f64], p: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&g, &p) in g.iter().zip(p) {
        inter += g * p;
        union += g + p - g * p;
    }
    (inter, union)
}

/// `1 − Σ(g·p) / Σ(g + p − g·p)`; 0 when the union vanishes.
pub fn iou_loss(g: &[f64], p: &[f64]) -> Result<f64> {
    same_len(g, p)?;
    let (inter, union) = iou_parts(g, p);
    Ok(if union < IOU_EMPTY { 0.0 } else { 1.0 - inter / union })
}

/// Gradient of [`iou_loss`] with respect to `p`.
pub fn iou_grad(g: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    same_len(g, p)?;
    let (inter, union) = iou_parts(g, p);
    if union < IOU_EMPTY {
        return Ok(vec![0.0; g.len()]);
    }
    let u2 = union * union;
    Ok(g.iter().map(|&g| -(g * union - inter * (1.0 - g)) / u2).collect())
}

/// A loss total with its named components.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossValue {
    /// Builds the value from `(name, weight, component)` triples.
    pub fn weighted(terms: &[(&str, f64, f64)]) -> Self {
        let mut components = BTreeMap::new();
        let mut total = 0.0;
        for &(name, weight, value) in terms {
            components.insert(name.to_string(), value);
            total += weight * value;
        }
        LossValue { total, components }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }

    /// Element-wise mean of several values with identical component names.
    pub fn mean(values: &[LossValue]) -> LossValue {
        let mut out = LossValue::default();
        if values.is_empty() {
            return out;
        }
        let n = values.len() as f64;
        for v in values {
            out.total += v.total / n;
            for (k, c) in &v.components {
                *out.components.entry(k.clone()).or_insert(0.0) += c / n;
            }
        }
        out
    }
}

/// `ℓ_IoU(g, s) + ℓ_BCE(g, s)` on a single liver map (mean reduction).
pub fn stage1_loss(g: &[f64], s: &[f64]) -> Result<LossValue> {
    let iou = iou_loss(g, s)?;
    let bce = bce_loss(g, s, Reduction::Mean)?;
    Ok(LossValue::weighted(&[("iou", 1.0, iou), ("bce", 1.0, bce)]))
}

/// Two-channel (liver, tumor) maps of one sample.
pub type Channels<'a> = [&'a [f64]; 2];

fn channel_mean(f: impl Fn(usize) -> Result<f64>) -> Result<f64> {
    Ok((f(0)? + f(1)?) / 2.0)
}

/// Second-stage objective on probability maps:
/// `ℓ_IoU(g_m,s¹) + ℓ_BCE(g_m,s¹) + ℓ_IoU(g_m,s²) + ℓ_BCE(g_m,s²) + 4·ℓ_BCE(g_e,e)`,
/// each term averaged over the two channels. Terms for absent outputs
/// (ablation configurations without an edge branch) are omitted.
pub fn stage2_loss(
    g_m: Channels,
    g_e: Option<Channels>,
    s1: Channels,
    e: Option<Channels>,
    s2: Option<Channels>,
) -> Result<LossValue> {
    let mut terms = vec![
        ("iou_s1", 1.0, channel_mean(|c| iou_loss(g_m[c], s1[c]))?),
        ("bce_s1", 1.0, channel_mean(|c| bce_loss(g_m[c], s1[c], Reduction::Mean))?),
    ];
    if let Some(s2) = s2 {
        terms.push(("iou_s2", 1.0, channel_mean(|c| iou_loss(g_m[c], s2[c]))?));
        terms.push(("bce_s2", 1.0, channel_mean(|c| bce_loss(g_m[c], s2[c], Reduction::Mean))?));
    }
    if let Some(e) = e {
        let Some(g_e) = g_e else {
            return Err(crate::Error::Validation("edge prediction given without edge targets".into()));
        };
        terms.push(("bce_edge", EDGE_WEIGHT, channel_mean(|c| bce_loss(g_e[c], e[c], Reduction::Mean))?));
    }
    Ok(LossValue::weighted(&terms))
}

/// Loss terms of one map evaluated from logits, with the gradient of
/// `iou_weight·IoU + bce_weight·BCE` with respect to the logits.
#[derive(Clone, Debug)]
pub struct MapLoss {
    pub iou: f64,
    pub bce: f64,
    pub grad: Vec<f32>,
}

/// Sigmoid in `f64` so probabilities only saturate for |x| > 36.
pub fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Evaluates IoU and mean BCE of `sigmoid(logits)` against `target`.
///
/// The BCE gradient uses `∂BCE/∂x = (σ(x) − g)/n`, the derivative of the
/// unclamped loss, so confidently wrong pixels keep a gradient even where
/// the clamped value saturates.
pub fn map_loss_logits(target: &[f32], logits: &[f32], iou_weight: f64, bce_weight: f64) -> Result<MapLoss> {
    ensure!(target.len() == logits.len(), "target has {} elements, logits have {}", target.len(), logits.len());
    let g: Vec<f64> = target.iter().map(|&v| v as f64).collect();
    let p: Vec<f64> = logits.iter().map(|&x| sigmoid64(x as f64)).collect();
    let bce = bce_loss(&g, &p, Reduction::Mean)?;
    let n = g.len().max(1) as f64;
    let (iou, iou_dp) =
        if iou_weight != 0.0 { (iou_loss(&g, &p)?, iou_grad(&g, &p)?) } else { (0.0, vec![0.0; g.len()]) };
    let grad = g
        .iter()
        .zip(&p)
        .zip(&iou_dp)
        .map(|((&g, &p), &d_iou)| {
            let sig = p * (1.0 - p);
            (iou_weight * d_iou * sig + bce_weight * (p - g) / n) as f32
        })
        .collect();
    Ok(MapLoss { iou, bce, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn bce_examples() {
        let half = vec![0.5; 16];
        assert!((bce_loss(&half, &half, Reduction::Mean).unwrap() - LN2).abs() < 1e-12);
        assert!((bce_loss(&[1.0], &[0.25], Reduction::Mean).unwrap() - 4f64.ln()).abs() < 1e-12);
        let g = [0.0, 1.0, 1.0, 0.0];
        let p: Vec<f64> = g.iter().map(|&v| clamp_prob(v)).collect();
        let bound = 2.0 * BCE_EPS * (1.0 / BCE_EPS).ln();
        assert!(bce_loss(&g, &p, Reduction::Mean).unwrap() <= bound);
        assert!(bce_loss(&g, &p, Reduction::Sum).unwrap() <= 4.0 * bound);
    }

    #[test]
    fn bce_sum_is_mean_times_count() {
        let g = [0.2, 0.9, 0.0];
        let p = [0.3, 0.6, 0.1];
        let mean = bce_loss(&g, &p, Reduction::Mean).unwrap();
        let sum = bce_loss(&g, &p, Reduction::Sum).unwrap();
        assert!((sum - 3.0 * mean).abs() < 1e-12);
    }

    #[test]
    fn iou_examples() {
        let g = [1.0, 0.0, 1.0, 1.0];
        assert_eq!(iou_loss(&g, &g).unwrap(), 0.0);
        assert_eq!(iou_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((iou_loss(&[1.0; 4], &[0.5; 4]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(iou_loss(&[0.0; 4], &[0.0; 4]).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_a_validation_error() {
        assert!(bce_loss(&[0.0; 3], &[0.5; 4], Reduction::Mean).is_err());
        assert!(iou_loss(&[0.0; 3], &[0.5; 4]).is_err());
    }

    #[test]
    fn stage1_examples() {
        let v = stage1_loss(&[1.0; 4], &[0.5; 4]).unwrap();
        assert!((v.total - (0.5 + LN2)).abs() < 1e-12);
        let empty = stage1_loss(&[0.0; 4], &[0.0; 4]).unwrap();
        assert!(empty.total < 1e-5);
        let g = [1.0, 0.0, 1.0, 0.0];
        let s: Vec<f64> = g.iter().map(|&v| clamp_prob(v)).collect();
        let v = stage1_loss(&g, &s).unwrap();
        assert!(v.get("iou").unwrap() < 1e-6);
        assert!(v.total <= 2.0 * BCE_EPS * (1.0 / BCE_EPS).ln() + 1e-6);
    }

    #[test]
    fn stage2_total_is_weighted_sum() {
        let a = [0.1, 0.8, 0.3, 0.0];
        let b = [0.0, 1.0, 1.0, 0.0];
        let c = [0.4, 0.6, 0.7, 0.2];
        let v = stage2_loss([&b, &a], Some([&a, &b]), [&c, &a], Some([&c, &c]), Some([&a, &c])).unwrap();
        let sum = v.get("iou_s1").unwrap()
            + v.get("bce_s1").unwrap()
            + v.get("iou_s2").unwrap()
            + v.get("bce_s2").unwrap()
            + 4.0 * v.get("bce_edge").unwrap();
        assert!((v.total - sum).abs() < 1e-12);
    }

    #[test]
    fn stage2_isolates_edge_head() {
        let gm = [1.0, 0.0, 1.0, 1.0];
        let ge = [1.0, 0.0, 0.5, 0.25];
        let perfect: Vec<f64> = gm.iter().map(|&v| clamp_prob(v)).collect();
        let half = [0.5; 4];
        let v = stage2_loss(
            [&gm, &gm],
            Some([&ge, &ge]),
            [&perfect, &perfect],
            Some([&half, &half]),
            Some([&perfect, &perfect]),
        )
        .unwrap();
        // BCE of any target against 0.5 is ln 2 per pixel.
        assert!((v.get("bce_edge").unwrap() - LN2).abs() < 1e-12);
        assert!((v.total - 4.0 * LN2).abs() < 1e-5);
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, p: &[f64], i: usize, h: f64) -> f64 {
        let mut a = p.to_vec();
        let mut b = p.to_vec();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn gradients_match_central_differences(
            g in prop::collection::vec(0.0f64..=1.0, 64),
            p in prop::collection::vec(0.05f64..=0.95, 64),
        ) {
            let h = 1e-5;
            let gb = bce_grad(&g, &p, Reduction::Mean).unwrap();
            let gi = iou_grad(&g, &p).unwrap();
            for i in 0..64 {
                let nb = central_diff(|q| bce_loss(&g, q, Reduction::Mean).unwrap(), &p, i, h);
                let ni = central_diff(|q| iou_loss(&g, q).unwrap(), &p, i, h);
                prop_assert!((gb[i] - nb).abs() <= 1e-4 * gb[i].abs().max(nb.abs()).max(1e-6));
                prop_assert!((gi[i] - ni).abs() <= 1e-4 * gi[i].abs().max(ni.abs()).max(1e-6));
            }
        }

        #[test]
        fn iou_lies_in_unit_interval(
            g in prop::collection::vec(0.0f64..=1.0, 1..40),
            seed in 0.0f64..=1.0,
        ) {
            let p: Vec<f64> = g.iter().enumerate().map(|(i, _)| ((i as f64 + 1.0) * seed).fract()).collect();
            let l = iou_loss(&g, &p).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
        }

        #[test]
        fn iou_non_increasing_in_scale(mask in prop::collection::vec(prop::bool::ANY, 4..40)) {
            let g: Vec<f64> = mask.iter().map(|&b| b as u8 as f64).collect();
            let mut last = f64::INFINITY;
            for step in 1..=10 {
                let a = step as f64 / 10.0;
                let p: Vec<f64> = g.iter().map(|v| a * v).collect();
                let l = iou_loss(&g, &p).unwrap();
                prop_assert!(l <= last + 1e-12);
                last = l;
            }
        }
    }

    #[test]
    fn logit_gradients_match_chain_rule() {
        let target = [1.0f32, 0.0, 0.7, 0.2, 1.0, 0.0];
        let logits = [0.3f32, -1.2, 2.0, -0.4, 1.1, 0.8];
        let m = map_loss_logits(&target, &logits, 1.0, 1.0).unwrap();
        let f = |x: &[f64]| {
            let g: Vec<f64> = target.iter().map(|&v| v as f64).collect();
            let p: Vec<f64> = x.iter().map(|&v| sigmoid64(v)).collect();
            iou_loss(&g, &p).unwrap() + bce_loss(&g, &p, Reduction::Mean).unwrap()
        };
        let x: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        for i in 0..logits.len() {
            let n = central_diff(f, &x, i, 1e-5);
            assert!((m.grad[i] as f64 - n).abs() < 1e-5, "{i}: {} vs {n}", m.grad[i]);
        }
    }
}
