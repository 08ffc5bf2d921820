//! Pixel-level evaluation: confusion counts, precision, recall, DICE, MSE,
//! precision-recall sweeps and DICE-maximising threshold search.
//!
//! Conventions for empty denominators: precision is 1 when nothing is
//! predicted, recall is 1 when the ground truth is empty, DICE is 1 when both
//! masks are empty. PR curves pool counts over all images (micro average);
//! DICE and MSE are computed per image and then averaged (macro average).

use serde::{Deserialize, Serialize};

use crate::types::{binarize, same_shape, MaskTensor, ProbMap};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

pub fn confusion(pred: &MaskTensor, g: &MaskTensor) -> Result<ConfusionCounts> {
    same_shape((g.height(), g.width()), (pred.height(), pred.width()))?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(g.data()) {
        match (p != 0.0, t != 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    if c.tp + c.fp == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    }
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    if c.tp + c.fn_ == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    }
}

pub fn dice_from_counts(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

pub fn dice(pred: &MaskTensor, g: &MaskTensor) -> Result<f64> {
    Ok(dice_from_counts(&confusion(pred, g)?))
}

/// Per-image mean squared error between a probability map and its mask.
pub fn mse_metric(p: &ProbMap, g: &MaskTensor) -> Result<f64> {
    same_shape((g.height(), g.width()), (p.height(), p.width()))?;
    let s: f64 = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    Ok(s / p.len() as f64)
}

/// Mean over images of the per-image MSE.
pub fn mean_mse(probs: &[ProbMap], gts: &[MaskTensor]) -> Result<f64> {
    check_aligned(probs, gts)?;
    let total: f64 = probs
        .iter()
        .zip(gts)
        .map(|(p, g)| mse_metric(p, g))
        .sum::<Result<f64>>()?;
    Ok(total / probs.len() as f64)
}

/// Mean per-image DICE after thresholding at `t`.
pub fn mean_dice(probs: &[ProbMap], gts: &[MaskTensor], t: f64) -> Result<f64> {
    let per = per_image_dice(probs, gts, t)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn per_image_dice(probs: &[ProbMap], gts: &[MaskTensor], t: f64) -> Result<Vec<f64>> {
    check_aligned(probs, gts)?;
    probs.iter().zip(gts).map(|(p, g)| dice(&binarize(p, t)?, g)).collect()
}

fn check_aligned(probs: &[ProbMap], gts: &[MaskTensor]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::EmptyInput("probability maps"));
    }
    if probs.len() != gts.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} ground-truth masks", probs.len()),
            found: format!("{}", gts.len()),
        });
    }
    for (p, g) in probs.iter().zip(gts) {
        same_shape((g.height(), g.width()), (p.height(), p.width()))?;
    }
    Ok(())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("threshold grid"));
    }
    if let Some(&t) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidThreshold(t));
    }
    Ok(())
}

/// Confusion counts of one image at every threshold of an ascending grid,
/// in one pass over the pixels.
fn sweep(p: &ProbMap, g: &MaskTensor, grid: &[f64]) -> Vec<ConfusionCounts> {
    // hist[k]: pixels positive at exactly the first k thresholds
    let n = grid.len();
    let mut pos_hist = vec![0u64; n + 1];
    let mut neg_hist = vec![0u64; n + 1];
    for (&v, &t) in p.data().iter().zip(g.data()) {
        let v = f64::from(v);
        let k = grid.partition_point(|&th| th <= v);
        if t != 0.0 {
            pos_hist[k] += 1;
        } else {
            neg_hist[k] += 1;
        }
    }
    let gt_pos: u64 = pos_hist.iter().sum();
    let gt_neg: u64 = neg_hist.iter().sum();
    let mut out = vec![ConfusionCounts::default(); n];
    let (mut tp, mut fp) = (0u64, 0u64);
    for j in (0..n).rev() {
        tp += pos_hist[j + 1];
        fp += neg_hist[j + 1];
        out[j] = ConfusionCounts {
            tp,
            fp,
            fn_: gt_pos - tp,
            tn: gt_neg - fp,
        };
    }
    out
}

fn sorted_grid(grid: &[f64]) -> Vec<f64> {
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// `{0.00, 0.01, ..., 1.00}`.
pub fn default_threshold_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Micro-averaged precision/recall at each threshold.
pub fn pr_curve(probs: &[ProbMap], gts: &[MaskTensor], thresholds: &[f64]) -> Result<Vec<PRPoint>> {
    check_aligned(probs, gts)?;
    check_grid(thresholds)?;
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidConfig("PR thresholds must be ascending".into()));
    }
    let mut pooled = vec![ConfusionCounts::default(); thresholds.len()];
    for (p, g) in probs.iter().zip(gts) {
        for (acc, c) in pooled.iter_mut().zip(sweep(p, g, thresholds)) {
            *acc += c;
        }
    }
    Ok(thresholds
        .iter()
        .zip(&pooled)
        .map(|(&threshold, c)| PRPoint {
            threshold,
            precision: precision(c),
            recall: recall(c),
        })
        .collect())
}

/// Mean per-image DICE at every grid value (grid returned sorted, deduped).
pub fn dice_sweep(probs: &[ProbMap], gts: &[MaskTensor], grid: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_aligned(probs, gts)?;
    check_grid(grid)?;
    let grid = sorted_grid(grid);
    let mut sums = vec![0.0; grid.len()];
    for (p, g) in probs.iter().zip(gts) {
        for (s, c) in sums.iter_mut().zip(sweep(p, g, &grid)) {
            *s += dice_from_counts(&c);
        }
    }
    let n = probs.len() as f64;
    Ok((grid, sums.into_iter().map(|s| s / n).collect()))
}

/// Grid value maximising mean per-image DICE; ties go to the smallest value.
pub fn best_threshold(probs: &[ProbMap], gts: &[MaskTensor], grid: &[f64]) -> Result<f64> {
    let (grid, scores) = dice_sweep(probs, gts, grid)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(grid[best])
}

/// Model-level scores on one evaluation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dice: f64,
    pub mse: f64,
    pub best_threshold: f64,
    pub pr_curve: Vec<PRPoint>,
    pub per_image_dice: Vec<f64>,
}

/// Scores `probs` at a threshold chosen elsewhere (normally on the training
/// split).
pub fn evaluate(probs: &[ProbMap], gts: &[MaskTensor], threshold: f64, pr_grid: &[f64]) -> Result<EvalReport> {
    let per_image_dice = per_image_dice(probs, gts, threshold)?;
    Ok(EvalReport {
        dice: per_image_dice.iter().sum::<f64>() / per_image_dice.len() as f64,
        mse: mean_mse(probs, gts)?,
        best_threshold: threshold,
        pr_curve: pr_curve(probs, gts, pr_grid)?,
        per_image_dice,
    })
}

const PR_HEADER: &str = "threshold,precision,recall";

/// `threshold,precision,recall` rows. Values use the shortest decimal form
/// that parses back to the same `f64`.
pub fn pr_curve_to_csv(curve: &[PRPoint]) -> String {
    let mut s = format!("{PR_HEADER}\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
    }
    s
}

pub fn pr_curve_from_csv(text: &str) -> Result<Vec<PRPoint>> {
    let mut lines = text.lines();
    if lines.next() != Some(PR_HEADER) {
        return Err(Error::parse("pr curve csv", "unexpected header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<f64> = line
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|e| Error::parse("pr curve csv", e)))
                .collect::<Result<_>>()?;
            match f[..] {
                [threshold, precision, recall] => Ok(PRPoint { threshold, precision, recall }),
                _ => Err(Error::parse("pr curve csv", format!("bad row {line:?}"))),
            }
        })
        .collect()
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "model,dataset,strategy,dice,mse,best_threshold";

    /// Header plus one flat row.
    pub fn to_csv(&self, model: &str, dataset: &str, strategy: &str) -> String {
        format!(
            "{}\n{model},{dataset},{strategy},{},{},{}\n",
            Self::CSV_HEADER,
            self.dice,
            self.mse,
            self.best_threshold
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8], w: usize) -> MaskTensor {
        let b: Vec<bool> = bits.iter().map(|&v| v == 1).collect();
        MaskTensor::from_bits(bits.len() / w, w, &b).unwrap()
    }

    // pred 3 positives, gt 4 positives, overlap 2, on a 4x4 grid
    fn fixture() -> (MaskTensor, MaskTensor) {
        let pred = mask(&[1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0], 4);
        let gt = mask(&[0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0], 4);
        (pred, gt)
    }

    #[test]
    fn confusion_examples() {
        let g = mask(&[1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0], 4);
        assert_eq!(
            confusion(&g, &g).unwrap(),
            ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 11 }
        );
        let zeros = mask(&[0; 16], 4);
        let c = confusion(&zeros, &g).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (0, 0, 5));
        let (p, g) = fixture();
        let c = confusion(&p, &g).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 1, 2, 11));
        assert!(confusion(&p, &mask(&[0; 8], 4)).is_err());
    }

    #[test]
    fn precision_recall_dice_examples() {
        let (p, g) = fixture();
        let c = confusion(&p, &g).unwrap();
        assert_eq!(precision(&c), 2.0 / 3.0);
        assert_eq!(recall(&c), 0.5);
        assert_eq!(dice(&p, &g).unwrap(), 4.0 / 7.0);
        assert_eq!(precision(&ConfusionCounts::default()), 1.0);
        assert_eq!(recall(&confusion(&p, &mask(&[0; 16], 4)).unwrap()), 1.0);
        assert_eq!(dice(&g, &g).unwrap(), 1.0);
        let cg = confusion(&g, &g).unwrap();
        assert_eq!((precision(&cg), recall(&cg)), (1.0, 1.0));
        let a = mask(&[1, 0, 0, 0], 2);
        let b = mask(&[0, 1, 0, 0], 2);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let empty = mask(&[0; 4], 2);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn mse_examples() {
        let g = mask(&[0, 1, 1, 0], 2);
        assert_eq!(mse_metric(&g.to_prob_map(), &g).unwrap(), 0.0);
        assert_eq!(mse_metric(&ProbMap::filled(2, 2, 0.5), &g).unwrap(), 0.25);
        // per-image 0.1 and 0.3 average to 0.2
        let z = mask(&[0; 4], 2);
        let a = ProbMap::filled(2, 2, 0.1f64.sqrt() as f32);
        let b = ProbMap::filled(2, 2, 0.3f64.sqrt() as f32);
        let m = mean_mse(&[a, b], &[z.clone(), z]).unwrap();
        assert!((m - 0.2).abs() < 1e-7);
    }

    #[test]
    fn pr_curve_examples() {
        let (p, g) = fixture();
        let probs = vec![p.to_prob_map()];
        let pts = pr_curve(&probs, std::slice::from_ref(&g), &[0.5]).unwrap();
        assert_eq!(pts, vec![PRPoint { threshold: 0.5, precision: 2.0 / 3.0, recall: 0.5 }]);
        let pts = pr_curve(&probs, &[g], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(pts[0].recall, 1.0);
        assert!(pts.windows(2).all(|w| w[1].recall <= w[0].recall));
        assert!(pr_curve(&[], &[], &[0.5]).is_err());
    }

    #[test]
    fn best_threshold_examples() {
        let p = ProbMap::new(1, 2, vec![0.4, 0.9]).unwrap();
        let g = mask(&[0, 1], 2);
        assert_eq!(best_threshold(&[p], std::slice::from_ref(&g), &[0.3, 0.5]).unwrap(), 0.5);
        // perfect predictions tie on (0, 1]; t = 0 marks everything positive
        let grid = [0.0, 0.25, 0.5, 1.0];
        assert_eq!(best_threshold(&[g.to_prob_map()], std::slice::from_ref(&g), &grid).unwrap(), 0.25);
        assert!(best_threshold(&[g.to_prob_map()], &[g], &[]).is_err());
    }

    #[test]
    fn evaluate_dice_is_mean_of_per_image() {
        let (p, g) = fixture();
        let r = evaluate(&[p.to_prob_map(), g.to_prob_map()], &[g.clone(), g], 0.5, &default_threshold_grid()).unwrap();
        assert_eq!(r.dice, r.per_image_dice.iter().sum::<f64>() / 2.0);
        assert_eq!(r.pr_curve.len(), 101);
    }

    #[test]
    fn pr_csv_round_trip() {
        let curve = vec![
            PRPoint { threshold: 0.0, precision: 1.0 / 3.0, recall: 1.0 },
            PRPoint { threshold: 0.37, precision: 0.1 + 0.2, recall: 2.0f64.sqrt() / 2.0 },
        ];
        assert_eq!(pr_curve_from_csv(&pr_curve_to_csv(&curve)).unwrap(), curve);
        assert!(pr_curve_from_csv("a,b,c\n").is_err());
        assert!(pr_curve_from_csv("threshold,precision,recall\n0.1,0.2\n").is_err());
    }
}
