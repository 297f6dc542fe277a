//! Segmentation metrics and the threshold/usage rank correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::LabelMap;
use crate::icat::ThresholdReport;

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape("confusion counts must be classes x classes".into()));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        pred.validate(self.classes)?;
        gt.validate(self.classes)?;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merging matrices of different size");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|k| self.get(c, k)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|k| self.get(k, c)).sum()
    }

    /// True positives of a class.
    pub fn intersection(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn union(&self, c: usize) -> u64 {
        self.row_sum(c) + self.col_sum(c) - self.get(c, c)
    }

    /// IoU per class; `None` where the class is absent from both maps.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let u = self.union(c);
                (u > 0).then(|| self.intersection(c) as f64 / u as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-zero union.
    pub fn miou(&self) -> Result<f64> {
        mean_present(&self.iou_per_class()).ok_or(Error::NoClasses)
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64)
    }
}

/// Mean of the present entries.
pub fn mean_present(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// IoU from pooled intersection and union counts.
pub fn pooled_iou(inter: &[u64], union: &[u64]) -> Vec<Option<f64>> {
    inter
        .iter()
        .zip(union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect()
}

/// Average ranks (1-based), ties sharing the mean rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    /// Set when either side has no rank variation; `rho` is then 0.
    pub degenerate: bool,
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Spearman {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Spearman {
            rho: 0.0,
            degenerate: true,
        };
    }
    Spearman {
        rho: sxy / (sxx * syy).sqrt(),
        degenerate: false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdUsage {
    pub classes: Vec<usize>,
    pub mean_tau: Vec<f64>,
    pub mean_usage: Vec<f64>,
    pub correlation: Spearman,
}

/// Per-class means of the threshold (frames where the class has a
/// confidence distribution) and of the augmentation-usage ratio (frames
/// where the class has mask pixels), and their rank correlation.
pub fn threshold_usage_from_means(
    tau: &[Option<f64>],
    usage: &[Option<f64>],
) -> Result<ThresholdUsage> {
    let mut out = ThresholdUsage {
        classes: Vec::new(),
        mean_tau: Vec::new(),
        mean_usage: Vec::new(),
        correlation: Spearman {
            rho: 0.0,
            degenerate: true,
        },
    };
    for (c, (t, u)) in tau.iter().zip(usage).enumerate() {
        if let (Some(t), Some(u)) = (t, u) {
            out.classes.push(c);
            out.mean_tau.push(*t);
            out.mean_usage.push(*u);
        }
    }
    if out.classes.len() < 3 {
        return Err(Error::InsufficientClasses {
            needed: 3,
            found: out.classes.len(),
        });
    }
    out.correlation = spearman(&out.mean_tau, &out.mean_usage);
    Ok(out)
}

pub fn threshold_usage_correlation(reports: &[ThresholdReport]) -> Result<ThresholdUsage> {
    let classes = reports.first().map(ThresholdReport::classes).unwrap_or(0);
    let mut tau = vec![(0.0, 0usize); classes];
    let mut usage = vec![(0.0, 0usize); classes];
    for r in reports {
        for c in 0..classes {
            if r.counts[c] > 0 {
                tau[c].0 += r.tau[c];
                tau[c].1 += 1;
            }
            if let Some(u) = r.aug_usage(c) {
                usage[c].0 += u;
                usage[c].1 += 1;
            }
        }
    }
    let mean = |v: &[(f64, usize)]| -> Vec<Option<f64>> {
        v.iter().map(|&(s, n)| (n > 0).then(|| s / n as f64)).collect()
    };
    threshold_usage_from_means(&mean(&tau), &mean(&usage))
}
