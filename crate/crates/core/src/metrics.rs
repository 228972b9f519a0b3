//! Soft dice loss, dice similarity and aggregate reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{LabelMask, ProbMap, LIVER, TUMOR};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_DICE_EPS: f64 = 1e-6;

/// Per-sample soft dice loss on `[N, H, W, C]` probabilities against
/// `N*H*W` integer labels, averaged over the batch.
///
/// For each sample the loss is `1 - mean_c (2 sum p*y + eps) / (sum p + sum y + eps)`
/// over the classes that are present: those with at least one labelled pixel
/// or at least one pixel's worth of predicted mass.
pub fn soft_dice_loss_tensor<T: Scalar>(probs: &Tensor<T>, labels: &[u8], eps: f64) -> Result<Tensor<T>> {
    let (n, pixels, c) = match probs.shape() {
        &[n, h, w, c] => (n, h * w, c),
        s => return Err(Error::dim(format!("dice loss expects [N,H,W,C] probabilities, got {s:?}"))),
    };
    if labels.len() != n * pixels {
        return Err(Error::dim(format!("{} labels for {} pixels", labels.len(), n * pixels)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Format(format!("label {bad} outside {c} classes")));
    }
    let p: Vec<f64> = probs.to_f64_vec();
    // Per (sample, class): intersection, prediction mass, label count, present.
    let mut inter = vec![0.0; n * c];
    let mut mass = vec![0.0; n * c];
    let mut count = vec![0.0; n * c];
    for s in 0..n {
        for i in 0..pixels {
            let row = &p[(s * pixels + i) * c..(s * pixels + i + 1) * c];
            let y = labels[s * pixels + i] as usize;
            inter[s * c + y] += row[y];
            count[s * c + y] += 1.0;
            for k in 0..c {
                mass[s * c + k] += row[k];
            }
        }
    }
    let present: Vec<bool> = (0..n * c).map(|j| count[j] > 0.0 || mass[j] >= 1.0).collect();
    let mut loss = 0.0;
    for s in 0..n {
        let mut total = 0.0;
        let mut used = 0usize;
        for k in 0..c {
            let j = s * c + k;
            if present[j] {
                total += (2.0 * inter[j] + eps) / (mass[j] + count[j] + eps);
                used += 1;
            }
        }
        loss += if used == 0 { 0.0 } else { 1.0 - total / used as f64 };
    }
    loss /= n as f64;

    let labels = labels.to_vec();
    Tensor::from_op("soft_dice", vec![T::from_f64_lossy(loss)], vec![1], &[probs], move |ctx| {
        let g = ctx.grad[0].to_f64().unwrap_or(0.0) / n as f64;
        let mut out = vec![T::zero(); n * pixels * c];
        for s in 0..n {
            let used = (0..c).filter(|&k| present[s * c + k]).count();
            if used == 0 {
                continue;
            }
            for k in 0..c {
                let j = s * c + k;
                if !present[j] {
                    continue;
                }
                let denom = mass[j] + count[j] + eps;
                let num = 2.0 * inter[j] + eps;
                let base = -num / (denom * denom);
                let hit = 2.0 / denom + base;
                for i in 0..pixels {
                    let y = labels[s * pixels + i] as usize == k;
                    let d = if y { hit } else { base };
                    out[(s * pixels + i) * c + k] = T::from_f64_lossy(-g * d / used as f64);
                }
            }
        }
        vec![Some(out)]
    })
}

/// Soft dice loss of a single probability map.
pub fn soft_dice_loss(p: &ProbMap, y: &LabelMask, eps: f64) -> Result<f64> {
    if (p.height(), p.width()) != (y.height(), y.width()) {
        return Err(Error::dim(format!(
            "probabilities {}x{} vs labels {}x{}",
            p.height(),
            p.width(),
            y.height(),
            y.width()
        )));
    }
    let probs = Tensor::<f64>::from_vec(
        p.probs().iter().map(|&v| f64::from(v)).collect(),
        &[1, p.height(), p.width(), p.classes()],
    )?;
    soft_dice_loss_tensor(&probs, y.labels(), eps)?.item()
}

/// `2|P & G| / (|P| + |G|)` for one label; 1 when both are empty.
pub fn dsc(pred: &LabelMask, gt: &LabelMask, class_id: u8) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::dim(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Drop relative to a reference report; positive means worse than the reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceDelta {
    pub liver: f64,
    pub tumor: f64,
    pub mean: f64,
}

/// Mean per-class dice over a set of cases, as fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub cases: usize,
    pub liver: f64,
    pub tumor: f64,
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<DiceDelta>,
}

impl DiceReport {
    pub fn from_scores(cases: usize, liver: f64, tumor: f64) -> Self {
        DiceReport { cases, liver, tumor, mean: (liver + tumor) / 2.0, delta: None }
    }

    pub fn with_reference(mut self, reference: &DiceReport) -> Self {
        self.delta = Some(DiceDelta {
            liver: reference.liver - self.liver,
            tumor: reference.tumor - self.tumor,
            mean: reference.mean - self.mean,
        });
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Averages per-case liver and tumor dice; fills the drop columns when a
/// reference is given.
pub fn report(preds: &[LabelMask], gts: &[LabelMask], reference: Option<&DiceReport>) -> Result<DiceReport> {
    if preds.is_empty() {
        return Err(Error::arg("dice report over zero cases"));
    }
    if preds.len() != gts.len() {
        return Err(Error::dim(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let (mut liver, mut tumor) = (0.0, 0.0);
    for (p, g) in preds.iter().zip(gts) {
        liver += dsc(p, g, LIVER)?;
        tumor += dsc(p, g, TUMOR)?;
    }
    let n = preds.len() as f64;
    let r = DiceReport::from_scores(preds.len(), liver / n, tumor / n);
    Ok(match reference {
        Some(reference) => r.with_reference(reference),
        None => r,
    })
}

/// Aligned plain-text table, one row per named report, scores in percent.
pub fn render_table(rows: &[(String, DiceReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Configuration".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>9}  {:>7}  {:>9}  {:>7}  {:>8}",
        "Configuration", "Liver DSC", "drop", "Tumor DSC", "drop", "Mean DSC"
    );
    for (name, r) in rows {
        let drop = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |d| format!("{:.1}", d * 100.0));
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.1}  {:>7}  {:>9.1}  {:>7}  {:>8.1}",
            name,
            r.liver * 100.0,
            drop(r.delta.map(|d| d.liver)),
            r.tumor * 100.0,
            drop(r.delta.map(|d| d.tumor)),
            r.mean * 100.0
        );
    }
    out
}
