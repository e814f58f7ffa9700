//! Score calibration, standardized fusion, AUROC and report assembly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::lavit::TargetMode;
use crate::synthgen::{AnomalyKind, Label};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("calibration needs at least 2 scores, got {0}")]
    TooFew(usize),
    #[error("calibration scores of {0} have zero variance")]
    ZeroVariance(&'static str),
    #[error("AUROC needs both classes (positives {pos}, negatives {neg})")]
    SingleClass { pos: usize, neg: usize },
    #[error("length mismatch: {0} labels vs {1} scores")]
    Length(usize, usize),
    #[error("non-finite score")]
    NonFinite,
    #[error("missing configuration `{0}`")]
    MissingConfig(String),
}

/// Mean and sample standard deviation (n - 1).
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64), EvalError> {
    if xs.len() < 2 {
        return Err(EvalError::TooFew(xs.len()));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    Ok((m, var.sqrt()))
}

/// Standardization statistics of both scores over normal calibration images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub hvq_mean: f64,
    pub hvq_std: f64,
    pub lavit_mean: f64,
    pub lavit_std: f64,
}

pub fn calibrate(s_hvq: &[f64], s_lavit: &[f64]) -> Result<ScoreStats, EvalError> {
    if s_hvq.len() != s_lavit.len() {
        return Err(EvalError::Length(s_hvq.len(), s_lavit.len()));
    }
    let (hvq_mean, hvq_std) = mean_std(s_hvq)?;
    let (lavit_mean, lavit_std) = mean_std(s_lavit)?;
    if hvq_std <= 0.0 {
        return Err(EvalError::ZeroVariance("S_HVQ"));
    }
    if lavit_std <= 0.0 {
        return Err(EvalError::ZeroVariance("S_LAViT"));
    }
    Ok(ScoreStats {
        hvq_mean,
        hvq_std,
        lavit_mean,
        lavit_std,
    })
}

impl ScoreStats {
    pub fn z_hvq(&self, s: f64) -> f64 {
        (s - self.hvq_mean) / self.hvq_std
    }

    pub fn z_lavit(&self, s: f64) -> f64 {
        (s - self.lavit_mean) / self.lavit_std
    }

    pub fn fuse(&self, s_hvq: f64, s_lavit: f64) -> f64 {
        self.z_hvq(s_hvq) + self.z_lavit(s_lavit)
    }
}

/// Mann-Whitney AUROC with midranks, so tied pairs count one half.
///
/// `labels[i]` is true for anomalous (positive) images.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<f64, EvalError> {
    if labels.len() != scores.len() {
        return Err(EvalError::Length(labels.len(), scores.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::NonFinite);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass { pos, neg });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives keeps midranks integral.
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share the midrank (i + j + 2) / 2.
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank2_sum += tied_pos * (i + j + 2) as u128;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    // U = R - p(p+1)/2, doubled.
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Threshold maximizing F1 over all distinct score cut points
/// (`score >= tau` predicts anomalous).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub tau: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn best_f1_threshold(labels: &[bool], scores: &[f64]) -> Result<Threshold, EvalError> {
    if labels.len() != scores.len() {
        return Err(EvalError::Length(labels.len(), scores.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(EvalError::SingleClass {
            pos,
            neg: labels.len() - pos,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut best = Threshold {
        tau: f64::INFINITY,
        f1: 0.0,
        precision: 0.0,
        recall: 0.0,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / pos as f64;
        let f1 = if tp == 0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        if f1 > best.f1 {
            best = Threshold {
                tau: s,
                f1,
                precision,
                recall,
            };
        }
    }
    Ok(best)
}

/// Published detection AUROCs (SA, LA, average), in percent.
pub const REFERENCE_HVQ_ONLY: [f64; 3] = [91.2, 76.7, 84.0];
pub const REFERENCE_LAVIT_ONLY: [f64; 3] = [68.7, 79.3, 74.0];
pub const REFERENCE_FUSED: [f64; 3] = [90.3, 83.1, 86.7];

/// Published per-target AUROCs (SA, LA, average) of the fused detector.
pub fn reference_target(mode: TargetMode) -> [f64; 3] {
    match mode {
        TargetMode::Pixels => [91.1, 74.8, 83.0],
        TargetMode::Features => [88.9, 83.4, 86.1],
        TargetMode::Codes => [90.7, 78.0, 84.3],
        TargetMode::Histogram => [90.3, 83.1, 86.7],
    }
}

/// Scores of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub label: Label,
    pub kind: AnomalyKind,
    pub s_hvq: f64,
    pub s_lavit: f64,
    /// Standard deviation of the per-mask LAViT losses.
    pub s_lavit_mask_std: f64,
    pub z_hvq: f64,
    pub z_lavit: f64,
    pub s_fused: f64,
}

impl ImageScore {
    pub fn new(
        id: String,
        label: Label,
        kind: AnomalyKind,
        s_hvq: f64,
        s_lavit: f64,
        s_lavit_mask_std: f64,
        stats: &ScoreStats,
    ) -> Self {
        Self {
            id,
            label,
            kind,
            s_hvq,
            s_lavit,
            s_lavit_mask_std,
            z_hvq: stats.z_hvq(s_hvq),
            z_lavit: stats.z_lavit(s_lavit),
            s_fused: stats.fuse(s_hvq, s_lavit),
        }
    }
}

/// Which score column a detector reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    HvqOnly,
    LavitOnly,
    Fused,
}

impl Detector {
    pub const ALL: [Detector; 3] = [Detector::HvqOnly, Detector::LavitOnly, Detector::Fused];

    pub fn score(&self, s: &ImageScore) -> f64 {
        match self {
            Detector::HvqOnly => s.s_hvq,
            Detector::LavitOnly => s.s_lavit,
            Detector::Fused => s.s_fused,
        }
    }

    pub fn reference(&self) -> [f64; 3] {
        match self {
            Detector::HvqOnly => REFERENCE_HVQ_ONLY,
            Detector::LavitOnly => REFERENCE_LAVIT_ONLY,
            Detector::Fused => REFERENCE_FUSED,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Detector::HvqOnly => "hvq_only",
            Detector::LavitOnly => "lavit_only",
            Detector::Fused => "fused",
        }
    }
}

/// Structural, logical and mean AUROC of one detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aurocs {
    pub sa: f64,
    pub la: f64,
    pub avg: f64,
}

/// AUROC of anomalies selected by `pick` against all normal images.
fn auroc_subset(
    scores: &[ImageScore],
    value: impl Fn(&ImageScore) -> f64,
    pick: impl Fn(&ImageScore) -> bool,
) -> Result<f64, EvalError> {
    let (labels, vals): (Vec<bool>, Vec<f64>) = scores
        .iter()
        .filter(|s| s.label == Label::Normal || pick(s))
        .map(|s| (s.label != Label::Normal, value(s)))
        .unzip();
    auroc(&labels, &vals)
}

pub fn detector_aurocs(scores: &[ImageScore], det: Detector) -> Result<Aurocs, EvalError> {
    let sa = auroc_subset(scores, |s| det.score(s), |s| s.label == Label::Structural)?;
    let la = auroc_subset(scores, |s| det.score(s), |s| s.label == Label::Logical)?;
    Ok(Aurocs {
        sa,
        la,
        avg: (sa + la) / 2.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub aurocs: Aurocs,
    /// Published values in percent, for documentation only.
    pub reference: [f64; 3],
}

/// Result of one prediction-target run, for the target ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub mode: TargetMode,
    pub detectors: BTreeMap<String, Aurocs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub config: serde_json::Value,
    pub stats: ScoreStats,
    /// HVQ-only, LAViT-only and fused rows.
    pub detectors: Vec<TableRow>,
    /// AUROC per anomaly kind against all normals, per detector.
    pub per_kind: BTreeMap<String, BTreeMap<String, f64>>,
    pub fused_threshold: Threshold,
    /// Fused-detector rows per prediction target, when an ablation ran.
    pub targets: Vec<TableRow>,
    pub images: Vec<ImageScore>,
}

pub fn build_report(
    config: serde_json::Value,
    stats: ScoreStats,
    images: Vec<ImageScore>,
    ablation: &[TargetResult],
) -> Result<ScoreReport, EvalError> {
    let mut detectors = Vec::new();
    for det in Detector::ALL {
        detectors.push(TableRow {
            name: det.as_str().into(),
            aurocs: detector_aurocs(&images, det)?,
            reference: det.reference(),
        });
    }
    let mut per_kind = BTreeMap::new();
    let kinds: Vec<AnomalyKind> = AnomalyKind::LOGICAL
        .iter()
        .chain(AnomalyKind::STRUCTURAL.iter())
        .copied()
        .filter(|k| images.iter().any(|s| s.kind == *k))
        .collect();
    for det in Detector::ALL {
        let mut row = BTreeMap::new();
        for &k in &kinds {
            row.insert(
                k.as_str().to_string(),
                auroc_subset(&images, |s| det.score(s), |s| s.kind == k)?,
            );
        }
        per_kind.insert(det.as_str().to_string(), row);
    }
    let (labels, fused): (Vec<bool>, Vec<f64>) =
        images.iter().map(|s| (s.label != Label::Normal, s.s_fused)).unzip();
    let fused_threshold = best_f1_threshold(&labels, &fused)?;
    let mut targets = Vec::new();
    for r in ablation {
        let a = r
            .detectors
            .get(Detector::Fused.as_str())
            .ok_or_else(|| EvalError::MissingConfig(format!("{} fused", r.mode)))?;
        targets.push(TableRow {
            name: r.mode.to_string(),
            aurocs: *a,
            reference: reference_target(r.mode),
        });
    }
    Ok(ScoreReport {
        config,
        stats,
        detectors,
        per_kind,
        fused_threshold,
        targets,
        images,
    })
}

pub const CSV_HEADER: &str = "id,label,kind,s_hvq,s_lavit,s_fused";

/// One row per image; scores printed with round-trip precision.
pub fn scores_csv(images: &[ImageScore]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for s in images {
        out.push_str(&format!(
            "{},{},{},{:?},{:?},{:?}\n",
            s.id,
            s.label.as_str(),
            s.kind.as_str(),
            s.s_hvq,
            s.s_lavit,
            s.s_fused
        ));
    }
    out
}

/// Compact text table of the report for terminals.
pub fn summary_table(report: &ScoreReport) -> String {
    let mut out = format!(
        "{:<12} {:>7} {:>7} {:>7}   {:>17}\n",
        "detector", "SA", "LA", "avg", "published SA/LA/avg"
    );
    let rows = report.detectors.iter().chain(report.targets.iter().map(|r| r));
    for (i, r) in rows.enumerate() {
        if i == report.detectors.len() {
            out.push_str("-- fused detector per prediction target --\n");
        }
        out.push_str(&format!(
            "{:<12} {:>7.3} {:>7.3} {:>7.3}   {:>5.1}/{:.1}/{:.1}\n",
            r.name, r.aurocs.sa, r.aurocs.la, r.aurocs.avg, r.reference[0], r.reference[1], r.reference[2]
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibrate_uses_sample_std() {
        let s = calibrate(&[1.0, 3.0], &[2.0, 6.0]).unwrap();
        assert_eq!((s.hvq_mean, s.hvq_std), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[1.0, 3.0]).unwrap(), (2.0, 2f64.sqrt()));
        assert_eq!(calibrate(&[1.0], &[1.0]), Err(EvalError::TooFew(1)));
        assert_eq!(
            calibrate(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(EvalError::ZeroVariance("S_HVQ"))
        );
    }

    #[test]
    fn fuse_examples() {
        let s = ScoreStats {
            hvq_mean: 1.0,
            hvq_std: 2.0,
            lavit_mean: 3.0,
            lavit_std: 4.0,
        };
        // Standardized (1.0, -0.5).
        assert_eq!(s.fuse(3.0, 1.0), 0.5);
        assert_eq!(s.fuse(1.0, 3.0), 0.0);
        assert!(s.fuse(1.1, 3.0) > s.fuse(1.0, 3.0));
        assert!(s.fuse(1.0, 3.1) > s.fuse(1.0, 3.0));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[false, true], &[0.1, 0.9]).unwrap(), 1.0);
        assert_eq!(auroc(&[false, true, true, false], &[0.4; 4]).unwrap(), 0.5);
        assert_eq!(auroc(&[false, true], &[0.5, 0.3]).unwrap(), 0.0);
        assert!(matches!(auroc(&[true, true], &[0.1, 0.2]), Err(EvalError::SingleClass { .. })));
    }

    #[test]
    fn best_f1_perfect_split() {
        let t = best_f1_threshold(&[false, false, true, true], &[0.1, 0.2, 0.8, 0.9]).unwrap();
        assert_eq!((t.tau, t.f1), (0.8, 1.0));
    }

    #[test]
    fn reference_values() {
        assert_eq!(REFERENCE_FUSED, [90.3, 83.1, 86.7]);
        let avgs: Vec<f64> = TargetMode::ALL.iter().map(|&m| reference_target(m)[2]).collect();
        assert_eq!(avgs, vec![83.0, 86.1, 84.3, 86.7]);
    }
}
