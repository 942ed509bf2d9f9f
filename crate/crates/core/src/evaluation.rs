//! Classification metrics, ROC AUC, and probability / attention heatmaps.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::tiling::TileRect;

/// A metric that may be undefined (zero denominator). Serialises as a
/// number or the string `"undefined"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric(pub Option<f64>);

impl Metric {
    pub const UNDEFINED: Metric = Metric(None);

    fn ratio(num: usize, den: usize) -> Metric {
        if den == 0 {
            Metric(None)
        } else {
            Metric(Some(num as f64 / den as f64))
        }
    }

    pub fn value(self) -> Option<f64> {
        self.0
    }

    pub fn is_defined(self) -> bool {
        self.0.is_some()
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v}"),
            None => f.write_str("undefined"),
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Some(v) => s.serialize_f64(v),
            None => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Metric(Some(v))),
            Raw::Text(t) if t == "undefined" => Ok(Metric(None)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected number or \"undefined\", got {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "SN")]
    pub sensitivity: Metric,
    #[serde(rename = "SPC")]
    pub specificity: Metric,
    #[serde(rename = "PPV")]
    pub ppv: Metric,
    #[serde(rename = "NPV")]
    pub npv: Metric,
    #[serde(rename = "F1S")]
    pub f1: Metric,
    #[serde(rename = "ACC")]
    pub accuracy: Metric,
    /// Filled in by [`roc_auc`] when both classes are present.
    #[serde(rename = "AUC")]
    pub auc: Metric,
    #[serde(rename = "TP")]
    pub tp: usize,
    #[serde(rename = "FP")]
    pub fp: usize,
    #[serde(rename = "TN")]
    pub tn: usize,
    #[serde(rename = "FN")]
    pub fn_: usize,
}

fn check_pairs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::contract("metrics need at least one prediction"));
    }
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::contract(format!("non-finite score {s}")));
    }
    Ok(())
}

/// Confusion counts and derived metrics; a score at or above `threshold`
/// is a positive call. AUC is left undefined.
pub fn confusion_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricReport> {
    check_pairs(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let sensitivity = Metric::ratio(tp, tp + fn_);
    let ppv = Metric::ratio(tp, tp + fp);
    let f1 = match (ppv.0, sensitivity.0) {
        (Some(p), Some(r)) if p + r > 0.0 => Metric(Some(2.0 * p * r / (p + r))),
        _ => Metric::UNDEFINED,
    };
    Ok(MetricReport {
        sensitivity,
        specificity: Metric::ratio(tn, tn + fp),
        ppv,
        npv: Metric::ratio(tn, tn + fn_),
        f1,
        accuracy: Metric::ratio(tp + tn, tp + tn + fp + fn_),
        auc: Metric::UNDEFINED,
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Trapezoidal area under the ROC curve. Tied scores move the curve
/// diagonally, which makes this equal to `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::contract("AUC needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Ok(area / (n_pos * n_neg) as f64)
}

/// Confusion metrics plus AUC when both classes are present.
pub fn metric_report(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricReport> {
    let mut r = confusion_metrics(scores, labels, threshold)?;
    let has_both = labels.iter().any(|&y| y) && labels.iter().any(|&y| !y);
    if has_both {
        r.auc = Metric(Some(roc_auc(scores, labels)?));
    }
    Ok(r)
}

/// Mean and population standard deviation of each metric across folds,
/// over the folds where it is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub mean: MetricSet,
    pub std: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    #[serde(rename = "SN")]
    pub sensitivity: Metric,
    #[serde(rename = "SPC")]
    pub specificity: Metric,
    #[serde(rename = "PPV")]
    pub ppv: Metric,
    #[serde(rename = "NPV")]
    pub npv: Metric,
    #[serde(rename = "F1S")]
    pub f1: Metric,
    #[serde(rename = "ACC")]
    pub accuracy: Metric,
    #[serde(rename = "AUC")]
    pub auc: Metric,
}

pub fn summarize_folds(reports: &[MetricReport]) -> FoldSummary {
    let stat = |get: fn(&MetricReport) -> Metric| -> (Metric, Metric) {
        let vals: Vec<f64> = reports.iter().filter_map(|r| get(r).0).collect();
        if vals.is_empty() {
            return (Metric::UNDEFINED, Metric::UNDEFINED);
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (Metric(Some(mean)), Metric(Some(var.sqrt())))
    };
    let fields: [fn(&MetricReport) -> Metric; 7] = [
        |r| r.sensitivity,
        |r| r.specificity,
        |r| r.ppv,
        |r| r.npv,
        |r| r.f1,
        |r| r.accuracy,
        |r| r.auc,
    ];
    let s: Vec<(Metric, Metric)> = fields.iter().map(|f| stat(*f)).collect();
    let build = |pick: fn(&(Metric, Metric)) -> Metric| MetricSet {
        sensitivity: pick(&s[0]),
        specificity: pick(&s[1]),
        ppv: pick(&s[2]),
        npv: pick(&s[3]),
        f1: pick(&s[4]),
        accuracy: pick(&s[5]),
        auc: pick(&s[6]),
    };
    FoldSummary {
        mean: build(|m| m.0),
        std: build(|m| m.1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RoiProbability,
    Attention,
    Cam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapRaster {
    pub raster: Raster,
    pub provenance: Provenance,
}

/// Bilinear interpolation over tile centers on a regular (possibly holed) grid.
#[derive(Debug, Clone)]
pub struct GridInterpolator {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Row-major over `ys × xs`; `None` where no tile was kept.
    values: Vec<Option<f64>>,
    points: Vec<(f64, f64, f64)>,
}

impl GridInterpolator {
    pub fn new(points: &[(f64, f64, f64)]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("heatmap needs at least one tile"));
        }
        if let Some(p) = points.iter().find(|p| !(p.0.is_finite() && p.1.is_finite() && p.2.is_finite())) {
            return Err(Error::contract(format!("non-finite tile value {p:?}")));
        }
        let axis = |get: fn(&(f64, f64, f64)) -> f64| {
            let mut v: Vec<f64> = points.iter().map(get).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        let xs = axis(|p| p.0);
        let ys = axis(|p| p.1);
        let mut values = vec![None; xs.len() * ys.len()];
        for &(x, y, v) in points {
            let i = xs.partition_point(|&c| c < x);
            let j = ys.partition_point(|&c| c < y);
            let slot = &mut values[j * xs.len() + i];
            if slot.is_some() {
                return Err(Error::contract(format!("two tiles centred at ({x}, {y})")));
            }
            *slot = Some(v);
        }
        Ok(GridInterpolator {
            xs,
            ys,
            values,
            points: points.to_vec(),
        })
    }

    fn nearest(&self, x: f64, y: f64) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for &(px, py, v) in &self.points {
            let d = (px - x).powi(2) + (py - y).powi(2);
            if d < best.0 {
                best = (d, v);
            }
        }
        best.1
    }

    /// Lower bracketing index and fraction along one axis, or `None` outside.
    fn locate(axis: &[f64], t: f64) -> Option<(usize, f64)> {
        let (first, last) = (axis[0], axis[axis.len() - 1]);
        if t < first || t > last {
            return None;
        }
        if axis.len() == 1 {
            return Some((0, 0.0));
        }
        let hi = axis.partition_point(|&c| c <= t).clamp(1, axis.len() - 1);
        let lo = hi - 1;
        Some((lo, (t - axis[lo]) / (axis[hi] - axis[lo])))
    }

    /// Value at slide coordinates `(x, y)`.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (Some((i, fx)), Some((j, fy))) = (Self::locate(&self.xs, x), Self::locate(&self.ys, y)) else {
            return self.nearest(x, y);
        };
        let nx = self.xs.len();
        let i1 = (i + 1).min(nx - 1);
        let j1 = (j + 1).min(self.ys.len() - 1);
        let corners = [
            (i, j, (1.0 - fx) * (1.0 - fy)),
            (i1, j, fx * (1.0 - fy)),
            (i, j1, (1.0 - fx) * fy),
            (i1, j1, fx * fy),
        ];
        let (mut acc, mut weight) = (0.0, 0.0);
        for (ci, cj, w) in corners {
            if let Some(v) = self.values[cj * nx + ci] {
                acc += w * v;
                weight += w;
            }
        }
        if weight > 0.0 {
            (acc / weight).clamp(self.min(), self.max())
        } else {
            self.nearest(x, y)
        }
    }

    fn min(&self) -> f64 {
        self.points.iter().map(|p| p.2).fold(f64::INFINITY, f64::min)
    }

    fn max(&self) -> f64 {
        self.points.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max)
    }
}

fn check_dims(slide: (usize, usize), out: (usize, usize)) -> Result<()> {
    if slide.0 == 0 || slide.1 == 0 || out.0 == 0 || out.1 == 0 {
        return Err(Error::dim("heatmap", format!("slide {slide:?} and output {out:?} must be non-empty")));
    }
    Ok(())
}

/// Slide coordinates of the centre of output pixel `(px, py)`.
fn pixel_to_slide(px: usize, py: usize, slide: (usize, usize), out: (usize, usize)) -> (f64, f64) {
    (
        (px as f64 + 0.5) * slide.0 as f64 / out.0 as f64,
        (py as f64 + 0.5) * slide.1 as f64 / out.1 as f64,
    )
}

/// Renders tile probabilities `(x_center, y_center, p)` over a slide of
/// `slide_dims` into a raster of `output_dims` (both width, height).
pub fn probability_heatmap(
    tiles: &[(f64, f64, f64)],
    slide_dims: (usize, usize),
    output_dims: (usize, usize),
) -> Result<HeatmapRaster> {
    check_dims(slide_dims, output_dims)?;
    let grid = GridInterpolator::new(tiles)?;
    let (w, h) = output_dims;
    let mut values = Vec::with_capacity(w * h);
    for py in 0..h {
        for px in 0..w {
            let (x, y) = pixel_to_slide(px, py, slide_dims, output_dims);
            values.push(grid.sample(x, y));
        }
    }
    Ok(HeatmapRaster {
        raster: Raster::new(w, h, values)?,
        provenance: Provenance::RoiProbability,
    })
}

/// Min-max normalised attention; all ones when the weights are equal.
pub fn normalize_attention(attention: &[f64]) -> Result<Vec<f64>> {
    if attention.is_empty() {
        return Err(Error::contract("attention heatmap of an empty bag"));
    }
    let lo = attention.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = attention.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![1.0; attention.len()]);
    }
    Ok(attention.iter().map(|a| (a - lo) / (hi - lo)).collect())
}

/// Normalised attention interpolated over the bag's tiles. Pixels outside
/// every bag tile are zero.
pub fn attention_heatmap(
    attention: &[f64],
    tiles: &[TileRect],
    slide_dims: (usize, usize),
    output_dims: (usize, usize),
) -> Result<HeatmapRaster> {
    if attention.len() != tiles.len() {
        return Err(Error::contract(format!(
            "{} attention weights for {} tiles",
            attention.len(),
            tiles.len()
        )));
    }
    check_dims(slide_dims, output_dims)?;
    let norm = normalize_attention(attention)?;
    let points: Vec<(f64, f64, f64)> = tiles
        .iter()
        .zip(&norm)
        .map(|(t, &v)| {
            let (x, y) = t.center();
            (x, y, v)
        })
        .collect();
    let grid = GridInterpolator::new(&points)?;
    let (w, h) = output_dims;
    let mut values = Vec::with_capacity(w * h);
    for py in 0..h {
        for px in 0..w {
            let (x, y) = pixel_to_slide(px, py, slide_dims, output_dims);
            let inside = tiles.iter().any(|t| {
                x >= t.x as f64 && x < (t.x + t.size) as f64 && y >= t.y as f64 && y < (t.y + t.size) as f64
            });
            values.push(if inside { grid.sample(x, y) } else { 0.0 });
        }
    }
    Ok(HeatmapRaster {
        raster: Raster::new(w, h, values)?,
        provenance: Provenance::Attention,
    })
}

/// One row of a heatmap CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapPoint {
    pub x_center: f64,
    pub y_center: f64,
    pub value: f64,
}

pub fn write_heatmap_csv(path: impl AsRef<Path>, points: &[HeatmapPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_confusion_case() {
        let r = confusion_metrics(&[1.0, 1.0, 0.0, 0.0], &[true, false, false, true], 0.5).unwrap();
        assert_eq!((r.tp, r.fp, r.tn, r.fn_), (1, 1, 1, 1));
        for m in [r.sensitivity, r.specificity, r.ppv, r.npv, r.f1, r.accuracy] {
            assert_eq!(m, Metric(Some(0.5)));
        }
    }

    #[test]
    fn undefined_metrics_are_flagged() {
        let r = confusion_metrics(&[0.9, 0.2], &[true, true], 0.5).unwrap();
        assert_eq!(r.specificity, Metric::UNDEFINED);
        assert_eq!(r.npv, Metric(Some(0.0)));
        let r = confusion_metrics(&[0.9, 0.8], &[true, true], 0.5).unwrap();
        assert_eq!(r.npv, Metric::UNDEFINED);
        let j = serde_json::to_value(&r).unwrap();
        assert_eq!(j["SPC"], "undefined");
        assert_eq!(j["SN"], 1.0);
        let back: MetricReport = serde_json::from_value(j).unwrap();
        assert_eq!(back, r);
        assert!(confusion_metrics(&[], &[], 0.5).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(roc_auc(&[0.3, 0.4], &[true, true]).is_err());
    }

    #[test]
    fn heatmap_cases() {
        let tiles = [(0.0, 0.0, 0.7), (10.0, 0.0, 0.7), (0.0, 10.0, 0.7)];
        let h = probability_heatmap(&tiles, (20, 20), (7, 5)).unwrap();
        assert!(h.raster.values.iter().all(|&v| v == 0.7));

        let g = GridInterpolator::new(&[(0.0, 0.0, 0.0), (1.0, 0.0, 1.0), (0.0, 1.0, 1.0), (1.0, 1.0, 0.0)]).unwrap();
        assert!((g.sample(0.5, 0.5) - 0.5).abs() < 1e-12);
        assert_eq!(g.sample(1.0, 0.0), 1.0);
        assert_eq!(g.sample(-3.0, 0.2), 0.0);
    }

    #[test]
    fn attention_normalisation() {
        let n = normalize_attention(&[0.2, 0.3, 0.5]).unwrap();
        let want = [0.0, 1.0 / 3.0, 1.0];
        for (a, b) in n.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(normalize_attention(&[1.0]).unwrap(), vec![1.0]);
        assert_eq!(normalize_attention(&[0.25; 4]).unwrap(), vec![1.0; 4]);
        assert!(normalize_attention(&[]).is_err());
    }

    #[test]
    fn attention_heatmap_zero_outside_bag() {
        let tiles = [TileRect { x: 0, y: 0, size: 10 }];
        let h = attention_heatmap(&[1.0], &tiles, (20, 20), (4, 4)).unwrap();
        assert_eq!(h.raster.values[0], 1.0);
        assert_eq!(h.raster.values[3], 0.0);
        assert_eq!(h.raster.values[15], 0.0);
    }
}
