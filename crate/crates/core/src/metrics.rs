//! Evaluation metrics: Dice, HD95, SDlogJ and endpoint error, plus per-split
//! aggregation into mean/std tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{FmirError, Result};
use crate::volume::{jacobian_det, DeformationField, Segmentation};

pub const LOG_JAC_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub per_label: BTreeMap<i32, f64>,
    pub mean: f64,
}

fn same_shape(a: &Segmentation, b: &Segmentation) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FmirError::ShapeMismatch(format!(
            "segmentations {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Foreground labels of either segmentation.
pub fn union_labels(a: &Segmentation, b: &Segmentation) -> Vec<i32> {
    let mut l: Vec<i32> = a.label_set().iter().chain(b.label_set()).copied().filter(|&v| v != 0).collect();
    l.sort_unstable();
    l.dedup();
    l
}

/// Dice in percent per foreground label and their mean. A label absent from
/// both masks scores 100.
pub fn dice_score(a: &Segmentation, b: &Segmentation) -> Result<DiceScores> {
    same_shape(a, b)?;
    let labels = union_labels(a, b);
    let mut counts: BTreeMap<i32, (u64, u64, u64)> = labels.iter().map(|&l| (l, (0, 0, 0))).collect();
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        if let Some(e) = counts.get_mut(&x) {
            e.0 += 1;
            if x == y {
                e.2 += 1;
            }
        }
        if let Some(e) = counts.get_mut(&y) {
            e.1 += 1;
        }
    }
    let per_label: BTreeMap<i32, f64> = counts
        .into_iter()
        .map(|(l, (na, nb, inter))| {
            let d = if na + nb == 0 { 100.0 } else { 200.0 * inter as f64 / (na + nb) as f64 };
            (l, d)
        })
        .collect();
    let mean = if per_label.is_empty() {
        100.0
    } else {
        per_label.values().sum::<f64>() / per_label.len() as f64
    };
    Ok(DiceScores { per_label, mean })
}

/// Mask voxels with at least one face neighbour outside the mask (the volume
/// border counts as outside).
fn boundary(s: &Segmentation, label: i32) -> Vec<[usize; 3]> {
    let l = s.labels();
    let [h, w, d] = s.shape();
    let inside = |x: isize, y: isize, z: isize| {
        x >= 0 && y >= 0 && z >= 0 && (x as usize) < h && (y as usize) < w && (z as usize) < d && l[[x as usize, y as usize, z as usize]] == label
    };
    let mut out = Vec::new();
    for ((x, y, z), &v) in l.indexed_iter() {
        if v != label {
            continue;
        }
        let (xi, yi, zi) = (x as isize, y as isize, z as isize);
        let interior = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
            .iter()
            .all(|&(dx, dy, dz)| inside(xi + dx, yi + dy, zi + dz));
        if !interior {
            out.push([x, y, z]);
        }
    }
    out
}

/// Linear-interpolated percentile (`q` in [0, 100]) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let t = pos - lo as f64;
    values[lo] + t * (values[hi] - values[lo])
}

fn directed(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f32; 3]) -> Vec<f64> {
    let sp = spacing.map(|s| s as f64);
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    (0..3)
                        .map(|a| {
                            let d = (p[a] as f64 - q[a] as f64) * sp[a];
                            d * d
                        })
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// 95th-percentile symmetric surface distance in mm for one label.
pub fn hd95(a: &Segmentation, b: &Segmentation, label: i32, spacing_mm: [f32; 3]) -> Result<f64> {
    same_shape(a, b)?;
    if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(FmirError::InvalidArgument(format!("spacing must be positive, got {spacing_mm:?}")));
    }
    let ba = boundary(a, label);
    let bb = boundary(b, label);
    if ba.is_empty() || bb.is_empty() {
        return Err(FmirError::EmptyLabel(label));
    }
    let mut ab = directed(&ba, &bb, spacing_mm);
    let mut ba_d = directed(&bb, &ba, spacing_mm);
    Ok(percentile(&mut ab, 95.0).max(percentile(&mut ba_d, 95.0)))
}

/// Population standard deviation of log(max(det J, 1e-6)).
pub fn sdlogj(f: &DeformationField) -> Result<f64> {
    let det = jacobian_det(f)?;
    let logs: Vec<f64> = det.as_slice().iter().map(|&d| (d as f64).max(LOG_JAC_FLOOR).ln()).collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    Ok((logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Mean Euclidean norm of the voxelwise difference.
pub fn endpoint_error(pred: &DeformationField, gt: &DeformationField) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(FmirError::ShapeMismatch(format!(
            "fields {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (p, g) = (pred.disp(), gt.disp());
    let [h, w, d] = pred.shape();
    let mut sum = 0.0f64;
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                let sq: f64 = (0..3)
                    .map(|c| {
                        let e = p[[c, x, y, z]] as f64 - g[[c, x, y, z]] as f64;
                        e * e
                    })
                    .sum();
                sum += sq.sqrt();
            }
        }
    }
    Ok(sum / (h * w * d) as f64)
}

/// Per-pair metrics. HD95 is reported per label and as the mean over labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pair: String,
    pub dice_per_label: BTreeMap<i32, f64>,
    pub dice_mean: f64,
    pub initial_dice_mean: f64,
    /// `None` where the label is missing from either mask.
    pub hd95_per_label: BTreeMap<i32, Option<f64>>,
    pub hd95_mean_over_labels: Option<f64>,
    pub sdlogj: f64,
    pub endpoint_error: Option<f64>,
    pub time_s: f64,
}

impl MetricsReport {
    /// Scores `warped_seg` against `fixed_seg`; `initial_seg` is the unwarped
    /// moving segmentation.
    pub fn compute(
        pair: impl Into<String>,
        warped_seg: &Segmentation,
        fixed_seg: &Segmentation,
        initial_seg: &Segmentation,
        field: &DeformationField,
        gt: Option<&DeformationField>,
        spacing_mm: [f32; 3],
        time_s: f64,
    ) -> Result<Self> {
        let dice = dice_score(warped_seg, fixed_seg)?;
        let initial = dice_score(initial_seg, fixed_seg)?;
        let mut hd = BTreeMap::new();
        for &l in dice.per_label.keys() {
            let v = match hd95(warped_seg, fixed_seg, l, spacing_mm) {
                Ok(v) => Some(v),
                Err(FmirError::EmptyLabel(_)) => None,
                Err(e) => return Err(e),
            };
            hd.insert(l, v);
        }
        let present: Vec<f64> = hd.values().flatten().copied().collect();
        let hd95_mean_over_labels = if present.len() == hd.len() && !present.is_empty() {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        } else {
            None
        };
        Ok(MetricsReport {
            pair: pair.into(),
            dice_per_label: dice.per_label,
            dice_mean: dice.mean,
            initial_dice_mean: initial.mean,
            hd95_per_label: hd,
            hd95_mean_over_labels,
            sdlogj: sdlogj(field)?,
            endpoint_error: gt.map(|g| endpoint_error(field, g)).transpose()?,
            time_s,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Some(Stat { mean, std, count: values.len() })
    }
}

/// Mean and population std per metric over a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub metrics: BTreeMap<String, Stat>,
    /// Pairs left out of the HD95 aggregate because a label was missing.
    pub hd95_missing_label_pairs: usize,
    pub pairs: usize,
}

impl AggregateReport {
    pub fn from_reports(reports: &[MetricsReport]) -> Self {
        let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut missing = 0;
        for r in reports {
            let mut push = |k: String, v: f64| cols.entry(k).or_default().push(v);
            push("dice_mean".into(), r.dice_mean);
            push("initial_dice_mean".into(), r.initial_dice_mean);
            for (l, d) in &r.dice_per_label {
                push(format!("dice_label_{l}"), *d);
            }
            match r.hd95_mean_over_labels {
                Some(v) => push("hd95_mean_over_labels".into(), v),
                None => missing += 1,
            }
            push("sdlogj".into(), r.sdlogj);
            if let Some(e) = r.endpoint_error {
                push("endpoint_error".into(), e);
            }
            push("time_s".into(), r.time_s);
        }
        if missing > 0 {
            log::warn!("{missing} pair(s) excluded from the HD95 aggregate: label missing");
        }
        AggregateReport {
            metrics: cols.into_iter().filter_map(|(k, v)| Stat::of(&v).map(|s| (k, s))).collect(),
            hd95_missing_label_pairs: missing,
            pairs: reports.len(),
        }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).map(|s| s.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,mean,std,count\n");
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k},{},{},{}\n", v.mean, v.std, v.count));
        }
        s
    }
}
