//! Segmentation scoring: confusion matrix, per-class IoU and mIoU.

use std::path::Path;

use crate::io::{write_ppm, Raster};

use super::{Result, SuperviseError};

/// Row-major confusion matrix, rows = ground truth, cols = prediction.
/// Pixels whose truth equals `ignore` are skipped.
pub fn confusion_matrix(
    pred: &Raster<u16>,
    truth: &Raster<u16>,
    classes: usize,
    ignore: u16,
) -> Result<Vec<u64>> {
    if !pred.same_shape(truth) {
        return Err(SuperviseError::Shape(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let mut cm = vec![0u64; classes * classes];
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        if t == ignore {
            continue;
        }
        if t as usize >= classes {
            return Err(SuperviseError::LabelOutOfRange { label: t, classes });
        }
        if p as usize >= classes {
            return Err(SuperviseError::LabelOutOfRange { label: p, classes });
        }
        cm[t as usize * classes + p as usize] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    /// IoU per class; None when the class appears in neither truth nor
    /// prediction.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes present in the ground truth.
    pub mean_present: f64,
    /// Mean over all classes with nonzero union.
    pub mean_all: f64,
}

/// Accumulates the confusion matrix over (prediction, truth) raster pairs
/// and reports per-class IoU and the two mean variants.
pub fn evaluate_miou(
    pairs: &[(&Raster<u16>, &Raster<u16>)],
    classes: usize,
    ignore: u16,
) -> Result<MiouReport> {
    let mut cm = vec![0u64; classes * classes];
    for (pred, truth) in pairs {
        for (v, add) in cm.iter_mut().zip(confusion_matrix(pred, truth, classes, ignore)?) {
            *v += add;
        }
    }
    let mut per_class = Vec::with_capacity(classes);
    let (mut sum_present, mut n_present) = (0.0, 0usize);
    let (mut sum_all, mut n_all) = (0.0, 0usize);
    for c in 0..classes {
        let tp = cm[c * classes + c];
        let truth_total: u64 = (0..classes).map(|p| cm[c * classes + p]).sum();
        let pred_total: u64 = (0..classes).map(|t| cm[t * classes + c]).sum();
        let union = truth_total + pred_total - tp;
        if union == 0 {
            per_class.push(None);
            continue;
        }
        let iou = tp as f64 / union as f64;
        per_class.push(Some(iou));
        sum_all += iou;
        n_all += 1;
        if truth_total > 0 {
            sum_present += iou;
            n_present += 1;
        }
    }
    Ok(MiouReport {
        per_class,
        mean_present: if n_present == 0 { 0.0 } else { sum_present / n_present as f64 },
        mean_all: if n_all == 0 { 0.0 } else { sum_all / n_all as f64 },
    })
}

fn class_color(class: u16) -> [u8; 3] {
    // Golden-angle hue walk keeps nearby class ids visually distinct.
    let h = (class as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (h.rem_euclid(2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Writes the RGB image blended half-and-half with per-class colors.
pub fn write_class_overlay(
    rgb: &Raster<[u8; 3]>,
    classes: &Raster<u16>,
    path: &Path,
) -> std::result::Result<(), crate::io::IoError> {
    let mut out = Raster::new(rgb.width(), rgb.height(), [0u8; 3]);
    for y in 0..rgb.height() {
        for x in 0..rgb.width() {
            let base = rgb.get(y, x);
            let tint = class_color(classes.get(y, x));
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = ((base[c] as u16 + tint[c] as u16) / 2) as u8;
            }
            out.set(y, x, px);
        }
    }
    write_ppm(&out, path)
}
