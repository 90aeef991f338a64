use serde::{Deserialize, Serialize};

use super::{bde_masks, confusion, gaussian_stats, gce, instance_terms, iou, pri, voi, ConfusionCounts, LogBase, SegMask};
use crate::error::{Error, Result};

/// One prediction / ground-truth pair.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub pred: SegMask,
    pub gt: SegMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub iou: Option<f64>,
    pub pri: f64,
    pub voi: f64,
    pub gce: f64,
    pub bde: Option<f64>,
}

/// Pooled IoU/iIoU over all pixels and per-image means of the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub iou: Option<f64>,
    pub iiou: Option<f64>,
    pub pri: f64,
    pub voi: f64,
    pub gce: f64,
    pub bde: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
    pub fid: Option<f64>,
    pub config: serde_json::Value,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores every pair for `class_id`. `fid_features` holds two embedded sets
/// whose Fréchet distance is reported.
pub fn evaluate(
    items: &[EvalItem],
    class_id: u32,
    fid_features: Option<(&[Vec<f64>], &[Vec<f64>])>,
    config: serde_json::Value,
) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    let mut total = ConfusionCounts::default();
    let (mut itp, mut ifp, mut ifn, mut instances) = (0.0, 0.0, 0.0, false);
    let mut per_image = Vec::with_capacity(items.len());
    for item in items {
        let c = confusion(&item.pred, &item.gt, class_id)?;
        total += c;
        match instance_terms(&item.pred, &item.gt, class_id) {
            Ok((a, b, d)) => {
                itp += a;
                ifp += b;
                ifn += d;
                instances = true;
            }
            Err(_) => ifp += c.fp as f64,
        }
        per_image.push(ImageMetrics {
            id: item.id.clone(),
            iou: iou(&c).ok(),
            pri: pri(&item.pred, &item.gt)?,
            voi: voi(&item.pred, &item.gt, LogBase::Natural)?,
            gce: gce(&item.pred, &item.gt)?,
            bde: bde_masks(&item.pred, &item.gt)?,
        });
    }
    let fid = match fid_features {
        Some((a, b)) => Some(super::fid(&gaussian_stats(a)?, &gaussian_stats(b)?)?),
        None => None,
    };
    let aggregate = Aggregate {
        iou: iou(&total).ok(),
        iiou: instances.then(|| itp / (itp + ifp + ifn)),
        pri: mean(per_image.iter().map(|m| m.pri)).expect("non-empty"),
        voi: mean(per_image.iter().map(|m| m.voi)).expect("non-empty"),
        gce: mean(per_image.iter().map(|m| m.gce)).expect("non-empty"),
        bde: mean(per_image.iter().filter_map(|m| m.bde)),
    };
    Ok(MetricsReport { per_image, aggregate, fid, config })
}
