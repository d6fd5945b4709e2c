//! Evaluation and deployment utilities: confusion-matrix metrics (mIoU,
//! mean accuracy), test-split evaluation reports, the inference export that
//! strips every auxiliary module, label-map rendering, and the six-row
//! component ablation grid.
//!
//! Metric conventions: ignore-pixels (255) never enter the confusion matrix;
//! classes with zero union are excluded from the mIoU mean rather than
//! counted as zero (required for small test sets where rare classes may be
//! absent); mean accuracy averages over classes that actually occur in the
//! ground truth.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, IGNORE_LABEL};
use crate::checkpoint::CheckpointMeta;
use crate::dataset::{image_to_tensor, Dataset, Split};
use crate::error::{Result, SstError};
use crate::imgio::{GrayImage, RgbImage};
use crate::net::{check_image_size, forward_core, predict, seg_logits, CoreVars, HeadVars};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::{train_universal, AuxMode, EpochLog, TrainConfig};

/// Pixel counts: `confusion[g][p]` is the number of non-ignored pixels with
/// ground truth `g` predicted as `p`.
pub type Confusion = Vec<Vec<u64>>;

/// Tally one prediction against its ground truth.  Ground-truth 255 pixels
/// are skipped; any other out-of-range value on either side is an error
/// naming the offending coordinate.
pub fn confusion(pred: &GrayImage, gt: &GrayImage, z: usize) -> Result<Confusion> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(SstError::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut cm = vec![vec![0u64; z]; z];
    for y in 0..gt.height {
        for x in 0..gt.width {
            let g = gt.data[y * gt.width + x];
            if g == IGNORE_LABEL {
                continue;
            }
            let p = pred.data[y * gt.width + x];
            for (value, side) in [(g, "ground truth"), (p, "prediction")] {
                if value as usize >= z {
                    let _ = side;
                    return Err(SstError::LabelOutOfRange {
                        value: value as u16,
                        x,
                        y,
                        num_labels: z,
                    });
                }
            }
            cm[g as usize][p as usize] += 1;
        }
    }
    Ok(cm)
}

/// Add `other` into `cm` (evaluation over samples merges by addition).
pub fn merge_confusion(cm: &mut Confusion, other: &Confusion) {
    for (row, orow) in cm.iter_mut().zip(other) {
        for (v, o) in row.iter_mut().zip(orow) {
            *v += o;
        }
    }
}

/// Per-class intersection-over-union; `None` for classes absent from both
/// prediction and ground truth (zero union).
pub fn per_class_iou(cm: &Confusion) -> Vec<Option<f64>> {
    let z = cm.len();
    (0..z)
        .map(|c| {
            let diag = cm[c][c];
            let row: u64 = cm[c].iter().sum();
            let col: u64 = cm.iter().map(|r| r[c]).sum();
            let union = row + col - diag;
            (union > 0).then(|| diag as f64 / union as f64)
        })
        .collect()
}

/// Mean IoU over classes with nonzero union; 0 (with a warning) when the
/// matrix is entirely empty.
pub fn miou(cm: &Confusion) -> f64 {
    let ious: Vec<f64> = per_class_iou(cm).into_iter().flatten().collect();
    if ious.is_empty() {
        log::warn!("mIoU of an empty confusion matrix defined as 0");
        return 0.0;
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

/// Per-class accuracy; `None` for classes absent from the ground truth.
pub fn per_class_acc(cm: &Confusion) -> Vec<Option<f64>> {
    cm.iter()
        .enumerate()
        .map(|(c, row)| {
            let total: u64 = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect()
}

/// Mean accuracy over classes that occur in the ground truth; 0 (with a
/// warning) when nothing does.
pub fn mean_acc(cm: &Confusion) -> f64 {
    let accs: Vec<f64> = per_class_acc(cm).into_iter().flatten().collect();
    if accs.is_empty() {
        log::warn!("mean accuracy of an empty confusion matrix defined as 0");
        return 0.0;
    }
    accs.iter().sum::<f64>() / accs.len() as f64
}

/// Evaluation result for one domain over one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub per_class_acc: Vec<Option<f64>>,
    pub mean_acc: f64,
    /// Non-ignored pixels counted (equals the confusion-matrix total).
    pub pixel_count: u64,
    pub confusion: Confusion,
    /// Echo of whatever configuration produced this report.
    pub config: serde_json::Value,
}

impl MetricsReport {
    /// Derive every metric from a confusion matrix.
    pub fn from_confusion(cm: Confusion, config: serde_json::Value) -> MetricsReport {
        MetricsReport {
            per_class_iou: per_class_iou(&cm),
            miou: miou(&cm),
            per_class_acc: per_class_acc(&cm),
            mean_acc: mean_acc(&cm),
            pixel_count: cm.iter().flatten().sum(),
            confusion: cm,
            config,
        }
    }
}

/// Evaluate one domain's head over a dataset split.
pub fn evaluate(
    ds: &Dataset,
    store: &ParamStore,
    domain_id: &str,
    split: Split,
    config: serde_json::Value,
) -> Result<MetricsReport> {
    let z = ds.registry.domain(domain_id)?.z();
    let mut cm = vec![vec![0u64; z]; z];
    for idx in ds.split_indices(split) {
        let sample = ds.load_sample(idx)?;
        let gt = sample.labels.get(domain_id).ok_or_else(|| {
            SstError::Config(format!(
                "sample '{}' lacks labels for '{domain_id}'",
                sample.id
            ))
        })?;
        let pred = predict(store, domain_id, &image_to_tensor(&sample.image))?;
        merge_confusion(&mut cm, &confusion(&pred, gt, z)?);
    }
    Ok(MetricsReport::from_confusion(cm, config))
}

/// Raw head logits `[Z, H, W]` for one image, with every auxiliary module
/// out of the picture — the inference path.
pub fn head_logits(store: &ParamStore, domain_id: &str, image: &Tensor) -> Result<Tensor> {
    let shape = image.shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(SstError::Shape(format!(
            "expected [3, h, w] image, got {shape:?}"
        )));
    }
    check_image_size(shape[1], shape[2])?;
    for suffix in ["w", "b"] {
        let name = format!("head.{domain_id}.{suffix}");
        if !store.contains(&name) {
            return Err(SstError::Checkpoint(format!(
                "checkpoint has no '{name}' (unknown domain '{domain_id}'?)"
            )));
        }
    }
    let mut g = Graph::new();
    let mut binder = Binder::new_frozen(&mut g, store);
    let core = CoreVars::bind(&mut binder);
    let head = HeadVars::bind(&mut binder, domain_id);
    binder.finish();
    let img = g.constant(image.clone());
    let pyr = forward_core(&mut g, &core, img);
    let logits = seg_logits(&mut g, &head, pyr.f);
    Ok(g.value(logits).clone())
}

/// Number of seeded inputs the export verification runs per head.
pub const EXPORT_CHECK_INPUTS: usize = 20;

/// Strip a training checkpoint down to its inference components: the core
/// network and the requested domains' heads.  Before returning, both stores
/// run the inference path on [`EXPORT_CHECK_INPUTS`] seeded random images
/// per domain and every logit must match bitwise; any difference aborts the
/// export naming the first offending input, pixel, and values.
pub fn export_inference(
    store: &ParamStore,
    meta: &CheckpointMeta,
    domains: &[String],
) -> Result<(ParamStore, CheckpointMeta)> {
    if domains.is_empty() {
        return Err(SstError::Config("export needs at least one domain".into()));
    }
    let mut keep_tags = vec!["core".to_string()];
    for d in domains {
        for suffix in ["w", "b"] {
            let name = format!("head.{d}.{suffix}");
            if !store.contains(&name) {
                return Err(SstError::Checkpoint(format!(
                    "checkpoint has no '{name}' — cannot export domain '{d}'"
                )));
            }
        }
        keep_tags.push(format!("head:{d}"));
    }
    let mut out = ParamStore::new();
    for (name, e) in store.iter() {
        if keep_tags.iter().any(|t| t == &e.tag) {
            out.insert(name, &e.tag, e.tensor.clone());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5e_ed);
    for i in 0..EXPORT_CHECK_INPUTS {
        let data: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Tensor::from_vec(&[3, 32, 32], data);
        for d in domains {
            let full = head_logits(store, d, &img)?;
            let stripped = head_logits(&out, d, &img)?;
            for (k, (a, b)) in full.data().iter().zip(stripped.data()).enumerate() {
                if a.to_bits() != b.to_bits() {
                    return Err(SstError::Checkpoint(format!(
                        "export verification failed: input {i}, domain '{d}', \
                         logit {k}: full {a} vs exported {b}"
                    )));
                }
            }
        }
    }

    let out_meta = CheckpointMeta {
        config: serde_json::json!({
            "regime": "export",
            "domains": domains,
            "base": meta.config,
        }),
        epoch: meta.epoch,
        seed: meta.seed,
        registry_hash: meta.registry_hash.clone(),
    };
    Ok((out, out_meta))
}

/// Colorize a label raster with a palette; ignore-pixels render black.
pub fn render(labels: &GrayImage, palette: &[[u8; 3]]) -> Result<RgbImage> {
    let mut img = RgbImage::new(labels.width, labels.height);
    for y in 0..labels.height {
        for x in 0..labels.width {
            let v = labels.data[y * labels.width + x];
            let rgb = if v == IGNORE_LABEL {
                [0, 0, 0]
            } else if (v as usize) < palette.len() {
                palette[v as usize]
            } else {
                return Err(SstError::LabelOutOfRange {
                    value: v as u16,
                    x,
                    y,
                    num_labels: palette.len(),
                });
            };
            img.data[(y * labels.width + x) * 3..][..3].copy_from_slice(&rgb);
        }
    }
    Ok(img)
}

/// One row of the component ablation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub aux_loss: AuxMode,
    pub scr_dataset: bool,
    pub scr_image: bool,
    /// Test mIoU per domain.
    pub miou: BTreeMap<String, f64>,
    /// Final-epoch training log (shows which loss components were active).
    pub final_log: EpochLog,
    /// Full evaluation report per domain.
    pub reports: BTreeMap<String, MetricsReport>,
}

/// The six ablation configurations, cumulative in the usual presentation:
/// plain multi-dataset baseline, auxiliary loss without/with the intra-body
/// mask, then each consistency loss alone and both together on top of the
/// masked auxiliary loss.
pub fn ablation_grid(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |label: &str, aux: AuxMode, ds: bool, img: bool| {
        (
            label.to_string(),
            TrainConfig {
                aux_loss: aux,
                scr_dataset: ds,
                scr_image: img,
                ..base.clone()
            },
        )
    };
    vec![
        with("baseline", AuxMode::Off, false, false),
        with("+aux (unmasked)", AuxMode::Unmasked, false, false),
        with("+aux (masked)", AuxMode::Masked, false, false),
        with("+scr-dataset", AuxMode::Masked, true, false),
        with("+scr-image", AuxMode::Masked, false, true),
        with("+scr-both", AuxMode::Masked, true, true),
    ]
}

/// Train and evaluate every ablation row on `ds`.  Each row trains from the
/// same seed with only the component toggles changed, then reports test
/// mIoU for every trained domain.
pub fn ablate(ds: &Dataset, base: &TrainConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (label, cfg) in ablation_grid(base) {
        let outcome = train_universal(ds, &cfg, None)?;
        let doms = cfg.resolved_domains(&ds.registry)?;
        let mut miou_map = BTreeMap::new();
        let mut reports = BTreeMap::new();
        for d in &doms {
            let report = evaluate(
                ds,
                &outcome.store,
                d,
                Split::Test,
                serde_json::json!({ "ablation_row": label, "domain": d }),
            )?;
            miou_map.insert(d.clone(), report.miou);
            reports.insert(d.clone(), report);
        }
        rows.push(AblationRow {
            label: label.clone(),
            aux_loss: cfg.aux_loss,
            scr_dataset: cfg.scr_dataset,
            scr_image: cfg.scr_image,
            miou: miou_map,
            final_log: outcome.logs.last().expect("at least one epoch").clone(),
            reports,
        });
    }
    Ok(rows)
}

/// Align the ablation rows into a fixed-width text table (mIoU per domain,
/// in percent).
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let doms: Vec<&String> = rows
        .first()
        .map(|r| r.miou.keys().collect())
        .unwrap_or_default();
    let mut out = String::new();
    out.push_str(&format!("{:<18}", "row"));
    for d in &doms {
        out.push_str(&format!("{:>10}", d));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:<18}", r.label));
        for d in &doms {
            out.push_str(&format!("{:>10.2}", r.miou[*d] * 100.0));
        }
        out.push('\n');
    }
    out
}
