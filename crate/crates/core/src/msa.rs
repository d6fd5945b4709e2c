//! Mask-guided semantic aggregation (MSA).
//!
//! At each pyramid scale the ground-truth label raster selects, per category,
//! the pixels belonging to that category.  Average and max pooling over those
//! pixels are concatenated to a `[Z, 2D]` matrix and projected by a single
//! learned matrix `W_s: [2D, D]` — shared across every scale *and* every
//! domain — to the aggregated category representations `S_l: [Z, D]`.
//!
//! Categories absent at a scale (including those wiped out by downsampling)
//! produce all-zero rows; the consumers ([`crate::mse`], [`crate::mst`])
//! treat such rows as carrying no information.  Label rasters are provided at
//! full resolution and sampled down here with a fixed cell-center rule so the
//! mapping is deterministic and unambiguous.
//!
//! MSA reads ground-truth masks, so it exists only at training time.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, PoolRegions, VarId};
use crate::imgio::GrayImage;
use crate::net::{Pyramid, NUM_SCALES};
use crate::params::{xavier_uniform, Binder, ParamStore};

/// Nearest-neighbour label downsampling by integer factors, sampling the
/// center pixel of each cell (`255` passes through like any other value).
///
/// The source size must be an integer multiple of the target size.
pub fn downsample_labels(labels: &GrayImage, out_h: usize, out_w: usize) -> GrayImage {
    assert!(
        out_h > 0
            && out_w > 0
            && labels.height % out_h == 0
            && labels.width % out_w == 0,
        "downsample {}x{} -> {}x{} is not an integer reduction",
        labels.height,
        labels.width,
        out_h,
        out_w
    );
    let (fy, fx) = (labels.height / out_h, labels.width / out_w);
    let mut out = GrayImage::new(out_w, out_h, 0);
    for y in 0..out_h {
        let sy = y * fy + fy / 2;
        for x in 0..out_w {
            let sx = x * fx + fx / 2;
            out.data[y * out_w + x] = labels.data[sy * labels.width + sx];
        }
    }
    out
}

/// Register the shared aggregation projection `msa.ws: [2D, D]` (tag `msa`).
pub fn init_msa(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) {
    store.insert("msa.ws", "msa", xavier_uniform(rng, &[2 * d, d], 2 * d, d));
}

/// MSA parameters bound into a graph.
pub struct MsaVars {
    pub ws: VarId,
}

impl MsaVars {
    pub fn bind(binder: &mut Binder) -> MsaVars {
        MsaVars {
            ws: binder.bind("msa.ws"),
        }
    }
}

/// Aggregate one scale: features `[D, h, w]` plus the full-resolution label
/// raster give `[Z, D]` category representations.  Also returns the regions
/// used, so callers can ask which categories were present.
pub fn aggregate_scale(
    g: &mut Graph,
    msa: &MsaVars,
    features: VarId,
    labels: &GrayImage,
    num_labels: usize,
) -> (VarId, Rc<PoolRegions>) {
    let shape = g.value(features).shape().to_vec();
    assert_eq!(shape.len(), 3, "scale features must be [d, h, w]");
    let (h, w) = (shape[1], shape[2]);
    let down = downsample_labels(labels, h, w);
    let regions = Rc::new(PoolRegions::from_labels(&down.data, h, w, num_labels));
    let pooled = g.masked_pool(features, regions.clone());
    (g.matmul(pooled, msa.ws), regions)
}

/// Aggregate all pyramid scales; index `l - 1` holds scale `l` (coarsest
/// first, matching the semantic-prompting layer order).
pub fn aggregate_pyramid(
    g: &mut Graph,
    msa: &MsaVars,
    pyramid: &Pyramid,
    labels: &GrayImage,
    num_labels: usize,
) -> [(VarId, Rc<PoolRegions>); NUM_SCALES] {
    pyramid
        .scales()
        .map(|s| aggregate_scale(g, msa, s, labels, num_labels))
}
