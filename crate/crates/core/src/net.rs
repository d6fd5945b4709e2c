//! The parsing network: shared core plus one segmentation head per domain.
//!
//! The core is a small depthwise-separable CNN producing a three-scale
//! feature pyramid and a full-resolution feature map:
//!
//! ```text
//! image [3, H, W]
//!   -> stem 3x3/2 + relu            [D, H/2,  W/2 ]
//!   -> enc2 ds/2                    [D, H/4,  W/4 ]
//!   -> enc3 ds/2                    [D, H/8,  W/8 ]
//!   -> enc4 ds/2                    [D, H/16, W/16]
//!   h1 = ds(enc4)                   S_1  at 1/16   (scale l = 1, coarsest)
//!   h2 = ds(up2(S_1) + enc3)        S_2  at 1/8    (scale l = 2)
//!   h3 = ds(up2(S_2) + enc2)        S_3  at 1/4    (scale l = 3)
//!   F  = relu(up4(pw(S_3)) + pw(image))   [D, H, W]
//! ```
//!
//! where `ds` is depthwise-3x3 then pointwise-1x1 then relu.  Each head is a
//! per-pixel affine map `F -> [Z, H, W]`.  Heads and core are all a deployed
//! model needs; the training-only modules ([`crate::msa`], [`crate::mse`],
//! [`crate::mst`]) hang off the pyramid and `F` returned here.
//!
//! Images must have height and width divisible by 16 so the scales divide
//! evenly.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, VarId};
use crate::domain::LabelDomain;
use crate::error::{Result, SstError};
use crate::imgio::GrayImage;
use crate::params::{xavier_uniform, Binder, ParamStore};
use crate::tensor::Tensor;

/// Height and width must be divisible by this so all scales divide evenly.
pub const SIZE_DIVISOR: usize = 16;

/// Number of pyramid scales feeding the training-time modules.
pub const NUM_SCALES: usize = 3;

/// Check the image-size precondition, naming the offending dimension.
pub fn check_image_size(height: usize, width: usize) -> Result<()> {
    for (dim, v) in [("height", height), ("width", width)] {
        if v == 0 || v % SIZE_DIVISOR != 0 {
            return Err(SstError::Shape(format!(
                "image {dim} {v} must be a positive multiple of {SIZE_DIVISOR}"
            )));
        }
    }
    Ok(())
}

/// Core parameter names in binding order.
const CORE_NAMES: [&str; 27] = [
    "core.stem.w",
    "core.stem.b",
    "core.enc2.dw",
    "core.enc2.pw",
    "core.enc2.b",
    "core.enc3.dw",
    "core.enc3.pw",
    "core.enc3.b",
    "core.enc4.dw",
    "core.enc4.pw",
    "core.enc4.b",
    "core.h1.dw",
    "core.h1.pw",
    "core.h1.b",
    "core.h2.dw",
    "core.h2.pw",
    "core.h2.b",
    "core.h3.dw",
    "core.h3.pw",
    "core.h3.b",
    "core.fproj.w",
    "core.fproj.b",
    "core.imgskip.w",
    "core.imgskip.b",
    "core.out.w",
    "core.out.b",
    "core.dim",
];

/// Register the core parameters (tag `core`) with Xavier-uniform weights.
pub fn init_core(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) {
    assert!(d >= 1, "feature dimension must be positive");
    store.insert("core.stem.w", "core", xavier_uniform(rng, &[d, 3, 3, 3], 3 * 9, d * 9));
    store.insert("core.stem.b", "core", Tensor::zeros(&[d]));
    for block in ["enc2", "enc3", "enc4", "h1", "h2", "h3"] {
        store.insert(
            &format!("core.{block}.dw"),
            "core",
            xavier_uniform(rng, &[d, 3, 3], 9, 9),
        );
        store.insert(
            &format!("core.{block}.pw"),
            "core",
            xavier_uniform(rng, &[d, d], d, d),
        );
        store.insert(&format!("core.{block}.b"), "core", Tensor::zeros(&[d]));
    }
    store.insert("core.fproj.w", "core", xavier_uniform(rng, &[d, d], d, d));
    store.insert("core.fproj.b", "core", Tensor::zeros(&[d]));
    store.insert("core.imgskip.w", "core", xavier_uniform(rng, &[d, 3], 3, d));
    store.insert("core.imgskip.b", "core", Tensor::zeros(&[d]));
    store.insert("core.out.w", "core", xavier_uniform(rng, &[d, d], d, d));
    store.insert("core.out.b", "core", Tensor::zeros(&[d]));
    // The dimension rides along as a 1-element tensor so checkpoints are
    // self-describing without a side channel.
    store.insert("core.dim", "core", Tensor::from_vec(&[1], vec![d as f32]));
}

/// The feature dimension a store was initialized with.
pub fn core_dim(store: &ParamStore) -> usize {
    store.get("core.dim").data()[0] as usize
}

/// Register one domain head (tag `head:<domain>`).
pub fn init_head(store: &mut ParamStore, rng: &mut ChaCha8Rng, domain: &LabelDomain, d: usize) {
    let z = domain.z();
    store.insert(
        &format!("head.{}.w", domain.id),
        &format!("head:{}", domain.id),
        xavier_uniform(rng, &[z, d], d, z),
    );
    store.insert(
        &format!("head.{}.b", domain.id),
        &format!("head:{}", domain.id),
        Tensor::zeros(&[z]),
    );
}

struct DsVars {
    dw: VarId,
    pw: VarId,
    b: VarId,
}

/// Core parameters bound into a graph.
pub struct CoreVars {
    stem_w: VarId,
    stem_b: VarId,
    enc2: DsVars,
    enc3: DsVars,
    enc4: DsVars,
    h1: DsVars,
    h2: DsVars,
    h3: DsVars,
    fproj_w: VarId,
    fproj_b: VarId,
    imgskip_w: VarId,
    imgskip_b: VarId,
    out_w: VarId,
    out_b: VarId,
}

impl CoreVars {
    pub fn bind(binder: &mut Binder) -> CoreVars {
        // `core.dim` is metadata, not part of the computation.
        let ids: Vec<VarId> = CORE_NAMES[..CORE_NAMES.len() - 1]
            .iter()
            .map(|n| binder.bind(n))
            .collect();
        CoreVars::from_vars(ids)
    }

    /// Assemble from pre-created variables in `CORE_NAMES` order (without
    /// the trailing `core.dim`); used directly by gradient checks.
    pub fn from_vars(vars: impl IntoIterator<Item = VarId>) -> CoreVars {
        let mut it = vars.into_iter();
        let mut next = || it.next().expect("core variable list too short");
        let ds = |next: &mut dyn FnMut() -> VarId| DsVars {
            dw: next(),
            pw: next(),
            b: next(),
        };
        let c = CoreVars {
            stem_w: next(),
            stem_b: next(),
            enc2: ds(&mut next),
            enc3: ds(&mut next),
            enc4: ds(&mut next),
            h1: ds(&mut next),
            h2: ds(&mut next),
            h3: ds(&mut next),
            fproj_w: next(),
            fproj_b: next(),
            imgskip_w: next(),
            imgskip_b: next(),
            out_w: next(),
            out_b: next(),
        };
        assert!(it.next().is_none(), "core variable list too long");
        c
    }

    /// Names of the computational core parameters in binding order.
    pub fn names() -> &'static [&'static str] {
        &CORE_NAMES[..CORE_NAMES.len() - 1]
    }
}

/// One domain head bound into a graph.
pub struct HeadVars {
    pub w: VarId,
    pub b: VarId,
}

impl HeadVars {
    pub fn bind(binder: &mut Binder, domain_id: &str) -> HeadVars {
        HeadVars {
            w: binder.bind(&format!("head.{domain_id}.w")),
            b: binder.bind(&format!("head.{domain_id}.b")),
        }
    }
}

/// Multi-scale features for one image.
pub struct Pyramid {
    /// `[D, H/16, W/16]` — scale l = 1, the coarsest.
    pub s1: VarId,
    /// `[D, H/8, W/8]` — scale l = 2.
    pub s2: VarId,
    /// `[D, H/4, W/4]` — scale l = 3.
    pub s3: VarId,
    /// `[D, H, W]` — full-resolution features the heads consume.
    pub f: VarId,
}

impl Pyramid {
    /// Pyramid scales indexed `l - 1`: position 0 holds scale l = 1 (1/16).
    pub fn scales(&self) -> [VarId; NUM_SCALES] {
        [self.s1, self.s2, self.s3]
    }
}

fn ds_block(g: &mut Graph, x: VarId, p: &DsVars, stride: usize) -> VarId {
    let y = g.depthwise3x3(x, p.dw, None, stride, 1);
    let y = g.affine_map(p.pw, y, Some(p.b));
    g.relu(y)
}

/// Run the core over one image tensor `[3, H, W]` (H, W divisible by 16).
pub fn forward_core(g: &mut Graph, core: &CoreVars, image: VarId) -> Pyramid {
    let shape = g.value(image).shape().to_vec();
    assert_eq!(shape.len(), 3, "image tensor must be [3, h, w]");
    assert_eq!(shape[0], 3, "image tensor must have 3 channels");
    assert!(
        shape[1] % SIZE_DIVISOR == 0 && shape[2] % SIZE_DIVISOR == 0,
        "image {}x{} not divisible by {SIZE_DIVISOR}",
        shape[1],
        shape[2]
    );

    let x1 = g.conv2d(image, core.stem_w, Some(core.stem_b), 2, 1);
    let x1 = g.relu(x1);
    let x2 = ds_block(g, x1, &core.enc2, 2);
    let x3 = ds_block(g, x2, &core.enc3, 2);
    let x4 = ds_block(g, x3, &core.enc4, 2);

    let s1 = ds_block(g, x4, &core.h1, 1);
    let u2 = g.upsample_nearest(s1, 2);
    let u2 = g.add(u2, x3);
    let s2 = ds_block(g, u2, &core.h2, 1);
    let u3 = g.upsample_nearest(s2, 2);
    let u3 = g.add(u3, x2);
    let s3 = ds_block(g, u3, &core.h3, 1);

    let fp = g.affine_map(core.fproj_w, s3, Some(core.fproj_b));
    let fp = g.upsample_nearest(fp, 4);
    let skip = g.affine_map(core.imgskip_w, image, Some(core.imgskip_b));
    let merged = g.add(fp, skip);
    let merged = g.relu(merged);
    let f = g.affine_map(core.out_w, merged, Some(core.out_b));

    Pyramid { s1, s2, s3, f }
}

/// Per-pixel logits `[Z, H, W]` for one head.
pub fn seg_logits(g: &mut Graph, head: &HeadVars, features: VarId) -> VarId {
    g.affine_map(head.w, features, Some(head.b))
}

/// Mean cross-entropy of head logits against a label raster (255 ignored).
pub fn seg_loss(g: &mut Graph, logits: VarId, labels: &GrayImage) -> VarId {
    let shape = g.value(logits).shape();
    assert_eq!(
        (labels.height, labels.width),
        (shape[1], shape[2]),
        "label raster size does not match logits"
    );
    g.cross_entropy_mean(logits, Rc::new(labels.data.clone()))
}

/// Argmax over the category axis of `[Z, H, W]` logits; ties resolve to the
/// lowest index so predictions are platform-independent.
pub fn argmax_labels(logits: &Tensor, height: usize, width: usize) -> GrayImage {
    let z = logits.shape()[0];
    let hw = height * width;
    assert_eq!(logits.numel(), z * hw, "logit shape mismatch");
    let mut out = GrayImage::new(width, height, 0);
    let data = logits.data();
    for p in 0..hw {
        let mut best = 0usize;
        let mut best_v = data[p];
        for zi in 1..z {
            let v = data[zi * hw + p];
            if v > best_v {
                best_v = v;
                best = zi;
            }
        }
        out.data[p] = best as u8;
    }
    out
}

/// Inference: predicted label raster for one image under one domain head.
/// Uses only `core` and `head:<domain>` parameters.
pub fn predict(store: &ParamStore, domain_id: &str, image: &Tensor) -> Result<GrayImage> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(SstError::Shape(format!(
            "predict expects a [3, h, w] image tensor, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    check_image_size(h, w)?;
    let mut g = Graph::new();
    let mut binder = Binder::new_frozen(&mut g, store);
    let core = CoreVars::bind(&mut binder);
    let head = HeadVars::bind(&mut binder, domain_id);
    drop(binder);
    let img = g.constant(image.clone());
    let pyr = forward_core(&mut g, &core, img);
    let logits = seg_logits(&mut g, &head, pyr.f);
    Ok(argmax_labels(g.value(logits), h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::dataset::image_to_tensor;
    use crate::params::Adam;
    use crate::synth;
    use rand::{Rng, SeedableRng};

    fn store_with(d: usize, domains: &[&LabelDomain]) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        init_core(&mut store, &mut rng, d);
        for dom in domains {
            init_head(&mut store, &mut rng, dom, d);
        }
        store
    }

    #[test]
    fn pyramid_shapes_at_48() {
        let (coarse, _, _) = synth::builtin_domains();
        let store = store_with(8, &[&coarse]);
        let mut g = Graph::new();
        let mut binder = Binder::new(&mut g, &store);
        let core = CoreVars::bind(&mut binder);
        let head = HeadVars::bind(&mut binder, "coarse");
        drop(binder);
        let img = g.constant(Tensor::zeros(&[3, 48, 64]));
        let pyr = forward_core(&mut g, &core, img);
        assert_eq!(g.value(pyr.s1).shape(), &[8, 3, 4]);
        assert_eq!(g.value(pyr.s2).shape(), &[8, 6, 8]);
        assert_eq!(g.value(pyr.s3).shape(), &[8, 12, 16]);
        assert_eq!(g.value(pyr.f).shape(), &[8, 48, 64]);
        let logits = seg_logits(&mut g, &head, pyr.f);
        assert_eq!(g.value(logits).shape(), &[5, 48, 64]);
    }

    #[test]
    fn image_size_checks() {
        assert!(check_image_size(48, 48).is_ok());
        assert!(check_image_size(47, 48).is_err());
        assert!(check_image_size(48, 0).is_err());
        let store = store_with(4, &[]);
        let bad = Tensor::zeros(&[3, 20, 16]);
        assert!(predict(&store, "coarse", &bad).is_err());
    }

    /// End-to-end gradient check through the full core, one head and the
    /// segmentation loss on a small image.  The seeds are chosen so no relu
    /// pre-activation sits within the finite-difference step of its kink;
    /// the observed error margin is three orders below the tolerance.
    #[test]
    fn core_and_head_gradients_match_finite_differences() {
        let (coarse, _, _) = synth::builtin_domains();
        let d = 3;
        let store = {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            init_core(&mut store, &mut rng, d);
            init_head(&mut store, &mut rng, &coarse, d);
            store
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let image = Tensor::from_vec(
            &[3, 16, 16],
            (0..3 * 256).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let labels: Rc<Vec<u8>> = Rc::new(
            (0..256)
                .map(|i| if i % 17 == 0 { 255 } else { rng.gen_range(0..5) })
                .collect(),
        );

        let mut names: Vec<String> = CoreVars::names().iter().map(|s| s.to_string()).collect();
        names.push("head.coarse.w".into());
        names.push("head.coarse.b".into());
        let inits: Vec<Tensor> = names.iter().map(|n| store.get(n).clone()).collect();

        gradcheck(
            |g, ids| {
                let core = CoreVars::from_vars(ids[..ids.len() - 2].iter().copied());
                let head = HeadVars {
                    w: ids[ids.len() - 2],
                    b: ids[ids.len() - 1],
                };
                let img = g.constant(image.clone());
                let pyr = forward_core(g, &core, img);
                let logits = seg_logits(g, &head, pyr.f);
                g.cross_entropy_mean(logits, labels.clone())
            },
            &inits,
            1e-3,
            1e-3,
        );
    }

    #[test]
    fn predict_is_deterministic_and_in_range() {
        let (coarse, _, _) = synth::builtin_domains();
        let store = store_with(8, &[&coarse]);
        let reg = synth::builtin_registry();
        let fig = synth::sample_figure(3, (48, 48)).unwrap();
        let sample = synth::rasterize(&fig, &reg, synth::LADDER).unwrap();
        let img = image_to_tensor(&sample.image);
        let a = predict(&store, "coarse", &img).unwrap();
        let b = predict(&store, "coarse", &img).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|&v| (v as usize) < coarse.z()));
    }

    /// A few optimizer steps on one sample must reduce the loss: the whole
    /// net is trainable end to end.
    #[test]
    fn short_training_reduces_seg_loss() {
        let (coarse, _, _) = synth::builtin_domains();
        let mut store = store_with(8, &[&coarse]);
        let reg = synth::builtin_registry();
        let fig = synth::sample_figure(1, (48, 48)).unwrap();
        let sample = synth::rasterize(&fig, &reg, synth::LADDER).unwrap();
        let img = image_to_tensor(&sample.image);
        let labels = &sample.labels["coarse"];

        let mut opt = Adam::new();
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for step in 0..30 {
            let mut g = Graph::new();
            let mut binder = Binder::new(&mut g, &store);
            let core = CoreVars::bind(&mut binder);
            let head = HeadVars::bind(&mut binder, "coarse");
            let bound = binder.finish();
            let image = g.constant(img.clone());
            let pyr = forward_core(&mut g, &core, image);
            let logits = seg_logits(&mut g, &head, pyr.f);
            let loss = seg_loss(&mut g, logits, labels);
            let v = g.scalar_f64(loss);
            if step == 0 {
                first = v;
            }
            last = v;
            g.backward(loss);
            opt.step(&mut store, &g, &bound, 1e-2);
        }
        assert!(
            last < 0.5 * first,
            "loss did not drop: {first} -> {last}"
        );
    }
}
