//! Procedural articulated-figure corpus with exact multi-granularity labels.
//!
//! Each sample is a stick figure rendered back-to-front (legs and shoes,
//! torso, arms, head, hair, hat) into a fine-granularity label raster by
//! pure integer rasterization, so generation is bit-reproducible across
//! platforms.  Coarser rasters are derived through the coarsening maps, which
//! makes every cross-granularity oracle exact by construction.  The image is
//! the palette-colored fine raster plus seeded uniform noise.
//!
//! Three domains ship built in:
//!
//! * `coarse` (Z=5): background, head, torso, arms, legs;
//! * `mid` (Z=8): background, hair, face, torso, upper/lower arms and legs;
//! * `fine` (Z=12): background, hat, hair, face, torso, left/right upper and
//!   lower arms, left/right legs, shoes.
//!
//! The figure geometry keeps declared non-adjacent part pairs at least two
//! pixels apart in every pose while forcing declared adjacent pairs to touch,
//! so each domain's `M_intra` equals the adjacency observable in rendered
//! data.  Left and right limbs share palette colors on purpose: separating
//! them requires spatial context, which keeps the parsing task from
//! degenerating into a per-pixel color lookup.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, SampleEntry, SegSample, Split, MANIFEST_NAME};
use crate::domain::{
    derive_static_from_hierarchy, save_domain, save_link, CrossLink, DomainRegistry, LabelDomain,
};
use crate::error::{Result, SstError};
use crate::imgio::{write_pgm, write_ppm, GrayImage, RgbImage};

/// The built-in granularity ladder, ordered coarse to fine.
pub const LADDER: &[&str] = &["coarse", "mid", "fine"];

// Fine-domain label values.
const BG: u8 = 0;
const HAT: u8 = 1;
const HAIR: u8 = 2;
const FACE: u8 = 3;
const TORSO: u8 = 4;
const LUA: u8 = 5;
const RUA: u8 = 6;
const LLA: u8 = 7;
const RLA: u8 = 8;
const LLEG: u8 = 9;
const RLEG: u8 = 10;
const SHOES: u8 = 11;

/// sin(5k degrees) * 1024 for k = 1..=17 (5 deg .. 85 deg).
const SIN_Q10: [i64; 17] = [
    89, 178, 265, 350, 433, 512, 587, 658, 724, 784, 839, 887, 928, 962, 989, 1008, 1020,
];

fn sin_q10(deg: i64) -> i64 {
    debug_assert!(deg >= 5 && deg <= 85 && deg % 5 == 0, "angle {deg}");
    SIN_Q10[(deg / 5 - 1) as usize]
}

fn cos_q10(deg: i64) -> i64 {
    sin_q10(90 - deg)
}

/// Rounded `len * q / 1024` for nonnegative operands.
fn off(len: i64, q: i64) -> i64 {
    (len * q + 512) / 1024
}

fn domain(id: &str, names: &[&str], edges: &[(usize, usize)], palette: &[[u8; 3]]) -> LabelDomain {
    let z = names.len();
    let mut m = vec![0u8; z * z];
    for i in 0..z {
        m[i * z + i] = 1;
        m[i] = 1;
        m[i * z] = 1;
    }
    for &(a, b) in edges {
        m[a * z + b] = 1;
        m[b * z + a] = 1;
    }
    LabelDomain {
        id: id.into(),
        names: names.iter().map(|s| s.to_string()).collect(),
        m_intra: m,
        palette: palette.to_vec(),
    }
}

/// The three built-in domains: `(coarse, mid, fine)`.
pub fn builtin_domains() -> (LabelDomain, LabelDomain, LabelDomain) {
    let coarse = domain(
        "coarse",
        &["background", "head", "torso", "arms", "legs"],
        &[(1, 2), (2, 3), (2, 4)],
        &[
            [12, 12, 12],
            [238, 198, 160],
            [45, 90, 215],
            [65, 200, 70],
            [165, 60, 200],
        ],
    );
    let mid = domain(
        "mid",
        &[
            "background",
            "hair",
            "face",
            "torso",
            "upper-arms",
            "lower-arms",
            "upper-legs",
            "lower-legs",
        ],
        &[(1, 2), (2, 3), (3, 4), (4, 5), (3, 6), (6, 7)],
        &[
            [12, 12, 12],
            [140, 85, 25],
            [238, 198, 160],
            [45, 90, 215],
            [65, 200, 70],
            [230, 225, 60],
            [165, 60, 200],
            [245, 245, 245],
        ],
    );
    let fine = domain(
        "fine",
        &[
            "background",
            "hat",
            "hair",
            "face",
            "torso",
            "left-upper-arm",
            "right-upper-arm",
            "left-lower-arm",
            "right-lower-arm",
            "left-leg",
            "right-leg",
            "shoes",
        ],
        &[
            (1, 2),
            (2, 3),
            (3, 4),
            (4, 5),
            (4, 6),
            (5, 7),
            (6, 8),
            (4, 9),
            (4, 10),
            (9, 11),
            (10, 11),
        ],
        &[
            [12, 12, 12],
            [225, 40, 40],
            [140, 85, 25],
            [238, 198, 160],
            [45, 90, 215],
            [65, 200, 70],
            [65, 200, 70],
            [230, 225, 60],
            [230, 225, 60],
            [165, 60, 200],
            [165, 60, 200],
            [245, 245, 245],
        ],
    );
    (coarse, mid, fine)
}

/// Coarsening of fine labels into mid labels.
pub const FINE_TO_MID: [u8; 12] = [0, 1, 1, 2, 3, 4, 4, 5, 5, 6, 6, 7];
/// Coarsening of mid labels into coarse labels.
pub const MID_TO_COARSE: [u8; 8] = [0, 1, 1, 2, 3, 3, 4, 4];
/// Coarsening of fine labels into coarse labels (the composition).
pub const FINE_TO_COARSE: [u8; 12] = [0, 1, 1, 1, 2, 3, 3, 3, 3, 4, 4, 4];

fn link(src: &LabelDomain, dst: &LabelDomain, coarsening: &[u8]) -> CrossLink {
    CrossLink {
        src_id: src.id.clone(),
        dst_id: dst.id.clone(),
        m_static: derive_static_from_hierarchy(coarsening, src.z(), dst.z())
            .expect("builtin coarsening is total"),
        z_src: src.z(),
        z_dst: dst.z(),
        coarsening: Some(coarsening.to_vec()),
    }
}

/// The built-in cross-links: fine->mid, mid->coarse, fine->coarse.
pub fn builtin_links() -> Vec<CrossLink> {
    let (coarse, mid, fine) = builtin_domains();
    vec![
        link(&fine, &mid, &FINE_TO_MID),
        link(&mid, &coarse, &MID_TO_COARSE),
        link(&fine, &coarse, &FINE_TO_COARSE),
    ]
}

/// Domains and links together, for tests that need the raw parts.
pub fn builtin_ladder_parts() -> (LabelDomain, LabelDomain, LabelDomain, Vec<CrossLink>) {
    let (coarse, mid, fine) = builtin_domains();
    (coarse, mid, fine, builtin_links())
}

/// A validated registry holding the built-in ladder.
pub fn builtin_registry() -> DomainRegistry {
    let (coarse, mid, fine) = builtin_domains();
    DomainRegistry::from_parts([coarse, mid, fine], builtin_links())
        .expect("builtin ladder is consistent")
}

/// A sampled figure pose.  Coordinates are pixel positions `(x, y)`; side
/// index 0 is the figure's left (smaller x), 1 its right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FigureSkeleton {
    pub canvas: (usize, usize),
    /// Head (face) center.
    pub head_center: (i64, i64),
    pub face_radius: i64,
    /// 0 = short, 1 = long; long hair reaches one row further down.
    pub hair_class: u8,
    pub hat: bool,
    pub torso_half_width: i64,
    pub torso_top: i64,
    pub torso_len: i64,
    pub shoulders: [(i64, i64); 2],
    pub elbows: [(i64, i64); 2],
    pub wrists: [(i64, i64); 2],
    pub hips: [(i64, i64); 2],
    pub knees: [(i64, i64); 2],
    pub ankles: [(i64, i64); 2],
    pub arm_radius: i64,
    pub leg_radius: i64,
    pub shoe_radius: i64,
    /// Seed for the image noise, derived from the sample seed.
    pub noise_seed: u64,
}

impl FigureSkeleton {
    pub fn torso_bottom(&self) -> i64 {
        self.torso_top + self.torso_len - 1
    }

    pub fn hair_cut(&self) -> i64 {
        // Lowest hair row; at least two rows of hair stay visible under a hat.
        self.head_center.1 - self.face_radius + 3 + self.hair_class as i64
    }

    pub fn hat_cut(&self) -> i64 {
        self.head_center.1 - self.face_radius + 1
    }
}

/// Sample a pose deterministically from `(seed, canvas)`.
///
/// The pose ranges are chosen so that exactly the part pairs declared in the
/// built-in `M_intra` matrices can ever touch: parts that must be adjacent
/// overlap by construction (joints are anchored inside their parent part),
/// and all other pairs keep a clearance of at least two pixels in every pose.
pub fn sample_figure(seed: u64, canvas: (usize, usize)) -> Result<FigureSkeleton> {
    let (h, w) = (canvas.0 as i64, canvas.1 as i64);
    if h < 32 || w < 32 {
        return Err(SstError::Config(format!(
            "canvas {}x{} too small; the figure needs at least 32x32",
            canvas.0, canvas.1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Vertical budget: hat top needs 2 rows of margin, shoes end at h-3.
    // shoe_bottom = 2*rf + torso_len + leg_len + head_gap + 9, so with the
    // minimum torso (8) and legs (6): budget = h - 26 - 2*rf >= 0.
    let rf_hi = (5).min((h - 26) / 2).max(3);
    let rf = rng.gen_range(3..=rf_hi);
    let mut budget = h - 26 - 2 * rf;

    let head_gap = rng.gen_range(0..=budget.min(2));
    budget -= head_gap;
    let cy = rf + 5 + head_gap;
    let cx = w / 2 + rng.gen_range(-3..=3);

    let tw = rng.gen_range(4..=5);
    let torso_len = 8 + rng.gen_range(0..=budget.min(6));
    budget -= torso_len - 8;
    let leg_len = 6 + rng.gen_range(0..=budget.min(6));

    let hair_class = rng.gen_range(0..=1u8);
    let hat = rng.gen_range(0..100) < 50;

    let torso_top = cy + rf + 3;
    let torso_bottom = torso_top + torso_len - 1;
    let hip_y = torso_bottom - 1;
    let hw = tw - 1;

    let clamp_x = |x: i64| x.clamp(3, w - 4);
    // Arms must end well above the torso bottom so they can never reach the
    // legs; the y clamp enforces a 3-row gap in every pose.
    let arm_y_max = torso_bottom - 3;

    let mut shoulders = [(0i64, 0i64); 2];
    let mut elbows = [(0i64, 0i64); 2];
    let mut wrists = [(0i64, 0i64); 2];
    for (side, sgn) in [(0usize, -1i64), (1usize, 1i64)] {
        let upper_deg = 40 + 5 * rng.gen_range(0..=6i64);
        let bend_deg = -15 + 5 * rng.gen_range(0..=11i64);
        let lower_deg = (upper_deg + bend_deg).clamp(25, 85);
        let ul = rng.gen_range(4..=6i64);
        let ll = rng.gen_range(3..=5i64);

        let sh = (cx + sgn * tw, torso_top + 1);
        let el = (
            clamp_x(sh.0 + sgn * off(ul, sin_q10(upper_deg))),
            (sh.1 + off(ul, cos_q10(upper_deg))).min(arm_y_max),
        );
        let wr = (
            clamp_x(el.0 + sgn * off(ll, sin_q10(lower_deg))),
            (el.1 + off(ll, cos_q10(lower_deg))).min(arm_y_max),
        );
        shoulders[side] = sh;
        elbows[side] = el;
        wrists[side] = wr;
    }

    let mut hips = [(0i64, 0i64); 2];
    let mut knees = [(0i64, 0i64); 2];
    let mut ankles = [(0i64, 0i64); 2];
    for (side, sgn) in [(0usize, -1i64), (1usize, 1i64)] {
        let lean_deg = 5 * rng.gen_range(0..=2i64);
        let knee_out = rng.gen_range(0..=1i64);
        let hip = (cx + sgn * hw, hip_y);
        let lean_off = if lean_deg == 0 {
            0
        } else {
            off(leg_len, sin_q10(lean_deg))
        };
        let ankle = (clamp_x(hip.0 + sgn * lean_off), hip_y + leg_len);
        let knee = (
            clamp_x((hip.0 + ankle.0) / 2 + sgn * knee_out),
            hip_y + leg_len / 2,
        );
        hips[side] = hip;
        knees[side] = knee;
        ankles[side] = ankle;
    }

    Ok(FigureSkeleton {
        canvas,
        head_center: (cx, cy),
        face_radius: rf,
        hair_class,
        hat,
        torso_half_width: tw,
        torso_top,
        torso_len,
        shoulders,
        elbows,
        wrists,
        hips,
        knees,
        ankles,
        arm_radius: 1,
        leg_radius: 1,
        shoe_radius: 2,
        noise_seed: rng.gen::<u64>(),
    })
}

// ---- integer rasterization primitives ----

struct Raster<'a> {
    data: &'a mut [u8],
    h: i64,
    w: i64,
}

impl Raster<'_> {
    fn put(&mut self, x: i64, y: i64, label: u8) {
        if x >= 0 && y >= 0 && x < self.w && y < self.h {
            self.data[(y * self.w + x) as usize] = label;
        }
    }

    fn disk(&mut self, cx: i64, cy: i64, r: i64, y_max: Option<i64>, label: u8) {
        let ymax = y_max.unwrap_or(i64::MAX).min(cy + r);
        for y in (cy - r)..=ymax {
            for x in (cx - r)..=(cx + r) {
                if (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r {
                    self.put(x, y, label);
                }
            }
        }
    }

    fn rect(&mut self, x0: i64, x1: i64, y0: i64, y1: i64, label: u8) {
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.put(x, y, label);
            }
        }
    }

    /// Thick segment (capsule): all pixels within distance `r` of the
    /// segment `a`-`b`, compared in exact integer arithmetic.
    fn capsule(&mut self, a: (i64, i64), b: (i64, i64), r: i64, label: u8) {
        let (abx, aby) = (b.0 - a.0, b.1 - a.1);
        let l2 = abx * abx + aby * aby;
        if l2 == 0 {
            self.disk(a.0, a.1, r, None, label);
            return;
        }
        let (x0, x1) = (a.0.min(b.0) - r, a.0.max(b.0) + r);
        let (y0, y1) = (a.1.min(b.1) - r, a.1.max(b.1) + r);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (apx, apy) = (x - a.0, y - a.1);
                let t = (apx * abx + apy * aby).clamp(0, l2);
                // d^2 * l2^2 = |ap*l2 - ab*t|^2  <=  r^2 * l2^2
                let dx = apx * l2 - abx * t;
                let dy = apy * l2 - aby * t;
                if dx * dx + dy * dy <= r * r * l2 * l2 {
                    self.put(x, y, label);
                }
            }
        }
    }
}

/// Paint the fine-granularity label raster for a figure.
fn draw_fine(fig: &FigureSkeleton) -> GrayImage {
    let (h, w) = fig.canvas;
    let mut out = GrayImage::new(w, h, BG);
    let mut r = Raster {
        data: &mut out.data,
        h: h as i64,
        w: w as i64,
    };
    let (cx, cy) = fig.head_center;
    let rf = fig.face_radius;

    // Back to front: legs and shoes, torso, arms, head, hair, hat.
    for (side, leg) in [(0usize, LLEG), (1usize, RLEG)] {
        r.capsule(fig.hips[side], fig.knees[side], fig.leg_radius, leg);
        r.capsule(fig.knees[side], fig.ankles[side], fig.leg_radius, leg);
    }
    for side in 0..2 {
        let (ax, ay) = fig.ankles[side];
        r.disk(ax, ay + 1, fig.shoe_radius, None, SHOES);
    }
    r.rect(
        cx - fig.torso_half_width,
        cx + fig.torso_half_width,
        fig.torso_top,
        fig.torso_bottom(),
        TORSO,
    );
    for (side, (upper, lower)) in [(0usize, (LUA, LLA)), (1usize, (RUA, RLA))] {
        r.capsule(fig.shoulders[side], fig.elbows[side], fig.arm_radius, upper);
        r.capsule(fig.elbows[side], fig.wrists[side], fig.arm_radius, lower);
    }
    // Head: face disk plus a neck column bridging down into the torso.
    r.disk(cx, cy, rf, None, FACE);
    r.rect(cx - 1, cx + 1, cy + rf - 1, fig.torso_top + 1, FACE);
    r.disk(cx, cy, rf + 2, Some(fig.hair_cut()), HAIR);
    if fig.hat {
        r.disk(cx, cy, rf + 3, Some(fig.hat_cut()), HAT);
    }
    out
}

/// Render a figure into a consistent multi-domain sample.
///
/// `ladder` lists domain ids coarse to fine; every adjacent pair must be
/// connected by a coarsening link (finer -> coarser) in the registry.  The
/// fine raster is drawn; each coarser raster is its image under the composed
/// coarsening maps; the image is the palette-colored fine raster plus
/// seeded uniform noise of up to +/-16 per channel.
pub fn rasterize(
    fig: &FigureSkeleton,
    registry: &DomainRegistry,
    ladder: &[&str],
) -> Result<SegSample> {
    if ladder.is_empty() {
        return Err(SstError::Config("rasterize: empty domain ladder".into()));
    }
    let fine_id = *ladder.last().expect("non-empty");
    let fine_domain = registry.domain(fine_id)?;

    // Compose coarsening maps from fine down to every ladder entry.
    let mut maps: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
    let mut acc: Vec<u8> = (0..fine_domain.z() as u8).collect();
    maps.insert(fine_id, acc.clone());
    for i in (0..ladder.len() - 1).rev() {
        let finer = ladder[i + 1];
        let coarser = ladder[i];
        let step = registry.coarsening(finer, coarser).ok_or_else(|| {
            SstError::Config(format!(
                "rasterize: no coarsening link {finer} -> {coarser}; the ladder must be a chain"
            ))
        })?;
        acc = acc.iter().map(|&v| step[v as usize]).collect();
        maps.insert(coarser, acc.clone());
    }

    let fine = draw_fine(fig);
    let (h, w) = fig.canvas;

    let mut labels = BTreeMap::new();
    for (&dom, map) in &maps {
        let data: Vec<u8> = fine.data.iter().map(|&v| map[v as usize]).collect();
        labels.insert(
            dom.to_string(),
            GrayImage {
                width: w,
                height: h,
                data,
            },
        );
    }

    let palette = &fine_domain.palette;
    let mut image = RgbImage::new(w, h);
    let mut rng = ChaCha8Rng::seed_from_u64(fig.noise_seed);
    for p in 0..h * w {
        let base = palette[fine.data[p] as usize];
        for c in 0..3 {
            let n: i64 = rng.gen_range(-16..=16);
            image.data[p * 3 + c] = (base[c] as i64 + n).clamp(0, 255) as u8;
        }
    }

    Ok(SegSample {
        id: String::new(),
        image,
        labels,
    })
}

/// Generation config; echoed into the dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub count: usize,
    /// `(height, width)`, both at least 32 and divisible by 16 for training.
    pub canvas: (usize, usize),
    pub seed: u64,
    /// Fraction of samples assigned to the train split.
    pub train_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 360,
            canvas: (48, 48),
            seed: 7,
            train_fraction: 5.0 / 6.0,
        }
    }
}

/// Generate a dataset directory: domains, links, images, label rasters and
/// the manifest.  Bit-reproducible for a fixed `(cfg, platform-independent)`.
pub fn generate_dataset(out_dir: &Path, cfg: &GenConfig) -> Result<DatasetManifest> {
    if cfg.count == 0 {
        return Err(SstError::Config("gen: count must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(SstError::Config(format!(
            "gen: train_fraction {} outside [0, 1]",
            cfg.train_fraction
        )));
    }
    let registry = builtin_registry();
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| SstError::io(p, e));
    mkdir(out_dir)?;
    mkdir(&out_dir.join("domains"))?;
    mkdir(&out_dir.join("links"))?;
    mkdir(&out_dir.join("images"))?;
    for id in LADDER {
        mkdir(&out_dir.join("labels").join(id))?;
    }

    let mut domains = BTreeMap::new();
    for id in LADDER {
        let rel = format!("domains/{id}.json");
        save_domain(registry.domain(id)?, &out_dir.join(&rel))?;
        domains.insert(id.to_string(), rel);
    }
    let mut links = Vec::new();
    for l in registry.links() {
        let rel = format!("links/{}_{}.json", l.src_id, l.dst_id);
        save_link(l, &out_dir.join(&rel))?;
        links.push(rel);
    }

    let train_count = (cfg.count as f64 * cfg.train_fraction).floor() as usize;
    let mut samples = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let id = format!("sample_{i:06}");
        let fig = sample_figure(cfg.seed ^ i as u64, cfg.canvas)?;
        let mut sample = rasterize(&fig, &registry, LADDER)?;
        sample.id = id.clone();

        let image_rel = format!("images/{id}.ppm");
        write_ppm(&out_dir.join(&image_rel), &sample.image)?;
        let mut label_rels = BTreeMap::new();
        for (dom, raster) in &sample.labels {
            let rel = format!("labels/{dom}/{id}.pgm");
            write_pgm(&out_dir.join(&rel), raster)?;
            label_rels.insert(dom.clone(), rel);
        }
        samples.push(SampleEntry {
            id,
            split: if i < train_count {
                Split::Train
            } else {
                Split::Test
            },
            image: image_rel,
            labels: label_rels,
        });
    }

    let manifest = DatasetManifest {
        config: serde_json::to_value(cfg).expect("config serialization"),
        domains,
        links,
        samples,
    };
    let mpath = out_dir.join(MANIFEST_NAME);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    text.push('\n');
    fs::write(&mpath, text).map_err(|e| SstError::io(&mpath, e))?;
    Ok(manifest)
}
