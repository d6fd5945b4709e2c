//! Multi-granularity semantic transfer (MST).
//!
//! For every pair of domains trained together, MST re-expresses one domain's
//! embedding in the other's label space and asks the two views to agree.
//! Each direction `src -> dst` owns its own parameters.
//!
//! At the embedding root (level 0) the categories' relation is known a
//! priori, so a *static* map applies the cross-link matrix as the mask:
//!
//! ```text
//! T_0 = (softmax(Q0 K0^T / sqrt(D)) . M_static) V0          (no residual)
//! Q0 = X_0^dst Wq,  K0 = X_0^src Wk,  V0 = X_0^src Wv
//! ```
//!
//! At the refined levels `l = 1..3` the relation depends on the image, so a
//! *dynamic* mask is computed from the MSA aggregates of both domains at the
//! matching pyramid scale:
//!
//! ```text
//! M_dyn = (S_l^dst W^dst)(S_l^src W^src)^T
//! T_l   = (softmax(Q K^T / sqrt(D)) . M_dyn) V
//! Q = X_l^dst Wq,  K = X_l^src Wk,  V = X_l^src Wv
//! ```
//!
//! Two semantic consistency (SCR) losses tie the ladders together, both
//! symmetric over the pair:
//!
//! * dataset-level — on the root embeddings, which are image-independent:
//!   `align(T_0^{a->b}, X_0^b) + align(T_0^{b->a}, X_0^a)`, in `[0, 4]`;
//! * image-level — on the per-layer sums `sum_{l=1..3} T_l` vs
//!   `sum_{l=1..3} X_l`, accumulated per scale without averaging, in
//!   `[0, 12]`;
//!
//! where `align` is the row-mean of `1 - cosine`.  MST, like the other
//! auxiliary modules, is dropped entirely at inference.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, VarId};
use crate::domain::LabelDomain;
use crate::error::{Result, SstError};
use crate::mse::NUM_SP_LAYERS;
use crate::net::NUM_SCALES;
use crate::params::{xavier_uniform, Binder, ParamStore};

/// Canonical unordered pair key: ids joined lexicographically.
pub fn pair_key(a: &str, b: &str) -> String {
    if a <= b {
        format!("{a}-{b}")
    } else {
        format!("{b}-{a}")
    }
}

fn dir_prefix(src: &str, dst: &str) -> String {
    format!("mst.{}.{src}2{dst}", pair_key(src, dst))
}

/// Register both directions of one pair (tag `mst:<pair>`): per direction a
/// static-map projection triple `l0.{q,k,v}` and, per dynamic level,
/// `l{1,2,3}.{q,k,v,wsrc,wdst}`, all `[D, D]`.
pub fn init_mst_pair(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    a: &LabelDomain,
    b: &LabelDomain,
    d: usize,
) {
    let tag = format!("mst:{}", pair_key(&a.id, &b.id));
    for (src, dst) in [(&a.id, &b.id), (&b.id, &a.id)] {
        let prefix = dir_prefix(src, dst);
        for proj in ["q", "k", "v"] {
            store.insert(
                &format!("{prefix}.l0.{proj}"),
                &tag,
                xavier_uniform(rng, &[d, d], d, d),
            );
        }
        for l in 1..=NUM_SP_LAYERS {
            for proj in ["q", "k", "v", "wsrc", "wdst"] {
                store.insert(
                    &format!("{prefix}.l{l}.{proj}"),
                    &tag,
                    xavier_uniform(rng, &[d, d], d, d),
                );
            }
        }
    }
}

/// Projections of one dynamic level.
pub struct MstDynVars {
    pub q: VarId,
    pub k: VarId,
    pub v: VarId,
    pub wsrc: VarId,
    pub wdst: VarId,
}

/// One transfer direction bound into a graph.
pub struct MstDirVars {
    pub l0_q: VarId,
    pub l0_k: VarId,
    pub l0_v: VarId,
    pub dynamic: [MstDynVars; NUM_SP_LAYERS],
}

impl MstDirVars {
    pub fn bind(binder: &mut Binder, src: &str, dst: &str) -> MstDirVars {
        let prefix = dir_prefix(src, dst);
        MstDirVars {
            l0_q: binder.bind(&format!("{prefix}.l0.q")),
            l0_k: binder.bind(&format!("{prefix}.l0.k")),
            l0_v: binder.bind(&format!("{prefix}.l0.v")),
            dynamic: std::array::from_fn(|i| {
                let l = i + 1;
                MstDynVars {
                    q: binder.bind(&format!("{prefix}.l{l}.q")),
                    k: binder.bind(&format!("{prefix}.l{l}.k")),
                    v: binder.bind(&format!("{prefix}.l{l}.v")),
                    wsrc: binder.bind(&format!("{prefix}.l{l}.wsrc")),
                    wdst: binder.bind(&format!("{prefix}.l{l}.wdst")),
                }
            }),
        }
    }
}

fn masked_attention(
    g: &mut Graph,
    q_in: VarId,
    kv_in: VarId,
    wq: VarId,
    wk: VarId,
    wv: VarId,
    mask: VarId,
) -> VarId {
    let d = g.value(q_in).shape()[1];
    let q = g.matmul(q_in, wq);
    let k = g.matmul(kv_in, wk);
    let v = g.matmul(kv_in, wv);
    let scores = g.matmul_nt(q, k);
    let scores = g.scale(scores, 1.0 / (d as f32).sqrt());
    let attn = g.softmax_rows(scores);
    let attn = g.mul(attn, mask);
    g.matmul(attn, v)
}

/// Static transfer of the root embedding: `x0_src: [Z_src, D]` mapped into
/// the destination space `[Z_dst, D]` under the cross-link mask
/// `m_static: [Z_dst, Z_src]`.
pub fn static_map(
    g: &mut Graph,
    dir: &MstDirVars,
    x0_src: VarId,
    x0_dst: VarId,
    m_static: VarId,
) -> VarId {
    let (zs, zd) = (g.value(x0_src).shape()[0], g.value(x0_dst).shape()[0]);
    assert_eq!(
        g.value(m_static).shape(),
        &[zd, zs],
        "static mask must be [Z_dst, Z_src]"
    );
    masked_attention(g, x0_dst, x0_src, dir.l0_q, dir.l0_k, dir.l0_v, m_static)
}

/// Dynamic transfer at scale `l` (1-based): embeddings `x_src`/`x_dst` at
/// level `l` and aggregates `s_src`/`s_dst` at the same scale.  The mask is
/// the learned bilinear similarity of the aggregates.
pub fn dynamic_map(
    g: &mut Graph,
    dir: &MstDirVars,
    l: usize,
    x_src: VarId,
    x_dst: VarId,
    s_src: VarId,
    s_dst: VarId,
) -> Result<VarId> {
    if !(1..=NUM_SP_LAYERS).contains(&l) {
        return Err(SstError::Config(format!(
            "dynamic_map scale index {l} outside 1..={NUM_SP_LAYERS} (level 0 uses the static map)"
        )));
    }
    let (zs, zd) = (g.value(x_src).shape()[0], g.value(x_dst).shape()[0]);
    if g.value(s_src).shape()[0] != zs || g.value(s_dst).shape()[0] != zd {
        return Err(SstError::Shape(format!(
            "dynamic_map: aggregates ({}, {}) do not match embeddings ({zs}, {zd})",
            g.value(s_src).shape()[0],
            g.value(s_dst).shape()[0]
        )));
    }
    let vars = &dir.dynamic[l - 1];
    let pd = g.matmul(s_dst, vars.wdst);
    let ps = g.matmul(s_src, vars.wsrc);
    let m_dyn = g.matmul_nt(pd, ps);
    Ok(masked_attention(
        g, x_dst, x_src, vars.q, vars.k, vars.v, m_dyn,
    ))
}

/// Dataset-level semantic consistency for one pair: both static transfers
/// against the partner's root embedding.  `m_ab` maps a into b's space
/// (`[Z_b, Z_a]`), `m_ba` the reverse.
pub fn scr_dataset_loss(
    g: &mut Graph,
    a2b: &MstDirVars,
    b2a: &MstDirVars,
    x0_a: VarId,
    x0_b: VarId,
    m_ab: VarId,
    m_ba: VarId,
) -> VarId {
    let t_ab = static_map(g, a2b, x0_a, x0_b, m_ab);
    let t_ba = static_map(g, b2a, x0_b, x0_a, m_ba);
    let la = g.cosine_align(t_ab, x0_b);
    let lb = g.cosine_align(t_ba, x0_a);
    g.linear_combination(&[(la, 1.0), (lb, 1.0)])
}

/// Image-level semantic consistency for one pair: dynamic transfers at every
/// scale, each compared against the partner's embedding at that level, both
/// directions, summed without averaging.
///
/// `levels_*` are the embedding ladders (length `NUM_SP_LAYERS + 1`);
/// `aggs_*` the per-scale MSA aggregates for the same image.
#[allow(clippy::too_many_arguments)]
pub fn scr_image_loss(
    g: &mut Graph,
    a2b: &MstDirVars,
    b2a: &MstDirVars,
    levels_a: &[VarId; NUM_SP_LAYERS + 1],
    levels_b: &[VarId; NUM_SP_LAYERS + 1],
    aggs_a: &[VarId; NUM_SCALES],
    aggs_b: &[VarId; NUM_SCALES],
) -> Result<VarId> {
    let mut terms = Vec::with_capacity(2 * NUM_SP_LAYERS);
    for l in 1..=NUM_SP_LAYERS {
        let t_ab = dynamic_map(
            g,
            a2b,
            l,
            levels_a[l],
            levels_b[l],
            aggs_a[l - 1],
            aggs_b[l - 1],
        )?;
        let t_ba = dynamic_map(
            g,
            b2a,
            l,
            levels_b[l],
            levels_a[l],
            aggs_b[l - 1],
            aggs_a[l - 1],
        )?;
        let la = g.cosine_align(t_ab, levels_b[l]);
        let lb = g.cosine_align(t_ba, levels_a[l]);
        terms.push((la, 1.0));
        terms.push((lb, 1.0));
    }
    Ok(g.linear_combination(&terms))
}
