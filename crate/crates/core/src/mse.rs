//! Multi-granularity semantic embedding (MSE).
//!
//! Each domain owns a learnable root embedding `X_0: [Z, D]` — one row per
//! category — refined by three semantic-prompting layers, one per pyramid
//! scale from coarsest to finest.  Layer `l` attends from the previous
//! embedding into the aggregated category representations `S_l` of
//! [`crate::msa`]:
//!
//! ```text
//! Q = X_{l-1} Wq_l,   K = S_l Wk_l,   V = S_l Wv_l
//! X_l = (softmax(Q K^T / sqrt(D)) . M_intra) V  +  X_{l-1}
//! ```
//!
//! `M_intra` is the domain's binary adjacency prior.  It multiplies the
//! attention *after* the softmax, deliberately without renormalization: a row
//! whose partners are masked out contributes little, instead of having its
//! remaining weights inflated.
//!
//! The final embedding classifies pixels directly — auxiliary logits are the
//! inner product `F . X_L^T` of the full-resolution features with the
//! embedding, with no bias — giving the embedding a supervised pull toward
//! class-discriminative directions.  Like MSA, this module is training-only;
//! nothing here is needed to run the deployed network.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, VarId};
use crate::domain::LabelDomain;
use crate::imgio::GrayImage;
use crate::net::NUM_SCALES;
use crate::params::{uniform, xavier_uniform, Binder, ParamStore};

/// Number of semantic-prompting layers; equal to the pyramid scale count.
pub const NUM_SP_LAYERS: usize = NUM_SCALES;

/// Register one domain's embedding parameters (tag `mse:<domain>`):
/// `mse.<domain>.x0` and `mse.<domain>.sp{1,2,3}.{q,k,v}`.
pub fn init_mse(store: &mut ParamStore, rng: &mut ChaCha8Rng, domain: &LabelDomain, d: usize) {
    let z = domain.z();
    let tag = format!("mse:{}", domain.id);
    store.insert(
        &format!("mse.{}.x0", domain.id),
        &tag,
        uniform(rng, &[z, d], -0.1, 0.1),
    );
    for l in 1..=NUM_SP_LAYERS {
        for proj in ["q", "k", "v"] {
            store.insert(
                &format!("mse.{}.sp{l}.{proj}", domain.id),
                &tag,
                xavier_uniform(rng, &[d, d], d, d),
            );
        }
    }
}

/// One semantic-prompting layer's projections.
pub struct SpVars {
    pub q: VarId,
    pub k: VarId,
    pub v: VarId,
}

/// One domain's embedding parameters bound into a graph.
pub struct MseVars {
    pub x0: VarId,
    pub sp: [SpVars; NUM_SP_LAYERS],
}

impl MseVars {
    pub fn bind(binder: &mut Binder, domain_id: &str) -> MseVars {
        MseVars {
            x0: binder.bind(&format!("mse.{domain_id}.x0")),
            sp: std::array::from_fn(|i| {
                let l = i + 1;
                SpVars {
                    q: binder.bind(&format!("mse.{domain_id}.sp{l}.q")),
                    k: binder.bind(&format!("mse.{domain_id}.sp{l}.k")),
                    v: binder.bind(&format!("mse.{domain_id}.sp{l}.v")),
                }
            }),
        }
    }
}

/// One semantic-prompting layer: masked cross-attention into `s_l` plus the
/// residual.  `m_intra` must be bound as a `[Z, Z]` constant.
pub fn sp_layer(
    g: &mut Graph,
    x_prev: VarId,
    s_l: VarId,
    sp: &SpVars,
    m_intra: VarId,
) -> VarId {
    let d = g.value(x_prev).shape()[1];
    let q = g.matmul(x_prev, sp.q);
    let k = g.matmul(s_l, sp.k);
    let v = g.matmul(s_l, sp.v);
    let scores = g.matmul_nt(q, k);
    let scores = g.scale(scores, 1.0 / (d as f32).sqrt());
    let attn = g.softmax_rows(scores);
    let attn = g.mul(attn, m_intra);
    let ctx = g.matmul(attn, v);
    g.add(ctx, x_prev)
}

/// Run all layers; returns the embedding at every level, `[X_0, .., X_L]`
/// (length `NUM_SP_LAYERS + 1`).  [`crate::mst`] consumes the full ladder.
pub fn forward_levels(
    g: &mut Graph,
    mse: &MseVars,
    scale_aggs: &[VarId; NUM_SCALES],
    m_intra: VarId,
) -> [VarId; NUM_SP_LAYERS + 1] {
    let mut levels = [mse.x0; NUM_SP_LAYERS + 1];
    for l in 0..NUM_SP_LAYERS {
        levels[l + 1] = sp_layer(g, levels[l], scale_aggs[l], &mse.sp[l], m_intra);
    }
    levels
}

/// Auxiliary per-pixel logits `[Z, H, W]`: the inner product of features
/// `[D, H, W]` with the final embedding `[Z, D]`.  No bias by design — the
/// embedding rows themselves act as the classifier.
pub fn aux_logits(g: &mut Graph, x_final: VarId, features: VarId) -> VarId {
    g.affine_map(x_final, features, None)
}

/// Mean cross-entropy of the auxiliary logits against the label raster.
pub fn aux_loss(g: &mut Graph, x_final: VarId, features: VarId, labels: &GrayImage) -> VarId {
    let logits = aux_logits(g, x_final, features);
    let shape = g.value(logits).shape();
    assert_eq!(
        (labels.height, labels.width),
        (shape[1], shape[2]),
        "label raster size does not match features"
    );
    g.cross_entropy_mean(logits, std::rc::Rc::new(labels.data.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::synth;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    }

    /// One layer against an independent f64 recomputation, including the
    /// no-renormalization mask semantics.
    #[test]
    fn sp_layer_matches_hand_computation() {
        let (z, d) = (3usize, 2usize);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&mut rng, &[z, d], -1.0, 1.0);
        let s = rand_t(&mut rng, &[z, d], -1.0, 1.0);
        let wq = rand_t(&mut rng, &[d, d], -0.7, 0.7);
        let wk = rand_t(&mut rng, &[d, d], -0.7, 0.7);
        let wv = rand_t(&mut rng, &[d, d], -0.7, 0.7);
        let mask = Tensor::from_vec(
            &[z, z],
            vec![
                1.0, 1.0, 1.0, //
                1.0, 1.0, 0.0, //
                1.0, 0.0, 1.0,
            ],
        );

        let mut g = Graph::new();
        let (xv, sv) = (g.leaf(x.clone()), g.leaf(s.clone()));
        let sp = SpVars {
            q: g.leaf(wq.clone()),
            k: g.leaf(wk.clone()),
            v: g.leaf(wv.clone()),
        };
        let mv = g.constant(mask.clone());
        let out = sp_layer(&mut g, xv, sv, &sp, mv);

        // Reference in f64.
        let at = |t: &Tensor, r: usize, c: usize| t.data()[r * d + c] as f64;
        let matmul =
            |a: &dyn Fn(usize, usize) -> f64, b: &dyn Fn(usize, usize) -> f64, n: usize| {
                let mut out = vec![0.0f64; z * n];
                for i in 0..z {
                    for j in 0..n {
                        for kk in 0..d {
                            out[i * n + j] += a(i, kk) * b(kk, j);
                        }
                    }
                }
                out
            };
        let q = matmul(&|r, c| at(&x, r, c), &|r, c| at(&wq, r, c), d);
        let k = matmul(&|r, c| at(&s, r, c), &|r, c| at(&wk, r, c), d);
        let v = matmul(&|r, c| at(&s, r, c), &|r, c| at(&wv, r, c), d);
        let mut expect = vec![0.0f64; z * d];
        for i in 0..z {
            // scores row i over all j, then softmax, then mask (no renorm).
            let mut row = vec![0.0f64; z];
            for j in 0..z {
                for kk in 0..d {
                    row[j] += q[i * d + kk] * k[j * d + kk];
                }
                row[j] /= (d as f64).sqrt();
            }
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let se: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
            let attn: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, &v)| (v - mx).exp() / se * mask.data()[i * z + j] as f64)
                .collect();
            for c in 0..d {
                expect[i * d + c] =
                    attn.iter().enumerate().map(|(j, &a)| a * v[j * d + c]).sum::<f64>()
                        + at(&x, i, c);
            }
        }
        for (i, (&got, &want)) in g.value(out).data().iter().zip(&expect).enumerate() {
            assert!(
                (got as f64 - want).abs() < 1e-5,
                "entry {i}: {got} vs {want}"
            );
        }
    }

    /// Mask semantics on the value path.  A masked category's K still enters
    /// the softmax denominator (mask comes after the softmax), so to isolate
    /// the value path this test zeroes Wk: attention is exactly uniform
    /// (1/Z), and the masked output is known in closed form.  A
    /// renormalizing implementation would divide by the number of unmasked
    /// partners instead of Z and fail the row-1 check.
    #[test]
    fn mask_blocks_value_path_without_renormalization() {
        let (z, d) = (3usize, 2usize);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_t(&mut rng, &[z, d], -1.0, 1.0);
        let s = rand_t(&mut rng, &[z, d], -1.0, 1.0);
        let wq = rand_t(&mut rng, &[d, d], -0.7, 0.7);
        let wv = rand_t(&mut rng, &[d, d], -0.7, 0.7);
        // Mask: row 1 and category 2 are mutually blocked.
        let mask = Tensor::from_vec(
            &[z, z],
            vec![1., 1., 1., 1., 1., 0., 1., 0., 1.],
        );

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let sv = g.constant(s.clone());
        let sp = SpVars {
            q: g.constant(wq.clone()),
            k: g.constant(Tensor::zeros(&[d, d])),
            v: g.constant(wv.clone()),
        };
        let mv = g.constant(mask.clone());
        let out = sp_layer(&mut g, xv, sv, &sp, mv);

        // V in f64.
        let v = |j: usize, c: usize| -> f64 {
            (0..d)
                .map(|k| s.data()[j * d + k] as f64 * wv.data()[k * d + c] as f64)
                .sum()
        };
        // Expected: row i context = (1/Z) * sum over unmasked j of V[j].
        for i in 0..z {
            for c in 0..d {
                let ctx: f64 = (0..z)
                    .filter(|&j| mask.data()[i * z + j] == 1.0)
                    .map(|j| v(j, c))
                    .sum::<f64>()
                    / z as f64;
                let want = ctx + x.data()[i * d + c] as f64;
                let got = g.value(out).data()[i * d + c] as f64;
                assert!(
                    (got - want).abs() < 1e-6,
                    "row {i} col {c}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn forward_levels_builds_residual_ladder() {
        let (coarse, _, _) = synth::builtin_domains();
        let d = 4;
        let z = coarse.z();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_mse(&mut store, &mut rng, &coarse, d);
        assert_eq!(store.len(), 1 + 3 * 3);
        let mut g = Graph::new();
        let mut binder = Binder::new(&mut g, &store);
        let mse = MseVars::bind(&mut binder, "coarse");
        drop(binder);
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let aggs: [VarId; NUM_SCALES] = std::array::from_fn(|_| {
            let t = rand_t(&mut rng2, &[z, d], -1.0, 1.0);
            g.constant(t)
        });
        let mv = g.constant(coarse.m_intra_tensor());
        let levels = forward_levels(&mut g, &mse, &aggs, mv);
        assert_eq!(levels.len(), 4);
        for l in &levels {
            assert_eq!(g.value(*l).shape(), &[z, d]);
        }
        // Residual structure: each level differs from its predecessor.
        for w in levels.windows(2) {
            assert_ne!(g.value(w[0]).data(), g.value(w[1]).data());
        }
    }

    #[test]
    fn aux_logits_have_no_bias() {
        let (z, d, h, w) = (3usize, 2usize, 4usize, 4usize);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[z, d]));
        let f = g.constant(Tensor::from_vec(
            &[d, h, w],
            (0..d * h * w).map(|i| i as f32).collect(),
        ));
        let logits = aux_logits(&mut g, x, f);
        assert_eq!(g.value(logits).shape(), &[z, h, w]);
        // Zero embedding, arbitrary features: logits must be exactly zero.
        assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
    }

    /// Gradients through the full embedding ladder and the auxiliary loss.
    #[test]
    fn mse_gradients_match_finite_differences() {
        let (z, d, hw) = (3usize, 2usize, 4usize);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = Tensor::from_vec(
            &[z, z],
            vec![1., 1., 1., 1., 1., 0., 1., 0., 1.],
        );
        let labels = GrayImage {
            width: hw,
            height: hw,
            data: (0..hw * hw)
                .map(|i| if i == 5 { 255 } else { (i % z) as u8 })
                .collect(),
        };
        let feat = rand_t(&mut rng, &[d, hw, hw], -1.0, 1.0);
        let x0 = rand_t(&mut rng, &[z, d], -0.5, 0.5);
        let mut inits = vec![x0];
        for _ in 0..NUM_SP_LAYERS {
            for _ in 0..3 {
                inits.push(rand_t(&mut rng, &[d, d], -0.6, 0.6));
            }
        }
        for _ in 0..NUM_SCALES {
            inits.push(rand_t(&mut rng, &[z, d], -1.0, 1.0));
        }
        let labels2 = labels.clone();
        let feat2 = feat.clone();
        let mask2 = mask.clone();
        gradcheck(
            move |g, ids| {
                let mse = MseVars {
                    x0: ids[0],
                    sp: std::array::from_fn(|l| SpVars {
                        q: ids[1 + 3 * l],
                        k: ids[2 + 3 * l],
                        v: ids[3 + 3 * l],
                    }),
                };
                let aggs: [VarId; NUM_SCALES] =
                    std::array::from_fn(|i| ids[1 + 3 * NUM_SP_LAYERS + i]);
                let mv = g.constant(mask2.clone());
                let levels = forward_levels(g, &mse, &aggs, mv);
                let fv = g.constant(feat2.clone());
                aux_loss(g, levels[NUM_SP_LAYERS], fv, &labels2)
            },
            &inits,
            1e-3,
            1e-3,
        );
    }
}
