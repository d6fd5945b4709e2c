//! Training loops: universal multi-domain parsing and the two-step dedicated
//! regime (pre-train on a source domain, then transfer to a target against a
//! frozen teacher).
//!
//! Both regimes build one autodiff graph per optimizer step.  Each step
//! forwards every image of the step's batches through the shared core, adds
//! the per-domain segmentation loss, and — depending on the configured
//! toggles — the auxiliary embedding loss and the two semantic-consistency
//! losses for every active domain pair.  The weighted sum is differentiated
//! once and applied with a single Adam update.
//!
//! Determinism contract: every random choice (parameter init, batch order,
//! augmentation, retained-subset sampling) derives from [`TrainConfig::seed`]
//! through a fixed mixing function, so identical configs on identical data
//! produce identical logs and checkpoints on the same platform.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, VarId};
use crate::checkpoint::CheckpointMeta;
use crate::dataset::{hflip_sample, image_to_tensor, rescale_sample, Dataset, SegSample, Split};
use crate::domain::DomainRegistry;
use crate::error::{Result, SstError};
use crate::msa::{aggregate_pyramid, init_msa, MsaVars};
use crate::mse::{aux_loss, forward_levels, init_mse, MseVars, NUM_SP_LAYERS};
use crate::mst::{init_mst_pair, pair_key, scr_dataset_loss, scr_image_loss, MstDirVars};
use crate::net::{
    core_dim, forward_core, init_core, init_head, seg_logits, seg_loss, CoreVars, HeadVars,
    NUM_SCALES,
};
use crate::params::{Adam, Binder, ParamStore};
use crate::tensor::Tensor;

/// Auxiliary-loss ablation axis: disabled, enabled with an all-ones
/// attention mask, or enabled with the domain's intra-body mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxMode {
    Off,
    Unmasked,
    Masked,
}

impl std::str::FromStr for AuxMode {
    type Err = SstError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(AuxMode::Off),
            "unmasked" => Ok(AuxMode::Unmasked),
            "masked" => Ok(AuxMode::Masked),
            other => Err(SstError::Config(format!(
                "aux mode '{other}' not one of off|unmasked|masked"
            ))),
        }
    }
}

/// How cross-domain pairs are formed for the transfer losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairStrategy {
    /// Every unordered pair of domains (n·(n−1)/2 pairs).
    Full,
    /// Only adjacent pairs in the coarse→fine chain (n−1 pairs).
    Progressive,
}

impl std::str::FromStr for PairStrategy {
    type Err = SstError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PairStrategy::Full),
            "progressive" => Ok(PairStrategy::Progressive),
            other => Err(SstError::Config(format!(
                "pair strategy '{other}' not one of full|progressive"
            ))),
        }
    }
}

/// Hyperparameters for a training run.  `Default` gives the desk-scale
/// setup; [`TrainConfig::paper_preset`] the full-scale schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Segmentation-loss weight.
    pub alpha: f64,
    /// Auxiliary-loss weight.
    pub beta: f64,
    /// Semantic-consistency weight (dataset- and image-level).
    pub lambda: f64,
    pub epochs: usize,
    /// Embedding/feature width of the core network.
    pub dim: usize,
    pub base_lr: f64,
    /// First epoch (1-based) that uses the dropped rate; `None` means
    /// ⌈5/6·epochs⌉, the 125-of-150 proportion.
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: f64,
    pub batch_per_domain: usize,
    pub seed: u64,
    pub strategy: PairStrategy,
    /// Domains to train, ordered coarse→fine.  Empty means every domain in
    /// the dataset, ordered by ascending label count.
    pub domains: Vec<String>,
    pub aux_loss: AuxMode,
    pub scr_dataset: bool,
    pub scr_image: bool,
    /// Random horizontal flip and 0.5–2× rescale; off by default so the
    /// reference runs stay byte-reproducible across config edits.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 10.0,
            beta: 1.0,
            lambda: 5.0,
            epochs: 60,
            dim: 32,
            base_lr: 1e-4,
            lr_drop_epoch: None,
            lr_drop_factor: 0.1,
            batch_per_domain: 4,
            seed: 0,
            strategy: PairStrategy::Full,
            domains: Vec::new(),
            aux_loss: AuxMode::Masked,
            scr_dataset: true,
            scr_image: true,
            augment: false,
        }
    }
}

impl TrainConfig {
    /// The full-scale schedule from the reference setup: 150 epochs with the
    /// rate dropped ×0.1 at epoch 125, width 64.
    pub fn paper_preset() -> Self {
        TrainConfig {
            epochs: 150,
            dim: 64,
            ..TrainConfig::default()
        }
    }

    /// Resolved drop epoch (default ⌈5/6·epochs⌉).
    pub fn lr_drop(&self) -> usize {
        self.lr_drop_epoch.unwrap_or((5 * self.epochs).div_ceil(6))
    }

    /// Disable every auxiliary component, leaving plain multi-dataset
    /// segmentation training.
    pub fn without_sst(mut self) -> Self {
        self.aux_loss = AuxMode::Off;
        self.scr_dataset = false;
        self.scr_image = false;
        self
    }

    /// Check numeric fields only (no dataset needed).
    pub fn validate_scalars(&self) -> Result<()> {
        let err = |m: String| Err(SstError::Config(m));
        if self.epochs == 0 {
            return err("epochs must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return err(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return err(format!(
                "lr_drop_factor {} outside (0, 1]",
                self.lr_drop_factor
            ));
        }
        let drop = self.lr_drop();
        if drop == 0 || drop > self.epochs {
            return err(format!(
                "lr_drop_epoch {drop} outside 1..={}",
                self.epochs
            ));
        }
        if self.batch_per_domain == 0 {
            return err("batch_per_domain must be positive".into());
        }
        if self.dim == 0 {
            return err("dim must be positive".into());
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} {v} must be nonnegative"));
            }
        }
        Ok(())
    }

    /// Full validation against a registry.
    pub fn validate(&self, registry: &DomainRegistry) -> Result<()> {
        self.validate_scalars()?;
        let doms = self.resolved_domains(registry)?;
        if (self.scr_dataset || self.scr_image) && doms.len() < 2 {
            return Err(SstError::Config(
                "semantic-consistency losses need at least two domains".into(),
            ));
        }
        Ok(())
    }

    /// The domain list actually trained: the configured list, or every
    /// registry domain ordered by ascending label count (coarse→fine).
    pub fn resolved_domains(&self, registry: &DomainRegistry) -> Result<Vec<String>> {
        if self.domains.is_empty() {
            let mut ids: Vec<String> = registry.domain_ids().map(str::to_string).collect();
            if ids.is_empty() {
                return Err(SstError::Config("registry has no domains".into()));
            }
            ids.sort_by_key(|id| {
                let z = registry.domain(id).expect("listed id").z();
                (z, id.clone())
            });
            return Ok(ids);
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &self.domains {
            registry.domain(id)?;
            if !seen.insert(id) {
                return Err(SstError::Config(format!("domain '{id}' listed twice")));
            }
        }
        Ok(self.domains.clone())
    }
}

/// Learning rate for a 1-based epoch number: the base rate before the drop
/// epoch, the dropped rate from it onward.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.lr_drop() {
        cfg.base_lr
    } else {
        cfg.base_lr * cfg.lr_drop_factor
    }
}

/// Domain pairs for the transfer losses.  `domains` is ordered coarse→fine;
/// `Full` enumerates every unordered pair (earlier domain first),
/// `Progressive` only the adjacent links of the chain.
pub fn build_pairs(domains: &[String], strategy: PairStrategy) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    match strategy {
        PairStrategy::Full => {
            for i in 0..domains.len() {
                for j in i + 1..domains.len() {
                    pairs.push((domains[i].clone(), domains[j].clone()));
                }
            }
        }
        PairStrategy::Progressive => {
            for w in domains.windows(2) {
                pairs.push((w[0].clone(), w[1].clone()));
            }
        }
    }
    pairs
}

/// One line of the training log: epoch number (1-based), learning rate, the
/// unweighted loss components by name, and the weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub components: BTreeMap<String, f64>,
    pub total: f64,
}

/// A finished run: the trained parameters, per-epoch logs, and checkpoint
/// metadata (resolved config echo, registry hash).
#[derive(Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub logs: Vec<EpochLog>,
    pub meta: CheckpointMeta,
}

/// Whether the configuration needs the aggregation + embedding modules.
fn needs_aux_modules(cfg: &TrainConfig) -> bool {
    cfg.aux_loss != AuxMode::Off || cfg.scr_dataset || cfg.scr_image
}

/// Whether the configuration needs cross-domain mapping parameters.
fn needs_mst(cfg: &TrainConfig) -> bool {
    cfg.scr_dataset || cfg.scr_image
}

// Salts for deriving independent random streams from one seed.
const SALT_INIT: u64 = 1;
const SALT_BATCH: u64 = 2;
const SALT_AUG: u64 = 3;
const SALT_RETAIN: u64 = 4;
const SALT_TEACHER: u64 = 5;

/// splitmix64-style mixer: decorrelates (seed, salt, extra) triples into
/// stream seeds.  Stable across platforms by construction.
fn mix(seed: u64, salt: u64, extra: u64) -> u64 {
    let mut x = seed
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(extra.wrapping_mul(0xD1B5_4A32_D192_ED03));
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Initialize every parameter a universal run needs: core, one head per
/// domain, and — when any auxiliary component is on — aggregation,
/// embeddings, and mapping parameters for the active pairs.  Draw order is
/// fixed (core, heads, MSA, MSE, MST) so disabling a later component leaves
/// earlier initializations unchanged.
pub fn init_universal(registry: &DomainRegistry, cfg: &TrainConfig) -> Result<ParamStore> {
    let doms = cfg.resolved_domains(registry)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, SALT_INIT, 0));
    let mut store = ParamStore::new();
    init_core(&mut store, &mut rng, cfg.dim);
    for d in &doms {
        init_head(&mut store, &mut rng, registry.domain(d)?, cfg.dim);
    }
    if needs_aux_modules(cfg) {
        init_msa(&mut store, &mut rng, cfg.dim);
        for d in &doms {
            init_mse(&mut store, &mut rng, registry.domain(d)?, cfg.dim);
        }
    }
    if needs_mst(cfg) {
        for (a, b) in build_pairs(&doms, cfg.strategy) {
            init_mst_pair(
                &mut store,
                &mut rng,
                registry.domain(&a)?,
                registry.domain(&b)?,
                cfg.dim,
            );
        }
    }
    Ok(store)
}

/// Load every sample of a split into memory once; training then indexes this
/// cache instead of re-reading files each step.
fn load_split(ds: &Dataset, split: Split) -> Result<Vec<SegSample>> {
    ds.split_indices(split)
        .into_iter()
        .map(|i| ds.load_sample(i))
        .collect()
}

/// Deterministic seeded subsample: shuffle positions `0..n` and keep the
/// first ⌈frac·n⌉ (at least one), returned sorted.
pub fn retain_subset(n: usize, frac: f64, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep = ((frac * n as f64).ceil() as usize).clamp(1, n);
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// Per-sample augmentation: rescale by a uniform 50–200 % factor (cropped or
/// padded back to the original canvas), then flip horizontally with
/// probability 1/2.  Exactly two draws per sample, in that order.
fn augment_sample(
    s: &SegSample,
    registry: &DomainRegistry,
    rng: &mut ChaCha8Rng,
) -> Result<SegSample> {
    let pct = rng.gen_range(50..=200u32);
    let flip: bool = rng.gen();
    let scaled = rescale_sample(s, pct);
    if flip {
        hflip_sample(&scaled, registry)
    } else {
        Ok(scaled)
    }
}

/// Shuffled copy of `items` for one epoch's stream.
fn epoch_order(items: &[usize], seed: u64) -> Vec<usize> {
    let mut order = items.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Batch `step` of an epoch stream, cycling past the end so every step has
/// exactly `b` entries.
fn batch_positions(order: &[usize], step: usize, b: usize) -> Vec<usize> {
    (0..b).map(|k| order[(step * b + k) % order.len()]).collect()
}

fn write_log(sink: &mut Option<&mut dyn Write>, log: &EpochLog) -> Result<()> {
    if let Some(w) = sink.as_deref_mut() {
        let line = serde_json::to_string(log).expect("log serialization");
        writeln!(w, "{line}").map_err(|e| SstError::io("<training log>", e))?;
    }
    Ok(())
}

fn check_finite(name: &str, v: f64, epoch: usize, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(SstError::Numeric(format!(
            "loss component '{name}' is {v} at epoch {epoch} step {step}"
        )))
    }
}

/// Resolved config echoed into checkpoint metadata: domain list and drop
/// epoch made explicit, tagged with the training regime.
fn config_echo(regime: &str, cfg: &TrainConfig, doms: &[String]) -> serde_json::Value {
    let mut resolved = cfg.clone();
    resolved.domains = doms.to_vec();
    resolved.lr_drop_epoch = Some(cfg.lr_drop());
    serde_json::json!({ "regime": regime, "train": resolved })
}

/// Intermediate results of one image forward that later losses reuse.
struct SlotFwd {
    aggs: [VarId; NUM_SCALES],
    levels: [VarId; NUM_SP_LAYERS + 1],
}

/// Train the universal parser on every configured domain of `ds`, logging
/// one JSON line per epoch into `sink` when given.
pub fn train_universal(
    ds: &Dataset,
    cfg: &TrainConfig,
    sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate(&ds.registry)?;
    let store = init_universal(&ds.registry, cfg)?;
    run_universal(ds, cfg, store, sink)
}

/// The universal loop on an existing parameter store (split out so tests can
/// inject prepared stores).
pub(crate) fn run_universal(
    ds: &Dataset,
    cfg: &TrainConfig,
    mut store: ParamStore,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let registry = &ds.registry;
    let doms = cfg.resolved_domains(registry)?;
    let pairs = if needs_mst(cfg) {
        build_pairs(&doms, cfg.strategy)
    } else {
        Vec::new()
    };
    // Static similarity matrices, both directions per pair, fetched up front
    // so a missing link fails before any training time is spent.
    let statics: Vec<(Tensor, Tensor)> = if cfg.scr_dataset {
        pairs
            .iter()
            .map(|(a, b)| {
                Ok((
                    registry.static_matrix(a, b)?,
                    registry.static_matrix(b, a)?,
                ))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let samples = load_split(ds, Split::Train)?;
    if samples.is_empty() {
        return Err(SstError::Config("dataset has no training samples".into()));
    }
    let b = cfg.batch_per_domain;
    let steps = samples.len().div_ceil(b);
    let positions: Vec<usize> = (0..samples.len()).collect();

    let mut adam = Adam::new();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        // Independent per-domain streams over the same cache emulate separate
        // datasets: each domain sees its own shuffled order and its own
        // augmentation draws.
        let orders: Vec<Vec<usize>> = (0..doms.len())
            .map(|di| {
                epoch_order(
                    &positions,
                    mix(cfg.seed, SALT_BATCH, ((epoch as u64) << 8) | di as u64),
                )
            })
            .collect();
        let mut aug_rngs: Vec<ChaCha8Rng> = (0..doms.len())
            .map(|di| {
                ChaCha8Rng::seed_from_u64(mix(
                    cfg.seed,
                    SALT_AUG,
                    ((epoch as u64) << 8) | di as u64,
                ))
            })
            .collect();
        let mut comp_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total_sum = 0.0;
        for step in 0..steps {
            let mut batches: Vec<Vec<SegSample>> = Vec::with_capacity(doms.len());
            for di in 0..doms.len() {
                let mut batch = Vec::with_capacity(b);
                for pos in batch_positions(&orders[di], step, b) {
                    let s = &samples[pos];
                    batch.push(if cfg.augment {
                        augment_sample(s, registry, &mut aug_rngs[di])?
                    } else {
                        s.clone()
                    });
                }
                batches.push(batch);
            }
            let (comps, total) = universal_step(
                &mut store, &mut adam, lr, registry, &doms, &pairs, &statics, &batches, cfg,
            )?;
            for (name, v) in &comps {
                check_finite(name, *v, epoch, step)?;
                *comp_sums.entry(name.clone()).or_insert(0.0) += v;
            }
            check_finite("total", total, epoch, step)?;
            total_sum += total;
        }
        let inv = 1.0 / steps as f64;
        let log = EpochLog {
            epoch,
            lr,
            components: comp_sums.iter().map(|(k, v)| (k.clone(), v * inv)).collect(),
            total: total_sum * inv,
        };
        write_log(&mut sink, &log)?;
        logs.push(log);
    }
    let meta = CheckpointMeta {
        config: config_echo("universal", cfg, &doms),
        epoch: cfg.epochs,
        seed: cfg.seed,
        registry_hash: registry.hash(),
    };
    Ok(TrainOutcome { store, logs, meta })
}

/// One optimizer step of universal training.  Returns the unweighted loss
/// components by name plus the weighted total actually differentiated.
#[allow(clippy::too_many_arguments)]
fn universal_step(
    store: &mut ParamStore,
    adam: &mut Adam,
    lr: f64,
    registry: &DomainRegistry,
    doms: &[String],
    pairs: &[(String, String)],
    statics: &[(Tensor, Tensor)],
    batches: &[Vec<SegSample>],
    cfg: &TrainConfig,
) -> Result<(BTreeMap<String, f64>, f64)> {
    let b = cfg.batch_per_domain;
    let use_mods = needs_aux_modules(cfg);
    let mut g = Graph::new();

    let mut binder = Binder::new(&mut g, store);
    let core = CoreVars::bind(&mut binder);
    let heads: Vec<HeadVars> = doms.iter().map(|d| HeadVars::bind(&mut binder, d)).collect();
    let (msa, mses) = if use_mods {
        (
            Some(MsaVars::bind(&mut binder)),
            doms.iter().map(|d| MseVars::bind(&mut binder, d)).collect(),
        )
    } else {
        (None, Vec::new())
    };
    let dirs: Vec<(MstDirVars, MstDirVars)> = if needs_mst(cfg) {
        pairs
            .iter()
            .map(|(a, b)| {
                (
                    MstDirVars::bind(&mut binder, a, b),
                    MstDirVars::bind(&mut binder, b, a),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    let bound = binder.finish();

    // The embedding attention mask: the domain's intra-body matrix, or all
    // ones under the unmasked ablation.
    let masks: Vec<VarId> = if use_mods {
        doms.iter()
            .map(|d| {
                let dom = registry.domain(d).expect("validated");
                let t = if cfg.aux_loss == AuxMode::Unmasked {
                    let z = dom.z();
                    Tensor::from_vec(&[z, z], vec![1.0; z * z])
                } else {
                    dom.m_intra_tensor()
                };
                g.constant(t)
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut seg_terms: Vec<Vec<VarId>> = vec![Vec::new(); doms.len()];
    let mut aux_terms: Vec<Vec<VarId>> = vec![Vec::new(); doms.len()];
    let mut slots: Vec<Vec<SlotFwd>> = (0..doms.len()).map(|_| Vec::new()).collect();
    for (di, d) in doms.iter().enumerate() {
        let z = registry.domain(d)?.z();
        assert_eq!(batches[di].len(), b, "sub-batch size");
        for sample in &batches[di] {
            let labels = sample.labels.get(d).ok_or_else(|| {
                SstError::Config(format!("sample '{}' lacks labels for '{d}'", sample.id))
            })?;
            let img = g.constant(image_to_tensor(&sample.image));
            let pyr = forward_core(&mut g, &core, img);
            let logits = seg_logits(&mut g, &heads[di], pyr.f);
            seg_terms[di].push(seg_loss(&mut g, logits, labels));
            if use_mods {
                let msa = msa.as_ref().expect("bound with use_mods");
                let aggs = aggregate_pyramid(&mut g, msa, &pyr, labels, z).map(|(v, _)| v);
                let levels = forward_levels(&mut g, &mses[di], &aggs, masks[di]);
                if cfg.aux_loss != AuxMode::Off {
                    aux_terms[di].push(aux_loss(&mut g, levels[NUM_SP_LAYERS], pyr.f, labels));
                }
                slots[di].push(SlotFwd { aggs, levels });
            }
        }
    }

    // Components: (name, mean-over-batch value, weight in the total).
    let inv_b = 1.0 / b as f64;
    let mut comps: Vec<(String, VarId, f64)> = Vec::new();
    for (di, d) in doms.iter().enumerate() {
        let terms: Vec<(VarId, f64)> = seg_terms[di].iter().map(|&v| (v, inv_b)).collect();
        comps.push((format!("seg:{d}"), g.linear_combination(&terms), cfg.alpha));
    }
    if cfg.aux_loss != AuxMode::Off {
        for (di, d) in doms.iter().enumerate() {
            let terms: Vec<(VarId, f64)> = aux_terms[di].iter().map(|&v| (v, inv_b)).collect();
            comps.push((format!("aux:{d}"), g.linear_combination(&terms), cfg.beta));
        }
    }
    for (pi, (a, bdom)) in pairs.iter().enumerate() {
        let key = pair_key(a, bdom);
        let ai = doms.iter().position(|d| d == a).expect("paired domain");
        let bi = doms.iter().position(|d| d == bdom).expect("paired domain");
        let (a2b, b2a) = &dirs[pi];
        if cfg.scr_dataset {
            let m_ab = g.constant(statics[pi].0.clone());
            let m_ba = g.constant(statics[pi].1.clone());
            let l = scr_dataset_loss(&mut g, a2b, b2a, mses[ai].x0, mses[bi].x0, m_ab, m_ba);
            comps.push((format!("scr_dataset:{key}"), l, cfg.lambda));
        }
        if cfg.scr_image {
            let mut terms = Vec::with_capacity(b);
            for k in 0..b {
                let (sa, sb) = (&slots[ai][k], &slots[bi][k]);
                let l =
                    scr_image_loss(&mut g, a2b, b2a, &sa.levels, &sb.levels, &sa.aggs, &sb.aggs)?;
                terms.push((l, inv_b));
            }
            comps.push((format!("scr_image:{key}"), g.linear_combination(&terms), cfg.lambda));
        }
    }

    let total_terms: Vec<(VarId, f64)> = comps.iter().map(|&(_, v, w)| (v, w)).collect();
    let total = g.linear_combination(&total_terms);
    let out: BTreeMap<String, f64> = comps
        .iter()
        .map(|(name, id, _)| (name.clone(), g.scalar_f64(*id)))
        .collect();
    let total_v = g.scalar_f64(total);

    g.backward(total);
    adam.step(store, &g, &bound, lr);
    Ok((out, total_v))
}

/// Step one of the dedicated regime: train core + head + auxiliary modules
/// on the source domain(s) only, with no cross-domain losses.
pub fn dedicated_pretrain(
    ds: &Dataset,
    cfg: &TrainConfig,
    sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let mut c = cfg.clone();
    c.scr_dataset = false;
    c.scr_image = false;
    c.validate(&ds.registry)?;
    let doms = c.resolved_domains(&ds.registry)?;
    let store = init_universal(&ds.registry, &c)?;
    let mut outcome = run_universal(ds, &c, store, sink)?;
    outcome.meta.config = config_echo("dedicated-pretrain", &c, &doms);
    Ok(outcome)
}

/// What to transfer in step two of the dedicated regime.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferSpec {
    /// Domain the teacher was trained on; its pipeline stays frozen.
    pub source: String,
    /// Domain the student is trained for.
    pub target: String,
    /// Fraction of the target train split to use (seeded subsample).
    pub retain_frac: f64,
}

/// Step two of the dedicated regime: fine-tune a copy of the teacher's core
/// with a fresh target head, distilling from the frozen teacher through
/// fresh aggregation/embedding/mapping modules.  With `lambda` 0 and the
/// auxiliary loss off this reduces to plain fine-tuning.
///
/// The width comes from the teacher checkpoint; `cfg.dim` is ignored.
/// Teacher parameters are never bound as trainable, so the freeze contract
/// holds bitwise by construction.
pub fn dedicated_transfer(
    ds: &Dataset,
    teacher: &ParamStore,
    teacher_meta: &CheckpointMeta,
    spec: &TransferSpec,
    cfg: &TrainConfig,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let registry = &ds.registry;
    let reg_hash = registry.hash();
    if teacher_meta.registry_hash != reg_hash {
        return Err(SstError::Checkpoint(format!(
            "registry hash mismatch: checkpoint {}, dataset {}",
            teacher_meta.registry_hash, reg_hash
        )));
    }
    cfg.validate_scalars()?;
    let source = registry.domain(&spec.source)?.clone();
    let target = registry.domain(&spec.target)?.clone();
    if spec.source == spec.target {
        return Err(SstError::Config(format!(
            "source and target domain are both '{}'",
            spec.source
        )));
    }
    if !(spec.retain_frac > 0.0 && spec.retain_frac <= 1.0) {
        return Err(SstError::Config(format!(
            "retain_frac {} outside (0, 1]",
            spec.retain_frac
        )));
    }
    for name in CoreVars::names().iter().chain(std::iter::once(&"core.dim")) {
        if !teacher.contains(name) {
            return Err(SstError::Checkpoint(format!(
                "pretrained checkpoint lacks '{name}'"
            )));
        }
    }
    let use_mods = needs_aux_modules(cfg);
    let use_mst = needs_mst(cfg);
    let needs_teacher = use_mst;
    if needs_teacher {
        let mut required = vec!["msa.ws".to_string(), format!("mse.{}.x0", spec.source)];
        for l in 1..=NUM_SP_LAYERS {
            for p in ["q", "k", "v"] {
                required.push(format!("mse.{}.sp{l}.{p}", spec.source));
            }
        }
        for name in required {
            if !teacher.contains(&name) {
                return Err(SstError::Checkpoint(format!(
                    "pretrained checkpoint lacks '{name}' needed for transfer from '{}'",
                    spec.source
                )));
            }
        }
    }

    let dim = core_dim(teacher);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, SALT_INIT, 1));
    let mut store = ParamStore::new();
    init_core(&mut store, &mut rng, dim);
    for name in CoreVars::names() {
        store.load_value(name, teacher.get(name).clone());
    }
    init_head(&mut store, &mut rng, &target, dim);
    if use_mods {
        init_msa(&mut store, &mut rng, dim);
        init_mse(&mut store, &mut rng, &target, dim);
    }
    if use_mst {
        init_mst_pair(&mut store, &mut rng, &source, &target, dim);
    }
    let statics = if cfg.scr_dataset {
        Some((
            registry.static_matrix(&spec.source, &spec.target)?,
            registry.static_matrix(&spec.target, &spec.source)?,
        ))
    } else {
        None
    };

    let samples = load_split(ds, Split::Train)?;
    if samples.is_empty() {
        return Err(SstError::Config("dataset has no training samples".into()));
    }
    let retained = retain_subset(
        samples.len(),
        spec.retain_frac,
        mix(cfg.seed, SALT_RETAIN, 0),
    );
    let all_positions: Vec<usize> = (0..samples.len()).collect();
    let b = cfg.batch_per_domain;
    let steps = retained.len().div_ceil(b);

    let mut adam = Adam::new();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let t_order = epoch_order(&retained, mix(cfg.seed, SALT_BATCH, epoch as u64));
        let s_order = epoch_order(&all_positions, mix(cfg.seed, SALT_TEACHER, epoch as u64));
        let mut aug_rng =
            ChaCha8Rng::seed_from_u64(mix(cfg.seed, SALT_AUG, epoch as u64));
        let mut comp_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total_sum = 0.0;
        for step in 0..steps {
            let mut tgt_batch = Vec::with_capacity(b);
            for pos in batch_positions(&t_order, step, b) {
                let s = &samples[pos];
                tgt_batch.push(if cfg.augment {
                    augment_sample(s, registry, &mut aug_rng)?
                } else {
                    s.clone()
                });
            }
            // Teacher batches are never augmented: the frozen pipeline
            // should see the data distribution it was trained on.
            let src_batch: Vec<&SegSample> = if cfg.scr_image {
                batch_positions(&s_order, step, b)
                    .into_iter()
                    .map(|pos| &samples[pos])
                    .collect()
            } else {
                Vec::new()
            };
            let (comps, total) = transfer_step(
                &mut store, &mut adam, lr, teacher, spec, &source, &target,
                statics.as_ref(), &tgt_batch, &src_batch, cfg,
            )?;
            for (name, v) in &comps {
                check_finite(name, *v, epoch, step)?;
                *comp_sums.entry(name.clone()).or_insert(0.0) += v;
            }
            check_finite("total", total, epoch, step)?;
            total_sum += total;
        }
        let inv = 1.0 / steps as f64;
        let log = EpochLog {
            epoch,
            lr,
            components: comp_sums.iter().map(|(k, v)| (k.clone(), v * inv)).collect(),
            total: total_sum * inv,
        };
        write_log(&mut sink, &log)?;
        logs.push(log);
    }
    let mut resolved = cfg.clone();
    resolved.dim = dim;
    resolved.domains = vec![spec.target.clone()];
    resolved.lr_drop_epoch = Some(cfg.lr_drop());
    let meta = CheckpointMeta {
        config: serde_json::json!({
            "regime": "dedicated-transfer",
            "source": spec.source,
            "target": spec.target,
            "retain_frac": spec.retain_frac,
            "train": resolved,
        }),
        epoch: cfg.epochs,
        seed: cfg.seed,
        registry_hash: reg_hash,
    };
    Ok(TrainOutcome { store, logs, meta })
}

/// One optimizer step of dedicated transfer.
#[allow(clippy::too_many_arguments)]
fn transfer_step(
    store: &mut ParamStore,
    adam: &mut Adam,
    lr: f64,
    teacher: &ParamStore,
    spec: &TransferSpec,
    source: &crate::domain::LabelDomain,
    target: &crate::domain::LabelDomain,
    statics: Option<&(Tensor, Tensor)>,
    tgt_batch: &[SegSample],
    src_batch: &[&SegSample],
    cfg: &TrainConfig,
) -> Result<(BTreeMap<String, f64>, f64)> {
    let b = cfg.batch_per_domain;
    let use_mods = needs_aux_modules(cfg);
    let use_mst = needs_mst(cfg);
    let mut g = Graph::new();

    // Teacher pipeline enters the graph as constants: frozen by construction.
    let teacher_vars = if use_mst {
        let mut tb = Binder::new_frozen(&mut g, teacher);
        let core = CoreVars::bind(&mut tb);
        let msa = MsaVars::bind(&mut tb);
        let mse = MseVars::bind(&mut tb, &spec.source);
        tb.finish();
        Some((core, msa, mse))
    } else {
        None
    };

    let mut binder = Binder::new(&mut g, store);
    let core = CoreVars::bind(&mut binder);
    let head = HeadVars::bind(&mut binder, &spec.target);
    let (msa_s, mse_s) = if use_mods {
        (
            Some(MsaVars::bind(&mut binder)),
            Some(MseVars::bind(&mut binder, &spec.target)),
        )
    } else {
        (None, None)
    };
    let mst_dirs = if use_mst {
        Some((
            MstDirVars::bind(&mut binder, &spec.source, &spec.target),
            MstDirVars::bind(&mut binder, &spec.target, &spec.source),
        ))
    } else {
        None
    };
    let bound = binder.finish();

    let tgt_mask = use_mods.then(|| {
        let t = if cfg.aux_loss == AuxMode::Unmasked {
            let z = target.z();
            Tensor::from_vec(&[z, z], vec![1.0; z * z])
        } else {
            target.m_intra_tensor()
        };
        g.constant(t)
    });
    let src_mask = teacher_vars
        .is_some()
        .then(|| g.constant(source.m_intra_tensor()));

    // Student forwards: segmentation (+ auxiliary) on the target batch.
    let mut seg_terms = Vec::with_capacity(b);
    let mut aux_terms = Vec::with_capacity(b);
    let mut tgt_slots: Vec<SlotFwd> = Vec::new();
    assert_eq!(tgt_batch.len(), b, "target sub-batch size");
    for sample in tgt_batch {
        let labels = sample.labels.get(&spec.target).ok_or_else(|| {
            SstError::Config(format!(
                "sample '{}' lacks labels for '{}'",
                sample.id, spec.target
            ))
        })?;
        let img = g.constant(image_to_tensor(&sample.image));
        let pyr = forward_core(&mut g, &core, img);
        let logits = seg_logits(&mut g, &head, pyr.f);
        seg_terms.push(seg_loss(&mut g, logits, labels));
        if use_mods {
            let msa = msa_s.as_ref().expect("bound with use_mods");
            let mse = mse_s.as_ref().expect("bound with use_mods");
            let aggs = aggregate_pyramid(&mut g, msa, &pyr, labels, target.z()).map(|(v, _)| v);
            let levels = forward_levels(&mut g, mse, &aggs, tgt_mask.expect("mask with use_mods"));
            if cfg.aux_loss != AuxMode::Off {
                aux_terms.push(aux_loss(&mut g, levels[NUM_SP_LAYERS], pyr.f, labels));
            }
            tgt_slots.push(SlotFwd { aggs, levels });
        }
    }

    // Teacher forwards on the source batch (only needed image-level).
    let mut src_slots: Vec<SlotFwd> = Vec::new();
    if cfg.scr_image {
        let (t_core, t_msa, t_mse) = teacher_vars.as_ref().expect("teacher bound with scr");
        assert_eq!(src_batch.len(), b, "source sub-batch size");
        for sample in src_batch {
            let labels = sample.labels.get(&spec.source).ok_or_else(|| {
                SstError::Config(format!(
                    "sample '{}' lacks labels for '{}'",
                    sample.id, spec.source
                ))
            })?;
            let img = g.constant(image_to_tensor(&sample.image));
            let pyr = forward_core(&mut g, t_core, img);
            let aggs = aggregate_pyramid(&mut g, t_msa, &pyr, labels, source.z()).map(|(v, _)| v);
            let levels =
                forward_levels(&mut g, t_mse, &aggs, src_mask.expect("mask with teacher"));
            src_slots.push(SlotFwd { aggs, levels });
        }
    }

    let inv_b = 1.0 / b as f64;
    let key = pair_key(&spec.source, &spec.target);
    let mut comps: Vec<(String, VarId, f64)> = Vec::new();
    let terms: Vec<(VarId, f64)> = seg_terms.iter().map(|&v| (v, inv_b)).collect();
    comps.push((
        format!("seg:{}", spec.target),
        g.linear_combination(&terms),
        cfg.alpha,
    ));
    if cfg.aux_loss != AuxMode::Off {
        let terms: Vec<(VarId, f64)> = aux_terms.iter().map(|&v| (v, inv_b)).collect();
        comps.push((
            format!("aux:{}", spec.target),
            g.linear_combination(&terms),
            cfg.beta,
        ));
    }
    if let Some((s2t, t2s)) = &mst_dirs {
        if cfg.scr_dataset {
            let (m_st, m_ts) = statics.expect("static matrices with scr_dataset");
            let m_st = g.constant(m_st.clone());
            let m_ts = g.constant(m_ts.clone());
            let (_, _, t_mse) = teacher_vars.as_ref().expect("teacher bound with scr");
            let mse = mse_s.as_ref().expect("bound with use_mods");
            let l = scr_dataset_loss(&mut g, s2t, t2s, t_mse.x0, mse.x0, m_st, m_ts);
            comps.push((format!("scr_dataset:{key}"), l, cfg.lambda));
        }
        if cfg.scr_image {
            let mut terms = Vec::with_capacity(b);
            for k in 0..b {
                let (sa, sb) = (&src_slots[k], &tgt_slots[k]);
                let l =
                    scr_image_loss(&mut g, s2t, t2s, &sa.levels, &sb.levels, &sa.aggs, &sb.aggs)?;
                terms.push((l, inv_b));
            }
            comps.push((format!("scr_image:{key}"), g.linear_combination(&terms), cfg.lambda));
        }
    }

    let total_terms: Vec<(VarId, f64)> = comps.iter().map(|&(_, v, w)| (v, w)).collect();
    let total = g.linear_combination(&total_terms);
    let out: BTreeMap<String, f64> = comps
        .iter()
        .map(|(name, id, _)| (name.clone(), g.scalar_f64(*id)))
        .collect();
    let total_v = g.scalar_f64(total);

    g.backward(total);
    adam.step(store, &g, &bound, lr);
    Ok((out, total_v))
}
