//! Contrastive training of the property-token generator.
//!
//! Each support image yields `M` tokens. Token `i` is pulled towards a random
//! class-extended description from its slot's positive pool and pushed away
//! from hard negatives (confusion classes) and general negatives (everything
//! else). The hard share of the negatives grows linearly over training.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::datastore::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::mpg::{self, MpgConfig, MpgParams};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::propmine::{DescriptionPool, PropertyAssignment};
use crate::tensor::{self, Tensor, MIN_NORM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub tau: f64,
    pub negatives: usize,
    pub hard_start: f64,
    pub hard_end: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            negatives: 100,
            hard_start: 0.1,
            hard_end: 0.4,
            epochs: 30,
            lr: 5e-4,
            batch: 16,
            seed: 0,
            adamw: AdamWConfig::default(),
        }
    }
}

/// `(hard, general)` negative counts for `epoch`.
pub fn schedule(epoch: usize, cfg: &ContrastConfig) -> Result<(usize, usize)> {
    if epoch >= cfg.epochs {
        return Err(Error::arg(format!(
            "epoch {epoch} outside 0..{}",
            cfg.epochs
        )));
    }
    let t = if cfg.epochs > 1 {
        epoch as f64 / (cfg.epochs - 1) as f64
    } else {
        0.0
    };
    let frac = cfg.hard_start + (cfg.hard_end - cfg.hard_start) * t;
    let hard = ((frac * cfg.negatives as f64).round() as usize).min(cfg.negatives);
    Ok((hard, cfg.negatives - hard))
}

/// InfoNCE with the positive in row 0 of `candidates`:
/// `−log softmax(token · candidatesᵀ / τ)[0]`. `token` is `1 × D`, unit norm.
pub fn info_nce(g: &mut Graph, token: Var, candidates: Var, tau: f64) -> Result<Var> {
    let n = g.value(token).norm();
    if !(n >= MIN_NORM) {
        return Err(Error::DegenerateVector { norm: n, min: MIN_NORM });
    }
    if !(tau > 0.0) {
        return Err(Error::arg(format!("temperature must be positive, got {tau}")));
    }
    let sims = g.matmul_t(token, candidates)?;
    let logits = g.scale(sims, 1.0 / tau);
    g.cross_entropy(logits, &[0])
}

fn draw(pool: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if count == 0 || pool.is_empty() {
        return Vec::new();
    }
    if pool.len() >= count {
        index::sample(rng, pool.len(), count)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..count).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Pool rows for one (image, slot) term: the positive first, then negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub positive: usize,
    pub hard: Vec<usize>,
    pub general: Vec<usize>,
}

impl Sample {
    pub fn rows(&self) -> Vec<usize> {
        let mut r = Vec::with_capacity(1 + self.hard.len() + self.general.len());
        r.push(self.positive);
        r.extend(&self.hard);
        r.extend(&self.general);
        r
    }
}

/// Draws the positive and negatives for slot `slot` of class `class`. An
/// empty negative pool hands its quota to the other one.
pub fn sample_terms(
    assign: &PropertyAssignment,
    class: usize,
    slot: usize,
    quota: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let ca = &assign.classes[class];
    let pos = &ca.slots[slot].positives;
    if pos.is_empty() {
        return Err(Error::NoPositives(class));
    }
    let total = quota.0 + quota.1;
    let (nh, ng) = match (ca.hard.is_empty(), ca.general.is_empty()) {
        (true, true) if total > 0 => {
            return Err(Error::arg(format!("class {class} has no negative descriptions")))
        }
        (true, _) => (0, total),
        (_, true) => (total, 0),
        _ => quota,
    };
    let positive = pos[rng.random_range(0..pos.len())];
    let hard = draw(&ca.hard, nh, rng);
    let general = draw(&ca.general, ng, rng);
    Ok(Sample {
        positive,
        hard,
        general,
    })
}

/// Summed InfoNCE over `images` and all `M` slots, recorded on `g`.
#[allow(clippy::too_many_arguments)]
pub fn total_property_loss(
    g: &mut Graph,
    mpg_cfg: &MpgConfig,
    params: &[Var],
    bundle: &EmbeddingBundle,
    pool: &DescriptionPool,
    assign: &PropertyAssignment,
    images: &[usize],
    quota: (usize, usize),
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(images.len() * assign.m);
    for &j in images {
        let img = &bundle.images[j];
        let p = g.constant(img.patches.clone());
        let raw = mpg::forward(g, mpg_cfg, params, p)?;
        let tokens = g.l2_normalize_rows(raw)?;
        for i in 0..assign.m {
            let s = sample_terms(assign, img.label, i, quota, rng)?;
            let cand = g.constant(pool.extended.select_rows(&s.rows())?);
            let t = g.slice_rows(tokens, i, 1)?;
            terms.push(info_nce(g, t, cand, tau)?);
        }
    }
    if terms.is_empty() {
        return Err(Error::EmptyInput("no images in batch"));
    }
    let all = g.concat_rows(&terms)?;
    Ok(g.sum(all))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-image loss (summed over slots).
    pub mean_loss: f64,
    pub hard: usize,
    pub general: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpgTraining {
    pub params: MpgParams,
    pub trace: Vec<EpochStats>,
}

/// Trains from a fresh initialization on the support split.
pub fn train_mpg(
    bundle: &EmbeddingBundle,
    pool: &DescriptionPool,
    assign: &PropertyAssignment,
    mpg_cfg: &MpgConfig,
    cfg: &ContrastConfig,
) -> Result<MpgTraining> {
    let init = MpgParams::init(mpg_cfg)?;
    train_from(init, bundle, pool, assign, cfg)
}

pub fn train_from(
    mut params: MpgParams,
    bundle: &EmbeddingBundle,
    pool: &DescriptionPool,
    assign: &PropertyAssignment,
    cfg: &ContrastConfig,
) -> Result<MpgTraining> {
    if cfg.batch == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    if assign.m != params.config.m {
        return Err(Error::arg(format!(
            "assignment has {} slots, generator {}",
            assign.m, params.config.m
        )));
    }
    if bundle.support.is_empty() {
        return Err(Error::EmptyInput("no support images"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamWState::new(&params.tensors);
    let mut order = bundle.support.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let quota = schedule(epoch, cfg)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch) {
            let mut g = Graph::new();
            let vars: Vec<Var> = params.tensors.iter().map(|t| g.leaf(t.clone())).collect();
            let loss = total_property_loss(
                &mut g,
                &params.config,
                &vars,
                bundle,
                pool,
                assign,
                batch,
                quota,
                cfg.tau,
                &mut rng,
            )?;
            let value = g.value(loss).item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, value });
            }
            total += value;
            // Mean over the batch keeps the step size independent of batch length.
            let mean = g.scale(loss, 1.0 / batch.len() as f64);
            g.backward(mean)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .zip(&params.tensors)
                .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            adamw_step(&mut params.tensors, &grads, &mut state, cfg.lr, &cfg.adamw)?;
            step += 1;
        }
        trace.push(EpochStats {
            epoch,
            mean_loss: total / order.len() as f64,
            hard: quota.0,
            general: quota.1,
        });
    }
    Ok(MpgTraining { params, trace })
}

/// Fraction of (support image, slot) pairs whose token's nearest own-class
/// extended description carries the slot's label in `labels[class][row]`.
pub fn slot_alignment(
    bundle: &EmbeddingBundle,
    params: &MpgParams,
    extended: &[Tensor],
    labels: &[Vec<usize>],
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for &j in &bundle.support {
        let img = &bundle.images[j];
        let tokens = params.unit_tokens(&img.patches)?;
        let descs = &extended[img.label];
        for i in 0..params.config.m {
            let sims: Vec<f64> = (0..descs.rows())
                .map(|r| tensor::dot(tokens.row(i), descs.row(r)))
                .collect();
            if labels[img.label][tensor::argmax(&sims)] == i {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("no support images"));
    }
    Ok(hits as f64 / total as f64)
}
