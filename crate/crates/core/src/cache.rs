//! Prototype caches over class tokens and property tokens, their hybrid
//! scoring rule, fine-tuning of keys and mixing weights, and evaluation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::datastore::{load_tensor, save_tensor, EmbeddingBundle};
use crate::error::{Error, Result};
use crate::mpg::MpgParams;
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::tensor::{self, Tensor, MIN_NORM};

pub const CHECKPOINT_FILE: &str = "cache.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub beta_s: f64,
    pub logit_scale: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Share of optimizer steps spent warming the learning rate up from zero.
    pub warmup_frac: f64,
    pub seed: u64,
    pub adamw: AdamWConfig,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            beta_s: 5.5,
            logit_scale: 100.0,
            epochs: 15,
            lr: 1e-3,
            batch: 128,
            warmup_frac: 0.1,
            seed: 0,
            adamw: AdamWConfig::default(),
        }
    }
}

/// Sharpness modulator `exp(−β_s (1 − x))`.
pub fn phi(x: f64, beta_s: f64) -> f64 {
    (-beta_s * (1.0 - x)).exp()
}

/// `f · promptsᵀ`.
pub fn zero_shot(f_cls: &[f64], prompts: &Tensor) -> Result<Vec<f64>> {
    let (_, d) = prompts.dims2()?;
    if f_cls.len() != d {
        return Err(Error::shape(format!(
            "feature of length {} against prompts of dim {d}",
            f_cls.len()
        )));
    }
    Ok((0..prompts.rows()).map(|n| tensor::dot(f_cls, prompts.row(n))).collect())
}

/// `φ(f · keysᵀ) · labels`.
pub fn cache_logits(f: &[f64], keys: &Tensor, labels: &Tensor, beta_s: f64) -> Result<Vec<f64>> {
    let (r, d) = keys.dims2()?;
    let (lr, n) = labels.dims2()?;
    if f.len() != d || lr != r {
        return Err(Error::shape(format!(
            "feature {} / keys {r}x{d} / labels {lr}x{n}",
            f.len()
        )));
    }
    let mut out = vec![0.0; n];
    for k in 0..r {
        let w = phi(tensor::dot(f, keys.row(k)), beta_s);
        for (o, l) in out.iter_mut().zip(labels.row(k)) {
            *o += w * l;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridCache {
    /// `N × D`, row `n` is the class-token prototype of class `n`.
    pub class_keys: Tensor,
    /// `NM × D`, row `n·M + i` is the slot-`i` prototype of class `n`.
    pub prop_keys: Tensor,
    pub m: usize,
    pub alpha: f64,
    pub beta: f64,
    pub beta_s: f64,
    pub logit_scale: f64,
    pub trained: bool,
}

impl HybridCache {
    pub fn n_classes(&self) -> usize {
        self.class_keys.rows()
    }

    pub fn class_labels(&self) -> Tensor {
        Tensor::eye(self.n_classes())
    }

    pub fn prop_labels(&self) -> Tensor {
        prop_labels(self.n_classes(), self.m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_tensor(dir.join("class_keys.pct1"), &self.class_keys)?;
        save_tensor(dir.join("prop_keys.pct1"), &self.prop_keys)?;
        let meta = CacheMeta {
            format_version: 1,
            alpha: self.alpha,
            beta: self.beta,
            beta_s: self.beta_s,
            logit_scale: self.logit_scale,
            m: self.m,
            n: self.n_classes(),
            trained: self.trained,
        };
        let path = dir.join(CHECKPOINT_FILE);
        let mut text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CacheMeta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let class_keys = load_tensor(dir.join("class_keys.pct1"))?;
        let prop_keys = load_tensor(dir.join("prop_keys.pct1"))?;
        if class_keys.rows() != meta.n || prop_keys.rows() != meta.n * meta.m {
            return Err(Error::Format {
                path,
                msg: format!(
                    "keys {:?} / {:?} for N = {}, M = {}",
                    class_keys.shape(),
                    prop_keys.shape(),
                    meta.n,
                    meta.m
                ),
            });
        }
        Ok(Self {
            class_keys,
            prop_keys,
            m: meta.m,
            alpha: meta.alpha,
            beta: meta.beta,
            beta_s: meta.beta_s,
            logit_scale: meta.logit_scale,
            trained: meta.trained,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheMeta {
    format_version: u32,
    alpha: f64,
    beta: f64,
    beta_s: f64,
    logit_scale: f64,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "N")]
    n: usize,
    trained: bool,
}

/// `NM × N` one-hot labels, row `n·M + i` marking class `n`.
pub fn prop_labels(n: usize, m: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n * m, n]);
    for c in 0..n {
        for i in 0..m {
            t.row_mut(c * m + i)[c] = 1.0;
        }
    }
    t
}

/// Class tokens and unit property tokens of a set of images.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    /// `B × D`
    pub cls: Tensor,
    /// `M` matrices of `B × D`, one per slot.
    pub tokens: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Unit tokens of image `b` as an `M × D` matrix.
    pub fn tokens_of(&self, b: usize) -> Tensor {
        let rows: Vec<&[f64]> = self.tokens.iter().map(|t| t.row(b)).collect();
        Tensor::from_rows(&rows).expect("slots share a dimension")
    }

    fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            cls: self.cls.select_rows(idx)?,
            tokens: self
                .tokens
                .iter()
                .map(|t| t.select_rows(idx))
                .collect::<Result<_>>()?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

pub fn extract_features(
    bundle: &EmbeddingBundle,
    params: &MpgParams,
    images: &[usize],
) -> Result<Features> {
    let m = params.config.m;
    let mut slots: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(images.len()); m];
    for &j in images {
        let t = params.unit_tokens(&bundle.images[j].patches)?;
        for (i, s) in slots.iter_mut().enumerate() {
            s.push(t.row(i).to_vec());
        }
    }
    if images.is_empty() {
        return Err(Error::EmptyInput("no images"));
    }
    Ok(Features {
        cls: bundle.class_token_matrix(images),
        tokens: slots
            .iter()
            .map(|s| Tensor::from_rows(s))
            .collect::<Result<_>>()?,
        labels: images.iter().map(|&j| bundle.images[j].label).collect(),
    })
}

fn prototype(rows: &[&[f64]], what: impl FnOnce() -> String) -> Result<Vec<f64>> {
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    let norm = tensor::norm(&mean);
    if !(norm >= MIN_NORM) {
        return Err(Error::DegeneratePrototype { what: what(), norm });
    }
    Ok(mean.into_iter().map(|v| v / norm).collect())
}

/// Prototypes from support features; `α = β = 1`.
pub fn build_caches(support: &Features, n_classes: usize, cfg: &CacheConfig) -> Result<HybridCache> {
    let m = support.tokens.len();
    let mut class_rows = Vec::with_capacity(n_classes);
    let mut prop_rows = Vec::with_capacity(n_classes * m);
    for n in 0..n_classes {
        let idx: Vec<usize> = (0..support.len()).filter(|&b| support.labels[b] == n).collect();
        if idx.is_empty() {
            return Err(Error::DegeneratePrototype {
                what: format!("class {n} (no supports)"),
                norm: 0.0,
            });
        }
        let rows: Vec<&[f64]> = idx.iter().map(|&b| support.cls.row(b)).collect();
        class_rows.push(prototype(&rows, || format!("class {n}"))?);
        for (i, slot) in support.tokens.iter().enumerate() {
            let rows: Vec<&[f64]> = idx.iter().map(|&b| slot.row(b)).collect();
            prop_rows.push(prototype(&rows, || format!("class {n} slot {i}"))?);
        }
    }
    Ok(HybridCache {
        class_keys: Tensor::from_rows(&class_rows)?,
        prop_keys: Tensor::from_rows(&prop_rows)?,
        m,
        alpha: 1.0,
        beta: 1.0,
        beta_s: cfg.beta_s,
        logit_scale: cfg.logit_scale,
        trained: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreBreakdown {
    pub s_clip: Vec<f64>,
    pub s_cls_cache: Vec<f64>,
    pub s_mp_cache: Vec<f64>,
    pub s_ours: Vec<f64>,
}

/// Scores one image. `tokens` is `M × D` with unit rows.
pub fn hybrid_scores(
    f_cls: &[f64],
    tokens: &Tensor,
    prompts: &Tensor,
    cache: &HybridCache,
) -> Result<ScoreBreakdown> {
    if tokens.rows() != cache.m {
        return Err(Error::shape(format!(
            "{} tokens for a cache with M = {}",
            tokens.rows(),
            cache.m
        )));
    }
    let s_clip: Vec<f64> = zero_shot(f_cls, prompts)?
        .into_iter()
        .map(|s| cache.logit_scale * s)
        .collect();
    let cls = cache_logits(f_cls, &cache.class_keys, &cache.class_labels(), cache.beta_s)?;
    let plabels = cache.prop_labels();
    let mut mp = vec![0.0; s_clip.len()];
    for i in 0..cache.m {
        let l = cache_logits(tokens.row(i), &cache.prop_keys, &plabels, cache.beta_s)?;
        for (a, b) in mp.iter_mut().zip(l) {
            *a += b;
        }
    }
    let inv_m = 1.0 / cache.m as f64;
    let s_cls_cache: Vec<f64> = s_clip.iter().zip(&cls).map(|(c, x)| c + cache.beta * x).collect();
    let s_mp_cache: Vec<f64> = s_clip
        .iter()
        .zip(&mp)
        .map(|(c, x)| c + cache.alpha * inv_m * x)
        .collect();
    let s_ours = s_mp_cache.iter().zip(&s_cls_cache).map(|(a, b)| a + b).collect();
    Ok(ScoreBreakdown {
        s_clip,
        s_cls_cache,
        s_mp_cache,
        s_ours,
    })
}

pub fn predict(
    f_cls: &[f64],
    tokens: &Tensor,
    prompts: &Tensor,
    cache: &HybridCache,
) -> Result<(usize, ScoreBreakdown)> {
    let s = hybrid_scores(f_cls, tokens, prompts, cache)?;
    Ok((tensor::argmax(&s.s_ours), s))
}

/// Graph handles of the trainable cache parameters.
#[derive(Debug, Clone, Copy)]
pub struct CacheVars {
    pub class_keys: Var,
    pub prop_keys: Var,
    pub alpha: Var,
    pub beta: Var,
}

/// `φ(X · keysᵀ)` with `X` and `keys` as graph nodes.
fn phi_affinity(g: &mut Graph, x: Var, keys: Var, beta_s: f64) -> Result<Var> {
    let a = g.matmul_t(x, keys)?;
    let a = g.add_scalar(a, -1.0);
    let a = g.scale(a, beta_s);
    Ok(g.exp(a))
}

/// Summed cross-entropy of the class-cache and property-cache scores over a batch.
pub fn cache_loss(
    g: &mut Graph,
    vars: CacheVars,
    batch: &Features,
    prompts: &Tensor,
    beta_s: f64,
    logit_scale: f64,
) -> Result<Var> {
    let n = prompts.rows();
    let m = batch.tokens.len();
    let clip = batch.cls.matmul_t(prompts)?.scale(logit_scale);
    let s_clip = g.constant(clip);
    let x = g.constant(batch.cls.clone());

    let cls = phi_affinity(g, x, vars.class_keys, beta_s)?;
    let cls = g.scale_by(cls, vars.beta)?;
    let s_cls = g.add(s_clip, cls)?;

    let plabels = g.constant(prop_labels(n, m));
    let mut acc: Option<Var> = None;
    for t in &batch.tokens {
        let tv = g.constant(t.clone());
        let a = phi_affinity(g, tv, vars.prop_keys, beta_s)?;
        let l = g.matmul(a, plabels)?;
        acc = Some(match acc {
            Some(p) => g.add(p, l)?,
            None => l,
        });
    }
    let mp = acc.ok_or(Error::EmptyInput("no property slots"))?;
    let mp = g.scale(mp, 1.0 / m as f64);
    let mp = g.scale_by(mp, vars.alpha)?;
    let s_mp = g.add(s_clip, mp)?;

    let a = g.cross_entropy(s_cls, &batch.labels)?;
    let b = g.cross_entropy(s_mp, &batch.labels)?;
    g.add(a, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEpoch {
    pub epoch: usize,
    /// Mean per-image loss.
    pub mean_loss: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Fine-tunes keys, `α` and `β` on the support features. Keys are
/// re-normalized and `α, β` clamped at zero after every step.
pub fn train_cache(
    mut cache: HybridCache,
    support: &Features,
    prompts: &Tensor,
    cfg: &CacheConfig,
) -> Result<(HybridCache, Vec<CacheEpoch>)> {
    if cfg.batch == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    if support.is_empty() {
        return Err(Error::EmptyInput("no support features"));
    }
    let steps_per_epoch = support.len().div_ceil(cfg.batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup = ((cfg.warmup_frac * total_steps as f64).ceil() as usize).max(1);

    let mut params = vec![
        cache.class_keys.clone(),
        cache.prop_keys.clone(),
        Tensor::scalar(cache.alpha),
        Tensor::scalar(cache.beta),
    ];
    let mut state = AdamWState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..support.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch = support.subset(chunk)?;
            let mut g = Graph::new();
            let vars = CacheVars {
                class_keys: g.leaf(params[0].clone()),
                prop_keys: g.leaf(params[1].clone()),
                alpha: g.leaf(params[2].clone()),
                beta: g.leaf(params[3].clone()),
            };
            let loss = cache_loss(&mut g, vars, &batch, prompts, cfg.beta_s, cfg.logit_scale)?;
            let value = g.value(loss).item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, value });
            }
            total += value;
            g.backward(loss)?;
            let grads: Vec<Tensor> = [vars.class_keys, vars.prop_keys, vars.alpha, vars.beta]
                .iter()
                .zip(&params)
                .map(|(v, p)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            let lr = cfg.lr * ((step + 1) as f64 / warmup as f64).min(1.0);
            adamw_step(&mut params, &grads, &mut state, lr, &cfg.adamw)?;
            params[0] = params[0].l2_normalize_rows()?;
            params[1] = params[1].l2_normalize_rows()?;
            for s in &mut params[2..] {
                let v = s.data()[0].max(0.0);
                s.data_mut()[0] = v;
            }
            step += 1;
        }
        trace.push(CacheEpoch {
            epoch,
            mean_loss: total / support.len() as f64,
            alpha: params[2].data()[0],
            beta: params[3].data()[0],
        });
    }
    cache.class_keys = params[0].clone();
    cache.prop_keys = params[1].clone();
    cache.alpha = params[2].data()[0];
    cache.beta = params[3].data()[0];
    cache.trained = true;
    Ok((cache, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub zero_shot: f64,
    pub cls_cache_only: f64,
    pub mp_cache_only: f64,
    pub combined: f64,
}

/// Accuracy of each score variant over `feats`.
pub fn evaluate(feats: &Features, prompts: &Tensor, cache: &HybridCache) -> Result<Accuracies> {
    if feats.is_empty() {
        return Err(Error::EmptyInput("no evaluation images"));
    }
    let mut hits = [0usize; 4];
    for b in 0..feats.len() {
        let s = hybrid_scores(feats.cls.row(b), &feats.tokens_of(b), prompts, cache)?;
        let y = feats.labels[b];
        for (h, v) in hits
            .iter_mut()
            .zip([&s.s_clip, &s.s_cls_cache, &s.s_mp_cache, &s.s_ours])
        {
            *h += usize::from(tensor::argmax(v) == y);
        }
    }
    let n = feats.len() as f64;
    Ok(Accuracies {
        zero_shot: hits[0] as f64 / n,
        cls_cache_only: hits[1] as f64 / n,
        mp_cache_only: hits[2] as f64 / n,
        combined: hits[3] as f64 / n,
    })
}

/// For each slot, the mean angle in degrees between its token and every
/// other slot's token, averaged over images. Empty when `M = 1`.
pub fn slot_angles(feats: &Features) -> Vec<f64> {
    let m = feats.tokens.len();
    if m < 2 || feats.is_empty() {
        return Vec::new();
    }
    (0..m)
        .map(|i| {
            let mut sum = 0.0;
            for b in 0..feats.len() {
                for k in (0..m).filter(|&k| k != i) {
                    sum += tensor::angle_degrees(feats.tokens[i].row(b), feats.tokens[k].row(b));
                }
            }
            sum / (feats.len() * (m - 1)) as f64
        })
        .collect()
}
