//! Synthetic bundles with planted class and property structure.
//!
//! Geometry of the plant:
//!
//! * Classes come in twin pairs. Each pair owns a base direction and each
//!   class adds a small private offset, so twins are nearly indistinguishable
//!   from their class tokens alone (fine-grained pairs).
//! * Properties are drawn from `max(ceil(N/2), M)` shared families. The
//!   families are split into `M` contiguous groups and slot `i` of every
//!   class uses a family from group `i`; twins share families.
//! * Property `i` of class `n` is `f_family + ρ·g_{n,i} + w_i·c_n`, where
//!   `g_{n,i}` is private to the class and `w_i` decreases with `i`, so
//!   support images rank their own property clusters in slot order.
//!
//! All planted directions are orthonormal when `dim` leaves room for them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::bundle::{ClassDescriptions, DescriptionSet, EmbeddingBundle, Image};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

const TWIN_SPREAD: f64 = 0.01;
const PROPERTY_SPECIFICITY: f64 = 0.5;
const CLASS_WEIGHT: f64 = 0.6;
const EXTENDED_CLASS_WEIGHT: f64 = 0.5;
const PROMPT_NOISE_RATIO: f64 = 0.1;
const DESCRIPTIONS_PER_PROPERTY: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub dim: usize,
    pub patches: usize,
    pub m_props: usize,
    /// Expected Euclidean norm of the isotropic noise added to each vector.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            shots: 16,
            queries_per_class: 20,
            dim: 64,
            patches: 9,
            m_props: 3,
            noise: 0.1,
            seed: 7,
        }
    }
}

/// Ground truth of a synthetic bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantRecord {
    /// `c_n`, one row per class.
    pub class_dirs: Vec<Vec<f64>>,
    /// `u_{n,i}` indexed `[n][i]`.
    pub property_dirs: Vec<Vec<Vec<f64>>>,
    /// Shared property family of `[n][i]`.
    pub family: Vec<Vec<usize>>,
    pub twin: Vec<Option<usize>>,
    /// Planted property of each description, indexed `[n][description]`.
    pub description_property: Vec<Vec<usize>>,
}

struct Noise<'a> {
    rng: &'a mut ChaCha8Rng,
    sigma: f64,
}

impl Noise<'_> {
    fn gaussian(&mut self, dim: usize, sigma: f64) -> Vec<f64> {
        (0..dim)
            .map(|_| {
                let z: f64 = self.rng.sample(StandardNormal);
                z * sigma
            })
            .collect()
    }

    fn perturb(&mut self, v: &[f64], scale: f64) -> Vec<f64> {
        let sigma = self.sigma * scale;
        if sigma == 0.0 {
            return v.to_vec();
        }
        let e = self.gaussian(v.len(), sigma);
        v.iter().zip(e).map(|(a, b)| a + b).collect()
    }
}

fn combine(terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = vec![0.0; terms[0].1.len()];
    for (w, v) in terms {
        for (o, x) in out.iter_mut().zip(*v) {
            *o += w * x;
        }
    }
    out
}

/// Random directions, Gram–Schmidt orthonormalized while `dim` allows.
fn directions(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if out.len() < dim {
            for b in &out {
                let p = tensor::dot(&v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        if tensor::norm(&v) < 1e-6 {
            continue;
        }
        tensor::normalize_in_place(&mut v)?;
        out.push(v);
    }
    Ok(out)
}

/// Splits `0..families` into `groups` contiguous, near-equal runs.
fn family_groups(families: usize, groups: usize) -> Vec<Vec<usize>> {
    let base = families / groups;
    let extra = families % groups;
    let mut out = Vec::with_capacity(groups);
    let mut next = 0;
    for g in 0..groups {
        let size = base + usize::from(g < extra);
        out.push((next..next + size).collect());
        next += size;
    }
    out
}

pub fn gen_synthetic(cfg: &SynthConfig) -> Result<(EmbeddingBundle, DescriptionSet, PlantRecord)> {
    if cfg.dim < 8 {
        return Err(Error::arg(format!("dim must be at least 8, got {}", cfg.dim)));
    }
    if cfg.m_props < 1 {
        return Err(Error::arg("props must be at least 1"));
    }
    if cfg.patches < cfg.m_props {
        return Err(Error::arg(format!(
            "patches ({}) must be at least props ({})",
            cfg.patches, cfg.m_props
        )));
    }
    if cfg.n_classes < 1 || cfg.shots < 1 {
        return Err(Error::arg("need at least one class and one shot"));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::arg(format!("noise must be finite and >= 0, got {}", cfg.noise)));
    }

    let (n, m, d) = (cfg.n_classes, cfg.m_props, cfg.dim);
    let n_pairs = n.div_ceil(2);
    let n_families = n_pairs.max(m);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut dirs = directions(&mut rng, n_pairs + n + n_families + n * m, d)?.into_iter();
    let pair_dirs: Vec<Vec<f64>> = dirs.by_ref().take(n_pairs).collect();
    let offsets: Vec<Vec<f64>> = dirs.by_ref().take(n).collect();
    let family_dirs: Vec<Vec<f64>> = dirs.by_ref().take(n_families).collect();
    let private: Vec<Vec<f64>> = dirs.collect();

    let class_dirs: Vec<Vec<f64>> = (0..n)
        .map(|c| tensor::normalized(&combine(&[(1.0, &pair_dirs[c / 2]), (TWIN_SPREAD, &offsets[c])])))
        .collect::<Result<_>>()?;
    let twin = (0..n)
        .map(|c| {
            let t = c ^ 1;
            (t < n).then_some(t)
        })
        .collect();

    let groups = family_groups(n_families, m);
    let family: Vec<Vec<usize>> = (0..n)
        .map(|c| (0..m).map(|i| groups[i][(c / 2) % groups[i].len()]).collect())
        .collect();
    let mut property_dirs = Vec::with_capacity(n);
    for c in 0..n {
        let mut props = Vec::with_capacity(m);
        for i in 0..m {
            let w = CLASS_WEIGHT * (m - i) as f64 / m as f64;
            props.push(tensor::normalized(&combine(&[
                (1.0, &family_dirs[family[c][i]]),
                (PROPERTY_SPECIFICITY, &private[c * m + i]),
                (w, &class_dirs[c]),
            ]))?);
        }
        property_dirs.push(props);
    }

    let mut noise = Noise {
        rng: &mut rng,
        sigma: cfg.noise / (d as f64).sqrt(),
    };

    let class_prompts: Vec<Vec<f64>> = class_dirs
        .iter()
        .map(|c| tensor::normalized(&noise.perturb(c, PROMPT_NOISE_RATIO)))
        .collect::<Result<_>>()?;

    // Each property fills `per_prop` patches; the rest are distractors.
    let per_prop = (cfg.patches / (m + 1)).max(1);
    let mut images = Vec::with_capacity(n * (cfg.shots + cfg.queries_per_class));
    let mut support = Vec::new();
    let mut query = Vec::new();
    for c in 0..n {
        for k in 0..cfg.shots + cfg.queries_per_class {
            let class_token = tensor::normalized(&noise.perturb(&class_dirs[c], 1.0))?;
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(cfg.patches);
            for u in &property_dirs[c] {
                for _ in 0..per_prop {
                    rows.push(tensor::normalized(&noise.perturb(u, 1.0))?);
                }
            }
            while rows.len() < cfg.patches {
                let r = noise.gaussian(d, 1.0);
                rows.push(tensor::normalized(&r)?);
            }
            rows.shuffle(noise.rng);
            let j = images.len();
            if k < cfg.shots {
                support.push(j);
            } else {
                query.push(j);
            }
            images.push(Image {
                class_token,
                patches: Tensor::from_rows(&rows)?,
                label: c,
            });
        }
    }

    let mut classes = Vec::with_capacity(n);
    let mut description_property = Vec::with_capacity(n);
    for c in 0..n {
        let mut entries: Vec<(usize, usize)> = (0..m)
            .flat_map(|i| (0..DESCRIPTIONS_PER_PROPERTY).map(move |v| (i, v)))
            .collect();
        entries.shuffle(noise.rng);
        let mut texts = Vec::with_capacity(entries.len());
        let mut plain = Vec::with_capacity(entries.len());
        let mut extended = Vec::with_capacity(entries.len());
        for &(i, v) in &entries {
            let u = &property_dirs[c][i];
            texts.push(format!("trait {} variant {}", family[c][i], v));
            plain.push(tensor::normalized(&noise.perturb(u, 1.0))?);
            let ext = combine(&[(1.0, u), (EXTENDED_CLASS_WEIGHT, &class_dirs[c])]);
            extended.push(tensor::normalized(&noise.perturb(&ext, 1.0))?);
        }
        description_property.push(entries.iter().map(|e| e.0).collect());
        classes.push(ClassDescriptions {
            name: format!("class_{c:02}"),
            texts,
            plain: Tensor::from_rows(&plain)?,
            extended: Tensor::from_rows(&extended)?,
        });
    }

    let bundle = EmbeddingBundle {
        dim: d,
        patch_count: cfg.patches,
        n_classes: n,
        shots: cfg.shots,
        images,
        class_prompts: Tensor::from_rows(&class_prompts)?,
        support,
        query,
    };
    let plant = PlantRecord {
        class_dirs,
        property_dirs,
        family,
        twin,
        description_property,
    };
    Ok((bundle, DescriptionSet { classes }, plant))
}
