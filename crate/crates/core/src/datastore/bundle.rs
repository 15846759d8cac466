//! Validated in-memory embedding bundles and description sets.

use std::fs;
use std::io::Write as _;

use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestDir};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Norm tolerance for vectors that must be unit length on disk.
pub const UNIT_NORM_TOL: f64 = 1e-6;

pub const DESCRIPTIONS_FILE: &str = "descriptions.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    /// Global image embedding, unit norm.
    pub class_token: Vec<f64>,
    /// `patch_count × dim` region embeddings.
    pub patches: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub dim: usize,
    pub patch_count: usize,
    pub n_classes: usize,
    pub shots: usize,
    pub images: Vec<Image>,
    /// `n_classes × dim`, one template-averaged prompt embedding per class.
    pub class_prompts: Tensor,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl EmbeddingBundle {
    /// Support image indices of class `n`, in split order.
    pub fn supports_of(&self, n: usize) -> Vec<usize> {
        self.support
            .iter()
            .copied()
            .filter(|&j| self.images[j].label == n)
            .collect()
    }

    /// Stacks the class tokens of the listed images.
    pub fn class_token_matrix(&self, idx: &[usize]) -> Tensor {
        let rows: Vec<&[f64]> = idx
            .iter()
            .map(|&j| self.images[j].class_token.as_slice())
            .collect();
        Tensor::from_rows(&rows).expect("class tokens share a dimension")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDescriptions {
    pub name: String,
    pub texts: Vec<String>,
    /// `texts.len() × dim`, embeddings of the bare phrases.
    pub plain: Tensor,
    /// `texts.len() × dim`, embeddings of the phrases extended with the class name.
    pub extended: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionSet {
    pub classes: Vec<ClassDescriptions>,
}

impl DescriptionSet {
    pub fn total(&self) -> usize {
        self.classes.iter().map(|c| c.texts.len()).sum()
    }
}

/// One line of `descriptions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub class_id: usize,
    pub class_name: String,
    pub descriptions: Vec<String>,
}

pub fn plain_name(n: usize) -> String {
    format!("desc_plain_{n:03}")
}

pub fn extended_name(n: usize) -> String {
    format!("desc_ext_{n:03}")
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    for i in 0..t.rows() {
        let n = tensor::norm(t.row(i));
        if !((n - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(Error::validation(
                "unit-norm",
                format!("{what} row {i} has norm {n}"),
            ));
        }
    }
    Ok(())
}

fn as_indices(t: &Tensor, what: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::validation(
                    "indices",
                    format!("{what} holds non-index value {v}"),
                ))
            }
        })
        .collect()
}

/// Loads and checks every bundle tensor referenced by the manifest. This is
/// the only way downstream stages obtain an [`EmbeddingBundle`].
pub fn validate_bundle(md: &ManifestDir) -> Result<EmbeddingBundle> {
    let m = &md.manifest;
    let tokens = md.tensor("class_tokens")?;
    let patches = md.tensor("patches")?;
    let labels = as_indices(&md.tensor("labels")?, "labels")?;
    let prompts = md.tensor("class_prompts")?;
    let support = as_indices(&md.tensor("support")?, "support")?;
    let query = as_indices(&md.tensor("query")?, "query")?;

    let (n_img, dim) = tokens.dims2()?;
    if dim != m.dim {
        return Err(Error::validation(
            "shape",
            format!("class tokens have dim {dim}, manifest says {}", m.dim),
        ));
    }
    let [pn, patch_count, pd] = patches.shape()[..] else {
        return Err(Error::validation(
            "shape",
            format!("patches must be 3-D, got {:?}", patches.shape()),
        ));
    };
    if pn != n_img || pd != dim || patch_count == 0 {
        return Err(Error::validation(
            "shape",
            format!("patches {:?} for {n_img} images of dim {dim}", patches.shape()),
        ));
    }
    if labels.len() != n_img {
        return Err(Error::validation(
            "shape",
            format!("{} labels for {n_img} images", labels.len()),
        ));
    }
    if prompts.dims2()? != (m.n_classes, dim) {
        return Err(Error::validation(
            "class-count",
            format!(
                "class prompts {:?}, expected [{}, {dim}]",
                prompts.shape(),
                m.n_classes
            ),
        ));
    }
    check_unit_rows(&tokens, "class token")?;
    check_unit_rows(&prompts, "class prompt")?;
    if let Some((j, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= m.n_classes) {
        return Err(Error::validation(
            "labels",
            format!("image {j} has label {l} outside [0, {})", m.n_classes),
        ));
    }
    if !patches.is_finite() {
        return Err(Error::validation("finite", "patch features contain NaN/Inf"));
    }
    for (what, split) in [("support", &support), ("query", &query)] {
        if let Some(&j) = split.iter().find(|&&j| j >= n_img) {
            return Err(Error::validation(
                "split",
                format!("{what} index {j} out of range for {n_img} images"),
            ));
        }
    }
    let mut per_class = vec![0usize; m.n_classes];
    for &j in &support {
        per_class[labels[j]] += 1;
    }
    if let Some((n, &c)) = per_class.iter().enumerate().find(|(_, &c)| c != m.shots) {
        return Err(Error::validation(
            "shots",
            format!("class {n} has {c} support images, expected {}", m.shots),
        ));
    }

    let stride = patch_count * dim;
    let images = (0..n_img)
        .map(|j| Image {
            class_token: tokens.row(j).to_vec(),
            patches: Tensor::new(
                vec![patch_count, dim],
                patches.data()[j * stride..(j + 1) * stride].to_vec(),
            )
            .expect("slice matches shape"),
            label: labels[j],
        })
        .collect();

    Ok(EmbeddingBundle {
        dim,
        patch_count,
        n_classes: m.n_classes,
        shots: m.shots,
        images,
        class_prompts: prompts,
        support,
        query,
    })
}

/// Loads `descriptions.jsonl` and the per-class embedding matrices.
pub fn load_descriptions(md: &ManifestDir) -> Result<DescriptionSet> {
    let m = &md.manifest;
    let rel = m
        .descriptions
        .as_deref()
        .unwrap_or(DESCRIPTIONS_FILE)
        .to_string();
    let path = md.resolve(&rel);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut records: Vec<DescriptionRecord> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        records.push(serde_json::from_str(line).map_err(|e| Error::json(&path, e))?);
    }
    if records.len() != m.n_classes {
        return Err(Error::validation(
            "class-count",
            format!("{} description records for {} classes", records.len(), m.n_classes),
        ));
    }
    records.sort_by_key(|r| r.class_id);
    let mut classes = Vec::with_capacity(records.len());
    for (n, rec) in records.into_iter().enumerate() {
        if rec.class_id != n {
            return Err(Error::validation(
                "class-count",
                format!("description records skip class {n}"),
            ));
        }
        let plain = md.tensor(&plain_name(n))?;
        let extended = md.tensor(&extended_name(n))?;
        for (what, t) in [("plain", &plain), ("extended", &extended)] {
            if t.dims2()? != (rec.descriptions.len(), m.dim) {
                return Err(Error::validation(
                    "shape",
                    format!(
                        "class {n} {what} embeddings {:?} for {} descriptions",
                        t.shape(),
                        rec.descriptions.len()
                    ),
                ));
            }
            check_unit_rows(t, &format!("class {n} {what} description"))?;
        }
        classes.push(ClassDescriptions {
            name: rec.class_name,
            texts: rec.descriptions,
            plain,
            extended,
        });
    }
    Ok(DescriptionSet { classes })
}

/// Writes a bundle and its descriptions under `root`, returning the manifest.
pub fn write_dataset(
    root: &std::path::Path,
    bundle: &EmbeddingBundle,
    descriptions: &DescriptionSet,
    props: usize,
    seed: u64,
) -> Result<ManifestDir> {
    let manifest = Manifest::new(bundle.dim, bundle.n_classes, bundle.shots, props, seed);
    let mut md = ManifestDir::create(root, manifest)?;

    let tokens: Vec<&[f64]> = bundle.images.iter().map(|i| i.class_token.as_slice()).collect();
    md.put_tensor("class_tokens", "tensors/class_tokens.pct1", &Tensor::from_rows(&tokens)?)?;
    let mut pdata = Vec::with_capacity(bundle.images.len() * bundle.patch_count * bundle.dim);
    for img in &bundle.images {
        pdata.extend_from_slice(img.patches.data());
    }
    let patches = Tensor::new(
        vec![bundle.images.len(), bundle.patch_count, bundle.dim],
        pdata,
    )?;
    md.put_tensor("patches", "tensors/patches.pct1", &patches)?;
    let idx = |v: &[usize]| Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect());
    let labels: Vec<usize> = bundle.images.iter().map(|i| i.label).collect();
    md.put_tensor("labels", "tensors/labels.pct1", &idx(&labels)?)?;
    md.put_tensor("support", "tensors/support.pct1", &idx(&bundle.support)?)?;
    md.put_tensor("query", "tensors/query.pct1", &idx(&bundle.query)?)?;
    md.put_tensor("class_prompts", "tensors/class_prompts.pct1", &bundle.class_prompts)?;

    let path = md.resolve(DESCRIPTIONS_FILE);
    let mut out = Vec::new();
    for (n, c) in descriptions.classes.iter().enumerate() {
        let rec = DescriptionRecord {
            class_id: n,
            class_name: c.name.clone(),
            descriptions: c.texts.clone(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::json(&path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        md.put_tensor(&plain_name(n), &format!("tensors/{}.pct1", plain_name(n)), &c.plain)?;
        md.put_tensor(
            &extended_name(n),
            &format!("tensors/{}.pct1", extended_name(n)),
            &c.extended,
        )?;
    }
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    md.manifest.descriptions = Some(DESCRIPTIONS_FILE.to_string());
    md.write()?;
    Ok(md)
}
