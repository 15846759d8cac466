//! Multi-property generator: `M` learnable seed tokens cross-attend to an
//! image's patch features through `L` layers, each followed by a per-token
//! feed-forward block. Every output row is one property token.
//!
//! Parameters live in a flat `Vec<Tensor>` so the optimizer and the graph
//! can treat them uniformly; [`Layout`] maps names to positions.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::datastore::{load_tensor, save_tensor};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, LAYER_NORM_EPS};

pub const INIT_STD: f64 = 0.02;
pub const CHECKPOINT_FILE: &str = "mpg.json";

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpgConfig {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    /// FFN hidden width.
    #[serde(rename = "H")]
    pub hidden: usize,
    pub heads: usize,
    pub seed: u64,
    /// Post-residual layer norms; disabled only for hand-checked examples.
    #[serde(default = "default_true")]
    pub layer_norm: bool,
}

impl MpgConfig {
    pub fn new(m: usize, dim: usize, seed: u64) -> Self {
        Self {
            m,
            dim,
            layers: 2,
            hidden: dim,
            heads: 1,
            seed,
            layer_norm: true,
        }
    }

    fn check(&self) -> Result<()> {
        if self.m == 0 || self.dim == 0 || self.layers == 0 || self.hidden == 0 {
            return Err(Error::arg(format!("degenerate generator config {self:?}")));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::arg(format!(
                "{} heads do not divide D = {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (m, d, h) = (self.m, self.dim, self.hidden);
        let per_layer = 4 * d * d + 2 * d + m * (d * h + h + h * d + d) + 2 * d;
        m * d + self.layers * per_layer
    }
}

/// Positions of named parameters in the flat list.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    m: usize,
}

const ATTN: [&str; 6] = ["wq", "wk", "wv", "wo", "attn_gain", "attn_bias"];
const FFN: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl Layout {
    fn per_layer(self) -> usize {
        ATTN.len() + FFN.len() * self.m + 2
    }

    fn base(self, layer: usize) -> usize {
        1 + layer * self.per_layer()
    }

    pub fn seeds(self) -> usize {
        0
    }

    /// Index of attention parameter `k` (`wq, wk, wv, wo, gain, bias`).
    fn attn(self, layer: usize, k: usize) -> usize {
        self.base(layer) + k
    }

    /// Index of FFN parameter `k` (`w1, b1, w2, b2`) of token group `i`.
    fn ffn(self, layer: usize, i: usize, k: usize) -> usize {
        self.base(layer) + ATTN.len() + FFN.len() * i + k
    }

    fn ffn_norm(self, layer: usize, k: usize) -> usize {
        self.base(layer) + ATTN.len() + FFN.len() * self.m + k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpgParams {
    pub config: MpgConfig,
    pub tensors: Vec<Tensor>,
}

impl MpgParams {
    pub fn layout(&self) -> Layout {
        Layout { m: self.config.m }
    }

    /// Names parallel to `tensors`.
    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["seeds".to_string()];
        for l in 0..self.config.layers {
            for a in ATTN {
                out.push(format!("layer{l}.{a}"));
            }
            for i in 0..self.config.m {
                for f in FFN {
                    out.push(format!("layer{l}.ffn{i}.{f}"));
                }
            }
            out.push(format!("layer{l}.ffn_gain"));
            out.push(format!("layer{l}.ffn_bias"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Seeds, queries, keys, values and FFN input weights ~ N(0, 0.02²);
    /// output projection, FFN output weights and biases zero; norm gains one.
    pub fn init(config: &MpgConfig) -> Result<Self> {
        config.check()?;
        let (m, d, h) = (config.m, config.dim, config.hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut normal = |shape: &[usize]| {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| INIT_STD * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::new(shape.to_vec(), data).expect("sized to shape")
        };
        let mut tensors = vec![normal(&[m, d])];
        for _ in 0..config.layers {
            tensors.push(normal(&[d, d]));
            tensors.push(normal(&[d, d]));
            tensors.push(normal(&[d, d]));
            tensors.push(Tensor::zeros(&[d, d]));
            tensors.push(Tensor::filled(&[1, d], 1.0));
            tensors.push(Tensor::zeros(&[1, d]));
            for _ in 0..m {
                tensors.push(normal(&[d, h]));
                tensors.push(Tensor::zeros(&[1, h]));
                tensors.push(Tensor::zeros(&[h, d]));
                tensors.push(Tensor::zeros(&[1, d]));
            }
            tensors.push(Tensor::filled(&[1, d], 1.0));
            tensors.push(Tensor::zeros(&[1, d]));
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Property tokens (`M × D`, not normalized) for one image's patches.
    pub fn tokens(&self, patches: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.tensors.iter().map(|t| g.constant(t.clone())).collect();
        let p = g.constant(patches.clone());
        let out = forward(&mut g, &self.config, &vars, p)?;
        Ok(g.value(out).clone())
    }

    /// Unit-norm property tokens.
    pub fn unit_tokens(&self, patches: &Tensor) -> Result<Tensor> {
        self.tokens(patches)?.l2_normalize_rows()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let pdir = dir.join("params");
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let names = self.names();
        for (name, t) in names.iter().zip(&self.tensors) {
            save_tensor(pdir.join(format!("{name}.pct1")), t)?;
        }
        let meta = Checkpoint {
            format_version: 1,
            config: self.config.clone(),
            params: names,
            param_count: self.param_count(),
        };
        let path = dir.join(CHECKPOINT_FILE);
        let mut text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let template = Self::init(&meta.config)?;
        if template.names() != meta.params {
            return Err(Error::Format {
                path,
                msg: "parameter list does not match the config".into(),
            });
        }
        let mut tensors = Vec::with_capacity(meta.params.len());
        for (name, want) in meta.params.iter().zip(&template.tensors) {
            let p = dir.join("params").join(format!("{name}.pct1"));
            let t = load_tensor(&p)?;
            if t.shape() != want.shape() {
                return Err(Error::Format {
                    path: p,
                    msg: format!("shape {:?}, expected {:?}", t.shape(), want.shape()),
                });
            }
            tensors.push(t);
        }
        Ok(Self {
            config: meta.config,
            tensors,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: MpgConfig,
    params: Vec<String>,
    param_count: usize,
}

/// Records the generator on `g`. `params` follows [`MpgParams::names`];
/// `patches` is `P × D`. Returns the `M × D` token matrix.
pub fn forward(g: &mut Graph, cfg: &MpgConfig, params: &[Var], patches: Var) -> Result<Var> {
    cfg.check()?;
    let lay = Layout { m: cfg.m };
    let expected = 1 + cfg.layers * lay.per_layer();
    if params.len() != expected {
        return Err(Error::shape(format!(
            "{} parameter tensors, generator needs {expected}",
            params.len()
        )));
    }
    let (_, pd) = g.value(patches).dims2()?;
    if pd != cfg.dim {
        return Err(Error::shape(format!("patch dim {pd}, generator D = {}", cfg.dim)));
    }
    let dh = cfg.dim / cfg.heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let mut x = params[lay.seeds()];
    for l in 0..cfg.layers {
        let w = |k: usize| params[lay.attn(l, k)];
        let q = g.matmul(x, w(0))?;
        let k = g.matmul(patches, w(1))?;
        let v = g.matmul(patches, w(2))?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let (qh, kh, vh) = if cfg.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let s = g.matmul_t(qh, kh)?;
            let s = g.scale(s, inv_sqrt);
            let a = g.softmax_rows(s)?;
            heads.push(g.matmul(a, vh)?);
        }
        let attn = if cfg.heads == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let attn = g.matmul(attn, w(3))?;
        let mut f = g.add(x, attn)?;
        if cfg.layer_norm {
            f = g.layer_norm(f, w(4), w(5), LAYER_NORM_EPS)?;
        }

        let mut rows = Vec::with_capacity(cfg.m);
        for i in 0..cfg.m {
            let p = |k: usize| params[lay.ffn(l, i, k)];
            let r = g.slice_rows(f, i, 1)?;
            let hdn = g.matmul(r, p(0))?;
            let hdn = g.add_row(hdn, p(1))?;
            let hdn = g.gelu(hdn);
            let o = g.matmul(hdn, p(2))?;
            rows.push(g.add_row(o, p(3))?);
        }
        let ffn = g.concat_rows(&rows)?;
        let mut y = g.add(f, ffn)?;
        if cfg.layer_norm {
            y = g.layer_norm(y, params[lay.ffn_norm(l, 0)], params[lay.ffn_norm(l, 1)], LAYER_NORM_EPS)?;
        }
        x = y;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, max_rel_err, DEFAULT_STEP};

    fn small(seed: u64) -> MpgConfig {
        MpgConfig::new(3, 8, seed)
    }

    fn random_patches(p: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..p * d).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new(vec![p, d], data).unwrap()
    }

    #[test]
    fn parameter_count_matches_formula() {
        let cfg = MpgConfig::new(3, 16, 0);
        let p = MpgParams::init(&cfg).unwrap();
        assert_eq!(p.param_count(), cfg.param_count());
        assert_eq!(cfg.param_count(), 5488);
        assert_eq!(p.names().len(), p.tensors.len());
    }

    #[test]
    fn rejects_bad_heads() {
        let cfg = MpgConfig { heads: 3, ..small(0) };
        assert!(matches!(MpgParams::init(&cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn hand_computed_attention_step() {
        // D = 2, one token, identity projections, zero FFN, no norms.
        let cfg = MpgConfig {
            m: 1,
            dim: 2,
            layers: 1,
            hidden: 2,
            heads: 1,
            seed: 0,
            layer_norm: false,
        };
        let mut p = MpgParams::init(&cfg).unwrap();
        p.tensors[0] = Tensor::row_vector(&[1.0, 0.0]);
        for k in 0..4 {
            p.tensors[1 + k] = Tensor::eye(2);
        }
        p.tensors[7] = Tensor::zeros(&[2, 2]);
        let patches = Tensor::eye(2);
        let out = p.tokens(&patches).unwrap();
        let a0 = 1.0 / (1.0 + (-std::f64::consts::FRAC_1_SQRT_2).exp());
        assert!((a0 - 0.66976).abs() < 1e-5);
        assert!((out.get(0, 0) - (1.0 + a0)).abs() < 1e-12);
        assert!((out.get(0, 1) - (1.0 - a0)).abs() < 1e-12);
        assert!((out.get(0, 0) - 1.66976).abs() < 1e-5);
        assert!((out.get(0, 1) - 0.33024).abs() < 1e-5);
    }

    #[test]
    fn zero_init_output_is_normed_seed_chain() {
        // W_O and the FFN output layer start at zero, so each layer only
        // layer-norms its input twice.
        let cfg = small(4);
        let p = MpgParams::init(&cfg).unwrap();
        let out = p.tokens(&random_patches(5, 8, 1)).unwrap();
        let ones = Tensor::filled(&[1, 8], 1.0);
        let zeros = Tensor::zeros(&[1, 8]);
        let mut x = p.tensors[0].clone();
        for _ in 0..2 * cfg.layers {
            x = x.layer_norm(&ones, &zeros, LAYER_NORM_EPS).unwrap();
        }
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn perturbed(cfg: &MpgConfig, seed: u64) -> MpgParams {
        let mut p = MpgParams::init(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut p.tensors {
            for v in t.data_mut() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    #[test]
    fn duplicated_and_permuted_patches_leave_tokens_unchanged() {
        let cfg = small(2);
        let p = perturbed(&cfg, 9);
        let patches = random_patches(4, 8, 3);
        let base = p.tokens(&patches).unwrap();

        let doubled = Tensor::concat_rows(&[&patches, &patches]).unwrap();
        let permuted = patches.select_rows(&[2, 0, 3, 1]).unwrap();
        for other in [doubled, permuted] {
            let out = p.tokens(&other).unwrap();
            for (a, b) in out.data().iter().zip(base.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multi_head_runs_and_differs_from_single() {
        let cfg = MpgConfig { heads: 2, ..small(2) };
        let p = perturbed(&cfg, 9);
        let single = MpgParams {
            config: MpgConfig { heads: 1, ..cfg.clone() },
            tensors: p.tensors.clone(),
        };
        let patches = random_patches(4, 8, 3);
        let a = p.tokens(&patches).unwrap();
        let b = single.tokens(&patches).unwrap();
        assert_eq!(a.shape(), &[3, 8]);
        assert!(a.sub(&b).unwrap().norm() > 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = MpgConfig::new(2, 4, 1);
        let p = perturbed(&cfg, 5);
        let patches = random_patches(3, 4, 6);
        let target = random_patches(2, 4, 7);
        let report = check_gradients(&p.tensors, DEFAULT_STEP, |g, vars| {
            let pv = g.constant(patches.clone());
            let out = forward(g, &cfg, vars, pv)?;
            let t = g.constant(target.clone());
            let prod = g.mul(out, t)?;
            Ok(g.sum(prod))
        })
        .unwrap();
        assert!(max_rel_err(&report) < 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = small(3);
        let p = perturbed(&cfg, 1);
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path()).unwrap();
        let back = MpgParams::load(dir.path()).unwrap();
        assert_eq!(back, p);
    }
}
