//! Pipeline stages. Each reads the artifacts of earlier stages from the run
//! directory, writes its own, and deletes anything downstream of it.

use std::path::Path;
use std::time::Instant;

use proptok::cache::{self, CacheConfig, HybridCache};
use proptok::contrast::{self, ContrastConfig};
use proptok::datastore::{
    gen_synthetic, load_descriptions, load_tensor, save_tensor, validate_bundle, write_dataset,
    DescriptionSet, EmbeddingBundle, ManifestDir, SynthConfig,
};
use proptok::mpg::{MpgConfig, MpgParams};
use proptok::optim::AdamWConfig;
use proptok::propmine::{self, ClusterSet, DescriptionPool};

use crate::artifacts::*;
use crate::error::{CliError, CliResult};
use crate::{CacheArgs, ClusterArgs, GenSynthArgs, MpgArgs, Paths, RunCmd, SelectArgs};

struct Data {
    md: ManifestDir,
    bundle: EmbeddingBundle,
    desc: DescriptionSet,
}

impl Data {
    fn load(paths: &Paths) -> CliResult<Self> {
        let md = ManifestDir::open(&paths.data)?;
        let bundle = validate_bundle(&md)?;
        let desc = load_descriptions(&md)?;
        Ok(Self { md, bundle, desc })
    }

    fn seed(&self, paths: &Paths) -> u64 {
        paths.seed.unwrap_or(self.md.manifest.seed)
    }

    fn pool(&self) -> CliResult<DescriptionPool> {
        Ok(propmine::build_pool(&self.desc)?)
    }
}

fn timed(run: &Path, stage: &str, f: impl FnOnce() -> CliResult<()>) -> CliResult<()> {
    std::fs::create_dir_all(run).map_err(|e| proptok::Error::io(run, e))?;
    let t = Instant::now();
    f()?;
    record_timing(run, stage, t.elapsed().as_secs_f64())?;
    Ok(())
}

pub fn gen_synth(a: &GenSynthArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        n_classes: a.classes,
        shots: a.shots,
        queries_per_class: a.queries,
        dim: a.dim,
        patches: a.patches,
        m_props: a.props,
        noise: a.noise,
        seed: a.seed,
    };
    let (bundle, desc, plant) = gen_synthetic(&cfg)?;
    let md = write_dataset(&a.out, &bundle, &desc, cfg.m_props, cfg.seed)?;
    write_json(
        &md.root.join(PLANT_FILE),
        &PlantFile {
            format_version: FORMAT_VERSION,
            synth: cfg,
            plant,
        },
    )?;
    Ok(())
}

pub fn cluster(paths: &Paths, args: &ClusterArgs) -> CliResult<()> {
    timed(&paths.run, "cluster", || {
        let data = Data::load(paths)?;
        let pool = data.pool()?;
        let k = match args.k.as_str() {
            "auto" => propmine::auto_k(data.bundle.n_classes),
            s => s
                .parse()
                .map_err(|_| CliError::Usage(format!("--k must be \"auto\" or a count, got {s:?}")))?,
        };
        let seed = data.seed(paths);
        let cs = propmine::kmeans(&pool.plain, k, seed, args.max_iter)?;
        invalidate(
            &paths.run,
            &[ASSIGNMENT_FILE, MPG_DIR, TRAIN_MPG_FILE, CACHE_DIR, TRAIN_CACHE_FILE, REPORT_FILE],
        )?;
        save_tensor(paths.run.join(CENTROIDS_FILE), &cs.centroids)?;
        write_json(
            &paths.run.join(CLUSTERS_FILE),
            &ClustersFile {
                format_version: FORMAT_VERSION,
                k: cs.k,
                seed,
                max_iter: args.max_iter,
                iterations: cs.iterations,
                inertia: cs.inertia,
                inertia_trace: cs.inertia_trace,
                assignment: cs.assignment,
                centroids: CENTROIDS_FILE.to_string(),
            },
        )?;
        Ok(())
    })
}

fn load_clusters(run: &Path, pool: &DescriptionPool) -> CliResult<(ClustersFile, ClusterSet)> {
    let file: ClustersFile = read_json(&run.join(CLUSTERS_FILE))?;
    let centroids = load_tensor(run.join(&file.centroids))?;
    if file.assignment.len() != pool.owner.len()
        || centroids.rows() != file.k
        || file.assignment.iter().any(|&c| c >= file.k)
    {
        return Err(proptok::Error::Validation {
            invariant: "clusters",
            detail: format!(
                "{} assignments over {} clusters for {} pooled descriptions",
                file.assignment.len(),
                file.k,
                pool.owner.len()
            ),
        }
        .into());
    }
    let cs = ClusterSet {
        k: file.k,
        assignment: file.assignment.clone(),
        centroids,
        inertia: file.inertia,
        inertia_trace: file.inertia_trace.clone(),
        iterations: file.iterations,
    };
    Ok((file, cs))
}

pub fn select(paths: &Paths, args: &SelectArgs) -> CliResult<()> {
    timed(&paths.run, "select", || {
        let data = Data::load(paths)?;
        let pool = data.pool()?;
        let (_, cs) = load_clusters(&paths.run, &pool)?;
        let m = args.props.unwrap_or(data.md.manifest.props);
        let assignment = propmine::assemble_assignment(&data.bundle, &pool, &cs, m)?;
        invalidate(
            &paths.run,
            &[MPG_DIR, TRAIN_MPG_FILE, CACHE_DIR, TRAIN_CACHE_FILE, REPORT_FILE],
        )?;
        write_json(
            &paths.run.join(ASSIGNMENT_FILE),
            &AssignmentFile {
                format_version: FORMAT_VERSION,
                k: cs.k,
                fallbacks: assignment.fallbacks(),
                assignment,
            },
        )?;
        Ok(())
    })
}

pub fn train_mpg(paths: &Paths, args: &MpgArgs) -> CliResult<()> {
    timed(&paths.run, "train_mpg", || {
        let data = Data::load(paths)?;
        let pool = data.pool()?;
        let asg: AssignmentFile = read_json(&paths.run.join(ASSIGNMENT_FILE))?;
        let seed = data.seed(paths);
        let mpg_cfg = MpgConfig {
            m: asg.assignment.m,
            dim: data.bundle.dim,
            layers: args.layers,
            hidden: args.hidden.unwrap_or(data.bundle.dim),
            heads: args.heads,
            seed,
            layer_norm: true,
        };
        let ccfg = ContrastConfig {
            tau: args.tau,
            negatives: args.negatives,
            hard_start: args.hard_start,
            hard_end: args.hard_end,
            epochs: args.epochs,
            lr: args.lr,
            batch: args.batch,
            seed,
            adamw: AdamWConfig::default(),
        };
        check_contrast(&ccfg)?;
        let out = contrast::train_mpg(&data.bundle, &pool, &asg.assignment, &mpg_cfg, &ccfg)?;
        invalidate(&paths.run, &[MPG_DIR, CACHE_DIR, TRAIN_CACHE_FILE, REPORT_FILE])?;
        out.params.save(&paths.run.join(MPG_DIR))?;
        write_json(
            &paths.run.join(TRAIN_MPG_FILE),
            &TrainMpgFile {
                format_version: FORMAT_VERSION,
                param_count: out.params.param_count(),
                mpg: mpg_cfg,
                contrast: ccfg,
                epochs: out.trace,
            },
        )?;
        Ok(())
    })
}

fn check_contrast(c: &ContrastConfig) -> CliResult<()> {
    let ok = c.tau > 0.0
        && c.negatives >= 1
        && 0.0 <= c.hard_start
        && c.hard_start <= c.hard_end
        && c.hard_end <= 1.0
        && c.epochs >= 1
        && c.lr >= 0.0
        && c.batch >= 1;
    if ok {
        Ok(())
    } else {
        Err(CliError::Usage(format!("invalid contrastive settings {c:?}")))
    }
}

fn cache_config(args: &CacheArgs, seed: u64) -> CliResult<CacheConfig> {
    let cfg = CacheConfig {
        beta_s: args.beta_s,
        logit_scale: args.logit_scale,
        epochs: args.cache_epochs,
        lr: args.cache_lr,
        batch: args.cache_batch,
        warmup_frac: args.warmup,
        seed,
        adamw: AdamWConfig::default(),
    };
    if !(cfg.beta_s > 0.0 && cfg.lr >= 0.0 && cfg.batch >= 1 && (0.0..=1.0).contains(&cfg.warmup_frac)) {
        return Err(CliError::Usage(format!("invalid cache settings {cfg:?}")));
    }
    Ok(cfg)
}

pub fn train_cache(paths: &Paths, args: &CacheArgs) -> CliResult<()> {
    timed(&paths.run, "train_cache", || {
        let data = Data::load(paths)?;
        let params = MpgParams::load(&paths.run.join(MPG_DIR))?;
        let cfg = cache_config(args, data.seed(paths))?;
        let support = cache::extract_features(&data.bundle, &params, &data.bundle.support)?;
        let built = cache::build_caches(&support, data.bundle.n_classes, &cfg)?;
        let (trained, trace) = cache::train_cache(built, &support, &data.bundle.class_prompts, &cfg)?;
        invalidate(&paths.run, &[CACHE_DIR, REPORT_FILE])?;
        trained.save(&paths.run.join(CACHE_DIR))?;
        write_json(
            &paths.run.join(TRAIN_CACHE_FILE),
            &TrainCacheFile {
                format_version: FORMAT_VERSION,
                config: cfg,
                epochs: trace,
            },
        )?;
        Ok(())
    })
}

pub fn eval(paths: &Paths, beta_s: f64, logit_scale: f64) -> CliResult<()> {
    timed(&paths.run, "eval", || {
        let data = Data::load(paths)?;
        let run = &paths.run;
        let params = MpgParams::load(&run.join(MPG_DIR))?;
        let mpg_file: TrainMpgFile = read_json(&run.join(TRAIN_MPG_FILE))?;
        let clusters: ClustersFile = read_json(&run.join(CLUSTERS_FILE))?;
        let asg: AssignmentFile = read_json(&run.join(ASSIGNMENT_FILE))?;

        let (cache, training) = if run.join(CACHE_DIR).join(cache::CHECKPOINT_FILE).exists() {
            let c = HybridCache::load(&run.join(CACHE_DIR))?;
            let t: TrainCacheFile = read_json(&run.join(TRAIN_CACHE_FILE))?;
            (c, Some(t.config))
        } else {
            let cfg = CacheConfig {
                beta_s,
                logit_scale,
                ..CacheConfig::default()
            };
            let support = cache::extract_features(&data.bundle, &params, &data.bundle.support)?;
            (cache::build_caches(&support, data.bundle.n_classes, &cfg)?, None)
        };

        let queries = cache::extract_features(&data.bundle, &params, &data.bundle.query)?;
        let accuracies = cache::evaluate(&queries, &data.bundle.class_prompts, &cache)?;
        let plant_path = data.md.root.join(PLANT_FILE);
        let slot_alignment = if plant_path.exists() {
            let plant: PlantFile = read_json(&plant_path)?;
            let ext: Vec<_> = data.desc.classes.iter().map(|c| c.extended.clone()).collect();
            Some(contrast::slot_alignment(
                &data.bundle,
                &params,
                &ext,
                &plant.plant.description_property,
            )?)
        } else {
            None
        };
        let m = &data.md.manifest;
        let report = Report {
            format_version: FORMAT_VERSION,
            accuracies,
            alpha: cache.alpha,
            beta: cache.beta,
            trained: cache.trained,
            slot_angles_deg: cache::slot_angles(&queries),
            slot_alignment,
            n_queries: queries.len(),
            fallbacks: asg.fallbacks,
            config: ConfigEcho {
                data: DataEcho {
                    dim: m.dim,
                    n_classes: m.n_classes,
                    shots: m.shots,
                    props: m.props,
                    seed: m.seed,
                },
                clusters: ClusterEcho {
                    k: clusters.k,
                    seed: clusters.seed,
                    max_iter: clusters.max_iter,
                },
                mpg: mpg_file.mpg,
                contrast: mpg_file.contrast,
                cache: CacheEcho {
                    beta_s: cache.beta_s,
                    logit_scale: cache.logit_scale,
                    training,
                },
            },
        };
        write_json(&run.join(REPORT_FILE), &report)?;
        Ok(())
    })
}

pub fn run_all(c: &RunCmd) -> CliResult<()> {
    cluster(&c.paths, &c.cluster)?;
    select(&c.paths, &c.select)?;
    train_mpg(&c.paths, &c.mpg)?;
    train_cache(&c.paths, &c.cache)?;
    eval(&c.paths, c.cache.beta_s, c.cache.logit_scale)
}
