use proptest::prelude::*;
use proptok::cache::{self, build_caches, extract_features, predict, train_cache, CacheConfig};
use proptok::contrast::{self, sample_terms, total_property_loss, ContrastConfig};
use proptok::datastore::{gen_synthetic, DescriptionSet, EmbeddingBundle, PlantRecord, SynthConfig};
use proptok::mpg::{MpgConfig, MpgParams};
use proptok::propmine::{
    self, ClassAssignment, DescriptionPool, PropertyAssignment, SlotPool, DEFAULT_MAX_ITER,
};
use proptok::{Graph, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    bundle: EmbeddingBundle,
    desc: DescriptionSet,
    plant: PlantRecord,
    pool: DescriptionPool,
    assign: PropertyAssignment,
}

fn fixture(cfg: &SynthConfig) -> Fixture {
    let (bundle, desc, plant) = gen_synthetic(cfg).unwrap();
    let pool = propmine::build_pool(&desc).unwrap();
    let k = propmine::auto_k(bundle.n_classes);
    let clusters = propmine::kmeans(&pool.plain, k, cfg.seed, DEFAULT_MAX_ITER).unwrap();
    let assign = propmine::assemble_assignment(&bundle, &pool, &clusters, cfg.m_props).unwrap();
    Fixture {
        bundle,
        desc,
        plant,
        pool,
        assign,
    }
}

fn small() -> SynthConfig {
    SynthConfig {
        n_classes: 6,
        shots: 4,
        queries_per_class: 3,
        dim: 24,
        patches: 6,
        m_props: 2,
        noise: 0.1,
        seed: 21,
    }
}

fn loss_value(
    fx: &Fixture,
    params: &MpgParams,
    images: &[usize],
    quota: (usize, usize),
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| g.leaf(t.clone())).collect();
    let l = total_property_loss(
        &mut g,
        &params.config,
        &vars,
        &fx.bundle,
        &fx.pool,
        &fx.assign,
        images,
        quota,
        tau,
        rng,
    )
    .unwrap();
    g.value(l).item().unwrap()
}

/// `−s₀/τ + log Σ exp(sᵢ/τ)` over candidate rows, evaluated directly.
fn nce_reference(token: &[f64], cands: &Tensor, tau: f64) -> f64 {
    let logits: Vec<f64> = (0..cands.rows())
        .map(|r| token.iter().zip(cands.row(r)).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() - logits[0]
}

/// With zero output projections every block adds nothing to its residual, so
/// the token direction is the centered seed row.
fn zero_init_tokens(params: &MpgParams) -> Vec<Vec<f64>> {
    let seeds = &params.tensors[0];
    (0..seeds.rows())
        .map(|i| {
            let r = seeds.row(i);
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let c: Vec<f64> = r.iter().map(|v| v - mean).collect();
            let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            c.into_iter().map(|v| v / n).collect()
        })
        .collect()
}

#[test]
fn total_loss_matches_straight_line_oracle() {
    let fx = fixture(&SynthConfig { noise: 0.0, ..small() });
    let params = MpgParams::init(&MpgConfig::new(2, 24, 8)).unwrap();
    let tokens = zero_init_tokens(&params);
    let images: Vec<usize> = fx.bundle.support.iter().copied().step_by(3).collect();
    let quota = (7, 13);
    let tau = 0.3;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut oracle_rng = rng.clone();
    let got = loss_value(&fx, &params, &images, quota, tau, &mut rng);

    let mut expected = 0.0;
    for &j in &images {
        let label = fx.bundle.images[j].label;
        for (i, tok) in tokens.iter().enumerate() {
            let s = sample_terms(&fx.assign, label, i, quota, &mut oracle_rng).unwrap();
            let cands = fx.pool.extended.select_rows(&s.rows()).unwrap();
            expected += nce_reference(tok, &cands, tau);
        }
    }
    assert!((got - expected).abs() < 1e-9 * expected, "{got} vs {expected}");
    assert_eq!(rng.next_u64(), oracle_rng.next_u64(), "rng streams diverged");
}

#[test]
fn single_image_single_slot_is_one_info_nce() {
    let fx = fixture(&SynthConfig { m_props: 1, ..small() });
    let mut params = MpgParams::init(&MpgConfig::new(1, 24, 3)).unwrap();
    let mut prng = ChaCha8Rng::seed_from_u64(1);
    for t in &mut params.tensors {
        for v in t.data_mut() {
            *v += 0.1 * (prng.random::<f64>() - 0.5);
        }
    }
    let j = fx.bundle.support[5];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut twin = rng.clone();
    let got = loss_value(&fx, &params, &[j], (4, 6), 0.3, &mut rng);

    let s = sample_terms(&fx.assign, fx.bundle.images[j].label, 0, (4, 6), &mut twin).unwrap();
    let tok = params.unit_tokens(&fx.bundle.images[j].patches).unwrap();
    let mut g = Graph::new();
    let t = g.constant(tok);
    let c = g.constant(fx.pool.extended.select_rows(&s.rows()).unwrap());
    let l = contrast::info_nce(&mut g, t, c, 0.3).unwrap();
    assert!((got - g.value(l).item().unwrap()).abs() < 1e-12);
}

#[test]
fn duplicated_image_doubles_its_term() {
    let mut fx = fixture(&small());
    // Single-element pools make every draw deterministic.
    fx.assign = PropertyAssignment {
        m: 2,
        classes: (0..6)
            .map(|n| ClassAssignment {
                class: n,
                cluster_scores: vec![],
                ranked: vec![],
                slots: (0..2)
                    .map(|i| SlotPool {
                        cluster: i,
                        fallback_from: None,
                        positives: vec![12 * n + i],
                    })
                    .collect(),
                confusion: vec![],
                hard: vec![12 * ((n + 1) % 6)],
                general: vec![12 * ((n + 2) % 6) + 1],
            })
            .collect(),
    };
    let params = MpgParams::init(&MpgConfig::new(2, 24, 4)).unwrap();
    let j = fx.bundle.support[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let once = loss_value(&fx, &params, &[j], (1, 1), 0.3, &mut rng);
    let twice = loss_value(&fx, &params, &[j, j], (1, 1), 0.3, &mut rng);
    assert!(once > 0.0);
    assert!((twice - 2.0 * once).abs() < 1e-12, "{twice} vs 2×{once}");
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let fx = fixture(&small());
    let mcfg = MpgConfig::new(2, 24, 6);
    let ccfg = ContrastConfig {
        lr: 0.0,
        epochs: 2,
        ..ContrastConfig::default()
    };
    let out = contrast::train_mpg(&fx.bundle, &fx.pool, &fx.assign, &mcfg, &ccfg).unwrap();
    let init = MpgParams::init(&mcfg).unwrap();
    for (a, b) in out.params.tensors.iter().zip(&init.tensors) {
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same);
    }
    assert_eq!(out.trace.len(), 2);
}

#[test]
fn training_is_deterministic_per_seed() {
    let fx = fixture(&small());
    let mcfg = MpgConfig::new(2, 24, 6);
    let ccfg = ContrastConfig {
        epochs: 3,
        seed: 2,
        ..ContrastConfig::default()
    };
    let a = contrast::train_mpg(&fx.bundle, &fx.pool, &fx.assign, &mcfg, &ccfg).unwrap();
    let b = contrast::train_mpg(&fx.bundle, &fx.pool, &fx.assign, &mcfg, &ccfg).unwrap();
    assert_eq!(a, b);
    let c = contrast::train_mpg(
        &fx.bundle,
        &fx.pool,
        &fx.assign,
        &mcfg,
        &ContrastConfig { seed: 3, ..ccfg },
    )
    .unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn mismatched_slot_count_is_rejected() {
    let fx = fixture(&small());
    let r = contrast::train_mpg(
        &fx.bundle,
        &fx.pool,
        &fx.assign,
        &MpgConfig::new(3, 24, 0),
        &ContrastConfig::default(),
    );
    assert!(matches!(r, Err(proptok::Error::Argument(_))));
}

/// Trains on the default synthetic bundle and returns support/query features.
fn trained_default() -> (Fixture, MpgParams, Vec<contrast::EpochStats>) {
    let fx = fixture(&SynthConfig::default());
    let mcfg = MpgConfig::new(3, 64, 0);
    let out = contrast::train_mpg(&fx.bundle, &fx.pool, &fx.assign, &mcfg, &ContrastConfig::default())
        .unwrap();
    (fx, out.params, out.trace)
}

#[test]
fn default_training_reduces_loss_and_aligns_slots() {
    let (fx, params, trace) = trained_default();
    assert!(trace.iter().all(|e| e.mean_loss.is_finite()));
    let first = trace.first().unwrap().mean_loss;
    let last = trace.last().unwrap().mean_loss;
    assert!(last < first, "loss {first} -> {last}");

    let extended: Vec<Tensor> = fx.desc.classes.iter().map(|c| c.extended.clone()).collect();
    let acc = contrast::slot_alignment(&fx.bundle, &params, &extended, &fx.plant.description_property)
        .unwrap();
    assert!(acc > 0.9, "slot alignment {acc}");
}

#[test]
fn cache_training_reduces_loss_without_hurting_support_accuracy() {
    let (fx, params, _) = trained_default();
    let support = extract_features(&fx.bundle, &params, &fx.bundle.support).unwrap();
    let cfg = CacheConfig::default();
    let untrained = build_caches(&support, fx.bundle.n_classes, &cfg).unwrap();
    let before = cache::evaluate(&support, &fx.bundle.class_prompts, &untrained).unwrap();
    let (trained, trace) = train_cache(untrained, &support, &fx.bundle.class_prompts, &cfg).unwrap();
    let after = cache::evaluate(&support, &fx.bundle.class_prompts, &trained).unwrap();
    assert!(trace.last().unwrap().mean_loss < trace[0].mean_loss);
    assert!(after.combined >= before.combined, "{before:?} -> {after:?}");
    assert!(trained.alpha >= 0.0 && trained.beta >= 0.0);
    for keys in [&trained.class_keys, &trained.prop_keys] {
        for r in 0..keys.rows() {
            assert!((proptok::tensor::norm(keys.row(r)) - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn noiseless_prototypes_recover_class_directions() {
    let fx = fixture(&SynthConfig { noise: 0.0, ..small() });
    let params = MpgParams::init(&MpgConfig::new(2, 24, 0)).unwrap();
    let support = extract_features(&fx.bundle, &params, &fx.bundle.support).unwrap();
    let c = build_caches(&support, 6, &CacheConfig::default()).unwrap();
    for (n, dir) in fx.plant.class_dirs.iter().enumerate() {
        let err: f64 = c.class_keys.row(n).iter().zip(dir).map(|(a, b)| (a - b).abs()).sum();
        assert!(err < 1e-12, "class {n}: {err}");
    }
}

#[test]
fn noiseless_queries_predict_their_class() {
    let fx = fixture(&SynthConfig { noise: 0.0, ..small() });
    // Constant tokens make the property cache uniform across classes.
    let params = MpgParams::init(&MpgConfig::new(2, 24, 0)).unwrap();
    let support = extract_features(&fx.bundle, &params, &fx.bundle.support).unwrap();
    let c = build_caches(&support, 6, &CacheConfig::default()).unwrap();
    let query = extract_features(&fx.bundle, &params, &fx.bundle.query).unwrap();
    for b in 0..query.len() {
        let (pred, _) = predict(query.cls.row(b), &query.tokens_of(b), &fx.bundle.class_prompts, &c)
            .unwrap();
        assert_eq!(pred, query.labels[b]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn samples_stay_inside_their_pools(
        seed in any::<u64>(),
        class in 0usize..6,
        slot in 0usize..2,
        hard in 0usize..40,
        general in 0usize..40,
    ) {
        static FX: std::sync::OnceLock<PropertyAssignment> = std::sync::OnceLock::new();
        let assign = FX.get_or_init(|| fixture(&small()).assign);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_terms(assign, class, slot, (hard, general), &mut rng).unwrap();
        let ca = &assign.classes[class];
        prop_assert!(ca.slots[slot].positives.contains(&s.positive));
        prop_assert!(s.hard.iter().all(|r| ca.hard.contains(r)));
        prop_assert!(s.general.iter().all(|r| ca.general.contains(r)));
        prop_assert_eq!(s.hard.len() + s.general.len(), hard + general);
        for (drawn, pool) in [(&s.hard, &ca.hard), (&s.general, &ca.general)] {
            if pool.len() >= drawn.len() {
                let mut d = drawn.clone();
                d.sort_unstable();
                d.dedup();
                prop_assert_eq!(d.len(), drawn.len(), "repeat despite a large pool");
            }
        }
        let own = assign.positives_of(class);
        prop_assert!(s.hard.iter().chain(&s.general).all(|r| !own.contains(r)));
    }
}
