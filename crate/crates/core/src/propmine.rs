//! Dominant-property mining: pool the description embeddings, cluster them,
//! rank clusters against each class's support images, and assemble the
//! positive / hard-negative / general-negative pools used for contrastive
//! training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{DescriptionSet, EmbeddingBundle};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_ITER: usize = 100;
pub const CONFUSION_TOP: usize = 5;

/// All descriptions of all classes, concatenated class by class.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionPool {
    /// `P × D` plain embeddings (clustering input).
    pub plain: Tensor,
    /// `P × D` class-name-extended embeddings (contrastive targets).
    pub extended: Tensor,
    /// Owning class of each row.
    pub owner: Vec<usize>,
}

pub fn build_pool(desc: &DescriptionSet) -> Result<DescriptionPool> {
    let mut plain = Vec::new();
    let mut extended = Vec::new();
    let mut owner = Vec::new();
    for (n, c) in desc.classes.iter().enumerate() {
        if c.plain.rows() == 0 || c.texts.is_empty() {
            return Err(Error::EmptyClass(n));
        }
        plain.push(&c.plain);
        extended.push(&c.extended);
        owner.extend(std::iter::repeat_n(n, c.plain.rows()));
    }
    if plain.is_empty() {
        return Err(Error::EmptyInput("description set has no classes"));
    }
    Ok(DescriptionPool {
        plain: Tensor::concat_rows(&plain)?,
        extended: Tensor::concat_rows(&extended)?,
        owner,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    pub k: usize,
    pub assignment: Vec<usize>,
    /// `k × D`
    pub centroids: Tensor,
    pub inertia: f64,
    /// Inertia after the assignment step of each Lloyd iteration.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl ClusterSet {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cluster)
            .map(|(i, _)| i)
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid of `p`; ties go to the lower index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: each new centre is drawn with probability
/// proportional to its squared distance from the nearest chosen centre.
fn seed_centroids(points: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points.row(first).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    while centroids.len() < k {
        let total: f64 = (0..n).filter(|&i| !chosen[i]).map(|i| d2[i]).sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for i in (0..n).filter(|&i| !chosen[i]) {
                if d2[i] > 0.0 {
                    pick = Some(i);
                    target -= d2[i];
                    if target <= 0.0 {
                        break;
                    }
                }
            }
            pick.expect("positive total implies a candidate")
        } else {
            // Only duplicates of chosen points remain.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let c = points.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Stops at an assignment fixpoint
/// or after `max_iter` iterations. Empty clusters are re-seeded with the
/// point farthest from its current centroid.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, max_iter: usize) -> Result<ClusterSet> {
    let (n, dim) = points.dims2()?;
    if k == 0 || k > n {
        return Err(Error::arg(format!("k = {k} for {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut assignment: Vec<usize> = Vec::new();
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut next = Vec::with_capacity(n);
        let mut dists = Vec::with_capacity(n);
        for i in 0..n {
            let (c, d) = nearest(points.row(i), &centroids);
            next.push(c);
            dists.push(d);
        }
        repair_empty(points, &mut next, &mut dists, &mut centroids);

        let inertia: f64 = dists.iter().sum();
        if let Some(&prev) = trace.last() {
            debug_assert!(
                inertia <= prev + 1e-12 * prev.max(1.0),
                "k-means inertia rose from {prev} to {inertia}"
            );
        }
        trace.push(inertia);
        let converged = next == assignment;
        assignment = next;
        if converged {
            break;
        }
        centroids = means(points, &assignment, k, dim, &centroids);
    }

    let centroids = means(points, &assignment, k, dim, &centroids);
    let inertia = (0..n)
        .map(|i| sq_dist(points.row(i), &centroids[assignment[i]]))
        .sum();
    Ok(ClusterSet {
        k,
        assignment,
        centroids: Tensor::from_rows(&centroids)?,
        inertia,
        inertia_trace: trace,
        iterations,
    })
}

fn means(points: &Tensor, assignment: &[usize], k: usize, dim: usize, prev: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(c, (s, cnt))| {
            if cnt == 0 {
                prev[c].clone()
            } else {
                s.into_iter().map(|v| v / cnt as f64).collect()
            }
        })
        .collect()
}

fn repair_empty(
    points: &Tensor,
    assignment: &mut [usize],
    dists: &mut [f64],
    centroids: &mut [Vec<f64>],
) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignment.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far: Option<usize> = None;
        for i in 0..assignment.len() {
            if counts[assignment[i]] > 1 && far.is_none_or(|f| dists[i] > dists[f]) {
                far = Some(i);
            }
        }
        let Some(i) = far else { return };
        centroids[empty] = points.row(i).to_vec();
        assignment[i] = empty;
        dists[i] = 0.0;
    }
}

/// Mean cosine similarity between `K` support tokens and `P_i` cluster members.
pub fn score_cluster(support: &Tensor, members: &Tensor) -> Result<f64> {
    if support.rows() == 0 || support.is_empty() {
        return Err(Error::EmptyInput("no support tokens"));
    }
    if members.rows() == 0 || members.is_empty() {
        return Err(Error::EmptyInput("no cluster members"));
    }
    let sims = support.matmul_t(members)?;
    Ok(sims.sum() / sims.len() as f64)
}

/// The `m` best clusters by descending score; equal scores keep the lower id first.
pub fn select_top_m(scores: &[f64], m: usize) -> Result<Vec<usize>> {
    if m > scores.len() {
        return Err(Error::arg(format!(
            "cannot select {m} clusters from {}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(m);
    Ok(order)
}

/// Mean zero-shot score of class `n`'s supports against every class prompt.
pub fn confusion_scores(bundle: &EmbeddingBundle, n: usize) -> Result<Vec<f64>> {
    let supports = bundle.supports_of(n);
    if supports.is_empty() {
        return Err(Error::EmptyInput("class has no support images"));
    }
    let tokens = bundle.class_token_matrix(&supports);
    let scores = tokens.matmul_t(&bundle.class_prompts)?.mean_rows()?;
    Ok(scores.into_data())
}

/// The `top` other classes that class `n`'s supports score highest on.
pub fn confusion_classes(bundle: &EmbeddingBundle, n: usize, top: usize) -> Result<Vec<usize>> {
    let scores = confusion_scores(bundle, n)?;
    Ok(rank_confusions(&scores, n, top))
}

fn rank_confusions(scores: &[f64], n: usize, top: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..scores.len()).filter(|&c| c != n).collect();
    others.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    others.truncate(top);
    others
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotPool {
    /// Cluster this token slot is matched to.
    pub cluster: usize,
    /// Set when the ranked cluster held none of the class's descriptions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_from: Option<usize>,
    /// Pool rows of the class's own descriptions in `cluster`.
    pub positives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAssignment {
    pub class: usize,
    pub cluster_scores: Vec<f64>,
    /// Top-M clusters by score, before any fallback.
    pub ranked: Vec<usize>,
    pub slots: Vec<SlotPool>,
    pub confusion: Vec<usize>,
    /// Positives of the confusion classes.
    pub hard: Vec<usize>,
    /// Positives of every class that is neither this one nor a confusion class.
    pub general: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyAssignment {
    pub m: usize,
    pub classes: Vec<ClassAssignment>,
}

impl PropertyAssignment {
    pub fn fallbacks(&self) -> usize {
        self.classes
            .iter()
            .flat_map(|c| &c.slots)
            .filter(|s| s.fallback_from.is_some())
            .count()
    }

    /// All positive rows of class `n` across its slots.
    pub fn positives_of(&self, n: usize) -> Vec<usize> {
        let mut all: Vec<usize> = self.classes[n]
            .slots
            .iter()
            .flat_map(|s| s.positives.iter().copied())
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

pub fn assemble_assignment(
    bundle: &EmbeddingBundle,
    pool: &DescriptionPool,
    clusters: &ClusterSet,
    m: usize,
) -> Result<PropertyAssignment> {
    let n_classes = bundle.n_classes;
    if pool.owner.len() != clusters.assignment.len() {
        return Err(Error::shape(format!(
            "{} pool rows but {} cluster assignments",
            pool.owner.len(),
            clusters.assignment.len()
        )));
    }
    if m == 0 {
        return Err(Error::arg("M must be at least 1"));
    }
    let members: Vec<Vec<usize>> = (0..clusters.k).map(|c| clusters.members(c)).collect();

    let mut classes = Vec::with_capacity(n_classes);
    for n in 0..n_classes {
        let supports = bundle.class_token_matrix(&bundle.supports_of(n));
        let scores = members
            .iter()
            .map(|rows| {
                if rows.is_empty() {
                    Ok(f64::NEG_INFINITY)
                } else {
                    score_cluster(&supports, &pool.plain.select_rows(rows)?)
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let ranked = select_top_m(&scores, m)?;

        let owned: Vec<Vec<usize>> = members
            .iter()
            .map(|rows| rows.iter().copied().filter(|&r| pool.owner[r] == n).collect())
            .collect();
        let holding: Vec<usize> = (0..clusters.k).filter(|&c| !owned[c].is_empty()).collect();
        if holding.is_empty() {
            return Err(Error::NoPositives(n));
        }

        let mut used: Vec<usize> = ranked.iter().copied().filter(|&c| !owned[c].is_empty()).collect();
        let mut slots = Vec::with_capacity(m);
        for &c in &ranked {
            if !owned[c].is_empty() {
                slots.push(SlotPool {
                    cluster: c,
                    fallback_from: None,
                    positives: owned[c].clone(),
                });
                continue;
            }
            let unused: Vec<usize> = holding.iter().copied().filter(|h| !used.contains(h)).collect();
            let candidates = if unused.is_empty() { &holding } else { &unused };
            let target = clusters.centroids.row(c);
            let sub = *candidates
                .iter()
                .min_by(|&&a, &&b| {
                    sq_dist(clusters.centroids.row(a), target)
                        .total_cmp(&sq_dist(clusters.centroids.row(b), target))
                        .then(a.cmp(&b))
                })
                .expect("candidates nonempty");
            used.push(sub);
            slots.push(SlotPool {
                cluster: sub,
                fallback_from: Some(c),
                positives: owned[sub].clone(),
            });
        }

        let confusion = rank_confusions(&confusion_scores(bundle, n)?, n, CONFUSION_TOP);
        classes.push(ClassAssignment {
            class: n,
            cluster_scores: scores,
            ranked,
            slots,
            confusion,
            hard: Vec::new(),
            general: Vec::new(),
        });
    }

    let positives: Vec<Vec<usize>> = (0..n_classes)
        .map(|n| {
            let mut all: Vec<usize> = classes[n]
                .slots
                .iter()
                .flat_map(|s| s.positives.iter().copied())
                .collect();
            all.sort_unstable();
            all.dedup();
            all
        })
        .collect();
    for ca in &mut classes {
        let n = ca.class;
        for c in 0..n_classes {
            if c == n {
                continue;
            }
            if ca.confusion.contains(&c) {
                ca.hard.extend(&positives[c]);
            } else {
                ca.general.extend(&positives[c]);
            }
        }
        ca.hard.sort_unstable();
        ca.general.sort_unstable();
    }

    Ok(PropertyAssignment { m, classes })
}

/// Default cluster count: half the number of classes, rounded up.
pub fn auto_k(n_classes: usize) -> usize {
    n_classes.div_ceil(2).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::ClassDescriptions;
    use proptest::prelude::*;
    use rand::Rng;

    fn class(rows: &[[f64; 2]]) -> ClassDescriptions {
        let t = Tensor::from_rows(rows).unwrap();
        ClassDescriptions {
            name: "c".into(),
            texts: vec!["x".into(); rows.len()],
            plain: t.clone(),
            extended: t,
        }
    }

    #[test]
    fn pool_concatenates_with_owners() {
        let set = DescriptionSet {
            classes: vec![
                class(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]),
                class(&[[0.8, 0.6], [-1.0, 0.0], [0.0, -1.0]]),
            ],
        };
        let pool = build_pool(&set).unwrap();
        assert_eq!(pool.plain.shape(), &[6, 2]);
        assert_eq!(pool.owner, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(pool.plain.row(3), set.classes[1].plain.row(0));
    }

    #[test]
    fn pool_rejects_empty_class() {
        let empty = ClassDescriptions {
            name: "e".into(),
            texts: vec![],
            plain: Tensor::zeros(&[0, 2]),
            extended: Tensor::zeros(&[0, 2]),
        };
        let set = DescriptionSet {
            classes: vec![class(&[[1.0, 0.0]]), empty],
        };
        assert!(matches!(build_pool(&set), Err(Error::EmptyClass(1))));
    }

    /// Best 2-partition by exhaustive enumeration.
    fn best_two_partition(points: &Tensor) -> (Vec<usize>, f64) {
        let n = points.rows();
        let mut best = (Vec::new(), f64::INFINITY);
        for mask in 1u32..(1 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut cost = 0.0;
            for c in 0..2 {
                let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
                let mean = points.select_rows(&idx).unwrap().mean_rows().unwrap();
                cost += idx.iter().map(|&i| sq_dist(points.row(i), mean.data())).sum::<f64>();
            }
            if cost < best.1 {
                best = (labels, cost);
            }
        }
        best
    }

    #[test]
    fn two_blobs_match_exhaustive_partition() {
        let pts = Tensor::from_rows(&[[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]]).unwrap();
        let (oracle, cost) = best_two_partition(&pts);
        let cs = kmeans(&pts, 2, 11, DEFAULT_MAX_ITER).unwrap();
        let same = |a: &[usize], i: usize, j: usize| a[i] == a[j];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(same(&cs.assignment, i, j), same(&oracle, i, j));
            }
        }
        assert!(same(&cs.assignment, 0, 1) && same(&cs.assignment, 2, 3));
        assert!(!same(&cs.assignment, 0, 2));
        assert!((cs.inertia - cost).abs() < 1e-12);
    }

    #[test]
    fn k_equal_to_points_gives_singletons() {
        let pts = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0], [0.6, 0.8], [0.8, 0.6], [-1.0, 0.0]]).unwrap();
        let cs = kmeans(&pts, 5, 2, DEFAULT_MAX_ITER).unwrap();
        let mut sorted = cs.assignment.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert_eq!(cs.inertia, 0.0);
    }

    #[test]
    fn duplicates_share_a_cluster() {
        let pts = Tensor::from_rows(&[
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [0.1, 0.99],
            [-1.0, 0.0],
            [1.0, 0.0],
        ])
        .unwrap();
        for seed in 0..10 {
            let cs = kmeans(&pts, 3, seed, DEFAULT_MAX_ITER).unwrap();
            assert_eq!(cs.assignment[0], cs.assignment[1]);
            assert_eq!(cs.assignment[0], cs.assignment[5]);
        }
    }

    #[test]
    fn k_larger_than_points_is_rejected() {
        let pts = Tensor::zeros(&[2, 2]);
        assert!(matches!(kmeans(&pts, 3, 0, 10), Err(Error::Argument(_))));
    }

    #[test]
    fn empty_clusters_are_repaired() {
        // All points identical except one; with k = 3 some centre starts empty.
        let pts = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let cs = kmeans(&pts, 3, 5, DEFAULT_MAX_ITER).unwrap();
        for c in 0..3 {
            assert!(!cs.members(c).is_empty());
        }
    }

    #[test]
    #[allow(clippy::approx_constant)] // expected value is a rounded literal
    fn cluster_score_cases() {
        let e1 = Tensor::row_vector(&[1.0, 0.0]);
        assert_eq!(score_cluster(&e1, &e1).unwrap(), 1.0);
        let sup = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = score_cluster(&sup, &Tensor::row_vector(&[h, h])).unwrap();
        assert!((s - 0.70711).abs() < 1e-5);
        let s = score_cluster(&e1, &Tensor::row_vector(&[0.0, 1.0])).unwrap();
        assert_eq!(s, 0.0);
        assert!(matches!(
            score_cluster(&e1, &Tensor::zeros(&[0, 2])),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn top_m_cases() {
        assert_eq!(select_top_m(&[0.9, 0.5, 0.7], 2).unwrap(), vec![0, 2]);
        assert_eq!(select_top_m(&[0.3, 0.3, 0.3], 2).unwrap(), vec![0, 1]);
        assert_eq!(select_top_m(&[0.1, 0.4, 0.2], 3).unwrap(), vec![1, 2, 0]);
        assert!(matches!(select_top_m(&[0.1], 2), Err(Error::Argument(_))));
    }

    #[test]
    fn confusion_ranking() {
        assert_eq!(rank_confusions(&[0.9, 0.2, 0.8], 0, 5), vec![2, 1]);
        let six = [0.1, 0.5, 0.4, 0.3, 0.2, 0.6];
        let r = rank_confusions(&six, 0, 5);
        assert_eq!(r, vec![5, 1, 2, 3, 4]);
    }

    proptest! {
        #[test]
        fn top_m_matches_full_sort(scores in proptest::collection::vec(-1.0f64..1.0, 1..20), m in 0usize..20) {
            let m = m.min(scores.len());
            let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
            // Brute force: repeatedly take the maximum, lowest id on ties.
            let mut expect = Vec::new();
            for _ in 0..m {
                let mut best = 0;
                for i in 1..pairs.len() {
                    if pairs[i].0 > pairs[best].0 || (pairs[i].0 == pairs[best].0 && pairs[i].1 < pairs[best].1) {
                        best = i;
                    }
                }
                expect.push(pairs.remove(best).1);
            }
            prop_assert_eq!(select_top_m(&scores, m).unwrap(), expect);
        }

        #[test]
        fn inertia_never_rises(seed in 0u64..1000, n in 4usize..30, k in 1usize..6) {
            let k = k.min(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
            let pts = Tensor::from_rows(&rows).unwrap();
            let cs = kmeans(&pts, k, seed, DEFAULT_MAX_ITER).unwrap();
            for w in cs.inertia_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            prop_assert!(cs.inertia <= *cs.inertia_trace.last().unwrap() + 1e-12);
            prop_assert!(cs.inertia >= 0.0);
        }
    }
}
