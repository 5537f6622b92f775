use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sidbias::corpus::{generate_synthetic, split_head_tail, ItemId};
use sidbias::quantize::{
    encode_residual, most_similar_tail, reconstruct, reduce_dim, synthesize_reps, train_codebooks, Codebook, ItemRep,
    KMeansConfig,
};

fn random_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[test]
fn default_codebook_size_and_dimension() {
    assert_eq!(KMeansConfig::default().centroids, 256);
    let ds = generate_synthetic(200, 60, 6, 1.2, 1).unwrap();
    let split = split_head_tail(&ds);
    let reps = synthesize_reps::<f64>(&ds, &split, 32, 3, 0.5, 0).unwrap();
    assert!(reps.iter().all(|r| r.vector.len() == 32));
}

#[test]
fn separated_clusters_recover_their_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pts = Vec::new();
    for center in [[10.0, 10.0], [-10.0, -10.0]] {
        for _ in 0..50 {
            pts.push(vec![center[0] + rng.random_range(-1.0..1.0), center[1] + rng.random_range(-1.0..1.0)]);
        }
    }
    let books = train_codebooks(
        &pts,
        &KMeansConfig {
            levels: 1,
            centroids: 2,
            iters: 20,
            seed: 0,
        },
    )
    .unwrap();
    let mean = |s: &[Vec<f64>]| -> Vec<f64> {
        (0..2).map(|k| s.iter().map(|p| p[k]).sum::<f64>() / s.len() as f64).collect()
    };
    let (a, b) = (mean(&pts[..50]), mean(&pts[50..]));
    let c = &books[0].centroids;
    let matched = if sq(&c[0], &a) < sq(&c[0], &b) { [&a, &b] } else { [&b, &a] };
    for (got, want) in c.iter().zip(matched) {
        assert!(sq(got, want).sqrt() < 1e-6);
    }
}

#[test]
fn encoding_matches_exhaustive_argmin_per_level() {
    let train = random_vectors(200, 6, 1);
    let books = train_codebooks(
        &train,
        &KMeansConfig {
            levels: 3,
            centroids: 8,
            iters: 15,
            seed: 2,
        },
    )
    .unwrap();
    for x in random_vectors(50, 6, 9) {
        let code = encode_residual(&x, &books, None);
        let mut r = x.clone();
        for (lvl, cb) in books.iter().enumerate() {
            let mut best = 0;
            for (i, c) in cb.centroids.iter().enumerate() {
                if sq(&r, c) < sq(&r, &cb.centroids[best]) {
                    best = i;
                }
            }
            assert_eq!(code.codes[lvl], best);
            for (ri, ci) in r.iter_mut().zip(&cb.centroids[best]) {
                *ri -= ci;
            }
        }
        assert!(sq(&r, &code.final_residual) < 1e-24);
        let back = reconstruct(&code.codes, &books);
        let sum: Vec<f64> = back.iter().zip(&code.final_residual).map(|(a, b)| a + b).collect();
        assert!(sq(&sum, &x) < 1e-20);
    }
    // on the training vectors the summed squared residual never grows
    let mut prev = train.iter().map(|v| sq(v, &[0.0; 6])).sum::<f64>();
    for l in 1..=3 {
        let now: f64 = train
            .iter()
            .map(|v| {
                let r = encode_residual(v, &books[..l], None).final_residual;
                sq(&r, &[0.0; 6])
            })
            .sum();
        assert!(now <= prev + 1e-9, "level {l}: {now} > {prev}");
        prev = now;
    }
}

#[test]
fn pca_variance_ratios_match_eigendecomposition() {
    let vecs = random_vectors(100, 32, 5);
    let reps: Vec<ItemRep<f64>> = vecs
        .iter()
        .enumerate()
        .map(|(i, v)| ItemRep {
            item: ItemId(i as u32),
            vector: v.clone(),
        })
        .collect();
    let (reduced, pca) = reduce_dim(&reps, 8).unwrap();
    assert!(reduced.iter().all(|r| r.vector.len() == 8));

    let n = vecs.len() as f64;
    let mean: Vec<f64> = (0..32).map(|k| vecs.iter().map(|v| v[k]).sum::<f64>() / n).collect();
    let m = nalgebra::DMatrix::from_fn(100, 32, |i, j| vecs[i][j] - mean[j]);
    let cov = (m.transpose() * &m) / (n - 1.0);
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = vals.iter().sum();
    for (k, r) in pca.explained_variance_ratio.iter().enumerate() {
        assert!((r - vals[k] / total).abs() < 1e-8, "component {k}");
    }
    assert!(reduce_dim(&reps, 33).is_err());
}

#[test]
fn low_noise_tails_stay_close_to_their_heads() {
    let ds = generate_synthetic(2000, 500, 8, 1.5, 7).unwrap();
    let split = split_head_tail(&ds);
    assert_eq!(split.head.len(), 100);
    let reps = synthesize_reps::<f64>(&ds, &split, 32, 25, 0.1, 3).unwrap();
    let heads: Vec<&ItemRep<f64>> = reps.iter().filter(|r| split.is_head(r.item)).collect();
    let tails: Vec<&ItemRep<f64>> = reps.iter().filter(|r| split.is_tail(r.item)).collect();
    // the generating head is the nearest one in Euclidean distance
    let mean_cos = tails
        .iter()
        .map(|t| {
            let anchor = heads
                .iter()
                .min_by(|a, b| sq(&a.vector, &t.vector).total_cmp(&sq(&b.vector, &t.vector)))
                .unwrap();
            cos(&anchor.vector, &t.vector)
        })
        .sum::<f64>()
        / tails.len() as f64;
    assert!(mean_cos > 0.9, "{mean_cos}");
}

#[test]
fn most_similar_tail_is_an_exhaustive_cosine_argmax() {
    let ds = generate_synthetic(300, 80, 6, 1.3, 2).unwrap();
    let split = split_head_tail(&ds);
    let reps = synthesize_reps::<f64>(&ds, &split, 8, 4, 0.5, 1).unwrap();
    let table = reps.iter().map(|r| (r.item, r.vector.clone())).collect();
    let sims = most_similar_tail(&table, &split).unwrap();
    for &h in &split.head {
        let hv = &table[&h];
        let best = split
            .tail
            .iter()
            .copied()
            .max_by(|a, b| cos(hv, &table[a]).total_cmp(&cos(hv, &table[b])).then(b.cmp(a)))
            .unwrap();
        assert_eq!(sims[&h], best);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reconstruction_plus_residual_is_identity(seed in 0u64..1000, levels in 1usize..4) {
        let vecs = random_vectors(30, 4, seed);
        let books: Vec<Codebook<f64>> = train_codebooks(&vecs, &KMeansConfig { levels, centroids: 5, iters: 5, seed }).unwrap();
        for v in &vecs {
            let code = encode_residual(v, &books, None);
            prop_assert_eq!(code.codes.len(), levels);
            let back = reconstruct(&code.codes, &books);
            for k in 0..4 {
                prop_assert!((back[k] + code.final_residual[k] - v[k]).abs() < 1e-12);
            }
        }
    }
}
