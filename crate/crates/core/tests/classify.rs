use gaitflow::classify::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Unit-norm draws around `classes` random centers.
fn blobs(rng: &mut ChaCha8Rng, centers: &[Vec<f32>], per_class: &[usize], noise: f32) -> (Vec<Vec<f32>>, Vec<u32>) {
    let nd = Normal::new(0.0f32, noise).unwrap();
    let mut x = vec![];
    let mut y = vec![];
    for (c, (center, &n)) in centers.iter().zip(per_class).enumerate() {
        for _ in 0..n {
            x.push(unit(center.iter().map(|&v| v + nd.sample(rng)).collect()));
            y.push(c as u32);
        }
    }
    (x, y)
}

fn random_centers(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..k).map(|_| unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect()
}

#[test]
fn five_blobs_generalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let centers = random_centers(&mut rng, 5, 32);
    let (x, y) = blobs(&mut rng, &centers, &[40; 5], 0.03);
    let ens = train_ovr_svm(&x, &y, &SvmParams::default()).unwrap();
    let (tx, ty) = blobs(&mut rng, &centers, &[200; 5], 0.03);
    let hits = tx
        .iter()
        .zip(&ty)
        .filter(|(s, &t)| svm_rank(&ens, s).unwrap().top() == Some(t))
        .count();
    assert!(hits as f64 / tx.len() as f64 >= 0.99, "{hits}/{}", tx.len());
}

#[test]
fn imbalanced_gender_blobs_keep_both_recalls() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let centers = random_centers(&mut rng, 2, 16);
    let (x, y) = blobs(&mut rng, &centers, &[63, 37], 0.05);
    let ens = train_gender_svm(&x, &y, &SvmParams::default()).unwrap();
    let (tx, ty) = blobs(&mut rng, &centers, &[630, 370], 0.05);
    for class in 0..2u32 {
        let idx: Vec<usize> = (0..ty.len()).filter(|&i| ty[i] == class).collect();
        let ok = idx.iter().filter(|&&i| svm_rank(&ens, &tx[i]).unwrap().top() == Some(class)).count();
        assert!(ok as f64 / idx.len() as f64 >= 0.95, "class {class}: {ok}/{}", idx.len());
    }
}

#[test]
fn gender_svm_needs_both_classes() {
    let x = vec![unit(vec![1.0, 0.0]); 4];
    assert!(train_gender_svm(&x, &[0, 0, 0, 0], &SvmParams::default()).is_err());
}

#[test]
fn svm_rank_equals_sorting_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let (c, d) = (rng.gen_range(2..8), rng.gen_range(1..6));
        let ens = SvmEnsemble {
            dim: d,
            weights: (0..c).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            biases: (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            lambda: 1e-4,
        };
        let sig: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scores: Vec<f64> = (0..c)
            .map(|k| {
                ens.weights[k].iter().zip(&sig).map(|(&w, &x)| w as f64 * x as f64).sum::<f64>() + ens.biases[k] as f64
            })
            .collect();
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let got: Vec<u32> = svm_rank(&ens, &sig).unwrap().entries.iter().map(|e| e.0).collect();
        assert_eq!(got, order.iter().map(|&k| k as u32).collect::<Vec<_>>());
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| a[i][i]).collect();
    let vecs = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
    (vals, vecs)
}

#[test]
fn pca_matches_jacobi_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, dim, k) = (50, 2048, 8);
    let sigs: Vec<Vec<f32>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect();
    let m = fit_pca(&sigs, k).unwrap();

    // oracle: normalize, center, eigen-decompose the Gram matrix, lift
    let xs: Vec<Vec<f64>> = sigs
        .iter()
        .map(|s| {
            let nrm = s.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            s.iter().map(|&v| v as f64 / nrm).collect()
        })
        .collect();
    let mean: Vec<f64> = (0..dim).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
    let xc: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().zip(&mean).map(|(a, b)| a - b).collect()).collect();
    let gram: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| xc[i].iter().zip(&xc[j]).map(|(a, b)| a * b).sum()).collect())
        .collect();
    let (vals, vecs) = jacobi_eigen(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
    for (c, &e) in order.iter().take(k).enumerate() {
        let mut b: Vec<f64> = (0..dim).map(|j| (0..n).map(|i| xc[i][j] * vecs[e][i]).sum()).collect();
        let nrm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        b.iter_mut().for_each(|v| *v /= nrm);
        let dot: f64 = b.iter().zip(&m.basis[c]).map(|(x, y)| x * y).sum();
        let sign = dot.signum();
        let err = b.iter().zip(&m.basis[c]).map(|(x, y)| (sign * x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "component {c}: {err}");
        for s in &sigs {
            let z = pca_project(&m, s).unwrap()[c];
            let x: Vec<f64> = {
                let nrm = s.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
                s.iter().map(|&v| v as f64 / nrm).collect()
            };
            let zo: f64 = x.iter().zip(&mean).zip(&b).map(|((x, mu), w)| (x - mu) * w).sum::<f64>() * sign;
            assert!((z - zo).abs() < 1e-5);
        }
    }
}

#[test]
fn pca_reconstructs_latent_subspace() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, dim, k) = (60, 64, 8);
    let axes: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let sigs: Vec<Vec<f32>> = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..dim).map(|j| (0..k).map(|a| z[a] * axes[a][j]).sum()).collect();
            let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / nrm) as f32).collect()
        })
        .collect();
    let m = fit_pca(&sigs, k).unwrap();
    for s in &sigs {
        let back = pca_backproject(&m, &pca_project(&m, s).unwrap()).unwrap();
        let nrm = s.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        let err = s.iter().zip(&back).map(|(&a, b)| (a as f64 / nrm - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }
}

fn brute_force_nn(gallery: &[Vec<f32>], labels: &[u32], q: &[f32]) -> Vec<u32> {
    let mut best: Vec<(u32, f64)> = vec![];
    for (g, &l) in gallery.iter().zip(labels) {
        let d = g.iter().zip(q).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
        match best.iter_mut().find(|e| e.0 == l) {
            Some(e) => e.1 = e.1.min(d),
            None => best.push((l, d)),
        }
    }
    best.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    best.into_iter().map(|e| e.0).collect()
}

#[test]
fn nn_rank_equals_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let d = rng.gen_range(2..10);
        let labels: Vec<u32> = (0..60).map(|i| (i % 20) as u32).collect();
        let gallery: Vec<Vec<f32>> = labels.iter().map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let g = GallerySet::new(&gallery, &labels).unwrap();
        let q: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got: Vec<u32> = nn_rank(&g, &q).unwrap().entries.iter().map(|e| e.0).collect();
        assert_eq!(got, brute_force_nn(&gallery, &labels, &q));
    }
}

fn tally_winner(preds: &[RankedPrediction]) -> u32 {
    let mut votes = std::collections::HashMap::<u32, (usize, f64)>::new();
    for p in preds {
        let e = votes.entry(p.entries[0].0).or_default();
        e.0 += 1;
        e.1 += p.entries[0].1;
    }
    let mut v: Vec<(u32, usize, f64)> = votes.into_iter().map(|(l, (n, s))| (l, n, s / n as f64)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.partial_cmp(&a.2).unwrap()).then(a.0.cmp(&b.0)));
    v[0].0
}

#[test]
fn majority_vote_matches_tally() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let preds: Vec<RankedPrediction> = (0..rng.gen_range(1..12))
            .map(|_| RankedPrediction::from_scores((0..4u32).map(|l| (l, rng.gen_range(0.0..1.0)))))
            .collect();
        assert_eq!(majority_vote(&preds).unwrap(), tally_winner(&preds));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svm_top1_ignores_positive_rescaling(seed in 0u64..10_000, scale in 0.01f32..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, d) = (rng.gen_range(2..6), rng.gen_range(1..5));
        let mut ens = SvmEnsemble {
            dim: d,
            weights: (0..c).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            biases: (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            lambda: 1e-4,
        };
        let sig: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let before = svm_rank(&ens, &sig).unwrap().top();
        ens.weights.iter_mut().flatten().for_each(|w| *w *= scale);
        ens.biases.iter_mut().for_each(|b| *b *= scale);
        prop_assert_eq!(svm_rank(&ens, &sig).unwrap().top(), before);
    }

    #[test]
    fn pca_basis_is_orthonormal_and_centers_training_set(seed in 0u64..10_000, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigs: Vec<Vec<f32>> = (0..12).map(|_| (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect();
        let m = fit_pca(&sigs, k).unwrap();
        for a in 0..k {
            for b in 0..k {
                let dot: f64 = m.basis[a].iter().zip(&m.basis[b]).map(|(x, y)| x * y).sum();
                prop_assert!((dot - (a == b) as u8 as f64).abs() < 1e-6);
            }
        }
        let proj: Vec<Vec<f64>> = sigs.iter().map(|s| pca_project(&m, s).unwrap()).collect();
        for c in 0..k {
            let mean = proj.iter().map(|p| p[c]).sum::<f64>() / proj.len() as f64;
            prop_assert!(mean.abs() < 1e-6);
        }
    }

    #[test]
    fn nn_agrees_with_brute_force(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u32> = (0..15).map(|_| rng.gen_range(0..6)).collect();
        let gallery: Vec<Vec<f32>> = labels.iter().map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let q: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got: Vec<u32> = nn_rank(&GallerySet::new(&gallery, &labels).unwrap(), &q).unwrap().entries.iter().map(|e| e.0).collect();
        prop_assert_eq!(got, brute_force_nn(&gallery, &labels, &q));
    }

    #[test]
    fn unanimous_vote_wins(label in 0u32..50, len in 1usize..20, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<RankedPrediction> = (0..len)
            .map(|_| RankedPrediction::from_scores([(label, 2.0), (label + 1, rng.gen_range(0.0..1.0))]))
            .collect();
        prop_assert_eq!(majority_vote(&preds).unwrap(), label);
    }

    #[test]
    fn ranked_scores_never_increase(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = RankedPrediction::from_scores((0..8u32).map(|l| (l, (rng.gen_range(0..4) as f64) * 0.5)));
        prop_assert!(p.entries.windows(2).all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
    }
}
