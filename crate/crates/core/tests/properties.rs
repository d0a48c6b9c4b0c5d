//! Property tests for the invariants of each module.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tkm::cpd::{CpdTensor, DenseTensor};
use tkm::dataeval::{
    any_overlap_score, class_weights, gen_synthetic, postprocess_events, sample_weights,
    segment_roc, Interval, MixtureSpec,
};
use tkm::featmap::{
    feature_kernel_matrix, grid_search_map_params, local_map, FeatureMapConfig, MappedData,
};
use tkm::oracle::{fit_dense_primal, fit_dual, predict_dense, DualKernel};
use tkm::solver::{
    assemble_g, assemble_h, assemble_q, block_objective, block_update, fit_adapt_tkrr_traced,
    fit_tkrr_traced, Regularizer,
};
use tkm::{Init, TkmModel, TrainConfig};

/// Random CP tensor whose γ is not all ones.
fn cpd(dims: &[usize], rank: usize, seed: u64) -> CpdTensor {
    let base = CpdTensor::new_random(dims, rank, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let gamma = DVector::from_fn(rank, |_, _| rng.random_range(-2.0..2.0));
    let factors = base
        .factors()
        .iter()
        .map(|f| f * rng.random_range(0.5..1.5))
        .collect();
    CpdTensor::from_parts(factors, gamma).unwrap()
}

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=6, 1..=3)
}

fn rel_close(a: f64, b: f64, scale: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (scale + 1e-30)
}

fn labels(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // both classes always present
    let mut y: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.4) { 1.0 } else { -1.0 })
        .collect();
    y[0] = 1.0;
    y[n - 1] = -1.0;
    y
}

fn problem(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-0.9..0.9));
    let y = labels(n, &mut rng);
    (x, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inner_product_matches_dense(dims in dims_strategy(), ra in 1usize..=5, rb in 1usize..=5, sa: u64, sb: u64) {
        let a = cpd(&dims, ra, sa);
        let b = cpd(&dims, rb, sb);
        let fa = a.to_full().unwrap();
        let fb = b.to_full().unwrap();
        let scale = a.frobenius_norm() * b.frobenius_norm();
        prop_assert!(rel_close(a.inner_product(&b).unwrap(), fa.dot(&fb).unwrap(), scale, 1e-10));
        prop_assert!(rel_close(a.norm_squared(), fa.norm_squared(), fa.norm_squared(), 1e-10));
    }

    #[test]
    fn normalize_preserves_tensor_and_is_idempotent(dims in dims_strategy(), r in 1usize..=5, s: u64) {
        let a = cpd(&dims, r, s);
        let n1 = a.normalize_factors();
        let n2 = n1.normalize_factors();
        let (f0, f1) = (a.to_full().unwrap(), n1.to_full().unwrap());
        let scale = f0.norm_squared().sqrt();
        for (u, v) in f0.values().iter().zip(f1.values()) {
            prop_assert!(rel_close(*u, *v, scale, 1e-12));
        }
        for f in n1.factors() {
            for c in f.column_iter() {
                prop_assert!((c.norm() - 1.0).abs() <= 1e-12);
            }
        }
        for (p, q) in n1.gamma().iter().zip(n2.gamma().iter()) {
            prop_assert!(rel_close(*p, *q, p.abs(), 1e-14));
        }
    }

    #[test]
    fn evaluate_is_linear(dims in dims_strategy(), r in 1usize..=4, s1: u64, s2: u64, fs: u64) {
        let a = cpd(&dims, r, s1);
        let b = cpd(&dims, r, s2);
        let mut rng = ChaCha8Rng::seed_from_u64(fs);
        let feats: Vec<DVector<f64>> = dims.iter().map(|&m| DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0))).collect();
        // linear in γ
        let with = |g: DVector<f64>| CpdTensor::from_parts(a.factors().to_vec(), g).unwrap().evaluate(&feats).unwrap();
        let lhs = with(a.gamma() + b.gamma());
        let rhs = with(a.gamma().clone()) + with(b.gamma().clone());
        prop_assert!(rel_close(lhs, rhs, 1.0 + lhs.abs(), 1e-12));
        // linear in one factor matrix
        let d = dims.len() - 1;
        let swap = |f: DMatrix<f64>| {
            let mut fs = a.factors().to_vec();
            fs[d] = f;
            CpdTensor::from_parts(fs, a.gamma().clone()).unwrap().evaluate(&feats).unwrap()
        };
        let other = DMatrix::from_fn(dims[d], r, |_, _| rng.random_range(-1.0..1.0));
        let lhs = swap(a.factor(d) + &other);
        let rhs = swap(a.factor(d).clone()) + swap(other);
        prop_assert!(rel_close(lhs, rhs, 1.0 + lhs.abs(), 1e-12));
        // and agrees with the dense contraction
        let dense = DenseTensor::outer(&feats).unwrap().dot(&a.to_full().unwrap()).unwrap();
        prop_assert!(rel_close(a.evaluate(&feats).unwrap(), dense, 1.0 + dense.abs(), 1e-10));
    }

    #[test]
    fn parameter_count_formula(dims in dims_strategy(), r in 1usize..=8) {
        let a = CpdTensor::new_random(&dims, r, 0).unwrap();
        prop_assert_eq!(a.parameter_count(), dims.iter().sum::<usize>() * r + r);
    }

    #[test]
    fn local_map_vanishes_at_the_boundary(m in 1usize..=30, u in 0.2f64..5.0, sigma in 0.05f64..2.0) {
        let cfg = FeatureMapConfig::new(m, u, sigma, 1).unwrap();
        let scale = local_map(0.0, &cfg).unwrap().amax().max(cfg.basis_weights()[0]);
        for x in [-u, u] {
            let phi = local_map(x, &cfg).unwrap();
            prop_assert!(phi.amax() <= 1e-12 * (scale + 1.0), "{:?}", phi);
        }
    }

    #[test]
    fn feature_kernel_is_gram_of_dense_features(n in 1usize..=8, d in 1usize..=3, m in 1usize..=5, s: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-0.9..0.9));
        let cfg = FeatureMapConfig::new(m, 1.0, 0.4, d).unwrap();
        let k = feature_kernel_matrix(&x, &cfg).unwrap();
        let mapped = MappedData::new(&x, &cfg).unwrap();
        let feats: Vec<DenseTensor> = (0..n).map(|i| DenseTensor::outer(&mapped.sample(i)).unwrap()).collect();
        for i in 0..n {
            for j in 0..n {
                let g = feats[i].dot(&feats[j]).unwrap();
                prop_assert!((k[(i, j)] - g).abs() <= 1e-12 * (1.0 + g.abs()));
            }
        }
    }

    #[test]
    fn kernel_error_non_increasing_in_m(n in 3usize..=20, sigma in 0.15f64..0.5, s: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-0.5..0.5));
        let u = x.amax() + 3.0 * sigma + 0.05;
        let ms: Vec<usize> = (2..=24).step_by(2).collect();
        let rep = grid_search_map_params(&x, sigma, &ms, &[u]).unwrap();
        let col = rep.column(u).unwrap();
        for w in col.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", col);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tkrr_objective_descends(s: u64, n in 6usize..40, d in 2usize..=3, m in 2usize..=6, r in 1usize..=4, lambda in 1e-5f64..1e-1) {
        let (x, y) = problem(n, d, s);
        let fm = FeatureMapConfig::new(m, 1.2, 0.4, d).unwrap();
        let cfg = TrainConfig { rank: r, lambda, n_max: 3 * d, init: Init::Random { seed: s }, ..TrainConfig::default() };
        let f = fit_tkrr_traced(&x, &y, &cfg, &fm).unwrap();
        let obj = f.objectives();
        for w in obj.windows(2) {
            prop_assert!(w[1] - w[0] <= 1e-9, "{:?}", obj);
        }
    }

    #[test]
    fn adapt_objective_descends(s: u64, n in 6usize..30, m in 2usize..=6, r in 1usize..=4, p in 1usize..=4, mu in 1e-5f64..1.0, from_source: bool) {
        let (x, y) = problem(n, 2, s);
        let fm = FeatureMapConfig::new(m, 1.2, 0.4, 2).unwrap();
        let mut source = TkmModel::zero(fm, p).unwrap();
        source.weights = cpd(&[m, m], p, s.wrapping_add(1));
        let init = if from_source { Init::Source } else { Init::Random { seed: s } };
        let rank = if from_source { p } else { r };
        let cfg = TrainConfig { rank, n_max: 6, init, ..TrainConfig::default() };
        let f = fit_adapt_tkrr_traced(&x, &y, &source, mu, &cfg, &fm).unwrap();
        let obj = f.objectives();
        for w in obj.windows(2) {
            prop_assert!(w[1] - w[0] <= 1e-9 * (1.0 + w[0].abs()), "{:?}", obj);
        }
    }

    #[test]
    fn normalization_is_neutral(s: u64, n in 6usize..30, m in 2usize..=5, r in 1usize..=3, lambda in 1e-4f64..1e-1) {
        // the same update sequence with and without renormalizing in between
        let (x, y) = problem(n, 2, s);
        let fm = FeatureMapConfig::new(m, 1.2, 0.4, 2).unwrap();
        let mapped = MappedData::new(&x, &fm).unwrap();
        let c = sample_weights(&y, true).unwrap();
        let start = CpdTensor::new_random(&[m, m], r, s).unwrap();
        let run = |normalize: bool| -> Vec<f64> {
            let mut w = start.clone();
            let mut out = Vec::new();
            for k in 0..6 {
                let d = k % 2;
                let g = assemble_g(d, &mapped, &w);
                let h = assemble_h(d, &w);
                let sol = block_update(&g, &y, &c, Regularizer::Ridge { lambda, h: &h }).unwrap();
                let mut fs = w.factors().to_vec();
                fs[d] = sol.factor;
                w = CpdTensor::from_parts(fs, DVector::from_element(r, 1.0)).unwrap();
                if normalize {
                    w = w.normalize_factors();
                }
                let g = assemble_g(d, &mapped, &w);
                let scores = g * DVector::from_column_slice(w.scaled_factor(d).as_slice());
                let loss: f64 = scores.iter().zip(&y).zip(&c).map(|((f, t), cc)| cc * (f - t) * (f - t)).sum::<f64>() / n as f64;
                out.push(loss + lambda * w.norm_squared());
            }
            out
        };
        let (a, b) = (run(true), run(false));
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-9, "{:?} vs {:?}", a, b);
        }
    }

    #[test]
    fn block_solution_is_stationary(s: u64, n in 6usize..30, m in 2usize..=5, r in 1usize..=3, rho in 1e-4f64..1.0, transfer: bool) {
        let (x, y) = problem(n, 2, s);
        let fm = FeatureMapConfig::new(m, 1.2, 0.4, 2).unwrap();
        let mapped = MappedData::new(&x, &fm).unwrap();
        let c = sample_weights(&y, true).unwrap();
        let w = CpdTensor::new_random(&[m, m], r, s).unwrap();
        let src = cpd(&[m, m], 2, s.wrapping_add(7));
        let g = assemble_g(0, &mapped, &w);
        let h = assemble_h(0, &w);
        let q = assemble_q(0, &w, &src).unwrap();
        let reg = if transfer {
            Regularizer::Transfer { mu: rho, h: &h, q: &q }
        } else {
            Regularizer::Ridge { lambda: rho, h: &h }
        };
        let grad = |f: &DMatrix<f64>| -> Vec<f64> {
            let eps = 1e-6;
            (0..f.len()).map(|k| {
                let (mut p, mut mm) = (f.clone(), f.clone());
                p[k] += eps;
                mm[k] -= eps;
                (block_objective(&g, &y, &c, reg, &p).unwrap() - block_objective(&g, &y, &c, reg, &mm).unwrap()) / (2.0 * eps)
            }).collect()
        };
        let g0 = grad(&w.scaled_factor(0)).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let sol = block_update(&g, &y, &c, reg).unwrap();
        let g1 = grad(&sol.factor).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        prop_assert!(g1 <= 1e-6 * g0.max(1e-300) || g1 <= 1e-9, "{} vs {}", g1, g0);
    }

    #[test]
    fn primal_dual_equivalence(s: u64, n in 2usize..60, d in 1usize..=3, m in 2usize..=6, lambda in 1e-4f64..1e-1) {
        let (x, y) = problem(n, d, s);
        let fm = FeatureMapConfig::new(m, 1.2, 0.4, d).unwrap();
        let c = sample_weights(&y, true).unwrap();
        let (w, _) = fit_dense_primal(&x, &y, &c, lambda, &fm).unwrap();
        let dual = fit_dual(&x, &y, &c, lambda, DualKernel::FeatureMap(fm)).unwrap();
        let p = predict_dense(&w, &x, &fm).unwrap();
        let q = dual.predict(&x).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-8, "{} vs {}", a, b);
        }
    }

    #[test]
    fn class_weight_identity(y in prop::collection::vec(prop::bool::ANY, 2..300)) {
        prop_assume!(y.iter().any(|&b| b) && y.iter().any(|&b| !b));
        let y: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        let (cp, cn) = class_weights(&y).unwrap();
        let np = y.iter().filter(|&&v| v > 0.0).count() as f64;
        let nn = y.len() as f64 - np;
        prop_assert_eq!(cp * np + cn * nn, y.len() as f64);
    }

    #[test]
    fn events_ignore_trailing_negatives(bits in prop::collection::vec(prop::bool::ANY, 10..120), extra in 0usize..30, k in 1usize..=10, n in 1usize..=10) {
        prop_assume!(k <= n && bits.len() >= n);
        let labels: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        let ev = postprocess_events(&labels, k, n).unwrap();
        let mut longer = labels.clone();
        longer.extend(std::iter::repeat_n(-1.0, extra));
        prop_assert_eq!(&ev, &postprocess_events(&longer, k, n).unwrap());
        prop_assert!(ev.len() <= labels.len());
        for e in &ev {
            prop_assert!(e.start < e.end && e.end <= labels.len());
        }
        for w in ev.windows(2) {
            prop_assert!(w[0].end <= w[1].start);
        }
    }

    #[test]
    fn overlap_score_swaps_roles(a in prop::collection::vec((0u32..100, 1u32..20), 0..8), b in prop::collection::vec((0u32..100, 1u32..20), 0..8)) {
        let disjoint = |raw: &[(u32, u32)]| -> Vec<Interval> {
            let mut out: Vec<Interval> = Vec::new();
            let mut t = 0.0;
            for &(gap, len) in raw {
                let start = t + gap as f64;
                out.push(Interval::new(start, start + len as f64));
                t = start + len as f64 + 0.5;
            }
            out
        };
        let (p, q) = (disjoint(&a), disjoint(&b));
        let pq = any_overlap_score(&p, &q, 86_400.0).unwrap();
        let qp = any_overlap_score(&q, &p, 86_400.0).unwrap();
        prop_assert_eq!(pq.sensitivity, qp.precision);
        prop_assert_eq!(pq.precision, qp.sensitivity);
        prop_assert_eq!(pq.f1, qp.f1);
    }

    #[test]
    fn auroc_is_the_rank_statistic(scores in prop::collection::vec(-3i32..3, 2..60), s: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let y = labels(scores.len(), &mut rng);
        let sc: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let roc = segment_roc(&sc, &y).unwrap();
        let (mut num, mut pairs) = (0.0, 0.0);
        for i in 0..sc.len() {
            for j in 0..sc.len() {
                if y[i] > 0.0 && y[j] < 0.0 {
                    pairs += 1.0;
                    num += if sc[i] > sc[j] { 1.0 } else if sc[i] == sc[j] { 0.5 } else { 0.0 };
                }
            }
        }
        prop_assert!((roc.auroc - num / pairs).abs() <= 1e-12);
    }

    #[test]
    fn generator_is_reproducible(seed: u64, n_pos in 0usize..40, n_neg in 0usize..40) {
        let mut spec = MixtureSpec::source(seed);
        spec.n_pos = n_pos;
        spec.n_neg = n_neg;
        let render = |ds: &tkm::LabeledDataset| {
            let mut buf = Vec::new();
            tkm::io::write_dataset(&mut buf, ds).unwrap();
            buf
        };
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        prop_assert_eq!(render(&a), render(&b));
        for i in a.negative_indices() {
            prop_assert!(!spec.excludes([a.x[(i, 0)], a.x[(i, 1)]]));
        }
        prop_assert!(a.x.iter().all(|v| v.abs() < 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn larger_mu_stays_closer_to_source(s: u64) {
        let (x, y) = problem(20, 2, s);
        let fm = FeatureMapConfig::new(6, 1.2, 0.4, 2).unwrap();
        let mut source = TkmModel::zero(fm, 3).unwrap();
        source.weights = cpd(&[6, 6], 3, s.wrapping_add(3));
        let cfg = TrainConfig { rank: 3, n_max: 20, init: Init::Source, ..TrainConfig::default() };
        let mut last = f64::INFINITY;
        for mu in [1e-6, 1e-4, 1e-2, 1.0, 1e6] {
            let f = fit_adapt_tkrr_traced(&x, &y, &source, mu, &cfg, &fm).unwrap();
            let dist = f.model.weights.distance_squared(&source.weights).unwrap().max(0.0).sqrt();
            prop_assert!(dist <= last * (1.0 + 1e-6) + 1e-9, "mu {}: {} after {}", mu, dist, last);
            last = dist;
        }
    }
}
