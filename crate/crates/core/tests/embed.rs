use nalgebra::{DMatrix, DVector};
use nmrl::embed::*;
use nmrl::env::tv_distance;
use nmrl::presets::Preset;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `p[x][y]` with strictly positive marginals.
const JOINT: [[f64; 3]; 3] = [[0.20, 0.05, 0.05], [0.02, 0.25, 0.03], [0.10, 0.10, 0.20]];

fn marginal_x() -> Vec<f64> {
    JOINT.iter().map(|r| r.iter().sum()).collect()
}

fn conditional(x: usize) -> Vec<f64> {
    let px: f64 = JOINT[x].iter().sum();
    JOINT[x].iter().map(|p| p / px).collect()
}

#[test]
fn population_operator_reproduces_conditional_table() {
    let px = marginal_x();
    let cxx = DMatrix::from_diagonal(&DVector::from_vec(px.clone()));
    let cyx = DMatrix::from_fn(3, 3, |y, x| JOINT[x][y]);
    let op = conditional_operator(&cyx, &cxx, 1e-10, 0).unwrap();
    for x in 0..3 {
        for (y, want) in conditional(x).iter().enumerate() {
            assert!((op.matrix[(y, x)] - want).abs() <= 1e-6);
        }
    }
    // centered form: μ_Y + U(e_x − μ_X)
    let py: Vec<f64> = (0..3).map(|y| (0..3).map(|x| JOINT[x][y]).sum()).collect();
    let mu_x = DVector::from_vec(px.clone());
    let mu_y = DVector::from_vec(py);
    let ccxx = &cxx - &mu_x * mu_x.transpose();
    let ccyx = &cyx - &mu_y * mu_x.transpose();
    let emb = ConditionalEmbedding {
        op: conditional_operator(&ccyx, &ccxx, 1e-10, 0).unwrap(),
        mu_x,
        mu_y,
    };
    for x in 0..3 {
        let got = emb.conditional_mean(&FeatureMap::one_hot(3).features(x));
        for (y, want) in conditional(x).iter().enumerate() {
            assert!((got[y] - want).abs() <= 1e-6);
        }
    }
}

#[test]
fn singular_covariance_needs_ridge() {
    let cxx = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
    let err = conditional_operator(&cxx, &cxx, 0.0, 4).unwrap_err();
    assert!(err.to_string().contains("larger ridge"), "{err}");
}

fn sampled_pairs(m: usize, seed: u64) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let flat: Vec<f64> = JOINT.iter().flatten().cloned().collect();
    let pairs = sample_joint(&flat, 3, m, &mut ChaCha8Rng::seed_from_u64(seed));
    let f = FeatureMap::one_hot(3);
    pairs.iter().map(|&(x, y)| (f.features(x), f.features(y))).unzip()
}

#[test]
fn sample_covariance_is_close_to_the_analytic_one() {
    let (xs, ys) = sampled_pairs(10_000, 1);
    let cc = fit_cross_covariance(&xs, &ys).unwrap();
    let px = marginal_x();
    let py: Vec<f64> = (0..3).map(|y| (0..3).map(|x| JOINT[x][y]).sum()).collect();
    let tol = 5.0 / 100.0;
    for i in 0..3 {
        for j in 0..3 {
            let cxx = if i == j { px[i] } else { 0.0 } - px[i] * px[j];
            assert!((cc.cxx[(i, j)] - cxx).abs() <= tol);
            let cyx = JOINT[j][i] - py[i] * px[j];
            assert!((cc.cyx[(i, j)] - cyx).abs() <= tol);
        }
    }
    assert_eq!(cc.cxx, cc.cxx.transpose());
}

#[test]
fn sampled_conditional_embedding_is_close_in_tv() {
    let (xs, ys) = sampled_pairs(10_000, 2);
    let emb = ConditionalEmbedding::fit(&xs, &ys, Some(1e-3)).unwrap();
    for x in 0..3 {
        let got = project_simplex(emb.conditional_mean(&FeatureMap::one_hot(3).features(x)).as_slice());
        assert!(tv_distance(&got, &conditional(x)) <= 0.05);
    }
}

#[test]
fn independent_variables_give_a_small_operator() {
    let f = FeatureMap::one_hot(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = sample_joint(&[0.3, 0.3, 0.4], 1, 10_000, &mut rng);
    let b = sample_joint(&[0.5, 0.2, 0.3], 1, 10_000, &mut rng);
    let xs: Vec<_> = a.iter().map(|p| f.features(p.0)).collect();
    let ys: Vec<_> = b.iter().map(|p| f.features(p.0)).collect();
    let emb = ConditionalEmbedding::fit(&xs, &ys, Some(1e-3)).unwrap();
    assert!(emb.op.matrix.amax() < 0.1, "{}", emb.op.matrix);
}

#[test]
fn state_read_off_the_observation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let map = [2usize, 0, 1, 1];
    let draws = sample_joint(&[0.25; 4], 1, 10_001, &mut rng);
    let os: Vec<usize> = draws.iter().map(|d| d.0).collect();
    let triples: Vec<_> = (0..10_000).map(|n| (map[os[n]], os[n + 1], map[os[n + 1]])).collect();
    let ops = fit_filter_operators(&triples, &FeatureMap::one_hot(3), &FeatureMap::one_hot(4), Some(1e-6)).unwrap();
    assert!(ops.t1.amax() <= 1e-3, "{}", ops.t1);
    for (o, &s) in map.iter().enumerate() {
        for i in 0..3 {
            let want = if i == s { 1.0 } else { 0.0 };
            assert!((ops.t2[(i, o)] - want).abs() <= 1e-3, "{}", ops.t2);
        }
    }
}

#[test]
fn frozen_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let draws = sample_joint(&[0.1, 0.15, 0.25, 0.125, 0.125, 0.25], 2, 10_000, &mut rng);
    let triples: Vec<_> = draws.iter().map(|&(s, o)| (s, o, s)).collect();
    let ops = fit_filter_operators(&triples, &FeatureMap::one_hot(3), &FeatureMap::one_hot(2), Some(1e-6)).unwrap();
    assert!(ops.t2.amax() <= 1e-3, "{}", ops.t2);
    assert!((&ops.t1 - DMatrix::<f64>::identity(3, 3)).amax() <= 1e-3, "{}", ops.t1);
}

fn benchmark_tv(m: usize, seed: u64) -> FilterEvaluation {
    let env = Preset::load("cme-sticky3").unwrap().model.env;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xs, os) = sample_uncontrolled(&env, m, &mut rng).unwrap();
    let f = FeatureMap::one_hot(3);
    let ops = fit_filter_operators(&training_triples(&xs, &os), &f, &f, None).unwrap();
    let (_, test) = sample_uncontrolled(&env, 1_200, &mut rng).unwrap();
    evaluate_filter(&ops, &env, &test, 200).unwrap()
}

#[test]
fn learned_filter_tracks_the_exact_belief() {
    let ev = benchmark_tv(10_000, 8);
    assert_eq!(ev.rows.len(), 1_000);
    assert!(ev.mean_tv <= 0.05, "{}", ev.mean_tv);
    assert!(ev.agreement >= 0.9, "{}", ev.agreement);
}

#[test]
fn operators_serialize() {
    let f = FeatureMap::one_hot(2);
    let ops = fit_filter_operators(&[(0, 1, 1), (1, 0, 0), (1, 1, 1)], &f, &f, Some(0.1)).unwrap();
    let v = ops.to_json();
    assert_eq!(v["state_map"]["kind"], "one_hot");
    assert_eq!(v["T1"].as_array().unwrap().len(), 2);
}

proptest! {
    #[test]
    fn projection_yields_a_distribution(v in proptest::collection::vec(-2.0f64..2.0, 1..8)) {
        let p = project_simplex(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        let again = project_simplex(&p);
        prop_assert!(again.iter().zip(&p).all(|(a, b)| (a - b).abs() <= 1e-15));
    }
}
