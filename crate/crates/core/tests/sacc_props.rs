use ndarray::{Array2, Array3, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatial_frontend::beamform::{design_beamset, ArrayGeometry, NoiseModel};
use spatial_frontend::sacc::*;

mod common;
use common::*;

#[test]
fn gradients_match_finite_differences_over_twenty_seeds() {
    for seed in 0..20 {
        let e = finite_difference_error(seed);
        assert!(e <= 1e-4, "seed {seed}: relative error {e:.3e}");
    }
}

#[test]
fn softmax_shift_invariance_zeroes_bias_gradients() {
    // adding a constant to every value (or to every key projection along a
    // query) shifts a softmax input uniformly, so these gradients vanish
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = random_tensor((6, 4, 5), &mut rng);
    let p = random_params(5, 3, &mut rng);
    let g = Array2::from_shape_simple_fn((6, 5), || rng.gen_range(-1.0..1.0));
    let grad = sacc_backward(&sacc_forward(&x, &p).unwrap(), &x, &p, &g).unwrap();
    assert!(grad.bv.abs() < 1e-12);
    assert!(grad.bk.iter().all(|v| v.abs() < 1e-12));
    assert!(grad.bq.iter().any(|v| v.abs() > 1e-6));
}

#[test]
fn hand_computed_two_frame_example() {
    let x = Array3::from_shape_vec(
        (2, 2, 3),
        vec![0.5, -1.0, 0.25, 1.5, 0.0, -0.5, -0.2, 0.3, 0.8, 0.1, -0.7, 0.4],
    )
    .unwrap();
    let mut p = SaccParams::zeros(3, 2);
    p.wq = ndarray::arr2(&[[0.1, -0.2], [0.3, 0.05], [-0.4, 0.2]]);
    p.bq = ndarray::arr1(&[0.01, -0.02]);
    p.wk = ndarray::arr2(&[[-0.3, 0.1], [0.2, 0.2], [0.1, -0.1]]);
    p.bk = ndarray::arr1(&[0.03, 0.0]);
    p.wv = ndarray::arr1(&[0.6, -0.4, 0.9]);
    p.bv = 0.05;
    let out = sacc_forward(&x, &p).unwrap();

    // scalar evaluation, one loop per formula
    for t in 0..2 {
        let mut q = [[0.0f64; 2]; 2];
        let mut k = [[0.0f64; 2]; 2];
        let mut v = [0.0f64; 2];
        for m in 0..2 {
            for d in 0..2 {
                q[m][d] = p.bq[d];
                k[m][d] = p.bk[d];
                for f in 0..3 {
                    q[m][d] += x[[t, m, f]] * p.wq[[f, d]];
                    k[m][d] += x[[t, m, f]] * p.wk[[f, d]];
                }
            }
            v[m] = p.bv;
            for f in 0..3 {
                v[m] += x[[t, m, f]] * p.wv[f];
            }
        }
        let mut z = [0.0f64; 2];
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt())
                .collect();
            let e0 = s[0].exp();
            let e1 = s[1].exp();
            let a = [e0 / (e0 + e1), e1 / (e0 + e1)];
            assert!((out.a[[t, i, 0]] - a[0]).abs() < 1e-12);
            z[i] = a[0] * v[0] + a[1] * v[1];
        }
        let w0 = z[0].exp() / (z[0].exp() + z[1].exp());
        let w = [w0, 1.0 - w0];
        for m in 0..2 {
            assert!((out.w[[t, m]] - w[m]).abs() < 1e-12);
        }
        for f in 0..3 {
            let y = w[0] * x[[t, 0, f]] + w[1] * x[[t, 1, f]];
            assert!((out.y[[t, f]] - y).abs() < 1e-12);
        }
    }
}

fn normalization_holds(x: &Array3<f64>, p: &SaccParams) {
    let out = sacc_forward(x, p).unwrap();
    for row in out.w.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0 || row.len() == 1));
    }
    for a in out.a.outer_iter() {
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| *v > 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn weights_are_normalized(seed in any::<u64>(), t in 1usize..6, m in 1usize..7, f in 1usize..9, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor((t, m, f), &mut rng);
        normalization_holds(&x, &random_params(f, k, &mut rng));
    }

    #[test]
    fn identical_channels_are_weighted_uniformly(seed in any::<u64>(), m in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plane = random_tensor((5, 1, 7), &mut rng);
        let x = Array3::from_shape_fn((5, m, 7), |(t, _, f)| plane[[t, 0, f]]);
        let out = sacc_forward(&x, &random_params(7, 4, &mut rng)).unwrap();
        for w in out.w.iter() {
            prop_assert!((w - 1.0 / m as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn permuting_channels_permutes_weights(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor((4, 5, 6), &mut rng);
        let p = random_params(6, 3, &mut rng);
        let perm = [3usize, 0, 4, 1, 2];
        let xp = Array3::from_shape_fn((4, 5, 6), |(t, m, f)| x[[t, perm[m], f]]);
        let a = sacc_forward(&x, &p).unwrap();
        let b = sacc_forward(&xp, &p).unwrap();
        for t in 0..4 {
            for m in 0..5 {
                prop_assert!((b.w[[t, m]] - a.w[[t, perm[m]]]).abs() < 1e-12);
            }
        }
        for (ya, yb) in a.y.iter().zip(b.y.iter()) {
            prop_assert!((ya - yb).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor((3, 4, 5), &mut rng);
        let p = random_params(5, 2, &mut rng);
        prop_assert_eq!(sacc_forward(&x, &p).unwrap(), sacc_forward(&x, &p).unwrap());
    }
}

/// Channel `target` carries the clean plane, a fixed spectral tilt plus
/// jitter; the others are strong zero-mean noise.
fn selection_item(target: usize, m: usize, seed: u64) -> TrainingItem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, f) = (40, 12);
    let clean = Array2::from_shape_fn((t, f), |(_, fi)| {
        1.5 - 3.0 * fi as f64 / (f - 1) as f64 + rng.gen_range(-0.5..0.5)
    });
    let input = Array3::from_shape_fn((t, m, f), |(ti, mi, fi)| {
        if mi == target {
            clean[[ti, fi]]
        } else {
            0.0
        }
    });
    let mut input = input;
    for mi in (0..m).filter(|&c| c != target) {
        for v in input.index_axis_mut(Axis(1), mi).iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
    }
    TrainingItem {
        input,
        target: clean,
    }
}

#[test]
fn training_learns_to_pick_the_clean_channel() {
    let data: Vec<TrainingItem> = (0..24).map(|s| selection_item(0, 4, s)).collect();
    let cfg = SaccTrainConfig {
        learning_rate: 0.02,
        epochs: 30,
        batch_size: 4,
        seed: 0,
        attention_dim: 4,
        loss: SaccLoss::Mse,
    };
    let out = sacc_train(&data, &cfg).unwrap();
    let held_out = selection_item(0, 4, 999);
    let w = sacc_forward(&held_out.input, &out.params).unwrap().w;
    let profile = average_weights(&w).unwrap();
    assert!(profile[0] > 0.5, "profile {profile:?}");
    let best = (0..4).max_by(|&i, &j| profile[i].total_cmp(&profile[j])).unwrap();
    assert_eq!(best, 0);
}

#[test]
fn loss_trace_is_non_increasing_on_beam_selection() {
    // the clean channel moves between items, as a source moves between beams
    let data: Vec<TrainingItem> = (0..32).map(|s| selection_item(s as usize % 6, 6, 100 + s)).collect();
    let cfg = SaccTrainConfig {
        learning_rate: 0.01,
        epochs: 20,
        batch_size: 8,
        seed: 0,
        attention_dim: 8,
        loss: SaccLoss::Mse,
    };
    let out = sacc_train(&data, &cfg).unwrap();
    for pair in out.loss_trace.windows(2) {
        assert!(pair[1] <= pair[0] * 1.01, "trace {:?}", out.loss_trace);
    }
    assert!(out.loss_trace.last().unwrap() < &out.loss_trace[0]);
}

#[test]
fn training_is_reproducible() {
    let data: Vec<TrainingItem> = (0..8).map(|s| selection_item(s as usize % 3, 3, s)).collect();
    let cfg = SaccTrainConfig {
        learning_rate: 0.01,
        epochs: 3,
        batch_size: 3,
        seed: 9,
        attention_dim: 4,
        loss: SaccLoss::Mse,
    };
    let a = sacc_train(&data, &cfg).unwrap();
    let b = sacc_train(&data, &cfg).unwrap();
    assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    assert_eq!(a.loss_trace, b.loss_trace);
}

#[test]
fn average_weights_are_column_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut w = Array2::from_shape_simple_fn((9, 5), || rng.gen_range(0.01..1.0));
    for mut row in w.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    let profile = average_weights(&w).unwrap();
    for m in 0..5 {
        let mean: f64 = (0..9).map(|t| w[[t, m]]).sum::<f64>() / 9.0;
        assert!((profile[m] - mean).abs() < 1e-15);
    }
    assert!((profile.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let single = w.slice(ndarray::s![2..3, ..]).to_owned();
    assert_eq!(average_weights(&single).unwrap(), single.row(0).to_vec());
}

#[test]
fn localize_one_hot_and_uniform() {
    let geom = ArrayGeometry::default();
    let beams = design_beamset(&geom, NoiseModel::Uncorrelated, 0.01, 16, &[1000.0]).unwrap();
    let mut one_hot = vec![0.0; 16];
    one_hot[8] = 1.0;
    let loc = localize(&one_hot, &beams).unwrap();
    assert_eq!(loc.beam_index, 8);
    assert!((loc.azimuth_deg - 95.625).abs() < 1e-12);
    assert!(loc.flatness < 1e-10);
    let uniform = localize(&[1.0 / 16.0; 16], &beams).unwrap();
    assert_eq!(uniform.beam_index, 0);
    assert!((uniform.flatness - 1.0).abs() < 1e-12);
    assert!(localize(&[0.5, 0.5], &beams).is_err());
    let json = loc.to_json().unwrap();
    for key in ["azimuth_deg", "beam_index", "flatness", "profile"] {
        assert!(json.contains(key));
    }
}
