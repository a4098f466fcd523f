use aecnn::autograd::{Mode, Tape};
use aecnn::loss::TripletConfig;
use aecnn::model::{Aecnn, ModelConfig};
use aecnn::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_height: 16,
        input_width: 16,
        stage_widths: vec![4, 6, 6, 8],
        fc_hidden: 8,
        ..ModelConfig::default()
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.iter().map(|e| e / z).collect()
}

fn triplet_value(e: &Tensor<f64>, labels: &[usize], cfg: &TripletConfig) -> (f64, usize) {
    let mut tape = Tape::new();
    let x = tape.input(e.clone());
    let (loss, valid) = tape.triplet_loss(x, labels, cfg).unwrap();
    (tape.value(loss).data()[0], valid)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pointwise_identity_conv_is_identity(n in 1usize..3, c in 1usize..5, h in 1usize..7, w in 1usize..7, seed: u64) {
        let x = random_tensor(vec![n, c, h, w], seed);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let kernel = tape.input(Tensor::from_fn(vec![c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 }));
        let bias = tape.input(Tensor::zeros(vec![c]));
        let y = tape.conv2d(xv, kernel, bias, 1, 0).unwrap();
        prop_assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn max_pool_gradient_is_one_hot_per_window(k in 2usize..4, windows in 1usize..4, c in 1usize..3, seed: u64) {
        let side = k * windows;
        let x = random_tensor(vec![1, c, side, side], seed);
        let upstream = Tensor::from_fn(vec![1, c, windows, windows], |i| 1.0 + i as f64);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let pooled = tape.max_pool2d(xv, k, k).unwrap();
        let weights = tape.input(upstream.clone());
        let weighted = tape.mul(pooled, weights).unwrap();
        let loss = tape.sum(weighted);
        let grads = tape.backward(loss).unwrap();
        let dx = grads.get(xv).unwrap();
        for ch in 0..c {
            for wi in 0..windows {
                for wj in 0..windows {
                    let mut hits = Vec::new();
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = (ch * side + wi * k + di) * side + wj * k + dj;
                            if dx.data()[idx] != 0.0 {
                                hits.push((idx, dx.data()[idx]));
                            }
                        }
                    }
                    prop_assert_eq!(hits.len(), 1);
                    let (idx, g) = hits[0];
                    prop_assert_eq!(g, upstream.data()[(ch * windows + wi) * windows + wj]);
                    let window_max = (0..k * k)
                        .map(|m| x.data()[(ch * side + wi * k + m / k) * side + wj * k + m % k])
                        .fold(f64::NEG_INFINITY, f64::max);
                    prop_assert_eq!(x.data()[idx], window_max);
                }
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot(b in 1usize..6, c in 2usize..7, seed: u64) {
        let logits = random_tensor(vec![b, c], seed).map(|v| 3.0 * v);
        let labels: Vec<usize> = (0..b).map(|i| (seed as usize + i * 7) % c).collect();
        let mut tape = Tape::new();
        let lv = tape.leaf(logits.clone(), true);
        let loss = tape.cross_entropy(lv, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(lv).unwrap();
        let ce = |t: &Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.input(t.clone());
            let l = tape.cross_entropy(v, &labels).unwrap();
            tape.value(l).data()[0]
        };
        let h = 1e-5;
        for (i, &label) in labels.iter().enumerate() {
            let p = softmax_row(&logits.data()[i * c..(i + 1) * c]);
            for (j, &pj) in p.iter().enumerate() {
                let closed = (pj - if label == j { 1.0 } else { 0.0 }) / b as f64;
                let analytic = g.data()[i * c + j];
                prop_assert!((analytic - closed).abs() <= 1e-12, "{analytic} vs {closed}");
                let (mut up, mut down) = (logits.clone(), logits.clone());
                up.data_mut()[i * c + j] += h;
                down.data_mut()[i * c + j] -= h;
                let numeric = (ce(&up) - ce(&down)) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                prop_assert!(rel < 1e-5, "rel err {rel}: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn triplet_loss_is_translation_invariant_and_scales_quadratically(
        b in 2usize..12,
        d in 1usize..6,
        s in 0.1f64..10.0,
        seed: u64,
    ) {
        let e = random_tensor(vec![b, d], seed);
        let labels: Vec<usize> = (0..b).map(|i| (seed as usize / 3 + i) % 3).collect();
        let cfg = TripletConfig::default();
        let (base, valid) = triplet_value(&e, &labels, &cfg);

        let shift = random_tensor(vec![d], seed ^ 1);
        let moved = Tensor::from_fn(vec![b, d], |i| e.data()[i] + 5.0 * shift.data()[i % d]);
        let (translated, valid_t) = triplet_value(&moved, &labels, &cfg);
        prop_assert_eq!(valid, valid_t);
        prop_assert!((translated - base).abs() <= 1e-9 * base.abs().max(1.0));

        let (scaled, valid_s) = triplet_value(&e.map(|v| s * v), &labels, &cfg);
        prop_assert_eq!(valid, valid_s);
        prop_assert!((scaled - s * s * base).abs() <= 1e-9 * (s * s * base).abs().max(1e-12));
    }

    #[test]
    fn joint_total_is_exact_sum(b in 2usize..9, seed: u64) {
        let logits = random_tensor(vec![b, 6], seed);
        let emb = random_tensor(vec![b, 4], seed ^ 7);
        let labels: Vec<usize> = (0..b).map(|i| (seed as usize + i) % 6).collect();
        let mut tape = Tape::new();
        let (lv, ev) = (tape.leaf(logits, true), tape.leaf(emb, true));
        let (total, value) = tape.joint_loss(lv, ev, &labels, Some(&TripletConfig::default())).unwrap();
        prop_assert_eq!(value.total, value.ce + value.triplet);
        prop_assert_eq!(tape.value(total).data()[0], value.ce + value.triplet);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn logits_are_batch_by_six_and_softmax_sums_to_one(b in 1usize..5, seed: u64) {
        let model = Aecnn::<f64>::new(tiny_model(), seed).unwrap();
        let logits = model.predict_logits(random_tensor(vec![b, 12, 16, 16], seed)).unwrap();
        prop_assert_eq!(logits.shape(), &[b, 6]);
        for i in 0..b {
            let sum: f64 = softmax_row(&logits.data()[i * 6..(i + 1) * 6]).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_mode_is_batch_permutation_covariant(b in 2usize..5, shift in 1usize..4, seed: u64) {
        let model = Aecnn::<f64>::new(tiny_model(), seed).unwrap();
        let x = random_tensor(vec![b, 12, 16, 16], seed);
        let plane = 12 * 16 * 16;
        let order: Vec<usize> = (0..b).map(|i| (i + shift) % b).collect();
        let permuted = Tensor::from_fn(vec![b, 12, 16, 16], |i| x.data()[order[i / plane] * plane + i % plane]);
        let a = model.predict_logits(x).unwrap();
        let p = model.predict_logits(permuted).unwrap();
        for (row, &src) in order.iter().enumerate() {
            prop_assert_eq!(&p.data()[row * 6..(row + 1) * 6], &a.data()[src * 6..(src + 1) * 6]);
        }
    }

    #[test]
    fn identical_passes_give_identical_gradients(seed: u64) {
        let model = Aecnn::<f64>::new(tiny_model(), seed).unwrap();
        let x = random_tensor(vec![4, 12, 16, 16], seed);
        let labels = [0, 1, 0, 1];
        let run = || {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let input = tape.input(x.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = model.forward(&mut tape, &bound, input, Mode::Train, &mut rng).unwrap();
            let (loss, _) = tape
                .joint_loss(out.logits, out.embedding, &labels, Some(&TripletConfig::default()))
                .unwrap();
            let grads = tape.backward(loss).unwrap();
            (0..model.params().len())
                .map(|i| grads.get(bound.var(i)).cloned())
                .collect::<Vec<_>>()
        };
        let (first, second) = (run(), run());
        prop_assert!(first.iter().all(Option::is_some));
        prop_assert_eq!(first, second);
    }
}
