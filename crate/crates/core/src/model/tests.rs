use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Reduction, Tape, Tensor};
use crate::flow::NET_INPUT_SIZE;

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        shared_dim: 8,
        detector_hidden: 5,
        classifier_hidden: 6,
        ..ModelConfig::new(variant, 3)
    }
}

fn random_inputs<T: Real>(n: usize, seed: u64) -> (Tensor<T>, Tensor<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [n, 1, NET_INPUT_SIZE, NET_INPUT_SIZE];
    let mut draw = || -> Tensor<T> {
        let data: Vec<f64> = (0..n * NET_INPUT_SIZE * NET_INPUT_SIZE)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::<f64>::from_f64(shape, &data).unwrap().cast()
    };
    (draw(), draw())
}

fn loss_value(cfg: &ModelConfig, params: &ModelParams<f64>, u: &Tensor<f64>, v: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let (u, v) = (tape.param(u), tape.param(v));
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let out = forward(&mut tape, &b, cfg, u, v, true, &mut rng).unwrap();
    let loss = joint_loss(&mut tape, cfg, &out, labels).unwrap();
    tape.value(loss)[0]
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    for variant in Variant::ALL {
        let cfg = tiny(variant);
        let mut params = build_model::<f64>(&cfg, 3).unwrap();
        // Nonzero biases so every bias gradient path is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in params.tensors_mut() {
            if t.shape().len() == 1 {
                t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.1..0.1));
            }
        }
        let (u, v) = random_inputs::<f64>(2, 5);
        let labels = [2, 1];

        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let (uv, vv) = (tape.param(&u), tape.param(&v));
        let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
        let out = forward(&mut tape, &b, &cfg, uv, vv, true, &mut drop_rng).unwrap();
        let loss = joint_loss(&mut tape, &cfg, &out, &labels).unwrap();
        tape.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = b.vars().iter().map(|&var| tape.grad(var).unwrap().to_vec()).collect();
        drop(tape);

        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        let mut checked = 0;
        let mut kinks = 0;
        for (pi, name) in params.names().to_vec().into_iter().enumerate() {
            let n = params.tensors()[pi].numel();
            for j in (0..n).step_by((n / 2).max(1)).take(2) {
                let orig = params.tensors()[pi].data()[j];
                let mut at = |x: f64| {
                    params.tensors_mut()[pi].data_mut()[j] = x;
                    let l = loss_value(&cfg, &params, &u, &v, &labels);
                    params.tensors_mut()[pi].data_mut()[j] = orig;
                    l
                };
                let analytic = grads[pi][j];
                let h = 1e-5;
                let (up, mid, down) = (at(orig + h), at(orig), at(orig - h));
                let central = (up - down) / (2.0 * h);
                checked += 1;
                if rel(central, analytic) < 1e-4 {
                    continue;
                }
                // A relu or max-pool switch inside the step shows up as
                // disagreeing one-sided slopes; re-check with a smaller step.
                let (fwd, bwd) = ((up - mid) / h, (mid - down) / h);
                assert!(
                    rel(fwd, bwd) > 1e-4,
                    "{variant} {name}[{j}]: analytic {analytic} numeric {central}"
                );
                kinks += 1;
                let h = 1e-7;
                let central = (at(orig + h) - at(orig - h)) / (2.0 * h);
                assert!(
                    rel(central, analytic) < 1e-4,
                    "{variant} {name}[{j}]: analytic {analytic} numeric {central} (h=1e-7)"
                );
            }
        }
        assert!(
            kinks * 10 <= checked,
            "{variant}: {kinks} of {checked} entries hit a kink"
        );
    }
}

#[test]
fn shared_feature_shape_and_batch_independence() {
    let model = Model::<f32>::new(ModelConfig::new(Variant::Basic, 3), 1).unwrap();
    let (u, v) = random_inputs::<f32>(3, 2);
    let ev = model.evaluate(&u, &v).unwrap();
    assert_eq!(ev.z.shape(), &[3, 1024]);
    assert_eq!(ev.logits.shape(), &[3, 3]);

    // Swap samples 0 and 2.
    let px = NET_INPUT_SIZE * NET_INPUT_SIZE;
    let swap = |t: &Tensor<f32>| {
        let mut d = t.data().to_vec();
        let (a, rest) = d.split_at_mut(px);
        a.swap_with_slice(&mut rest[px..2 * px]);
        Tensor::new(t.shape().to_vec(), d).unwrap()
    };
    let ev2 = model.evaluate(&swap(&u), &swap(&v)).unwrap();
    let row = |t: &Tensor<f32>, i: usize| t.data()[i * 1024..(i + 1) * 1024].to_vec();
    assert_eq!(row(&ev.z, 0), row(&ev2.z, 2));
    assert_eq!(row(&ev.z, 1), row(&ev2.z, 1));
    assert_eq!(row(&ev.z, 2), row(&ev2.z, 0));
}

#[test]
fn zero_inputs_give_finite_uniform_features() {
    let mut params = build_model::<f32>(&tiny(Variant::Fr), 0).unwrap();
    for t in params.tensors_mut() {
        if t.shape().len() == 1 {
            t.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x = 0.01 * (i % 5) as f32 - 0.015);
        }
    }
    let model = Model::from_parts(tiny(Variant::Fr), params).unwrap();
    let zeros = Tensor::<f32>::zeros([2, 1, NET_INPUT_SIZE, NET_INPUT_SIZE]);
    let ev = model.evaluate(&zeros, &zeros).unwrap();
    assert!(ev.z.is_finite() && ev.logits.is_finite());
    assert_eq!(ev.z.data()[..8], ev.z.data()[8..]);
}

#[test]
fn attention_rows_are_distributions_and_shrink_features() {
    let cfg = tiny(Variant::Fr);
    let params = build_model::<f32>(&cfg, 2).unwrap();
    let (u, v) = random_inputs::<f32>(4, 3);
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let (u, v) = (tape.param(&u), tape.param(&v));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward(&mut tape, &b, &cfg, u, v, false, &mut rng).unwrap();
    assert_eq!(out.attention.len(), 3);
    let z = tape.value(out.z).to_vec();
    for (&a, &s) in out.attention.iter().zip(&out.specific) {
        for row in tape.value(a).chunks_exact(8) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        for (zk, zz) in tape.value(s).iter().zip(&z) {
            assert!(zk.abs() <= zz.abs());
        }
    }
    let probs = tape.value(out.detector_probs.unwrap());
    assert_eq!(probs.len(), 12);
    assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn propose_examples() {
    // Zero shared feature: every specific feature is zero.
    let cfg = tiny(Variant::Fr);
    let params = build_model::<f64>(&cfg, 7).unwrap();
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let z = tape.constant([2, 8], vec![0.0; 16]).unwrap();
    let (_, specific, _) = propose(&mut tape, &b, &cfg, z).unwrap();
    for s in specific {
        assert!(tape.value(s).iter().all(|&x| x == 0.0));
    }

    // Equal attention logits over 4 features: z_k* = z / 4.
    let cfg = ModelConfig {
        shared_dim: 4,
        ..tiny(Variant::Fr)
    };
    let mut params = build_model::<f64>(&cfg, 7).unwrap();
    for k in 0..3 {
        params.get_mut(&format!("att{k}.w")).unwrap().data_mut().fill(0.0);
        params.get_mut(&format!("att{k}.b")).unwrap().data_mut().fill(0.3);
    }
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let z = tape.constant([1, 4], vec![4.0; 4]).unwrap();
    let (_, specific, _) = propose(&mut tape, &b, &cfg, z).unwrap();
    for s in specific {
        assert_eq!(tape.value(s), &[1.0, 1.0, 1.0, 1.0]);
    }

    let basic = tiny(Variant::Basic);
    let params = build_model::<f64>(&basic, 7).unwrap();
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let z = tape.constant([1, 8], vec![1.0; 8]).unwrap();
    assert!(matches!(propose(&mut tape, &b, &basic, z), Err(crate::Error::Usage(_))));
}

fn probs_var(tape: &mut Tape<'_, f64>, n: usize, k: usize, data: Vec<f64>) -> crate::autodiff::Var {
    tape.constant([n, k], data).unwrap()
}

#[test]
fn proposal_loss_examples() {
    let mut tape = Tape::<f64>::new();
    let p = probs_var(&mut tape, 3, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    let l = proposal_loss(&mut tape, p, &[0, 2, 1], Reduction::Mean).unwrap();
    assert!(tape.value(l)[0] <= 1e-6);

    for k in [2, 3, 5] {
        let p = probs_var(&mut tape, 4, k, vec![0.5; 4 * k]);
        let l = proposal_loss(&mut tape, p, &[0, 1, 1, 0], Reduction::Mean).unwrap();
        assert!((tape.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    // K = 2, two samples with labels [0, 1]:
    // detector 0 sees (0.8, y=1) and (0.4, y=0); detector 1 sees (0.3, y=0) and (0.9, y=1).
    let p = probs_var(&mut tape, 2, 2, vec![0.8, 0.3, 0.4, 0.9]);
    let l = proposal_loss(&mut tape, p, &[0, 1], Reduction::Mean).unwrap();
    let d0 = -(0.8f64.ln() + 0.6f64.ln()) / 2.0;
    let d1 = -(0.7f64.ln() + 0.9f64.ln()) / 2.0;
    assert_eq!(tape.value(l)[0], (d0 + d1) * 0.5);

    let summed = proposal_loss(&mut tape, p, &[0, 1], Reduction::Sum).unwrap();
    assert!((tape.value(summed)[0] - (d0 + d1)).abs() < 1e-15);

    assert!(matches!(
        proposal_loss(&mut tape, p, &[0, 2], Reduction::Mean),
        Err(crate::Error::Data(_))
    ));
}

#[test]
fn proposal_loss_is_mean_of_detector_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, k) = (7, 4);
    let data: Vec<f64> = (0..n * k).map(|_| rng.random_range(0.01..0.99)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut tape = Tape::<f64>::new();
    let p = probs_var(&mut tape, n, k, data.clone());
    let l = proposal_loss(&mut tape, p, &labels, Reduction::Mean).unwrap();
    let mut per = Vec::new();
    for c in 0..k {
        let col: Vec<f64> = (0..n).map(|i| data[i * k + c]).collect();
        let y: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l == c))).collect();
        let cv = tape.constant([n], col).unwrap();
        let lc = tape.binary_cross_entropy(cv, &y, Reduction::Mean).unwrap();
        per.push(tape.value(lc)[0]);
    }
    let mean = per.iter().sum::<f64>() / k as f64;
    assert!((tape.value(l)[0] - mean).abs() <= 4.0 * f64::EPSILON * mean);
}

#[test]
#[allow(clippy::approx_constant)]
fn total_loss_examples() {
    let mut tape = Tape::<f64>::new();
    let lp = tape.constant([1], vec![0.693147]).unwrap();
    let lc = tape.constant([1], vec![1.098612]).unwrap();
    let t0 = total_loss(&mut tape, lp, lc, 0.0).unwrap();
    assert_eq!(tape.value(t0)[0], 1.098612);
    let t = total_loss(&mut tape, lp, lc, 0.85).unwrap();
    assert!((tape.value(t)[0] - 1.687787).abs() < 1e-6);
    let same = tape.constant([1], vec![0.4]).unwrap();
    let t1 = total_loss(&mut tape, same, same, 1.0).unwrap();
    assert_eq!(tape.value(t1)[0], 0.8);
}

#[test]
fn fuse_examples() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant([1, 2], vec![1.0, 2.0]).unwrap();
    let b = tape.constant([1, 2], vec![0.0, 1.0]).unwrap();
    let c = tape.constant([1, 2], vec![1.0, 0.0]).unwrap();
    let single = fuse(&mut tape, Variant::Fr, &[a]).unwrap();
    assert_eq!(tape.value(single), &[1.0, 2.0]);
    let s = fuse(&mut tape, Variant::Fr, &[a, b, c]).unwrap();
    assert_eq!(tape.value(s), &[2.0, 3.0]);
    let cat = fuse(&mut tape, Variant::FrConcat, &[a, b]).unwrap();
    assert_eq!(tape.shape(cat), &[1, 4]);
    let bad = tape.constant([1, 3], vec![0.0; 3]).unwrap();
    assert!(fuse(&mut tape, Variant::Fr, &[a, bad]).is_err());
}

#[test]
fn fuse_is_permutation_invariant_and_branches_are_separable() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::<f32>::new();
    let vars: Vec<_> = (0..4)
        .map(|_| {
            let d: Vec<f32> = (0..64)
                .map(|_| rng.random_range(-1e3..1e3) * rng.random::<f32>().powi(6))
                .collect();
            tape.constant([2, 32], d).unwrap()
        })
        .collect();
    let fused = fuse(&mut tape, Variant::Fr, &vars).unwrap();
    let base = tape.value(fused).to_vec();
    for perm in [[3, 1, 0, 2], [1, 0, 3, 2], [2, 3, 1, 0]] {
        let p: Vec<_> = perm.iter().map(|&i| vars[i]).collect();
        let f = fuse(&mut tape, Variant::Fr, &p).unwrap();
        assert_eq!(tape.value(f), base.as_slice());
    }
    // A zeroed branch contributes nothing.
    let zero = tape.constant([2, 32], vec![0.0; 64]).unwrap();
    let with_zero = fuse(&mut tape, Variant::Fr, &[vars[0], zero, vars[2]]).unwrap();
    let without = fuse(&mut tape, Variant::Fr, &[vars[0], vars[2]]).unwrap();
    assert_eq!(tape.value(with_zero), tape.value(without));
}

#[test]
fn evaluation_is_deterministic_and_argmax_consistent() {
    let model = Model::<f32>::new(tiny(Variant::Fr), 4).unwrap();
    let (u, v) = random_inputs::<f32>(5, 6);
    let a = model.evaluate(&u, &v).unwrap();
    let b = model.evaluate(&u, &v).unwrap();
    assert_eq!(a.logits, b.logits);
    let preds = model.predict(&u, &v).unwrap();
    for (row, &p) in a.logits.data().chunks_exact(3).zip(&preds) {
        let max = row.iter().copied().fold(f32::MIN, f32::max);
        let exps: Vec<f32> = row.iter().map(|x| (x - max).exp()).collect();
        assert_eq!(argmax(&exps), p);
        assert_eq!(row[p], max);
    }
}

#[test]
fn training_mode_dropout_changes_logits_only_in_training() {
    let cfg = tiny(Variant::Basic);
    let params = build_model::<f32>(&cfg, 4).unwrap();
    let (u, v) = random_inputs::<f32>(4, 6);
    let run = |training: bool, seed: u64| {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let (uv, vv) = (tape.param(&u), tape.param(&v));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = forward(&mut tape, &b, &cfg, uv, vv, training, &mut rng).unwrap();
        tape.value(out.logits).to_vec()
    };
    assert_eq!(run(false, 1), run(false, 2));
    assert_eq!(run(true, 1), run(true, 1));
    assert_ne!(run(true, 1), run(true, 2));
}
