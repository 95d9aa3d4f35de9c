use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::quant::QuantConfig;
use crate::scalar::Exact;

fn spec(layers: &str, input: &[usize], classes: usize) -> NetworkSpec {
    NetworkSpec::new(
        NetworkSpec::parse_layers(layers).unwrap(),
        QuantConfig::new(4, 4).unwrap(),
        input.to_vec(),
        classes,
        8,
    )
    .unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn zero_input_zero_weights_give_zero_logits() {
    let s = spec("conv:2:3:1:1 bn clip pool:2 flatten dense:3 bn", &[1, 4, 4], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = TeacherNet::<f64>::init(s, &mut rng).unwrap();
    for b in &mut net.blocks {
        let shape = b.weight().shape().to_vec();
        // 1-bit grid cannot hold zero, so use real-valued zero weights
        b.spec.weight_bits = None;
        b.set_weight(Tensor::zeros(shape)).unwrap();
    }
    let x = Tensor::zeros(vec![2, 1, 4, 4]);
    let (logits, _) = net.forward_eval(&x).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn eval_forward_is_deterministic() {
    let s = spec("conv:3:3:1:0 bn clip pool:2 flatten dense:4 bn", &[1, 6, 6], 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = TeacherNet::<f64>::init(s, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, &[3, 1, 6, 6], 0.0, 1.0);
    // move running statistics away from defaults
    forward_teacher(&mut net, &x, Mode::Train).unwrap();
    let (a, acts_a) = forward_teacher(&mut net, &x, Mode::Eval).unwrap();
    let (b, _) = forward_teacher(&mut net, &x, Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(acts_a.len(), 2);
}

#[test]
fn train_mode_batchnorm_matches_hand_computation() {
    // one 2x2 kernel of ones over a 3x3 input gives four window sums
    let s = spec("conv:1:2:1:0:fp bn flatten dense:1:fp bn", &[1, 3, 3], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut net = TeacherNet::<f64>::init(s, &mut rng).unwrap();
    net.blocks[0].set_weight(Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap()).unwrap();
    let x = Tensor::new(vec![1, 1, 3, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
    let (out, _) = net.blocks[0].forward_train(&x).unwrap();
    // sums 12, 16, 24, 28: mean 20, biased variance 40
    let sums = [12.0, 16.0, 24.0, 28.0];
    let expect: Vec<f64> = sums.iter().map(|v| (v - 20.0) / (40.0f64 + 1e-5).sqrt()).collect();
    for (a, e) in out.post_norm.data().iter().zip(&expect) {
        assert!((a - e).abs() < 1e-12);
    }
    let bn = net.blocks[0].bn().unwrap();
    assert!((bn.running_mean[0] - 0.1 * 20.0).abs() < 1e-12);
    // unbiased variance 160/3 enters the running estimate
    assert!((bn.running_var[0] - (0.9 + 0.1 * 160.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn identity_bn_teacher_equals_unit_scale_student() {
    let s = spec("conv:3:3:1:1 bn clip pool:2 flatten dense:5 bn clip dense:2 bn", &[1, 6, 6], 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut teacher = TeacherNet::<f64>::init(s, &mut rng).unwrap();
    for b in &mut teacher.blocks {
        let c = b.spec.linear.out_channels();
        *b.bn_mut().unwrap() = BnParams::identity(c);
    }
    let mut student = StudentNet::from_teacher(&teacher).unwrap();
    for b in &mut student.blocks {
        b.set_alpha(ScaleFactor::ONE).unwrap();
    }
    let x = rand_tensor(&mut rng, &[4, 1, 6, 6], 0.0, 1.0);
    let (t, tacts) = teacher.forward_eval(&x).unwrap();
    let (s, sacts) = student.forward(&x, None).unwrap();
    assert_eq!(t, s);
    for (a, b) in tacts.iter().zip(&sacts) {
        assert_eq!(a.output, b.output);
    }
    let (_, one) = student.forward(&x, Some(0)).unwrap();
    assert_eq!(one.len(), 1);
}

#[test]
fn identity_bn_is_exact_in_rational_arithmetic() {
    let bn = BnParams::<Exact>::identity(2);
    let (scale, shift) = bn.eval_affine().unwrap();
    assert!(scale.iter().all(|&s| s == Exact::from_integer(1)));
    assert!(shift.iter().all(|&s| s == Exact::from_integer(0)));
}

#[test]
fn student_requires_scale_factors() {
    let s = spec("dense:2 bn", &[3], 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let teacher = TeacherNet::<f64>::init(s, &mut rng).unwrap();
    let student = StudentNet::from_teacher(&teacher).unwrap();
    let x = Tensor::zeros(vec![1, 3]);
    assert!(matches!(student.forward(&x, None), Err(Error::State(_))));
}

#[test]
fn activations_lie_on_the_grid() {
    let s = spec("conv:2:3:1:0 bn clip flatten dense:2 bn", &[1, 5, 5], 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut teacher = TeacherNet::<f64>::init(s, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, &[3, 1, 5, 5], 0.0, 1.0);
    forward_teacher(&mut teacher, &x, Mode::Train).unwrap();
    let (_, acts) = teacher.forward_eval(&x).unwrap();
    for v in acts[0].output.data() {
        assert_eq!((v * 15.0).round(), (v * 15.0 * 1e9).round() / 1e9);
    }
}

/// Loss = sum(r * block_output); returns (loss, analytic weight grad, analytic input grad).
fn linear_functional_grads(block: &mut Block<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let (_, cache) = block.forward_train(x).unwrap();
    let g = block.backward(r, &cache).unwrap();
    (g.weight, g.input)
}

fn train_loss(block: &Block<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    // train-mode forward without touching the caller's running statistics
    let mut b = block.clone();
    let (out, _) = b.forward_train(x).unwrap();
    out.output.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn dense_weight_gradient_matches_finite_differences() {
    // gradient of ||W x - t||^2 w.r.t. W
    let s = spec("dense:3:fp scale", &[4], 3);
    let block_spec = s.blocks().unwrap().remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut block = Block::new(block_spec, rand_tensor(&mut rng, &[3, 4], -1.0, 1.0)).unwrap();
    block.set_alpha(ScaleFactor::ONE).unwrap();
    let x = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
    let t = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let loss = |b: &Block<f64>| b.forward(&x).unwrap().output.sum_sq_diff(&t).unwrap();
    let (out, cache) = block.forward_train(&x).unwrap();
    let upstream = out.output.zip_map(&t, |y, t| 2.0 * (y - t)).unwrap();
    let analytic = block.backward(&upstream, &cache).unwrap().weight;
    let h = 1e-5;
    for i in 0..12 {
        let mut p = block.clone();
        p.weight_mut().data_mut()[i] += h;
        let mut m = block.clone();
        m.weight_mut().data_mut()[i] -= h;
        let fd = (loss(&p) - loss(&m)) / (2.0 * h);
        assert!(rel_close(fd, analytic.data()[i], 1e-4), "{i}: {fd} vs {}", analytic.data()[i]);
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let s = spec("conv:2:3:1:1:fp scale pool:2 flatten dense:1 scale", &[2, 6, 6], 1);
    let block_spec = s.blocks().unwrap().remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut block = Block::new(block_spec, rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0)).unwrap();
    block.set_alpha(ScaleFactor::new(2).unwrap()).unwrap();
    let x = rand_tensor(&mut rng, &[2, 2, 6, 6], -1.0, 1.0);
    let r = rand_tensor(&mut rng, &[2, 18], -1.0, 1.0);
    let (dw, dx) = linear_functional_grads(&mut block, &x, &r);
    let h = 1e-5;
    for i in 0..dw.len() {
        let mut p = block.clone();
        p.weight_mut().data_mut()[i] += h;
        let mut m = block.clone();
        m.weight_mut().data_mut()[i] -= h;
        let fd = (train_loss(&p, &x, &r) - train_loss(&m, &x, &r)) / (2.0 * h);
        assert!(rel_close(fd, dw.data()[i], 1e-3), "w{i}: {fd} vs {}", dw.data()[i]);
    }
    for i in (0..dx.len()).step_by(5) {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (train_loss(&block, &xp, &r) - train_loss(&block, &xm, &r)) / (2.0 * h);
        assert!(rel_close(fd, dx.data()[i], 1e-3) || (fd.abs() < 1e-9 && dx.data()[i] == 0.0), "x{i}");
    }
}

#[test]
fn batchnorm_train_gradients_match_finite_differences() {
    let s = spec("dense:3:fp bn", &[5], 3);
    let block_spec = s.blocks().unwrap().remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut block = Block::new(block_spec, rand_tensor(&mut rng, &[3, 5], -1.0, 1.0)).unwrap();
    {
        let bn = block.bn_mut().unwrap();
        bn.gamma = vec![1.3, 0.7, -0.4];
        bn.beta = vec![0.1, -0.2, 0.3];
    }
    let x = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let r = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let (_, cache) = block.forward_train(&x).unwrap();
    let grads = block.backward(&r, &cache).unwrap();
    let h = 1e-5;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (train_loss(&block, &xp, &r) - train_loss(&block, &xm, &r)) / (2.0 * h);
        assert!(rel_close(fd, grads.input.data()[i], 1e-3), "x{i}: {fd} vs {}", grads.input.data()[i]);
    }
    for i in 0..block.weight().len() {
        let mut p = block.clone();
        p.weight_mut().data_mut()[i] += h;
        let mut m = block.clone();
        m.weight_mut().data_mut()[i] -= h;
        let fd = (train_loss(&p, &x, &r) - train_loss(&m, &x, &r)) / (2.0 * h);
        assert!(rel_close(fd, grads.weight.data()[i], 1e-3), "w{i}");
    }
    let gamma = grads.gamma.unwrap();
    for c in 0..3 {
        let mut p = block.clone();
        p.bn_mut().unwrap().gamma[c] += h;
        let mut m = block.clone();
        m.bn_mut().unwrap().gamma[c] -= h;
        let fd = (train_loss(&p, &x, &r) - train_loss(&m, &x, &r)) / (2.0 * h);
        assert!(rel_close(fd, gamma[c], 1e-3));
    }
}

#[test]
fn clip_passes_gradient_only_inside_unit_interval() {
    let s = spec("dense:4:fp scale clip:fp dense:1 scale", &[4], 1);
    let block_spec = s.blocks().unwrap().remove(0);
    let eye = Tensor::from_fn(vec![4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
    let mut block = Block::new(block_spec, eye).unwrap();
    block.set_alpha(ScaleFactor::ONE).unwrap();
    let x = Tensor::new(vec![1, 4], vec![-0.5, 0.25, 0.75, 1.5]).unwrap();
    let (_, cache) = block.forward_train(&x).unwrap();
    let g = Tensor::new(vec![1, 4], vec![1.0; 4]).unwrap();
    let grads = block.backward(&g, &cache).unwrap();
    assert_eq!(grads.input.data(), &[0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn stale_cache_is_rejected() {
    let s = spec("dense:2:fp scale", &[3], 2);
    let mut block = Block::new(s.blocks().unwrap().remove(0), Tensor::zeros(vec![2, 3])).unwrap();
    block.set_alpha(ScaleFactor::ONE).unwrap();
    let x = Tensor::zeros(vec![1, 3]);
    let (out, cache) = block.forward_train(&x).unwrap();
    block.weight_mut().data_mut()[0] = 0.5;
    assert!(matches!(block.backward(&out.output, &cache), Err(Error::State(_))));
}
