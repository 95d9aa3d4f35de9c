use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Split;
use crate::network::BnParams;
use crate::quant::QuantConfig;
use crate::scalar::Exact;
use crate::tensor::{CodeKind, IntTensor};

fn t64(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![v.len()], v.to_vec()).unwrap()
}

fn flat_data(n: usize, features: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pix = (0..n * features).map(|_| rng.gen::<u8>()).collect();
    let images = IntTensor::new(vec![n, features], pix, 8, CodeKind::Unsigned).unwrap();
    Dataset::new(images, (0..n).map(|i| i % classes).collect(), classes, Split::Train).unwrap()
}

fn image_data(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pix = (0..n * 36).map(|_| rng.gen::<u8>()).collect();
    let images = IntTensor::new(vec![n, 1, 6, 6], pix, 8, CodeKind::Unsigned).unwrap();
    Dataset::new(images, (0..n).map(|i| i % 2).collect(), 2, Split::Train).unwrap()
}

fn spec(layers: &str, input: &[usize], classes: usize) -> NetworkSpec {
    NetworkSpec::new(NetworkSpec::parse_layers(layers).unwrap(), QuantConfig::new(4, 4).unwrap(), input.to_vec(), classes, 8)
        .unwrap()
}

/// Seeded teacher with grid weights, converted to `T`, every BN the identity.
fn identity_teacher<T: Scalar>(s: NetworkSpec, seed: u64) -> TeacherNet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = TeacherNet::<f64>::init(s, &mut rng).unwrap();
    t.snap_to_grid().unwrap();
    let mut t = t.cast::<T>().unwrap();
    for b in &mut t.blocks {
        let c = b.spec.linear.out_channels();
        *b.bn_mut().unwrap() = BnParams::identity(c);
    }
    t
}

fn small_cfg() -> DistillConfig {
    DistillConfig { batch_size: 8, calibration_batches: 2, stage2_epochs: 2, ..Default::default() }
}

#[test]
fn fit_alpha_examples() {
    assert_eq!(fit_alpha(&t64(&[2.0, 4.0]), &t64(&[1.0, 2.0])).unwrap().get(), 2);
    assert_eq!(alpha_loss(&t64(&[2.0, 4.0]), &t64(&[1.0, 2.0]), 2).unwrap(), 0.0);
    assert_eq!(fit_alpha(&t64(&[0.3, -1.2]), &t64(&[0.3, -1.2])).unwrap().get(), 1);
    // alpha* = 2.5 and losses at 2 and 3 tie
    assert_eq!(fit_alpha(&t64(&[5.0]), &t64(&[2.0])).unwrap().get(), 2);
    assert_eq!(fit_alpha(&t64(&[-3.0]), &t64(&[2.0])).unwrap().get(), 1);
    assert!(matches!(fit_alpha(&t64(&[1.0]), &t64(&[0.0])), Err(Error::Degenerate(_))));
    assert!(matches!(fit_alpha(&t64(&[1.0]), &t64(&[1.0, 2.0])), Err(Error::Dimension(_))));
}

proptest! {
    #[test]
    fn fit_alpha_is_locally_integer_optimal(
        pairs in prop::collection::vec((-40i64..40, -40i64..40), 1..8),
    ) {
        prop_assume!(pairs.iter().any(|&(_, s)| s != 0));
        let t = Tensor::new(vec![pairs.len()], pairs.iter().map(|&(t, _)| Exact::new(t, 7)).collect()).unwrap();
        let s = Tensor::new(vec![pairs.len()], pairs.iter().map(|&(_, s)| Exact::new(s, 5)).collect()).unwrap();
        let a = fit_alpha(&t, &s).unwrap().get() as i64;
        let best = alpha_loss(&t, &s, a).unwrap();
        for b in (a - 3).max(1)..=a + 3 {
            let l = alpha_loss(&t, &s, b).unwrap();
            prop_assert!(best <= l);
            if l == best {
                prop_assert!(a <= b);
            }
        }
    }
}

#[test]
fn stage1_on_identity_teacher_gives_unit_scales_and_zero_residual() {
    let s = spec("conv:2:3:1:1 bn clip pool:2 flatten dense:4 bn clip dense:2 bn", &[1, 6, 6], 2);
    let teacher = identity_teacher::<Exact>(s, 1);
    let mut student = StudentNet::from_teacher(&teacher).unwrap();
    let data = image_data(16, 2);
    let reports = stage1_init(&teacher, &mut student, &data, &small_cfg()).unwrap();
    assert_eq!(reports.len(), 3);
    for r in &reports {
        assert_eq!((r.stage, r.alpha, r.final_loss, r.degenerate), (1, 1, 0.0, false));
    }
    assert!(student.alphas().iter().all(|a| *a == Some(ScaleFactor::ONE)));
}

#[test]
fn stage1_recovers_a_batchnorm_gain_of_three() {
    let s = spec("dense:3 bn", &[5], 3);
    let mut teacher = identity_teacher::<Exact>(s, 3);
    teacher.blocks[0].bn_mut().unwrap().gamma = vec![Exact::from_integer(3); 3];
    let mut student = StudentNet::from_teacher(&teacher).unwrap();
    let data = flat_data(16, 5, 3, 4);
    let reports = stage1_init(&teacher, &mut student, &data, &small_cfg()).unwrap();
    assert_eq!(reports[0].alpha, 3);
    assert_eq!(reports[0].final_loss, 0.0);
    assert!(reports[0].baseline_loss > 0.0);
}

#[test]
fn stage1_flags_all_zero_student_activations() {
    let s = spec("dense:2 bn", &[4], 2);
    let teacher = identity_teacher::<f64>(s, 5);
    let mut student = StudentNet::from_teacher(&teacher).unwrap();
    let zeros = Dataset::new(IntTensor::new(vec![8, 4], vec![0; 32], 8, CodeKind::Unsigned).unwrap(), vec![0; 8], 2, Split::Train)
        .unwrap();
    let reports = stage1_init(&teacher, &mut student, &zeros, &small_cfg()).unwrap();
    assert!(reports[0].degenerate);
    assert_eq!(reports[0].alpha, 1);
}

#[test]
fn stage1_weight_steps_reduce_the_residual() {
    let s = spec("dense:4:fp bn", &[6], 4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut teacher = TeacherNet::<f64>::init(s, &mut rng).unwrap();
    {
        let bn = teacher.blocks[0].bn_mut().unwrap();
        bn.gamma = vec![2.4, 1.7, 3.1, 2.0];
        bn.beta = vec![0.3, -0.2, 0.1, 0.05];
    }
    let data = flat_data(32, 6, 4, 7);
    let cfg = DistillConfig { stage1_weight_steps: 20, stage1_learning_rate: 0.005, ..small_cfg() };
    let mut student = StudentNet::from_teacher(&teacher).unwrap();
    let r = &stage1_init(&teacher, &mut student, &data, &cfg).unwrap()[0];
    assert_eq!(r.trajectory.len(), 21);
    assert!(r.final_loss < r.trajectory[0], "{r:?}");
}

#[test]
fn stage2_on_identity_teacher_starts_at_zero_and_keeps_weights() {
    let s = spec("conv:2:3:1:1 bn clip pool:2 flatten dense:2 bn", &[1, 6, 6], 2);
    let teacher = identity_teacher::<f64>(s, 8);
    let mut student = StudentNet::from_teacher(&teacher).unwrap();
    let data = image_data(16, 9);
    stage1_init(&teacher, &mut student, &data, &small_cfg()).unwrap();
    let before: Vec<_> = student.blocks.iter().map(|b| b.weight().clone()).collect();
    for layer in 0..2 {
        let r = stage2_train_layer(layer, &teacher, &mut student, &data, &small_cfg()).unwrap();
        assert_eq!((r.baseline_loss, r.final_loss, r.epochs), (0.0, 0.0, 0));
    }
    let after: Vec<_> = student.blocks.iter().map(|b| b.weight().clone()).collect();
    assert_eq!(before, after);
}

#[test]
fn stage2_fits_a_single_layer_target() {
    let s = spec("dense:3 bn clip", &[8], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut teacher = TeacherNet::<f64>::init(s.clone(), &mut rng).unwrap();
    teacher.snap_to_grid().unwrap();
    {
        let bn = teacher.blocks[0].bn_mut().unwrap();
        bn.gamma = vec![2.0, 3.0, 2.0];
        bn.beta = vec![0.2, 0.1, 0.3];
    }
    // start the student from unrelated weights
    let other = TeacherNet::<f64>::init(s, &mut rng).unwrap();
    let mut student = StudentNet::from_teacher(&teacher).unwrap();
    student.blocks[0].set_weight(other.blocks[0].effective_weight().unwrap()).unwrap();
    student.blocks[0].set_alpha(ScaleFactor::new(3).unwrap()).unwrap();
    let data = flat_data(256, 8, 3, 11);
    let cfg = DistillConfig {
        batch_size: 16,
        stage2_epochs: 30,
        stage2_learning_rate: 0.02,
        threshold: 1e-9,
        patience: 30,
        ..small_cfg()
    };
    let r = stage2_train_layer(0, &teacher, &mut student, &data, &cfg).unwrap();
    assert!(r.final_loss < 0.1 * r.baseline_loss, "{r:?}");
    assert!(r.trajectory.last().unwrap() < &(0.1 * r.trajectory[0]), "{r:?}");
    assert!(student.is_frozen(0));
    let w = student.blocks[0].weight();
    assert_eq!(w, &student.blocks[0].effective_weight().unwrap());
}

#[test]
fn stage2_requires_a_frozen_prefix() {
    let s = spec("dense:4 bn clip dense:2 bn", &[4], 2);
    let teacher = identity_teacher::<f64>(s, 12);
    let mut student = StudentNet::from_teacher(&teacher).unwrap();
    let data = flat_data(16, 4, 2, 13);
    stage1_init(&teacher, &mut student, &data, &small_cfg()).unwrap();
    let r = stage2_train_layer(1, &teacher, &mut student, &data, &small_cfg());
    assert!(matches!(r, Err(Error::State(_))));
    assert!(matches!(stage2_train_layer(2, &teacher, &mut student, &data, &small_cfg()), Err(Error::Config(_))));
}

#[test]
fn distillation_reports_every_layer_in_order() {
    let s = spec("conv:2:3:1:1 bn clip pool:2 flatten dense:4 bn clip dense:2 bn", &[1, 6, 6], 2);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut teacher = TeacherNet::<f64>::init(s.clone(), &mut rng).unwrap();
    let data = image_data(64, 15);
    // give the running statistics a non-trivial state
    let x = data.batch::<f64>(&(0..32).collect::<Vec<_>>(), &[1, 6, 6]).unwrap();
    crate::network::forward_teacher(&mut teacher, &x, crate::network::Mode::Train).unwrap();
    teacher.snap_to_grid().unwrap();
    let mut seen = Vec::new();
    let (student, reports) =
        run_distillation(&teacher, &s.to_student(), &data, &small_cfg(), |r| seen.push((r.stage, r.layer))).unwrap();
    let order: Vec<(u8, usize)> = reports.iter().map(|r| (r.stage, r.layer)).collect();
    assert_eq!(order, vec![(1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2)]);
    assert_eq!(seen, order);
    assert!(student.is_fully_frozen());
    for b in &student.blocks {
        assert!(b.alpha().unwrap().get() >= 1);
        assert_eq!(b.weight(), &b.effective_weight().unwrap());
    }
    for r in &reports {
        assert!(r.final_loss >= 0.0);
        assert_eq!(StageReport::parse_record(&r.to_record()).unwrap(), *r);
    }
}

#[test]
fn single_layer_network_runs_one_stage_of_each_kind() {
    let s = spec("dense:2 bn", &[3], 2);
    let teacher = identity_teacher::<f64>(s.clone(), 16);
    let data = flat_data(16, 3, 2, 17);
    let (_, reports) = run_distillation(&teacher, &s.to_student(), &data, &small_cfg(), |_| {}).unwrap();
    assert_eq!(reports.len(), 2);
}

#[test]
fn identity_teacher_is_a_fixed_point_in_exact_arithmetic() {
    let s = spec("conv:2:3:1:1 bn clip pool:2 flatten dense:4 bn clip dense:2 bn", &[1, 6, 6], 2);
    let teacher = identity_teacher::<Exact>(s.clone(), 18);
    let data = image_data(16, 19);
    for mode in [Stage2Input::TeacherPrefix, Stage2Input::StudentPrefix] {
        let cfg = DistillConfig { stage2_input: mode, ..small_cfg() };
        let (student, _) = run_distillation(&teacher, &s.to_student(), &data, &cfg, |_| {}).unwrap();
        let x = data.batch::<Exact>(&(0..16).collect::<Vec<_>>(), &[1, 6, 6]).unwrap();
        let (_, tacts) = teacher.forward_eval(&x).unwrap();
        let (_, sacts) = student.forward(&x, None).unwrap();
        for (a, b) in tacts.iter().zip(&sacts) {
            assert_eq!(a.output.max_abs_diff(&b.output).unwrap(), Exact::from_integer(0));
        }
    }
}

#[test]
fn mismatched_student_spec_is_rejected_with_no_reports() {
    let s = spec("dense:2 bn", &[3], 2);
    let teacher = identity_teacher::<f64>(s, 20);
    let other = spec("dense:2 scale clip", &[3], 2);
    let data = flat_data(16, 3, 2, 21);
    let err = run_distillation(&teacher, &other, &data, &small_cfg(), |_| {}).unwrap_err();
    assert!(err.reports.is_empty());
    assert!(matches!(err.error, Error::Config(_)));
}

#[test]
fn config_validation() {
    assert!(DistillConfig { patience: 0, ..Default::default() }.validate().is_err());
    assert!(DistillConfig { threshold: 0.0, ..Default::default() }.validate().is_err());
    assert_eq!("student_prefix".parse::<Stage2Input>().unwrap(), Stage2Input::StudentPrefix);
    assert!("both".parse::<Stage2Input>().is_err());
}
