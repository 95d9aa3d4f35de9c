use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Split;
use crate::network::{Linear, NetworkSpec, StudentNet, TeacherNet};
use crate::quant::{QuantConfig, ScaleFactor};
use crate::scalar::Exact;

fn spec(layers: &str, input: &[usize], classes: usize, bits: u8) -> NetworkSpec {
    NetworkSpec::new(
        NetworkSpec::parse_layers(layers).unwrap(),
        QuantConfig::new(bits, bits).unwrap(),
        input.to_vec(),
        classes,
        8,
    )
    .unwrap()
}

/// Frozen student with seeded grid weights and scale factors in `1..=max_alpha`.
fn frozen_student(s: NetworkSpec, seed: u64, max_alpha: i64) -> StudentNet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = TeacherNet::<f64>::init(s, &mut rng).unwrap();
    t.snap_to_grid().unwrap();
    let mut st = StudentNet::from_teacher(&t).unwrap();
    for b in &mut st.blocks {
        b.set_alpha(ScaleFactor::new(rng.gen_range(1..=max_alpha)).unwrap()).unwrap();
    }
    st.freeze_all().unwrap();
    st
}

fn image_data(n: usize, side: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pix = (0..n * side * side).map(|_| rng.gen::<u8>()).collect();
    let images = IntTensor::new(vec![n, 1, side, side], pix, 8, CodeKind::Unsigned).unwrap();
    Dataset::new(images, (0..n).map(|i| i % 3).collect(), 3, Split::Test).unwrap()
}

const NET: &str = "conv:4:3:1:1 bn clip pool:2 conv:4:3:1:0 bn clip flatten dense:3 bn";

fn model() -> IntegerModel {
    export(&frozen_student(spec(NET, &[1, 8, 8], 3, 4), 7, 3)).unwrap()
}

#[test]
fn save_load_round_trip_is_byte_identical() {
    let m = model();
    let bytes = m.to_bytes().unwrap();
    let back = IntegerModel::from_bytes(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fiqn");
    m.save(&path).unwrap();
    assert_eq!(IntegerModel::load(&path).unwrap(), m);
}

fn with_crc(mut body: Vec<u8>) -> Vec<u8> {
    body.truncate(body.len() - 4);
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    body
}

#[test]
fn corrupt_files_are_rejected() {
    let bytes = model().to_bytes().unwrap();
    let mut flipped = bytes.clone();
    flipped[30] ^= 1;
    assert!(matches!(IntegerModel::from_bytes(&flipped), Err(Error::Format { .. })));
    assert!(matches!(IntegerModel::from_bytes(&bytes[..bytes.len() - 9]), Err(Error::Format { .. })));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(IntegerModel::from_bytes(&with_crc(magic)), Err(Error::Format { offset: 0, .. })));
    let mut kind = bytes.clone();
    kind[7] = KIND_STUDENT;
    assert!(matches!(IntegerModel::from_bytes(&with_crc(kind)), Err(Error::Format { offset: 7, .. })));
    let mut extra = bytes[..bytes.len() - 4].to_vec();
    extra.push(0);
    extra.extend_from_slice(&[0; 4]);
    assert!(IntegerModel::from_bytes(&with_crc(extra)).is_err());
}

#[test]
fn normalization_records_are_not_part_of_an_integer_model() {
    let m = model();
    let bytes = m.to_bytes().unwrap();
    // header: 16 fixed bytes, rank 3 dims, classes, count
    let records_at = 16 + 3 * 4 + 4;
    let mut body = bytes[..bytes.len() - 4].to_vec();
    let count = u32::from_le_bytes(body[records_at..records_at + 4].try_into().unwrap());
    body[records_at..records_at + 4].copy_from_slice(&(count + 1).to_le_bytes());
    body.push(16);
    body.extend_from_slice(&0u32.to_le_bytes());
    body.extend_from_slice(&[0; 4]);
    match IntegerModel::from_bytes(&with_crc(body)) {
        Err(Error::Format { reason, .. }) => assert!(reason.contains("tag 16")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn non_canonical_scales_are_rejected() {
    let m = model();
    let mut records = m.records().to_vec();
    let Record::Linear(r) = &mut records[0] else { panic!() };
    r.alpha = ScaleFactor::new(r.alpha.get() as i64 + 1).unwrap();
    assert!(IntegerModel::new(4, 4, 8, vec![1, 8, 8], 3, records).is_err());
}

#[test]
fn unit_scale_eight_bit_layer_has_the_expected_constants() {
    // acc / (255 * 255) real, times 255 output levels: code = round(acc / 255)
    let p = layer_scale(ScaleFactor::ONE, 8, 8, Some(8)).unwrap();
    assert_eq!((p.numerator(), p.denominator()), (1, 255));
    assert_eq!(requantize(127, &p, RequantMode::ExactRational, 255), 0);
    assert_eq!(requantize(128, &p, RequantMode::ExactRational, 255), 1);
    assert_eq!(requantize(255 * 300, &p, RequantMode::ExactRational, 255), 255);
    assert_eq!(requantize(-9000, &p, RequantMode::ExactRational, 255), 0);
    let logits = layer_scale(ScaleFactor::ONE, 8, 8, None).unwrap();
    assert_eq!((logits.numerator(), logits.denominator()), (1, 65025));
    // 4-bit weights and activations with alpha 3: 3 * 15 / (15 * 15) = 1/5
    let p = layer_scale(ScaleFactor::new(3).unwrap(), 4, 4, Some(4)).unwrap();
    assert_eq!((p.numerator(), p.denominator()), (1, 5));
}

#[test]
fn hand_built_dense_model_infers_by_hand() {
    // one 8-bit dense layer, w = [1, -1] and [1, 1] (codes 255, 0 / 255, 255)
    let w = IntTensor::new(vec![2, 2], vec![255, -255, 255, 255], 8, CodeKind::Centered).unwrap();
    let geometry = Linear::Dense { fan_in: 2, units: 2 };
    let requant = layer_scale(ScaleFactor::ONE, 8, 8, None).unwrap();
    let rec = LinearRecord {
        geometry,
        weight_bits: 8,
        input_bits: 8,
        output_bits: None,
        alpha: ScaleFactor::ONE,
        requant,
        weights: w,
    };
    let m = IntegerModel::new(8, 8, 8, vec![2], 2, vec![Record::Linear(rec)]).unwrap();
    let x = IntTensor::new(vec![1, 2], vec![200u8, 50], 8, CodeKind::Unsigned).unwrap();
    let s = infer(&m, &x, RequantMode::ExactRational).unwrap();
    // real logits (200 - 50) / 255 and 250 / 255, scaled by 65025
    assert_eq!(s.data(), &[150 * 255, 250 * 255]);
}

#[test]
fn all_zero_input_gives_zero_hidden_codes() {
    let s = spec("dense:5 bn clip dense:3 bn", &[4], 3, 4);
    let m = export(&frozen_student(s, 3, 4)).unwrap();
    let x = IntTensor::new(vec![2, 4], vec![0u8; 8], 8, CodeKind::Unsigned).unwrap();
    for mode in [RequantMode::ExactRational, RequantMode::MultiplyShift] {
        let (out, trace) = infer_trace(&m, &x, mode).unwrap();
        assert!(trace.iter().flat_map(|t| t.data()).all(|&v| v == 0));
        assert!(out.data().iter().all(|&v| v == 0));
    }
}

#[test]
fn exact_mode_matches_the_rational_student_code_for_code() {
    let s = spec(NET, &[1, 8, 8], 3, 4);
    let student = frozen_student(s, 11, 3);
    let m = export(&student).unwrap();
    let exact: StudentNet<Exact> = student.cast().unwrap();
    let data = image_data(12, 8, 5);
    let rows: Vec<usize> = (0..12).collect();
    let runner = IntegerRunner::new(&m, RequantMode::ExactRational).unwrap();
    let (_, trace) = runner.trace(&data, &rows).unwrap();
    let (_, acts) = exact.forward(&data.batch::<Exact>(&rows, &[1, 8, 8]).unwrap(), None).unwrap();
    let scales = m.dequant_scales();
    assert_eq!(trace.len(), acts.len());
    for ((t, a), (num, den)) in trace.iter().zip(&acts).zip(scales) {
        assert_eq!(t.shape(), a.output.shape());
        for (&code, &real) in t.data().iter().zip(a.output.data()) {
            assert_eq!(Exact::new(code * num, den), real);
        }
    }
}

#[test]
fn multiply_shift_stays_within_one_code_of_exact() {
    let s = spec(NET, &[1, 8, 8], 3, 4);
    let m = export(&frozen_student(s, 13, 40)).unwrap();
    let data = image_data(40, 8, 9);
    let rows: Vec<usize> = (0..40).collect();
    let x = data.codes(&rows, &[1, 8, 8]).unwrap();
    let dev = mode_deviation(&m, &x).unwrap();
    assert_eq!(dev.len(), 2);
    assert!(dev.iter().all(|&d| d <= 1), "{dev:?}");
}

#[test]
fn static_overflow_check_names_the_layer() {
    let fan_in = 40_000;
    // alpha is coprime to 255, so the logit numerator stays near 2^32
    let alpha = ScaleFactor::new(4_294_967_291).unwrap();
    let rec = LinearRecord {
        geometry: Linear::Dense { fan_in, units: 1 },
        weight_bits: 8,
        input_bits: 8,
        output_bits: None,
        alpha,
        requant: layer_scale(alpha, 8, 8, None).unwrap(),
        weights: IntTensor::new(vec![1, fan_in], vec![1i16; fan_in], 8, CodeKind::Centered).unwrap(),
    };
    let err = IntegerModel::new(8, 8, 8, vec![fan_in], 1, vec![Record::Linear(rec)]).unwrap_err();
    assert!(matches!(err, Error::Overflow { layer: Some(0) }));
}

#[test]
fn export_requires_a_frozen_student() {
    let s = spec("dense:3 bn", &[4], 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = TeacherNet::<f64>::init(s, &mut rng).unwrap();
    let st = StudentNet::from_teacher(&t).unwrap();
    assert!(matches!(export(&st), Err(Error::State(_))));
}

#[test]
fn trace_text_round_trips() {
    let m = model();
    let data = image_data(3, 8, 1);
    let runner = IntegerRunner::new(&m, RequantMode::ExactRational).unwrap();
    let (_, trace) = runner.trace(&data, &[0, 1, 2]).unwrap();
    let text = format_trace(10, &trace);
    let lines = parse_trace(&text).unwrap();
    assert_eq!(lines.len(), 3 * trace.len());
    assert_eq!((lines[0].sample, lines[0].layer), (10, 0));
    assert_eq!(lines[1].shape, trace[1].shape()[1..].to_vec());
    assert!(parse_trace("0 0 2x2 1 2 3").is_err());
}

#[test]
fn quantize_input_rounds_half_away() {
    let x = Tensor::new(vec![1, 3], vec![0.0, 0.5, 1.0]).unwrap();
    assert_eq!(quantize_input(&x, 2).unwrap().data(), &[0, 2, 3]);
    assert!(quantize_input(&Tensor::new(vec![1], vec![1.5]).unwrap(), 2).is_err());
}

const AUDITED: [(&str, &str); 3] = [
    ("infer.rs", include_str!("infer.rs")),
    ("requant.rs", include_str!("requant.rs")),
    ("int_ops.rs", include_str!("../tensor/int_ops.rs")),
];

#[test]
fn inference_sources_contain_no_floating_point() {
    for (name, src) in AUDITED {
        let src = src.split("#[cfg(test)]").next().unwrap();
        for (no, line) in src.lines().enumerate() {
            let code = line.split("//").next().unwrap();
            for word in code.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '.')) {
                let float_literal = word.contains('.')
                    && word.split('.').all(|p| !p.is_empty() && p.chars().next().unwrap().is_ascii_digit());
                let float_type = ["f32", "f64"].iter().any(|t| word == *t || word.ends_with(t) && word.starts_with(|c: char| c.is_ascii_digit()));
                assert!(!float_literal && !float_type, "{name}:{}: {line}", no + 1);
            }
        }
    }
}
