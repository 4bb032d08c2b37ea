mod common;

use common::{random_tensor, rng};
use proptest::prelude::*;
use stscnn::io::{
    decode_tensor, encode_image, encode_tensor, read_mask, read_tensor, write_mask, write_tensor, AnyTensor, ImageBands,
};
use stscnn::masks::gen_slcoff_mask;
use stscnn::masks::SlcOffGeometry;
use stscnn::network::DataRange;
use stscnn::{Shape, StsError, Tensor4};

fn field_of(e: StsError) -> String {
    match e {
        StsError::Format { field, .. } => field,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn two_by_two_f64_file_is_58_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.stsr");
    let t = Tensor4::new(Shape::new(1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
    write_tensor(&path, &t).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 58);
    assert_eq!(read_tensor(&path).unwrap(), AnyTensor::F64(t));
}

#[test]
fn both_precisions_round_trip_bitwise() {
    let mut r = rng(12);
    let t = random_tensor(Shape::new(2, 3, 5, 4), &mut r);
    assert_eq!(
        decode_tensor(&encode_tensor(&t).unwrap()).unwrap(),
        AnyTensor::F64(t.clone())
    );
    let f: Tensor4<f32> = t.cast();
    let back = decode_tensor(&encode_tensor(&f).unwrap()).unwrap();
    assert_eq!(back.dtype(), stscnn::tensor::DType::F32);
    assert_eq!(back.into_real::<f32>(), f);
}

#[test]
fn truncated_payload_is_a_length_error() {
    let t = Tensor4::<f64>::zeros(Shape::new(1, 1, 2, 2));
    let b = encode_tensor(&t).unwrap();
    assert_eq!(field_of(decode_tensor(&b[..b.len() - 3]).unwrap_err()), "payload");
    assert_eq!(field_of(decode_tensor(&b[..10]).unwrap_err()), "header");
}

#[test]
fn wrong_magic_and_version_are_named() {
    let t = Tensor4::<f64>::zeros(Shape::new(1, 1, 1, 1));
    let mut b = encode_tensor(&t).unwrap();
    b[0] = b'X';
    assert_eq!(field_of(decode_tensor(&b).unwrap_err()), "magic");
    let mut b = encode_tensor(&t).unwrap();
    b[4] = 2;
    assert_eq!(field_of(decode_tensor(&b).unwrap_err()), "version");
    let mut b = encode_tensor(&t).unwrap();
    b[9] = 3;
    assert_eq!(field_of(decode_tensor(&b).unwrap_err()), "ndim");
}

#[test]
fn mask_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.stsr");
    let m = gen_slcoff_mask(40, 50, &SlcOffGeometry::default()).unwrap();
    write_mask(&path, &m).unwrap();
    assert_eq!(read_mask(&path).unwrap(), m);
}

#[test]
fn constant_images_export_to_extremes() {
    let s = Shape::new(1, 1, 3, 2);
    let lo = encode_image(&Tensor4::<f64>::zeros(s), ImageBands::Gray(0), DataRange::default()).unwrap();
    assert_eq!(&lo[..11], b"P5\n2 3\n255\n");
    assert!(lo[11..].iter().all(|&v| v == 0));
    let hi = encode_image(&Tensor4::full(s, 1.0f64), ImageBands::Gray(0), DataRange::default()).unwrap();
    assert!(hi[11..].iter().all(|&v| v == 255));
}

#[test]
fn ramp_matches_golden_bytes() {
    let t = Tensor4::new(Shape::new(1, 1, 2, 2), vec![0.0f64, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
    let got = encode_image(&t, ImageBands::Gray(0), DataRange::default()).unwrap();
    let mut golden = b"P5\n2 2\n255\n".to_vec();
    golden.extend_from_slice(&[0, 85, 170, 255]);
    assert_eq!(got, golden);
}

#[test]
fn rgb_interleaves_bands() {
    let t = Tensor4::from_fn(Shape::new(1, 3, 1, 2), |_, c, _, x| if c == x { 1.0f64 } else { 0.0 });
    let got = encode_image(&t, ImageBands::Rgb([0, 1, 2]), DataRange::default()).unwrap();
    assert_eq!(&got[..11], b"P6\n2 1\n255\n");
    assert_eq!(&got[11..], &[255, 0, 0, 0, 255, 0]);
    assert!(encode_image(&t, ImageBands::Gray(3), DataRange::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_tensors_round_trip(seed in any::<u64>(), n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let mut r = rng(seed);
        let t = random_tensor(Shape::new(n, c, h, w), &mut r);
        let bytes = encode_tensor(&t).unwrap();
        prop_assert_eq!(bytes.len(), 26 + 8 * n * c * h * w);
        prop_assert_eq!(decode_tensor(&bytes).unwrap(), AnyTensor::F64(t));
    }
}
