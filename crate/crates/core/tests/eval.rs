use jdnd::eval::{bpp, evaluate_pairs, export_rd, mean_psnr, mse, psnr, read_rd, RdPoint};
use jdnd::noise::{pairs_from_images, NoiseParams};
use jdnd::pipeline::encode_image;
use jdnd::synth::{synthetic_image, synthetic_set};
use jdnd::{Codec, ImageTensor, ModelConfig};
use proptest::prelude::*;

fn point(bpp: f64, psnr: f64, mode: &str) -> RdPoint {
    RdPoint { image: "img".into(), mode: mode.into(), lambda: 1, bpp, psnr }
}

#[test]
fn single_point_gives_header_and_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rd.csv");
    let plot = export_rd(&[point(0.25, 31.5, "standard")], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().collect::<Vec<_>>(), vec!["image,mode,lambda,bpp,psnr", "img,standard,1,0.25,31.5"]);
    assert!(std::fs::read_to_string(plot).unwrap().contains("<circle"));
}

#[test]
fn rows_sorted_by_bpp_and_reimported_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rd.csv");
    let pts = vec![point(0.9, 33.0, "denoise"), point(0.1 + 0.2, 28.123_456_789_012_345, "standard"), point(0.5, 30.0, "denoise")];
    export_rd(&pts, &path).unwrap();
    let back = read_rd(&path).unwrap();
    assert_eq!(back.iter().map(|p| p.bpp).collect::<Vec<_>>(), vec![0.1 + 0.2, 0.5, 0.9]);
    assert_eq!(back[0], pts[1]);
}

#[test]
fn mse_and_psnr_agree() {
    let a = synthetic_image(16, 16, 1);
    let b = synthetic_image(16, 16, 2);
    let m = mse(&a, &b).unwrap();
    assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-12);
}

#[test]
fn bpp_matches_the_encoder_report() {
    let codec = Codec::new(&ModelConfig::toy(), 0).unwrap();
    let enc = encode_image(&codec, &synthetic_image(64, 64, 3)).unwrap();
    assert!((bpp(&enc.bitstream) - enc.bpp).abs() < 1e-9);
    assert!((enc.bpp - 8.0 * enc.bitstream.total_bytes() as f64 / 4096.0).abs() < 1e-9);
}

#[test]
fn pair_evaluation_scores_both_modes_against_clean() {
    let codec = Codec::new(&ModelConfig::toy(), 0).unwrap();
    let pairs = pairs_from_images(&synthetic_set(2, 64, 64, 4), &NoiseParams::default_profile(1), 64, 3).unwrap();
    let pts = evaluate_pairs(&codec, &pairs).unwrap();
    assert_eq!(pts.len(), 6);
    assert_eq!(pts.iter().filter(|p| p.mode == "denoise").count(), 3);
    for pair in pts.chunks(2) {
        assert_eq!(pair[0].bpp, pair[1].bpp);
        assert_eq!(pair[0].image, pair[1].image);
        assert!(pair[0].bpp > 0.0 && pair[0].psnr.is_finite());
    }
    let mean = pts.iter().filter(|p| p.mode == "standard").map(|p| p.psnr).sum::<f64>() / 3.0;
    assert!((mean_psnr(&pts, "standard").unwrap() - mean).abs() < 1e-12);
    assert_eq!(mean_psnr(&pts, "other"), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn psnr_is_symmetric_and_capped(seed in 0u64..1000, v in 0.0f32..1.0) {
        let a = synthetic_image(8, 8, seed);
        let b = ImageTensor::filled(8, 8, v).unwrap();
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!(psnr(&a, &b).unwrap() <= 100.0);
    }
}
