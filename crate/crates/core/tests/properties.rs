//! Property tests over the public API.

use proptest::prelude::*;

use dxsep::evaluation::{classify_liver_at, otsu_threshold, LiverClass};
use dxsep::io::{decode_tensor, difference_to_gray, encode_tensor, ff_to_gray, StoredTensor};
use dxsep::signal::{clamp_ff, fat_modulation, synthesize_echo, water_fat_per_echo};
use dxsep::{AcquisitionConfig, EchoSubset, FatSpectrum, Tensor, VoxelModel};
use num_complex::Complex64;

fn finite_f64() -> impl Strategy<Value = f64> {
    any::<u64>().prop_map(f64::from_bits).prop_filter("finite", |v| v.is_finite())
}

proptest! {
    #[test]
    fn tensor_codec_is_bit_exact(shape in prop::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let mut state = seed | 1;
        let data: Vec<f64> = (0..n)
            .map(|_| loop {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                let v = f64::from_bits(state);
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        let t = Tensor::from_vec(shape.clone(), data.clone()).unwrap();
        let back = decode_tensor(&encode_tensor(&t), std::path::Path::new("mem")).unwrap();
        match back {
            StoredTensor::F64(b) => {
                prop_assert_eq!(b.shape(), shape.as_slice());
                prop_assert!(b.data().iter().zip(&data).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            StoredTensor::F32(_) => prop_assert!(false, "dtype changed"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected(len in 1usize..20, cut in 1usize..8) {
        let t = Tensor::<f32>::full(&[len], 1.5);
        let bytes = encode_tensor(&t);
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(decode_tensor(&bytes[..bytes.len() - cut], std::path::Path::new("mem")).is_err());
    }

    #[test]
    fn gray_levels_are_monotone(a in -0.5f64..1.5, b in -0.5f64..1.5) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(ff_to_gray(lo) <= ff_to_gray(hi));
        prop_assert!(difference_to_gray(lo - 0.5) <= difference_to_gray(hi - 0.5));
    }

    #[test]
    fn otsu_ignores_uniform_count_scaling(hist in prop::collection::vec(0u64..500, 256), k in 1u64..50) {
        prop_assume!(hist.iter().any(|&h| h > 0));
        let scaled: Vec<u64> = hist.iter().map(|&h| h * k).collect();
        prop_assert_eq!(otsu_threshold(&hist).unwrap(), otsu_threshold(&scaled).unwrap());
    }

    #[test]
    fn clamped_ff_stays_in_unit_interval(raw in prop::collection::vec(finite_f64(), 1..64)) {
        let n = raw.len();
        let map = clamp_ff(&raw, 1, n).unwrap();
        prop_assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn per_echo_inverse_recovers_magnitudes(
        w in 0.01f64..2.0,
        f in 0.01f64..2.0,
        phase in -3.0f64..3.0,
        omega in -1500.0f64..1500.0,
        im_theta in -0.2f64..0.2,
        echo in 1usize..=5,
    ) {
        let acq = AcquisitionConfig::default();
        let sp = FatSpectrum::default();
        let v = VoxelModel { water: w, fat: f, phase, off_resonance: omega, r2star: 0.0, theta: Complex64::new(0.0, im_theta) };
        let s = synthesize_echo(&v, echo, &sp, &acq);
        let a = fat_modulation(&sp, acq.echo_time(echo), &acq);
        let (rw, rf) = water_fat_per_echo(s, a, v.fat_fraction()).unwrap();
        prop_assert!((rw - w).abs() <= 1e-10 * w.max(1.0));
        prop_assert!((rf - f).abs() <= 1e-10 * f.max(1.0));
    }

    #[test]
    fn echo_subset_text_round_trips(family in 0usize..3, count in 1usize..4) {
        let s = match family {
            0 => EchoSubset::all(count),
            1 => EchoSubset::odd(count),
            _ => EchoSubset::even(count),
        };
        prop_assert_eq!(s.to_string().parse::<EchoSubset>().unwrap(), s);
        // odd:1 and all:1 name the same echo, so compare index sets
        prop_assert_eq!(EchoSubset::from_indices(&s.indices()).unwrap().indices(), s.indices());
    }

    #[test]
    fn liver_class_flips_once_at_cutoff(ff in 0.0f64..0.3, cutoff in 0.01f64..0.2) {
        let c = classify_liver_at(ff, cutoff);
        prop_assert_eq!(c == LiverClass::Fatty, ff > cutoff);
    }
}
