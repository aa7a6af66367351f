mod common;

use proptest::prelude::*;
use psan::charset::Charset;
use psan::data::preprocess::{content_width, preprocess};
use psan::data::transform::Transform;
use psan::data::Image;
use psan::eval::word_accuracy;
use psan::nn::{Ctx, Mode};
use psan::{Tape, Tensor};

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_positive_distributions(rows in 1usize..4, cols in 1usize..9, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 - 500.0) / 20.0).collect();
        let mut tape = Tape::new();
        let x = tape.constant(tensor(&[rows, cols], data));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gating_never_amplifies(x in prop::collection::vec(-10.0f64..10.0, 2 * 9), sm in prop::collection::vec(0.0f64..=1.0, 9)) {
        let mut tape = Tape::new();
        let xv = tape.constant(tensor(&[1, 2, 3, 3], x.clone()));
        let sv = tape.constant(tensor(&[1, 1, 3, 3], sm));
        let y = tape.gate_multiply(xv, sv).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(&x) {
            prop_assert!(o.abs() <= i.abs());
        }
    }

    #[test]
    fn pooled_maxima_dominate_their_windows(k in prop::sample::select(vec![2usize, 4]), hb in 1usize..4, wb in 1usize..4, seed in any::<u64>()) {
        let (h, w) = (k * hb, k * wb);
        let data: Vec<f64> = (0..h * w).map(|i| ((seed ^ (i as u64 * 2654435761)) % 997) as f64 / 997.0).collect();
        let mut tape = Tape::new();
        let x = tape.constant(tensor(&[1, 1, h, w], data.clone()));
        let y = tape.maxpool2d(x, k, k).unwrap();
        let pooled = tape.value(y).data();
        // Nearest-neighbour upsampling back to h×w.
        for yy in 0..h {
            for xx in 0..w {
                prop_assert!(pooled[(yy / k) * wb + xx / k] >= data[yy * w + xx]);
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_output_weighting(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let gen = |s: u64, n: usize| (0..n).map(|i| (((s ^ i as u64).wrapping_mul(6364136223846793005) >> 33) % 2001) as f64 / 1000.0 - 1.0).collect::<Vec<_>>();
        let x = tensor(&[1, 2, 5, 5], gen(seed, 50));
        let w = tensor(&[3, 2, 3, 3], gen(seed.wrapping_add(1), 54));
        let r1 = gen(seed.wrapping_add(2), 3 * 9);
        let r2 = gen(seed.wrapping_add(3), 3 * 9);
        let grad = |r: Vec<f64>| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.constant(w.clone());
            let y = tape.conv2d(xv, wv, None, 2, 1).unwrap();
            let rv = tape.constant(tensor(&[1, 3, 3, 3], r));
            let p = tape.mul(y, rv).unwrap();
            let s = tape.sum(p).unwrap();
            tape.backward(s).unwrap().get(xv).unwrap().to_vec()
        };
        let mixed: Vec<f64> = r1.iter().zip(&r2).map(|(u, v)| a * u + b * v).collect();
        let (g1, g2, gm) = (grad(r1), grad(r2), grad(mixed));
        for i in 0..gm.len() {
            prop_assert!((gm[i] - (a * g1[i] + b * g2[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn transforms_keep_the_original_as_a_sub_rectangle(h in 1usize..14, w in 1usize..14, seed in any::<u64>(), t in prop::sample::select(Transform::ALL.to_vec())) {
        let gray: Vec<f32> = (0..h * w).map(|i| ((i as u64 * 7919 + seed) % 251) as f32 / 251.0).collect();
        let img = Image::from_gray(h, w, &gray).unwrap();
        let out = t.apply(&img, seed);
        prop_assert!(out.height >= h && out.width >= w);
        prop_assert!(common::find_sub_rect(&out, &img).is_some());
    }

    #[test]
    fn preprocess_stays_in_range_and_pads_with_zero(h in 1usize..80, w in 1usize..300, v in 0.0f32..=1.0) {
        let img = Image::filled(3, h, w, v);
        let out = preprocess(&img);
        prop_assert_eq!(out.shape(), &[3, 32, 128]);
        let cw = content_width(h, w);
        prop_assert!((8..=128).contains(&cw));
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..128 {
                    let p = out.at(&[c, y, x]);
                    prop_assert!((-1.0..=1.0).contains(&p));
                    if x >= cw {
                        prop_assert_eq!(p, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn greedy_output_never_exceeds_max_length(seed in 0u64..500, max_length in 2usize..8) {
        let t = common::tiny_decoder(seed, max_length);
        let mut ctx = Ctx::new(&t.store, Mode::Eval);
        let data: Vec<f64> = (0..2 * max_length * 4).map(|i| ((seed + i as u64) % 13) as f64 / 3.0 - 2.0).collect();
        let fmh = ctx.tape.constant(tensor(&[2, max_length, 4], data));
        let out = t.dec.greedy(&mut ctx, fmh).unwrap();
        prop_assert!(out.iter().all(|s| s.len() <= max_length));
        prop_assert!(out.iter().flatten().all(|&c| c < Charset::NUM_CHARS));
    }

    #[test]
    fn charset_encoding_round_trips(label in "[!-~]{0,20}") {
        let cs = Charset::new();
        prop_assert_eq!(cs.decode(&cs.encode(&label).unwrap()), label);
    }

    #[test]
    fn word_accuracy_ignores_case(label in "[a-zA-Z0-9]{1,10}") {
        let acc = word_accuracy(&[label.to_uppercase()], &[label.to_lowercase()]);
        prop_assert_eq!(acc, 1.0);
    }
}
