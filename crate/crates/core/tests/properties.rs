use proptest::prelude::*;

use vqrefine::evalharness::auc;
use vqrefine::numkernel::{kernels, Tensor};
use vqrefine::refiner::{loss_cosine, nn_decode};
use vqrefine::synthdata::{gen_episode, GridImage, GridSpec, Task};
use vqrefine::tokenizer::{assemble_sequence, detokenize_grid, split_sequence, tokenize_grid, SequenceLayout};

fn finite(range: f64) -> impl Strategy<Value = f64> {
    -range..range
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(finite(50.0), 1..40), cut in 1usize..40) {
        let visible = cut.min(row.len());
        let mut r = row.clone();
        kernels::softmax_prefix(&mut r, visible);
        let total: f64 = r.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(r[visible..].iter().all(|&p| p == 0.0));
        prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn layernorm_output_is_centred(row in prop::collection::vec(finite(100.0), 2..64)) {
        let d = row.len();
        let spread = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - row.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let (g, b) = (vec![1.0; d], vec![0.0; d]);
        let mut out = vec![0.0; d];
        kernels::layernorm_row(&row, &g, &b, &mut out, None);
        let mean = out.iter().sum::<f64>() / d as f64;
        let var = out.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        prop_assert!(mean.abs() <= 1e-10);
        prop_assert!(var <= 1.0 + 1e-9);
    }

    #[test]
    fn tokenizer_is_a_bijection(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let cells: Vec<u32> = (0..h * w).map(|i| ((seed >> (i % 60)) as u32 ^ i as u32) % 32).collect();
        let img = GridImage::new(h, w, cells.clone()).unwrap();
        let toks = tokenize_grid(&img);
        prop_assert_eq!(&*toks, &cells[..]);
        prop_assert_eq!(detokenize_grid(&toks, h, w, 32).unwrap(), img);
    }

    #[test]
    fn decode_ignores_positive_row_scales(
        rows in prop::collection::vec(prop::collection::vec(finite(3.0), 6), 1..12),
        scales in prop::collection::vec(0.01f64..100.0, 12),
        seed in 0u64..1000,
    ) {
        let embed = Tensor::from_rows(
            &(0..10).map(|v| (0..6).map(|j| (((v * 7 + j * 3) as u64 + seed) % 11) as f64 - 5.0).collect()).collect::<Vec<Vec<f64>>>(),
        ).unwrap();
        prop_assume!((0..10).all(|v| embed.row(v).iter().any(|&x| x != 0.0)));
        prop_assume!(rows.iter().all(|r| r.iter().any(|&x| x.abs() > 1e-6)));
        let e = Tensor::from_rows(&rows).unwrap();
        let scaled = Tensor::from_rows(
            &rows.iter().zip(&scales).map(|(r, s)| r.iter().map(|x| x * s).collect()).collect::<Vec<Vec<f64>>>(),
        ).unwrap();
        prop_assert_eq!(nn_decode(&e, &embed).unwrap(), nn_decode(&scaled, &embed).unwrap());
    }

    #[test]
    fn cosine_loss_is_bounded(
        a in prop::collection::vec(prop::collection::vec(finite(5.0), 4), 1..10),
        b in prop::collection::vec(prop::collection::vec(finite(5.0), 4), 1..10),
    ) {
        let n = a.len().min(b.len());
        prop_assume!(a[..n].iter().chain(&b[..n]).all(|r| r.iter().any(|&x| x.abs() > 1e-6)));
        let ta = Tensor::from_rows(&a[..n]).unwrap();
        let tb = Tensor::from_rows(&b[..n]).unwrap();
        let l = loss_cosine(&ta, &tb).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l));
        prop_assert!(loss_cosine(&ta, &ta).unwrap().abs() < 1e-12);
    }

    #[test]
    fn auc_matches_brute_force_trapezoid(curve in prop::collection::vec(0.0f64..2.0, 2..100)) {
        let n = curve.len();
        let mut area = 0.0;
        for t in 1..n {
            area += 0.5 * (curve[t - 1] + curve[t]);
        }
        prop_assert!((auc(&curve) - area / (n - 1) as f64).abs() < 1e-12);
    }

    #[test]
    fn sequences_split_back_into_episodes(k in 1usize..5, seed in any::<u64>()) {
        let spec = GridSpec::default();
        let ep = gen_episode(Task::ALL[(seed % 3) as usize], k, seed, &spec).unwrap();
        let (input, target) = assemble_sequence(&ep);
        let layout = SequenceLayout { k, tokens_per_image: 64, with_target: true };
        let grids = split_sequence(&input.concat(&target), layout, 8, 8, 32).unwrap();
        let expected: Vec<GridImage> = ep.images().cloned().collect();
        prop_assert_eq!(grids, expected);
    }
}
