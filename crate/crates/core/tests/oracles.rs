mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{brute_force_assignment, brute_force_ctc, matrix};
use i2c2w::charset::{derive_labels, CharSet, PositionSet};
use i2c2w::losses::{ctc_loss, detection_loss, hungarian_assign};
use i2c2w::model::image_tensor;
use i2c2w::nn::{Mode, Module};
use i2c2w::synthdata::{layout_word, FontAtlas};
use i2c2w::{Matrix, Model64};

fn rows(n: usize, m: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(lo..hi, m), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn assignment_is_never_beaten(cost in (1usize..=7).prop_flat_map(|n| rows(n, n, -5.0, 5.0))) {
        let a = hungarian_assign(&matrix(&cost)).unwrap();
        let ours: f64 = a.perm.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        let mut seen = a.perm.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..cost.len()).collect::<Vec<_>>());
        prop_assert!(ours <= brute_force_assignment(&cost) + 1e-9);
    }

    #[test]
    fn ctc_matches_path_enumeration(
        (logits, target) in (1usize..=3, 1usize..=6).prop_flat_map(|(a, t)| {
            (rows(t, a + 1, -3.0, 3.0), prop::collection::vec(0..a, 0..=t.min(4)))
        })
    ) {
        let blank = logits[0].len() - 1;
        let oracle = brute_force_ctc(&logits, &target, blank);
        match ctc_loss(&matrix(&logits), &target, blank) {
            Ok(l) => {
                prop_assert!(l.loss >= 0.0);
                prop_assert!((l.loss - oracle).abs() < 1e-8, "{} vs {}", l.loss, oracle);
            }
            Err(_) => prop_assert!(oracle.is_infinite()),
        }
    }

    #[test]
    fn losses_ignore_per_row_shifts(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let labels = derive_labels("q7", &CharSet, &PositionSet::new(n)).unwrap();
        let cl = Matrix::<f64>::uniform(n, 37, 3.0, &mut rng);
        let pl = Matrix::<f64>::uniform(n, n + 1, 3.0, &mut rng);
        let sl = Matrix::<f64>::uniform(n, 37, 3.0, &mut rng);
        let perm = vec![2, 0, 1, 3, 4, 5];
        let add = |m: &Matrix<f64>| m.map(|v| v + shift);
        let a = detection_loss(&cl, &pl, &labels, &perm).unwrap();
        let b = detection_loss(&add(&cl), &add(&pl), &labels, &perm).unwrap();
        prop_assert!((a.det_char - b.det_char).abs() < 1e-8 && (a.det_pos - b.det_pos).abs() < 1e-8);
        let t = labels.target();
        let c1 = ctc_loss(&sl, &t, 36).unwrap().loss;
        let c2 = ctc_loss(&add(&sl), &t, 36).unwrap().loss;
        prop_assert!((c1 - c2).abs() < 1e-8);
    }
}

#[test]
fn ctc_is_zero_only_when_all_mass_collapses_to_target() {
    // one-hot path "a a - b" collapses to "ab"
    let big = 200.0;
    let path = [0usize, 0, 2, 1];
    let mut logits = Matrix::<f64>::zeros(4, 3);
    for (t, &c) in path.iter().enumerate() {
        logits[(t, c)] = big;
    }
    assert!(ctc_loss(&logits, &[0, 1], 2).unwrap().loss < 1e-12);
    // "- a - b" also collapses to "ab", so splitting slot 0 costs nothing
    let mut tied = logits.clone();
    tied[(0, 2)] = big;
    assert!(ctc_loss(&tied, &[0, 1], 2).unwrap().loss < 1e-12);
    // "a a - -" does not, so half the mass is lost
    let mut tied = logits.clone();
    tied[(3, 2)] = big;
    let l = ctc_loss(&tied, &[0, 1], 2).unwrap().loss;
    assert!((l - std::f64::consts::LN_2).abs() < 1e-9, "{l}");
}

#[test]
fn encoder_commutes_with_token_permutation_without_positions() {
    let cfg = common::tiny_model_config(8);
    let mut model = Model64::seeded(cfg, 5).unwrap();
    model.i2c.set_positional_encoding(false);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tokens = Matrix::<f64>::uniform(64, 16, 1.0, &mut rng);
    let mut perm: Vec<usize> = (0..64).collect();
    use rand::seq::SliceRandom;
    perm.shuffle(&mut rng);
    let (z, _) = model.i2c.encode_tokens(&tokens, &mut Mode::Eval).unwrap();
    let (zp, _) = model.i2c.encode_tokens(&tokens.select_rows(&perm), &mut Mode::Eval).unwrap();
    assert!(z.select_rows(&perm).max_abs_diff(&zp) < 1e-6);
}

#[test]
fn identical_queries_give_identical_rows() {
    let cfg = common::tiny_model_config(8);
    let mut model = Model64::seeded(cfg, 5).unwrap();
    let row = model.i2c.queries.value.row(0).to_vec();
    for r in 0..8 {
        model.i2c.queries.value.row_mut(r).copy_from_slice(&row);
    }
    let img = image_tensor(&layout_word("hi", &FontAtlas::builtin()).unwrap().image).unwrap();
    let p = model.predict(&img).unwrap();
    for r in 1..8 {
        assert_eq!(p.char_logits.row(r), p.char_logits.row(0));
        assert_eq!(p.pos_logits.row(r), p.pos_logits.row(0));
    }
    assert!(model.num_params() > 0);
}
