mod common;

#[test]
fn teacher_forced_loss_matches_hand_evaluation() {
    for (seed, label) in [(1, ""), (2, "ab"), (5, "Zz0~")] {
        let err = common::decoder_hand_loss_error(seed, label);
        assert!(err < 1e-6, "{label:?}: {err}");
    }
}

#[test]
fn logits_depend_only_on_earlier_inputs() {
    for seed in [3, 4] {
        for at in 0..6 {
            common::causality(seed, at).unwrap();
        }
    }
}

#[test]
fn all_decoder_contracts() {
    common::decoder_contracts().unwrap();
}
