mod support;

use morse_core::ScoreKind;

#[test]
fn full_loss_gradients_match_central_differences() {
    for seed in 0..8 {
        let kind = ScoreKind::ALL[seed as usize % 4];
        let r = support::gradcheck_full_loss(seed, kind);
        assert!(r.checked > 100, "seed {seed}: only {} coordinates checked", r.checked);
        assert!(r.max_rel_error <= 1e-4, "seed {seed} ({kind}): {r:?}");
    }
}
