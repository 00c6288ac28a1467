mod common;

#[test]
fn policy_gradients_match_finite_differences() {
    for seed in [1, 2, 3] {
        let (err, tensor) = common::policy_gradient_check(seed, 1e-5);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e} in {tensor}");
    }
}

#[test]
fn gru_matches_scalar_oracle() {
    let err = common::gru_oracle_max_error(100, 11);
    assert!(err < 1e-12, "max abs error {err:e}");
}
