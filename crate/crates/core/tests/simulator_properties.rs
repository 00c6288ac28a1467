mod common;

#[test]
fn conservation_delay_and_fifo_over_many_episodes() {
    let mut packets = 0;
    for seed in 0..1000 {
        let check = common::simulate_random_episode(seed);
        assert!(check.violations.is_empty(), "seed {seed}: {:?}", check.violations);
        packets += check.sent;
    }
    assert!(packets > 100_000);
}

#[test]
fn episodes_are_deterministic() {
    for seed in [0, 17, 999] {
        let a = common::simulate_random_episode(seed);
        let b = common::simulate_random_episode(seed);
        assert_eq!(a.fingerprint, b.fingerprint);
    }
}
