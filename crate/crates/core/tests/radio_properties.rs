//! Property checks for the channel model: path-loss shape, power summation,
//! attempt-order invariance of the shadowed draws, capture-bias behaviour,
//! and the statistics of the shadowing process itself.

use dsmac_core::radio::{
    power_sum_dbm, resolve_reception, survey_rssi, Position, RadioConfig, RxOutcome, TxAttempt,
};
use dsmac_core::types::NodeId;
use dsmac_core::SimTime;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ORIGIN: Position = Position { x_m: 0.0, y_m: 0.0 };

/// Thermal floor off: capture margins reduce to plain RSSI differences.
fn exact_cfg() -> RadioConfig {
    RadioConfig { noise_floor_dbm: f64::NEG_INFINITY, ..Default::default() }
}

fn attempt(id: u16, x_m: f64, power_dbm: f64, start_us: u64) -> TxAttempt {
    TxAttempt {
        transmitter: NodeId(id),
        position: Position::new(x_m, 0.0),
        power_dbm,
        start: SimTime(start_us),
    }
}

proptest! {
    #[test]
    fn path_loss_is_monotone_and_clamped(
        exponent in 1.5f64..5.0,
        d_lo in 0.01f64..200.0,
        d_hi in 0.01f64..200.0,
    ) {
        let cfg = RadioConfig { path_loss_exponent: exponent, ..Default::default() };
        let (lo, hi) = if d_lo <= d_hi { (d_lo, d_hi) } else { (d_hi, d_lo) };
        prop_assert!(cfg.path_loss_db(lo) <= cfg.path_loss_db(hi) + 1e-12);
        // Below the reference distance the model must not predict gain.
        prop_assert_eq!(cfg.path_loss_db(lo.min(cfg.d0_m)), cfg.path_loss_db(cfg.d0_m));
        prop_assert!(cfg.path_loss_db(lo) >= cfg.ref_loss_db);
    }

    #[test]
    fn rssi_moves_db_for_db_with_transmit_power(
        power in -16.0f64..3.6,
        bump in 0.0f64..5.0,
        distance in 0.5f64..100.0,
    ) {
        let cfg = RadioConfig::default();
        let base = cfg.expected_rssi_dbm(power, distance);
        let raised = cfg.expected_rssi_dbm((power + bump).min(cfg.tx_power_max_dbm), distance);
        let applied = (power + bump).min(cfg.tx_power_max_dbm) - power;
        prop_assert!((raised - base - applied).abs() < 1e-9);
    }

    #[test]
    fn power_sum_is_commutative_and_dominates(a in -100.0f64..0.0, b in -100.0f64..0.0) {
        let ab = power_sum_dbm(a, b);
        prop_assert!((ab - power_sum_dbm(b, a)).abs() < 1e-12);
        prop_assert!(ab >= a.max(b));
        prop_assert!(ab <= a.max(b) + 3.011);
    }

    /// The shadowing field belongs to (transmitter, start), not to the order
    /// the caller assembled the slice in: reversing the attempts under the
    /// same seed yields the identical survey and the identical verdict.
    #[test]
    fn attempt_order_never_changes_the_outcome(
        seed in any::<u64>(),
        sigma in 0.0f64..4.0,
        starts in prop::collection::vec(0u64..30, 2),
    ) {
        let cfg = RadioConfig { shadowing_sigma_db: sigma, ..Default::default() };
        let fwd = vec![
            attempt(5, 3.0, 0.0, starts[0]),
            attempt(9, 4.0, -2.0, starts[1]),
        ];
        let rev: Vec<_> = fwd.iter().rev().copied().collect();
        let listener = NodeId(1);

        let survey_fwd =
            survey_rssi(&cfg, listener, &ORIGIN, &fwd, &mut ChaCha8Rng::seed_from_u64(seed));
        let survey_rev =
            survey_rssi(&cfg, listener, &ORIGIN, &rev, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(survey_fwd, survey_rev);

        let out_fwd =
            resolve_reception(&cfg, listener, &ORIGIN, &fwd, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
        let out_rev =
            resolve_reception(&cfg, listener, &ORIGIN, &rev, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
        prop_assert_eq!(out_fwd, out_rev);
    }
}

#[test]
fn capture_boundary_is_inclusive_at_the_threshold() {
    // Two equal-start frames; the listener sits at the near transmitter's
    // reference distance so margins are pure power differences.
    let cfg = exact_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let near = |p| attempt(1, 1.0, p, 100);
    let far = attempt(2, 1.0, -16.0, 100);
    // Exactly at the 5 dB threshold: decodes.
    let at = resolve_reception(&cfg, NodeId(3), &ORIGIN, &[near(-11.0), far], &mut rng).unwrap();
    assert_eq!(at, RxOutcome::Decoded { transmitter: NodeId(1), rssi_dbm: -51.0 });
    // Half a step under: collision.
    let under =
        resolve_reception(&cfg, NodeId(3), &ORIGIN, &[near(-11.5), far], &mut rng).unwrap();
    assert!(matches!(under, RxOutcome::Collision { .. }), "got {under:?}");
}

#[test]
fn a_finite_noise_floor_raises_the_bar() {
    // Same geometry, but with the interferer only slightly above the floor
    // the floor contribution visibly shifts the boundary.
    let noisy = RadioConfig { noise_floor_dbm: -56.0, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let frames = [attempt(1, 1.0, -11.0, 100), attempt(2, 1.0, -16.0, 100)];
    let out = resolve_reception(&noisy, NodeId(3), &ORIGIN, &frames, &mut rng).unwrap();
    // -51 against power_sum(-56, -56) = -52.99..: margin 1.99 dB < 5 dB.
    assert!(matches!(out, RxOutcome::Collision { .. }), "got {out:?}");
}

#[test]
fn head_start_bias_grows_then_saturates() {
    // Early frame 1 dB short of capturing on power alone; each microsecond of
    // head start is worth 1 dB up to the 5 dB cap.
    let cfg = exact_cfg();
    let verdict = |head_start_us: u64, deficit_db: f64| {
        let frames = [
            attempt(1, 1.0, -10.0 + 5.0 - deficit_db, 100),
            attempt(2, 1.0, -10.0, 100 + head_start_us),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        resolve_reception(&cfg, NodeId(3), &ORIGIN, &frames, &mut rng).unwrap()
    };
    assert!(matches!(verdict(0, 1.0), RxOutcome::Collision { .. }));
    assert!(matches!(verdict(1, 1.0), RxOutcome::Decoded { transmitter: NodeId(1), .. }));
    // 5 µs of bias rescues a 5 dB deficit...
    assert!(matches!(verdict(5, 5.0), RxOutcome::Decoded { transmitter: NodeId(1), .. }));
    // ...but the cap means 6 µs cannot rescue 5.5 dB.
    assert!(matches!(verdict(6, 5.5), RxOutcome::Collision { .. }));
    // The late frame earns no bias: it stays collided even when it starts
    // much later than the early one.
    assert!(matches!(verdict(30, 1.0), RxOutcome::Decoded { transmitter: NodeId(1), .. }));
}

#[test]
fn shadowing_matches_the_configured_distribution() {
    let sigma = 2.83;
    let cfg = RadioConfig { shadowing_sigma_db: sigma, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let frames = [attempt(1, 2.0, 0.0, 0)];
    let mean_expected = cfg.expected_rssi_dbm(0.0, 2.0);
    let n = 20_000usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let survey = survey_rssi(&cfg, NodeId(9), &ORIGIN, &frames, &mut rng);
        let rssi = survey[&NodeId(1)];
        let dev = rssi - mean_expected;
        sum += dev;
        sum_sq += dev * dev;
    }
    let mean = sum / n as f64;
    let std = (sum_sq / n as f64 - mean * mean).sqrt();
    assert!(mean.abs() < 0.1, "sample mean {mean}");
    assert!((std - sigma).abs() < 0.1, "sample std {std}");
}

#[test]
fn only_audible_frames_count_toward_the_two_frame_limit() {
    let cfg = exact_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Third frame is 300 m out: far below sensitivity, so resolution works.
    let frames = [
        attempt(1, 1.0, 0.0, 100),
        attempt(2, 1.5, -6.0, 100),
        attempt(3, 300.0, -16.0, 100),
    ];
    resolve_reception(&cfg, NodeId(9), &ORIGIN, &frames, &mut rng).unwrap();
    // Pull the third frame in close and the model refuses to guess.
    let crowded = [frames[0], frames[1], attempt(3, 2.0, -16.0, 100)];
    let err = resolve_reception(&cfg, NodeId(9), &ORIGIN, &crowded, &mut rng);
    assert!(err.is_err());
}

#[test]
fn silence_below_sensitivity_reads_as_idle() {
    let cfg = exact_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let whisper = [attempt(1, 150.0, -16.0, 0)];
    let out = resolve_reception(&cfg, NodeId(9), &ORIGIN, &whisper, &mut rng).unwrap();
    assert_eq!(out, RxOutcome::Idle);
    assert!(survey_rssi(&cfg, NodeId(9), &ORIGIN, &whisper, &mut rng).is_empty());
}
