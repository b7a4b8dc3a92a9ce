use sreclip_core::RunConfig;
use sreclip_web::{demo_spec, h_score, Session};

#[test]
fn bad_override_is_rejected_before_training() {
    let config = RunConfig {
        tokens: 5,
        ..RunConfig::default()
    };
    assert!(Session::create(&demo_spec(0.3, 0.15, 0), config).is_err());
}

#[test]
fn sessions_with_the_same_seed_agree() {
    let run = || {
        let mut s = Session::create(&demo_spec(0.3, 0.15, 2), RunConfig::default()).unwrap();
        (0..3).map(|_| s.train_epoch().unwrap().to_string()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn demo_training_improves_on_zero_shot() {
    let mut s = Session::create(
        &demo_spec(0.3, 0.15, 0),
        RunConfig {
            batch_size: 32,
            ..RunConfig::default()
        },
    )
    .unwrap();
    let zero = s.explore().unwrap()["zero_shot"]["h"].as_f64().unwrap();
    let mut last = 0.0;
    for _ in 0..25 {
        last = s.train_epoch().unwrap()["report"]["h"].as_f64().unwrap();
    }
    assert!(last >= zero + 5.0, "trained {last} vs zero-shot {zero}");
    assert_eq!(h_score(0.0, 0.0), 0.0);
}
