use poseforge::geometry::{exposed_side, half_indices, Point2};
use poseforge::pipeline::data::generate_records;
use poseforge::pipeline::{evaluate, pas_step, prepare, preprocess, train_step, Config, TrainState};
use poseforge::synthdata::{identity_params, render_face, Pose, Split, StyleParams};

fn bbox(points: &[Point2], idx: &[usize]) -> [f64; 4] {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for &k in idx {
        let [x, y] = points[k];
        b = [b[0].min(x), b[1].min(y), b[2].max(x), b[3].max(y)];
    }
    b
}

#[test]
fn frontal_to_forty_degrees_aligns_exposed_side() {
    let cfg = Config::default();
    let (h, w) = (32, 32);
    for id in 0..4 {
        let params = identity_params(7, id);
        let style = StyleParams::neutral();
        let i = render_face(&params, &style, Pose::from_degrees(0.0, 0.0, 0.0).unwrap(), h, w).unwrap();
        let j = render_face(&params, &style, Pose::from_degrees(40.0, 0.0, 0.0).unwrap(), h, w).unwrap();
        let out = preprocess(&i.image, &i.landmarks, &j.landmarks, &cfg.fit_groups, cfg.warp_fill).unwrap();
        let side = exposed_side(&j.landmarks);
        let idx = half_indices(side);
        let got = bbox(&out.ldmk2d_tf, &idx);
        let want = bbox(&j.landmarks.to_2d(), &idx);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1.0, "identity {id}: {got:?} vs {want:?}");
        }
        assert_eq!(out.i_tf.height(), h);
    }
}

fn small(cfg: Config) -> Config {
    Config {
        resolution: 32,
        n_ids: 8,
        n_test_pairs: 8,
        ..cfg
    }
}

#[test]
fn sampler_loss_falls_on_a_fixed_batch() {
    let cfg = small(Config {
        n_pairs: 4,
        ..Config::default()
    });
    let mut state = TrainState::new(cfg.clone()).unwrap();
    let records = generate_records(&cfg.dataset(), Split::Train, 4).unwrap();
    let data = prepare(&state, &records).unwrap();
    let batch: Vec<_> = data.iter().collect();
    let first = pas_step(&mut state, &batch).unwrap();
    let mut last = first.clone();
    for _ in 1..=200 {
        last = pas_step(&mut state, &batch).unwrap();
    }
    assert!(
        last.total() < first.total(),
        "sampler loss {} -> {}",
        first.total(),
        last.total()
    );
}

#[test]
fn joint_training_lowers_held_out_l1() {
    let desk = Config::parse(include_str!("../../../configs/desk.conf")).unwrap();
    let cfg = small(Config {
        pretrain_steps: 0,
        joint_steps: 300,
        n_pairs: 256,
        ..desk
    });
    let mut state = TrainState::new(cfg.clone()).unwrap();
    let train = prepare(&state, &generate_records(&cfg.dataset(), Split::Train, cfg.n_pairs).unwrap()).unwrap();
    let test = prepare(&state, &generate_records(&cfg.dataset(), Split::Test, cfg.n_test_pairs).unwrap()).unwrap();
    let before = evaluate(&state, &test).unwrap();
    for _ in 0..300 {
        let log = train_step(&mut state, &train).unwrap();
        assert!(log.gen.is_finite() && log.disc.is_finite());
    }
    let after = evaluate(&state, &test).unwrap();
    assert!(
        after.l1_edit < before.l1_edit,
        "held-out L1 {} -> {}",
        before.l1_edit,
        after.l1_edit
    );
}
