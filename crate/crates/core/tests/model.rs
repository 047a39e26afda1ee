mod common;

use mesm::data::synth::{synth_sample, CLS, UNK};
use mesm::data::ModalitySample;
use mesm::model::{fuse, Modalities, Modality, Model, RunConfig};
use mesm::ops::conv2d;
use mesm::optim::{Adam, AdamConfig};
use mesm::{Error, FlopsLedger, Graph, Tensor};

fn tiny(extra: &str) -> RunConfig {
    common::config(common::TINY, extra)
}

fn sample(cfg: &RunConfig, class: usize, seed: u64) -> ModalitySample {
    synth_sample(class, seed, &cfg.data).unwrap()
}

fn mods(s: &str) -> Modalities {
    s.parse().unwrap()
}

fn logits_of(scores: &mesm::model::ClassScores, m: Modality) -> Vec<f64> {
    scores.per_modality.iter().find(|(x, _)| *x == m).unwrap().1.clone()
}

#[test]
fn stem_keeps_extents_and_maps_zero_to_zero() {
    let model = Model::new(tiny("mode = fe2e\n")).unwrap();
    let k = model.params.get("visual/stem/k").unwrap();
    let b = model.params.get("visual/stem/b").unwrap();
    assert!(b.data().iter().all(|&v| v == 0.0));
    let (y, _) = conv2d(&Tensor::zeros(vec![3, 2, 8, 8]), k, b, 1).unwrap();
    assert_eq!(y.shape(), &[2, 2, 8, 8]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn frame_order_changes_the_visual_encoding() {
    let cfg = tiny("mode = fe2e\n");
    let model = Model::new(cfg.clone()).unwrap();
    let mut s = sample(&cfg, 0, 1);
    s.frames.push(sample(&cfg, 1, 2).frames[0].clone());
    let (a, _) = model.predict(&s, mods("V")).unwrap();
    s.frames.swap(0, 1);
    let (b, _) = model.predict(&s, mods("V")).unwrap();
    assert_ne!(logits_of(&a, Modality::Visual), logits_of(&b, Modality::Visual));
}

#[test]
fn out_of_vocabulary_tokens_read_as_unknown() {
    let cfg = tiny("mode = fe2e\n");
    let model = Model::new(cfg.clone()).unwrap();
    let mut s = sample(&cfg, 0, 1);
    s.tokens = vec![CLS, 5, 10_000];
    let (a, _) = model.predict(&s, mods("T")).unwrap();
    s.tokens = vec![CLS, 5, UNK];
    let (b, _) = model.predict(&s, mods("T")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn cls_only_text_is_deterministic() {
    let cfg = tiny("mode = fe2e\n");
    let model = Model::new(cfg.clone()).unwrap();
    let mut s = sample(&cfg, 0, 1);
    s.tokens = vec![CLS];
    let (a, _) = model.predict(&s, mods("T")).unwrap();
    let (b, _) = model.predict(&s, mods("T")).unwrap();
    assert_eq!(a, b);
    assert!(a.fused.iter().all(|v| v.is_finite()));
}

#[test]
fn same_seed_gives_identical_models_and_trajectories() {
    let cfg = tiny("mode = mesm\ntop_p = 0.5\n");
    let batch: Vec<ModalitySample> = (0..3).map(|i| sample(&cfg, i % 2, i as u64)).collect();
    let refs: Vec<&ModalitySample> = batch.iter().collect();
    let run = || {
        let mut model = Model::new(cfg.clone()).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), &model.params);
        let losses: Vec<f64> = (0..3)
            .map(|_| {
                model
                    .train_step(&mut adam, &refs, &[1.0, 1.0], Modalities::all(), &mut FlopsLedger::new())
                    .unwrap()
            })
            .collect();
        (model.predict(&batch[0], Modalities::all()).unwrap().0, losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert!(la.iter().all(|l| l.is_finite()));
}

#[test]
fn absent_modality_receives_no_gradient() {
    let mut model = Model::new(tiny("mode = fe2e\n")).unwrap();
    let s = sample(&model.config, 1, 4);
    model
        .accumulate_gradients(&[&s], &[1.0, 1.0], mods("TV"), &mut FlopsLedger::new())
        .unwrap();
    let mut audio = 0;
    for (name, p) in model.params.iter() {
        if name.starts_with("audio/") {
            audio += 1;
            assert!(p.grad.data().iter().all(|&g| g == 0.0), "{name}");
        }
    }
    assert!(audio > 0);
    let fusion = model.params.grad("fusion/w").unwrap();
    assert_eq!(fusion.data()[Modality::Audio.index()], 0.0);
    assert_ne!(fusion.data()[Modality::Visual.index()], 0.0);
    let text_embed = model.params.grad("text/embed").unwrap();
    assert!(text_embed.data().iter().any(|&g| g != 0.0));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut model = Model::new(tiny("mode = mesm\ntop_p = 0.5\n")).unwrap();
    let before = model.params.clone();
    let s = sample(&model.config, 0, 9);
    let mut adam = Adam::new(AdamConfig::with_lr(0.0), &model.params);
    for _ in 0..3 {
        model
            .train_step(&mut adam, &[&s], &[1.0, 1.0], Modalities::all(), &mut FlopsLedger::new())
            .unwrap();
    }
    for (name, p) in before.iter() {
        assert_eq!(&p.value, model.params.get(name).unwrap(), "{name}");
    }
}

#[test]
fn repeated_batch_loss_goes_down() {
    for extra in ["mode = fe2e\n", "mode = mesm\ntop_p = 0.5\n"] {
        let mut model = Model::new(tiny(extra)).unwrap();
        let batch: Vec<ModalitySample> = (0..4).map(|i| sample(&model.config, i % 2, 100 + i as u64)).collect();
        let refs: Vec<&ModalitySample> = batch.iter().collect();
        let mut adam = Adam::new(AdamConfig::with_lr(0.003), &model.params);
        let mut losses = Vec::new();
        for _ in 0..50 {
            losses.push(
                model
                    .train_step(&mut adam, &refs, &[1.0, 1.0], Modalities::all(), &mut FlopsLedger::new())
                    .unwrap(),
            );
        }
        assert!(losses[49] < losses[0], "{extra}: {} -> {}", losses[0], losses[49]);
    }
}

#[test]
fn fusion_averages_with_softmax_weights() {
    let model = Model::new(tiny("mode = fe2e\n")).unwrap();
    let fused = |store: &mesm::ParamStore, rows: &[(Modality, [f64; 2])]| {
        let mut g = Graph::new(store);
        let vars: Vec<(Modality, mesm::Var)> = rows
            .iter()
            .map(|(m, v)| (*m, g.constant(Tensor::new(vec![2], v.to_vec()).unwrap())))
            .collect();
        let f = fuse(&mut g, &vars).unwrap();
        g.value(f).data().to_vec()
    };
    let three = [
        (Modality::Text, [1.0, 0.0]),
        (Modality::Audio, [0.0, 1.0]),
        (Modality::Visual, [1.0, 1.0]),
    ];
    let out = fused(&model.params, &three);
    assert!((out[0] - 2.0 / 3.0).abs() < 1e-12 && (out[1] - 2.0 / 3.0).abs() < 1e-12);

    assert_eq!(fused(&model.params, &[(Modality::Audio, [0.3, -2.0])]), vec![0.3, -2.0]);

    let mut shifted = model.params.clone();
    shifted.set("fusion/w", Tensor::new(vec![3], vec![7.5, 7.5, 7.5]).unwrap()).unwrap();
    let moved = fused(&shifted, &three);
    assert!((moved[0] - out[0]).abs() < 1e-12 && (moved[1] - out[1]).abs() < 1e-12);
}

#[test]
fn bce_at_zero_logit_is_ln_two() {
    let store = mesm::ParamStore::new();
    let mut g = Graph::new(&store);
    let l = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
    let loss = g.weighted_bce(l, &[1.0], &[1.0]).unwrap();
    assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn stem_costs_match_across_modes_and_sparse_blocks_skip_work() {
    let dense = Model::new(tiny("mode = fe2e\n")).unwrap();
    let sparse = Model::new(tiny("mode = mesm\ntop_p = 0.3\n")).unwrap();
    let s = sample(&dense.config, 1, 3);
    let (_, ld) = dense.predict(&s, Modalities::all()).unwrap();
    let (_, ls) = sparse.predict(&s, Modalities::all()).unwrap();
    for m in ["audio/stem", "visual/stem"] {
        assert_eq!(ld.get(m), ls.get(m), "{m}");
    }
    let blocks = ls.report_filtered(|l| l.contains("/block")).total;
    let dense_blocks = ld.report_filtered(|l| l.contains("/block")).total;
    assert_eq!(blocks.dense, dense_blocks.dense);
    assert!(blocks.executed < blocks.dense);
}

#[test]
fn sparse_model_needs_text() {
    let model = Model::new(tiny("mode = mesm\n")).unwrap();
    let s = sample(&model.config, 0, 0);
    assert!(matches!(model.predict(&s, mods("AV")), Err(Error::InvalidArgument(_))));
}

#[test]
fn non_finite_loss_names_the_layer() {
    let mut model = Model::new(tiny("mode = fe2e\n")).unwrap();
    let k = model.params.get("visual/stem/k").unwrap().clone().map(|_| f64::MAX);
    model.params.set("visual/stem/k", k).unwrap();
    let s = sample(&model.config, 0, 0);
    match model.accumulate_gradients(&[&s], &[1.0, 1.0], Modalities::all(), &mut FlopsLedger::new()) {
        Err(Error::NonFinite(at)) => assert!(at.contains("visual/stem"), "{at}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let model = Model::new(tiny("mode = mesm\ntop_p = 0.4\nseed = 5\n")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = Model::load(dir.path()).unwrap();
    assert_eq!(back.config, model.config);
    let s = sample(&model.config, 1, 8);
    assert_eq!(back.predict(&s, Modalities::all()).unwrap(), model.predict(&s, Modalities::all()).unwrap());
}
