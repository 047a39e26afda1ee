mod common;

use mesm::data::Manifest;
use mesm::harness::{self, Dataset};
use mesm::model::{Modalities, Modality, Mode, Model, RunConfig};
use mesm::{Error, FlopsLedger, Graph};

fn small(extra: &str, samples: usize) -> (RunConfig, Dataset) {
    let mut cfg = common::config(common::TOY, extra);
    cfg.samples = samples;
    let data = common::toy_dataset(&cfg);
    (cfg, data)
}

#[test]
fn training_lowers_the_loss_and_writes_outputs() {
    let (cfg, data) = small("mode = fe2e\nepochs = 3\n", 140);
    let dir = tempfile::tempdir().unwrap();
    let out = harness::run_train(&cfg, &data, Some(dir.path())).unwrap();
    assert_eq!(out.rows.len(), 4);
    assert!(out.rows[3].train_loss < out.rows[0].train_loss);
    assert_eq!(std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), out.metrics_csv());
    let back = Model::load(&dir.path().join("checkpoint")).unwrap();
    for (name, p) in out.best.params.iter() {
        assert_eq!(back.params.get(name).unwrap(), &p.value, "{name}");
    }
}

#[test]
fn same_seed_reproduces_metrics() {
    let (cfg, data) = small("mode = mesm\ntop_p = 0.5\nepochs = 2\n", 100);
    let a = harness::run_train(&cfg, &data, None).unwrap();
    let b = harness::run_train(&cfg, &data, None).unwrap();
    assert_eq!(a.metrics_csv(), b.metrics_csv());
}

#[test]
fn full_nucleus_trains_like_the_dense_model() {
    let (cfg, data) = small("epochs = 2\n", 100);
    let mut dense = cfg.clone();
    dense.model.mode = Mode::Fe2e;
    let mut sparse = cfg;
    sparse.model.mode = Mode::Mesm;
    sparse.model.top_p = 1.0;
    let a = harness::run_train(&dense, &data, None).unwrap();
    let b = harness::run_train(&sparse, &data, None).unwrap();
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert!((x.train_loss - y.train_loss).abs() < 1e-6, "{x:?} vs {y:?}");
        assert!((x.valid_loss - y.valid_loss).abs() < 1e-6, "{x:?} vs {y:?}");
    }
}

#[test]
fn sweep_rows_are_sorted_monotone_and_reproducible() {
    let (cfg, data) = small("epochs = 1\n", 100);
    let dir = tempfile::tempdir().unwrap();
    let a = harness::run_sweep(&cfg, &data, &[1.0, 0.2, 0.6], Some(dir.path())).unwrap();
    let ps: Vec<f64> = a.rows.iter().map(|r| r.top_p).collect();
    assert_eq!(ps, [0.2, 0.6, 1.0]);
    for w in a.rows.windows(2) {
        assert!(w[0].fraction() <= w[1].fraction());
    }
    assert!(a.rows.iter().all(|r| r.dense == a.rows[0].dense));
    assert_eq!(std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap(), a.to_csv());
    assert!(dir.path().join("p0.20/checkpoint/params.bin").is_file());
    let b = harness::run_sweep(&cfg, &data, &[0.6, 0.2, 1.0], None).unwrap();
    assert_eq!(a, b);
    assert!(matches!(harness::run_sweep(&cfg, &data, &[0.0, 0.5], None), Err(Error::InvalidArgument(_))));
}

#[test]
fn ablation_runs_requested_cells() {
    let (cfg, data) = small("epochs = 1\n", 100);
    let cells = [(Mode::Fe2e, "V".parse().unwrap()), (Mode::Mesm, "TA".parse().unwrap())];
    let t = harness::run_ablation(&cfg, &data, Some(&cells), &[0, 1], None).unwrap();
    assert_eq!(t.rows.len(), 2);
    assert_eq!(t.row(Mode::Mesm, "TA").unwrap().wacc.len(), 2);
    assert!(t.to_csv().starts_with("mode,modalities,avg_acc,avg_f1,seeds\nfe2e,V,"));
    let bad = [(Mode::Mesm, "AV".parse().unwrap())];
    assert!(matches!(harness::run_ablation(&cfg, &data, Some(&bad), &[0], None), Err(Error::InvalidArgument(_))));
}

#[test]
fn full_nucleus_masks_select_everything() {
    let (cfg, data) = small("mode = mesm\ntop_p = 1.0\n", 20);
    let model = Model::new(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = harness::dump_masks(&model, &data.test[0], dir.path()).unwrap();
    let pgms: Vec<_> = files.iter().filter(|f| f.extension().is_some_and(|e| e == "pgm")).collect();
    let sample = &data.test[0];
    assert_eq!(pgms.len(), 3 * (sample.frames.len() + sample.audio.len()));
    for f in pgms {
        let text = std::fs::read_to_string(f).unwrap();
        let pixels: Vec<&str> = text.lines().skip(3).flat_map(str::split_whitespace).collect();
        assert!(!pixels.is_empty() && pixels.iter().all(|&p| p == "255"), "{}", f.display());
    }
}

#[test]
fn later_blocks_select_within_pooled_earlier_selections() {
    let (cfg, data) = small("mode = mesm\ntop_p = 0.4\n", 20);
    let model = Model::new(cfg).unwrap();
    for sample in &data.test {
        let mut g = Graph::new(&model.params);
        let f = model.forward(&mut g, sample, Modalities::all(), &mut FlopsLedger::new()).unwrap();
        for pair in f.blocks.windows(2).filter(|p| p[0].modality == p[1].modality) {
            let (prev, next) = (&pair[0].trace.mask, &pair[1].trace.mask);
            let [ss, hh, ww] = next.extents();
            let [_, ph, pw] = prev.extents();
            for s in 0..ss {
                for h in 0..hh {
                    for w in 0..ww {
                        if next.get(s, h, w) {
                            let parent = (2 * h..(2 * h + 2).min(ph))
                                .any(|y| (2 * w..(2 * w + 2).min(pw)).any(|x| prev.get(s, y, x)));
                            assert!(parent, "block {} selects ({s},{h},{w}) outside its input", pair[1].block);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn fe2e_model_has_no_masks() {
    let (cfg, data) = small("mode = fe2e\n", 20);
    let model = Model::new(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(harness::dump_masks(&model, &data.test[0], &dir.path().join("m")).is_err());
    assert!(!dir.path().join("m").exists());
}

#[test]
fn trained_selection_concentrates_in_the_planted_region() {
    let (cfg, data) = small("mode = mesm\ntop_p = 0.1\nepochs = 3\n", 857);
    let out = harness::run_train(&cfg, &data, None).unwrap();
    let manifest = Manifest::synthetic(cfg.samples, cfg.model.classes, 7).unwrap();
    let test = manifest.split(mesm::data::Split::Test);
    let (mut inside, mut selected) = (0usize, 0usize);
    for (record, sample) in test.iter().zip(&data.test) {
        let region = cfg.data.region(record.class);
        let mut g = Graph::new(&out.best.params);
        let f = out.best.forward(&mut g, sample, Modalities::all(), &mut FlopsLedger::new()).unwrap();
        let block1 = f.blocks.iter().find(|b| b.modality == Modality::Visual && b.block == 1).unwrap();
        let [ss, hh, ww] = block1.trace.mask.extents();
        for s in 0..ss {
            for h in 0..hh {
                for w in 0..ww {
                    if block1.trace.mask.get(s, h, w) {
                        selected += 1;
                        inside += usize::from(region.contains(h as f64, w as f64));
                    }
                }
            }
        }
    }
    let share = inside as f64 / selected as f64;
    println!("share of selected block-1 points inside the planted region: {share:.3}");
    assert!(share >= 0.6, "{share}");
}

#[test]
fn generated_manifest_round_trips() {
    let cfg = RunConfig {
        samples: 30,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let m = harness::gen_data(&cfg, 4, 2, dir.path()).unwrap();
    assert_eq!(Manifest::load(&dir.path().join("manifest.jsonl")).unwrap(), m);
    assert_eq!(m, Manifest::synthetic(30, 6, 4).unwrap());
    let dumps = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(dumps, 1 + 2 * 2);
}

#[test]
fn evaluation_table_lists_every_class_and_the_mean() {
    let (cfg, data) = small("mode = fe2e\n", 60);
    let model = Model::new(cfg).unwrap();
    let eval = harness::evaluate(&model, &data.test, &data.pos_weight).unwrap();
    let csv = eval.metrics_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "class,wacc,f1");
    assert_eq!(lines.len(), 1 + 6 + 1);
    assert!(lines[7].starts_with("mean,"));
    assert!(eval.block_flops().layers.iter().all(|l| l.layer.contains("/block")));
}
