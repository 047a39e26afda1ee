use mesm::data::synth::{synth_sample, synth_sample_detailed, SynthConfig, CLS};
use mesm::data::{Manifest, Split};
use mesm::metrics::ClassMetrics;

/// Per-channel pixel means over all frames of a sample.
fn global_average(class: usize, seed: u64, cfg: &SynthConfig) -> Vec<f64> {
    let s = synth_sample(class, seed, cfg).unwrap();
    let mut out = [0.0; 3];
    for f in &s.frames {
        let plane = f.numel() / 3;
        for (c, o) in out.iter_mut().enumerate() {
            *o += f.data()[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
    }
    out.iter().map(|v| v / s.frames.len() as f64).collect()
}

/// One-vs-rest logistic regression with balanced class weights, fitted by
/// full-batch gradient descent on standardised features.
struct Logistic {
    mean: Vec<f64>,
    std: Vec<f64>,
    w: Vec<Vec<f64>>,
}

impl Logistic {
    fn fit(x: &[Vec<f64>], y: &[usize], classes: usize) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..d)
            .map(|j| (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12))
            .collect();
        let z: Vec<Vec<f64>> = x.iter().map(|r| (0..d).map(|j| (r[j] - mean[j]) / std[j]).collect()).collect();
        let mut w = vec![vec![0.0; d + 1]; classes];
        for (c, wc) in w.iter_mut().enumerate() {
            let pos = y.iter().filter(|&&t| t == c).count() as f64;
            let pw = (n - pos) / pos;
            for _ in 0..3000 {
                let mut g = vec![0.0; d + 1];
                for (r, &t) in z.iter().zip(y) {
                    let s = wc[d] + (0..d).map(|j| wc[j] * r[j]).sum::<f64>();
                    let p = 1.0 / (1.0 + (-s).exp());
                    let (target, weight) = if t == c { (1.0, pw) } else { (0.0, 1.0) };
                    let e = weight * (p - target);
                    for j in 0..d {
                        g[j] += e * r[j];
                    }
                    g[d] += e;
                }
                for j in 0..=d {
                    wc[j] -= 0.5 * g[j] / n;
                }
            }
        }
        Self { mean, std, w }
    }

    fn logits(&self, r: &[f64]) -> Vec<f64> {
        let d = r.len();
        self.w
            .iter()
            .map(|wc| wc[d] + (0..d).map(|j| wc[j] * (r[j] - self.mean[j]) / self.std[j]).sum::<f64>())
            .collect()
    }
}

#[test]
fn global_average_pixels_are_weak_evidence() {
    let cfg = SynthConfig::default();
    let manifest = Manifest::synthetic(857, cfg.classes, 7).unwrap();
    let features = |split| {
        manifest
            .split(split)
            .into_iter()
            .map(|r| (global_average(r.class, r.seed, &cfg), r.class))
            .unzip::<_, _, Vec<_>, Vec<_>>()
    };
    let (xtr, ytr) = features(Split::Train);
    let (xte, yte) = features(Split::Test);
    let model = Logistic::fit(&xtr, &ytr, cfg.classes);
    let logits: Vec<Vec<f64>> = xte.iter().map(|r| model.logits(r)).collect();
    let labels: Vec<Vec<f64>> = yte
        .iter()
        .map(|&c| (0..cfg.classes).map(|k| f64::from(k == c)).collect())
        .collect();
    let wacc = ClassMetrics::from_logits(&logits, &labels).mean_wacc().unwrap();
    println!("global-average linear probe WAcc {wacc:.4}");
    assert!(wacc > 0.5 && wacc < 0.6, "linear probe WAcc {wacc}");
}

#[test]
fn planted_evidence_lands_where_the_class_says() {
    let cfg = SynthConfig::default();
    for class in 0..cfg.classes {
        for seed in 0..5 {
            let out = synth_sample_detailed(class, seed, &cfg).unwrap();
            let region = cfg.region(class);
            for &(h, w) in &out.blob_centers {
                assert!(region.contains(h, w));
            }
            let s = &out.sample;
            assert_eq!(s.tokens[0], CLS);
            assert_eq!(s.tokens.len(), cfg.text_len + 1);
            assert_eq!(s.labels.iter().sum::<f64>(), 1.0);
            assert_eq!(s.labels[class], 1.0);

            // mean log-mel energy inside the class band beats the rest
            let spec = &s.audio[0];
            let (f, t) = (spec.shape()[1], spec.shape()[2]);
            let band = cfg.band(class);
            let row = |j: usize| spec.data()[j * t..(j + 1) * t].iter().sum::<f64>() / t as f64;
            let inside = band.clone().map(row).fold(f64::MIN, f64::max);
            let outside: f64 = (0..f).filter(|j| !band.contains(j)).map(row).sum::<f64>() / (f - band.len()) as f64;
            assert!(inside > 2.0 * outside, "class {class}: band {inside} vs rest {outside}");
        }
    }
}

#[test]
fn rejects_out_of_range_class_and_small_mel_count() {
    let cfg = SynthConfig::default();
    assert!(synth_sample(cfg.classes, 0, &cfg).is_err());
    let tight = SynthConfig { n_mels: 20, ..SynthConfig::default() };
    assert!(synth_sample(0, 0, &tight).is_err());
}

#[test]
fn duplicate_manifest_ids_are_rejected() {
    let line = r#"{"id":"a","split":"train","labels":[1,0],"seed":1,"class":0}"#;
    let text = format!("{line}\n{line}\n");
    assert!(Manifest::read_jsonl(text.as_bytes()).is_err());
    assert_eq!(Manifest::read_jsonl(format!("{line}\n").as_bytes()).unwrap().records.len(), 1);
}

#[test]
fn mel_scale_round_trips() {
    use mesm::data::mel::{hz_to_mel, mel_to_hz};
    assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.1);
    for hz in [0.0, 55.0, 440.0, 3000.0, 8000.0] {
        assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
    }
}
