use std::fmt::Write as _;
use std::fs;

use kpf_core::classical::{estimate_classical_masked, EstimatorConfig, Method};
use kpf_core::color::illuminant_distance;
use kpf_core::eval::{
    evaluate, synth_scene, DatasetIndex, Estimator, EvalItem, Prediction, SynthSpec, N_FOLDS,
};
use kpf_core::fitting::Mode;
use kpf_core::image_io::write_ppm;
use kpf_core::net::{
    read_checkpoint, train, write_checkpoint, Network, NetworkSpec, Sidecar, TrainConfig,
};
use kpf_core::pipeline::{estimate_with_network, EstimateConfig, DEFAULT_TRAINING_MEAN};
use kpf_core::{IlluminantVector, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_illuminant(rng: &mut ChaCha8Rng) -> IlluminantVector {
    IlluminantVector::new(rng.random_range(0.3..1.0), 1.0, rng.random_range(0.3..1.0)).unwrap()
}

#[test]
fn trained_network_separates_two_illuminants() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scenes: Vec<_> = (0..60)
        .map(|i| {
            let l = random_illuminant(&mut rng);
            let spec = SynthSpec {
                height: 48,
                width: 48,
                illuminants: vec![l],
                seed: i,
                ..Default::default()
            };
            synth_scene(&spec).unwrap().to_source()
        })
        .collect();
    let spec = NetworkSpec {
        input_size: 32,
        kernel_order: 1,
        encoder_widths: vec![8, 16],
        seed: 1,
    };
    let cfg = TrainConfig {
        batch_size: 8,
        max_steps: 300,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let out = train(
        Network::new(spec).unwrap(),
        None,
        &scenes,
        &cfg,
        3,
        |_, _, _| Ok(()),
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.kwb");
    let sidecar = Sidecar {
        step: out.adam.step,
        seed: 3,
        spec: out.network.spec().clone(),
        config: cfg,
        confidence_training_mean: None,
        level_statistic: Default::default(),
    };
    write_checkpoint(&path, &out.network, &out.adam, &sidecar).unwrap();
    let network = read_checkpoint(&path).unwrap().network;

    let a = IlluminantVector::new(0.80, 0.30, 0.52).unwrap();
    let b = IlluminantVector::new(0.38, 0.26, 0.89).unwrap();
    let pair = synth_scene(&SynthSpec {
        illuminants: vec![a, b],
        seed: 77,
        ..Default::default()
    })
    .unwrap();
    let est = estimate_with_network(
        &network,
        &pair.image,
        &EstimateConfig::default(),
        DEFAULT_TRAINING_MEAN,
    )
    .unwrap()
    .estimate;
    assert_eq!(est.mode, Mode::Multi);
    assert_eq!(est.regions.len(), 2);
    // Upper rows are lit by `a`, so the region there must lean towards it.
    let top = est.illuminant_at(0).unwrap();
    let bottom = est.illuminant_at(32 * 32 - 1).unwrap();
    assert!(illuminant_distance(top, a) < illuminant_distance(top, b));
    assert!(illuminant_distance(bottom, b) < illuminant_distance(bottom, a));
}

struct GrayWorld;

impl Estimator for GrayWorld {
    fn name(&self) -> String {
        "gray_world".into()
    }

    fn estimate(&self, item: &EvalItem) -> Result<Prediction> {
        let l = estimate_classical_masked(
            &item.image,
            item.valid.as_deref(),
            &EstimatorConfig::new(Method::GrayWorld),
        )?;
        Ok(Prediction {
            global: l,
            per_pixel: None,
        })
    }
}

#[test]
fn dataset_on_disk_scores_gray_world() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut csv = String::from("path,r,g,b,black,sat,fold\n");
    for i in 0..10 {
        let l = random_illuminant(&mut rng);
        let scene = synth_scene(&SynthSpec {
            height: 32,
            width: 32,
            illuminants: vec![l],
            seed: i,
            ..Default::default()
        })
        .unwrap();
        let name = format!("img{i}.ppm");
        write_ppm(&dir.path().join(&name), &scene.image).unwrap();
        let [r, g, b] = l.to_array();
        writeln!(csv, "{name},{r},{g},{b},0,65535,").unwrap();
    }
    let index_path = dir.path().join("index.csv");
    fs::write(&index_path, csv).unwrap();

    let index = DatasetIndex::load(&index_path, 9).unwrap();
    assert_eq!(index.entries.len(), 10);
    for f in 0..N_FOLDS {
        assert_eq!(index.entries.iter().filter(|e| e.fold == f).count(), 2);
    }
    let items: Vec<EvalItem> = index
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| e.load_item(format!("{i}")).unwrap())
        .collect();
    let report = evaluate(&GrayWorld, &items).unwrap();
    assert_eq!(report.failures, 0);
    assert_eq!(report.per_fold.len(), N_FOLDS);
    // Achromatic texture means: only 16-bit quantization separates the estimate from the truth.
    assert!(report.pooled.unwrap().worst25 < 0.01, "{:?}", report.pooled);
}
