use sgnet::experiment::{train, ExperimentConfig, TrainOptions};
use sgnet::optim::OptimConfig;
use sgnet::phantom::{generate_in_memory, DatasetSpec, PhantomConfig, SplitFractions};

fn run_on(threads: usize, cfg: &ExperimentConfig, samples: &[sgnet::SegSample]) -> (Vec<u64>, Vec<u32>) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let outcome = pool.install(|| train(cfg, samples, &[], &TrainOptions::default()).unwrap());
    let losses = outcome.steps.iter().map(|s| s.total.to_bits()).collect();
    let weights = outcome.network.params().tensors().iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect();
    (losses, weights)
}

#[test]
fn training_is_identical_across_thread_counts() {
    let spec = DatasetSpec {
        num_cases: 3,
        master_seed: 21,
        phantom: PhantomConfig { volume_shape: [16, 16, 8], ..PhantomConfig::default() },
        split: SplitFractions { train: 1.0, val: 0.0, test: 0.0 },
    };
    let samples: Vec<_> = generate_in_memory(&spec).unwrap().into_iter().map(|(_, s)| s).collect();
    let mut cfg = ExperimentConfig::default();
    cfg.network.stage_channels = vec![4, 8];
    cfg.optim = OptimConfig { epochs: 2, steps_per_epoch: Some(3), batch_size: 2, ..OptimConfig::default() };

    let single = run_on(1, &cfg, &samples);
    assert_eq!(single, run_on(1, &cfg, &samples));
    assert_eq!(single, run_on(3, &cfg, &samples));
}
