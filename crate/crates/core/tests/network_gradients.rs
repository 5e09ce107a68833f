//! Whole-network backpropagation against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgnet::boundary::{make_targets, BoundaryTargets, OrganTaxonomy, SoftenConfig};
use sgnet::losses::{total_loss, LossConfig};
use sgnet::network::{Network, NetworkConfig};
use sgnet::sg::FusionMode;
use sgnet::volume::{FeatureVolume, LabelVolume};

struct Case {
    x: FeatureVolume<f64>,
    labels: Vec<LabelVolume>,
    targets: Vec<BoundaryTargets>,
}

fn case(rng: &mut ChaCha8Rng, batch: usize) -> Case {
    let dims = [4, 4, 4];
    let n = 64;
    let x = FeatureVolume::from_vec([batch, 1, 4, 4, 4], (0..batch * n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let labels: Vec<LabelVolume> = (0..batch)
        .map(|_| LabelVolume::from_vec(dims, (0..n).map(|_| rng.random_range(0..4)).collect()).unwrap())
        .collect();
    let targets = labels
        .iter()
        .map(|l| make_targets(l, &OrganTaxonomy::default(), &SoftenConfig::with_delta(1.0)).unwrap())
        .collect();
    Case { x, labels, targets }
}

fn loss_of(net: &Network<f64>, c: &Case, cfg: &LossConfig) -> f64 {
    let out = net.forward(&c.x).unwrap();
    let labels: Vec<&LabelVolume> = c.labels.iter().collect();
    let targets: Vec<&BoundaryTargets> = c.targets.iter().collect();
    total_loss(&out, &labels, &targets, cfg).unwrap().0.total
}

fn check(cfg: NetworkConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::<f64>::build(cfg, seed).unwrap();
    // Zero biases leave pre-activations sitting exactly on ReLU kinks.
    for t in net.params_mut().tensors_mut() {
        t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let c = case(&mut rng, 2);
    let loss_cfg = LossConfig::default();

    let (out, tape) = net.forward_traced(&c.x).unwrap();
    let labels: Vec<&LabelVolume> = c.labels.iter().collect();
    let targets: Vec<&BoundaryTargets> = c.targets.iter().collect();
    let (_, out_grads) = total_loss(&out, &labels, &targets, &loss_cfg).unwrap();
    let grads = net.backward(&tape, &out_grads).unwrap();

    let h = 1e-5;
    let names = net.params().names().to_vec();
    for (p, name) in names.iter().enumerate() {
        let len = net.params().tensors()[p].data.len();
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for i in (0..len).step_by(len.div_ceil(12)) {
            let orig = net.params().tensors()[p].data[i];
            net.params_mut().tensors_mut()[p].data[i] = orig + h;
            let up = loss_of(&net, &c, &loss_cfg);
            net.params_mut().tensors_mut()[p].data[i] = orig - h;
            let down = loss_of(&net, &c, &loss_cfg);
            net.params_mut().tensors_mut()[p].data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((numeric - grads[p][i]).abs());
            scale = scale.max(numeric.abs()).max(grads[p][i].abs());
        }
        assert!(worst <= 1e-4 * scale.max(1e-6), "{name}: max abs err {worst:e} at scale {scale:e}");
    }
}

#[test]
fn sg_concat_network_gradients() {
    for seed in [31, 34, 35] {
        check(NetworkConfig { stage_channels: vec![2, 3], ..NetworkConfig::default() }, seed);
    }
}

#[test]
fn sg_add_network_gradients() {
    let cfg = NetworkConfig { stage_channels: vec![2, 2], fusion_mode: FusionMode::Add, ..NetworkConfig::default() };
    check(cfg, 32);
}

#[test]
fn plain_skip_network_gradients() {
    let cfg = NetworkConfig { stage_channels: vec![2, 3], use_sg: false, ..NetworkConfig::default() };
    check(cfg, 33);
}
