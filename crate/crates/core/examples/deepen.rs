//! Trains a small ResNet, appends identity blocks, and shows that neither
//! the logits nor the collapse metrics move.

use collapse_lab::arch::{deepen_resnet, Network, NormPlacement};
use collapse_lab::experiments::{init_network, measure, train, TrainConfig, TrainOptions};
use collapse_lab::numerics::LnMode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let config = TrainConfig::default();
    let dataset = config.data.build().unwrap();
    let net = init_network(&config, &dataset, 3, &mut ChaCha8Rng::seed_from_u64(0));
    let options = TrainOptions { learning_rate: 0.05, momentum: 0.9, steps: 200, ..Default::default() };
    let out = train(&net, &dataset, &options).unwrap();
    println!("objective {:.4} → {:.4}", out.history[0], out.final_objective());

    let Network::ResNet(params) = &out.net else { unreachable!("dense data gives a ResNet") };
    for extra in [0, 1, 5, 20] {
        let deep = Network::ResNet(deepen_resnet(params, extra));
        let (nc, acc) = measure(&deep, &dataset, config.loss, NormPlacement::Post, LnMode::Exact).unwrap();
        println!("+{extra:>2} blocks: nc1 {:.12e}  nc3 {:.12e}  accuracy {acc}", nc.nc1, nc.nc3);
    }
}
