#![allow(dead_code)]

use prunepath::ffn::MoefiedFFN;
use prunepath::moefication::{balanced_kmeans, build_moefied, centroid_router, neuron_features, DEFAULT_MAX_ITERS};
use prunepath::numkit::Matrix;
use prunepath::routing::{RouterState, TAU_ALL_EXPERTS};
use prunepath::synth::{generate, random_router, SynthConfig, SynthModel};

pub struct Desk {
    pub model: SynthModel,
    pub moe: MoefiedFFN,
    pub reference: Matrix,
    pub init: RouterState,
}

/// Synthetic workload, clustered into `experts` blocks, with the fixed
/// reference router and a small random starting router.
pub fn desk(cfg: SynthConfig, experts: usize) -> Desk {
    let model = generate(&cfg).unwrap();
    let ffn = &model.layers[0];
    let clustering = balanced_kmeans(&neuron_features(ffn), experts, cfg.seed, DEFAULT_MAX_ITERS).unwrap();
    let moe = build_moefied(ffn, &clustering).unwrap();
    let reference = centroid_router(&moe, 2.0);
    let init = RouterState::cumulative(random_router(cfg.d, experts, 0.1, cfg.seed + 1), TAU_ALL_EXPERTS).unwrap();
    Desk {
        model,
        moe,
        reference,
        init,
    }
}
