//! End-to-end passes through the assembled encoder on random inputs.

use ashnet_core::model::{AshNet, ModelConfig, PairBatch};
use ashnet_core::objectives::ItcQueues;
use ashnet_core::scheduler::LossSet;
use ashnet_core::snn::{COLLECTOR_GROUP, SNN_GROUP};
use ashnet_core::transformer::{TransformerConfig, Vocabulary};
use ashnet_tensor::optim::{Hyper, Optimizer};
use ashnet_tensor::rng::seeded;
use ashnet_tensor::{Tape, Tensor};

const ALL: LossSet = LossSet {
    itc: true,
    itm: true,
    mlm: true,
    mvm: true,
    stua: true,
};

fn small() -> AshNet {
    let cfg = ModelConfig {
        image_size: 16,
        transformer: TransformerConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            ..TransformerConfig::default()
        },
        ..ModelConfig::default()
    };
    let vocab = Vocabulary::from_words(["red", "blue", "circle", "square", "left", "right"]);
    AshNet::new(cfg, vocab, 3).unwrap()
}

fn batch(net: &AshNet, b: usize) -> PairBatch {
    let size = net.cfg.image_size;
    let images = Tensor::uniform(&[b, 3, size, size], 0.0, 1.0, &mut seeded(9));
    let seeds: Vec<u64> = (0..b as u64).collect();
    let captions = ["red circle left", "blue square right", "red square left", "blue circle right"];
    PairBatch {
        spikes: net.spike_input(&images, &seeds).unwrap(),
        images,
        captions: (0..b).map(|i| net.tokenize(captions[i % 4])).collect(),
    }
}

fn snapshot(net: &AshNet, group: &str) -> Vec<Vec<f64>> {
    net.store.group_ids(group).map(|i| net.store.get(i).data().to_vec()).collect()
}

#[test]
fn visual_shapes_follow_config() {
    let net = small();
    let b = batch(&net, 3);
    let tape = Tape::new();
    let p = net.store.bind_constant(&tape);
    let v = net.encode_visual(&p, &b.images, &b.spikes).unwrap();
    let n = net.cfg.num_patches();
    assert_eq!(v.tokens.shape(), vec![3, n, net.cfg.m1]);
    let (img, txt) = net.retrieval_embeddings(&p, &v, &b.captions).unwrap();
    assert_eq!(img.shape(), vec![3, net.cfg.d_align]);
    assert_eq!(txt.shape(), vec![3, net.cfg.d_align]);
    for row in img.value().chunks(net.cfg.d_align) {
        assert!((row.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn frozen_spiking_groups_survive_a_step() {
    let mut net = small();
    net.set_spiking_frozen(true);
    let before = (snapshot(&net, SNN_GROUP), snapshot(&net, COLLECTOR_GROUP));
    let groups: Vec<String> = net.store.ids().map(|i| net.store.group(i).to_string()).collect();
    let b = batch(&net, 4);
    let mut queues = ItcQueues::new(net.cfg.queue_capacity, net.cfg.d_align);
    let tape = Tape::new();
    let p = net.store.bind(&tape);
    let terms = net.batch_losses(&p, &b, ALL, &mut queues, &mut seeded(1)).unwrap();
    assert!(terms.values().iter().all(|v| v.is_some_and(f64::is_finite)));
    let grads = terms.total.backward().unwrap();
    net.store.accumulate(&p, &grads);
    drop(p);
    let mut opt = Optimizer::new(Hyper::adamw(1e-2, 0.01));
    let mut seen = groups.clone();
    seen.sort();
    seen.dedup();
    for g in &seen {
        opt.step_group(&mut net.store, g).unwrap();
    }
    net.after_step();
    assert_eq!(before, (snapshot(&net, SNN_GROUP), snapshot(&net, COLLECTOR_GROUP)));
}

#[test]
fn fused_tokens_are_deterministic() {
    let net = small();
    let b = batch(&net, 2);
    let x = net.fused_tokens(&b.images, &b.spikes).unwrap();
    let y = net.fused_tokens(&b.images, &b.spikes).unwrap();
    assert_eq!(x.data(), y.data());
    assert!(x.data().iter().all(|v| v.is_finite()));
}
