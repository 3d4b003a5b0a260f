//! Every trainable module receives gradient from the clip loss.

use refvos::model::{Model, ModelConfig};
use refvos::synth::sample_scene;
use refvos::training::{TrainConfig, Trainer};

#[test]
fn every_module_group_receives_gradient() {
    let (model, store) = Model::new(ModelConfig::default(), 3).unwrap();
    let clip = sample_scene(11, 3, 64).unwrap();
    let trainer = Trainer::new(TrainConfig::default()).unwrap();
    let (_, grads) = trainer.gradients(&model, &store, &clip.input, &clip.masks).unwrap();

    let mut group_norm: Vec<(String, f64)> = Vec::new();
    for ((name, _), g) in store.iter().zip(&grads) {
        let norm: f64 = g.data().iter().map(|x| x * x).sum();
        if name.starts_with("head.memory_proj") {
            // Memory entries are detached before storage.
            assert_eq!(norm, 0.0, "{name} should not receive gradient");
            continue;
        }
        let group = name.split('.').take(2).collect::<Vec<_>>().join(".");
        match group_norm.iter_mut().find(|(k, _)| *k == group) {
            Some((_, n)) => *n += norm,
            None => group_norm.push((group, norm)),
        }
    }
    for (group, norm) in &group_norm {
        assert!(*norm > 0.0, "no gradient reaches {group}");
    }
    assert!(group_norm.len() >= 10, "{group_norm:?}");
}
