#![allow(dead_code)]

use resprompt_harness::ExperimentConfig;

/// A configuration small enough to run a whole experiment in well under a
/// second.
pub fn tiny(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        stages: 2,
        severity: vec![0.0, 0.8],
        feature_dim: 8,
        input_dim: 4,
        tokens: 3,
        layers: 2,
        backbone_heads: 2,
        memory_heads: 2,
        mlp_hidden: 6,
        bottleneck: 4,
        pool_size: 6,
        memory_slots: 3,
        train_per_stage: 48,
        val_per_stage: 12,
        test_per_stage: 12,
        batch_size: 8,
        epochs: 2,
        e_min: 2,
        e_max: 4,
        seed,
        ..Default::default()
    }
}
