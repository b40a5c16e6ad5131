use ashnet_harness::config::RunConfig;

/// Overrides for a run that finishes in a few seconds.
pub const TINY: [&str; 8] = [
    "dataset.size=96",
    "dataset.eval_pairs=32",
    "train.epochs=2",
    "train.warmup_epochs=1",
    "train.batch_size=8",
    "train.retrieve_count=4",
    "model.transformer.layers=1",
    "model.transformer.d_model=16",
];

#[allow(dead_code)]
pub fn tiny(seed: u64) -> RunConfig {
    RunConfig::default()
        .with_overrides(&TINY)
        .and_then(|c| c.with_overrides(&[format!("seed={seed}"), "model.transformer.d_ff=32".into()]))
        .expect("tiny config")
}
