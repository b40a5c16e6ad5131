//! The training loop: phase schedule, batch planning, optimizer steps,
//! per-step metrics, evaluation and persisted artifacts.

use std::path::Path;

use ashnet_core::model::{AshNet, PairBatch};
use ashnet_core::objectives::ItcQueues;
use ashnet_core::scheduler::{random_epoch, reorganize_epoch, similarity_matrix, training_schedule, EpochPlan, Phase};
use ashnet_core::transformer::Vocabulary;
use ashnet_tensor::checkpoint::Checkpoint;
use ashnet_tensor::optim::Optimizer;
use ashnet_tensor::rng::{derive_seed, seeded};
use ashnet_tensor::Tape;

use crate::config::RunConfig;
use crate::data::{caption_words, generate_dataset, stack_images, SyntheticPair};
use crate::error::{HarnessError, Result};
use crate::eval::{embed_pairs, evaluate, Recall};

pub const METRICS_HEADER: [&str; 11] = [
    "epoch", "step", "loss_itc", "loss_itm", "loss_mlm", "loss_mvm", "loss_stua", "r_at_1", "r_at_5", "r_at_10", "phase",
];

const MODEL_TAG: u64 = 0x30DE;
const PLAN_TAG: u64 = 0x91A7;
const MASK_TAG: u64 = 0x3A5C;
const SPIKE_TAG: u64 = 0x5B1C;

/// One optimizer step; `recall` is filled on the last step of each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    /// 1-based.
    pub epoch: usize,
    /// 0-based over the whole run.
    pub step: usize,
    /// `[itc, itm, mlm, mvm, stua]`; inactive terms are `None`.
    pub losses: [Option<f64>; 5],
    pub recall: Option<Recall>,
    pub phase: Phase,
}

impl MetricRow {
    pub fn total(&self) -> f64 {
        self.losses.iter().flatten().sum()
    }

    fn record(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = vec![self.epoch.to_string(), self.step.to_string()];
        out.extend(self.losses.iter().map(|&v| f(v)));
        out.extend([
            f(self.recall.map(|r| r.r_at_1)),
            f(self.recall.map(|r| r.r_at_5)),
            f(self.recall.map(|r| r.r_at_10)),
        ]);
        out.push(self.phase.as_str().to_string());
        out
    }
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    pub net: AshNet,
    pub rows: Vec<MetricRow>,
    /// Held-out recall after the final epoch.
    pub recall: Recall,
}

impl TrainOutcome {
    /// Mean summed loss over each epoch's steps, in epoch order.
    pub fn epoch_mean_losses(&self) -> Vec<f64> {
        let epochs = self.rows.last().map_or(0, |r| r.epoch);
        (1..=epochs)
            .map(|e| {
                let rows: Vec<&MetricRow> = self.rows.iter().filter(|r| r.epoch == e).collect();
                rows.iter().map(|r| r.total()).sum::<f64>() / rows.len() as f64
            })
            .collect()
    }
}

pub fn vocabulary() -> Vocabulary {
    Vocabulary::from_words(caption_words())
}

/// A freshly initialized model for `cfg`.
pub fn build_model(cfg: &RunConfig) -> Result<AshNet> {
    Ok(AshNet::new(cfg.model.clone(), vocabulary(), derive_seed(cfg.seed, &[MODEL_TAG]))?)
}

pub fn dataset(cfg: &RunConfig) -> Result<Vec<SyntheticPair>> {
    generate_dataset(cfg.dataset.size, cfg.dataset.clusters, cfg.model.image_size, cfg.seed)
}

fn plan_epoch(
    net: &AshNet,
    cfg: &RunConfig,
    pairs: &[SyntheticPair],
    train_ids: &[usize],
    phase: Phase,
    epoch: usize,
    rng: &mut ashnet_tensor::rng::Rng,
) -> Result<EpochPlan> {
    let t = &cfg.train;
    match phase {
        Phase::FrozenWarmup => Ok(random_epoch(train_ids, t.batch_size, rng)?),
        Phase::Reorganized => {
            let seed = cfg.seed;
            let (img, _) = embed_pairs(net, pairs, train_ids, t.batch_size, |i| spike_seed(seed, epoch, i))?;
            let sims = similarity_matrix(&img, net.cfg.d_align);
            Ok(reorganize_epoch(train_ids, t.retrieve_count, &sims, t.batch_size, rng)?)
        }
    }
}

/// Spike seed of pair `id` during training epoch `epoch`.
pub fn spike_seed(run_seed: u64, epoch: usize, id: usize) -> u64 {
    derive_seed(run_seed, &[SPIKE_TAG, epoch as u64, id as u64])
}

/// Runs the full schedule. With `out`, writes `metrics.csv`,
/// `checkpoint_final.bin`, `vocab.json` and, when enabled, per-epoch plans.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    train_with(cfg, out, |_, _| {})
}

/// [`train`] with `on_step` called after every optimizer step.
pub fn train_with(cfg: &RunConfig, out: Option<&Path>, mut on_step: impl FnMut(&MetricRow, &AshNet)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let pairs = dataset(cfg)?;
    let (train_ids, eval_ids) = cfg.dataset.split();
    let mut net = build_model(cfg)?;
    let schedule = training_schedule(cfg.train.warmup_epochs, cfg.train.epochs)?;
    let groups = cfg.train.optim.groups();
    let mut optimizers: Vec<(&str, Optimizer)> = groups.iter().map(|&(g, h)| (g, Optimizer::new(*h))).collect();
    let mut queues = ItcQueues::new(cfg.model.queue_capacity, cfg.model.d_align);
    let mut plan_rng = seeded(derive_seed(cfg.seed, &[PLAN_TAG]));
    let mut mask_rng = seeded(derive_seed(cfg.seed, &[MASK_TAG]));
    let size = cfg.model.image_size;
    let mut rows = Vec::new();
    let mut recall = None;

    for (e, &phase) in schedule.iter().enumerate() {
        let epoch = e + 1;
        let factor = cfg.train.lr_schedule.factor(epoch, cfg.train.epochs);
        for ((_, opt), (_, h)) in optimizers.iter_mut().zip(&groups) {
            opt.set_lr(h.lr() * factor);
        }
        net.set_spiking_frozen(phase == Phase::FrozenWarmup);
        let plan = plan_epoch(&net, cfg, &pairs, &train_ids, phase, epoch, &mut plan_rng)?;
        if let (Some(dir), true) = (out, cfg.train.dump_plans) {
            let json = serde_json::to_string(&plan).expect("plan serializes");
            std::fs::write(dir.join(format!("plan_epoch{epoch}.json")), json)?;
        }
        for ids in &plan.batches {
            let images = stack_images(&pairs, ids, size)?;
            let seeds: Vec<u64> = ids.iter().map(|&i| spike_seed(cfg.seed, epoch, i)).collect();
            let batch = PairBatch {
                spikes: net.spike_input(&images, &seeds)?,
                images,
                captions: ids.iter().map(|&i| net.tokenize(&pairs[i].caption)).collect(),
            };
            let tape = Tape::new();
            let p = net.store.bind(&tape);
            let terms = net.batch_losses(&p, &batch, phase.losses(), &mut queues, &mut mask_rng)?;
            let step = rows.len();
            if !terms.total.item().is_finite() {
                return Err(HarnessError::Divergence { epoch, step });
            }
            let grads = terms.total.backward()?;
            let losses = terms.values();
            net.store.accumulate(&p, &grads);
            drop(p);
            for (group, opt) in optimizers.iter_mut() {
                opt.step_group(&mut net.store, group)?;
            }
            net.after_step();
            let row = MetricRow {
                epoch,
                step,
                losses,
                recall: None,
                phase,
            };
            on_step(&row, &net);
            rows.push(row);
        }
        let r = evaluate(&net, &pairs, &eval_ids, cfg.train.batch_size, cfg.seed)?;
        if let Some(last) = rows.last_mut() {
            last.recall = Some(r);
        }
        recall = Some(r);
    }

    if let Some(dir) = out {
        write_metrics(dir.join("metrics.csv"), &rows)?;
        save_checkpoint(&net, cfg, dir.join("checkpoint_final.bin"))?;
        std::fs::write(dir.join("vocab.json"), net.vocab.to_json())?;
    }
    Ok(TrainOutcome {
        net,
        rows,
        recall: recall.expect("at least one epoch"),
    })
}

pub fn save_checkpoint(net: &AshNet, cfg: &RunConfig, path: impl AsRef<Path>) -> Result<()> {
    let mut ck = Checkpoint::default();
    ck.metadata.insert("config".into(), serde_json::to_string(cfg).expect("config serializes"));
    ck.tensors = net
        .store
        .named_tensors()
        .map(|(n, t)| (n.to_string(), t.clone().with_requires_grad(false)))
        .collect();
    Ok(ck.save(path)?)
}

/// Rebuilds a model from `cfg` and overwrites its parameters from `path`.
pub fn load_checkpoint(cfg: &RunConfig, vocab: Vocabulary, path: impl AsRef<Path>) -> Result<AshNet> {
    let ck = Checkpoint::load(path)?;
    let mut net = AshNet::new(cfg.model.clone(), vocab, derive_seed(cfg.seed, &[MODEL_TAG]))?;
    net.store.load_named(ck.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
    Ok(net)
}
