//! Mini-batch BPR training with Adam, per-epoch validation and early
//! stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, lr_schedule, sample_negative, AtK, EarlyStopState, LossSummary, MetricsRecord, Split, SplitDataset,
};
use crate::model::{embeddings, total_loss, Graph, HyperParams, ItemFeatures, ModelParams, Triple, Variant};
use crate::optim::Adam;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hp: HyperParams,
    pub variant: Variant,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub base_lr: f64,
    pub patience: usize,
    pub seed: u64,
    /// Cutoffs reported in every record.
    pub ks: Vec<usize>,
    /// Cutoff whose recall drives early stopping.
    pub monitor_k: usize,
    /// Whether records carry measured wall time; off gives reproducible
    /// streams.
    pub timing: bool,
    /// Whether records name the variant.
    pub tag_variant: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hp: HyperParams::default(),
            variant: Variant::Full,
            batch_size: 2048,
            max_epochs: 1000,
            base_lr: 1e-3,
            patience: 20,
            seed: 0,
            ks: vec![10, 20],
            monitor_k: 20,
            timing: true,
            tag_variant: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.base_lr
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config(format!("cutoffs {:?} must be positive", self.ks)));
        }
        if !self.ks.contains(&self.monitor_k) {
            return Err(Error::Config(format!(
                "monitored cutoff {} is not among the reported cutoffs {:?}",
                self.monitor_k, self.ks
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (initial ones when no epoch ran).
    pub best: ModelParams,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Validation records followed by the final test record.
    pub records: Vec<MetricsRecord>,
    pub mean_epoch_ms: f64,
}

impl TrainOutcome {
    pub fn test_record(&self) -> &MetricsRecord {
        self.records.last().expect("training always emits a test record")
    }
}

/// Shuffled `(user, positive, sampled negative)` triples, one per training
/// interaction.
pub fn epoch_triples(data: &SplitDataset, rng: &mut ChaCha8Rng) -> Result<Vec<Triple>> {
    let mut out = Vec::with_capacity(data.train_count());
    for (u, pos) in data.train.iter().enumerate() {
        for &i in pos {
            out.push(Triple {
                user: u,
                pos: i,
                neg: sample_negative(pos, data.items, rng)?,
            });
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Runs one epoch and returns the mean loss terms per batch.
pub fn train_epoch(
    params: &mut ModelParams,
    adam: &mut Adam,
    triples: &[Triple],
    features: &ItemFeatures,
    graph: &Graph,
    hp: &HyperParams,
    cfg: &TrainConfig,
) -> Result<LossSummary> {
    let mut sum = LossSummary::default();
    let mut batches = 0usize;
    for batch in triples.chunks(cfg.batch_size) {
        let mut tape = Tape::new();
        let leaves: Vec<_> = params.named().into_iter().map(|(_, t)| tape.param(t)).collect();
        let vars = crate::model::ModelVars::from_ordered(&leaves)?;
        let terms = total_loss(&mut tape, &vars, batch, features, graph, hp, cfg.variant)?;
        let total = tape.scalar(terms.total)?;
        if !total.is_finite() {
            return Err(Error::Numerical(format!("training loss became {total}")));
        }
        sum.bpr += tape.scalar(terms.bpr)?;
        sum.reg += tape.scalar(terms.reg)?;
        if let Some(v) = terms.mmd {
            sum.mmd += tape.scalar(v)?;
        }
        if let Some(v) = terms.infonce {
            sum.infonce += tape.scalar(v)?;
        }
        let grads = tape.backward(terms.total)?;
        let zero: Vec<Vec<f64>> = leaves
            .iter()
            .map(|&v| {
                if grads.get(v).is_some() {
                    Vec::new()
                } else {
                    vec![0.0; tape.value(v).len()]
                }
            })
            .collect();
        let g: Vec<&[f64]> = leaves
            .iter()
            .zip(&zero)
            .map(|(&v, z)| grads.get(v).unwrap_or(z))
            .collect();
        let mut named = params.named_mut();
        let mut ps: Vec<&mut crate::tensor::Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
        adam.step(&mut ps, &g)?;
        batches += 1;
    }
    let n = batches.max(1) as f64;
    Ok(LossSummary {
        bpr: sum.bpr / n,
        mmd: sum.mmd / n,
        infonce: sum.infonce / n,
        reg: sum.reg / n,
    })
}

/// Trains from a seeded initialisation. Every record is passed to `sink` as
/// soon as it exists.
pub fn train<F>(data: &SplitDataset, features: &ItemFeatures, cfg: &TrainConfig, mut sink: F) -> Result<TrainOutcome>
where
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    cfg.validate()?;
    if features.items() != data.items {
        return Err(Error::dim(format!(
            "features cover {} items, interactions name {}",
            features.items(),
            data.items
        )));
    }
    let hp = cfg.variant.apply(&cfg.hp);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(
        data.users,
        data.items,
        features.d_visual(),
        features.d_text(),
        &hp,
        &mut rng,
    )?;
    let graph = Graph::from_pairs(data.users, data.items, &data.train_pairs())?;
    let metrics_of = |p: &ModelParams, split: Split| -> Result<Vec<AtK>> {
        let (e_u, e_i) = embeddings(p, features, &graph, &hp, cfg.variant)?;
        evaluate(&e_u, &e_i, data, split, &cfg.ks)
    };
    let mut adam = Adam::new(cfg.base_lr);
    let mut stop = EarlyStopState::new(cfg.patience);
    let mut best = params.clone();
    let mut best_losses = LossSummary::default();
    let mut records = Vec::new();
    let tag = cfg.tag_variant.then(|| cfg.variant.name().to_string());
    let mut epoch_ms = 0.0;
    let mut epochs_run = 0;

    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        adam.lr = lr_schedule(epoch, cfg.base_lr);
        let triples = epoch_triples(data, &mut rng)?;
        let losses = train_epoch(&mut params, &mut adam, &triples, features, &graph, &hp, cfg)?;
        epoch_ms += start.elapsed().as_secs_f64() * 1e3;
        let metrics = metrics_of(&params, Split::Valid)?;
        let elapsed = start.elapsed().as_millis() as u64;
        epochs_run = epoch + 1;
        let monitored = metrics.iter().find(|m| m.k == cfg.monitor_k).expect("validated").recall;
        let done = stop.update(epochs_run, monitored)?;
        if stop.improved_at(epochs_run) {
            best = params.clone();
            best_losses = losses;
        }
        let rec = MetricsRecord {
            epoch: epochs_run,
            split: Split::Valid,
            metrics,
            losses,
            wall_ms: if cfg.timing { elapsed } else { 0 },
            variant: tag.clone(),
        };
        sink(&rec)?;
        records.push(rec);
        if done {
            break;
        }
    }

    let start = Instant::now();
    let metrics = metrics_of(&best, Split::Test)?;
    let best_epoch = stop.best_epoch.unwrap_or(0);
    let rec = MetricsRecord {
        epoch: best_epoch,
        split: Split::Test,
        metrics,
        losses: best_losses,
        wall_ms: if cfg.timing {
            start.elapsed().as_millis() as u64
        } else {
            0
        },
        variant: tag,
    };
    sink(&rec)?;
    records.push(rec);
    Ok(TrainOutcome {
        best,
        best_epoch,
        epochs_run,
        records,
        mean_epoch_ms: if epochs_run > 0 {
            epoch_ms / epochs_run as f64
        } else {
            0.0
        },
    })
}
