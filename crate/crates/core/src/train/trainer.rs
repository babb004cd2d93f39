use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seld_autodiff::pack::Pack;
use seld_autodiff::{Graph, Tensor};

use super::config::{RunConfig, StagePlan};
use super::dataset::Dataset;
use super::optim::AdamW;
use crate::error::{io_err, Result, SeldError};
use crate::metrics::{evaluate, tracks_to_events, EventList, MetricConfig, MetricReport};
use crate::model::{update_bn_buffers, SeldModel};
use crate::objective::{component_loss_values, pit_loss, LossWeights, Stage};
use crate::params::{Ctx, ParamStore};

const CHECKPOINT_FORMAT: &str = "seld-mamba-checkpoint/1";
pub const CHECKPOINT_FILE: &str = "checkpoint.pack";

/// Loss summary of one epoch; components are unweighted and use the
/// per-frame winning permutation.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub stage: Stage,
    /// 1-based within the stage.
    pub epoch: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub loss: f64,
    pub sed: f64,
    pub doa: f64,
    pub dist: f64,
    pub val: Option<MetricReport>,
}

impl EpochLog {
    fn csv_row(&self) -> String {
        let w = self.weights;
        format!(
            "{},{},{:e},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.stage, self.epoch, self.lr, w.sed, w.doa, w.dist, self.loss, self.sed, self.doa, self.dist
        )
    }
}

const HISTORY_HEADER: &str = "stage,epoch,lr,lambda_sed,lambda_doa,lambda_dist,loss,sed,doa,dist";

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Epochs run by this invocation.
    pub history: Vec<EpochLog>,
    /// Training-set metrics at the end of each completed stage.
    pub stages: Vec<(Stage, MetricReport)>,
    /// Validation metrics when a validation set is configured, training-set
    /// metrics otherwise. `None` when stopped early.
    pub final_report: Option<MetricReport>,
}

pub fn stages(plan: StagePlan) -> &'static [Stage] {
    match plan {
        StagePlan::Unified => &[Stage::Unified],
        StagePlan::TwoStage => &[Stage::Stage1, Stage::Stage2],
    }
}

/// A saved training state.
pub struct Checkpoint {
    pub config: RunConfig,
    pub store: ParamStore,
    pub adam: AdamW,
    pub stage_index: usize,
    pub epochs_done: usize,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut pack = Pack::new();
        pack.set_meta("format", CHECKPOINT_FORMAT);
        for (k, v) in self.config.entries() {
            pack.set_meta(format!("config.{k}"), v);
        }
        pack.set_meta("stage_index", self.stage_index.to_string());
        pack.set_meta("epochs_done", self.epochs_done.to_string());
        self.store.to_pack(&mut pack)?;
        self.adam.to_pack(&mut pack)?;
        // write then rename so an interrupted save keeps the previous file
        let tmp = path.with_extension("pack.tmp");
        pack.save(&tmp)?;
        fs::rename(&tmp, path).map_err(io_err(format!("replacing {}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(SeldError::Checkpoint(format!("{} does not exist", path.display())));
        }
        let pack = Pack::load(path)?;
        let meta = |k: &str| {
            pack.meta
                .get(k)
                .ok_or_else(|| SeldError::Checkpoint(format!("{}: missing {k:?}", path.display())))
        };
        if meta("format")? != CHECKPOINT_FORMAT {
            return Err(SeldError::Checkpoint(format!("{}: unsupported format {:?}", path.display(), meta("format")?)));
        }
        let text: String = pack
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| format!("{k} = {v}\n")))
            .collect();
        if text.is_empty() {
            return Err(SeldError::Checkpoint(format!("{}: no run config", path.display())));
        }
        let config = RunConfig::parse(&text)?;
        let count = |k: &str| -> Result<usize> {
            meta(k)?
                .parse()
                .map_err(|_| SeldError::Checkpoint(format!("{}: bad {k}", path.display())))
        };
        let model = SeldModel::new(config.model.clone())?;
        let mut store = model.init(&mut ChaCha8Rng::seed_from_u64(0));
        store.load_pack(&pack)?;
        Ok(Self {
            adam: AdamW::from_pack(config.optim.clone(), &pack)?,
            stage_index: count("stage_index")?,
            epochs_done: count("epochs_done")?,
            config,
            store,
        })
    }
}

/// Per-example frame events predicted by the model.
pub fn predict_events(model: &SeldModel, store: &ParamStore, ds: &Dataset, batch: usize, threshold: f64) -> Result<Vec<EventList>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(batch.max(1)) {
        let (input, _) = ds.batch(chunk)?;
        let pred = model.predict(store, &input)?;
        for b in 0..chunk.len() {
            out.push(tracks_to_events(&pred.example(b)?, threshold)?);
        }
    }
    Ok(out)
}

/// Scores predictions against the references, all segments pooled.
pub fn score_events(preds: &[EventList], refs: &[EventList]) -> Result<MetricReport> {
    let p: EventList = preds.iter().flatten().cloned().collect();
    let r: EventList = refs.iter().flatten().cloned().collect();
    evaluate(&p, &r, &MetricConfig::default())
}

pub fn score(model: &SeldModel, store: &ParamStore, ds: &Dataset, batch: usize, threshold: f64) -> Result<MetricReport> {
    score_events(&predict_events(model, store, ds, batch, threshold)?, &ds.refs)
}

/// Scores a checkpoint on the clips of a manifest.
pub fn evaluate_checkpoint(ckpt: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<MetricReport> {
    let ck = Checkpoint::load(ckpt)?;
    let ds = Dataset::from_manifest(manifest, &ck.config)?;
    let model = SeldModel::new(ck.config.model.clone())?;
    score(&model, &ck.store, &ds, ck.config.batch_size, ck.config.sed_threshold)
}

/// Runs the configured schedule on the configured data.
pub fn train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let train_set = Dataset::for_training(cfg)?;
    let val = cfg
        .data
        .val_manifest
        .as_ref()
        .map(|m| Dataset::from_manifest(m, cfg))
        .transpose()?;
    Trainer::new(cfg.clone())?.run(&train_set, val.as_ref())
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: SeldModel,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = SeldModel::new(cfg.model.clone())?;
        Ok(Self { cfg, model })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    /// Trains on `train_set`, writing the config snapshot, loss history,
    /// checkpoints and the final report under `out_dir`.
    pub fn run(&self, train_set: &Dataset, val: Option<&Dataset>) -> Result<TrainReport> {
        let cfg = &self.cfg;
        if train_set.is_empty() {
            return Err(SeldError::Invalid("empty training set".into()));
        }
        fs::create_dir_all(&cfg.out_dir).map_err(io_err(format!("creating {}", cfg.out_dir.display())))?;
        fs::write(self.out("config.txt"), cfg.to_text()).map_err(io_err("writing config snapshot"))?;

        let plan = stages(cfg.stage_plan);
        let ckpt_path = self.out(CHECKPOINT_FILE);
        let (mut store, mut adam, mut stage_index, mut epochs_done) = if cfg.resume && ckpt_path.exists() {
            let ck = Checkpoint::load(&ckpt_path)?;
            check_compatible(cfg, &ck.config)?;
            log::info!("resuming from {} at stage {} epoch {}", ckpt_path.display(), ck.stage_index, ck.epochs_done);
            (ck.store, ck.adam, ck.stage_index, ck.epochs_done)
        } else {
            fs::write(self.out("history.csv"), format!("{HISTORY_HEADER}\n")).map_err(io_err("writing history"))?;
            let store = self.model.init(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
            (store, AdamW::new(cfg.optim.clone()), 0, 0)
        };

        let mut report = TrainReport {
            history: Vec::new(),
            stages: Vec::new(),
            final_report: None,
        };
        // reports of stages finished before a resume
        for &stage in &plan[..stage_index.min(plan.len())] {
            let ck = Checkpoint::load(self.out(&format!("{stage}.pack")))?;
            report.stages.push((stage, self.score(&ck.store, train_set)?));
        }

        let mut run_epochs = 0;
        while stage_index < plan.len() {
            let stage = plan[stage_index];
            while epochs_done < cfg.schedule.epochs {
                if cfg.stop_after > 0 && run_epochs == cfg.stop_after {
                    log::info!("stopping after {run_epochs} epochs as configured");
                    return Ok(report);
                }
                let mut log = self.epoch(&mut store, &mut adam, train_set, stage, stage_index, epochs_done)?;
                if let Some(v) = val {
                    log.val = Some(self.score(&store, v)?);
                }
                epochs_done += 1;
                run_epochs += 1;
                log::info!(
                    "{stage} epoch {}/{} lr {:.2e} lambda {} loss {:.4} (sed {:.4}, doa {:.4}, dist {:.4}){}",
                    log.epoch,
                    cfg.schedule.epochs,
                    log.lr,
                    log.weights,
                    log.loss,
                    log.sed,
                    log.doa,
                    log.dist,
                    log.val.as_ref().map_or(String::new(), |r| format!(" val {}", r.to_text().replace('\n', " ")))
                );
                append(&self.out("history.csv"), &log.csv_row())?;
                report.history.push(log);
                Checkpoint {
                    config: cfg.clone(),
                    store: store.clone(),
                    adam: adam.clone(),
                    stage_index,
                    epochs_done,
                }
                .save(&ckpt_path)?;
            }
            let metrics = self.score(&store, train_set)?;
            log::info!("{stage} finished, training set: {}", metrics.to_text().replace('\n', "; "));
            report.stages.push((stage, metrics));
            fs::copy(&ckpt_path, self.out(&format!("{stage}.pack"))).map_err(io_err("copying stage checkpoint"))?;

            // the next stage continues from these weights with fresh moments
            stage_index += 1;
            epochs_done = 0;
            adam = AdamW::new(cfg.optim.clone());
            Checkpoint {
                config: cfg.clone(),
                store: store.clone(),
                adam: adam.clone(),
                stage_index,
                epochs_done,
            }
            .save(&ckpt_path)?;
        }

        let final_report = match val {
            Some(v) => self.score(&store, v)?,
            None => report.stages.last().expect("at least one stage").1.clone(),
        };
        fs::write(self.out("report.txt"), final_report.to_text()).map_err(io_err("writing report"))?;
        fs::write(self.out("report.json"), final_report.to_json()).map_err(io_err("writing report"))?;
        report.final_report = Some(final_report);
        Ok(report)
    }

    pub fn score(&self, store: &ParamStore, ds: &Dataset) -> Result<MetricReport> {
        score(&self.model, store, ds, self.cfg.batch_size, self.cfg.sed_threshold)
    }

    /// One pass over the shuffled training set.
    pub fn epoch(
        &self,
        store: &mut ParamStore,
        adam: &mut AdamW,
        ds: &Dataset,
        stage: Stage,
        stage_index: usize,
        epoch: usize,
    ) -> Result<EpochLog> {
        let cfg = &self.cfg;
        let weights = stage.weights();
        let lr = cfg.schedule.lr(cfg.optim.lr, epoch);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((stage_index as u64) << 32 | epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);

        let (mut loss, mut sed, mut doa, mut dist) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let (input, tgt) = ds.batch(chunk)?;
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, store, true);
            let out = self.model.forward(&mut ctx, &input)?;
            let pit = pit_loss(ctx.g, &out, &tgt, weights)?;
            ctx.g.backward(pit.loss, &Tensor::scalar(1.0))?;
            let grads = ctx.grads();
            let stats = ctx.take_bn_stats();
            let values = out.values(ctx.g);
            let (s, d, r) = component_loss_values(&values, &tgt.align(&pit.best)?, [0, 1, 2])?;
            let n = chunk.len() as f64;
            loss += n * g.value(pit.loss).item();
            sed += n * s;
            doa += n * d;
            dist += n * r;
            adam.step(store, &grads, lr)?;
            update_bn_buffers(store, &stats, cfg.model.bn_momentum)?;
        }
        let n = ds.len() as f64;
        Ok(EpochLog {
            stage,
            epoch: epoch + 1,
            lr,
            weights,
            loss: loss / n,
            sed: sed / n,
            doa: doa / n,
            dist: dist / n,
            val: None,
        })
    }
}

fn check_compatible(cfg: &RunConfig, saved: &RunConfig) -> Result<()> {
    for ((k, a), (_, b)) in cfg.architecture().iter().zip(saved.architecture()) {
        if *a != b {
            return Err(SeldError::Checkpoint(format!(
                "incompatible checkpoint: {k} is {b} in the checkpoint but {a} in the config"
            )));
        }
    }
    Ok(())
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(io_err(format!("opening {}", path.display())))?;
    writeln!(f, "{line}").map_err(io_err(format!("writing {}", path.display())))
}
