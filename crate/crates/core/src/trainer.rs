//! Training loop, evaluation, warm-up and checkpoint (de)serialization of the
//! full training state.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mmdg_autodiff::{CounterRng, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, TrainConfig};
use crate::data::{load_manifest, Batch, Dataset, Sample};
use crate::error::{io_err, MmdgError, Result};
use crate::losses::{
    classification_losses, final_loss, ssp_loss, ssp_variance, DomainSet, PrototypeTable,
};
use crate::metrics::{report, MetricReport, ScoreSet};
use crate::modality::{Modality, PerModality};
use crate::model::{ForwardOptions, Model};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::Binder;
use crate::protocol::{build_protocols, find_protocol, impute_missing, Imputation, ProtocolSpec};
use crate::regrad::{apply_modulation, decompose_gradients, ConvergenceState};
use crate::synth::{generate_domain, preset, PRESET_NAMES};
use crate::uem::modality_uncertainty;

const SHUFFLE_TAG: u64 = 0x5348_5546;
const STEP_TAG: u64 = 0x5354_4550;
const EVAL_TAG: u64 = 0x4556_414c;

/// Train and test data of one protocol.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    /// Training datasets in spoof-domain order.
    pub sources: Vec<String>,
}

/// Domain names available to protocols: the synthetic presets, or every
/// dataset name appearing in the manifests (sorted).
pub fn domain_names(cfg: &TrainConfig) -> Result<Vec<String>> {
    match &cfg.data {
        DataSource::Synthetic { .. } => Ok(PRESET_NAMES.iter().map(|s| s.to_string()).collect()),
        DataSource::Manifest { paths } => {
            let mut names = Vec::new();
            for p in paths {
                for r in load_manifest(p)?.records {
                    if !names.contains(&r.dataset) {
                        names.push(r.dataset);
                    }
                }
            }
            names.sort();
            Ok(names)
        }
    }
}

pub fn resolve_protocol(cfg: &TrainConfig, name: &str) -> Result<ProtocolSpec> {
    let names = domain_names(cfg)?;
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    Ok(find_protocol(&build_protocols(&refs)?, name)?.clone())
}

fn synthetic_domain(cfg: &TrainConfig, name: &str) -> Result<Dataset> {
    let DataSource::Synthetic {
        n_live,
        n_spoof,
        seed,
        corruption,
    } = &cfg.data
    else {
        unreachable!("synthetic source expected")
    };
    let mut spec = preset(name, cfg.model.backbone.image_size)?;
    if let Some(p) = corruption {
        spec = spec.with_corruption_probability(*p);
    }
    generate_domain(&spec, *n_live, *n_spoof, *seed)
}

pub fn load_splits(cfg: &TrainConfig, spec: &ProtocolSpec) -> Result<Splits> {
    let mut train = Dataset::default();
    let mut test = Dataset::default();
    match &cfg.data {
        DataSource::Synthetic { .. } => {
            for d in &spec.train {
                train.extend(synthetic_domain(cfg, d)?);
            }
            for d in &spec.test {
                test.extend(synthetic_domain(cfg, d)?);
            }
        }
        DataSource::Manifest { paths } => {
            for p in paths {
                let all = load_manifest(p)?.load_all(cfg.model.backbone.image_size)?;
                for s in all.samples {
                    if spec.train.contains(&s.dataset) {
                        train.samples.push(s);
                    } else if spec.test.contains(&s.dataset) {
                        test.samples.push(s);
                    }
                }
            }
        }
    }
    if train.is_empty() {
        return Err(MmdgError::Data(format!(
            "no training samples for protocol {}",
            spec.name
        )));
    }
    Ok(Splits {
        train,
        test,
        sources: spec.train.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub ce: f64,
    pub ce_per_modality: [f64; 3],
    pub ssp: [f64; 3],
    pub ssp_variance: f64,
    pub u: [f64; 3],
    pub cases: BTreeMap<String, BTreeMap<String, usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposition_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub mean_loss: f64,
    pub mean_ssp_variance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
}

/// Model, prototypes, optimizer and speed state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub prototypes: PrototypeTable,
    pub adam: AdamState,
    pub convergence: ConvergenceState,
    pub step: u64,
    pub epoch: u64,
    pub domains: DomainSet,
    pub sources: Vec<String>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, sources: Vec<String>) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let domains = DomainSet {
            n_sources: sources.len(),
        };
        Ok(Self {
            prototypes: PrototypeTable::new(
                domains,
                cfg.model.backbone.hidden_c,
                cfg.prototype_momentum,
            ),
            convergence: ConvergenceState::new(cfg.ssp_ema),
            adam: AdamState::default(),
            step: 0,
            epoch: 0,
            domains,
            sources,
            model,
            cfg,
        })
    }

    fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.cfg.lr,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            eps: self.cfg.adam_eps,
            weight_decay: self.cfg.weight_decay,
        }
    }

    pub fn batch(&self, samples: &[&Sample]) -> Result<Batch> {
        Batch::from_samples(samples, Some((&self.sources, self.domains)))
    }

    /// Batches of one epoch in a seeded shuffled order.
    pub fn epoch_batches<'a>(&self, data: &'a Dataset, epoch: u64) -> Vec<Vec<&'a Sample>> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let key = CounterRng::new(self.cfg.seed)
            .derive(SHUFFLE_TAG)
            .bits(0, epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
        order
            .chunks(self.cfg.batch_size)
            .map(|c| c.iter().map(|&i| &data.samples[i]).collect())
            .collect()
    }

    /// Sets every prototype to the mean final class token of its domain over
    /// `data`, using deterministic forward passes.
    pub fn init_prototypes(&mut self, data: &Dataset) -> Result<()> {
        let c = self.cfg.model.backbone.hidden_c;
        let mut feats: PerModality<Vec<f64>> = Default::default();
        let mut domains = Vec::with_capacity(data.len());
        let refs: Vec<&Sample> = data.samples.iter().collect();
        for (k, chunk) in refs.chunks(self.cfg.batch_size).enumerate() {
            let batch = self.batch(chunk)?;
            let mut g = Graph::new();
            let mut binder = Binder::new(&self.model.store);
            let seed = CounterRng::new(self.cfg.seed)
                .derive(EVAL_TAG)
                .derive(k as u64);
            let out = self.model.forward(
                &mut g,
                &mut binder,
                &batch.images,
                &ForwardOptions::eval(seed),
            )?;
            for m in 0..3 {
                feats[m].extend_from_slice(g.data(out.class_tokens[m]));
            }
            domains.extend_from_slice(&batch.domains);
        }
        let n = domains.len();
        let tensors: Vec<Tensor> = feats
            .into_iter()
            .map(|f| Tensor::new(vec![n, c], f))
            .collect::<std::result::Result<_, _>>()?;
        let mut table = PrototypeTable::new(self.domains, c, self.cfg.prototype_momentum);
        table.update(&[&tensors[0], &tensors[1], &tensors[2]], &domains)?;
        if !table.is_initialized() {
            return Err(MmdgError::Data(
                "every training domain needs at least one sample".into(),
            ));
        }
        self.prototypes = table;
        Ok(())
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let seed = CounterRng::new(self.cfg.seed)
            .derive(STEP_TAG)
            .derive(self.step);
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.model.store);
        let out = self.model.forward(
            &mut g,
            &mut binder,
            &batch.images,
            &ForwardOptions::train(seed),
        )?;
        let ce = classification_losses(&mut g, &out.logits, &batch.labels)?;
        let mut ssp = Vec::with_capacity(3);
        for m in Modality::ALL {
            ssp.push(ssp_loss(
                &mut g,
                out.class_tokens[m.index()],
                &batch.domains,
                &self.prototypes,
                m,
            )?);
        }
        let ssp: PerModality<_> = ssp.try_into().unwrap();
        let loss = final_loss(&mut g, ce.total, &ssp, self.cfg.lambda)?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(MmdgError::NonFiniteLoss { step: self.step });
        }
        let ssp_sum = g.add_all(&ssp)?;
        let bound = binder.into_bound();
        let trainable = self.model.store.trainable_names();
        let mg = decompose_gradients(&g, &bound, &trainable, &ce.parts, ssp_sum)?;

        let decomposition_error = if self.cfg.check_decomposition {
            let full = g.backward(ce.total)?;
            let mut worst: f64 = 0.0;
            for (name, pg) in &mg {
                let f = full.get_or_zeros(&g, bound[name]);
                for (k, fv) in f.iter().enumerate() {
                    let s: f64 = pg.per_modality.iter().map(|v| v[k]).sum();
                    worst = worst.max((s - fv).abs());
                }
            }
            Some(worst)
        } else {
            None
        };

        let ssp_values = ssp.map(|v| g.value(v).item());
        self.convergence.observe(ssp_values);
        let u = Modality::ALL.map(|m| modality_uncertainty(m, &out.last_maps()[m.index()]).u);
        let r_e = if self.cfg.regrad_uncertainty {
            self.cfg.model.adapter.r_e
        } else {
            0.0
        };
        let (grads, hist) = apply_modulation(
            &mg,
            &self.convergence,
            &u,
            r_e,
            self.cfg.lambda,
            self.cfg.modulation,
        );
        let ac = self.adam_config();
        adam_step(&mut self.model.store, &grads, &ac, &mut self.adam)?;

        let feats = out.class_tokens.map(|v| g.value(v));
        self.prototypes.update(&feats, &batch.domains)?;

        let record = StepRecord {
            step: self.step,
            epoch: self.epoch,
            loss: loss_value,
            ce: g.value(ce.total).item(),
            ce_per_modality: ce.per_modality.map(|v| g.value(v).item()),
            ssp: ssp_values,
            ssp_variance: ssp_variance(&ssp_values),
            u,
            cases: hist
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().map(|(c, n)| (c.to_string(), n)).collect()))
                .collect(),
            decomposition_error,
        };
        self.step += 1;
        Ok(record)
    }

    /// Backbone warm-up step: classification loss only, no adapters, plain
    /// gradients on every trainable parameter the forward pass touched.
    pub fn pretrain_step(&mut self, batch: &Batch) -> Result<f64> {
        let seed = CounterRng::new(self.cfg.seed)
            .derive(STEP_TAG)
            .derive(self.step);
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.model.store);
        let mut opts = ForwardOptions::train(seed);
        opts.use_adapters = false;
        let out = self
            .model
            .forward(&mut g, &mut binder, &batch.images, &opts)?;
        let ce = classification_losses(&mut g, &out.logits, &batch.labels)?;
        let value = g.value(ce.total).item();
        if !value.is_finite() {
            return Err(MmdgError::NonFiniteLoss { step: self.step });
        }
        let grads = g.backward(ce.total)?;
        let bound = binder.into_bound();
        let mut out_grads = BTreeMap::new();
        for name in self.model.store.trainable_names() {
            if let Some(&v) = bound.get(&name) {
                out_grads.insert(name, grads.get_or_zeros(&g, v));
            }
        }
        let ac = self.adam_config();
        adam_step(&mut self.model.store, &out_grads, &ac, &mut self.adam)?;
        self.step += 1;
        Ok(value)
    }

    /// Spoof scores on `data` with `missing` modalities imputed.
    pub fn scores(
        &self,
        data: &Dataset,
        missing: &[Modality],
        imputation: Imputation,
    ) -> Result<ScoreSet> {
        let mut scores = Vec::with_capacity(data.len());
        let mut labels = Vec::with_capacity(data.len());
        let refs: Vec<&Sample> = data.samples.iter().collect();
        for (k, chunk) in refs.chunks(self.cfg.batch_size).enumerate() {
            let batch = Batch::from_samples(chunk, None)?;
            let batch = impute_missing(&batch, missing, imputation, self.cfg.seed ^ k as u64)?;
            let mut g = Graph::new();
            let mut binder = Binder::new(&self.model.store);
            let seed = CounterRng::new(self.cfg.seed)
                .derive(EVAL_TAG)
                .derive(k as u64);
            let out = self.model.forward(
                &mut g,
                &mut binder,
                &batch.images,
                &ForwardOptions::eval(seed),
            )?;
            scores.extend(Model::scores(&g, &out));
            labels.extend_from_slice(&batch.labels);
        }
        ScoreSet::new(scores, labels)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut entries = Vec::new();
        for (name, p) in self.model.store.iter() {
            entries.push((format!("param.{name}"), p.tensor.clone()));
        }
        let c = self.prototypes.dim;
        for m in Modality::ALL {
            for (d, cen) in self.prototypes.centroids[m.index()].iter().enumerate() {
                if let Some(v) = cen {
                    entries.push((
                        format!("prototypes.{m}.{d}"),
                        Tensor::new(vec![c], v.clone())?,
                    ));
                }
            }
            let counts = self.prototypes.counts[m.index()]
                .iter()
                .map(|&n| n as f64)
                .collect();
            entries.push((
                format!("prototype_counts.{m}"),
                Tensor::new(vec![self.domains.len()], counts)?,
            ));
        }
        entries.push(("adam.t".into(), Tensor::scalar(self.adam.t as f64)));
        for (name, m) in &self.adam.m {
            entries.push((
                format!("adam.m.{name}"),
                Tensor::new(vec![m.len()], m.clone())?,
            ));
        }
        for (name, v) in &self.adam.v {
            entries.push((
                format!("adam.v.{name}"),
                Tensor::new(vec![v.len()], v.clone())?,
            ));
        }
        entries.push((
            "convergence.ssp".into(),
            Tensor::new(vec![3], self.convergence.ssp.to_vec())?,
        ));
        entries.push((
            "convergence.initialized".into(),
            Tensor::scalar(f64::from(u8::from(self.convergence.initialized))),
        ));
        Ok(Checkpoint {
            config_toml: self.cfg.to_toml()?,
            step: self.step,
            epoch: self.epoch,
            entries,
        })
    }

    /// Restores a full training state. The checkpoint's configuration is
    /// used as is.
    pub fn from_checkpoint(ck: &Checkpoint, sources: Vec<String>) -> Result<Self> {
        let cfg = TrainConfig::from_toml(&ck.config_toml)?;
        let mut t = Self::new(cfg, sources)?;
        t.load_parameters(ck)?;
        for m in Modality::ALL {
            for d in 0..t.domains.len() {
                if let Ok(v) = ck.get(&format!("prototypes.{m}.{d}")) {
                    t.prototypes.centroids[m.index()][d] = Some(v.data().to_vec());
                }
            }
            if let Ok(c) = ck.get(&format!("prototype_counts.{m}")) {
                t.prototypes.counts[m.index()] = c.data().iter().map(|&n| n as u64).collect();
            }
        }
        t.adam.t = ck.get("adam.t")?.item() as u64;
        for (name, v) in ck.with_prefix("adam.m.") {
            t.adam.m.insert(name.to_string(), v.data().to_vec());
        }
        for (name, v) in ck.with_prefix("adam.v.") {
            t.adam.v.insert(name.to_string(), v.data().to_vec());
        }
        let ssp = ck.get("convergence.ssp")?.data();
        t.convergence.ssp = [ssp[0], ssp[1], ssp[2]];
        t.convergence.initialized = ck.get("convergence.initialized")?.item() != 0.0;
        t.step = ck.step;
        t.epoch = ck.epoch;
        Ok(t)
    }

    /// Copies every stored parameter whose name and shape match.
    pub fn load_parameters(&mut self, ck: &Checkpoint) -> Result<()> {
        for (name, v) in ck.with_prefix("param.") {
            let dst = self.model.store.tensor_mut(name)?;
            if dst.shape() != v.shape() {
                return Err(MmdgError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, checkpoint holds {:?}",
                    dst.shape(),
                    v.shape()
                )));
            }
            *dst = v.clone();
        }
        Ok(())
    }
}

/// NDJSON and CSV writers under an optional output directory.
pub struct RunLog {
    dir: Option<PathBuf>,
}

impl RunLog {
    pub fn new(dir: Option<&Path>) -> Result<Self> {
        if let Some(d) = dir {
            fs::create_dir_all(d).map_err(io_err(d))?;
        }
        Ok(Self {
            dir: dir.map(Path::to_path_buf),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn append_json<T: Serialize>(&self, file: &str, value: &T) -> Result<()> {
        self.append_line(file, &serde_json::to_string(value)?)
    }

    pub fn append_line(&self, file: &str, line: &str) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(file);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        writeln!(f, "{line}").map_err(io_err(&path))
    }

    pub fn write(&self, file: &str, text: &str) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(file);
        fs::write(&path, text).map_err(io_err(&path))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// How to obtain the initial state of [`run_training`].
#[derive(Debug, Clone, Default)]
pub enum Start {
    #[default]
    Fresh,
    /// Parameters from a warm-up checkpoint, fresh optimizer and prototypes.
    Init(Checkpoint),
    /// Continue an interrupted run.
    Resume(Checkpoint),
}

/// Trains until `cfg.epochs`, logging to `log` and saving `last.ckpt` after
/// every epoch. A resumed run keeps the snapshot's configuration except for
/// `cfg.epochs`. On a non-finite loss the last saved checkpoint is kept and the
/// error returned.
pub fn run_training(
    cfg: &TrainConfig,
    splits: &Splits,
    start: Start,
    log: &RunLog,
) -> Result<TrainOutcome> {
    let mut trainer = match &start {
        Start::Resume(ck) => {
            // Everything but the run length comes from the snapshot.
            let mut t = Trainer::from_checkpoint(ck, splits.sources.clone())?;
            t.cfg.epochs = cfg.epochs;
            t
        }
        _ => Trainer::new(cfg.clone(), splits.sources.clone())?,
    };
    if let Start::Init(ck) = &start {
        trainer.load_parameters(ck)?;
    }
    if !matches!(start, Start::Resume(_)) {
        trainer.init_prototypes(&splits.train)?;
    }
    let spec = resolve_protocol(&trainer.cfg, &trainer.cfg.protocol).ok();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    while trainer.epoch < trainer.cfg.epochs as u64 {
        let batches = trainer.epoch_batches(&splits.train, trainer.epoch);
        let mut epoch_steps = Vec::with_capacity(batches.len());
        for chunk in batches {
            let batch = trainer.batch(&chunk)?;
            let rec = trainer.train_step(&batch)?;
            log.append_json("steps.ndjson", &rec)?;
            epoch_steps.push(rec);
        }
        trainer.epoch += 1;
        let n = epoch_steps.len().max(1) as f64;
        let metrics = if trainer.cfg.eval_every_epoch && !splits.test.is_empty() {
            let missing = spec.as_ref().map(|s| s.missing.clone()).unwrap_or_default();
            let scores = trainer.scores(&splits.test, &missing, trainer.cfg.imputation)?;
            Some(report(&trainer.cfg.protocol, &scores)?)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch: trainer.epoch,
            step: trainer.step,
            mean_loss: epoch_steps.iter().map(|s| s.loss).sum::<f64>() / n,
            mean_ssp_variance: epoch_steps.iter().map(|s| s.ssp_variance).sum::<f64>() / n,
            metrics,
        };
        log.append_json("epochs.ndjson", &rec)?;
        if trainer.epoch == 1 {
            log.append_line(
                "epochs.csv",
                "epoch,step,mean_loss,mean_ssp_variance,hter,auc",
            )?;
        }
        let (h, a) = rec
            .metrics
            .as_ref()
            .map_or((f64::NAN, f64::NAN), |m| (m.hter, m.auc));
        log.append_line(
            "epochs.csv",
            &format!(
                "{},{},{},{},{h},{a}",
                rec.epoch, rec.step, rec.mean_loss, rec.mean_ssp_variance
            ),
        )?;
        if let Some(dir) = log.dir() {
            trainer.to_checkpoint()?.save(&dir.join("last.ckpt"))?;
        }
        steps.extend(epoch_steps);
        epochs.push(rec);
    }
    Ok(TrainOutcome {
        trainer,
        steps,
        epochs,
    })
}

/// Backbone warm-up without adapters for `cfg.pretrain_epochs`, after which
/// the backbone is frozen again.
pub fn run_pretrain(cfg: &TrainConfig, splits: &Splits, log: &RunLog) -> Result<Trainer> {
    let mut t = Trainer::new(cfg.clone(), splits.sources.clone())?;
    t.model.store.set_trainable_prefix("backbone.", true);
    for epoch in 0..cfg.pretrain_epochs as u64 {
        let batches = t.epoch_batches(&splits.train, epoch);
        let mut total = 0.0;
        let n = batches.len();
        for chunk in batches {
            let batch = t.batch(&chunk)?;
            total += t.pretrain_step(&batch)?;
        }
        log.append_json(
            "pretrain.ndjson",
            &serde_json::json!({"epoch": epoch + 1, "mean_loss": total / n.max(1) as f64}),
        )?;
    }
    t.model.store.set_trainable_prefix("backbone.", false);
    t.adam = AdamState::default();
    t.step = 0;
    Ok(t)
}
