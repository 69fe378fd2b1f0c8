//! Two-stage self-supervised training.
//!
//! Stage 1 optimizes L2M (and L2U in S2/S3) while feeding the support
//! queues. In S3, at `stage2_start_step` the training corpus is embedded
//! once, k-nearest-neighbor tables are mined per modality, and L2R joins
//! the objective. With `freeze_backbones_stage2` only the cluster heads
//! receive updates from then on.
//!
//! Support queues are not checkpointed: a resumed run restarts them empty.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::document::{DocumentPair, Modality};
use crate::encoders::{Checkpoint, FeatureSource, GlobalDocModel, ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::objectives::{
    neighbor_targets, total_loss, LossInputs, LossSwitches, LossValues, ObjectiveConfig, ReorganizeInputs, Setting,
};
use crate::queue::{mine_neighbor_table, SupportQueue};
use crate::rng::SplitMix64;

/// Paper-scale reference values.
pub mod paper {
    pub const BATCH_SIZE: usize = 128;
    pub const TOTAL_STEPS: usize = 499_600;
    pub const WEIGHT_DECAY: f64 = 1e-2;
    pub const PEAK_LR: f64 = 1e-4;
    pub const FINAL_LR: f64 = 5e-5;
    pub const WARMUP_FRACTION: f64 = 0.1;
    pub const TEMPERATURE: f64 = 0.07;
    pub const QUEUE_CAPACITY: usize = 65_536;
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const MAX_NONFINITE_STEPS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub setting: Setting,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub objective: ObjectiveConfig,
    pub queue_capacity: usize,
    pub stage2_start_step: usize,
    pub freeze_backbones_stage2: bool,
    pub grad_clip: f64,
    pub seed: u64,
    pub deterministic: bool,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            setting: Setting::S2,
            batch_size: 16,
            total_steps: 2000,
            warmup_fraction: 0.1,
            peak_lr: 1e-3,
            final_lr: 5e-4,
            weight_decay: paper::WEIGHT_DECAY,
            objective: ObjectiveConfig::default(),
            queue_capacity: 512,
            stage2_start_step: 1500,
            freeze_backbones_stage2: true,
            grad_clip: 5.0,
            seed: 0,
            deterministic: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!("warmup_fraction {} outside (0, 1)", self.warmup_fraction)));
        }
        if !(self.peak_lr > 0.0) || !(self.final_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates and weight decay must be non-negative".into()));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("queue_capacity must be positive".into()));
        }
        if self.setting == Setting::S3 && self.stage2_start_step >= self.total_steps {
            return Err(Error::Config(format!(
                "stage2_start_step {} must be below total_steps {}",
                self.stage2_start_step, self.total_steps
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.total_steps as f64).round() as usize).clamp(1, self.total_steps)
    }

    /// Whether step `step` optimizes the reorganization objective.
    pub fn in_stage2(&self, step: usize) -> bool {
        self.setting == Setting::S3 && step >= self.stage2_start_step
    }
}

/// Learning rate applied by update `step` (0-based): a linear ramp that
/// reaches `peak_lr` at the last warmup step (so step 0 uses
/// `peak_lr / warmup_steps`), then a linear decay that reaches `final_lr`
/// at `total_steps − 1`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_steps();
    if step < w {
        return cfg.peak_lr * (step + 1) as f64 / w as f64;
    }
    let span = cfg.total_steps.saturating_sub(w);
    if span == 0 {
        return cfg.final_lr;
    }
    let frac = ((step + 1 - w) as f64 / span as f64).min(1.0);
    cfg.peak_lr + (cfg.final_lr - cfg.peak_lr) * frac
}

/// Decoupled-weight-decay Adam. Moments and step counts are kept per
/// parameter so that tensors frozen for a while are bias-corrected from
/// their own first update.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
    steps: Vec<u64>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &ParamStore<S>, weight_decay: f64) -> Self {
        let zeros = |id: ParamId| vec![S::zero(); params.get(id).len()];
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
            first: params.ids().map(zeros).collect(),
            second: params.ids().map(zeros).collect(),
            steps: vec![0; params.len()],
        }
    }

    /// Apply one update to the listed parameters.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[(ParamId, Tensor<S>)], lr: f64) -> Result<()> {
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let (one, eps) = (S::one(), S::of(self.eps));
        let lr_s = S::of(lr);
        let decay = S::of(1.0 - lr * self.weight_decay);
        for (id, g) in grads {
            let i = id.index();
            let w = params.get_mut(*id);
            if w.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: w.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = S::of(1.0 - self.beta1.powi(t));
            let c2 = S::of(1.0 - self.beta2.powi(t));
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w = *w * decay - lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self, id: ParamId) -> (&[S], &[S], u64) {
        let i = id.index();
        (&self.first[i], &self.second[i], self.steps[i])
    }

    pub fn set_moments(&mut self, id: ParamId, first: Vec<S>, second: Vec<S>, steps: u64) -> Result<()> {
        let i = id.index();
        if first.len() != self.first[i].len() || second.len() != self.second[i].len() {
            return Err(Error::Shape {
                op: "adamw_moments",
                lhs: vec![self.first[i].len()],
                rhs: vec![first.len(), second.len()],
            });
        }
        self.first[i] = first;
        self.second[i] = second;
        self.steps[i] = steps;
        Ok(())
    }
}

/// Scale `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [(ParamId, Tensor<S>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = S::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

/// One metrics record per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub losses: LossValues,
    pub lr: f64,
    pub grad_norm: f64,
    /// False when the update was skipped for a non-finite gradient.
    pub applied: bool,
}

impl StepMetrics {
    pub fn to_line(&self) -> String {
        let l = &self.losses;
        format!(
            "step={} loss_total={} loss_l2m_inter={} loss_l2m_intra={} loss_l2u={} loss_l2r_v={} loss_l2r_t={} lr={} grad_norm={} applied={}",
            self.step,
            l.total,
            l.l2m_inter,
            l.l2m_intra,
            l.l2u,
            l.l2r_vision,
            l.l2r_language,
            self.lr,
            self.grad_norm,
            self.applied
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut m = StepMetrics {
            step: 0,
            losses: LossValues::default(),
            lr: 0.0,
            grad_norm: 0.0,
            applied: true,
        };
        let bad = || Error::InvalidArgument(format!("malformed metrics line '{line}'"));
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(bad)?;
            let f = || v.parse::<f64>().map_err(|_| bad());
            match k {
                "step" => m.step = v.parse().map_err(|_| bad())?,
                "loss_total" => m.losses.total = f()?,
                "loss_l2m_inter" => m.losses.l2m_inter = f()?,
                "loss_l2m_intra" => m.losses.l2m_intra = f()?,
                "loss_l2u" => m.losses.l2u = f()?,
                "loss_l2r_v" => m.losses.l2r_vision = f()?,
                "loss_l2r_t" => m.losses.l2r_language = f()?,
                "lr" => m.lr = f()?,
                "grad_norm" => m.grad_norm = f()?,
                "applied" => m.applied = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        Ok(m)
    }
}

/// Neighbor tables and cached clustering features for stage 2.
#[derive(Debug, Clone)]
pub struct NeighborTables {
    pub k: usize,
    pub vision: Vec<Vec<usize>>,
    pub language: Vec<Vec<usize>>,
    pub vision_features: Vec<Vec<f32>>,
    pub language_features: Vec<Vec<f32>>,
}

/// Clustering features of every document, computed without gradients.
pub fn corpus_features(model: &GlobalDocModel<f32>, docs: &[DocumentPair]) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let use_cmae = model.config().cluster_input == FeatureSource::Fused;
    let mut v = Vec::with_capacity(docs.len());
    let mut t = Vec::with_capacity(docs.len());
    for d in docs {
        let (rv, rt) = model.embed_pair(d, use_cmae)?;
        v.push(rv.vector);
        t.push(rt.vector);
    }
    Ok((v, t))
}

pub fn mine_neighbors(model: &GlobalDocModel<f32>, docs: &[DocumentPair], k: usize) -> Result<NeighborTables> {
    if k >= docs.len() {
        return Err(Error::NotEnoughNeighbors {
            requested: k,
            available: docs.len().saturating_sub(1),
        });
    }
    let (vision_features, language_features) = corpus_features(model, docs)?;
    Ok(NeighborTables {
        k,
        vision: mine_neighbor_table(&vision_features, k)?,
        language: mine_neighbor_table(&language_features, k)?,
        vision_features,
        language_features,
    })
}

/// Mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: GlobalDocModel<f32>,
    pub optimizer: AdamW<f32>,
    pub vision_queue: SupportQueue,
    pub language_queue: SupportQueue,
    pub rng: SplitMix64,
    pub step: usize,
    pub history: Vec<StepMetrics>,
    pub neighbors: Option<NeighborTables>,
    order: Vec<usize>,
    cursor: usize,
    nonfinite_streak: usize,
}

fn rows_constant(tape: &mut Tape<f32>, rows: impl Iterator<Item = Vec<f32>>) -> Result<Var> {
    let rows: Vec<Vec<f32>> = rows.collect();
    Ok(tape.constant(Tensor::from_rows(&rows)?))
}

fn unit_rows(tape: &Tape<f32>, v: Var) -> Vec<Vec<f32>> {
    let t = tape.value(v);
    let (m, _) = t.rows_cols();
    (0..m).map(|i| t.row(i).to_vec()).collect()
}

impl Trainer {
    pub fn new(config: TrainConfig, model: GlobalDocModel<f32>) -> Result<Self> {
        config.validate()?;
        if !config.setting.uses_cmae() && config.objective.l2m_input == FeatureSource::Fused {
            return Err(Error::Config("l2m_input=fused needs a setting with the CMAE (S2 or S3)".into()));
        }
        let optimizer = AdamW::new(model.params(), config.weight_decay);
        Ok(Self {
            vision_queue: SupportQueue::new(config.queue_capacity, Modality::Vision)?,
            language_queue: SupportQueue::new(config.queue_capacity, Modality::Language)?,
            rng: SplitMix64::derive(config.seed, 0x7472_6169_6e),
            optimizer,
            model,
            config,
            step: 0,
            history: Vec::new(),
            neighbors: None,
            order: Vec::new(),
            cursor: 0,
            nonfinite_streak: 0,
        })
    }

    fn next_batch(&mut self, n: usize) -> Result<Vec<usize>> {
        let m = self.config.batch_size;
        if n < m {
            return Err(Error::Config(format!("corpus of {n} documents is smaller than batch size {m}")));
        }
        if self.order.len() != n || self.cursor + m > n {
            self.order = (0..n).collect();
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + m].to_vec();
        self.cursor += m;
        Ok(batch)
    }

    fn trainable(&self, stage2: bool) -> impl Fn(ParamGroup) -> bool {
        let frozen_backbones = stage2 && self.config.freeze_backbones_stage2;
        let cmae = self.config.setting.uses_cmae();
        move |g| match g {
            ParamGroup::Cluster => stage2,
            _ if frozen_backbones => false,
            ParamGroup::Cmae => cmae,
            _ => true,
        }
    }

    /// Run one optimizer step on a batch drawn from `docs`.
    pub fn train_step(&mut self, docs: &[DocumentPair]) -> Result<StepMetrics> {
        let step = self.step;
        let stage2 = self.config.in_stage2(step);
        if stage2 && self.neighbors.is_none() {
            if step == 0 {
                log::warn!("mining neighbors from untrained features at step 0");
            }
            log::info!("step {step}: mining {}-NN tables over {} documents", self.config.objective.k_mine, docs.len());
            self.neighbors = Some(mine_neighbors(&self.model, docs, self.config.objective.k_mine)?);
        }
        let batch = self.next_batch(docs.len())?;
        let pairs: Vec<&DocumentPair> = batch.iter().map(|&i| &docs[i]).collect();
        let cfg = &self.config;
        let obj = &cfg.objective;

        let mut tape = Tape::<f32>::new();
        let bound = self.model.bind(&mut tape, self.trainable(stage2));
        let out = self.model.forward_batch(&mut tape, &bound, &pairs, cfg.setting.uses_cmae())?;
        let pick = |src: FeatureSource| match src {
            FeatureSource::Projection => Some((out.projected_vision, out.projected_language)),
            FeatureSource::Fused => out.fused_vision.zip(out.fused_language),
        };
        let (l2m_v, l2m_t) = pick(obj.l2m_input).ok_or_else(|| Error::Config("l2m input unavailable".into()))?;
        let (nn_v, _) = neighbor_targets(&mut tape, &self.vision_queue, l2m_v)?;
        let (nn_t, _) = neighbor_targets(&mut tape, &self.language_queue, l2m_t)?;
        let unify = pick(obj.l2u_input);
        let reorganize = match (&self.neighbors, stage2) {
            (Some(nb), true) => {
                let (fv, ft) = pick(self.model.config().cluster_input)
                    .ok_or_else(|| Error::Config("cluster input unavailable".into()))?;
                let k = nb.k;
                let nv = rows_constant(&mut tape, batch.iter().flat_map(|&i| nb.vision[i].iter().map(|&j| nb.vision_features[j].clone())))?;
                let nt = rows_constant(&mut tape, batch.iter().flat_map(|&i| nb.language[i].iter().map(|&j| nb.language_features[j].clone())))?;
                Some(ReorganizeInputs {
                    vision_anchors: self.model.cluster_assignments(&mut tape, &bound, fv, Modality::Vision)?,
                    vision_neighbors: self.model.cluster_assignments(&mut tape, &bound, nv, Modality::Vision)?,
                    language_anchors: self.model.cluster_assignments(&mut tape, &bound, ft, Modality::Language)?,
                    language_neighbors: self.model.cluster_assignments(&mut tape, &bound, nt, Modality::Language)?,
                    k,
                })
            }
            _ => None,
        };
        let switches = LossSwitches {
            l2r: stage2,
            ..cfg.setting.switches()
        };
        let inputs = LossInputs {
            l2m_vision: l2m_v,
            l2m_language: l2m_t,
            nn_vision: nn_v,
            nn_language: nn_t,
            l2u_vision: unify.map(|u| u.0),
            l2u_language: unify.map(|u| u.1),
            reorganize,
        };
        let breakdown = total_loss(&mut tape, obj, switches, &inputs)?;
        let losses = breakdown.values(&tape);
        let lr = lr_at(step, cfg);

        let mut applied = false;
        let mut grad_norm = f64::NAN;
        if losses.total.is_finite() {
            tape.backward(breakdown.total)?;
            let trainable = self.trainable(stage2);
            let mut grads: Vec<(ParamId, Tensor<f32>)> = self
                .model
                .params()
                .ids()
                .filter(|&id| trainable(self.model.params().group(id)))
                .filter_map(|id| tape.grad(bound.params.var(id)).map(|g| (id, g.clone())))
                .collect();
            if grads.iter().all(|(_, g)| g.is_finite()) {
                grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
                self.optimizer.step(self.model.params_mut(), &grads, lr)?;
                applied = true;
            }
        }
        if applied {
            self.nonfinite_streak = 0;
            let labels: Vec<u32> = pairs.iter().map(|p| p.label).collect();
            self.vision_queue.enqueue_batch(&unit_rows(&tape, l2m_v), Some(&labels))?;
            self.language_queue.enqueue_batch(&unit_rows(&tape, l2m_t), Some(&labels))?;
        } else {
            self.nonfinite_streak += 1;
            log::warn!("step {step}: non-finite loss or gradient, update skipped");
            if self.nonfinite_streak >= MAX_NONFINITE_STEPS {
                return Err(Error::Diverged(self.nonfinite_streak));
            }
        }
        let metrics = StepMetrics {
            step,
            losses,
            lr,
            grad_norm,
            applied,
        };
        self.history.push(metrics);
        self.step += 1;
        Ok(metrics)
    }

    /// Train to `total_steps`. When `out_dir` is given, metrics are appended
    /// to `metrics.txt` and checkpoints written per `checkpoint_every` and
    /// at the end.
    pub fn train(&mut self, docs: &[DocumentPair], out_dir: Option<&Path>) -> Result<()> {
        let mut sink = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(METRICS_FILE);
                let file = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((std::io::BufWriter::new(file), path))
            }
            None => None,
        };
        while self.step < self.config.total_steps {
            let m = self.train_step(docs)?;
            if let Some((w, path)) = sink.as_mut() {
                writeln!(w, "{}", m.to_line()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            if m.step % 100 == 0 {
                log::info!("{}", m.to_line());
            }
            let every = self.config.checkpoint_every;
            if let Some(dir) = out_dir {
                if every > 0 && self.step % every == 0 && self.step < self.config.total_steps {
                    self.save(&dir.join(format!("checkpoint-{:07}", self.step)))?;
                }
            }
        }
        if let Some((mut w, path)) = sink {
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        if let Some(dir) = out_dir {
            self.save(&dir.join(FINAL_CHECKPOINT_DIR))?;
        }
        Ok(())
    }

    /// Write model weights, optimizer moments and the step/RNG state.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.to_checkpoint().write(&dir.join(MODEL_FILE))?;
        let p = self.model.params();
        let mut blocks = Vec::new();
        let mut steps = Vec::new();
        for id in p.ids() {
            let (m, v, t) = self.optimizer.moments(id);
            let shape = p.get(id).shape().to_vec();
            blocks.push((format!("m.{}", p.name(id)), Tensor::new(shape.clone(), m.to_vec())?));
            blocks.push((format!("v.{}", p.name(id)), Tensor::new(shape, v.to_vec())?));
            steps.push(format!("{}={t}", p.name(id)));
        }
        Checkpoint {
            digest: self.model.config().digest(),
            blocks,
        }
        .write(&dir.join(OPTIMIZER_FILE))?;
        let state = format!(
            "step={}\nrng_state={}\ncursor={}\norder={}\nadam_steps={}\n",
            self.step,
            self.rng.state(),
            self.cursor,
            self.order.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
            steps.join(",")
        );
        let path = dir.join(STATE_FILE);
        fs::write(&path, state).map_err(|e| Error::io(&path, e))
    }

    /// Restore a trainer from `dir`. Support queues start empty; neighbor
    /// tables are re-mined on the next stage-2 step.
    pub fn resume(config: TrainConfig, mut model: GlobalDocModel<f32>, dir: &Path) -> Result<Self> {
        model.load_checkpoint(&Checkpoint::read(&dir.join(MODEL_FILE))?)?;
        let mut t = Trainer::new(config, model)?;
        let opt = Checkpoint::read(&dir.join(OPTIMIZER_FILE))?;
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |what: &str| Error::data(&path, format!("invalid {what}"));
        let mut adam_steps = std::collections::HashMap::new();
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            match k {
                "step" => t.step = v.parse().map_err(|_| bad("step"))?,
                "rng_state" => t.rng = SplitMix64::from_state(v.parse().map_err(|_| bad("rng_state"))?),
                "cursor" => t.cursor = v.parse().map_err(|_| bad("cursor"))?,
                "order" => {
                    t.order = v
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse().map_err(|_| bad("order")))
                        .collect::<Result<_>>()?
                }
                "adam_steps" => {
                    for kv in v.split(',').filter(|s| !s.is_empty()) {
                        let (name, n) = kv.rsplit_once('=').ok_or_else(|| bad("adam_steps"))?;
                        adam_steps.insert(name.to_string(), n.parse::<u64>().map_err(|_| bad("adam_steps"))?);
                    }
                }
                _ => return Err(bad(k)),
            }
        }
        let ids: Vec<ParamId> = t.model.params().ids().collect();
        for id in ids {
            let name = t.model.params().name(id).to_string();
            let m = opt.block(&format!("m.{name}")).ok_or_else(|| bad("optimizer moments"))?;
            let v = opt.block(&format!("v.{name}")).ok_or_else(|| bad("optimizer moments"))?;
            let n = adam_steps.get(&name).copied().unwrap_or(0);
            t.optimizer.set_moments(id, m.data().to_vec(), v.data().to_vec(), n)?;
        }
        Ok(t)
    }
}

pub const METRICS_FILE: &str = "metrics.txt";
pub const FINAL_CHECKPOINT_DIR: &str = "final";
pub const MODEL_FILE: &str = "model.gdoc";
pub const OPTIMIZER_FILE: &str = "optimizer.gdoc";
pub const STATE_FILE: &str = "state.txt";

/// Read a metrics file written by [`Trainer::train`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(StepMetrics::parse_line).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig {
            total_steps: 100,
            warmup_fraction: 0.1,
            peak_lr: 1e-3,
            final_lr: 5e-4,
            ..TrainConfig::default()
        };
        assert!((lr_at(0, &cfg) - 1e-4).abs() < 1e-15);
        assert!((lr_at(9, &cfg) - 1e-3).abs() < 1e-15);
        assert!((lr_at(99, &cfg) - 5e-4).abs() < 1e-15);
        for s in 1..100 {
            if s < 10 {
                assert!(lr_at(s, &cfg) > lr_at(s - 1, &cfg));
            } else {
                assert!(lr_at(s, &cfg) <= lr_at(s - 1, &cfg));
            }
        }
    }

    fn quadratic_store(init: &[f64]) -> ParamStore<f64> {
        let mut p = ParamStore::default();
        p.add("w", ParamGroup::Vision, Tensor::vector(init.to_vec()));
        p
    }

    #[test]
    fn adamw_zero_gradient_keeps_weights() {
        let mut p = quadratic_store(&[1.0, -2.0]);
        let mut opt = AdamW::new(&p, 0.0);
        let id = p.find("w").unwrap();
        opt.step(&mut p, &[(id, Tensor::vector(vec![0.0, 0.0]))], 0.1).unwrap();
        assert_eq!(p.get(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn adamw_converges_on_quadratic() {
        // f(w) = ½ Σ a_j (w_j − c_j)²
        let (a, c) = ([1.0, 4.0], [0.5, -1.5]);
        let mut p = quadratic_store(&[3.0, 2.0]);
        let id = p.find("w").unwrap();
        let mut opt = AdamW::new(&p, 0.0);
        let first = p.get(id).data()[0];
        for s in 0..200 {
            let w = p.get(id).data().to_vec();
            let g: Vec<f64> = (0..2).map(|j| a[j] * (w[j] - c[j])).collect();
            let lr = 0.1 * (1.0 - s as f64 / 200.0);
            opt.step(&mut p, &[(id, Tensor::vector(g))], lr).unwrap();
            if s == 0 {
                assert!(p.get(id).data()[0] < first);
            }
        }
        for j in 0..2 {
            assert!((p.get(id).data()[j] - c[j]).abs() < 1e-3, "{:?}", p.get(id).data());
        }
    }

    #[test]
    fn clipping_caps_the_norm() {
        let p = quadratic_store(&[0.0, 0.0]);
        let mut g = vec![(p.find("w").unwrap(), Tensor::vector(vec![3.0f64, 4.0]))];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].1.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_line_round_trip() {
        let m = StepMetrics {
            step: 7,
            losses: LossValues {
                total: 1.25,
                l2m_inter: 0.5,
                l2m_intra: 0.75,
                ..LossValues::default()
            },
            lr: 1e-4,
            grad_norm: 0.3,
            applied: true,
        };
        assert_eq!(StepMetrics::parse_line(&m.to_line()).unwrap(), m);
    }
}
