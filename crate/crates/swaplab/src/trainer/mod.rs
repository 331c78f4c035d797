//! Training driver: triplet batches with exact supervision, checkpoints that
//! resume bit-for-bit, control finetunes, and the deployment-time `swap` call.
//!
//! One optimizer step takes a batch of triplets (A1, B̃, A2): the model swaps
//! the source A1 onto the pseudo target B̃ while A2 — the same person as A1
//! wearing B̃'s pose, expression and lighting — grades the result pixel for
//! pixel. Noise is added at the final timestep only, so a single forward pass
//! yields a full clean-image prediction; that is what lets the identity and
//! reconstruction losses live in image space instead of latent space. The
//! diffusion loss stays on the predicted noise.
//!
//! Everything outside the model is frozen: the oracle identity encoder, the
//! attribute regressor, and the (parameter-free) landmark geometry. Their
//! content hashes ride inside every checkpoint and are re-verified on load and
//! after every run, so a result can never silently mix encoder versions.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::codec::decode_latent_graph;
use crate::diffcore::losses::{breakdown, combine_losses};
use crate::diffcore::{
    add_noise, clamp01, decode_latent, encode_image, k_step_swap, sample_noise, LossBreakdown,
    LossWeights, NoiseSchedule, Parameterization,
};
use crate::landmarks::{extract, recombine, render_landmarks};
use crate::swapnets::{init_model, model_vars, swapnet_forward, ConditionBundle, ModelConfig};
use crate::synthfaces::dataset::load_image_png;
use crate::synthfaces::factors::FactorVector;
use crate::synthfaces::geometry::IMG_SIZE;
use crate::synthfaces::oracle::OracleEncoders;
use crate::synthfaces::render::render;
use crate::tensor::{Adam, AdamConfig, Graph, ParamId, ParamStore, Tensor};
use crate::tripletforge::{DatasetManifest, TripletRecord};
use crate::util::{append_jsonl_line, read_checkpoint, rng_for, write_checkpoint, CheckpointPayload};
use crate::{Result, SwapLabError};

const CHECKPOINT_KIND: &str = "swap-trainer";

/// Hyperparameters and switches for one training run.
///
/// The four `no_*` switches are ablations: the first two remove a conditioning
/// branch structurally (its parameters are never created), the last two force
/// a loss weight to zero while the component is still computed and logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Triplets per optimizer step. The last batch of an epoch may be smaller.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Optimizer steps to run in total. Zero is legal and trains nothing.
    pub total_steps: usize,
    pub loss_weights: LossWeights,
    /// When set, the training manifest must have been built by this proxy.
    pub proxy: Option<String>,
    /// Expected control transform of the manifest: `None` demands a plain
    /// manifest, `Some` demands a matching transformed one.
    pub control: Option<String>,
    pub seed: u64,
    /// Drop the reference-feature branch (and its parameters).
    pub no_facenet: bool,
    /// Drop the identity-adapter branch (and its parameters).
    pub no_id_adapter: bool,
    /// Log the identity loss but keep it out of the optimized total.
    pub no_id_loss: bool,
    /// Log the reconstruction loss but keep it out of the optimized total.
    pub no_rec_loss: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-4,
            total_steps: 5000,
            loss_weights: LossWeights::default(),
            proxy: None,
            control: None,
            seed: 0,
            no_facenet: false,
            no_id_adapter: false,
            no_id_loss: false,
            no_rec_loss: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SwapLabError::Shape("batch size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(SwapLabError::Shape(format!(
                "learning rate {} must be finite and positive",
                self.learning_rate
            )));
        }
        for (name, w) in [
            ("id", self.loss_weights.id),
            ("dm", self.loss_weights.dm),
            ("rec", self.loss_weights.rec),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(SwapLabError::Shape(format!(
                    "loss weight {name} = {w} must be finite and non-negative"
                )));
            }
        }
        self.effective_model().validate()
    }

    /// The architecture actually built: branch ablations applied to the model.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.use_facenet = m.use_facenet && !self.no_facenet;
        m.use_id_adapter = m.use_id_adapter && !self.no_id_adapter;
        m
    }

    /// The λ's actually optimized: objective ablations zero a weight while the
    /// component itself keeps being computed and logged.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.loss_weights;
        if self.no_id_loss {
            w.id = 0.0;
        }
        if self.no_rec_loss {
            w.rec = 0.0;
        }
        w
    }
}

/// Constructor arguments of the noise schedule, pinned inside checkpoints so a
/// reloaded model denoises under exactly the constants it trained with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec { t_steps: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_steps, self.beta_start, self.beta_end)
    }
}

/// Content hashes of everything that must not move during training.
///
/// The frozen set is the oracle pair — identity encoder and attribute
/// regressor; landmark geometry is pure arithmetic with no parameters to
/// freeze. Everything inside the model store (the denoiser, the reference
/// branch, the identity adapter, the pose guider, the learned context tokens)
/// is trainable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub identity_hash: String,
    pub attribute_hash: String,
}

impl FreezePolicy {
    pub fn capture(oracles: &OracleEncoders) -> Self {
        FreezePolicy {
            identity_hash: oracles.metadata.identity_hash.clone(),
            attribute_hash: oracles.metadata.attribute_hash.clone(),
        }
    }

    /// Errors unless `oracles` are exactly the recorded encoders.
    pub fn verify(&self, oracles: &OracleEncoders) -> Result<()> {
        let now = FreezePolicy::capture(oracles);
        if *self != now {
            return Err(SwapLabError::Checkpoint(format!(
                "frozen encoder mismatch: checkpoint pins identity {}… / attribute {}…, \
                 supplied encoders hash {}… / {}…",
                &self.identity_hash[..12],
                &self.attribute_hash[..12],
                &now.identity_hash[..12],
                &now.attribute_hash[..12],
            )));
        }
        Ok(())
    }
}

/// One training example with its images materialized and the pseudo target's
/// landmark conditioning rasterized.
#[derive(Debug, Clone)]
pub struct TripletSample {
    /// A1, the identity provider.
    pub source: Tensor,
    /// B̃, the face being swapped onto.
    pub pseudo_target: Tensor,
    /// A2, the exact expected output.
    pub ground_truth: Tensor,
    /// Landmarks taken directly from B̃'s factors — the pseudo target already
    /// wears the wanted pose and expression, so its own geometry is the
    /// conditioning.
    pub landmarks: Tensor,
}

impl TripletSample {
    /// Loads the three graded images of a record from a manifest directory.
    pub fn load(dir: &Path, record: &TripletRecord) -> Result<Self> {
        Ok(TripletSample {
            source: load_image_png(&dir.join(&record.source.image))?,
            pseudo_target: load_image_png(&dir.join(&record.pseudo_target.image))?,
            ground_truth: load_image_png(&dir.join(&record.ground_truth.image))?,
            landmarks: render_landmarks(&extract(&record.pseudo_target.factors)),
        })
    }

    /// Renders the images straight from the record's factors — identical to
    /// [`TripletSample::load`] up to PNG quantization, with no disk round trip.
    pub fn render_from(record: &TripletRecord) -> Result<Self> {
        Ok(TripletSample {
            source: render(&record.source.factors)?,
            pseudo_target: render(&record.pseudo_target.factors)?,
            ground_truth: render(&record.ground_truth.factors)?,
            landmarks: render_landmarks(&extract(&record.pseudo_target.factors)),
        })
    }
}

/// Everything needed to continue or deploy a run: model parameters, optimizer
/// moments, the exact noise schedule, the provenance of the frozen encoders,
/// and the step counter. The optimizer step count always equals `step`.
#[derive(Clone)]
pub struct CheckpointBundle {
    pub params: ParamStore,
    pub moments_m: Vec<Tensor>,
    pub moments_v: Vec<Tensor>,
    pub step: usize,
    pub config: TrainConfig,
    pub schedule: ScheduleSpec,
    pub freeze: FreezePolicy,
}

impl std::fmt::Debug for CheckpointBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CheckpointBundle")
            .field("step", &self.step)
            .field("params", &self.params.len())
            .field("hash", &self.params_hash())
            .finish_non_exhaustive()
    }
}

impl CheckpointBundle {
    /// Whether any optimizer step has ever been applied.
    pub fn is_trained(&self) -> bool {
        self.step > 0
    }

    /// Content hash over the model parameters.
    pub fn params_hash(&self) -> String {
        self.params.content_hash()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::with_capacity(3 * self.params.len());
        for (name, t) in self.params.iter() {
            tensors.push((format!("param/{name}"), t.clone()));
        }
        for (i, (name, _)) in self.params.iter().enumerate() {
            tensors.push((format!("adam.m/{name}"), self.moments_m[i].clone()));
            tensors.push((format!("adam.v/{name}"), self.moments_v[i].clone()));
        }
        let payload = CheckpointPayload {
            kind: CHECKPOINT_KIND.to_string(),
            meta: serde_json::json!({
                "config": self.config,
                "schedule": self.schedule,
                "freeze": self.freeze,
                "step": self.step,
            }),
            tensors,
        };
        write_checkpoint(path, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let payload = read_checkpoint(path)?;
        if payload.kind != CHECKPOINT_KIND {
            return Err(SwapLabError::Checkpoint(format!(
                "checkpoint kind '{}', expected '{CHECKPOINT_KIND}'",
                payload.kind
            )));
        }
        let config: TrainConfig = serde_json::from_value(payload.meta["config"].clone())?;
        let schedule: ScheduleSpec = serde_json::from_value(payload.meta["schedule"].clone())?;
        let freeze: FreezePolicy = serde_json::from_value(payload.meta["freeze"].clone())?;
        let step = payload.meta["step"]
            .as_u64()
            .ok_or_else(|| SwapLabError::Checkpoint("missing step counter".into()))?
            as usize;

        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in payload.tensors {
            if let Some(p) = name.strip_prefix("param/") {
                params.register(p, t);
            } else if name.starts_with("adam.m/") {
                m.push(t);
            } else if name.starts_with("adam.v/") {
                v.push(t);
            } else {
                return Err(SwapLabError::Checkpoint(format!("unexpected tensor '{name}'")));
            }
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(SwapLabError::Checkpoint(format!(
                "optimizer moments incomplete: {} params, {} first moments, {} second moments",
                params.len(),
                m.len(),
                v.len()
            )));
        }
        for (i, id) in params.ids().enumerate() {
            if m[i].shape != params.get(id).shape || v[i].shape != params.get(id).shape {
                return Err(SwapLabError::Checkpoint(format!(
                    "moment shape mismatch at '{}'",
                    params.name(id)
                )));
            }
        }
        let bundle = CheckpointBundle { params, moments_m: m, moments_v: v, step, config, schedule, freeze };
        bundle.config.validate()?;
        Ok(bundle)
    }
}

/// Live training state: the mutable model plus everything frozen around it.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    model_cfg: ModelConfig,
    pub params: ParamStore,
    adam: Adam,
    schedule: NoiseSchedule,
    schedule_spec: ScheduleSpec,
    freeze: FreezePolicy,
    oracles: &'a OracleEncoders,
    /// Completed optimizer steps.
    pub step: usize,
}

impl std::fmt::Debug for Trainer<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("step", &self.step)
            .field("params", &self.params.len())
            .finish_non_exhaustive()
    }
}

impl<'a> Trainer<'a> {
    /// Fresh model under `config`, seeded from `config.seed`.
    pub fn new(config: TrainConfig, oracles: &'a OracleEncoders) -> Result<Self> {
        config.validate()?;
        let model_cfg = config.effective_model();
        let params = init_model(&model_cfg, config.seed)?;
        let adam = Adam::new(
            &params,
            AdamConfig { lr: config.learning_rate, ..AdamConfig::default() },
        );
        let schedule_spec = ScheduleSpec::default();
        Ok(Trainer {
            schedule: schedule_spec.build()?,
            schedule_spec,
            freeze: FreezePolicy::capture(oracles),
            model_cfg,
            params,
            adam,
            oracles,
            step: 0,
            config,
        })
    }

    /// Continues from a checkpoint. The supplied encoders must hash to exactly
    /// what the checkpoint recorded, and the stored parameters must lay out
    /// like a fresh model of the stored config.
    pub fn from_bundle(bundle: CheckpointBundle, oracles: &'a OracleEncoders) -> Result<Self> {
        bundle.config.validate()?;
        bundle.freeze.verify(oracles)?;
        let model_cfg = bundle.config.effective_model();
        let reference = init_model(&model_cfg, 0)?;
        let names_match = reference.len() == bundle.params.len()
            && reference
                .ids()
                .all(|id| {
                    bundle.params.id_of(reference.name(id)).map(|other| {
                        bundle.params.get(other).shape == reference.get(id).shape
                    }) == Some(true)
                });
        if !names_match {
            return Err(SwapLabError::Checkpoint(
                "stored parameters do not lay out like the stored model config".into(),
            ));
        }
        let mut adam = Adam::new(
            &bundle.params,
            AdamConfig { lr: bundle.config.learning_rate, ..AdamConfig::default() },
        );
        adam.restore(bundle.moments_m, bundle.moments_v, bundle.step);
        Ok(Trainer {
            schedule: bundle.schedule.build()?,
            schedule_spec: bundle.schedule,
            freeze: bundle.freeze,
            model_cfg: bundle.config.effective_model(),
            params: bundle.params,
            adam,
            oracles,
            step: bundle.step,
            config: bundle.config,
        })
    }

    /// Snapshot of the current state, cloning parameters and moments.
    pub fn bundle(&self) -> CheckpointBundle {
        let (m, v) = self.adam.moments();
        CheckpointBundle {
            params: self.params.clone(),
            moments_m: m.to_vec(),
            moments_v: v.to_vec(),
            step: self.step,
            config: self.config.clone(),
            schedule: self.schedule_spec,
            freeze: self.freeze.clone(),
        }
    }

    /// One optimizer step on a batch. Returns the batch-mean losses and the
    /// global gradient norm that was applied.
    ///
    /// Per sample: the ground truth A2 is encoded and noised at the final
    /// timestep; the model predicts conditioned on (latent of B̃, landmarks of
    /// B̃, latent of A1, identity embedding of A1); the noise loss compares ε̂
    /// against the drawn noise, and the clean prediction is decoded in-graph
    /// so the identity loss (1 − cosine against A1's embedding) and the
    /// reconstruction loss (pixel MSE against A2) act on the image.
    ///
    /// The returned total is recombined from the logged component means with
    /// the effective weights, so `breakdown.total ==
    /// breakdown.recombine(&weights)` holds bit-for-bit. A non-finite loss or
    /// gradient aborts with diagnostics before anything is written to the
    /// parameters.
    pub fn train_step(&mut self, batch: &[TripletSample]) -> Result<(LossBreakdown, f64)> {
        if batch.is_empty() {
            return Err(SwapLabError::Shape("empty training batch".into()));
        }
        let t = self.schedule.last_t();
        let ab = self.schedule.alpha_bar(t);
        let w = self.config.effective_weights();
        let mut rng = rng_for(self.config.seed, "train-noise", self.step as u64);
        let inv_n = 1.0 / batch.len() as f64;

        let mut acc: Vec<Tensor> = self
            .params
            .ids()
            .map(|id| Tensor::zeros(&self.params.get(id).shape))
            .collect();
        let (mut sum_id, mut sum_dm, mut sum_rec) = (0.0, 0.0, 0.0);

        for sample in batch {
            let z0 = encode_image(&sample.ground_truth);
            let eps = sample_noise(&z0.shape, &mut rng);
            let z_t = add_noise(&z0, &eps, ab);

            let src_embedding = self.oracles.identity_embedding(&sample.source);
            let cond = ConditionBundle {
                target_latent: encode_image(&sample.pseudo_target),
                landmark_image: sample.landmarks.clone(),
                source_latent: encode_image(&sample.source),
                id_embedding: src_embedding.to_vec(),
            };

            let mut g = Graph::new();
            let vars = model_vars(&mut g, &self.params, true);
            let cv = cond.vars(&mut g, &self.model_cfg)?;
            let z_t_v = g.constant(z_t);
            let (eps_hat, x0_hat) =
                swapnet_forward(&mut g, &vars, &self.model_cfg, z_t_v, &cv, t, ab)?;

            let eps_v = g.constant(eps);
            let l_dm = g.mse(eps_hat, eps_v);

            let decoded = decode_latent_graph(&mut g, x0_hat);
            if g.value(decoded).data.iter().any(|v| !v.is_finite()) {
                return Err(SwapLabError::NonFinite {
                    step: self.step,
                    detail: format!(
                        "decoded prediction went non-finite before the identity loss \
                         (l_dm = {:e})",
                        g.value(l_dm).item()
                    ),
                });
            }
            let pred_embedding = self.oracles.embed_identity(&mut g, decoded);
            let src_emb_v = g.constant(Tensor::new(vec![1, 8], src_embedding.to_vec()));
            let cos = g.cosine_sim(pred_embedding, src_emb_v);
            let l_id = g.affine(cos, -1.0, 1.0);

            let gt_v = g.constant(sample.ground_truth.clone());
            let l_rec = g.mse(decoded, gt_v);

            let total = combine_losses(&mut g, l_id, l_dm, l_rec, &w);
            let b = breakdown(&g, l_id, l_dm, l_rec, total);
            sum_id += b.l_id;
            sum_dm += b.l_dm;
            sum_rec += b.l_rec;

            let grads = g.backward(total);
            for (id, var) in vars.pairs() {
                if let Some(dp) = grads.get(*var) {
                    let slot = &mut acc[id.0];
                    for (a, d) in slot.data.iter_mut().zip(&dp.data) {
                        *a += inv_n * d;
                    }
                }
            }
        }

        let mut report = LossBreakdown {
            l_id: sum_id * inv_n,
            l_dm: sum_dm * inv_n,
            l_rec: sum_rec * inv_n,
            total: 0.0,
        };
        report.total = report.recombine(&w);
        let grad_norm = acc
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !(report.total.is_finite() && grad_norm.is_finite()) {
            return Err(SwapLabError::NonFinite {
                step: self.step,
                detail: format!(
                    "l_id = {:e}, l_dm = {:e}, l_rec = {:e}, total = {:e}, grad_norm = {:e}",
                    report.l_id, report.l_dm, report.l_rec, report.total, grad_norm
                ),
            });
        }

        let pairs: Vec<(ParamId, Tensor)> = acc
            .into_iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), t))
            .collect();
        self.adam.step(&mut self.params, &pairs);
        self.step += 1;
        Ok((report, grad_norm))
    }
}

/// One JSONL metrics line, written at the configured cadence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub l_dm: f64,
    pub l_id: f64,
    pub l_rec: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// Seconds since this process started (or resumed) the run.
    pub wallclock: f64,
}

/// Output wiring and resume handle for [`train_loop`].
pub struct TrainOptions {
    /// JSONL metrics stream; appended to, so a resumed run extends its log.
    pub log_path: Option<PathBuf>,
    /// Steps between log lines; the first and final step always log. Zero
    /// logs only those two.
    pub log_every: usize,
    /// Where checkpoints land (atomically replaced each time). The final
    /// state is always written here when set.
    pub checkpoint_path: Option<PathBuf>,
    /// Snapshot cadence in steps; zero writes only the final state.
    pub checkpoint_every: usize,
    /// Continue from a previous bundle instead of initializing fresh.
    pub resume: Option<CheckpointBundle>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            log_path: None,
            log_every: 10,
            checkpoint_path: None,
            checkpoint_every: 0,
            resume: None,
        }
    }
}

/// Runs (or continues) training on a triplet manifest until
/// `config.total_steps` optimizer steps have been taken in total.
///
/// Epochs are seeded shuffles of the record order, derived from the epoch
/// index alone, and batches are cut from that order in sequence — so a resumed
/// run walks exactly the batches the uninterrupted run would have seen, and
/// the final parameters match bit for bit. Batch images are loaded from disk
/// just before their step, in batch order.
pub fn train_loop(
    dir: &Path,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    oracles: &OracleEncoders,
    opts: &TrainOptions,
) -> Result<CheckpointBundle> {
    config.validate()?;
    if let Some(expected) = &config.proxy {
        if manifest.proxy.name() != expected {
            return Err(SwapLabError::Manifest(format!(
                "manifest was built by proxy '{}', config expects '{expected}'",
                manifest.proxy.name()
            )));
        }
    }
    if config.control != manifest.transform {
        return Err(SwapLabError::Manifest(format!(
            "manifest transform {:?} does not match configured {:?}",
            manifest.transform, config.control
        )));
    }
    if manifest.records.is_empty() {
        return Err(SwapLabError::Manifest("manifest has no records".into()));
    }

    let mut trainer = match opts.resume.clone() {
        Some(bundle) => {
            if bundle.config.effective_model() != config.effective_model() {
                return Err(SwapLabError::Checkpoint(
                    "resume config builds a different architecture than the checkpoint".into(),
                ));
            }
            let mut t = Trainer::from_bundle(bundle, oracles)?;
            t.config = config.clone();
            t.adam.config.lr = config.learning_rate;
            t
        }
        None => Trainer::new(config.clone(), oracles)?,
    };

    let mut log = match &opts.log_path {
        Some(p) => {
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| SwapLabError::io(p.display().to_string(), e))?;
            Some(BufWriter::new(f))
        }
        None => None,
    };

    let n = manifest.records.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let first_step = trainer.step + 1;
    let started = Instant::now();
    let mut epoch_order: Vec<usize> = Vec::new();
    let mut cached_epoch = usize::MAX;

    while trainer.step < config.total_steps {
        let epoch = trainer.step / batches_per_epoch;
        if epoch != cached_epoch {
            epoch_order = (0..n).collect();
            epoch_order.shuffle(&mut rng_for(config.seed, "train-shuffle", epoch as u64));
            cached_epoch = epoch;
        }
        let slot = trainer.step % batches_per_epoch;
        let lo = slot * config.batch_size;
        let hi = (lo + config.batch_size).min(n);
        let batch: Vec<TripletSample> = epoch_order[lo..hi]
            .iter()
            .map(|&i| TripletSample::load(dir, &manifest.records[i]))
            .collect::<Result<_>>()?;

        let (b, grad_norm) = trainer.train_step(&batch)?;
        let now = trainer.step;

        let cadence_hit = opts.log_every > 0 && now % opts.log_every == 0;
        if let Some(w) = log.as_mut() {
            if cadence_hit || now == first_step || now == config.total_steps {
                let entry = LogEntry {
                    step: now,
                    l_dm: b.l_dm,
                    l_id: b.l_id,
                    l_rec: b.l_rec,
                    total: b.total,
                    grad_norm,
                    wallclock: started.elapsed().as_secs_f64(),
                };
                append_jsonl_line(w, &entry)?;
                w.flush()
                    .map_err(|e| SwapLabError::io("training log", e))?;
            }
        }
        if let Some(path) = &opts.checkpoint_path {
            let snap_hit = opts.checkpoint_every > 0 && now % opts.checkpoint_every == 0;
            if snap_hit || now == config.total_steps {
                trainer.bundle().save(path)?;
            }
        }
    }

    trainer.freeze.verify(oracles)?;
    let bundle = trainer.bundle();
    if let Some(path) = &opts.checkpoint_path {
        // A zero-iteration run (already-complete resume) still leaves a file.
        bundle.save(path)?;
    }
    Ok(bundle)
}

/// Continues a trained checkpoint on a control-transformed manifest.
///
/// `config.total_steps` counts the *additional* steps; zero returns the bundle
/// untouched. `config.control` must name the manifest's transform exactly.
pub fn control_finetune(
    bundle: CheckpointBundle,
    dir: &Path,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    oracles: &OracleEncoders,
    mut opts: TrainOptions,
) -> Result<CheckpointBundle> {
    let Some(expected) = &config.control else {
        return Err(SwapLabError::Manifest(
            "finetune config names no control transform".into(),
        ));
    };
    match &manifest.transform {
        Some(t) if t == expected => {}
        other => {
            return Err(SwapLabError::Manifest(format!(
                "manifest transform {other:?} does not match configured '{expected}'"
            )));
        }
    }
    if config.total_steps == 0 {
        return Ok(bundle);
    }
    let mut run_cfg = config.clone();
    run_cfg.total_steps = bundle.step + config.total_steps;
    opts.resume = Some(bundle);
    train_loop(dir, manifest, &run_cfg, oracles, &opts)
}

/// Swaps `source`'s identity onto `target`: the deployment entry point.
///
/// Both inputs are `[3, 64, 64]` images in [0,1]. Conditioning is derived
/// through the frozen oracles only — landmark geometry comes from the source's
/// estimated proportions recombined with the target's estimated pose and
/// expression, never from ground-truth factors. `k` is the ladder length
/// (1 for single-call generation, 4 for the refined ladder; any `1..=T`
/// works). The output is decoded and clamped to [0,1].
///
/// A checkpoint that never trained still runs — its zero-gated head denoises
/// to a gray wash — but a warning lands on stderr.
pub fn swap(
    bundle: &CheckpointBundle,
    oracles: &OracleEncoders,
    source: &Tensor,
    target: &Tensor,
    k: usize,
    seed: u64,
) -> Result<Tensor> {
    bundle.freeze.verify(oracles)?;
    let img_shape = vec![3, IMG_SIZE, IMG_SIZE];
    if source.shape != img_shape || target.shape != img_shape {
        return Err(SwapLabError::Shape(format!(
            "swap expects {img_shape:?} images, got source {:?} and target {:?}",
            source.shape, target.shape
        )));
    }
    if !bundle.is_trained() {
        eprintln!("warning: swapping with an untrained checkpoint (step 0)");
    }
    let cfg = bundle.config.effective_model();
    let schedule = bundle.schedule.build()?;

    let source_factors = FactorVector {
        identity: oracles.identity_estimate(source),
        attributes: oracles.attribute_estimate(source),
    };
    let target_factors = FactorVector {
        identity: oracles.identity_estimate(target),
        attributes: oracles.attribute_estimate(target),
    };
    let coeffs = recombine(&extract(&source_factors), &extract(&target_factors));
    let cond = ConditionBundle {
        target_latent: encode_image(target),
        landmark_image: render_landmarks(&coeffs),
        source_latent: encode_image(source),
        id_embedding: oracles.identity_embedding(source).to_vec(),
    };
    cond.validate(&cfg)?;

    let mut rng = rng_for(seed, "swap-noise", 0);
    let z_init = sample_noise(&[cfg.latent_channels, cfg.latent_size, cfg.latent_size], &mut rng);

    let mut predict = |z: &Tensor, t: usize| -> Tensor {
        let mut g = Graph::new();
        let vars = model_vars(&mut g, &bundle.params, false);
        let cv = cond.vars(&mut g, &cfg).expect("conditioning validated above");
        let zv = g.constant(z.clone());
        let ab = schedule.alpha_bar(t);
        let (eps_hat, x0_hat) = swapnet_forward(&mut g, &vars, &cfg, zv, &cv, t, ab)
            .expect("shapes validated above");
        let raw = match cfg.parameterization {
            Parameterization::PredictX0 => x0_hat,
            Parameterization::PredictEps => eps_hat,
        };
        g.value(raw).clone()
    };
    let x0 = k_step_swap(&mut predict, cfg.parameterization, &schedule, &z_init, k)?;
    Ok(clamp01(&decode_latent(&x0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthfaces::oracle::untrained_encoders_for_tests;
    use crate::tripletforge::{build_manifest, build_triplet, ControlTransform, ProxySwapper};

    /// Smallest architecture the image-space losses admit: the latent geometry
    /// is pinned by the codec, so only widths and context shrink.
    fn tiny_model() -> ModelConfig {
        ModelConfig {
            level_widths: [16, 24],
            attention_head_dim: 8,
            context_dim: 16,
            context_tokens: 2,
            id_tokens: 2,
            ..ModelConfig::default()
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            learning_rate: 1e-3,
            total_steps: 4,
            seed: 11,
            model: tiny_model(),
            ..TrainConfig::default()
        }
    }

    fn toy_batch(count: usize, seed: u64) -> Vec<TripletSample> {
        let proxy = ProxySwapper::oracle();
        (0..count as u64)
            .map(|i| {
                let rec = build_triplet(
                    crate::util::derive_seed(seed, "toy-pair", i),
                    crate::util::derive_seed(seed, "toy-donor", i),
                    &proxy,
                )
                .unwrap();
                TripletSample::render_from(&rec).unwrap()
            })
            .collect()
    }

    #[test]
    fn config_validation_covers_the_obvious_footguns() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = tiny_config();
        c.batch_size = 0;
        assert!(c.validate().is_err(), "zero batch accepted");
        let mut c = tiny_config();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err(), "zero learning rate accepted");
        let mut c = tiny_config();
        c.loss_weights.rec = -1.0;
        assert!(c.validate().is_err(), "negative weight accepted");
        let mut c = tiny_config();
        c.model.level_widths = [0, 8];
        assert!(c.validate().is_err(), "broken model config accepted");

        let mut c = tiny_config();
        c.no_facenet = true;
        c.no_id_loss = true;
        assert!(!c.effective_model().use_facenet);
        assert!(c.effective_model().use_id_adapter);
        assert_eq!(c.effective_weights().id, 0.0);
        assert_eq!(c.effective_weights().rec, c.loss_weights.rec);
    }

    #[test]
    fn ablation_switches_remove_whole_branches_from_the_store() {
        let oracles = untrained_encoders_for_tests(3);
        let full = Trainer::new(tiny_config(), &oracles).unwrap();
        let mut cfg = tiny_config();
        cfg.no_facenet = true;
        let no_face = Trainer::new(cfg, &oracles).unwrap();
        let mut cfg = tiny_config();
        cfg.no_id_adapter = true;
        let no_adapter = Trainer::new(cfg, &oracles).unwrap();

        assert!(full.params.iter().any(|(n, _)| n.starts_with("face.")));
        assert!(!no_face.params.iter().any(|(n, _)| n.starts_with("face.")));
        assert!(no_face.params.len() < full.params.len());
        assert!(!no_adapter.params.iter().any(|(n, _)| n.contains("adapter")));
        assert!(no_adapter.params.len() < full.params.len());
    }

    #[test]
    fn training_reduces_the_loss_on_a_fixed_batch_deterministically() {
        let oracles = untrained_encoders_for_tests(3);
        let batch = toy_batch(2, 21);
        let run = || {
            let mut tr = Trainer::new(tiny_config(), &oracles).unwrap();
            (0..25)
                .map(|_| tr.train_step(&batch).unwrap().0.total)
                .collect::<Vec<f64>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical runs diverged");
        let first: f64 = a[..5].iter().sum::<f64>() / 5.0;
        let last: f64 = a[20..].iter().sum::<f64>() / 5.0;
        assert!(
            last < 0.95 * first,
            "no training progress on a fixed batch: first window {first}, last window {last}"
        );
    }

    #[test]
    fn loss_accounting_is_exact_and_freeze_hashes_hold() {
        let oracles = untrained_encoders_for_tests(5);
        let before = FreezePolicy::capture(&oracles);
        let batch = toy_batch(2, 22);
        let mut cfg = tiny_config();
        cfg.no_id_loss = true;
        let w = cfg.effective_weights();
        let mut tr = Trainer::new(cfg, &oracles).unwrap();
        for _ in 0..3 {
            let (b, grad_norm) = tr.train_step(&batch).unwrap();
            assert_eq!(b.total, b.recombine(&w), "logged total drifted from its components");
            assert!(b.l_id > 0.0, "ablated identity loss must still be computed and logged");
            assert_eq!(
                b.total,
                (0.0 * b.l_id + 1.0 * b.l_dm) + 10.0 * b.l_rec,
                "identity term leaked into the optimized total"
            );
            assert!(grad_norm.is_finite() && grad_norm > 0.0);
        }
        before.verify(&oracles).expect("frozen encoders moved during training");
    }

    #[test]
    fn bundles_round_trip_bit_exactly_and_keep_optimizing_identically() {
        let oracles = untrained_encoders_for_tests(7);
        let batch = toy_batch(2, 23);

        // Uninterrupted: three steps straight.
        let mut straight = Trainer::new(tiny_config(), &oracles).unwrap();
        for _ in 0..3 {
            straight.train_step(&batch).unwrap();
        }

        // Interrupted: two steps, through disk, then one more.
        let mut tr = Trainer::new(tiny_config(), &oracles).unwrap();
        tr.train_step(&batch).unwrap();
        tr.train_step(&batch).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.swlb");
        tr.bundle().save(&path).unwrap();

        let loaded = CheckpointBundle::load(&path).unwrap();
        assert_eq!(loaded.step, 2);
        assert_eq!(loaded.config, tr.config);
        assert_eq!(loaded.schedule, ScheduleSpec::default());
        assert_eq!(loaded.params_hash(), tr.params.content_hash());
        let (m, v) = tr.adam.moments();
        assert_eq!(loaded.moments_m, m.to_vec());
        assert_eq!(loaded.moments_v, v.to_vec());

        let mut resumed = Trainer::from_bundle(loaded, &oracles).unwrap();
        let (b_resumed, _) = resumed.train_step(&batch).unwrap();
        let hash_resumed = resumed.params.content_hash();
        assert_eq!(
            hash_resumed,
            straight.params.content_hash(),
            "resumed parameters diverged from the uninterrupted run"
        );
        // And the loss at the shared step matches too: same noise stream.
        let mut replay = Trainer::new(tiny_config(), &oracles).unwrap();
        replay.train_step(&batch).unwrap();
        replay.train_step(&batch).unwrap();
        let (b_straight, _) = replay.train_step(&batch).unwrap();
        assert_eq!(b_resumed.total, b_straight.total);
    }

    #[test]
    fn checkpoints_reject_foreign_encoders_and_mangled_stores() {
        let oracles = untrained_encoders_for_tests(7);
        let tr = Trainer::new(tiny_config(), &oracles).unwrap();
        let bundle = tr.bundle();

        let strangers = untrained_encoders_for_tests(8);
        let err = Trainer::from_bundle(bundle.clone(), &strangers).unwrap_err();
        assert!(
            matches!(err, SwapLabError::Checkpoint(_)),
            "foreign encoders accepted: {err}"
        );

        let mut mangled = bundle.clone();
        mangled.config.model.level_widths = [16, 32];
        let err = Trainer::from_bundle(mangled, &oracles).unwrap_err();
        assert!(
            matches!(err, SwapLabError::Checkpoint(_)),
            "mismatched architecture accepted: {err}"
        );

        let mut short = bundle;
        short.moments_m.pop();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.swlb");
        // Saving with a missing moment panics on index; build the file by
        // hand-editing instead: drop to the container level.
        short.moments_m.push(Tensor::zeros(&[1]));
        assert!(short.save(&path).is_ok());
        let err = CheckpointBundle::load(&path).unwrap_err();
        assert!(
            matches!(err, SwapLabError::Checkpoint(_)),
            "mangled moments accepted: {err}"
        );
    }

    #[test]
    fn nan_state_aborts_with_component_diagnostics() {
        let oracles = untrained_encoders_for_tests(9);
        let batch = toy_batch(1, 24);
        let mut tr = Trainer::new(tiny_config(), &oracles).unwrap();
        let id = tr.params.id_of("swap.head.conv.b").unwrap();
        tr.params.get_mut(id).data[0] = f64::NAN;
        let before = tr.params.content_hash();
        let err = tr.train_step(&batch).unwrap_err();
        match err {
            SwapLabError::NonFinite { step, detail } => {
                assert_eq!(step, 0);
                assert!(detail.contains("l_dm"), "diagnostics missing components: {detail}");
            }
            other => panic!("expected a non-finite abort, got {other}"),
        }
        assert_eq!(
            tr.params.content_hash(),
            before,
            "aborted step still wrote to the parameters"
        );
    }

    #[test]
    fn train_loop_resumes_bit_exactly_and_checks_provenance() {
        let oracles = untrained_encoders_for_tests(13);
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            build_manifest(dir.path(), 3, &ProxySwapper::oracle(), None, 77).unwrap();

        let mut cfg = tiny_config();
        cfg.total_steps = 4;

        // Provenance guards.
        let mut wrong = cfg.clone();
        wrong.proxy = Some("attr_noisy".into());
        let err =
            train_loop(dir.path(), &manifest, &wrong, &oracles, &TrainOptions::default());
        assert!(matches!(err, Err(SwapLabError::Manifest(_))), "wrong proxy accepted");
        let mut wrong = cfg.clone();
        wrong.control = Some("preserve_glasses".into());
        let err =
            train_loop(dir.path(), &manifest, &wrong, &oracles, &TrainOptions::default());
        assert!(matches!(err, Err(SwapLabError::Manifest(_))), "phantom transform accepted");

        // Uninterrupted four steps, logging along the way.
        let log_path = dir.path().join("train.jsonl");
        let full = train_loop(
            dir.path(),
            &manifest,
            &cfg,
            &oracles,
            &TrainOptions { log_path: Some(log_path.clone()), log_every: 1, ..Default::default() },
        )
        .unwrap();
        assert_eq!(full.step, 4);
        let entries: Vec<LogEntry> = crate::util::read_jsonl(&log_path).unwrap();
        assert_eq!(entries.len(), 4);
        assert_eq!(entries.last().unwrap().step, 4);
        for e in &entries {
            let b = LossBreakdown { l_id: e.l_id, l_dm: e.l_dm, l_rec: e.l_rec, total: e.total };
            assert_eq!(e.total, b.recombine(&cfg.effective_weights()));
        }

        // Two steps, checkpoint, resume to four.
        let mut half_cfg = cfg.clone();
        half_cfg.total_steps = 2;
        let ckpt = dir.path().join("half.swlb");
        let half = train_loop(
            dir.path(),
            &manifest,
            &half_cfg,
            &oracles,
            &TrainOptions { checkpoint_path: Some(ckpt.clone()), ..Default::default() },
        )
        .unwrap();
        assert_eq!(half.step, 2);
        let reloaded = CheckpointBundle::load(&ckpt).unwrap();
        let resumed = train_loop(
            dir.path(),
            &manifest,
            &cfg,
            &oracles,
            &TrainOptions { resume: Some(reloaded), ..Default::default() },
        )
        .unwrap();
        assert_eq!(resumed.step, 4);
        assert_eq!(
            resumed.params_hash(),
            full.params_hash(),
            "resumed run diverged from the uninterrupted one"
        );
        assert_eq!(resumed.moments_m, full.moments_m);
    }

    #[test]
    fn finetune_gates_transforms_and_zero_steps_is_identity() {
        let oracles = untrained_encoders_for_tests(17);
        let plain_dir = tempfile::tempdir().unwrap();
        let plain =
            build_manifest(plain_dir.path(), 2, &ProxySwapper::oracle(), None, 31).unwrap();
        let glasses_dir = tempfile::tempdir().unwrap();
        let glasses = build_manifest(
            glasses_dir.path(),
            2,
            &ProxySwapper::oracle(),
            Some(ControlTransform::PreserveGlasses),
            32,
        )
        .unwrap();

        let tr = Trainer::new(tiny_config(), &oracles).unwrap();
        let bundle = tr.bundle();
        let hash = bundle.params_hash();

        let mut cfg = tiny_config();
        cfg.total_steps = 1;
        // No transform named at all.
        let err = control_finetune(
            bundle.clone(),
            glasses_dir.path(),
            &glasses,
            &cfg,
            &oracles,
            TrainOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, SwapLabError::Manifest(_)), "missing transform accepted: {err}");

        // Transform named, but the manifest is plain.
        cfg.control = Some("preserve_glasses".into());
        let err = control_finetune(
            bundle.clone(),
            plain_dir.path(),
            &plain,
            &cfg,
            &oracles,
            TrainOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, SwapLabError::Manifest(_)), "plain manifest accepted: {err}");

        // Zero steps: the checkpoint passes through untouched.
        cfg.total_steps = 0;
        let same = control_finetune(
            bundle.clone(),
            glasses_dir.path(),
            &glasses,
            &cfg,
            &oracles,
            TrainOptions::default(),
        )
        .unwrap();
        assert_eq!(same.params_hash(), hash);
        assert_eq!(same.step, 0);

        // One real step moves the parameters and advances the counter.
        cfg.total_steps = 1;
        let moved = control_finetune(
            bundle,
            glasses_dir.path(),
            &glasses,
            &cfg,
            &oracles,
            TrainOptions::default(),
        )
        .unwrap();
        assert_eq!(moved.step, 1);
        assert_ne!(moved.params_hash(), hash);
    }

    #[test]
    fn swap_is_deterministic_shaped_and_bounded() {
        let oracles = untrained_encoders_for_tests(19);
        let mut tr = Trainer::new(tiny_config(), &oracles).unwrap();
        // Open the output head a crack: at exact zero init an x0-model
        // predicts the same gray wash for every noise seed, which would make
        // the seed-sensitivity check below vacuous.
        let id = tr.params.id_of("swap.head.conv.w").unwrap();
        for (i, v) in tr.params.get_mut(id).data.iter_mut().enumerate() {
            *v = ((i % 7) as f64 - 3.0) * 1e-2;
        }
        let bundle = tr.bundle();
        let batch = toy_batch(1, 25);
        let (source, target) = (&batch[0].source, &batch[0].pseudo_target);

        let a = swap(&bundle, &oracles, source, target, 1, 5).unwrap();
        let b = swap(&bundle, &oracles, source, target, 1, 5).unwrap();
        assert_eq!(a.shape, vec![3, IMG_SIZE, IMG_SIZE]);
        assert_eq!(a.data, b.data, "equal seeds must swap identically");
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));

        let c = swap(&bundle, &oracles, source, target, 4, 5).unwrap();
        assert_eq!(c.shape, a.shape);
        let d = swap(&bundle, &oracles, source, target, 1, 6).unwrap();
        assert_ne!(a.data, d.data, "different noise seeds collapsed");

        let err = swap(&bundle, &oracles, source, target, 0, 5).unwrap_err();
        assert!(matches!(err, SwapLabError::InvalidSchedule(_)), "k = 0 accepted: {err}");
        let err = swap(&bundle, &oracles, source, target, 100_000, 5).unwrap_err();
        assert!(matches!(err, SwapLabError::InvalidSchedule(_)), "k > T accepted: {err}");

        let strangers = untrained_encoders_for_tests(23);
        let err = swap(&bundle, &strangers, source, target, 1, 5).unwrap_err();
        assert!(matches!(err, SwapLabError::Checkpoint(_)), "foreign encoders accepted");
    }
}
