//! Combined objective, adversarial training loop and inference.
//!
//! Per sample, a training step
//!
//! 1. asks the noise generator for `N(shift(c_a, c_u) + residual(x0), sigma^2)`,
//! 2. draws `t ~ U{1..T}` and noises `x0` to `x_t` with fresh draws from that
//!    Gaussian at every step,
//! 3. scores the last draw with the activity and domain heads (`L_act`, `L_binary`),
//! 4. runs the predictor on `(x_t, t)` for `L_noise`, `L_act-source` (source
//!    samples only) and the two adversarial heads behind the reversal edge.
//!
//! The generator learns only from its own heads; predictor losses treat `x_t`
//! and the drawn noise as data. Adversarial losses are reported as positive
//! cross-entropies. The sign flip lives in the gradient reversal, not in the
//! scalar.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condnoise::{reparameterize, GeneratorGrads, LabelEmbedding, NoiseGenerator, NoiseHeads};
use crate::datapipe::{DatasetSplit, Domain, FeatureVector, Standardizer};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{softmax, softmax_xent, Adam, DenseNet, GradientSet, Parameters, Vector};
use crate::noisepred::{OutputGrads, PredictorGrads, PredictorNet, PredictorShape};

const VALIDATION_SALT: u64 = 0x005e_ed0f_7a11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda_act: f64,
    pub lambda_binary: f64,
    pub lambda_adv: f64,
    pub lambda_act_source: f64,
    pub gamma_a: f64,
    pub gamma_u: f64,
    pub gamma_as: f64,
    pub lambda_grl: f64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub sqrt_mode: bool,
    pub fixed_unit_var: bool,
    pub infer_passes: usize,
    pub temb_dim: usize,
    /// Generator trunk width; `2 * D` when unset.
    pub generator_width: Option<usize>,
    /// Predictor hidden width; `4 * D` when unset.
    pub hidden_width: Option<usize>,
    /// Predictor penultimate width; `2 * D` when unset.
    pub penultimate_width: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            lr: 0.001,
            lambda_act: 1.0,
            lambda_binary: 1.0,
            lambda_adv: 1.0,
            lambda_act_source: 1.0,
            gamma_a: 1.0,
            gamma_u: 1.0,
            gamma_as: 1.0,
            lambda_grl: 1.0,
            timesteps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            batch_size: 64,
            seed: 0,
            sqrt_mode: false,
            fixed_unit_var: true,
            infer_passes: 10,
            temb_dim: 16,
            generator_width: None,
            hidden_width: None,
            penultimate_width: None,
        }
    }
}

impl TrainConfig {
    /// Checks every field; `epochs = 0` is allowed and means "initialise only".
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::Config {
            field: field.into(),
            message,
        });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be a positive number, got {}", self.lr));
        }
        for (name, v) in [
            ("lambda-act", self.lambda_act),
            ("lambda-binary", self.lambda_binary),
            ("lambda-adv", self.lambda_adv),
            ("lambda-act-source", self.lambda_act_source),
            ("gamma-a", self.gamma_a),
            ("gamma-u", self.gamma_u),
            ("gamma-as", self.gamma_as),
            ("lambda-grl", self.lambda_grl),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, format!("must be non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("timesteps", self.timesteps),
            ("batch-size", self.batch_size),
            ("infer-passes", self.infer_passes),
        ] {
            if v == 0 {
                return bad(name, "must be at least 1".into());
            }
        }
        if self.temb_dim == 0 || !self.temb_dim.is_multiple_of(2) {
            return bad("temb-dim", format!("must be even and positive, got {}", self.temb_dim));
        }
        for (name, w) in [
            ("generator-width", self.generator_width),
            ("hidden-width", self.hidden_width),
            ("penultimate-width", self.penultimate_width),
        ] {
            if w == Some(0) {
                return bad(name, "must be at least 1".into());
            }
        }
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end, self.sqrt_mode).map_err(|e| {
            Error::Config {
                field: "beta-start/beta-end".into(),
                message: e.to_string(),
            }
        })?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end, self.sqrt_mode)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_noise: f64,
    pub l_act: f64,
    pub l_binary: f64,
    pub l_adv_a: f64,
    pub l_adv_u: f64,
    pub l_act_source: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Fills `l_total` from the components and the loss weights.
    pub fn with_total(mut self, cfg: &TrainConfig) -> Self {
        self.l_total = combined_total(&self, cfg);
        self
    }

    fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.l_noise += weight * other.l_noise;
        self.l_act += weight * other.l_act;
        self.l_binary += weight * other.l_binary;
        self.l_adv_a += weight * other.l_adv_a;
        self.l_adv_u += weight * other.l_adv_u;
        self.l_act_source += weight * other.l_act_source;
        self.l_total += weight * other.l_total;
    }
}

/// `l_noise + λ_act l_act + λ_binary l_binary + λ_adv (l_adv_a + l_adv_u) + λ_act_source l_act_source`.
pub fn combined_total(b: &LossBreakdown, cfg: &TrainConfig) -> f64 {
    b.l_noise
        + cfg.lambda_act * b.l_act
        + cfg.lambda_binary * b.l_binary
        + cfg.lambda_adv * (b.l_adv_a + b.l_adv_u)
        + cfg.lambda_act_source * b.l_act_source
}

/// Mean over the batch of `||eps - eps_hat||^2`.
pub fn loss_noise(eps: &[Vector], eps_hat: &[Vector]) -> Result<f64> {
    if eps.len() != eps_hat.len() {
        return Err(Error::dim("noise batch", eps.len(), eps_hat.len()));
    }
    if eps.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (e, h) in eps.iter().zip(eps_hat) {
        if e.len() != h.len() {
            return Err(Error::dim("noise vector", e.len(), h.len()));
        }
        let d = e - h;
        total += d.dot(&d);
    }
    Ok(total / eps.len() as f64)
}

/// Every trainable network of the method, plus the fixed preprocessing it was trained with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Models {
    pub standardizer: Standardizer,
    pub schedule: NoiseSchedule,
    pub generator: NoiseGenerator,
    pub heads: NoiseHeads,
    pub predictor: PredictorNet,
    pub source_classes: usize,
    pub activity_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub generator: GeneratorGrads,
    pub activity_head: GradientSet,
    pub domain_head: GradientSet,
    pub predictor: PredictorGrads,
}

impl Parameters for Models {
    fn collect_params(&self, out: &mut Vec<f64>) {
        self.generator.collect_params(out);
        self.heads.collect_params(out);
        self.predictor.collect_params(out);
    }

    fn assign_params(&mut self, src: &mut std::slice::Iter<'_, f64>) {
        self.generator.assign_params(src);
        self.heads.assign_params(src);
        self.predictor.assign_params(src);
    }
}

impl Parameters for ModelGrads {
    fn collect_params(&self, out: &mut Vec<f64>) {
        self.generator.collect_params(out);
        self.activity_head.collect_params(out);
        self.domain_head.collect_params(out);
        self.predictor.collect_params(out);
    }

    fn assign_params(&mut self, src: &mut std::slice::Iter<'_, f64>) {
        self.generator.assign_params(src);
        self.activity_head.assign_params(src);
        self.domain_head.assign_params(src);
        self.predictor.assign_params(src);
    }
}

impl Models {
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        source_classes: usize,
        activity_classes: usize,
        standardizer: Standardizer,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if source_classes == 0 || activity_classes < source_classes {
            return Err(Error::InvalidArgument(format!(
                "need at least one source class and activity classes >= source classes, got {source_classes}/{activity_classes}"
            )));
        }
        let embedding = LabelEmbedding::orthogonal(activity_classes, dim, cfg.gamma_a, cfg.gamma_u, rng)?;
        let generator = NoiseGenerator::new(
            dim,
            cfg.generator_width.unwrap_or(2 * dim),
            embedding,
            cfg.fixed_unit_var,
            rng,
        )?;
        let heads = NoiseHeads::new(dim, activity_classes, rng)?;
        let mut shape = PredictorShape::for_dim(dim, source_classes, activity_classes, cfg.timesteps);
        shape.temb_dim = cfg.temb_dim;
        if let Some(h) = cfg.hidden_width {
            shape.hidden = h;
        }
        if let Some(p) = cfg.penultimate_width {
            shape.penultimate = p;
        }
        let predictor = PredictorNet::new(shape, rng)?;
        Ok(Models {
            standardizer,
            schedule: cfg.schedule()?,
            generator,
            heads,
            predictor,
            source_classes,
            activity_classes,
        })
    }

    pub fn dim(&self) -> usize {
        self.generator.dim()
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            generator: self.generator.zero_grads(),
            activity_head: GradientSet::zeros_like(&self.heads.activity),
            domain_head: GradientSet::zeros_like(&self.heads.domain),
            predictor: self.predictor.zero_grads(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.to_flat().len()
    }

    /// Noises a standardized `x0` to timestep `t` with the given per-step draws.
    fn noise_to(&self, x0: &Vector, t: usize, draws: &[Vector]) -> Result<Vector> {
        let mut x = x0.clone();
        for (s, eps) in (1..=t).zip(draws) {
            x = self.schedule.cond_forward_step(&x, s, eps)?;
        }
        Ok(x)
    }
}

fn standard_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vector {
    Vector::from_shape_simple_fn(dim, || StandardNormal.sample(rng))
}

/// Losses and gradients of one mini-batch. Gradients are those of the
/// weighted objective, with adversarial terms reversed at the predictor trunk.
pub fn batch_losses<R: Rng + ?Sized>(
    batch: &[FeatureVector],
    models: &Models,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, ModelGrads)> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let n = batch.len() as f64;
    let n_source = batch.iter().filter(|f| f.domain == Domain::Source).count();
    if n_source == 0 && cfg.lambda_act_source > 0.0 {
        return Err(Error::InsufficientData(
            "batch has no source samples but lambda-act-source > 0".into(),
        ));
    }
    let dim = models.dim();
    let mut grads = models.zero_grads();
    let mut sums = LossBreakdown::default();

    for f in batch {
        let c_a = f.activity.ok_or_else(|| {
            Error::InvalidArgument("training sample without activity or pseudo-label".into())
        })?;
        let c_u = f.domain.index();
        let x0 = models.standardizer.apply(&f.x0);

        // forward diffusion with class-conditioned noise
        let (gauss, gtape) = models.generator.params(&x0, c_a, c_u)?;
        let t = rng.random_range(1..=models.schedule.timesteps);
        let mut draws = Vec::with_capacity(t);
        let mut z_last = Vector::zeros(dim);
        for _ in 0..t {
            z_last = standard_normal(dim, rng);
            draws.push(reparameterize(&gauss, &z_last)?);
        }
        let x_t = models.noise_to(&x0, t, &draws)?;
        let eps = draws.last().expect("t >= 1");

        let (logits_a, tape_a) = models.heads.activity.forward(eps)?;
        let (logits_u, tape_u) = models.heads.domain.forward(eps)?;
        let (l_act, d_a) = softmax_xent(&logits_a, c_a)?;
        let (l_bin, d_u) = softmax_xent(&logits_u, c_u)?;
        let (g_a, d_eps_a) = models.heads.activity.backward(&tape_a, &(d_a * (cfg.lambda_act / n)))?;
        let (g_u, d_eps_u) = models.heads.domain.backward(&tape_u, &(d_u * (cfg.lambda_binary / n)))?;
        grads.activity_head.add_assign(&g_a);
        grads.domain_head.add_assign(&g_u);
        let d_eps = d_eps_a + d_eps_u;
        let d_log_var = if models.generator.fixed_unit_var {
            Vector::zeros(dim)
        } else {
            // eps = mean + exp(log_var / 2) * z
            &d_eps * &(&gauss.std() * &z_last) * 0.5
        };
        models.generator.backward(&gtape, &d_eps, &d_log_var, &mut grads.generator)?;

        // reverse process: noise prediction plus classifier heads
        let (out, ptape) = models.predictor.predict(&x_t, t, cfg.lambda_grl)?;
        let resid = &out.eps_hat - eps;
        let l_noise = resid.dot(&resid);
        let (l_adv_a, d_adv_a) = softmax_xent(&out.logits_adv_a, c_a)?;
        let (l_adv_u, d_adv_u) = softmax_xent(&out.logits_adv_u, c_u)?;
        let mut up = OutputGrads {
            eps_hat: Some(resid * (2.0 / n)),
            cas: None,
            adv_a: Some(d_adv_a * (cfg.lambda_adv / n)),
            adv_u: Some(d_adv_u * (cfg.lambda_adv / n)),
            trunk_scale: Some([cfg.gamma_as, cfg.gamma_a, cfg.gamma_u]),
        };
        let mut l_cas = 0.0;
        if let Some(c_as) = f.source_activity {
            let (l, d) = softmax_xent(&out.logits_cas, c_as)?;
            l_cas = l;
            up.cas = Some(d * (cfg.lambda_act_source / n_source as f64));
        }
        models.predictor.backward(&ptape, &up, &mut grads.predictor)?;

        sums.l_noise += l_noise;
        sums.l_act += l_act;
        sums.l_binary += l_bin;
        sums.l_adv_a += l_adv_a;
        sums.l_adv_u += l_adv_u;
        sums.l_act_source += l_cas;
    }

    let breakdown = LossBreakdown {
        l_noise: sums.l_noise / n,
        l_act: sums.l_act / n,
        l_binary: sums.l_binary / n,
        l_adv_a: sums.l_adv_a / n,
        l_adv_u: sums.l_adv_u / n,
        l_act_source: if n_source > 0 {
            sums.l_act_source / n_source as f64
        } else {
            0.0
        },
        l_total: 0.0,
    }
    .with_total(cfg);
    Ok((breakdown, grads))
}

/// One line of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub val_accuracy: f64,
}

pub const HISTORY_COLUMNS: [&str; 9] = [
    "epoch",
    "l_noise",
    "l_act",
    "l_binary",
    "l_adv_a",
    "l_adv_u",
    "l_act_source",
    "l_total",
    "val_accuracy",
];

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Snapshot with the best validation accuracy (earliest on ties).
    pub models: Models,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Optimizer state at the end of training.
    pub optimizer: Adam,
}

impl FitResult {
    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.history.iter().map(|r| r.val_accuracy).reduce(f64::max)
    }
}

/// Trains all networks jointly on source plus pseudo-labeled target data.
///
/// Each epoch walks the larger of the two training sets once in batches that
/// are half source, half target (the smaller set is cycled), then scores the
/// validation half.
pub fn fit(split: &DatasetSplit, cfg: &TrainConfig) -> Result<FitResult> {
    fit_with_progress(split, cfg, |_| {})
}

pub fn fit_with_progress<F: FnMut(&EpochRecord)>(
    split: &DatasetSplit,
    cfg: &TrainConfig,
    mut progress: F,
) -> Result<FitResult> {
    cfg.validate()?;
    if split.train_source.is_empty() || split.train_target.is_empty() {
        return Err(Error::InsufficientData("training sets must be non-empty".into()));
    }
    let source_classes = split.source_classes();
    let mut activity_classes = source_classes;
    for f in &split.train_target {
        let a = f.activity.ok_or_else(|| {
            Error::InvalidArgument("target training samples need pseudo-labels; run assign_pseudo_labels".into())
        })?;
        if a < source_classes {
            return Err(Error::InvalidArgument(format!(
                "pseudo-label {a} collides with source class ids 0..{source_classes}"
            )));
        }
        activity_classes = activity_classes.max(a + 1);
    }
    let standardizer = Standardizer::fit(
        split
            .train_source
            .iter()
            .chain(&split.train_target)
            .map(|f| &f.x0),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut models = Models::init(
        split.dim(),
        source_classes,
        activity_classes,
        standardizer,
        cfg,
        &mut rng,
    )?;
    let mut optimizer = Adam::new(models.param_count());
    let mut best = (models.clone(), f64::NEG_INFINITY, 0);
    let mut history = Vec::with_capacity(cfg.epochs);

    let half = (cfg.batch_size / 2).max(1);
    let mut src_order: Vec<usize> = (0..split.train_source.len()).collect();
    let mut tgt_order: Vec<usize> = (0..split.train_target.len()).collect();
    let n_batches = split.train_source.len().max(split.train_target.len()).div_ceil(half);

    for epoch in 1..=cfg.epochs {
        src_order.shuffle(&mut rng);
        tgt_order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        let mut batch = Vec::with_capacity(2 * half);
        for b in 0..n_batches {
            batch.clear();
            for i in 0..half {
                let k = b * half + i;
                batch.push(split.train_source[src_order[k % src_order.len()]].clone());
                batch.push(split.train_target[tgt_order[k % tgt_order.len()]].clone());
            }
            let (loss, grads) = batch_losses(&batch, &models, cfg, &mut rng)?;
            optimizer.step(&mut models, &grads.to_flat(), cfg.lr)?;
            epoch_loss.accumulate(&loss, 1.0 / n_batches as f64);
        }
        let val_accuracy = if split.val_target.is_empty() {
            0.0
        } else {
            evaluate_seeded(&models, &split.val_target, cfg, cfg.seed ^ VALIDATION_SALT)?
        };
        let record = EpochRecord {
            epoch,
            losses: epoch_loss,
            val_accuracy,
        };
        progress(&record);
        history.push(record);
        if val_accuracy > best.1 {
            best = (models.clone(), val_accuracy, epoch);
        }
    }
    Ok(FitResult {
        models: best.0,
        best_epoch: best.2,
        history,
        optimizer,
    })
}

/// Re-scores `samples` exactly as [`fit`] scores the validation set each epoch.
pub fn validation_accuracy(models: &Models, samples: &[FeatureVector], cfg: &TrainConfig) -> Result<f64> {
    evaluate_seeded(models, samples, cfg, cfg.seed ^ VALIDATION_SALT)
}

/// Classifies one raw feature vector.
///
/// Averages the source-activity head's softmax over `infer_passes` random
/// timesteps, each noised with zero-mean unit Gaussian draws since labels are
/// unknown at test time. Returns the argmax and the averaged probabilities.
pub fn predict<R: Rng + ?Sized>(
    models: &Models,
    x0: &Vector,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(usize, Vector)> {
    let x0 = models.standardizer.apply(x0);
    let dim = models.dim();
    let passes = cfg.infer_passes.max(1);
    let mut probs = Vector::zeros(models.source_classes);
    for _ in 0..passes {
        let t = rng.random_range(1..=models.schedule.timesteps);
        let draws: Vec<Vector> = (0..t).map(|_| standard_normal(dim, rng)).collect();
        let x_t = models.noise_to(&x0, t, &draws)?;
        probs += &softmax(&models.predictor.predict_cas(&x_t, t)?);
    }
    probs /= passes as f64;
    let label = argmax(&probs);
    Ok((label, probs))
}

pub fn argmax(v: &Vector) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
        .0
}

/// Per-sample RNG: stream `index` of a ChaCha generator seeded with `seed`.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Predictions for every sample; sample `i` uses its own RNG stream, so the
/// result does not depend on thread scheduling.
pub fn predict_all(models: &Models, samples: &[FeatureVector], cfg: &TrainConfig, seed: u64) -> Result<Vec<usize>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, f)| predict(models, &f.x0, cfg, &mut sample_rng(seed, i)).map(|(l, _)| l))
        .collect()
}

fn evaluate_seeded(models: &Models, samples: &[FeatureVector], cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let preds = predict_all(models, samples, cfg, seed)?;
    accuracy(&preds, samples)
}

/// Fraction of samples whose predicted label equals their activity label.
pub fn evaluate(models: &Models, samples: &[FeatureVector], cfg: &TrainConfig) -> Result<f64> {
    evaluate_seeded(models, samples, cfg, cfg.seed)
}

pub fn accuracy(predictions: &[usize], samples: &[FeatureVector]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("cannot score an empty sample list".into()));
    }
    let mut correct = 0usize;
    for (p, f) in predictions.iter().zip(samples) {
        let truth = f
            .activity
            .ok_or_else(|| Error::InvalidArgument("evaluation sample without a label".into()))?;
        if *p == truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// `counts[truth][predicted]`; rows cover every label seen in either.
pub fn confusion(predictions: &[usize], samples: &[FeatureVector]) -> Vec<Vec<usize>> {
    let classes = predictions
        .iter()
        .copied()
        .chain(samples.iter().filter_map(|f| f.activity))
        .max()
        .map_or(0, |m| m + 1);
    let mut counts = vec![vec![0; classes]; classes];
    for (p, f) in predictions.iter().zip(samples) {
        if let Some(t) = f.activity {
            counts[t][*p] += 1;
        }
    }
    counts
}

/// Plain MLP trained on source features only, the no-adaptation reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceOnly {
    pub standardizer: Standardizer,
    pub net: DenseNet,
}

impl SourceOnly {
    /// Same standardization, optimizer, epochs and batch size as [`fit`];
    /// network `D -> 2D (relu) -> classes`.
    pub fn train(split: &DatasetSplit, cfg: &TrainConfig) -> Result<Self> {
        use crate::nn::{adam_step, Activation, AdamState};
        cfg.validate()?;
        let standardizer = Standardizer::fit(
            split
                .train_source
                .iter()
                .chain(&split.train_target)
                .map(|f| &f.x0),
        )?;
        let dim = split.dim();
        let classes = split.source_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut net = DenseNet::new(
            dim,
            &[(2 * dim, Activation::Relu), (classes, Activation::Linear)],
            &mut rng,
        )?;
        let mut state = AdamState::new(&net);
        let xs: Vec<(Vector, usize)> = split
            .train_source
            .iter()
            .map(|f| (standardizer.apply(&f.x0), f.activity.expect("validated source label")))
            .collect();
        let mut order: Vec<usize> = (0..xs.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let mut g = GradientSet::zeros_like(&net);
                for &i in chunk {
                    let (out, tape) = net.forward(&xs[i].0)?;
                    let (_, d) = softmax_xent(&out, xs[i].1)?;
                    let (gi, _) = net.backward(&tape, &(d / chunk.len() as f64))?;
                    g.add_assign(&gi);
                }
                adam_step(&mut net, &g, &mut state, cfg.lr)?;
            }
        }
        Ok(SourceOnly { standardizer, net })
    }

    pub fn predict(&self, x0: &Vector) -> Result<usize> {
        Ok(argmax(&self.net.infer(&self.standardizer.apply(x0))?))
    }

    pub fn evaluate(&self, samples: &[FeatureVector]) -> Result<f64> {
        let preds = samples.iter().map(|f| self.predict(&f.x0)).collect::<Result<Vec<_>>>()?;
        accuracy(&preds, samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn published_defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 500);
        assert_eq!(c.lr, 0.001);
        for v in [c.lambda_act, c.lambda_binary, c.lambda_adv, c.lambda_act_source, c.gamma_a, c.gamma_u] {
            assert_eq!(v, 1.0);
        }
        c.validate().unwrap();
    }

    #[test]
    fn validation_names_the_field() {
        let c = TrainConfig {
            lr: -1.0,
            ..Default::default()
        };
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "lr"),
            other => panic!("{other:?}"),
        }
        let c = TrainConfig {
            gamma_u: -0.5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn loss_noise_cases() {
        let e = vec![array![1.0, 0.0]];
        assert_eq!(loss_noise(&e, &e).unwrap(), 0.0);
        assert_eq!(loss_noise(&e, &[array![0.0, 0.0]]).unwrap(), 1.0);
        let a = vec![array![0.3, -1.0, 2.0]];
        let b = vec![array![0.1, 0.5, -0.5]];
        let pa = vec![array![2.0, 0.3, -1.0]];
        let pb = vec![array![-0.5, 0.1, 0.5]];
        assert_eq!(loss_noise(&a, &b).unwrap(), loss_noise(&pa, &pb).unwrap());
        assert!(loss_noise(&e, &[array![0.0]]).is_err());
    }

    #[test]
    fn total_zeroes_with_weights() {
        let b = LossBreakdown {
            l_noise: 1.5,
            l_act: 0.3,
            l_binary: 0.7,
            l_adv_a: 1.1,
            l_adv_u: 0.6,
            l_act_source: 0.2,
            l_total: 0.0,
        };
        let zero = TrainConfig {
            lambda_act: 0.0,
            lambda_binary: 0.0,
            lambda_adv: 0.0,
            lambda_act_source: 0.0,
            ..Default::default()
        };
        assert_eq!(b.with_total(&zero).l_total, 1.5);
        let t = b.with_total(&TrainConfig::default()).l_total;
        assert!((t - (1.5 + 0.3 + 0.7 + 1.1 + 0.6 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn accuracy_and_confusion() {
        let samples: Vec<FeatureVector> = [0, 1, 1, 2]
            .iter()
            .map(|&l| FeatureVector::target(array![0.0], Some(l)))
            .collect();
        assert_eq!(accuracy(&[0, 1, 1, 2], &samples).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 0, 0], &samples).unwrap(), 0.5);
        let c = confusion(&[0, 1, 0, 0], &samples);
        assert_eq!(c.iter().flatten().sum::<usize>(), 4);
        assert_eq!(c[1][0], 1);
        assert!(accuracy(&[], &[]).is_err());
    }
}
