//! Batch-synthesis engine: per-batch episodes with three optimizers over the
//! generator, the feature pyramid and the channel scales, plus the two
//! baselines used in loss-curve and component studies (raw-pixel optimization
//! and a persistent one-to-many generator).
//!
//! Each epoch runs the generator, extracts the teacher's feature pyramid from
//! the generator output, composes the pre-scale image, applies the channel
//! scales, and evaluates the full objective on the result with a second
//! teacher pass; the three parameter groups then step independently. The
//! teacher is cloned into sessions and never mutated.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierHandle, FeaturePyramid, TeacherSession};
use crate::ftp::{
    compose_backward, compose_output, ftp_backward, ftp_forward, init_ftp, ComposeMode, FtpState,
};
use crate::generator::{
    generate, generate_backward, init_generator, sample_latent, GeneratorState, LabelPolicy,
    LatentBatch,
};
use crate::losses::{total_loss_with_input_grad, LossReport, LossWeights};
use crate::nn::init::{normal, seeded_rng};
use crate::nn::{Adam, Param};
use crate::util::derive_seed;
use crate::{Error, Result};

/// Learnable per-image, per-channel scales applied to the composed image.
#[derive(Debug, Clone)]
pub struct AcsParams {
    /// Shape (batch, 3, 1, 1).
    pub alpha: Param,
}

impl AcsParams {
    /// Draws fresh scales from N(5.0, 1.0).
    pub fn init(batch: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        AcsParams {
            alpha: Param::new(normal(&mut rng, &[batch, 3, 1, 1], 5.0, 1.0)),
        }
    }

    /// Fixed identity scales (the "no channel scaling" ablation).
    pub fn ones(batch: usize) -> Self {
        AcsParams {
            alpha: Param::new(ndarray::ArrayD::ones(ndarray::IxDyn(&[batch, 3, 1, 1]))),
        }
    }

    pub fn batch(&self) -> usize {
        self.alpha.value.shape()[0]
    }

    /// Scales flattened to (batch, 3).
    pub fn as_matrix(&self) -> Array2<f64> {
        let b = self.batch();
        let mut m = Array2::zeros((b, 3));
        for n in 0..b {
            for c in 0..3 {
                m[[n, c]] = self.alpha.value[[n, c, 0, 0]];
            }
        }
        m
    }
}

/// Per-image, per-channel scalar multiplication.
pub fn apply_acs(alpha: &AcsParams, image: &Array4<f64>) -> Result<Array4<f64>> {
    let (b, c, _, _) = image.dim();
    if alpha.batch() != b || c != 3 {
        return Err(Error::shape(
            "channel scales",
            format!("{}x3 image batch", alpha.batch()),
            format!("{b}x{c}"),
        ));
    }
    let mut out = image.clone();
    for n in 0..b {
        for ch in 0..3 {
            let s = alpha.alpha.value[[n, ch, 0, 0]];
            out.index_axis_mut(ndarray::Axis(0), n)
                .index_axis_mut(ndarray::Axis(0), ch)
                .mapv_inplace(|v| v * s);
        }
    }
    Ok(out)
}

/// Synthesis strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthMode {
    /// One fresh generator/pyramid/scale set per batch.
    Natural,
    /// Direct optimization of the pixel tensor; no generator.
    RawPixel,
    /// One persistent generator/pyramid/scale set across all batches.
    OneToMany,
}

/// All scalars of one synthesis run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub batch_size: usize,
    pub num_batches: usize,
    pub epochs: usize,
    pub lr_generator: f64,
    pub lr_ftp: f64,
    pub lr_alpha: f64,
    pub weights: LossWeights,
    pub mode: SynthMode,
    pub label_policy: LabelPolicy,
    pub compose_mode: ComposeMode,
    /// Feature pyramid contribution on/off (off composes with a zero map).
    pub use_ftp: bool,
    /// Channel scales learnable (on) or frozen at 1 (off).
    pub use_acs: bool,
    pub master_seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            batch_size: 256,
            num_batches: 1,
            epochs: 2000,
            lr_generator: 1.0e-3,
            lr_ftp: 5.0e-4,
            lr_alpha: 5.0e-2,
            weights: LossWeights::default(),
            mode: SynthMode::Natural,
            label_policy: LabelPolicy::Balanced,
            compose_mode: ComposeMode::ConvTanh,
            use_ftp: true,
            use_acs: true,
            master_seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.num_batches == 0 {
            return Err(Error::Config("num_batches must be >= 1".into()));
        }
        for (name, lr) in [
            ("lr_generator", self.lr_generator),
            ("lr_ftp", self.lr_ftp),
            ("lr_alpha", self.lr_alpha),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        self.weights.validate()
    }

    /// Disables the feature pyramid contribution.
    pub fn without_ftp(mut self) -> Self {
        self.use_ftp = false;
        self
    }

    /// Freezes the channel scales at exactly 1.
    pub fn without_acs(mut self) -> Self {
        self.use_acs = false;
        self
    }

    /// Replaces per-batch re-initialization with one persistent generator.
    pub fn without_one_to_one(mut self) -> Self {
        if self.mode == SynthMode::Natural {
            self.mode = SynthMode::OneToMany;
        }
        self
    }
}

/// One synthesized batch with its optimization trace.
#[derive(Debug, Clone)]
pub struct SynthBatch {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    /// Final channel scales, (batch, 3).
    pub alpha: Array2<f64>,
    pub trace: Vec<LossReport>,
    pub episode_seed: u64,
}

struct Episode {
    latent: LatentBatch,
    gen: GeneratorState,
    ftp: FtpState,
    alpha: AcsParams,
    opt_gen: Adam,
    opt_ftp: Adam,
    opt_alpha: Adam,
}

impl Episode {
    fn fresh(teacher: &ClassifierHandle, config: &InversionConfig, seed: u64) -> Result<Self> {
        let classes = teacher.num_classes();
        let latent = sample_latent(
            config.batch_size,
            classes,
            config.label_policy,
            derive_seed(seed, 1),
        );
        let gen = init_generator(classes, teacher.resolution(), derive_seed(seed, 2))?;
        let ftp = init_ftp(&teacher.spec, derive_seed(seed, 3), config.compose_mode)?;
        let alpha = if config.use_acs {
            AcsParams::init(config.batch_size, derive_seed(seed, 4))
        } else {
            AcsParams::ones(config.batch_size)
        };
        Ok(Episode {
            latent,
            gen,
            ftp,
            alpha,
            opt_gen: Adam::new(config.lr_generator),
            opt_ftp: Adam::new(config.lr_ftp),
            opt_alpha: Adam::new(config.lr_alpha),
        })
    }

    fn resample_latent(&mut self, config: &InversionConfig, classes: usize, seed: u64) {
        self.latent = sample_latent(
            config.batch_size,
            classes,
            config.label_policy,
            derive_seed(seed, 1),
        );
    }
}

struct StepTensors {
    prescale: Array4<f64>,
    image: Array4<f64>,
}

/// Forward composition for one epoch. `tap_scale` perturbs the extracted
/// pyramid (test hook for ablation isolation); `None` is the normal path.
fn compose_step(
    episode: &mut Episode,
    t_pyr: &mut TeacherSession,
    tap_names: &[String],
    use_ftp: bool,
    tap_scale: Option<f64>,
) -> Result<StepTensors> {
    let gen_out = generate(&mut episode.gen, &episode.latent)?;
    let m_last = if use_ftp {
        let mut out = t_pyr.forward(&gen_out)?;
        if let Some(s) = tap_scale {
            for t in &mut out.taps {
                t.mapv_inplace(|v| v * s);
            }
        }
        let pyramid = FeaturePyramid {
            maps: out.taps,
            tap_names: tap_names.to_vec(),
        };
        let maps = ftp_forward(&mut episode.ftp, &pyramid)?;
        maps.last().clone()
    } else {
        Array4::zeros(gen_out.raw_dim())
    };
    let prescale = compose_output(&mut episode.ftp, &m_last, &gen_out)?;
    let image = apply_acs(&episode.alpha, &prescale)?;
    Ok(StepTensors { prescale, image })
}

fn backward_step(
    episode: &mut Episode,
    t_pyr: &mut TeacherSession,
    tensors: &StepTensors,
    d_image: &Array4<f64>,
    use_ftp: bool,
    use_acs: bool,
) {
    // Through the channel scales.
    let (b, _, h, w) = d_image.dim();
    if use_acs {
        for n in 0..b {
            for c in 0..3 {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += d_image[[n, c, i, j]] * tensors.prescale[[n, c, i, j]];
                    }
                }
                episode.alpha.alpha.grad[[n, c, 0, 0]] += acc;
            }
        }
    }
    let mut d_prescale = d_image.clone();
    for n in 0..b {
        for c in 0..3 {
            let s = episode.alpha.alpha.value[[n, c, 0, 0]];
            d_prescale
                .index_axis_mut(ndarray::Axis(0), n)
                .index_axis_mut(ndarray::Axis(0), c)
                .mapv_inplace(|v| v * s);
        }
    }

    // Through the composition; the sum node hands the same gradient to the
    // enhancement map and the generator output.
    let d_sum = compose_backward(&mut episode.ftp, &d_prescale);

    let d_gen = if use_ftp {
        let d_taps = ftp_backward(&mut episode.ftp, &d_sum);
        let via_teacher = t_pyr.backward(None, Some(&d_taps), None);
        d_sum + via_teacher
    } else {
        d_sum
    };
    generate_backward(&mut episode.gen, &d_gen);
}

fn zero_episode_grads(episode: &mut Episode) {
    for p in episode.gen.params_mut() {
        p.zero_grad();
    }
    for p in episode.ftp.params_mut() {
        p.zero_grad();
    }
    episode.alpha.alpha.zero_grad();
}

fn run_episode_epochs(
    teacher: &ClassifierHandle,
    config: &InversionConfig,
    episode: &mut Episode,
    tap_scale: Option<f64>,
) -> Result<(Array4<f64>, Vec<LossReport>)> {
    let mut t_pyr = teacher.session();
    let mut t_loss = teacher.session();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let tensors = compose_step(episode, &mut t_pyr, &teacher.tap_names, config.use_ftp, tap_scale)?;
        let (report, d_image) = total_loss_with_input_grad(
            &mut t_loss,
            &tensors.image,
            &episode.latent.labels,
            &config.weights,
        )?;
        if !report.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at epoch {epoch}: ce={} r_bn={} r_tv={} r_l2={} ({} finite epochs recorded)",
                report.ce,
                report.r_bn,
                report.r_tv,
                report.r_l2,
                trace.len(),
            )));
        }
        trace.push(report);
        zero_episode_grads(episode);
        backward_step(episode, &mut t_pyr, &tensors, &d_image, config.use_ftp, config.use_acs);
        episode.opt_gen.step(&mut episode.gen.params_mut());
        episode.opt_ftp.step(&mut episode.ftp.params_mut());
        if config.use_acs {
            episode.opt_alpha.step(&mut [&mut episode.alpha.alpha]);
        }
    }
    // Materialize the batch with the final parameters.
    let tensors = compose_step(episode, &mut t_pyr, &teacher.tap_names, config.use_ftp, tap_scale)?;
    if tensors.image.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite synthesized images".into()));
    }
    Ok((tensors.image, trace))
}

/// Runs one batch-synthesis episode (fresh generator, pyramid and scales).
pub fn invert_batch(
    teacher: &ClassifierHandle,
    config: &InversionConfig,
    episode_seed: u64,
) -> Result<SynthBatch> {
    invert_batch_with_tap_scale(teacher, config, episode_seed, None)
}

/// [`invert_batch`] with a pyramid perturbation hook; test instrumentation.
#[doc(hidden)]
pub fn invert_batch_with_tap_scale(
    teacher: &ClassifierHandle,
    config: &InversionConfig,
    episode_seed: u64,
    tap_scale: Option<f64>,
) -> Result<SynthBatch> {
    config.validate()?;
    let mut episode = Episode::fresh(teacher, config, episode_seed)?;
    let (images, trace) = run_episode_epochs(teacher, config, &mut episode, tap_scale)?;
    Ok(SynthBatch {
        images,
        labels: episode.latent.labels.clone(),
        alpha: episode.alpha.as_matrix(),
        trace,
        episode_seed,
    })
}

/// Runs `num_batches` independent episodes with derived seeds (fresh
/// generator, pyramid, scales and latent per batch).
pub fn run_inversion(teacher: &ClassifierHandle, config: &InversionConfig) -> Result<Vec<SynthBatch>> {
    config.validate()?;
    (0..config.num_batches)
        .map(|b| invert_batch(teacher, config, derive_seed(config.master_seed, b as u64)))
        .collect()
}

/// Directly optimizes a pixel tensor under the same objective and optimizer
/// settings (the pixels take the generator's place and learning rate; no
/// pyramid or scales).
pub fn invert_raw_pixels(
    teacher: &ClassifierHandle,
    config: &InversionConfig,
    seed: u64,
) -> Result<SynthBatch> {
    config.validate()?;
    let classes = teacher.num_classes();
    let r = teacher.resolution();
    let latent = sample_latent(config.batch_size, classes, config.label_policy, derive_seed(seed, 1));
    let labels = latent.labels;
    let mut rng = seeded_rng(derive_seed(seed, 2));
    let mut pixels = Param::new(crate::nn::init::standard_normal(
        &mut rng,
        &[config.batch_size, 3, r, r],
    ));
    let mut opt = Adam::new(config.lr_generator);
    let mut t_loss = teacher.session();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let images = pixels
            .value
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("pixel tensor is 4-D");
        let (report, d_image) =
            total_loss_with_input_grad(&mut t_loss, &images, &labels, &config.weights)?;
        if !report.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at epoch {epoch} ({} finite epochs recorded)",
                trace.len()
            )));
        }
        trace.push(report);
        pixels.zero_grad();
        pixels.grad.assign(&d_image.into_dyn());
        opt.step(&mut [&mut pixels]);
    }
    let images = pixels
        .value
        .into_dimensionality::<ndarray::Ix4>()
        .expect("pixel tensor is 4-D");
    if images.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite synthesized images".into()));
    }
    Ok(SynthBatch {
        images,
        labels,
        alpha: Array2::ones((config.batch_size, 3)),
        trace,
        episode_seed: seed,
    })
}

/// Synthesizes all batches with one persistent generator/pyramid/scale set;
/// only the latent batch is redrawn between batches.
pub fn invert_one_to_many(
    teacher: &ClassifierHandle,
    config: &InversionConfig,
) -> Result<Vec<SynthBatch>> {
    Ok(invert_one_to_many_traced(teacher, config)?.0)
}

/// [`invert_one_to_many`] that also reports the generator parameter digest
/// at the start and end of every batch; test instrumentation for the
/// persistence contract.
#[doc(hidden)]
#[allow(clippy::type_complexity)]
pub fn invert_one_to_many_traced(
    teacher: &ClassifierHandle,
    config: &InversionConfig,
) -> Result<(Vec<SynthBatch>, Vec<(String, String)>)> {
    config.validate()?;
    let classes = teacher.num_classes();
    let first_seed = derive_seed(config.master_seed, 0);
    let mut episode = Episode::fresh(teacher, config, first_seed)?;
    let mut out = Vec::with_capacity(config.num_batches);
    let mut digests = Vec::with_capacity(config.num_batches);
    for b in 0..config.num_batches {
        let seed = derive_seed(config.master_seed, b as u64);
        if b > 0 {
            episode.resample_latent(config, classes, seed);
        }
        let start = generator_digest(&episode.gen);
        let (images, trace) = run_episode_epochs(teacher, config, &mut episode, None)?;
        digests.push((start, generator_digest(&episode.gen)));
        out.push(SynthBatch {
            images,
            labels: episode.latent.labels.clone(),
            alpha: episode.alpha.as_matrix(),
            trace,
            episode_seed: seed,
        });
    }
    Ok((out, digests))
}

/// SHA-256 of the generator parameters (order-stable).
#[doc(hidden)]
pub fn generator_digest(gen: &GeneratorState) -> String {
    let mut d = crate::util::TensorDigest::new();
    for p in gen.params() {
        d.update(&p.value);
    }
    d.finish()
}

/// Parameter groups of one episode; test instrumentation.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Generator,
    Ftp,
    Alpha,
}

/// Loss and accumulated parameter gradients of a single un-stepped episode
/// epoch; test instrumentation for finite-difference checks.
#[doc(hidden)]
pub struct EpisodeGradSnapshot {
    pub loss: LossReport,
    pub gen: Vec<ndarray::ArrayD<f64>>,
    pub ftp: Vec<ndarray::ArrayD<f64>>,
    pub alpha: ndarray::ArrayD<f64>,
}

#[doc(hidden)]
pub fn episode_grad_snapshot(
    teacher: &ClassifierHandle,
    config: &InversionConfig,
    episode_seed: u64,
) -> Result<EpisodeGradSnapshot> {
    config.validate()?;
    let mut episode = Episode::fresh(teacher, config, episode_seed)?;
    let mut t_pyr = teacher.session();
    let mut t_loss = teacher.session();
    let tensors = compose_step(&mut episode, &mut t_pyr, &teacher.tap_names, config.use_ftp, None)?;
    let (report, d_image) = total_loss_with_input_grad(
        &mut t_loss,
        &tensors.image,
        &episode.latent.labels,
        &config.weights,
    )?;
    zero_episode_grads(&mut episode);
    backward_step(&mut episode, &mut t_pyr, &tensors, &d_image, config.use_ftp, config.use_acs);
    Ok(EpisodeGradSnapshot {
        loss: report,
        gen: episode.gen.params().iter().map(|p| p.grad.clone()).collect(),
        ftp: episode.ftp.params().iter().map(|p| p.grad.clone()).collect(),
        alpha: episode.alpha.alpha.grad.clone(),
    })
}

/// Episode loss with one parameter coordinate shifted by `delta`; the
/// finite-difference side of the episode gradient check.
#[doc(hidden)]
pub fn episode_loss_with_shift(
    teacher: &ClassifierHandle,
    config: &InversionConfig,
    episode_seed: u64,
    group: ParamGroup,
    param_idx: usize,
    flat_idx: usize,
    delta: f64,
) -> Result<f64> {
    config.validate()?;
    let mut episode = Episode::fresh(teacher, config, episode_seed)?;
    {
        let mut params = match group {
            ParamGroup::Generator => episode.gen.params_mut(),
            ParamGroup::Ftp => episode.ftp.params_mut(),
            ParamGroup::Alpha => vec![&mut episode.alpha.alpha],
        };
        let slice = params[param_idx]
            .value
            .as_slice_memory_order_mut()
            .expect("contiguous parameter");
        slice[flat_idx] += delta;
    }
    let mut t_pyr = teacher.session();
    let t_loss = teacher.session();
    let tensors = compose_step(&mut episode, &mut t_pyr, &teacher.tap_names, config.use_ftp, None)?;
    let report = {
        let mut session = t_loss;
        let (r, _) = total_loss_with_input_grad(
            &mut session,
            &tensors.image,
            &episode.latent.labels,
            &config.weights,
        )?;
        r
    };
    Ok(report.total)
}

/// Runs the configured mode over all batches.
pub fn run(teacher: &ClassifierHandle, config: &InversionConfig) -> Result<Vec<SynthBatch>> {
    match config.mode {
        SynthMode::Natural => run_inversion(teacher, config),
        SynthMode::OneToMany => invert_one_to_many(teacher, config),
        SynthMode::RawPixel => {
            config.validate()?;
            (0..config.num_batches)
                .map(|b| invert_raw_pixels(teacher, config, derive_seed(config.master_seed, b as u64)))
                .collect()
        }
    }
}
