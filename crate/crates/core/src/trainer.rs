//! Optimization loop: render, decode, score, backpropagate, step, densify.

use std::fmt;
use std::path::PathBuf;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adam::{AdamConfig, AdamState};
use crate::camera::Camera;
use crate::dataset::{random_seed_points, scene_extent, Dataset, View};
use crate::decoder::{decode_backward, decode_image, DecodedImage, Decoder, DecoderGradients, EmbeddingConfig, EmbeddingOverrides};
use crate::error::{Error, Result};
use crate::format::save_scene;
use crate::img::Image;
use crate::loss::{total_loss, LossConfig, LossValue, SemanticTarget, IGNORE_LABEL};
use crate::metrics::psnr;
use crate::raster::{blend_backward, blend_forward, SceneGradients};
use crate::scene::{init_scene, logit, SplatScene};

/// Seed points drawn when a dataset ships without a point cloud.
pub const RANDOM_INIT_POINTS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub feature_dim: usize,
    pub class_count: usize,
    pub embedding: EmbeddingConfig,
    pub loss: LossConfig,
    pub background: [f64; 3],
    pub lr_mlp: f64,
    pub lr_feature: f64,
    /// Initial position learning rate, multiplied by the scene extent.
    pub lr_position: f64,
    /// The position rate decays exponentially to `lr_position · lr_position_final_factor`.
    pub lr_position_final_factor: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub adam: AdamConfig,
    pub densify_interval: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    /// Threshold on the mean screen-space positional gradient, in NDC units.
    pub densify_grad_threshold: f64,
    /// Gaussians with max scale below `extent · clone_scale_fraction` are cloned, others split.
    pub clone_scale_fraction: f64,
    pub split_scale_divisor: f64,
    pub prune_opacity_threshold: f64,
    pub opacity_reset_interval: usize,
    /// Opacity after a reset.
    pub opacity_reset_value: f64,
    pub seed: u64,
    /// Held-out PSNR is measured every this many iterations and repeated in between.
    pub probe_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 30_000,
            feature_dim: 16,
            class_count: 0,
            embedding: EmbeddingConfig::default(),
            loss: LossConfig::default(),
            background: [0.0; 3],
            lr_mlp: 0.001,
            lr_feature: 0.0025,
            lr_position: 1.6e-4,
            lr_position_final_factor: 0.01,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            adam: AdamConfig::default(),
            densify_interval: 100,
            densify_from: 500,
            densify_until: 15_000,
            densify_grad_threshold: 2e-4,
            clone_scale_fraction: 0.01,
            split_scale_divisor: 1.6,
            prune_opacity_threshold: 0.005,
            opacity_reset_interval: 3000,
            opacity_reset_value: 0.01,
            seed: 0,
            probe_interval: 1,
            checkpoint_dir: None,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let rates = [
            ("lr_mlp", self.lr_mlp),
            ("lr_feature", self.lr_feature),
            ("lr_position", self.lr_position),
            ("lr_rotation", self.lr_rotation),
            ("lr_scale", self.lr_scale),
            ("lr_opacity", self.lr_opacity),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!("{name} must be a finite non-negative rate, got {v}")));
        }
        if !(self.adam.eps > 0.0) {
            return Err(Error::InvalidInput("adam eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::InvalidInput("adam betas must be in [0, 1)".into()));
        }
        if self.probe_interval == 0 {
            return Err(Error::InvalidInput("probe interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam state for every learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub position: AdamState,
    pub rotation: AdamState,
    pub log_scale: AdamState,
    pub opacity: AdamState,
    pub feature: AdamState,
    pub w1: AdamState,
    pub b1: AdamState,
    pub w2: AdamState,
    pub b2: AdamState,
}

impl OptimizerState {
    pub fn new(scene: &SplatScene, dec: &Decoder) -> Self {
        let n = scene.len();
        OptimizerState {
            position: AdamState::with_rows(n, 3),
            rotation: AdamState::with_rows(n, 4),
            log_scale: AdamState::with_rows(n, 3),
            opacity: AdamState::with_rows(n, 1),
            feature: AdamState::with_rows(n, scene.feature_dim),
            w1: AdamState::new(dec.w1.len()),
            b1: AdamState::new(dec.b1.len()),
            w2: AdamState::new(dec.w2.len()),
            b2: AdamState::new(dec.b2.len()),
        }
    }

    fn gaussian_states(&mut self) -> [&mut AdamState; 5] {
        [
            &mut self.position,
            &mut self.rotation,
            &mut self.log_scale,
            &mut self.opacity,
            &mut self.feature,
        ]
    }

    /// True when every per-Gaussian state has one row per Gaussian.
    pub fn matches(&self, scene: &SplatScene) -> bool {
        let n = scene.len();
        [&self.position, &self.rotation, &self.log_scale, &self.opacity, &self.feature]
            .iter()
            .all(|s| s.rows() == n)
    }
}

/// Everything one loss evaluation produces.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: LossValue,
    pub image: Image,
    pub scene_grads: SceneGradients,
    pub decoder_grads: DecoderGradients,
}

/// Renders `view`, scores it with the weighted objective and backpropagates to every
/// scene and decoder parameter. Does not modify anything.
pub fn evaluate_view(
    scene: &SplatScene,
    dec: &Decoder,
    view: &View,
    loss_cfg: &LossConfig,
    background: &[f64; 3],
) -> Result<Evaluation> {
    let cam = &view.camera;
    let render = blend_forward(scene, cam);
    let overrides = EmbeddingOverrides::default();
    let decoded = decode_image(&render, cam, dec, background, &overrides)?;
    let image = Image::new(cam.width, cam.height, 3, decoded.rgb)?;
    let semantic = match (&view.labels, dec.class_count) {
        (Some(labels), c) if c > 0 => Some(SemanticTarget {
            logits: &decoded.logits,
            labels,
            class_count: c,
            ignore_id: IGNORE_LABEL,
        }),
        _ => None,
    };
    let loss = total_loss(&image, &view.image, semantic, loss_cfg)?;
    check_finite("loss", std::slice::from_ref(&loss.total))?;
    check_finite("image gradient", &loss.d_image)?;
    let dg = decode_backward(
        &render,
        cam,
        dec,
        background,
        &overrides,
        &loss.d_image,
        loss.d_logits.as_deref(),
    )?;
    check_finite("feature map gradient", &dg.feature_map)?;
    check_finite("transmittance gradient", &dg.transmittance)?;
    let sg = blend_backward(scene, cam, &render, &dg.feature_map, Some(&dg.transmittance))?;
    Ok(Evaluation {
        loss,
        image,
        scene_grads: sg,
        decoder_grads: dg.decoder,
    })
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{name} (index {i}, value {})", values[i]))),
        None => Ok(()),
    }
}

fn check_scene_gradients(g: &SceneGradients) -> Result<()> {
    let flat = |v: &[Vector3<f64>]| v.iter().flat_map(|x| x.iter().copied()).collect::<Vec<f64>>();
    check_finite("position gradient", &flat(&g.position))?;
    check_finite("rotation gradient", &g.rotation.concat())?;
    check_finite("log_scale gradient", &flat(&g.log_scale))?;
    check_finite("opacity gradient", &g.opacity_logit)?;
    check_finite("feature gradient", &g.feature)
}

fn check_decoder_gradients(g: &DecoderGradients) -> Result<()> {
    check_finite("decoder W1 gradient", &g.w1)?;
    check_finite("decoder b1 gradient", &g.b1)?;
    check_finite("decoder W2 gradient", &g.w2)?;
    check_finite("decoder b2 gradient", &g.b2)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: f64,
    /// Held-out PSNR (training-view PSNR when there is no test view).
    pub psnr: f64,
    pub n_gaussians: usize,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}\t{:.4}\t{}", self.iteration, self.loss, self.psnr, self.n_gaussians)
    }
}

/// Result of a densify/prune pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Training state for one scene.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub scene: SplatScene,
    pub decoder: Decoder,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub extent: f64,
    pub iteration: usize,
    /// Summed NDC positional gradient norms and visibility counts since the last densify.
    pub grad_accum: Vec<f64>,
    pub grad_count: Vec<u32>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(scene: SplatScene, decoder: Decoder, config: TrainConfig, extent: f64) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        decoder.validate()?;
        if decoder.feature_dim != scene.feature_dim || decoder.class_count != scene.class_count {
            return Err(Error::Contract("decoder does not match scene dimensions".into()));
        }
        let n = scene.len();
        let optimizer = OptimizerState::new(&scene, &decoder);
        // Separate stream from initialization so densification randomness is independent.
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d3e5_1f1e_0000);
        Ok(Trainer {
            scene,
            decoder,
            optimizer,
            config,
            extent,
            iteration: 0,
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
            rng,
        })
    }

    /// Initializes Gaussians from the dataset's seed points (or random points around the
    /// cameras) and a random decoder, both from `config.seed`.
    pub fn from_dataset(dataset: &Dataset, config: TrainConfig) -> Result<Self> {
        if dataset.train_views().next().is_none() {
            return Err(Error::InvalidInput("dataset has no training views".into()));
        }
        // An unlabelled dataset may still carry an (untrained) semantic head.
        if config.class_count > 0 && dataset.class_count > 0 && config.class_count != dataset.class_count {
            return Err(Error::InvalidInput(format!(
                "requested {} classes but the dataset has {}",
                config.class_count, dataset.class_count
            )));
        }
        let cameras = dataset.cameras();
        let extent = scene_extent(&cameras);
        let points = if dataset.seed_points.is_empty() {
            random_seed_points(&cameras, RANDOM_INIT_POINTS, config.seed)
        } else {
            dataset.seed_points.clone()
        };
        let scene = init_scene(&points, config.feature_dim, config.class_count, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let decoder = Decoder::random(config.feature_dim, config.embedding, config.class_count, &mut rng);
        Trainer::new(scene, decoder, config, extent)
    }

    /// Position learning rate at the current iteration.
    pub fn position_lr(&self) -> f64 {
        let t = if self.config.iterations > 0 {
            (self.iteration as f64 / self.config.iterations as f64).min(1.0)
        } else {
            0.0
        };
        self.config.lr_position * self.extent * self.config.lr_position_final_factor.powf(t)
    }

    /// One optimization step on `view`. Returns the loss before the update.
    pub fn step(&mut self, view: &View) -> Result<LossValue> {
        let eval = evaluate_view(&self.scene, &self.decoder, view, &self.config.loss, &self.config.background)?;
        check_scene_gradients(&eval.scene_grads)?;
        check_decoder_gradients(&eval.decoder_grads)?;
        self.iteration += 1;
        self.accumulate_densify_stats(&eval.scene_grads, &view.camera);
        self.apply_gradients(&eval.scene_grads, &eval.decoder_grads)?;

        let it = self.iteration;
        let cfg = self.config.clone();
        if it >= cfg.densify_from && it <= cfg.densify_until {
            if cfg.densify_interval > 0 && it % cfg.densify_interval == 0 {
                self.densify_and_prune();
            }
            if cfg.opacity_reset_interval > 0 && it % cfg.opacity_reset_interval == 0 {
                self.reset_opacity();
            }
        }
        Ok(eval.loss)
    }

    fn accumulate_densify_stats(&mut self, g: &SceneGradients, cam: &Camera) {
        let (sx, sy) = (cam.width as f64 / 2.0, cam.height as f64 / 2.0);
        for i in 0..self.scene.len() {
            if g.visible[i] {
                let d = g.mean2d[i];
                self.grad_accum[i] += (d.x * sx).hypot(d.y * sy);
                self.grad_count[i] += 1;
            }
        }
    }

    fn apply_gradients(&mut self, g: &SceneGradients, dg: &DecoderGradients) -> Result<()> {
        let cfg = self.config.clone();
        let lr_pos = self.position_lr();
        let a = &cfg.adam;
        let d = self.scene.feature_dim;
        let opt = &mut self.optimizer;
        let bias = [
            opt.position.begin_step(a),
            opt.rotation.begin_step(a),
            opt.log_scale.begin_step(a),
            opt.opacity.begin_step(a),
            opt.feature.begin_step(a),
        ];
        for (i, gs) in self.scene.gaussians.iter_mut().enumerate() {
            // Culled Gaussians are left alone, moments included.
            if !g.visible[i] {
                continue;
            }
            opt.position
                .update_slice(i * 3, gs.position.as_mut_slice(), g.position[i].as_slice(), lr_pos, bias[0], a);
            opt.rotation
                .update_slice(i * 4, &mut gs.rotation, &g.rotation[i], cfg.lr_rotation, bias[1], a);
            opt.log_scale
                .update_slice(i * 3, gs.log_scale.as_mut_slice(), g.log_scale[i].as_slice(), cfg.lr_scale, bias[2], a);
            opt.opacity.update_slice(
                i,
                std::slice::from_mut(&mut gs.opacity_logit),
                &g.opacity_logit[i..i + 1],
                cfg.lr_opacity,
                bias[3],
                a,
            );
            opt.feature
                .update_slice(i * d, &mut gs.feature, &g.feature[i * d..(i + 1) * d], cfg.lr_feature, bias[4], a);
        }
        let dec = &mut self.decoder;
        for (params, grads, state) in [
            (&mut dec.w1, &dg.w1, &mut opt.w1),
            (&mut dec.b1, &dg.b1, &mut opt.b1),
            (&mut dec.w2, &dg.w2, &mut opt.w2),
            (&mut dec.b2, &dg.b2, &mut opt.b2),
        ] {
            crate::adam::adam_step(params, grads, state, cfg.lr_mlp, a)?;
        }
        Ok(())
    }

    /// Clones or splits Gaussians with large mean screen-space gradients and removes
    /// nearly transparent ones. Optimizer rows follow the Gaussians; new rows start at zero.
    pub fn densify_and_prune(&mut self) -> DensifyReport {
        let cfg = &self.config;
        let n = self.scene.len();
        let clone_limit = cfg.clone_scale_fraction * self.extent;
        let mut report = DensifyReport::default();
        let mut new_gaussians = Vec::new();
        let mut keep = vec![true; n];
        for i in 0..n {
            if self.grad_count[i] == 0 {
                continue;
            }
            let mean_grad = self.grad_accum[i] / self.grad_count[i] as f64;
            if !(mean_grad > cfg.densify_grad_threshold) {
                continue;
            }
            let g = &self.scene.gaussians[i];
            if g.scale().max() <= clone_limit {
                new_gaussians.push(g.clone());
                report.cloned += 1;
            } else {
                let cov_factor = g.covariance_factor();
                for _ in 0..2 {
                    let z = Vector3::from_fn(|_, _| StandardNormal.sample(&mut self.rng));
                    let mut child = g.clone();
                    child.position = g.position + cov_factor * z;
                    child.log_scale = g.log_scale.map(|s| s - cfg.split_scale_divisor.ln());
                    new_gaussians.push(child);
                }
                keep[i] = false;
                report.split += 1;
            }
        }
        let added = new_gaussians.len();
        self.scene.gaussians.extend(new_gaussians);
        keep.extend(std::iter::repeat_n(true, added));
        for s in self.optimizer.gaussian_states() {
            s.push_rows(added);
        }

        for (k, g) in keep.iter_mut().zip(&self.scene.gaussians) {
            if *k && g.opacity() < cfg.prune_opacity_threshold {
                *k = false;
            }
        }
        if keep.iter().all(|k| !k) {
            let best = (0..self.scene.len())
                .max_by(|&a, &b| {
                    self.scene.gaussians[a]
                        .opacity_logit
                        .total_cmp(&self.scene.gaussians[b].opacity_logit)
                })
                .unwrap_or(0);
            log::warn!("pruning would remove every Gaussian; keeping #{best}");
            keep[best] = true;
        }
        report.pruned = keep.iter().filter(|k| !**k).count().saturating_sub(report.split);
        self.retain(&keep);
        self.grad_accum = vec![0.0; self.scene.len()];
        self.grad_count = vec![0; self.scene.len()];
        report
    }

    fn retain(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.scene.gaussians.retain(|_| *it.next().unwrap());
        for s in self.optimizer.gaussian_states() {
            s.retain_rows(keep);
        }
    }

    /// Caps every opacity at `opacity_reset_value` and clears the opacity moments.
    pub fn reset_opacity(&mut self) {
        let cap = logit(self.config.opacity_reset_value);
        for g in &mut self.scene.gaussians {
            g.opacity_logit = g.opacity_logit.min(cap);
        }
        self.optimizer.opacity.reset();
    }

    /// The scene and decoder as they would be written to disk.
    pub fn snapshot(&self) -> (SplatScene, Decoder) {
        let mut scene = self.scene.clone();
        let mut dec = self.decoder.clone();
        scene.round_to_f32();
        dec.round_to_f32();
        (scene, dec)
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        save_scene(&self.scene, &self.decoder, path)
    }
}

/// Renders and decodes `view` without gradients.
pub fn render_view(scene: &SplatScene, dec: &Decoder, cam: &Camera, background: &[f64; 3]) -> Result<Image> {
    let decoded = render_decoded(scene, dec, cam, background, &EmbeddingOverrides::default())?;
    Image::new(cam.width, cam.height, 3, decoded.rgb)
}

/// Like [`render_view`] but with embedding overrides and the semantic head output.
pub fn render_decoded(
    scene: &SplatScene,
    dec: &Decoder,
    cam: &Camera,
    background: &[f64; 3],
    overrides: &EmbeddingOverrides,
) -> Result<DecodedImage> {
    overrides.check(&dec.config)?;
    let render = blend_forward(scene, cam);
    decode_image(&render, cam, dec, background, overrides)
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub scene: SplatScene,
    pub decoder: Decoder,
    pub log: Vec<LogEntry>,
}

/// Full training run: shuffled epochs over the training views, one log entry per
/// iteration, checkpoints every `checkpoint_interval` iterations when a directory is set.
pub fn train(dataset: &Dataset, config: &TrainConfig, mut on_log: impl FnMut(&LogEntry)) -> Result<TrainOutcome> {
    let mut trainer = Trainer::from_dataset(dataset, config.clone())?;
    let train_views: Vec<&View> = dataset.train_views().collect();
    let probe = dataset.test_views().next().unwrap_or(train_views[0]);
    let mut order: Vec<usize> = Vec::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut log = Vec::with_capacity(config.iterations);
    let mut last_psnr = f64::NAN;
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for it in 1..=config.iterations {
        if order.is_empty() {
            order = (0..train_views.len()).collect();
            order.shuffle(&mut shuffle_rng);
            order.reverse();
        }
        let view = train_views[order.pop().unwrap()];
        let loss = trainer.step(view)?;
        if it % config.probe_interval == 0 || it == config.iterations || it == 1 {
            let img = render_view(&trainer.scene, &trainer.decoder, &probe.camera, &config.background)?;
            last_psnr = psnr(&img, &probe.image)?;
        }
        let entry = LogEntry {
            iteration: it,
            loss: loss.total,
            psnr: last_psnr,
            n_gaussians: trainer.scene.len(),
        };
        on_log(&entry);
        log.push(entry);
        if let Some(dir) = &config.checkpoint_dir {
            if config.checkpoint_interval > 0 && it % config.checkpoint_interval == 0 {
                trainer.save_checkpoint(&dir.join(format!("iter_{it:06}.fspl")))?;
            }
        }
    }
    Ok(TrainOutcome {
        scene: trainer.scene,
        decoder: trainer.decoder,
        log,
    })
}
