//! Rate-distortion training on random crops of frame sequences.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, SparseTensor, Tape, Var};
use crate::context::{context_graph, temporal_align};
use crate::error::{Error, Result};
use crate::network::{
    encode_with_pyramid, normalize_colors, quantize_infer, training_noise, Architecture,
    CodecModel, LatentTensor, Pyramid,
};
use crate::pointcloud::{FrameSequence, VoxelizedFrame};

/// Distortion is measured on `[0, 1]` colors and multiplied by this so that
/// lambda behaves as if MSE were in 8-bit units.
pub const DISTORTION_SCALE: f64 = 255.0 * 255.0;

const CROP_ALIGN: i32 = 8;
const CROP_RETRIES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch.
    pub batches_per_epoch: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Crop edge in voxels.
    pub crop_size: i32,
    /// Group-of-frames length; frame `t` has no temporal context when
    /// `t % gop == 0`.
    pub gop: usize,
    /// Fixed validation crops drawn once per run.
    pub val_samples: usize,
    pub seed: u64,
    pub arch: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lr: 1e-3,
            lr_decay: 0.95,
            decay_every: 3,
            batch_size: 4,
            batches_per_epoch: 16,
            patience: 20,
            max_epochs: 500,
            crop_size: 64,
            gop: 8,
            val_samples: 8,
            seed: 0,
            arch: Architecture::default(),
        }
    }
}

impl TrainConfig {
    /// Parses flat `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| {
                Error::Parse(format!("line {}: bad value for {key}: {e}", n + 1))
            };
            macro_rules! set {
                ($field:expr) => {
                    $field = value.parse().map_err(|e| bad(&e))?
                };
            }
            match key {
                "lambda" => set!(c.lambda),
                "lr" => set!(c.lr),
                "lr_decay" => set!(c.lr_decay),
                "decay_every" => set!(c.decay_every),
                "batch_size" => set!(c.batch_size),
                "batches_per_epoch" => set!(c.batches_per_epoch),
                "patience" => set!(c.patience),
                "max_epochs" => set!(c.max_epochs),
                "crop_size" => set!(c.crop_size),
                "gop" => set!(c.gop),
                "val_samples" => set!(c.val_samples),
                "seed" => set!(c.seed),
                "narrow" => set!(c.arch.narrow),
                "wide" => set!(c.arch.wide),
                "latent" => set!(c.arch.latent),
                "res_blocks" => set!(c.arch.res_blocks),
                "context_kernel" => set!(c.arch.context_kernel),
                _ => return Err(Error::Parse(format!("line {}: unknown key '{key}'", n + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvariantViolation(m.to_string()));
        if self.lambda.is_nan() || self.lambda <= 0.0 || !self.lambda.is_finite() {
            return fail("lambda must be positive");
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !self.lr.is_finite() {
            return fail("lr must be positive");
        }
        if self.lr_decay.is_nan() || self.lr_decay <= 0.0 || self.decay_every == 0 {
            return fail("lr decay must be positive with a nonzero period");
        }
        if self.patience == 0 {
            return fail("patience must be at least 1");
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return fail("batch size and batches per epoch must be at least 1");
        }
        if self.crop_size < CROP_ALIGN || self.crop_size % CROP_ALIGN != 0 {
            return fail("crop size must be a positive multiple of 8");
        }
        if self.gop == 0 {
            return fail("group length must be at least 1");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// `rate_bits / n + lambda * DISTORTION_SCALE * mse`.
pub fn rd_objective(rate_bits: f64, elements: usize, mse: f64, lambda: f64) -> f64 {
    rate_bits / elements.max(1) as f64 + lambda * DISTORTION_SCALE * mse
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdTerms {
    pub loss: f64,
    pub rate_bits: f64,
    pub mse: f64,
    /// Latent element count `N`.
    pub elements: usize,
}

impl RdTerms {
    pub fn bits_per_element(&self) -> f64 {
        self.rate_bits / self.elements.max(1) as f64
    }
}

/// One crop with its detached temporal context and frozen noise.
#[derive(Clone, Debug)]
pub struct RdProblem {
    pyr: Pyramid,
    input: Vec<f64>,
    temporal: SparseTensor,
    noise: Vec<f64>,
}

impl RdProblem {
    /// `temporal` is the previous frame's quantized latent, if any.
    pub fn new<R: Rng + ?Sized>(
        model: &CodecModel,
        frame: &VoxelizedFrame,
        temporal: Option<&LatentTensor>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::without_noise(model, frame, temporal)?;
        p.noise = training_noise(p.noise.len(), rng);
        Ok(p)
    }

    /// Same problem with zero noise (the latent is left unrounded).
    pub fn without_noise(
        model: &CodecModel,
        frame: &VoxelizedFrame,
        temporal: Option<&LatentTensor>,
    ) -> Result<Self> {
        if frame.is_empty() {
            return Err(Error::EmptyLatent);
        }
        let frame = frame.canonicalized();
        let pyr = Pyramid::from_geometry(frame.coords(), model.architecture().context_kernel)?;
        let l = model.latent_channels();
        let temporal = temporal_align(temporal, pyr.latent_coords(), l)?;
        let n = pyr.latent_coords().len() * l;
        Ok(Self {
            input: normalize_colors(frame.colors()),
            pyr,
            temporal,
            noise: vec![0.0; n],
        })
    }

    pub fn elements(&self) -> usize {
        self.noise.len()
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    fn graph(&self, model: &CodecModel, tape: &mut Tape, lambda: f64) -> Result<(Var, Var, Var)> {
        let l = model.latent_channels();
        let rows = self.pyr.points().len();
        let x = tape.leaf(rows, 3, self.input.clone())?;
        let y = model.encoder_graph(tape, &self.pyr, x)?;
        let y = tape.add_const(y, &self.noise)?;
        let t = tape.leaf(self.temporal.len(), l, self.temporal.features().to_vec())?;
        let (mu, sigma) = context_graph(model, tape, self.pyr.latent_maps(), y, t)?;
        let rate = tape.gaussian_bits(y, mu, sigma)?;
        let out = model.decoder_graph(tape, &self.pyr, y)?;
        let mse = tape.mse(out, &self.input)?;
        let r = tape.scale(rate, 1.0 / self.elements().max(1) as f64);
        let d = tape.scale(mse, lambda * DISTORTION_SCALE);
        let loss = tape.add(r, d)?;
        Ok((loss, rate, mse))
    }

    fn terms(&self, tape: &Tape, vars: (Var, Var, Var)) -> Result<RdTerms> {
        let t = RdTerms {
            loss: tape.scalar(vars.0),
            rate_bits: tape.scalar(vars.1),
            mse: tape.scalar(vars.2),
            elements: self.elements(),
        };
        if !t.loss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss (rate {} bits, mse {}, {} elements)",
                t.rate_bits, t.mse, t.elements
            )));
        }
        Ok(t)
    }

    pub fn evaluate(&self, model: &CodecModel, lambda: f64) -> Result<RdTerms> {
        let mut tape = Tape::new();
        let vars = self.graph(model, &mut tape, lambda)?;
        self.terms(&tape, vars)
    }

    /// ReLU activation pattern of the forward pass at the current parameters.
    pub fn relu_pattern(&self, model: &CodecModel, lambda: f64) -> Result<Vec<bool>> {
        let mut tape = Tape::new();
        self.graph(model, &mut tape, lambda)?;
        Ok(tape.relu_pattern())
    }

    /// Loss with every ReLU held to `pattern`; the result is smooth in the
    /// parameters, which makes it usable for finite differences near a kink.
    pub fn evaluate_with_relu_pattern(
        &self,
        model: &CodecModel,
        lambda: f64,
        pattern: &[bool],
    ) -> Result<RdTerms> {
        let mut tape = Tape::with_relu_pattern(pattern.to_vec());
        let vars = self.graph(model, &mut tape, lambda)?;
        self.terms(&tape, vars)
    }

    /// Forward and backward pass; parameter gradients are accumulated into
    /// `model` scaled by `weight`.
    pub fn accumulate_gradient(
        &self,
        model: &mut CodecModel,
        lambda: f64,
        weight: f64,
    ) -> Result<RdTerms> {
        let mut tape = Tape::new();
        let vars = self.graph(model, &mut tape, lambda)?;
        let terms = self.terms(&tape, vars)?;
        tape.backward_with_seed(vars.0, &[weight], model.params_mut())?;
        Ok(terms)
    }
}

/// Loss of one crop with fresh noise.
pub fn compute_rd_loss<R: Rng + ?Sized>(
    frame: &VoxelizedFrame,
    temporal: Option<&LatentTensor>,
    model: &CodecModel,
    lambda: f64,
    rng: &mut R,
) -> Result<RdTerms> {
    RdProblem::new(model, frame, temporal, rng)?.evaluate(model, lambda)
}

/// Training-path rate of a given latent, `sum -log2` of the unit-bin mass
/// under unsnapped parameters.
pub fn latent_rate_bits(
    model: &CodecModel,
    latent: &LatentTensor,
    temporal: &SparseTensor,
) -> Result<f64> {
    let l = model.latent_channels();
    let maps = crate::context::LatentMaps::new(
        &latent.coords,
        crate::network::LATENT_STRIDE,
        model.architecture().context_kernel,
    );
    let mut tape = Tape::new();
    let y = tape.leaf(latent.rows(), l, latent.values.clone())?;
    let t = tape.leaf(temporal.len(), l, temporal.features().to_vec())?;
    let (mu, sigma) = context_graph(model, &mut tape, &maps, y, t)?;
    let rate = tape.gaussian_bits(y, mu, sigma)?;
    Ok(tape.scalar(rate))
}

/// Quantized latent of `frame` under the current model, for use as detached
/// temporal context.
pub fn previous_latent(model: &CodecModel, frame: &VoxelizedFrame) -> Result<Option<LatentTensor>> {
    if frame.is_empty() {
        return Ok(None);
    }
    let frame = frame.canonicalized();
    let pyr = Pyramid::from_geometry(frame.coords(), model.architecture().context_kernel)?;
    Ok(Some(quantize_infer(&encode_with_pyramid(&frame, &pyr, model)?)))
}

/// Co-located crops of frame `t` and, unless `t` starts a group, frame `t - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub t: usize,
    pub origin: [i32; 3],
    pub current: VoxelizedFrame,
    /// `None` for group-initial frames or when the window is empty at `t - 1`.
    pub previous: Option<VoxelizedFrame>,
}

/// Points of `frame` inside `[origin, origin + size)^3`, rebased to the origin.
pub fn crop(frame: &VoxelizedFrame, origin: [i32; 3], size: i32) -> Result<VoxelizedFrame> {
    let mut coords = Vec::new();
    let mut colors = Vec::new();
    for (c, rgb) in frame.coords().iter().zip(frame.colors()) {
        if (0..3).all(|k| c[k] >= origin[k] && c[k] < origin[k] + size) {
            coords.push([c[0] - origin[0], c[1] - origin[1], c[2] - origin[2]]);
            colors.push(*rgb);
        }
    }
    Ok(VoxelizedFrame::new(coords, colors, frame.depth())?.canonicalized())
}

/// Draws a sample from frames `frames` (indices into the sequence).
pub fn sample_crops<R: Rng + ?Sized>(
    seq: &FrameSequence,
    frames: std::ops::Range<usize>,
    crop_size: i32,
    gop: usize,
    rng: &mut R,
) -> Result<TrainSample> {
    if seq.is_empty() || frames.is_empty() || frames.end > seq.len() {
        return Err(Error::Data("no frames to sample from".into()));
    }
    for _ in 0..CROP_RETRIES {
        let t = rng.gen_range(frames.clone());
        let frame = &seq.frames()[t];
        if frame.is_empty() {
            continue;
        }
        let origin = crop_origin(frame, crop_size, rng);
        let current = crop(frame, origin, crop_size)?;
        if current.is_empty() {
            continue;
        }
        let previous = if t % gop == 0 {
            None
        } else {
            Some(crop(&seq.frames()[t - 1], origin, crop_size)?).filter(|f| !f.is_empty())
        };
        return Ok(TrainSample {
            t,
            origin,
            current,
            previous,
        });
    }
    Err(Error::Data(format!(
        "no nonempty crop found in {CROP_RETRIES} attempts"
    )))
}

/// Random crop origin on multiples of 8 within the frame's bounding box, or
/// the grid origin when the crop covers the whole grid.
fn crop_origin<R: Rng + ?Sized>(frame: &VoxelizedFrame, size: i32, rng: &mut R) -> [i32; 3] {
    if i64::from(size) >= 1i64 << frame.depth() {
        return [0; 3];
    }
    let mut origin = [0; 3];
    for (k, o) in origin.iter_mut().enumerate() {
        let lo = frame.coords().iter().map(|c| c[k]).min().unwrap_or(0);
        let hi = frame.coords().iter().map(|c| c[k]).max().unwrap_or(0);
        // windows [o, o + size) that overlap [lo, hi]
        let first = ((lo - size + 1).max(0) + CROP_ALIGN - 1) / CROP_ALIGN;
        let last = hi / CROP_ALIGN;
        *o = rng.gen_range(first..=last.max(first)) * CROP_ALIGN;
    }
    origin
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub rate_bits_per_elem: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub lambda: f64,
    pub rows: Vec<LogRow>,
    /// Epoch whose model was kept.
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,lr,train_loss,val_loss,rate_bits_per_elem,mse";

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# lambda={} distortion_scale={DISTORTION_SCALE}\n{}\n",
            self.lambda,
            Self::HEADER
        );
        for r in &self.rows {
            writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e}",
                r.epoch, r.lr, r.train_loss, r.val_loss, r.rate_bits_per_elem, r.mse
            )
            .expect("writing to a string");
        }
        s
    }
}

/// Splits each sequence into training frames and the final tenth held out
/// for validation (a single-frame sequence serves both roles).
fn split(seq: &FrameSequence) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let n = seq.len();
    if n < 2 {
        return (0..n, 0..n);
    }
    let val = (n / 10).max(1);
    (0..n - val, n - val..n)
}

struct ValSet {
    problems: Vec<(VoxelizedFrame, Option<VoxelizedFrame>, u64)>,
}

impl ValSet {
    fn draw(seqs: &[FrameSequence], config: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_7a11);
        let mut problems = Vec::new();
        let usable: Vec<usize> = (0..seqs.len()).filter(|&i| !seqs[i].is_empty()).collect();
        for k in 0..config.val_samples.max(1) {
            let si = usable[k % usable.len()];
            let (_, val) = split(&seqs[si]);
            let s = sample_crops(&seqs[si], val, config.crop_size, config.gop, &mut rng)?;
            problems.push((s.current, s.previous, rng.gen()));
        }
        Ok(Self { problems })
    }

    fn loss(&self, model: &CodecModel, lambda: f64) -> Result<RdTerms> {
        let mut acc = RdTerms {
            loss: 0.0,
            rate_bits: 0.0,
            mse: 0.0,
            elements: 0,
        };
        let n = self.problems.len() as f64;
        for (cur, prev, seed) in &self.problems {
            let temporal = match prev {
                Some(p) => previous_latent(model, p)?,
                None => None,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let t = compute_rd_loss(cur, temporal.as_ref(), model, lambda, &mut rng)?;
            acc.loss += t.loss / n;
            acc.mse += t.mse / n;
            acc.rate_bits += t.rate_bits;
            acc.elements += t.elements;
        }
        Ok(acc)
    }
}

/// Progress callback: called after every epoch with the row just logged.
pub type EpochHook<'a> = dyn FnMut(&LogRow) + 'a;

/// Trains a fresh model. Returns the model with the best validation loss.
pub fn fit(seqs: &[FrameSequence], config: &TrainConfig) -> Result<(CodecModel, TrainLog)> {
    fit_with_hook(seqs, config, &mut |_| {})
}

pub fn fit_with_hook(
    seqs: &[FrameSequence],
    config: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<(CodecModel, TrainLog)> {
    config.validate()?;
    if seqs.iter().all(|s| s.is_empty()) {
        return Err(Error::Data("no training frames".into()));
    }
    let mut model = CodecModel::new(config.arch, config.lambda, config.seed)?;
    let mut log = TrainLog {
        lambda: config.lambda,
        ..TrainLog::default()
    };
    if config.max_epochs == 0 {
        return Ok((model, log));
    }
    let val = ValSet::draw(seqs, config)?;
    let usable: Vec<usize> = (0..seqs.len()).filter(|&i| !seqs[i].is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam::new(model.params());
    let mut step = 0u64;
    let mut best: Option<(f64, CodecModel)> = None;
    let mut since_best = 0;

    for epoch in 0..config.max_epochs {
        let lr = config.lr_at(epoch);
        let mut train_loss = 0.0;
        for _ in 0..config.batches_per_epoch {
            model.params_mut().zero_grad();
            let weight = 1.0 / config.batch_size as f64;
            for _ in 0..config.batch_size {
                let si = usable[rng.gen_range(0..usable.len())];
                let (train, _) = split(&seqs[si]);
                let s = sample_crops(&seqs[si], train, config.crop_size, config.gop, &mut rng)?;
                let temporal = match &s.previous {
                    Some(p) => previous_latent(&model, p)?,
                    None => None,
                };
                let problem = RdProblem::new(&model, &s.current, temporal.as_ref(), &mut rng)?;
                let t = problem.accumulate_gradient(&mut model, config.lambda, weight)?;
                train_loss += t.loss * weight;
            }
            step += 1;
            adam.step(model.params_mut(), lr, step);
        }
        train_loss /= config.batches_per_epoch as f64;
        let v = val.loss(&model, config.lambda)?;
        let row = LogRow {
            epoch,
            lr,
            train_loss,
            val_loss: v.loss,
            rate_bits_per_elem: v.bits_per_element(),
            mse: v.mse,
        };
        log.rows.push(row);
        hook(&row);
        if best.as_ref().is_none_or(|(b, _)| v.loss < *b) {
            best = Some((v.loss, model.clone()));
            log.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (_, model) = best.expect("at least one epoch ran");
    Ok((model, log))
}
