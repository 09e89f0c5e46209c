//! Analysis and synthesis transforms, quantizers, and the model file.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{
    downsample_coords, read_u32, KernelMap, Mask, ParamId, ParamStore, ResBlockParams, Tape, Var,
};
use crate::context::LatentMaps;
use crate::error::{Error, Result};
use crate::pointcloud::{Coord, Rgb, VoxelizedFrame};

/// Largest magnitude a coded latent symbol may take.
pub const ALPHABET_BOUND: i32 = 255;
pub const MODEL_MAGIC: &[u8; 4] = b"PCAC";
pub const MODEL_VERSION: u32 = 1;
/// Stride of the latent grid relative to the voxel grid.
pub const LATENT_STRIDE: i32 = 8;

/// Channel widths and depth of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    /// Width after the first downsampling layer (and before the last one on
    /// the decoder side).
    pub narrow: usize,
    /// Width at stride 4, inside the residual blocks.
    pub wide: usize,
    /// Latent channel count.
    pub latent: usize,
    pub res_blocks: usize,
    /// Kernel size of the masked autoregressive convolution.
    pub context_kernel: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            narrow: 32,
            wide: 64,
            latent: 64,
            res_blocks: 3,
            context_kernel: 5,
        }
    }
}

impl Architecture {
    /// Parameter names and shapes in file order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let k3 = 27;
        let kc = self.context_kernel.pow(3);
        let (n, w, l) = (self.narrow, self.wide, self.latent);
        let mut out = Vec::new();
        let mut conv = |name: String, vol: usize, cin: usize, cout: usize| {
            out.push((format!("{name}.weight"), vec![vol, cin, cout]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        conv("encoder.conv1".into(), k3, 3, n);
        conv("encoder.conv2".into(), k3, n, w);
        for i in 0..self.res_blocks {
            conv(format!("encoder.res{i}.conv1"), k3, w, w);
            conv(format!("encoder.res{i}.conv2"), k3, w, w);
        }
        conv("encoder.conv3".into(), k3, w, l);
        conv("decoder.up1".into(), k3, l, w);
        for i in 0..self.res_blocks {
            conv(format!("decoder.res{i}.conv1"), k3, w, w);
            conv(format!("decoder.res{i}.conv2"), k3, w, w);
        }
        conv("decoder.up2".into(), k3, w, n);
        conv("decoder.up3".into(), k3, n, n);
        conv("decoder.out".into(), k3, n, 3);
        conv("context.ar".into(), kc, l, l);
        conv("context.temporal".into(), k3, l, l);
        conv("context.mix".into(), 1, 2 * l, 2 * l);
        conv("context.out".into(), 1, 2 * l, 2 * l);
        out
    }

    fn validate(&self) -> Result<()> {
        if self.narrow == 0 || self.wide == 0 || self.latent == 0 {
            return Err(Error::InvariantViolation("zero channel width".into()));
        }
        if self.context_kernel.is_multiple_of(2) {
            return Err(Error::InvariantViolation(format!(
                "context kernel {} must be odd",
                self.context_kernel
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct ModelIds {
    pub enc1: ConvIds,
    pub enc2: ConvIds,
    pub enc_res: Vec<(ConvIds, ConvIds)>,
    pub enc3: ConvIds,
    pub up1: ConvIds,
    pub dec_res: Vec<(ConvIds, ConvIds)>,
    pub up2: ConvIds,
    pub up3: ConvIds,
    pub out: ConvIds,
    pub ctx_ar: ConvIds,
    pub ctx_temporal: ConvIds,
    pub ctx_mix: ConvIds,
    pub ctx_out: ConvIds,
}

impl ModelIds {
    fn from_layout_order(res_blocks: usize) -> Self {
        let mut next = 0usize;
        let mut take = || {
            let ids = ConvIds {
                w: ParamId(next),
                b: ParamId(next + 1),
            };
            next += 2;
            ids
        };
        let enc1 = take();
        let enc2 = take();
        let enc_res = (0..res_blocks).map(|_| (take(), take())).collect();
        let enc3 = take();
        let up1 = take();
        let dec_res = (0..res_blocks).map(|_| (take(), take())).collect();
        let up2 = take();
        let up3 = take();
        let out = take();
        let ctx_ar = take();
        let ctx_temporal = take();
        let ctx_mix = take();
        let ctx_out = take();
        Self {
            enc1,
            enc2,
            enc_res,
            enc3,
            up1,
            dec_res,
            up2,
            up3,
            out,
            ctx_ar,
            ctx_temporal,
            ctx_mix,
            ctx_out,
        }
    }
}

/// Encoder, decoder and context-model parameters plus the training lambda.
#[derive(Clone, Debug)]
pub struct CodecModel {
    arch: Architecture,
    lambda: f64,
    params: ParamStore,
    ids: ModelIds,
}

impl CodecModel {
    /// Fresh model: Glorot-uniform weights, zero biases.
    pub fn new(arch: Architecture, lambda: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in arch.layout() {
            if shape.len() == 3 {
                let (vol, cin, cout) = (shape[0], shape[1], shape[2]);
                params.push_glorot(&name, shape, vol * cin, vol * cout, &mut rng);
            } else {
                params.push_zeros(&name, shape);
            }
        }
        Self::from_params(arch, lambda, params)
    }

    /// Wraps an existing parameter set after checking it against `arch`.
    pub fn from_params(arch: Architecture, lambda: f64, params: ParamStore) -> Result<Self> {
        arch.validate()?;
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::InvariantViolation(format!("invalid lambda {lambda}")));
        }
        let layout = arch.layout();
        if layout.len() != params.len() {
            return Err(Error::Parse(format!(
                "model has {} parameter tensors, architecture needs {}",
                params.len(),
                layout.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(params.iter()) {
            if p.name() != name || p.shape() != shape.as_slice() {
                return Err(Error::Parse(format!(
                    "parameter '{}' {:?} does not match expected '{}' {:?}",
                    p.name(),
                    p.shape(),
                    name,
                    shape
                )));
            }
        }
        Ok(Self {
            arch,
            lambda,
            ids: ModelIds::from_layout_order(arch.res_blocks),
            params,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.lambda = lambda;
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn ids(&self) -> &ModelIds {
        &self.ids
    }

    pub fn latent_channels(&self) -> usize {
        self.arch.latent
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&self.lambda.to_le_bytes())?;
        for v in [
            self.arch.narrow,
            self.arch.wide,
            self.arch.latent,
            self.arch.res_blocks,
            self.arch.context_kernel,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        self.params.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Parse("model file too short".into()))?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Parse("not a model file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != MODEL_VERSION {
            return Err(Error::Parse(format!("unsupported model version {version}")));
        }
        let mut b = [0u8; 8];
        r.read_exact(&mut b)
            .map_err(|_| Error::Parse("truncated model header".into()))?;
        let lambda = f64::from_le_bytes(b);
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = read_u32(r)? as usize;
        }
        let arch = Architecture {
            narrow: dims[0],
            wide: dims[1],
            latent: dims[2],
            res_blocks: dims[3],
            context_kernel: dims[4],
        };
        let params = ParamStore::read_from(r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Parse("trailing bytes after model".into()));
        }
        Self::from_params(arch, lambda, params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to memory");
        v
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized model; bitstreams name their model by it.
    pub fn model_id(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    /// Analysis transform on a tape. `input` holds normalized colors on
    /// `pyr.level(0)`; the result lives on `pyr.level(3)`.
    pub fn encoder_graph(&self, tape: &mut Tape, pyr: &Pyramid, input: Var) -> Result<Var> {
        let (p, ids) = (&self.params, &self.ids);
        let h = tape.conv(p, input, &pyr.down[0], ids.enc1.w, Some(ids.enc1.b))?;
        let h = tape.relu(h);
        let h = tape.conv(p, h, &pyr.down[1], ids.enc2.w, Some(ids.enc2.b))?;
        let mut h = tape.relu(h);
        for (a, b) in &ids.enc_res {
            h = res_block(tape, p, h, &res_params(a, b), &pyr.same4)?;
        }
        tape.conv(p, h, &pyr.down[2], ids.enc3.w, Some(ids.enc3.b))
    }

    /// Synthesis transform on a tape; output is unclamped normalized RGB on
    /// `pyr.level(0)`.
    pub fn decoder_graph(&self, tape: &mut Tape, pyr: &Pyramid, latent: Var) -> Result<Var> {
        let (p, ids) = (&self.params, &self.ids);
        let h = tape.conv(p, latent, &pyr.up[0], ids.up1.w, Some(ids.up1.b))?;
        let mut h = tape.relu(h);
        for (a, b) in &ids.dec_res {
            h = res_block(tape, p, h, &res_params(a, b), &pyr.same4)?;
        }
        let h = tape.conv(p, h, &pyr.up[1], ids.up2.w, Some(ids.up2.b))?;
        let h = tape.relu(h);
        let h = tape.conv(p, h, &pyr.up[2], ids.up3.w, Some(ids.up3.b))?;
        let h = tape.relu(h);
        tape.conv(p, h, &pyr.same1, ids.out.w, Some(ids.out.b))
    }
}

fn res_params(a: &ConvIds, b: &ConvIds) -> ResBlockParams {
    ResBlockParams {
        w1: a.w,
        b1: a.b,
        w2: b.w,
        b2: b.b,
    }
}

fn res_block(
    tape: &mut Tape,
    params: &ParamStore,
    x: Var,
    blk: &ResBlockParams,
    map: &Arc<KernelMap>,
) -> Result<Var> {
    let h = tape.conv(params, x, map, blk.w1, Some(blk.b1))?;
    let h = tape.relu(h);
    let h = tape.conv(params, h, map, blk.w2, Some(blk.b2))?;
    tape.add(x, h)
}

/// Canonical coordinate sets at strides 1, 2, 4 and 8 derived from the
/// geometry, with every kernel map the network needs.
#[derive(Clone, Debug)]
pub struct Pyramid {
    levels: [Arc<Vec<Coord>>; 4],
    down: [Arc<KernelMap>; 3],
    up: [Arc<KernelMap>; 3],
    same4: Arc<KernelMap>,
    same1: Arc<KernelMap>,
    latent: LatentMaps,
}

impl Pyramid {
    /// Builds the pyramid from voxel coordinates (any order, unique).
    pub fn from_geometry(coords: &[Coord], context_kernel: usize) -> Result<Self> {
        let mut base = coords.to_vec();
        base.sort_unstable();
        if base.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvariantViolation("duplicate coordinates".into()));
        }
        let l1 = base;
        let l2 = downsample_coords(&l1, 1);
        let l4 = downsample_coords(&l2, 2);
        let l8 = downsample_coords(&l4, 4);
        let down = [
            Arc::new(KernelMap::conv(&l1, 1, &l2, 3, Mask::Full)),
            Arc::new(KernelMap::conv(&l2, 2, &l4, 3, Mask::Full)),
            Arc::new(KernelMap::conv(&l4, 4, &l8, 3, Mask::Full)),
        ];
        let up = [
            Arc::new(KernelMap::transpose(&l8, 8, &l4, 3)),
            Arc::new(KernelMap::transpose(&l4, 4, &l2, 3)),
            Arc::new(KernelMap::transpose(&l2, 2, &l1, 3)),
        ];
        let same4 = Arc::new(KernelMap::conv(&l4, 4, &l4, 3, Mask::Full));
        let same1 = Arc::new(KernelMap::conv(&l1, 1, &l1, 3, Mask::Full));
        let latent = LatentMaps::new(&l8, LATENT_STRIDE, context_kernel);
        Ok(Self {
            levels: [Arc::new(l1), Arc::new(l2), Arc::new(l4), Arc::new(l8)],
            down,
            up,
            same4,
            same1,
            latent,
        })
    }

    /// Coordinates at stride `2^level`, canonical order.
    pub fn level(&self, level: usize) -> &Arc<Vec<Coord>> {
        &self.levels[level]
    }

    pub fn points(&self) -> &[Coord] {
        &self.levels[0]
    }

    pub fn latent_coords(&self) -> &Arc<Vec<Coord>> {
        &self.levels[3]
    }

    pub fn latent_maps(&self) -> &LatentMaps {
        &self.latent
    }
}

/// Latent at the bottleneck stride, rows in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    pub coords: Arc<Vec<Coord>>,
    pub values: Vec<f64>,
    pub channels: usize,
    pub quantized: bool,
    /// Values clamped into the alphabet by [`quantize_infer`].
    pub clamp_count: usize,
}

impl LatentTensor {
    pub fn new(coords: Arc<Vec<Coord>>, values: Vec<f64>, channels: usize) -> Result<Self> {
        if values.len() != coords.len() * channels {
            return Err(Error::Shape(format!(
                "{} latent values for {} coordinates x {channels} channels",
                values.len(),
                coords.len()
            )));
        }
        Ok(Self {
            coords,
            values,
            channels,
            quantized: false,
            clamp_count: 0,
        })
    }

    /// Quantized latent from integer symbols.
    pub fn from_symbols(coords: Arc<Vec<Coord>>, symbols: &[i32], channels: usize) -> Result<Self> {
        let mut t = Self::new(coords, symbols.iter().map(|&s| f64::from(s)).collect(), channels)?;
        t.quantized = true;
        Ok(t)
    }

    /// Element count `N = rows x channels`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.coords.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    /// Integer symbols of a quantized latent.
    pub fn symbols(&self) -> Result<Vec<i32>> {
        if !self.quantized {
            return Err(Error::Contract("latent is not quantized".into()));
        }
        Ok(self.values.iter().map(|&v| v as i32).collect())
    }
}

/// Maps 8-bit colors to `[0, 1]`, row-major.
pub fn normalize_colors(colors: &[Rgb]) -> Vec<f64> {
    colors
        .iter()
        .flat_map(|c| c.map(|v| f64::from(v) / 255.0))
        .collect()
}

/// Rounds normalized colors back to 8 bits, clamping to `[0, 1]` first.
pub fn denormalize_colors(values: &[f64]) -> Vec<Rgb> {
    values
        .chunks_exact(3)
        .map(|c| [0, 1, 2].map(|k| (c[k].clamp(0.0, 1.0) * 255.0).round_ties_even() as u8))
        .collect()
}

/// Runs the analysis transform on a frame.
pub fn encode_features(frame: &VoxelizedFrame, model: &CodecModel) -> Result<LatentTensor> {
    if frame.is_empty() {
        return Err(Error::EmptyLatent);
    }
    let frame = frame.canonicalized();
    let pyr = Pyramid::from_geometry(frame.coords(), model.arch.context_kernel)?;
    encode_with_pyramid(&frame, &pyr, model)
}

/// As [`encode_features`] for a canonical frame whose pyramid is already built.
pub fn encode_with_pyramid(
    frame: &VoxelizedFrame,
    pyr: &Pyramid,
    model: &CodecModel,
) -> Result<LatentTensor> {
    if frame.coords() != pyr.points() {
        return Err(Error::GeometryMismatch("frame does not match pyramid".into()));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(frame.len(), 3, normalize_colors(frame.colors()))?;
    let y = model.encoder_graph(&mut tape, pyr, x)?;
    LatentTensor::new(
        Arc::clone(pyr.latent_coords()),
        tape.value(y).to_vec(),
        model.arch.latent,
    )
}

/// Draws training noise uniformly on `(-1/2, 1/2]`.
pub fn training_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| 0.5 - rng.gen::<f64>()).collect()
}

/// Training-time relaxation of rounding: adds independent uniform noise.
pub fn quantize_train<R: Rng + ?Sized>(latent: &LatentTensor, rng: &mut R) -> LatentTensor {
    let noise = training_noise(latent.len(), rng);
    let mut out = latent.clone();
    for (v, u) in out.values.iter_mut().zip(noise) {
        *v += u;
    }
    out
}

/// Rounds to the nearest integer (ties to even) and clamps to the alphabet.
pub fn quantize_infer(latent: &LatentTensor) -> LatentTensor {
    let a = f64::from(ALPHABET_BOUND);
    let mut clamps = 0;
    let values = latent
        .values
        .iter()
        .map(|&v| {
            // + 0.0 folds -0.0 into 0.0 so decoded symbols compare bitwise
            let r = v.round_ties_even() + 0.0;
            if r > a || r < -a || r.is_nan() {
                clamps += 1;
                if r.is_nan() {
                    0.0
                } else {
                    r.clamp(-a, a)
                }
            } else {
                r
            }
        })
        .collect();
    LatentTensor {
        coords: Arc::clone(&latent.coords),
        values,
        channels: latent.channels,
        quantized: true,
        clamp_count: clamps,
    }
}

/// Synthesis transform from a quantized latent; colors in `[0, 1]`, one row
/// per point of `pyr.points()`.
pub fn decode_features(
    latent: &LatentTensor,
    pyr: &Pyramid,
    model: &CodecModel,
) -> Result<Vec<[f64; 3]>> {
    if latent.coords.as_slice() != pyr.latent_coords().as_slice() {
        return Err(Error::GeometryMismatch(format!(
            "latent has {} coordinates, geometry implies {}",
            latent.rows(),
            pyr.latent_coords().len()
        )));
    }
    if latent.channels != model.arch.latent {
        return Err(Error::Shape(format!(
            "latent has {} channels, model expects {}",
            latent.channels, model.arch.latent
        )));
    }
    let mut tape = Tape::new();
    let z = tape.leaf(latent.rows(), latent.channels, latent.values.clone())?;
    let out = model.decoder_graph(&mut tape, pyr, z)?;
    Ok(tape
        .value(out)
        .chunks_exact(3)
        .map(|c| [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)])
        .collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::rngs::mock::StepRng;
    use rand::{Rng, SeedableRng};

    use super::*;

    fn tiny() -> Architecture {
        Architecture {
            narrow: 4,
            wide: 5,
            latent: 3,
            res_blocks: 1,
            context_kernel: 3,
        }
    }

    fn random_frame(seed: u64, n: usize, extent: i32) -> VoxelizedFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = std::collections::BTreeSet::new();
        while set.len() < n {
            set.insert([
                rng.gen_range(0..extent),
                rng.gen_range(0..extent),
                rng.gen_range(0..extent),
            ]);
        }
        let coords: Vec<Coord> = set.into_iter().collect();
        let colors = coords.iter().map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        VoxelizedFrame::new(coords, colors, 8).unwrap()
    }

    #[test]
    fn default_layout_shapes() {
        let layout = Architecture::default().layout();
        let get = |n: &str| layout.iter().find(|(k, _)| k == n).unwrap().1.clone();
        assert_eq!(get("encoder.conv1.weight"), vec![27, 3, 32]);
        assert_eq!(get("encoder.conv3.weight"), vec![27, 64, 64]);
        assert_eq!(get("decoder.out.weight"), vec![27, 32, 3]);
        assert_eq!(get("context.ar.weight"), vec![125, 64, 64]);
        assert_eq!(get("context.out.bias"), vec![128]);
        assert_eq!(layout.len(), 2 * (3 + 2 * 3 + 1 + 2 * 3 + 3 + 4));
    }

    #[test]
    fn single_point_latent_at_origin() {
        let model = CodecModel::new(Architecture::default(), 0.1, 1).unwrap();
        let frame = VoxelizedFrame::new(vec![[0, 0, 0]], vec![[10, 20, 30]], 4).unwrap();
        let latent = encode_features(&frame, &model).unwrap();
        assert_eq!(latent.coords.as_slice(), &[[0, 0, 0]]);
        assert_eq!(latent.channels, 64);
        assert_eq!(latent.len(), 64);
    }

    #[test]
    fn empty_frame_is_rejected() {
        let model = CodecModel::new(tiny(), 0.1, 1).unwrap();
        assert!(matches!(
            encode_features(&VoxelizedFrame::empty(8), &model),
            Err(Error::EmptyLatent)
        ));
    }

    #[test]
    fn permutation_invariance() {
        let model = CodecModel::new(tiny(), 0.1, 3).unwrap();
        let frame = random_frame(4, 60, 20);
        let mut coords = frame.coords().to_vec();
        let mut colors = frame.colors().to_vec();
        coords.reverse();
        colors.reverse();
        let shuffled = VoxelizedFrame::new(coords, colors, 8).unwrap();
        assert_eq!(
            encode_features(&frame, &model).unwrap(),
            encode_features(&shuffled, &model).unwrap()
        );
    }

    #[test]
    fn latent_coords_are_three_halvings() {
        let frame = random_frame(5, 80, 40);
        let pyr = Pyramid::from_geometry(frame.coords(), 5).unwrap();
        let mut expect: Vec<Coord> = frame.coords().iter().map(|c| c.map(|v| v / 8 * 8)).collect();
        expect.sort_unstable();
        expect.dedup();
        assert_eq!(pyr.latent_coords().as_slice(), expect.as_slice());
        assert!(pyr.latent_coords().len() <= frame.len());
    }

    #[test]
    fn quantize_infer_rounding() {
        let coords = Arc::new(vec![[0, 0, 0]]);
        let t = LatentTensor::new(coords, vec![1.4, 2.5, 3.5, -2.5, 300.0, -0.5], 6).unwrap();
        let q = quantize_infer(&t);
        assert_eq!(q.values, vec![1.0, 2.0, 4.0, -2.0, 255.0, 0.0]);
        assert!(q.values[5].is_sign_positive());
        assert_eq!(q.clamp_count, 1);
        assert!(q.quantized);
    }

    #[test]
    fn zero_noise_leaves_latent_unchanged() {
        let coords = Arc::new(vec![[0, 0, 0]]);
        let t = LatentTensor::new(coords, vec![0.3, -1.7], 2).unwrap();
        // 2^63 maps to exactly 0.5 in the [0, 1) float conversion
        let mut rng = StepRng::new(1 << 63, 0);
        assert_eq!(quantize_train(&t, &mut rng).values, t.values);
    }

    #[test]
    fn noise_is_centred() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = training_noise(1_000_000, &mut rng);
        let mean = noise.iter().sum::<f64>() / noise.len() as f64;
        assert!(mean.abs() < 0.002, "{mean}");
        assert!(noise.iter().all(|u| *u > -0.5 && *u <= 0.5));
    }

    #[test]
    fn zero_model_decodes_to_clamped_bias() {
        let mut model = CodecModel::new(tiny(), 0.1, 1).unwrap();
        for p in model.params_mut().iter_mut() {
            p.values_mut().fill(0.0);
        }
        let id = model.ids().out.b;
        model.params_mut().get_mut(id).values_mut().copy_from_slice(&[0.25, -1.0, 2.0]);
        let frame = random_frame(6, 30, 16);
        let pyr = Pyramid::from_geometry(frame.coords(), 3).unwrap();
        let n = pyr.latent_coords().len();
        let latent = LatentTensor::from_symbols(Arc::clone(pyr.latent_coords()), &vec![0; n * 3], 3)
            .unwrap();
        let out = decode_features(&latent, &pyr, &model).unwrap();
        assert_eq!(out.len(), frame.len());
        assert!(out.iter().all(|c| *c == [0.25, 0.0, 1.0]));
    }

    #[test]
    fn decode_rejects_foreign_geometry() {
        let model = CodecModel::new(tiny(), 0.1, 1).unwrap();
        let a = Pyramid::from_geometry(random_frame(1, 30, 64).coords(), 3).unwrap();
        let b = Pyramid::from_geometry(random_frame(2, 30, 64).coords(), 3).unwrap();
        let n = a.latent_coords().len();
        let latent =
            LatentTensor::from_symbols(Arc::clone(a.latent_coords()), &vec![0; n * 3], 3).unwrap();
        assert!(matches!(
            decode_features(&latent, &b, &model),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn model_file_round_trip() {
        let model = CodecModel::new(tiny(), 0.5, 11).unwrap();
        let bytes = model.to_bytes();
        let back = CodecModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.lambda(), 0.5);
        assert_eq!(back.architecture(), tiny());
        assert_eq!(back.model_id(), model.model_id());
        assert!(CodecModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CodecModel::from_bytes(&bad).is_err());
    }

    #[test]
    fn seeds_give_distinct_models() {
        let a = CodecModel::new(tiny(), 0.5, 1).unwrap();
        let b = CodecModel::new(tiny(), 0.5, 2).unwrap();
        assert_ne!(a.model_id(), b.model_id());
        assert_eq!(a.model_id(), CodecModel::new(tiny(), 0.5, 1).unwrap().model_id());
    }

    proptest! {
        #[test]
        fn rounding_matches_reference(vals in proptest::collection::vec(-400.0f64..400.0, 1..200)) {
            let n = vals.len();
            let t = LatentTensor::new(Arc::new(vec![[0, 0, 0]]), vals.clone(), n).unwrap();
            let q = quantize_infer(&t);
            for (v, r) in vals.iter().zip(&q.values) {
                // reference: nearest integer, exact halves go to the even neighbour
                let f = v.floor();
                let d = v - f;
                let mut expect = if d > 0.5 || (d == 0.5 && f % 2.0 != 0.0) { f + 1.0 } else { f };
                expect = expect.clamp(-255.0, 255.0);
                prop_assert_eq!(*r, expect);
                if v.abs() <= 255.0 {
                    prop_assert!((r - v).abs() <= 0.5);
                }
            }
        }
    }
}
