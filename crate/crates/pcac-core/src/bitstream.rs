//! Frame and sequence containers for the attribute codec.
//!
//! Geometry never enters the bitstream. Each frame carries a checksum of its
//! canonical coordinates so a decoder handed the wrong geometry fails early
//! instead of producing garbage.
//!
//! All integers are little-endian.

use std::io::{Read, Write};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::context::{temporal_align, ContextProvider, SequentialPredictor};
use crate::error::{Error, Result};
use crate::network::{
    decode_features, denormalize_colors, encode_with_pyramid, quantize_infer, CodecModel,
    LatentTensor, Pyramid, ALPHABET_BOUND, LATENT_STRIDE,
};
use crate::pointcloud::{FrameSequence, VoxelizedFrame};
use crate::range_coder::{decode_sequence, encode_sequence, PROB_BITS};

pub const FRAME_MAGIC: [u8; 4] = *b"PCAF";
pub const SEQUENCE_MAGIC: [u8; 4] = *b"PCAS";
pub const FORMAT_VERSION: u16 = 1;
pub const DEFAULT_GOP: usize = 8;

/// Bytes in a serialized frame header.
pub const FRAME_HEADER_BYTES: usize = 4 + 2 + 1 + 1 + 32 + 8 + 8 + 8 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameType {
    /// Coded without temporal context.
    Intra,
    /// Coded against the previous frame's decoded latent.
    Predicted,
}

impl FrameType {
    fn code(self) -> u8 {
        match self {
            FrameType::Intra => 0,
            FrameType::Predicted => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(FrameType::Intra),
            1 => Ok(FrameType::Predicted),
            _ => Err(Error::Parse(format!("unknown frame type {c}"))),
        }
    }
}

/// One coded frame: header plus range-coder payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedFrame {
    pub frame_type: FrameType,
    pub depth: u8,
    pub model_id: [u8; 32],
    pub point_count: u64,
    /// Number of coded latent elements.
    pub elements: u64,
    pub geometry_checksum: u64,
    pub payload: Vec<u8>,
}

impl EncodedFrame {
    pub fn payload_bits(&self) -> u64 {
        self.payload.len() as u64 * 8
    }

    pub fn header_bits(&self) -> u64 {
        FRAME_HEADER_BYTES as u64 * 8
    }

    /// Payload bits per point; 0 for an empty frame.
    pub fn bpp(&self) -> f64 {
        if self.point_count == 0 {
            0.0
        } else {
            self.payload_bits() as f64 / self.point_count as f64
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&FRAME_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[self.frame_type.code(), self.depth])?;
        w.write_all(&self.model_id)?;
        w.write_all(&self.point_count.to_le_bytes())?;
        w.write_all(&self.elements.to_le_bytes())?;
        w.write_all(&self.geometry_checksum.to_le_bytes())?;
        w.write_all(&(self.payload.len() as u64).to_le_bytes())?;
        w.write_all(&self.payload)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if magic != FRAME_MAGIC {
            return Err(Error::Parse("bad frame magic".into()));
        }
        let version = u16::from_le_bytes(read_array(r)?);
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedContent(format!("frame version {version}")));
        }
        let [kind, depth] = read_array(r)?;
        let frame_type = FrameType::from_code(kind)?;
        let model_id = read_array(r)?;
        let point_count = u64::from_le_bytes(read_array(r)?);
        let elements = u64::from_le_bytes(read_array(r)?);
        let geometry_checksum = u64::from_le_bytes(read_array(r)?);
        let len = u64::from_le_bytes(read_array(r)?);
        let len = usize::try_from(len).map_err(|_| Error::Parse("payload too large".into()))?;
        let mut payload = Vec::new();
        r.take(len as u64).read_to_end(&mut payload)?;
        if payload.len() != len {
            return Err(Error::Decode(format!(
                "payload truncated: {} of {len} bytes",
                payload.len()
            )));
        }
        Ok(Self {
            frame_type,
            depth,
            model_id,
            point_count,
            elements,
            geometry_checksum,
            payload,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_BYTES + self.payload.len());
        self.write_to(&mut out).expect("writing to a Vec");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let f = Self::read_from(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Parse(format!("{} trailing bytes after frame", r.len())));
        }
        Ok(f)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Decode("unexpected end of stream".into()),
        _ => Error::Io(e),
    })
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

/// First 8 bytes of SHA-256 over the canonical coordinates.
pub fn geometry_checksum(frame: &VoxelizedFrame) -> u64 {
    let canon;
    let f = if frame.is_canonical() {
        frame
    } else {
        canon = frame.canonicalized();
        &canon
    };
    let mut h = Sha256::new();
    h.update((f.len() as u64).to_le_bytes());
    for c in f.coords() {
        for v in c {
            h.update(v.to_le_bytes());
        }
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Everything the encoder knows after coding one frame.
#[derive(Clone, Debug)]
pub struct FrameEncoding {
    pub frame: EncodedFrame,
    /// The latent the decoder will reconstruct; `None` for an empty frame.
    pub latent: Option<LatentTensor>,
    /// The reconstruction the decoder will produce, in canonical order.
    pub reconstruction: VoxelizedFrame,
    /// `sum -log2 p` of the coded symbols under the coding tables' pmfs.
    pub cross_entropy_bits: f64,
}

fn depth_byte(frame: &VoxelizedFrame) -> Result<u8> {
    u8::try_from(frame.depth()).map_err(|_| Error::Encode("depth does not fit a byte".into()))
}

/// Codes one frame. `temporal` is the previous frame's decoded latent; its
/// absence makes this an intra frame.
pub fn encode_frame(
    frame: &VoxelizedFrame,
    temporal: Option<&LatentTensor>,
    model: &CodecModel,
) -> Result<FrameEncoding> {
    let frame_type = if temporal.is_some() {
        FrameType::Predicted
    } else {
        FrameType::Intra
    };
    let mut header = EncodedFrame {
        frame_type,
        depth: depth_byte(frame)?,
        model_id: model.model_id(),
        point_count: frame.len() as u64,
        elements: 0,
        geometry_checksum: geometry_checksum(frame),
        payload: Vec::new(),
    };
    if frame.is_empty() {
        return Ok(FrameEncoding {
            frame: header,
            latent: None,
            reconstruction: VoxelizedFrame::empty(frame.depth()),
            cross_entropy_bits: 0.0,
        });
    }
    let frame = frame.canonicalized();
    let l = model.latent_channels();
    let pyr = Pyramid::from_geometry(frame.coords(), model.architecture().context_kernel)?;
    let latent = quantize_infer(&encode_with_pyramid(&frame, &pyr, model)?);
    let symbols = latent.symbols()?;
    if let Some(s) = symbols.iter().find(|s| s.abs() > ALPHABET_BOUND) {
        return Err(Error::Encode(format!("symbol {s} outside the alphabet")));
    }
    let aligned = temporal_align(temporal, pyr.latent_coords(), l)?;
    let predictor = SequentialPredictor::new(model, pyr.latent_maps().clone(), &aligned)?;
    let mut provider = ContextProvider::new(predictor);
    header.payload = encode_sequence(&symbols, &mut provider)?;
    header.elements = symbols.len() as u64;

    // rebuild from symbols, exactly as the decoder will
    let decoded = LatentTensor::from_symbols(Arc::clone(pyr.latent_coords()), &symbols, l)?;
    let colors = denormalize_colors(&flatten(&decode_features(&decoded, &pyr, model)?));
    Ok(FrameEncoding {
        frame: header,
        latent: Some(decoded),
        reconstruction: frame.with_colors(colors)?,
        cross_entropy_bits: provider.cross_entropy_bits(),
    })
}

fn flatten(rows: &[[f64; 3]]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

/// Decodes one frame given its geometry (colors of `geometry` are ignored).
/// Returns the reconstruction in canonical order and the decoded latent.
pub fn decode_frame(
    enc: &EncodedFrame,
    geometry: &VoxelizedFrame,
    temporal: Option<&LatentTensor>,
    model: &CodecModel,
) -> Result<(VoxelizedFrame, Option<LatentTensor>)> {
    if enc.model_id != model.model_id() {
        return Err(Error::ModelMismatch);
    }
    if enc.point_count != geometry.len() as u64
        || enc.geometry_checksum != geometry_checksum(geometry)
    {
        return Err(Error::GeometryMismatch(format!(
            "bitstream expects {} points with checksum {:016x}, got {} points with checksum {:016x}",
            enc.point_count,
            enc.geometry_checksum,
            geometry.len(),
            geometry_checksum(geometry)
        )));
    }
    if geometry.is_empty() {
        if enc.elements != 0 || !enc.payload.is_empty() {
            return Err(Error::Decode("empty frame with a payload".into()));
        }
        return Ok((VoxelizedFrame::empty(geometry.depth()), None));
    }
    let temporal = match enc.frame_type {
        FrameType::Intra => None,
        FrameType::Predicted => Some(temporal.ok_or_else(|| {
            Error::Decode("predicted frame needs the previous decoded latent".into())
        })?),
    };
    let geometry = geometry.canonicalized();
    let l = model.latent_channels();
    let pyr = Pyramid::from_geometry(geometry.coords(), model.architecture().context_kernel)?;
    let expected = pyr.latent_coords().len() * l;
    if enc.elements != expected as u64 {
        return Err(Error::Decode(format!(
            "header announces {} elements, geometry implies {expected}",
            enc.elements
        )));
    }
    let aligned = temporal_align(temporal, pyr.latent_coords(), l)?;
    let predictor = SequentialPredictor::new(model, pyr.latent_maps().clone(), &aligned)?;
    let mut provider = ContextProvider::new(predictor);
    let symbols = decode_sequence(&enc.payload, expected, &mut provider)?;
    let latent = LatentTensor::from_symbols(Arc::clone(pyr.latent_coords()), &symbols, l)?;
    let colors = denormalize_colors(&flatten(&decode_features(&latent, &pyr, model)?));
    Ok((geometry.with_colors(colors)?, Some(latent)))
}

/// A coded sequence: frames plus the group-of-frames structure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub model_id: [u8; 32],
    pub gop: u32,
    pub frames: Vec<EncodedFrame>,
}

impl EncodedSequence {
    /// Byte offset of each frame from the start of the file.
    pub fn offsets(&self) -> Vec<u64> {
        let mut off = (Self::fixed_header_bytes() + 8 * self.frames.len()) as u64;
        self.frames
            .iter()
            .map(|f| {
                let o = off;
                off += (FRAME_HEADER_BYTES + f.payload.len()) as u64;
                o
            })
            .collect()
    }

    fn fixed_header_bytes() -> usize {
        4 + 2 + 32 + 4 + 4 + 2 + 1 + 1
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&SEQUENCE_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.model_id)?;
        w.write_all(&self.gop.to_le_bytes())?;
        w.write_all(&(self.frames.len() as u32).to_le_bytes())?;
        w.write_all(&(ALPHABET_BOUND as u16).to_le_bytes())?;
        w.write_all(&[PROB_BITS as u8, LATENT_STRIDE as u8])?;
        for o in self.offsets() {
            w.write_all(&o.to_le_bytes())?;
        }
        for f in &self.frames {
            f.write_to(w)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let magic: [u8; 4] = read_array(&mut r)?;
        if magic != SEQUENCE_MAGIC {
            return Err(Error::Parse("bad sequence magic".into()));
        }
        let version = u16::from_le_bytes(read_array(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedContent(format!("sequence version {version}")));
        }
        let model_id = read_array(&mut r)?;
        let gop = u32::from_le_bytes(read_array(&mut r)?);
        if gop == 0 {
            return Err(Error::Parse("group length 0".into()));
        }
        let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let bound = u16::from_le_bytes(read_array(&mut r)?);
        let [prob_bits, stride] = read_array(&mut r)?;
        if i32::from(bound) != ALPHABET_BOUND
            || u32::from(prob_bits) != PROB_BITS
            || i32::from(stride) != LATENT_STRIDE
        {
            return Err(Error::UnsupportedContent(format!(
                "format constants bound={bound} prob_bits={prob_bits} stride={stride}"
            )));
        }
        let mut offsets = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            offsets.push(u64::from_le_bytes(read_array(&mut r)?));
        }
        if offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parse("frame offsets not strictly increasing".into()));
        }
        let mut frames = Vec::with_capacity(count.min(1 << 20));
        for (i, &o) in offsets.iter().enumerate() {
            let start = usize::try_from(o).map_err(|_| Error::Parse("offset overflow".into()))?;
            let end = match offsets.get(i + 1) {
                Some(&n) => usize::try_from(n).map_err(|_| Error::Parse("offset overflow".into()))?,
                None => bytes.len(),
            };
            let chunk = bytes
                .get(start..end)
                .ok_or_else(|| Error::Decode(format!("frame {i} lies outside the file")))?;
            let f = EncodedFrame::from_bytes(chunk).map_err(|e| e.at_frame(i))?;
            if f.model_id != model_id {
                return Err(Error::ModelMismatch.at_frame(i));
            }
            frames.push(f);
        }
        let seq = Self {
            model_id,
            gop,
            frames,
        };
        if seq.offsets() != offsets {
            return Err(Error::Parse("offset table does not match frame sizes".into()));
        }
        Ok(seq)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Per-frame rate figures recorded while coding a sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameStats {
    pub frame_type: FrameType,
    pub points: usize,
    pub payload_bits: u64,
    pub header_bits: u64,
    pub bpp: f64,
    pub cross_entropy_bits: f64,
}

#[derive(Clone, Debug)]
pub struct SequenceEncoding {
    pub encoded: EncodedSequence,
    /// Encoder-side reconstructions, canonical order.
    pub reconstructions: Vec<VoxelizedFrame>,
    pub stats: Vec<FrameStats>,
}

/// Codes a sequence in groups of `gop` frames; the first frame of each group
/// is intra coded.
pub fn encode_sequence_file(
    seq: &FrameSequence,
    model: &CodecModel,
    gop: usize,
) -> Result<SequenceEncoding> {
    let gop_u32 = u32::try_from(gop)
        .ok()
        .filter(|&g| g > 0)
        .ok_or_else(|| Error::Contract(format!("group length {gop} must be in 1..2^32")))?;
    let mut frames = Vec::with_capacity(seq.len());
    let mut reconstructions = Vec::with_capacity(seq.len());
    let mut stats = Vec::with_capacity(seq.len());
    let mut prev: Option<LatentTensor> = None;
    for (t, frame) in seq.frames().iter().enumerate() {
        let temporal = if t % gop == 0 { None } else { prev.as_ref() };
        let enc = encode_frame(frame, temporal, model).map_err(|e| e.at_frame(t))?;
        stats.push(FrameStats {
            frame_type: enc.frame.frame_type,
            points: frame.len(),
            payload_bits: enc.frame.payload_bits(),
            header_bits: enc.frame.header_bits(),
            bpp: enc.frame.bpp(),
            cross_entropy_bits: enc.cross_entropy_bits,
        });
        prev = enc.latent;
        frames.push(enc.frame);
        reconstructions.push(enc.reconstruction);
    }
    Ok(SequenceEncoding {
        encoded: EncodedSequence {
            model_id: model.model_id(),
            gop: gop_u32,
            frames,
        },
        reconstructions,
        stats,
    })
}

/// Decodes every frame; `geometry` supplies the coordinates of each frame.
pub fn decode_sequence_file(
    enc: &EncodedSequence,
    geometry: &FrameSequence,
    model: &CodecModel,
) -> Result<Vec<VoxelizedFrame>> {
    decode_from(enc, geometry.frames(), model, 0)
}

/// Decodes frames `start..` without touching earlier ones. `start` must be a
/// group boundary; `geometry[i]` belongs to frame `start + i`.
pub fn decode_from(
    enc: &EncodedSequence,
    geometry: &[VoxelizedFrame],
    model: &CodecModel,
    start: usize,
) -> Result<Vec<VoxelizedFrame>> {
    if enc.model_id != model.model_id() {
        return Err(Error::ModelMismatch);
    }
    if !start.is_multiple_of(enc.gop as usize) {
        return Err(Error::Contract(format!(
            "frame {start} is not a group boundary (group length {})",
            enc.gop
        )));
    }
    let frames = enc.frames.get(start..).unwrap_or(&[]);
    if frames.len() != geometry.len() {
        return Err(Error::GeometryMismatch(format!(
            "{} coded frames from {start}, {} geometry frames",
            frames.len(),
            geometry.len()
        )));
    }
    let mut out = Vec::with_capacity(frames.len());
    let mut prev: Option<LatentTensor> = None;
    for (i, (f, g)) in frames.iter().zip(geometry).enumerate() {
        let (rec, latent) =
            decode_frame(f, g, prev.as_ref(), model).map_err(|e| e.at_frame(start + i))?;
        prev = latent;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::network::Architecture;
    use crate::pointcloud::Coord;

    fn arch() -> Architecture {
        Architecture {
            narrow: 4,
            wide: 4,
            latent: 3,
            res_blocks: 1,
            context_kernel: 5,
        }
    }

    fn model(seed: u64) -> CodecModel {
        let mut m = CodecModel::new(arch(), 0.1, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in m.params_mut().iter_mut() {
            if p.shape().len() == 1 {
                p.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
        }
        m
    }

    fn random_frame(rng: &mut ChaCha8Rng, n: usize, extent: i32) -> VoxelizedFrame {
        let mut set = std::collections::BTreeSet::new();
        while set.len() < n {
            set.insert([0, 1, 2].map(|_| rng.gen_range(0..extent)));
        }
        let mut coords: Vec<Coord> = set.into_iter().collect();
        // shuffled input order must not matter
        coords.reverse();
        let colors = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        VoxelizedFrame::new(coords, colors, 6).unwrap()
    }

    #[test]
    fn empty_frame_is_header_only() {
        let m = model(1);
        let f = VoxelizedFrame::empty(6);
        let enc = encode_frame(&f, None, &m).unwrap();
        assert_eq!(enc.frame.elements, 0);
        assert!(enc.frame.payload.is_empty());
        assert_eq!(enc.frame.to_bytes().len(), FRAME_HEADER_BYTES);
        let (rec, lat) = decode_frame(&enc.frame, &f, None, &m).unwrap();
        assert!(rec.is_empty() && lat.is_none());
    }

    #[test]
    fn frame_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = model(2);
        let prev = random_frame(&mut rng, 40, 40);
        let cur = random_frame(&mut rng, 50, 40);
        let p = encode_frame(&prev, None, &m).unwrap();
        let enc = encode_frame(&cur, p.latent.as_ref(), &m).unwrap();
        assert_eq!(enc.frame.frame_type, FrameType::Predicted);
        let bytes = enc.frame.to_bytes();
        let back = EncodedFrame::from_bytes(&bytes).unwrap();
        assert_eq!(back, enc.frame);
        let (rec, lat) = decode_frame(&back, &cur, p.latent.as_ref(), &m).unwrap();
        assert_eq!(rec, enc.reconstruction);
        assert_eq!(lat.unwrap().values, enc.latent.unwrap().values);
        let bits = enc.frame.payload_bits() as f64;
        assert!(bits <= enc.cross_entropy_bits * 1.01 + 128.0);
    }

    #[test]
    fn encoding_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = model(3);
        let f = random_frame(&mut rng, 30, 30);
        let a = encode_frame(&f, None, &m).unwrap().frame.to_bytes();
        let b = encode_frame(&f, None, &m).unwrap().frame.to_bytes();
        assert_eq!(a, b);
    }

    #[test]
    fn intra_frame_ignores_supplied_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = model(4);
        let other = random_frame(&mut rng, 30, 30);
        let f = random_frame(&mut rng, 30, 30);
        let r = encode_frame(&other, None, &m).unwrap().latent;
        let enc = encode_frame(&f, None, &m).unwrap();
        let (a, _) = decode_frame(&enc.frame, &f, None, &m).unwrap();
        let (b, _) = decode_frame(&enc.frame, &f, r.as_ref(), &m).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predicted_frame_with_wrong_reference_diverges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = model(5);
        let prev = random_frame(&mut rng, 40, 12);
        let cur = random_frame(&mut rng, 40, 12);
        let other = random_frame(&mut rng, 40, 12);
        let p = encode_frame(&prev, None, &m).unwrap().latent;
        let o = encode_frame(&other, None, &m).unwrap().latent;
        let enc = encode_frame(&cur, p.as_ref(), &m).unwrap();
        let right = enc.latent.clone().unwrap();
        match decode_frame(&enc.frame, &cur, o.as_ref(), &m) {
            Ok((_, lat)) => assert_ne!(lat.unwrap().values, right.values),
            Err(e) => assert!(matches!(e, Error::Decode(_))),
        }
        assert!(matches!(
            decode_frame(&enc.frame, &cur, None, &m),
            Err(Error::Decode(_))
        ));
    }

    #[test]
    fn wrong_model_is_refused() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random_frame(&mut rng, 20, 20);
        let enc = encode_frame(&f, None, &model(6)).unwrap();
        assert!(matches!(
            decode_frame(&enc.frame, &f, None, &model(7)),
            Err(Error::ModelMismatch)
        ));
    }

    #[test]
    fn wrong_geometry_is_refused() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = model(8);
        let f = random_frame(&mut rng, 20, 20);
        let g = random_frame(&mut rng, 20, 20);
        let enc = encode_frame(&f, None, &m).unwrap();
        assert!(matches!(
            decode_frame(&enc.frame, &g, None, &m),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = model(9);
        let f = random_frame(&mut rng, 40, 20);
        let mut enc = encode_frame(&f, None, &m).unwrap().frame;
        enc.payload.pop();
        assert!(decode_frame(&enc, &f, None, &m).is_err());
        let bytes = encode_frame(&f, None, &m).unwrap().frame.to_bytes();
        assert!(EncodedFrame::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    fn sequence(rng: &mut ChaCha8Rng, n: usize) -> FrameSequence {
        let frames = (0..n).map(|_| random_frame(rng, 25, 16)).collect();
        FrameSequence::new("t", frames).unwrap()
    }

    #[test]
    fn sequence_round_trip_and_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = model(10);
        let seq = sequence(&mut rng, 5);
        let enc = encode_sequence_file(&seq, &m, 2).unwrap();
        let types: Vec<_> = enc.stats.iter().map(|s| s.frame_type).collect();
        use FrameType::*;
        assert_eq!(types, [Intra, Predicted, Intra, Predicted, Intra]);
        for s in &enc.stats {
            assert_eq!(s.bpp * s.points as f64, s.payload_bits as f64);
        }
        let bytes = enc.encoded.to_bytes();
        let back = EncodedSequence::from_bytes(&bytes).unwrap();
        assert_eq!(back, enc.encoded);
        let offs = back.offsets();
        assert!(offs.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(decode_sequence_file(&back, &seq, &m).unwrap(), enc.reconstructions);
        let tail = decode_from(&back, &seq.frames()[2..], &m, 2).unwrap();
        assert_eq!(tail, enc.reconstructions[2..]);
        assert!(matches!(
            decode_from(&back, &seq.frames()[1..], &m, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn unit_group_is_all_intra() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = model(11);
        let seq = sequence(&mut rng, 3);
        let enc = encode_sequence_file(&seq, &m, 1).unwrap();
        let independent: usize = seq
            .frames()
            .iter()
            .map(|f| encode_frame(f, None, &m).unwrap().frame.to_bytes().len())
            .sum();
        let framed: usize = enc.encoded.frames.iter().map(|f| f.to_bytes().len()).sum();
        assert_eq!(framed, independent);
        assert!(enc.stats.iter().all(|s| s.frame_type == FrameType::Intra));
    }

    #[test]
    fn frame_errors_carry_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = model(12);
        let seq = sequence(&mut rng, 3);
        let enc = encode_sequence_file(&seq, &m, 8).unwrap().encoded;
        let mut geo = seq.frames().to_vec();
        geo[2] = random_frame(&mut rng, 25, 16);
        let err = decode_from(&enc, &geo, &m, 0).unwrap_err();
        assert!(matches!(err, Error::Frame { index: 2, .. }), "{err}");
    }
}
