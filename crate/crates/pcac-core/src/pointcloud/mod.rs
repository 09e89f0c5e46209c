//! Voxelized point-cloud frames, scan ordering and attribute quality metrics.
//!
//! Geometry is treated as losslessly known on both sides of the codec; only
//! the per-point RGB attributes are ever coded. All accumulations here run in
//! canonical coordinate order so results do not depend on input point order.

mod ply;

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

pub use ply::{load_ply, load_ply_with_depth, write_ply, write_ply_with_scalar, PlyFormat};

use crate::error::{Error, Result};

/// Integer voxel coordinate `(x, y, z)`.
pub type Coord = [i32; 3];

/// 8-bit RGB triple.
pub type Rgb = [u8; 3];

/// Largest supported voxel-grid bit depth.
pub const MAX_DEPTH: u32 = 30;

/// One frame of occupied voxels with an RGB color per voxel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelizedFrame {
    coords: Vec<Coord>,
    colors: Vec<Rgb>,
    depth: u32,
}

impl VoxelizedFrame {
    /// Builds a frame, rejecting duplicate voxels, length mismatches and
    /// coordinates outside `[0, 2^depth)`.
    pub fn new(coords: Vec<Coord>, colors: Vec<Rgb>, depth: u32) -> Result<Self> {
        if coords.len() != colors.len() {
            return Err(Error::InvariantViolation(format!(
                "{} coordinates but {} colors",
                coords.len(),
                colors.len()
            )));
        }
        check_bounds(&coords, depth)?;
        // canonical_order rejects duplicates
        canonical_order(&coords)?;
        Ok(Self {
            coords,
            colors,
            depth,
        })
    }

    /// Builds a frame from raw points, merging points that share a voxel by
    /// averaging their colors (round half to even).
    pub fn from_points_merging(coords: Vec<Coord>, colors: Vec<Rgb>, depth: u32) -> Result<Self> {
        if coords.len() != colors.len() {
            return Err(Error::InvariantViolation(format!(
                "{} coordinates but {} colors",
                coords.len(),
                colors.len()
            )));
        }
        check_bounds(&coords, depth)?;
        let mut idx: Vec<usize> = (0..coords.len()).collect();
        idx.sort_by(|&a, &b| coords[a].cmp(&coords[b]).then(a.cmp(&b)));

        let mut out_coords = Vec::with_capacity(coords.len());
        let mut out_colors = Vec::with_capacity(coords.len());
        let mut i = 0;
        while i < idx.len() {
            let c = coords[idx[i]];
            let mut j = i;
            let mut sum = [0u64; 3];
            while j < idx.len() && coords[idx[j]] == c {
                for (s, v) in sum.iter_mut().zip(colors[idx[j]]) {
                    *s += u64::from(v);
                }
                j += 1;
            }
            let n = (j - i) as f64;
            let avg = sum.map(|s| (s as f64 / n).round_ties_even() as u8);
            out_coords.push(c);
            out_colors.push(avg);
            i = j;
        }
        Ok(Self {
            coords: out_coords,
            colors: out_colors,
            depth,
        })
    }

    pub fn empty(depth: u32) -> Self {
        Self {
            coords: Vec::new(),
            colors: Vec::new(),
            depth,
        }
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn colors(&self) -> &[Rgb] {
        &self.colors
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Returns a copy with points permuted into canonical order.
    pub fn canonicalized(&self) -> Self {
        let perm = canonical_order(&self.coords).expect("frame coordinates are unique");
        Self {
            coords: perm.iter().map(|&i| self.coords[i]).collect(),
            colors: perm.iter().map(|&i| self.colors[i]).collect(),
            depth: self.depth,
        }
    }

    /// Same geometry, new colors.
    pub fn with_colors(&self, colors: Vec<Rgb>) -> Result<Self> {
        if colors.len() != self.coords.len() {
            return Err(Error::InvariantViolation(format!(
                "{} coordinates but {} colors",
                self.coords.len(),
                colors.len()
            )));
        }
        Ok(Self {
            coords: self.coords.clone(),
            colors,
            depth: self.depth,
        })
    }

    pub fn is_canonical(&self) -> bool {
        self.coords.windows(2).all(|w| w[0] < w[1])
    }
}

fn check_bounds(coords: &[Coord], depth: u32) -> Result<()> {
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::InvariantViolation(format!(
            "voxel depth {depth} outside 1..={MAX_DEPTH}"
        )));
    }
    let limit = 1i64 << depth;
    if let Some(c) = coords
        .iter()
        .find(|c| c.iter().any(|&v| v < 0 || i64::from(v) >= limit))
    {
        return Err(Error::InvariantViolation(format!(
            "coordinate {c:?} outside [0, 2^{depth})"
        )));
    }
    Ok(())
}

/// An ordered run of frames sharing one voxel depth.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    pub name: String,
    frames: Vec<VoxelizedFrame>,
}

impl FrameSequence {
    pub fn new(name: impl Into<String>, frames: Vec<VoxelizedFrame>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if let Some(bad) = frames.iter().position(|f| f.depth != first.depth) {
                return Err(Error::InvariantViolation(format!(
                    "frame {bad} has depth {} but frame 0 has depth {}",
                    frames[bad].depth, first.depth
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            frames,
        })
    }

    /// Loads every `*.ply` file of a directory in file-name order.
    pub fn load_dir(dir: &Path, depth: Option<u32>) -> Result<Self> {
        let files = ply_files(dir)?;
        let mut frames = Vec::with_capacity(files.len());
        for (i, f) in files.iter().enumerate() {
            frames.push(load_ply_with_depth(f, depth).map_err(|e| e.at_frame(i))?);
        }
        // a mixed-depth directory loaded without a flag gets the largest depth
        if depth.is_none() {
            if let Some(max) = frames.iter().map(|f| f.depth).max() {
                for f in &mut frames {
                    f.depth = max;
                }
            }
        }
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into());
        Self::new(name, frames)
    }

    pub fn frames(&self) -> &[VoxelizedFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn depth(&self) -> Option<u32> {
        self.frames.first().map(|f| f.depth)
    }
}

/// Sorted list of the `.ply` files in `dir`.
pub fn ply_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("ply"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Permutation that sorts coordinates lexicographically by `(x, y, z)`.
///
/// This is the scan order of the autoregressive context model; it fails on
/// duplicate coordinates because a duplicate has no well-defined position.
pub fn canonical_order(coords: &[Coord]) -> Result<Vec<usize>> {
    let mut perm: Vec<usize> = (0..coords.len()).collect();
    perm.sort_by(|&a, &b| coords[a].cmp(&coords[b]));
    if let Some(w) = perm.windows(2).find(|w| coords[w[0]] == coords[w[1]]) {
        return Err(Error::InvariantViolation(format!(
            "duplicate coordinate {:?}",
            coords[w[0]]
        )));
    }
    Ok(perm)
}

/// Lexicographic comparison used by the scan order.
pub fn compare_coords(a: &Coord, b: &Coord) -> Ordering {
    a.cmp(b)
}

/// BT.709 full-range RGB to YUV with chroma offset 128.
pub fn rgb_to_yuv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let y = 0.2126 * r + 0.7152 * g + 0.0722 * b;
    let u = (b - y) / 1.8556 + 128.0;
    let v = (r - y) / 1.5748 + 128.0;
    [y, u, v]
}

pub fn rgb8_to_yuv(rgb: Rgb) -> [f64; 3] {
    rgb_to_yuv(rgb.map(f64::from))
}

/// PSNR cap applied when the MSE is (numerically) zero.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Per-channel quality of a reconstruction against its reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityReport {
    pub psnr_y: f64,
    pub psnr_u: f64,
    pub psnr_v: f64,
    pub psnr_yuv: f64,
    pub mse_rgb: f64,
}

/// PSNR from a mean squared error in 8-bit units, capped at 100 dB.
pub fn psnr_from_mse(mse: f64) -> f64 {
    let peak = 255.0 * 255.0;
    if mse < peak * 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// `(6 Y + U + V) / 8`.
pub fn weighted_yuv_psnr(y: f64, u: f64, v: f64) -> f64 {
    (6.0 * y + u + v) / 8.0
}

/// Compares two frames with identical geometry in the YUV domain.
pub fn psnr(reference: &VoxelizedFrame, reconstruction: &VoxelizedFrame) -> Result<QualityReport> {
    let a = reference.canonicalized();
    let b = reconstruction.canonicalized();
    if a.coords != b.coords {
        return Err(Error::GeometryMismatch(format!(
            "reference has {} points, reconstruction has {} points with differing coordinates",
            a.len(),
            b.len()
        )));
    }
    let n = a.len().max(1) as f64;
    let mut sq_yuv = [0.0f64; 3];
    let mut sq_rgb = 0.0f64;
    for (ca, cb) in a.colors.iter().zip(&b.colors) {
        let ya = rgb8_to_yuv(*ca);
        let yb = rgb8_to_yuv(*cb);
        for k in 0..3 {
            let d = ya[k] - yb[k];
            sq_yuv[k] += d * d;
            let e = f64::from(ca[k]) - f64::from(cb[k]);
            sq_rgb += e * e;
        }
    }
    let [psnr_y, psnr_u, psnr_v] = sq_yuv.map(|s| psnr_from_mse(s / n));
    Ok(QualityReport {
        psnr_y,
        psnr_u,
        psnr_v,
        psnr_yuv: weighted_yuv_psnr(psnr_y, psnr_u, psnr_v),
        mse_rgb: sq_rgb / (3.0 * n),
    })
}

/// Per-point Euclidean norm of the RGB error, in canonical order of the
/// reference geometry.
pub fn distortion_norms(
    reference: &VoxelizedFrame,
    reconstruction: &VoxelizedFrame,
) -> Result<Vec<f64>> {
    let a = reference.canonicalized();
    let b = reconstruction.canonicalized();
    if a.coords != b.coords {
        return Err(Error::GeometryMismatch(
            "distortion map needs identical geometry".into(),
        ));
    }
    Ok(a.colors
        .iter()
        .zip(&b.colors)
        .map(|(x, y)| {
            let s: f64 = (0..3)
                .map(|k| {
                    let d = f64::from(x[k]) - f64::from(y[k]);
                    d * d
                })
                .sum();
            s.sqrt()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn canonical_order_two_points() {
        let perm = canonical_order(&[[1, 0, 0], [0, 0, 0]]).unwrap();
        assert_eq!(perm, vec![1, 0]);
    }

    #[test]
    fn canonical_order_sorted_is_identity() {
        let coords = vec![[0, 0, 1], [0, 1, 0], [1, 0, 0], [1, 1, 1]];
        assert_eq!(canonical_order(&coords).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn canonical_order_rejects_duplicates() {
        let err = canonical_order(&[[1, 2, 3], [0, 0, 0], [1, 2, 3]]).unwrap_err();
        assert!(matches!(err, Error::InvariantViolation(_)));
    }

    #[test]
    fn canonical_order_matches_comparison_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut set = std::collections::BTreeSet::new();
        while set.len() < 100 {
            set.insert([rng.gen_range(0..16), rng.gen_range(0..16), rng.gen_range(0..16)]);
        }
        let mut coords: Vec<Coord> = set.into_iter().collect();
        // shuffle with an explicit Fisher-Yates so the oracle below is a plain sort
        for i in (1..coords.len()).rev() {
            let j = rng.gen_range(0..=i);
            coords.swap(i, j);
        }
        let perm = canonical_order(&coords).unwrap();
        let mut oracle = coords.clone();
        oracle.sort_by(|a, b| {
            (a[0], a[1], a[2])
                .partial_cmp(&(b[0], b[1], b[2]))
                .unwrap()
        });
        let ordered: Vec<Coord> = perm.iter().map(|&i| coords[i]).collect();
        assert_eq!(ordered, oracle);
    }

    #[test]
    fn yuv_achromatic_endpoints() {
        let w = rgb_to_yuv([255.0; 3]);
        let b = rgb_to_yuv([0.0; 3]);
        for (got, want) in w.iter().zip([255.0, 128.0, 128.0]) {
            assert!((got - want).abs() < 1e-9);
        }
        for (got, want) in b.iter().zip([0.0, 128.0, 128.0]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn yuv_pure_red_luma() {
        // 0.2126 * 255
        assert!((rgb_to_yuv([255.0, 0.0, 0.0])[0] - 54.213).abs() < 1e-9);
    }

    #[test]
    fn yuv_preserves_achromatic_axis() {
        for v in 0..=255u8 {
            let [y, u, w] = rgb8_to_yuv([v; 3]);
            assert!((y - f64::from(v)).abs() < 1e-9);
            assert!((u - 128.0).abs() < 1e-9 && (w - 128.0).abs() < 1e-9);
        }
    }

    #[test]
    fn psnr_identical_is_capped() {
        let f = VoxelizedFrame::new(vec![[0, 0, 0], [1, 0, 0]], vec![[10, 20, 30], [40, 50, 60]], 4)
            .unwrap();
        let q = psnr(&f, &f).unwrap();
        assert_eq!(q.psnr_y, 100.0);
        assert_eq!(q.psnr_yuv, 100.0);
        assert_eq!(q.mse_rgb, 0.0);
    }

    #[test]
    fn psnr_unit_luma_mse() {
        // achromatic offset of one level moves Y by exactly 1 and leaves U, V alone
        let a = VoxelizedFrame::new(vec![[0, 0, 0]], vec![[100, 100, 100]], 4).unwrap();
        let b = VoxelizedFrame::new(vec![[0, 0, 0]], vec![[101, 101, 101]], 4).unwrap();
        let q = psnr(&a, &b).unwrap();
        assert!((q.psnr_y - 48.130_803_608_679_1).abs() < 1e-9);
        assert_eq!(q.psnr_u, 100.0);
    }

    #[test]
    fn psnr_geometry_mismatch() {
        let a = VoxelizedFrame::new(vec![[0, 0, 0]], vec![[0, 0, 0]], 4).unwrap();
        let b = VoxelizedFrame::new(vec![[0, 0, 1]], vec![[0, 0, 0]], 4).unwrap();
        assert!(matches!(psnr(&a, &b), Err(Error::GeometryMismatch(_))));
    }

    fn random_pair(seed: u64, n: usize) -> (VoxelizedFrame, VoxelizedFrame) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = std::collections::BTreeSet::new();
        while set.len() < n {
            set.insert([rng.gen_range(0..32), rng.gen_range(0..32), rng.gen_range(0..32)]);
        }
        let coords: Vec<Coord> = set.into_iter().collect();
        let ca: Vec<Rgb> = (0..n).map(|_| rng.gen()).collect();
        let cb: Vec<Rgb> = (0..n).map(|_| rng.gen()).collect();
        (
            VoxelizedFrame::new(coords.clone(), ca, 5).unwrap(),
            VoxelizedFrame::new(coords, cb, 5).unwrap(),
        )
    }

    #[test]
    fn psnr_matches_reverse_accumulation_oracle() {
        let (a, b) = random_pair(11, 100);
        let q = psnr(&a, &b).unwrap();
        // oracle: accumulate per point from the back, matrix written out by hand
        let mut sy = 0.0;
        for i in (0..a.len()).rev() {
            let [r0, g0, b0] = a.colors()[i].map(f64::from);
            let [r1, g1, b1] = b.colors()[i].map(f64::from);
            let y0 = 0.2126 * r0 + 0.7152 * g0 + 0.0722 * b0;
            let y1 = 0.2126 * r1 + 0.7152 * g1 + 0.0722 * b1;
            sy += (y0 - y1).powi(2);
        }
        let oracle = 10.0 * (255.0f64.powi(2) / (sy / a.len() as f64)).log10();
        assert!((q.psnr_y - oracle).abs() < 1e-9);
    }

    #[test]
    fn psnr_symmetric_and_weighted() {
        let (a, b) = random_pair(3, 50);
        let ab = psnr(&a, &b).unwrap();
        let ba = psnr(&b, &a).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(ab.psnr_yuv, (6.0 * ab.psnr_y + ab.psnr_u + ab.psnr_v) / 8.0);
    }

    #[test]
    fn merge_averages_duplicates() {
        let f = VoxelizedFrame::from_points_merging(
            vec![[1, 1, 1], [1, 1, 1]],
            vec![[0, 0, 0], [2, 2, 2]],
            4,
        )
        .unwrap();
        assert_eq!(f.coords(), &[[1, 1, 1]]);
        assert_eq!(f.colors(), &[[1, 1, 1]]);
    }

    #[test]
    fn merge_rounds_half_to_even() {
        let f = VoxelizedFrame::from_points_merging(
            vec![[0, 0, 0], [0, 0, 0]],
            vec![[0, 1, 2], [1, 2, 3]],
            4,
        )
        .unwrap();
        // 0.5 -> 0, 1.5 -> 2, 2.5 -> 2
        assert_eq!(f.colors(), &[[0, 2, 2]]);
    }

    #[test]
    fn frame_rejects_out_of_range() {
        assert!(VoxelizedFrame::new(vec![[16, 0, 0]], vec![[0; 3]], 4).is_err());
        assert!(VoxelizedFrame::new(vec![[-1, 0, 0]], vec![[0; 3]], 4).is_err());
        assert!(VoxelizedFrame::new(vec![[0, 0, 0]], vec![], 4).is_err());
    }

    #[test]
    fn sequence_requires_shared_depth() {
        let a = VoxelizedFrame::empty(4);
        let b = VoxelizedFrame::empty(5);
        assert!(FrameSequence::new("s", vec![a, b]).is_err());
    }

    #[test]
    fn distortion_norm_three_four_five() {
        let a = VoxelizedFrame::new(vec![[0, 0, 0]], vec![[10, 10, 10]], 4).unwrap();
        let b = VoxelizedFrame::new(vec![[0, 0, 0]], vec![[13, 14, 10]], 4).unwrap();
        assert_eq!(distortion_norms(&a, &b).unwrap(), vec![5.0]);
    }
}
