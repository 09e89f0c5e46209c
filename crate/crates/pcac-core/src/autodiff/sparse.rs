//! Sparse coordinate tensors and the kernel maps that drive sparse convolution.
//!
//! A kernel map lists, per kernel offset, which input row feeds which output
//! row. Offsets are enumerated lexicographically (`dx` slowest) and every
//! convolution in the crate accumulates in that order, which is what makes
//! full-tensor and row-at-a-time evaluation bit-identical.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::pointcloud::Coord;

/// Coordinate list plus row-major features at a given voxel stride.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensor {
    coords: Vec<Coord>,
    features: Vec<f64>,
    channels: usize,
    stride: i32,
}

impl SparseTensor {
    pub fn new(coords: Vec<Coord>, features: Vec<f64>, channels: usize, stride: i32) -> Result<Self> {
        if stride <= 0 || stride & (stride - 1) != 0 {
            return Err(Error::Shape(format!("stride {stride} is not a power of two")));
        }
        if features.len() != coords.len() * channels {
            return Err(Error::Shape(format!(
                "{} features for {} coordinates x {} channels",
                features.len(),
                coords.len(),
                channels
            )));
        }
        if let Some(c) = coords.iter().find(|c| c.iter().any(|v| v.rem_euclid(stride) != 0)) {
            return Err(Error::InvariantViolation(format!(
                "coordinate {c:?} not aligned to stride {stride}"
            )));
        }
        let index = CoordIndex::new(&coords);
        if index.len() != coords.len() {
            return Err(Error::InvariantViolation("duplicate coordinates".into()));
        }
        Ok(Self {
            coords,
            features,
            channels,
            stride,
        })
    }

    pub fn zeros(coords: Vec<Coord>, channels: usize, stride: i32) -> Result<Self> {
        let n = coords.len() * channels;
        Self::new(coords, vec![0.0; n], channels, stride)
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub fn into_features(self) -> Vec<f64> {
        self.features
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> i32 {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }
}

/// Hash lookup from coordinate to row index.
#[derive(Clone, Debug, Default)]
pub struct CoordIndex {
    map: HashMap<Coord, u32>,
}

impl CoordIndex {
    pub fn new(coords: &[Coord]) -> Self {
        let mut map = HashMap::with_capacity(coords.len());
        for (i, c) in coords.iter().enumerate() {
            map.entry(*c).or_insert(i as u32);
        }
        Self { map }
    }

    pub fn get(&self, c: &Coord) -> Option<usize> {
        self.map.get(c).map(|&i| i as usize)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Parent coordinates one level coarser: `floor(c / (2 s)) * 2 s`, deduplicated
/// and sorted.
pub fn downsample_coords(coords: &[Coord], stride: i32) -> Vec<Coord> {
    let step = 2 * stride;
    let mut out: Vec<Coord> = coords
        .iter()
        .map(|c| c.map(|v| v.div_euclid(step) * step))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Kernel offsets `(dx, dy, dz)` of an odd kernel, lexicographic order.
pub fn kernel_offsets(kernel: usize) -> Vec<[i32; 3]> {
    assert!(kernel % 2 == 1, "kernel size must be odd");
    let r = (kernel / 2) as i32;
    let mut out = Vec::with_capacity(kernel.pow(3));
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// Which kernel taps a convolution may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    Full,
    /// Only offsets strictly before `(0, 0, 0)` in lexicographic order
    /// (centre excluded).
    CausalStrict,
}

impl Mask {
    pub fn allows(self, d: [i32; 3]) -> bool {
        match self {
            Mask::Full => true,
            Mask::CausalStrict => d < [0, 0, 0],
        }
    }
}

/// Rulebook for one sparse convolution: per kernel offset, the
/// `(input_row, output_row)` pairs in ascending output-row order.
#[derive(Clone, Debug)]
pub struct KernelMap {
    kernel: usize,
    in_rows: usize,
    out_rows: usize,
    pairs: Vec<Vec<(u32, u32)>>,
}

impl KernelMap {
    /// Forward convolution: output row `o` gathers input rows at
    /// `out_coords[o] + d * in_stride`.
    pub fn conv(
        in_coords: &[Coord],
        in_stride: i32,
        out_coords: &[Coord],
        kernel: usize,
        mask: Mask,
    ) -> Self {
        let index = CoordIndex::new(in_coords);
        let offsets = kernel_offsets(kernel);
        let pairs = offsets
            .iter()
            .map(|d| {
                if !mask.allows(*d) {
                    return Vec::new();
                }
                out_coords
                    .iter()
                    .enumerate()
                    .filter_map(|(o, c)| {
                        let n = [
                            c[0] + d[0] * in_stride,
                            c[1] + d[1] * in_stride,
                            c[2] + d[2] * in_stride,
                        ];
                        index.get(&n).map(|i| (i as u32, o as u32))
                    })
                    .collect()
            })
            .collect();
        Self {
            kernel,
            in_rows: in_coords.len(),
            out_rows: out_coords.len(),
            pairs,
        }
    }

    /// Transposed (upsampling) convolution, the adjoint of a stride-2
    /// [`KernelMap::conv`]: fine row `c` receives coarse row `o` whenever
    /// `c = o + d * fine_stride`.
    pub fn transpose(
        coarse_coords: &[Coord],
        coarse_stride: i32,
        fine_coords: &[Coord],
        kernel: usize,
    ) -> Self {
        let fine_stride = coarse_stride / 2;
        let index = CoordIndex::new(coarse_coords);
        let offsets = kernel_offsets(kernel);
        let pairs = offsets
            .iter()
            .map(|d| {
                fine_coords
                    .iter()
                    .enumerate()
                    .filter_map(|(f, c)| {
                        let o = [
                            c[0] - d[0] * fine_stride,
                            c[1] - d[1] * fine_stride,
                            c[2] - d[2] * fine_stride,
                        ];
                        if o.iter().any(|v| v.rem_euclid(coarse_stride) != 0) {
                            return None;
                        }
                        index.get(&o).map(|i| (i as u32, f as u32))
                    })
                    .collect()
            })
            .collect();
        Self {
            kernel,
            in_rows: coarse_coords.len(),
            out_rows: fine_coords.len(),
            pairs,
        }
    }

    /// Pointwise map for `k = 1` convolutions on a fixed coordinate set.
    pub fn identity(rows: usize) -> Self {
        Self {
            kernel: 1,
            in_rows: rows,
            out_rows: rows,
            pairs: vec![(0..rows as u32).map(|i| (i, i)).collect()],
        }
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn volume(&self) -> usize {
        self.kernel.pow(3)
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn out_rows(&self) -> usize {
        self.out_rows
    }

    pub fn pairs(&self, offset: usize) -> &[(u32, u32)] {
        &self.pairs[offset]
    }

    /// Row-major view: for every output row, its `(offset, input_row)` taps in
    /// ascending offset order.
    pub fn by_output_row(&self) -> Vec<Vec<(u32, u32)>> {
        let mut rows = vec![Vec::new(); self.out_rows];
        for (k, list) in self.pairs.iter().enumerate() {
            for &(i, o) in list {
                rows[o as usize].push((k as u32, i));
            }
        }
        rows
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}

/// `out += x * W` for one input row, channels ascending. Every convolution
/// path funnels through here so accumulation order is identical everywhere.
#[inline]
pub(crate) fn accumulate_row(out: &mut [f64], x: &[f64], w: &[f64]) {
    let cout = out.len();
    for (ci, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let wr = &w[ci * cout..(ci + 1) * cout];
        for (o, &wv) in out.iter_mut().zip(wr) {
            *o += xv * wv;
        }
    }
}
