//! Sparse-tensor layer operations recorded on a [`Tape`].

use std::sync::Arc;

use super::param::{ParamId, ParamStore};
use super::sparse::{downsample_coords, KernelMap, Mask, SparseTensor};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::pointcloud::Coord;

/// A tape variable together with the coordinates its rows live on.
#[derive(Clone, Debug)]
pub struct SparseVar {
    pub var: Var,
    pub coords: Arc<Vec<Coord>>,
    pub stride: i32,
}

impl SparseVar {
    pub fn input(tape: &mut Tape, t: &SparseTensor) -> Result<Self> {
        let var = tape.leaf(t.len(), t.channels(), t.features().to_vec())?;
        Ok(Self {
            var,
            coords: Arc::new(t.coords().to_vec()),
            stride: t.stride(),
        })
    }

    pub fn to_tensor(&self, tape: &Tape) -> Result<SparseTensor> {
        let (_, cols) = tape.shape(self.var);
        SparseTensor::new(
            self.coords.as_ref().clone(),
            tape.value(self.var).to_vec(),
            cols,
            self.stride,
        )
    }

    fn with(&self, var: Var) -> Self {
        Self {
            var,
            coords: Arc::clone(&self.coords),
            stride: self.stride,
        }
    }
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel.is_multiple_of(2) {
        return Err(Error::Shape(format!("kernel size {kernel} must be odd")));
    }
    Ok(())
}

/// Generalized sparse convolution with stride 1 (same coordinates) or 2
/// (parent coordinates, stride doubles).
pub fn sparse_conv(
    tape: &mut Tape,
    params: &ParamStore,
    input: &SparseVar,
    weight: ParamId,
    bias: Option<ParamId>,
    kernel: usize,
    stride: u32,
) -> Result<SparseVar> {
    check_kernel(kernel)?;
    let (coords, out_stride) = match stride {
        1 => (Arc::clone(&input.coords), input.stride),
        2 => (
            Arc::new(downsample_coords(&input.coords, input.stride)),
            input.stride * 2,
        ),
        s => return Err(Error::Shape(format!("unsupported conv stride {s}"))),
    };
    let map = Arc::new(KernelMap::conv(
        &input.coords,
        input.stride,
        &coords,
        kernel,
        Mask::Full,
    ));
    let var = tape.conv(params, input.var, &map, weight, bias)?;
    Ok(SparseVar {
        var,
        coords,
        stride: out_stride,
    })
}

/// Stride-2 transposed convolution onto a known finer coordinate set.
/// Targets without any coarse neighbour receive the bias only.
pub fn sparse_transpose_conv(
    tape: &mut Tape,
    params: &ParamStore,
    input: &SparseVar,
    weight: ParamId,
    bias: Option<ParamId>,
    kernel: usize,
    target_coords: Arc<Vec<Coord>>,
) -> Result<SparseVar> {
    check_kernel(kernel)?;
    if input.stride < 2 {
        return Err(Error::Shape("cannot upsample below stride 1".into()));
    }
    let fine = input.stride / 2;
    if let Some(c) = target_coords.iter().find(|c| c.iter().any(|v| v.rem_euclid(fine) != 0)) {
        return Err(Error::GeometryMismatch(format!(
            "target coordinate {c:?} not on stride {fine}"
        )));
    }
    let map = Arc::new(KernelMap::transpose(
        &input.coords,
        input.stride,
        &target_coords,
        kernel,
    ));
    let var = tape.conv(params, input.var, &map, weight, bias)?;
    Ok(SparseVar {
        var,
        coords: target_coords,
        stride: fine,
    })
}

/// Stride-1 convolution restricted to kernel taps strictly before the centre
/// in lexicographic order, so each output row sees only earlier rows.
pub fn masked_sparse_conv(
    tape: &mut Tape,
    params: &ParamStore,
    input: &SparseVar,
    weight: ParamId,
    bias: Option<ParamId>,
    kernel: usize,
) -> Result<SparseVar> {
    check_kernel(kernel)?;
    let map = Arc::new(KernelMap::conv(
        &input.coords,
        input.stride,
        &input.coords,
        kernel,
        Mask::CausalStrict,
    ));
    let var = tape.conv(params, input.var, &map, weight, bias)?;
    Ok(input.with(var))
}

pub fn sparse_relu(tape: &mut Tape, input: &SparseVar) -> SparseVar {
    let var = tape.relu(input.var);
    input.with(var)
}

/// Two stride-1 convolutions with a ReLU between them plus the identity skip.
pub struct ResBlockParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub fn residual_block(
    tape: &mut Tape,
    params: &ParamStore,
    input: &SparseVar,
    block: &ResBlockParams,
    map: &Arc<KernelMap>,
) -> Result<SparseVar> {
    let h = tape.conv(params, input.var, map, block.w1, Some(block.b1))?;
    let h = tape.relu(h);
    let h = tape.conv(params, h, map, block.w2, Some(block.b2))?;
    let out = tape.add(input.var, h)?;
    Ok(input.with(out))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::param::ParameterTensor;

    fn ones_param(store: &mut ParamStore, name: &str, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        store.push(ParameterTensor::new(name, shape, vec![1.0; n]).unwrap())
    }

    #[test]
    fn strided_conv_merges_to_one_parent() {
        let mut params = ParamStore::new();
        let w = ones_param(&mut params, "w", vec![27, 1, 1]);
        let mut tape = Tape::new();
        let t = SparseTensor::new(vec![[0, 0, 0], [1, 1, 1]], vec![1.0, 2.0], 1, 1).unwrap();
        let x = SparseVar::input(&mut tape, &t).unwrap();
        let y = sparse_conv(&mut tape, &params, &x, w, None, 3, 2).unwrap();
        assert_eq!(y.coords.as_slice(), &[[0, 0, 0]]);
        assert_eq!(y.stride, 2);
        assert_eq!(tape.value(y.var), &[3.0]);
    }

    #[test]
    fn transpose_broadcasts_coarse_feature_plus_bias() {
        let mut params = ParamStore::new();
        let w = ones_param(&mut params, "w", vec![27, 1, 1]);
        let b = params.push(ParameterTensor::new("b", vec![1], vec![0.25]).unwrap());
        let mut tape = Tape::new();
        let t = SparseTensor::new(vec![[0, 0, 0]], vec![2.0], 1, 2).unwrap();
        let x = SparseVar::input(&mut tape, &t).unwrap();
        let children: Vec<Coord> = (0..8).map(|i| [i >> 2 & 1, i >> 1 & 1, i & 1]).collect();
        let y = sparse_transpose_conv(&mut tape, &params, &x, w, Some(b), 3, Arc::new(children))
            .unwrap();
        assert_eq!(tape.value(y.var), &[2.25; 8]);
        assert_eq!(y.stride, 1);
    }

    #[test]
    fn transpose_to_empty_target() {
        let mut params = ParamStore::new();
        let w = ones_param(&mut params, "w", vec![27, 1, 1]);
        let mut tape = Tape::new();
        let t = SparseTensor::new(vec![[0, 0, 0]], vec![2.0], 1, 2).unwrap();
        let x = SparseVar::input(&mut tape, &t).unwrap();
        let y = sparse_transpose_conv(&mut tape, &params, &x, w, None, 3, Arc::new(vec![])).unwrap();
        assert!(tape.value(y.var).is_empty());
    }

    #[test]
    fn conv_then_transpose_restores_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let coords: Vec<Coord> = {
            let mut s = std::collections::BTreeSet::new();
            while s.len() < 40 {
                s.insert([rng.gen_range(0..16), rng.gen_range(0..16), rng.gen_range(0..16)]);
            }
            s.into_iter().collect()
        };
        let mut params = ParamStore::new();
        let w = ones_param(&mut params, "w", vec![27, 1, 1]);
        let mut tape = Tape::new();
        let t = SparseTensor::zeros(coords.clone(), 1, 1).unwrap();
        let x = SparseVar::input(&mut tape, &t).unwrap();
        let down = sparse_conv(&mut tape, &params, &x, w, None, 3, 2).unwrap();
        let up = sparse_transpose_conv(&mut tape, &params, &down, w, None, 3, Arc::clone(&x.coords))
            .unwrap();
        assert_eq!(up.coords.as_slice(), coords.as_slice());
    }

    #[test]
    fn masked_conv_first_element_sees_bias_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coords: Vec<Coord> = (0..20).map(|i| [i / 9, (i / 3) % 3, i % 3]).collect();
        let mut params = ParamStore::new();
        let n = 125 * 2 * 2;
        let w = params.push(
            ParameterTensor::new("w", vec![125, 2, 2], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
        );
        let b = params.push(ParameterTensor::new("b", vec![2], vec![0.5, -0.5]).unwrap());
        let feats: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = SparseVar::input(&mut tape, &SparseTensor::new(coords.clone(), feats, 2, 1).unwrap())
            .unwrap();
        let y = masked_sparse_conv(&mut tape, &params, &x, w, Some(b), 5).unwrap();
        assert_eq!(&tape.value(y.var)[..2], &[0.5, -0.5]);

        let zero = SparseVar::input(&mut tape, &SparseTensor::zeros(coords, 2, 1).unwrap()).unwrap();
        let z = masked_sparse_conv(&mut tape, &params, &zero, w, Some(b), 5).unwrap();
        assert!(tape.value(z.var).chunks(2).all(|r| r == [0.5, -0.5]));
    }

    #[test]
    fn even_kernel_is_rejected() {
        let mut params = ParamStore::new();
        let w = ones_param(&mut params, "w", vec![8, 1, 1]);
        let mut tape = Tape::new();
        let x = SparseVar::input(&mut tape, &SparseTensor::zeros(vec![[0, 0, 0]], 1, 1).unwrap())
            .unwrap();
        assert!(sparse_conv(&mut tape, &params, &x, w, None, 2, 1).is_err());
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut params = ParamStore::new();
        let w = ones_param(&mut params, "w", vec![27, 2, 1]);
        let mut tape = Tape::new();
        let x = SparseVar::input(&mut tape, &SparseTensor::zeros(vec![[0, 0, 0]], 3, 1).unwrap())
            .unwrap();
        assert!(matches!(
            sparse_conv(&mut tape, &params, &x, w, None, 3, 1),
            Err(Error::Shape(_))
        ));
    }
}
