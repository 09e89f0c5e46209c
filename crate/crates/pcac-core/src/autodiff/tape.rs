//! Reverse-mode tape over row-major feature matrices.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and `backward` simply walks it in reverse.

use std::sync::Arc;

use super::param::{ParamId, ParamStore};
use super::sparse::{accumulate_row, KernelMap};
use crate::error::{Error, Result};
use crate::gaussian;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        map: Arc<KernelMap>,
        weight: ParamId,
        bias: Option<ParamId>,
    },
    Relu(Var, Vec<bool>),
    Add(Var, Var),
    AddConst(Var),
    Concat(Var, Var),
    Columns { input: Var, start: usize },
    SoftplusShift { input: Var, max: f64 },
    Scale(Var, f64),
    Sum(Var),
    Mse { pred: Var, target: Vec<f64> },
    GaussianBits { x: Var, mu: Var, sigma: Var },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Ordered record of differentiable operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen_relu: Option<(Vec<bool>, usize)>,
}

/// Gradients of every node after a backward pass.
#[derive(Debug)]
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGrads {
    /// Gradient with respect to a node's value, if the node was reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input matrix.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(Error::Shape(format!(
                "leaf of {rows}x{cols} given {} values",
                value.len()
            )));
        }
        Ok(self.push(rows, cols, value, Op::Leaf))
    }

    /// Sparse convolution driven by a kernel map; weights are
    /// `[kernel volume, c_in, c_out]`, bias `[c_out]`.
    pub fn conv(
        &mut self,
        params: &ParamStore,
        input: Var,
        map: &Arc<KernelMap>,
        weight: ParamId,
        bias: Option<ParamId>,
    ) -> Result<Var> {
        let x = &self.nodes[input.0];
        let w = params.get(weight);
        let shape = w.shape();
        if shape.len() != 3 || shape[0] != map.volume() || shape[1] != x.cols {
            return Err(Error::Shape(format!(
                "conv weight '{}' has shape {:?}, input has {} channels, kernel volume {}",
                w.name(),
                shape,
                x.cols,
                map.volume()
            )));
        }
        if x.rows != map.in_rows() {
            return Err(Error::Shape(format!(
                "kernel map expects {} input rows, got {}",
                map.in_rows(),
                x.rows
            )));
        }
        let (cin, cout) = (shape[1], shape[2]);
        let rows = map.out_rows();
        let mut out = vec![0.0; rows * cout];
        if let Some(b) = bias {
            let b = params.get(b).values();
            if b.len() != cout {
                return Err(Error::Shape(format!("bias has {} entries, want {cout}", b.len())));
            }
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(b);
            }
        }
        let wv = w.values();
        for k in 0..map.volume() {
            let wk = &wv[k * cin * cout..(k + 1) * cin * cout];
            for &(i, o) in map.pairs(k) {
                let (i, o) = (i as usize, o as usize);
                accumulate_row(
                    &mut out[o * cout..(o + 1) * cout],
                    &x.value[i * cin..(i + 1) * cin],
                    wk,
                );
            }
        }
        Ok(self.push(
            rows,
            cout,
            out,
            Op::Conv {
                input,
                map: Arc::clone(map),
                weight,
                bias,
            },
        ))
    }

    /// Tape whose ReLUs use a fixed activation pattern instead of the sign of
    /// their inputs. Used for finite-difference checks next to a kink.
    pub fn with_relu_pattern(pattern: Vec<bool>) -> Self {
        Self {
            nodes: Vec::new(),
            frozen_relu: Some((pattern, 0)),
        }
    }

    /// Concatenated activation masks of every ReLU recorded so far.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(_, mask) = &n.op {
                out.extend_from_slice(mask);
            }
        }
        out
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let mask: Vec<bool> = match &mut self.frozen_relu {
            Some((pattern, cursor)) => {
                let end = (*cursor + n.value.len()).min(pattern.len());
                let mut m = pattern[*cursor..end].to_vec();
                m.resize(n.value.len(), false);
                *cursor = end;
                m
            }
            None => n.value.iter().map(|&v| v > 0.0).collect(),
        };
        let value = n
            .value
            .iter()
            .zip(&mask)
            .map(|(&v, &on)| if on { v } else { 0.0 })
            .collect();
        let (r, c) = (n.rows, n.cols);
        self.push(r, c, value, Op::Relu(x, mask))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if (na.rows, na.cols) != (nb.rows, nb.cols) {
            return Err(Error::Shape(format!(
                "add of {}x{} and {}x{}",
                na.rows, na.cols, nb.rows, nb.cols
            )));
        }
        let value = na.value.iter().zip(&nb.value).map(|(x, y)| x + y).collect();
        let (r, c) = (na.rows, na.cols);
        Ok(self.push(r, c, value, Op::Add(a, b)))
    }

    /// Adds a constant matrix; gradients pass straight through to `x`.
    pub fn add_const(&mut self, x: Var, constant: &[f64]) -> Result<Var> {
        let n = &self.nodes[x.0];
        if constant.len() != n.value.len() {
            return Err(Error::Shape("constant does not match operand".into()));
        }
        let value = n.value.iter().zip(constant).map(|(a, b)| a + b).collect();
        let (r, c) = (n.rows, n.cols);
        Ok(self.push(r, c, value, Op::AddConst(x)))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.rows != nb.rows {
            return Err(Error::Shape(format!("concat of {} and {} rows", na.rows, nb.rows)));
        }
        let cols = na.cols + nb.cols;
        let mut value = Vec::with_capacity(na.rows * cols);
        for r in 0..na.rows {
            value.extend_from_slice(&na.value[r * na.cols..(r + 1) * na.cols]);
            value.extend_from_slice(&nb.value[r * nb.cols..(r + 1) * nb.cols]);
        }
        let rows = na.rows;
        Ok(self.push(rows, cols, value, Op::Concat(a, b)))
    }

    /// Columns `start .. start + len`.
    pub fn columns(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = &self.nodes[x.0];
        if start + len > n.cols {
            return Err(Error::Shape(format!(
                "columns {start}..{} of a {}-column matrix",
                start + len,
                n.cols
            )));
        }
        let mut value = Vec::with_capacity(n.rows * len);
        for r in 0..n.rows {
            value.extend_from_slice(&n.value[r * n.cols + start..r * n.cols + start + len]);
        }
        let rows = n.rows;
        Ok(self.push(rows, len, value, Op::Columns { input: x, start }))
    }

    /// `min(softplus(x) + shift, max)`.
    pub fn softplus_shift(&mut self, x: Var, shift: f64, max: f64) -> Var {
        let n = &self.nodes[x.0];
        let value = n
            .value
            .iter()
            .map(|&v| (gaussian::softplus(v) + shift).min(max))
            .collect();
        let (r, c) = (n.rows, n.cols);
        self.push(r, c, value, Op::SoftplusShift { input: x, max })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let n = &self.nodes[x.0];
        let value = n.value.iter().map(|v| v * factor).collect();
        let (r, c) = (n.rows, n.cols);
        self.push(r, c, value, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let n = &self.nodes[pred.0];
        if target.len() != n.value.len() {
            return Err(Error::Shape(format!(
                "mse target has {} values, prediction {}",
                target.len(),
                n.value.len()
            )));
        }
        let count = n.value.len().max(1) as f64;
        let s: f64 = n
            .value
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(
            1,
            1,
            vec![s / count],
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    /// Total bits `sum_i -log2 P(bin centred on x_i | mu_i, sigma_i)`.
    pub fn gaussian_bits(&mut self, x: Var, mu: Var, sigma: Var) -> Result<Var> {
        let (nx, nm, ns) = (&self.nodes[x.0], &self.nodes[mu.0], &self.nodes[sigma.0]);
        if nx.value.len() != nm.value.len() || nx.value.len() != ns.value.len() {
            return Err(Error::Shape("gaussian_bits operands differ in size".into()));
        }
        let total = nx
            .value
            .iter()
            .zip(&nm.value)
            .zip(&ns.value)
            .map(|((&c, &m), &s)| gaussian::bin_bits_with_grad(c, m, s).0)
            .sum();
        Ok(self.push(1, 1, vec![total], Op::GaussianBits { x, mu, sigma }))
    }

    /// Reverse pass from a scalar `loss`, accumulating parameter gradients
    /// into `params`.
    pub fn backward(&self, loss: Var, params: &mut ParamStore) -> Result<NodeGrads> {
        let n = &self.nodes[loss.0];
        if n.rows * n.cols != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                n.rows, n.cols
            )));
        }
        self.backward_with_seed(loss, &[1.0], params)
    }

    /// Vector-Jacobian product: reverse pass seeded with `seed` at `output`.
    pub fn backward_with_seed(
        &self,
        output: Var,
        seed: &[f64],
        params: &mut ParamStore,
    ) -> Result<NodeGrads> {
        if seed.len() != self.nodes[output.0].value.len() {
            return Err(Error::Shape("seed does not match output".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.to_vec());

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Conv {
                    input,
                    map,
                    weight,
                    bias,
                } => {
                    let x = &self.nodes[input.0];
                    let cout = node.cols;
                    let cin = x.cols;
                    if let Some(b) = bias {
                        let gb = params.get_mut(*b).grad_mut();
                        for row in g.chunks_exact(cout) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                    let gx = slot(&mut grads, *input, x.value.len());
                    let (wv, gw) = params.get_mut(*weight).values_and_grad_mut();
                    for k in 0..map.volume() {
                        let base = k * cin * cout;
                        for &(i, o) in map.pairs(k) {
                            let (i, o) = (i as usize, o as usize);
                            let go = &g[o * cout..(o + 1) * cout];
                            if go.iter().all(|&v| v == 0.0) {
                                continue;
                            }
                            let xi = &x.value[i * cin..(i + 1) * cin];
                            let gxi = &mut gx[i * cin..(i + 1) * cin];
                            for ci in 0..cin {
                                let wr = &wv[base + ci * cout..base + (ci + 1) * cout];
                                let gwr = &mut gw[base + ci * cout..base + (ci + 1) * cout];
                                let xv = xi[ci];
                                let mut acc = 0.0;
                                for ((w, gwv), gv) in wr.iter().zip(gwr.iter_mut()).zip(go) {
                                    acc += w * gv;
                                    *gwv += xv * gv;
                                }
                                gxi[ci] += acc;
                            }
                        }
                    }
                }
                Op::Relu(x, mask) => {
                    let len = self.nodes[x.0].value.len();
                    let gx = slot(&mut grads, *x, len);
                    for ((a, &on), gv) in gx.iter_mut().zip(mask).zip(&g) {
                        if on {
                            *a += gv;
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        let gv = slot(&mut grads, *v, g.len());
                        add_into(gv, &g);
                    }
                }
                Op::AddConst(x) => {
                    let gx = slot(&mut grads, *x, g.len());
                    add_into(gx, &g);
                }
                Op::Concat(a, b) => {
                    let (ca, cb) = (self.nodes[a.0].cols, self.nodes[b.0].cols);
                    let rows = node.rows;
                    {
                        let ga = slot(&mut grads, *a, rows * ca);
                        for r in 0..rows {
                            add_into(
                                &mut ga[r * ca..(r + 1) * ca],
                                &g[r * (ca + cb)..r * (ca + cb) + ca],
                            );
                        }
                    }
                    let gb = slot(&mut grads, *b, rows * cb);
                    for r in 0..rows {
                        add_into(
                            &mut gb[r * cb..(r + 1) * cb],
                            &g[r * (ca + cb) + ca..(r + 1) * (ca + cb)],
                        );
                    }
                }
                Op::Columns { input, start } => {
                    let cx = self.nodes[input.0].cols;
                    let len = node.cols;
                    let gx = slot(&mut grads, *input, node.rows * cx);
                    for r in 0..node.rows {
                        add_into(
                            &mut gx[r * cx + start..r * cx + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
                Op::SoftplusShift { input, max } => {
                    let xv = &self.nodes[input.0].value;
                    let gx = slot(&mut grads, *input, xv.len());
                    for (((a, &x), &y), gv) in gx.iter_mut().zip(xv).zip(&node.value).zip(&g) {
                        if y < *max {
                            *a += gv * gaussian::sigmoid(x);
                        }
                    }
                }
                Op::Scale(x, f) => {
                    let gx = slot(&mut grads, *x, g.len());
                    for (a, gv) in gx.iter_mut().zip(&g) {
                        *a += gv * f;
                    }
                }
                Op::Sum(x) => {
                    let len = self.nodes[x.0].value.len();
                    let gx = slot(&mut grads, *x, len);
                    for a in gx.iter_mut() {
                        *a += g[0];
                    }
                }
                Op::Mse { pred, target } => {
                    let pv = &self.nodes[pred.0].value;
                    let scale = 2.0 * g[0] / pv.len().max(1) as f64;
                    let gp = slot(&mut grads, *pred, pv.len());
                    for ((a, p), t) in gp.iter_mut().zip(pv).zip(target) {
                        *a += scale * (p - t);
                    }
                }
                Op::GaussianBits { x, mu, sigma } => {
                    let (xv, mv, sv) = (
                        &self.nodes[x.0].value,
                        &self.nodes[mu.0].value,
                        &self.nodes[sigma.0].value,
                    );
                    let n = xv.len();
                    let mut d = vec![[0.0f64; 3]; n];
                    for (i, di) in d.iter_mut().enumerate() {
                        let (_, gr) = gaussian::bin_bits_with_grad(xv[i], mv[i], sv[i]);
                        *di = gr.map(|v| v * g[0]);
                    }
                    for (k, v) in [x, mu, sigma].into_iter().enumerate() {
                        let gv = slot(&mut grads, *v, n);
                        for (a, di) in gv.iter_mut().zip(&d) {
                            *a += di[k];
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(NodeGrads { grads })
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::param::ParameterTensor;
    use crate::autodiff::sparse::{downsample_coords, Mask};
    use crate::pointcloud::Coord;

    fn random_coords(rng: &mut ChaCha8Rng, n: usize, extent: i32) -> Vec<Coord> {
        let mut set = std::collections::BTreeSet::new();
        while set.len() < n {
            set.insert([
                rng.gen_range(0..extent),
                rng.gen_range(0..extent),
                rng.gen_range(0..extent),
            ]);
        }
        set.into_iter().collect()
    }

    fn random_param(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        let v = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        store.push(ParameterTensor::new(name, shape, v).unwrap())
    }

    #[test]
    fn sum_of_parameters_has_unit_gradient() {
        let mut params = ParamStore::new();
        let w = params.push(ParameterTensor::new("w", vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        // x = one row of ones, k = 1 conv of 4 -> 1 channel == sum of weights
        let mut tape = Tape::new();
        let x = tape.leaf(1, 4, vec![1.0; 4]).unwrap();
        let map = Arc::new(KernelMap::identity(1));
        let y = tape.conv(&params, x, &map, w, None).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(w).grad(), &[1.0; 4]);
        // repeated backward accumulates
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(w).grad(), &[2.0; 4]);
    }

    #[test]
    fn zero_scaled_loss_has_zero_gradient() {
        let mut params = ParamStore::new();
        let w = params.push(ParameterTensor::new("w", vec![1, 2, 1], vec![0.5, -0.5]).unwrap());
        let mut tape = Tape::new();
        let x = tape.leaf(1, 2, vec![3.0, 4.0]).unwrap();
        let map = Arc::new(KernelMap::identity(1));
        let y = tape.conv(&params, x, &map, w, None).unwrap();
        let z = tape.scale(y, 0.0);
        let loss = tape.sum(z);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(w).grad(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut params = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.leaf(2, 1, vec![1.0, 2.0]).unwrap();
        assert!(matches!(tape.backward(x, &mut params), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_kernel_passes_features() {
        let mut params = ParamStore::new();
        let c = 3;
        let mut w = vec![0.0; c * c];
        for i in 0..c {
            w[i * c + i] = 1.0;
        }
        let w = params.push(ParameterTensor::new("w", vec![1, c, c], w).unwrap());
        let b = params.push_zeros("b", vec![c]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords = random_coords(&mut rng, 10, 8);
        let feats: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let map = Arc::new(KernelMap::conv(&coords, 1, &coords, 1, Mask::Full));
        let mut tape = Tape::new();
        let x = tape.leaf(10, c, feats.clone()).unwrap();
        let y = tape.conv(&params, x, &map, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), feats.as_slice());
    }

    /// Naive convolution: enumerate every (output, offset, input) triple.
    #[allow(clippy::too_many_arguments)]
    fn brute_force_conv(
        in_coords: &[Coord],
        feats: &[f64],
        cin: usize,
        out_coords: &[Coord],
        in_stride: i32,
        w: &[f64],
        b: &[f64],
        cout: usize,
    ) -> Vec<f64> {
        let mut out = Vec::new();
        for oc in out_coords {
            for co in 0..cout {
                let mut s = b[co];
                for (k, d) in crate::autodiff::sparse::kernel_offsets(3).iter().enumerate() {
                    for (i, ic) in in_coords.iter().enumerate() {
                        if (0..3).all(|a| ic[a] == oc[a] + d[a] * in_stride) {
                            for ci in 0..cin {
                                s += feats[i * cin + ci] * w[(k * cin + ci) * cout + co];
                            }
                        }
                    }
                }
                out.push(s);
            }
        }
        out
    }

    #[test]
    fn conv_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (stride_out, seed) in [(1, 0u64), (2, 1)] {
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
            let coords = random_coords(&mut rng2, 10, 4);
            let (cin, cout) = (2, 3);
            let feats: Vec<f64> = (0..coords.len() * cin).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut params = ParamStore::new();
            let w = random_param(&mut params, &mut rng, "w", vec![27, cin, cout]);
            let b = random_param(&mut params, &mut rng, "b", vec![cout]);
            let out_coords = if stride_out == 1 {
                coords.clone()
            } else {
                downsample_coords(&coords, 1)
            };
            let map = Arc::new(KernelMap::conv(&coords, 1, &out_coords, 3, Mask::Full));
            let mut tape = Tape::new();
            let x = tape.leaf(coords.len(), cin, feats.clone()).unwrap();
            let y = tape.conv(&params, x, &map, w, Some(b)).unwrap();
            let want = brute_force_conv(
                &coords,
                &feats,
                cin,
                &out_coords,
                1,
                params.get(w).values(),
                params.get(b).values(),
                cout,
            );
            for (a, e) in tape.value(y).iter().zip(&want) {
                assert!((a - e).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_strided_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..5 {
            let stride = 1 << (trial % 3);
            let fine: Vec<Coord> = random_coords(&mut rng, 30, 8)
                .into_iter()
                .map(|c| c.map(|v| v * stride))
                .collect();
            let coarse = downsample_coords(&fine, stride);
            let (cf, cc) = (3, 2);
            let mut params = ParamStore::new();
            let w = random_param(&mut params, &mut rng, "w", vec![27, cf, cc]);
            // transposed weights: [k][cc][cf]
            let wt: Vec<f64> = {
                let wv = params.get(w).values();
                let mut t = vec![0.0; 27 * cc * cf];
                for k in 0..27 {
                    for a in 0..cf {
                        for b in 0..cc {
                            t[(k * cc + b) * cf + a] = wv[(k * cf + a) * cc + b];
                        }
                    }
                }
                t
            };
            let wt = params.push(ParameterTensor::new("wt", vec![27, cc, cf], wt).unwrap());
            let x: Vec<f64> = (0..fine.len() * cf).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..coarse.len() * cc).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let down = Arc::new(KernelMap::conv(&fine, stride, &coarse, 3, Mask::Full));
            let up = Arc::new(KernelMap::transpose(&coarse, 2 * stride, &fine, 3));
            let mut tape = Tape::new();
            let xv = tape.leaf(fine.len(), cf, x.clone()).unwrap();
            let yv = tape.leaf(coarse.len(), cc, y.clone()).unwrap();
            let cx = tape.conv(&params, xv, &down, w, None).unwrap();
            let ty = tape.conv(&params, yv, &up, wt, None).unwrap();
            let lhs: f64 = tape.value(cx).iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(tape.value(ty)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");

            // and the recorded vjp of the conv equals the transpose conv
            let vjp = tape.backward_with_seed(cx, &y, &mut params).unwrap();
            for (a, b) in vjp.get(xv).unwrap().iter().zip(tape.value(ty)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vjp_adjoint_identity_for_pointwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamStore::new();
        let mut tape = Tape::new();
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let av = tape.leaf(4, 3, a.clone()).unwrap();
        let bv = tape.leaf(4, 2, b.clone()).unwrap();
        let cat = tape.concat(av, bv).unwrap();
        let cols = tape.columns(cat, 1, 3).unwrap();
        let seed: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = tape.backward_with_seed(cols, &seed, &mut params).unwrap();
        // <cols(x), y> = <x, vjp(y)> for the linear map (a, b) -> cols
        let lhs: f64 = tape.value(cols).iter().zip(&seed).map(|(p, q)| p * q).sum();
        let rhs: f64 = a.iter().zip(g.get(av).unwrap()).map(|(p, q)| p * q).sum::<f64>()
            + b.iter().zip(g.get(bv).unwrap()).map(|(p, q)| p * q).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let coords = random_coords(&mut rng, 12, 4);
        let n = coords.len();
        let mut params = ParamStore::new();
        let w1 = random_param(&mut params, &mut rng, "w1", vec![27, 2, 3]);
        let b1 = random_param(&mut params, &mut rng, "b1", vec![3]);
        let w2 = random_param(&mut params, &mut rng, "w2", vec![27, 3, 2]);
        let b2 = random_param(&mut params, &mut rng, "b2", vec![2]);
        let feats: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let map = Arc::new(KernelMap::conv(&coords, 1, &coords, 3, Mask::Full));

        let eval = |params: &ParamStore| -> (Tape, Var) {
            let mut t = Tape::new();
            let x = t.leaf(n, 2, feats.clone()).unwrap();
            let h = t.conv(params, x, &map, w1, Some(b1)).unwrap();
            let h = t.softplus_shift(h, 0.0, f64::INFINITY);
            let y = t.conv(params, h, &map, w2, Some(b2)).unwrap();
            let l = t.mse(y, &target).unwrap();
            (t, l)
        };
        let (tape, loss) = eval(&params);
        tape.backward(loss, &mut params).unwrap();

        let h = 1e-4;
        for id in params.ids().collect::<Vec<_>>() {
            for j in 0..params.get(id).len() {
                let analytic = params.get(id).grad()[j];
                let orig = params.get(id).values()[j];
                params.get_mut(id).values_mut()[j] = orig + h;
                let (t, l) = eval(&params);
                let up = t.scalar(l);
                params.get_mut(id).values_mut()[j] = orig - h;
                let (t, l) = eval(&params);
                let down = t.scalar(l);
                params.get_mut(id).values_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "{} [{j}]: {analytic} vs {numeric}", params.get(id).name());
            }
        }
    }
}
