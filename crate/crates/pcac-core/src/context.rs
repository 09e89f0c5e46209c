//! Spatiotemporal Gaussian prior over latent elements.
//!
//! Each latent row gets a mean and scale per channel from two paths: a
//! masked convolution over already-coded rows of the same frame, and a plain
//! convolution over the previous frame's latent gathered onto the current
//! coordinates. Coding uses [`SequentialPredictor`], which evaluates one row
//! at a time with the same accumulation order as the full-tensor pass.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use crate::autodiff::{accumulate_row, CoordIndex, KernelMap, Mask, SparseTensor, Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian;
use crate::network::{CodecModel, LatentTensor, ALPHABET_BOUND, LATENT_STRIDE};
use crate::pointcloud::Coord;
use crate::range_coder::{ModelProvider, SymbolModel};

/// Means are snapped to multiples of `1 / MU_GRID`.
pub const MU_GRID: f64 = 256.0;
pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 256.0;
pub const SIGMA_LEVELS: usize = 64;
/// Smallest probability any symbol is given before renormalization.
pub const PMF_FLOOR: f64 = 1.0 / 65536.0;

/// The geometric scale grid, `SIGMA_MIN` to `SIGMA_MAX` inclusive.
pub fn sigma_grid() -> &'static [f64; SIGMA_LEVELS] {
    static GRID: OnceLock<[f64; SIGMA_LEVELS]> = OnceLock::new();
    GRID.get_or_init(|| {
        let lo = libm::log(SIGMA_MIN);
        let step = (libm::log(SIGMA_MAX) - lo) / (SIGMA_LEVELS - 1) as f64;
        let mut g = [0.0; SIGMA_LEVELS];
        for (i, v) in g.iter_mut().enumerate() {
            *v = libm::exp(lo + step * i as f64);
        }
        g[0] = SIGMA_MIN;
        g[SIGMA_LEVELS - 1] = SIGMA_MAX;
        g
    })
}

/// Grid index and value of the snapped mean. Means beyond the alphabet are
/// clamped to it first.
pub fn snap_mu(mu: f64) -> (i32, f64) {
    let a = f64::from(ALPHABET_BOUND);
    let m = if mu.is_nan() { 0.0 } else { mu.clamp(-a, a) };
    let idx = (m * MU_GRID).round_ties_even() as i32;
    (idx, f64::from(idx) / MU_GRID)
}

/// Grid index and value of the snapped scale (nearest level in log space).
pub fn snap_sigma(sigma: f64) -> (u8, f64) {
    let lo = libm::log(SIGMA_MIN);
    let step = (libm::log(SIGMA_MAX) - lo) / (SIGMA_LEVELS - 1) as f64;
    let s = if sigma.is_nan() { SIGMA_MIN } else { sigma.clamp(SIGMA_MIN, SIGMA_MAX) };
    let idx = ((libm::log(s) - lo) / step).round().clamp(0.0, (SIGMA_LEVELS - 1) as f64) as u8;
    (idx, sigma_grid()[idx as usize])
}

/// Per-element Gaussian parameters on their coding grids.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    mu_index: Vec<i32>,
    sigma_index: Vec<u8>,
}

impl GaussianParams {
    /// Snaps raw network outputs onto the grids.
    pub fn snapped(raw_mu: &[f64], raw_sigma: &[f64]) -> Self {
        let (mu_index, mu) = raw_mu.iter().map(|&m| snap_mu(m)).unzip();
        let (sigma_index, sigma) = raw_sigma.iter().map(|&s| snap_sigma(s)).unzip();
        Self {
            mu,
            sigma,
            mu_index,
            sigma_index,
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Grid indices of element `i`, the key of its symbol table.
    pub fn key(&self, i: usize) -> (i32, u8) {
        (self.mu_index[i], self.sigma_index[i])
    }
}

/// Kernel maps of the context network on one latent coordinate set.
#[derive(Clone, Debug)]
pub struct LatentMaps {
    coords: Arc<Vec<Coord>>,
    ar: Arc<KernelMap>,
    temporal: Arc<KernelMap>,
    point: Arc<KernelMap>,
    ar_rows: Arc<Vec<Vec<(u32, u32)>>>,
}

impl LatentMaps {
    /// `coords` must be canonical (sorted, unique).
    pub fn new(coords: &[Coord], stride: i32, context_kernel: usize) -> Self {
        let ar = KernelMap::conv(coords, stride, coords, context_kernel, Mask::CausalStrict);
        let ar_rows = ar.by_output_row();
        debug_assert!(ar_rows
            .iter()
            .enumerate()
            .all(|(o, taps)| taps.iter().all(|&(_, i)| (i as usize) < o)));
        Self {
            coords: Arc::new(coords.to_vec()),
            temporal: Arc::new(KernelMap::conv(coords, stride, coords, 3, Mask::Full)),
            point: Arc::new(KernelMap::identity(coords.len())),
            ar: Arc::new(ar),
            ar_rows: Arc::new(ar_rows),
        }
    }

    pub fn coords(&self) -> &Arc<Vec<Coord>> {
        &self.coords
    }

    pub fn rows(&self) -> usize {
        self.coords.len()
    }
}

/// Gathers the previous latent onto `coords` by exact coordinate match; rows
/// without a match, or every row when there is no previous latent, are zero.
pub fn temporal_align(
    previous: Option<&LatentTensor>,
    coords: &[Coord],
    channels: usize,
) -> Result<SparseTensor> {
    let mut feats = vec![0.0; coords.len() * channels];
    if let Some(prev) = previous {
        if prev.channels != channels {
            return Err(Error::Contract(format!(
                "previous latent has {} channels, current {channels}",
                prev.channels
            )));
        }
        let index = CoordIndex::new(&prev.coords);
        for (row, c) in coords.iter().enumerate() {
            if let Some(j) = index.get(c) {
                feats[row * channels..(row + 1) * channels].copy_from_slice(prev.row(j));
            }
        }
    }
    SparseTensor::new(coords.to_vec(), feats, channels, LATENT_STRIDE)
}

/// Context network on a tape. Returns raw `(mu, sigma)` with
/// `sigma = min(softplus(.) + SIGMA_MIN, SIGMA_MAX)`, before grid snapping.
pub fn context_graph(
    model: &CodecModel,
    tape: &mut Tape,
    maps: &LatentMaps,
    current: Var,
    temporal: Var,
) -> Result<(Var, Var)> {
    let (p, ids) = (model.params(), model.ids());
    let l = model.latent_channels();
    let ar = tape.conv(p, current, &maps.ar, ids.ctx_ar.w, Some(ids.ctx_ar.b))?;
    let ar = tape.relu(ar);
    let tp = tape.conv(p, temporal, &maps.temporal, ids.ctx_temporal.w, Some(ids.ctx_temporal.b))?;
    let tp = tape.relu(tp);
    let h = tape.concat(ar, tp)?;
    let h = tape.conv(p, h, &maps.point, ids.ctx_mix.w, Some(ids.ctx_mix.b))?;
    let h = tape.relu(h);
    let o = tape.conv(p, h, &maps.point, ids.ctx_out.w, Some(ids.ctx_out.b))?;
    let mu = tape.columns(o, 0, l)?;
    let raw = tape.columns(o, l, l)?;
    let sigma = tape.softplus_shift(raw, SIGMA_MIN, SIGMA_MAX);
    Ok((mu, sigma))
}

fn check_inputs(current: &LatentTensor, temporal: &SparseTensor, model: &CodecModel) -> Result<()> {
    let l = model.latent_channels();
    if current.channels != l || temporal.channels() != l {
        return Err(Error::Contract(format!(
            "context model expects {l} channels, got current {} and temporal {}",
            current.channels,
            temporal.channels()
        )));
    }
    if temporal.coords() != current.coords.as_slice() {
        return Err(Error::Contract(
            "temporal context is not aligned to the current coordinates".into(),
        ));
    }
    Ok(())
}

/// Full-tensor evaluation without snapping; `current` need not be quantized.
pub fn predict_raw(
    current: &LatentTensor,
    temporal: &SparseTensor,
    model: &CodecModel,
    maps: &LatentMaps,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_inputs(current, temporal, model)?;
    if maps.coords.as_slice() != current.coords.as_slice() {
        return Err(Error::Contract("kernel maps built for other coordinates".into()));
    }
    let l = model.latent_channels();
    let mut tape = Tape::new();
    let cur = tape.leaf(current.rows(), l, current.values.clone())?;
    let tmp = tape.leaf(temporal.len(), l, temporal.features().to_vec())?;
    let (mu, sigma) = context_graph(model, &mut tape, maps, cur, tmp)?;
    Ok((tape.value(mu).to_vec(), tape.value(sigma).to_vec()))
}

/// Gaussian parameters for every element of a quantized latent at once.
pub fn predict_params(
    current: &LatentTensor,
    temporal: &SparseTensor,
    model: &CodecModel,
) -> Result<GaussianParams> {
    if !current.quantized {
        return Err(Error::Contract("context model needs a quantized latent".into()));
    }
    let maps = LatentMaps::new(&current.coords, LATENT_STRIDE, model.architecture().context_kernel);
    let (mu, sigma) = predict_raw(current, temporal, model, &maps)?;
    Ok(GaussianParams::snapped(&mu, &sigma))
}

/// Row-at-a-time evaluation of the context network. Row `i` may be predicted
/// once rows `0..i` have been supplied through [`set_row`](Self::set_row).
#[derive(Debug)]
pub struct SequentialPredictor<'m> {
    model: &'m CodecModel,
    maps: LatentMaps,
    temporal: Vec<f64>,
    decoded: Vec<f64>,
    filled: usize,
    channels: usize,
}

impl<'m> SequentialPredictor<'m> {
    pub fn new(model: &'m CodecModel, maps: LatentMaps, temporal: &SparseTensor) -> Result<Self> {
        let l = model.latent_channels();
        if temporal.channels() != l || temporal.coords() != maps.coords.as_slice() {
            return Err(Error::Contract(
                "temporal context is not aligned to the current coordinates".into(),
            ));
        }
        // the temporal path does not depend on the current frame
        let ids = model.ids();
        let mut tape = Tape::new();
        let t = tape.leaf(temporal.len(), l, temporal.features().to_vec())?;
        let t = tape.conv(
            model.params(),
            t,
            &maps.temporal,
            ids.ctx_temporal.w,
            Some(ids.ctx_temporal.b),
        )?;
        let t = tape.relu(t);
        let rows = maps.rows();
        Ok(Self {
            model,
            temporal: tape.value(t).to_vec(),
            decoded: vec![0.0; rows * l],
            maps,
            filled: 0,
            channels: l,
        })
    }

    pub fn rows(&self) -> usize {
        self.maps.rows()
    }

    /// Rows supplied so far.
    pub fn filled(&self) -> usize {
        self.filled
    }

    /// Raw `(mu, sigma)` of row `row`, bit-identical to the same row of
    /// [`predict_raw`].
    pub fn predict_row(&self, row: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if row > self.filled || row >= self.rows() {
            return Err(Error::Contract(format!(
                "row {row} requested with {} rows decoded",
                self.filled
            )));
        }
        let l = self.channels;
        let (p, ids) = (self.model.params(), self.model.ids());

        let mut ar = p.get(ids.ctx_ar.b).values().to_vec();
        let w = p.get(ids.ctx_ar.w).values();
        for &(k, j) in &self.maps.ar_rows[row] {
            let (k, j) = (k as usize, j as usize);
            accumulate_row(
                &mut ar,
                &self.decoded[j * l..(j + 1) * l],
                &w[k * l * l..(k + 1) * l * l],
            );
        }
        relu(&mut ar);
        ar.extend_from_slice(&self.temporal[row * l..(row + 1) * l]);

        let mut h = p.get(ids.ctx_mix.b).values().to_vec();
        accumulate_row(&mut h, &ar, p.get(ids.ctx_mix.w).values());
        relu(&mut h);
        let mut o = p.get(ids.ctx_out.b).values().to_vec();
        accumulate_row(&mut o, &h, p.get(ids.ctx_out.w).values());

        let sigma = o[l..]
            .iter()
            .map(|&v| (gaussian::softplus(v) + SIGMA_MIN).min(SIGMA_MAX))
            .collect();
        o.truncate(l);
        Ok((o, sigma))
    }

    /// Supplies the decoded values of the next row.
    pub fn set_row(&mut self, row: usize, values: &[f64]) -> Result<()> {
        if row != self.filled || values.len() != self.channels {
            return Err(Error::Contract(format!(
                "expected row {} with {} values",
                self.filled, self.channels
            )));
        }
        let l = self.channels;
        self.decoded[row * l..(row + 1) * l].copy_from_slice(values);
        self.filled += 1;
        Ok(())
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        *x = if *x > 0.0 { *x } else { 0.0 };
    }
}

/// Unit-bin Gaussian masses over `[-A, A]`, the two end symbols absorbing the
/// tails. No flooring.
pub fn gaussian_pmf_unfloored(mu: f64, sigma: f64) -> Vec<f64> {
    let a = ALPHABET_BOUND;
    (-a..=a)
        .map(|s| {
            let s_f = f64::from(s);
            if s == -a {
                gaussian::cdf((s_f + 0.5 - mu) / sigma)
            } else if s == a {
                gaussian::upper_tail((s_f - 0.5 - mu) / sigma)
            } else {
                gaussian::bin_mass(s_f, mu, sigma)
            }
        })
        .collect()
}

/// [`gaussian_pmf_unfloored`] with every entry raised to at least
/// [`PMF_FLOOR`], then renormalized.
pub fn gaussian_pmf(mu: f64, sigma: f64) -> Vec<f64> {
    let mut p = gaussian_pmf_unfloored(mu, sigma);
    for v in p.iter_mut() {
        *v = v.max(PMF_FLOOR);
    }
    let total: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= total;
    }
    p
}

/// Probability of one symbol under the floored, renormalized pmf.
pub fn discretized_gaussian_pmf(symbol: i32, mu: f64, sigma: f64) -> f64 {
    if !(-ALPHABET_BOUND..=ALPHABET_BOUND).contains(&symbol) {
        return 0.0;
    }
    gaussian_pmf(mu, sigma)[(symbol + ALPHABET_BOUND) as usize]
}

/// Coder table for snapped `(mu, sigma)`.
pub fn build_symbol_model(mu: f64, sigma: f64) -> SymbolModel {
    SymbolModel::from_pmf(-ALPHABET_BOUND, &gaussian_pmf(mu, sigma))
        .expect("a floored pmf always fits a 16-bit table")
}

struct CachedModel {
    table: SymbolModel,
    pmf: Vec<f64>,
}

/// Symbol tables keyed by grid indices.
#[derive(Default)]
pub struct SymbolModelCache {
    entries: HashMap<(i32, u8), CachedModel>,
}

impl SymbolModelCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn entry(&mut self, key: (i32, u8)) -> &CachedModel {
        self.entries.entry(key).or_insert_with(|| {
            let mu = f64::from(key.0) / MU_GRID;
            let sigma = sigma_grid()[key.1 as usize];
            let pmf = gaussian_pmf(mu, sigma);
            let table = SymbolModel::from_pmf(-ALPHABET_BOUND, &pmf)
                .expect("a floored pmf always fits a 16-bit table");
            CachedModel { table, pmf }
        })
    }

    pub fn get(&mut self, key: (i32, u8)) -> &SymbolModel {
        &self.entry(key).table
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Drives the range coder from the sequential predictor: rows in canonical
/// order, channels innermost. Also accumulates the model cross-entropy of the
/// symbols seen.
pub struct ContextProvider<'m> {
    predictor: SequentialPredictor<'m>,
    cache: SymbolModelCache,
    row: usize,
    channel: usize,
    keys: Vec<(i32, u8)>,
    row_values: Vec<f64>,
    cross_entropy_bits: f64,
    params: Option<(Vec<f64>, Vec<f64>)>,
    record: bool,
}

impl<'m> ContextProvider<'m> {
    pub fn new(predictor: SequentialPredictor<'m>) -> Self {
        Self {
            predictor,
            cache: SymbolModelCache::new(),
            row: 0,
            channel: 0,
            keys: Vec::new(),
            row_values: Vec::new(),
            cross_entropy_bits: 0.0,
            params: None,
            record: false,
        }
    }

    /// Also keep the snapped `(mu, sigma)` of every element.
    pub fn recording(mut self) -> Self {
        self.record = true;
        self.params = Some((Vec::new(), Vec::new()));
        self
    }

    /// `sum -log2 p(symbol)` under the floored pmf, over pushed symbols.
    pub fn cross_entropy_bits(&self) -> f64 {
        self.cross_entropy_bits
    }

    /// Snapped parameters seen so far when recording.
    pub fn recorded_params(&self) -> Option<(&[f64], &[f64])> {
        self.params.as_ref().map(|(m, s)| (m.as_slice(), s.as_slice()))
    }

    pub fn decoded_values(&self) -> &[f64] {
        &self.predictor.decoded
    }

    fn start_row(&mut self) {
        let (mu, sigma) = self
            .predictor
            .predict_row(self.row)
            .expect("rows are supplied in order");
        self.keys.clear();
        for (m, s) in mu.iter().zip(&sigma) {
            let (mi, mv) = snap_mu(*m);
            let (si, sv) = snap_sigma(*s);
            self.keys.push((mi, si));
            if let Some((pm, ps)) = self.params.as_mut() {
                pm.push(mv);
                ps.push(sv);
            }
        }
        self.row_values.clear();
    }
}

impl ModelProvider for ContextProvider<'_> {
    fn next_model(&mut self) -> &SymbolModel {
        if self.channel == 0 && self.keys.is_empty() {
            self.start_row();
        }
        let key = self.keys[self.channel];
        self.cache.get(key)
    }

    fn push_symbol(&mut self, symbol: i32) {
        let key = self.keys[self.channel];
        let p = self.cache.entry(key).pmf[(symbol + ALPHABET_BOUND) as usize];
        self.cross_entropy_bits -= p.log2();
        self.row_values.push(f64::from(symbol));
        self.channel += 1;
        if self.channel == self.predictor.channels {
            let values = std::mem::take(&mut self.row_values);
            self.predictor
                .set_row(self.row, &values)
                .expect("rows are supplied in order");
            self.row_values = values;
            self.row += 1;
            self.channel = 0;
            self.keys.clear();
        }
    }
}
