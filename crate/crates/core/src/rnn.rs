//! GRU cells, dilated multi-layer wiring and the probability/phase heads.
//!
//! All trainable parameters live in one flat `Vec<f64>`; [`ParamLayout`]
//! records where each matrix and bias starts. The order is the checkpoint
//! declaration order: for every layer `W_g, W_r, W_h, W_in, b_g, b_r, b_h*,
//! b_in*`, then the probability head `U, c`, then (complex models only) the
//! phase head `V, d`.
//!
//! Layer `l` (0-based) has dilation `2^l`. At site `j` (0-based) layer 0
//! consumes its own state at `j - 1` and the one-hot spin `σ_{j-1}` (the zero
//! vector at `j = 0`); layer `l ≥ 1` consumes its own state at `j - 2^l` (zero
//! if that index is negative) and the output of layer `l - 1` at site `j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, sigmoid_scalar, MatRef, RngStream};

/// Ratio between dilations of consecutive layers.
pub const DILATION_BASE: usize = 2;
/// Width of the one-hot spin encoding fed to the first layer.
pub const SPIN_INPUT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    pub hidden: usize,
    pub n_sites: usize,
    /// Whether the phase head is present.
    pub complex: bool,
}

impl ModelShape {
    /// Deepest admissible stack for a chain of `n_sites`: `ceil(log2 N)`,
    /// but at least one layer.
    pub fn max_layers(n_sites: usize) -> usize {
        let mut depth = 0;
        while (1usize << depth) < n_sites {
            depth += 1;
        }
        depth.max(1)
    }

    /// Dilation of 0-based layer `layer`.
    pub fn dilation(layer: usize) -> usize {
        DILATION_BASE.pow(layer as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sites == 0 {
            return Err(Error::Config("chain must have at least one site".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one layer is required".into()));
        }
        let max = Self::max_layers(self.n_sites);
        if self.layers > max {
            return Err(Error::Config(format!(
                "{} layers exceed ceil(log2 N) = {max} for N = {}",
                self.layers, self.n_sites
            )));
        }
        Ok(())
    }

    /// Same network evaluated on a chain of a different length.
    pub fn with_sites(self, n_sites: usize) -> Result<Self> {
        let s = Self { n_sites, ..self };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellLayout {
    pub d_in: usize,
    pub w_g: usize,
    pub w_r: usize,
    pub w_h: usize,
    pub w_in: usize,
    pub b_g: usize,
    pub b_r: usize,
    pub b_h: usize,
    pub b_in: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub hidden: usize,
    pub cells: Vec<CellLayout>,
    pub u: usize,
    pub c: usize,
    pub v: Option<usize>,
    pub d: Option<usize>,
    pub len: usize,
}

impl ParamLayout {
    pub fn new(shape: &ModelShape) -> Self {
        let dh = shape.hidden;
        let mut off = 0;
        let mut cells = Vec::with_capacity(shape.layers);
        for l in 0..shape.layers {
            let d_in = if l == 0 { SPIN_INPUT } else { dh };
            let w_g = off;
            let w_r = w_g + dh * (dh + d_in);
            let w_h = w_r + dh * (dh + d_in);
            let w_in = w_h + dh * dh;
            let b_g = w_in + dh * d_in;
            let b_r = b_g + dh;
            let b_h = b_r + dh;
            let b_in = b_h + dh;
            let end = b_in + dh;
            cells.push(CellLayout {
                d_in,
                w_g,
                w_r,
                w_h,
                w_in,
                b_g,
                b_r,
                b_h,
                b_in,
                end,
            });
            off = end;
        }
        let u = off;
        let c = u + 2 * dh;
        off = c + 2;
        let (v, d) = if shape.complex {
            let v = off;
            let d = v + 2 * dh;
            off = d + 2;
            (Some(v), Some(d))
        } else {
            (None, None)
        };
        Self {
            hidden: dh,
            cells,
            u,
            c,
            v,
            d,
            len: off,
        }
    }

    /// Index range of all head parameters (`U, c` and, if present, `V, d`).
    pub fn head_range(&self) -> std::ops::Range<usize> {
        self.u..self.len
    }

    pub fn cell_range(&self, layer: usize) -> std::ops::Range<usize> {
        let c = &self.cells[layer];
        c.w_g..c.end
    }
}

/// Borrowed view of one GRU cell's parameters.
#[derive(Debug, Clone, Copy)]
pub struct CellParams<'a> {
    pub d_h: usize,
    pub d_in: usize,
    pub w_g: MatRef<'a>,
    pub w_r: MatRef<'a>,
    pub w_h: MatRef<'a>,
    pub w_in: MatRef<'a>,
    pub b_g: &'a [f64],
    pub b_r: &'a [f64],
    pub b_h: &'a [f64],
    pub b_in: &'a [f64],
}

/// The variational parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    shape: ModelShape,
    layout: ParamLayout,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        let layout = ParamLayout::new(&shape);
        let values = vec![0.0; layout.len];
        Ok(Self {
            shape,
            layout,
            values,
        })
    }

    /// Uniform initialization in `±1/sqrt(fan_in)`; biases share the bound of
    /// the matrix they accompany.
    pub fn init_random(shape: ModelShape, rng: &mut RngStream) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        let dh = shape.hidden;
        let layout = p.layout.clone();
        let mut fill = |values: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in values {
                *v = rng.uniform(-bound, bound);
            }
        };
        for cell in &layout.cells {
            let din = cell.d_in;
            fill(&mut p.values[cell.w_g..cell.w_r], dh + din);
            fill(&mut p.values[cell.w_r..cell.w_h], dh + din);
            fill(&mut p.values[cell.w_h..cell.w_in], dh);
            fill(&mut p.values[cell.w_in..cell.b_g], din);
            fill(&mut p.values[cell.b_g..cell.b_r], dh + din);
            fill(&mut p.values[cell.b_r..cell.b_h], dh + din);
            fill(&mut p.values[cell.b_h..cell.b_in], dh);
            fill(&mut p.values[cell.b_in..cell.end], din);
        }
        fill(&mut p.values[layout.u..layout.c + 2], dh);
        if let (Some(v), Some(d)) = (layout.v, layout.d) {
            fill(&mut p.values[v..d + 2], dh);
        }
        Ok(p)
    }

    pub fn from_values(shape: ModelShape, values: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        let layout = ParamLayout::new(&shape);
        if values.len() != layout.len {
            return Err(Error::shape("ModelParams::from_values", layout.len, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        Ok(Self {
            shape,
            layout,
            values,
        })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cell(&self, layer: usize) -> CellParams<'_> {
        let c = &self.layout.cells[layer];
        let dh = self.shape.hidden;
        let v = &self.values;
        CellParams {
            d_h: dh,
            d_in: c.d_in,
            w_g: MatRef {
                rows: dh,
                cols: dh + c.d_in,
                data: &v[c.w_g..c.w_r],
            },
            w_r: MatRef {
                rows: dh,
                cols: dh + c.d_in,
                data: &v[c.w_r..c.w_h],
            },
            w_h: MatRef {
                rows: dh,
                cols: dh,
                data: &v[c.w_h..c.w_in],
            },
            w_in: MatRef {
                rows: dh,
                cols: c.d_in,
                data: &v[c.w_in..c.b_g],
            },
            b_g: &v[c.b_g..c.b_r],
            b_r: &v[c.b_r..c.b_h],
            b_h: &v[c.b_h..c.b_in],
            b_in: &v[c.b_in..c.end],
        }
    }

    /// Same parameters reinterpreted for a chain of a different length.
    pub fn for_sites(&self, n_sites: usize) -> Result<Self> {
        let shape = self.shape.with_sites(n_sites)?;
        Ok(Self {
            shape,
            layout: self.layout.clone(),
            values: self.values.clone(),
        })
    }
}

/// Gradient record laid out exactly like [`ModelParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub values: Vec<f64>,
}

impl ParamGrad {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn add_assign(&mut self, other: &ParamGrad) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.values {
            *a *= s;
        }
    }
}

/// Activations cached by [`gru_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct GruCache {
    pub update: Vec<f64>,
    pub reset: Vec<f64>,
    /// `W_h h_prev + b_h*`, before the reset gate is applied.
    pub recurrent: Vec<f64>,
    pub candidate: Vec<f64>,
}

/// One GRU update with dense input.
pub fn gru_step(cell: &CellParams<'_>, h_prev: &[f64], x: &[f64]) -> Result<(Vec<f64>, GruCache)> {
    if h_prev.len() != cell.d_h {
        return Err(Error::shape("gru_step hidden state", cell.d_h, h_prev.len()));
    }
    if x.len() != cell.d_in {
        return Err(Error::shape("gru_step input", cell.d_in, x.len()));
    }
    let dh = cell.d_h;
    let mut cache = GruCache {
        update: vec![0.0; dh],
        reset: vec![0.0; dh],
        recurrent: vec![0.0; dh],
        candidate: vec![0.0; dh],
    };
    let mut h = vec![0.0; dh];
    cell_forward(
        cell,
        Some(h_prev),
        CellInput::Dense(x),
        StepOut {
            g: &mut cache.update,
            r: &mut cache.reset,
            a: &mut cache.recurrent,
            cand: &mut cache.candidate,
            h: &mut h,
        },
    );
    Ok((h, cache))
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum CellInput<'a> {
    Zero,
    OneHot(usize),
    Dense(&'a [f64]),
}

struct StepOut<'a> {
    g: &'a mut [f64],
    r: &'a mut [f64],
    a: &'a mut [f64],
    cand: &'a mut [f64],
    h: &'a mut [f64],
}

#[inline]
fn input_dot(row: &[f64], x: CellInput<'_>) -> f64 {
    match x {
        CellInput::Zero => 0.0,
        CellInput::OneHot(k) => row[k],
        CellInput::Dense(x) => dot(row, x),
    }
}

/// Unit `i` of one cell step: `[g, r, a, cand, h]`.
#[inline]
fn cell_unit(cell: &CellParams<'_>, i: usize, h_prev: Option<&[f64]>, x: CellInput<'_>) -> [f64; 5] {
    let dh = cell.d_h;
    let rg = cell.w_g.row(i);
    let rr = cell.w_r.row(i);
    let (mut zg, mut zr, mut a) = (cell.b_g[i], cell.b_r[i], cell.b_h[i]);
    if let Some(h) = h_prev {
        zg += dot(&rg[..dh], h);
        zr += dot(&rr[..dh], h);
        a += dot(cell.w_h.row(i), h);
    }
    zg += input_dot(&rg[dh..], x);
    zr += input_dot(&rr[dh..], x);
    let inp = cell.b_in[i] + input_dot(cell.w_in.row(i), x);
    let g = sigmoid_scalar(zg);
    let r = sigmoid_scalar(zr);
    let cand = (r * a + inp).tanh();
    let hp = h_prev.map_or(0.0, |h| h[i]);
    [g, r, a, cand, (1.0 - g) * hp + g * cand]
}

fn cell_forward(cell: &CellParams<'_>, h_prev: Option<&[f64]>, x: CellInput<'_>, out: StepOut<'_>) {
    for i in 0..cell.d_h {
        let [g, r, a, cand, h] = cell_unit(cell, i, h_prev, x);
        out.g[i] = g;
        out.r[i] = r;
        out.a[i] = a;
        out.cand[i] = cand;
        out.h[i] = h;
    }
}

/// Scratch buffers for one backward cell step.
#[derive(Debug, Clone)]
struct CellScratch {
    dzg: Vec<f64>,
    dzr: Vec<f64>,
    da: Vec<f64>,
    dc: Vec<f64>,
}

impl CellScratch {
    fn new(dh: usize) -> Self {
        Self {
            dzg: vec![0.0; dh],
            dzr: vec![0.0; dh],
            da: vec![0.0; dh],
            dc: vec![0.0; dh],
        }
    }
}

struct StepCache<'a> {
    g: &'a [f64],
    r: &'a [f64],
    a: &'a [f64],
    cand: &'a [f64],
}

/// Reverse pass through one cell. Accumulates parameter gradients into
/// `grad` (cell-relative offsets from `lay`), state gradient into `dh_prev`
/// and input gradient into `dx` (dense inputs only).
#[allow(clippy::too_many_arguments)]
fn cell_backward(
    cell: &CellParams<'_>,
    lay: &CellLayout,
    grad: &mut [f64],
    h_prev: Option<&[f64]>,
    x: CellInput<'_>,
    cache: StepCache<'_>,
    dh: &[f64],
    dh_prev: &mut [f64],
    mut dx: Option<&mut [f64]>,
    s: &mut CellScratch,
) {
    let n = cell.d_h;
    let din = cell.d_in;
    for i in 0..n {
        let hp = h_prev.map_or(0.0, |h| h[i]);
        let (g, r, cand) = (cache.g[i], cache.r[i], cache.cand[i]);
        dh_prev[i] += dh[i] * (1.0 - g);
        let dg = dh[i] * (cand - hp);
        let dpre = dh[i] * g * (1.0 - cand * cand);
        s.dc[i] = dpre;
        s.da[i] = dpre * r;
        s.dzr[i] = dpre * cache.a[i] * r * (1.0 - r);
        s.dzg[i] = dg * g * (1.0 - g);
    }
    for i in 0..n {
        grad[lay.b_g + i] += s.dzg[i];
        grad[lay.b_r + i] += s.dzr[i];
        grad[lay.b_h + i] += s.da[i];
        grad[lay.b_in + i] += s.dc[i];
    }
    let cols = n + din;
    for i in 0..n {
        let (dzg, dzr, da, dc) = (s.dzg[i], s.dzr[i], s.da[i], s.dc[i]);
        let rg = cell.w_g.row(i);
        let rr = cell.w_r.row(i);
        let gg = lay.w_g + i * cols;
        let gr = lay.w_r + i * cols;
        if let Some(hp) = h_prev {
            axpy(dzg, hp, &mut grad[gg..gg + n]);
            axpy(dzr, hp, &mut grad[gr..gr + n]);
            let gh = lay.w_h + i * n;
            axpy(da, hp, &mut grad[gh..gh + n]);
            axpy(dzg, &rg[..n], dh_prev);
            axpy(dzr, &rr[..n], dh_prev);
            axpy(da, cell.w_h.row(i), dh_prev);
        }
        let gi = lay.w_in + i * din;
        match x {
            CellInput::Zero => {}
            CellInput::OneHot(k) => {
                grad[gg + n + k] += dzg;
                grad[gr + n + k] += dzr;
                grad[gi + k] += dc;
            }
            CellInput::Dense(xv) => {
                axpy(dzg, xv, &mut grad[gg + n..gg + cols]);
                axpy(dzr, xv, &mut grad[gr + n..gr + cols]);
                axpy(dc, xv, &mut grad[gi..gi + din]);
                if let Some(dx) = dx.as_deref_mut() {
                    axpy(dzg, &rg[n..], dx);
                    axpy(dzr, &rr[n..], dx);
                    axpy(dc, cell.w_in.row(i), dx);
                }
            }
        }
    }
}

/// Map a spin value to its one-hot slot: `-1 -> 0`, `+1 -> 1`.
#[inline]
pub fn spin_slot(spin: i8) -> usize {
    usize::from(spin > 0)
}

/// Per-sequence activation cache; everything the reverse pass needs.
#[derive(Debug, Clone)]
pub struct Tape {
    layers: usize,
    hidden: usize,
    n_sites: usize,
    complex: bool,
    spins: Vec<i8>,
    states: Vec<f64>,
    update: Vec<f64>,
    reset: Vec<f64>,
    recurrent: Vec<f64>,
    candidate: Vec<f64>,
    logits_p: Vec<[f64; 2]>,
    logits_phi: Vec<[f64; 2]>,
}

impl Tape {
    pub(crate) fn new(shape: &ModelShape, n_sites: usize) -> Self {
        let size = shape.layers * n_sites * shape.hidden;
        Self {
            layers: shape.layers,
            hidden: shape.hidden,
            n_sites,
            complex: shape.complex,
            spins: vec![0; n_sites],
            states: vec![0.0; size],
            update: vec![0.0; size],
            reset: vec![0.0; size],
            recurrent: vec![0.0; size],
            candidate: vec![0.0; size],
            logits_p: vec![[0.0; 2]; n_sites],
            logits_phi: vec![[0.0; 2]; n_sites],
        }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    pub fn logits_p(&self) -> &[[f64; 2]] {
        &self.logits_p
    }

    pub fn logits_phi(&self) -> &[[f64; 2]] {
        &self.logits_phi
    }

    pub fn is_complex(&self) -> bool {
        self.complex
    }

    /// Hidden state of 0-based `layer` at 0-based `site`.
    pub fn state(&self, layer: usize, site: usize) -> &[f64] {
        let o = self.offset(layer, site);
        &self.states[o..o + self.hidden]
    }

    #[inline]
    fn offset(&self, layer: usize, site: usize) -> usize {
        (layer * self.n_sites + site) * self.hidden
    }

    /// Copy spins, states and logits for sites `< upto` from `other`.
    pub(crate) fn copy_prefix_from(&mut self, other: &Tape, upto: usize) {
        debug_assert_eq!(self.states.len(), other.states.len());
        for l in 0..self.layers {
            let a = self.offset(l, 0);
            let b = self.offset(l, upto);
            self.states[a..b].copy_from_slice(&other.states[a..b]);
        }
        self.spins[..upto].copy_from_slice(&other.spins[..upto]);
        self.logits_p[..upto].copy_from_slice(&other.logits_p[..upto]);
        self.logits_phi[..upto].copy_from_slice(&other.logits_phi[..upto]);
    }

    pub(crate) fn set_spin(&mut self, site: usize, spin: i8) {
        self.spins[site] = spin;
    }
}

fn check_tape(params: &ModelParams, tape: &Tape) -> Result<()> {
    let s = params.shape();
    if tape.layers != s.layers {
        return Err(Error::shape("tape layers", s.layers, tape.layers));
    }
    if tape.hidden != s.hidden {
        return Err(Error::shape("tape hidden size", s.hidden, tape.hidden));
    }
    if tape.complex != s.complex {
        return Err(Error::Config("tape and parameters disagree on the phase head".into()));
    }
    Ok(())
}

/// Run sites `start..N`, asking `choose(site, logits_p)` for the spin at each
/// site once its conditional logits are known. Sites before `start` must
/// already hold valid states and spins.
pub(crate) fn forward_from<F>(params: &ModelParams, tape: &mut Tape, start: usize, mut choose: F)
where
    F: FnMut(usize, &[f64; 2]) -> i8,
{
    let dh = params.shape.hidden;
    let n = tape.n_sites;
    let layers = params.shape.layers;
    let mut h_new = vec![0.0; dh];
    let cells: Vec<CellParams<'_>> = (0..layers).map(|l| params.cell(l)).collect();
    let off = |l: usize, j: usize| (l * n + j) * dh;
    for j in start..n {
        for (l, cell) in cells.iter().enumerate() {
            let s = ModelShape::dilation(l);
            let o = off(l, j);
            let h_prev = (j >= s).then(|| &tape.states[off(l, j - s)..off(l, j - s) + dh]);
            let x = if l == 0 {
                if j == 0 {
                    CellInput::Zero
                } else {
                    CellInput::OneHot(spin_slot(tape.spins[j - 1]))
                }
            } else {
                CellInput::Dense(&tape.states[off(l - 1, j)..off(l - 1, j) + dh])
            };
            cell_forward(
                cell,
                h_prev,
                x,
                StepOut {
                    g: &mut tape.update[o..o + dh],
                    r: &mut tape.reset[o..o + dh],
                    a: &mut tape.recurrent[o..o + dh],
                    cand: &mut tape.candidate[o..o + dh],
                    h: &mut h_new,
                },
            );
            tape.states[o..o + dh].copy_from_slice(&h_new);
        }
        let top = tape.offset(layers - 1, j);
        let (lp, phi) = head(params, &tape.states[top..top + dh]);
        tape.logits_p[j] = lp;
        if let Some(phi) = phi {
            tape.logits_phi[j] = phi;
        }
        let spin = choose(j, &lp);
        tape.spins[j] = spin;
    }
}

/// Probability and phase logits from the top-layer state.
#[inline]
fn head(params: &ModelParams, h: &[f64]) -> ([f64; 2], Option<[f64; 2]>) {
    let dh = params.shape.hidden;
    let lay = &params.layout;
    let vals = &params.values;
    let mut lp = [vals[lay.c], vals[lay.c + 1]];
    lp[0] += dot(&vals[lay.u..lay.u + dh], h);
    lp[1] += dot(&vals[lay.u + dh..lay.u + 2 * dh], h);
    let phi = match (lay.v, lay.d) {
        (Some(v), Some(d)) => Some([
            vals[d] + dot(&vals[v..v + dh], h),
            vals[d + 1] + dot(&vals[v + dh..v + 2 * dh], h),
        ]),
        _ => None,
    };
    (lp, phi)
}

/// Forward pass over a fixed configuration. The returned tape carries the
/// probability logits and (zero unless complex) phase logits of every site.
pub fn dilated_forward(params: &ModelParams, sigma: &[i8]) -> Result<Tape> {
    if sigma.is_empty() {
        return Err(Error::Config("empty configuration".into()));
    }
    params.shape.with_sites(sigma.len())?;
    let mut tape = Tape::new(&params.shape, sigma.len());
    forward_from(params, &mut tape, 0, |j, _| sigma[j]);
    Ok(tape)
}

/// Reusable buffers for [`backward_accumulate`].
#[derive(Debug, Clone)]
pub struct BackwardWorkspace {
    dstates: Vec<f64>,
    dh: Vec<f64>,
    dh_prev: Vec<f64>,
    dx: Vec<f64>,
    scratch: CellScratch,
}

impl BackwardWorkspace {
    pub fn new(shape: &ModelShape, n_sites: usize) -> Self {
        let dh = shape.hidden;
        Self {
            dstates: vec![0.0; shape.layers * n_sites * dh],
            dh: vec![0.0; dh],
            dh_prev: vec![0.0; dh],
            dx: vec![0.0; dh],
            scratch: CellScratch::new(dh),
        }
    }
}

/// Add the gradient of `Σ_j dlogits_p[j]·logits_p[j] + dlogits_phi[j]·logits_phi[j]`
/// into `grad`.
pub fn backward_accumulate(
    params: &ModelParams,
    tape: &Tape,
    dlogits_p: &[[f64; 2]],
    dlogits_phi: Option<&[[f64; 2]]>,
    grad: &mut [f64],
    ws: &mut BackwardWorkspace,
) -> Result<()> {
    check_tape(params, tape)?;
    let n = tape.n_sites;
    if dlogits_p.len() != n {
        return Err(Error::shape("dilated_backward probability upstream", n, dlogits_p.len()));
    }
    if let Some(d) = dlogits_phi {
        if d.len() != n {
            return Err(Error::shape("dilated_backward phase upstream", n, d.len()));
        }
    }
    if grad.len() != params.len() {
        return Err(Error::shape("dilated_backward gradient", params.len(), grad.len()));
    }
    let dh = params.shape.hidden;
    let layers = params.shape.layers;
    let lay = &params.layout;
    let vals = &params.values;
    if ws.dstates.len() != layers * n * dh {
        *ws = BackwardWorkspace::new(&params.shape, n);
    }
    ws.dstates.iter_mut().for_each(|v| *v = 0.0);
    let phase = match (dlogits_phi, lay.v, lay.d) {
        (Some(d), Some(v), Some(dd)) => Some((d, v, dd)),
        _ => None,
    };
    let cells: Vec<CellParams<'_>> = (0..layers).map(|l| params.cell(l)).collect();

    for j in (0..n).rev() {
        let top = tape.offset(layers - 1, j);
        let h = &tape.states[top..top + dh];
        let up = dlogits_p[j];
        for k in 0..2 {
            if up[k] != 0.0 {
                let row = lay.u + k * dh;
                axpy(up[k], h, &mut grad[row..row + dh]);
                grad[lay.c + k] += up[k];
                axpy(up[k], &vals[row..row + dh], &mut ws.dstates[top..top + dh]);
            }
        }
        if let Some((dphi, v, d)) = phase {
            let up = dphi[j];
            for k in 0..2 {
                if up[k] != 0.0 {
                    let row = v + k * dh;
                    axpy(up[k], h, &mut grad[row..row + dh]);
                    grad[d + k] += up[k];
                    axpy(up[k], &vals[row..row + dh], &mut ws.dstates[top..top + dh]);
                }
            }
        }
        for l in (0..layers).rev() {
            let o = tape.offset(l, j);
            ws.dh.copy_from_slice(&ws.dstates[o..o + dh]);
            if ws.dh.iter().all(|&v| v == 0.0) {
                continue;
            }
            let s = ModelShape::dilation(l);
            let prev = (j >= s).then(|| tape.offset(l, j - s));
            let h_prev = prev.map(|p| &tape.states[p..p + dh]);
            let x = if l == 0 {
                if j == 0 {
                    CellInput::Zero
                } else {
                    CellInput::OneHot(spin_slot(tape.spins[j - 1]))
                }
            } else {
                let p = tape.offset(l - 1, j);
                CellInput::Dense(&tape.states[p..p + dh])
            };
            ws.dh_prev.iter_mut().for_each(|v| *v = 0.0);
            ws.dx.iter_mut().for_each(|v| *v = 0.0);
            cell_backward(
                &cells[l],
                &lay.cells[l],
                grad,
                h_prev,
                x,
                StepCache {
                    g: &tape.update[o..o + dh],
                    r: &tape.reset[o..o + dh],
                    a: &tape.recurrent[o..o + dh],
                    cand: &tape.candidate[o..o + dh],
                },
                &ws.dh,
                &mut ws.dh_prev,
                (l > 0).then_some(&mut ws.dx[..]),
                &mut ws.scratch,
            );
            if let Some(p) = prev {
                axpy(1.0, &ws.dh_prev, &mut ws.dstates[p..p + dh]);
            }
            if l > 0 {
                let p = tape.offset(l - 1, j);
                axpy(1.0, &ws.dx, &mut ws.dstates[p..p + dh]);
            }
        }
    }
    Ok(())
}

/// Exact parameter gradient of `Σ_j dlogits_p[j]·logits_p[j] + dlogits_phi[j]·logits_phi[j]`.
pub fn dilated_backward(
    params: &ModelParams,
    tape: &Tape,
    dlogits_p: &[[f64; 2]],
    dlogits_phi: Option<&[[f64; 2]]>,
) -> Result<ParamGrad> {
    let mut grad = ParamGrad::zeros(params.len());
    let mut ws = BackwardWorkspace::new(params.shape(), tape.n_sites);
    backward_accumulate(params, tape, dlogits_p, dlogits_phi, &mut grad.values, &mut ws)?;
    Ok(grad)
}
