//! Learned components: a shared-weight U-net feature pyramid, the gated
//! CNN-LSTM increment block, and the symmetric coarse-to-fine cascade.
//!
//! Everything is expressed on an [`autodiff::Tape`](crate::autodiff::Tape)
//! so that one code path serves both training and inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::deformation::DeformationField;
use crate::dynamics::{HomotopyState, DEFAULT_H_MIN, DEFAULT_SIGMA};
use crate::error::{Error, Result};
use crate::field::GridShape;

/// Cascade hyperparameters. `channels` is listed coarsest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct SrConfig {
    pub scales: usize,
    pub cascades: usize,
    pub channels: Vec<usize>,
    pub sigma_h: f64,
    pub h_min: f64,
    pub pre_align: bool,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            cascades: 4,
            channels: vec![16, 16, 8],
            sigma_h: DEFAULT_SIGMA,
            h_min: DEFAULT_H_MIN,
            pre_align: true,
        }
    }
}

impl SrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.cascades == 0 {
            return Err(Error::Config(format!(
                "scales and cascades must be at least 1, got {} and {}",
                self.scales, self.cascades
            )));
        }
        if self.channels.len() != self.scales {
            return Err(Error::Config(format!(
                "{} channel counts for {} scales",
                self.channels.len(),
                self.scales
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.sigma_h > 0.0) || !(self.h_min > 0.0) {
            return Err(Error::Config(format!(
                "sigma_h and h_min must be positive, got {} and {}",
                self.sigma_h, self.h_min
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.cascades as f64
    }

    /// Spatial extents of every level, coarsest first.
    pub fn level_shapes(&self, full: &[usize]) -> Result<Vec<Vec<usize>>> {
        let f = 1usize << (self.scales - 1);
        for (axis, &n) in full.iter().enumerate() {
            if n % f != 0 || n / f < 2 {
                return Err(Error::InvalidShape(format!(
                    "extent {n} on axis {axis} is not a multiple of {f} with at least 2 voxels per coarse cell row"
                )));
            }
        }
        Ok((0..self.scales)
            .map(|l| {
                let s = 1usize << (self.scales - 1 - l);
                full.iter().map(|&n| n / s).collect()
            })
            .collect())
    }
}

/// Per-level feature maps, coarsest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

/// CNN-LSTM memory; `d` channels at the current level's extents.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, ndim: usize, spatial: &[usize]) -> Self {
        let mut shape = vec![ndim];
        shape.extend_from_slice(spatial);
        Self {
            c: tape.constant(Tensor::zeros(&shape)),
        }
    }
}

/// One path of one scale: displacements `0..=N`, increments `1..=N` and
/// homotopy values `h(phi_0)..=h(phi_N)`.
#[derive(Clone, Debug, Default)]
pub struct PathTrace {
    pub displacements: Vec<Var>,
    pub increments: Vec<Var>,
    pub homotopy: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ScaleTrace {
    pub shape: Vec<usize>,
    pub forward: PathTrace,
    pub backward: PathTrace,
}

/// Result of the symmetric cascade; `phi` maps `y`-space points into `x`
/// (so `warp(x, phi)` resembles `y`) and `phi_inv` the reverse.
#[derive(Clone, Debug)]
pub struct SrOutput {
    pub phi: Var,
    pub phi_inv: Var,
    pub scales: Vec<ScaleTrace>,
}

impl SrOutput {
    pub fn fields(&self, tape: &Tape) -> Result<(DeformationField, DeformationField)> {
        let f = DeformationField::from_displacement(tape.value(self.phi).to_vector_field()?);
        let b = DeformationField::from_displacement(tape.value(self.phi_inv).to_vector_field()?);
        Ok((f, b))
    }
}

struct LayerSpec {
    name: String,
    weight: Vec<usize>,
    fan_in: usize,
    zero: bool,
}

/// Parameter layout for a given config and dimensionality.
fn layout(config: &SrConfig, ndim: usize) -> Vec<LayerSpec> {
    let l = config.scales;
    // width at resolution r (0 = full)
    let width = |r: usize| config.channels[l - 1 - r];
    let kernel = |k: usize| vec![k; ndim];
    let mut out = Vec::new();
    let mut conv = |name: String, co: usize, ci: usize, k: usize, transpose: bool, zero: bool| {
        let mut weight = if transpose {
            vec![ci, co]
        } else {
            vec![co, ci]
        };
        weight.extend(kernel(k));
        out.push(LayerSpec {
            name,
            weight,
            fan_in: ci * k.pow(ndim as u32),
            zero,
        });
    };
    conv("unet.enc0a".into(), width(0), 1, 3, false, false);
    conv("unet.enc0b".into(), width(0), width(0), 3, false, false);
    for r in 1..l {
        conv(
            format!("unet.down{r}"),
            width(r),
            width(r - 1),
            2,
            false,
            false,
        );
        conv(format!("unet.enc{r}"), width(r), width(r), 3, false, false);
    }
    conv(
        "unet.bottom".into(),
        width(l - 1),
        width(l - 1),
        3,
        false,
        false,
    );
    for r in (0..l - 1).rev() {
        conv(
            format!("unet.up{r}"),
            width(r),
            width(r + 1),
            2,
            true,
            false,
        );
        conv(
            format!("unet.fuse{r}"),
            width(r),
            2 * width(r),
            3,
            false,
            false,
        );
    }
    for (lvl, &c) in config.channels.iter().enumerate() {
        conv(format!("lstm{lvl}"), 4 * ndim, 2 * c + ndim, 3, false, true);
    }
    out
}

/// Tape nodes for every parameter, indexed like the store.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Weights of the whole model plus the config that shapes them.
#[derive(Clone, Debug)]
pub struct Network {
    config: SrConfig,
    ndim: usize,
    store: ParamStore,
}

impl Network {
    /// Fresh weights: uniform in `±1/sqrt(fan_in)` except the increment
    /// block convolutions, which start at zero so the model is the
    /// identity. Biases start at zero.
    pub fn new(config: SrConfig, ndim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(2..=3).contains(&ndim) {
            return Err(Error::InvalidArgument(format!(
                "dimensionality must be 2 or 3, got {ndim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in layout(&config, ndim) {
            let n: usize = spec.weight.iter().product();
            let bound = 1.0 / (spec.fan_in as f64).sqrt();
            let data = if spec.zero {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            let co = if spec.name.contains(".up") {
                spec.weight[1]
            } else {
                spec.weight[0]
            };
            store.add(format!("{}.w", spec.name), Tensor::new(spec.weight, data)?)?;
            store.add(format!("{}.b", spec.name), Tensor::zeros(&[co]))?;
        }
        Ok(Self {
            config,
            ndim,
            store,
        })
    }

    /// Wraps existing weights after checking names and shapes against the
    /// layout for `config`.
    pub fn from_store(config: SrConfig, ndim: usize, store: ParamStore) -> Result<Self> {
        let fresh = Self::new(config, ndim, 0)?;
        if fresh.store.len() != store.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                fresh.store.len(),
                store.len()
            )));
        }
        for (_, name, t) in fresh.store.iter() {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::mismatch(t.shape(), store.value(id).shape()));
            }
        }
        Ok(Self {
            config: fresh.config,
            ndim,
            store,
        })
    }

    pub fn config(&self) -> &SrConfig {
        &self.config
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Puts every parameter on the tape once.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .store
            .iter()
            .map(|(id, _, _)| tape.param(&self.store, id))
            .collect();
        Bound { vars }
    }

    /// Uses caller-provided nodes, one per parameter in store order.
    pub fn bind_vars(&self, tape: &Tape, vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != self.store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.store.len()
            )));
        }
        for ((_, _, t), v) in self.store.iter().zip(&vars) {
            if tape.shape(*v) != t.shape() {
                return Err(Error::mismatch(t.shape(), tape.shape(*v)));
            }
        }
        Ok(Bound { vars })
    }

    fn layer(&self, p: &Bound, name: &str) -> (Var, Var) {
        let w = self
            .store
            .id(&format!("{name}.w"))
            .expect("layer in layout");
        let b = self
            .store
            .id(&format!("{name}.b"))
            .expect("layer in layout");
        (p.vars[w.index()], p.vars[b.index()])
    }

    fn conv_relu(
        &self,
        tape: &mut Tape,
        p: &Bound,
        name: &str,
        x: Var,
        k: usize,
        stride: usize,
    ) -> Result<Var> {
        let (w, b) = self.layer(p, name);
        let pad = if k == 3 { 1 } else { 0 };
        let y = tape.conv(x, w, Some(b), stride, pad)?;
        Ok(tape.relu(y))
    }

    /// U-net features of a `[1, spatial..]` image, coarsest level first.
    pub fn features(&self, tape: &mut Tape, p: &Bound, img: Var) -> Result<FeaturePyramid> {
        let shape = tape.shape(img).to_vec();
        if shape.len() != self.ndim + 1 || shape[0] != 1 {
            return Err(Error::InvalidShape(format!(
                "expected a single-channel {}D image, got shape {shape:?}",
                self.ndim
            )));
        }
        self.config.level_shapes(&shape[1..])?;
        let l = self.config.scales;
        let mut skips = Vec::with_capacity(l);
        let e = self.conv_relu(tape, p, "unet.enc0a", img, 3, 1)?;
        let mut e = self.conv_relu(tape, p, "unet.enc0b", e, 3, 1)?;
        skips.push(e);
        for r in 1..l {
            let down = self.conv_relu(tape, p, &format!("unet.down{r}"), e, 2, 2)?;
            e = self.conv_relu(tape, p, &format!("unet.enc{r}"), down, 3, 1)?;
            skips.push(e);
        }
        let mut dec = self.conv_relu(tape, p, "unet.bottom", e, 3, 1)?;
        let mut levels = vec![dec];
        for r in (0..l - 1).rev() {
            let (w, b) = self.layer(p, &format!("unet.up{r}"));
            let up = tape.conv_transpose(dec, w, Some(b), 2, 0)?;
            let up = tape.relu(up);
            let cat = tape.concat(&[up, skips[r]])?;
            dec = self.conv_relu(tape, p, &format!("unet.fuse{r}"), cat, 3, 1)?;
            levels.push(dec);
        }
        Ok(FeaturePyramid { levels })
    }

    /// Gated increment: one convolution of `[fx_warped, fy, disp]` split
    /// into `f, i, g, o`; `c' = s(f) c + s(i) tanh(g)`, `u = s(o) tanh(c')`.
    pub fn lstm_block(
        &self,
        tape: &mut Tape,
        p: &Bound,
        level: usize,
        fx_warped: Var,
        fy: Var,
        disp: Var,
        state: LstmState,
    ) -> Result<(Var, LstmState)> {
        let d = self.ndim;
        let sp = tape.value(fy).spatial().to_vec();
        for v in [fx_warped, disp, state.c] {
            if tape.value(v).spatial() != sp.as_slice() {
                return Err(Error::mismatch(tape.shape(v), tape.shape(fy)));
            }
        }
        if tape.value(disp).channels() != d || tape.value(state.c).channels() != d {
            return Err(Error::mismatch(tape.shape(disp), tape.shape(state.c)));
        }
        let x = tape.concat(&[fx_warped, fy, disp])?;
        let (w, b) = self.layer(p, &format!("lstm{level}"));
        let gates = tape.conv(x, w, Some(b), 1, 1)?;
        let f = tape.narrow(gates, 0, d)?;
        let i = tape.narrow(gates, d, d)?;
        let g = tape.narrow(gates, 2 * d, d)?;
        let o = tape.narrow(gates, 3 * d, d)?;
        let f = tape.sigmoid(f);
        let i = tape.sigmoid(i);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let u = tape.mul(o, tc)?;
        Ok((u, LstmState { c }))
    }

    fn homotopy(&self, tape: &mut Tape, h0: Var, disp: Var) -> Result<Var> {
        let w = tape.warp(h0, disp)?;
        Ok(tape.clamp_min(w, self.config.h_min))
    }

    /// `disp + dt * u / h`, with `h` repeated across components.
    fn euler(&self, tape: &mut Tape, disp: Var, u: Var, h: Var) -> Result<Var> {
        let hs = tape.concat(&vec![h; self.ndim])?;
        let q = tape.div(u, hs)?;
        let step = tape.scale(q, self.config.dt());
        tape.add(disp, step)
    }

    /// Symmetric cascade over both pyramids. The two paths share every
    /// weight and differ only in the order of their inputs, so swapping
    /// the pyramids swaps the outputs exactly.
    pub fn sr_module(
        &self,
        tape: &mut Tape,
        p: &Bound,
        pyr_x: &FeaturePyramid,
        pyr_y: &FeaturePyramid,
    ) -> Result<SrOutput> {
        let l = self.config.scales;
        if pyr_x.levels.len() != l || pyr_y.levels.len() != l {
            return Err(Error::InvalidArgument(format!(
                "pyramids have {} and {} levels, config expects {l}",
                pyr_x.levels.len(),
                pyr_y.levels.len()
            )));
        }
        let d = self.ndim;
        let mut fwd: Option<Var> = None;
        let mut bwd: Option<Var> = None;
        let mut scales = Vec::with_capacity(l);
        for lvl in 0..l {
            let (fx, fy) = (pyr_x.levels[lvl], pyr_y.levels[lvl]);
            let sp = tape.value(fx).spatial().to_vec();
            if tape.value(fy).spatial() != sp.as_slice() {
                return Err(Error::mismatch(tape.shape(fx), tape.shape(fy)));
            }
            let grid = GridShape::new(&sp)?;
            let hs = HomotopyState::new(&grid, self.config.sigma_h, self.config.h_min)?;
            let h0 = tape.constant(Tensor::from_scalar_field(hs.smoothed_h0()));
            let start = |tape: &mut Tape, prev: Option<Var>| -> Var {
                match prev {
                    None => {
                        let mut shape = vec![d];
                        shape.extend_from_slice(&sp);
                        tape.constant(Tensor::zeros(&shape))
                    }
                    Some(p) => {
                        let up = tape.upsample2(p);
                        tape.scale(up, 2.0)
                    }
                }
            };
            let df = start(tape, fwd);
            let db = start(tape, bwd);
            let mut tf = self.run_path(tape, p, lvl, h0, fx, fy, df)?;
            let mut tb = self.run_path(tape, p, lvl, h0, fy, fx, db)?;
            fwd = tf.displacements.last().copied();
            bwd = tb.displacements.last().copied();
            tf.displacements.shrink_to_fit();
            tb.displacements.shrink_to_fit();
            scales.push(ScaleTrace {
                shape: sp,
                forward: tf,
                backward: tb,
            });
        }
        Ok(SrOutput {
            phi: fwd.expect("at least one scale"),
            phi_inv: bwd.expect("at least one scale"),
            scales,
        })
    }

    /// `N` cascades of one path: the moving features are warped by the
    /// path's own current deformation before each block.
    fn run_path(
        &self,
        tape: &mut Tape,
        p: &Bound,
        level: usize,
        h0: Var,
        moving: Var,
        fixed: Var,
        disp0: Var,
    ) -> Result<PathTrace> {
        let sp = tape.value(fixed).spatial().to_vec();
        let mut state = LstmState::zeros(tape, self.ndim, &sp);
        let mut disp = disp0;
        let mut h = self.homotopy(tape, h0, disp)?;
        let mut trace = PathTrace {
            displacements: vec![disp],
            increments: Vec::new(),
            homotopy: vec![h],
        };
        for _ in 0..self.config.cascades {
            let warped = if self.config.pre_align {
                tape.warp(moving, disp)?
            } else {
                moving
            };
            let (u, next) = self.lstm_block(tape, p, level, warped, fixed, disp, state)?;
            state = next;
            disp = self.euler(tape, disp, u, h)?;
            h = self.homotopy(tape, h0, disp)?;
            trace.displacements.push(disp);
            trace.increments.push(u);
            trace.homotopy.push(h);
        }
        Ok(trace)
    }

    /// Features of both images followed by the symmetric cascade.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, y: Var) -> Result<SrOutput> {
        if tape.shape(x) != tape.shape(y) {
            return Err(Error::mismatch(tape.shape(x), tape.shape(y)));
        }
        let px = self.features(tape, p, x)?;
        let py = self.features(tape, p, y)?;
        self.sr_module(tape, p, &px, &py)
    }
}
