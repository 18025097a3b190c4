//! Stacked LSTM / GRU regressor with a linear head, trained by
//! backpropagation through time.
//!
//! All parameters live in one flat vector. Layer `l` owns three blocks:
//! `w` (`G·h × in`, row-major), `u` (`G·h × h`) and `b` (`G·h`), where `G`
//! is 4 for LSTM with gate rows ordered `[i, f, g, o]` and 3 for GRU with
//! `[z, r, n]`. The head is `w` (`h_last`) followed by a scalar bias.
//!
//! GRU candidate: `n = tanh(Wn·x + Un·(r⊙h) + bn)`, `h' = (1−z)⊙n + z⊙h`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::InvalidConfig(format!("unknown cell kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentNetConfig {
    /// Features per input row, `3·N`.
    pub input_width: usize,
    /// Input rows per example.
    pub window: usize,
    /// Hours between the last input row and the target.
    pub horizon: usize,
    pub hidden: Vec<usize>,
    pub cell: CellKind,
    pub seed: u64,
    pub rotation_seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
}

impl RecurrentNetConfig {
    pub fn new(input_width: usize, cell: CellKind) -> Self {
        Self {
            input_width,
            window: 24,
            horizon: 1,
            hidden: vec![32, 32],
            cell,
            seed: 7,
            rotation_seed: 11,
            learning_rate: 0.05,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            validation_fraction: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.hidden.is_empty() {
            return bad("at least one hidden layer is required");
        }
        if self.input_width == 0 || self.hidden.contains(&0) {
            return bad("input width and hidden sizes must be >= 1");
        }
        if self.window == 0 || self.horizon == 0 {
            return bad("window and horizon must be >= 1");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub input: usize,
    pub hidden: usize,
    pub w: usize,
    pub u: usize,
    pub b: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub gates: usize,
    pub layers: Vec<LayerLayout>,
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &RecurrentNetConfig) -> Self {
        let g = cfg.cell.gates();
        let mut layers = Vec::with_capacity(cfg.hidden.len());
        let mut offset = 0;
        let mut input = cfg.input_width;
        for &h in &cfg.hidden {
            let w = offset;
            let u = w + g * h * input;
            let b = u + g * h * h;
            let end = b + g * h;
            layers.push(LayerLayout {
                input,
                hidden: h,
                w,
                u,
                b,
                end,
            });
            offset = end;
            input = h;
        }
        Self {
            gates: g,
            layers,
            head_w: offset,
            head_b: offset + input,
            total: offset + input + 1,
        }
    }
}

/// Trainable parameter count for `cfg`.
pub fn param_count(cfg: &RecurrentNetConfig) -> usize {
    Layout::new(cfg).total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentNetState {
    cfg: RecurrentNetConfig,
    params: Vec<f64>,
    /// SGD steps applied; also versions forward caches.
    updates: u64,
    #[serde(skip)]
    edits: u64,
}

impl RecurrentNetState {
    pub fn from_params(cfg: RecurrentNetConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let n = param_count(&cfg);
        if params.len() != n {
            return Err(Error::Shape {
                expected: format!("{n} parameters"),
                actual: params.len().to_string(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidConfig("parameters must be finite".into()));
        }
        Ok(Self {
            cfg,
            params,
            updates: 0,
            edits: 0,
        })
    }

    pub fn config(&self) -> &RecurrentNetConfig {
        &self.cfg
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.cfg)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Direct parameter access; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.edits += 1;
        &mut self.params
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn version(&self) -> (u64, u64) {
        (self.updates, self.edits)
    }

    /// Bias block of `layer`, gate-major.
    pub fn bias(&self, layer: usize) -> &[f64] {
        let l = self.layout().layers[layer];
        &self.params[l.b..l.end]
    }

    /// Plain SGD step: `θ ← θ − lr·g`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.values.len() != self.params.len() {
            return Err(Error::Shape {
                expected: format!("{} gradients", self.params.len()),
                actual: grads.values.len().to_string(),
            });
        }
        for (p, g) in self.params.iter_mut().zip(&grads.values) {
            *p -= lr * g;
        }
        self.updates += 1;
        Ok(())
    }
}

/// Seeded uniform initialization in `±1/√fan_in`, fan-in being
/// `in + h` for recurrent blocks and `h` for the head. LSTM forget-gate
/// biases start at 1.0.
pub fn net_init(cfg: &RecurrentNetConfig) -> Result<RecurrentNetState> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = vec![0.0; layout.total];
    for l in &layout.layers {
        let bound = 1.0 / ((l.input + l.hidden) as f64).sqrt();
        for p in &mut params[l.w..l.end] {
            *p = rng.random_range(-bound..bound);
        }
        if cfg.cell == CellKind::Lstm {
            params[l.b + l.hidden..l.b + 2 * l.hidden].fill(1.0);
        }
    }
    let h = layout.layers.last().map_or(0, |l| l.hidden);
    let bound = 1.0 / (h as f64).sqrt();
    for p in &mut params[layout.head_w..layout.total] {
        *p = rng.random_range(-bound..bound);
    }
    RecurrentNetState::from_params(cfg.clone(), params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|v| *v *= k);
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    /// Inputs, `T × in`.
    xs: Vec<f64>,
    /// Hidden states, `(T+1) × h`; row 0 is the zero initial state.
    hs: Vec<f64>,
    /// LSTM cell states, `(T+1) × h`.
    cs: Vec<f64>,
    /// Post-activation gates, `T × G·h`.
    gates: Vec<f64>,
    /// GRU `r⊙h_prev`, `T × h`.
    rh: Vec<f64>,
}

/// Activations recorded by [`net_forward`] for one example.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: (u64, u64),
    steps: usize,
    layers: Vec<LayerCache>,
    pub prediction: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out += M·x` for row-major `M` of `rows × x.len()`.
fn gemv_acc(out: &mut [f64], m: &[f64], x: &[f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Mᵀ·v` for row-major `M` of `v.len() × out.len()`.
fn gemv_t_acc(out: &mut [f64], m: &[f64], v: &[f64]) {
    let cols = out.len();
    for (vr, row) in v.iter().zip(m.chunks_exact(cols)) {
        if *vr != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += vr * a;
            }
        }
    }
}

/// `G += a ⊗ x`.
fn outer_acc(g: &mut [f64], a: &[f64], x: &[f64]) {
    let cols = x.len();
    for (ar, row) in a.iter().zip(g.chunks_exact_mut(cols)) {
        if *ar != 0.0 {
            for (gv, xv) in row.iter_mut().zip(x) {
                *gv += ar * xv;
            }
        }
    }
}

fn check_input(cfg: &RecurrentNetConfig, inputs: &[f64]) -> Result<usize> {
    if inputs.is_empty() || !inputs.len().is_multiple_of(cfg.input_width) {
        return Err(Error::Shape {
            expected: format!("T × {} inputs", cfg.input_width),
            actual: inputs.len().to_string(),
        });
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidDataset("non-finite network input".into()));
    }
    Ok(inputs.len() / cfg.input_width)
}

/// Runs the recurrence over every row of `inputs` (`T × input_width`) and
/// applies the head to the final hidden state.
pub fn net_forward(state: &RecurrentNetState, inputs: &[f64]) -> Result<(f64, ForwardCache)> {
    let steps = check_input(&state.cfg, inputs)?;
    let layout = state.layout();
    let p = &state.params;
    let g = layout.gates;
    let mut layers = Vec::with_capacity(layout.layers.len());
    let mut xs = inputs.to_vec();
    for l in &layout.layers {
        let (n_in, h) = (l.input, l.hidden);
        let w = &p[l.w..l.u];
        let u = &p[l.u..l.b];
        let b = &p[l.b..l.end];
        let mut hs = vec![0.0; (steps + 1) * h];
        let mut cs = if state.cfg.cell == CellKind::Lstm {
            vec![0.0; (steps + 1) * h]
        } else {
            Vec::new()
        };
        let mut gates = vec![0.0; steps * g * h];
        let mut rh = if state.cfg.cell == CellKind::Gru {
            vec![0.0; steps * h]
        } else {
            Vec::new()
        };
        let mut a = vec![0.0; g * h];
        for t in 0..steps {
            let x = &xs[t * n_in..(t + 1) * n_in];
            let (prev, next) = hs.split_at_mut((t + 1) * h);
            let h_prev = &prev[t * h..];
            let h_next = &mut next[..h];
            a.copy_from_slice(b);
            gemv_acc(&mut a, w, x);
            let gt = &mut gates[t * g * h..(t + 1) * g * h];
            match state.cfg.cell {
                CellKind::Lstm => {
                    gemv_acc(&mut a, u, h_prev);
                    let (c_prev, c_next) = cs.split_at_mut((t + 1) * h);
                    let c_prev = &c_prev[t * h..];
                    for j in 0..h {
                        let i = sigmoid(a[j]);
                        let f = sigmoid(a[h + j]);
                        let gg = a[2 * h + j].tanh();
                        let o = sigmoid(a[3 * h + j]);
                        let c = f * c_prev[j] + i * gg;
                        c_next[j] = c;
                        h_next[j] = o * c.tanh();
                        gt[j] = i;
                        gt[h + j] = f;
                        gt[2 * h + j] = gg;
                        gt[3 * h + j] = o;
                    }
                }
                CellKind::Gru => {
                    gemv_acc(&mut a[..2 * h], &u[..2 * h * h], h_prev);
                    let rht = &mut rh[t * h..(t + 1) * h];
                    for j in 0..h {
                        gt[j] = sigmoid(a[j]);
                        gt[h + j] = sigmoid(a[h + j]);
                        rht[j] = gt[h + j] * h_prev[j];
                    }
                    gemv_acc(&mut a[2 * h..], &u[2 * h * h..], rht);
                    for j in 0..h {
                        let z = gt[j];
                        let n = a[2 * h + j].tanh();
                        gt[2 * h + j] = n;
                        h_next[j] = (1.0 - z) * n + z * h_prev[j];
                    }
                }
            }
        }
        let next_xs = hs[h..].to_vec();
        layers.push(LayerCache {
            xs: std::mem::replace(&mut xs, next_xs),
            hs,
            cs,
            gates,
            rh,
        });
    }
    let last = layout.layers.last().expect("validated config has a layer");
    let h_final = &layers.last().expect("one cache per layer").hs[steps * last.hidden..];
    let prediction = p[layout.head_b]
        + p[layout.head_w..layout.head_b]
            .iter()
            .zip(h_final)
            .map(|(a, b)| a * b)
            .sum::<f64>();
    Ok((
        prediction,
        ForwardCache {
            version: state.version(),
            steps,
            layers,
            prediction,
        },
    ))
}

/// Gradients of `½(pred − target)²` with respect to every parameter.
pub fn net_backward(state: &RecurrentNetState, cache: &ForwardCache, target: f64) -> Result<Gradients> {
    let layout = state.layout();
    if cache.version != state.version() || cache.layers.len() != layout.layers.len() {
        return Err(Error::StaleCache("cache was recorded against different parameters".into()));
    }
    let p = &state.params;
    let g = layout.gates;
    let steps = cache.steps;
    let mut grads = Gradients::zeros(layout.total);
    let dpred = cache.prediction - target;
    let last = layout.layers.last().expect("validated config has a layer");
    let top = cache.layers.last().expect("one cache per layer");
    let h_final = &top.hs[steps * last.hidden..];
    grads.values[layout.head_b] = dpred;
    for (gw, hv) in grads.values[layout.head_w..layout.head_b].iter_mut().zip(h_final) {
        *gw = dpred * hv;
    }

    // gradient flowing into each layer's hidden outputs, T × h
    let mut dh_seq = vec![0.0; steps * last.hidden];
    for (d, w) in dh_seq[(steps - 1) * last.hidden..].iter_mut().zip(&p[layout.head_w..layout.head_b]) {
        *d = dpred * w;
    }

    for (l, lc) in layout.layers.iter().zip(&cache.layers).rev() {
        let (n_in, h) = (l.input, l.hidden);
        let w = &p[l.w..l.u];
        let u = &p[l.u..l.b];
        let (gw_all, rest) = grads.values[l.w..l.end].split_at_mut(l.u - l.w);
        let (gu_all, gb_all) = rest.split_at_mut(l.b - l.u);
        let mut dx_seq = vec![0.0; steps * n_in];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut da = vec![0.0; g * h];
        for t in (0..steps).rev() {
            let x = &lc.xs[t * n_in..(t + 1) * n_in];
            let h_prev = &lc.hs[t * h..(t + 1) * h];
            let gt = &lc.gates[t * g * h..(t + 1) * g * h];
            let dh: Vec<f64> = dh_seq[t * h..(t + 1) * h].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
            dh_next.fill(0.0);
            match state.cfg.cell {
                CellKind::Lstm => {
                    let c_prev = &lc.cs[t * h..(t + 1) * h];
                    let c = &lc.cs[(t + 1) * h..(t + 2) * h];
                    for j in 0..h {
                        let (i, f, gg, o) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
                        let tc = c[j].tanh();
                        let dc = dc_next[j] + dh[j] * o * (1.0 - tc * tc);
                        da[j] = dc * gg * i * (1.0 - i);
                        da[h + j] = dc * c_prev[j] * f * (1.0 - f);
                        da[2 * h + j] = dc * i * (1.0 - gg * gg);
                        da[3 * h + j] = dh[j] * tc * o * (1.0 - o);
                        dc_next[j] = dc * f;
                    }
                    outer_acc(gu_all, &da, h_prev);
                    gemv_t_acc(&mut dh_next, u, &da);
                }
                CellKind::Gru => {
                    let rh = &lc.rh[t * h..(t + 1) * h];
                    for j in 0..h {
                        let (z, n) = (gt[j], gt[2 * h + j]);
                        da[j] = dh[j] * (h_prev[j] - n) * z * (1.0 - z);
                        da[2 * h + j] = dh[j] * (1.0 - z) * (1.0 - n * n);
                        dh_next[j] = dh[j] * z;
                    }
                    let mut drh = vec![0.0; h];
                    gemv_t_acc(&mut drh, &u[2 * h * h..], &da[2 * h..]);
                    for j in 0..h {
                        let r = gt[h + j];
                        da[h + j] = drh[j] * h_prev[j] * r * (1.0 - r);
                        dh_next[j] += drh[j] * r;
                    }
                    outer_acc(&mut gu_all[..2 * h * h], &da[..2 * h], h_prev);
                    outer_acc(&mut gu_all[2 * h * h..], &da[2 * h..], rh);
                    gemv_t_acc(&mut dh_next, &u[..2 * h * h], &da[..2 * h]);
                }
            }
            outer_acc(gw_all, &da, x);
            for (gb, d) in gb_all.iter_mut().zip(&da) {
                *gb += d;
            }
            gemv_t_acc(&mut dx_seq[t * n_in..(t + 1) * n_in], w, &da);
        }
        dh_seq = dx_seq;
    }
    Ok(grads)
}

/// Half squared error of one example.
pub fn example_loss(state: &RecurrentNetState, inputs: &[f64], target: f64) -> Result<f64> {
    let (pred, _) = net_forward(state, inputs)?;
    Ok(0.5 * (pred - target) * (pred - target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(cell: CellKind, hidden: Vec<usize>, width: usize) -> RecurrentNetConfig {
        RecurrentNetConfig {
            hidden,
            window: 3,
            seed: 3,
            ..RecurrentNetConfig::new(width, cell)
        }
    }

    fn random_inputs(rows: usize, width: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rows * width).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn parameter_count_formula() {
        let cfg = tiny(CellKind::Lstm, vec![4], 6);
        assert_eq!(param_count(&cfg), 4 * 4 * (6 + 4) + 4 * 4 + 4 + 1);
        let l = Layout::new(&cfg).layers[0];
        assert_eq!(l.u - l.w, 4 * 4 * 6);
        assert_eq!(l.b - l.u, 4 * 4 * 4);
        let two = tiny(CellKind::Lstm, vec![32, 32], 15);
        assert_eq!(param_count(&two), (4 * 32 * (15 + 32) + 4 * 32) + (4 * 32 * 64 + 4 * 32) + 33);
        let gru = tiny(CellKind::Gru, vec![5], 2);
        assert_eq!(param_count(&gru), 3 * 5 * 7 + 3 * 5 + 6);
    }

    #[test]
    fn init_is_seeded_bounded_and_sets_forget_bias() {
        let cfg = tiny(CellKind::Lstm, vec![4, 3], 6);
        let a = net_init(&cfg).unwrap();
        assert_eq!(a, net_init(&cfg).unwrap());
        let other = net_init(&RecurrentNetConfig { seed: 4, ..cfg.clone() }).unwrap();
        assert_ne!(a.params(), other.params());
        assert!(a.bias(0)[4..8].iter().all(|&b| b == 1.0));
        assert!(a.bias(1)[3..6].iter().all(|&b| b == 1.0));
        let l0 = a.layout().layers[0];
        let bound = 1.0 / 10f64.sqrt();
        assert!(a.params()[l0.w..l0.b].iter().all(|p| p.abs() < bound));
    }

    #[test]
    fn zero_parameters_predict_zero() {
        for cell in [CellKind::Lstm, CellKind::Gru] {
            let cfg = tiny(cell, vec![3, 2], 4);
            let state = RecurrentNetState::from_params(cfg.clone(), vec![0.0; param_count(&cfg)]).unwrap();
            let (pred, _) = net_forward(&state, &random_inputs(3, 4, 1)).unwrap();
            assert_eq!(pred, 0.0);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let state = net_init(&tiny(CellKind::Lstm, vec![2], 4)).unwrap();
        assert!(matches!(net_forward(&state, &[0.0; 7]), Err(Error::Shape { .. })));
        assert!(net_forward(&state, &[]).is_err());
    }

    // Scalar-by-scalar evaluation of a one-layer net, indexing parameters
    // directly from the documented layout.
    fn oracle_forward(state: &RecurrentNetState, inputs: &[f64]) -> f64 {
        let cfg = state.config();
        let p = state.params();
        let n_in = cfg.input_width;
        let h = cfg.hidden[0];
        let g = cfg.cell.gates();
        let w = |gate: usize, j: usize, k: usize| p[(gate * h + j) * n_in + k];
        let u = |gate: usize, j: usize, k: usize| p[g * h * n_in + (gate * h + j) * h + k];
        let b = |gate: usize, j: usize| p[g * h * n_in + g * h * h + gate * h + j];
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut hid = vec![0.0; h];
        let mut cell = vec![0.0; h];
        for x in inputs.chunks(n_in) {
            let pre = |gate: usize, j: usize, hv: &[f64]| {
                let mut s = b(gate, j);
                for k in 0..n_in {
                    s += w(gate, j, k) * x[k];
                }
                for k in 0..h {
                    s += u(gate, j, k) * hv[k];
                }
                s
            };
            let mut next = vec![0.0; h];
            match cfg.cell {
                CellKind::Lstm => {
                    for j in 0..h {
                        let i = sig(pre(0, j, &hid));
                        let f = sig(pre(1, j, &hid));
                        let gg = pre(2, j, &hid).tanh();
                        let o = sig(pre(3, j, &hid));
                        cell[j] = f * cell[j] + i * gg;
                        next[j] = o * cell[j].tanh();
                    }
                }
                CellKind::Gru => {
                    let rh: Vec<f64> = (0..h).map(|j| sig(pre(1, j, &hid)) * hid[j]).collect();
                    for j in 0..h {
                        let z = sig(pre(0, j, &hid));
                        let mut a = b(2, j);
                        for k in 0..n_in {
                            a += w(2, j, k) * x[k];
                        }
                        for k in 0..h {
                            a += u(2, j, k) * rh[k];
                        }
                        next[j] = (1.0 - z) * a.tanh() + z * hid[j];
                    }
                }
            }
            hid = next;
        }
        let head = g * h * n_in + g * h * h + g * h;
        p[head + h] + (0..h).map(|j| p[head + j] * hid[j]).sum::<f64>()
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        for cell in [CellKind::Lstm, CellKind::Gru] {
            let state = net_init(&tiny(cell, vec![2], 3)).unwrap();
            let x = random_inputs(3, 3, 9);
            let (pred, _) = net_forward(&state, &x).unwrap();
            assert!((pred - oracle_forward(&state, &x)).abs() < 1e-12, "{cell}");
            assert_eq!(pred, net_forward(&state, &x).unwrap().0);
        }
    }

    fn finite_difference_check(cfg: RecurrentNetConfig) {
        let mut state = net_init(&cfg).unwrap();
        let x = random_inputs(cfg.window, cfg.input_width, cfg.seed + 100);
        let target = 0.3;
        let (_, cache) = net_forward(&state, &x).unwrap();
        let analytic = net_backward(&state, &cache, target).unwrap();
        let eps = 1e-5;
        for k in 0..analytic.values.len() {
            let orig = state.params()[k];
            state.params_mut()[k] = orig + eps;
            let up = example_loss(&state, &x, target).unwrap();
            state.params_mut()[k] = orig - eps;
            let down = example_loss(&state, &x, target).unwrap();
            state.params_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.values[k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-7);
            assert!(rel < 1e-4, "{} param {k}: analytic {a}, numeric {numeric}", cfg.cell);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for cell in [CellKind::Lstm, CellKind::Gru] {
            finite_difference_check(tiny(cell, vec![3], 4));
            finite_difference_check(tiny(cell, vec![3, 2], 4));
        }
    }

    #[test]
    fn exact_prediction_has_zero_gradient() {
        let state = net_init(&tiny(CellKind::Gru, vec![3], 2)).unwrap();
        let x = random_inputs(3, 2, 5);
        let (pred, cache) = net_forward(&state, &x).unwrap();
        let g = net_backward(&state, &cache, pred).unwrap();
        assert!(g.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn head_bias_gradient_is_the_residual() {
        let state = net_init(&tiny(CellKind::Lstm, vec![3], 2)).unwrap();
        let x = random_inputs(3, 2, 6);
        let (pred, cache) = net_forward(&state, &x).unwrap();
        let hb = state.layout().head_b;
        let g1 = net_backward(&state, &cache, pred - 0.25).unwrap();
        let g2 = net_backward(&state, &cache, pred - 0.5).unwrap();
        assert!((g1.values[hb] - 0.25).abs() < 1e-15);
        assert!((g2.values[hb] - 2.0 * g1.values[hb]).abs() < 1e-15);
    }

    #[test]
    fn cache_goes_stale_after_an_update() {
        let mut state = net_init(&tiny(CellKind::Lstm, vec![2], 2)).unwrap();
        let (_, cache) = net_forward(&state, &random_inputs(3, 2, 1)).unwrap();
        let g = net_backward(&state, &cache, 0.0).unwrap();
        state.sgd_step(&g, 0.1).unwrap();
        assert!(matches!(net_backward(&state, &cache, 0.0), Err(Error::StaleCache(_))));
    }
}
