//! Network building blocks with hand-written forward and backward passes.
//!
//! Everything is f64 and allocation-simple: a parameter is a flat vector
//! with a shape and a gradient buffer beside it. Samples are processed one
//! at a time; batching averages gradients in the training loop.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A named parameter block: matrix (rows x cols) or vector (cols = 1).
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize) -> Param {
        Param {
            name: name.into(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
            grad: vec![0.0; rows * cols],
        }
    }

    /// Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) fill.
    pub fn init_uniform(&mut self, fan_in: usize, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        for v in &mut self.data {
            *v = rng.gen_range(-bound..bound);
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn grad_at(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.grad[r * self.cols + c]
    }
}

/// y = W x + b
pub fn affine(w: &Param, b: &Param, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.cols, x.len());
    let mut y = b.data.clone();
    for (r, yr) in y.iter_mut().enumerate() {
        let row = &w.data[r * w.cols..(r + 1) * w.cols];
        *yr += row.iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>();
    }
    y
}

/// Accumulate dW += dy (x) x^T, db += dy; return dx = W^T dy.
pub fn affine_backward(w: &mut Param, b: &mut Param, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let cols = w.cols;
    let mut dx = vec![0.0; cols];
    for (r, &d) in dy.iter().enumerate() {
        b.grad[r] += d;
        let row = &w.data[r * cols..(r + 1) * cols];
        let grad_row = &mut w.grad[r * cols..(r + 1) * cols];
        for c in 0..cols {
            grad_row[c] += d * x[c];
            dx[c] += row[c] * d;
        }
    }
    dx
}

/// Hidden-layer nonlinearities from the tuning space. `LogSoftmax` acts on
/// the whole layer vector; everything else is elementwise. `RReLU` uses the
/// deterministic midpoint slope (11/48) during both training and inference
/// so runs are reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    ReLU,
    GELU,
    Sigmoid,
    Tanh,
    Hardswish,
    ELU,
    Hardsigmoid,
    RReLU,
    LogSoftmax,
}

pub const ALL_ACTIVATIONS: [Activation; 9] = [
    Activation::ReLU,
    Activation::GELU,
    Activation::Sigmoid,
    Activation::Tanh,
    Activation::Hardswish,
    Activation::ELU,
    Activation::Hardsigmoid,
    Activation::RReLU,
    Activation::LogSoftmax,
];

const RRELU_SLOPE: f64 = 11.0 / 48.0; // midpoint of U(1/8, 1/3)

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Activation {
    pub fn parse(s: &str) -> Option<Activation> {
        ALL_ACTIVATIONS
            .iter()
            .copied()
            .find(|a| format!("{a:?}").eq_ignore_ascii_case(s))
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Activation::LogSoftmax => {
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let log_sum = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                z.iter().map(|v| v - log_sum).collect()
            }
            _ => z.iter().map(|&v| self.scalar(v)).collect(),
        }
    }

    fn scalar(&self, z: f64) -> f64 {
        match self {
            Activation::ReLU => z.max(0.0),
            Activation::GELU => {
                // tanh-form GELU; its analytic derivative is used below.
                let inner = (2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z * z * z);
                0.5 * z * (1.0 + inner.tanh())
            }
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Hardswish => {
                if z <= -3.0 {
                    0.0
                } else if z >= 3.0 {
                    z
                } else {
                    z * (z + 3.0) / 6.0
                }
            }
            Activation::ELU => {
                if z > 0.0 {
                    z
                } else {
                    z.exp() - 1.0
                }
            }
            Activation::Hardsigmoid => (z / 6.0 + 0.5).clamp(0.0, 1.0),
            Activation::RReLU => {
                if z >= 0.0 {
                    z
                } else {
                    RRELU_SLOPE * z
                }
            }
            Activation::LogSoftmax => unreachable!("vector activation"),
        }
    }

    /// dL/dz given dL/dy, the pre-activation z, and the output y.
    pub fn backward(&self, z: &[f64], y: &[f64], dy: &[f64]) -> Vec<f64> {
        match self {
            Activation::LogSoftmax => {
                let sum_dy: f64 = dy.iter().sum();
                y.iter()
                    .zip(dy)
                    .map(|(&yi, &di)| di - yi.exp() * sum_dy)
                    .collect()
            }
            _ => z
                .iter()
                .zip(y)
                .zip(dy)
                .map(|((&zi, &yi), &di)| di * self.scalar_deriv(zi, yi))
                .collect(),
        }
    }

    fn scalar_deriv(&self, z: f64, y: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::GELU => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let inner = c * (z + 0.044715 * z * z * z);
                let t = inner.tanh();
                let dinner = c * (1.0 + 3.0 * 0.044715 * z * z);
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Hardswish => {
                if z <= -3.0 {
                    0.0
                } else if z >= 3.0 {
                    1.0
                } else {
                    (2.0 * z + 3.0) / 6.0
                }
            }
            Activation::ELU => {
                if z > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Hardsigmoid => {
                if (-3.0..3.0).contains(&z) {
                    1.0 / 6.0
                } else {
                    0.0
                }
            }
            Activation::RReLU => {
                if z >= 0.0 {
                    1.0
                } else {
                    RRELU_SLOPE
                }
            }
            Activation::LogSoftmax => unreachable!("vector activation"),
        }
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(prefix: &str, out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Linear {
        let mut w = Param::new(format!("{prefix}.w"), out_dim, in_dim);
        let mut b = Param::new(format!("{prefix}.b"), out_dim, 1);
        w.init_uniform(in_dim, rng);
        b.init_uniform(in_dim, rng);
        Linear { w, b }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        affine(&self.w, &self.b, x)
    }

    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        affine_backward(&mut self.w, &mut self.b, x, dy)
    }
}

/// 1-D convolution over the time axis; no padding, stride 1.
/// Weight layout: `w[out][in][tap]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: Param,
    pub b: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(
        prefix: &str,
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Conv1d {
        let mut w = Param::new(format!("{prefix}.w"), out_channels, in_channels * kernel);
        let mut b = Param::new(format!("{prefix}.b"), out_channels, 1);
        w.init_uniform(in_channels * kernel, rng);
        b.init_uniform(in_channels * kernel, rng);
        Conv1d {
            w,
            b,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn out_len(&self, in_len: usize) -> usize {
        in_len + 1 - self.kernel
    }

    pub fn forward(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let t_out = self.out_len(xs.len());
        let mut out = Vec::with_capacity(t_out);
        for t in 0..t_out {
            let mut row = self.b.data.clone();
            for (o, val) in row.iter_mut().enumerate() {
                let wrow = &self.w.data[o * self.w.cols..(o + 1) * self.w.cols];
                for dt in 0..self.kernel {
                    let x = &xs[t + dt];
                    let base = dt; // w index = i * kernel + dt
                    for (i, &xv) in x.iter().enumerate() {
                        *val += wrow[i * self.kernel + base] * xv;
                    }
                }
            }
            out.push(row);
        }
        out
    }

    pub fn backward(&mut self, xs: &[Vec<f64>], dys: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut dxs = vec![vec![0.0; self.in_channels]; xs.len()];
        for (t, dy) in dys.iter().enumerate() {
            for (o, &d) in dy.iter().enumerate() {
                self.b.grad[o] += d;
                let wrow = &self.w.data[o * self.w.cols..(o + 1) * self.w.cols];
                let grow = &mut self.w.grad[o * self.w.cols..(o + 1) * self.w.cols];
                for dt in 0..self.kernel {
                    let x = &xs[t + dt];
                    let dx = &mut dxs[t + dt];
                    for i in 0..self.in_channels {
                        grow[i * self.kernel + dt] += d * x[i];
                        dx[i] += wrow[i * self.kernel + dt] * d;
                    }
                }
            }
        }
        dxs
    }
}

/// Gated recurrent layer. Gate convention:
/// z = sig(Wz x + Uz h + bz), r = sig(Wr x + Ur h + br),
/// hcand = tanh(Wh x + Uh (r.h) + bh), h' = (1-z).h + z.hcand.
#[derive(Debug, Clone)]
pub struct GruLayer {
    pub wz: Param,
    pub uz: Param,
    pub bz: Param,
    pub wr: Param,
    pub ur: Param,
    pub br: Param,
    pub wh: Param,
    pub uh: Param,
    pub bh: Param,
    pub hidden: usize,
    pub input: usize,
}

/// Per-step values saved for backpropagation through time.
#[derive(Debug, Clone)]
pub struct GruStepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub hcand: Vec<f64>,
}

impl GruLayer {
    pub fn new(prefix: &str, hidden: usize, input: usize, rng: &mut ChaCha8Rng) -> GruLayer {
        let mut make = |name: &str, rows, cols, fan_in| {
            let mut p = Param::new(format!("{prefix}.{name}"), rows, cols);
            p.init_uniform(fan_in, rng);
            p
        };
        GruLayer {
            wz: make("wz", hidden, input, input),
            uz: make("uz", hidden, hidden, hidden),
            bz: make("bz", hidden, 1, hidden),
            wr: make("wr", hidden, input, input),
            ur: make("ur", hidden, hidden, hidden),
            br: make("br", hidden, 1, hidden),
            wh: make("wh", hidden, input, input),
            uh: make("uh", hidden, hidden, hidden),
            bh: make("bh", hidden, 1, hidden),
            hidden,
            input,
        }
    }

    /// One step; returns h' and the cache needed for backward.
    pub fn step(&self, x: &[f64], h: &[f64]) -> (Vec<f64>, GruStepCache) {
        let mut z = affine(&self.wz, &self.bz, x);
        add_matvec(&self.uz, h, &mut z);
        z.iter_mut().for_each(|v| *v = sigmoid(*v));

        let mut r = affine(&self.wr, &self.br, x);
        add_matvec(&self.ur, h, &mut r);
        r.iter_mut().for_each(|v| *v = sigmoid(*v));

        let rh: Vec<f64> = r.iter().zip(h).map(|(rv, hv)| rv * hv).collect();
        let mut hcand = affine(&self.wh, &self.bh, x);
        add_matvec(&self.uh, &rh, &mut hcand);
        hcand.iter_mut().for_each(|v| *v = v.tanh());

        let h_next: Vec<f64> = z
            .iter()
            .zip(h)
            .zip(&hcand)
            .map(|((zv, hv), cv)| (1.0 - zv) * hv + zv * cv)
            .collect();

        (
            h_next,
            GruStepCache {
                x: x.to_vec(),
                h_prev: h.to_vec(),
                z,
                r,
                hcand,
            },
        )
    }

    /// Run the whole sequence from a zero initial state.
    pub fn forward_seq(&self, xs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<GruStepCache>) {
        let mut h = vec![0.0; self.hidden];
        let mut hs = Vec::with_capacity(xs.len());
        let mut caches = Vec::with_capacity(xs.len());
        for x in xs {
            let (next, cache) = self.step(x, &h);
            hs.push(next.clone());
            caches.push(cache);
            h = next;
        }
        (hs, caches)
    }

    /// Backpropagate through time. `dhs` carries dL/dh for every step's
    /// output (zeros except the last step when only the final state feeds
    /// the head). Returns dL/dx per step.
    pub fn backward_seq(&mut self, caches: &[GruStepCache], dhs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.hidden;
        let mut dxs = vec![vec![0.0; self.input]; caches.len()];
        let mut dh_next = vec![0.0; n];

        for t in (0..caches.len()).rev() {
            let cache = &caches[t];
            let mut dh: Vec<f64> = dhs[t].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
            let mut dh_prev = vec![0.0; n];

            // h' = (1-z) h + z hcand
            let dz: Vec<f64> = (0..n)
                .map(|i| dh[i] * (cache.hcand[i] - cache.h_prev[i]))
                .collect();
            let dhcand: Vec<f64> = (0..n).map(|i| dh[i] * cache.z[i]).collect();
            for i in 0..n {
                dh_prev[i] += dh[i] * (1.0 - cache.z[i]);
            }

            // hcand = tanh(ah), ah = Wh x + Uh (r.h) + bh
            let dah: Vec<f64> = (0..n)
                .map(|i| dhcand[i] * (1.0 - cache.hcand[i] * cache.hcand[i]))
                .collect();
            let rh: Vec<f64> = cache
                .r
                .iter()
                .zip(&cache.h_prev)
                .map(|(r, h)| r * h)
                .collect();
            accumulate_outer(&mut self.wh, &dah, &cache.x);
            accumulate_outer(&mut self.uh, &dah, &rh);
            for i in 0..n {
                self.bh.grad[i] += dah[i];
            }
            let drh = matvec_t(&self.uh, &dah);
            let dr: Vec<f64> = (0..n).map(|i| drh[i] * cache.h_prev[i]).collect();
            for i in 0..n {
                dh_prev[i] += drh[i] * cache.r[i];
            }

            // r = sig(ar)
            let dar: Vec<f64> = (0..n)
                .map(|i| dr[i] * cache.r[i] * (1.0 - cache.r[i]))
                .collect();
            accumulate_outer(&mut self.wr, &dar, &cache.x);
            accumulate_outer(&mut self.ur, &dar, &cache.h_prev);
            for i in 0..n {
                self.br.grad[i] += dar[i];
            }
            let dhr = matvec_t(&self.ur, &dar);
            for i in 0..n {
                dh_prev[i] += dhr[i];
            }

            // z = sig(az)
            let daz: Vec<f64> = (0..n)
                .map(|i| dz[i] * cache.z[i] * (1.0 - cache.z[i]))
                .collect();
            accumulate_outer(&mut self.wz, &daz, &cache.x);
            accumulate_outer(&mut self.uz, &daz, &cache.h_prev);
            for i in 0..n {
                self.bz.grad[i] += daz[i];
            }
            let dhz = matvec_t(&self.uz, &daz);
            for i in 0..n {
                dh_prev[i] += dhz[i];
            }

            // dx through all three input projections
            let dx = &mut dxs[t];
            let add = |m: &Param, v: &[f64], dx: &mut Vec<f64>| {
                for r in 0..m.rows {
                    let row = &m.data[r * m.cols..(r + 1) * m.cols];
                    for c in 0..m.cols {
                        dx[c] += row[c] * v[r];
                    }
                }
            };
            add(&self.wh, &dah, dx);
            add(&self.wr, &dar, dx);
            add(&self.wz, &daz, dx);

            dh.clear();
            dh_next = dh_prev;
        }
        dxs
    }

    pub fn params(&self) -> [&Param; 9] {
        [
            &self.wz, &self.uz, &self.bz, &self.wr, &self.ur, &self.br, &self.wh, &self.uh,
            &self.bh,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 9] {
        [
            &mut self.wz,
            &mut self.uz,
            &mut self.bz,
            &mut self.wr,
            &mut self.ur,
            &mut self.br,
            &mut self.wh,
            &mut self.uh,
            &mut self.bh,
        ]
    }
}

fn add_matvec(m: &Param, x: &[f64], acc: &mut [f64]) {
    for (r, a) in acc.iter_mut().enumerate() {
        let row = &m.data[r * m.cols..(r + 1) * m.cols];
        *a += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
}

fn matvec_t(m: &Param, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols];
    for (r, &v) in y.iter().enumerate() {
        let row = &m.data[r * m.cols..(r + 1) * m.cols];
        for c in 0..m.cols {
            out[c] += row[c] * v;
        }
    }
    out
}

fn accumulate_outer(m: &mut Param, dy: &[f64], x: &[f64]) {
    for (r, &d) in dy.iter().enumerate() {
        let grow = &mut m.grad[r * m.cols..(r + 1) * m.cols];
        for (c, &xv) in x.iter().enumerate() {
            grow[c] += d * xv;
        }
    }
}

/// Inverted dropout: scales kept units by 1/(1-p) at train time so
/// inference needs no rescaling.
pub fn dropout_mask(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 - p;
    (0..len)
        .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gru_zero_params_zero_state_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut gru = GruLayer::new("g", 4, 3, &mut rng);
        for p in gru.params_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let (h, _) = gru.step(&[0.0; 3], &[0.0; 4]);
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_update_gate_forced_closed_copies_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut gru = GruLayer::new("g", 4, 3, &mut rng);
        // Large negative update-gate bias forces z ~ 0, so h' ~ h.
        gru.bz.data.iter_mut().for_each(|v| *v = -40.0);
        gru.wz.data.iter_mut().for_each(|v| *v = 0.0);
        gru.uz.data.iter_mut().for_each(|v| *v = 0.0);
        let h0 = vec![0.3, -0.7, 0.11, 0.9];
        let (h1, _) = gru.step(&[0.5, -0.2, 0.8], &h0);
        for (a, b) in h0.iter().zip(&h1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn activations_match_finite_differences() {
        let zs: Vec<f64> = vec![-2.7, -1.1, -0.4, 0.35, 0.9, 2.2];
        let eps = 1e-6;
        for act in ALL_ACTIVATIONS {
            let y = act.apply(&zs);
            // Probe each coordinate of the Jacobian via dy = e_i.
            for i in 0..zs.len() {
                let mut dy = vec![0.0; zs.len()];
                dy[i] = 1.0;
                let dz = act.backward(&zs, &y, &dy);
                for j in 0..zs.len() {
                    let mut zp = zs.clone();
                    zp[j] += eps;
                    let mut zm = zs.clone();
                    zm[j] -= eps;
                    let num = (act.apply(&zp)[i] - act.apply(&zm)[i]) / (2.0 * eps);
                    assert!(
                        (dz[j] - num).abs() < 1e-6,
                        "{act:?} d y{i}/d z{j}: analytic {} numeric {num}",
                        dz[j]
                    );
                }
            }
        }
    }

    #[test]
    fn conv_shapes_and_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv1d::new("c", 2, 2, 1, &mut rng);
        // Identity kernel: out[o] = x[o]
        conv.w.data.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        conv.b.data.copy_from_slice(&[0.0, 0.0]);
        let xs = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let ys = conv.forward(&xs);
        assert_eq!(ys.len(), 3);
        assert_eq!(ys, xs);
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = dropout_mask(1000, 0.3, &mut rng);
        let kept = mask.iter().filter(|&&m| m > 0.0).count();
        assert!((kept as f64 / 1000.0 - 0.7).abs() < 0.05);
        for &m in &mask {
            assert!(m == 0.0 || (m - 1.0 / 0.7).abs() < 1e-12);
        }
    }
}
