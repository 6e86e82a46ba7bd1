//! Batched ReLU multilayer perceptron with a softplus head and hand-written
//! reverse pass. Rows of every matrix are samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Layer layout of the density network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpShape {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub width: usize,
    /// Hidden layer that additionally receives the network input; 0 disables.
    pub skip_layer: usize,
}

impl MlpShape {
    pub fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else if layer == self.skip_layer {
            self.width + self.input_dim
        } else {
            self.width
        }
    }

    /// Offsets of `(weights, bias)` for every hidden layer, then the head.
    fn offsets(&self) -> (Vec<(usize, usize)>, usize) {
        let mut offsets = Vec::with_capacity(self.hidden_layers);
        let mut at = 0;
        for layer in 0..self.hidden_layers {
            let fan_in = self.layer_input_dim(layer);
            offsets.push((at, at + fan_in * self.width));
            at += (fan_in + 1) * self.width;
        }
        (offsets, at)
    }

    pub fn param_count(&self) -> usize {
        let hidden: usize = (0..self.hidden_layers)
            .map(|l| (self.layer_input_dim(l) + 1) * self.width)
            .sum();
        hidden + self.head_fan_in() + 1
    }

    fn head_fan_in(&self) -> usize {
        if self.hidden_layers == 0 {
            self.input_dim
        } else {
            self.width
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.param_count()];
        let (offsets, head) = self.offsets();
        for (layer, &(w, b)) in offsets.iter().enumerate() {
            let limit = (6.0 / (self.layer_input_dim(layer) + self.width) as f64).sqrt();
            for p in &mut params[w..b] {
                *p = rng.gen_range(-limit..=limit);
            }
        }
        let fan_in = self.head_fan_in();
        let limit = (6.0 / (fan_in + 1) as f64).sqrt();
        for p in &mut params[head..head + fan_in] {
            *p = rng.gen_range(-limit..=limit);
        }
        params
    }
}

pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-major `c = a·b + beta·c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(k == 0 || b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert!(c.len() >= (m - 1) * ldc + n);
    // SAFETY: the asserts above bound every index touched by the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Activations kept by a forward pass for the reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    rows: usize,
    /// `acts[0]` is the network input, `acts[i + 1]` the output of hidden layer `i`.
    acts: Vec<Vec<f64>>,
    skip_input: Vec<f64>,
    head_pre: Vec<f64>,
}

impl Tape {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// ReLU on/off pattern of every hidden unit, row-major per layer.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.acts[1..]
            .iter()
            .flat_map(|a| a.iter().map(|v| *v > 0.0))
            .collect()
    }
}

/// Forward pass over `rows` inputs of width `shape.input_dim`.
/// Returns densities; fills `tape` when given.
pub fn forward(
    shape: &MlpShape,
    params: &[f64],
    input: Vec<f64>,
    rows: usize,
    tape: Option<&mut Tape>,
) -> Vec<f64> {
    debug_assert_eq!(input.len(), rows * shape.input_dim);
    debug_assert_eq!(params.len(), shape.param_count());
    let (offsets, head) = shape.offsets();
    let width = shape.width;
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(shape.hidden_layers + 1);
    acts.push(input);
    let mut skip_input = Vec::new();
    for (layer, &(w_at, b_at)) in offsets.iter().enumerate() {
        let fan_in = shape.layer_input_dim(layer);
        let bias = &params[b_at..b_at + width];
        let mut out = Vec::with_capacity(rows * width);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        let x: &[f64] = if layer > 0 && layer == shape.skip_layer {
            skip_input = concat_rows(&acts[layer], width, &acts[0], shape.input_dim, rows);
            &skip_input
        } else {
            &acts[layer]
        };
        gemm(
            rows,
            fan_in,
            width,
            x,
            (fan_in, 1),
            &params[w_at..b_at],
            (width, 1),
            1.0,
            &mut out,
            width,
        );
        for v in &mut out {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        acts.push(out);
    }
    let fan_in = shape.head_fan_in();
    let last = acts.last().unwrap();
    let head_w = &params[head..head + fan_in];
    let head_b = params[head + fan_in];
    let head_pre: Vec<f64> = last
        .chunks_exact(fan_in)
        .map(|row| head_b + row.iter().zip(head_w).map(|(a, w)| a * w).sum::<f64>())
        .collect();
    let sigma = head_pre.iter().map(|&z| softplus(z)).collect();
    if let Some(tape) = tape {
        tape.rows = rows;
        tape.acts = acts;
        tape.skip_input = skip_input;
        tape.head_pre = head_pre;
    }
    sigma
}

fn concat_rows(a: &[f64], wa: usize, b: &[f64], wb: usize, rows: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * (wa + wb));
    for r in 0..rows {
        out.extend_from_slice(&a[r * wa..(r + 1) * wa]);
        out.extend_from_slice(&b[r * wb..(r + 1) * wb]);
    }
    out
}

/// Accumulates `Σ_r d_sigma[r] · ∂σ_r/∂θ` into `grad`.
pub fn backward(shape: &MlpShape, params: &[f64], tape: &Tape, d_sigma: &[f64], grad: &mut [f64]) {
    let rows = tape.rows;
    debug_assert_eq!(d_sigma.len(), rows);
    debug_assert_eq!(grad.len(), params.len());
    let (offsets, head) = shape.offsets();
    let width = shape.width;
    let fan_in = shape.head_fan_in();

    let d_pre: Vec<f64> = d_sigma
        .iter()
        .zip(&tape.head_pre)
        .map(|(g, &z)| g * sigmoid(z))
        .collect();
    let last = tape.acts.last().unwrap();
    {
        let (gw, gb) = grad[head..head + fan_in + 1].split_at_mut(fan_in);
        for (row, &d) in last.chunks_exact(fan_in).zip(&d_pre) {
            if d != 0.0 {
                for (g, a) in gw.iter_mut().zip(row) {
                    *g += d * a;
                }
            }
            gb[0] += d;
        }
    }
    if shape.hidden_layers == 0 {
        return;
    }
    let head_w = &params[head..head + fan_in];
    let mut d_act: Vec<f64> = Vec::with_capacity(rows * width);
    for &d in &d_pre {
        d_act.extend(head_w.iter().map(|w| d * w));
    }

    for layer in (0..shape.hidden_layers).rev() {
        let (w_at, b_at) = offsets[layer];
        let layer_in = shape.layer_input_dim(layer);
        // ReLU gate
        for (d, a) in d_act.iter_mut().zip(&tape.acts[layer + 1]) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
        let x: &[f64] = if layer > 0 && layer == shape.skip_layer {
            &tape.skip_input
        } else {
            &tape.acts[layer]
        };
        // dW = Xᵀ · dZ
        gemm(
            layer_in,
            rows,
            width,
            x,
            (1, layer_in),
            &d_act,
            (width, 1),
            1.0,
            &mut grad[w_at..b_at],
            width,
        );
        let gb = &mut grad[b_at..b_at + width];
        for row in d_act.chunks_exact(width) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        if layer == 0 {
            break;
        }
        // dX = dZ · Wᵀ
        let mut d_in = vec![0.0; rows * layer_in];
        gemm(
            rows,
            width,
            layer_in,
            &d_act,
            (width, 1),
            &params[w_at..b_at],
            (1, width),
            0.0,
            &mut d_in,
            layer_in,
        );
        if layer_in == width {
            d_act = d_in;
        } else {
            // skip layer: keep the part flowing into the previous hidden layer
            d_act = d_in
                .chunks_exact(layer_in)
                .flat_map(|row| row[..width].iter().copied())
                .collect();
        }
    }
}
