//! Neural-network primitives with explicit reverse-mode backward passes:
//! 3x3 convolutions via im2col, linear layers, activations, pooling, and
//! inverted dropout. Everything is f64 so finite-difference checks are tight.

use crate::rng::SimRng;

/// A named parameter tensor. Gradients live in a parallel [`GradBuffer`]
/// keyed by the variable's slot, so shard-parallel backward passes can sum
/// their buffers deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct Var {
    pub name: String,
    pub shape: Vec<usize>,
    pub w: Vec<f64>,
    /// Slot in the gradient buffer; assigned at network construction.
    pub slot: usize,
}

impl Var {
    pub fn len(&self) -> usize {
        self.w.len()
    }
}

/// Allocates slots and draws fan-in uniform initial values.
pub struct VarBuilder<'a> {
    pub rng: &'a mut SimRng,
    pub next_slot: usize,
}

impl<'a> VarBuilder<'a> {
    pub fn new(rng: &'a mut SimRng) -> Self {
        Self { rng, next_slot: 0 }
    }

    /// Fan-in uniform weights: U[-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Var {
        let n: usize = shape.iter().product();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..n)
            .map(|_| self.rng.uniform_in(-bound, bound))
            .collect();
        let slot = self.next_slot;
        self.next_slot += 1;
        Var {
            name: name.to_string(),
            shape: shape.to_vec(),
            w,
            slot,
        }
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        let slot = self.next_slot;
        self.next_slot += 1;
        Var {
            name: name.to_string(),
            shape: shape.to_vec(),
            w: vec![0.0; n],
            slot,
        }
    }
}

/// Per-variable gradient accumulators, index-aligned with variable slots.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    pub by_slot: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(vars: &[&Var]) -> GradBuffer {
        let mut by_slot = vec![Vec::new(); vars.len()];
        for v in vars {
            by_slot[v.slot] = vec![0.0; v.len()];
        }
        GradBuffer { by_slot }
    }

    pub fn add_from(&mut self, other: &GradBuffer) {
        for (a, b) in self.by_slot.iter_mut().zip(other.by_slot.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.by_slot.iter_mut() {
            for x in g.iter_mut() {
                *x *= k;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Matrix products (row-major). The ikj ordering keeps the inner loop
// contiguous so the compiler can vectorize it.
// ---------------------------------------------------------------------------

/// C[m,n] += A[m,k] * B[k,n]
pub fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C[m,n] += A^T B where A is [k,m], B is [k,n].
pub fn mm_ta_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C[m,n] += A B^T where A is [m,k], B is [n,k].
pub fn mm_tb_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            crow[j] += acc;
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution (3x3, pad 1, stride 1 or 2) via im2col
// ---------------------------------------------------------------------------

pub fn conv_out_dim(dim: usize, stride: usize) -> usize {
    (dim - 1) / stride + 1
}

/// Expand x[cin, h, w] into patch rows: col[out_h*out_w, cin*9]. Row j holds
/// the 3x3 receptive field of output position j, so every pass over the
/// matrix runs along contiguous memory.
pub fn im2col(x: &[f64], cin: usize, h: usize, w: usize, stride: usize, col: &mut Vec<f64>) {
    let oh = conv_out_dim(h, stride);
    let ow = conv_out_dim(w, stride);
    let k9 = cin * 9;
    col.clear();
    col.resize(oh * ow * k9, 0.0);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut col[(oy * ow + ox) * k9..(oy * ow + ox + 1) * k9];
            for c in 0..cin {
                let plane = &x[c * h * w..(c + 1) * h * w];
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[c * 9 + ky * 3..c * 9 + ky * 3 + 3];
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[kx] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter patch-row gradients back into an input-shaped gradient
/// (the transpose of [`im2col`]).
pub fn col2im(col: &[f64], cin: usize, h: usize, w: usize, stride: usize, dx: &mut [f64]) {
    let oh = conv_out_dim(h, stride);
    let ow = conv_out_dim(w, stride);
    let k9 = cin * 9;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &col[(oy * ow + ox) * k9..(oy * ow + ox + 1) * k9];
            for c in 0..cin {
                let plane = &mut dx[c * h * w..(c + 1) * h * w];
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[c * 9 + ky * 3..c * 9 + ky * 3 + 3];
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[kx];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub w: Var, // [cout, cin*9]
    pub b: Var, // [cout]
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(vb: &mut VarBuilder, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let w = vb.weight(&format!("{name}.w"), &[cout, cin * 9], cin * 9);
        let b = vb.zeros(&format!("{name}.b"), &[cout]);
        Conv2d {
            w,
            b,
            cin,
            cout,
            stride,
        }
    }

    /// Returns (y, col) where col (patch rows) is kept for the backward pass.
    /// Output layout is [cout, oh*ow].
    pub fn forward(&self, x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let oh = conv_out_dim(h, self.stride);
        let ow = conv_out_dim(w, self.stride);
        let n = oh * ow;
        let k9 = self.cin * 9;
        let mut col = Vec::new();
        im2col(x, self.cin, h, w, self.stride, &mut col);
        let mut y = vec![0.0; self.cout * n];
        // y[c, j] = dot(W[c, :], col[j, :]) + b[c]; both operands contiguous.
        for c in 0..self.cout {
            let wrow = &self.w.w[c * k9..(c + 1) * k9];
            let bias = self.b.w[c];
            let out = &mut y[c * n..(c + 1) * n];
            for (j, o) in out.iter_mut().enumerate() {
                let patch = &col[j * k9..(j + 1) * k9];
                let mut acc = 0.0;
                for (a, b) in wrow.iter().zip(patch.iter()) {
                    acc += a * b;
                }
                *o = acc + bias;
            }
        }
        (y, col)
    }

    /// Accumulates parameter gradients and returns dx. `dy` is [cout, oh*ow].
    pub fn backward(
        &self,
        col: &[f64],
        dy: &[f64],
        h: usize,
        w: usize,
        grads: &mut GradBuffer,
    ) -> Vec<f64> {
        let oh = conv_out_dim(h, self.stride);
        let ow = conv_out_dim(w, self.stride);
        let n = oh * ow;
        let k9 = self.cin * 9;
        // dW[c, :] += sum_j dy[c, j] * col[j, :]; db[c] += sum_j dy[c, j].
        let mut bias_accs = vec![0.0; self.cout];
        {
            let gw = &mut grads.by_slot[self.w.slot];
            for c in 0..self.cout {
                let drow = &dy[c * n..(c + 1) * n];
                let grow = &mut gw[c * k9..(c + 1) * k9];
                let mut bias_acc = 0.0;
                for (j, &d) in drow.iter().enumerate() {
                    bias_acc += d;
                    if d == 0.0 {
                        continue;
                    }
                    let patch = &col[j * k9..(j + 1) * k9];
                    for (g, &p) in grow.iter_mut().zip(patch.iter()) {
                        *g += d * p;
                    }
                }
                bias_accs[c] = bias_acc;
            }
        }
        for (c, acc) in bias_accs.into_iter().enumerate() {
            grads.by_slot[self.b.slot][c] += acc;
        }
        // dcol[j, :] += sum_c dy[c, j] * W[c, :], then scatter to dx.
        let mut dcol = vec![0.0; n * k9];
        for c in 0..self.cout {
            let drow = &dy[c * n..(c + 1) * n];
            let wrow = &self.w.w[c * k9..(c + 1) * k9];
            for (j, &d) in drow.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let patch = &mut dcol[j * k9..(j + 1) * k9];
                for (g, &wv) in patch.iter_mut().zip(wrow.iter()) {
                    *g += d * wv;
                }
            }
        }
        let mut dx = vec![0.0; self.cin * h * w];
        col2im(&dcol, self.cin, h, w, self.stride, &mut dx);
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Var, // [out, in]
    pub b: Var, // [out]
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new(vb: &mut VarBuilder, name: &str, n_in: usize, n_out: usize) -> Self {
        let w = vb.weight(&format!("{name}.w"), &[n_out, n_in], n_in);
        let b = vb.zeros(&format!("{name}.b"), &[n_out]);
        Linear { w, b, n_in, n_out }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_in);
        let mut y = self.b.w.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.w.w[o * self.n_in..(o + 1) * self.n_in];
            let mut acc = 0.0;
            for (xv, wv) in x.iter().zip(row.iter()) {
                acc += xv * wv;
            }
            *yo += acc;
        }
        y
    }

    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut GradBuffer) -> Vec<f64> {
        for (o, &d) in dy.iter().enumerate() {
            if d != 0.0 {
                let gw = &mut grads.by_slot[self.w.slot];
                let row = &mut gw[o * self.n_in..(o + 1) * self.n_in];
                for (g, &xv) in row.iter_mut().zip(x.iter()) {
                    *g += d * xv;
                }
            }
            grads.by_slot[self.b.slot][o] += d;
        }
        let mut dx = vec![0.0; self.n_in];
        for (o, &d) in dy.iter().enumerate() {
            if d != 0.0 {
                let row = &self.w.w[o * self.n_in..(o + 1) * self.n_in];
                for (g, &wv) in dx.iter_mut().zip(row.iter()) {
                    *g += d * wv;
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops and pooling
// ---------------------------------------------------------------------------

pub fn relu(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// dy filtered by the forward output (y > 0).
pub fn relu_backward(y: &[f64], dy: &mut [f64]) {
    for (d, &v) in dy.iter_mut().zip(y.iter()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}

/// 2x2 average pooling with stride 2 (odd trailing rows/cols dropped).
pub fn avgpool2(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let oh = h / 2;
    let ow = w / 2;
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let out = &mut y[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = (2 * oy) * w + 2 * ox;
                let i1 = (2 * oy + 1) * w + 2 * ox;
                out[oy * ow + ox] = 0.25 * (plane[i0] + plane[i0 + 1] + plane[i1] + plane[i1 + 1]);
            }
        }
    }
    (y, oh, ow)
}

pub fn avgpool2_backward(dy: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let oh = h / 2;
    let ow = w / 2;
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let dplane = &mut dx[ch * h * w..(ch + 1) * h * w];
        let grad = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * grad[oy * ow + ox];
                let i0 = (2 * oy) * w + 2 * ox;
                let i1 = (2 * oy + 1) * w + 2 * ox;
                dplane[i0] += g;
                dplane[i0 + 1] += g;
                dplane[i1] += g;
                dplane[i1 + 1] += g;
            }
        }
    }
    dx
}

/// Global average pool: [c, h, w] -> [c].
pub fn gap(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut y = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for v in &x[ch * hw..(ch + 1) * hw] {
            acc += *v;
        }
        y[ch] = acc / hw as f64;
    }
    y
}

pub fn gap_backward(dy: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut dx = vec![0.0; c * hw];
    for ch in 0..c {
        let g = dy[ch] / hw as f64;
        for v in &mut dx[ch * hw..(ch + 1) * hw] {
            *v = g;
        }
    }
    dx
}

/// Inverted dropout: elements survive with probability 1-rate and are scaled
/// by 1/(1-rate) so the expectation matches the inference pass.
pub fn dropout_mask(rng: &mut SimRng, n: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..n)
        .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let mut rng = SimRng::new(5);
        let (m, k, n) = (4, 7, 5);
        let a: Vec<f64> = (0..m * k).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mut c = vec![0.0; m * n];
        mm_acc(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                assert!((c[i * n + j] - acc).abs() < 1e-12);
            }
        }
        // Transposed variants agree with the plain product of transposes.
        let mut c_ta = vec![0.0; k * k];
        mm_ta_acc(&a, &a, &mut c_ta, k, m, k);
        for i in 0..k {
            for j in 0..k {
                let mut acc = 0.0;
                for kk in 0..m {
                    acc += a[kk * k + i] * a[kk * k + j];
                }
                assert!((c_ta[i * k + j] - acc).abs() < 1e-12);
            }
        }
        let mut c_tb = vec![0.0; m * m];
        mm_tb_acc(&a, &a, &mut c_tb, m, k, m);
        for i in 0..m {
            for j in 0..m {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[i * k + kk] * a[j * k + kk];
                }
                assert!((c_tb[i * m + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        // A kernel with 1 at the center reproduces the input (stride 1).
        let mut rng = SimRng::new(9);
        let mut vb = VarBuilder::new(&mut rng);
        let mut conv = Conv2d::new(&mut vb, "c", 1, 1, 1);
        for v in conv.w.w.iter_mut() {
            *v = 0.0;
        }
        conv.w.w[4] = 1.0; // center of the 3x3
        conv.b.w[0] = 0.0;
        let x: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let (y, _) = conv.forward(&x, 5, 5);
        assert_eq!(y.len(), 25);
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let mut rng = SimRng::new(11);
        let (cin, h, w, stride) = (3, 6, 5, 2);
        let x: Vec<f64> = (0..cin * h * w).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mut col = Vec::new();
        im2col(&x, cin, h, w, stride, &mut col);
        let c: Vec<f64> = (0..col.len()).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let lhs: f64 = col.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, cin, h, w, stride, &mut back);
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn dropout_expectation_matches_inference() {
        let mut rng = SimRng::new(13);
        let n = 64;
        let rate = 0.5;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin() + 1.5).collect();
        let trials = 10_000;
        let mut mean = vec![0.0; n];
        for _ in 0..trials {
            let mask = dropout_mask(&mut rng, n, rate);
            for i in 0..n {
                mean[i] += x[i] * mask[i];
            }
        }
        for i in 0..n {
            mean[i] /= trials as f64;
            let rel = (mean[i] - x[i]).abs() / x[i].abs();
            assert!(rel < 0.05, "element {i}: {} vs {}", mean[i], x[i]);
        }
        let grand_rel: f64 = (0..n)
            .map(|i| (mean[i] - x[i]) / x[i])
            .sum::<f64>()
            .abs()
            / n as f64;
        assert!(grand_rel < 0.01, "grand relative error {grand_rel}");
    }

    #[test]
    fn gap_backward_distributes_evenly() {
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let y = gap(&x, 3, 4);
        assert_eq!(y, vec![1.5, 5.5, 9.5]);
        let dx = gap_backward(&[1.0, 2.0, 4.0], 3, 4);
        assert_eq!(dx[0], 0.25);
        assert_eq!(dx[4], 0.5);
        assert_eq!(dx[8], 1.0);
    }
}
