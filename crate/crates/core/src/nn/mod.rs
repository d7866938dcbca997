//! A small CPU training engine: NCHW tensors, im2col convolutions on top of
//! `matrixmultiply`, and layers with explicit backward passes.
//!
//! Layers cache what their backward pass needs during `forward(.., train =
//! true)`; `infer` never touches the cache. Everything runs on one thread in a
//! fixed order, so results are bit-reproducible.

mod adam;
mod conv;
mod linear;
mod norm;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use adam::{Adam, AdamConfig};
pub use conv::{Conv2d, ConvTranspose2d};
pub use linear::Linear;
pub use norm::GroupNorm;

/// Dense NCHW tensor. Vectors are stored as `[n, f, 1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        Self::from_vec(rows, cols, 1, 1, data)
    }

    pub fn per_sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let s = self.per_sample();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let s = self.per_sample();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn reshape(mut self, c: usize, h: usize, w: usize) -> Self {
        assert_eq!(c * h * w, self.per_sample(), "reshape keeps the element count");
        self.c = c;
        self.h = h;
        self.w = w;
        self
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Trainable values and their accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    pub fn filled(len: usize, v: f32) -> Self {
        Self::new(vec![v; len])
    }

    pub fn normal<R: Rng + ?Sized>(len: usize, std: f32, rng: &mut R) -> Self {
        let d = Normal::new(0.0, std).expect("positive std");
        Self::new((0..len).map(|_| d.sample(rng)).collect())
    }

    pub fn uniform<R: Rng + ?Sized>(len: usize, bound: f32, rng: &mut R) -> Self {
        Self::new((0..len).map(|_| rng.random_range(-bound..=bound)).collect())
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything that owns parameters, visited in a fixed order.
pub trait Parameterized {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }
}

/// `C = op(A) * op(B) + beta * C`, all row-major; `A` is `m x k`, `B` is
/// `k x n` after the optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover m*k, k*n and m*n elements under these strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn relu_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` where the ReLU output was not positive.
pub fn relu_backward(grad: &mut Tensor, output: &Tensor) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn add_inplace(a: &mut Tensor, b: &Tensor) {
    assert_eq!(a.shape(), b.shape());
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let hw = (x.h * x.w) as f32;
    let data = x.data.chunks(x.h * x.w).map(|ch| ch.iter().sum::<f32>() / hw).collect();
    Tensor::from_vec(x.n, x.c, 1, 1, data)
}

pub fn global_avg_pool_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let inv = 1.0 / (h * w) as f32;
    let mut data = Vec::with_capacity(dy.data.len() * h * w);
    for &g in &dy.data {
        data.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Tensor::from_vec(dy.n, dy.c, h, w, data)
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Finite-difference checks shared by the layer tests.

    use super::*;
    use crate::util::rng_from_seed;

    pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape[0], shape[1], shape[2], shape[3], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// `L = sum(r * y)` for a fixed random projection `r`.
    pub fn projected(y: &Tensor, r: &Tensor) -> f64 {
        y.data.iter().zip(&r.data).map(|(&a, &b)| a as f64 * b as f64).sum()
    }

    /// Central difference at `eps`. When the forward and backward one-sided
    /// slopes disagree the step crossed a ReLU kink and `None` is returned.
    /// `roundoff` bounds the f32 error of one loss evaluation.
    fn numeric(mut loss: impl FnMut(f32) -> f64, eps: f32, floor: f64, roundoff: f64) -> Option<f64> {
        let (lp, l0, lm) = (loss(eps), loss(0.0), loss(-eps));
        let e = eps as f64;
        let (fwd, bwd) = ((lp - l0) / e, (l0 - lm) / e);
        let scale = fwd.abs().max(bwd.abs()).max(floor);
        ((fwd - bwd).abs() < 5e-3 * scale + 4.0 * roundoff / e).then_some((lp - lm) / (2.0 * e))
    }

    struct Tally {
        checked: usize,
        skipped: usize,
    }

    impl Tally {
        fn record(&mut self, analytic: f64, numeric: Option<f64>, floor: f64, what: &str) {
            match numeric {
                Some(n) => {
                    let scale = analytic.abs().max(n.abs()).max(floor);
                    assert!((analytic - n).abs() / scale < 2e-2, "{what}: analytic {analytic} vs numeric {n}");
                    self.checked += 1;
                }
                None => self.skipped += 1,
            }
        }
    }

    fn floor_of(g: &[f32]) -> f64 {
        0.05 * g.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64 + 1e-6
    }

    /// Checks input and parameter gradients of a layer against central differences.
    pub fn check_layer<L, F, B>(layer: &mut L, x: &Tensor, mut fwd: F, mut bwd: B, seed: u64)
    where
        L: Parameterized,
        F: FnMut(&mut L, &Tensor) -> Tensor,
        B: FnMut(&mut L, &Tensor) -> Tensor,
    {
        let y = fwd(layer, x);
        let r = random_tensor(y.shape(), seed);
        // Independent rounding errors grow like the L2 norm of the summands.
        let roundoff = 4.0
            * f32::EPSILON as f64
            * y.data.iter().zip(&r.data).map(|(a, b)| ((a * b) as f64).powi(2)).sum::<f64>().sqrt();
        layer.zero_grad();
        let dx = bwd(layer, &r);
        let eps = 1e-3f32;
        let mut rng = rng_from_seed(seed + 1);
        let mut tally = Tally { checked: 0, skipped: 0 };

        let floor = floor_of(&dx.data);
        for _ in 0..12 {
            let i = rng.random_range(0..x.data.len());
            let num = numeric(
                |e| {
                    let mut xp = x.clone();
                    xp.data[i] += e;
                    projected(&fwd(layer, &xp), &r)
                },
                eps,
                floor,
                roundoff,
            );
            tally.record(dx.data[i] as f64, num, floor, "input grad");
        }

        let mut grads = Vec::new();
        layer.visit_params(&mut |p| grads.push(p.grad.clone()));
        for (pi, g) in grads.iter().enumerate() {
            let floor = floor_of(g);
            for _ in 0..6 {
                let j = rng.random_range(0..g.len());
                let perturb = |layer: &mut L, delta: f32| {
                    let mut k = 0;
                    layer.visit_params(&mut |p| {
                        if k == pi {
                            p.value[j] += delta;
                        }
                        k += 1;
                    });
                };
                let num = numeric(
                    |e| {
                        perturb(layer, e);
                        let l = projected(&fwd(layer, x), &r);
                        perturb(layer, -e);
                        l
                    },
                    eps,
                    floor,
                    roundoff,
                );
                tally.record(g[j] as f64, num, floor, "param grad");
            }
        }
        assert!(
            tally.skipped * 4 <= tally.checked + tally.skipped,
            "too many non-smooth coordinates: {} of {}",
            tally.skipped,
            tally.checked + tally.skipped
        );
    }
}
