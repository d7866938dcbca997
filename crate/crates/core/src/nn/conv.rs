use rand::Rng;

use super::{gemm, Param, Parameterized, Tensor};

fn out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Unfolds one `c x h x w` sample into a `(c*k*k) x (ho*wo)` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize, col: &mut [f32]) {
    let plane = ho * wo;
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the image.
#[allow(clippy::too_many_arguments)]
fn col2im(col: &[f32], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize, x: &mut [f32]) {
    let plane = ho * wo;
    for ch in 0..c {
        let xc = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution, weight laid out `[cout, cin*k*k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv2d {
    /// He-normal initialisation.
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool, rng: &mut R) -> Self {
        let fan_in = (cin * k * k) as f32;
        Self {
            cin,
            cout,
            k,
            stride,
            pad,
            weight: Param::normal(cout * cin * k * k, (2.0 / fan_in).sqrt(), rng),
            bias: bias.then(|| Param::filled(cout, 0.0)),
            input: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (out_len(h, self.k, self.stride, self.pad), out_len(w, self.k, self.stride, self.pad))
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let y = self.infer(x);
        self.input = train.then(|| x.clone());
        y
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(x.h, x.w);
        let rows = self.cin * self.k * self.k;
        let mut col = vec![0.0; rows * ho * wo];
        let mut y = Tensor::zeros(x.n, self.cout, ho, wo);
        for i in 0..x.n {
            im2col(x.sample(i), self.cin, x.h, x.w, self.k, self.stride, self.pad, ho, wo, &mut col);
            let out = y.sample_mut(i);
            gemm(self.cout, rows, ho * wo, &self.weight.value, false, &col, false, 0.0, out);
            if let Some(b) = &self.bias {
                for (plane, &bv) in out.chunks_mut(ho * wo).zip(&b.value) {
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("conv backward without cached forward");
        let (ho, wo) = (dy.h, dy.w);
        let rows = self.cin * self.k * self.k;
        let mut col = vec![0.0; rows * ho * wo];
        let mut dcol = vec![0.0; rows * ho * wo];
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        for i in 0..x.n {
            im2col(x.sample(i), self.cin, x.h, x.w, self.k, self.stride, self.pad, ho, wo, &mut col);
            let g = dy.sample(i);
            gemm(self.cout, ho * wo, rows, g, false, &col, true, 1.0, &mut self.weight.grad);
            if let Some(b) = &mut self.bias {
                for (plane, bg) in g.chunks(ho * wo).zip(b.grad.iter_mut()) {
                    *bg += plane.iter().sum::<f32>();
                }
            }
            gemm(rows, self.cout, ho * wo, &self.weight.value, true, g, false, 0.0, &mut dcol);
            col2im(&dcol, self.cin, x.h, x.w, self.k, self.stride, self.pad, ho, wo, dx.sample_mut(i));
        }
        dx
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Transposed convolution, weight laid out `[cin, cout*k*k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        // Each output pixel sees about cin*k*k/stride^2 inputs.
        let fan_in = (cin * k * k / (stride * stride)).max(1) as f32;
        Self {
            cin,
            cout,
            k,
            stride,
            pad,
            weight: Param::normal(cin * cout * k * k, (2.0 / fan_in).sqrt(), rng),
            bias: Param::filled(cout, 0.0),
            input: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |l: usize| (l - 1) * self.stride + self.k - 2 * self.pad;
        (f(h), f(w))
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let y = self.infer(x);
        self.input = train.then(|| x.clone());
        y
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "deconv input channels");
        let (ho, wo) = self.out_hw(x.h, x.w);
        let rows = self.cout * self.k * self.k;
        let hw = x.h * x.w;
        let mut col = vec![0.0; rows * hw];
        let mut y = Tensor::zeros(x.n, self.cout, ho, wo);
        for i in 0..x.n {
            gemm(rows, self.cin, hw, &self.weight.value, true, x.sample(i), false, 0.0, &mut col);
            let out = y.sample_mut(i);
            col2im(&col, self.cout, ho, wo, self.k, self.stride, self.pad, x.h, x.w, out);
            for (plane, &bv) in out.chunks_mut(ho * wo).zip(&self.bias.value) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("deconv backward without cached forward");
        let rows = self.cout * self.k * self.k;
        let hw = x.h * x.w;
        let mut col = vec![0.0; rows * hw];
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        for i in 0..x.n {
            let g = dy.sample(i);
            for (plane, bg) in g.chunks(dy.h * dy.w).zip(self.bias.grad.iter_mut()) {
                *bg += plane.iter().sum::<f32>();
            }
            im2col(g, self.cout, dy.h, dy.w, self.k, self.stride, self.pad, x.h, x.w, &mut col);
            gemm(self.cin, hw, rows, x.sample(i), false, &col, true, 1.0, &mut self.weight.grad);
            gemm(self.cin, rows, hw, &self.weight.value, false, &col, false, 0.0, dx.sample_mut(i));
        }
        dx
    }
}

impl Parameterized for ConvTranspose2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{check_layer, random_tensor};
    use super::*;
    use crate::util::rng_from_seed;

    /// Direct nested-loop convolution.
    fn naive_conv(c: &Conv2d, x: &Tensor) -> Tensor {
        let (ho, wo) = c.out_hw(x.h, x.w);
        let mut y = Tensor::zeros(x.n, c.cout, ho, wo);
        for n in 0..x.n {
            for o in 0..c.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = c.bias.as_ref().map_or(0.0, |b| b.value[o]) as f64;
                        for i in 0..c.cin {
                            for ki in 0..c.k {
                                for kj in 0..c.k {
                                    let iy = (oy * c.stride + ki) as isize - c.pad as isize;
                                    let ix = (ox * c.stride + kj) as isize - c.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                        let xv = x.data[((n * x.c + i) * x.h + iy as usize) * x.w + ix as usize];
                                        let wv = c.weight.value[((o * c.cin + i) * c.k + ki) * c.k + kj];
                                        acc += xv as f64 * wv as f64;
                                    }
                                }
                            }
                        }
                        y.data[((n * c.cout + o) * ho + oy) * wo + ox] = acc as f32;
                    }
                }
            }
        }
        y
    }

    /// Transposed convolution as a scatter of every input pixel.
    fn naive_deconv(c: &ConvTranspose2d, x: &Tensor) -> Tensor {
        let (ho, wo) = c.out_hw(x.h, x.w);
        let mut y = Tensor::zeros(x.n, c.cout, ho, wo);
        for n in 0..x.n {
            for o in 0..c.cout {
                for v in &mut y.sample_mut(n)[o * ho * wo..(o + 1) * ho * wo] {
                    *v = c.bias.value[o];
                }
            }
            for i in 0..c.cin {
                for iy in 0..x.h {
                    for ix in 0..x.w {
                        let xv = x.data[((n * x.c + i) * x.h + iy) * x.w + ix];
                        for o in 0..c.cout {
                            for ki in 0..c.k {
                                for kj in 0..c.k {
                                    let oy = (iy * c.stride + ki) as isize - c.pad as isize;
                                    let ox = (ix * c.stride + kj) as isize - c.pad as isize;
                                    if oy >= 0 && ox >= 0 && (oy as usize) < ho && (ox as usize) < wo {
                                        let wv = c.weight.value[((i * c.cout + o) * c.k + ki) * c.k + kj];
                                        y.data[((n * c.cout + o) * ho + oy as usize) * wo + ox as usize] += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        assert_eq!(a.shape(), b.shape());
        a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = rng_from_seed(3);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0)] {
            let mut c = Conv2d::new(3, 4, k, s, p, true, &mut rng);
            c.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_tensor([2, 3, 7, 6], 5);
            assert!(max_abs_diff(&c.infer(&x), &naive_conv(&c, &x)) < 1e-5);
        }
    }

    #[test]
    fn deconv_matches_naive_scatter() {
        let mut rng = rng_from_seed(4);
        let mut d = ConvTranspose2d::new(3, 2, 4, 2, 1, &mut rng);
        d.bias.value = vec![0.5, -0.5];
        let x = random_tensor([2, 3, 4, 3], 6);
        let y = d.infer(&x);
        assert_eq!(y.shape(), [2, 2, 8, 6]);
        assert!(max_abs_diff(&y, &naive_deconv(&d, &x)) < 1e-5);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(7);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 2, 0)] {
            let mut c = Conv2d::new(2, 3, k, s, p, true, &mut rng);
            let x = random_tensor([2, 2, 5, 5], 8);
            check_layer(&mut c, &x, |l, x| l.forward(x, true), |l, dy| l.backward(dy), 9);
        }
    }

    #[test]
    fn deconv_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(10);
        let mut d = ConvTranspose2d::new(3, 2, 4, 2, 1, &mut rng);
        let x = random_tensor([2, 3, 3, 3], 11);
        check_layer(&mut d, &x, |l, x| l.forward(x, true), |l, dy| l.backward(dy), 12);
    }
}
