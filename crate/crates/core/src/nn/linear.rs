use rand::Rng;

use super::{gemm, Param, Parameterized, Tensor};

/// Fully connected layer on `[n, fin, 1, 1]` tensors; weight is `[fout, fin]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub fin: usize,
    pub fout: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    /// Uniform initialisation with bound `sqrt(gain / fin)`.
    pub fn new<R: Rng + ?Sized>(fin: usize, fout: usize, gain: f32, rng: &mut R) -> Self {
        Self {
            fin,
            fout,
            weight: Param::uniform(fin * fout, (gain / fin as f32).sqrt(), rng),
            bias: Param::filled(fout, 0.0),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let y = self.infer(x);
        self.input = train.then(|| x.clone());
        y
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.per_sample(), self.fin, "linear input width");
        let mut y = Tensor::zeros(x.n, self.fout, 1, 1);
        for row in y.data.chunks_mut(self.fout) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(x.n, self.fin, self.fout, &x.data, false, &self.weight.value, true, 1.0, &mut y.data);
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("linear backward without cached forward");
        gemm(self.fout, x.n, self.fin, &dy.data, true, &x.data, false, 1.0, &mut self.weight.grad);
        for row in dy.data.chunks(self.fout) {
            self.bias.grad.iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        gemm(x.n, self.fout, self.fin, &dy.data, false, &self.weight.value, false, 0.0, &mut dx.data);
        dx
    }
}

impl Parameterized for Linear {
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

    #[test]
    fn computes_affine_map() {
        let mut rng = rng_from_seed(0);
        let mut l = Linear::new(2, 2, 1.0, &mut rng);
        l.weight.value = vec![1.0, 2.0, 3.0, 4.0];
        l.bias.value = vec![0.5, -0.5];
        let y = l.infer(&Tensor::matrix(1, 2, vec![1.0, 1.0]));
        assert_eq!(y.data, vec![3.5, 6.5]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng_from_seed(1);
        let mut l = Linear::new(5, 3, 1.0, &mut rng);
        let x = random_tensor([4, 5, 1, 1], 2);
        check_layer(&mut l, &x, |l, x| l.forward(x, true), |l, dy| l.backward(dy), 3);
    }
}
