use super::{Param, Parameterized, Tensor};

/// Group normalisation with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub eps: f32,
    pub gamma: Param,
    pub beta: Param,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels.is_multiple_of(groups), "groups must divide channels");
        Self {
            groups,
            channels,
            eps: 1e-5,
            gamma: Param::filled(channels, 1.0),
            beta: Param::filled(channels, 0.0),
            cache: None,
        }
    }

    /// Roughly four channels per group, at most 32 groups.
    pub fn default_groups(channels: usize) -> usize {
        let mut g = (channels / 4).clamp(1, 32);
        while !channels.is_multiple_of(g) {
            g -= 1;
        }
        g
    }

    pub fn with_default_groups(channels: usize) -> Self {
        Self::new(channels, Self::default_groups(channels))
    }

    fn normalize(&self, x: &Tensor) -> (Tensor, Vec<f32>) {
        assert_eq!(x.c, self.channels, "group norm channels");
        let hw = x.h * x.w;
        let len = self.channels / self.groups * hw;
        let mut xhat = x.clone();
        let mut inv = Vec::with_capacity(x.n * self.groups);
        for chunk in xhat.data.chunks_mut(len) {
            let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / len as f64;
            let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / len as f64;
            let is = 1.0 / (var + self.eps as f64).sqrt();
            chunk.iter_mut().for_each(|v| *v = ((*v as f64 - mean) * is) as f32);
            inv.push(is as f32);
        }
        (xhat, inv)
    }

    fn affine(&self, xhat: &Tensor) -> Tensor {
        let hw = xhat.h * xhat.w;
        let mut y = xhat.clone();
        for (idx, plane) in y.data.chunks_mut(hw).enumerate() {
            let c = idx % self.channels;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            plane.iter_mut().for_each(|v| *v = *v * g + b);
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (xhat, inv) = self.normalize(x);
        let y = self.affine(&xhat);
        self.cache = train.then_some((xhat, inv));
        y
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.affine(&self.normalize(x).0)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (xhat, inv) = self.cache.take().expect("group norm backward without cached forward");
        let hw = dy.h * dy.w;
        let cpg = self.channels / self.groups;
        let len = cpg * hw;
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for (gi, ((dxg, dyg), xg)) in dx
            .data
            .chunks_mut(len)
            .zip(dy.data.chunks(len))
            .zip(xhat.data.chunks(len))
            .enumerate()
        {
            let c0 = (gi % self.groups) * cpg;
            let mut sum_d = 0.0f64;
            let mut sum_dx = 0.0f64;
            for j in 0..len {
                let c = c0 + j / hw;
                let d = dyg[j] * self.gamma.value[c];
                self.gamma.grad[c] += dyg[j] * xg[j];
                self.beta.grad[c] += dyg[j];
                dxg[j] = d;
                sum_d += d as f64;
                sum_dx += d as f64 * xg[j] as f64;
            }
            let m = len as f64;
            let (md, mdx) = ((sum_d / m) as f32, (sum_dx / m) as f32);
            for j in 0..len {
                dxg[j] = inv[gi] * (dxg[j] - md - xg[j] * mdx);
            }
        }
        dx
    }
}

impl Parameterized for GroupNorm {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
