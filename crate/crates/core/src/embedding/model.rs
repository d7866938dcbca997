use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    add_inplace, global_avg_pool, global_avg_pool_backward, relu_backward, relu_inplace, Conv2d, ConvTranspose2d,
    GroupNorm, Linear, Param, Parameterized, Tensor,
};
use crate::patches::PATCH_SIZE;

pub const LATENT_DIM: usize = 100;
pub const INPUT_CHANNELS: usize = 2;
const DECODER_HIDDEN: usize = 256;
/// Bounds on log-variance before exponentiation.
const LOGVAR_MIN: f32 = -30.0;
const LOGVAR_MAX: f32 = 20.0;

/// Residual block: two 3x3 convolutions with group norm and an optional
/// projection shortcut.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    down: Option<(Conv2d, GroupNorm)>,
    hidden: Option<Tensor>,
    output: Option<Tensor>,
}

impl BasicBlock {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let down = (stride != 1 || cin != cout)
            .then(|| (Conv2d::new(cin, cout, 1, stride, 0, false, rng), GroupNorm::with_default_groups(cout)));
        Self {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, false, rng),
            gn1: GroupNorm::with_default_groups(cout),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, false, rng),
            gn2: GroupNorm::with_default_groups(cout),
            down,
            hidden: None,
            output: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut h = self.gn1.forward(&self.conv1.forward(x, train), train);
        relu_inplace(&mut h);
        let mut y = self.gn2.forward(&self.conv2.forward(&h, train), train);
        match &mut self.down {
            Some((c, g)) => add_inplace(&mut y, &g.forward(&c.forward(x, train), train)),
            None => add_inplace(&mut y, x),
        }
        relu_inplace(&mut y);
        if train {
            self.hidden = Some(h);
            self.output = Some(y.clone());
        }
        y
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut h = self.gn1.infer(&self.conv1.infer(x));
        relu_inplace(&mut h);
        let mut y = self.gn2.infer(&self.conv2.infer(&h));
        match &self.down {
            Some((c, g)) => add_inplace(&mut y, &g.infer(&c.infer(x))),
            None => add_inplace(&mut y, x),
        }
        relu_inplace(&mut y);
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut d = dy.clone();
        relu_backward(&mut d, &self.output.take().expect("block backward without forward"));
        let mut dh = self.conv2.backward(&self.gn2.backward(&d));
        relu_backward(&mut dh, &self.hidden.take().expect("block backward without forward"));
        let mut dx = self.conv1.backward(&self.gn1.backward(&dh));
        match &mut self.down {
            Some((c, g)) => add_inplace(&mut dx, &c.backward(&g.backward(&d))),
            None => add_inplace(&mut dx, &d),
        }
        dx
    }
}

impl Parameterized for BasicBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params(f);
        self.gn1.visit_params(f);
        self.conv2.visit_params(f);
        self.gn2.visit_params(f);
        if let Some((c, g)) = &mut self.down {
            c.visit_params(f);
            g.visit_params(f);
        }
    }
}

/// ResNet-18 layout for 2x32x32 gradient patches: 3x3 stem without max-pool,
/// four stages of two blocks, global average pooling and a linear head that
/// emits `(z_mean, log_variance)`.
#[derive(Debug, Clone)]
pub struct Encoder {
    stem: Conv2d,
    stem_gn: GroupNorm,
    blocks: Vec<BasicBlock>,
    head: Linear,
    stem_out: Option<Tensor>,
    pooled_hw: (usize, usize),
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        Self::with_stages(width, &[1, 2, 2, 2], rng)
    }

    /// One two-block stage per stride; channel count doubles per stage.
    pub(crate) fn with_stages<R: Rng + ?Sized>(width: usize, strides: &[usize], rng: &mut R) -> Self {
        let mut blocks = Vec::with_capacity(2 * strides.len());
        let mut cin = width;
        for (stage, &stride) in strides.iter().enumerate() {
            let cout = width << stage;
            blocks.push(BasicBlock::new(cin, cout, stride, rng));
            blocks.push(BasicBlock::new(cout, cout, 1, rng));
            cin = cout;
        }
        Self {
            stem: Conv2d::new(INPUT_CHANNELS, width, 3, 1, 1, false, rng),
            stem_gn: GroupNorm::with_default_groups(width),
            blocks,
            head: Linear::new(cin, 2 * LATENT_DIM, 1.0, rng),
            stem_out: None,
            pooled_hw: (0, 0),
        }
    }

    /// Returns `[n, 200, 1, 1]`: 100 means followed by 100 log-variances.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut h = self.stem_gn.forward(&self.stem.forward(x, train), train);
        relu_inplace(&mut h);
        if train {
            self.stem_out = Some(h.clone());
        }
        for b in &mut self.blocks {
            h = b.forward(&h, train);
        }
        self.pooled_hw = (h.h, h.w);
        self.head.forward(&global_avg_pool(&h), train)
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut h = self.stem_gn.infer(&self.stem.infer(x));
        relu_inplace(&mut h);
        for b in &self.blocks {
            h = b.infer(&h);
        }
        self.head.infer(&global_avg_pool(&h))
    }

    /// Returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let dp = self.head.backward(dy);
        let mut d = global_avg_pool_backward(&dp, self.pooled_hw.0, self.pooled_hw.1);
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d);
        }
        relu_backward(&mut d, &self.stem_out.take().expect("encoder backward without forward"));
        self.stem.backward(&self.stem_gn.backward(&d))
    }
}

impl Parameterized for Encoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_params(f);
        self.stem_gn.visit_params(f);
        for b in &mut self.blocks {
            b.visit_params(f);
        }
        self.head.visit_params(f);
    }
}

/// Two fully connected layers, then four stride-2 transposed convolutions
/// from 2x2 up to 32x32.
#[derive(Debug, Clone)]
pub struct Decoder {
    fc1: Linear,
    fc2: Linear,
    deconvs: Vec<ConvTranspose2d>,
    seed_channels: usize,
    fc_acts: Vec<Tensor>,
    deconv_acts: Vec<Tensor>,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let seed_channels = 4 * width;
        let chans = [seed_channels, 2 * width, width, width, INPUT_CHANNELS];
        let deconvs = chans.windows(2).map(|c| ConvTranspose2d::new(c[0], c[1], 4, 2, 1, rng)).collect();
        // gain 6 gives uniform weights with He variance 2 / fan_in
        Self {
            fc1: Linear::new(LATENT_DIM, DECODER_HIDDEN, 6.0, rng),
            fc2: Linear::new(DECODER_HIDDEN, seed_channels * 4, 6.0, rng),
            deconvs,
            seed_channels,
            fc_acts: Vec::new(),
            deconv_acts: Vec::new(),
        }
    }

    pub fn forward(&mut self, z: &Tensor, train: bool) -> Tensor {
        self.fc_acts.clear();
        self.deconv_acts.clear();
        let mut h = self.fc1.forward(z, train);
        relu_inplace(&mut h);
        let mut h2 = self.fc2.forward(&h, train);
        relu_inplace(&mut h2);
        if train {
            self.fc_acts.push(h);
            self.fc_acts.push(h2.clone());
        }
        let mut x = h2.reshape(self.seed_channels, 2, 2);
        let last = self.deconvs.len() - 1;
        for (i, d) in self.deconvs.iter_mut().enumerate() {
            x = d.forward(&x, train);
            if i < last {
                relu_inplace(&mut x);
                if train {
                    self.deconv_acts.push(x.clone());
                }
            }
        }
        x
    }

    pub fn infer(&self, z: &Tensor) -> Tensor {
        let mut h = self.fc1.infer(z);
        relu_inplace(&mut h);
        let mut x = self.fc2.infer(&h);
        relu_inplace(&mut x);
        let mut x = x.reshape(self.seed_channels, 2, 2);
        let last = self.deconvs.len() - 1;
        for (i, d) in self.deconvs.iter().enumerate() {
            x = d.infer(&x);
            if i < last {
                relu_inplace(&mut x);
            }
        }
        x
    }

    /// Returns the gradient with respect to `z`.
    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut d = dy.clone();
        let n_deconv = self.deconvs.len();
        for (i, layer) in self.deconvs.iter_mut().enumerate().rev() {
            if i + 1 < n_deconv {
                relu_backward(&mut d, &self.deconv_acts[i]);
            }
            d = layer.backward(&d);
        }
        self.deconv_acts.clear();
        let h2 = self.fc_acts.pop().expect("decoder backward without forward");
        let h1 = self.fc_acts.pop().expect("decoder backward without forward");
        let mut d = d.reshape(h2.c, 1, 1);
        relu_backward(&mut d, &h2);
        let mut d = self.fc2.backward(&d);
        relu_backward(&mut d, &h1);
        self.fc1.backward(&d)
    }
}

impl Parameterized for Decoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
        for d in &mut self.deconvs {
            d.visit_params(f);
        }
    }
}

/// Encoder and decoder sharing one parameter order.
#[derive(Debug, Clone)]
pub struct Vae {
    pub width: usize,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Vae {
    pub fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        assert!(width > 0, "base width must be positive");
        let encoder = Encoder::new(width, rng);
        let decoder = Decoder::new(width, rng);
        Self { width, encoder, decoder }
    }

    /// A shallower encoder for numerical tests.
    #[cfg(test)]
    pub(crate) fn shallow<R: Rng + ?Sized>(width: usize, strides: &[usize], rng: &mut R) -> Self {
        let encoder = Encoder::with_stages(width, strides, rng);
        let decoder = Decoder::new(width, rng);
        Self { width, encoder, decoder }
    }

    pub fn check_input(x: &Tensor) -> Result<()> {
        let p = PATCH_SIZE as usize;
        if x.c != INPUT_CHANNELS || x.h != p || x.w != p {
            return Err(Error::shape(
                format!("[n, {INPUT_CHANNELS}, {p}, {p}]"),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }
}

impl Parameterized for Vae {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_params(f);
        self.decoder.visit_params(f);
    }
}

/// Splits encoder output into `(z_mean, clamped log-variance)` rows.
pub fn split_head(out: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let mut mu = Vec::with_capacity(out.n * LATENT_DIM);
    let mut logvar = Vec::with_capacity(out.n * LATENT_DIM);
    for row in out.data.chunks(2 * LATENT_DIM) {
        mu.extend_from_slice(&row[..LATENT_DIM]);
        logvar.extend(row[LATENT_DIM..].iter().map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)));
    }
    (mu, logvar)
}

/// Whether the raw log-variance lies inside the clamp (gradient passes).
pub fn logvar_active(raw: f32) -> bool {
    (LOGVAR_MIN..=LOGVAR_MAX).contains(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_layer, random_tensor};
    use crate::util::rng_from_seed;
    use rand::Rng;

    /// Moves every parameter off zero so no pre-activation sits exactly on a ReLU kink.
    fn jitter<M: Parameterized>(m: &mut M, seed: u64) {
        let mut rng = rng_from_seed(seed);
        m.visit_params(&mut |p| p.value.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05)));
    }

    #[test]
    fn shapes_round_trip() {
        let mut rng = rng_from_seed(1);
        let vae = Vae::new(4, &mut rng);
        let x = random_tensor([3, 2, 32, 32], 2);
        let out = vae.encoder.infer(&x);
        assert_eq!(out.shape(), [3, 2 * LATENT_DIM, 1, 1]);
        let (mu, _) = split_head(&out);
        let z = Tensor::matrix(3, LATENT_DIM, mu);
        let recon = vae.decoder.infer(&z);
        assert_eq!(recon.shape(), x.shape());
        assert!(recon.is_finite());
    }

    #[test]
    fn train_forward_matches_infer() {
        let mut rng = rng_from_seed(3);
        let mut vae = Vae::new(4, &mut rng);
        let x = random_tensor([2, 2, 32, 32], 4);
        assert_eq!(vae.encoder.forward(&x, true).data, vae.encoder.infer(&x).data);
        let z = random_tensor([2, LATENT_DIM, 1, 1], 5);
        assert_eq!(vae.decoder.forward(&z, true).data, vae.decoder.infer(&z).data);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(6);
        let mut b = BasicBlock::new(4, 8, 2, &mut rng);
        jitter(&mut b, 22);
        let x = random_tensor([2, 4, 6, 6], 7);
        check_layer(&mut b, &x, |l, x| l.forward(x, true), |l, dy| l.backward(dy), 8);
        let mut same = BasicBlock::new(4, 4, 1, &mut rng);
        check_layer(&mut same, &x, |l, x| l.forward(x, true), |l, dy| l.backward(dy), 9);
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(10);
        let mut d = Decoder::new(2, &mut rng);
        jitter(&mut d, 20);
        let z = random_tensor([2, LATENT_DIM, 1, 1], 11);
        check_layer(&mut d, &z, |l, z| l.forward(z, true), |l, dy| l.backward(dy), 12);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        // Two stages keep ReLU kink crossings rare enough for finite differences.
        let mut rng = rng_from_seed(13);
        let mut e = Encoder::with_stages(2, &[1, 2], &mut rng);
        jitter(&mut e, 21);
        let x = random_tensor([2, 2, 8, 8], 14);
        check_layer(&mut e, &x, |l, x| l.forward(x, true), |l, dy| l.backward(dy),
            15,
        );
    }
}
