//! Set-level image autoencoder: a shared convolutional encoder pooled into an
//! object latent `c`, per-image latents `z`, and a Bernoulli pixel decoder.

use serde::{Deserialize, Serialize};

use crate::diffcore::layers::{Conv2d, ConvTranspose2d, Linear, Mlp};
use crate::diffcore::{Array, GaussianVar, ParameterStore, RngStream, Tape, Var};
use crate::ModelError;

/// Architecture sizes for the context learner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub hidden: usize,
    pub d_h: usize,
    pub d_c: usize,
    pub d_z: usize,
}

impl ContextConfig {
    pub fn for_image(image_h: usize, image_w: usize) -> Self {
        Self {
            image_h,
            image_w,
            conv1_channels: 8,
            conv2_channels: 16,
            hidden: 64,
            d_h: 64,
            d_c: 16,
            d_z: 8,
        }
    }

    fn conv_out(n: usize) -> usize {
        (n - 3) / 2 + 1
    }

    fn encoder_grid(&self) -> (usize, usize) {
        (
            Self::conv_out(Self::conv_out(self.image_h)),
            Self::conv_out(Self::conv_out(self.image_w)),
        )
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.image_h < 7 || self.image_w < 7 || !self.image_h.is_multiple_of(4) || !self.image_w.is_multiple_of(4) {
            return Err(ModelError::Config(format!(
                "image size {}x{} must be a multiple of 4 and at least 8",
                self.image_h, self.image_w
            )));
        }
        Ok(())
    }
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self::for_image(32, 32)
    }
}

/// Per-image embeddings `[m, d_h]` and their mean `[1, d_h]`.
#[derive(Clone, Copy, Debug)]
pub struct ContextEncoding {
    pub per_image: Var,
    pub pooled: Var,
}

/// Pieces of the negated set ELBO.
#[derive(Clone, Copy, Debug)]
pub struct ContextLoss {
    pub total: Var,
    pub recon_nll: Var,
    pub kl_z: Var,
    pub kl_c: Var,
    /// Reparameterized draw from `q(c | X)`, `[1, d_c]`.
    pub c_sample: Var,
    pub q_c: GaussianVar,
}

#[derive(Clone, Debug)]
pub struct ContextLearner {
    pub cfg: ContextConfig,
    conv1: Conv2d,
    conv2: Conv2d,
    embed: Linear,
    statistic: Mlp,
    inference: Mlp,
    latent_prior: Mlp,
    obs_mlp: Mlp,
    deconv1: ConvTranspose2d,
    deconv2: ConvTranspose2d,
}

/// Stack `[H, W]` images into a `[m, H, W, 1]` batch.
pub fn stack_images(images: &[Array], h: usize, w: usize) -> Result<Array, ModelError> {
    if images.is_empty() {
        return Err(ModelError::EmptySet("image set"));
    }
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.len() != h * w {
            return Err(ModelError::Config(format!(
                "image shape {:?}, expected [{h}, {w}]",
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Array::new(vec![images.len(), h, w, 1], data)?)
}

impl ContextLearner {
    /// Register (or look up) the `prefix.*` parameters in `store`.
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        cfg: ContextConfig,
        rng: &mut RngStream,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let p = |s: &str| format!("{prefix}.{s}");
        let (gh, gw) = cfg.encoder_grid();
        let (c1, c2) = (cfg.conv1_channels, cfg.conv2_channels);
        let base = (cfg.image_h / 4) * (cfg.image_w / 4) * c2;
        Ok(Self {
            cfg,
            conv1: Conv2d::new(store, &p("enc.conv1"), 1, c1, 3, 2, rng)?,
            conv2: Conv2d::new(store, &p("enc.conv2"), c1, c2, 3, 2, rng)?,
            embed: Linear::new(store, &p("enc.embed"), gh * gw * c2, cfg.d_h, rng)?,
            statistic: Mlp::new(store, &p("statistic"), &[cfg.d_h, cfg.hidden, 2 * cfg.d_c], rng)?,
            inference: Mlp::new(
                store,
                &p("inference"),
                &[cfg.d_c + cfg.d_h, cfg.hidden, 2 * cfg.d_z],
                rng,
            )?,
            latent_prior: Mlp::new(store, &p("latent_prior"), &[cfg.d_c, cfg.hidden, 2 * cfg.d_z], rng)?,
            obs_mlp: Mlp::new(store, &p("dec.mlp"), &[cfg.d_c + cfg.d_z, cfg.hidden, base], rng)?,
            deconv1: ConvTranspose2d::new(store, &p("dec.deconv1"), c2, c1, 4, 2, 1, rng)?,
            deconv2: ConvTranspose2d::new(store, &p("dec.deconv2"), c1, 1, 4, 2, 1, rng)?,
        })
    }

    /// Shared conv encoder applied to every image, then mean pooled.
    pub fn encode_set(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        images: &[Array],
    ) -> Result<ContextEncoding, ModelError> {
        let batch = stack_images(images, self.cfg.image_h, self.cfg.image_w)?;
        let m = images.len();
        let x = tape.constant(batch);
        let h = self.conv1.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, store, h)?;
        let h = tape.relu(h);
        let (gh, gw) = self.cfg.encoder_grid();
        let flat = tape.reshape(h, &[m, gh * gw * self.cfg.conv2_channels])?;
        let per_image = self.embed.forward(tape, store, flat)?;
        let pooled = tape.mean_pool_set(per_image);
        Ok(ContextEncoding { per_image, pooled })
    }

    /// Statistic network `q(c | h)`.
    pub fn infer_context(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        enc: &ContextEncoding,
    ) -> Result<GaussianVar, ModelError> {
        let out = self.statistic.forward(tape, store, enc.pooled)?;
        Ok(GaussianVar::from_params(tape, out)?)
    }

    /// Inference network `q(z | c, h_i)` for every image row of `h`.
    pub fn infer_instance(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        c: Var,
        h: Var,
    ) -> Result<GaussianVar, ModelError> {
        let m = tape.value(h).rows();
        let c_rows = tape.repeat_rows(c, m)?;
        let input = tape.concat(&[c_rows, h])?;
        let out = self.inference.forward(tape, store, input)?;
        Ok(GaussianVar::from_params(tape, out)?)
    }

    /// Latent decoder `p(z | c)`, repeated for `m` images.
    pub fn prior_instance(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        c: Var,
        m: usize,
    ) -> Result<GaussianVar, ModelError> {
        let out = self.latent_prior.forward(tape, store, c)?;
        let out = tape.repeat_rows(out, m)?;
        Ok(GaussianVar::from_params(tape, out)?)
    }

    /// Observation decoder: pixel logits `[m, H, W, 1]` from `c` (`[1, d_c]`)
    /// and per-image `z` (`[m, d_z]`).
    pub fn decode_images(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        c: Var,
        z: Var,
    ) -> Result<Var, ModelError> {
        let m = tape.value(z).rows();
        let c_rows = tape.repeat_rows(c, m)?;
        let input = tape.concat(&[c_rows, z])?;
        let base = self.obs_mlp.forward(tape, store, input)?;
        let base = tape.relu(base);
        let grid = tape.reshape(
            base,
            &[m, self.cfg.image_h / 4, self.cfg.image_w / 4, self.cfg.conv2_channels],
        )?;
        let up = self.deconv1.forward(tape, store, grid)?;
        let up = tape.relu(up);
        Ok(self.deconv2.forward(tape, store, up)?)
    }

    /// Single-sample negated ELBO over an image set:
    /// `Σ_i NLL(x_i | c, z_i) + beta * (Σ_i KL(q(z_i|c,x_i) || p(z_i|c)) + KL(q(c|X) || N(0, I)))`.
    pub fn loss_context(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        images: &[Array],
        rng: &mut RngStream,
        beta: f64,
    ) -> Result<ContextLoss, ModelError> {
        let enc = self.encode_set(tape, store, images)?;
        let q_c = self.infer_context(tape, store, &enc)?;
        let c_sample = q_c.sample(tape, rng)?;
        let q_z = self.infer_instance(tape, store, c_sample, enc.per_image)?;
        let p_z = self.prior_instance(tape, store, c_sample, images.len())?;
        let z = q_z.sample(tape, rng)?;
        let logits = self.decode_images(tape, store, c_sample, z)?;
        let targets = stack_images(images, self.cfg.image_h, self.cfg.image_w)?;
        let recon_nll = tape.bernoulli_nll(logits, &targets)?;
        let kl_z = q_z.kl(tape, &p_z)?;
        let prior_c = GaussianVar::standard(tape, &[1, self.cfg.d_c]);
        let kl_c = q_c.kl(tape, &prior_c)?;
        let kl = tape.add(kl_z, kl_c)?;
        let kl = tape.scale(kl, beta);
        let total = tape.add(recon_nll, kl)?;
        Ok(ContextLoss {
            total,
            recon_nll,
            kl_z,
            kl_c,
            c_sample,
            q_c,
        })
    }

    /// Mean of `q(c | X)` as a `[1, d_c]` node, for deterministic prediction.
    pub fn context_mean(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        images: &[Array],
    ) -> Result<Var, ModelError> {
        let enc = self.encode_set(tape, store, images)?;
        Ok(self.infer_context(tape, store, &enc)?.mean)
    }

    /// Reconstruction NLL per pixel using posterior means for `c` and `z`.
    pub fn reconstruction_nll_per_pixel(
        &self,
        store: &ParameterStore,
        images: &[Array],
    ) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let enc = self.encode_set(&mut tape, store, images)?;
        let c = self.infer_context(&mut tape, store, &enc)?.mean;
        let z = self.infer_instance(&mut tape, store, c, enc.per_image)?.mean;
        let logits = self.decode_images(&mut tape, store, c, z)?;
        let targets = stack_images(images, self.cfg.image_h, self.cfg.image_w)?;
        let nll = tape.bernoulli_nll(logits, &targets)?;
        Ok(tape.value(nll).item() / targets.len() as f64)
    }

    pub fn params(&self) -> Vec<crate::diffcore::ParamId> {
        let mut ids = vec![
            self.conv1.kernel,
            self.conv1.bias,
            self.conv2.kernel,
            self.conv2.bias,
            self.embed.weight,
            self.embed.bias,
            self.deconv1.kernel,
            self.deconv1.bias,
            self.deconv2.kernel,
            self.deconv2.bias,
        ];
        for mlp in [&self.statistic, &self.inference, &self.latent_prior, &self.obs_mlp] {
            ids.extend(mlp.params());
        }
        ids
    }
}
