//! The translation model: one shared content encoder, one style encoder per
//! domain, one AdaIN-conditioned decoder and one discriminator with an
//! adversarial head and a domain-classification head.
//!
//! Layer structs only hold [`ParamId`]s into a [`ParamSet`], so the same
//! [`Networks`] description can be evaluated against `f32` weights for
//! training or `f64` copies for gradient checking.
//!
//! Shapes at base width `w` and `K = 4w` embedding channels:
//!
//! * content encoder: 7×7 conv (3→w), IN, ReLU; 4×4/2 conv (w→2w), IN, ReLU;
//!   4×4/2 conv (2w→K). The last convolution output is the AdaIN input.
//! * decoder: 3×3 conv (K→K), ReLU; 4×4/2 deconv (K→2w), ReLU; 4×4/2 deconv
//!   (2w→3), sigmoid.
//! * style encoder: four 4×4/2 convs (3→w→2w→4w→4w) with ReLU, global
//!   average pooling, one linear map to `2K` values split into (γ, β).
//! * discriminator: four 4×4/2 convs (3→w→2w→4w→8w) with leaky ReLU; a 3×3
//!   conv to a one-channel score map and a pooled linear head to `n` logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Group, ParamSet, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, ConvTranspose2d, Init, Linear};
use crate::tensor::{Scalar, Tensor};

/// Stabilizer added to the variance in instance statistics.
pub const INSTANCE_EPS: f64 = 1e-5;

/// Standard deviation of the initial weights.
pub const INIT_STD: f64 = 0.02;

const LEAKY_SLOPE: f64 = 0.2;

/// Total downsampling factor of the content encoder.
pub const ENCODER_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Channel count of the first encoder layer; the content embedding has
    /// `4 * width` channels.
    pub width: usize,
    pub n_domains: usize,
}

impl ArchConfig {
    pub fn new(width: usize, n_domains: usize) -> Self {
        ArchConfig { width, n_domains }
    }

    /// Channel count `K` of the content embedding.
    pub fn embed_channels(&self) -> usize {
        4 * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("network width must be positive".into()));
        }
        if self.n_domains == 0 {
            return Err(Error::Config("at least one domain is required".into()));
        }
        Ok(())
    }
}

/// Per-channel AdaIN scale and shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaINParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> AdaINParams<T> {
    pub fn new(gamma: Vec<T>, beta: Vec<T>) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::Shape(format!(
                "gamma has {} channels, beta {}",
                gamma.len(),
                beta.len()
            )));
        }
        Ok(AdaINParams { gamma, beta })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn cast<U: Scalar>(&self) -> AdaINParams<U> {
        AdaINParams {
            gamma: self.gamma.iter().map(|v| U::lit(v.as_f64())).collect(),
            beta: self.beta.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Output of the content encoder's final convolution, `[K, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentEmbedding<T>(pub Tensor<T>);

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorOutput<T> {
    /// Patch-level real/fake scores, `[1, h', w']`.
    pub adv: Tensor<T>,
    /// Domain logits, length `n`.
    pub logits: Vec<T>,
}

impl<T: Scalar> DiscriminatorOutput<T> {
    pub fn domain_probabilities(&self) -> Vec<T> {
        crate::autograd::log_softmax_parts(&self.logits).1
    }
}

/// Per-channel spatial mean and `sqrt(var + eps)` of a `[K, h, w]` tensor.
pub fn instance_stats<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (k, _, _) = x.dims3()?;
    let eps = T::lit(INSTANCE_EPS);
    Ok((0..k)
        .map(|c| {
            let (m, v) = crate::autograd::mean_var(x.channel(c));
            (m, (v + eps).sqrt())
        })
        .unzip())
}

/// `gamma * (x - mu(x)) / sigma(x) + beta` per channel.
pub fn adain<T: Scalar>(x: &Tensor<T>, params: &AdaINParams<T>) -> Result<Tensor<T>> {
    let (k, _, _) = x.dims3()?;
    if params.gamma.len() != k || params.beta.len() != k {
        return Err(Error::Shape(format!(
            "AdaIN parameters for {} channels applied to {k}",
            params.gamma.len()
        )));
    }
    let (mu, sigma) = instance_stats(x)?;
    let mut out = x.clone();
    for c in 0..k {
        let (g, b, m, s) = (params.gamma[c], params.beta[c], mu[c], sigma[c]);
        out.channel_mut(c)
            .iter_mut()
            .for_each(|v| *v = g * (*v - m) / s + b);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentEncoder {
    layers: [Conv2d; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleEncoder {
    convs: Vec<Conv2d>,
    head: Linear,
    channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    conv: Conv2d,
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    trunk: Vec<Conv2d>,
    adv: Conv2d,
    cls: Linear,
}

/// Layer layout of the whole model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Networks {
    pub arch: ArchConfig,
    pub content: ContentEncoder,
    pub style: Vec<StyleEncoder>,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
}

impl Networks {
    /// Registers every layer's parameters in `params`, drawing initial
    /// weights from `rng`.
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        arch: ArchConfig,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        let w = arch.width;
        let k = arch.embed_channels();
        let init = Init::Normal(INIT_STD);
        let gen = Group::GENERATOR;
        let dis = Group::DISCRIMINATOR;

        let content = ContentEncoder {
            layers: [
                Conv2d::new(
                    params,
                    "content.0",
                    gen,
                    ConvSpec::new(3, w, 7, 1, 3),
                    init,
                    rng,
                ),
                Conv2d::new(
                    params,
                    "content.1",
                    gen,
                    ConvSpec::new(w, 2 * w, 4, 2, 1),
                    init,
                    rng,
                ),
                Conv2d::new(
                    params,
                    "content.2",
                    gen,
                    ConvSpec::new(2 * w, k, 4, 2, 1),
                    init,
                    rng,
                ),
            ],
        };
        let decoder = Decoder {
            conv: Conv2d::new(
                params,
                "decoder.conv",
                gen,
                ConvSpec::new(k, k, 3, 1, 1),
                init,
                rng,
            ),
            up1: ConvTranspose2d::new(
                params,
                "decoder.up1",
                gen,
                ConvSpec::new(k, 2 * w, 4, 2, 1),
                init,
                rng,
            ),
            up2: ConvTranspose2d::new(
                params,
                "decoder.up2",
                gen,
                ConvSpec::new(2 * w, 3, 4, 2, 1),
                init,
                rng,
            ),
        };
        let style = (0..arch.n_domains)
            .map(|d| {
                let chans = [3, w, 2 * w, 4 * w, 4 * w];
                let convs = chans
                    .windows(2)
                    .enumerate()
                    .map(|(i, c)| {
                        Conv2d::new(
                            params,
                            &format!("style{d}.{i}"),
                            gen,
                            ConvSpec::new(c[0], c[1], 4, 2, 1),
                            init,
                            rng,
                        )
                    })
                    .collect();
                let head = Linear::new(
                    params,
                    &format!("style{d}.head"),
                    gen,
                    4 * w,
                    2 * k,
                    init,
                    rng,
                );
                // gamma starts around one so the first decodes are not flat
                params.get_mut(head.bias).data_mut()[..k]
                    .iter_mut()
                    .for_each(|v| *v = T::one());
                StyleEncoder {
                    convs,
                    head,
                    channels: k,
                }
            })
            .collect();
        let chans = [3, w, 2 * w, 4 * w, 8 * w];
        let trunk = chans
            .windows(2)
            .enumerate()
            .map(|(i, c)| {
                Conv2d::new(
                    params,
                    &format!("disc.{i}"),
                    dis,
                    ConvSpec::new(c[0], c[1], 4, 2, 1),
                    init,
                    rng,
                )
            })
            .collect();
        let discriminator = Discriminator {
            trunk,
            adv: Conv2d::new(
                params,
                "disc.adv",
                dis,
                ConvSpec::new(8 * w, 1, 3, 1, 1),
                init,
                rng,
            ),
            cls: Linear::new(params, "disc.cls", dis, 8 * w, arch.n_domains, init, rng),
        };
        Ok(Networks {
            arch,
            content,
            style,
            decoder,
            discriminator,
        })
    }

    pub fn check_patch<T: Scalar>(&self, patch: &Tensor<T>) -> Result<()> {
        let (c, h, w) = patch.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!(
                "patches must have 3 channels, got {c}"
            )));
        }
        // the discriminator trunk halves four times
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "patch {h}x{w} is not divisible by 16"
            )));
        }
        Ok(())
    }

    fn check_domain(&self, domain: usize) -> Result<()> {
        if domain >= self.arch.n_domains {
            return Err(Error::UnknownDomain {
                id: domain,
                count: self.arch.n_domains,
            });
        }
        Ok(())
    }

    /// Shared content encoder; identical for every domain.
    pub fn encode_content_g<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let [c0, c1, c2] = &self.content.layers;
        let h = c0.forward(g, x);
        let h = g.instance_norm(h, INSTANCE_EPS);
        let h = g.relu(h);
        let h = c1.forward(g, h);
        let h = g.instance_norm(h, INSTANCE_EPS);
        let h = g.relu(h);
        c2.forward(g, h)
    }

    /// Patch-specific `(gamma, beta)` from the style encoder of `domain`.
    pub fn encode_style_g<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        domain: usize,
    ) -> Result<(Var, Var)> {
        self.check_domain(domain)?;
        let enc = &self.style[domain];
        let mut h = x;
        for conv in &enc.convs {
            h = conv.forward(g, h);
            h = g.relu(h);
        }
        let pooled = g.global_avg_pool(h);
        let out = enc.head.forward(g, pooled);
        let gamma = g.slice(out, 0, enc.channels);
        let beta = g.slice(out, enc.channels, enc.channels);
        Ok((gamma, beta))
    }

    pub fn adain_g<T: Scalar>(g: &mut Graph<'_, T>, x: Var, gamma: Var, beta: Var) -> Var {
        let n = g.instance_norm(x, INSTANCE_EPS);
        g.channel_affine(n, gamma, beta)
    }

    pub fn decode_g<T: Scalar>(&self, g: &mut Graph<'_, T>, emb: Var) -> Var {
        let d = &self.decoder;
        let h = d.conv.forward(g, emb);
        let h = g.relu(h);
        let h = d.up1.forward(g, h);
        let h = g.relu(h);
        let h = d.up2.forward(g, h);
        g.sigmoid(h)
    }

    /// `decode(adain(encode_content(x), gamma, beta))`.
    pub fn translate_g<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Var {
        let c = self.encode_content_g(g, x);
        self.translate_content_g(g, c, gamma, beta)
    }

    /// Decode an existing content embedding with the given style.
    pub fn translate_content_g<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        content: Var,
        gamma: Var,
        beta: Var,
    ) -> Var {
        let s = Self::adain_g(g, content, gamma, beta);
        self.decode_g(g, s)
    }

    /// Returns `(score map, domain logits)` from the shared trunk.
    pub fn discriminate_g<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> (Var, Var) {
        let d = &self.discriminator;
        let mut h = x;
        for conv in &d.trunk {
            h = conv.forward(g, h);
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let adv = d.adv.forward(g, h);
        let pooled = g.global_avg_pool(h);
        let logits = d.cls.forward(g, pooled);
        (adv, logits)
    }
}

/// Trained or freshly initialized weights together with their layout.
#[derive(Clone, Debug)]
pub struct ModelWeights<T> {
    pub nets: Networks,
    pub params: ParamSet<T>,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let nets = Networks::build(arch, &mut params, rng)?;
        Ok(ModelWeights { nets, params })
    }

    pub fn arch(&self) -> ArchConfig {
        self.nets.arch
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            nets: self.nets.clone(),
            params: self.params.cast(),
        }
    }

    pub fn encode_content(&self, patch: &Tensor<T>) -> Result<ContentEmbedding<T>> {
        let (c, h, w) = patch.dims3()?;
        if c != 3 || h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "content encoder needs a 3-channel patch with sides divisible by {ENCODER_STRIDE}, got [{c}, {h}, {w}]"
            )));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(patch.clone());
        let out = self.nets.encode_content_g(&mut g, x);
        Ok(ContentEmbedding(g.value(out).clone()))
    }

    pub fn encode_style(&self, patch: &Tensor<T>, domain: usize) -> Result<AdaINParams<T>> {
        self.nets.check_patch(patch)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(patch.clone());
        let (gamma, beta) = self.nets.encode_style_g(&mut g, x, domain)?;
        AdaINParams::new(
            g.value(gamma).data().to_vec(),
            g.value(beta).data().to_vec(),
        )
    }

    pub fn decode(&self, emb: &ContentEmbedding<T>) -> Result<Tensor<T>> {
        let (k, _, _) = emb.0.dims3()?;
        if k != self.arch().embed_channels() {
            return Err(Error::Shape(format!(
                "decoder expects {} channels, embedding has {k}",
                self.arch().embed_channels()
            )));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(emb.0.clone());
        let out = self.nets.decode_g(&mut g, x);
        Ok(g.value(out).clone())
    }

    /// Decodes the patch's content with the supplied style parameters.
    pub fn translate(&self, patch: &Tensor<T>, params: &AdaINParams<T>) -> Result<Tensor<T>> {
        let k = self.arch().embed_channels();
        if params.channels() != k {
            return Err(Error::Shape(format!(
                "AdaIN parameters have {} channels, model uses {k}",
                params.channels()
            )));
        }
        let emb = self.encode_content(patch)?;
        let styled = adain(&emb.0, params)?;
        self.decode(&ContentEmbedding(styled))
    }

    pub fn discriminate(&self, patch: &Tensor<T>) -> Result<DiscriminatorOutput<T>> {
        self.nets.check_patch(patch)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(patch.clone());
        let (adv, logits) = self.nets.discriminate_g(&mut g, x);
        Ok(DiscriminatorOutput {
            adv: g.value(adv).clone(),
            logits: g.value(logits).data().to_vec(),
        })
    }
}
