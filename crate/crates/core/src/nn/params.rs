//! Score network parameter layout.
//!
//! Every structure is generic over the leaf type so one definition serves
//! plain values (`Tensor`), tape handles (`Var`) and gradients. Parameter
//! names are stable dotted paths such as `wfno.3.filter.P_re`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embedding::TimeEmbeddingConfig;
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the projected time embedding enters the conditioning features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeConditioning {
    Add,
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreNetConfig {
    pub channels: usize,
    pub encoder_blocks: usize,
    pub wfno_layers: usize,
    pub attn_layers: usize,
    /// Stored spectral filter grid.
    pub modes_h: usize,
    pub modes_w: usize,
    pub alpha: f64,
    pub learnable_alpha: bool,
    pub time_embedding: TimeEmbeddingConfig,
    pub time_conditioning: TimeConditioning,
    /// Whiten the state input and rescale the output by the conditional
    /// standard deviation of each Fourier mode.
    pub precondition: bool,
    /// Per-pixel variance `σ²` of `x_0` around the upsampled condition. When
    /// positive (and preconditioning is on) the output adds the learnable
    /// multiple `skip` of the exact score of `x_t` under `x_0 ~ N(x_up, σ²)`.
    pub prior_var: f64,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        ScoreNetConfig {
            channels: 64,
            encoder_blocks: 4,
            wfno_layers: 8,
            attn_layers: 8,
            modes_h: 48,
            modes_w: 48,
            alpha: 0.7,
            learnable_alpha: false,
            time_embedding: TimeEmbeddingConfig::default(),
            time_conditioning: TimeConditioning::Add,
            precondition: true,
            prior_var: 1e-3,
        }
    }
}

impl ScoreNetConfig {
    /// Small network used for desk-scale training runs and tests.
    pub fn desk() -> Self {
        ScoreNetConfig {
            channels: 12,
            encoder_blocks: 1,
            wfno_layers: 2,
            attn_layers: 2,
            modes_h: 16,
            modes_w: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.modes_h == 0 || self.modes_w == 0 {
            return Err(Error::Config("channels and mode grid must be positive".into()));
        }
        if !(self.prior_var >= 0.0 && self.prior_var.is_finite()) {
            return Err(Error::Config("prior_var must be finite and non-negative".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        self.time_embedding.validate()
    }

    /// Channel count of the conditioning features fed to both branches.
    pub fn cond_channels(&self) -> usize {
        match self.time_conditioning {
            TimeConditioning::Add => self.channels,
            TimeConditioning::Concat => 2 * self.channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralParams<T> {
    pub p_re: T,
    pub p_im: T,
    pub gamma: T,
    pub alpha: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FnoLayerParams<T> {
    pub w_linear: Conv<T>,
    pub filter: SpectralParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub scale: T,
    pub shift: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayerParams<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub norm_k: NormParams<T>,
    pub norm_v: NormParams<T>,
    pub out: Conv<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T> {
    pub gate: Conv<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<T> {
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub lift: Conv<T>,
    pub blocks: Vec<ResBlock<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet<T> {
    pub encoder: Encoder<T>,
    pub time_proj: Conv<T>,
    pub wfno_lift: Conv<T>,
    pub wfno: Vec<FnoLayerParams<T>>,
    pub attn_lift: Conv<T>,
    pub attn: Vec<AttnLayerParams<T>>,
    pub fusion: FusionParams<T>,
    pub proj: Conv<T>,
    /// One-element weight on the Gaussian-prior score term.
    pub skip: T,
}

pub type ScoreNetParams = ScoreNet<Tensor>;

type MapFn<'f, T, U> = dyn FnMut(&str, &T) -> Result<U> + 'f;

impl<T> Conv<T> {
    fn try_map<U>(&self, p: &str, f: &mut MapFn<'_, T, U>) -> Result<Conv<U>> {
        Ok(Conv {
            weight: f(&format!("{p}.weight"), &self.weight)?,
            bias: f(&format!("{p}.bias"), &self.bias)?,
        })
    }
}

impl<T> NormParams<T> {
    fn try_map<U>(&self, p: &str, f: &mut MapFn<'_, T, U>) -> Result<NormParams<U>> {
        Ok(NormParams {
            scale: f(&format!("{p}.scale"), &self.scale)?,
            shift: f(&format!("{p}.shift"), &self.shift)?,
        })
    }
}

impl<T> FnoLayerParams<T> {
    fn try_map<U>(&self, p: &str, f: &mut MapFn<'_, T, U>) -> Result<FnoLayerParams<U>> {
        Ok(FnoLayerParams {
            w_linear: self.w_linear.try_map(&format!("{p}.w_linear"), f)?,
            filter: SpectralParams {
                p_re: f(&format!("{p}.filter.P_re"), &self.filter.p_re)?,
                p_im: f(&format!("{p}.filter.P_im"), &self.filter.p_im)?,
                gamma: f(&format!("{p}.filter.gamma"), &self.filter.gamma)?,
                alpha: f(&format!("{p}.filter.alpha"), &self.filter.alpha)?,
            },
        })
    }
}

impl<T> AttnLayerParams<T> {
    fn try_map<U>(&self, p: &str, f: &mut MapFn<'_, T, U>) -> Result<AttnLayerParams<U>> {
        Ok(AttnLayerParams {
            wq: f(&format!("{p}.wq"), &self.wq)?,
            wk: f(&format!("{p}.wk"), &self.wk)?,
            wv: f(&format!("{p}.wv"), &self.wv)?,
            norm_k: self.norm_k.try_map(&format!("{p}.norm_k"), f)?,
            norm_v: self.norm_v.try_map(&format!("{p}.norm_v"), f)?,
            out: self.out.try_map(&format!("{p}.out"), f)?,
        })
    }
}

impl<T> ScoreNet<T> {
    /// Apply `f` to every leaf in the canonical order, passing its name.
    pub fn try_map<U>(&self, f: &mut MapFn<'_, T, U>) -> Result<ScoreNet<U>> {
        let encoder = Encoder {
            lift: self.encoder.lift.try_map("encoder.lift", f)?,
            blocks: self
                .encoder
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    Ok(ResBlock {
                        conv1: b.conv1.try_map(&format!("encoder.block.{i}.conv1"), f)?,
                        conv2: b.conv2.try_map(&format!("encoder.block.{i}.conv2"), f)?,
                    })
                })
                .collect::<Result<_>>()?,
        };
        let time_proj = self.time_proj.try_map("time_proj", f)?;
        let wfno_lift = self.wfno_lift.try_map("wfno.lift", f)?;
        let wfno = self
            .wfno
            .iter()
            .enumerate()
            .map(|(i, l)| l.try_map(&format!("wfno.{i}"), f))
            .collect::<Result<_>>()?;
        let attn_lift = self.attn_lift.try_map("attn.lift", f)?;
        let attn = self
            .attn
            .iter()
            .enumerate()
            .map(|(i, l)| l.try_map(&format!("attn.{i}"), f))
            .collect::<Result<_>>()?;
        Ok(ScoreNet {
            encoder,
            time_proj,
            wfno_lift,
            wfno,
            attn_lift,
            attn,
            fusion: FusionParams {
                gate: self.fusion.gate.try_map("fusion.gate", f)?,
            },
            proj: self.proj.try_map("proj", f)?,
            skip: f("skip", &self.skip)?,
        })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &T)) {
        self.try_map(&mut |n, t| {
            f(n, t);
            Ok(())
        })
        .expect("visiting cannot fail");
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }
}

fn is_alpha(name: &str) -> bool {
    name.ends_with(".filter.alpha")
}

fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    Tensor::randn(shape, std, rng)
}

fn conv_init<R: Rng + ?Sized>(k: usize, cin: usize, cout: usize, gain: f64, rng: &mut R) -> Conv<Tensor> {
    Conv {
        weight: randn(&[k, k, cin, cout], gain / ((k * k * cin) as f64).sqrt(), rng),
        bias: Tensor::zeros(&[cout]),
    }
}

impl ScoreNet<Tensor> {
    /// Randomly initialized parameters. `γ` starts at 0 so every spectral
    /// layer begins as a plain Fourier layer.
    pub fn init<R: Rng + ?Sized>(cfg: &ScoreNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let cc = cfg.cond_channels();
        let emb = cfg.time_embedding.len();
        let encoder = Encoder {
            lift: conv_init(3, 3, c, 1.0, rng),
            blocks: (0..cfg.encoder_blocks)
                .map(|_| ResBlock {
                    conv1: conv_init(3, c, c, 1.0, rng),
                    conv2: conv_init(3, c, c, 0.5, rng),
                })
                .collect(),
        };
        let time_proj = Conv {
            weight: randn(&[emb, c], 1.0 / (emb as f64).sqrt(), rng),
            bias: Tensor::zeros(&[c]),
        };
        let wfno_lift = conv_init(1, cc + 3, c, 1.0, rng);
        let spectral_std = 1.0 / c as f64;
        let wfno = (0..cfg.wfno_layers)
            .map(|_| FnoLayerParams {
                w_linear: conv_init(1, c, c, 1.0, rng),
                filter: SpectralParams {
                    p_re: randn(&[cfg.modes_h, cfg.modes_w, c, c], spectral_std, rng),
                    p_im: randn(&[cfg.modes_h, cfg.modes_w, c, c], spectral_std, rng),
                    gamma: Tensor::scalar(0.0),
                    alpha: Tensor::scalar(cfg.alpha),
                },
            })
            .collect();
        let attn_lift = conv_init(1, cc + 3, c, 1.0, rng);
        let proj_std = 1.0 / (c as f64).sqrt();
        let attn = (0..cfg.attn_layers)
            .map(|_| AttnLayerParams {
                wq: randn(&[c, c], proj_std, rng),
                wk: randn(&[c, c], proj_std, rng),
                wv: randn(&[c, c], proj_std, rng),
                norm_k: NormParams {
                    scale: Tensor::ones(&[c]),
                    shift: Tensor::zeros(&[c]),
                },
                norm_v: NormParams {
                    scale: Tensor::ones(&[c]),
                    shift: Tensor::zeros(&[c]),
                },
                out: conv_init(1, c, c, 0.5, rng),
            })
            .collect();
        Ok(ScoreNet {
            encoder,
            time_proj,
            wfno_lift,
            wfno,
            attn_lift,
            attn,
            fusion: FusionParams {
                gate: conv_init(1, 2 * c, 1, 1.0, rng),
            },
            proj: conv_init(1, c, 3, 0.01, rng),
            skip: Tensor::scalar(0.0),
        })
    }

    /// Record every tensor on `tape`. `α` is a constant unless it is learnable.
    pub fn bind(&self, tape: &mut Tape, learnable_alpha: bool) -> ScoreNet<Var> {
        self.try_map(&mut |name, t| {
            Ok(if is_alpha(name) && !learnable_alpha {
                tape.constant(t.clone())
            } else {
                tape.param(t.clone())
            })
        })
        .expect("binding cannot fail")
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    /// Rebuild from named tensors, requiring every name with a matching shape.
    pub fn from_entries(like: &Self, entries: &[(String, Tensor)]) -> Result<Self> {
        let map: std::collections::HashMap<&str, &Tensor> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if map.len() != entries.len() {
            return Err(Error::Config("duplicate parameter names".into()));
        }
        let mut used = 0;
        let net = like.try_map(&mut |name, t| {
            let found = map
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if found.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    found.shape(),
                    t.shape()
                )));
            }
            used += 1;
            Ok((*found).clone())
        })?;
        if used != entries.len() {
            return Err(Error::Config("unexpected extra parameters".into()));
        }
        Ok(net)
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        self.visit(&mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    pub fn from_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape(format!(
                "flat vector of length {} for {} parameters",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        self.try_map(&mut |_, t| {
            let part = flat[off..off + t.len()].to_vec();
            off += t.len();
            Tensor::new(t.shape(), part)
        })
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.is_finite());
        ok
    }
}

impl ScoreNet<Var> {
    /// Flat gradient aligned with [`ScoreNet::to_flat`].
    pub fn flat_grad(&self, grads: &Gradients, like: &ScoreNet<Tensor>) -> Vec<f64> {
        let mut vars = Vec::new();
        self.visit(&mut |_, v| vars.push(*v));
        let mut out = Vec::with_capacity(like.num_scalars());
        let mut k = 0;
        like.visit(&mut |_, t| {
            match grads.get(vars[k]) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, t.len())),
            }
            k += 1;
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_stable_dotted_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = ScoreNet::init(&ScoreNetConfig::desk(), &mut rng).unwrap();
        let names = net.names();
        assert_eq!(names[0], "encoder.lift.weight");
        assert!(names.contains(&"wfno.1.filter.P_re".to_string()));
        assert!(names.contains(&"attn.0.norm_k.scale".to_string()));
        assert!(names.contains(&"fusion.gate.bias".to_string()));
        assert_eq!(names.last().unwrap(), "skip");
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn flat_round_trip_and_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = ScoreNet::init(&ScoreNetConfig::desk(), &mut rng).unwrap();
        let flat = net.to_flat();
        assert_eq!(net.from_flat(&flat).unwrap(), net);
        assert!(net.from_flat(&flat[1..]).is_err());
        let back = ScoreNet::from_entries(&net, &net.entries()).unwrap();
        assert_eq!(back, net);
        let mut broken = net.entries();
        broken.pop();
        assert!(ScoreNet::from_entries(&net, &broken).is_err());
    }

    #[test]
    fn init_shapes_follow_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ScoreNetConfig {
            time_conditioning: TimeConditioning::Concat,
            ..ScoreNetConfig::desk()
        };
        let net = ScoreNet::init(&cfg, &mut rng).unwrap();
        assert_eq!(net.fusion.gate.weight.shape(), &[1, 1, 24, 1]);
        assert_eq!(net.wfno_lift.weight.shape(), &[1, 1, 27, 12]);
        assert_eq!(net.wfno[0].filter.p_re.shape(), &[16, 16, 12, 12]);
        assert_eq!(net.wfno[0].filter.gamma.data(), &[0.0]);
        assert_eq!(net.time_proj.weight.shape(), &[128, 12]);
    }
}
