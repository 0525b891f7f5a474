use std::path::Path;

use langaux_numcore::{checkpoint, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::{EncoderKind, ModelConfig};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LnIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct MlpIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncBlockIdx {
    pub ln1: LnIdx,
    pub attn: AttnIdx,
    pub ln2: LnIdx,
    pub mlp: MlpIdx,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecBlockIdx {
    pub ln1: LnIdx,
    pub self_attn: AttnIdx,
    pub ln2: LnIdx,
    pub cross: AttnIdx,
    pub ln3: LnIdx,
    pub mlp: MlpIdx,
}

/// Where each parameter lives in the flat list. Encoder parameters come
/// first and end at `encoder_end`; the policy head follows, then the decoder.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub obs_embed: usize,
    pub time_pos: Option<usize>,
    pub grid_pos: Option<usize>,
    pub cls: Option<usize>,
    pub text_embed: usize,
    pub goal_pos: usize,
    pub plan_pos: Option<usize>,
    pub enc_blocks: Vec<EncBlockIdx>,
    pub enc_ln: LnIdx,
    pub encoder_end: usize,
    pub pi_w: usize,
    pub pi_b: usize,
    pub policy_end: usize,
    pub dec_embed: usize,
    pub dec_pos: usize,
    pub dec_blocks: Vec<DecBlockIdx>,
    pub dec_ln: LnIdx,
    pub out_w: usize,
    pub out_b: usize,
}

struct Registry {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIdx {
        LnIdx {
            g: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            b: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let mut lin = |n: &str| {
            (
                self.add(format!("{prefix}.{n}.weight"), vec![d, d], Init::Normal),
                self.add(format!("{prefix}.{n}.bias"), vec![d], Init::Zeros),
            )
        };
        let (wq, bq) = lin("query");
        let (wk, bk) = lin("key");
        let (wv, bv) = lin("value");
        let (wo, bo) = lin("out");
        AttnIdx {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn mlp(&mut self, prefix: &str, d: usize, m: usize) -> MlpIdx {
        MlpIdx {
            w1: self.add(format!("{prefix}.fc1.weight"), vec![d, m], Init::Normal),
            b1: self.add(format!("{prefix}.fc1.bias"), vec![m], Init::Zeros),
            w2: self.add(format!("{prefix}.fc2.weight"), vec![m, d], Init::Normal),
            b2: self.add(format!("{prefix}.fc2.bias"), vec![d], Init::Zeros),
        }
    }
}

fn registry(cfg: &ModelConfig) -> (Registry, Layout) {
    let d = cfg.embed_dim;
    let mut r = Registry { specs: Vec::new() };
    let (obs_embed, time_pos, grid_pos, cls) = match cfg.encoder {
        EncoderKind::Sequence => (
            r.add(
                "encoder.obs_embed".into(),
                vec![cfg.obs_tokens * cfg.obs_vocab_size, d],
                Init::Normal,
            ),
            Some(r.add("encoder.time_pos".into(), vec![cfg.max_seq_len, d], Init::Normal)),
            None,
            None,
        ),
        EncoderKind::State => (
            r.add("encoder.obs_embed".into(), vec![cfg.obs_vocab_size, d], Init::Normal),
            None,
            Some(r.add("encoder.grid_pos".into(), vec![cfg.obs_tokens, d], Init::Normal)),
            Some(r.add("encoder.cls".into(), vec![1, d], Init::Normal)),
        ),
    };
    let text_embed = r.add("encoder.text_embed".into(), vec![cfg.text_vocab_size, d], Init::Normal);
    let goal_pos = r.add("encoder.goal_pos".into(), vec![cfg.max_goal_len, d], Init::Normal);
    let plan_pos =
        (cfg.max_plan_len > 0).then(|| r.add("encoder.plan_pos".into(), vec![cfg.max_plan_len, d], Init::Normal));
    let enc_blocks = (0..cfg.encoder_blocks)
        .map(|i| {
            let p = format!("encoder.block{i}");
            EncBlockIdx {
                ln1: r.ln(&format!("{p}.ln1"), d),
                attn: r.attn(&format!("{p}.attn"), d),
                ln2: r.ln(&format!("{p}.ln2"), d),
                mlp: r.mlp(&format!("{p}.mlp"), d, cfg.mlp_dim),
            }
        })
        .collect();
    let enc_ln = r.ln("encoder.ln_final", d);
    let encoder_end = r.specs.len();
    let pi_w = r.add("policy.weight".into(), vec![d, cfg.action_count], Init::Normal);
    let pi_b = r.add("policy.bias".into(), vec![cfg.action_count], Init::Zeros);
    let policy_end = r.specs.len();
    let dec_embed = r.add("decoder.embed".into(), vec![cfg.decoder_vocab_size, d], Init::Normal);
    let dec_pos = r.add("decoder.pos".into(), vec![cfg.max_instr_len, d], Init::Normal);
    let dec_blocks = (0..cfg.decoder_blocks)
        .map(|i| {
            let p = format!("decoder.block{i}");
            DecBlockIdx {
                ln1: r.ln(&format!("{p}.ln1"), d),
                self_attn: r.attn(&format!("{p}.self_attn"), d),
                ln2: r.ln(&format!("{p}.ln2"), d),
                cross: r.attn(&format!("{p}.cross_attn"), d),
                ln3: r.ln(&format!("{p}.ln3"), d),
                mlp: r.mlp(&format!("{p}.mlp"), d, cfg.mlp_dim),
            }
        })
        .collect();
    let dec_ln = r.ln("decoder.ln_final", d);
    let out_w = r.add(
        "decoder.out.weight".into(),
        vec![d, cfg.decoder_vocab_size],
        Init::Normal,
    );
    let out_b = r.add("decoder.out.bias".into(), vec![cfg.decoder_vocab_size], Init::Zeros);
    let layout = Layout {
        obs_embed,
        time_pos,
        grid_pos,
        cls,
        text_embed,
        goal_pos,
        plan_pos,
        enc_blocks,
        enc_ln,
        encoder_end,
        pi_w,
        pi_b,
        policy_end,
        dec_embed,
        dec_pos,
        dec_blocks,
        dec_ln,
        out_w,
        out_b,
    };
    (r, layout)
}

/// Total scalar parameters implied by `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    registry(cfg)
        .0
        .specs
        .iter()
        .map(|(_, s, _)| s.iter().product::<usize>())
        .sum()
}

/// Parameter groups, for freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Policy,
    Decoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Real> ModelParams<F> {
    /// Normal(0, 0.02) weights and embeddings, zero biases, unit gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (reg, _) = registry(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(reg.specs.len());
        let mut tensors = Vec::with_capacity(reg.specs.len());
        for (name, shape, init) in reg.specs {
            let t = match init {
                Init::Normal => Tensor::randn(shape, INIT_STD, &mut rng)?,
                Init::Zeros => Tensor::zeros(shape)?,
                Init::Ones => Tensor::ones(shape)?,
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: cfg.clone(),
            names,
            tensors,
        })
    }

    pub(crate) fn layout(&self) -> Layout {
        registry(&self.config).1
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn group_of(&self, index: usize) -> Group {
        let l = self.layout();
        if index < l.encoder_end {
            Group::Encoder
        } else if index < l.policy_end {
            Group::Policy
        } else {
            Group::Decoder
        }
    }

    pub fn entries(&self) -> Vec<(String, Tensor<F>)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.entries())
    }

    /// Writes `<stem>.ckpt` (tensors) and `<stem>.model` (config text).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(dir.join(format!("{stem}.ckpt")), &self.entries())?;
        std::fs::write(dir.join(format!("{stem}.model")), self.config.to_kv())?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let config = ModelConfig::from_kv(&std::fs::read_to_string(dir.join(format!("{stem}.model")))?)?;
        let entries = checkpoint::load::<F>(dir.join(format!("{stem}.ckpt")))?;
        let fresh = Self::init(&config, 0)?;
        if entries.len() != fresh.names.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, config implies {}",
                entries.len(),
                fresh.names.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, t), (want, w)) in entries.into_iter().zip(fresh.names.iter().zip(&fresh.tensors)) {
            if &name != want || t.shape() != w.shape() {
                return Err(Error::Config(format!(
                    "checkpoint entry `{name}` {:?} does not match `{want}` {:?}",
                    t.shape(),
                    w.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { config, names, tensors })
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}
