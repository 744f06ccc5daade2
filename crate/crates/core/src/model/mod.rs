//! The joint try-on network.
//!
//! Tokens are laid out as `[T; X; C1; C2]`: a learned prompt block, the noisy
//! target patches, the person patches and the garment patches. All image
//! segments share one patch embedder. Each block is pre-norm joint attention
//! followed by a shared gated MLP, both modulated by the timestep. Only the
//! `X` span is decoded back to a velocity image.

mod checkpoint;
mod config;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT};
pub use config::{LoraConfig, ModelConfig, TrainPolicy};
pub use params::{Param, ParamStore};
pub use train::{Adam, FrozenAudit, Optimizer, TrainConfig, TrainItem, Trainer};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    joint_attention_on_tape, AttentionSetup, AttentionVars, BranchVars, FlopReport, LinearVars, LoraVars,
    Segmentation,
};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::patch::{patchify, unpatchify, GridDims};
use crate::rope::{build_positions, PositionGrid};
use crate::tensor::{Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-6;
const BRANCH_KEYS: [&str; 3] = ["tn", "c1", "c2"];
const PROJ_KEYS: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Everything that belongs to the pretrained backbone.
    Backbone,
    /// `W_Q/K/V/O` of the person and garment branches.
    Conditional,
    /// LoRA factors on the person and garment branches.
    Lora,
}

/// Role of a parameter, derived from its name.
pub fn param_role(name: &str) -> ParamRole {
    let conditional = name.contains(".attn.c1.") || name.contains(".attn.c2.");
    if conditional && (name.ends_with(".lora_down") || name.ends_with(".lora_up")) {
        ParamRole::Lora
    } else if conditional {
        ParamRole::Conditional
    } else {
        ParamRole::Backbone
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

/// Parameter names, shapes and initialisers in canonical order.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.dim;
    let pl = cfg.patch_len();
    let h = cfg.mlp_ratio * d;
    let fan = |n: usize| Init::Uniform(1.0 / (n as f64).sqrt());
    let mut s: Vec<(String, Vec<usize>, Init)> = vec![
        ("embed.weight".into(), vec![d, pl], fan(pl)),
        ("embed.bias".into(), vec![d], Init::Zeros),
        ("prompt".into(), vec![cfg.text_len.max(1), d], Init::Uniform(1.0)),
        ("time.fc1.weight".into(), vec![d, d], fan(d)),
        ("time.fc1.bias".into(), vec![d], Init::Zeros),
        ("time.fc2.weight".into(), vec![(4 * cfg.blocks + 2) * d, d], fan(d)),
        ("time.fc2.bias".into(), vec![(4 * cfg.blocks + 2) * d], Init::Zeros),
    ];
    if cfg.text_len == 0 {
        s.retain(|p| p.0 != "prompt");
    }
    for b in 0..cfg.blocks {
        s.push((format!("blocks.{b}.norm1.gain"), vec![d], Init::Ones));
        for br in BRANCH_KEYS {
            for p in PROJ_KEYS {
                s.push((format!("blocks.{b}.attn.{br}.{p}"), vec![d, d], fan(d)));
            }
        }
        if let Some(l) = cfg.lora {
            for br in ["c1", "c2"] {
                for p in PROJ_KEYS {
                    s.push((format!("blocks.{b}.attn.{br}.{p}.lora_down"), vec![l.rank, d], fan(d)));
                    s.push((format!("blocks.{b}.attn.{br}.{p}.lora_up"), vec![d, l.rank], Init::Zeros));
                }
            }
        }
        s.push((format!("blocks.{b}.norm2.gain"), vec![d], Init::Ones));
        s.push((format!("blocks.{b}.mlp.gate"), vec![h, d], fan(d)));
        s.push((format!("blocks.{b}.mlp.up"), vec![h, d], fan(d)));
        s.push((format!("blocks.{b}.mlp.down"), vec![d, h], fan(h)));
    }
    s.push(("final.norm.gain".into(), vec![d], Init::Ones));
    s.push(("final.decode.weight".into(), vec![pl, d], Init::Zeros));
    s.push(("final.decode.bias".into(), vec![pl], Init::Zeros));
    s
}

#[derive(Clone, Debug)]
struct LinIds {
    weight: usize,
    lora: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
struct BlockIds {
    norm1: usize,
    norm2: usize,
    /// `[branch][q, k, v, o]`
    attn: [[LinIds; 4]; 3],
    gate: usize,
    up: usize,
    down: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    embed_w: usize,
    embed_b: usize,
    prompt: Option<usize>,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    blocks: Vec<BlockIds>,
    final_gain: usize,
    decode_w: usize,
    decode_b: usize,
}

impl Layout {
    fn resolve(cfg: &ModelConfig, store: &ParamStore) -> Result<Layout> {
        let id = |n: &str| store.id(n);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let lin = |br: &str, p: &str| -> Result<LinIds> {
                let base = format!("blocks.{b}.attn.{br}.{p}");
                let lora = if cfg.lora.is_some() && br != "tn" {
                    Some((id(&format!("{base}.lora_down"))?, id(&format!("{base}.lora_up"))?))
                } else {
                    None
                };
                Ok(LinIds {
                    weight: id(&base)?,
                    lora,
                })
            };
            let branch = |br: &str| -> Result<[LinIds; 4]> {
                Ok([lin(br, "q")?, lin(br, "k")?, lin(br, "v")?, lin(br, "o")?])
            };
            blocks.push(BlockIds {
                norm1: id(&format!("blocks.{b}.norm1.gain"))?,
                norm2: id(&format!("blocks.{b}.norm2.gain"))?,
                attn: [branch("tn")?, branch("c1")?, branch("c2")?],
                gate: id(&format!("blocks.{b}.mlp.gate"))?,
                up: id(&format!("blocks.{b}.mlp.up"))?,
                down: id(&format!("blocks.{b}.mlp.down"))?,
            });
        }
        Ok(Layout {
            embed_w: id("embed.weight")?,
            embed_b: id("embed.bias")?,
            prompt: if cfg.text_len > 0 { Some(id("prompt")?) } else { None },
            fc1_w: id("time.fc1.weight")?,
            fc1_b: id("time.fc1.bias")?,
            fc2_w: id("time.fc2.weight")?,
            fc2_b: id("time.fc2.bias")?,
            blocks,
            final_gain: id("final.norm.gain")?,
            decode_w: id("final.decode.weight")?,
            decode_b: id("final.decode.bias")?,
        })
    }
}

/// Everything recorded by one forward pass on a tape.
#[derive(Debug)]
pub struct TapeForward {
    /// Predicted velocity as flat patches `[N_x, P²C]`.
    pub velocity: Var,
    pub grid: GridDims,
    pub seg: Segmentation,
    pub positions: PositionGrid,
    pub flops: FlopReport,
    /// Per block, per head post-softmax weights (dense kernel only).
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct JcoModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl PartialEq for JcoModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

impl JcoModel {
    /// Random init. Values are f32-representable so checkpoints round-trip
    /// exactly. The person and garment branches start as copies of the
    /// text-and-noise branch.
    pub fn init(config: ModelConfig, seed: u64) -> Result<JcoModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape, init) in param_specs(&config) {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
                Init::Uniform(b) => Tensor::from_fn(&shape, |_| f32_round(rng.gen_range(-b..b))),
            };
            store.insert(name, t);
        }
        let mut model = JcoModel::from_store(config, store)?;
        model.init_conditional_branches();
        Ok(model)
    }

    /// Wraps an existing store; names and shapes must match the config.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<JcoModel> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != store.len() {
            return Err(Error::contract(
                "model",
                format!("config expects {} parameters, store has {}", specs.len(), store.len()),
            ));
        }
        for (name, shape, _) in &specs {
            let t = store.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::contract(
                    "model",
                    format!("{name}: expected {shape:?}, found {:?}", t.shape()),
                ));
            }
        }
        let layout = Layout::resolve(&config, &store)?;
        Ok(JcoModel {
            config,
            params: store,
            layout,
        })
    }

    /// Copies `W_Q/K/V/O` of the text-and-noise branch into both
    /// conditional branches, in every block.
    pub fn init_conditional_branches(&mut self) {
        for b in &self.layout.blocks {
            for p in 0..4 {
                let src = self.params.by_id(b.attn[0][p].weight).value.clone();
                for br in 1..3 {
                    self.params.by_id_mut(b.attn[br][p].weight).value = src.clone();
                }
            }
        }
    }

    pub fn set_trainable(&mut self, policy: TrainPolicy) -> Result<()> {
        if policy == TrainPolicy::ConditionalLora && self.config.lora.is_none() {
            return Err(Error::contract("set_trainable", "conditional_lora needs a LoRA config"));
        }
        for p in self.params.iter_mut() {
            let role = param_role(&p.name);
            p.trainable = match policy {
                TrainPolicy::Full => true,
                TrainPolicy::ConditionalOnly => role == ParamRole::Conditional,
                TrainPolicy::ConditionalLora => role == ParamRole::Lora,
            };
        }
        Ok(())
    }

    /// Same weights, new nominal image sizes. Positions are rebuilt from the
    /// grid dims at every forward, so nothing needs interpolating.
    pub fn transfer_resolution(&self, target: &ModelConfig) -> Result<JcoModel> {
        if !self.config.same_architecture(target) {
            return Err(Error::contract(
                "transfer_resolution",
                "source and target differ in dim, heads, blocks, patch, channels, prompt, MLP or LoRA rank",
            ));
        }
        let mut out = JcoModel::from_store(target.clone(), self.params.clone())?;
        for (dst, src) in out.params.iter_mut().zip(self.params.iter()) {
            dst.trainable = src.trainable;
        }
        Ok(out)
    }

    /// Fills zero-initialised parameters (decode, LoRA `B`) with uniform
    /// values in `±bound` so tests can exercise a non-degenerate network.
    pub fn fill_zero_init(&mut self, seed: u64, bound: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params.iter_mut() {
            let zero_init = p.name.starts_with("final.decode") || p.name.ends_with(".lora_up");
            if zero_init {
                p.value = Tensor::from_fn(p.value.shape(), |_| f32_round(rng.gen_range(-bound..bound)));
            }
        }
    }

    pub fn lora_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| param_role(&p.name) == ParamRole::Lora)
            .map(|p| p.value.numel())
            .sum()
    }

    fn check_image(&self, what: &str, img: &ImageTensor) -> Result<GridDims> {
        if img.channels() != self.config.channels {
            return Err(Error::contract(
                "forward",
                format!("{what} has {} channels, model expects {}", img.channels(), self.config.channels),
            ));
        }
        GridDims::for_image(img.height(), img.width(), self.config.patch)
            .map_err(|e| Error::contract("forward", format!("{what}: {e}")))
    }

    /// Records a forward pass. `vars` must come from `self.params.bind`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        noisy: &ImageTensor,
        person: Option<&ImageTensor>,
        garment: Option<&ImageTensor>,
        t: f64,
    ) -> Result<TapeForward> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::contract("forward", format!("t = {t} outside [0, 1]")));
        }
        if vars.len() != self.params.len() {
            return Err(Error::contract("forward", "parameter vars do not match the store"));
        }
        let cfg = &self.config;
        let d = cfg.dim;
        let lay = &self.layout;
        let grid = self.check_image("noisy image", noisy)?;
        let empty = GridDims::new(0, 0);
        let ref_grid = person.map(|p| self.check_image("person image", p)).transpose()?.unwrap_or(empty);
        let gar_grid = garment.map(|g| self.check_image("garment image", g)).transpose()?.unwrap_or(empty);
        let positions = build_positions(cfg.pos_scheme, grid, ref_grid, gar_grid, cfg.text_len)
            .map_err(|e| Error::contract("forward", e.to_string()))?;
        let seg = Segmentation::new(cfg.text_len, grid.area(), ref_grid.area(), gar_grid.area());

        // patches of X, C1 and C2 stacked, then one shared embedding
        let pl = cfg.patch_len();
        let mut patch_data = patchify(noisy, cfg.patch)?.vectors.into_data();
        for img in [person, garment].into_iter().flatten() {
            patch_data.extend(patchify(img, cfg.patch)?.vectors.into_data());
        }
        let n_img = patch_data.len() / pl;
        let patches = tape.constant(Tensor::new(vec![n_img, pl], patch_data)?);
        let emb = tape.matmul_nt(patches, vars[lay.embed_w])?;
        let emb = tape.add_row(emb, vars[lay.embed_b])?;
        let mut x = match lay.prompt {
            Some(p) => tape.concat(&[vars[p], emb], 0)?,
            None => emb,
        };

        let te = tape.constant(time_embedding(t, d));
        let h = tape.matmul_nt(te, vars[lay.fc1_w])?;
        let h = tape.add_row(h, vars[lay.fc1_b])?;
        let h = tape.silu(h);
        let mods = tape.matmul_nt(h, vars[lay.fc2_w])?;
        let mods = tape.add_row(mods, vars[lay.fc2_b])?;
        let mut chunk = 0usize;
        let mut next_mod = |tape: &mut Tape| -> Result<Var> {
            let v = tape.slice(mods, 1, chunk * d, d);
            chunk += 1;
            v
        };

        let mut flops = FlopReport::default();
        let mut attention = Vec::with_capacity(lay.blocks.len());
        for b in &lay.blocks {
            let (shift, scale) = (next_mod(tape)?, next_mod(tape)?);
            let h = modulate(tape, x, vars[b.norm1], shift, scale)?;
            let w = self.attention_vars(vars, b);
            let setup = AttentionSetup {
                seg,
                positions: Some(&positions),
                rope_theta: cfg.rope_theta,
                heads: cfg.heads,
                masked: cfg.mask_enabled,
                kernel: cfg.kernel,
            };
            let a = joint_attention_on_tape(tape, h, &w, &setup, &mut flops)?;
            attention.push(a.weights);
            x = tape.add(x, a.output)?;

            let (shift, scale) = (next_mod(tape)?, next_mod(tape)?);
            let h = modulate(tape, x, vars[b.norm2], shift, scale)?;
            let g = tape.matmul_nt(h, vars[b.gate])?;
            let g = tape.silu(g);
            let u = tape.matmul_nt(h, vars[b.up])?;
            let gu = tape.mul(g, u)?;
            let m = tape.matmul_nt(gu, vars[b.down])?;
            x = tape.add(x, m)?;
        }

        let xs = tape.rows(x, seg.noise_span().start, seg.noise)?;
        let (shift, scale) = (next_mod(tape)?, next_mod(tape)?);
        let h = modulate(tape, xs, vars[lay.final_gain], shift, scale)?;
        let out = tape.matmul_nt(h, vars[lay.decode_w])?;
        let velocity = tape.add_row(out, vars[lay.decode_b])?;
        Ok(TapeForward {
            velocity,
            grid,
            seg,
            positions,
            flops,
            attention,
        })
    }

    fn attention_vars(&self, vars: &[Var], b: &BlockIds) -> AttentionVars {
        let scale = self.config.lora.map(|l| l.alpha / l.rank as f64).unwrap_or(1.0);
        let lin = |ids: &LinIds| LinearVars {
            weight: vars[ids.weight],
            lora: ids.lora.map(|(dn, up)| LoraVars {
                down: vars[dn],
                up: vars[up],
                scale,
            }),
        };
        let branch = |ids: &[LinIds; 4]| BranchVars {
            q: lin(&ids[0]),
            k: lin(&ids[1]),
            v: lin(&ids[2]),
            o: lin(&ids[3]),
        };
        AttentionVars {
            text_noise: branch(&b.attn[0]),
            reference: branch(&b.attn[1]),
            garment: branch(&b.attn[2]),
        }
    }

    /// Predicted velocity image for `noisy` at time `t`.
    pub fn forward(
        &self,
        noisy: &ImageTensor,
        person: Option<&ImageTensor>,
        garment: Option<&ImageTensor>,
        t: f64,
    ) -> Result<ImageTensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let out = self.forward_on_tape(&mut tape, &vars, noisy, person, garment, t)?;
        unpatchify(tape.value(out.velocity), out.grid, self.config.patch, self.config.channels)
    }

    /// Draws `R'` by integrating the learned velocity field from Gaussian
    /// noise seeded by `seed`.
    pub fn sample(
        &self,
        person: Option<&ImageTensor>,
        garment: Option<&ImageTensor>,
        height: usize,
        width: usize,
        seed: u64,
        steps: usize,
    ) -> Result<ImageTensor> {
        let c = self.config.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Tensor::from_fn(&[c, height, width], |_| rng.sample(rand_distr::StandardNormal));
        let rf = crate::flow::RfConfig {
            sampler_steps: steps,
            ..self.config.rf
        };
        let field = |x: &Tensor, t: f64| -> Result<Tensor> {
            let img = ImageTensor::from_tensor(x)?;
            Ok(self.forward(&img, person, garment, t)?.to_tensor())
        };
        let x = crate::flow::euler_sample(&field, &noise, &rf)?;
        ImageTensor::from_tensor(&x)
    }
}

/// Samples `R'` from a model for a triplet's person and garment.
#[derive(Clone, Copy, Debug)]
pub struct ModelSampler<'a> {
    pub model: &'a JcoModel,
    pub steps: usize,
}

impl crate::data::TryOnGenerator for ModelSampler<'_> {
    fn generate(&self, sample: &crate::data::TripletSample, seed: u64) -> Result<ImageTensor> {
        let (h, w) = sample.person.dims();
        self.model
            .sample(Some(&sample.person), Some(&sample.garment), h, w, seed, self.steps)
            .map(|r| r.clamped())
    }
}

/// `rms_norm(x)·gain·(1 + scale) + shift`.
fn modulate(tape: &mut Tape, x: Var, gain: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = tape.rms_norm(x, Some(gain), NORM_EPS)?;
    let s1 = tape.add_scalar(scale, 1.0);
    let h = tape.mul_row(h, s1)?;
    tape.add_row(h, shift)
}

/// Sinusoidal embedding `[1, d]` of `1000·t`.
pub fn time_embedding(t: f64, d: usize) -> Tensor {
    let half = d / 2;
    let arg = 1000.0 * t;
    Tensor::from_fn(&[1, d], |i| {
        let j = i % half;
        let f = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        if i < half {
            (arg * f).sin()
        } else {
            (arg * f).cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            dim: 16,
            heads: 2,
            blocks: 2,
            patch: 2,
            image: [4, 6],
            garment: [4, 4],
            text_len: 2,
            ..ModelConfig::default()
        }
    }

    fn img(c: usize, h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(c, h, w, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn zero_decode_gives_zero_velocity() {
        let m = JcoModel::init(tiny(), 0).unwrap();
        let out = m.forward(&img(3, 4, 6, 1), Some(&img(3, 4, 6, 2)), Some(&img(3, 4, 4, 3)), 0.4).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_matches_noisy_shape() {
        let mut m = JcoModel::init(tiny(), 0).unwrap();
        m.fill_zero_init(5, 0.1);
        for (h, w, gh, gw) in [(4, 6, 4, 4), (8, 2, 2, 6), (6, 6, 4, 2)] {
            let out = m.forward(&img(3, h, w, 1), Some(&img(3, h, w, 2)), Some(&img(3, gh, gw, 3)), 0.3).unwrap();
            assert_eq!((out.channels(), out.height(), out.width()), (3, h, w));
            assert!(out.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn branch_copy_is_bitwise() {
        let m = JcoModel::init(tiny(), 3).unwrap();
        for b in 0..2 {
            for p in PROJ_KEYS {
                let tn = m.params.get(&format!("blocks.{b}.attn.tn.{p}")).unwrap();
                for br in ["c1", "c2"] {
                    assert_eq!(m.params.get(&format!("blocks.{b}.attn.{br}.{p}")).unwrap(), tn);
                }
            }
        }
    }

    #[test]
    fn policies_select_roles() {
        let cfg = ModelConfig {
            lora: Some(LoraConfig { rank: 2, alpha: 2.0 }),
            ..tiny()
        };
        let mut m = JcoModel::init(cfg, 0).unwrap();
        m.set_trainable(TrainPolicy::ConditionalLora).unwrap();
        assert_eq!(m.params.trainable_count(), 2 * 2 * 4 * 2 * (16 + 16));
        m.set_trainable(TrainPolicy::ConditionalOnly).unwrap();
        assert_eq!(m.params.trainable_count(), 2 * 2 * 4 * 16 * 16);
        m.set_trainable(TrainPolicy::Full).unwrap();
        assert_eq!(m.params.trainable_count(), m.params.total_count());

        let mut plain = JcoModel::init(tiny(), 0).unwrap();
        assert!(plain.set_trainable(TrainPolicy::ConditionalLora).is_err());
        assert!("everything".parse::<TrainPolicy>().is_err());
    }

    #[test]
    fn transfer_checks_architecture() {
        let m = JcoModel::init(tiny(), 0).unwrap();
        let same = m.transfer_resolution(&tiny()).unwrap();
        assert_eq!(same, m);
        let wider = ModelConfig { dim: 32, ..tiny() };
        assert!(matches!(m.transfer_resolution(&wider), Err(Error::Contract { .. })));
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = JcoModel::init(tiny(), 0).unwrap();
        let x = img(3, 4, 6, 1);
        assert!(m.forward(&img(3, 5, 6, 1), None, None, 0.5).is_err());
        assert!(m.forward(&img(1, 4, 6, 1), None, None, 0.5).is_err());
        assert!(m.forward(&x, Some(&img(3, 4, 4, 1)), None, 0.5).is_err());
        assert!(m.forward(&x, None, None, 1.5).is_err());
        assert!(m.forward(&x, None, None, 0.5).is_ok());
    }
}
