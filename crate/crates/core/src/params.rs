//! Model parameters: the fusion block, the decoder blocks, the prediction
//! heads, and the learnable instance queries, with deterministic seeded
//! initialization, flat-vector views for the optimizer and the gradient
//! oracle, and checkpoint-directory serialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Attention, FeedForward, Linear, Norm};
use crate::rngutil::DetRng;
use crate::tensor::{self, Tensor};

/// Static model dimensions. Reference-instance count N and prototype count M
/// vary per example and are not baked into the parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel width C.
    pub channels: usize,
    /// Learnable instance query count S.
    pub instance_queries: usize,
    /// Decoder block count L.
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Feed-forward hidden width multiplier.
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    /// Encoder stub patch size.
    #[serde(default = "default_patch")]
    pub patch: usize,
    /// Seed of the frozen encoder stub projection.
    #[serde(default)]
    pub encoder_seed: u64,
}

fn default_heads() -> usize {
    1
}
fn default_expansion() -> usize {
    4
}
fn default_patch() -> usize {
    4
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(Error::Config(format!(
                "channels must be a positive multiple of 4, got {}",
                self.channels
            )));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide channels {}",
                self.heads, self.channels
            )));
        }
        if self.instance_queries == 0 {
            return Err(Error::Config("instance_queries must be positive".to_string()));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".to_string()));
        }
        if self.expansion == 0 {
            return Err(Error::Config("expansion must be positive".to_string()));
        }
        if self.patch == 0 {
            return Err(Error::Config("patch must be positive".to_string()));
        }
        Ok(())
    }
}

/// In-context fusion block: token self-attention, symmetric token/cell
/// cross-attention with shared weights, and a shared feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub norm_self: Norm,
    pub self_attn: Attention,
    pub norm_cross_tokens: Norm,
    pub norm_cross_cells: Norm,
    pub cross_attn: Attention,
    pub norm_ffn_tokens: Norm,
    pub norm_ffn_cells: Norm,
    pub ffn: FeedForward,
}

impl FusionParams {
    fn init(c: usize, heads: usize, expansion: usize, rng: &mut DetRng) -> FusionParams {
        FusionParams {
            norm_self: Norm::init(c),
            self_attn: Attention::init(c, heads, rng),
            norm_cross_tokens: Norm::init(c),
            norm_cross_cells: Norm::init(c),
            cross_attn: Attention::init(c, heads, rng),
            norm_ffn_tokens: Norm::init(c),
            norm_ffn_cells: Norm::init(c),
            ffn: FeedForward::init(c, c * expansion, c, rng),
        }
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Tensor)) {
        self.norm_self.for_each(f);
        self.self_attn.for_each(f);
        self.norm_cross_tokens.for_each(f);
        self.norm_cross_cells.for_each(f);
        self.cross_attn.for_each(f);
        self.norm_ffn_tokens.for_each(f);
        self.norm_ffn_cells.for_each(f);
        self.ffn.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.norm_self.for_each_mut(f);
        self.self_attn.for_each_mut(f);
        self.norm_cross_tokens.for_each_mut(f);
        self.norm_cross_cells.for_each_mut(f);
        self.cross_attn.for_each_mut(f);
        self.norm_ffn_tokens.for_each_mut(f);
        self.norm_ffn_cells.for_each_mut(f);
        self.ffn.for_each_mut(f);
    }

    pub fn for_each_named(&self, p: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.norm_self.for_each_named(&format!("{p}.norm_self"), f);
        self.self_attn.for_each_named(&format!("{p}.self_attn"), f);
        self.norm_cross_tokens.for_each_named(&format!("{p}.norm_cross_tokens"), f);
        self.norm_cross_cells.for_each_named(&format!("{p}.norm_cross_cells"), f);
        self.cross_attn.for_each_named(&format!("{p}.cross_attn"), f);
        self.norm_ffn_tokens.for_each_named(&format!("{p}.norm_ffn_tokens"), f);
        self.norm_ffn_cells.for_each_named(&format!("{p}.norm_ffn_cells"), f);
        self.ffn.for_each_named(&format!("{p}.ffn"), f);
    }
}

/// One decoder block: shared masked self-attention, masked cross-attention
/// for the query path, and separate feed-forwards for queries and prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct MFormerLayer {
    pub norm_self: Norm,
    pub self_attn: Attention,
    pub norm_cross: Norm,
    pub cross_attn: Attention,
    pub norm_ffn_query: Norm,
    pub ffn_query: FeedForward,
    pub norm_ffn_proto: Norm,
    pub ffn_proto: FeedForward,
}

impl MFormerLayer {
    fn init(c: usize, heads: usize, expansion: usize, rng: &mut DetRng) -> MFormerLayer {
        MFormerLayer {
            norm_self: Norm::init(c),
            self_attn: Attention::init(c, heads, rng),
            norm_cross: Norm::init(c),
            cross_attn: Attention::init(c, heads, rng),
            norm_ffn_query: Norm::init(c),
            ffn_query: FeedForward::init(c, c * expansion, c, rng),
            norm_ffn_proto: Norm::init(c),
            ffn_proto: FeedForward::init(c, c * expansion, c, rng),
        }
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Tensor)) {
        self.norm_self.for_each(f);
        self.self_attn.for_each(f);
        self.norm_cross.for_each(f);
        self.cross_attn.for_each(f);
        self.norm_ffn_query.for_each(f);
        self.ffn_query.for_each(f);
        self.norm_ffn_proto.for_each(f);
        self.ffn_proto.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.norm_self.for_each_mut(f);
        self.self_attn.for_each_mut(f);
        self.norm_cross.for_each_mut(f);
        self.cross_attn.for_each_mut(f);
        self.norm_ffn_query.for_each_mut(f);
        self.ffn_query.for_each_mut(f);
        self.norm_ffn_proto.for_each_mut(f);
        self.ffn_proto.for_each_mut(f);
    }

    pub fn for_each_named(&self, p: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.norm_self.for_each_named(&format!("{p}.norm_self"), f);
        self.self_attn.for_each_named(&format!("{p}.self_attn"), f);
        self.norm_cross.for_each_named(&format!("{p}.norm_cross"), f);
        self.cross_attn.for_each_named(&format!("{p}.cross_attn"), f);
        self.norm_ffn_query.for_each_named(&format!("{p}.norm_ffn_query"), f);
        self.ffn_query.for_each_named(&format!("{p}.ffn_query"), f);
        self.norm_ffn_proto.for_each_named(&format!("{p}.norm_ffn_proto"), f);
        self.ffn_proto.for_each_named(&format!("{p}.ffn_proto"), f);
    }
}

/// Prediction heads. The ID and instance paths own separate mask MLPs so
/// disabling one loss leaves the other head's parameters untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub decoder_norm: Norm,
    pub pixel_embed: Linear,
    pub ins_mask_mlp: FeedForward,
    pub id_mask_mlp: FeedForward,
    pub presence: Linear,
    pub no_object: Tensor,
}

impl HeadParams {
    fn init(c: usize, rng: &mut DetRng) -> HeadParams {
        let scale = 1.0 / (c as f64).sqrt();
        HeadParams {
            decoder_norm: Norm::init(c),
            pixel_embed: Linear::init(c, c, rng),
            ins_mask_mlp: FeedForward::init(c, c, c, rng),
            id_mask_mlp: FeedForward::init(c, c, c, rng),
            presence: Linear::init(2, c, rng),
            no_object: Tensor::from_vec(&[c], (0..c).map(|_| rng.normal() * scale).collect())
                .expect("shape"),
        }
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Tensor)) {
        self.decoder_norm.for_each(f);
        self.pixel_embed.for_each(f);
        self.ins_mask_mlp.for_each(f);
        self.id_mask_mlp.for_each(f);
        self.presence.for_each(f);
        f(&self.no_object);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.decoder_norm.for_each_mut(f);
        self.pixel_embed.for_each_mut(f);
        self.ins_mask_mlp.for_each_mut(f);
        self.id_mask_mlp.for_each_mut(f);
        self.presence.for_each_mut(f);
        f(&mut self.no_object);
    }

    pub fn for_each_named(&self, p: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.decoder_norm.for_each_named(&format!("{p}.decoder_norm"), f);
        self.pixel_embed.for_each_named(&format!("{p}.pixel_embed"), f);
        self.ins_mask_mlp.for_each_named(&format!("{p}.ins_mask_mlp"), f);
        self.id_mask_mlp.for_each_named(&format!("{p}.id_mask_mlp"), f);
        self.presence.for_each_named(&format!("{p}.presence"), f);
        f(format!("{p}.no_object"), &self.no_object);
    }
}

/// All trainable parameters plus the static dimensions they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub fusion: FusionParams,
    pub layers: Vec<MFormerLayer>,
    pub heads: HeadParams,
    pub q_ins_init: Tensor,
}

impl ModelParams {
    /// Seeded initialization: weights ~ N(0, 1/fan_in), biases zero, norm
    /// gamma one, initial instance queries standard normal.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = DetRng::new(seed);
        let c = config.channels;
        let fusion = FusionParams::init(c, config.heads, config.expansion, &mut rng);
        let layers = (0..config.layers)
            .map(|_| MFormerLayer::init(c, config.heads, config.expansion, &mut rng))
            .collect();
        let heads = HeadParams::init(c, &mut rng);
        let q_ins_init = Tensor::from_vec(
            &[config.instance_queries, c],
            (0..config.instance_queries * c).map(|_| rng.normal()).collect(),
        )
        .expect("shape");
        Ok(ModelParams {
            config: config.clone(),
            fusion,
            layers,
            heads,
            q_ins_init,
        })
    }

    /// Same structure with every tensor zeroed; gradient accumulator.
    pub fn zeros_like(&self) -> ModelParams {
        let mut out = self.clone();
        out.for_each_mut(&mut |t| t.data_mut().fill(0.0));
        out
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Tensor)) {
        self.fusion.for_each(f);
        for layer in &self.layers {
            layer.for_each(f);
        }
        self.heads.for_each(f);
        f(&self.q_ins_init);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.fusion.for_each_mut(f);
        for layer in &mut self.layers {
            layer.for_each_mut(f);
        }
        self.heads.for_each_mut(f);
        f(&mut self.q_ins_init);
    }

    pub fn for_each_named(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.fusion.for_each_named("fusion", f);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.for_each_named(&format!("block{i}"), f);
        }
        self.heads.for_each_named("heads", f);
        f("q_ins_init".to_string(), &self.q_ins_init);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |t| n += t.numel());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        self.for_each(&mut |t| flat.extend_from_slice(t.data()));
        flat
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat vector has {} values, model has {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut pos = 0;
        self.for_each_mut(&mut |t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        });
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(&mut |t| ok &= t.all_finite());
        ok
    }

    /// Zero every sub-layer output projection (attention `wo`, feed-forward
    /// `lin2`); the whole stack then reduces to residual pass-through.
    pub fn zero_all_output_projections(&mut self) {
        self.fusion.self_attn.zero_output();
        self.fusion.cross_attn.zero_output();
        self.fusion.ffn.zero_output();
        for layer in &mut self.layers {
            layer.self_attn.zero_output();
            layer.cross_attn.zero_output();
            layer.ffn_query.zero_output();
            layer.ffn_proto.zero_output();
        }
    }

    /// Write the checkpoint directory: one SINT file per tensor plus a
    /// manifest listing name, file, and shape, with a config header.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        manifest.push_str("[config]\n");
        manifest.push_str(&format!("channels {}\n", self.config.channels));
        manifest.push_str(&format!("instance_queries {}\n", self.config.instance_queries));
        manifest.push_str(&format!("layers {}\n", self.config.layers));
        manifest.push_str(&format!("heads {}\n", self.config.heads));
        manifest.push_str(&format!("expansion {}\n", self.config.expansion));
        manifest.push_str(&format!("patch {}\n", self.config.patch));
        manifest.push_str(&format!("encoder_seed {}\n", self.config.encoder_seed));
        manifest.push_str("[tensors]\n");
        let mut err = None;
        self.for_each_named(&mut |name, t| {
            if err.is_some() {
                return;
            }
            let file = format!("{name}.sint");
            let shape = t
                .dims()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            manifest.push_str(&format!("{name} {file} {shape}\n"));
            if let Err(e) = tensor::sint_save(&dir.join(&file), t) {
                err = Some(e);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<ModelParams> {
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut channels = None;
        let mut instance_queries = None;
        let mut layers = None;
        let mut heads = None;
        let mut expansion = None;
        let mut patch = None;
        let mut encoder_seed = None;
        let mut in_tensors = false;
        let mut listed: Vec<(String, String)> = Vec::new();
        for line in manifest.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "[config]" {
                in_tensors = false;
                continue;
            }
            if line == "[tensors]" {
                in_tensors = true;
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if in_tensors {
                if fields.len() != 3 {
                    return Err(Error::Config(format!("bad manifest tensor line: {line}")));
                }
                listed.push((fields[0].to_string(), fields[1].to_string()));
            } else {
                if fields.len() != 2 {
                    return Err(Error::Config(format!("bad manifest config line: {line}")));
                }
                let value: u64 = fields[1]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad manifest value: {line}")))?;
                match fields[0] {
                    "channels" => channels = Some(value as usize),
                    "instance_queries" => instance_queries = Some(value as usize),
                    "layers" => layers = Some(value as usize),
                    "heads" => heads = Some(value as usize),
                    "expansion" => expansion = Some(value as usize),
                    "patch" => patch = Some(value as usize),
                    "encoder_seed" => encoder_seed = Some(value),
                    other => {
                        return Err(Error::Config(format!("unknown manifest key: {other}")))
                    }
                }
            }
        }
        let config = ModelConfig {
            channels: channels.ok_or_else(|| Error::Config("manifest missing channels".into()))?,
            instance_queries: instance_queries
                .ok_or_else(|| Error::Config("manifest missing instance_queries".into()))?,
            layers: layers.ok_or_else(|| Error::Config("manifest missing layers".into()))?,
            heads: heads.ok_or_else(|| Error::Config("manifest missing heads".into()))?,
            expansion: expansion.ok_or_else(|| Error::Config("manifest missing expansion".into()))?,
            patch: patch.ok_or_else(|| Error::Config("manifest missing patch".into()))?,
            encoder_seed: encoder_seed
                .ok_or_else(|| Error::Config("manifest missing encoder_seed".into()))?,
        };
        let mut params = ModelParams::init(&config, 0)?;
        let mut names = Vec::new();
        params.for_each_named(&mut |name, _| names.push(name));
        if names.len() != listed.len() {
            return Err(Error::Config(format!(
                "manifest lists {} tensors, model expects {}",
                listed.len(),
                names.len()
            )));
        }
        let mut files = std::collections::BTreeMap::new();
        for (name, file) in &listed {
            files.insert(name.clone(), file.clone());
        }
        let mut idx = 0;
        let mut err = None;
        params.for_each_mut(&mut |t| {
            if err.is_some() {
                return;
            }
            let name = &names[idx];
            idx += 1;
            let Some(file) = files.get(name) else {
                err = Some(Error::Config(format!("manifest missing tensor {name}")));
                return;
            };
            match tensor::sint_load(&dir.join(file)) {
                Ok(loaded) => {
                    if loaded.dims() != t.dims() {
                        err = Some(Error::Config(format!(
                            "tensor {name} has shape {:?}, expected {:?}",
                            loaded.dims(),
                            t.dims()
                        )));
                    } else {
                        t.data_mut().copy_from_slice(loaded.data());
                    }
                }
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        Ok(params)
    }
}
