use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::ToyMllmConfig;
use super::exec::{Exec, FloatExec, LinearKind, Part, RowContext, SiteId};
use super::layers::{Activation, Attention, Block, Linear, Mlp, Norm, NormKind};
use crate::aifs::{build_aifs_plan, causal_mask, Modality, ModalityLayout, Rope};
use crate::error::{shape_err, Result};
use crate::numerics::{NormParams, Tensor};

/// Pre-LN vision transformer applied independently to each image segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionTower {
    pub embed: Linear,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageModel {
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    pub head: Linear,
}

/// Vision encoder, projector and causal language model over `d_model`-wide tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMllm {
    pub config: ToyMllmConfig,
    pub vision: VisionTower,
    pub projector: Linear,
    pub text_embed: Linear,
    pub llm: LanguageModel,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| std * self.normal())
    }

    fn vector(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| std * self.normal()).collect()
    }

    fn linear(&mut self, d_in: usize, d_out: usize, gain: f64, bias_std: f64) -> Linear {
        let w = self.matrix(d_in, d_out, gain / (d_in as f64).sqrt());
        let b = self.vector(d_out, bias_std);
        Linear { weight: w, bias: b }
    }

    fn norm(&mut self, kind: NormKind, d: usize, eps: f64) -> Norm {
        let alpha = (0..d).map(|_| 1.0 + 0.1 * self.normal()).collect();
        let beta = match kind {
            NormKind::LayerNorm => self.vector(d, 0.1),
            NormKind::RmsNorm => vec![0.0; d],
        };
        Norm {
            kind,
            params: NormParams { alpha, beta, eps },
        }
    }

    /// Noise plus a random-sign offset per output column.
    fn mean_biased_down(&mut self, d_in: usize, d_out: usize, bias: f64) -> Linear {
        let mut l = self.linear(d_in, d_out, 1.0, 0.02);
        let offsets: Vec<f64> = (0..d_out)
            .map(|_| if self.rng.random_bool(0.5) { bias } else { -bias })
            .collect();
        l.weight = l.weight.add_row_vector(&offsets).expect("offset length");
        l
    }

    /// Columns shifted to exactly zero mean.
    fn centred_down(&mut self, d_in: usize, d_out: usize) -> Linear {
        let mut l = self.linear(d_in, d_out, 1.0, 0.02);
        for j in 0..d_out {
            let mean = l.weight.column(j).iter().sum::<f64>() / d_in as f64;
            for i in 0..d_in {
                l.weight.set(i, j, l.weight.get(i, j) - mean);
            }
        }
        l
    }
}

impl ToyMllm {
    pub fn init(config: ToyMllmConfig) -> Result<Self> {
        config.validate()?;
        let (d, ff, eps) = (config.d_model, config.d_ff(), config.norm_eps);
        let mut g = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let rope = Rope::new(config.head_dim(), config.rope_theta)?;

        let embed = g.linear(d, d, 1.0, 0.1);
        let mut vision_blocks = Vec::with_capacity(config.vision_blocks);
        for _ in 0..config.vision_blocks {
            let norm1 = g.norm(NormKind::LayerNorm, d, eps);
            let attn = Attention::new(
                g.linear(d, 3 * d, 1.0, 0.02),
                g.linear(d, d, 0.5, 0.02),
                config.n_heads,
                None,
            )?;
            let norm2 = g.norm(NormKind::LayerNorm, d, eps);
            let mlp = Mlp {
                up: g.linear(d, ff, 1.0, 0.02),
                down: g.mean_biased_down(ff, d, config.vision_weight_mean_bias),
                activation: Activation::Gelu,
                online_hadamard: None,
            };
            vision_blocks.push(Block {
                norm1,
                attn,
                norm2,
                mlp,
            });
        }
        let vision_final = g.norm(NormKind::LayerNorm, d, eps);
        let projector = g.linear(d, d, 4.0, 0.0);
        let text_embed = g.linear(d, d, 1.0, 0.0);

        let mut llm_blocks = Vec::with_capacity(config.llm_blocks);
        for _ in 0..config.llm_blocks {
            let norm1 = g.norm(NormKind::RmsNorm, d, eps);
            let attn = Attention::new(
                g.linear(d, 3 * d, 1.0, 0.02),
                g.linear(d, d, 0.5, 0.02),
                config.n_heads,
                Some(rope),
            )?;
            let norm2 = g.norm(NormKind::RmsNorm, d, eps);
            let mlp = Mlp {
                up: g.linear(d, ff, 1.0, 0.02),
                down: g.centred_down(ff, d),
                activation: Activation::Silu,
                online_hadamard: None,
            };
            llm_blocks.push(Block {
                norm1,
                attn,
                norm2,
                mlp,
            });
        }
        let llm_final = g.norm(NormKind::RmsNorm, d, eps);
        let head = g.linear(d, d, 1.0, 0.0);

        Ok(Self {
            config,
            vision: VisionTower {
                embed,
                blocks: vision_blocks,
                final_norm: vision_final,
            },
            projector,
            text_embed,
            llm: LanguageModel {
                blocks: llm_blocks,
                final_norm: llm_final,
                head,
            },
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Every quantized linear layer in execution order.
    pub fn sites(&self) -> Vec<SiteId> {
        const KINDS: [LinearKind; 4] = [LinearKind::Qkv, LinearKind::Out, LinearKind::Up, LinearKind::Down];
        let mut out = Vec::new();
        for b in 0..self.vision.blocks.len() {
            out.extend(KINDS.iter().map(|&k| SiteId::vision(b, k)));
        }
        out.push(SiteId::projector());
        for b in 0..self.llm.blocks.len() {
            out.extend(KINDS.iter().map(|&k| SiteId::llm(b, k)));
        }
        out
    }

    pub fn linear(&self, site: SiteId) -> Option<&Linear> {
        let blocks = match site.part {
            Part::Projector => return Some(&self.projector),
            Part::Vision => &self.vision.blocks,
            Part::Llm => &self.llm.blocks,
        };
        let b = blocks.get(site.block)?;
        Some(match site.kind {
            LinearKind::Qkv => &b.attn.qkv,
            LinearKind::Out => &b.attn.out,
            LinearKind::Up => &b.mlp.up,
            LinearKind::Down => &b.mlp.down,
            LinearKind::Projector => return None,
        })
    }

    pub fn block(&self, part: Part, index: usize) -> Option<&Block> {
        match part {
            Part::Vision => self.vision.blocks.get(index),
            Part::Llm => self.llm.blocks.get(index),
            Part::Projector => None,
        }
    }

    /// Vision tower output for one image segment, before the projector.
    pub fn vision_tower(&self, patches: &Tensor, exec: &mut dyn Exec) -> Result<Tensor> {
        let n = patches.rows();
        let tags = vec![Modality::Visual; n];
        let rows = RowContext {
            modalities: &tags,
            plan: None,
        };
        let mask = Tensor::zeros(n, n);
        let positions: Vec<usize> = (0..n).collect();
        let mut x = self.vision.embed.forward(patches)?;
        for (i, b) in self.vision.blocks.iter().enumerate() {
            x = b.forward(Part::Vision, i, &x, &mask, &positions, rows, exec)?;
        }
        exec.observe_norm_input(Part::Vision, 2 * self.vision.blocks.len(), &x);
        self.vision.final_norm.forward(&x)
    }

    /// Vision tower followed by the projector: visual tokens in LLM space.
    pub fn encode_visual(&self, patches: &Tensor, exec: &mut dyn Exec) -> Result<Tensor> {
        let v = self.vision_tower(patches, exec)?;
        let tags = vec![Modality::Visual; v.rows()];
        let rows = RowContext {
            modalities: &tags,
            plan: None,
        };
        exec.linear(SiteId::projector(), &v, &self.projector, rows)
    }

    /// Language-model input in original token order.
    pub fn embed(&self, x: &Tensor, layout: &ModalityLayout, exec: &mut dyn Exec) -> Result<Tensor> {
        layout.check_rows(x)?;
        if x.cols() != self.d_model() {
            return shape_err(format!(
                "tokens have {} features, model width {}",
                x.cols(),
                self.d_model()
            ));
        }
        let mut parts = Vec::with_capacity(layout.segments().len());
        for seg in layout.segments() {
            let rows = x.slice_rows(seg.start, seg.end)?;
            parts.push(match seg.modality {
                Modality::Visual => self.encode_visual(&rows, exec)?,
                Modality::Text => self.text_embed.forward(&rows)?,
            });
        }
        Tensor::concat_rows(&parts)
    }

    /// Causal language model over embedded tokens; output rows keep the input order.
    ///
    /// With `aifs` the sequence runs visual-first under the permuted mask and
    /// remapped rotary positions, and is restored before returning.
    pub fn llm_forward(&self, h: &Tensor, layout: &ModalityLayout, aifs: bool, exec: &mut dyn Exec) -> Result<Tensor> {
        layout.check_rows(h)?;
        let n = h.rows();
        let plan = if aifs { Some(build_aifs_plan(layout)?) } else { None };
        let (mut x, mask, positions, tags) = match &plan {
            Some(p) => (p.reorder_rows(h)?, p.mask()?, p.position_ids.clone(), p.modalities()),
            None => (h.clone(), causal_mask(n), (0..n).collect(), layout.modalities()),
        };
        let rows = RowContext {
            modalities: &tags,
            plan: plan.as_ref(),
        };
        for (i, b) in self.llm.blocks.iter().enumerate() {
            x = b.forward(Part::Llm, i, &x, &mask, &positions, rows, exec)?;
        }
        exec.observe_norm_input(Part::Llm, 2 * self.llm.blocks.len(), &x);
        let y = self.llm.head.forward(&self.llm.final_norm.forward(&x)?)?;
        match &plan {
            Some(p) => p.restore_rows(&y),
            None => Ok(y),
        }
    }

    pub fn forward(&self, x: &Tensor, layout: &ModalityLayout, aifs: bool, exec: &mut dyn Exec) -> Result<Tensor> {
        let h = self.embed(x, layout, exec)?;
        self.llm_forward(&h, layout, aifs, exec)
    }

    /// Float forward in original order.
    pub fn forward_float(&self, x: &Tensor, layout: &ModalityLayout) -> Result<Tensor> {
        self.forward(x, layout, false, &mut FloatExec)
    }
}
