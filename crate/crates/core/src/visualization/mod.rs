//! Implicit attention of the question masks, made visible by
//! back-propagating the attention effect `L_att = ½‖V − F‖²` of one block
//! to the input pixels, with `F` held constant:
//!
//! ```text
//! ∂L_att/∂I = ∂V/∂I · (V − F)
//! ```

mod pnm;

pub use pnm::{upscale, write_pgm, write_ppm};

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::encoders::{GruMasks, QuestionBatch};
use crate::error::{Error, Result};
use crate::model::LearningBlock;
use crate::net::VqaNet;
use crate::params::Bound;
use crate::tensor::Tensor;

/// Brightness of pixels below the threshold in overlays.
pub const DIM_LEVEL: f64 = 0.35;

/// `½‖V − F‖²` for one block. With `constant_f` the residual `F` enters as a
/// constant, so gradients reach the inputs only through `V`.
pub fn attention_loss(
    tape: &mut Tape,
    p: &Bound,
    block: &LearningBlock,
    q_in: Var,
    v: Var,
    constant_f: bool,
) -> Result<Var> {
    if !block.spec.has_factorable_residual() {
        return Err(Error::UnsupportedVariant(format!(
            "block {} has no mask ⊙ visual factorisation",
            block.index + 1
        )));
    }
    let parts = block.residual_parts(tape, p, q_in, v)?;
    let f = if constant_f {
        tape.constant(tape.value(parts.residual).clone())
    } else {
        parts.residual
    };
    let diff = tape.sub(parts.visual, f)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 0.5))
}

/// `½‖V − F‖²` against a given residual `F` (for example one recorded at
/// another input).
pub fn attention_loss_against(
    tape: &mut Tape,
    p: &Bound,
    block: &LearningBlock,
    q_in: Var,
    v: Var,
    f: &Tensor,
) -> Result<Var> {
    let parts = block.residual_parts(tape, p, q_in, v)?;
    if tape.shape(parts.residual) != f.shape() {
        return Err(Error::dim("fixed residual", f.shape(), tape.shape(parts.residual)));
    }
    let f = tape.constant(f.clone());
    let diff = tape.sub(parts.visual, f)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 0.5))
}

/// The residual `F` of one block at the given inputs.
pub fn block_residual(tape: &mut Tape, p: &Bound, block: &LearningBlock, q_in: Var, v: Var) -> Result<Tensor> {
    let parts = block.residual_parts(tape, p, q_in, v)?;
    Ok(tape.value(parts.residual).clone())
}

/// [`attention_loss`] with `F` constant.
pub fn attention_effect_loss(tape: &mut Tape, p: &Bound, block: &LearningBlock, q_in: Var, v: Var) -> Result<Var> {
    attention_loss(tape, p, block, q_in, v, true)
}

fn check_block(net: &VqaNet, block: usize) -> Result<()> {
    let l = net.mrn.blocks.len();
    if block == 0 || block > l {
        return Err(Error::Index {
            what: "block (1-based)",
            index: block,
            bound: l + 1,
        });
    }
    Ok(())
}

fn check_image(net: &VqaNet, image: &Tensor) -> Result<()> {
    let c = &net.config.cnn;
    if image.shape() != [c.channels, c.height, c.width] {
        return Err(Error::dim("image", image.shape(), &[c.channels, c.height, c.width]));
    }
    Ok(())
}

/// `H_0 … H_L` for one example from a full forward pass without gradients.
pub fn hidden_states(net: &VqaNet, image: &Tensor, question: &[usize]) -> Result<Vec<Tensor>> {
    check_image(net, image)?;
    let mut tape = Tape::new();
    let p = net.store.bind_frozen(&mut tape);
    let img = tape.constant(
        image
            .clone()
            .reshaped(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
    );
    let v = net.encode_images(&mut tape, &p, img)?;
    let batch = QuestionBatch::from_sequences(&[question])?;
    let q = net.encode_question(&mut tape, &p, &batch, &GruMasks::None, false)?;
    let out = net.mrn.forward(&mut tape, &p, q, v)?;
    Ok(out.hidden.iter().map(|&h| tape.value(h).clone()).collect())
}

/// Value of one block's attention effect and its gradient with respect to
/// the image pixels, both with `q_in = H_{block−1}` fixed.
pub fn attention_value_and_gradient(
    net: &VqaNet,
    image: &Tensor,
    q_in: &Tensor,
    block: usize,
    constant_f: bool,
) -> Result<(f64, Tensor)> {
    check_block(net, block)?;
    check_image(net, image)?;
    let mut tape = Tape::new();
    let p = net.store.bind_frozen(&mut tape);
    let s = image.shape();
    let img = tape.leaf(image.clone().reshaped(&[1, s[0], s[1], s[2]])?);
    let v = net.encode_images(&mut tape, &p, img)?;
    let q = tape.constant(q_in.clone());
    let loss = attention_loss(&mut tape, &p, &net.mrn.blocks[block - 1], q, v, constant_f)?;
    let value = tape.value(loss).data()[0];
    let g = tape.backward(loss)?;
    Ok((value, g.tensor(img).reshaped(s)?))
}

/// Raw pixel gradient `[C, H, W]` of block `block`'s (1-based) attention
/// effect for one example.
pub fn attention_gradient(net: &VqaNet, image: &Tensor, question: &[usize], block: usize) -> Result<Tensor> {
    check_block(net, block)?;
    let hidden = hidden_states(net, image, question)?;
    Ok(attention_value_and_gradient(net, image, &hidden[block - 1], block, true)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionHeatmap {
    pub block: usize,
    #[serde(skip)]
    pub raw: Tensor,
    /// `Σ_c |raw[c]|`, shape `[H, W]`.
    #[serde(skip)]
    pub saliency: Tensor,
    /// `saliency > threshold`, row-major.
    #[serde(skip)]
    pub mask: Vec<bool>,
    /// Mean plus population standard deviation of the saliency.
    pub threshold: f64,
}

impl AttentionHeatmap {
    pub fn selected(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Saliency scaled to `[0, 1]` by its maximum.
    pub fn normalized_saliency(&self) -> Tensor {
        let m = self.saliency.data().iter().copied().fold(0.0, f64::max);
        if m > 0.0 {
            self.saliency.map(|x| x / m)
        } else {
            self.saliency.clone()
        }
    }

    /// `image` at full brightness where the mask is set, dimmed elsewhere.
    pub fn overlay(&self, image: &Tensor) -> Tensor {
        let plane = self.mask.len();
        let mut out = image.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            if !self.mask[i % plane] {
                *x *= DIM_LEVEL;
            }
        }
        out
    }
}

/// Saliency, threshold and mask of a raw `[C, H, W]` gradient.
pub fn render_heatmap(raw: &Tensor, block: usize) -> Result<AttentionHeatmap> {
    let s = raw.shape();
    if s.len() != 3 {
        return Err(Error::dim("render_heatmap", s, &[0, 0, 0]));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let mut sal = vec![0.0; plane];
    for ch in 0..c {
        for (acc, x) in sal.iter_mut().zip(&raw.data()[ch * plane..(ch + 1) * plane]) {
            *acc += x.abs();
        }
    }
    let n = plane as f64;
    let mean = sal.iter().sum::<f64>() / n;
    let var = sal.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let threshold = mean + var.sqrt();
    let mask = sal.iter().map(|&x| x > threshold).collect();
    Ok(AttentionHeatmap {
        block,
        raw: raw.clone(),
        saliency: Tensor::new(vec![h, w], sal)?,
        mask,
        threshold,
    })
}

/// Original image followed by the overlays, left to right, separated by
/// `gap` black columns.
pub fn composite(image: &Tensor, overlays: &[Tensor], gap: usize) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let panels: Vec<&Tensor> = std::iter::once(image).chain(overlays).collect();
    let cw = panels.len() * w + (panels.len() - 1) * gap;
    let mut out = Tensor::zeros(&[3, h, cw]);
    for (k, p) in panels.iter().enumerate() {
        let x0 = k * (w + gap);
        for c in 0..3 {
            for y in 0..h {
                let src = &p.data()[(c * h + y) * w..(c * h + y + 1) * w];
                out.data_mut()[(c * h + y) * cw + x0..(c * h + y) * cw + x0 + w].copy_from_slice(src);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockFiles {
    pub block: usize,
    pub threshold: f64,
    pub selected_pixels: usize,
    pub saliency: PathBuf,
    pub overlay: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub question: String,
    pub answer: String,
    pub composite: PathBuf,
    pub blocks: Vec<BlockFiles>,
}

#[derive(Clone, Debug)]
pub struct Visualization {
    pub heatmaps: Vec<AttentionHeatmap>,
    pub composite: Tensor,
    pub manifest: Manifest,
}

/// One heatmap per block for a single example, written under `out_dir` as
/// `{stem}_block{l}_saliency.pgm`, `{stem}_block{l}_overlay.ppm`,
/// `{stem}_composite.ppm` and `{stem}_manifest.json`. Images are enlarged
/// by `scale`.
#[allow(clippy::too_many_arguments)]
pub fn visualize_sequence(
    net: &VqaNet,
    image: &Tensor,
    question: &[usize],
    question_text: &str,
    answer: &str,
    out_dir: &Path,
    stem: &str,
    scale: usize,
) -> Result<Visualization> {
    let hidden = hidden_states(net, image, question)?;
    let mut heatmaps = Vec::with_capacity(net.mrn.blocks.len());
    for l in 1..=net.mrn.blocks.len() {
        let (_, raw) = attention_value_and_gradient(net, image, &hidden[l - 1], l, true)?;
        heatmaps.push(render_heatmap(&raw, l)?);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let scale = scale.max(1);
    let mut overlays = Vec::with_capacity(heatmaps.len());
    let mut blocks = Vec::with_capacity(heatmaps.len());
    for hm in &heatmaps {
        let sal = out_dir.join(format!("{stem}_block{}_saliency.pgm", hm.block));
        let ov = out_dir.join(format!("{stem}_block{}_overlay.ppm", hm.block));
        let overlay = hm.overlay(image);
        write_pgm(&sal, &upscale(&hm.normalized_saliency(), scale))?;
        write_ppm(&ov, &upscale(&overlay, scale))?;
        overlays.push(overlay);
        blocks.push(BlockFiles {
            block: hm.block,
            threshold: hm.threshold,
            selected_pixels: hm.selected(),
            saliency: sal,
            overlay: ov,
        });
    }
    let comp = composite(image, &overlays, 2);
    let comp_path = out_dir.join(format!("{stem}_composite.ppm"));
    write_ppm(&comp_path, &upscale(&comp, scale))?;
    let manifest = Manifest {
        question: question_text.to_string(),
        answer: answer.to_string(),
        composite: comp_path,
        blocks,
    };
    let mpath = out_dir.join(format!("{stem}_manifest.json"));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest json");
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(Visualization {
        heatmaps,
        composite: comp,
        manifest,
    })
}
