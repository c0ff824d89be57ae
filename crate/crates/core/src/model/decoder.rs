use candle_core::{Module, Tensor};

use super::nn::{upsample2, Act, Conv, ConvBnAct, Scope};
use crate::error::Result;

struct Block {
    a: ConvBnAct,
    b: ConvBnAct,
}

/// UNet decoder: five upsample-concat-conv blocks and a 3x3 logit head.
pub struct UnetDecoder {
    blocks: Vec<Block>,
    head: Conv,
}

impl UnetDecoder {
    pub fn new(s: &Scope, encoder: [usize; 5], widths: [usize; 5], classes: usize) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut cin = encoder[4];
        for (k, &w) in widths.iter().enumerate() {
            // block k pairs with encoder stage 3 - k; the last block has no skip
            let skip = if k < 4 { encoder[3 - k] } else { 0 };
            let b = s.pp(format!("block{k}"));
            blocks.push(Block {
                a: ConvBnAct::new(&b.pp("0"), cin + skip, w, 3, 1, Act::Relu)?,
                b: ConvBnAct::new(&b.pp("1"), w, w, 3, 1, Act::Relu)?,
            });
            cin = w;
        }
        let head = Conv::new(&s.pp("head"), cin, classes, 3, 1, true)?;
        Ok(Self { blocks, head })
    }

    /// Logits at input resolution.
    pub fn forward_t(&self, feats: &[Tensor; 5], train: bool) -> Result<Tensor> {
        let mut h = feats[4].clone();
        for (k, blk) in self.blocks.iter().enumerate() {
            h = upsample2(&h)?;
            if k < 4 {
                h = Tensor::cat(&[&h, &feats[3 - k]], 1)?;
            }
            h = blk.b.forward_t(&blk.a.forward_t(&h, train)?, train)?;
        }
        Ok(self.head.forward(&h)?)
    }
}
