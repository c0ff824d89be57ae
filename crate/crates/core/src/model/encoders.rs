//! Backbone encoders. Each returns five feature maps at strides 2, 4, 8, 16
//! and 32 of the input.

use candle_core::Tensor;

use super::nn::{avg_pool_2x2, max_pool_2x2, max_pool_3x3_s2, Act, Bn, Conv, ConvBnAct, Scope};
use crate::error::Result;

pub trait Encoder: Send + Sync {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<[Tensor; 5]>;
    fn channels(&self) -> [usize; 5];
}

fn collect5(v: Vec<Tensor>) -> [Tensor; 5] {
    v.try_into().unwrap_or_else(|v: Vec<Tensor>| panic!("encoder produced {} stages", v.len()))
}

/// Two conv-BN-ReLU per stage, the first strided.
pub struct Tiny {
    stages: Vec<[ConvBnAct; 2]>,
    widths: [usize; 5],
}

impl Tiny {
    pub fn new(s: &Scope, widths: [usize; 5]) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            let st = s.pp(format!("stage{i}"));
            stages.push([
                ConvBnAct::new(&st.pp("0"), cin, w, 3, 2, Act::Relu)?,
                ConvBnAct::new(&st.pp("1"), w, w, 3, 1, Act::Relu)?,
            ]);
            cin = w;
        }
        Ok(Self { stages, widths })
    }
}

impl Encoder for Tiny {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<[Tensor; 5]> {
        let mut out = Vec::with_capacity(5);
        let mut h = x.clone();
        for [a, b] in &self.stages {
            h = b.forward_t(&a.forward_t(&h, train)?, train)?;
            out.push(h.clone());
        }
        Ok(collect5(out))
    }

    fn channels(&self) -> [usize; 5] {
        self.widths
    }
}

/// VGG-19 convolutional body without batch norm; features are taken after each pool.
pub struct Vgg19 {
    blocks: Vec<Vec<ConvBnAct>>,
}

impl Vgg19 {
    pub const WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
    const DEPTHS: [usize; 5] = [2, 2, 4, 4, 4];

    pub fn new(s: &Scope) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut cin = 3;
        for (b, (&w, &d)) in Self::WIDTHS.iter().zip(&Self::DEPTHS).enumerate() {
            let mut layers = Vec::new();
            for i in 0..d {
                layers.push(ConvBnAct::plain(&s.pp(format!("block{b}.{i}")), cin, w, 3, 1, Act::Relu)?);
                cin = w;
            }
            blocks.push(layers);
        }
        Ok(Self { blocks })
    }
}

impl Encoder for Vgg19 {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<[Tensor; 5]> {
        let mut out = Vec::with_capacity(5);
        let mut h = x.clone();
        for block in &self.blocks {
            for l in block {
                h = l.forward_t(&h, train)?;
            }
            h = max_pool_2x2(&h)?;
            out.push(h.clone());
        }
        Ok(collect5(out))
    }

    fn channels(&self) -> [usize; 5] {
        Self::WIDTHS
    }
}

enum ResBlock {
    Basic { c1: ConvBnAct, c2: ConvBnAct, down: Option<ConvBnAct> },
    Bottleneck { c1: ConvBnAct, c2: ConvBnAct, c3: ConvBnAct, down: Option<ConvBnAct> },
}

impl ResBlock {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (y, down) = match self {
            ResBlock::Basic { c1, c2, down } => (c2.forward_t(&c1.forward_t(x, train)?, train)?, down),
            ResBlock::Bottleneck { c1, c2, c3, down } => {
                (c3.forward_t(&c2.forward_t(&c1.forward_t(x, train)?, train)?, train)?, down)
            }
        };
        let skip = match down {
            Some(d) => d.forward_t(x, train)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// ResNet-34 (basic blocks) or ResNet-50 (bottlenecks, stride on the 3x3).
pub struct ResNet {
    stem: ConvBnAct,
    layers: Vec<Vec<ResBlock>>,
    widths: [usize; 5],
}

impl ResNet {
    pub const WIDTHS_34: [usize; 5] = [64, 64, 128, 256, 512];
    pub const WIDTHS_50: [usize; 5] = [64, 256, 512, 1024, 2048];

    pub fn resnet34(s: &Scope) -> Result<Self> {
        Self::build(s, [3, 4, 6, 3], false)
    }

    pub fn resnet50(s: &Scope) -> Result<Self> {
        Self::build(s, [3, 4, 6, 3], true)
    }

    fn build(s: &Scope, depths: [usize; 4], bottleneck: bool) -> Result<Self> {
        let stem = ConvBnAct::new(&s.pp("stem"), 3, 64, 7, 2, Act::Relu)?;
        let expansion = if bottleneck { 4 } else { 1 };
        let mut cin = 64;
        let mut layers = Vec::new();
        for (li, &depth) in depths.iter().enumerate() {
            let planes = 64 << li;
            let cout = planes * expansion;
            let mut blocks = Vec::new();
            for bi in 0..depth {
                let b = s.pp(format!("layer{}.{bi}", li + 1));
                let stride = if bi == 0 && li > 0 { 2 } else { 1 };
                let down = if stride != 1 || cin != cout {
                    Some(ConvBnAct::new(&b.pp("down"), cin, cout, 1, stride, Act::Identity)?)
                } else {
                    None
                };
                blocks.push(if bottleneck {
                    ResBlock::Bottleneck {
                        c1: ConvBnAct::new(&b.pp("c1"), cin, planes, 1, 1, Act::Relu)?,
                        c2: ConvBnAct::new(&b.pp("c2"), planes, planes, 3, stride, Act::Relu)?,
                        c3: ConvBnAct::new(&b.pp("c3"), planes, cout, 1, 1, Act::Identity)?,
                        down,
                    }
                } else {
                    ResBlock::Basic {
                        c1: ConvBnAct::new(&b.pp("c1"), cin, planes, 3, stride, Act::Relu)?,
                        c2: ConvBnAct::new(&b.pp("c2"), planes, cout, 3, 1, Act::Identity)?,
                        down,
                    }
                });
                cin = cout;
            }
            layers.push(blocks);
        }
        let widths = if bottleneck { Self::WIDTHS_50 } else { Self::WIDTHS_34 };
        Ok(Self { stem, layers, widths })
    }
}

impl Encoder for ResNet {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<[Tensor; 5]> {
        let f1 = self.stem.forward_t(x, train)?;
        let mut h = max_pool_3x3_s2(&f1)?;
        let mut out = vec![f1];
        for layer in &self.layers {
            for b in layer {
                h = b.forward_t(&h, train)?;
            }
            out.push(h.clone());
        }
        Ok(collect5(out))
    }

    fn channels(&self) -> [usize; 5] {
        self.widths
    }
}

/// BN-ReLU-conv, the pre-activation unit used throughout DenseNet.
struct BnReluConv {
    bn: Bn,
    conv: Conv,
}

impl BnReluConv {
    fn new(s: &Scope, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Ok(Self { bn: Bn::new(&s.pp("bn"), cin)?, conv: Conv::new(&s.pp("conv"), cin, cout, k, 1, false)? })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        use candle_core::Module;
        Ok(self.conv.forward(&self.bn.forward_t(x, train)?.relu()?)?)
    }
}

/// DenseNet-121: growth 32, blocks of 6/12/24/16 layers, compression 0.5.
pub struct DenseNet121 {
    stem: ConvBnAct,
    blocks: Vec<Vec<[BnReluConv; 2]>>,
    transitions: Vec<BnReluConv>,
    final_bn: Bn,
}

impl DenseNet121 {
    pub const WIDTHS: [usize; 5] = [64, 256, 512, 1024, 1024];
    const GROWTH: usize = 32;
    const LAYERS: [usize; 4] = [6, 12, 24, 16];

    pub fn new(s: &Scope) -> Result<Self> {
        let stem = ConvBnAct::new(&s.pp("stem"), 3, 64, 7, 2, Act::Relu)?;
        let mut c = 64;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (bi, &n) in Self::LAYERS.iter().enumerate() {
            let mut layers = Vec::new();
            for li in 0..n {
                let l = s.pp(format!("block{bi}.{li}"));
                layers.push([
                    BnReluConv::new(&l.pp("a"), c, 4 * Self::GROWTH, 1)?,
                    BnReluConv::new(&l.pp("b"), 4 * Self::GROWTH, Self::GROWTH, 3)?,
                ]);
                c += Self::GROWTH;
            }
            blocks.push(layers);
            if bi < 3 {
                transitions.push(BnReluConv::new(&s.pp(format!("transition{bi}")), c, c / 2, 1)?);
                c /= 2;
            }
        }
        let final_bn = Bn::new(&s.pp("final_bn"), c)?;
        Ok(Self { stem, blocks, transitions, final_bn })
    }
}

impl Encoder for DenseNet121 {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<[Tensor; 5]> {
        let f1 = self.stem.forward_t(x, train)?;
        let mut h = max_pool_3x3_s2(&f1)?;
        let mut out = vec![f1];
        for (bi, block) in self.blocks.iter().enumerate() {
            for [a, b] in block {
                let new = b.forward_t(&a.forward_t(&h, train)?, train)?;
                h = Tensor::cat(&[&h, &new], 1)?;
            }
            if bi < 3 {
                out.push(h.clone());
                h = avg_pool_2x2(&self.transitions[bi].forward_t(&h, train)?)?;
            } else {
                out.push(self.final_bn.forward_t(&h, train)?.relu()?);
            }
        }
        Ok(collect5(out))
    }

    fn channels(&self) -> [usize; 5] {
        Self::WIDTHS
    }
}

/// Squeeze-and-excitation gate.
struct SqueezeExcite {
    reduce: Conv,
    expand: Conv,
}

impl SqueezeExcite {
    fn new(s: &Scope, c: usize, squeezed: usize) -> Result<Self> {
        Ok(Self {
            reduce: Conv::new(&s.pp("reduce"), c, squeezed, 1, 1, true)?,
            expand: Conv::new(&s.pp("expand"), squeezed, c, 1, 1, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        use candle_core::Module;
        let pooled = x.mean_keepdim(2)?.mean_keepdim(3)?;
        let g = self.expand.forward(&self.reduce.forward(&pooled)?.silu()?)?;
        Ok(x.broadcast_mul(&candle_nn::ops::sigmoid(&g)?)?)
    }
}

/// Inverted residual: optional 1x1 expansion, depthwise kxk, optional SE, 1x1 projection.
struct InvertedResidual {
    expand: Option<ConvBnAct>,
    depthwise: ConvBnAct,
    se: Option<SqueezeExcite>,
    project: ConvBnAct,
    residual: bool,
}

struct IrSpec {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    expand_ratio: usize,
    se_ratio: Option<f64>,
    act: Act,
}

impl InvertedResidual {
    fn new(s: &Scope, p: IrSpec) -> Result<Self> {
        let mid = p.cin * p.expand_ratio;
        let expand = if p.expand_ratio != 1 {
            Some(ConvBnAct::new(&s.pp("expand"), p.cin, mid, 1, 1, p.act)?)
        } else {
            None
        };
        let depthwise = ConvBnAct::grouped(&s.pp("dw"), mid, mid, p.k, p.stride, mid, p.act)?;
        let se = match p.se_ratio {
            Some(r) => Some(SqueezeExcite::new(&s.pp("se"), mid, ((p.cin as f64 * r) as usize).max(1))?),
            None => None,
        };
        let project = ConvBnAct::new(&s.pp("project"), mid, p.cout, 1, 1, Act::Identity)?;
        Ok(Self { expand, depthwise, se, project, residual: p.stride == 1 && p.cin == p.cout })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = match &self.expand {
            Some(e) => e.forward_t(x, train)?,
            None => x.clone(),
        };
        h = self.depthwise.forward_t(&h, train)?;
        if let Some(se) = &self.se {
            h = se.forward(&h)?;
        }
        h = self.project.forward_t(&h, train)?;
        Ok(if self.residual { (h + x)? } else { h })
    }
}

/// Stem, groups of inverted residuals and a 1x1 head; features are read after
/// the groups listed in `taps` (the last feature is the head output).
pub struct MobileStyle {
    stem: ConvBnAct,
    blocks: Vec<InvertedResidual>,
    head: ConvBnAct,
    taps: [usize; 4],
    widths: [usize; 5],
}

impl Encoder for MobileStyle {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<[Tensor; 5]> {
        let mut h = self.stem.forward_t(x, train)?;
        let mut out = Vec::with_capacity(5);
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward_t(&h, train)?;
            if self.taps.contains(&i) {
                out.push(h.clone());
            }
        }
        out.push(self.head.forward_t(&h, train)?);
        Ok(collect5(out))
    }

    fn channels(&self) -> [usize; 5] {
        self.widths
    }
}

/// `(expand_ratio, kernel, stride, out_channels, repeats)` per group.
type GroupSpec = (usize, usize, usize, usize, usize);

struct MobileParams<'a> {
    stem: usize,
    groups: &'a [GroupSpec],
    head: usize,
    se_ratio: Option<f64>,
    act: Act,
    /// Groups whose last block yields features at strides 2, 4, 8, 16.
    tap_groups: [usize; 4],
}

fn mobile_style(s: &Scope, p: MobileParams) -> Result<MobileStyle> {
    let stem = ConvBnAct::new(&s.pp("stem"), 3, p.stem, 3, 2, p.act)?;
    let mut blocks = Vec::new();
    let mut taps = [0; 4];
    let mut widths = [0; 5];
    let mut cin = p.stem;
    for (gi, &(t, k, stride, cout, n)) in p.groups.iter().enumerate() {
        for bi in 0..n {
            blocks.push(InvertedResidual::new(
                &s.pp(format!("group{gi}.{bi}")),
                IrSpec {
                    cin,
                    cout,
                    k,
                    stride: if bi == 0 { stride } else { 1 },
                    expand_ratio: t,
                    se_ratio: p.se_ratio,
                    act: p.act,
                },
            )?);
            cin = cout;
        }
        if let Some(slot) = p.tap_groups.iter().position(|&g| g == gi) {
            taps[slot] = blocks.len() - 1;
            widths[slot] = cout;
        }
    }
    let head = ConvBnAct::new(&s.pp("head"), cin, p.head, 1, 1, p.act)?;
    widths[4] = p.head;
    Ok(MobileStyle { stem, blocks, head, taps, widths })
}

pub const MOBILENET_WIDTHS: [usize; 5] = [16, 24, 32, 96, 1280];
pub const EFFICIENTNET_B5_WIDTHS: [usize; 5] = [24, 40, 64, 176, 2048];

/// MobileNetV2, width multiplier 1.
pub fn mobilenet_v2(s: &Scope) -> Result<MobileStyle> {
    mobile_style(
        s,
        MobileParams {
            stem: 32,
            groups: &[
                (1, 3, 1, 16, 1),
                (6, 3, 2, 24, 2),
                (6, 3, 2, 32, 3),
                (6, 3, 2, 64, 4),
                (6, 3, 1, 96, 3),
                (6, 3, 2, 160, 3),
                (6, 3, 1, 320, 1),
            ],
            head: 1280,
            se_ratio: None,
            act: Act::Relu6,
            tap_groups: [0, 1, 2, 4],
        },
    )
}

/// EfficientNet-B5: the B0 layout scaled by width 1.6 and depth 2.2.
pub fn efficientnet_b5(s: &Scope) -> Result<MobileStyle> {
    mobile_style(
        s,
        MobileParams {
            stem: 48,
            groups: &[
                (1, 3, 1, 24, 3),
                (6, 3, 2, 40, 5),
                (6, 5, 2, 64, 5),
                (6, 3, 2, 128, 7),
                (6, 5, 1, 176, 7),
                (6, 5, 2, 304, 9),
                (6, 3, 1, 512, 3),
            ],
            head: 2048,
            se_ratio: Some(0.25),
            act: Act::Silu,
            tap_groups: [0, 1, 2, 4],
        },
    )
}
