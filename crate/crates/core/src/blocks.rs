//! Head bodies: the plain conv stack, the four-branch Inception block and
//! the two-branch deformable Inception block.

use crate::deform::DeformConv2d;
use crate::error::{check_dim, Error, Result};
use crate::layers::{BatchNorm2d, Conv2d};
use crate::param::{join, HasParams, Layer, Param};
use crate::tensor::{
    avg_pool3x3_backward, avg_pool3x3_same, concat_channels, relu_backward, relu_forward,
    split_channels, ConvSpec, Tensor4,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Sub-operation order inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    #[default]
    ConvReluBn,
    ConvBnRelu,
}

impl std::str::FromStr for BlockOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv_relu_bn" => Ok(Self::ConvReluBn),
            "conv_bn_relu" => Ok(Self::ConvBnRelu),
            other => Err(Error::Config(format!("unknown block order `{other}`"))),
        }
    }
}

/// A convolution-like layer followed by ReLU and BatchNorm in the configured order.
#[derive(Debug, Clone)]
pub struct Block<L> {
    pub conv: L,
    pub bn: BatchNorm2d,
    pub order: BlockOrder,
    relu_input: Option<Tensor4>,
}

pub type ConvBlock = Block<Conv2d>;
pub type DeformConvBlock = Block<DeformConv2d>;

impl<L> Block<L> {
    pub fn from_parts(conv: L, channels: usize, order: BlockOrder) -> Self {
        Self {
            conv,
            bn: BatchNorm2d::new(channels),
            order,
            relu_input: None,
        }
    }
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, order: BlockOrder, rng: &mut R) -> Self {
        Self::from_parts(Conv2d::new(spec, rng), spec.out_channels, order)
    }

    pub fn in_channels(&self) -> usize {
        self.conv.spec.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv.spec.out_channels
    }
}

impl DeformConvBlock {
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, order: BlockOrder, rng: &mut R) -> Self {
        Self::from_parts(DeformConv2d::new(spec, rng), spec.out_channels, order)
    }

    /// The same block with the deformable layer replaced by a regular
    /// convolution carrying the same main kernel.
    pub fn to_regular(&self) -> ConvBlock {
        let mut conv = Conv2d::zeroed(self.conv.spec);
        conv.weight = self.conv.weight.clone();
        conv.bias = self.conv.bias.clone();
        ConvBlock {
            conv,
            bn: self.bn.clone(),
            order: self.order,
            relu_input: None,
        }
    }
}

impl<L: HasParams> HasParams for Block<L> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.bn.visit_params_mut(&join(prefix, "bn"), f);
    }
}

impl<L: Layer> Layer for Block<L> {
    fn forward(&mut self, input: &Tensor4) -> Result<Tensor4> {
        let y = self.conv.forward(input)?;
        match self.order {
            BlockOrder::ConvReluBn => {
                let r = relu_forward(&y);
                self.relu_input = Some(y);
                self.bn.forward(&r)
            }
            BlockOrder::ConvBnRelu => {
                let z = self.bn.forward(&y)?;
                let out = relu_forward(&z);
                self.relu_input = Some(z);
                Ok(out)
            }
        }
    }

    fn backward(&mut self, grad_output: &Tensor4) -> Result<Tensor4> {
        let relu_in = self
            .relu_input
            .as_ref()
            .ok_or_else(|| Error::contract("block backward before forward"))?;
        let g = match self.order {
            BlockOrder::ConvReluBn => {
                let g = self.bn.backward(grad_output)?;
                relu_backward(relu_in, &g)?
            }
            BlockOrder::ConvBnRelu => {
                let g = relu_backward(relu_in, grad_output)?;
                self.bn.backward(&g)?
            }
        };
        self.conv.backward(&g)
    }

    fn set_training(&mut self, training: bool) {
        self.conv.set_training(training);
        self.bn.set_training(training);
    }
}

fn visit_seq(blocks: &[ConvBlock], prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
    for (i, b) in blocks.iter().enumerate() {
        b.visit_params(&join(prefix, &i.to_string()), f);
    }
}

fn visit_seq_mut(blocks: &mut [ConvBlock], prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
    for (i, b) in blocks.iter_mut().enumerate() {
        b.visit_params_mut(&join(prefix, &i.to_string()), f);
    }
}

fn forward_seq(blocks: &mut [ConvBlock], input: &Tensor4) -> Result<Tensor4> {
    let mut x = input.clone();
    for b in blocks {
        x = b.forward(&x)?;
    }
    Ok(x)
}

fn backward_seq(blocks: &mut [ConvBlock], grad: &Tensor4) -> Result<Tensor4> {
    let mut g = grad.clone();
    for b in blocks.iter_mut().rev() {
        g = b.backward(&g)?;
    }
    Ok(g)
}

/// A sequential stack of ConvBlocks; the baseline head body.
#[derive(Debug, Clone, Default)]
pub struct PlainStack {
    pub blocks: Vec<ConvBlock>,
}

impl PlainStack {
    /// `depth` 3×3 blocks mapping `channels` to `channels`.
    pub fn new<R: Rng + ?Sized>(channels: usize, depth: usize, order: BlockOrder, rng: &mut R) -> Self {
        let blocks = (0..depth)
            .map(|_| ConvBlock::new(ConvSpec::new(channels, channels, 3), order, rng))
            .collect();
        Self { blocks }
    }
}

/// Runs `input` through `stack` in order; an empty stack is the identity.
pub fn plain_block_forward(input: &Tensor4, stack: &mut PlainStack) -> Result<Tensor4> {
    stack.forward(input)
}

impl HasParams for PlainStack {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        visit_seq(&self.blocks, prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_seq_mut(&mut self.blocks, prefix, f);
    }
}

impl Layer for PlainStack {
    fn forward(&mut self, input: &Tensor4) -> Result<Tensor4> {
        if let Some(first) = self.blocks.first() {
            check_dim("channels", first.in_channels(), input.channels())?;
        }
        forward_seq(&mut self.blocks, input)
    }

    fn backward(&mut self, grad_output: &Tensor4) -> Result<Tensor4> {
        backward_seq(&mut self.blocks, grad_output)
    }

    fn set_training(&mut self, training: bool) {
        for b in &mut self.blocks {
            b.set_training(training);
        }
    }
}

/// One parallel path of an [`InceptionBlock`]: an optional 3×3 average pool
/// followed by a chain of ConvBlocks.
#[derive(Debug, Clone)]
pub struct InceptionBranch {
    pub pool: bool,
    pub blocks: Vec<ConvBlock>,
}

impl InceptionBranch {
    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels())
    }

    /// Pooling and convolutions only, with BatchNorm and ReLU bypassed.
    pub fn linear_forward(&self, input: &Tensor4) -> Result<Tensor4> {
        let mut x = if self.pool {
            avg_pool3x3_same(input)
        } else {
            input.clone()
        };
        for b in &self.blocks {
            x = b.conv.apply(&x)?;
        }
        Ok(x)
    }
}

impl HasParams for InceptionBranch {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        visit_seq(&self.blocks, prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_seq_mut(&mut self.blocks, prefix, f);
    }
}

impl Layer for InceptionBranch {
    fn forward(&mut self, input: &Tensor4) -> Result<Tensor4> {
        if self.pool {
            forward_seq(&mut self.blocks, &avg_pool3x3_same(input))
        } else {
            forward_seq(&mut self.blocks, input)
        }
    }

    fn backward(&mut self, grad_output: &Tensor4) -> Result<Tensor4> {
        let g = backward_seq(&mut self.blocks, grad_output)?;
        if self.pool {
            avg_pool3x3_backward(&g)
        } else {
            Ok(g)
        }
    }

    fn set_training(&mut self, training: bool) {
        for b in &mut self.blocks {
            b.set_training(training);
        }
    }
}

const INCEPTION_BRANCH_NAMES: [&str; 4] = ["branch_a", "branch_b", "branch_c", "branch_d"];

/// Four parallel paths with 1×1, 3×3, 5×5 (two stacked 3×3) and pooled
/// receptive fields, concatenated and reduced back to the input width by a
/// 1×1 ConvBlock.
#[derive(Debug, Clone)]
pub struct InceptionBlock {
    pub branches: Vec<InceptionBranch>,
    pub reducer: ConvBlock,
    channels: usize,
}

impl InceptionBlock {
    pub fn default_width(channels: usize) -> usize {
        (channels / 4).max(1)
    }

    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        width: Option<usize>,
        order: BlockOrder,
        rng: &mut R,
    ) -> Self {
        let w = width.unwrap_or_else(|| Self::default_width(channels)).max(1);
        let mut block = |cin, k| ConvBlock::new(ConvSpec::new(cin, w, k), order, rng);
        let a = InceptionBranch {
            pool: false,
            blocks: vec![block(channels, 1)],
        };
        let b = InceptionBranch {
            pool: false,
            blocks: vec![block(channels, 1), block(w, 3)],
        };
        let c = InceptionBranch {
            pool: false,
            blocks: vec![block(channels, 1), block(w, 3), block(w, 3)],
        };
        let d = InceptionBranch {
            pool: true,
            blocks: vec![block(channels, 1)],
        };
        let reducer = ConvBlock::new(ConvSpec::new(4 * w, channels, 1), order, rng);
        Self {
            branches: vec![a, b, c, d],
            reducer,
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    /// Output of one branch alone (0 = A … 3 = D), before concatenation.
    pub fn branch_forward(&mut self, index: usize, input: &Tensor4) -> Result<Tensor4> {
        check_dim("channels", self.channels, input.channels())?;
        let branch = self
            .branches
            .get_mut(index)
            .ok_or_else(|| Error::contract(format!("no inception branch {index}")))?;
        branch.forward(input)
    }

    /// [`InceptionBranch::linear_forward`] of one branch.
    pub fn branch_linear(&self, index: usize, input: &Tensor4) -> Result<Tensor4> {
        check_dim("channels", self.channels, input.channels())?;
        self.branches
            .get(index)
            .ok_or_else(|| Error::contract(format!("no inception branch {index}")))?
            .linear_forward(input)
    }
}

impl HasParams for InceptionBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (b, name) in self.branches.iter().zip(INCEPTION_BRANCH_NAMES) {
            b.visit_params(&join(prefix, name), f);
        }
        self.reducer.visit_params(&join(prefix, "reducer"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (b, name) in self.branches.iter_mut().zip(INCEPTION_BRANCH_NAMES) {
            b.visit_params_mut(&join(prefix, name), f);
        }
        self.reducer.visit_params_mut(&join(prefix, "reducer"), f);
    }
}

impl Layer for InceptionBlock {
    fn forward(&mut self, input: &Tensor4) -> Result<Tensor4> {
        check_dim("channels", self.channels, input.channels())?;
        let outs = self
            .branches
            .iter_mut()
            .map(|b| b.forward(input))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor4> = outs.iter().collect();
        self.reducer.forward(&concat_channels(&refs)?)
    }

    fn backward(&mut self, grad_output: &Tensor4) -> Result<Tensor4> {
        let g = self.reducer.backward(grad_output)?;
        let widths: Vec<usize> = self.branches.iter().map(|b| b.out_channels()).collect();
        let parts = split_channels(&g, &widths)?;
        let mut grad_in: Option<Tensor4> = None;
        for (branch, part) in self.branches.iter_mut().zip(&parts) {
            let gi = branch.backward(part)?;
            match grad_in.as_mut() {
                Some(acc) => acc.add_assign(&gi)?,
                None => grad_in = Some(gi),
            }
        }
        grad_in.ok_or_else(|| Error::contract("inception block without branches"))
    }

    fn set_training(&mut self, training: bool) {
        for b in &mut self.branches {
            b.set_training(training);
        }
        self.reducer.set_training(training);
    }
}

/// The learnable-sampling path of a [`DeformInceptionBlock`].
///
/// `Regular` is the same path with its deformable layer swapped for a plain
/// convolution, used to compare against an all-regular body.
#[derive(Debug, Clone)]
pub enum SamplingBranch {
    Deformable(DeformConvBlock),
    Regular(ConvBlock),
}

impl SamplingBranch {
    pub fn out_channels(&self) -> usize {
        match self {
            Self::Deformable(b) => b.conv.spec.out_channels,
            Self::Regular(b) => b.out_channels(),
        }
    }
}

impl HasParams for SamplingBranch {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            Self::Deformable(b) => b.visit_params(prefix, f),
            Self::Regular(b) => b.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Self::Deformable(b) => b.visit_params_mut(prefix, f),
            Self::Regular(b) => b.visit_params_mut(prefix, f),
        }
    }
}

impl Layer for SamplingBranch {
    fn forward(&mut self, input: &Tensor4) -> Result<Tensor4> {
        match self {
            Self::Deformable(b) => b.forward(input),
            Self::Regular(b) => b.forward(input),
        }
    }

    fn backward(&mut self, grad_output: &Tensor4) -> Result<Tensor4> {
        match self {
            Self::Deformable(b) => b.backward(grad_output),
            Self::Regular(b) => b.backward(grad_output),
        }
    }

    fn set_training(&mut self, training: bool) {
        match self {
            Self::Deformable(b) => b.set_training(training),
            Self::Regular(b) => b.set_training(training),
        }
    }
}

/// A regular 3×3 ConvBlock beside a deformable 3×3 block, concatenated and
/// reduced by a 1×1 ConvBlock. Without the regular path this is the
/// "deformable only" body.
#[derive(Debug, Clone)]
pub struct DeformInceptionBlock {
    pub regular: Option<ConvBlock>,
    pub sampling: SamplingBranch,
    pub reducer: ConvBlock,
    channels: usize,
}

impl DeformInceptionBlock {
    pub fn default_width(channels: usize) -> usize {
        (channels / 2).max(1)
    }

    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        width: Option<usize>,
        order: BlockOrder,
        with_regular: bool,
        rng: &mut R,
    ) -> Self {
        let w = width.unwrap_or_else(|| Self::default_width(channels)).max(1);
        let regular =
            with_regular.then(|| ConvBlock::new(ConvSpec::new(channels, w, 3), order, rng));
        let sampling =
            SamplingBranch::Deformable(DeformConvBlock::new(ConvSpec::new(channels, w, 3), order, rng));
        let concat = w * (1 + usize::from(with_regular));
        let reducer = ConvBlock::new(ConvSpec::new(concat, channels, 1), order, rng);
        Self {
            regular,
            sampling,
            reducer,
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn branch_count(&self) -> usize {
        1 + usize::from(self.regular.is_some())
    }

    pub fn deform_layer_mut(&mut self) -> Option<&mut DeformConv2d> {
        match &mut self.sampling {
            SamplingBranch::Deformable(b) => Some(&mut b.conv),
            SamplingBranch::Regular(_) => None,
        }
    }

    /// Copy with the deformable layer replaced by a regular convolution of the same kernel.
    pub fn to_regular(&self) -> Self {
        let sampling = match &self.sampling {
            SamplingBranch::Deformable(b) => SamplingBranch::Regular(b.to_regular()),
            SamplingBranch::Regular(b) => SamplingBranch::Regular(b.clone()),
        };
        Self {
            regular: self.regular.clone(),
            sampling,
            reducer: self.reducer.clone(),
            channels: self.channels,
        }
    }
}

impl HasParams for DeformInceptionBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let Some(r) = &self.regular {
            r.visit_params(&join(prefix, "regular"), f);
        }
        self.sampling.visit_params(&join(prefix, "deform"), f);
        self.reducer.visit_params(&join(prefix, "reducer"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(r) = &mut self.regular {
            r.visit_params_mut(&join(prefix, "regular"), f);
        }
        self.sampling.visit_params_mut(&join(prefix, "deform"), f);
        self.reducer.visit_params_mut(&join(prefix, "reducer"), f);
    }
}

impl Layer for DeformInceptionBlock {
    fn forward(&mut self, input: &Tensor4) -> Result<Tensor4> {
        check_dim("channels", self.channels, input.channels())?;
        let d = self.sampling.forward(input)?;
        let cat = match &mut self.regular {
            Some(r) => {
                let rr = r.forward(input)?;
                concat_channels(&[&rr, &d])?
            }
            None => d,
        };
        self.reducer.forward(&cat)
    }

    fn backward(&mut self, grad_output: &Tensor4) -> Result<Tensor4> {
        let g = self.reducer.backward(grad_output)?;
        match &mut self.regular {
            Some(r) => {
                let parts = split_channels(&g, &[r.out_channels(), self.sampling.out_channels()])?;
                let mut gi = r.backward(&parts[0])?;
                gi.add_assign(&self.sampling.backward(&parts[1])?)?;
                Ok(gi)
            }
            None => self.sampling.backward(&g),
        }
    }

    fn set_training(&mut self, training: bool) {
        if let Some(r) = &mut self.regular {
            r.set_training(training);
        }
        self.sampling.set_training(training);
        self.reducer.set_training(training);
    }
}
