//! The box regression head: encoder tokens → block body → center, size and
//! offset score maps → decoded box.

use crate::bbox::BBox;
use crate::blocks::{BlockOrder, ConvBlock, DeformInceptionBlock, InceptionBlock};
use crate::error::{check_dim, Error, Result};
use crate::layers::Conv2d;
use crate::param::{join, HasParams, Layer, Param};
use crate::tensor::{sigmoid_backward, sigmoid_forward, ConvSpec, Shape4, Tensor4};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which body sits in front of the score branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// 3×3 ConvBlock stack, the baseline head.
    Plain,
    /// Four-branch Inception block.
    Inception,
    /// Regular 3×3 branch beside a deformable 3×3 branch.
    DeformInception,
    /// Deformable branch alone.
    DeformOnly,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 4] = [
        HeadVariant::Plain,
        HeadVariant::Inception,
        HeadVariant::DeformOnly,
        HeadVariant::DeformInception,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::Inception => "inception",
            Self::DeformInception => "deform_inception",
            Self::DeformOnly => "deform_only",
        }
    }
}

impl std::fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for HeadVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown head variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    pub order: BlockOrder,
    /// Embedding dim D of the incoming features.
    pub embed_dim: usize,
    pub map_h: usize,
    pub map_w: usize,
    /// Branch width of the Inception body; `None` means `D / 4`.
    pub inception_width: Option<usize>,
    /// Branch width of the deformable bodies; `None` means `D / 2`.
    pub deform_width: Option<usize>,
    /// Hidden width of each score branch; `None` means `D / 2`.
    pub score_width: Option<usize>,
    /// Number of stacked body blocks.
    pub depth: usize,
}

impl HeadConfig {
    pub fn new(variant: HeadVariant, embed_dim: usize, map_h: usize, map_w: usize) -> Self {
        Self {
            variant,
            order: BlockOrder::default(),
            embed_dim,
            map_h,
            map_w,
            inception_width: None,
            deform_width: None,
            score_width: None,
            depth: 1,
        }
    }

    pub fn score_width(&self) -> usize {
        self.score_width.unwrap_or(self.embed_dim / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.map_h == 0 || self.map_w == 0 {
            return Err(Error::contract("head dims must be positive"));
        }
        Ok(())
    }
}

/// Tokens in `(B, N, D)` row-major layout, as produced by a transformer encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    pub batch: usize,
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl TokenTensor {
    pub fn new(batch: usize, tokens: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * tokens * dim {
            return Err(Error::contract(format!(
                "token tensor ({batch}, {tokens}, {dim}) needs {} values, got {}",
                batch * tokens * dim,
                data.len()
            )));
        }
        Ok(Self {
            batch,
            tokens,
            dim,
            data,
        })
    }
}

/// `(B, H·W, D)` → `(B, D, H, W)`; token `t` lands at `(t / W, t % W)`.
pub fn reshape_embedding(tokens: &TokenTensor, h: usize, w: usize) -> Result<Tensor4> {
    check_dim("tokens", h * w, tokens.tokens)?;
    let (n, d) = (tokens.tokens, tokens.dim);
    let mut out = Tensor4::zeros(Shape4::new(tokens.batch, d, h, w));
    for b in 0..tokens.batch {
        for t in 0..n {
            for c in 0..d {
                out.set(b, c, t / w, t % w, tokens.data[(b * n + t) * d + c]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`reshape_embedding`].
pub fn unreshape_embedding(features: &Tensor4) -> TokenTensor {
    let s = features.shape();
    let n = s.plane();
    let mut data = vec![0.0; s.len()];
    for b in 0..s.batch {
        for c in 0..s.channels {
            for (t, &v) in features.plane(b, c).iter().enumerate() {
                data[(b * n + t) * s.channels + c] = v;
            }
        }
    }
    TokenTensor {
        batch: s.batch,
        tokens: n,
        dim: s.channels,
        data,
    }
}

/// The head output triple. All maps share (B, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMaps {
    /// (B, 1, H, W) target-center probability.
    pub center: Tensor4,
    /// (B, 2, H, W) box (w, h) normalized to the search region.
    pub size: Tensor4,
    /// (B, 2, H, W) sub-cell (dx, dy) of the center.
    pub offset: Tensor4,
}

impl ScoreMaps {
    pub fn validate(&self) -> Result<()> {
        let c = self.center.shape();
        check_dim("center channels", 1, c.channels)?;
        check_dim("size channels", 2, self.size.channels())?;
        check_dim("offset channels", 2, self.offset.channels())?;
        for s in [self.size.shape(), self.offset.shape()] {
            check_dim("batch", c.batch, s.batch)?;
            check_dim("height", c.height, s.height)?;
            check_dim("width", c.width, s.width)?;
        }
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.center.batch()
    }

    /// Box read at cell `(y, x)` of batch entry `b`.
    pub fn box_at(&self, b: usize, y: usize, x: usize) -> BBox {
        let (h, w) = (self.center.height() as f64, self.center.width() as f64);
        BBox {
            cx: (x as f64 + self.offset.at(b, 0, y, x)) / w,
            cy: (y as f64 + self.offset.at(b, 1, y, x)) / h,
            w: self.size.at(b, 0, y, x),
            h: self.size.at(b, 1, y, x),
        }
    }

    /// Row-major first maximum of the center map.
    pub fn peak(&self, b: usize) -> (usize, usize) {
        let plane = self.center.plane(b, 0);
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        let w = self.center.width();
        (best / w, best % w)
    }
}

/// Argmax of the center map, then offset and size read at that cell.
pub fn decode_box(maps: &ScoreMaps, batch_index: usize) -> BBox {
    let (y, x) = maps.peak(batch_index);
    maps.box_at(batch_index, y, x)
}

/// Cell, sub-cell offset and size that [`decode_box`] maps back to `bbox`.
pub fn encode_box(bbox: &BBox, h: usize, w: usize) -> ((usize, usize), [f64; 2], [f64; 2]) {
    let fx = bbox.cx * w as f64;
    let fy = bbox.cy * h as f64;
    let x = (fx.floor() as usize).min(w - 1);
    let y = (fy.floor() as usize).min(h - 1);
    ((y, x), [fx - x as f64, fy - y as f64], [bbox.w, bbox.h])
}

/// One score branch: 3×3 ConvBlock, 1×1 projection, sigmoid.
#[derive(Debug, Clone)]
pub struct ScoreBranch {
    pub block: ConvBlock,
    pub proj: Conv2d,
    output: Option<Tensor4>,
}

impl ScoreBranch {
    fn new<R: Rng + ?Sized>(dim: usize, width: usize, out: usize, order: BlockOrder, rng: &mut R) -> Self {
        Self {
            block: ConvBlock::new(ConvSpec::new(dim, width, 3), order, rng),
            proj: Conv2d::new(ConvSpec::new(width, out, 1), rng),
            output: None,
        }
    }
}

impl HasParams for ScoreBranch {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.block.visit_params(&join(prefix, "block"), f);
        self.proj.visit_params(&join(prefix, "proj"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.block.visit_params_mut(&join(prefix, "block"), f);
        self.proj.visit_params_mut(&join(prefix, "proj"), f);
    }
}

impl Layer for ScoreBranch {
    fn forward(&mut self, input: &Tensor4) -> Result<Tensor4> {
        let h = self.block.forward(input)?;
        let out = sigmoid_forward(&self.proj.forward(&h)?);
        self.output = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor4) -> Result<Tensor4> {
        let out = self
            .output
            .as_ref()
            .ok_or_else(|| Error::contract("score branch backward before forward"))?;
        let g = sigmoid_backward(out, grad_output)?;
        let g = self.proj.backward(&g)?;
        self.block.backward(&g)
    }

    fn set_training(&mut self, training: bool) {
        self.block.set_training(training);
    }
}

/// One block of the head body.
#[derive(Debug, Clone)]
pub enum BodyBlock {
    Plain(ConvBlock),
    Inception(InceptionBlock),
    Deform(DeformInceptionBlock),
}

impl HasParams for BodyBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            Self::Plain(b) => b.visit_params(prefix, f),
            Self::Inception(b) => b.visit_params(prefix, f),
            Self::Deform(b) => b.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Self::Plain(b) => b.visit_params_mut(prefix, f),
            Self::Inception(b) => b.visit_params_mut(prefix, f),
            Self::Deform(b) => b.visit_params_mut(prefix, f),
        }
    }
}

impl Layer for BodyBlock {
    fn forward(&mut self, input: &Tensor4) -> Result<Tensor4> {
        match self {
            Self::Plain(b) => b.forward(input),
            Self::Inception(b) => b.forward(input),
            Self::Deform(b) => b.forward(input),
        }
    }

    fn backward(&mut self, grad_output: &Tensor4) -> Result<Tensor4> {
        match self {
            Self::Plain(b) => b.backward(grad_output),
            Self::Inception(b) => b.backward(grad_output),
            Self::Deform(b) => b.backward(grad_output),
        }
    }

    fn set_training(&mut self, training: bool) {
        match self {
            Self::Plain(b) => b.set_training(training),
            Self::Inception(b) => b.set_training(training),
            Self::Deform(b) => b.set_training(training),
        }
    }
}

/// Gradients of a scalar loss with respect to each score map.
#[derive(Debug, Clone)]
pub struct ScoreMapGrads {
    pub center: Tensor4,
    pub size: Tensor4,
    pub offset: Tensor4,
}

impl ScoreMapGrads {
    pub fn zeros_like(maps: &ScoreMaps) -> Self {
        Self {
            center: Tensor4::zeros(maps.center.shape()),
            size: Tensor4::zeros(maps.size.shape()),
            offset: Tensor4::zeros(maps.offset.shape()),
        }
    }
}

/// Body plus three independent score branches.
#[derive(Debug, Clone)]
pub struct Head {
    pub config: HeadConfig,
    pub body: Vec<BodyBlock>,
    pub center: ScoreBranch,
    pub size: ScoreBranch,
    pub offset: ScoreBranch,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(config: HeadConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let order = config.order;
        let body = (0..config.depth)
            .map(|_| match config.variant {
                HeadVariant::Plain => {
                    BodyBlock::Plain(ConvBlock::new(ConvSpec::new(d, d, 3), order, rng))
                }
                HeadVariant::Inception => {
                    BodyBlock::Inception(InceptionBlock::new(d, config.inception_width, order, rng))
                }
                HeadVariant::DeformInception => BodyBlock::Deform(DeformInceptionBlock::new(
                    d,
                    config.deform_width,
                    order,
                    true,
                    rng,
                )),
                HeadVariant::DeformOnly => BodyBlock::Deform(DeformInceptionBlock::new(
                    d,
                    config.deform_width,
                    order,
                    false,
                    rng,
                )),
            })
            .collect();
        let sw = config.score_width();
        let center = ScoreBranch::new(d, sw, 1, order, rng);
        let size = ScoreBranch::new(d, sw, 2, order, rng);
        let offset = ScoreBranch::new(d, sw, 2, order, rng);
        Ok(Self {
            config,
            body,
            center,
            size,
            offset,
        })
    }

    fn check_features(&self, features: &Tensor4) -> Result<()> {
        check_dim("channels", self.config.embed_dim, features.channels())?;
        check_dim("height", self.config.map_h, features.height())?;
        check_dim("width", self.config.map_w, features.width())
    }

    pub fn forward(&mut self, features: &Tensor4) -> Result<ScoreMaps> {
        self.check_features(features)?;
        let mut x = features.clone();
        for b in &mut self.body {
            x = b.forward(&x)?;
        }
        let maps = ScoreMaps {
            center: self.center.forward(&x)?,
            size: self.size.forward(&x)?,
            offset: self.offset.forward(&x)?,
        };
        Ok(maps)
    }

    /// Backpropagates map gradients; returns the gradient on the features.
    pub fn backward(&mut self, grads: &ScoreMapGrads) -> Result<Tensor4> {
        let mut g = self.center.backward(&grads.center)?;
        g.add_assign(&self.size.backward(&grads.size)?)?;
        g.add_assign(&self.offset.backward(&grads.offset)?)?;
        for b in self.body.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        Ok(g)
    }

    pub fn set_training(&mut self, training: bool) {
        for b in &mut self.body {
            b.set_training(training);
        }
        self.center.set_training(training);
        self.size.set_training(training);
        self.offset.set_training(training);
    }

    /// Every deformable layer samples on the regular grid with mask 1.
    pub fn freeze_identity_sampling(&mut self) {
        for b in &mut self.body {
            if let BodyBlock::Deform(d) = b {
                if let Some(layer) = d.deform_layer_mut() {
                    layer.freeze_identity_sampling();
                }
            }
        }
    }

    /// Copy with every deformable layer replaced by a regular convolution of the same kernel.
    pub fn to_all_regular(&self) -> Head {
        let mut out = self.clone();
        for b in &mut out.body {
            if let BodyBlock::Deform(d) = b {
                *d = d.to_regular();
            }
        }
        out
    }
}

impl HasParams for Head {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, b) in self.body.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("body.{i}")), f);
        }
        self.center.visit_params(&join(prefix, "center"), f);
        self.size.visit_params(&join(prefix, "size"), f);
        self.offset.visit_params(&join(prefix, "offset"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.body.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("body.{i}")), f);
        }
        self.center.visit_params_mut(&join(prefix, "center"), f);
        self.size.visit_params_mut(&join(prefix, "size"), f);
        self.offset.visit_params_mut(&join(prefix, "offset"), f);
    }
}

/// Head forward as a free function over a borrowed head.
pub fn head_forward(features: &Tensor4, head: &mut Head) -> Result<ScoreMaps> {
    head.forward(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn maps_with(h: usize, w: usize) -> ScoreMaps {
        ScoreMaps {
            center: Tensor4::zeros(Shape4::new(1, 1, h, w)),
            size: Tensor4::zeros(Shape4::new(1, 2, h, w)),
            offset: Tensor4::zeros(Shape4::new(1, 2, h, w)),
        }
    }

    #[test]
    fn reshape_places_tokens_row_major() {
        let data: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let tokens = TokenTensor::new(1, 4, 2, data).unwrap();
        let f = reshape_embedding(&tokens, 2, 2).unwrap();
        assert_eq!(f.shape(), Shape4::new(1, 2, 2, 2));
        assert_eq!(f.at(0, 0, 1, 1), 6.0);
        assert_eq!(f.at(0, 1, 1, 1), 7.0);
        assert!(reshape_embedding(&tokens, 3, 2).is_err());
    }

    proptest! {
        #[test]
        fn reshape_round_trip_preserves_values(b in 1usize..3, h in 1usize..4, w in 1usize..4, d in 1usize..4, seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..b * h * w * d).map(|_| r.gen_range(-1.0..1.0)).collect();
            let tokens = TokenTensor::new(b, h * w, d, data).unwrap();
            let f = reshape_embedding(&tokens, h, w).unwrap();
            prop_assert!((f.sum() - tokens.data.iter().sum::<f64>()).abs() < 1e-12);
            prop_assert_eq!(unreshape_embedding(&f), tokens);
        }

        #[test]
        fn encode_decode_round_trip(y in 0usize..8, x in 0usize..8, ox in 0.0f64..1.0, oy in 0.0f64..1.0,
                                    bw in 0.05f64..1.0, bh in 0.05f64..1.0) {
            let bbox = BBox { cx: (x as f64 + ox) / 8.0, cy: (y as f64 + oy) / 8.0, w: bw, h: bh };
            let ((ey, ex), off, size) = encode_box(&bbox, 8, 8);
            let mut m = maps_with(8, 8);
            m.center.set(0, 0, ey, ex, 1.0);
            m.offset.set(0, 0, ey, ex, off[0]);
            m.offset.set(0, 1, ey, ex, off[1]);
            m.size.set(0, 0, ey, ex, size[0]);
            m.size.set(0, 1, ey, ex, size[1]);
            let d = decode_box(&m, 0);
            prop_assert!((d.cx - bbox.cx).abs() < 1e-12 && (d.cy - bbox.cy).abs() < 1e-12);
            prop_assert_eq!((d.w, d.h), (bw, bh));
        }

        #[test]
        fn peak_invariant_under_positive_logit_scaling(seed in any::<u64>(), scale in 0.1f64..10.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor4::random_uniform(Shape4::new(1, 1, 6, 6), -3.0, 3.0, &mut r);
            let mut a = maps_with(6, 6);
            a.center = logits.map(sigmoid);
            let mut b = maps_with(6, 6);
            b.center = logits.map(|v| sigmoid(v * scale));
            prop_assert_eq!(a.peak(0), b.peak(0));
        }
    }

    #[test]
    fn decode_worked_example() {
        let mut m = maps_with(8, 8);
        m.center.set(0, 0, 2, 3, 0.9);
        m.offset.set(0, 0, 2, 3, 0.5);
        m.offset.set(0, 1, 2, 3, 0.5);
        m.size.set(0, 0, 2, 3, 0.25);
        m.size.set(0, 1, 2, 3, 0.5);
        let b = decode_box(&m, 0);
        assert_eq!(b, BBox { cx: 0.4375, cy: 0.3125, w: 0.25, h: 0.5 });
    }

    #[test]
    fn uniform_center_breaks_tie_at_origin() {
        let mut m = maps_with(5, 5);
        m.center = Tensor4::filled(m.center.shape(), 0.5);
        assert_eq!(m.peak(0), (0, 0));
        let b = decode_box(&m, 0);
        assert_eq!((b.cx, b.cy), (0.0, 0.0));
    }

    #[test]
    fn zero_offset_decodes_onto_grid() {
        let mut m = maps_with(6, 6);
        m.center.set(0, 0, 4, 1, 1.0);
        let b = decode_box(&m, 0);
        assert_eq!((b.cx * 6.0, b.cy * 6.0), (1.0, 4.0));
    }

    #[test]
    fn map_shapes_follow_features() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for v in HeadVariant::ALL {
            let mut head = Head::new(HeadConfig::new(v, 8, 6, 6), &mut r).unwrap();
            let x = Tensor4::random_uniform(Shape4::new(2, 8, 6, 6), -1.0, 1.0, &mut r);
            let m = head.forward(&x).unwrap();
            assert_eq!(m.center.shape(), Shape4::new(2, 1, 6, 6));
            assert_eq!(m.size.shape(), Shape4::new(2, 2, 6, 6));
            assert_eq!(m.offset.shape(), Shape4::new(2, 2, 6, 6));
            m.validate().unwrap();
            for t in [&m.center, &m.size, &m.offset] {
                assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn zero_parameters_give_half_everywhere() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut head = Head::new(HeadConfig::new(HeadVariant::Inception, 4, 5, 5), &mut r).unwrap();
        head.visit_params_mut("", &mut |_, p| {
            if p.trainable {
                p.value.fill(0.0)
            }
        });
        let x = Tensor4::random_uniform(Shape4::new(2, 4, 5, 5), -1.0, 1.0, &mut r);
        let m = head.forward(&x).unwrap();
        for t in [&m.center, &m.size, &m.offset] {
            assert!(t.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn wrong_feature_dims_rejected() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut head = Head::new(HeadConfig::new(HeadVariant::Plain, 4, 5, 5), &mut r).unwrap();
        let x = Tensor4::zeros(Shape4::new(1, 4, 6, 5));
        let err = head.forward(&x).unwrap_err();
        assert!(err.to_string().contains("height"));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in HeadVariant::ALL {
            assert_eq!(v.name().parse::<HeadVariant>().unwrap(), v);
        }
        assert!("both".parse::<HeadVariant>().is_err());
    }
}
