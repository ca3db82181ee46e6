//! Per-client architecture design.
//!
//! A client's width follows its category count through the hidden channel
//! ratio `log10(K_j) / log10(K_0)`, and its depth follows its input size: the
//! number of stride-2 stages is the smallest `c` with `H_0 * 2^c >= H_j`. The
//! global model is the coordinate-wise maximum over all clients, so every
//! client's convolution weights are a leading corner block of the global ones.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};

/// Absorbs rounding in `log10` ratios so that an exact integer product is not
/// pushed up by the ceiling.
const CEIL_SLACK: f64 = 1e-9;

/// Clients sharing an image size and category count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupId {
    pub image_size: usize,
    pub num_classes: usize,
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.image_size, self.num_classes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientProfile {
    pub client_id: usize,
    /// Input height (= width) in pixels.
    pub image_size: usize,
    pub num_classes: usize,
    pub num_samples: usize,
}

impl ClientProfile {
    pub fn new(client_id: usize, image_size: usize, num_classes: usize, num_samples: usize) -> Self {
        Self {
            client_id,
            image_size,
            num_classes,
            num_samples,
        }
    }

    pub fn group(&self) -> GroupId {
        GroupId {
            image_size: self.image_size,
            num_classes: self.num_classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// One conv + BN + ReLU per stage.
    Plain,
    /// Two convs per stage with a parameter-free shortcut (strided subsample,
    /// zero-padded channels) added before the final ReLU.
    ResidualPair,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Plain => "plain",
            BlockKind::ResidualPair => "residual-pair",
        }
    }

    pub fn convs_per_stage(self) -> usize {
        match self {
            BlockKind::Plain => 1,
            BlockKind::ResidualPair => 2,
        }
    }
}

impl std::str::FromStr for BlockKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plain" => Ok(BlockKind::Plain),
            "residual-pair" => Ok(BlockKind::ResidualPair),
            other => Err(format!("unknown block kind `{other}` (plain | residual-pair)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesignBase {
    /// `K_0`: the category count that gets ratio 1.
    pub base_classes: usize,
    /// `H_0`: target size of the last feature map.
    pub base_feature_size: usize,
    /// Base output channels per stage; its length caps the depth.
    pub base_widths: Vec<usize>,
    pub input_channels: usize,
    pub block: BlockKind,
}

impl DesignBase {
    pub fn validate(&self) -> Result<()> {
        if self.base_classes < 2 {
            return Err(Error::Design(format!("base category count must be >= 2, got {}", self.base_classes)));
        }
        if self.base_feature_size < 1 || self.input_channels < 1 {
            return Err(Error::Design("base feature size and input channels must be >= 1".into()));
        }
        if self.base_widths.is_empty() || self.base_widths.contains(&0) {
            return Err(Error::Design(format!("base widths must be non-empty and positive, got {:?}", self.base_widths)));
        }
        if self.base_widths.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Design(format!("base widths must be nondecreasing, got {:?}", self.base_widths)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub block: BlockKind,
}

/// A layer plan: stages of 3x3 convs each followed by BN, then global average
/// pooling and a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input_size: usize,
    pub input_channels: usize,
    pub stages: Vec<Stage>,
    pub num_classes: usize,
    /// Ratio the widths were scaled by (informational).
    pub width_ratio: f64,
}

/// What a parameter tensor does; decides sharing and weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    ConvWeight,
    BnScale,
    BnShift,
    HeadWeight,
    HeadBias,
}

impl Role {
    /// Weight decay applies to conv and linear weights only.
    pub fn decays(self) -> bool {
        matches!(self, Role::ConvWeight | Role::HeadWeight)
    }

    pub fn is_bn(self) -> bool {
        matches!(self, Role::BnScale | Role::BnShift)
    }

    pub fn is_head(self) -> bool {
        matches!(self, Role::HeadWeight | Role::HeadBias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub dims: Vec<usize>,
    pub role: Role,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

pub fn conv_name(stage: usize, conv: usize) -> String {
    format!("stage{}.conv{}.weight", stage + 1, conv + 1)
}

pub fn bn_names(stage: usize, conv: usize) -> (String, String) {
    (
        format!("stage{}.bn{}.weight", stage + 1, conv + 1),
        format!("stage{}.bn{}.bias", stage + 1, conv + 1),
    )
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

impl ModelSpec {
    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.out_channels).collect()
    }

    pub fn last_width(&self) -> usize {
        self.stages.last().map_or(self.input_channels, |s| s.out_channels)
    }

    /// Number of BN layers in forward order.
    pub fn bn_layers(&self) -> Vec<usize> {
        self.stages
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.out_channels, s.block.convs_per_stage()))
            .collect()
    }

    /// Every parameter tensor of the model in forward order.
    pub fn tensors(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        for (l, stage) in self.stages.iter().enumerate() {
            for k in 0..stage.block.convs_per_stage() {
                let cin = if k == 0 { stage.in_channels } else { stage.out_channels };
                out.push(TensorInfo {
                    name: conv_name(l, k),
                    dims: vec![stage.out_channels, cin, 3, 3],
                    role: Role::ConvWeight,
                });
                let (w, b) = bn_names(l, k);
                out.push(TensorInfo {
                    name: w,
                    dims: vec![stage.out_channels],
                    role: Role::BnScale,
                });
                out.push(TensorInfo {
                    name: b,
                    dims: vec![stage.out_channels],
                    role: Role::BnShift,
                });
            }
        }
        out.push(TensorInfo {
            name: HEAD_WEIGHT.into(),
            dims: vec![self.num_classes, self.last_width()],
            role: Role::HeadWeight,
        });
        out.push(TensorInfo {
            name: HEAD_BIAS.into(),
            dims: vec![self.num_classes],
            role: Role::HeadBias,
        });
        out
    }

    /// Spatial size after the last stage.
    pub fn final_feature_size(&self) -> usize {
        self.stages.iter().fold(self.input_size, |h, s| (h - 1) / s.stride + 1)
    }
}

/// `kappa_j = log10(K_j) / log10(K_0)`.
pub fn channel_ratio(num_classes: usize, base_classes: usize) -> Result<f64> {
    if num_classes < 2 || base_classes < 2 {
        return Err(Error::Design(format!(
            "category counts must be >= 2 for a positive channel ratio, got K={num_classes}, K0={base_classes}"
        )));
    }
    Ok((num_classes as f64).log10() / (base_classes as f64).log10())
}

/// `c_j = ceil(log2(H_j / H_0))`, computed exactly in integers.
pub fn stage_count(image_size: usize, base_feature_size: usize) -> Result<usize> {
    if base_feature_size == 0 || image_size <= base_feature_size {
        return Err(Error::Design(format!(
            "input smaller than base feature map: H={image_size}, H0={base_feature_size}"
        )));
    }
    let mut c = 0;
    let mut reach = base_feature_size;
    while reach < image_size {
        reach *= 2;
        c += 1;
    }
    Ok(c)
}

/// `ceil(ratio * base)`, at least 1.
pub fn scale_width(base: usize, ratio: f64) -> usize {
    ((ratio * base as f64 - CEIL_SLACK).ceil() as usize).max(1)
}

fn build_spec(image_size: usize, num_classes: usize, depth: usize, ratio: f64, base: &DesignBase) -> Result<ModelSpec> {
    if depth > base.base_widths.len() {
        return Err(Error::Design(format!(
            "{depth} stages needed but only {} base widths given",
            base.base_widths.len()
        )));
    }
    let mut stages = Vec::with_capacity(depth);
    let mut cin = base.input_channels;
    for &b0 in &base.base_widths[..depth] {
        let out = scale_width(b0, ratio);
        stages.push(Stage {
            in_channels: cin,
            out_channels: out,
            stride: 2,
            block: base.block,
        });
        cin = out;
    }
    Ok(ModelSpec {
        input_size: image_size,
        input_channels: base.input_channels,
        stages,
        num_classes,
        width_ratio: ratio,
    })
}

fn validate_profile(profile: &ClientProfile, base: &DesignBase) -> Result<()> {
    if profile.num_samples == 0 {
        return Err(Error::Design(format!("client {} has no samples", profile.client_id)));
    }
    channel_ratio(profile.num_classes, base.base_classes)?;
    stage_count(profile.image_size, base.base_feature_size)?;
    Ok(())
}

/// The client's own plan: `c_j` stages with widths scaled by `kappa_j`.
pub fn design_local(profile: &ClientProfile, base: &DesignBase) -> Result<ModelSpec> {
    base.validate()?;
    validate_profile(profile, base)?;
    let ratio = channel_ratio(profile.num_classes, base.base_classes)?;
    let depth = stage_count(profile.image_size, base.base_feature_size)?;
    build_spec(profile.image_size, profile.num_classes, depth, ratio, base)
}

/// Coordinate-wise maximum of a family of local plans: depth, every stage's
/// in/out channels, input size and category count.
pub fn enclosing_spec(specs: &[ModelSpec]) -> Result<ModelSpec> {
    let first = specs.first().ok_or_else(|| Error::Design("no client profiles".into()))?;
    let depth = specs.iter().map(ModelSpec::depth).max().unwrap_or(0);
    let mut stages = Vec::with_capacity(depth);
    for l in 0..depth {
        let present: Vec<&Stage> = specs.iter().filter_map(|s| s.stages.get(l)).collect();
        stages.push(Stage {
            in_channels: present.iter().map(|s| s.in_channels).max().unwrap_or(0),
            out_channels: present.iter().map(|s| s.out_channels).max().unwrap_or(0),
            stride: present[0].stride,
            block: present[0].block,
        });
    }
    Ok(ModelSpec {
        input_size: specs.iter().map(|s| s.input_size).max().unwrap_or(0),
        input_channels: first.input_channels,
        stages,
        num_classes: specs.iter().map(|s| s.num_classes).max().unwrap_or(0),
        width_ratio: specs.iter().map(|s| s.width_ratio).fold(f64::MIN, f64::max),
    })
}

/// Global plan: `c_g = max c_j`, `b_g = max b_j` per stage.
pub fn design_global(profiles: &[ClientProfile], base: &DesignBase) -> Result<ModelSpec> {
    if profiles.is_empty() {
        return Err(Error::Design("no client profiles".into()));
    }
    let locals = profiles.iter().map(|p| design_local(p, base)).collect::<Result<Vec<_>>>()?;
    enclosing_spec(&locals)
}

/// Conv weights, BN affine pairs and the head's weights and bias.
pub fn count_parameters(spec: &ModelSpec) -> usize {
    spec.tensors().iter().map(TensorInfo::numel).sum()
}

/// Relative tolerance for the parameter parity of the width-only baseline.
pub const PARITY_TOLERANCE: f64 = 0.02;
const MAX_RATIO: f64 = 8.0;

/// Fixed-depth, width-only plans with the same parameter budget as each
/// client's own plan. The ratio is found by bisection on the (monotone)
/// parameter count; a client whose own depth already equals `fixed_depth`
/// keeps its own ratio.
pub fn design_heterofl_baseline(profiles: &[ClientProfile], base: &DesignBase, fixed_depth: usize) -> Result<Vec<ModelSpec>> {
    base.validate()?;
    if fixed_depth == 0 || fixed_depth > base.base_widths.len() {
        return Err(Error::Design(format!(
            "fixed depth {fixed_depth} outside 1..={}",
            base.base_widths.len()
        )));
    }
    profiles
        .iter()
        .map(|p| {
            let own = design_local(p, base)?;
            if own.depth() == fixed_depth {
                return Ok(own);
            }
            let target = count_parameters(&own);
            let at = |r: f64| build_spec(p.image_size, p.num_classes, fixed_depth, r, base);
            let count = |r: f64| at(r).map(|s| count_parameters(&s));

            let (mut lo, mut hi) = (0.0_f64, MAX_RATIO);
            if count(hi)? < target {
                return Err(Error::Design(format!(
                    "client {}: no ratio in (0, {MAX_RATIO}] reaches {target} parameters at depth {fixed_depth}",
                    p.client_id
                )));
            }
            // invariant: count(lo) < target <= count(hi)
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if count(mid)? >= target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let rel = |r: f64| -> Result<f64> { Ok((count(r)? as f64 - target as f64).abs() / target as f64) };
            let best = if lo > 0.0 && rel(lo)? < rel(hi)? { lo } else { hi };
            if rel(best)? > PARITY_TOLERANCE {
                return Err(Error::Design(format!(
                    "client {}: closest ratio {best:.4} misses parameter parity by {:.2}%",
                    p.client_id,
                    100.0 * rel(best)?
                )));
            }
            at(best)
        })
        .collect()
}

/// Text table of stage plans, one column per spec, in the layout of an
/// architecture comparison table.
pub fn render_table(columns: &[(String, ModelSpec)], shared_head: bool) -> String {
    let depth = columns.iter().map(|(_, s)| s.depth()).max().unwrap_or(0);
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["layer".to_string(), "shared".to_string()];
    header.extend(columns.iter().map(|(name, _)| name.clone()));
    rows.push(header);

    let mut info = vec!["input".to_string(), "-".to_string()];
    info.extend(columns.iter().map(|(_, s)| format!("{}^2 x {}", s.input_size, s.input_channels)));
    rows.push(info);
    let mut ratio = vec!["ratio".to_string(), "-".to_string()];
    ratio.extend(columns.iter().map(|(_, s)| format!("{:.2}", s.width_ratio)));
    rows.push(ratio);

    for l in 0..depth {
        let mut row = vec![format!("stage{}", l + 1), "yes".to_string()];
        for (_, s) in columns {
            row.push(match s.stages.get(l) {
                Some(st) => {
                    let n = st.block.convs_per_stage();
                    if n == 1 {
                        format!("3x3, {}, stride {}", st.out_channels, st.stride)
                    } else {
                        format!("[3x3, {}] x{}, stride {}", st.out_channels, n, st.stride)
                    }
                }
                None => String::new(),
            });
        }
        rows.push(row);
    }
    let mut pool = vec!["pool".to_string(), "-".to_string()];
    pool.extend(columns.iter().map(|_| "average pool".to_string()));
    rows.push(pool);
    let mut head = vec!["head".to_string(), if shared_head { "yes" } else { "no" }.to_string()];
    head.extend(columns.iter().map(|(_, s)| format!("{}-d fc", s.num_classes)));
    rows.push(head);
    let mut params = vec!["params".to_string(), "-".to_string()];
    params.extend(columns.iter().map(|(_, s)| count_parameters(s).to_string()));
    rows.push(params);

    let ncol = rows[0].len();
    let widths: Vec<usize> = (0..ncol)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row.iter().zip(&widths).map(|(cell, w)| format!("{cell:<w$}")).collect();
        let _ = writeln!(out, "{}", line.join(" | ").trim_end());
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(out, "{}", rule.join("-+-"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(widths: &[usize], k0: usize, h0: usize) -> DesignBase {
        DesignBase {
            base_classes: k0,
            base_feature_size: h0,
            base_widths: widths.to_vec(),
            input_channels: 3,
            block: BlockKind::Plain,
        }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(channel_ratio(1000, 1000).unwrap(), 1.0);
        assert!((channel_ratio(100, 1000).unwrap() - 0.6667).abs() < 5e-5);
        assert!((channel_ratio(500, 1000).unwrap() - 0.8997).abs() < 5e-5);
        assert!(channel_ratio(1, 1000).is_err());
    }

    #[test]
    fn stage_count_examples() {
        let cases = [(128, 8, 4), (64, 8, 3), (32, 8, 2), (256, 8, 5), (96, 8, 4), (512, 4, 7), (256, 4, 6)];
        for (h, h0, c) in cases {
            assert_eq!(stage_count(h, h0).unwrap(), c, "H={h} H0={h0}");
        }
        let err = stage_count(8, 8).unwrap_err().to_string();
        assert!(err.contains("input smaller than base feature map"));
    }

    #[test]
    fn width_scaling_examples() {
        assert_eq!(scale_width(64, channel_ratio(500, 1000).unwrap()), 58);
        assert_eq!(scale_width(256, channel_ratio(200, 1000).unwrap()), 197);
        assert_eq!(scale_width(512, channel_ratio(500, 1000).unwrap()), 461);
        for b in 1..600 {
            assert_eq!(scale_width(b, 1.0), b);
        }
    }

    #[test]
    fn three_client_smallest() {
        let p = ClientProfile::new(3, 32, 2, 10);
        let spec = design_local(&p, &base(&[32, 64, 128, 256], 10, 8)).unwrap();
        assert_eq!(spec.widths(), vec![10, 20]);
        assert_eq!(spec.num_classes, 2);
        assert_eq!(spec.stages[1].in_channels, 10);
    }

    #[test]
    fn count_by_hand() {
        let linear_only = ModelSpec {
            input_size: 1,
            input_channels: 10,
            stages: vec![],
            num_classes: 2,
            width_ratio: 1.0,
        };
        assert_eq!(count_parameters(&linear_only), 22);
        let conv_bn = ModelSpec {
            input_size: 8,
            input_channels: 3,
            stages: vec![Stage {
                in_channels: 3,
                out_channels: 32,
                stride: 2,
                block: BlockKind::Plain,
            }],
            num_classes: 1,
            width_ratio: 1.0,
        };
        // 864 conv + 64 BN + head 32 + 1
        assert_eq!(count_parameters(&conv_bn) - 33, 928);
    }

    #[test]
    fn global_requires_a_profile() {
        assert!(design_global(&[], &base(&[4], 10, 4)).is_err());
    }

    #[test]
    fn too_few_base_widths() {
        let p = ClientProfile::new(0, 128, 10, 1);
        assert!(design_local(&p, &base(&[8, 16], 10, 8)).is_err());
    }
}
