//! Forward-only reference network.
//!
//! A 2.5D attention UNet: the top `levels_2d` levels use in-plane 3x3x1
//! convolutions with (2,2,1) pooling, deeper levels 3x3x3 convolutions with
//! (2,2,2) pooling, so a 4:1 anisotropic input becomes isotropic after two
//! in-plane stages. The bottleneck is a DenseASPP block. Three heads share
//! the backbone:
//!
//! * initial mask: bottleneck features -> two 3x3x3 convs -> 1x1x1 logits,
//!   upsampled to the input grid -> softmax,
//! * boundary: a 1x1x1 projection of every decoder scale, upsampled and
//!   concatenated -> channel attention block -> 1x1x1 -> sigmoid,
//! * final mask: boundary-head features concatenated with the initial
//!   logits -> channel attention block -> 1x1x1 -> softmax.
//!
//! Convolutions run in `f32`; activations that feed outputs (sigmoid,
//! softmax) are evaluated in `f64`.

mod layers;
mod weights;

pub use layers::{sigmoid, Conv, Feat, Rcab};
pub use weights::{TensorEntry, WeightManifest};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ChannelVolume, Geometry, ProbVolume, Volume};

/// Standard deviation of the weight initialisation (variance 0.01).
pub const INIT_STD: f32 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_filters: usize,
    pub depth: usize,
    pub levels_2d: usize,
    pub dilations: Vec<usize>,
    /// Channels added by each DenseASPP branch; `None` means `2 * base_filters`.
    pub aspp_growth: Option<usize>,
    pub seed: u64,
}

impl NetConfig {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        Self {
            in_channels: 1,
            num_classes,
            base_filters: 8,
            depth: 5,
            levels_2d: 2,
            dilations: vec![3, 6, 12, 18],
            aspp_growth: None,
            seed,
        }
    }

    pub fn with_base_filters(mut self, base: usize) -> Self {
        self.base_filters = base;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.in_channels != 1 {
            return bad(format!("in_channels must be 1, got {}", self.in_channels));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.base_filters < 1 {
            return bad("base_filters must be >= 1".into());
        }
        if self.depth < 2 || self.depth < self.levels_2d + 1 {
            return bad(format!(
                "depth {} must be >= 2 and >= levels_2d + 1 ({})",
                self.depth,
                self.levels_2d + 1
            ));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad("dilations must be non-empty and positive".into());
        }
        if self.aspp_growth == Some(0) {
            return bad("aspp_growth must be positive".into());
        }
        Ok(())
    }

    pub fn growth(&self) -> usize {
        self.aspp_growth.unwrap_or(2 * self.base_filters)
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_filters << level
    }

    fn is_2d(&self, level: usize) -> bool {
        level < self.levels_2d
    }

    fn kernel(&self, level: usize) -> [usize; 3] {
        if self.is_2d(level) {
            [3, 3, 1]
        } else {
            [3, 3, 3]
        }
    }

    /// Down/upsampling factor between `level` and `level + 1`.
    pub fn factor(&self, level: usize) -> [usize; 3] {
        if self.is_2d(level) {
            [2, 2, 1]
        } else {
            [2, 2, 2]
        }
    }

    /// Required divisors of the patch shape.
    pub fn patch_divisors(&self) -> [usize; 3] {
        let mut d = [1, 1, 1];
        for l in 0..self.depth - 1 {
            for (a, f) in self.factor(l).iter().enumerate() {
                d[a] *= f;
            }
        }
        d
    }

    /// Grid of every level for a given input geometry; spacing grows with the
    /// pooling factors.
    pub fn level_geometries(&self, input: &Geometry) -> Result<Vec<Geometry>> {
        let mut out = vec![*input];
        for l in 0..self.depth - 1 {
            let f = self.factor(l);
            let g = out[l];
            out.push(Geometry::new(
                [g.shape[0] / f[0], g.shape[1] / f[1], g.shape[2] / f[2]],
                [g.spacing[0] * f[0] as f64, g.spacing[1] * f[1] as f64, g.spacing[2] * f[2] as f64],
            )?);
        }
        Ok(out)
    }

    fn bottleneck_channels(&self) -> usize {
        self.channels(self.depth - 1) + self.dilations.len() * self.growth()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderLevel {
    conv1: Conv,
    conv2: Conv,
}

#[derive(Clone, Debug, PartialEq)]
struct AsppBranch {
    reduce: Conv,
    dilated: Conv,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderLevel {
    gate_hidden: Conv,
    gate_out: Conv,
    conv1: Conv,
    conv2: Conv,
}

/// Immutable network weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetConfig,
    encoder: Vec<EncoderLevel>,
    aspp: Vec<AsppBranch>,
    /// Indexed by level `0..depth-1`.
    decoder: Vec<DecoderLevel>,
    init_head: [Conv; 3],
    boundary_proj: Vec<Conv>,
    boundary_rcab: Rcab,
    boundary_out: Conv,
    final_rcab: Rcab,
    final_out: Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutputs {
    pub boundary: ProbVolume,
    pub mask_init: ProbVolume,
    pub mask_final: ProbVolume,
    /// One single-channel gate map per decoder level, finest first, on that
    /// level's grid.
    pub attention_maps: Vec<ChannelVolume>,
}

/// Builds a network with weights drawn from N(0, 0.1²) and zero biases.
pub fn build(config: &NetConfig) -> Result<Network> {
    config.validate()?;
    let c = config;
    let encoder = (0..c.depth)
        .map(|l| {
            let cin = if l == 0 { c.in_channels } else { c.channels(l - 1) };
            EncoderLevel {
                conv1: Conv::new(format!("enc{l}.conv1"), cin, c.channels(l), c.kernel(l), 1),
                conv2: Conv::new(format!("enc{l}.conv2"), c.channels(l), c.channels(l), c.kernel(l), 1),
            }
        })
        .collect();
    let mut aspp_in = c.channels(c.depth - 1);
    let aspp = c
        .dilations
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let b = AsppBranch {
                reduce: Conv::pointwise(format!("aspp{i}.reduce"), aspp_in, c.growth()),
                dilated: Conv::new(format!("aspp{i}.dilated"), c.growth(), c.growth(), [3, 3, 3], d),
            };
            aspp_in += c.growth();
            b
        })
        .collect();
    let decoder = (0..c.depth - 1)
        .map(|l| {
            let up = if l == c.depth - 2 { c.bottleneck_channels() } else { c.channels(l + 1) };
            let skip = c.channels(l);
            DecoderLevel {
                gate_hidden: Conv::pointwise(format!("dec{l}.gate_hidden"), skip + up, skip),
                gate_out: Conv::pointwise(format!("dec{l}.gate_out"), skip, 1),
                conv1: Conv::new(format!("dec{l}.conv1"), skip + up, skip, c.kernel(l), 1),
                conv2: Conv::new(format!("dec{l}.conv2"), skip, skip, c.kernel(l), 1),
            }
        })
        .collect();
    let bc = c.bottleneck_channels();
    let top = c.channels(c.depth - 1);
    let init_head = [
        Conv::new("init.conv1", bc, top, [3, 3, 3], 1),
        Conv::new("init.conv2", top, top, [3, 3, 3], 1),
        Conv::pointwise("init.logits", top, c.num_classes),
    ];
    let boundary_proj: Vec<Conv> = (0..c.depth - 1)
        .map(|l| Conv::pointwise(format!("boundary.proj{l}"), c.channels(l), c.base_filters))
        .collect();
    let fused = c.base_filters * (c.depth - 1);
    let mut net = Network {
        config: c.clone(),
        encoder,
        aspp,
        decoder,
        init_head,
        boundary_proj,
        boundary_rcab: Rcab::new("boundary.rcab", fused),
        boundary_out: Conv::pointwise("boundary.out", fused, 1),
        final_rcab: Rcab::new("final.rcab", fused + c.num_classes),
        final_out: Conv::pointwise("final.out", fused + c.num_classes, c.num_classes),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let dist = Normal::new(0.0f32, INIT_STD).expect("valid normal");
    for conv in net.convs_mut() {
        conv.init_normal(&mut rng, &dist);
    }
    Ok(net)
}

fn softmax(logits: &Feat, geom: Geometry) -> Result<ProbVolume> {
    let n = logits.voxels();
    let k = logits.channels;
    let mut data = vec![0.0f64; k * n];
    let mut row = vec![0.0f64; k];
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for (c, r) in row.iter_mut().enumerate() {
            *r = logits.data[c * n + i] as f64;
            max = max.max(*r);
        }
        let mut sum = 0.0;
        for r in &mut row {
            *r = (*r - max).exp();
            sum += *r;
        }
        for (c, r) in row.iter().enumerate() {
            data[c * n + i] = r / sum;
        }
    }
    ProbVolume::new(geom, k, data)
}

impl Network {
    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Every convolution in a fixed order (the serialisation order).
    pub fn convs(&self) -> Vec<&Conv> {
        let mut v = Vec::new();
        for e in &self.encoder {
            v.extend([&e.conv1, &e.conv2]);
        }
        for b in &self.aspp {
            v.extend([&b.reduce, &b.dilated]);
        }
        for d in &self.decoder {
            v.extend([&d.gate_hidden, &d.gate_out, &d.conv1, &d.conv2]);
        }
        v.extend(self.init_head.iter());
        v.extend(self.boundary_proj.iter());
        v.extend([
            &self.boundary_rcab.squeeze,
            &self.boundary_rcab.excite,
            &self.boundary_out,
            &self.final_rcab.squeeze,
            &self.final_rcab.excite,
            &self.final_out,
        ]);
        v
    }

    pub(crate) fn convs_mut(&mut self) -> Vec<&mut Conv> {
        let mut v = Vec::new();
        for e in &mut self.encoder {
            v.extend([&mut e.conv1, &mut e.conv2]);
        }
        for b in &mut self.aspp {
            v.extend([&mut b.reduce, &mut b.dilated]);
        }
        for d in &mut self.decoder {
            v.extend([&mut d.gate_hidden, &mut d.gate_out, &mut d.conv1, &mut d.conv2]);
        }
        v.extend(self.init_head.iter_mut());
        v.extend(self.boundary_proj.iter_mut());
        v.extend([
            &mut self.boundary_rcab.squeeze,
            &mut self.boundary_rcab.excite,
            &mut self.boundary_out,
            &mut self.final_rcab.squeeze,
            &mut self.final_rcab.excite,
            &mut self.final_out,
        ]);
        v
    }

    /// Weights plus biases.
    pub fn count_params(&self) -> usize {
        self.convs().iter().map(|c| c.param_count()).sum()
    }

    pub fn check_patch(&self, shape: [usize; 3]) -> Result<()> {
        let div = self.config.patch_divisors();
        if shape.iter().zip(&div).any(|(&n, &d)| n == 0 || n % d != 0) {
            return Err(Error::BadPatchShape(format!(
                "patch {shape:?} must be a positive multiple of {div:?} per axis"
            )));
        }
        Ok(())
    }

    pub fn forward(&self, patch: &Volume) -> Result<NetworkOutputs> {
        let geom = *patch.geometry();
        self.check_patch(geom.shape)?;
        let c = &self.config;
        let levels = c.level_geometries(&geom)?;

        let mut x = Feat {
            channels: 1,
            shape: geom.shape,
            data: patch.data().to_vec(),
        };
        let mut skips = Vec::with_capacity(c.depth - 1);
        for (l, enc) in self.encoder.iter().enumerate() {
            if l > 0 {
                x = x.max_pool(c.factor(l - 1));
            }
            x = enc.conv2.forward(&enc.conv1.forward(&x).relu()).relu();
            if l + 1 < c.depth {
                skips.push(x.clone());
            }
        }

        for b in &self.aspp {
            let y = b.dilated.forward(&b.reduce.forward(&x).relu()).relu();
            x = Feat::concat(&[&x, &y]);
        }
        let bottleneck = x;

        let [h1, h2, h3] = &self.init_head;
        let init_logits = h3
            .forward(&h2.forward(&h1.forward(&bottleneck).relu()).relu())
            .resize(geom.shape);
        let mask_init = softmax(&init_logits, geom)?;

        let mut x = bottleneck;
        let mut decoded = vec![None; c.depth - 1];
        let mut attention_maps = vec![None; c.depth - 1];
        for l in (0..c.depth - 1).rev() {
            let dec = &self.decoder[l];
            let skip = &skips[l];
            let up = x.resize(skip.shape);
            let both = Feat::concat(&[skip, &up]);
            let pre = dec.gate_out.forward(&dec.gate_hidden.forward(&both).relu());
            let gate: Vec<f64> = pre.data.iter().map(|&v| sigmoid(v as f64)).collect();
            let mut gated = skip.clone();
            let n = skip.voxels();
            for ch in 0..skip.channels {
                for (v, g) in gated.data[ch * n..(ch + 1) * n].iter_mut().zip(&gate) {
                    *v *= *g as f32;
                }
            }
            x = dec
                .conv2
                .forward(&dec.conv1.forward(&Feat::concat(&[&gated, &up])).relu())
                .relu();
            attention_maps[l] = Some(ChannelVolume::new(levels[l], 1, gate)?);
            decoded[l] = Some(x.clone());
        }

        let projected: Vec<Feat> = decoded
            .iter()
            .zip(&self.boundary_proj)
            .map(|(d, p)| p.forward(d.as_ref().expect("decoded level")).resize(geom.shape))
            .collect();
        let fused = Feat::concat(&projected.iter().collect::<Vec<_>>());
        let (fused, _) = self.boundary_rcab.forward(&fused);
        let b_logits = self.boundary_out.forward(&fused);
        let boundary = ProbVolume::new(geom, 1, b_logits.data.iter().map(|&v| sigmoid(v as f64)).collect())?;

        let (merged, _) = self.final_rcab.forward(&Feat::concat(&[&fused, &init_logits]));
        let mask_final = softmax(&self.final_out.forward(&merged), geom)?;

        Ok(NetworkOutputs {
            boundary,
            mask_init,
            mask_final,
            attention_maps: attention_maps.into_iter().map(|m| m.expect("gate map")).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> NetConfig {
        NetConfig::new(3, seed).with_base_filters(2)
    }

    #[test]
    fn config_validation() {
        let mut c = small(1);
        c.depth = 2;
        c.levels_2d = 2;
        assert!(matches!(build(&c), Err(Error::InvalidConfig(_))));
        let mut c = small(1);
        c.num_classes = 1;
        assert!(build(&c).is_err());
    }

    #[test]
    fn divisors_follow_the_pooling_ladder() {
        assert_eq!(NetConfig::new(2, 0).patch_divisors(), [16, 16, 4]);
        let net = build(&small(0)).unwrap();
        assert!(net.check_patch([32, 32, 8]).is_ok());
        assert!(net.check_patch([224, 224, 32]).is_ok());
        assert!(matches!(net.check_patch([24, 32, 8]), Err(Error::BadPatchShape(_))));
        assert!(net.check_patch([32, 32, 6]).is_err());
    }

    #[test]
    fn level_two_is_isotropic_for_four_to_one_input() {
        let g = Geometry::new([64, 64, 16], [1.0, 1.0, 4.0]).unwrap();
        let levels = NetConfig::new(2, 0).level_geometries(&g).unwrap();
        assert_eq!(levels[2].shape, [16, 16, 16]);
        assert_eq!(levels[2].spacing, [4.0, 4.0, 4.0]);
        assert_eq!(levels[4].shape, [4, 4, 4]);
    }

    #[test]
    fn seeds_control_weights() {
        let a = build(&small(3)).unwrap();
        assert_eq!(a, build(&small(3)).unwrap());
        assert_ne!(a, build(&small(4)).unwrap());
    }

    #[test]
    fn forward_shapes_and_normalisation() {
        let net = build(&small(5)).unwrap();
        let g = Geometry::new([32, 32, 8], [1.0, 1.0, 4.0]).unwrap();
        let patch = Volume::from_fn(g, |x, y, z| ((x * y + z) % 5) as f32);
        let out = net.forward(&patch).unwrap();
        assert_eq!(out.boundary.shape(), g.shape);
        assert_eq!(out.mask_final.channels(), 3);
        assert_eq!(out.attention_maps.len(), 4);
        assert_eq!(out.attention_maps[1].shape(), [16, 16, 8]);
        assert_eq!(out, net.forward(&patch).unwrap());
    }
}
