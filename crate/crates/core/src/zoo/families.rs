//! Layer-by-layer definitions of the supported backbones.
//!
//! Layer names follow the Keras applications so that converted ImageNet
//! weights can be matched by name.

use crate::error::{Error, Result};
use crate::nn::graph::Builder;
use crate::nn::{Graph, Padding, Section};

/// Convolution + batch norm + ReLU blocks of a CBR network, each followed by
/// 2x2 max pooling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CbrConfig {
    pub conv_blocks: Vec<(usize, usize)>,
    /// Filters of the appended head convolution.
    pub head_filters: usize,
}

impl CbrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(4..=5).contains(&self.conv_blocks.len()) {
            return Err(Error::InvalidSpec(format!(
                "CBR networks have 4 or 5 blocks, not {}",
                self.conv_blocks.len()
            )));
        }
        if self.conv_blocks.iter().any(|&(f, k)| f == 0 || k == 0) || self.head_filters == 0 {
            return Err(Error::InvalidSpec("CBR filters and kernels must be positive".into()));
        }
        Ok(())
    }

    /// Smallest square input that survives every pooling stage.
    pub fn min_input(&self) -> usize {
        1 << self.conv_blocks.len()
    }
}

const BN_MOMENTUM: f32 = 0.9;

pub(crate) fn cbr(graph: &mut Graph, seed: u64, cfg: &CbrConfig) -> Result<usize> {
    cfg.validate()?;
    let [h, w, _] = graph.input_shape();
    if h.min(w) < cfg.min_input() {
        return Err(Error::Argument(format!(
            "{h}x{w} input is below the {0}x{0} minimum of a {1}-block CBR network",
            cfg.min_input(),
            cfg.conv_blocks.len()
        )));
    }
    let mut b = graph.builder(seed, Section::Backbone);
    let mut x = 0;
    for (i, &(filters, k)) in cfg.conv_blocks.iter().enumerate() {
        let n = i + 1;
        x = b.conv(
            &format!("block{n}_conv"),
            x,
            filters,
            (k, k),
            (1, 1),
            Padding::Same,
            false,
        )?;
        x = b.batch_norm(&format!("block{n}_bn"), x, 1e-3, BN_MOMENTUM, true)?;
        x = b.relu(&format!("block{n}_relu"), x)?;
        x = b.max_pool(&format!("block{n}_pool"), x, (2, 2), (2, 2), Padding::Valid)?;
    }
    Ok(x)
}

pub(crate) fn vgg16(graph: &mut Graph, seed: u64, include_top: bool) -> Result<usize> {
    let mut b = graph.builder(seed, Section::Backbone);
    let mut x = 0;
    for (block, (filters, convs)) in [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)]
        .into_iter()
        .enumerate()
    {
        let n = block + 1;
        for i in 1..=convs {
            x = b.conv(
                &format!("block{n}_conv{i}"),
                x,
                filters,
                (3, 3),
                (1, 1),
                Padding::Same,
                true,
            )?;
            x = b.relu(&format!("block{n}_conv{i}_relu"), x)?;
        }
        x = b.max_pool(&format!("block{n}_pool"), x, (2, 2), (2, 2), Padding::Valid)?;
    }
    if include_top {
        x = b.flatten("flatten", x)?;
        x = b.dense("fc1", x, 4096, true)?;
        x = b.relu("fc1_relu", x)?;
        x = b.dense("fc2", x, 4096, true)?;
        x = b.relu("fc2_relu", x)?;
        x = b.dense("predictions", x, 1000, true)?;
    }
    Ok(x)
}

const RESNET_EPS: f32 = 1.001e-5;

fn resnet_block(
    b: &mut Builder<'_>,
    x: usize,
    filters: usize,
    stride: usize,
    shortcut_conv: bool,
    name: &str,
) -> Result<usize> {
    let shortcut = if shortcut_conv {
        let s = b.conv(
            &format!("{name}_0_conv"),
            x,
            4 * filters,
            (1, 1),
            (stride, stride),
            Padding::Valid,
            true,
        )?;
        b.batch_norm(&format!("{name}_0_bn"), s, RESNET_EPS, BN_MOMENTUM, true)?
    } else {
        x
    };
    let mut y = b.conv(
        &format!("{name}_1_conv"),
        x,
        filters,
        (1, 1),
        (stride, stride),
        Padding::Valid,
        true,
    )?;
    y = b.batch_norm(&format!("{name}_1_bn"), y, RESNET_EPS, BN_MOMENTUM, true)?;
    y = b.relu(&format!("{name}_1_relu"), y)?;
    y = b.conv(
        &format!("{name}_2_conv"),
        y,
        filters,
        (3, 3),
        (1, 1),
        Padding::Same,
        true,
    )?;
    y = b.batch_norm(&format!("{name}_2_bn"), y, RESNET_EPS, BN_MOMENTUM, true)?;
    y = b.relu(&format!("{name}_2_relu"), y)?;
    y = b.conv(
        &format!("{name}_3_conv"),
        y,
        4 * filters,
        (1, 1),
        (1, 1),
        Padding::Valid,
        true,
    )?;
    y = b.batch_norm(&format!("{name}_3_bn"), y, RESNET_EPS, BN_MOMENTUM, true)?;
    let sum = b.add(&format!("{name}_add"), shortcut, y)?;
    b.relu(&format!("{name}_out"), sum)
}

pub(crate) fn resnet50(graph: &mut Graph, seed: u64, include_top: bool) -> Result<usize> {
    let mut b = graph.builder(seed, Section::Backbone);
    let mut x = b.conv("conv1_conv", 0, 64, (7, 7), (2, 2), Padding::Explicit(3), true)?;
    x = b.batch_norm("conv1_bn", x, RESNET_EPS, BN_MOMENTUM, true)?;
    x = b.relu("conv1_relu", x)?;
    x = b.max_pool("pool1_pool", x, (3, 3), (2, 2), Padding::Explicit(1))?;
    for (stage, (filters, blocks, stride)) in [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)]
        .into_iter()
        .enumerate()
    {
        for i in 1..=blocks {
            let s = if i == 1 { stride } else { 1 };
            x = resnet_block(&mut b, x, filters, s, i == 1, &format!("conv{}_block{i}", stage + 2))?;
        }
    }
    if include_top {
        x = b.global_avg_pool("avg_pool", x)?;
        x = b.dense("predictions", x, 1000, true)?;
    }
    Ok(x)
}

/// Conv (no bias) + batch norm without scale + ReLU, as in Inception-v3.
struct Inception<'a, 'g> {
    b: &'a mut Builder<'g>,
    count: usize,
}

impl Inception<'_, '_> {
    fn conv_bn(
        &mut self,
        x: usize,
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Result<usize> {
        self.count += 1;
        let suffix = if self.count == 1 {
            String::new()
        } else {
            format!("_{}", self.count - 1)
        };
        let y = self.b.conv(
            &format!("conv2d{suffix}"),
            x,
            filters,
            kernel,
            (stride, stride),
            padding,
            false,
        )?;
        let y = self
            .b
            .batch_norm(&format!("batch_normalization{suffix}"), y, 1e-3, BN_MOMENTUM, false)?;
        self.b.relu(&format!("activation{suffix}"), y)
    }

    fn same(&mut self, x: usize, filters: usize, kh: usize, kw: usize) -> Result<usize> {
        self.conv_bn(x, filters, (kh, kw), 1, Padding::Same)
    }

    fn avg_branch(&mut self, x: usize, filters: usize, name: &str) -> Result<usize> {
        let p = self.b.avg_pool(name, x, (3, 3), (1, 1), Padding::Same)?;
        self.same(p, filters, 1, 1)
    }
}

pub(crate) fn inception_v3(graph: &mut Graph, seed: u64, include_top: bool) -> Result<usize> {
    let mut b = graph.builder(seed, Section::Backbone);
    let mut n = Inception { b: &mut b, count: 0 };
    let mut x = n.conv_bn(0, 32, (3, 3), 2, Padding::Valid)?;
    x = n.conv_bn(x, 32, (3, 3), 1, Padding::Valid)?;
    x = n.same(x, 64, 3, 3)?;
    x = n.b.max_pool("max_pooling2d", x, (3, 3), (2, 2), Padding::Valid)?;
    x = n.conv_bn(x, 80, (1, 1), 1, Padding::Valid)?;
    x = n.conv_bn(x, 192, (3, 3), 1, Padding::Valid)?;
    x = n.b.max_pool("max_pooling2d_1", x, (3, 3), (2, 2), Padding::Valid)?;

    for (i, pool_filters) in [32, 64, 64].into_iter().enumerate() {
        let b1 = n.same(x, 64, 1, 1)?;
        let b5 = n.same(x, 48, 1, 1)?;
        let b5 = n.same(b5, 64, 5, 5)?;
        let b3 = n.same(x, 64, 1, 1)?;
        let b3 = n.same(b3, 96, 3, 3)?;
        let b3 = n.same(b3, 96, 3, 3)?;
        let bp = n.avg_branch(x, pool_filters, &format!("average_pooling2d{}", suffix(i)))?;
        x = n.b.concat(&format!("mixed{i}"), &[b1, b5, b3, bp])?;
    }

    let b3 = n.conv_bn(x, 384, (3, 3), 2, Padding::Valid)?;
    let bd = n.same(x, 64, 1, 1)?;
    let bd = n.same(bd, 96, 3, 3)?;
    let bd = n.conv_bn(bd, 96, (3, 3), 2, Padding::Valid)?;
    let bp = n.b.max_pool("max_pooling2d_2", x, (3, 3), (2, 2), Padding::Valid)?;
    x = n.b.concat("mixed3", &[b3, bd, bp])?;

    for (i, c) in [128, 160, 160, 192].into_iter().enumerate() {
        let b1 = n.same(x, 192, 1, 1)?;
        let b7 = n.same(x, c, 1, 1)?;
        let b7 = n.same(b7, c, 1, 7)?;
        let b7 = n.same(b7, 192, 7, 1)?;
        let bd = n.same(x, c, 1, 1)?;
        let bd = n.same(bd, c, 7, 1)?;
        let bd = n.same(bd, c, 1, 7)?;
        let bd = n.same(bd, c, 7, 1)?;
        let bd = n.same(bd, 192, 1, 7)?;
        let bp = n.avg_branch(x, 192, &format!("average_pooling2d_{}", i + 3))?;
        x = n.b.concat(&format!("mixed{}", i + 4), &[b1, b7, bd, bp])?;
    }

    let b3 = n.same(x, 192, 1, 1)?;
    let b3 = n.conv_bn(b3, 320, (3, 3), 2, Padding::Valid)?;
    let b7 = n.same(x, 192, 1, 1)?;
    let b7 = n.same(b7, 192, 1, 7)?;
    let b7 = n.same(b7, 192, 7, 1)?;
    let b7 = n.conv_bn(b7, 192, (3, 3), 2, Padding::Valid)?;
    let bp = n.b.max_pool("max_pooling2d_3", x, (3, 3), (2, 2), Padding::Valid)?;
    x = n.b.concat("mixed8", &[b3, b7, bp])?;

    for i in 0..2 {
        let b1 = n.same(x, 320, 1, 1)?;
        let b3 = n.same(x, 384, 1, 1)?;
        let b3a = n.same(b3, 384, 1, 3)?;
        let b3b = n.same(b3, 384, 3, 1)?;
        let b3 = n.b.concat(&format!("mixed9_{i}"), &[b3a, b3b])?;
        let bd = n.same(x, 448, 1, 1)?;
        let bd = n.same(bd, 384, 3, 3)?;
        let bda = n.same(bd, 384, 1, 3)?;
        let bdb = n.same(bd, 384, 3, 1)?;
        let bd = n.b.concat(&format!("concatenate{}", suffix(i)), &[bda, bdb])?;
        let bp = n.avg_branch(x, 192, &format!("average_pooling2d_{}", i + 7))?;
        x = n.b.concat(&format!("mixed{}", 9 + i), &[b1, b3, bd, bp])?;
    }
    if include_top {
        x = b.global_avg_pool("avg_pool", x)?;
        x = b.dense("predictions", x, 1000, true)?;
    }
    Ok(x)
}

fn suffix(i: usize) -> String {
    if i == 0 {
        String::new()
    } else {
        format!("_{i}")
    }
}
