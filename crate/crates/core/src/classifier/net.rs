//! Teacher network internals: two small BN-equipped CNN families.
//!
//! Both families expose one feature tap per spatial stage, placed where the
//! resolution is about to change (residual stage outputs; the conv-stack
//! output ahead of each pooling step). Backward accepts gradient injections
//! at the taps, at the logits, and at every BN layer's captured batch
//! statistics, which is what lets a frozen classifier drive synthesis.

use ndarray::{Array1, Array2, Array4};
use rand_chacha::ChaCha20Rng;

use crate::nn::{
    global_avg_pool, global_avg_pool_backward, BatchNorm2d, BnMode, Conv2d, LeakyRelu, Linear,
    MaxPool2x2, Param,
};
use crate::{Error, Result};

use super::ClassifierSpec;

/// Per-BN-layer gradient w.r.t. captured batch mean and variance.
pub type StatGrads = [(Array1<f64>, Array1<f64>)];

fn bn_backward(
    bn: &mut BatchNorm2d,
    id: usize,
    gy: &Array4<f64>,
    stat_grads: Option<&StatGrads>,
    param_grads: bool,
) -> Array4<f64> {
    let mut g = bn.backward(gy, param_grads);
    if let Some(s) = stat_grads {
        g += &bn.stat_input_grad(&s[id].0, &s[id].1);
    }
    g
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    act1: LeakyRelu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
    act_out: LeakyRelu,
    bn_base: usize,
}

impl BasicBlock {
    fn new(
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        bn_base: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2d::new(in_ch, out_ch, 1, stride, 0, rng),
                BatchNorm2d::new(out_ch),
            ))
        } else {
            None
        };
        BasicBlock {
            conv1: Conv2d::new(in_ch, out_ch, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(out_ch),
            act1: LeakyRelu::relu(),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(out_ch),
            shortcut,
            act_out: LeakyRelu::relu(),
            bn_base,
        }
    }

    fn bn_count(&self) -> usize {
        if self.shortcut.is_some() {
            3
        } else {
            2
        }
    }

    fn forward(&mut self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let mut h = self.conv1.forward(x)?;
        h = self.bn1.forward(&h)?;
        h = self.act1.forward(&h);
        h = self.conv2.forward(&h)?;
        h = self.bn2.forward(&h)?;
        let s = match &mut self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok(self.act_out.forward(&(h + s)))
    }

    fn backward(
        &mut self,
        gy: &Array4<f64>,
        stat_grads: Option<&StatGrads>,
        param_grads: bool,
    ) -> Array4<f64> {
        let g = self.act_out.backward(gy);
        // Main branch.
        let mut gh = bn_backward(&mut self.bn2, self.bn_base + 1, &g, stat_grads, param_grads);
        gh = self.conv2.backward(&gh, param_grads);
        gh = self.act1.backward(&gh);
        gh = bn_backward(&mut self.bn1, self.bn_base, &gh, stat_grads, param_grads);
        let gx_main = self.conv1.backward(&gh, param_grads);
        // Skip branch.
        let gx_skip = match &mut self.shortcut {
            Some((conv, bn)) => {
                let gs = bn_backward(bn, self.bn_base + 2, &g, stat_grads, param_grads);
                conv.backward(&gs, param_grads)
            }
            None => g,
        };
        gx_main + gx_skip
    }

    fn bn_layers(&self) -> Vec<&BatchNorm2d> {
        let mut v = vec![&self.bn1, &self.bn2];
        if let Some((_, bn)) = &self.shortcut {
            v.push(bn);
        }
        v
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut v = vec![&mut self.bn1, &mut self.bn2];
        if let Some((_, bn)) = &mut self.shortcut {
            v.push(bn);
        }
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        v.extend(self.conv1.params());
        v.extend(self.bn1.params());
        v.extend(self.conv2.params());
        v.extend(self.bn2.params());
        if let Some((conv, bn)) = &self.shortcut {
            v.extend(conv.params());
            v.extend(bn.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        v.extend(self.conv1.params_mut());
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        if let Some((conv, bn)) = &mut self.shortcut {
            v.extend(conv.params_mut());
            v.extend(bn.params_mut());
        }
        v
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ResNetLike {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stem_act: LeakyRelu,
    stages: Vec<Vec<BasicBlock>>,
    head: Linear,
    last_stage_dim: (usize, usize, usize, usize),
}

impl ResNetLike {
    fn new(spec: &ClassifierSpec, rng: &mut ChaCha20Rng) -> Self {
        let ch = &spec.stage_channels;
        let stem = Conv2d::new(3, ch[0], 3, 1, 1, rng);
        let stem_bn = BatchNorm2d::new(ch[0]);
        let mut bn_next = 1;
        let mut stages = Vec::with_capacity(ch.len());
        let mut in_ch = ch[0];
        for (i, &out_ch) in ch.iter().enumerate() {
            let mut blocks = Vec::with_capacity(spec.blocks_per_stage);
            for b in 0..spec.blocks_per_stage {
                let stride = if i > 0 && b == 0 { 2 } else { 1 };
                let block = BasicBlock::new(in_ch, out_ch, stride, bn_next, rng);
                bn_next += block.bn_count();
                in_ch = out_ch;
                blocks.push(block);
            }
            stages.push(blocks);
        }
        let head = Linear::new(in_ch, spec.num_classes, rng);
        ResNetLike {
            stem,
            stem_bn,
            stem_act: LeakyRelu::relu(),
            stages,
            head,
            last_stage_dim: (0, 0, 0, 0),
        }
    }

    fn forward_taps(&mut self, x: &Array4<f64>) -> Result<(Array2<f64>, Vec<Array4<f64>>)> {
        let mut h = self.stem.forward(x)?;
        h = self.stem_bn.forward(&h)?;
        h = self.stem_act.forward(&h);
        let mut taps = Vec::with_capacity(self.stages.len());
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                h = block.forward(&h)?;
            }
            taps.push(h.clone());
        }
        self.last_stage_dim = h.dim();
        let pooled = global_avg_pool(&h);
        let logits = self.head.forward(&pooled)?;
        Ok((logits, taps))
    }

    fn backward_taps(
        &mut self,
        d_logits: Option<&Array2<f64>>,
        d_taps: Option<&[Array4<f64>]>,
        stat_grads: Option<&StatGrads>,
        param_grads: bool,
    ) -> Array4<f64> {
        let (b, c, h, w) = self.last_stage_dim;
        let mut g = match d_logits {
            Some(dl) => {
                let gp = self.head.backward(dl, param_grads);
                global_avg_pool_backward(&gp, h, w)
            }
            None => Array4::zeros((b, c, h, w)),
        };
        for (i, stage) in self.stages.iter_mut().enumerate().rev() {
            if let Some(dt) = d_taps {
                g += &dt[i];
            }
            for block in stage.iter_mut().rev() {
                g = block.backward(&g, stat_grads, param_grads);
            }
        }
        g = self.stem_act.backward(&g);
        g = bn_backward(&mut self.stem_bn, 0, &g, stat_grads, param_grads);
        self.stem.backward(&g, param_grads)
    }

    fn bn_layers(&self) -> Vec<&BatchNorm2d> {
        let mut v = vec![&self.stem_bn];
        for stage in &self.stages {
            for block in stage {
                v.extend(block.bn_layers());
            }
        }
        v
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut v = vec![&mut self.stem_bn];
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                v.extend(block.bn_layers_mut());
            }
        }
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        v.extend(self.stem.params());
        v.extend(self.stem_bn.params());
        for stage in &self.stages {
            for block in stage {
                v.extend(block.params());
            }
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        v.extend(self.stem.params_mut());
        v.extend(self.stem_bn.params_mut());
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                v.extend(block.params_mut());
            }
        }
        v.extend(self.head.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
struct VggUnit {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: LeakyRelu,
    bn_id: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct VggLike {
    stages: Vec<Vec<VggUnit>>,
    pools: Vec<MaxPool2x2>,
    head: Linear,
    last_stage_dim: (usize, usize, usize, usize),
}

impl VggLike {
    fn new(spec: &ClassifierSpec, rng: &mut ChaCha20Rng) -> Self {
        let ch = &spec.stage_channels;
        let mut stages = Vec::with_capacity(ch.len());
        let mut in_ch = 3;
        let mut bn_next = 0;
        for &out_ch in ch {
            let mut units = Vec::with_capacity(spec.blocks_per_stage);
            for _ in 0..spec.blocks_per_stage {
                units.push(VggUnit {
                    conv: Conv2d::new(in_ch, out_ch, 3, 1, 1, rng),
                    bn: BatchNorm2d::new(out_ch),
                    act: LeakyRelu::relu(),
                    bn_id: bn_next,
                });
                bn_next += 1;
                in_ch = out_ch;
            }
            stages.push(units);
        }
        let pools = (1..ch.len()).map(|_| MaxPool2x2::new()).collect();
        let head = Linear::new(in_ch, spec.num_classes, rng);
        VggLike {
            stages,
            pools,
            head,
            last_stage_dim: (0, 0, 0, 0),
        }
    }

    fn forward_taps(&mut self, x: &Array4<f64>) -> Result<(Array2<f64>, Vec<Array4<f64>>)> {
        let mut h = x.clone();
        let mut taps = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter_mut().enumerate() {
            if i > 0 {
                h = self.pools[i - 1].forward(&h)?;
            }
            for unit in stage.iter_mut() {
                h = unit.conv.forward(&h)?;
                h = unit.bn.forward(&h)?;
                h = unit.act.forward(&h);
            }
            taps.push(h.clone());
        }
        self.last_stage_dim = h.dim();
        let pooled = global_avg_pool(&h);
        let logits = self.head.forward(&pooled)?;
        Ok((logits, taps))
    }

    fn backward_taps(
        &mut self,
        d_logits: Option<&Array2<f64>>,
        d_taps: Option<&[Array4<f64>]>,
        stat_grads: Option<&StatGrads>,
        param_grads: bool,
    ) -> Array4<f64> {
        let (b, c, h, w) = self.last_stage_dim;
        let mut g = match d_logits {
            Some(dl) => {
                let gp = self.head.backward(dl, param_grads);
                global_avg_pool_backward(&gp, h, w)
            }
            None => Array4::zeros((b, c, h, w)),
        };
        for (i, stage) in self.stages.iter_mut().enumerate().rev() {
            if let Some(dt) = d_taps {
                g += &dt[i];
            }
            for unit in stage.iter_mut().rev() {
                g = unit.act.backward(&g);
                g = bn_backward(&mut unit.bn, unit.bn_id, &g, stat_grads, param_grads);
                g = unit.conv.backward(&g, param_grads);
            }
            if i > 0 {
                g = self.pools[i - 1].backward(&g);
            }
        }
        g
    }

    fn bn_layers(&self) -> Vec<&BatchNorm2d> {
        self.stages
            .iter()
            .flat_map(|s| s.iter().map(|u| &u.bn))
            .collect()
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        self.stages
            .iter_mut()
            .flat_map(|s| s.iter_mut().map(|u| &mut u.bn))
            .collect()
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for stage in &self.stages {
            for unit in stage {
                v.extend(unit.conv.params());
                v.extend(unit.bn.params());
            }
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for stage in &mut self.stages {
            for unit in stage.iter_mut() {
                v.extend(unit.conv.params_mut());
                v.extend(unit.bn.params_mut());
            }
        }
        v.extend(self.head.params_mut());
        v
    }
}

/// A classifier usable as an inversion teacher, a student, or an embedder.
#[derive(Debug, Clone)]
pub(crate) enum TeacherNet {
    ResNet(ResNetLike),
    Vgg(VggLike),
}

impl TeacherNet {
    pub fn from_spec(spec: &ClassifierSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = crate::nn::init::seeded_rng(seed);
        Ok(match spec.family {
            super::Family::ResnetLike => TeacherNet::ResNet(ResNetLike::new(spec, &mut rng)),
            super::Family::VggLike => TeacherNet::Vgg(VggLike::new(spec, &mut rng)),
        })
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        for bn in self.bn_layers_mut() {
            bn.mode = mode;
        }
    }

    pub fn forward_taps(&mut self, x: &Array4<f64>) -> Result<(Array2<f64>, Vec<Array4<f64>>)> {
        match self {
            TeacherNet::ResNet(n) => n.forward_taps(x),
            TeacherNet::Vgg(n) => n.forward_taps(x),
        }
    }

    pub fn backward_taps(
        &mut self,
        d_logits: Option<&Array2<f64>>,
        d_taps: Option<&[Array4<f64>]>,
        stat_grads: Option<&StatGrads>,
        param_grads: bool,
    ) -> Array4<f64> {
        match self {
            TeacherNet::ResNet(n) => n.backward_taps(d_logits, d_taps, stat_grads, param_grads),
            TeacherNet::Vgg(n) => n.backward_taps(d_logits, d_taps, stat_grads, param_grads),
        }
    }

    pub fn bn_layers(&self) -> Vec<&BatchNorm2d> {
        match self {
            TeacherNet::ResNet(n) => n.bn_layers(),
            TeacherNet::Vgg(n) => n.bn_layers(),
        }
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        match self {
            TeacherNet::ResNet(n) => n.bn_layers_mut(),
            TeacherNet::Vgg(n) => n.bn_layers_mut(),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            TeacherNet::ResNet(n) => n.params(),
            TeacherNet::Vgg(n) => n.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            TeacherNet::ResNet(n) => n.params_mut(),
            TeacherNet::Vgg(n) => n.params_mut(),
        }
    }

}

/// Selects the filter indices that survive L1 ranking: the top
/// `n - floor(ratio * n)` filters by L1 weight norm, ties broken toward the
/// lower index. Returns (kept, removed), both ascending.
pub fn l1_keep_set(norms: &[f64], ratio: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = norms.len();
    let remove = ((ratio * n as f64).floor() as usize).min(n);
    if remove >= n {
        return Err(Error::Config(format!(
            "pruning ratio {ratio} would remove all {n} filters of a layer"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        norms[b]
            .partial_cmp(&norms[a])
            .expect("finite filter norms")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..n - remove].to_vec();
    let mut removed: Vec<usize> = order[n - remove..].to_vec();
    kept.sort_unstable();
    removed.sort_unstable();
    Ok((kept, removed))
}

fn filter_l1_norms(conv: &Conv2d) -> Vec<f64> {
    let w = conv
        .weight
        .value
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("conv weight 4-D");
    (0..conv.out_channels)
        .map(|o| w.index_axis(ndarray::Axis(0), o).iter().map(|v| v.abs()).sum())
        .collect()
}

fn prune_site(
    name: String,
    conv: &mut Conv2d,
    bn: &mut BatchNorm2d,
    next_conv: &mut Conv2d,
    ratio: f64,
) -> Result<super::PruneMask> {
    let norms = filter_l1_norms(conv);
    let (kept, removed) = l1_keep_set(&norms, ratio)?;
    if !removed.is_empty() {
        conv.prune_out_channels(&kept);
        bn.prune_channels(&kept);
        next_conv.prune_in_channels(&kept);
    }
    Ok(super::PruneMask {
        layer: name,
        norms,
        kept,
        removed,
    })
}

impl TeacherNet {
    /// Locally prunes the smallest-L1 filters of every prunable conv.
    ///
    /// Residual family: each basic block's first conv feeds only its second
    /// conv, so those filters are removable without touching the skip sums.
    /// VGG family: every conv except the last (which feeds the pooled head)
    /// is prunable, rewiring the following conv's input channels.
    pub(crate) fn l1_prune(&mut self, ratio: f64) -> Result<Vec<super::PruneMask>> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!("pruning ratio must be in [0,1), got {ratio}")));
        }
        let mut masks = Vec::new();
        match self {
            TeacherNet::ResNet(net) => {
                for (si, stage) in net.stages.iter_mut().enumerate() {
                    for (bi, block) in stage.iter_mut().enumerate() {
                        masks.push(prune_site(
                            format!("stage{}.block{}.conv1", si + 1, bi + 1),
                            &mut block.conv1,
                            &mut block.bn1,
                            &mut block.conv2,
                            ratio,
                        )?);
                    }
                }
            }
            TeacherNet::Vgg(net) => {
                let mut flat: Vec<(usize, usize)> = Vec::new();
                for (si, stage) in net.stages.iter().enumerate() {
                    for ui in 0..stage.len() {
                        flat.push((si, ui));
                    }
                }
                for win in flat.windows(2) {
                    let (si, ui) = win[0];
                    let (nsi, nui) = win[1];
                    let norms = filter_l1_norms(&net.stages[si][ui].conv);
                    let (kept, removed) = l1_keep_set(&norms, ratio)?;
                    if !removed.is_empty() {
                        net.stages[si][ui].conv.prune_out_channels(&kept);
                        net.stages[si][ui].bn.prune_channels(&kept);
                        net.stages[nsi][nui].conv.prune_in_channels(&kept);
                    }
                    masks.push(super::PruneMask {
                        layer: format!("stage{}.conv{}", si + 1, ui + 1),
                        norms,
                        kept,
                        removed,
                    });
                }
            }
        }
        Ok(masks)
    }
}
