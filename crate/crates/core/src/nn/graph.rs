//! Layer graph: topologically ordered nodes, named parameter groups, and the
//! forward/backward passes over them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{self, BnCache, Op, Padding, Window};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Backbone,
    Head,
}

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<usize>,
    /// Output `(height, width, channels)`.
    pub shape: [usize; 3],
    pub group: Option<usize>,
    pub section: Section,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// `false` for running statistics, which the optimizer never touches.
    pub trainable: bool,
    pub data: Vec<f32>,
}

impl ParamTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// The parameters of one layer; the unit a freeze plan talks about.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub section: Section,
    pub tensors: Vec<ParamTensor>,
}

impl ParamGroup {
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(ParamTensor::numel).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    groups: Vec<ParamGroup>,
    materialized: bool,
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn name_salt(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Graph {
    /// A graph holding only its input node. With `materialize == false` the
    /// graph records shapes but allocates no parameter storage.
    pub fn new(input: [usize; 3], materialize: bool) -> Graph {
        Graph {
            nodes: vec![Node {
                name: "input".into(),
                op: Op::Input,
                inputs: vec![],
                shape: input,
                group: None,
                section: Section::Backbone,
            }],
            groups: vec![],
            materialized: materialize,
        }
    }

    pub fn builder(&mut self, seed: u64, section: Section) -> Builder<'_> {
        Builder {
            graph: self,
            seed,
            section,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn is_materialized(&self) -> bool {
        self.materialized
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.nodes[0].shape
    }

    pub fn output_node(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn node_id(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn group_id(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Total number of stored values, running statistics included.
    pub fn param_count(&self) -> usize {
        self.groups.iter().map(ParamGroup::numel).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.groups
            .iter()
            .flat_map(|g| &g.tensors)
            .filter(|t| t.trainable)
            .map(ParamTensor::numel)
            .sum()
    }

    /// SHA-256 over the raw little-endian bytes of the selected groups.
    pub fn digest(&self, mut include: impl FnMut(&ParamGroup) -> bool) -> String {
        let mut h = Sha256::new();
        for g in self.groups.iter().filter(|g| include(g)) {
            h.update(g.name.as_bytes());
            for t in &g.tensors {
                h.update(t.name.as_bytes());
                for v in &t.data {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let g = &mut self.groups[u.group];
            let n = g.tensors.len();
            let (mean_t, var_t) = g.tensors.split_at_mut(n - 1);
            let mean_t = &mut mean_t[n - 2];
            let var_t = &mut var_t[0];
            for (m, b) in mean_t.data.iter_mut().zip(&u.mean) {
                *m = *m * u.momentum + b * (1.0 - u.momentum);
            }
            for (v, b) in var_t.data.iter_mut().zip(&u.var) {
                *v = *v * u.momentum + b * (1.0 - u.momentum);
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if !self.materialized {
            return Err(Error::State("graph was built for shape inspection only".into()));
        }
        let [_, h, w, c] = x.shape();
        if [h, w, c] != self.input_shape() {
            return Err(Error::Argument(format!(
                "input is {h}x{w}x{c}, network expects {:?}",
                self.input_shape()
            )));
        }
        Ok(())
    }

    /// Training-style forward pass keeping everything backward needs.
    pub fn forward(&self, x: &Tensor, mode: &Mode<'_>) -> Result<ForwardPass> {
        self.check_input(x)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        let mut bn_updates = Vec::new();
        outputs.push(x.clone());
        aux.push(Aux::None);
        for id in 1..self.nodes.len() {
            let inputs: Vec<&Tensor> = self.nodes[id].inputs.iter().map(|&i| &outputs[i]).collect();
            let (y, a, bn) = self.eval_node(id, &inputs, mode, true);
            outputs.push(y);
            aux.push(a);
            bn_updates.extend(bn);
        }
        Ok(ForwardPass {
            outputs,
            aux,
            bn_updates,
        })
    }

    /// Inference-mode pass returning the output of `target` (default: the
    /// network output), freeing intermediates as soon as they are consumed.
    pub fn infer(&self, x: &Tensor, target: Option<usize>) -> Result<Tensor> {
        self.check_input(x)?;
        let target = target.unwrap_or(self.output_node());
        let mut remaining = vec![0usize; self.nodes.len()];
        for n in &self.nodes[..=target] {
            for &i in &n.inputs {
                remaining[i] += 1;
            }
        }
        let mode = Mode::inference();
        let mut outputs: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        outputs[0] = Some(x.clone());
        for id in 1..=target {
            let (y, ..) = {
                let inputs: Vec<&Tensor> = self.nodes[id]
                    .inputs
                    .iter()
                    .map(|&i| outputs[i].as_ref().expect("input already released"))
                    .collect();
                self.eval_node(id, &inputs, &mode, false)
            };
            for &i in &self.nodes[id].inputs {
                remaining[i] -= 1;
                if remaining[i] == 0 && i != target {
                    outputs[i] = None;
                }
            }
            outputs[id] = Some(y);
        }
        Ok(outputs[target].take().expect("target evaluated"))
    }

    fn tensors(&self, id: usize) -> &[ParamTensor] {
        let g = self.nodes[id].group.expect("parameterized node");
        &self.groups[g].tensors
    }

    fn eval_node(&self, id: usize, inputs: &[&Tensor], mode: &Mode<'_>, keep: bool) -> (Tensor, Aux, Option<BnUpdate>) {
        let node = &self.nodes[id];
        let x = inputs.first().copied();
        match &node.op {
            Op::Input => unreachable!("input node is never evaluated"),
            Op::Conv2d {
                filters,
                kernel,
                stride,
                padding,
                bias,
            } => {
                let x = x.unwrap();
                let win = Window::new(x.height(), x.width(), *kernel, *stride, *padding).expect("validated at build");
                let t = self.tensors(id);
                let out = layers::conv_forward(x, &t[0].data, bias.then(|| t[1].data.as_slice()), &win, *filters, keep);
                (out.y, Aux::Conv(out.cols), None)
            }
            Op::BatchNorm {
                epsilon,
                momentum,
                scale,
            } => {
                let g = node.group.unwrap();
                let t = self.tensors(id);
                let off = usize::from(*scale);
                let gamma = scale.then(|| t[0].data.as_slice());
                let batch = mode.training && mode.is_trainable(g);
                let out = layers::bn_forward(
                    x.unwrap(),
                    gamma,
                    &t[off].data,
                    (&t[off + 1].data, &t[off + 2].data),
                    *epsilon,
                    batch,
                );
                let update = out.batch_stats.map(|(mean, var)| BnUpdate {
                    group: g,
                    mean,
                    var,
                    momentum: *momentum,
                });
                (out.y, Aux::Bn(out.cache), update)
            }
            Op::Relu => {
                let mut y = x.unwrap().clone();
                y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                (y, Aux::None, None)
            }
            Op::MaxPool { pool, stride, padding } => {
                let x = x.unwrap();
                let win = Window::new(x.height(), x.width(), *pool, *stride, *padding).expect("validated at build");
                let (y, arg) = layers::max_pool_forward(x, &win);
                (y, if keep { Aux::Pool(arg) } else { Aux::None }, None)
            }
            Op::AvgPool { pool, stride, padding } => {
                let x = x.unwrap();
                let win = Window::new(x.height(), x.width(), *pool, *stride, *padding).expect("validated at build");
                (layers::avg_pool_forward(x, &win), Aux::None, None)
            }
            Op::GlobalAvgPool => (layers::global_avg_pool_forward(x.unwrap()), Aux::None, None),
            Op::Flatten => {
                let x = x.unwrap();
                let y = x.clone().reshape([x.batch(), 1, 1, x.sample_len()]).expect("flatten");
                (y, Aux::None, None)
            }
            Op::Dense { units, bias } => {
                let t = self.tensors(id);
                let y = layers::dense_forward(x.unwrap(), &t[0].data, bias.then(|| t[1].data.as_slice()), *units);
                (y, Aux::None, None)
            }
            Op::Dropout { rate } => {
                let x = x.unwrap();
                if !mode.training || *rate <= 0.0 {
                    return (x.clone(), Aux::None, None);
                }
                let keep_p = 1.0 - rate;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mode.dropout_seed, id as u64));
                let mask: Vec<f32> = (0..x.data().len())
                    .map(|_| {
                        if rng.random::<f32>() < keep_p {
                            1.0 / keep_p
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let mut y = x.clone();
                y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                (y, Aux::Mask(mask), None)
            }
            Op::Add => {
                let mut y = inputs[0].clone();
                for t in &inputs[1..] {
                    y.add_assign(t);
                }
                (y, Aux::None, None)
            }
            Op::Concat => (layers::concat_forward(inputs), Aux::None, None),
        }
    }

    /// Backpropagates `grad_output` (gradient w.r.t. the network output).
    ///
    /// Parameter gradients are produced for groups flagged in `trainable`;
    /// `capture` additionally returns the gradient w.r.t. that node's output.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        grad_output: Tensor,
        trainable: &[bool],
        capture: Option<usize>,
    ) -> Result<Gradients> {
        let n = self.nodes.len();
        if pass.outputs.len() != n || trainable.len() != self.groups.len() {
            return Err(Error::State("forward pass does not belong to this graph".into()));
        }
        let mut requires = vec![false; n];
        for id in 1..n {
            let node = &self.nodes[id];
            requires[id] = node.group.is_some_and(|g| trainable[g])
                || capture == Some(id)
                || node.inputs.iter().any(|&i| requires[i]);
        }
        if capture == Some(0) {
            requires[0] = true;
        }
        let mut params: Vec<Option<Vec<Option<Vec<f32>>>>> = vec![None; self.groups.len()];
        let mut captured = None;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let last = self.output_node();
        if requires[last] {
            grads[last] = Some(grad_output);
        }
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            if capture == Some(id) {
                captured = Some(g.clone());
            }
            if id == 0 {
                continue;
            }
            let node = &self.nodes[id];
            let want_params = node.group.is_some_and(|gi| trainable[gi]);
            let want: Vec<bool> = node.inputs.iter().map(|&i| requires[i]).collect();
            let x = node.inputs.first().map(|&i| &pass.outputs[i]);
            let mut input_grads: Vec<Option<Tensor>> = vec![None; node.inputs.len()];
            match (&node.op, &pass.aux[id]) {
                (
                    Op::Conv2d {
                        filters,
                        kernel,
                        stride,
                        padding,
                        bias,
                    },
                    Aux::Conv(cols),
                ) => {
                    let x = x.unwrap();
                    let win = Window::new(x.height(), x.width(), *kernel, *stride, *padding).expect("validated");
                    let t = self.tensors(id);
                    let r = layers::conv_backward(
                        x,
                        cols.as_deref(),
                        &t[0].data,
                        *bias,
                        &win,
                        *filters,
                        &g,
                        want_params,
                        want[0],
                    );
                    if want_params {
                        let mut v = vec![r.kernel];
                        if *bias {
                            v.push(r.bias);
                        }
                        params[node.group.unwrap()] = Some(v);
                    }
                    input_grads[0] = r.input;
                }
                (Op::BatchNorm { scale, .. }, Aux::Bn(cache)) => {
                    let t = self.tensors(id);
                    let gamma = scale.then(|| t[0].data.as_slice());
                    let r = layers::bn_backward(&g, cache, gamma, want_params, want[0]);
                    if want_params && cache.xhat.is_some() {
                        let mut v = Vec::new();
                        if *scale {
                            v.push(r.gamma);
                        }
                        v.extend([r.beta, None, None]);
                        params[node.group.unwrap()] = Some(v);
                    }
                    input_grads[0] = r.input;
                }
                (Op::Relu, _) => {
                    if want[0] {
                        let y = &pass.outputs[id];
                        let mut d = g;
                        d.data_mut().iter_mut().zip(y.data()).for_each(|(v, &o)| {
                            if o <= 0.0 {
                                *v = 0.0
                            }
                        });
                        input_grads[0] = Some(d);
                    }
                }
                (Op::MaxPool { .. }, Aux::Pool(arg)) => {
                    if want[0] {
                        input_grads[0] = Some(layers::max_pool_backward(&g, arg, x.unwrap().shape()));
                    }
                }
                (Op::AvgPool { pool, stride, padding }, _) => {
                    if want[0] {
                        let x = x.unwrap();
                        let win = Window::new(x.height(), x.width(), *pool, *stride, *padding).expect("validated");
                        input_grads[0] = Some(layers::avg_pool_backward(&g, &win, x.shape()));
                    }
                }
                (Op::GlobalAvgPool, _) => {
                    if want[0] {
                        input_grads[0] = Some(layers::global_avg_pool_backward(&g, x.unwrap().shape()));
                    }
                }
                (Op::Flatten, _) => {
                    if want[0] {
                        input_grads[0] = Some(g.reshape(x.unwrap().shape())?);
                    }
                }
                (Op::Dense { bias, .. }, _) => {
                    let t = self.tensors(id);
                    let r = layers::dense_backward(x.unwrap(), &t[0].data, *bias, &g, want_params, want[0]);
                    if want_params {
                        let mut v = vec![r.kernel];
                        if *bias {
                            v.push(r.bias);
                        }
                        params[node.group.unwrap()] = Some(v);
                    }
                    input_grads[0] = r.input;
                }
                (Op::Dropout { .. }, aux) => {
                    if want[0] {
                        let mut d = g;
                        if let Aux::Mask(mask) = aux {
                            d.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                        }
                        input_grads[0] = Some(d);
                    }
                }
                (Op::Add, _) => {
                    for (slot, &w) in input_grads.iter_mut().zip(&want) {
                        if w {
                            *slot = Some(g.clone());
                        }
                    }
                }
                (Op::Concat, _) => {
                    let channels: Vec<usize> = node.inputs.iter().map(|&i| self.nodes[i].shape[2]).collect();
                    for (slot, (part, &w)) in input_grads
                        .iter_mut()
                        .zip(layers::concat_backward(&g, &channels).into_iter().zip(&want))
                    {
                        if w {
                            *slot = Some(part);
                        }
                    }
                }
                (op, _) => {
                    return Err(Error::State(format!(
                        "forward cache missing for {op:?} node `{}`",
                        node.name
                    )));
                }
            }
            for (&i, dg) in node.inputs.iter().zip(input_grads) {
                let Some(dg) = dg else { continue };
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&dg),
                    slot => *slot = Some(dg),
                }
            }
        }
        Ok(Gradients { params, captured })
    }
}

/// Forward-pass settings.
#[derive(Clone, Copy, Debug)]
pub struct Mode<'a> {
    /// Dropout active; trainable batch-norm layers use batch statistics.
    pub training: bool,
    /// Per-group trainability; `None` means every group is trainable.
    pub trainable: Option<&'a [bool]>,
    pub dropout_seed: u64,
}

impl Mode<'_> {
    pub fn inference() -> Mode<'static> {
        Mode {
            training: false,
            trainable: None,
            dropout_seed: 0,
        }
    }

    fn is_trainable(&self, group: usize) -> bool {
        self.trainable.is_none_or(|t| t[group])
    }
}

pub(crate) enum Aux {
    None,
    Conv(Option<Vec<f32>>),
    Bn(BnCache),
    Pool(Vec<u32>),
    Mask(Vec<f32>),
}

#[derive(Clone, Debug)]
pub struct BnUpdate {
    group: usize,
    mean: Vec<f32>,
    var: Vec<f32>,
    momentum: f32,
}

pub struct ForwardPass {
    outputs: Vec<Tensor>,
    aux: Vec<Aux>,
    pub(crate) bn_updates: Vec<BnUpdate>,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor {
        self.outputs.last().expect("non-empty graph")
    }

    pub fn activation(&self, node: usize) -> &Tensor {
        &self.outputs[node]
    }
}

/// Parameter gradients per group and tensor; `None` where nothing was computed.
pub struct Gradients {
    pub params: Vec<Option<Vec<Option<Vec<f32>>>>>,
    pub captured: Option<Tensor>,
}

/// Appends layers to a [`Graph`], initializing parameters deterministically
/// from `(seed, layer name)`.
pub struct Builder<'g> {
    graph: &'g mut Graph,
    seed: u64,
    section: Section,
}

impl Builder<'_> {
    fn shape(&self, x: usize) -> [usize; 3] {
        self.graph.nodes[x].shape
    }

    fn push(
        &mut self,
        name: &str,
        op: Op,
        inputs: Vec<usize>,
        shape: [usize; 3],
        tensors: Vec<ParamTensor>,
    ) -> Result<usize> {
        if self.graph.node_id(name).is_some() {
            return Err(Error::Argument(format!("duplicate layer name `{name}`")));
        }
        let group = if tensors.is_empty() {
            None
        } else {
            self.graph.groups.push(ParamGroup {
                name: name.to_string(),
                section: self.section,
                tensors,
            });
            Some(self.graph.groups.len() - 1)
        };
        self.graph.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs,
            shape,
            group,
            section: self.section,
        });
        Ok(self.graph.nodes.len() - 1)
    }

    fn tensor(&self, name: &str, shape: Vec<usize>, trainable: bool, fill: Fill) -> ParamTensor {
        let n: usize = shape.iter().product();
        let data = if !self.graph.materialized {
            Vec::new()
        } else {
            match fill {
                Fill::Const(v) => vec![v; n],
                Fill::GlorotUniform { fan_in, fan_out, salt } => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, salt));
                    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
                }
            }
        };
        ParamTensor {
            name: name.to_string(),
            shape,
            trainable,
            data,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        x: usize,
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        bias: bool,
    ) -> Result<usize> {
        let [h, w, c] = self.shape(x);
        if filters == 0 {
            return Err(Error::Argument(format!("`{name}` needs at least one filter")));
        }
        let win = Window::new(h, w, kernel, stride, padding)
            .ok_or_else(|| Error::Argument(format!("`{name}`: {h}x{w} input is too small for a {kernel:?} kernel")))?;
        let k = kernel.0 * kernel.1;
        let mut tensors = vec![self.tensor(
            "kernel",
            vec![kernel.0, kernel.1, c, filters],
            true,
            Fill::GlorotUniform {
                fan_in: k * c,
                fan_out: k * filters,
                salt: name_salt(name),
            },
        )];
        if bias {
            tensors.push(self.tensor("bias", vec![filters], true, Fill::Const(0.0)));
        }
        let op = Op::Conv2d {
            filters,
            kernel,
            stride,
            padding,
            bias,
        };
        self.push(name, op, vec![x], [win.out_h, win.out_w, filters], tensors)
    }

    pub fn batch_norm(&mut self, name: &str, x: usize, epsilon: f32, momentum: f32, scale: bool) -> Result<usize> {
        let shape = self.shape(x);
        let c = shape[2];
        let mut tensors = Vec::new();
        if scale {
            tensors.push(self.tensor("gamma", vec![c], true, Fill::Const(1.0)));
        }
        tensors.push(self.tensor("beta", vec![c], true, Fill::Const(0.0)));
        tensors.push(self.tensor("moving_mean", vec![c], false, Fill::Const(0.0)));
        tensors.push(self.tensor("moving_variance", vec![c], false, Fill::Const(1.0)));
        self.push(
            name,
            Op::BatchNorm {
                epsilon,
                momentum,
                scale,
            },
            vec![x],
            shape,
            tensors,
        )
    }

    pub fn relu(&mut self, name: &str, x: usize) -> Result<usize> {
        let shape = self.shape(x);
        self.push(name, Op::Relu, vec![x], shape, vec![])
    }

    pub fn max_pool(
        &mut self,
        name: &str,
        x: usize,
        pool: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<usize> {
        let [h, w, c] = self.shape(x);
        let win = Window::new(h, w, pool, stride, padding)
            .ok_or_else(|| Error::Argument(format!("`{name}`: {h}x{w} input is too small to pool")))?;
        self.push(
            name,
            Op::MaxPool { pool, stride, padding },
            vec![x],
            [win.out_h, win.out_w, c],
            vec![],
        )
    }

    pub fn avg_pool(
        &mut self,
        name: &str,
        x: usize,
        pool: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<usize> {
        let [h, w, c] = self.shape(x);
        let win = Window::new(h, w, pool, stride, padding)
            .ok_or_else(|| Error::Argument(format!("`{name}`: {h}x{w} input is too small to pool")))?;
        self.push(
            name,
            Op::AvgPool { pool, stride, padding },
            vec![x],
            [win.out_h, win.out_w, c],
            vec![],
        )
    }

    pub fn global_avg_pool(&mut self, name: &str, x: usize) -> Result<usize> {
        let c = self.shape(x)[2];
        self.push(name, Op::GlobalAvgPool, vec![x], [1, 1, c], vec![])
    }

    pub fn flatten(&mut self, name: &str, x: usize) -> Result<usize> {
        let [h, w, c] = self.shape(x);
        self.push(name, Op::Flatten, vec![x], [1, 1, h * w * c], vec![])
    }

    pub fn dense(&mut self, name: &str, x: usize, units: usize, bias: bool) -> Result<usize> {
        let [h, w, d] = self.shape(x);
        if h != 1 || w != 1 {
            return Err(Error::Argument(format!(
                "`{name}`: dense layers take flat inputs, got {h}x{w}x{d}"
            )));
        }
        if units == 0 {
            return Err(Error::Argument(format!("`{name}` needs at least one unit")));
        }
        let mut tensors = vec![self.tensor(
            "kernel",
            vec![d, units],
            true,
            Fill::GlorotUniform {
                fan_in: d,
                fan_out: units,
                salt: name_salt(name),
            },
        )];
        if bias {
            tensors.push(self.tensor("bias", vec![units], true, Fill::Const(0.0)));
        }
        self.push(name, Op::Dense { units, bias }, vec![x], [1, 1, units], tensors)
    }

    pub fn dropout(&mut self, name: &str, x: usize, rate: f32) -> Result<usize> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!("dropout rate {rate} outside [0, 1)")));
        }
        let shape = self.shape(x);
        self.push(name, Op::Dropout { rate }, vec![x], shape, vec![])
    }

    pub fn add(&mut self, name: &str, a: usize, b: usize) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Argument(format!("`{name}`: cannot add {sa:?} and {sb:?}")));
        }
        self.push(name, Op::Add, vec![a, b], sa, vec![])
    }

    pub fn concat(&mut self, name: &str, parts: &[usize]) -> Result<usize> {
        let first = self.shape(parts[0]);
        let mut c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..2] != first[..2] {
                return Err(Error::Argument(format!(
                    "`{name}`: spatial sizes differ ({s:?} vs {first:?})"
                )));
            }
            c += s[2];
        }
        self.push(name, Op::Concat, parts.to_vec(), [first[0], first[1], c], vec![])
    }
}

enum Fill {
    Const(f32),
    GlorotUniform { fan_in: usize, fan_out: usize, salt: u64 },
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net(seed: u64) -> Graph {
        let mut g = Graph::new([6, 6, 2], true);
        let mut b = g.builder(seed, Section::Backbone);
        let x = b.conv("c1", 0, 3, (3, 3), (1, 1), Padding::Same, true).unwrap();
        let x = b.batch_norm("bn1", x, 1e-3, 0.9, true).unwrap();
        let x = b.relu("r1", x).unwrap();
        let p = b.max_pool("p1", x, (2, 2), (2, 2), Padding::Valid).unwrap();
        let q = b.avg_pool("p2", x, (2, 2), (2, 2), Padding::Valid).unwrap();
        let x = b.add("sum", p, q).unwrap();
        let y = b.conv("c2", x, 2, (1, 1), (1, 1), Padding::Valid, false).unwrap();
        let x = b.concat("cat", &[x, y]).unwrap();
        let x = b.global_avg_pool("gap", x).unwrap();
        let mut h = g.builder(seed, Section::Head);
        h.dense("out", x, 2, true).unwrap();
        g
    }

    fn input() -> Tensor {
        Tensor::from_vec(
            [3, 6, 6, 2],
            (0..216).map(|i| ((i * 37 % 23) as f32 / 23.0) - 0.4).collect(),
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(tiny_net(5).groups(), tiny_net(5).groups());
        assert_ne!(tiny_net(5).groups(), tiny_net(6).groups());
    }

    #[test]
    fn shape_only_graph_counts_without_storage() {
        let mut g = Graph::new([6, 6, 2], false);
        let mut b = g.builder(0, Section::Backbone);
        b.conv("c", 0, 4, (3, 3), (1, 1), Padding::Same, true).unwrap();
        assert_eq!(g.param_count(), 3 * 3 * 2 * 4 + 4);
        assert!(g.groups()[0].tensors[0].data.is_empty());
        assert!(g.infer(&Tensor::zeros([1, 6, 6, 2]), None).is_err());
    }

    #[test]
    fn infer_matches_inference_forward() {
        let g = tiny_net(1);
        let x = input();
        let a = g.infer(&x, None).unwrap();
        let b = g.forward(&x, &Mode::inference()).unwrap();
        assert_eq!(&a, b.output());
    }

    /// Whole-graph finite-difference check through BN (batch statistics),
    /// pooling, residual add and concat.
    #[test]
    fn graph_gradients_match_finite_differences() {
        let g = tiny_net(3);
        let x = input();
        let trainable = vec![true; g.groups().len()];
        let mode = Mode {
            training: true,
            trainable: Some(&trainable),
            dropout_seed: 0,
        };
        let probe = [0.7f32, -1.3, 0.2, 0.9, -0.4, 1.1];
        let loss = |g: &Graph| -> f64 {
            let out = g.forward(&x, &mode).unwrap();
            out.output()
                .data()
                .iter()
                .zip(&probe)
                .map(|(a, b)| (a * b) as f64)
                .sum()
        };
        let pass = g.forward(&x, &mode).unwrap();
        let dy = Tensor::from_rows(3, 2, probe.to_vec()).unwrap();
        let grads = g.backward(&pass, dy, &trainable, None).unwrap();
        let eps = 5e-3f32;
        for (gi, ti, idx) in [
            (0usize, 0usize, 4usize),
            (0, 1, 1),
            (1, 0, 2),
            (1, 1, 0),
            (2, 0, 3),
            (3, 0, 5),
            (3, 1, 1),
        ] {
            let mut gp = g.clone();
            gp.groups_mut()[gi].tensors[ti].data[idx] += eps;
            let mut gm = g.clone();
            gm.groups_mut()[gi].tensors[ti].data[idx] -= eps;
            let fd = (loss(&gp) - loss(&gm)) / (2.0 * eps as f64);
            let an = grads.params[gi].as_ref().unwrap()[ti].as_ref().unwrap()[idx] as f64;
            assert!(
                (fd - an).abs() < 2e-2 * (1.0 + fd.abs()),
                "group {gi} tensor {ti}[{idx}]: fd {fd} vs {an}"
            );
        }
    }

    #[test]
    fn frozen_groups_get_no_gradient_and_capture_works() {
        let g = tiny_net(2);
        let x = input();
        let mut trainable = vec![false; g.groups().len()];
        *trainable.last_mut().unwrap() = true;
        let pass = g
            .forward(
                &x,
                &Mode {
                    training: true,
                    trainable: Some(&trainable),
                    dropout_seed: 0,
                },
            )
            .unwrap();
        let dy = Tensor::from_rows(3, 2, vec![1.0; 6]).unwrap();
        let cat = g.node_id("cat").unwrap();
        let grads = g.backward(&pass, dy, &trainable, Some(cat)).unwrap();
        assert!(grads.params[..3].iter().all(Option::is_none));
        assert!(grads.params[3].is_some());
        assert_eq!(grads.captured.unwrap().shape(), pass.activation(cat).shape());
        // frozen batch norm layers ran on running statistics
        assert!(pass.bn_updates.is_empty());
    }
}
