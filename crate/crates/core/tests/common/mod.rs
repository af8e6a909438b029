//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use damage_transfer::data::TaskKind;
use damage_transfer::nn::{Graph, Padding, Section};
use damage_transfer::zoo::{Family, HeadInfo, ModelGraph, OutputActivation};
use damage_transfer::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Wraps a graph whose output node is the logit layer.
pub fn model_from_graph(graph: Graph, input: (usize, usize), outputs: usize) -> ModelGraph {
    ModelGraph {
        family: Family::CbrTiny,
        input_size: input,
        graph,
        head: Some(HeadInfo {
            output_dim: outputs,
            activation: if outputs == 1 {
                OutputActivation::SigmoidPerLabel
            } else {
                OutputActivation::Softmax
            },
            dropout_rate: 0.0,
            filters: 0,
            class_names: (0..outputs.max(2)).map(|i| format!("c{i}")).collect(),
            task_kind: TaskKind::Binary,
        }),
        lineage: None,
        freeze: None,
    }
}

/// input `[h, w, c]` -> conv (3x3 same, no bias, `k` filters) -> global
/// average pool -> dense (`units`, bias). No nonlinearity anywhere.
pub struct LinearCam {
    pub model: ModelGraph,
    pub kernel: Vec<f32>,
    pub dense: Vec<f32>,
    pub c: usize,
    pub k: usize,
    pub units: usize,
}

pub fn linear_cam(h: usize, w: usize, c: usize, k: usize, units: usize, seed: u64) -> LinearCam {
    let mut g = Graph::new([h, w, c], true);
    {
        let mut b = g.builder(seed, Section::Backbone);
        let x = b.conv("conv", 0, k, (3, 3), (1, 1), Padding::Same, false).unwrap();
        let x = b.global_avg_pool("gap", x).unwrap();
        b.dense("logits", x, units, true).unwrap();
    }
    let mut r = rng(seed);
    let kernel: Vec<f32> = (0..9 * c * k).map(|_| r.random_range(-1.0..1.0)).collect();
    let dense: Vec<f32> = (0..k * units).map(|_| r.random_range(-1.0..1.0)).collect();
    let conv_g = g.group_id("conv").unwrap();
    let dense_g = g.group_id("logits").unwrap();
    g.groups_mut()[conv_g].tensors[0].data = kernel.clone();
    g.groups_mut()[dense_g].tensors[0].data = dense.clone();
    g.groups_mut()[dense_g].tensors[1].data = vec![0.3; units];
    LinearCam {
        model: model_from_graph(g, (h, w), units),
        kernel,
        dense,
        c,
        k,
        units,
    }
}

impl LinearCam {
    /// Conv activations by direct summation, `[h, w, k]` row-major.
    pub fn activations(&self, x: &Tensor) -> Vec<f64> {
        let (h, w, c, k) = (x.height(), x.width(), self.c, self.k);
        let xs = x.data();
        let mut a = vec![0.0f64; h * w * k];
        for oy in 0..h {
            for ox in 0..w {
                for f in 0..k {
                    let mut s = 0.0f64;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ch in 0..c {
                                let xv = xs[(iy as usize * w + ix as usize) * c + ch] as f64;
                                let kv = self.kernel[((ky * 3 + kx) * c + ch) * k + f] as f64;
                                s += xv * kv;
                            }
                        }
                    }
                    a[(oy * w + ox) * k + f] = s;
                }
            }
        }
        a
    }

    /// Closed form: d(logit_j)/dA_ijk = W[k, j] / (h w), so alpha_k is that
    /// constant and the raw map is ReLU(sum_k alpha_k A_k).
    pub fn oracle(&self, x: &Tensor, class: usize) -> Vec<f64> {
        let (h, w) = (x.height(), x.width());
        let a = self.activations(x);
        let alpha: Vec<f64> = (0..self.k)
            .map(|f| self.dense[f * self.units + class] as f64 / (h * w) as f64)
            .collect();
        a.chunks(self.k)
            .map(|px| px.iter().zip(&alpha).map(|(v, al)| v * al).sum::<f64>().max(0.0))
            .collect()
    }
}

pub fn random_input(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_vec(
        [1, h, w, c],
        (0..h * w * c).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// A small random conv net ending in a dense logit layer named `logits`;
/// returns the model and the name of a randomly chosen feature-map layer.
pub fn random_small_model(seed: u64) -> (ModelGraph, String) {
    let mut r = rng(seed);
    let h = r.random_range(4..=10);
    let w = r.random_range(4..=10);
    let c = r.random_range(1..=3);
    let units = r.random_range(1..=4);
    let mut g = Graph::new([h, w, c], true);
    let mut layers = Vec::new();
    {
        let mut b = g.builder(seed, Section::Backbone);
        let mut x = 0;
        let blocks = r.random_range(1..=3);
        for i in 0..blocks {
            let f = r.random_range(2..=6);
            x = b
                .conv(&format!("conv{i}"), x, f, (3, 3), (1, 1), Padding::Same, true)
                .unwrap();
            layers.push(format!("conv{i}"));
            x = b.relu(&format!("relu{i}"), x).unwrap();
            layers.push(format!("relu{i}"));
            if r.random_bool(0.4) {
                x = b
                    .max_pool(&format!("pool{i}"), x, (2, 2), (2, 2), Padding::Same)
                    .unwrap();
                layers.push(format!("pool{i}"));
            }
        }
        let x = b.global_avg_pool("gap", x).unwrap();
        b.dense("logits", x, units, true).unwrap();
    }
    let layer = layers[r.random_range(0..layers.len())].clone();
    (model_from_graph(g, (h, w), units), layer)
}

pub fn scale_logit_kernel(model: &mut ModelGraph, factor: f32) {
    let g = model.graph.group_id("logits").unwrap();
    for v in &mut model.graph.groups_mut()[g].tensors[0].data {
        *v *= factor;
    }
}

use std::collections::BTreeMap;

use damage_transfer::eval::{RunResult, AUC_ROC};
use damage_transfer::runner::{CellExecutor, CellJob, ExperimentSpec, RunOutput};

/// Grid spec over toy datasets `toy_a`..; paths are relative to `out`.
pub fn toy_spec(out: &std::path::Path, datasets: &[&str], strategies: &[&str], runs: usize) -> ExperimentSpec {
    let mut text = format!(
        "name = \"toy\"\noutput_dir = {out:?}\n[grid]\ndatasets = {datasets:?}\nbackbones = [\"cbr_tiny\"]\nstrategies = {strategies:?}\n[train]\nepochs = 1\nbatch_size = 16\nruns = {runs}\n"
    );
    for (i, d) in datasets.iter().enumerate() {
        text.push_str(&format!(
            "[[dataset]]\nname = {d:?}\n[dataset.toy]\nheight = 16\nwidth = 16\ntask_kind = \"binary\"\nitems_per_class = 10\nseed = {}\ndomain = {i}\n",
            i + 1
        ));
    }
    ExperimentSpec::from_toml(&text).unwrap()
}

/// Executor that fabricates deterministic metrics and counts its calls.
#[derive(Default)]
pub struct FakeExecutor {
    pub calls: Vec<(String, u64)>,
    /// Panic (simulating a crash) once this many runs have completed.
    pub crash_after: Option<usize>,
    /// Cells that always fail.
    pub failing: Vec<String>,
}

impl CellExecutor for FakeExecutor {
    fn execute(&mut self, job: &CellJob, seed: u64) -> damage_transfer::Result<RunOutput> {
        if self.crash_after == Some(self.calls.len()) {
            panic!("simulated crash");
        }
        self.calls.push((job.key.clone(), seed));
        if self.failing.contains(&job.key) {
            return Err(damage_transfer::Error::Resolution {
                what: "weights".into(),
                hint: "install them".into(),
            });
        }
        let h = job
            .key
            .bytes()
            .fold(seed, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
        let mut metrics = BTreeMap::new();
        metrics.insert(AUC_ROC.to_string(), 0.5 + (h % 500) as f64 / 1000.0);
        Ok(RunOutput {
            result: RunResult {
                strategy: job.strategy.to_string(),
                dataset: job.dataset.clone(),
                seed,
                scores: vec![(h % 97) as f32 / 97.0],
                metrics,
            },
            history: None,
            model: None,
        })
    }
}
