//! Central finite-difference verification of analytic gradients.

use rand::Rng as _;

use crate::consolidation::{self, ConsolidationConfig};
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::nn::{self, BoundNetwork, InputShape, LayerKind, LayerSpec, NetworkSpec};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::transfer::{self, BoundCell, BoundLink, GateEmbedding, LongSource};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub rel_tol: f64,
    /// Absolute differences below this always pass.
    pub abs_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Largest `|a − n| / max(|a|, |n|)` among entries whose magnitude is above
    /// the absolute floor.
    pub max_rel_error: f64,
    pub failures: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl GradCheck {
    /// Compares `build`'s analytic gradient with respect to every input against
    /// central differences. `build` receives the input nodes and returns a
    /// scalar loss node.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], build: F) -> Result<GradReport>
    where
        F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
    {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        g.backward(loss)?;
        let analytic: Vec<Tensor<f64>> = ids
            .iter()
            .zip(inputs)
            .map(|(&id, t)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();

        let eval = |values: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = values.iter().map(|t| g.constant(t.clone())).collect();
            let loss = build(&mut g, &ids)?;
            g.value(loss).item()
        };

        let mut report = GradReport::default();
        let mut work = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            for j in 0..input.len() {
                let orig = input.data()[j];
                work[i].data_mut()[j] = orig + self.eps;
                let up = eval(&work)?;
                work[i].data_mut()[j] = orig - self.eps;
                let down = eval(&work)?;
                work[i].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * self.eps);
                let a = analytic[i].data()[j];
                let diff = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                report.checked += 1;
                if scale > self.abs_floor {
                    report.max_rel_error = report.max_rel_error.max(diff / scale);
                }
                if diff > self.abs_floor.max(self.rel_tol * scale) {
                    report.failures.push(Mismatch {
                        input: i,
                        index: j,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
        Ok(report)
    }
}

/// Outcome of one family of randomized gradient checks.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.instances > 0
    }
}

pub const SUITE: [&str; 8] = [
    "linear",
    "conv_block",
    "head",
    "eca",
    "transfer_net",
    "loss_dis_long",
    "loss_dis_short",
    "loss_total",
];

fn uniform(r: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect())
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry gets its own weight.
fn weighted_sum(g: &mut Graph<f64>, out: NodeId, r: &mut Rng) -> Result<NodeId> {
    let w = g.constant(uniform(r, g.shape(out), 1.0));
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn mlp_or_conv(r: &mut Rng, conv: bool, hidden: usize, head: usize) -> NetworkSpec {
    if conv {
        let input = InputShape::Image { channels: 2, height: 4, width: 4 };
        let padding = r.random_range(0..2usize);
        NetworkSpec {
            input,
            layers: vec![LayerSpec { kind: LayerKind::ConvBlock { kernel: 3, padding }, input: 2, output: hidden }],
            head_dim: head,
        }
    } else {
        NetworkSpec {
            input: InputShape::Vector { dim: 4 },
            layers: vec![LayerSpec { kind: LayerKind::Linear, input: 4, output: hidden }],
            head_dim: head,
        }
    }
}

fn run_case(name: &str, r: &mut Rng, check: &GradCheck) -> Result<GradReport> {
    let batch = r.random_range(2..4usize);
    match name {
        "linear" => {
            let (i, o) = (r.random_range(1..5usize), r.random_range(1..5usize));
            let layer = LayerSpec { kind: LayerKind::Linear, input: i, output: o };
            let inputs = [uniform(r, &[batch, i], 1.0), uniform(r, &[o, i], 1.0), uniform(r, &[o], 0.5)];
            let wr = r.clone();
            check.run(&inputs, |g, ids| {
                let h = nn::layer_forward(g, &layer, (ids[1], ids[2]), ids[0])?;
                weighted_sum(g, h, &mut wr.clone())
            })
        }
        "conv_block" => {
            let (i, o, k) = (r.random_range(1..3usize), r.random_range(1..3usize), [1usize, 3][r.random_range(0..2)]);
            let padding = r.random_range(0..=k / 2);
            let layer = LayerSpec { kind: LayerKind::ConvBlock { kernel: k, padding }, input: i, output: o };
            let inputs = [uniform(r, &[batch, i, 4, 4], 1.0), uniform(r, &[o, i, k, k], 1.0), uniform(r, &[o], 0.5)];
            let wr = r.clone();
            check.run(&inputs, |g, ids| {
                let h = nn::layer_forward(g, &layer, (ids[1], ids[2]), ids[0])?;
                weighted_sum(g, h, &mut wr.clone())
            })
        }
        "head" => {
            let (c, o) = (r.random_range(1..4usize), r.random_range(1..4usize));
            let inputs = [uniform(r, &[batch, c, 3, 3], 1.0), uniform(r, &[o, c], 1.0), uniform(r, &[o], 0.5)];
            let wr = r.clone();
            check.run(&inputs, |g, ids| {
                let h = nn::head_forward(g, (ids[1], ids[2]), ids[0])?;
                weighted_sum(g, h, &mut wr.clone())
            })
        }
        "eca" => {
            let c = r.random_range(1..6usize);
            let k = nn::EcaParams::<f64>::adaptive_kernel_size(c);
            let shape = if r.random_bool(0.5) { vec![batch, c] } else { vec![batch, c, 2, 3] };
            let inputs = [uniform(r, &shape, 1.0), uniform(r, &[k], 1.0)];
            let wr = r.clone();
            check.run(&inputs, |g, ids| {
                let h = nn::eca_forward(g, ids[1], ids[0])?;
                weighted_sum(g, h, &mut wr.clone())
            })
        }
        "transfer_net" => {
            let conv = r.random_bool(0.5);
            let diagonal = r.random_bool(0.5);
            let short_ch = r.random_range(2..4usize);
            let long_ch = if diagonal { short_ch } else { r.random_range(2..4usize) };
            let classes = r.random_range(2..4usize);
            let short = mlp_or_conv(r, conv, short_ch, classes);
            let mut long = short.clone();
            long.layers[0].output = long_ch;
            let embedding = if diagonal { GateEmbedding::Diagonal } else { GateEmbedding::Full };
            let gate_shape = |c: usize| if diagonal { vec![short_ch] } else { vec![short_ch, c] };
            let mut xs = vec![batch];
            xs.extend(short.input.dims());
            let long_params: Vec<Tensor<f64>> = {
                let l = &long.layers[0];
                let w_shape = match l.kind {
                    LayerKind::Linear => vec![long_ch, l.input],
                    LayerKind::ConvBlock { kernel, .. } => vec![long_ch, l.input, kernel, kernel],
                };
                vec![uniform(r, &w_shape, 1.0), uniform(r, &[long_ch], 0.5), uniform(r, &[classes, long_ch], 1.0), uniform(r, &[classes], 0.5)]
            };
            let sl = &short.layers[0];
            let w_shape = match sl.kind {
                LayerKind::Linear => vec![short_ch, sl.input],
                LayerKind::ConvBlock { kernel, .. } => vec![short_ch, sl.input, kernel, kernel],
            };
            let k = nn::EcaParams::<f64>::adaptive_kernel_size(long_ch);
            let inputs = [
                uniform(r, &xs, 1.0),
                uniform(r, &w_shape, 1.0),
                uniform(r, &[short_ch], 0.5),
                uniform(r, &[classes, short_ch], 1.0),
                uniform(r, &[classes], 0.5),
                uniform(r, &[k], 1.0),
                uniform(r, &[short_ch, long_ch], 1.0),
                uniform(r, &gate_shape(long_ch), 1.0),
                uniform(r, &gate_shape(short_ch), 1.0),
                uniform(r, &[short_ch], 0.5),
            ];
            let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes)).collect();
            check.run(&inputs, |g, ids| {
                let lp: Vec<NodeId> = long_params.iter().map(|t| g.constant(t.clone())).collect();
                let long_bound = BoundNetwork { layers: vec![(lp[0], lp[1])], head: (lp[2], lp[3]) };
                let short_bound = BoundNetwork { layers: vec![(ids[1], ids[2])], head: (ids[3], ids[4]) };
                let link = BoundLink::Cell(BoundCell {
                    eca: ids[5],
                    projection: ids[6],
                    gate_long: ids[7],
                    gate_short: ids[8],
                    gate_bias: ids[9],
                    embedding,
                });
                let source = LongSource { spec: &long, bound: &long_bound };
                let (logits, _) = transfer::transfer_forward(g, &short, &short_bound, Some(source), &[link], ids[0], false)?;
                consolidation::hard_cross_entropy(g, logits, &labels)
            })
        }
        "loss_dis_long" | "loss_dis_short" | "loss_total" => {
            let old = r.random_range(1..4usize);
            let fresh = r.random_range(1..4usize);
            let cfg = ConsolidationConfig {
                temperature: r.random_range(0.5..4.0),
                beta: r.random_range(0.0..=1.0),
            };
            let inputs = [
                uniform(r, &[batch, old + fresh], 2.0),
                uniform(r, &[batch, old], 2.0),
                uniform(r, &[batch, fresh], 2.0),
            ];
            let labels: Vec<usize> = (0..batch).map(|_| old + r.random_range(0..fresh)).collect();
            check.run(&inputs, |g, ids| match name {
                "loss_dis_long" => consolidation::loss_dis_long(g, ids[0], ids[1], &cfg),
                "loss_dis_short" => consolidation::loss_dis_short(g, ids[0], ids[2], &labels, &cfg),
                _ => Ok(consolidation::loss_total(g, ids[0], ids[1], ids[2], &labels, &cfg)?.total),
            })
        }
        other => Err(crate::error::Error::invalid(format!("unknown gradient check family {other:?}"))),
    }
}

/// Runs every family in [`SUITE`] on `instances` random instances, in f64.
/// Teachers and long-term parameters are checked as inputs too, except in
/// `transfer_net` where the long-term network is frozen.
pub fn standard_suite(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let check = GradCheck::default();
    SUITE
        .iter()
        .map(|&name| {
            let mut entry = SuiteEntry { name, instances, checked: 0, max_rel_error: 0.0, failures: 0 };
            for i in 0..instances {
                let mut r = rng::stream(seed, &[rng::tag(name), i as u64]);
                let report = run_case(name, &mut r, &check)?;
                entry.checked += report.checked;
                entry.max_rel_error = entry.max_rel_error.max(report.max_rel_error);
                entry.failures += report.failures.len();
            }
            Ok(entry)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_a_correct_gradient() {
        let x = Tensor::from_f64([3], &[0.3, -0.7, 1.1]).unwrap();
        let ok = GradCheck::default()
            .run(std::slice::from_ref(&x), |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                g.sum(sq)
            })
            .unwrap();
        assert!(ok.passed(), "{ok:?}");
        assert_eq!(ok.checked, 3);
    }

    #[test]
    fn flags_a_gradient_that_skips_a_path() {
        // The second factor is a constant copy of x, so the analytic gradient
        // is x instead of 2x.
        let x = Tensor::from_f64([2], &[0.3, -0.7]).unwrap();
        let report = GradCheck::default()
            .run(std::slice::from_ref(&x), |g, ids| {
                let copy = g.constant(g.value(ids[0]).clone());
                let sq = g.mul(ids[0], copy)?;
                g.sum(sq)
            })
            .unwrap();
        assert_eq!(report.failures.len(), 2);
    }
}
