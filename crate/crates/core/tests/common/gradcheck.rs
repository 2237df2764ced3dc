//! Finite-difference check of the full training loss: transform the anchor,
//! the positive and three negatives, apply the margin loss, and compare every
//! parameter gradient with central differences.

use nbalign::model::{backward_into, forward, init_params, ModelConfig, ModelParams};
use nbalign::numerics::{finite_diff_grad, Mode, RngState};
use nbalign::objective::margin_loss;

pub const REL_TOL: f64 = 1e-4;
/// Below this absolute gap a coordinate passes regardless of relative error:
/// central differences at `H` carry roughly 1e-11 of rounding noise, which
/// dominates the ratio when the true gradient is itself near zero.
pub const ABS_FLOOR: f64 = 1e-8;
pub const H: f64 = 1e-5;
pub const MARGIN: f64 = 0.2;
pub const NEGATIVES: usize = 3;

pub struct GradReport {
    pub config: ModelConfig,
    pub params: usize,
    /// Worst relative error over coordinates with |numeric| > 1e-6.
    pub max_rel: f64,
    /// Coordinates whose numeric gradient exceeds the floor.
    pub nonzero: usize,
    pub failures: Vec<String>,
}

/// `n` tiny configurations with `d <= 16` and `model_dim <= 8`, dropout off.
pub fn tiny_configs(n: usize, seed: u64) -> Vec<ModelConfig> {
    let mut rng = RngState::new(seed, 4);
    // (heads, head_dim) pairs exercising both the unrolled and generic
    // attention kernels
    let shapes = [(1, 4), (2, 4), (2, 3), (1, 8), (2, 2), (4, 2), (1, 5)];
    (0..n)
        .map(|i| {
            let (heads, head_dim) = shapes[i % shapes.len()];
            ModelConfig {
                d: 4 + rng.below(13) as usize,
                model_dim: heads * head_dim,
                heads,
                head_dim,
                layers: 1 + (i % 2),
                ffn_dim: 2 + rng.below(11) as usize,
                mlp_hidden: 2 + rng.below(11) as usize,
                dropout_p: 0.0,
            }
        })
        .collect()
}

/// Initialized parameters pushed off the structured init (unit gains, zero
/// biases) so no ReLU sits on its kink.
pub fn jittered_params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut params = init_params::<f64>(cfg, &mut RngState::new(seed, 0)).unwrap();
    let mut rng = RngState::new(seed, 4);
    let flat: Vec<f64> = params.flatten().into_iter().map(|v| v + 0.2 * rng.normal()).collect();
    params.assign_flat(&flat).unwrap();
    params
}

fn pipeline_loss(params: &ModelParams<f64>, inputs: &[Vec<f64>]) -> f64 {
    let z: Vec<Vec<f64>> = inputs
        .iter()
        .map(|m| forward(params, m, Mode::Eval, None).unwrap().0)
        .collect();
    let negs: Vec<&[f64]> = z[2..].iter().map(|v| v.as_slice()).collect();
    margin_loss(&z[0], &z[1], &negs, MARGIN).unwrap().loss
}

fn analytic(params: &ModelParams<f64>, inputs: &[Vec<f64>]) -> ModelParams<f64> {
    let mut rng = RngState::new(0, 3);
    let runs: Vec<_> = inputs
        .iter()
        .map(|m| {
            let (z, trace) = forward(params, m, Mode::Train, Some(&mut rng)).unwrap();
            (z, trace.unwrap())
        })
        .collect();
    let negs: Vec<&[f64]> = runs[2..].iter().map(|(z, _)| z.as_slice()).collect();
    let out = margin_loss(&runs[0].0, &runs[1].0, &negs, MARGIN).unwrap();
    let mut dz = vec![out.d_anchor, out.d_positive];
    dz.extend(out.d_negatives);
    let mut grads = params.zeros_like();
    for ((_, trace), g) in runs.iter().zip(&dz) {
        backward_into(params, trace, g, &mut grads).unwrap();
    }
    grads
}

pub fn check_config(cfg: &ModelConfig, seed: u64) -> GradReport {
    let params = jittered_params(cfg, seed);
    let mut rng = RngState::new(seed, 4);
    let inputs: Vec<Vec<f64>> = (0..2 + NEGATIVES)
        .map(|_| (0..cfg.d).map(|_| rng.normal()).collect())
        .collect();

    let grads = analytic(&params, &inputs).flatten();
    let theta = params.flatten();
    let mut probe = params.clone();
    let fd = finite_diff_grad(
        |t| {
            probe.assign_flat(t).unwrap();
            pipeline_loss(&probe, &inputs)
        },
        &theta,
        H,
    )
    .unwrap();

    let names = flat_names(&params);
    let mut max_rel = 0.0f64;
    let mut failures = Vec::new();
    let nonzero = fd.iter().filter(|g| g.abs() > ABS_FLOOR).count();
    for (i, (a, n)) in grads.iter().zip(&fd).enumerate() {
        let gap = (a - n).abs();
        let rel = gap / a.abs().max(n.abs()).max(f64::MIN_POSITIVE);
        if n.abs() > 1e-6 {
            max_rel = max_rel.max(rel);
        }
        if gap > ABS_FLOOR && rel > REL_TOL {
            failures.push(format!("{}: analytic {a:.6e} vs numeric {n:.6e}", names[i]));
        }
    }
    GradReport {
        config: cfg.clone(),
        params: theta.len(),
        max_rel,
        nonzero,
        failures,
    }
}

/// `tensor[index]` label for every flattened coordinate.
fn flat_names(params: &ModelParams<f64>) -> Vec<String> {
    params
        .named_tensors()
        .into_iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |j| format!("{name}[{j}]")))
        .collect()
}
