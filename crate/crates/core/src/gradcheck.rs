//! Central finite-difference check of tape gradients. Both the analytic
//! gradient and the differences are taken on an `f64` tape, so the check
//! measures the backward rules rather than single-precision rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::head::{head_forward, joint_loss, BranchConfig, HeadConfig, HeadParams};
use crate::nn::{mix_seed, Parameterized};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let den = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / den
}

/// Compares the tape gradient of `loss` with central differences for every
/// coordinate of every parameter of `model`.
pub fn check_params<M, F>(model: &mut M, loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: Fn(&M, &mut Graph<f64>) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::<f64>::default();
        let root = loss(model, &mut g)?;
        g.backward(root)?;
        model.named_params().iter().map(|(_, t)| g.param_grad(t)).collect()
    };
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::<f64>::default();
        let root = loss(m, &mut g)?;
        Ok(g.value(root)[0])
    };
    let h = opts.step as f32;
    let mut params = Vec::with_capacity(names.len());
    let mut coordinates = 0;
    for (pi, name) in names.into_iter().enumerate() {
        let len = analytic[pi].len();
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for j in 0..len {
            let orig = model.params_mut()[pi].data()[j];
            model.params_mut()[pi].data_mut()[j] = orig + h;
            let plus = eval(model)?;
            model.params_mut()[pi].data_mut()[j] = orig - h;
            let minus = eval(model)?;
            model.params_mut()[pi].data_mut()[j] = orig;
            // parameters are stored in f32, so use the step actually applied
            let step = (orig + h) as f64 - (orig - h) as f64;
            let numeric = (plus - minus) / step;
            let a = analytic[pi][j];
            max_rel = max_rel.max(relative_error(a, numeric, opts.floor));
            max_abs = max_abs.max((a - numeric).abs());
        }
        coordinates += len;
        let grad_norm = analytic[pi].iter().map(|&v| v * v).sum::<f64>().sqrt();
        params.push(ParamReport {
            name,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            grad_norm,
        });
    }
    Ok(GradCheckReport { params, coordinates })
}

/// Side of the feature map in [`head_instance_check`].
pub const INSTANCE_SIDE: usize = 6;
/// Channel width of the feature map in [`head_instance_check`].
pub const INSTANCE_CHANNELS: usize = 32;
/// Class count of [`head_instance_check`].
pub const INSTANCE_CLASSES: usize = 4;

/// Checks the joint loss of a randomly initialized dual-branch head
/// (small `(1,4,2)`, large `(2,2,2)`) on a random `6×6×32` map and target,
/// in training mode with dropout masks fixed by `seed`.
pub fn head_instance_check(seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = HeadConfig::new(BranchConfig::new(1, 4, 2), BranchConfig::new(2, 2, 2), INSTANCE_CLASSES);
    let mut head = HeadParams::init(cfg, INSTANCE_CHANNELS, &mut rng);
    let n = INSTANCE_SIDE * INSTANCE_SIDE;
    let map = Tensor::uniform(&[n, INSTANCE_CHANNELS], 1.0, &mut rng);
    let target = rng.gen_range(0..INSTANCE_CLASSES);
    let dropout_seed = mix_seed(seed, 1);
    check_params(
        &mut head,
        |h, g| {
            let m = g.input(&map);
            let out = head_forward(g, m, INSTANCE_SIDE, INSTANCE_SIDE, h, true, dropout_seed)?;
            joint_loss(g, target, &out.logits())
        },
        opts,
    )
}
