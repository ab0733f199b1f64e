//! Central finite-difference checks of tape gradients in 64-bit.
//!
//! Every check reduces the output `y` to the scalar `Σ y ⊙ R` with a fixed
//! random `R`, so all output entries contribute.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_grad, grad_rel_error, Tape, Var};
use crate::error::TensorError;
use crate::swin3d::model::{superformer_forward, ModelError};
use crate::swin3d::{ModelConfig, ParamStore};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Builds `Σ y ⊙ R` on top of `y`.
fn project(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var, TensorError> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv)?;
    tape.sum(p)
}

fn projection_for(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Relative error of the gradient of each input of `f`.
pub fn check_op<F>(f: F, inputs: &[Tensor<f64>], seed: u64) -> Result<Vec<f64>, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let r = projection_for(tape.shape(y), seed);
    let loss = project(&mut tape, y, &r)?;
    let grads = tape.backward(loss)?;
    let mut errors = Vec::with_capacity(inputs.len());
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let eval = |x: &Tensor<f64>| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, inp)| t.constant(if j == k { x.clone() } else { inp.clone() }))
                .collect();
            let y = f(&mut t, &vs).expect("op succeeded once");
            let l = project(&mut t, y, &r).expect("projection");
            t.value(l).item()
        };
        let numeric = finite_diff_grad(eval, &inputs[k], FD_STEP);
        errors.push(grad_rel_error(&analytic, &numeric));
    }
    Ok(errors)
}

/// Per-tensor gradient error of a whole network.
#[derive(Clone, Debug)]
pub struct ParamGradError {
    pub name: String,
    pub rel_error: f64,
}

/// Checks `samples` randomly chosen entries of every parameter tensor of a
/// network on a random input of `dims`. Parameters are perturbed away from
/// their initialization so no gradient is trivially zero. The error scale
/// of a tensor is the largest analytic gradient over the whole tensor.
pub fn check_model(
    cfg: &ModelConfig,
    dims: [usize; 3],
    seed: u64,
    samples: usize,
) -> Result<Vec<ParamGradError>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::<f64>::init(cfg, seed);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    let input = Tensor::<f64>::uniform(&[1, dims[0], dims[1], dims[2]], 0.0, 1.0, &mut rng);
    let r = projection_for(&[1, dims[0], dims[1], dims[2]], seed);

    let loss_of = |p: &ParamStore<f64>| -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let x = tape.constant(input.clone());
        let y = superformer_forward(&mut tape, x, &bound, cfg)?;
        let l = project(&mut tape, y, &r)?;
        Ok(tape.value(l).item())
    };

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(input.clone());
    let y = superformer_forward(&mut tape, x, &bound, cfg)?;
    let loss = project(&mut tape, y, &r)?;
    let grads = tape.backward(loss)?;

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut out = Vec::with_capacity(names.len());
    for (name, var) in names.iter().zip(bound.iter().map(|(_, v)| v)) {
        let analytic = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(params.get(name).unwrap().shape()));
        let scale_a = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let n = analytic.len();
        let mut worst = 0.0f64;
        let mut scale_n = 0.0f64;
        for _ in 0..samples.min(n) {
            let i = rng.gen_range(0..n);
            let orig = params.get(name).unwrap().data()[i];
            params.get_mut(name).unwrap().data_mut()[i] = orig + FD_STEP;
            let fp = loss_of(&params)?;
            params.get_mut(name).unwrap().data_mut()[i] = orig - FD_STEP;
            let fm = loss_of(&params)?;
            params.get_mut(name).unwrap().data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max((num - analytic.data()[i]).abs());
            scale_n = scale_n.max(num.abs());
        }
        let scale = scale_a.max(scale_n);
        out.push(ParamGradError {
            name: name.clone(),
            rel_error: if scale == 0.0 { 0.0 } else { worst / scale },
        });
    }
    Ok(out)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError> + Send + Sync>;

/// One differentiable op with the input shapes it is checked at.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: OpFn,
}

fn case<F>(name: &'static str, shapes: &[&[usize]], f: F) -> OpCase
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError> + Send + Sync + 'static,
{
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f: Box::new(f),
    }
}

/// Every op the model uses.
pub fn op_suite() -> Vec<OpCase> {
    let idx = std::sync::Arc::new(vec![0, 2, 2, 1, 0, 3]);
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        case("matmul_batched", &[&[2, 3, 4], &[2, 4, 5]], |t, v| t.matmul(v[0], v[1])),
        case("matmul_broadcast", &[&[2, 3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1])),
        case("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
        case("sub", &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
        case("scale", &[&[5]], |t, v| t.scale(v[0], -1.7)),
        case("add_bias", &[&[2, 3, 4], &[4]], |t, v| t.add_bias(v[0], v[1])),
        case("expand_leading", &[&[2, 3]], |t, v| t.expand_leading(v[0], 3)),
        case("sum", &[&[2, 3]], |t, v| t.sum(v[0])),
        case("mean", &[&[2, 3]], |t, v| t.mean(v[0])),
        case("gelu", &[&[12]], |t, v| t.gelu(v[0])),
        case("leaky_relu", &[&[12]], |t, v| t.leaky_relu(v[0], 0.2)),
        case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        case("permute", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        case("roll", &[&[3, 4]], |t, v| t.roll(v[0], &[1, -3])),
        case("roll3d", &[&[4, 4, 2, 3]], |t, v| t.roll3d(v[0], [-1, 2, 1])),
        case("slice", &[&[4, 3]], |t, v| t.slice(v[0], 0, 1, 3)),
        case("concat", &[&[2, 3], &[1, 3]], |t, v| t.concat(&[v[0], v[1]], 0)),
        case("softmax_last", &[&[3, 5]], |t, v| t.softmax(v[0], 1)),
        case("softmax_inner", &[&[2, 4, 3]], |t, v| t.softmax(v[0], 1)),
        case("layer_norm", &[&[4, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        case("conv3d_k3_pad1", &[&[2, 4, 3, 5], &[3, 2, 3, 3, 3], &[3]], |t, v| {
            t.conv3d(v[0], v[1], v[2], 1, 1)
        }),
        case("conv3d_k1", &[&[3, 2, 3, 2], &[2, 3, 1, 1, 1], &[2]], |t, v| t.conv3d(v[0], v[1], v[2], 1, 0)),
        case("conv3d_stride2", &[&[2, 4, 4, 2], &[3, 2, 2, 2, 2], &[3]], |t, v| {
            t.conv3d(v[0], v[1], v[2], 2, 0)
        }),
        case("gather_rows", &[&[4, 2]], move |t, v| t.gather_rows(v[0], idx.clone())),
        case("trilinear_up", &[&[2, 2, 3, 2]], |t, v| t.trilinear_resize(v[0], [4, 6, 4])),
        case("trilinear_down", &[&[1, 4, 5, 3]], |t, v| t.trilinear_resize(v[0], [2, 3, 3])),
        case("l1_loss", &[&[3, 4], &[3, 4]], |t, v| t.l1_loss(v[0], v[1])),
    ]
}

/// Worst per-input error of every op in [`op_suite`] for one seed.
pub fn op_suite_errors(seed: u64) -> Result<Vec<(&'static str, f64)>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_suite()
        .into_iter()
        .map(|c| {
            let inputs: Vec<Tensor<f64>> = c.shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
            let errs = check_op(&c.f, &inputs, seed)?;
            Ok((c.name, errs.into_iter().fold(0.0, f64::max)))
        })
        .collect()
}
