//! Central finite-difference checks of reverse-mode gradients, in f64.
//!
//! Each check projects the output onto a fixed random tensor, so the scalar
//! under test is `sum(f(inputs) * r)`. The error of one element is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3 * scale)`, where
//! `scale` is the largest analytic magnitude of that input; elements a
//! thousand times below the dominant gradient are thereby held to an error
//! relative to it instead of to their own size.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{cycle_map_with_forward, Generator, GeneratorConfig};
use crate::nn::{
    attach_pictogram, dense_fuse, residual_attention, residual_unit_forward, Activation, Bound, Conv2d, DraModule,
    Linear, ParamSet, ResidualUnit,
};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::{critic_loss, cycle_loss, gradient_penalty};

const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Blocks,
    Gp,
    Generator,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Ops, Scope::Blocks, Scope::Gp, Scope::Generator];

    /// Maximum accepted relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            Scope::Ops | Scope::Blocks => 1e-5,
            Scope::Gp | Scope::Generator => 1e-4,
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "blocks" => Ok(Scope::Blocks),
            "gp" => Ok(Scope::Gp),
            "generator" => Ok(Scope::Generator),
            other => Err(Error::Config(format!("unknown gradcheck scope {other:?} (ops, blocks, gp, generator)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

type Graph = dyn Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>;

fn project(out: &Var<f64>, r: &Tensor<f64>) -> Result<Var<f64>> {
    Ok(out.mul_const(r)?.sum())
}

fn evaluate(f: &Graph, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(project(&f(&tape, &vars)?, r)?.value().item())
}

/// Compares the tape gradient of every input with central differences.
pub fn check(name: &str, inputs: Vec<Tensor<f64>>, tolerance: f64, f: &Graph) -> Result<CheckResult> {
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.parameter(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let r = Rng::new(0x5eed).uniform_tensor::<f64>(&out.shape(), -1.0, 1.0);
    let grads = tape.backward(&project(&out, &r)?)?;
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(var);
        let scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut probe = inputs.clone();
        for i in 0..probe[k].len() {
            let x0 = probe[k].data()[i];
            probe[k].data_mut()[i] = x0 + STEP;
            let up = evaluate(f, &probe, &r)?;
            probe[k].data_mut()[i] = x0 - STEP;
            let down = evaluate(f, &probe, &r)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-3 * scale).max(f64::MIN_POSITIVE);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance,
    })
}

/// Uniform values whose magnitude stays at least `gap` away from zero, so
/// kinks at zero are never straddled by the difference step.
fn away_from_zero(rng: &mut Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.range(gap, 1.0);
        if rng.uniform() < 0.5 {
            -v
        } else {
            v
        }
    })
}

pub fn run(scope: Scope) -> Result<Vec<CheckResult>> {
    match scope {
        Scope::Ops => ops_suite(),
        Scope::Blocks => blocks_suite(),
        Scope::Gp => gp_suite(),
        Scope::Generator => generator_suite(),
    }
}

fn ops_suite() -> Result<Vec<CheckResult>> {
    let tol = Scope::Ops.tolerance();
    let mut rng = Rng::new(11);
    let mut u = |shape: &[usize]| rng.uniform_tensor::<f64>(shape, -1.0, 1.0);
    let x4 = u(&[2, 3, 4, 4]);
    let y4 = u(&[2, 3, 4, 4]);
    let k3 = u(&[4, 3, 3, 3]);
    let k1 = u(&[5, 3, 1, 1]);
    let c3 = u(&[3]);
    let m23 = u(&[2, 3]);
    let m34 = u(&[3, 4]);
    let fc_w = u(&[4, 3]);
    let fc_b = u(&[4]);
    let logits = u(&[3, 5]);
    let mask = u(&[2, 3, 4, 4]);
    let scalar = u(&[1]);
    let per_sample = u(&[2]);
    let z = u(&[2, 2, 4, 4]);
    let mut r2 = Rng::new(12);
    let kinked = away_from_zero(&mut r2, &[2, 3, 4, 4], 0.05);
    let positive = r2.uniform_tensor::<f64>(&[2, 3, 4, 4], 0.2, 1.5);

    type Case = (&'static str, Vec<Tensor<f64>>, Box<Graph>);
    let cases: Vec<Case> = vec![
        ("add", vec![x4.clone(), y4.clone()], Box::new(|_, v| v[0].add(&v[1]))),
        ("sub", vec![x4.clone(), y4.clone()], Box::new(|_, v| v[0].sub(&v[1]))),
        ("mul", vec![x4.clone(), y4.clone()], Box::new(|_, v| v[0].mul(&v[1]))),
        ("square", vec![x4.clone()], Box::new(|_, v| Ok(v[0].square()))),
        ("neg", vec![x4.clone()], Box::new(|_, v| Ok(v[0].neg()))),
        ("scale", vec![x4.clone()], Box::new(|_, v| Ok(v[0].scale(-1.7)))),
        ("add_scalar", vec![x4.clone()], Box::new(|_, v| Ok(v[0].add_scalar(0.3)))),
        ("sigmoid", vec![x4.clone()], Box::new(|_, v| Ok(v[0].sigmoid()))),
        ("tanh", vec![x4.clone()], Box::new(|_, v| Ok(v[0].tanh()))),
        ("relu", vec![kinked.clone()], Box::new(|_, v| Ok(v[0].relu()))),
        ("leaky_relu", vec![kinked.clone()], Box::new(|_, v| Ok(v[0].leaky_relu(0.2)))),
        ("sqrt", vec![positive.clone()], Box::new(|_, v| Ok(v[0].sqrt()))),
        ("recip", vec![positive.clone()], Box::new(|_, v| Ok(v[0].recip()))),
        ("mul_const", vec![x4.clone()], Box::new(move |_, v| v[0].mul_const(&mask))),
        ("reshape", vec![x4.clone()], Box::new(|_, v| v[0].reshape(&[6, 16]))),
        ("flatten", vec![x4.clone()], Box::new(|_, v| v[0].flatten())),
        ("conv2d_3x3", vec![x4.clone(), k3.clone()], Box::new(|_, v| v[0].conv2d(&v[1], 1, 1))),
        ("conv2d_3x3_stride2", vec![x4.clone(), k3.clone()], Box::new(|_, v| v[0].conv2d(&v[1], 2, 1))),
        ("conv2d_1x1", vec![x4.clone(), k1], Box::new(|_, v| v[0].conv2d(&v[1], 1, 0))),
        ("broadcast_channel", vec![c3.clone()], Box::new(|_, v| v[0].broadcast_channel(&[2, 3, 4, 4]))),
        ("channel_sum", vec![x4.clone()], Box::new(|_, v| v[0].channel_sum())),
        ("add_channel_bias", vec![x4.clone(), c3], Box::new(|_, v| v[0].add_channel_bias(&v[1]))),
        ("sum", vec![x4.clone()], Box::new(|_, v| Ok(v[0].sum()))),
        ("mean", vec![x4.clone()], Box::new(|_, v| Ok(v[0].mean()))),
        ("expand_scalar", vec![scalar], Box::new(|_, v| v[0].expand_scalar(&[2, 3]))),
        ("sum_per_sample", vec![x4.clone()], Box::new(|_, v| v[0].sum_per_sample())),
        ("expand_per_sample", vec![per_sample], Box::new(|_, v| v[0].expand_per_sample(&[2, 3, 4]))),
        ("concat_channels", vec![x4.clone(), z], Box::new(|_, v| v[0].concat_channels(&v[1]))),
        ("slice_channels", vec![x4.clone()], Box::new(|_, v| v[0].slice_channels(1, 2))),
        ("resize_bilinear_up", vec![x4.clone()], Box::new(|_, v| v[0].resize_bilinear(8, 8))),
        ("resize_bilinear_down", vec![x4.clone()], Box::new(|_, v| v[0].resize_bilinear(3, 2))),
        ("matmul", vec![m23.clone(), m34], Box::new(|_, v| v[0].matmul(&v[1]))),
        ("transpose", vec![m23.clone()], Box::new(|_, v| v[0].transpose())),
        ("avg_pool2", vec![x4.clone()], Box::new(|_, v| v[0].avg_pool2())),
        ("fully_connected", vec![m23, fc_w, fc_b], Box::new(|_, v| v[0].fully_connected(&v[1], &v[2]))),
        ("softmax_cross_entropy", vec![logits], Box::new(|_, v| v[0].softmax_cross_entropy(&[0, 4, 2]))),
        ("l2_norm_per_sample", vec![x4], Box::new(|_, v| v[0].l2_norm_per_sample())),
    ];
    cases.into_iter().map(|(name, inputs, f)| check(name, inputs, tol, &*f)).collect()
}

/// Parameter tensors of `params` followed by `extra`, and a closure turning
/// the leading handles back into a [`Bound`].
fn with_params(params: &ParamSet<f64>, extra: Vec<Tensor<f64>>) -> (Vec<Tensor<f64>>, usize) {
    let n = params.len();
    let mut inputs: Vec<Tensor<f64>> = params.entries().iter().map(|e| e.value.clone()).collect();
    inputs.extend(extra);
    (inputs, n)
}

fn bound(vars: &[Var<f64>], n: usize) -> Bound<f64> {
    Bound::from_vars(vars[..n].to_vec())
}

fn blocks_suite() -> Result<Vec<CheckResult>> {
    let tol = Scope::Blocks.tolerance();
    let mut rng = Rng::new(21);
    let mut out = Vec::new();

    for (name, act) in [("residual_unit_relu", Activation::Relu), ("residual_unit_leaky", Activation::LeakyRelu(0.2))] {
        let mut params = ParamSet::new();
        let unit = ResidualUnit::new(&mut params, &mut rng, "u", 3, act);
        let (inputs, n) = with_params(&params, vec![rng.uniform_tensor(&[2, 3, 5, 5], -1.0, 1.0)]);
        out.push(check(name, inputs, tol, &move |_, v| residual_unit_forward(&v[n], &unit, &bound(v, n)))?);
    }

    let mut params = ParamSet::new();
    let conv = Conv2d::new(&mut params, &mut rng, "c", 3, 4, 3, 2, 1.0);
    let (inputs, n) = with_params(&params, vec![rng.uniform_tensor(&[2, 3, 6, 6], -1.0, 1.0)]);
    out.push(check("conv2d_module", inputs, tol, &move |_, v| conv.forward(&bound(v, n), &v[n]))?);

    let mut params = ParamSet::new();
    let lin = Linear::new(&mut params, &mut rng, "l", 6, 3);
    let (inputs, n) = with_params(&params, vec![rng.uniform_tensor(&[4, 6], -1.0, 1.0)]);
    out.push(check("linear_module", inputs, tol, &move |_, v| lin.forward(&bound(v, n), &v[n]))?);

    let mut params = ParamSet::new();
    let dra = DraModule::new(&mut params, &mut rng, "d", 4, 3);
    let f_d = rng.uniform_tensor(&[2, 4, 4, 4], -1.0, 1.0);
    let f_e = rng.uniform_tensor(&[2, 3, 4, 4], -1.0, 1.0);
    let (inputs, n) = with_params(&params, vec![f_d.clone(), f_e.clone()]);
    let dra2 = dra.clone();
    out.push(check("dense_fuse", inputs, tol, &move |_, v| dense_fuse(&v[n], &v[n + 1], &dra2, &bound(v, n)))?);

    out.push(check("residual_attention", vec![f_e.clone(), f_e.map(|x| 2.0 * x)], tol, &|_, v| {
        residual_attention(&v[0], &v[1])
    })?);

    let p = rng.uniform_tensor(&[2, 3, 8, 8], -1.0, 1.0);
    out.push(check("attach_pictogram", vec![f_e, p.clone()], tol, &|_, v| attach_pictogram(&v[0], &v[1]))?);

    let (inputs, n) = with_params(&params, vec![f_d, rng.uniform_tensor(&[2, 3, 4, 4], -1.0, 1.0), p]);
    out.push(check("dra_chain", inputs, tol, &move |_, v| {
        let f_c = dense_fuse(&v[n], &v[n + 1], &dra, &bound(v, n))?;
        attach_pictogram(&residual_attention(&f_c, &v[n + 1])?, &v[n + 2])
    })?);
    Ok(out)
}

/// Conv, leaky ReLU and a linear head: `[N,3,6,6] -> [N,1]`.
fn tiny_critic(rng: &mut Rng) -> (ParamSet<f64>, Conv2d, Linear) {
    let mut params = ParamSet::new();
    let conv = Conv2d::new(&mut params, rng, "c", 3, 4, 3, 2, 1.0);
    let head = Linear::new(&mut params, rng, "h", 4 * 3 * 3, 1);
    (params, conv, head)
}

fn critic_apply(x: &Var<f64>, conv: &Conv2d, head: &Linear, b: &Bound<f64>) -> Result<Var<f64>> {
    let h = conv.forward(b, x)?.leaky_relu(0.2).flatten()?;
    head.forward(b, &h)
}

fn gp_suite() -> Result<Vec<CheckResult>> {
    let tol = Scope::Gp.tolerance();
    let mut rng = Rng::new(31);
    let (params, conv, head) = tiny_critic(&mut rng);
    let real = rng.uniform_tensor(&[3, 3, 6, 6], -1.0, 1.0);
    let fake = rng.uniform_tensor(&[3, 3, 6, 6], -1.0, 1.0);
    let eps = Tensor::from_f64_slice(&[3], &[0.2, 0.5, 0.9])?;
    let mut out = Vec::new();

    let (inputs, n) = with_params(&params, vec![real.clone()]);
    let (c1, h1) = (conv.clone(), head.clone());
    out.push(check("gradient_penalty", inputs, tol, &move |_, v| {
        let b = bound(v, n);
        gradient_penalty(|x| critic_apply(x, &c1, &h1, &b), &v[n])
    })?);

    let (inputs, n) = with_params(&params, vec![real.clone(), fake.clone()]);
    let (c2, h2, e2) = (conv.clone(), head.clone(), eps.clone());
    out.push(check("critic_loss", inputs, tol, &move |_, v| {
        let b = bound(v, n);
        Ok(critic_loss(|x| critic_apply(x, &c2, &h2, &b), &v[n], &v[n + 1], 10.0, &e2)?.loss)
    })?);

    // the penalty with the interpolate treated as data, as in a critic step
    let (inputs, n) = with_params(&params, vec![]);
    out.push(check("gradient_penalty_params_only", inputs, tol, &move |tape, v| {
        let b = bound(v, n);
        let x_hat = crate::training::interpolate_samples(
            &tape.constant(real.clone()),
            &tape.constant(fake.clone()),
            &eps,
        )?;
        gradient_penalty(|x| critic_apply(x, &conv, &head, &b), &x_hat)
    })?);
    Ok(out)
}

fn generator_suite() -> Result<Vec<CheckResult>> {
    let tol = Scope::Generator.tolerance();
    let mut rng = Rng::new(41);
    let config = GeneratorConfig {
        resolution: 16,
        base_width: 4,
        scales: 2,
        ..GeneratorConfig::default()
    };
    let mut gen = Generator::<f64>::new(config, &mut rng)?;
    gen.randomize_heads(&mut rng);
    let x = rng.uniform_tensor(&[1, 3, 16, 16], -1.0, 1.0);
    let p_a = rng.uniform_tensor(&[1, 3, 16, 16], -1.0, 1.0);
    let p_b = rng.uniform_tensor(&[1, 3, 16, 16], -1.0, 1.0);
    let (inputs, n) = with_params(&gen.params, vec![x, p_a, p_b]);
    let result = check("generator_end_to_end", inputs, tol, &move |_, v| {
        let b = bound(v, n);
        let (outs, rec) = cycle_map_with_forward(&v[n], &v[n + 1], &v[n + 2], &gen, &b)?;
        let mut total = cycle_loss(&v[n], &rec)?;
        for o in &outs {
            total = total.add(&o.square().mean())?;
        }
        Ok(total)
    })?;
    Ok(vec![result])
}
