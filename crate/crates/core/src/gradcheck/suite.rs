//! Gradient checks for every differentiable operation and the composite
//! blocks built from them.
//!
//! Outputs that are not scalars are reduced with a fixed random weighting
//! `Σ y∘R`. A plain sum would hide errors: the sum of a batch-normalized or
//! softmax output is constant, so its gradient vanishes identically.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_gradients, CheckOptions, CheckReport};
use crate::config::Config;
use crate::encoder::{Encoder, EncoderConfig, ResidualUnit, Vab};
use crate::error::Result;
use crate::merging::MergingHead;
use crate::model::Psan;
use crate::nn::{Ctx, GruCell, Mode};
use crate::param::{Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const TOL: f64 = 1e-5;
/// Recurrent cells and multi-layer composites.
pub const TOL_DEEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

fn report(op: &'static str, tolerance: f64, parts: &[CheckReport]) -> OpReport {
    OpReport {
        op,
        tolerance,
        max_rel_err: parts.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
        checked: parts.iter().map(|r| r.checked).sum(),
        skipped: parts.iter().map(|r| r.skipped).sum(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// Uniform magnitudes in `[lo, hi)` with random signs.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut t = uniform(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// `Σ y∘R` with `R` uniform in `[−1, 1]`, fixed by `seed`.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(&mut rng, tape.shape(y), -1.0, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn project_all(tape: &mut Tape<f64>, ys: &[Var], seed: u64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (i, &y) in ys.iter().enumerate() {
        let p = project(tape, y, seed.wrapping_add(i as u64))?;
        total = Some(match total {
            Some(t) => tape.add(t, p)?,
            None => p,
        });
    }
    Ok(total.expect("at least one output"))
}

/// Parameters whose gradient is not identically zero: a conv bias directly
/// followed by training-mode batch normalization is cancelled by the mean
/// subtraction.
pub fn checkable_params(store: &ParamStore<f64>) -> Vec<ParamId> {
    store
        .params()
        .iter()
        .filter(|p| !p.name.ends_with(".conv.bias"))
        .map(|p| store.param_id(&p.name).expect("registered"))
        .collect()
}

/// Checks a module forward with respect to `inputs` and the listed
/// parameters. `f` receives the input vars.
fn module_check<F>(
    store: &ParamStore<f64>,
    params: &[ParamId],
    inputs: Vec<Tensor<f64>>,
    mode: Mode,
    opts: &CheckOptions,
    mut f: F,
) -> Result<CheckReport>
where
    F: FnMut(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let n_inputs = inputs.len();
    let mut all = inputs;
    all.extend(params.iter().map(|&id| store.param(id).value.clone()));
    check_gradients(&all, opts, |tape, vars| {
        for (&id, &v) in params.iter().zip(&vars[n_inputs..]) {
            tape.bind_param(id, v);
        }
        let mut ctx = Ctx::with_tape(std::mem::take(tape), store, mode);
        let out = f(&mut ctx, &vars[..n_inputs]);
        *tape = ctx.tape;
        out
    })
}

/// Deep batch-normalized stacks have large third derivatives, so the
/// truncation error of ε = 1e-4 alone can exceed the tolerance.
fn sampled(seed: u64, per_input: usize) -> CheckOptions {
    CheckOptions { eps: 1e-5, sample_per_input: Some(per_input), seed, ..CheckOptions::default() }
}

fn conv2d(rng: &mut ChaCha8Rng, opts: &CheckOptions) -> Result<OpReport> {
    let mut parts = Vec::new();
    for (c_in, c_out, k, stride, pad, h, w) in [(3, 4, 3, 2, 1, 5, 7), (2, 3, 1, 1, 0, 4, 4), (2, 2, 3, 1, 1, 4, 5)] {
        let x = uniform(rng, &[2, c_in, h, w], -1.0, 1.0);
        let wt = uniform(rng, &[c_out, c_in, k, k], -1.0, 1.0);
        let b = uniform(rng, &[c_out], -1.0, 1.0);
        parts.push(check_gradients(&[x, wt, b], opts, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, 1)
        })?);
    }
    Ok(report("conv2d", TOL, &parts))
}

fn batchnorm2d(rng: &mut ChaCha8Rng, opts: &CheckOptions) -> Result<OpReport> {
    let x = uniform(rng, &[2, 3, 4, 4], -2.0, 2.0);
    let gamma = uniform(rng, &[3], 0.5, 1.5);
    let beta = uniform(rng, &[3], -0.5, 0.5);
    let train = check_gradients(&[x.clone(), gamma.clone(), beta.clone()], opts, |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        project(t, y, 2)
    })?;
    let mean = [0.1, -0.3, 0.2];
    let var = [0.8, 1.3, 0.5];
    let eval = check_gradients(&[x, gamma, beta], opts, |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
        project(t, y, 3)
    })?;
    Ok(report("batchnorm2d", TOL, &[train, eval]))
}

fn elementwise(
    rng: &mut ChaCha8Rng,
    opts: &CheckOptions,
    op: &'static str,
    f: fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> Result<OpReport> {
    let x = away_from_zero(rng, &[2, 3, 4], 0.1, 2.0);
    let r = check_gradients(&[x], opts, |t, v| {
        let y = f(t, v[0])?;
        project(t, y, 4)
    })?;
    Ok(report(op, TOL, &[r]))
}

fn maxpool2d(rng: &mut ChaCha8Rng, opts: &CheckOptions) -> Result<OpReport> {
    let mut parts = Vec::new();
    for k in [2, 4] {
        let x = uniform(rng, &[1, 2, 8, 8], -1.0, 1.0);
        parts.push(check_gradients(&[x], opts, |t, v| {
            let y = t.maxpool2d(v[0], k, k)?;
            project(t, y, 5)
        })?);
    }
    Ok(report("maxpool2d", TOL, &parts))
}

fn bilinear_upsample(rng: &mut ChaCha8Rng, opts: &CheckOptions) -> Result<OpReport> {
    let mut parts = Vec::new();
    for factor in [2, 4, 8] {
        let x = uniform(rng, &[1, 2, 3, 4], -1.0, 1.0);
        parts.push(check_gradients(&[x], opts, |t, v| {
            let y = t.bilinear_upsample(v[0], factor)?;
            project(t, y, 6)
        })?);
    }
    Ok(report("bilinear_upsample", TOL, &parts))
}

fn concat_channels(rng: &mut ChaCha8Rng, opts: &CheckOptions) -> Result<OpReport> {
    let a = uniform(rng, &[2, 2, 3, 3], -1.0, 1.0);
    let b = uniform(rng, &[2, 3, 3, 3], -1.0, 1.0);
    let r = check_gradients(&[a, b], opts, |t, v| {
        let y = t.concat_channels(&[v[0], v[1]])?;
        project(t, y, 7)
    })?;
    Ok(report("concat_channels", TOL, &[r]))
}

fn gate_multiply(rng: &mut ChaCha8Rng, opts: &CheckOptions) -> Result<OpReport> {
    let x = uniform(rng, &[2, 3, 4, 4], -1.0, 1.0);
    let sm = uniform(rng, &[2, 1, 4, 4], 0.0, 1.0);
    let r = check_gradients(&[x, sm], opts, |t, v| {
        let y = t.gate_multiply(v[0], v[1])?;
        project(t, y, 8)
    })?;
    Ok(report("gate_multiply", TOL, &[r]))
}

fn linear(rng: &mut ChaCha8Rng, opts: &CheckOptions) -> Result<OpReport> {
    let x = uniform(rng, &[3, 5], -1.0, 1.0);
    let w = uniform(rng, &[5, 4], -1.0, 1.0);
    let b = uniform(rng, &[4], -1.0, 1.0);
    let r = check_gradients(&[x, w, b], opts, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        project(t, y, 9)
    })?;
    Ok(report("linear", TOL, &[r]))
}

fn softmax(rng: &mut ChaCha8Rng, opts: &CheckOptions) -> Result<OpReport> {
    let x = uniform(rng, &[3, 6], -3.0, 3.0);
    let r = check_gradients(&[x], opts, |t, v| {
        let y = t.softmax(v[0])?;
        project(t, y, 10)
    })?;
    Ok(report("softmax", TOL, &[r]))
}

fn embedding(rng: &mut ChaCha8Rng, opts: &CheckOptions) -> Result<OpReport> {
    let table = uniform(rng, &[6, 4], -1.0, 1.0);
    let w = uniform(rng, &[4, 3], -1.0, 1.0);
    let r = check_gradients(&[table, w], opts, |t, v| {
        let e = t.embedding(v[0], &[1, 3, 1, 5])?;
        let y = t.linear(e, v[1], None)?;
        project(t, y, 11)
    })?;
    Ok(report("embedding", TOL, &[r]))
}

fn gru_cell(rng: &mut ChaCha8Rng, opts: &CheckOptions) -> Result<OpReport> {
    let mut store = ParamStore::<f64>::new();
    let mut prng = ChaCha8Rng::seed_from_u64(rng.gen());
    let gru = GruCell::new(&mut Init::new(&mut store, &mut prng).sub("gru"), 5, 4)?;
    for p in store.params_mut() {
        let v = uniform(rng, p.value.shape(), -0.8, 0.8);
        p.value = v;
    }
    let params: Vec<ParamId> = store.params().iter().map(|p| store.param_id(&p.name).expect("known")).collect();
    let x = uniform(rng, &[2, 5], -1.0, 1.0);
    let h = uniform(rng, &[2, 4], -1.0, 1.0);
    let r = module_check(&store, &params, vec![x, h], Mode::Train, opts, |ctx, v| {
        let y = gru.forward(ctx, v[0], v[1])?;
        project(&mut ctx.tape, y, 12)
    })?;
    Ok(report("gru_cell", TOL_DEEP, &[r]))
}

fn sequence_nll(rng: &mut ChaCha8Rng, opts: &CheckOptions) -> Result<OpReport> {
    let logits: Vec<Tensor<f64>> = (0..3).map(|_| uniform(rng, &[3, 5], -2.0, 2.0)).collect();
    let targets = vec![vec![1, 4, 0], vec![2], vec![3, 3]];
    let r = check_gradients(&logits, opts, |t, v| t.sequence_nll(v, &targets))?;
    Ok(report("sequence_nll", TOL, &[r]))
}

fn small_store(seed: u64) -> (ParamStore<f64>, ChaCha8Rng) {
    (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
}

fn residual_unit(rng: &mut ChaCha8Rng, opts: &CheckOptions) -> Result<OpReport> {
    let (mut store, mut prng) = small_store(rng.gen());
    let unit = ResidualUnit::new(&mut Init::new(&mut store, &mut prng).sub("ru"), 4)?;
    let params = checkable_params(&store);
    let x = uniform(rng, &[2, 4, 4, 4], -1.0, 1.0);
    let r = module_check(&store, &params, vec![x], Mode::Train, opts, |ctx, v| {
        let y = unit.forward(ctx, v[0])?;
        project(&mut ctx.tape, y, 13)
    })?;
    Ok(report("residual_unit", TOL_DEEP, &[r]))
}

fn vab_forward(rng: &mut ChaCha8Rng, opts: &CheckOptions) -> Result<OpReport> {
    let (mut store, mut prng) = small_store(rng.gen());
    let vab = Vab::new(&mut Init::new(&mut store, &mut prng).sub("vab"), 3, 2)?;
    let params = checkable_params(&store);
    let x = uniform(rng, &[2, 3, 4, 4], -1.0, 1.0);
    let r = module_check(&store, &params, vec![x], Mode::Train, opts, |ctx, v| {
        let y = vab.forward(ctx, v[0])?;
        project(&mut ctx.tape, y, 14)
    })?;
    Ok(report("vab_forward", TOL_DEEP, &[r]))
}

fn mh_forward(rng: &mut ChaCha8Rng, opts: &CheckOptions) -> Result<OpReport> {
    let (mut store, mut prng) = small_store(rng.gen());
    let head = MergingHead::new(&mut Init::new(&mut store, &mut prng).sub("head"), &[8, 16, 32], 3)?;
    let params = checkable_params(&store);
    let feats = vec![
        uniform(rng, &[2, 8, 4, 8], -1.0, 1.0),
        uniform(rng, &[2, 16, 2, 4], -1.0, 1.0),
        uniform(rng, &[2, 32, 1, 2], -1.0, 1.0),
    ];
    let r = module_check(&store, &params, feats, Mode::Train, opts, |ctx, v| {
        let y = head.forward(ctx, v)?;
        project(&mut ctx.tape, y, 15)
    })?;
    Ok(report("mh_forward", TOL_DEEP, &[r]))
}

fn encoder(rng: &mut ChaCha8Rng, opts: &CheckOptions) -> Result<OpReport> {
    let (mut store, mut prng) = small_store(rng.gen());
    let cfg = EncoderConfig { base_channels: 4, num_scales: 3, rus_per_rs: 1, vab_enabled: true, vab_convs: 2 };
    let enc = Encoder::new(&mut Init::new(&mut store, &mut prng).sub("encoder"), &cfg)?;
    let params = checkable_params(&store);
    let x = uniform(rng, &[2, 3, 8, 16], -1.0, 1.0);
    let r = module_check(&store, &params, vec![x], Mode::Train, &sampled(opts.seed, 6), |ctx, v| {
        let out = enc.forward(ctx, v[0])?;
        project_all(&mut ctx.tape, &out.features, 16)
    })?;
    Ok(report("encoder_forward", TOL_DEEP, &[r]))
}

/// Configuration of the end-to-end check: an `8×16` input with a small
/// decoder.
pub fn tiny_model_config() -> Config {
    Config {
        base_channels: 4,
        num_scales: 3,
        rus_per_rs: 1,
        vab_convs: 2,
        max_length: 4,
        max_label_len: 3,
        hidden_size: 6,
        embedding_dim: 4,
        input_height: 8,
        input_width: 16,
        ..Config::default()
    }
}

fn full_model(rng: &mut ChaCha8Rng, opts: &CheckOptions) -> Result<OpReport> {
    let cfg = tiny_model_config();
    let mut store = ParamStore::<f64>::new();
    let mut prng = ChaCha8Rng::seed_from_u64(rng.gen());
    let model = Psan::new(&cfg, &mut store, &mut prng)?;
    let params = checkable_params(&store);
    let targets = model.targets(&["ab", "c"])?;
    let x = uniform(rng, &[2, 3, 8, 16], -1.0, 1.0);
    let r = module_check(&store, &params, vec![x], Mode::Train, &sampled(opts.seed, 4), |ctx, v| {
        Ok(model.loss(ctx, v[0], &targets)?.loss)
    })?;
    Ok(report("model_loss", TOL_DEEP, &[r]))
}

/// Runs every check with inputs drawn from `seed`.
pub fn run(seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = CheckOptions { seed, ..CheckOptions::default() };
    let composite = sampled(seed, 24);
    Ok(vec![
        conv2d(&mut rng, &opts)?,
        batchnorm2d(&mut rng, &opts)?,
        elementwise(&mut rng, &opts, "relu", Tape::relu)?,
        elementwise(&mut rng, &opts, "sigmoid", Tape::sigmoid)?,
        elementwise(&mut rng, &opts, "tanh", Tape::tanh)?,
        maxpool2d(&mut rng, &opts)?,
        bilinear_upsample(&mut rng, &opts)?,
        concat_channels(&mut rng, &opts)?,
        gate_multiply(&mut rng, &opts)?,
        linear(&mut rng, &opts)?,
        softmax(&mut rng, &opts)?,
        embedding(&mut rng, &opts)?,
        gru_cell(&mut rng, &opts)?,
        sequence_nll(&mut rng, &opts)?,
        residual_unit(&mut rng, &composite)?,
        vab_forward(&mut rng, &composite)?,
        mh_forward(&mut rng, &composite)?,
        encoder(&mut rng, &opts)?,
        full_model(&mut rng, &opts)?,
    ])
}
