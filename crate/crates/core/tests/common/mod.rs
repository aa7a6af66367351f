//! Checks shared by the topic tests and the acceptance run. Each returns a
//! one-line summary on success and a reason on failure.

#![allow(dead_code)]

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use psan::charset::Charset;
use psan::checkpoint;
use psan::data::dataset::Dataset;
use psan::data::transform::{self, Transform};
use psan::data::Image;
use psan::decoder::{encode_targets, Decoder, DecoderConfig};
use psan::encoder::{Encoder, EncoderConfig, Vab};
use psan::eval::evaluate;
use psan::gradcheck::suite;
use psan::merging::MergingHead;
use psan::nn::{Ctx, Mode};
use psan::optim::AdaDelta;
use psan::param::{Init, ParamStore};
use psan::train::{StepMetrics, Trainer};
use psan::{Config, Tape, Tensor};

pub type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s(e: psan::Error) -> String {
    e.to_string()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

// ---------------------------------------------------------------- gradients

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = suite::run(7).map_err(e2s)?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    ensure(failed.is_empty(), || format!("failing ops: {failed:?}"))?;
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    let worst = reports.iter().map(|r| r.max_rel_err / r.tolerance).fold(0.0, f64::max);
    Ok(format!("{} ops, worst err/tol {worst:.2e}, {secs:.1}s", reports.len()))
}

// ----------------------------------------------------------------- conv

/// Direct six-loop cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    (n, c_in, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (c_out, k): (usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * c_out * oh * ow];
    for b in 0..n {
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c_in + ci) * h + iy as usize) * w + ix as usize];
                                acc += xv * wt[((co * c_in + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * c_out + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Largest `|ours − oracle| / max(1, max|oracle|)` over `cases` random
/// convolutions computed at 32-bit.
pub fn conv_oracle_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.gen_range(1..=2);
        let c_in = rng.gen_range(1..=4);
        let c_out = rng.gen_range(1..=4);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=k / 2);
        let h = rng.gen_range(k..=10);
        let w = rng.gen_range(k..=12);
        let with_bias = rng.gen_bool(0.7);
        let round32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32 as f64).collect::<Vec<_>>();
        let x = round32(uniform(&mut rng, n * c_in * h * w, -1.0, 1.0));
        let wt = round32(uniform(&mut rng, c_out * c_in * k * k, -1.0, 1.0));
        let bias = if with_bias { round32(uniform(&mut rng, c_out, -1.0, 1.0)) } else { vec![0.0; c_out] };
        let (want, oh, ow) = naive_conv2d(&x, (n, c_in, h, w), &wt, (c_out, k), &bias, stride, pad);

        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(Tensor::from_f64(&[n, c_in, h, w], &x).unwrap());
        let wv = tape.constant(Tensor::from_f64(&[c_out, c_in, k, k], &wt).unwrap());
        let bv = with_bias.then(|| tape.constant(Tensor::from_f64(&[c_out], &bias).unwrap()));
        let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        assert_eq!(tape.shape(y), &[n, c_out, oh, ow]);
        let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            worst = worst.max((*a as f64 - b).abs() / scale);
        }
    }
    worst
}

pub fn conv_oracle() -> Outcome {
    let err = conv_oracle_error(100, 2024);
    ensure(err < 1e-4, || format!("max scaled diff {err:.3e}"))?;
    Ok(format!("100 cases, max scaled diff {err:.2e}"))
}

// ---------------------------------------------------------------- shapes

pub const GRID_MAX_LENGTHS: [usize; 4] = [25, 50, 75, 100];

/// Encoder and head output shapes for one encoder configuration at
/// `1×3×32×128`.
pub fn grid_point(cfg: &EncoderConfig) -> Result<(), String> {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc = Encoder::new(&mut Init::new(&mut store, &mut rng).sub("encoder"), cfg).map_err(e2s)?;
    let channels: Vec<usize> = (0..cfg.num_scales).map(|i| cfg.base_channels << (i + 1)).collect();
    let heads = GRID_MAX_LENGTHS
        .iter()
        .map(|&l| MergingHead::new(&mut Init::new(&mut store, &mut rng).sub(&format!("head{l}")), &channels, l))
        .collect::<psan::Result<Vec<_>>>()
        .map_err(e2s)?;

    let mut ctx = Ctx::new(&store, Mode::Eval);
    let x = ctx.tape.constant(Tensor::full(&[1, 3, 32, 128], 0.25));
    let out = enc.forward(&mut ctx, x).map_err(e2s)?;
    ensure(out.features.len() == cfg.num_scales, || format!("{cfg:?}: {} outputs", out.features.len()))?;
    for (i, &f) in out.features.iter().enumerate() {
        let want = [
            1,
            cfg.base_channels * 2usize.pow(i as u32 + 1),
            32 / 2usize.pow(i as u32 + 1),
            128 / 2usize.pow(i as u32 + 1),
        ];
        ensure(ctx.tape.shape(f) == want, || {
            format!("{cfg:?}: F_S{} is {:?}, want {want:?}", i + 1, ctx.tape.shape(f))
        })?;
    }
    let k = (32 >> cfg.num_scales) * (128 >> cfg.num_scales);
    for (head, &l) in heads.iter().zip(&GRID_MAX_LENGTHS) {
        let y = head.forward(&mut ctx, &out.features).map_err(e2s)?;
        ensure(ctx.tape.shape(y) == [1, l, k], || format!("{cfg:?}: head({l}) is {:?}", ctx.tape.shape(y)))?;
    }
    Ok(())
}

pub fn shape_grid() -> Outcome {
    // The worked example, stated literally.
    let full = EncoderConfig { base_channels: 32, num_scales: 3, ..EncoderConfig::default() };
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = Encoder::new(&mut Init::new(&mut store, &mut rng).sub("encoder"), &full).map_err(e2s)?;
    let head = MergingHead::new(&mut Init::new(&mut store, &mut rng).sub("head"), &[64, 128, 256], 25).map_err(e2s)?;
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let x = ctx.tape.constant(Tensor::full(&[1, 3, 32, 128], 0.1));
    let out = enc.forward(&mut ctx, x).map_err(e2s)?;
    let shapes: Vec<Vec<usize>> = out.features.iter().map(|&f| ctx.tape.shape(f).to_vec()).collect();
    ensure(shapes == [vec![1, 64, 16, 64], vec![1, 128, 8, 32], vec![1, 256, 4, 16]], || format!("{shapes:?}"))?;
    let fmh = head.forward(&mut ctx, &out.features).map_err(e2s)?;
    ensure(ctx.tape.shape(fmh) == [1, 25, 64], || format!("F_MH {:?}", ctx.tape.shape(fmh)))?;

    let mut points = 0;
    for c in [8, 32] {
        for scales in 1..=4 {
            for rus in 1..=6 {
                for vab in [true, false] {
                    let cfg = EncoderConfig {
                        base_channels: c,
                        num_scales: scales,
                        rus_per_rs: rus,
                        vab_enabled: vab,
                        ..EncoderConfig::default()
                    };
                    grid_point(&cfg)?;
                    points += 1;
                }
            }
        }
    }
    Ok(format!("{points} encoder configs × {} MaxLength values", GRID_MAX_LENGTHS.len()))
}

// ------------------------------------------------------------------- VAB

pub fn vab_invariants() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vab = Vab::new(&mut Init::new(&mut store, &mut rng).sub("vab"), 4, 4).map_err(e2s)?;
    let x = Tensor::new(&[2, 4, 8, 8], uniform(&mut rng, 512, -3.0, 3.0)).unwrap();
    let mut checked = 0;
    for mode in [Mode::Train, Mode::Eval] {
        let mut ctx = Ctx::new(&store, mode);
        let xv = ctx.tape.constant(x.clone());
        let t = vab.trace(&mut ctx, xv).map_err(e2s)?;
        let sm = ctx.tape.value(t.sm);
        ensure(sm.data().iter().all(|&v| v > 0.0 && v < 1.0), || format!("{mode:?}: SM outside (0, 1)"))?;
        ensure(sm.shape() == [2, 1, 8, 8], || format!("SM shape {:?}", sm.shape()))?;
        ensure(ctx.tape.shape(t.out) == x.shape(), || format!("output shape {:?}", ctx.tape.shape(t.out)))?;
        checked += sm.numel();

        let logits = ctx.tape.constant(Tensor::full(&[2, 1, 8, 8], -50.0));
        let forced = vab.finish(&mut ctx, xv, logits).map_err(e2s)?;
        let m = ctx.tape.value(forced.gated).max_abs();
        ensure(m < 1e-20, || format!("gated magnitude {m:e} with SM→0"))?;
    }

    // Every attention map inside a full encoder.
    let cfg = EncoderConfig { base_channels: 4, num_scales: 3, rus_per_rs: 1, ..EncoderConfig::default() };
    let mut store = ParamStore::<f32>::new();
    let enc = Encoder::new(&mut Init::new(&mut store, &mut rng).sub("encoder"), &cfg).map_err(e2s)?;
    let mut ctx = Ctx::new(&store, Mode::Train);
    let img: Vec<f64> = uniform(&mut rng, 2 * 3 * 32 * 128, -1.0, 1.0);
    let xv = ctx.tape.constant(Tensor::from_f64(&[2, 3, 32, 128], &img).unwrap());
    let out = enc.forward(&mut ctx, xv).map_err(e2s)?;
    for t in out.vab.iter().flatten() {
        ensure(ctx.tape.value(t.sm).data().iter().all(|&v| v > 0.0 && v < 1.0), || "encoder SM outside (0, 1)".into())?;
        checked += ctx.tape.value(t.sm).numel();
    }
    Ok(format!("{checked} map values in (0, 1), shapes preserved, forced gate < 1e-20"))
}

// --------------------------------------------------------------- ADADELTA

fn single_param_store(values: &[f64], grad: &[f64]) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let id = store.add_param("x", Tensor::from_f64(&[values.len()], values).unwrap()).unwrap();
    store.param_mut(id).grad = Some(grad.to_vec());
    store
}

pub fn adadelta() -> Outcome {
    let opt = AdaDelta { rho: 0.9, eps: 1e-6 };
    let mut store = single_param_store(&[0.5], &[1.0]);
    opt.step(&mut store, 1.0).map_err(e2s)?;
    let got = store.params()[0].value.data()[0] - 0.5;
    let want = -(1e-6f64).sqrt() / (0.1f64 + 1e-6).sqrt();
    ensure((got - want).abs() < 1e-9, || format!("first step {got:e}, want {want:e}"))?;

    // With tiny ε the first step is insensitive to the gradient's scale.
    let tiny = AdaDelta { rho: 0.9, eps: 1e-12 };
    let mut a = single_param_store(&[0.0], &[0.3]);
    let mut b = single_param_store(&[0.0], &[3.0]);
    tiny.step(&mut a, 1.0).map_err(e2s)?;
    tiny.step(&mut b, 1.0).map_err(e2s)?;
    let (da, db) = (a.params()[0].value.data()[0], b.params()[0].value.data()[0]);
    ensure(((da - db) / db).abs() < 1e-9, || format!("g step {da:e} vs 10g step {db:e}"))?;

    // 100 steps on a diagonal quadratic.
    let curv = [1.0, 4.0, 0.25];
    let loss = |x: &[f64]| 0.5 * x.iter().zip(&curv).map(|(v, a)| a * v * v).sum::<f64>();
    let mut store = single_param_store(&[1.0, -2.0, 3.0], &[0.0; 3]);
    let mut prev = loss(store.params()[0].value.data());
    let first = prev;
    for step in 0..100 {
        let g: Vec<f64> = store.params()[0].value.data().iter().zip(&curv).map(|(v, a)| a * v).collect();
        store.params_mut()[0].grad = Some(g);
        opt.step(&mut store, 1.0).map_err(e2s)?;
        let now = loss(store.params()[0].value.data());
        ensure(now < prev, || format!("loss rose at step {step}: {prev} → {now}"))?;
        prev = now;
    }
    Ok(format!("first step {got:.6e}; quadratic {first:.3} → {prev:.4} monotone over 100 steps"))
}

// ---------------------------------------------------------------- decoder

pub struct TinyDecoder {
    pub store: ParamStore<f64>,
    pub dec: Decoder,
}

/// N=1-style decoder with K=4, E=3, H=5 and every weight, bias included,
/// drawn uniformly from `[−0.5, 0.5]`.
pub fn tiny_decoder(seed: u64, max_length: usize) -> TinyDecoder {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DecoderConfig { hidden_size: 5, embedding_dim: 3, k: 4, max_length };
    let dec = Decoder::new(&mut Init::new(&mut store, &mut rng).sub("decoder"), cfg).unwrap();
    for p in store.params_mut() {
        let n = p.value.numel();
        p.value = Tensor::new(p.value.shape(), uniform(&mut rng, n, -0.5, 0.5)).unwrap();
    }
    TinyDecoder { store, dec }
}

fn get<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    store.param(store.param_id(name).unwrap()).value.data()
}

/// `x·W` for row vector `x` and row-major `W` of shape `len(x)×cols`.
fn vec_mat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    (0..cols).map(|j| x.iter().enumerate().map(|(i, v)| v * w[i * cols + j]).sum()).collect()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Step-by-step evaluation of the teacher-forced loss for one sample,
/// written without the tape. `fmh` is `MaxLength×K` row-major.
pub fn hand_loss(t: &TinyDecoder, fmh: &[f64], label: &str) -> f64 {
    let (e, h, k) = (3, 5, 4);
    let s = &t.store;
    let table = get(s, "decoder.embedding.table");
    let lin = |name: &str, x: &[f64], cols: usize| {
        let mut y = vec_mat(x, get(s, &format!("decoder.{name}.weight")), cols);
        if let Ok(id) = s.param_id(&format!("decoder.{name}.bias")) {
            for (v, b) in y.iter_mut().zip(s.param(id).value.data()) {
                *v += b;
            }
        }
        y
    };
    let cs = Charset::new();
    let mut classes: Vec<usize> = label.chars().map(|c| cs.class_of(c).unwrap()).collect();
    classes.push(Charset::EOS);

    let mut hidden = vec![0.0; h];
    let mut prev = Charset::SOS;
    let mut loss = 0.0;
    for (step, &target) in classes.iter().enumerate() {
        let mut x: Vec<f64> = table[prev * e..(prev + 1) * e].to_vec();
        x.extend_from_slice(&fmh[step * k..(step + 1) * k]);
        let xz = lin("gru.x_z", &x, h);
        let hz = lin("gru.h_z", &hidden, h);
        let xr = lin("gru.x_r", &x, h);
        let hr = lin("gru.h_r", &hidden, h);
        let z: Vec<f64> = (0..h).map(|i| sigmoid(xz[i] + hz[i])).collect();
        let r: Vec<f64> = (0..h).map(|i| sigmoid(xr[i] + hr[i])).collect();
        let rh: Vec<f64> = (0..h).map(|i| r[i] * hidden[i]).collect();
        let xh = lin("gru.x_h", &x, h);
        let hh = lin("gru.h_h", &rh, h);
        hidden = (0..h).map(|i| (1.0 - z[i]) * hidden[i] + z[i] * (xh[i] + hh[i]).tanh()).collect();
        let logits = lin("classifier", &hidden, Charset::NUM_CLASSES);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - logits[target];
        prev = target;
    }
    loss
}

pub fn decoder_hand_loss_error(seed: u64, label: &str) -> f64 {
    let t = tiny_decoder(seed, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let fmh = uniform(&mut rng, 6 * 4, -1.0, 1.0);
    let want = hand_loss(&t, &fmh, label);
    let mut ctx = Ctx::new(&t.store, Mode::Eval);
    let fv = ctx.tape.constant(Tensor::new(&[1, 6, 4], fmh).unwrap());
    let targets = encode_targets(&Charset::new(), &[label], 6).unwrap();
    let tf = t.dec.teacher_forced(&mut ctx, fv, &targets).unwrap();
    (ctx.tape.value(tf.loss).data()[0] - want).abs()
}

/// Teacher-forced logits (one row per step) for one sample.
fn forced_logits(t: &TinyDecoder, fmh: &[f64], targets: &[usize]) -> Vec<Vec<f64>> {
    let mut ctx = Ctx::new(&t.store, Mode::Eval);
    let fv = ctx.tape.constant(Tensor::new(&[1, t.dec.cfg.max_length, 4], fmh.to_vec()).unwrap());
    let tf = t.dec.teacher_forced(&mut ctx, fv, &[targets.to_vec()]).unwrap();
    tf.logits.iter().map(|&l| ctx.tape.value(l).data().to_vec()).collect()
}

/// Perturbs step vector `at` and, separately, the target fed into step
/// `at`; logits before `at` must stay bit-identical and step `at` must move.
pub fn causality(seed: u64, at: usize) -> Result<(), String> {
    let t = tiny_decoder(seed, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let fmh = uniform(&mut rng, 6 * 4, -1.0, 1.0);
    let targets = encode_targets(&Charset::new(), &["abcde"], 6).unwrap().remove(0);
    let base = forced_logits(&t, &fmh, &targets);

    let mut fmh2 = fmh.clone();
    for v in &mut fmh2[at * 4..] {
        *v += 0.75;
    }
    let pert = forced_logits(&t, &fmh2, &targets);
    ensure(base[..at] == pert[..at], || format!("step vector {at} leaked into earlier logits"))?;
    ensure(base[at] != pert[at], || format!("step vector {at} had no effect"))?;

    if at >= 1 {
        let mut tg2 = targets.clone();
        for c in &mut tg2[at - 1..targets.len() - 1] {
            *c = (*c + 7) % Charset::NUM_CHARS;
        }
        let pert = forced_logits(&t, &fmh, &tg2);
        ensure(base[..at] == pert[..at], || format!("target {} leaked into earlier logits", at - 1))?;
        ensure(base[at] != pert[at], || format!("target {} had no effect", at - 1))?;
    }
    Ok(())
}

pub fn decoder_contracts() -> Outcome {
    let mut worst = 0.0f64;
    for (seed, label) in [(1, ""), (2, "ab"), (3, "z9?"), (4, "Hello")] {
        worst = worst.max(decoder_hand_loss_error(seed, label));
    }
    ensure(worst < 1e-6, || format!("hand-evaluated loss off by {worst:e}"))?;

    for at in 0..6 {
        causality(11, at)?;
    }

    let mut longest = 0;
    for seed in 0..20 {
        let t = tiny_decoder(seed, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctx = Ctx::new(&t.store, Mode::Eval);
        let fv = ctx.tape.constant(Tensor::new(&[4, 6, 4], uniform(&mut rng, 96, -2.0, 2.0)).unwrap());
        let out = t.dec.greedy(&mut ctx, fv).map_err(e2s)?;
        longest = longest.max(out.iter().map(Vec::len).max().unwrap_or(0));
    }
    ensure(longest <= 6, || format!("greedy produced {longest} > MaxLength symbols"))?;
    Ok(format!("hand loss diff {worst:.1e}, causality at 6 steps, longest greedy {longest} ≤ 6"))
}

// ------------------------------------------------------------- experiments

pub struct Overfit {
    pub trainer: Trainer<f32>,
    pub data: Dataset,
    pub log: Vec<StepMetrics>,
    pub train_accuracy: f64,
    pub secs: f64,
}

pub fn overfit_config() -> Config {
    Config { num_samples: 32, base_channels: 8, batch_size: 16, max_steps: Some(500), ..Config::default() }
}

pub fn run_overfit() -> psan::Result<Overfit> {
    let cfg = overfit_config();
    let data = Dataset::training(&cfg)?;
    let start = Instant::now();
    let mut trainer = Trainer::<f32>::new(&cfg)?;
    let log = trainer.fit(&data, &mut |_| Ok(()), &mut |_, _| Ok(()))?;
    let train_accuracy = evaluate(&trainer.model, &trainer.store, &data, Transform::None, 16)?.accuracy;
    Ok(Overfit { trainer, data, log, train_accuracy, secs: start.elapsed().as_secs_f64() })
}

pub fn overfit(run: &Overfit) -> Outcome {
    let last = run.log.last().ok_or("no steps ran")?;
    let summary = format!(
        "{} steps, final loss {:.4}, train accuracy {:.3}, {:.0}s",
        run.log.len(),
        last.loss,
        run.train_accuracy,
        run.secs
    );
    ensure(run.log.len() <= 500, || summary.clone())?;
    ensure(last.loss < 0.05, || format!("loss too high: {summary}"))?;
    ensure(run.train_accuracy >= 0.95, || format!("accuracy too low: {summary}"))?;
    ensure(run.secs <= 600.0, || format!("too slow: {summary}"))?;

    // A fresh run with the same seed retraces the first steps bit for bit.
    let cfg = Config { max_steps: Some(20), ..overfit_config() };
    let mut again = Trainer::<f32>::new(&cfg).map_err(e2s)?;
    let log = again.fit(&run.data, &mut |_| Ok(()), &mut |_, _| Ok(())).map_err(e2s)?;
    for (a, b) in log.iter().zip(&run.log) {
        ensure(a.loss.to_bits() == b.loss.to_bits(), || format!("rerun diverged at step {}", a.step))?;
    }
    Ok(format!("{summary}, rerun identical over {} steps", log.len()))
}

/// Reduced setting for the VAB ablation so ten 2000-step runs fit a CPU
/// budget: C=4, one unit per structure, a 64-wide decoder and labels of
/// 1–4 characters over lowercase and digits.
pub fn ablation_config(seed: u64, vab: bool) -> Config {
    Config {
        base_channels: 4,
        rus_per_rs: 1,
        vab_enabled: vab,
        hidden_size: 64,
        embedding_dim: 64,
        max_length: 5,
        max_label_len: 4,
        num_samples: 2000,
        max_steps: Some(2000),
        epochs: 1000,
        seed,
        ..Config::default()
    }
}

pub fn held_out_accuracy(cfg: &Config) -> psan::Result<f64> {
    let data = Dataset::training(cfg)?;
    let mut trainer = Trainer::<f32>::new(cfg)?;
    trainer.fit(&data, &mut |_| Ok(()), &mut |_, _| Ok(()))?;
    let held = Dataset::held_out(cfg, 64)?;
    Ok(evaluate(&trainer.model, &trainer.store, &held, Transform::None, 16)?.accuracy)
}

pub fn ablation() -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let with = held_out_accuracy(&ablation_config(seed, true)).map_err(e2s)?;
        let without = held_out_accuracy(&ablation_config(seed, false)).map_err(e2s)?;
        if with >= without {
            wins += 1;
        }
        rows.push(format!("{with:.3}/{without:.3}"));
    }
    let summary = format!("vab/no-vab held-out accuracy per seed [{}], vab ≥ no-vab in {wins}/5", rows.join(", "));
    ensure(wins >= 4, || summary.clone())?;
    Ok(summary)
}

// ------------------------------------------------------------- robustness

fn grid_image(h: usize, w: usize) -> Image {
    Image::from_gray(h, w, &(0..h * w).map(|i| i as f32 / (h * w) as f32).collect::<Vec<_>>()).unwrap()
}

/// Whether `inner` appears in `outer` with its top-left corner at `(y, x)`.
pub fn contains_at(outer: &Image, inner: &Image, y: usize, x: usize) -> bool {
    (0..inner.channels).all(|c| {
        (0..inner.height).all(|r| (0..inner.width).all(|col| outer.at(c, y + r, x + col) == inner.at(c, r, col)))
    })
}

/// Top-left position of `inner` inside `outer`, if any.
pub fn find_sub_rect(outer: &Image, inner: &Image) -> Option<(usize, usize)> {
    if outer.height < inner.height || outer.width < inner.width {
        return None;
    }
    (0..=outer.height - inner.height)
        .flat_map(|y| (0..=outer.width - inner.width).map(move |x| (y, x)))
        .find(|&(y, x)| contains_at(outer, inner, y, x))
}

pub fn geometric_contracts() -> Result<(), String> {
    let tiny = Image::from_gray(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let p = transform::padded(&tiny);
    let want = [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.];
    ensure((p.height, p.width) == (4, 4) && p.to_gray() == want, || format!("padded 2×2 gave {:?}", p.to_gray()))?;

    let e = transform::expanded(&Image::filled(3, 100, 200, 0.5));
    ensure((e.height, e.width) == (110, 220), || format!("expanded 100×200 gave {}×{}", e.height, e.width))?;
    ensure(e.data.iter().all(|&v| v == 0.5), || "expanded constant image changed".into())?;

    let img = grid_image(20, 30);
    let p = transform::padded(&img);
    ensure((p.height, p.width) == (40, 60) && contains_at(&p, &img, 10, 15), || {
        "padded is not a centered copy".into()
    })?;
    ensure(transform::pad_by_offsets(&img, [0.0; 4]) == img, || "zero offsets are not the identity".into())?;
    let full = transform::pad_by_offsets(&img, [4.0, 4.0, 6.0, 6.0]);
    ensure((full.height, full.width) == (28, 42), || format!("max offsets gave {}×{}", full.height, full.width))?;

    for seed in 0..50 {
        for (t, frac) in [(Transform::RPadded, 0.4), (Transform::RExpanded, 0.2)] {
            let a = t.apply(&img, seed);
            ensure(a == t.apply(&img, seed), || format!("{t} not deterministic"))?;
            let max_h = 20 + (frac * 20.0f64).round() as usize;
            let max_w = 30 + (frac * 30.0f64).round() as usize;
            ensure((20..=max_h).contains(&a.height) && (30..=max_w).contains(&a.width), || {
                format!("{t} seed {seed}: {}×{}", a.height, a.width)
            })?;
            ensure(find_sub_rect(&a, &img).is_some(), || format!("{t} seed {seed} lost the original"))?;
        }
    }
    Ok(())
}

pub fn robustness(run: &Overfit) -> Outcome {
    geometric_contracts()?;
    let t = &run.trainer;
    let none = evaluate(&t.model, &t.store, &run.data, Transform::None, 16).map_err(e2s)?.accuracy;
    let padded = evaluate(&t.model, &t.store, &run.data, Transform::Padded, 16).map_err(e2s)?.accuracy;
    ensure(padded <= none, || format!("padded {padded:.3} > none {none:.3}"))?;
    Ok(format!("geometric contracts exact; accuracy none {none:.3}, padded {padded:.3}"))
}

// ------------------------------------------------------------- checkpoint

pub fn checkpoint_round_trip(trainer: &Trainer<f32>, data: &Dataset) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, trainer.cfg(), &trainer.store, trainer.step).map_err(e2s)?;
    let (model, store, step) = checkpoint::load::<f32>(&path).map_err(e2s)?;
    ensure(step == trainer.step, || format!("step {step} != {}", trainer.step))?;
    let again = dir.path().join("again.ckpt");
    checkpoint::save(&again, &model.cfg, &store, step).map_err(e2s)?;
    let (a, b) = (std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    ensure(a == b, || "save→load→save bytes differ".into())?;

    let before = evaluate(&trainer.model, &trainer.store, data, Transform::None, 16).map_err(e2s)?;
    let after = evaluate(&model, &store, data, Transform::None, 16).map_err(e2s)?;
    ensure(before.predictions == after.predictions, || "predictions changed after reload".into())?;

    let truncated = &a[..a.len() - 1];
    let err = checkpoint::from_bytes::<f32>(truncated).err().ok_or("truncated checkpoint loaded")?;
    ensure(err.to_string().contains("payload"), || format!("truncation error does not mention the payload: {err}"))?;
    Ok(format!("{} bytes identical, {} predictions identical", a.len(), before.predictions.len()))
}
