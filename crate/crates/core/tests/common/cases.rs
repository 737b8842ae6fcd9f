//! One random gradient-check instance per call for every differentiable
//! operation and for whole blocks. Shapes stay within N ≤ 8, d ≤ 16.

use rand::Rng;

use transject::baseline::{Baseline, BaselineConfig, Variant};
use transject::model::{Pooling, Task, TokenBatch};
use transject::ortho::{orthogonalize, semi_orthogonalize, OrthogonalParam};
use transject::param::{ModelRng, Param};
use transject::spectral::{approx_eigen, gram, SigmaMode};
use transject::transject::{TransJect, TransJectConfig};
use transject::{Result, Tensor};

use super::{away_from_zero, gradcheck, normals, param_gradcheck, rng, uniform_usize};

type Input = (Vec<f64>, Vec<usize>);
pub type Case = fn(u64) -> Result<f64>;

fn input(r: &mut ModelRng, shape: &[usize]) -> Input {
    (normals(r, shape.iter().product()), shape.to_vec())
}

fn dims(r: &mut ModelRng) -> (usize, usize, usize) {
    (uniform_usize(r, 1, 2), uniform_usize(r, 1, 8), uniform_usize(r, 1, 16))
}

fn mask(r: &mut ModelRng, b: usize, n: usize) -> Vec<f64> {
    let mut m: Vec<f64> = (0..b * n).map(|_| if r.random_bool(0.7) { 1.0 } else { 0.0 }).collect();
    for bi in 0..b {
        m[bi * n] = 1.0;
    }
    m
}

fn binary(seed: u64, op: fn(&Tensor, &Tensor) -> Result<Tensor>) -> Result<f64> {
    let r = &mut rng(seed);
    let (b, n, d) = dims(r);
    let full = [b, n, d];
    let rhs: Vec<usize> = full.iter().map(|&e| if r.random_bool(0.4) { 1 } else { e }).collect();
    let x = input(r, &full);
    let y = input(r, &rhs);
    gradcheck(&[x, y], |t| op(&t[0], &t[1]), seed)
}

fn unary(seed: u64, gap: f64, op: fn(&Tensor) -> Result<Tensor>) -> Result<f64> {
    let r = &mut rng(seed);
    let (b, n, d) = dims(r);
    let x = (away_from_zero(r, b * n * d, gap), vec![b, n, d]);
    gradcheck(&[x], |t| op(&t[0]), seed)
}

fn add(seed: u64) -> Result<f64> {
    binary(seed, |a, b| a.add(b))
}
fn sub(seed: u64) -> Result<f64> {
    binary(seed, |a, b| a.sub(b))
}
fn mul(seed: u64) -> Result<f64> {
    binary(seed, |a, b| a.mul(b))
}
fn scale(seed: u64) -> Result<f64> {
    unary(seed, 0.0, |x| Ok(x.scale(-1.7).add_scalar(0.3).neg()))
}
fn elu(seed: u64) -> Result<f64> {
    unary(seed, 1e-3, |x| Ok(x.elu()))
}
fn relu(seed: u64) -> Result<f64> {
    unary(seed, 1e-3, |x| Ok(x.relu()))
}
fn sigmoid(seed: u64) -> Result<f64> {
    unary(seed, 0.0, |x| Ok(x.scale(3.0).sigmoid()))
}
fn exp_square(seed: u64) -> Result<f64> {
    unary(seed, 0.0, |x| Ok(x.exp().add(&x.square())?))
}
fn reductions(seed: u64) -> Result<f64> {
    let axis = (seed % 3) as usize;
    let r = &mut rng(seed);
    let (b, n, d) = dims(r);
    gradcheck(
        &[input(r, &[b, n, d])],
        |t| {
            let s = t[0].sum_axis(axis)?;
            let k = s.numel();
            s.reshape(&[k])?.add(&t[0].mean().scale(2.0).reshape(&[1])?)?.add(&t[0].sum().reshape(&[1])?)
        },
        seed,
    )
}
fn reshape_transpose(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (b, n, d) = dims(r);
    gradcheck(
        &[input(r, &[b, n, d]), input(r, &[d, n])],
        |t| {
            let a = t[0].transpose()?.reshape(&[b * d, n])?;
            let m = t[1].transpose()?;
            a.matmul(&m)
        },
        seed,
    )
}
fn concat_slice(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (b, n, d) = dims(r);
    let d2 = uniform_usize(r, 1, 16);
    let cut = uniform_usize(r, 0, d + d2 - 1);
    gradcheck(
        &[input(r, &[b, n, d]), input(r, &[b, n, d2])],
        |t| Tensor::concat_last(&[&t[0], &t[1]])?.slice_last(cut, d + d2)?.square().sum_axis(2),
        seed,
    )
}
fn gather(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (b, n, d) = dims(r);
    let v = uniform_usize(r, 1, 10);
    let ids: Vec<usize> = (0..b * n).map(|_| r.random_range(0..v)).collect();
    gradcheck(&[input(r, &[v, d])], |t| t[0].gather_rows(&ids, &[b, n]), seed)
}
fn heads(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (b, n, _) = dims(r);
    let h = uniform_usize(r, 1, 4);
    let dh = uniform_usize(r, 1, 4);
    gradcheck(
        &[input(r, &[b, n, h * dh])],
        |t| {
            let s = t[0].split_heads(h)?;
            s.mul(&s)?.merge_heads(h)
        },
        seed,
    )
}
fn softmax(seed: u64) -> Result<f64> {
    let axis = 1 + (seed % 2) as usize;
    unary(seed, 0.0, match axis {
        1 => |x: &Tensor| x.softmax(1),
        _ => |x: &Tensor| x.softmax(2),
    })
}
fn cross_entropy(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let rows = uniform_usize(r, 1, 8);
    let c = uniform_usize(r, 2, 10);
    let targets: Vec<usize> = (0..rows).map(|_| r.random_range(0..c)).collect();
    let weights: Vec<f64> = (0..rows).map(|i| if i == 0 || r.random_bool(0.7) { 1.0 } else { 0.0 }).collect();
    let weighted = seed % 2 == 0;
    gradcheck(
        &[input(r, &[rows, c])],
        |t| t[0].scale(2.0).cross_entropy(&targets, weighted.then_some(weights.as_slice())),
        seed,
    )
}
fn pooling(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (b, n, d) = dims(r);
    let m = mask(r, b, n);
    gradcheck(
        &[input(r, &[b, n, d])],
        |t| t[0].mean_pool(Some(&m))?.add(&t[0].max_pool(Some(&m))?),
        seed,
    )
}
fn layer_norm(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (b, n, d) = dims(r);
    let d = d.max(2);
    gradcheck(&[input(r, &[b, n, d])], |t| Ok(t[0].layer_norm_last(1e-5)), seed)
}
fn standardize(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (b, _, d) = dims(r);
    let d = d.max(2);
    gradcheck(&[input(r, &[b, d])], |t| Ok(t[0].standardize_last()), seed)
}
fn matmul(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (b, n, d) = dims(r);
    let m = uniform_usize(r, 1, 16);
    let (lhs, rhs) = match seed % 3 {
        0 => (vec![n, d], vec![d, m]),
        1 => (vec![b, n, d], vec![d, m]),
        _ => (vec![b, n, d], vec![b, d, m]),
    };
    gradcheck(&[input(r, &lhs), input(r, &rhs)], |t| t[0].matmul(&t[1]), seed)
}
fn solve(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let d = uniform_usize(r, 1, 16);
    let k = uniform_usize(r, 1, 8);
    let mut a = normals(r, d * d).iter().map(|v| 0.3 * v).collect::<Vec<_>>();
    for i in 0..d {
        a[i * d + i] += 3.0;
    }
    gradcheck(&[(a, vec![d, d]), input(r, &[d, k])], |t| Tensor::linear_solve(&t[0], &t[1]), seed)
}
fn qr(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let n = uniform_usize(r, 1, 8);
    let m = uniform_usize(r, n, 16);
    gradcheck(&[input(r, &[m, n])], |t| t[0].qr_thin(), seed)
}
fn cayley(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let d = uniform_usize(r, 1, 16);
    let raw = normals(r, d * d).iter().map(|v| v / (d as f64).sqrt()).collect();
    gradcheck(&[(raw, vec![d, d])], |t| orthogonalize(&t[0]), seed)
}
fn semi_orthogonal(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let cols = uniform_usize(r, 1, 16);
    let rows = uniform_usize(r, cols, 16);
    gradcheck(&[input(r, &[rows, cols])], |t| semi_orthogonalize(&t[0]), seed)
}
fn gram_case(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (b, n, d) = dims(r);
    gradcheck(&[input(r, &[b, n, d])], |t| gram(&t[0]), seed)
}

struct Spectral {
    g: Param,
    u: OrthogonalParam,
}

fn spectral_case(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (b, n, d) = dims(r);
    let x = Tensor::new(normals(r, b * n * d), &[b, n, d])?;
    let g = gram(&x)?;
    let mut s = Spectral {
        g: Param::new("g", g.to_vec(), &[b, d, d])?,
        u: OrthogonalParam::random("u", d, 1.0 / (d as f64).sqrt(), r)?,
    };
    // sigma_raw flows into both g and u
    let e1 = param_gradcheck(
        &mut s,
        |s| vec![&mut s.g, s.u.raw_mut()],
        |s| Ok(approx_eigen(s.g.tensor(), &s.u)?.sigma_raw),
        seed,
    )?;
    // the reconstruction term only trains the basis
    let e2 = param_gradcheck(&mut s, |s| vec![s.u.raw_mut()], |s| Ok(approx_eigen(s.g.tensor(), &s.u)?.recon_loss), seed)?;
    Ok(e1.max(e2))
}

fn jitter_all(params: Vec<&mut Param>, r: &mut ModelRng, std: f64) -> Result<()> {
    for p in params {
        let d: Vec<f64> = p.data().iter().zip(normals(r, p.numel())).map(|(a, b)| a + std * b).collect();
        p.assign(d)?;
    }
    Ok(())
}

struct SublayerCase {
    model: TransJect,
    x: Param,
    sigma: Param,
}

pub fn small_transject(d: usize, experts: usize, layers: usize, vocab: usize, max_len: usize, seed: u64) -> Result<TransJect> {
    TransJect::new(TransJectConfig {
        layers,
        d_model: d,
        experts,
        vocab_size: vocab,
        max_len,
        sigma_mode: SigmaMode::Approximated,
        recon_weight: 0.1,
        task: Task::Classification { classes: 3 },
        pooling: Pooling::Mean,
        tie_orf_residual: false,
        seed,
    })
}

fn transject_sublayer(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (b, n, _) = dims(r);
    let d = 2 * uniform_usize(r, 1, 8);
    let experts = uniform_usize(r, 1, 3);
    let mut case = SublayerCase {
        model: small_transject(d, experts, 3, 6, n, seed)?,
        x: Param::new("x", normals(r, b * n * d), &[b, n, d])?,
        sigma: Param::new("sigma", (0..b * d).map(|_| r.random::<f64>()).collect(), &[b, d])?,
    };
    // move residual weights and gates off their init so every branch matters
    jitter_all(case.model.params_mut().into_iter().filter(|p| p.name().starts_with("layer0.")).collect(), r, 1.0)?;
    let m = mask(r, b, n);
    param_gradcheck(
        &mut case,
        |c| {
            let mut ps = vec![&mut c.x, &mut c.sigma];
            ps.extend(c.model.params_mut().into_iter().filter(|p| p.name().starts_with("layer0.")));
            ps
        },
        |c| Ok(c.model.sublayer(0, c.x.tensor(), c.sigma.tensor(), Some(&m))?.0),
        seed,
    )
}

fn transject_encoder(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (b, n, _) = dims(r);
    let d = 2 * uniform_usize(r, 1, 4);
    let mut model = small_transject(d, 2, 3, 5, n, seed)?;
    jitter_all(model.params_mut(), r, 0.5)?;
    let tokens: Vec<usize> = (0..b * n).map(|_| r.random_range(0..5)).collect();
    let batch = TokenBatch::new(tokens, b, n, mask(r, b, n))?;
    let logits = param_gradcheck(&mut model, |m| m.params_mut(), |m| Ok(m.forward(&batch)?.logits), seed)?;
    // the reconstruction term sees the gram detached, so only the basis
    // receives its gradient
    let recon = param_gradcheck(
        &mut model,
        |m| m.params_mut().into_iter().filter(|p| p.name() == "spectral.u").collect(),
        |m| Ok(m.forward(&batch)?.recon_loss.unwrap()),
        seed,
    )?;
    Ok(logits.max(recon))
}

struct BlockCase {
    model: Baseline,
    x: Param,
}

fn baseline_block(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (b, n, _) = dims(r);
    let heads = uniform_usize(r, 1, 2);
    let d = heads * uniform_usize(r, 1, 16 / heads);
    let variant = [Variant::Vanilla, Variant::ReZero, Variant::Orthogonal][(seed % 3) as usize];
    let model = Baseline::new(BaselineConfig {
        layers: 1,
        d_model: d,
        heads,
        d_ff: 2 * d,
        variant,
        vocab_size: 4,
        max_len: n,
        task: Task::Classification { classes: 2 },
        pooling: Pooling::Mean,
        dropout: 0.0,
        seed,
    })?;
    let mut case = BlockCase { model, x: Param::new("x", normals(r, b * n * d), &[b, n, d])? };
    jitter_all(case.model.params_mut().into_iter().filter(|p| p.name().starts_with("block0.")).collect(), r, 0.3)?;
    let m = mask(r, b, n);
    param_gradcheck(
        &mut case,
        |c| {
            let mut ps = vec![&mut c.x];
            ps.extend(c.model.params_mut().into_iter().filter(|p| p.name().starts_with("block0.")));
            ps
        },
        |c| c.model.block(0, c.x.tensor(), Some(&m), false),
        seed,
    )
}

pub fn all() -> Vec<(&'static str, Case)> {
    vec![
        ("add", add),
        ("sub", sub),
        ("mul", mul),
        ("scale/add_scalar/neg", scale),
        ("elu", elu),
        ("relu", relu),
        ("sigmoid", sigmoid),
        ("exp/square", exp_square),
        ("sum/mean/sum_axis", reductions),
        ("reshape/transpose", reshape_transpose),
        ("concat/slice", concat_slice),
        ("gather_rows", gather),
        ("split/merge heads", heads),
        ("softmax", softmax),
        ("cross_entropy", cross_entropy),
        ("mean/max pool", pooling),
        ("layer_norm", layer_norm),
        ("standardize", standardize),
        ("matmul", matmul),
        ("linear_solve", solve),
        ("qr_thin", qr),
        ("cayley", cayley),
        ("semi_orthogonal", semi_orthogonal),
        ("gram", gram_case),
        ("approx_eigen", spectral_case),
        ("transject sublayer", transject_sublayer),
        ("transject encoder", transject_encoder),
        ("baseline block", baseline_block),
    ]
}
