//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use coastcast::autograd::{finite_diff_grad, GradCheck};
use coastcast::blocks::{branch_widths, ForwardCtx};
use coastcast::models::{Architecture, ModelConfig};
use coastcast::nn::{Mode, Padding};
use coastcast::{ParamStore, Result, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(lo..hi))).unwrap()
}

/// Nested-loop 3D cross-correlation over `(N,T,H,W,C)` with weights
/// `(kt,kh,kw,Cin,Cout)`. Sums taps in `(dt, dh, dw, ci)` order.
pub fn reference_conv3d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, padding: Padding) -> Tensor<T> {
    let [n, t, h, wd, cin] = <[usize; 5]>::try_from(x.shape()).unwrap();
    let [kt, kh, kw, wcin, cout] = <[usize; 5]>::try_from(w.shape()).unwrap();
    assert_eq!(cin, wcin);
    let (pads, outs) = match padding {
        Padding::Same => (
            [(kt - 1) / 2, (kh - 1) / 2, (kw - 1) / 2],
            [t, h, wd],
        ),
        Padding::Valid => ([0, 0, 0], [t - kt + 1, h - kh + 1, wd - kw + 1]),
    };
    let mut out = Vec::with_capacity(n * outs[0] * outs[1] * outs[2] * cout);
    for b in 0..n {
        for to in 0..outs[0] {
            for ho in 0..outs[1] {
                for wo in 0..outs[2] {
                    for co in 0..cout {
                        let mut acc = T::zero();
                        for dt in 0..kt {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let ti = (to + dt) as isize - pads[0] as isize;
                                    let hi = (ho + dh) as isize - pads[1] as isize;
                                    let wi = (wo + dw) as isize - pads[2] as isize;
                                    if ti < 0 || hi < 0 || wi < 0 || ti >= t as isize || hi >= h as isize || wi >= wd as isize {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        let xv = x.at(&[b, ti as usize, hi as usize, wi as usize, ci]);
                                        let wv = w.at(&[dt, dh, dw, ci, co]);
                                        acc = acc + xv * wv;
                                    }
                                }
                            }
                        }
                        if let Some(bias) = bias {
                            acc = acc + bias.data()[co];
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    Tensor::new(&[n, outs[0], outs[1], outs[2], cout], out).unwrap()
}

/// `Σ y ⊙ R` with fixed random `R`, so every output element matters.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let r = tape.leaf(uniform(&shape, &mut rng(seed), -1.0, 1.0));
    let p = tape.mul(y, r).unwrap();
    tape.sum(p)
}

/// Compares tape gradients of every input against central differences
/// (step 1e-5). `build` maps leaf vars to a scalar.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F) -> GradCheck
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(root).unwrap();
    let mut report: Option<GradCheck> = None;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&tape, vars[i]);
        let numeric = finite_diff_grad(
            |probe| {
                let mut t = Tape::no_grad();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.leaf(if j == i { probe.clone() } else { x.clone() }))
                    .collect();
                let r = build(&mut t, &vs).unwrap();
                t.value(r).item().unwrap()
            },
            input,
            1e-5,
        );
        let c = GradCheck::compare(&analytic, &numeric);
        report = Some(match report {
            Some(r) => r.merge(c),
            None => c,
        });
    }
    report.expect("at least one input")
}

/// Gradient check of a parameterized forward pass with respect to its
/// input and every parameter in `params`. The scalar is `project(f(x))`.
pub fn check_ctx_gradients<F>(
    x: &Tensor<f64>,
    params: &ParamStore<f64>,
    buffers: &ParamStore<f64>,
    mode: Mode,
    f: F,
) -> GradCheck
where
    F: Fn(&mut ForwardCtx<'_, f64>, Var) -> Result<Var>,
{
    let scalar = |probe_x: &Tensor<f64>, store: &ParamStore<f64>| -> f64 {
        let mut ctx = ForwardCtx::new(Tape::no_grad(), store, buffers, mode, 5);
        let xv = ctx.tape.leaf(probe_x.clone());
        let y = f(&mut ctx, xv).unwrap();
        let r = project(&mut ctx.tape, y, 99);
        ctx.tape.value(r).item().unwrap()
    };

    let mut ctx = ForwardCtx::new(Tape::new(), params, buffers, mode, 5);
    let xv = ctx.tape.leaf(x.clone());
    let y = f(&mut ctx, xv).unwrap();
    let root = project(&mut ctx.tape, y, 99);
    let (tape, vars, _) = ctx.into_parts();
    let grads = tape.backward(root).unwrap();

    let numeric_x = finite_diff_grad(|p| scalar(p, params), x, 1e-5);
    let mut report = GradCheck::compare(&grads.wrt(&tape, xv), &numeric_x);
    for (name, value) in params.iter() {
        let analytic = match vars.get(name) {
            Some(&v) => grads.wrt(&tape, v),
            None => Tensor::zeros(value.shape()).unwrap(),
        };
        let numeric = finite_diff_grad(
            |p| {
                let mut store = params.clone();
                *store.get_mut(name).unwrap() = p.clone();
                scalar(x, &store)
            },
            value,
            1e-5,
        );
        report = report.merge(GradCheck::compare(&analytic, &numeric));
    }
    report
}

pub fn conv(k: usize, cin: usize, cout: usize) -> usize {
    k * cin * cout + cout
}

/// Parameter total written out per layer, independent of the builder.
pub fn hand_total(c: &ModelConfig) -> usize {
    let block = |cin: usize, co: usize| -> usize {
        let proj = if cin != co { conv(1, cin, co) } else { 0 };
        match c.architecture {
            Architecture::Plain => conv(27, cin, co) + conv(27, co, co),
            Architecture::Residual => conv(27, cin, co) + 2 * conv(27, co, co) + 2 * co + proj,
            Architecture::InceptionResidual => {
                let r = (cin / 2).max(1);
                let w = branch_widths(co, 3);
                3 * conv(1, cin, r)
                    + conv(1, r, w[0])
                    + conv(27, r, w[1])
                    + conv(27, r, w[2])
                    + conv(27, w[2], w[2])
                    + conv(1, w.iter().sum(), co)
                    + 2 * co
                    + proj
            }
            Architecture::AsymmInceptionResidual => {
                let w = branch_widths(co, c.asymm_branch_sizes.len());
                let branches: usize = c
                    .asymm_branch_sizes
                    .iter()
                    .zip(&w)
                    .map(|(&k, &wi)| conv(k, cin, wi) + 2 * conv(k, wi, wi))
                    .sum();
                branches + conv(1, w.iter().sum(), co) + 2 * co + proj
            }
        }
    };
    let reducer = |ch: usize| conv(c.lags, ch, ch);
    let n = c.filters();
    let mut total = 0;
    let mut cin = c.variables;
    for i in 0..c.depth {
        total += block(cin, n << i) + reducer(n << i);
        cin = n << i;
    }
    total += block(cin, n << c.depth) + reducer(n << c.depth);
    for i in (0..c.depth).rev() {
        total += block((n << (i + 1)) + (n << i), n << i);
    }
    total + conv(1, n, c.variables)
}
