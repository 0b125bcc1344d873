//! Independent reference implementations shared by the integration tests and
//! the acceptance target.

#![allow(dead_code)]

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use unrest::env::STATE_DIM;
use unrest::grad::{causal_self_attention, GradError, Graph, Tensor, Var};

// ---------------------------------------------------------------------------
// Finite-difference gradient checks

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, GradError>>;

/// One random instance: leaf inputs plus a function producing the op output.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

pub struct OpCase {
    pub name: &'static str,
    pub make: fn(&mut StdRng) -> Instance,
}

fn rand_tensor(rng: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn dims(rng: &mut StdRng, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(1..5)).collect()
}

/// Scalarises an op output with a fixed random projection so every output
/// element contributes a distinct weight to the loss.
fn projected(g: &mut Graph, out: Var, proj: &Tensor) -> Result<Var, GradError> {
    let p = g.input(proj.clone());
    let m = g.mul(out, p)?;
    g.sum(m)
}

fn loss_value(inst: &Instance, proj: &Tensor, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (inst.build)(&mut g, &vars).unwrap();
    let l = projected(&mut g, out, proj).unwrap();
    g.value(l).item().unwrap()
}

/// Relative error `|analytic - numeric| / max(|analytic|, |numeric|)` over the
/// concatenated input gradient; zero when both vanish.
pub fn gradcheck(inst: &Instance, rng: &mut StdRng) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (inst.build)(&mut g, &vars).unwrap();
    let proj = rand_tensor(rng, g.value(out).shape(), -1.0, 1.0);
    let l = projected(&mut g, out, &proj).unwrap();
    let grads = g.backward(l).unwrap();

    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for j in 0..inst.inputs[i].numel() {
            let mut plus = inst.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inst.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (loss_value(inst, &proj, &plus) - loss_value(inst, &proj, &minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            diff += (a - numeric) * (a - numeric);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-10 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

fn inst(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var, GradError> + 'static) -> Instance {
    Instance {
        inputs,
        build: Box::new(build),
    }
}

fn binary_pair(rng: &mut StdRng) -> Vec<Tensor> {
    let k = rng.random_range(1..4);
    let s = dims(rng, k);
    vec![rand_tensor(rng, &s, -1.0, 1.0), rand_tensor(rng, &s, -1.0, 1.0)]
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            make: |rng| {
                let (b, m, k, n) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
                inst(vec![rand_tensor(rng, &[b, m, k], -1.0, 1.0), rand_tensor(rng, &[k, n], -1.0, 1.0)], |g, v| {
                    g.matmul(v[0], v[1])
                })
            },
        },
        OpCase {
            name: "add",
            make: |rng| inst(binary_pair(rng), |g, v| g.add(v[0], v[1])),
        },
        OpCase {
            name: "sub",
            make: |rng| inst(binary_pair(rng), |g, v| g.sub(v[0], v[1])),
        },
        OpCase {
            name: "mul",
            make: |rng| inst(binary_pair(rng), |g, v| g.mul(v[0], v[1])),
        },
        OpCase {
            name: "add_row",
            make: |rng| {
                let (m, n) = (rng.random_range(1..5), rng.random_range(1..5));
                inst(vec![rand_tensor(rng, &[m, n], -1.0, 1.0), rand_tensor(rng, &[n], -1.0, 1.0)], |g, v| {
                    g.add_row(v[0], v[1])
                })
            },
        },
        OpCase {
            name: "scale",
            make: |rng| {
                let c = rng.random_range(-3.0..3.0);
                let s = dims(rng, 2);
                inst(vec![rand_tensor(rng, &s, -1.0, 1.0)], move |g, v| g.scale(v[0], c))
            },
        },
        OpCase {
            name: "tanh",
            make: |rng| {
                let s = dims(rng, 2);
                inst(vec![rand_tensor(rng, &s, -2.0, 2.0)], |g, v| g.tanh(v[0]))
            },
        },
        OpCase {
            name: "exp",
            make: |rng| {
                let s = dims(rng, 2);
                inst(vec![rand_tensor(rng, &s, -1.5, 1.5)], |g, v| g.exp(v[0]))
            },
        },
        OpCase {
            name: "gelu",
            make: |rng| {
                let s = dims(rng, 2);
                inst(vec![rand_tensor(rng, &s, -3.0, 3.0)], |g, v| g.gelu(v[0]))
            },
        },
        OpCase {
            name: "softmax",
            make: |rng| {
                let s = dims(rng, 3);
                inst(vec![rand_tensor(rng, &s, -2.0, 2.0)], |g, v| g.softmax(v[0]))
            },
        },
        OpCase {
            name: "layer_norm",
            make: |rng| {
                let (m, n) = (rng.random_range(1..4), rng.random_range(2..6));
                inst(
                    vec![
                        rand_tensor(rng, &[m, n], -2.0, 2.0),
                        rand_tensor(rng, &[n], 0.5, 1.5),
                        rand_tensor(rng, &[n], -0.5, 0.5),
                    ],
                    |g, v| g.layer_norm(v[0], v[1], v[2]),
                )
            },
        },
        OpCase {
            name: "attention",
            make: |rng| {
                let heads = rng.random_range(1..3);
                let (b, t, d) = (rng.random_range(1..3), rng.random_range(1..5), heads * rng.random_range(1..3));
                let valid: Vec<bool> = (0..b * t).map(|_| rng.random::<f64>() < 0.8).collect();
                let masked = rng.random::<bool>();
                inst(
                    vec![
                        rand_tensor(rng, &[b, t, d], -1.0, 1.0),
                        rand_tensor(rng, &[b, t, d], -1.0, 1.0),
                        rand_tensor(rng, &[b, t, d], -1.0, 1.0),
                    ],
                    move |g, v| g.attention(v[0], v[1], v[2], heads, masked.then_some(&valid[..])),
                )
            },
        },
        OpCase {
            name: "causal_self_attention",
            make: |rng| {
                let (t, d) = (rng.random_range(1..5), 2 * rng.random_range(1..3));
                inst(vec![rand_tensor(rng, &[t, d], -1.0, 1.0)], |g, v| causal_self_attention(g, v[0], 2))
            },
        },
        OpCase {
            name: "gather",
            make: |rng| {
                let (vocab, d, n) = (rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..7));
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
                inst(vec![rand_tensor(rng, &[vocab, d], -1.0, 1.0)], move |g, v| g.gather(v[0], &idx, &[1, n]))
            },
        },
        OpCase {
            name: "rows",
            make: |rng| {
                let (m, n, k) = (rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..6));
                let rows: Vec<usize> = (0..k).map(|_| rng.random_range(0..m)).collect();
                inst(vec![rand_tensor(rng, &[m, n], -1.0, 1.0)], move |g, v| g.rows(v[0], &rows))
            },
        },
        OpCase {
            name: "concat",
            make: |rng| {
                let lead = dims(rng, 2);
                let (na, nb) = (rng.random_range(1..4), rng.random_range(1..4));
                let (mut sa, mut sb) = (lead.clone(), lead);
                sa.push(na);
                sb.push(nb);
                inst(vec![rand_tensor(rng, &sa, -1.0, 1.0), rand_tensor(rng, &sb, -1.0, 1.0)], |g, v| {
                    g.concat(v[0], v[1])
                })
            },
        },
        OpCase {
            name: "reshape",
            make: |rng| {
                let (a, b, c) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
                inst(vec![rand_tensor(rng, &[a, b, c], -1.0, 1.0)], move |g, v| g.reshape(v[0], &[a * b, c]))
            },
        },
        OpCase {
            name: "sum",
            make: |rng| {
                let s = dims(rng, 3);
                inst(vec![rand_tensor(rng, &s, -1.0, 1.0)], |g, v| g.sum(v[0]))
            },
        },
        OpCase {
            name: "mean",
            make: |rng| {
                let s = dims(rng, 3);
                inst(vec![rand_tensor(rng, &s, -1.0, 1.0)], |g, v| g.mean(v[0]))
            },
        },
        OpCase {
            name: "dropout",
            make: |rng| {
                let s = dims(rng, 2);
                let (p, seed) = (rng.random_range(0.1..0.6), rng.random::<u64>());
                inst(vec![rand_tensor(rng, &s, -1.0, 1.0)], move |g, v| {
                    let mut r = StdRng::seed_from_u64(seed);
                    g.dropout(v[0], p, &mut r)
                })
            },
        },
        OpCase {
            name: "mse",
            make: |rng| {
                let (m, n) = (rng.random_range(1..5), rng.random_range(1..4));
                let target = rand_tensor(rng, &[m, n], -1.0, 1.0);
                let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..2.0)).collect();
                inst(vec![rand_tensor(rng, &[m, n], -1.0, 1.0)], move |g, v| g.mse(v[0], &target, Some(&w)))
            },
        },
        OpCase {
            name: "gaussian_nll",
            make: |rng| {
                let m = rng.random_range(1..6);
                let target = rand_tensor(rng, &[m, 1], -1.0, 1.0);
                let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..2.0)).collect();
                inst(
                    vec![rand_tensor(rng, &[m, 1], -1.0, 1.0), rand_tensor(rng, &[m, 1], -1.0, 1.0)],
                    move |g, v| g.gaussian_nll(v[0], v[1], &target, Some(&w)),
                )
            },
        },
    ]
}

/// Worst relative error per op over `instances` random draws.
pub fn gradcheck_all(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = StdRng::seed_from_u64(seed);
    op_cases()
        .iter()
        .map(|case| {
            let worst = (0..instances)
                .map(|_| {
                    let inst = (case.make)(&mut rng);
                    gradcheck(&inst, &mut rng)
                })
                .fold(0.0, f64::max);
            (case.name, worst)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Segmentation reference

/// Reference segmentation computed per step: an uncertain part opened at a
/// flagged step `o` ends at the smallest `e` with `e - o >= c` whose last
/// `c - 1` steps are all unflagged (or at the trajectory end). Parts are the
/// maximal runs of equal labels. Returns `(start, end, uncertain)`.
pub fn brute_segment(flags: &[bool], c: usize) -> Vec<(usize, usize, bool)> {
    let n = flags.len();
    let mut uncertain = vec![false; n];
    let mut o = 0;
    while o < n {
        if !flags[o] {
            o += 1;
            continue;
        }
        let e = (o + 1..=n)
            .find(|&e| e - o >= c && (e + 1 - c..e).all(|k| !flags[k]))
            .unwrap_or(n);
        for u in &mut uncertain[o..e] {
            *u = true;
        }
        o = e;
    }
    let mut parts = vec![];
    let mut s = 0;
    for t in 1..=n {
        if t == n || uncertain[t] != uncertain[s] {
            parts.push((s, t, uncertain[s]));
            s = t;
        }
    }
    parts
}

/// Reference relabel: in a certain part the truncated return at step `t` is
/// the plain sum of rewards from `t` to the end of that part, the span is
/// the number of those steps; uncertain steps carry span 0 and return 0.
pub fn brute_relabel(rewards: &[f64], parts: &[(usize, usize, bool)]) -> (Vec<f64>, Vec<usize>) {
    let mut rh = vec![0.0; rewards.len()];
    let mut h = vec![0; rewards.len()];
    for &(s, e, unc) in parts {
        if unc {
            continue;
        }
        for t in s..e {
            let mut acc = 0.0;
            for r in &rewards[t..e] {
                acc += r;
            }
            rh[t] = acc;
            h[t] = e - t;
        }
    }
    (rh, h)
}

// ---------------------------------------------------------------------------
// Nearest-neighbour reference

/// Random state vectors; every fourth axis takes only four integer values so
/// exact distance ties occur.
pub fn tie_prone_states(rng: &mut impl Rng, n: usize) -> Vec<[f64; STATE_DIM]> {
    (0..n)
        .map(|_| {
            let mut s = [0.0; STATE_DIM];
            for (d, v) in s.iter_mut().enumerate() {
                *v = if d % 4 == 0 {
                    rng.random_range(0..4) as f64
                } else {
                    rng.random_range(-10.0..10.0) * (d + 1) as f64
                };
            }
            s
        })
        .collect()
}

/// Mean value of the `k` nearest points by squared Euclidean distance,
/// ties broken by index, found by a full sort.
pub fn brute_knn_mean(points: &[Vec<f64>], values: &[f64], q: &[f64], k: usize) -> f64 {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = k.min(d.len());
    d[..k].iter().map(|&(_, i)| values[i]).sum::<f64>() / k as f64
}

// ---------------------------------------------------------------------------
// Monte Carlo references for Gaussian math

/// Mean and variance of an equal-weight Gaussian mixture by sampling.
pub fn mc_mixture_moments(mus: &[f64], vars: &[f64], samples: usize, seed: u64) -> (f64, f64) {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = StdRng::seed_from_u64(seed);
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let k = rng.random_range(0..mus.len());
        let z: f64 = StandardNormal.sample(&mut rng);
        let x = mus[k] + vars[k].sqrt() * z;
        s1 += x;
        s2 += x * x;
    }
    let m = s1 / samples as f64;
    (m, s2 / samples as f64 - m * m)
}

/// `KL(p || q)` for univariate Gaussians as the sample mean of the log-density ratio under `p`.
pub fn mc_kl(p: (f64, f64), q: (f64, f64), samples: usize, seed: u64) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = StdRng::seed_from_u64(seed);
    let logpdf = |x: f64, (m, v): (f64, f64)| -0.5 * ((x - m) * (x - m) / v + v.ln() + std::f64::consts::TAU.ln());
    let mut acc = 0.0;
    for _ in 0..samples {
        let z: f64 = StandardNormal.sample(&mut rng);
        let x = p.0 + p.1.sqrt() * z;
        acc += logpdf(x, p) - logpdf(x, q);
    }
    acc / samples as f64
}
