//! Finite-difference sweep over every primitive at the shapes the detector
//! uses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, Array, Graph, GradError, Var};

type Readout = Box<dyn Fn(&mut Graph, Var) -> Result<Var, GradError>>;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub seeds: usize,
    pub max_error: f64,
}

pub fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// `sum(y ⊙ w)` for fixed random weights (cycled to `y`'s size), so every
/// output element matters.
fn weighted(g: &mut Graph, y: Var, w: &Array) -> Result<Var, GradError> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let cycled = w.data().iter().cycle().take(n).copied().collect();
    let w = g.constant(Array::new(&shape, cycled)?);
    let p = g.mul(y, w)?;
    g.sum(p)
}

struct Case {
    name: &'static str,
    build: fn(&mut ChaCha8Rng) -> (Array, Readout),
}

macro_rules! unary_case {
    ($name:expr, $shape:expr, $lo:expr, $hi:expr, |$g:ident, $x:ident| $body:expr) => {
        Case {
            name: $name,
            build: |rng| {
                let x = random_array(rng, &$shape, $lo, $hi);
                let n: usize = $shape.iter().product();
                let w = random_array(rng, &[n], -1.0, 1.0);
                let f: Readout = Box::new(move |$g: &mut Graph, $x: Var| {
                    let y = $body?;
                    weighted($g, y, &w)
                });
                (x, f)
            },
        }
    };
}

/// Cases whose readout needs a second random operand `c` of the same shape.
macro_rules! binary_case {
    ($name:expr, $shape:expr, $lo:expr, $hi:expr, |$g:ident, $x:ident, $c:ident| $body:expr) => {
        Case {
            name: $name,
            build: |rng| {
                let x = random_array(rng, &$shape, $lo, $hi);
                let other = random_array(rng, &$shape, $lo, $hi);
                let n: usize = $shape.iter().product();
                let w = random_array(rng, &[n], -1.0, 1.0);
                let f: Readout = Box::new(move |$g: &mut Graph, $x: Var| {
                    let $c = $g.constant(other.clone());
                    let y = $body?;
                    weighted($g, y, &w)
                });
                (x, f)
            },
        }
    };
}

fn cases() -> Vec<Case> {
    vec![
        binary_case!("add", [3, 4], -1.0, 1.0, |g, x, c| g.add(x, c)),
        binary_case!("sub", [3, 4], -1.0, 1.0, |g, x, c| g.sub(c, x)),
        binary_case!("mul", [3, 4], -1.0, 1.0, |g, x, c| {
            let xx = g.mul(x, x)?;
            let xc = g.mul(x, c)?;
            g.add(xx, xc)
        }),
        binary_case!("div", [3, 4], 0.5, 2.0, |g, x, c| {
            let a = g.div(c, x)?;
            let b = g.div(x, c)?;
            g.add(a, b)
        }),
        binary_case!("minimum", [12], -1.0, 1.0, |g, x, c| g.minimum(x, c)),
        binary_case!("maximum", [12], -1.0, 1.0, |g, x, c| g.maximum(c, x)),
        unary_case!("add_scalar", [5], -1.0, 1.0, |g, x| g.add_scalar(x, 0.7)),
        unary_case!("mul_scalar", [5], -1.0, 1.0, |g, x| g.mul_scalar(x, -1.3)),
        unary_case!("relu", [4, 5], -1.0, 1.0, |g, x| g.relu(x)),
        unary_case!("sigmoid", [4, 5], -3.0, 3.0, |g, x| g.sigmoid(x)),
        unary_case!("exp", [6], -2.0, 2.0, |g, x| g.exp(x)),
        unary_case!("ln", [6], 0.3, 3.0, |g, x| g.ln(x)),
        unary_case!("powf", [6], 0.3, 2.0, |g, x| g.powf(x, 2.5)),
        unary_case!("abs", [8], -1.0, 1.0, |g, x| g.abs(x)),
        unary_case!("clamp", [8], -1.0, 1.0, |g, x| g.clamp(x, -0.5, 0.5)),
        Case {
            name: "bias_add",
            build: |rng| {
                let b = random_array(rng, &[4], -1.0, 1.0);
                let x = random_array(rng, &[3, 4], -1.0, 1.0);
                let w = random_array(rng, &[12], -1.0, 1.0);
                let f: Readout = Box::new(move |g, bv| {
                    let xv = g.constant(x.clone());
                    let y = g.bias_add(xv, bv)?;
                    let y2 = g.bias_add(y, bv)?;
                    weighted(g, y2, &w)
                });
                (b, f)
            },
        },
        Case {
            name: "matmul",
            build: |rng| {
                let a = random_array(rng, &[5, 6], -1.0, 1.0);
                let b = random_array(rng, &[6, 4], -1.0, 1.0);
                let w = random_array(rng, &[20], -1.0, 1.0);
                let f: Readout = Box::new(move |g, av| {
                    let bv = g.constant(b.clone());
                    let y = g.matmul(av, bv)?;
                    weighted(g, y, &w)
                });
                (a, f)
            },
        },
        Case {
            name: "matmul_rhs",
            build: |rng| {
                let a = random_array(rng, &[5, 6], -1.0, 1.0);
                let b = random_array(rng, &[6, 4], -1.0, 1.0);
                let w = random_array(rng, &[20], -1.0, 1.0);
                let f: Readout = Box::new(move |g, bv| {
                    let av = g.constant(a.clone());
                    let y = g.matmul(av, bv)?;
                    weighted(g, y, &w)
                });
                (b, f)
            },
        },
        Case {
            name: "matmul_batched",
            build: |rng| {
                let a = random_array(rng, &[3, 4, 5], -1.0, 1.0);
                let b = random_array(rng, &[3, 5, 2], -1.0, 1.0);
                let w = random_array(rng, &[24], -1.0, 1.0);
                let f: Readout = Box::new(move |g, av| {
                    let bv = g.constant(b.clone());
                    let ab = g.matmul(av, bv)?;
                    // second product puts the leaf on the right-hand side too
                    let at = g.permute(av, &[0, 2, 1])?;
                    let ata = g.matmul(at, av)?;
                    let s1 = weighted(g, ab, &w)?;
                    let s2 = g.sum(ata)?;
                    g.add(s1, s2)
                });
                (a, f)
            },
        },
        Case {
            name: "conv2d_3x3",
            build: |rng| {
                let x = random_array(rng, &[2, 6, 6], -1.0, 1.0);
                let k = random_array(rng, &[3, 2, 3, 3], -1.0, 1.0);
                let b = random_array(rng, &[3], -1.0, 1.0);
                let w = random_array(rng, &[108], -1.0, 1.0);
                let f: Readout = Box::new(move |g, xv| {
                    let kv = g.constant(k.clone());
                    let bv = g.constant(b.clone());
                    let y = g.conv2d(xv, kv, Some(bv), 1, 1)?;
                    weighted(g, y, &w)
                });
                (x, f)
            },
        },
        Case {
            name: "conv2d_weight_stride2",
            build: |rng| {
                let x = random_array(rng, &[2, 7, 7], -1.0, 1.0);
                let k = random_array(rng, &[3, 2, 3, 3], -1.0, 1.0);
                let w = random_array(rng, &[48], -1.0, 1.0);
                let f: Readout = Box::new(move |g, kv| {
                    let xv = g.constant(x.clone());
                    let y = g.conv2d(xv, kv, None, 2, 1)?;
                    weighted(g, y, &w)
                });
                (k, f)
            },
        },
        Case {
            name: "conv2d_1x1_bias",
            build: |rng| {
                let x = random_array(rng, &[1, 3, 4, 4], -1.0, 1.0);
                let k = random_array(rng, &[2, 3, 1, 1], -1.0, 1.0);
                let b = random_array(rng, &[2], -1.0, 1.0);
                let w = random_array(rng, &[32], -1.0, 1.0);
                let f: Readout = Box::new(move |g, bv| {
                    let xv = g.constant(x.clone());
                    let kv = g.constant(k.clone());
                    let y = g.conv2d(xv, kv, Some(bv), 1, 0)?;
                    weighted(g, y, &w)
                });
                (b, f)
            },
        },
        unary_case!("sum", [3, 4], -1.0, 1.0, |g, x| {
            let s = g.sum(x)?;
            g.mul(s, s)
        }),
        unary_case!("mean", [3, 4], -1.0, 1.0, |g, x| {
            let s = g.mean(x)?;
            g.mul(s, s)
        }),
        Case {
            name: "sum_axis",
            build: |rng| {
                let x = random_array(rng, &[3, 4, 2], -1.0, 1.0);
                let w = random_array(rng, &[6], -1.0, 1.0);
                let f: Readout = Box::new(move |g, xv| {
                    let y = g.sum_axis(xv, 1)?;
                    weighted(g, y, &w)
                });
                (x, f)
            },
        },
        Case {
            name: "mean_axis",
            build: |rng| {
                let x = random_array(rng, &[3, 4, 2], -1.0, 1.0);
                let w = random_array(rng, &[8], -1.0, 1.0);
                let f: Readout = Box::new(move |g, xv| {
                    let y = g.mean_axis(xv, 0)?;
                    weighted(g, y, &w)
                });
                (x, f)
            },
        },
        unary_case!("softmax_last", [3, 5], -2.0, 2.0, |g, x| g.softmax(x, 1)),
        unary_case!("softmax_first", [3, 5], -2.0, 2.0, |g, x| g.softmax(x, 0)),
        unary_case!("reshape", [2, 6], -1.0, 1.0, |g, x| {
            let r = g.reshape(x, &[3, 4])?;
            g.mul(r, r)
        }),
        unary_case!("permute", [2, 3, 4], -1.0, 1.0, |g, x| {
            let p = g.permute(x, &[2, 0, 1])?;
            let r = g.reshape(p, &[2, 3, 4])?;
            g.mul(r, x)
        }),
        unary_case!("concat", [2, 3], -1.0, 1.0, |g, x| {
            let s = g.mul_scalar(x, 2.0)?;
            let c = g.concat(&[x, s], 1)?;
            let sq = g.mul(c, c)?;
            g.narrow(sq, 1, 1, 3)
        }),
        unary_case!("index_select", [4, 3], -1.0, 1.0, |g, x| {
            let y = g.index_select(x, 0, &[2, 0, 2, 3])?;
            let y = g.mul(y, y)?;
            g.reshape(y, &[4, 3])
        }),
        unary_case!("narrow", [4, 5], -1.0, 1.0, |g, x| {
            let y = g.narrow(x, 1, 1, 3)?;
            let z = g.mul(y, y)?;
            g.reshape(z, &[12])
        }),
        unary_case!("max_pool2", [2, 5, 5], -1.0, 1.0, |g, x| {
            let y = g.max_pool2(x)?;
            g.reshape(y, &[2, 9])
        }),
        unary_case!("upsample_nearest", [2, 3, 3], -1.0, 1.0, |g, x| {
            let y = g.upsample_nearest(x, 5, 6)?;
            let y = g.mul(y, y)?;
            g.narrow(y, 1, 0, 3)
        }),
        Case {
            name: "bilinear_sample",
            build: |rng| {
                let x = random_array(rng, &[3, 5, 6], -1.0, 1.0);
                let pts: Vec<(f64, f64)> = (0..7)
                    .map(|_| (rng.gen_range(-1.0..6.5), rng.gen_range(-1.0..5.5)))
                    .collect();
                let w = random_array(rng, &[21], -1.0, 1.0);
                let f: Readout = Box::new(move |g, xv| {
                    let y = g.bilinear_sample(xv, &pts)?;
                    let y = g.mul(y, y)?;
                    weighted(g, y, &w)
                });
                (x, f)
            },
        },
        Case {
            name: "layer_norm",
            build: |rng| {
                let x = random_array(rng, &[3, 6], -1.0, 1.0);
                let gamma = random_array(rng, &[6], 0.5, 1.5);
                let beta = random_array(rng, &[6], -0.5, 0.5);
                let w = random_array(rng, &[18], -1.0, 1.0);
                let f: Readout = Box::new(move |g, xv| {
                    let gv = g.constant(gamma.clone());
                    let bv = g.constant(beta.clone());
                    let y = g.layer_norm(xv, gv, bv)?;
                    weighted(g, y, &w)
                });
                (x, f)
            },
        },
        Case {
            name: "layer_norm_affine",
            build: |rng| {
                let x = random_array(rng, &[3, 6], -1.0, 1.0);
                let gamma = random_array(rng, &[6], 0.5, 1.5);
                let w = random_array(rng, &[18], -1.0, 1.0);
                let f: Readout = Box::new(move |g, gv| {
                    let xv = g.constant(x.clone());
                    let y = g.layer_norm(xv, gv, gv)?;
                    weighted(g, y, &w)
                });
                (gamma, f)
            },
        },
        Case {
            name: "sigmoid_focal",
            build: |rng| {
                let x = random_array(rng, &[10], -4.0, 4.0);
                let t: Vec<f64> = (0..10).map(|i| (i % 3 == 0) as u8 as f64).collect();
                let f: Readout = Box::new(move |g, xv| {
                    let y = g.sigmoid_focal(xv, &t, 2.0, 0.25)?;
                    g.sum(y)
                });
                (x, f)
            },
        },
    ]
}

pub fn primitive_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every primitive case over `seeds` random draws with the given
/// finite-difference step.
pub fn primitive_suite(seeds: usize, step: f64) -> Result<Vec<CheckReport>, GradError> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(ci, case)| {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 * ci as u64 + seed as u64);
                let (x, f) = (case.build)(&mut rng);
                worst = worst.max(grad_check(f, &x, step)?);
            }
            Ok(CheckReport {
                name: case.name,
                seeds,
                max_error: worst,
            })
        })
        .collect()
}
