#![allow(dead_code)]

use otdenoise::tensor::gradcheck;
use otdenoise::tensor::GradModeGuard;
use otdenoise::{backward, Array, Result, Tape, Tensor};

pub const OP_KINDS: &[&str] = &[
    "dense",
    "conv1d",
    "conv2d",
    "layernorm",
    "relu",
    "leakyrelu",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "mean",
    "sum",
    "sqrt",
    "l2norm",
    "channel_concat",
    "channel_slice",
    "subsample2",
    "upsample2",
    "reshape",
    "clamp_abs_min",
    "conv_grad_input",
    "conv_grad_weight",
    "expand_per_sample",
    "expand_channels",
];

/// Small deterministic generator for test inputs.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        Self(seed ^ 0x9E37_79B9_7F4A_7C15)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next_u64() % (hi - lo + 1) as u64) as usize
    }

    pub fn array(&mut self, shape: &[usize]) -> Array {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| 2.0 * self.uniform() - 1.0).collect()).unwrap()
    }

    /// Entries at least `gap` away from every point in `kinks`.
    pub fn array_avoiding(&mut self, shape: &[usize], kinks: &[f64], gap: f64) -> Array {
        let mut a = self.array(shape);
        for v in a.data_mut() {
            while kinks.iter().any(|k| (*v - k).abs() < gap) {
                *v = 2.0 * self.uniform() - 1.0;
            }
        }
        a
    }

    pub fn positive(&mut self, shape: &[usize]) -> Array {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| 0.5 + self.uniform()).collect()).unwrap()
    }
}

pub type ScalarFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// Random inputs (at most 64 elements each) and a scalar function
/// `sum(r * op(inputs))` exercising one op kind.
pub fn op_case(kind: &str, rng: &mut TestRng) -> (Vec<Array>, ScalarFn) {
    let b = rng.range(1, 3);
    let c = rng.range(1, 3);
    let l = 2 * rng.range(1, 5);
    let project = |rng: &mut TestRng, shape: &[usize]| Tensor::constant(rng.array(shape));
    macro_rules! unary {
        ($x:expr, $shape:expr, |$t:ident| $body:expr) => {{
            let r = project(rng, &$shape);
            let f: ScalarFn = Box::new(move |ts: &[Tensor]| {
                let $t = &ts[0];
                ($body)?.mul(&r)?.sum()
            });
            (vec![$x], f)
        }};
    }
    match kind {
        "dense" => {
            let (i, o) = (rng.range(1, 6), rng.range(1, 6));
            let (x, w, bias) = (rng.array(&[b, i]), rng.array(&[o, i]), rng.array(&[o]));
            let r = project(rng, &[b, o]);
            (
                vec![x, w, bias],
                Box::new(move |ts: &[Tensor]| ts[0].dense(&ts[1], Some(&ts[2]))?.mul(&r)?.sum()),
            )
        }
        "conv1d" | "conv2d" => {
            let k = if rng.range(0, 1) == 0 { 1 } else { 3 };
            let o = rng.range(1, 3);
            let (xs, ws, ys) = if kind == "conv1d" {
                (vec![b, c, l], vec![o, c, k], vec![b, o, l])
            } else {
                let (h, w) = (rng.range(1, 3), rng.range(2, 4));
                (vec![b, c, h, w], vec![o, c, k, k], vec![b, o, h, w])
            };
            let (x, w) = (rng.array(&xs), rng.array(&ws));
            let r = project(rng, &ys);
            (vec![x, w], Box::new(move |ts: &[Tensor]| ts[0].conv(&ts[1])?.mul(&r)?.sum()))
        }
        "conv_grad_input" => {
            let o = rng.range(1, 3);
            let (dy, w) = (rng.array(&[b, o, l]), rng.array(&[o, c, 3]));
            let r = project(rng, &[b, c, l]);
            (
                vec![dy, w],
                Box::new(move |ts: &[Tensor]| ts[0].conv_grad_input(&ts[1])?.mul(&r)?.sum()),
            )
        }
        "conv_grad_weight" => {
            let o = rng.range(1, 3);
            let (x, dy) = (rng.array(&[b, c, l]), rng.array(&[b, o, l]));
            let r = project(rng, &[o, c, 3]);
            (
                vec![x, dy],
                Box::new(move |ts: &[Tensor]| ts[0].conv_grad_weight(&ts[1], &[3])?.mul(&r)?.sum()),
            )
        }
        "layernorm" => {
            let shape = [b, c, l];
            let (x, g, be) = (rng.array(&shape), rng.array(&[c, l]), rng.array(&[c, l]));
            let r = project(rng, &shape);
            (
                vec![x, g, be],
                Box::new(move |ts: &[Tensor]| ts[0].layer_norm(&ts[1], &ts[2], 1e-5)?.mul(&r)?.sum()),
            )
        }
        "relu" => unary!(rng.array_avoiding(&[b, c, l], &[0.0], 1e-3), [b, c, l], |t| t.relu()),
        "leakyrelu" => unary!(rng.array_avoiding(&[b, c, l], &[0.0], 1e-3), [b, c, l], |t| t.leaky_relu(0.2)),
        "clamp_abs_min" => unary!(
            rng.array_avoiding(&[b, c, l], &[-0.3, 0.3], 1e-3),
            [b, c, l],
            |t| t.clamp_abs_min(0.3)
        ),
        "scale" => unary!(rng.array(&[b, l]), [b, l], |t| t.scale(-1.7)),
        "neg" => unary!(rng.array(&[b, l]), [b, l], |t| t.neg()),
        "sqrt" => unary!(rng.positive(&[b, l]), [b, l], |t| t.sqrt()),
        "mean" => unary!(rng.array(&[b, c, l]), [], |t| t.mean()),
        "sum" => unary!(rng.array(&[b, c, l]), [], |t| t.sum()),
        "l2norm" => unary!(rng.array(&[b, c, l]), [b], |t| t.l2norm(1e-12)),
        "subsample2" => unary!(rng.array(&[b, c, l]), [b, c, l / 2], |t| t.subsample2()),
        "upsample2" => unary!(rng.array(&[b, c, 2, l / 2]), [b, c, 4, l], |t| t.upsample2()),
        "reshape" => unary!(rng.array(&[b, c, l]), [b, c * l], |t| t.reshape(&[b, c * l])),
        "channel_slice" => unary!(rng.array(&[b, 3, l]), [b, 2, l], |t| t.channel_slice(1, 2)),
        "expand_per_sample" => unary!(rng.array(&[b]), [b, c, l], |t| t.expand_per_sample(&[b, c, l])),
        "expand_channels" => unary!(rng.array(&[c]), [b, c, l], |t| t.expand_channels(&[b, c, l])),
        "channel_concat" => {
            let c2 = rng.range(1, 3);
            let (x, y) = (rng.array(&[b, c, l]), rng.array(&[b, c2, l]));
            let r = project(rng, &[b, c + c2 + c, l]);
            (
                vec![x, y],
                Box::new(move |ts: &[Tensor]| {
                    Tensor::channel_concat(&[&ts[0], &ts[1], &ts[0]])?.mul(&r)?.sum()
                }),
            )
        }
        "add" | "sub" | "mul" | "div" => {
            let shape = [b, c, l];
            let x = rng.array(&shape);
            let y = if kind == "div" { rng.positive(&shape) } else { rng.array(&shape) };
            let r = project(rng, &shape);
            let k = kind.to_string();
            (
                vec![x, y],
                Box::new(move |ts: &[Tensor]| {
                    let z = match k.as_str() {
                        "add" => ts[0].add(&ts[1])?,
                        "sub" => ts[0].sub(&ts[1])?,
                        "mul" => ts[0].mul(&ts[1])?,
                        _ => ts[0].div(&ts[1])?,
                    };
                    z.mul(&r)?.sum()
                }),
            )
        }
        other => panic!("unknown op kind {other}"),
    }
}

/// Worst relative error of first-order tape gradients vs central differences.
pub fn first_order_error(kind: &str, seed: u64) -> f64 {
    let mut rng = TestRng::new(seed);
    let (inputs, f) = op_case(kind, &mut rng);
    gradcheck::check(f, &inputs, 1e-5).unwrap()
}

/// Differentiates `sum(r2 * d f / d input0)` (a create_graph gradient) by the
/// tape and by central differences of the first-order gradient.
pub fn second_order_error(kind: &str, seed: u64) -> f64 {
    let mut rng = TestRng::new(seed);
    let (inputs, f) = op_case(kind, &mut rng);
    let r2 = Tensor::constant(rng.array(inputs[0].shape()));
    let h = move |ts: &[Tensor]| -> Result<Tensor> {
        if ts[0].is_tracked() {
            let y = f(ts)?;
            let g = backward(&y, &[&ts[0]], true)?.remove(0);
            return g.mul(&r2)?.sum();
        }
        // finite-difference evaluation: first-order gradient on a private tape
        let _mode = GradModeGuard::set(true);
        let tape = Tape::new();
        let leaves: Vec<Tensor> = ts.iter().map(|t| tape.leaf(t.value().clone())).collect();
        let y = f(&leaves)?;
        let g = backward(&y, &[&leaves[0]], false)?.remove(0);
        g.mul(&r2)?.sum()
    };
    gradcheck::check(h, &inputs, 1e-5).unwrap()
}

