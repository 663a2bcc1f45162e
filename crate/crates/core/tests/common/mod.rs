//! Independent reference implementations shared by the integration tests.
//! Nothing here calls the tape.

#![allow(dead_code)]

use mrn::data::{Color, Dataset, GenConfig, Question, Scene, ShapeKind};
use mrn::params::ParamStore;
use mrn::Tensor;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn from_tensor(t: &Tensor) -> Mat {
        let s = t.shape();
        assert_eq!(s.len(), 2);
        Mat {
            rows: s[0],
            cols: s[1],
            data: t.data().to_vec(),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows);
        let mut out = vec![0.0; self.rows * b.cols];
        for i in 0..self.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += self.at(i, k) * b.at(k, j);
                }
                out[i * b.cols + j] = s;
            }
        }
        Mat {
            rows: self.rows,
            cols: b.cols,
            data: out,
        }
    }

    pub fn zip(&self, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!((self.rows, self.cols), (b.rows, b.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn max_abs_diff(&self, t: &Tensor) -> f64 {
        assert_eq!(t.shape(), &[self.rows, self.cols]);
        self.data
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn param(store: &ParamStore, name: &str) -> Mat {
    Mat::from_tensor(store.get(store.find(name).unwrap_or_else(|| panic!("no parameter {name}"))))
}

/// Variant (b) without biases, evaluated the recursive way and then in the
/// unrolled cascaded form
///
/// `H_L = q·W'_1⋯W'_L + Σ_l F_l·W'_{l+1}⋯W'_L`,
///
/// where `W'_l` is block l's shortcut and `F_l` its joint residual.
/// Returns `(recursive, cascaded)`.
pub fn mrn_b_oracle(store: &ParamStore, blocks: usize, q: &Mat, v: &Mat) -> (Mat, Mat) {
    let p = |l: usize, n: &str| param(store, &format!("mrn.block{l}.{n}.w"));
    let mut h = q.clone();
    let mut residuals = Vec::new();
    for l in 1..=blocks {
        let mask = h.matmul(&p(l, "w_q")).map(f64::tanh);
        let vis = v
            .matmul(&p(l, "w_1"))
            .map(f64::tanh)
            .matmul(&p(l, "w_2"))
            .map(f64::tanh);
        let f = mask.zip(&vis, |a, b| a * b);
        h = h.matmul(&p(l, "w_q_short")).zip(&f, |a, b| a + b);
        residuals.push(f);
    }
    let tail = |from: usize, x: &Mat| (from..=blocks).fold(x.clone(), |acc, l| acc.matmul(&p(l, "w_q_short")));
    let mut cascaded = tail(1, q);
    for (k, f) in residuals.iter().enumerate() {
        cascaded = cascaded.zip(&tail(k + 2, f), |a, b| a + b);
    }
    (h, cascaded)
}

/// Answers a templated question by reading the scene directly, written
/// separately from the generator's semantics.
pub fn interpret(scene: &Scene, q: &Question) -> Option<String> {
    let mut colors = [0usize; 6];
    let mut shapes = [0usize; 3];
    let mut pairs = [[0usize; 3]; 6];
    let mut last_color_of_shape = [None; 3];
    let mut last_shape_of_color = [None; 6];
    for o in &scene.objects {
        let c = Color::ALL.iter().position(|x| *x == o.color).unwrap();
        let s = ShapeKind::ALL.iter().position(|x| *x == o.shape).unwrap();
        colors[c] += 1;
        shapes[s] += 1;
        pairs[c][s] += 1;
        last_color_of_shape[s] = Some(c);
        last_shape_of_color[c] = Some(s);
    }
    let ci = |c: &Color| Color::ALL.iter().position(|x| x == c).unwrap();
    let si = |s: &ShapeKind| ShapeKind::ALL.iter().position(|x| x == s).unwrap();
    match q {
        Question::Exists(c, s) => Some(if pairs[ci(c)][si(s)] > 0 { "yes" } else { "no" }.into()),
        Question::CountShape(s) => Some(format!("{}", shapes[si(s)])),
        Question::CountColor(c) => Some(format!("{}", colors[ci(c)])),
        Question::ColorOf(s) => {
            (shapes[si(s)] == 1).then(|| Color::ALL[last_color_of_shape[si(s)].unwrap()].name().into())
        }
        Question::ShapeOf(c) => {
            (colors[ci(c)] == 1).then(|| ShapeKind::ALL[last_shape_of_color[ci(c)].unwrap()].name().into())
        }
    }
}

pub fn small_dataset(examples: usize, seed: u64) -> Dataset {
    mrn::data::generate(&GenConfig {
        examples,
        seed,
        ..GenConfig::default()
    })
    .unwrap()
}

/// `(f(x + h·d) − f(x − h·d)) / 2h`.
pub fn directional_derivative(f: impl Fn(&Tensor) -> f64, x: &Tensor, d: &Tensor, h: f64) -> f64 {
    let shift = |s: f64| {
        let data = x.data().iter().zip(d.data()).map(|(a, b)| a + s * h * b).collect();
        Tensor::new(x.shape().to_vec(), data).unwrap()
    };
    (f(&shift(1.0)) - f(&shift(-1.0))) / (2.0 * h)
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}
