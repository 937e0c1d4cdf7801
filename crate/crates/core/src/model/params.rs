use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

/// Standard deviation of the Gaussian weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    /// `[d, 3d]`, columns are q | k | v.
    pub w_qkv: Array2<f64>,
    pub w_o: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w_fc: Array2<f64>,
    pub b_fc: Array1<f64>,
    pub w_proj: Array2<f64>,
    pub b_proj: Array1<f64>,
}

/// All trainable tensors of the decoder. Also used for gradients and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub wte: Array2<f64>,
    pub wpe: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    /// `[d, V]`
    pub w_out: Array2<f64>,
}

macro_rules! for_each_tensor {
    ($p:expr, $out:ident, $push:ident) => {{
        $push(&mut $out, "wte".to_string(), &$p.wte);
        $push(&mut $out, "wpe".to_string(), &$p.wpe);
        for (i, l) in $p.layers.iter().enumerate() {
            $push(&mut $out, format!("layers.{i}.ln1_g"), &l.ln1_g);
            $push(&mut $out, format!("layers.{i}.ln1_b"), &l.ln1_b);
            $push(&mut $out, format!("layers.{i}.w_qkv"), &l.w_qkv);
            $push(&mut $out, format!("layers.{i}.w_o"), &l.w_o);
            $push(&mut $out, format!("layers.{i}.ln2_g"), &l.ln2_g);
            $push(&mut $out, format!("layers.{i}.ln2_b"), &l.ln2_b);
            $push(&mut $out, format!("layers.{i}.w_fc"), &l.w_fc);
            $push(&mut $out, format!("layers.{i}.b_fc"), &l.b_fc);
            $push(&mut $out, format!("layers.{i}.w_proj"), &l.w_proj);
            $push(&mut $out, format!("layers.{i}.b_proj"), &l.b_proj);
        }
        $push(&mut $out, "lnf_g".to_string(), &$p.lnf_g);
        $push(&mut $out, "lnf_b".to_string(), &$p.lnf_b);
        $push(&mut $out, "w_out".to_string(), &$p.w_out);
    }};
}

macro_rules! for_each_tensor_mut {
    ($p:expr, $out:ident, $push:ident) => {{
        $push(&mut $out, "wte".to_string(), &mut $p.wte);
        $push(&mut $out, "wpe".to_string(), &mut $p.wpe);
        for (i, l) in $p.layers.iter_mut().enumerate() {
            $push(&mut $out, format!("layers.{i}.ln1_g"), &mut l.ln1_g);
            $push(&mut $out, format!("layers.{i}.ln1_b"), &mut l.ln1_b);
            $push(&mut $out, format!("layers.{i}.w_qkv"), &mut l.w_qkv);
            $push(&mut $out, format!("layers.{i}.w_o"), &mut l.w_o);
            $push(&mut $out, format!("layers.{i}.ln2_g"), &mut l.ln2_g);
            $push(&mut $out, format!("layers.{i}.ln2_b"), &mut l.ln2_b);
            $push(&mut $out, format!("layers.{i}.w_fc"), &mut l.w_fc);
            $push(&mut $out, format!("layers.{i}.b_fc"), &mut l.b_fc);
            $push(&mut $out, format!("layers.{i}.w_proj"), &mut l.w_proj);
            $push(&mut $out, format!("layers.{i}.b_proj"), &mut l.b_proj);
        }
        $push(&mut $out, "lnf_g".to_string(), &mut $p.lnf_g);
        $push(&mut $out, "lnf_b".to_string(), &mut $p.lnf_b);
        $push(&mut $out, "w_out".to_string(), &mut $p.w_out);
    }};
}

/// Borrowed view of one named tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

trait AsFlat {
    fn shape_vec(&self) -> Vec<usize>;
    fn flat(&self) -> &[f64];
    fn flat_mut(&mut self) -> &mut [f64];
}

impl AsFlat for Array1<f64> {
    fn shape_vec(&self) -> Vec<usize> {
        self.shape().to_vec()
    }
    fn flat(&self) -> &[f64] {
        self.as_slice().expect("standard layout")
    }
    fn flat_mut(&mut self) -> &mut [f64] {
        self.as_slice_mut().expect("standard layout")
    }
}

impl AsFlat for Array2<f64> {
    fn shape_vec(&self) -> Vec<usize> {
        self.shape().to_vec()
    }
    fn flat(&self) -> &[f64] {
        self.as_slice().expect("standard layout")
    }
    fn flat_mut(&mut self) -> &mut [f64] {
        self.as_slice_mut().expect("standard layout")
    }
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let h = cfg.mlp_hidden();
        let layer = LayerParams {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            w_qkv: Array2::zeros((d, 3 * d)),
            w_o: Array2::zeros((d, d)),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w_fc: Array2::zeros((d, h)),
            b_fc: Array1::zeros(h),
            w_proj: Array2::zeros((h, d)),
            b_proj: Array1::zeros(d),
        };
        Self {
            wte: Array2::zeros((cfg.vocab_size, d)),
            wpe: Array2::zeros((cfg.context_length, d)),
            layers: vec![layer; cfg.n_layers],
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            w_out: Array2::zeros((d, cfg.vocab_size)),
        }
    }

    /// Gaussian(0, [`INIT_STD`]) weights, unit layer-norm gains, zero biases.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut fill = |a: &mut [f64]| a.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        fill(p.wte.flat_mut());
        fill(p.wpe.flat_mut());
        for l in &mut p.layers {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
            fill(l.w_qkv.flat_mut());
            fill(l.w_o.flat_mut());
            fill(l.w_fc.flat_mut());
            fill(l.w_proj.flat_mut());
        }
        p.lnf_g.fill(1.0);
        fill(p.w_out.flat_mut());
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|t| t.data.fill(0.0));
        z
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for_each_tensor!(self, out, push_ref);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        for_each_tensor_mut!(self, out, push_mut);
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(TensorMut<'_>)) {
        for t in self.tensors_mut() {
            f(t);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn same_shapes(&self, other: &Params) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.name == y.name && x.shape == y.shape)
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.data.iter_mut().zip(s.data) {
                *d += scale * v;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.for_each_mut(|t| t.data.iter_mut().for_each(|x| *x *= s));
    }

    /// Flat copy of every scalar in tensor order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }
}

fn push_ref<'a>(out: &mut Vec<TensorRef<'a>>, name: String, a: &'a dyn AsFlatDyn) {
    out.push(TensorRef {
        name,
        shape: a.shape_dyn(),
        data: a.flat_dyn(),
    });
}

fn push_mut<'a>(out: &mut Vec<TensorMut<'a>>, name: String, a: &'a mut dyn AsFlatDyn) {
    let shape = a.shape_dyn();
    out.push(TensorMut {
        name,
        shape,
        data: a.flat_mut_dyn(),
    });
}

// Object-safe shim so the visiting macros can push both 1-D and 2-D arrays.
trait AsFlatDyn {
    fn shape_dyn(&self) -> Vec<usize>;
    fn flat_dyn(&self) -> &[f64];
    fn flat_mut_dyn(&mut self) -> &mut [f64];
}

impl<T: AsFlat> AsFlatDyn for T {
    fn shape_dyn(&self) -> Vec<usize> {
        self.shape_vec()
    }
    fn flat_dyn(&self) -> &[f64] {
        self.flat()
    }
    fn flat_mut_dyn(&mut self) -> &mut [f64] {
        self.flat_mut()
    }
}
