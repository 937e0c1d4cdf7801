//! Pre-norm causal decoder with hand-written backward pass.
//!
//! One sequence at a time; activations are `[T, d]` row-major matrices.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{LayerParams, Params};
use super::ModelConfig;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn_out: Array2<f64>,
    ln2: LnCache,
    m: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

pub(crate) struct ForwardCache {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    n_rows: Array2<f64>,
    first_out: usize,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row *= r;
        rstd[i] = r;
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dxh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let m1 = dxh.sum() / d;
        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        let r = cache.rstd[i];
        Zip::from(dx.row_mut(i))
            .and(dxh)
            .and(xh)
            .for_each(|o, &a, &x| *o = r * (a - m1 - x * m2));
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    a.dot(&b)
}

/// `c += a^T b`
fn add_at_b(c: &mut Array2<f64>, a: ArrayView2<f64>, b: ArrayView2<f64>) {
    general_mat_mul(1.0, &a.t(), &b, 1.0, c);
}

fn softmax_rows_causal(s: &mut Array2<f64>) {
    for (i, mut row) in s.rows_mut().into_iter().enumerate() {
        let m = row.slice(s![..=i]).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - m).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.slice_mut(s![..=i]).mapv_inplace(|v| v / sum);
    }
}

/// Runs the decoder over `tokens` and returns logits for rows
/// `first_out..tokens.len()` together with the activations needed by
/// [`backward`].
pub(crate) fn forward(
    params: &Params,
    cfg: &ModelConfig,
    tokens: &[u32],
    first_out: usize,
) -> (Array2<f64>, ForwardCache) {
    let t = tokens.len();
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let hd = d / nh;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut h = Array2::zeros((t, d));
    for (i, &tok) in tokens.iter().enumerate() {
        let mut row = h.row_mut(i);
        row.assign(&params.wte.row(tok as usize));
        row += &params.wpe.row(i);
    }

    let mut layers = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let (a, ln1) = layer_norm(&h, &lp.ln1_g, &lp.ln1_b);
        let qkv = matmul(a.view(), lp.w_qkv.view());
        let mut attn_out = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(nh);
        for head in 0..nh {
            let q = qkv.slice(s![.., head * hd..(head + 1) * hd]);
            let k = qkv.slice(s![.., d + head * hd..d + (head + 1) * hd]);
            let v = qkv.slice(s![.., 2 * d + head * hd..2 * d + (head + 1) * hd]);
            let mut sc = q.dot(&k.t());
            sc *= scale;
            softmax_rows_causal(&mut sc);
            attn_out
                .slice_mut(s![.., head * hd..(head + 1) * hd])
                .assign(&sc.dot(&v));
            probs.push(sc);
        }
        h += &matmul(attn_out.view(), lp.w_o.view());

        let (m, ln2) = layer_norm(&h, &lp.ln2_g, &lp.ln2_b);
        let mut u = matmul(m.view(), lp.w_fc.view());
        u += &lp.b_fc;
        let g = u.mapv(gelu);
        let mut f = matmul(g.view(), lp.w_proj.view());
        f += &lp.b_proj;
        h += &f;

        layers.push(LayerCache {
            ln1,
            a,
            qkv,
            probs,
            attn_out,
            ln2,
            m,
            u,
            g,
        });
    }

    let (n, lnf) = layer_norm(&h, &params.lnf_g, &params.lnf_b);
    let n_rows = n.slice(s![first_out.., ..]).to_owned();
    let logits = matmul(n_rows.view(), params.w_out.view());
    (
        logits,
        ForwardCache {
            tokens: tokens.to_vec(),
            layers,
            lnf,
            n_rows,
            first_out,
        },
    )
}

/// Accumulates parameter gradients for upstream `dlogits` into `grads`.
pub(crate) fn backward(
    params: &Params,
    cfg: &ModelConfig,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
    grads: &mut Params,
) {
    let t = cache.tokens.len();
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let hd = d / nh;
    let scale = 1.0 / (hd as f64).sqrt();

    add_at_b(&mut grads.w_out, cache.n_rows.view(), dlogits.view());
    let mut dn = Array2::zeros((t, d));
    dn.slice_mut(s![cache.first_out.., ..])
        .assign(&dlogits.dot(&params.w_out.t()));
    let mut dh = layer_norm_backward(&dn, &cache.lnf, &params.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);

    for (li, lc) in cache.layers.iter().enumerate().rev() {
        let lp: &LayerParams = &params.layers[li];
        let lg = &mut grads.layers[li];

        // MLP branch
        add_at_b(&mut lg.w_proj, lc.g.view(), dh.view());
        lg.b_proj += &dh.sum_axis(Axis(0));
        let mut du = dh.dot(&lp.w_proj.t());
        Zip::from(&mut du).and(&lc.u).for_each(|g, &u| *g *= gelu_grad(u));
        add_at_b(&mut lg.w_fc, lc.m.view(), du.view());
        lg.b_fc += &du.sum_axis(Axis(0));
        let dm = du.dot(&lp.w_fc.t());
        dh += &layer_norm_backward(&dm, &lc.ln2, &lp.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b);

        // attention branch
        add_at_b(&mut lg.w_o, lc.attn_out.view(), dh.view());
        let d_attn = dh.dot(&lp.w_o.t());
        let mut dqkv = Array2::zeros((t, 3 * d));
        for head in 0..nh {
            let cols = head * hd..(head + 1) * hd;
            let q = lc.qkv.slice(s![.., cols.clone()]);
            let k = lc.qkv.slice(s![.., d + cols.start..d + cols.end]);
            let v = lc.qkv.slice(s![.., 2 * d + cols.start..2 * d + cols.end]);
            let p = &lc.probs[head];
            let d_o = d_attn.slice(s![.., cols.clone()]);
            let dp = d_o.dot(&v.t());
            let dv = p.t().dot(&d_o);
            let mut ds = dp;
            for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot: f64 = ds_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                Zip::from(&mut ds_row)
                    .and(p_row)
                    .for_each(|x, &pv| *x = pv * (*x - dot));
            }
            ds *= scale;
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., cols.clone()]).assign(&dq);
            dqkv.slice_mut(s![.., d + cols.start..d + cols.end]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + cols.start..2 * d + cols.end]).assign(&dv);
        }
        add_at_b(&mut lg.w_qkv, lc.a.view(), dqkv.view());
        let da = dqkv.dot(&lp.w_qkv.t());
        dh += &layer_norm_backward(&da, &lc.ln1, &lp.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b);
    }

    for (i, &tok) in cache.tokens.iter().enumerate() {
        let row = dh.row(i);
        let mut e = grads.wte.row_mut(tok as usize);
        e += &row;
        let mut pe = grads.wpe.row_mut(i);
        pe += &row;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_differences() {
        for &u in &[-3.0, -1.0, -0.1, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn causal_softmax_rows() {
        let mut s = Array2::from_shape_vec((3, 3), vec![1.0, 9.0, 9.0, 0.0, 0.0, 9.0, 1.0, 2.0, 3.0]).unwrap();
        softmax_rows_causal(&mut s);
        assert_eq!(s[[0, 0]], 1.0);
        assert_eq!(s[[0, 1]], 0.0);
        assert!((s[[1, 0]] - 0.5).abs() < 1e-15);
        assert_eq!(s[[1, 2]], 0.0);
        assert!((s.row(2).sum() - 1.0).abs() < 1e-15);
    }
}
