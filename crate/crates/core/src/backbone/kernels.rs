//! Forward pass with an optional tape, and the matching reverse pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::adapter::{AdapterSet, AdapterTarget, LoraPair};
use super::weights::BaseWeights;
use super::{Backbone, ForwardOptions, ForwardOutput, HiddenStates, MaskMechanism};
use crate::tokenizer::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

struct LnTape {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnTape) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rr = *r;
        row.mapv_inplace(|v| v * rr);
    }
    let y = &xhat * g + b;
    (y, LnTape { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    tape: &LnTape,
    g: &Array1<f64>,
    grads: Option<(&mut Array1<f64>, &mut Array1<f64>)>,
) -> Array2<f64> {
    if let Some((dg, db)) = grads {
        *dg += &(dy * &tape.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let mut dx = dy * g;
    for ((mut row, xhat), &r) in dx.rows_mut().into_iter().zip(tape.xhat.rows()).zip(tape.rstd.iter()) {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|v, &xh| *v = r * (*v - mean_d - xh * mean_dx));
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, lora: Option<&LoraPair>, scale: f64) -> (Array2<f64>, Option<Array2<f64>>) {
    let mut y = x.dot(w);
    let u = lora.map(|p| {
        let u = x.dot(&p.a.t());
        general_mat_mul(scale, &u, &p.b.t(), 1.0, &mut y);
        u
    });
    (y, u)
}

fn linear_backward(
    x: &Array2<f64>,
    dy: &Array2<f64>,
    w: &Array2<f64>,
    lora: Option<(&LoraPair, &Array2<f64>)>,
    scale: f64,
    dw: Option<&mut Array2<f64>>,
    dlora: Option<&mut LoraPair>,
) -> Array2<f64> {
    let mut dx = dy.dot(&w.t());
    if let Some(dw) = dw {
        general_mat_mul(1.0, &x.t(), dy, 1.0, dw);
    }
    if let Some((p, u)) = lora {
        let du = dy.dot(&p.b) * scale;
        general_mat_mul(1.0, &du, &p.a, 1.0, &mut dx);
        if let Some(g) = dlora {
            general_mat_mul(scale, &dy.t(), u, 1.0, &mut g.b);
            general_mat_mul(1.0, &du.t(), x, 1.0, &mut g.a);
        }
    }
    dx
}

struct LayerTape {
    ln1: LnTape,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    lora_u: [Option<Array2<f64>>; 4],
    /// Per head, `exp(s_ij - m_i) / Z_i` for `j <= i`: the share key `j`
    /// would get at unit visibility.
    shares: Vec<Array2<f64>>,
    o_cat: Array2<f64>,
    ln2: LnTape,
    h2: Array2<f64>,
    f_pre: Array2<f64>,
    f_act: Array2<f64>,
}

/// Intermediates recorded by a forward pass, consumed by [`Backbone::backward`].
pub struct Tape {
    ids: Vec<TokenId>,
    visibility: Option<Vec<f64>>,
    mechanism: MaskMechanism,
    layers: Vec<LayerTape>,
    lnf: LnTape,
    hidden: Array2<f64>,
    with_adapters: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradRequest {
    pub base: bool,
    pub adapters: bool,
    pub visibility: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub base: Option<BaseWeights>,
    pub adapters: Option<AdapterSet>,
    pub visibility: Option<Vec<f64>>,
}

/// Weight that key `j` carries for query `i` (`j <= i`).
#[inline]
fn key_weight(vis: Option<&[f64]>, mech: MaskMechanism, i: usize, j: usize) -> f64 {
    match (vis, mech) {
        (Some(v), MaskMechanism::AttentionInvisibility) if i != j => v[j],
        _ => 1.0,
    }
}

impl Backbone {
    pub(super) fn run(
        &self,
        ids: &[TokenId],
        opts: &ForwardOptions<'_>,
        record: bool,
    ) -> (ForwardOutput, Option<Tape>) {
        let cfg = &self.config;
        let w = &self.weights;
        let n = ids.len();
        let d = cfg.d_model;
        let n_heads = cfg.n_heads;
        let dh = d / n_heads;
        let att_scale = 1.0 / (dh as f64).sqrt();
        let vis = opts.visibility;
        let mech = opts.mechanism;
        let adapters = opts.adapters;
        let lora_scale = adapters.map_or(0.0, AdapterSet::scale);

        let mut x = Array2::<f64>::zeros((n, d));
        for (i, (&id, mut row)) in ids.iter().zip(x.rows_mut()).enumerate() {
            let c = match (vis, mech) {
                (Some(v), MaskMechanism::EmbeddingZeroing) => v[i],
                _ => 1.0,
            };
            Zip::from(&mut row)
                .and(&w.tok_emb.row(id as usize))
                .and(&w.pos_emb.row(i))
                .for_each(|o, &t, &p| *o = c * t + p);
        }

        let mut layer_tapes = Vec::new();
        let mut last_attention = Vec::new();
        for (li, lw) in w.layers.iter().enumerate() {
            let lora = |t: AdapterTarget| adapters.and_then(|a| a.get(li, t));
            let (h1, ln1) = layer_norm(&x, &lw.ln1_g, &lw.ln1_b);
            let (q, uq) = linear(&h1, &lw.wq, lora(AdapterTarget::Q), lora_scale);
            let (k, uk) = linear(&h1, &lw.wk, lora(AdapterTarget::K), lora_scale);
            let (v, uv) = linear(&h1, &lw.wv, lora(AdapterTarget::V), lora_scale);

            let mut o_cat = Array2::<f64>::zeros((n, d));
            let mut shares = Vec::with_capacity(if record { n_heads } else { 0 });
            let is_last = li + 1 == w.layers.len();
            for h in 0..n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut scores = qh.dot(&kh.t());
                let mut attn = Array2::<f64>::zeros((n, n));
                for i in 0..n {
                    let mut srow = scores.row_mut(i);
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..=i {
                        srow[j] *= att_scale;
                        if key_weight(vis, mech, i, j) > 0.0 {
                            m = m.max(srow[j]);
                        }
                    }
                    // the shift ignores hidden keys so they cannot perturb the row
                    let mut z = 0.0;
                    for j in 0..=i {
                        let e = (srow[j] - m).min(700.0).exp();
                        srow[j] = e;
                        z += key_weight(vis, mech, i, j) * e;
                    }
                    let mut arow = attn.row_mut(i);
                    for j in 0..=i {
                        srow[j] /= z;
                        arow[j] = key_weight(vis, mech, i, j) * srow[j];
                    }
                    for j in i + 1..n {
                        srow[j] = 0.0;
                    }
                }
                general_mat_mul(1.0, &attn, &vh, 0.0, &mut o_cat.slice_mut(cols));
                if record {
                    shares.push(scores);
                }
                if is_last {
                    last_attention.push(attn);
                }
            }
            let (attn_out, uo) = linear(&o_cat, &lw.wo, lora(AdapterTarget::O), lora_scale);
            let x_in = x;
            x = &x_in + &attn_out;

            let (h2, ln2) = layer_norm(&x, &lw.ln2_g, &lw.ln2_b);
            let mut f_pre = h2.dot(&lw.w1);
            f_pre += &lw.b1;
            let f_act = f_pre.mapv(gelu);
            let mut mlp = f_act.dot(&lw.w2);
            mlp += &lw.b2;
            x += &mlp;

            if record {
                layer_tapes.push(LayerTape {
                    ln1,
                    h1,
                    q,
                    k,
                    v,
                    lora_u: [uq, uk, uv, uo],
                    shares,
                    o_cat,
                    ln2,
                    h2,
                    f_pre,
                    f_act,
                });
            }
        }

        let (hidden, lnf) = layer_norm(&x, &w.lnf_g, &w.lnf_b);
        let logits = match &w.lm_head {
            Some(head) => hidden.dot(head),
            None => hidden.dot(&w.tok_emb.t()),
        };

        let mut mean_attention = vec![0.0; n];
        for attn in &last_attention {
            for (j, slot) in mean_attention.iter_mut().enumerate() {
                let col = attn.slice(s![j.., j]);
                *slot += col.sum() / (n - j) as f64;
            }
        }
        mean_attention.iter_mut().for_each(|m| *m /= n_heads as f64);

        let tape = record.then(|| Tape {
            ids: ids.to_vec(),
            visibility: vis.map(<[f64]>::to_vec),
            mechanism: mech,
            layers: layer_tapes,
            lnf,
            hidden: hidden.clone(),
            with_adapters: adapters.is_some(),
        });
        let out = ForwardOutput {
            logits,
            last_hidden: HiddenStates(hidden),
            last_layer_mean_attention: mean_attention,
            last_layer_attention: last_attention,
        };
        (out, tape)
    }

    /// Reverse pass from `dlogits` through a recorded forward.
    pub fn backward(
        &self,
        tape: &Tape,
        dlogits: ArrayView2<'_, f64>,
        adapters: Option<&AdapterSet>,
        want: GradRequest,
    ) -> Gradients {
        let cfg = &self.config;
        let w = &self.weights;
        let n = tape.ids.len();
        let d = cfg.d_model;
        let n_heads = cfg.n_heads;
        let dh = d / n_heads;
        let att_scale = 1.0 / (dh as f64).sqrt();
        let vis = tape.visibility.as_deref();
        let mech = tape.mechanism;
        let adapters = if tape.with_adapters { adapters } else { None };
        let lora_scale = adapters.map_or(0.0, AdapterSet::scale);

        let mut gbase = want.base.then(|| w.zeros_like());
        let mut gad = match (want.adapters, adapters) {
            (true, Some(a)) => Some(a.zeros_like()),
            _ => None,
        };
        let mut gvis = (want.visibility && vis.is_some()).then(|| vec![0.0; n]);

        let dhidden = match &w.lm_head {
            Some(head) => {
                if let Some(g) = gbase.as_mut() {
                    general_mat_mul(1.0, &tape.hidden.t(), &dlogits, 1.0, g.lm_head.as_mut().unwrap());
                }
                dlogits.dot(&head.t())
            }
            None => {
                if let Some(g) = gbase.as_mut() {
                    general_mat_mul(1.0, &dlogits.t(), &tape.hidden, 1.0, &mut g.tok_emb);
                }
                dlogits.dot(&w.tok_emb)
            }
        };
        let mut dx = layer_norm_backward(
            &dhidden,
            &tape.lnf,
            &w.lnf_g,
            gbase.as_mut().map(|g| (&mut g.lnf_g, &mut g.lnf_b)),
        );

        for li in (0..w.layers.len()).rev() {
            let lw = &w.layers[li];
            let lt = &tape.layers[li];
            let mut gl = gbase.as_mut().map(|g| &mut g.layers[li]);

            // MLP block
            let mut df_act = dx.dot(&lw.w2.t());
            if let Some(g) = gl.as_deref_mut() {
                general_mat_mul(1.0, &lt.f_act.t(), &dx, 1.0, &mut g.w2);
                g.b2 += &dx.sum_axis(Axis(0));
            }
            Zip::from(&mut df_act)
                .and(&lt.f_pre)
                .for_each(|g, &x| *g *= gelu_grad(x));
            let dfpre = df_act;
            if let Some(g) = gl.as_deref_mut() {
                general_mat_mul(1.0, &lt.h2.t(), &dfpre, 1.0, &mut g.w1);
                g.b1 += &dfpre.sum_axis(Axis(0));
            }
            let dh2 = dfpre.dot(&lw.w1.t());
            let dln2 = layer_norm_backward(
                &dh2,
                &lt.ln2,
                &lw.ln2_g,
                gl.as_deref_mut().map(|g| (&mut g.ln2_g, &mut g.ln2_b)),
            );
            dx += &dln2;

            // attention block
            let lora_pair = |t: AdapterTarget| adapters.and_then(|a| a.get(li, t));
            let lora_arg = |t: AdapterTarget, slot: usize| {
                lora_pair(t).map(|p| (p, lt.lora_u[slot].as_ref().expect("tape holds adapter activations")))
            };
            let do_cat = linear_backward(
                &lt.o_cat,
                &dx,
                &lw.wo,
                lora_arg(AdapterTarget::O, 3),
                lora_scale,
                gl.as_deref_mut().map(|g| &mut g.wo),
                gad.as_mut().and_then(|g| g.get_mut(li, AdapterTarget::O)),
            );

            let mut dq = Array2::<f64>::zeros((n, d));
            let mut dk = Array2::<f64>::zeros((n, d));
            let mut dv = Array2::<f64>::zeros((n, d));
            for h in 0..n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let share = &lt.shares[h];
                let mut attn = share.clone();
                if vis.is_some() && mech == MaskMechanism::AttentionInvisibility {
                    for i in 0..n {
                        for j in 0..i {
                            attn[[i, j]] *= key_weight(vis, mech, i, j);
                        }
                    }
                }
                let dout = do_cat.slice(cols);
                let mut da = dout.dot(&lt.v.slice(cols).t());
                general_mat_mul(1.0, &attn.t(), &dout, 0.0, &mut dv.slice_mut(cols));
                // softmax backward; `da` becomes d(scores)
                for i in 0..n {
                    let mut r = 0.0;
                    for j in 0..=i {
                        r += attn[[i, j]] * da[[i, j]];
                    }
                    for j in 0..=i {
                        let centered = da[[i, j]] - r;
                        if let Some(gv) = gvis.as_mut() {
                            if j < i && mech == MaskMechanism::AttentionInvisibility {
                                gv[j] += share[[i, j]] * centered;
                            }
                        }
                        da[[i, j]] = attn[[i, j]] * centered * att_scale;
                    }
                    for j in i + 1..n {
                        da[[i, j]] = 0.0;
                    }
                }
                general_mat_mul(1.0, &da, &lt.k.slice(cols), 0.0, &mut dq.slice_mut(cols));
                general_mat_mul(1.0, &da.t(), &lt.q.slice(cols), 0.0, &mut dk.slice_mut(cols));
            }

            let mut dh1 = Array2::<f64>::zeros((n, d));
            for (slot, (t, dy)) in [
                (AdapterTarget::Q, &dq),
                (AdapterTarget::K, &dk),
                (AdapterTarget::V, &dv),
            ]
            .into_iter()
            .enumerate()
            {
                let wmat = match t {
                    AdapterTarget::Q => &lw.wq,
                    AdapterTarget::K => &lw.wk,
                    _ => &lw.wv,
                };
                let gw = gl.as_deref_mut().map(|g| match t {
                    AdapterTarget::Q => &mut g.wq,
                    AdapterTarget::K => &mut g.wk,
                    _ => &mut g.wv,
                });
                let dl = gad.as_mut().and_then(|g| g.get_mut(li, t));
                dh1 += &linear_backward(&lt.h1, dy, wmat, lora_arg(t, slot), lora_scale, gw, dl);
            }
            let dln1 = layer_norm_backward(
                &dh1,
                &lt.ln1,
                &lw.ln1_g,
                gl.as_deref_mut().map(|g| (&mut g.ln1_g, &mut g.ln1_b)),
            );
            dx += &dln1;
        }

        for (i, (&id, drow)) in tape.ids.iter().zip(dx.rows()).enumerate() {
            let c = match (vis, mech) {
                (Some(v), MaskMechanism::EmbeddingZeroing) => v[i],
                _ => 1.0,
            };
            if let Some(g) = gbase.as_mut() {
                let mut t = g.tok_emb.row_mut(id as usize);
                t.scaled_add(c, &drow);
                let mut p = g.pos_emb.row_mut(i);
                p += &drow;
            }
            if let (Some(gv), MaskMechanism::EmbeddingZeroing) = (gvis.as_mut(), mech) {
                gv[i] += drow.dot(&w.tok_emb.row(id as usize));
            }
        }

        Gradients {
            base: gbase,
            adapters: gad,
            visibility: gvis,
        }
    }
}
