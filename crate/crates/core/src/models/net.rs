//! Forward passes with cached activations and their exact reverse passes.

use crate::matrix::{dot, gemv_add, gemv_t_add, outer_add, sigmoid};

use super::params::ParamSet;

/// Per-layer inputs and pre-activations of a dense stack.
#[derive(Debug, Clone)]
pub(crate) struct DenseCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

/// Dense layers at tensor slots `base + 2k` (weight) and `base + 2k + 1`
/// (bias), ReLU between layers, linear final layer. Returns the final
/// pre-activation.
pub(crate) fn dense_forward(p: &ParamSet, base: usize, layers: usize, x: Vec<f64>) -> (Vec<f64>, DenseCache) {
    let mut cache = DenseCache {
        inputs: Vec::with_capacity(layers),
        pre: Vec::with_capacity(layers),
    };
    let mut act = x;
    for k in 0..layers {
        let bias = p.data(base + 2 * k + 1);
        let mut z = bias.to_vec();
        gemv_add(p.data(base + 2 * k), &act, &mut z);
        let next = if k + 1 < layers {
            z.iter().map(|&v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        cache.inputs.push(act);
        cache.pre.push(z);
        act = next;
    }
    (act, cache)
}

/// Accumulates parameter gradients and returns the gradient w.r.t. the
/// stack input.
pub(crate) fn dense_backward(
    p: &ParamSet,
    g: &mut ParamSet,
    base: usize,
    cache: &DenseCache,
    d_out: Vec<f64>,
) -> Vec<f64> {
    let layers = cache.pre.len();
    let mut dz = d_out;
    for k in (0..layers).rev() {
        let input = &cache.inputs[k];
        outer_add(g.data_mut(base + 2 * k), &dz, input);
        for (gb, d) in g.data_mut(base + 2 * k + 1).iter_mut().zip(&dz) {
            *gb += d;
        }
        let mut dx = vec![0.0; input.len()];
        gemv_t_add(p.data(base + 2 * k), &dz, &mut dx);
        if k > 0 {
            for (d, &z) in dx.iter_mut().zip(&cache.pre[k - 1]) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        dz = dx;
    }
    dz
}

/// Activations of a unidirectional LSTM over all steps.
#[derive(Debug, Clone)]
pub(crate) struct LstmCache {
    pub steps: usize,
    pub hidden: usize,
    input_width: usize,
    x: Vec<f64>,
    /// Post-activation gates per step, `[i | f | g | o]`.
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    /// Hidden states, steps x hidden.
    pub h: Vec<f64>,
}

/// Slots `w_ih` (4h x D), `w_hh` (4h x h), `bias` (4h) start at `base`.
pub(crate) fn lstm_forward(p: &ParamSet, base: usize, hidden: usize, x: &[f64], width: usize) -> LstmCache {
    let steps = x.len() / width;
    let (w_ih, w_hh, bias) = (p.data(base), p.data(base + 1), p.data(base + 2));
    let h4 = 4 * hidden;
    let mut gates = vec![0.0; steps * h4];
    let mut c = vec![0.0; steps * hidden];
    let mut tanh_c = vec![0.0; steps * hidden];
    let mut hs = vec![0.0; steps * hidden];
    let zeros = vec![0.0; hidden];
    for t in 0..steps {
        let z = &mut gates[t * h4..(t + 1) * h4];
        z.copy_from_slice(bias);
        gemv_add(w_ih, &x[t * width..(t + 1) * width], z);
        let (h_prev, c_prev) = if t == 0 {
            (&zeros[..], &zeros[..])
        } else {
            (&hs[(t - 1) * hidden..t * hidden], &c[(t - 1) * hidden..t * hidden])
        };
        gemv_add(w_hh, h_prev, z);
        let c_prev = c_prev.to_vec();
        for j in 0..hidden {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[hidden + j]);
            let g = z[2 * hidden + j].tanh();
            let o = sigmoid(z[3 * hidden + j]);
            z[j] = i;
            z[hidden + j] = f;
            z[2 * hidden + j] = g;
            z[3 * hidden + j] = o;
            let ct = f * c_prev[j] + i * g;
            let tc = ct.tanh();
            c[t * hidden + j] = ct;
            tanh_c[t * hidden + j] = tc;
            hs[t * hidden + j] = o * tc;
        }
    }
    LstmCache {
        steps,
        hidden,
        input_width: width,
        x: x.to_vec(),
        gates,
        c,
        tanh_c,
        h: hs,
    }
}

/// Backpropagation through time. `dh_ext` (steps x hidden) is the loss
/// gradient arriving at each hidden state from outside the recurrence.
pub(crate) fn lstm_backward(p: &ParamSet, g: &mut ParamSet, base: usize, cache: &LstmCache, dh_ext: &[f64]) {
    let (hidden, width) = (cache.hidden, cache.input_width);
    let h4 = 4 * hidden;
    let w_hh = p.data(base + 1).to_vec();
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    let mut dz = vec![0.0; h4];
    for t in (0..cache.steps).rev() {
        let gate = &cache.gates[t * h4..(t + 1) * h4];
        for j in 0..hidden {
            let (i, f, gg, o) = (gate[j], gate[hidden + j], gate[2 * hidden + j], gate[3 * hidden + j]);
            let tc = cache.tanh_c[t * hidden + j];
            let c_prev = if t == 0 { 0.0 } else { cache.c[(t - 1) * hidden + j] };
            let dh = dh_ext[t * hidden + j] + dh_next[j];
            let d_o = dh * tc;
            let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
            dz[j] = dc * gg * i * (1.0 - i);
            dz[hidden + j] = dc * c_prev * f * (1.0 - f);
            dz[2 * hidden + j] = dc * i * (1.0 - gg * gg);
            dz[3 * hidden + j] = d_o * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        outer_add(g.data_mut(base), &dz, &cache.x[t * width..(t + 1) * width]);
        if t > 0 {
            outer_add(g.data_mut(base + 1), &dz, &cache.h[(t - 1) * hidden..t * hidden]);
        }
        for (gb, d) in g.data_mut(base + 2).iter_mut().zip(&dz) {
            *gb += d;
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        gemv_t_add(&w_hh, &dz, &mut dh_next);
    }
}

/// Structured self-attention over hidden states.
#[derive(Debug, Clone)]
pub(crate) struct AttnCache {
    pub steps: usize,
    pub hidden: usize,
    pub d_a: usize,
    pub r: usize,
    /// Attended states H' (steps x hidden).
    hp: Vec<f64>,
    /// tanh(W_s1 h'_t), steps x d_a.
    s: Vec<f64>,
    /// Attention matrix A, r x steps; rows sum to 1.
    pub a: Vec<f64>,
    /// Pooled M = A H', r x hidden.
    pub m: Vec<f64>,
}

/// Slots `w_s1` (d_a x h) and `w_s2` (r x d_a) at `base`, `base + 1`.
pub(crate) fn attention_forward(p: &ParamSet, base: usize, hp: Vec<f64>, hidden: usize, d_a: usize, r: usize) -> AttnCache {
    let steps = hp.len() / hidden;
    let (w1, w2) = (p.data(base), p.data(base + 1));
    let mut s = vec![0.0; steps * d_a];
    let mut e = vec![0.0; r * steps];
    let mut e_t = vec![0.0; r];
    for t in 0..steps {
        let st = &mut s[t * d_a..(t + 1) * d_a];
        gemv_add(w1, &hp[t * hidden..(t + 1) * hidden], st);
        st.iter_mut().for_each(|v| *v = v.tanh());
        e_t.iter_mut().for_each(|v| *v = 0.0);
        gemv_add(w2, st, &mut e_t);
        for k in 0..r {
            e[k * steps + t] = e_t[k];
        }
    }
    let mut a = vec![0.0; r * steps];
    for k in 0..r {
        crate::matrix::softmax_into(&e[k * steps..(k + 1) * steps], &mut a[k * steps..(k + 1) * steps]);
    }
    let mut m = vec![0.0; r * hidden];
    for k in 0..r {
        let mk = &mut m[k * hidden..(k + 1) * hidden];
        for t in 0..steps {
            let w = a[k * steps + t];
            for (mv, hv) in mk.iter_mut().zip(&hp[t * hidden..(t + 1) * hidden]) {
                *mv += w * hv;
            }
        }
    }
    AttnCache {
        steps,
        hidden,
        d_a,
        r,
        hp,
        s,
        a,
        m,
    }
}

/// `‖A Aᵀ − I‖_F²`.
pub(crate) fn attention_gram_error(cache: &AttnCache) -> f64 {
    let (r, n) = (cache.r, cache.steps);
    let mut total = 0.0;
    for k in 0..r {
        for l in 0..r {
            let g = dot(&cache.a[k * n..(k + 1) * n], &cache.a[l * n..(l + 1) * n]) - if k == l { 1.0 } else { 0.0 };
            total += g * g;
        }
    }
    total
}

/// Returns dL/dH' (steps x hidden) given dL/dM, adding `penalty_scale *
/// ‖AAᵀ − I‖²` gradients.
pub(crate) fn attention_backward(
    p: &ParamSet,
    g: &mut ParamSet,
    base: usize,
    cache: &AttnCache,
    dm: &[f64],
    penalty_scale: f64,
) -> Vec<f64> {
    let AttnCache { steps, hidden, d_a, r, .. } = *cache;
    let (hp, a) = (&cache.hp, &cache.a);
    let mut dhp = vec![0.0; steps * hidden];
    let mut da = vec![0.0; r * steps];
    for k in 0..r {
        let dmk = &dm[k * hidden..(k + 1) * hidden];
        for t in 0..steps {
            let ht = &hp[t * hidden..(t + 1) * hidden];
            da[k * steps + t] = dot(dmk, ht);
            let w = a[k * steps + t];
            for (d, &v) in dhp[t * hidden..(t + 1) * hidden].iter_mut().zip(dmk) {
                *d += w * v;
            }
        }
    }
    if penalty_scale != 0.0 {
        // d/dA ‖G‖² = 4 G A with G = AAᵀ − I symmetric.
        let mut gram = vec![0.0; r * r];
        for k in 0..r {
            for l in 0..r {
                gram[k * r + l] = dot(&a[k * steps..(k + 1) * steps], &a[l * steps..(l + 1) * steps])
                    - if k == l { 1.0 } else { 0.0 };
            }
        }
        for k in 0..r {
            for t in 0..steps {
                let ga: f64 = (0..r).map(|l| gram[k * r + l] * a[l * steps + t]).sum();
                da[k * steps + t] += 4.0 * penalty_scale * ga;
            }
        }
    }
    // Row softmax backward.
    let mut de = vec![0.0; r * steps];
    for k in 0..r {
        let row = &a[k * steps..(k + 1) * steps];
        let drow = &da[k * steps..(k + 1) * steps];
        let inner = dot(row, drow);
        for t in 0..steps {
            de[k * steps + t] = row[t] * (drow[t] - inner);
        }
    }
    let w1 = p.data(base).to_vec();
    let w2 = p.data(base + 1).to_vec();
    let mut de_t = vec![0.0; r];
    let mut du = vec![0.0; d_a];
    for t in 0..steps {
        for k in 0..r {
            de_t[k] = de[k * steps + t];
        }
        let st = &cache.s[t * d_a..(t + 1) * d_a];
        outer_add(g.data_mut(base + 1), &de_t, st);
        du.iter_mut().for_each(|v| *v = 0.0);
        gemv_t_add(&w2, &de_t, &mut du);
        for (d, &sv) in du.iter_mut().zip(st) {
            *d *= 1.0 - sv * sv;
        }
        let ht = &hp[t * hidden..(t + 1) * hidden];
        outer_add(g.data_mut(base), &du, ht);
        gemv_t_add(&w1, &du, &mut dhp[t * hidden..(t + 1) * hidden]);
    }
    dhp
}
