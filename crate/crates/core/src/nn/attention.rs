//! Local 1-d self-attention with learned relative-position key embeddings.
//!
//! Frame `t` attends to frames `t - h ..= t + h` (clipped at the sequence
//! edges) with logits `q_t · (k_s + r_{s-t}) / sqrt(D)`.

use std::rc::Rc;

use ndarray::IxDyn;

use super::graph::{Tensor, Var};

/// `q`, `k`, `v` are (N, T, D); `rel` is (2h + 1, D). Returns (N, T, D).
pub fn local_relative_attention<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    rel: Var<'g>,
    half_window: usize,
) -> Var<'g> {
    let (qv, kv, vv, rv) = (q.value(), k.value(), v.value(), rel.value());
    assert_eq!(qv.ndim(), 3, "attention: q must be (N, T, D)");
    assert_eq!(qv.shape(), kv.shape(), "attention: q/k shape mismatch");
    assert_eq!(qv.shape(), vv.shape(), "attention: q/v shape mismatch");
    let (n, t_len, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
    let window = 2 * half_window + 1;
    assert_eq!(rv.shape(), &[window, d], "attention: relative table shape");
    let scale = 1.0 / (d as f64).sqrt();

    let qs = Rc::new(qv.as_standard_layout().into_owned().into_raw_vec_and_offset().0);
    let ks = Rc::new(kv.as_standard_layout().into_owned().into_raw_vec_and_offset().0);
    let vs = Rc::new(vv.as_standard_layout().into_owned().into_raw_vec_and_offset().0);
    let rs = Rc::new(rv.as_standard_layout().into_owned().into_raw_vec_and_offset().0);

    let span = move |t: usize| {
        let lo = t.saturating_sub(half_window);
        let hi = (t + half_window).min(t_len - 1);
        (lo, hi)
    };

    let mut weights = vec![0.0; n * t_len * window];
    let mut out = vec![0.0; n * t_len * d];
    let mut logits = vec![0.0; window];
    for b in 0..n {
        for t in 0..t_len {
            let row = (b * t_len + t) * d;
            let qt = &qs[row..row + d];
            let (lo, hi) = span(t);
            let mut max = f64::NEG_INFINITY;
            for s in lo..=hi {
                let j = s + half_window - t;
                let ks_row = &ks[(b * t_len + s) * d..(b * t_len + s + 1) * d];
                let rj = &rs[j * d..(j + 1) * d];
                let dot: f64 = qt
                    .iter()
                    .zip(ks_row.iter().zip(rj))
                    .map(|(q, (k, r))| q * (k + r))
                    .sum();
                logits[j] = dot * scale;
                max = max.max(logits[j]);
            }
            let mut z = 0.0;
            for s in lo..=hi {
                let j = s + half_window - t;
                logits[j] = (logits[j] - max).exp();
                z += logits[j];
            }
            let w_row = &mut weights[(b * t_len + t) * window..(b * t_len + t + 1) * window];
            let o_row = &mut out[row..row + d];
            for s in lo..=hi {
                let j = s + half_window - t;
                let a = logits[j] / z;
                w_row[j] = a;
                let v_row = &vs[(b * t_len + s) * d..(b * t_len + s + 1) * d];
                for (o, v) in o_row.iter_mut().zip(v_row) {
                    *o += a * v;
                }
            }
        }
    }

    let out = Tensor::from_shape_vec(IxDyn(&[n, t_len, d]), out).expect("shape");
    q.graph().op(
        out,
        &[q, k, v, rel],
        Box::new(move |g, need| {
            let gs = g.as_standard_layout();
            let gs = gs.as_slice().expect("standard layout");
            let mut dq = vec![0.0; n * t_len * d];
            let mut dk = vec![0.0; n * t_len * d];
            let mut dv = vec![0.0; n * t_len * d];
            let mut dr = vec![0.0; window * d];
            let mut da = vec![0.0; window];
            for b in 0..n {
                for t in 0..t_len {
                    let row = (b * t_len + t) * d;
                    let go = &gs[row..row + d];
                    let qt = &qs[row..row + d];
                    let w_row = &weights[(b * t_len + t) * window..(b * t_len + t + 1) * window];
                    let (lo, hi) = span(t);
                    let mut mean = 0.0;
                    for s in lo..=hi {
                        let j = s + half_window - t;
                        let srow = (b * t_len + s) * d;
                        let v_row = &vs[srow..srow + d];
                        da[j] = go.iter().zip(v_row).map(|(a, b)| a * b).sum();
                        mean += w_row[j] * da[j];
                        let a = w_row[j];
                        for (dvv, gv) in dv[srow..srow + d].iter_mut().zip(go) {
                            *dvv += a * gv;
                        }
                    }
                    for s in lo..=hi {
                        let j = s + half_window - t;
                        let ds = w_row[j] * (da[j] - mean) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let srow = (b * t_len + s) * d;
                        for i in 0..d {
                            dq[row + i] += ds * (ks[srow + i] + rs[j * d + i]);
                            dk[srow + i] += ds * qt[i];
                            dr[j * d + i] += ds * qt[i];
                        }
                    }
                }
            }
            let shape = [n, t_len, d];
            let wrap = |data: Vec<f64>, s: &[usize]| Tensor::from_shape_vec(IxDyn(s), data).expect("shape");
            vec![
                need[0].then(|| wrap(dq, &shape)),
                need[1].then(|| wrap(dk, &shape)),
                need[2].then(|| wrap(dv, &shape)),
                need[3].then(|| wrap(dr, &[window, d])),
            ]
        }),
    )
}
