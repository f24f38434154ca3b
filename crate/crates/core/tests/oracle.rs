//! A one-layer model written out with plain loops, checked against the
//! tape-based forward pass with a buffer, an adapter and the segment mask.

use lcc_core::lora::{init_adapter, Projection};
use lcc_core::model::{ModelConfig, ModelWeights, NORM_EPS};
use lcc_core::transformer::{forward, ForwardArgs, Slot};
use lcc_core::{build_segment_mask, RngState, SegmentLayout, SegmentSet, Tensor};

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn rmsnorm(x: &[f64], g: &Tensor) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(g.data()).map(|(v, g)| v * r * g).collect()
}

fn rope(x: &mut [f64], pos: usize, n_heads: usize, base: f64) {
    let hd = x.len() / n_heads;
    let half = hd / 2;
    for h in 0..n_heads {
        for i in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / hd as f64);
            let (a, b) = (x[h * hd + i], x[h * hd + i + half]);
            x[h * hd + i] = a * theta.cos() - b * theta.sin();
            x[h * hd + i + half] = a * theta.sin() + b * theta.cos();
        }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

struct Lora<'a> {
    adapter: &'a lcc_core::LoraAdapter,
    active: Vec<bool>,
}

fn project(w: &Tensor, lora: &Lora<'_>, proj: Projection, x: &[f64], row: usize) -> Vec<f64> {
    let mut out = matvec(w, x);
    if lora.active[row] {
        let pair = lora.adapter.slot(0, proj).expect("all projections adapted");
        let delta = matvec(&pair.b, &matvec(&pair.a, x));
        for (o, d) in out.iter_mut().zip(delta) {
            *o += lora.adapter.scale() * d;
        }
    }
    out
}

#[test]
fn one_layer_forward_matches_hand_written_loops() {
    let cfg = ModelConfig {
        vocab_size: 20,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        head_dim: 4,
        d_ff: 12,
        max_position: 32,
        rope_base: 100.0,
    };
    let mut rng = RngState::new(21);
    let w = ModelWeights::init(&cfg, &mut rng).unwrap();
    let mut adapter = init_adapter(&cfg, 2, 4.0, &mut rng).unwrap();
    for t in adapter.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = 0.3 * rng.normal());
    }
    adapter.active = SegmentSet::compression();
    let buffer = Tensor::from_fn(&[2, 8], |_| rng.normal());

    let layout = SegmentLayout::new(3, 2, 2, 2).unwrap();
    let slots = [
        Slot::Token(4),
        Slot::Token(9),
        Slot::Token(1),
        Slot::Buffer(0),
        Slot::Buffer(1),
        Slot::Token(7),
        Slot::Token(3),
        Slot::Token(15),
        Slot::Token(0),
    ];
    let positions: Vec<usize> = (0..slots.len()).collect();
    let segments = layout.segments();
    let mask = build_segment_mask(&layout);
    let (got, _) = forward(
        &w,
        ForwardArgs {
            adapter: Some(&adapter),
            buffer: Some(&buffer),
            ..ForwardArgs::tokens(&slots, &positions, &segments, &mask)
        },
    )
    .unwrap();

    let lw = &w.layers[0];
    let lora = Lora {
        adapter: &adapter,
        active: segments.iter().map(|&s| adapter.active.contains(s)).collect(),
    };
    let n = slots.len();
    let mut h: Vec<Vec<f64>> = slots
        .iter()
        .map(|s| match *s {
            Slot::Token(t) => w.tok_emb.row(t as usize).to_vec(),
            Slot::Buffer(b) => buffer.row(b).to_vec(),
        })
        .collect();
    let normed: Vec<Vec<f64>> = h.iter().map(|x| rmsnorm(x, &lw.attn_norm)).collect();
    let mut q = Vec::new();
    let mut k = Vec::new();
    let mut v = Vec::new();
    for (i, x) in normed.iter().enumerate() {
        let mut qi = project(&lw.wq, &lora, Projection::Q, x, i);
        let mut ki = project(&lw.wk, &lora, Projection::K, x, i);
        rope(&mut qi, i, 2, cfg.rope_base);
        rope(&mut ki, i, 2, cfg.rope_base);
        q.push(qi);
        k.push(ki);
        v.push(project(&lw.wv, &lora, Projection::V, x, i));
    }
    for i in 0..n {
        let mut attn = vec![0.0; 8];
        for head in 0..2 {
            let cols = head * 4..head * 4 + 4;
            let scores: Vec<Option<f64>> = (0..n)
                .map(|j| {
                    mask.allowed(i, j).then(|| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / 2.0
                    })
                })
                .collect();
            let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                if let Some(s) = s {
                    let p = (s - max).exp() / z;
                    for c in cols.clone() {
                        attn[c] += p * v[j][c];
                    }
                }
            }
        }
        let o = project(&lw.wo, &lora, Projection::O, &attn, i);
        for (x, o) in h[i].iter_mut().zip(o) {
            *x += o;
        }
    }
    for x in h.iter_mut() {
        let m = rmsnorm(x, &lw.mlp_norm);
        let g = matvec(&lw.w_gate, &m);
        let u = matvec(&lw.w_up, &m);
        let gu: Vec<f64> = g.iter().zip(&u).map(|(g, u)| silu(*g) * u).collect();
        for (x, d) in x.iter_mut().zip(matvec(&lw.w_down, &gu)) {
            *x += d;
        }
    }
    for (i, x) in h.iter().enumerate() {
        let want = matvec(&w.head, &rmsnorm(x, &w.final_norm));
        for (a, b) in got.row(i).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "row {i}: {a} vs {b}");
        }
    }
}
