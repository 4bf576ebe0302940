//! Loop-level f64 ViT that reads weights by name and shares no code with the
//! tensor engine. Used as the dense-backbone oracle.

use avtrack::tensor::ParamStore;
use avtrack::vit::BackboneConfig;

struct W<'a>(&'a ParamStore<f64>);

impl W<'_> {
    fn get(&self, name: &str) -> &[f64] {
        self.0.by_name(name).unwrap_or_else(|e| panic!("{e}")).data()
    }
}

/// `x: [n, i]` times `w: [i, o]` plus `b: [o]`.
fn affine(x: &[f64], n: usize, i: usize, w: &[f64], b: &[f64], o: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * o];
    for r in 0..n {
        for c in 0..o {
            let mut acc = b[c];
            for k in 0..i {
                acc += x[r * i + k] * w[k * o + c];
            }
            y[r * o + c] = acc;
        }
    }
    y
}

fn layernorm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (row, out) in x.chunks(d).zip(y.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for j in 0..d {
            out[j] = (row[j] - mean) * inv * g[j] + b[j];
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Patch tokens `[n, d]` of one image `[3, h, w]`, plus position embedding.
fn embed(img: &[f64], h: usize, w: usize, p: usize, d: usize, wt: &[f64], b: &[f64], pos: &[f64]) -> Vec<f64> {
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![0.0; gh * gw * d];
    for gy in 0..gh {
        for gx in 0..gw {
            let t = gy * gw + gx;
            for o in 0..d {
                let mut acc = b[o];
                for c in 0..3 {
                    for ky in 0..p {
                        for kx in 0..p {
                            let px = img[c * h * w + (gy * p + ky) * w + gx * p + kx];
                            acc += px * wt[((o * 3 + c) * p + ky) * p + kx];
                        }
                    }
                }
                out[t * d + o] = acc + pos[t * d + o];
            }
        }
    }
    out
}

fn block(x: &mut [f64], k: usize, d: usize, heads: usize, w: &W, name: &str) {
    let ln = |x: &[f64], n: &str| layernorm(x, d, w.get(&format!("{name}.{n}.weight")), w.get(&format!("{name}.{n}.bias")));
    let lin = |x: &[f64], n: &str, i: usize, o: usize| {
        affine(x, x.len() / i, i, w.get(&format!("{name}.{n}.weight")), w.get(&format!("{name}.{n}.bias")), o)
    };
    let h = ln(x, "norm1");
    let q = lin(&h, "attn.q", d, d);
    let kk = lin(&h, "attn.k", d, d);
    let v = lin(&h, "attn.v", d, d);
    let dh = d / heads;
    let mut ctx = vec![0.0; k * d];
    for hd in 0..heads {
        for i in 0..k {
            let mut s = vec![0.0; k];
            for j in 0..k {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q[i * d + hd * dh + c] * kk[j * d + hd * dh + c];
                }
                s[j] = dot / (dh as f64).sqrt();
            }
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                let a = (s[j] - m).exp() / z;
                for c in 0..dh {
                    ctx[i * d + hd * dh + c] += a * v[j * d + hd * dh + c];
                }
            }
        }
    }
    let a = lin(&ctx, "attn.proj", d, d);
    for (xi, ai) in x.iter_mut().zip(&a) {
        *xi += ai;
    }
    let h = ln(x, "norm2");
    let hid = w.0.by_name(&format!("{name}.mlp.fc1.bias")).unwrap().numel();
    let m: Vec<f64> = lin(&h, "mlp.fc1", d, hid).into_iter().map(gelu).collect();
    let m = lin(&m, "mlp.fc2", hid, d);
    for (xi, mi) in x.iter_mut().zip(&m) {
        *xi += mi;
    }
}

/// Final normalized tokens `[B, K, d]` after the first `depth` blocks,
/// applied densely. `z` and `x` are `[B, 3, H, W]` in row-major order.
pub fn dense_vit(store: &ParamStore<f64>, cfg: &BackboneConfig, z: &[f64], x: &[f64], batch: usize, depth: usize) -> Vec<f64> {
    let w = W(store);
    let d = cfg.dim;
    let (hz, wz) = cfg.template_size;
    let (hx, wx) = cfg.search_size;
    let k = cfg.num_tokens();
    let mut out = Vec::with_capacity(batch * k * d);
    for s in 0..batch {
        let mut t = embed(
            &z[s * 3 * hz * wz..(s + 1) * 3 * hz * wz],
            hz,
            wz,
            cfg.patch,
            d,
            w.get("patch_embed.weight"),
            w.get("patch_embed.bias"),
            w.get("pos_embed.template"),
        );
        t.extend(embed(
            &x[s * 3 * hx * wx..(s + 1) * 3 * hx * wx],
            hx,
            wx,
            cfg.patch,
            d,
            w.get("patch_embed.weight"),
            w.get("patch_embed.bias"),
            w.get("pos_embed.search"),
        ));
        for i in 0..depth {
            block(&mut t, k, d, cfg.heads, &w, &format!("blocks.{i}"));
        }
        out.extend(layernorm(&t, d, w.get("norm.weight"), w.get("norm.bias")));
    }
    out
}
