//! Test-only reference implementations, written without the library's numerics.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use vitsplice::archive::{meta, WeightArchive};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Prints one verdict line past the test harness's output capture, then asserts.
pub fn verdict(criterion: u32, name: &str, pass: bool, detail: impl AsRef<str>) {
    use std::io::Write;
    let line = format!(
        "criterion {criterion} [{name}]: {} ({})\n",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{}", line.trim_end());
}

/// Keys-cosine self-similarity of a row-major `(rows × cols)` matrix.
pub fn naive_selfsim(k: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let norm: Vec<f64> = (0..rows)
        .map(|i| k[i * cols..(i + 1) * cols].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut s = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            let mut dot = 0.0;
            for c in 0..cols {
                dot += k[i * cols + c] * k[j * cols + c];
            }
            s[i * rows + j] = dot / (norm[i] * norm[j]);
        }
    }
    s
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn keys_cubic(t: f64) -> f64 {
    const A: f64 = -0.75;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t.powi(3) - (A + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        A * t.powi(3) - 5.0 * A * t.powi(2) + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Half-pixel-centred bicubic resampling of one axis with edge replication.
fn resample_axis(src: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_out];
    let scale = n_in as f64 / n_out as f64;
    for (o, dst) in out.iter_mut().enumerate() {
        let pos = (o as f64 + 0.5) * scale - 0.5;
        let base = pos.floor();
        for k in -1..=2 {
            let idx = (base as i64 + k).clamp(0, n_in as i64 - 1) as usize;
            *dst += keys_cubic(pos - (base + k as f64)) * src[idx];
        }
    }
    out
}

/// Bicubic resize of a `3 × h × w` planar image.
pub fn naive_resize(x: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return x.to_vec();
    }
    let mut out = vec![0.0; 3 * oh * ow];
    for c in 0..3 {
        let plane = &x[c * h * w..(c + 1) * h * w];
        let mut rows = vec![0.0; h * ow];
        for y in 0..h {
            let r = resample_axis(&plane[y * w..(y + 1) * w], w, ow);
            rows[y * ow..(y + 1) * ow].copy_from_slice(&r);
        }
        for xo in 0..ow {
            let col: Vec<f64> = (0..h).map(|y| rows[y * ow + xo]).collect();
            let r = resample_axis(&col, h, oh);
            for yo in 0..oh {
                out[c * oh * ow + yo * ow + xo] = r[yo];
            }
        }
    }
    out
}

/// Plain-loop float64 pre-norm ViT over archive tensors.
pub struct NaiveVit {
    pub patch: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub eps: f64,
    mean: [f64; 3],
    std: [f64; 3],
    t: HashMap<String, Vec<f64>>,
}

pub struct NaiveOutput {
    pub cls: Vec<f64>,
    /// Row-major `(n + 1) × d`.
    pub keys: Vec<f64>,
    pub tokens: usize,
}

impl NaiveVit {
    pub fn new(a: &WeightArchive) -> Self {
        let get = |k: &str| a.meta(k).unwrap_or_else(|| panic!("missing meta {k}")).to_string();
        let floats = |k: &str| {
            let v: Vec<f64> = get(k).split(',').map(|s| s.trim().parse::<f32>().unwrap() as f64).collect();
            [v[0], v[1], v[2]]
        };
        let t = a
            .names()
            .map(|n| (n.to_string(), a.get(n).unwrap().data.iter().map(|v| *v as f64).collect()))
            .collect();
        Self {
            patch: get(meta::PATCH_SIZE).parse().unwrap(),
            layers: get(meta::NUM_LAYERS).parse().unwrap(),
            dim: get(meta::EMBED_DIM).parse().unwrap(),
            heads: get(meta::NUM_HEADS).parse().unwrap(),
            eps: get(meta::LAYER_NORM_EPS).parse().unwrap(),
            mean: floats(meta::IMAGE_MEAN),
            std: floats(meta::IMAGE_STD),
            t,
        }
    }

    fn p(&self, name: &str) -> &[f64] {
        &self.t[name]
    }

    /// Resizes a square `3 × s × s` image in `[0, 1]` to `side` and normalizes it.
    pub fn preprocess(&self, x: &[f64], s: usize, side: usize) -> Vec<f64> {
        let mut r = naive_resize(x, s, s, side, side);
        for c in 0..3 {
            for v in &mut r[c * side * side..(c + 1) * side * side] {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        r
    }

    fn layer_norm(&self, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        let mu = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
        let inv = 1.0 / (var + self.eps).sqrt();
        x.iter().zip(w).zip(b).map(|((v, w), b)| (v - mu) * inv * w + b).collect()
    }

    /// `W x + b` with `W` stored `(out × in)` row-major.
    fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let n_in = x.len();
        b.iter()
            .enumerate()
            .map(|(o, bo)| bo + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>())
            .collect()
    }

    /// Layer-`layer` [CLS] and keys for a normalized `3 × side × side` input.
    pub fn forward(&self, x: &[f64], side: usize, layer: usize) -> NaiveOutput {
        let (p, d) = (self.patch, self.dim);
        let g = side / p;
        let n = g * g + 1;
        let pw = self.p("patch_embed.proj.weight");
        let pb = self.p("patch_embed.proj.bias");
        let pos = self.p("pos_embed");
        let mut z = vec![vec![0.0; d]; n];
        for c in 0..d {
            z[0][c] = self.p("cls_token")[c] + pos[c];
        }
        for gy in 0..g {
            for gx in 0..g {
                let tok = 1 + gy * g + gx;
                for o in 0..d {
                    let mut acc = pb[o];
                    for ch in 0..3 {
                        for ky in 0..p {
                            for kx in 0..p {
                                let wv = pw[((o * 3 + ch) * p + ky) * p + kx];
                                acc += wv * x[ch * side * side + (gy * p + ky) * side + gx * p + kx];
                            }
                        }
                    }
                    z[tok][o] = acc + pos[tok * d + o];
                }
            }
        }
        let hd = d / self.heads;
        let mut keys = Vec::new();
        for l in 0..layer {
            let b = |s: &str| format!("blocks.{l}.{s}");
            let qkv: Vec<Vec<f64>> = z
                .iter()
                .map(|t| {
                    let h = self.layer_norm(t, self.p(&b("norm1.weight")), self.p(&b("norm1.bias")));
                    Self::affine(&h, self.p(&b("attn.qkv.weight")), self.p(&b("attn.qkv.bias")))
                })
                .collect();
            keys = qkv.iter().flat_map(|r| r[d..2 * d].to_vec()).collect();
            let mut ctx = vec![vec![0.0; d]; n];
            for head in 0..self.heads {
                let off = head * hd;
                for i in 0..n {
                    let logits: Vec<f64> = (0..n)
                        .map(|j| {
                            (0..hd).map(|c| qkv[i][off + c] * qkv[j][d + off + c]).sum::<f64>() / (hd as f64).sqrt()
                        })
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
                    let sum: f64 = e.iter().sum();
                    for j in 0..n {
                        for c in 0..hd {
                            ctx[i][off + c] += e[j] / sum * qkv[j][2 * d + off + c];
                        }
                    }
                }
            }
            for i in 0..n {
                let proj = Self::affine(&ctx[i], self.p(&b("attn.proj.weight")), self.p(&b("attn.proj.bias")));
                for c in 0..d {
                    z[i][c] += proj[c];
                }
                let h2 = self.layer_norm(&z[i], self.p(&b("norm2.weight")), self.p(&b("norm2.bias")));
                let hidden: Vec<f64> = Self::affine(&h2, self.p(&b("mlp.fc1.weight")), self.p(&b("mlp.fc1.bias")))
                    .into_iter()
                    .map(|v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
                    .collect();
                let out = Self::affine(&hidden, self.p(&b("mlp.fc2.weight")), self.p(&b("mlp.fc2.bias")));
                for c in 0..d {
                    z[i][c] += out[c];
                }
            }
        }
        NaiveOutput {
            cls: z[0].clone(),
            keys,
            tokens: n,
        }
    }
}
