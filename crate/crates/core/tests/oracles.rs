//! Worked examples checked against independent hand computations or
//! reference implementations, with the reference outputs frozen here.

mod common;

use std::sync::Arc;

use specrr::autodiff::Graph;
use specrr::codebook::{CodebookConfig, CodebookModel};
use specrr::metrics::{psnr, ssim};
use specrr::nn::{deformable_conv3x3, ConvSpec, DeformableConvSpec, HeadLayout, OFFSET_CHANNELS};
use specrr::params::ParamStore;
use specrr::pipeline::{removal_loss, ModelConfig, RemovalModel};
use specrr::refine::{apply_permutation, spatial_sort, DiagonalMask, Direction};
use specrr::saformer::{cg_msa, dst_tokenize, Ordered, Region, SaformerBlock, SaformerConfig, Stream, TokenSet};
use specrr::synth::{Material, Patch, Scene, Shape};
use specrr::{Tensor, BANDS};

/// PCG-style LCG shared with the Python script that produced the frozen
/// references below.
fn lcg(mut state: u64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

/// skimage 0.25.2: `peak_signal_noise_ratio(a, b, data_range=1)` and
/// `structural_similarity(a, b, channel_axis=0, gaussian_weights=True,
/// sigma=1.5, use_sample_covariance=False, data_range=1)`.
const SKIMAGE: [(usize, f64, f64); 10] = [
    (0, 37.216440644587706, 0.9947777282949678),
    (1, 32.57897709740782, 0.9794547140394402),
    (2, 29.96073393294143, 0.9699100143530389),
    (3, 27.827676854957204, 0.9524258653883743),
    (4, 26.33795482496105, 0.9361794901479072),
    (5, 24.738093460264167, 0.9048466549679977),
    (6, 23.452928800186154, 0.8743501663007688),
    (7, 22.587672482046468, 0.8542920150774526),
    (8, 21.62312785748845, 0.8338009277546719),
    (9, 20.746069801301804, 0.8044538618086902),
];

fn metric_pair(case: usize) -> (Tensor<f64>, Tensor<f64>) {
    let (h, w) = (12 + case, 16 + 2 * case);
    let n = 3 * h * w;
    let (a, noise) = (lcg(1000 + case as u64, n), lcg(2000 + case as u64, n));
    let mut x = vec![0.0; n];
    let mut y = vec![0.0; n];
    for i in 0..n {
        let (r, c) = ((i / w) % h, i % w);
        let base = 0.5 + 0.4 * (0.3 * c as f64 + 0.2 * r as f64 + case as f64).sin();
        x[i] = (0.7 * base + 0.3 * a[i]).clamp(0.0, 1.0);
        y[i] = (x[i] + (noise[i] - 0.5) * (0.05 + 0.03 * case as f64)).clamp(0.0, 1.0);
    }
    (
        Tensor::from_vec(&[3, h, w], x).unwrap(),
        Tensor::from_vec(&[3, h, w], y).unwrap(),
    )
}

#[test]
fn psnr_and_ssim_match_skimage() {
    for (case, p_ref, s_ref) in SKIMAGE {
        let (a, b) = metric_pair(case);
        let p = psnr(&a, &b, 1.0).unwrap();
        let s = ssim(&a, &b, 1.0).unwrap();
        assert!((p - p_ref).abs() < 1e-6, "case {case}: psnr {p} vs {p_ref}");
        assert!((s - s_ref).abs() < 1e-6, "case {case}: ssim {s} vs {s_ref}");
    }
}

/// Bilinear read with zeros outside the image.
fn bilinear(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (yy, xx) = (y0 + dy, x0 + dx);
            if yy >= 0.0 && xx >= 0.0 && (yy as usize) < h && (xx as usize) < w {
                acc += wy * wx * img[yy as usize * w + xx as usize];
            }
        }
    }
    acc
}

#[test]
fn half_pixel_vertical_offsets_match_per_tap_sampling() {
    let mut r = common::rng(66);
    let x = Tensor::<f64>::randn(&[1, 1, 4, 4], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[1, 1, 3, 3], 1.0, &mut r);
    let base = ConvSpec::new(1, 1, 3, false, w.clone(), None).unwrap();
    let bias: Vec<f64> = (0..OFFSET_CHANNELS).map(|c| if c % 2 == 0 { 0.5 } else { 0.0 }).collect();
    let offsets = ConvSpec::new(
        1,
        OFFSET_CHANNELS,
        3,
        false,
        Tensor::zeros(&[OFFSET_CHANNELS, 1, 3, 3]),
        Some(Tensor::from_vec(&[OFFSET_CHANNELS], bias).unwrap()),
    )
    .unwrap();
    let y = deformable_conv3x3(&x, &DeformableConvSpec::new(base, offsets).unwrap()).unwrap();
    for oy in 0..4 {
        for ox in 0..4 {
            let mut want = 0.0;
            for ky in 0..3 {
                for kx in 0..3 {
                    let py = oy as f64 + ky as f64 - 1.0 + 0.5;
                    let px = ox as f64 + kx as f64 - 1.0;
                    want += w.data()[ky * 3 + kx] * bilinear(x.data(), 4, 4, py, px);
                }
            }
            let got = y.data()[oy * 4 + ox];
            assert!((got - want).abs() < 1e-12, "({oy}, {ox}): {got} vs {want}");
        }
    }
}

#[test]
fn shared_permutation_keeps_pixel_correspondence() {
    // channel 0 of both tensors carries the pixel's original coordinate
    let (h, w) = (5, 7);
    let mut r = common::rng(266);
    let mut s = Tensor::<f64>::rand_uniform(&[1, BANDS, h, w], 0.0, 1.0, &mut r);
    let mut f = Tensor::<f64>::randn(&[1, 3, h, w], 1.0, &mut r);
    let tags: Vec<f64> = (0..h * w).map(|p| p as f64).collect();
    // tag after sorting so the tag does not change the sort key
    let (s_sorted, perms) = spatial_sort(&s).unwrap();
    f.data_mut()[..h * w].copy_from_slice(&tags);
    s.data_mut()[..h * w].copy_from_slice(&tags);
    let s_tagged = apply_permutation(&s, &perms, Direction::Forward).unwrap();
    let f_sorted = apply_permutation(&f, &perms, Direction::Forward).unwrap();
    assert_eq!(&s_tagged.data()[..h * w], &f_sorted.data()[..h * w]);
    // untagged channels moved exactly as in the sorted spectrum
    assert_eq!(&s_tagged.data()[h * w..], &s_sorted.data()[h * w..]);
    let back = apply_permutation(&f_sorted, &perms, Direction::Inverse).unwrap();
    assert_eq!(&back.data()[..h * w], &tags[..]);
}

#[test]
fn token_shapes_follow_head_layout() {
    let mut r = common::rng(336);
    let mut store = ParamStore::<f64>::new();
    let cfg = SaformerConfig {
        channels: 64,
        spectrum_channels: BANDS,
        heads: 4,
        dst: true,
        cg_msa: true,
        cc_ffn: true,
        stream: Stream::Dual,
        share_region_weights: false,
    };
    let block = SaformerBlock::new(&mut store, "b", cfg, &mut r).unwrap();
    let (h, w) = (6, 5);
    let s = Tensor::<f64>::rand_uniform(&[1, BANDS, h, w], 0.0, 1.0, &mut r);
    let (s_sorted, perms) = spatial_sort(&s).unwrap();
    let perms = Arc::new(perms);
    let f = apply_permutation(&Tensor::<f64>::randn(&[1, 64, h, w], 1.0, &mut r), &perms, Direction::Forward).unwrap();
    let mut g = Graph::new();
    let (fv, sv) = (g.leaf(f, true), g.leaf(s_sorted, true));
    let tokens = dst_tokenize(
        &mut g,
        &store,
        &block,
        &Ordered::sorted(fv, perms.clone()),
        Some(&Ordered::sorted(sv, perms.clone())),
    )
    .unwrap();
    assert_eq!(tokens.len(), 2);
    let layout = HeadLayout::new(64, 4, h * w).unwrap();
    assert_eq!((layout.heads, layout.d_head, layout.pixels), (4, 16, 30));
    for t in &tokens {
        assert_eq!(t.head_shape(&g), [4, 16, 30]);
        for v in [t.q, t.k, t.v] {
            assert_eq!(g.shape(v), &[1, 64, h, w]);
        }
    }
}

/// softmax(Q Kᵀ / √d) V for one head, row-major (d, P) matrices.
fn dense_attention(q: &[f64], k: &[f64], v: &[f64], d: usize, p: usize) -> Vec<f64> {
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = (0..p).map(|t| q[i * p + t] * k[j * p + t]).sum::<f64>() / (d as f64).sqrt();
        }
        let m = a[i * d..(i + 1) * d].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = a[i * d..(i + 1) * d].iter().map(|x| (x - m).exp()).sum();
        for j in 0..d {
            a[i * d + j] = (a[i * d + j] - m).exp() / z;
        }
    }
    let mut out = vec![0.0; d * p];
    for i in 0..d {
        for t in 0..p {
            out[i * p + t] = (0..d).map(|j| a[i * d + j] * v[j * p + t]).sum();
        }
    }
    out
}

#[test]
fn cross_domain_attention_matches_dense_products() {
    let mut r = common::rng(346);
    let shape = [1, 2, 2, 2];
    let mask = DiagonalMask::new(2, 2);
    let weights = [mask.tl_weights::<f64>(), mask.br_weights::<f64>()];
    let qkv: Vec<[Tensor<f64>; 3]> = (0..2)
        .map(|_| {
            [
                Tensor::randn(&shape, 1.0, &mut r),
                Tensor::randn(&shape, 1.0, &mut r),
                Tensor::randn(&shape, 1.0, &mut r),
            ]
        })
        .collect();
    let residual = Tensor::<f64>::randn(&shape, 1.0, &mut r);

    let mut g = Graph::new();
    let res = g.leaf(residual.clone(), true);
    let tokens: Vec<TokenSet<f64>> = qkv
        .iter()
        .zip([Region::TopLeft, Region::BottomRight])
        .zip(&weights)
        .map(|((t, region), m)| {
            // region tokens are zero outside their region
            let masked = |x: &Tensor<f64>| {
                let mut x = x.clone();
                for c in 0..2 {
                    for p in 0..4 {
                        x.data_mut()[c * 4 + p] *= m[p];
                    }
                }
                x
            };
            TokenSet {
                q: g.leaf(masked(&t[0]), true),
                k: g.leaf(masked(&t[1]), true),
                v: g.leaf(masked(&t[2]), true),
                region,
                heads: 1,
                mask: Some(m.clone()),
            }
        })
        .collect();
    let (out, maps) = cg_msa(&mut g, &tokens, res).unwrap();
    assert_eq!(maps.len(), 2);

    let mut want = vec![0.0; 8];
    for (t, m) in qkv.iter().zip(&weights) {
        let masked: Vec<Vec<f64>> = t
            .iter()
            .map(|x| x.data().iter().enumerate().map(|(i, v)| v * m[i % 4]).collect())
            .collect();
        let a = dense_attention(&masked[0], &masked[1], &masked[2], 2, 4);
        for i in 0..8 {
            want[i] += a[i] + residual.data()[i] * m[i % 4];
        }
    }
    for (i, (g_, w_)) in g.value(out).data().iter().zip(&want).enumerate() {
        assert!((g_ - w_).abs() < 1e-12, "element {i}: {g_} vs {w_}");
    }
}

#[test]
fn disjoint_reflectances_have_no_shared_band() {
    let mut low = [0.0; BANDS];
    let mut high = [0.0; BANDS];
    for b in 0..BANDS {
        if b < 15 {
            low[b] = 0.2 + 0.02 * b as f64;
        } else {
            high[b] = 0.9 - 0.01 * b as f64;
        }
    }
    let scene = Scene {
        illuminant: [1.0; BANDS],
        background: Material { reflectance: low },
        patches: vec![Patch {
            shape: Shape::Rect { y0: 0.0, x0: 0.5, y1: 1.0, x1: 1.0 },
            material: Material { reflectance: high },
            brightness: 1.0,
        }],
    };
    let (h, w) = (4, 8);
    let cube = scene.render(h, w);
    let mean = |cols: std::ops::Range<usize>| -> Vec<f64> {
        (0..BANDS)
            .map(|b| {
                let n = cols.len() * h;
                (0..h)
                    .flat_map(|y| cols.clone().map(move |x| (y, x)))
                    .map(|(y, x)| cube.data()[(b * h + y) * w + x] as f64)
                    .sum::<f64>()
                    / n as f64
            })
            .collect()
    };
    let (left, right) = (mean(0..4), mean(4..8));
    let cross: f64 = left.iter().zip(&right).map(|(a, b)| a * b).sum();
    assert_eq!(cross, 0.0);
    assert!(left.iter().sum::<f64>() > 0.0 && right.iter().sum::<f64>() > 0.0);
}

#[test]
fn default_encoder_emits_configured_latent_width() {
    let cfg = CodebookConfig::default();
    assert_eq!(cfg.n_z, 64);
    let model = CodebookModel::<f32>::new(cfg, 0).unwrap();
    let last = &model.encoder.layers[3];
    assert_eq!(model.store.get(last.weight).shape()[0], 64);
    assert_eq!(model.store.get(model.codes).shape(), &[BANDS * 256, 64]);
}

#[test]
fn every_trainable_parameter_receives_gradient() {
    let prior = CodebookModel::<f64>::new(CodebookConfig { k: 4, n_z: 4, hidden: 8, ..CodebookConfig::default() }, 3).unwrap();
    let cfg = ModelConfig { channels: 8, blocks: 2, heads: 2, k: 4, n_z: 4, ..ModelConfig::default() };
    let model = RemovalModel::new(cfg, Some(&prior)).unwrap();
    let mut r = common::rng(5);
    let x = Tensor::<f64>::rand_uniform(&[2, 3, 12, 12], 0.0, 1.0, &mut r);
    let t = Tensor::<f64>::rand_uniform(&[2, 3, 12, 12], 0.0, 1.0, &mut r);
    let mut g = Graph::new();
    let (xv, tv) = (g.constant(x), g.constant(t));
    let fwd = model.forward(&mut g, xv).unwrap();
    let (loss, _) = removal_loss(&mut g, fwd.output, tv).unwrap();
    let grads = g.backward(loss).unwrap();
    let bound: Vec<_> = g.bindings().collect();
    let mut dead = Vec::new();
    for id in model.store.ids().filter(|id| model.store.is_trainable(*id)) {
        let live = bound
            .iter()
            .filter(|(p, _)| *p == id)
            .any(|(_, v)| grads.get(*v).is_some_and(|gr| gr.data().iter().any(|x| *x != 0.0)));
        if !live {
            dead.push(model.store.name(id).to_string());
        }
    }
    assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
}
