//! Property checks shared by the integration tests and the acceptance
//! runner. Each returns `Ok(summary)` or `Err(first failure)`.

#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specrr::autodiff::{Graph, Var};
use specrr::checkpoint::Checkpoint;
use specrr::codebook::{band_quantize, SpectralCodebook, VqMode};
use specrr::cube_io::{decode_cube, encode_cube};
use specrr::gradcheck::{grad_check, projection, GradCheckConfig, GradReport};
use specrr::nn::{channel_attention, conv2d, deformable_conv3x3, ConvSpec, DeformableConvSpec, OFFSET_CHANNELS};
use specrr::params::ParamStore;
use specrr::refine::{apply_permutation, sdrs, sdrs_var, sort_keys, spatial_sort, DiagonalMask, Direction};
use specrr::saformer::{
    cc_ffn, cg_msa, dst_tokenize, saformer_block, CcFfn, Ordered, Region, SaformerBlock, SaformerConfig, Stream,
    TokenSet,
};
use specrr::{Error, Tensor, BANDS};

pub type Outcome = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small integers, so that ties and exact sums are common.
pub fn int_tensor(shape: &[usize], lo: i32, hi: i32, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..=hi) as f64).collect()).unwrap()
}

/// Exhaustive nearest code in `band`'s partition, lowest index on ties.
pub fn scan_nearest(book: &SpectralCodebook<f64>, band: usize, z: &[f64]) -> u32 {
    let part = book.partition(band);
    let nz = z.len();
    let mut best = (f64::INFINITY, 0u32);
    for (i, code) in part.chunks(nz).enumerate() {
        let d: f64 = z.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, i as u32);
        }
    }
    best.1
}

fn pixel(z: &Tensor<f64>, n: usize, p: usize) -> Vec<f64> {
    let (_, c, h, w) = z.dims4().unwrap();
    (0..c).map(|ci| z.data()[(n * c + ci) * h * w + p]).collect()
}

/// Criterion 1: band-wise quantization against the exhaustive scan.
pub fn vq_oracle(cases: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut ties = 0usize;
    for case in 0..cases {
        let k = r.random_range(1..=32);
        let nz = r.random_range(1..=6);
        let (h, w) = (r.random_range(1..=8), r.random_range(1..=8));
        let n = r.random_range(1..=2);
        // every other case draws from a coarse integer grid to force ties
        let (codes, z) = if case % 2 == 0 {
            (int_tensor(&[BANDS * k, nz], -2, 2, &mut r), int_tensor(&[n, nz, h, w], -2, 2, &mut r))
        } else {
            (
                Tensor::randn(&[BANDS * k, nz], 1.0, &mut r),
                Tensor::randn(&[n, nz, h, w], 1.0, &mut r),
            )
        };
        let book = SpectralCodebook::new(codes, k, VqMode::BandWise).map_err(|e| e.to_string())?;
        let q = band_quantize(&z, &book).map_err(|e| e.to_string())?;
        for s in 0..n {
            for band in 0..BANDS {
                for p in 0..h * w {
                    let zp = pixel(&z, s, p);
                    let want = scan_nearest(&book, band, &zp);
                    let got = q.index(s, band, p / w, p % w);
                    if got != want {
                        return Err(format!(
                            "case {case}: band {band} pixel {p}: got {got}, exhaustive scan {want}"
                        ));
                    }
                    let part = book.partition(band);
                    let dists: Vec<f64> = part
                        .chunks(nz)
                        .map(|c| zp.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum())
                        .collect();
                    if dists.iter().filter(|d| **d == dists[want as usize]).count() > 1 {
                        ties += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{cases} maps, all indices equal the scan ({ties} tied selections)"))
}

/// Criterion 2: band-wise indices stay inside the query band's partition
/// and the quantized vector is that partition's code.
pub fn partition_confinement(quantizations: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    for case in 0..quantizations {
        let k = r.random_range(1..=16);
        let nz = r.random_range(1..=4);
        let codes = Tensor::<f64>::randn(&[BANDS * k, nz], 1.0, &mut r);
        let z = Tensor::randn(&[1, nz, 2, 2], 1.5, &mut r);
        let book = SpectralCodebook::new(codes, k, VqMode::BandWise).map_err(|e| e.to_string())?;
        let q = band_quantize(&z, &book).map_err(|e| e.to_string())?;
        for band in 0..BANDS {
            for p in 0..4 {
                let idx = q.index(0, band, p / 2, p % 2) as usize;
                if idx >= k {
                    return Err(format!("case {case}: band {band} selected {idx} with k = {k}"));
                }
                let code = &book.partition(band)[idx * nz..(idx + 1) * nz];
                for (j, c) in code.iter().enumerate() {
                    if q.quantized.data()[(band * nz + j) * 4 + p] != *c {
                        return Err(format!("case {case}: band {band} pixel {p} is not code {idx} of its partition"));
                    }
                }
            }
        }
    }
    Ok(format!("{quantizations} quantizations, every selection inside its band"))
}

/// Criterion 3: sort then inverse is the identity; rows of the sorted key
/// map are non-increasing.
pub fn permutation_suite(tensors: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    for case in 0..tensors {
        let shape = [
            r.random_range(1..=2),
            r.random_range(1..=4),
            r.random_range(1..=9),
            r.random_range(1..=9),
        ];
        let x = if case % 3 == 0 {
            int_tensor(&shape, 0, 3, &mut r)
        } else {
            Tensor::randn(&shape, 1.0, &mut r)
        };
        let (sorted, perms) = spatial_sort(&x).map_err(|e| e.to_string())?;
        let back = apply_permutation(&sorted, &perms, Direction::Inverse).map_err(|e| e.to_string())?;
        if back != x {
            return Err(format!("case {case} {shape:?}: inverse does not restore the input"));
        }
        let w = shape[3];
        for (s, key) in sort_keys(&sorted).map_err(|e| e.to_string())?.iter().enumerate() {
            for (row, vals) in key.chunks(w).enumerate() {
                if vals.windows(2).any(|p| p[0] < p[1]) {
                    return Err(format!("case {case}: sample {s} row {row} increases: {vals:?}"));
                }
            }
        }
    }
    Ok(format!("{tensors} tensors: exact round trip, rows non-increasing"))
}

/// Criterion 4: SDRS normalization, α = 0 and homogeneity of D.
pub fn sdrs_analytics(cases: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut worst = [0.0f64; 3];
    for case in 0..cases {
        let (h, w) = (r.random_range(1..=8), r.random_range(1..=8));
        let s = Tensor::rand_uniform(&[2, BANDS, h, w], 0.0, 1.0, &mut r);
        let alpha = Tensor::randn(&[BANDS], 1.0, &mut r);
        let out = sdrs(&s, &alpha, false).map_err(|e| e.to_string())?;
        for row in out.weights.weights.data().chunks(BANDS) {
            let sum: f64 = row.iter().sum();
            worst[0] = worst[0].max((sum - 1.0).abs());
            if row.iter().any(|v| *v <= 0.0) {
                return Err(format!("case {case}: non-positive weight"));
            }
        }
        let zero = sdrs(&s, &Tensor::zeros(&[BANDS]), false).map_err(|e| e.to_string())?;
        for v in zero.weights.weights.data() {
            worst[1] = worst[1].max((v - 1.0 / BANDS as f64).abs());
        }
        for c in [0.5, 2.0, 10.0] {
            let scaled = sdrs(&s.map(|v| v * c), &alpha, false).map_err(|e| e.to_string())?;
            for (a, b) in scaled.d.data().iter().zip(out.d.data()) {
                worst[2] = worst[2].max((a - c * b).abs());
            }
        }
    }
    if worst[0] > 1e-12 || worst[1] > 1e-12 || worst[2] > 1e-9 {
        return Err(format!(
            "max |Σw − 1| {:.1e}, max |w − 1/31| at α=0 {:.1e}, max |D(cS) − cD(S)| {:.1e}",
            worst[0], worst[1], worst[2]
        ));
    }
    Ok(format!(
        "{cases} cases: |Σw − 1| ≤ {:.1e}, α=0 deviation ≤ {:.1e}, homogeneity ≤ {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

fn reduce(g: &mut Graph<f64>, vars: &[Var], seed: u64) -> specrr::Result<Var> {
    let mut total: Option<Var> = None;
    for (i, v) in vars.iter().enumerate() {
        let p = projection(g.shape(*v), seed + i as u64);
        let d = g.dot_const(*v, p)?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    Ok(total.expect("at least one output"))
}

fn randomize(store: &mut ParamStore<f64>, prefix: &str, std: f64, r: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().filter(|id| store.name(*id).starts_with(prefix)).collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::randn(&shape, std, r)).unwrap();
    }
}

fn block_config(channels: usize) -> SaformerConfig {
    SaformerConfig {
        channels,
        spectrum_channels: BANDS,
        heads: 2,
        dst: true,
        cg_msa: true,
        cc_ffn: true,
        stream: Stream::Dual,
        share_region_weights: false,
    }
}

/// A block whose zero-initialized parts (offset predictor, gate) are
/// replaced by random values so every path carries gradient.
fn random_block(store: &mut ParamStore<f64>, channels: usize, r: &mut ChaCha8Rng) -> SaformerBlock {
    let block = SaformerBlock::new(store, "blk", block_config(channels), r).unwrap();
    randomize(store, "blk.ffn.local.offset", 0.05, r);
    randomize(store, "blk.ffn.fuse", 0.3, r);
    randomize(store, "blk.norm", 0.5, r);
    block
}

/// Sorted spectrum and features that share the spectrum's permutations.
fn sorted_inputs(c: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, Arc<Vec<specrr::refine::SortPermutation>>) {
    let s = Tensor::rand_uniform(&[1, BANDS, h, w], 0.0, 1.0, r);
    let f = Tensor::randn(&[1, c, h, w], 1.0, r);
    let (s_sorted, perms) = spatial_sort(&s).unwrap();
    let f_sorted = apply_permutation(&f, &perms, Direction::Forward).unwrap();
    (f_sorted, s_sorted, Arc::new(perms))
}

pub fn grad_sdrs(seed: u64) -> specrr::Result<GradReport> {
    let mut r = rng(seed);
    let s = Tensor::rand_uniform(&[2, BANDS, 5, 6], 0.0, 0.2, &mut r);
    let alpha = Tensor::rand_uniform(&[BANDS], 0.5, 1.5, &mut r);
    let store = ParamStore::new();
    grad_check(&store, &[("S", s), ("alpha", alpha)], GradCheckConfig::default(), |g, _, v| {
        let (rescaled, weights, d) = sdrs_var(g, v[0], v[1], false)?;
        reduce(g, &[rescaled, weights, d], 11)
    })
}

pub fn grad_dst_tokenize(seed: u64) -> specrr::Result<GradReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let block = random_block(&mut store, 4, &mut r);
    let (f, s, perms) = sorted_inputs(4, 5, 5, &mut r);
    grad_check(&store, &[("F", f), ("S", s)], GradCheckConfig::default(), |g, st, v| {
        let f = Ordered::sorted(v[0], perms.clone());
        let s = Ordered::sorted(v[1], perms.clone());
        let tokens = dst_tokenize(g, st, &block, &f, Some(&s))?;
        let vars: Vec<Var> = tokens.iter().flat_map(|t| [t.q, t.k, t.v]).collect();
        reduce(g, &vars, 21)
    })
}

pub fn grad_cg_msa(seed: u64) -> specrr::Result<GradReport> {
    let mut r = rng(seed);
    let (h, w, m) = (4, 5, 4);
    let mask = DiagonalMask::new(h, w);
    let masks = [(Region::TopLeft, mask.tl_weights::<f64>()), (Region::BottomRight, mask.br_weights::<f64>())];
    let mut inputs = Vec::new();
    let names = ["q_tl", "k_tl", "v_tl", "q_br", "k_br", "v_br"];
    for name in names {
        inputs.push((name, Tensor::randn(&[1, m, h, w], 1.0, &mut r)));
    }
    inputs.push(("residual", Tensor::randn(&[1, m, h, w], 1.0, &mut r)));
    let store = ParamStore::new();
    grad_check(&store, &inputs, GradCheckConfig::default(), |g, _, v| {
        let tokens: Vec<TokenSet<f64>> = masks
            .iter()
            .enumerate()
            .map(|(i, (region, mk))| TokenSet {
                q: v[3 * i],
                k: v[3 * i + 1],
                v: v[3 * i + 2],
                region: *region,
                heads: 2,
                mask: Some(mk.clone()),
            })
            .collect();
        let (out, _) = cg_msa(g, &tokens, v[6])?;
        reduce(g, &[out], 31)
    })
}

pub fn grad_cc_ffn(seed: u64) -> specrr::Result<GradReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let ffn = CcFfn::new(&mut store, "ffn", 3, &mut r).unwrap();
    randomize(&mut store, "ffn.local.offset", 0.05, &mut r);
    randomize(&mut store, "ffn.fuse", 0.3, &mut r);
    let f_in = Tensor::randn(&[1, 3, 5, 4], 1.0, &mut r);
    let f_hat = Tensor::randn(&[1, 3, 5, 4], 1.0, &mut r);
    grad_check(&store, &[("F_in", f_in), ("F_hat", f_hat)], GradCheckConfig::default(), |g, st, v| {
        let out = cc_ffn(g, st, &ffn, &Ordered::original(v[0]), &Ordered::original(v[1]))?;
        reduce(g, &[out], 41)
    })
}

pub fn grad_deformable_conv(seed: u64) -> specrr::Result<GradReport> {
    let mut r = rng(seed);
    let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut r);
    // non-integer offsets keep every sample away from bilinear kinks
    let off = Tensor::rand_uniform(&[1, OFFSET_CHANNELS, 4, 4], -1.3, 1.3, &mut r);
    let wt = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
    let b = Tensor::randn(&[3], 0.5, &mut r);
    let store = ParamStore::new();
    grad_check(
        &store,
        &[("x", x), ("offsets", off), ("weight", wt), ("bias", b)],
        GradCheckConfig::default(),
        |g, _, v| {
            let y = g.deform_conv(v[0], v[1], v[2], Some(v[3]))?;
            reduce(g, &[y], 51)
        },
    )
}

pub fn grad_saformer_block(seed: u64) -> specrr::Result<GradReport> {
    grad_saformer_block_with(seed, GradCheckConfig::default())
}

pub fn grad_saformer_block_with(seed: u64, cfg: GradCheckConfig) -> specrr::Result<GradReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let block = random_block(&mut store, 4, &mut r);
    let (f, s, perms) = sorted_inputs(4, 5, 6, &mut r);
    grad_check(&store, &[("F", f), ("S", s)], cfg, |g, st, v| {
        let f = Ordered::sorted(v[0], perms.clone());
        let s = Ordered::sorted(v[1], perms.clone());
        let out = saformer_block(g, st, &block, &f, Some(&s))?;
        reduce(g, &[out.var], 61)
    })
}

/// Criterion 5: every gradient check, with its worst relative error.
pub fn gradient_suite(seed: u64) -> Outcome {
    type Check = fn(u64) -> specrr::Result<GradReport>;
    let checks: [(&str, Check); 6] = [
        ("sdrs", grad_sdrs),
        ("dst_tokenize", grad_dst_tokenize),
        ("cg_msa", grad_cg_msa),
        ("cc_ffn", grad_cc_ffn),
        ("deformable_conv3x3", grad_deformable_conv),
        ("saformer_block", grad_saformer_block),
    ];
    let mut parts = Vec::new();
    for (name, check) in checks {
        let rep = check(seed).map_err(|e| format!("{name}: {e}"))?;
        if !rep.passed() {
            return Err(format!("{name}: max relative error {:.2e}\n{rep}", rep.max_rel_error()));
        }
        parts.push(format!("{name} {:.1e}", rep.max_rel_error()));
    }
    Ok(parts.join(", "))
}

/// Criterion 6: attention row sums, the d = 1 case, and pixel-permutation
/// equivariance on integer inputs.
pub fn attention_contracts(cases: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let heads = r.random_range(1..=3);
        let m = heads * r.random_range(1..=4);
        let (h, w) = (r.random_range(1..=6), r.random_range(1..=6));
        let shape = [1, m, h, w];
        let (q, k, v) = (
            int_tensor(&shape, -3, 3, &mut r),
            int_tensor(&shape, -3, 3, &mut r),
            int_tensor(&shape, -3, 3, &mut r),
        );
        let out = channel_attention(&q, &k, &v, heads).map_err(|e| e.to_string())?;
        let d = m / heads;
        for row in out.attn.data().chunks(d) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }

        // one channel per head: every attention matrix is [1]
        let single = channel_attention(&q, &k, &v, m).map_err(|e| e.to_string())?;
        if single.out != v {
            return Err(format!("case {case}: m/heads = 1 does not return V exactly"));
        }

        let hw = h * w;
        let mut perm: Vec<usize> = (0..hw).collect();
        for i in (1..hw).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let permute = |t: &Tensor<f64>| {
            let mut o = t.clone();
            for c in 0..m {
                for (p, &src) in perm.iter().enumerate() {
                    o.data_mut()[c * hw + p] = t.data()[c * hw + src];
                }
            }
            o
        };
        let moved = channel_attention(&permute(&q), &permute(&k), &permute(&v), heads).map_err(|e| e.to_string())?;
        if moved.out != permute(&out.out) {
            return Err(format!("case {case}: output is not permuted with its input"));
        }
    }
    if worst > 1e-12 {
        return Err(format!("attention row sums deviate from 1 by {worst:.1e}"));
    }
    Ok(format!("{cases} cases: row sums within {worst:.1e}, d=1 returns V, equivariance exact"))
}

/// Criterion 7: zero offsets reduce the deformable conv to a plain conv,
/// bit for bit.
pub fn deformable_identity(cases: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    for case in 0..cases {
        let (cin, cout) = (r.random_range(1..=4), r.random_range(1..=4));
        let (h, w) = (r.random_range(1..=7), r.random_range(1..=7));
        let x = Tensor::<f64>::randn(&[r.random_range(1..=2), cin, h, w], 1.0, &mut r);
        let base = ConvSpec::new(
            cin,
            cout,
            3,
            false,
            Tensor::randn(&[cout, cin, 3, 3], 1.0, &mut r),
            Some(Tensor::randn(&[cout], 1.0, &mut r)),
        )
        .map_err(|e| e.to_string())?;
        let zero = ConvSpec::new(
            cin,
            OFFSET_CHANNELS,
            3,
            false,
            Tensor::zeros(&[OFFSET_CHANNELS, cin, 3, 3]),
            Some(Tensor::zeros(&[OFFSET_CHANNELS])),
        )
        .map_err(|e| e.to_string())?;
        let plain = conv2d(&x, &base).map_err(|e| e.to_string())?;
        let spec = DeformableConvSpec::new(base, zero).map_err(|e| e.to_string())?;
        let deformed = deformable_conv3x3(&x, &spec).map_err(|e| e.to_string())?;
        if deformed != plain {
            return Err(format!(
                "case {case}: max difference {:.3e}",
                deformed.max_abs_diff(&plain)
            ));
        }
    }
    Ok(format!("{cases} cases bit-identical"))
}

/// Criterion 12: byte-identical round trips and structured parse errors.
pub fn format_round_trips(seed: u64) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng(seed);
    let cube = Tensor::<f32>::rand_uniform(&[BANDS, 9, 7], 0.0, 2.0, &mut r);
    let a = dir.path().join("a.spc");
    let b = dir.path().join("b.spc");
    specrr::cube_io::write_cube(&a, &cube).map_err(|e| e.to_string())?;
    let back = specrr::cube_io::read_cube(&a).map_err(|e| e.to_string())?;
    specrr::cube_io::write_cube(&b, &back).map_err(|e| e.to_string())?;
    let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    if ba != bb || back != cube {
        return Err("SPC1 write→read→write differs".into());
    }

    let mut ck = Checkpoint::new("[config]\nseed = 3\n");
    ck.push("w", Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r)).unwrap();
    ck.push("b", Tensor::randn(&[4], 1.0, &mut r)).unwrap();
    ck.push("s", Tensor::scalar(0.5)).unwrap();
    let (ca, cb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ck.write(&ca).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::read(&ca).map_err(|e| e.to_string())?;
    loaded.write(&cb).map_err(|e| e.to_string())?;
    let (ka, kb) = (std::fs::read(&ca).unwrap(), std::fs::read(&cb).unwrap());
    if ka != kb || loaded != ck {
        return Err("checkpoint write→read→write differs".into());
    }

    let mut bad = ba.clone();
    bad[1] ^= 0xff;
    if !matches!(decode_cube(&bad), Err(Error::Parse { offset: 0, .. })) {
        return Err("SPC1 bad magic is not a parse error at offset 0".into());
    }
    let mut bad = ka.clone();
    bad[0] = b'X';
    if !matches!(Checkpoint::decode(&bad), Err(Error::Parse { offset: 0, .. })) {
        return Err("checkpoint bad magic is not a parse error at offset 0".into());
    }
    for cut in [3, 10, ba.len() - 1] {
        if !matches!(decode_cube(&ba[..cut]), Err(Error::Parse { .. })) {
            return Err(format!("SPC1 truncated to {cut} bytes is not a parse error"));
        }
    }
    // cuts inside the tensor section (the config trailer has no length)
    for cut in [6, 20, ka.len() - ck.config.len() - 1] {
        if !matches!(Checkpoint::decode(&ka[..cut]), Err(Error::Parse { .. })) {
            return Err(format!("checkpoint truncated to {cut} bytes is not a parse error"));
        }
    }
    let re = encode_cube(&decode_cube(&ba).unwrap()).unwrap();
    if re != ba {
        return Err("SPC1 in-memory round trip differs".into());
    }
    Ok("SPC1 and CKP1 byte-identical; bad magic → offset 0; truncations rejected".into())
}
