//! Oracle equivalence tests: every optimized kernel is checked against an
//! independent naive-loop implementation written directly from the defining
//! formula. Oracles run in f64 so agreement is limited only by op-internal
//! arithmetic order, far below the 1e-6 gate used here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protoseg::cre;
use protoseg::numerics::{bilinear_resize, conv2d, Tensor};
use protoseg::proto;
use protoseg::train;

const TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "oracle shape mismatch");
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ==== conv2d ====

/// Six nested loops straight from the definition: cross-correlation with zero
/// padding, kernels indexed [ky][kx][ci][co].
fn conv2d_oracle(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (h, w, ci) = x.dims3().unwrap();
    let (kh, kw, co) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(vec![oh, ow, co]);
    for oy in 0..oh {
        for ox in 0..ow {
            for c_out in 0..co {
                let mut acc = bias.map_or(0.0, |b| b.values()[c_out]);
                for ky in 0..kh {
                    for kx in 0..kw {
                        for c_in in 0..ci {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue; // zero padding
                            }
                            let xv = x.at3(iy as usize, ix as usize, c_in);
                            let kv = k.values()[((ky * kw + kx) * ci + c_in) * co + c_out];
                            acc += xv * kv;
                        }
                    }
                }
                let idx = out.index3(oy, ox, c_out);
                out.values_mut()[idx] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut r = rng(101);
    for case in 0..30 {
        let (h, w) = (r.gen_range(3..9), r.gen_range(3..9));
        let ci = r.gen_range(1..4);
        let co = r.gen_range(1..5);
        let k = r.gen_range(1..4).min(h).min(w);
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..2);
        let x = random_tensor(vec![h, w, ci], &mut r);
        let ker = random_tensor(vec![k, k, ci, co], &mut r);
        let bias = random_tensor(vec![co], &mut r);
        let got = conv2d(&x, &ker, Some(&bias), stride, pad).unwrap();
        let want = conv2d_oracle(&x, &ker, Some(&bias), stride, pad);
        let d = max_abs_diff(&got, &want);
        assert!(d <= TOL, "case {case}: conv2d deviates from oracle by {d}");
    }
}

// ==== bilinear_resize ====

/// Direct evaluation of the half-pixel-centers formula per output element.
fn bilinear_oracle(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (h, w, c) = x.dims3().unwrap();
    let mut out = Tensor::zeros(vec![oh, ow, c]);
    for oy in 0..oh {
        for ox in 0..ow {
            let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
            let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..c {
                let v = (1.0 - fy) * (1.0 - fx) * x.at3(y0, x0, ch)
                    + (1.0 - fy) * fx * x.at3(y0, x1, ch)
                    + fy * (1.0 - fx) * x.at3(y1, x0, ch)
                    + fy * fx * x.at3(y1, x1, ch);
                let idx = out.index3(oy, ox, ch);
                out.values_mut()[idx] = v;
            }
        }
    }
    out
}

#[test]
fn bilinear_resize_matches_direct_formula() {
    let mut r = rng(202);
    for case in 0..30 {
        let (h, w) = (r.gen_range(1..9), r.gen_range(1..9));
        let (oh, ow) = (r.gen_range(1..13), r.gen_range(1..13));
        let c = r.gen_range(1..4);
        let x = random_tensor(vec![h, w, c], &mut r);
        let got = bilinear_resize(&x, oh, ow).unwrap();
        let want = bilinear_oracle(&x, oh, ow);
        let d = max_abs_diff(&got, &want);
        assert!(d <= TOL, "case {case}: resize {h}x{w}->{oh}x{ow} deviates by {d}");
    }
}

// ==== correlate ====

/// Five nested loops over (x, y, i, j, z): displaced dot products with
/// out-of-bounds background reads contributing zero, channel (i+d)(2d+1)+(j+d).
fn correlate_oracle(ff: &Tensor<f64>, fb: &Tensor<f64>, d: usize) -> Tensor<f64> {
    let (h, w, z) = ff.dims3().unwrap();
    let side = 2 * d + 1;
    let mut out = Tensor::zeros(vec![h, w, side * side]);
    let di = d as isize;
    for y in 0..h {
        for x in 0..w {
            for i in -di..=di {
                for j in -di..=di {
                    let q = ((i + di) * side as isize + (j + di)) as usize;
                    let (sy, sx) = (y as isize - i, x as isize - j);
                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        continue; // zero outside
                    }
                    let mut acc = 0.0;
                    for ch in 0..z {
                        acc += ff.at3(y, x, ch) * fb.at3(sy as usize, sx as usize, ch);
                    }
                    let idx = out.index3(y, x, q);
                    out.values_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn correlate_matches_naive_loops_50_instances() {
    let mut r = rng(303);
    for case in 0..50 {
        let hw = r.gen_range(1..7); // H' = W' <= 6
        let z = r.gen_range(1..5); // Z <= 4
        let d = r.gen_range(0..3); // d <= 2
        let ff = random_tensor(vec![hw, hw, z], &mut r);
        let fb = random_tensor(vec![hw, hw, z], &mut r);
        let got = cre::correlate(&ff, &fb, d).unwrap();
        let want = correlate_oracle(&ff, &fb, d);
        let diff = max_abs_diff(&got, &want);
        assert!(diff <= TOL, "case {case} (hw={hw}, z={z}, d={d}): deviates by {diff}");
    }
}

// ==== compute_prototypes ====

#[test]
fn prototypes_match_scalar_masked_mean() {
    let mut r = rng(404);
    for case in 0..20 {
        let (h, w) = (r.gen_range(2..7), r.gen_range(2..7));
        let z = r.gen_range(1..6);
        let k = r.gen_range(1..4);
        let feats: Vec<Tensor<f64>> =
            (0..k).map(|_| random_tensor(vec![h, w, z], &mut r)).collect();
        // Soft masks in (0.05, 0.95): both regions non-empty by construction.
        let masks: Vec<Tensor<f64>> =
            (0..k).map(|_| Tensor::from_fn(vec![h, w, 1], |_| r.gen_range(0.05..0.95))).collect();

        let protos = proto::compute_prototypes(&feats, &masks, 1e-6).unwrap();

        // Scalar oracle: per support, masked mean over pixels, then average.
        let mut want_fg = vec![0.0; z];
        let mut want_bg = vec![0.0; z];
        for s in 0..k {
            let (mut mass_f, mut mass_b) = (0.0, 0.0);
            let mut acc_f = vec![0.0; z];
            let mut acc_b = vec![0.0; z];
            for y in 0..h {
                for x in 0..w {
                    let m = masks[s].at3(y, x, 0);
                    mass_f += m;
                    mass_b += 1.0 - m;
                    for ch in 0..z {
                        acc_f[ch] += feats[s].at3(y, x, ch) * m;
                        acc_b[ch] += feats[s].at3(y, x, ch) * (1.0 - m);
                    }
                }
            }
            for ch in 0..z {
                want_fg[ch] += acc_f[ch] / mass_f / k as f64;
                want_bg[ch] += acc_b[ch] / mass_b / k as f64;
            }
        }
        for ch in 0..z {
            let df = (protos.p_fg.values()[ch] - want_fg[ch]).abs();
            let db = (protos.p_bg.values()[ch] - want_bg[ch]).abs();
            assert!(df <= TOL && db <= TOL, "case {case} ch {ch}: fg {df} bg {db}");
        }
    }
}

// ==== dice / cross-entropy ====

/// One-hot [bg, fg] target from a random binary map.
fn random_one_hot(h: usize, w: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::zeros(vec![h, w, 2]);
    for px in 0..h * w {
        let fg = r.gen_bool(0.4);
        t.values_mut()[2 * px] = if fg { 0.0 } else { 1.0 };
        t.values_mut()[2 * px + 1] = if fg { 1.0 } else { 0.0 };
    }
    t
}

/// Random two-channel soft mask normalized per pixel.
fn random_soft_mask(h: usize, w: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::zeros(vec![h, w, 2]);
    for px in 0..h * w {
        let p: f64 = r.gen_range(0.02..0.98);
        t.values_mut()[2 * px] = 1.0 - p;
        t.values_mut()[2 * px + 1] = p;
    }
    t
}

#[test]
fn dice_loss_matches_scalar_loops() {
    let mut r = rng(505);
    for case in 0..20 {
        let (h, w) = (r.gen_range(2..8), r.gen_range(2..8));
        let m = random_soft_mask(h, w, &mut r);
        let y = random_one_hot(h, w, &mut r);
        let eps = 1e-5;
        let got = train::dice_loss(&m, &y, eps).unwrap();

        // Single joint fraction over all elements of both channels.
        let (mut inter, mut sm, mut sy) = (0.0, 0.0, 0.0);
        for i in 0..m.numel() {
            inter += m.values()[i] * y.values()[i];
            sm += m.values()[i];
            sy += y.values()[i];
        }
        let want = 1.0 - 2.0 * inter / (sm + sy + eps);
        assert!((got - want).abs() <= TOL, "case {case}: dice {got} vs {want}");
    }
}

#[test]
fn ce_loss_matches_scalar_loops() {
    let mut r = rng(606);
    for case in 0..20 {
        let (h, w) = (r.gen_range(2..8), r.gen_range(2..8));
        let m = random_soft_mask(h, w, &mut r);
        let y = random_one_hot(h, w, &mut r);
        let eps = 1e-7;
        let got = train::ce_loss(&m, &y, eps).unwrap();

        let mut acc = 0.0;
        for i in 0..m.numel() {
            let p = m.values()[i].clamp(eps, 1.0 - eps);
            acc += y.values()[i] * p.ln();
        }
        let want = -acc / m.numel() as f64;
        assert!((got - want).abs() <= TOL, "case {case}: ce {got} vs {want}");
    }
}

#[test]
fn dice_and_ce_on_uniform_half_mask() {
    // Uniform 0.5 soft mask against any one-hot target: ce = ln(2)/2 exactly,
    // dice = 1 - HW/(2HW + eps) ≈ 0.5.
    let (h, w) = (6, 5);
    let m = Tensor::full(vec![h, w, 2], 0.5f64);
    let mut r = rng(707);
    let y = random_one_hot(h, w, &mut r);
    let ce = train::ce_loss(&m, &y, 1e-7).unwrap();
    assert!((ce - 0.5 * (2.0f64).ln()).abs() < 1e-12, "ce {ce}");
    let eps = 1e-5;
    let dice = train::dice_loss(&m, &y, eps).unwrap();
    let n = (h * w) as f64;
    let want = 1.0 - 2.0 * (0.5 * n) / (n + n + eps);
    assert!((dice - want).abs() < 1e-12, "dice {dice} vs {want}");
}

#[test]
fn dice_is_near_zero_for_perfect_prediction() {
    let mut r = rng(808);
    let y = random_one_hot(7, 4, &mut r);
    let dice = train::dice_loss(&y, &y, 1e-5).unwrap();
    assert!(dice.abs() < 1e-6, "perfect-match dice {dice}");
    assert!(dice > 0.0, "eps keeps the loss strictly positive");
}
