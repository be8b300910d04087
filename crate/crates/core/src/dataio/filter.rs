//! Butterworth band-pass design in second-order sections, zero-phase
//! filtering, and rational-rate resampling.

use num_traits::Zero;
use std::f64::consts::PI;

type C64 = (f64, f64);

fn cmul(a: C64, b: C64) -> C64 {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

fn cdiv(a: C64, b: C64) -> C64 {
    let d = b.0 * b.0 + b.1 * b.1;
    ((a.0 * b.0 + a.1 * b.1) / d, (a.1 * b.0 - a.0 * b.1) / d)
}

fn csqrt(a: C64) -> C64 {
    let r = (a.0 * a.0 + a.1 * a.1).sqrt();
    let re = ((r + a.0) / 2.0).max(0.0).sqrt();
    let im = ((r - a.0) / 2.0).max(0.0).sqrt();
    (re, if a.1 < 0.0 { -im } else { im })
}

/// One biquad `[b0, b1, b2, a0, a1, a2]` with `a0 = 1`.
pub type Section = [f64; 6];

/// Digital Butterworth band-pass of the given analog prototype order.
///
/// The prototype is pre-warped, transformed to a band-pass, mapped through
/// the bilinear transform, and grouped into `order` sections, each pairing
/// two poles with one zero at +1 and one at -1. The overall gain
/// sits on the first section.
pub fn butter_bandpass(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Vec<Section> {
    assert!(order > 0 && 0.0 < low_hz && low_hz < high_hz && high_hz < fs / 2.0);
    // Pre-warp with an internal sampling rate of 2.
    let warp = |f: f64| 4.0 * (PI * (2.0 * f / fs) / 2.0).tan();
    let (w1, w2) = (warp(low_hz), warp(high_hz));
    let bw = w2 - w1;
    let wo2 = w1 * w2;

    let n = order as i64;
    let proto: Vec<C64> = (0..order)
        .map(|i| {
            let m = (-n + 1 + 2 * i as i64) as f64;
            let theta = PI * m / (2.0 * n as f64);
            (-theta.cos(), -theta.sin())
        })
        .collect();
    let mut poles = Vec::with_capacity(2 * order);
    for p in proto {
        let pl = (p.0 * bw / 2.0, p.1 * bw / 2.0);
        let disc = csqrt((cmul(pl, pl).0 - wo2, cmul(pl, pl).1));
        poles.push((pl.0 + disc.0, pl.1 + disc.1));
        poles.push((pl.0 - disc.0, pl.1 - disc.1));
    }
    let mut gain = bw.powi(order as i32);
    let fs2: f64 = 4.0;
    // Zeros at s = 0 contribute fs2^order to the numerator product.
    let mut num: C64 = (fs2.powi(order as i32), 0.0);
    let mut den: C64 = (1.0, 0.0);
    let mut zpoles = Vec::with_capacity(poles.len());
    for &p in &poles {
        den = cmul(den, (fs2 - p.0, -p.1));
        zpoles.push(cdiv((fs2 + p.0, p.1), (fs2 - p.0, -p.1)));
    }
    num = cdiv(num, den);
    gain *= num.0;

    // Each section takes a conjugate pair or two real poles as `[1, a1, a2]`.
    let mut denominators: Vec<[f64; 2]> = Vec::with_capacity(order);
    let mut reals: Vec<f64> = Vec::new();
    for p in &zpoles {
        if p.1.abs() <= 1e-14 * (1.0 + p.0.abs()) {
            reals.push(p.0);
        } else if p.1 > 0.0 {
            denominators.push([-2.0 * p.0, p.0 * p.0 + p.1 * p.1]);
        }
    }
    reals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for pair in reals.chunks(2) {
        assert_eq!(pair.len(), 2, "band-pass has an even number of real poles");
        denominators.push([-(pair[0] + pair[1]), pair[0] * pair[1]]);
    }
    assert_eq!(denominators.len(), order);
    denominators.sort_by(|a, b| a[1].partial_cmp(&b[1]).unwrap());
    denominators
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let g = if i == 0 { gain } else { 1.0 };
            [g, 0.0, -g, 1.0, a[0], a[1]]
        })
        .collect()
}

/// Magnitude response of the cascade at `freq_hz`.
pub fn magnitude_response(sos: &[Section], freq_hz: f64, fs: f64) -> f64 {
    let w = 2.0 * PI * freq_hz / fs;
    let z1: C64 = (w.cos(), -w.sin());
    let z2 = cmul(z1, z1);
    let mut h: C64 = (1.0, 0.0);
    for s in sos {
        let num = (s[0] + s[1] * z1.0 + s[2] * z2.0, s[1] * z1.1 + s[2] * z2.1);
        let den = (s[3] + s[4] * z1.0 + s[5] * z2.0, s[4] * z1.1 + s[5] * z2.1);
        h = cmul(h, cdiv(num, den));
    }
    (h.0 * h.0 + h.1 * h.1).sqrt()
}

/// Direct-form II transposed cascade; `state` holds two values per section.
fn sos_filter(sos: &[Section], x: &mut [f64], state: &mut [[f64; 2]]) {
    for v in x.iter_mut() {
        let mut s = *v;
        for (sec, z) in sos.iter().zip(state.iter_mut()) {
            let y = sec[0] * s + z[0];
            z[0] = sec[1] * s - sec[4] * y + z[1];
            z[1] = sec[2] * s - sec[5] * y;
            s = y;
        }
        *v = s;
    }
}

/// Steady-state initial conditions for a unit step, per section.
fn sos_steady_state(sos: &[Section]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sos.iter()
        .map(|s| {
            let (b0, b1, b2, a1, a2) = (s[0], s[1], s[2], s[4], s[5]);
            // (I - companion(a)^T) zi = b[1:] - a[1:] b0
            let r0 = b1 - a1 * b0;
            let r1 = b2 - a2 * b0;
            let det = (1.0 + a1) + a2;
            let z0 = (r0 + r1) / det;
            let z1 = r1 - a2 * z0;
            let zi = [z0 * scale, z1 * scale];
            scale *= (b0 + b1 + b2) / (1.0 + a1 + a2);
            zi
        })
        .collect()
}

/// Padding length used by [`filtfilt`]: three times the filter order plus one.
pub fn filtfilt_padlen(sos: &[Section]) -> usize {
    let zero_b2 = sos.iter().filter(|s| s[2].is_zero()).count();
    let zero_a2 = sos.iter().filter(|s| s[5].is_zero()).count();
    3 * (2 * sos.len() + 1 - zero_b2.min(zero_a2))
}

/// Zero-phase forward-backward filtering with odd extension at both ends and
/// steady-state initial conditions.
pub fn filtfilt(sos: &[Section], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = filtfilt_padlen(sos).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    let zi = sos_steady_state(sos);
    let scaled = |v: f64| zi.iter().map(|z| [z[0] * v, z[1] * v]).collect::<Vec<_>>();
    let mut state = scaled(ext[0]);
    sos_filter(sos, &mut ext, &mut state);
    ext.reverse();
    let mut state = scaled(ext[0]);
    sos_filter(sos, &mut ext, &mut state);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..500 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed low-pass FIR with `taps` taps and cutoff `cutoff`
/// (fraction of Nyquist), normalized to unit DC gain.
pub fn kaiser_lowpass(taps: usize, cutoff: f64, beta: f64) -> Vec<f64> {
    let alpha = (taps as f64 - 1.0) / 2.0;
    let denom = bessel_i0(beta);
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let m = i as f64 - alpha;
            let x = cutoff * m;
            let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
            let r = if alpha > 0.0 { m / alpha } else { 0.0 };
            let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom;
            cutoff * sinc * w
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= s);
    h
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Polyphase resampling by `up / down` with a Kaiser (β = 5) anti-aliasing
/// filter of half-length `10 · max(up, down)`, delay-compensated so that
/// output sample `j` aligns with input time `j · down / up`.
pub fn resample_poly(x: &[f64], up: usize, down: usize) -> Vec<f64> {
    let g = gcd(up, down);
    let (up, down) = (up / g, down / g);
    if up == 1 && down == 1 {
        return x.to_vec();
    }
    let n_in = x.len();
    let n_out = n_in * up / down + usize::from(!(n_in * up).is_multiple_of(down));
    let max_rate = up.max(down);
    let half_len = 10 * max_rate;
    let mut h = kaiser_lowpass(2 * half_len + 1, 1.0 / max_rate as f64, 5.0);
    h.iter_mut().for_each(|v| *v *= up as f64);
    let pre_pad = down - half_len % down;
    let pre_remove = (half_len + pre_pad) / down;
    let mut hp = vec![0.0; pre_pad];
    hp.extend_from_slice(&h);
    let len_h = hp.len();
    (0..n_out)
        .map(|j| {
            let i = (pre_remove + j) * down;
            // conv[i] = Σ_k hp[k] · xu[i - k], xu nonzero only at multiples of `up`.
            let mut acc = 0.0;
            let k0 = i % up;
            let mut k = k0;
            while k < len_h && k <= i {
                let m = (i - k) / up;
                if m < n_in {
                    acc += hp[k] * x[m];
                }
                k += up;
            }
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kaiser_window_is_symmetric_with_unit_gain() {
        let h = kaiser_lowpass(41, 0.25, 5.0);
        for i in 0..20 {
            assert!((h[i] - h[40 - i]).abs() < 1e-15);
        }
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_resample_copies() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(resample_poly(&x, 4, 4), x.to_vec());
    }

    #[test]
    fn constant_input_is_removed() {
        let sos = butter_bandpass(3, 0.5, 15.0, 1000.0);
        let y = filtfilt(&sos, &vec![5.0; 4000]);
        assert!(y.iter().all(|v| v.abs() < 1e-9), "{}", y[2000]);
    }

    fn probe() -> Vec<f64> {
        (0..300)
            .map(|i| {
                let t = i as f64;
                (t * 0.05).sin() + 0.3 * (t * 0.71).cos() + 0.01 * t
            })
            .collect()
    }

    #[test]
    fn magnitude_matches_reference_design() {
        let sos = butter_bandpass(3, 0.5, 15.0, 1000.0);
        let want = [
            (0.5, 0.707_106_781_186_444_8),
            (5.0, 0.999_901_671_438_065_9),
            (10.0, 0.967_995_676_657_395_4),
            (15.0, 0.707_106_781_186_538_9),
            (30.0, 0.114_252_474_783_263_17),
        ];
        for (f, m) in want {
            assert!((magnitude_response(&sos, f, 1000.0) - m).abs() < 1e-9, "{f} Hz");
        }
        let sos = butter_bandpass(3, 0.5, 15.0, 128.0);
        assert!((magnitude_response(&sos, 5.0, 128.0) - 0.999_930_729_117_532_6).abs() < 1e-9);
        assert!((magnitude_response(&sos, 30.0, 128.0) - 0.071_009_453_088_535_69).abs() < 1e-9);
    }

    #[test]
    fn filtfilt_matches_reference() {
        let sos = butter_bandpass(3, 0.5, 15.0, 1000.0);
        let y = filtfilt(&sos, &probe());
        let want = [
            (0, -0.159_162_465_017_102_85),
            (1, -0.130_440_307_626_081_78),
            (50, 0.273_240_590_658_393_96),
            (150, 0.652_794_490_314_621_2),
            (299, 0.055_932_103_704_068_96),
        ];
        for (i, v) in want {
            assert!((y[i] - v).abs() < 1e-8, "sample {i}: {} vs {v}", y[i]);
        }
    }

    #[test]
    fn resample_matches_reference() {
        let x = probe();
        let y = resample_poly(&x, 128, 1000);
        assert_eq!(y.len(), 39);
        for (i, v) in [
            (0, 0.066_506_805_105_225_66),
            (1, 0.441_999_775_613_035_33),
            (10, 0.088_178_912_029_268_86),
            (20, 2.562_762_337_730_963),
            (38, 3.005_855_035_118_438),
        ] {
            assert!((y[i] - v).abs() < 1e-9, "sample {i}: {} vs {v}", y[i]);
        }
        let y = resample_poly(&x, 128, 250);
        assert_eq!(y.len(), 154);
        for (i, v) in [
            (0, 0.235_837_923_901_164_9),
            (1, 0.193_597_614_353_706_98),
            (10, 1.104_320_550_890_054_4),
            (50, 0.283_722_611_523_263_17),
            (153, 3.075_456_856_847_602_6),
        ] {
            assert!((y[i] - v).abs() < 1e-9, "sample {i}: {} vs {v}", y[i]);
        }
    }
}
