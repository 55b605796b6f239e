use merba::mixer::{Mixer, MixerConfig};
use merba::params::{grad_check_params, Ctx, ParamBuilder, ParamStore};
use merba::scan::{apply_scan, build_permutation, invert_scan, ScanDirection};
use merba::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

struct ScanCase {
    b: usize,
    t: usize,
    e: usize,
    n: usize,
    u: Tensor<f64>,
    dt: Tensor<f64>,
    a: Tensor<f64>,
    bm: Tensor<f64>,
    c: Tensor<f64>,
    d: Tensor<f64>,
}

fn scan_case(seed: u64, b: usize, t: usize, e: usize, n: usize) -> ScanCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScanCase {
        b,
        t,
        e,
        n,
        u: uniform(&mut rng, &[b, t, e], -1.0, 1.0),
        dt: uniform(&mut rng, &[b, t, e], 0.01, 1.0),
        a: uniform(&mut rng, &[e, n], -3.0, -0.1),
        bm: uniform(&mut rng, &[b, t, n], -1.0, 1.0),
        c: uniform(&mut rng, &[b, t, n], -1.0, 1.0),
        d: uniform(&mut rng, &[e], -1.0, 1.0),
    }
}

fn run_scan(s: &ScanCase, zoh: bool) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let ins = [&s.u, &s.dt, &s.a, &s.bm, &s.c, &s.d].map(|x| g.input(x));
    let y = g.selective_scan(ins, zoh).unwrap();
    g.value(y).unwrap()
}

/// Unrolled closed form: `h_t = sum_{s<=t} (prod_{r=s+1..t} abar_r) * gain_s * B_s * u_s`.
fn scan_oracle(s: &ScanCase, zoh: bool) -> Vec<f64> {
    let (t_len, e_len, n_len) = (s.t, s.e, s.n);
    let at = |x: &Tensor<f64>, bi: usize, t: usize, k: usize, w: usize| x.data()[(bi * t_len + t) * w + k];
    let mut y = Vec::with_capacity(s.b * t_len * e_len);
    for bi in 0..s.b {
        for t in 0..t_len {
            for e in 0..e_len {
                let mut acc = s.d.data()[e] * at(&s.u, bi, t, e, e_len);
                for n in 0..n_len {
                    let a = s.a.data()[e * n_len + n];
                    let mut h = 0.0;
                    for src in 0..=t {
                        let dt_s = at(&s.dt, bi, src, e, e_len);
                        let gain = if zoh { ((dt_s * a).exp() - 1.0) / a } else { dt_s };
                        let mut decay = 1.0;
                        for r in src + 1..=t {
                            decay *= (at(&s.dt, bi, r, e, e_len) * a).exp();
                        }
                        h += decay * gain * at(&s.bm, bi, src, n, n_len) * at(&s.u, bi, src, e, e_len);
                    }
                    acc += at(&s.c, bi, t, n, n_len) * h;
                }
                y.push(acc);
            }
        }
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn scan_matches_unrolled_oracle(
        seed in any::<u64>(), b in 1usize..3, t in 1usize..=8, e in 1usize..=4, n in 1usize..=4, zoh in any::<bool>()
    ) {
        let s = scan_case(seed, b, t, e, n);
        let got = run_scan(&s, zoh);
        for (x, want) in got.data().iter().zip(scan_oracle(&s, zoh)) {
            prop_assert!((x - want).abs() <= 1e-12, "{x} vs {want}");
        }
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let mut s = scan_case(3, 2, 6, 3, 4);
    s.u = Tensor::zeros(&[2, 6, 3]);
    assert!(run_scan(&s, false).data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_step_closed_form() {
    let mut s = scan_case(5, 1, 1, 2, 3);
    // A -> -inf: abar underflows to 0
    s.a = Tensor::full(&[2, 3], -1e6);
    let y = run_scan(&s, false);
    for e in 0..2 {
        let (u, dt) = (s.u.data()[e], s.dt.data()[e]);
        let want = (0..3).map(|n| s.c.data()[n] * dt * s.bm.data()[n] * u).sum::<f64>() + s.d.data()[e] * u;
        assert!((y.data()[e] - want).abs() <= 1e-12);
    }
}

#[test]
fn scan_is_causal() {
    let s = scan_case(11, 1, 8, 3, 2);
    let base = run_scan(&s, false);
    for t in 0..8 {
        let mut p = scan_case(11, 1, 8, 3, 2);
        for e in 0..3 {
            p.u.data_mut()[t * 3 + e] += 0.5;
        }
        let y = run_scan(&p, false);
        assert_eq!(&y.data()[..t * 3], &base.data()[..t * 3]);
        assert_ne!(&y.data()[t * 3..t * 3 + 3], &base.data()[t * 3..t * 3 + 3]);
    }
}

#[test]
fn long_constant_sequence_stays_bounded() {
    let (t, e, n) = (10_000, 2, 2);
    let mut s = scan_case(13, 1, t, e, n);
    s.u = Tensor::ones(&[1, t, e]);
    let y = run_scan(&s, false);
    assert!(y.all_finite());
    for ei in 0..e {
        for ni in 0..n {
            let a = s.a.data()[ei * n + ni];
            let mut max_in: f64 = 0.0;
            let mut max_abar: f64 = 0.0;
            for ti in 0..t {
                let dt = s.dt.data()[ti * e + ei];
                max_in = max_in.max((dt * s.bm.data()[ti * n + ni]).abs());
                max_abar = max_abar.max((dt * a).exp());
            }
            let h_bound = max_in / (1.0 - max_abar);
            // every output is bounded through |C| * h_bound per state plus the skip term
            let c_max = s.c.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let y_bound = n as f64 * c_max * h_bound + s.d.data()[ei].abs();
            for ti in 0..t {
                assert!(y.data()[ti * e + ei].abs() <= y_bound * (1.0 + 1e-9));
            }
        }
    }
}

fn mixer(dim: usize, state: usize, zoh: bool, seed: u64) -> (Mixer, ParamStore<f64>) {
    let cfg = MixerConfig {
        dim,
        state_dim: state,
        conv_kernel: 3,
        exact_zoh: zoh,
    };
    let mut pb = ParamBuilder::new();
    let m = Mixer::new(&mut pb, "mixer", cfg).unwrap();
    let store = ParamStore::init(pb.finish().unwrap(), &mut ChaCha8Rng::seed_from_u64(seed));
    (m, store)
}

fn mix(m: &Mixer, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut cx = Ctx::new(store, false, 0);
    let xv = cx.g.input(x);
    let y = m.forward(&mut cx, xv).unwrap();
    cx.g.value(y).unwrap()
}

fn zero_params(store: &mut ParamStore<f64>, pred: impl Fn(&str) -> bool) {
    for id in store.ids().collect::<Vec<_>>() {
        if pred(&store.spec(id).name) {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
    }
}

#[test]
fn mixer_gradient_check() {
    for zoh in [false, true] {
        let (m, store) = mixer(8, 4, zoh, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = uniform(&mut rng, &[2, 9, 8], -1.0, 1.0);
        let r = uniform(&mut rng, &[2, 9, 8], -1.0, 1.0);
        let report = grad_check_params(
            &store,
            false,
            |cx| {
                let xv = cx.g.input(&x);
                let y = m.forward(cx, xv)?;
                let rv = cx.g.input(&r);
                let p = cx.g.mul(y, rv)?;
                cx.g.sum(p)
            },
            1e-6,
            1e-4,
            None,
        )
        .unwrap();
        assert!(report.passed, "zoh={zoh}: {:?}", report.params);
    }
}

#[test]
fn zero_weights_give_zero_output() {
    let (m, mut store) = mixer(8, 4, false, 1);
    zero_params(&mut store, |_| true);
    let x = uniform(&mut ChaCha8Rng::seed_from_u64(2), &[1, 9, 8], -1.0, 1.0);
    assert!(mix(&m, &store, &x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn zeroed_gate_branch_clears_upper_channels() {
    let (m, mut store) = mixer(8, 4, false, 3);
    zero_params(&mut store, |n| n.starts_with("mixer.conv_z"));
    let x = uniform(&mut ChaCha8Rng::seed_from_u64(4), &[1, 9, 8], -1.0, 1.0);
    let y = mix(&m, &store, &x);
    let rows: Vec<&[f64]> = y.data().chunks(8).collect();
    assert!(rows.iter().all(|r| r[4..].iter().all(|&v| v == 0.0)));
    assert!(rows.iter().any(|r| r[..4].iter().any(|&v| v != 0.0)));
}

#[test]
fn wrong_token_width_is_rejected() {
    let (m, store) = mixer(8, 4, false, 0);
    let mut cx = Ctx::new(&store, false, 0);
    let x = cx.g.input(&Tensor::zeros(&[1, 9, 6]));
    assert!(m.forward(&mut cx, x).is_err());
}

/// The depthwise convolution has a centred kernel of 3, so at mixer level a
/// token influences the scan branch from one position before it onwards.
#[test]
fn mixer_scan_branch_is_causal_beyond_the_conv_reach() {
    let (m, store) = mixer(8, 4, false, 7);
    let x = uniform(&mut ChaCha8Rng::seed_from_u64(8), &[1, 9, 8], -1.0, 1.0);
    let base = mix(&m, &store, &x);
    for t in 0..9 {
        let mut xp = x.clone();
        for c in 0..8 {
            xp.data_mut()[t * 8 + c] += 0.3;
        }
        let y = mix(&m, &store, &xp);
        for pos in 0..9 {
            let (a, b) = (&y.data()[pos * 8..pos * 8 + 8], &base.data()[pos * 8..pos * 8 + 8]);
            if pos + 1 < t {
                assert_eq!(&a[..4], &b[..4], "scan branch at {pos} moved for token {t}");
            }
            if pos + 1 < t || pos > t + 1 {
                assert_eq!(&a[4..], &b[4..], "gate branch at {pos} moved for token {t}");
            }
        }
    }
}

#[test]
fn scan_direction_changes_the_result() {
    let (m, store) = mixer(8, 4, false, 9);
    let window = uniform(&mut ChaCha8Rng::seed_from_u64(10), &[3, 3, 8], -1.0, 1.0);
    let reconstructed: Vec<Tensor<f64>> = ScanDirection::PRODUCTION
        .iter()
        .map(|d| {
            let p = build_permutation(d, 3, 3).unwrap();
            let seq = apply_scan(&window, &p).unwrap().reshape(&[1, 9, 8]).unwrap();
            let out = mix(&m, &store, &seq).reshape(&[9, 8]).unwrap();
            invert_scan(&out, &p).unwrap()
        })
        .collect();
    for i in 0..4 {
        for j in i + 1..4 {
            assert!(reconstructed[i].max_abs_diff(&reconstructed[j]) > 1e-6);
        }
    }
}
