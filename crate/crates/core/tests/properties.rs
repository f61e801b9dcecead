use proptest::prelude::*;

use qmlp::autograd::Tape;
use qmlp::models::{Family, Mode, Model, ModelConfig, Plain};
use qmlp::quant::{compute_qparams, dequantize, per_channel_qparams, quantize, PactParams, RangeObserver, Scheme};
use qmlp::Tensor;

fn scheme() -> impl Strategy<Value = Scheme> {
    prop_oneof![Just(Scheme::Symmetric), Just(Scheme::Asymmetric)]
}

fn range() -> impl Strategy<Value = (f64, f64)> {
    (-50.0f64..50.0, 0.0f64..60.0).prop_map(|(lo, w)| (lo.min(0.0), lo.max(0.0) + w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn round_trip_within_half_step(bits in 2u8..=8, s in scheme(), (lo, hi) in range(), xs in prop::collection::vec(-200.0f64..200.0, 1..64)) {
        let qp = compute_qparams(lo, hi, bits, s).unwrap();
        let (a, b) = qp.real_bounds(0);
        let x = Tensor::vector(xs.clone());
        let r = dequantize(&quantize(&x, &qp).unwrap(), &qp).unwrap();
        for (v, back) in xs.iter().zip(r.data()) {
            let err = (back - v.clamp(a, b)).abs();
            prop_assert!(err <= qp.scale() / 2.0 * (1.0 + 1e-9), "x={v} back={back} S={}", qp.scale());
        }
    }

    #[test]
    fn quantize_is_monotone(bits in 2u8..=8, s in scheme(), (lo, hi) in range(), mut xs in prop::collection::vec(-100.0f64..100.0, 2..64)) {
        xs.sort_by(f64::total_cmp);
        let qp = compute_qparams(lo, hi, bits, s).unwrap();
        let q = quantize(&Tensor::vector(xs), &qp).unwrap();
        prop_assert!(q.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn zero_point_and_range_endpoints(bits in 2u8..=8, s in scheme(), (lo, hi) in range()) {
        let qp = compute_qparams(lo, hi, bits, s).unwrap();
        prop_assert!(qp.scale() > 0.0);
        if s == Scheme::Symmetric {
            prop_assert_eq!(qp.zero_point(), 0);
        }
        let q = quantize(&Tensor::vector(vec![lo, hi]), &qp).unwrap();
        for &v in q.data() {
            prop_assert!((qp.qmin()..=qp.qmax()).contains(&(v as i64)));
        }
        prop_assert_eq!(qp.qmin(), -(1i64 << (bits - 1)));
        prop_assert_eq!(qp.qmax(), (1i64 << (bits - 1)) - 1);
    }

    #[test]
    fn minmax_never_shrinks(batches in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 1..16), 1..8)) {
        let mut obs = RangeObserver::minmax();
        let mut prev: Option<(f64, f64)> = None;
        for b in &batches {
            obs.observe(b).unwrap();
            let (lo, hi) = obs.range().unwrap();
            prop_assert!(lo <= hi);
            if let Some((plo, phi)) = prev {
                prop_assert!(lo <= plo && hi >= phi);
            }
            prev = Some((lo, hi));
        }
    }

    #[test]
    fn pact_output_is_clipped(alpha in 0.01f64..20.0, x in -100.0f64..100.0) {
        let y = PactParams::new(alpha).unwrap().apply(x);
        prop_assert!((0.0..=alpha).contains(&y));
    }

    #[test]
    fn single_channel_equals_per_tensor(bits in 2u8..=8, xs in prop::collection::vec(-5.0f64..5.0, 1..32)) {
        let n = xs.len();
        let w = Tensor::new(vec![1, n], xs.clone()).unwrap();
        let pc = per_channel_qparams(&w, bits, 0).unwrap();
        let m = xs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let pt = compute_qparams(-m, m, bits, Scheme::Symmetric).unwrap();
        prop_assert_eq!(pc.scales()[0], pt.scale());
        let (qa, qb) = (quantize(&w, &pc).unwrap(), quantize(&Tensor::vector(xs), &pt).unwrap());
        prop_assert_eq!(qa.data(), qb.data());
    }

    #[test]
    fn percentile_within_one_bin_of_exact(xs in prop::collection::vec(-30.0f64..30.0, 50..400), p in 0.9f64..0.999) {
        let mut obs = RangeObserver::percentile(p).unwrap();
        obs.observe(&xs).unwrap();
        let (_, hi) = obs.finalize().unwrap();
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        let exact = sorted[rank - 1];
        let bin = obs.histogram().unwrap().bin_width();
        prop_assert!((hi - exact).abs() <= bin * (1.0 + 1e-9), "hi={hi} exact={exact} bin={bin}");
    }

    #[test]
    fn matmul_is_associative(a in prop::collection::vec(-1.0f64..1.0, 6), b in prop::collection::vec(-1.0f64..1.0, 12), c in prop::collection::vec(-1.0f64..1.0, 8)) {
        let a = Tensor::new(vec![2, 3], a).unwrap();
        let b = Tensor::new(vec![3, 4], b).unwrap();
        let c = Tensor::new(vec![4, 2], c).unwrap();
        let l = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let r = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in l.data().iter().zip(r.data()) {
            prop_assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn pointwise_conv_is_per_pixel_matmul(xs in prop::collection::vec(-2.0f64..2.0, 48), ws in prop::collection::vec(-2.0f64..2.0, 6)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 3, 4, 4], xs.clone()).unwrap());
        let k = t.constant(Tensor::new(vec![2, 3, 1, 1], ws.clone()).unwrap());
        let y = t.pointwise_conv(x, k, None).unwrap();
        // [16 pixels, 3 channels] · [3, 2]
        let pix = Tensor::new(vec![3, 16], xs).unwrap().transpose2().unwrap();
        let wt = Tensor::new(vec![2, 3], ws).unwrap().transpose2().unwrap();
        let want = pix.matmul(&wt).unwrap().transpose2().unwrap();
        for (a, b) in t.value(y).data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 8), 1..6)) {
        let n = rows.len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![n, 8], flat).unwrap());
        let g = t.constant(Tensor::ones(&[8]));
        let b = t.constant(Tensor::zeros(&[8]));
        let y = t.layer_norm(x, g, b, 1, 1e-5).unwrap();
        for (row, out) in rows.iter().zip(t.value(y).data().chunks(8)) {
            let spread = row.iter().fold(0.0f64, |m, v| m.max((v - row[0]).abs()));
            prop_assume!(spread > 0.5);
            let mean = out.iter().sum::<f64>() / 8.0;
            let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() <= 1e-5);
            prop_assert!((var - 1.0).abs() <= 1e-4, "var {var}");
        }
    }

    #[test]
    fn backward_is_additive(xs in prop::collection::vec(-3.0f64..3.0, 4)) {
        let grad = |which: u8| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::vector(xs.clone()));
            // each loss reaches x through one path, so sums are exact
            let c = t.constant(Tensor::vector(vec![0.5, -1.5, 2.0, 0.25]));
            let sq = t.mul(x, c).unwrap();
            let f = t.sum(sq);
            let gl = t.gelu(x);
            let g = t.sum(gl);
            let loss = match which {
                0 => f,
                1 => g,
                _ => t.add(f, g).unwrap(),
            };
            t.backward(loss).unwrap().get(x)
        };
        let (a, b, ab) = (grad(0), grad(1), grad(2));
        for i in 0..4 {
            prop_assert_eq!(a.data()[i] + b.data()[i], ab.data()[i]);
        }
    }

    #[test]
    fn group_count_adds_whole_token_pairs(groups in prop_oneof![Just(1usize), Just(2), Just(4), Just(8)], depth in 1usize..=3) {
        let cfg = ModelConfig { depth, channels: 8, groups: 1, ..Default::default() };
        let one = Model::new(&cfg, 0).unwrap().param_counts();
        let many = Model::new(&ModelConfig { groups, ..cfg.clone() }, 0).unwrap().param_counts();
        let t = cfg.tokens();
        let pair = t * cfg.token_hidden + cfg.token_hidden + cfg.token_hidden * t + t;
        prop_assert_eq!(many.total() - one.total(), (groups - 1) * pair * depth);
        prop_assert_eq!(many.channel_mixing, one.channel_mixing);
    }
}

#[test]
fn ema_converges_to_constant_stream() {
    let mut obs = RangeObserver::ema_from(0.9, 0.0, 0.0).unwrap();
    let mut gap = 10.0;
    for _ in 0..50 {
        obs.observe(&[-4.0, 10.0]).unwrap();
        let (_, hi) = obs.range().unwrap();
        let next = 10.0 - hi;
        assert!((next - 0.9 * gap).abs() < 1e-9);
        gap = next;
    }
}

#[test]
fn zero_mixing_weights_are_identity_for_every_family() {
    for family in [Family::Mixer, Family::ResMlp] {
        let cfg = ModelConfig { family, depth: 1, channels: 8, groups: 2, ..Default::default() };
        let mut m = Model::new(&cfg, 3).unwrap();
        for i in m.block_params(1, qmlp::models::Block::TokenMixing)
            .into_iter()
            .chain(m.block_params(1, qmlp::models::Block::ChannelMixing))
        {
            let name = m.info()[i].name.clone();
            let z = m.values()[i].map(|_| 0.0);
            m.set_param(&name, z).unwrap();
        }
        let x = Tensor::new(vec![2, cfg.tokens(), 8], (0..2 * cfg.tokens() * 8).map(|i| (i as f64).cos()).collect()).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (y, _) = m.layer_forward(&mut tape, &vars, 1, xv, Mode::Eval, &mut Plain).unwrap();
        assert_eq!(tape.value(y).data(), x.data(), "{family}");
    }
}
