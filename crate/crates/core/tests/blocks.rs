use dmnet::blocks::attention::{fusion_specs, key_value_specs};
use dmnet::blocks::codec::{decoder_specs, encoder_specs};
use dmnet::blocks::lstm::local_lstm_specs;
use dmnet::blocks::{
    bottleneck_lstm_step, decoder_forward, dice_loss, encoder_forward, memory_read, run_local_lstm, self_attend,
    Ctx, LstmState, ParamSpec, ParamStore, Projection,
};
use dmnet::tensor::{finite_diff_check, FlopCounter};
use dmnet::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn store(specs: &[ParamSpec], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    for s in specs {
        p.insert(&s.name, random(&s.shape, &mut rng, 0.5));
    }
    p
}

/// `[C_out, N]` from a 1×1 convolution of `x [C_in, N]`, optional bias.
fn pointwise(p: &ParamStore<f64>, prefix: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = p.get(&format!("{prefix}.w")).unwrap();
    let b = p.get(&format!("{prefix}.b"));
    let (co, ci) = (w.shape()[0], w.shape()[1]);
    let n = x[0].len();
    (0..co)
        .map(|o| {
            (0..n)
                .map(|i| {
                    let bias = b.map_or(0.0, |b| b.data()[o]);
                    bias + (0..ci).map(|c| w.data()[o * ci + c] * x[c][i]).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn channels(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let c = t.shape()[0];
    t.data().chunks(t.len() / c).map(<[f64]>::to_vec).collect()
}

/// Normalised exp-similarity read, as a literal double loop without any
/// max-subtraction.
fn read(qk: &[Vec<f64>], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, m) = (qk[0].len(), keys[0].len());
    let mut out = vec![vec![0.0; n]; values.len()];
    for i in 0..n {
        let s: Vec<f64> = (0..m)
            .map(|j| (0..qk.len()).map(|c| qk[c][i] * keys[c][j]).sum::<f64>().exp())
            .collect();
        let z: f64 = s.iter().sum();
        for (cv, row) in out.iter_mut().enumerate() {
            row[i] = (0..m).map(|j| s[j] / z * values[cv][j]).sum();
        }
    }
    out
}

fn fuse(p: &ParamStore<f64>, prefix: &str, v: Vec<Vec<f64>>, r: Vec<Vec<f64>>) -> Vec<f64> {
    let cat: Vec<Vec<f64>> = v.into_iter().chain(r).collect();
    pointwise(p, &format!("{prefix}.fuse"), &cat).concat()
}

fn self_attend_oracle(p: &ParamStore<f64>, f: &Tensor<f64>) -> Vec<f64> {
    let x = channels(f);
    let k = pointwise(p, "ela.kv.key", &x);
    let v = pointwise(p, "ela.kv.value", &x);
    let r = read(&k, &k, &v);
    fuse(p, "ela", v, r)
}

fn memory_read_oracle(p: &ParamStore<f64>, f: &Tensor<f64>, memory: &[Tensor<f64>]) -> Vec<f64> {
    let x = channels(f);
    let qk = pointwise(p, "aga.query.key", &x);
    let qv = pointwise(p, "aga.query.value", &x);
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for m in memory {
        let mx = channels(m);
        let r = read(&qk, &pointwise(p, "aga.memory.key", &mx), &pointwise(p, "aga.memory.value", &mx));
        acc = Some(match acc {
            None => r,
            Some(a) => a.iter().zip(&r).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect(),
        });
    }
    let n = memory.len() as f64;
    let mean = acc.unwrap().into_iter().map(|row| row.into_iter().map(|x| x / n).collect()).collect();
    fuse(p, "aga", qv, mean)
}

fn attention_specs(c: usize, c_k: usize, c_v: usize) -> Vec<ParamSpec> {
    let mut specs = key_value_specs(Projection::Local, c, c_k, c_v);
    specs.extend(fusion_specs("ela", c_v, c));
    for which in [Projection::Query, Projection::Memory] {
        specs.extend(key_value_specs(which, c, c_k, c_v));
    }
    specs.extend(fusion_specs("aga", c_v, c));
    specs
}

fn run_self_attend(p: &ParamStore<f64>, f: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::inference();
    let mut cx = Ctx::new(&mut g, p);
    let fv = cx.g.constant(f.clone());
    let y = self_attend(&mut cx, fv).unwrap();
    g.value(y).clone()
}

fn run_memory_read(p: &ParamStore<f64>, f: &Tensor<f64>, memory: &[Tensor<f64>]) -> Tensor<f64> {
    let mut g = Graph::inference();
    let mut cx = Ctx::new(&mut g, p);
    let fv = cx.g.constant(f.clone());
    let refs: Vec<&Tensor<f64>> = memory.iter().collect();
    let y = memory_read(&mut cx, fv, &refs).unwrap();
    g.value(y).clone()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn self_attend_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..60 {
        let c = rng.random_range(1..=8);
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=5));
        let (c_k, c_v) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let p = store(&attention_specs(c, c_k, c_v), case);
        let f = random(&[c, h, w], &mut rng, 1.0);
        let got = run_self_attend(&p, &f);
        assert_eq!(got.shape(), &[c, h, w]);
        let diff = max_diff(got.data(), &self_attend_oracle(&p, &f));
        assert!(diff < 1e-9, "case {case} [{c},{h},{w}]: {diff}");
    }
}

#[test]
fn memory_read_matches_per_frame_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for case in 0..50 {
        let c = rng.random_range(1..=8);
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=5));
        let n = rng.random_range(1..=3);
        let p = store(&attention_specs(c, 3, 2), 100 + case);
        let f = random(&[c, h, w], &mut rng, 1.0);
        let memory: Vec<_> = (0..n).map(|_| random(&[c, h, w], &mut rng, 1.0)).collect();
        let diff = max_diff(run_memory_read(&p, &f, &memory).data(), &memory_read_oracle(&p, &f, &memory));
        assert!(diff < 1e-9, "case {case}: {diff}");
    }
}

#[test]
fn two_position_hand_example() {
    // keys [1, 0]; value projection -2x + 4 gives values [2, 4]; the fusion
    // keeps only the retrieved channel
    let mut p = ParamStore::new();
    p.insert("ela.kv.key.w", Tensor::full(&[1, 1, 1, 1], 1.0));
    p.insert("ela.kv.key.b", Tensor::zeros(&[1]));
    p.insert("ela.kv.value.w", Tensor::full(&[1, 1, 1, 1], -2.0));
    p.insert("ela.kv.value.b", Tensor::full(&[1], 4.0));
    p.insert("ela.fuse.w", Tensor::new(&[1, 2, 1, 1], vec![0.0, 1.0]).unwrap());
    p.insert("ela.fuse.b", Tensor::zeros(&[1]));
    let f = Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
    let out = run_self_attend(&p, &f);
    let e = std::f64::consts::E;
    assert!((out.data()[0] - (2.0 * e + 4.0) / (e + 1.0)).abs() < 1e-12);
    assert!((out.data()[0] - 2.5379).abs() < 1e-4);
}

/// Fusion that passes the retrieved half through unchanged.
fn retrieval_only(p: &mut ParamStore<f64>, prefix: &str, c: usize, c_v: usize) {
    let mut w = Tensor::zeros(&[c, 2 * c_v, 1, 1]);
    for i in 0..c.min(c_v) {
        w.data_mut()[i * 2 * c_v + c_v + i] = 1.0;
    }
    p.insert(&format!("{prefix}.fuse.w"), w);
    p.insert(&format!("{prefix}.fuse.b"), Tensor::zeros(&[c]));
}

fn spatial_mean(values: &[Vec<f64>]) -> Vec<f64> {
    values.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect()
}

#[test]
fn uniform_keys_retrieve_the_spatial_mean() {
    let (c, c_v) = (3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = store(&attention_specs(c, 2, c_v), 9);
    // zero key weights: every position shares the key equal to the bias
    p.insert("ela.kv.key.w", Tensor::zeros(&[2, c, 1, 1]));
    p.insert("aga.memory.key.w", Tensor::zeros(&[2, c, 1, 1]));
    retrieval_only(&mut p, "ela", c, c_v);
    retrieval_only(&mut p, "aga", c, c_v);
    let f = random(&[c, 3, 4], &mut rng, 1.0);

    let out = run_self_attend(&p, &f);
    let mean = spatial_mean(&pointwise(&p, "ela.kv.value", &channels(&f)));
    for (ch, row) in channels(&out).iter().enumerate() {
        assert!(row.iter().all(|&x| (x - mean[ch]).abs() < 1e-12));
    }

    let m = random(&[c, 3, 4], &mut rng, 1.0);
    let out = run_memory_read(&p, &f, std::slice::from_ref(&m));
    let mean = spatial_mean(&pointwise(&p, "aga.memory.value", &channels(&m)));
    for (ch, row) in channels(&out).iter().enumerate() {
        assert!(row.iter().all(|&x| (x - mean[ch]).abs() < 1e-12));
    }
}

#[test]
fn attention_weights_sum_to_one() {
    let (c, c_v) = (4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..10 {
        let mut p = store(&attention_specs(c, 3, c_v), seed);
        // constant values: any convex combination returns the constant
        for prefix in ["ela.kv", "aga.memory"] {
            p.insert(&format!("{prefix}.value.w"), Tensor::zeros(&[c_v, c, 1, 1]));
            p.insert(&format!("{prefix}.value.b"), Tensor::full(&[c_v], 1.0));
        }
        retrieval_only(&mut p, "ela", c, c_v);
        retrieval_only(&mut p, "aga", c, c_v);
        let f = random(&[c, 4, 5], &mut rng, 3.0);
        let mem: Vec<_> = (0..2).map(|_| random(&[c, 4, 5], &mut rng, 3.0)).collect();
        for out in [run_self_attend(&p, &f), run_memory_read(&p, &f, &mem)] {
            for (ch, row) in channels(&out).iter().enumerate() {
                let want = if ch < c_v { 1.0 } else { 0.0 };
                assert!(row.iter().all(|&x| (x - want).abs() < 1e-6));
            }
        }
    }
}

#[test]
fn memory_read_idempotent_and_rejects_bad_memory() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = store(&attention_specs(4, 2, 2), 3);
    let f = random(&[4, 3, 3], &mut rng, 1.0);
    let m = random(&[4, 3, 3], &mut rng, 1.0);
    let one = run_memory_read(&p, &f, std::slice::from_ref(&m));
    let two = run_memory_read(&p, &f, &[m.clone(), m.clone()]);
    assert!(max_diff(one.data(), two.data()) < 1e-12);

    let mut g = Graph::inference();
    let mut cx = Ctx::new(&mut g, &p);
    let fv = cx.g.constant(f.clone());
    assert!(memory_read(&mut cx, fv, &[]).is_err());
    let wrong = Tensor::zeros(&[4, 2, 3]);
    assert!(memory_read(&mut cx, fv, &[&wrong]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn memory_read_ignores_memory_order(seed in 0u64..1000, n in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = store(&attention_specs(3, 2, 2), seed);
        let f = random(&[3, 2, 3], &mut rng, 1.0);
        let mem: Vec<_> = (0..n).map(|_| random(&[3, 2, 3], &mut rng, 1.0)).collect();
        let mut rev = mem.clone();
        rev.reverse();
        let a = run_memory_read(&p, &f, &mem);
        let b = run_memory_read(&p, &f, &rev);
        prop_assert!(max_diff(a.data(), b.data()) < 1e-12);
    }

    #[test]
    fn dice_loss_stays_in_unit_interval(logits in prop::collection::vec(-5.0f64..5.0, 24), labels in prop::collection::vec(0usize..3, 8)) {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::new(&[3, 2, 4], logits).unwrap());
        let probs = g.softmax(x, 0).unwrap();
        let mut t = Tensor::zeros(&[3, 2, 4]);
        for (i, &l) in labels.iter().enumerate() {
            t.data_mut()[l * 8 + i] = 1.0;
        }
        let l = dice_loss(&mut g, probs, &t).unwrap();
        let v = g.value(l).item();
        prop_assert!((0.0..=1.0).contains(&v));
    }
}

fn lstm_store(c_in: usize, c_lstm: usize, seed: u64) -> ParamStore<f64> {
    store(&local_lstm_specs("lstm", c_in, c_lstm), seed)
}

#[test]
fn zero_lstm_cell_hand_values() {
    let p = ParamStore::<f64>::zeros(&local_lstm_specs("lstm", 1, 1));
    let mut g = Graph::inference();
    let mut cx = Ctx::new(&mut g, &p);
    let x = cx.g.constant(Tensor::zeros(&[1, 1, 1]));
    let h = cx.g.constant(Tensor::zeros(&[1, 1, 1]));
    let c = cx.g.constant(Tensor::full(&[1, 1, 1], 2.0));
    let st = bottleneck_lstm_step(&mut cx, "lstm", x, LstmState { h, c }).unwrap();
    assert!((g.value(st.c).item() - 1.0).abs() < 1e-15);
    assert!((g.value(st.h).item() - 0.5 * 1f64.tanh()).abs() < 1e-15);
    assert!((g.value(st.h).item() - 0.38079).abs() < 1e-5);

    let mut g = Graph::inference();
    let mut cx = Ctx::new(&mut g, &p);
    let x = cx.g.constant(Tensor::zeros(&[1, 1, 1]));
    let zero = LstmState::zeros(&mut cx, 1, 1, 1);
    let st = bottleneck_lstm_step(&mut cx, "lstm", x, zero).unwrap();
    assert_eq!((g.value(st.h).item(), g.value(st.c).item()), (0.0, 0.0));
}

#[test]
fn lstm_step_macs_match_closed_form() {
    let (c, cl, h, w) = (8, 8, 4, 4);
    let p = lstm_store(c, cl, 1);
    let mut g = Graph::inference().with_counter(FlopCounter::new(true));
    let mut cx = Ctx::new(&mut g, &p);
    let x = cx.g.constant(Tensor::zeros(&[c, h, w]));
    let st = LstmState::zeros(&mut cx, cl, h, w);
    bottleneck_lstm_step(&mut cx, "lstm", x, st).unwrap();
    let hw = (h * w) as u64;
    let (c, cl) = (c as u64, cl as u64);
    let want = hw * (c + cl) * cl + hw * cl * 9 + hw * cl * 4 * cl;
    assert_eq!(g.counter().total().macs, want);
}

#[test]
fn local_lstm_unrolls_step_by_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let (c, cl) = (6, 3);
    let p = lstm_store(c, cl, 2);
    let clip: Vec<_> = (0..3).map(|_| random(&[c, 2, 3], &mut rng, 1.0)).collect();
    let run = |clip: &[Tensor<f64>]| {
        let mut g = Graph::inference();
        let mut cx = Ctx::new(&mut g, &p);
        let vars: Vec<_> = clip.iter().map(|t| cx.g.constant(t.clone())).collect();
        let y = run_local_lstm(&mut cx, "lstm", &vars, cl).unwrap();
        g.value(y).clone()
    };
    let manual = {
        let mut g = Graph::inference();
        let mut cx = Ctx::new(&mut g, &p);
        let mut st = LstmState::zeros(&mut cx, cl, 2, 3);
        for t in &clip {
            let x = cx.g.constant(t.clone());
            st = bottleneck_lstm_step(&mut cx, "lstm", x, st).unwrap();
        }
        let y = cx.pointwise("lstm.out", st.h).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(&clip), manual);

    let single = run(&clip[2..]);
    let one_step = {
        let mut g = Graph::inference();
        let mut cx = Ctx::new(&mut g, &p);
        let st = LstmState::zeros(&mut cx, cl, 2, 3);
        let x = cx.g.constant(clip[2].clone());
        let st = bottleneck_lstm_step(&mut cx, "lstm", x, st).unwrap();
        let y = cx.pointwise("lstm.out", st.h).unwrap();
        g.value(y).clone()
    };
    assert_eq!(single, one_step);

    let swapped = [clip[1].clone(), clip[0].clone(), clip[2].clone()];
    assert!(max_diff(run(&swapped).data(), manual.data()) > 1e-6);

    let mut g = Graph::<f64>::inference();
    let mut cx = Ctx::new(&mut g, &p);
    assert!(run_local_lstm(&mut cx, "lstm", &[], cl).is_err());
    let a = cx.g.constant(Tensor::zeros(&[c, 2, 3]));
    let b = cx.g.constant(Tensor::zeros(&[c, 3, 3]));
    assert!(run_local_lstm(&mut cx, "lstm", &[a, b], cl).is_err());
}

#[test]
fn codec_shapes_counts_and_zero_weights() {
    let enc = encoder_specs(32);
    let count: usize = enc.iter().map(ParamSpec::size).sum();
    assert_eq!(count, (3 * 16 * 9 + 16) + (16 * 24 * 9 + 24) + (24 * 32 * 9 + 32));

    let mut specs = enc.clone();
    specs.extend(decoder_specs(32, 4));
    let p = store(&specs, 4);
    let mut g = Graph::inference();
    let mut cx = Ctx::new(&mut g, &p);
    let img = cx.g.constant(random(&[3, 64, 80], &mut ChaCha8Rng::seed_from_u64(1), 1.0));
    let f = encoder_forward(&mut cx, img).unwrap();
    assert_eq!(cx.g.shape(f), &[32, 8, 10]);
    let logits = decoder_forward(&mut cx, f).unwrap();
    assert_eq!(cx.g.shape(logits), &[4, 64, 80]);
    let bad = cx.g.constant(Tensor::zeros(&[3, 60, 80]));
    assert!(encoder_forward(&mut cx, bad).is_err());

    let zeros = ParamStore::zeros(&specs);
    let mut g = Graph::inference();
    let mut cx = Ctx::new(&mut g, &zeros);
    let img = cx.g.constant(random(&[3, 16, 16], &mut ChaCha8Rng::seed_from_u64(2), 1.0));
    let f = encoder_forward(&mut cx, img).unwrap();
    assert!(cx.g.value(f).data().iter().all(|&v| v == 0.0));
    let logits = decoder_forward(&mut cx, f).unwrap();
    let probs = cx.g.softmax(logits, 0).unwrap();
    assert!(g.value(probs).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn decoder_and_dice_pass_gradcheck() {
    let p = store(&decoder_specs(4, 3), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let f = random(&[4, 2, 3], &mut rng, 1.0);
    let mut target = Tensor::zeros(&[3, 16, 24]);
    for i in 0..16 * 24 {
        let (y, x) = (i / 24, i % 24);
        let class = if (y as i64 - 8).pow(2) + (x as i64 - 9).pow(2) < 20 { 1 } else if x > 18 { 2 } else { 0 };
        target.data_mut()[class * 16 * 24 + i] = 1.0;
    }
    let err = finite_diff_check(
        |g, v| {
            let mut cx = Ctx::new(g, &p);
            let logits = decoder_forward(&mut cx, v)?;
            let probs = cx.g.softmax(logits, 0)?;
            dice_loss(cx.g, probs, &target)
        },
        &f,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
