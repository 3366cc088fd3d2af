use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqctl::autodiff::{grad_check, Tape, Tensor, Var};
use seqctl::nn::{
    select_last_token, Activation, CrossBlock, Forward, GptBlock, MultiHeadAttention, Mlp,
    ParamStore, Transformer, TransformerConfig,
};
use seqctl::{Error, Result};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// erf by its Maclaurin series; accurate to ~1e-15 for |x| <= 2.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..80 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

fn unary(x: f64, op: impl Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
    let mut t = Tape::new();
    let v = t.constant(Tensor::scalar(x));
    let y = op(&mut t, v).unwrap();
    t.value(y).item().unwrap()
}

fn zero_all(store: &mut ParamStore, keep: impl Fn(&str) -> bool) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !keep(store.name(id)) {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

/// Max relative error of a module's parameter and input gradients.
fn module_grad_error(
    store: &ParamStore,
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Forward, &[Var]) -> Result<Var>,
) -> f64 {
    let n = store.len();
    let mut params: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    params.extend(inputs);
    let report = grad_check(
        |tape, vars| {
            let mut f = Forward::from_bound(store, std::mem::take(tape), &vars[..n])?;
            let out = build(&mut f, &vars[n..]);
            *tape = f.into_tape();
            let out = out?;
            let shape = tape.value(out).shape().to_vec();
            // Fixed random weights so no output direction has a zero gradient.
            let w = tape.constant(random_tensor(&mut ChaCha8Rng::seed_from_u64(99), &shape));
            let prod = tape.mul(out, w)?;
            tape.sum(prod)
        },
        &params,
        1e-6,
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn gelu_named_values() {
    assert_eq!(unary(0.0, |t, v| t.gelu(v)), 0.0);
    let g = unary(-10.0, |t, v| t.gelu(v));
    assert!(g > -1e-6 && g < 0.0, "gelu(-10) = {g}");
    let oracle = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
    let g1 = unary(1.0, |t, v| t.gelu(v));
    assert!((g1 - oracle).abs() < 1e-12, "{g1} vs {oracle}");
    assert!((g1 - 0.841_344_7).abs() < 1e-7);
}

fn layer_norm_values(x: &[f64], eps: f64) -> Vec<f64> {
    let mut t = Tape::new();
    let n = x.len();
    let v = t.constant(Tensor::from_vec(x.to_vec()));
    let s = t.constant(Tensor::full([n], 1.0));
    let b = t.constant(Tensor::zeros([n]));
    let y = t.layer_norm(v, s, b, eps).unwrap();
    t.value(y).data().to_vec()
}

#[test]
fn layer_norm_named_values() {
    assert_eq!(layer_norm_values(&[1.0, 1.0, 1.0], 1e-5), vec![0.0, 0.0, 0.0]);
    let y = layer_norm_values(&[1.0, 2.0, 3.0], 1e-12);
    let expect = 1.0 / (2.0f64 / 3.0).sqrt();
    for (a, b) in y.iter().zip([-expect, 0.0, expect]) {
        assert!((a - b).abs() < 1e-4, "{y:?}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
    let y = layer_norm_values(&x, 1e-12);
    let mean = y.iter().sum::<f64>() / 16.0;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
}

fn matvec(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..cols).map(|j| (0..rows).map(|i| x[i] * w.data()[i * cols + j]).sum()).collect()
}

#[test]
fn single_token_attention_is_value_then_output_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
    let x = random_tensor(&mut rng, &[1, 1, 8]);
    let mut f = Forward::inference(&store);
    let xv = f.tape.constant(x.clone());
    let out = mha.self_attend(&mut f, xv, None).unwrap().out;
    let expect = matvec(&matvec(x.data(), store.get(mha.wv.weight)), store.get(mha.wo.weight));
    for (a, b) in f.tape.value(out).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }

    // Cross attention with one query and one key behaves the same way.
    let q = random_tensor(&mut rng, &[1, 1, 8]);
    let mut f = Forward::inference(&store);
    let (qv, kv) = (f.tape.constant(q), f.tape.constant(x));
    let out = mha.cross_attend(&mut f, qv, kv, None).unwrap().out;
    for (a, b) in f.tape.value(out).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn perturbing_a_token_leaves_earlier_outputs_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let cfg = TransformerConfig { num_layers: 2, num_heads: 2, d_model: 8, d_ff: 16, context_len: 5, dropout: 0.0 };
    let tf = Transformer::new(&mut store, "tf", &cfg, 5, &mut rng).unwrap();
    let x = random_tensor(&mut rng, &[5, 8]);
    let mut y = x.clone();
    for v in &mut y.data_mut()[2 * 8..3 * 8] {
        *v += 0.5;
    }
    let run = |input: Tensor| {
        let mut f = Forward::inference(&store);
        let v = f.tape.constant(input);
        let h = tf.forward(&mut f, v, None).unwrap();
        f.tape.value(h).clone()
    };
    let (hx, hy) = (run(x), run(y));
    assert_eq!(hx.data()[..16], hy.data()[..16]);
    assert_ne!(hx.row(2), hy.row(2));
}

#[test]
fn zero_query_key_weights_give_uniform_causal_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 8, 4, &mut rng).unwrap();
    store.get_mut(mha.wq.weight).data_mut().fill(0.0);
    store.get_mut(mha.wk.weight).data_mut().fill(0.0);
    let c = 6;
    let mut f = Forward::inference(&store);
    let x = f.tape.constant(random_tensor(&mut rng, &[1, c, 8]));
    let out = mha.self_attend(&mut f, x, None).unwrap();
    let w = f.tape.attention_weights(out.weights).unwrap();
    for h in 0..4 {
        for i in 0..c {
            for j in 0..c {
                let got = w[(h * c + i) * c + j];
                let expect = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert!((got - expect).abs() < 1e-12, "h{h} i{i} j{j}: {got}");
            }
        }
    }
}

#[test]
fn padded_keys_get_no_weight_and_empty_rows_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
    let c = 5;
    let mask = vec![false, false, true, true, true];
    let mut f = Forward::inference(&store);
    let x = f.tape.constant(random_tensor(&mut rng, &[1, c, 8]));
    // Rows 0 and 1 would see only masked keys.
    let err = mha.self_attend(&mut f, x, Some(&mask)).unwrap_err();
    assert!(matches!(err, Error::EmptyAttentionRow { .. }), "{err:?}");

    let mask = vec![true, false, true, false, true];
    let out = mha.self_attend(&mut f, x, Some(&mask)).unwrap();
    let w = f.tape.attention_weights(out.weights).unwrap();
    for h in 0..2 {
        for i in 0..c {
            for j in [1, 3] {
                assert!(w[(h * c + i) * c + j] < 1e-12);
            }
        }
    }
}

#[test]
fn zero_weight_blocks_are_the_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let blocks: Vec<GptBlock> = (0..3)
        .map(|i| GptBlock::new(&mut store, &format!("b{i}"), 8, 2, 16, 0.0, &mut rng).unwrap())
        .collect();
    zero_all(&mut store, |name| name.ends_with(".scale"));
    let x = random_tensor(&mut rng, &[2, 4, 8]);
    let mut f = Forward::inference(&store);
    let mut h = f.tape.constant(x.clone());
    for (k, b) in blocks.iter().enumerate() {
        h = b.forward(&mut f, h, None).unwrap().0;
        assert_eq!(f.tape.value(h), &x, "after block {k}");
    }
}

#[test]
fn transformer_without_layers_is_final_norm_of_tokens_plus_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let cfg = TransformerConfig { num_layers: 0, num_heads: 2, d_model: 4, d_ff: 8, context_len: 3, dropout: 0.0 };
    let tf = Transformer::new(&mut store, "tf", &cfg, 3, &mut rng).unwrap();
    let x = random_tensor(&mut rng, &[3, 4]);
    let mut f = Forward::inference(&store);
    let v = f.tape.constant(x.clone());
    let h = tf.forward(&mut f, v, None).unwrap();
    let pos = store.get(tf.positions);
    for r in 0..3 {
        let z: Vec<f64> = (0..4).map(|c| x.row(r)[c] + pos.row(r)[c]).collect();
        let mean = z.iter().sum::<f64>() / 4.0;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        for c in 0..4 {
            let expect = (z[c] - mean) / (var + 1e-5).sqrt();
            assert!((f.tape.value(h).row(r)[c] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn default_config_maps_ten_by_128_to_same_shape() {
    let cfg = TransformerConfig::default();
    assert_eq!((cfg.num_layers, cfg.num_heads, cfg.d_model, cfg.d_ff, cfg.context_len), (1, 4, 128, 256, 10));
    assert_eq!(cfg.dropout, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let tf = Transformer::new(&mut store, "tf", &cfg, cfg.context_len, &mut rng).unwrap();
    let mut f = Forward::inference(&store);
    let v = f.tape.constant(random_tensor(&mut rng, &[10, 128]));
    let h = tf.forward(&mut f, v, None).unwrap();
    assert_eq!(f.tape.value(h).shape(), &[10, 128]);
    assert!(f.tape.value(h).is_finite());

    let long = f.tape.constant(random_tensor(&mut rng, &[11, 128]));
    assert!(matches!(tf.forward(&mut f, long, None), Err(Error::Shape(_))));
}

#[test]
fn config_validation() {
    let bad = TransformerConfig { d_model: 10, num_heads: 4, ..Default::default() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = TransformerConfig { context_len: 0, ..Default::default() };
    assert!(bad.validate().is_err());
    let bad = TransformerConfig { dropout: 1.0, ..Default::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn truncating_the_suffix_keeps_prefix_hidden_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let cfg = TransformerConfig { num_layers: 2, num_heads: 2, d_model: 8, d_ff: 16, context_len: 10, dropout: 0.0 };
    let tf = Transformer::new(&mut store, "tf", &cfg, 10, &mut rng).unwrap();
    let x = random_tensor(&mut rng, &[10, 8]);
    let mut f = Forward::inference(&store);
    let full = f.tape.constant(x.clone());
    let prefix = f.tape.constant(Tensor::new([6, 8], x.data()[..48].to_vec()).unwrap());
    let hf = tf.forward(&mut f, full, None).unwrap();
    let hp = tf.forward(&mut f, prefix, None).unwrap();
    for (a, b) in f.tape.value(hp).data().iter().zip(f.tape.value(hf).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn permuting_tokens_changes_the_last_hidden_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let cfg = TransformerConfig { num_layers: 1, num_heads: 2, d_model: 8, d_ff: 16, context_len: 4, dropout: 0.0 };
    let tf = Transformer::new(&mut store, "tf", &cfg, 4, &mut rng).unwrap();
    let x = random_tensor(&mut rng, &[4, 8]);
    let rows: Vec<Vec<f64>> = [2, 0, 3, 1].iter().map(|&r| x.row(r).to_vec()).collect();
    let y = Tensor::from_rows(&rows).unwrap();
    let last = |input: Tensor| {
        let mut f = Forward::inference(&store);
        let v = f.tape.constant(input);
        let h = tf.forward(&mut f, v, None).unwrap();
        let l = select_last_token(&mut f, h).unwrap();
        f.tape.value(l).data().to_vec()
    };
    let (a, b) = (last(x), last(y));
    assert!(a.iter().zip(&b).any(|(p, q)| (p - q).abs() > 1e-6));
}

#[test]
fn gpt_block_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let block = GptBlock::new(&mut store, "b", 8, 2, 16, 0.0, &mut rng).unwrap();
    // Move the layer-norm parameters off their initial values.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).contains(".ln") {
            for v in store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let x = random_tensor(&mut rng, &[2, 4, 8]);
    let err = module_grad_error(&store, vec![x], |f, inp| Ok(block.forward(f, inp[0], None)?.0));
    assert!(err <= 1e-4, "rel error {err}");
}

#[test]
fn transformer_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let cfg = TransformerConfig { num_layers: 2, num_heads: 2, d_model: 8, d_ff: 8, context_len: 4, dropout: 0.0 };
    let tf = Transformer::new(&mut store, "tf", &cfg, 4, &mut rng).unwrap();
    let x = random_tensor(&mut rng, &[1, 3, 8]);
    let err = module_grad_error(&store, vec![x], |f, inp| tf.forward(f, inp[0], None));
    assert!(err <= 1e-4, "rel error {err}");
}

#[test]
fn cross_block_passes_gradient_check_and_respects_constant_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let block = CrossBlock::new(&mut store, "x", 8, 2, 16, 0.0, &mut rng).unwrap();
    let q = random_tensor(&mut rng, &[2, 3, 8]);
    let kv = random_tensor(&mut rng, &[2, 4, 8]);
    let err = module_grad_error(&store, vec![q.clone(), kv], |f, inp| {
        Ok(block.forward(f, inp[0], inp[1], None)?.0)
    });
    assert!(err <= 1e-4, "rel error {err}");

    // With identical key rows the output cannot depend on W_Q or W_K.
    let row: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let kv_const = Tensor::new([1, 4, 8], row.repeat(4)).unwrap();
    let q1 = Tensor::new([1, 3, 8], q.data()[..24].to_vec()).unwrap();
    let run = |store: &ParamStore| {
        let mut f = Forward::inference(store);
        let (a, b) = (f.tape.constant(q1.clone()), f.tape.constant(kv_const.clone()));
        let out = block.attn.cross_attend(&mut f, a, b, None).unwrap().out;
        f.tape.value(out).data().to_vec()
    };
    let before = run(&store);
    for v in store.get_mut(block.attn.wq.weight).data_mut() {
        *v *= -3.0;
    }
    let after = run(&store);
    for (a, b) in before.iter().zip(&after) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn select_last_token_examples() {
    let mut store = ParamStore::new();
    let w = store.insert("w", Tensor::new([10, 10], (0..100).map(|i| if i % 11 == 0 { 1.0 } else { 0.0 }).collect()).unwrap()).unwrap();
    let mut f = Forward::training(&store);
    let h = f.param(w);
    let last = select_last_token(&mut f, h).unwrap();
    let mut one_hot = vec![0.0; 10];
    one_hot[9] = 1.0;
    assert_eq!(f.tape.value(last).data(), &one_hot[..]);
    let s = f.tape.sum(last).unwrap();
    f.tape.backward(s).unwrap();
    let g = f.grad(w).unwrap();
    assert!(g[..90].iter().all(|&v| v == 0.0));
    assert!(g[90..].iter().all(|&v| v == 1.0));

    let mut f = Forward::inference(&store);
    let single = f.tape.constant(Tensor::new([1, 3], vec![4.0, 5.0, 6.0]).unwrap());
    let s = select_last_token(&mut f, single).unwrap();
    assert_eq!(f.tape.value(s).data(), &[4.0, 5.0, 6.0]);
    let flat = f.tape.constant(Tensor::from_vec(vec![1.0]));
    assert!(select_last_token(&mut f, flat).is_err());
}

#[test]
fn mlp_zero_weights_and_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "m", &[17, 256, 256, 6], Activation::Relu, &mut rng).unwrap();
    let mut f = Forward::inference(&store);
    let x = f.tape.constant(random_tensor(&mut rng, &[3, 17]));
    let y = mlp.forward(&mut f, x).unwrap();
    assert_eq!(f.tape.value(y).shape(), &[3, 6]);

    let mut zeroed = store.clone();
    zero_all(&mut zeroed, |_| false);
    let mut f = Forward::inference(&zeroed);
    let x = f.tape.constant(random_tensor(&mut rng, &[3, 17]));
    let y = mlp.forward(&mut f, x).unwrap();
    assert!(f.tape.value(y).data().iter().all(|&v| v == 0.0));

    for act in [Activation::Relu, Activation::Gelu, Activation::Tanh] {
        let mut store = ParamStore::new();
        let small = Mlp::new(&mut store, "m", &[3, 5, 4, 2], act, &mut rng).unwrap();
        let x = random_tensor(&mut rng, &[4, 3]);
        let err = module_grad_error(&store, vec![x], |f, inp| small.forward(f, inp[0]));
        assert!(err <= 1e-4, "{act:?}: {err}");
    }
    assert!(Mlp::new(&mut ParamStore::new(), "m", &[3], Activation::Relu, &mut rng).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::new();
    let cfg = TransformerConfig { num_layers: 1, num_heads: 2, d_model: 8, d_ff: 16, context_len: 4, dropout: 0.0 };
    Transformer::new(&mut store, "actor.backbone", &cfg, 4, &mut rng).unwrap();
    assert!(store.id("actor.backbone.block0.attn.wq.weight").is_some());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.json");
    store.save(&path).unwrap();
    let loaded = ParamStore::load(&path).unwrap();
    assert_eq!(loaded, store);

    let mut other = ParamStore::new();
    Transformer::new(&mut other, "actor.backbone", &cfg, 4, &mut rng).unwrap();
    assert_ne!(other, store);
    other.load_values_from(&loaded).unwrap();
    assert_eq!(other, store);

    let mut wrong = ParamStore::new();
    wrong.insert("x", Tensor::zeros([2])).unwrap();
    assert!(wrong.load_values_from(&loaded).is_err());
    assert!(ParamStore::from_json("{\"format\":\"other\",\"version\":1,\"params\":[]}").is_err());
}

#[test]
fn dropout_only_acts_with_a_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut store = ParamStore::new();
    let block = GptBlock::new(&mut store, "b", 8, 2, 16, 0.5, &mut rng).unwrap();
    let x = random_tensor(&mut rng, &[1, 4, 8]);
    let run = |seed: Option<u64>| {
        let mut f = Forward::inference(&store);
        if let Some(s) = seed {
            f = f.with_dropout_seed(s);
        }
        let v = f.tape.constant(x.clone());
        let h = block.forward(&mut f, v, None).unwrap().0;
        f.tape.value(h).data().to_vec()
    };
    assert_eq!(run(None), run(None));
    assert_eq!(run(Some(1)), run(Some(1)));
    assert_ne!(run(None), run(Some(1)));
}
