use likra_core::lm::{
    answer_labels, forward, masked_loss_graph, sequence_loglik, token_loglik, BaseWeights, Head,
    LoraAdapter, LoraConfig, LoraTarget, ModelConfig,
};
use likra_core::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(vocab: usize, d: usize, heads: usize, ff: usize, len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        n_layers: 1,
        d_model: d,
        n_heads: heads,
        d_ff: ff,
        max_seq_len: len,
    }
}

/// Replaces every parameter with draws of a larger scale so the model is far
/// from uniform and every path carries signal.
fn randomize(base: &mut BaseWeights<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in base.params_mut() {
        for x in t.data_mut() {
            *x = rng.random_range(-std..std);
        }
    }
}

// Plain-vector reference implementation used as an oracle.
type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor<f64>) -> Mat {
    let [r, c] = t.shape() else { panic!("not a matrix") };
    (0..*r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn times_t(x: &Mat, w: &Mat) -> Mat {
    x.iter()
        .map(|row| w.iter().map(|wr| row.iter().zip(wr).map(|(a, b)| a * b).sum()).collect())
        .collect()
}

fn ln(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn reference_forward(w: &BaseWeights<f64>, tokens: &[u32]) -> Mat {
    let cfg = &w.config;
    let (tok, pos) = (mat(&w.tok_emb), mat(&w.pos_emb));
    let mut x: Mat = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| tok[t as usize].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect();
    let n = tokens.len();
    let dh = cfg.d_model / cfg.n_heads;
    for l in &w.layers {
        let h = ln(&x, l.ln1_gamma.data(), l.ln1_beta.data());
        let q = times_t(&h, &mat(&l.wq));
        let k = times_t(&h, &mat(&l.wk));
        let v = times_t(&h, &mat(&l.wv));
        let mut att = vec![vec![0.0; cfg.d_model]; n];
        for head in 0..cfg.n_heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    for c in cols.clone() {
                        att[i][c] += s.exp() / z * v[j][c];
                    }
                }
            }
        }
        let o = times_t(&att, &mat(&l.wo));
        for i in 0..n {
            for c in 0..cfg.d_model {
                x[i][c] += o[i][c];
            }
        }
        let h2 = ln(&x, l.ln2_gamma.data(), l.ln2_beta.data());
        let mut f = times_t(&h2, &mat(&l.w1));
        for row in &mut f {
            for (c, v) in row.iter_mut().enumerate() {
                *v = gelu(*v + l.b1.data()[c]);
            }
        }
        let f2 = times_t(&f, &mat(&l.w2));
        for i in 0..n {
            for c in 0..cfg.d_model {
                x[i][c] += f2[i][c] + l.b2.data()[c];
            }
        }
    }
    times_t(&ln(&x, w.lnf_gamma.data(), w.lnf_beta.data()), &mat(&w.w_out))
}

#[test]
fn hand_sized_forward_matches_reference() {
    let mut w = BaseWeights::<f64>::init(&tiny(3, 2, 1, 4, 6), 1).unwrap();
    randomize(&mut w, 0.8, 2);
    let tokens = [0, 2, 1, 1, 0];
    let got = forward(&Head::base_only(&w), &tokens).unwrap();
    let want = reference_forward(&w, &tokens);
    for (i, row) in want.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((got.data()[i * 3 + j] - v).abs() < 1e-5, "({i},{j})");
        }
    }
}

#[test]
fn wider_forward_matches_reference() {
    let mut w = BaseWeights::<f64>::init(&tiny(7, 8, 2, 12, 8), 3).unwrap();
    randomize(&mut w, 0.5, 4);
    let tokens = [6, 0, 3, 3, 5, 1];
    let got = forward(&Head::base_only(&w), &tokens).unwrap();
    let want = reference_forward(&w, &tokens);
    for (i, row) in want.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((got.data()[i * 7 + j] - v).abs() < 1e-9);
        }
    }
}

#[test]
fn enumeration_matches_chain_rule_and_normalizes() {
    let mut w = BaseWeights::<f64>::init(&tiny(3, 4, 2, 8, 8), 5).unwrap();
    randomize(&mut w, 0.7, 6);
    let head = Head::base_only(&w);
    let context = [0u32, 2];
    let mut total = 0.0;
    for a in 0..3u32 {
        for b in 0..3u32 {
            for c in 0..3u32 {
                let target = [a, b, c];
                let ll = token_loglik(&head, &context, &target).unwrap();
                // Chain rule from separate prefix passes.
                let mut chain = 0.0;
                for t in 0..3 {
                    let prefix: Vec<u32> = context.iter().chain(&target[..t]).copied().collect();
                    let logits = forward(&head, &prefix).unwrap();
                    let row = &logits.data()[(prefix.len() - 1) * 3..];
                    let z: f64 = row.iter().map(|x| x.exp()).sum();
                    chain += (row[target[t] as usize].exp() / z).ln();
                }
                assert!((ll.exp() - chain.exp()).abs() < 1e-6);
                total += ll.exp();
            }
        }
    }
    assert!((total - 1.0).abs() < 1e-5, "{total}");
}

#[test]
fn fresh_adapter_is_bitwise_noop() {
    let cfg = tiny(259, 16, 2, 32, 24);
    let base = BaseWeights::<f32>::init(&cfg, 9).unwrap();
    let lora = LoraConfig {
        targets: vec![LoraTarget::Query, LoraTarget::Key, LoraTarget::Value, LoraTarget::Output],
        ..LoraConfig::default()
    };
    let ad = LoraAdapter::<f32>::new(&cfg, &lora, 10).unwrap();
    let plain = Head::base_only(&base);
    let adapted = Head::with_adapter(&base, &ad).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.random_range(1..=24);
        let tokens: Vec<u32> = (0..n).map(|_| rng.random_range(0..259)).collect();
        let a = forward(&plain, &tokens).unwrap();
        let b = forward(&adapted, &tokens).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn trained_adapter_changes_logits() {
    let cfg = tiny(259, 16, 2, 32, 24);
    let base = BaseWeights::<f32>::init(&cfg, 9).unwrap();
    let mut ad = LoraAdapter::<f32>::new(&cfg, &LoraConfig::default(), 10).unwrap();
    ad.blocks[1].b.data_mut()[0] = 0.5;
    let a = forward(&Head::base_only(&base), &[1, 2, 3]).unwrap();
    let b = forward(&Head::with_adapter(&base, &ad).unwrap(), &[1, 2, 3]).unwrap();
    assert_ne!(a.data(), b.data());
}

#[test]
fn logits_are_causal() {
    let mut w = BaseWeights::<f64>::init(&tiny(11, 8, 2, 16, 12), 12).unwrap();
    randomize(&mut w, 0.5, 13);
    let head = Head::base_only(&w);
    let full = [1u32, 4, 7, 2, 9, 0, 3];
    let whole = forward(&head, &full).unwrap();
    for cut in 1..full.len() {
        let part = forward(&head, &full[..cut]).unwrap();
        assert_eq!(part.data(), &whole.data()[..cut * 11]);
        let mut changed = full;
        for t in changed.iter_mut().skip(cut) {
            *t = (*t + 5) % 11;
        }
        let other = forward(&head, &changed).unwrap();
        assert_eq!(&other.data()[..cut * 11], &whole.data()[..cut * 11]);
    }
}

#[test]
fn equal_length_candidates_rank_the_same_by_total_and_per_char() {
    let base = BaseWeights::<f32>::init(&tiny(259, 16, 2, 32, 64), 14).unwrap();
    let head = Head::base_only(&base);
    let cands = ["red", "tan", "sky", "owl"];
    let ll: Vec<_> = cands
        .iter()
        .map(|c| sequence_loglik(&head, "Question: colour?\nAnswer: ", c).unwrap())
        .collect();
    let argmax = |f: &dyn Fn(usize) -> f64| {
        (0..cands.len()).fold(0, |best, i| if f(i) > f(best) { i } else { best })
    };
    assert_eq!(argmax(&|i| ll[i].total), argmax(&|i| ll[i].per_char));
}

fn loss_and_grads(
    base: &BaseWeights<f64>,
    ad: &LoraAdapter<f64>,
    inputs: &[u32],
    labels: &[usize],
    mask: &[bool],
) -> (f64, Vec<Vec<f64>>) {
    let head = Head::with_adapter(base, ad).unwrap();
    let mut g = Graph::new();
    let (loss, b) = masked_loss_graph(&mut g, &head, inputs, labels, mask).unwrap();
    let value = g.value(loss)[0];
    g.backward(loss).unwrap();
    let grads = b
        .base
        .iter()
        .chain(&b.adapter)
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    (value, grads)
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = tiny(259, 16, 2, 32, 32);
    let mut base = BaseWeights::<f64>::init(&cfg, 15).unwrap();
    randomize(&mut base, 0.3, 16);
    base.set_trainable(true);
    let mut ad = LoraAdapter::<f64>::new(&cfg, &LoraConfig::default(), 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for blk in &mut ad.blocks {
        for x in blk.b.data_mut() {
            *x = rng.random_range(-0.2..0.2);
        }
    }
    let ctx: Vec<u32> = [256].into_iter().chain("Question: why?\nAnswer: ".bytes().map(u32::from)).collect();
    let tgt: Vec<u32> = "because".bytes().map(u32::from).collect();
    let (inputs, labels, mask) = answer_labels(&ctx, &tgt);
    let (_, grads) = loss_and_grads(&base, &ad, &inputs, &labels, &mask);

    let h = 1e-3;
    let n_base = base.params().len();
    let mut worst: f64 = 0.0;
    for (pi, analytic) in grads.iter().enumerate() {
        let len = analytic.len();
        // Embedding tables are sparse in the loss; probe the rows that are used.
        let coords: Vec<usize> = (0..12)
            .map(|_| match pi {
                0 => inputs[rng.random_range(0..inputs.len())] as usize * 16 + rng.random_range(0..16),
                1 => rng.random_range(0..inputs.len() * 16),
                _ => rng.random_range(0..len),
            })
            .collect();
        for &ci in &coords {
            let eval = |delta: f64| {
                let (mut b2, mut a2) = (base.clone(), ad.clone());
                if pi < n_base {
                    b2.params_mut()[pi].1.data_mut()[ci] += delta;
                } else {
                    a2.params_mut()[pi - n_base].1.data_mut()[ci] += delta;
                }
                loss_and_grads(&b2, &a2, &inputs, &labels, &mask).0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max(rel);
        }
    }
    eprintln!("max relative error {worst:e}");
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn loss_ignores_labels_outside_the_answer() {
    let cfg = tiny(259, 16, 2, 32, 32);
    let base = BaseWeights::<f64>::init(&cfg, 19).unwrap();
    let mut ad = LoraAdapter::<f64>::new(&cfg, &LoraConfig::default(), 20).unwrap();
    ad.blocks[0].b.data_mut()[2] = 0.1;
    let ctx: Vec<u32> = vec![256, 81, 58, 32, 65, 58, 32];
    let tgt: Vec<u32> = vec![120, 121];
    let (inputs, labels, mask) = answer_labels(&ctx, &tgt);
    let (l1, g1) = loss_and_grads(&base, &ad, &inputs, &labels, &mask);
    let mut relabeled = labels.clone();
    for (i, m) in mask.iter().enumerate() {
        if !m {
            relabeled[i] = (relabeled[i] * 7 + 3) % 259;
        }
    }
    let (l2, g2) = loss_and_grads(&base, &ad, &inputs, &relabeled, &mask);
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}
