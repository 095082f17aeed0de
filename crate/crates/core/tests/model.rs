use proptest::prelude::*;
use rpam_core::model::{
    argmax, block_tensor_name, forward_hidden, greedy_decode, logits, random_checkpoint, ModelError,
    FINAL_NORM_BIAS, FINAL_NORM_WEIGHT, POS_EMBED, TOK_EMBED, UNEMBED,
};
use rpam_core::{Checkpoint, ModelConfig, Tensor, TokenId, ToyModel};

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: 7,
        d_model: 4,
        n_layers: 2,
        n_heads: 2,
        d_ff: 8,
        max_seq: 8,
    }
}

// Straight-line reference: nested loops over plain vectors, written without
// looking at the library's matrix helpers.
struct Reference<'a> {
    c: ModelConfig,
    w: &'a Checkpoint,
}

type Rows = Vec<Vec<f64>>;

impl Reference<'_> {
    fn t(&self, name: &str) -> Vec<f64> {
        self.w.get(name).unwrap().data().iter().map(|&v| v as f64).collect()
    }

    fn b(&self, l: usize, s: &str) -> Vec<f64> {
        self.t(&block_tensor_name(l, s))
    }

    fn linear(x: &Rows, w: &[f64], b: &[f64], d_out: usize) -> Rows {
        x.iter()
            .map(|row| {
                (0..d_out)
                    .map(|o| b[o] + row.iter().enumerate().map(|(i, v)| v * w[i * d_out + o]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn norm(x: &Rows, g: &[f64], b: &[f64]) -> Rows {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g[i] + b[i])
                    .collect()
            })
            .collect()
    }

    fn hidden(&self, tokens: &[TokenId]) -> Vec<Rows> {
        let d = self.c.d_model;
        let (tok, pos) = (self.t(TOK_EMBED), self.t(POS_EMBED));
        let mut x: Rows = tokens
            .iter()
            .enumerate()
            .map(|(p, &t)| (0..d).map(|j| tok[t as usize * d + j] + pos[p * d + j]).collect())
            .collect();
        let mut out = Vec::new();
        let dh = d / self.c.n_heads;
        for l in 0..self.c.n_layers {
            let n1 = Self::norm(&x, &self.b(l, "ln1.weight"), &self.b(l, "ln1.bias"));
            let q = Self::linear(&n1, &self.b(l, "attn.q.weight"), &self.b(l, "attn.q.bias"), d);
            let k = Self::linear(&n1, &self.b(l, "attn.k.weight"), &self.b(l, "attn.k.bias"), d);
            let v = Self::linear(&n1, &self.b(l, "attn.v.weight"), &self.b(l, "attn.v.bias"), d);
            let mut ctx = vec![vec![0.0; d]; x.len()];
            for h in 0..self.c.n_heads {
                for i in 0..x.len() {
                    let s: Vec<f64> = (0..=i)
                        .map(|j| {
                            (0..dh).map(|e| q[i][h * dh + e] * k[j][h * dh + e]).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let z: f64 = s.iter().map(|v| v.exp()).sum();
                    for (j, sj) in s.iter().enumerate() {
                        for e in 0..dh {
                            ctx[i][h * dh + e] += sj.exp() / z * v[j][h * dh + e];
                        }
                    }
                }
            }
            let a = Self::linear(&ctx, &self.b(l, "attn.o.weight"), &self.b(l, "attn.o.bias"), d);
            let h: Rows = x.iter().zip(&a).map(|(r, s)| r.iter().zip(s).map(|(p, q)| p + q).collect()).collect();
            let n2 = Self::norm(&h, &self.b(l, "ln2.weight"), &self.b(l, "ln2.bias"));
            let mut f = Self::linear(&n2, &self.b(l, "mlp.fc1.weight"), &self.b(l, "mlp.fc1.bias"), self.c.d_ff);
            for r in &mut f {
                for v in r.iter_mut() {
                    *v = 0.5 * *v * (1.0 + libm::erf(*v / 2f64.sqrt()));
                }
            }
            let m = Self::linear(&f, &self.b(l, "mlp.fc2.weight"), &self.b(l, "mlp.fc2.bias"), d);
            x = h.iter().zip(&m).map(|(r, s)| r.iter().zip(s).map(|(p, q)| p + q).collect()).collect();
            out.push(x.clone());
        }
        out
    }

    fn logits(&self, tokens: &[TokenId]) -> Rows {
        let last = self.hidden(tokens).pop().unwrap();
        let n = Self::norm(&last, &self.t(FINAL_NORM_WEIGHT), &self.t(FINAL_NORM_BIAS));
        Self::linear(&n, &self.t(UNEMBED), &vec![0.0; self.c.vocab_size], self.c.vocab_size)
    }
}

#[test]
fn forward_matches_scalar_reference() {
    let c = small();
    for seed in 0..5 {
        let w = random_checkpoint(&c, seed, 0.8);
        let r = Reference { c, w: &w };
        let tokens: Vec<TokenId> = vec![3, 0, 6, 2, 2, 5];
        let hid = forward_hidden(&w, &c, &tokens).unwrap();
        for (got, want) in hid.per_layer.iter().zip(r.hidden(&tokens)) {
            for (g, e) in got.data().iter().zip(want.iter().flatten()) {
                assert!((*g as f64 - e).abs() < 1e-5, "{g} vs {e}");
            }
        }
        let lg = logits(&w, &c, &tokens).unwrap();
        let want = r.logits(&tokens);
        for (p, row) in want.iter().enumerate() {
            let got: Vec<f64> = lg.data()[p * 7..(p + 1) * 7].iter().map(|&v| v as f64).collect();
            for (g, e) in got.iter().zip(row) {
                assert!((g - e).abs() < 1e-5, "{g} vs {e}");
            }
            assert_eq!(argmax(&got), argmax(row));
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let c = small();
    let w = random_checkpoint(&c, 9, 0.5);
    let a = logits(&w, &c, &[1, 2, 3]).unwrap();
    let b = logits(&w, &c, &[1, 2, 3]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn logits_have_one_row_per_position() {
    let c = small();
    let w = random_checkpoint(&c, 1, 0.5);
    let lg = logits(&w, &c, &[1, 2, 3, 4]).unwrap();
    assert_eq!(lg.dims(), &[4, 7]);
    let hid = forward_hidden(&w, &c, &[1, 2, 3, 4]).unwrap();
    assert_eq!(hid.per_layer.len(), 2);
    assert!(hid.per_layer.iter().all(|t| t.dims() == [4, 4]));
}

#[test]
fn softmax_of_logits_is_a_distribution() {
    let c = small();
    let w = random_checkpoint(&c, 2, 1.0);
    let lg = logits(&w, &c, &[0, 1, 2, 3, 4, 5]).unwrap();
    for row in lg.data().chunks(7) {
        let m = row.iter().cloned().fold(f32::MIN, f32::max) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        let total: f64 = row.iter().map(|&v| (v as f64 - m).exp() / z).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_unembedding_gives_zero_logits() {
    let c = small();
    let mut w = random_checkpoint(&c, 3, 0.5);
    w.insert(UNEMBED, Tensor::zeros(vec![4, 7]));
    let lg = logits(&w, &c, &[1, 4]).unwrap();
    assert!(lg.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_new_tokens_returns_prompt() {
    let c = small();
    let w = random_checkpoint(&c, 4, 0.5);
    assert_eq!(greedy_decode(&w, &c, &[2, 3], 0, 6).unwrap(), vec![2, 3]);
}

#[test]
fn greedy_decode_stops_at_stop_token() {
    let c = small();
    let w = random_checkpoint(&c, 5, 1.0);
    let out = greedy_decode(&w, &c, &[1], 6, 0).unwrap();
    assert!(out.len() <= 7);
    if let Some(p) = out.iter().skip(1).position(|&t| t == 0) {
        assert_eq!(p + 2, out.len());
    }
    let model = ToyModel::from_checkpoint(&w, c).unwrap();
    for i in 1..out.len() {
        let lg = model.logit_matrix(&out[..i]).unwrap();
        assert_eq!(argmax(lg.row(i - 1)), out[i]);
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let c = small();
    let w = random_checkpoint(&c, 6, 0.5);
    assert_eq!(
        logits(&w, &c, &[7]).unwrap_err(),
        ModelError::TokenOutOfRange { id: 7, vocab: 7 }
    );
    assert!(matches!(logits(&w, &c, &[]), Err(ModelError::SequenceLength { .. })));
    assert!(matches!(
        logits(&w, &c, &[0; 9]),
        Err(ModelError::SequenceLength { len: 9, max: 8 })
    ));
    assert!(matches!(
        greedy_decode(&w, &c, &[0; 5], 4, 1),
        Err(ModelError::SequenceLength { len: 9, .. })
    ));
}

#[test]
fn nonconforming_checkpoint_names_the_tensor() {
    let c = small();
    let mut w = random_checkpoint(&c, 7, 0.5);
    w.insert("blocks.1.mlp.fc1.weight", Tensor::zeros(vec![4, 9]));
    match logits(&w, &c, &[0]).unwrap_err() {
        ModelError::TensorShape { name, .. } => assert_eq!(name, "blocks.1.mlp.fc1.weight"),
        e => panic!("{e}"),
    }
    let mut w = random_checkpoint(&c, 7, 0.5);
    w.insert("extra", Tensor::zeros(vec![1]));
    assert_eq!(
        logits(&w, &c, &[0]).unwrap_err(),
        ModelError::UnexpectedTensor("extra".into())
    );
}

#[test]
fn checkpoint_round_trips_through_model() {
    let c = small();
    let w = random_checkpoint(&c, 8, 0.5);
    let back = ToyModel::from_checkpoint(&w, c).unwrap().to_checkpoint();
    assert_eq!(back, w);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Changing a later token must not move earlier positions.
    #[test]
    fn attention_is_causal(
        seed in 0u64..1000,
        tokens in prop::collection::vec(0u32..7, 2..8),
        cut in 1usize..7,
        replacement in 0u32..7,
    ) {
        let c = small();
        let cut = cut.min(tokens.len() - 1);
        let w = random_checkpoint(&c, seed, 1.0);
        let mut other = tokens.clone();
        other[cut] = replacement;
        let a = forward_hidden(&w, &c, &tokens).unwrap();
        let b = forward_hidden(&w, &c, &other).unwrap();
        for (x, y) in a.per_layer.iter().zip(&b.per_layer) {
            prop_assert_eq!(&x.data()[..cut * 4], &y.data()[..cut * 4]);
        }
    }

    // Interpolating with (1, 0) is the identity on the first model.
    #[test]
    fn endpoint_interpolation_is_identity(seed in 0u64..1000, tokens in prop::collection::vec(0u32..7, 1..8)) {
        let c = small();
        let a = random_checkpoint(&c, seed, 1.0);
        let b = random_checkpoint(&c, seed + 1, 1.0);
        let m = rpam_core::lerp_checkpoint(&a, &b, 1.0, 0.0).unwrap();
        prop_assert_eq!(&m, &a);
        prop_assert_eq!(logits(&m, &c, &tokens).unwrap(), logits(&a, &c, &tokens).unwrap());
    }
}
