use super::*;

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size_src: vocab,
        vocab_size_tgt: vocab,
        d_model: 8,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        d_ff: 12,
        dropout: 0.1,
        frame_dim: 3,
        max_len: 16,
    }
}

// Naive re-derivation of the forward pass, written without the crate kernels.
mod oracle {
    use super::*;

    pub fn mat(p: &ParamSet<f64>, name: &str) -> (Vec<f64>, usize, usize) {
        let t = p.get(name).unwrap();
        let s = t.shape();
        if s.len() == 2 {
            (t.data().to_vec(), s[0], s[1])
        } else {
            (t.data().to_vec(), 1, s[0])
        }
    }

    pub fn linear(p: &ParamSet<f64>, name: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (w, k, n) = mat(p, &format!("{name}.w"));
        let (b, _, _) = mat(p, &format!("{name}.b"));
        x.iter()
            .map(|row| {
                (0..n)
                    .map(|j| (0..k).map(|i| row[i] * w[i * n + j]).sum::<f64>() + b[j])
                    .collect()
            })
            .collect()
    }

    pub fn norm(p: &ParamSet<f64>, name: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (g, _, _) = mat(p, &format!("{name}.g"));
        let (b, _, _) = mat(p, &format!("{name}.b"));
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

    pub fn attn(
        p: &ParamSet<f64>,
        name: &str,
        xq: &[Vec<f64>],
        xkv: &[Vec<f64>],
        heads: usize,
        causal: bool,
    ) -> Vec<Vec<f64>> {
        let q = linear(p, &format!("{name}.q"), xq);
        let k = linear(p, &format!("{name}.k"), xkv);
        let v = linear(p, &format!("{name}.v"), xkv);
        let d = q[0].len();
        let dh = d / heads;
        let mut ctx = vec![vec![0.0; d]; q.len()];
        for (i, qi) in q.iter().enumerate() {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let n = if causal { i + 1 } else { k.len() };
                let scores: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|c| qi[c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..n {
                    let w = (scores[j] - m).exp() / z;
                    for c in cols.clone() {
                        ctx[i][c] += w * v[j][c];
                    }
                }
            }
        }
        linear(p, &format!("{name}.o"), &ctx)
    }

    fn add(a: &mut [Vec<f64>], b: &[Vec<f64>]) {
        for (r, s) in a.iter_mut().zip(b) {
            for (x, y) in r.iter_mut().zip(s) {
                *x += y;
            }
        }
    }

    fn pos(t: usize, d: usize) -> Vec<f64> {
        let half = d / 2;
        let mut v = vec![0.0; d];
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v[i] = (t as f64 * f).sin();
            v[half + i] = (t as f64 * f).cos();
        }
        v
    }

    pub fn forward(m: &Seq2SeqModel<f64>, src: &[u32], prefix: &[u32]) -> Vec<Vec<f64>> {
        let p = m.params();
        let cfg = m.config();
        let d = cfg.d_model;
        let embed = |name: &str, ids: &[u32]| -> Vec<Vec<f64>> {
            let (e, _, _) = mat(p, name);
            ids.iter()
                .enumerate()
                .map(|(t, &id)| {
                    let pe = pos(t, d);
                    (0..d).map(|c| e[id as usize * d + c] * (d as f64).sqrt() + pe[c]).collect()
                })
                .collect()
        };
        let mut x = embed("enc.embed", src);
        for l in 0..cfg.n_encoder_layers {
            let h = norm(p, &format!("enc.{l}.ln1"), &x);
            add(&mut x, &attn(p, &format!("enc.{l}.attn"), &h, &h, cfg.n_heads, false));
            let h = norm(p, &format!("enc.{l}.ln2"), &x);
            let f: Vec<Vec<f64>> = linear(p, &format!("enc.{l}.ff1"), &h)
                .into_iter()
                .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
                .collect();
            add(&mut x, &linear(p, &format!("enc.{l}.ff2"), &f));
        }
        let mem = norm(p, "enc.ln", &x);
        let mut y = embed("dec.embed", prefix);
        for l in 0..cfg.n_decoder_layers {
            let h = norm(p, &format!("dec.{l}.ln1"), &y);
            add(&mut y, &attn(p, &format!("dec.{l}.self"), &h, &h, cfg.n_heads, true));
            let h = norm(p, &format!("dec.{l}.ln2"), &y);
            add(&mut y, &attn(p, &format!("dec.{l}.cross"), &h, &mem, cfg.n_heads, false));
            let h = norm(p, &format!("dec.{l}.ln3"), &y);
            let f: Vec<Vec<f64>> = linear(p, &format!("dec.{l}.ff1"), &h)
                .into_iter()
                .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
                .collect();
            add(&mut y, &linear(p, &format!("dec.{l}.ff2"), &f));
        }
        let y = norm(p, "dec.ln", &y);
        linear(p, "dec.out", &y)
    }
}

#[test]
fn fresh_model_gives_finite_logits() {
    let m = Seq2SeqModel::<f64>::new(tiny(10), Flavor::TokenEncoder, 1).unwrap();
    let logits = m.forward_teacher_forced(Source::Tokens(&[4, 5, 6]), &[BOS, 7, 8]).unwrap();
    assert_eq!(logits.shape(), &[3, 10]);
    assert!(logits.data().iter().all(|v| v.is_finite()));
}

#[test]
fn matches_hand_rolled_forward() {
    let cfg = ModelConfig {
        n_heads: 1,
        d_model: 4,
        d_ff: 6,
        ..tiny(3)
    };
    let m = Seq2SeqModel::<f64>::new(cfg, Flavor::TokenEncoder, 5).unwrap();
    let got = m.forward_teacher_forced(Source::Tokens(&[1, 0]), &[BOS, 2]).unwrap();
    let want = oracle::forward(&m, &[1, 0], &[BOS, 2]);
    assert_eq!(got.shape(), &[2, 3]);
    for (t, row) in want.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert!((got.row(t)[j] - v).abs() < 1e-12, "row {t} col {j}: {} vs {v}", got.row(t)[j]);
        }
    }
    // two heads, deeper stack
    let cfg = ModelConfig {
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        ..tiny(7)
    };
    let m = Seq2SeqModel::<f64>::new(cfg, Flavor::TokenEncoder, 6).unwrap();
    let got = m.forward_teacher_forced(Source::Tokens(&[4, 5, 6, 4]), &[BOS, 5, 6]).unwrap();
    let want = oracle::forward(&m, &[4, 5, 6, 4], &[BOS, 5, 6]);
    for (t, row) in want.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert!((got.row(t)[j] - v).abs() < 1e-11);
        }
    }
}

#[test]
fn pad_suffix_is_masked() {
    let m = Seq2SeqModel::<f64>::new(tiny(10), Flavor::TokenEncoder, 2).unwrap();
    let a = m.forward_teacher_forced(Source::Tokens(&[4, 5, 6]), &[BOS, 7]).unwrap();
    let b = m.forward_teacher_forced(Source::Tokens(&[4, 5, 6, PAD, PAD]), &[BOS, 7]).unwrap();
    assert_eq!(a.data(), b.data());

    // encoder rows of real tokens ignore how many pads follow
    let enc_rows = |src: &[u32]| {
        let mut g = Graph::new();
        let p = m.params().bind(&mut g, false);
        let e = m.encode(&mut g, &p, &[Source::Tokens(src)], &mut Mode::Eval).unwrap();
        g.value(e.out).data()[..3 * 8].to_vec()
    };
    assert_eq!(enc_rows(&[4, 5, 6, PAD]), enc_rows(&[4, 5, 6, PAD, PAD, PAD]));
}

#[test]
fn logits_are_causal() {
    let m = Seq2SeqModel::<f64>::new(tiny(10), Flavor::TokenEncoder, 3).unwrap();
    let a = m.forward_teacher_forced(Source::Tokens(&[4, 5]), &[BOS, 7, 8, 9]).unwrap();
    let b = m.forward_teacher_forced(Source::Tokens(&[4, 5]), &[BOS, 7, 4, 4]).unwrap();
    assert_eq!(a.row(0), b.row(0));
    assert_eq!(a.row(1), b.row(1));
    assert_ne!(a.row(2), b.row(2));
}

#[test]
fn eval_forward_is_deterministic() {
    let m = Seq2SeqModel::<f64>::new(tiny(10), Flavor::TokenEncoder, 4).unwrap();
    let a = m.forward_teacher_forced(Source::Tokens(&[4, 5]), &[BOS, 7]).unwrap();
    let b = m.forward_teacher_forced(Source::Tokens(&[4, 5]), &[BOS, 7]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn incremental_steps_equal_teacher_forcing() {
    for flavor in [Flavor::TokenEncoder, Flavor::FrameEncoder] {
        let m = Seq2SeqModel::<f64>::new(tiny(9), flavor, 8).unwrap();
        let frames: Vec<f32> = (0..15).map(|i| (i as f32 * 0.37).sin()).collect();
        let src = match flavor {
            Flavor::TokenEncoder => Source::Tokens(&[4, 5, 6]),
            Flavor::FrameEncoder => Source::Frames {
                data: &frames,
                n_frames: 5,
            },
        };
        let prefix = [BOS, 5, 7, 8];
        let tf = m.forward_teacher_forced(src, &prefix).unwrap();
        let mem = m.encode_memory(src).unwrap();
        let mut st = [m.start_state()];
        for (t, &tok) in prefix.iter().enumerate() {
            let lp = m.step(&mem, &mut st, &[tok]).unwrap();
            let mut want = vec![0.0; 9];
            kernels::log_softmax_row(tf.row(t), &mut want);
            assert_eq!(lp, want, "{flavor:?} step {t}");
        }
    }
}

#[test]
fn input_validation() {
    let m = Seq2SeqModel::<f64>::new(tiny(10), Flavor::TokenEncoder, 1).unwrap();
    assert!(matches!(
        m.forward_teacher_forced(Source::Tokens(&[4, 12]), &[BOS]),
        Err(KdError::InvalidToken { id: 12, .. })
    ));
    assert!(matches!(
        m.forward_teacher_forced(Source::Tokens(&[4]), &[BOS, 11]),
        Err(KdError::InvalidToken { id: 11, .. })
    ));
    let long = vec![4u32; 17];
    assert!(matches!(
        m.forward_teacher_forced(Source::Tokens(&long), &[BOS]),
        Err(KdError::InputTooLong { .. })
    ));
    assert!(m.forward_teacher_forced(Source::Tokens(&[]), &[BOS]).is_err());
    assert!(m.forward_teacher_forced(Source::Tokens(&[4]), &[5]).is_err());
    let frames = [0.0f32; 6];
    assert!(m
        .forward_teacher_forced(Source::Frames { data: &frames, n_frames: 2 }, &[BOS])
        .is_err());
}

#[test]
fn config_validation() {
    let bad = ModelConfig {
        d_model: 10,
        n_heads: 4,
        ..tiny(10)
    };
    assert!(Seq2SeqModel::<f64>::new(bad, Flavor::TokenEncoder, 0).is_err());
    let bad = ModelConfig {
        n_encoder_layers: 0,
        ..tiny(10)
    };
    assert!(Seq2SeqModel::<f64>::new(bad, Flavor::TokenEncoder, 0).is_err());
}

#[test]
fn confident_eos_decodes_immediately() {
    let mut m = Seq2SeqModel::<f64>::new(tiny(6), Flavor::TokenEncoder, 1).unwrap();
    m.params_mut().get_mut("dec.out.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    // log(0.99 / (0.01 / 5)) puts 0.99 on EOS
    let b = (0.99f64 / (0.01 / 5.0)).ln();
    m.params_mut().get_mut("dec.out.b").unwrap().data_mut()[EOS as usize] = b;
    let h = greedy_decode(&m, Source::Tokens(&[4, 5]), 5).unwrap();
    assert_eq!(h.tokens, vec![EOS]);
    assert!(!h.forced);
    assert!((h.score - 0.99f64.ln()).abs() < 1e-9);
}

#[test]
fn greedy_matches_stepwise_argmax_oracle() {
    for seed in 0..10 {
        let m = Seq2SeqModel::<f64>::new(tiny(4), Flavor::TokenEncoder, seed).unwrap();
        let src = [3u32, 2, 3];
        let h = greedy_decode(&m, Source::Tokens(&src), 3).unwrap();
        let mut prefix = vec![BOS];
        let mut want = Vec::new();
        for _ in 0..3 {
            let logits = m.forward_teacher_forced(Source::Tokens(&src), &prefix).unwrap();
            let tok = crate::numerics::argmax(logits.row(prefix.len() - 1)) as u32;
            want.push(tok);
            if tok == EOS {
                break;
            }
            prefix.push(tok);
        }
        if want.last() != Some(&EOS) {
            want.push(EOS);
            assert!(h.forced);
        }
        assert_eq!(h.tokens, want, "seed {seed}");
    }
}

#[test]
fn beam_rejects_nbest_above_beam() {
    let m = Seq2SeqModel::<f64>::new(tiny(6), Flavor::TokenEncoder, 1).unwrap();
    assert!(beam_search(&m, Source::Tokens(&[4]), 2, 3, 5).is_err());
    assert!(beam_search(&m, Source::Tokens(&[4]), 0, 0, 5).is_err());
}

#[test]
fn beam_output_sorted_and_distinct() {
    for seed in 0..20 {
        let m = Seq2SeqModel::<f64>::new(tiny(7), Flavor::TokenEncoder, seed).unwrap();
        let hyps = beam_search(&m, Source::Tokens(&[4, 5, 6]), 5, 5, 6).unwrap();
        assert!(!hyps.is_empty());
        for w in hyps.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for (i, a) in hyps.iter().enumerate() {
            assert_eq!(a.tokens.iter().filter(|&&t| t == EOS).count(), 1);
            assert_eq!(*a.tokens.last().unwrap(), EOS);
            assert!(a.score.is_finite());
            for b in &hyps[i + 1..] {
                assert_ne!(a.tokens, b.tokens);
            }
        }
    }
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..30 {
        let m = Seq2SeqModel::<f64>::new(tiny(6), Flavor::TokenEncoder, seed).unwrap();
        let src = Source::Tokens(&[4, 5]);
        let g = greedy_decode(&m, src, 6).unwrap();
        let b = beam_search(&m, src, 1, 1, 6).unwrap();
        assert_eq!(b, vec![g]);
    }
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let m = Seq2SeqModel::<f64>::new(tiny(9), Flavor::FrameEncoder, 11).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    assert_eq!(&buf[..4], b"SKDM");
    let back: Seq2SeqModel<f64> = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.flavor(), m.flavor());
    assert_eq!(back.params().tensors(), m.params().tensors());

    assert!(read_checkpoint::<f64, _>(&buf[..buf.len() - 3]).is_err());
    let mut extra = buf.clone();
    extra.push(0);
    assert!(read_checkpoint::<f64, _>(extra.as_slice()).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_checkpoint::<f64, _>(bad.as_slice()).is_err());
}

#[test]
fn encoder_transfer_copies_only_encoder() {
    let donor = Seq2SeqModel::<f64>::new(tiny(9), Flavor::FrameEncoder, 1).unwrap();
    let mut m = Seq2SeqModel::<f64>::new(tiny(9), Flavor::FrameEncoder, 2).unwrap();
    let fresh = m.clone();
    m.load_encoder_from(&donor).unwrap();
    for name in m.params().names() {
        let got = m.params().get(name).unwrap();
        if name.starts_with("enc.") {
            assert_eq!(got, donor.params().get(name).unwrap());
        } else {
            assert_eq!(got, fresh.params().get(name).unwrap());
        }
    }
    let other = Seq2SeqModel::<f64>::new(
        ModelConfig {
            d_model: 4,
            ..tiny(9)
        },
        Flavor::FrameEncoder,
        1,
    )
    .unwrap();
    assert!(matches!(
        m.load_encoder_from(&other),
        Err(KdError::IncompatibleCheckpoint(_))
    ));
}

#[test]
fn single_precision_model_runs() {
    let m = Seq2SeqModel::<f32>::new(tiny(8), Flavor::TokenEncoder, 3).unwrap();
    let h = beam_search(&m, Source::Tokens(&[4, 5]), 3, 2, 5).unwrap();
    assert_eq!(h.len(), 2);
    let m64: Seq2SeqModel<f64> = m.cast();
    assert_eq!(m64.params().num_scalars(), m.params().num_scalars());
}
